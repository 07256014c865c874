//! End-to-end experiment orchestration: seeding, data preparation, the
//! round loop (broadcast, local training, attack, defense, evaluation),
//! metric logging, and the alpha sweep.
//!
//! A run is a pure function of its [`SimConfig`]: every RNG stream is
//! derived from the master seed plus fixed tags, client training streams
//! depend only on `(seed, client_id, round)`, and uploads are collected in
//! client-index order before the defense runs, so concurrent training
//! cannot change any output byte.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    coordinate_median, faba_select, fedavg, multi_krum_select, robustfl_round, trimmed_mean,
    ClientUpdate,
};
use crate::attack::{apply_attack, training_data, AttackSpec};
use crate::config::{DataConfig, DefenseRule, PartitionScheme, SimConfig};
use crate::dataset::{load_mnist, partition_iid, partition_noniid, synth_blobs, LabeledDataset};
use crate::detector::{detection_metrics, precision_recall_f1};
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::seeds;
use crate::smoothing::{init_guided, SmoothingState};
use crate::trainer::{evaluate, init_params, sgd_train, ModelSpec, TrainConfig};

/// Precision/recall/F1 of one round's malicious verdicts against the
/// configured ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// One line of the run log. `scores`, `sc`, `lc` appear only for the
/// prediction-based defense; `detection` appears whenever the defense
/// identifies clients (prediction-based, Multi-Krum, FABA). The benign and
/// malicious id lists always partition the client population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub accuracy: f64,
    pub benign_ids: Vec<usize>,
    pub malicious_ids: Vec<usize>,
    /// Ground-truth compromised ids from the config.
    pub truth_malicious_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionStats>,
}

/// Sidecar summary written next to each log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds: usize,
    pub final_accuracy: Option<f64>,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub mean_f1: Option<f64>,
    pub ground_truth_malicious: Vec<usize>,
}

/// Everything a run produces beyond the log records.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub final_model: ParamVector,
    pub final_state: Option<SmoothingState>,
}

struct Prepared {
    model_spec: ModelSpec,
    shards: Vec<LabeledDataset>,
    eval_set: LabeledDataset,
    guiding: Option<LabeledDataset>,
    attack: AttackSpec,
}

fn load_data(config: &SimConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match &config.data {
        DataConfig::Blobs {
            n_per_class,
            test_per_class,
            num_classes,
            n_features,
            spread,
        } => {
            // one generation call so train and test share class centers;
            // samples interleave classes, so the prefix split stays balanced
            let all = synth_blobs(
                n_per_class + test_per_class,
                *num_classes,
                *n_features,
                *spread,
                seeds::blobs(config.seed, 0),
            )?;
            let n_train = n_per_class * num_classes;
            let train = all.head(n_train)?;
            let test_rows: Vec<usize> = (n_train..all.len()).collect();
            let test = all.subset(&test_rows)?;
            Ok((train, test))
        }
        DataConfig::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => {
            let train = load_mnist(train_images, train_labels, *train_limit)?;
            let test = load_mnist(test_images, test_labels, *test_limit)?;
            Ok((train, test))
        }
    }
}

fn prepare(config: &SimConfig) -> Result<Prepared> {
    config.validate()?;
    let (train, test) = load_data(config)?;

    let mut layer_sizes = Vec::with_capacity(config.model.hidden.len() + 2);
    layer_sizes.push(train.n_features());
    layer_sizes.extend_from_slice(&config.model.hidden);
    layer_sizes.push(train.num_classes());
    let model_spec = ModelSpec::new(layer_sizes)?;

    let partition = match config.partition.scheme {
        PartitionScheme::Iid => {
            partition_iid(&train, config.clients, seeds::partition(config.seed))?
        }
        PartitionScheme::Noniid => partition_noniid(
            &train,
            config.clients,
            self_q(config)?,
            seeds::partition(config.seed),
        )?,
    };

    let attack = AttackSpec::new(
        config.attack.kind,
        config.attack.sign_flip_c,
        config.attack.lie_z,
        config.malicious_ids(),
    )?;

    // each client's raw shard, materialized once
    let mut shards = Vec::with_capacity(config.clients);
    for k in 0..config.clients {
        shards.push(train.subset(partition.client_indices(k))?);
    }

    // guiding data comes from the test split, never from a client shard
    let guiding = if config.defense.rule == DefenseRule::Robustfl {
        if config.guiding.size > test.len() {
            return Err(Error::config(format!(
                "guiding size {} exceeds test split of {}",
                config.guiding.size,
                test.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::guiding_sample(config.seed));
        let picked = rand::seq::index::sample(&mut rng, test.len(), config.guiding.size);
        let mut indices: Vec<usize> = picked.into_iter().collect();
        indices.sort_unstable();
        Some(test.subset(&indices)?)
    } else {
        None
    };

    let eval_set = match config.eval.test_limit {
        Some(limit) if limit > 0 => test.head(limit)?,
        _ => test,
    };

    Ok(Prepared {
        model_spec,
        shards,
        eval_set,
        guiding,
        attack,
    })
}

fn self_q(config: &SimConfig) -> Result<f64> {
    config
        .partition
        .q
        .ok_or_else(|| Error::config("partition.q is required for the noniid scheme"))
}

/// Executes the configured experiment and returns the per-round records
/// plus the final model and (for the prediction-based defense) the final
/// smoothing state.
pub fn run_full(config: &SimConfig) -> Result<RunOutput> {
    let prepared = prepare(config)?;
    let Prepared {
        model_spec,
        shards,
        eval_set,
        guiding,
        attack,
    } = prepared;

    let truth = attack.malicious_ids.clone();
    let truth_vec: Vec<usize> = truth.iter().copied().collect();
    let k = config.clients;
    let f_true = truth.len();

    // baselines get the true attacker count unless the config pins one
    let f_assumed = config.defense.f.unwrap_or(f_true);
    let krum_m = config.defense.m.unwrap_or_else(|| k.saturating_sub(f_assumed).max(1));
    let trim_beta = config
        .defense
        .trim_beta
        .unwrap_or_else(|| f_true.min((k.saturating_sub(1)) / 2));

    let mut global = init_params(&model_spec, seeds::model_init(config.seed))?;
    let base_train = TrainConfig {
        local_iterations: config.training.local_iterations,
        batch_size: config.training.batch_size,
        learning_rate: config.training.learning_rate,
        seed: 0,
    };

    let mut state: Option<SmoothingState> = None;
    if config.defense.rule == DefenseRule::Robustfl {
        let guiding = guiding.expect("guiding data prepared for this defense");
        let guided_cfg = TrainConfig {
            seed: seeds::guided_training(config.seed),
            learning_rate: config
                .guiding
                .learning_rate
                .unwrap_or(config.training.learning_rate),
            batch_size: config
                .guiding
                .batch_size
                .unwrap_or(config.training.batch_size),
            ..base_train.clone()
        };
        let (w0, s) = init_guided(
            &global,
            &model_spec,
            &guiding,
            config.guiding.epochs,
            &guided_cfg,
            config.defense.alpha,
        )?;
        global = w0;
        state = Some(s);
    }

    // label-flip attackers train on their poisoned shard every round
    let train_sets: Vec<LabeledDataset> = (0..k)
        .map(|id| training_data(&attack, id, &shards[id]))
        .collect();

    let mut records = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let train_one = |id: usize| -> Result<ParamVector> {
            let cfg = TrainConfig {
                seed: seeds::client_train(config.seed, id, round),
                ..base_train.clone()
            };
            sgd_train(&global, &model_spec, &train_sets[id], &cfg)
        };
        let locals: Vec<ParamVector> = if config.parallel {
            (0..k).into_par_iter().map(train_one).collect::<Result<_>>()?
        } else {
            (0..k).map(train_one).collect::<Result<_>>()?
        };

        // colluding attackers see each other's honest updates
        let context: Vec<ParamVector> = truth.iter().map(|&id| locals[id].clone()).collect();

        let mut uploads = Vec::with_capacity(k);
        for id in 0..k {
            let (upload, _) = apply_attack(&attack, id, &locals[id], &shards[id], &context)?;
            uploads.push(ClientUpdate::new(id, upload, shards[id].len())?);
        }

        let all_ids: Vec<usize> = (0..k).collect();
        let (w_next, mut record) = match config.defense.rule {
            DefenseRule::Robustfl => {
                let current = state.take().expect("state initialized for this defense");
                let (w, next_state, report) = robustfl_round(&uploads, &current)?;
                state = Some(next_state);
                let (precision, recall, f1) = detection_metrics(&report, &truth)?;
                let record = RoundRecord {
                    round,
                    accuracy: 0.0,
                    benign_ids: report.benign_ids.iter().copied().collect(),
                    malicious_ids: report.malicious_ids.iter().copied().collect(),
                    truth_malicious_ids: truth_vec.clone(),
                    scores: Some(report.scores.iter().map(|&(_, s)| s).collect()),
                    sc: Some(report.sc),
                    lc: Some(report.lc),
                    detection: Some(DetectionStats {
                        precision,
                        recall,
                        f1,
                    }),
                };
                (w, record)
            }
            DefenseRule::Fedavg => (
                fedavg(&uploads)?,
                plain_record(round, &all_ids, &truth_vec),
            ),
            DefenseRule::Median => (
                coordinate_median(&uploads)?,
                plain_record(round, &all_ids, &truth_vec),
            ),
            DefenseRule::TrimmedMean => (
                trimmed_mean(&uploads, trim_beta)?,
                plain_record(round, &all_ids, &truth_vec),
            ),
            DefenseRule::MultiKrum => {
                let (selected, w) = multi_krum_select(&uploads, f_assumed, krum_m)?;
                (w, identifying_record(round, k, &selected, &truth, &truth_vec))
            }
            DefenseRule::Faba => {
                let (selected, w) = faba_select(&uploads, f_assumed)?;
                (w, identifying_record(round, k, &selected, &truth, &truth_vec))
            }
        };

        record.accuracy = evaluate(&w_next, &model_spec, &eval_set)?;
        records.push(record);
        global = w_next;
    }

    Ok(RunOutput {
        records,
        final_model: global,
        final_state: state,
    })
}

fn plain_record(round: usize, all_ids: &[usize], truth_vec: &[usize]) -> RoundRecord {
    RoundRecord {
        round,
        accuracy: 0.0,
        benign_ids: all_ids.to_vec(),
        malicious_ids: Vec::new(),
        truth_malicious_ids: truth_vec.to_vec(),
        scores: None,
        sc: None,
        lc: None,
        detection: None,
    }
}

fn identifying_record(
    round: usize,
    k: usize,
    selected: &[usize],
    truth: &BTreeSet<usize>,
    truth_vec: &[usize],
) -> RoundRecord {
    let benign: BTreeSet<usize> = selected.iter().copied().collect();
    let flagged: BTreeSet<usize> = (0..k).filter(|id| !benign.contains(id)).collect();
    let (precision, recall, f1) = precision_recall_f1(&flagged, truth);
    RoundRecord {
        round,
        accuracy: 0.0,
        benign_ids: benign.into_iter().collect(),
        malicious_ids: flagged.into_iter().collect(),
        truth_malicious_ids: truth_vec.to_vec(),
        scores: None,
        sc: None,
        lc: None,
        detection: Some(DetectionStats {
            precision,
            recall,
            f1,
        }),
    }
}

/// Executes the configured experiment; see [`run_full`].
pub fn run(config: &SimConfig) -> Result<Vec<RoundRecord>> {
    run_full(config).map(|out| out.records)
}

/// Runs the base config once per alpha (prediction-based defense only) and
/// returns `(alpha, final accuracy)` pairs.
pub fn sweep_alpha(base: &SimConfig, alphas: &[f64]) -> Result<Vec<(f64, f64)>> {
    if base.defense.rule != DefenseRule::Robustfl {
        return Err(Error::config("sweep_alpha needs the robustfl defense"));
    }
    for &alpha in alphas {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::config(format!("alpha {alpha} outside (0,1)")));
        }
    }
    let mut table = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut config = base.clone();
        config.defense.alpha = alpha;
        let records = run(&config)?;
        let final_accuracy = records.last().map(|r| r.accuracy).unwrap_or(0.0);
        table.push((alpha, final_accuracy));
    }
    Ok(table)
}

/// Aggregates records into the sidecar summary. Detection means cover the
/// rounds where the defense identified clients.
pub fn summarize(records: &[RoundRecord]) -> RunSummary {
    let detections: Vec<&DetectionStats> =
        records.iter().filter_map(|r| r.detection.as_ref()).collect();
    let mean = |pick: fn(&DetectionStats) -> f64| -> Option<f64> {
        if detections.is_empty() {
            None
        } else {
            Some(detections.iter().map(|d| pick(d)).sum::<f64>() / detections.len() as f64)
        }
    };
    RunSummary {
        rounds: records.len(),
        final_accuracy: records.last().map(|r| r.accuracy),
        mean_precision: mean(|d| d.precision),
        mean_recall: mean(|d| d.recall),
        mean_f1: mean(|d| d.f1),
        ground_truth_malicious: records
            .last()
            .map(|r| r.truth_malicious_ids.clone())
            .unwrap_or_default(),
    }
}

/// Path of the summary written alongside a log file.
pub fn summary_path(log_path: &Path) -> PathBuf {
    log_path.with_extension("summary.json")
}

/// Writes one JSON object per line per round, overwriting any previous log,
/// plus the sidecar summary at [`summary_path`].
pub fn write_log(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::config(format!("serializing record: {e}")))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let summary = summarize(records);
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::config(format!("serializing summary: {e}")))?;
    std::fs::write(summary_path(path), text + "\n")?;
    Ok(())
}

/// Parses a log written by [`write_log`].
pub fn read_log(path: &Path) -> Result<Vec<RoundRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RoundRecord = serde_json::from_str(&line)
            .map_err(|e| Error::config(format!("log line {}: {e}", i + 1)))?;
        records.push(record);
    }
    Ok(records)
}
