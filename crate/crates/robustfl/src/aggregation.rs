//! Aggregation rules: plain dataset-size-weighted averaging, the full
//! prediction-based robust round, and four classical robust baselines
//! (coordinate median, trimmed mean, Multi-Krum, FABA).
//!
//! The robust round weights its surviving updates by reported dataset size,
//! like plain averaging. The baselines aggregate unweighted, matching their
//! original formulations; each baseline takes the attacker count `f` it
//! assumes, whereas the robust round never receives one.

use crate::detector::{
    kmeans2_1d, score_updates, select_benign, split_is_significant, ScoreReport,
};
use crate::error::{Error, Result};
use crate::param::{self, ParamVector};
use crate::smoothing::SmoothingState;

/// One client's upload: its id, parameters, and reported local dataset size.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub n_k: usize,
}

impl ClientUpdate {
    pub fn new(client_id: usize, params: ParamVector, n_k: usize) -> Result<Self> {
        if n_k == 0 {
            return Err(Error::invalid("reported dataset size must be >= 1"));
        }
        Ok(Self {
            client_id,
            params,
            n_k,
        })
    }
}

fn check_updates(updates: &[ClientUpdate]) -> Result<usize> {
    let first = updates.first().ok_or(Error::EmptyInput("aggregation"))?;
    let dim = first.params.dim();
    for u in updates {
        if u.params.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: u.params.dim(),
            });
        }
    }
    Ok(dim)
}

/// Dataset-size-weighted average: `sum_k (n_k / n) w_k` with `n = sum n_k`.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let dim = check_updates(updates)?;
    let n: usize = updates.iter().map(|u| u.n_k).sum();
    let n = n as f64;
    let mut acc = vec![0.0; dim];
    for u in updates {
        let w = u.n_k as f64 / n;
        for (a, &v) in acc.iter_mut().zip(u.params.values()) {
            *a += w * v;
        }
    }
    ParamVector::new(acc)
}

/// Per-coordinate median; an even count averages the two middle values.
pub fn coordinate_median(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let dim = check_updates(updates)?;
    let mut out = Vec::with_capacity(dim);
    let mut column = Vec::with_capacity(updates.len());
    for j in 0..dim {
        column.clear();
        column.extend(updates.iter().map(|u| u.params.values()[j]));
        column.sort_by(|a, b| a.partial_cmp(b).expect("parameters are finite"));
        let n = column.len();
        let m = if n % 2 == 1 {
            column[n / 2]
        } else {
            0.5 * (column[n / 2 - 1] + column[n / 2])
        };
        out.push(m);
    }
    ParamVector::new(out)
}

/// Per-coordinate trimmed mean: drop the `beta` largest and `beta` smallest
/// values, then average the rest unweighted. Requires `2*beta < K`.
pub fn trimmed_mean(updates: &[ClientUpdate], beta: usize) -> Result<ParamVector> {
    let dim = check_updates(updates)?;
    let k = updates.len();
    if 2 * beta >= k {
        return Err(Error::invalid(format!(
            "trimmed_mean needs 2*beta < K, got beta={beta}, K={k}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    let mut column = Vec::with_capacity(k);
    for j in 0..dim {
        column.clear();
        column.extend(updates.iter().map(|u| u.params.values()[j]));
        column.sort_by(|a, b| a.partial_cmp(b).expect("parameters are finite"));
        let kept = &column[beta..k - beta];
        out.push(kept.iter().sum::<f64>() / kept.len() as f64);
    }
    ParamVector::new(out)
}

fn squared_distances(updates: &[ClientUpdate]) -> Vec<Vec<f64>> {
    let k = updates.len();
    let mut d = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let mut s = 0.0;
            for (&a, &b) in updates[i]
                .params
                .values()
                .iter()
                .zip(updates[j].params.values())
            {
                let diff = a - b;
                s += diff * diff;
            }
            d[i][j] = s;
            d[j][i] = s;
        }
    }
    d
}

/// Multi-Krum: each update scores the sum of squared distances to its
/// `K - f - 2` nearest peers; the `m` lowest-scoring updates (ties broken
/// by smaller client id) are selected. Returns the selected client ids in
/// ascending order together with their unweighted mean.
pub fn multi_krum_select(
    updates: &[ClientUpdate],
    f: usize,
    m: usize,
) -> Result<(Vec<usize>, ParamVector)> {
    check_updates(updates)?;
    let k = updates.len();
    if k < f + 3 {
        return Err(Error::invalid(format!(
            "multi_krum needs K >= f + 3, got K={k}, f={f}"
        )));
    }
    if m == 0 || m > k {
        return Err(Error::invalid(format!(
            "multi_krum selection size m={m} outside [1, {k}]"
        )));
    }
    let neighbors = k - f - 2;
    let dists = squared_distances(updates);
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(k); // (score, client_id, index)
    for (i, u) in updates.iter().enumerate() {
        let mut to_others: Vec<f64> = (0..k).filter(|&j| j != i).map(|j| dists[i][j]).collect();
        to_others.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        let score: f64 = to_others[..neighbors].iter().sum();
        scored.push((score, u.client_id, i));
    }
    scored.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    let mut chosen: Vec<&ClientUpdate> = scored[..m].iter().map(|&(_, _, i)| &updates[i]).collect();
    chosen.sort_by_key(|u| u.client_id);
    let params: Vec<ParamVector> = chosen.iter().map(|u| u.params.clone()).collect();
    let ids: Vec<usize> = chosen.iter().map(|u| u.client_id).collect();
    Ok((ids, param::mean(&params)?))
}

/// Multi-Krum aggregate only; see [`multi_krum_select`].
pub fn multi_krum(updates: &[ClientUpdate], f: usize, m: usize) -> Result<ParamVector> {
    multi_krum_select(updates, f, m).map(|(_, p)| p)
}

/// FABA: remove the update farthest from the current average, `f` times
/// (ties remove the smaller client id), then average the survivors
/// unweighted. Returns the surviving ids in ascending order and the mean.
pub fn faba_select(updates: &[ClientUpdate], f: usize) -> Result<(Vec<usize>, ParamVector)> {
    check_updates(updates)?;
    if f >= updates.len() {
        return Err(Error::invalid(format!(
            "faba needs f < K, got f={f}, K={}",
            updates.len()
        )));
    }
    let mut remaining: Vec<&ClientUpdate> = updates.iter().collect();
    for _ in 0..f {
        let params: Vec<ParamVector> = remaining.iter().map(|u| u.params.clone()).collect();
        let center = param::mean(&params)?;
        let mut worst: Option<(f64, usize, usize)> = None; // (distance, client_id, index)
        for (i, u) in remaining.iter().enumerate() {
            let d = param::l2_distance(&u.params, &center)?;
            let candidate = (d, u.client_id, i);
            worst = Some(match worst {
                None => candidate,
                Some(best) => {
                    // farther wins; equal distance removes the smaller id
                    if candidate.0 > best.0 || (candidate.0 == best.0 && candidate.1 < best.1) {
                        candidate
                    } else {
                        best
                    }
                }
            });
        }
        remaining.remove(worst.expect("remaining is nonempty").2);
    }
    let mut survivors = remaining;
    survivors.sort_by_key(|u| u.client_id);
    let params: Vec<ParamVector> = survivors.iter().map(|u| u.params.clone()).collect();
    let ids: Vec<usize> = survivors.iter().map(|u| u.client_id).collect();
    Ok((ids, param::mean(&params)?))
}

/// FABA aggregate only; see [`faba_select`].
pub fn faba(updates: &[ClientUpdate], f: usize) -> Result<ParamVector> {
    faba_select(updates, f).map(|(_, p)| p)
}

/// One full robust aggregation round: forecast from the smoothing state,
/// score every upload, split the scores in two, aggregate the cluster
/// nearer the forecast (size-weighted), and fold the new global model back
/// into the state. Closeness to the forecast decides, never majority.
///
/// When the 2-means split carries no real separation signal (see
/// [`split_is_significant`]) nobody is flagged: an all-honest population
/// always produces two formal clusters, and flagging the farther half of
/// a homogeneous cloud would discard good updates every round.
pub fn robustfl_round(
    updates: &[ClientUpdate],
    state: &SmoothingState,
) -> Result<(ParamVector, SmoothingState, ScoreReport)> {
    let dim = check_updates(updates)?;
    if dim != state.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            got: dim,
        });
    }
    let forecast = state.predict()?;
    let scores = score_updates(updates, &forecast)?;
    let values: Vec<f64> = scores.iter().map(|&(_, s)| s).collect();
    let (sc, lc) = kmeans2_1d(&values, 0);
    let report = if split_is_significant(&values, sc, lc) {
        select_benign(&scores, sc, lc)
    } else {
        ScoreReport {
            scores: scores.clone(),
            sc,
            lc,
            benign_ids: scores.iter().map(|&(id, _)| id).collect(),
            malicious_ids: Default::default(),
        }
    };
    let benign: Vec<ClientUpdate> = updates
        .iter()
        .filter(|u| report.benign_ids.contains(&u.client_id))
        .cloned()
        .collect();
    let w_next = fedavg(&benign)?;
    let next_state = state.update(&w_next)?;
    Ok((w_next, next_state, report))
}
