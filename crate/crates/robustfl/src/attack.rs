//! Adversarial client behaviors: label flipping (data poisoning), sign
//! flipping, and the colluding LIE attack (model poisoning), routed onto
//! the configured set of compromised clients.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::param::ParamVector;

/// The attack families the simulator understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    LabelFlip,
    SignFlip,
    Lie,
}

/// Which clients are compromised and how they behave.
/// `c` is the sign-flip magnitude, `z` the LIE deviation multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub c: f64,
    pub z: f64,
    pub malicious_ids: BTreeSet<usize>,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, c: f64, z: f64, malicious_ids: BTreeSet<usize>) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::invalid("sign-flip magnitude c must be positive"));
        }
        if !z.is_finite() {
            return Err(Error::invalid("lie multiplier z must be finite"));
        }
        if kind == AttackKind::None && !malicious_ids.is_empty() {
            return Err(Error::invalid(
                "attack kind none admits no malicious clients",
            ));
        }
        Ok(Self {
            kind,
            c,
            z,
            malicious_ids,
        })
    }

    /// No attack, nobody compromised.
    pub fn benign() -> Self {
        Self {
            kind: AttackKind::None,
            c: 0.8,
            z: 0.3,
            malicious_ids: BTreeSet::new(),
        }
    }

    pub fn is_malicious(&self, client_id: usize) -> bool {
        self.malicious_ids.contains(&client_id)
    }
}

/// Relabels every sample `l` as `(L-1) - l`, leaving features untouched.
/// Applying it twice restores the original labels.
pub fn label_flip(ds: &LabeledDataset) -> LabeledDataset {
    let top = ds.num_classes() - 1;
    let flipped: Vec<usize> = ds.labels().iter().map(|&l| top - l).collect();
    ds.with_labels(flipped)
        .expect("flipped labels stay in range")
}

/// Multiplies the whole parameter vector by `-c`.
pub fn sign_flip(w: &ParamVector, c: f64) -> Result<ParamVector> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::invalid("sign-flip magnitude c must be positive"));
    }
    ParamVector::new(w.values().iter().map(|&v| -c * v).collect())
}

/// The colluding "a little is enough" upload: coordinate-wise mean plus `z`
/// population standard deviations over the attackers' own honest updates.
/// Every compromised client uploads this same vector.
pub fn lie_attack(benign_updates: &[ParamVector], z: f64) -> Result<ParamVector> {
    let first = benign_updates.first().ok_or(Error::EmptyInput("lie_attack"))?;
    let dim = first.dim();
    for u in benign_updates {
        first.check_same_dim(u)?;
    }
    let n = benign_updates.len() as f64;
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut sum = 0.0;
        for u in benign_updates {
            sum += u.values()[j];
        }
        let mu = sum / n;
        let mut var = 0.0;
        for u in benign_updates {
            let d = u.values()[j] - mu;
            var += d * d;
        }
        let sigma = (var / n).sqrt();
        out.push(mu + z * sigma);
    }
    ParamVector::new(out)
}

/// The dataset a client actually trains on: label-flip attackers poison
/// their shard, everyone else trains on the raw shard.
pub fn training_data(spec: &AttackSpec, client_id: usize, shard: &LabeledDataset) -> LabeledDataset {
    if spec.kind == AttackKind::LabelFlip && spec.is_malicious(client_id) {
        label_flip(shard)
    } else {
        shard.clone()
    }
}

/// Maps one client's local training result to what goes on the wire.
///
/// `honest_update` must be the output of the client's own training run on
/// [`training_data`] (so a label-flip attacker hands in the model trained on
/// its poisoned shard, and that result is uploaded as is). Sign flippers
/// upload `-c` times their honestly trained model; LIE attackers all upload
/// the same vector computed from `context`, the compromised clients' honest
/// updates. Returns the upload together with the data the client trained on.
pub fn apply_attack(
    spec: &AttackSpec,
    client_id: usize,
    honest_update: &ParamVector,
    shard: &LabeledDataset,
    context: &[ParamVector],
) -> Result<(ParamVector, LabeledDataset)> {
    if !spec.is_malicious(client_id) {
        return Ok((honest_update.clone(), shard.clone()));
    }
    match spec.kind {
        AttackKind::None => Ok((honest_update.clone(), shard.clone())),
        AttackKind::LabelFlip => Ok((honest_update.clone(), label_flip(shard))),
        AttackKind::SignFlip => Ok((sign_flip(honest_update, spec.c)?, shard.clone())),
        AttackKind::Lie => Ok((lie_attack(context, spec.z)?, shard.clone())),
    }
}
