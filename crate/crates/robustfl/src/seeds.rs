//! Seed derivation for independent, reproducible RNG streams.
//!
//! Every random choice in a run is drawn from a stream derived solely from
//! the master seed plus fixed stream tags (and, for client training, the
//! client id and round index). Concurrent execution therefore cannot change
//! results: no stream depends on scheduling order.

/// SplitMix64 finalizer; good avalanche, cheap, stable.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive(base: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ a) ^ b)
}

const TAG_MODEL_INIT: u64 = 1;
const TAG_GUIDED: u64 = 2;
const TAG_GUIDING_SAMPLE: u64 = 3;
const TAG_PARTITION: u64 = 4;
const TAG_BLOBS: u64 = 5;
const TAG_CLIENT_TRAIN: u64 = 6;

pub fn model_init(base: u64) -> u64 {
    derive(base, TAG_MODEL_INIT, 0)
}

pub fn guided_training(base: u64) -> u64 {
    derive(base, TAG_GUIDED, 0)
}

pub fn guiding_sample(base: u64) -> u64 {
    derive(base, TAG_GUIDING_SAMPLE, 0)
}

pub fn partition(base: u64) -> u64 {
    derive(base, TAG_PARTITION, 0)
}

/// `split` distinguishes the train (0) and test (1) synthetic datasets.
pub fn blobs(base: u64, split: u64) -> u64 {
    derive(base, TAG_BLOBS, split)
}

/// The training stream for one client in one round; depends on nothing else.
pub fn client_train(base: u64, client_id: usize, round: usize) -> u64 {
    derive(
        derive(base, TAG_CLIENT_TRAIN, client_id as u64),
        round as u64,
        0,
    )
}
