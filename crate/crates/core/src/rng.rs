use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent reproducible streams derived from one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Split = 2,
    TeacherInit = 3,
    StudentInit = 4,
    TrainBatches = 5,
    ValBatches = 6,
    Finetune = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    keyed_rng(seed, stream as u64)
}

pub fn keyed_rng(seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// Seed for a derived stream (e.g. per-epoch shuffles inside a stream).
pub fn derive_seed(seed: u64, key: u64) -> u64 {
    use rand::RngCore;
    keyed_rng(seed, key.wrapping_add(0x9e37_79b9_7f4a_7c15)).next_u64()
}
