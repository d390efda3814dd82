//! Seeded random streams. Every random draw in a run comes from the run's
//! single seed; each consumer gets its own ChaCha stream so adding draws in
//! one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Validation = 3,
    Synthetic = 4,
    Partition = 5,
    KMeans = 6,
    Subset = 7,
    TestSplit = 8,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
