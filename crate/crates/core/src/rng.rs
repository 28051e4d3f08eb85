//! One user seed, split into independent ChaCha streams by purpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Fixed stream offsets. Changing these changes every seeded output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Dataset = 1,
    Init = 2,
    Training = 3,
    Evaluation = 4,
    Targets = 5,
    Sweep = 6,
}

pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Sub-stream derived from a parent stream and an index, e.g. one per run
/// in a sweep.
pub fn substream(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream as u64);
    rng
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
