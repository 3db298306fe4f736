//! Seeded random streams.
//!
//! Every random decision derives from one 64-bit seed. Each consumer gets its
//! own ChaCha8 stream so that, for instance, drawing more Fisher samples
//! never shifts the training shuffle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Weight initialization.
    Init = 1,
    /// Minibatch order during SGD.
    TrainShuffle = 2,
    /// Which examples feed the Fisher estimate.
    FisherSampling = 3,
    /// Labels drawn from the model in the sampled-Fisher mode.
    LabelSampling = 4,
    /// Synthetic dataset generators.
    Synthetic = 5,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
