//! Named random substreams derived from a single root seed.
//!
//! Every random draw in a run comes from a generator addressed by
//! `(purpose, level, sweep, particle)`. The first three components select the
//! ChaCha key, the particle index selects the ChaCha stream, so results do not
//! depend on how particles are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type handed to every stochastic routine.
pub type StreamRng = ChaCha8Rng;

/// What a substream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    PriorDraw = 1,
    KalmanNoise = 2,
    Mcmc = 3,
    Resample = 4,
    EksNoise = 5,
    DataNoise = 6,
    PreconditionerFit = 7,
    /// Synthetic problem construction (random operators, truth draws).
    ProblemSetup = 8,
    Test = 99,
}

/// Root of the substream tree for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    root: u64,
}

impl Streams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Generator for one `(purpose, level, sweep, particle)` address.
    pub fn stream(&self, purpose: Purpose, level: u64, sweep: u64, particle: u64) -> StreamRng {
        let mut seed = [0u8; 32];
        for (k, word) in [self.root, purpose as u64, level, sweep].iter().enumerate() {
            seed[8 * k..8 * k + 8].copy_from_slice(&word.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(particle);
        rng
    }

    /// Per-particle generators for one `(purpose, level, sweep)` triple.
    pub fn particles(&self, purpose: Purpose, level: u64, sweep: u64) -> ParticleRngs {
        ParticleRngs {
            streams: *self,
            purpose,
            level,
            sweep,
        }
    }
}

/// Factory of per-particle generators sharing a purpose, level and sweep.
#[derive(Clone, Copy, Debug)]
pub struct ParticleRngs {
    streams: Streams,
    purpose: Purpose,
    level: u64,
    sweep: u64,
}

impl ParticleRngs {
    pub fn for_particle(&self, i: usize) -> StreamRng {
        self.streams
            .stream(self.purpose, self.level, self.sweep, i as u64)
    }
}
