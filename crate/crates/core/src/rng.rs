//! Deterministic random streams.
//!
//! Each volume owns one stream and the coordinator owns one more, all
//! derived from a single master seed. A stream's seed is
//! `splitmix64(master ^ splitmix64(index + 1))`, so streams for different
//! indices are decorrelated and independent of how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// SplitMix64 output function (Steele, Lea & Flood).
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream(master: u64, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(stream_seed(master, index))
}

/// Per-volume streams plus the coordinator stream (index `n`).
#[derive(Debug, Clone)]
pub struct Streams {
    pub volumes: Vec<Stream>,
    pub coordinator: Stream,
}

impl Streams {
    pub fn new(master: u64, volumes: usize) -> Self {
        Streams {
            volumes: (0..volumes as u64).map(|i| stream(master, i)).collect(),
            coordinator: stream(master, volumes as u64),
        }
    }
}
