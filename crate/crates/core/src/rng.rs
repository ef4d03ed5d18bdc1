//! Deterministic splitting of a root seed into named random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the root seed, with the
//! ChaCha stream number derived from the stream label and a path index.
//! Equal `(root, label, index)` triples give bit-identical draws, which is
//! what lets the scheme and the oracles share common random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LEVY: &str = "levy";
pub const SUBORDINATOR: &str = "subordinator";
pub const DRIFT: &str = "drift";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub label: &'static str,
    pub index: u64,
}

impl StreamKey {
    pub const fn new(label: &'static str, index: u64) -> Self {
        StreamKey { label, index }
    }

    fn stream_number(&self) -> u64 {
        splitmix64(fnv1a(self.label.as_bytes()) ^ splitmix64(self.index))
    }
}

pub fn stream_rng(root: u64, key: StreamKey) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(key.stream_number());
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
