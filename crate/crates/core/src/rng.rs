//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream selected
//! by a `(seed, stream)` pair, so ensembles can be split across workers and
//! still reproduce bit-for-bit.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// The generator for stream `stream` under `seed`.
pub fn substream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a tag into a seed (splitmix64 finalizer), for nesting streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Domain tags so unrelated consumers of one master seed never share a stream.
pub mod tags {
    pub const DISORDER: u64 = 0x01;
    pub const CALIBRATION: u64 = 0x02;
    pub const PROPOSAL: u64 = 0x03;
    pub const ACCEPT: u64 = 0x04;
    pub const ANNEAL: u64 = 0x05;
    pub const WALK: u64 = 0x06;
    pub const TRAJECTORY: u64 = 0x07;
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}
