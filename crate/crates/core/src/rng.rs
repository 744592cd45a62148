//! Seeded, indexed random streams. Every random draw in the crate goes
//! through here so that results depend only on `(seed, stream)` pairs and
//! never on thread scheduling.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

pub fn substream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A child seed for a named sub-task of `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    substream(seed, tag).next_u64()
}

/// `rows x cols` matrix of i.i.d. standard normals, filled column by column.
pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}
