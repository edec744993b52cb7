//! Small layer helpers and deterministic parameter initialization.

use meshcontact_tensor::{ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// `x · w + b` with `b` broadcast over rows.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// Independent RNG stream for a `(seed, parts...)` coordinate.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a of a tag, used to give named modules distinct streams.
pub fn tag(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Gaussian weights with variance `1 / fan_in`.
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let std = (1.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std is positive");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data).expect("valid shape"));
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape.to_vec(), value));
    }
}
