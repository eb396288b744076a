//! Weight initializers driven by a seeded ChaCha stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{numel, Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Initialization rule recorded for every model parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Normal(f64),
    Zeros,
    Ones,
}

impl Init {
    pub fn sample<T: Scalar>(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        let n = numel(shape);
        let data = match self {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| T::of(dist.sample(rng))).collect()
            }
            Init::TruncNormal(std) => (0..n).map(|_| T::of(trunc_normal(rng, std))).collect(),
        };
        Tensor::new(shape.to_vec(), data).expect("init shape is valid")
    }
}

fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    let dist = Normal::new(0.0, std).expect("positive std");
    loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}
