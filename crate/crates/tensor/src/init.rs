//! Seeded parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{ParamStore, Tensor};

/// How a parameter tensor is filled.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// He-scaled normal, std `sqrt(2 / fan_in)`, truncated at two standard
    /// deviations and rescaled so the realized std matches.
    He { fan_in: usize },
    /// Plain normal with the given standard deviation.
    Normal { std: f64 },
    Zeros,
    Ones,
    Constant { value: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, dims: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            dims: dims.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Std of a standard normal truncated to `[-2, 2]`.
fn truncated_std() -> f64 {
    let pdf2 = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mass = libm::erf(2.0 / std::f64::consts::SQRT_2);
    (1.0 - 4.0 * pdf2 / mass).sqrt()
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Builds a store from layer descriptions. Each tensor draws from its own
/// stream keyed by `(seed, name)`, so adding or resizing one parameter
/// leaves the others untouched.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new(seed);
    let tstd = truncated_std();
    for spec in specs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.name));
        let n = spec.numel();
        let data: Vec<f32> = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant { value } => vec![value as f32; n],
            Init::Normal { std } => (0..n)
                .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
                .collect(),
            Init::He { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break (z / tstd * std) as f32;
                        }
                    })
                    .collect()
            }
        };
        store.insert(spec.name.clone(), Tensor::new(spec.dims.clone(), data)?)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_std_matches_closed_form() {
        assert!((truncated_std() - 0.879_625_661).abs() < 1e-8);
    }
}
