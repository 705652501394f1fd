//! AdamW with decoupled weight decay and bias correction.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-7,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| {
            Err(TensorError::Argument {
                op: "adamw",
                detail,
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("betas must lie in (0,1), got {} {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Optimizer state: step counter plus first/second moments per parameter,
/// aligned with the store's insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S: Scalar = f32> {
    pub config: AdamWConfig,
    step: u64,
    names: Vec<String>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, store: &ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let names = store.names().map(str::to_string).collect();
        let zeros = |t: &Tensor<S>| vec![S::zero(); t.numel()];
        Ok(Self {
            config,
            step: 0,
            names,
            m: store.iter().map(|(_, t)| zeros(t)).collect(),
            v: store.iter().map(|(_, t)| zeros(t)).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[S]> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&self.m[i])
    }

    pub fn second_moment(&self, name: &str) -> Option<&[S]> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&self.v[i])
    }

    /// Applies one update to every parameter. Gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if store.len() != self.names.len() {
            return Err(TensorError::Argument {
                op: "adamw",
                detail: format!(
                    "optimizer tracks {} tensors, store holds {}",
                    self.names.len(),
                    store.len()
                ),
            });
        }
        for (i, (name, t)) in store.iter().enumerate() {
            if name != self.names[i] {
                return Err(TensorError::Argument {
                    op: "adamw",
                    detail: format!("slot {i}: expected `{}`, found `{name}`", self.names[i]),
                });
            }
            if t.grad().is_none() {
                return Err(TensorError::MissingGrad(name.to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2): (S, S) = (S::from_f64_lossy(c.beta1), S::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let decay = S::from_f64_lossy(1.0 - c.lr * c.weight_decay);
        let step_size = S::from_f64_lossy(c.lr / bc1);
        let inv_sqrt_bc2 = S::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = S::from_f64_lossy(c.eps);
        for (i, (_, tensor)) in store.iter_mut().enumerate() {
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, g), mi), vi) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *p *= decay;
                *mi = b1 * *mi + one_b1 * *g;
                *vi = b2 * *vi + one_b2 * *g * *g;
                *p -= step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }

    /// Moments and step as named tensors for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = vec![(
            "adamw.step".to_string(),
            Tensor::scalar(S::from_f64_lossy(self.step as f64)),
        )];
        for (i, name) in self.names.iter().enumerate() {
            let len = self.m[i].len();
            out.push((
                format!("adamw.m.{name}"),
                Tensor::new(vec![len], self.m[i].clone()).expect("non-empty moment"),
            ));
            out.push((
                format!("adamw.v.{name}"),
                Tensor::new(vec![len], self.v[i].clone()).expect("non-empty moment"),
            ));
        }
        out
    }

    /// Restores moments and step from tensors produced by [`state_tensors`].
    ///
    /// [`state_tensors`]: AdamW::state_tensors
    pub fn load_state(&mut self, tensors: &[(String, Tensor<S>)]) -> Result<()> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor `{name}`")))
        };
        let step = find("adamw.step")?.data()[0]
            .to_f64()
            .unwrap_or(f64::NAN);
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(TensorError::Checkpoint(format!("invalid step {step}")));
        }
        for (i, name) in self.names.iter().enumerate() {
            for (kind, buf) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("adamw.{kind}.{name}");
                let t = find(&key)?;
                if t.numel() != buf.len() {
                    return Err(TensorError::ShapeMismatch {
                        name: key,
                        found: t.dims().to_vec(),
                        expected: vec![buf.len()],
                    });
                }
                buf.copy_from_slice(t.data());
            }
        }
        self.step = step as u64;
        Ok(())
    }
}
