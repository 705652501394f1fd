//! Minimal deterministic tensor engine: a tape-based reverse-mode
//! differentiator over `f32`/`f64`, the neural primitives needed by a small
//! vision transformer, AdamW, seeded initialization and a flat binary
//! checkpoint format.
//!
//! ```
//! use lara_tensor::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::<f64>::new(0);
//! store.insert("w", Tensor::new(vec![2], vec![3.0, -1.0]).unwrap()).unwrap();
//! let mut g = Graph::new();
//! let w = g.param(&store, "w").unwrap();
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq).unwrap();
//! lara_tensor::backward(&g, loss, &mut store).unwrap();
//! assert_eq!(store.get("w").unwrap().grad().unwrap(), &[6.0, -2.0]);
//! ```

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod init;
mod kernels;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{backward, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use init::{init_params, Init, ParamSpec};
pub use optim::{AdamW, AdamWConfig};
pub use scalar::Scalar;
pub use tensor::{ParamStore, Tensor};
