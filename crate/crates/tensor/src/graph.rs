//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward op together with the buffers its
//! backward rule needs. Parameters enter the tape by copy from a
//! [`ParamStore`]; [`Graph::backward`] returns their gradients, which the
//! caller folds back into the store.

use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, bilinear_taps, ConvGeom, View};
use crate::scalar::{lit, Scalar};
use crate::tensor::{ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<S: Scalar> {
    Constant,
    Param {
        store_index: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: S,
    },
    Sum {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        d: usize,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax {
        x: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        batch: usize,
        cols: Vec<S>,
    },
    Upsample {
        x: usize,
        planes: usize,
        h: usize,
        w: usize,
        factor: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        nq: usize,
        nk: usize,
        dk: usize,
        dv: usize,
        probs: Vec<S>,
    },
    BceLogits {
        x: usize,
        targets: Vec<S>,
    },
}

struct Node<S: Scalar> {
    dims: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of the parameters that took part in a graph, by store slot.
#[derive(Clone, Debug)]
pub struct Gradients<S: Scalar = f32> {
    entries: Vec<(usize, String, Vec<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[S])> {
        self.entries.iter().map(|(_, n, g)| (n.as_str(), g.as_slice()))
    }

    pub fn get(&self, name: &str) -> Option<&[S]> {
        self.entries
            .iter()
            .find(|(_, n, _)| n == name)
            .map(|(_, _, g)| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds every gradient into the matching store tensor.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) -> Result<()> {
        for (idx, name, g) in &self.entries {
            let (found, t) = store
                .get_index_mut(*idx)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if found != name {
                return Err(TensorError::Backward(format!(
                    "store slot {idx} holds `{found}`, graph recorded `{name}`"
                )));
            }
            t.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Forward tape over one computation.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: HashMap<usize, Var>,
    param_names: HashMap<usize, String>,
    allocations: Vec<Vec<usize>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_names: HashMap::new(),
            allocations: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.dims.clone(), n.value.clone()).expect("node invariant")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Shapes of every buffer the tape has allocated, in allocation order.
    ///
    /// Includes op outputs and the auxiliary buffers kept for backward
    /// (attention probabilities, im2col matrices).
    pub fn allocations(&self) -> &[Vec<usize>] {
        &self.allocations
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(TensorError::Backward(format!(
                "variable {} does not belong to this graph",
                v.0
            )));
        }
        Ok(())
    }

    fn push(
        &mut self,
        op_name: &'static str,
        dims: Vec<usize>,
        value: Vec<S>,
        op: Op<S>,
        inputs: &[usize],
    ) -> Result<Var> {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.allocations.push(dims.clone());
        self.nodes.push(Node {
            dims,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        let dims = t.dims().to_vec();
        self.allocations.push(dims.clone());
        self.nodes.push(Node {
            dims,
            value: t.into_data(),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a store parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if let Some(v) = self.params.get(&idx) {
            return Ok(*v);
        }
        let t = store.get(name)?;
        self.nodes.push(Node {
            dims: t.dims().to_vec(),
            value: t.data().to_vec(),
            op: Op::Param { store_index: idx },
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(idx, v);
        self.param_names.insert(idx, name.to_string());
        Ok(v)
    }

    /// `x·w` over the last axis of `x`; `w` must be 2-D `[in, out]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if bd.len() != 2 || ad.is_empty() || ad[ad.len() - 1] != bd[0] {
            return shape_err("matmul", format!("{ad:?} x {bd:?}"));
        }
        let k = bd[0];
        let n = bd[1];
        let m = ad.iter().product::<usize>() / k;
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            false,
        );
        let mut dims = ad;
        *dims.last_mut().unwrap() = n;
        self.push(
            "matmul",
            dims,
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            &[a.0, b.0],
        )
    }

    /// Adds `bias[n]` to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let n = *xd.last().unwrap();
        if self.dims(bias) != [n] {
            return shape_err("add_bias", format!("{xd:?} + {:?}", self.dims(bias)));
        }
        let b = self.value(bias);
        let out: Vec<S> = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(a, c)| *a + *c))
            .collect();
        self.push("add_bias", xd, out, Op::AddBias { x: x.0, bias: bias.0 }, &[x.0, bias.0])
    }

    /// `y = x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return shape_err("add", format!("{:?} + {:?}", self.dims(a), self.dims(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let dims = self.dims(a).to_vec();
        self.push("add", dims, out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return shape_err("mul", format!("{:?} * {:?}", self.dims(a), self.dims(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let dims = self.dims(a).to_vec();
        self.push("mul", dims, out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f: S = lit(factor);
        let out = self.value(x).iter().map(|v| *v * f).collect();
        let dims = self.dims(x).to_vec();
        self.push("scale", dims, out, Op::Scale { x: x.0, factor: f }, &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.value(x).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Exact-erf GELU, elementwise.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| kernels::gelu(*v)).collect();
        let dims = self.dims(x).to_vec();
        self.push("gelu", dims, out, Op::Gelu { x: x.0 }, &[x.0])
    }

    /// Normalizes each row of the last axis (biased variance, ε inside the
    /// square root) then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let d = *xd.last().unwrap();
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return shape_err(
                "layer_norm",
                format!("{xd:?} with gamma {:?} beta {:?}", self.dims(gamma), self.dims(beta)),
            );
        }
        let rows = self.value(x).len() / d;
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = Vec::with_capacity(rows * d);
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let inv_d: S = lit(1.0 / d as f64);
        let eps: S = lit(LAYER_NORM_EPS);
        for row in self.value(x).chunks_exact(d) {
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() * inv_d;
            let rstd = S::one() / (var + eps).sqrt();
            out.extend(
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(v, (gv, bv))| (*v - mean) * rstd * *gv + *bv),
            );
            means.push(mean);
            rstds.push(rstd);
        }
        self.push(
            "layer_norm",
            xd,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                d,
                mean: means,
                rstd: rstds,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let n = *xd.last().unwrap();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            kernels::softmax_row(row);
        }
        self.push("softmax", xd, out, Op::Softmax { x: x.0, n }, &[x.0])
    }

    /// Cross-correlation of `x` (`[cin,h,w]` or `[b,cin,h,w]`) with
    /// `w[cout,cin,kh,kw]`; odd kernels only.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if wd.len() != 4 || !(xd.len() == 3 || xd.len() == 4) {
            return shape_err("conv2d", format!("input {xd:?} kernel {wd:?}"));
        }
        let (batch, cin, h, wi) = if xd.len() == 4 {
            (xd[0], xd[1], xd[2], xd[3])
        } else {
            (1, xd[0], xd[1], xd[2])
        };
        let (cout, kcin, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        if kcin != cin {
            return shape_err("conv2d", format!("kernel expects {kcin} channels, input has {cin}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Argument {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} is not odd"),
            });
        }
        if stride == 0 {
            return Err(TensorError::Argument {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        if h + 2 * padding < kh || wi + 2 * padding < kw {
            return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input"));
        }
        if let Some(b) = bias {
            if self.dims(b) != [cout] {
                return shape_err("conv2d", format!("bias {:?} for {cout} outputs", self.dims(b)));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wi,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (wi + 2 * padding - kw) / stride + 1,
        };
        let (patch, npix) = (geom.patch(), geom.out_pixels());
        let in_plane = cin * h * wi;
        let mut out = vec![S::zero(); batch * cout * npix];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![S::zero(); batch * patch * npix]
        };
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        for bi in 0..batch {
            let xin = &xv[bi * in_plane..(bi + 1) * in_plane];
            let o = &mut out[bi * cout * npix..(bi + 1) * cout * npix];
            if geom.is_pointwise() {
                kernels::matmul(cout, cin, npix, wv, false, xin, false, o, false);
            } else {
                let c = &mut cols[bi * patch * npix..(bi + 1) * patch * npix];
                kernels::im2col(xin, &geom, c);
                kernels::matmul(cout, patch, npix, wv, false, c, false, o, false);
            }
        }
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].value;
            for plane in out.chunks_exact_mut(npix).enumerate() {
                let (i, p) = plane;
                let add = bv[i % cout];
                p.iter_mut().for_each(|v| *v += add);
            }
        }
        if !cols.is_empty() {
            self.allocations.push(vec![batch, patch, npix]);
        }
        let dims = if xd.len() == 4 {
            vec![batch, cout, geom.oh, geom.ow]
        } else {
            vec![cout, geom.oh, geom.ow]
        };
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|b| b.0));
        self.push(
            "conv2d",
            dims,
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                geom,
                batch,
                cols,
            },
            &inputs,
        )
    }

    /// Align-corners=false bilinear upsampling of the two trailing axes.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if xd.len() < 2 {
            return shape_err("upsample_bilinear", format!("{xd:?} has no spatial axes"));
        }
        if factor == 0 {
            return Err(TensorError::Argument {
                op: "upsample_bilinear",
                detail: "factor must be positive".into(),
            });
        }
        let (h, w) = (xd[xd.len() - 2], xd[xd.len() - 1]);
        let planes = self.value(x).len() / (h * w);
        let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![S::zero(); planes * oh * ow];
        let xv = self.value(x);
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly: S = lit(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx: S = lit(lx);
                    let top = src[y0 * w + x0] * (S::one() - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (S::one() - lx) + src[y1 * w + x1] * lx;
                    dst[oy * ow + ox] = top * (S::one() - ly) + bot * ly;
                }
            }
        }
        let mut dims = xd;
        let r = dims.len();
        dims[r - 2] = oh;
        dims[r - 1] = ow;
        self.push(
            "upsample_bilinear",
            dims,
            out,
            Op::Upsample {
                x: x.0,
                planes,
                h,
                w,
                factor,
            },
            &[x.0],
        )
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        if dims.iter().product::<usize>() != self.value(x).len() {
            return shape_err("reshape", format!("{:?} -> {dims:?}", self.dims(x)));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", dims.to_vec(), out, Op::Reshape { x: x.0 }, &[x.0])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let mut seen = vec![false; xd.len()];
        if axes.len() != xd.len() || axes.iter().any(|&a| a >= xd.len() || std::mem::replace(&mut seen[a], true)) {
            return shape_err("permute", format!("axes {axes:?} for {xd:?}"));
        }
        let dims: Vec<usize> = axes.iter().map(|&a| xd[a]).collect();
        let mut out = vec![S::zero(); self.value(x).len()];
        let xv = self.value(x);
        for_each_permuted(&xd, axes, |dst, src| out[dst] = xv[src]);
        self.push(
            "permute",
            dims,
            out,
            Op::Permute {
                x: x.0,
                axes: axes.to_vec(),
            },
            &[x.0],
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(p) => self.dims(*p).to_vec(),
            None => return shape_err("concat", "no inputs"),
        };
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} for {first:?}"));
        }
        let mut total = 0;
        for p in parts {
            let d = self.dims(*p);
            let compatible = d.len() == first.len()
                && d.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{d:?} vs {first:?} along {axis}"));
            }
            total += d[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = self.dims(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p)[o * block..(o + 1) * block]);
            }
        }
        let mut dims = first;
        dims[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            "concat",
            dims,
            out,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Multi-head scaled dot-product attention over pre-projected inputs.
    ///
    /// `q[nq, heads·dk]`, `k[nk, heads·dk]`, `v[nk, heads·dv]`; head `i`
    /// reads columns `i·dk..(i+1)·dk`. Returns `[nq, heads·dv]`. The only
    /// score buffer is `heads × nq × nk`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qd, kd, vd) = (
            self.dims(q).to_vec(),
            self.dims(k).to_vec(),
            self.dims(v).to_vec(),
        );
        if qd.len() != 2 || kd.len() != 2 || vd.len() != 2 {
            return shape_err("attention", format!("q {qd:?} k {kd:?} v {vd:?}"));
        }
        if heads == 0 || qd[1] != kd[1] || kd[0] != vd[0] || qd[1] % heads != 0 || vd[1] % heads != 0 {
            return shape_err(
                "attention",
                format!("q {qd:?} k {kd:?} v {vd:?} with {heads} heads"),
            );
        }
        let (nq, nk) = (qd[0], kd[0]);
        let (dk, dv) = (qd[1] / heads, vd[1] / heads);
        let scale: S = lit(1.0 / (dk as f64).sqrt());
        let mut probs = vec![S::zero(); heads * nq * nk];
        let mut out = vec![S::zero(); nq * heads * dv];
        self.allocations.push(vec![heads, nq, nk]);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            kernels::gemm(
                nq,
                dk,
                nk,
                scale,
                qv,
                View::rows(h * dk, heads * dk),
                kv,
                View::cols(h * dk, heads * dk),
                S::zero(),
                p,
                View::rows(0, nk),
            );
            for row in p.chunks_exact_mut(nk) {
                kernels::softmax_row(row);
            }
            kernels::gemm(
                nq,
                nk,
                dv,
                S::one(),
                p,
                View::rows(0, nk),
                vv,
                View::rows(h * dv, heads * dv),
                S::zero(),
                &mut out,
                View::rows(h * dv, heads * dv),
            );
        }
        self.push(
            "attention",
            vec![nq, heads * dv],
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                nq,
                nk,
                dk,
                dv,
                probs,
            },
            &[q.0, k.0, v.0],
        )
    }

    /// Softmax weights recorded by an attention node: `(weights, heads, nq, nk)`.
    pub fn attention_weights(&self, v: Var) -> Option<(&[S], usize, usize, usize)> {
        match &self.nodes.get(v.0)?.op {
            Op::Attention {
                heads,
                nq,
                nk,
                probs,
                ..
            } => Some((probs.as_slice(), *heads, *nq, *nk)),
            _ => None,
        }
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against `targets`, in the
    /// stable logit form `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[S]) -> Result<Var> {
        let n = self.value(x).len();
        if targets.len() != n {
            return shape_err("bce_with_logits", format!("{n} logits, {} targets", targets.len()));
        }
        let total: S = self
            .value(x)
            .iter()
            .zip(targets)
            .map(|(z, y)| z.max(S::zero()) - *z * *y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / lit(n as f64);
        self.push(
            "bce_with_logits",
            vec![1],
            vec![loss],
            Op::BceLogits {
                x: x.0,
                targets: targets.to_vec(),
            },
            &[x.0],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        self.check(loss)?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Backward(format!(
                "loss must be a scalar, got {:?}",
                self.nodes[loss.0].dims
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let mut out = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Param { store_index } = self.nodes[i].op {
                out.push((store_index, self.param_names[&store_index].clone(), dy));
                continue;
            }
            self.backward_node(i, &dy, &mut grads);
        }
        out.sort_by_key(|(idx, _, _)| *idx);
        Ok(Gradients { entries: out })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<S>>], j: usize) -> Option<&'g mut Vec<S>> {
        if !self.nodes[j].requires_grad {
            return None;
        }
        let len = self.nodes[j].value.len();
        Some(grads[j].get_or_insert_with(|| vec![S::zero(); len]))
    }

    fn backward_node(&self, i: usize, dy: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Param { .. } => {}
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if let Some(da) = self.grad_buf(grads, *a) {
                    kernels::matmul(*m, *n, *k, dy, false, bv, true, da, true);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    kernels::matmul(*k, *m, *n, av, true, dy, false, db, true);
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    add_into(dx, dy);
                }
                if let Some(db) = self.grad_buf(grads, *bias) {
                    let n = db.len();
                    for row in dy.chunks_exact(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add { a, b } => {
                for j in [*a, *b] {
                    if let Some(d) = self.grad_buf(grads, j) {
                        add_into(d, dy);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if let Some(da) = self.grad_buf(grads, *a) {
                    for ((d, g), o) in da.iter_mut().zip(dy).zip(bv) {
                        *d += *g * *o;
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for ((d, g), o) in db.iter_mut().zip(dy).zip(av) {
                        *d += *g * *o;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (d, g) in dx.iter_mut().zip(dy) {
                        *d += *g * *factor;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += dy[0]);
                }
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[*x].value;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((d, g), v) in dx.iter_mut().zip(dy).zip(xv) {
                        *d += *g * kernels::gelu_grad(*v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                mean,
                rstd,
            } => {
                let d = *d;
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value;
                let xhat = |r: usize, c: usize| (xv[r * d + c] - mean[r]) * rstd[r];
                if let Some(dg) = self.grad_buf(grads, *gamma) {
                    for (r, row) in dy.chunks_exact(d).enumerate() {
                        for (c, g) in row.iter().enumerate() {
                            dg[c] += *g * xhat(r, c);
                        }
                    }
                }
                if let Some(db) = self.grad_buf(grads, *beta) {
                    for row in dy.chunks_exact(d) {
                        add_into(db, row);
                    }
                }
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let inv_d: S = lit(1.0 / d as f64);
                    for (r, row) in dy.chunks_exact(d).enumerate() {
                        let mut mean_g = S::zero();
                        let mut mean_gx = S::zero();
                        for (c, g) in row.iter().enumerate() {
                            let gh = *g * gv[c];
                            mean_g += gh;
                            mean_gx += gh * xhat(r, c);
                        }
                        mean_g *= inv_d;
                        mean_gx *= inv_d;
                        for (c, g) in row.iter().enumerate() {
                            let gh = *g * gv[c];
                            dx[r * d + c] += rstd[r] * (gh - mean_g - xhat(r, c) * mean_gx);
                        }
                    }
                }
            }
            Op::Softmax { x, n } => {
                let y = &node.value;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((yr, gr), dr) in y
                        .chunks_exact(*n)
                        .zip(dy.chunks_exact(*n))
                        .zip(dx.chunks_exact_mut(*n))
                    {
                        kernels::softmax_row_backward(yr, gr, dr);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                batch,
                cols,
            } => {
                let (patch, npix) = (geom.patch(), geom.out_pixels());
                let in_plane = geom.cin * geom.h * geom.w;
                let out_plane = geom.cout * npix;
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                if let Some(b) = bias {
                    if let Some(db) = self.grad_buf(grads, *b) {
                        for (i, plane) in dy.chunks_exact(npix).enumerate() {
                            db[i % geom.cout] += plane.iter().copied().sum::<S>();
                        }
                    }
                }
                if let Some(dw) = self.grad_buf(grads, *w) {
                    for bi in 0..*batch {
                        let g = &dy[bi * out_plane..(bi + 1) * out_plane];
                        let c = if geom.is_pointwise() {
                            &xv[bi * in_plane..(bi + 1) * in_plane]
                        } else {
                            &cols[bi * patch * npix..(bi + 1) * patch * npix]
                        };
                        kernels::matmul(geom.cout, npix, patch, g, false, c, true, dw, true);
                    }
                }
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let mut dcols = vec![S::zero(); if geom.is_pointwise() { 0 } else { patch * npix }];
                    for bi in 0..*batch {
                        let g = &dy[bi * out_plane..(bi + 1) * out_plane];
                        let dxb = &mut dx[bi * in_plane..(bi + 1) * in_plane];
                        if geom.is_pointwise() {
                            kernels::matmul(patch, geom.cout, npix, wv, true, g, false, dxb, true);
                        } else {
                            kernels::matmul(patch, geom.cout, npix, wv, true, g, false, &mut dcols, false);
                            kernels::col2im_add(&dcols, geom, dxb);
                        }
                    }
                }
            }
            Op::Upsample {
                x,
                planes,
                h,
                w,
                factor,
            } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let (ty, tx) = (bilinear_taps(*h, *factor), bilinear_taps(*w, *factor));
                    let (oh, ow) = (h * factor, w * factor);
                    for p in 0..*planes {
                        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
                        let d = &mut dx[p * h * w..(p + 1) * h * w];
                        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                            let ly: S = lit(ly);
                            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                                let lx: S = lit(lx);
                                let gv = g[oy * ow + ox];
                                let top = gv * (S::one() - ly);
                                let bot = gv * ly;
                                d[y0 * w + x0] += top * (S::one() - lx);
                                d[y0 * w + x1] += top * lx;
                                d[y1 * w + x0] += bot * (S::one() - lx);
                                d[y1 * w + x1] += bot * lx;
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    add_into(dx, dy);
                }
            }
            Op::Permute { x, axes } => {
                let xd = self.nodes[*x].dims.clone();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for_each_permuted(&xd, axes, |dst, src| dx[src] += dy[dst]);
                }
            }
            Op::Concat { parts, axis } => {
                let dims = &node.dims;
                let outer: usize = dims[..*axis].iter().product();
                let inner: usize = dims[axis + 1..].iter().product();
                let total = dims[*axis] * inner;
                let mut start = 0;
                for p in parts {
                    let block = self.nodes[*p].dims[*axis] * inner;
                    if let Some(dp) = self.grad_buf(grads, *p) {
                        for o in 0..outer {
                            add_into(
                                &mut dp[o * block..(o + 1) * block],
                                &dy[o * total + start..o * total + start + block],
                            );
                        }
                    }
                    start += block;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                nq,
                nk,
                dk,
                dv,
                probs,
            } => self.attention_backward(
                (*q, *k, *v),
                (*heads, *nq, *nk, *dk, *dv),
                probs,
                dy,
                grads,
            ),
            Op::BceLogits { x, targets } => {
                let xv = &self.nodes[*x].value;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let scale = dy[0] / lit(xv.len() as f64);
                    for ((d, z), y) in dx.iter_mut().zip(xv).zip(targets) {
                        let sig = S::one() / (S::one() + (-*z).exp());
                        *d += (sig - *y) * scale;
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        (q, k, v): (usize, usize, usize),
        (heads, nq, nk, dk, dv): (usize, usize, usize, usize, usize),
        probs: &[S],
        dy: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let scale: S = lit(1.0 / (dk as f64).sqrt());
        let (qv, kv, vv) = (
            &self.nodes[q].value,
            &self.nodes[k].value,
            &self.nodes[v].value,
        );
        let fresh = |j: usize| {
            self.nodes[j]
                .requires_grad
                .then(|| vec![S::zero(); self.nodes[j].value.len()])
        };
        let (mut dq, mut dk_buf, mut dv_buf) = (fresh(q), fresh(k), fresh(v));
        let mut ds = vec![S::zero(); nq * nk];
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            if let Some(dvb) = dv_buf.as_mut() {
                kernels::gemm(
                    nk,
                    nq,
                    dv,
                    S::one(),
                    p,
                    View::cols(0, nk),
                    dy,
                    View::rows(h * dv, heads * dv),
                    S::one(),
                    dvb,
                    View::rows(h * dv, heads * dv),
                );
            }
            if dq.is_none() && dk_buf.is_none() {
                continue;
            }
            kernels::gemm(
                nq,
                dv,
                nk,
                S::one(),
                dy,
                View::rows(h * dv, heads * dv),
                vv,
                View::cols(h * dv, heads * dv),
                S::zero(),
                &mut ds,
                View::rows(0, nk),
            );
            for (srow, prow) in ds.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                let dot: S = srow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                for (s, pv) in srow.iter_mut().zip(prow) {
                    *s = *pv * (*s - dot) * scale;
                }
            }
            if let Some(dqb) = dq.as_mut() {
                kernels::gemm(
                    nq,
                    nk,
                    dk,
                    S::one(),
                    &ds,
                    View::rows(0, nk),
                    kv,
                    View::rows(h * dk, heads * dk),
                    S::one(),
                    dqb,
                    View::rows(h * dk, heads * dk),
                );
            }
            if let Some(dkb) = dk_buf.as_mut() {
                kernels::gemm(
                    nk,
                    nq,
                    dk,
                    S::one(),
                    &ds,
                    View::cols(0, nk),
                    qv,
                    View::rows(h * dk, heads * dk),
                    S::one(),
                    dkb,
                    View::rows(h * dk, heads * dk),
                );
            }
        }
        for (j, buf) in [(q, dq), (k, dk_buf), (v, dv_buf)] {
            if let (Some(b), Some(dst)) = (buf, self.grad_buf(grads, j)) {
                add_into(dst, &b);
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Calls `f(out_index, in_index)` for every element of a permutation of a
/// row-major array with dims `in_dims`.
fn for_each_permuted(in_dims: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = in_dims.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_dims[i + 1];
    }
    let out_dims: Vec<usize> = axes.iter().map(|&a| in_dims[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = in_dims.iter().product();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for dst in 0..total {
        f(dst, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            src -= strides[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
}

/// Runs the reverse sweep and accumulates parameter gradients into `store`.
///
/// Gradients accumulate across calls; zero them with
/// [`ParamStore::zero_grad`] between steps.
pub fn backward<S: Scalar>(graph: &Graph<S>, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
    graph.backward(loss)?.accumulate_into(store)
}
