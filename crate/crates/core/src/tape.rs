//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] lives for exactly one forward + backward pass. Every operation
//! appends a node holding its output value and whatever it needs to replay
//! its adjoint; [`Tape::backward`] walks the nodes in strict reverse order.
//! A tape can be differentiated once; build a new one for the next step.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, channel_moments, normalize, BatchMoments, ConvGeom, ConvSpec};
use crate::lif::{LifParams, SpikeMode};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a user-defined op: receives the output
/// gradient, the input values and the output value, and returns one gradient
/// per input.
pub type Vjp = Box<dyn Fn(&[f64], &[&Tensor], &Tensor) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    AddBias {
        x: Var,
        bias: Var,
        split: (usize, usize, usize),
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        split: (usize, usize, usize),
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
        trans_b: bool,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        split: (usize, usize, usize),
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Spike {
        v: Var,
        params: LifParams,
    },
    LifReset {
        v_s: Var,
        s: Var,
        params: LifParams,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    RowNormalize {
        x: Var,
        cols: usize,
        eps: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MseToTarget {
        x: Var,
        target: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        vjp: Vjp,
    },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Reshape(..) => "reshape",
            Op::AddBias { .. } => "add_bias",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Spike { .. } => "spike",
            Op::LifReset { .. } => "lif_reset",
            Op::Gather { .. } => "gather",
            Op::RowNormalize { .. } => "row_normalize",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::MseToTarget { .. } => "mse",
            Op::Custom { .. } => "custom",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    spike_mode: SpikeMode,
}

fn acc_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose spike nodes use the given forward rule.
    pub fn with_spike_mode(mode: SpikeMode) -> Self {
        Tape {
            spike_mode: mode,
            ..Self::default()
        }
    }

    pub fn spike_mode(&self) -> SpikeMode {
        self.spike_mode
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::contract(
                "tape",
                "tape already differentiated; start a new tape for the next pass",
            ));
        }
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        Ok(Var(self.values.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf, true).expect("leaf on a consumed tape")
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf, false).expect("constant on a consumed tape")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`. `None` if
    /// `v` does not influence the loss or requires no gradient.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of the node value with its `grad` field filled in.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.values[v.0].clone();
        let g = self
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        t.set_grad(g).expect("grad shape");
        t
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, node, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Adds a per-channel bias along `channel_axis`.
    pub fn add_bias(&mut self, x: Var, bias: Var, channel_axis: usize) -> Result<Var> {
        let split = kernels::channel_split(self.shape(x), channel_axis)?;
        if self.value(bias).numel() != split.1 {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let (outer, c, inner) = split;
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for (ch, &bv) in b.iter().enumerate().take(c) {
                let base = (o * c + ch) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddBias { x, bias, split }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel().max(1) as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, mid, inner) = kernels::channel_split(&shape, axis)?;
        if mid == 0 {
            return Err(Error::contract("mean_axis", "empty axis"));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= mid as f64);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        self.push(
            out,
            Op::MeanAxis {
                x,
                split: (outer, mid, inner),
            },
            rg,
        )
    }

    /// 2-D matrix product `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => self.matmul_raw(a, b, 1, m, k, n, false, false, vec![m, n]),
            (sa, sb) => Err(Error::dim("matmul", sa, sb)),
        }
    }

    /// Applies a `[d_in, d_out]` weight to the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        match (xs.split_last(), self.shape(w)) {
            (Some((&k, lead)), &[k2, n]) if k == k2 => {
                let m = lead.iter().product();
                let mut out_shape = lead.to_vec();
                out_shape.push(n);
                self.matmul_raw(x, w, 1, m, k, n, false, false, out_shape)
            }
            _ => Err(Error::dim("linear", &xs, self.shape(w))),
        }
    }

    /// Batched product of `[B,m,k]` with `[B,k,n]`, or with `[B,n,k]ᵀ` when
    /// `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = match (&sa[..], &sb[..]) {
            (&[ba, m, k], &[bb, r, c]) if ba == bb => {
                let (kb, n) = if transpose_b { (c, r) } else { (r, c) };
                (kb == k).then_some((ba, m, k, n))
            }
            _ => None,
        };
        let (batch, m, k, n) = dims.ok_or_else(|| Error::dim("bmm", &sa, &sb))?;
        self.matmul_raw(a, b, batch, m, k, n, true, transpose_b, vec![batch, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_raw(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
        trans_b: bool,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = if b_batched { &bv[i * k * n..(i + 1) * k * n] } else { bv };
            let bref = if trans_b {
                MatRef::transposed(bb, n, k)
            } else {
                MatRef::row_major(bb, k, n)
            };
            gemm(
                MatRef::row_major(ab, m, k),
                bref,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let out = Tensor::new(out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
                trans_b,
            },
            rg,
        )
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::resolve(self.shape(input), self.shape(kernel), spec)?;
        let data = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let out = Tensor::new(geom.output_shape(self.value(input).ndim() == 4), data)?;
        let rg = self.rg(input) || self.rg(kernel);
        self.push(out, Op::Conv2d { input, kernel, geom }, rg)
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let split = kernels::channel_split(self.shape(x), axis)?;
        if self.value(gamma).numel() != split.1 || self.value(beta).numel() != split.1 {
            return Err(Error::dim("batch_norm", self.shape(x), self.shape(gamma)));
        }
        Ok(split)
    }

    /// Training-mode batch norm; returns the batch moments so the caller can
    /// fold them into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        channel_axis: usize,
    ) -> Result<(Var, BatchMoments)> {
        let split = self.check_bn(x, gamma, beta, channel_axis)?;
        let moments = channel_moments(self.value(x).data(), split.0, split.1, split.2);
        let (y, xhat, inv_std) = normalize(
            self.value(x).data(),
            split,
            &moments.mean,
            &moments.var,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::new(self.shape(x).to_vec(), y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                split,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        )?;
        Ok((v, moments))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        channel_axis: usize,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let split = self.check_bn(x, gamma, beta, channel_axis)?;
        if mean.len() != split.1 || var.len() != split.1 {
            return Err(Error::dim("batch_norm", self.shape(x), &[mean.len()]));
        }
        let (y, xhat, inv_std) = normalize(
            self.value(x).data(),
            split,
            mean,
            var,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::new(self.shape(x).to_vec(), y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                split,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        )
    }

    /// Spike nonlinearity on the pre-reset potential `v_s`; forward follows
    /// the tape's [`SpikeMode`], backward uses the surrogate.
    pub fn spike(&mut self, v: Var, params: &LifParams) -> Result<Var> {
        let mode = self.spike_mode;
        let out = self.value(v).map(|x| mode.spike(params, x));
        let rg = self.rg(v);
        self.push(out, Op::Spike { v, params: *params }, rg)
    }

    /// Post-spike membrane `s·V_reset + (1-s)(1-leak)·v_s`.
    pub fn lif_reset(&mut self, v_s: Var, s: Var, params: &LifParams) -> Result<Var> {
        self.same_shape("lif_reset", v_s, s)?;
        let p = *params;
        let (vv, sv) = (self.value(v_s), self.value(s));
        let data = vv.data().iter().zip(sv.data()).map(|(&v, &s)| p.reset(v, s)).collect();
        let out = Tensor::new(vv.shape().to_vec(), data)?;
        let rg = self.rg(v_s) || self.rg(s);
        self.push(out, Op::LifReset { v_s, s, params: p }, rg)
    }

    /// One LIF timestep: integrates `input` into `membrane` (a resting
    /// population when `None`) and returns `(spikes, new membrane)`.
    pub fn lif_step(&mut self, membrane: Option<Var>, input: Var, params: &LifParams) -> Result<(Var, Var)> {
        let v_s = match membrane {
            Some(m) => self.add(m, input)?,
            None => input,
        };
        let s = self.spike(v_s, params)?;
        let v = self.lif_reset(v_s, s, params)?;
        Ok((s, v))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::contract("gather", format!("index {bad} out of range")));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(x);
        self.push(out, Op::Gather { x, index }, rg)
    }

    /// Splits `[B,C,H,W]` into `[B, N, C·p·p]` non-overlapping patches, with
    /// tokens in row-major patch order.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let index = match *self.shape(x) {
            [b, c, h, w] if patch > 0 && h % patch == 0 && w % patch == 0 => patch_index(b, c, h, w, patch),
            _ => {
                return Err(Error::contract(
                    "patchify",
                    format!("cannot cut {:?} into {patch}×{patch} patches", self.shape(x)),
                ))
            }
        };
        let [b, c, h, w] = *self.shape(x) else { unreachable!() };
        let n = (h / patch) * (w / patch);
        self.gather(x, index, &[b, n, c * patch * patch])
    }

    /// Normalises each row of the last two axes to sum to one:
    /// `(x_ij + eps/n) / (Σ_j x_ij + eps)`. An all-zero row becomes uniform
    /// and is treated as that constant when differentiating. Intended for
    /// nonnegative inputs.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let cols = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::contract("row_normalize", "scalar input"))?;
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for (row, dst) in src.chunks(cols).zip(data.chunks_mut(cols)) {
            let denom = row.iter().sum::<f64>() + eps;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v + eps / cols as f64) / denom;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push(out, Op::RowNormalize { x, cols, eps }, rg)
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = match *self.shape(logits) {
            [b, k] if b == labels.len() && b > 0 => (b, k),
            _ => return Err(Error::dim("softmax_cross_entropy", self.shape(logits), &[labels.len()])),
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &z[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - mx).exp() / denom;
            }
            loss += denom.ln() + mx - row[labels[i]];
        }
        let out = Tensor::scalar(loss / b as f64);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `mean((x - target)²)` over all elements.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::dim("mse", self.shape(x), target.shape()));
        }
        let xv = self.value(x).data();
        let n = xv.len().max(1) as f64;
        let loss = xv
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(loss),
            Op::MseToTarget {
                x,
                target: target.data().to_vec(),
            },
            rg,
        )
    }

    /// Records an op computed outside the tape together with its VJP.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, vjp: Vjp) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                vjp,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Fills the gradient of every node
    /// that requires one and releases the recorded operations.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::contract(
                "backward",
                "tape already differentiated; re-run the forward pass first",
            ));
        }
        if self.values.is_empty() {
            return Err(Error::contract("backward", "empty tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        let ops = std::mem::take(&mut self.ops);
        for (i, op) in ops.iter().enumerate().take(loss.0 + 1).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, op, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (slot, &rg) in grads.iter_mut().zip(&self.requires_grad) {
            if !rg {
                *slot = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let vals = &self.values;
        let rg = &self.requires_grad;
        let len = |v: Var| vals[v.0].numel();
        macro_rules! acc {
            ($v:expr, |$d:ident| $body:expr) => {{
                let v: Var = $v;
                if rg[v.0] {
                    acc_into(&mut grads[v.0], len(v), |$d: &mut [f64]| $body);
                }
            }};
        }
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc!(*b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc!(*b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                acc!(*a, |d| for j in 0..d.len() {
                    d[j] += g[j] * bv[j];
                });
                acc!(*b, |d| for j in 0..d.len() {
                    d[j] += g[j] * av[j];
                });
            }
            Op::Scale(a, c) => acc!(*a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Op::Reshape(a) => acc!(*a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::AddBias { x, bias, split } => {
                acc!(*x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let (outer, c, inner) = *split;
                acc!(*bias, |d| for o in 0..outer {
                    for (ch, dc) in d.iter_mut().enumerate().take(c) {
                        let base = (o * c + ch) * inner;
                        *dc += g[base..base + inner].iter().sum::<f64>();
                    }
                });
            }
            Op::Sum(a) => acc!(*a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = len(*a) as f64;
                acc!(*a, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanAxis { x, split } => {
                let (outer, mid, inner) = *split;
                acc!(*x, |d| for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for j in 0..inner {
                            d[base + j] += g[o * inner + j] / mid as f64;
                        }
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
                trans_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                let b_block = |bi: usize| {
                    if *b_batched {
                        &bv[bi * k * n..(bi + 1) * k * n]
                    } else {
                        bv
                    }
                };
                // dA = dC·Bᵀ (or dC·B when B was used transposed)
                acc!(*a, |d| for bi in 0..batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let bref = if *trans_b {
                        MatRef::row_major(b_block(bi), n, k)
                    } else {
                        MatRef::transposed(b_block(bi), k, n)
                    };
                    gemm(
                        MatRef::row_major(gc, m, n),
                        bref,
                        &mut d[bi * m * k..(bi + 1) * m * k],
                        1.0,
                    );
                });
                // dB = Aᵀ·dC (or dCᵀ·A when B was used transposed)
                acc!(*b, |d| for bi in 0..batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &av[bi * m * k..(bi + 1) * m * k];
                    let dst = if *b_batched {
                        &mut d[bi * k * n..(bi + 1) * k * n]
                    } else {
                        &mut d[..]
                    };
                    if *trans_b {
                        gemm(MatRef::transposed(gc, m, n), MatRef::row_major(ab, m, k), dst, 1.0);
                    } else {
                        gemm(MatRef::transposed(ab, m, k), MatRef::row_major(gc, m, n), dst, 1.0);
                    }
                });
            }
            Op::Conv2d { input, kernel, geom } => {
                let (gin, gk) = kernels::conv2d_backward(
                    vals[input.0].data(),
                    vals[kernel.0].data(),
                    g,
                    geom,
                    rg[input.0],
                    rg[kernel.0],
                );
                if let Some(gin) = gin {
                    acc!(*input, |d| d.iter_mut().zip(&gin).for_each(|(d, g)| *d += g));
                }
                if let Some(gk) = gk {
                    acc!(*kernel, |d| d.iter_mut().zip(&gk).for_each(|(d, g)| *d += g));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                split,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (outer, c, inner) = *split;
                let count = (outer * inner) as f64;
                let gam = vals[gamma.0].data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for j in base..base + inner {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                acc!(*gamma, |d| d.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s));
                acc!(*beta, |d| d.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s));
                acc!(*x, |d| for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let scale = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                            for j in base..base + inner {
                                d[j] += scale * (g[j] - mg - xhat[j] * mgx);
                            }
                        } else {
                            for j in base..base + inner {
                                d[j] += scale * g[j];
                            }
                        }
                    }
                });
            }
            Op::Spike { v, params } => {
                let vv = vals[v.0].data();
                acc!(*v, |d| for j in 0..d.len() {
                    d[j] += g[j] * params.surrogate(vv[j]);
                });
            }
            Op::LifReset { v_s, s, params } => {
                let (vv, sv) = (vals[v_s.0].data(), vals[s.0].data());
                let keep = 1.0 - params.leak;
                acc!(*v_s, |d| for j in 0..d.len() {
                    d[j] += g[j] * (1.0 - sv[j]) * keep;
                });
                acc!(*s, |d| for j in 0..d.len() {
                    d[j] += g[j] * (params.v_reset - keep * vv[j]);
                });
            }
            Op::Gather { x, index } => {
                acc!(*x, |d| for (&src, &gv) in index.iter().zip(g) {
                    d[src] += gv;
                });
            }
            Op::RowNormalize { x, cols, eps } => {
                let xv = vals[x.0].data();
                let out = vals[i].data();
                acc!(*x, |d| for r in 0..xv.len() / cols {
                    let span = r * cols..(r + 1) * cols;
                    if xv[span.clone()].iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let denom = xv[span.clone()].iter().sum::<f64>() + eps;
                    let dot: f64 = g[span.clone()].iter().zip(&out[span.clone()]).map(|(a, b)| a * b).sum();
                    for j in span {
                        d[j] += (g[j] - dot) / denom;
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let k = probs.len() / b;
                acc!(*logits, |d| for (r, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        d[r * k + j] += g[0] * (probs[r * k + j] - onehot) / b as f64;
                    }
                });
            }
            Op::MseToTarget { x, target } => {
                let xv = vals[x.0].data();
                let n = xv.len().max(1) as f64;
                acc!(*x, |d| for j in 0..d.len() {
                    d[j] += g[0] * 2.0 * (xv[j] - target[j]) / n;
                });
            }
            Op::Custom { inputs, vjp } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &vals[v.0]).collect();
                let gs = vjp(g, &ins, &vals[i]);
                for (v, gv) in inputs.iter().zip(gs) {
                    acc!(*v, |d| d.iter_mut().zip(&gv).for_each(|(d, g)| *d += g));
                }
            }
        }
    }
}

/// Source offsets for [`Tape::patchify`].
pub(crate) fn patch_index(b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ty in 0..gh {
            for tx in 0..gw {
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            index.push(((bi * c + ci) * h + ty * p + py) * w + tx * p + px);
                        }
                    }
                }
            }
        }
    }
    index
}
