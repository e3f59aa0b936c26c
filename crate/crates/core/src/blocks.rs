//! Spiking building blocks: the convolutional residual block, the
//! re-parameterisable token projection and the spike-attention block.

use crate::error::{Error, Result};
use crate::kernels::{ConvMode, ConvSpec, RunningStats, BN_EPS};
use crate::lif::LifParams;
use crate::params::{Bindings, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Membrane of one neuron population on a tape; starts at rest.
#[derive(Clone, Copy, Debug, Default)]
pub struct SnState(Option<Var>);

impl SnState {
    /// Integrates `input`, emits spikes and keeps the new membrane.
    pub fn fire(&mut self, tape: &mut Tape, input: Var, params: &LifParams) -> Result<Var> {
        let (s, v) = tape.lif_step(self.0, input, params)?;
        self.0 = Some(v);
        Ok(s)
    }

    pub fn membrane(&self) -> Option<Var> {
        self.0
    }
}

/// Spike tensors emitted during a forward pass, tagged by layer name.
#[derive(Clone, Debug, Default)]
pub struct SpikeLog {
    pub entries: Vec<(String, Var)>,
}

impl SpikeLog {
    pub fn push(&mut self, layer: &str, spikes: Var) {
        self.entries.push((layer.to_string(), spikes));
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::randn(shape.to_vec(), (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// Affine batch norm with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: RunningStats,
    pub channel_axis: usize,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, channel_axis: usize) -> Self {
        BatchNormLayer {
            name: name.to_string(),
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            running: RunningStats::new(channels),
            channel_axis,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, b: &Bindings, x: Var, training: bool) -> Result<Var> {
        let (g, be) = (b.var(self.gamma), b.var(self.beta));
        if training {
            let (y, moments) = tape.batch_norm_train(x, g, be, self.channel_axis)?;
            self.running.update(&moments);
            Ok(y)
        } else {
            tape.batch_norm_eval(x, g, be, self.channel_axis, &self.running.mean, &self.running.var)
        }
    }
}

/// Residual block `x + BN(Conv_p(Conv_d(SN(x))))` over `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct ConvSnnBlock {
    pub name: String,
    pub channels: usize,
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bn: BatchNormLayer,
    pub lif: LifParams,
}

impl ConvSnnBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, lif: LifParams, rng: &mut SeededRng) -> Self {
        ConvSnnBlock {
            name: name.to_string(),
            channels,
            depthwise: store.add(format!("{name}.depthwise"), kaiming(&[channels, 1, 3, 3], 9, rng)),
            pointwise: store.add(
                format!("{name}.pointwise"),
                kaiming(&[channels, channels, 1, 1], channels, rng),
            ),
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), channels, 1),
            lif,
        }
    }

    /// Returns the block output; `state` carries the SN membrane across
    /// timesteps.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        b: &Bindings,
        x: Var,
        state: &mut SnState,
        log: &mut SpikeLog,
        training: bool,
    ) -> Result<Var> {
        match tape.shape(x) {
            [_, c, _, _] if *c == self.channels => {}
            s => return Err(Error::dim("conv_snn_block", s, &[self.channels])),
        }
        let s = state.fire(tape, x, &self.lif)?;
        log.push(&format!("{}.sn", self.name), s);
        let d = tape.conv2d(s, b.var(self.depthwise), ConvSpec::new(ConvMode::Depthwise, 1, 1))?;
        let p = tape.conv2d(d, b.var(self.pointwise), ConvSpec::new(ConvMode::Pointwise, 1, 0))?;
        let n = self.bn.forward(tape, b, p, training)?;
        tape.add(x, n)
    }
}

/// Folded inference form of a [`RepConv`].
#[derive(Clone, Debug, PartialEq)]
pub struct FusedRepConv {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Token-level 1×1 convolution followed by batch norm, foldable into a
/// single kernel plus bias for inference. The kernel is stored as
/// `[d_in, d_out]` and acts on the last axis.
#[derive(Clone, Debug)]
pub struct RepConv {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub weight: ParamId,
    pub bn: BatchNormLayer,
    pub fused: Option<FusedRepConv>,
}

impl RepConv {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        RepConv {
            name: name.to_string(),
            d_in,
            d_out,
            weight: store.add(format!("{name}.weight"), kaiming(&[d_in, d_out], d_in, rng)),
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), d_out, 0),
            fused: None,
        }
    }

    pub fn is_fused(&self) -> bool {
        self.fused.is_some()
    }

    pub fn forward(&mut self, tape: &mut Tape, b: &Bindings, x: Var, training: bool) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::dim("rep_conv", &shape, &[self.d_in, self.d_out]));
        }
        let axis = shape.len() - 1;
        if let Some(f) = &self.fused {
            if training {
                return Err(Error::contract(
                    "rep_conv",
                    "a fused RepConv only runs in inference mode",
                ));
            }
            let k = tape.constant(f.kernel.clone());
            let bias = tape.constant(f.bias.clone());
            let y = tape.linear(x, k)?;
            return tape.add_bias(y, bias, axis);
        }
        let y = tape.linear(x, b.var(self.weight))?;
        self.bn.channel_axis = axis;
        self.bn.forward(tape, b, y, training)
    }

    /// Folds the batch norm (running statistics) into the kernel and a bias.
    pub fn fuse(&mut self, store: &ParamStore) -> Result<()> {
        if self.fused.is_some() {
            return Err(Error::contract(
                "rep_conv_fuse",
                format!("{} is already fused", self.name),
            ));
        }
        let w = store.get(self.weight);
        let gamma = store.get(self.bn.gamma).data();
        let beta = store.get(self.bn.beta).data();
        let r = &self.bn.running;
        let scale: Vec<f64> = (0..self.d_out).map(|j| gamma[j] / (r.var[j] + BN_EPS).sqrt()).collect();
        let kernel = Tensor::from_fn([self.d_in, self.d_out], |i| w.data()[i] * scale[i % self.d_out]);
        let bias = Tensor::from_fn([self.d_out], |j| beta[j] - scale[j] * r.mean[j]);
        self.fused = Some(FusedRepConv { kernel, bias });
        Ok(())
    }

    pub fn unfuse(&mut self) {
        self.fused = None;
    }
}

/// Per-timestep membranes of a [`SpikeAttentionBlock`].
#[derive(Clone, Copy, Debug, Default)]
pub struct AttentionState {
    pub input: SnState,
    pub query: SnState,
    pub key: SnState,
    pub value: SnState,
}

/// Binary query/key/value spikes of one attention step.
#[derive(Clone, Copy, Debug)]
pub struct SpikeQkv {
    pub input: Var,
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    /// Raw scores `Q·Kᵀ/√d_k`, `[B, N, N]`.
    pub scores: Var,
    /// Row-normalised scores.
    pub attention: Var,
}

pub const ATTENTION_EPS: f64 = 1e-6;

/// Single-head spike attention with a residual shortcut:
/// `x' = x + RepConv((Q·Kᵀ/√d_k)·V)` where `Q, K, V = SN(RepConv(SN(x)))`.
/// There is no softmax.
#[derive(Clone, Debug)]
pub struct SpikeAttentionBlock {
    pub name: String,
    pub dim: usize,
    pub d_k: usize,
    pub query: RepConv,
    pub key: RepConv,
    pub value: RepConv,
    pub output: RepConv,
    pub lif: LifParams,
}

impl SpikeAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, lif: LifParams, rng: &mut SeededRng) -> Self {
        SpikeAttentionBlock {
            name: name.to_string(),
            dim,
            d_k: dim,
            query: RepConv::new(store, &format!("{name}.query"), dim, dim, rng),
            key: RepConv::new(store, &format!("{name}.key"), dim, dim, rng),
            value: RepConv::new(store, &format!("{name}.value"), dim, dim, rng),
            output: RepConv::new(store, &format!("{name}.output"), dim, dim, rng),
            lif,
        }
    }

    pub fn repconvs_mut(&mut self) -> [&mut RepConv; 4] {
        [&mut self.query, &mut self.key, &mut self.value, &mut self.output]
    }

    pub fn repconvs(&self) -> [&RepConv; 4] {
        [&self.query, &self.key, &self.value, &self.output]
    }

    fn check(&self, tape: &Tape, x: Var) -> Result<()> {
        match tape.shape(x) {
            [_, _, d] if *d == self.dim => Ok(()),
            s => Err(Error::dim("spike_attention", s, &[self.dim])),
        }
    }

    /// Spike-encodes `x` (`[B, N, d]`) and derives binary Q, K and V.
    pub fn spike_qkv(
        &mut self,
        tape: &mut Tape,
        b: &Bindings,
        x: Var,
        state: &mut AttentionState,
        log: &mut SpikeLog,
        training: bool,
    ) -> Result<SpikeQkv> {
        self.check(tape, x)?;
        let lif = self.lif;
        let xs = state.input.fire(tape, x, &lif)?;
        log.push(&format!("{}.sn_in", self.name), xs);
        let q = self.query.forward(tape, b, xs, training)?;
        let q = state.query.fire(tape, q, &lif)?;
        log.push(&format!("{}.sn_q", self.name), q);
        let k = self.key.forward(tape, b, xs, training)?;
        let k = state.key.fire(tape, k, &lif)?;
        log.push(&format!("{}.sn_k", self.name), k);
        let v = self.value.forward(tape, b, xs, training)?;
        let v = state.value.fire(tape, v, &lif)?;
        log.push(&format!("{}.sn_v", self.name), v);
        Ok(SpikeQkv {
            input: xs,
            query: q,
            key: k,
            value: v,
        })
    }

    /// Scores, row-normalised attention and the value mix for given Q/K/V.
    pub fn attend(&self, tape: &mut Tape, qkv: &SpikeQkv) -> Result<(Var, Var, Var)> {
        if self.d_k == 0 {
            return Err(Error::contract("spike_attention", "d_k must be positive"));
        }
        let raw = tape.bmm(qkv.query, qkv.key, true)?;
        let scores = tape.scale(raw, 1.0 / (self.d_k as f64).sqrt())?;
        let attention = tape.row_normalize(scores, ATTENTION_EPS)?;
        let mixed = tape.bmm(scores, qkv.value, false)?;
        Ok((scores, attention, mixed))
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        b: &Bindings,
        x: Var,
        state: &mut AttentionState,
        log: &mut SpikeLog,
        training: bool,
    ) -> Result<AttentionOutput> {
        let qkv = self.spike_qkv(tape, b, x, state, log, training)?;
        let (scores, attention, mixed) = self.attend(tape, &qkv)?;
        let projected = self.output.forward(tape, b, mixed, training)?;
        let output = tape.add(x, projected)?;
        Ok(AttentionOutput {
            output,
            scores,
            attention,
        })
    }
}
