//! The full gaze-guided spiking transformer classifier.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocks::{AttentionState, BatchNormLayer, ConvSnnBlock, RepConv, SnState, SpikeAttentionBlock, SpikeLog};
use crate::error::{Error, Result};
use crate::kernels::{ConvMode, ConvSpec};
use crate::lif::{LifParams, SpikeMode};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Architecture dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub conv_blocks: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub attention_blocks: usize,
    pub num_classes: usize,
    pub lif: LifParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            in_channels: 1,
            stem_channels: 16,
            conv_blocks: 2,
            patch_size: 4,
            token_dim: 32,
            attention_blocks: 2,
            num_classes: 2,
            lif: LifParams::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        let positive = [
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
            ("stem_channels", self.stem_channels),
            ("patch_size", self.patch_size),
            ("token_dim", self.token_dim),
            ("attention_blocks", self.attention_blocks),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model.num_classes must be at least 2".into()));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "model.image_size {} is not divisible by model.patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of tokens N.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.stem_channels * self.patch_size * self.patch_size
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub timesteps: usize,
    pub training: bool,
}

impl ForwardOptions {
    pub fn eval(timesteps: usize) -> Self {
        ForwardOptions {
            timesteps,
            training: false,
        }
    }

    pub fn train(timesteps: usize) -> Self {
        ForwardOptions {
            timesteps,
            training: true,
        }
    }
}

pub struct ForwardOutput {
    /// `[B, num_classes]`, averaged over timesteps.
    pub logits: Var,
    /// Row-normalised attention of the last block, `[B, N, N]`, averaged
    /// over timesteps.
    pub attention: Var,
    pub spikes: SpikeLog,
}

/// Spike counts of one SN layer over a forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFiring {
    pub layer: String,
    pub spikes: f64,
    pub slots: usize,
}

impl LayerFiring {
    pub fn rate(&self) -> f64 {
        if self.slots == 0 {
            0.0
        } else {
            self.spikes / self.slots as f64
        }
    }
}

/// Per-layer firing rates in network order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FiringStats {
    pub layers: Vec<LayerFiring>,
}

impl FiringStats {
    pub fn from_log(tape: &Tape, log: &SpikeLog) -> Self {
        let mut stats = FiringStats::default();
        for (name, var) in &log.entries {
            let t = tape.value(*var);
            stats.record(name, t.sum(), t.numel());
        }
        stats
    }

    fn record(&mut self, layer: &str, spikes: f64, slots: usize) {
        match self.layers.iter_mut().find(|l| l.layer == layer) {
            Some(l) => {
                l.spikes += spikes;
                l.slots += slots;
            }
            None => self.layers.push(LayerFiring {
                layer: layer.to_string(),
                spikes,
                slots,
            }),
        }
    }

    pub fn merge(&mut self, other: &FiringStats) {
        for l in &other.layers {
            self.record(&l.layer, l.spikes, l.slots);
        }
    }

    pub fn rate(&self, layer: &str) -> Option<f64> {
        self.layers.iter().find(|l| l.layer == layer).map(LayerFiring::rate)
    }

    pub fn rates(&self) -> BTreeMap<String, f64> {
        self.layers.iter().map(|l| (l.layer.clone(), l.rate())).collect()
    }
}

/// Plain-tensor result of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor,
    pub attention: Tensor,
    pub firing: FiringStats,
}

/// Stem, convolutional SNN blocks, tokenizer, spike-attention blocks and a
/// linear head. Images are presented unchanged at every timestep.
#[derive(Clone, Debug)]
pub struct EgSpikeFormer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub stem: ParamId,
    pub stem_bn: BatchNormLayer,
    pub blocks: Vec<ConvSnnBlock>,
    pub embed: RepConv,
    pub attention: Vec<SpikeAttentionBlock>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

pub const TOKENIZER_SN: &str = "tokenizer.sn";

impl EgSpikeFormer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, 0x6d6f_6465_6c00, 0));
        let mut params = ParamStore::new();
        let c = config.stem_channels;
        let fan_in = config.in_channels * 9;
        let stem = params.add(
            "stem.weight",
            Tensor::randn([c, config.in_channels, 3, 3], (2.0 / fan_in as f64).sqrt(), &mut rng),
        );
        let stem_bn = BatchNormLayer::new(&mut params, "stem.bn", c, 1);
        let blocks = (0..config.conv_blocks)
            .map(|i| ConvSnnBlock::new(&mut params, &format!("blocks.{i}"), c, config.lif, &mut rng))
            .collect();
        let embed = RepConv::new(
            &mut params,
            "tokenizer.embed",
            config.patch_dim(),
            config.token_dim,
            &mut rng,
        );
        let attention = (0..config.attention_blocks)
            .map(|i| {
                SpikeAttentionBlock::new(
                    &mut params,
                    &format!("attention.{i}"),
                    config.token_dim,
                    config.lif,
                    &mut rng,
                )
            })
            .collect();
        let d = config.token_dim;
        let head_weight = params.add(
            "head.weight",
            Tensor::randn([d, config.num_classes], (1.0 / d as f64).sqrt(), &mut rng),
        );
        let head_bias = params.add("head.bias", Tensor::zeros([config.num_classes]));
        Ok(EgSpikeFormer {
            config,
            params,
            stem,
            stem_bn,
            blocks,
            embed,
            attention,
            head_weight,
            head_bias,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn batch_norms(&self) -> Vec<&BatchNormLayer> {
        let mut out = vec![&self.stem_bn];
        out.extend(self.blocks.iter().map(|b| &b.bn));
        out.push(&self.embed.bn);
        for a in &self.attention {
            out.extend(a.repconvs().into_iter().map(|r| &r.bn));
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormLayer> {
        let mut out = vec![&mut self.stem_bn];
        out.extend(self.blocks.iter_mut().map(|b| &mut b.bn));
        out.push(&mut self.embed.bn);
        for a in &mut self.attention {
            out.extend(a.repconvs_mut().into_iter().map(|r| &mut r.bn));
        }
        out
    }

    fn repconvs_mut(&mut self) -> Vec<&mut RepConv> {
        let mut out = vec![&mut self.embed];
        for a in &mut self.attention {
            out.extend(a.repconvs_mut());
        }
        out
    }

    /// Folds every RepConv for inference.
    pub fn fuse(&mut self) -> Result<()> {
        let params = self.params.clone();
        for rc in self.repconvs_mut() {
            rc.fuse(&params)?;
        }
        Ok(())
    }

    pub fn unfuse(&mut self) {
        for rc in self.repconvs_mut() {
            rc.unfuse();
        }
    }

    /// Names of the SN layers in network order.
    pub fn spiking_layers(&self) -> Vec<String> {
        let mut out: Vec<String> = self.blocks.iter().map(|b| format!("{}.sn", b.name)).collect();
        out.push(TOKENIZER_SN.to_string());
        for a in &self.attention {
            for s in ["sn_in", "sn_q", "sn_k", "sn_v"] {
                out.push(format!("{}.{s}", a.name));
            }
        }
        out
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match *shape {
            [b, ch, h, w] if b > 0 && ch == c.in_channels && h == c.image_size && w == c.image_size => Ok(()),
            _ => Err(Error::dim(
                "model_forward",
                shape,
                &[c.in_channels, c.image_size, c.image_size],
            )),
        }
    }

    /// Records a full multi-timestep pass over `images` (`[B, C, H, W]`) on
    /// `tape`. All membranes start at rest.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        b: &Bindings,
        images: &Tensor,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        self.check_images(images.shape())?;
        if opts.timesteps == 0 {
            return Err(Error::contract("model_forward", "timesteps must be at least 1"));
        }
        let training = opts.training;
        let x = tape.constant(images.clone());
        let stem = tape.conv2d(x, b.var(self.stem), ConvSpec::new(ConvMode::Dense, 1, 1))?;
        let stem = self.stem_bn.forward(tape, b, stem, training)?;

        let mut conv_states = vec![SnState::default(); self.blocks.len()];
        let mut tok_state = SnState::default();
        let mut attn_states = vec![AttentionState::default(); self.attention.len()];
        let mut log = SpikeLog::default();
        let mut logits_sum: Option<Var> = None;
        let mut attn_sum: Option<Var> = None;
        let lif = self.config.lif;

        for _ in 0..opts.timesteps {
            let mut h = stem;
            for (block, state) in self.blocks.iter_mut().zip(&mut conv_states) {
                h = block.forward(tape, b, h, state, &mut log, training)?;
            }
            let s = tok_state.fire(tape, h, &lif)?;
            log.push(TOKENIZER_SN, s);
            let patches = tape.patchify(s, self.config.patch_size)?;
            let mut tokens = self.embed.forward(tape, b, patches, training)?;
            let mut last_attention = None;
            for (block, state) in self.attention.iter_mut().zip(&mut attn_states) {
                let out = block.forward(tape, b, tokens, state, &mut log, training)?;
                tokens = out.output;
                last_attention = Some(out.attention);
            }
            let pooled = tape.mean_axis(tokens, 1)?;
            let logits = tape.linear(pooled, b.var(self.head_weight))?;
            let logits = tape.add_bias(logits, b.var(self.head_bias), 1)?;
            let attention = last_attention.expect("at least one attention block");
            logits_sum = Some(match logits_sum {
                Some(acc) => tape.add(acc, logits)?,
                None => logits,
            });
            attn_sum = Some(match attn_sum {
                Some(acc) => tape.add(acc, attention)?,
                None => attention,
            });
        }
        let inv_t = 1.0 / opts.timesteps as f64;
        let logits = tape.scale(logits_sum.expect("timesteps >= 1"), inv_t)?;
        let attention = tape.scale(attn_sum.expect("timesteps >= 1"), inv_t)?;
        Ok(ForwardOutput {
            logits,
            attention,
            spikes: log,
        })
    }

    /// Inference-mode pass that returns plain tensors.
    pub fn infer(&mut self, images: &Tensor, timesteps: usize) -> Result<Inference> {
        let mut tape = Tape::with_spike_mode(SpikeMode::Binary);
        let b = self.params.bind_constants(&mut tape);
        let out = self.forward(&mut tape, &b, images, ForwardOptions::eval(timesteps))?;
        Ok(Inference {
            logits: tape.value(out.logits).clone(),
            attention: tape.value(out.attention).clone(),
            firing: FiringStats::from_log(&tape, &out.spikes),
        })
    }
}
