//! Operation counting and the MAC/AC energy estimate.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EgSpikeFormer, FiringStats, TOKENIZER_SN};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Real-valued input: every multiply-accumulate is paid for.
    MacLayer,
    /// Spike input: only accumulates where a presynaptic spike occurs.
    SpikingLayer,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::MacLayer => "mac-layer",
            LayerKind::SpikingLayer => "spiking-layer",
        }
    }
}

/// Shape of a counted layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum LayerShape {
    Conv {
        c_in: usize,
        c_out: usize,
        h_out: usize,
        w_out: usize,
        kernel: usize,
        groups: usize,
    },
    Matmul {
        m: usize,
        k: usize,
        n: usize,
    },
}

/// Multiply-accumulates of one evaluation of the layer.
pub fn count_flops(shape: &LayerShape) -> Result<u64> {
    let unshaped = || Error::contract("count_flops", format!("layer is not fully shaped: {shape:?}"));
    match *shape {
        LayerShape::Conv {
            c_in,
            c_out,
            h_out,
            w_out,
            kernel,
            groups,
        } => {
            if [c_in, c_out, h_out, w_out, kernel, groups].contains(&0) || c_in % groups != 0 || c_out % groups != 0 {
                return Err(unshaped());
            }
            Ok((c_out * h_out * w_out * kernel * kernel * (c_in / groups)) as u64)
        }
        LayerShape::Matmul { m, k, n } => {
            if [m, k, n].contains(&0) {
                return Err(unshaped());
            }
            Ok((m * k * n) as u64)
        }
    }
}

/// Spike-driven operations: `rate · T · flops_per_timestep`.
pub fn count_sops(flops_per_timestep: u64, firing_rate: f64, timesteps: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&firing_rate) {
        return Err(Error::contract(
            "count_sops",
            format!("firing rate {firing_rate} outside [0, 1]"),
        ));
    }
    if timesteps == 0 {
        return Err(Error::contract("count_sops", "timesteps must be at least 1"));
    }
    Ok(firing_rate * timesteps as f64 * flops_per_timestep as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_name: String,
    pub kind: LayerKind,
    pub flops_per_timestep: u64,
    /// Presynaptic firing rate; ignored for MAC layers.
    pub firing_rate: f64,
    /// Number of evaluations per inference.
    pub timesteps: usize,
}

impl LayerCost {
    /// FLOPs for MAC layers, SOPs for spiking layers.
    pub fn operations(&self) -> Result<f64> {
        match self.kind {
            LayerKind::MacLayer => Ok(self.flops_per_timestep as f64 * self.timesteps as f64),
            LayerKind::SpikingLayer => count_sops(self.flops_per_timestep, self.firing_rate, self.timesteps),
        }
    }
}

/// Per-operation energies in picojoules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConstants {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyConstants {
    /// 45 nm figures: 4.6 pJ per MAC, 0.9 pJ per AC.
    fn default() -> Self {
        EnergyConstants { e_mac: 4.6, e_ac: 0.9 }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_mac > 0.0 && self.e_ac > 0.0) {
            return Err(Error::contract("energy constants", "e_mac and e_ac must be positive"));
        }
        Ok(())
    }
}

const PJ_PER_MJ: f64 = 1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    #[serde(flatten)]
    pub cost: LayerCost,
    pub operations: f64,
    pub energy_mj: f64,
}

pub const REPORT_FOOTER: &str =
    "elementwise work (batch norm, residual adds, membrane updates) is excluded from the counts";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub timesteps: usize,
    pub constants: EnergyConstants,
    pub layers: Vec<LayerEnergy>,
    pub flops: f64,
    pub sops: f64,
    pub mac_energy_mj: f64,
    pub ac_energy_mj: f64,
    pub total_energy_mj: f64,
    pub note: String,
}

/// `E_MAC · FLOPs + E_AC · SOPs`, reported in millijoules.
pub fn estimate_energy(costs: &[LayerCost], constants: EnergyConstants) -> Result<EnergyReport> {
    constants.validate()?;
    if costs.is_empty() {
        return Err(Error::contract("estimate_energy", "no layers to cost"));
    }
    let mut layers = Vec::with_capacity(costs.len());
    let (mut flops, mut sops, mut mac, mut ac) = (0.0, 0.0, 0.0, 0.0);
    for c in costs {
        let ops = c.operations()?;
        let energy_mj = match c.kind {
            LayerKind::MacLayer => {
                flops += ops;
                constants.e_mac * ops / PJ_PER_MJ
            }
            LayerKind::SpikingLayer => {
                sops += ops;
                constants.e_ac * ops / PJ_PER_MJ
            }
        };
        match c.kind {
            LayerKind::MacLayer => mac += energy_mj,
            LayerKind::SpikingLayer => ac += energy_mj,
        }
        layers.push(LayerEnergy {
            cost: c.clone(),
            operations: ops,
            energy_mj,
        });
    }
    Ok(EnergyReport {
        timesteps: costs.iter().map(|c| c.timesteps).max().unwrap_or(0),
        constants,
        layers,
        flops,
        sops,
        mac_energy_mj: mac,
        ac_energy_mj: ac,
        total_energy_mj: mac + ac,
        note: REPORT_FOOTER.to_string(),
    })
}

impl EnergyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28} {:<14} {:>14} {:>8} {:>3} {:>16} {:>12}",
            "layer", "kind", "flops/step", "rate", "T", "ops", "energy (mJ)"
        );
        for l in &self.layers {
            let c = &l.cost;
            let rate = match c.kind {
                LayerKind::MacLayer => "-".to_string(),
                LayerKind::SpikingLayer => format!("{:.4}", c.firing_rate),
            };
            let _ = writeln!(
                s,
                "{:<28} {:<14} {:>14} {:>8} {:>3} {:>16.1} {:>12.6e}",
                c.layer_name,
                c.kind.as_str(),
                c.flops_per_timestep,
                rate,
                c.timesteps,
                l.operations,
                l.energy_mj
            );
        }
        let _ = writeln!(
            s,
            "MAC {:.6e} mJ ({:.0} FLOPs) + AC {:.6e} mJ ({:.1} SOPs) = {:.6e} mJ at T={}",
            self.mac_energy_mj, self.flops, self.ac_energy_mj, self.sops, self.total_energy_mj, self.timesteps
        );
        let _ = writeln!(
            s,
            "E_MAC = {} pJ, E_AC = {} pJ; {}",
            self.constants.e_mac, self.constants.e_ac, self.note
        );
        s
    }

    /// One row per layer.
    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let err = |e: csv::Error| Error::format("energy csv", e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "layer",
            "kind",
            "flops_per_timestep",
            "firing_rate",
            "timesteps",
            "operations",
            "energy_mj",
        ])
        .map_err(err)?;
        for l in &self.layers {
            let c = &l.cost;
            w.write_record([
                c.layer_name.clone(),
                c.kind.as_str().to_string(),
                c.flops_per_timestep.to_string(),
                c.firing_rate.to_string(),
                c.timesteps.to_string(),
                l.operations.to_string(),
                l.energy_mj.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::format("energy csv", e.to_string()))
    }
}

/// Costs of one single-image inference over `timesteps` steps, using the
/// measured firing rates of the SN feeding each spiking layer. The stem sees
/// the same static image at every step and is evaluated once.
pub fn layer_costs(model: &EgSpikeFormer, firing: &FiringStats, timesteps: usize) -> Result<Vec<LayerCost>> {
    let cfg = &model.config;
    let (s, c, n, d) = (cfg.image_size, cfg.stem_channels, cfg.tokens(), cfg.token_dim);
    let rate = |layer: &str| {
        firing
            .rate(layer)
            .ok_or_else(|| Error::contract("profile_model", format!("no firing statistics for {layer}")))
    };
    let mac = |name: String, shape: LayerShape, t: usize| -> Result<LayerCost> {
        Ok(LayerCost {
            layer_name: name,
            kind: LayerKind::MacLayer,
            flops_per_timestep: count_flops(&shape)?,
            firing_rate: 0.0,
            timesteps: t,
        })
    };
    let spiking = |name: String, shape: LayerShape, r: f64| -> Result<LayerCost> {
        Ok(LayerCost {
            layer_name: name,
            kind: LayerKind::SpikingLayer,
            flops_per_timestep: count_flops(&shape)?,
            firing_rate: r,
            timesteps,
        })
    };
    let conv = |c_in, c_out, kernel, groups| LayerShape::Conv {
        c_in,
        c_out,
        h_out: s,
        w_out: s,
        kernel,
        groups,
    };
    let mm = |m, k, n| LayerShape::Matmul { m, k, n };

    let mut costs = vec![mac("stem.conv".into(), conv(cfg.in_channels, c, 3, 1), 1)?];
    for b in &model.blocks {
        let r = rate(&format!("{}.sn", b.name))?;
        costs.push(spiking(format!("{}.depthwise", b.name), conv(c, c, 3, c), r)?);
        costs.push(mac(format!("{}.pointwise", b.name), conv(c, c, 1, 1), timesteps)?);
    }
    costs.push(spiking(
        "tokenizer.embed".into(),
        mm(n, cfg.patch_dim(), d),
        rate(TOKENIZER_SN)?,
    )?);
    for a in &model.attention {
        let r_in = rate(&format!("{}.sn_in", a.name))?;
        for p in ["query", "key", "value"] {
            costs.push(spiking(format!("{}.{p}", a.name), mm(n, d, d), r_in)?);
        }
        costs.push(spiking(
            format!("{}.scores", a.name),
            mm(n, d, n),
            rate(&format!("{}.sn_q", a.name))?,
        )?);
        costs.push(spiking(
            format!("{}.mix", a.name),
            mm(n, n, d),
            rate(&format!("{}.sn_v", a.name))?,
        )?);
        costs.push(mac(format!("{}.output", a.name), mm(n, d, d), timesteps)?);
    }
    costs.push(mac("head".into(), mm(1, d, cfg.num_classes), timesteps)?);
    Ok(costs)
}

/// Measures firing rates on a calibration batch and costs one inference.
pub fn profile_model(
    model: &mut EgSpikeFormer,
    images: &Tensor,
    timesteps: usize,
    constants: EnergyConstants,
) -> Result<EnergyReport> {
    let inference = model.infer(images, timesteps)?;
    estimate_energy(&layer_costs(model, &inference.firing, timesteps)?, constants)
}
