//! Leaky integrate-and-fire neurons.
//!
//! One step of the dynamics, for input current `I` (already weighted by the
//! upstream layer):
//!
//! ```text
//! V_s = V_prev + I
//! S   = 1 if V_s >= V_th else 0
//! V   = S·V_reset + (1 - S)·(1 - leak)·V_s
//! ```
//!
//! The Heaviside step has zero derivative almost everywhere, so training
//! uses a triangular surrogate `max(0, 1 - |V_s - V_th|/γ)/γ` in its place.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifParams {
    pub v_threshold: f64,
    pub v_reset: f64,
    /// Fraction of the membrane potential lost per step when not firing.
    pub leak: f64,
    /// Half-width of the triangular surrogate.
    pub surrogate_width: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            v_threshold: 1.0,
            v_reset: 0.0,
            leak: 0.5,
            surrogate_width: 1.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.leak)
            && self.v_threshold > self.v_reset
            && self.surrogate_width > 0.0
            && self.v_threshold.is_finite()
            && self.v_reset.is_finite()
            && self.surrogate_width.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "LIF parameters need 0 <= leak <= 1, v_threshold > v_reset and surrogate_width > 0, got {self:?}"
            )))
        }
    }

    #[inline]
    pub fn fires(&self, v_s: f64) -> bool {
        v_s >= self.v_threshold
    }

    /// Membrane after the step, given the pre-reset potential and the spike.
    #[inline]
    pub fn reset(&self, v_s: f64, spike: f64) -> f64 {
        spike * self.v_reset + (1.0 - spike) * (1.0 - self.leak) * v_s
    }

    /// Triangular surrogate for dS/dV_s.
    #[inline]
    pub fn surrogate(&self, v_s: f64) -> f64 {
        let u = (v_s - self.v_threshold).abs() / self.surrogate_width;
        if u >= 1.0 {
            0.0
        } else {
            (1.0 - u) / self.surrogate_width
        }
    }

    /// Smooth spike whose exact derivative is [`Self::surrogate`] (the
    /// integral of the triangle). Used only for gradient verification.
    #[inline]
    pub fn relaxed_spike(&self, v_s: f64) -> f64 {
        let u = (v_s - self.v_threshold) / self.surrogate_width;
        if u <= -1.0 {
            0.0
        } else if u >= 1.0 {
            1.0
        } else if u < 0.0 {
            0.5 * (1.0 + u) * (1.0 + u)
        } else {
            1.0 - 0.5 * (1.0 - u) * (1.0 - u)
        }
    }
}

/// How the spike nonlinearity is evaluated in the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpikeMode {
    /// Exact binary spikes; backward uses the surrogate.
    #[default]
    Binary,
    /// Spikes replaced by the integral of the surrogate, so forward and
    /// backward are consistent and finite differences apply.
    Relaxed,
}

impl SpikeMode {
    #[inline]
    pub fn spike(self, params: &LifParams, v_s: f64) -> f64 {
        match self {
            SpikeMode::Binary => {
                if params.fires(v_s) {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeMode::Relaxed => params.relaxed_spike(v_s),
        }
    }
}

/// Membrane potentials of a neuron population.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub membrane: Tensor,
}

impl LifState {
    pub fn zeros(shape: &[usize]) -> Self {
        LifState {
            membrane: Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Spikes over time; the leading extent is the timestep count.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain {
    pub spikes: Tensor,
}

impl SpikeTrain {
    pub fn timesteps(&self) -> usize {
        self.spikes.shape()[0]
    }

    pub fn firing_rate(&self) -> f64 {
        self.spikes.sum() / self.spikes.numel().max(1) as f64
    }
}

pub fn lif_step(state: &LifState, input: &Tensor, params: &LifParams) -> Result<(Tensor, LifState)> {
    if state.membrane.shape() != input.shape() {
        return Err(Error::dim("lif_step", state.membrane.shape(), input.shape()));
    }
    let n = input.numel();
    let mut spikes = Vec::with_capacity(n);
    let mut membrane = Vec::with_capacity(n);
    for (&v, &i) in state.membrane.data().iter().zip(input.data()) {
        let v_s = v + i;
        let s = if params.fires(v_s) { 1.0 } else { 0.0 };
        spikes.push(s);
        membrane.push(params.reset(v_s, s));
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), spikes)?,
        LifState {
            membrane: Tensor::new(shape, membrane)?,
        },
    ))
}

/// Runs [`lif_step`] along the leading (time) axis of `inputs`, starting from
/// `initial` or from a resting (all-zero) membrane.
pub fn lif_sequence(inputs: &Tensor, params: &LifParams, initial: Option<&LifState>) -> Result<SpikeTrain> {
    let (steps, frame_shape) = match inputs.shape().split_first() {
        Some((&t, rest)) if t > 0 => (t, rest.to_vec()),
        _ => return Err(Error::contract("lif_sequence", "need at least one timestep")),
    };
    let mut state = match initial {
        Some(s) if s.membrane.shape() != frame_shape.as_slice() => {
            return Err(Error::dim("lif_sequence", s.membrane.shape(), &frame_shape))
        }
        Some(s) => s.clone(),
        None => LifState::zeros(&frame_shape),
    };
    let frame = frame_shape.iter().product::<usize>();
    let mut out = Vec::with_capacity(inputs.numel());
    for t in 0..steps {
        let input = Tensor::new(frame_shape.clone(), inputs.data()[t * frame..(t + 1) * frame].to_vec())?;
        let (s, next) = lif_step(&state, &input, params)?;
        out.extend_from_slice(s.data());
        state = next;
    }
    Ok(SpikeTrain {
        spikes: Tensor::new(inputs.shape().to_vec(), out)?,
    })
}

/// Elementwise surrogate derivative dS/dV_s.
pub fn surrogate_grad(v_s: &Tensor, params: &LifParams) -> Tensor {
    v_s.map(|v| params.surrogate(v))
}
