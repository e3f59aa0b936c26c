use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Updates each tensor in place from its `grad` field. Tensors without a
    /// gradient are left alone. Fails without touching anything if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        self.step_named(params, None)
    }

    pub fn step_store(&mut self, store: &mut ParamStore) -> Result<()> {
        let names = store.names().to_vec();
        self.step_named(store.tensors_mut(), Some(&names))
    }

    fn step_named(&mut self, params: &mut [Tensor], names: Option<&[String]>) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = p.grad() {
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    let name = names.map_or_else(|| format!("#{i}"), |n| n[i].clone());
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter {name} at element {j} is {}",
                        g[j]
                    )));
                }
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            if v.len() != g.len() {
                return Err(Error::dim("sgd_step", p.shape(), &[v.len()]));
            }
            let (lr, mu) = (self.learning_rate, self.momentum);
            for ((w, vel), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vel = mu * *vel + gv;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm` and
/// returns the norm before clipping. Non-finite norms are left for
/// [`Sgd::step`] to reject.
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(Tensor::grad)
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad() {
                let g = g.iter().map(|v| v * scale).collect();
                p.set_grad(g).expect("same length");
            }
        }
    }
    norm
}
