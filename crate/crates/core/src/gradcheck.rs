//! Finite-difference verification of tape gradients.

use rand::Rng;

use crate::error::Result;
use crate::lif::SpikeMode;
use crate::rng::rng_from_seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which parameter elements get a finite-difference probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probes {
    All,
    /// `count` elements drawn uniformly over all parameters.
    Random {
        count: usize,
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    pub probes: Probes,
    pub spike_mode: SpikeMode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            probes: Probes::All,
            spike_mode: SpikeMode::Binary,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub param: usize,
    pub probes: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// Parameters whose worst probe exceeds the tolerance.
    pub fn flagged(&self) -> Vec<usize> {
        self.params
            .iter()
            .filter(|p| p.max_rel_error > self.tolerance)
            .map(|p| p.param)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.flagged().is_empty()
    }
}

/// Compares the tape gradient of a scalar function of `params` against
/// central finite differences. `f` receives one leaf per parameter.
pub fn grad_check<F>(params: &[Tensor], opts: GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_spike_mode(opts.spike_mode);
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let probes: Vec<(usize, usize)> = match opts.probes {
        Probes::All => params
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
            .collect(),
        Probes::Random { count, seed } => {
            let total: usize = params.iter().map(Tensor::numel).sum();
            let mut rng = rng_from_seed(seed);
            (0..count)
                .map(|_| {
                    let mut flat = rng.random_range(0..total);
                    let mut i = 0;
                    while flat >= params[i].numel() {
                        flat -= params[i].numel();
                        i += 1;
                    }
                    (i, flat)
                })
                .collect()
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut eval = |work: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::with_spike_mode(opts.spike_mode);
        let vars: Vec<Var> = work.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report: Vec<ParamCheck> = (0..params.len())
        .map(|param| ParamCheck {
            param,
            probes: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        })
        .collect();
    for (i, j) in probes {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + opts.step;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - opts.step;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[i][j];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
        let r = &mut report[i];
        r.probes += 1;
        r.max_abs_error = r.max_abs_error.max(abs);
        r.max_rel_error = r.max_rel_error.max(rel);
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        params: report,
    })
}
