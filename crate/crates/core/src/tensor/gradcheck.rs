//! Central finite-difference checking of graph gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    /// Upper bound on coordinates probed per input; `None` probes all.
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-3,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: usize,
    /// (input, coordinate, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Largest analytic gradient magnitude seen; lets callers assert the
    /// checked path is not trivially zero.
    pub max_abs_grad: f64,
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar built by `f` against central
/// differences for every input tensor.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        probes: 0,
        worst: None,
        max_abs_grad: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get_slice(vars[ii])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let coords: Vec<usize> = match opts.max_probes {
            Some(k) if k < input.len() => sample(&mut rng, input.len(), k).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            probe[ii].data_mut()[j] = orig + opts.step;
            let up = eval(&probe)?;
            probe[ii].data_mut()[j] = orig - opts.step;
            let down = eval(&probe)?;
            probe[ii].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = rel_err(analytic[j], numeric, opts.floor);
            report.probes += 1;
            report.max_abs_grad = report.max_abs_grad.max(analytic[j].abs());
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ii, j, analytic[j], numeric));
            }
        }
    }
    Ok(report)
}
