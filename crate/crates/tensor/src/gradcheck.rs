//! Central finite-difference verification of graph gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Errors above this at two or more step sizes mark a coordinate as sitting on
/// a non-differentiable point.
pub const NON_DIFFERENTIABLE_THRESHOLD: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_err: f64,
    pub worst: Option<String>,
    pub coords_checked: usize,
    /// Coordinates whose error stayed large across step sizes.
    pub flagged: Vec<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.flagged.is_empty()
    }

    fn record(&mut self, label: String, err: f64) {
        self.coords_checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some(label);
        }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compare the analytic gradient of the scalar built by `f` against central
/// differences, for every input tensor and every non-frozen parameter in
/// `store`.
///
/// `f` receives a fresh graph over the (possibly perturbed) store and one
/// gradient-tracked leaf per input.
pub fn grad_check<F>(store: &ParamStore, inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&opts.eps) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("eps {} outside [1e-7, 1e-4]", opts.eps),
        });
    }
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "grad_check",
                msg: "objective must be scalar".into(),
            });
        }
        Ok(v.item())
    };

    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let pgrads = grads.param_grads();

    let mut rng = rand::rngs::StdRng::seed_from_u64(opts.seed);
    let mut pick = |n: usize| -> Vec<usize> {
        match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        }
    };

    let mut report = GradCheckReport::default();
    let eps_ladder = [opts.eps, (opts.eps * 10.0).min(1e-4), (opts.eps * 0.1).max(1e-7)];

    for (ii, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[ii])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for idx in pick(t.numel()) {
            let numeric_at = |eps: f64| -> Result<f64> {
                let mut ins = inputs.to_vec();
                ins[ii].data_mut()[idx] += eps;
                let fp = eval(store, &ins)?;
                ins[ii].data_mut()[idx] -= 2.0 * eps;
                let fm = eval(store, &ins)?;
                Ok((fp - fm) / (2.0 * eps))
            };
            let label = format!("input{ii}[{idx}]");
            check_coord(&mut report, label, analytic.data()[idx], &eps_ladder, numeric_at)?;
        }
    }

    let mut work = store.clone();
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let analytic = pgrads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for idx in pick(p.value.numel()) {
            let orig = p.value.data()[idx];
            let mut numeric_at = |eps: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[idx] = orig + eps;
                let fp = eval(&work, inputs)?;
                work.value_mut(id).data_mut()[idx] = orig - eps;
                let fm = eval(&work, inputs)?;
                work.value_mut(id).data_mut()[idx] = orig;
                Ok((fp - fm) / (2.0 * eps))
            };
            let label = format!("{}[{idx}]", p.name);
            check_coord_mut(&mut report, label, analytic.data()[idx], &eps_ladder, &mut numeric_at)?;
        }
    }
    Ok(report)
}

fn check_coord(
    report: &mut GradCheckReport,
    label: String,
    analytic: f64,
    ladder: &[f64; 3],
    numeric_at: impl Fn(f64) -> Result<f64>,
) -> Result<()> {
    let mut f = numeric_at;
    check_coord_mut(report, label, analytic, ladder, &mut f)
}

fn check_coord_mut(
    report: &mut GradCheckReport,
    label: String,
    analytic: f64,
    ladder: &[f64; 3],
    numeric_at: &mut dyn FnMut(f64) -> Result<f64>,
) -> Result<()> {
    let err = rel_err(analytic, numeric_at(ladder[0])?);
    if err > NON_DIFFERENTIABLE_THRESHOLD {
        let mut bad = 1;
        for &eps in &ladder[1..] {
            if rel_err(analytic, numeric_at(eps)?) > NON_DIFFERENTIABLE_THRESHOLD {
                bad += 1;
            }
        }
        if bad >= 2 {
            report.flagged.push(label.clone());
        }
    }
    report.record(label, err);
    Ok(())
}
