//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Perturbation half-width.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Coordinates sampled per parameter (all of them if the parameter is smaller).
    pub per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-6,
            per_param: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Zeroes the gradients, backpropagates `loss` once and compares every
/// parameter against central differences.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = loss(store, &mut g)?;
    g.backward(out, store)?;
    compare_gradients(store, loss, cfg)
}

/// Compares the gradients currently held in `store` against central
/// differences of `loss`, leaving parameter values as they were.
pub fn compare_gradients<F>(
    store: &mut ParamStore,
    loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(s, &mut g)?;
        g.value(v).item()
    };
    let base = eval(store)?;
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Determinism(format!(
            "two evaluations at the same point gave {base:e} and {again:e}"
        )));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        tol: cfg.tol,
        per_param: Vec::with_capacity(store.len()),
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.numel();
        let coords: Vec<usize> = if n <= cfg.per_param {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (id.index() as u64).wrapping_mul(0x9E37_79B9));
            let mut picked = sample(&mut rng, n, cfg.per_param).into_vec();
            picked.sort_unstable();
            picked
        };
        let mut pc = ParamCheck {
            name: store.get(id).id.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: coords.first().copied().unwrap_or(0),
        };
        for &c in &coords {
            let orig = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + cfg.h;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[c] = orig - cfg.h;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.h);
            let analytic = store.get(id).grad.data()[c];
            let err = relative_error(analytic, numeric);
            if err > pc.max_rel_err || !err.is_finite() {
                pc.max_rel_err = err;
                pc.worst_index = c;
            }
        }
        report.checked += pc.checked;
        if pc.max_rel_err > report.max_rel_err || report.worst_param.is_empty() {
            report.max_rel_err = pc.max_rel_err;
            report.worst_param = pc.name.clone();
            report.worst_index = pc.worst_index;
        }
        report.per_param.push(pc);
    }
    Ok(report)
}
