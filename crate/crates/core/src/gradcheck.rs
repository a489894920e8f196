//! Finite-difference gradient checking over named parameter tensors.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::Params;

/// Result for one parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over the checked entries.
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f32,
    /// Entries checked per tensor; smaller tensors are checked exhaustively.
    pub max_entries: usize,
    /// Below this gradient norm a tensor counts as inactive and its error as 0.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_entries: 48,
            abs_floor: 1e-9,
            seed: 0,
        }
    }
}

/// Compares `analytic` (same layout as `params`) against central differences
/// of `loss` around `params`.
pub fn check<P, F>(params: &P, analytic: &P, opts: &GradCheckOptions, mut loss: F) -> Vec<TensorCheck>
where
    P: Params + Clone,
    F: FnMut(&P) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let grads = analytic.tensors();
    let shapes: Vec<(String, usize)> =
        params.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();
    let mut work = params.clone();
    let mut out = Vec::with_capacity(shapes.len());
    for (ti, (name, len)) in shapes.iter().enumerate() {
        let idx: Vec<usize> = if *len <= opts.max_entries {
            (0..*len).collect()
        } else {
            let mut v = sample(&mut rng, *len, opts.max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let mut diff = 0.0f64;
        let mut na = 0.0f64;
        let mut nn = 0.0f64;
        for &i in &idx {
            let orig = work.tensors()[ti].data[i];
            let hi = orig + opts.eps;
            let lo = orig - opts.eps;
            work.tensors_mut()[ti].data[i] = hi;
            let fp = loss(&work);
            work.tensors_mut()[ti].data[i] = lo;
            let fm = loss(&work);
            work.tensors_mut()[ti].data[i] = orig;
            let num = (fp - fm) / (hi as f64 - lo as f64);
            let a = grads[ti].data[i] as f64;
            diff += (a - num).powi(2);
            na += a * a;
            nn += num * num;
        }
        let (na, nn) = (na.sqrt(), nn.sqrt());
        let denom = na.max(nn);
        out.push(TensorCheck {
            name: name.clone(),
            checked: idx.len(),
            rel_err: if denom < opts.abs_floor { 0.0 } else { diff.sqrt() / denom },
            analytic_norm: na,
            numeric_norm: nn,
        });
    }
    out
}

/// Largest relative error in a report.
pub fn max_rel_err(report: &[TensorCheck]) -> f64 {
    report.iter().map(|t| t.rel_err).fold(0.0, f64::max)
}
