//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::Params;

/// Coordinates checked per tensor before switching to a random subsample.
pub const DEFAULT_MAX_COORDS: usize = 200;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients against central differences of `loss`.
///
/// `backward` must compute the same loss and accumulate its gradients into
/// the parameters of the model it is given (grads are zeroed beforehand).
/// Tensors larger than `max_coords` are checked on a seeded random subsample
/// of `max_coords` coordinates.
pub fn grad_check<M, L, B>(model: &M, loss: L, backward: B, step: f64, max_coords: usize, seed: u64) -> GradCheckReport
where
    M: Params + Clone,
    L: Fn(&M) -> f64,
    B: FnOnce(&mut M),
{
    let mut analytic_model = model.clone();
    analytic_model.zero_grad();
    backward(&mut analytic_model);
    let analytic = analytic_model.grads();
    let names = analytic_model.param_names();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = model.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), coords_checked: 0 };
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = if n > max_coords {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..n).collect()
        };
        for c in coords {
            let plus = eval_shifted(&mut work, &loss, pi, c, step);
            let minus = eval_shifted(&mut work, &loss, pi, c, -step);
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.as_slice().map_or_else(|| grad.iter().nth(c).copied().unwrap(), |s| s[c]);
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = format!("{}[{c}]", names[pi]);
            }
        }
    }
    report
}

fn eval_shifted<M: Params, L: Fn(&M) -> f64>(
    model: &mut M,
    loss: &L,
    param_index: usize,
    coord: usize,
    delta: f64,
) -> f64 {
    let mut original = 0.0;
    shift(model, param_index, coord, |v| {
        original = *v;
        *v += delta;
    });
    let out = loss(model);
    shift(model, param_index, coord, |v| *v = original);
    out
}

fn shift<M: Params>(model: &mut M, param_index: usize, coord: usize, mut f: impl FnMut(&mut f64)) {
    let mut i = 0;
    model.visit_mut("", &mut |_, p| {
        if i == param_index {
            let v = p.value.iter_mut().nth(coord).expect("coordinate in range");
            f(v);
        }
        i += 1;
    });
}
