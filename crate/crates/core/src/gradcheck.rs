//! Central finite-difference checks for analytic gradients.
//!
//! The checker only ever calls the forward pass; it never reads any backward
//! rule, so it is independent of the derivatives it is used to verify.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, element, analytic, numeric)` of the worst relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with an absolute floor so that gradients that are zero in
/// exact arithmetic do not turn rounding noise into huge ratios.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn evaluate<F>(inputs: &[Tensor<f64>], build: &F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).data()[0]
}

/// Checks every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let selection: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_selected(inputs, step, &selection, &build)
}

/// Checks at most `per_input` randomly chosen elements of each input.
pub fn check_gradients_sampled<F>(
    inputs: &[Tensor<f64>],
    step: f64,
    per_input: usize,
    seed: u64,
    build: F,
) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selection: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let k = per_input.min(t.len());
            let mut idx = sample(&mut rng, t.len(), k).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    check_selected(inputs, step, &selection, &build)
}

/// Checks explicitly listed elements of each input.
pub fn check_selected<F>(
    inputs: &[Tensor<f64>],
    step: f64,
    selection: &[Vec<usize>],
    build: &F,
) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    drop(g);

    let mut report = GradReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, elems) in selection.iter().enumerate() {
        for &e in elems {
            let analytic = grads.get(vars[k]).map_or(0.0, |t| t.data()[e]);
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + step;
            let plus = evaluate(&work, build);
            work[k].data_mut()[e] = orig - step;
            let minus = evaluate(&work, build);
            work[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let r = rel_err(analytic, numeric);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
            if r >= report.max_rel_err {
                report.max_rel_err = r;
                report.worst = Some((k, e, analytic, numeric));
            }
        }
    }
    report
}
