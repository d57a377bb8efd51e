//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    pub eps: f64,
    /// Coordinates probed per input tensor; 0 probes all of them.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { eps: 1e-6, max_coords: 0, seed: 0 }
    }
}

/// Per-input comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct CheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over probed coordinates.
    pub rel_errors: Vec<f64>,
    pub probed: Vec<usize>,
}

impl CheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Numeric gradient of `f` with respect to selected coordinates of `inputs[which]`.
pub fn numerical_grad<F>(f: &F, inputs: &[Tensor], which: usize, coords: &[usize], eps: f64) -> Vec<f64>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    coords
        .iter()
        .map(|&c| {
            let orig = *work[which].as_slice_mut().expect("contiguous input").get(c).expect("coordinate");
            work[which].as_slice_mut().unwrap()[c] = orig + eps;
            let plus = f(&work);
            work[which].as_slice_mut().unwrap()[c] = orig - eps;
            let minus = f(&work);
            work[which].as_slice_mut().unwrap()[c] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// Compares graph gradients of `build` against central differences of `value`.
///
/// `build` receives the inputs bound as trainable leaves and returns a scalar
/// node. `value` evaluates the same function without the graph; passing an
/// independent implementation makes the check a two-route comparison.
pub fn check_gradients<B, V>(inputs: &[Tensor], build: B, value: V, cfg: CheckConfig) -> CheckReport
where
    B: Fn(&mut Graph, &[NodeId]) -> NodeId,
    V: Fn(&[Tensor]) -> f64,
{
    let inputs: Vec<Tensor> = inputs.iter().map(|t| t.as_standard_layout().into_owned()).collect();
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids);
    let grads = g.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rel_errors = Vec::new();
    let mut probed = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.len();
        let coords: Vec<usize> = if cfg.max_coords == 0 || cfg.max_coords >= n {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let analytic_full = grads.get(ids[i]).map(|g| g.as_standard_layout().into_owned());
        let analytic: Vec<f64> = coords
            .iter()
            .map(|&c| analytic_full.as_ref().map_or(0.0, |g| g.as_slice().unwrap()[c]))
            .collect();
        let numeric = numerical_grad(&value, &inputs, i, &coords, cfg.eps);
        rel_errors.push(rel_error(&analytic, &numeric));
        probed.push(coords.len());
    }
    CheckReport { rel_errors, probed }
}

/// [`check_gradients`] with the value route taken from the same graph builder.
pub fn check_graph<B>(inputs: &[Tensor], build: B, cfg: CheckConfig) -> CheckReport
where
    B: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let value = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids);
        g.item(out)
    };
    check_gradients(inputs, &build, value, cfg)
}
