#![allow(dead_code)]

use nowcast_tensor::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Evaluates `build` on fresh parameter leaves and returns the scalar loss.
fn loss_of<F>(build: &F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars).expect("forward");
    g.value(loss).item()
}

/// Compares tape gradients with central differences of step `h` and
/// returns the worst relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error<F>(params: &[Tensor], build: F, h: f64, floor: f64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars).expect("forward");
    let grads = g.backward(loss).expect("backward");
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], p);
        for k in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[k] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[k] -= h;
            let numeric = (loss_of(&build, &plus) - loss_of(&build, &minus)) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}
