#![allow(dead_code)]

use nowcast_core::losses::ClassScheme;
use nowcast_core::network::{Mode, NetworkParams};
use nowcast_core::tensor::{Graph, Tensor};
use nowcast_core::train::{loss_on, LossKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub struct LossProblem {
    pub input: Tensor,
    pub target: Tensor,
    pub kind: LossKind,
    pub scheme: ClassScheme,
    pub seed: u64,
}

impl LossProblem {
    pub fn loss(&self, params: &NetworkParams) -> f64 {
        let mut g = Graph::new();
        let f = params.forward_on(&mut g, &self.input, Mode::Train { seed: self.seed }).unwrap();
        let (l, _) = loss_on(&mut g, f.output, &self.target, None, self.kind, &self.scheme, 2.0).unwrap();
        g.value(l).item()
    }
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_name: String,
    pub failures: usize,
}

/// Central-difference check of every learnable scalar. Relative error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn check_network_gradients(params: &NetworkParams, problem: &LossProblem, h: f64, floor: f64, tol: f64) -> GradReport {
    let mut g = Graph::new();
    let f = params
        .forward_on(&mut g, &problem.input, Mode::Train { seed: problem.seed })
        .unwrap();
    let (l, _) = loss_on(&mut g, f.output, &problem.target, None, problem.kind, &problem.scheme, 2.0).unwrap();
    let grads = g.backward(l).unwrap();
    let mut report = GradReport::default();
    let mut work = params.clone();
    for (name, t) in &params.params {
        let analytic = grads.get_or_zeros(f.vars[name], t);
        for k in 0..t.len() {
            let orig = t.data()[k];
            work.params.get_mut(name).unwrap().data_mut()[k] = orig + h;
            let lp = problem.loss(&work);
            work.params.get_mut(name).unwrap().data_mut()[k] = orig - h;
            let lm = problem.loss(&work);
            work.params.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err >= tol {
                report.failures += 1;
            }
            if err > report.worst {
                report.worst = err;
                report.worst_name = format!("{name}[{k}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    report
}

struct Edge {
    to: usize,
    cap: f64,
    cost: f64,
}

/// Minimum-cost transport of `supply` onto `demand` by successive shortest
/// augmenting paths (Bellman–Ford) on the residual network.
pub fn min_cost_transport(supply: &[f64], demand: &[f64], cost: impl Fn(usize, usize) -> f64) -> f64 {
    let (n, m) = (supply.len(), demand.len());
    let (source, sink) = (n + m, n + m + 1);
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj = vec![Vec::new(); n + m + 2];
    let mut add = |adj: &mut Vec<Vec<usize>>, a: usize, b: usize, cap: f64, cost: f64| {
        adj[a].push(edges.len());
        edges.push(Edge { to: b, cap, cost });
        adj[b].push(edges.len());
        edges.push(Edge {
            to: a,
            cap: 0.0,
            cost: -cost,
        });
    };
    for (i, &s) in supply.iter().enumerate() {
        add(&mut adj, source, i, s, 0.0);
        for j in 0..m {
            add(&mut adj, i, n + j, f64::INFINITY, cost(i, j));
        }
    }
    for (j, &d) in demand.iter().enumerate() {
        add(&mut adj, n + j, sink, d, 0.0);
    }
    let eps = 1e-15;
    let mut total = 0.0;
    loop {
        let mut dist = vec![f64::INFINITY; n + m + 2];
        let mut via = vec![usize::MAX; n + m + 2];
        dist[source] = 0.0;
        for _ in 0..n + m + 2 {
            let mut changed = false;
            for u in 0..n + m + 2 {
                if dist[u].is_infinite() {
                    continue;
                }
                for &e in &adj[u] {
                    let ed = &edges[e];
                    if ed.cap > eps && dist[u] + ed.cost < dist[ed.to] - 1e-15 {
                        dist[ed.to] = dist[u] + ed.cost;
                        via[ed.to] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[sink].is_infinite() {
            return total;
        }
        let mut push = f64::INFINITY;
        let mut v = sink;
        while v != source {
            let e = via[v];
            push = push.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = sink;
        while v != source {
            let e = via[v];
            edges[e].cap -= push;
            edges[e ^ 1].cap += push;
            v = edges[e ^ 1].to;
        }
        total += push * dist[sink];
    }
}

/// Random probability vector with some exact zeros.
pub fn random_distribution(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut p: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    if p.iter().all(|&x| x == 0.0) {
        p[0] = 1.0;
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}
