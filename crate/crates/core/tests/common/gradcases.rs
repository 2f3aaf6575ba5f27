//! Finite-difference cases for every op and for the full loss.

use phaseseg::autodiff::gradcheck::gradient_check;
use phaseseg::autodiff::{AutodiffError, Graph, Tensor, Var};
use phaseseg::mstcn::{forward_graph, ModelConfig, ModelParams};
use phaseseg::training::total_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
pub const OP_TOL: f64 = 1e-6;
pub const E2E_TOL: f64 = 1e-5;
pub const INSTANCES: u64 = 24;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted cross-entropy readout turning a `[C, T]` node into a scalar with
/// non-degenerate gradients everywhere.
struct Readout {
    weights: Vec<f64>,
    labels: Vec<usize>,
}

impl Readout {
    fn new(rng: &mut ChaCha8Rng, c: usize, t: usize) -> Self {
        Self {
            weights: (0..c * t).map(|_| rng.random_range(0.5..1.5)).collect(),
            labels: (0..t).map(|_| rng.random_range(0..c)).collect(),
        }
    }

    fn apply(&self, g: &mut Graph<f64>, x: Var) -> Result<Var, AutodiffError> {
        let m = g.mask(x, self.weights.clone())?;
        g.cross_entropy(m, &self.labels)
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(2..5), rng.random_range(2..10))
}

/// Random log-probability-like values whose adjacent differences stay away
/// from the clamp, with some pairs clamped.
fn smoothing_input(rng: &mut ChaCha8Rng, c: usize, t: usize, tau: f64) -> Tensor<f64> {
    loop {
        let x = rand_tensor(rng, &[c, t], 4.0);
        let ok = x
            .data()
            .chunks_exact(t)
            .all(|row| row.windows(2).all(|w| ((w[1] - w[0]).abs() - tau).abs() > 1e-3));
        if ok {
            return x;
        }
    }
}

fn tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        hidden_maps: rng.random_range(2..5),
        pg_layers: rng.random_range(1..4),
        refine_stages: rng.random_range(1..3),
        refine_layers: rng.random_range(1..4),
        ..ModelConfig::standard(rng.random_range(2..4), rng.random_range(1..5))
    }
}

fn conv1d(rng: &mut ChaCha8Rng) -> f64 {
    let c_in = rng.random_range(1..4);
    let c_out = rng.random_range(1..4);
    let t = rng.random_range(1..12);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let dil = rng.random_range(1..6);
    let x = rand_tensor(rng, &[c_in, t], 1.0);
    let w = rand_tensor(rng, &[c_out, c_in, k], 1.0);
    let b = rand_tensor(rng, &[c_out], 1.0);
    let ro = Readout::new(rng, c_out, t);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.conv1d(v[0], v[1], v[2], dil)?;
        ro.apply(g, y)
    };
    gradient_check(&[x, w, b], H, f, f).unwrap().max_error()
}

fn relu(rng: &mut ChaCha8Rng) -> f64 {
    let (c, t) = dims(rng);
    let x = away_from_zero(rng, &[c, t]);
    let ro = Readout::new(rng, c, t);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.relu(v[0]);
        ro.apply(g, y)
    };
    gradient_check(&[x], H, f, f).unwrap().max_error()
}

fn add_and_shared_input(rng: &mut ChaCha8Rng) -> f64 {
    let (c, t) = dims(rng);
    let a = rand_tensor(rng, &[c, t], 1.0);
    let b = rand_tensor(rng, &[c, t], 1.0);
    let ro = Readout::new(rng, c, t);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.add(v[0], v[1])?;
        let s = g.add(s, v[0])?;
        ro.apply(g, s)
    };
    gradient_check(&[a, b], H, f, f).unwrap().max_error()
}

fn concat_channels(rng: &mut ChaCha8Rng) -> f64 {
    let (c, t) = dims(rng);
    let c2 = rng.random_range(1..4);
    let a = rand_tensor(rng, &[c, t], 1.0);
    let b = rand_tensor(rng, &[c2, t], 1.0);
    let ro = Readout::new(rng, c + c2, t);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.concat_channels(v[0], v[1])?;
        ro.apply(g, y)
    };
    gradient_check(&[a, b], H, f, f).unwrap().max_error()
}

fn softmax(rng: &mut ChaCha8Rng) -> f64 {
    let (c, t) = dims(rng);
    let x = rand_tensor(rng, &[c, t], 3.0);
    let ro = Readout::new(rng, c, t);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.softmax(v[0])?;
        ro.apply(g, y)
    };
    gradient_check(&[x], H, f, f).unwrap().max_error()
}

fn log_softmax(rng: &mut ChaCha8Rng) -> f64 {
    let (c, t) = dims(rng);
    let x = rand_tensor(rng, &[c, t], 3.0);
    let ro = Readout::new(rng, c, t);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.log_softmax(v[0])?;
        ro.apply(g, y)
    };
    gradient_check(&[x], H, f, f).unwrap().max_error()
}

fn mask_and_scale(rng: &mut ChaCha8Rng) -> f64 {
    let (c, t) = dims(rng);
    let x = rand_tensor(rng, &[c, t], 1.0);
    let mask: Vec<f64> = (0..c * t).map(|_| if rng.random_bool(0.3) { 0.0 } else { 1.0 / 0.7 }).collect();
    let factor = rng.random_range(-2.0..2.0);
    let ro = Readout::new(rng, c, t);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.mask(v[0], mask.clone())?;
        let y = g.scale(y, factor);
        ro.apply(g, y)
    };
    gradient_check(&[x], H, f, f).unwrap().max_error()
}

fn sum_of_scalars(rng: &mut ChaCha8Rng) -> f64 {
    let (c, t) = dims(rng);
    let a = rand_tensor(rng, &[c, t], 2.0);
    let b = rand_tensor(rng, &[c, t], 2.0);
    let la: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
    let lb: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let x = g.cross_entropy(v[0], &la)?;
        let y = g.cross_entropy(v[1], &lb)?;
        let y2 = g.scale(y, 0.5);
        g.sum(&[x, y2, x])
    };
    gradient_check(&[a, b], H, f, f).unwrap().max_error()
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let (c, t) = dims(rng);
    let x = rand_tensor(rng, &[c, t], 3.0);
    let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
    let f = |g: &mut Graph<f64>, v: &[Var]| g.cross_entropy(v[0], &labels);
    gradient_check(&[x], H, f, f).unwrap().max_error()
}

fn smoothing_against_reference(rng: &mut ChaCha8Rng) -> f64 {
    let (c, t) = dims(rng);
    let tau = 4.0;
    let x = smoothing_input(rng, c, t, tau);
    let reference = loop {
        let r = rand_tensor(rng, &[c, t], 4.0);
        let far = (0..c).all(|k| {
            (1..t).all(|f| ((x.at2(k, f) - r.at2(k, f - 1)).abs() - tau).abs() > 1e-3)
        });
        if far {
            break r;
        }
    };
    let f = |g: &mut Graph<f64>, v: &[Var]| g.smoothing_mse_against(v[0], reference.clone(), tau);
    gradient_check(&[x], H, f, f).unwrap().max_error()
}

fn smoothing_detached_previous_frame(rng: &mut ChaCha8Rng) -> f64 {
    let (c, t) = dims(rng);
    let tau = 4.0;
    let x = smoothing_input(rng, c, t, tau);
    let frozen = x.clone();
    gradient_check(
        &[x],
        H,
        |g, v| g.smoothing_mse(v[0], tau),
        |g, v| g.smoothing_mse_against(v[0], frozen.clone(), tau),
    )
    .unwrap()
    .max_error()
}

pub type OpCase = fn(&mut ChaCha8Rng) -> f64;

/// Every differentiable op, each wrapped in a scalar readout.
pub const OPS: [(&str, OpCase); 11] = [
    ("conv1d", conv1d),
    ("relu", relu),
    ("add", add_and_shared_input),
    ("concat_channels", concat_channels),
    ("softmax", softmax),
    ("log_softmax", log_softmax),
    ("mask+scale", mask_and_scale),
    ("sum", sum_of_scalars),
    ("cross_entropy", cross_entropy),
    ("smoothing_mse_against", smoothing_against_reference),
    ("smoothing_mse", smoothing_detached_previous_frame),
];

/// Largest relative error of `case` over `INSTANCES` seeded instances, with
/// the seed that produced it.
pub fn worst_op_error(case: OpCase) -> (f64, u64) {
    (0..INSTANCES)
        .map(|seed| (case(&mut ChaCha8Rng::seed_from_u64(seed)), seed))
        .fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
}

/// Multi-stage loss of a random tiny model against central differences of
/// the surrogate whose previous frames are frozen at the unperturbed point.
pub fn end_to_end_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let cfg = tiny_config(&mut rng);
    let t = rng.random_range(4..=12);
    let params = ModelParams::<f64>::init(&cfg, seed).unwrap();
    let feats = rand_tensor(&mut rng, &[cfg.feat_dim, t], 1.5);
    let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    let names = params.names().to_vec();

    // Stage log-probabilities at the unperturbed point, used as the frozen
    // previous frames of the surrogate.
    let frozen: Vec<Tensor<f64>> = {
        let mut g = Graph::new();
        let vars = params.register(&mut g, false);
        let x = g.constant(feats.clone());
        let stages = forward_graph(&mut g, &cfg, &names, &vars, x, None).unwrap();
        stages
            .iter()
            .map(|&s| {
                let lp = g.log_softmax(s).unwrap();
                g.value(lp).clone()
            })
            .collect()
    };

    let analytic = |g: &mut Graph<f64>, v: &[Var]| {
        let x = g.constant(feats.clone());
        let stages = forward_graph(g, &cfg, &names, v, x, None).map_err(|e| match e {
            phaseseg::mstcn::ModelError::Autodiff(a) => a,
            other => panic!("{other}"),
        })?;
        total_loss(g, &stages, &labels, cfg.smoothing_weight, cfg.clamp_tau)
    };
    let surrogate = |g: &mut Graph<f64>, v: &[Var]| {
        let x = g.constant(feats.clone());
        let stages = forward_graph(g, &cfg, &names, v, x, None).unwrap();
        let mut terms = Vec::new();
        for (&s, f) in stages.iter().zip(&frozen) {
            terms.push(g.cross_entropy(s, &labels)?);
            let lp = g.log_softmax(s)?;
            let sm = g.smoothing_mse_against(lp, f.clone(), cfg.clamp_tau)?;
            terms.push(g.scale(sm, cfg.smoothing_weight));
        }
        g.sum(&terms)
    };
    gradient_check(params.tensors(), H, analytic, surrogate).unwrap().max_error()
}

/// With the smoothing term off, plain central differences apply.
pub fn end_to_end_plain_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = ModelConfig {
        smoothing_weight: 0.0,
        ..tiny_config(&mut rng)
    };
    let t = 9;
    let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
    let feats = rand_tensor(&mut rng, &[cfg.feat_dim, t], 1.5);
    let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    let names = params.names().to_vec();
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let x = g.constant(feats.clone());
        let stages = forward_graph(g, &cfg, &names, v, x, None).unwrap();
        total_loss(g, &stages, &labels, 0.0, cfg.clamp_tau)
    };
    gradient_check(params.tensors(), H, f, f).unwrap().max_error()
}
