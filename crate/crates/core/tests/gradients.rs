//! Central finite-difference checks of every hand-derived gradient. The
//! `check_*` functions are also run by the CLI acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tinyde_core::ensemble::{ModelGrads, ModelSpec, ParamKey, Task, TinyDeModel};
use tinyde_core::layers::{
    ensemblenorm_backward, norm_backward, relu6_backward, relu6_forward, EnsembleNormParams,
    LinearLayer, NormKind, NormParams, Phase,
};
use tinyde_core::training::{
    loss_cross_entropy, loss_gaussian_nll, loss_mse, single_shot_loss, LossKind,
};
use tinyde_core::Tensor;

/// `Err` carries the first failing instance.
pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 100;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    )
    .unwrap()
}

/// Absolute slack for entries whose true value is at the level of the
/// central-difference round-off (about 1e-10 here).
const ATOL: f64 = 1e-8;

/// Error in units of the tolerance band `TOL * max(|a|, |n|) + ATOL`,
/// rescaled so that values up to `TOL` pass.
fn rel_err(a: f64, n: f64) -> f64 {
    TOL * (a - n).abs() / (TOL * a.abs().max(n.abs()) + ATOL)
}

/// Largest relative error between `analytic` and central differences of `f`
/// around `x`.
fn fd_check(x: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut hi = x.clone();
        hi.data_mut()[i] += STEP;
        let mut lo = x.clone();
        lo.data_mut()[i] -= STEP;
        let num = (f(&hi) - f(&lo)) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic.data()[i], num));
    }
    worst
}

/// Projection `<y, r>` turning a tensor output into a scalar.
fn dot(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(2..=8), rng.random_range(2..=8))
}

pub fn check_linear_layer() -> Check {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, fin) = dims(&mut rng);
        let fout = rng.random_range(1..=8);
        let x = randn(&mut rng, &[b, fin]);
        let layer =
            LinearLayer::new(randn(&mut rng, &[fout, fin]), randn(&mut rng, &[fout])).unwrap();
        let r = randn(&mut rng, &[b, fout]);
        let (_, cache) = layer.forward(&x).unwrap();
        let g = layer.backward(&cache, &r).unwrap();

        let e = fd_check(&x, &g.dx, |x| dot(&layer.apply(x).unwrap(), &r));
        ensure!(e <= TOL, "seed {seed} dx {e}");
        let e = fd_check(&layer.weight, g.dw.as_ref().unwrap(), |w| {
            let l = LinearLayer::new(w.clone(), layer.bias.clone()).unwrap();
            dot(&l.apply(&x).unwrap(), &r)
        });
        ensure!(e <= TOL, "seed {seed} dw {e}");
        let e = fd_check(&layer.bias, g.db.as_ref().unwrap(), |bias| {
            let l = LinearLayer::new(layer.weight.clone(), bias.clone()).unwrap();
            dot(&l.apply(&x).unwrap(), &r)
        });
        ensure!(e <= TOL, "seed {seed} db {e}");
    }
    Ok(())
}

pub fn check_relu6_away_from_kinks() -> Check {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, f) = dims(&mut rng);
        let mut x = Tensor::zeros(&[b, f]);
        for v in x.data_mut() {
            *v = loop {
                let c: f64 = rng.random_range(-2.0..8.0);
                if c.abs() > 1e-3 && (c - 6.0).abs() > 1e-3 {
                    break c;
                }
            };
        }
        let r = randn(&mut rng, &[b, f]);
        let (_, cache) = relu6_forward(&x);
        let dx = relu6_backward(&cache, &r).unwrap();
        let e = fd_check(&x, &dx, |x| dot(&relu6_forward(x).0, &r));
        ensure!(e <= TOL, "seed {seed} {e}");
    }
    Ok(())
}

fn random_norm(rng: &mut ChaCha8Rng, f: usize, kind: NormKind) -> NormParams {
    let mut p = NormParams::new(f, kind);
    p.gamma = randn(rng, &[f]);
    p.beta = randn(rng, &[f]);
    p.running_mean = randn(rng, &[f]);
    p.running_var = randn(rng, &[f]).map_fn(|v| 0.5 + v.abs());
    p
}

fn check_norm(kind: NormKind, phase: Phase) -> Check {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, f) = dims(&mut rng);
        let x = randn(&mut rng, &[b, f]);
        let p = random_norm(&mut rng, f, kind);
        let r = randn(&mut rng, &[b, f]);
        let run = |p: &NormParams, x: &Tensor| -> Tensor {
            let mut q = p.clone();
            q.forward(x, phase).unwrap().0
        };
        let (_, cache) = p.clone().forward(&x, phase).unwrap();
        let g = norm_backward(&cache, &r).unwrap();

        let e = fd_check(&x, &g.dx, |x| dot(&run(&p, x), &r));
        ensure!(e <= TOL, "{kind:?} {phase:?} seed {seed} dx {e}");
        let e = fd_check(&p.gamma, &g.dgamma, |gamma| {
            let mut q = p.clone();
            q.gamma = gamma.clone();
            dot(&run(&q, &x), &r)
        });
        ensure!(e <= TOL, "{kind:?} {phase:?} seed {seed} dgamma {e}");
        let e = fd_check(&p.beta, &g.dbeta, |beta| {
            let mut q = p.clone();
            q.beta = beta.clone();
            dot(&run(&q, &x), &r)
        });
        ensure!(e <= TOL, "{kind:?} {phase:?} seed {seed} dbeta {e}");
    }
    Ok(())
}

pub fn check_batch_norm_train() -> Check {
    check_norm(NormKind::Batch, Phase::Train)
}

pub fn check_batch_norm_eval() -> Check {
    check_norm(NormKind::Batch, Phase::Eval)
}

pub fn check_layer_norm() -> Check {
    check_norm(NormKind::Layer, Phase::Train)
}

pub fn check_ensemble_norm() -> Check {
    for (kind, phase) in [
        (NormKind::Batch, Phase::Train),
        (NormKind::Batch, Phase::Eval),
        (NormKind::Layer, Phase::Train),
    ] {
        for seed in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (b, f) = dims(&mut rng);
            let m = rng.random_range(1..=4);
            let members: Vec<NormParams> = (0..m).map(|_| random_norm(&mut rng, f, kind)).collect();
            let p = EnsembleNormParams::from_members(&members).unwrap();
            let x = randn(&mut rng, &[m * b, f]);
            let r = randn(&mut rng, &[m * b, f]);
            let run = |p: &EnsembleNormParams, x: &Tensor| -> Tensor {
                p.clone().forward(x, phase).unwrap().0
            };
            let (_, cache) = p.clone().forward(&x, phase).unwrap();
            let g = ensemblenorm_backward(&cache, &r).unwrap();

            let e = fd_check(&x, &g.dx, |x| dot(&run(&p, x), &r));
            ensure!(e <= TOL, "{kind:?} {phase:?} seed {seed} dx {e}");
            let e = fd_check(&p.gamma, &g.dgamma, |gamma| {
                let mut q = p.clone();
                q.gamma = gamma.clone();
                dot(&run(&q, &x), &r)
            });
            ensure!(e <= TOL, "{kind:?} {phase:?} seed {seed} dgamma {e}");
            let e = fd_check(&p.beta, &g.dbeta, |beta| {
                let mut q = p.clone();
                q.beta = beta.clone();
                dot(&run(&q, &x), &r)
            });
            ensure!(e <= TOL, "{kind:?} {phase:?} seed {seed} dbeta {e}");
        }
    }
    Ok(())
}

pub fn check_losses() -> Check {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, k) = dims(&mut rng);
        let pred = randn(&mut rng, &[b, k]);
        let target = randn(&mut rng, &[b, k]);

        let (_, g) = loss_mse(&pred, &target).unwrap();
        let e = fd_check(&pred, &g, |p| loss_mse(p, &target).unwrap().0);
        ensure!(e <= TOL, "mse seed {seed} {e}");

        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let (_, g) = loss_cross_entropy(&pred, &labels).unwrap();
        let e = fd_check(&pred, &g, |p| loss_cross_entropy(p, &labels).unwrap().0);
        ensure!(e <= TOL, "cross-entropy seed {seed} {e}");

        let log_var = randn(&mut rng, &[b, k]);
        let (_, dm, dl) = loss_gaussian_nll(&pred, &log_var, &target).unwrap();
        let e = fd_check(&pred, &dm, |m| {
            loss_gaussian_nll(m, &log_var, &target).unwrap().0
        });
        ensure!(e <= TOL, "nll mean seed {seed} {e}");
        let e = fd_check(&log_var, &dl, |lv| {
            loss_gaussian_nll(&pred, lv, &target).unwrap().0
        });
        ensure!(e <= TOL, "nll log-var seed {seed} {e}");
    }
    Ok(())
}

fn random_model(rng: &mut ChaCha8Rng, members: usize, task: Task) -> TinyDeModel {
    let depth = rng.random_range(1..=3);
    let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=6)).collect();
    let input = rng.random_range(1..=5);
    let output = rng.random_range(2..=3);
    let mut spec = ModelSpec::mlp(input, &widths, output, members, task);
    for h in &mut spec.hidden {
        h.normalized = rng.random_bool(0.8);
    }
    let mut model = TinyDeModel::new(spec, rng.random()).unwrap();
    for l in 0..model.blocks().len() {
        if model.blocks()[l].norm.is_none() {
            continue;
        }
        for m in 0..members {
            let key = ParamKey::Gamma {
                layer: l,
                member: Some(m),
            };
            let g = model.param_mut(key).unwrap();
            *g = randn(rng, g.shape()).map_fn(|v| 1.0 + 0.3 * v);
        }
    }
    model
}

fn model_loss(
    model: &TinyDeModel,
    x: &Tensor,
    y: &Tensor,
    member: Option<usize>,
    kind: LossKind,
) -> f64 {
    let mut copy = model.clone();
    match member {
        Some(m) => {
            let (out, _) = copy.forward_trace_member(x, m, Phase::Train).unwrap();
            kind.evaluate(&out, y).unwrap().0
        }
        None => {
            let (out, _) = copy.forward_trace_parallel(x, Phase::Train).unwrap();
            single_shot_loss(kind, &out, y, model.members()).unwrap().0
        }
    }
}

fn check_model_grads(
    model: &TinyDeModel,
    grads: &ModelGrads,
    x: &Tensor,
    y: &Tensor,
    member: Option<usize>,
    kind: LossKind,
    seed: u64,
) -> Check {
    for (key, g) in grads.entries() {
        let p = model.param(key).unwrap().clone();
        let e = fd_check(&p, g, |v| {
            let mut m = model.clone();
            *m.param_mut(key).unwrap() = v.clone();
            model_loss(&m, x, y, member, kind)
        });
        ensure!(e <= TOL, "seed {seed} {key:?} {e}");
    }
    // Single-shot gradients refer to the tiled input; sum the member blocks.
    let b = x.dim(0);
    let mut dx = Tensor::zeros(x.shape());
    for blk in grads.dx.data().chunks(x.len()) {
        for (d, g) in dx.data_mut().iter_mut().zip(blk) {
            *d += g;
        }
    }
    ensure!(
        grads.dx.dim(0).is_multiple_of(b),
        "seed {seed}: dx rows not a multiple of the batch"
    );
    let e = fd_check(x, &dx, |x| model_loss(model, x, y, member, kind));
    ensure!(e <= TOL, "seed {seed} dx {e}");
    Ok(())
}

fn targets(rng: &mut ChaCha8Rng, b: usize, k: usize, task: Task) -> Tensor {
    match task {
        Task::Regression => randn(rng, &[b, k]),
        Task::Classification => Tensor::new(
            vec![b, 1],
            (0..b).map(|_| rng.random_range(0..k) as f64).collect(),
        )
        .unwrap(),
    }
}

/// Kinks of ReLU6 make a handful of random draws non-differentiable at the
/// step size; those draws are skipped, and the skip count is bounded.
fn near_kink(model: &TinyDeModel, x: &Tensor, member: Option<usize>) -> bool {
    let mut copy = model.clone();
    let mut h = match member {
        Some(_) => x.clone(),
        None => x.tile_leading(model.members()),
    };
    for (l, block) in model.blocks().iter().enumerate() {
        h = block.linear.apply(&h).unwrap();
        if let Some(bank) = &mut copy.blocks_mut()[l].norm {
            h = match (bank, member) {
                (tinyde_core::ensemble::NormBank::Sequential(v), Some(m)) => {
                    v[m].forward(&h, Phase::Train).unwrap().0
                }
                (tinyde_core::ensemble::NormBank::Parallel(e), None) => {
                    e.forward(&h, Phase::Train).unwrap().0
                }
                _ => unreachable!(),
            };
        }
        if h.data()
            .iter()
            .any(|v| v.abs() < 1e-3 || (v - 6.0).abs() < 1e-3)
        {
            return true;
        }
        h = relu6_forward(&h).0;
    }
    false
}

pub fn check_whole_model_sequential_member() -> Check {
    let mut skipped = 0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let task = if seed % 2 == 0 {
            Task::Regression
        } else {
            Task::Classification
        };
        let members = rng.random_range(1..=3);
        let mut model = random_model(&mut rng, members, task);
        if seed % 3 == 0 {
            model.freeze_shared();
        }
        let b = rng.random_range(2..=5);
        let x = randn(&mut rng, &[b, model.spec().input_dim]);
        let y = targets(&mut rng, b, model.spec().output_dim, task);
        let m = rng.random_range(0..members);
        if near_kink(&model, &x, Some(m)) {
            skipped += 1;
            continue;
        }
        let kind = LossKind::for_task(task);
        let (out, trace) = model
            .clone()
            .forward_trace_member(&x, m, Phase::Train)
            .unwrap();
        let (_, dout) = kind.evaluate(&out, &y).unwrap();
        let grads = model.backward(&trace, &dout).unwrap();
        if model.is_frozen() {
            ensure!(
                grads
                    .blocks
                    .iter()
                    .all(|b| b.dw.is_none() && b.db.is_none()),
                "seed {seed}: frozen layers got gradients"
            );
        }
        check_model_grads(&model, &grads, &x, &y, Some(m), kind, seed)?;
    }
    ensure!(skipped < INSTANCES / 5, "{skipped} kink-adjacent draws");
    Ok(())
}

pub fn check_whole_model_single_shot() -> Check {
    let mut skipped = 0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let task = if seed % 2 == 0 {
            Task::Regression
        } else {
            Task::Classification
        };
        let members = rng.random_range(1..=3);
        let model = random_model(&mut rng, members, task).to_parallel().unwrap();
        let b = rng.random_range(2..=5);
        let x = randn(&mut rng, &[b, model.spec().input_dim]);
        let y = targets(&mut rng, b, model.spec().output_dim, task);
        if near_kink(&model, &x, None) {
            skipped += 1;
            continue;
        }
        let kind = LossKind::for_task(task);
        let (out, trace) = model
            .clone()
            .forward_trace_parallel(&x, Phase::Train)
            .unwrap();
        let (_, dout) = single_shot_loss(kind, &out, &y, members).unwrap();
        let grads = model.backward(&trace, &dout).unwrap();
        check_model_grads(&model, &grads, &x, &y, None, kind, seed)?;
    }
    ensure!(skipped < INSTANCES / 5, "{skipped} kink-adjacent draws");
    Ok(())
}

#[test]
fn linear_layer() {
    check_linear_layer().unwrap();
}

#[test]
fn relu6_away_from_kinks() {
    check_relu6_away_from_kinks().unwrap();
}

#[test]
fn batch_norm_train() {
    check_batch_norm_train().unwrap();
}

#[test]
fn batch_norm_eval() {
    check_batch_norm_eval().unwrap();
}

#[test]
fn layer_norm() {
    check_layer_norm().unwrap();
}

#[test]
fn ensemble_norm() {
    check_ensemble_norm().unwrap();
}

#[test]
fn losses() {
    check_losses().unwrap();
}

#[test]
fn whole_model_sequential_member() {
    check_whole_model_sequential_member().unwrap();
}

#[test]
fn whole_model_single_shot() {
    check_whole_model_single_shot().unwrap();
}
