use super::*;
use crate::deq::MapKind;
use crate::fixpoint::Engine;
use crate::linops::make_blur;
use crate::regnet::{ConvLayer, NetSpec, RegNet};
use crate::tensor::Shape;

fn shape() -> Shape {
    Shape::new(1, 8, 8)
}

fn tiny_net(seed: u64, scale: f64) -> RegNet {
    let mut net = RegNet::new(NetSpec { channels: 1, hidden: 3, depth: 2, kernel: 3, residual: true, spectral_size: 8 }, seed).unwrap();
    let mut p = net.params();
    let mut rng = SeededRng::new(seed ^ 7);
    for v in p.data.iter_mut() {
        *v = scale * (*v + 0.1 * rng.gaussian());
    }
    net.set_params(&p).unwrap();
    net
}

fn images(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| Tensor::from_fn(shape(), |_, y, x| 0.5 + 0.3 * ((x as f64 * 0.7 + y as f64 * 0.3) + rng.uniform()).sin()).unwrap())
        .collect()
}

fn prox_setup(seed: u64) -> (IterationMap, Vec<Sample>) {
    // lambda_min(A^T A) is about 0.1 for this blur, so with a mild network
    // all three maps contract.
    let op = make_blur(3, 0.25, shape()).unwrap();
    let map = IterationMap::new(MapKind::DeProx, op.clone(), tiny_net(seed, 0.25), 1.0).unwrap();
    let samples = make_samples(&op, &images(4, seed + 1), 0.01, seed + 2, InitPolicy::Adjoint).unwrap();
    (map, samples)
}

fn tight() -> SolverConfig {
    SolverConfig { tol: 1e-12, max_iter: 2000, ..SolverConfig::forward() }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn mse_loss_examples() {
    let x = Tensor::new(Shape::new(1, 1, 1), vec![3.0]).unwrap();
    let s = Tensor::new(Shape::new(1, 1, 1), vec![1.0]).unwrap();
    let (v, g) = mse_loss(&x, &s).unwrap();
    assert_eq!(v, 2.0);
    assert_eq!(g.data(), &[2.0]);
    let (v, g) = mse_loss(&x, &x).unwrap();
    assert_eq!(v, 0.0);
    assert!(g.data().iter().all(|&c| c == 0.0));
    let a = images(1, 3).remove(0);
    let b = images(1, 4).remove(0);
    let mut oracle = 0.0;
    for i in 0..a.len() {
        oracle += 0.5 * (a.data()[i] - b.data()[i]).powi(2);
    }
    assert!((mse_loss(&a, &b).unwrap().0 - oracle).abs() < 1e-12);
    assert!(mse_loss(&a, &Tensor::zeros(Shape::new(1, 4, 4))).is_err());
}

/// `f(x; y) = x + (y - x) - (w x + b) = -w x + y - b` on a scalar, so with
/// `w = -theta` this is `theta x + y`.
#[test]
fn scalar_implicit_gradient_closed_form() {
    let s = Shape::new(1, 1, 1);
    let op = LinearOperator::identity(s);
    let layer = ConvLayer::new(1, 1, 1, vec![-0.5], vec![0.0]).unwrap();
    let net = RegNet::from_layers(vec![layer], false, 1, 0).unwrap();
    let map = IterationMap::new(MapKind::DeGrad, op, net, 1.0).unwrap();
    let y = Tensor::new(s, vec![1.0]).unwrap();
    let x_star = Tensor::new(s, vec![1.0]).unwrap();
    let fwd = solve(|x| map.bind(&y)?.apply(x), &[0.0], &tight()).unwrap();
    assert!((fwd.point[0] - 2.0).abs() < 1e-10);
    let g = implicit_gradient(&map, &y, &x_star, &fwd.point, &tight()).unwrap();
    // dl/dtheta = x (1 - theta)^-1 (x - x_star) = 4, and w = -theta.
    assert!((g.grad.data[0] + 4.0).abs() < 1e-8, "{:?}", g.grad.data);
    assert!(g.backward_converged);
    // Zero residual gives a zero gradient.
    let g0 = implicit_gradient(&map, &y, &Tensor::new(s, vec![fwd.point[0]]).unwrap(), &fwd.point, &tight()).unwrap();
    assert!(g0.grad.data.iter().all(|&v| v == 0.0));
}

fn loss_at_equilibrium(map: &IterationMap, sample: &Sample) -> f64 {
    let fwd = forward_solve(map, sample, &tight()).unwrap();
    assert!(fwd.converged);
    mse_loss(&map.image_of(&fwd.point).unwrap(), &sample.x_star).unwrap().0
}

#[test]
fn implicit_gradient_matches_finite_differences_and_backprop() {
    for kind in [MapKind::DeProx, MapKind::DeGrad, MapKind::DeAdmm] {
        let (mut map, samples) = prox_setup(10);
        let step = match kind {
            MapKind::DeGrad => 0.5,
            MapKind::DeProx => 1.0,
            MapKind::DeAdmm => 2.0,
        };
        map = IterationMap::new(kind, map.operator().clone(), map.net().clone(), step).unwrap();
        if kind == MapKind::DeGrad {
            // Gradient role: R models a small gradient field.
            map.net_mut().set_residual(false);
        }
        let sample = &samples[0];
        let fwd = forward_solve(&map, sample, &tight()).unwrap();
        assert!(fwd.converged, "{kind:?} {:?}", &fwd.residual_history[fwd.iterations.saturating_sub(6)..]);
        let imp = implicit_gradient(&map, &sample.y, &sample.x_star, &fwd.point, &tight()).unwrap();
        let unr = unrolled_gradient(&map, sample, 200).unwrap();
        let p0 = map.net().params();
        let mut rng = SeededRng::new(11);
        let mut probe = map.clone();
        let h = 1e-6;
        for _ in 0..20 {
            let i = rng.index(0, p0.len());
            let mut eval = |d: f64| {
                let mut p = p0.clone();
                p.data[i] += d;
                probe.net_mut().set_params(&p).unwrap();
                loss_at_equilibrium(&probe, sample)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let (a, b) = (imp.grad.data[i], unr.grad.data[i]);
            let scale = imp.grad.norm() * 1e-3;
            assert!(rel_err(a, fd) < 1e-3 || (a - fd).abs() < scale * 1e-2, "{kind:?} p{i}: implicit {a} fd {fd}");
            assert!(rel_err(a, b) < 1e-3 || (a - b).abs() < scale * 1e-2, "{kind:?} p{i}: implicit {a} unrolled {b}");
        }
    }
}

#[test]
fn one_step_unrolled_gradient_matches_finite_differences() {
    let (map, samples) = prox_setup(20);
    let sample = &samples[1];
    let g = unrolled_gradient(&map, sample, 1).unwrap();
    let p0 = map.net().params();
    let mut probe = map.clone();
    let h = 1e-6;
    let mut rng = SeededRng::new(21);
    for _ in 0..10 {
        let i = rng.index(0, p0.len());
        let mut eval = |d: f64| {
            let mut p = p0.clone();
            p.data[i] += d;
            probe.net_mut().set_params(&p).unwrap();
            let x1 = run_unrolled(&probe, &sample.y, &sample.x0, 1).unwrap();
            mse_loss(&x1, &sample.x_star).unwrap().0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(rel_err(g.grad.data[i], fd) < 1e-3 || (g.grad.data[i] - fd).abs() < 1e-9, "p{i}: {} vs {fd}", g.grad.data[i]);
    }
}

#[test]
fn unrolled_storage_grows_with_depth() {
    let (map, samples) = prox_setup(30);
    let a = unrolled_gradient(&map, &samples[0], 10).unwrap().stored_values;
    let b = unrolled_gradient(&map, &samples[0], 40).unwrap().stored_values;
    assert_eq!(b, 4 * a);
}

#[test]
fn zero_epochs_returns_input() {
    let (mut map, samples) = prox_setup(40);
    let before = map.net().clone();
    let log = train_deq(&mut map, &samples, &samples, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(map.net(), &before);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (mut map, samples) = prox_setup(50);
    let before = map.net().params();
    let cfg = TrainConfig { epochs: 2, lr: 0.0, batch: 2, select_best: false, ..Default::default() };
    train_deq(&mut map, &samples, &samples, &cfg).unwrap();
    assert_eq!(map.net().params(), before);
    train_unrolled(&mut map, 3, &samples, &samples, &cfg).unwrap();
    assert_eq!(map.net().params(), before);
}

#[test]
fn training_is_deterministic_across_exec_modes() {
    let cfg = TrainConfig { epochs: 2, lr: 1e-3, batch: 2, spectral_check_iters: 50, ..Default::default() };
    let run = |exec: Exec| {
        let (mut map, samples) = prox_setup(60);
        let log = train_deq(&mut map, &samples[..3], &samples[3..], &TrainConfig { exec, ..cfg.clone() }).unwrap();
        (map.net().params(), log.epochs.iter().map(|r| (r.train_loss, r.val_psnr)).collect::<Vec<_>>(), log)
    };
    let (pa, la, log) = run(Exec::Sequential);
    let (pb, lb, _) = run(Exec::Parallel);
    assert_eq!(pa, pb);
    assert_eq!(la, lb);
    assert_eq!(log.epochs.len(), 2);
    assert!(log.max_layer_norm.unwrap() <= 1.0 + SPECTRAL_TOLERANCE);
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_psnr,mean_forward_iters,mean_backward_iters,epsilon_estimate,wall_seconds"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn training_reduces_loss() {
    let (mut map, samples) = prox_setup(70);
    let cfg = TrainConfig { epochs: 6, lr: 3e-3, batch: 4, select_best: false, ..Default::default() };
    let log = train_deq(&mut map, &samples, &samples, &cfg).unwrap();
    let first = log.epochs[0].train_loss;
    let last = log.epochs.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn log_grid_endpoints() {
    let g = log_grid(1e-4, 1e1, 20);
    assert_eq!(g.len(), 20);
    assert!((g[0] - 1e-4).abs() < 1e-18 && (g[19] - 10.0).abs() < 1e-12);
    assert!(g.windows(2).all(|w| (w[1] / w[0] - (1e5f64).powf(1.0 / 19.0)).abs() < 1e-9));
}

#[test]
fn grid_search_single_point_and_divergent_point() {
    let (map, samples) = prox_setup(80);
    let family = vec![(0.05, map.net().clone())];
    let solver = SolverConfig { max_iter: 60, ..SolverConfig::forward().with_engine(Engine::Picard) };
    let one = GridSpec { eta: vec![0.9], alpha: vec![1.0], sigma: vec![0.05] };
    let r = grid_search(MapKind::DeProx, map.operator(), &family, &one, &samples, Mode::Equilibrium, &solver, Exec::Sequential).unwrap();
    assert_eq!(r.best.step, 0.9);
    assert_eq!(r.evaluated.len(), 1);
    // eta = 50 makes I - eta A^T A strongly expansive.
    let two = GridSpec { eta: vec![50.0, 0.9], ..one };
    let r = grid_search(MapKind::DeProx, map.operator(), &family, &two, &samples, Mode::Equilibrium, &solver, Exec::Sequential).unwrap();
    assert_eq!(r.best.step, 0.9);
    let bad = r.evaluated.iter().find(|p| p.step == 50.0).unwrap();
    assert!(bad.psnr < r.best.psnr);
}

#[test]
fn grid_search_ties_go_to_smaller_step() {
    // With A = 0 every step gives the same result.
    let s = shape();
    let op = LinearOperator::dense(vec![0.0; 64 * 64], s, s).unwrap();
    let net = tiny_net(90, 0.0);
    let samples = make_samples(&op, &images(2, 91), 0.0, 92, InitPolicy::Zeros).unwrap();
    let grid = GridSpec { eta: vec![0.5, 0.1, 2.0], alpha: vec![], sigma: vec![0.02] };
    let r = grid_search(MapKind::DeProx, &op, &[(0.02, net)], &grid, &samples, Mode::Equilibrium, &SolverConfig::forward(), Exec::Sequential).unwrap();
    assert_eq!(r.best.step, 0.1);
}
