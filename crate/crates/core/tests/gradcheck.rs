//! Reverse-mode gradients against central finite differences.
//!
//! Each case builds a scalar `sum(op(inputs) * probe)` with a fixed random
//! probe tensor, so every output element contributes to the loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shardwise::tensor::{Graph, NodeId, Tensor};
use shardwise::DType;

type Build = dyn Fn(&mut Graph, &[NodeId]) -> shardwise::tensor::Result<NodeId>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], away_from_zero: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.5..1.5);
            if !away_from_zero || v.abs() > 1e-2 {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn loss_of(inputs: &[Tensor], probe: &Tensor, build: &Build) -> (Graph, Vec<NodeId>, NodeId) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &ids).unwrap();
    let p = g.input(probe.clone());
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod).unwrap();
    (g, ids, loss)
}

#[derive(Clone, Copy)]
enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h` with `h = 1e-6 · scale`.
    Central,
    /// Fourth-order five-point stencil with `h = 1e-3 · scale`; keeps
    /// roundoff small when one input's gradient is tiny next to the loss.
    FivePoint,
}

/// Max over inputs of `‖analytic − numeric‖∞ / ‖numeric‖∞`.
fn check(inputs: Vec<Tensor>, differentiable: &[usize], build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    check_with(Stencil::FivePoint, inputs, differentiable, build, rng)
}

fn check_with(
    stencil: Stencil,
    inputs: Vec<Tensor>,
    differentiable: &[usize],
    build: &Build,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let probe_shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &ids).unwrap();
        g.shape(out).to_vec()
    };
    let probe = random(rng, &probe_shape, false);
    let (g, ids, loss) = loss_of(&inputs, &probe, build);
    let wrt: Vec<NodeId> = differentiable.iter().map(|&i| ids[i]).collect();
    let analytic = g.grad(loss, &wrt).unwrap();

    let mut worst = 0.0f64;
    for (slot, &idx) in differentiable.iter().enumerate() {
        let base = &inputs[idx];
        let scale = base.max_abs().max(1.0);
        let h = match stencil {
            Stencil::Central => 1e-6 * scale,
            Stencil::FivePoint => 1e-3 * scale,
        };
        let mut numeric = vec![0.0; base.numel()];
        for e in 0..base.numel() {
            let eval = |delta: f64| {
                let mut data = base.to_vec();
                data[e] += delta;
                let mut perturbed = inputs.clone();
                perturbed[idx] = Tensor::from_vec(base.shape(), data).unwrap();
                let (g, _, l) = loss_of(&perturbed, &probe, build);
                g.value(l).item().unwrap()
            };
            numeric[e] = match stencil {
                Stencil::Central => (eval(h) - eval(-h)) / (2.0 * h),
                Stencil::FivePoint => {
                    (-eval(2.0 * h) + 8.0 * eval(h) - 8.0 * eval(-h) + eval(-2.0 * h)) / (12.0 * h)
                }
            };
        }
        let numeric = Tensor::from_vec(base.shape(), numeric).unwrap();
        worst = worst.max(analytic[slot].rel_deviation(&numeric).unwrap());
    }
    worst
}

fn run_trials(name: &str, trials: usize, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        worst = worst.max(case(&mut rng));
    }
    assert!(worst <= 1e-6, "{name}: worst relative error {worst:e}");
}

#[test]
fn matmul_grads() {
    run_trials("matmul", 100, |rng| {
        let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
        let a = random(rng, &[m, k], false);
        let b = random(rng, &[k, n], false);
        check(vec![a, b], &[0, 1], &|g, x| g.matmul(x[0], x[1]), rng)
    });
}

#[test]
fn batched_matmul_grads() {
    run_trials("batched_matmul", 100, |rng| {
        let a = random(rng, &[2, 3, 2, 4], false);
        let b = random(rng, &[2, 3, 4, 2], false);
        let shared = random(rng, &[4, 3], false);
        check(vec![a, b, shared], &[0, 1, 2], &|g, x| {
            let y = g.matmul(x[0], x[1])?;
            let z = g.matmul(x[0], x[2])?;
            let zs = g.sum(z)?;
            g.add(y, zs)
        }, rng)
    });
}

#[test]
fn add_and_multiply_with_broadcast() {
    run_trials("add_mul", 100, |rng| {
        let a = random(rng, &[3, 4], false);
        let b = random(rng, &[4], false);
        let c = random(rng, &[3, 4], false);
        check(vec![a, b, c], &[0, 1, 2], &|g, x| {
            let s = g.add(x[0], x[1])?;
            let p = g.mul(s, x[2])?;
            let q = g.mul(x[1], p)?;
            g.scale(q, -0.7)
        }, rng)
    });
}

#[test]
fn activation_grads() {
    run_trials("activations", 100, |rng| {
        let a = random(rng, &[2, 5], true);
        check(vec![a], &[0], &|g, x| {
            let r = g.relu(x[0])?;
            let ge = g.gelu(x[0])?;
            g.add(r, ge)
        }, rng)
    });
}

#[test]
fn layer_norm_grads() {
    run_trials("layer_norm", 100, |rng| {
        let a = random(rng, &[3, 6], false);
        check(vec![a], &[0], &|g, x| g.layer_norm(x[0], 1e-5), rng)
    });
}

#[test]
fn softmax_grads() {
    run_trials("softmax", 100, |rng| {
        let a = random(rng, &[2, 3, 5], false);
        check(vec![a], &[0], &|g, x| g.softmax(x[0]), rng)
    });
}

#[test]
fn cross_entropy_grads() {
    run_trials("softmax_cross_entropy", 100, |rng| {
        let logits = random(rng, &[2, 3, 7], false);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..7)).collect();
        let labels = Tensor::from_indices(&[2, 3], &labels).unwrap();
        check(vec![logits, labels], &[0], &|g, x| g.softmax_cross_entropy(x[0], x[1]), rng)
    });
}

#[test]
fn embedding_grads() {
    run_trials("embedding", 100, |rng| {
        let table = random(rng, &[6, 4], false);
        let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..6)).collect();
        let ids = Tensor::from_indices(&[5], &ids).unwrap();
        check(vec![table, ids], &[0], &|g, x| g.embedding(x[0], x[1]), rng)
    });
}

#[test]
fn layout_op_grads() {
    run_trials("layout", 100, |rng| {
        let a = random(rng, &[2, 3, 4], false);
        check(vec![a], &[0], &|g, x| {
            let t = g.transpose(x[0], &[2, 0, 1])?;
            let r = g.reshape(t, &[8, 3])?;
            let s1 = g.slice(r, 0, 1, 5)?;
            let s2 = g.slice(r, 0, 0, 3)?;
            let c = g.concat(&[s1, s2], 0)?;
            let st = g.reshape(c, &[2, 4, 3])?;
            let sel = g.select(st, 1)?;
            g.mul(sel, sel)
        }, rng)
    });
}

#[test]
fn reduction_grads() {
    run_trials("reductions", 100, |rng| {
        let a = random(rng, &[3, 3], false);
        check(vec![a], &[0], &|g, x| {
            let s = g.sum(x[0])?;
            let m = g.mean(x[0])?;
            let p = g.mul(s, m)?;
            g.add(x[0], p)
        }, rng)
    });
}

#[test]
fn square_of_three_has_gradient_six() {
    let mut g = Graph::new();
    let theta = g.param("theta", Tensor::scalar(3.0, DType::F64));
    let sq = g.mul(theta, theta).unwrap();
    let grad = g.grad(sq, &[theta]).unwrap();
    assert_eq!(grad[0].item().unwrap(), 6.0);
}

#[test]
fn sum_of_matmul_gradient_is_xt_ones() {
    let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let w = Tensor::from_vec(&[3, 2], vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let xi = g.input(x);
    let wi = g.param("w", w);
    let y = g.matmul(xi, wi).unwrap();
    let l = g.sum(y).unwrap();
    let dw = &g.grad(l, &[wi]).unwrap()[0];
    // Xᵀ · ones[2×2]: each row j holds the column sum of X's column j.
    assert_eq!(dw.data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
}

#[test]
fn mlp_with_120_parameters_matches_finite_differences() {
    // 4 → 12 → 4 with biases on the hidden layer: 48 + 12 + 48 + 12 = 120.
    let mut rng = ChaCha8Rng::seed_from_u64(120);
    let x = random(&mut rng, &[5, 4], false);
    let w1 = random(&mut rng, &[4, 12], false);
    let b1 = random(&mut rng, &[12], false);
    let w2 = random(&mut rng, &[12, 4], false);
    let b2 = random(&mut rng, &[12], false);
    let params = [&w1, &b1, &w2, &b2].iter().map(|t| t.numel()).sum::<usize>();
    assert_eq!(params, 120);
    let worst = check_with(Stencil::Central, vec![x, w1, b1, w2, b2], &[1, 2, 3, 4], &|g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add(h, v[2])?;
        let h = g.gelu(h)?;
        let h = g.add(h, v[4])?;
        g.matmul(h, v[3])
    }, &mut rng);
    assert!(worst <= 1e-6, "worst {worst:e}");
}

#[test]
fn grad_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = random(&mut rng, &[3, 3], false);
    let x = random(&mut rng, &[2, 3], false);
    let (a, b) = (0.3, -2.5);
    let mut g = Graph::new();
    let wi = g.param("w", w);
    let xi = g.input(x);
    let h = g.matmul(xi, wi).unwrap();
    let l1 = {
        let t = g.gelu(h).unwrap();
        g.sum(t).unwrap()
    };
    let l2 = {
        let t = g.softmax(h).unwrap();
        let t = g.mul(t, h).unwrap();
        g.mean(t).unwrap()
    };
    let s1 = g.scale(l1, a).unwrap();
    let s2 = g.scale(l2, b).unwrap();
    let combo = g.add(s1, s2).unwrap();
    let gc = &g.grad(combo, &[wi]).unwrap()[0];
    let g1 = &g.grad(l1, &[wi]).unwrap()[0];
    let g2 = &g.grad(l2, &[wi]).unwrap()[0];
    for i in 0..9 {
        let expect = a * g1.data()[i] + b * g2.data()[i];
        assert!((gc.data()[i] - expect).abs() <= 1e-12, "{i}");
    }
}

#[test]
fn non_scalar_loss_and_integer_grad_are_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let ids = g.input(Tensor::from_indices(&[1], &[0]).unwrap());
    assert!(matches!(
        g.grad(x, &[x]),
        Err(shardwise::TensorError::NonScalarLoss { .. })
    ));
    let s = g.sum(x).unwrap();
    assert!(matches!(
        g.grad(s, &[ids]),
        Err(shardwise::TensorError::IntegralGrad { .. })
    ));
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut g = Graph::new();
    let used = g.param("used", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let unused = g.param("unused", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let l = g.sum(used).unwrap();
    let grads = g.grad(l, &[used, unused]).unwrap();
    assert_eq!(grads[1].data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(&mut rng, &[4, 6], false), random(&mut rng, &[6, 6], false)];
    let run = || {
        let mut g = Graph::new();
        let x = g.input(inputs[0].clone());
        let w = g.input(inputs[1].clone());
        let h = g.matmul(x, w).unwrap();
        let h = g.layer_norm(h, 1e-5).unwrap();
        let h = g.gelu(h).unwrap();
        let h = g.softmax(h).unwrap();
        g.value(h).clone()
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn checked_mode_reports_non_finite_output() {
    let mut g = Graph::new().checked(true);
    let x = g.input(Tensor::from_vec(&[1], vec![1e308]).unwrap());
    let err = g.scale(x, 10.0).unwrap_err();
    assert!(matches!(err, shardwise::TensorError::NonFinite { op: "scale" }));
}
