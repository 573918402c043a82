//! Central finite-difference checks for every differentiable primitive.

use pmdm_tensor::{Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

/// Relative error; the 1e-6 floor keeps exact zeros from dividing by zero.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Builds `f` on fresh graphs, perturbing every input entry, and compares the
/// tape gradient with central differences. Returns the worst relative error.
fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|t| g.param(t.clone())).collect();
        f(&g, &vars).unwrap().value().item()
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut p = plus[k].data().to_vec();
            p[i] += STEP;
            plus[k] = Tensor::new(inputs[k].shape(), p).unwrap();
            let mut m = minus[k].data().to_vec();
            m[i] -= STEP;
            minus[k] = Tensor::new(inputs[k].shape(), m).unwrap();
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Random positive weights so the scalar depends on every output entry.
fn weighted_sum<'g>(g: &'g Graph, y: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::uniform(&y.shape(), 1.0, &mut rng));
    Ok(y.mul(w)?.sum())
}

fn random_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=3)).collect()
}

#[test]
fn linear_and_quadratic_losses() {
    let theta = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25]).unwrap();
    let g = Graph::new();
    let v = g.param(theta.clone());
    let grads = g.backward(v.sum()).unwrap();
    assert!(grads.get(v).unwrap().data().iter().all(|x| *x == 1.0));

    let g = Graph::new();
    let v = g.param(theta.clone());
    let grads = g.backward(v.mul(v).unwrap().sum()).unwrap();
    let expected: Vec<f64> = theta.data().iter().map(|x| 2.0 * x).collect();
    assert_eq!(grads.get(v).unwrap().data(), expected.as_slice());
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let g = Graph::new();
    let a = g.param(Tensor::ones(&[3]));
    let b = g.param(Tensor::ones(&[2]));
    let grads = g.backward(a.sum()).unwrap();
    assert!(grads.get(b).is_none());
    assert_eq!(grads.get_or_zeros(b).data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let g = Graph::new();
    let a = g.param(Tensor::ones(&[3]));
    assert!(g.backward(a).is_err());
}

#[test]
fn elementwise_ops_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for rank in 1..=4 {
        let shape = random_shape(&mut rng, rank);
        let x = rand_tensor(&mut rng, &shape);
        let y = rand_tensor(&mut rng, &shape);
        let err = check(&[x.clone(), y.clone()], |g, v| {
            let s = v[0].sigmoid().mul(v[1].tanh())?;
            let t = v[0].sub(v[1])?.add(s)?.scale(0.7).one_minus();
            weighted_sum(g, t, 3)
        });
        assert!(err < REL_TOL, "rank {rank}: {err}");
        // relu and abs away from their kinks
        let shifted = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        let err = check(&[shifted], |g, v| {
            let r = v[0].relu().add(v[0].abs())?.exp();
            weighted_sum(g, r, 4)
        });
        assert!(err < REL_TOL, "rank {rank}: {err}");
    }
}

#[test]
fn broadcasting_ops_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[3, 1]);
    let c = rand_tensor(&mut rng, &[4]);
    let err = check(&[a, b, c], |g, v| {
        let y = v[0].mul(v[1])?.add(v[2])?.sub(v[1])?;
        let e = v[2].reshape(&[1, 4])?.expand(&[3, 4])?;
        weighted_sum(g, y.add(e)?, 5)
    });
    assert!(err < REL_TOL, "{err}");
}

#[test]
fn matrix_products_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[4, 2]);
    assert!(check(&[x, w], |g, v| weighted_sum(g, v[0].matmul(v[1])?, 6)) < REL_TOL);

    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [2, 3, 4, 3] } else { [2, 3, 3, 4] };
        let b_shape = if tb { [2, 3, 2, 4] } else { [2, 3, 4, 2] };
        let a = rand_tensor(&mut rng, &a_shape);
        let b = rand_tensor(&mut rng, &b_shape);
        let err = check(&[a, b], |g, v| weighted_sum(g, v[0].bmm(v[1], ta, tb)?, 7));
        assert!(err < REL_TOL, "trans ({ta}, {tb}): {err}");
    }

    let e = rand_tensor(&mut rng, &[2, 3, 4]);
    assert!(check(&[e], |g, v| weighted_sum(g, v[0].gram()?, 12)) < REL_TOL);

    let z = rand_tensor(&mut rng, &[2, 3, 4]);
    let theta = rand_tensor(&mut rng, &[3, 4, 2]);
    assert!(check(&[z, theta], |g, v| weighted_sum(g, v[0].node_matmul(v[1])?, 8)) < REL_TOL);
}

#[test]
fn structural_ops_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[2, 3, 2]);
    let b = rand_tensor(&mut rng, &[2, 3, 1]);
    let table = rand_tensor(&mut rng, &[5, 3]);
    let err = check(&[a, b, table], |g, v| {
        let c = g.concat(&[v[0], v[1]], 2)?;
        let p = c.permute(&[2, 0, 1])?.softmax_last()?;
        let s = p.sum_axis(1)?.mean();
        let rows = v[2].gather_rows(&[4, 0, 4, 2])?;
        let st = g.stack(&[rows, rows.tanh()], 1)?;
        let t = weighted_sum(g, st, 9)?;
        s.add(t)
    });
    assert!(err < REL_TOL, "{err}");
}

#[test]
fn inv_sqrt_passes_gradient_check_on_positive_inputs() {
    let x = Tensor::new(&[4], vec![0.5, 1.0, 2.5, 4.0]).unwrap();
    assert!(check(&[x], |g, v| weighted_sum(g, v[0].inv_sqrt_or_zero(), 10)) < REL_TOL);
}

#[test]
fn softmax_of_constant_row_is_uniform() {
    let g = Graph::new();
    let y = g.constant(Tensor::zeros(&[3])).softmax_last().unwrap().value();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_survives_large_logits() {
    let g = Graph::new();
    let y = g
        .constant(Tensor::from_vec(vec![1000.0, 0.0, 0.0]))
        .softmax_last()
        .unwrap()
        .value();
    assert!(y.all_finite());
    assert!((y.data()[0] - 1.0).abs() < 1e-12);
    assert!(y.data()[1] < 1e-300 || y.data()[1] == 0.0);
}

#[test]
fn softmax_matches_direct_evaluation() {
    // Oracle: unshifted exponentials with compensated (Neumaier) summation.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let g = Graph::new();
        let y = g.constant(Tensor::from_vec(row.clone())).softmax_last().unwrap().value();
        let exps: Vec<f64> = row.iter().map(|x| x.exp()).collect();
        let mut total = 0.0;
        let mut comp = 0.0;
        for e in &exps {
            let t = total + e;
            comp += if total.abs() >= e.abs() { (total - t) + e } else { (e - t) + total };
            total = t;
        }
        let total = total + comp;
        for (yi, ei) in y.data().iter().zip(&exps) {
            assert!((yi - ei / total).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_reports_offending_slice() {
    let g = Graph::new();
    let x = g.constant(Tensor::new(&[2, 2], vec![0.0, 1.0, f64::NAN, 0.0]).unwrap());
    let err = x.softmax_last().unwrap_err();
    assert!(err.to_string().contains("slice 1"), "{err}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let g = Graph::new();
        let a = g.param(Tensor::uniform(&[4, 5], 1.0, &mut rng));
        let b = g.param(Tensor::uniform(&[5, 3], 1.0, &mut rng));
        let y = a.matmul(b).unwrap().tanh().softmax_last().unwrap();
        let grads = g.backward(y.mul(y).unwrap().sum()).unwrap();
        (y.value(), grads.get(a).unwrap())
    };
    let (y1, g1) = run();
    let (y2, g2) = run();
    assert_eq!(y1.data(), y2.data());
    assert_eq!(g1.data(), g2.data());
}

proptest! {
    #[test]
    fn relu_is_idempotent(values in prop::collection::vec(-10.0f64..10.0, 1..32)) {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(values));
        let once = x.relu();
        let twice = once.relu();
        prop_assert_eq!(once.value(), twice.value());
    }

    #[test]
    fn softmax_rows_are_distributions(
        values in prop::collection::vec(-50.0f64..50.0, 12),
        width in prop::sample::select(vec![1usize, 2, 3, 4, 6, 12]),
    ) {
        let g = Graph::new();
        let rows = 12 / width;
        let y = g
            .constant(Tensor::new(&[rows, width], values).unwrap())
            .softmax_last()
            .unwrap()
            .value();
        for row in y.data().chunks(width) {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
