mod common;

use common::*;
use eviseg::tensor::Tape;
use eviseg::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

const TRIALS: usize = 100;

fn check(name: &str, seed: u64, case: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Tensor>)) {
    let worst = fd_trials(TRIALS, seed, case);
    assert!(worst <= FD_RTOL, "{name}: worst scaled error {worst:e}");
}

/// Random weights so that every output element matters.
fn weighted_sum(t: &Tensor, w: &[f64]) -> Tensor {
    t.mul(&Tensor::new(t.shape(), w.to_vec()).unwrap()).unwrap().sum()
}

#[test]
fn binary_ops_with_broadcasting() {
    for (k, op) in ["add", "sub", "mul", "div"].into_iter().enumerate() {
        check(op, 10 + k as u64, |r| {
            let b = r.gen_range(1..3);
            let c = r.gen_range(1..4);
            let n = r.gen_range(1..4);
            let x = param(&[b, c, n], uniform(r, b * c * n, -2.0, 2.0));
            // right operand broadcasts over the class axis
            let y = param(&[b, 1, n], away_from_zero(r, b * n, 0.5, 2.0));
            let w = uniform(r, b * c * n, -1.0, 1.0);
            let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(move |t: &[Tensor]| {
                let out = match op {
                    "add" => t[0].add(&t[1]),
                    "sub" => t[0].sub(&t[1]),
                    "mul" => t[0].mul(&t[1]),
                    _ => t[0].div(&t[1]),
                }
                .unwrap();
                weighted_sum(&out, &w)
            });
            (vec![x, y], f)
        });
    }
}

#[test]
fn unary_ops() {
    type Op = fn(&Tensor) -> Tensor;
    let ops: [(&str, Op, f64, f64); 11] = [
        ("exp", |t| t.exp(), -2.0, 2.0),
        ("log", |t| t.log(), 0.1, 5.0),
        ("softplus", |t| t.softplus(), -20.0, 20.0),
        ("relu", |t| t.relu(), -2.0, 2.0),
        ("neg", |t| t.neg(), -2.0, 2.0),
        ("add_scalar", |t| t.add_scalar(0.7), -2.0, 2.0),
        ("mul_scalar", |t| t.mul_scalar(-1.3), -2.0, 2.0),
        ("rsub_scalar", |t| t.rsub_scalar(2.5), -2.0, 2.0),
        ("scalar_div", |t| t.scalar_div(3.0), 0.2, 4.0),
        ("digamma", |t| t.digamma().unwrap(), 0.05, 60.0),
        ("lgamma", |t| t.lgamma().unwrap(), 0.05, 60.0),
    ];
    for (k, (name, op, lo, hi)) in ops.into_iter().enumerate() {
        check(name, 100 + k as u64, |r| {
            let n = r.gen_range(1..7);
            let data = if name == "relu" { away_from_zero(r, n, 0.01, hi) } else { uniform(r, n, lo, hi) };
            let w = uniform(r, n, -1.0, 1.0);
            let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(move |t: &[Tensor]| weighted_sum(&op(&t[0]), &w));
            (vec![param(&[n], data)], f)
        });
    }
}

#[test]
fn clamp_inside_and_outside() {
    check("clamp", 200, |r| {
        let n = r.gen_range(1..7);
        // keep clear of the clamp edges at -1 and 1
        let data: Vec<f64> = (0..n)
            .map(|_| match r.gen_range(0..3) {
                0 => r.gen_range(-3.0..-1.01),
                1 => r.gen_range(-0.99..0.99),
                _ => r.gen_range(1.01..3.0),
            })
            .collect();
        let w = uniform(r, n, -1.0, 1.0);
        let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(move |t: &[Tensor]| weighted_sum(&t[0].clamp(-1.0, 1.0), &w));
        (vec![param(&[n], data)], f)
    });
}

#[test]
fn reductions() {
    check("sum", 300, |r| {
        let n = r.gen_range(1..9);
        let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(|t: &[Tensor]| t[0].exp().sum());
        (vec![param(&[n], uniform(r, n, -1.0, 1.0))], f)
    });
    check("mean", 301, |r| {
        let n = r.gen_range(1..9);
        let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(|t: &[Tensor]| t[0].exp().mean());
        (vec![param(&[n], uniform(r, n, -1.0, 1.0))], f)
    });
    check("sum_axis", 302, |r| {
        let shape = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4)];
        let axis = r.gen_range(0..3);
        let n: usize = shape.iter().product();
        let w = uniform(r, n / shape[axis], -1.0, 1.0);
        let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(move |t: &[Tensor]| weighted_sum(&t[0].sum_axis(axis).unwrap(), &w));
        (vec![param(&shape, uniform(r, n, -1.0, 1.0))], f)
    });
    check("log_softmax", 303, |r| {
        let shape = [r.gen_range(1..3), r.gen_range(2..5), r.gen_range(1..4)];
        let n: usize = shape.iter().product();
        let w = uniform(r, n, -1.0, 1.0);
        let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(move |t: &[Tensor]| weighted_sum(&t[0].log_softmax(1).unwrap(), &w));
        (vec![param(&shape, uniform(r, n, -3.0, 3.0))], f)
    });
}

#[test]
fn matmul_gradients() {
    check("matmul", 400, |r| {
        let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let w = uniform(r, m * n, -1.0, 1.0);
        let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(move |t: &[Tensor]| weighted_sum(&t[0].matmul(&t[1]).unwrap(), &w));
        (vec![param(&[m, k], uniform(r, m * k, -1.0, 1.0)), param(&[k, n], uniform(r, k * n, -1.0, 1.0))], f)
    });
}

#[test]
fn matmul_4x5_by_5x3_is_tight() {
    let mut r = rng(401);
    let a = param(&[4, 5], uniform(&mut r, 20, -1.0, 1.0));
    let b = param(&[5, 3], uniform(&mut r, 15, -1.0, 1.0));
    let w = uniform(&mut r, 12, -1.0, 1.0);
    let err = grad_error(&[a, b], &|t: &[Tensor]| weighted_sum(&t[0].matmul(&t[1]).unwrap(), &w));
    assert!(err <= 1e-6, "{err:e}");
}

#[test]
fn conv2d_gradients() {
    check("conv2d", 500, |r| {
        let (b, cin, cout) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3));
        let (h, w) = (r.gen_range(3..6), r.gen_range(3..6));
        let k = if r.gen_bool(0.5) { 3 } else { 1 };
        let pad = if k == 3 { r.gen_range(0..2) } else { 0 };
        let oh = h + 2 * pad - k + 1;
        let ow = w + 2 * pad - k + 1;
        let weights = uniform(r, b * cout * oh * ow, -1.0, 1.0);
        let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(move |t: &[Tensor]| {
            weighted_sum(&t[0].conv2d(&t[1], Some(&t[2]), pad).unwrap(), &weights)
        });
        (
            vec![
                param(&[b, cin, h, w], uniform(r, b * cin * h * w, -1.0, 1.0)),
                param(&[cout, cin, k, k], uniform(r, cout * cin * k * k, -1.0, 1.0)),
                param(&[cout], uniform(r, cout, -1.0, 1.0)),
            ],
            f,
        )
    });
}

#[test]
fn pooling_and_upsampling_gradients() {
    check("max_pool2d", 600, |r| {
        let (c, h, w) = (r.gen_range(1..3), 2 * r.gen_range(1..3), 2 * r.gen_range(1..3));
        // distinct values spaced well beyond the step keep the argmax stable
        let mut vals: Vec<f64> = (0..c * h * w).map(|i| i as f64 * 0.01).collect();
        vals.shuffle(r);
        let weights = uniform(r, c * h * w / 4, -1.0, 1.0);
        let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(move |t: &[Tensor]| weighted_sum(&t[0].max_pool2d(2).unwrap(), &weights));
        (vec![param(&[1, c, h, w], vals)], f)
    });
    check("upsample_nearest", 601, |r| {
        let (c, h, w) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let weights = uniform(r, c * h * w * 4, -1.0, 1.0);
        let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(move |t: &[Tensor]| weighted_sum(&t[0].upsample_nearest(2).unwrap(), &weights));
        (vec![param(&[1, c, h, w], uniform(r, c * h * w, -1.0, 1.0))], f)
    });
}

#[test]
fn concat_and_select_gradients() {
    check("concat", 700, |r| {
        let (c1, c2, n) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..4));
        let weights = uniform(r, (c1 + c2) * n, -1.0, 1.0);
        let f: Box<dyn Fn(&[Tensor]) -> Tensor> =
            Box::new(move |t: &[Tensor]| weighted_sum(&Tensor::concat(&[&t[0], &t[1]], 1).unwrap(), &weights));
        (vec![param(&[1, c1, n], uniform(r, c1 * n, -1.0, 1.0)), param(&[1, c2, n], uniform(r, c2 * n, -1.0, 1.0))], f)
    });
    check("select", 701, |r| {
        let n = r.gen_range(1..8);
        let cond = Tensor::new(&[n], (0..n).map(|_| r.gen_range(0..2) as f64).collect()).unwrap();
        let weights = uniform(r, n, -1.0, 1.0);
        let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(move |t: &[Tensor]| {
            weighted_sum(&Tensor::select(&cond, &t[0].exp(), &t[1].mul_scalar(2.0)).unwrap(), &weights)
        });
        (vec![param(&[n], uniform(r, n, -1.0, 1.0)), param(&[n], uniform(r, n, -1.0, 1.0))], f)
    });
}

#[test]
fn shared_subexpressions_sum_path_contributions() {
    check("dag", 800, |r| {
        let n = r.gen_range(1..6);
        let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(|t: &[Tensor]| {
            let s = t[0].softplus();
            // s reaches the output along three paths
            let a = s.mul(&s).unwrap();
            let b = s.exp().div(&s.add_scalar(1.0)).unwrap();
            a.add(&b).unwrap().add(&t[0].mul(&s).unwrap()).unwrap().sum()
        });
        (vec![param(&[n], uniform(r, n, -2.0, 2.0))], f)
    });
}

#[test]
fn composed_expression_matches_finite_differences() {
    check("composed", 900, |r| {
        let x = param(&[1, 1, 4, 4], uniform(r, 16, -1.0, 1.0));
        let k = param(&[2, 1, 3, 3], uniform(r, 18, -0.5, 0.5));
        let f: Box<dyn Fn(&[Tensor]) -> Tensor> = Box::new(|t: &[Tensor]| {
            let h = t[0].conv2d(&t[1], None, 1).unwrap().softplus();
            let pooled = h.max_pool2d(2).unwrap().upsample_nearest(2).unwrap();
            let alpha = pooled.add_scalar(1.0);
            let s = alpha.sum_axis(1).unwrap();
            s.digamma().unwrap().sub(&alpha.digamma().unwrap()).unwrap().mean()
        });
        (vec![x, k], f)
    });
}

#[test]
fn tape_is_reverse_topological_and_unique() {
    let x = param(&[3], vec![0.1, 0.2, 0.3]);
    let s = x.exp();
    let y = s.mul(&s).unwrap().add(&s).unwrap().sum();
    let tape = Tape::record(&y);
    // x, exp, mul, add, sum with the shared exp recorded once
    assert_eq!(tape.len(), 5);
    assert_eq!(tape.op_names(), vec!["sum", "add", "mul", "exp", "leaf"]);
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let x = param(&[2], vec![0.0, 0.0]);
    x.softplus().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.5, 0.5]);
    x.softplus().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    x.zero_grad();
    assert!(x.grad().is_none());
}
