//! Analytic gradients of every op against central finite differences in
//! double precision.

mod common;

use common::{grad_check, random, random_off_zero, rng, weighted_sum};
use lsn_tensor::{Graph, Tensor};
use rand::Rng;

const TOL: f64 = 1e-6;

fn assert_close(name: &str, err: f64) {
    assert!(err < TOL, "{name}: relative gradient error {err:e} exceeds {TOL:e}");
}

#[test]
fn elementwise_ops() {
    for seed in 0..4 {
        let mut r = rng(seed);
        let shape = [r.random_range(1..4), r.random_range(1..5), 3];
        let ins = [random(&mut r, &shape), random(&mut r, &shape)];
        assert_close("add", grad_check(&ins, |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, seed)
        }));
        assert_close("sub", grad_check(&ins, |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, seed)
        }));
        assert_close("mul", grad_check(&ins, |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, seed)
        }));
        assert_close("scale", grad_check(&ins[..1], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            weighted_sum(g, y, seed)
        }));
    }
}

#[test]
fn matmul_and_bias() {
    for seed in 10..14 {
        let mut r = rng(seed);
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..5));
        let ins = [random(&mut r, &[m, k]), random(&mut r, &[k, n]), random(&mut r, &[n])];
        assert_close("matmul+bias", grad_check(&ins, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.add_bias(y, v[2])?;
            weighted_sum(g, y, seed)
        }));
    }
}

#[test]
fn conv2d_all_geometries() {
    let cases = [
        // (batch, cin, h, w, cout, k, stride, pad)
        (1, 1, 4, 4, 1, 3, 1, 1),
        (2, 2, 5, 4, 3, 3, 2, 1),
        (2, 3, 4, 4, 2, 1, 1, 0),
        (1, 2, 6, 5, 2, 3, 2, 0),
        (2, 2, 3, 3, 4, 2, 1, 0),
        (1, 3, 4, 4, 2, 1, 2, 0),
    ];
    for (i, &(b, cin, h, w, cout, k, stride, pad)) in cases.iter().enumerate() {
        let mut r = rng(100 + i as u64);
        let ins = [
            random(&mut r, &[b, cin, h, w]),
            random(&mut r, &[cout, cin, k, k]),
            random(&mut r, &[cout]),
        ];
        let err = grad_check(&ins, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            weighted_sum(g, y, i as u64)
        });
        assert_close(&format!("conv2d case {i}"), err);
    }
}

#[test]
fn pooling_ops() {
    for seed in 20..23 {
        let mut r = rng(seed);
        let shape = [r.random_range(1..3), r.random_range(1..4), 4, 6];
        let ins = [random(&mut r, &shape)];
        assert_close("avg_pool2d", grad_check(&ins, |g, v| {
            let y = g.avg_pool2d(v[0], 2)?;
            weighted_sum(g, y, seed)
        }));
        assert_close("global_avg_pool", grad_check(&ins, |g, v| {
            let y = g.global_avg_pool(v[0])?;
            weighted_sum(g, y, seed)
        }));
    }
}

#[test]
fn relu_away_from_kink() {
    for seed in 30..33 {
        let mut r = rng(seed);
        let ins = [random_off_zero(&mut r, &[2, 3, 2, 2])];
        assert_close("relu", grad_check(&ins, |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, seed)
        }));
    }
}

#[test]
fn batch_norm_train_and_eval() {
    for seed in 40..44 {
        let mut r = rng(seed);
        let shape: Vec<usize> = if seed % 2 == 0 { vec![4, 3] } else { vec![3, 2, 2, 3] };
        let c = shape[1];
        let ins = [random(&mut r, &shape), random(&mut r, &[c]), random(&mut r, &[c])];
        assert_close("batch_norm train", grad_check(&ins, |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, seed)
        }));
        let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
        assert_close("batch_norm eval", grad_check(&ins, |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            weighted_sum(g, y, seed)
        }));
    }
}

#[test]
fn l2_normalize_each_axis() {
    for seed in 50..53 {
        let mut r = rng(seed);
        let ins = [random(&mut r, &[2, 4, 3])];
        for axis in 0..3 {
            assert_close(&format!("l2_normalize axis {axis}"), grad_check(&ins, |g, v| {
                let y = g.l2_normalize(v[0], axis, 1e-12)?;
                weighted_sum(g, y, seed)
            }));
        }
    }
}

#[test]
fn shape_ops() {
    for seed in 60..63 {
        let mut r = rng(seed);
        let ins = [random(&mut r, &[2, 3, 2, 2]), random(&mut r, &[2, 1, 2, 2])];
        assert_close("concat", grad_check(&ins, |g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            weighted_sum(g, y, seed)
        }));
        assert_close("reshape", grad_check(&ins[..1], |g, v| {
            let y = g.reshape(v[0], [6, 4])?;
            weighted_sum(g, y, seed)
        }));
        assert_close("mean", grad_check(&ins[..1], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        }));
        assert_close("sum", grad_check(&ins[..1], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        }));
    }
}

#[test]
fn similarity_and_gather() {
    for seed in 70..73 {
        let mut r = rng(seed);
        let ins = [random(&mut r, &[2, 3, 2, 2]), random(&mut r, &[2, 3, 3, 1])];
        assert_close("channel_dot", grad_check(&ins, |g, v| {
            let y = g.channel_dot(v[0], v[1])?;
            weighted_sum(g, y, seed)
        }));
        assert_close("cosine_similarity_map", grad_check(&ins, |g, v| {
            let y = g.cosine_similarity_map(v[0], v[1], 1e-12)?;
            weighted_sum(g, y, seed)
        }));
        let index: Vec<usize> = (0..8).map(|_| r.random_range(0..3)).collect();
        assert_close("gather", grad_check(&ins[1..], |g, v| {
            let y = g.gather_locations(v[0], &index, &[2, 2])?;
            weighted_sum(g, y, seed)
        }));
    }
}

#[test]
fn stop_gradient_product_rule() {
    // loss = sum(sg(x) · x) has gradient x: the stopped factor is a constant.
    let x = Tensor::new([3], vec![0.5, -2.0, 3.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let v = g.leaf(x.clone(), true).unwrap();
    let s = g.stop_gradient(v).unwrap();
    let p = g.mul(s, v).unwrap();
    let loss = g.sum(p).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(v).unwrap(), x.data());
}

#[test]
fn single_precision_within_looser_tolerance() {
    fn build<T: lsn_tensor::Real>(g: &mut Graph<T>, x: lsn_tensor::Var, w: lsn_tensor::Var) -> lsn_tensor::Result<lsn_tensor::Var> {
        let y = g.matmul(x, w)?;
        let gamma = g.constant(Tensor::full([2], T::one()))?;
        let beta = g.constant(Tensor::zeros([2]))?;
        let (y, _) = g.batch_norm_train(y, gamma, beta, T::from_f64_lossy(1e-5))?;
        let y = g.l2_normalize(y, 1, T::from_f64_lossy(1e-12))?;
        let sq = g.mul(y, y)?;
        let t = g.scale(y, T::from_f64_lossy(0.3))?;
        let s = g.add(sq, t)?;
        g.sum(s)
    }
    for seed in 80..83 {
        let mut r = rng(seed);
        let x = random(&mut r, &[3, 4]);
        let w = random(&mut r, &[4, 2]);
        let numeric = common::numeric_grad(&[x.clone(), w.clone()], 0, |g, v| build(g, v[0], v[1]));

        let mut g = Graph::<f32>::new();
        let xv = g.leaf(x.cast(), true).unwrap();
        let wv = g.leaf(w.cast(), true).unwrap();
        let loss = build(&mut g, xv, wv).unwrap();
        g.backward(loss).unwrap();
        let analytic: Vec<f64> = g.grad(xv).unwrap().iter().map(|&v| v as f64).collect();
        let err = common::rel_error(&analytic, &numeric);
        assert!(err < 1e-3, "f32 relative error {err:e}");
    }
}
