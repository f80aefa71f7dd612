//! Finite-difference oracle for every differentiable tape operation.
//!
//! Each op is wrapped in a scalar-valued function of random inputs and its
//! tape gradient is checked against central differences (eps 1e-4) at a
//! per-op tolerance of 1e-5.

use oxivit::tensor::{grad_check, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-5;

fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

fn check<F>(name: &str, params: Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> oxivit::Result<Var>,
{
    let report = grad_check(&params, build, EPS).unwrap();
    assert!(
        report.max_rel_err < TOL,
        "{name}: max rel err {} at param {} coord {}",
        report.max_rel_err,
        report.worst_param,
        report.worst_coord
    );
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(vec![3, 4], &mut rng);
    let b = randn(vec![4, 2], &mut rng);
    check("matmul", vec![a, b], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        Ok(g.sum_all(c))
    });
}

#[test]
fn matmul_grad_of_sum_equals_row_sums() {
    // d/dA sum(A B) = row-sums of B^T broadcast over rows of A
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = randn(vec![3, 4], &mut rng);
    let b = randn(vec![4, 2], &mut rng);
    let mut g = Graph::new();
    let av = g.param(a);
    let bv = g.constant(b.clone());
    let c = g.matmul(av, bv).unwrap();
    let s = g.sum_all(c);
    g.backward(s).unwrap();
    let ga = g.grad(av).unwrap();
    for i in 0..3 {
        for p in 0..4 {
            let expect: f64 = (0..2).map(|j| b.data()[p * 2 + j]).sum();
            assert!((ga[i * 4 + p] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn bmm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = randn(vec![2, 3, 4], &mut rng);
    let b = randn(vec![2, 4, 2], &mut rng);
    check("bmm", vec![a, b], |g, v| {
        let c = g.bmm(v[0], v[1])?;
        Ok(g.sum_all(c))
    });
    let a = randn(vec![2, 3, 4], &mut rng);
    let b = randn(vec![2, 5, 4], &mut rng);
    check("bmm_nt", vec![a, b], |g, v| {
        let c = g.bmm_nt(v[0], v[1])?;
        let sq = g.mul(c, c)?;
        Ok(g.mean_all(sq))
    });
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = randn(vec![2, 5], &mut rng);
    let b = randn(vec![2, 5], &mut rng);
    check("add", vec![a.clone(), b.clone()], |g, v| {
        let c = g.add(v[0], v[1])?;
        let sq = g.mul(c, c)?;
        Ok(g.sum_all(sq))
    });
    check("sub", vec![a.clone(), b.clone()], |g, v| {
        let c = g.sub(v[0], v[1])?;
        let sq = g.mul(c, c)?;
        Ok(g.sum_all(sq))
    });
    check("mul", vec![a.clone(), b], |g, v| {
        let c = g.mul(v[0], v[1])?;
        Ok(g.sum_all(c))
    });
    check("scale", vec![a.clone()], |g, v| {
        let c = g.scale(v[0], -1.7);
        let sq = g.mul(c, c)?;
        Ok(g.sum_all(sq))
    });
    check("mul_aliased", vec![a], |g, v| {
        let c = g.mul(v[0], v[0])?;
        Ok(g.sum_all(c))
    });
}

#[test]
fn add_bias_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(vec![4, 3], &mut rng);
    let b = randn(vec![3], &mut rng);
    check("add_bias", vec![x, b], |g, v| {
        let c = g.add_bias(v[0], v[1])?;
        let sq = g.mul(c, c)?;
        Ok(g.mean_all(sq))
    });
}

#[test]
fn softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for axis in [0usize, 1, 2] {
        let x = randn(vec![2, 3, 4], &mut rng);
        let w = randn(vec![2, 3, 4], &mut rng);
        let wc = w.clone();
        check(&format!("softmax axis {axis}"), vec![x], move |g, v| {
            let s = g.softmax(v[0], axis)?;
            let weight = g.constant(wc.clone());
            let picked = g.mul(s, weight)?;
            Ok(g.sum_all(picked))
        });
    }
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(vec![2, 4], &mut rng);
    let gamma = randn(vec![4], &mut rng);
    let beta = randn(vec![4], &mut rng);
    check("layer_norm", vec![x, gamma, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum_all(sq))
    });
}

#[test]
fn gelu_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(vec![3, 3], &mut rng);
    check("gelu", vec![x], |g, v| {
        let y = g.gelu(v[0]);
        Ok(g.sum_all(y))
    });
    // pinned point from the op contract
    let point = vec![Tensor::from_vec(vec![0.5])];
    check("gelu at 0.5", point, |g, v| {
        let y = g.gelu(v[0]);
        Ok(g.sum_all(y))
    });
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(vec![2, 3, 4], &mut rng);
    check("reshape", vec![x.clone()], |g, v| {
        let y = g.reshape(v[0], vec![6, 4])?;
        let sq = g.mul(y, y)?;
        Ok(g.sum_all(sq))
    });
    let tok = randn(vec![4], &mut rng);
    check("prepend_token", vec![tok, x.clone()], |g, v| {
        let y = g.prepend_token(v[0], v[1])?;
        let sq = g.mul(y, y)?;
        Ok(g.sum_all(sq))
    });
    check("take_token", vec![x.clone()], |g, v| {
        let y = g.take_token(v[0], 1)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum_all(sq))
    });
    check("split_merge_heads", vec![x], |g, v| {
        let s = g.split_heads(v[0], 2)?;
        let m = g.merge_heads(s)?;
        let sq = g.mul(m, m)?;
        Ok(g.sum_all(sq))
    });
}

#[test]
fn reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = randn(vec![3, 4], &mut rng);
    check("mean_all", vec![x.clone()], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.mean_all(sq))
    });
    check("sum_all", vec![x], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum_all(sq))
    });
}

#[test]
fn bce_with_logits_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = randn(vec![2, 3], &mut rng);
    let y = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    check("bce_with_logits", vec![z], move |g, v| {
        let t = g.constant(y.clone());
        let e = g.bce_with_logits(v[0], t)?;
        Ok(g.mean_all(e))
    });
}
