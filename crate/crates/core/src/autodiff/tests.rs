use proptest::prelude::*;

use super::*;
use crate::gradcheck::{grad_check, GRAD_TOLERANCE};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

/// Deterministic pseudo-random fill in (-1, 1) without ties.
fn fill(shape: &[usize], salt: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let x = ((i as u64 + 1) * 2654435761 + salt * 97) % 10007;
            (x as f64 / 10007.0) * 2.0 - 1.0 + i as f64 * 1e-4
        })
        .collect();
    t(shape, &data)
}

fn check(f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) {
    let report = grad_check(f, inputs).unwrap();
    assert!(report.passed(GRAD_TOLERANCE), "{report:?}");
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[5.0, 5.0, 5.0])).unwrap();
    let y = g.layer_norm(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn sigmoid_of_gate_bias() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::scalar(-2.2)).unwrap();
    let y = g.sigmoid(x).unwrap();
    assert!((g.value(y).item() - 0.0998).abs() < 1e-3);
}

#[test]
fn pooling_over_tokens() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let mx = g.max_pool(x).unwrap();
    let mean = g.mean_pool(x).unwrap();
    assert_eq!(g.value(mx).data(), &[3.0, 4.0]);
    assert_eq!(g.value(mean).data(), &[2.0, 3.0]);
}

#[test]
fn max_pool_ties_route_to_first_row() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[3, 2], &[1.0, 7.0, 1.0, 7.0, 0.0, 7.0]), true).unwrap();
    let m = g.max_pool(x).unwrap();
    let s = g.sum(m).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[3, 4]), true).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn cosine_distance_is_stationary_at_self() {
    let mut g = Graph::<f64>::new();
    let v = g.leaf(t(&[4], &[0.3, -1.2, 2.0, 0.5]), true).unwrap();
    let c = g.cosine(v, v).unwrap();
    let d = g.affine(c, -1.0, 1.0).unwrap();
    assert!(g.value(d).item().abs() < 1e-12);
    g.backward(d).unwrap();
    assert!(g.grad(v).unwrap().max_abs() < 1e-12);
}

#[test]
fn cosine_of_zero_vector_uses_clamp() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(&[3]), true).unwrap();
    let b = g.constant(t(&[3], &[1.0, 0.0, 0.0])).unwrap();
    let c = g.cosine(a, b).unwrap();
    assert_eq!(g.value(c).item(), 0.0);
    g.backward(c).unwrap();
    assert!(g.grad(a).unwrap().data().iter().all(|x| x.is_finite()));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
    let y = g.tanh(x).unwrap();
    assert_eq!(g.backward(y), Err(TensorError::NotScalar(vec![2])));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[4])).unwrap();
    let err = g.add(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "add",
            lhs: vec![2, 3],
            rhs: vec![4]
        }
    );
    assert!(err.to_string().contains("add"));
    let w = g.constant(Tensor::zeros(&[5, 2])).unwrap();
    assert!(matches!(
        g.matmul(a, w),
        Err(TensorError::ShapeMismatch { op: "matmul", .. })
    ));
}

#[test]
fn verifying_graph_rejects_nan() {
    let mut g = Graph::<f64>::verifying();
    let err = g.leaf(t(&[2], &[1.0, f64::NAN]), true).unwrap_err();
    assert_eq!(err, TensorError::NonFinite { op: "leaf", index: 1 });
    let mut g = Graph::<f64>::new();
    assert!(g.leaf(t(&[1], &[f64::NAN]), true).is_ok());
}

#[test]
fn cross_entropy_rejects_bad_target() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(t(&[3], &[0.0, 1.0, 2.0])).unwrap();
    assert!(matches!(
        g.cross_entropy(l, 3),
        Err(TensorError::IndexOutOfRange { .. })
    ));
}

#[test]
fn single_token_attention_is_identity_weight() {
    let mut g = Graph::<f64>::new();
    let s = g.constant(t(&[1, 1], &[3.7])).unwrap();
    let p = g.softmax(s).unwrap();
    assert_eq!(g.value(p).data(), &[1.0]);
}

#[test]
fn broadcasts() {
    let mut g = Graph::<f64>::new();
    let grid = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
    let row = g.constant(t(&[3], &[10.0, 20.0, 30.0])).unwrap();
    let col = g.constant(t(&[2, 1], &[2.0, -1.0])).unwrap();
    let a = g.add(grid, row).unwrap();
    assert_eq!(g.value(a).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let m = g.mul(grid, col).unwrap();
    assert_eq!(g.value(m).data(), &[2.0, 4.0, 6.0, -4.0, -5.0, -6.0]);
}

#[test]
fn concat_and_slice() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
    let b = g.constant(t(&[3], &[3.0, 4.0, 5.0])).unwrap();
    let c = g.concat(&[a, b]).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    let s = g.slice_cols(c, 1, 3).unwrap();
    assert_eq!(g.value(s).data(), &[2.0, 3.0, 4.0]);
    let r = g.concat_rows(&[a, a]).unwrap();
    assert_eq!(g.shape(r), &[2, 2]);
}

// Finite-difference oracles for every primitive.

#[test]
fn gradcheck_elementwise() {
    let x = fill(&[3, 4], 1);
    check(
        |g, v| {
            let y = g.tanh(v[0])?;
            g.sum(y)
        },
        &[x.clone()],
    );
    check(
        |g, v| {
            let y = g.sigmoid(v[0])?;
            g.sum(y)
        },
        &[x.clone()],
    );
    check(
        |g, v| {
            let y = g.relu(v[0])?;
            let y = g.mul(y, y)?;
            g.sum(y)
        },
        &[x.clone()],
    );
    check(
        |g, v| {
            let y = g.gelu(v[0])?;
            let y = g.mul(y, y)?;
            g.sum(y)
        },
        &[x.clone()],
    );
    check(
        |g, v| {
            let y = g.affine(v[0], -1.7, 0.3)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        },
        &[x],
    );
}

#[test]
fn gradcheck_binary_broadcasts() {
    let grid = fill(&[3, 4], 2);
    let same = fill(&[3, 4], 3);
    let row = fill(&[4], 4);
    let col = fill(&[3, 1], 5);
    for other in [same, row, col] {
        check(
            |g, v| {
                let y = g.add(v[0], v[1])?;
                let y = g.tanh(y)?;
                g.sum(y)
            },
            &[grid.clone(), other.clone()],
        );
        check(
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                let y = g.tanh(y)?;
                g.sum(y)
            },
            &[grid.clone(), other],
        );
    }
}

#[test]
fn gradcheck_matmul_and_layout() {
    let a = fill(&[3, 4], 6);
    let b = fill(&[4, 5], 7);
    let v = fill(&[4], 8);
    check(
        |g, x| {
            let y = g.matmul(x[0], x[1])?;
            let y = g.tanh(y)?;
            g.sum(y)
        },
        &[a.clone(), b.clone()],
    );
    check(
        |g, x| {
            let y = g.matmul(x[0], x[1])?;
            let y = g.tanh(y)?;
            g.sum(y)
        },
        &[v, b.clone()],
    );
    check(
        |g, x| {
            let y = g.transpose(x[0])?;
            let y = g.matmul(y, x[1])?;
            let y = g.tanh(y)?;
            g.sum(y)
        },
        &[fill(&[4, 3], 9), fill(&[4, 2], 10)],
    );
    check(
        |g, x| {
            let l = g.slice_cols(x[0], 1, 2)?;
            let r = g.slice_cols(x[1], 0, 3)?;
            let c = g.concat(&[l, r])?;
            let s = g.concat_rows(&[c, x[2]])?;
            let r = g.select_row(s, 1)?;
            let s = g.concat_rows(&[s, r])?;
            let s = g.reshape(s, &[25])?;
            let s = g.tanh(s)?;
            g.sum(s)
        },
        &[a, fill(&[3, 5], 11), fill(&[5], 12)],
    );
}

#[test]
fn gradcheck_normalisation_and_pooling() {
    let x = fill(&[4, 6], 13);
    let w = fill(&[4, 6], 14);
    // Weighted sums make the row-wise gradients non-trivial.
    check(
        |g, v| {
            let y = g.layer_norm(v[0])?;
            let y = g.mul(y, v[1])?;
            g.sum(y)
        },
        &[x.clone(), w.clone()],
    );
    check(
        |g, v| {
            let y = g.softmax(v[0])?;
            let y = g.mul(y, v[1])?;
            g.sum(y)
        },
        &[x.clone(), w.clone()],
    );
    check(
        |g, v| {
            let y = g.mean_pool(v[0])?;
            let y = g.tanh(y)?;
            g.sum(y)
        },
        &[x.clone()],
    );
    check(
        |g, v| {
            let y = g.max_pool(v[0])?;
            let y = g.tanh(y)?;
            g.sum(y)
        },
        &[x.clone()],
    );
    check(
        |g, v| {
            let y = g.layer_norm_affine(v[0], v[1], v[2])?;
            let y = g.tanh(y)?;
            g.sum(y)
        },
        &[x, fill(&[6], 15), fill(&[6], 16)],
    );
}

#[test]
fn gradcheck_losses() {
    let a = fill(&[5], 17);
    let b = fill(&[5], 18);
    check(
        |g, v| {
            let c = g.cosine(v[0], v[1])?;
            g.affine(c, -1.0, 1.0)
        },
        &[a.clone(), b],
    );
    check(|g, v| g.cross_entropy(v[0], 2), &[a]);
}

#[test]
fn deterministic_gradients() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(fill(&[5, 4], 20).cast(), true).unwrap();
        let w = g.leaf(fill(&[4, 4], 21).cast(), true).unwrap();
        let h = g.matmul(x, w).unwrap();
        let h = g.layer_norm(h).unwrap();
        let p = g.softmax(h).unwrap();
        let m = g.max_pool(p).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        (g.grad(x).unwrap().clone(), g.grad(w).unwrap().clone())
    };
    let (a, b) = run();
    let (c, d) = run();
    assert!(a.bit_eq(&c) && b.bit_eq(&d));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 4], &data)).unwrap();
        let p = g.softmax(x).unwrap();
        for row in g.value(p).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised(data in prop::collection::vec(-10.0f64..10.0, 16)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 8], &data)).unwrap();
        let y = g.layer_norm(x).unwrap();
        for (row, src) in g.value(y).data().chunks(8).zip(data.chunks(8)) {
            let mean_src = src.iter().sum::<f64>() / 8.0;
            let var_src = src.iter().map(|v| (v - mean_src).powi(2)).sum::<f64>() / 8.0;
            let mean = row.iter().sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-6);
            if var_src >= 1.0 {
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                prop_assert!((var - 1.0).abs() < 1e-5);
            }
        }
    }
}
