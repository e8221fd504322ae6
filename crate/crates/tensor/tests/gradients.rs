//! Finite-difference checks for every differentiable primitive.

use lsenet_tensor::{
    grad_check, grad_check_with, GradCheckOptions, Graph, Pad2d, PoolKind, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> lsenet_tensor::Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::from_fn(shape, |i| {
        ((i * 7919 % 113) as f64 / 113.0) - 0.4
    }));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(
    name: &str,
    params: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> lsenet_tensor::Result<Var>,
) {
    let r = grad_check(f, params, 1e-6).unwrap();
    assert!(
        r.max_rel_error < TOL,
        "{name}: max rel error {} at {:?}",
        r.max_rel_error,
        r.worst
    );
}

#[test]
fn quadratic_is_exact() {
    let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap().data(), &[2.0, 4.0]);
    let r = grad_check(
        |g, p| {
            let sq = g.mul(p[0], p[0])?;
            g.sum(sq)
        },
        &[x],
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
}

#[test]
fn step_and_shape_validation() {
    let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
    assert!(grad_check(|g, p| g.sum(p[0]), std::slice::from_ref(&x), 1e-2).is_err());
    assert!(matches!(
        grad_check(|g, p| g.relu(p[0]), &[x], 1e-6),
        Err(lsenet_tensor::TensorError::Argument(_))
    ));
}

#[test]
fn conv_relu_sum_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[1, 1, 5, 5]);
    let w = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let b = rand_tensor(&mut rng, &[2]);
    check("conv-relu-sum", &[x, w, b], |g, p| {
        let y = g.conv2d(p[0], p[1], Some(p[2]), 1, 1)?;
        let r = g.relu(y)?;
        g.sum(r)
    });
}

#[test]
fn conv_strided_and_wide() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(k, s, p) in &[(3, 2, 1), (5, 1, 2), (1, 1, 0), (3, 1, 0)] {
        let x = rand_tensor(&mut rng, &[2, 3, 6, 7]);
        let w = rand_tensor(&mut rng, &[4, 3, k, k]);
        let b = rand_tensor(&mut rng, &[4]);
        check("conv2d", &[x, w, b], move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), s, p)?;
            weighted_sum(g, y)
        });
    }
}

#[test]
fn group_norm_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 4, 3, 3]);
    let ga = rand_tensor(&mut rng, &[4]);
    let be = rand_tensor(&mut rng, &[4]);
    check("group_norm", &[x, ga, be], |g, p| {
        let y = g.group_norm(p[0], 2, p[1], p[2], 1e-5)?;
        weighted_sum(g, y)
    });
}

#[test]
fn softmax_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 3, 5]);
    check("softmax", &[x], |g, p| {
        let y = g.softmax_lastdim(p[0])?;
        weighted_sum(g, y)
    });
}

#[test]
fn pool_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 6]);
    for kind in [PoolKind::Max, PoolKind::Avg] {
        check("pool2d", std::slice::from_ref(&x), move |g, p| {
            let y = g.pool2d(p[0], kind, 2, 2)?;
            weighted_sum(g, y)
        });
    }
}

#[test]
fn resize_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[1, 2, 3, 4]);
    for &(h, w) in &[(6, 8), (5, 3), (3, 4), (1, 7)] {
        check("resize", std::slice::from_ref(&x), move |g, p| {
            let y = g.resize_bilinear(p[0], h, w)?;
            weighted_sum(g, y)
        });
    }
}

#[test]
fn pad_crop_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 5]);
    check("pad/crop", &[x], |g, p| {
        let y = g.pad2d(p[0], Pad2d::new(1, 2, 0, 3))?;
        let y = g.crop2d(y, Pad2d::new(2, 0, 1, 1))?;
        weighted_sum(g, y)
    });
}

#[test]
fn matmul_and_linear_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 4, 5]);
    let shared = rand_tensor(&mut rng, &[4, 5]);
    check("matmul", &[a.clone(), b], |g, p| {
        let y = g.matmul(p[0], p[1])?;
        weighted_sum(g, y)
    });
    check("matmul shared", &[a.clone(), shared], |g, p| {
        let y = g.matmul(p[0], p[1])?;
        weighted_sum(g, y)
    });
    let w = rand_tensor(&mut rng, &[6, 4]);
    let bias = rand_tensor(&mut rng, &[6]);
    check("linear", &[a, w, bias], |g, p| {
        let y = g.linear(p[0], p[1], Some(p[2]))?;
        weighted_sum(g, y)
    });
}

#[test]
fn pointwise_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let y = rand_tensor(&mut rng, &[3, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    let col = Tensor::from_fn([3, 1], |i| 1.5 + i as f64);
    check("relu", std::slice::from_ref(&x), |g, p| {
        let y = g.relu(p[0])?;
        weighted_sum(g, y)
    });
    check("sigmoid", std::slice::from_ref(&x), |g, p| {
        let y = g.sigmoid(p[0])?;
        weighted_sum(g, y)
    });
    check("ln", &[x.map(|v| v.abs() + 0.5)], |g, p| {
        let y = g.ln(p[0])?;
        weighted_sum(g, y)
    });
    check("affine", std::slice::from_ref(&x), |g, p| {
        let y = g.affine(p[0], -2.5, 0.75)?;
        weighted_sum(g, y)
    });
    check("clamp", std::slice::from_ref(&x), |g, p| {
        let y = g.clamp(p[0], -0.5, 0.5)?;
        weighted_sum(g, y)
    });
    check(
        "add/sub broadcast",
        &[x.clone(), y.clone(), row.clone()],
        |g, p| {
            let s = g.add(p[0], p[2])?;
            let d = g.sub(s, p[1])?;
            let e = g.sub(d, p[2])?;
            weighted_sum(g, e)
        },
    );
    check("mul/div broadcast", &[x.clone(), row, col], |g, p| {
        let m = g.mul(p[0], p[1])?;
        let d = g.div(m, p[2])?;
        weighted_sum(g, d)
    });
    check("mean/mean_lastdim", &[x], |g, p| {
        let m = g.mean_lastdim(p[0])?;
        let s = weighted_sum(g, m)?;
        let mu = g.mean(p[0])?;
        g.add(s, mu)
    });
}

#[test]
fn shape_op_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_tensor(&mut rng, &[2, 3, 2, 2]);
    let b = rand_tensor(&mut rng, &[2, 1, 2, 2]);
    check("concat/permute/reshape", &[a, b], |g, p| {
        let c = g.concat_channels(&[p[0], p[1]])?;
        let t = g.permute(c, &[3, 1, 0, 2])?;
        let r = g.reshape(t, &[8, 4])?;
        let tr = g.transpose_last(r)?;
        weighted_sum(g, tr)
    });
}

#[test]
fn random_rank4_primitives_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..4 {
        let dims: Vec<usize> = (0..4).map(|_| rng.random_range(1..=8)).collect();
        let (h, w) = (dims[2].max(2), dims[3].max(2));
        let x = rand_tensor(&mut rng, &[dims[0], dims[1], h, w]);
        let k = rand_tensor(&mut rng, &[2, dims[1], 3, 3]);
        let r = grad_check_with(
            |g, p| {
                let y = g.conv2d(p[0], p[1], None, 1, 1)?;
                let s = g.sigmoid(y)?;
                weighted_sum(g, s)
            },
            &[x, k],
            GradCheckOptions {
                eps: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
    }
}

#[test]
fn backward_visits_each_node_once() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64([3], &[1.0, -2.0, 3.0]).unwrap());
    let a = g.relu(x).unwrap();
    let b = g.mul(a, x).unwrap();
    let c = g.add(b, a).unwrap();
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.backward_visits(), g.len());
    // d/dx [relu(x)*x + relu(x)] = 2x + 1 for x > 0, 0 otherwise
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 0.0, 7.0]);
}

#[test]
fn non_finite_detection() {
    let mut g = Graph::<f64>::new();
    g.set_check_finite(true);
    let x = g.constant(Tensor::from_f64([2], &[0.0, 1.0]).unwrap());
    let err = g.ln(x).unwrap_err();
    assert!(
        matches!(err, lsenet_tensor::TensorError::NonFinite { op: "ln", .. }),
        "{err}"
    );
}

#[test]
fn kink_crossings_are_detected() {
    // 3e-6 sits within one step of the ReLU kink, the others do not
    let x = Tensor::from_f64([3], &[3e-6, 0.5, -0.5]).unwrap();
    let f = |g: &mut Graph<f64>, p: &[Var]| {
        let r = g.relu(p[0])?;
        g.sum(r)
    };
    let naive = GradCheckOptions {
        eps: 1e-5,
        skip_branch_changes: false,
        ..Default::default()
    };
    let r = grad_check_with(f, std::slice::from_ref(&x), naive).unwrap();
    assert!(r.max_rel_error > 0.1, "{r:?}");
    assert_eq!(r.worst.unwrap().index, 0);

    let r = grad_check_with(
        f,
        &[x],
        GradCheckOptions {
            eps: 1e-5,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!((r.checked, r.skipped), (2, 1));
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn branch_signature_tracks_piecewise_choices() {
    let sig = |v: [f64; 4]| {
        let mut g = Graph::<f64>::new();
        g.set_track_branches(true);
        let x = g.constant(Tensor::from_f64([1, 1, 2, 2], &v).unwrap());
        let y = g.affine(x, 2.0, 1.0).unwrap();
        let m = g.max_pool2d(y, 2).unwrap();
        g.relu(m).unwrap();
        g.branch_signature().unwrap()
    };
    assert_eq!(sig([0.1, 0.2, 0.3, 0.4]), sig([0.1, 0.25, 0.3, 0.45]));
    assert_ne!(sig([0.1, 0.2, 0.3, 0.4]), sig([0.5, 0.2, 0.3, 0.4]));
    assert_ne!(sig([-1.0, -1.0, -1.0, -0.6]), sig([-1.0, -1.0, -1.0, -0.4]));
    assert!(Graph::<f64>::new().branch_signature().is_none());
}
