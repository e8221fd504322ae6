use lsenet_tensor::{Graph, Pad2d, PadMode, Tensor};
use proptest::prelude::*;

fn tensor_strategy(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-10.0f64..10.0, n)
        .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn map4() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..3, 1usize..4, 1usize..8, 1usize..8)
        .prop_flat_map(|(b, c, h, w)| tensor_strategy(vec![b, c, h, w]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pad_crop_round_trip(x in map4(), t in 0usize..4, b in 0usize..4, l in 0usize..4, r in 0usize..4) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let amounts = Pad2d::new(t, b, l, r);
        let p = g.pad_crop(v, amounts, PadMode::PadZero).unwrap();
        let c = g.pad_crop(p, amounts, PadMode::Crop).unwrap();
        prop_assert_eq!(g.value(c), &x);
    }

    #[test]
    fn softmax_rows_are_distributions(x in (1usize..4, 1usize..9).prop_flat_map(|(r, l)| tensor_strategy(vec![r, l]))) {
        let mut g = Graph::new();
        let v = g.constant(x.map(|e| e * 50.0));
        let y = g.softmax_lastdim(v).unwrap();
        let l = *x.shape().last().unwrap();
        for row in g.value(y).data().chunks(l) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn conv_is_linear(
        (x, y, k) in (1usize..3, 1usize..6, 3usize..8).prop_flat_map(|(c, h, w)| (
            tensor_strategy(vec![1, c, h + 2, w]),
            tensor_strategy(vec![1, c, h + 2, w]),
            tensor_strategy(vec![2, c, 3, 3]),
        )),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let mut g = Graph::new();
        let (xv, yv, kv) = (g.constant(x), g.constant(y), g.constant(k));
        let ax = g.scale(xv, a).unwrap();
        let by = g.scale(yv, b).unwrap();
        let mix = g.add(ax, by).unwrap();
        let lhs = g.conv2d(mix, kv, None, 1, 1).unwrap();
        let cx = g.conv2d(xv, kv, None, 1, 1).unwrap();
        let cy = g.conv2d(yv, kv, None, 1, 1).unwrap();
        let acx = g.scale(cx, a).unwrap();
        let bcy = g.scale(cy, b).unwrap();
        let rhs = g.add(acx, bcy).unwrap();
        prop_assert!(g.value(lhs).max_abs_diff(g.value(rhs)) < 1e-10);
    }

    #[test]
    fn group_norm_standardizes(x in (1usize..3, 2usize..6, 2usize..6).prop_flat_map(|(b, h, w)| tensor_strategy(vec![b, 4, h, w]))) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let ga = g.constant(Tensor::ones([4]));
        let be = g.constant(Tensor::zeros([4]));
        let y = g.group_norm(v, 2, ga, be, 1e-10).unwrap();
        let slab = 2 * x.shape()[2] * x.shape()[3];
        for (src, out) in x.data().chunks(slab).zip(g.value(y).data().chunks(slab)) {
            let m: f64 = src.iter().sum::<f64>() / slab as f64;
            let var: f64 = src.iter().map(|v| (v - m).powi(2)).sum::<f64>() / slab as f64;
            prop_assume!(var > 1e-3);
            let mo: f64 = out.iter().sum::<f64>() / slab as f64;
            let vo: f64 = out.iter().map(|v| (v - mo).powi(2)).sum::<f64>() / slab as f64;
            prop_assert!(mo.abs() < 1e-6);
            prop_assert!((vo - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn conv_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn([1, 1, 3, 3], |i| i as f64 * 1.5 - 2.0));
    let k = g.constant(Tensor::ones([1, 1, 1, 1]));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let x = g.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let k = g.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[5.0]);
}

#[test]
fn eleven_by_eleven_preserves_size() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 1, 224, 224]));
    let k = g.constant(Tensor::zeros([1, 1, 11, 11]));
    let y = g.conv2d(x, k, None, 1, 5).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 224, 224]);
}

#[test]
fn matmul_identity_and_batching() {
    let mut g = Graph::<f64>::new();
    let a = Tensor::from_fn([3, 3], |i| (i as f64).sin());
    let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let av = g.constant(a.clone());
    let ev = g.constant(eye);
    let p = g.matmul(av, ev).unwrap();
    assert_eq!(g.value(p), &a);

    let lhs = Tensor::from_fn([2, 2, 2], |i| i as f64 - 3.0);
    let rhs = Tensor::from_fn([2, 2, 2], |i| (i * i) as f64 * 0.5);
    let (l, r) = (g.constant(lhs.clone()), g.constant(rhs.clone()));
    let bm = g.matmul(l, r).unwrap();
    let batched = g.value(bm).clone();
    for i in 0..2 {
        let li = g.constant(Tensor::new([2, 2], lhs.data()[i * 4..][..4].to_vec()).unwrap());
        let ri = g.constant(Tensor::new([2, 2], rhs.data()[i * 4..][..4].to_vec()).unwrap());
        let single = g.matmul(li, ri).unwrap();
        assert_eq!(g.value(single).data(), &batched.data()[i * 4..][..4]);
    }
}
