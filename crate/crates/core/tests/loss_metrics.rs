use lsenet::loss::{bce_loss, combined_loss, combined_loss_from_logits, dice_loss};
use lsenet::metrics::{
    aggregate, confusion_counts, metrics_csv, metrics_from_counts, MetricReport, MetricRow,
    THRESHOLD,
};
use lsenet_tensor::{grad_check, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact fraction, reduced, for the brute-force oracle.
#[derive(Clone, Copy)]
struct Frac(i128, i128);

impl Frac {
    fn new(n: i128, d: i128) -> Self {
        fn gcd(a: i128, b: i128) -> i128 {
            if b == 0 {
                a.abs()
            } else {
                gcd(b, a % b)
            }
        }
        let g = gcd(n, d).max(1);
        let s = if d < 0 { -1 } else { 1 };
        Frac(s * n / g, s * d / g)
    }
    fn sub(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1 - o.0 * self.1, self.1 * o.1)
    }
    fn div(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1, self.1 * o.0)
    }
    fn f(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

/// Metrics from set definitions over individual pixels.
fn oracle(pred: &[f64], target: &[f64]) -> [f64; 6] {
    let p: Vec<bool> = pred.iter().map(|&v| v >= 0.5).collect();
    let t: Vec<bool> = target.iter().map(|&v| v == 1.0).collect();
    let n = p.len() as i128;
    let count = |f: &dyn Fn(usize) -> bool| (0..p.len()).filter(|&i| f(i)).count() as i128;
    let both = count(&|i| p[i] && t[i]);
    let pred_pos = count(&|i| p[i]);
    let true_pos = count(&|i| t[i]);
    let agree = count(&|i| p[i] == t[i]);
    let neither = count(&|i| !p[i] && !t[i]);
    let false_alarm = count(&|i| p[i] && !t[i]);
    let ratio = |a: i128, b: i128, empty: f64| if b == 0 { empty } else { Frac::new(a, b).f() };
    let po = Frac::new(agree, n);
    let pe = Frac::new(pred_pos * true_pos + (n - pred_pos) * (n - true_pos), n * n);
    let one_minus_pe = Frac::new(1, 1).sub(pe);
    let kappa = if one_minus_pe.0 == 0 {
        1.0
    } else {
        po.sub(pe).div(one_minus_pe).f()
    };
    [
        ratio(2 * both, pred_pos + true_pos, 1.0),
        ratio(both, true_pos, 1.0),
        ratio(neither, n - true_pos, 1.0),
        ratio(agree, n, 1.0),
        ratio(false_alarm, pred_pos, 0.0),
        kappa,
    ]
}

#[test]
fn metrics_match_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let n = 32 * 32;
        let (pred, target): (Vec<f64>, Vec<f64>) = match trial {
            0 => (vec![0.0; n], vec![0.0; n]),
            1 => (vec![1.0; n], vec![1.0; n]),
            2 => (vec![0.0; n], vec![1.0; n]),
            3 => (vec![1.0; n], vec![0.0; n]),
            _ => {
                let density = rng.random_range(0.0..1.0);
                let target = (0..n)
                    .map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 })
                    .collect();
                let pred = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                (pred, target)
            }
        };
        let c = confusion_counts(&pred, &target, THRESHOLD).unwrap();
        let got = metrics_from_counts(c).unwrap().values();
        assert_eq!(got, oracle(&pred, &target), "trial {trial}");
    }
}

#[test]
fn aggregate_row_recomputes_from_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<MetricRow> = (0..7)
        .map(|i| MetricRow {
            dataset: "synth".into(),
            sample: format!("s{i}"),
            report: MetricReport::from_values(std::array::from_fn(|_| rng.random_range(0.0..1.0))),
        })
        .collect();
    let reports: Vec<_> = rows.iter().map(|r| r.report).collect();
    let (mean, sd) = aggregate(&reports).unwrap();
    for k in 0..6 {
        let xs: Vec<f64> = reports.iter().map(|r| r.values()[k]).collect();
        let m = xs.iter().sum::<f64>() / 7.0;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 6.0;
        assert!((mean.values()[k] - m).abs() < 1e-12);
        assert!((sd.values()[k] - v.sqrt()).abs() < 1e-12);
    }
    let csv = metrics_csv(&rows).unwrap();
    let last = csv.lines().last().unwrap();
    assert_eq!(
        last.split(',').nth(2).unwrap(),
        format!("{:.4}±{:.4}", mean.dice, sd.dice)
    );
}

fn scalar(
    f: impl Fn(
        &mut Graph<f64>,
        lsenet_tensor::Var,
        lsenet_tensor::Var,
    ) -> lsenet::Result<lsenet_tensor::Var>,
    p: &[f64],
    t: &[f64],
) -> f64 {
    let mut g = Graph::new();
    let pv = g.constant(Tensor::from_f64([p.len()], p).unwrap());
    let tv = g.constant(Tensor::from_f64([t.len()], t).unwrap());
    let l = f(&mut g, pv, tv).unwrap();
    g.value(l).item()
}

#[test]
fn loss_anchors() {
    assert!(scalar(dice_loss, &[1.0, 0.0, 1.0, 1.0], &[1.0, 0.0, 1.0, 1.0]).abs() < 1e-6);
    assert!((scalar(bce_loss, &[0.5], &[1.0]) - 2f64.ln()).abs() < 1e-9);
}

#[test]
fn combined_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = Tensor::from_fn(
        [2, 1, 4, 4],
        |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 },
    );
    let logits = Tensor::from_fn([2, 1, 4, 4], |_| rng.random_range(-2.0..2.0));
    let probs = Tensor::from_fn([2, 1, 4, 4], |_| rng.random_range(0.05..0.95));
    for from_logits in [true, false] {
        let t = target.clone();
        let report = grad_check(
            |g, v| {
                let tv = g.constant(t.clone());
                let l = if from_logits {
                    combined_loss_from_logits(g, v[0], tv)
                } else {
                    combined_loss(g, v[0], tv)
                };
                l.map_err(|e| match e {
                    lsenet::LsenetError::Tensor(t) => t,
                    other => panic!("{other}"),
                })
            },
            &[if from_logits {
                logits.clone()
            } else {
                probs.clone()
            }],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}

fn pair(len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(0.0f64..=1.0, len),
        prop::collection::vec(prop::bool::ANY, len),
    )
        .prop_map(|(p, t)| {
            (
                p,
                t.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
            )
        })
}

proptest! {
    #[test]
    fn metric_ranges((p, t) in (1usize..200).prop_flat_map(pair)) {
        let r = metrics_from_counts(confusion_counts(&p, &t, THRESHOLD).unwrap()).unwrap();
        for v in &r.values()[..5] {
            prop_assert!((0.0..=1.0).contains(v));
        }
        prop_assert!((-1.0..=1.0).contains(&r.kappa));
    }

    #[test]
    fn dice_is_symmetric_for_binary_maps((p, t) in (1usize..200).prop_flat_map(pair)) {
        let pb: Vec<f64> = p.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        let a = metrics_from_counts(confusion_counts(&pb, &t, THRESHOLD).unwrap()).unwrap();
        let b = metrics_from_counts(confusion_counts(&t, &pb, THRESHOLD).unwrap()).unwrap();
        prop_assert_eq!(a.dice, b.dice);
        prop_assert_eq!(a.kappa, b.kappa);
        prop_assert!((a.sensitivity - (1.0 - b.fdr)).abs() < 1e-12);
    }

    #[test]
    fn losses_are_bounded((p, t) in (1usize..64).prop_flat_map(pair)) {
        let bce = scalar(bce_loss, &p, &t);
        let dice = scalar(dice_loss, &p, &t);
        prop_assert!(bce >= 0.0 && bce.is_finite());
        prop_assert!((0.0..=1.0).contains(&dice));
        let flipped_p: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        let flipped_t: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        prop_assert!((scalar(bce_loss, &flipped_p, &flipped_t) - bce).abs() < 1e-9);
    }
}
