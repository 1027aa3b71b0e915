use proptest::prelude::*;
use shiftser::autograd::Graph;
use shiftser::data::{assign_folds, decode, encode, Dataset, FeatureSequence};
use shiftser::shift::{temporal_shift, Direction, Placement, ShiftConfig, ShiftPlan};
use shiftser::tensor::Tensor;
use shiftser::train::{
    adam_step, compute_metrics, cosine_warmup_lr, AdamHyper, AdamState, Confusion, OptimizerKind,
};

const ALPHAS: [f64; 4] = [0.5, 0.25, 0.125, 0.0625];

/// `(B, T, C, alpha, direction)` with at least one shifted channel.
fn shift_case() -> impl Strategy<Value = (usize, usize, usize, f64, Direction)> {
    (1usize..3, 1usize..7, 1usize..17, 0usize..4, any::<bool>())
        .prop_map(|(b, t, c, a, bi)| {
            let dir = if bi {
                Direction::Bidirectional
            } else {
                Direction::Unidirectional
            };
            (b, t, c, ALPHAS[a], dir)
        })
        .prop_filter("at least one shifted channel", |(_, _, c, a, _)| (a * *c as f64) >= 1.0)
}

fn small_ints(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50i32..50, n).prop_map(|v| v.into_iter().map(f64::from).collect())
}

fn cfg(alpha: f64, direction: Direction) -> ShiftConfig {
    ShiftConfig::new(alpha, direction, Placement::InPlace)
}

proptest! {
    #[test]
    fn shift_is_linear(
        (b, t, c, alpha, dir) in shift_case(),
        seed in any::<u64>(),
        (ka, kb) in (-4.0f64..4.0, -4.0f64..4.0),
    ) {
        let mut rng = shiftser::rng::substream(seed, shiftser::rng::Stream::Datagen, 0);
        let x = shiftser::blocks::random_features::<f64>([1, b, t, c], &mut rng).reshape(&[b, t, c]).unwrap();
        let y = shiftser::blocks::random_features::<f64>([1, b, t, c], &mut rng).reshape(&[b, t, c]).unwrap();
        let combo = Tensor::new(&[b, t, c], x.data().iter().zip(y.data()).map(|(p, q)| ka * p + kb * q).collect()).unwrap();
        let cfg = cfg(alpha, dir);
        let (sx, sy) = (temporal_shift(&x, &cfg).unwrap(), temporal_shift(&y, &cfg).unwrap());
        let lhs = temporal_shift(&combo, &cfg).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(sx.data()).zip(sy.data()) {
            prop_assert_eq!(*l, ka * p + kb * q);
        }
    }

    #[test]
    fn shift_locality_and_untouched_channels((b, t, c, alpha, dir) in shift_case(), seed in any::<u64>()) {
        let mut rng = shiftser::rng::substream(seed, shiftser::rng::Stream::Datagen, 0);
        let x = shiftser::blocks::random_features::<f32>([1, b, t, c], &mut rng).reshape(&[b, t, c]).unwrap();
        let cfg = cfg(alpha, dir);
        let plan = ShiftPlan::new(&cfg, c).unwrap();
        let y = temporal_shift(&x, &cfg).unwrap();
        for bb in 0..b {
            for tt in 0..t {
                for cc in 0..c {
                    let out = y.at3(bb, tt, cc);
                    if plan.forward_channels().contains(&cc) {
                        prop_assert_eq!(out, if tt > 0 { x.at3(bb, tt - 1, cc) } else { 0.0 });
                    } else if plan.backward_channels().contains(&cc) {
                        prop_assert_eq!(out, if tt + 1 < t { x.at3(bb, tt + 1, cc) } else { 0.0 });
                    } else {
                        prop_assert_eq!(out.to_bits(), x.at3(bb, tt, cc).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn shift_mass_balance((b, t, c, alpha, dir) in shift_case(), values in small_ints(2 * 6 * 16)) {
        let x = Tensor::new(&[b, t, c], values[..b * t * c].to_vec()).unwrap();
        let cfg = cfg(alpha, dir);
        let plan = ShiftPlan::new(&cfg, c).unwrap();
        let y = temporal_shift(&x, &cfg).unwrap();
        let mut dropped = 0.0;
        for bb in 0..b {
            for cc in plan.forward_channels() {
                dropped += x.at3(bb, t - 1, cc);
            }
            for cc in plan.backward_channels() {
                dropped += x.at3(bb, 0, cc);
            }
        }
        let total = |v: &Tensor<f64>| v.data().iter().sum::<f64>();
        prop_assert_eq!(total(&y), total(&x) - dropped);
    }

    #[test]
    fn shift_backward_is_transpose((b, t, c, alpha, dir) in shift_case(), values in small_ints(2 * 2 * 6 * 16)) {
        let n = b * t * c;
        let x = Tensor::new(&[b, t, c], values[..n].to_vec()).unwrap();
        let w = Tensor::new(&[b, t, c], values[n..2 * n].to_vec()).unwrap();
        let cfg = cfg(alpha, dir);
        let mut g = Graph::<f64>::new();
        let xv = g.param(x.clone());
        let wv = g.constant(w.clone());
        let y = g.temporal_shift(xv, &cfg).unwrap();
        let prod = g.mul(y, wv).unwrap();
        let s = g.sum(prod).unwrap();
        let forward = g.value(s).data()[0];
        g.backward(s).unwrap();
        let grad = g.grad(xv).unwrap();
        let adjoint: f64 = grad.data().iter().zip(x.data()).map(|(p, q)| p * q).sum();
        prop_assert_eq!(forward, adjoint);
    }

    #[test]
    fn zero_in_zero_out((b, t, c, alpha, dir) in shift_case()) {
        let y = temporal_shift(&Tensor::<f32>::zeros(&[b, t, c]), &cfg(alpha, dir)).unwrap();
        prop_assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..30.0) {
        let mut rng = shiftser::rng::substream(seed, shiftser::rng::Stream::Datagen, 0);
        let x = shiftser::blocks::random_features::<f64>([1, 1, rows, cols], &mut rng)
            .map(|v| v * scale)
            .reshape(&[rows, cols])
            .unwrap();
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let p = g.softmax(xv, 1).unwrap();
        for row in g.value(p).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..5, cols in 2usize..17, seed in any::<u64>(), shift in -100.0f64..100.0) {
        let mut rng = shiftser::rng::substream(seed, shiftser::rng::Stream::Datagen, 0);
        let x = shiftser::blocks::random_features::<f64>([1, 1, rows, cols], &mut rng)
            .map(|v| 3.0 * v + shift)
            .reshape(&[1, rows, cols])
            .unwrap();
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(Tensor::full(&[cols], 1.0));
        let beta = g.constant(Tensor::zeros(&[cols]));
        let y = g.layer_norm(xv, gamma, beta, 1e-5).unwrap();
        for (yr, xr) in g.value(y).data().chunks(cols).zip(x.data().chunks(cols)) {
            let n = cols as f64;
            let mean = yr.iter().sum::<f64>() / n;
            let var = yr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let xm = xr.iter().sum::<f64>() / n;
            let xvar = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - xvar / (xvar + 1e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn metrics_are_bounded(classes in 2usize..7, cells in prop::collection::vec(0u64..40, 36)) {
        let rows: Vec<Vec<u64>> = (0..classes).map(|i| cells[i * 6..i * 6 + classes].to_vec()).collect();
        let m = compute_metrics(&Confusion::from_rows(&rows).unwrap());
        prop_assert!((0.0..=1.0).contains(&m.ua));
        prop_assert!((0.0..=1.0).contains(&m.wa));
    }

    #[test]
    fn equal_support_equal_recall_gives_ua_eq_wa(classes in 2usize..6, support in 1u64..30, hits_frac in 0.0f64..=1.0) {
        let hits = (support as f64 * hits_frac).floor() as u64;
        let rows: Vec<Vec<u64>> = (0..classes)
            .map(|i| {
                let mut r = vec![0; classes];
                r[i] = hits;
                r[(i + 1) % classes] += support - hits;
                r
            })
            .collect();
        let m = compute_metrics(&Confusion::from_rows(&rows).unwrap());
        prop_assert!((m.ua - m.wa).abs() < 1e-15);
    }

    #[test]
    fn fseq_decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn fseq_header_mutations_never_panic(pos in 0usize..36, byte in any::<u8>()) {
        let rec = FeatureSequence { label: 1, group: 0, layers: 1, frames: 2, channels: 2, data: vec![1.0, 2.0, 3.0, 4.0] };
        let mut bytes = encode(&Dataset::new(3, vec![rec])).unwrap();
        bytes[pos] = byte;
        if let Ok(ds) = decode(&bytes) {
            prop_assert_eq!(encode(&ds).unwrap(), bytes);
        }
    }

    #[test]
    fn adam_zero_gradient_never_moves(theta in prop::collection::vec(-10.0f64..10.0, 1..8), steps in 1u64..20, lr in 0.0f64..1.0) {
        let mut p = theta.clone();
        let mut s = AdamState::new(p.len());
        let zeros = vec![0.0; p.len()];
        for t in 1..=steps {
            adam_step(&mut p, &zeros, &mut s, t, lr, &AdamHyper::new(OptimizerKind::Adam, 0.1));
        }
        prop_assert_eq!(p, theta);
    }

    #[test]
    fn adamw_zero_gradient_only_decays(theta in -10.0f64..10.0, lr in 0.0f64..1.0, wd in 0.0f64..0.5) {
        let mut p = [theta];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.0], &mut s, 1, lr, &AdamHyper::new(OptimizerKind::AdamW, wd));
        prop_assert!((p[0] - theta * (1.0 - lr * wd)).abs() <= 1e-12 * theta.abs().max(1.0));
    }

    #[test]
    fn schedule_is_continuous_at_warmup(warmup in 1usize..50, extra in 1usize..500, peak in 1e-5f64..1e-2, floor in 0.0f64..1.0) {
        let total = warmup + extra;
        let at = cosine_warmup_lr(warmup, total, warmup, peak, floor);
        prop_assert!((at - peak).abs() < 1e-15);
        let before = cosine_warmup_lr(warmup - 1, total, warmup, peak, floor);
        prop_assert!(before < peak && peak - before <= peak / warmup as f64 + 1e-15);
        for step in 0..=total {
            let lr = cosine_warmup_lr(step, total, warmup, peak, floor);
            prop_assert!(lr >= 0.0 && lr <= peak * (1.0 + 1e-12));
        }
    }

    #[test]
    fn folds_partition_records(groups in prop::collection::vec(0u32..5, 10..60)) {
        prop_assume!((0..5).all(|g| groups.contains(&g)));
        let records: Vec<FeatureSequence> = groups
            .iter()
            .map(|&g| FeatureSequence { label: 0, group: g, layers: 1, frames: 1, channels: 1, data: vec![0.0] })
            .collect();
        let folds = assign_folds(&records, 5).unwrap();
        let mut seen = vec![0; records.len()];
        for f in &folds {
            for &i in &f.test {
                seen[i] += 1;
                prop_assert_eq!(records[i].group, f.test_group);
            }
            prop_assert_eq!(f.test.len() + f.train.len(), records.len());
            prop_assert!(f.train.iter().all(|&i| records[i].group != f.test_group));
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }
}
