use std::sync::OnceLock;

use ltk::autodiff::kernels::softmax_rows;
use ltk::autodiff::{NormStats, Tape};
use ltk::data::{one_hot, DataConfig, PairedDataset, SceneConfig, SceneSample};
use ltk::eval::{evaluate_accuracy, heatmap_pixels, intra_class_discrepancy, ResultRow, ResultTable};
use ltk::experiment::ExperimentConfig;
use ltk::losses::{TransferConfig, TransferMethod};
use ltk::nn::{checkpoint, SplitModel};
use ltk::seed::rng_for;
use ltk::train::{cosine_restart_lr, initial_target, pretrain_source, train_transfer, MixupConfig, TrainSchedule};
use ltk::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = rng_for(seed, &[0x51]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn small() -> ExperimentConfig {
    ExperimentConfig::small_preset()
}

fn small_data() -> &'static PairedDataset {
    static DATA: OnceLock<PairedDataset> = OnceLock::new();
    DATA.get_or_init(|| PairedDataset::generate(&small().data).unwrap())
}

/// Source model trained on the small preset at lr 1e-3, with its per-epoch mean training CE.
fn pretrained() -> &'static (SplitModel, Vec<f64>) {
    static SOURCE: OnceLock<(SplitModel, Vec<f64>)> = OnceLock::new();
    SOURCE.get_or_init(|| {
        let cfg = small();
        let schedule = TrainSchedule { max_lr: 1e-3, ..cfg.pretrain.clone() };
        let data = small_data();
        let model = SplitModel::new(&cfg.arch, cfg.model_seed()).unwrap();
        let out = pretrain_source(model, &data.source_train, &data.source_test, &schedule, &cfg.pretrain_mixup).unwrap();
        let mut per_epoch = vec![(0.0, 0); schedule.total_epochs];
        for r in &out.history {
            per_epoch[r.epoch].0 += r.loss.ce;
            per_epoch[r.epoch].1 += 1;
        }
        (out.model, per_epoch.into_iter().map(|(s, n)| s / n as f64).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_cross_entropy_is_nonnegative(seed in any::<u64>(), k in 2usize..12, scale in 0.1f64..50.0) {
        let logits = randn(seed, &[4, k]);
        let scaled: Vec<f64> = logits.data().iter().map(|v| v * scale).collect();
        for row in softmax_rows(&scaled, k).chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(vec![4, k], scaled).unwrap());
        let ce = tape.softmax_cross_entropy(l, &one_hot(&[0, 1 % k, k - 1, 0], k)).unwrap();
        prop_assert!(tape.value(ce).data()[0] >= 0.0);
    }

    #[test]
    fn batch_norm_standardizes_each_channel(seed in any::<u64>(), shift in -5.0f64..5.0, spread in 0.1f64..10.0) {
        let raw = randn(seed, &[6, 3, 2, 2]);
        let x = Tensor::new(raw.shape().to_vec(), raw.data().iter().map(|v| shift + spread * v).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (out, _) = tape.batch_norm(xv, g, b, 1e-5, NormStats::Batch).unwrap();
        let y = tape.value(out).data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..6).flat_map(|bi| y[(bi * 3 + c) * 4..][..4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn heatmap_is_order_reversing(seed in any::<u64>()) {
        let raw = randn(seed, &[5, 5]);
        let m = Tensor::new(vec![5, 5], raw.data().iter().map(|v| v.abs()).collect()).unwrap();
        let px = heatmap_pixels(&m).unwrap();
        for i in 0..25 {
            for j in 0..25 {
                if m.data()[i] < m.data()[j] {
                    prop_assert!(px[i] >= px[j]);
                }
            }
        }
        let argmax = (0..25).max_by(|&a, &b| m.data()[a].total_cmp(&m.data()[b])).unwrap();
        prop_assert_eq!(px[argmax], 0);
    }

    #[test]
    fn grand_mean_is_recomputable_from_rows(accs in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
        let mut table = ResultTable::new();
        for (i, a) in accs.iter().enumerate() {
            table.push(ResultRow { method: "m".into(), device: format!("d{}", i % 3), trial: i / 3, accuracy: *a });
        }
        let direct = accs.iter().sum::<f64>() / accs.len() as f64;
        prop_assert!((table.grand_mean("m").unwrap() - direct).abs() < 1e-12);
        let back = ResultTable::from_csv(&table.to_csv()).unwrap();
        let parsed = back.rows().iter().map(|r| r.accuracy).sum::<f64>() / accs.len() as f64;
        prop_assert!((back.grand_mean("m").unwrap() - parsed).abs() < 1e-12);
    }
}

/// Multinomial logistic regression by full-batch gradient descent on
/// flattened features; returns held-out accuracy.
fn linear_probe(train: &[SceneSample], test: &[SceneSample], k: usize) -> f64 {
    let d = train[0].features.numel();
    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let lr = 0.5;
    for _ in 0..200 {
        let mut gw = vec![0.0; d * k];
        let mut gb = vec![0.0; k];
        for s in train {
            let x = s.features.data();
            let logits: Vec<f64> = (0..k).map(|c| b[c] + (0..d).map(|i| x[i] * w[i * k + c]).sum::<f64>()).collect();
            let p = softmax_rows(&logits, k);
            for c in 0..k {
                let e = p[c] - if c == s.label { 1.0 } else { 0.0 };
                gb[c] += e;
                for i in 0..d {
                    gw[i * k + c] += e * x[i];
                }
            }
        }
        let n = train.len() as f64;
        w.iter_mut().zip(&gw).for_each(|(v, g)| *v -= lr * g / n);
        b.iter_mut().zip(&gb).for_each(|(v, g)| *v -= lr * g / n);
    }
    let correct = test
        .iter()
        .filter(|s| {
            let x = s.features.data();
            let score = |c: usize| b[c] + (0..d).map(|i| x[i] * w[i * k + c]).sum::<f64>();
            (0..k).max_by(|&a, &c| score(a).total_cmp(&score(c))).unwrap() == s.label
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn classes_are_linearly_separable() {
    let cfg = DataConfig {
        scene: SceneConfig { noise_std: 0.5, ..SceneConfig::new(3) },
        train_per_class: 200,
        test_per_class: 50,
        target_per_device: 1,
        devices: vec!["b".into()],
        seed: 11,
    };
    let data = PairedDataset::generate(&cfg).unwrap();
    let acc = linear_probe(&data.source_train, &data.source_test, 3);
    assert!(acc > 0.8, "probe accuracy {acc}");
}

#[test]
fn epoch_cross_entropy_falls_through_first_cycle() {
    let (_, ce) = pretrained();
    for w in ce.windows(2) {
        assert!(w[1] <= w[0], "epoch CE rose: {ce:?}");
    }
}

#[test]
fn untrained_model_is_at_chance() {
    let cfg = small();
    let data = small_data();
    let accs: Vec<f64> = (0..10)
        .map(|s| evaluate_accuracy(&SplitModel::new(&cfg.arch, s).unwrap(), &data.source_test).unwrap())
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 1.0 / 3.0).abs() < 0.1, "{accs:?}");
}

#[test]
fn every_method_trains_with_finite_losses_and_exact_lr_trace() {
    let cfg = small();
    let data = small_data();
    let (source, _) = pretrained();
    let schedule = TrainSchedule { total_epochs: 3, cycle_length_epochs: 2, ..cfg.trial_schedule(0) };
    for method in TransferMethod::ALL {
        for combine in [false, true] {
            let tc = TransferConfig { method, combine_with_tsl: combine, ..cfg.transfer.clone() };
            let init = initial_target(source, &tc, 5).unwrap();
            let before = checkpoint::to_bytes(source);
            let out = train_transfer(init, Some(source), data, "b", &tc, &schedule, &MixupConfig::default()).unwrap();
            assert_eq!(checkpoint::to_bytes(source), before, "source changed under {method}");
            let per_epoch = out.history.iter().filter(|r| r.epoch == 0).count();
            for r in &out.history {
                assert!(r.loss.is_finite(), "{method} step {}", r.step);
                assert_eq!(r.lr, cosine_restart_lr(r.step, &schedule, per_epoch));
                if tc.tsl_active() {
                    let want = tc.tsl_weight * r.loss.tsl_term + tc.ce_weight * r.loss.ce;
                    assert!((r.loss.likelihood - want).abs() < 1e-12, "{method} step {}", r.step);
                }
            }
        }
    }
}

#[test]
fn training_is_bit_deterministic() {
    let cfg = small();
    let data = small_data();
    let (source, _) = pretrained();
    let schedule = TrainSchedule { total_epochs: 2, ..cfg.trial_schedule(1) };
    let tc = TransferConfig { method: TransferMethod::Vbkt, ..cfg.transfer.clone() };
    let run = || {
        let init = initial_target(source, &tc, 1).unwrap();
        checkpoint::to_bytes(&train_transfer(init, Some(source), data, "c", &tc, &schedule, &cfg.train_mixup).unwrap().model)
    };
    assert_eq!(run(), run());
}

#[test]
fn discrepancy_matrix_is_a_metric_table() {
    let (source, _) = pretrained();
    let data = small_data();
    let class1: Vec<SceneSample> = data.device("b").unwrap().test.iter().filter(|s| s.label == 1).cloned().collect();
    let d = intra_class_discrepancy(source, &class1).unwrap();
    let n = class1.len();
    for i in 0..n {
        assert_eq!(d.data()[i * n + i], 0.0);
        for j in 0..n {
            assert!((d.data()[i * n + j] - d.data()[j * n + i]).abs() < 1e-9);
        }
    }
    let dup = vec![class1[0].clone(); 30];
    assert!(intra_class_discrepancy(source, &dup).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (source, _) = pretrained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ltk");
    checkpoint::save(source, &path).unwrap();
    let mut back = checkpoint::load(&path).unwrap();
    back.freeze();
    for (a, b) in back.params().iter().zip(source.params()) {
        assert_eq!(a.data(), b.data());
    }
    let x = randn(3, &[4, 1, 40, 64]);
    assert_eq!(back.infer(&x).unwrap(), source.infer(&x).unwrap());
}
