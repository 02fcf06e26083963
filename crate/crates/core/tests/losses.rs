use ltk::data::{one_hot, PairedBatch};
use ltk::latent::{latent_kl_value, NoiseDraw, NoiseSeed};
use ltk::losses::{
    at_loss_value, fitnet_loss_value, sp_loss_value, transfer_step, tsl_loss_value, vbkt_loss, TransferConfig,
    TransferMethod,
};
use ltk::nn::{ArchSpec, ConvBlock, LayerSpec, SplitModel};
use ltk::seed::rng_for;
use ltk::train::Sgd;
use ltk::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn randn(seed: u64, tag: u64, shape: &[usize]) -> Tensor {
    let mut rng = rng_for(seed, &[tag]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn scaled(t: &Tensor, a: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| a * v).collect()).unwrap()
}

/// Random `n x n` orthogonal matrix by Gram-Schmidt, row-major.
fn orthogonal(seed: u64, n: usize) -> Vec<f64> {
    let raw = randn(seed, 99, &[n, n]);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut v = raw.row(i).to_vec();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|a| a / norm).collect());
    }
    q.concat()
}

fn matmul(h: &Tensor, r: &[f64]) -> Tensor {
    let (b, m) = (h.shape()[0], h.shape()[1]);
    let mut out = vec![0.0; b * m];
    for i in 0..b {
        for j in 0..m {
            out[i * m + j] = (0..m).map(|k| h.data()[i * m + k] * r[k * m + j]).sum();
        }
    }
    Tensor::new(vec![b, m], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_nonnegative_and_vanish_on_identical_inputs(seed in any::<u64>(), t in 0.5f64..4.0) {
        let (s, te) = (randn(seed, 1, &[3, 5]), randn(seed, 2, &[3, 5]));
        let (fs, ft) = (randn(seed, 3, &[3, 2, 3, 3]), randn(seed, 4, &[3, 2, 3, 3]));
        prop_assert!(tsl_loss_value(&s, &te, t).unwrap() >= 0.0);
        prop_assert!(fitnet_loss_value(&fs, &ft).unwrap() >= 0.0);
        prop_assert!(at_loss_value(&fs, &ft).unwrap() >= 0.0);
        prop_assert!(sp_loss_value(&s, &te).unwrap() >= 0.0);
        prop_assert_eq!(tsl_loss_value(&s, &s, t).unwrap(), 0.0);
        prop_assert_eq!(fitnet_loss_value(&fs, &fs).unwrap(), 0.0);
        prop_assert_eq!(at_loss_value(&fs, &fs).unwrap(), 0.0);
        prop_assert_eq!(sp_loss_value(&s, &s).unwrap(), 0.0);
        prop_assert_eq!(latent_kl_value(&fs, &fs, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn attention_transfer_ignores_positive_scale(seed in any::<u64>(), a in 0.01f64..100.0) {
        let (s, t) = (randn(seed, 1, &[2, 3, 4, 4]), randn(seed, 2, &[2, 3, 4, 4]));
        let base = at_loss_value(&s, &t).unwrap();
        prop_assert!((at_loss_value(&scaled(&s, a), &t).unwrap() - base).abs() < 1e-10 * (1.0 + base));
        prop_assert!((at_loss_value(&s, &scaled(&t, a)).unwrap() - base).abs() < 1e-10 * (1.0 + base));
    }

    #[test]
    fn similarity_preserving_ignores_right_rotation(seed in any::<u64>()) {
        let (s, t) = (randn(seed, 1, &[5, 4]), randn(seed, 2, &[5, 4]));
        let r = orthogonal(seed, 4);
        let base = sp_loss_value(&s, &t).unwrap();
        prop_assert!((sp_loss_value(&matmul(&s, &r), &t).unwrap() - base).abs() < 1e-10);
        prop_assert!((sp_loss_value(&s, &matmul(&t, &r)).unwrap() - base).abs() < 1e-10);
        prop_assert!(sp_loss_value(&matmul(&s, &r), &s).unwrap() < 1e-20);
    }

    #[test]
    fn fitnet_is_scaled_latent_kl(seed in any::<u64>(), sigma in 0.05f64..3.0) {
        let (a, b) = (randn(seed, 1, &[4, 6]), randn(seed, 2, &[4, 6]));
        let fit = fitnet_loss_value(&a, &b).unwrap();
        let kl = latent_kl_value(&a, &b, sigma).unwrap();
        prop_assert!((fit - 2.0 * sigma * sigma * kl).abs() < 1e-12 * fit.max(1.0));
    }
}

/// A model whose latent site is a batch norm straight on the input, so
/// train-mode and eval-mode statistics coincide on a batch with per-feature
/// mean 0 and biased variance 1.
fn bn_first_model(seed: u64) -> SplitModel {
    let specs = [LayerSpec::batch_norm(), LayerSpec::Flatten, LayerSpec::Dense { units: 3 }];
    SplitModel::from_specs(&[2, 1, 2], &specs, 1, 0, seed).unwrap()
}

fn standardized_batch() -> PairedBatch {
    let x = Tensor::new(
        vec![4, 2, 1, 2],
        vec![1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0, -1.0, 1.0],
    )
    .unwrap();
    PairedBatch::new(Some(x.clone()), x, one_hot(&[0, 1, 2, 0], 3), vec![0, 1, 2, 3]).unwrap()
}

#[test]
fn copied_model_on_identical_inputs_has_zero_transfer_terms() {
    let mut source = bn_first_model(3);
    source.freeze();
    let target = source.thawed();
    let batch = standardized_batch();
    let noise = NoiseDraw::zeros(&[4, 2, 1, 2]);
    for method in TransferMethod::ALL {
        for combine in [false, true] {
            let cfg = TransferConfig { method, combine_with_tsl: combine, ..Default::default() };
            let needs = method.needs_source() || combine;
            let g = transfer_step(&target, needs.then_some(&source), &batch, &cfg, Some(&noise)).unwrap();
            let bd = g.breakdown;
            assert_eq!(bd.kl_latent, 0.0, "{method}");
            assert_eq!(bd.aux_term, 0.0, "{method}");
            assert_eq!(bd.tsl_term, 0.0, "{method} combine={combine}");
        }
    }
    let vbkt = vbkt_loss(&target, &source, &batch, &TransferConfig::default(), &noise).unwrap();
    assert_eq!(vbkt.total, vbkt.ce);
}

#[test]
fn kl_term_matches_closed_form_arithmetic() {
    // sigma = 0.2, one pair, ||mu_t - mu_s||^2 = 0.08.
    let mu_t = Tensor::new(vec![1, 2], vec![0.2, 0.2]).unwrap();
    let mu_s = Tensor::zeros(&[1, 2]);
    assert!((latent_kl_value(&mu_t, &mu_s, 0.2).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn every_method_yields_finite_breakdown_and_none_is_ce_only() {
    let arch = ArchSpec {
        input_shape: vec![1, 6, 6],
        blocks: vec![ConvBlock { filters: 2, kernel: 3, padding: 1, pool: 2 }, ConvBlock { filters: 3, kernel: 3, padding: 1, pool: 1 }],
        num_classes: 3,
        latent_block: 1,
    };
    let mut source = SplitModel::new(&arch, 1).unwrap();
    source.freeze();
    let target = SplitModel::new(&arch, 2).unwrap();
    let batch = PairedBatch::new(
        Some(randn(0, 1, &[4, 1, 6, 6])),
        randn(0, 2, &[4, 1, 6, 6]),
        one_hot(&[0, 1, 2, 2], 3),
        vec![0, 1, 2, 3],
    )
    .unwrap();
    let noise = NoiseDraw::generate(NoiseSeed { global: 1, epoch: 0, batch: 0 }, 4, source.latent_shape());
    for method in TransferMethod::ALL {
        let cfg = TransferConfig::with_method(method);
        let bd = transfer_step(&target, Some(&source), &batch, &cfg, Some(&noise)).unwrap().breakdown;
        assert!(bd.is_finite(), "{method}");
        let want = bd.likelihood + cfg.aux_weight * bd.aux_term + bd.kl_latent;
        assert!((bd.total - want).abs() < 1e-12 * want.abs().max(1.0), "{method}");
        if method == TransferMethod::None {
            assert_eq!((bd.total, bd.aux_term, bd.kl_latent, bd.tsl_term), (bd.ce, 0.0, 0.0, 0.0));
        }
    }
}

#[test]
fn one_small_sgd_step_decreases_vbkt_objective() {
    let arch = ArchSpec {
        input_shape: vec![1, 6, 6],
        blocks: vec![ConvBlock { filters: 2, kernel: 3, padding: 1, pool: 2 }, ConvBlock { filters: 2, kernel: 3, padding: 1, pool: 1 }],
        num_classes: 3,
        latent_block: 1,
    };
    for seed in 0..5 {
        let mut source = SplitModel::new(&arch, 10 + seed).unwrap();
        source.freeze();
        let mut target = SplitModel::new(&arch, 20 + seed).unwrap();
        let batch = PairedBatch::new(
            Some(randn(seed, 1, &[6, 1, 6, 6])),
            randn(seed, 2, &[6, 1, 6, 6]),
            one_hot(&[0, 1, 2, 0, 1, 2], 3),
            (0..6).collect(),
        )
        .unwrap();
        let noise = NoiseDraw::generate(NoiseSeed { global: seed, epoch: 0, batch: 0 }, 6, source.latent_shape());
        let cfg = TransferConfig { sigma: 0.2, ..Default::default() };
        let g = transfer_step(&target, Some(&source), &batch, &cfg, Some(&noise)).unwrap();
        let before = g.breakdown.total;
        let grads = g.tape.backward(g.total).unwrap();
        target.accumulate_grads(&g.trace, &grads).unwrap();
        Sgd::new(0.0, 0.0).step(target.params_mut(), 1e-3);
        let after = vbkt_loss(&target, &source, &batch, &cfg, &noise).unwrap().total;
        assert!(after < before, "seed {seed}: {after} >= {before}");
    }
}
