use ltk::autodiff::Tape;
use ltk::data::{one_hot, PairedBatch};
use ltk::gradsuite::{check_case, run_suite, CASES};
use ltk::latent::{NoiseDraw, NoiseSeed};
use ltk::losses::{transfer_step, TransferConfig, TransferMethod};
use ltk::nn::{grad_check, ArchSpec, ConvBlock, GradCheck, ParamSet, SplitModel};
use ltk::seed::rng_for;
use ltk::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn randn(seed: u64, tag: u64, shape: &[usize]) -> Tensor {
    let mut rng = rng_for(seed, &[tag]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn as_param(t: Tensor) -> Tensor {
    Tensor::parameter(t.shape().to_vec(), t.data().to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_case_matches_finite_differences(seed in any::<u64>()) {
        for name in CASES {
            let err = check_case(name, seed, 1e-4).unwrap();
            prop_assert!(err < 1e-4, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn suite_covers_one_hundred_seeds() {
    let report = run_suite(0..100, 1e-4).unwrap();
    assert_eq!(report.cases.len(), 100 * CASES.len());
    assert!(report.passed(), "{:?}", report.worst_by_case());
}

#[test]
fn three_layer_mlp_matches_central_differences() {
    for seed in 0..10 {
        let mut set = ParamSet(vec![
            as_param(randn(seed, 1, &[5, 6])),
            as_param(randn(seed, 2, &[6])),
            as_param(randn(seed, 3, &[6, 6])),
            as_param(randn(seed, 4, &[6])),
            as_param(randn(seed, 5, &[6, 3])),
            as_param(randn(seed, 6, &[3])),
        ]);
        let x = randn(seed, 7, &[4, 5]);
        let labels = one_hot(&[0, 2, 1, 2], 3);
        let report = grad_check(
            &mut set,
            |s, tape| {
                let vars: Vec<_> = s.0.iter().map(|p| tape.param(p)).collect();
                let mut h = tape.constant(x.clone());
                for (i, pair) in vars.chunks(2).enumerate() {
                    h = tape.dense(h, pair[0], pair[1])?;
                    if i < 2 {
                        h = tape.relu(h);
                    }
                }
                let loss = tape.softmax_cross_entropy(h, &labels)?;
                Ok((loss, vars.into_iter().map(Some).collect()))
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {:e}", report.max_rel_error());
    }
}

#[test]
fn scalar_derivatives() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::parameter(vec![1], vec![3.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[6.0]);

    let mut tape = Tape::new();
    let x = tape.param(&Tensor::parameter(vec![1], vec![-2.0]).unwrap());
    let r = tape.relu(x);
    let loss = tape.sum(r);
    assert_eq!(tape.backward(loss).unwrap().get_or_zeros(x, 1), vec![0.0]);
}

fn tiny_arch() -> ArchSpec {
    ArchSpec {
        input_shape: vec![1, 6, 6],
        blocks: vec![
            ConvBlock { filters: 2, kernel: 3, padding: 1, pool: 2 },
            ConvBlock { filters: 2, kernel: 3, padding: 1, pool: 1 },
        ],
        num_classes: 3,
        latent_block: 1,
    }
}

fn paired(seed: u64) -> PairedBatch {
    let xs = randn(seed, 10, &[4, 1, 6, 6]);
    let xt = randn(seed, 11, &[4, 1, 6, 6]);
    PairedBatch::new(Some(xs), xt, one_hot(&[0, 1, 2, 1], 3), vec![0, 1, 2, 3]).unwrap()
}

#[test]
fn whole_objective_gradients_for_every_method() {
    let mut source = SplitModel::new(&tiny_arch(), 5).unwrap();
    source.freeze();
    for seed in 0..3 {
        let batch = paired(seed);
        let noise = NoiseDraw::generate(NoiseSeed { global: seed, epoch: 0, batch: 0 }, 4, source.latent_shape());
        for method in TransferMethod::ALL {
            for combine in [false, true] {
                let cfg = TransferConfig { method, combine_with_tsl: combine, sigma: 0.7, ..Default::default() };
                let mut target = SplitModel::new(&tiny_arch(), 100 + seed).unwrap();
                let count = target.params().len();
                // Large feature losses make two-point roundoff dominate small elements.
                let report = GradCheck { step: 1e-4, five_point: true, ..GradCheck::new(1e-4) }
                    .run_owned(&mut target, |m| {
                        let g = transfer_step(m, Some(&source), &batch, &cfg, Some(&noise))?;
                        Ok((g.tape, g.total, g.trace.param_vars(count)))
                    })
                    .unwrap();
                assert!(report.passed, "{method} combine={combine} seed {seed}: {:e}", report.max_rel_error());
            }
        }
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let mut model = SplitModel::new(&tiny_arch(), 1).unwrap();
    let batch = paired(0);
    let cfg = TransferConfig::with_method(TransferMethod::None);
    let count = model.params().len();
    let report = GradCheck::new(1e-4)
        .inject_fault(0.1)
        .run_owned(&mut model, |m| {
            let g = transfer_step(m, None, &batch, &cfg, None)?;
            Ok((g.tape, g.total, g.trace.param_vars(count)))
        })
        .unwrap();
    assert!(!report.passed);
}

#[test]
fn latent_gradient_splits_into_likelihood_and_prior_pull() {
    let mut source = SplitModel::new(&tiny_arch(), 5).unwrap();
    source.freeze();
    let target = SplitModel::new(&tiny_arch(), 6).unwrap();
    let batch = paired(3);
    let noise = NoiseDraw::generate(NoiseSeed { global: 3, epoch: 0, batch: 0 }, 4, source.latent_shape());
    let mu_grad = |sigma: f64| {
        let cfg = TransferConfig { sigma, noise_sigma: Some(0.2), ..Default::default() };
        let g = transfer_step(&target, Some(&source), &batch, &cfg, Some(&noise)).unwrap();
        let n = g.tape.value(g.mu).numel();
        (g.tape.backward(g.total).unwrap().get_or_zeros(g.mu, n), g.tape.value(g.mu).clone())
    };
    let sigma = 0.3;
    let (with_prior, mu_t) = mu_grad(sigma);
    let (likelihood_only, _) = mu_grad(1e150);
    let mu_s = source.infer(batch.source().unwrap()).unwrap().0;
    let b = 4.0;
    for i in 0..mu_t.numel() {
        let pull = (mu_t.data()[i] - mu_s.data()[i]) / (b * sigma * sigma);
        assert!((with_prior[i] - likelihood_only[i] - pull).abs() < 1e-10 * (1.0 + pull.abs()));
    }
}
