//! Seeded finite-difference checks over every layer, the latent sampler and
//! KL, and every transfer loss.
//!
//! Each case builds a small random problem from its seed and checks the
//! gradient of a scalar loss w.r.t. all of its inputs and parameters.
//! Derivatives use the five-point stencil, which stays accurate on both tiny
//! and large gradient elements. Inputs to ReLU and max-pool are kept away
//! from kinks and ties so the stencil never straddles one.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::latent::{latent_kl, sample_latent, LatentGaussian, NoiseDraw};
use crate::losses::{at_loss, fitnet_loss, sp_loss, tsl_loss};
use crate::nn::{GradCheck, Layer, LayerSpec, ParamSet, Parameterized};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const CASES: [&str; 16] = [
    "dense",
    "conv2d",
    "conv2d_strided",
    "batch_norm",
    "relu",
    "max_pool",
    "avg_pool",
    "flatten",
    "latent_sample",
    "latent_kl",
    "softmax_ce",
    "tsl",
    "tsl_combined",
    "fitnet",
    "at",
    "sp",
];

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error < self.tolerance)
    }

    /// Worst case per name, in [`CASES`] order.
    pub fn worst_by_case(&self) -> Vec<(&'static str, f64)> {
        CASES
            .iter()
            .filter_map(|&n| {
                let errs = self.cases.iter().filter(|c| c.name == n).map(|c| c.max_rel_error);
                errs.clone().next().map(|_| (n, errs.fold(0.0, f64::max)))
            })
            .collect()
    }
}

/// Runs every case for each seed.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>, tolerance: f64) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for seed in seeds {
        for name in CASES {
            cases.push(CaseResult { name, seed, max_rel_error: check_case(name, seed, tolerance)? });
        }
    }
    Ok(SuiteReport { tolerance, cases })
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches")
}

fn param(t: Tensor) -> Tensor {
    Tensor::parameter(t.shape().to_vec(), t.data().to_vec()).expect("shape matches")
}

/// Values bounded away from zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (0.05 + rng.gen::<f64>()) * if rng.gen() { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Distinct values at least 0.04 apart.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let data = ranks.iter().map(|&r| r as f64 * 0.05 - 1.0 + rng.gen::<f64>() * 0.01).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn probs(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let row: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.05).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![rows, k], data).expect("shape matches")
}

/// A layer together with its input, both checked.
struct LayerCase {
    x: Tensor,
    layer: Layer,
    /// Random projection turning the output into a scalar.
    proj: Tensor,
}

impl Parameterized for LayerCase {
    fn parameters(&self) -> Vec<&Tensor> {
        std::iter::once(&self.x).chain(self.layer.params()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.x).chain(self.layer.params_mut()).collect()
    }
}

fn layer_case(spec: LayerSpec, x: Tensor, rng: &mut ChaCha8Rng, seed: u64) -> Result<LayerCase> {
    let (mut layer, out_shape) = Layer::build(&spec, &x.shape()[1..], seed, 0)?;
    for p in layer.params_mut() {
        let noisy = normal(rng, p.shape());
        p.data_mut().iter_mut().zip(noisy.data()).for_each(|(v, n)| *v += 0.5 * n);
    }
    let mut proj_shape = vec![x.shape()[0]];
    proj_shape.extend(out_shape);
    Ok(LayerCase { proj: normal(rng, &proj_shape), x: param(x), layer })
}

fn project(tape: &mut Tape, out: Var, proj: &Tensor) -> Result<Var> {
    let p = tape.constant(proj.clone());
    let prod = tape.mul(out, p)?;
    Ok(tape.sum(prod))
}

fn check_layer(gc: &GradCheck, mut case: LayerCase) -> Result<f64> {
    let report = gc.run(&mut case, |c, tape| {
        let x = tape.param(&c.x);
        let out = c.layer.forward(tape, x, true)?;
        let loss = project(tape, out.out, &c.proj)?;
        Ok((loss, std::iter::once(Some(x)).chain(out.params.into_iter().map(Some)).collect()))
    })?;
    Ok(report.max_rel_error())
}

/// Checks `loss(inputs[0])` where the remaining inputs are constants.
fn check_inputs<F>(gc: &GradCheck, inputs: Vec<Tensor>, mut loss: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut set = ParamSet(inputs.into_iter().map(param).collect());
    let report = gc.run(&mut set, |s, tape| {
        let vars: Vec<Var> = s.0.iter().map(|t| tape.param(t)).collect();
        let l = loss(tape, &vars)?;
        Ok((l, vars.into_iter().map(Some).collect()))
    })?;
    Ok(report.max_rel_error())
}

/// Maximum relative gradient error of one case.
pub fn check_case(name: &str, seed: u64, tolerance: f64) -> Result<f64> {
    let gc = GradCheck { step: 1e-4, five_point: true, ..GradCheck::new(tolerance) };
    let mut rng = rng_for(seed, &[0x9c4d, CASES.iter().position(|&c| c == name).unwrap_or(usize::MAX) as u64]);
    let rng = &mut rng;
    match name {
        "dense" => {
            let x = normal(rng, &[3, 5]);
            check_layer(&gc, layer_case(LayerSpec::Dense { units: 4 }, x, rng, seed)?)
        }
        "conv2d" | "conv2d_strided" => {
            let stride = if name == "conv2d" { 1 } else { 2 };
            let x = normal(rng, &[2, 2, 5, 5]);
            let spec = LayerSpec::Conv2d { filters: 3, kernel: 3, stride, padding: 1 };
            check_layer(&gc, layer_case(spec, x, rng, seed)?)
        }
        "batch_norm" => {
            let x = normal(rng, &[4, 3, 2, 2]);
            check_layer(&gc, layer_case(LayerSpec::batch_norm(), x, rng, seed)?)
        }
        "relu" => {
            let x = off_zero(rng, &[3, 2, 3, 3]);
            check_layer(&gc, layer_case(LayerSpec::Relu, x, rng, seed)?)
        }
        "max_pool" => {
            let x = spread(rng, &[2, 2, 4, 4]);
            check_layer(&gc, layer_case(LayerSpec::MaxPool { size: 2, stride: 2 }, x, rng, seed)?)
        }
        "avg_pool" => {
            let x = normal(rng, &[2, 2, 4, 4]);
            check_layer(&gc, layer_case(LayerSpec::AvgPool { size: 2, stride: 2 }, x, rng, seed)?)
        }
        "flatten" => {
            let x = normal(rng, &[2, 2, 3, 3]);
            check_layer(&gc, layer_case(LayerSpec::Flatten, x, rng, seed)?)
        }
        "latent_sample" => {
            let shape = [3, 2, 2, 2];
            let sigma = rng.gen_range(0.1..1.0);
            let noise = NoiseDraw::fixed(normal(rng, &shape));
            let proj = normal(rng, &shape);
            check_inputs(&gc, vec![normal(rng, &shape)], |tape, v| {
                let z = sample_latent(tape, &LatentGaussian::new(v[0], sigma)?, &noise)?;
                project(tape, z, &proj)
            })
        }
        "latent_kl" => {
            let shape = [3, 2, 2, 2];
            let mu_s = normal(rng, &shape);
            let sigma = rng.gen_range(0.2..2.0);
            check_inputs(&gc, vec![normal(rng, &shape)], |tape, v| latent_kl(tape, v[0], &mu_s, sigma))
        }
        "softmax_ce" => {
            let labels = probs(rng, 4, 5);
            check_inputs(&gc, vec![normal(rng, &[4, 5])], |tape, v| tape.softmax_cross_entropy(v[0], &labels))
        }
        "tsl" => {
            let teacher = normal(rng, &[4, 5]);
            let t = rng.gen_range(0.5..4.0);
            check_inputs(&gc, vec![normal(rng, &[4, 5])], |tape, v| tsl_loss(tape, v[0], &teacher, t))
        }
        "tsl_combined" => {
            let teacher = normal(rng, &[4, 5]);
            let labels = probs(rng, 4, 5);
            check_inputs(&gc, vec![normal(rng, &[4, 5])], |tape, v| {
                let ce = tape.softmax_cross_entropy(v[0], &labels)?;
                let tsl = tsl_loss(tape, v[0], &teacher, 1.0)?;
                tape.weighted_sum(&[(tsl, 0.9), (ce, 0.1)])
            })
        }
        "fitnet" => {
            let teacher = normal(rng, &[3, 2, 2, 2]);
            check_inputs(&gc, vec![normal(rng, &[3, 2, 2, 2])], |tape, v| fitnet_loss(tape, v[0], &teacher))
        }
        "at" => {
            let teacher = normal(rng, &[3, 2, 3, 3]);
            check_inputs(&gc, vec![normal(rng, &[3, 2, 3, 3])], |tape, v| at_loss(tape, v[0], &teacher))
        }
        "sp" => {
            let teacher = normal(rng, &[4, 5]);
            check_inputs(&gc, vec![normal(rng, &[4, 6])], |tape, v| sp_loss(tape, v[0], &teacher))
        }
        _ => Err(crate::error::Error::Usage(format!("unknown gradient case '{name}'"))),
    }
}
