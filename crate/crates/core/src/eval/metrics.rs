//! Accuracy and intra-class discrepancy.

use crate::data::{stack_features, SceneSample};
use crate::error::{dim_err, Error, Result};
use crate::nn::SplitModel;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    (0..logits.batch())
        .map(|b| {
            let row = logits.row(b);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Usage("accuracy of an empty sample set is undefined".into()));
    }
    if logits.batch() != labels.len() {
        return Err(dim_err(format!("{} logit rows for {} labels", logits.batch(), labels.len())));
    }
    let hits = predict(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Eval-mode logits (`z = mu`) for a sample set.
pub fn logits_for(model: &SplitModel, samples: &[SceneSample]) -> Result<Tensor> {
    let refs: Vec<&SceneSample> = samples.iter().collect();
    Ok(model.infer_batched(&stack_features(&refs)?, EVAL_CHUNK)?.1)
}

pub fn evaluate_accuracy(model: &SplitModel, samples: &[SceneSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("accuracy of an empty sample set is undefined".into()));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    accuracy_from_logits(&logits_for(model, samples)?, &labels)
}

/// `D[i, j] = ||row_i - row_j||_2` over the rows of `outputs`.
pub fn pairwise_l2(outputs: &Tensor) -> Tensor {
    let n = outputs.batch();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = outputs.row(i).iter().zip(outputs.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            d[i * n + j] = dist;
            d[j * n + i] = dist;
        }
    }
    Tensor::new(vec![n, n], d).expect("square")
}

/// Pairwise L2 distances between the pre-softmax outputs of same-class samples.
pub fn intra_class_discrepancy(model: &SplitModel, samples: &[SceneSample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Usage("discrepancy needs at least one sample".into()))?;
    if let Some(s) = samples.iter().find(|s| s.label != first.label) {
        return Err(Error::Validation(format!(
            "discrepancy samples must share one label: sample {} has {} but {} has {}",
            s.sample_id, s.label, first.sample_id, first.label
        )));
    }
    Ok(pairwise_l2(&logits_for(model, samples)?))
}

pub fn mean_off_diagonal(m: &Tensor) -> f64 {
    let n = m.batch();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += m.data()[i * n + j];
            }
        }
    }
    total / (n * (n - 1)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        // Always class 0 on a balanced K=4 set.
        let logits = Tensor::new(vec![4, 4], [[1.0, 0.0, 0.0, 0.0]; 4].concat()).unwrap();
        assert_eq!(accuracy_from_logits(&logits, &[0, 1, 2, 3]).unwrap(), 0.25);
        // Hand-built: rows predict 2, 0 (tie -> lowest), 1.
        let logits = Tensor::new(vec![3, 3], vec![0.1, 0.2, 0.9, 0.5, 0.5, 0.1, -1.0, 3.0, 2.0]).unwrap();
        assert_eq!(predict(&logits), vec![2, 0, 1]);
        assert!((accuracy_from_logits(&logits, &[2, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy_from_logits(&logits, &[2, 0, 1]).unwrap(), 1.0);
        assert!(matches!(accuracy_from_logits(&Tensor::zeros(&[0, 3]), &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn pairwise_metric() {
        let o = Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let d = pairwise_l2(&o);
        assert_eq!(d.data(), &[0.0, 5.0, 5.0, 0.0]);
        assert_eq!(mean_off_diagonal(&d), 5.0);
        let dup = Tensor::new(vec![3, 2], [1.0, 2.0].repeat(3)).unwrap();
        assert!(pairwise_l2(&dup).data().iter().all(|&v| v == 0.0));
    }
}
