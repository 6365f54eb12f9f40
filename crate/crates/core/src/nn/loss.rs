use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    if logits.shape().len() != 2 {
        return Err(Error::shape("loss", format!("logits must be (batch, classes), got {:?}", logits.shape())));
    }
    let classes = logits.shape()[1];
    if labels.len() != logits.batch() {
        return Err(Error::shape(
            "loss",
            format!("{} labels for a batch of {}", labels.len(), logits.batch()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(classes)
}

/// Row-wise softmax.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let n = logits.sample_len();
    for row in out.data_mut().chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// `-log softmax(row)[label]`, accurate even when the label's probability is near 1.
fn row_nll(row: &[f64], label: usize) -> f64 {
    let (arg, m) = row
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != arg)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    rest.ln_1p() - (row[label] - m)
}

/// Mean categorical cross-entropy of `logits` (batch, classes) against `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let n = logits.sample_len();
    let total: f64 = logits
        .data()
        .chunks(n)
        .zip(labels)
        .map(|(row, &l)| row_nll(row, l))
        .sum();
    Ok(total / labels.len() as f64)
}

/// Loss and its gradient w.r.t. the logits, `(softmax - onehot) / batch`.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let loss = cross_entropy(logits, labels)?;
    let mut grad = softmax(logits);
    let n = logits.sample_len();
    let scale = 1.0 / labels.len() as f64;
    for (row, &l) in grad.data_mut().chunks_mut(n).zip(labels) {
        row[l] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok((loss, grad))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let t = Tensor::zeros(&[3, 10]);
        let l = cross_entropy(&t, &[0, 4, 9]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let t2 = Tensor::zeros(&[1, 2]);
        assert!((cross_entropy(&t2, &[1]).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_keep_precision() {
        let t = Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
        let l = cross_entropy(&t, &[0]).unwrap();
        // log1p(e^-20)
        assert!((l - 2.061_153_620_314_381e-9).abs() < 1e-20, "{l:e}");
        assert!(l > 0.0);
    }

    #[test]
    fn gradient_at_uniform() {
        let t = Tensor::zeros(&[1, 2]);
        let (_, g) = cross_entropy_grad(&t, &[0]).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn label_out_of_range() {
        let t = Tensor::zeros(&[1, 3]);
        assert!(cross_entropy(&t, &[3]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::new(vec![2, 3], vec![1000.0, -5.0, 3.0, 0.1, 0.2, 0.3]).unwrap();
        let s = softmax(&t);
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
