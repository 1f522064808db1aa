use super::{NnError, Tensor};

/// Mean softmax cross-entropy over the batch, and its gradient
/// `(softmax - onehot) / B` w.r.t. the logits.
///
/// Row arithmetic is carried out in `f64` and rounded once at the end.
pub fn loss_and_grad(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor), NnError> {
    let [batch, classes] = logits.shape() else {
        return Err(NnError::Usage(format!(
            "logits must be [B, classes], got {:?}",
            logits.shape()
        )));
    };
    let (batch, classes) = (*batch, *classes);
    if labels.len() != batch {
        return Err(NnError::Usage(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::Label {
            label,
            num_classes: classes,
        });
    }
    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(&[batch, classes]);
    let scale = 1.0 / batch as f64;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_denom = denom.ln();
        total -= row[label] as f64 - max - log_denom;
        let g = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        for (k, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v as f64 - max - log_denom).exp();
            let onehot = if k == label { 1.0 } else { 0.0 };
            *gv = ((p - onehot) * scale) as f32;
        }
    }
    Ok(((total * scale) as f32, grad))
}

/// Index of the largest logit per row (first one on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape().get(1).copied().unwrap_or(1);
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::zeros(&[3, 10]);
        let (loss, _) = loss_and_grad(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f32.ln()).abs() < 1e-6, "{loss}");
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_prediction() {
        let logits = Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
        let (loss, grad) = loss_and_grad(&logits, &[0]).unwrap();
        // ln(1 + e^-20) and ±e^-20 / (1 + e^-20)
        let expected = (1.0f64 + (-20.0f64).exp()).ln();
        assert!(((loss as f64) - expected).abs() < 1e-15);
        assert!((loss as f64 - 2.06e-9).abs() < 1e-11);
        assert!((grad.data()[0] as f64 + 2.06e-9).abs() < 1e-11);
        assert!((grad.data()[1] as f64 - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            loss_and_grad(&logits, &[3]),
            Err(NnError::Label {
                label: 3,
                num_classes: 3
            })
        ));
    }

    #[test]
    fn loss_is_non_negative() {
        let logits = Tensor::from_fn(&[4, 5], |i| ((i * 7919) % 17) as f32 - 8.0);
        let (loss, _) = loss_and_grad(&logits, &[0, 1, 2, 3]).unwrap();
        assert!(loss >= 0.0);
    }
}
