use super::tape::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{LabelMap, Tensor};

/// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
///
/// `logits` is `[N, K, H, W]` and `labels` is `[N, H, W]`. The log-softmax
/// is computed with a per-pixel max shift that is held constant, which
/// leaves both the value and the gradient unchanged.
pub fn pixel_cross_entropy(tape: &mut Tape, logits: Var, labels: &LabelMap, ignore_label: u8) -> Result<Var> {
    let [n, k, h, w] = tape.value(logits).shape();
    if labels.shape() != [n, h, w] {
        return shape_err(format!("labels {:?} do not match logits {:?}", labels.shape(), [n, k, h, w]));
    }
    let mut onehot = Tensor::zeros([n, k, h, w]);
    let mut count = 0usize;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let label = labels.get(ni, y, x);
                if label == ignore_label {
                    continue;
                }
                if label as usize >= k {
                    return Err(Error::Domain(format!("label {label} outside 0..{k}")));
                }
                onehot.set(ni, label as usize, y, x, 1.0);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Domain("every pixel carries the ignore label".into()));
    }

    let mut max = Tensor::zeros([n, 1, h, w]);
    {
        let lv = tape.value(logits);
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let m = (0..k).map(|c| lv.get(ni, c, y, x)).fold(f64::NEG_INFINITY, f64::max);
                    max.set(ni, 0, y, x, m);
                }
            }
        }
    }
    let max = tape.constant(max);
    let max = tape.expand_channels(max, k)?;
    let shifted = tape.sub(logits, max)?;
    let e = tape.exp(shifted)?;
    let s = tape.sum_channels(e)?;
    let lse = tape.ln(s)?;
    let lse = tape.expand_channels(lse, k)?;
    let log_probs = tape.sub(shifted, lse)?;
    let onehot = tape.constant(onehot);
    let picked = tape.mul(log_probs, onehot)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -1.0 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(logits: Tensor, labels: LabelMap) -> Result<f64> {
        let mut tape = Tape::new();
        let l = tape.param(logits);
        let loss = pixel_cross_entropy(&mut tape, l, &labels, 255)?;
        Ok(tape.value(loss).item())
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let loss = loss_of(Tensor::full([2, 4, 3, 3], 0.7), LabelMap::filled([2, 3, 3], 2)).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_pixel_two_classes() {
        // ln(1 + e^-1) by direct softmax evaluation.
        let logits = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let loss = loss_of(logits, LabelMap::filled([1, 1, 1], 0)).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logit_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for big in [1.0, 5.0, 20.0, 60.0] {
            let logits = Tensor::from_vec([1, 3, 1, 1], vec![0.0, big, 0.0]).unwrap();
            let loss = loss_of(logits, LabelMap::filled([1, 1, 1], 1)).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn ignored_pixels_are_skipped_and_bad_labels_rejected() {
        let logits = Tensor::from_vec([1, 2, 1, 2], vec![1.0, 3.0, 0.0, 0.0]).unwrap();
        let only_first = loss_of(logits.clone(), LabelMap::from_vec([1, 1, 2], vec![0, 255]).unwrap()).unwrap();
        assert!((only_first - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!(matches!(
            loss_of(logits.clone(), LabelMap::from_vec([1, 1, 2], vec![0, 2]).unwrap()),
            Err(Error::Domain(_))
        ));
        assert!(loss_of(logits, LabelMap::filled([1, 1, 2], 255)).is_err());
    }
}
