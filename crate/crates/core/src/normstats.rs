//! Normalization statistics: batch moments, statistics-based normalization,
//! running averages, style signatures and the symmetric KL style distance.

use crate::error::{shape_err, Error, Result};
use crate::segnet::{self, ModelParams, NormMode};
use crate::tensor::Tensor;

/// Momentum of the exponential running average of batch statistics.
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel state of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayerState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub eps: f64,
}

impl NormLayerState {
    /// Identity affine, zero mean, unit variance.
    pub fn new(channels: usize, eps: f64) -> Self {
        NormLayerState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            weight: vec![1.0; channels],
            bias: vec![0.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }
}

/// Per-channel population moments over `count` positions (`N * H * W`).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Moments of the union of two disjoint sets of positions
    /// (pairwise combination of means and centered second moments).
    pub fn merge(&self, other: &BatchStats) -> Result<BatchStats> {
        if self.channels() != other.channels() {
            return shape_err(format!(
                "merging statistics over {} and {} channels",
                self.channels(),
                other.channels()
            ));
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mut mean = Vec::with_capacity(self.channels());
        let mut var = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let delta = other.mean[c] - self.mean[c];
            mean.push(self.mean[c] + delta * nb / n);
            let m2 = self.var[c] * na + other.var[c] * nb + delta * delta * na * nb / n;
            var.push(m2 / n);
        }
        Ok(BatchStats { mean, var, count: self.count + other.count })
    }
}

/// Style of an image at one layer: per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSignature {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl StyleSignature {
    /// `sigma = sqrt(var + eps)`, which never drops below `sqrt(eps)`.
    pub fn from_stats(stats: &BatchStats, eps: f64) -> Self {
        let floor = eps.sqrt();
        StyleSignature {
            mu: stats.mean.clone(),
            sigma: stats.var.iter().map(|v| (v + eps).sqrt().max(floor)).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

/// Exact per-channel population mean and variance over all `N * H * W` positions.
pub fn compute_batch_stats(features: &Tensor) -> Result<BatchStats> {
    let [n, c, h, w] = features.shape();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let count = n * h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut sum = 0.0;
        for ni in 0..n {
            sum += features.plane(ni, ci).iter().sum::<f64>();
        }
        let m = sum / count as f64;
        let mut sq = 0.0;
        for ni in 0..n {
            sq += features.plane(ni, ci).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = sq / count as f64;
    }
    Ok(BatchStats { mean, var, count })
}

/// `(x - mean) / sqrt(var + eps) * w + b`, per channel.
pub fn apply_norm(features: &Tensor, mean: &[f64], var: &[f64], state: &NormLayerState) -> Result<Tensor> {
    let c = features.channels();
    if mean.len() != c || var.len() != c || state.channels() != c {
        return shape_err(format!(
            "normalizing {c} channels with {} means, {} variances, {} affine weights",
            mean.len(),
            var.len(),
            state.channels()
        ));
    }
    if let Some(v) = var.iter().find(|v| **v < 0.0 || v.is_nan()) {
        return Err(Error::Domain(format!("negative variance {v}")));
    }
    let mut out = features.clone();
    for ni in 0..features.batch() {
        for ci in 0..c {
            let scale = state.weight[ci] / (var[ci] + state.eps).sqrt();
            let (m, b) = (mean[ci], state.bias[ci]);
            out.plane_mut(ni, ci).iter_mut().for_each(|x| *x = (*x - m) * scale + b);
        }
    }
    Ok(out)
}

/// `running <- (1 - momentum) * running + momentum * batch` for mean and variance.
pub fn update_running(state: &NormLayerState, batch: &BatchStats, momentum: f64) -> Result<NormLayerState> {
    let mut next = state.clone();
    update_running_in_place(&mut next, batch, momentum)?;
    Ok(next)
}

pub fn update_running_in_place(state: &mut NormLayerState, batch: &BatchStats, momentum: f64) -> Result<()> {
    if !(momentum > 0.0 && momentum <= 1.0) {
        return Err(Error::Domain(format!("momentum {momentum} outside (0, 1]")));
    }
    if batch.channels() != state.channels() {
        return shape_err("batch statistics do not match the layer's channel count");
    }
    for c in 0..state.channels() {
        state.running_mean[c] = (1.0 - momentum) * state.running_mean[c] + momentum * batch.mean[c];
        state.running_var[c] = (1.0 - momentum) * state.running_var[c] + momentum * batch.var[c];
    }
    Ok(())
}

/// One direction of the Gaussian KL divergence, summed over channels.
pub fn kl_divergence(a: &StyleSignature, b: &StyleSignature) -> Result<f64> {
    check_channels(a, b)?;
    Ok((0..a.channels())
        .map(|c| {
            let (mi, si, mj, sj) = (a.mu[c], a.sigma[c], b.mu[c], b.sigma[c]);
            (sj / si).ln() + (si * si + (mi - mj) * (mi - mj)) / (2.0 * sj * sj) - 0.5
        })
        .sum())
}

/// `KL(a||b) + KL(b||a)` summed over channels.
///
/// The log terms cancel, leaving
/// `(σa² − σb²)² / (2 σa² σb²) + (μa − μb)² (1/(2σa²) + 1/(2σb²))`,
/// which is evaluated directly: every term is nonnegative and the
/// expression is symmetric in its arguments operation-for-operation.
pub fn symmetric_kl(a: &StyleSignature, b: &StyleSignature) -> Result<f64> {
    check_channels(a, b)?;
    let mut total = 0.0;
    for c in 0..a.channels() {
        let va = a.sigma[c] * a.sigma[c];
        let vb = b.sigma[c] * b.sigma[c];
        let dv = va - vb;
        let dm = a.mu[c] - b.mu[c];
        total += dv * dv / (2.0 * (va * vb)) + dm * dm * (1.0 / (2.0 * va) + 1.0 / (2.0 * vb));
    }
    Ok(total)
}

fn check_channels(a: &StyleSignature, b: &StyleSignature) -> Result<()> {
    if a.channels() != b.channels() {
        return shape_err(format!("style signatures over {} and {} channels", a.channels(), b.channels()));
    }
    Ok(())
}

/// Per-layer statistics of a whole image set, as if every image were in one batch.
///
/// Layer `l` is measured with layers `< l` normalized by the already
/// aggregated whole-set statistics, so the result equals the layer
/// statistics of a single target-specific forward over the concatenated
/// set. Images are streamed one at a time and merged pairwise, so memory
/// stays at one image regardless of set size.
pub fn whole_set_stats(dataset: &[Tensor], params: &ModelParams) -> Result<Vec<BatchStats>> {
    if dataset.is_empty() {
        return Err(Error::Config("whole-set statistics of an empty image set".into()));
    }
    let layers = params.config.widths.len();
    let mut done: Vec<BatchStats> = Vec::with_capacity(layers);
    for layer in 0..layers {
        let mode = NormMode::ExternalStats(done.clone());
        let mut acc: Option<BatchStats> = None;
        for image in dataset {
            let features = segnet::prenorm_features(params, image, &mode, layer)?;
            let stats = compute_batch_stats(&features)?;
            acc = Some(match acc {
                None => stats,
                Some(prev) => prev.merge(&stats)?,
            });
        }
        done.push(acc.expect("dataset is nonempty"));
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(mu: &[f64], sigma: &[f64]) -> StyleSignature {
        StyleSignature { mu: mu.to_vec(), sigma: sigma.to_vec() }
    }

    #[test]
    fn stats_of_one_two_three() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = compute_batch_stats(&x).unwrap();
        assert!((s.mean[0] - 2.0).abs() < 1e-15);
        assert!((s.var[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.count, 3);
    }

    #[test]
    fn constant_channel_and_duplicated_batch() {
        let x = Tensor::full([1, 2, 3, 3], 0.75);
        let s = compute_batch_stats(&x).unwrap();
        assert_eq!(s.var, vec![0.0, 0.0]);
        assert_eq!(s.mean, vec![0.75, 0.75]);
        // inexact constants only pick up rounding noise
        let s = compute_batch_stats(&Tensor::full([2, 1, 5, 5], 0.7)).unwrap();
        assert!((s.mean[0] - 0.7).abs() < 1e-15 && s.var[0] < 1e-30);

        let img = Tensor::from_vec([1, 1, 2, 2], vec![0.1, 0.5, -0.3, 2.0]).unwrap();
        let twice = Tensor::concat_batch(&[&img, &img]).unwrap();
        let a = compute_batch_stats(&img).unwrap();
        let b = compute_batch_stats(&twice).unwrap();
        assert!((a.mean[0] - b.mean[0]).abs() < 1e-15);
        assert!((a.var[0] - b.var[0]).abs() < 1e-15);
        assert!(matches!(compute_batch_stats(&Tensor::zeros([0, 1, 2, 2])), Err(Error::EmptyBatch)));
    }

    #[test]
    fn apply_norm_examples() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut state = NormLayerState::new(1, 0.0);
        let y = apply_norm(&x, &[2.0], &[2.0 / 3.0], &state).unwrap();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(apply_norm(&x, &[0.0], &[1.0], &state).unwrap(), x);

        state.weight = vec![0.0];
        state.bias = vec![0.25];
        assert!(apply_norm(&x, &[2.0], &[1.0], &state).unwrap().data().iter().all(|v| *v == 0.25));
        assert!(matches!(apply_norm(&x, &[2.0], &[-1.0], &state), Err(Error::Domain(_))));
        assert!(apply_norm(&x, &[2.0, 1.0], &[1.0, 1.0], &state).is_err());
    }

    #[test]
    fn running_update_examples() {
        let state = NormLayerState::new(1, 1e-5);
        let batch = BatchStats { mean: vec![1.0], var: vec![4.0], count: 10 };
        let one = update_running(&state, &batch, 1.0).unwrap();
        assert_eq!((one.running_mean[0], one.running_var[0]), (1.0, 4.0));
        let tenth = update_running(&state, &batch, 0.1).unwrap();
        assert!((tenth.running_mean[0] - 0.1).abs() < 1e-15);
        let fixed = BatchStats { mean: vec![0.0], var: vec![1.0], count: 3 };
        assert_eq!(update_running(&state, &fixed, 0.1).unwrap(), state);
        assert!(update_running(&state, &batch, 0.0).is_err());
    }

    #[test]
    fn symmetric_kl_spot_values() {
        assert_eq!(symmetric_kl(&sig(&[0.3, -1.0], &[0.5, 2.0]), &sig(&[0.3, -1.0], &[0.5, 2.0])).unwrap(), 0.0);
        let d = symmetric_kl(&sig(&[0.0], &[1.0]), &sig(&[1.0], &[1.0])).unwrap();
        assert!((d - 1.0).abs() <= 1e-10);
        let d = symmetric_kl(&sig(&[0.0], &[1.0]), &sig(&[0.0], &[2.0])).unwrap();
        assert!((d - 1.125).abs() <= 1e-10);
        let forward = kl_divergence(&sig(&[0.0], &[1.0]), &sig(&[0.0], &[2.0])).unwrap();
        assert!((forward - 0.318147).abs() < 1e-6);
        assert!(symmetric_kl(&sig(&[0.0], &[1.0]), &sig(&[0.0, 1.0], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn style_sigma_is_floored() {
        let stats = BatchStats { mean: vec![0.5, 0.0], var: vec![0.0, 4.0], count: 4 };
        let s = StyleSignature::from_stats(&stats, 1e-4);
        assert!((s.sigma[0] - 1e-2).abs() < 1e-15);
        assert!((s.sigma[1] - (4.0f64 + 1e-4).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn merge_matches_concatenation() {
        let a = Tensor::from_vec([1, 2, 1, 3], vec![1.0, 2.0, 4.0, -1.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec([2, 2, 1, 1], vec![3.0, 5.0, 0.5, -2.0]).unwrap();
        let merged = compute_batch_stats(&a).unwrap().merge(&compute_batch_stats(&b).unwrap()).unwrap();
        // concatenation oracle over raw values
        for c in 0..2 {
            let mut vals: Vec<f64> = a.plane(0, c).to_vec();
            vals.push(b.get(0, c, 0, 0));
            vals.push(b.get(1, c, 0, 0));
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!((merged.mean[c] - m).abs() < 1e-12);
            assert!((merged.var[c] - v).abs() < 1e-12);
        }
        assert_eq!(merged.count, 5);
    }
}
