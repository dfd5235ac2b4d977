//! Confusion counts and mean intersection-over-union.

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// `K x K` counts; rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose ground truth is not `ignore_label`.
    pub fn add(&mut self, predicted: &LabelMap, truth: &LabelMap, ignore_label: u8) -> Result<()> {
        if predicted.shape() != truth.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} and ground truth {:?} differ",
                predicted.shape(),
                truth.shape()
            )));
        }
        let k = self.num_classes;
        for (&p, &t) in predicted.data().iter().zip(truth.data()) {
            if t == ignore_label {
                continue;
            }
            if t as usize >= k || p as usize >= k {
                return Err(Error::Domain(format!("label pair ({t}, {p}) outside {k} classes")));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("confusion matrices over different class counts".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Fails when no pixel was scored.
    pub fn report(&self) -> Result<MiouReport> {
        if self.total() == 0 {
            return Err(Error::Domain("no scored pixels; mIoU undefined".into()));
        }
        let per_class = self.per_class_iou();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouReport { per_class, mean })
    }
}

pub fn miou(predicted: &[LabelMap], truth: &[LabelMap], num_classes: usize, ignore_label: u8) -> Result<MiouReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground truths", predicted.len(), truth.len())));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, t) in predicted.iter().zip(truth) {
        cm.add(p, t, ignore_label)?;
    }
    cm.report()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(h: usize, w: usize, data: &[u8]) -> LabelMap {
        LabelMap::from_vec([1, h, w], data.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = labels(2, 2, &[0, 1, 2, 1]);
        assert_eq!(miou(&[gt.clone()], &[gt], 3, 255).unwrap().mean, 1.0);
    }

    #[test]
    fn half_missed_class() {
        let gt = labels(2, 2, &[0, 0, 1, 1]);
        let pred = labels(2, 2, &[0, 0, 0, 0]);
        let r = miou(&[pred], &[gt], 2, 255).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.mean, 0.25);
    }

    #[test]
    fn absent_classes_are_left_out() {
        let gt = labels(1, 2, &[0, 0]);
        let r = miou(&[gt.clone()], &[gt], 4, 255).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, None, None]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn ignored_pixels_and_errors() {
        let gt = labels(1, 3, &[255, 255, 255]);
        let pred = labels(1, 3, &[0, 1, 0]);
        assert!(miou(&[pred.clone()], &[gt], 2, 255).is_err());
        assert!(miou(&[pred.clone()], &[labels(3, 1, &[0, 0, 0])], 2, 255).is_err());
        assert!(miou(&[pred], &[labels(1, 3, &[0, 5, 0])], 2, 255).is_err());
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&labels(1, 2, &[1, 0]), &labels(1, 2, &[255, 0]), 255).unwrap();
        assert_eq!(cm.total(), 1);
    }
}
