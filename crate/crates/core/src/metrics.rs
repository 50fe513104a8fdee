//! Confusion matrices and pixel accuracy / mean class accuracy / mean IU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor4, IGNORE_LABEL};

/// Square count matrix, rows ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    num_classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch("confusion matrix is not square".into()));
        }
        Ok(Self {
            num_classes: k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not the ignore label.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (gt.n, gt.h, gt.w) {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{}x{} vs ground truth {}x{}x{}",
                pred.n, pred.h, pred.w, gt.n, gt.h, gt.w
            )));
        }
        let k = self.num_classes;
        if let Some(&bad) = pred.labels().iter().find(|&&p| p as usize >= k) {
            return Err(Error::InvalidArgument(format!("predicted label {bad} with {k} classes")));
        }
        if let Some(&bad) = gt.labels().iter().find(|&&g| g != IGNORE_LABEL && g as usize >= k) {
            return Err(Error::InvalidArgument(format!("ground-truth label {bad} with {k} classes")));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g != IGNORE_LABEL {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "merging {}-class and {}-class confusions",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Derives the metrics. Classes with neither ground-truth nor predicted
    /// pixels are left out of the CA and IU means.
    pub fn finalize(&self) -> Result<MetricsReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyConfusion);
        }
        let k = self.num_classes;
        let diag: Vec<u64> = (0..k).map(|i| self.get(i, i)).collect();
        let gt_rows: Vec<u64> = (0..k).map(|i| (0..k).map(|j| self.get(i, j)).sum()).collect();
        let pred_cols: Vec<u64> = (0..k).map(|j| (0..k).map(|i| self.get(i, j)).sum()).collect();

        let pa = diag.iter().sum::<u64>() as f64 / total as f64;
        let class_acc: Vec<f64> = (0..k)
            .filter(|&i| gt_rows[i] > 0)
            .map(|i| diag[i] as f64 / gt_rows[i] as f64)
            .collect();
        let per_class_iu: Vec<Option<f64>> = (0..k)
            .map(|i| {
                let union = gt_rows[i] + pred_cols[i] - diag[i];
                (union > 0).then(|| diag[i] as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iu.iter().flatten().copied().collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        Ok(MetricsReport {
            confusion: self.rows(),
            pa,
            ca: mean(&class_acc),
            iu: mean(&present),
            per_class_iu,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    pub pa: f64,
    pub ca: f64,
    pub iu: f64,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iu: Vec<Option<f64>>,
}

impl MetricsReport {
    /// `PA=…, CA=…, IU=…` with four decimals.
    pub fn line(&self) -> String {
        format!("PA={:.4}, CA={:.4}, IU={:.4}", self.pa, self.ca, self.iu)
    }
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn predict_labels(score: &Tensor4) -> LabelMap {
    let (n, c, h, w) = (score.n, score.c, score.h, score.w);
    let hw = h * w;
    let mut labels = vec![0u8; n * hw];
    for s in 0..n {
        let out = &mut labels[s * hw..(s + 1) * hw];
        let mut best: Vec<f64> = score.plane(s, 0).to_vec();
        for k in 1..c {
            for ((b, l), &v) in best.iter_mut().zip(out.iter_mut()).zip(score.plane(s, k)) {
                if v > *b {
                    *b = v;
                    *l = k as u8;
                }
            }
        }
    }
    LabelMap::new(n, h, w, labels).expect("extents are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(1, h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_cells() {
        let mut c = Confusion::new(2);
        c.accumulate(&lm(2, 2, &[0, 1, 1, 1]), &lm(2, 2, &[0, 1, 0, 255])).unwrap();
        assert_eq!(c.rows(), vec![vec![1, 1], vec![0, 1]]);
    }

    #[test]
    fn ignored_ground_truth_leaves_counts() {
        let mut c = Confusion::new(3);
        c.accumulate(&lm(1, 3, &[0, 1, 2]), &lm(1, 3, &[255; 3])).unwrap();
        assert_eq!(c, Confusion::new(3));
        assert!(matches!(c.finalize(), Err(Error::EmptyConfusion)));
    }

    #[test]
    fn perfect_and_formula_cases() {
        let r = Confusion::from_rows(&[vec![5, 0], vec![0, 5]]).unwrap().finalize().unwrap();
        assert_eq!((r.pa, r.ca, r.iu), (1.0, 1.0, 1.0));
        assert_eq!(r.line(), "PA=1.0000, CA=1.0000, IU=1.0000");

        let r = Confusion::from_rows(&[vec![3, 1], vec![0, 4]]).unwrap().finalize().unwrap();
        assert!((r.pa - 7.0 / 8.0).abs() < 1e-15);
        assert!((r.ca - 7.0 / 8.0).abs() < 1e-15);
        assert!((r.iu - 31.0 / 40.0).abs() < 1e-15);
    }

    #[test]
    fn absent_and_never_predicted_classes() {
        // class 2 absent everywhere, class 1 present but never predicted
        let r = Confusion::from_rows(&[vec![4, 0, 0], vec![2, 0, 0], vec![0, 0, 0]])
            .unwrap()
            .finalize()
            .unwrap();
        assert_eq!(r.per_class_iu[2], None);
        assert_eq!(r.per_class_iu[1], Some(0.0));
        assert!((r.iu - (4.0 / 6.0) / 2.0).abs() < 1e-15);
        assert!((r.ca - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut c = Confusion::new(2);
        assert!(matches!(
            c.accumulate(&lm(1, 2, &[0, 255]), &lm(1, 2, &[0, 1])),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            c.accumulate(&lm(1, 2, &[0, 1]), &lm(2, 1, &[0, 1])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let s = Tensor4::filled(1, 3, 2, 2, 0.5);
        assert!(predict_labels(&s).labels().iter().all(|&l| l == 0));
        let mut s = Tensor4::zeros(1, 3, 1, 2);
        s.set(0, 2, 0, 0, 1.0);
        s.set(0, 1, 0, 1, 1.0);
        s.set(0, 2, 0, 1, 1.0);
        assert_eq!(predict_labels(&s).labels(), &[2, 1]);
    }
}
