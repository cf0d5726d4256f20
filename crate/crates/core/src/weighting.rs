//! Prediction margins, the target margin register and the class-wise source
//! weights derived from it, confidence-based target weights, and the
//! min-max batch normalization with activation threshold `w0`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SuanError};
use crate::matrix::{argmax, Matrix2};
use crate::scenario::Domain;

/// Pseudo-label (argmax, smallest index on ties) and the gap between the two
/// largest probabilities of a row.
pub fn prediction_margin(prob_row: &[f64]) -> Result<(usize, f64)> {
    if prob_row.len() < 2 {
        return Err(SuanError::arg(format!(
            "a margin needs at least 2 classes, got {}",
            prob_row.len()
        )));
    }
    let label = argmax(prob_row);
    let top = prob_row[label];
    let second = prob_row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((label, (top - second).clamp(0.0, 1.0)))
}

/// Per-class mean margin of the rows pseudo-labelled with that class.
/// Classes that receive no rows get 0.
pub fn batch_margin_vector(prob_rows: &Matrix2, num_classes: usize) -> Result<Vec<f64>> {
    if prob_rows.rows() == 0 {
        return Ok(vec![0.0; num_classes]);
    }
    if prob_rows.cols() != num_classes {
        return Err(SuanError::shape(format!(
            "probability rows have {} columns, expected {num_classes}",
            prob_rows.cols()
        )));
    }
    let mut sums = vec![0.0; num_classes];
    let mut counts = vec![0usize; num_classes];
    for row in prob_rows.iter_rows() {
        let (label, margin) = prediction_margin(row)?;
        sums[label] += margin;
        counts[label] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

/// Running mean of accepted batch margin vectors, one entry per source class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRegister {
    vector: Vec<f64>,
    update_count: u64,
    num_classes: usize,
}

impl MarginRegister {
    pub fn new(num_classes: usize) -> Self {
        Self {
            vector: vec![0.0; num_classes],
            update_count: 0,
            num_classes,
        }
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `V ← (t·V + m) / (t + 1)`, then `t ← t + 1`.
    pub fn update(&mut self, batch_margins: &[f64]) -> Result<()> {
        if batch_margins.len() != self.num_classes {
            return Err(SuanError::shape(format!(
                "margin vector has {} entries, register has {}",
                batch_margins.len(),
                self.num_classes
            )));
        }
        let t = self.update_count as f64;
        for (v, &m) in self.vector.iter_mut().zip(batch_margins) {
            *v = (t * *v + m) / (t + 1.0);
        }
        self.update_count += 1;
        Ok(())
    }
}

/// Functional form of [`MarginRegister::update`].
pub fn tmr_update(register: &MarginRegister, batch_margins: &[f64]) -> Result<MarginRegister> {
    let mut next = register.clone();
    next.update(batch_margins)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBatch {
    pub values: Vec<f64>,
    pub origin: Domain,
}

impl WeightBatch {
    pub fn new(values: Vec<f64>, origin: Domain) -> Self {
        Self { values, origin }
    }

    pub fn ones(n: usize, origin: Domain) -> Self {
        Self::new(vec![1.0; n], origin)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

/// Each source sample takes the register entry of its class.
pub fn source_weights(register: &MarginRegister, labels: &[usize]) -> Result<WeightBatch> {
    let values = labels
        .iter()
        .map(|&y| {
            register.vector.get(y).copied().ok_or_else(|| {
                SuanError::index(format!(
                    "source label {y} with {} classes",
                    register.num_classes
                ))
            })
        })
        .collect::<Result<_>>()?;
    Ok(WeightBatch::new(values, Domain::Source))
}

/// Each target sample takes its highest predicted class probability.
pub fn target_weights(prob_rows: &Matrix2) -> WeightBatch {
    WeightBatch::new(prob_rows.max_rows(), Domain::Target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationConfig {
    w0: u8,
    pub batch_size: usize,
}

impl NormalizationConfig {
    pub fn new(w0: u8, batch_size: usize) -> Result<Self> {
        if w0 > 1 {
            return Err(SuanError::Validation {
                key: "w0".into(),
                message: format!("must be 0 or 1, got {w0}"),
            });
        }
        Ok(Self { w0, batch_size })
    }

    pub fn w0(&self) -> u8 {
        self.w0
    }
}

/// Min-max normalization rescaled to mean one over the batch, shifted down
/// by `w0` and clamped at zero. A batch whose weights are all equal maps to
/// all ones before the shift.
pub fn normalize_weights(weights: &WeightBatch, config: &NormalizationConfig) -> Result<WeightBatch> {
    let n = weights.values.len();
    if n == 0 {
        return Err(SuanError::arg("cannot normalize an empty weight batch"));
    }
    if config.batch_size != n {
        return Err(SuanError::shape(format!(
            "batch size {} does not match {n} weights",
            config.batch_size
        )));
    }
    let (min, max) = weights
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    if !min.is_finite() || !max.is_finite() {
        return Err(SuanError::arg("weights must be finite"));
    }
    let unit: Vec<f64> = if max > min {
        weights.values.iter().map(|&w| (w - min) / (max - min)).collect()
    } else {
        vec![1.0; n]
    };
    let total: f64 = unit.iter().sum();
    let scale = config.batch_size as f64 / total;
    let w0 = f64::from(config.w0);
    Ok(WeightBatch::new(
        unit.into_iter().map(|u| (scale * u - w0).max(0.0)).collect(),
        weights.origin,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn margin_examples() {
        let (l, m) = prediction_margin(&[0.7, 0.2, 0.1]).unwrap();
        assert_eq!(l, 0);
        assert!((m - 0.5).abs() < 1e-15);
        assert_eq!(prediction_margin(&[1.0 / 3.0; 3]).unwrap(), (0, 0.0));
        assert_eq!(prediction_margin(&[0.0, 1.0, 0.0]).unwrap(), (1, 1.0));
        assert!(prediction_margin(&[1.0]).is_err());
    }

    /// Group-by-pseudo-label mean written without the production helpers.
    fn reference_margin_vector(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
        let mut groups: Vec<Vec<f64>> = vec![Vec::new(); k];
        for row in rows {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            groups[idx[0]].push(row[idx[0]] - row[idx[1]]);
        }
        groups
            .iter()
            .map(|g| if g.is_empty() { 0.0 } else { g.iter().sum::<f64>() / g.len() as f64 })
            .collect()
    }

    #[test]
    fn batch_margin_vector_examples() {
        let rows = vec![vec![0.9, 0.1], vec![0.7, 0.3]];
        let expected = reference_margin_vector(&rows, 2);
        assert!(close(&expected, &[0.6, 0.0], 1e-12));
        let got = batch_margin_vector(&Matrix2::from_rows(&rows).unwrap(), 2).unwrap();
        assert!(close(&got, &expected, 1e-12));

        let got = batch_margin_vector(&Matrix2::from_rows(&[[0.5, 0.5]]).unwrap(), 2).unwrap();
        assert_eq!(got, vec![0.0, 0.0]);

        let rows = vec![vec![0.8, 0.2], vec![0.2, 0.8]];
        let expected = reference_margin_vector(&rows, 2);
        assert!(close(&expected, &[0.6, 0.6], 1e-12));
        let got = batch_margin_vector(&Matrix2::from_rows(&rows).unwrap(), 2).unwrap();
        assert!(close(&got, &expected, 1e-12));

        assert_eq!(batch_margin_vector(&Matrix2::zeros(0, 3), 3).unwrap(), vec![0.0; 3]);
        assert!(batch_margin_vector(&Matrix2::from_rows(&[[0.5, 0.5]]).unwrap(), 3).is_err());
    }

    #[test]
    fn register_update_examples() {
        let r0 = MarginRegister::new(2);
        let r1 = tmr_update(&r0, &[0.4, 0.2]).unwrap();
        assert_eq!(r1.vector(), &[0.4, 0.2]);
        assert_eq!(r1.update_count(), 1);
        let r2 = tmr_update(&r1, &[0.2, 0.0]).unwrap();
        assert!(close(r2.vector(), &[0.3, 0.1], 1e-15));
        assert!(matches!(tmr_update(&r2, &[0.1]), Err(SuanError::Shape(_))));
    }

    #[test]
    fn source_weight_examples() {
        let mut reg = MarginRegister::new(2);
        reg.update(&[0.3, 0.1]).unwrap();
        assert_eq!(source_weights(&reg, &[0, 1, 0]).unwrap().values, vec![0.3, 0.1, 0.3]);
        assert_eq!(source_weights(&MarginRegister::new(3), &[2, 0]).unwrap().values, vec![0.0, 0.0]);
        let mut single = MarginRegister::new(1);
        single.update(&[0.5]).unwrap();
        assert_eq!(source_weights(&single, &[0, 0]).unwrap().values, vec![0.5, 0.5]);
        assert!(matches!(source_weights(&reg, &[2]), Err(SuanError::Index(_))));
    }

    #[test]
    fn target_weight_examples() {
        let probs = Matrix2::from_rows(&[[0.7, 0.2, 0.1], [0.4, 0.35, 0.25]]).unwrap();
        assert_eq!(target_weights(&probs).values, vec![0.7, 0.4]);
        let uniform = Matrix2::from_rows(&[[0.25; 4]]).unwrap();
        assert_eq!(target_weights(&uniform).values, vec![0.25]);
        let onehot = Matrix2::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(target_weights(&onehot).values, vec![1.0]);
    }

    #[test]
    fn normalization_examples() {
        let w = WeightBatch::new(vec![2.0, 4.0, 6.0], Domain::Source);
        let out = normalize_weights(&w, &NormalizationConfig::new(0, 3).unwrap()).unwrap();
        assert!(close(&out.values, &[0.0, 1.0, 2.0], 1e-12));
        let out = normalize_weights(&w, &NormalizationConfig::new(1, 3).unwrap()).unwrap();
        assert!(close(&out.values, &[0.0, 0.0, 1.0], 1e-12));
        let flat = WeightBatch::new(vec![5.0; 3], Domain::Target);
        let out = normalize_weights(&flat, &NormalizationConfig::new(0, 3).unwrap()).unwrap();
        assert_eq!(out.values, vec![1.0; 3]);
        assert_eq!(out.origin, Domain::Target);
    }

    #[test]
    fn normalization_errors() {
        assert!(NormalizationConfig::new(2, 3).is_err());
        let empty = WeightBatch::new(vec![], Domain::Source);
        assert!(matches!(
            normalize_weights(&empty, &NormalizationConfig::new(0, 0).unwrap()),
            Err(SuanError::Argument(_))
        ));
        let w = WeightBatch::new(vec![1.0, 2.0], Domain::Source);
        assert!(normalize_weights(&w, &NormalizationConfig::new(0, 3).unwrap()).is_err());
    }

    fn prob_row() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..8).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn margin_ignores_order_of_lower_entries(row in prob_row(), seed in any::<u64>()) {
            let (label, margin) = prediction_margin(&row).unwrap();
            prop_assert!((0.0..=1.0).contains(&margin));
            // Permute everything except the two largest entries.
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let mut rest: Vec<usize> = idx[2..].to_vec();
            let len = rest.len();
            if len > 1 {
                rest.rotate_left((seed as usize) % len);
            }
            let mut permuted = row.clone();
            for (slot, src) in idx[2..].iter().zip(&rest) {
                permuted[*slot] = row[*src];
            }
            let (l2, m2) = prediction_margin(&permuted).unwrap();
            prop_assert_eq!(l2, label);
            prop_assert_eq!(m2, margin);
        }

        #[test]
        fn register_is_running_mean(batches in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..60)) {
            let mut reg = MarginRegister::new(3);
            for b in &batches {
                reg.update(b).unwrap();
            }
            for c in 0..3 {
                let mean = batches.iter().map(|b| b[c]).sum::<f64>() / batches.len() as f64;
                prop_assert!((reg.vector()[c] - mean).abs() <= 1e-12);
            }
            prop_assert_eq!(reg.update_count(), batches.len() as u64);
        }

        #[test]
        fn source_weights_are_classwise(v in prop::collection::vec(0.0f64..1.0, 4), labels in prop::collection::vec(0usize..4, 1..40)) {
            let mut reg = MarginRegister::new(4);
            reg.update(&v).unwrap();
            let w = source_weights(&reg, &labels).unwrap();
            for i in 0..labels.len() {
                for j in 0..labels.len() {
                    if labels[i] == labels[j] {
                        prop_assert_eq!(w.values[i], w.values[j]);
                    }
                }
            }
        }
    }
}
