//! Synthetic universal-adaptation scenarios: Gaussian class blobs on a
//! circle, a rigid-motion shift for the target domain, label-set partitions
//! and class-balanced batching.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SuanError};
use crate::matrix::Matrix2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Source and target label sets together with the derived common and
/// private partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSets {
    source_classes: Vec<usize>,
    target_classes: Vec<usize>,
    common: Vec<usize>,
    source_private: Vec<usize>,
    target_private: Vec<usize>,
}

impl LabelSets {
    pub fn new(source_classes: impl IntoIterator<Item = usize>, target_classes: impl IntoIterator<Item = usize>) -> Self {
        let cs: BTreeSet<usize> = source_classes.into_iter().collect();
        let ct: BTreeSet<usize> = target_classes.into_iter().collect();
        Self {
            common: cs.intersection(&ct).copied().collect(),
            source_private: cs.difference(&ct).copied().collect(),
            target_private: ct.difference(&cs).copied().collect(),
            source_classes: cs.into_iter().collect(),
            target_classes: ct.into_iter().collect(),
        }
    }

    /// Standard layout: common classes first, then source-private, then
    /// target-private.
    pub fn from_counts(common: usize, source_private: usize, target_private: usize) -> Self {
        let source = 0..common + source_private;
        let target = (0..common).chain(common + source_private..common + source_private + target_private);
        Self::new(source, target)
    }

    pub fn source_classes(&self) -> &[usize] {
        &self.source_classes
    }

    pub fn target_classes(&self) -> &[usize] {
        &self.target_classes
    }

    pub fn common(&self) -> &[usize] {
        &self.common
    }

    pub fn source_private(&self) -> &[usize] {
        &self.source_private
    }

    pub fn target_private(&self) -> &[usize] {
        &self.target_private
    }

    pub fn is_common(&self, class: usize) -> bool {
        self.common.binary_search(&class).is_ok()
    }

    pub fn is_source_private(&self, class: usize) -> bool {
        self.source_private.binary_search(&class).is_ok()
    }

    pub fn is_target_private(&self, class: usize) -> bool {
        self.target_private.binary_search(&class).is_ok()
    }

    pub fn union_len(&self) -> usize {
        self.common.len() + self.source_private.len() + self.target_private.len()
    }

    /// |C| / |C_s|
    pub fn alpha(&self) -> Option<f64> {
        (!self.source_classes.is_empty()).then(|| self.common.len() as f64 / self.source_classes.len() as f64)
    }

    /// |C| / |C_t|
    pub fn beta(&self) -> Option<f64> {
        (!self.target_classes.is_empty()).then(|| self.common.len() as f64 / self.target_classes.len() as f64)
    }

    /// |C_s| / |C_t|
    pub fn gamma(&self) -> Option<f64> {
        (!self.target_classes.is_empty())
            .then(|| self.source_classes.len() as f64 / self.target_classes.len() as f64)
    }
}

/// ξ = |C_s ∩ C_t| / |C_s ∪ C_t|.
pub fn jaccard_index(label_sets: &LabelSets) -> Result<f64> {
    let union = label_sets.union_len();
    if union == 0 {
        return Err(SuanError::arg("both label sets are empty"));
    }
    Ok(label_sets.common.len() as f64 / union as f64)
}

/// ξ from α = |C|/|C_s| and β = |C|/|C_t|, as αβ / (α + β − αβ).
///
/// When both fractions are ratios of small integers (as they are when taken
/// from class counts) the value is computed in exact rational arithmetic, so
/// it is bit-identical to [`jaccard_index`] on the same partition.
pub fn xi_from_fractions(alpha: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
        return Err(SuanError::arg(format!("alpha {alpha} and beta {beta} must lie in [0, 1]")));
    }
    let denom = alpha + beta - alpha * beta;
    if denom <= 0.0 {
        return Err(SuanError::arg("alpha + beta - alpha*beta is zero"));
    }
    if let (Some((an, ad)), Some((bn, bd))) = (small_ratio(alpha), small_ratio(beta)) {
        // αβ/(α+β−αβ) = an·bn / (an·bd + bn·ad − an·bn)
        let num = an * bn;
        let den = an * bd + bn * ad - num;
        if den > 0 {
            let g = gcd(num, den);
            return Ok((num / g) as f64 / (den / g) as f64);
        }
    }
    Ok(alpha * beta / denom)
}

/// The closed form printed alongside the bound analysis,
/// αβ / ((1 − α)(α + β) + α). It disagrees with the set definition of ξ and
/// is exposed only so the discrepancy can be reported.
pub fn xi_printed_formula(alpha: f64, beta: f64) -> Result<f64> {
    let denom = (1.0 - alpha) * (alpha + beta) + alpha;
    if denom == 0.0 {
        return Err(SuanError::arg("denominator is zero"));
    }
    Ok(alpha * beta / denom)
}

const MAX_RATIO_DENOMINATOR: u64 = 1 << 24;

/// Recovers `p/q` (q ≤ 2²⁴) whose correctly rounded quotient is exactly `x`,
/// walking the continued-fraction convergents of `x`.
fn small_ratio(x: f64) -> Option<(u64, u64)> {
    if x == 0.0 {
        return Some((0, 1));
    }
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut rest = x;
    for _ in 0..64 {
        let a = rest.floor();
        if a > MAX_RATIO_DENOMINATOR as f64 {
            return None;
        }
        let a = a as u64;
        let h2 = a.checked_mul(h1)?.checked_add(h0)?;
        let k2 = a.checked_mul(k1)?.checked_add(k0)?;
        if k2 > MAX_RATIO_DENOMINATOR {
            return None;
        }
        if h2 as f64 / k2 as f64 == x {
            return Some((h2, k2));
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        let frac = rest - a as f64;
        if frac <= 0.0 {
            return None;
        }
        rest = 1.0 / frac;
    }
    None
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Default target rotation in degrees.
pub const ROTATION_DEG: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub true_label: usize,
    pub domain: Domain,
}

/// Angular order of the class means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Class index order.
    Sequential,
    /// Each target-private class between two common classes, source-private
    /// classes on the remaining arc.
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub feature_dim: usize,
    pub num_common: usize,
    pub num_source_private: usize,
    pub num_target_private: usize,
    pub source_samples_per_class: usize,
    pub target_samples_per_class: usize,
    /// Radius of the circle carrying the class means.
    pub class_separation: f64,
    /// Rotation of the target domain in the plane of the first two features.
    pub rotation_deg: f64,
    /// Target translation; empty means no translation.
    pub translation: Vec<f64>,
    /// Standard deviation of every class blob, in both domains.
    pub noise_scale: f64,
    /// Order of the classes around the circle.
    pub layout: Layout,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            feature_dim: 2,
            num_common: 4,
            num_source_private: 2,
            num_target_private: 3,
            source_samples_per_class: 100,
            target_samples_per_class: 100,
            class_separation: 3.0,
            rotation_deg: ROTATION_DEG,
            translation: Vec::new(),
            noise_scale: 0.3,
            layout: Layout::Interleaved,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn label_sets(&self) -> LabelSets {
        LabelSets::from_counts(self.num_common, self.num_source_private, self.num_target_private)
    }

    pub fn num_classes(&self) -> usize {
        self.num_common + self.num_source_private + self.num_target_private
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes() == 0 {
            return Err(SuanError::arg("scenario has zero classes"));
        }
        if self.num_common + self.num_source_private == 0 {
            return Err(SuanError::arg("the source domain needs at least one class"));
        }
        if self.feature_dim < 2 {
            return Err(SuanError::arg("feature_dim must be at least 2"));
        }
        if !self.translation.is_empty() && self.translation.len() != self.feature_dim {
            return Err(SuanError::arg(format!(
                "translation has {} entries, feature_dim is {}",
                self.translation.len(),
                self.feature_dim
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(SuanError::arg("noise_scale must be finite and >= 0"));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(SuanError::arg("class_separation must be finite and > 0"));
        }
        if !self.rotation_deg.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return Err(SuanError::arg("domain shift must be finite"));
        }
        if self.source_samples_per_class == 0 {
            return Err(SuanError::arg("source_samples_per_class must be positive"));
        }
        Ok(())
    }

    /// Position of `class` around the circle, in `0..num_classes()`.
    pub fn slot(&self, class: usize) -> usize {
        match self.layout {
            Layout::Sequential => class,
            Layout::Interleaved => {
                let (c, sp) = (self.num_common, self.num_source_private);
                let tp_first = c + sp;
                let mut order = Vec::with_capacity(self.num_classes());
                for i in 0..c {
                    order.push(i);
                    if i < self.num_target_private {
                        order.push(tp_first + i);
                    }
                }
                order.extend(tp_first + c.min(self.num_target_private)..self.num_classes());
                order.extend(c..tp_first);
                order.iter().position(|&k| k == class).unwrap_or(class)
            }
        }
    }

    /// Source-domain mean of `class`.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let angle = std::f64::consts::TAU * self.slot(class) as f64 / self.num_classes() as f64;
        let mut mean = vec![0.0; self.feature_dim];
        mean[0] = self.class_separation * angle.cos();
        mean[1] = self.class_separation * angle.sin();
        mean
    }

    /// Applies the configured rotation and translation.
    pub fn shift(&self, point: &[f64]) -> Vec<f64> {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let mut out = point.to_vec();
        out[0] = c * point[0] - s * point[1];
        out[1] = s * point[0] + c * point[1];
        for (o, t) in out.iter_mut().zip(&self.translation) {
            *o += t;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub label_sets: LabelSets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn features(&self) -> Matrix2 {
        let rows: Vec<&[f64]> = self.samples.iter().map(|s| s.features.as_slice()).collect();
        Matrix2::from_rows(&rows).expect("samples share a feature width")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.true_label).collect()
    }

    /// Distinct labels present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| s.true_label)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| SuanError::index(format!("sample {i} of {}", self.samples.len())))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            samples,
            label_sets: self.label_sets.clone(),
        })
    }

    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> Self {
        Self {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            label_sets: self.label_sets.clone(),
        }
    }

    /// One row per sample: `feature_0..feature_{d-1},label,domain`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.feature_dim()).map(|i| format!("feature_{i}")).collect();
        header.push("label".into());
        header.push("domain".into());
        out.write_record(&header).map_err(csv_err)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.features.iter().map(|v| crate::report::fmt_f64(*v)).collect();
            row.push(s.true_label.to_string());
            row.push(s.domain.as_str().into());
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush().map_err(|e| SuanError::Serialize(e.to_string()))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> SuanError {
    SuanError::Serialize(e.to_string())
}

/// Generated source and target datasets with their shared label sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub source: Dataset,
    pub target: Dataset,
    pub label_sets: LabelSets,
}

pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let label_sets = config.label_sets();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let draw = |center: &[f64], label: usize, domain: Domain, rng: &mut ChaCha8Rng| Sample {
        features: center
            .iter()
            .map(|&m| {
                let z: f64 = rng.sample(StandardNormal);
                m + config.noise_scale * z
            })
            .collect(),
        true_label: label,
        domain,
    };
    let mut source = Vec::with_capacity(label_sets.source_classes().len() * config.source_samples_per_class);
    for &class in label_sets.source_classes() {
        let mean = config.class_mean(class);
        for _ in 0..config.source_samples_per_class {
            source.push(draw(&mean, class, Domain::Source, &mut rng));
        }
    }
    let mut target = Vec::with_capacity(label_sets.target_classes().len() * config.target_samples_per_class);
    for &class in label_sets.target_classes() {
        let mean = config.shift(&config.class_mean(class));
        for _ in 0..config.target_samples_per_class {
            target.push(draw(&mean, class, Domain::Target, &mut rng));
        }
    }
    Ok(Scenario {
        source: Dataset {
            samples: source,
            label_sets: label_sets.clone(),
        },
        target: Dataset {
            samples: target,
            label_sets: label_sets.clone(),
        },
        label_sets,
    })
}

/// Endless stream of class-balanced index batches over a labelled dataset.
///
/// Each epoch shuffles the samples within every class and the order of the
/// classes, deals them round-robin and cuts the result into batches, so every
/// sample appears once per epoch and the class counts of a batch differ by at
/// most one. The last batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct BalancedBatches<R> {
    by_class: Vec<Vec<usize>>,
    batch_size: usize,
    rng: R,
    epoch: Vec<usize>,
    cursor: usize,
}

pub fn balanced_batches<R: Rng>(labels: &[usize], batch_size: usize, rng: R) -> Result<BalancedBatches<R>> {
    if batch_size == 0 {
        return Err(SuanError::arg("batch size must be positive"));
    }
    if labels.is_empty() {
        return Err(SuanError::arg("cannot batch an empty dataset"));
    }
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    if batch_size < classes.len() {
        return Err(SuanError::arg(format!(
            "batch size {batch_size} is smaller than the {} classes present",
            classes.len()
        )));
    }
    let by_class = classes
        .iter()
        .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    Ok(BalancedBatches {
        by_class,
        batch_size,
        rng,
        epoch: Vec::new(),
        cursor: 0,
    })
}

impl<R: Rng> BalancedBatches<R> {
    fn refill(&mut self) {
        for members in &mut self.by_class {
            members.shuffle(&mut self.rng);
        }
        let mut order: Vec<usize> = (0..self.by_class.len()).collect();
        order.shuffle(&mut self.rng);
        let longest = self.by_class.iter().map(Vec::len).max().unwrap_or(0);
        self.epoch.clear();
        for round in 0..longest {
            for &c in &order {
                if let Some(&i) = self.by_class[c].get(round) {
                    self.epoch.push(i);
                }
            }
        }
        self.cursor = 0;
    }
}

impl<R: Rng> Iterator for BalancedBatches<R> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.epoch.len() {
            self.refill();
        }
        let end = (self.cursor + self.batch_size).min(self.epoch.len());
        let batch = self.epoch[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }
}

/// Endless stream of uniformly shuffled index batches, one pass per epoch.
/// Used for the unlabelled target domain.
#[derive(Debug, Clone)]
pub struct ShuffledBatches<R> {
    order: Vec<usize>,
    batch_size: usize,
    rng: R,
    cursor: usize,
}

pub fn shuffled_batches<R: Rng>(len: usize, batch_size: usize, rng: R) -> Result<ShuffledBatches<R>> {
    if batch_size == 0 {
        return Err(SuanError::arg("batch size must be positive"));
    }
    if len == 0 {
        return Err(SuanError::arg("cannot batch an empty dataset"));
    }
    Ok(ShuffledBatches {
        order: (0..len).collect(),
        batch_size,
        rng,
        cursor: len,
    })
}

impl<R: Rng> Iterator for ShuffledBatches<R> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn counts(batch: &[usize], labels: &[usize]) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &i in batch {
            *m.entry(labels[i]).or_default() += 1;
        }
        m
    }

    #[test]
    fn index_layout() {
        let config = ScenarioConfig {
            num_common: 2,
            num_source_private: 1,
            num_target_private: 1,
            source_samples_per_class: 5,
            target_samples_per_class: 5,
            ..Default::default()
        };
        let sc = build_scenario(&config).unwrap();
        assert_eq!(sc.source.classes(), vec![0, 1, 2]);
        assert_eq!(sc.target.classes(), vec![0, 1, 3]);
        assert_eq!(sc.label_sets.common(), &[0, 1]);
        assert_eq!(sc.label_sets.source_private(), &[2]);
        assert_eq!(sc.label_sets.target_private(), &[3]);
    }

    #[test]
    fn interleaved_slots() {
        let config = ScenarioConfig::default();
        let slots: Vec<usize> = (0..9).map(|k| config.slot(k)).collect();
        // arc order 0,6,1,7,2,8,3,4,5
        assert_eq!(slots, vec![0, 2, 4, 6, 7, 8, 1, 3, 5]);
        let seq = ScenarioConfig { layout: Layout::Sequential, ..config };
        assert!((0..9).all(|k| seq.slot(k) == k));
    }

    #[test]
    fn same_seed_same_bits() {
        let config = ScenarioConfig { seed: 17, ..Default::default() };
        let a = build_scenario(&config).unwrap();
        let b = build_scenario(&config).unwrap();
        let bits = |d: &Dataset| d.features().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.source), bits(&b.source));
        assert_eq!(bits(&a.target), bits(&b.target));
        let c = build_scenario(&ScenarioConfig { seed: 18, ..config }).unwrap();
        assert_ne!(bits(&a.source), bits(&c.source));
    }

    #[test]
    fn zero_shift_zero_noise_shares_means() {
        let config = ScenarioConfig {
            rotation_deg: 0.0,
            noise_scale: 0.0,
            source_samples_per_class: 3,
            target_samples_per_class: 3,
            ..Default::default()
        };
        let sc = build_scenario(&config).unwrap();
        for t in &sc.target.samples {
            if sc.label_sets.is_common(t.true_label) {
                let s = sc.source.samples.iter().find(|s| s.true_label == t.true_label).unwrap();
                assert_eq!(s.features, t.features);
            }
        }
    }

    #[test]
    fn generated_data_is_class_balanced() {
        let sc = build_scenario(&ScenarioConfig::default()).unwrap();
        let src = counts(&(0..sc.source.len()).collect::<Vec<_>>(), &sc.source.labels());
        assert!(src.values().all(|&c| c == 100));
        assert_eq!(src.len(), 6);
        let tgt = counts(&(0..sc.target.len()).collect::<Vec<_>>(), &sc.target.labels());
        assert!(tgt.values().all(|&c| c == 100));
        assert!(sc.source.samples.iter().all(|s| !sc.label_sets.is_target_private(s.true_label)));
    }

    #[test]
    fn zero_classes_rejected() {
        let config = ScenarioConfig {
            num_common: 0,
            num_source_private: 0,
            num_target_private: 0,
            ..Default::default()
        };
        assert!(matches!(build_scenario(&config), Err(SuanError::Argument(_))));
    }

    #[test]
    fn jaccard_examples() {
        let office = LabelSets::from_counts(10, 10, 11);
        let xi = jaccard_index(&office).unwrap();
        assert_eq!(xi, 10.0 / 31.0);
        assert!((xi - 0.32).abs() < 0.005);
        assert_eq!(jaccard_index(&LabelSets::from_counts(5, 0, 0)).unwrap(), 1.0);
        assert_eq!(jaccard_index(&LabelSets::from_counts(0, 3, 4)).unwrap(), 0.0);
        assert!(jaccard_index(&LabelSets::new([], [])).is_err());
    }

    #[test]
    fn xi_from_fraction_examples() {
        assert_eq!(xi_from_fractions(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(xi_from_fractions(0.5, 10.0 / 21.0).unwrap(), 10.0 / 31.0);
        assert_eq!(xi_from_fractions(0.0, 0.4).unwrap(), 0.0);
        assert!(xi_from_fractions(0.0, 0.0).is_err());
        assert!(xi_from_fractions(1.5, 0.5).is_err());
        // Irrational-looking inputs fall back to the float formula.
        let a = 0.123_456_789_012_345_6;
        let xi = xi_from_fractions(a, 0.7).unwrap();
        assert!((xi - a * 0.7 / (a + 0.7 - a * 0.7)).abs() < 1e-15);
    }

    #[test]
    fn printed_formula_disagrees_on_office_split() {
        let v = xi_printed_formula(0.5, 10.0 / 21.0).unwrap();
        assert!((v - 0.241).abs() < 1e-3);
    }

    #[test]
    fn batches_divide_evenly() {
        let labels: Vec<usize> = (0..3).flat_map(|c| std::iter::repeat_n(c, 10)).collect();
        let stream = balanced_batches(&labels, 6, ChaCha8Rng::seed_from_u64(0)).unwrap();
        for b in stream.take(5) {
            assert_eq!(b.len(), 6);
            assert!(counts(&b, &labels).values().all(|&c| c == 2));
        }
    }

    /// Reference partitioner: how many of each class a contiguous window of
    /// a fixed-order round-robin deal can hold.
    fn reference_counts(window: usize, classes: usize) -> Vec<usize> {
        let mut c: Vec<usize> = (0..classes).map(|i| window / classes + usize::from(i < window % classes)).collect();
        c.sort_unstable_by(|a, b| b.cmp(a));
        c
    }

    #[test]
    fn batches_of_seven_over_three_classes() {
        let labels: Vec<usize> = (0..3).flat_map(|c| std::iter::repeat_n(c, 20)).collect();
        let stream = balanced_batches(&labels, 7, ChaCha8Rng::seed_from_u64(5)).unwrap();
        for b in stream.take(8) {
            let mut got: Vec<usize> = counts(&b, &labels).values().copied().collect();
            got.sort_unstable_by(|a, b| b.cmp(a));
            assert_eq!(got, reference_counts(b.len(), 3));
        }
        assert_eq!(reference_counts(7, 3), vec![3, 2, 2]);
    }

    #[test]
    fn batch_stream_is_seeded() {
        let labels: Vec<usize> = (0..4).flat_map(|c| std::iter::repeat_n(c, 9)).collect();
        let a: Vec<_> = balanced_batches(&labels, 8, ChaCha8Rng::seed_from_u64(3)).unwrap().take(10).collect();
        let b: Vec<_> = balanced_batches(&labels, 8, ChaCha8Rng::seed_from_u64(3)).unwrap().take(10).collect();
        assert_eq!(a, b);
        assert!(balanced_batches(&labels, 0, ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let config = ScenarioConfig {
            source_samples_per_class: 2,
            target_samples_per_class: 2,
            ..Default::default()
        };
        let sc = build_scenario(&config).unwrap();
        let mut buf = Vec::new();
        sc.target.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("feature_0,feature_1,label,domain"));
        assert_eq!(lines.count(), sc.target.len());
        assert!(text.ends_with('\n'));
    }

    proptest! {
        #[test]
        fn epoch_covers_each_sample_once(per_class in 1usize..12, classes in 1usize..6, extra in 0usize..5, seed in any::<u64>()) {
            let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
            let batch = classes + extra;
            let mut stream = balanced_batches(&labels, batch, ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut seen = Vec::new();
            while seen.len() < labels.len() {
                let b = stream.next().unwrap();
                let c = counts(&b, &labels);
                let all: Vec<usize> = (0..classes).map(|k| c.get(&k).copied().unwrap_or(0)).collect();
                prop_assert!(all.iter().max().unwrap() - all.iter().min().unwrap() <= 1);
                seen.extend(b);
            }
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..labels.len()).collect::<Vec<_>>());
        }

        #[test]
        fn jaccard_matches_fraction_form(c in 0usize..40, sp in 0usize..40, tp in 0usize..40) {
            prop_assume!(c + sp > 0 && c + tp > 0);
            let ls = LabelSets::from_counts(c, sp, tp);
            let j = jaccard_index(&ls).unwrap();
            let x = xi_from_fractions(ls.alpha().unwrap(), ls.beta().unwrap());
            if c == 0 {
                prop_assert!(x.is_err() || x.unwrap() == 0.0);
            } else {
                prop_assert_eq!(x.unwrap().to_bits(), j.to_bits());
            }
        }
    }
}
