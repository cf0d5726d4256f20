//! Open-set inference, the averaged per-class accuracy protocol with a
//! single unknown class, weight-group diagnostics and per-class gains.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, SuanError};
use crate::matrix::{argmax, Matrix2};
use crate::scenario::{csv_err, Domain, LabelSets};
use crate::trainer::SuanModel;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Decision {
    Known(usize),
    Unknown,
}

/// Class slot of the evaluation protocol. Known classes order before the
/// unknown slot.
pub type EvalClass = Decision;

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Known(c) => write!(f, "{c}"),
            Decision::Unknown => f.write_str("unknown"),
        }
    }
}

impl std::str::FromStr for Decision {
    type Err = SuanError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "unknown" {
            return Ok(Decision::Unknown);
        }
        s.parse()
            .map(Decision::Known)
            .map_err(|_| SuanError::arg(format!("`{s}` is neither a class index nor `unknown`")))
    }
}

impl Serialize for Decision {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Decision {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub decision: Decision,
    pub confidence: f64,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(SuanError::arg(format!("threshold {threshold} is outside [0, 1]")))
    }
}

/// Known when the top probability reaches the threshold (inclusive).
pub fn infer_probs(prob_row: &[f64], threshold: f64) -> Result<Prediction> {
    check_threshold(threshold)?;
    if prob_row.is_empty() {
        return Err(SuanError::arg("empty probability row"));
    }
    let c = argmax(prob_row);
    let confidence = prob_row[c];
    let decision = if confidence >= threshold {
        Decision::Known(c)
    } else {
        Decision::Unknown
    };
    Ok(Prediction { decision, confidence })
}

pub fn infer(model: &SuanModel, x: &[f64], threshold: f64) -> Result<Prediction> {
    let probs = model.predict_proba(&Matrix2::from_vec(1, x.len(), x.to_vec())?)?;
    infer_probs(probs.row(0), threshold)
}

pub fn infer_batch(model: &SuanModel, x: &Matrix2, threshold: f64) -> Result<Vec<Prediction>> {
    check_threshold(threshold)?;
    let probs = model.predict_proba(x)?;
    probs.iter_rows().map(|r| infer_probs(r, threshold)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: EvalClass,
    pub samples: usize,
    pub correct: usize,
    /// `None` when the class has no evaluation samples.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl GroupStats {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = match n {
            0 => None,
            _ if n % 2 == 1 => Some(sorted[n / 2]),
            _ => Some(0.5 * (sorted[n / 2 - 1] + sorted[n / 2])),
        };
        Self {
            count: n,
            mean: (n > 0).then(|| sorted.iter().sum::<f64>() / n as f64),
            median,
            min: sorted.first().copied(),
            max: sorted.last().copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassAccuracy>,
    pub averaged_accuracy: f64,
    pub threshold: f64,
    pub group_weight_stats: BTreeMap<String, GroupStats>,
}

impl EvalReport {
    pub fn accuracy_of(&self, class: EvalClass) -> Option<f64> {
        self.per_class.iter().find(|c| c.class == class).and_then(|c| c.accuracy)
    }

    pub fn with_weight_groups(mut self, groups: &WeightGroups) -> Self {
        self.group_weight_stats = WeightGroup::ALL
            .into_iter()
            .map(|g| (g.as_str().to_string(), GroupStats::of(groups.get(g))))
            .collect();
        self
    }
}

/// Averaged per-class accuracy over the common classes plus one unknown
/// class that absorbs every target-private sample. Classes without samples
/// are left out of the average.
pub fn uda_accuracy(
    predictions: &[Prediction],
    true_labels: &[usize],
    label_sets: &LabelSets,
    threshold: f64,
) -> Result<EvalReport> {
    if predictions.len() != true_labels.len() {
        return Err(SuanError::shape("predictions and labels differ in length"));
    }
    let mut tally: BTreeMap<EvalClass, (usize, usize)> = label_sets
        .common()
        .iter()
        .map(|&c| (Decision::Known(c), (0, 0)))
        .collect();
    tally.insert(Decision::Unknown, (0, 0));
    for (p, &y) in predictions.iter().zip(true_labels) {
        let slot = if label_sets.is_common(y) {
            Decision::Known(y)
        } else if label_sets.is_target_private(y) {
            Decision::Unknown
        } else {
            return Err(SuanError::Data(format!("target sample labelled {y}, which is not a target class")));
        };
        let entry = tally.get_mut(&slot).expect("every slot is tallied");
        entry.0 += 1;
        entry.1 += usize::from(p.decision == slot);
    }
    let per_class: Vec<ClassAccuracy> = tally
        .into_iter()
        .map(|(class, (samples, correct))| ClassAccuracy {
            class,
            samples,
            correct,
            accuracy: (samples > 0).then(|| correct as f64 / samples as f64),
        })
        .collect();
    let present: Vec<f64> = per_class.iter().filter_map(|c| c.accuracy).collect();
    if present.is_empty() {
        return Err(SuanError::Data("no evaluation samples".into()));
    }
    Ok(EvalReport {
        averaged_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        threshold,
        group_weight_stats: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightGroup {
    SourceShared,
    SourcePrivate,
    TargetShared,
    TargetPrivate,
}

impl WeightGroup {
    pub const ALL: [WeightGroup; 4] = [
        WeightGroup::SourceShared,
        WeightGroup::SourcePrivate,
        WeightGroup::TargetShared,
        WeightGroup::TargetPrivate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightGroup::SourceShared => "source_shared",
            WeightGroup::SourcePrivate => "source_private",
            WeightGroup::TargetShared => "target_shared",
            WeightGroup::TargetPrivate => "target_private",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            WeightGroup::SourceShared | WeightGroup::SourcePrivate => Domain::Source,
            _ => Domain::Target,
        }
    }
}

/// A weight with the domain and true label of its sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggedWeight {
    pub domain: Domain,
    pub label: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WeightGroups {
    pub source_shared: Vec<f64>,
    pub source_private: Vec<f64>,
    pub target_shared: Vec<f64>,
    pub target_private: Vec<f64>,
}

impl WeightGroups {
    pub fn get(&self, group: WeightGroup) -> &[f64] {
        match group {
            WeightGroup::SourceShared => &self.source_shared,
            WeightGroup::SourcePrivate => &self.source_private,
            WeightGroup::TargetShared => &self.target_shared,
            WeightGroup::TargetPrivate => &self.target_private,
        }
    }

    fn get_mut(&mut self, group: WeightGroup) -> &mut Vec<f64> {
        match group {
            WeightGroup::SourceShared => &mut self.source_shared,
            WeightGroup::SourcePrivate => &mut self.source_private,
            WeightGroup::TargetShared => &mut self.target_shared,
            WeightGroup::TargetPrivate => &mut self.target_private,
        }
    }

    pub fn total(&self) -> usize {
        WeightGroup::ALL.iter().map(|g| self.get(*g).len()).sum()
    }

    /// CSV with columns `domain,group,weight`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["domain", "group", "weight"]).map_err(csv_err)?;
        for g in WeightGroup::ALL {
            for w in self.get(g) {
                out.write_record([g.domain().as_str(), g.as_str(), &crate::report::fmt_f64(*w)])
                    .map_err(csv_err)?;
            }
        }
        out.flush().map_err(|e| SuanError::Serialize(e.to_string()))
    }
}

pub fn classify_weight(tag: &TaggedWeight, label_sets: &LabelSets) -> Result<WeightGroup> {
    let group = match tag.domain {
        Domain::Source if label_sets.is_common(tag.label) => WeightGroup::SourceShared,
        Domain::Source if label_sets.is_source_private(tag.label) => WeightGroup::SourcePrivate,
        Domain::Target if label_sets.is_common(tag.label) => WeightGroup::TargetShared,
        Domain::Target if label_sets.is_target_private(tag.label) => WeightGroup::TargetPrivate,
        d => {
            return Err(SuanError::Data(format!(
                "label {} does not belong to the {} domain",
                tag.label,
                d.as_str()
            )))
        }
    };
    Ok(group)
}

/// Splits tagged weights into shared/private groups for each domain.
pub fn weight_density_groups(weights: &[TaggedWeight], label_sets: &LabelSets) -> Result<WeightGroups> {
    let mut groups = WeightGroups::default();
    for w in weights {
        groups.get_mut(classify_weight(w, label_sets)?).push(w.weight);
    }
    Ok(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassGain {
    pub class: EvalClass,
    pub gain: f64,
}

/// Method accuracy minus baseline accuracy for every class both reports
/// evaluate. Negative gains mark negative transfer.
pub fn per_class_gain(method: &EvalReport, baseline: &EvalReport) -> Result<Vec<ClassGain>> {
    let classes = |r: &EvalReport| -> Vec<(EvalClass, Option<f64>)> {
        r.per_class.iter().map(|c| (c.class, c.accuracy)).collect()
    };
    let (m, b) = (classes(method), classes(baseline));
    if m.len() != b.len() {
        return Err(SuanError::arg("reports cover different classes"));
    }
    let mut gains = Vec::with_capacity(m.len());
    for ((cm, am), (cb, ab)) in m.into_iter().zip(b) {
        if cm != cb {
            return Err(SuanError::arg(format!("class {cm} paired with class {cb}")));
        }
        match (am, ab) {
            (Some(x), Some(y)) => gains.push(ClassGain { class: cm, gain: x - y }),
            (None, None) => {}
            _ => return Err(SuanError::arg(format!("class {cm} is evaluated in only one report"))),
        }
    }
    Ok(gains)
}
