//! Target-risk bound calculator: complexity term, the additive bound and its
//! parts, a discriminator-based divergence proxy, an ideal-joint-risk oracle
//! and monotonicity scans over label-set shapes.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SuanError};
use crate::matrix::Matrix2;
use crate::nn::{apply_sgd, cross_entropy, mlp_backward, mlp_forward, Activation, Head, MlpParams};
use crate::report::fmt_f64;
use crate::scenario::{csv_err, Dataset, LabelSets};

pub const DEFAULT_DELTA: f64 = 0.05;
pub const MAX_DEFAULT_VC_DIM: usize = 10;

fn bad(key: &str, message: impl Into<String>) -> SuanError {
    SuanError::Validation {
        key: key.into(),
        message: message.into(),
    }
}

/// `4·sqrt((d·ln(2·max{1,γ}·m′) + ln(2/δ)) / (max{1,γ}·m′))`.
pub fn complexity_term(d: usize, gamma: f64, m_prime: f64, delta: f64) -> Result<f64> {
    if d < 1 {
        return Err(SuanError::arg("VC dimension must be at least 1"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(SuanError::arg(format!("gamma {gamma} must be positive and finite")));
    }
    if !(m_prime > 0.0 && m_prime.is_finite()) {
        return Err(SuanError::arg(format!("m' {m_prime} must be positive and finite")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(SuanError::arg(format!("delta {delta} is outside (0, 1)")));
    }
    let n = gamma.max(1.0) * m_prime;
    if 2.0 * n <= 1.0 {
        return Err(SuanError::arg("2·max{1,γ}·m' must exceed 1"));
    }
    Ok(4.0 * ((d as f64 * (2.0 * n).ln() + (2.0 / delta).ln()) / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub vc_dim: usize,
    pub gamma: f64,
    pub m_prime: f64,
    pub delta: f64,
    pub source_risk: f64,
    pub empirical_divergence: f64,
    pub lambda: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        complexity_term(self.vc_dim, self.gamma, self.m_prime, self.delta)?;
        if !(0.0..=1.0).contains(&self.source_risk) {
            return Err(bad("source_risk", format!("{} is outside [0, 1]", self.source_risk)));
        }
        if !(0.0..=2.0).contains(&self.empirical_divergence) {
            return Err(bad(
                "empirical_divergence",
                format!("{} is outside [0, 2]", self.empirical_divergence),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(bad("lambda", format!("{} must be finite and >= 0", self.lambda)));
        }
        Ok(())
    }
}

/// The four addends of the bound and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundDecomposition {
    pub source_risk: f64,
    pub divergence_term: f64,
    pub complexity: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn bound_decomposition(inputs: &BoundInputs) -> Result<BoundDecomposition> {
    inputs.validate()?;
    let complexity = complexity_term(inputs.vc_dim, inputs.gamma, inputs.m_prime, inputs.delta)?;
    let divergence_term = inputs.empirical_divergence / 2.0;
    Ok(BoundDecomposition {
        source_risk: inputs.source_risk,
        divergence_term,
        complexity,
        lambda: inputs.lambda,
        total: inputs.source_risk + divergence_term + complexity + inputs.lambda,
    })
}

/// `ε_S + d̂/2 + complexity + λ`.
pub fn risk_bound(inputs: &BoundInputs) -> Result<f64> {
    Ok(bound_decomposition(inputs)?.total)
}

/// Default VC dimension for a discriminator: a tenth of its parameter count,
/// capped at 10.
pub fn default_vc_dim(discriminator: &MlpParams) -> usize {
    (discriminator.num_params() / 10).clamp(1, MAX_DEFAULT_VC_DIM)
}

/// Settings of the small networks fitted by the two oracles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 60,
            learning_rate: 0.2,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Column means and standard deviations of `x`; zero deviations become 1.
fn standardizer(x: &Matrix2) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows().max(1) as f64;
    let mut mean = vec![0.0; x.cols()];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; x.cols()];
    for row in x.iter_rows() {
        for ((s, v), m) in sd.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd = sd.into_iter().map(|s| if s > 1e-24 { s.sqrt() } else { 1.0 }).collect();
    (mean, sd)
}

fn standardize(x: &Matrix2, mean: &[f64], sd: &[f64]) -> Matrix2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for ((v, m), s) in out.row_mut(r).iter_mut().zip(mean).zip(sd) {
            *v = (*v - m) / s;
        }
    }
    out
}

/// Fits a one-hidden-layer softmax classifier by minibatch SGD on
/// standardized inputs. Returns the network and the standardization.
fn fit_classifier(
    x: &Matrix2,
    labels: &[usize],
    num_classes: usize,
    config: &OracleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(MlpParams, Vec<f64>, Vec<f64>)> {
    let (mean, sd) = standardizer(x);
    let xs = standardize(x, &mean, &sd);
    let mut net = MlpParams::random(
        &[x.cols(), config.hidden, num_classes],
        Activation::Relu,
        Activation::Identity,
        Head::Softmax,
        rng,
    )?;
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let bx = xs.select_rows(chunk)?;
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (cache, probs) = mlp_forward(&net, &bx)?;
            let (_, grad) = cross_entropy(&probs, &by)?;
            let (g, _) = mlp_backward(&net, &cache, &grad)?;
            apply_sgd(&mut net, &g, config.learning_rate)?;
        }
    }
    Ok((net, mean, sd))
}

fn error_on(net: &MlpParams, mean: &[f64], sd: &[f64], x: &Matrix2, labels: &[usize]) -> Result<f64> {
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let (_, probs) = mlp_forward(net, &standardize(x, mean, sd))?;
    let wrong = probs.argmax_rows().iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / x.rows() as f64)
}

fn split_half(n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let test = idx.split_off(n / 2);
    (idx, test)
}

/// Proxy for the divergence between two feature sets: a fresh domain
/// discriminator is fitted on half of each set and its balanced held-out
/// error `e` gives `2·(1 − 2e)`, clamped to [0, 2].
pub fn proxy_divergence(source: &Matrix2, target: &Matrix2, config: &OracleConfig) -> Result<f64> {
    if source.rows() < 2 || target.rows() < 2 {
        return Err(SuanError::arg("each feature set needs at least two rows"));
    }
    if source.cols() != target.cols() {
        return Err(SuanError::shape("feature sets differ in width"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (s_train, s_test) = split_half(source.rows(), &mut rng);
    let (t_train, t_test) = split_half(target.rows(), &mut rng);
    let train_x = source.select_rows(&s_train)?.vstack(&target.select_rows(&t_train)?)?;
    let mut train_y = vec![1; s_train.len()];
    train_y.extend(vec![0; t_train.len()]);
    let (net, mean, sd) = fit_classifier(&train_x, &train_y, 2, config, &mut rng)?;
    let err_s = error_on(&net, &mean, &sd, &source.select_rows(&s_test)?, &vec![1; s_test.len()])?;
    let err_t = error_on(&net, &mean, &sd, &target.select_rows(&t_test)?, &vec![0; t_test.len()])?;
    let err = 0.5 * (err_s + err_t);
    Ok((2.0 * (1.0 - 2.0 * err)).clamp(0.0, 2.0))
}

/// Upper estimate of the ideal joint risk: one classifier is fitted on the
/// source set together with the common-class target samples (oracle labels)
/// and its two empirical risks are summed.
pub fn lambda_oracle(
    source: &Matrix2,
    source_labels: &[usize],
    target: &Matrix2,
    target_labels: &[usize],
    label_sets: &LabelSets,
    config: &OracleConfig,
) -> Result<f64> {
    if source.rows() != source_labels.len() || target.rows() != target_labels.len() {
        return Err(SuanError::shape("features and labels differ in length"));
    }
    let keep: Vec<usize> = (0..target.rows()).filter(|&i| label_sets.is_common(target_labels[i])).collect();
    if keep.is_empty() || source.rows() == 0 {
        return Err(SuanError::arg("no common-class target samples"));
    }
    let tx = target.select_rows(&keep)?;
    let ty: Vec<usize> = keep.iter().map(|&i| target_labels[i]).collect();
    let num_classes = source_labels.iter().chain(&ty).max().map_or(1, |m| m + 1).max(2);
    let x = source.vstack(&tx)?;
    let mut y = source_labels.to_vec();
    y.extend(&ty);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (net, mean, sd) = fit_classifier(&x, &y, num_classes, config, &mut rng)?;
    Ok(error_on(&net, &mean, &sd, source, source_labels)? + error_on(&net, &mean, &sd, &tx, &ty)?)
}

/// [`lambda_oracle`] over datasets.
pub fn lambda_oracle_datasets(source: &Dataset, target: &Dataset, label_sets: &LabelSets, config: &OracleConfig) -> Result<f64> {
    lambda_oracle(
        &source.features(),
        &source.labels(),
        &target.features(),
        &target.labels(),
        label_sets,
        config,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScanMode {
    /// Sweep `|C_t|` with `|C_s|` and `|C|` fixed.
    VaryTargetClasses { source_classes: usize, common: usize },
    /// Sweep `α = |C|/|C_s|` with `γ` fixed.
    VaryCommonFraction { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Change {
    Start,
    Increase,
    Constant,
    Decrease,
}

impl Change {
    pub fn between(prev: f64, next: f64) -> Self {
        if next > prev {
            Change::Increase
        } else if next < prev {
            Change::Decrease
        } else {
            Change::Constant
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Change::Start => "start",
            Change::Increase => "increase",
            Change::Constant => "constant",
            Change::Decrease => "decrease",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// First point, or a pair outside the region where a claim is made.
    Unchecked,
    Holds,
    Violated,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Unchecked => "unchecked",
            Verdict::Holds => "holds",
            Verdict::Violated => "violated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub parameter: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub m_prime: f64,
    pub bound: f64,
    /// Whether the pair ending at this row falls where a claim is made.
    pub in_region: bool,
    pub change: Change,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTable {
    pub mode: ScanMode,
    pub rows: Vec<ScanRow>,
}

impl ScanTable {
    pub fn holds(&self) -> bool {
        self.rows.iter().all(|r| r.verdict != Verdict::Violated)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["parameter", "gamma", "alpha", "m_prime", "bound", "in_region", "change", "verdict"])
            .map_err(csv_err)?;
        for r in &self.rows {
            out.write_record([
                fmt_f64(r.parameter),
                fmt_f64(r.gamma),
                fmt_f64(r.alpha),
                fmt_f64(r.m_prime),
                fmt_f64(r.bound),
                u8::from(r.in_region).to_string(),
                r.change.as_str().to_string(),
                r.verdict.as_str().to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush().map_err(|e| SuanError::Serialize(e.to_string()))
    }
}

/// Evaluates the complexity term (the only part of the bound that moves
/// with the label-set shape) over `grid` and compares consecutive points.
///
/// Varying `|C_t|`: pairs starting at `γ > 1` must not decrease; pairs
/// starting at `γ ≤ 1` must be exactly equal. Varying `α`: pairs whose two
/// points satisfy `α ≥ e/(2·max{1,γ}·m)` must strictly decrease.
pub fn property_scan(d: usize, delta: f64, m: f64, mode: ScanMode, grid: &[f64]) -> Result<ScanTable> {
    if grid.is_empty() {
        return Err(SuanError::arg("empty grid"));
    }
    if grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(SuanError::arg("grid must be sorted ascending"));
    }
    let point = |p: f64| -> Result<(f64, f64)> {
        match mode {
            ScanMode::VaryTargetClasses { source_classes, common } => {
                if source_classes == 0 || common > source_classes || p < common as f64 || p <= 0.0 {
                    return Err(SuanError::arg(format!("|C_t| = {p} is incompatible with the fixed label sets")));
                }
                Ok((source_classes as f64 / p, common as f64 / source_classes as f64))
            }
            ScanMode::VaryCommonFraction { gamma } => {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(SuanError::arg(format!("alpha {p} is outside (0, 1]")));
                }
                Ok((gamma, p))
            }
        }
    };
    let mut rows: Vec<ScanRow> = Vec::with_capacity(grid.len());
    for &p in grid {
        let (gamma, alpha) = point(p)?;
        let m_prime = alpha * m;
        let bound = complexity_term(d, gamma, m_prime, delta)?;
        let in_alpha_region = alpha >= std::f64::consts::E / (2.0 * gamma.max(1.0) * m);
        let (in_region, change, verdict) = match rows.last() {
            None => (in_alpha_region, Change::Start, Verdict::Unchecked),
            Some(prev) => {
                let change = Change::between(prev.bound, bound);
                match mode {
                    ScanMode::VaryTargetClasses { .. } => {
                        let ok = if prev.gamma > 1.0 {
                            change != Change::Decrease
                        } else {
                            change == Change::Constant
                        };
                        (true, change, if ok { Verdict::Holds } else { Verdict::Violated })
                    }
                    ScanMode::VaryCommonFraction { .. } => {
                        let prev_in = prev.alpha >= std::f64::consts::E / (2.0 * prev.gamma.max(1.0) * m);
                        if prev_in && in_alpha_region {
                            let v = if change == Change::Decrease { Verdict::Holds } else { Verdict::Violated };
                            (true, change, v)
                        } else {
                            (false, change, Verdict::Unchecked)
                        }
                    }
                }
            }
        };
        rows.push(ScanRow {
            parameter: p,
            gamma,
            alpha,
            m_prime,
            bound,
            in_region,
            change,
            verdict,
        });
    }
    Ok(ScanTable { mode, rows })
}
