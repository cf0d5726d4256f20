//! Weighted adversarial training: the margin-register method and its
//! baselines (source only, unweighted adversarial, entropy/auxiliary
//! discriminator weighting).
//!
//! One step forwards both half-batches through the feature extractor `F`,
//! the classifier `G` and the domain discriminator `D`, then descends
//! `E_G − λ·E_D` in `F` (the gradient reversal sits between `F` and `D`),
//! `E_G` in `G` and `E_D` in `D`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SuanError};
use crate::matrix::Matrix2;
use crate::nn::{
    apply_sgd, cross_entropy, grl_scale, l2_normalize_backward, l2_normalize_rows, mlp_backward,
    mlp_forward, weighted_bce, Activation, ForwardCache, GradientSet, Head, MlpParams,
};
use crate::scenario::{balanced_batches, jaccard_index, shuffled_batches, Domain, LabelSets, Scenario};
use crate::weighting::{
    batch_margin_vector, normalize_weights, source_weights, target_weights, MarginRegister,
    NormalizationConfig, WeightBatch,
};

/// ξ at or above which `w0` defaults to 1.
pub const W0_XI_CUTOFF: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Suan,
    SourceOnly,
    UnweightedAdversarial,
    UanWeighting,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Suan,
        Mode::SourceOnly,
        Mode::UnweightedAdversarial,
        Mode::UanWeighting,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Suan => "suan",
            Mode::SourceOnly => "source_only",
            Mode::UnweightedAdversarial => "unweighted_adversarial",
            Mode::UanWeighting => "uan_weighting",
        }
    }

    pub fn is_adversarial(self) -> bool {
        self != Mode::SourceOnly
    }
}

impl std::str::FromStr for Mode {
    type Err = SuanError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SuanError::arg(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GrlSchedule {
    Constant { lambda: f64 },
    /// Linear ramp from 0 to `lambda` over the run.
    Ramp { lambda: f64 },
}

impl GrlSchedule {
    pub fn at(&self, step: usize, max_steps: usize) -> f64 {
        match *self {
            GrlSchedule::Constant { lambda } => lambda,
            GrlSchedule::Ramp { lambda } => lambda * (step as f64 / max_steps.max(1) as f64).min(1.0),
        }
    }
}

/// How the source error that gates register updates is measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceErrorEval {
    /// Exponential moving average of the current batch error.
    Ema { decay: f64 },
    /// Error over the whole source set, every step.
    FullSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub epsilon: f64,
    pub learning_rate: f64,
    /// Samples per domain per step.
    pub batch_size: usize,
    /// Activation threshold; `None` picks 1 when ξ ≥ 0.3, else 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w0: Option<u8>,
    pub grl: GrlSchedule,
    pub mode: Mode,
    pub source_error: SourceErrorEval,
    pub feature_widths: Vec<usize>,
    pub domain_hidden: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            epsilon: 0.1,
            learning_rate: 0.1,
            batch_size: 36,
            w0: None,
            grl: GrlSchedule::Constant { lambda: 1.0 },
            mode: Mode::Suan,
            source_error: SourceErrorEval::Ema { decay: 0.9 },
            feature_widths: vec![32, 16],
            domain_hidden: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(SuanError::Validation {
                key: key.into(),
                message,
            })
        };
        if self.max_steps < 1 {
            return bad("train.max_steps", "must be at least 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("train.epsilon", format!("{} is outside (0, 1)", self.epsilon));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("train.learning_rate", "must be finite and > 0".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be positive".into());
        }
        if let Some(w0) = self.w0 {
            if w0 > 1 {
                return bad("train.w0", format!("must be 0 or 1, got {w0}"));
            }
        }
        let lambda = match self.grl {
            GrlSchedule::Constant { lambda } | GrlSchedule::Ramp { lambda } => lambda,
        };
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return bad("train.grl.lambda", "must be finite and >= 0".into());
        }
        if let SourceErrorEval::Ema { decay } = self.source_error {
            if !(0.0..1.0).contains(&decay) {
                return bad("train.source_error.decay", format!("{decay} is outside [0, 1)"));
            }
        }
        if self.feature_widths.is_empty() || self.feature_widths.contains(&0) {
            return bad("train.feature_widths", "needs at least one positive width".into());
        }
        if self.domain_hidden == 0 {
            return bad("train.domain_hidden", "must be positive".into());
        }
        Ok(())
    }

    /// The configured `w0`, or the ξ-based default.
    pub fn resolved_w0(&self, label_sets: &LabelSets) -> u8 {
        self.w0.unwrap_or_else(|| match jaccard_index(label_sets) {
            Ok(xi) if xi >= W0_XI_CUTOFF => 1,
            _ => 0,
        })
    }
}

/// Feature extractor, classifier, adversarial discriminator and the optional
/// non-adversarial discriminator used by the entropy-weighting baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuanModel {
    pub feature: MlpParams,
    pub classifier: MlpParams,
    pub domain: MlpParams,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub domain_aux: Option<MlpParams>,
}

impl SuanModel {
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        config: &TrainConfig,
        with_aux: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut f_dims = vec![input_dim];
        f_dims.extend(&config.feature_widths);
        let feature = MlpParams::random(&f_dims, Activation::Relu, Activation::Relu, Head::Identity, rng)?;
        let width = feature.output_dim();
        let classifier = MlpParams::random(&[width, num_classes], Activation::Identity, Activation::Identity, Head::Softmax, rng)?;
        let d_dims = [width, config.domain_hidden, 1];
        let domain = MlpParams::random(&d_dims, Activation::Relu, Activation::Identity, Head::Logistic, rng)?;
        let domain_aux = if with_aux {
            Some(MlpParams::random(&d_dims, Activation::Relu, Activation::Identity, Head::Logistic, rng)?)
        } else {
            None
        };
        let model = Self {
            feature,
            classifier,
            domain,
            domain_aux,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.feature, &self.classifier, &self.domain] {
            p.validate()?;
        }
        let width = self.feature.output_dim();
        if self.classifier.input_dim() != width || self.domain.input_dim() != width {
            return Err(SuanError::shape("classifier and discriminator must read the feature width"));
        }
        if let Some(aux) = &self.domain_aux {
            aux.validate()?;
            if aux.input_dim() != width {
                return Err(SuanError::shape("auxiliary discriminator must read the feature width"));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    /// L2-normalized features.
    pub fn embed(&self, x: &Matrix2) -> Result<Matrix2> {
        let (_, raw) = mlp_forward(&self.feature, x)?;
        Ok(l2_normalize_rows(&raw))
    }

    /// Class probabilities of `G(F(x))`.
    pub fn predict_proba(&self, x: &Matrix2) -> Result<Matrix2> {
        let (_, probs) = mlp_forward(&self.classifier, &self.embed(x)?)?;
        Ok(probs)
    }
}

/// Forward state shared by the objectives.
struct FeaturePass {
    cache: ForwardCache,
    raw: Matrix2,
    z: Matrix2,
}

fn feature_pass(model: &SuanModel, x: &Matrix2) -> Result<FeaturePass> {
    let (cache, raw) = mlp_forward(&model.feature, x)?;
    let z = l2_normalize_rows(&raw);
    Ok(FeaturePass { cache, raw, z })
}

/// Gradient in `F` of a loss whose gradient with respect to the normalized
/// features is `grad_z`.
fn feature_grad(model: &SuanModel, pass: &FeaturePass, grad_z: &Matrix2) -> Result<GradientSet> {
    let grad_raw = l2_normalize_backward(&pass.raw, grad_z);
    Ok(mlp_backward(&model.feature, &pass.cache, &grad_raw)?.0)
}

#[derive(Debug, Clone)]
pub struct ClassifierGrad {
    pub loss: f64,
    pub feature: GradientSet,
    pub classifier: GradientSet,
}

/// `E_G`: mean cross-entropy of `G(normalize(F(x)))` on labelled source data.
pub fn classifier_objective(model: &SuanModel, x: &Matrix2, labels: &[usize]) -> Result<ClassifierGrad> {
    let pass = feature_pass(model, x)?;
    classifier_on_pass(model, &pass, labels, x.rows())
}

/// Cross-entropy over the first `labels.len()` rows of a pass covering `rows` rows.
fn classifier_on_pass(model: &SuanModel, pass: &FeaturePass, labels: &[usize], rows: usize) -> Result<ClassifierGrad> {
    let n = labels.len();
    let (g_cache, probs) = mlp_forward(&model.classifier, &pass.z)?;
    let (src_probs, _) = probs.split_rows(n);
    let (loss, grad_src) = cross_entropy(&src_probs, labels)?;
    let grad_logits = grad_src.vstack(&Matrix2::zeros(rows - n, probs.cols()))?;
    let (classifier, grad_z) = mlp_backward(&model.classifier, &g_cache, &grad_logits)?;
    let feature = feature_grad(model, pass, &grad_z)?;
    Ok(ClassifierGrad {
        loss,
        feature,
        classifier,
    })
}

#[derive(Debug, Clone)]
pub struct DomainGrad {
    pub loss: f64,
    /// Descent gradient of `E_D` for the discriminator.
    pub domain: GradientSet,
    /// Gradient of `E_D` in `F` after the reversal layer, `−λ·∂E_D/∂θ_F`.
    pub feature: GradientSet,
    /// `∂E_D/∂θ_F` without the reversal.
    pub feature_ungated: GradientSet,
}

/// Weighted domain loss
/// `E_D = −mean_s w_s·log D(F(x)) − mean_t w_t·log(1 − D(F(x)))`
/// with its gradients. Weights must already be normalized.
pub fn domain_objective(
    model: &SuanModel,
    source_x: &Matrix2,
    target_x: &Matrix2,
    w_s: &WeightBatch,
    w_t: &WeightBatch,
    lambda: f64,
) -> Result<DomainGrad> {
    let pass = feature_pass(model, &source_x.vstack(target_x)?)?;
    domain_on_pass(model, &pass, source_x.rows(), w_s, w_t, lambda)
}

fn domain_on_pass(
    model: &SuanModel,
    pass: &FeaturePass,
    n_source: usize,
    w_s: &WeightBatch,
    w_t: &WeightBatch,
    lambda: f64,
) -> Result<DomainGrad> {
    let n_target = pass.z.rows() - n_source;
    if w_s.len() != n_source || w_t.len() != n_target {
        return Err(SuanError::shape(format!(
            "{} source and {} target weights for {n_source} + {n_target} samples",
            w_s.len(),
            w_t.len()
        )));
    }
    let (d_cache, d_out) = mlp_forward(&model.domain, &pass.z)?;
    let (p_s, p_t) = d_out.as_slice().split_at(n_source);
    let (loss_s, grad_s) = weighted_bce(p_s, &vec![1.0; n_source], &w_s.values)?;
    let (loss_t, grad_t) = weighted_bce(p_t, &vec![0.0; n_target], &w_t.values)?;
    let mut grad_logits = grad_s;
    grad_logits.extend(grad_t);
    let grad_logits = Matrix2::from_vec(n_source + n_target, 1, grad_logits)?;
    let (domain, grad_z) = mlp_backward(&model.domain, &d_cache, &grad_logits)?;
    let feature_ungated = feature_grad(model, pass, &grad_z)?;
    Ok(DomainGrad {
        loss: loss_s + loss_t,
        domain,
        feature: grl_scale(&feature_ungated, lambda),
        feature_ungated,
    })
}

/// Fraction of rows whose argmax prediction differs from the label.
pub fn source_error(model: &SuanModel, x: &Matrix2, labels: &[usize]) -> Result<f64> {
    if x.rows() == 0 {
        return Err(SuanError::arg("source error of an empty set"));
    }
    if x.rows() != labels.len() {
        return Err(SuanError::shape("features and labels differ in length"));
    }
    let probs = model.predict_proba(x)?;
    Ok(error_rate(&probs, labels))
}

fn error_rate(probs: &Matrix2, labels: &[usize]) -> f64 {
    let wrong = probs
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p != y)
        .count();
    wrong as f64 / labels.len().max(1) as f64
}

fn normalized_entropy(row: &[f64], num_classes: usize) -> f64 {
    if num_classes < 2 {
        return 0.0;
    }
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h / (num_classes as f64).ln()
}

/// Raw entropy/auxiliary-discriminator weights:
/// `w_s = H(ŷ)/log|C_s| − d'(x)` and `w_t = d'(x) − H(ŷ)/log|C_s|`.
pub fn uan_baseline_weights(
    model: &SuanModel,
    source_x: &Matrix2,
    target_x: &Matrix2,
) -> Result<(WeightBatch, WeightBatch)> {
    let aux = model
        .domain_aux
        .as_ref()
        .ok_or_else(|| SuanError::Config("entropy weighting needs the auxiliary discriminator".into()))?;
    let z = model.embed(&source_x.vstack(target_x)?)?;
    let (_, probs) = mlp_forward(&model.classifier, &z)?;
    let (_, d) = mlp_forward(aux, &z)?;
    Ok(uan_weights_from(&probs, d.as_slice(), source_x.rows()))
}

fn uan_weights_from(probs: &Matrix2, d_source: &[f64], n_source: usize) -> (WeightBatch, WeightBatch) {
    let k = probs.cols();
    let mut ws = Vec::with_capacity(n_source);
    let mut wt = Vec::with_capacity(probs.rows() - n_source);
    for (r, row) in probs.iter_rows().enumerate() {
        let h = normalized_entropy(row, k);
        if r < n_source {
            ws.push(h - d_source[r]);
        } else {
            wt.push(d_source[r] - h);
        }
    }
    (WeightBatch::new(ws, Domain::Source), WeightBatch::new(wt, Domain::Target))
}

/// Gate statistic for register updates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GateState {
    pub statistic: Option<f64>,
}

/// Mutable training state: parameters, register, gate and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: SuanModel,
    pub register: MarginRegister,
    pub gate: GateState,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: SuanModel) -> Self {
        let k = model.num_classes();
        Self {
            model,
            register: MarginRegister::new(k),
            gate: GateState::default(),
            step: 0,
        }
    }
}

/// Paired source and target half-batches for one step.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub source_x: &'a Matrix2,
    pub source_y: &'a [usize],
    pub target_x: &'a Matrix2,
    /// Oracle target labels, read only to group trace statistics.
    pub target_labels: Option<&'a [usize]>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub config: &'a TrainConfig,
    pub w0: u8,
    pub label_sets: &'a LabelSets,
    /// The whole source set, required by [`SourceErrorEval::FullSet`].
    pub full_source: Option<(&'a Matrix2, &'a [usize])>,
}

/// Mean weight of each group within a step; `None` when the group is absent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupMeans {
    pub source_shared: Option<f64>,
    pub source_private: Option<f64>,
    pub target_shared: Option<f64>,
    pub target_private: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub e_g: f64,
    pub e_d: f64,
    pub batch_source_error: f64,
    pub gate_statistic: f64,
    pub register_updated: bool,
    pub register_updates: u64,
    pub grl_lambda: f64,
    pub weights: GroupMeans,
}

fn mean_where(values: &[f64], labels: &[usize], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let (sum, n) = values
        .iter()
        .zip(labels)
        .filter(|(_, &y)| keep(y))
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One step of the configured mode. Register updates are gated on the source
/// error being below `ε`; the register is tracked in every mode but only
/// drives the weights in [`Mode::Suan`].
pub fn train_step(state: &mut TrainState, input: &StepInput<'_>, ctx: &StepContext<'_>) -> Result<TraceRecord> {
    let config = ctx.config;
    let n_s = input.source_x.rows();
    let n_t = input.target_x.rows();
    if n_s == 0 || n_t == 0 {
        return Err(SuanError::arg("both half-batches must be nonempty"));
    }
    if input.source_y.len() != n_s {
        return Err(SuanError::shape("source labels do not match the source batch"));
    }
    let model = &state.model;
    let k = model.num_classes();
    let pass = feature_pass(model, &input.source_x.vstack(input.target_x)?)?;
    let cls = classifier_on_pass(model, &pass, input.source_y, n_s + n_t)?;
    let (_, probs) = mlp_forward(&model.classifier, &pass.z)?;
    let (src_probs, tgt_probs) = probs.split_rows(n_s);

    // Gate on the source error, then fold the target margins into the register.
    let batch_error = error_rate(&src_probs, input.source_y);
    let statistic = match config.source_error {
        SourceErrorEval::Ema { decay } => match state.gate.statistic {
            Some(prev) => decay * prev + (1.0 - decay) * batch_error,
            None => batch_error,
        },
        SourceErrorEval::FullSet => {
            let (x, y) = ctx
                .full_source
                .ok_or_else(|| SuanError::Config("full-set source error needs the source set".into()))?;
            source_error(model, x, y)?
        }
    };
    state.gate.statistic = Some(statistic);
    let gate_open = statistic < config.epsilon;
    if gate_open {
        let margins = batch_margin_vector(&tgt_probs, k)?;
        state.register.update(&margins)?;
    }

    let lambda = config.grl.at(state.step, config.max_steps);
    let (w_s, w_t) = match config.mode {
        Mode::Suan => {
            let ws = source_weights(&state.register, input.source_y)?;
            let wt = target_weights(&tgt_probs);
            (
                normalize_weights(&ws, &NormalizationConfig::new(ctx.w0, n_s)?)?,
                normalize_weights(&wt, &NormalizationConfig::new(ctx.w0, n_t)?)?,
            )
        }
        Mode::UanWeighting => {
            let aux = model
                .domain_aux
                .as_ref()
                .ok_or_else(|| SuanError::Config("entropy weighting needs the auxiliary discriminator".into()))?;
            let (_, d) = mlp_forward(aux, &pass.z)?;
            let (ws, wt) = uan_weights_from(&probs, d.as_slice(), n_s);
            (
                normalize_weights(&ws, &NormalizationConfig::new(ctx.w0, n_s)?)?,
                normalize_weights(&wt, &NormalizationConfig::new(ctx.w0, n_t)?)?,
            )
        }
        Mode::UnweightedAdversarial | Mode::SourceOnly => {
            (WeightBatch::ones(n_s, Domain::Source), WeightBatch::ones(n_t, Domain::Target))
        }
    };

    let mut feature_grad = cls.feature;
    let mut e_d = 0.0;
    let mut domain_update = None;
    if config.mode.is_adversarial() {
        let dom = domain_on_pass(model, &pass, n_s, &w_s, &w_t, lambda)?;
        e_d = dom.loss;
        feature_grad = feature_grad.add(&dom.feature)?;
        domain_update = Some(dom.domain);
    }
    let aux_update = match (config.mode, &model.domain_aux) {
        // Plain discriminator on detached features: no gradient reaches F.
        (Mode::UanWeighting, Some(aux)) => {
            let (cache, out) = mlp_forward(aux, &pass.z)?;
            let (p_s, p_t) = out.as_slice().split_at(n_s);
            let (_, mut g) = weighted_bce(p_s, &vec![1.0; n_s], &vec![1.0; n_s])?;
            let (_, g_t) = weighted_bce(p_t, &vec![0.0; n_t], &vec![1.0; n_t])?;
            g.extend(g_t);
            Some(mlp_backward(aux, &cache, &Matrix2::from_vec(n_s + n_t, 1, g)?)?.0)
        }
        _ => None,
    };

    let weights = GroupMeans {
        source_shared: mean_where(&w_s.values, input.source_y, |y| ctx.label_sets.is_common(y)),
        source_private: mean_where(&w_s.values, input.source_y, |y| ctx.label_sets.is_source_private(y)),
        target_shared: input
            .target_labels
            .and_then(|l| mean_where(&w_t.values, l, |y| ctx.label_sets.is_common(y))),
        target_private: input
            .target_labels
            .and_then(|l| mean_where(&w_t.values, l, |y| ctx.label_sets.is_target_private(y))),
    };

    let lr = config.learning_rate;
    let model = &mut state.model;
    apply_sgd(&mut model.feature, &feature_grad, lr)?;
    apply_sgd(&mut model.classifier, &cls.classifier, lr)?;
    if let Some(g) = domain_update {
        apply_sgd(&mut model.domain, &g, lr)?;
    }
    if let (Some(g), Some(aux)) = (aux_update, model.domain_aux.as_mut()) {
        apply_sgd(aux, &g, lr)?;
    }

    let record = TraceRecord {
        step: state.step,
        e_g: cls.loss,
        e_d,
        batch_source_error: batch_error,
        gate_statistic: statistic,
        register_updated: gate_open,
        register_updates: state.register.update_count(),
        grl_lambda: lambda,
        weights,
    };
    state.step += 1;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        use crate::report::{fmt_f64, fmt_opt};
        let mut out = csv::Writer::from_writer(writer);
        out.write_record([
            "step",
            "e_g",
            "e_d",
            "source_error",
            "gate_statistic",
            "register_updated",
            "register_updates",
            "grl_lambda",
            "w_source_shared",
            "w_source_private",
            "w_target_shared",
            "w_target_private",
        ])
        .map_err(crate::scenario::csv_err)?;
        for r in &self.records {
            out.write_record([
                r.step.to_string(),
                fmt_f64(r.e_g),
                fmt_f64(r.e_d),
                fmt_f64(r.batch_source_error),
                fmt_f64(r.gate_statistic),
                u8::from(r.register_updated).to_string(),
                r.register_updates.to_string(),
                fmt_f64(r.grl_lambda),
                fmt_opt(r.weights.source_shared),
                fmt_opt(r.weights.source_private),
                fmt_opt(r.weights.target_shared),
                fmt_opt(r.weights.target_private),
            ])
            .map_err(crate::scenario::csv_err)?;
        }
        out.flush().map_err(|e| SuanError::Serialize(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub model: SuanModel,
    pub register: MarginRegister,
    pub trace: TrainTrace,
    pub w0: u8,
}

/// Seed stream identifiers so that each consumer of randomness is
/// independent of the others.
pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const SOURCE_BATCHES: u64 = 1;
    pub const TARGET_BATCHES: u64 = 2;
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `max_steps` steps over class-balanced source batches and shuffled
/// target batches. When the two half-batches differ in length (at epoch
/// ends) both are cut to the shorter one.
pub fn fit(scenario: &Scenario, config: &TrainConfig) -> Result<FitOutcome> {
    config.validate()?;
    let label_sets = &scenario.label_sets;
    let k = label_sets.source_classes().len();
    if label_sets.source_classes() != (0..k).collect::<Vec<_>>().as_slice() {
        return Err(SuanError::Config("source classes must be numbered 0..|C_s|".into()));
    }
    if scenario.source.is_empty() || scenario.target.is_empty() {
        return Err(SuanError::arg("source and target sets must be nonempty"));
    }
    let w0 = config.resolved_w0(label_sets);
    let mut init = seeded(config.seed, streams::INIT);
    let model = SuanModel::new(
        scenario.source.feature_dim(),
        k,
        config,
        config.mode == Mode::UanWeighting,
        &mut init,
    )?;
    let mut state = TrainState::new(model);

    let source_x = scenario.source.features();
    let source_y = scenario.source.labels();
    let target_x = scenario.target.features();
    let target_y = scenario.target.labels();
    let source_batch = config.batch_size.max(scenario.source.classes().len());
    let mut source_stream = balanced_batches(&source_y, source_batch, seeded(config.seed, streams::SOURCE_BATCHES))?;
    let mut target_stream = shuffled_batches(target_x.rows(), source_batch, seeded(config.seed, streams::TARGET_BATCHES))?;
    let ctx = StepContext {
        config,
        w0,
        label_sets,
        full_source: Some((&source_x, &source_y)),
    };

    let mut trace = TrainTrace::default();
    for _ in 0..config.max_steps {
        let mut s_idx = source_stream.next().expect("endless stream");
        let mut t_idx = target_stream.next().expect("endless stream");
        let n = s_idx.len().min(t_idx.len());
        s_idx.truncate(n);
        t_idx.truncate(n);
        let sx = source_x.select_rows(&s_idx)?;
        let sy: Vec<usize> = s_idx.iter().map(|&i| source_y[i]).collect();
        let tx = target_x.select_rows(&t_idx)?;
        let ty: Vec<usize> = t_idx.iter().map(|&i| target_y[i]).collect();
        let input = StepInput {
            source_x: &sx,
            source_y: &sy,
            target_x: &tx,
            target_labels: Some(&ty),
        };
        trace.records.push(train_step(&mut state, &input, &ctx)?);
    }
    Ok(FitOutcome {
        model: state.model,
        register: state.register,
        trace,
        w0,
    })
}
