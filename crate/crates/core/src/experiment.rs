//! End-to-end pipeline: scenario, training, evaluation, weight diagnostics
//! and the bound, with deterministic report files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bound::{
    bound_decomposition, default_vc_dim, lambda_oracle, property_scan, proxy_divergence, BoundDecomposition,
    BoundInputs, ScanMode, ScanTable,
};
use crate::config::{emit_config, ExperimentConfig};
use crate::error::{Result, SuanError};
use crate::eval::{infer_batch, uda_accuracy, weight_density_groups, EvalReport, TaggedWeight, WeightGroup, WeightGroups};
use crate::matrix::Matrix2;
use crate::report::{fmt_f64, fmt_opt, write_csv_with, write_json, write_text};
use crate::scenario::{build_scenario, csv_err, jaccard_index, xi_printed_formula, Dataset, Domain, Scenario};
use crate::trainer::{fit, seeded, source_error, streams, uan_baseline_weights, FitOutcome, Mode, SuanModel};
use crate::weighting::{source_weights, target_weights, MarginRegister};

pub const TRACE_FILE: &str = "trace.csv";
pub const EVAL_FILE: &str = "eval_report.json";
pub const WEIGHTS_FILE: &str = "weight_groups.csv";
pub const REGISTER_FILE: &str = "register.json";
pub const BOUND_FILE: &str = "bound.json";
pub const MODEL_FILE: &str = "model.json";
pub const SCAN_TARGET_FILE: &str = "bound_scan_target_classes.csv";
pub const SCAN_ALPHA_FILE: &str = "bound_scan_common_fraction.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const SWEEP_FILE: &str = "sweep_summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterReport {
    pub vector: Vec<f64>,
    pub update_count: u64,
    pub num_classes: usize,
    pub w0: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub alpha: f64,
    pub m: f64,
    pub decomposition: BoundDecomposition,
    /// Error on target common-class samples, measured with oracle labels.
    pub empirical_target_risk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub scenario: Scenario,
    pub fit: FitOutcome,
    pub report: EvalReport,
    pub weights: WeightGroups,
    pub bound: Option<BoundReport>,
}

impl ExperimentOutcome {
    pub fn register_report(&self) -> RegisterReport {
        RegisterReport {
            vector: self.fit.register.vector().to_vec(),
            update_count: self.fit.register.update_count(),
            num_classes: self.fit.register.num_classes(),
            w0: self.fit.w0,
        }
    }
}

fn rows_where(data: &Dataset, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    (0..data.len()).filter(|&i| keep(data.samples[i].true_label)).collect()
}

/// Raw (un-normalized) weights of every source and target sample under the
/// final model: register lookups and top probabilities, or the entropy
/// weights for the entropy-weighting baseline.
pub fn diagnostic_weights(
    model: &SuanModel,
    register: &MarginRegister,
    scenario: &Scenario,
    mode: Mode,
) -> Result<Vec<TaggedWeight>> {
    let sx = scenario.source.features();
    let sy = scenario.source.labels();
    let tx = scenario.target.features();
    let (ws, wt) = if mode == Mode::UanWeighting {
        uan_baseline_weights(model, &sx, &tx)?
    } else {
        (source_weights(register, &sy)?, target_weights(&model.predict_proba(&tx)?))
    };
    Ok(tag(&scenario.source, ws.values, Domain::Source)
        .chain(tag(&scenario.target, wt.values, Domain::Target))
        .collect())
}

fn tag(data: &Dataset, values: Vec<f64>, domain: Domain) -> impl Iterator<Item = TaggedWeight> + '_ {
    data.samples
        .iter()
        .zip(values)
        .map(move |(s, weight)| TaggedWeight { domain, label: s.true_label, weight })
}

fn resolve_bound(config: &ExperimentConfig, scenario: &Scenario, model: &SuanModel) -> Result<Option<BoundReport>> {
    let ls = &scenario.label_sets;
    let (Some(alpha), Some(gamma)) = (ls.alpha(), ls.gamma()) else {
        return Ok(None);
    };
    let settings = &config.bound;
    let m = settings.m.unwrap_or(config.train.batch_size as f64);
    let m_prime = alpha * m;
    if m_prime <= 0.0 {
        return Ok(None);
    }
    let sx = scenario.source.features();
    let sy = scenario.source.labels();
    let common_s = scenario.source.subset(&rows_where(&scenario.source, |y| ls.is_common(y)))?;
    let common_t = scenario.target.subset(&rows_where(&scenario.target, |y| ls.is_common(y)))?;
    let source_risk = match settings.source_risk {
        Some(v) => v,
        None => source_error(model, &sx, &sy)?,
    };
    let empirical_divergence = match settings.empirical_divergence {
        Some(v) => v,
        None => proxy_divergence(
            &model.embed(&common_s.features())?,
            &model.embed(&common_t.features())?,
            &settings.oracle,
        )?,
    };
    let lambda = match settings.lambda {
        Some(v) => v,
        None => lambda_oracle(
            &model.embed(&sx)?,
            &sy,
            &model.embed(&common_t.features())?,
            &common_t.labels(),
            ls,
            &settings.oracle,
        )?,
    };
    let inputs = BoundInputs {
        vc_dim: settings.vc_dim.unwrap_or_else(|| default_vc_dim(&model.domain)),
        gamma,
        m_prime,
        delta: settings.delta(),
        source_risk,
        empirical_divergence,
        lambda,
    };
    let empirical_target_risk = source_error(model, &common_t.features(), &common_t.labels())?;
    Ok(Some(BoundReport {
        decomposition: bound_decomposition(&inputs)?,
        inputs,
        alpha,
        m,
        empirical_target_risk,
    }))
}

/// Bound evaluated from configured inputs alone, without training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCalculation {
    pub inputs: BoundInputs,
    pub alpha: f64,
    pub m: f64,
    pub decomposition: BoundDecomposition,
    /// Set-consistent ξ of the label sets.
    pub xi: f64,
    /// The printed closed form, which disagrees with `xi`; reported only.
    pub xi_printed_formula: f64,
}

/// Calculator mode: `source_risk`, `empirical_divergence` and `lambda` must
/// be set in `[bound]`; α and γ come from the scenario's label sets and the
/// VC dimension defaults to that of the configured discriminator.
pub fn calculate_bound(config: &ExperimentConfig) -> Result<BoundCalculation> {
    config.validate()?;
    let settings = &config.bound;
    let need = |v: Option<f64>, key: &str| {
        v.ok_or_else(|| SuanError::Validation {
            key: format!("bound.{key}"),
            message: "required by the bound calculator".into(),
        })
    };
    let source_risk = need(settings.source_risk, "source_risk")?;
    let empirical_divergence = need(settings.empirical_divergence, "empirical_divergence")?;
    let lambda = need(settings.lambda, "lambda")?;
    let ls = config.scenario.label_sets();
    let (Some(alpha), Some(gamma)) = (ls.alpha(), ls.gamma()) else {
        return Err(SuanError::Config("the bound needs nonempty source and target label sets".into()));
    };
    let m = settings.m.unwrap_or(config.train.batch_size as f64);
    let vc_dim = match settings.vc_dim {
        Some(d) => d,
        None => {
            let k = ls.source_classes().len();
            let model = SuanModel::new(config.scenario.feature_dim, k, &config.train, false, &mut seeded(config.train.seed, streams::INIT))?;
            default_vc_dim(&model.domain)
        }
    };
    let inputs = BoundInputs {
        vc_dim,
        gamma,
        m_prime: alpha * m,
        delta: settings.delta(),
        source_risk,
        empirical_divergence,
        lambda,
    };
    let beta = ls.beta().expect("target classes are nonempty");
    Ok(BoundCalculation {
        decomposition: bound_decomposition(&inputs)?,
        inputs,
        alpha,
        m,
        xi: jaccard_index(&ls)?,
        xi_printed_formula: xi_printed_formula(alpha, beta)?,
    })
}

/// Complexity-term scans around the configured label sets: `|C_t|` from
/// `|C|` to `3·|C_s|`, and `α` over a 0.05 grid at the configured `γ`.
pub fn bound_scans(calc: &BoundCalculation, config: &ExperimentConfig) -> Result<(ScanTable, ScanTable)> {
    let ls = config.scenario.label_sets();
    let (cs, c) = (ls.source_classes().len(), ls.common().len());
    let target_grid: Vec<f64> = (c.max(1)..=3 * cs).map(|v| v as f64).collect();
    let by_target = property_scan(
        calc.inputs.vc_dim,
        calc.inputs.delta,
        calc.m,
        ScanMode::VaryTargetClasses { source_classes: cs, common: c },
        &target_grid,
    )?;
    let gamma = calc.inputs.gamma;
    let alpha_grid: Vec<f64> = (1..=20)
        .map(|i| f64::from(i) / 20.0)
        .filter(|a| 2.0 * gamma.max(1.0) * a * calc.m > 1.0)
        .collect();
    let by_alpha = property_scan(
        calc.inputs.vc_dim,
        calc.inputs.delta,
        calc.m,
        ScanMode::VaryCommonFraction { gamma },
        &alpha_grid,
    )?;
    Ok((by_target, by_alpha))
}

/// Writes `bound.json` and both scan tables into `dir`.
pub fn run_bound(config: &ExperimentConfig, dir: &Path) -> Result<BoundCalculation> {
    let calc = calculate_bound(config)?;
    let (by_target, by_alpha) = bound_scans(&calc, config)?;
    ensure_dir(dir)?;
    write_json(&dir.join(BOUND_FILE), &calc)?;
    write_csv_with(&dir.join(SCAN_TARGET_FILE), |buf| by_target.write_csv(buf))?;
    write_csv_with(&dir.join(SCAN_ALPHA_FILE), |buf| by_alpha.write_csv(buf))?;
    Ok(calc)
}

/// Runs the pipeline in memory.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let scenario = build_scenario(&config.scenario)?;
    let fitted = fit(&scenario, &config.train)?;
    let tx = scenario.target.features();
    let predictions = infer_batch(&fitted.model, &tx, config.eval_threshold)?;
    let tagged = diagnostic_weights(&fitted.model, &fitted.register, &scenario, config.train.mode)?;
    let weights = weight_density_groups(&tagged, &scenario.label_sets)?;
    let report = uda_accuracy(&predictions, &scenario.target.labels(), &scenario.label_sets, config.eval_threshold)?
        .with_weight_groups(&weights);
    let bound = resolve_bound(config, &scenario, &fitted.model)?;
    Ok(ExperimentOutcome {
        config: config.clone(),
        scenario,
        fit: fitted,
        report,
        weights,
        bound,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SuanError::io(dir, e))
}

/// Writes every report file of one run into `dir`.
pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_csv_with(&dir.join(TRACE_FILE), |buf| outcome.fit.trace.write_csv(buf))?;
    write_json(&dir.join(EVAL_FILE), &outcome.report)?;
    write_csv_with(&dir.join(WEIGHTS_FILE), |buf| outcome.weights.write_csv(buf))?;
    write_json(&dir.join(REGISTER_FILE), &outcome.register_report())?;
    if let Some(bound) = &outcome.bound {
        write_json(&dir.join(BOUND_FILE), bound)?;
    }
    write_json(&dir.join(MODEL_FILE), &outcome.fit.model)?;
    write_text(&dir.join(CONFIG_FILE), &emit_config(&outcome.config)?)
}

pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    let outcome = run_pipeline(config)?;
    write_outputs(&outcome, dir)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub seed: u64,
    pub mode: Mode,
    pub averaged_accuracy: f64,
    pub source_error: f64,
    pub register_updates: u64,
    pub w0: u8,
    pub bound: Option<f64>,
    pub mean_weights: [Option<f64>; 4],
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec![
        "parameter",
        "value",
        "seed",
        "mode",
        "averaged_accuracy",
        "source_error",
        "register_updates",
        "w0",
        "bound",
    ];
    let group_cols: Vec<String> = WeightGroup::ALL.iter().map(|g| format!("mean_{}", g.as_str())).collect();
    header.extend(group_cols.iter().map(String::as_str));
    out.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.parameter.clone(),
            fmt_f64(r.value),
            r.seed.to_string(),
            r.mode.as_str().to_string(),
            fmt_f64(r.averaged_accuracy),
            fmt_f64(r.source_error),
            r.register_updates.to_string(),
            r.w0.to_string(),
            fmt_opt(r.bound),
        ];
        rec.extend(r.mean_weights.iter().map(|m| fmt_opt(*m)));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush().map_err(|e| SuanError::Serialize(e.to_string()))
}

/// One in-memory run per (value, seed); writes `sweep_summary.csv`.
pub fn run_sweep(config: &ExperimentConfig, dir: &Path) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| SuanError::Config("no [sweep] section in the configuration".into()))?;
    let mut rows = Vec::with_capacity(sweep.values.len() * sweep.seeds.len());
    for &value in &sweep.values {
        for &seed in &sweep.seeds {
            let base = ExperimentConfig { sweep: None, ..config.clone() }.with_seed(seed);
            let run = base.with_override(&sweep.parameter, value)?;
            let outcome = run_pipeline(&run)?;
            let src = source_error(
                &outcome.fit.model,
                &outcome.scenario.source.features(),
                &outcome.scenario.source.labels(),
            )?;
            rows.push(SweepRow {
                parameter: sweep.parameter.clone(),
                value,
                seed: run.seed,
                mode: run.train.mode,
                averaged_accuracy: outcome.report.averaged_accuracy,
                source_error: src,
                register_updates: outcome.fit.register.update_count(),
                w0: outcome.fit.w0,
                bound: outcome.bound.as_ref().map(|b| b.decomposition.total),
                mean_weights: WeightGroup::ALL.map(|g| {
                    let v = outcome.weights.get(g);
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                }),
            });
        }
    }
    ensure_dir(dir)?;
    write_csv_with(&dir.join(SWEEP_FILE), |buf| write_sweep_csv(&rows, buf))?;
    Ok(rows)
}

/// Features of `data` restricted to rows whose label passes `keep`.
pub fn features_where(data: &Dataset, keep: impl Fn(usize) -> bool) -> Result<Matrix2> {
    data.features().select_rows(&rows_where(data, keep))
}
