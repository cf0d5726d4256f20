//! Self-contained invariant suite behind the `check` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bound::{complexity_term, property_scan, ScanMode};
use crate::error::Result;
use crate::eval::{infer_probs, uda_accuracy};
use crate::matrix::Matrix2;
use crate::nn::{
    cross_entropy, finite_diff_gradient, grl_scale, max_relative_error, mlp_backward, mlp_forward, Activation, Head,
    MlpParams,
};
use crate::scenario::{jaccard_index, xi_from_fractions, LabelSets};
use crate::weighting::{normalize_weights, MarginRegister, NormalizationConfig, WeightBatch};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult { name, passed: false, detail: e.to_string() },
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix2 {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix2::from_vec(rows, cols, data).expect("sized")
}

fn gradient_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let dims = [3, 1 + rng.random_range(0..6), 3];
        let net = MlpParams::random(&dims, Activation::Relu, Activation::Identity, Head::Softmax, &mut rng)?;
        let x = random_matrix(4, 3, &mut rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let loss = |p: &MlpParams| {
            let (_, probs) = mlp_forward(p, &x).expect("shapes fixed");
            cross_entropy(&probs, &labels).expect("labels in range").0
        };
        let (cache, probs) = mlp_forward(&net, &x)?;
        let (_, grad) = cross_entropy(&probs, &labels)?;
        let (analytic, _) = mlp_backward(&net, &cache, &grad)?;
        let numeric = finite_diff_gradient(loss, &net, 1e-5)?;
        worst = worst.max(max_relative_error(&analytic.to_flat(), &numeric.to_flat(), 1e-6));
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.3e}")))
}

/// Runs every invariant check; all are cheap and deterministic.
pub fn run_checks() -> Vec<CheckResult> {
    vec![
        check("gradient_finite_difference", || gradient_check(1)),
        check("grl_exact_scaling", || {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let net = MlpParams::random(&[2, 4, 1], Activation::Relu, Activation::Identity, Head::Logistic, &mut rng)?;
            let (cache, _) = mlp_forward(&net, &random_matrix(3, 2, &mut rng))?;
            let (g, _) = mlp_backward(&net, &cache, &random_matrix(3, 1, &mut rng))?;
            let ok = [0.0, 0.5, 1.0].iter().all(|&l| {
                grl_scale(&g, l).values().zip(g.values()).all(|(a, b)| a.to_bits() == (-l * b).to_bits())
            });
            Ok((ok, "entrywise -lambda scaling".into()))
        }),
        check("register_running_mean", || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut reg = MarginRegister::new(4);
            let mut sum = [0.0; 4];
            for n in 1..=200 {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
                for (s, x) in sum.iter_mut().zip(&v) {
                    *s += x;
                }
                reg.update(&v)?;
                let _ = n;
            }
            let err = reg.vector().iter().zip(&sum).map(|(r, s)| (r - s / 200.0).abs()).fold(0.0, f64::max);
            Ok((err < 1e-12, format!("max deviation {err:.3e}")))
        }),
        check("normalization_mean_one", || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut ok = true;
            for _ in 0..100 {
                let n = rng.random_range(2..40);
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
                let out = normalize_weights(&WeightBatch::new(w, crate::Domain::Source), &NormalizationConfig::new(0, n)?)?;
                ok &= out.values.iter().all(|v| *v >= 0.0) && (out.mean() - 1.0).abs() < 1e-9;
            }
            Ok((ok, "100 random batches".into()))
        }),
        check("jaccard_consistency", || {
            let ls = LabelSets::from_counts(10, 10, 11);
            let a = jaccard_index(&ls)?;
            let b = xi_from_fractions(0.5, 10.0 / 21.0)?;
            Ok((a == b && (a - 10.0 / 31.0).abs() < 1e-15, format!("xi = {a}")))
        }),
        check("bound_property_target_classes", || {
            let t = property_scan(
                3,
                0.05,
                36.0,
                ScanMode::VaryTargetClasses { source_classes: 15, common: 10 },
                &[10.0, 13.0, 15.0, 20.0, 25.0, 26.0],
            )?;
            Ok((t.holds(), format!("{} points", t.rows.len())))
        }),
        check("bound_property_common_fraction", || {
            let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
            let t = property_scan(3, 0.05, 36.0, ScanMode::VaryCommonFraction { gamma: 1.0 }, &grid)?;
            let c = complexity_term(3, 0.5, 36.0, 0.05)? == complexity_term(3, 1.0, 36.0, 0.05)?;
            Ok((t.holds() && c, format!("{} points", t.rows.len())))
        }),
        check("closed_set_degeneration", || {
            let ls = LabelSets::from_counts(3, 0, 0);
            let probs = [[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.4, 0.35, 0.25]];
            let labels = [0, 1, 1, 0];
            let preds: Vec<_> = probs.iter().map(|p| infer_probs(p, 0.0)).collect::<Result<_>>()?;
            let r = uda_accuracy(&preds, &labels, &ls, 0.0)?;
            Ok(((r.averaged_accuracy - 0.75).abs() < 1e-12, format!("averaged {}", r.averaged_accuracy)))
        }),
    ]
}
