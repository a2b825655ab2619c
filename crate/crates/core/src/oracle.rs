//! Independent reference checks used by the `oracle-check` command and the
//! acceptance suite.
//!
//! The confidence-weight reference below deliberately shares no code with
//! [`crate::dew`]: it recomputes every entropy and normalisation with plain
//! loops. The gradient check compares backprop against central differences
//! of the objective with pseudo-labels and weights frozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dew::WeightSwitches;
use crate::error::Result;
use crate::losses::{bag_loss, instance_loss, total_loss, LossConfig};
use crate::matrix::Matrix;
use crate::model::{ModelParams, Upstream};
use crate::types::Bag;

pub const DEW_TOLERANCE: f64 = 1e-10;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

fn naive_entropy(xs: &[f64]) -> f64 {
    let mut total = 0.0;
    for &x in xs {
        if x > 0.0 {
            total += x * x.ln();
        }
    }
    -total
}

/// Straightforward per-instance weights `ω_j`, all factors enabled.
pub fn reference_weights(counts: &[usize], predictions: &[Vec<f64>], beta_b: f64, beta_i: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for pred in predictions {
        let mut top = 0;
        for c in 1..pred.len() {
            if pred[c] > pred[top] {
                top = c;
            }
        }

        let mut column = Vec::new();
        let mut total = 0.0;
        for other in predictions {
            column.push(other[top]);
            total += other[top];
        }
        let m = counts[top];
        let wb = if m == 0 || total == 0.0 {
            0.0
        } else {
            for v in column.iter_mut() {
                *v /= total;
            }
            let gap = naive_entropy(&column) - (m as f64).ln();
            (-(gap * gap) / beta_b).exp()
        };

        let h = naive_entropy(pred);
        let wi = (-(h * h) / beta_i).exp();
        out.push(wb * wi);
    }
    out
}

/// Worst disagreement found by an oracle run.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub cases: usize,
    pub max_error: f64,
    /// Reproduction record for the worst case, when any case ran.
    pub worst_case: Option<String>,
}

impl OracleReport {
    fn new() -> Self {
        Self {
            cases: 0,
            max_error: 0.0,
            worst_case: None,
        }
    }

    fn record(&mut self, err: f64, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if self.worst_case.is_none() || err > self.max_error || err.is_nan() {
            self.max_error = if err.is_nan() { f64::INFINITY } else { err };
            self.worst_case = Some(describe());
        }
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_error < tolerance
    }
}

fn random_prediction(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    match rng.random_range(0..10) {
        // exact one-hot
        0 => {
            let mut v = vec![0.0; c];
            v[rng.random_range(0..c)] = 1.0;
            v
        }
        // exact tie across all classes
        1 => vec![1.0 / c as f64; c],
        _ => {
            let temperature = 10f64.powf(rng.random_range(-1.0..1.5));
            let logits: Vec<f64> = (0..c)
                .map(|_| temperature * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        }
    }
}

/// Compares [`crate::dew::combined_weights`] with [`reference_weights`] on
/// random bags (`M ≤ 16`, `C ≤ 10`).
pub fn dew_equivalence(seed: u64, cases: usize) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport::new();
    for case in 0..cases {
        let m = rng.random_range(1..=16);
        let c = rng.random_range(2..=10);
        let mut counts = vec![0usize; c];
        for _ in 0..m {
            counts[rng.random_range(0..c)] += 1;
        }
        let preds: Vec<Vec<f64>> = (0..m).map(|_| random_prediction(&mut rng, c)).collect();
        let beta_b = 10f64.powf(rng.random_range(-1.0..1.5));
        let beta_i = 10f64.powf(rng.random_range(-1.0..1.5));

        let bag = Bag::from_counts((0..m).collect(), counts.clone())?;
        let got = crate::dew::combined_weights(&bag, &preds, beta_b, beta_i, WeightSwitches::default())?;
        let want = reference_weights(&counts, &preds, beta_b, beta_i);
        let err = got
            .iter()
            .zip(&want)
            .map(|(g, w)| (g.combined - w).abs())
            .fold(0.0, f64::max);
        report.record(err, || {
            format!("case={case} seed={seed} M={m} C={c} counts={counts:?} beta_b={beta_b:e} beta_i={beta_i:e} predictions={preds:?}")
        });
    }
    Ok(report)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` between analytic and numeric gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// One random gradient-check problem.
pub struct GradientCase {
    pub params: ModelParams,
    pub bags: Vec<Bag>,
    pub weak_inputs: Matrix,
    pub strong_inputs: Matrix,
    pub config: LossConfig,
}

impl GradientCase {
    /// `D ≤ 5`, `C ≤ 5`, `M ≤ 8`, one hidden layer of at most 8 units.
    pub fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = rng.random_range(1..=5);
        let c = rng.random_range(2..=5);
        let m = rng.random_range(1..=8);
        let hidden = rng.random_range(1..=8);
        let n_bags = rng.random_range(1..=3);

        let mut params = ModelParams::init_with(rng, d, &[hidden], c)?;
        for layer in &mut params.layers {
            for b in layer.bias.iter_mut() {
                *b = 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut bags = Vec::new();
        for i in 0..n_bags {
            let mut counts = vec![0usize; c];
            for _ in 0..m {
                counts[rng.random_range(0..c)] += 1;
            }
            bags.push(Bag::from_counts((i * m..(i + 1) * m).collect(), counts)?);
        }
        let weak_inputs = random_matrix(rng, n_bags * m, d);
        let strong_inputs = random_matrix(rng, n_bags * m, d);
        let config = LossConfig {
            lambda: rng.random_range(0.0..1.5),
            beta_b: rng.random_range(0.5..5.0),
            beta_i: rng.random_range(0.5..5.0),
            switches: WeightSwitches {
                use_bag_weight: rng.random_bool(0.75),
                use_instance_weight: rng.random_bool(0.75),
            },
        };
        Ok(Self {
            params,
            bags,
            weak_inputs,
            strong_inputs,
            config,
        })
    }

    /// Relative error between backprop and central differences with step `h`.
    pub fn check(&self, h: f64) -> Result<f64> {
        let refs: Vec<&Bag> = self.bags.iter().collect();
        let weak = self.params.forward(&self.weak_inputs)?;
        let strong = self.params.forward(&self.strong_inputs)?;
        let t = total_loss(&refs, weak.probs(), strong.probs(), &self.config)?;
        let mut analytic = weak.backward(Upstream::Probabilities(&t.grad_weak))?;
        analytic.add_assign(&strong.backward(Upstream::Probabilities(&t.grad_strong))?);

        // pseudo-labels and weights stay frozen at their base-point values
        let pseudo = t.pseudo_labels;
        let omega: Vec<f64> = t.weights.iter().map(|w| w.combined).collect();
        let objective = |p: &ModelParams| -> Result<f64> {
            let lb = bag_loss(&refs, &p.predict(&self.weak_inputs)?)?.value;
            let li = instance_loss(&pseudo, &p.predict(&self.strong_inputs)?, &omega)?.value;
            Ok(lb + self.config.lambda * li)
        };

        let mut probe = self.params.clone();
        let mut numeric = Vec::with_capacity(probe.param_count());
        for k in 0..probe.param_count() {
            let orig = *probe.value_mut(k);
            *probe.value_mut(k) = orig + h;
            let up = objective(&probe)?;
            *probe.value_mut(k) = orig - h;
            let down = objective(&probe)?;
            *probe.value_mut(k) = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let analytic: Vec<f64> = analytic.iter_values().collect();
        Ok(relative_error(&analytic, &numeric))
    }
}

/// Runs `cases` random gradient checks.
pub fn gradient_check(seed: u64, cases: usize) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport::new();
    for case in 0..cases {
        let problem = GradientCase::random(&mut rng)?;
        let err = problem.check(FD_STEP)?;
        report.record(err, || {
            format!(
                "case={case} seed={seed} bags={} M={} C={} config={:?}",
                problem.bags.len(),
                problem.bags[0].size(),
                problem.params.output_dim(),
                problem.config
            )
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_matches_hand_values() {
        // bag of 4, class-0 count 2; column [0.5, 0.5, 0, 0]-like predictions
        let preds = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let w = reference_weights(&[2, 2], &preds, 1.0, 1.0);
        assert_eq!(w, vec![1.0; 4]);
        let w = reference_weights(&[4, 0], &preds, 1.0, 1.0);
        assert_eq!(&w[2..], &[0.0, 0.0]);
    }

    #[test]
    fn zero_cases_pass_vacuously() {
        let r = dew_equivalence(0, 0).unwrap();
        assert_eq!(r.cases, 0);
        assert!(r.passed(DEW_TOLERANCE));
        assert!(gradient_check(0, 0).unwrap().passed(GRADIENT_TOLERANCE));
    }

    #[test]
    fn small_runs_agree() {
        assert!(dew_equivalence(3, 200).unwrap().passed(DEW_TOLERANCE));
        let g = gradient_check(3, 5).unwrap();
        assert!(g.passed(GRADIENT_TOLERANCE), "{g:?}");
    }

    #[test]
    fn relative_error_detects_disagreement() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!(relative_error(&[1.0, 0.0], &[0.0, 1.0]) > 0.5);
    }
}
