//! Bag proportion loss, weighted pseudo-label loss and their sum.
//!
//! Predictions for a batch of bags are stored as one matrix whose rows are
//! laid out bag by bag, in the order of the `bags` slice. Gradients are
//! returned with respect to those probability matrices; the model turns them
//! into parameter gradients.

use std::ops::Range;

use crate::dew::{combined_weights, WeightSwitches};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::types::{argmax, Bag, DewWeights, PseudoLabel};

/// Lower clamp applied to every logarithm argument.
pub const LOG_CLAMP: f64 = 1e-12;

#[inline]
fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_CLAMP).ln()
}

/// Derivative of `ln(max(x, LOG_CLAMP))`.
#[inline]
fn clamped_ln_grad(x: f64) -> f64 {
    if x >= LOG_CLAMP {
        1.0 / x
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagProportionEstimate {
    pub values: Vec<f64>,
}

/// Mean of the bag's predicted probability vectors.
pub fn predicted_proportion<P: AsRef<[f64]>>(weak_predictions: &[P]) -> Result<BagProportionEstimate> {
    let first = weak_predictions
        .first()
        .ok_or_else(|| Error::InvalidArgument("bag has no predictions".into()))?;
    let mut values = vec![0.0; first.as_ref().len()];
    for p in weak_predictions {
        for (v, x) in values.iter_mut().zip(p.as_ref()) {
            *v += x;
        }
    }
    let m = weak_predictions.len() as f64;
    values.iter_mut().for_each(|v| *v /= m);
    Ok(BagProportionEstimate { values })
}

/// `−Σ_c p_c ln max(q_c, LOG_CLAMP)`; classes with `p_c = 0` contribute nothing.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pc, _)| pc != 0.0)
        .map(|(&pc, &qc)| -pc * clamped_ln(qc))
        .sum()
}

/// Row ranges of each bag inside the stacked prediction matrix.
pub fn bag_row_ranges(bags: &[&Bag]) -> Vec<Range<usize>> {
    let mut start = 0;
    bags.iter()
        .map(|b| {
            let r = start..start + b.size();
            start = r.end;
            r
        })
        .collect()
}

fn check_rows(bags: &[&Bag], m: &Matrix, what: &str) -> Result<Vec<Range<usize>>> {
    let ranges = bag_row_ranges(bags);
    let total = ranges.last().map_or(0, |r| r.end);
    if total != m.rows() {
        return Err(Error::Shape(format!("{what}: {} rows for {total} bagged instances", m.rows())));
    }
    if bags.is_empty() {
        return Err(Error::InvalidArgument("no bags in batch".into()));
    }
    if let Some(b) = bags.iter().find(|b| b.class_count() != m.cols()) {
        return Err(Error::Shape(format!("{what}: {} classes, bag has {}", m.cols(), b.class_count())));
    }
    Ok(ranges)
}

/// A scalar loss, its per-bag parts and its gradient w.r.t. the probability matrix.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub per_bag: Vec<f64>,
    pub grad: Matrix,
}

/// `L_b = (1/N) Σ_i H(p_i, p̄_i)` over the bags of the batch.
pub fn bag_loss(bags: &[&Bag], weak: &Matrix) -> Result<LossGrad> {
    let ranges = check_rows(bags, weak, "bag loss")?;
    let n = bags.len() as f64;
    let mut grad = Matrix::zeros(weak.rows(), weak.cols());
    let mut per_bag = Vec::with_capacity(bags.len());
    for (bag, range) in bags.iter().zip(ranges) {
        let m = range.len() as f64;
        let rows: Vec<&[f64]> = range.clone().map(|r| weak.row(r)).collect();
        let pbar = predicted_proportion(&rows)?.values;
        per_bag.push(cross_entropy(&bag.proportions, &pbar));

        // ∂/∂ŷ_{j,c} = −p_c / (M·N·p̄_c)
        let g: Vec<f64> = bag
            .proportions
            .iter()
            .zip(&pbar)
            .map(|(&pc, &q)| if pc == 0.0 { 0.0 } else { -pc * clamped_ln_grad(q) / (m * n) })
            .collect();
        for r in range {
            grad.row_mut(r).copy_from_slice(&g);
        }
    }
    let value = per_bag.iter().sum::<f64>() / n;
    Ok(LossGrad { value, per_bag, grad })
}

/// One-hot target at the argmax (ties to the lowest class).
pub fn harden(weak_prediction: &[f64]) -> PseudoLabel {
    PseudoLabel::new(argmax(weak_prediction), weak_prediction.len())
}

/// `L_i = (1/(N·M)) Σ ω_j · (−ln ŷ^s_{j, c̃_j})`; the weights are constants.
///
/// `per_bag` is left empty; the normaliser is the number of rows of `strong`.
pub fn instance_loss(pseudo_labels: &[PseudoLabel], strong: &Matrix, weights: &[f64]) -> Result<LossGrad> {
    let n = strong.rows();
    if pseudo_labels.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "{} pseudo-labels, {} weights, {n} predictions",
            pseudo_labels.len(),
            weights.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no instances".into()));
    }
    let norm = n as f64;
    let mut grad = Matrix::zeros(n, strong.cols());
    let mut total = 0.0;
    for (j, (label, &w)) in pseudo_labels.iter().zip(weights).enumerate() {
        let c = label.class_index;
        let q = strong.get(j, c);
        total += w * -clamped_ln(q);
        grad.set(j, c, -w * clamped_ln_grad(q) / norm);
    }
    Ok(LossGrad {
        value: total / norm,
        per_bag: Vec::new(),
        grad,
    })
}

/// Hyperparameters of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub beta_b: f64,
    pub beta_i: f64,
    pub switches: WeightSwitches,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            beta_b: 1.0,
            beta_i: 1.0,
            switches: WeightSwitches::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub bag_loss: f64,
    pub instance_loss: f64,
    pub total: f64,
    pub per_bag: Vec<f64>,
    pub mean_weight: f64,
    pub mean_bag_weight: f64,
    pub mean_instance_weight: f64,
}

/// Everything one evaluation of the objective produces.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub report: LossReport,
    pub pseudo_labels: Vec<PseudoLabel>,
    pub weights: Vec<DewWeights>,
    pub grad_weak: Matrix,
    pub grad_strong: Matrix,
}

/// Pseudo-labels and weights for every row, derived from the weak view.
pub fn pseudo_labels_and_weights(
    bags: &[&Bag],
    weak: &Matrix,
    config: &LossConfig,
) -> Result<(Vec<PseudoLabel>, Vec<DewWeights>)> {
    let ranges = check_rows(bags, weak, "weights")?;
    let mut pseudo = Vec::with_capacity(weak.rows());
    let mut weights = Vec::with_capacity(weak.rows());
    for (bag, range) in bags.iter().zip(ranges) {
        let rows: Vec<&[f64]> = range.map(|r| weak.row(r)).collect();
        pseudo.extend(rows.iter().map(|r| harden(r)));
        weights.extend(combined_weights(bag, &rows, config.beta_b, config.beta_i, config.switches)?);
    }
    Ok((pseudo, weights))
}

/// `L = L_b + λ·L_i`. With `λ = 0` this is the plain proportion loss.
pub fn total_loss(bags: &[&Bag], weak: &Matrix, strong: &Matrix, config: &LossConfig) -> Result<TotalLoss> {
    if weak.rows() != strong.rows() || weak.cols() != strong.cols() {
        return Err(Error::Shape("weak and strong predictions differ in shape".into()));
    }
    let lb = bag_loss(bags, weak)?;
    let (pseudo_labels, weights) = pseudo_labels_and_weights(bags, weak, config)?;
    let omega: Vec<f64> = weights.iter().map(|w| w.combined).collect();
    let li = instance_loss(&pseudo_labels, strong, &omega)?;

    let mut grad_strong = li.grad;
    grad_strong.as_mut_slice().iter_mut().for_each(|g| *g *= config.lambda);

    let n = weights.len() as f64;
    let mean = |f: fn(&DewWeights) -> f64| weights.iter().map(f).sum::<f64>() / n;
    let report = LossReport {
        bag_loss: lb.value,
        instance_loss: li.value,
        total: lb.value + config.lambda * li.value,
        per_bag: lb.per_bag,
        mean_weight: mean(|w| w.combined),
        mean_bag_weight: mean(|w| w.bag_weight),
        mean_instance_weight: mean(|w| w.instance_weight),
    };
    Ok(TotalLoss {
        report,
        pseudo_labels,
        weights,
        grad_weak: lb.grad,
        grad_strong,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn proportion_examples() {
        assert_eq!(predicted_proportion(&[[0.3, 0.7]]).unwrap().values, vec![0.3, 0.7]);
        assert_eq!(predicted_proportion(&[[1.0, 0.0], [0.0, 1.0]]).unwrap().values, vec![0.5, 0.5]);
        let p = predicted_proportion(&[[0.2, 0.8], [0.3, 0.7], [0.5, 0.5]]).unwrap();
        close(p.values[0], 1.0 / 3.0, 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        close(cross_entropy(&[0.5, 0.5], &[0.5, 0.5]), LN_2, 1e-15);
        // −0.5 ln 0.25 − 0.5 ln 0.75
        close(cross_entropy(&[0.5, 0.5], &[0.25, 0.75]), 0.836_988, 1e-6);
        assert!(cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).is_finite());
    }

    #[test]
    fn bag_loss_over_batch_is_mean() {
        let b1 = Bag::from_counts(vec![0, 1], vec![1, 1]).unwrap();
        let b2 = Bag::from_counts(vec![2, 3], vec![2, 0]).unwrap();
        let weak = Matrix::from_vec(4, 2, vec![0.5, 0.5, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let lb = bag_loss(&[&b1, &b2], &weak).unwrap();
        // bag 1: p̄ = [0.25, 0.75]; bag 2: p̄ = [1, 0] matches exactly
        close(lb.per_bag[0], 0.836_988, 1e-6);
        assert_eq!(lb.per_bag[1], 0.0);
        close(lb.value, lb.per_bag[0] / 2.0, 1e-15);
    }

    #[test]
    fn harden_examples() {
        assert_eq!(harden(&[0.2, 0.5, 0.3]).class_index, 1);
        assert_eq!(harden(&[0.5, 0.5]).class_index, 0);
        assert_eq!(harden(&[1.0 / 3.0; 3]).onehot, vec![1, 0, 0]);
    }

    #[test]
    fn instance_loss_examples() {
        let labels = vec![PseudoLabel::new(0, 2), PseudoLabel::new(1, 2)];
        let strong = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let li = instance_loss(&labels, &strong, &[1.0, 1.0]).unwrap();
        close(li.value, LN_2 / 2.0, 1e-15);
        let li = instance_loss(&labels, &strong, &[1.0, 0.0]).unwrap();
        assert_eq!(li.value, 0.0);
        assert!(li.grad.row(1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn lambda_zero_is_bag_loss() {
        let b = Bag::from_counts(vec![0, 1, 2], vec![2, 1]).unwrap();
        let weak = Matrix::from_vec(3, 2, vec![0.7, 0.3, 0.4, 0.6, 0.9, 0.1]).unwrap();
        let strong = Matrix::from_vec(3, 2, vec![0.6, 0.4, 0.2, 0.8, 0.5, 0.5]).unwrap();
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let t = total_loss(&[&b], &weak, &strong, &cfg).unwrap();
        assert_eq!(t.report.total, t.report.bag_loss);
        assert!(t.grad_strong.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_is_bag_plus_lambda_instance() {
        let b = Bag::from_counts(vec![0, 1], vec![1, 1]).unwrap();
        let weak = Matrix::from_vec(2, 2, vec![0.7, 0.3, 0.4, 0.6]).unwrap();
        let strong = Matrix::from_vec(2, 2, vec![0.6, 0.4, 0.2, 0.8]).unwrap();
        let t = total_loss(&[&b], &weak, &strong, &LossConfig::default()).unwrap();
        close(t.report.total, t.report.bag_loss + 0.5 * t.report.instance_loss, 1e-12);
    }

    mod props {
        use super::*;
        use crate::dew::entropy;
        use proptest::prelude::*;

        fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.001f64..1.0, c).prop_map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
        }

        fn batch() -> impl Strategy<Value = (Vec<Bag>, Matrix, Matrix)> {
            (1usize..4, 1usize..6).prop_flat_map(|(nb, m)| {
                let total = nb * m;
                (
                    prop::collection::vec(prop::collection::vec(0usize..3, m), nb),
                    prop::collection::vec(simplex(3), total),
                    prop::collection::vec(simplex(3), total),
                )
                    .prop_map(move |(labels, w, s)| {
                        let bags = labels
                            .into_iter()
                            .enumerate()
                            .map(|(i, ls)| {
                                Bag::from_labels((0..m).map(|j| i * m + j).collect(), &{
                                    let mut full = vec![0; total];
                                    for (j, l) in ls.iter().enumerate() {
                                        full[i * m + j] = *l;
                                    }
                                    full
                                }, 3)
                                .unwrap()
                            })
                            .collect();
                        (bags, Matrix::from_rows(&w).unwrap(), Matrix::from_rows(&s).unwrap())
                    })
            })
        }

        proptest! {
            #[test]
            fn gibbs_lower_bound((bags, weak, _s) in batch()) {
                let refs: Vec<&Bag> = bags.iter().collect();
                let lb = bag_loss(&refs, &weak).unwrap().value;
                let floor = bags.iter().map(|b| entropy(&b.proportions).unwrap()).sum::<f64>() / bags.len() as f64;
                prop_assert!(lb >= floor - 1e-12);
            }

            #[test]
            fn instance_loss_linear_in_weights((bags, weak, strong) in batch(), scale in 0.0f64..3.0) {
                let refs: Vec<&Bag> = bags.iter().collect();
                let (pseudo, w) = pseudo_labels_and_weights(&refs, &weak, &LossConfig::default()).unwrap();
                let w: Vec<f64> = w.iter().map(|x| x.combined).collect();
                let ws: Vec<f64> = w.iter().map(|x| x * scale).collect();
                let a = instance_loss(&pseudo, &strong, &w).unwrap().value;
                let b = instance_loss(&pseudo, &strong, &ws).unwrap().value;
                prop_assert!((b - scale * a).abs() <= 1e-12 * (1.0 + b.abs()));
            }

            #[test]
            fn zero_weights_equal_lambda_zero((bags, weak, strong) in batch()) {
                let refs: Vec<&Bag> = bags.iter().collect();
                let (pseudo, w) = pseudo_labels_and_weights(&refs, &weak, &LossConfig::default()).unwrap();
                let zero = vec![0.0; w.len()];
                let li = instance_loss(&pseudo, &strong, &zero).unwrap().value;
                let lb = bag_loss(&refs, &weak).unwrap().value;
                let dllp = total_loss(&refs, &weak, &strong, &LossConfig { lambda: 0.0, ..LossConfig::default() }).unwrap();
                prop_assert_eq!(lb + 0.5 * li, dllp.report.total);
            }
        }
    }
}
