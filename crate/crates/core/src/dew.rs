//! Dual entropy-based confidence weights.
//!
//! For an instance whose weak prediction argmaxes to class `c` inside bag `i`,
//! the weight is `ω = ω^b_{i,c} · ω^i`:
//!
//! * `ω^b_{i,c} = σ(H(π^b_{i,c}) − ln m_i^c; β_b)`, where `π^b_{i,c}` is the
//!   L1-normalised column of class-`c` probabilities over the bag and
//!   `ln m_i^c` is the entropy of a uniform spread over the `m_i^c` members.
//! * `ω^i = σ(H(ŷ^w); β_i)`, the one-hot reference having entropy 0.
//!
//! with `σ(x; β) = exp(−x²/β)`. All logarithms are natural.

use crate::error::{Error, Result};
use crate::types::{argmax, Bag, DewWeights};

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &p in dist {
        if p < 0.0 || p.is_nan() {
            return Err(Error::InvalidArgument(format!("negative or NaN probability {p}")));
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// `exp(−x²/β)`.
pub fn mapping_sigma(x: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok((-x * x / beta).exp())
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("beta must be positive and finite, got {beta}")))
    }
}

/// Normalised class-`c` column over one bag, plus the bag's count for `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct BagClassDistribution {
    pub class_index: usize,
    pub values: Vec<f64>,
    pub reference_count: usize,
    /// The column summed to zero before normalisation.
    pub degenerate: bool,
}

impl BagClassDistribution {
    /// Entropy of the uniform reference over `reference_count` members; `None` when the count is 0.
    pub fn reference_entropy(&self) -> Option<f64> {
        (self.reference_count > 0).then(|| (self.reference_count as f64).ln())
    }
}

pub fn bag_class_distribution<P: AsRef<[f64]>>(
    bag_predictions: &[P],
    class_index: usize,
    reference_count: usize,
) -> BagClassDistribution {
    let column: Vec<f64> = bag_predictions.iter().map(|p| p.as_ref()[class_index]).collect();
    let norm: f64 = column.iter().map(|v| v.abs()).sum();
    let degenerate = !(norm > 0.0);
    let values = if degenerate {
        column
    } else {
        column.into_iter().map(|v| v / norm).collect()
    };
    BagClassDistribution {
        class_index,
        values,
        reference_count,
        degenerate,
    }
}

/// Bag-level factor; 0 when the class is absent from the bag or the column is degenerate.
pub fn bag_weight(dist: &BagClassDistribution, beta_b: f64) -> Result<f64> {
    check_beta(beta_b)?;
    if dist.degenerate {
        return Ok(0.0);
    }
    match dist.reference_entropy() {
        None => Ok(0.0),
        Some(reference) => mapping_sigma(entropy(&dist.values)? - reference, beta_b),
    }
}

/// Instance-level factor from the weak-view prediction.
pub fn instance_weight(prediction: &[f64], beta_i: f64) -> Result<f64> {
    mapping_sigma(entropy(prediction)?, beta_i)
}

/// Which factors enter the product; a disabled factor is replaced by 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightSwitches {
    pub use_bag_weight: bool,
    pub use_instance_weight: bool,
}

impl Default for WeightSwitches {
    fn default() -> Self {
        Self {
            use_bag_weight: true,
            use_instance_weight: true,
        }
    }
}

/// Per-instance weights for one bag, aligned with `weak_predictions`.
pub fn combined_weights<P: AsRef<[f64]>>(
    bag: &Bag,
    weak_predictions: &[P],
    beta_b: f64,
    beta_i: f64,
    switches: WeightSwitches,
) -> Result<Vec<DewWeights>> {
    check_beta(beta_b)?;
    check_beta(beta_i)?;
    if weak_predictions.len() != bag.size() {
        return Err(Error::Shape(format!(
            "{} predictions for a bag of {}",
            weak_predictions.len(),
            bag.size()
        )));
    }
    let classes = bag.class_count();

    // one entropy per class column, computed only for classes some instance argmaxes to
    let mut class_factor: Vec<Option<f64>> = vec![None; classes];
    let mut out = Vec::with_capacity(weak_predictions.len());
    for pred in weak_predictions {
        let pred = pred.as_ref();
        if pred.len() != classes {
            return Err(Error::Shape(format!("prediction has {} classes, bag has {classes}", pred.len())));
        }
        let c = argmax(pred);
        let bag_w = if switches.use_bag_weight {
            match class_factor[c] {
                Some(w) => w,
                None => {
                    let w = bag_weight(&bag_class_distribution(weak_predictions, c, bag.counts[c]), beta_b)?;
                    class_factor[c] = Some(w);
                    w
                }
            }
        } else {
            1.0
        };
        let inst_w = if switches.use_instance_weight {
            instance_weight(pred, beta_i)?
        } else {
            1.0
        };
        out.push(DewWeights {
            bag_weight: bag_w,
            instance_weight: inst_w,
            combined: bag_w * inst_w,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn entropy_examples() {
        close(entropy(&[0.5, 0.5]).unwrap(), LN_2, 1e-15);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        // −0.9 ln 0.9 − 0.1 ln 0.1
        close(entropy(&[0.9, 0.1]).unwrap(), 0.325_082_973_391_448, 1e-12);
        assert!(entropy(&[1.1, -0.1]).is_err());
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(mapping_sigma(0.0, 3.7).unwrap(), 1.0);
        close(mapping_sigma(1.0, 1.0).unwrap(), 0.367_879_441_171_442_3, 1e-15);
        close(mapping_sigma(LN_2, 1.0).unwrap(), 0.618_503_137_801_576, 1e-15);
        close(mapping_sigma(-0.4, 2.0).unwrap(), mapping_sigma(0.4, 2.0).unwrap(), 0.0);
        assert!(mapping_sigma(1.0, 0.0).is_err());
        assert!(mapping_sigma(1.0, -1.0).is_err());
    }

    #[test]
    fn column_normalisation() {
        let preds = [[0.2, 0.8], [0.3, 0.7], [0.5, 0.5]];
        let d = bag_class_distribution(&preds, 0, 1);
        close(d.values.iter().sum::<f64>(), 1.0, 1e-15);
        for (a, b) in d.values.iter().zip([0.2, 0.3, 0.5]) {
            close(*a, b, 1e-15);
        }

        let flat = [[0.4, 0.6]; 3];
        let d = bag_class_distribution(&flat, 0, 1);
        for v in &d.values {
            close(*v, 1.0 / 3.0, 1e-15);
        }

        let zero = [[0.0, 1.0]; 3];
        let d = bag_class_distribution(&zero, 0, 2);
        assert!(d.degenerate);
        assert_eq!(bag_weight(&d, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn bag_weight_examples() {
        let exact = BagClassDistribution {
            class_index: 0,
            values: vec![0.5, 0.5, 0.0, 0.0],
            reference_count: 2,
            degenerate: false,
        };
        assert_eq!(bag_weight(&exact, 1.0).unwrap(), 1.0);

        let flat = BagClassDistribution {
            values: vec![0.25; 4],
            ..exact.clone()
        };
        close(bag_weight(&flat, 1.0).unwrap(), (-(LN_2 * LN_2)).exp(), 1e-15);

        let absent = BagClassDistribution {
            reference_count: 0,
            ..exact
        };
        assert_eq!(bag_weight(&absent, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn single_member_class_has_zero_reference_entropy() {
        let d = BagClassDistribution {
            class_index: 1,
            values: vec![1.0, 0.0, 0.0],
            reference_count: 1,
            degenerate: false,
        };
        assert_eq!(bag_weight(&d, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn instance_weight_examples() {
        assert_eq!(instance_weight(&[0.0, 1.0, 0.0], 1.0).unwrap(), 1.0);
        let ln10 = 10f64.ln();
        close(instance_weight(&[0.1; 10], 1.0).unwrap(), (-(ln10 * ln10)).exp(), 1e-15);
        close(instance_weight(&[0.1; 10], 1.0).unwrap(), 4.98e-3, 5e-5);
        close(instance_weight(&[0.9, 0.1], 1.0).unwrap(), 0.899_7, 5e-5);
    }

    #[test]
    fn combined_is_product_and_switches_force_one() {
        // bag of 2 with counts [1, 1]; both instances argmax class 0
        let bag = Bag::from_counts(vec![0, 1], vec![1, 1]).unwrap();
        let preds = [[0.8, 0.2], [0.6, 0.4]];
        let w = combined_weights(&bag, &preds, 1.0, 1.0, WeightSwitches::default()).unwrap();
        for x in &w {
            close(x.combined, x.bag_weight * x.instance_weight, 0.0);
        }
        assert_eq!(w[0].bag_weight, w[1].bag_weight);

        let off = WeightSwitches {
            use_bag_weight: false,
            use_instance_weight: false,
        };
        let w = combined_weights(&bag, &preds, 1.0, 1.0, off).unwrap();
        assert!(w.iter().all(|x| x.combined == 1.0));
    }

    #[test]
    fn class_absent_from_bag_gets_zero_weight() {
        let bag = Bag::from_counts(vec![0, 1], vec![2, 0]).unwrap();
        let preds = [[0.3, 0.7], [0.9, 0.1]];
        let w = combined_weights(&bag, &preds, 1.0, 1.0, WeightSwitches::default()).unwrap();
        assert_eq!(w[0].combined, 0.0);
        assert!(w[1].combined > 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.001f64..1.0, c).prop_map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
        }

        proptest! {
            #[test]
            fn weights_in_unit_interval_and_monotone_in_beta(
                p in simplex(5),
                beta in 0.05f64..20.0,
                bump in 0.0f64..5.0,
            ) {
                let a = instance_weight(&p, beta).unwrap();
                let b = instance_weight(&p, beta + bump).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!(b >= a);
            }

            #[test]
            fn permuting_bag_permutes_weights(
                preds in prop::collection::vec(simplex(3), 2..8),
                rot in 0usize..8,
            ) {
                let m = preds.len();
                let counts = { let mut c = vec![0; 3]; for i in 0..m { c[i % 3] += 1; } c };
                let bag = Bag::from_counts((0..m).collect(), counts).unwrap();
                let w = combined_weights(&bag, &preds, 1.0, 1.0, WeightSwitches::default()).unwrap();
                let mut rotated = preds.clone();
                rotated.rotate_left(rot % m);
                let wr = combined_weights(&bag, &rotated, 1.0, 1.0, WeightSwitches::default()).unwrap();
                for j in 0..m {
                    let orig = w[(j + rot % m) % m].combined;
                    prop_assert!((wr[j].combined - orig).abs() < 1e-12);
                }
            }

            #[test]
            fn bag_weight_is_one_only_at_reference_entropy(
                col in prop::collection::vec(0.001f64..1.0, 2..10),
                m in 1usize..10,
            ) {
                let d = bag_class_distribution(&col.iter().map(|&v| [v]).collect::<Vec<_>>(), 0, m);
                let w = bag_weight(&d, 1.0).unwrap();
                let gap = entropy(&d.values).unwrap() - (m as f64).ln();
                prop_assert!(w <= 1.0);
                if gap.abs() > 1e-6 { prop_assert!(w < 1.0); }
            }
        }
    }
}
