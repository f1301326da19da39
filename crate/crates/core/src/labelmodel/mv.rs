use super::{Sigma, WTensor};
use crate::error::Result;
use crate::wsdata::LabelMatrix;

/// Majority vote as an identity tensor: `W[j, k, c] = 1{k = c}` on the class
/// rows, zero on the abstain row. Only the shape of `votes` is used.
pub fn fit_majority_vote(votes: &LabelMatrix) -> Result<WTensor> {
    let (m, c) = (votes.m(), votes.num_classes());
    let mut w = vec![0.0; m * (c + 1) * c];
    for j in 0..m {
        for k in 1..=c {
            w[(j * (c + 1) + k) * c + (k - 1)] = 1.0;
        }
    }
    WTensor::new(Sigma::Identity, m, c, w, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelmodel::infer_labels;
    use proptest::prelude::*;

    fn row(r: Vec<i32>, c: usize) -> LabelMatrix {
        LabelMatrix::from_rows(&[r], c).unwrap()
    }

    #[test]
    fn ones_on_diagonal() {
        let w = fit_majority_vote(&row(vec![1, 2, -1], 2)).unwrap();
        assert_eq!(w.weights().iter().filter(|&&v| v == 1.0).count(), 6);
        assert_eq!(w.weights().iter().sum::<f64>(), 6.0);
        for j in 0..3 {
            assert_eq!(w.slab(j, 0), &[0.0, 0.0]);
            assert_eq!(w.slab(j, 1), &[1.0, 0.0]);
            assert_eq!(w.slab(j, 2), &[0.0, 1.0]);
        }
    }

    #[test]
    fn vote_counting() {
        let l = row(vec![1, 1, 2], 2);
        let p = infer_labels(&fit_majority_vote(&l).unwrap(), &l).unwrap();
        assert!((p.row(0)[0] - 2.0 / 3.0).abs() < 1e-15);
        let l = row(vec![1, 2, 1], 2);
        let p = infer_labels(&fit_majority_vote(&l).unwrap(), &l).unwrap();
        assert!((p.row(0)[1] - 1.0 / 3.0).abs() < 1e-15);
        let l = row(vec![1, -1, -1], 2);
        let p = infer_labels(&fit_majority_vote(&l).unwrap(), &l).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn all_abstain_is_uniform_and_flagged() {
        let l = LabelMatrix::from_rows(&[vec![1, 3], vec![-1, -1]], 3).unwrap();
        let p = infer_labels(&fit_majority_vote(&l).unwrap(), &l).unwrap();
        assert_eq!(p.row(1), &[1.0 / 3.0; 3]);
        assert_eq!(p.degenerate_rows(), &[1]);
    }

    proptest! {
        #[test]
        fn equals_vote_fractions(c in 2usize..5, r in prop::collection::vec(-1i32..5, 1..7)) {
            let r: Vec<i32> = r.into_iter().map(|v| if v == 0 || v > c as i32 { -1 } else { v }).collect();
            let voted = r.iter().filter(|&&v| v > 0).count();
            prop_assume!(voted > 0);
            let l = row(r.clone(), c);
            let p = infer_labels(&fit_majority_vote(&l).unwrap(), &l).unwrap();
            for k in 0..c {
                let count = r.iter().filter(|&&v| v == k as i32 + 1).count();
                prop_assert!((p.row(0)[k] - count as f64 / voted as f64).abs() < 1e-12);
            }
        }
    }
}
