//! Synthetic weak-supervision corpora and seeded train/valid/test splitting.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, EvalSplit, FeatureMatrix, GoldLabels, LabelMatrix, TrainSplit, ABSTAIN};
use crate::error::{Error, Result};

/// Parameters of the Gaussian-cluster corpus with class-conditional LF noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub dim: usize,
    pub num_classes: usize,
    /// Distance between any two class means when `dim >= num_classes`.
    pub class_separation: f64,
    /// One entry per LF; the number of LFs is the length of this vector.
    pub lf_accuracy: Vec<f64>,
    pub lf_coverage: Vec<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The standard evaluation corpus: 200/100/100 points, d = 5, C = 3 and
    /// eight LFs (five at 0.95 accuracy, two at 0.7, one at 0.34), all at 0.85 coverage.
    pub fn standard_fixture(seed: u64) -> Self {
        let mut lf_accuracy = vec![0.95; 5];
        lf_accuracy.extend([0.7, 0.7, 0.34]);
        Self {
            n_train: 200,
            n_valid: 100,
            n_test: 100,
            dim: 5,
            num_classes: 3,
            class_separation: 2.5,
            lf_coverage: vec![0.85; lf_accuracy.len()],
            lf_accuracy,
            seed,
        }
    }

    pub fn num_lfs(&self) -> usize {
        self.lf_accuracy.len()
    }

    fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_valid == 0 || self.n_test == 0 {
            return Err(Error::domain("all split sizes must be positive"));
        }
        if self.dim == 0 {
            return Err(Error::domain("feature dimension must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::domain("need at least 2 classes"));
        }
        if self.lf_accuracy.is_empty() {
            return Err(Error::domain("need at least one labeling function"));
        }
        if self.lf_coverage.len() != self.lf_accuracy.len() {
            return Err(Error::domain("lf_accuracy and lf_coverage lengths differ"));
        }
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !self.lf_accuracy.iter().copied().all(unit) {
            return Err(Error::domain("LF accuracies must lie in (0, 1]"));
        }
        if !self.lf_coverage.iter().copied().all(unit) {
            return Err(Error::domain("LF coverages must lie in (0, 1]"));
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return Err(Error::domain("class separation must be finite and nonnegative"));
        }
        Ok(())
    }
}

struct Sample {
    features: Vec<f64>,
    gold: Vec<usize>,
    votes: Vec<i32>,
}

fn class_means(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (c, d) = (spec.num_classes, spec.dim);
    let r = spec.class_separation / std::f64::consts::SQRT_2;
    (0..c)
        .map(|k| {
            if d >= c {
                let mut m = vec![0.0; d];
                m[k] = r;
                m
            } else {
                let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| r * x / norm).collect()
            }
        })
        .collect()
}

fn draw(spec: &SyntheticSpec, means: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Sample {
    let (c, d, m) = (spec.num_classes, spec.dim, spec.num_lfs());
    let mut out = Sample {
        features: Vec::with_capacity(n * d),
        gold: Vec::with_capacity(n),
        votes: Vec::with_capacity(n * m),
    };
    for _ in 0..n {
        let y = rng.random_range(0..c);
        for mu in &means[y] {
            let z: f64 = rng.sample(StandardNormal);
            out.features.push(mu + z);
        }
        for j in 0..m {
            let covers = rng.random::<f64>() < spec.lf_coverage[j];
            let correct = rng.random::<f64>() < spec.lf_accuracy[j];
            let wrong = rng.random_range(0..c - 1);
            let vote = match (covers, correct) {
                (false, _) => ABSTAIN,
                (true, true) => y as i32 + 1,
                (true, false) => (if wrong >= y { wrong + 1 } else { wrong }) as i32 + 1,
            };
            out.votes.push(vote);
        }
        out.gold.push(y);
    }
    out
}

/// Draws a seeded corpus. Every split keeps its gold labels for evaluation;
/// only the train split carries votes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec, &mut rng);
    let (c, d, m) = (spec.num_classes, spec.dim, spec.num_lfs());
    let tr = draw(spec, &means, spec.n_train, &mut rng);
    let va = draw(spec, &means, spec.n_valid, &mut rng);
    let te = draw(spec, &means, spec.n_test, &mut rng);
    let train = TrainSplit {
        features: FeatureMatrix::new(spec.n_train, d, tr.features)?,
        votes: LabelMatrix::new(spec.n_train, m, c, tr.votes)?,
        gold: Some(GoldLabels::new(tr.gold, c)?),
    };
    let eval = |s: Sample, n: usize| -> Result<EvalSplit> {
        Ok(EvalSplit { features: FeatureMatrix::new(n, d, s.features)?, gold: GoldLabels::new(s.gold, c)? })
    };
    DatasetBundle::new(train, eval(va, spec.n_valid)?, eval(te, spec.n_test)?, spec.seed)
}

/// Shuffles the index set with `seed` and cuts it into three disjoint splits.
pub fn split(
    features: &FeatureMatrix,
    labels: &GoldLabels,
    votes: &LabelMatrix,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetBundle> {
    let n = features.n();
    if labels.len() != n || votes.n() != n {
        return Err(Error::shape("features, gold labels and votes must have equal row counts"));
    }
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    let n_train = (a * n as f64).round() as usize;
    let n_valid = (b * n as f64).round() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(Error::domain(format!(
            "fractions {fractions:?} leave an empty split for N={n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, rest) = idx.split_at(n_train);
    let (va, te) = rest.split_at(n_valid);
    let train = TrainSplit {
        features: features.select_rows(tr),
        votes: votes.select_rows(tr),
        gold: Some(labels.select_rows(tr)),
    };
    let valid = EvalSplit { features: features.select_rows(va), gold: labels.select_rows(va) };
    let test = EvalSplit { features: features.select_rows(te), gold: labels.select_rows(te) };
    DatasetBundle::new(train, valid, test, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(acc: f64, cov: f64, n: usize) -> SyntheticSpec {
        SyntheticSpec {
            n_train: n,
            n_valid: 10,
            n_test: 10,
            dim: 5,
            num_classes: 3,
            class_separation: 2.0,
            lf_accuracy: vec![acc; 6],
            lf_coverage: vec![cov; 6],
            seed: 7,
        }
    }

    #[test]
    fn perfect_lfs_vote_gold() {
        let b = generate_synthetic(&spec(1.0, 1.0, 300)).unwrap();
        let gold = b.train.gold.as_ref().unwrap();
        for i in 0..300 {
            for j in 0..6 {
                assert_eq!(b.train.votes.class_of(i, j), Some(gold.get(i)));
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(&spec(0.7, 0.8, 300)).unwrap();
        let b = generate_synthetic(&spec(0.7, 0.8, 300)).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let mut other = spec(0.7, 0.8, 300);
        other.seed = 8;
        assert_ne!(generate_synthetic(&other).unwrap(), a);
    }

    #[test]
    fn empirical_accuracy_and_coverage() {
        let b = generate_synthetic(&spec(0.7, 0.8, 10_000)).unwrap();
        let gold = b.train.gold.as_ref().unwrap();
        for j in 0..6 {
            let (mut voted, mut right) = (0usize, 0usize);
            for i in 0..10_000 {
                if let Some(v) = b.train.votes.class_of(i, j) {
                    voted += 1;
                    right += usize::from(v == gold.get(i));
                }
            }
            let cov = voted as f64 / 10_000.0;
            let acc = right as f64 / voted as f64;
            assert!((cov - 0.8).abs() < 0.02, "lf {j} coverage {cov}");
            assert!((acc - 0.7).abs() < 0.02, "lf {j} accuracy {acc}");
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = spec(0.7, 0.8, 10);
        s.lf_accuracy[0] = 0.0;
        assert!(matches!(generate_synthetic(&s), Err(Error::Domain(_))));
        let mut s = spec(0.7, 0.8, 10);
        s.lf_coverage[2] = 1.5;
        assert!(matches!(generate_synthetic(&s), Err(Error::Domain(_))));
    }

    fn toy(n: usize) -> (FeatureMatrix, GoldLabels, LabelMatrix) {
        let x = FeatureMatrix::new(n, 1, (0..n).map(|v| v as f64).collect()).unwrap();
        let g = GoldLabels::new((0..n).map(|i| i % 2).collect(), 2).unwrap();
        let l = LabelMatrix::new(n, 1, 2, (0..n).map(|i| (i % 2) as i32 + 1).collect()).unwrap();
        (x, g, l)
    }

    #[test]
    fn split_sizes_and_partition() {
        let (x, g, l) = toy(10);
        let b = split(&x, &g, &l, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((b.train.features.n(), b.valid.features.n(), b.test.features.n()), (8, 1, 1));
        let mut all: Vec<i64> = [&b.train.features, &b.valid.features, &b.test.features]
            .iter()
            .flat_map(|f| f.as_slice().iter().map(|&v| v as i64))
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // rows stay aligned with their votes
        for i in 0..8 {
            let v = b.train.features.row(i)[0] as usize;
            assert_eq!(b.train.votes.get(i, 0), (v % 2) as i32 + 1);
        }
        assert_eq!(split(&x, &g, &l, (0.8, 0.1, 0.1), 3).unwrap(), b);
    }

    #[test]
    fn split_rejects_empty_part() {
        let (x, g, l) = toy(10);
        assert!(matches!(split(&x, &g, &l, (0.5, 0.5, 0.0), 1), Err(Error::Domain(_))));
        assert!(matches!(split(&x, &g, &l, (0.5, 0.4, 0.2), 1), Err(Error::Domain(_))));
    }
}
