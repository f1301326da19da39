use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IhvpSolverConfig;
use crate::error::{Error, Result};
use crate::wsdata::LabelMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rw,
    RwExp,
    Wm,
    RelatifRw,
    RelatifWm,
    SelfRw,
    SelfWm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rw => "rw",
            Method::RwExp => "rw_exp",
            Method::Wm => "wm",
            Method::RelatifRw => "relatif_rw",
            Method::RelatifWm => "relatif_wm",
            Method::SelfRw => "self_rw",
            Method::SelfWm => "self_wm",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rw" => Method::Rw,
            "rw_exp" => Method::RwExp,
            "wm" => Method::Wm,
            "relatif_rw" => Method::RelatifRw,
            "relatif_wm" => Method::RelatifWm,
            "self_rw" => Method::SelfRw,
            "self_wm" => Method::SelfWm,
            other => return Err(Error::domain(format!("unknown influence method `{other}`"))),
        })
    }
}

/// Metadata written next to the score CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub method: Method,
    pub holdout_id: String,
    pub solver: IhvpSolverConfig,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub has_unattributed: bool,
}

/// Dense `N × M × C` scores, flattened as `(i*M + j)*C + c`.
///
/// `unattributed` holds per-(i, c) scores of loss terms no LF owns: the
/// class-prior pseudo-LF and the uniform labels of points without evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceTensor {
    meta: TensorMeta,
    scores: Vec<f64>,
    unattributed: Option<Vec<f64>>,
}

impl InfluenceTensor {
    pub fn new(meta: TensorMeta, scores: Vec<f64>, unattributed: Option<Vec<f64>>) -> Result<Self> {
        if scores.len() != meta.n * meta.m * meta.c {
            return Err(Error::shape(format!(
                "{} scores for a {}x{}x{} tensor",
                scores.len(),
                meta.n,
                meta.m,
                meta.c
            )));
        }
        if let Some(u) = &unattributed {
            if u.len() != meta.n * meta.c {
                return Err(Error::shape("unattributed scores must be N x C"));
            }
        }
        if scores.iter().chain(unattributed.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::numerical("influence scores must be finite"));
        }
        let meta = TensorMeta { has_unattributed: unattributed.is_some(), ..meta };
        Ok(Self { meta, scores, unattributed })
    }

    pub fn meta(&self) -> &TensorMeta {
        &self.meta
    }

    pub fn method(&self) -> Method {
        self.meta.method
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.meta.n, self.meta.m, self.meta.c)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.scores[(i * self.meta.m + j) * self.meta.c + c]
    }

    /// Scores of `(i, j, ·)`.
    pub fn slice(&self, i: usize, j: usize) -> &[f64] {
        let c = self.meta.c;
        let start = (i * self.meta.m + j) * c;
        &self.scores[start..start + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn unattributed(&self) -> Option<&[f64]> {
        self.unattributed.as_deref()
    }

    /// Writes `i,j,c,score` rows; unattributed terms use `j = prior`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| Error::Io { path: path.to_path_buf(), source };
        let mut f = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "i,j,c,score").map_err(io)?;
        let (n, m, c) = self.shape();
        for i in 0..n {
            for j in 0..m {
                for k in 0..c {
                    writeln!(f, "{i},{j},{k},{:e}", self.get(i, j, k)).map_err(io)?;
                }
            }
            if let Some(u) = &self.unattributed {
                for k in 0..c {
                    writeln!(f, "{i},prior,{k},{:e}", u[i * c + k]).map_err(io)?;
                }
            }
        }
        f.flush().map_err(io)
    }
}

/// Reads a score CSV written by [`InfluenceTensor::write_csv`] back against its metadata.
pub fn read_tensor_csv(path: impl AsRef<Path>, meta: TensorMeta) -> Result<InfluenceTensor> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound { what: "influence scores", path: path.to_path_buf() },
        _ => Error::Io { path: path.to_path_buf(), source: e },
    })?;
    let (n, m, c) = (meta.n, meta.m, meta.c);
    let mut scores = vec![0.0; n * m * c];
    let mut unattributed = meta.has_unattributed.then(|| vec![0.0; n * c]);
    for (row, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        if row == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(Error::Parse { row: row + 1, col: 1, msg: format!("expected 4 fields, found {}", f.len()) });
        }
        let idx = |col: usize| -> Result<usize> {
            f[col].parse().map_err(|_| Error::Parse { row: row + 1, col: col + 1, msg: format!("bad index `{}`", f[col]) })
        };
        let i = idx(0)?;
        let k = idx(2)?;
        let v: f64 =
            f[3].parse().map_err(|_| Error::Parse { row: row + 1, col: 4, msg: format!("bad score `{}`", f[3]) })?;
        if i >= n || k >= c {
            return Err(Error::shape(format!("row {}: index out of range", row + 1)));
        }
        if f[1] == "prior" {
            match &mut unattributed {
                Some(u) => u[i * c + k] = v,
                None => return Err(Error::shape("prior rows present but metadata declares none")),
            }
        } else {
            let j = idx(1)?;
            if j >= m {
                return Err(Error::shape(format!("row {}: LF index out of range", row + 1)));
            }
            scores[(i * m + j) * c + k] = v;
        }
    }
    InfluenceTensor::new(meta, scores, unattributed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Data,
    Lf,
    Vote,
    Parameter,
}

/// Aggregated scores with their index tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub level: Level,
    /// Index tuple for each score: `(i)`, `(j)`, `(i, j)` or `(j, k, c)`.
    pub keys: Vec<Vec<usize>>,
    pub scores: Vec<f64>,
}

impl Aggregate {
    /// Positions sorted by descending score, ties by position.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }

    /// Ranked CSV report.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| Error::Io { path: path.to_path_buf(), source };
        let mut f = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let header = match self.level {
            Level::Data => "rank,i,score",
            Level::Lf => "rank,j,score",
            Level::Vote => "rank,i,j,score",
            Level::Parameter => "rank,j,k,c,score",
        };
        writeln!(f, "{header}").map_err(io)?;
        for (rank, p) in self.ranking().into_iter().enumerate() {
            let key: Vec<String> = self.keys[p].iter().map(usize::to_string).collect();
            writeln!(f, "{},{},{:e}", rank + 1, key.join(","), self.scores[p]).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// Sums a tensor at one of four granularities. The data level includes
/// unattributed terms so that it reproduces point-level influence.
pub fn aggregate_influence(t: &InfluenceTensor, level: Level, votes: Option<&LabelMatrix>) -> Result<Aggregate> {
    let (n, m, c) = t.shape();
    match level {
        Level::Data => {
            let scores = (0..n)
                .map(|i| {
                    let mut s: f64 = t.scores[i * m * c..(i + 1) * m * c].iter().sum();
                    if let Some(u) = &t.unattributed {
                        s += u[i * c..(i + 1) * c].iter().sum::<f64>();
                    }
                    s
                })
                .collect();
            Ok(Aggregate { level, keys: (0..n).map(|i| vec![i]).collect(), scores })
        }
        Level::Lf => {
            let mut scores = vec![0.0; m];
            for i in 0..n {
                for (j, s) in scores.iter_mut().enumerate() {
                    *s += t.slice(i, j).iter().sum::<f64>();
                }
            }
            Ok(Aggregate { level, keys: (0..m).map(|j| vec![j]).collect(), scores })
        }
        Level::Vote => {
            let mut keys = Vec::with_capacity(n * m);
            let mut scores = Vec::with_capacity(n * m);
            for i in 0..n {
                for j in 0..m {
                    keys.push(vec![i, j]);
                    scores.push(t.slice(i, j).iter().sum());
                }
            }
            Ok(Aggregate { level, keys, scores })
        }
        Level::Parameter => {
            let votes = votes.ok_or_else(|| Error::domain("parameter-level aggregation needs the label matrix"))?;
            if votes.n() != n || votes.m() != m || votes.num_classes() != c {
                return Err(Error::shape("label matrix does not match the tensor"));
            }
            let mut scores = vec![0.0; m * (c + 1) * c];
            for i in 0..n {
                for j in 0..m {
                    let k = votes.vote_row(i, j);
                    for cc in 0..c {
                        scores[(j * (c + 1) + k) * c + cc] += t.get(i, j, cc);
                    }
                }
            }
            let mut keys = Vec::with_capacity(scores.len());
            for j in 0..m {
                for k in 0..=c {
                    for cc in 0..c {
                        keys.push(vec![j, k, cc]);
                    }
                }
            }
            Ok(Aggregate { level, keys, scores })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(n: usize, m: usize, c: usize, unattributed: bool) -> InfluenceTensor {
        let meta = TensorMeta {
            method: Method::Rw,
            holdout_id: "valid".into(),
            solver: IhvpSolverConfig::default(),
            n,
            m,
            c,
            has_unattributed: false,
        };
        let scores = (0..n * m * c).map(|v| ((v * 7 % 11) as f64 - 5.0) * 0.1).collect();
        let u = unattributed.then(|| (0..n * c).map(|v| v as f64 * 0.01).collect());
        InfluenceTensor::new(meta, scores, u).unwrap()
    }

    #[test]
    fn level_sums_agree() {
        let t = tensor(4, 3, 2, false);
        let total: f64 = t.as_slice().iter().sum();
        let data: f64 = aggregate_influence(&t, Level::Data, None).unwrap().scores.iter().sum();
        let lf: f64 = aggregate_influence(&t, Level::Lf, None).unwrap().scores.iter().sum();
        let vote: f64 = aggregate_influence(&t, Level::Vote, None).unwrap().scores.iter().sum();
        assert!((data - total).abs() < 1e-12 && (lf - total).abs() < 1e-12 && (vote - total).abs() < 1e-12);
    }

    #[test]
    fn parameter_level_partitions_lf_level() {
        let t = tensor(4, 3, 2, false);
        let votes = LabelMatrix::from_rows(
            &[vec![1, -1, 2], vec![2, 2, -1], vec![-1, 1, 1], vec![1, 2, 2]],
            2,
        )
        .unwrap();
        let p = aggregate_influence(&t, Level::Parameter, Some(&votes)).unwrap();
        let lf = aggregate_influence(&t, Level::Lf, None).unwrap();
        for j in 0..3 {
            let s: f64 = p.keys.iter().zip(&p.scores).filter(|(k, _)| k[0] == j).map(|(_, v)| v).sum();
            assert!((s - lf.scores[j]).abs() < 1e-12);
        }
        assert!(matches!(aggregate_influence(&t, Level::Parameter, None), Err(Error::Domain(_))));
    }

    #[test]
    fn data_level_includes_unattributed() {
        let t = tensor(2, 2, 2, true);
        let d = aggregate_influence(&t, Level::Data, None).unwrap();
        let expect0: f64 = t.as_slice()[..4].iter().sum::<f64>() + 0.0 + 0.01;
        assert!((d.scores[0] - expect0).abs() < 1e-15);
    }

    #[test]
    fn ranking_is_descending_and_stable() {
        let a = Aggregate { level: Level::Data, keys: vec![vec![0], vec![1], vec![2]], scores: vec![1.0, 3.0, 1.0] };
        assert_eq!(a.ranking(), vec![1, 0, 2]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let t = tensor(3, 2, 3, true);
        t.write_csv(&path).unwrap();
        let back = read_tensor_csv(&path, t.meta().clone()).unwrap();
        assert_eq!(back, t);
        let json = serde_json::to_value(t.meta()).unwrap();
        assert_eq!(json["method"], "rw");
        assert_eq!(json["solver"]["kind"], "exact");
    }

    #[test]
    fn rejects_bad_shapes() {
        let meta = tensor(1, 1, 2, false).meta().clone();
        assert!(InfluenceTensor::new(meta.clone(), vec![0.0; 3], None).is_err());
        assert!(InfluenceTensor::new(meta, vec![f64::NAN, 0.0], None).is_err());
    }
}
