//! CSV readers and writers for votes, features and gold labels.

use std::fs;
use std::path::Path;

use super::{DatasetBundle, EvalSplit, FeatureMatrix, GoldLabels, LabelMatrix, TrainSplit, ABSTAIN};
use crate::error::{Error, Result};

const CLASSES_DIRECTIVE: &str = "#classes=";

fn read(path: &Path, what: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(Error::NotFound { what, path: path.to_path_buf() });
    }
    fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, body: String) -> Result<()> {
    fs::write(path, body).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Non-blank lines paired with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn looks_like_header(line: &str) -> bool {
    line.split(',')
        .next()
        .and_then(|f| f.trim().chars().next())
        .is_some_and(|ch| ch.is_ascii_alphabetic() || ch == '_')
}

/// Reads a vote grid. The class count comes from a leading `#classes=C`
/// directive or from `classes`; when both are present they must agree.
pub fn load_label_matrix(path: impl AsRef<Path>, classes: Option<usize>) -> Result<LabelMatrix> {
    let path = path.as_ref();
    let text = read(path, "label matrix")?;
    let mut directive = None;
    let mut rows: Vec<Vec<i32>> = Vec::new();
    let mut header_seen = false;
    for (lineno, line) in lines(&text) {
        if let Some(rest) = line.strip_prefix(CLASSES_DIRECTIVE) {
            let c = rest.trim().parse::<usize>().map_err(|e| Error::Parse {
                row: lineno,
                col: 1,
                msg: format!("bad classes directive: {e}"),
            })?;
            directive = Some(c);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        if rows.is_empty() && !header_seen && looks_like_header(line) {
            header_seen = true;
            continue;
        }
        let mut row = Vec::new();
        for (col, field) in line.split(',').enumerate() {
            let v = field.trim().parse::<i32>().map_err(|e| Error::Parse {
                row: lineno,
                col: col + 1,
                msg: format!("{field:?}: {e}"),
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::shape(format!(
                    "line {lineno} has {} columns, expected {}",
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let c = match (directive, classes) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::domain(format!(
                "classes directive says {a} but {b} was requested"
            )))
        }
        (Some(c), _) | (None, Some(c)) => c,
        (None, None) => {
            return Err(Error::domain(
                "number of classes unknown: add a '#classes=C' line or pass it explicitly",
            ))
        }
    };
    if rows.is_empty() {
        return Err(Error::shape(format!("{}: no vote rows (N=0)", path.display())));
    }
    LabelMatrix::from_rows(&rows, c)
}

pub fn save_label_matrix(path: impl AsRef<Path>, votes: &LabelMatrix) -> Result<()> {
    let mut out = format!("{CLASSES_DIRECTIVE}{}\n", votes.num_classes());
    let header: Vec<String> = (1..=votes.m()).map(|j| format!("lf_{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..votes.n() {
        let row: Vec<String> = votes.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    debug_assert!(votes.as_slice().iter().all(|&v| v == ABSTAIN || v >= 1));
    write(path.as_ref(), out)
}

/// Reads a float grid; the feature dimension is taken from the first row.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let text = read(path, "features")?;
    let mut values = Vec::new();
    let mut d = None;
    let mut n = 0;
    for (lineno, line) in lines(&text) {
        if line.starts_with('#') || (n == 0 && looks_like_header(line) && !is_float_word(line)) {
            continue;
        }
        let mut width = 0;
        for (col, field) in line.split(',').enumerate() {
            let field = field.trim();
            let v = field.parse::<f64>().map_err(|e| Error::Parse {
                row: lineno,
                col: col + 1,
                msg: format!("{field:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::domain(format!(
                    "non-finite feature {field:?} at line {lineno}, column {}",
                    col + 1
                )));
            }
            values.push(v);
            width += 1;
        }
        match d {
            None => d = Some(width),
            Some(d) if d != width => {
                return Err(Error::shape(format!(
                    "line {lineno} has {width} columns, expected {d}"
                )))
            }
            _ => {}
        }
        n += 1;
    }
    FeatureMatrix::new(n, d.unwrap_or(0), values)
}

// "nan" and "inf" start with a letter but must reach the finiteness check.
fn is_float_word(line: &str) -> bool {
    line.split(',').next().is_some_and(|f| f.trim().parse::<f64>().is_ok())
}

pub fn save_features(path: impl AsRef<Path>, x: &FeatureMatrix) -> Result<()> {
    let mut out = String::new();
    for i in 0..x.n() {
        let row: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write(path.as_ref(), out)
}

/// One one-based class per line.
pub fn load_gold_labels(path: impl AsRef<Path>, num_classes: usize) -> Result<GoldLabels> {
    let path = path.as_ref();
    let text = read(path, "gold labels")?;
    let mut labels = Vec::new();
    for (lineno, line) in lines(&text) {
        if line.starts_with('#') || (labels.is_empty() && looks_like_header(line)) {
            continue;
        }
        let y = line.parse::<i32>().map_err(|e| Error::Parse {
            row: lineno,
            col: 1,
            msg: format!("{line:?}: {e}"),
        })?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::shape(format!("{}: no gold labels", path.display())));
    }
    GoldLabels::from_one_based(&labels, num_classes)
}

pub fn save_gold_labels(path: impl AsRef<Path>, gold: &GoldLabels) -> Result<()> {
    let mut out = String::new();
    for &y in gold.as_slice() {
        out.push_str(&(y + 1).to_string());
        out.push('\n');
    }
    write(path.as_ref(), out)
}

/// File names of a dataset directory.
pub const TRAIN_VOTES: &str = "train_votes.csv";
pub const TRAIN_FEATURES: &str = "train_features.csv";
pub const TRAIN_GOLD: &str = "train_gold.csv";
pub const VALID_FEATURES: &str = "valid_features.csv";
pub const VALID_GOLD: &str = "valid_gold.csv";
pub const TEST_FEATURES: &str = "test_features.csv";
pub const TEST_GOLD: &str = "test_gold.csv";

/// Writes the seven split files into `dir`, which must exist. Train gold is
/// written only when present.
pub fn save_bundle(dir: impl AsRef<Path>, bundle: &DatasetBundle) -> Result<()> {
    let dir = dir.as_ref();
    save_label_matrix(dir.join(TRAIN_VOTES), &bundle.train.votes)?;
    save_features(dir.join(TRAIN_FEATURES), &bundle.train.features)?;
    if let Some(g) = &bundle.train.gold {
        save_gold_labels(dir.join(TRAIN_GOLD), g)?;
    }
    save_features(dir.join(VALID_FEATURES), &bundle.valid.features)?;
    save_gold_labels(dir.join(VALID_GOLD), &bundle.valid.gold)?;
    save_features(dir.join(TEST_FEATURES), &bundle.test.features)?;
    save_gold_labels(dir.join(TEST_GOLD), &bundle.test.gold)
}

/// Reads a directory written by [`save_bundle`]. The class count comes from
/// the vote file's directive or from `classes`.
pub fn load_bundle(dir: impl AsRef<Path>, classes: Option<usize>, seed: u64) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let votes = load_label_matrix(dir.join(TRAIN_VOTES), classes)?;
    let c = votes.num_classes();
    let train_gold = dir.join(TRAIN_GOLD);
    let train = TrainSplit {
        features: load_features(dir.join(TRAIN_FEATURES))?,
        gold: if train_gold.exists() { Some(load_gold_labels(&train_gold, c)?) } else { None },
        votes,
    };
    let valid = EvalSplit {
        features: load_features(dir.join(VALID_FEATURES))?,
        gold: load_gold_labels(dir.join(VALID_GOLD), c)?,
    };
    let test = EvalSplit {
        features: load_features(dir.join(TEST_FEATURES))?,
        gold: load_gold_labels(dir.join(TEST_GOLD), c)?,
    };
    DatasetBundle::new(train, valid, test, seed)
}
