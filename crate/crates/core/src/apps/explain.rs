use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::{aggregate_influence, Holdout, InfluenceEngine, Level};
use crate::labelmodel::{Sigma, WTensor};
use crate::wsdata::{EvalSplit, LabelMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub index: Vec<usize>,
    pub score: f64,
}

/// Most responsible training components for one test prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub test_index: usize,
    pub gold: usize,
    pub predicted: usize,
    pub loss: f64,
    pub method: String,
    pub top_points: Vec<Attribution>,
    pub top_lfs: Vec<Attribution>,
    pub top_votes: Vec<Attribution>,
}

fn top(agg: &crate::influence::Aggregate, k: usize) -> Vec<Attribution> {
    agg.ranking()
        .into_iter()
        .take(k)
        .map(|p| Attribution { index: agg.keys[p].clone(), score: agg.scores[p] })
        .collect()
}

/// Ranks training points, LFs and votes by how much they raise the loss on
/// test point `index` (rw for identity label models, wm otherwise).
pub fn explain(
    engine: &InfluenceEngine<'_>,
    w: &WTensor,
    votes: &LabelMatrix,
    test: &EvalSplit,
    index: usize,
    k: usize,
) -> Result<ExplainReport> {
    if index >= test.gold.len() {
        return Err(Error::shape(format!("test point {index} out of range")));
    }
    let x = test.features.row(index);
    let gold = test.gold.get(index);
    let c = engine.model().num_classes();
    let p = engine.model().predict_proba(x)?;
    let holdout = Holdout::single(format!("test[{index}]"), x, gold, c)?;
    let dir = engine.direction(&holdout)?;
    let t = match w.sigma() {
        Sigma::Identity => engine.rw(&dir, w, votes)?,
        Sigma::Exponential => engine.wm(&dir, w, votes)?,
    };
    Ok(ExplainReport {
        test_index: index,
        gold,
        predicted: crate::labelmodel::argmax(&p),
        loss: -p[gold].ln(),
        method: t.method().name().to_string(),
        top_points: top(&aggregate_influence(&t, Level::Data, None)?, k),
        top_lfs: top(&aggregate_influence(&t, Level::Lf, None)?, k),
        top_votes: top(&aggregate_influence(&t, Level::Vote, None)?, k),
    })
}

/// Reports for the first `limit` misclassified test points.
pub fn explain_errors(
    engine: &InfluenceEngine<'_>,
    w: &WTensor,
    votes: &LabelMatrix,
    test: &EvalSplit,
    k: usize,
    limit: usize,
) -> Result<Vec<ExplainReport>> {
    let mut out = Vec::new();
    for idx in 0..test.gold.len() {
        if out.len() >= limit {
            break;
        }
        if engine.model().predict(test.features.row(idx))? != test.gold.get(idx) {
            out.push(explain(engine, w, votes, test, idx, k)?);
        }
    }
    Ok(out)
}
