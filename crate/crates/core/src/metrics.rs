//! Edit-quality metrics: efficacy, paraphrase and neighborhood scores, their
//! harmonic-mean composite, and weight drift on held-out keys.
//!
//! Per-fact terms are evaluated (possibly in parallel) into an ordered
//! vector and summed left to right, so every metric is bit-reproducible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::facts::{FactRecord, PreservationSet};
use crate::solvers::Method;
use crate::toymodel::{argmax, softmax, ToyModel};

/// Bumped whenever the CSV column set or order changes.
pub const REPORT_SCHEMA: u32 = 1;

fn probabilities(model: &ToyModel, context: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(softmax(&model.logits(context)?))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Percentage of facts with `P(new) > P(old)` at their edit context, and the
/// mean gap `P(new) - P(old)`.
pub fn efficacy(model_after: &ToyModel, facts: &[FactRecord]) -> Result<(f64, f64)> {
    if facts.is_empty() {
        return Err(Error::Precondition("efficacy needs at least one fact".into()));
    }
    let gaps = exec::try_map_indexed(Execution::default(), facts.len(), |i| {
        let f = &facts[i];
        let p = probabilities(model_after, &f.base_context)?;
        Ok::<_, Error>(p[f.new_object] - p[f.old_object])
    })?;
    let hits: Vec<f64> = gaps.iter().map(|&g| if g > 0.0 { 1.0 } else { 0.0 }).collect();
    Ok((100.0 * mean(&hits), mean(&gaps)))
}

/// Same predicate as [`efficacy`] over each fact's paraphrase contexts,
/// averaged within a fact and then across facts.
pub fn paraphrase(model_after: &ToyModel, facts: &[FactRecord]) -> Result<(f64, f64)> {
    if facts.is_empty() {
        return Err(Error::Precondition("paraphrase needs at least one fact".into()));
    }
    if let Some(f) = facts.iter().find(|f| f.paraphrase_contexts.is_empty()) {
        return Err(Error::Precondition(format!("fact {} has no paraphrases", f.fact_id)));
    }
    let per_fact = exec::try_map_indexed(Execution::default(), facts.len(), |i| {
        let f = &facts[i];
        let gaps = f
            .paraphrase_contexts
            .iter()
            .map(|c| {
                let p = probabilities(model_after, c)?;
                Ok(p[f.new_object] - p[f.old_object])
            })
            .collect::<Result<Vec<f64>>>()?;
        let hits: Vec<f64> = gaps.iter().map(|&g| if g > 0.0 { 1.0 } else { 0.0 }).collect();
        Ok::<_, Error>((mean(&hits), mean(&gaps)))
    })?;
    let rates: Vec<f64> = per_fact.iter().map(|x| x.0).collect();
    let gaps: Vec<f64> = per_fact.iter().map(|x| x.1).collect();
    Ok((100.0 * mean(&rates), mean(&gaps)))
}

/// Percentage of neighborhood facts whose original object (the pre-edit
/// prediction) still beats the competing edit target after editing, and the
/// mean margin `P(original) - P(competitor)`.
///
/// Each neighborhood fact's `new_object` names the edit target it competes
/// with. Argmax preservation is the stricter alternative reading and is not
/// what this measures.
pub fn neighborhood(
    model_before: &ToyModel,
    model_after: &ToyModel,
    preservation: &PreservationSet,
) -> Result<(f64, f64)> {
    let facts = &preservation.neighborhood_facts;
    if facts.is_empty() {
        return Err(Error::Precondition("neighborhood set is empty".into()));
    }
    let margins = exec::try_map_indexed(Execution::default(), facts.len(), |i| {
        let f = &facts[i];
        let original = argmax(&model_before.logits(&f.base_context)?);
        let p = probabilities(model_after, &f.base_context)?;
        Ok::<_, Error>(p[original] - p[f.new_object])
    })?;
    let kept: Vec<f64> = margins.iter().map(|&m| if m > 0.0 { 1.0 } else { 0.0 }).collect();
    Ok((100.0 * mean(&kept), mean(&margins)))
}

/// Harmonic mean of the three scores.
pub fn composite_score(es: f64, ps: f64, ns: f64) -> Result<f64> {
    if !(es > 0.0 && ps > 0.0 && ns > 0.0) {
        return Err(Error::UndefinedScore([es, ps, ns]));
    }
    Ok(3.0 / (1.0 / es + 1.0 / ps + 1.0 / ns))
}

/// `sum_l ||(W_hat_l - W0_l) K_l|| / ||W0_l K_l||` over layers whose weights
/// differ, with `K_l` the pre-edit keys of the held-out contexts.
pub fn preservation_drift(
    model_before: &ToyModel,
    model_after: &ToyModel,
    holdout_contexts: &DMatrix<f64>,
) -> Result<f64> {
    if model_before.layer_count() != model_after.layer_count() {
        return Err(Error::dim(
            "layer count",
            model_before.layer_count(),
            model_after.layer_count(),
        ));
    }
    if holdout_contexts.nrows() != model_before.d_ctx() {
        return Err(Error::dim(
            "holdout contexts",
            model_before.d_ctx(),
            holdout_contexts.nrows(),
        ));
    }
    let mut drift = 0.0;
    for (l, (w0, w)) in model_before.layers().iter().zip(model_after.layers()).enumerate() {
        if w0.shape() != w.shape() {
            return Err(Error::dim("layer shape", format!("{:?}", w0.shape()), format!("{:?}", w.shape())).at_layer(l));
        }
        if w0 == w {
            continue;
        }
        let keys = model_before.layer_keys(l, holdout_contexts)?;
        let base = (w0 * &keys).norm();
        if base > 0.0 {
            drift += ((w - w0) * &keys).norm() / base;
        }
    }
    Ok(drift)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchTag {
    Index(usize),
    Label(String),
}

impl BatchTag {
    pub fn mean() -> Self {
        BatchTag::Label("mean".into())
    }
}

/// One CSV row. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub method: Method,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: f64,
    pub alpha: f64,
    pub es: f64,
    pub em: f64,
    pub ps: f64,
    pub pm: f64,
    pub ns: f64,
    pub nm: f64,
    /// Generation entropy has no analog here; always empty.
    pub ge: Option<f64>,
    pub s: Option<f64>,
    pub mem_residual: f64,
    pub drift: f64,
    pub cond_c0: f64,
    pub cond_d: Option<f64>,
    pub batch: BatchTag,
    pub layers: String,
    pub plan_hash: String,
    pub schema: u32,
}

impl EditReport {
    /// Column-wise mean of rows sharing provenance; `s` is recomputed from
    /// the averaged scores.
    pub fn mean(rows: &[EditReport]) -> Result<EditReport> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Precondition("cannot average zero reports".into()))?;
        let avg = |f: fn(&EditReport) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        let cond_d = if rows.iter().all(|r| r.cond_d.is_some()) {
            Some(avg(|r| r.cond_d.unwrap_or(f64::NAN)))
        } else {
            None
        };
        let (es, ps, ns) = (avg(|r| r.es), avg(|r| r.ps), avg(|r| r.ns));
        Ok(EditReport {
            es,
            em: avg(|r| r.em),
            ps,
            pm: avg(|r| r.pm),
            ns,
            nm: avg(|r| r.nm),
            ge: None,
            s: composite_score(es, ps, ns).ok(),
            mem_residual: avg(|r| r.mem_residual),
            drift: avg(|r| r.drift),
            cond_c0: avg(|r| r.cond_c0),
            cond_d,
            batch: BatchTag::mean(),
            ..first.clone()
        })
    }
}

pub fn write_csv<W: std::io::Write>(out: W, rows: &[EditReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<EditReport>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
