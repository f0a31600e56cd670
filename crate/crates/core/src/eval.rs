//! Dataset-level evaluation of segmentation networks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::IdMask;
use crate::metrics::{jf_mean, ObjectScore};
use crate::propagation::{segment_sequence, Network};
use crate::synthdata::SequenceRecord;

/// Default boundary tolerance in pixels.
pub const BOUNDARY_TOL: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub id: String,
    pub objects: Vec<ObjectScore>,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalScore {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
}

/// Per-sequence scores plus means over every (sequence, object) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<SequenceScore>,
    pub global: GlobalScore,
}

/// Scores predictions for frames `1..` of each record against its ground truth.
pub fn score_predictions(records: &[SequenceRecord], preds: &[Vec<IdMask>], tol: usize) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    if records.len() != preds.len() {
        return Err(Error::shape("predictions", &[preds.len()], &[records.len()]));
    }
    let mut sequences = Vec::with_capacity(records.len());
    for (rec, pred) in records.iter().zip(preds) {
        let gts: Vec<IdMask> = (1..rec.len()).map(|t| rec.mask(t).clone()).collect();
        let rep = jf_mean(pred, &gts, &rec.object_ids(), tol)?;
        sequences.push(SequenceScore {
            id: rec.id.clone(),
            objects: rep.objects,
            j: rep.j,
            f: rep.f,
            jf: rep.jf,
        });
    }
    let all: Vec<&ObjectScore> = sequences.iter().flat_map(|s| &s.objects).collect();
    let n = all.len() as f64;
    let j = all.iter().map(|o| o.j).sum::<f64>() / n;
    let f = all.iter().map(|o| o.f).sum::<f64>() / n;
    Ok(EvalReport {
        sequences,
        global: GlobalScore {
            j,
            f,
            jf: (j + f) / 2.0,
        },
    })
}

/// Segments every record from its first-frame mask and scores the result.
pub fn evaluate(net: &Network, records: &[SequenceRecord], tol: usize) -> Result<EvalReport> {
    let preds = records
        .par_iter()
        .map(|rec| {
            let seg = segment_sequence(net, &rec.frame_tensors(), rec.first_mask(), rec.n_objects)?;
            Ok(seg.masks)
        })
        .collect::<Result<Vec<_>>>()?;
    score_predictions(records, &preds, tol)
}

/// Scores the ground truth against itself; every metric is 1.
pub fn evaluate_ground_truth(records: &[SequenceRecord], tol: usize) -> Result<EvalReport> {
    let preds: Vec<Vec<IdMask>> = records
        .iter()
        .map(|r| (1..r.len()).map(|t| r.mask(t).clone()).collect())
        .collect();
    score_predictions(records, &preds, tol)
}
