//! Region similarity J, boundary accuracy F and their mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::IdMask;

fn check_extents(pred: &IdMask, gt: &IdMask) -> Result<()> {
    if pred.h() != gt.h() || pred.w() != gt.w() {
        return Err(Error::shape("mask extents", &[pred.h(), pred.w()], &[gt.h(), gt.w()]));
    }
    Ok(())
}

/// Intersection over union of object `obj`; 1 when both supports are empty.
pub fn region_j(pred: &IdMask, gt: &IdMask, obj: u8) -> Result<f64> {
    check_extents(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        let (p, g) = (p == obj, g == obj);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Pixels of a binary mask with at least one 4-neighbour outside the mask.
/// Neighbours beyond the frame count as outside.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize]
    };
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            mask[i]
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|&(dy, dx)| !inside(y + dy, x + dx))
        })
        .collect()
}

/// Square (Chebyshev) dilation by `tol` pixels.
fn dilate(mask: &[bool], h: usize, w: usize, tol: usize) -> Vec<bool> {
    if tol == 0 {
        return mask.to_vec();
    }
    // separable: rows then columns
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(tol);
            let hi = (x + tol).min(w - 1);
            rows[y * w + x] = (lo..=hi).any(|xx| mask[y * w + xx]);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(tol);
        let hi = (y + tol).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

/// Boundary F-measure of object `obj` with a Chebyshev tolerance of `tol`
/// pixels.
pub fn boundary_f(pred: &IdMask, gt: &IdMask, obj: u8, tol: usize) -> Result<f64> {
    check_extents(pred, gt)?;
    let (h, w) = (gt.h(), gt.w());
    let pb = boundary(&pred.binary(obj), h, w);
    let gb = boundary(&gt.binary(obj), h, w);
    let n_p = pb.iter().filter(|&&b| b).count();
    let n_g = gb.iter().filter(|&&b| b).count();
    if n_p == 0 && n_g == 0 {
        return Ok(1.0);
    }
    let gd = dilate(&gb, h, w, tol);
    let pd = dilate(&pb, h, w, tol);
    let hit_p = pb.iter().zip(&gd).filter(|&(&b, &d)| b && d).count();
    let hit_g = gb.iter().zip(&pd).filter(|&(&b, &d)| b && d).count();
    let precision = if n_p == 0 { 1.0 } else { hit_p as f64 / n_p as f64 };
    let recall = if n_g == 0 { 1.0 } else { hit_g as f64 / n_g as f64 };
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub id: u8,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub objects: Vec<ObjectScore>,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
}

/// J and F per object averaged over frames, then over objects. `preds`
/// and `gts` hold only the evaluated frames (the given first frame is not
/// passed in).
pub fn jf_mean(preds: &[IdMask], gts: &[IdMask], objects: &[u8], tol: usize) -> Result<MetricsReport> {
    if preds.is_empty() || objects.is_empty() {
        return Err(Error::contract("nothing to evaluate"));
    }
    if preds.len() != gts.len() {
        return Err(Error::shape("evaluated frames", &[preds.len()], &[gts.len()]));
    }
    let mut scores = Vec::with_capacity(objects.len());
    for &obj in objects {
        let (mut j, mut f) = (0.0, 0.0);
        for (p, g) in preds.iter().zip(gts) {
            j += region_j(p, g, obj)?;
            f += boundary_f(p, g, obj, tol)?;
        }
        let n = preds.len() as f64;
        let (j, f) = (j / n, f / n);
        scores.push(ObjectScore {
            id: obj,
            j,
            f,
            jf: (j + f) / 2.0,
        });
    }
    let n = scores.len() as f64;
    let j = scores.iter().map(|s| s.j).sum::<f64>() / n;
    let f = scores.iter().map(|s| s.f).sum::<f64>() / n;
    Ok(MetricsReport {
        objects: scores,
        j,
        f,
        jf: (j + f) / 2.0,
    })
}
