//! Disparity-space training objective: scale/shift-invariant normalization,
//! the affine-invariant mean-absolute loss, and the multi-scale gradient
//! matching loss, combined 1:2.
//!
//! Every loss has two entry points: a `_node` variant that records onto a
//! [`Graph`], differentiable with respect to the prediction, and an eager
//! wrapper that builds a throwaway graph, so both share one numeric path.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::metrics::DepthMap;
use crate::tensor::Tensor;

/// Disparity raster in [0, 1] on valid pixels, with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DisparityMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != h * w || mask.len() != h * w {
            return Err(Error::Dimension(format!(
                "disparity map {h}×{w} needs {} values and mask bits, got {} and {}",
                h * w,
                values.len(),
                mask.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(
                "disparity map contains non-finite values".into(),
            ));
        }
        Ok(DisparityMap { h, w, values, mask })
    }

    pub fn dense(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        let mask = vec![true; values.len()];
        DisparityMap::new(h, w, values, mask)
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Invert valid depths and min-max normalize them to [0, 1]. Invalid pixels
/// keep value 0 and stay masked out.
pub fn depth_to_normalized_disparity(depth: &DepthMap) -> Result<DisparityMap> {
    let mut disp = vec![0.0; depth.values.len()];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut valid = 0usize;
    for (i, slot) in disp.iter_mut().enumerate() {
        if !depth.mask[i] {
            continue;
        }
        let d = depth.values[i];
        if d <= 0.0 {
            return Err(Error::Data(format!(
                "depth must be positive on valid pixels, got {d} at index {i}"
            )));
        }
        let v = 1.0 / d;
        *slot = v;
        lo = lo.min(v);
        hi = hi.max(v);
        valid += 1;
    }
    if valid < 2 {
        return Err(Error::Degenerate(format!(
            "disparity normalization needs at least 2 valid pixels, got {valid}"
        )));
    }
    let range = hi - lo;
    if range <= 0.0 {
        return Err(Error::Degenerate(
            "all valid disparities are equal; min-max normalization is undefined".into(),
        ));
    }
    for (slot, valid) in disp.iter_mut().zip(&depth.mask) {
        if *valid {
            *slot = (*slot - lo) / range;
        }
    }
    DisparityMap::new(depth.h, depth.w, disp, depth.mask.clone())
}

/// Flat index of the masked median: the lower of the two middle order
/// statistics for even counts, ties broken by index.
fn median_index(values: &[f64], mask: &[bool]) -> Result<usize> {
    let mut valid: Vec<usize> = (0..values.len()).filter(|&i| mask[i]).collect();
    if valid.len() < 2 {
        return Err(Error::Degenerate(format!(
            "normalization needs at least 2 valid pixels, got {}",
            valid.len()
        )));
    }
    valid.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("finite values")
            .then(a.cmp(&b))
    });
    Ok(valid[(valid.len() - 1) / 2])
}

fn mask_tensor(h: usize, w: usize, mask: &[bool]) -> Tensor {
    let data = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![h, w], data).expect("mask raster")
}

fn check_raster(g: &Graph, x: NodeId, h: usize, w: usize) -> Result<()> {
    let s = g.value(x).shape();
    if s != [h, w] {
        return Err(Error::Dimension(format!(
            "expected an {h}×{w} raster node, got shape {s:?}"
        )));
    }
    Ok(())
}

/// Scale/shift-invariant normalization on the tape: subtract the masked
/// median, divide by the masked mean absolute deviation. Entries at invalid
/// pixels are computed but carry no meaning; downstream consumers must mask.
pub fn ssi_normalize_node(g: &mut Graph, x: NodeId, mask: &[bool]) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 || shape[0] * shape[1] != mask.len() {
        return Err(Error::Dimension(format!(
            "ssi normalization expects an h×w raster matching {} mask bits, got {shape:?}",
            mask.len()
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let med_idx = median_index(g.value(x).data(), mask)?;
    let count = mask.iter().filter(|m| **m).count();

    let median = g.select(x, med_idx)?;
    let centered = g.sub_scalar(x, median)?;
    let magnitude = g.abs(centered);
    let mask_const = g.constant(mask_tensor(h, w, mask));
    let masked = g.mul(magnitude, mask_const)?;
    let total = g.sum(masked);
    let deviation = g.scale(total, 1.0 / count as f64);
    let dev_value = g.value(deviation).data()[0];
    if dev_value <= 0.0 {
        return Err(Error::Degenerate(
            "mean absolute deviation from the median is zero".into(),
        ));
    }
    g.div_scalar(centered, deviation)
}

/// Eager scale/shift-invariant normalization of a disparity map. Only the
/// valid entries of the returned raster are meaningful.
pub fn ssi_normalize(d: &DisparityMap) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![d.h, d.w], d.values.clone())?);
    let out = ssi_normalize_node(&mut g, x, &d.mask)?;
    Ok(g.value(out).data().to_vec())
}

/// Min-max normalize a node into [0, 1] on the tape, arithmetic-identical
/// to the eager `(v − lo) / (hi − lo)` form so tape and eager paths agree
/// bit for bit.
pub fn minmax_normalize_node(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let values = g.value(x).data();
    let mut arg_lo = 0;
    let mut arg_hi = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[arg_lo] {
            arg_lo = i;
        }
        if *v > values[arg_hi] {
            arg_hi = i;
        }
    }
    if values[arg_hi] - values[arg_lo] <= 1e-12 {
        return Err(Error::Degenerate(
            "raster is constant; min-max normalization is undefined".into(),
        ));
    }
    let lo = g.select(x, arg_lo)?;
    let hi = g.select(x, arg_hi)?;
    let range = g.sub(hi, lo)?;
    let shifted = g.sub_scalar(x, lo)?;
    g.div_scalar(shifted, range)
}

/// Mean over valid pixels of |ssi(pred) − ssi(gt)|, recorded on the tape.
pub fn affine_invariant_loss_node(
    g: &mut Graph,
    pred: NodeId,
    gt: &DisparityMap,
) -> Result<NodeId> {
    check_raster(g, pred, gt.h, gt.w)?;
    let pred_hat = ssi_normalize_node(g, pred, &gt.mask)?;
    let gt_hat_values = ssi_normalize(gt)?;
    let gt_hat = g.constant(Tensor::new(vec![gt.h, gt.w], gt_hat_values)?);
    let residual = g.sub(pred_hat, gt_hat)?;
    let magnitude = g.abs(residual);
    let mask_const = g.constant(mask_tensor(gt.h, gt.w, &gt.mask));
    let masked = g.mul(magnitude, mask_const)?;
    let total = g.sum(masked);
    Ok(g.scale(total, 1.0 / gt.valid_count() as f64))
}

pub fn affine_invariant_loss(pred: &[f64], gt: &DisparityMap) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![gt.h, gt.w], pred.to_vec())?);
    let loss = affine_invariant_loss_node(&mut g, p, gt)?;
    Ok(g.value(loss).data()[0])
}

/// Validity pyramid: a pooled cell is valid when any source pixel in its
/// 2×2 window is.
fn pool_mask(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![false; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = mask[(2 * oy) * w + 2 * ox]
                || mask[(2 * oy) * w + 2 * ox + 1]
                || mask[(2 * oy + 1) * w + 2 * ox]
                || mask[(2 * oy + 1) * w + 2 * ox + 1];
        }
    }
    out
}

/// Multi-scale gradient matching on the tape: absolute forward differences
/// of the normalized residual between valid neighbors, the residual halved
/// per scale by mask-aware average pooling, everything divided by the
/// full-resolution valid count.
pub fn gradient_matching_loss_node(
    g: &mut Graph,
    pred: NodeId,
    gt: &DisparityMap,
    n_scales: usize,
) -> Result<NodeId> {
    if n_scales == 0 {
        return Err(Error::Parameter(
            "gradient matching needs at least 1 scale".into(),
        ));
    }
    check_raster(g, pred, gt.h, gt.w)?;
    let pred_hat = ssi_normalize_node(g, pred, &gt.mask)?;
    let gt_hat_values = ssi_normalize(gt)?;
    let gt_hat = g.constant(Tensor::new(vec![gt.h, gt.w], gt_hat_values)?);
    let mut residual = g.sub(pred_hat, gt_hat)?;

    let full_count = gt.valid_count();
    let mut mask = gt.mask.clone();
    let (mut h, mut w) = (gt.h, gt.w);
    let mut acc: Option<NodeId> = None;
    for scale in 0..n_scales {
        if w >= 2 {
            let dh = g.masked_diff(residual, true, &mask)?;
            let mag = g.abs(dh);
            let s = g.sum(mag);
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        if h >= 2 {
            let dv = g.masked_diff(residual, false, &mask)?;
            let mag = g.abs(dv);
            let s = g.sum(mag);
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        if scale + 1 == n_scales || h < 2 || w < 2 {
            break;
        }
        residual = g.masked_pool2(residual, &mask)?;
        mask = pool_mask(&mask, h, w);
        h /= 2;
        w /= 2;
    }
    let total = match acc {
        Some(a) => a,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(g.scale(total, 1.0 / full_count as f64))
}

pub fn gradient_matching_loss(pred: &[f64], gt: &DisparityMap, n_scales: usize) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![gt.h, gt.w], pred.to_vec())?);
    let loss = gradient_matching_loss_node(&mut g, p, gt, n_scales)?;
    Ok(g.value(loss).data()[0])
}

/// Objective selector: the affine-invariant loss alone, or with the
/// gradient matching loss at a 1:2 weighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    V1,
    V2,
}

impl LossMode {
    pub fn label(&self) -> &'static str {
        match self {
            LossMode::V1 => "v1",
            LossMode::V2 => "v2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "v1" | "V1" => Ok(LossMode::V1),
            "v2" | "V2" => Ok(LossMode::V2),
            other => Err(Error::Parameter(format!(
                "unknown loss mode `{other}` (expected v1 or v2)"
            ))),
        }
    }
}

pub fn combined_loss_node(
    g: &mut Graph,
    pred: NodeId,
    gt: &DisparityMap,
    mode: LossMode,
    n_scales: usize,
) -> Result<NodeId> {
    let ssi = affine_invariant_loss_node(g, pred, gt)?;
    match mode {
        LossMode::V1 => Ok(ssi),
        LossMode::V2 => {
            let gm = gradient_matching_loss_node(g, pred, gt, n_scales)?;
            let weighted = g.scale(gm, 2.0);
            g.add(ssi, weighted)
        }
    }
}

pub fn combined_loss(
    pred: &[f64],
    gt: &DisparityMap,
    mode: LossMode,
    n_scales: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![gt.h, gt.w], pred.to_vec())?);
    let loss = combined_loss_node(&mut g, p, gt, mode, n_scales)?;
    Ok(g.value(loss).data()[0])
}
