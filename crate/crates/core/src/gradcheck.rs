//! Finite-difference verification of every gate gradient.
//!
//! Each instance is a miniature version of the training path: random
//! features through a full gate, a frozen read-out to a small raster,
//! min-max normalization, and the combined loss against a random target.
//! Central differences with step `h = 1e-3` are compared against backward
//! for every parameter component.
//!
//! The losses contain |·| kinks and order-statistic switches (median,
//! min, max). An instance whose forward values sit within a safety margin
//! of any such non-smooth point is redrawn, so the probe always runs in a
//! differentiable neighborhood; the margins are far wider than the
//! finite-difference step can move any value.

use crate::error::{Error, Result};
use crate::gate::{gate_forward, GateConfig, GateParams};
use crate::graph::{Graph, NodeId};
use crate::losses::{
    combined_loss_node, minmax_normalize_node, ssi_normalize, DisparityMap, LossMode,
};
use crate::pipeline::{parallel_map, thread_budget};
use crate::rng::Prng;
use crate::tensor::Tensor;

const FD_STEP: f64 = 1e-4;
/// Raw-raster movement bound per finite-difference probe: measured worst
/// movement is below 2·FD_STEP, padded 5×. Normalization divides raster
/// values by their range, so the required margins grow as the range
/// shrinks.
const PROBE_MOVEMENT: f64 = 10.0 * FD_STEP;
const MAX_REDRAWS: u64 = 60;

/// Worst relative finite-difference error and where it occurred.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub worst_rel: f64,
    pub worst_param: String,
    pub instances: usize,
    pub components: usize,
}

/// |a − b| / max(1, |a|, |b|): relative for large values, absolute below
/// unit scale, where central differences bottom out near 1e-7·f‴.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

struct Instance {
    cfg: GateConfig,
    params: GateParams,
    f_d: Tensor,
    f_s: Tensor,
    readout: Tensor,
    gt: DisparityMap,
    tau: f64,
    mode: LossMode,
    grid: (usize, usize),
    out: (usize, usize),
}

impl Instance {
    fn build(&self, params: &GateParams) -> Result<(Graph, NodeId, crate::gate::GateNodes)> {
        let mut g = Graph::new();
        let f_d = g.constant(self.f_d.clone());
        let f_s = g.constant(self.f_s.clone());
        let nodes = params.register(&mut g);
        let (f_sg, _) = gate_forward(&mut g, f_d, f_s, &nodes, &self.cfg, self.tau, 0)?;
        let resized = g.bilinear_resize(f_sg, self.grid.0, self.grid.1, self.out.0, self.out.1)?;
        let r = g.constant(self.readout.clone());
        let raster = g.matmul(resized, r)?;
        let raster = g.reshape(raster, vec![self.out.0, self.out.1])?;
        let normalized = minmax_normalize_node(&mut g, raster)?;
        let loss = combined_loss_node(&mut g, normalized, &self.gt, self.mode, 2)?;
        Ok((g, loss, nodes))
    }

    /// Distance of the forward values from every kink the loss can hit:
    /// gaps around the min/max/median order statistics and magnitudes of
    /// the SSI residuals and their differences at both pyramid scales.
    fn kink_margin(&self, loss_graph_pred: &[f64]) -> f64 {
        let n = loss_graph_pred.len();
        let mut sorted = loss_graph_pred.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let range = sorted[n - 1] - sorted[0];
        if range <= 1e-6 {
            return 0.0;
        }
        // One probe moves raster values by at most ~PROBE_MOVEMENT, which
        // normalization amplifies by 1/range; SSI scaling adds roughly
        // another 1/MAD(normalized), bounded here by 8.
        let margin_order = PROBE_MOVEMENT / range;
        let margin_residual = 8.0 * margin_order;
        let mut margin = f64::INFINITY;
        // Extremes: the two smallest and two largest must be separated.
        margin = margin.min((sorted[1] - sorted[0]) / range / margin_order);
        margin = margin.min((sorted[n - 1] - sorted[n - 2]) / range / margin_order);
        // Median order statistic of the normalized raster.
        let normalized: Vec<f64> = loss_graph_pred
            .iter()
            .map(|v| (v - sorted[0]) / range)
            .collect();
        let mut nsorted = normalized.clone();
        nsorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = (n - 1) / 2;
        if med > 0 {
            margin = margin.min((nsorted[med] - nsorted[med - 1]) / margin_order);
        }
        margin = margin.min((nsorted[med + 1] - nsorted[med]) / margin_order);
        // SSI residuals and their forward differences at both scales.
        let pred_map = DisparityMap::dense(self.out.0, self.out.1, normalized).unwrap();
        let (p_hat, g_hat) = match (ssi_normalize(&pred_map), ssi_normalize(&self.gt)) {
            (Ok(p), Ok(g)) => (p, g),
            _ => return 0.0,
        };
        let r: Vec<f64> = p_hat.iter().zip(&g_hat).map(|(a, b)| a - b).collect();
        for v in &r {
            margin = margin.min(v.abs() / margin_residual);
        }
        let (h, w) = self.out;
        let diff_margin = |r: &[f64], h: usize, w: usize, margin: &mut f64| {
            for y in 0..h {
                for x in 0..w - 1 {
                    *margin =
                        (*margin).min((r[y * w + x + 1] - r[y * w + x]).abs() / margin_residual);
                }
            }
            for y in 0..h - 1 {
                for x in 0..w {
                    *margin =
                        (*margin).min((r[(y + 1) * w + x] - r[y * w + x]).abs() / margin_residual);
                }
            }
        };
        diff_margin(&r, h, w, &mut margin);
        // Second pyramid scale: dense 2×2 average pooling.
        let (oh, ow) = (h / 2, w / 2);
        let mut pooled = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                pooled[oy * ow + ox] = (r[(2 * oy) * w + 2 * ox]
                    + r[(2 * oy) * w + 2 * ox + 1]
                    + r[(2 * oy + 1) * w + 2 * ox]
                    + r[(2 * oy + 1) * w + 2 * ox + 1])
                    / 4.0;
            }
        }
        diff_margin(&pooled, oh, ow, &mut margin);
        margin
    }
}

fn draw_instance(seed: u64, index: usize) -> Result<Instance> {
    let base = Prng::derive(seed, 0x6743 + index as u64);
    for attempt in 0..MAX_REDRAWS {
        let mut rng = Prng::new(Prng::derive(base, attempt));
        let heads = if index % 5 == 4 { 2 } else { 1 };
        // Channel widths near the production scale: narrow gates lose token
        // contrast through the residual-free block cascade, which flattens
        // the raster and puts the normalized loss next to its kinks.
        let c = 10 + 2 * rng.below(5) as usize;
        let d = if heads == 2 {
            8 + 4 * rng.below(3) as usize
        } else {
            6 + rng.below(11) as usize
        };
        let mut cfg = GateConfig::new(c, d);
        cfg.hidden = 2 * c;
        cfg.heads = heads;
        cfg.residual = index % 7 == 6;
        let params = GateParams::init(&cfg, &mut rng)?;
        let grid = (2usize, 2 + rng.below(2) as usize);
        let tokens = grid.0 * grid.1;
        let tau: f64 = if index.is_multiple_of(2) { 1.0 } else { 2.5 };
        // Temperature divides the logits, so features grow by √τ to keep
        // the attention spread (and with it the raster contrast) steady.
        let amp = 4.0 * tau.sqrt();
        let f_d = Tensor::uniform(&mut rng, vec![tokens, c], -amp, amp);
        let f_s = Tensor::uniform(&mut rng, vec![tokens, c], -amp, amp);
        let s = 1.0 / (c as f64).sqrt();
        let readout = Tensor::uniform(&mut rng, vec![c, 1], -s, s);
        let out = (4usize, 4usize);
        let gt = DisparityMap::dense(
            out.0,
            out.1,
            (0..out.0 * out.1).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )?;
        let mode = if index.is_multiple_of(3) {
            LossMode::V1
        } else {
            LossMode::V2
        };
        let instance = Instance {
            cfg,
            params,
            f_d,
            f_s,
            readout,
            gt,
            tau,
            mode,
            grid,
            out,
        };
        let probe = instance.build(&instance.params);
        let (g, loss, _) = match probe {
            Ok(v) => v,
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        // Raster values feeding the normalization, before the loss.
        let raster = instance.raster_values(&instance.params)?;
        if !g.value(loss).data()[0].is_finite() {
            continue;
        }
        if instance.kink_margin(&raster) >= 1.0 {
            return Ok(instance);
        }
    }
    Err(Error::Degenerate(format!(
        "could not draw a kink-free gradcheck instance for index {index}"
    )))
}

impl Instance {
    fn raster_values(&self, params: &GateParams) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let f_d = g.constant(self.f_d.clone());
        let f_s = g.constant(self.f_s.clone());
        let nodes = params.register(&mut g);
        let (f_sg, _) = gate_forward(&mut g, f_d, f_s, &nodes, &self.cfg, self.tau, 0)?;
        let resized = g.bilinear_resize(f_sg, self.grid.0, self.grid.1, self.out.0, self.out.1)?;
        let r = g.constant(self.readout.clone());
        let raster = g.matmul(resized, r)?;
        Ok(g.value(raster).data().to_vec())
    }

    fn loss_at(&self, params: &GateParams) -> Result<f64> {
        let (g, loss, _) = self.build(params)?;
        Ok(g.value(loss).data()[0])
    }
}

/// Compare backward against central finite differences over every gate
/// parameter of `instances` random instances. `fault_scale` multiplies one
/// analytic gradient component, which a healthy run must report as an
/// exceedance; it exists so the detection path itself can be exercised.
pub fn gradcheck(seed: u64, instances: usize, fault_scale: Option<f64>) -> Result<GradCheckReport> {
    if instances == 0 {
        return Err(Error::Parameter(
            "gradcheck needs at least one instance".into(),
        ));
    }
    let indices: Vec<usize> = (0..instances).collect();
    let threads = thread_budget();
    let per_instance = parallel_map(
        &indices,
        threads,
        |&index| -> Result<(f64, String, usize)> {
            let instance = draw_instance(seed, index)?;
            let (g, loss, nodes) = instance.build(&instance.params)?;
            let grads = g.backward(loss)?;
            let mut worst = (0.0_f64, String::new());
            let mut components = 0usize;
            for (slot, (name, node)) in nodes.named().into_iter().enumerate() {
                let analytic = grads.get(node);
                let numel = g.value(node).numel();
                for k in 0..numel {
                    let mut analytic_value = analytic.map_or(0.0, |t| t.data()[k]);
                    if index == 0 && slot == 0 && k == 0 {
                        if let Some(scale) = fault_scale {
                            analytic_value *= scale;
                        }
                    }
                    let mut plus = instance.params.clone();
                    plus.named_tensors_mut()[slot].1.data_mut()[k] += FD_STEP;
                    let mut minus = instance.params.clone();
                    minus.named_tensors_mut()[slot].1.data_mut()[k] -= FD_STEP;
                    let numeric =
                        (instance.loss_at(&plus)? - instance.loss_at(&minus)?) / (2.0 * FD_STEP);
                    let err = relative_error(analytic_value, numeric);
                    components += 1;
                    if err > worst.0 {
                        worst = (err, format!("inst{index}.gate.{name}[{k}]"));
                    }
                }
            }
            Ok((worst.0, worst.1, components))
        },
    );

    let mut report = GradCheckReport {
        worst_rel: 0.0,
        worst_param: String::new(),
        instances,
        components: 0,
    };
    for result in per_instance {
        let (err, name, components) = result?;
        report.components += components;
        if err > report.worst_rel {
            report.worst_rel = err;
            report.worst_param = name;
        }
    }
    Ok(report)
}
