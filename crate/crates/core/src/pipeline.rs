//! End-to-end composition: seeded stub encoders, four bridging gates, a
//! frozen linear decoder read-out, gate-only training, and the synthetic
//! evaluation protocol.
//!
//! Real foundation-model encoders are out of scope; deterministic seeded
//! stubs stand in for them. A hidden set of reference gates, frozen at
//! construction, generates every ground-truth target, so the training
//! signal is attainable by construction: setting the trainable gates to the
//! reference gates drives the loss to zero.

use sha2::{Digest, Sha256};

use crate::align::{align_semantic, FeatureMap};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gate::{gate_forward, AttentionRecord, GateNodes, GateParams};
use crate::graph::{Graph, NodeId};
use crate::losses::{combined_loss_node, minmax_normalize_node, DisparityMap};
use crate::metrics::{
    absrel, align_least_squares, apply_alignment, delta1, DepthMap, MetricsReport,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Prng;
use crate::tensor::Tensor;

// Sub-stream tags for deriving independent seeds from one model seed.
const TAG_ENCODER: u64 = 0x01;
const TAG_SEMANTIC: u64 = 0x10;
const TAG_DECODER: u64 = 0x20;
const TAG_GATE: u64 = 0x30;
const TAG_REFERENCE: u64 = 0x40;
const TAG_SAMPLE: u64 = 0x50;
const TAG_TRAIN: u64 = 0x60;
const TAG_RETRY: u64 = 0x70;

/// Reference rasters with less spread than this are treated as degenerate
/// scenes and re-drawn: min-max targets built on rounding-level ranges are
/// ill-conditioned, and the matching weak features flatten predictions too.
const MIN_REFERENCE_RANGE: f64 = 1e-3;

/// Maps normalized disparity in [0, 1] to a strictly positive depth.
pub fn disparity_to_depth(disparity: f64) -> f64 {
    1.0 / (disparity + 0.5)
}

/// Internal parallelism cap from `BRIGES_THREADS`; 0 or unset means
/// sequential.
pub fn thread_budget() -> usize {
    std::env::var("BRIGES_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

/// Order-preserving map over `items` on up to `threads` worker threads.
/// Results are identical to the sequential path because reduction happens
/// in index order afterwards.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let workers = threads.min(items.len());
    let chunk = items.len().div_ceil(workers);
    let mut results: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let f = &f;
    std::thread::scope(|scope| {
        for (slot_chunk, item_chunk) in results.chunks_mut(chunk).zip(items.chunks(chunk)) {
            scope.spawn(move || {
                for (slot, item) in slot_chunk.iter_mut().zip(item_chunk) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("worker filled slot"))
        .collect()
}

/// Frozen linear feature generators. Each output map is a seeded smooth
/// basis applied to a low-dimensional latent scene vector, so depth and
/// semantic features of one sample share structure.
pub struct StubEncoders {
    level_bases: [Tensor; 4],
    semantic_basis: Tensor,
}

/// Smooth random basis: each (channel, latent) pair is a low-frequency
/// sinusoid over the grid. Rows index the latent dimension; columns are
/// token-major, channel-minor.
///
/// The amplitude window keeps feature values near unit scale so that
/// Q·Kᵀ/√d logits through ±1/√C projections have O(1) spread; without a
/// residual path, token contrast survives the two attention blocks only
/// through non-uniform attention rows.
fn smooth_basis(rng: &mut Prng, h: usize, w: usize, c: usize, latent: usize) -> Tensor {
    let amp_scale = 1.0 / (latent as f64).sqrt();
    let mut fields = Vec::with_capacity(c * latent);
    for _ in 0..c * latent {
        let amp = rng.uniform(2.0, 5.0) * amp_scale;
        let kx = rng.below(3) as f64;
        let ky = rng.below(3) as f64;
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        fields.push((amp, kx, ky, phase));
    }
    let mut data = vec![0.0; latent * h * w * c];
    for l in 0..latent {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let (amp, kx, ky, phase) = fields[ch * latent + l];
                    let arg = std::f64::consts::TAU
                        * (kx * x as f64 / w as f64 + ky * y as f64 / h as f64)
                        + phase;
                    data[l * (h * w * c) + (y * w + x) * c + ch] = amp * arg.cos();
                }
            }
        }
    }
    Tensor::new(vec![latent, h * w * c], data).expect("basis shape")
}

impl StubEncoders {
    fn generate(cfg: &ModelConfig) -> Self {
        let level_bases = std::array::from_fn(|i| {
            let (h, w) = cfg.grids[i];
            let mut rng = Prng::new(Prng::derive(cfg.model_seed, TAG_ENCODER + i as u64));
            smooth_basis(&mut rng, h, w, cfg.channels, cfg.latent_dim)
        });
        let mut rng = Prng::new(Prng::derive(cfg.model_seed, TAG_SEMANTIC));
        let (sh, sw) = cfg.semantic_grid;
        let semantic_basis = smooth_basis(&mut rng, sh, sw, cfg.channels, cfg.latent_dim);
        StubEncoders {
            level_bases,
            semantic_basis,
        }
    }

    /// Latent scene vector of a sample: per component a random sign and a
    /// magnitude in [0.4, 1). The magnitude floor keeps every scene's
    /// feature scale high enough that attention logits stay non-degenerate;
    /// near-zero latents would flatten the rasters the targets are
    /// normalized from.
    pub fn latent(cfg: &ModelConfig, sample_seed: u64) -> Vec<f64> {
        let mut rng = Prng::new(Prng::derive(sample_seed, TAG_SAMPLE));
        (0..cfg.latent_dim)
            .map(|_| {
                let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
                sign * rng.uniform(0.4, 1.0)
            })
            .collect()
    }

    fn expand(basis: &Tensor, z: &[f64], h: usize, w: usize, c: usize) -> FeatureMap {
        let cols = basis.cols();
        let mut out = vec![0.0; cols];
        for (l, zl) in z.iter().enumerate() {
            let row = &basis.data()[l * cols..(l + 1) * cols];
            for (o, b) in out.iter_mut().zip(row) {
                *o += zl * b;
            }
        }
        FeatureMap::new(h, w, c, out).expect("encoded map")
    }

    /// Depth features for all four levels plus the semantic feature, all
    /// deterministic in `sample_seed`.
    pub fn encode(&self, cfg: &ModelConfig, sample_seed: u64) -> ([FeatureMap; 4], FeatureMap) {
        let z = Self::latent(cfg, sample_seed);
        let levels = std::array::from_fn(|i| {
            let (h, w) = cfg.grids[i];
            Self::expand(&self.level_bases[i], &z, h, w, cfg.channels)
        });
        let (sh, sw) = cfg.semantic_grid;
        let semantic = Self::expand(&self.semantic_basis, &z, sh, sw, cfg.channels);
        (levels, semantic)
    }

    pub fn level_basis(&self, i: usize) -> &Tensor {
        &self.level_bases[i]
    }

    pub fn semantic_basis(&self) -> &Tensor {
        &self.semantic_basis
    }
}

/// Frozen linear read-out: every fused level is bilinearly resized to the
/// output raster, reduced to one channel, and the levels are summed.
pub struct StubDecoder {
    readouts: [Tensor; 4],
}

impl StubDecoder {
    fn generate(cfg: &ModelConfig) -> Self {
        let mut rng = Prng::new(Prng::derive(cfg.model_seed, TAG_DECODER));
        let s = 1.0 / (cfg.channels as f64).sqrt();
        let readouts =
            std::array::from_fn(|_| Tensor::uniform(&mut rng, vec![cfg.channels, 1], -s, s));
        StubDecoder { readouts }
    }

    pub fn readout(&self, i: usize) -> &Tensor {
        &self.readouts[i]
    }

    /// Record the read-out on a graph. `fused[i]` must be an
    /// (H_i·W_i)×C node.
    pub fn decode_node(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        fused: &[NodeId; 4],
    ) -> Result<NodeId> {
        let mut total: Option<NodeId> = None;
        for (i, &f) in fused.iter().enumerate() {
            let (h, w) = cfg.grids[i];
            let resized = g.bilinear_resize(f, h, w, cfg.out_h, cfg.out_w)?;
            let r = g.constant(self.readouts[i].clone());
            let contrib = g.matmul(resized, r)?;
            total = Some(match total {
                Some(t) => g.add(t, contrib)?,
                None => contrib,
            });
        }
        g.reshape(total.expect("four levels"), vec![cfg.out_h, cfg.out_w])
    }

    /// Eager read-out of concrete feature maps.
    pub fn apply(&self, cfg: &ModelConfig, fused: &[&FeatureMap; 4]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let nodes = std::array::from_fn(|i| g.constant(fused[i].tensor().clone()));
        let out = self.decode_node(&mut g, cfg, &nodes)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// One recorded forward pass, kept around so callers can run backward or
/// inspect attention.
pub struct ForwardPass {
    pub graph: Graph,
    pub pred: NodeId,
    pub records: Vec<AttentionRecord>,
    pub gate_nodes: Vec<GateNodes>,
}

/// Per-step training record.
#[derive(Clone, Copy, Debug)]
pub struct TrainEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainLog {
    pub entries: Vec<TrainEntry>,
    pub digest_before: String,
    pub digest_after: String,
}

/// Per-seed and aggregate evaluation results.
pub struct EvalReport {
    pub per_seed: Vec<(u64, MetricsReport)>,
    pub aggregate: MetricsReport,
}

/// The full artifact: frozen encoders and decoder, four trainable gates,
/// and the four frozen reference gates behind the data generator.
pub struct StubModel {
    cfg: ModelConfig,
    encoders: StubEncoders,
    decoder: StubDecoder,
    gates: Vec<GateParams>,
    reference: Vec<GateParams>,
}

impl StubModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let gate_cfg = cfg.gate_config();
        let encoders = StubEncoders::generate(&cfg);
        let decoder = StubDecoder::generate(&cfg);
        let mut gates = Vec::with_capacity(4);
        let mut reference = Vec::with_capacity(4);
        for i in 0..4 {
            let mut rng = Prng::new(Prng::derive(cfg.model_seed, TAG_GATE + i as u64));
            gates.push(GateParams::init(&gate_cfg, &mut rng)?);
            let mut rng = Prng::new(Prng::derive(cfg.model_seed, TAG_REFERENCE + i as u64));
            let mut reference_gate = GateParams::init(&gate_cfg, &mut rng)?;
            reference_gate.set_requires_grad(false);
            reference.push(reference_gate);
        }
        Ok(StubModel {
            cfg,
            encoders,
            decoder,
            gates,
            reference,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoders(&self) -> &StubEncoders {
        &self.encoders
    }

    pub fn decoder(&self) -> &StubDecoder {
        &self.decoder
    }

    pub fn gates(&self) -> &[GateParams] {
        &self.gates
    }

    pub fn reference_gates(&self) -> &[GateParams] {
        &self.reference
    }

    pub fn gates_mut(&mut self) -> &mut [GateParams] {
        &mut self.gates
    }

    /// Replace the trainable gates; used by checkpoint loading.
    pub fn set_gates(&mut self, gates: Vec<GateParams>) -> Result<()> {
        if gates.len() != 4 {
            return Err(Error::Contract(format!(
                "expected 4 gates, got {}",
                gates.len()
            )));
        }
        self.gates = gates;
        for gate in &mut self.gates {
            gate.set_requires_grad(true);
        }
        Ok(())
    }

    /// Copy the hidden reference gates into the trainable slots.
    pub fn set_gates_to_reference(&mut self) {
        self.gates = self.reference.clone();
        for gate in &mut self.gates {
            gate.set_requires_grad(true);
        }
    }

    /// SHA-256 over every frozen parameter (encoder bases, decoder
    /// read-outs, reference gates), little-endian, in a fixed order.
    pub fn frozen_digest(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |t: &Tensor| {
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        };
        for basis in &self.encoders.level_bases {
            feed(basis);
        }
        feed(&self.encoders.semantic_basis);
        for r in &self.decoder.readouts {
            feed(r);
        }
        for gate in &self.reference {
            for (_, t) in gate.named_tensors() {
                feed(t);
            }
        }
        let out = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in out {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Record a full forward pass with the given gates. The aligned
    /// semantic feature is computed once per distinct grid and shared.
    pub fn forward_with(
        &self,
        gates: &[GateParams],
        sample_seed: u64,
        tau: f64,
    ) -> Result<ForwardPass> {
        let (depth_feats, semantic) = self.encoders.encode(&self.cfg, sample_seed);
        let gate_cfg = self.cfg.gate_config();
        let mut g = Graph::new();

        let mut aligned_cache: Vec<((usize, usize), NodeId)> = Vec::new();
        let mut fused = Vec::with_capacity(4);
        let mut records = Vec::with_capacity(8);
        let mut gate_nodes = Vec::with_capacity(4);
        for i in 0..4 {
            let grid = self.cfg.grids[i];
            let aligned = match aligned_cache.iter().find(|(k, _)| *k == grid) {
                Some((_, id)) => *id,
                None => {
                    let a = align_semantic(&semantic, grid)?;
                    let id = g.constant(a.tensor().clone());
                    aligned_cache.push((grid, id));
                    id
                }
            };
            let f_d = g.constant(depth_feats[i].tensor().clone());
            let nodes = gates[i].register(&mut g);
            let (f_sg, recs) = gate_forward(&mut g, f_d, aligned, &nodes, &gate_cfg, tau, i)?;
            fused.push(f_sg);
            records.extend(recs);
            gate_nodes.push(nodes);
        }
        let fused: [NodeId; 4] = [fused[0], fused[1], fused[2], fused[3]];
        let pred = self.decoder.decode_node(&mut g, &self.cfg, &fused)?;
        Ok(ForwardPass {
            graph: g,
            pred,
            records,
            gate_nodes,
        })
    }

    /// Forward with the trainable gates; returns the raster and records.
    pub fn forward(&self, sample_seed: u64, tau: f64) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
        let pass = self.forward_with(&self.gates, sample_seed, tau)?;
        Ok((pass.graph.value(pass.pred).data().to_vec(), pass.records))
    }

    fn reference_raster(&self, sample_seed: u64) -> Result<Vec<f64>> {
        let pass = self.forward_with(&self.reference, sample_seed, 1.0)?;
        Ok(pass.graph.value(pass.pred).data().to_vec())
    }

    /// Resolve a sample seed to one whose reference raster has usable
    /// spread: the seed itself, or up to 3 deterministic perturbations.
    pub fn resolve_sample_seed(&self, sample_seed: u64) -> Result<u64> {
        let mut candidate = sample_seed;
        for retry in 0..=3u64 {
            if retry > 0 {
                candidate = Prng::derive(sample_seed, TAG_RETRY + retry);
            }
            let raster = self.reference_raster(candidate)?;
            if raster_range(&raster) > MIN_REFERENCE_RANGE {
                return Ok(candidate);
            }
        }
        Err(Error::Degenerate(format!(
            "sample seed {sample_seed}: reference raster stayed constant after 3 retries"
        )))
    }

    /// Ground-truth disparity for a sample: the reference-gate raster,
    /// min-max normalized to [0, 1]. All pixels are valid.
    pub fn make_target(&self, sample_seed: u64) -> Result<DisparityMap> {
        let seed = self.resolve_sample_seed(sample_seed)?;
        let raster = self.reference_raster(seed)?;
        let values = minmax_normalize(&raster);
        DisparityMap::dense(self.cfg.out_h, self.cfg.out_w, values)
    }

    /// Record one sample's forward pass and training loss (τ = 1). The
    /// prediction is min-max normalized into the target's [0, 1] frame on
    /// the tape; the losses are invariant under this affine map, and it
    /// makes a generator-matching prediction reproduce the target bit for
    /// bit, so the optimum has exactly zero loss and gradients (AdamW would
    /// otherwise amplify rounding-level gradients into full-size steps).
    pub fn sample_loss_graph(&self, sample_seed: u64) -> Result<(ForwardPass, NodeId)> {
        let seed = self.resolve_sample_seed(sample_seed)?;
        let target = self.make_target(seed)?;
        let mut pass = self.forward_with(&self.gates, seed, 1.0)?;
        let normalized = minmax_normalize_node(&mut pass.graph, pass.pred)?;
        let loss = combined_loss_node(
            &mut pass.graph,
            normalized,
            &target,
            self.cfg.mode,
            self.cfg.gm_scales,
        )?;
        Ok((pass, loss))
    }

    /// Names of the trainable parameter slots, gate-major, in update order.
    pub fn slot_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, gate) in self.gates.iter().enumerate() {
            for (name, _) in gate.named_tensors() {
                names.push(format!("gate{i}.{name}"));
            }
        }
        names
    }

    /// One sample's loss and per-slot gradients.
    fn sample_gradients(&self, sample_seed: u64) -> Result<(f64, Vec<Option<Tensor>>)> {
        let (pass, loss) = self.sample_loss_graph(sample_seed)?;
        let loss_value = pass.graph.value(loss).data()[0];
        let grads = pass.graph.backward(loss)?;
        let mut out = Vec::with_capacity(4 * 14);
        for nodes in &pass.gate_nodes {
            for (_, id) in nodes.named() {
                out.push(grads.get(id).cloned());
            }
        }
        Ok((loss_value, out))
    }

    /// Gate-only optimization: every step samples a batch of seeds, runs
    /// the τ=1 forward and the combined loss, averages gradients in sample
    /// order, and applies AdamW to the gates. Frozen parameters are
    /// digest-checked before and after.
    pub fn train(&mut self, run_seed: u64, steps: usize, batch: usize) -> Result<TrainLog> {
        if steps == 0 || batch == 0 {
            return Err(Error::Parameter(
                "steps and batch must be at least 1".into(),
            ));
        }
        let digest_before = self.frozen_digest();
        let adam_cfg = AdamWConfig {
            lr: self.cfg.lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.adam_eps,
            weight_decay: self.cfg.weight_decay,
        };
        let mut optimizer = AdamW::new(adam_cfg, steps);
        let mut seed_rng = Prng::new(Prng::derive(run_seed, TAG_TRAIN));
        let threads = thread_budget();
        let mut entries = Vec::with_capacity(steps);

        for step in 1..=steps {
            let batch_seeds: Vec<u64> = (0..batch).map(|_| seed_rng.next_u64()).collect();
            let results = parallel_map(&batch_seeds, threads, |&s| self.sample_gradients(s));

            let mut loss_sum = 0.0;
            let mut grad_acc: Vec<Option<Tensor>> = vec![None; 4 * 14];
            let inv_batch = 1.0 / batch as f64;
            for result in results {
                let (loss, grads) = result.map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("step {step}: {msg}")),
                    Error::Degenerate(msg) => Error::Degenerate(format!("step {step}: {msg}")),
                    other => other,
                })?;
                loss_sum += loss;
                for (slot, grad) in grads.into_iter().enumerate() {
                    if let Some(gt) = grad {
                        match &mut grad_acc[slot] {
                            Some(acc) => {
                                for (a, v) in acc.data_mut().iter_mut().zip(gt.data()) {
                                    *a += v * inv_batch;
                                }
                            }
                            None => {
                                let mut scaled = gt;
                                for v in scaled.data_mut() {
                                    *v *= inv_batch;
                                }
                                grad_acc[slot] = Some(scaled);
                            }
                        }
                    }
                }
            }
            let loss = loss_sum * inv_batch;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss became non-finite at step {step}"
                )));
            }

            let mut params: Vec<&mut Tensor> = Vec::with_capacity(4 * 14);
            for gate in &mut self.gates {
                for (_, t) in gate.named_tensors_mut() {
                    params.push(t);
                }
            }
            let grad_refs: Vec<Option<&Tensor>> = grad_acc.iter().map(|g| g.as_ref()).collect();
            let lr = optimizer.step(&mut params, &grad_refs)?;
            entries.push(TrainEntry { step, lr, loss });
        }

        let digest_after = self.frozen_digest();
        if digest_after != digest_before {
            return Err(Error::Contract(
                "frozen parameters changed during training".into(),
            ));
        }
        Ok(TrainLog {
            entries,
            digest_before,
            digest_after,
        })
    }

    /// Evaluate one sample at the given temperature: min-max normalize the
    /// prediction, map both prediction and target into depth, align, and
    /// score.
    pub fn evaluate_sample(&self, sample_seed: u64, tau: f64) -> Result<MetricsReport> {
        let seed = self.resolve_sample_seed(sample_seed)?;
        let target = self.make_target(seed)?;
        let pass = self.forward_with(&self.gates, seed, tau)?;
        let raster = pass.graph.value(pass.pred).data().to_vec();
        if raster_range(&raster) <= 1e-9 {
            return Err(Error::Degenerate(format!(
                "prediction for seed {seed} is constant; cannot normalize"
            )));
        }
        let pred_disp = minmax_normalize(&raster);
        let pred_depth = DepthMap::dense(
            self.cfg.out_h,
            self.cfg.out_w,
            pred_disp.iter().map(|&d| disparity_to_depth(d)).collect(),
        )?;
        let gt_depth = DepthMap::dense(
            self.cfg.out_h,
            self.cfg.out_w,
            target
                .values
                .iter()
                .map(|&d| disparity_to_depth(d))
                .collect(),
        )?;
        let (scale, shift) = align_least_squares(&pred_depth, &gt_depth)?;
        let aligned = apply_alignment(&pred_depth, scale, shift);
        Ok(MetricsReport {
            absrel: absrel(&aligned, &gt_depth)?,
            delta1: delta1(&aligned, &gt_depth)?,
            scale,
            shift,
            n_valid: gt_depth.valid_count(),
        })
    }

    /// Evaluate a set of seeds; the aggregate row carries the means of the
    /// metric and alignment columns and the summed valid-pixel count.
    pub fn evaluate(&self, seeds: &[u64], tau: f64) -> Result<EvalReport> {
        if seeds.is_empty() {
            return Err(Error::Parameter(
                "evaluation needs at least one seed".into(),
            ));
        }
        let threads = thread_budget();
        let results = parallel_map(seeds, threads, |&s| self.evaluate_sample(s, tau));
        let mut per_seed = Vec::with_capacity(seeds.len());
        for (seed, result) in seeds.iter().zip(results) {
            per_seed.push((*seed, result?));
        }
        let n = per_seed.len() as f64;
        let aggregate = MetricsReport {
            absrel: per_seed.iter().map(|(_, r)| r.absrel).sum::<f64>() / n,
            delta1: per_seed.iter().map(|(_, r)| r.delta1).sum::<f64>() / n,
            scale: per_seed.iter().map(|(_, r)| r.scale).sum::<f64>() / n,
            shift: per_seed.iter().map(|(_, r)| r.shift).sum::<f64>() / n,
            n_valid: per_seed.iter().map(|(_, r)| r.n_valid).sum(),
        };
        Ok(EvalReport {
            per_seed,
            aggregate,
        })
    }
}

fn raster_range(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    hi - lo
}

fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    values.iter().map(|v| (v - lo) / range).collect()
}
