//! Model and training configuration, plus its flat `key = value` text form.
//!
//! Lines are `key = value`; `#` starts a comment; unknown keys are rejected
//! rather than ignored. `to_text` emits every key in a fixed order, so a
//! round-tripped config is byte-stable.

use crate::error::{Error, Result};
use crate::gate::GateConfig;
use crate::losses::LossMode;

/// Everything that defines a model instance and its training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channel width C of every feature map.
    pub channels: usize,
    /// Projection width d inside the gates.
    pub proj_dim: usize,
    /// MLP hidden width (4·C when not overridden).
    pub hidden: usize,
    /// Attention heads per block.
    pub heads: usize,
    /// Residual variant switch for the gate blocks.
    pub residual: bool,
    /// Depth-feature token grids for the four levels.
    pub grids: [(usize, usize); 4],
    /// Semantic-feature token grid.
    pub semantic_grid: (usize, usize),
    /// Output raster size.
    pub out_h: usize,
    pub out_w: usize,
    /// Temperature applied in both attention blocks at inference.
    pub tau_inference: f64,
    /// Training objective.
    pub mode: LossMode,
    /// Seed for every frozen parameter (encoders, decoder, reference gates).
    pub model_seed: u64,
    /// Latent scene dimensionality of the stub encoders.
    pub latent_dim: usize,
    /// Gradient-matching pyramid depth.
    pub gm_scales: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    /// Default step budget; also the linear-schedule horizon.
    pub steps: usize,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: C=16, d=16, 8×8 grids, 32×32 output, batch 4,
    /// 500 steps.
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            proj_dim: 16,
            hidden: 64,
            heads: 1,
            residual: false,
            grids: [(8, 8); 4],
            semantic_grid: (16, 16),
            out_h: 32,
            out_w: 32,
            tau_inference: 2.5,
            mode: LossMode::V2,
            model_seed: 7,
            latent_dim: 2,
            gm_scales: 4,
            lr: 3e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: 4,
            steps: 500,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.gate_config().validate()?;
        if self.out_h == 0 || self.out_w == 0 {
            return Err(Error::Parameter(
                "output raster must be at least 1×1".into(),
            ));
        }
        for (i, (h, w)) in self.grids.iter().enumerate() {
            if *h == 0 || *w == 0 {
                return Err(Error::Parameter(format!(
                    "grid{} must be at least 1×1",
                    i + 1
                )));
            }
        }
        if self.semantic_grid.0 == 0 || self.semantic_grid.1 == 0 {
            return Err(Error::Parameter(
                "semantic_grid must be at least 1×1".into(),
            ));
        }
        if self.tau_inference.is_nan() || self.tau_inference < 1.0 {
            return Err(Error::Parameter(format!(
                "tau_inference must be at least 1, got {}",
                self.tau_inference
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Parameter("latent_dim must be at least 1".into()));
        }
        if self.gm_scales == 0 {
            return Err(Error::Parameter("gm_scales must be at least 1".into()));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Parameter(
                "batch and steps must be at least 1".into(),
            ));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Parameter(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            channels: self.channels,
            proj_dim: self.proj_dim,
            hidden: self.hidden,
            heads: self.heads,
            residual: self.residual,
        }
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let grid = |g: (usize, usize)| format!("{}x{}", g.0, g.1);
        let mut s = String::new();
        s.push_str(&format!("channels = {}\n", self.channels));
        s.push_str(&format!("proj_dim = {}\n", self.proj_dim));
        s.push_str(&format!("hidden = {}\n", self.hidden));
        s.push_str(&format!("heads = {}\n", self.heads));
        s.push_str(&format!("residual = {}\n", self.residual));
        for (i, g) in self.grids.iter().enumerate() {
            s.push_str(&format!("grid{} = {}\n", i + 1, grid(*g)));
        }
        s.push_str(&format!("semantic_grid = {}\n", grid(self.semantic_grid)));
        s.push_str(&format!("out_h = {}\n", self.out_h));
        s.push_str(&format!("out_w = {}\n", self.out_w));
        s.push_str(&format!("tau_inference = {}\n", self.tau_inference));
        s.push_str(&format!("mode = {}\n", self.mode.label()));
        s.push_str(&format!("model_seed = {}\n", self.model_seed));
        s.push_str(&format!("latent_dim = {}\n", self.latent_dim));
        s.push_str(&format!("gm_scales = {}\n", self.gm_scales));
        s.push_str(&format!("lr = {}\n", self.lr));
        s.push_str(&format!("weight_decay = {}\n", self.weight_decay));
        s.push_str(&format!("beta1 = {}\n", self.beta1));
        s.push_str(&format!("beta2 = {}\n", self.beta2));
        s.push_str(&format!("adam_eps = {}\n", self.adam_eps));
        s.push_str(&format!("batch = {}\n", self.batch));
        s.push_str(&format!("steps = {}\n", self.steps));
        s
    }

    /// Parse the flat text form over the defaults. Unknown keys, malformed
    /// lines, and malformed values fail with the offending key named.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut hidden_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parameter(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad =
                |what: &str| Error::Parameter(format!("key `{key}`: invalid {what} `{value}`"));
            match key {
                "channels" => cfg.channels = value.parse().map_err(|_| bad("integer"))?,
                "proj_dim" => cfg.proj_dim = value.parse().map_err(|_| bad("integer"))?,
                "hidden" => {
                    cfg.hidden = value.parse().map_err(|_| bad("integer"))?;
                    hidden_set = true;
                }
                "heads" => cfg.heads = value.parse().map_err(|_| bad("integer"))?,
                "residual" => cfg.residual = value.parse().map_err(|_| bad("boolean"))?,
                "grid1" => cfg.grids[0] = parse_grid(key, value)?,
                "grid2" => cfg.grids[1] = parse_grid(key, value)?,
                "grid3" => cfg.grids[2] = parse_grid(key, value)?,
                "grid4" => cfg.grids[3] = parse_grid(key, value)?,
                "semantic_grid" => cfg.semantic_grid = parse_grid(key, value)?,
                "out_h" => cfg.out_h = value.parse().map_err(|_| bad("integer"))?,
                "out_w" => cfg.out_w = value.parse().map_err(|_| bad("integer"))?,
                "tau_inference" => cfg.tau_inference = value.parse().map_err(|_| bad("number"))?,
                "mode" => cfg.mode = LossMode::parse(value)?,
                "model_seed" => cfg.model_seed = value.parse().map_err(|_| bad("integer"))?,
                "latent_dim" => cfg.latent_dim = value.parse().map_err(|_| bad("integer"))?,
                "gm_scales" => cfg.gm_scales = value.parse().map_err(|_| bad("integer"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("number"))?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad("number"))?,
                "beta1" => cfg.beta1 = value.parse().map_err(|_| bad("number"))?,
                "beta2" => cfg.beta2 = value.parse().map_err(|_| bad("number"))?,
                "adam_eps" => cfg.adam_eps = value.parse().map_err(|_| bad("number"))?,
                "batch" => cfg.batch = value.parse().map_err(|_| bad("integer"))?,
                "steps" => cfg.steps = value.parse().map_err(|_| bad("integer"))?,
                other => {
                    return Err(Error::Parameter(format!("unknown config key `{other}`")));
                }
            }
        }
        if !hidden_set {
            cfg.hidden = 4 * cfg.channels;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_grid(key: &str, value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once('x')
        .ok_or_else(|| Error::Parameter(format!("key `{key}`: expected HxW, got `{value}`")))?;
    let h = h
        .trim()
        .parse()
        .map_err(|_| Error::Parameter(format!("key `{key}`: invalid height in `{value}`")))?;
    let w = w
        .trim()
        .parse()
        .map_err(|_| Error::Parameter(format!("key `{key}`: invalid width in `{value}`")))?;
    Ok((h, w))
}
