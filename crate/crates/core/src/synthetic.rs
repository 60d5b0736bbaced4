//! Multi-regime harmonic demixing benchmark.
//!
//! Samples are noisy superpositions `x_t = Σ a_k cos(ω_k τ_z(t) + φ) + ε_t`
//! whose time warp `τ_z` is one of three regimes. A small pre-LN encoder
//! (two blocks, two heads) maps each noisy window to an estimate of the clean
//! superposition, and is trained with Adam on the denoising MSE.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, effective_operator, forward_multihead, LayerCache, MultiHeadDoc, MultiHeadParams, ToaVariant,
};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::serial::{fmt_f64, MatrixDoc};
use crate::sor::{SorConfig, SorState};
use crate::tensor::{dft_magnitude, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Stationary,
    Vibrato,
    Chirp,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Stationary, Regime::Vibrato, Regime::Chirp];

    pub fn index(self) -> usize {
        match self {
            Regime::Stationary => 0,
            Regime::Vibrato => 1,
            Regime::Chirp => 2,
        }
    }

    pub fn from_index(z: usize) -> Result<Self> {
        Self::ALL
            .get(z)
            .copied()
            .ok_or_else(|| Error::Config(format!("regime must be 0, 1 or 2, got {z}")))
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Stationary => "stationary",
            Regime::Vibrato => "vibrato",
            Regime::Chirp => "chirp",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "0" | "stationary" => Ok(Regime::Stationary),
            "1" | "vibrato" => Ok(Regime::Vibrato),
            "2" | "chirp" => Ok(Regime::Chirp),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }
}

/// Warped time `τ_z(t)` for real `t`, including positions past the window.
pub fn time_warp(t: f64, regime: Regime, length: usize) -> f64 {
    let l = length as f64;
    match regime {
        Regime::Stationary => t,
        Regime::Vibrato => t + 20.0 * (2.0 * TAU * t / l).sin(),
        Regime::Chirp => t + 40.0 * (t / l).powi(2),
    }
}

/// Integer-indexed warp with a numeric regime label.
pub fn warp(t: usize, z: usize, length: usize) -> Result<f64> {
    if length == 0 {
        return Err(Error::Precondition("length must be positive".into()));
    }
    Ok(time_warp(t as f64, Regime::from_index(z)?, length))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub length: usize,
    pub periods: Vec<f64>,
    /// One amplitude per period.
    pub amplitudes: Vec<f64>,
    pub noise_sigma: f64,
    /// Fixed regime for every sample; drawn uniformly when unset.
    pub regime: Option<Regime>,
    /// Fixed phase for every sample; drawn from `U[0, 2π)` when unset.
    pub phase: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            length: 672,
            periods: vec![24.0, 84.0, 168.0],
            amplitudes: vec![1.0; 3],
            noise_sigma: 0.5,
            regime: None,
            phase: None,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Small configuration for quick runs: `L = 96`, periods 8 and 24.
    pub fn short() -> Self {
        Self {
            length: 96,
            periods: vec![8.0, 24.0],
            amplitudes: vec![1.0; 2],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("length must be positive".into()));
        }
        if self.periods.is_empty() || self.periods.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Config("periods must be positive and non-empty".into()));
        }
        if self.amplitudes.len() != self.periods.len() {
            return Err(Error::Config(format!(
                "{} amplitudes for {} periods",
                self.amplitudes.len(),
                self.periods.len()
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be ≥ 0, got {}",
                self.noise_sigma
            )));
        }
        if let Some(phi) = self.phase {
            if !(0.0..TAU).contains(&phi) {
                return Err(Error::Config(format!("phase must lie in [0, 2π), got {phi}")));
            }
        }
        Ok(())
    }

    /// Noise-free superposition for one regime and phase.
    pub fn clean_signal(&self, regime: Regime, phase: f64) -> Matrix {
        let values: Vec<f64> = (0..self.length)
            .map(|t| {
                let tau = time_warp(t as f64, regime, self.length);
                self.periods
                    .iter()
                    .zip(&self.amplitudes)
                    .map(|(p, a)| a * (TAU / p * tau + phase).cos())
                    .sum()
            })
            .collect();
        Matrix::row_vector(&values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub noisy: Matrix,
    pub clean: Matrix,
    pub regime: Regime,
    pub phase: f64,
}

/// Endless deterministic sample source.
#[derive(Debug, Clone)]
pub struct SampleStream {
    spec: SyntheticSpec,
    rng: ChaCha8Rng,
}

impl SampleStream {
    pub fn new(spec: SyntheticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_sample(&mut self) -> Sample {
        let regime = self
            .spec
            .regime
            .unwrap_or_else(|| Regime::ALL[self.rng.random_range(0..3)]);
        let phase = self.spec.phase.unwrap_or_else(|| self.rng.random::<f64>() * TAU);
        let clean = self.spec.clean_signal(regime, phase);
        let sigma = self.spec.noise_sigma;
        let mut noisy = clean.clone();
        for v in noisy.data_mut() {
            let e: f64 = self.rng.sample(StandardNormal);
            *v += sigma * e;
        }
        Sample {
            noisy,
            clean,
            regime,
            phase,
        }
    }
}

/// `count` samples from the stream seeded by `spec.seed`.
pub fn generate(spec: &SyntheticSpec, count: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Precondition("sample count must be positive".into()));
    }
    let mut stream = SampleStream::new(spec.clone(), spec.seed)?;
    Ok((0..count).map(|_| stream.next_sample()).collect())
}

/// Offset separating the held-out evaluation stream from the training stream.
const EVAL_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn eval_set(spec: &SyntheticSpec, count: usize) -> Result<Vec<Sample>> {
    let held_out = SyntheticSpec {
        seed: spec.seed.wrapping_add(EVAL_SEED_OFFSET),
        ..spec.clone()
    };
    generate(&held_out, count)
}

/// CSV with header `z,phase,x0..,y0..`; one sample per line.
pub fn dataset_to_csv(samples: &[Sample]) -> String {
    let l = samples.first().map_or(0, |s| s.clean.cols());
    let mut header = vec!["z".to_string(), "phase".to_string()];
    header.extend((0..l).map(|t| format!("x{t}")));
    header.extend((0..l).map(|t| format!("y{t}")));
    let mut out = header.join(",");
    out.push('\n');
    for s in samples {
        let mut fields = vec![s.regime.index().to_string(), fmt_f64(s.phase)];
        fields.extend(s.noisy.data().iter().map(|&v| fmt_f64(v)));
        fields.extend(s.clean.data().iter().map(|&v| fmt_f64(v)));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn dataset_from_csv(text: &str) -> Result<Vec<Sample>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty dataset".into()))?;
    let width = header.split(',').count();
    if width < 4 || width % 2 != 0 {
        return Err(Error::Parse(format!("bad dataset header with {width} columns")));
    }
    let l = (width - 2) / 2;
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != width {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, expected {width}",
                    i + 1,
                    fields.len()
                )));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {s:?}: {e}", i + 1)))
            };
            let z: usize = fields[0]
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad regime {:?}", i + 1, fields[0])))?;
            let regime = Regime::from_index(z).map_err(|e| Error::Parse(e.to_string()))?;
            let phase = num(fields[1])?;
            let values = fields[2..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            Ok(Sample {
                noisy: Matrix::row_vector(&values[..l]),
                clean: Matrix::row_vector(&values[l..]),
                regime,
                phase,
            })
        })
        .collect()
}

// Model ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_h: usize,
    pub d_v: usize,
    pub mlp_hidden: usize,
    pub variant: ToaVariant,
    pub sor: SorConfig,
    /// Standard deviation of the initial operator offsets.
    pub sigma_m: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(ToaVariant::ToaGated)
    }
}

impl ModelConfig {
    /// Two blocks, two heads, width 32; SOR on for the operator variants.
    pub fn new(variant: ToaVariant) -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_h: 16,
            d_v: 16,
            mlp_hidden: 64,
            variant,
            sor: if variant.uses_operators() {
                SorConfig::default()
            } else {
                SorConfig::disabled()
            },
            sigma_m: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_h == 0 || self.d_v == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("layer, head and width counts must be positive".into()));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        self.sor.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub eval_samples: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
    /// Size of a fixed training pool; fresh samples every step when unset.
    pub train_samples: Option<usize>,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Worker threads for the per-sample passes. `1` is bit-reproducible.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            eval_samples: 512,
            seed: 0,
            train_samples: None,
            eval_every: 500,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Budget paired with [`SyntheticSpec::short`]: fewer, smaller steps at a
    /// higher learning rate so the L = 96 benchmark trains in about a minute.
    pub fn short() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            learning_rate: 3e-3,
            eval_samples: 256,
            eval_every: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be ≥ 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.eval_samples == 0 || self.threads == 0 {
            return Err(Error::Config(
                "batch size, eval samples and threads must be positive".into(),
            ));
        }
        if self.train_samples == Some(0) {
            return Err(Error::Config("training pool must not be empty".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Sinusoidal code in channels `1..d`; channel 0 is left for the signal.
pub fn positional_encoding(length: usize, d_model: usize) -> Matrix {
    let width = (d_model - 1) as f64;
    Matrix::from_fn(length, d_model, |t, c| {
        if c == 0 {
            return 0.0;
        }
        let j = c - 1;
        let rate = 10000f64.powf(-((j / 2 * 2) as f64) / width);
        let angle = t as f64 * rate;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `x e + PE`: the scalar series lifted along the 1×d embedding row.
pub fn embed(noisy: &Matrix, embedding: &Matrix, pe: &Matrix) -> Result<Matrix> {
    if noisy.rows() != 1 || embedding.rows() != 1 || pe.shape() != (noisy.cols(), embedding.cols()) {
        return Err(Error::Shape {
            op: "embed",
            left: noisy.shape(),
            right: pe.shape(),
        });
    }
    noisy.transpose().matmul(embedding)?.add(pe)
}

/// `(F r + b)ᵀ`, one scalar per time step.
pub fn readout(features: &Matrix, weight: &Matrix, bias: f64) -> Result<Matrix> {
    if weight.shape() != (features.cols(), 1) {
        return Err(Error::Shape {
            op: "readout",
            left: features.shape(),
            right: weight.shape(),
        });
    }
    Ok(features.matmul(weight)?.map(|v| v + bias).transpose())
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        }
    }

    fn forward(&self, x: &Matrix) -> (Matrix, LnCache) {
        let d = x.cols();
        let mut xhat = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.gain.row(0);
        let b = self.bias.row(0);
        let mut y = xhat.clone();
        for r in 0..y.rows() {
            for ((v, gi), bi) in y.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    /// Accumulates gain/bias gradients into `grad` and returns `∂/∂x`.
    fn backward(&self, dy: &Matrix, cache: &LnCache, grad: &mut LayerNorm) -> Matrix {
        let d = dy.cols();
        let g = self.gain.row(0);
        let mut dx = Matrix::zeros(dy.rows(), d);
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..d {
                grad.gain.row_mut(0)[c] += dyr[c] * xh[c];
                grad.bias.row_mut(0)[c] += dyr[c];
            }
            let dxhat: Vec<f64> = dyr.iter().zip(g).map(|(a, b)| a * b).collect();
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let inv = cache.inv_std[r];
            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = inv * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
        dx
    }

    fn zeros_like(&self) -> Self {
        Self {
            gain: Matrix::zeros(1, self.gain.cols()),
            bias: Matrix::zeros(1, self.bias.cols()),
        }
    }
}

/// Pre-LN encoder block: `h + Attn(LN(h))`, then `h + MLP(LN(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadParams,
    pub ln2: LayerNorm,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    attn: LayerCache,
    ln2: LnCache,
    mlp_in: Matrix,
    pre_act: Matrix,
    hidden: Matrix,
}

fn add_row_bias(m: &mut Matrix, bias: &Matrix) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias.row(0)) {
            *v += b;
        }
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

impl Block {
    fn init(cfg: &ModelConfig, length: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let mut attn = MultiHeadParams::init(cfg.variant, length, d, cfg.heads, cfg.d_h, cfg.d_v, cfg.sigma_m, rng);
        attn.set_scaled(true);
        Self {
            ln1: LayerNorm::new(d),
            attn,
            ln2: LayerNorm::new(d),
            w1: Matrix::random_normal(d, cfg.mlp_hidden, (2.0 / d as f64).sqrt(), rng),
            b1: Matrix::zeros(1, cfg.mlp_hidden),
            w2: Matrix::random_normal(cfg.mlp_hidden, d, 1.0 / (cfg.mlp_hidden as f64).sqrt(), rng),
            b2: Matrix::zeros(1, d),
        }
    }

    fn forward(&self, h: &Matrix, sor: &mut SorState) -> Result<(Matrix, BlockCache)> {
        let (u, ln1) = self.ln1.forward(h);
        let (a, attn) = forward_multihead(&u, &self.attn, sor)?;
        let h_mid = h.add(&a)?;
        let (mlp_in, ln2) = self.ln2.forward(&h_mid);
        let mut pre_act = mlp_in.matmul(&self.w1)?;
        add_row_bias(&mut pre_act, &self.b1);
        let hidden = pre_act.map(|v| v.max(0.0));
        let mut m = hidden.matmul(&self.w2)?;
        add_row_bias(&mut m, &self.b2);
        let out = h_mid.add(&m)?;
        Ok((
            out,
            BlockCache {
                ln1,
                attn,
                ln2,
                mlp_in,
                pre_act,
                hidden,
            },
        ))
    }

    fn backward(&self, d_out: &Matrix, cache: &BlockCache, grad: &mut Block) -> Result<Matrix> {
        grad.w2.add_scaled_assign(&cache.hidden.matmul_tn(d_out)?, 1.0)?;
        grad.b2.add_scaled_assign(&column_sums(d_out), 1.0)?;
        let d_hidden = d_out.matmul_nt(&self.w2)?;
        let d_pre = d_hidden.zip_with(&cache.pre_act, "relu backward", |g, z| if z > 0.0 { g } else { 0.0 })?;
        grad.w1.add_scaled_assign(&cache.mlp_in.matmul_tn(&d_pre)?, 1.0)?;
        grad.b1.add_scaled_assign(&column_sums(&d_pre), 1.0)?;
        let d_mlp_in = d_pre.matmul_nt(&self.w1)?;
        let mut d_mid = self.ln2.backward(&d_mlp_in, &cache.ln2, &mut grad.ln2);
        d_mid.add_scaled_assign(d_out, 1.0)?;

        let (g_attn, d_u) = attention::backward(&d_mid, &cache.attn, &self.attn)?;
        for (acc, g) in grad.attn.params_mut().into_iter().zip(tensors_of_attn(&g_attn)) {
            acc.add_scaled_assign(g, 1.0)?;
        }
        let mut d_h = self.ln1.backward(&d_u, &cache.ln1, &mut grad.ln1);
        d_h.add_scaled_assign(&d_mid, 1.0)?;
        Ok(d_h)
    }

    fn zeros_like(&self) -> Self {
        Self {
            ln1: self.ln1.zeros_like(),
            attn: self.attn.zeros_like(),
            ln2: self.ln2.zeros_like(),
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Matrix::zeros(1, self.b1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: Matrix::zeros(1, self.b2.cols()),
        }
    }
}

fn tensors_of_attn(p: &MultiHeadParams) -> Vec<&Matrix> {
    p.named_params().into_iter().map(|(_, m)| m).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub length: usize,
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    pub readout: Matrix,
    /// 1×1 readout bias.
    pub readout_bias: Matrix,
    pe: Matrix,
}

/// Intermediates of one model forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    blocks: Vec<BlockCache>,
    block_inputs: Vec<Matrix>,
    final_ln: LnCache,
    features: Matrix,
}

impl Model {
    pub fn init(config: &ModelConfig, length: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if length == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let embedding = Matrix::random_normal(1, d, 1.0, &mut rng);
        let blocks = (0..config.layers)
            .map(|_| Block::init(config, length, &mut rng))
            .collect();
        let readout = Matrix::random_normal(d, 1, 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            config: config.clone(),
            length,
            embedding,
            blocks,
            final_ln: LayerNorm::new(d),
            readout,
            readout_bias: Matrix::zeros(1, 1),
            pe: positional_encoding(length, d),
        })
    }

    pub fn variant(&self) -> ToaVariant {
        self.config.variant
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            length: self.length,
            embedding: Matrix::zeros(1, self.embedding.cols()),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            final_ln: self.final_ln.zeros_like(),
            readout: Matrix::zeros(self.readout.rows(), 1),
            readout_bias: Matrix::zeros(1, 1),
            pe: self.pe.clone(),
        }
    }

    /// Every trainable tensor with a stable name, in optimizer order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1.gain"), &b.ln1.gain));
            out.push((format!("block{i}.ln1.bias"), &b.ln1.bias));
            for (name, m) in b.attn.named_params() {
                out.push((format!("block{i}.attn.{name}"), m));
            }
            out.push((format!("block{i}.ln2.gain"), &b.ln2.gain));
            out.push((format!("block{i}.ln2.bias"), &b.ln2.bias));
            out.push((format!("block{i}.mlp.w1"), &b.w1));
            out.push((format!("block{i}.mlp.b1"), &b.b1));
            out.push((format!("block{i}.mlp.w2"), &b.w2));
            out.push((format!("block{i}.mlp.b2"), &b.b2));
        }
        out.push(("final_ln.gain".to_string(), &self.final_ln.gain));
        out.push(("final_ln.bias".to_string(), &self.final_ln.bias));
        out.push(("readout".to_string(), &self.readout));
        out.push(("readout_bias".to_string(), &self.readout_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.push(&mut b.ln1.gain);
            out.push(&mut b.ln1.bias);
            out.extend(b.attn.params_mut());
            out.push(&mut b.ln2.gain);
            out.push(&mut b.ln2.bias);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
        }
        out.push(&mut self.final_ln.gain);
        out.push(&mut self.final_ln.bias);
        out.push(&mut self.readout);
        out.push(&mut self.readout_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }

    fn check_input(&self, noisy: &Matrix) -> Result<()> {
        if noisy.shape() != (1, self.length) {
            return Err(Error::Shape {
                op: "model input",
                left: noisy.shape(),
                right: (1, self.length),
            });
        }
        Ok(())
    }

    pub fn forward_cached(&self, noisy: &Matrix, sor: &mut SorState) -> Result<(Matrix, ForwardCache)> {
        self.check_input(noisy)?;
        let mut h = embed(noisy, &self.embedding, &self.pe)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(&h, sor)?;
            block_inputs.push(std::mem::replace(&mut h, next));
            blocks.push(cache);
        }
        let (features, final_ln) = self.final_ln.forward(&h);
        let y = readout(&features, &self.readout, self.readout_bias[(0, 0)])?;
        Ok((
            y,
            ForwardCache {
                input: noisy.clone(),
                blocks,
                block_inputs,
                final_ln,
                features,
            },
        ))
    }

    /// Prediction with SOR disabled.
    pub fn predict(&self, noisy: &Matrix) -> Result<Matrix> {
        self.forward_cached(noisy, &mut SorState::disabled()).map(|(y, _)| y)
    }

    /// Parameter gradients for `∂loss/∂y` (1×L).
    pub fn backward(&self, d_y: &Matrix, cache: &ForwardCache) -> Result<Model> {
        let mut grad = self.zeros_like();
        let d_col = d_y.transpose();
        grad.readout = cache.features.matmul_tn(&d_col)?;
        grad.readout_bias[(0, 0)] = d_col.sum();
        let d_features = d_col.matmul_nt(&self.readout)?;
        let mut d_h = self.final_ln.backward(&d_features, &cache.final_ln, &mut grad.final_ln);
        for (i, b) in self.blocks.iter().enumerate().rev() {
            d_h = b.backward(&d_h, &cache.blocks[i], &mut grad.blocks[i])?;
        }
        grad.embedding = cache.input.matmul(&d_h)?;
        Ok(grad)
    }

    /// Mean squared error against `clean` and its gradient w.r.t. every
    /// parameter, with SOR draws from `sor`.
    pub fn loss_and_grad(&self, sample: &Sample, sor: &mut SorState) -> Result<(f64, Model)> {
        let (y, cache) = self.forward_cached(&sample.noisy, sor)?;
        let diff = y.sub(&sample.clean)?;
        let n = diff.cols() as f64;
        let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
        let grad = self.backward(&diff.scale(2.0 / n), &cache)?;
        Ok((loss, grad))
    }

    fn accumulate(&mut self, other: &Model, alpha: f64) -> Result<()> {
        let src: Vec<&Matrix> = other.named_tensors().into_iter().map(|(_, m)| m).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.add_scaled_assign(s, alpha)?;
        }
        Ok(())
    }

    /// Layer-normalized inputs seen by each attention layer for `noisy`.
    pub fn attention_inputs(&self, noisy: &Matrix) -> Result<Vec<Matrix>> {
        let (_, cache) = self.forward_cached(noisy, &mut SorState::disabled())?;
        Ok(self
            .blocks
            .iter()
            .zip(&cache.block_inputs)
            .map(|(b, h)| b.ln1.forward(h).0)
            .collect())
    }

    pub fn to_doc(&self) -> ModelDoc {
        ModelDoc {
            format: MODEL_FORMAT.to_string(),
            config: self.config.clone(),
            length: self.length,
            embedding: (&self.embedding).into(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockDoc {
                    ln1_gain: (&b.ln1.gain).into(),
                    ln1_bias: (&b.ln1.bias).into(),
                    attention: b.attn.to_doc(),
                    ln2_gain: (&b.ln2.gain).into(),
                    ln2_bias: (&b.ln2.bias).into(),
                    w1: (&b.w1).into(),
                    b1: (&b.b1).into(),
                    w2: (&b.w2).into(),
                    b2: (&b.b2).into(),
                })
                .collect(),
            final_ln_gain: (&self.final_ln.gain).into(),
            final_ln_bias: (&self.final_ln.bias).into(),
            readout: (&self.readout).into(),
            readout_bias: (&self.readout_bias).into(),
        }
    }

    /// Rebuilds a model and checks every tensor against the configuration.
    pub fn from_doc(doc: &ModelDoc) -> Result<Self> {
        if doc.format != MODEL_FORMAT {
            return Err(Error::Parse(format!("unsupported model format {:?}", doc.format)));
        }
        doc.config.validate().map_err(|e| Error::Parse(e.to_string()))?;
        let template = Model::init(&doc.config, doc.length, 0).map_err(|e| Error::Parse(e.to_string()))?;
        let blocks = doc
            .blocks
            .iter()
            .map(|b| {
                Ok(Block {
                    ln1: LayerNorm {
                        gain: b.ln1_gain.decode()?,
                        bias: b.ln1_bias.decode()?,
                    },
                    attn: MultiHeadParams::from_doc(&b.attention)?,
                    ln2: LayerNorm {
                        gain: b.ln2_gain.decode()?,
                        bias: b.ln2_bias.decode()?,
                    },
                    w1: b.w1.decode()?,
                    b1: b.b1.decode()?,
                    w2: b.w2.decode()?,
                    b2: b.b2.decode()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            config: doc.config.clone(),
            length: doc.length,
            embedding: doc.embedding.decode()?,
            blocks,
            final_ln: LayerNorm {
                gain: doc.final_ln_gain.decode()?,
                bias: doc.final_ln_bias.decode()?,
            },
            readout: doc.readout.decode()?,
            readout_bias: doc.readout_bias.decode()?,
            pe: template.pe.clone(),
        };
        let want = template.named_tensors();
        let got = model.named_tensors();
        if want.len() != got.len() {
            return Err(Error::Parse(
                "checkpoint tensor count does not match its configuration".into(),
            ));
        }
        for ((name, w), (_, g)) in want.iter().zip(&got) {
            if w.shape() != g.shape() {
                return Err(Error::Parse(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Parse(format!("tensor {name} contains non-finite values")));
            }
        }
        if model.blocks.iter().any(|b| b.attn.variant != doc.config.variant) {
            return Err(Error::Parse(
                "attention variant does not match model configuration".into(),
            ));
        }
        Ok(model)
    }
}

const MODEL_FORMAT: &str = "toa-model/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDoc {
    ln1_gain: MatrixDoc,
    ln1_bias: MatrixDoc,
    attention: MultiHeadDoc,
    ln2_gain: MatrixDoc,
    ln2_bias: MatrixDoc,
    w1: MatrixDoc,
    b1: MatrixDoc,
    w2: MatrixDoc,
    b2: MatrixDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDoc {
    format: String,
    pub config: ModelConfig,
    pub length: usize,
    embedding: MatrixDoc,
    blocks: Vec<BlockDoc>,
    final_ln_gain: MatrixDoc,
    final_ln_bias: MatrixDoc,
    readout: MatrixDoc,
    readout_bias: MatrixDoc,
}

/// A trained model together with the data it was trained on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelDoc,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub final_eval_mse: f64,
}

impl Checkpoint {
    pub fn new(model: &Model, data: &SyntheticSpec, train: &TrainConfig, final_eval_mse: f64) -> Self {
        Self {
            model: model.to_doc(),
            data: data.clone(),
            train: train.clone(),
            final_eval_mse,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))
    }

    pub fn decode_model(&self) -> Result<Model> {
        let model = Model::from_doc(&self.model)?;
        if model.length != self.data.length {
            return Err(Error::Parse(format!(
                "model length {} does not match data length {}",
                model.length, self.data.length
            )));
        }
        Ok(model)
    }
}

// Training ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub eval_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<TrainRecord>,
    pub initial_eval_mse: f64,
    pub final_eval_mse: f64,
}

/// Mean per-sample MSE of `model` on `samples`, SOR off.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let y = model.predict(&s.noisy)?;
        total += y.sub(&s.clean)?.data().iter().map(|v| v * v).sum::<f64>() / s.clean.cols() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn batch_grad(
    model: &Model,
    batch: &[Sample],
    sor_cfg: &SorConfig,
    stream_base: u64,
    threads: usize,
) -> Result<(f64, Model)> {
    let scale = 1.0 / batch.len() as f64;
    let run = |chunk: &[Sample], offset: usize| -> Result<(f64, Model)> {
        let mut acc = model.zeros_like();
        let mut loss = 0.0;
        for (i, s) in chunk.iter().enumerate() {
            let mut sor = SorState::for_stream(*sor_cfg, stream_base + (offset + i) as u64);
            let (l, g) = model.loss_and_grad(s, &mut sor)?;
            loss += l * scale;
            acc.accumulate(&g, scale)?;
        }
        Ok((loss, acc))
    };
    if threads <= 1 {
        return run(batch, 0);
    }
    let chunk = batch.len().div_ceil(threads);
    let parts: Vec<Result<(f64, Model)>> = batch
        .par_chunks(chunk)
        .enumerate()
        .map(|(i, c)| run(c, i * chunk))
        .collect();
    let mut parts = parts.into_iter();
    let (mut loss, mut acc) = parts.next().expect("non-empty batch")?;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        acc.accumulate(&g, 1.0)?;
    }
    Ok((loss, acc))
}

/// Trains a fresh model and evaluates it on the held-out set.
///
/// Training samples come from the stream seeded by `data.seed` (or a fixed
/// pool drawn from it); evaluation uses a disjoint stream. SOR masks for
/// sample `i` of step `s` come from stream `s·batch + i` of the SOR seed, so
/// draws do not depend on the thread count.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &SyntheticSpec) -> Result<TrainOutcome> {
    train_with_progress(model_cfg, cfg, data, |_| {})
}

pub fn train_with_progress(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &SyntheticSpec,
    mut progress: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let mut model = Model::init(model_cfg, data.length, cfg.seed)?;
    let eval = eval_set(data, cfg.eval_samples)?;
    let initial_eval_mse = evaluate(&model, &eval)?;

    let mut stream = SampleStream::new(data.clone(), data.seed)?;
    let pool: Option<Vec<Sample>> = cfg
        .train_samples
        .map(|n| (0..n).map(|_| stream.next_sample()).collect());
    let mut pick = ChaCha8Rng::seed_from_u64(data.seed ^ cfg.seed.rotate_left(32));

    let shapes: Vec<(usize, usize)> = model.named_tensors().iter().map(|(_, m)| m.shape()).collect();
    let mut opt = Adam::new(cfg.adam(), shapes);
    let pool_threads = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut curve = Vec::with_capacity(cfg.steps);
    let mut final_eval_mse = initial_eval_mse;
    for step in 0..cfg.steps {
        let batch: Vec<Sample> = match &pool {
            Some(p) => (0..cfg.batch_size)
                .map(|_| p[pick.random_range(0..p.len())].clone())
                .collect(),
            None => (0..cfg.batch_size).map(|_| stream.next_sample()).collect(),
        };
        let stream_base = (step * cfg.batch_size) as u64;
        let (loss, grad) =
            pool_threads.install(|| batch_grad(&model, &batch, &model_cfg.sor, stream_base, cfg.threads))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let mut grads: Vec<Matrix> = grad.named_tensors().into_iter().map(|(_, m)| m.clone()).collect();
        clip_global_norm(&mut grads, cfg.grad_clip);
        let refs: Vec<&Matrix> = grads.iter().collect();
        opt.step(model.tensors_mut(), &refs)?;

        let last = step + 1 == cfg.steps;
        let eval_mse = if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            let mse = evaluate(&model, &eval)?;
            if !mse.is_finite() {
                return Err(Error::Diverged { step, loss: mse });
            }
            final_eval_mse = mse;
            Some(mse)
        } else {
            None
        };
        let record = TrainRecord {
            step: step + 1,
            loss,
            eval_mse,
        };
        progress(&record);
        curve.push(record);
    }
    Ok(TrainOutcome {
        model,
        curve,
        initial_eval_mse,
        final_eval_mse,
    })
}

/// Metrics CSV: `step,loss,eval_mse` with an empty field between evaluations.
pub fn curve_to_csv(curve: &[TrainRecord]) -> String {
    let mut out = String::from("step,loss,eval_mse\n");
    for r in curve {
        out.push_str(&format!(
            "{},{},{}\n",
            r.step,
            fmt_f64(r.loss),
            r.eval_mse.map(fmt_f64).unwrap_or_default()
        ));
    }
    out
}

// Inspection ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExtractedOperator {
    pub layer: usize,
    pub head: usize,
    pub matrix: Matrix,
}

/// Effective mixing matrix of every head for the input series `noisy`.
pub fn extract_operator(model: &Model, noisy: &Matrix) -> Result<Vec<ExtractedOperator>> {
    let inputs = model.attention_inputs(noisy)?;
    let mut out = Vec::new();
    for (layer, (block, u)) in model.blocks.iter().zip(&inputs).enumerate() {
        for (head, hp) in block.attn.heads.iter().enumerate() {
            out.push(ExtractedOperator {
                layer,
                head,
                matrix: effective_operator(u, hp, model.variant())?,
            });
        }
    }
    Ok(out)
}

/// DFT magnitude of one operator row.
pub fn spectral_response(row: &[f64]) -> Result<Matrix> {
    dft_magnitude(&Matrix::row_vector(row))
}

/// Share of spectral energy in bins `0..cutoff` of a magnitude spectrum.
pub fn low_band_energy_fraction(magnitude: &Matrix, cutoff: usize) -> f64 {
    let energy: Vec<f64> = magnitude.data().iter().map(|m| m * m).collect();
    let total: f64 = energy.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    energy.iter().take(cutoff).sum::<f64>() / total
}

/// Mean low-band energy fraction over every row of `op`, with cutoff `L/48`
/// (at least one bin).
pub fn operator_low_band_fraction(op: &Matrix) -> Result<f64> {
    let cutoff = (op.cols() / 48).max(1);
    let mut total = 0.0;
    for r in 0..op.rows() {
        total += low_band_energy_fraction(&spectral_response(op.row(r))?, cutoff);
    }
    Ok(total / op.rows() as f64)
}

/// One evaluation sample per regime, drawn from the held-out stream.
pub fn regime_examples(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    Regime::ALL
        .iter()
        .map(|&r| {
            let fixed = SyntheticSpec {
                regime: Some(r),
                ..spec.clone()
            };
            eval_set(&fixed, 1).map(|mut v| v.remove(0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_with_floor, DEFAULT_FD_STEP};

    #[test]
    fn warp_examples() {
        for t in [0, 5, 95] {
            assert_eq!(warp(t, 0, 96).unwrap(), t as f64);
        }
        assert!((warp(24, 1, 96).unwrap() - 24.0).abs() < 1e-12);
        assert!((warp(96, 2, 96).unwrap() - 136.0).abs() < 1e-12);
        assert!(warp(3, 3, 96).is_err());
    }

    #[test]
    fn noiseless_generation_is_clean() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            ..SyntheticSpec::short()
        };
        for s in generate(&spec, 5).unwrap() {
            assert_eq!(s.noisy, s.clean);
            assert_eq!(s.clean, spec.clean_signal(s.regime, s.phase));
        }
        assert!(generate(&spec, 0).is_err());
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let spec = SyntheticSpec {
            length: 1000,
            ..SyntheticSpec::short()
        };
        let samples = generate(&spec, 100).unwrap();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for s in &samples {
            for v in s.noisy.sub(&s.clean).unwrap().data() {
                sum += v;
                sum_sq += v * v;
            }
        }
        let n = 1e5;
        let var = sum_sq / n - (sum / n).powi(2);
        assert!((var - 0.25).abs() < 0.005, "variance {var}");
    }

    #[test]
    fn generation_is_deterministic_and_covers_regimes() {
        let spec = SyntheticSpec::short();
        let a = generate(&spec, 30).unwrap();
        assert_eq!(a, generate(&spec, 30).unwrap());
        for r in Regime::ALL {
            assert!(a.iter().any(|s| s.regime == r));
        }
        assert!(a.iter().all(|s| (0.0..TAU).contains(&s.phase)));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let samples = generate(&SyntheticSpec::short(), 4).unwrap();
        let back = dataset_from_csv(&dataset_to_csv(&samples)).unwrap();
        assert_eq!(back, samples);
        assert!(dataset_from_csv("z,phase,x0,y0\n7,0,1,1\n").is_err());
        assert!(dataset_from_csv("z,phase,x0,y0\n0,0,1\n").is_err());
    }

    #[test]
    fn embed_and_readout_contracts() {
        for l in [1, 7, 96] {
            let pe = positional_encoding(l, 8);
            let x = Matrix::zeros(1, l);
            let h = embed(&x, &Matrix::zeros(1, 8), &pe).unwrap();
            assert_eq!(h, pe);
            assert_eq!(readout(&h, &Matrix::zeros(8, 1), 0.0).unwrap().shape(), (1, l));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::random_normal(1, 50, 1.0, &mut rng);
        let e0 = Matrix::from_fn(1, 32, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let h = embed(&x, &e0, &positional_encoding(50, 32)).unwrap();
        let y = readout(&h, &e0.transpose(), 0.0).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() <= 1e-12);
        assert!(embed(&x, &e0, &positional_encoding(49, 32)).is_err());
    }

    fn tiny_config(variant: ToaVariant) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 6,
            d_h: 3,
            d_v: 3,
            mlp_hidden: 5,
            sigma_m: 0.3,
            ..ModelConfig::new(variant)
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let spec = SyntheticSpec {
            length: 7,
            periods: vec![7.0],
            amplitudes: vec![1.0],
            ..SyntheticSpec::default()
        };
        let sample = generate(&spec, 1).unwrap().remove(0);
        for variant in ToaVariant::ALL {
            for sor_on in [false, true] {
                let mut cfg = tiny_config(variant);
                cfg.sor = SorConfig {
                    enabled: sor_on,
                    seed: 11,
                    p_max: 0.5,
                    shared_p: true,
                };
                let model = Model::init(&cfg, 7, 4).unwrap();
                let (_, grad) = model.loss_and_grad(&sample, &mut SorState::new(cfg.sor)).unwrap();
                let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
                let grads: Vec<Matrix> = grad.named_tensors().into_iter().map(|(_, m)| m.clone()).collect();
                for (idx, name) in names.iter().enumerate() {
                    let point = model.named_tensors()[idx].1.clone();
                    // Gradients below 1e-6 are compared on absolute error.
                    let report = grad_check_with_floor(
                        |p| {
                            let mut m = model.clone();
                            *m.tensors_mut()[idx] = p.clone();
                            m.loss_and_grad(&sample, &mut SorState::new(cfg.sor)).map(|(l, _)| l)
                        },
                        &point,
                        &grads[idx],
                        DEFAULT_FD_STEP,
                        1e-6,
                    )
                    .unwrap();
                    assert!(report.passes(1e-4), "{variant} sor={sor_on} {name}: {report:?}");
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let spec = SyntheticSpec {
            length: 16,
            periods: vec![8.0],
            amplitudes: vec![1.0],
            ..SyntheticSpec::default()
        };
        let cfg = tiny_config(ToaVariant::ToaRelu);
        let tc = TrainConfig {
            steps: 5,
            batch_size: 2,
            learning_rate: 0.0,
            eval_samples: 8,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &tc, &spec).unwrap();
        assert_eq!(out.model, Model::init(&cfg, 16, tc.seed).unwrap());
        assert_eq!(out.initial_eval_mse, out.final_eval_mse);
    }

    #[test]
    fn single_sample_overfit_decreases() {
        let spec = SyntheticSpec {
            length: 16,
            periods: vec![8.0],
            amplitudes: vec![1.0],
            ..SyntheticSpec::default()
        };
        let mut cfg = tiny_config(ToaVariant::ToaGated);
        cfg.d_model = 8;
        cfg.sor = SorConfig::disabled();
        let tc = TrainConfig {
            steps: 400,
            batch_size: 1,
            learning_rate: 1e-4,
            train_samples: Some(1),
            eval_samples: 1,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &tc, &spec).unwrap();
        let losses: Vec<f64> = out.curve.iter().map(|r| r.loss).collect();
        for w in losses[100..].windows(2) {
            assert!(w[1] <= w[0], "{} then {}", w[0], w[1]);
        }
        assert!(losses[399] < 0.5 * losses[0]);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let spec = SyntheticSpec {
            length: 12,
            periods: vec![6.0],
            amplitudes: vec![1.0],
            ..SyntheticSpec::default()
        };
        let cfg = tiny_config(ToaVariant::ToaGated);
        let tc = TrainConfig {
            steps: 6,
            batch_size: 3,
            eval_samples: 4,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let a = train(&cfg, &tc, &spec).unwrap();
        let b = train(&cfg, &tc, &spec).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model, b.model);
        let mut off = cfg.clone();
        off.sor = SorConfig::disabled();
        let c = train(&off, &tc, &spec).unwrap();
        assert_ne!(a.curve, c.curve);
    }

    #[test]
    fn threaded_training_matches_closely() {
        let spec = SyntheticSpec {
            length: 12,
            periods: vec![6.0],
            amplitudes: vec![1.0],
            ..SyntheticSpec::default()
        };
        let cfg = tiny_config(ToaVariant::ToaRelu);
        let tc = TrainConfig {
            steps: 4,
            batch_size: 4,
            eval_samples: 4,
            ..TrainConfig::default()
        };
        let a = train(&cfg, &tc, &spec).unwrap();
        let b = train(&cfg, &TrainConfig { threads: 2, ..tc }, &spec).unwrap();
        assert!((a.final_eval_mse - b.final_eval_mse).abs() < 1e-9);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let spec = SyntheticSpec {
            length: 8,
            periods: vec![4.0],
            amplitudes: vec![f64::INFINITY],
            ..SyntheticSpec::default()
        };
        let tc = TrainConfig {
            steps: 3,
            batch_size: 1,
            eval_samples: 1,
            ..TrainConfig::default()
        };
        match train(&tiny_config(ToaVariant::SoftmaxBaseline), &tc, &spec) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn extracted_operators_are_consistent() {
        let spec = SyntheticSpec {
            length: 10,
            periods: vec![5.0],
            amplitudes: vec![1.0],
            ..SyntheticSpec::default()
        };
        let sample = generate(&spec, 1).unwrap().remove(0);
        let mut cfg = tiny_config(ToaVariant::ToaSoftmax);
        cfg.sigma_m = 0.0;
        let model = Model::init(&cfg, 10, 1).unwrap();
        let ops = extract_operator(&model, &sample.noisy).unwrap();
        assert_eq!(ops.len(), 4);
        for op in &ops {
            assert!(crate::operators::simplex_report(&op.matrix).all_in_simplex());
        }
        let cfg = tiny_config(ToaVariant::ToaGated);
        let model = Model::init(&cfg, 10, 1).unwrap();
        let inputs = model.attention_inputs(&sample.noisy).unwrap();
        for op in extract_operator(&model, &sample.noisy).unwrap() {
            let u = &inputs[op.layer];
            let hp = &model.blocks[op.layer].attn.heads[op.head];
            let values = u.matmul_nt(&hp.w_v).unwrap();
            let (out, _) = attention::forward_head(u, hp, cfg.variant, &mut SorState::disabled()).unwrap();
            let via = op.matrix.matmul(&values).unwrap();
            assert!(via.max_abs_diff(&out).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn spectral_response_examples() {
        let uniform = vec![1.0 / 16.0; 16];
        let mag = spectral_response(&uniform).unwrap();
        assert!((mag[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(mag.data()[1..].iter().all(|v| v.abs() < 1e-12));
        assert!((low_band_energy_fraction(&mag, 1) - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let row = Matrix::random_normal(1, 15, 1.0, &mut rng);
        let full = crate::tensor::dft(row.data());
        let energy: f64 = full.iter().map(|z| z.norm_sqr()).sum::<f64>() / 15.0;
        let direct: f64 = row.data().iter().map(|v| v * v).sum();
        assert!((energy - direct).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let spec = SyntheticSpec {
            length: 9,
            periods: vec![3.0],
            amplitudes: vec![1.0],
            ..SyntheticSpec::default()
        };
        let model = Model::init(&tiny_config(ToaVariant::ToaGated), 9, 5).unwrap();
        let ck = Checkpoint::new(&model, &spec, &TrainConfig::default(), 0.5);
        let json = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap().decode_model().unwrap();
        assert_eq!(back, model);
        assert!(Checkpoint::from_json(&json[..json.len() / 2]).is_err());
        let mut bad = ck.clone();
        bad.data.length = 10;
        assert!(bad.decode_model().is_err());
        let mut bad = ck;
        bad.model.length = 8;
        assert!(matches!(bad.decode_model(), Err(Error::Parse(_))));
    }
}
