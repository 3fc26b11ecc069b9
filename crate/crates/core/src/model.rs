//! Time-conditioned residual network with hand-rolled reverse-mode gradients.
//!
//! The network is a plain MLP with tanh hidden layers. Time enters through
//! sinusoidal features (sin/cos at geometrically spaced frequencies)
//! concatenated to the flattened input. The final layer is zero-initialized
//! so the residual prediction starts at zero, i.e. the model begins as the
//! identity denoiser. tanh keeps finite-difference gradient checks clean.
//!
//! Checkpoints use the "SDM1" format: magic, version, config hash,
//! architecture header, then the flat parameter vector as little-endian f64.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Data dimension n (inputs are flattened).
    pub input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Number of sinusoidal frequencies; each contributes a sin and a cos.
    pub time_frequencies: usize,
    pub freq_min: f64,
    pub freq_max: f64,
}

impl ModelConfig {
    pub fn with_dim(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_width: 128,
            hidden_layers: 3,
            time_frequencies: 16,
            freq_min: 1.0,
            freq_max: 1000.0,
        }
    }

    pub fn embed_dim(&self) -> usize {
        2 * self.time_frequencies
    }

    /// `(in, out)` per affine layer.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut prev = self.input_dim + self.embed_dim();
        for _ in 0..self.hidden_layers {
            dims.push((prev, self.hidden_width));
            prev = self.hidden_width;
        }
        dims.push((prev, self.input_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Cached activations of one forward pass (inputs to each layer).
#[derive(Debug, Clone)]
pub struct Tape {
    activations: Vec<Vec<f64>>,
}

/// The residual predictor phi(x_t | t).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    cfg: ModelConfig,
    params: Vec<f64>,
}

impl ScoreModel {
    /// Glorot-normal hidden layers, zero final layer.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Self {
        let mut params = vec![0.0; cfg.param_count()];
        let dims = cfg.layer_dims();
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let last = l + 1 == dims.len();
            if !last {
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                for w in &mut params[offset..offset + fan_in * fan_out] {
                    let z: f64 = rng.sample(StandardNormal);
                    *w = std * z;
                }
            }
            offset += fan_in * fan_out + fan_out;
        }
        ScoreModel { cfg, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn embed_time(&self, t: f64) -> Vec<f64> {
        let k = self.cfg.time_frequencies;
        let mut out = Vec::with_capacity(2 * k);
        for i in 0..k {
            let frac = if k > 1 { i as f64 / (k - 1) as f64 } else { 0.0 };
            let freq = self.cfg.freq_min * (self.cfg.freq_max / self.cfg.freq_min).powf(frac);
            out.push((freq * t).sin());
            out.push((freq * t).cos());
        }
        out
    }

    /// Forward pass without gradient bookkeeping.
    pub fn forward(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok(self.run(x, t)?.1)
    }

    /// Forward pass that records the activations needed by [`backward`](Self::backward).
    pub fn forward_with_tape(&self, x: &Tensor, t: f64) -> Result<(Tensor, Tape)> {
        let (tape, out) = self.run(x, t)?;
        Ok((out, tape))
    }

    fn run(&self, x: &Tensor, t: f64) -> Result<(Tape, Tensor)> {
        if x.len() != self.cfg.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.input_dim,
                actual: x.len(),
            });
        }
        let mut a: Vec<f64> = x.data().iter().copied().chain(self.embed_time(t)).collect();
        let dims = self.cfg.layer_dims();
        let mut activations = Vec::with_capacity(dims.len());
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut z = b.to_vec();
            for (i, zi) in z.iter_mut().enumerate() {
                let row = &w[i * fan_in..(i + 1) * fan_in];
                *zi += row.iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>();
            }
            let last = l + 1 == dims.len();
            if !last {
                for zi in &mut z {
                    *zi = zi.tanh();
                }
            }
            activations.push(std::mem::replace(&mut a, z));
        }
        let tape = Tape { activations };
        Ok((tape, Tensor::new(vec![self.cfg.input_dim], a)?))
    }

    /// Reverse-mode gradient of `upstream . output` with respect to the
    /// parameters, accumulated into `grads`.
    pub fn backward(&self, tape: &Tape, upstream: &[f64], grads: &mut [f64]) -> Result<()> {
        if upstream.len() != self.cfg.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.input_dim,
                actual: upstream.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: grads.len(),
            });
        }
        let dims = self.cfg.layer_dims();
        let offsets: Vec<usize> = dims
            .iter()
            .scan(0usize, |acc, &(i, o)| {
                let here = *acc;
                *acc += i * o + o;
                Some(here)
            })
            .collect();
        let mut g = upstream.to_vec();
        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let a_in = &tape.activations[l];
            debug_assert_eq!(a_in.len(), fan_in);
            let w_off = offsets[l];
            let b_off = w_off + fan_in * fan_out;
            for i in 0..fan_out {
                let gi = g[i];
                if gi != 0.0 {
                    let row = &mut grads[w_off + i * fan_in..w_off + (i + 1) * fan_in];
                    for (gw, ai) in row.iter_mut().zip(a_in) {
                        *gw += gi * ai;
                    }
                }
                grads[b_off + i] += gi;
            }
            if l > 0 {
                let w = &self.params[w_off..w_off + fan_in * fan_out];
                let mut g_prev = vec![0.0; fan_in];
                for i in 0..fan_out {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let row = &w[i * fan_in..(i + 1) * fan_in];
                    for (gp, wi) in g_prev.iter_mut().zip(row) {
                        *gp += gi * wi;
                    }
                }
                // a_in is the post-tanh activation of layer l-1.
                for (gp, ai) in g_prev.iter_mut().zip(a_in) {
                    *gp *= 1.0 - ai * ai;
                }
                g = g_prev;
            }
        }
        Ok(())
    }

    /// Write an SDM1 checkpoint.
    pub fn save_to<W: Write>(&self, w: &mut W, config_hash: u64) -> Result<()> {
        w.write_all(b"SDM1")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&config_hash.to_le_bytes())?;
        for v in [
            self.cfg.input_dim,
            self.cfg.hidden_width,
            self.cfg.hidden_layers,
            self.cfg.time_frequencies,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.cfg.freq_min.to_le_bytes())?;
        w.write_all(&self.cfg.freq_max.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read an SDM1 checkpoint; returns the model and the recorded config hash.
    pub fn load_from<R: Read>(r: &mut R) -> Result<(Self, u64)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SDM1" {
            return Err(Error::MalformedFile {
                what: "checkpoint",
                reason: format!("bad magic {magic:?}, expected \"SDM1\""),
            });
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != 1 {
            return Err(Error::MalformedFile {
                what: "checkpoint",
                reason: format!("unsupported version {version}"),
            });
        }
        r.read_exact(&mut b8)?;
        let config_hash = u64::from_le_bytes(b8);
        let mut dims = [0usize; 4];
        for d in &mut dims {
            r.read_exact(&mut b4)?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        r.read_exact(&mut b8)?;
        let freq_min = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let freq_max = f64::from_le_bytes(b8);
        let cfg = ModelConfig {
            input_dim: dims[0],
            hidden_width: dims[1],
            hidden_layers: dims[2],
            time_frequencies: dims[3],
            freq_min,
            freq_max,
        };
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        if count != cfg.param_count() {
            return Err(Error::CheckpointMismatch {
                reason: format!(
                    "parameter payload has {count} entries but the architecture needs {}",
                    cfg.param_count()
                ),
            });
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            params.push(f64::from_le_bytes(b8));
        }
        Ok((ScoreModel { cfg, params }, config_hash))
    }

    pub fn save(&self, path: &std::path::Path, config_hash: u64) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save_to(&mut f, config_hash)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, u64)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load_from(&mut f)
    }
}

/// Stateful forward/backward pair; backward without a prior forward is an error.
#[derive(Debug, Default)]
pub struct BackpropSession {
    tape: Option<Tape>,
}

impl BackpropSession {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, model: &ScoreModel, x: &Tensor, t: f64) -> Result<Tensor> {
        let (out, tape) = model.forward_with_tape(x, t)?;
        self.tape = Some(tape);
        Ok(out)
    }

    /// Accumulate the gradient of `upstream . output` into `grads`, consuming
    /// the recorded pass.
    pub fn backward(
        &mut self,
        model: &ScoreModel,
        upstream: &[f64],
        grads: &mut [f64],
    ) -> Result<()> {
        let tape = self.tape.take().ok_or(Error::NoForwardPass)?;
        model.backward(&tape, upstream, grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(param_count: usize) -> Self {
        OptimizerState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction and optional global-norm clipping,
/// on a raw parameter vector.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    let norm: f64 = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    let clip_scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - cfg.beta1.powf(t);
    let bias2 = 1.0 - cfg.beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i] * clip_scale;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam step applied to a model's parameters.
pub fn optimizer_step(
    model: &mut ScoreModel,
    grads: &[f64],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    adam_update(&mut model.params, grads, state, cfg)
}
