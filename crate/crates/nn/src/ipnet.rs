//! IPNet: residual conv encoder, GRU / self-attention / GRU sequence block and
//! two per-timestep linear decoders regressing accelerometer and gyroscope
//! bias from a window of raw IMU samples.

use std::path::Path;
use std::time::Instant;

use biasprior_core::dataset::WeightsContainer;
use biasprior_core::fusion::TimedBiasPrior;
use biasprior_core::{ImuBias, ImuSample};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, Optimizer, OptimizerKind, Tape, Tensor, Var};
use crate::error::{NnError, Result};

/// Input channels per sample: accel xyz then gyro xyz.
pub const INPUT_CHANNELS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpnetConfig {
    /// Window length in samples.
    pub s: usize,
    /// Predictions per window.
    pub n: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub pools: Vec<usize>,
    pub hidden: usize,
    pub heads: usize,
    /// Samples between inference windows.
    pub stride: usize,
}

impl Default for IpnetConfig {
    fn default() -> Self {
        Self {
            s: 1000,
            n: 50,
            channels: vec![16, 32, 64, 128],
            kernels: vec![7, 3, 3, 3],
            pools: vec![2, 2, 2, 2],
            hidden: 64,
            heads: 4,
            stride: 200,
        }
    }
}

impl IpnetConfig {
    /// Small configuration used for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        Self {
            s: 64,
            n: 8,
            channels: vec![4, 8, 8, 16],
            kernels: vec![7, 3, 3, 3],
            pools: vec![2, 2, 2, 1],
            hidden: 8,
            heads: 2,
            stride: 16,
        }
    }

    /// Sequence length after each encoder block.
    pub fn encoder_lengths(&self) -> Vec<usize> {
        let mut l = self.s;
        self.pools
            .iter()
            .map(|p| {
                l /= (*p).max(1);
                l
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::InvalidConfig(m));
        if self.channels.is_empty() {
            return bad("encoder needs at least one block".into());
        }
        if self.channels.len() != self.kernels.len() || self.channels.len() != self.pools.len() {
            return bad(format!(
                "channels/kernels/pools lengths differ: {}/{}/{}",
                self.channels.len(),
                self.kernels.len(),
                self.pools.len()
            ));
        }
        if self.channels.contains(&0) || self.kernels.contains(&0) || self.pools.contains(&0) {
            return bad("channel widths, kernels and pools must be positive".into());
        }
        if self.n == 0 || self.stride == 0 || self.hidden == 0 || self.heads == 0 {
            return bad("n, stride, hidden and heads must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("heads {} does not divide hidden {}", self.heads, self.hidden));
        }
        let l = *self.encoder_lengths().last().unwrap();
        if l < self.n {
            return bad(format!("encoder output length {l} is shorter than n = {}", self.n));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSchedule {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_ids: Vec<String>,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Rmsprop,
            lr: 1e-6,
            decay_every: 10,
            decay_factor: 0.1,
            epochs: 30,
            batch_size: 8,
            val_ids: Vec::new(),
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(NnError::InvalidConfig(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(NnError::InvalidConfig("batch_size and decay_every must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(NnError::InvalidConfig("decay_factor must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Per-channel input standardization from training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; INPUT_CHANNELS],
    pub std: [f64; INPUT_CHANNELS],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.0; INPUT_CHANNELS],
            std: [1.0; INPUT_CHANNELS],
        }
    }
}

impl Normalization {
    pub fn from_samples<'a>(streams: impl IntoIterator<Item = &'a [ImuSample]>) -> Self {
        let mut sum = [0.0; INPUT_CHANNELS];
        let mut sq = [0.0; INPUT_CHANNELS];
        let mut count = 0usize;
        for stream in streams {
            for s in stream {
                let row = sample_row(s);
                for c in 0..INPUT_CHANNELS {
                    sum[c] += row[c];
                    sq[c] += row[c] * row[c];
                }
                count += 1;
            }
        }
        if count == 0 {
            return Self::default();
        }
        let mut out = Self::default();
        for c in 0..INPUT_CHANNELS {
            let m = sum[c] / count as f64;
            let var = (sq[c] / count as f64 - m * m).max(0.0);
            out.mean[c] = m;
            out.std[c] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
        out
    }
}

fn sample_row(s: &ImuSample) -> [f64; INPUT_CHANNELS] {
    [s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z]
}

/// Start indices of every full window of `s` samples with the given stride.
pub fn window_starts(len: usize, s: usize, stride: usize) -> Vec<usize> {
    if len < s || s == 0 {
        return Vec::new();
    }
    (0..=len - s).step_by(stride.max(1)).collect()
}

/// Raw `s x 6` window, rows `[accel | gyro]`.
pub fn window_rows(samples: &[ImuSample]) -> Vec<f64> {
    samples.iter().flat_map(sample_row).collect()
}

enum Init {
    Uniform(f64),
    Const(f64),
}

fn layout(c: &IpnetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut v = Vec::new();
    let mut cin = INPUT_CHANNELS;
    let u = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
    for (i, (&co, &k)) in c.channels.iter().zip(&c.kernels).enumerate() {
        let p = format!("enc{i}");
        v.push((format!("{p}.conv1.weight"), vec![co, cin, k], u(cin * k)));
        v.push((format!("{p}.conv1.bias"), vec![co], u(cin * k)));
        v.push((format!("{p}.bn1.weight"), vec![co], Init::Const(1.0)));
        v.push((format!("{p}.bn1.bias"), vec![co], Init::Const(0.0)));
        v.push((format!("{p}.prelu.weight"), vec![co], Init::Const(0.25)));
        v.push((format!("{p}.conv2.weight"), vec![co, co, k], u(co * k)));
        v.push((format!("{p}.conv2.bias"), vec![co], u(co * k)));
        v.push((format!("{p}.bn2.weight"), vec![co], Init::Const(1.0)));
        v.push((format!("{p}.bn2.bias"), vec![co], Init::Const(0.0)));
        v.push((format!("{p}.skip.weight"), vec![co, cin, 1], u(cin)));
        v.push((format!("{p}.skip.bias"), vec![co], u(cin)));
        cin = co;
    }
    let h = c.hidden;
    for (name, input) in [("gru1", cin), ("gru2", h)] {
        v.push((format!("{name}.weight_ih"), vec![3 * h, input], u(h)));
        v.push((format!("{name}.weight_hh"), vec![3 * h, h], u(h)));
        v.push((format!("{name}.bias_ih"), vec![3 * h], u(h)));
        v.push((format!("{name}.bias_hh"), vec![3 * h], u(h)));
        if name == "gru1" {
            v.push(("attn.norm.weight".into(), vec![h], Init::Const(1.0)));
            v.push(("attn.norm.bias".into(), vec![h], Init::Const(0.0)));
            for m in ["q", "k", "v", "out"] {
                v.push((format!("attn.{m}.weight"), vec![h, h], u(h)));
                v.push((format!("attn.{m}.bias"), vec![h], u(h)));
            }
        }
    }
    for head in ["head_ba", "head_bw"] {
        v.push((format!("{head}.weight"), vec![3, h], u(h)));
        v.push((format!("{head}.bias"), vec![3], u(h)));
    }
    v
}

/// Parameters, batch-norm statistics, normalization and config of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: IpnetConfig,
    pub normalization: Normalization,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    /// Two entries per encoder block (bn1, bn2).
    pub bn: Vec<BnStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Decoder outputs on the tape, each `(B, n, 3)`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Encoder output `(B, C, L)`.
    pub encoded: Var,
    /// Attention weights `(B * heads, L, L)`.
    pub attention: Var,
    pub ba: Var,
    pub bw: Var,
}

struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

fn check(tape: &Tape, v: Var, layer: &str) -> Result<Var> {
    if tape.value(v).is_finite() {
        Ok(v)
    } else {
        Err(NnError::NonFinite { layer: layer.to_string() })
    }
}

impl ModelWeights {
    pub fn init(config: &IpnetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in layout(config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
                Init::Const(c) => vec![c; n],
            };
            names.push(name);
            params.push(Tensor { shape, data });
        }
        let bn = config
            .channels
            .iter()
            .flat_map(|&c| [BnStats::new(c), BnStats::new(c)])
            .collect();
        Ok(Self {
            config: config.clone(),
            normalization: Normalization::default(),
            names,
            params,
            bn,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    /// Standardized `(B, s, 6)` input from raw windows.
    pub fn input_tensor(&self, windows: &[&[f64]]) -> Result<Tensor> {
        let s = self.config.s;
        let mut data = Vec::with_capacity(windows.len() * s * INPUT_CHANNELS);
        for w in windows {
            if w.len() != s * INPUT_CHANNELS {
                return Err(NnError::shape("ipnet input", &[w.len() / INPUT_CHANNELS, INPUT_CHANNELS], &[s, INPUT_CHANNELS]));
            }
            for row in w.chunks(INPUT_CHANNELS) {
                for c in 0..INPUT_CHANNELS {
                    data.push((row[c] - self.normalization.mean[c]) / self.normalization.std[c]);
                }
            }
            if !w.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite { layer: "input".into() });
            }
        }
        Tensor::new(vec![windows.len(), s, INPUT_CHANNELS], data)
    }

    /// Records the network on `tape`. `params` are tape leaves in layout
    /// order; `bn` receives running-stat updates in train mode.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &[Var],
        bn: &mut [BnStats],
        input: Var,
        mode: Mode,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let train = mode == Mode::Train;
        let mut cur = Cursor { vars: params, next: 0 };
        let shape = tape.shape(input).to_vec();
        if shape.len() != 3 || shape[1] != cfg.s || shape[2] != INPUT_CHANNELS {
            return Err(NnError::shape("ipnet input", &shape, &[cfg.s, INPUT_CHANNELS]));
        }
        let b = shape[0];
        let mut x = tape.permute(input, &[0, 2, 1])?;
        for i in 0..cfg.channels.len() {
            let (w1, b1, g1, be1, a, w2, b2, g2, be2, ws, bs) = (
                cur.take(),
                cur.take(),
                cur.take(),
                cur.take(),
                cur.take(),
                cur.take(),
                cur.take(),
                cur.take(),
                cur.take(),
                cur.take(),
                cur.take(),
            );
            let y = tape.conv1d(x, w1, Some(b1))?;
            let y = tape.batchnorm1d(y, g1, be1, &mut bn[2 * i], train)?;
            let y = tape.prelu(y, a)?;
            let y = tape.conv1d(y, w2, Some(b2))?;
            let y = tape.batchnorm1d(y, g2, be2, &mut bn[2 * i + 1], train)?;
            let skip = tape.conv1d(x, ws, Some(bs))?;
            let y = tape.add(y, skip)?;
            x = tape.maxpool1d(y, cfg.pools[i])?;
            check(tape, x, &format!("enc{i}"))?;
        }
        let encoded = x;
        let seq = tape.permute(x, &[0, 2, 1])?;
        let h1 = self.gru(tape, &mut cur, seq, b)?;
        check(tape, h1, "gru1")?;
        let (att, attention) = self.attention(tape, &mut cur, h1)?;
        check(tape, att, "attn")?;
        let h2 = self.gru(tape, &mut cur, att, b)?;
        check(tape, h2, "gru2")?;
        let l = tape.shape(h2)[1];
        let tail = tape.narrow(h2, 1, l - cfg.n, cfg.n)?;
        let (wa, ba) = (cur.take(), cur.take());
        let (wg, bg) = (cur.take(), cur.take());
        let out_a = tape.linear(tail, wa, Some(ba))?;
        check(tape, out_a, "head_ba")?;
        let out_g = tape.linear(tail, wg, Some(bg))?;
        check(tape, out_g, "head_bw")?;
        debug_assert_eq!(cur.next, params.len());
        Ok(ForwardVars {
            encoded,
            attention,
            ba: out_a,
            bw: out_g,
        })
    }

    /// GRU over `(B, L, in)` with zero initial state; returns `(B, L, H)`.
    fn gru(&self, tape: &mut Tape, cur: &mut Cursor, x: Var, b: usize) -> Result<Var> {
        let h = self.config.hidden;
        let (w_ih, w_hh, b_ih, b_hh) = (cur.take(), cur.take(), cur.take(), cur.take());
        let l = tape.shape(x)[1];
        let xp = tape.linear(x, w_ih, Some(b_ih))?;
        let mut state = tape.constant(Tensor::zeros(&[b, h]));
        let mut outs = Vec::with_capacity(l);
        for t in 0..l {
            let xt = tape.narrow(xp, 1, t, 1)?;
            let xt = tape.reshape(xt, &[b, 3 * h])?;
            let hp = tape.linear(state, w_hh, Some(b_hh))?;
            let xr = tape.narrow(xt, 1, 0, h)?;
            let xz = tape.narrow(xt, 1, h, h)?;
            let xn = tape.narrow(xt, 1, 2 * h, h)?;
            let hr = tape.narrow(hp, 1, 0, h)?;
            let hz = tape.narrow(hp, 1, h, h)?;
            let hn = tape.narrow(hp, 1, 2 * h, h)?;
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z);
            let rn = tape.mul(r, hn)?;
            let nn = tape.add(xn, rn)?;
            let nn = tape.tanh(nn);
            let d = tape.sub(state, nn)?;
            let zd = tape.mul(z, d)?;
            state = tape.add(nn, zd)?;
            outs.push(tape.reshape(state, &[b, 1, h])?);
        }
        tape.concat(&outs, 1)
    }

    /// Pre-norm multi-head self-attention with residual add over `(B, L, H)`.
    fn attention(&self, tape: &mut Tape, cur: &mut Cursor, x: Var) -> Result<(Var, Var)> {
        let (h, heads) = (self.config.hidden, self.config.heads);
        let dh = h / heads;
        let s = tape.shape(x).to_vec();
        let (b, l) = (s[0], s[1]);
        let (gn, bnb) = (cur.take(), cur.take());
        let u = tape.layer_norm(x, gn, bnb)?;
        let mut proj = |tape: &mut Tape| -> Result<Var> {
            let (w, bias) = (cur.take(), cur.take());
            let p = tape.linear(u, w, Some(bias))?;
            let p = tape.reshape(p, &[b, l, heads, dh])?;
            let p = tape.permute(p, &[0, 2, 1, 3])?;
            tape.reshape(p, &[b * heads, l, dh])
        };
        let q = proj(tape)?;
        let k = proj(tape)?;
        let v = proj(tape)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores)?;
        let ctx = tape.bmm(attn, v, false)?;
        let ctx = tape.reshape(ctx, &[b, heads, l, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, l, h])?;
        let (wo, bo) = (cur.take(), cur.take());
        let o = tape.linear(ctx, wo, Some(bo))?;
        Ok((tape.add(x, o)?, attn))
    }

    /// Tape with the parameters registered as leaves and the network recorded.
    pub fn record(&self, windows: &[&[f64]], mode: Mode, bn: &mut [BnStats]) -> Result<(Tape, Vec<Var>, ForwardVars)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let input = self.input_tensor(windows)?;
        let input = tape.constant(input);
        let out = self.forward_on_tape(&mut tape, &vars, bn, input, mode)?;
        Ok((tape, vars, out))
    }

    /// Per-window decoder outputs `(ba_seq, bw_seq)`, each `n` rows.
    pub fn forward(&self, window: &[f64], mode: Mode) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
        let mut bn = self.bn.clone();
        let (tape, _, out) = self.record(&[window], mode, &mut bn)?;
        let rows = |v: Var| {
            tape.value(v)
                .data
                .chunks(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect::<Vec<_>>()
        };
        Ok((rows(out.ba), rows(out.bw)))
    }

    /// Eval-mode bias per window: the mean of the decoder rows.
    pub fn predict_batch(&self, windows: &[&[f64]]) -> Result<Vec<ImuBias>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let mut bn = self.bn.clone();
        let (tape, _, out) = self.record(windows, Mode::Eval, &mut bn)?;
        let n = self.config.n;
        let (a, g) = (&tape.value(out.ba).data, &tape.value(out.bw).data);
        Ok((0..windows.len())
            .map(|w| {
                let block = |d: &[f64]| mean_rows(&d[w * n * 3..(w + 1) * n * 3]);
                ImuBias::new(block(a), block(g))
            })
            .collect())
    }

    pub fn predict(&self, window: &[f64]) -> Result<ImuBias> {
        Ok(self.predict_batch(&[window])?.remove(0))
    }

    pub fn to_container(&self) -> Result<WeightsContainer> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, t)| (n.clone(), t.shape.clone(), t.data.clone()))
            .collect();
        for (i, stats) in self.bn.iter().enumerate() {
            let name = format!("enc{}.bn{}", i / 2, i % 2 + 1);
            let c = stats.running_mean.len();
            tensors.push((format!("{name}.running_mean"), vec![c], stats.running_mean.clone()));
            tensors.push((format!("{name}.running_var"), vec![c], stats.running_var.clone()));
        }
        Ok(WeightsContainer {
            config: serde_json::to_value(&self.config).expect("serializable config"),
            normalization: serde_json::to_value(self.normalization).expect("serializable stats"),
            tensors,
        })
    }

    pub fn from_container(c: WeightsContainer) -> Result<Self> {
        let config: IpnetConfig =
            serde_json::from_value(c.config).map_err(|e| NnError::Weights(format!("config: {e}")))?;
        let normalization: Normalization =
            serde_json::from_value(c.normalization).map_err(|e| NnError::Weights(format!("normalization: {e}")))?;
        let mut model = Self::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.normalization = normalization;
        let expected = model.params.len() + 2 * model.bn.len();
        if c.tensors.len() != expected {
            return Err(NnError::Weights(format!("expected {expected} tensors, found {}", c.tensors.len())));
        }
        let mut it = c.tensors.into_iter();
        for (name, param) in model.names.iter().zip(model.params.iter_mut()) {
            let (n, shape, data) = it.next().unwrap();
            if &n != name || shape != param.shape {
                return Err(NnError::Weights(format!(
                    "tensor '{n}' {shape:?} does not match expected '{name}' {:?}",
                    param.shape
                )));
            }
            param.data = data;
        }
        for stats in model.bn.iter_mut() {
            for slot in [&mut stats.running_mean, &mut stats.running_var] {
                let (n, shape, data) = it.next().unwrap();
                if shape != [slot.len()] {
                    return Err(NnError::Weights(format!("tensor '{n}' has shape {shape:?}")));
                }
                *slot = data;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container()?.save(path)?)
    }

    /// Loads weights and rejects a file whose config differs from `expected`.
    pub fn load(path: &Path, expected: &IpnetConfig) -> Result<Self> {
        let model = Self::load_unchecked(path)?;
        if &model.config != expected {
            return Err(NnError::Weights(format!(
                "{}: config in file {:?} differs from requested {:?}",
                path.display(),
                model.config,
                expected
            )));
        }
        Ok(model)
    }

    /// Loads weights using the config recorded in the file.
    pub fn load_unchecked(path: &Path) -> Result<Self> {
        Self::from_container(WeightsContainer::load(path)?)
    }
}

/// Bias from decoder rows: the mean of each head's rows.
pub fn bias_from_rows(ba_seq: &[Vector3<f64>], bw_seq: &[Vector3<f64>]) -> ImuBias {
    let mean = |rows: &[Vector3<f64>]| rows.iter().sum::<Vector3<f64>>() / rows.len().max(1) as f64;
    ImuBias::new(mean(ba_seq), mean(bw_seq))
}

fn mean_rows(d: &[f64]) -> Vector3<f64> {
    let rows = d.len() / 3;
    let mut s = Vector3::zeros();
    for r in d.chunks(3) {
        s += Vector3::new(r[0], r[1], r[2]);
    }
    s / rows as f64
}

/// `mean|ba_seq - label.ba| + mean|bw_seq - label.bw|`.
pub fn loss(ba_seq: &[Vector3<f64>], bw_seq: &[Vector3<f64>], label: &ImuBias) -> f64 {
    let term = |rows: &[Vector3<f64>], l: &Vector3<f64>| {
        rows.iter().map(|r| (r - l).abs().sum()).sum::<f64>() / (3 * rows.len().max(1)) as f64
    };
    term(ba_seq, &label.ba) + term(bw_seq, &label.bw)
}

/// Records the training loss for a batch whose labels are broadcast over
/// the `n` rows of each window.
pub fn loss_on_tape(tape: &mut Tape, out: ForwardVars, labels: &[ImuBias], n: usize) -> Result<Var> {
    let target = |f: fn(&ImuBias) -> Vector3<f64>| {
        let data = labels
            .iter()
            .flat_map(|l| {
                let v = f(l);
                std::iter::repeat_n([v.x, v.y, v.z], n).flatten()
            })
            .collect();
        Tensor::new(vec![labels.len(), n, 3], data)
    };
    let ta = tape.constant(target(|l| l.ba)?);
    let tg = tape.constant(target(|l| l.bw)?);
    let la = tape.l1_loss(out.ba, ta)?;
    let lg = tape.l1_loss(out.bw, tg)?;
    tape.add(la, lg)
}

/// IMU stream with its per-sequence label.
#[derive(Debug, Clone)]
pub struct LabeledSequence {
    pub id: String,
    pub samples: Vec<ImuSample>,
    pub label: ImuBias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Weights with the lowest validation loss.
    pub model: ModelWeights,
    pub log: Vec<EpochLog>,
    /// Log epoch of the returned weights; `None` when the initialization was best.
    pub best_epoch: Option<usize>,
    /// Validation loss of the initialized model.
    pub initial_val_loss: f64,
}

struct WindowSet {
    rows: Vec<Vec<f64>>,
    labels: Vec<ImuBias>,
}

fn cut_windows<'a>(seqs: impl Iterator<Item = &'a LabeledSequence>, cfg: &IpnetConfig) -> WindowSet {
    let mut set = WindowSet {
        rows: Vec::new(),
        labels: Vec::new(),
    };
    for seq in seqs {
        for start in window_starts(seq.samples.len(), cfg.s, cfg.stride) {
            set.rows.push(window_rows(&seq.samples[start..start + cfg.s]));
            set.labels.push(seq.label);
        }
    }
    set
}

/// Mean loss over a window set in eval mode.
pub fn mean_loss(model: &ModelWeights, windows: &[&[f64]], labels: &[ImuBias], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for (chunk, lab) in windows.chunks(batch.max(1)).zip(labels.chunks(batch.max(1))) {
        let mut bn = model.bn.clone();
        let (mut tape, _, out) = model.record(chunk, Mode::Eval, &mut bn)?;
        let l = loss_on_tape(&mut tape, out, lab, model.config.n)?;
        total += tape.value(l).data[0] * chunk.len() as f64;
    }
    Ok(total / windows.len().max(1) as f64)
}

/// Trains from a seeded initialization and returns the best-validation
/// weights together with the per-epoch loss log.
pub fn train(
    sequences: &[LabeledSequence],
    config: &IpnetConfig,
    schedule: &TrainingSchedule,
    seed: u64,
) -> Result<TrainOutput> {
    config.validate()?;
    schedule.validate()?;
    let is_val = |s: &LabeledSequence| schedule.val_ids.iter().any(|v| v == &s.id);
    let train_seqs: Vec<&LabeledSequence> = sequences.iter().filter(|s| !is_val(s)).collect();
    let val_seqs: Vec<&LabeledSequence> = sequences.iter().filter(|s| is_val(s)).collect();
    if train_seqs.is_empty() || val_seqs.is_empty() {
        return Err(NnError::EmptyDataset(format!(
            "need at least one training and one validation sequence (got {} and {})",
            train_seqs.len(),
            val_seqs.len()
        )));
    }
    for s in sequences {
        if !s.label.is_finite() {
            return Err(NnError::InvalidConfig(format!("label of '{}' is not finite", s.id)));
        }
    }
    let train_set = cut_windows(train_seqs.iter().copied(), config);
    let val_set = cut_windows(val_seqs.iter().copied(), config);
    if train_set.rows.is_empty() || val_set.rows.is_empty() {
        return Err(NnError::EmptyDataset(format!(
            "no full {}-sample window in the training or validation split",
            config.s
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelWeights::init(config, &mut rng)?;
    model.normalization = Normalization::from_samples(train_seqs.iter().map(|s| s.samples.as_slice()));
    let mut opt = Optimizer::new(schedule.optimizer, &model.params);
    let val_rows: Vec<&[f64]> = val_set.rows.iter().map(Vec::as_slice).collect();
    let initial_val_loss = mean_loss(&model, &val_rows, &val_set.labels, schedule.batch_size)?;
    let mut best = (initial_val_loss, model.clone(), None);
    let mut log = Vec::with_capacity(schedule.epochs);
    let mut order: Vec<usize> = (0..train_set.rows.len()).collect();
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for (bi, batch) in order.chunks(schedule.batch_size).enumerate() {
            let rows: Vec<&[f64]> = batch.iter().map(|&i| train_set.rows[i].as_slice()).collect();
            let labels: Vec<ImuBias> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let mut bn = model.bn.clone();
            let (mut tape, vars, out) = model.record(&rows, Mode::Train, &mut bn).map_err(|e| match e {
                NnError::NonFinite { layer } => NnError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!("non-finite activation in {layer}"),
                },
                e => e,
            })?;
            let l = loss_on_tape(&mut tape, out, &labels, config.n)?;
            let lv = tape.value(l).data[0];
            if !lv.is_finite() {
                return Err(NnError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!("loss = {lv}"),
                });
            }
            let grads = tape.backward(l)?;
            let g: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
            if let Some(i) = g.iter().position(|t| !t.is_finite()) {
                return Err(NnError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!("non-finite gradient for {}", model.names[i]),
                });
            }
            opt.step(&mut model.params, &g, lr)?;
            model.bn = bn;
            train_total += lv * batch.len() as f64;
        }
        let train_loss = train_total / order.len() as f64;
        let val_loss = mean_loss(&model, &val_rows, &val_set.labels, schedule.batch_size)?;
        if !val_loss.is_finite() {
            return Err(NnError::NonFiniteLoss {
                epoch,
                batch: 0,
                detail: format!("validation loss = {val_loss}"),
            });
        }
        if val_loss < best.0 {
            best = (val_loss, model.clone(), Some(epoch));
        }
        log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
    }
    Ok(TrainOutput {
        model: best.1,
        log,
        best_epoch: best.2,
        initial_val_loss,
    })
}

/// Windowed bias priors over a stream: a warm-up entry carrying `initial` at
/// the first sample, then one prediction per stride stamped at the window's
/// final sample.
pub fn sliding_inference(samples: &[ImuSample], model: &ModelWeights, initial: ImuBias) -> Result<Vec<TimedBiasPrior>> {
    let cfg = &model.config;
    let mut out = Vec::new();
    if let Some(first) = samples.first() {
        out.push(TimedBiasPrior {
            t: first.t,
            bias: initial,
            warmup: true,
        });
    }
    let starts = window_starts(samples.len(), cfg.s, cfg.stride);
    for chunk in starts.chunks(16) {
        let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| window_rows(&samples[i..i + cfg.s])).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        for (&start, bias) in chunk.iter().zip(model.predict_batch(&refs)?) {
            out.push(TimedBiasPrior {
                t: samples[start + cfg.s - 1].t,
                bias,
                warmup: false,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub windows: usize,
    pub windows_per_sec: f64,
    pub latency_ms_p50: f64,
    pub latency_ms_p90: f64,
    pub latency_ms_p99: f64,
}

/// Times single-window eval-mode inference over every window of `samples`.
pub fn bench_inference(samples: &[ImuSample], model: &ModelWeights, max_windows: usize) -> Result<BenchReport> {
    let cfg = &model.config;
    let starts: Vec<usize> = window_starts(samples.len(), cfg.s, cfg.stride)
        .into_iter()
        .take(max_windows.max(1))
        .collect();
    if starts.is_empty() {
        return Err(NnError::EmptyDataset(format!("stream shorter than one {}-sample window", cfg.s)));
    }
    let mut lat = Vec::with_capacity(starts.len());
    let t0 = Instant::now();
    for &i in &starts {
        let row = window_rows(&samples[i..i + cfg.s]);
        let t = Instant::now();
        model.predict(&row)?;
        lat.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let total = t0.elapsed().as_secs_f64();
    lat.sort_by(f64::total_cmp);
    let pct = |p: f64| lat[((p * (lat.len() - 1) as f64).round() as usize).min(lat.len() - 1)];
    Ok(BenchReport {
        windows: lat.len(),
        windows_per_sec: lat.len() as f64 / total.max(1e-12),
        latency_ms_p50: pct(0.5),
        latency_ms_p90: pct(0.9),
        latency_ms_p99: pct(0.99),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_chain() {
        let c = IpnetConfig::default();
        assert_eq!(c.encoder_lengths(), vec![500, 250, 125, 62]);
        c.validate().unwrap();
        IpnetConfig::tiny().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = IpnetConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = IpnetConfig::default();
        c.n = 63;
        assert!(c.validate().is_err());
        let mut c = IpnetConfig::tiny();
        c.pools = vec![2, 2, 2, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn lr_decays_at_epoch_boundaries() {
        let s = TrainingSchedule::default();
        assert_eq!(s.lr_at(0), 1e-6);
        assert_eq!(s.lr_at(9), 1e-6);
        assert!((s.lr_at(10) - 1e-7).abs() < 1e-22);
        assert!((s.lr_at(25) - 1e-8).abs() < 1e-23);
    }

    #[test]
    fn loss_examples() {
        let label = ImuBias::new(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.01, 0.02, -0.03));
        let ba = vec![label.ba; 4];
        let bw = vec![label.bw; 4];
        assert_eq!(loss(&ba, &bw, &label), 0.0);
        let shifted: Vec<_> = ba.iter().map(|v| v.add_scalar(0.1)).collect();
        assert!((loss(&shifted, &bw, &label) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn window_counting() {
        assert_eq!(window_starts(1000, 1000, 200).len(), 1);
        assert_eq!(window_starts(1400, 1000, 200).len(), 3);
        assert_eq!(window_starts(999, 1000, 200).len(), 0);
    }
}
