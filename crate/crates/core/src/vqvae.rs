//! Discrete motion latents: MLP encoder/decoder over fixed windows of clip
//! features, a learned codebook, and straight-through training.
//!
//! A window of `w` frames is flattened and encoded into `w / l` latent vectors
//! of width `d_c`. Each latent snaps to its nearest code; the decoder sees the
//! snapped codes and reconstructs the normalized window. Losses:
//!
//! ```text
//! L_re     = mean smooth_l1(D(ẑ) − x)
//! L_embed  = mean ‖z − sg(ẑ)‖      (moves the encoder)
//! L_commit = mean ‖sg(z) − ẑ‖      (moves the codes)
//! L_total  = L_re + L_embed + β·L_commit
//! ```
//!
//! With `squared_latent_losses` the two latent terms use ‖·‖² instead.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, Container};
use crate::motion::MotionClip;
use crate::nn::{adam_step, clip_global_norm, Activation, AdamConfig, AdamState, Mlp, NnError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VqError {
    #[error("window must have {expected} frames of width {width}, got {got}")]
    Window { expected: usize, width: usize, got: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqVaeConfig {
    pub codes: usize,
    pub code_dim: usize,
    pub window: usize,
    pub downsample: usize,
    pub hidden: usize,
    pub beta: f64,
    pub squared_latent_losses: bool,
    pub smooth_l1_delta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub eval_every: usize,
    /// Seed the codebook with encoder outputs of random training latents.
    pub init_codes_from_data: bool,
    pub seed: u64,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        Self {
            codes: 64,
            code_dim: 32,
            window: 16,
            downsample: 4,
            hidden: 256,
            beta: 0.25,
            squared_latent_losses: false,
            smooth_l1_delta: 1.0,
            steps: 20_000,
            batch_size: 32,
            lr: 1e-3,
            grad_clip: 1.0,
            eval_every: 1000,
            init_codes_from_data: true,
            seed: 0,
        }
    }
}

impl VqVaeConfig {
    pub fn validate(&self) -> Result<(), VqError> {
        let bad = |m: &str| Err(VqError::Config(m.to_string()));
        if self.codes < 1 {
            return bad("need at least one code");
        }
        if self.code_dim == 0 || self.hidden == 0 {
            return bad("code_dim and hidden must be positive");
        }
        if self.downsample == 0 || self.window == 0 || !self.window.is_multiple_of(self.downsample) {
            return bad("window must be a positive multiple of downsample");
        }
        if self.beta < 0.0 || self.smooth_l1_delta <= 0.0 || self.lr <= 0.0 {
            return bad("beta ≥ 0, smooth_l1_delta > 0 and lr > 0 required");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        Ok(())
    }
}

/// `K × d_c` code matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub codes: Tensor,
}

impl Codebook {
    pub fn new(codes: Tensor) -> Self {
        Self { codes }
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn code(&self, k: usize) -> &[f64] {
        self.codes.row(k)
    }
}

/// Nearest code by Euclidean distance, lowest index on ties. Returns the index
/// and the distance.
pub fn quantize(codebook: &Codebook, z: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..codebook.len() {
        let d2: f64 = codebook.code(k).iter().zip(z).map(|(c, x)| (x - c) * (x - c)).sum();
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    (best.0, best.1.sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub re: f64,
    pub embed: f64,
    pub commit: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqVaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebook: Codebook,
    pub config: VqVaeConfig,
    /// Per-frame feature width.
    pub frame_dim: usize,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

/// Windows of `clip` with stride `stride`, each frame's root x taken relative
/// to the window's first frame.
pub fn clip_windows(clip: &MotionClip, window: usize, stride: usize) -> Vec<Vec<Vec<f64>>> {
    let feats = clip.features();
    if feats.len() < window || window == 0 {
        return Vec::new();
    }
    (0..=feats.len() - window)
        .step_by(stride.max(1))
        .map(|s| {
            let x0 = feats[s][0];
            feats[s..s + window]
                .iter()
                .map(|f| {
                    let mut f = f.clone();
                    f[0] -= x0;
                    f
                })
                .collect()
        })
        .collect()
}

impl VqVaeModel {
    pub fn new(frame_dim: usize, config: VqVaeConfig) -> Result<Self, VqError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n_in = config.window * frame_dim;
        let n_lat = config.code_dim * config.latents();
        let encoder = Mlp::new(&[n_in, config.hidden, n_lat], Activation::Relu, &mut rng);
        let decoder = Mlp::new(&[n_lat, config.hidden, n_in], Activation::Relu, &mut rng);
        let codes: Vec<f64> =
            (0..config.codes * config.code_dim).map(|_| rng.random_range(-1.0..1.0) / config.codes as f64).collect();
        let codebook = Codebook::new(Tensor::matrix(config.codes, config.code_dim, codes)?);
        Ok(Self {
            encoder,
            decoder,
            codebook,
            config,
            frame_dim,
            feature_mean: vec![0.0; frame_dim],
            feature_std: vec![1.0; frame_dim],
        })
    }

    pub fn latents(&self) -> usize {
        self.config.latents()
    }

    fn check_window(&self, window: &[Vec<f64>]) -> Result<(), VqError> {
        let err = || VqError::Window { expected: self.config.window, width: self.frame_dim, got: window.len() };
        if window.len() != self.config.window || window.iter().any(|f| f.len() != self.frame_dim) {
            return Err(err());
        }
        Ok(())
    }

    /// Flattened, normalized window.
    pub fn normalize(&self, window: &[Vec<f64>]) -> Vec<f64> {
        window
            .iter()
            .flat_map(|f| f.iter().enumerate().map(|(i, v)| (v - self.feature_mean[i]) / self.feature_std[i]))
            .collect()
    }

    fn denormalize(&self, flat: &[f64]) -> Vec<Vec<f64>> {
        flat.chunks(self.frame_dim)
            .map(|f| f.iter().enumerate().map(|(i, v)| v * self.feature_std[i] + self.feature_mean[i]).collect())
            .collect()
    }

    /// Continuous latents `Z`, one row per sub-window.
    pub fn encode(&self, window: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, VqError> {
        self.check_window(window)?;
        let z = self.encoder.forward(&Tensor::vector(self.normalize(window)))?;
        Ok(z.data().chunks(self.config.code_dim).map(<[f64]>::to_vec).collect())
    }

    /// Code indices per sub-window and the reconstruction in raw feature units.
    pub fn encode_decode(&self, window: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<Vec<f64>>), VqError> {
        let z = self.encode(window)?;
        let idx: Vec<usize> = z.iter().map(|zi| quantize(&self.codebook, zi).0).collect();
        let dec_in: Vec<f64> = idx.iter().flat_map(|&k| self.codebook.code(k).iter().copied()).collect();
        let out = self.decoder.forward(&Tensor::vector(dec_in))?;
        Ok((idx, self.denormalize(out.data())))
    }

    /// Loss terms for a batch of windows, evaluated in normalized feature space.
    pub fn loss(&self, windows: &[Vec<Vec<f64>>]) -> Result<LossTerms, VqError> {
        let mut tape = Tape::new();
        Ok(self.record_loss(&mut tape, windows)?.2)
    }

    /// Records the training objective. Returns the parameter handles
    /// `[encoder…, decoder…, codebook]` and the scalar loss vars
    /// `[re, embed, commit, total]`.
    pub fn record(&self, tape: &mut Tape, windows: &[Vec<Vec<f64>>]) -> Result<(Vec<Var>, [Var; 4]), VqError> {
        for w in windows {
            self.check_window(w)?;
        }
        if windows.is_empty() {
            return Err(VqError::Config("empty batch".into()));
        }
        let b = windows.len();
        let n = self.latents();
        let dc = self.config.code_dim;
        let flat: Vec<f64> = windows.iter().flat_map(|w| self.normalize(w)).collect();
        let x = tape.leaf(Tensor::matrix(b, self.config.window * self.frame_dim, flat)?);

        let enc = self.encoder.bind(tape);
        let dec = self.decoder.bind(tape);
        let codes = tape.leaf(self.codebook.codes.clone());

        let z_flat = self.encoder.forward_tape(tape, &enc, x);
        let z = tape.reshape(z_flat, &[b * n, dc]);
        let idx: Vec<usize> = (0..b * n).map(|r| quantize(&self.codebook, tape.value(z).row(r)).0).collect();
        let zq = tape.gather_rows(codes, &idx);

        // Straight-through: forward value ẑ, adjoint passes to z unchanged.
        let diff = tape.sub(zq, z);
        let diff_sg = tape.stop_gradient(diff);
        let st = tape.add(z, diff_sg);
        let dec_in = tape.reshape(st, &[b, n * dc]);
        let recon = self.decoder.forward_tape(tape, &dec, dec_in);
        let err = tape.sub(recon, x);
        let sl1 = tape.smooth_l1(err, self.config.smooth_l1_delta);
        let re = tape.mean(sl1);

        let zq_sg = tape.stop_gradient(zq);
        let z_sg = tape.stop_gradient(z);
        let e = tape.sub(z, zq_sg);
        let embed = self.latent_distance(tape, e);
        let c = tape.sub(z_sg, zq);
        let commit = self.latent_distance(tape, c);

        let bc = tape.scale(commit, self.config.beta);
        let s = tape.add(re, embed);
        let total = tape.add(s, bc);

        let mut params = enc;
        params.extend(dec);
        params.push(codes);
        Ok((params, [re, embed, commit, total]))
    }

    fn record_loss(&self, tape: &mut Tape, windows: &[Vec<Vec<f64>>]) -> Result<(Vec<Var>, Var, LossTerms), VqError> {
        let (params, [re, embed, commit, total]) = self.record(tape, windows)?;
        let terms = LossTerms {
            re: tape.value(re).item(),
            embed: tape.value(embed).item(),
            commit: tape.value(commit).item(),
            total: tape.value(total).item(),
        };
        Ok((params, total, terms))
    }

    /// Mean over rows of the row norm (or squared norm).
    fn latent_distance(&self, tape: &mut Tape, d: Var) -> Var {
        let sq = tape.square(d);
        let rows = tape.sum_cols(sq);
        let per = if self.config.squared_latent_losses { rows } else { tape.sqrt(rows) };
        tape.mean(per)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.push(&mut self.codebook.codes);
        p
    }

    /// Mean smooth-L1 reconstruction error over `windows`, normalized space.
    pub fn reconstruction_error(&self, windows: &[Vec<Vec<f64>>]) -> Result<f64, VqError> {
        let mut total = 0.0;
        let mut count = 0usize;
        let delta = self.config.smooth_l1_delta;
        for w in windows {
            let (_, rec) = self.encode_decode(w)?;
            let a = self.normalize(w);
            let b = self.normalize(&rec);
            total += a.iter().zip(&b).map(|(x, y)| smooth_l1(y - x, delta)).sum::<f64>();
            count += a.len();
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    /// Code selection counts over `windows`.
    pub fn code_usage(&self, windows: &[Vec<Vec<f64>>]) -> Result<Vec<usize>, VqError> {
        let mut hist = vec![0; self.codebook.len()];
        for w in windows {
            for zi in self.encode(w)? {
                hist[quantize(&self.codebook, &zi).0] += 1;
            }
        }
        Ok(hist)
    }

    /// Re-encodes every window of `clip` (stride `w`) and stitches the
    /// reconstructions; trailing frames that do not fill a window are copied.
    pub fn reconstruct_clip(&self, clip: &MotionClip) -> Result<Vec<Vec<f64>>, VqError> {
        let feats = clip.features();
        let w = self.config.window;
        let mut out = Vec::with_capacity(feats.len());
        let mut s = 0;
        while s + w <= feats.len() {
            let x0 = feats[s][0];
            let win: Vec<Vec<f64>> = feats[s..s + w]
                .iter()
                .map(|f| {
                    let mut f = f.clone();
                    f[0] -= x0;
                    f
                })
                .collect();
            let (_, rec) = self.encode_decode(&win)?;
            out.extend(rec.into_iter().map(|mut f| {
                f[0] += x0;
                f
            }));
            s += w;
        }
        out.extend(feats[s..].iter().cloned());
        Ok(out)
    }
}

impl VqVaeConfig {
    pub fn latents(&self) -> usize {
        self.window / self.downsample
    }
}

pub(crate) fn smooth_l1(x: f64, delta: f64) -> f64 {
    if x.abs() < delta {
        0.5 * x * x / delta
    } else {
        x.abs() - 0.5 * delta
    }
}

/// Per-feature mean and standard deviation over every frame of `windows`.
/// Constant features get unit scale.
pub fn feature_stats(windows: &[Vec<Vec<f64>>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut n = 0usize;
    for f in windows.iter().flatten() {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
        n += 1;
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = vec![0.0; dim];
    for f in windows.iter().flatten() {
        var.iter_mut().zip(f.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    let std = var.iter().map(|s| (s / n.max(1) as f64).sqrt()).map(|s| if s > 1e-8 { s } else { 1.0 }).collect();
    (mean, std)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub train: LossTerms,
    pub heldout_re: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqHistory {
    pub records: Vec<EvalRecord>,
    /// Held-out smooth-L1 of predicting the training feature mean.
    pub baseline_re: f64,
}

/// Trains on every stride-1 window of `train`, reporting held-out
/// reconstruction on `heldout` every `eval_every` steps. Deterministic for a
/// fixed seed.
pub fn train_vqvae(
    train: &[MotionClip],
    heldout: &[MotionClip],
    config: &VqVaeConfig,
) -> Result<(VqVaeModel, VqHistory), VqError> {
    config.validate()?;
    let train_w: Vec<_> = train.iter().flat_map(|c| clip_windows(c, config.window, 1)).collect();
    if train_w.is_empty() {
        return Err(VqError::Config("training corpus has no complete window".into()));
    }
    let held_w: Vec<_> = heldout.iter().flat_map(|c| clip_windows(c, config.window, 1)).collect();
    let frame_dim = train_w[0][0].len();
    let mut model = VqVaeModel::new(frame_dim, config.clone())?;
    let (mean, std) = feature_stats(&train_w, frame_dim);
    model.feature_mean = mean;
    model.feature_std = std;

    let mut history = VqHistory { records: Vec::new(), baseline_re: mean_predictor_error(&model, &held_w) };
    if config.steps == 0 {
        return Ok((model, history));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_c0de);
    if config.init_codes_from_data {
        let mut lat = Vec::new();
        while lat.len() < config.codes {
            let w = &train_w[rng.random_range(0..train_w.len())];
            let z = model.encode(w)?;
            lat.push(z[rng.random_range(0..z.len())].clone());
        }
        let data = lat.into_iter().flatten().collect();
        model.codebook.codes = Tensor::matrix(config.codes, config.code_dim, data)?;
    }

    let adam = AdamConfig::with_lr(config.lr);
    let mut opt = AdamState::new();
    let mut order: Vec<usize> = (0..train_w.len()).collect();
    let mut cursor = order.len();
    let mut running = LossTerms::default();
    let mut since = 0usize;
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(train_w.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train_w[order[cursor]].clone());
            cursor += 1;
        }
        let mut tape = Tape::new();
        let (params, loss, terms) = model.record_loss(&mut tape, &batch)?;
        if !terms.total.is_finite() {
            return Err(VqError::Diverged { step, detail: format!("loss terms {terms:?}") });
        }
        let mut g = tape.backward(loss)?;
        let mut grads: Vec<Tensor> = params.iter().map(|&p| g.take(p)).collect();
        clip_global_norm(&mut grads, config.grad_clip);
        adam_step(&mut model.params_mut(), &grads, &mut opt, &adam)
            .map_err(|e| VqError::Diverged { step, detail: e.to_string() })?;

        running.re += terms.re;
        running.embed += terms.embed;
        running.commit += terms.commit;
        running.total += terms.total;
        since += 1;
        if step % config.eval_every == 0 || step == config.steps {
            let k = since as f64;
            let train = LossTerms {
                re: running.re / k,
                embed: running.embed / k,
                commit: running.commit / k,
                total: running.total / k,
            };
            let heldout_re = model.reconstruction_error(&held_w)?;
            history.records.push(EvalRecord { step, train, heldout_re });
            running = LossTerms::default();
            since = 0;
        }
    }
    Ok((model, history))
}

/// Held-out smooth-L1 of predicting the per-feature training mean, which is
/// zero in normalized space.
fn mean_predictor_error(model: &VqVaeModel, windows: &[Vec<Vec<f64>>]) -> f64 {
    let delta = model.config.smooth_l1_delta;
    let mut total = 0.0;
    let mut n = 0usize;
    for w in windows {
        for v in model.normalize(w) {
            total += smooth_l1(v, delta);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

pub const VQVAE_COMPONENT: &str = "vqvae";

#[derive(Serialize, Deserialize)]
struct VqMeta {
    config: VqVaeConfig,
    frame_dim: usize,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
}

impl VqVaeModel {
    /// Encoder, decoder and codebook in a checkpoint container; the codebook
    /// blob is `K × d_c` little-endian f64, row-major.
    pub fn to_container(&self) -> Container {
        let meta = VqMeta {
            config: self.config.clone(),
            frame_dim: self.frame_dim,
            feature_mean: self.feature_mean.clone(),
            feature_std: self.feature_std.clone(),
        };
        let mut c = Container::new(VQVAE_COMPONENT, serde_json::to_value(meta).expect("meta serializes"));
        c.push_net("encoder", &self.encoder);
        c.push_net("decoder", &self.decoder);
        c.push_blob("codebook", self.codebook.codes.data().iter().flat_map(|v| v.to_le_bytes()).collect());
        c
    }

    pub fn from_container(c: Container) -> Result<Self, CheckpointError> {
        let c = c.expect(VQVAE_COMPONENT)?;
        let meta: VqMeta = serde_json::from_value(c.meta.clone())?;
        let raw = c.blob("codebook")?;
        let (k, dc) = (meta.config.codes, meta.config.code_dim);
        if raw.len() != k * dc * 8 {
            return Err(CheckpointError::Format(format!(
                "codebook blob has {} bytes, expected {}",
                raw.len(),
                k * dc * 8
            )));
        }
        let codes: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let model = Self {
            encoder: c.net("encoder")?,
            decoder: c.net("decoder")?,
            codebook: Codebook::new(Tensor::matrix(k, dc, codes)?),
            frame_dim: meta.frame_dim,
            feature_mean: meta.feature_mean,
            feature_std: meta.feature_std,
            config: meta.config,
        };
        let n_in = model.config.window * model.frame_dim;
        let n_lat = dc * model.latents();
        if model.encoder.sizes().first() != Some(&n_in)
            || model.encoder.output_dim() != n_lat
            || model.decoder.input_dim() != n_lat
            || model.decoder.output_dim() != n_in
        {
            return Err(CheckpointError::Format("network widths disagree with the stored config".into()));
        }
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_container(Container::read(path)?)
    }
}
