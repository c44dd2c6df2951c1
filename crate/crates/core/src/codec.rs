//! VQ-VAE semantic codec: continuous feature frames to discrete codes and back.
//!
//! Encoder and decoder are stacks of frame-preserving residual convolution
//! blocks (same padding, odd kernel). The codebook is maintained by an
//! exponential moving average of assigned latents rather than by gradients;
//! entries that go unused for `dead_after` steps are reseeded from a random
//! latent of the current batch.

use ndarray::{s, Array2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{NamedTensor, TensorFile};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, RmsNorm};
use crate::params::{accumulate, Adam, AdamConfig, ParamStore};
use crate::Scalar;

/// Semantic code rate: one code per 20 ms frame.
pub const CODE_RATE_HZ: f64 = 50.0;

/// Floor applied to per-dimension standard deviations.
pub const NORM_STD_FLOOR: f64 = 1e-6;

/// Real-valued frames (rows) tagged with their frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<A> {
    pub frames: Array2<A>,
    pub frame_rate_hz: f64,
}

impl<A: Scalar> FeatureSequence<A> {
    pub fn new(frames: Array2<A>, frame_rate_hz: f64) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::Empty("feature sequence has no frames"));
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("feature sequence contains non-finite values".into()));
        }
        if frame_rate_hz <= 0.0 {
            return Err(Error::InvalidConfig("frame rate must be positive".into()));
        }
        Ok(Self { frames, frame_rate_hz })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn cast<B: Scalar>(&self) -> FeatureSequence<B> {
        FeatureSequence { frames: self.frames.mapv(|v| B::lit(v.as_f64())), frame_rate_hz: self.frame_rate_hz }
    }
}

/// Per-dimension normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize<A: Scalar>(&self, frames: &Array2<A>) -> Array2<A> {
        let mut out = frames.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = A::lit((v.as_f64() - self.mean[j]) / self.std[j]);
            }
        }
        out
    }

    pub fn denormalize<A: Scalar>(&self, frames: &Array2<A>) -> Array2<A> {
        let mut out = frames.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = A::lit(v.as_f64() * self.std[j] + self.mean[j]);
            }
        }
        out
    }
}

/// Mean and (population) standard deviation per dimension over every frame
/// of the corpus, accumulated in one streaming pass.
pub fn compute_norm_stats<A: Scalar>(corpus: &[FeatureSequence<A>]) -> Result<NormStats> {
    let first = corpus.first().ok_or(Error::Empty("normalization corpus"))?;
    let dim = first.dim();
    let mut count = 0usize;
    let mut mean = vec![0.0f64; dim];
    let mut m2 = vec![0.0f64; dim];
    for seq in corpus {
        if seq.dim() != dim {
            return Err(Error::DimMismatch { what: "normalization corpus", expected: dim, got: seq.dim() });
        }
        for row in seq.frames.rows() {
            count += 1;
            for (j, &v) in row.iter().enumerate() {
                // Welford update.
                let x = v.as_f64();
                let delta = x - mean[j];
                mean[j] += delta / count as f64;
                m2[j] += delta * (x - mean[j]);
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("normalization corpus has no frames"));
    }
    let std = m2.iter().map(|&s| (s / count as f64).sqrt().max(NORM_STD_FLOOR)).collect();
    Ok(NormStats { mean, std })
}

/// Quantization table: `K` entries of dimension `d_latent`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<A> {
    entries: Array2<A>,
}

impl<A: Scalar> Codebook<A> {
    pub fn new(entries: Array2<A>) -> Result<Self> {
        if entries.nrows() < 2 {
            return Err(Error::InvalidConfig(format!("codebook needs at least 2 entries, got {}", entries.nrows())));
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("codebook contains non-finite entries".into()));
        }
        for i in 0..entries.nrows() {
            for j in i + 1..entries.nrows() {
                if entries.row(i) == entries.row(j) {
                    return Err(Error::InvalidConfig(format!("codebook entries {i} and {j} are identical")));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &Array2<A> {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }
}

/// Nearest-entry assignment by squared Euclidean distance, lowest index on ties.
pub fn quantize<A: Scalar>(latents: &Array2<A>, codebook: &Codebook<A>) -> Result<(Vec<u32>, Array2<A>)> {
    let entries = codebook.entries();
    if entries.nrows() == 0 {
        return Err(Error::Empty("codebook"));
    }
    if latents.ncols() != entries.ncols() {
        return Err(Error::DimMismatch { what: "latent width", expected: entries.ncols(), got: latents.ncols() });
    }
    let mut codes = Vec::with_capacity(latents.nrows());
    let mut quantized = Array2::zeros(latents.dim());
    for (t, z) in latents.rows().into_iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = A::infinity();
        for (k, e) in entries.rows().into_iter().enumerate() {
            let d: A = z.iter().zip(e.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        codes.push(best as u32);
        quantized.row_mut(t).assign(&entries.row(best));
    }
    Ok((codes, quantized))
}

/// Fraction of the `codebook_size` entries that appear in `codes`.
pub fn codebook_utilization(codes: &[u32], codebook_size: usize) -> Result<f64> {
    if codes.is_empty() {
        return Err(Error::Empty("codes"));
    }
    let mut seen = vec![false; codebook_size];
    for &c in codes {
        let c = c as usize;
        if c >= codebook_size {
            return Err(Error::UnknownToken(c as u32));
        }
        seen[c] = true;
    }
    Ok(seen.iter().filter(|&&s| s).count() as f64 / codebook_size as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub hidden_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub kernel_size: usize,
    pub commitment_weight: f64,
    pub ema_decay: f64,
    /// Steps without assignment before an entry is reseeded.
    pub dead_after: usize,
    pub norm_stats: NormStats,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            latent_dim: 8,
            codebook_size: 64,
            hidden_dim: 48,
            encoder_depth: 2,
            decoder_depth: 2,
            kernel_size: 7,
            commitment_weight: 0.25,
            ema_decay: 0.99,
            dead_after: 100,
            norm_stats: NormStats::identity(16),
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.codebook_size < 2 {
            return bad("codebook_size must be >= 2");
        }
        if self.commitment_weight < 0.0 {
            return bad("commitment_weight must be >= 0");
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.norm_stats.dim() != self.input_dim || self.norm_stats.std.len() != self.input_dim {
            return bad("norm_stats dimension differs from input_dim");
        }
        if self.norm_stats.std.iter().any(|&s| s <= 0.0) {
            return bad("norm std entries must be > 0");
        }
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Linear,
    norm: RmsNorm,
    up: Linear,
    down: Linear,
    kernel: usize,
}

impl ConvBlock {
    fn new<A: Scalar, R: Rng>(store: &mut ParamStore<A>, name: &str, width: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            conv: Linear::new(store, &format!("{name}.conv"), kernel * width, width, true, rng),
            norm: RmsNorm::new(store, &format!("{name}.norm"), width),
            up: Linear::new(store, &format!("{name}.up"), width, 2 * width, true, rng),
            down: Linear::new(store, &format!("{name}.down"), 2 * width, width, true, rng),
            kernel,
        }
    }

    fn forward<A: Scalar>(&self, g: &mut Graph<'_, A>, x: Var) -> Var {
        let u = g.unfold(x, self.kernel);
        let h = self.conv.forward(g, u);
        let h = self.norm.forward(g, h);
        let h = self.up.forward(g, h);
        let h = g.silu(h);
        let h = self.down.forward(g, h);
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
struct ConvStack {
    input: Linear,
    blocks: Vec<ConvBlock>,
    output: Linear,
}

impl ConvStack {
    fn forward<A: Scalar>(&self, g: &mut Graph<'_, A>, x: Var) -> Var {
        let mut h = self.input.forward(g, x);
        for b in &self.blocks {
            h = b.forward(g, h);
        }
        self.output.forward(g, h)
    }
}

/// EMA bookkeeping for the codebook.
#[derive(Debug, Clone, PartialEq)]
struct EmaState {
    cluster_size: Vec<f64>,
    embed_sum: Array2<f64>,
    idle_steps: Vec<usize>,
}

/// Loss decomposition for one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecLoss {
    pub reconstruction: f64,
    pub codebook: f64,
    /// Already multiplied by `commitment_weight`.
    pub commitment: f64,
}

impl CodecLoss {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.codebook + self.commitment
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainOpts {
    pub steps: usize,
    pub windows_per_step: usize,
    pub window_frames: usize,
    pub steps_per_epoch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for CodecTrainOpts {
    fn default() -> Self {
        Self {
            steps: 600,
            windows_per_step: 8,
            window_frames: 32,
            steps_per_epoch: 50,
            adam: AdamConfig { lr: 3e-3, ..Default::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecMetrics {
    pub step_losses: Vec<CodecLoss>,
    pub epoch_losses: Vec<f64>,
    pub epoch_utilization: Vec<f64>,
    pub revived_entries: usize,
}

/// Trained (or freshly initialized) codec: parameters, codebook and normalization.
#[derive(Debug, Clone)]
pub struct SemanticCodec<A: Scalar> {
    pub config: CodecConfig,
    pub params: ParamStore<A>,
    encoder: ConvStack,
    decoder: ConvStack,
    codebook: Codebook<A>,
    ema: EmaState,
}

impl<A: Scalar> SemanticCodec<A> {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.hidden_dim;
        let k = config.kernel_size;
        let stack = |params: &mut ParamStore<A>, rng: &mut ChaCha8Rng, name: &str, depth: usize, din: usize, dout: usize| ConvStack {
            input: Linear::new(params, &format!("{name}.in"), din, c, true, rng),
            blocks: (0..depth).map(|i| ConvBlock::new(params, &format!("{name}.block{i}"), c, k, rng)).collect(),
            output: Linear::new(params, &format!("{name}.out"), c, dout, true, rng),
        };
        let encoder = stack(&mut params, &mut rng, "enc", config.encoder_depth, config.input_dim, config.latent_dim);
        let decoder = stack(&mut params, &mut rng, "dec", config.decoder_depth, config.latent_dim, config.input_dim);
        let entries = Array2::from_shape_simple_fn((config.codebook_size, config.latent_dim), || A::lit(rng.random_range(-1.0..1.0)));
        let codebook = Codebook::new(entries)?;
        let ema = EmaState::from_codebook(&codebook);
        Ok(Self { config, params, encoder, decoder, codebook, ema })
    }

    pub fn codebook(&self) -> &Codebook<A> {
        &self.codebook
    }

    pub fn set_codebook(&mut self, codebook: Codebook<A>) -> Result<()> {
        if codebook.size() != self.config.codebook_size || codebook.dim() != self.config.latent_dim {
            return Err(Error::DimMismatch { what: "codebook", expected: self.config.codebook_size, got: codebook.size() });
        }
        self.ema = EmaState::from_codebook(&codebook);
        self.codebook = codebook;
        Ok(())
    }

    /// Zeroes the encoder's final projection (weights and bias).
    pub fn zero_encoder_output(&mut self) {
        for id in [Some(self.encoder.output.weight), self.encoder.output.bias].into_iter().flatten() {
            self.params.get_mut(id).fill(A::zero());
        }
    }

    /// Encodes already-normalized frames to latents (`T x d_latent`).
    pub fn encode_normalized(&self, frames: &Array2<A>) -> Result<Array2<A>> {
        if frames.ncols() != self.config.input_dim {
            return Err(Error::DimMismatch { what: "codec input", expected: self.config.input_dim, got: frames.ncols() });
        }
        let mut g = Graph::new(&self.params);
        let x = g.constant(frames.clone());
        let z = self.encoder.forward(&mut g, x);
        Ok(g.value(z).to_owned())
    }

    /// Normalizes with the stored statistics, then encodes.
    pub fn encode(&self, features: &FeatureSequence<A>) -> Result<Array2<A>> {
        if features.dim() != self.config.input_dim {
            return Err(Error::DimMismatch { what: "codec input", expected: self.config.input_dim, got: features.dim() });
        }
        self.encode_normalized(&self.config.norm_stats.normalize(&features.frames))
    }

    pub fn quantize(&self, latents: &Array2<A>) -> Result<(Vec<u32>, Array2<A>)> {
        quantize(latents, &self.codebook)
    }

    /// Decodes quantized latents and maps back to the original feature scale.
    pub fn decode(&self, quantized: &Array2<A>) -> Result<FeatureSequence<A>> {
        let out = self.decode_normalized(quantized)?;
        FeatureSequence::new(self.config.norm_stats.denormalize(&out), CODE_RATE_HZ)
    }

    pub fn decode_normalized(&self, quantized: &Array2<A>) -> Result<Array2<A>> {
        if quantized.ncols() != self.config.latent_dim {
            return Err(Error::DimMismatch { what: "codec latent", expected: self.config.latent_dim, got: quantized.ncols() });
        }
        let mut g = Graph::new(&self.params);
        let x = g.constant(quantized.clone());
        let y = self.decoder.forward(&mut g, x);
        Ok(g.value(y).to_owned())
    }

    /// Looks codes up in the codebook and decodes them.
    pub fn decode_codes(&self, codes: &[u32]) -> Result<FeatureSequence<A>> {
        let mut q = Array2::zeros((codes.len(), self.config.latent_dim));
        for (t, &c) in codes.iter().enumerate() {
            if c as usize >= self.codebook.size() {
                return Err(Error::UnknownToken(c));
            }
            q.row_mut(t).assign(&self.codebook.entries.row(c as usize));
        }
        self.decode(&q)
    }

    /// Features to codes.
    pub fn tokenize(&self, features: &FeatureSequence<A>) -> Result<Vec<u32>> {
        let z = self.encode(features)?;
        Ok(self.quantize(&z)?.0)
    }

    /// Forward + backward on one normalized window. Returns the loss split, the
    /// parameter gradients, the latents and their codes.
    fn window_step(&self, x: &Array2<A>) -> Result<(CodecLoss, Vec<Option<Array2<A>>>, Array2<A>, Vec<u32>)> {
        let mut g = Graph::new(&self.params);
        let xv = g.constant(x.clone());
        let z = self.encoder.forward(&mut g, xv);
        let zval = g.value(z).to_owned();
        let (codes, q) = quantize(&zval, &self.codebook)?;
        let zq = g.straight_through(z, q.clone());
        let recon = self.decoder.forward(&mut g, zq);
        let (t, d) = x.dim();
        let rec_w = vec![A::lit(1.0 / (t * d) as f64); t];
        let rec = g.weighted_sse(recon, x.clone(), &rec_w);
        let lat_w = vec![A::lit(1.0 / (t * self.config.latent_dim) as f64); t];
        // Commitment pulls encoder outputs toward their (frozen) entries.
        let commit = g.weighted_sse(z, q.clone(), &lat_w);
        let commit = g.scale(commit, A::lit(self.config.commitment_weight));
        let total = g.add(rec, commit);
        // The codebook term has the same value as the unweighted commitment
        // distance but its update is carried out by the EMA, not by gradients.
        let codebook_term: f64 =
            zval.iter().zip(q.iter()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>() / (t * self.config.latent_dim) as f64;
        let loss = CodecLoss { reconstruction: g.scalar(rec).as_f64(), codebook: codebook_term, commitment: g.scalar(commit).as_f64() };
        let grads = g.backward(total).into_param_grads();
        Ok((loss, grads, zval, codes))
    }

    fn ema_update(&mut self, latents: &[Array2<A>], codes: &[Vec<u32>], rng: &mut ChaCha8Rng) -> usize {
        let k = self.config.codebook_size;
        let d = self.config.latent_dim;
        let decay = self.config.ema_decay;
        let mut counts = vec![0.0f64; k];
        let mut sums = Array2::<f64>::zeros((k, d));
        for (z, cs) in latents.iter().zip(codes) {
            for (row, &c) in z.rows().into_iter().zip(cs) {
                counts[c as usize] += 1.0;
                for (j, &v) in row.iter().enumerate() {
                    sums[[c as usize, j]] += v.as_f64();
                }
            }
        }
        let total: f64 = counts.iter().sum();
        for i in 0..k {
            self.ema.cluster_size[i] = decay * self.ema.cluster_size[i] + (1.0 - decay) * counts[i];
            for j in 0..d {
                self.ema.embed_sum[[i, j]] = decay * self.ema.embed_sum[[i, j]] + (1.0 - decay) * sums[[i, j]];
            }
            if counts[i] > 0.0 {
                self.ema.idle_steps[i] = 0;
            } else {
                self.ema.idle_steps[i] += 1;
            }
        }
        // Laplace-smoothed cluster sizes keep rarely used entries finite.
        let n: f64 = self.ema.cluster_size.iter().sum();
        let eps = 1e-5;
        let mut entries = self.codebook.entries.clone();
        for i in 0..k {
            let size = (self.ema.cluster_size[i] + eps) / (n + k as f64 * eps) * n;
            if self.ema.cluster_size[i] > eps {
                for j in 0..d {
                    entries[[i, j]] = A::lit(self.ema.embed_sum[[i, j]] / size);
                }
            }
        }
        let pool: Vec<(usize, usize)> = latents.iter().enumerate().flat_map(|(w, z)| (0..z.nrows()).map(move |t| (w, t))).collect();
        let mut revived = 0;
        if total > 0.0 {
            for i in 0..k {
                if self.ema.idle_steps[i] >= self.config.dead_after {
                    let &(w, t) = pool.choose(rng).expect("nonempty batch");
                    for j in 0..d {
                        let jitter = rng.random_range(-1e-3..1e-3);
                        entries[[i, j]] = A::lit(latents[w][[t, j]].as_f64() + jitter);
                    }
                    self.ema.cluster_size[i] = 1.0;
                    for j in 0..d {
                        self.ema.embed_sum[[i, j]] = entries[[i, j]].as_f64();
                    }
                    self.ema.idle_steps[i] = 0;
                    revived += 1;
                }
            }
        }
        self.codebook.entries = entries;
        revived
    }

    /// Trains on `corpus` in place. Normalization statistics are computed
    /// once from the corpus and stored in the config.
    pub fn train(&mut self, corpus: &[FeatureSequence<A>], opts: &CodecTrainOpts) -> Result<CodecMetrics> {
        if corpus.is_empty() {
            return Err(Error::Empty("codec training corpus"));
        }
        self.config.norm_stats = compute_norm_stats(corpus)?;
        let normalized: Vec<Array2<A>> = corpus.iter().map(|s| self.config.norm_stats.normalize(&s.frames)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut adam = Adam::new(opts.adam, &self.params);
        let mut metrics = CodecMetrics::default();
        if opts.steps == 0 {
            return Ok(metrics);
        }

        // Seed the codebook with encoder outputs so every entry starts in the data's range.
        let init_windows: Vec<Array2<A>> =
            (0..opts.windows_per_step.max(1) * 4).map(|_| sample_window(&normalized, opts.window_frames, &mut rng)).collect();
        let mut pool = Vec::new();
        for w in &init_windows {
            let z = self.encode_normalized(w)?;
            pool.extend(z.rows().into_iter().map(|r| r.to_owned()));
        }
        let mut entries = Array2::zeros((self.config.codebook_size, self.config.latent_dim));
        for i in 0..self.config.codebook_size {
            let src = &pool[rng.random_range(0..pool.len())];
            for j in 0..self.config.latent_dim {
                entries[[i, j]] = src[j] + A::lit(rng.random_range(-1e-2..1e-2));
            }
        }
        self.codebook = Codebook::new(entries)?;
        self.ema = EmaState::from_codebook(&self.codebook);

        let mut epoch_loss = 0.0;
        let mut epoch_codes: Vec<u32> = Vec::new();
        for step in 0..opts.steps {
            let mut grads = Vec::new();
            let mut latents = Vec::with_capacity(opts.windows_per_step);
            let mut codes = Vec::with_capacity(opts.windows_per_step);
            let mut loss = CodecLoss { reconstruction: 0.0, codebook: 0.0, commitment: 0.0 };
            for _ in 0..opts.windows_per_step {
                let w = sample_window(&normalized, opts.window_frames, &mut rng);
                let (l, g, z, c) = self.window_step(&w)?;
                loss.reconstruction += l.reconstruction;
                loss.codebook += l.codebook;
                loss.commitment += l.commitment;
                accumulate(&mut grads, g);
                latents.push(z);
                codes.push(c);
            }
            let n = opts.windows_per_step as f64;
            loss.reconstruction /= n;
            loss.codebook /= n;
            loss.commitment /= n;
            if !loss.total().is_finite() {
                return Err(Error::Divergence { step, detail: format!("codec loss {:?}", loss) });
            }
            let inv = A::lit(1.0 / n);
            grads.iter_mut().flatten().for_each(|g| g.mapv_inplace(|v| v * inv));
            adam.step(&mut self.params, &grads, 1.0);
            metrics.revived_entries += self.ema_update(&latents, &codes, &mut rng);
            metrics.step_losses.push(loss);
            epoch_loss += loss.total();
            epoch_codes.extend(codes.iter().flatten());
            if (step + 1) % opts.steps_per_epoch.max(1) == 0 || step + 1 == opts.steps {
                let steps_in_epoch = (step % opts.steps_per_epoch.max(1)) + 1;
                metrics.epoch_losses.push(epoch_loss / steps_in_epoch as f64);
                metrics.epoch_utilization.push(codebook_utilization(&epoch_codes, self.config.codebook_size)?);
                epoch_loss = 0.0;
                epoch_codes.clear();
            }
        }
        Ok(metrics)
    }

    pub fn to_container(&self) -> Result<TensorFile> {
        let meta = serde_json::json!({ "kind": "semantic_codec", "config": self.config });
        let mut f = TensorFile::new(serde_json::to_string_pretty(&meta)?);
        f.push_params("param.", &self.params);
        f.push(NamedTensor::f32_matrix("codebook.entries", &self.codebook.entries));
        f.push(NamedTensor::f32_matrix(
            "codebook.cluster_size",
            &Array2::from_shape_vec((1, self.ema.cluster_size.len()), self.ema.cluster_size.clone()).expect("row"),
        ));
        f.push(NamedTensor::f32_matrix("codebook.embed_sum", &self.ema.embed_sum));
        Ok(f)
    }

    pub fn from_container(f: &TensorFile) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&f.meta)?;
        if meta["kind"] != "semantic_codec" {
            return Err(Error::Format(format!("expected semantic_codec checkpoint, found {}", meta["kind"])));
        }
        let config: CodecConfig = serde_json::from_value(meta["config"].clone())?;
        let mut codec = Self::new(config, 0)?;
        f.load_params("param.", &mut codec.params)?;
        codec.codebook = Codebook::new(f.get("codebook.entries")?.to_matrix()?)?;
        codec.ema.cluster_size = f.get("codebook.cluster_size")?.to_matrix::<f64>()?.row(0).to_vec();
        codec.ema.embed_sum = f.get("codebook.embed_sum")?.to_matrix()?;
        Ok(codec)
    }
}

impl EmaState {
    fn from_codebook<A: Scalar>(cb: &Codebook<A>) -> Self {
        Self { cluster_size: vec![1.0; cb.size()], embed_sum: cb.entries().mapv(|v| v.as_f64()), idle_steps: vec![0; cb.size()] }
    }
}

fn sample_window<A: Scalar>(corpus: &[Array2<A>], frames: usize, rng: &mut ChaCha8Rng) -> Array2<A> {
    let seq = &corpus[rng.random_range(0..corpus.len())];
    let len = frames.min(seq.nrows()).max(1);
    let start = rng.random_range(0..=seq.nrows() - len);
    seq.slice(s![start..start + len, ..]).to_owned()
}
