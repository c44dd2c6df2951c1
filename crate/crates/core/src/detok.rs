//! Chunk-wise autoregressive flow-matching detokenizer.
//!
//! A sequence of T frames is cut into N chunks. Training lays out a clean
//! copy and a noisy copy of every chunk (2N chunks, 2T rows) and regresses
//! the velocity of the noisy rows. Clean rows sit at `prefill_t`. Inference
//! integrates one chunk at a time and then prefills it into the cache.
//!
//! Clean and noisy copies of a chunk share frame positions.

use std::rc::Rc;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::FeatureSequence;
use crate::container::TensorFile;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{timestep_embedding, KvState, Linear, Transformer};
use crate::params::{accumulate, Adam, AdamConfig, ParamId, ParamStore};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub sigma_min: f64,
    pub ode_steps: usize,
    pub prefill_t: f64,
    pub feature_dim: usize,
    pub frames_per_code: usize,
    pub frame_rate_hz: f64,
    pub infer_chunk_seconds: f64,
    pub train_chunk_seconds: (f64, f64),
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-4,
            ode_steps: 30,
            prefill_t: 0.999,
            feature_dim: 16,
            frames_per_code: 1,
            frame_rate_hz: 50.0,
            infer_chunk_seconds: 3.0,
            train_chunk_seconds: (0.5, 3.0),
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return bad("sigma_min must lie in (0, 1)");
        }
        if self.ode_steps == 0 {
            return bad("ode_steps must be >= 1");
        }
        if !(self.prefill_t > 0.0 && self.prefill_t < 1.0) {
            return bad("prefill_t must lie in (0, 1)");
        }
        if self.feature_dim == 0 || self.frames_per_code == 0 {
            return bad("feature_dim and frames_per_code must be positive");
        }
        if self.infer_chunk_frames() == 0 {
            return bad("inference chunk must hold at least one frame");
        }
        let (lo, hi) = self.train_chunk_frames();
        if lo == 0 || lo > hi {
            return bad("training chunk range is empty");
        }
        Ok(())
    }

    pub fn infer_chunk_frames(&self) -> usize {
        (self.infer_chunk_seconds * self.frame_rate_hz).round() as usize
    }

    pub fn train_chunk_frames(&self) -> (usize, usize) {
        let (lo, hi) = self.train_chunk_seconds;
        ((lo * self.frame_rate_hz).round() as usize, (hi * self.frame_rate_hz).round() as usize)
    }
}

/// `M(t) = t·M + (1 − (1 − σ_min)·t)·M̂`.
pub fn noise_sample<A: Scalar>(clean: &Array2<A>, t: f64, noise: &Array2<A>, sigma_min: f64) -> Result<Array2<A>> {
    if clean.dim() != noise.dim() {
        return Err(Error::DimMismatch { what: "noise", expected: clean.len(), got: noise.len() });
    }
    let a = A::lit(t);
    let b = A::lit(1.0 - (1.0 - sigma_min) * t);
    Ok(ndarray::Zip::from(clean).and(noise).map_collect(|&m, &n| a * m + b * n))
}

/// `dM/dt = M − (1 − σ_min)·M̂`.
pub fn fm_target<A: Scalar>(clean: &Array2<A>, noise: &Array2<A>, sigma_min: f64) -> Result<Array2<A>> {
    if clean.dim() != noise.dim() {
        return Err(Error::DimMismatch { what: "noise", expected: clean.len(), got: noise.len() });
    }
    let c = A::lit(1.0 - sigma_min);
    Ok(ndarray::Zip::from(clean).and(noise).map_collect(|&m, &n| m - c * n))
}

/// Ordered, disjoint, covering frame ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub ranges: Vec<(usize, usize)>,
}

impl ChunkPlan {
    /// Chunks of `chunk` frames; the last one holds the remainder.
    pub fn fixed(total: usize, chunk: usize) -> Result<Self> {
        if total == 0 || chunk == 0 {
            return Err(Error::Empty("chunk plan"));
        }
        let ranges = (0..total).step_by(chunk).map(|s| (s, (s + chunk).min(total))).collect();
        Ok(Self { ranges })
    }

    /// Chunk sizes drawn uniformly from `min..=max` frames.
    pub fn random<R: Rng>(total: usize, min: usize, max: usize, rng: &mut R) -> Result<Self> {
        if total == 0 || min == 0 || min > max {
            return Err(Error::Empty("chunk plan"));
        }
        let mut ranges = Vec::new();
        let mut s = 0;
        while s < total {
            let e = (s + rng.random_range(min..=max)).min(total);
            ranges.push((s, e));
            s = e;
        }
        Ok(Self { ranges })
    }

    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut s = 0;
        let mut ranges = Vec::new();
        for &n in sizes {
            ranges.push((s, s + n));
            s += n;
        }
        let plan = Self { ranges };
        plan.validate(s)?;
        Ok(plan)
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        let mut expect = 0;
        for &(s, e) in &self.ranges {
            if s != expect || e <= s {
                return Err(Error::InvalidConfig(format!("chunk ({s}, {e}) breaks the cover")));
            }
            expect = e;
        }
        if expect != total || self.ranges.is_empty() {
            return Err(Error::InvalidConfig(format!("chunks cover {expect} of {total} frames")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.1)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|(s, e)| e - s).collect()
    }

    /// Interior chunk starts.
    pub fn boundaries(&self) -> Vec<usize> {
        self.ranges.iter().skip(1).map(|r| r.0).collect()
    }

    /// Chunk index of every frame.
    pub fn chunk_of_frame(&self) -> Vec<usize> {
        self.ranges.iter().enumerate().flat_map(|(i, &(s, e))| std::iter::repeat_n(i, e - s)).collect()
    }
}

/// Attention permissions over 2N chunks: `0..N` clean, `N..2N` noisy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkMask {
    pub n: usize,
    pub allowed: Array2<bool>,
}

/// Clean i sees clean j ≤ i. Noisy i sees clean j ≤ i − 1 and itself.
pub fn make_chunk_mask(n: usize) -> ChunkMask {
    let allowed = Array2::from_shape_fn((2 * n, 2 * n), |(r, c)| match (r < n, c < n) {
        (true, true) => c <= r,
        (true, false) => false,
        (false, true) => c < r - n,
        (false, false) => r == c,
    });
    ChunkMask { n, allowed }
}

impl ChunkMask {
    /// Copy with one chunk-pair permission inverted.
    pub fn with_flipped(&self, row: usize, col: usize) -> Self {
        let mut m = self.clone();
        m.allowed[[row, col]] = !m.allowed[[row, col]];
        m
    }

    /// Frame-level mask over `[clean frames; noisy frames]` by block replication.
    pub fn frame_mask(&self, plan: &ChunkPlan) -> Array2<bool> {
        assert_eq!(plan.len(), self.n, "plan and mask disagree on chunk count");
        let of = plan.chunk_of_frame();
        let t = of.len();
        let idx = |r: usize| if r < t { of[r] } else { self.n + of[r - t] };
        Array2::from_shape_fn((2 * t, 2 * t), |(r, c)| self.allowed[[idx(r), idx(c)]])
    }
}

/// Deterministic per-chunk Gaussian noise: stream `2i` seeds the ODE start
/// of chunk i, stream `2i + 1` its prefill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkNoise {
    pub seed: u64,
}

impl ChunkNoise {
    fn draw<A: Scalar>(&self, stream: u64, rows: usize, cols: usize) -> Array2<A> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        Array2::from_shape_simple_fn((rows, cols), || A::lit(StandardNormal.sample(&mut rng)))
    }

    pub fn initial<A: Scalar>(&self, chunk: usize, rows: usize, cols: usize) -> Array2<A> {
        self.draw(2 * chunk as u64, rows, cols)
    }

    pub fn prefill<A: Scalar>(&self, chunk: usize, rows: usize, cols: usize) -> Array2<A> {
        self.draw(2 * chunk as u64 + 1, rows, cols)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokConfig {
    pub flow: FlowConfig,
    pub code_vocab: usize,
    pub code_embed_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for DetokConfig {
    fn default() -> Self {
        Self { flow: FlowConfig::default(), code_vocab: 64, code_embed_dim: 32, model_dim: 64, layers: 2, heads: 4, ffn_dim: 128 }
    }
}

impl DetokConfig {
    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) || !(self.model_dim / self.heads).is_multiple_of(2) {
            return Err(Error::InvalidConfig("model_dim must split into heads of even width".into()));
        }
        if self.code_vocab == 0 || self.code_embed_dim == 0 || self.layers == 0 {
            return Err(Error::InvalidConfig("code_vocab, code_embed_dim and layers must be positive".into()));
        }
        Ok(())
    }
}

/// Attention state of the finalized clean chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct DetokCache<A> {
    pub layers: Vec<KvState<A>>,
    pub chunks: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokTrainOpts {
    pub steps: usize,
    pub pairs_per_step: usize,
    /// Longest training window in frames.
    pub window_frames: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for DetokTrainOpts {
    fn default() -> Self {
        Self { steps: 500, pairs_per_step: 4, window_frames: 200, adam: AdamConfig { lr: 2e-3, ..Default::default() }, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetokMetrics {
    pub losses: Vec<f64>,
}

/// Rows fed to one model evaluation.
struct Rows<'a, A> {
    x: Array2<A>,
    codes: &'a [usize],
    times: &'a [f64],
    positions: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct Detokenizer<A: Scalar> {
    pub config: DetokConfig,
    pub params: ParamStore<A>,
    code_table: ParamId,
    input: Linear,
    time_in: Linear,
    time_layers: Vec<Linear>,
    stack: Transformer,
    output: Linear,
}

impl<A: Scalar> Detokenizer<A> {
    pub fn new(config: DetokConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, e, dim) = (config.flow.feature_dim, config.code_embed_dim, config.model_dim);
        let code_table = p.add_normal("code_table", (config.code_vocab, e), 1.0, &mut rng);
        let input = Linear::new(&mut p, "input", d + e, dim, true, &mut rng);
        let time_in = Linear::new(&mut p, "time_in", dim, dim, true, &mut rng);
        let time_layers = (0..config.layers).map(|l| Linear::new(&mut p, &format!("time.{l}"), dim, dim, true, &mut rng)).collect();
        let stack = Transformer::new(&mut p, "stack", config.layers, dim, config.heads, config.ffn_dim, &mut rng);
        let output = Linear::new(&mut p, "output", dim, d, true, &mut rng);
        Ok(Self { config, params: p, code_table, input, time_in, time_layers, stack, output })
    }

    pub fn empty_cache(&self) -> DetokCache<A> {
        DetokCache { layers: (0..self.config.layers).map(|_| KvState::empty(self.config.model_dim)).collect(), chunks: 0, frames: 0 }
    }

    fn frame_codes(&self, codes: &[u32], frames: usize) -> Result<Vec<usize>> {
        let fpc = self.config.flow.frames_per_code;
        if codes.len() * fpc != frames {
            return Err(Error::DimMismatch { what: "frames for codes", expected: codes.len() * fpc, got: frames });
        }
        let mut out = Vec::with_capacity(frames);
        for &c in codes {
            if c as usize >= self.config.code_vocab {
                return Err(Error::UnknownToken(c));
            }
            out.extend(std::iter::repeat_n(c as usize, fpc));
        }
        Ok(out)
    }

    fn graph_run(
        &self,
        g: &mut Graph<'_, A>,
        rows: Rows<'_, A>,
        allowed: &Rc<Array2<bool>>,
        past: Option<&[KvState<A>]>,
    ) -> (Var, Vec<(Var, Var)>) {
        let x = g.constant(rows.x);
        let table = g.param(self.code_table);
        let c = g.gather(table, rows.codes);
        let xc = g.concat_cols(&[x, c]);
        let h = self.input.forward(g, xc);
        let temb = g.constant(timestep_embedding(rows.times, self.config.model_dim));
        let temb = self.time_in.forward(g, temb);
        let temb = g.silu(temb);
        let bias: Vec<Var> = self.time_layers.iter().map(|l| l.forward(g, temb)).collect();
        let out = self.stack.forward(g, h, rows.positions, allowed, past, Some(&bias));
        (self.output.forward(g, out.hidden), out.kv)
    }

    fn velocity(&self, rows: Rows<'_, A>, allowed: Array2<bool>, past: Option<&[KvState<A>]>) -> Array2<A> {
        let mut g = Graph::new(&self.params);
        let (v, _) = self.graph_run(&mut g, rows, &Rc::new(allowed), past);
        g.value(v).to_owned()
    }

    fn check_chunk(&self, cache: &DetokCache<A>, chunk: usize) -> Result<()> {
        if chunk != cache.chunks {
            return Err(Error::CacheOrder { cached: cache.chunks, requested: chunk });
        }
        Ok(())
    }

    /// Euler-integrates chunk `chunk` from its seeded noise, attending to the cached clean chunks.
    pub fn generate_chunk(&self, codes: &[u32], cache: &DetokCache<A>, chunk: usize, noise: &ChunkNoise) -> Result<Array2<A>> {
        self.check_chunk(cache, chunk)?;
        let flow = &self.config.flow;
        let frames = codes.len() * flow.frames_per_code;
        let fc = self.frame_codes(codes, frames)?;
        let positions: Vec<usize> = (cache.frames..cache.frames + frames).collect();
        let mut m: Array2<A> = noise.initial(chunk, frames, flow.feature_dim);
        let dt = 1.0 / flow.ode_steps as f64;
        let past = cache.layers.first().map_or(0, KvState::len);
        let allowed = Array2::from_elem((frames, past + frames), true);
        for k in 0..flow.ode_steps {
            let t = k as f64 * dt;
            let times = vec![t; frames];
            let v = self.velocity(
                Rows { x: m.clone(), codes: &fc, times: &times, positions: &positions },
                allowed.clone(),
                Some(&cache.layers),
            );
            m.scaled_add(A::lit(dt), &v);
        }
        Ok(m)
    }

    /// Runs finalized chunk `chunk` at `prefill_t` and appends its attention state.
    pub fn prefill_chunk(
        &self,
        features: &Array2<A>,
        codes: &[u32],
        cache: &mut DetokCache<A>,
        chunk: usize,
        noise: &ChunkNoise,
    ) -> Result<()> {
        self.check_chunk(cache, chunk)?;
        let flow = &self.config.flow;
        if features.ncols() != flow.feature_dim {
            return Err(Error::DimMismatch { what: "feature dim", expected: flow.feature_dim, got: features.ncols() });
        }
        let frames = features.nrows();
        let fc = self.frame_codes(codes, frames)?;
        let x = noise_sample(features, flow.prefill_t, &noise.prefill(chunk, frames, flow.feature_dim), flow.sigma_min)?;
        let positions: Vec<usize> = (cache.frames..cache.frames + frames).collect();
        let times = vec![flow.prefill_t; frames];
        let allowed = Rc::new(Array2::from_elem((frames, cache.frames + frames), true));
        let mut g = Graph::new(&self.params);
        let (_, kv) = self.graph_run(&mut g, Rows { x, codes: &fc, times: &times, positions: &positions }, &allowed, Some(&cache.layers));
        for (layer, (k, v)) in cache.layers.iter_mut().zip(kv) {
            layer.append(g.value(k), g.value(v));
        }
        cache.chunks += 1;
        cache.frames += frames;
        Ok(())
    }

    /// Generate-then-prefill over `plan` (in code units scaled by frames_per_code).
    pub fn detokenize_with_plan(&self, codes: &[u32], plan: &ChunkPlan, noise: &ChunkNoise) -> Result<Array2<A>> {
        let fpc = self.config.flow.frames_per_code;
        plan.validate(codes.len() * fpc)?;
        let mut cache = self.empty_cache();
        let mut out = Array2::zeros((codes.len() * fpc, self.config.flow.feature_dim));
        for (i, &(s, e)) in plan.ranges.iter().enumerate() {
            if s % fpc != 0 || e % fpc != 0 {
                return Err(Error::InvalidConfig("chunk edges must align with codes".into()));
            }
            let c = &codes[s / fpc..e / fpc];
            let m = self.generate_chunk(c, &cache, i, noise)?;
            if i + 1 < plan.len() {
                self.prefill_chunk(&m, c, &mut cache, i, noise)?;
            }
            out.slice_mut(s![s..e, ..]).assign(&m);
        }
        Ok(out)
    }

    /// Inference-size chunking of the full code sequence.
    pub fn inference_plan(&self, n_codes: usize) -> Result<ChunkPlan> {
        let fpc = self.config.flow.frames_per_code;
        let chunk = (self.config.flow.infer_chunk_frames() / fpc).max(1) * fpc;
        ChunkPlan::fixed(n_codes * fpc, chunk)
    }

    pub fn detokenize_stream(&self, codes: &[u32], noise: &ChunkNoise) -> Result<FeatureSequence<A>> {
        if codes.is_empty() {
            return Err(Error::Empty("codes"));
        }
        let plan = self.inference_plan(codes.len())?;
        let frames = self.detokenize_with_plan(codes, &plan, noise)?;
        FeatureSequence::new(frames, self.config.flow.frame_rate_hz)
    }

    /// Baseline: every chunk generated with an empty cache.
    pub fn detokenize_independent(&self, codes: &[u32], plan: &ChunkPlan, noise: &ChunkNoise) -> Result<Array2<A>> {
        let fpc = self.config.flow.frames_per_code;
        plan.validate(codes.len() * fpc)?;
        let mut out = Array2::zeros((codes.len() * fpc, self.config.flow.feature_dim));
        for (i, &(s, e)) in plan.ranges.iter().enumerate() {
            let mut cache = self.empty_cache();
            cache.chunks = i;
            cache.frames = s;
            let m = self.generate_chunk(&codes[s / fpc..e / fpc], &cache, i, noise)?;
            out.slice_mut(s![s..e, ..]).assign(&m);
        }
        Ok(out)
    }

    /// Reference generation without a cache: every ODE step of every chunk
    /// re-evaluates the whole 2N-chunk layout under `mask`. Clean slots of
    /// finished chunks hold their prefill inputs; all other inactive slots are zero.
    pub fn monolithic_generate(&self, codes: &[u32], plan: &ChunkPlan, mask: &ChunkMask, noise: &ChunkNoise) -> Result<Array2<A>> {
        let flow = &self.config.flow;
        let t = codes.len() * flow.frames_per_code;
        plan.validate(t)?;
        let d = flow.feature_dim;
        let fc = self.frame_codes(codes, t)?;
        let fm = Rc::new(mask.frame_mask(plan));
        let codes2: Vec<usize> = fc.iter().chain(&fc).copied().collect();
        let positions: Vec<usize> = (0..t).chain(0..t).collect();
        let mut layout = Array2::<A>::zeros((2 * t, d));
        let mut out = Array2::<A>::zeros((t, d));
        let dt = 1.0 / flow.ode_steps as f64;
        for (i, &(s, e)) in plan.ranges.iter().enumerate() {
            let n = e - s;
            let mut m: Array2<A> = noise.initial(i, n, d);
            for k in 0..flow.ode_steps {
                let tk = k as f64 * dt;
                let times: Vec<f64> = (0..2 * t).map(|r| if r < t { flow.prefill_t } else { tk }).collect();
                layout.slice_mut(s![t + s..t + e, ..]).assign(&m);
                let mut g = Graph::new(&self.params);
                let (v, _) =
                    self.graph_run(&mut g, Rows { x: layout.clone(), codes: &codes2, times: &times, positions: &positions }, &fm, None);
                let v = g.value(v).slice(s![t + s..t + e, ..]).to_owned();
                m.scaled_add(A::lit(dt), &v);
            }
            layout.slice_mut(s![t + s..t + e, ..]).fill(A::zero());
            let clean = noise_sample(&m, flow.prefill_t, &noise.prefill(i, n, d), flow.sigma_min)?;
            layout.slice_mut(s![s..e, ..]).assign(&clean);
            out.slice_mut(s![s..e, ..]).assign(&m);
        }
        Ok(out)
    }

    /// Cache for clean chunks built in one masked pass instead of chunk by chunk.
    pub fn prefill_all(&self, features: &Array2<A>, codes: &[u32], plan: &ChunkPlan, noise: &ChunkNoise) -> Result<DetokCache<A>> {
        let flow = &self.config.flow;
        let t = features.nrows();
        plan.validate(t)?;
        let fc = self.frame_codes(codes, t)?;
        let mut x = Array2::zeros(features.dim());
        for (i, &(s, e)) in plan.ranges.iter().enumerate() {
            let chunk = features.slice(s![s..e, ..]).to_owned();
            let noised = noise_sample(&chunk, flow.prefill_t, &noise.prefill(i, e - s, flow.feature_dim), flow.sigma_min)?;
            x.slice_mut(s![s..e, ..]).assign(&noised);
        }
        let mask = make_chunk_mask(plan.len());
        let fm = mask.frame_mask(plan).slice(s![..t, ..t]).to_owned();
        let positions: Vec<usize> = (0..t).collect();
        let times = vec![flow.prefill_t; t];
        let mut g = Graph::new(&self.params);
        let (_, kv) = self.graph_run(&mut g, Rows { x, codes: &fc, times: &times, positions: &positions }, &Rc::new(fm), None);
        let layers = kv.into_iter().map(|(k, v)| KvState { keys: g.value(k).to_owned(), values: g.value(v).to_owned() }).collect();
        Ok(DetokCache { layers, chunks: plan.len(), frames: t })
    }

    /// Flow-matching loss and gradients for one window; `t_noisy[i]` is chunk i's time.
    pub fn window_loss(
        &self,
        features: &Array2<A>,
        codes: &[u32],
        plan: &ChunkPlan,
        t_noisy: &[f64],
        noise_clean: &Array2<A>,
        noise_noisy: &Array2<A>,
    ) -> Result<(f64, Vec<Option<Array2<A>>>)> {
        let flow = &self.config.flow;
        let t = features.nrows();
        plan.validate(t)?;
        let fc = self.frame_codes(codes, t)?;
        let of = plan.chunk_of_frame();
        let clean = noise_sample(features, flow.prefill_t, noise_clean, flow.sigma_min)?;
        let mut noisy = Array2::zeros(features.dim());
        for r in 0..t {
            let tr = t_noisy[of[r]];
            let row = noise_sample(
                &features.slice(s![r..r + 1, ..]).to_owned(),
                tr,
                &noise_noisy.slice(s![r..r + 1, ..]).to_owned(),
                flow.sigma_min,
            )?;
            noisy.row_mut(r).assign(&row.row(0));
        }
        let target = fm_target(features, noise_noisy, flow.sigma_min)?;
        let x = ndarray::concatenate(ndarray::Axis(0), &[clean.view(), noisy.view()]).expect("same width");
        let codes2: Vec<usize> = fc.iter().chain(&fc).copied().collect();
        let positions: Vec<usize> = (0..t).chain(0..t).collect();
        let times: Vec<f64> = (0..2 * t).map(|r| if r < t { flow.prefill_t } else { t_noisy[of[r - t]] }).collect();
        let fm = Rc::new(make_chunk_mask(plan.len()).frame_mask(plan));
        let mut g = Graph::new(&self.params);
        let (v, _) = self.graph_run(&mut g, Rows { x, codes: &codes2, times: &times, positions: &positions }, &fm, None);
        let pred = g.slice_rows(v, t, t);
        let w = vec![A::lit(1.0 / (t * flow.feature_dim) as f64); t];
        let loss = g.weighted_sse(pred, target, &w);
        let value = g.scalar(loss).as_f64();
        Ok((value, g.backward(loss).into_param_grads()))
    }

    pub fn train(&mut self, pairs: &[(Vec<u32>, FeatureSequence<A>)], opts: &DetokTrainOpts) -> Result<DetokMetrics> {
        let flow = self.config.flow.clone();
        let fpc = flow.frames_per_code;
        for (i, (c, f)) in pairs.iter().enumerate() {
            if c.len() * fpc != f.len() {
                return Err(Error::Sequence(format!("pair {i}: {} codes but {} frames", c.len(), f.len())));
            }
        }
        let mut metrics = DetokMetrics::default();
        if opts.steps == 0 {
            return Ok(metrics);
        }
        if pairs.is_empty() {
            return Err(Error::Empty("detokenizer training pairs"));
        }
        let (cmin, cmax) = flow.train_chunk_frames();
        let (cmin, cmax) = ((cmin / fpc).max(1), (cmax / fpc).max(1));
        let window_codes = (opts.window_frames / fpc).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut adam = Adam::new(opts.adam, &self.params);
        let d = flow.feature_dim;
        for step in 0..opts.steps {
            let mut grads = Vec::new();
            let mut loss = 0.0;
            for _ in 0..opts.pairs_per_step.max(1) {
                let (codes, feats) = &pairs[rng.random_range(0..pairs.len())];
                let len = window_codes.min(codes.len());
                let start = rng.random_range(0..=codes.len() - len);
                let c = &codes[start..start + len];
                let f = feats.frames.slice(s![start * fpc..(start + len) * fpc, ..]).to_owned();
                let code_plan = ChunkPlan::random(len, cmin, cmax, &mut rng)?;
                let plan = ChunkPlan { ranges: code_plan.ranges.iter().map(|&(a, b)| (a * fpc, b * fpc)).collect() };
                let ts: Vec<f64> = (0..plan.len()).map(|_| rng.random::<f64>()).collect();
                let nc = Array2::from_shape_simple_fn(f.dim(), || A::lit(StandardNormal.sample(&mut rng)));
                let nn = Array2::from_shape_simple_fn(f.dim(), || A::lit(StandardNormal.sample(&mut rng)));
                let (l, g) = self.window_loss(&f, c, &plan, &ts, &nc, &nn)?;
                debug_assert_eq!(f.ncols(), d);
                loss += l;
                accumulate(&mut grads, g);
            }
            let n = opts.pairs_per_step.max(1) as f64;
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, detail: format!("flow loss {loss}") });
            }
            let inv = A::lit(1.0 / n);
            grads.iter_mut().flatten().for_each(|g| g.mapv_inplace(|v| v * inv));
            let progress = step as f64 / opts.steps as f64;
            adam.step(&mut self.params, &grads, 0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            metrics.losses.push(loss);
        }
        Ok(metrics)
    }

    pub fn to_container(&self) -> Result<TensorFile> {
        let meta = serde_json::json!({ "kind": "detokenizer", "config": self.config });
        let mut f = TensorFile::new(serde_json::to_string_pretty(&meta)?);
        f.push_params("param.", &self.params);
        Ok(f)
    }

    pub fn from_container(f: &TensorFile) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&f.meta)?;
        if meta["kind"] != "detokenizer" {
            return Err(Error::Format(format!("expected detokenizer checkpoint, found {}", meta["kind"])));
        }
        let config: DetokConfig = serde_json::from_value(meta["config"].clone())?;
        let mut m = Self::new(config, 0)?;
        f.load_params("param.", &mut m.params)?;
        Ok(m)
    }
}

/// Median Euclidean distance between consecutive frames across `corpus`.
pub fn median_adjacent_distance<A: Scalar>(corpus: &[Array2<A>]) -> Result<f64> {
    let mut d: Vec<f64> = corpus
        .iter()
        .flat_map(|f| {
            (1..f.nrows())
                .map(move |t| f.row(t).iter().zip(f.row(t - 1).iter()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>().sqrt())
        })
        .collect();
    if d.is_empty() {
        return Err(Error::Empty("adjacent frame pairs"));
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    Ok(if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) })
}

/// Mean jump across chunk boundaries in excess of `reference` (the corpus
/// median adjacent-frame distance), floored at zero.
pub fn boundary_discontinuity<A: Scalar>(features: &Array2<A>, boundaries: &[usize], reference: f64) -> Result<f64> {
    if boundaries.is_empty() {
        return Err(Error::Empty("chunk boundaries"));
    }
    let t = features.nrows();
    let mut total = 0.0;
    for &b in boundaries {
        if b == 0 || b >= t {
            return Err(Error::InvalidConfig(format!("boundary {b} outside [1, {t})")));
        }
        total += features.row(b).iter().zip(features.row(b - 1).iter()).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>().sqrt();
    }
    Ok((total / boundaries.len() as f64 - reference).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny(fpc: usize) -> DetokConfig {
        DetokConfig {
            flow: FlowConfig {
                feature_dim: 3,
                frames_per_code: fpc,
                ode_steps: 3,
                infer_chunk_seconds: 0.1,
                train_chunk_seconds: (0.04, 0.1),
                ..Default::default()
            },
            code_vocab: 6,
            code_embed_dim: 4,
            model_dim: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 16,
        }
    }

    #[test]
    fn noise_sample_endpoints() {
        let m = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64);
        let n = Array2::from_shape_fn((2, 3), |(i, j)| 0.5 - (i + j) as f64);
        assert_eq!(noise_sample(&m, 0.0, &n, 1e-4).unwrap(), n);
        let at1 = noise_sample(&m, 1.0, &n, 1e-4).unwrap();
        assert!((&at1 - &(&m + &(&n * 1e-4))).iter().all(|v| v.abs() < 1e-15));
        assert_eq!(fm_target(&m, &Array2::zeros((2, 3)), 1e-4).unwrap(), m);
        let neg = fm_target(&Array2::zeros((2, 3)), &n, 0.0).unwrap();
        assert_eq!(neg, -&n);
        assert!(noise_sample(&m, 0.5, &Array2::zeros((3, 3)), 1e-4).is_err());
    }

    #[test]
    fn mask_enumerations() {
        let m = make_chunk_mask(1);
        assert_eq!(m.allowed, ndarray::array![[true, false], [false, true]]);
        let m = make_chunk_mask(2);
        // Rows M0, M1, M0', M1' over columns M0, M1, M0', M1'.
        let expected = ndarray::array![
            [true, false, false, false],
            [true, true, false, false],
            [false, false, true, false],
            [true, false, false, true],
        ];
        assert_eq!(m.allowed, expected);
    }

    #[test]
    fn plans() {
        assert_eq!(ChunkPlan::fixed(375, 150).unwrap().sizes(), vec![150, 150, 75]);
        assert_eq!(ChunkPlan::fixed(150, 150).unwrap().sizes(), vec![150]);
        assert_eq!(ChunkPlan::fixed(375, 150).unwrap().boundaries(), vec![150, 300]);
        assert!(ChunkPlan { ranges: vec![(0, 2), (3, 4)] }.validate(4).is_err());
        assert!(ChunkPlan { ranges: vec![(0, 2), (2, 2), (2, 4)] }.validate(4).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ChunkPlan::random(500, 25, 150, &mut rng).unwrap();
        p.validate(500).unwrap();
        assert!(p.sizes()[..p.len() - 1].iter().all(|&s| (25..=150).contains(&s)));
        assert_eq!(FlowConfig::default().infer_chunk_frames(), 150);
    }

    #[test]
    fn discontinuity_examples() {
        let flat = Array2::<f64>::ones((6, 2));
        assert_eq!(boundary_discontinuity(&flat, &[3], 0.0).unwrap(), 0.0);
        let mut f = Array2::<f64>::zeros((4, 2));
        f.row_mut(2).assign(&ndarray::array![3.0, 4.0]);
        f.row_mut(3).assign(&ndarray::array![3.0, 4.0]);
        assert!((boundary_discontinuity(&f, &[2], 1.0).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(boundary_discontinuity(&f, &[2], 10.0).unwrap(), 0.0);
        assert!(boundary_discontinuity(&f, &[], 0.0).is_err());
        assert!(boundary_discontinuity(&f, &[0], 0.0).is_err());
        assert_eq!(median_adjacent_distance(&[f]).unwrap(), 0.0);
    }

    #[test]
    fn one_euler_step() {
        let mut cfg = tiny(1);
        cfg.flow.ode_steps = 1;
        let m = Detokenizer::<f64>::new(cfg, 1).unwrap();
        let noise = ChunkNoise { seed: 9 };
        let codes = [1u32, 2, 3];
        let cache = m.empty_cache();
        let out = m.generate_chunk(&codes, &cache, 0, &noise).unwrap();
        let m0: Array2<f64> = noise.initial(0, 3, 3);
        let v = m.velocity(
            Rows { x: m0.clone(), codes: &[1, 2, 3], times: &[0.0; 3], positions: &[0, 1, 2] },
            Array2::from_elem((3, 3), true),
            Some(&cache.layers),
        );
        assert_eq!(out, &m0 + &v);
        assert_eq!(out, m.generate_chunk(&codes, &cache, 0, &noise).unwrap());
    }

    #[test]
    fn streaming_matches_monolithic() {
        for fpc in [1usize, 2] {
            let m = Detokenizer::<f64>::new(tiny(fpc), 2).unwrap();
            let codes: Vec<u32> = (0..11).map(|i| (i * 7 % 6) as u32).collect();
            let noise = ChunkNoise { seed: 4 };
            let plan = ChunkPlan::fixed(11 * fpc, 4 * fpc).unwrap();
            let stream = m.detokenize_with_plan(&codes, &plan, &noise).unwrap();
            let mono = m.monolithic_generate(&codes, &plan, &make_chunk_mask(plan.len()), &noise).unwrap();
            let diff = (&stream - &mono).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(diff <= 1e-9, "fpc {fpc} diff {diff}");
            let tampered = m.monolithic_generate(&codes, &plan, &make_chunk_mask(plan.len()).with_flipped(4, 1), &noise).unwrap();
            assert!((&stream - &tampered).iter().any(|v| v.abs() > 1e-4));
        }
    }

    #[test]
    fn independent_chunks_ignore_earlier_chunks() {
        let m = Detokenizer::<f64>::new(tiny(1), 2).unwrap();
        let noise = ChunkNoise { seed: 9 };
        let plan = ChunkPlan::fixed(10, 4).unwrap();
        let a: Vec<u32> = (0..10).map(|i| (i % 6) as u32).collect();
        let mut b = a.clone();
        b[..4].iter_mut().for_each(|c| *c = (*c + 1) % 6);
        let ia = m.detokenize_independent(&a, &plan, &noise).unwrap();
        let ib = m.detokenize_independent(&b, &plan, &noise).unwrap();
        let stream = m.detokenize_with_plan(&a, &plan, &noise).unwrap();
        assert_eq!(ia.slice(s![4.., ..]), ib.slice(s![4.., ..]));
        assert_ne!(ia.slice(s![..4, ..]), ib.slice(s![..4, ..]));
        assert_eq!(ia.slice(s![..4, ..]), stream.slice(s![..4, ..]));
        assert!((&ia.slice(s![4.., ..]) - &stream.slice(s![4.., ..])).iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn incremental_prefill_matches_one_pass() {
        let m = Detokenizer::<f64>::new(tiny(1), 3).unwrap();
        let noise = ChunkNoise { seed: 1 };
        let codes: Vec<u32> = (0..9).map(|i| (i % 6) as u32).collect();
        let feats = Array2::from_shape_fn((9, 3), |(i, j)| ((i + 2 * j) as f64).sin());
        let plan = ChunkPlan::from_sizes(&[3, 4, 2]).unwrap();
        let mut cache = m.empty_cache();
        for (i, &(s, e)) in plan.ranges.iter().enumerate() {
            m.prefill_chunk(&feats.slice(s![s..e, ..]).to_owned(), &codes[s..e], &mut cache, i, &noise).unwrap();
        }
        let one = m.prefill_all(&feats, &codes, &plan, &noise).unwrap();
        assert_eq!(cache.chunks, 3);
        for (a, b) in cache.layers.iter().zip(&one.layers) {
            assert!((&a.keys - &b.keys).iter().all(|v| v.abs() <= 1e-4));
            assert!((&a.values - &b.values).iter().all(|v| v.abs() <= 1e-4));
        }
    }

    #[test]
    fn cache_order_enforced() {
        let m = Detokenizer::<f64>::new(tiny(1), 3).unwrap();
        let noise = ChunkNoise { seed: 1 };
        let mut cache = m.empty_cache();
        let f = Array2::zeros((2, 3));
        assert!(matches!(m.prefill_chunk(&f, &[0, 1], &mut cache, 1, &noise), Err(Error::CacheOrder { .. })));
        m.prefill_chunk(&f, &[0, 1], &mut cache, 0, &noise).unwrap();
        assert!(matches!(m.generate_chunk(&[0], &cache, 0, &noise), Err(Error::CacheOrder { .. })));
        assert!(m.generate_chunk(&[0], &cache, 1, &noise).is_ok());
    }

    #[test]
    fn stream_lengths_are_exact() {
        for fpc in [1usize, 3] {
            let m = Detokenizer::<f32>::new(tiny(fpc), 0).unwrap();
            for n in [1usize, 4, 5, 9] {
                let codes: Vec<u32> = (0..n as u32).map(|c| c % 6).collect();
                let out = m.detokenize_stream(&codes, &ChunkNoise { seed: 0 }).unwrap();
                assert_eq!(out.len(), n * fpc);
            }
        }
    }

    #[test]
    fn clean_predictions_do_not_enter_loss() {
        // Changing clean-chunk noise changes clean rows but, with N = 1,
        // noisy rows cannot see them, so the loss is unchanged.
        let m = Detokenizer::<f64>::new(tiny(1), 5).unwrap();
        let feats = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let plan = ChunkPlan::fixed(4, 4).unwrap();
        let nn = Array2::from_shape_fn((4, 3), |(i, j)| ((i * j) as f64).cos());
        let (a, _) = m.window_loss(&feats, &[0, 1, 2, 3], &plan, &[0.3], &Array2::zeros((4, 3)), &nn).unwrap();
        let (b, _) = m.window_loss(&feats, &[0, 1, 2, 3], &plan, &[0.3], &Array2::ones((4, 3)), &nn).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_reduces_loss() {
        let mut m = Detokenizer::<f32>::new(tiny(1), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = Array2::from_shape_simple_fn((6, 3), || rng.random_range(-1.0f32..1.0));
        let pairs: Vec<(Vec<u32>, FeatureSequence<f32>)> = (0..8)
            .map(|_| {
                let codes: Vec<u32> = (0..12).map(|_| rng.random_range(0..6)).collect();
                let f = Array2::from_shape_fn((12, 3), |(t, j)| table[[codes[t] as usize, j]]);
                (codes, FeatureSequence::new(f, 50.0).unwrap())
            })
            .collect();
        let opts = DetokTrainOpts {
            steps: 150,
            pairs_per_step: 4,
            window_frames: 12,
            adam: AdamConfig { lr: 5e-3, ..Default::default() },
            seed: 0,
        };
        let metrics = m.train(&pairs, &opts).unwrap();
        let head: f64 = metrics.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = metrics.losses[140..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = Detokenizer::<f32>::new(tiny(1), 7).unwrap();
        let back =
            Detokenizer::<f32>::from_container(&TensorFile::read_from(m.to_container().unwrap().to_bytes().as_slice()).unwrap()).unwrap();
        let noise = ChunkNoise { seed: 3 };
        assert_eq!(m.detokenize_stream(&[1, 2, 3], &noise).unwrap(), back.detokenize_stream(&[1, 2, 3], &noise).unwrap());
    }

    proptest! {
        #[test]
        fn mask_rules_hold(n in 1usize..=16) {
            let m = make_chunk_mask(n);
            for r in 0..2 * n {
                prop_assert!(m.allowed[[r, r]]);
                for c in 0..2 * n {
                    let expect = if r < n && c < n { c <= r }
                        else if r < n { false }
                        else if c < n { c < r - n }
                        else { c == r };
                    prop_assert_eq!(m.allowed[[r, c]], expect);
                }
            }
        }

        #[test]
        fn path_derivative_is_target(
            vals in prop::collection::vec(-3.0f64..3.0, 12),
            t in 0.001f64..0.999,
            sigma in 1e-5f64..0.5,
        ) {
            let m = Array2::from_shape_vec((2, 3), vals[..6].to_vec()).unwrap();
            let n = Array2::from_shape_vec((2, 3), vals[6..].to_vec()).unwrap();
            let eps = 1e-5;
            let fd = (noise_sample(&m, t + eps, &n, sigma).unwrap() - noise_sample(&m, t - eps, &n, sigma).unwrap()) / (2.0 * eps);
            let v = fm_target(&m, &n, sigma).unwrap();
            for (a, b) in fd.iter().zip(v.iter()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3));
            }
        }
    }
}
