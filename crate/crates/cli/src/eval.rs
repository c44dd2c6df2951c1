//! Evaluation report: numerical checks plus the chunking comparison.

use duocast_core::corpus::{synth_corpus, SynthSpec};
use duocast_core::detok::{
    boundary_discontinuity, fm_target, make_chunk_mask, median_adjacent_distance, noise_sample, ChunkNoise, ChunkPlan,
};
use duocast_core::lm::{sample_next, sampling_distribution, SamplerConfig};
use duocast_core::{Codec, Detok};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result, StageExt};
use crate::store::{self, write_json, Layout};

pub const PATH_REL_TOL: f64 = 1e-6;
pub const MASK_MAX_ABS: f64 = 1e-4;
pub const MASK_CHUNK_COUNTS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Criterion {
    pub id: &'static str,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub pass: bool,
    pub tampered_mask: bool,
    pub criteria: Vec<Criterion>,
}

/// Worst relative error between a central finite difference of the flow
/// path and its analytic derivative over `samples` random draws (f64).
pub fn path_derivative_error(samples: usize, sigma_min: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..6));
        let m = Array2::<f64>::from_shape_simple_fn((r, c), || rng.sample(StandardNormal));
        let n = Array2::<f64>::from_shape_simple_fn((r, c), || rng.sample(StandardNormal));
        let t: f64 = rng.random_range(0.01..0.99);
        let h = 1e-3;
        let fwd = noise_sample(&m, t + h, &n, sigma_min).expect("shapes match");
        let back = noise_sample(&m, t - h, &n, sigma_min).expect("shapes match");
        let fd = (fwd - back) / (2.0 * h);
        let exact = fm_target(&m, &n, sigma_min).expect("shapes match");
        let err = (&fd - &exact).mapv(|v| v * v).sum().sqrt() / exact.mapv(|v| v * v).sum().sqrt().max(1e-300);
        worst = worst.max(err);
    }
    worst
}

/// `total` frames split into `n` chunks with a shorter final chunk when n > 1.
pub fn partial_plan(total: usize, n: usize) -> Result<ChunkPlan> {
    if n == 1 {
        return ChunkPlan::from_sizes(&[total]).stage("mask equivalence");
    }
    let size = total.div_ceil(n);
    let mut sizes = vec![size; n - 1];
    sizes.push(total - size * (n - 1));
    ChunkPlan::from_sizes(&sizes).stage("mask equivalence")
}

/// Max-abs gap between streaming generation and masked whole-sequence
/// generation for each chunk count. `tamper` flips the permission of noisy
/// chunk 1 on clean chunk 0.
pub fn mask_equivalence(detok: &Detok, counts: &[usize], seed: u64, tamper: bool) -> Result<Vec<(usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fpc = detok.config.flow.frames_per_code;
    counts
        .iter()
        .map(|&n| {
            let codes_per_chunk = 5;
            let n_codes = codes_per_chunk * n - usize::from(n > 1) * 2;
            let codes: Vec<u32> = (0..n_codes).map(|_| rng.random_range(0..detok.config.code_vocab as u32)).collect();
            let code_plan = partial_plan(n_codes, n)?;
            let plan = ChunkPlan::from_sizes(&code_plan.sizes().iter().map(|s| s * fpc).collect::<Vec<_>>()).stage("mask equivalence")?;
            let noise = ChunkNoise { seed: seed + n as u64 };
            let stream = detok.detokenize_with_plan(&codes, &plan, &noise).stage("mask equivalence")?;
            let mut mask = make_chunk_mask(n);
            if tamper && n > 1 {
                mask = mask.with_flipped(n + 1, 0);
            }
            let mono = detok.monolithic_generate(&codes, &plan, &mask, &noise).stage("mask equivalence")?;
            let gap = (&stream - &mono).iter().fold(0.0f64, |m, v| m.max(f64::from(v.abs())));
            Ok((n, gap))
        })
        .collect()
}

/// Largest z-score between empirical counts over `draws` samples of one
/// logits row and the target distribution, and the probability mass drawn
/// outside its support.
pub fn sampler_check(row: &[f64], cfg: &SamplerConfig, draws: usize, seed: u64) -> Result<(f64, usize)> {
    let dist = sampling_distribution(row, cfg).stage("sampler")?;
    let mut counts = vec![0usize; row.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..draws {
        counts[sample_next(row, cfg, &mut rng).stage("sampler")?] += 1;
    }
    let mut p = vec![0.0; row.len()];
    for &(i, q) in &dist {
        p[i] = q;
    }
    let n = draws as f64;
    let mut worst = 0.0f64;
    let mut outside = 0;
    for (i, &c) in counts.iter().enumerate() {
        if p[i] == 0.0 {
            outside += c;
            continue;
        }
        let sd = (n * p[i] * (1.0 - p[i])).sqrt().max(1e-12);
        worst = worst.max((c as f64 - n * p[i]).abs() / sd);
    }
    Ok((worst, outside))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryComparison {
    pub reference: f64,
    pub chunk_frames: usize,
    /// Per item: (autoregressive, independent).
    pub items: Vec<(f64, f64)>,
    pub wins: usize,
    pub fraction: f64,
}

/// Boundary discontinuity of streamed vs independently generated chunks on
/// the same codes and noise.
pub fn boundary_comparison(
    detok: &Detok,
    items: &[Vec<u32>],
    chunk_frames: usize,
    reference: f64,
    noise_seed: u64,
) -> Result<BoundaryComparison> {
    let fpc = detok.config.flow.frames_per_code;
    let chunk = (chunk_frames / fpc).max(1) * fpc;
    let mut out = Vec::new();
    for (i, codes) in items.iter().enumerate() {
        let plan = ChunkPlan::fixed(codes.len() * fpc, chunk).stage("boundary comparison")?;
        let bounds = plan.boundaries();
        if bounds.is_empty() {
            return Err(CliError::Config(format!("item {i} fits in one chunk of {chunk} frames")));
        }
        let noise = ChunkNoise { seed: noise_seed + i as u64 };
        let ar = detok.detokenize_with_plan(codes, &plan, &noise).stage("boundary comparison")?;
        let ind = detok.detokenize_independent(codes, &plan, &noise).stage("boundary comparison")?;
        out.push((
            boundary_discontinuity(&ar, &bounds, reference).stage("boundary comparison")?,
            boundary_discontinuity(&ind, &bounds, reference).stage("boundary comparison")?,
        ));
    }
    let wins = out.iter().filter(|(a, b)| a <= b).count();
    Ok(BoundaryComparison { reference, chunk_frames: chunk, fraction: wins as f64 / out.len().max(1) as f64, items: out, wins })
}

/// Held-out sessions from the corpus generator under `seed`, tokenized by `codec`.
pub fn held_out_items(config: &PipelineConfig, codec: &Codec, seed: u64, count: usize) -> Result<Vec<Vec<u32>>> {
    let spec = SynthSpec { seed, num_sessions: count, ..config.corpus.clone() };
    let corpus = store::recode_corpus(&synth_corpus(&spec).stage("held-out items")?, codec)?;
    Ok(corpus.stage2.iter().take(count).map(|s| s.turns.iter().flat_map(|t| t.codes.iter().copied()).collect()).collect())
}

/// Runs every check against the trained checkpoints and writes `eval_report.json`.
pub fn evaluate(config: &PipelineConfig, tamper_mask: bool) -> Result<EvalReport> {
    let layout = Layout::new(config);
    let codec = store::load_codec(&layout)?;
    let detok = store::load_detok(&layout)?;
    let corpus = store::load_corpus(&layout)?;
    let e = &config.eval;
    let mut criteria = Vec::new();

    let worst = path_derivative_error(e.path_samples, detok.config.flow.sigma_min, config.seeds.noise);
    criteria.push(Criterion {
        id: "path_derivative",
        pass: worst <= PATH_REL_TOL,
        value: worst,
        threshold: PATH_REL_TOL,
        detail: format!("{} random draws, worst relative error {worst:.3e}", e.path_samples),
    });

    let gaps = mask_equivalence(&detok, &MASK_CHUNK_COUNTS, config.seeds.noise, tamper_mask)?;
    let gap = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    criteria.push(Criterion {
        id: "mask_equivalence",
        pass: gap <= MASK_MAX_ABS,
        value: gap,
        threshold: MASK_MAX_ABS,
        detail: gaps.iter().map(|(n, g)| format!("N={n}: {g:.2e}")).collect::<Vec<_>>().join(", "),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.sampling);
    let row: Vec<f64> = (0..40).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
    let (z, outside) = sampler_check(&row, &config.sampler, e.sampler_draws, config.seeds.sampling)?;
    criteria.push(Criterion {
        id: "sampler_statistics",
        pass: z <= 3.0 && outside == 0,
        value: z,
        threshold: 3.0,
        detail: format!("{} draws, worst z {z:.2}, {outside} draws outside the top-k/top-p support", e.sampler_draws),
    });

    let items = held_out_items(config, &codec, e.item_seed, e.items)?;
    let chunk_frames = (e.chunk_seconds * detok.config.flow.frame_rate_hz).round() as usize;
    let frames: Vec<_> = store::session_pairs(&corpus).into_iter().map(|(_, f)| f.frames).collect();
    let reference = median_adjacent_distance(&frames).stage("boundary comparison")?;
    let cmp = boundary_comparison(&detok, &items, chunk_frames, reference, config.seeds.noise)?;
    criteria.push(Criterion {
        id: "boundary_comparison",
        pass: cmp.fraction >= e.min_win_fraction,
        value: cmp.fraction,
        threshold: e.min_win_fraction,
        detail: format!(
            "streamed chunks no worse than independent on {}/{} items (chunk {} frames, reference {:.4})",
            cmp.wins,
            cmp.items.len(),
            cmp.chunk_frames,
            cmp.reference
        ),
    });

    let report = EvalReport { pass: criteria.iter().all(|c| c.pass), tampered_mask: tamper_mask, criteria };
    write_json(&layout.eval_report, &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_derivative_is_exact_for_a_linear_path() {
        assert!(path_derivative_error(200, 1e-4, 1) < 1e-8);
    }

    #[test]
    fn partial_plans_have_a_short_last_chunk() {
        assert_eq!(partial_plan(18, 4).unwrap().sizes(), vec![5, 5, 5, 3]);
        assert_eq!(partial_plan(5, 1).unwrap().sizes(), vec![5]);
    }

    #[test]
    fn sampler_check_accepts_its_own_target() {
        let row = [0.0, 1.0, 2.0, 3.0];
        let cfg = SamplerConfig { top_k: 3, top_p: 1.0, temperature: 1.0 };
        let (z, outside) = sampler_check(&row, &cfg, 20_000, 0).unwrap();
        assert!(z < 4.0 && outside == 0);
        let greedy = sampler_check(&row, &SamplerConfig::greedy(), 1000, 0).unwrap();
        assert_eq!(greedy, (0.0, 0));
    }
}
