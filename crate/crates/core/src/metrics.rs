//! Overfitting metrics: latent Fisher divergence for concept-agnostic
//! drift, 2-Wasserstein distance between Gaussian fits for concept-specific
//! collapse, an exact small-scale transport oracle, mode coverage, and the
//! per-training-step curve driver.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::customization::{weights_with_token, Model, ResidualConceptEmbedding, ResidualSet};
use crate::denoiser::{DenoiserWeights, PromptSpec};
use crate::diffusion::{ddim_sample, q_sample, NoiseSchedule, SampleRun, SamplerConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::seeded_stream;
use crate::worlds::{Point2, PointSet};

pub const DEFAULT_COVERAGE_RADIUS: f64 = 0.45;
pub const DEFAULT_COVERAGE_QUORUM: usize = 5;

// ── Report types ────────────────────────────────────────────────────────

/// A single metric evaluation with enough context to reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub sample_count: usize,
    pub details: BTreeMap<String, String>,
}

impl MetricReport {
    fn new(metric: &str, value: f64, sample_count: usize) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::numeric(format!("{metric}: invalid value {value}")));
        }
        Ok(MetricReport {
            metric: metric.to_string(),
            value,
            sample_count,
            details: BTreeMap::new(),
        })
    }

    pub fn with_detail(mut self, key: &str, value: impl ToString) -> Self {
        self.details.insert(key.to_string(), value.to_string());
        self
    }
}

/// Gaussian summary of a point cloud.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub mean: Point2,
    pub cov: [[f64; 2]; 2],
}

// ── Gaussian fit ────────────────────────────────────────────────────────

/// Sample mean and unbiased sample covariance, symmetrized with
/// eigenvalues clamped at zero.
pub fn gaussian_fit(points: &PointSet) -> Result<MomentPair> {
    let n = points.len();
    if n < 2 {
        return Err(Error::contract("gaussian_fit needs at least 2 points"));
    }
    if !points.all_finite() {
        return Err(Error::numeric("gaussian_fit: non-finite point"));
    }
    let nf = n as f64;
    let mut mean = [0.0, 0.0];
    for p in &points.points {
        mean[0] += p[0];
        mean[1] += p[1];
    }
    mean[0] /= nf;
    mean[1] /= nf;

    let mut cxx = 0.0;
    let mut cxy = 0.0;
    let mut cyy = 0.0;
    for p in &points.points {
        let dx = p[0] - mean[0];
        let dy = p[1] - mean[1];
        cxx += dx * dx;
        cxy += dx * dy;
        cyy += dy * dy;
    }
    let denom = nf - 1.0;
    let cov = clamp_psd([[cxx / denom, cxy / denom], [cxy / denom, cyy / denom]]);
    Ok(MomentPair { mean, cov })
}

// ── 2x2 symmetric eigen machinery ───────────────────────────────────────

/// Eigendecomposition of a symmetric 2x2 matrix: eigenvalues descending
/// with orthonormal eigenvectors.
fn sym_eigen(m: [[f64; 2]; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
    let (a, b, c) = (m[0][0], m[0][1], m[1][1]);
    if b.abs() < 1e-300 {
        if a >= c {
            return ([a, c], [[1.0, 0.0], [0.0, 1.0]]);
        }
        return ([c, a], [[0.0, 1.0], [1.0, 0.0]]);
    }
    let half_trace = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let l1 = half_trace + disc;
    let l2 = half_trace - disc;
    // Eigenvector for l1: (b, l1 - a), normalized.
    let v1 = normalize([b, l1 - a]);
    let v2 = [-v1[1], v1[0]];
    ([l1, l2], [v1, v2])
}

fn normalize(v: [f64; 2]) -> [f64; 2] {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    [v[0] / n, v[1] / n]
}

fn reconstruct(eigs: [f64; 2], vecs: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for (l, v) in eigs.iter().zip(vecs.iter()) {
        out[0][0] += l * v[0] * v[0];
        out[0][1] += l * v[0] * v[1];
        out[1][0] += l * v[1] * v[0];
        out[1][1] += l * v[1] * v[1];
    }
    out
}

fn clamp_psd(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let sym = [[m[0][0], 0.5 * (m[0][1] + m[1][0])], [0.5 * (m[0][1] + m[1][0]), m[1][1]]];
    let (eigs, vecs) = sym_eigen(sym);
    if eigs[0] >= 0.0 && eigs[1] >= 0.0 {
        return sym;
    }
    reconstruct([eigs[0].max(0.0), eigs[1].max(0.0)], vecs)
}

/// Principal square root of a symmetric PSD 2x2 matrix, eigenvalues
/// clamped at zero before rooting.
fn sym_sqrt(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let (eigs, vecs) = sym_eigen(m);
    reconstruct([eigs[0].max(0.0).sqrt(), eigs[1].max(0.0).sqrt()], vecs)
}

fn mat_mul2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

// ── Closed-form Wasserstein ─────────────────────────────────────────────

/// Closed-form 2-Wasserstein distance between Gaussians:
/// `W2^2 = ||mu1-mu2||^2 + tr(S1 + S2 - 2 (S2^1/2 S1 S2^1/2)^1/2)`.
pub fn w2_gaussian(g1: &MomentPair, g2: &MomentPair) -> Result<MetricReport> {
    for g in [g1, g2] {
        for v in [g.mean[0], g.mean[1], g.cov[0][0], g.cov[0][1], g.cov[1][0], g.cov[1][1]] {
            if !v.is_finite() {
                return Err(Error::numeric("w2_gaussian: non-finite moments"));
            }
        }
    }
    let dm = [g1.mean[0] - g2.mean[0], g1.mean[1] - g2.mean[1]];
    let mean_term = dm[0] * dm[0] + dm[1] * dm[1];

    let s2_half = sym_sqrt(clamp_psd(g2.cov));
    let inner = mat_mul2(mat_mul2(s2_half, clamp_psd(g1.cov)), s2_half);
    let cross = sym_sqrt(clamp_psd(inner));
    let trace_term = g1.cov[0][0] + g1.cov[1][1] + g2.cov[0][0] + g2.cov[1][1]
        - 2.0 * (cross[0][0] + cross[1][1]);
    let w2 = (mean_term + trace_term.max(0.0)).sqrt();
    MetricReport::new("w2_gaussian", w2, 0)
}

// ── Exact transport oracle ──────────────────────────────────────────────

const ORACLE_MAX_POINTS: usize = 256;

/// Exact discrete 2-Wasserstein via minimum-cost perfect matching on
/// squared Euclidean costs. Independent of the closed form; capped at
/// small instance sizes where the O(n^3) assignment solve is instant.
pub fn w2_empirical_oracle(a: &PointSet, b: &PointSet) -> Result<MetricReport> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "w2_empirical_oracle: sizes differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() || a.len() > ORACLE_MAX_POINTS {
        return Err(Error::contract(format!(
            "w2_empirical_oracle: size must be in [1, {ORACLE_MAX_POINTS}]"
        )));
    }
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for (i, pa) in a.points.iter().enumerate() {
        for (j, pb) in b.points.iter().enumerate() {
            let dx = pa[0] - pb[0];
            let dy = pa[1] - pb[1];
            cost[i * n + j] = dx * dx + dy * dy;
        }
    }
    let assignment = min_cost_assignment(&cost, n);
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(row, &col)| cost[row * n + col])
        .sum();
    let w2 = (total / n as f64).sqrt();
    Ok(MetricReport::new("w2_empirical_oracle", w2, n)?)
}

/// Minimum-cost perfect matching on an n x n cost matrix via shortest
/// augmenting paths with dual potentials. Returns, for each row, its
/// assigned column.
fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    // 1-based internally; potentials u (rows), v (columns).
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // column -> row
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[matched_row[j] - 1] = j - 1;
    }
    row_to_col
}

// ── Latent Fisher divergence ────────────────────────────────────────────

/// Half the mean squared difference between two models' noise predictions
/// over shared `(z_t, t, prompt)` draws built from held-out latents and
/// non-customized prompts. Zero iff the predictors agree on every draw.
pub fn latent_fisher_divergence<R: Rng>(
    theta: &Model,
    theta_prime: &Model,
    eval_latents: &PointSet,
    prompts: &[PromptSpec],
    sched: &NoiseSchedule,
    n_t: usize,
    rng: &mut R,
) -> Result<MetricReport> {
    if n_t == 0 {
        return Err(Error::contract("latent_fisher_divergence: n_t must be >= 1"));
    }
    if eval_latents.is_empty() || prompts.is_empty() {
        return Err(Error::contract("latent_fisher_divergence: empty evaluation set"));
    }
    for p in prompts {
        if !p.concept_slots().is_empty() {
            return Err(Error::contract(
                "latent_fisher_divergence is defined over non-customized prompts only",
            ));
        }
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (i, &z0) in eval_latents.points.iter().enumerate() {
        let prompt = &prompts[i % prompts.len()];
        for _ in 0..n_t {
            let t = rng.random_range(1..=sched.t_train());
            let eps = [StandardNormal.sample(rng), StandardNormal.sample(rng)];
            let z_t = q_sample(z0, t, eps, sched)?;
            let ea = theta.eps(z_t, t, prompt)?;
            let eb = theta_prime.eps(z_t, t, prompt)?;
            let d = [ea[0] - eb[0], ea[1] - eb[1]];
            acc += d[0] * d[0] + d[1] * d[1];
            count += 1;
        }
    }
    let value = 0.5 * acc / count as f64;
    Ok(MetricReport::new("latent_fisher_divergence", value, count)?
        .with_detail("n_t", n_t)
        .with_detail("latents", eval_latents.len())
        .with_detail("prompts", prompts.len()))
}

// ── Mode coverage ───────────────────────────────────────────────────────

/// Fraction of modality centers with at least `quorum` points within
/// `radius`.
pub fn mode_coverage(
    points: &PointSet,
    centers: &[Point2],
    radius: f64,
    quorum: usize,
) -> Result<f64> {
    if radius <= 0.0 {
        return Err(Error::contract("mode_coverage: radius must be > 0"));
    }
    if centers.is_empty() {
        return Err(Error::contract("mode_coverage: centers must be non-empty"));
    }
    let r2 = radius * radius;
    let covered = centers
        .iter()
        .filter(|c| {
            let hits = points
                .points
                .iter()
                .filter(|p| {
                    let dx = p[0] - c[0];
                    let dy = p[1] - c[1];
                    dx * dx + dy * dy <= r2
                })
                .count();
            hits >= quorum.max(1)
        })
        .count();
    Ok(covered as f64 / centers.len() as f64)
}

// ── Overfitting curves ──────────────────────────────────────────────────

/// One evaluated checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Score drift on non-customized prompts; absent when the world has no
    /// non-customized prompts configured.
    pub fisher: Option<f64>,
    pub w2: f64,
    pub coverage: f64,
}

/// Metric-vs-training-step series for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub method: String,
    pub points: Vec<CurvePoint>,
}

impl CurveSeries {
    pub fn validate(&self) -> Result<()> {
        for pair in self.points.windows(2) {
            if pair[1].step <= pair[0].step {
                return Err(Error::contract("curve steps must strictly increase"));
            }
        }
        Ok(())
    }
}

/// Checkpointed artifacts of one customization method, ready for curve
/// evaluation.
pub enum MethodCheckpoints<'a> {
    Infusion(&'a [(usize, ResidualConceptEmbedding)]),
    FullFinetune(&'a [(usize, DenoiserWeights)]),
    TokenInversion { checkpoints: &'a [(usize, Tensor)], placeholder: &'a str },
}

impl MethodCheckpoints<'_> {
    fn method_name(&self) -> &'static str {
        match self {
            MethodCheckpoints::Infusion(_) => "infusion",
            MethodCheckpoints::FullFinetune(_) => "full-finetune",
            MethodCheckpoints::TokenInversion { .. } => "token-inversion",
        }
    }

    fn steps(&self) -> Vec<usize> {
        match self {
            MethodCheckpoints::Infusion(c) => c.iter().map(|(s, _)| *s).collect(),
            MethodCheckpoints::FullFinetune(c) => c.iter().map(|(s, _)| *s).collect(),
            MethodCheckpoints::TokenInversion { checkpoints, .. } => {
                checkpoints.iter().map(|(s, _)| *s).collect()
            }
        }
    }
}

/// Everything the curve evaluation needs besides the checkpoints.
#[derive(Clone, Debug)]
pub struct EvalConfig {
    /// Held-out latents for the Fisher metric, paired round-robin with
    /// `noncustomized_prompts`.
    pub fisher_latents: PointSet,
    pub noncustomized_prompts: Vec<PromptSpec>,
    pub fisher_timesteps: usize,
    /// Prompt used to sample the customized distribution.
    pub customized_prompt: PromptSpec,
    pub sample_count: usize,
    pub sampler: SamplerConfig,
    /// Modality centers of the customized concept's world distribution.
    pub centers: Vec<Point2>,
    pub coverage_radius: f64,
    pub coverage_quorum: usize,
    pub seed: u64,
}

const STREAM_FISHER: u64 = 101;
const STREAM_SAMPLE: u64 = 102;

fn sample_for_eval(
    run: &SampleRun,
    sched: &NoiseSchedule,
    cfg: &EvalConfig,
) -> Result<PointSet> {
    // Fresh stream per call: every checkpoint sees identical chains.
    let mut rng = seeded_stream(cfg.seed, STREAM_SAMPLE);
    Ok(ddim_sample(run, sched, &cfg.sampler, cfg.sample_count, &mut rng)?.0)
}

fn eval_checkpoint(
    base: &DenoiserWeights,
    sched: &NoiseSchedule,
    cfg: &EvalConfig,
    reference: &MomentPair,
    model_weights: &DenoiserWeights,
    residuals: Option<&ResidualSet>,
    prompt: &PromptSpec,
) -> Result<(Option<f64>, f64, f64)> {
    let model = match residuals {
        Some(set) => Model::Infused { base: model_weights, residuals: set },
        None => Model::Plain(model_weights),
    };

    let fisher = if cfg.noncustomized_prompts.is_empty() {
        None
    } else {
        let mut rng = seeded_stream(cfg.seed, STREAM_FISHER);
        let report = latent_fisher_divergence(
            &Model::Plain(base),
            &model,
            &cfg.fisher_latents,
            &cfg.noncustomized_prompts,
            sched,
            cfg.fisher_timesteps,
            &mut rng,
        )?;
        Some(report.value)
    };

    let run = SampleRun {
        weights: model_weights,
        prompt,
        residuals,
        dual_stream: residuals.is_some(),
        inject_mask: None,
        log_traces: false,
    };
    let samples = sample_for_eval(&run, sched, cfg)?;
    let fit = gaussian_fit(&samples)?;
    let w2 = w2_gaussian(&fit, reference)?.value;
    let coverage = mode_coverage(&samples, &cfg.centers, cfg.coverage_radius, cfg.coverage_quorum)?;
    Ok((fisher, w2, coverage))
}

/// Evaluate every checkpoint of every method: Fisher divergence against the
/// base on non-customized prompts, Wasserstein distance of customized
/// samples against the base distribution under the same prompt, and mode
/// coverage. Deterministic: all evaluation draws derive from `cfg.seed`.
pub fn overfitting_curves(
    base: &DenoiserWeights,
    sched: &NoiseSchedule,
    methods: &[MethodCheckpoints],
    cfg: &EvalConfig,
) -> Result<Vec<CurveSeries>> {
    cfg.sampler.validate(sched)?;
    // Reference distribution: the base model sampled under the plain
    // (slot-free) version of the customized prompt.
    let ref_prompt = PromptSpec::new(cfg.customized_prompt.tokens().to_vec(), Vec::new())?;
    let ref_samples = sample_for_eval(&SampleRun::plain(base, &ref_prompt), sched, cfg)?;
    let reference = gaussian_fit(&ref_samples)?;

    let base_fp = base.fingerprint();
    let mut series = Vec::with_capacity(methods.len());
    for method in methods {
        let mut points = Vec::new();
        match method {
            MethodCheckpoints::Infusion(checkpoints) => {
                for (step, emb) in checkpoints.iter() {
                    if emb.base_fingerprint != base_fp {
                        return Err(Error::contract(
                            "infusion checkpoint fingerprint does not match the base",
                        ));
                    }
                    let set = ResidualSet::single(emb.clone())?;
                    let (fisher, w2, coverage) = eval_checkpoint(
                        base,
                        sched,
                        cfg,
                        &reference,
                        base,
                        Some(&set),
                        &cfg.customized_prompt,
                    )?;
                    points.push(CurvePoint { step: *step, fisher, w2, coverage });
                }
            }
            MethodCheckpoints::FullFinetune(checkpoints) => {
                for (step, weights) in checkpoints.iter() {
                    let (fisher, w2, coverage) = eval_checkpoint(
                        base,
                        sched,
                        cfg,
                        &reference,
                        weights,
                        None,
                        &cfg.customized_prompt,
                    )?;
                    points.push(CurvePoint { step: *step, fisher, w2, coverage });
                }
            }
            MethodCheckpoints::TokenInversion { checkpoints, placeholder } => {
                for (step, embedding) in checkpoints.iter() {
                    let weights = weights_with_token(base, placeholder, embedding)?;
                    let prompt = PromptSpec::new(
                        vec![crate::denoiser::PHOTO_OF.to_string(), placeholder.to_string()],
                        Vec::new(),
                    )?;
                    let (fisher, w2, coverage) =
                        eval_checkpoint(base, sched, cfg, &reference, &weights, None, &prompt)?;
                    points.push(CurvePoint { step: *step, fisher, w2, coverage });
                }
            }
        }
        let s = CurveSeries { method: method.method_name().to_string(), points };
        s.validate()?;
        series.push(s);
        let _ = method.steps();
    }
    Ok(series)
}

/// Fixed-column CSV rendering: method,step,fisher,w2,coverage.
pub fn curves_to_csv(series: &[CurveSeries]) -> String {
    let mut out = String::from("method,step,fisher,w2,coverage\n");
    for s in series {
        for p in &s.points {
            let fisher = p.fisher.map(|f| f.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", s.method, p.step, fisher, p.w2, p.coverage));
        }
    }
    out
}
