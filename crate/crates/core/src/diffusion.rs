//! Noise schedule, denoising objective, base-model training, and the DDIM
//! sampler with classifier-free guidance. The sampler optionally runs in
//! dual-stream mode: a foundational pass captures attention maps at each
//! step and a customized pass consumes them with residuals applied.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::customization::{ResidualSet};
use crate::denoiser::{
    denoise_forward, drop_condition, forward_on_tape, AttentionTrace, DenoiserConfig,
    DenoiserWeights, ForwardSpec, PromptSpec, ResidualBinding, WeightMode,
};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, OptimizerState, Tape, VarId};
use crate::numerics::tensor::Tensor;
use crate::rng::seeded_stream;
use crate::worlds::{sample_concept, ConceptWorld, Point2, PointSet};

// ── Schedule ────────────────────────────────────────────────────────────

/// Per-step variances and their cumulative products. `alpha_bar(0)` is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    t_train: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear beta ramp from `beta_start` to `beta_end` over `t_train` steps.
pub fn make_schedule(t_train: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(Error::contract("t_train must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::contract(format!(
            "beta bounds violated: 0 < {beta_start} <= {beta_end} < 1 required"
        )));
    }
    let mut beta = Vec::with_capacity(t_train);
    let mut alpha_bar = Vec::with_capacity(t_train + 1);
    alpha_bar.push(1.0);
    for i in 0..t_train {
        let b = if t_train == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64
        };
        beta.push(b);
        alpha_bar.push(alpha_bar[i] * (1.0 - b));
    }
    Ok(NoiseSchedule { t_train, beta, alpha_bar })
}

impl NoiseSchedule {
    /// The standard 1000-step linear schedule.
    pub fn default_toy() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    /// Cumulative product up to step `t`; `t = 0` is 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
}

/// Forward perturbation `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(z0: Point2, t: usize, eps: Point2, sched: &NoiseSchedule) -> Result<Point2> {
    if t == 0 || t > sched.t_train() {
        return Err(Error::contract(format!(
            "q_sample: t {t} out of range [1, {}]",
            sched.t_train()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok([sa * z0[0] + sn * eps[0], sa * z0[1] + sn * eps[1]])
}

// ── Configs ─────────────────────────────────────────────────────────────

/// DDIM sampler settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
}

impl SamplerConfig {
    /// Toy default: 50 steps, mild guidance, deterministic.
    pub fn toy() -> Self {
        SamplerConfig { steps: 50, guidance_scale: 2.0, eta: 0.0 }
    }

    /// The SD-scale settings recorded for reference: 50 steps, scale 8.
    pub fn paper_sd15() -> Self {
        SamplerConfig { steps: 50, guidance_scale: 8.0, eta: 0.0 }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.t_train() {
            return Err(Error::contract(format!(
                "sampler steps {} not in [1, {}]",
                self.steps,
                sched.t_train()
            )));
        }
        if self.guidance_scale < 0.0 {
            return Err(Error::contract("guidance scale must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::contract("eta must be in [0,1]"));
        }
        Ok(())
    }
}

/// Optimization settings shared by base training and customization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_uncond: f64,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    /// Base-model training on abundant toy data.
    pub fn toy_base() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 32,
            lr: 1e-3,
            p_uncond: 0.1,
            seed: 0,
            checkpoint_every: None,
        }
    }

    /// Customization runs: the reference learning rate 0.01 with
    /// checkpoints every 100 steps for the overfitting curves.
    pub fn toy_customization() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            lr: 0.01,
            p_uncond: 0.1,
            seed: 0,
            checkpoint_every: Some(100),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be >= 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::contract("lr must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::contract("p_uncond must be in [0,1]"));
        }
        Ok(())
    }
}

// ── Loss ────────────────────────────────────────────────────────────────

/// One training example after noise injection and condition dropping.
pub(crate) struct LossElement {
    pub z_t: Point2,
    pub t: usize,
    pub prompt: PromptSpec,
    pub eps: Point2,
    pub injected: Option<AttentionTrace>,
}

/// Draw (t, eps, dropped prompt) per batch point and diffuse it.
pub(crate) fn draw_loss_elements<R: Rng>(
    batch: &PointSet,
    prompt: &PromptSpec,
    sched: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut R,
) -> Result<Vec<LossElement>> {
    let mut elements = Vec::with_capacity(batch.len());
    for &z0 in &batch.points {
        let t = rng.random_range(1..=sched.t_train());
        let eps = [StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let prompt_e = drop_condition(prompt, p_uncond, rng)?;
        let z_t = q_sample(z0, t, eps, sched)?;
        elements.push(LossElement { z_t, t, prompt: prompt_e, eps, injected: None });
    }
    Ok(elements)
}

/// Mean over elements of the squared prediction error, built on a tape.
pub(crate) fn batch_loss_on_tape(
    tape: &mut Tape,
    weights: &DenoiserWeights,
    mode: WeightMode,
    residuals: Option<&ResidualBinding>,
    inject_mask: Option<&[bool]>,
    elements: &[LossElement],
) -> Result<VarId> {
    if elements.is_empty() {
        return Err(Error::contract("loss batch must be non-empty"));
    }
    let mut total: Option<VarId> = None;
    for el in elements {
        let spec = ForwardSpec {
            weights,
            mode,
            residuals,
            injected: el.injected.as_ref(),
            inject_mask,
        };
        let out = forward_on_tape(tape, &spec, el.z_t, el.t, &el.prompt)?;
        let target = tape.input(Tensor::row_vector(vec![el.eps[0], el.eps[1]]));
        let diff = tape.sub(out.eps, target)?;
        let sq = tape.sum_squares(diff);
        total = Some(match total {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }
    Ok(tape.scale(total.expect("non-empty batch"), 1.0 / elements.len() as f64))
}

/// The denoising objective: mean over the batch of `||eps - eps_hat||^2`
/// with uniform timesteps, Gaussian noise, and condition dropping.
pub fn diffusion_loss<R: Rng>(
    batch: &PointSet,
    prompt: &PromptSpec,
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("diffusion_loss: empty batch"));
    }
    let elements = draw_loss_elements(batch, prompt, sched, p_uncond, rng)?;
    let mut tape = Tape::new();
    let loss = batch_loss_on_tape(&mut tape, weights, WeightMode::Frozen, None, None, &elements)?;
    tape.value(loss).scalar_value()
}

// ── Base training ───────────────────────────────────────────────────────

/// Trained base model plus its loss curve and optional interval checkpoints.
pub struct BaseTrainRun {
    pub weights: DenoiserWeights,
    /// Loss at every step, in step order.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<(usize, DenoiserWeights)>,
}

/// Train the denoiser on concept-conditioned batches from a world.
pub fn train_base(
    world: &ConceptWorld,
    sched: &NoiseSchedule,
    net: DenoiserConfig,
    cfg: &TrainConfig,
) -> Result<BaseTrainRun> {
    cfg.validate()?;
    let vocab = DenoiserWeights::vocab_for_world(world);
    let vocab_refs: Vec<&str> = vocab.iter().map(|s| s.as_str()).collect();
    let mut weights = DenoiserWeights::init(net, &vocab_refs, cfg.seed)?;

    let concepts: Vec<String> = world.concept_tokens().map(|s| s.to_string()).collect();
    let mut rng = seeded_stream(cfg.seed, 1);
    let mut opt = OptimizerState::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();

    for step in 1..=cfg.steps {
        let concept = &concepts[rng.random_range(0..concepts.len())];
        let batch = sample_concept(world, concept, cfg.batch_size, &mut rng)?;
        let prompt = PromptSpec::photo_of(concept);
        let elements = draw_loss_elements(&batch, &prompt, sched, cfg.p_uncond, &mut rng)?;

        let mut tape = Tape::new();
        let loss_var = batch_loss_on_tape(
            &mut tape,
            &weights,
            WeightMode::TrainAll,
            None,
            None,
            &elements,
        )?;
        let loss = tape.value(loss_var).scalar_value()?;
        if !loss.is_finite() {
            return Err(Error::Training { step, detail: format!("loss {loss}") });
        }
        let grads = tape.backward(loss_var)?;
        adam_step(weights.params_mut(), &grads, &mut opt, cfg.lr)?;
        losses.push(loss);

        if let Some(every) = cfg.checkpoint_every {
            if every > 0 && step % every == 0 {
                checkpoints.push((step, weights.clone()));
            }
        }
    }
    Ok(BaseTrainRun { weights, losses, checkpoints })
}

// ── Sampling ────────────────────────────────────────────────────────────

/// What to sample and how. Dual-stream mode captures maps with a plain
/// foundational pass and injects them into the residual-carrying pass;
/// the customized prediction drives the trajectory.
pub struct SampleRun<'a> {
    pub weights: &'a DenoiserWeights,
    pub prompt: &'a PromptSpec,
    pub residuals: Option<&'a ResidualSet>,
    pub dual_stream: bool,
    pub inject_mask: Option<&'a [bool]>,
    pub log_traces: bool,
}

impl<'a> SampleRun<'a> {
    pub fn plain(weights: &'a DenoiserWeights, prompt: &'a PromptSpec) -> Self {
        SampleRun {
            weights,
            prompt,
            residuals: None,
            dual_stream: false,
            inject_mask: None,
            log_traces: false,
        }
    }
}

/// Per-step record of one sampling chain.
#[derive(Clone, Debug)]
pub struct StepLog {
    pub t: usize,
    /// Latent before this step's update.
    pub z: Point2,
    /// Guided prediction that drove the update.
    pub eps_tilde: Point2,
    /// Trace of the conditional pass: the foundational pipeline's maps in
    /// dual-stream mode, the native maps otherwise.
    pub cond_trace: AttentionTrace,
}

#[derive(Clone, Debug, Default)]
pub struct SampleLog {
    pub chains: Vec<Vec<StepLog>>,
}

/// DDIM sampling with classifier-free guidance
/// `eps~ = eps(null) + s (eps(c) - eps(null))`.
pub fn ddim_sample(
    run: &SampleRun,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(PointSet, Option<SampleLog>)> {
    sampler.validate(sched)?;
    if n == 0 {
        return Err(Error::contract("ddim_sample: n must be >= 1"));
    }
    if run.dual_stream && run.residuals.is_none() {
        return Err(Error::contract("dual_stream sampling requires residuals"));
    }

    let ratio = sched.t_train() / sampler.steps;
    let timesteps: Vec<usize> = (0..sampler.steps).map(|i| i * ratio + 1).rev().collect();
    let null_prompt = PromptSpec::null(run.prompt.len());
    let s = sampler.guidance_scale;

    let mut points = Vec::with_capacity(n);
    let mut log = if run.log_traces { Some(SampleLog::default()) } else { None };

    for _ in 0..n {
        let mut z: Point2 = [StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let mut chain_log = Vec::new();

        for (idx, &t) in timesteps.iter().enumerate() {
            let t_prev = if idx + 1 < timesteps.len() { timesteps[idx + 1] } else { 0 };

            // Unconditional pass; residuals cannot attach to a null prompt.
            let (eps_uncond, _) =
                denoise_forward(run.weights, z, t, &null_prompt, None, None, None)?;

            // Conditional pass, possibly dual-stream.
            let (eps_cond, cond_trace) = if run.prompt.is_null() {
                (eps_uncond, None)
            } else if run.dual_stream {
                let (_, trace) = denoise_forward(run.weights, z, t, run.prompt, None, None, None)?;
                let (eps_c, _) = denoise_forward(
                    run.weights,
                    z,
                    t,
                    run.prompt,
                    run.residuals,
                    Some(&trace),
                    run.inject_mask,
                )?;
                (eps_c, Some(trace))
            } else {
                let (eps_c, trace) =
                    denoise_forward(run.weights, z, t, run.prompt, run.residuals, None, None)?;
                (eps_c, Some(trace))
            };

            let eps_tilde = [
                eps_uncond[0] + s * (eps_cond[0] - eps_uncond[0]),
                eps_uncond[1] + s * (eps_cond[1] - eps_uncond[1]),
            ];

            if run.log_traces {
                let trace = cond_trace.clone().unwrap_or_else(|| AttentionTrace {
                    maps: Vec::new(),
                    t,
                    prompt: null_prompt.clone(),
                });
                chain_log.push(StepLog { t, z, eps_tilde, cond_trace: trace });
            }

            let ab_t = sched.alpha_bar(t);
            let ab_prev = sched.alpha_bar(t_prev);
            let z0_hat = [
                (z[0] - (1.0 - ab_t).sqrt() * eps_tilde[0]) / ab_t.sqrt(),
                (z[1] - (1.0 - ab_t).sqrt() * eps_tilde[1]) / ab_t.sqrt(),
            ];
            let sigma = if sampler.eta > 0.0 && t_prev > 0 {
                sampler.eta
                    * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
                    * (1.0 - ab_t / ab_prev).sqrt()
            } else {
                0.0
            };
            let dir_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
            z = [
                ab_prev.sqrt() * z0_hat[0] + dir_coeff * eps_tilde[0],
                ab_prev.sqrt() * z0_hat[1] + dir_coeff * eps_tilde[1],
            ];
            if sigma > 0.0 {
                let n0: f64 = StandardNormal.sample(rng);
                let n1: f64 = StandardNormal.sample(rng);
                z = [z[0] + sigma * n0, z[1] + sigma * n1];
            }
            if !z[0].is_finite() || !z[1].is_finite() {
                return Err(Error::numeric(format!("ddim_sample: non-finite latent at t={t}")));
            }
        }
        points.push(z);
        if let Some(log) = log.as_mut() {
            log.chains.push(chain_log);
        }
    }
    Ok((PointSet::new(points, "ddim"), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::ParamSet;
    use crate::worlds::build_four_peak_world;

    fn tiny_weights(seed: u64) -> DenoiserWeights {
        let world = build_four_peak_world();
        let vocab = DenoiserWeights::vocab_for_world(&world);
        let vocab_refs: Vec<&str> = vocab.iter().map(|s| s.as_str()).collect();
        DenoiserWeights::init(DenoiserConfig::default(), &vocab_refs, seed).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_monotone_and_small_tail() {
        let s = NoiseSchedule::default_toy();
        for t in 1..=s.t_train() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(s.t_train()) < 1e-4);
    }

    #[test]
    fn schedule_bounds_checked() {
        assert!(make_schedule(10, 0.02, 0.0001).is_err());
        assert!(make_schedule(10, 0.0, 0.5).is_err());
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn q_sample_low_noise_limit() {
        let s = make_schedule(10, 1e-6, 1e-6).unwrap();
        let z = q_sample([1.0, -2.0], 1, [0.3, 0.7], &s).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-3);
        assert!((z[1] + 2.0).abs() < 1e-3);
    }

    #[test]
    fn q_sample_origin_is_scaled_noise() {
        let s = NoiseSchedule::default_toy();
        let t = 600;
        let eps = [0.25, -1.5];
        let z = q_sample([0.0, 0.0], t, eps, &s).unwrap();
        let sn = (1.0 - s.alpha_bar(t)).sqrt();
        assert_eq!(z, [sn * eps[0], sn * eps[1]]);
    }

    #[test]
    fn q_sample_mean_matches_moment() {
        let s = NoiseSchedule::default_toy();
        let t = 300;
        let z0 = [1.5, -0.5];
        let mut rng = seeded_stream(3, 0);
        let n = 10_000;
        let mut mean = [0.0, 0.0];
        for _ in 0..n {
            let eps = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            let z = q_sample(z0, t, eps, &s).unwrap();
            mean[0] += z[0] / n as f64;
            mean[1] += z[1] / n as f64;
        }
        let ab = s.alpha_bar(t);
        let tol = 4.0 * ((1.0 - ab) / n as f64).sqrt();
        assert!((mean[0] - ab.sqrt() * z0[0]).abs() < tol);
        assert!((mean[1] - ab.sqrt() * z0[1]).abs() < tol);
    }

    #[test]
    fn q_sample_range_checked() {
        let s = NoiseSchedule::default_toy();
        assert!(q_sample([0.0, 0.0], 0, [0.0, 0.0], &s).is_err());
        assert!(q_sample([0.0, 0.0], 1001, [0.0, 0.0], &s).is_err());
    }

    #[test]
    fn zero_denoiser_loss_near_two() {
        // eps_hat == 0 makes the objective E||eps||^2 = 2 for 2-D noise.
        let w = tiny_weights(0);
        let zeroed = ParamSet::from_iter(
            w.flat().iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec()))),
        );
        let w0 = DenoiserWeights::from_flat(w.config.clone(), zeroed).unwrap();
        let sched = NoiseSchedule::default_toy();
        let world = build_four_peak_world();
        let mut rng = seeded_stream(5, 0);
        let batch = sample_concept(&world, "A", 4000, &mut rng).unwrap();
        let loss =
            diffusion_loss(&batch, &PromptSpec::photo_of("A"), &w0, &sched, 0.1, &mut rng).unwrap();
        assert!((loss - 2.0).abs() / 2.0 < 0.05, "loss {loss}");
    }

    #[test]
    fn loss_is_seed_deterministic() {
        let w = tiny_weights(1);
        let sched = NoiseSchedule::default_toy();
        let world = build_four_peak_world();
        let eval = || {
            let mut rng = seeded_stream(9, 2);
            let batch = sample_concept(&world, "B", 16, &mut rng).unwrap();
            diffusion_loss(&batch, &PromptSpec::photo_of("B"), &w, &sched, 0.1, &mut rng).unwrap()
        };
        assert_eq!(eval().to_bits(), eval().to_bits());
    }

    #[test]
    fn loss_matches_per_element_recomputation() {
        let w = tiny_weights(2);
        let sched = NoiseSchedule::default_toy();
        let world = build_four_peak_world();
        let mut rng = seeded_stream(11, 0);
        let batch = sample_concept(&world, "C", 8, &mut rng).unwrap();
        let prompt = PromptSpec::photo_of("C");

        let mut rng_a = seeded_stream(13, 1);
        let loss = diffusion_loss(&batch, &prompt, &w, &sched, 0.1, &mut rng_a).unwrap();

        let mut rng_b = seeded_stream(13, 1);
        let elements = draw_loss_elements(&batch, &prompt, &sched, 0.1, &mut rng_b).unwrap();
        let mut total = 0.0;
        for el in &elements {
            let (eps_hat, _) = denoise_forward(&w, el.z_t, el.t, &el.prompt, None, None, None).unwrap();
            let d = [eps_hat[0] - el.eps[0], eps_hat[1] - el.eps[1]];
            total += d[0] * d[0] + d[1] * d[1];
        }
        let expected = total / elements.len() as f64;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn train_zero_steps_keeps_initialization() {
        let world = build_four_peak_world();
        let sched = NoiseSchedule::default_toy();
        let cfg = TrainConfig { steps: 0, ..TrainConfig::toy_base() };
        let run = train_base(&world, &sched, DenoiserConfig::default(), &cfg).unwrap();
        let vocab = DenoiserWeights::vocab_for_world(&world);
        let vocab_refs: Vec<&str> = vocab.iter().map(|s| s.as_str()).collect();
        let fresh = DenoiserWeights::init(DenoiserConfig::default(), &vocab_refs, cfg.seed).unwrap();
        assert_eq!(run.weights.fingerprint(), fresh.fingerprint());
        assert!(run.losses.is_empty());
    }

    #[test]
    fn train_is_seed_deterministic() {
        let world = build_four_peak_world();
        let sched = NoiseSchedule::default_toy();
        let cfg = TrainConfig { steps: 12, batch_size: 8, ..TrainConfig::toy_base() };
        let a = train_base(&world, &sched, DenoiserConfig::default(), &cfg).unwrap();
        let b = train_base(&world, &sched, DenoiserConfig::default(), &cfg).unwrap();
        assert_eq!(a.weights.fingerprint(), b.weights.fingerprint());
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn sampler_validation() {
        let sched = NoiseSchedule::default_toy();
        assert!(SamplerConfig { steps: 0, guidance_scale: 1.0, eta: 0.0 }.validate(&sched).is_err());
        assert!(SamplerConfig { steps: 2000, guidance_scale: 1.0, eta: 0.0 }.validate(&sched).is_err());
        assert!(SamplerConfig { steps: 50, guidance_scale: -1.0, eta: 0.0 }.validate(&sched).is_err());
        assert!(SamplerConfig { steps: 50, guidance_scale: 2.0, eta: 0.5 }.validate(&sched).is_ok());
    }

    #[test]
    fn null_prompt_guidance_collapses() {
        let w = tiny_weights(3);
        let sched = NoiseSchedule::default_toy();
        let null = PromptSpec::null(2);
        let sample_with = |scale: f64| {
            let sampler = SamplerConfig { steps: 10, guidance_scale: scale, eta: 0.0 };
            let run = SampleRun::plain(&w, &null);
            let mut rng = seeded_stream(21, 0);
            ddim_sample(&run, &sched, &sampler, 5, &mut rng).unwrap().0
        };
        assert_eq!(sample_with(8.0), sample_with(1.0));
    }

    #[test]
    fn eta_zero_sampling_is_deterministic() {
        let w = tiny_weights(4);
        let sched = NoiseSchedule::default_toy();
        let prompt = PromptSpec::photo_of("A");
        let go = || {
            let run = SampleRun::plain(&w, &prompt);
            let mut rng = seeded_stream(33, 0);
            ddim_sample(&run, &sched, &SamplerConfig::toy(), 7, &mut rng).unwrap().0
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn dual_stream_with_zero_residuals_matches_plain() {
        let w = tiny_weights(5);
        let sched = NoiseSchedule::default_toy();
        let prompt = PromptSpec::customized("A");
        let zero = ResidualSet::zeros_for("A", &w);

        let mut rng = seeded_stream(44, 0);
        let plain = ddim_sample(
            &SampleRun::plain(&w, &prompt),
            &sched,
            &SamplerConfig::toy(),
            6,
            &mut rng,
        )
        .unwrap()
        .0;

        let mut rng = seeded_stream(44, 0);
        let dual = ddim_sample(
            &SampleRun {
                weights: &w,
                prompt: &prompt,
                residuals: Some(&zero),
                dual_stream: true,
                inject_mask: None,
                log_traces: false,
            },
            &sched,
            &SamplerConfig::toy(),
            6,
            &mut rng,
        )
        .unwrap()
        .0;
        assert_eq!(plain, dual);
    }

    #[test]
    fn dual_stream_requires_residuals() {
        let w = tiny_weights(6);
        let sched = NoiseSchedule::default_toy();
        let prompt = PromptSpec::customized("A");
        let run = SampleRun { dual_stream: true, ..SampleRun::plain(&w, &prompt) };
        let mut rng = seeded_stream(0, 0);
        assert!(ddim_sample(&run, &sched, &SamplerConfig::toy(), 1, &mut rng).is_err());
    }

    #[test]
    fn dual_stream_f_traces_stay_pure() {
        // At every logged step, the captured foundational trace must equal a
        // plain forward at the same latent: residuals never leak upstream.
        let w = tiny_weights(7);
        let sched = NoiseSchedule::default_toy();
        let prompt = PromptSpec::customized("A");
        let mut rng = seeded_stream(55, 0);
        let set = ResidualSet::random_for("A", &w, &mut rng);
        let run = SampleRun {
            weights: &w,
            prompt: &prompt,
            residuals: Some(&set),
            dual_stream: true,
            inject_mask: None,
            log_traces: true,
        };
        let mut rng = seeded_stream(55, 1);
        let sampler = SamplerConfig { steps: 10, guidance_scale: 2.0, eta: 0.0 };
        let (_, log) = ddim_sample(&run, &sched, &sampler, 2, &mut rng).unwrap();
        let log = log.unwrap();
        assert_eq!(log.chains.len(), 2);
        for chain in &log.chains {
            for step in chain {
                let (_, plain_trace) =
                    denoise_forward(&w, step.z, step.t, &prompt, None, None, None).unwrap();
                assert_eq!(step.cond_trace.maps, plain_trace.maps);
            }
        }
    }
}
