//! Subcommand implementations for the experiment driver.

use std::path::{Path, PathBuf};

use infusion_core::customization::{
    train_full_finetune, train_infusion, train_token_inversion, Method, ResidualSet,
};
use infusion_core::denoiser::{DenoiserWeights, PromptSpec, PHOTO_OF};
use infusion_core::diffusion::{ddim_sample, train_base, BaseTrainRun, SampleRun};
use infusion_core::metrics::{
    curves_to_csv, gaussian_fit, mode_coverage, w2_gaussian, CurveSeries, EvalConfig,
    MethodCheckpoints, MetricReport,
};
use infusion_core::rng::seeded_stream;
use infusion_core::worlds::{sample_concept, sample_custom_target, ConceptWorld, PointSet};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, Payload};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::svg::{render_scatter_svg, Bounds, LayerStyle, PALETTE};
use crate::util::write_atomic;

/// RNG stream ids; every stage draws from (config-owned seed, stream).
mod streams {
    pub const TRAIN_DATA: u64 = 11;
    pub const FISHER_LATENTS: u64 = 12;
    pub const SAMPLE: u64 = 13;
}

pub fn gen_world(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let world = config.build_world()?;
    write_atomic(out, world.to_json().as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn loss_csv(config_hash: &str, losses: &[f64]) -> String {
    let mut csv = format!("# config={config_hash}\nstep,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, l));
    }
    csv
}

pub fn run_train_base(config: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let world = config.build_world()?;
    let sched = config.schedule.build()?;
    let hash = config.hash();
    let run: BaseTrainRun =
        train_base(&world, &sched, config.denoiser.clone(), &config.base_train)?;

    let base_path = out_dir.join("base.ckpt.json");
    save_checkpoint(
        &Checkpoint {
            kind: CheckpointKind::BaseWeights,
            step: config.base_train.steps,
            config_hash: hash.clone(),
            payload: Payload::Weights(run.weights.clone()),
        },
        &base_path,
    )?;
    write_atomic(&out_dir.join("base_loss.csv"), loss_csv(&hash, &run.losses).as_bytes())?;
    println!("wrote {}", base_path.display());
    Ok(base_path)
}

pub fn load_base_weights(path: &Path) -> Result<DenoiserWeights> {
    let ckpt = load_checkpoint(path)?;
    match ckpt.payload {
        Payload::Weights(w) => Ok(w),
        _ => Err(CliError::config(format!(
            "`{}` is not a weights checkpoint",
            path.display()
        ))),
    }
}

/// Training set for customization: the linear target on carrier modes.
pub fn customization_data(config: &ExperimentConfig, world: &ConceptWorld) -> Result<PointSet> {
    let target = config.target.build()?;
    let mut rng = seeded_stream(config.data_seed, streams::TRAIN_DATA);
    Ok(sample_custom_target(
        &target,
        world,
        &config.customized_concept,
        config.train_data_size,
        &mut rng,
    )?)
}

/// Artifacts of one customization method, in memory plus on disk.
pub enum MethodArtifacts {
    Infusion(Vec<(usize, infusion_core::customization::ResidualConceptEmbedding)>),
    FullFinetune(Vec<(usize, DenoiserWeights)>),
    TokenInversion(Vec<(usize, infusion_core::numerics::Tensor)>),
}

pub fn run_customize(
    config: &ExperimentConfig,
    method: Method,
    base: &DenoiserWeights,
    world: &ConceptWorld,
    out_dir: &Path,
) -> Result<MethodArtifacts> {
    let sched = config.schedule.build()?;
    let hash = config.hash();
    let data = customization_data(config, world)?;
    let concept = &config.customized_concept;
    let steps = config.custom_train.steps;

    match method {
        Method::Infusion => {
            let prompt = PromptSpec::customized(concept);
            let run = train_infusion(base, &data, &prompt, steps, &sched, &config.custom_train)?;
            write_atomic(
                &out_dir.join("infusion_loss.csv"),
                loss_csv(&hash, &run.losses).as_bytes(),
            )?;
            let (final_step, final_emb) = run.checkpoints.last().expect("has step 0").clone();
            save_checkpoint(
                &Checkpoint {
                    kind: CheckpointKind::Residual,
                    step: final_step,
                    config_hash: hash.clone(),
                    payload: Payload::Residual(final_emb),
                },
                &out_dir.join("residual.ckpt.json"),
            )?;
            Ok(MethodArtifacts::Infusion(run.checkpoints))
        }
        Method::FullFinetune => {
            let mut cfg = config.custom_train.clone();
            if let Some(lr) = config.finetune_lr {
                cfg.lr = lr;
            }
            let prompt = PromptSpec::customized(concept);
            let run = train_full_finetune(base, &data, &prompt, steps, &sched, &cfg)?;
            write_atomic(
                &out_dir.join("finetune_loss.csv"),
                loss_csv(&hash, &run.losses).as_bytes(),
            )?;
            let (final_step, final_w) = run.checkpoints.last().expect("has step 0").clone();
            save_checkpoint(
                &Checkpoint {
                    kind: CheckpointKind::FinetunedWeights,
                    step: final_step,
                    config_hash: hash.clone(),
                    payload: Payload::Weights(final_w),
                },
                &out_dir.join("finetuned.ckpt.json"),
            )?;
            Ok(MethodArtifacts::FullFinetune(run.checkpoints))
        }
        Method::TokenInversion => {
            let placeholder = &config.placeholder;
            let prompt = PromptSpec::new(
                vec![PHOTO_OF.to_string(), placeholder.clone()],
                vec![(1, placeholder.clone())],
            )?;
            let run = train_token_inversion(
                base,
                &data,
                placeholder,
                concept,
                &prompt,
                steps,
                &sched,
                &config.custom_train,
            )?;
            write_atomic(
                &out_dir.join("token_inversion_loss.csv"),
                loss_csv(&hash, &run.losses).as_bytes(),
            )?;
            let (final_step, final_emb) = run.checkpoints.last().expect("has step 0").clone();
            save_checkpoint(
                &Checkpoint {
                    kind: CheckpointKind::TokenEmbedding,
                    step: final_step,
                    config_hash: hash.clone(),
                    payload: Payload::TokenEmbedding {
                        token: placeholder.clone(),
                        base_fingerprint: base.fingerprint(),
                        embedding: final_emb,
                    },
                },
                &out_dir.join("token.ckpt.json"),
            )?;
            Ok(MethodArtifacts::TokenInversion(run.checkpoints))
        }
    }
}

/// Build the Fisher evaluation set: held-out latents from non-customized
/// concepts paired round-robin with their prompts. A single-concept world
/// has no non-customized concepts; the null condition stands in for them.
pub fn fisher_eval_set(
    world: &ConceptWorld,
    customized_concept: &str,
    n: usize,
    seed: u64,
) -> Result<(PointSet, Vec<PromptSpec>)> {
    let others: Vec<String> = world
        .concept_tokens()
        .filter(|c| *c != customized_concept)
        .map(|s| s.to_string())
        .collect();
    let mut rng = seeded_stream(seed, streams::FISHER_LATENTS);
    if others.is_empty() {
        let latents = sample_concept(world, customized_concept, n, &mut rng)?;
        return Ok((latents, vec![PromptSpec::null(2)]));
    }
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let concept = &others[i % others.len()];
        points.extend(sample_concept(world, concept, 1, &mut rng)?.points);
    }
    let prompts = others.iter().map(|c| PromptSpec::photo_of(c)).collect();
    Ok((PointSet::new(points, "fisher-eval"), prompts))
}

fn eval_config(config: &ExperimentConfig, world: &ConceptWorld) -> Result<EvalConfig> {
    let (latents, prompts) = fisher_eval_set(
        world,
        &config.customized_concept,
        config.eval.fisher_latents,
        config.eval.seed,
    )?;
    Ok(EvalConfig {
        fisher_latents: latents,
        noncustomized_prompts: prompts,
        fisher_timesteps: config.eval.fisher_timesteps,
        customized_prompt: PromptSpec::customized(&config.customized_concept),
        sample_count: config.eval.sample_count,
        sampler: config.sampler.clone(),
        centers: world.modality_centers(&config.customized_concept)?,
        coverage_radius: config.eval.coverage_radius,
        coverage_quorum: config.eval.coverage_quorum,
        seed: config.eval.seed,
    })
}

fn subsample_steps<T: Clone>(checkpoints: &[(usize, T)], keep: &[usize]) -> Vec<(usize, T)> {
    checkpoints
        .iter()
        .filter(|(s, _)| *s == 0 || keep.contains(s))
        .cloned()
        .collect()
}

/// Final samples per method for the scatter figure.
fn method_samples(
    config: &ExperimentConfig,
    base: &DenoiserWeights,
    artifacts: &MethodArtifacts,
    n: usize,
) -> Result<(String, PointSet)> {
    let sched = config.schedule.build()?;
    let prompt = PromptSpec::customized(&config.customized_concept);
    let mut rng = seeded_stream(config.eval.seed, streams::SAMPLE);
    match artifacts {
        MethodArtifacts::Infusion(ckpts) => {
            let set = ResidualSet::single(ckpts.last().unwrap().1.clone())?;
            let run = SampleRun {
                weights: base,
                prompt: &prompt,
                residuals: Some(&set),
                dual_stream: true,
                inject_mask: None,
                log_traces: false,
            };
            let (ps, _) = ddim_sample(&run, &sched, &config.sampler, n, &mut rng)?;
            Ok(("infusion".into(), ps))
        }
        MethodArtifacts::FullFinetune(ckpts) => {
            let weights = &ckpts.last().unwrap().1;
            let (ps, _) =
                ddim_sample(&SampleRun::plain(weights, &prompt), &sched, &config.sampler, n, &mut rng)?;
            Ok(("full-finetune".into(), ps))
        }
        MethodArtifacts::TokenInversion(ckpts) => {
            let weights = infusion_core::customization::weights_with_token(
                base,
                &config.placeholder,
                &ckpts.last().unwrap().1,
            )?;
            let tprompt = PromptSpec::new(
                vec![PHOTO_OF.to_string(), config.placeholder.clone()],
                vec![],
            )?;
            let (ps, _) =
                ddim_sample(&SampleRun::plain(&weights, &tprompt), &sched, &config.sampler, n, &mut rng)?;
            Ok(("token-inversion".into(), ps))
        }
    }
}

/// The full experiment: train (or load) the base, customize with every
/// configured method, evaluate the overfitting curves, and emit CSV, JSON,
/// and SVG artifacts stamped with the config hash.
pub fn run_curves(config: &ExperimentConfig, base_path: Option<&Path>, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let hash = config.hash();
    write_atomic(&out_dir.join("config.json"), config.to_json().as_bytes())?;

    let world = config.build_world()?;
    let sched = config.schedule.build()?;
    let base = match base_path {
        Some(p) => load_base_weights(p)?,
        None => {
            let p = run_train_base(config, out_dir)?;
            load_base_weights(&p)?
        }
    };

    let mut artifacts = Vec::new();
    for name in &config.methods {
        let method = Method::parse(name)?;
        artifacts.push(run_customize(config, method, &base, &world, out_dir)?);
    }

    let eval_cfg = eval_config(config, &world)?;
    let keep = &config.eval.curve_steps;
    let mut holders: Vec<MethodArtifacts> = Vec::new();
    for art in &artifacts {
        holders.push(match art {
            MethodArtifacts::Infusion(c) => MethodArtifacts::Infusion(subsample_steps(c, keep)),
            MethodArtifacts::FullFinetune(c) => {
                MethodArtifacts::FullFinetune(subsample_steps(c, keep))
            }
            MethodArtifacts::TokenInversion(c) => {
                MethodArtifacts::TokenInversion(subsample_steps(c, keep))
            }
        });
    }
    let method_checkpoints: Vec<MethodCheckpoints> = holders
        .iter()
        .map(|art| match art {
            MethodArtifacts::Infusion(c) => MethodCheckpoints::Infusion(c),
            MethodArtifacts::FullFinetune(c) => MethodCheckpoints::FullFinetune(c),
            MethodArtifacts::TokenInversion(c) => MethodCheckpoints::TokenInversion {
                checkpoints: c,
                placeholder: &config.placeholder,
            },
        })
        .collect();

    let series = infusion_core::metrics::overfitting_curves(&base, &sched, &method_checkpoints, &eval_cfg)?;

    let csv = format!("# config={hash}\n{}", curves_to_csv(&series));
    write_atomic(&out_dir.join("curves.csv"), csv.as_bytes())?;
    write_atomic(
        &out_dir.join("curves.json"),
        serde_json::to_string_pretty(&CurvesDoc { config_hash: hash.clone(), series: &series })
            .expect("series serialize")
            .as_bytes(),
    )?;

    // Scatter figure: base distribution, training data, per-method samples.
    let plain_prompt = PromptSpec::new(
        PromptSpec::customized(&config.customized_concept).tokens().to_vec(),
        vec![],
    )?;
    let mut rng = seeded_stream(config.eval.seed, streams::SAMPLE);
    let (base_ps, _) = ddim_sample(
        &SampleRun::plain(&base, &plain_prompt),
        &sched,
        &config.sampler,
        config.eval.sample_count,
        &mut rng,
    )?;
    let data = customization_data(config, &world)?;

    let mut sample_sets = vec![("base".to_string(), base_ps), ("target-data".to_string(), data)];
    for art in &artifacts {
        sample_sets.push(method_samples(config, &base, art, config.eval.sample_count)?);
    }
    for (name, ps) in &sample_sets {
        write_atomic(
            &out_dir.join(format!("samples_{name}.json")),
            serde_json::to_string_pretty(ps).expect("points serialize").as_bytes(),
        )?;
    }
    let layers: Vec<(&PointSet, LayerStyle)> = sample_sets
        .iter()
        .enumerate()
        .map(|(i, (name, ps))| {
            (ps, LayerStyle::new(name, PALETTE[i % PALETTE.len()]).clipped())
        })
        .collect();
    let svg = render_scatter_svg(&layers, Bounds::toy(), &hash)?;
    write_atomic(&out_dir.join("scatter.svg"), svg.as_bytes())?;

    println!("wrote curves.csv, curves.json, scatter.svg under {}", out_dir.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct CurvesDoc<'a> {
    config_hash: String,
    series: &'a [CurveSeries],
}

/// Sample from a base checkpoint, optionally with a customization
/// checkpoint applied; write the points (and optional SVG).
#[allow(clippy::too_many_arguments)]
pub fn run_sample(
    config: &ExperimentConfig,
    base_path: &Path,
    ckpt_path: Option<&Path>,
    n: usize,
    seed: u64,
    null_prompt: bool,
    out: &Path,
    svg_out: Option<&Path>,
) -> Result<()> {
    let sched = config.schedule.build()?;
    let base = load_base_weights(base_path)?;
    let hash = config.hash();
    let mut rng = seeded_stream(seed, streams::SAMPLE);

    let concept = &config.customized_concept;
    let ps = match ckpt_path {
        None => {
            let prompt = if null_prompt {
                PromptSpec::null(2)
            } else {
                PromptSpec::photo_of(concept)
            };
            ddim_sample(&SampleRun::plain(&base, &prompt), &sched, &config.sampler, n, &mut rng)?.0
        }
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            match ckpt.payload {
                Payload::Residual(emb) => {
                    emb.verify_base(&base)?;
                    let set = ResidualSet::single(emb)?;
                    let prompt = PromptSpec::customized(concept);
                    let run = SampleRun {
                        weights: &base,
                        prompt: &prompt,
                        residuals: Some(&set),
                        dual_stream: true,
                        inject_mask: None,
                        log_traces: false,
                    };
                    ddim_sample(&run, &sched, &config.sampler, n, &mut rng)?.0
                }
                Payload::Weights(w) => {
                    let prompt = PromptSpec::photo_of(concept);
                    ddim_sample(&SampleRun::plain(&w, &prompt), &sched, &config.sampler, n, &mut rng)?.0
                }
                Payload::TokenEmbedding { token, embedding, base_fingerprint } => {
                    if base_fingerprint != base.fingerprint() {
                        return Err(CliError::config(
                            "token embedding was trained against a different base",
                        ));
                    }
                    let w = infusion_core::customization::weights_with_token(&base, &token, &embedding)?;
                    let prompt = PromptSpec::new(vec![PHOTO_OF.to_string(), token], vec![])?;
                    ddim_sample(&SampleRun::plain(&w, &prompt), &sched, &config.sampler, n, &mut rng)?.0
                }
            }
        }
    };

    write_atomic(out, serde_json::to_string_pretty(&ps).expect("points serialize").as_bytes())?;
    if let Some(svg_path) = svg_out {
        let svg = render_scatter_svg(
            &[(&ps, LayerStyle::new(&ps.label.clone(), PALETTE[1]).clipped())],
            Bounds::toy(),
            &hash,
        )?;
        write_atomic(svg_path, svg.as_bytes())?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Sample-space metrics between a sample file and a reference file:
/// Wasserstein distance of the Gaussian fits plus mode coverage against
/// the configured world.
pub fn run_eval(
    config: &ExperimentConfig,
    samples_path: &Path,
    reference_path: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let world = config.build_world()?;
    let centers = world.modality_centers(&config.customized_concept)?;
    let samples: PointSet = read_points(samples_path)?;
    let reference: PointSet = read_points(reference_path)?;

    let fit_s = gaussian_fit(&samples)?;
    let fit_r = gaussian_fit(&reference)?;
    let w2 = w2_gaussian(&fit_s, &fit_r)?
        .with_detail("samples", samples_path.display())
        .with_detail("reference", reference_path.display());
    let coverage = mode_coverage(
        &samples,
        &centers,
        config.eval.coverage_radius,
        config.eval.coverage_quorum,
    )?;
    let coverage_report = MetricReport {
        metric: "mode_coverage".into(),
        value: coverage,
        sample_count: samples.len(),
        details: [
            ("radius".to_string(), config.eval.coverage_radius.to_string()),
            ("quorum".to_string(), config.eval.coverage_quorum.to_string()),
        ]
        .into_iter()
        .collect(),
    };
    let reports = vec![w2, coverage_report];
    let doc = serde_json::to_string_pretty(&ReportsDoc { config_hash: config.hash(), reports })
        .expect("reports serialize");
    match out {
        Some(path) => write_atomic(path, doc.as_bytes())?,
        None => println!("{doc}"),
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct ReportsDoc {
    config_hash: String,
    reports: Vec<MetricReport>,
}

fn read_points(path: &Path) -> Result<PointSet> {
    let json = std::fs::read_to_string(path)?;
    serde_json::from_str(&json)
        .map_err(|e| CliError::config(format!("cannot parse points `{}`: {e}", path.display())))
}

/// Scatter-plot one or more sample files into a single SVG.
pub fn run_plot(config: &ExperimentConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(CliError::Usage("plot needs at least one --in file".into()));
    }
    let sets: Vec<PointSet> = inputs.iter().map(|p| read_points(p)).collect::<Result<_>>()?;
    let layers: Vec<(&PointSet, LayerStyle)> = sets
        .iter()
        .enumerate()
        .map(|(i, ps)| (ps, LayerStyle::new(&ps.label, PALETTE[i % PALETTE.len()]).clipped()))
        .collect();
    let svg = render_scatter_svg(&layers, Bounds::toy(), &config.hash())?;
    write_atomic(out, svg.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}
