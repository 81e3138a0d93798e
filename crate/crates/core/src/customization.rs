//! Concept customization: residual value embeddings trained under injected
//! attention maps, plus the two overfitting-prone baselines (full
//! fine-tuning and token inversion) used for comparison curves.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    denoise_forward, DenoiserWeights, PromptSpec, ResidualBinding, WeightMode,
};
use crate::diffusion::{batch_loss_on_tape, draw_loss_elements, NoiseSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::tape::{kernel, ParamSet};
use crate::numerics::{adam_step, OptimizerState, Tape, Tensor};
use crate::rng::seeded_stream;
use crate::worlds::{Point2, PointSet};

const RESIDUAL_FORMAT_VERSION: u32 = 1;

// ── Residual embeddings ─────────────────────────────────────────────────

/// One concept's per-layer residual value vectors: the entire trained
/// artifact of an infusion run. Tied to the base weights it was trained
/// against via a content fingerprint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualConceptEmbedding {
    pub concept: String,
    /// One `[1, d]` row per cross-attention layer.
    pub deltas: Vec<Tensor>,
    pub base_fingerprint: String,
    pub steps: usize,
}

impl ResidualConceptEmbedding {
    pub fn zeros(concept: &str, base: &DenoiserWeights) -> Self {
        ResidualConceptEmbedding {
            concept: concept.to_string(),
            deltas: (0..base.config.n_layers)
                .map(|_| Tensor::zeros(vec![1, base.config.d_model]))
                .collect(),
            base_fingerprint: base.fingerprint(),
            steps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() {
            return Err(Error::contract("residual has no layers"));
        }
        let d = self.deltas[0].numel();
        for t in &self.deltas {
            if t.rows() != 1 || t.numel() != d {
                return Err(Error::shape("residual deltas must all be [1,d]"));
            }
            t.check_finite("residual delta")?;
        }
        Ok(())
    }

    /// Refuse to pair with weights other than the ones trained against.
    pub fn verify_base(&self, base: &DenoiserWeights) -> Result<()> {
        let fp = base.fingerprint();
        if fp != self.base_fingerprint {
            return Err(Error::contract(format!(
                "residual for `{}` was trained against base {} but got base {}",
                self.concept,
                &self.base_fingerprint[..12.min(self.base_fingerprint.len())],
                &fp[..12]
            )));
        }
        Ok(())
    }

    /// Versioned JSON: concept, dimensions, plain delta arrays, base
    /// fingerprint and training step count.
    pub fn to_json(&self) -> String {
        let file = ResidualFile {
            format_version: RESIDUAL_FORMAT_VERSION,
            concept: self.concept.clone(),
            d: self.deltas[0].numel(),
            layer_count: self.deltas.len(),
            deltas: self.deltas.iter().map(|t| t.data().to_vec()).collect(),
            base_fingerprint: self.base_fingerprint.clone(),
            steps: self.steps,
        };
        serde_json::to_string_pretty(&file).expect("residual serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: ResidualFile = serde_json::from_str(json)
            .map_err(|e| Error::contract(format!("residual parse error: {e}")))?;
        if file.format_version != RESIDUAL_FORMAT_VERSION {
            return Err(Error::contract(format!(
                "residual format_version {} unsupported (expected {RESIDUAL_FORMAT_VERSION})",
                file.format_version
            )));
        }
        if file.deltas.len() != file.layer_count {
            return Err(Error::contract("residual layer_count mismatch"));
        }
        let mut deltas = Vec::with_capacity(file.layer_count);
        for row in file.deltas {
            if row.len() != file.d {
                return Err(Error::shape("residual delta width mismatch"));
            }
            deltas.push(Tensor::new(vec![1, file.d], row)?);
        }
        let emb = ResidualConceptEmbedding {
            concept: file.concept,
            deltas,
            base_fingerprint: file.base_fingerprint,
            steps: file.steps,
        };
        emb.validate()?;
        Ok(emb)
    }
}

#[derive(Serialize, Deserialize)]
struct ResidualFile {
    format_version: u32,
    concept: String,
    d: usize,
    layer_count: usize,
    deltas: Vec<Vec<f64>>,
    base_fingerprint: String,
    steps: usize,
}

/// Residuals for several concepts, all trained against the same base.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResidualSet {
    map: BTreeMap<String, ResidualConceptEmbedding>,
}

impl ResidualSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, emb: ResidualConceptEmbedding) -> Result<()> {
        emb.validate()?;
        if self.map.contains_key(&emb.concept) {
            return Err(Error::contract(format!(
                "residual set already contains concept `{}`",
                emb.concept
            )));
        }
        if let Some(first) = self.map.values().next() {
            if first.base_fingerprint != emb.base_fingerprint {
                return Err(Error::contract(
                    "all residuals in a set must share the same base fingerprint",
                ));
            }
        }
        self.map.insert(emb.concept.clone(), emb);
        Ok(())
    }

    pub fn single(emb: ResidualConceptEmbedding) -> Result<Self> {
        let mut set = ResidualSet::new();
        set.insert(emb)?;
        Ok(set)
    }

    pub fn get(&self, concept: &str) -> Option<&ResidualConceptEmbedding> {
        self.map.get(concept)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ResidualConceptEmbedding)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn verify_base(&self, base: &DenoiserWeights) -> Result<()> {
        for emb in self.map.values() {
            emb.verify_base(base)?;
        }
        Ok(())
    }

    /// All-zero residual for a concept: applying it is an exact no-op.
    pub fn zeros_for(concept: &str, base: &DenoiserWeights) -> Self {
        ResidualSet::single(ResidualConceptEmbedding::zeros(concept, base)).expect("valid zeros")
    }

    /// Random residual, used by tests and ablations.
    pub fn random_for<R: Rng>(concept: &str, base: &DenoiserWeights, rng: &mut R) -> Self {
        let mut emb = ResidualConceptEmbedding::zeros(concept, base);
        for t in &mut emb.deltas {
            for v in t.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        ResidualSet::single(emb).expect("valid random residual")
    }
}

/// Add each matched concept-slot's delta to its value row; every other row
/// is returned bit-identical. Concepts absent from the set are untouched.
pub fn apply_residuals(
    v: &Tensor,
    prompt: &PromptSpec,
    residuals: &ResidualSet,
    layer: usize,
) -> Result<Tensor> {
    let mut out = v.clone();
    for (pos, concept) in prompt.concept_slots() {
        if let Some(emb) = residuals.get(concept) {
            let delta = emb.deltas.get(layer).ok_or_else(|| {
                Error::contract(format!(
                    "residual for `{concept}` has {} layers, layer {layer} requested",
                    emb.deltas.len()
                ))
            })?;
            out = kernel::add_to_row(&out, *pos, delta)?;
        }
    }
    Ok(out)
}

// ── Customization runs ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Infusion,
    FullFinetune,
    TokenInversion,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Infusion => "infusion",
            Method::FullFinetune => "full-finetune",
            Method::TokenInversion => "token-inversion",
        }
    }

    pub fn parse(name: &str) -> Result<Method> {
        match name {
            "infusion" => Ok(Method::Infusion),
            "full-finetune" => Ok(Method::FullFinetune),
            "token-inversion" => Ok(Method::TokenInversion),
            other => Err(Error::contract(format!("unknown method `{other}`"))),
        }
    }
}

/// A completed customization: per-step losses and artifact checkpoints
/// (step 0 is always included, so curves can anchor at the untrained
/// state).
pub struct CustomizationRun<A> {
    pub method: Method,
    pub data: PointSet,
    pub prompt: PromptSpec,
    pub checkpoints: Vec<(usize, A)>,
    pub losses: Vec<f64>,
}

impl<A> CustomizationRun<A> {
    pub fn final_artifact(&self) -> &A {
        &self.checkpoints.last().expect("at least the step-0 checkpoint").1
    }
}

fn single_slot_concept(prompt: &PromptSpec) -> Result<&str> {
    match prompt.concept_slots() {
        [(_, concept)] => Ok(concept),
        slots => Err(Error::contract(format!(
            "customization prompt must have exactly one concept slot, got {}",
            slots.len()
        ))),
    }
}

fn draw_batch<R: Rng>(data: &PointSet, size: usize, rng: &mut R) -> PointSet {
    let points = (0..size)
        .map(|_| data.points[rng.random_range(0..data.points.len())])
        .collect();
    PointSet::new(points, data.label.clone())
}

fn should_checkpoint(step: usize, total: usize, every: Option<usize>) -> bool {
    if step == total {
        return true;
    }
    match every {
        Some(e) if e > 0 => step % e == 0,
        _ => false,
    }
}

// ── Infusion ────────────────────────────────────────────────────────────

/// Train per-layer residual value vectors for the prompt's concept slot.
/// The base stays frozen: each step captures attention maps with a plain
/// foundational pass and the customized pass consumes them, so only the
/// deltas receive gradients.
pub fn train_infusion(
    base: &DenoiserWeights,
    data: &PointSet,
    prompt: &PromptSpec,
    steps: usize,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<CustomizationRun<ResidualConceptEmbedding>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training data must be non-empty"));
    }
    let concept = single_slot_concept(prompt)?.to_string();
    base.token_tensor(&concept)?;
    let fingerprint = base.fingerprint();

    let d = base.config.d_model;
    let n_layers = base.config.n_layers;
    let delta_name = |layer: usize| format!("delta.{concept}.layer{layer}");
    let mut flat = ParamSet::new();
    for layer in 0..n_layers {
        flat.insert(delta_name(layer), Tensor::zeros(vec![1, d]));
    }

    let artifact = |flat: &ParamSet, step: usize| ResidualConceptEmbedding {
        concept: concept.clone(),
        deltas: (0..n_layers).map(|l| flat[&delta_name(l)].clone()).collect(),
        base_fingerprint: fingerprint.clone(),
        steps: step,
    };

    let mut rng = seeded_stream(cfg.seed, 2);
    let mut opt = OptimizerState::new();
    let mut losses = Vec::with_capacity(steps);
    let mut checkpoints = vec![(0, artifact(&flat, 0))];

    for step in 1..=steps {
        let batch = draw_batch(data, cfg.batch_size, &mut rng);
        let mut elements = draw_loss_elements(&batch, prompt, sched, cfg.p_uncond, &mut rng)?;
        // Foundational pass per element: capture the maps to inject.
        for el in &mut elements {
            let (_, trace) = denoise_forward(base, el.z_t, el.t, &el.prompt, None, None, None)?;
            el.injected = Some(trace);
        }

        let mut deltas_by_concept = BTreeMap::new();
        deltas_by_concept.insert(
            concept.clone(),
            (0..n_layers).map(|l| &flat[&delta_name(l)]).collect::<Vec<_>>(),
        );
        let binding = ResidualBinding { deltas: deltas_by_concept, tracked: true };

        let mut tape = Tape::new();
        let loss_var = batch_loss_on_tape(
            &mut tape,
            base,
            WeightMode::Frozen,
            Some(&binding),
            None,
            &elements,
        )?;
        let loss = tape.value(loss_var).scalar_value()?;
        if !loss.is_finite() {
            return Err(Error::Training { step, detail: format!("loss {loss}") });
        }
        let grads = tape.backward(loss_var)?;
        drop(tape);
        adam_step(&mut flat, &grads, &mut opt, cfg.lr)?;
        losses.push(loss);

        if should_checkpoint(step, steps, cfg.checkpoint_every) {
            checkpoints.push((step, artifact(&flat, step)));
        }
    }

    Ok(CustomizationRun {
        method: Method::Infusion,
        data: data.clone(),
        prompt: prompt.clone(),
        checkpoints,
        losses,
    })
}

// ── Full fine-tune baseline ─────────────────────────────────────────────

/// Optimize every denoiser parameter on the customized data alone. This is
/// the baseline that is expected to overfit.
pub fn train_full_finetune(
    base: &DenoiserWeights,
    data: &PointSet,
    prompt: &PromptSpec,
    steps: usize,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<CustomizationRun<DenoiserWeights>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training data must be non-empty"));
    }
    single_slot_concept(prompt)?;

    let mut weights = base.clone();
    let mut rng = seeded_stream(cfg.seed, 3);
    let mut opt = OptimizerState::new();
    let mut losses = Vec::with_capacity(steps);
    let mut checkpoints = vec![(0, base.clone())];

    for step in 1..=steps {
        let batch = draw_batch(data, cfg.batch_size, &mut rng);
        let elements = draw_loss_elements(&batch, prompt, sched, cfg.p_uncond, &mut rng)?;
        let mut tape = Tape::new();
        let loss_var =
            batch_loss_on_tape(&mut tape, &weights, WeightMode::TrainAll, None, None, &elements)?;
        let loss = tape.value(loss_var).scalar_value()?;
        if !loss.is_finite() {
            return Err(Error::Training { step, detail: format!("loss {loss}") });
        }
        let grads = tape.backward(loss_var)?;
        drop(tape);
        adam_step(weights.params_mut(), &grads, &mut opt, cfg.lr)?;
        losses.push(loss);

        if should_checkpoint(step, steps, cfg.checkpoint_every) {
            checkpoints.push((step, weights.clone()));
        }
    }

    Ok(CustomizationRun {
        method: Method::FullFinetune,
        data: data.clone(),
        prompt: prompt.clone(),
        checkpoints,
        losses,
    })
}

// ── Token inversion baseline ────────────────────────────────────────────

/// Learn a single new token embedding for the placeholder while every
/// model weight stays frozen. Initialized from an existing token's
/// embedding (conventionally the super-class).
pub fn train_token_inversion(
    base: &DenoiserWeights,
    data: &PointSet,
    placeholder: &str,
    init_token: &str,
    prompt: &PromptSpec,
    steps: usize,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<CustomizationRun<Tensor>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training data must be non-empty"));
    }
    single_slot_concept(prompt)?;
    if base.token_tensor(placeholder).is_ok() {
        return Err(Error::contract(format!(
            "placeholder `{placeholder}` is already in the frozen vocabulary"
        )));
    }
    if !prompt.tokens().iter().any(|t| t == placeholder) {
        return Err(Error::contract(format!(
            "prompt does not mention the placeholder `{placeholder}`"
        )));
    }
    let init = base.token_tensor(init_token)?.clone();

    let mut weights = base.clone();
    let key = format!("token.{placeholder}");
    weights.params_mut().insert(key.clone(), init.clone());
    let mut flat = ParamSet::new();
    flat.insert(key.clone(), init.clone());

    let mut rng = seeded_stream(cfg.seed, 4);
    let mut opt = OptimizerState::new();
    let mut losses = Vec::with_capacity(steps);
    let mut checkpoints = vec![(0, init)];

    for step in 1..=steps {
        let batch = draw_batch(data, cfg.batch_size, &mut rng);
        let elements = draw_loss_elements(&batch, prompt, sched, cfg.p_uncond, &mut rng)?;
        let mut tape = Tape::new();
        let loss_var = batch_loss_on_tape(
            &mut tape,
            &weights,
            WeightMode::TrainToken(placeholder),
            None,
            None,
            &elements,
        )?;
        let loss = tape.value(loss_var).scalar_value()?;
        if !loss.is_finite() {
            return Err(Error::Training { step, detail: format!("loss {loss}") });
        }
        let grads = tape.backward(loss_var)?;
        drop(tape);
        adam_step(&mut flat, &grads, &mut opt, cfg.lr)?;
        weights.params_mut().insert(key.clone(), flat[&key].clone());
        losses.push(loss);

        if should_checkpoint(step, steps, cfg.checkpoint_every) {
            checkpoints.push((step, flat[&key].clone()));
        }
    }

    Ok(CustomizationRun {
        method: Method::TokenInversion,
        data: data.clone(),
        prompt: prompt.clone(),
        checkpoints,
        losses,
    })
}

/// Weights with a learned placeholder embedding spliced in, for sampling
/// and evaluation of token-inversion checkpoints.
pub fn weights_with_token(
    base: &DenoiserWeights,
    placeholder: &str,
    embedding: &Tensor,
) -> Result<DenoiserWeights> {
    if embedding.rows() != 1 || embedding.numel() != base.config.d_model {
        return Err(Error::shape(format!(
            "token embedding must be [1,{}]",
            base.config.d_model
        )));
    }
    let mut weights = base.clone();
    weights
        .params_mut()
        .insert(format!("token.{placeholder}"), embedding.clone());
    Ok(weights)
}

// ── Model handle for metrics ────────────────────────────────────────────

/// A noise predictor under evaluation: either a weights instance or a base
/// plus residuals evaluated dual-stream (maps from the foundational pass,
/// values customized).
pub enum Model<'a> {
    Plain(&'a DenoiserWeights),
    Infused { base: &'a DenoiserWeights, residuals: &'a ResidualSet },
}

impl Model<'_> {
    pub fn eps(&self, z_t: Point2, t: usize, prompt: &PromptSpec) -> Result<Point2> {
        match self {
            Model::Plain(w) => Ok(denoise_forward(w, z_t, t, prompt, None, None, None)?.0),
            Model::Infused { base, residuals } => {
                let (_, trace) = denoise_forward(base, z_t, t, prompt, None, None, None)?;
                let (eps, _) =
                    denoise_forward(base, z_t, t, prompt, Some(residuals), Some(&trace), None)?;
                Ok(eps)
            }
        }
    }

    pub fn weights(&self) -> &DenoiserWeights {
        match self {
            Model::Plain(w) => w,
            Model::Infused { base, .. } => base,
        }
    }
}
