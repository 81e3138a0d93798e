//! Conditional noise-prediction network built from cross-attention blocks.
//!
//! The 2-D latent is lifted into a small set of query slots; each layer
//! attends over the prompt's token embeddings. Every forward pass returns
//! the per-layer attention maps it computed, and any pass can instead be
//! driven by maps captured from another pass. Residual value embeddings
//! attach to concept-slot rows of V only, which keeps the "where" pathway
//! (maps) and the "what" pathway (values) independently controllable.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::customization::ResidualSet;
use crate::error::{Error, Result};
use crate::numerics::tape::{kernel, ParamSet, Tape, VarId};
use crate::numerics::Tensor;
use crate::worlds::{ConceptWorld, Point2};

/// Embedding used when the condition is dropped.
pub const NULL_TOKEN: &str = "<null>";
/// Fixed carrier token that prefixes every concept prompt.
pub const PHOTO_OF: &str = "photo-of";

// ── Prompts ─────────────────────────────────────────────────────────────

/// An ordered token list plus the positions where customized concepts sit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    tokens: Vec<String>,
    /// (position, concept token) pairs; residuals attach here.
    concept_slots: Vec<(usize, String)>,
    is_null: bool,
}

impl PromptSpec {
    pub fn new(tokens: Vec<String>, concept_slots: Vec<(usize, String)>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::contract("prompt must have at least one token"));
        }
        let mut seen = Vec::new();
        for (pos, concept) in &concept_slots {
            if *pos >= tokens.len() {
                return Err(Error::contract(format!(
                    "concept slot position {pos} out of range (L={})",
                    tokens.len()
                )));
            }
            if seen.contains(pos) {
                // Two concepts on one token is undefined; reject rather than guess.
                return Err(Error::contract(format!(
                    "overlapping concept slots at position {pos}"
                )));
            }
            if &tokens[*pos] != concept {
                return Err(Error::contract(format!(
                    "slot concept `{concept}` does not match token `{}` at position {pos}",
                    tokens[*pos]
                )));
            }
            seen.push(*pos);
        }
        Ok(PromptSpec { tokens, concept_slots, is_null: false })
    }

    /// The empty condition, length-matched to a conditional prompt.
    pub fn null(len: usize) -> Self {
        PromptSpec {
            tokens: vec![NULL_TOKEN.to_string(); len.max(1)],
            concept_slots: Vec::new(),
            is_null: true,
        }
    }

    /// `photo-of <concept>` without a concept slot (plain conditioning).
    pub fn photo_of(concept: &str) -> Self {
        PromptSpec::new(vec![PHOTO_OF.to_string(), concept.to_string()], Vec::new())
            .expect("static prompt is valid")
    }

    /// `photo-of <concept>` with the concept slot on the concept token.
    pub fn customized(concept: &str) -> Self {
        PromptSpec::new(
            vec![PHOTO_OF.to_string(), concept.to_string()],
            vec![(1, concept.to_string())],
        )
        .expect("static prompt is valid")
    }

    /// `photo-of <c1> <c2> ...` with a slot on every concept token.
    pub fn multi_concept(concepts: &[&str]) -> Result<Self> {
        let mut tokens = vec![PHOTO_OF.to_string()];
        let mut slots = Vec::new();
        for (i, c) in concepts.iter().enumerate() {
            tokens.push(c.to_string());
            slots.push((i + 1, c.to_string()));
        }
        PromptSpec::new(tokens, slots)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn concept_slots(&self) -> &[(usize, String)] {
        &self.concept_slots
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }

    /// Token identifiers to embed, position by position.
    fn effective_tokens(&self) -> Vec<&str> {
        if self.is_null {
            vec![NULL_TOKEN; self.tokens.len()]
        } else {
            self.tokens.iter().map(|s| s.as_str()).collect()
        }
    }
}

/// With probability `p_uncond`, replace the prompt by the length-matched
/// null prompt.
pub fn drop_condition<R: Rng>(prompt: &PromptSpec, p_uncond: f64, rng: &mut R) -> Result<PromptSpec> {
    if !(0.0..=1.0).contains(&p_uncond) {
        return Err(Error::contract(format!("p_uncond {p_uncond} not in [0,1]")));
    }
    if rng.random_bool(p_uncond) {
        Ok(PromptSpec::null(prompt.len()))
    } else {
        Ok(prompt.clone())
    }
}

// ── Token embeddings ────────────────────────────────────────────────────

/// Token identifier to d-vector association; always contains the null
/// token's embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddingTable {
    dim: usize,
    embeddings: BTreeMap<String, Tensor>,
}

impl TokenEmbeddingTable {
    pub fn new(dim: usize, embeddings: BTreeMap<String, Tensor>) -> Result<Self> {
        if !embeddings.contains_key(NULL_TOKEN) {
            return Err(Error::contract("table must contain the null token"));
        }
        for (tok, e) in &embeddings {
            if e.numel() != dim || e.rows() != 1 {
                return Err(Error::shape(format!(
                    "embedding for `{tok}` must be [1,{dim}], got {:?}",
                    e.shape()
                )));
            }
        }
        Ok(TokenEmbeddingTable { dim, embeddings })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, token: &str) -> Result<&Tensor> {
        self.embeddings
            .get(token)
            .ok_or_else(|| Error::lookup(format!("unknown token `{token}`")))
    }

    pub fn null_embedding(&self) -> &Tensor {
        &self.embeddings[NULL_TOKEN]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.embeddings.contains_key(token)
    }

    pub fn insert(&mut self, token: &str, embedding: Tensor) -> Result<()> {
        if embedding.numel() != self.dim || embedding.rows() != 1 {
            return Err(Error::shape(format!(
                "embedding for `{token}` must be [1,{}]",
                self.dim
            )));
        }
        self.embeddings.insert(token.to_string(), embedding);
        Ok(())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.embeddings.keys().map(|s| s.as_str())
    }
}

/// Token matrix for a prompt: row k is the embedding of token k; a null
/// prompt yields L copies of the null embedding.
pub fn encode_prompt(prompt: &PromptSpec, table: &TokenEmbeddingTable) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(prompt.len());
    for tok in prompt.effective_tokens() {
        rows.push(table.embedding(tok)?.data().to_vec());
    }
    Tensor::from_rows(&rows)
}

// ── Weights ─────────────────────────────────────────────────────────────

/// Network dimensions. `query_slots` plays the role of the spatial grid:
/// the 2-D latent is lifted to that many query rows so the attention maps
/// are nontrivial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub query_slots: usize,
    pub time_emb_dim: usize,
    pub ff_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d_model: 32,
            n_layers: 3,
            query_slots: 4,
            time_emb_dim: 16,
            ff_hidden: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            // A single layer would make injected maps unobservable downstream.
            return Err(Error::contract("n_layers must be >= 2"));
        }
        if self.d_model == 0 || self.query_slots == 0 || self.ff_hidden == 0 {
            return Err(Error::contract("zero-sized denoiser dimension"));
        }
        if self.time_emb_dim % 2 != 0 {
            return Err(Error::contract("time_emb_dim must be even"));
        }
        Ok(())
    }

    fn lift_in(&self) -> usize {
        2 + self.time_emb_dim
    }

    fn lift_out(&self) -> usize {
        self.query_slots * self.d_model
    }
}

/// All trainable parameters: input lift, per-layer attention and
/// feed-forward weights, output head, and the token embedding table
/// (stored under `token.*` keys in the flat parameter set).
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserWeights {
    pub config: DenoiserConfig,
    params: ParamSet,
}

impl DenoiserWeights {
    /// Fresh random initialization over the given vocabulary.
    pub fn init(config: DenoiserConfig, vocab: &[&str], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        let matrix = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect();
            Tensor::new(vec![rows, cols], data).expect("sized")
        };

        params.insert("lift.w".into(), matrix(&mut rng, config.lift_in(), config.lift_out()));
        params.insert("lift.b".into(), Tensor::zeros(vec![1, config.lift_out()]));
        for l in 0..config.n_layers {
            let d = config.d_model;
            params.insert(format!("layer{l}.w_q"), matrix(&mut rng, d, d));
            params.insert(format!("layer{l}.w_k"), matrix(&mut rng, d, d));
            params.insert(format!("layer{l}.w_v"), matrix(&mut rng, d, d));
            params.insert(format!("layer{l}.w_o"), matrix(&mut rng, d, d));
            params.insert(format!("layer{l}.ff.w1"), matrix(&mut rng, d, config.ff_hidden));
            params.insert(format!("layer{l}.ff.b1"), Tensor::zeros(vec![1, config.ff_hidden]));
            params.insert(format!("layer{l}.ff.w2"), matrix(&mut rng, config.ff_hidden, d));
            params.insert(format!("layer{l}.ff.b2"), Tensor::zeros(vec![1, d]));
        }
        params.insert("head.w".into(), matrix(&mut rng, config.lift_out(), 2));
        params.insert("head.b".into(), Tensor::zeros(vec![1, 2]));

        let mut vocab_sorted: Vec<&str> = vocab.to_vec();
        vocab_sorted.sort_unstable();
        vocab_sorted.dedup();
        for tok in vocab_sorted {
            params.insert(format!("token.{tok}"), matrix(&mut rng, 1, config.d_model));
        }
        if !params.contains_key(&format!("token.{NULL_TOKEN}")) {
            return Err(Error::contract("vocabulary must include the null token"));
        }
        Ok(DenoiserWeights { config, params })
    }

    /// Vocabulary for a world: null and carrier tokens plus every concept.
    pub fn vocab_for_world(world: &ConceptWorld) -> Vec<String> {
        let mut v = vec![NULL_TOKEN.to_string(), PHOTO_OF.to_string()];
        v.extend(world.concept_tokens().map(|s| s.to_string()));
        v
    }

    pub fn flat(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access for the training loops in this crate.
    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Rebuild from a flat parameter set (training loops mutate the flat
    /// form and wrap it back).
    pub fn from_flat(config: DenoiserConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        if !params.contains_key(&format!("token.{NULL_TOKEN}")) {
            return Err(Error::contract("flat parameters lack the null token embedding"));
        }
        Ok(DenoiserWeights { config, params })
    }

    pub fn token_tensor(&self, token: &str) -> Result<&Tensor> {
        self.params
            .get(&format!("token.{token}"))
            .ok_or_else(|| Error::lookup(format!("unknown token `{token}`")))
    }

    /// Owned embedding-table view of the `token.*` parameters.
    pub fn table(&self) -> TokenEmbeddingTable {
        let mut embeddings = BTreeMap::new();
        for (name, t) in &self.params {
            if let Some(tok) = name.strip_prefix("token.") {
                embeddings.insert(tok.to_string(), t.clone());
            }
        }
        TokenEmbeddingTable::new(self.config.d_model, embeddings).expect("weights table is valid")
    }

    /// Content hash over config and every parameter, bit-exact.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in &self.params {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ── Attention traces ────────────────────────────────────────────────────

/// Per-layer attention maps captured from one forward pass, with the
/// timestep and prompt they were captured under. Injectable into another
/// pass over the same prompt shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub maps: Vec<Tensor>,
    pub t: usize,
    pub prompt: PromptSpec,
}

impl AttentionTrace {
    /// Check shape compatibility with a pass over (`query_slots`, prompt
    /// length `l`, `n_layers`) and row-stochasticity of every map.
    pub fn validate_for(&self, n_layers: usize, query_slots: usize, l: usize) -> Result<()> {
        if self.maps.len() != n_layers {
            return Err(Error::contract(format!(
                "injected trace has {} layers, pass has {n_layers}",
                self.maps.len()
            )));
        }
        for (i, m) in self.maps.iter().enumerate() {
            if m.rank() != 2 || m.rows() != query_slots || m.cols() != l {
                return Err(Error::contract(format!(
                    "injected map {i} has shape {:?}, pass wants [{query_slots},{l}]",
                    m.shape()
                )));
            }
            for r in 0..m.rows() {
                let sum: f64 = m.row(r).iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::contract(format!(
                        "injected map {i} row {r} sums to {sum}, not 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── Cross-attention ─────────────────────────────────────────────────────

/// Single-head cross-attention: `map = softmax(q k^T / sqrt(d))`,
/// `output = map v`. Returns both.
pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::shape("cross_attention: rank-2 inputs required"));
    }
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "cross_attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let scores = kernel::matmul_nt(q, k)?;
    let scaled = kernel::map(&scores, |x| x * scale);
    let map = kernel::softmax_rows(&scaled)?;
    let output = kernel::matmul(&map, v)?;
    Ok((output, map))
}

// ── Forward pass ────────────────────────────────────────────────────────

/// Which parameters the tape should track during a forward build.
#[derive(Clone, Copy, Debug)]
pub enum WeightMode<'a> {
    /// Everything is a constant input (inference, F-pipeline).
    Frozen,
    /// Network weights and all token embeddings are tracked.
    TrainAll,
    /// Only the named token's embedding is tracked.
    TrainToken(&'a str),
}

/// Residual value vectors to add at concept-slot rows, keyed by concept.
/// `tracked` binds them as tape parameters named `delta.<concept>.layer<i>`.
pub struct ResidualBinding<'a> {
    pub deltas: BTreeMap<String, Vec<&'a Tensor>>,
    pub tracked: bool,
}

impl<'a> ResidualBinding<'a> {
    pub fn from_set(set: &'a ResidualSet) -> Self {
        let mut deltas = BTreeMap::new();
        for (concept, emb) in set.iter() {
            deltas.insert(concept.to_string(), emb.deltas.iter().collect());
        }
        ResidualBinding { deltas, tracked: false }
    }
}

/// Inputs controlling one forward build.
pub struct ForwardSpec<'a> {
    pub weights: &'a DenoiserWeights,
    pub mode: WeightMode<'a>,
    pub residuals: Option<&'a ResidualBinding<'a>>,
    pub injected: Option<&'a AttentionTrace>,
    /// Per-layer injection switch; `None` injects in every layer.
    pub inject_mask: Option<&'a [bool]>,
}

impl<'a> ForwardSpec<'a> {
    pub fn plain(weights: &'a DenoiserWeights) -> Self {
        ForwardSpec { weights, mode: WeightMode::Frozen, residuals: None, injected: None, inject_mask: None }
    }
}

/// Tape nodes of interest produced by a forward build.
pub struct ForwardVars {
    pub eps: VarId,
    /// Natively computed softmax maps, layer by layer (recorded even when
    /// injected maps drive the outputs).
    pub native_maps: Vec<VarId>,
}

/// Sinusoidal embedding of an integer timestep.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

/// Build the denoiser forward pass on a tape. The same builder serves
/// inference (frozen bindings) and every training mode, so all paths are
/// bit-identical by construction.
pub fn forward_on_tape(
    tape: &mut Tape,
    spec: &ForwardSpec,
    z_t: Point2,
    t: usize,
    prompt: &PromptSpec,
) -> Result<ForwardVars> {
    let cfg = &spec.weights.config;
    let d = cfg.d_model;
    let l_len = prompt.len();

    if let Some(trace) = spec.injected {
        trace.validate_for(cfg.n_layers, cfg.query_slots, l_len)?;
    }
    if let Some(binding) = spec.residuals {
        for (concept, deltas) in &binding.deltas {
            if deltas.len() != cfg.n_layers {
                return Err(Error::contract(format!(
                    "residual for `{concept}` has {} layers, denoiser has {}",
                    deltas.len(),
                    cfg.n_layers
                )));
            }
            for dt in deltas {
                if dt.numel() != d || dt.rows() != 1 {
                    return Err(Error::shape(format!(
                        "residual delta for `{concept}` must be [1,{d}], got {:?}",
                        dt.shape()
                    )));
                }
            }
        }
    }

    // Bind a network parameter according to the weight mode.
    let net = |tape: &mut Tape, weights: &DenoiserWeights, name: &str| -> Result<VarId> {
        let tensor = weights
            .flat()
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing weight `{name}`")))?;
        Ok(match spec.mode {
            WeightMode::TrainAll => tape.param(name, tensor),
            _ => tape.input(tensor.clone()),
        })
    };

    // Token rows, one per prompt position; repeated tokens share a node so
    // their gradients accumulate.
    let mut token_nodes: BTreeMap<String, VarId> = BTreeMap::new();
    if matches!(spec.mode, WeightMode::TrainAll) {
        // Register the whole vocabulary so every embedding is tracked;
        // tokens outside this prompt get zero gradients.
        for (name, tensor) in spec.weights.flat() {
            if name.starts_with("token.") {
                let id = tape.param(name, tensor);
                token_nodes.insert(name.clone(), id);
            }
        }
    }
    let mut rows = Vec::with_capacity(l_len);
    for tok in prompt.effective_tokens() {
        let key = format!("token.{tok}");
        let id = match token_nodes.get(&key) {
            Some(&id) => id,
            None => {
                let tensor = spec.weights.token_tensor(tok)?;
                let tracked = match spec.mode {
                    WeightMode::TrainAll => true,
                    WeightMode::TrainToken(target) => tok == target,
                    WeightMode::Frozen => false,
                };
                let id = if tracked {
                    tape.param(&key, tensor)
                } else {
                    tape.input(tensor.clone())
                };
                token_nodes.insert(key, id);
                id
            }
        };
        rows.push(id);
    }
    let embedded = tape.stack_rows(&rows)?;

    // Input lift: [z, time_embedding] -> query slots.
    let mut lift_in = vec![z_t[0], z_t[1]];
    lift_in.extend(time_embedding(t, cfg.time_emb_dim));
    let x = tape.input(Tensor::row_vector(lift_in));
    let lift_w = net(tape, spec.weights, "lift.w")?;
    let lift_b = net(tape, spec.weights, "lift.b")?;
    let lifted = tape.matmul(x, lift_w)?;
    let lifted = tape.add(lifted, lift_b)?;
    let mut h = tape.reshape(lifted, vec![cfg.query_slots, d])?;

    let scale = 1.0 / (d as f64).sqrt();
    let mut native_maps = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let w_q = net(tape, spec.weights, &format!("layer{layer}.w_q"))?;
        let w_k = net(tape, spec.weights, &format!("layer{layer}.w_k"))?;
        let w_v = net(tape, spec.weights, &format!("layer{layer}.w_v"))?;
        let w_o = net(tape, spec.weights, &format!("layer{layer}.w_o"))?;

        let q = tape.matmul(h, w_q)?;
        let k = tape.matmul(embedded, w_k)?;
        let mut v = tape.matmul(embedded, w_v)?;

        // Residuals touch only concept-slot rows of V (the "what" pathway).
        if let Some(binding) = spec.residuals {
            for (pos, concept) in prompt.concept_slots() {
                if let Some(deltas) = binding.deltas.get(concept) {
                    let delta = if binding.tracked {
                        tape.param(&format!("delta.{concept}.layer{layer}"), deltas[layer])
                    } else {
                        tape.input(deltas[layer].clone())
                    };
                    v = tape.add_to_row(v, *pos, delta)?;
                }
            }
        }

        let scores = tape.matmul_nt(q, k)?;
        let scaled = tape.scale(scores, scale);
        let native = tape.softmax_rows(scaled)?;
        native_maps.push(native);

        let inject_here = spec.injected.is_some()
            && spec.inject_mask.map_or(true, |m| m.get(layer).copied().unwrap_or(false));
        let map_used = if inject_here {
            tape.input(spec.injected.unwrap().maps[layer].clone())
        } else {
            native
        };

        let attn = tape.matmul(map_used, v)?;
        let projected = tape.matmul(attn, w_o)?;
        h = tape.add(h, projected)?;

        let w1 = net(tape, spec.weights, &format!("layer{layer}.ff.w1"))?;
        let b1 = net(tape, spec.weights, &format!("layer{layer}.ff.b1"))?;
        let w2 = net(tape, spec.weights, &format!("layer{layer}.ff.w2"))?;
        let b2 = net(tape, spec.weights, &format!("layer{layer}.ff.b2"))?;
        let ff = tape.matmul(h, w1)?;
        let ff = tape.add_row_broadcast(ff, b1)?;
        let ff = tape.silu(ff);
        let ff = tape.matmul(ff, w2)?;
        let ff = tape.add_row_broadcast(ff, b2)?;
        h = tape.add(h, ff)?;
    }

    let flat = tape.reshape(h, vec![1, cfg.lift_out()])?;
    let head_w = net(tape, spec.weights, "head.w")?;
    let head_b = net(tape, spec.weights, "head.b")?;
    let eps = tape.matmul(flat, head_w)?;
    let eps = tape.add(eps, head_b)?;
    Ok(ForwardVars { eps, native_maps })
}

/// One denoiser evaluation: predicted noise plus the trace of natively
/// computed attention maps.
pub fn denoise_forward(
    weights: &DenoiserWeights,
    z_t: Point2,
    t: usize,
    prompt: &PromptSpec,
    residuals: Option<&ResidualSet>,
    injected: Option<&AttentionTrace>,
    inject_mask: Option<&[bool]>,
) -> Result<(Point2, AttentionTrace)> {
    let binding = residuals.map(ResidualBinding::from_set);
    let spec = ForwardSpec {
        weights,
        mode: WeightMode::Frozen,
        residuals: binding.as_ref(),
        injected,
        inject_mask,
    };
    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, &spec, z_t, t, prompt)?;
    let eps_t = tape.value(out.eps);
    let eps = [eps_t.data()[0], eps_t.data()[1]];
    let maps = out.native_maps.iter().map(|&id| tape.value(id).clone()).collect();
    Ok((eps, AttentionTrace { maps, t, prompt: prompt.clone() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worlds::build_four_peak_world;

    fn test_weights(seed: u64) -> DenoiserWeights {
        let world = build_four_peak_world();
        let vocab = DenoiserWeights::vocab_for_world(&world);
        let vocab_refs: Vec<&str> = vocab.iter().map(|s| s.as_str()).collect();
        DenoiserWeights::init(DenoiserConfig::default(), &vocab_refs, seed).unwrap()
    }

    #[test]
    fn null_prompt_rows_identical() {
        let w = test_weights(1);
        let table = w.table();
        let m = encode_prompt(&PromptSpec::null(3), &table).unwrap();
        assert_eq!(m.rows(), 3);
        assert_eq!(m.row(0), m.row(1));
        assert_eq!(m.row(1), m.row(2));
        assert_eq!(m.row(0), table.null_embedding().data());
    }

    #[test]
    fn single_token_prompt_is_its_embedding() {
        let w = test_weights(1);
        let table = w.table();
        let p = PromptSpec::new(vec!["A".into()], vec![]).unwrap();
        let m = encode_prompt(&p, &table).unwrap();
        assert_eq!(m.rows(), 1);
        assert_eq!(m.row(0), table.embedding("A").unwrap().data());
    }

    #[test]
    fn permuting_tokens_permutes_rows() {
        let w = test_weights(1);
        let table = w.table();
        let p1 = PromptSpec::new(vec!["A".into(), "B".into()], vec![]).unwrap();
        let p2 = PromptSpec::new(vec!["B".into(), "A".into()], vec![]).unwrap();
        let m1 = encode_prompt(&p1, &table).unwrap();
        let m2 = encode_prompt(&p2, &table).unwrap();
        assert_eq!(m1.row(0), m2.row(1));
        assert_eq!(m1.row(1), m2.row(0));
    }

    #[test]
    fn unknown_token_is_lookup_error() {
        let w = test_weights(1);
        let table = w.table();
        let p = PromptSpec::new(vec!["nope".into()], vec![]).unwrap();
        assert!(matches!(encode_prompt(&p, &table), Err(Error::Lookup(_))));
    }

    #[test]
    fn cross_attention_single_key() {
        let q = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5], vec![0.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![5.0, -7.0]]).unwrap();
        let (out, map) = cross_attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert_eq!(map.at(r, 0), 1.0);
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn cross_attention_zero_query_is_uniform() {
        let q = Tensor::zeros(vec![2, 3]);
        let k = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![4.0, 0.0], vec![0.0, 8.0], vec![2.0, 2.0], vec![-2.0, 6.0]]).unwrap();
        let (out, map) = cross_attention(&q, &k, &v).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                assert!((map.at(r, c) - 0.25).abs() < 1e-15);
            }
            assert!((out.at(r, 0) - 1.0).abs() < 1e-12);
            assert!((out.at(r, 1) - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_decomposes_per_token_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect();
            Tensor::new(vec![r, c], data).unwrap()
        };
        let q = rand_mat(&mut rng, 3, 4);
        let k = rand_mat(&mut rng, 5, 4);
        let v = rand_mat(&mut rng, 5, 4);
        let (out, map) = cross_attention(&q, &k, &v).unwrap();
        // Sum over tokens of m_k * v_k, accumulated in token order.
        let mut acc = vec![0.0; 3 * 4];
        for token in 0..5 {
            for r in 0..3 {
                for c in 0..4 {
                    acc[r * 4 + c] += map.at(r, token) * v.at(token, c);
                }
            }
        }
        assert_eq!(out.data(), acc.as_slice());
    }

    #[test]
    fn plain_forward_trace_is_row_stochastic() {
        let w = test_weights(2);
        let prompt = PromptSpec::photo_of("A");
        let (_, trace) = denoise_forward(&w, [0.4, -1.2], 500, &prompt, None, None, None).unwrap();
        assert_eq!(trace.maps.len(), w.config.n_layers);
        for m in &trace.maps {
            assert_eq!(m.rows(), w.config.query_slots);
            assert_eq!(m.cols(), prompt.len());
            for r in 0..m.rows() {
                let sum: f64 = m.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn own_trace_with_zero_residuals_is_identity() {
        let w = test_weights(3);
        let prompt = PromptSpec::customized("A");
        let (eps_plain, trace) = denoise_forward(&w, [-0.7, 0.3], 250, &prompt, None, None, None).unwrap();

        let zero = ResidualSet::zeros_for("A", &w);
        let (eps_dual, _) =
            denoise_forward(&w, [-0.7, 0.3], 250, &prompt, Some(&zero), Some(&trace), None).unwrap();
        assert_eq!(eps_plain, eps_dual);
    }

    #[test]
    fn residuals_ignore_prompts_without_slots() {
        let w = test_weights(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = ResidualSet::random_for("A", &w, &mut rng);
        let prompt = PromptSpec::photo_of("A"); // no concept slot
        let (eps_plain, _) = denoise_forward(&w, [1.1, 0.2], 77, &prompt, None, None, None).unwrap();
        let (eps_res, _) = denoise_forward(&w, [1.1, 0.2], 77, &prompt, Some(&set), None, None).unwrap();
        assert_eq!(eps_plain, eps_res);
    }

    #[test]
    fn nonzero_residual_changes_slot_prompt_output() {
        let w = test_weights(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = ResidualSet::random_for("A", &w, &mut rng);
        let prompt = PromptSpec::customized("A");
        let (eps_plain, _) = denoise_forward(&w, [1.1, 0.2], 77, &prompt, None, None, None).unwrap();
        let (eps_res, _) = denoise_forward(&w, [1.1, 0.2], 77, &prompt, Some(&set), None, None).unwrap();
        assert_ne!(eps_plain, eps_res);
    }

    #[test]
    fn injected_trace_shape_mismatch_rejected() {
        let w = test_weights(5);
        let short = PromptSpec::photo_of("A");
        let (_, trace) = denoise_forward(&w, [0.0, 0.0], 10, &short, None, None, None).unwrap();
        let longer = PromptSpec::new(
            vec![PHOTO_OF.into(), "A".into(), "B".into()],
            vec![],
        )
        .unwrap();
        let err = denoise_forward(&w, [0.0, 0.0], 10, &longer, None, Some(&trace), None).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn drop_condition_extremes() {
        let prompt = PromptSpec::photo_of("A");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(drop_condition(&prompt, 0.0, &mut rng).unwrap(), prompt);
        }
        for _ in 0..20 {
            let dropped = drop_condition(&prompt, 1.0, &mut rng).unwrap();
            assert!(dropped.is_null());
            assert_eq!(dropped.len(), prompt.len());
        }
    }

    #[test]
    fn drop_condition_rate_concentrates() {
        let prompt = PromptSpec::photo_of("A");
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 10_000;
        let nulls = (0..trials)
            .filter(|_| drop_condition(&prompt, 0.1, &mut rng).unwrap().is_null())
            .count();
        let frac = nulls as f64 / trials as f64;
        assert!((0.08..=0.12).contains(&frac), "null fraction {frac}");
    }

    #[test]
    fn overlapping_slots_rejected() {
        let err = PromptSpec::new(
            vec![PHOTO_OF.into(), "A".into()],
            vec![(1, "A".into()), (1, "A".into())],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn config_requires_two_layers() {
        let cfg = DenoiserConfig { n_layers: 1, ..DenoiserConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let w1 = test_weights(1);
        let w2 = test_weights(1);
        let w3 = test_weights(2);
        assert_eq!(w1.fingerprint(), w2.fingerprint());
        assert_ne!(w1.fingerprint(), w3.fingerprint());
    }

    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
