//! A small pre-norm transformer encoder with a multiple-choice head.
//!
//! Each layer computes `x += attn(norm1(x)); x += ffn(norm2(x))`. The FFN is
//! the bias-free key-value memory `gelu(h K^T) V` with `K, V: [d_m x d]`,
//! which is exactly the structure knowledge injection extends with extra
//! slots.

pub mod checkpoint;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::injection::{self, FusionMode, InjectionConfig, KnowledgeSlots};
use crate::numeric::{
    derive_seed, grad_check, seeded_rng, GradCheckOptions, GradCheckReport, NumericError, ParamId,
    ParamStore, Scalar, Tape, Tensor, Var,
};
use crate::text::TokenSequence;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Set from the run seed, never from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            intermediate: 256,
            num_heads: 4,
            vocab_size: 128,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("model.{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "model.hidden ({}) must be divisible by model.num_heads ({})",
                self.hidden, self.num_heads
            )));
        }
        if self.intermediate < self.hidden {
            return Err(ModelError::Config(format!(
                "model.intermediate ({}) must be at least model.hidden ({})",
                self.intermediate, self.hidden
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }
}

/// Parameter handles of one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerIds {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub ffn_key: ParamId,
    pub ffn_value: ParamId,
    pub norm1: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
    /// `(W_k, W_v)` when knowledge is injected at this layer.
    pub projection: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
struct ParamIds {
    token_embedding: ParamId,
    position_embedding: ParamId,
    layers: Vec<LayerIds>,
    final_norm: (ParamId, ParamId),
    head: ParamId,
    knowledge_embedding: Option<ParamId>,
}

/// Tape handles for one encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
    /// `K: [d_m x d]`
    pub ffn_key: Var,
    /// `V: [d_m x d]`
    pub ffn_value: Var,
    pub norm1: (Var, Var),
    pub norm2: (Var, Var),
    pub projection: Option<(Var, Var)>,
    pub num_heads: usize,
}

/// All model parameters bound to a tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: (Var, Var),
    pub head: Var,
    pub knowledge_embedding: Option<Var>,
}

/// One multiple-choice instance in token-id form.
#[derive(Debug, Clone, PartialEq)]
pub struct McqInput {
    pub question: Vec<usize>,
    pub options: Vec<Vec<usize>>,
    /// Retrieved knowledge texts, highest score first.
    pub knowledge: Vec<Vec<usize>>,
}

/// Knowledge-column activations captured at one injected FFN layer.
#[derive(Debug, Clone)]
pub struct KnowledgeActivation {
    /// 1-based layer index.
    pub layer: usize,
    pub var: Var,
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    config: ModelConfig,
    injection: InjectionConfig,
    params: ParamStore<S>,
    ids: ParamIds,
}

impl<S: Scalar> Model<S> {
    /// Builds a freshly initialized model. Encoder weights come from one
    /// seeded stream and injection weights from another, so the encoder is
    /// identical whatever the injection settings.
    pub fn new(config: ModelConfig, injection: InjectionConfig) -> Result<Self> {
        config.validate()?;
        injection.validate(config.num_layers)?;
        let (d, dm, v) = (config.hidden, config.intermediate, config.vocab_size);
        let mut rng = seeded_rng(derive_seed(config.seed, 0));
        let mut inj_rng = seeded_rng(derive_seed(config.seed, 1));
        let mut params = ParamStore::new();

        let normal = |rng: &mut dyn rand::RngCore, shape: &[usize]| Tensor::randn(shape, INIT_STD, rng);
        let token_embedding = params.insert("embeddings.token", normal(&mut rng, &[v, d]))?;
        let position_embedding =
            params.insert("embeddings.position", normal(&mut rng, &[config.max_seq_len, d]))?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 1..=config.num_layers {
            let p = |role: &str| format!("layer.{l}.{role}");
            let query = params.insert(p("attn.query"), normal(&mut rng, &[d, d]))?;
            let key = params.insert(p("attn.key"), normal(&mut rng, &[d, d]))?;
            let value = params.insert(p("attn.value"), normal(&mut rng, &[d, d]))?;
            let output = params.insert(p("attn.output"), normal(&mut rng, &[d, d]))?;
            let ffn_key = params.insert(p("ffn.key"), normal(&mut rng, &[dm, d]))?;
            let ffn_value = params.insert(p("ffn.value"), normal(&mut rng, &[dm, d]))?;
            let norm1 = (
                params.insert(p("norm1.gamma"), Tensor::full(&[d], S::one()))?,
                params.insert(p("norm1.beta"), Tensor::zeros(&[d]))?,
            );
            let norm2 = (
                params.insert(p("norm2.gamma"), Tensor::full(&[d], S::one()))?,
                params.insert(p("norm2.beta"), Tensor::zeros(&[d]))?,
            );
            layers.push(LayerIds {
                query,
                key,
                value,
                output,
                ffn_key,
                ffn_value,
                norm1,
                norm2,
                projection: None,
            });
        }
        let final_norm = (
            params.insert("final_norm.gamma", Tensor::full(&[d], S::one()))?,
            params.insert("final_norm.beta", Tensor::zeros(&[d]))?,
        );
        let head = params.insert("head.weight", normal(&mut rng, &[1, d]))?;

        let mut knowledge_embedding = None;
        if injection.mode.uses_slots() {
            // starts as a copy of the input embedding, then trains on its own
            let copy = params.value(token_embedding).clone();
            knowledge_embedding = Some(params.insert("knowledge.embedding", copy)?);
            for &l in &injection.layers {
                let wk = params.insert(
                    format!("layer.{l}.inject.key_proj"),
                    normal(&mut inj_rng, &[d, d]),
                )?;
                let wv = params.insert(
                    format!("layer.{l}.inject.value_proj"),
                    normal(&mut inj_rng, &[d, d]),
                )?;
                layers[l - 1].projection = Some((wk, wv));
            }
        }

        Ok(Self {
            config,
            injection,
            params,
            ids: ParamIds {
                token_embedding,
                position_embedding,
                layers,
                final_norm,
                head,
                knowledge_embedding,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn injection(&self) -> &InjectionConfig {
        &self.injection
    }

    /// The same weights under different retrieval sizes. The fusion mode and
    /// layers must match, since they determine the parameter layout.
    pub fn with_injection(&self, injection: InjectionConfig) -> Result<Self> {
        if injection.mode != self.injection.mode || injection.layers != self.injection.layers {
            return Err(ModelError::Config(
                "only injection.top_n and injection.sparse_m can change on a built model".into(),
            ));
        }
        injection.validate(self.config.num_layers)?;
        let mut m = self.clone();
        m.injection = injection;
        Ok(m)
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn layer_ids(&self, layer: usize) -> Option<&LayerIds> {
        layer.checked_sub(1).and_then(|i| self.ids.layers.get(i))
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.ids.token_embedding
    }

    pub fn knowledge_embedding_id(&self) -> Option<ParamId> {
        self.ids.knowledge_embedding
    }

    /// Overwrites a named parameter.
    pub fn set_param(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| ModelError::Config(format!("no parameter named {name}")))?;
        Ok(self.params.set_value(id, value)?)
    }

    /// Registers every parameter on `tape`.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, S>) -> ModelVars {
        self.bind_with(&self.params, tape)
    }

    /// Binds a parameter store laid out like this model's own (for example
    /// a perturbed copy) onto `tape`.
    pub fn bind_with<'p>(&self, p: &'p ParamStore<S>, tape: &mut Tape<'p, S>) -> ModelVars {
        let layers = self
            .ids
            .layers
            .iter()
            .map(|l| EncoderLayer {
                query: tape.param(p, l.query),
                key: tape.param(p, l.key),
                value: tape.param(p, l.value),
                output: tape.param(p, l.output),
                ffn_key: tape.param(p, l.ffn_key),
                ffn_value: tape.param(p, l.ffn_value),
                norm1: (tape.param(p, l.norm1.0), tape.param(p, l.norm1.1)),
                norm2: (tape.param(p, l.norm2.0), tape.param(p, l.norm2.1)),
                projection: l.projection.map(|(k, v)| (tape.param(p, k), tape.param(p, v))),
                num_heads: self.config.num_heads,
            })
            .collect();
        ModelVars {
            token_embedding: tape.param(p, self.ids.token_embedding),
            position_embedding: tape.param(p, self.ids.position_embedding),
            layers,
            final_norm: (
                tape.param(p, self.ids.final_norm.0),
                tape.param(p, self.ids.final_norm.1),
            ),
            head: tape.param(p, self.ids.head),
            knowledge_embedding: self.ids.knowledge_embedding.map(|k| tape.param(p, k)),
        }
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        if seq.is_empty() {
            return Err(ModelError::Input("token sequence is empty".into()));
        }
        if seq.len() > self.config.max_seq_len {
            return Err(ModelError::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                seq.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token embedding plus learned position embedding, one row per token.
    pub fn embed_tokens(
        &self,
        tape: &mut Tape<'_, S>,
        vars: &ModelVars,
        seq: &TokenSequence,
    ) -> Result<Var> {
        self.check_sequence(seq)?;
        let tok = tape.gather_rows(vars.token_embedding, &seq.ids)?;
        let positions: Vec<usize> = (0..seq.len()).collect();
        let pos = tape.gather_rows(vars.position_embedding, &positions)?;
        Ok(tape.add(tok, pos)?)
    }

    /// Runs every layer; at layers carrying knowledge slots the FFN (or
    /// attention, per fusion mode) is replaced by its injected variant.
    pub fn encode(
        &self,
        tape: &mut Tape<'_, S>,
        vars: &ModelVars,
        seq: &TokenSequence,
        slots: Option<&KnowledgeSlots>,
    ) -> Result<Var> {
        self.encode_traced(tape, vars, seq, slots, None)
    }

    pub(crate) fn encode_traced(
        &self,
        tape: &mut Tape<'_, S>,
        vars: &ModelVars,
        seq: &TokenSequence,
        slots: Option<&KnowledgeSlots>,
        mut capture: Option<&mut Vec<KnowledgeActivation>>,
    ) -> Result<Var> {
        if let Some(s) = slots {
            if let Some(&bad) = s.layers().find(|&&l| l == 0 || l > self.config.num_layers) {
                return Err(ModelError::Config(format!(
                    "knowledge slots target layer {bad}, model has {}",
                    self.config.num_layers
                )));
            }
        }
        let mut x = self.embed_tokens(tape, vars, seq)?;
        for (i, layer) in vars.layers.iter().enumerate() {
            let l = i + 1;
            let slot = slots.and_then(|s| s.get(l));
            let h = tape.layer_norm(x, layer.norm1.0, layer.norm1.1)?;
            let attn = match (self.injection.mode, slot) {
                (FusionMode::Attention, Some((pk, pv))) => {
                    injection::injected_attention(tape, h, layer, pk, pv)?
                }
                _ => self_attention(tape, h, layer)?,
            };
            x = tape.add(x, attn)?;
            let h = tape.layer_norm(x, layer.norm2.0, layer.norm2.1)?;
            let ffn = match (self.injection.mode, slot) {
                (FusionMode::Ffn, Some((pk, pv))) => {
                    let (out, act) = injection::injected_ffn_with_activations(tape, h, layer, pk, pv)?;
                    if let Some(cap) = capture.as_deref_mut() {
                        let dm = tape.value(layer.ffn_key).rows();
                        let width = tape.value(act).cols();
                        let knowledge = tape.slice_cols(act, dm, width)?;
                        cap.push(KnowledgeActivation {
                            layer: l,
                            var: knowledge,
                        });
                    }
                    out
                }
                _ => ffn_forward(tape, h, layer)?,
            };
            x = tape.add(x, ffn)?;
        }
        Ok(tape.layer_norm(x, vars.final_norm.0, vars.final_norm.1)?)
    }

    /// Scalar score of one sequence: the head applied to the `[CLS]` row.
    pub fn sequence_logit(
        &self,
        tape: &mut Tape<'_, S>,
        vars: &ModelVars,
        seq: &TokenSequence,
        slots: Option<&KnowledgeSlots>,
    ) -> Result<Var> {
        let h = self.encode(tape, vars, seq, slots)?;
        let cls = tape.slice_rows(h, 0, 1)?;
        Ok(tape.matmul_nt(cls, vars.head)?)
    }

    /// Builds the per-option input sequences for this model's fusion mode.
    pub fn option_sequences(
        &self,
        input: &McqInput,
        cls: usize,
        sep: usize,
    ) -> Result<Vec<TokenSequence>> {
        if input.options.len() < 2 {
            return Err(ModelError::Input(format!(
                "need at least 2 options, got {}",
                input.options.len()
            )));
        }
        let knowledge: &[Vec<usize>] = if self.injection.mode == FusionMode::Concat {
            &input.knowledge
        } else {
            &[]
        };
        input
            .options
            .iter()
            .map(|opt| {
                injection::build_concat_input(
                    cls,
                    sep,
                    &input.question,
                    opt,
                    knowledge,
                    self.config.max_seq_len,
                )
            })
            .collect()
    }

    /// Embeds and projects the knowledge for every injected layer, or
    /// `None` when the fusion mode does not use slots.
    pub fn knowledge_slots(
        &self,
        tape: &mut Tape<'_, S>,
        vars: &ModelVars,
        knowledge: &[Vec<usize>],
    ) -> Result<Option<KnowledgeSlots>> {
        if !self.injection.mode.uses_slots() || knowledge.is_empty() {
            return Ok(None);
        }
        let table = vars
            .knowledge_embedding
            .ok_or_else(|| ModelError::Config("model has no knowledge embedder".into()))?;
        let k = injection::embed_knowledge_batch(tape, table, knowledge, self.config.max_seq_len)?;
        let mut slots = KnowledgeSlots::new(knowledge.len());
        for (i, layer) in vars.layers.iter().enumerate() {
            if let Some(proj) = layer.projection {
                let (pk, pv) = injection::project_knowledge(tape, k, Some(proj))?;
                slots.insert(i + 1, pk, pv);
            }
        }
        Ok(Some(slots))
    }

    /// Option logits as a `1 x n_options` row.
    pub fn mcq_logits(
        &self,
        tape: &mut Tape<'_, S>,
        vars: &ModelVars,
        input: &McqInput,
        cls: usize,
        sep: usize,
    ) -> Result<Var> {
        let seqs = self.option_sequences(input, cls, sep)?;
        let slots = self.knowledge_slots(tape, vars, &input.knowledge)?;
        let logits = seqs
            .iter()
            .map(|s| self.sequence_logit(tape, vars, s, slots.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat_cols(&logits)?)
    }

    /// Cross-entropy of the labeled option.
    pub fn mcq_loss(
        &self,
        tape: &mut Tape<'_, S>,
        vars: &ModelVars,
        input: &McqInput,
        answer: usize,
        cls: usize,
        sep: usize,
    ) -> Result<Var> {
        let logits = self.mcq_logits(tape, vars, input, cls, sep)?;
        Ok(tape.cross_entropy(logits, answer)?)
    }

    /// Probability of each option (softmax across options).
    pub fn mcq_score(&self, input: &McqInput, cls: usize, sep: usize) -> Result<Vec<S>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let logits = self.mcq_logits(&mut tape, &vars, input, cls, sep)?;
        Ok(tape.value(logits).softmax_rows()?.into_data())
    }

    /// Knowledge-column activations `gelu(H phi_k^T)` at each injected FFN
    /// layer for one input sequence.
    pub fn knowledge_activations(
        &self,
        seq: &TokenSequence,
        knowledge: &[Vec<usize>],
    ) -> Result<Vec<(usize, Tensor<S>)>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let slots = self.knowledge_slots(&mut tape, &vars, knowledge)?;
        let mut captured = Vec::new();
        self.encode_traced(&mut tape, &vars, seq, slots.as_ref(), Some(&mut captured))?;
        Ok(captured
            .into_iter()
            .map(|c| (c.layer, tape.value(c.var).clone()))
            .collect())
    }

    /// Mean of the input-embedding rows of `ids`, used as the query vector
    /// for dense re-ranking.
    pub fn query_embedding(&self, ids: &[usize]) -> Result<Vec<S>> {
        mean_rows_of(self.params.value(self.ids.token_embedding), ids)
    }

    /// Mean of the knowledge-embedding rows of `ids`.
    pub fn knowledge_vector(&self, ids: &[usize]) -> Result<Vec<S>> {
        let id = self
            .ids
            .knowledge_embedding
            .unwrap_or(self.ids.token_embedding);
        mean_rows_of(self.params.value(id), ids)
    }
}

impl<S: Scalar> Model<S> {
    /// Checks tape gradients of `loss` against central differences over
    /// every parameter of the model.
    pub fn grad_check<F>(&mut self, opts: &GradCheckOptions, loss: F) -> Result<GradCheckReport>
    where
        F: for<'p> Fn(&Model<S>, &ModelVars, &mut Tape<'p, S>) -> Result<Var>,
    {
        let layout = self.clone();
        let report = grad_check(
            &mut self.params,
            |store, tape| {
                let vars = layout.bind_with(store, tape);
                loss(&layout, &vars, tape).map_err(|e| match e {
                    ModelError::Numeric(n) => n,
                    other => NumericError::Contract {
                        op: "grad_check",
                        msg: other.to_string(),
                    },
                })
            },
            opts,
        )?;
        Ok(report)
    }
}

fn mean_rows_of<S: Scalar>(table: &Tensor<S>, ids: &[usize]) -> Result<Vec<S>> {
    if ids.is_empty() {
        return Err(ModelError::Input("cannot embed an empty token list".into()));
    }
    Ok(table.gather_rows(ids)?.mean_rows()?.into_data())
}

/// Multi-head scaled dot-product attention over `keys`/`values` already
/// projected to width `d`. Returns the merged head outputs (before the
/// output projection) and each head's attention weights.
pub(crate) fn attention_heads<S: Scalar>(
    tape: &mut Tape<'_, S>,
    q: Var,
    k: Var,
    v: Var,
    num_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(q).cols();
    let dh = d / num_heads;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    let mut outs = Vec::with_capacity(num_heads);
    let mut weights = Vec::with_capacity(num_heads);
    for head in 0..num_heads {
        let (a, b) = (head * dh, (head + 1) * dh);
        let (qh, kh, vh) = if num_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, a, b)?,
                tape.slice_cols(k, a, b)?,
                tape.slice_cols(v, a, b)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let p = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(p, vh)?);
        weights.push(p);
    }
    let merged = if num_heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    Ok((merged, weights))
}

/// Self-attention sublayer output (the caller adds the residual).
pub fn self_attention<S: Scalar>(
    tape: &mut Tape<'_, S>,
    h: Var,
    layer: &EncoderLayer,
) -> Result<Var> {
    Ok(self_attention_with_weights(tape, h, layer)?.0)
}

pub fn self_attention_with_weights<S: Scalar>(
    tape: &mut Tape<'_, S>,
    h: Var,
    layer: &EncoderLayer,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(layer.query).rows();
    if tape.value(h).cols() != d {
        return Err(NumericError::Shape {
            op: "self_attention",
            lhs: tape.value(h).shape().to_vec(),
            rhs: vec![d, d],
        }
        .into());
    }
    let q = tape.matmul_nt(h, layer.query)?;
    let k = tape.matmul_nt(h, layer.key)?;
    let v = tape.matmul_nt(h, layer.value)?;
    let (merged, weights) = attention_heads(tape, q, k, v, layer.num_heads)?;
    Ok((tape.matmul_nt(merged, layer.output)?, weights))
}

/// `gelu(H K^T) V`, no biases.
pub fn ffn_forward<S: Scalar>(tape: &mut Tape<'_, S>, h: Var, layer: &EncoderLayer) -> Result<Var> {
    let pre = tape.matmul_nt(h, layer.ffn_key)?;
    let act = tape.gelu(pre)?;
    Ok(tape.matmul(act, layer.ffn_value)?)
}

#[cfg(test)]
mod tests;
