//! Knowledge injection.
//!
//! Each retrieved text becomes one vector `k` (the mean of its knowledge
//! embedding rows). At every injected layer two bias-free maps give
//! `phi_k = k W_k^T` and `phi_v = k W_v^T`, which are appended as extra
//! memory slots: the FFN becomes `gelu(H [K; phi_k]^T) [V; phi_v]`, so its
//! output is the original FFN plus `sum_i gelu(H phi_k[i]) phi_v[i]`.
//!
//! The attention baseline instead appends `phi_k`/`phi_v` to the key and
//! value sides of self-attention, sliced per head like ordinary keys.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{attention_heads, EncoderLayer, ModelError, Result};
use crate::numeric::{NumericError, Scalar, Tape, Var};
use crate::text::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// No external knowledge.
    None,
    /// Extra key-value slots in the FFN of selected layers.
    Ffn,
    /// Extra key-value slots in self-attention of selected layers.
    Attention,
    /// Knowledge text prepended to the input sequence.
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [Self::None, Self::Ffn, Self::Attention, Self::Concat];

    pub fn uses_slots(self) -> bool {
        matches!(self, Self::Ffn | Self::Attention)
    }

    pub fn uses_knowledge(self) -> bool {
        self != Self::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Ffn => "ffn",
            Self::Attention => "attention",
            Self::Concat => "concat",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}, expected one of none, ffn, attention, concat"))
    }
}

/// Which layers receive knowledge and how much is retrieved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionConfig {
    pub mode: FusionMode,
    /// 1-based layer indices.
    pub layers: BTreeSet<usize>,
    /// Knowledge texts kept after dense re-ranking (N).
    pub top_n: usize,
    /// Sparse candidates fetched before re-ranking (M).
    pub sparse_m: usize,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Ffn,
            layers: top_layers(4, 3),
            top_n: 5,
            sparse_m: 100,
        }
    }
}

/// The `count` highest layer indices of a `num_layers`-layer model.
pub fn top_layers(num_layers: usize, count: usize) -> BTreeSet<usize> {
    (num_layers.saturating_sub(count) + 1..=num_layers).collect()
}

impl InjectionConfig {
    /// FFN injection into the top three layers.
    pub fn default_for(num_layers: usize) -> Self {
        Self {
            layers: top_layers(num_layers, 3),
            ..Self::default()
        }
    }

    pub fn none() -> Self {
        Self {
            mode: FusionMode::None,
            layers: BTreeSet::new(),
            ..Self::default()
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if let Some(&l) = self.layers.iter().find(|&&l| l == 0 || l > num_layers) {
            return Err(ModelError::Config(format!(
                "injection layer {l} outside 1..={num_layers}"
            )));
        }
        if self.sparse_m == 0 {
            return Err(ModelError::Config("injection.sparse_m must be positive".into()));
        }
        if self.top_n > self.sparse_m {
            return Err(ModelError::Config(format!(
                "injection.top_n ({}) exceeds injection.sparse_m ({})",
                self.top_n, self.sparse_m
            )));
        }
        if self.mode == FusionMode::Concat && !self.layers.is_empty() {
            return Err(ModelError::Config(
                "injection.layers must be empty in concat mode".into(),
            ));
        }
        Ok(())
    }

    /// `"2;3;4"`-style label for tables and directory names.
    pub fn layers_label(&self) -> String {
        self.layers
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Projected knowledge `(phi_k, phi_v)` for each injected layer.
#[derive(Debug, Clone)]
pub struct KnowledgeSlots {
    count: usize,
    by_layer: BTreeMap<usize, (Var, Var)>,
}

impl KnowledgeSlots {
    pub fn new(count: usize) -> Self {
        Self {
            count,
            by_layer: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, layer: usize, phi_k: Var, phi_v: Var) {
        self.by_layer.insert(layer, (phi_k, phi_v));
    }

    pub fn get(&self, layer: usize) -> Option<(Var, Var)> {
        self.by_layer.get(&layer).copied()
    }

    pub fn layers(&self) -> impl Iterator<Item = &usize> {
        self.by_layer.keys()
    }

    /// Number of knowledge texts (N).
    pub fn count(&self) -> usize {
        self.count
    }
}

/// Mean of the knowledge-embedding rows of one text, as a `1 x d` row.
/// No position term is added.
pub fn embed_knowledge<S: Scalar>(tape: &mut Tape<'_, S>, table: Var, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(ModelError::Input("knowledge text has no tokens".into()));
    }
    let rows = tape.gather_rows(table, tokens)?;
    Ok(tape.mean_rows(rows)?)
}

/// Embeds each text and stacks them into `N x d`.
pub fn embed_knowledge_batch<S: Scalar>(
    tape: &mut Tape<'_, S>,
    table: Var,
    texts: &[Vec<usize>],
    max_len: usize,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(texts.len());
    for t in texts {
        if t.len() > max_len {
            return Err(ModelError::Input(format!(
                "knowledge text of {} tokens exceeds the limit of {max_len}",
                t.len()
            )));
        }
        rows.push(embed_knowledge(tape, table, t)?);
    }
    Ok(tape.concat_rows(&rows)?)
}

/// `(k W_k^T, k W_v^T)` for the projection pair of one layer.
pub fn project_knowledge<S: Scalar>(
    tape: &mut Tape<'_, S>,
    knowledge: Var,
    projection: Option<(Var, Var)>,
) -> Result<(Var, Var)> {
    let (wk, wv) = projection
        .ok_or_else(|| ModelError::Config("no knowledge projection for this layer".into()))?;
    let phi_k = tape.matmul_nt(knowledge, wk)?;
    let phi_v = tape.matmul_nt(knowledge, wv)?;
    Ok((phi_k, phi_v))
}

/// FFN with knowledge slots appended after the `d_m` original slots.
pub fn injected_ffn<S: Scalar>(
    tape: &mut Tape<'_, S>,
    h: Var,
    layer: &EncoderLayer,
    phi_k: Var,
    phi_v: Var,
) -> Result<Var> {
    Ok(injected_ffn_with_activations(tape, h, layer, phi_k, phi_v)?.0)
}

/// As [`injected_ffn`], also returning the `len x (d_m + N)` activations.
pub fn injected_ffn_with_activations<S: Scalar>(
    tape: &mut Tape<'_, S>,
    h: Var,
    layer: &EncoderLayer,
    phi_k: Var,
    phi_v: Var,
) -> Result<(Var, Var)> {
    check_width(tape, h, phi_k, phi_v, "injected_ffn")?;
    let keys = tape.concat_rows(&[layer.ffn_key, phi_k])?;
    let values = tape.concat_rows(&[layer.ffn_value, phi_v])?;
    let pre = tape.matmul_nt(h, keys)?;
    let act = tape.gelu(pre)?;
    let out = tape.matmul(act, values)?;
    Ok((out, act))
}

/// Self-attention whose keys and values are `[phi_k; H W_k^T]` and
/// `[phi_v; H W_v^T]`; every query attends over `N + len` slots.
pub fn injected_attention<S: Scalar>(
    tape: &mut Tape<'_, S>,
    h: Var,
    layer: &EncoderLayer,
    phi_k: Var,
    phi_v: Var,
) -> Result<Var> {
    Ok(injected_attention_with_weights(tape, h, layer, phi_k, phi_v)?.0)
}

pub fn injected_attention_with_weights<S: Scalar>(
    tape: &mut Tape<'_, S>,
    h: Var,
    layer: &EncoderLayer,
    phi_k: Var,
    phi_v: Var,
) -> Result<(Var, Vec<Var>)> {
    check_width(tape, h, phi_k, phi_v, "injected_attention")?;
    let q = tape.matmul_nt(h, layer.query)?;
    let k = tape.matmul_nt(h, layer.key)?;
    let v = tape.matmul_nt(h, layer.value)?;
    let k = tape.concat_rows(&[phi_k, k])?;
    let v = tape.concat_rows(&[phi_v, v])?;
    let (merged, weights) = attention_heads(tape, q, k, v, layer.num_heads)?;
    Ok((tape.matmul_nt(merged, layer.output)?, weights))
}

fn check_width<S: Scalar>(
    tape: &Tape<'_, S>,
    h: Var,
    phi_k: Var,
    phi_v: Var,
    op: &'static str,
) -> Result<()> {
    let d = tape.value(h).cols();
    for phi in [phi_k, phi_v] {
        if tape.value(phi).cols() != d {
            return Err(NumericError::Shape {
                op,
                lhs: tape.value(h).shape().to_vec(),
                rhs: tape.value(phi).shape().to_vec(),
            }
            .into());
        }
    }
    if tape.value(phi_k).rows() != tape.value(phi_v).rows() {
        return Err(NumericError::Shape {
            op,
            lhs: tape.value(phi_k).shape().to_vec(),
            rhs: tape.value(phi_v).shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `[CLS] K [SEP] Q [SEP] A`, or `[CLS] Q [SEP] A` when there is no
/// knowledge. `K` is the concatenation of the texts in the given order.
///
/// Over-long inputs lose knowledge tokens first, then the tail of the
/// question; the option is never cut. An option that cannot fit at all is
/// an error.
pub fn build_concat_input(
    cls: usize,
    sep: usize,
    question: &[usize],
    option: &[usize],
    knowledge_texts: &[Vec<usize>],
    max_len: usize,
) -> Result<TokenSequence> {
    let fixed = 2 + option.len();
    if fixed > max_len {
        return Err(ModelError::Input(format!(
            "option of {} tokens cannot fit in max_seq_len {max_len}",
            option.len()
        )));
    }
    let avail = max_len - fixed;
    let q_len = question.len().min(avail);
    let k_total: usize = knowledge_texts.iter().map(Vec::len).sum();
    // knowledge also needs its own [SEP]
    let k_len = if k_total > 0 && avail - q_len >= 2 {
        k_total.min(avail - q_len - 1)
    } else {
        0
    };

    let mut ids = Vec::with_capacity(fixed + q_len + k_len + 1);
    ids.push(cls);
    if k_len > 0 {
        ids.extend(knowledge_texts.iter().flatten().take(k_len));
        ids.push(sep);
    }
    ids.extend_from_slice(&question[..q_len]);
    ids.push(sep);
    ids.extend_from_slice(option);
    Ok(TokenSequence::new(ids))
}
