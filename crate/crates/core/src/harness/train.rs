use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::optim::{clip_grad_norm, learning_rate, AdamW};
use super::task::{McqExample, TaskData};
use super::{Experiment, HarnessError, Result, TrainConfig};
use crate::encoder::{McqInput, Model, ModelError};
use crate::numeric::{derive_seed, seeded_rng, NumericError, Scalar, Tape};
use crate::retrieval::{
    build_index, dense_rerank, InvertedIndex, KnowledgeCandidate, RetrievalError,
};
use crate::text::{tokenize, Vocab};

/// Hybrid retriever over the task corpus. The sparse stage depends only on
/// the question; the dense stage uses the model's current embeddings.
pub struct Retriever<'a> {
    index: InvertedIndex,
    vocab: &'a Vocab,
}

impl<'a> Retriever<'a> {
    pub fn new(data: &'a TaskData, k1: f64, b: f64) -> Result<Self> {
        Ok(Self {
            index: build_index(&data.corpus, k1, b)?,
            vocab: &data.vocab,
        })
    }

    /// Pairs a prebuilt index with the vocabulary of the model that will
    /// re-rank its candidates.
    pub fn from_parts(index: InvertedIndex, vocab: &'a Vocab) -> Self {
        Self { index, vocab }
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    pub fn vocab(&self) -> &Vocab {
        self.vocab
    }

    pub fn sparse(&self, question: &str, m: usize) -> Vec<KnowledgeCandidate> {
        self.index.sparse_retrieve(&tokenize(question), m)
    }

    /// Dense re-ranking of `candidates` with `model`'s embeddings.
    pub fn rerank<S: Scalar>(
        &self,
        model: &Model<S>,
        question: &str,
        candidates: Vec<KnowledgeCandidate>,
        n: usize,
    ) -> Result<Vec<KnowledgeCandidate>> {
        let q = to_f64(model.query_embedding(&self.vocab.encode(question))?);
        let embed = |tokens: &[String]| -> std::result::Result<Vec<f64>, RetrievalError> {
            model
                .knowledge_vector(&self.vocab.encode_tokens(tokens))
                .map(to_f64)
                .map_err(|e| RetrievalError::Embedding(e.to_string()))
        };
        Ok(dense_rerank(&q, candidates, self.index.corpus(), &embed, n)?)
    }

    pub fn retrieve<S: Scalar>(
        &self,
        model: &Model<S>,
        question: &str,
        m: usize,
        n: usize,
    ) -> Result<Vec<KnowledgeCandidate>> {
        let sparse = self.sparse(question, m);
        self.rerank(model, question, sparse, n.min(m))
    }
}

fn to_f64<S: Scalar>(v: Vec<S>) -> Vec<f64> {
    v.into_iter().map(|x| x.as_f64()).collect()
}

/// An example in model form, with the knowledge currently retrieved for it.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub input: McqInput,
    pub answer: usize,
    pub gold_fact_id: usize,
    pub knowledge_docs: Vec<usize>,
}

/// Tokenizes examples and attaches the top-N knowledge under `model`'s
/// fusion mode. Mode `none` skips retrieval entirely.
pub fn prepare<S: Scalar>(
    model: &Model<S>,
    retriever: &Retriever<'_>,
    examples: &[McqExample],
) -> Result<Vec<PreparedExample>> {
    let inj = model.injection();
    let vocab = retriever.vocab();
    examples
        .iter()
        .map(|ex| {
            ex.validate()?;
            let docs = if inj.mode.uses_knowledge() && inj.top_n > 0 {
                retriever.retrieve(model, &ex.question, inj.sparse_m, inj.top_n)?
            } else {
                Vec::new()
            };
            let corpus = retriever.index().corpus();
            Ok(PreparedExample {
                input: McqInput {
                    question: vocab.encode(&ex.question),
                    options: ex.options.iter().map(|o| vocab.encode(o)).collect(),
                    knowledge: docs
                        .iter()
                        .map(|c| vocab.encode_tokens(&corpus.documents()[c.doc_id].tokens))
                        .collect(),
                },
                answer: ex.answer,
                gold_fact_id: ex.gold_fact_id,
                knowledge_docs: docs.iter().map(|c| c.doc_id).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub correct: Vec<bool>,
}

/// Fraction of examples whose highest-probability option is the answer.
/// Ties go to the lowest option index.
pub fn evaluate<S: Scalar>(model: &Model<S>, examples: &[PreparedExample], vocab: &Vocab) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(HarnessError::Data("cannot evaluate on an empty dataset".into()));
    }
    let (cls, sep) = (vocab.cls(), vocab.sep());
    let predictions = examples
        .par_iter()
        .map(|ex| {
            let p = model.mcq_score(&ex.input, cls, sep)?;
            Ok(argmax(&p))
        })
        .collect::<Result<Vec<usize>>>()?;
    let correct: Vec<bool> = predictions
        .iter()
        .zip(examples)
        .map(|(&p, ex)| p == ex.answer)
        .collect();
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(EvalReport {
        accuracy: hits as f64 / examples.len() as f64,
        predictions,
        correct,
    })
}

fn argmax<S: Scalar>(p: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Forward and backward over `batch`, then one clipped AdamW update.
/// Returns the mean loss before the update.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut AdamW<S>,
    batch: &[&PreparedExample],
    vocab: &Vocab,
    lr: f64,
    clip_norm: f64,
) -> Result<f64> {
    let (cls, sep) = (vocab.cls(), vocab.sep());
    model.params_mut().zero_grads();
    let scale = S::lit(1.0 / batch.len() as f64);
    let mut total = 0.0;
    for ex in batch {
        let grads = {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let loss = model.mcq_loss(&mut tape, &vars, &ex.input, ex.answer, cls, sep)?;
            total += tape.value(loss).item()?.as_f64();
            tape.backward(loss)?
        };
        model.params_mut().accumulate_grads(&grads, scale);
    }
    let mean = total / batch.len() as f64;
    if !mean.is_finite() {
        return Err(NumericError::NonFinite { op: "loss" }.into());
    }
    clip_grad_norm(model.params_mut(), clip_norm);
    opt.step(model.params_mut(), lr);
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub dev_accuracy: f64,
}

fn diverged(step: usize, e: HarnessError) -> HarnessError {
    match e {
        HarnessError::Model(ModelError::Numeric(n)) => HarnessError::Divergence {
            step,
            detail: n.to_string(),
        },
        other => other,
    }
}

/// Trains on `data.train`, re-retrieving knowledge before every epoch
/// (only before the first when retrieval is frozen), and evaluates on
/// `data.dev` after each epoch.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    data: &TaskData,
    retriever: &Retriever<'_>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(HarnessError::Data("empty training set".into()));
    }
    let vocab = retriever.vocab();
    let mut opt = AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut rng = seeded_rng(derive_seed(cfg.seed, 2));
    let per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut train_set = prepare(model, retriever, &data.train)?;
    let mut dev_set = prepare(model, retriever, &data.dev)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = 0.0;
    for epoch in 0..cfg.epochs {
        if epoch > 0 && !cfg.freeze_retrieval && model.injection().mode.uses_knowledge() {
            train_set = prepare(model, retriever, &data.train)?;
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            lr = learning_rate(cfg.lr, step, cfg.warmup_steps, total);
            let loss = train_step(model, &mut opt, &batch, vocab, lr, cfg.clip_norm)
                .map_err(|e| diverged(step, e))?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        if !cfg.freeze_retrieval && model.injection().mode.uses_knowledge() {
            dev_set = prepare(model, retriever, &data.dev)?;
        }
        let dev_accuracy = if dev_set.is_empty() {
            f64::NAN
        } else {
            evaluate(model, &dev_set, vocab)?.accuracy
        };
        history.push(EpochMetrics {
            epoch,
            step,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            dev_accuracy,
        });
    }
    let dev_accuracy = history.last().map_or(f64::NAN, |h| h.dev_accuracy);
    Ok(TrainReport {
        history,
        dev_accuracy,
    })
}

/// A freshly initialized model sized to the task vocabulary.
pub fn build_model<S: Scalar>(exp: &Experiment, data: &TaskData) -> Result<Model<S>> {
    let mut config = exp.model.clone();
    config.vocab_size = data.vocab.len();
    Ok(Model::new(config, exp.injection.clone())?)
}

pub struct RunOutcome<S: Scalar> {
    pub model: Model<S>,
    pub report: TrainReport,
}

pub fn run_experiment<S: Scalar>(exp: &Experiment, data: &TaskData) -> Result<RunOutcome<S>> {
    exp.validate()?;
    let retriever = Retriever::new(data, exp.retrieval.k1, exp.retrieval.b)?;
    let mut model = build_model(exp, data)?;
    let report = train(&mut model, data, &retriever, &exp.train)?;
    Ok(RunOutcome { model, report })
}
