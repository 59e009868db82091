use std::collections::BTreeSet;

use serde::Serialize;

use super::task::{McqExample, TaskData};
use super::train::{evaluate, prepare, run_experiment, EpochMetrics, PreparedExample, Retriever};
use super::{Experiment, HarnessError, Result};
use crate::encoder::Model;
use crate::injection::{FusionMode, InjectionConfig};
use crate::numeric::Scalar;

/// One line of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: String,
    pub layers: String,
    pub top_n: usize,
    pub sparse_m: usize,
    pub seed: u64,
    pub dev_accuracy: f64,
}

impl SweepRow {
    fn new(inj: &InjectionConfig, seed: u64, dev_accuracy: f64) -> Self {
        Self {
            mode: inj.mode.to_string(),
            layers: inj.layers_label(),
            top_n: inj.top_n,
            sparse_m: inj.sparse_m,
            seed,
            dev_accuracy,
        }
    }
}

/// A sweep table plus the per-epoch history of every training run, keyed
/// by row index.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub histories: Vec<(usize, Vec<EpochMetrics>)>,
}

/// Dev accuracy for each top-N. With `retrain` every N gets its own
/// training run; otherwise one model trained at the base N is re-evaluated
/// with N candidates re-retrieved per question.
pub fn sweep_topn<S: Scalar>(
    base: &Experiment,
    data: &TaskData,
    ns: &[usize],
    retrain: bool,
) -> Result<Sweep> {
    if let Some(&n) = ns.iter().find(|&&n| n > base.injection.sparse_m) {
        return Err(HarnessError::Config(format!(
            "top_n {n} exceeds injection.sparse_m {}",
            base.injection.sparse_m
        )));
    }
    let seed = base.model.seed;
    let mut sweep = Sweep {
        rows: Vec::new(),
        histories: Vec::new(),
    };
    if retrain {
        for (i, &n) in ns.iter().enumerate() {
            let mut exp = base.clone();
            exp.injection.top_n = n;
            let out = run_experiment::<S>(&exp, data)?;
            sweep.rows.push(SweepRow::new(&exp.injection, seed, out.report.dev_accuracy));
            sweep.histories.push((i, out.report.history));
        }
        return Ok(sweep);
    }
    let out = run_experiment::<S>(base, data)?;
    let retriever = Retriever::new(data, base.retrieval.k1, base.retrieval.b)?;
    for &n in ns {
        let mut inj = base.injection.clone();
        inj.top_n = n;
        let model = out.model.with_injection(inj.clone())?;
        let dev = prepare(&model, &retriever, &data.dev)?;
        let acc = evaluate(&model, &dev, retriever.vocab())?.accuracy;
        sweep.rows.push(SweepRow::new(&inj, seed, acc));
    }
    sweep.histories.push((usize::MAX, out.report.history));
    Ok(sweep)
}

/// Bottom, middle and top windows of `ceil(L/3)` layers, then the empty
/// set.
pub fn standard_layer_sets(num_layers: usize) -> Vec<BTreeSet<usize>> {
    let g = num_layers.div_ceil(3).max(1);
    let window = |start: usize| (start..start + g).collect::<BTreeSet<usize>>();
    vec![
        window(num_layers + 1 - g),
        window((num_layers - g) / 2 + 1),
        window(1),
        BTreeSet::new(),
    ]
}

/// One training run per layer set, plus an all-layers row when the sets
/// do not already include it. The empty set trains the no-knowledge
/// baseline.
pub fn sweep_layers<S: Scalar>(
    base: &Experiment,
    data: &TaskData,
    sets: &[BTreeSet<usize>],
) -> Result<Sweep> {
    let mode = match base.injection.mode {
        FusionMode::Ffn | FusionMode::Attention => base.injection.mode,
        other => return Err(HarnessError::UnsupportedMode(other.to_string())),
    };
    let all: BTreeSet<usize> = (1..=base.model.num_layers).collect();
    let mut sets = sets.to_vec();
    if !sets.contains(&all) {
        sets.push(all);
    }
    let seed = base.model.seed;
    let mut sweep = Sweep {
        rows: Vec::new(),
        histories: Vec::new(),
    };
    for (i, set) in sets.into_iter().enumerate() {
        let mut exp = base.clone();
        exp.injection.mode = if set.is_empty() { FusionMode::None } else { mode };
        exp.injection.layers = set;
        let out = run_experiment::<S>(&exp, data)?;
        sweep.rows.push(SweepRow::new(&exp.injection, seed, out.report.dev_accuracy));
        sweep.histories.push((i, out.report.history));
    }
    Ok(sweep)
}

/// `gelu(H phi_k^T)` at one injected layer: rows are input tokens, columns
/// the retrieved knowledge texts in ranking order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationMatrix {
    pub example_id: usize,
    pub layer: usize,
    pub knowledge: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl ActivationMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.matrix.len(), self.knowledge.len())
    }

    pub fn column_means(&self) -> Vec<f64> {
        let rows = self.matrix.len().max(1) as f64;
        (0..self.knowledge.len())
            .map(|j| self.matrix.iter().map(|r| r[j]).sum::<f64>() / rows)
            .collect()
    }
}

/// Knowledge activations of `example` read with its answer option, i.e.
/// on the sequence `[CLS] question [SEP] answer`.
pub fn dump_activations<S: Scalar>(
    model: &Model<S>,
    retriever: &Retriever<'_>,
    example_id: usize,
    example: &PreparedExample,
) -> Result<Vec<ActivationMatrix>> {
    if model.injection().mode != FusionMode::Ffn {
        return Err(HarnessError::UnsupportedMode(model.injection().mode.to_string()));
    }
    let vocab = retriever.vocab();
    let seqs = model.option_sequences(&example.input, vocab.cls(), vocab.sep())?;
    let seq = &seqs[example.answer];
    let corpus = retriever.index().corpus();
    let knowledge: Vec<String> = example
        .knowledge_docs
        .iter()
        .map(|&d| corpus.documents()[d].text.clone())
        .collect();
    Ok(model
        .knowledge_activations(seq, &example.input.knowledge)?
        .into_iter()
        .map(|(layer, t)| ActivationMatrix {
            example_id,
            layer,
            knowledge: knowledge.clone(),
            matrix: (0..t.rows())
                .map(|i| t.row(i).iter().map(|x| x.as_f64()).collect())
                .collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoldColumnReport {
    /// Correctly answered examples.
    pub considered: usize,
    /// Of those, how many had the gold fact among the retrieved texts.
    pub gold_retrieved: usize,
    /// Of those considered, how many put the largest column mean (averaged
    /// over injected layers) on the gold fact.
    pub gold_is_max: usize,
    pub rate: f64,
}

/// How often the gold fact's column is the most activated one on
/// correctly answered examples.
pub fn gold_column_rate<S: Scalar>(
    model: &Model<S>,
    retriever: &Retriever<'_>,
    examples: &[McqExample],
) -> Result<GoldColumnReport> {
    let prepared = prepare(model, retriever, examples)?;
    let report = evaluate(model, &prepared, retriever.vocab())?;
    let mut r = GoldColumnReport {
        considered: 0,
        gold_retrieved: 0,
        gold_is_max: 0,
        rate: f64::NAN,
    };
    for (i, ex) in prepared.iter().enumerate() {
        if !report.correct[i] {
            continue;
        }
        r.considered += 1;
        let Some(gold) = ex.knowledge_docs.iter().position(|&d| d == ex.gold_fact_id) else {
            continue;
        };
        r.gold_retrieved += 1;
        let mats = dump_activations(model, retriever, i, ex)?;
        let mut means = vec![0.0; ex.knowledge_docs.len()];
        for m in &mats {
            for (acc, x) in means.iter_mut().zip(m.column_means()) {
                *acc += x / mats.len() as f64;
            }
        }
        let best = (0..means.len())
            .fold(0, |b, j| if means[j] > means[b] { j } else { b });
        if best == gold {
            r.gold_is_max += 1;
        }
    }
    if r.considered > 0 {
        r.rate = r.gold_is_max as f64 / r.considered as f64;
    }
    Ok(r)
}
