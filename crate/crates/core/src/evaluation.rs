//! Zero-shot classification, linear probing and dataset diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::normalize;
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::knowledge::{normalize_query, KnowledgeSource, KnowledgeStore};
use crate::prompt::{compose_class_text, truncate_to_budget, PromptTemplate};
use crate::query::{construct_query, FrequencyTable, Lexicon, TextKind};
use crate::trainer::Triplet;
use crate::vocab::{Pooling, Vocab};

pub const PROBE_SEEDS: [u64; 3] = [0, 1, 2];
const PROBE_STEPS: usize = 500;
const PROBE_L2: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    /// Every text through the base encoder.
    OneBranch,
    /// Every text through the adapter branch.
    AdapterBranch,
    /// Knowledge hits through the adapter branch, misses through the base.
    TwoBranchSelective,
}

impl FromStr for BranchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_branch" => Ok(BranchMode::OneBranch),
            "adapter_branch" => Ok(BranchMode::AdapterBranch),
            "two_branch_selective" => Ok(BranchMode::TwoBranchSelective),
            other => Err(Error::Config(format!("unknown branch mode '{other}'"))),
        }
    }
}

/// The composed texts for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassText {
    pub name: String,
    pub knowledge: Option<String>,
    /// One text per template.
    pub texts: Vec<String>,
}

/// Compose the per-template texts for every class name.
pub fn class_texts<S: AsRef<str>>(
    class_names: &[S],
    templates: &[PromptTemplate],
    store: &KnowledgeStore,
    source: Option<&KnowledgeSource>,
    token_budget: usize,
) -> Result<Vec<ClassText>> {
    if class_names.is_empty() {
        return Err(Error::invalid("empty class list"));
    }
    if templates.is_empty() {
        return Err(Error::invalid("at least one prompt template is required"));
    }
    let empty = FrequencyTable::default();
    let lexicon = Lexicon::default();
    class_names
        .iter()
        .map(|name| {
            let q = construct_query(name.as_ref(), TextKind::Category, &empty, &lexicon)?;
            let knowledge = match source {
                Some(src) => store.retrieve(&q.text, src)?.map(|k| k.text),
                None => None,
            };
            let texts = templates
                .iter()
                .map(|t| {
                    let aug = compose_class_text(t, &q.text, knowledge.as_deref())?;
                    Ok(truncate_to_budget(&aug, token_budget).text)
                })
                .collect::<Result<_>>()?;
            Ok(ClassText {
                name: name.as_ref().to_string(),
                knowledge,
                texts,
            })
        })
        .collect()
}

/// `P × C` matrix with one unit column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    pub matrix: Array2<f64>,
    pub classes: Vec<ClassText>,
    /// Whether class `c` went through the adapter branch.
    pub adapter_branch: Vec<bool>,
}

pub fn embed_class_texts(
    params: &ModelParams,
    vocab: &Vocab,
    classes: Vec<ClassText>,
    mode: BranchMode,
) -> Result<ClassEmbeddings> {
    if classes.is_empty() {
        return Err(Error::invalid("empty class list"));
    }
    let mut matrix = Array2::zeros((params.config.embed_dim, classes.len()));
    let mut adapter_branch = Vec::with_capacity(classes.len());
    for (c, class) in classes.iter().enumerate() {
        let use_adapters = match mode {
            BranchMode::OneBranch => false,
            BranchMode::AdapterBranch => true,
            BranchMode::TwoBranchSelective => class.knowledge.is_some(),
        };
        let mut sum = Array1::zeros(params.config.embed_dim);
        for text in &class.texts {
            let ids = vocab.encode(text, Pooling::Eos, params.config.max_tokens)?;
            sum += &normalize(params.encode_text(&ids, Pooling::Eos, use_adapters)?.view())?;
        }
        matrix.column_mut(c).assign(&normalize(sum.view())?);
        adapter_branch.push(use_adapters);
    }
    Ok(ClassEmbeddings {
        matrix,
        classes,
        adapter_branch,
    })
}

/// Class names → query → optional knowledge → composed text → encoder →
/// unit vector. Multiple templates are averaged and renormalized.
#[allow(clippy::too_many_arguments)]
pub fn build_class_embeddings<S: AsRef<str>>(
    params: &ModelParams,
    vocab: &Vocab,
    class_names: &[S],
    store: &KnowledgeStore,
    source: Option<&KnowledgeSource>,
    templates: &[PromptTemplate],
    mode: BranchMode,
) -> Result<ClassEmbeddings> {
    let budget = params.config.max_tokens.saturating_sub(1);
    let classes = class_texts(class_names, templates, store, source, budget)?;
    embed_class_texts(params, vocab, classes, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    /// Accuracy per true class id; classes absent from `labels` are omitted.
    pub per_class: BTreeMap<usize, f64>,
}

/// Argmax over classes of `u · c_j` for pre-normalized image features
/// (`N × P`). Ties go to the lowest class index.
pub fn classify_features(features: &Array2<f64>, emb: &Array2<f64>, labels: &[usize]) -> Result<Classification> {
    if features.ncols() != emb.nrows() {
        return Err(Error::Shape(format!(
            "image features have width {}, class embeddings {}",
            features.ncols(),
            emb.nrows()
        )));
    }
    if features.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} images but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let scores = features.dot(emb);
    let predictions: Vec<usize> = scores
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                .0
        })
        .collect();
    Ok(score_predictions(predictions, labels))
}

fn score_predictions(predictions: Vec<usize>, labels: &[usize]) -> Classification {
    let mut totals: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &y) in predictions.iter().zip(labels) {
        let e = totals.entry(y).or_default();
        e.1 += 1;
        if p == y {
            e.0 += 1;
        }
    }
    let correct: usize = totals.values().map(|v| v.0).sum();
    Classification {
        accuracy: correct as f64 / labels.len() as f64,
        per_class: totals
            .into_iter()
            .map(|(k, (c, n))| (k, c as f64 / n as f64))
            .collect(),
        predictions,
    }
}

/// Encode and normalize every image: `N × P`.
pub fn image_embeddings(params: &ModelParams, images: &[Vec<f64>]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((images.len(), params.config.embed_dim));
    for (i, x) in images.iter().enumerate() {
        out.row_mut(i).assign(&normalize(params.encode_image(x)?.view())?);
    }
    Ok(out)
}

pub fn zero_shot_classify(
    params: &ModelParams,
    images: &[Vec<f64>],
    labels: &[usize],
    emb: &ClassEmbeddings,
) -> Result<Classification> {
    classify_features(&image_embeddings(params, images)?, &emb.matrix, labels)
}

/// Multinomial logistic regression trained by full-batch gradient descent.
struct Probe {
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Probe {
    fn fit(x: &Array2<f64>, y: &[usize], classes: usize) -> Self {
        let (n, d) = x.dim();
        let max_sq = x.rows().into_iter().map(|r| r.dot(&r) + 1.0).fold(0.0, f64::max);
        let lr = 1.0 / (0.5 * max_sq + PROBE_L2);
        let mut w = Array2::zeros((classes, d));
        let mut b = Array1::zeros(classes);
        for _ in 0..PROBE_STEPS {
            let mut logits = x.dot(&w.t()) + &b;
            for mut row in logits.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                row.mapv_inplace(|v| (v - m).exp());
                let s = row.sum();
                row /= s;
            }
            for (i, &yi) in y.iter().enumerate() {
                logits[[i, yi]] -= 1.0;
            }
            logits /= n as f64;
            let gw = logits.t().dot(x) + &(&w * PROBE_L2);
            let gb = logits.sum_axis(Axis(0));
            w.scaled_add(-lr, &gw);
            b.scaled_add(-lr, &gb);
        }
        Probe { w, b }
    }

    fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let logits = x.dot(&self.w.t()) + &self.b;
        logits
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                    .0
            })
            .collect()
    }
}

/// One probe run: `shots` seeded samples per class for training, the rest
/// for evaluation.
pub fn linear_probe_once(features: &Array2<f64>, labels: &[usize], shots: usize, seed: u64) -> Result<f64> {
    if shots == 0 {
        return Err(Error::invalid("shots_per_class must be at least 1"));
    }
    if features.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        if idx.len() < shots {
            return Err(Error::invalid(format!(
                "class {class} has {} examples, fewer than {shots} shots",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..shots]);
        test.extend_from_slice(&idx[shots..]);
    }
    if test.is_empty() {
        return Err(Error::invalid("no examples left for evaluation after sampling shots"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let x_train = features.select(Axis(0), &train);
    let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let probe = Probe::fit(&x_train, &y_train, classes);
    let preds = probe.predict(&features.select(Axis(0), &test));
    let correct = preds.iter().zip(&test).filter(|(p, &i)| **p == labels[i]).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Mean probe accuracy over [`PROBE_SEEDS`] offset by `seed`.
pub fn linear_probe(features: &Array2<f64>, labels: &[usize], shots: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for s in PROBE_SEEDS {
        total += linear_probe_once(features, labels, shots, seed.wrapping_add(s))?;
    }
    Ok(total / PROBE_SEEDS.len() as f64)
}

/// Percentage of downstream concepts present in the pretraining pool, by
/// exact match after lowercasing and whitespace collapsing.
pub fn concept_overlap<A: AsRef<str>, B: AsRef<str>>(pretrain: &[A], downstream: &[B]) -> Result<f64> {
    let down: BTreeSet<String> = downstream.iter().map(|c| normalize_query(c.as_ref())).collect();
    if down.is_empty() {
        return Err(Error::invalid("downstream concept set is empty"));
    }
    let pool: BTreeSet<String> = pretrain.iter().map(|c| normalize_query(c.as_ref())).collect();
    let hit = down.iter().filter(|c| pool.contains(*c)).count();
    Ok(hit as f64 / down.len() as f64 * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub instances: usize,
    pub concepts_full: usize,
    pub concepts_minfreq: usize,
    pub vocab_full: usize,
    pub vocab_minfreq: usize,
    pub mean_ins_per_concept: f64,
    pub std_ins_per_concept: f64,
}

/// Statistics over per-instance concepts. "minfreq" columns keep only
/// concepts with more than `min_freq` instances.
pub fn concept_stats<S: AsRef<str>>(concepts: &[S], min_freq: usize) -> DatasetStats {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in concepts {
        *counts.entry(c.as_ref()).or_default() += 1;
    }
    let vocab = |keep: &dyn Fn(usize) -> bool| {
        counts
            .iter()
            .filter(|(_, &n)| keep(n))
            .flat_map(|(c, _)| c.split_whitespace())
            .collect::<BTreeSet<_>>()
            .len()
    };
    let k = counts.len();
    let (mean, std) = if k == 0 {
        (0.0, 0.0)
    } else {
        let mean = concepts.len() as f64 / k as f64;
        let var = counts.values().map(|&n| (n as f64 - mean).powi(2)).sum::<f64>() / k as f64;
        (mean, var.sqrt())
    };
    DatasetStats {
        instances: concepts.len(),
        concepts_full: k,
        concepts_minfreq: counts.values().filter(|&&n| n > min_freq).count(),
        vocab_full: vocab(&|_| true),
        vocab_minfreq: vocab(&|n| n > min_freq),
        mean_ins_per_concept: mean,
        std_ins_per_concept: std,
    }
}

pub fn dataset_stats(
    triplets: &[Triplet],
    freq: &FrequencyTable,
    lexicon: &Lexicon,
    min_freq: usize,
) -> Result<DatasetStats> {
    if triplets.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let concepts = triplets
        .iter()
        .map(|t| Ok(construct_query(&t.text, t.kind, freq, lexicon)?.text))
        .collect::<Result<Vec<_>>>()?;
    Ok(concept_stats(&concepts, min_freq))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub top1: f64,
    pub per_class: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concept_overlap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knowledge_coverage: Option<f64>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&body)?)
    }
}

/// `dataset,score,concept_overlap,knowledge_coverage`; missing values are
/// left empty.
pub fn breakdown_csv(reports: &[EvalReport]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("dataset,score,concept_overlap,knowledge_coverage\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.dataset,
            r.top1,
            opt(r.concept_overlap),
            opt(r.knowledge_coverage)
        );
    }
    out
}

/// Hex SHA-256 of a serializable configuration.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(config)?)))
}
