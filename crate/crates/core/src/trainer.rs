//! Triplet datasets, knowledge augmentation and contrastive pretraining.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    grads, ContrastiveItem, EncoderConfig, LossBatch, LossSpec, ModelParams, ParamGroup, MAX_SCALE,
};
use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeSource, KnowledgeStore};
use crate::prompt::{compose_caption_texts, compose_class_text, truncate_to_budget, CaptionScheme, PromptTemplate};
use crate::query::{construct_query, FrequencyTable, Lexicon, TextKind};
use crate::vocab::{Pooling, Vocab};

const SHUFFLE_STREAM: u64 = 0x5eed_5eed_0000_0001;

/// One training instance `(x, t, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub image: Vec<f64>,
    pub text: String,
    pub kind: TextKind,
    #[serde(default)]
    pub label: usize,
    /// Knowledge was attached to `text`; selects the adapter branch in
    /// two-branch training.
    #[serde(default)]
    pub knowledge: bool,
    /// Grouping key overriding `text` for label assignment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl Triplet {
    pub fn new(image: Vec<f64>, text: impl Into<String>, kind: TextKind) -> Self {
        Triplet {
            image,
            text: text.into(),
            kind,
            label: 0,
            knowledge: false,
            group: None,
        }
    }

    fn group_key(&self) -> String {
        normalize_text(self.group.as_deref().unwrap_or(&self.text))
    }
}

pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Dense labels in first-seen order; equal grouping keys share a label.
pub fn assign_labels(triplets: &mut [Triplet]) {
    let mut seen: HashMap<String, usize> = HashMap::new();
    for t in triplets.iter_mut() {
        let next = seen.len();
        t.label = *seen.entry(t.group_key()).or_insert(next);
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: Triplet = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(t);
    }
    if out.is_empty() {
        return Err(Error::Load(format!("{}: dataset is empty", path.display())));
    }
    let dim = out[0].image.len();
    if let Some(pos) = out.iter().position(|t| t.image.len() != dim) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: pos + 1,
            message: format!("image has {} values, expected {dim}", out[pos].image.len()),
        });
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, triplets: &[Triplet]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for t in triplets {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// `None` disables knowledge; categories still get the prompt template.
    pub source: Option<KnowledgeSource>,
    pub scheme: CaptionScheme,
    pub template: PromptTemplate,
    /// Also emit the vanilla text next to each knowledge-bearing one.
    pub keep_vanilla: bool,
    /// Encoder tokens available for the text (excluding pooling tokens).
    pub token_budget: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            source: None,
            scheme: CaptionScheme::Concat,
            template: PromptTemplate::default(),
            keep_vanilla: false,
            token_budget: 63,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentAudit {
    pub input: usize,
    pub output: usize,
    pub hits: usize,
    pub misses: usize,
}

/// Replace or extend every text with retrieved knowledge and relabel.
///
/// All texts derived from one input triplet keep that triplet's original
/// text as their grouping key, so a Combine pair shares one label.
pub fn augment_dataset(
    triplets: &[Triplet],
    store: &KnowledgeStore,
    freq: &FrequencyTable,
    lexicon: &Lexicon,
    cfg: &AugmentConfig,
) -> Result<(Vec<Triplet>, AugmentAudit)> {
    let mut out = Vec::with_capacity(triplets.len());
    let mut audit = AugmentAudit {
        input: triplets.len(),
        ..Default::default()
    };
    for t in triplets {
        let query = construct_query(&t.text, t.kind, freq, lexicon)?;
        let knowledge = match &cfg.source {
            Some(src) => store.retrieve(&query.text, src)?.map(|k| k.text),
            None => None,
        };
        if cfg.source.is_some() {
            if knowledge.is_some() {
                audit.hits += 1;
            } else {
                audit.misses += 1;
            }
        }
        let group = Some(normalize_text(t.group.as_deref().unwrap_or(&t.text)));
        let emit = |text: String, knowledge: bool| Triplet {
            image: t.image.clone(),
            text,
            kind: t.kind,
            label: 0,
            knowledge,
            group: group.clone(),
        };
        let vanilla = match t.kind {
            TextKind::Category => cfg.template.apply(&query.text),
            TextKind::Caption => t.text.clone(),
        };
        let augmented = match t.kind {
            TextKind::Category => vec![compose_class_text(&cfg.template, &query.text, knowledge.as_deref())?],
            TextKind::Caption => compose_caption_texts(&t.text, &query.text, knowledge.as_deref(), cfg.scheme)?,
        };
        if knowledge.is_some() && cfg.keep_vanilla {
            out.push(emit(vanilla, false));
        }
        for aug in augmented {
            let aug = truncate_to_budget(&aug, cfg.token_budget);
            let has = aug.has_knowledge();
            out.push(emit(aug.text, has));
        }
    }
    assign_labels(&mut out);
    audit.output = out.len();
    Ok((out, audit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "scratch_1branch")]
    Scratch1Branch,
    #[serde(rename = "scratch_2branch")]
    Scratch2Branch,
    #[serde(rename = "continual_adapters")]
    ContinualAdapters,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch_1branch" => Ok(Mode::Scratch1Branch),
            "scratch_2branch" => Ok(Mode::Scratch2Branch),
            "continual_adapters" => Ok(Mode::ContinualAdapters),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::Momentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub mode: Mode,
    pub embed_dim: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_tokens: usize,
    pub adapter_bottleneck: usize,
    pub oov_buckets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 10,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            mode: Mode::Scratch1Branch,
            embed_dim: 32,
            text_layers: 2,
            heads: 2,
            hidden: 64,
            max_tokens: 64,
            adapter_bottleneck: 8,
            oov_buckets: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.oov_buckets == 0 {
            return Err(Error::Config("oov_buckets must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize, image_dim: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            text_layers: self.text_layers,
            heads: self.heads,
            hidden: self.hidden,
            vocab_size,
            max_tokens: self.max_tokens,
            adapter_bottleneck: self.adapter_bottleneck,
            image_input_dim: image_dim,
            adapters: self.mode == Mode::Scratch2Branch,
        }
    }
}

/// First-order optimizers with per-tensor state.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: ModelParams,
    v: ModelParams,
}

const MOMENTUM: f64 = 0.9;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ModelParams) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Apply one update to every tensor in a trainable group, then clamp the
    /// logit scale.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, spec: &LossSpec) {
        self.step += 1;
        let (lr, kind) = (self.lr, self.kind);
        let bc1 = 1.0 - BETA1.powi(self.step);
        let bc2 = 1.0 - BETA2.powi(self.step);
        let views = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in views {
            if !spec.trains(p.group) {
                continue;
            }
            for i in 0..p.data.len() {
                let gi = g.data[i];
                match kind {
                    OptimizerKind::Sgd => p.data[i] -= lr * gi,
                    OptimizerKind::Momentum => {
                        m.data[i] = MOMENTUM * m.data[i] + gi;
                        p.data[i] -= lr * m.data[i];
                    }
                    OptimizerKind::Adam => {
                        m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
                        v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
                        p.data[i] -= lr * (m.data[i] / bc1) / ((v.data[i] / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        params.log_scale = params.log_scale.min(MAX_SCALE.ln());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_ic: f64,
    pub tau: f64,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,l_i2t,l_t2i,l_ic,tau\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.l_i2t, r.l_t2i, r.l_ic, r.tau);
    }
    out
}

/// Samples routed through each text branch, summed over all steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub vanilla: usize,
    pub knowledge: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub trace: Vec<TraceRow>,
    pub branches: BranchCounts,
    pub samples_seen: usize,
}

/// Pretrain from scratch or continue from `base` (required for
/// `continual_adapters`, which trains adapter tensors only).
pub fn train(
    config: &TrainConfig,
    dataset: &[Triplet],
    base: Option<(&ModelParams, &Vocab)>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::invalid("need at least two triplets to train"));
    }
    let image_dim = dataset[0].image.len();
    let (params, vocab, spec) = match (config.mode, base) {
        (Mode::ContinualAdapters, Some((p, v))) => {
            let mut p = p.clone();
            p.add_adapters(config.seed);
            (p, v.clone(), LossSpec::adapters_only())
        }
        (Mode::ContinualAdapters, None) => {
            return Err(Error::Config("continual_adapters requires a base checkpoint".into()));
        }
        (_, Some((p, v))) => (p.clone(), v.clone(), LossSpec::all()),
        (_, None) => {
            let vocab = Vocab::build(dataset.iter().map(|t| t.text.as_str()), config.oov_buckets);
            let enc = config.encoder_config(vocab.size(), image_dim);
            (ModelParams::init(enc, config.seed)?, vocab, LossSpec::all())
        }
    };
    let route = |t: &Triplet| match config.mode {
        Mode::Scratch1Branch => false,
        Mode::Scratch2Branch => t.knowledge,
        Mode::ContinualAdapters => true,
    };
    train_with(config, dataset, params, vocab, spec, route)
}

/// Few-shot fine-tuning of every tensor on a labelled set.
pub fn finetune(
    config: &TrainConfig,
    dataset: &[Triplet],
    params: &ModelParams,
    vocab: &Vocab,
    use_adapters: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    train_with(config, dataset, params.clone(), vocab.clone(), LossSpec::all(), |_| use_adapters)
}

fn train_with(
    config: &TrainConfig,
    dataset: &[Triplet],
    mut params: ModelParams,
    vocab: Vocab,
    spec: LossSpec,
    route: impl Fn(&Triplet) -> bool,
) -> Result<TrainOutcome> {
    if dataset.iter().any(|t| t.image.len() != params.config.image_input_dim) {
        return Err(Error::Shape(format!(
            "dataset image width does not match encoder input {}",
            params.config.image_input_dim
        )));
    }
    let items: Vec<ContrastiveItem> = dataset
        .iter()
        .map(|t| {
            Ok(ContrastiveItem {
                image: t.image.clone(),
                tokens: vocab.encode(&t.text, Pooling::Eos, params.config.max_tokens)?,
                label: t.label,
                use_adapters: route(t),
            })
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut opt = Optimizer::new(config.optimizer, config.lr, &params);
    let mut trace = Vec::new();
    let mut branches = BranchCounts::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = LossBatch::Contrastive(chunk.iter().map(|&i| items[i].clone()).collect());
            let tau = params.scale();
            let (report, g) = grads(&params, &batch, &spec).map_err(|e| match e {
                Error::NonFinite(component) => Error::Diverged {
                    step,
                    component,
                    batch: chunk.to_vec(),
                },
                other => other,
            })?;
            for &i in chunk {
                if items[i].use_adapters {
                    branches.knowledge += 1;
                } else {
                    branches.vanilla += 1;
                }
            }
            opt.step(&mut params, &g, &spec);
            if !params.all_finite() {
                return Err(Error::Diverged {
                    step,
                    component: "parameters".into(),
                    batch: chunk.to_vec(),
                });
            }
            let terms = report.terms.expect("contrastive report");
            trace.push(TraceRow {
                step,
                l_i2t: terms.i2t,
                l_t2i: terms.t2i,
                l_ic: terms.total,
                tau,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        params,
        vocab,
        trace,
        branches,
        samples_seen: branches.vanilla + branches.knowledge,
    })
}

/// Names of every tensor in `group` whose values differ between `a` and `b`,
/// matched by name. A tensor present on only one side counts as changed.
pub fn changed_tensors(a: &ModelParams, b: &ModelParams, group: ParamGroup) -> Vec<String> {
    let bt = b.tensors();
    let mut changed: Vec<String> = Vec::new();
    for x in a.tensors().into_iter().filter(|x| x.group == group) {
        let same = bt.iter().find(|y| y.name == x.name).is_some_and(|y| {
            y.shape == x.shape && x.data.iter().zip(y.data).all(|(p, q)| p.to_bits() == q.to_bits())
        });
        if !same {
            changed.push(x.name);
        }
    }
    let at = a.tensors();
    for y in bt.iter().filter(|y| y.group == group) {
        if !at.iter().any(|x| x.name == y.name) {
            changed.push(y.name.clone());
        }
    }
    changed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{Dictionary, DictionaryEntry};
    use crate::query::Tag;

    fn tri(text: &str) -> Triplet {
        Triplet::new(vec![0.0], text, TextKind::Caption)
    }

    #[test]
    fn labels_group_equal_texts() {
        let mut ts = vec![tri("a"), tri("A "), tri("b")];
        assign_labels(&mut ts);
        assert_eq!(ts.iter().map(|t| t.label).collect::<Vec<_>>(), [0, 0, 1]);
        let mut ts = vec![tri("x"), tri("y"), tri("z")];
        assign_labels(&mut ts);
        assert_eq!(ts.iter().map(|t| t.label).collect::<Vec<_>>(), [0, 1, 2]);
    }

    fn boxer_store() -> KnowledgeStore {
        let dict = Dictionary::from_entries(vec![DictionaryEntry {
            term: "boxer".into(),
            senses: vec!["a participant (fighter) in a boxing match".into()],
        }])
        .unwrap();
        KnowledgeStore::new(None, Some(dict))
    }

    #[test]
    fn augment_category_and_captions() {
        let store = boxer_store();
        let lex = Lexicon::from_pairs([("a", Tag::Det), ("with", Tag::Other), ("gloves", Tag::Noun)]);
        let data = vec![
            Triplet::new(vec![1.0], "boxer", TextKind::Category),
            Triplet::new(vec![2.0], "zebra", TextKind::Category),
            Triplet::new(vec![3.0], "a boxer with gloves", TextKind::Caption),
        ];
        let freq = FrequencyTable::default();
        let cfg = AugmentConfig {
            source: Some(KnowledgeSource::WiktionaryDefinition),
            scheme: CaptionScheme::Combine,
            ..Default::default()
        };
        let (out, audit) = augment_dataset(&data, &store, &freq, &lex, &cfg).unwrap();
        assert_eq!(
            out[0].text,
            "a photo of a boxer, boxer, a participant (fighter) in a boxing match"
        );
        assert!(out[0].knowledge);
        assert_eq!(out[1].text, "a photo of a zebra");
        assert!(!out[1].knowledge);
        assert_eq!(audit.hits + audit.misses, 3);
        // caption query: "boxer" and "gloves" tie at count 0 with one token each
        assert_eq!(out.len(), 4);
        assert_eq!(out[2].label, out[3].label);
        assert_ne!(out[0].label, out[2].label);
    }

    #[test]
    fn continual_requires_base() {
        let cfg = TrainConfig {
            mode: Mode::ContinualAdapters,
            ..Default::default()
        };
        let data = vec![tri("a"), tri("b")];
        assert!(matches!(train(&cfg, &data, None), Err(Error::Config(_))));
    }

    #[test]
    fn trace_csv_header() {
        let csv = trace_csv(&[TraceRow {
            step: 0,
            l_i2t: 1.5,
            l_t2i: 0.25,
            l_ic: 1.75,
            tau: 14.29,
        }]);
        assert_eq!(csv, "step,l_i2t,l_t2i,l_ic,tau\n0,1.5,0.25,1.75,14.29\n");
    }
}
