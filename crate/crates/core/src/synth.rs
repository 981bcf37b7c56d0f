//! A seeded toy world for measuring knowledge transfer to unseen concepts.
//!
//! Image features are the sum of a color prototype, a shape prototype and
//! Gaussian noise. Every class has a made-up single-word name and a
//! dictionary entry `"a <color> <shape>"`. Eight "common" classes cover each
//! color and each shape twice and are used for training; the other eight
//! color/shape pairs are held out. Only the dictionary links a held-out name
//! to words the encoder has seen.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::ModelParams;
use crate::error::Result;
use crate::evaluation::{build_class_embeddings, zero_shot_classify, BranchMode};
use crate::knowledge::{knowledge_coverage, Dictionary, DictionaryEntry, KnowledgeSource, KnowledgeStore};
use crate::prompt::PromptTemplate;
use crate::query::{FrequencyTable, Lexicon, TextKind};
use crate::trainer::{augment_dataset, train, AugmentConfig, TrainConfig, Triplet};
use crate::vocab::Vocab;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
const NAMES: [&str; 16] = [
    "dax", "wug", "blick", "fep", "toma", "zorp", "kiki", "mibo", "lorp", "gazzer", "norp", "tufa",
    "vek", "quimble", "snarf", "pilk",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub color: usize,
    pub shape: usize,
    pub common: bool,
}

impl SynthClass {
    pub fn definition(&self) -> String {
        format!("a {} {}", COLORS[self.color], SHAPES[self.shape])
    }
}

/// Class `k` is color `k / 4`, shape `k % 4`. Common cells are `(i, i)` and
/// `(i, i + 1 mod 4)`.
pub fn synth_classes() -> Vec<SynthClass> {
    (0..16)
        .map(|k| {
            let (color, shape) = (k / 4, k % 4);
            SynthClass {
                name: NAMES[k].to_string(),
                color,
                shape,
                common: shape == color || shape == (color + 1) % 4,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_dim: usize,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub source: KnowledgeSource,
    /// Drop every dictionary entry (no-knowledge ablation).
    pub empty_knowledge: bool,
    pub train: TrainConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_dim: 16,
            noise: 0.3,
            train_per_class: 24,
            test_per_class: 16,
            source: KnowledgeSource::WiktionaryDefinition,
            empty_knowledge: false,
            train: TrainConfig {
                batch_size: 32,
                epochs: 30,
                lr: 3e-3,
                embed_dim: 16,
                hidden: 32,
                heads: 2,
                text_layers: 1,
                max_tokens: 16,
                adapter_bottleneck: 4,
                oov_buckets: 8,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub classes: Vec<SynthClass>,
    pub train: Vec<Triplet>,
    /// `(image, class index)` for every class, common and held out.
    pub test: Vec<(Vec<f64>, usize)>,
    pub store: KnowledgeStore,
}

impl SynthWorld {
    pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.image_dim;
        let proto = |rng: &mut ChaCha8Rng| -> Array1<f64> {
            Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal))
        };
        let colors: Vec<Array1<f64>> = (0..COLORS.len()).map(|_| proto(&mut rng)).collect();
        let shapes: Vec<Array1<f64>> = (0..SHAPES.len()).map(|_| proto(&mut rng)).collect();
        let classes = synth_classes();
        let sample = |c: &SynthClass, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let x = &colors[c.color] + &shapes[c.shape];
            x.iter()
                .map(|v| v + cfg.noise * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let mut train = Vec::new();
        for c in classes.iter().filter(|c| c.common) {
            for _ in 0..cfg.train_per_class {
                train.push(Triplet::new(sample(c, &mut rng), c.name.clone(), TextKind::Category));
            }
        }
        let mut test = Vec::new();
        for (k, c) in classes.iter().enumerate() {
            for _ in 0..cfg.test_per_class {
                test.push((sample(c, &mut rng), k));
            }
        }
        let entries = if cfg.empty_knowledge {
            Vec::new()
        } else {
            classes
                .iter()
                .map(|c| DictionaryEntry {
                    term: c.name.clone(),
                    senses: vec![c.definition()],
                })
                .collect()
        };
        let store = KnowledgeStore::new(None, Some(Dictionary::from_entries(entries)?));
        Ok(SynthWorld {
            classes,
            train,
            test,
            store,
        })
    }

    pub fn held_out(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&k| !self.classes[k].common).collect()
    }
}

/// A trained model for one condition.
pub struct SynthModel {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub final_loss: f64,
}

pub fn train_condition(world: &SynthWorld, cfg: &SynthConfig, seed: u64, with_knowledge: bool) -> Result<SynthModel> {
    let aug = AugmentConfig {
        source: with_knowledge.then(|| cfg.source.clone()),
        token_budget: cfg.train.max_tokens - 1,
        ..Default::default()
    };
    let (data, _) = augment_dataset(&world.train, &world.store, &FrequencyTable::default(), &Lexicon::default(), &aug)?;
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let out = train(&tc, &data, None)?;
    Ok(SynthModel {
        params: out.params,
        vocab: out.vocab,
        final_loss: out.trace.last().map_or(f64::NAN, |r| r.l_ic),
    })
}

/// Zero-shot accuracy over test images of `classes`, choosing among those
/// classes only.
pub fn evaluate_condition(
    world: &SynthWorld,
    cfg: &SynthConfig,
    model: &SynthModel,
    classes: &[usize],
    with_knowledge: bool,
) -> Result<f64> {
    let names: Vec<&str> = classes.iter().map(|&k| world.classes[k].name.as_str()).collect();
    let source = with_knowledge.then_some(&cfg.source);
    let emb = build_class_embeddings(
        &model.params,
        &model.vocab,
        &names,
        &world.store,
        source,
        &[PromptTemplate::default()],
        BranchMode::OneBranch,
    )?;
    let (images, labels): (Vec<Vec<f64>>, Vec<usize>) = world
        .test
        .iter()
        .filter_map(|(x, k)| classes.iter().position(|c| c == k).map(|pos| (x.clone(), pos)))
        .unzip();
    Ok(zero_shot_classify(&model.params, &images, &labels, &emb)?.accuracy)
}

/// Zero-shot accuracy on all 16 classes for each train/eval knowledge
/// combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyTable {
    pub train_without_eval_without: f64,
    pub train_without_eval_with: f64,
    pub train_with_eval_without: f64,
    pub train_with_eval_with: f64,
}

impl ConsistencyTable {
    /// Both mismatched cells are strictly below both matched cells.
    pub fn holds(&self) -> bool {
        let orange = self.train_without_eval_with.max(self.train_with_eval_without);
        let green = self.train_without_eval_without.min(self.train_with_eval_with);
        orange < green
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub heldout_without: f64,
    pub heldout_with: f64,
    pub gap: f64,
    pub heldout_coverage: f64,
    pub table: ConsistencyTable,
    pub consistency: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub seeds: usize,
    pub mean_heldout_without: f64,
    pub mean_heldout_with: f64,
    pub mean_gap: f64,
    pub knowledge_wins: usize,
    pub consistency_holds: usize,
    pub min_heldout_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: Vec<SeedResult>,
    pub summary: BenchSummary,
}

pub fn run_seed(cfg: &SynthConfig, seed: u64) -> Result<SeedResult> {
    let world = SynthWorld::generate(cfg, seed)?;
    let held = world.held_out();
    let all: Vec<usize> = (0..world.classes.len()).collect();
    let names: Vec<&str> = held.iter().map(|&k| world.classes[k].name.as_str()).collect();
    let coverage = knowledge_coverage(&names, &world.store, &cfg.source)?;
    let plain = train_condition(&world, cfg, seed, false)?;
    let aware = train_condition(&world, cfg, seed, true)?;
    let heldout_without = evaluate_condition(&world, cfg, &plain, &held, false)?;
    let heldout_with = evaluate_condition(&world, cfg, &aware, &held, true)?;
    let table = ConsistencyTable {
        train_without_eval_without: evaluate_condition(&world, cfg, &plain, &all, false)?,
        train_without_eval_with: evaluate_condition(&world, cfg, &plain, &all, true)?,
        train_with_eval_without: evaluate_condition(&world, cfg, &aware, &all, false)?,
        train_with_eval_with: evaluate_condition(&world, cfg, &aware, &all, true)?,
    };
    Ok(SeedResult {
        seed,
        heldout_without,
        heldout_with,
        gap: heldout_with - heldout_without,
        heldout_coverage: coverage,
        consistency: table.holds(),
        table,
    })
}

pub fn run_bench(cfg: &SynthConfig, seeds: &[u64]) -> Result<BenchReport> {
    let runs = seeds.iter().map(|&s| run_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
    let n = runs.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SeedResult) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let summary = BenchSummary {
        seeds: runs.len(),
        mean_heldout_without: mean(&|r| r.heldout_without),
        mean_heldout_with: mean(&|r| r.heldout_with),
        mean_gap: mean(&|r| r.gap),
        knowledge_wins: runs.iter().filter(|r| r.heldout_with > r.heldout_without).count(),
        consistency_holds: runs.iter().filter(|r| r.consistency).count(),
        min_heldout_coverage: runs.iter().map(|r| r.heldout_coverage).fold(f64::INFINITY, f64::min),
    };
    Ok(BenchReport { runs, summary })
}
