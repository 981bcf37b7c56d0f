//! Region classification by dot-product alignment between region features
//! and independently encoded category texts, trained with focal loss.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{grads, LossBatch, LossSpec, ModelParams};
use crate::error::{Error, Result};
use crate::knowledge::{normalize_query, KnowledgeSource, KnowledgeStore};
use crate::prompt::{compose_od_text, truncate_to_budget};
use crate::trainer::{Optimizer, OptimizerKind};
use crate::vocab::{Pooling, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("focal alpha must be in (0,1), got {alpha}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("focal gamma must be >= 0, got {gamma}")));
        }
        Ok(FocalParams { alpha, gamma })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Loss and `dL/ds` for a single cell.
fn focal_cell(s: f64, target: bool, fp: &FocalParams) -> (f64, f64) {
    let (a, g) = (fp.alpha, fp.gamma);
    let p = sigmoid(s);
    let q = sigmoid(-s);
    if target {
        let log_p = -softplus(-s);
        let w = q.powf(g);
        (-a * w * log_p, a * w * (g * p * log_p - q))
    } else {
        let log_q = -softplus(s);
        let w = p.powf(g);
        (-(1.0 - a) * w * log_q, (1.0 - a) * w * (p - g * q * log_q))
    }
}

fn check_targets(s: &Array2<f64>, t: &Array2<f64>) -> Result<()> {
    if s.dim() != t.dim() {
        return Err(Error::Shape(format!(
            "scores are {:?} but targets are {:?}",
            s.dim(),
            t.dim()
        )));
    }
    if let Some(v) = t.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("target entries must be 0 or 1, found {v}")));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("alignment scores".into()));
    }
    Ok(())
}

/// Focal binary cross-entropy summed over every region/category cell.
pub fn focal_loss(s: &Array2<f64>, t: &Array2<f64>, fp: &FocalParams) -> Result<f64> {
    check_targets(s, t)?;
    Ok(s.iter()
        .zip(t.iter())
        .map(|(&sv, &tv)| focal_cell(sv, tv == 1.0, fp).0)
        .sum())
}

pub fn focal_loss_with_grad(s: &Array2<f64>, t: &Array2<f64>, fp: &FocalParams) -> Result<(f64, Array2<f64>)> {
    check_targets(s, t)?;
    let mut grad = Array2::zeros(s.raw_dim());
    let mut total = 0.0;
    for ((g, &sv), &tv) in grad.iter_mut().zip(s.iter()).zip(t.iter()) {
        let (l, d) = focal_cell(sv, tv == 1.0, fp);
        total += l;
        *g = d;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("focal loss".into()));
    }
    Ok((total, grad))
}

/// `P × K` matrix of CLS-pooled category encodings, one column per text.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseBank {
    pub u: Array2<f64>,
    pub texts: Vec<String>,
}

/// Token ids for a grounding text: `[CLS] .. [EOS]`.
pub fn phrase_tokens(vocab: &Vocab, text: &str, max_tokens: usize) -> Result<Vec<usize>> {
    vocab.encode(text, Pooling::Cls, max_tokens)
}

/// Encode every category text on its own, so no text competes with the
/// others for sequence length.
pub fn encode_phrases_parallel<S: AsRef<str>>(
    params: &ModelParams,
    vocab: &Vocab,
    texts: &[S],
    use_adapters: bool,
) -> Result<PhraseBank> {
    if texts.is_empty() {
        return Err(Error::invalid("no category texts"));
    }
    let mut u = Array2::zeros((params.config.embed_dim, texts.len()));
    for (k, text) in texts.iter().enumerate() {
        let ids = phrase_tokens(vocab, text.as_ref(), params.config.max_tokens)?;
        u.column_mut(k)
            .assign(&params.encode_text(&ids, Pooling::Cls, use_adapters)?);
    }
    Ok(PhraseBank {
        u,
        texts: texts.iter().map(|t| t.as_ref().to_string()).collect(),
    })
}

/// `S = V · U`.
pub fn ground_scores(v: &Array2<f64>, u: &Array2<f64>) -> Result<Array2<f64>> {
    if v.ncols() != u.nrows() {
        return Err(Error::Shape(format!(
            "region width {} does not match phrase width {}",
            v.ncols(),
            u.nrows()
        )));
    }
    Ok(v.dot(u))
}

/// Region features after the image encoder: `M × P`.
pub fn encode_regions(params: &ModelParams, regions: &Array2<f64>) -> Result<Array2<f64>> {
    if regions.nrows() == 0 {
        return Err(Error::invalid("region set is empty"));
    }
    let mut v = Array2::zeros((regions.nrows(), params.config.embed_dim));
    for (r, row) in regions.rows().into_iter().enumerate() {
        v.row_mut(r).assign(&params.encode_image(&row.to_vec())?);
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionPrediction {
    pub category: usize,
    pub score: f64,
}

/// Argmax category per region with the sigmoid of the winning logit; ties go
/// to the lowest category index.
pub fn classify_scores(s: &Array2<f64>) -> Vec<RegionPrediction> {
    s.rows()
        .into_iter()
        .map(|row| {
            let (category, best) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (k, &v)| if v > bv { (k, v) } else { (bi, bv) });
            RegionPrediction {
                category,
                score: sigmoid(best),
            }
        })
        .collect()
}

pub fn zero_shot_region_classify<S: AsRef<str>>(
    params: &ModelParams,
    vocab: &Vocab,
    regions: &Array2<f64>,
    category_texts: &[S],
    use_adapters: bool,
) -> Result<Vec<RegionPrediction>> {
    let bank = encode_phrases_parallel(params, vocab, category_texts, use_adapters)?;
    let v = encode_regions(params, regions)?;
    Ok(classify_scores(&ground_scores(&v, &bank.u)?))
}

/// One line of a region file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub image_id: String,
    pub features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<Vec<u8>>>,
}

impl RegionRecord {
    pub fn feature_matrix(&self) -> Result<Array2<f64>> {
        rows_to_matrix(&self.features, "features")
    }

    pub fn target_matrix(&self, categories: usize) -> Result<Option<Array2<f64>>> {
        let Some(t) = &self.targets else {
            return Ok(None);
        };
        let rows: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let m = rows_to_matrix(&rows, "targets")?;
        if m.dim() != (self.features.len(), categories) {
            return Err(Error::Shape(format!(
                "{}: targets are {:?}, expected ({}, {categories})",
                self.image_id,
                m.dim(),
                self.features.len()
            )));
        }
        Ok(Some(m))
    }

    /// Index of the single positive category per region, `None` for
    /// background rows.
    pub fn region_labels(&self) -> Option<Vec<Option<usize>>> {
        self.targets
            .as_ref()
            .map(|t| t.iter().map(|row| row.iter().position(|&v| v == 1)).collect())
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let m = rows.len();
    if m == 0 {
        return Err(Error::invalid(format!("{what}: at least one row required")));
    }
    let n = rows[0].len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!("{what}: ragged rows")));
    }
    Array2::from_shape_vec((m, n), rows.concat()).map_err(|e| Error::Shape(e.to_string()))
}

pub fn load_regions(path: impl AsRef<Path>) -> Result<Vec<RegionRecord>> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn save_regions(path: impl AsRef<Path>, records: &[RegionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Category file: a JSON list of names.
pub fn load_categories(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> =
        serde_json::from_str(&body).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    if names.is_empty() {
        return Err(Error::invalid(format!("{}: empty category list", path.display())));
    }
    Ok(names)
}

/// Fraction of labelled (non-background) regions whose argmax matches.
pub fn region_accuracy(preds: &[RegionPrediction], labels: &[Option<usize>]) -> Option<f64> {
    let scored: Vec<bool> = preds
        .iter()
        .zip(labels)
        .filter_map(|(p, l)| l.map(|l| p.category == l))
        .collect();
    (!scored.is_empty()).then(|| scored.iter().filter(|&&c| c).count() as f64 / scored.len() as f64)
}

/// Mean sigmoid score assigned to the correct category.
pub fn mean_correct_score(s: &Array2<f64>, labels: &[Option<usize>]) -> Option<f64> {
    let vals: Array1<f64> = s
        .rows()
        .into_iter()
        .zip(labels)
        .filter_map(|(row, l)| l.map(|l| sigmoid(row[l])))
        .collect();
    (!vals.is_empty()).then(|| vals.mean().unwrap_or(0.0))
}

/// OD-style category texts `"{q}, {s}"`, each truncated to fit the encoder
/// with `[CLS]` and `[EOS]` attached.
pub fn category_texts<S: AsRef<str>>(
    names: &[S],
    store: &KnowledgeStore,
    source: Option<&KnowledgeSource>,
    max_tokens: usize,
) -> Result<Vec<(String, Option<String>)>> {
    if names.is_empty() {
        return Err(Error::invalid("no categories"));
    }
    let budget = max_tokens.saturating_sub(2);
    names
        .iter()
        .map(|n| {
            let q = normalize_query(n.as_ref());
            let knowledge = match source {
                Some(src) => store.retrieve(&q, src)?.map(|k| k.text),
                None => None,
            };
            let aug = truncate_to_budget(&compose_od_text(&q, knowledge.as_deref())?, budget);
            Ok((aug.text, knowledge))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub focal: FocalParams,
    pub use_adapters: bool,
    pub spec: LossSpec,
}

impl Default for GroundTrainConfig {
    fn default() -> Self {
        GroundTrainConfig {
            epochs: 20,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            focal: FocalParams::default(),
            use_adapters: false,
            spec: LossSpec {
                temperature: false,
                ..LossSpec::all()
            },
        }
    }
}

/// Fine-tune on region files with focal loss, one image per step. Returns
/// the per-step loss.
pub fn train_grounding<S: AsRef<str>>(
    params: &mut ModelParams,
    vocab: &Vocab,
    records: &[RegionRecord],
    category_texts: &[S],
    cfg: &GroundTrainConfig,
) -> Result<Vec<f64>> {
    let k = category_texts.len();
    let phrases = category_texts
        .iter()
        .map(|t| phrase_tokens(vocab, t.as_ref(), params.config.max_tokens))
        .collect::<Result<Vec<_>>>()?;
    let mut batches = Vec::new();
    for r in records {
        if let Some(targets) = r.target_matrix(k)? {
            batches.push(LossBatch::Grounding {
                regions: r.feature_matrix()?,
                phrases: phrases.clone(),
                use_adapters: cfg.use_adapters,
                targets,
                focal: cfg.focal,
            });
        }
    }
    if batches.is_empty() {
        return Err(Error::invalid("no region records carry targets"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, params);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut trace = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let step = trace.len();
            let (report, g) = grads(params, &batches[i], &cfg.spec).map_err(|e| match e {
                Error::NonFinite(component) => Error::Diverged {
                    step,
                    component,
                    batch: vec![i],
                },
                other => other,
            })?;
            opt.step(params, &g, &cfg.spec);
            trace.push(report.loss);
        }
    }
    Ok(trace)
}
