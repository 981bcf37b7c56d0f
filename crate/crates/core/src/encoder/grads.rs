//! Loss evaluation and exact gradients for the contrastive and grounding
//! objectives.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{ImageTrace, ModelParams, ParamGroup, TextTrace};
use crate::contrastive::{normalize, normalize_backward, unicl_loss_with_grad, LossTerms};
use crate::error::{Error, Result};
use crate::grounding::{focal_loss_with_grad, FocalParams};
use crate::vocab::Pooling;

/// Which parameter groups receive gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpec {
    pub text_base: bool,
    pub adapters: bool,
    pub image: bool,
    pub temperature: bool,
}

impl LossSpec {
    pub fn all() -> Self {
        LossSpec {
            text_base: true,
            adapters: true,
            image: true,
            temperature: true,
        }
    }

    pub fn adapters_only() -> Self {
        LossSpec {
            adapters: true,
            ..LossSpec::frozen()
        }
    }

    pub fn frozen() -> Self {
        LossSpec {
            text_base: false,
            adapters: false,
            image: false,
            temperature: false,
        }
    }

    pub fn trains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::TextBase => self.text_base,
            ParamGroup::Adapter => self.adapters,
            ParamGroup::Image => self.image,
            ParamGroup::Temperature => self.temperature,
        }
    }

    fn any_text(&self) -> bool {
        self.text_base || self.adapters
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveItem {
    pub image: Vec<f64>,
    /// EOS-pooled token ids.
    pub tokens: Vec<usize>,
    pub label: usize,
    pub use_adapters: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossBatch {
    Contrastive(Vec<ContrastiveItem>),
    Grounding {
        /// `M × image_input_dim` raw region features.
        regions: Array2<f64>,
        /// One CLS-pooled token sequence per category.
        phrases: Vec<Vec<usize>>,
        use_adapters: bool,
        /// `M × K` binary targets.
        targets: Array2<f64>,
        focal: FocalParams,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// Directional terms for the contrastive loss.
    pub terms: Option<LossTerms>,
}

/// Evaluate the loss and its gradient. Groups frozen by `spec` get exactly
/// zero gradient.
pub fn grads(params: &ModelParams, batch: &LossBatch, spec: &LossSpec) -> Result<(LossReport, ModelParams)> {
    let mut g = params.zeros_like();
    let report = run(params, batch, Some((spec, &mut g)))?;
    g.mask_groups(|grp| spec.trains(grp));
    Ok((report, g))
}

/// Forward-only loss evaluation.
pub fn evaluate_loss(params: &ModelParams, batch: &LossBatch) -> Result<LossReport> {
    run(params, batch, None)
}

fn run(params: &ModelParams, batch: &LossBatch, grad: Option<(&LossSpec, &mut ModelParams)>) -> Result<LossReport> {
    match batch {
        LossBatch::Contrastive(items) => contrastive(params, items, grad),
        LossBatch::Grounding {
            regions,
            phrases,
            use_adapters,
            targets,
            focal,
        } => grounding(params, regions, phrases, *use_adapters, targets, focal, grad),
    }
}

fn check_finite(v: &Array1<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn contrastive(
    params: &ModelParams,
    items: &[ContrastiveItem],
    grad: Option<(&LossSpec, &mut ModelParams)>,
) -> Result<LossReport> {
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let b = items.len();
    let p = params.config.embed_dim;
    let mut u = Array2::zeros((b, p));
    let mut v = Array2::zeros((b, p));
    let mut image_norms = Vec::with_capacity(b);
    let mut text_norms = Vec::with_capacity(b);
    let mut image_traces: Vec<ImageTrace> = Vec::with_capacity(b);
    let mut text_traces: Vec<TextTrace> = Vec::with_capacity(b);
    for (i, item) in items.iter().enumerate() {
        let (x, it) = params.image_forward(&item.image)?;
        check_finite(&x, "image features")?;
        let (t, tt) = params.text_forward(&item.tokens, Pooling::Eos, item.use_adapters)?;
        check_finite(&t, "text features")?;
        image_norms.push(x.dot(&x).sqrt());
        text_norms.push(t.dot(&t).sqrt());
        u.row_mut(i).assign(&normalize(x.view())?);
        v.row_mut(i).assign(&normalize(t.view())?);
        image_traces.push(it);
        text_traces.push(tt);
    }
    let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
    let sim = u.dot(&v.t());
    let scale = params.scale();
    let (terms, d_sim, d_scale) = unicl_loss_with_grad(&sim, &labels, scale)?;
    let report = LossReport {
        loss: terms.total,
        terms: Some(terms),
    };
    let Some((spec, g)) = grad else {
        return Ok(report);
    };
    g.log_scale += d_scale * scale;
    let du = d_sim.dot(&v);
    let dv = d_sim.t().dot(&u);
    for i in 0..b {
        if spec.image {
            let dx = normalize_backward(u.row(i), image_norms[i], du.row(i));
            params.image_backward(&image_traces[i], dx.view(), g);
        }
        if spec.any_text() {
            let dt = normalize_backward(v.row(i), text_norms[i], dv.row(i));
            params.text_backward(&text_traces[i], &dt, g);
        }
    }
    Ok(report)
}

fn grounding(
    params: &ModelParams,
    regions: &Array2<f64>,
    phrases: &[Vec<usize>],
    use_adapters: bool,
    targets: &Array2<f64>,
    focal: &FocalParams,
    grad: Option<(&LossSpec, &mut ModelParams)>,
) -> Result<LossReport> {
    let (m, k) = (regions.nrows(), phrases.len());
    if m == 0 || k == 0 {
        return Err(Error::invalid("grounding batch needs at least one region and one phrase"));
    }
    let p = params.config.embed_dim;
    let mut v = Array2::zeros((m, p));
    let mut region_traces = Vec::with_capacity(m);
    for (r, row) in regions.rows().into_iter().enumerate() {
        let slice = row.to_vec();
        let (x, trace) = params.image_forward(&slice)?;
        check_finite(&x, "region features")?;
        v.row_mut(r).assign(&x);
        region_traces.push(trace);
    }
    let mut u = Array2::zeros((p, k));
    let mut phrase_traces = Vec::with_capacity(k);
    for (c, ids) in phrases.iter().enumerate() {
        let (t, trace) = params.text_forward(ids, Pooling::Cls, use_adapters)?;
        check_finite(&t, "phrase features")?;
        u.column_mut(c).assign(&t);
        phrase_traces.push(trace);
    }
    let s = v.dot(&u);
    let (value, d_s) = focal_loss_with_grad(&s, targets, focal)?;
    let report = LossReport {
        loss: value,
        terms: None,
    };
    let Some((spec, g)) = grad else {
        return Ok(report);
    };
    if spec.image {
        let dv = d_s.dot(&u.t());
        for (r, trace) in region_traces.iter().enumerate() {
            params.image_backward(trace, dv.row(r), g);
        }
    }
    if spec.any_text() {
        let du = v.t().dot(&d_s);
        for (c, trace) in phrase_traces.iter().enumerate() {
            params.text_backward(trace, &du.column(c).to_owned(), g);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::EncoderConfig;
    use super::*;
    use crate::vocab::{CLS, EOS};

    fn toy(adapters: bool) -> ModelParams {
        let mut c = EncoderConfig::new(10, 3);
        c.embed_dim = 4;
        c.heads = 2;
        c.hidden = 6;
        c.max_tokens = 6;
        c.adapter_bottleneck = 2;
        c.adapters = adapters;
        ModelParams::init(c, 11).unwrap()
    }

    fn batch() -> LossBatch {
        LossBatch::Contrastive(vec![
            ContrastiveItem {
                image: vec![0.5, -1.0, 0.2],
                tokens: vec![4, 5, EOS],
                label: 0,
                use_adapters: false,
            },
            ContrastiveItem {
                image: vec![-0.3, 0.8, 1.0],
                tokens: vec![6, EOS],
                label: 1,
                use_adapters: true,
            },
            ContrastiveItem {
                image: vec![0.1, 0.1, -0.9],
                tokens: vec![4, 7, 8, EOS],
                label: 0,
                use_adapters: true,
            },
        ])
    }

    #[test]
    fn frozen_spec_gives_zero_gradient() {
        let p = toy(true);
        let (_, g) = grads(&p, &batch(), &LossSpec::frozen()).unwrap();
        assert!(g.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn adapter_only_spec_touches_only_adapters() {
        let mut p = toy(true);
        // give the up-projections some weight so gradients reach the down-projections
        for t in p.tensors_mut() {
            if t.name.ends_with(".up.weight") {
                t.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * (i as f64 - 2.0));
            }
        }
        let (_, g) = grads(&p, &batch(), &LossSpec::adapters_only()).unwrap();
        let mut saw_adapter = false;
        for t in g.tensors() {
            let nonzero = t.data.iter().any(|&v| v != 0.0);
            if t.group == ParamGroup::Adapter {
                saw_adapter |= nonzero;
            } else {
                assert!(!nonzero, "{} should be frozen", t.name);
            }
        }
        assert!(saw_adapter);
    }

    #[test]
    fn grounding_loss_is_finite() {
        let p = toy(false);
        let b = LossBatch::Grounding {
            regions: ndarray::array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.5]],
            phrases: vec![vec![CLS, 4, EOS], vec![CLS, 5, 6]],
            use_adapters: false,
            targets: ndarray::array![[1.0, 0.0], [0.0, 0.0]],
            focal: FocalParams::default(),
        };
        let r = evaluate_loss(&p, &b).unwrap();
        assert!(r.loss.is_finite() && r.loss >= 0.0);
    }

    fn max_rel_err(p: &ModelParams, b: &LossBatch) -> f64 {
        let (_, g) = grads(p, b, &LossSpec::all()).unwrap();
        let analytic: Vec<(String, Vec<f64>)> =
            g.tensors().into_iter().map(|t| (t.name, t.data.to_vec())).collect();
        let mut worst: f64 = 0.0;
        let h = 1e-5;
        for (ti, (name, a)) in analytic.iter().enumerate() {
            for ci in (0..a.len()).step_by(1 + a.len() / 7) {
                let mut q = p.clone();
                q.tensors_mut()[ti].data[ci] += h;
                let lp = evaluate_loss(&q, b).unwrap().loss;
                q.tensors_mut()[ti].data[ci] -= 2.0 * h;
                let lm = evaluate_loss(&q, b).unwrap().loss;
                let n = (lp - lm) / (2.0 * h);
                let err = (a[ci] - n).abs() / a[ci].abs().max(n.abs()).max(1e-6);
                assert!(err < 1e-4, "{name}[{ci}]: analytic {} numeric {n}", a[ci]);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn contrastive_gradient_matches_difference() {
        let mut p = toy(true);
        for t in p.tensors_mut() {
            if t.name.ends_with(".up.weight") {
                t.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * (i as f64 - 3.0));
            }
        }
        max_rel_err(&p, &batch());
    }

    #[test]
    fn grounding_gradient_matches_difference() {
        let p = toy(false);
        let b = LossBatch::Grounding {
            regions: ndarray::array![[1.0, -0.4, 0.2], [0.3, 1.0, 0.5], [-0.7, 0.1, 0.9]],
            phrases: vec![vec![CLS, 4, EOS], vec![CLS, 5, 6, EOS]],
            use_adapters: false,
            targets: ndarray::array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]],
            focal: FocalParams::default(),
        };
        max_rel_err(&p, &b);
    }
}
