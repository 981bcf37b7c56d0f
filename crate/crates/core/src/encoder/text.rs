//! Text transformer forward pass with a saved trace, and its exact backward.

use ndarray::{s, Array1, Array2, Axis};

use super::layers::{gelu, gelu_grad, softmax_rows, LayerNormCache};
use super::{Adapter, Block, ModelParams};
use crate::error::{Error, Result};
use crate::vocab::{Pooling, CLS, EOS};

struct AdapterCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

struct BlockCache {
    ln_attn: LayerNormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    adapter_attn: Option<AdapterCache>,
    ln_mlp: LayerNormCache,
    b: Array2<f64>,
    m1: Array2<f64>,
    g: Array2<f64>,
    adapter_mlp: Option<AdapterCache>,
}

/// Everything the backward pass needs from one forward pass.
pub struct TextTrace {
    ids: Vec<usize>,
    pool: usize,
    use_adapters: bool,
    blocks: Vec<BlockCache>,
    ln_final: LayerNormCache,
    pooled: Array2<f64>,
}

impl TextTrace {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn adapter_forward(ad: &Adapter, h: Array2<f64>) -> (Array2<f64>, AdapterCache) {
    let pre = ad.down.forward(&h);
    let act = pre.mapv(gelu);
    let out = &h + &ad.up.forward(&act);
    (
        out,
        AdapterCache {
            input: h,
            pre,
            act,
        },
    )
}

fn adapter_backward(ad: &Adapter, c: &AdapterCache, dy: &Array2<f64>, g: &mut Adapter) -> Array2<f64> {
    let dact = ad.up.backward(&c.act, dy, &mut g.up);
    let mut dpre = dact;
    dpre.zip_mut_with(&c.pre, |d, &x| *d *= gelu_grad(x));
    dy + &ad.down.backward(&c.input, &dpre, &mut g.down)
}

impl ModelParams {
    /// Effective length and pooling position after validation.
    fn text_span(&self, ids: &[usize], pooling: Pooling) -> Result<(usize, usize)> {
        let c = &self.config;
        if ids.len() > c.max_tokens {
            return Err(Error::Overlength {
                len: ids.len(),
                max: c.max_tokens,
            });
        }
        let eos = ids.iter().position(|&t| t == EOS);
        let len = eos.map_or(ids.len(), |e| e + 1);
        if let Some(&id) = ids[..len].iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: c.vocab_size,
            });
        }
        let pool = match pooling {
            Pooling::Eos => eos.ok_or_else(|| Error::invalid("EOS pooling needs an [EOS] token"))?,
            Pooling::Cls => {
                if ids.first() != Some(&CLS) {
                    return Err(Error::invalid("CLS pooling needs a leading [CLS] token"));
                }
                0
            }
        };
        Ok((len, pool))
    }

    pub(crate) fn text_forward(
        &self,
        ids: &[usize],
        pooling: Pooling,
        use_adapters: bool,
    ) -> Result<(Array1<f64>, TextTrace)> {
        let (len, pool) = self.text_span(ids, pooling)?;
        if use_adapters && !self.has_adapters() {
            return Err(Error::invalid("adapter branch requested but model has no adapters"));
        }
        let t = &self.text;
        let p = self.config.embed_dim;
        let heads = self.config.heads;
        let dh = p / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = Array2::zeros((len, p));
        for (pos, &id) in ids[..len].iter().enumerate() {
            let mut row = x.row_mut(pos);
            row += &t.token_embedding.row(id);
            row += &t.position_embedding.row(pos);
        }

        let mut caches = Vec::with_capacity(t.blocks.len());
        for block in &t.blocks {
            let (a, ln_attn) = block.ln_attn.forward(&x);
            let q = block.attn.query.forward(&a);
            let k = block.attn.key.forward(&a);
            let v = block.attn.value.forward(&a);
            let mut o = Array2::zeros((len, p));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows(&mut scores);
                o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            let att = block.attn.output.forward(&o);
            let (att, adapter_attn) = match (&block.adapter_attn, use_adapters) {
                (Some(ad), true) => {
                    let (out, c) = adapter_forward(ad, att);
                    (out, Some(c))
                }
                _ => (att, None),
            };
            x += &att;

            let (b, ln_mlp) = block.ln_mlp.forward(&x);
            let m1 = block.fc_in.forward(&b);
            let g = m1.mapv(gelu);
            let m2 = block.fc_out.forward(&g);
            let (m2, adapter_mlp) = match (&block.adapter_mlp, use_adapters) {
                (Some(ad), true) => {
                    let (out, c) = adapter_forward(ad, m2);
                    (out, Some(c))
                }
                _ => (m2, None),
            };
            x += &m2;
            caches.push(BlockCache {
                ln_attn,
                a,
                q,
                k,
                v,
                probs,
                o,
                adapter_attn,
                ln_mlp,
                b,
                m1,
                g,
                adapter_mlp,
            });
        }

        let row = x.slice(s![pool..pool + 1, ..]).to_owned();
        let (pooled, ln_final) = t.ln_final.forward(&row);
        let out = t.projection.forward_vec(pooled.row(0));
        Ok((
            out,
            TextTrace {
                ids: ids[..len].to_vec(),
                pool,
                use_adapters,
                blocks: caches,
                ln_final,
                pooled,
            },
        ))
    }

    /// Accumulate `d(loss)/d(params)` into `grads` given `d(loss)/d(output)`.
    pub(crate) fn text_backward(&self, trace: &TextTrace, d_out: &Array1<f64>, grads: &mut ModelParams) {
        let t = &self.text;
        let gt = &mut grads.text;
        let len = trace.ids.len();
        let p = self.config.embed_dim;
        let heads = self.config.heads;
        let dh = p / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let d_pooled = t
            .projection
            .backward_vec(trace.pooled.row(0), d_out.view(), &mut gt.projection);
        let d_row = t.ln_final.backward(
            &trace.ln_final,
            &d_pooled.insert_axis(Axis(0)),
            &mut gt.ln_final,
        );
        let mut dx = Array2::zeros((len, p));
        dx.row_mut(trace.pool).assign(&d_row.row(0));

        for ((block, cache), gb) in t
            .blocks
            .iter()
            .zip(&trace.blocks)
            .zip(gt.blocks.iter_mut())
            .rev()
        {
            // MLP sublayer
            let dm2 = match (&block.adapter_mlp, &cache.adapter_mlp) {
                (Some(ad), Some(c)) => {
                    adapter_backward(ad, c, &dx, gb.adapter_mlp.as_mut().expect("congruent grads"))
                }
                _ => dx.clone(),
            };
            let mut dg = block.fc_out.backward(&cache.g, &dm2, &mut gb.fc_out);
            dg.zip_mut_with(&cache.m1, |d, &x| *d *= gelu_grad(x));
            let db = block.fc_in.backward(&cache.b, &dg, &mut gb.fc_in);
            dx += &block_ln_backward(block, cache, &db, gb, false);

            // attention sublayer
            let datt = match (&block.adapter_attn, &cache.adapter_attn) {
                (Some(ad), Some(c)) => {
                    adapter_backward(ad, c, &dx, gb.adapter_attn.as_mut().expect("congruent grads"))
                }
                _ => dx.clone(),
            };
            let d_o = block.attn.output.backward(&cache.o, &datt, &mut gb.attn.output);
            let mut dq = Array2::zeros((len, p));
            let mut dk = Array2::zeros((len, p));
            let mut dv = Array2::zeros((len, p));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let probs = &cache.probs[h];
                let d_oh = d_o.slice(cols);
                let d_probs = d_oh.dot(&cache.v.slice(cols).t());
                dv.slice_mut(cols).assign(&probs.t().dot(&d_oh));
                let mut d_scores = d_probs;
                for (mut ds, pr) in d_scores.rows_mut().into_iter().zip(probs.rows()) {
                    let dot = ds.dot(&pr);
                    ds.zip_mut_with(&pr, |d, &pv| *d = pv * (*d - dot));
                }
                d_scores *= scale;
                dq.slice_mut(cols).assign(&d_scores.dot(&cache.k.slice(cols)));
                dk.slice_mut(cols).assign(&d_scores.t().dot(&cache.q.slice(cols)));
            }
            let mut da = block.attn.query.backward(&cache.a, &dq, &mut gb.attn.query);
            da += &block.attn.key.backward(&cache.a, &dk, &mut gb.attn.key);
            da += &block.attn.value.backward(&cache.a, &dv, &mut gb.attn.value);
            dx += &block_ln_backward(block, cache, &da, gb, true);
        }

        for (pos, &id) in trace.ids.iter().enumerate() {
            let d = dx.row(pos);
            let mut e = gt.token_embedding.row_mut(id);
            e += &d;
            let mut pe = gt.position_embedding.row_mut(pos);
            pe += &d;
        }
        debug_assert!(!trace.use_adapters || self.has_adapters());
    }
}

fn block_ln_backward(
    block: &Block,
    cache: &BlockCache,
    dy: &Array2<f64>,
    grad: &mut Block,
    attn: bool,
) -> Array2<f64> {
    if attn {
        block.ln_attn.backward(&cache.ln_attn, dy, &mut grad.ln_attn)
    } else {
        block.ln_mlp.backward(&cache.ln_mlp, dy, &mut grad.ln_mlp)
    }
}
