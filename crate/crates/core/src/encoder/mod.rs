//! Dual encoders: a small pre-norm transformer for text and a two-layer MLP
//! for image feature vectors, with optional serial bottleneck adapters that
//! turn the text encoder into a two-branch (vanilla / knowledge) model.
//!
//! All gradients are computed by hand; see [`grads`].

mod checkpoint;
mod grads;
mod image;
pub(crate) mod layers;
mod text;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::Checkpoint;
pub use grads::{evaluate_loss, grads, ContrastiveItem, LossBatch, LossReport, LossSpec};
pub use image::ImageTrace;
pub use layers::{LayerNorm, Linear};
pub use text::TextTrace;

/// Initial value of the logit scale (the inverse of a 0.07 temperature).
pub const INITIAL_SCALE: f64 = 14.29;
pub const MAX_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub adapter_bottleneck: usize,
    pub image_input_dim: usize,
    /// Whether adapter tensors exist at all.
    pub adapters: bool,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, image_input_dim: usize) -> Self {
        EncoderConfig {
            embed_dim: 32,
            text_layers: 2,
            heads: 2,
            hidden: 64,
            vocab_size,
            max_tokens: 64,
            adapter_bottleneck: 8,
            image_input_dim,
            adapters: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.heads == 0 || self.hidden == 0 {
            return bad("embed_dim, heads and hidden must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.adapter_bottleneck == 0 || self.adapter_bottleneck >= self.hidden {
            return bad(format!(
                "adapter_bottleneck {} must be in 1..{}",
                self.adapter_bottleneck, self.hidden
            ));
        }
        if self.vocab_size < 4 || self.max_tokens < 2 || self.image_input_dim == 0 {
            return bad("vocab_size, max_tokens and image_input_dim are too small".into());
        }
        Ok(())
    }
}

/// Which part of the model a tensor belongs to; drives freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TextBase,
    Adapter,
    Image,
    Temperature,
}

/// Serial bottleneck adapter: `h + up(gelu(down(h)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_mlp: LayerNorm,
    pub fc_in: Linear,
    pub fc_out: Linear,
    pub adapter_attn: Option<Adapter>,
    pub adapter_mlp: Option<Adapter>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub projection: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub fc_in: Linear,
    pub fc_out: Linear,
}

/// Every trainable tensor of the dual encoder plus the logit scale.
///
/// The same type doubles as the gradient container: [`ModelParams::zeros_like`]
/// yields a congruent structure of zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    /// Natural log of the logit scale τ.
    pub log_scale: f64,
}

pub struct TensorView<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorViewMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

impl Adapter {
    fn init<R: rand::Rng>(dim: usize, bottleneck: usize, rng: &mut R) -> Self {
        Adapter {
            down: Linear::init(bottleneck, dim, rng),
            up: Linear::zeros(dim, bottleneck),
        }
    }

    fn zeros(dim: usize, bottleneck: usize) -> Self {
        Adapter {
            down: Linear::zeros(bottleneck, dim),
            up: Linear::zeros(dim, bottleneck),
        }
    }
}

impl ModelParams {
    /// Seeded initialization. Adapter up-projections start at zero so the
    /// knowledge branch initially computes exactly the vanilla function.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = config.embed_dim;
        let emb_bound = 1.0 / (p as f64).sqrt();
        let token_embedding = layers::uniform_matrix(config.vocab_size, p, emb_bound, &mut rng);
        let position_embedding = layers::uniform_matrix(config.max_tokens, p, emb_bound, &mut rng);
        let blocks = (0..config.text_layers)
            .map(|_| Block {
                ln_attn: LayerNorm::new(p),
                attn: Attention {
                    query: Linear::init(p, p, &mut rng),
                    key: Linear::init(p, p, &mut rng),
                    value: Linear::init(p, p, &mut rng),
                    output: Linear::init(p, p, &mut rng),
                },
                ln_mlp: LayerNorm::new(p),
                fc_in: Linear::init(config.hidden, p, &mut rng),
                fc_out: Linear::init(p, config.hidden, &mut rng),
                adapter_attn: None,
                adapter_mlp: None,
            })
            .collect();
        let text = TextEncoder {
            token_embedding,
            position_embedding,
            blocks,
            ln_final: LayerNorm::new(p),
            projection: Linear::init(p, p, &mut rng),
        };
        let image = ImageEncoder {
            fc_in: Linear::init(config.hidden, config.image_input_dim, &mut rng),
            fc_out: Linear::init(p, config.hidden, &mut rng),
        };
        let wants_adapters = config.adapters;
        let mut params = ModelParams {
            config: EncoderConfig {
                adapters: false,
                ..config
            },
            text,
            image,
            log_scale: INITIAL_SCALE.ln(),
        };
        if wants_adapters {
            params.add_adapters(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        }
        Ok(params)
    }

    /// Insert fresh adapters (zero up-projection) after every attention and
    /// MLP sublayer. No-op if adapters already exist.
    pub fn add_adapters(&mut self, seed: u64) {
        if self.config.adapters {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, r) = (self.config.embed_dim, self.config.adapter_bottleneck);
        for block in &mut self.text.blocks {
            block.adapter_attn = Some(Adapter::init(p, r, &mut rng));
            block.adapter_mlp = Some(Adapter::init(p, r, &mut rng));
        }
        self.config.adapters = true;
    }

    pub fn has_adapters(&self) -> bool {
        self.config.adapters
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        let p = c.embed_dim;
        let zero_adapter = || c.adapters.then(|| Adapter::zeros(p, c.adapter_bottleneck));
        ModelParams {
            config: c.clone(),
            text: TextEncoder {
                token_embedding: Array2::zeros(self.text.token_embedding.raw_dim()),
                position_embedding: Array2::zeros(self.text.position_embedding.raw_dim()),
                blocks: (0..self.text.blocks.len())
                    .map(|_| Block {
                        ln_attn: LayerNorm::zeros(p),
                        attn: Attention {
                            query: Linear::zeros(p, p),
                            key: Linear::zeros(p, p),
                            value: Linear::zeros(p, p),
                            output: Linear::zeros(p, p),
                        },
                        ln_mlp: LayerNorm::zeros(p),
                        fc_in: Linear::zeros(c.hidden, p),
                        fc_out: Linear::zeros(p, c.hidden),
                        adapter_attn: zero_adapter(),
                        adapter_mlp: zero_adapter(),
                    })
                    .collect(),
                ln_final: LayerNorm::zeros(p),
                projection: Linear::zeros(p, p),
            },
            image: ImageEncoder {
                fc_in: Linear::zeros(c.hidden, c.image_input_dim),
                fc_out: Linear::zeros(p, c.hidden),
            },
            log_scale: 0.0,
        }
    }

    /// All tensors in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        fn view<'a>(name: String, group: ParamGroup, shape: &[usize], data: &'a [f64]) -> TensorView<'a> {
            TensorView {
                name,
                group,
                shape: shape.to_vec(),
                data,
            }
        }
        fn lin<'a>(out: &mut Vec<TensorView<'a>>, name: String, group: ParamGroup, l: &'a Linear) {
            let w = l.weight.as_slice().expect("standard layout");
            let b = l.bias.as_slice().expect("standard layout");
            out.push(view(format!("{name}.weight"), group, l.weight.shape(), w));
            out.push(view(format!("{name}.bias"), group, l.bias.shape(), b));
        }
        fn norm<'a>(out: &mut Vec<TensorView<'a>>, name: String, group: ParamGroup, l: &'a LayerNorm) {
            let g = l.gain.as_slice().expect("standard layout");
            let b = l.bias.as_slice().expect("standard layout");
            out.push(view(format!("{name}.gain"), group, l.gain.shape(), g));
            out.push(view(format!("{name}.bias"), group, l.bias.shape(), b));
        }
        let mut out = Vec::new();
        let base = ParamGroup::TextBase;
        let t = &self.text;
        for (name, m) in [
            ("text.token_embedding", &t.token_embedding),
            ("text.position_embedding", &t.position_embedding),
        ] {
            out.push(view(name.into(), base, m.shape(), m.as_slice().expect("standard layout")));
        }
        for (i, b) in t.blocks.iter().enumerate() {
            let pre = format!("text.blocks.{i}");
            norm(&mut out, format!("{pre}.ln_attn"), base, &b.ln_attn);
            lin(&mut out, format!("{pre}.attn.query"), base, &b.attn.query);
            lin(&mut out, format!("{pre}.attn.key"), base, &b.attn.key);
            lin(&mut out, format!("{pre}.attn.value"), base, &b.attn.value);
            lin(&mut out, format!("{pre}.attn.output"), base, &b.attn.output);
            norm(&mut out, format!("{pre}.ln_mlp"), base, &b.ln_mlp);
            lin(&mut out, format!("{pre}.fc_in"), base, &b.fc_in);
            lin(&mut out, format!("{pre}.fc_out"), base, &b.fc_out);
            for (tag, ad) in [("adapter_attn", &b.adapter_attn), ("adapter_mlp", &b.adapter_mlp)] {
                if let Some(ad) = ad {
                    lin(&mut out, format!("{pre}.{tag}.down"), ParamGroup::Adapter, &ad.down);
                    lin(&mut out, format!("{pre}.{tag}.up"), ParamGroup::Adapter, &ad.up);
                }
            }
        }
        norm(&mut out, "text.ln_final".into(), base, &t.ln_final);
        lin(&mut out, "text.projection".into(), base, &t.projection);
        lin(&mut out, "image.fc_in".into(), ParamGroup::Image, &self.image.fc_in);
        lin(&mut out, "image.fc_out".into(), ParamGroup::Image, &self.image.fc_out);
        out.push(view(
            "log_scale".into(),
            ParamGroup::Temperature,
            &[1],
            std::slice::from_ref(&self.log_scale),
        ));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order and names.
    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out: Vec<TensorViewMut<'_>> = Vec::new();
        fn lin<'a>(out: &mut Vec<TensorViewMut<'a>>, name: String, group: ParamGroup, l: &'a mut Linear) {
            let wshape = l.weight.shape().to_vec();
            let bshape = l.bias.shape().to_vec();
            out.push(TensorViewMut {
                name: format!("{name}.weight"),
                group,
                shape: wshape,
                data: l.weight.as_slice_mut().expect("standard layout"),
            });
            out.push(TensorViewMut {
                name: format!("{name}.bias"),
                group,
                shape: bshape,
                data: l.bias.as_slice_mut().expect("standard layout"),
            });
        }
        fn norm<'a>(out: &mut Vec<TensorViewMut<'a>>, name: String, group: ParamGroup, l: &'a mut LayerNorm) {
            let shape = l.gain.shape().to_vec();
            out.push(TensorViewMut {
                name: format!("{name}.gain"),
                group,
                shape: shape.clone(),
                data: l.gain.as_slice_mut().expect("standard layout"),
            });
            out.push(TensorViewMut {
                name: format!("{name}.bias"),
                group,
                shape,
                data: l.bias.as_slice_mut().expect("standard layout"),
            });
        }
        fn mat<'a>(out: &mut Vec<TensorViewMut<'a>>, name: &str, a: &'a mut Array2<f64>) {
            let shape = a.shape().to_vec();
            out.push(TensorViewMut {
                name: name.to_string(),
                group: ParamGroup::TextBase,
                shape,
                data: a.as_slice_mut().expect("standard layout"),
            });
        }
        let base = ParamGroup::TextBase;
        let t = &mut self.text;
        mat(&mut out, "text.token_embedding", &mut t.token_embedding);
        mat(&mut out, "text.position_embedding", &mut t.position_embedding);
        for (i, b) in t.blocks.iter_mut().enumerate() {
            let pre = format!("text.blocks.{i}");
            norm(&mut out, format!("{pre}.ln_attn"), base, &mut b.ln_attn);
            lin(&mut out, format!("{pre}.attn.query"), base, &mut b.attn.query);
            lin(&mut out, format!("{pre}.attn.key"), base, &mut b.attn.key);
            lin(&mut out, format!("{pre}.attn.value"), base, &mut b.attn.value);
            lin(&mut out, format!("{pre}.attn.output"), base, &mut b.attn.output);
            norm(&mut out, format!("{pre}.ln_mlp"), base, &mut b.ln_mlp);
            lin(&mut out, format!("{pre}.fc_in"), base, &mut b.fc_in);
            lin(&mut out, format!("{pre}.fc_out"), base, &mut b.fc_out);
            for (tag, ad) in [("adapter_attn", &mut b.adapter_attn), ("adapter_mlp", &mut b.adapter_mlp)] {
                if let Some(ad) = ad {
                    lin(&mut out, format!("{pre}.{tag}.down"), ParamGroup::Adapter, &mut ad.down);
                    lin(&mut out, format!("{pre}.{tag}.up"), ParamGroup::Adapter, &mut ad.up);
                }
            }
        }
        norm(&mut out, "text.ln_final".into(), base, &mut t.ln_final);
        lin(&mut out, "text.projection".into(), base, &mut t.projection);
        lin(&mut out, "image.fc_in".into(), ParamGroup::Image, &mut self.image.fc_in);
        lin(&mut out, "image.fc_out".into(), ParamGroup::Image, &mut self.image.fc_out);
        out.push(TensorViewMut {
            name: "log_scale".into(),
            group: ParamGroup::Temperature,
            shape: vec![1],
            data: std::slice::from_mut(&mut self.log_scale),
        });
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Zero every tensor whose group is not in `keep`.
    pub fn mask_groups(&mut self, keep: impl Fn(ParamGroup) -> bool) {
        for t in self.tensors_mut() {
            if !keep(t.group) {
                t.data.fill(0.0);
            }
        }
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += alpha * s;
            }
        }
    }

    /// Encode a token sequence. Tokens after the first `[EOS]` are ignored.
    pub fn encode_text(
        &self,
        ids: &[usize],
        pooling: crate::vocab::Pooling,
        use_adapters: bool,
    ) -> Result<Array1<f64>> {
        Ok(self.text_forward(ids, pooling, use_adapters)?.0)
    }

    pub fn encode_image(&self, x: &[f64]) -> Result<Array1<f64>> {
        Ok(self.image_forward(x)?.0)
    }
}
