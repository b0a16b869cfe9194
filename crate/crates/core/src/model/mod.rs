//! The char-level classifier: embedding matrix, a small pre-layer-norm
//! transformer encoder, and a linear head over the sentinel position's
//! hidden state. Forward passes are deterministic (no dropout anywhere) and
//! reverse-mode gradients are available with respect to both the weights and
//! the input embeddings.

mod encoder;
mod loss;

pub use loss::LossSpec;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::TokenSeq;
use crate::Float;

pub use encoder::Tape;

/// Per-class raw scores.
pub type Logits = Array1<Float>;

/// Hyperparameters of the classifier.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Embedding / hidden width.
    pub d_c: usize,
    /// Encoder layers.
    pub layers: usize,
    /// Attention heads.
    pub heads: usize,
    /// Feed-forward width.
    pub d_ff: usize,
    /// Maximum text length in characters (positions = max_len + 1 with the
    /// sentinel).
    pub max_len: usize,
    /// Number of classes.
    pub classes: usize,
    /// Weight-init RNG seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_c: 64,
            layers: 2,
            heads: 4,
            d_ff: 128,
            max_len: 64,
            classes: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_c == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("d_c, heads and d_ff must be positive".into()));
        }
        if !self.d_c.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_c ({}) must be divisible by heads ({})",
                self.d_c, self.heads
            )));
        }
        if self.layers < 1 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub scale: Array1<Float>,
    pub shift: Array1<Float>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<Float>,
    pub bq: Array1<Float>,
    pub wk: Array2<Float>,
    pub bk: Array1<Float>,
    pub wv: Array2<Float>,
    pub bv: Array1<Float>,
    pub wo: Array2<Float>,
    pub bo: Array1<Float>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub w1: Array2<Float>,
    pub b1: Array1<Float>,
    pub w2: Array2<Float>,
    pub b2: Array1<Float>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ff: FeedForwardParams,
}

/// All trainable tensors. The same struct doubles as gradient and moment
/// storage; [`Params::visit`] fixes one canonical (name, tensor) order used
/// by the optimizer and the checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// Character embedding matrix, |V| x d_c.
    pub embedding: Array2<Float>,
    /// Positional embeddings, (max_len + 1) x d_c.
    pub positional: Array2<Float>,
    pub layers: Vec<EncoderLayerParams>,
    /// Classification head, d_c x C.
    pub head_w: Array2<Float>,
    pub head_b: Array1<Float>,
}

impl Params {
    /// Same structure with every tensor zeroed.
    pub fn zeros_like(&self) -> Params {
        let zero1 = |a: &Array1<Float>| Array1::zeros(a.len());
        let zero2 = |a: &Array2<Float>| Array2::zeros(a.dim());
        Params {
            embedding: zero2(&self.embedding),
            positional: zero2(&self.positional),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayerParams {
                    ln1: LayerNormParams {
                        scale: zero1(&l.ln1.scale),
                        shift: zero1(&l.ln1.shift),
                    },
                    attn: AttentionParams {
                        wq: zero2(&l.attn.wq),
                        bq: zero1(&l.attn.bq),
                        wk: zero2(&l.attn.wk),
                        bk: zero1(&l.attn.bk),
                        wv: zero2(&l.attn.wv),
                        bv: zero1(&l.attn.bv),
                        wo: zero2(&l.attn.wo),
                        bo: zero1(&l.attn.bo),
                    },
                    ln2: LayerNormParams {
                        scale: zero1(&l.ln2.scale),
                        shift: zero1(&l.ln2.shift),
                    },
                    ff: FeedForwardParams {
                        w1: zero2(&l.ff.w1),
                        b1: zero1(&l.ff.b1),
                        w2: zero2(&l.ff.w2),
                        b2: zero1(&l.ff.b2),
                    },
                })
                .collect(),
            head_w: zero2(&self.head_w),
            head_b: zero1(&self.head_b),
        }
    }

    /// Visits every tensor in canonical order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, ArrayViewD<'a, Float>)) {
        f("embedding".into(), self.embedding.view().into_dyn());
        f("positional".into(), self.positional.view().into_dyn());
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layer{i}.ln1.scale"), l.ln1.scale.view().into_dyn());
            f(format!("layer{i}.ln1.shift"), l.ln1.shift.view().into_dyn());
            f(format!("layer{i}.attn.wq"), l.attn.wq.view().into_dyn());
            f(format!("layer{i}.attn.bq"), l.attn.bq.view().into_dyn());
            f(format!("layer{i}.attn.wk"), l.attn.wk.view().into_dyn());
            f(format!("layer{i}.attn.bk"), l.attn.bk.view().into_dyn());
            f(format!("layer{i}.attn.wv"), l.attn.wv.view().into_dyn());
            f(format!("layer{i}.attn.bv"), l.attn.bv.view().into_dyn());
            f(format!("layer{i}.attn.wo"), l.attn.wo.view().into_dyn());
            f(format!("layer{i}.attn.bo"), l.attn.bo.view().into_dyn());
            f(format!("layer{i}.ln2.scale"), l.ln2.scale.view().into_dyn());
            f(format!("layer{i}.ln2.shift"), l.ln2.shift.view().into_dyn());
            f(format!("layer{i}.ff.w1"), l.ff.w1.view().into_dyn());
            f(format!("layer{i}.ff.b1"), l.ff.b1.view().into_dyn());
            f(format!("layer{i}.ff.w2"), l.ff.w2.view().into_dyn());
            f(format!("layer{i}.ff.b2"), l.ff.b2.view().into_dyn());
        }
        f("head.weight".into(), self.head_w.view().into_dyn());
        f("head.bias".into(), self.head_b.view().into_dyn());
    }

    /// Mutable variant of [`Params::visit`], same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(String, ArrayViewMutD<'_, Float>)) {
        f("embedding".into(), self.embedding.view_mut().into_dyn());
        f("positional".into(), self.positional.view_mut().into_dyn());
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(
                format!("layer{i}.ln1.scale"),
                l.ln1.scale.view_mut().into_dyn(),
            );
            f(
                format!("layer{i}.ln1.shift"),
                l.ln1.shift.view_mut().into_dyn(),
            );
            f(format!("layer{i}.attn.wq"), l.attn.wq.view_mut().into_dyn());
            f(format!("layer{i}.attn.bq"), l.attn.bq.view_mut().into_dyn());
            f(format!("layer{i}.attn.wk"), l.attn.wk.view_mut().into_dyn());
            f(format!("layer{i}.attn.bk"), l.attn.bk.view_mut().into_dyn());
            f(format!("layer{i}.attn.wv"), l.attn.wv.view_mut().into_dyn());
            f(format!("layer{i}.attn.bv"), l.attn.bv.view_mut().into_dyn());
            f(format!("layer{i}.attn.wo"), l.attn.wo.view_mut().into_dyn());
            f(format!("layer{i}.attn.bo"), l.attn.bo.view_mut().into_dyn());
            f(
                format!("layer{i}.ln2.scale"),
                l.ln2.scale.view_mut().into_dyn(),
            );
            f(
                format!("layer{i}.ln2.shift"),
                l.ln2.shift.view_mut().into_dyn(),
            );
            f(format!("layer{i}.ff.w1"), l.ff.w1.view_mut().into_dyn());
            f(format!("layer{i}.ff.b1"), l.ff.b1.view_mut().into_dyn());
            f(format!("layer{i}.ff.w2"), l.ff.w2.view_mut().into_dyn());
            f(format!("layer{i}.ff.b2"), l.ff.b2.view_mut().into_dyn());
        }
        f("head.weight".into(), self.head_w.view_mut().into_dyn());
        f("head.bias".into(), self.head_b.view_mut().into_dyn());
    }

    /// Total scalar parameter count.
    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, t| ok &= t.iter().all(|x| x.is_finite()));
        ok
    }
}

/// The classifier. Weights are immutable during attack/evaluation; training
/// holds exclusive write access.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: Params,
}

/// Uniform Xavier-style draw in [-s, s] with s = sqrt(6 / (fan_in + fan_out)).
fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<Float> {
    let s = (6.0 / (rows + cols) as f64).sqrt() as Float;
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-s..s))
}

impl Model {
    /// Initializes a model with the documented weight scheme: 2-D weights
    /// uniform Xavier, biases zero, layer-norm scale 1 and shift 0.
    /// Reproducible from `config.seed`.
    pub fn init(config: ModelConfig, vocab_size: usize) -> Result<Model> {
        config.validate()?;
        if vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab size {vocab_size} below minimum of 4"
            )));
        }
        let d = config.d_c;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embedding = xavier(&mut rng, vocab_size, d);
        let positional = xavier(&mut rng, config.max_len + 1, d);
        let layers = (0..config.layers)
            .map(|_| EncoderLayerParams {
                ln1: LayerNormParams {
                    scale: Array1::ones(d),
                    shift: Array1::zeros(d),
                },
                attn: AttentionParams {
                    wq: xavier(&mut rng, d, d),
                    bq: Array1::zeros(d),
                    wk: xavier(&mut rng, d, d),
                    bk: Array1::zeros(d),
                    wv: xavier(&mut rng, d, d),
                    bv: Array1::zeros(d),
                    wo: xavier(&mut rng, d, d),
                    bo: Array1::zeros(d),
                },
                ln2: LayerNormParams {
                    scale: Array1::ones(d),
                    shift: Array1::zeros(d),
                },
                ff: FeedForwardParams {
                    w1: xavier(&mut rng, d, config.d_ff),
                    b1: Array1::zeros(config.d_ff),
                    w2: xavier(&mut rng, config.d_ff, d),
                    b2: Array1::zeros(d),
                },
            })
            .collect();
        let head_w = xavier(&mut rng, d, config.classes);
        let head_b = Array1::zeros(config.classes);
        Ok(Model {
            config,
            vocab_size,
            params: Params {
                embedding,
                positional,
                layers,
                head_w,
                head_b,
            },
        })
    }

    /// Maps token ids to rows of the embedding matrix plus the positional
    /// embedding for each position.
    pub fn embed(&self, tokens: &TokenSeq) -> Result<Array2<Float>> {
        if tokens.is_empty() {
            return Err(Error::Shape {
                what: "embed input".into(),
                expected: "at least one position".into(),
                found: "empty sequence".into(),
            });
        }
        if tokens.len() > self.config.max_len + 1 {
            return Err(Error::InputTooLong {
                len: tokens.len(),
                max: self.config.max_len + 1,
            });
        }
        let mut e = Array2::zeros((tokens.len(), self.config.d_c));
        for (i, &id) in tokens.ids().iter().enumerate() {
            if id as usize >= self.vocab_size {
                return Err(Error::InvalidToken {
                    id,
                    vocab_size: self.vocab_size,
                });
            }
            let row = &self.params.embedding.row(id as usize) + &self.params.positional.row(i);
            e.row_mut(i).assign(&row);
        }
        Ok(e)
    }

    /// Runs the encoder over raw embeddings and returns the logits computed
    /// from the sentinel position's hidden state. Pure function of
    /// (weights, e).
    pub fn forward_from_embeddings(&self, e: &Array2<Float>) -> Result<Logits> {
        let (z, _) = encoder::run(self, e, false)?;
        Ok(z)
    }

    /// `forward_from_embeddings(embed(tokens))`.
    pub fn forward(&self, tokens: &TokenSeq) -> Result<Logits> {
        let e = self.embed(tokens)?;
        self.forward_from_embeddings(&e)
    }

    /// Predicted class: argmax of the logits, ties broken by lowest index.
    pub fn predict(&self, tokens: &TokenSeq) -> Result<usize> {
        Ok(argmax(&self.forward(tokens)?))
    }

    /// Gradient of a scalar loss functional of the logits with respect to
    /// the input embeddings. Same shape as `e`.
    pub fn input_gradient(&self, e: &Array2<Float>, loss: &LossSpec) -> Result<Array2<Float>> {
        let (z, tape) = encoder::run(self, e, true)?;
        let dz = loss.grad(&z)?;
        let de = encoder::backward(self, tape.as_ref().expect("tape requested"), &dz, None);
        if !de.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite input gradient (loss {:?}, logits {:?})",
                loss, z
            )));
        }
        Ok(de)
    }

    /// Forward pass that records the activations needed by
    /// [`Model::backward`].
    pub fn forward_with_tape(&self, e: &Array2<Float>) -> Result<(Logits, Tape)> {
        let (z, tape) = encoder::run(self, e, true)?;
        Ok((z, tape.expect("tape requested")))
    }

    /// Reverse pass from a logit gradient. Returns the gradient with respect
    /// to the input embeddings; accumulates weight gradients into `wgrads`
    /// when given (embedding/positional rows are scattered separately via
    /// [`Model::accumulate_embedding_grads`]).
    pub fn backward(&self, tape: &Tape, dz: &Logits, wgrads: Option<&mut Params>) -> Array2<Float> {
        encoder::backward(self, tape, dz, wgrads)
    }

    /// Scatters an input-embedding gradient into the embedding and
    /// positional tables of `wgrads`.
    pub fn accumulate_embedding_grads(
        &self,
        tokens: &TokenSeq,
        de: &Array2<Float>,
        wgrads: &mut Params,
    ) {
        for (i, &id) in tokens.ids().iter().enumerate() {
            let g = de.row(i);
            let mut row = wgrads.embedding.row_mut(id as usize);
            row += &g;
            let mut pos = wgrads.positional.row_mut(i);
            pos += &g;
        }
    }
}

/// Index of the largest entry, ties broken by lowest index.
pub fn argmax(z: &Logits) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Largest entry excluding `skip`, ties broken by lowest index.
/// Returns (index, value).
pub fn argmax_excluding(z: &Logits, skip: usize) -> (usize, Float) {
    let mut best: Option<usize> = None;
    for (i, &v) in z.iter().enumerate() {
        if i == skip {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if v > z[b] => best = Some(i),
            _ => {}
        }
    }
    let b = best.expect("logits must have at least two classes");
    (b, z[b])
}
