//! Test-only oracles for the attack toolkit.
//!
//! [`ReferenceModel`] is an independent double-precision reimplementation of
//! the classifier forward pass using plain nested loops over named tensors
//! (no shared kernels with the production crate). Finite differences of this
//! reference are the ground truth that the production gradients are checked
//! against.

use std::collections::BTreeMap;

use advchar_core::model::Model;
use advchar_core::vocab::TokenSeq;

const LN_EPS: f64 = 1e-5;

/// Double-precision copy of a model's tensors, keyed by canonical name.
#[derive(Clone)]
pub struct ReferenceModel {
    pub d_c: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub classes: usize,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl ReferenceModel {
    pub fn from_model(m: &Model) -> ReferenceModel {
        let mut tensors = BTreeMap::new();
        m.params.visit(|name, t| {
            tensors.insert(
                name,
                (t.shape().to_vec(), t.iter().map(|&x| x as f64).collect()),
            );
        });
        ReferenceModel {
            d_c: m.config.d_c,
            heads: m.config.heads,
            layers: m.config.layers,
            d_ff: m.config.d_ff,
            classes: m.config.classes,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> &(Vec<usize>, Vec<f64>) {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no tensor `{name}`"))
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn perturb(&mut self, name: &str, flat_index: usize, delta: f64) {
        let (_, data) = self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("no tensor `{name}`"));
        data[flat_index] += delta;
    }

    fn mat(&self, name: &str) -> (usize, usize, &[f64]) {
        let (shape, data) = self.tensor(name);
        assert_eq!(shape.len(), 2, "{name} is not 2-D");
        (shape[0], shape[1], data)
    }

    fn vec1(&self, name: &str) -> &[f64] {
        let (shape, data) = self.tensor(name);
        assert_eq!(shape.len(), 1, "{name} is not 1-D");
        data
    }

    pub fn embed_tokens(&self, tokens: &TokenSeq) -> Vec<Vec<f64>> {
        let (_, d, emb) = self.mat("embedding");
        let (_, _, pos) = self.mat("positional");
        tokens
            .ids()
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                (0..d)
                    .map(|j| emb[id as usize * d + j] + pos[i * d + j])
                    .collect()
            })
            .collect()
    }

    pub fn forward_tokens(&self, tokens: &TokenSeq) -> Vec<f64> {
        self.forward_from_embeddings(&self.embed_tokens(tokens))
    }

    /// Pre-layer-norm encoder plus linear head, all in f64 loops.
    pub fn forward_from_embeddings(&self, e: &[Vec<f64>]) -> Vec<f64> {
        let d = self.d_c;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = e.len();

        let layer_norm = |x: &[f64], scale_v: &[f64], shift_v: &[f64]| -> Vec<f64> {
            let mu = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            (0..d)
                .map(|j| (x[j] - mu) * inv * scale_v[j] + shift_v[j])
                .collect()
        };
        let matvec = |x: &[f64], rows: usize, cols: usize, w: &[f64], b: &[f64]| -> Vec<f64> {
            assert_eq!(x.len(), rows);
            (0..cols)
                .map(|j| (0..rows).map(|i| x[i] * w[i * cols + j]).sum::<f64>() + b[j])
                .collect()
        };
        let gelu = |x: f64| -> f64 {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        };

        let mut x: Vec<Vec<f64>> = e.to_vec();
        for li in 0..self.layers {
            let name = |part: &str| format!("layer{li}.{part}");
            let ln1_s = self.vec1(&name("ln1.scale"));
            let ln1_b = self.vec1(&name("ln1.shift"));
            let a: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, ln1_s, ln1_b)).collect();

            let (_, _, wq) = self.mat(&name("attn.wq"));
            let (_, _, wk) = self.mat(&name("attn.wk"));
            let (_, _, wv) = self.mat(&name("attn.wv"));
            let (_, _, wo) = self.mat(&name("attn.wo"));
            let q: Vec<Vec<f64>> = a
                .iter()
                .map(|r| matvec(r, d, d, wq, self.vec1(&name("attn.bq"))))
                .collect();
            let k: Vec<Vec<f64>> = a
                .iter()
                .map(|r| matvec(r, d, d, wk, self.vec1(&name("attn.bk"))))
                .collect();
            let v: Vec<Vec<f64>> = a
                .iter()
                .map(|r| matvec(r, d, d, wv, self.vec1(&name("attn.bv"))))
                .collect();

            let mut ctx = vec![vec![0.0f64; d]; n];
            for h in 0..self.heads {
                let off = h * dh;
                for i in 0..n {
                    let mut scores: Vec<f64> = (0..n)
                        .map(|j| {
                            (0..dh).map(|c| q[i][off + c] * k[j][off + c]).sum::<f64>() * scale
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    for s in &mut scores {
                        *s = (*s - mx).exp();
                    }
                    let total: f64 = scores.iter().sum();
                    for s in &mut scores {
                        *s /= total;
                    }
                    for c in 0..dh {
                        ctx[i][off + c] = (0..n).map(|j| scores[j] * v[j][off + c]).sum::<f64>();
                    }
                }
            }
            let bo = self.vec1(&name("attn.bo"));
            let x_mid: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let o = matvec(&ctx[i], d, d, wo, bo);
                    (0..d).map(|j| x[i][j] + o[j]).collect()
                })
                .collect();

            let ln2_s = self.vec1(&name("ln2.scale"));
            let ln2_b = self.vec1(&name("ln2.shift"));
            let (_, _, w1) = self.mat(&name("ff.w1"));
            let (_, _, w2) = self.mat(&name("ff.w2"));
            let b1 = self.vec1(&name("ff.b1"));
            let b2 = self.vec1(&name("ff.b2"));
            x = (0..n)
                .map(|i| {
                    let b = layer_norm(&x_mid[i], ln2_s, ln2_b);
                    let c1 = matvec(&b, d, self.d_ff, w1, b1);
                    let g: Vec<f64> = c1.iter().map(|&t| gelu(t)).collect();
                    let c2 = matvec(&g, self.d_ff, d, w2, b2);
                    (0..d).map(|j| x_mid[i][j] + c2[j]).collect()
                })
                .collect();
        }

        let (_, classes, hw) = self.mat("head.weight");
        let hb = self.vec1("head.bias");
        (0..classes)
            .map(|c| (0..d).map(|j| x[0][j] * hw[j * classes + c]).sum::<f64>() + hb[c])
            .collect()
    }
}

/// Loss functionals mirrored in f64 for the oracle side.
#[derive(Clone, Copy, Debug)]
pub enum RefLoss {
    Logit { class: usize },
    HingeTargeted { class: usize, kappa: f64 },
    HingeUntargeted { class: usize, kappa: f64 },
    CrossEntropy { label: usize },
}

impl RefLoss {
    pub fn value(&self, z: &[f64]) -> f64 {
        let max_other = |skip: usize| {
            z.iter()
                .enumerate()
                .filter(|&(i, _)| i != skip)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        match *self {
            RefLoss::Logit { class } => z[class],
            RefLoss::HingeTargeted { class, kappa } => (max_other(class) - z[class]).max(-kappa),
            RefLoss::HingeUntargeted { class, kappa } => (z[class] - max_other(class)).max(-kappa),
            RefLoss::CrossEntropy { label } => {
                let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + z.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
                lse - z[label]
            }
        }
    }
}

/// Central finite differences of the reference loss with respect to selected
/// input-embedding coordinates.
pub fn fd_input_grad(
    rm: &ReferenceModel,
    e: &[Vec<f64>],
    loss: RefLoss,
    coords: &[(usize, usize)],
    h: f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|&(i, j)| {
            let mut plus = e.to_vec();
            plus[i][j] += h;
            let mut minus = e.to_vec();
            minus[i][j] -= h;
            (loss.value(&rm.forward_from_embeddings(&plus))
                - loss.value(&rm.forward_from_embeddings(&minus)))
                / (2.0 * h)
        })
        .collect()
}

/// Central finite differences with respect to selected weight coordinates,
/// evaluated through the token path (so embedding rows participate).
pub fn fd_param_grad(
    rm: &ReferenceModel,
    tokens: &TokenSeq,
    loss: RefLoss,
    coords: &[(String, usize)],
    h: f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|(name, flat)| {
            let mut plus = rm.clone();
            plus.perturb(name, *flat, h);
            let mut minus = rm.clone();
            minus.perturb(name, *flat, -h);
            (loss.value(&plus.forward_tokens(tokens)) - loss.value(&minus.forward_tokens(tokens)))
                / (2.0 * h)
        })
        .collect()
}

/// Max per-coordinate deviation relative to the gradient scale
/// (the largest magnitude on either side, floored away from zero).
pub fn max_rel_error(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    let scale = analytic
        .iter()
        .chain(fd.iter())
        .map(|v| v.abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    analytic
        .iter()
        .zip(fd.iter())
        .map(|(&a, &b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}
