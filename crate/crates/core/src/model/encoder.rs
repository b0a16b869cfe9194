//! Encoder forward/backward kernels.
//!
//! Pre-layer-norm blocks: `x += attn(ln1(x)); x += ff(ln2(x))`, with a
//! GELU feed-forward and softmax attention. The backward pass is hand-rolled
//! reverse mode over the taped activations; it produces the gradient with
//! respect to the input embeddings and, optionally, all weight gradients.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::Float;

use super::{Logits, Model, Params};

const LN_EPS: Float = 1e-5;

/// Activations recorded by the forward pass for one encoder layer.
pub struct LayerTape {
    pub ln1_xhat: Array2<Float>,
    pub ln1_inv: Array1<Float>,
    pub ln1_out: Array2<Float>,
    pub q: Array2<Float>,
    pub k: Array2<Float>,
    pub v: Array2<Float>,
    /// Softmax attention weights, one (n+1) x (n+1) matrix per head.
    pub attn: Vec<Array2<Float>>,
    /// Concatenated per-head context, before the output projection.
    pub ctx: Array2<Float>,
    pub ln2_xhat: Array2<Float>,
    pub ln2_inv: Array1<Float>,
    pub ln2_out: Array2<Float>,
    /// Feed-forward pre-activation.
    pub c1: Array2<Float>,
    pub gelu_out: Array2<Float>,
}

/// Activations recorded by a forward pass, consumed by [`backward`].
pub struct Tape {
    pub layers: Vec<LayerTape>,
    /// Encoder output (input to the head).
    pub x_final: Array2<Float>,
}

/// Row-wise layer norm. Returns (output, normalized rows, 1/sigma per row).
fn layer_norm(
    x: &Array2<Float>,
    scale: &Array1<Float>,
    shift: &Array1<Float>,
) -> (Array2<Float>, Array2<Float>, Array1<Float>) {
    let d = x.ncols() as Float;
    let mut xhat = Array2::zeros(x.dim());
    let mut inv = Array1::zeros(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mu = row.sum() / d;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<Float>() / d;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv[i] = s;
        let mut out = xhat.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            out[j] = (v - mu) * s;
        }
    }
    let scale_row = scale.view().insert_axis(Axis(0));
    let shift_row = shift.view().insert_axis(Axis(0));
    let y = &xhat * &scale_row + shift_row;
    (y, xhat, inv)
}

/// Reverse of [`layer_norm`]; returns dx and accumulates dscale/dshift.
fn layer_norm_backward(
    dy: &Array2<Float>,
    xhat: &Array2<Float>,
    inv: &Array1<Float>,
    scale: &Array1<Float>,
    dscale: Option<(&mut Array1<Float>, &mut Array1<Float>)>,
) -> Array2<Float> {
    if let Some((ds, db)) = dscale {
        *ds += &(dy * xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as Float;
    let dxhat = dy * &scale.view().insert_axis(Axis(0));
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let dxh = dxhat.row(i);
        let xh = xhat.row(i);
        let m1 = dxh.sum() / d;
        let m2 = dxh
            .iter()
            .zip(xh.iter())
            .map(|(&a, &b)| a * b)
            .sum::<Float>()
            / d;
        let mut out = dx.row_mut(i);
        for j in 0..dy.ncols() {
            out[j] = (dxh[j] - m1 - xh[j] * m2) * inv[i];
        }
    }
    dx
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(x: &Array2<Float>) -> Array2<Float> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Reverse of row-wise softmax: ds = a * (da - sum(da * a)).
fn softmax_rows_backward(a: &Array2<Float>, da: &Array2<Float>) -> Array2<Float> {
    let mut ds = Array2::zeros(a.dim());
    for i in 0..a.nrows() {
        let ar = a.row(i);
        let dar = da.row(i);
        let dot = ar
            .iter()
            .zip(dar.iter())
            .map(|(&x, &y)| x * y)
            .sum::<Float>();
        let mut out = ds.row_mut(i);
        for j in 0..a.ncols() {
            out[j] = ar[j] * (dar[j] - dot);
        }
    }
    ds
}

#[allow(clippy::excessive_precision)] // exact sqrt(2/pi) for the f64 build
const GELU_C: Float = 0.797_884_560_802_865_4;
const GELU_A: Float = 0.044_715;

fn gelu(x: Float) -> Float {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: Float) -> Float {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn add_bias(x: &Array2<Float>, b: &Array1<Float>) -> Array2<Float> {
    x + &b.view().insert_axis(Axis(0))
}

/// Forward pass over raw embeddings. When `want_tape` is set, records the
/// activations needed for a reverse pass.
pub(crate) fn run(
    model: &Model,
    e: &Array2<Float>,
    want_tape: bool,
) -> Result<(Logits, Option<Tape>)> {
    let d = model.config.d_c;
    if e.ncols() != d || e.nrows() == 0 {
        return Err(Error::Shape {
            what: "encoder input".into(),
            expected: format!("(n+1) x {d}"),
            found: format!("{} x {}", e.nrows(), e.ncols()),
        });
    }
    let heads = model.config.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as Float).sqrt();

    let mut x = e.clone();
    let mut layer_tapes = Vec::with_capacity(model.params.layers.len());
    for layer in &model.params.layers {
        let (a, ln1_xhat, ln1_inv) = layer_norm(&x, &layer.ln1.scale, &layer.ln1.shift);
        let q = add_bias(&a.dot(&layer.attn.wq), &layer.attn.bq);
        let k = add_bias(&a.dot(&layer.attn.wk), &layer.attn.bk);
        let v = add_bias(&a.dot(&layer.attn.wv), &layer.attn.bv);
        let mut ctx = Array2::zeros(x.dim());
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let scores = qh.dot(&kh.t()) * scale;
            let a_h = softmax_rows(&scores);
            ctx.slice_mut(cols).assign(&a_h.dot(&vh));
            attn.push(a_h);
        }
        let o = add_bias(&ctx.dot(&layer.attn.wo), &layer.attn.bo);
        let x_mid = &x + &o;
        let (b, ln2_xhat, ln2_inv) = layer_norm(&x_mid, &layer.ln2.scale, &layer.ln2.shift);
        let c1 = add_bias(&b.dot(&layer.ff.w1), &layer.ff.b1);
        let g = c1.mapv(gelu);
        let c2 = add_bias(&g.dot(&layer.ff.w2), &layer.ff.b2);
        let x_out = &x_mid + &c2;
        if want_tape {
            layer_tapes.push(LayerTape {
                ln1_xhat,
                ln1_inv,
                ln1_out: a,
                q,
                k,
                v,
                attn,
                ctx,
                ln2_xhat,
                ln2_inv,
                ln2_out: b,
                c1,
                gelu_out: g,
            });
        }
        x = x_out;
    }

    let z = x.row(0).dot(&model.params.head_w) + &model.params.head_b;
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite logits {z:?} for input of {} positions",
            e.nrows()
        )));
    }
    let tape = want_tape.then_some(Tape {
        layers: layer_tapes,
        x_final: x,
    });
    Ok((z, tape))
}

/// Reverse pass from dL/dz. Returns dL/de; when `wgrads` is given, adds the
/// weight gradients for the head and every encoder layer into it.
pub(crate) fn backward(
    model: &Model,
    tape: &Tape,
    dz: &Logits,
    mut wgrads: Option<&mut Params>,
) -> Array2<Float> {
    let d = model.config.d_c;
    let heads = model.config.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as Float).sqrt();
    let n_rows = tape.x_final.nrows();

    // Head: z = x_final[0] . W + b.
    let mut dx: Array2<Float> = Array2::zeros((n_rows, d));
    let x0 = tape.x_final.row(0);
    dx.row_mut(0).assign(&model.params.head_w.dot(dz));
    if let Some(w) = wgrads.as_deref_mut() {
        let outer = x0.insert_axis(Axis(1)).dot(&dz.view().insert_axis(Axis(0)));
        w.head_w += &outer;
        w.head_b += dz;
    }

    for (li, layer) in model.params.layers.iter().enumerate().rev() {
        let t = &tape.layers[li];

        // Feed-forward block (x_out = x_mid + c2).
        let dc2 = &dx;
        let dg = dc2.dot(&layer.ff.w2.t());
        let mut dc1 = dg;
        ndarray::Zip::from(&mut dc1)
            .and(&t.c1)
            .for_each(|g, &c| *g *= gelu_prime(c));
        let db = dc1.dot(&layer.ff.w1.t());
        if let Some(w) = wgrads.as_deref_mut() {
            let lw = &mut w.layers[li].ff;
            lw.w2 += &t.gelu_out.t().dot(dc2);
            lw.b2 += &dc2.sum_axis(Axis(0));
            lw.w1 += &t.ln2_out.t().dot(&dc1);
            lw.b1 += &dc1.sum_axis(Axis(0));
        }
        let dscale2 = wgrads.as_deref_mut().map(|w| {
            let ln = &mut w.layers[li].ln2;
            (&mut ln.scale, &mut ln.shift)
        });
        let dx_ln2 = layer_norm_backward(&db, &t.ln2_xhat, &t.ln2_inv, &layer.ln2.scale, dscale2);
        let dx_mid = &dx + &dx_ln2;

        // Attention block (x_mid = x_in + o).
        let do_ = &dx_mid;
        let dctx = do_.dot(&layer.attn.wo.t());
        if let Some(w) = wgrads.as_deref_mut() {
            let lw = &mut w.layers[li].attn;
            lw.wo += &t.ctx.t().dot(do_);
            lw.bo += &do_.sum_axis(Axis(0));
        }
        let mut dq: Array2<Float> = Array2::zeros((n_rows, d));
        let mut dk: Array2<Float> = Array2::zeros((n_rows, d));
        let mut dv: Array2<Float> = Array2::zeros((n_rows, d));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a_h = &t.attn[h];
            let dctx_h = dctx.slice(cols);
            let vh = t.v.slice(cols);
            let da = dctx_h.dot(&vh.t());
            dv.slice_mut(cols).assign(&a_h.t().dot(&dctx_h));
            let ds = softmax_rows_backward(a_h, &da);
            dq.slice_mut(cols)
                .assign(&(ds.dot(&t.k.slice(cols)) * scale));
            dk.slice_mut(cols)
                .assign(&(ds.t().dot(&t.q.slice(cols)) * scale));
        }
        let da_ln =
            dq.dot(&layer.attn.wq.t()) + dk.dot(&layer.attn.wk.t()) + dv.dot(&layer.attn.wv.t());
        if let Some(w) = wgrads.as_deref_mut() {
            let lw = &mut w.layers[li].attn;
            lw.wq += &t.ln1_out.t().dot(&dq);
            lw.bq += &dq.sum_axis(Axis(0));
            lw.wk += &t.ln1_out.t().dot(&dk);
            lw.bk += &dk.sum_axis(Axis(0));
            lw.wv += &t.ln1_out.t().dot(&dv);
            lw.bv += &dv.sum_axis(Axis(0));
        }
        let dscale1 = wgrads.as_deref_mut().map(|w| {
            let ln = &mut w.layers[li].ln1;
            (&mut ln.scale, &mut ln.shift)
        });
        let dx_ln1 =
            layer_norm_backward(&da_ln, &t.ln1_xhat, &t.ln1_inv, &layer.ln1.scale, dscale1);
        dx = dx_mid + dx_ln1;
    }
    dx
}
