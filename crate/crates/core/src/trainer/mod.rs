//! Cross-entropy training with Adam and dev-accuracy early stopping.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::EncodedDataset;
use crate::error::{Error, Result};
use crate::model::{LossSpec, Model, Params};
use crate::{derive_seed, Float};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: Float,
    pub max_epochs: usize,
    /// Stop after this many epochs without a dev-accuracy improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 1e-3,
            max_epochs: 30,
            patience: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam accumulators, one (m, v) pair per tensor in the
/// canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
    pub step: u64,
    moments: Vec<(ArrayD<Float>, ArrayD<Float>)>,
}

impl AdamState {
    pub fn new(params: &Params) -> AdamState {
        let mut moments = Vec::new();
        params.visit(|_, t| moments.push((ArrayD::zeros(t.raw_dim()), ArrayD::zeros(t.raw_dim()))));
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }
}

/// One bias-corrected Adam update over contiguous slices. Shared by the
/// trainer (per named tensor) and the attack (over the perturbation matrix).
#[allow(clippy::too_many_arguments)]
pub(crate) fn adam_update_slice(
    m: &mut [Float],
    v: &mut [Float],
    params: &mut [Float],
    grads: &[Float],
    step: u64,
    beta1: Float,
    beta2: Float,
    eps: Float,
    lr: Float,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one Adam step to every parameter tensor in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut Params,
    grads: &Params,
    lr: Float,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::Numerical("non-finite gradient in Adam step".into()));
    }
    let mut grad_views = Vec::new();
    grads.visit(|name, t| grad_views.push((name, t)));
    state.step += 1;
    let step = state.step;
    let (beta1, beta2, eps) = (state.beta1, state.beta2, state.eps);
    let moments = &mut state.moments;
    let mut idx = 0;
    params.visit_mut(|name, mut t| {
        let (gname, g) = &grad_views[idx];
        debug_assert_eq!(&name, gname, "parameter/gradient order mismatch");
        let (m, v) = &mut moments[idx];
        adam_update_slice(
            m.as_slice_mut().expect("contiguous"),
            v.as_slice_mut().expect("contiguous"),
            t.as_slice_mut().expect("contiguous"),
            g.as_slice().expect("contiguous"),
            step,
            beta1,
            beta2,
            eps,
            lr,
        );
        idx += 1;
    });
    Ok(())
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc: f64,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_acc\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.dev_acc));
        }
        out
    }
}

/// Mean cross-entropy and accumulated weight gradients over one batch.
fn batch_pass(
    model: &Model,
    batch: &[(crate::vocab::TokenSeq, usize)],
    grads: &mut Params,
    scale: Float,
) -> Result<f64> {
    let mut total = 0.0f64;
    for (tokens, label) in batch {
        let e = model.embed(tokens)?;
        let (z, tape) = model.forward_with_tape(&e)?;
        let loss = LossSpec::CrossEntropy { label: *label };
        total += loss.value(&z)? as f64;
        let dz = loss.grad(&z)? * scale;
        let de = model.backward(&tape, &dz, Some(grads));
        model.accumulate_embedding_grads(tokens, &de, grads);
    }
    Ok(total)
}

/// Trains with shuffled mini-batches, returning the checkpoint with the best
/// dev accuracy and the per-epoch log. Stops early after `patience` epochs
/// without improvement.
pub fn train(
    model: Model,
    train_set: &EncodedDataset,
    dev_set: &EncodedDataset,
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Data(
            "training and dev splits must be non-empty".into(),
        ));
    }
    let classes = model.config.classes;
    for (tokens, label) in train_set.items.iter().chain(dev_set.items.iter()) {
        if *label >= classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence in dataset".into()));
        }
    }

    let mut model = model;
    let mut state = AdamState::new(&model.params);
    let mut grads = model.params.zeros_like();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Model)> = None;
    let mut epochs_since_improvement = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| train_set.items[i].clone()).collect();
            zero_params(&mut grads);
            let scale = 1.0 / batch.len() as Float;
            epoch_loss += batch_pass(&model, &batch, &mut grads, scale)?;
            adam_step(&mut state, &mut model.params, &grads, cfg.lr)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let dev_acc = evaluate_accuracy(&model, dev_set)?;
        log.epochs.push(EpochStats {
            epoch,
            train_loss,
            dev_acc,
        });

        let improved = best.as_ref().is_none_or(|(acc, _)| dev_acc > *acc);
        if improved {
            best = Some((dev_acc, model.clone()));
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, log))
}

fn zero_params(p: &mut Params) {
    p.visit_mut(|_, mut t| t.fill(0.0));
}

/// Fraction of examples whose predicted class matches the label.
pub fn evaluate_accuracy(model: &Model, dataset: &EncodedDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::UndefinedMetric("accuracy"));
    }
    let mut correct = 0usize;
    for (tokens, label) in &dataset.items {
        if model.predict(tokens)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}
