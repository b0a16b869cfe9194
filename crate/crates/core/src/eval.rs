//! Attack-success metrics, whole-dataset evaluation runs, transferability,
//! and the human-evaluation study export.
//!
//! TSR and USR always recompute `argmax f(x')` from the stored adversarial
//! text rather than trusting the attack's own bookkeeping.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advchar::{attack, AttackConfig, AttackMode, TargetStrategy};
use crate::baseline::{
    baseline_attack, cluster_embeddings, default_cluster_count, ClusterAssignment,
};
use crate::data::{Dataset, LabelMap};
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::vocab::{TokenSeq, Vocab};
use crate::{derive_seed, Float};

/// Which attack produced a set of records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Advchar,
    Baseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Advchar => "advchar",
            Method::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "advchar" => Ok(Method::Advchar),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected advchar or baseline)"
            ))),
        }
    }
}

/// One attacked example as written to the per-example JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRecord {
    pub index: usize,
    pub method: Method,
    pub text: String,
    pub adversarial_text: String,
    pub label: usize,
    pub predicted_before: usize,
    pub predicted_after: usize,
    pub target: Option<usize>,
    pub succeeded: bool,
    pub modified_positions: Vec<usize>,
    pub modified_count: usize,
    pub steps_used: usize,
    pub norm: Float,
    pub logits: Vec<Float>,
}

/// Aggregated results for one (method, mode, norm, c, kappa) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub mode: String,
    pub strategy: Option<String>,
    pub norm: String,
    pub c: Float,
    pub kappa: Float,
    pub steps: usize,
    pub alpha: Float,
    pub seed: u64,
    pub n_examples: usize,
    pub n_originally_correct: usize,
    pub original_accuracy: f64,
    pub tsr_all: Option<f64>,
    pub tsr_correct: Option<f64>,
    pub usr_all: f64,
    pub usr_correct: Option<f64>,
    pub mean_modified_all: f64,
    pub mean_modified_correct: Option<f64>,
    pub mean_modified_successful: Option<f64>,
}

impl SummaryRow {
    pub const CSV_HEADER: &'static str = "method,mode,strategy,norm,c,kappa,steps,alpha,seed,\
n_examples,n_originally_correct,original_accuracy,tsr_all,tsr_correct,usr_all,usr_correct,\
mean_modified_all,mean_modified_correct,mean_modified_successful";

    pub fn to_csv_row(&self) -> String {
        fn opt(v: &Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method.as_str(),
            self.mode,
            self.strategy.clone().unwrap_or_default(),
            self.norm,
            self.c,
            self.kappa,
            self.steps,
            self.alpha,
            self.seed,
            self.n_examples,
            self.n_originally_correct,
            self.original_accuracy,
            opt(&self.tsr_all),
            opt(&self.tsr_correct),
            self.usr_all,
            opt(&self.usr_correct),
            self.mean_modified_all,
            opt(&self.mean_modified_correct),
            opt(&self.mean_modified_successful),
        )
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub summary: SummaryRow,
    pub records: Vec<AttackRecord>,
}

impl EvalReport {
    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn read_records_jsonl(raw: &str, path_for_errors: &str) -> Result<Vec<AttackRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AttackRecord = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!(
                "{path_for_errors}:{}: malformed record: {e}",
                lineno + 1
            ))
        })?;
        records.push(rec);
    }
    Ok(records)
}

fn recomputed_prediction(model: &Model, vocab: &Vocab, text: &str) -> Result<usize> {
    let tokens = vocab.encode(text, model.config.max_len);
    Ok(argmax(&model.forward(&tokens)?))
}

/// Targeted attack success rate: fraction of records whose recomputed
/// prediction on the adversarial text equals the record's target.
pub fn tsr(records: &[AttackRecord], model: &Model, vocab: &Vocab) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("TSR"));
    }
    let mut hits = 0usize;
    for rec in records {
        let target = rec.target.ok_or_else(|| {
            Error::Config(format!(
                "record {} has no target; TSR needs targeted results",
                rec.index
            ))
        })?;
        if recomputed_prediction(model, vocab, &rec.adversarial_text)? == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Untargeted attack success rate: fraction of records whose recomputed
/// prediction on the adversarial text differs from the true label.
pub fn usr(records: &[AttackRecord], model: &Model, vocab: &Vocab) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("USR"));
    }
    let mut hits = 0usize;
    for rec in records {
        if recomputed_prediction(model, vocab, &rec.adversarial_text)? != rec.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Number of positions i >= 1 where the sequences differ.
pub fn modified_chars(x: &TokenSeq, x_prime: &TokenSeq) -> Result<usize> {
    Ok(x.diff_positions(x_prime)?.len())
}

/// Everything `run_evaluation` needs besides the model and data.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub attack: AttackConfig,
    pub method: Method,
    pub seed: u64,
    /// Baseline cluster count; `None` picks min(1000, non-special-vocab/2).
    pub baseline_k: Option<usize>,
    pub baseline_max_iters: usize,
}

impl EvalConfig {
    pub fn new(attack: AttackConfig, method: Method, seed: u64) -> EvalConfig {
        EvalConfig {
            attack,
            method,
            seed,
            baseline_k: None,
            baseline_max_iters: 50,
        }
    }
}

fn mode_string(mode: AttackMode) -> (String, Option<String>) {
    match mode {
        AttackMode::Untargeted => ("untargeted".into(), None),
        AttackMode::Targeted(TargetStrategy::Fixed(t)) => {
            ("targeted".into(), Some(format!("fixed:{t}")))
        }
        AttackMode::Targeted(TargetStrategy::NextClass) => ("targeted".into(), Some("next".into())),
    }
}

fn attack_one(
    model: &Model,
    vocab: &Vocab,
    cfg: &EvalConfig,
    clusters: Option<&ClusterAssignment>,
    index: usize,
    text: &str,
    label: usize,
) -> Result<AttackRecord> {
    let x = vocab.encode(text, model.config.max_len);
    let predicted_before = argmax(&model.forward(&x)?);
    let example_seed = derive_seed(cfg.seed, index as u64);

    let (x_prime, succeeded, target, steps_used, norm, logits) = match cfg.method {
        Method::Advchar => {
            let res = attack(model, &x, label, &cfg.attack, example_seed)?;
            (
                res.x_prime,
                res.succeeded,
                res.target,
                res.steps_used,
                res.norm_of_best,
                res.logits_of_best.to_vec(),
            )
        }
        Method::Baseline => {
            let perturbable = (1..x.len())
                .filter(|&i| x.ids()[i] >= crate::vocab::NUM_SPECIALS)
                .count();
            let x_prime = if perturbable == 0 {
                x.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(example_seed);
                baseline_attack(&x, clusters.expect("clusters built for baseline"), &mut rng)?
            };
            let z = model.forward(&x_prime)?;
            let succeeded = argmax(&z) != label;
            // Embedding-space size of the substitution, for the norm column.
            let delta = &model.embed(&x_prime)? - &model.embed(&x)?;
            let norm = delta.iter().map(|v| v * v).sum::<Float>().sqrt();
            (x_prime, succeeded, None, 0, norm, z.to_vec())
        }
    };

    let predicted_after = argmax(&ndarray::Array1::from(logits.clone()));
    let modified_positions = x.diff_positions(&x_prime)?;
    Ok(AttackRecord {
        index,
        method: cfg.method,
        text: text.to_string(),
        adversarial_text: vocab.decode(&x_prime)?,
        label,
        predicted_before,
        predicted_after,
        target,
        succeeded,
        modified_positions: modified_positions.clone(),
        modified_count: modified_positions.len(),
        steps_used,
        norm,
        logits,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Attacks every example of the test set and aggregates success-rate
/// statistics over the full set and the originally-correct subset.
pub fn run_evaluation(
    model: &Model,
    vocab: &Vocab,
    test_set: &Dataset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.attack.validate()?;
    if test_set.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    for ex in &test_set.examples {
        if ex.label >= model.config.classes {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes; dataset/checkpoint mismatch",
                ex.label, model.config.classes
            )));
        }
    }
    let clusters = match cfg.method {
        Method::Baseline => {
            let k = cfg
                .baseline_k
                .unwrap_or_else(|| default_cluster_count(vocab.size()));
            Some(cluster_embeddings(
                &model.params.embedding,
                k,
                derive_seed(cfg.seed, u64::MAX),
                cfg.baseline_max_iters,
            )?)
        }
        Method::Advchar => None,
    };

    let records: Vec<AttackRecord> = test_set
        .examples
        .par_iter()
        .enumerate()
        .map(|(index, ex)| {
            attack_one(
                model,
                vocab,
                cfg,
                clusters.as_ref(),
                index,
                &ex.text,
                ex.label,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let correct: Vec<AttackRecord> = records
        .iter()
        .filter(|r| r.predicted_before == r.label)
        .cloned()
        .collect();
    let n_correct = correct.len();
    let original_accuracy = n_correct as f64 / records.len() as f64;

    let targeted = cfg.attack.mode.is_targeted() && cfg.method == Method::Advchar;
    let tsr_all = targeted.then(|| tsr(&records, model, vocab)).transpose()?;
    let tsr_correct = (targeted && n_correct > 0)
        .then(|| tsr(&correct, model, vocab))
        .transpose()?;
    let usr_all = usr(&records, model, vocab)?;
    let usr_correct = (n_correct > 0)
        .then(|| usr(&correct, model, vocab))
        .transpose()?;

    let (mode, strategy) = mode_string(cfg.attack.mode);
    let summary = SummaryRow {
        method: cfg.method,
        mode,
        strategy,
        norm: cfg.attack.norm.as_str().to_string(),
        c: cfg.attack.c,
        kappa: cfg.attack.kappa,
        steps: cfg.attack.steps,
        alpha: cfg.attack.alpha,
        seed: cfg.seed,
        n_examples: records.len(),
        n_originally_correct: n_correct,
        original_accuracy,
        tsr_all,
        tsr_correct,
        usr_all,
        usr_correct,
        mean_modified_all: mean(records.iter().map(|r| r.modified_count as f64))
            .expect("records non-empty"),
        mean_modified_correct: mean(correct.iter().map(|r| r.modified_count as f64)),
        mean_modified_successful: mean(
            records
                .iter()
                .filter(|r| r.succeeded)
                .map(|r| r.modified_count as f64),
        ),
    };
    Ok(EvalReport { summary, records })
}

/// Accuracy of a second (blackbox) model on adversarial texts generated
/// against another model, with its clean accuracy for comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub n_records: usize,
    /// Blackbox accuracy on the original texts of the records.
    pub clean_accuracy: f64,
    /// Blackbox accuracy on the adversarial texts.
    pub adversarial_accuracy: f64,
    pub accuracy_drop: f64,
    pub n_whitebox_successful: usize,
    /// Blackbox accuracy restricted to records the whitebox attack flipped.
    pub adversarial_accuracy_on_whitebox_successes: Option<f64>,
}

/// Evaluates transferability. When `expected_vocab_sha` is given (from the
/// whitebox run's summary) it must match the blackbox vocabulary.
pub fn transfer_evaluation(
    blackbox: &Model,
    vocab: &Vocab,
    records: &[AttackRecord],
    expected_vocab_sha: Option<&str>,
) -> Result<TransferReport> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("transfer accuracy"));
    }
    if let Some(expected) = expected_vocab_sha {
        let actual = vocab.sha256();
        if actual != expected {
            return Err(Error::Data(format!(
                "vocab mismatch: records were generated with {expected}, blackbox has {actual}"
            )));
        }
    }
    let mut clean_hits = 0usize;
    let mut adv_hits = 0usize;
    let mut wb_success = 0usize;
    let mut adv_hits_on_wb_success = 0usize;
    for rec in records {
        if recomputed_prediction(blackbox, vocab, &rec.text)? == rec.label {
            clean_hits += 1;
        }
        let adv_correct =
            recomputed_prediction(blackbox, vocab, &rec.adversarial_text)? == rec.label;
        if adv_correct {
            adv_hits += 1;
        }
        // Whitebox untargeted success = the generating model was flipped.
        if rec.succeeded && rec.predicted_after != rec.label {
            wb_success += 1;
            if adv_correct {
                adv_hits_on_wb_success += 1;
            }
        }
    }
    let n = records.len() as f64;
    let clean_accuracy = clean_hits as f64 / n;
    let adversarial_accuracy = adv_hits as f64 / n;
    Ok(TransferReport {
        n_records: records.len(),
        clean_accuracy,
        adversarial_accuracy,
        accuracy_drop: clean_accuracy - adversarial_accuracy,
        n_whitebox_successful: wb_success,
        adversarial_accuracy_on_whitebox_successes: (wb_success > 0)
            .then(|| adv_hits_on_wb_success as f64 / wb_success as f64),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyItem {
    pub id: usize,
    pub text: String,
    pub label_a: String,
    pub label_b: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyKey {
    pub id: usize,
    /// "a" or "b".
    pub correct: String,
}

#[derive(Debug, Clone)]
pub struct HumanEvalStudy {
    pub items: Vec<StudyItem>,
    pub key: Vec<StudyKey>,
}

impl HumanEvalStudy {
    pub fn items_jsonl(&self) -> String {
        self.items
            .iter()
            .map(|i| serde_json::to_string(i).expect("item serializes") + "\n")
            .collect()
    }

    pub fn key_jsonl(&self) -> String {
        self.key
            .iter()
            .map(|k| serde_json::to_string(k).expect("key serializes") + "\n")
            .collect()
    }
}

/// Samples `n_each` clean and `n_each` adversarial texts into a two-label
/// forced-choice study. Clean items pair the truth with a random different
/// label; adversarial items pair it with the model's wrong prediction. Item
/// order and label sides are shuffled; the answer key is separate.
pub fn export_human_eval(
    clean_set: &Dataset,
    records: &[AttackRecord],
    labels: &LabelMap,
    n_each: usize,
    seed: u64,
) -> Result<HumanEvalStudy> {
    if n_each == 0 {
        return Err(Error::Config("n_each must be at least 1".into()));
    }
    let eligible: Vec<&AttackRecord> = records
        .iter()
        .filter(|r| r.succeeded && r.predicted_after != r.label)
        .collect();
    if clean_set.len() < n_each {
        return Err(Error::Config(format!(
            "need {n_each} clean examples, have {}",
            clean_set.len()
        )));
    }
    if eligible.len() < n_each {
        return Err(Error::Config(format!(
            "need {n_each} successful adversarial examples, have {}",
            eligible.len()
        )));
    }
    let name = |idx: usize| -> Result<String> {
        labels
            .name_of(idx)
            .map(str::to_string)
            .ok_or_else(|| Error::Data(format!("label index {idx} outside label map")))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.num_classes();
    let mut entries: Vec<(String, String, String)> = Vec::with_capacity(2 * n_each);

    for idx in sample(&mut rng, clean_set.len(), n_each).iter() {
        let ex = &clean_set.examples[idx];
        let truth = name(ex.label)?;
        let mut fake_idx = rng.gen_range(0..classes - 1);
        if fake_idx >= ex.label {
            fake_idx += 1;
        }
        entries.push((ex.text.clone(), truth, name(fake_idx)?));
    }
    for idx in sample(&mut rng, eligible.len(), n_each).iter() {
        let rec = eligible[idx];
        entries.push((
            rec.adversarial_text.clone(),
            name(rec.label)?,
            name(rec.predicted_after)?,
        ));
    }

    // Shuffle item order, then coin-flip which side carries the truth.
    let mut order: Vec<usize> = (0..entries.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut items = Vec::with_capacity(entries.len());
    let mut key = Vec::with_capacity(entries.len());
    for (id, &entry_idx) in order.iter().enumerate() {
        let (text, truth, fake) = entries[entry_idx].clone();
        let truth_first = rng.gen_bool(0.5);
        let (label_a, label_b, correct) = if truth_first {
            (truth, fake, "a")
        } else {
            (fake, truth, "b")
        };
        items.push(StudyItem {
            id,
            text,
            label_a,
            label_b,
        });
        key.push(StudyKey {
            id,
            correct: correct.to_string(),
        });
    }
    Ok(HumanEvalStudy { items, key })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::model::ModelConfig;
    use crate::synth::{generate, SynthConfig};
    use crate::trainer::{evaluate_accuracy, train, TrainConfig};
    use crate::vocab::Vocab;
    use ndarray::{Array1, Array2};

    fn tiny_trained() -> (Model, Vocab, crate::synth::SynthData) {
        let synth_cfg = SynthConfig {
            classes: 3,
            vocab_size: 40,
            per_class_train: 40,
            per_class_dev: 10,
            per_class_test: 10,
            keywords_per_class: 1,
            min_len: 6,
            max_len: 10,
            seed: 44,
        };
        let data = generate(&synth_cfg).unwrap();
        let corpus: Vec<&str> = data
            .train
            .examples
            .iter()
            .map(|e| e.text.as_str())
            .collect();
        let vocab = Vocab::build(&corpus, 1).unwrap();
        let cfg = ModelConfig {
            d_c: 16,
            layers: 1,
            heads: 2,
            d_ff: 32,
            max_len: 12,
            classes: 3,
            seed: 3,
        };
        let model = Model::init(cfg, vocab.size()).unwrap();
        let train_enc = crate::data::encode_dataset(&vocab, &data.train, 12);
        let dev_enc = crate::data::encode_dataset(&vocab, &data.dev, 12);
        let tc = TrainConfig {
            batch_size: 16,
            lr: 1e-2,
            max_epochs: 8,
            patience: 3,
            seed: 2,
        };
        let (trained, _) = train(model, &train_enc, &dev_enc, &tc).unwrap();
        (trained, vocab, data)
    }

    fn synthetic_records(model: &Model, vocab: &Vocab, n: usize, seed: u64) -> Vec<AttackRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = model.config.classes;
        (0..n)
            .map(|index| {
                let len = rng.gen_range(2..8);
                let ids: Vec<u32> = std::iter::once(0)
                    .chain((0..len).map(|_| rng.gen_range(3..vocab.size() as u32)))
                    .collect();
                let x_prime = TokenSeq(ids.clone());
                let mut orig = ids.clone();
                if rng.gen_bool(0.5) {
                    let pos = rng.gen_range(1..orig.len());
                    orig[pos] = rng.gen_range(3..vocab.size() as u32);
                }
                let x = TokenSeq(orig);
                let z = model.forward(&x_prime).unwrap();
                let label = rng.gen_range(0..classes);
                let target = Some(rng.gen_range(0..classes));
                let modified_positions = x.diff_positions(&x_prime).unwrap();
                AttackRecord {
                    index,
                    method: Method::Advchar,
                    text: vocab.decode(&x).unwrap(),
                    adversarial_text: vocab.decode(&x_prime).unwrap(),
                    label,
                    predicted_before: argmax(&model.forward(&x).unwrap()),
                    predicted_after: argmax(&z),
                    target,
                    // Deliberately unreliable flag: metrics must not trust it.
                    succeeded: rng.gen_bool(0.5),
                    modified_count: modified_positions.len(),
                    modified_positions,
                    steps_used: 1,
                    norm: 0.0,
                    logits: z.to_vec(),
                }
            })
            .collect()
    }

    #[test]
    fn tsr_and_usr_trivial_fractions() {
        let (model, vocab, _) = tiny_trained();
        let mut records = synthetic_records(&model, &vocab, 4, 1);
        // Force targets/labels so that 3 of 4 hit the target.
        for (i, rec) in records.iter_mut().enumerate() {
            rec.target = Some(if i < 3 {
                rec.predicted_after
            } else {
                (rec.predicted_after + 1) % 3
            });
        }
        assert_eq!(tsr(&records, &model, &vocab).unwrap(), 0.75);
        for rec in records.iter_mut() {
            rec.target = Some(rec.predicted_after);
        }
        assert_eq!(tsr(&records, &model, &vocab).unwrap(), 1.0);

        for rec in records.iter_mut() {
            rec.label = rec.predicted_after;
        }
        assert_eq!(usr(&records, &model, &vocab).unwrap(), 0.0);
        for rec in records.iter_mut() {
            rec.label = (rec.predicted_after + 1) % 3;
        }
        assert_eq!(usr(&records, &model, &vocab).unwrap(), 1.0);
    }

    #[test]
    fn empty_text_examples_are_attacked_gracefully() {
        let (model, vocab, _) = tiny_trained();
        let test = Dataset {
            examples: vec![
                Example { text: String::new(), label: 0 },
                Example { text: String::new(), label: 1 },
            ],
        };
        for method in [Method::Advchar, Method::Baseline] {
            let cfg = EvalConfig::new(
                AttackConfig { steps: 3, ..AttackConfig::default() },
                method,
                0,
            );
            let report = run_evaluation(&model, &vocab, &test, &cfg).unwrap();
            assert_eq!(report.records.len(), 2);
            assert!(report.records.iter().all(|r| r.modified_count == 0));
        }
    }

    #[test]
    fn metrics_match_brute_force_recounts() {
        let (model, vocab, _) = tiny_trained();
        for trial in 0..10 {
            let records = synthetic_records(&model, &vocab, 100, 100 + trial);
            // Independent recount straight from the definitions.
            let mut tsr_count = 0usize;
            let mut usr_count = 0usize;
            for rec in &records {
                let x_prime = vocab.encode(&rec.adversarial_text, model.config.max_len);
                let pred = argmax(&model.forward(&x_prime).unwrap());
                if pred == rec.target.unwrap() {
                    tsr_count += 1;
                }
                if pred != rec.label {
                    usr_count += 1;
                }
            }
            assert_eq!(
                tsr(&records, &model, &vocab).unwrap(),
                tsr_count as f64 / 100.0
            );
            assert_eq!(
                usr(&records, &model, &vocab).unwrap(),
                usr_count as f64 / 100.0
            );
        }
    }

    #[test]
    fn metrics_reject_empty_sets() {
        let (model, vocab, _) = tiny_trained();
        assert!(matches!(
            tsr(&[], &model, &vocab),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            usr(&[], &model, &vocab),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn modified_chars_counts_positionwise_differences() {
        let a = TokenSeq(vec![0, 3, 4, 5]);
        assert_eq!(modified_chars(&a, &a).unwrap(), 0);
        let b = TokenSeq(vec![0, 3, 9, 5]);
        assert_eq!(modified_chars(&a, &b).unwrap(), 1);
        let short = TokenSeq(vec![0, 3]);
        assert!(matches!(
            modified_chars(&a, &short),
            Err(Error::Shape { .. })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let len = rng.gen_range(1..12);
            let x: Vec<u32> = std::iter::once(0)
                .chain((0..len).map(|_| rng.gen_range(3..20)))
                .collect();
            let y: Vec<u32> = std::iter::once(0)
                .chain((0..len).map(|_| rng.gen_range(3..20)))
                .collect();
            let (sx, sy) = (TokenSeq(x), TokenSeq(y));
            let naive = (1..sx.len())
                .filter(|&i| sx.ids()[i] != sy.ids()[i])
                .count();
            assert_eq!(modified_chars(&sx, &sy).unwrap(), naive);
        }
    }

    #[test]
    fn misclassifying_model_gives_free_untargeted_success() {
        let (mut model, vocab, data) = tiny_trained();
        // Zero head predicts class 0 everywhere; keep only class 1/2 examples.
        model.params.head_w = Array2::zeros((16, 3));
        model.params.head_b = Array1::zeros(3);
        let test = Dataset {
            examples: data
                .test
                .examples
                .iter()
                .filter(|e| e.label != 0)
                .cloned()
                .collect(),
        };
        let cfg = EvalConfig::new(
            AttackConfig {
                steps: 5,
                ..AttackConfig::default()
            },
            Method::Advchar,
            0,
        );
        let report = run_evaluation(&model, &vocab, &test, &cfg).unwrap();
        assert_eq!(report.summary.usr_all, 1.0);
        assert_eq!(report.summary.mean_modified_all, 0.0);
        assert_eq!(report.summary.original_accuracy, 0.0);
        assert!(report.summary.usr_correct.is_none());
    }

    #[test]
    fn evaluation_is_byte_identical_across_runs() {
        let (model, vocab, data) = tiny_trained();
        let test = Dataset {
            examples: data.test.examples[..12].to_vec(),
        };
        let cfg = EvalConfig::new(
            AttackConfig {
                steps: 20,
                ..AttackConfig::default()
            },
            Method::Advchar,
            9,
        );
        let a = run_evaluation(&model, &vocab, &test, &cfg).unwrap();
        let b = run_evaluation(&model, &vocab, &test, &cfg).unwrap();
        assert_eq!(a.records_jsonl(), b.records_jsonl());
        assert_eq!(
            serde_json::to_string(&a.summary).unwrap(),
            serde_json::to_string(&b.summary).unwrap()
        );
    }

    #[test]
    fn baseline_usr_trails_advchar_by_a_wide_margin() {
        let (model, vocab, data) = tiny_trained();
        let test = Dataset {
            examples: data.test.examples.clone(),
        };
        let adv_cfg = EvalConfig::new(AttackConfig::default(), Method::Advchar, 5);
        let base_cfg = EvalConfig::new(AttackConfig::default(), Method::Baseline, 5);
        let adv = run_evaluation(&model, &vocab, &test, &adv_cfg).unwrap();
        let base = run_evaluation(&model, &vocab, &test, &base_cfg).unwrap();
        let adv_usr = adv.summary.usr_correct.unwrap();
        let base_usr = base.summary.usr_correct.unwrap();
        assert!(
            base_usr <= adv_usr - 0.3,
            "baseline {base_usr} vs advchar {adv_usr}"
        );
    }

    #[test]
    fn targeted_run_has_tsr_at_most_usr() {
        let (model, vocab, data) = tiny_trained();
        let test = Dataset {
            examples: data.test.examples[..15].to_vec(),
        };
        let cfg = EvalConfig::new(
            AttackConfig {
                c: 10.0,
                kappa: 10.0,
                mode: AttackMode::Targeted(TargetStrategy::NextClass),
                ..AttackConfig::default()
            },
            Method::Advchar,
            2,
        );
        let report = run_evaluation(&model, &vocab, &test, &cfg).unwrap();
        // Next-class targets always differ from the truth, so hitting the
        // target implies leaving the truth.
        assert!(report.summary.tsr_all.unwrap() <= report.summary.usr_all);
        for rec in &report.records {
            assert_ne!(rec.target.unwrap(), rec.label);
        }
    }

    #[test]
    fn summary_statistics_are_recomputable_from_records() {
        let (model, vocab, data) = tiny_trained();
        let test = Dataset {
            examples: data.test.examples[..10].to_vec(),
        };
        let cfg = EvalConfig::new(
            AttackConfig {
                steps: 30,
                ..AttackConfig::default()
            },
            Method::Advchar,
            3,
        );
        let report = run_evaluation(&model, &vocab, &test, &cfg).unwrap();
        let recomputed_usr = usr(&report.records, &model, &vocab).unwrap();
        assert_eq!(report.summary.usr_all, recomputed_usr);
        let correct: Vec<AttackRecord> = report
            .records
            .iter()
            .filter(|r| r.predicted_before == r.label)
            .cloned()
            .collect();
        if !correct.is_empty() {
            assert_eq!(
                report.summary.usr_correct.unwrap(),
                usr(&correct, &model, &vocab).unwrap()
            );
        }
        let mean_mod = report
            .records
            .iter()
            .map(|r| r.modified_count)
            .sum::<usize>() as f64
            / report.records.len() as f64;
        assert_eq!(report.summary.mean_modified_all, mean_mod);
        // Stored texts re-encode to the token-level outcome the attack saw.
        for rec in &report.records {
            let x = vocab.encode(&rec.text, model.config.max_len);
            let x_prime = vocab.encode(&rec.adversarial_text, model.config.max_len);
            assert_eq!(x.diff_positions(&x_prime).unwrap(), rec.modified_positions);
            assert_eq!(
                argmax(&model.forward(&x_prime).unwrap()),
                rec.predicted_after
            );
        }
    }

    #[test]
    fn transfer_on_same_model_zeroes_successful_subset() {
        let (model, vocab, data) = tiny_trained();
        let test = Dataset {
            examples: data.test.examples[..15].to_vec(),
        };
        let cfg = EvalConfig::new(AttackConfig::default(), Method::Advchar, 1);
        let report = run_evaluation(&model, &vocab, &test, &cfg).unwrap();
        let sha = vocab.sha256();
        let transfer = transfer_evaluation(&model, &vocab, &report.records, Some(&sha)).unwrap();
        assert!(transfer.n_whitebox_successful > 0);
        assert_eq!(
            transfer.adversarial_accuracy_on_whitebox_successes,
            Some(0.0)
        );

        let err = transfer_evaluation(&model, &vocab, &report.records, Some("bogus"));
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn human_eval_export_builds_a_valid_study() {
        let (model, vocab, data) = tiny_trained();
        let cfg = EvalConfig::new(AttackConfig::default(), Method::Advchar, 8);
        let report = run_evaluation(&model, &vocab, &data.test, &cfg).unwrap();
        let n_each = 5;
        let study =
            export_human_eval(&data.test, &report.records, &data.labels, n_each, 17).unwrap();
        assert_eq!(study.items.len(), 2 * n_each);
        assert_eq!(study.key.len(), 2 * n_each);
        for (item, key) in study.items.iter().zip(study.key.iter()) {
            assert_eq!(item.id, key.id);
            assert_ne!(item.label_a, item.label_b, "two distinct labels");
            assert!(key.correct == "a" || key.correct == "b");
            let correct_name = if key.correct == "a" {
                &item.label_a
            } else {
                &item.label_b
            };
            assert!(data.labels.index_of(correct_name).is_some());
        }
        // Reproducible from the seed.
        let again =
            export_human_eval(&data.test, &report.records, &data.labels, n_each, 17).unwrap();
        assert_eq!(study.items_jsonl(), again.items_jsonl());
        assert_eq!(study.key_jsonl(), again.key_jsonl());
        // Different seed shuffles differently (overwhelmingly likely).
        let other =
            export_human_eval(&data.test, &report.records, &data.labels, n_each, 18).unwrap();
        assert_ne!(study.items_jsonl(), other.items_jsonl());
    }

    #[test]
    fn human_eval_export_rejects_insufficient_data() {
        let (model, vocab, data) = tiny_trained();
        let cfg = EvalConfig::new(AttackConfig::default(), Method::Advchar, 8);
        let report = run_evaluation(&model, &vocab, &data.test, &cfg).unwrap();
        let tiny = Dataset {
            examples: data.test.examples[..2].to_vec(),
        };
        assert!(matches!(
            export_human_eval(&tiny, &report.records, &data.labels, 5, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trained_model_is_accurate_enough_for_eval_tests() {
        let (model, vocab, data) = tiny_trained();
        let enc = crate::data::encode_dataset(&vocab, &data.test, 12);
        let acc = evaluate_accuracy(&model, &enc).unwrap();
        assert!(acc >= 0.9, "toy model reached only {acc}");
    }
}
