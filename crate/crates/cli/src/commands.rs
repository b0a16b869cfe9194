//! Command implementations behind the thin argument layer.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use advchar_core::advchar::{AttackConfig, AttackMode, Norm, Selection, TargetStrategy};
use advchar_core::data::{encode_dataset, load_dataset, save_dataset, LabelMap};
use advchar_core::error::{Error, Result};
use advchar_core::eval::{
    export_human_eval as eval_export_human_eval, read_records_jsonl, run_evaluation,
    transfer_evaluation, EvalConfig, Method, SummaryRow,
};
use advchar_core::model::{Model, ModelConfig};
use advchar_core::synth::{generate, SynthConfig};
use advchar_core::trainer::{load_checkpoint, save_checkpoint, train as train_model, TrainConfig};
use advchar_core::vocab::Vocab;
use advchar_core::{derive_seed, Float};

use crate::{
    load_file_config, required, AttackArgs, ExportHumanEvalArgs, ExportVocabArgs, GenArgs,
    TrainArgs, TransferArgs,
};

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn gen(args: GenArgs) -> Result<()> {
    let file = load_file_config(&args.config)?;
    let section = file.gen.unwrap_or_default();
    let seed = args.seed.or(section.seed).or(file.seed).unwrap_or(0);
    let out = required(args.out.or(section.out), "out")?;

    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        classes: args.classes.or(section.classes).unwrap_or(defaults.classes),
        vocab_size: args
            .vocab_size
            .or(section.vocab_size)
            .unwrap_or(defaults.vocab_size),
        per_class_train: args
            .per_class
            .or(section.per_class)
            .unwrap_or(defaults.per_class_train),
        per_class_dev: args
            .per_class_dev
            .or(section.per_class_dev)
            .unwrap_or(defaults.per_class_dev),
        per_class_test: args
            .per_class_test
            .or(section.per_class_test)
            .unwrap_or(defaults.per_class_test),
        keywords_per_class: args
            .keywords_per_class
            .or(section.keywords_per_class)
            .unwrap_or(defaults.keywords_per_class),
        min_len: args.len_min.or(section.len_min).unwrap_or(defaults.min_len),
        max_len: args.len_max.or(section.len_max).unwrap_or(defaults.max_len),
        seed,
    };
    let data = generate(&cfg)?;
    ensure_dir(&out)?;
    save_dataset(&out.join("train.jsonl"), &data.train, &data.labels)?;
    save_dataset(&out.join("dev.jsonl"), &data.dev, &data.labels)?;
    save_dataset(&out.join("test.jsonl"), &data.test, &data.labels)?;
    data.labels.save(&out.join("label_map.json"))?;
    println!(
        "wrote {} train / {} dev / {} test examples ({} classes, {} alphabet chars) to {}",
        data.train.len(),
        data.dev.len(),
        data.test.len(),
        cfg.classes,
        cfg.vocab_size,
        out.display()
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let file = load_file_config(&args.config)?;
    let section = file.train.unwrap_or_default();
    let seed = args.seed.or(section.seed).or(file.seed).unwrap_or(0);
    let data_dir = required(args.data.or(section.data), "data")?;
    let out = required(args.out.or(section.out), "out")?;

    let label_path = data_dir.join("label_map.json");
    if !label_path.exists() {
        return Err(Error::Config(format!(
            "label map not found at {} (expected next to the dataset)",
            label_path.display()
        )));
    }
    let labels = LabelMap::load(&label_path)?;
    let train_ds = load_dataset(&data_dir.join("train.jsonl"), &labels)?;
    let dev_ds = load_dataset(&data_dir.join("dev.jsonl"), &labels)?;

    let min_freq = args.min_freq.or(section.min_freq).unwrap_or(1);
    let corpus: Vec<&str> = train_ds.examples.iter().map(|e| e.text.as_str()).collect();
    let vocab = Vocab::build(&corpus, min_freq)?;

    let md = ModelConfig::default();
    let model_cfg = ModelConfig {
        d_c: args.d_c.or(section.d_c).unwrap_or(md.d_c),
        layers: args.layers.or(section.layers).unwrap_or(md.layers),
        heads: args.heads.or(section.heads).unwrap_or(md.heads),
        d_ff: args.d_ff.or(section.d_ff).unwrap_or(md.d_ff),
        max_len: args.max_len.or(section.max_len).unwrap_or(md.max_len),
        classes: labels.num_classes(),
        seed: derive_seed(seed, 1),
    };
    let td = TrainConfig::default();
    let train_cfg = TrainConfig {
        batch_size: args
            .batch_size
            .or(section.batch_size)
            .unwrap_or(td.batch_size),
        lr: args.lr.or(section.lr).unwrap_or(td.lr),
        max_epochs: args.max_epochs.or(section.max_epochs).unwrap_or(20),
        patience: args.patience.or(section.patience).unwrap_or(td.patience),
        seed: derive_seed(seed, 2),
    };

    let train_enc = encode_dataset(&vocab, &train_ds, model_cfg.max_len);
    let dev_enc = encode_dataset(&vocab, &dev_ds, model_cfg.max_len);
    let model = Model::init(model_cfg, vocab.size())?;
    let (best, log) = train_model(model, &train_enc, &dev_enc, &train_cfg)?;

    ensure_dir(&out)?;
    save_checkpoint(&best, &vocab, &labels, &out.join("model.ckpt"))?;
    write_file(&out.join("train_log.csv"), &log.to_csv())?;
    let best_acc = log
        .epochs
        .iter()
        .map(|e| e.dev_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    println!(
        "trained {} epochs, best dev accuracy {best_acc}; checkpoint at {}",
        log.epochs.len(),
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn parse_mode(mode: &str, strategy: Option<&str>) -> Result<AttackMode> {
    match mode {
        "untargeted" => Ok(AttackMode::Untargeted),
        "targeted" => {
            let strategy = strategy.unwrap_or("next");
            if strategy == "next" {
                Ok(AttackMode::Targeted(TargetStrategy::NextClass))
            } else if let Some(class) = strategy.strip_prefix("fixed:") {
                let class = class.parse::<usize>().map_err(|_| {
                    Error::Config(format!("invalid class in --strategy {strategy}"))
                })?;
                Ok(AttackMode::Targeted(TargetStrategy::Fixed(class)))
            } else {
                Err(Error::Config(format!(
                    "unknown strategy `{strategy}` (expected fixed:<class> or next)"
                )))
            }
        }
        other => Err(Error::Config(format!(
            "unknown mode `{other}` (expected targeted or untargeted)"
        ))),
    }
}

fn parse_selection(s: &str) -> Result<Selection> {
    match s {
        "best" => Ok(Selection::BestCandidate),
        "final" => Ok(Selection::Final),
        other => Err(Error::Config(format!(
            "unknown selection `{other}` (expected best or final)"
        ))),
    }
}

fn parse_sweep(s: &str) -> Result<Vec<(Float, Float)>> {
    let mut cells = Vec::new();
    for cell in s.split(',') {
        let cell = cell.trim();
        if cell.is_empty() {
            continue;
        }
        let (c, k) = cell.split_once('/').ok_or_else(|| {
            Error::Config(format!("sweep cell `{cell}` is not of the form c/kappa"))
        })?;
        let c: Float = c
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("invalid c in sweep cell `{cell}`")))?;
        let k: Float = k
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("invalid kappa in sweep cell `{cell}`")))?;
        cells.push((c, k));
    }
    if cells.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    Ok(cells)
}

/// Number formatting for file names: 5.0 -> "5", 0.5 -> "0.5".
fn num_tag(x: Float) -> String {
    format!("{x}").replace('.', "p")
}

#[derive(Serialize, Deserialize)]
struct AttackSummaryFile {
    vocab_sha256: String,
    model_config: ModelConfig,
    rows: Vec<SummaryRow>,
}

pub fn attack(args: AttackArgs) -> Result<()> {
    let file = load_file_config(&args.config)?;
    let section = file.attack.unwrap_or_default();
    let seed = args.seed.or(section.seed).or(file.seed).unwrap_or(0);
    let checkpoint = required(args.checkpoint.or(section.checkpoint), "checkpoint")?;
    let data = required(args.data.or(section.data), "data")?;
    let out = required(args.out.or(section.out), "out")?;

    if let Some(workers) = args.workers.or(section.workers) {
        if workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        // Ignore the error when a global pool already exists (e.g. tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }

    let method = Method::parse(
        args.method
            .as_deref()
            .or(section.method.as_deref())
            .unwrap_or("advchar"),
    )?;
    let mode = parse_mode(
        args.mode
            .as_deref()
            .or(section.mode.as_deref())
            .unwrap_or("untargeted"),
        args.strategy.as_deref().or(section.strategy.as_deref()),
    )?;
    let selection = parse_selection(
        args.selection
            .as_deref()
            .or(section.selection.as_deref())
            .unwrap_or("best"),
    )?;
    let norm_spec: Vec<String> = if !args.norm.is_empty() {
        args.norm.clone()
    } else if let Some(n) = &section.norm {
        n.split(',').map(|s| s.trim().to_string()).collect()
    } else {
        vec!["l2".to_string()]
    };
    let norms: Vec<Norm> = norm_spec
        .iter()
        .map(|s| Norm::parse(s))
        .collect::<Result<_>>()?;
    let cells: Vec<(Float, Float)> = match args.sweep.as_deref().or(section.sweep.as_deref()) {
        Some(s) => parse_sweep(s)?,
        None => vec![(
            args.c.or(section.c).unwrap_or(5.0),
            args.kappa.or(section.kappa).unwrap_or(5.0),
        )],
    };
    let steps = args.steps.or(section.steps).unwrap_or(100);
    let alpha = args.alpha.or(section.alpha).unwrap_or(0.1);

    let (model, vocab, labels) = load_checkpoint(&checkpoint)?;
    let test_set = load_dataset(&data, &labels)?;
    ensure_dir(&out)?;

    let mut rows = Vec::new();
    for &(c, kappa) in &cells {
        for &norm in &norms {
            let attack_cfg = AttackConfig {
                c,
                kappa,
                norm,
                steps,
                alpha,
                mode,
                selection,
            };
            let eval_cfg = EvalConfig {
                attack: attack_cfg,
                method,
                seed,
                baseline_k: args.baseline_k.or(section.baseline_k),
                baseline_max_iters: 50,
            };
            let report = run_evaluation(&model, &vocab, &test_set, &eval_cfg)?;
            let name = format!(
                "records_{}_{}_{}_c{}_k{}.jsonl",
                method.as_str(),
                report.summary.mode,
                norm.as_str(),
                num_tag(c),
                num_tag(kappa)
            );
            write_file(&out.join(&name), &report.records_jsonl())?;
            println!(
                "{} {} {} c/kappa={}/{}: acc {:.3}, USR {:.3}{}, mean modified {:.3} -> {}",
                method.as_str(),
                report.summary.mode,
                norm.as_str(),
                c,
                kappa,
                report.summary.original_accuracy,
                report.summary.usr_all,
                report
                    .summary
                    .tsr_all
                    .map(|t| format!(", TSR {t:.3}"))
                    .unwrap_or_default(),
                report.summary.mean_modified_all,
                name
            );
            rows.push(report.summary);
        }
    }

    let summary = AttackSummaryFile {
        vocab_sha256: vocab.sha256(),
        model_config: model.config.clone(),
        rows,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out.join("summary.json"), &(json + "\n"))?;
    let mut csv = String::from(SummaryRow::CSV_HEADER);
    csv.push('\n');
    for row in &summary.rows {
        csv.push_str(&row.to_csv_row());
        csv.push('\n');
    }
    write_file(&out.join("summary.csv"), &csv)?;
    Ok(())
}

pub fn transfer(args: TransferArgs) -> Result<()> {
    let file = load_file_config(&args.config)?;
    let section = file.transfer.unwrap_or_default();
    let blackbox = required(args.blackbox.or(section.blackbox), "blackbox")?;
    let adversarial = required(args.adversarial.or(section.adversarial), "adversarial")?;
    let out = required(args.out.or(section.out), "out")?;

    let (model, vocab, _labels) = load_checkpoint(&blackbox)?;
    let raw = fs::read_to_string(&adversarial)
        .map_err(|e| Error::io(adversarial.display().to_string(), e))?;
    let records = read_records_jsonl(&raw, &adversarial.display().to_string())?;

    // Vocab check against the generating run's summary when available.
    let summary_path: Option<PathBuf> = args.summary.or(section.summary).or_else(|| {
        let sibling = adversarial.parent().map(|p| p.join("summary.json"))?;
        sibling.exists().then_some(sibling)
    });
    let expected_sha = match &summary_path {
        Some(p) => {
            let raw = fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            let parsed: AttackSummaryFile = serde_json::from_str(&raw)
                .map_err(|e| Error::Data(format!("{}: invalid summary: {e}", p.display())))?;
            Some(parsed.vocab_sha256)
        }
        None => None,
    };

    let report = transfer_evaluation(&model, &vocab, &records, expected_sha.as_deref())?;
    ensure_dir(&out)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out.join("transfer.json"), &(json + "\n"))?;
    println!(
        "blackbox accuracy: clean {:.3}, adversarial {:.3} (drop {:.3}) over {} records",
        report.clean_accuracy, report.adversarial_accuracy, report.accuracy_drop, report.n_records
    );
    Ok(())
}

pub fn export_human_eval(args: ExportHumanEvalArgs) -> Result<()> {
    let file = load_file_config(&args.config)?;
    let section = file.export_human_eval.unwrap_or_default();
    let seed = args.seed.or(section.seed).or(file.seed).unwrap_or(0);
    let checkpoint = required(args.checkpoint.or(section.checkpoint), "checkpoint")?;
    let clean = required(args.clean.or(section.clean), "clean")?;
    let adversarial = required(args.adversarial.or(section.adversarial), "adversarial")?;
    let out = required(args.out.or(section.out), "out")?;
    let n_each = args.n_each.or(section.n_each).unwrap_or(50);

    let (_model, _vocab, labels) = load_checkpoint(&checkpoint)?;
    let clean_set = load_dataset(&clean, &labels)?;
    let raw = fs::read_to_string(&adversarial)
        .map_err(|e| Error::io(adversarial.display().to_string(), e))?;
    let records = read_records_jsonl(&raw, &adversarial.display().to_string())?;

    let study = eval_export_human_eval(&clean_set, &records, &labels, n_each, seed)?;
    ensure_dir(&out)?;
    write_file(&out.join("study.jsonl"), &study.items_jsonl())?;
    write_file(&out.join("key.jsonl"), &study.key_jsonl())?;
    println!(
        "wrote {} study items ({} clean + {} adversarial) and the answer key to {}",
        study.items.len(),
        n_each,
        n_each,
        out.display()
    );
    Ok(())
}

pub fn export_vocab(args: ExportVocabArgs) -> Result<()> {
    let checkpoint = required(args.checkpoint, "checkpoint")?;
    let out = required(args.out, "out")?;
    let (_model, vocab, _labels) = load_checkpoint(&checkpoint)?;
    write_file(&out, &vocab.to_text())?;
    println!(
        "wrote {} characters to {}",
        vocab.chars().len(),
        out.display()
    );
    Ok(())
}
