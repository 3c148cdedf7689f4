use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedids::checkpoint::Checkpoint;
use fedids::data::{
    build_examples, generate_synthetic, hash_encode, load_csv, load_csv_bytes, prepare,
    split_train_test, FlowRecord, LabeledExample, LoadOptions, PreparedData, SyntheticSpec,
};
use fedids::fed::run_simulation;
use fedids::fed::RoundConfig;
use fedids::metrics::{accuracy, time_inference, MetricsDocument};
use fedids::model::{ModelConfig, ModelWeights, PUBLISHED_PARAM_COUNT};
use fedids::partition::{partition_stats, split_dirichlet, split_iid};
use fedids::quant::{quantize_model, QuantPolicy};
use fedids::tokenizer::{TokenizerModel, CLS, FIRST_MERGE_ID};
use fedids::train::{evaluate, new_optimizer, train_centralized, TrainConfig};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::{EvalArgs, FedArgs, QuantizeArgs, SynthArgs, TokenizerArgs, TrainArgs};

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Runtime(fedids::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(fedids::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Appends one JSON object per line, flushing after each so partial runs
/// leave a readable file.
struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self, CliError> {
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(f),
        })
    }

    fn push(&mut self, value: &impl Serialize) -> Result<(), CliError> {
        let line = serde_json::to_string(value).map_err(fedids::Error::from)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| io_err(&self.path, e))
    }
}

/// Pretty JSON on stdout; a closed pipe is not an error.
fn print_json(value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(fedids::Error::from)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(io_err(Path::new("<stdout>"), e))
        }
        _ => Ok(()),
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn load_options(cfg: &ExperimentConfig) -> LoadOptions {
    LoadOptions {
        label_column: cfg.data.label_column.clone(),
        fraction: cfg.data.fraction,
        seed: cfg.seed,
        ..LoadOptions::default()
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} {} not found",
            path.display()
        )))
    }
}

/// Records and the SHA-256 of the bytes they came from.
fn load_records(cfg: &ExperimentConfig) -> Result<(Vec<FlowRecord>, String), CliError> {
    let opts = load_options(cfg);
    let ds = match (&cfg.data.path, &cfg.data.synthetic) {
        (Some(path), _) => {
            require_file(path, "data file")?;
            load_csv(path, &opts)?
        }
        (None, Some(spec)) => load_csv_bytes(
            &generate_synthetic(spec).map_err(CliError::usage)?.to_csv(),
            &opts,
        )?,
        (None, None) => {
            return Err(CliError::Usage(
                "no dataset: pass --data or set data.synthetic".into(),
            ))
        }
    };
    Ok((ds.records, ds.source_sha256))
}

/// Loads, splits and tokenizes the dataset and sizes the classifier to it.
fn prepare_data(cfg: &mut ExperimentConfig) -> Result<PreparedData, CliError> {
    let t = Instant::now();
    let (records, sha) = load_records(cfg)?;
    let mut data = prepare(
        records,
        cfg.data.train_fraction,
        cfg.seed,
        cfg.model.vocab_size,
        cfg.model.seq_len,
    )?;
    data.manifest.source_sha256 = Some(sha);
    cfg.model.num_classes = data.manifest.num_classes();
    cfg.model.validate().map_err(CliError::usage)?;
    eprintln!(
        "data: {} train / {} test examples, {} classes, tokenizer {} ids ({:.1}s)",
        data.train.len(),
        data.test.len(),
        cfg.model.num_classes,
        data.tokenizer.vocab_size(),
        t.elapsed().as_secs_f64()
    );
    Ok(data)
}

#[derive(Serialize)]
struct ParameterAccounting {
    /// Closed-form count for this checkpoint's config.
    model: u64,
    /// Closed-form count for the base hyperparameters.
    base_config: u64,
    /// Count reported for the published model; it does not follow from the
    /// base hyperparameters.
    published: u64,
}

fn accounting(cfg: &ModelConfig) -> ParameterAccounting {
    ParameterAccounting {
        model: cfg.count_params(),
        base_config: ModelConfig::default().count_params(),
        published: PUBLISHED_PARAM_COUNT,
    }
}

fn write_manifest(
    dir: &Path,
    cfg: &ExperimentConfig,
    data: &PreparedData,
    extra: serde_json::Value,
) -> Result<(), CliError> {
    let mut doc = json!({
        "config": cfg.to_json(),
        "dataset": data.manifest,
        "tokenizer": {
            "target_vocab_size": data.tokenizer.target_vocab_size(),
            "vocab_size": data.tokenizer.vocab_size(),
            "merges": data.tokenizer.merges().len(),
        },
        "parameters": accounting(&cfg.model),
    });
    if let (Some(d), serde_json::Value::Object(e)) = (doc.as_object_mut(), extra) {
        d.extend(e);
    }
    write_json(&dir.join("manifest.json"), &doc)
}

/// Checkpoint, metrics document and confusion CSV for the final weights.
fn finish(
    dir: &Path,
    cfg: &ExperimentConfig,
    data: &PreparedData,
    weights: &ModelWeights,
) -> Result<MetricsDocument, CliError> {
    let names = &data.manifest.class_names;
    let mut ckpt = Checkpoint::from_weights(weights, names, Some(data.tokenizer.clone()));
    ckpt.metadata = cfg.to_json();
    ckpt.save(dir.join("model.fids"))?;
    let eval = evaluate(weights, &data.test)?;
    let labels: Vec<usize> = data.test.iter().map(|e| e.label).collect();
    let doc = MetricsDocument::new(names, &eval.predictions, &labels, eval.loss)?;
    write_json(
        &dir.join("metrics.json"),
        &json!({ "config": cfg.to_json(), "parameters": accounting(&cfg.model), "metrics": doc }),
    )?;
    let csv = doc.confusion.to_csv(names)?;
    let path = dir.join("confusion.csv");
    std::fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    eprintln!(
        "test accuracy {:.4}, loss {:.4}; artifacts in {}",
        doc.accuracy,
        doc.loss,
        dir.display()
    );
    Ok(doc)
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        classes: a.classes,
        fields: a.fields,
        rows_per_class: a.rows_per_class,
        noise: a.noise,
        seed: a.seed,
        values_per_field: a.values_per_field,
    };
    let data = generate_synthetic(&spec).map_err(CliError::usage)?;
    let csv = data.to_csv();
    std::fs::write(&a.out, &csv).map_err(|e| io_err(&a.out, e))?;
    let sha: String = Sha256::digest(&csv)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let manifest = json!({
        "spec": spec,
        "file": a.out.file_name().map(|f| f.to_string_lossy()),
        "sha256": sha,
        "rows": data.rows.len(),
        "columns": data.header,
        "class_names": data.class_names,
        "signatures": data.signatures,
    });
    write_json(&a.out.with_extension("manifest.json"), &manifest)?;
    eprintln!("wrote {} rows to {}", data.rows.len(), a.out.display());
    Ok(())
}

pub fn tokenizer(a: &TokenizerArgs) -> Result<(), CliError> {
    let mut cfg = a.common.resolve()?;
    if let Some(v) = a.vocab {
        cfg.model.vocab_size = v;
    }
    let vocab = cfg.model.vocab_size;
    if vocab < FIRST_MERGE_ID as usize {
        return Err(CliError::Usage(format!(
            "vocabulary size {vocab} is below the {FIRST_MERGE_ID} special and byte ids"
        )));
    }
    let (records, _) = load_records(&cfg)?;
    let split =
        split_train_test(records, cfg.data.train_fraction, cfg.seed).map_err(CliError::usage)?;
    let corpus: Vec<String> = split.train.iter().map(hash_encode).collect();
    let tok = TokenizerModel::train(&corpus, vocab)?;
    tok.save(&a.out)?;
    eprintln!(
        "tokenizer: {} ids ({} merges) from {} training rows -> {}",
        tok.vocab_size(),
        tok.merges().len(),
        corpus.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    train_loss: f64,
    train_accuracy: f64,
    test_loss: f64,
    test_accuracy: f64,
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = a.common.resolve()?;
    a.model.apply(&mut cfg);
    if let Some(e) = a.epochs {
        cfg.training.epochs = e;
    }
    cfg.validate_training()?;
    let dir = out_dir(&cfg)?;
    let data = prepare_data(&mut cfg)?;
    write_manifest(&dir, &cfg, &data, json!({}))?;
    data.tokenizer.save(dir.join("tokenizer.bbpe"))?;

    let mut weights = ModelWeights::<f32>::init(&cfg.model, cfg.seed)?;
    let mut log = JsonLines::create(dir.join("epochs.jsonl"))?;
    if cfg.training.epochs > 0 {
        let tc = TrainConfig {
            optimizer: cfg.training.optimizer(),
            batch_size: cfg.training.batch_size,
            epochs: cfg.training.epochs,
            seed: cfg.seed,
        };
        let mut opt = new_optimizer(&weights, &tc.optimizer);
        let labels: Vec<usize> = data.test.iter().map(|e| e.label).collect();
        let mut t = Instant::now();
        let mut line_err = None;
        train_centralized(&mut weights, &mut opt, &data.train, &tc, |e, stats, w| {
            let eval = evaluate(w, &data.test)?;
            let line = EpochLine {
                epoch: e + 1,
                train_loss: stats.loss,
                train_accuracy: stats.accuracy,
                test_loss: eval.loss,
                test_accuracy: accuracy(&eval.predictions, &labels)?,
            };
            eprintln!(
                "epoch {}: train loss {:.4} acc {:.4} | test loss {:.4} acc {:.4} ({:.1}s)",
                line.epoch,
                line.train_loss,
                line.train_accuracy,
                line.test_loss,
                line.test_accuracy,
                t.elapsed().as_secs_f64()
            );
            t = Instant::now();
            if let Err(err) = log.push(&line) {
                line_err = Some(err);
            }
            Ok(())
        })?;
        if let Some(err) = line_err {
            return Err(err);
        }
    }
    finish(&dir, &cfg, &data, &weights)?;
    Ok(())
}

pub fn fed(a: &FedArgs) -> Result<(), CliError> {
    let mut cfg = a.common.resolve()?;
    a.model.apply(&mut cfg);
    let f = &mut cfg.federated;
    if let Some(k) = a.clients {
        f.clients = k;
    }
    if let Some(alpha) = a.alpha {
        f.alpha = alpha;
        f.iid = false;
    }
    if a.iid {
        f.iid = true;
    }
    if let Some(r) = a.rounds {
        f.rounds = r;
    }
    if let Some(e) = a.local_epochs {
        f.local_epochs = e;
    }
    if a.workers.is_some() {
        f.workers = a.workers;
    }
    cfg.validate_federated()?;
    let dir = out_dir(&cfg)?;
    let data = prepare_data(&mut cfg)?;
    let f = &cfg.federated;
    if f.clients > data.train.len() {
        return Err(CliError::Usage(format!(
            "{} clients but only {} training examples",
            f.clients,
            data.train.len()
        )));
    }
    let labels: Vec<usize> = data.train.iter().map(|e| e.label).collect();
    let plan = if f.iid {
        split_iid(labels.len(), f.clients, cfg.seed)?
    } else {
        split_dirichlet(&labels, f.clients, f.alpha, cfg.seed)?
    };
    plan.save(dir.join("partition.json"))?;
    let stats = partition_stats(&plan, &labels, cfg.model.num_classes)?;
    write_manifest(&dir, &cfg, &data, json!({ "partition": stats }))?;
    data.tokenizer.save(dir.join("tokenizer.bbpe"))?;

    let rc = RoundConfig {
        rounds: f.rounds,
        local_epochs: f.local_epochs,
        batch_size: cfg.training.batch_size,
        optimizer: cfg.training.optimizer(),
        seed: cfg.seed,
        workers: f.workers,
    };
    let initial = ModelWeights::<f32>::init(&cfg.model, cfg.seed)?;
    let mut log = JsonLines::create(dir.join("rounds.jsonl"))?;
    let result = run_simulation(initial, &data.train, &data.test, &plan, &rc, |r| {
        eprintln!(
            "round {}: global accuracy {:.4} ({:.1}s)",
            r.round, r.acc_global, r.seconds
        );
        log.push(r).map_err(|e| match e {
            CliError::Runtime(e) => e,
            CliError::Usage(m) => fedids::Error::InvalidArgument(m),
        })
    })?;
    finish(&dir, &cfg, &data, &result.weights)?;
    Ok(())
}

/// The experiment config a checkpoint was trained with, or the defaults.
fn checkpoint_config(ckpt: &Checkpoint) -> ExperimentConfig {
    serde_json::from_value(ckpt.metadata.clone()).unwrap_or_default()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    require_file(path, "model file")?;
    Ok(Checkpoint::load(path)?)
}

/// Labeled examples from `path`, restricted to the checkpoint's test split
/// unless `all_rows`.
fn eval_examples(
    ckpt: &Checkpoint,
    path: &Path,
    all_rows: bool,
) -> Result<Vec<LabeledExample>, CliError> {
    require_file(path, "data file")?;
    let cfg = checkpoint_config(ckpt);
    let tok = ckpt
        .tokenizer
        .as_ref()
        .ok_or_else(|| CliError::Usage("checkpoint carries no tokenizer".into()))?;
    let records = load_csv(path, &load_options(&cfg))?.records;
    let records = if all_rows {
        records
    } else {
        split_train_test(records, cfg.data.train_fraction, cfg.seed)?.test
    };
    Ok(build_examples(
        &records,
        tok,
        &ckpt.class_names,
        ckpt.config.seq_len,
    )?)
}

fn accuracy_of(weights: &ModelWeights, examples: &[LabeledExample]) -> Result<f64, CliError> {
    let eval = evaluate(weights, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    Ok(accuracy(&eval.predictions, &labels)?)
}

pub fn quantize(a: &QuantizeArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.model)?;
    let policy = QuantPolicy::parse(&a.policy).map_err(CliError::usage)?;
    policy.targets(&ckpt).map_err(CliError::usage)?;
    let (quantized, mut report) = quantize_model(&ckpt, &policy)?;
    if let Some(path) = &a.eval {
        let examples = eval_examples(&ckpt, path, a.all_rows)?;
        let before = accuracy_of(&ckpt.to_weights()?, &examples)?;
        let after = accuracy_of(&quantized.to_weights()?, &examples)?;
        report = report.with_accuracy(before, after);
    }
    quantized.save(&a.out)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| a.out.with_extension("report.json"));
    write_json(&report_path, &report)?;
    print_json(&report)?;
    eprintln!(
        "{} -> {} bytes ({:.2}% smaller; quantized matrices {:.2}% smaller)",
        report.file_bytes_before,
        report.file_bytes_after,
        report.size_reduction_percent,
        report.quantized_reduction_percent
    );
    Ok(())
}

/// A full-length input for latency measurements when no data is given.
fn dummy_example(cfg: &ModelConfig) -> LabeledExample {
    let span = cfg.vocab_size as u32 - FIRST_MERGE_ID.min(cfg.vocab_size as u32 - 1);
    let mut ids = vec![CLS];
    ids.extend((1..cfg.seq_len).map(|i| cfg.vocab_size as u32 - 1 - (i as u32 % span)));
    LabeledExample {
        attention_mask: vec![1; ids.len()],
        token_ids: ids,
        label: 0,
    }
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.model)?;
    if a.time && a.reps < fedids::metrics::MIN_REPETITIONS {
        return Err(CliError::Usage(format!(
            "--reps must be at least {}",
            fedids::metrics::MIN_REPETITIONS
        )));
    }
    let weights = ckpt.to_weights()?;
    let params = accounting(&ckpt.config);
    eprintln!(
        "parameters: this model {}, base hyperparameters {} (computed), published figure {}",
        params.model, params.base_config, params.published
    );
    let mut doc = json!({
        "model": a.model,
        "config": ckpt.metadata,
        "parameters": params,
    });
    let mut examples = Vec::new();
    if let Some(path) = &a.data {
        examples = eval_examples(&ckpt, path, a.all_rows)?;
        let eval = evaluate(&weights, &examples)?;
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        let metrics =
            MetricsDocument::new(&ckpt.class_names, &eval.predictions, &labels, eval.loss)?;
        eprintln!(
            "accuracy {:.4} over {} examples",
            metrics.accuracy,
            labels.len()
        );
        if let Some(p) = &a.confusion {
            let csv = metrics.confusion.to_csv(&ckpt.class_names)?;
            std::fs::write(p, csv).map_err(|e| io_err(p, e))?;
        }
        doc["metrics"] = serde_json::to_value(metrics).map_err(fedids::Error::from)?;
    }
    if a.time {
        let example = examples
            .first()
            .cloned()
            .unwrap_or_else(|| dummy_example(&ckpt.config));
        let timing = time_inference(&weights, &example, a.reps, a.warmup)?;
        eprintln!(
            "latency: median {:.3} ms, p95 {:.3} ms on {}",
            timing.median_seconds * 1e3,
            timing.p95_seconds * 1e3,
            timing.hardware
        );
        doc["timing"] = serde_json::to_value(timing).map_err(fedids::Error::from)?;
    }
    if let Some(p) = &a.out {
        write_json(p, &doc)?;
    }
    print_json(&doc)
}
