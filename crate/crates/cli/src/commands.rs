use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use fsq::checkpoint::{load_checkpoint, save_checkpoint};
use fsq::data::{compute_channel_means, load_dataset, load_image, preprocess, shuffle_split, AugmentConfig};
use fsq::model::LayerInfo;
use fsq::train::{evaluate, fit, History, TrainConfig};
use fsq::{Error, Model, ModelConfig};
use serde_json::{json, Value};

use crate::args::{EvalArgs, InspectArgs, PredictArgs, TrainArgs};
use crate::error::{CliError, CliResult};

fn metrics_path(a: &TrainArgs) -> PathBuf {
    a.metrics.clone().unwrap_or_else(|| {
        let mut name = a.out.clone().into_os_string();
        name.push(".metrics.jsonl");
        name.into()
    })
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: a.lr as f32,
        momentum: a.momentum as f32,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        dropout_on: a.dropout,
        val_fraction: a.val_fraction as f32,
        augment: AugmentConfig {
            enabled: a.augment,
            horizontal_flip: a.flip,
            ..AugmentConfig::default()
        },
        deterministic: a.deterministic,
    }
}

/// Names of the top-level config fields whose values differ.
fn config_differences(have: &ModelConfig, want: &ModelConfig) -> CliResult<Vec<String>> {
    let (Value::Object(h), Value::Object(w)) = (serde_json::to_value(have)?, serde_json::to_value(want)?) else {
        unreachable!("configs serialize to objects");
    };
    Ok(w.iter()
        .filter(|(k, v)| h.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint {}, flags {v}", h.get(k).unwrap_or(&Value::Null)))
        .collect())
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let config = train_config(a);
    config.validate()?;
    a.arch.config(2, a.image_size).validate()?;
    let metrics_path = metrics_path(a);
    if metrics_path == a.out || a.resume.as_ref() == Some(&metrics_path) {
        return Err(CliError::Usage(
            "the metrics file must differ from the checkpoint paths".into(),
        ));
    }
    if a.deterministic {
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }

    let resumed = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let dataset = load_dataset(&a.data)?;
    log::info!(
        "loaded {} images in {} classes from {}",
        dataset.len(),
        dataset.num_classes(),
        a.data.display()
    );
    let model_config = a.arch.config(dataset.num_classes(), a.image_size);

    let (mut model, mut history, stored_means) = match resumed {
        Some(ck) => {
            let diffs = config_differences(ck.model.config(), &model_config)?;
            if !diffs.is_empty() {
                return Err(
                    Error::Compat(format!("resume checkpoint does not match flags: {}", diffs.join("; "))).into(),
                );
            }
            if ck.label_names != dataset.label_names {
                return Err(Error::Compat(format!(
                    "resume checkpoint classes {:?} differ from dataset classes {:?}",
                    ck.label_names, dataset.label_names
                ))
                .into());
            }
            (ck.model, ck.history, Some(ck.channel_means))
        }
        None => (Model::build(model_config, a.seed)?, History::new(), None),
    };

    let (train, val) = shuffle_split(&dataset, a.seed, config.val_fraction)?;
    let mut train = train.resized(a.image_size)?;
    let mut val = val.resized(a.image_size)?;
    let means = match stored_means {
        Some(m) => m,
        None => compute_channel_means(&train)?,
    };
    train.channel_means = means;
    val.channel_means = means;
    log::info!(
        "{} training / {} validation samples, {} parameters",
        train.len(),
        val.len(),
        model.parameter_count()
    );

    let file = if a.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    };
    let mut metrics = BufWriter::new(file);
    let header = json!({
        "header": {
            "arch": a.arch.name(),
            "image_size": a.image_size,
            "epochs": a.epochs,
            "lr": a.lr,
            "momentum": a.momentum,
            "batch": a.batch,
            "val_fraction": a.val_fraction,
            "seed": a.seed,
            "augment": a.augment,
            "flip": a.flip,
            "dropout": a.dropout,
            "deterministic": a.deterministic,
            "resumed": a.resume.is_some(),
            "classes": dataset.label_names,
            "train_samples": train.len(),
            "val_samples": val.len(),
            "channel_means": means,
        }
    });
    writeln!(metrics, "{header}")?;
    metrics.flush()?;

    let mut best = history.best_val_accuracy();
    let mut saved = false;
    fit(&mut model, &train, &val, &config, &mut history, |m, model, history| {
        let line = serde_json::to_string(m)?;
        println!("{line}");
        writeln!(metrics, "{line}")?;
        metrics.flush()?;
        if best.is_none_or(|b| m.val_accuracy > b) {
            best = Some(m.val_accuracy);
            save_checkpoint(model, history, means, &train.label_names, &a.out)?;
            saved = true;
            log::info!(
                "epoch {}: val_acc {:.4}, saved {}",
                m.epoch,
                m.val_accuracy,
                a.out.display()
            );
        }
        Ok(())
    })?;
    if !saved {
        log::warn!(
            "validation accuracy never improved on the resumed checkpoint; {} not rewritten",
            a.out.display()
        );
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut ds = load_dataset(&a.data)?;
    let unknown: Vec<&str> = ds
        .label_names
        .iter()
        .filter(|n| !ck.label_names.contains(n))
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Compat(format!(
            "dataset classes not in the checkpoint label map: {}",
            unknown.join(", ")
        ))
        .into());
    }
    let absent: Vec<&str> = ck
        .label_names
        .iter()
        .filter(|n| !ds.label_names.contains(n))
        .map(String::as_str)
        .collect();
    if !absent.is_empty() {
        log::warn!("no samples for checkpoint classes: {}", absent.join(", "));
    }
    let remap: Vec<usize> = ds
        .label_names
        .iter()
        .map(|n| ck.label_names.iter().position(|c| c == n).expect("checked above"))
        .collect();
    for s in &mut ds.samples {
        s.label = remap[s.label];
    }
    ds.label_names = ck.label_names.clone();
    ds.channel_means = ck.channel_means;

    let confusion = evaluate(&ck.model, &ds)?;
    if let Some(path) = &a.confusion {
        std::fs::write(path, confusion.to_csv(&ck.label_names))?;
    }
    println!(
        "{}",
        json!({ "accuracy": confusion.accuracy(), "n": confusion.total() })
    );
    Ok(())
}

pub fn predict(a: &PredictArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let image = load_image(&a.image)?;
    let size = ck.model.config().input_size;
    let x = preprocess(&image, size, ck.channel_means)?.reshape(&[1, 3, size, size])?;
    let probs = ck.model.predict(&x)?;
    let mut ranked: Vec<(usize, f32)> = probs.row(0).iter().copied().enumerate().collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    ranked.truncate((a.top as usize).min(ranked.len()));
    let out: Vec<Value> = ranked
        .iter()
        .map(|&(i, p)| json!({ "label": ck.label_names[i], "p": p }))
        .collect();
    println!("{}", Value::Array(out));
    Ok(())
}

fn print_table(input: &[usize], layers: &[LayerInfo], total: usize) {
    let shape = |d: &[usize]| d.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
    println!("{:<12} {:<16} {:>14} {:>10}", "layer", "type", "output", "params");
    println!("{:<12} {:<16} {:>14} {:>10}", "input", "", shape(input), 0);
    for l in layers {
        println!(
            "{:<12} {:<16} {:>14} {:>10}",
            l.name,
            l.kind,
            shape(&l.output_shape),
            l.params
        );
    }
    println!("total parameters: {total}");
}

pub fn inspect(a: &InspectArgs) -> CliResult<()> {
    let (config, total, labels) = match &a.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let total = ck.model.parameter_count();
            (ck.model.config().clone(), total, Some(ck.label_names))
        }
        None => {
            let config = a.arch.config(a.classes, a.image_size);
            let total = Model::build(config.clone(), 0)?.parameter_count();
            (config, total, None)
        }
    };
    let layers = config.architecture()?;
    let input = [3, config.input_size, config.input_size];
    if a.json {
        let mut out = json!({
            "variant": config.variant,
            "input_shape": input,
            "layers": layers,
            "total_params": total,
        });
        if let Some(labels) = labels {
            out["labels"] = json!(labels);
        }
        println!("{out}");
    } else {
        if let Some(labels) = labels {
            println!("classes ({}): {}", labels.len(), labels.join(" "));
        }
        print_table(&input, &layers, total);
    }
    Ok(())
}
