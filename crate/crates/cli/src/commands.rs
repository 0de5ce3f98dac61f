use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use uatriage::dataset::{self, DiskDataset};
use uatriage::format::sig6;
use uatriage::mc::{self, PredictiveSummary};
use uatriage::synthgen::{self, SynthSpec};
use uatriage::trainer::{self, TrainConfig};
use uatriage::triage::{self, Decision, Grouping, ThresholdTable};
use uatriage::{
    build_reference_model, deep_taylor, network, pgm, Error, Execution, ForwardMode, ModelConfig, Result, Tensor,
    WeightSet,
};

use crate::args::*;
use crate::output::{commit_dir, manifest_path_for, Manifest, Staged, MANIFEST_FILE};

pub fn run(command: &Command, exec: Execution) -> Result<()> {
    match command {
        Command::Synth(a) => synth(command, a, exec),
        Command::Train(a) => train(command, a, exec),
        Command::Predict(a) => predict(a),
        Command::McPredict(a) => mc_predict(command, a, exec),
        Command::Explain(a) => explain(command, a),
        Command::Calibrate(a) => calibrate(command, a, exec),
        Command::Triage(a) => triage_cmd(command, a, exec),
        Command::Curve(a) => curve(command, a, exec),
        Command::Rerun(a) => rerun(a, exec),
    }
}

fn rerun(args: &RerunArgs, exec: Execution) -> Result<()> {
    let manifest = Manifest::read(&args.manifest).map_err(at(&args.manifest))?;
    if manifest.version != env!("CARGO_PKG_VERSION") {
        log::warn!(
            "manifest written by version {}, running {}",
            manifest.version,
            env!("CARGO_PKG_VERSION")
        );
    }
    run(&manifest.params, exec)
}

/// Stages a manifest next to single-file outputs and commits everything.
fn commit_files(command: &Command, seed: Option<u64>, inputs: Vec<PathBuf>, mut staged: Staged) -> Result<()> {
    let outputs = staged.paths();
    let manifest = Manifest::new(command, seed, inputs, outputs.clone());
    staged.add(manifest_path_for(&outputs[0]), manifest.to_bytes()?);
    staged.commit()
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Prefixes I/O errors with the path they concern.
fn at(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn load_model(path: &Path) -> Result<(ModelConfig, WeightSet)> {
    network::load_weights(path).map_err(at(path))
}

fn load_image(config: &ModelConfig, path: &Path) -> Result<Tensor> {
    let image = pgm::read(path).map_err(at(path))?;
    check_shape(config, &image, path)?;
    Ok(image)
}

fn check_shape(config: &ModelConfig, image: &Tensor, path: &Path) -> Result<()> {
    if image.shape() != config.input_shape() {
        return Err(Error::Shape(format!(
            "{} is {:?}, model expects {:?}",
            path.display(),
            image.shape(),
            config.input_shape()
        )));
    }
    Ok(())
}

fn load_data(config: &ModelConfig, dir: &Path) -> Result<DiskDataset> {
    let data = dataset::read_dataset(dir).map_err(at(dir))?;
    if data.data.class_names != config.class_names() {
        return Err(Error::Config(format!(
            "dataset classes {:?} differ from model classes {:?}",
            data.data.class_names,
            config.class_names()
        )));
    }
    check_shape(config, &data.data.images[0], dir)?;
    Ok(data)
}

fn synth(command: &Command, a: &SynthArgs, exec: Execution) -> Result<()> {
    let spec = SynthSpec {
        image_size: a.size,
        class_counts: a.counts,
        noise_sigma: a.sigma,
        ambiguous_fraction: a.ambiguous,
        seed: a.seed,
    };
    let d = synthgen::generate_dataset_with(&spec, exec)?;
    commit_dir(&a.out, |tmp| {
        dataset::write_dataset(tmp.join("train"), &d.train, Some(&d.train_ambiguous))?;
        dataset::write_dataset(tmp.join("test"), &d.test, Some(&d.test_ambiguous))?;
        let outputs = vec![a.out.join("train"), a.out.join("test")];
        let manifest = Manifest::new(command, Some(a.seed), Vec::new(), outputs);
        fs::write(tmp.join(MANIFEST_FILE), manifest.to_bytes()?)?;
        Ok(())
    })?;
    println!(
        "train\t{}\ntest\t{}\nambiguous\t{}",
        d.train.len(),
        d.test.len(),
        d.train_ambiguous.iter().chain(&d.test_ambiguous).filter(|&&f| f).count()
    );
    Ok(())
}

fn train(command: &Command, a: &TrainArgs, exec: Execution) -> Result<()> {
    let disk = dataset::read_dataset(&a.data).map_err(at(&a.data))?;
    let shape = disk.data.images[0].shape();
    let config = build_reference_model([shape[0], shape[1], shape[2]], disk.data.class_names.clone())?;
    let tc = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        momentum: a.momentum,
        batch_size: a.batch_size,
        seed: a.seed,
        augmentation_limit: a.augment,
        horizontal_flip: !a.no_flip,
        validation_fraction: a.val_fraction,
    };
    let (weights, history) = trainer::train_with(&config, &disk.data, &tc, exec)?;
    let history_path = a.history.clone().unwrap_or_else(|| a.out.with_extension("history.csv"));

    let mut staged = Staged::default();
    staged.add(&a.out, network::write_weights(&config, &weights)?);
    staged.add(&history_path, to_bytes(|b| history.write_csv(b))?);
    commit_files(command, Some(a.seed), vec![a.data.clone()], staged)?;
    if let Some(last) = history.epochs.last() {
        println!("epochs\t{}\nloss\t{}\ntrain_acc\t{}", last.epoch, sig6(last.loss), sig6(last.train_accuracy));
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let (config, weights) = load_model(&a.model)?;
    let image = load_image(&config, &a.image)?;
    let probs = network::predict(&config, &weights, &image, ForwardMode::Deterministic)?;
    let mut out = String::from("class,probability\n");
    for (name, &p) in config.class_names().iter().zip(probs.data()) {
        writeln!(out, "{name},{}", sig6(p as f64)).unwrap();
    }
    writeln!(out, "predicted,{}", config.class_names()[probs.argmax()]).unwrap();
    print!("{out}");
    Ok(())
}

fn summary_text(names: &[String], s: &PredictiveSummary) -> String {
    let mut out = String::from("class,median,p10,p90\n");
    for (i, name) in names.iter().enumerate() {
        writeln!(out, "{name},{},{},{}", sig6(s.median[i]), sig6(s.p10[i]), sig6(s.p90[i])).unwrap();
    }
    writeln!(out, "predicted,{},{}", names[s.predicted_class], sig6(s.confidence)).unwrap();
    out
}

fn mc_predict(command: &Command, a: &McPredictArgs, exec: Execution) -> Result<()> {
    let (config, weights) = load_model(&a.model)?;
    let image = load_image(&config, &a.image)?;
    let sample = mc::mc_predict_with(&config, &weights, &image, a.passes, a.seed, exec)?;
    let names = config.class_names();

    let mut staged = Staged::default();
    staged.add(&a.out, to_bytes(|b| sample.write_csv(names, b))?);
    if let Some(hist) = &a.hist {
        let h = mc::histogram(&sample, a.bins)?;
        staged.add(hist, to_bytes(|b| h.write_csv(names, b))?);
    }
    commit_files(command, Some(a.seed), vec![a.model.clone(), a.image.clone()], staged)?;
    print!("{}", summary_text(names, &mc::summarize(&sample)));
    Ok(())
}

fn parse_class(config: &ModelConfig, class: &str) -> Result<usize> {
    if let Some(i) = config.class_names().iter().position(|n| n == class) {
        return Ok(i);
    }
    match class.parse::<usize>() {
        Ok(i) if i < config.num_classes() => Ok(i),
        _ => Err(Error::InvalidArgument(format!(
            "unknown class `{class}`; expected one of {:?} or an index below {}",
            config.class_names(),
            config.num_classes()
        ))),
    }
}

fn explain(command: &Command, a: &ExplainArgs) -> Result<()> {
    let (config, weights) = load_model(&a.model)?;
    let image = load_image(&config, &a.image)?;
    let target = a.class.as_deref().map(|c| parse_class(&config, c)).transpose()?;
    let map = deep_taylor::relevance(&config, &weights, &image, target)?;

    let mut staged = Staged::default();
    staged.add(&a.out, pgm::encode(&deep_taylor::normalize_map(&map))?);
    if let Some(raw) = &a.raw {
        staged.add(raw, to_bytes(|b| map.write_csv(b))?);
    }
    commit_files(command, None, vec![a.model.clone(), a.image.clone()], staged)?;
    println!(
        "class\t{}\noutput_relevance\t{}\ntotal_relevance\t{}",
        config.class_names()[map.target_class],
        sig6(map.output_relevance),
        sig6(map.total())
    );
    Ok(())
}

fn summaries(
    config: &ModelConfig,
    weights: &WeightSet,
    data: &DiskDataset,
    passes: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<PredictiveSummary>> {
    mc::summarize_dataset(config, weights, &data.data.images, passes, seed, exec)
}

fn calibrate(command: &Command, a: &CalibrateArgs, exec: Execution) -> Result<()> {
    let (config, weights) = load_model(&a.model)?;
    let data = load_data(&config, &a.data)?;
    let s = summaries(&config, &weights, &data, a.passes, a.seed, exec)?;
    let grouping = match a.grouping {
        GroupingArg::Predicted => Grouping::Predicted,
        GroupingArg::True => Grouping::True,
    };
    let table = triage::calibrate_thresholds(&s, &data.data.labels, config.class_names(), a.percentile, grouping)?;
    let bytes = to_bytes(|b| table.write(b))?;

    let mut staged = Staged::default();
    staged.add(&a.out, bytes.clone());
    commit_files(command, Some(a.seed), vec![a.model.clone(), a.data.clone()], staged)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn triage_cmd(command: &Command, a: &TriageArgs, exec: Execution) -> Result<()> {
    let (config, weights) = load_model(&a.model)?;
    let table = File::open(&a.thresholds)
        .map_err(Error::from)
        .and_then(|f| ThresholdTable::read(BufReader::new(f)))
        .map_err(at(&a.thresholds))?;
    if table.class_names() != config.class_names() {
        return Err(Error::Config(format!(
            "threshold classes {:?} differ from model classes {:?}",
            table.class_names(),
            config.class_names()
        )));
    }
    let data = load_data(&config, &a.data)?;
    let s = summaries(&config, &weights, &data, a.passes, a.seed, exec)?;
    let report = triage::evaluate_with_referral(&s, &data.data.labels, &table)?;
    let names = config.class_names();

    let mut decisions = String::from("file,true_class,predicted_class,confidence,threshold,decision\n");
    for ((file, &label), o) in data.files.iter().zip(&data.data.labels).zip(&report.outcomes) {
        let decision = match o.decision {
            Decision::Accept(_) => "accept",
            Decision::Refer => "refer",
        };
        writeln!(
            decisions,
            "{file},{},{},{},{},{decision}",
            names[label],
            names[o.summary.predicted_class],
            sig6(o.summary.confidence),
            sig6(o.threshold_applied)
        )
        .unwrap();
    }
    let report_csv = to_bytes(|b| report.write_csv(b))?;
    commit_dir(&a.out, |tmp| {
        fs::write(tmp.join("report.csv"), &report_csv)?;
        fs::write(tmp.join("decisions.csv"), decisions.as_bytes())?;
        let outputs = vec![a.out.join("report.csv"), a.out.join("decisions.csv")];
        let inputs = vec![a.model.clone(), a.data.clone(), a.thresholds.clone()];
        let manifest = Manifest::new(command, Some(a.seed), inputs, outputs);
        fs::write(tmp.join(MANIFEST_FILE), manifest.to_bytes()?)?;
        Ok(())
    })?;
    println!(
        "accuracy\t{}\nfull_accuracy\t{}\nreferred\t{}/{}",
        sig6(report.accuracy),
        sig6(report.full_accuracy),
        report.referred(),
        report.total()
    );
    Ok(())
}

fn curve(command: &Command, a: &CurveArgs, exec: Execution) -> Result<()> {
    let (config, weights) = load_model(&a.model)?;
    let data = load_data(&config, &a.data)?;
    if a.window == 0 || a.window > data.data.len() {
        return Err(Error::InvalidArgument(format!(
            "window {} must be in 1..={} (number of samples)",
            a.window,
            data.data.len()
        )));
    }
    let s = summaries(&config, &weights, &data, a.passes, a.seed, exec)?;
    let c = triage::removal_curve(&s, &data.data.labels, a.window)?;

    let mut staged = Staged::default();
    staged.add(&a.out, to_bytes(|b| c.write_csv(b))?);
    commit_files(command, Some(a.seed), vec![a.model.clone(), a.data.clone()], staged)?;
    Ok(())
}
