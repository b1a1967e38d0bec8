use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use machplan::geometry::dataset::{read_sample, sample_files, DatasetManifest, MANIFEST_FILE};
use machplan::geometry::synth::{build_sample, enumerate_specs};
use machplan::geometry::{GridSpec, StlFlavor};
use machplan::graph::{extract_sequence, parse_cache_text, to_cache_text, ExtractedSample};
use machplan::model::{Checkpoint, Mode, Model};
use machplan::train::harness::{embeddings_csv, to_csv};
use machplan::train::metrics::{format_table, MetricsReport, MetricsRow};
use machplan::train::{
    evaluate, export_embeddings, prepare_inputs, run_ablations, run_experiment, sweep as run_sweep, EpochRecord,
    Experiment, ExperimentConfig, SweepGrid,
};
use machplan::{exec, Error, Result};

use crate::artifacts::{sha256_hex, OutDir};

/// Samples built and serialized per parallel round.
const CHUNK: usize = 64;
const GRAPH_INDEX: &str = "graph_index.txt";
const GRAPH_INDEX_HEADER: &str = "# machplan graph index v1";
pub const SPLIT_FILE: &str = "split.txt";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn gen(grid_path: &Path, seed: u64, out: &Path) -> Result<()> {
    let grid = GridSpec::from_toml(&read_text(grid_path)?)?;
    let specs = enumerate_specs(seed, &grid, true)?;
    let mut dir = OutDir::create(out)?;
    let mut manifest = DatasetManifest::default();
    for chunk in specs.chunks(CHUNK) {
        let built = exec::try_map(chunk, true, |(id, spec)| {
            let s = build_sample(id.clone(), spec.clone(), grid.segments)?;
            sample_files(&s, StlFlavor::Binary)
        })?;
        for (rec, files) in built {
            for (rel, bytes) in files {
                dir.write(&rel, &bytes)?;
            }
            manifest.records.push(rec);
        }
    }
    dir.write(MANIFEST_FILE, manifest.to_text().as_bytes())?;
    dir.write("grid.toml", grid.to_toml().as_bytes())?;
    dir.write("run.toml", format!("command = \"gen\"\nseed = {seed}\nsamples = {}\n", specs.len()).as_bytes())?;
    dir.finish()?;
    println!("generated {} samples into {}", specs.len(), out.display());
    Ok(())
}

pub fn extract(data: &Path, out: &Path) -> Result<()> {
    let manifest_bytes = read_bytes(&data.join(MANIFEST_FILE))?;
    let manifest = DatasetManifest::load(data)?;
    let mut dir = OutDir::create(out)?;
    let mut index = String::from(GRAPH_INDEX_HEADER);
    index.push('\n');
    for chunk in manifest.records.chunks(CHUNK) {
        let texts = exec::try_map(chunk, true, |rec| {
            let sample = read_sample(data, rec)?;
            Ok::<_, Error>(to_cache_text(&extract_sequence(&sample)?))
        })?;
        for (rec, text) in chunk.iter().zip(texts) {
            dir.write(&format!("graphs/{}.graph", rec.id), text.as_bytes())?;
            index.push_str(&rec.id);
            index.push('\n');
        }
    }
    dir.write(GRAPH_INDEX, index.as_bytes())?;
    let run = format!(
        "command = \"extract\"\nsamples = {}\ndataset_manifest_sha256 = \"{}\"\n",
        manifest.records.len(),
        sha256_hex(&manifest_bytes)
    );
    dir.write("run.toml", run.as_bytes())?;
    dir.finish()?;
    println!("extracted {} graph sequences into {}", manifest.records.len(), out.display());
    Ok(())
}

/// Loads every cached sequence listed in the graph index, in index order.
pub fn load_graphs(data: &Path) -> Result<Vec<ExtractedSample>> {
    let index = read_text(&data.join(GRAPH_INDEX))?;
    let ids: Vec<&str> = index
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    exec::try_map(&ids, true, |id| {
        let path = data.join(format!("graphs/{id}.graph"));
        parse_cache_text(&read_text(&path)?).map_err(|e| match e {
            Error::Parse { offset, msg } => Error::Parse {
                offset,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    })
}

fn check_horizon(samples: &[ExtractedSample], t_max: usize) -> Result<()> {
    match samples.iter().find(|s| s.labels.len() > t_max) {
        Some(s) => Err(Error::Config(format!(
            "sample {} has T = {} but the model's t_max is {t_max}",
            s.id,
            s.labels.len()
        ))),
        None => Ok(()),
    }
}

fn checkpoint_bytes(model: &Model, norm: &machplan::graph::NormStats) -> Result<Vec<u8>> {
    Checkpoint {
        config: model.config.clone(),
        params: model.params.clone(),
        norm: Some(norm.clone()),
    }
    .to_bytes()
}

fn report_rows(label: &str, exp: &Experiment) -> Vec<MetricsRow> {
    let mut rows = exp.train_report.rows(label, "train");
    if let Some(t) = &exp.test_report {
        rows.extend(t.rows(label, "test"));
    }
    rows
}

fn split_text(exp: &Experiment) -> String {
    let mut s = String::new();
    for id in &exp.train_ids {
        s.push_str(&format!("train {id}\n"));
    }
    for id in &exp.test_ids {
        s.push_str(&format!("test {id}\n"));
    }
    s
}

fn load_experiment_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_toml(&read_text(path)?)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

pub fn train(data: &Path, config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_experiment_config(config, seed)?;
    let samples = load_graphs(data)?;
    check_horizon(&samples, cfg.model.t_max)?;
    let mut dir = OutDir::create(out)?;
    dir.write("config.toml", cfg.to_toml().as_bytes())?;
    let exp = run_experiment(&samples, &cfg, &mut |rec: &EpochRecord, model, norm| {
        dir.write(&format!("checkpoints/epoch_{:02}.ckpt", rec.epoch), &checkpoint_bytes(model, norm)?)?;
        println!(
            "epoch {:>3}  train loss {:.5}  test loss {}",
            rec.epoch,
            rec.train_loss,
            rec.test_loss.map_or("-".to_string(), |l| format!("{l:.5}"))
        );
        Ok(())
    })?;
    dir.write("final.ckpt", &checkpoint_bytes(&exp.outcome.model, &exp.norm)?)?;
    dir.write("best.ckpt", &checkpoint_bytes(&exp.outcome.best, &exp.norm)?)?;
    dir.write(SPLIT_FILE, split_text(&exp).as_bytes())?;
    dir.write("loss.csv", to_csv(&exp.outcome.curve)?.as_bytes())?;
    dir.write("metrics.csv", to_csv(&report_rows("train", &exp))?.as_bytes())?;
    dir.write("predictions.csv", to_csv(&exp.test_predictions)?.as_bytes())?;
    let mut table = vec![("train".to_string(), &exp.train_report)];
    if let Some(t) = &exp.test_report {
        table.push(("test".to_string(), t));
    }
    let text = format_table(&table);
    dir.write("metrics.txt", text.as_bytes())?;
    dir.finish()?;
    print!("{text}");
    println!("best epoch {} of {}", exp.outcome.best_epoch, cfg.train.epochs);
    Ok(())
}

/// Test ids recorded by the training run that produced `checkpoint`, if its
/// split file sits next to it or one directory up.
fn recorded_test_split(checkpoint: &Path) -> Result<Option<BTreeSet<String>>> {
    let dir = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
    let candidates: Vec<PathBuf> = [Some(dir.clone()), dir.parent().map(Path::to_path_buf)]
        .into_iter()
        .flatten()
        .map(|d| d.join(SPLIT_FILE))
        .collect();
    for path in candidates {
        if path.is_file() {
            let mut test = BTreeSet::new();
            for (n, line) in read_text(&path)?.lines().enumerate() {
                match line.split_once(' ') {
                    Some(("test", id)) => {
                        test.insert(id.to_string());
                    }
                    Some(("train", _)) => {}
                    _ => return Err(Error::Config(format!("{}: malformed line {}", path.display(), n + 1))),
                }
            }
            return Ok(Some(test));
        }
    }
    Ok(None)
}

fn load_model(checkpoint: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = Model {
        config: ckpt.config.clone(),
        params: ckpt.params.clone(),
    };
    Ok((model, ckpt))
}

pub fn eval(checkpoint: &Path, data: &Path, mode: &str, out: Option<&Path>) -> Result<()> {
    let mode = Mode::parse(mode)?;
    let (model, ckpt) = load_model(checkpoint)?;
    let mut samples = load_graphs(data)?;
    let split = recorded_test_split(checkpoint)?;
    if let Some(test) = &split {
        let have: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        if let Some(missing) = test.iter().find(|id| !have.contains(id.as_str())) {
            return Err(Error::Config(format!("test sample {missing} is not in {}", data.display())));
        }
        samples.retain(|s| test.contains(&s.id));
    }
    check_horizon(&samples, model.config.t_max)?;
    let inputs = prepare_inputs(&samples, ckpt.norm.as_ref(), true)?;
    let (report, preds) = evaluate(&model, &inputs, mode, true)?;
    let scope = if split.is_some() { "test" } else { "all" };
    let text = format_table(&[(scope.to_string(), &report)]);
    print!("{text}");
    if let Some(out) = out {
        let mut dir = OutDir::create(out)?;
        let run = format!(
            "command = \"eval\"\nmode = \"{}\"\nscope = \"{scope}\"\nsequences = {}\ncheckpoint_sha256 = \"{}\"\n",
            mode.tag(),
            inputs.len(),
            sha256_hex(&read_bytes(checkpoint)?)
        );
        dir.write("run.toml", run.as_bytes())?;
        dir.write("metrics.csv", to_csv(&report.rows("checkpoint", scope))?.as_bytes())?;
        dir.write("predictions.csv", to_csv(&preds)?.as_bytes())?;
        dir.write("metrics.txt", text.as_bytes())?;
        dir.finish()?;
    }
    Ok(())
}

fn write_runs(dir: &mut OutDir, results: &[(String, Experiment)], stem: &str) -> Result<()> {
    let mut rows = Vec::new();
    let mut table: Vec<(String, &MetricsReport)> = Vec::new();
    for (k, (label, exp)) in results.iter().enumerate() {
        let sub = format!("runs/{k:02}");
        dir.write(&format!("{sub}/config.toml"), exp.config.to_toml().as_bytes())?;
        dir.write(&format!("{sub}/loss.csv"), to_csv(&exp.outcome.curve)?.as_bytes())?;
        rows.extend(report_rows(label, exp));
        table.push((format!("{label} [train]"), &exp.train_report));
        if let Some(t) = &exp.test_report {
            table.push((format!("{label} [test]"), t));
        }
    }
    let index: BTreeMap<String, &str> = results
        .iter()
        .enumerate()
        .map(|(k, (label, _))| (format!("{k:02}"), label.as_str()))
        .collect();
    let index: String = index.iter().map(|(k, l)| format!("{k} {l}\n")).collect();
    dir.write("runs/index.txt", index.as_bytes())?;
    dir.write(&format!("{stem}_metrics.csv"), to_csv(&rows)?.as_bytes())?;
    let text = format_table(&table);
    dir.write(&format!("{stem}.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

pub fn sweep(data: &Path, grid: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut grid = SweepGrid::from_toml(&read_text(grid)?)?;
    if let Some(s) = seed {
        grid.train.seed = s;
    }
    let samples = load_graphs(data)?;
    check_horizon(&samples, grid.model.t_max)?;
    let mut dir = OutDir::create(out)?;
    dir.write("grid.toml", grid.to_toml().as_bytes())?;
    let results = run_sweep(&samples, &grid, &mut |label, exp| {
        let acc = exp.test_report.as_ref().map_or(f64::NAN, |r| r.joint.accuracy);
        println!("finished {label}: test joint accuracy {acc:.3}");
        Ok(())
    })?;
    write_runs(&mut dir, &results, "sweep")?;
    dir.finish()?;
    Ok(())
}

pub fn ablate(data: &Path, config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_experiment_config(config, seed)?;
    let samples = load_graphs(data)?;
    check_horizon(&samples, cfg.model.t_max)?;
    let mut dir = OutDir::create(out)?;
    dir.write("config.toml", cfg.to_toml().as_bytes())?;
    let results = run_ablations(&samples, &cfg, &mut |label, exp| {
        let acc = exp.test_report.as_ref().map_or(f64::NAN, |r| r.main.accuracy);
        println!("finished {label}: test main accuracy {acc:.3}");
        Ok(())
    })?;
    write_runs(&mut dir, &results, "ablation")?;
    dir.finish()?;
    Ok(())
}

pub fn embed(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let (model, ckpt) = load_model(checkpoint)?;
    let samples = load_graphs(data)?;
    check_horizon(&samples, model.config.t_max)?;
    let inputs = prepare_inputs(&samples, ckpt.norm.as_ref(), true)?;
    let rows = export_embeddings(&model, &inputs, true)?;
    let text = embeddings_csv(&rows)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out, &text).map_err(|e| Error::io(out, e))?;
    println!("{}  {}", sha256_hex(text.as_bytes()), out.display());
    Ok(())
}
