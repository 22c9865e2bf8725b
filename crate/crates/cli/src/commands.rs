use std::path::{Path, PathBuf};

use oescn::attention::attention_block;
use oescn::bandgen::{build_combination, BandGenConfig};
use oescn::data::{accuracy_stats, save_dataset, synth_dataset, Dataset};
use oescn::model::Variant;
use oescn::nn::{Checkpoint, Grid};
use oescn::signal::{welch_psd, WelchConfig};
use oescn::training::{
    extract_features, predict_indices, reports_csv, restore_fold, run_ablation, run_cv, FoldOutcome, Hooks,
    RunReport, REPORT_CSV_HEADER,
};
use oescn::{Error, Result};
use serde_json::{json, Map, Value};

use crate::config::{self, put, DataSource, FileConfig, Preset};
use crate::{AttnDumpArgs, DataArgs, EvaluateArgs, ExtractArgs, SynthArgs, TrainArgs};

const TOOL: &str = concat!("oescn ", env!("CARGO_PKG_VERSION"));

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serialises");
    text.push('\n');
    write_text(path, &text)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn manifest(command: &str, resolved: Value, outputs: &[String]) -> Value {
    json!({
        "tool": TOOL,
        "command": command,
        "resolved": resolved,
        "outputs": outputs,
    })
}

fn matrix_csv(g: &Grid) -> String {
    let mut out = String::new();
    for r in 0..g.rows() {
        let row: Vec<String> = g.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn data_source(args: &DataArgs, file: &FileConfig) -> Result<DataSource> {
    Ok(match (&args.data, args.preset) {
        (Some(path), _) => DataSource::File { path: path.clone() },
        (None, preset) => {
            let preset = preset.unwrap_or(Preset::Desk);
            DataSource::Synthetic {
                preset,
                seed: args.data_seed,
                spec: config::synth_spec(preset, file.synth.as_ref(), Map::new())?,
            }
        }
    })
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let file = config::read_config(a.config.as_deref())?;
    let mut flags = Map::new();
    put(&mut flags, "n_classes", a.classes);
    put(&mut flags, "trials_per_class", a.trials_per_class);
    put(&mut flags, "channels", a.channels);
    put(&mut flags, "len", a.samples);
    put(&mut flags, "rate_hz", a.rate);
    put(&mut flags, "noise_sigma", a.noise);
    put(&mut flags, "subject_id", a.subject.clone());
    let spec = config::synth_spec(a.preset, file.synth.as_ref(), flags)?;
    let seed = a.seed.unwrap_or(0);
    let dataset = synth_dataset(&spec, seed)?;
    save_dataset(&dataset, &a.out)?;
    let manifest_path = PathBuf::from(format!("{}.json", a.out.display()));
    let resolved = json!({ "preset": a.preset, "seed": seed, "spec": spec, "dataset": dataset.manifest() });
    write_json(
        &manifest_path,
        &manifest("synth", resolved, &[a.out.display().to_string(), manifest_path.display().to_string()]),
    )?;
    println!(
        "{} trials ({} classes x {}), C = {}, T = {} at {} Hz -> {}",
        dataset.trials.len(),
        spec.n_classes,
        spec.trials_per_class,
        spec.channels,
        spec.len,
        spec.rate_hz,
        a.out.display()
    );
    Ok(())
}

pub fn extract(a: ExtractArgs) -> Result<()> {
    let file = config::read_config(a.config.as_deref())?;
    let source = data_source(&a.data, &file)?;
    let dataset = source.load()?;
    let mut bands = BandGenConfig::default();
    if let Some(m) = &file.model {
        if let Some(b) = m.get("bands") {
            bands = config::layered(&bands, Some(b), Map::new(), "bands")?;
        }
    }
    if let Some(w) = a.window_lengths {
        bands.window_lengths = w;
    }
    if let Some(g) = a.increment {
        bands.increment = g;
    }
    let welch = WelchConfig::default();
    create_dir(&a.out)?;
    let mut grids = Vec::with_capacity(dataset.trials.len());
    let mut layout = None;
    let mut p = 0;
    for (i, t) in dataset.trials.iter().enumerate() {
        let psd = welch_psd(t, &welch)?;
        p = psd.bins();
        let combo = build_combination(&psd, &bands)?;
        grids.push((format!("trial{i}.s"), combo.s));
        layout.get_or_insert(combo.layout);
    }
    let layout = match layout {
        Some(l) => l,
        None => oescn::bandgen::band_counts(welch.bins(dataset.rate_hz).len(), &bands)?,
    };
    if p == 0 {
        p = welch.bins(dataset.rate_hz).len();
    }
    let inner = json!({
        "kind": "oescn-features",
        "psd_bins": p,
        "total_k": layout.total_k,
        "counts": layout.counts,
        "bands": bands,
        "welch": welch,
        "labels": dataset.labels(),
    });
    let pack = Checkpoint {
        manifest: inner.to_string(),
        grids,
        adam: None,
    };
    let features = a.out.join("features.bin");
    let layout_csv = a.out.join("layout.csv");
    pack.save(&features)?;
    write_text(&layout_csv, &layout.to_csv())?;
    let outputs = ["features.bin", "layout.csv", "manifest.json"].map(String::from);
    let resolved = json!({ "data": source, "bands": bands, "welch": welch, "psd_bins": p, "layout": {
        "counts": layout.counts, "offsets": layout.offsets, "total_k": layout.total_k } });
    write_json(&a.out.join("manifest.json"), &manifest("extract", resolved, &outputs))?;
    let counts: Vec<String> = layout.counts.iter().map(|c| c.to_string()).collect();
    println!("P = {p}, K = {}, per-scale B = {}", layout.total_k, counts.join("/"));
    Ok(())
}

struct TrainSetup {
    source: DataSource,
    dataset: Dataset,
    model: oescn::model::ModelConfig,
    train: oescn::training::TrainConfig,
}

fn train_setup(a: &TrainArgs) -> Result<TrainSetup> {
    let file = config::read_config(a.config.as_deref())?;
    let source = data_source(&a.data, &file)?;
    let dataset = source.load()?;
    let mut model_flags = Map::new();
    if let Some(v) = &a.variant {
        put(&mut model_flags, "variant", Some(v.parse::<Variant>()?));
    }
    put(&mut model_flags, "attention_scale", a.attention_scale);
    let model = config::model_config(&dataset, file.model.as_ref(), model_flags)?;
    let defaults = match &source {
        DataSource::Synthetic { preset, .. } => preset.train_defaults(),
        DataSource::File { .. } => Default::default(),
    };
    let mut flags = Map::new();
    put(&mut flags, "epochs", a.epochs);
    put(&mut flags, "batch_size", a.batch_size);
    put(&mut flags, "lr", a.lr);
    put(&mut flags, "seed", a.seed);
    put(&mut flags, "fold_seed", a.fold_seed);
    put(&mut flags, "folds", a.folds);
    put(&mut flags, "report_every", a.report_every);
    if a.no_stratify {
        put(&mut flags, "stratified", Some(false));
    }
    let train = config::train_config(defaults, file.train.as_ref(), flags)?;
    Ok(TrainSetup {
        source,
        dataset,
        model,
        train,
    })
}

fn progress(fold: usize, epoch: usize, loss: f64) {
    eprintln!("fold {fold} epoch {epoch}: loss {loss:.6}");
}

/// Writes `<dir>[/<variant>]/fold{f}.ckpt` and returns the path relative
/// to `dir`.
fn checkpoint_sink<'a>(
    dir: &'a Path,
    per_variant: bool,
    plan: &'a oescn::data::FoldPlan,
    train: &'a oescn::training::TrainConfig,
) -> impl Fn(&FoldOutcome) -> Result<Option<String>> + Sync + 'a {
    move |o: &FoldOutcome| {
        let name = format!("fold{}.ckpt", o.fold);
        let rel = if per_variant { format!("{}/{name}", o.model.variant.name()) } else { name };
        o.checkpoint(plan, train).save(&dir.join(&rel))?;
        Ok(Some(rel))
    }
}

fn write_report(dir: &Path, report: &RunReport, labels: &[usize]) -> Result<Vec<String>> {
    create_dir(dir)?;
    write_text(&dir.join("report.csv"), &report.to_csv())?;
    write_text(&dir.join("loss.csv"), &report.loss_csv())?;
    write_text(&dir.join("folds.csv"), &report.plan.to_csv(labels))?;
    write_json(&dir.join("report.json"), &report.manifest())?;
    let mut out: Vec<String> = ["report.csv", "loss.csv", "folds.csv", "report.json"].map(String::from).into();
    out.extend(report.folds.iter().filter_map(|f| f.checkpoint.clone()));
    Ok(out)
}

fn print_report(report: &RunReport) {
    for f in &report.folds {
        println!("{} fold {}: accuracy {:.4}", report.variant, f.fold, f.accuracy);
    }
    println!("{}: mean {:.4} +/- {:.4}", report.variant, report.mean, report.std);
    eprintln!("{}: {:.1} s", report.variant, report.wall_clock_s);
}

pub fn train(a: TrainArgs) -> Result<()> {
    let s = train_setup(&a)?;
    create_dir(&a.out)?;
    let plan = s.train.fold_plan(&s.dataset)?;
    let sink = checkpoint_sink(&a.out, false, &plan, &s.train);
    let hooks = Hooks {
        on_fold: (!a.no_checkpoints).then_some(&sink as _),
        on_epoch: Some(&progress),
    };
    let report = run_cv(&s.dataset, &s.model, &s.train, hooks)?;
    let mut outputs = write_report(&a.out, &report, &s.dataset.labels())?;
    outputs.push("manifest.json".into());
    let resolved = json!({ "data": s.source, "model": s.model, "train": s.train });
    write_json(&a.out.join("manifest.json"), &manifest("train", resolved, &outputs))?;
    print_report(&report);
    Ok(())
}

pub fn ablate(a: TrainArgs) -> Result<()> {
    let s = train_setup(&a)?;
    create_dir(&a.out)?;
    for v in Variant::ALL {
        create_dir(&a.out.join(v.name()))?;
    }
    let plan = s.train.fold_plan(&s.dataset)?;
    let sink = checkpoint_sink(&a.out, true, &plan, &s.train);
    let hooks = Hooks {
        on_fold: (!a.no_checkpoints).then_some(&sink as _),
        on_epoch: Some(&progress),
    };
    let reports = run_ablation(&s.dataset, &s.model, &s.train, hooks)?;
    let mut outputs = Vec::new();
    for r in &reports {
        let name = r.variant.name();
        let files = write_report(&a.out.join(name), r, &s.dataset.labels())?;
        outputs.extend(files.into_iter().map(|f| if f.contains('/') { f } else { format!("{name}/{f}") }));
        print_report(r);
    }
    write_text(&a.out.join("ablation.csv"), &reports_csv(&reports))?;
    outputs.extend(["ablation.csv".to_string(), "manifest.json".to_string()]);
    let resolved = json!({ "data": s.source, "model": s.model, "train": s.train,
        "variants": Variant::ALL.map(Variant::name) });
    write_json(&a.out.join("manifest.json"), &manifest("ablate", resolved, &outputs))?;
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let source = data_source(&a.data, &FileConfig::default())?;
    let dataset = source.load()?;
    create_dir(&a.out)?;
    let mut rows = String::from(REPORT_CSV_HEADER);
    rows.push('\n');
    let mut preds = String::from("checkpoint,fold,trial,label,predicted\n");
    let mut accs = Vec::new();
    let mut variant = None;
    for path in &a.checkpoint {
        let restored = restore_fold(&Checkpoint::load(path)?)?;
        let m = &restored.manifest;
        if !a.all && m.n_trials != dataset.trials.len() {
            return Err(Error::InvalidData(format!(
                "{} was trained on {} trials, dataset has {}",
                path.display(),
                m.n_trials,
                dataset.trials.len()
            )));
        }
        let idx: Vec<usize> = if a.all { (0..dataset.trials.len()).collect() } else { m.validation.clone() };
        let feats = extract_features(&dataset, &m.model, &WelchConfig::default())?;
        let p = predict_indices(&restored.network, &feats.features, &restored.normalizer, &idx)?;
        let correct = p.iter().zip(&idx).filter(|&(&y, &i)| y == feats.labels[i]).count();
        let acc = correct as f64 / idx.len() as f64;
        accs.push(acc);
        let name = m.model.variant.name();
        variant.get_or_insert(name);
        rows.push_str(&format!("{name},{},{},{},{acc},\n", m.fold, dataset.trials.len() - m.validation.len(), idx.len()));
        for (&i, &y) in idx.iter().zip(&p) {
            preds.push_str(&format!("{},{},{i},{},{y}\n", path.display(), m.fold, feats.labels[i]));
        }
        println!("{} fold {}: accuracy {acc:.4}", path.display(), m.fold);
    }
    let (mean, std) = accuracy_stats(&accs)?;
    let name = variant.unwrap_or("");
    rows.push_str(&format!("{name},mean,,,{mean},\n{name},std,,,{std},\n"));
    write_text(&a.out.join("evaluation.csv"), &rows)?;
    write_text(&a.out.join("predictions.csv"), &preds)?;
    let resolved = json!({ "data": source, "checkpoints": a.checkpoint, "all_trials": a.all });
    let outputs = ["evaluation.csv", "predictions.csv", "manifest.json"].map(String::from);
    write_json(&a.out.join("manifest.json"), &manifest("evaluate", resolved, &outputs))?;
    println!("mean {mean:.4} +/- {std:.4}");
    Ok(())
}

pub fn attn_dump(a: AttnDumpArgs) -> Result<()> {
    let restored = restore_fold(&Checkpoint::load(&a.checkpoint)?)?;
    let cfg = restored.manifest.model.clone();
    let params = restored
        .network
        .params
        .attention
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("checkpoint holds a {} model without attention", cfg.variant)))?;
    let source = data_source(&a.data, &FileConfig::default())?;
    let dataset = source.load()?;
    let trial = match a.trial {
        Some(t) => t,
        None => *restored
            .manifest
            .validation
            .first()
            .ok_or_else(|| Error::InvalidData("checkpoint lists no validation trials".into()))?,
    };
    let t = dataset
        .trials
        .get(trial)
        .ok_or_else(|| Error::InvalidArgument(format!("trial {trial} out of range ({} trials)", dataset.trials.len())))?;
    let combo = build_combination(&welch_psd(t, &WelchConfig::default())?, &cfg.bands)?;
    let s = restored.normalizer.apply(&combo.s);
    let (_, trace) = attention_block(&s, &combo.layout, params, cfg.scale())?;
    let heads = trace.outputs();
    create_dir(&a.out)?;
    let mut outputs = vec!["global.csv".to_string()];
    write_text(&a.out.join("global.csv"), &matrix_csv(&heads.global_weights))?;
    for (i, w) in heads.local_weights.iter().enumerate() {
        let name = format!("local{i}.csv");
        write_text(&a.out.join(&name), &matrix_csv(w))?;
        println!("local head {i}: {}x{}", w.rows(), w.cols());
        outputs.push(name);
    }
    write_text(&a.out.join("layout.csv"), &combo.layout.to_csv())?;
    outputs.extend(["layout.csv".to_string(), "manifest.json".to_string()]);
    let resolved = json!({ "checkpoint": a.checkpoint, "data": source, "trial": trial,
        "label": t.label, "scale": cfg.scale(), "total_k": combo.layout.total_k });
    write_json(&a.out.join("manifest.json"), &manifest("attn-dump", resolved, &outputs))?;
    println!("global head: {0}x{0}", heads.global_weights.rows());
    Ok(())
}
