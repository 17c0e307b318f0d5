use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pcc_core::config::{Config, RESOLVED_CONFIG};
use pcc_core::datagen::{
    ingest, read_dataset, synthesize, validate_dataset, write_dataset, Dataset, IngestSettings, ObjectModel, Split,
};
use pcc_core::decoder::surface_of;
use pcc_core::geometry::io::{read_cloud, write_cloud, write_surface_ids};
use pcc_core::metrics::{evaluate_pair, MetricReport};
use pcc_core::model::{unify, Model};
use pcc_core::training::{
    evaluate_with_oracle, predict_all, run_ablation, write_ablation_csv, write_history_csv, AblationRow, Checkpoint,
    EpochRecord, Trainer,
};
use pcc_core::Frame;

use crate::plot::{line_chart, scatter_views};
use crate::run_dir::DirLock;
use crate::{AblateArgs, Cli, Command, CompleteArgs, DatasetCommand, EvalArgs, Failure, GlobalArgs, IngestArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

type CmdResult = Result<(), Failure>;

pub fn run(cli: Cli) -> CmdResult {
    let g = &cli.global;
    match cli.command {
        Command::Dataset(DatasetCommand::Synth { out }) => dataset_synth(g, out),
        Command::Dataset(DatasetCommand::Ingest(args)) => dataset_ingest(g, args),
        Command::Dataset(DatasetCommand::Validate { dir }) => dataset_validate(g, dir),
        Command::Train(args) => train(g, args),
        Command::Eval(args) => eval(g, args),
        Command::Complete(args) => complete(args),
        Command::Ablate(args) => ablate(g, args),
    }
}

fn load_config(g: &GlobalArgs) -> Result<Config, Failure> {
    Ok(match &g.config {
        Some(path) => Config::load(path, g.profile)?,
        None => Config::parse("", g.profile)?,
    })
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CmdResult {
    std::fs::create_dir_all(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

/// Refuses to mix a new dataset with the contents of an existing directory.
fn require_empty(dir: &Path) -> CmdResult {
    if let Ok(mut entries) = std::fs::read_dir(dir) {
        if entries.next().is_some() {
            return Err(Failure::Input(format!("{} is not empty", dir.display())));
        }
    }
    Ok(())
}

fn load_dataset(root: &Path, points: usize) -> Result<Dataset, Failure> {
    let data = read_dataset(root)?;
    if data.points != points {
        return Err(Failure::Input(format!(
            "{} holds {}-point clouds but the model expects {points}",
            root.display(),
            data.points
        )));
    }
    Ok(data)
}

fn dataset_synth(g: &GlobalArgs, out: Option<PathBuf>) -> CmdResult {
    let config = load_config(g)?;
    let mut spec = config.dataset.synth.clone();
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    let out = out.unwrap_or(config.dataset.root);
    require_empty(&out)?;
    let lock = DirLock::acquire(&out)?;
    let pairs = synthesize(&spec)?;
    write_dataset(&out, spec.points, &pairs)?;
    let text = toml::to_string_pretty(&spec).map_err(|e| Failure::Internal(e.to_string()))?;
    write_text(&out.join("synth.toml"), &text)?;
    drop(lock);
    let report = validate_dataset(&out)?;
    if !report.is_ok() {
        return Err(Failure::Internal(format!("generated dataset failed validation: {:?}", report.problems)));
    }
    println!("wrote {} pairs to {} ({:?})", report.pairs, out.display(), report.per_split);
    Ok(())
}

fn parse_model_arg(arg: &str) -> Result<ObjectModel, Failure> {
    let mut parts = arg.splitn(3, ':');
    let (Some(label), Some(name), Some(path)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(Failure::Input(format!("--model {arg:?}: expected LABEL:NAME:CLOUD_FILE")));
    };
    let label = label
        .parse::<u16>()
        .map_err(|e| Failure::Input(format!("--model {arg:?}: bad label: {e}")))?;
    let cloud = read_cloud(Path::new(path), Frame::Canonical)?;
    Ok(ObjectModel {
        label,
        name: name.to_string(),
        cloud,
    })
}

fn dataset_ingest(g: &GlobalArgs, args: IngestArgs) -> CmdResult {
    let config = load_config(g)?;
    let models = args.models.iter().map(|m| parse_model_arg(m)).collect::<Result<Vec<_>, _>>()?;
    let points = args.points.unwrap_or(config.input_points);
    let settings = IngestSettings::new(args.stride, points);
    let out = ingest(&args.depth, &args.labels, &args.intrinsics, &models, &settings)?;
    if out.pairs.is_empty() {
        return Err(Failure::Input("no object of the given models is visible in the retained frames".into()));
    }
    require_empty(&args.out)?;
    let lock = DirLock::acquire(&args.out)?;
    let pairs: Vec<_> = out.pairs.into_iter().map(|p| p.pair).collect();
    write_dataset(&args.out, points, &pairs)?;
    drop(lock);
    println!(
        "retained {} frames, wrote {} pairs to {} (skipped {} empty masks)",
        out.retained_frames.len(),
        pairs.len(),
        args.out.display(),
        out.skipped_empty
    );
    Ok(())
}

fn dataset_validate(g: &GlobalArgs, dir: Option<PathBuf>) -> CmdResult {
    let dir = match dir {
        Some(d) => d,
        None => load_config(g)?.dataset.root,
    };
    let report = validate_dataset(&dir)?;
    println!("{}: {} pairs {:?}", dir.display(), report.pairs, report.per_split);
    if report.is_ok() {
        println!("ok");
        Ok(())
    } else {
        for p in &report.problems {
            eprintln!("problem: {p}");
        }
        Err(Failure::Input(format!("{} problem(s) found", report.problems.len())))
    }
}

/// Series of one metric over epochs, per split.
fn curves(history: &[EpochRecord], metric: impl Fn(&EpochRecord) -> f64) -> Vec<(String, Vec<(f64, f64)>)> {
    [Split::Train, Split::Val]
        .into_iter()
        .map(|s| {
            let points = history
                .iter()
                .filter(|r| r.split == s)
                .map(|r| (r.epoch as f64, metric(r)))
                .collect();
            (s.as_str().to_string(), points)
        })
        .filter(|(_, p): &(String, Vec<(f64, f64)>)| !p.is_empty())
        .collect()
}

fn write_curves(dir: &Path, history: &[EpochRecord]) -> CmdResult {
    write_text(&dir.join("curve_emd.svg"), &line_chart("EMD", "epoch", "emd", &curves(history, |r| r.emd)))?;
    write_text(&dir.join("curve_cd.svg"), &line_chart("CD", "epoch", "cd", &curves(history, |r| r.cd)))
}

fn train(g: &GlobalArgs, args: TrainArgs) -> CmdResult {
    let mut config = load_config(g)?;
    if let Some(seed) = g.seed {
        config.train.seed = seed;
    }
    if let Some(loss) = args.loss {
        config.train.loss = loss;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(dir) = args.run_dir {
        config.run_dir = dir;
    }
    if let Some(root) = args.data {
        config.dataset.root = root;
    }
    config.validate()?;
    let run_dir = config.run_dir.clone();
    let _lock = DirLock::acquire(&run_dir)?;
    let data = load_dataset(&config.dataset.root, config.input_points)?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);

    let mut trainer = if ckpt_path.exists() {
        if !args.resume {
            return Err(Failure::Input(format!(
                "{} already holds a checkpoint; pass --resume to continue it or choose another run directory",
                run_dir.display()
            )));
        }
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let same_train = pcc_core::training::TrainConfig {
            epochs: ckpt.config.epochs,
            ..config.train.clone()
        } == ckpt.config;
        if ckpt.model.spec != config.model() || !same_train {
            return Err(Failure::Input(format!(
                "configuration differs from the checkpoint in {} (only epochs may change on resume)",
                run_dir.display()
            )));
        }
        let mut t = Trainer::from_checkpoint(ckpt)?;
        t.config.epochs = config.train.epochs;
        log::info!("resuming after epoch {}", t.epoch);
        t
    } else {
        let model = Model::init(config.model(), config.train.init_sigma, config.train.seed)?;
        Trainer::new(model, config.train.clone())?
    };
    config.write(&run_dir.join(RESOLVED_CONFIG))?;

    let history_path = run_dir.join(HISTORY_FILE);
    trainer.run(&data, |t| {
        t.checkpoint().save(&ckpt_path)?;
        write_history_csv(&history_path, &t.history)
    })?;
    // a run that was already complete still gets its outputs refreshed
    trainer.checkpoint().save(&ckpt_path)?;
    write_history_csv(&history_path, &trainer.history)?;
    write_curves(&run_dir, &trainer.history)?;
    if let Some(last) = trainer.history.iter().rev().find(|r| r.split == Split::Val) {
        println!("epoch {}: val cd {} emd {}", last.epoch, last.cd, last.emd);
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn report_csv(report: &MetricReport) -> String {
    let mut text = String::from("row,cd_x1e4,emd_x1e2\n");
    for (row, cd, emd) in report.table_rows() {
        text.push_str(&format!("{row},{cd},{emd}\n"));
    }
    text
}

fn eval(g: &GlobalArgs, args: EvalArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let root = match args.data {
        Some(d) => d,
        None => load_config(g)?.dataset.root,
    };
    let data = load_dataset(&root, ckpt.model.spec.input_points)?;
    let pairs = data.split(args.split);
    if pairs.is_empty() {
        return Err(Failure::Input(format!("split {} of {} is empty", args.split.as_str(), root.display())));
    }
    let _lock = DirLock::acquire(&args.out)?;
    let seed = ckpt.config.eval_seed;
    let report = evaluate_with_oracle(&ckpt.model, pairs, seed)?;
    report.write_json(&args.out.join("report.json"))?;
    write_text(&args.out.join("report.csv"), &report_csv(&report))?;
    write_curves(&args.out, &ckpt.history)?;

    let shown = &pairs[..args.snapshots.min(pairs.len())];
    let predictions = predict_all(&ckpt.model, shown, seed)?;
    let snap_dir = args.out.join("snapshots");
    create_dir(&snap_dir)?;
    for (pair, pred) in shown.iter().zip(&predictions) {
        let name = format!("{}_{:05}", pair.object_name, pair.index);
        let svg = scatter_views(
            &name,
            &[("partial", &pair.partial), ("completed", pred), ("ground truth", &pair.complete)],
        );
        write_text(&snap_dir.join(format!("{name}.svg")), &svg)?;
    }
    println!("{:<16} {:>12} {:>12}", "row", "cd x1e4", "emd x1e2");
    for (row, cd, emd) in report.table_rows() {
        println!("{row:<16} {cd:>12.4} {emd:>12.4}");
    }
    Ok(())
}

fn complete(args: CompleteArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let partial = read_cloud(&args.input, Frame::Canonical)?;
    let (cloud, decoder) = ckpt.model.complete(&partial, args.resolution, ckpt.config.eval_seed)?;
    write_cloud(&args.output, &cloud)?;
    if args.surface_ids {
        let ids = (0..cloud.len())
            .map(|i| surface_of(i, &decoder))
            .collect::<pcc_core::Result<Vec<_>>>()?;
        let mut sidecar = args.output.clone().into_os_string();
        sidecar.push(".surface");
        write_surface_ids(Path::new(&sidecar), &ids)?;
    }
    println!("wrote {} points to {}", cloud.len(), args.output.display());
    if let Some(gt) = &args.ground_truth {
        let truth = unify(&read_cloud(gt, Frame::Canonical)?, cloud.len())?;
        let m = evaluate_pair(&cloud, &truth)?;
        println!("cd {} emd {}", m.cd, m.emd);
    }
    Ok(())
}

/// Mean validation metrics per (encoder, distribution, K) over seeds.
fn ablation_summary(rows: &[AblationRow]) -> BTreeMap<(String, String, usize), (f64, f64, usize)> {
    let mut acc: BTreeMap<(String, String, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        if let Ok(rep) = &r.outcome {
            let key = (r.cell.encoder.to_string(), r.cell.seed_distribution.label(), r.cell.surfaces);
            let e = acc.entry(key).or_default();
            e.0 += rep.cd;
            e.1 += rep.emd;
            e.2 += 1;
        }
    }
    for v in acc.values_mut() {
        v.0 /= v.2 as f64;
        v.1 /= v.2 as f64;
    }
    acc
}

fn ablate(g: &GlobalArgs, args: AblateArgs) -> CmdResult {
    let mut config = load_config(g)?;
    if let Some(seed) = g.seed {
        config.ablation.seeds = vec![seed];
    }
    if let Some(loss) = args.loss {
        config.train.loss = loss;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(root) = args.data {
        config.dataset.root = root;
    }
    config.validate()?;
    let out = args.out.unwrap_or_else(|| config.run_dir.join("ablation"));
    let _lock = DirLock::acquire(&out)?;
    config.write(&out.join(RESOLVED_CONFIG))?;
    let data = load_dataset(&config.dataset.root, config.input_points)?;
    if data.val.is_empty() || data.train.is_empty() {
        return Err(Failure::Input("ablation needs non-empty train and val splits".into()));
    }
    let rows = run_ablation(config.profile, &config.model(), &config.train, &data, &config.ablation)?;
    write_ablation_csv(&out.join("ablation.csv"), &rows)?;

    let summary = ablation_summary(&rows);
    let mut text = String::from("encoder,seed_distribution,surfaces,cells,cd_mean,emd_mean\n");
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for ((enc, dist, k), (cd, emd, n)) in &summary {
        text.push_str(&format!("{enc},{dist},{k},{n},{cd},{emd}\n"));
        series.entry(format!("{enc} {dist}")).or_default().push((*k as f64, *emd));
    }
    write_text(&out.join("summary.csv"), &text)?;
    let series: Vec<(String, Vec<(f64, f64)>)> = series.into_iter().collect();
    write_text(
        &out.join("ablation_emd.svg"),
        &line_chart("validation EMD by surface count", "surfaces K", "emd", &series),
    )?;
    let reports: BTreeMap<String, serde_json::Value> = rows
        .iter()
        .map(|r| {
            let c = &r.cell;
            let key = format!("{}/{}/{}/{}", c.encoder, c.seed_distribution.label(), c.surfaces, c.seed);
            let value = match &r.outcome {
                Ok(rep) => serde_json::to_value(rep).expect("report serializes"),
                Err(e) => serde_json::json!({ "error": e }),
            };
            (key, value)
        })
        .collect();
    write_text(
        &out.join("ablation.json"),
        &(serde_json::to_string_pretty(&reports).expect("json") + "\n"),
    )?;
    print!("{text}");
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        return Err(Failure::Internal(format!("{failed} of {} ablation cells failed", rows.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_argument_grammar() {
        assert!(parse_model_arg("3:box").is_err());
        assert!(parse_model_arg("x:box:/nonexistent.xyz").is_err());
        match parse_model_arg("3:box:/nonexistent.xyz") {
            Err(Failure::Input(m)) => assert!(m.contains("nonexistent.xyz")),
            other => panic!("{other:?}"),
        }
    }
}
