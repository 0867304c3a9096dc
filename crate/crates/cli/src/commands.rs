use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kmn_core::eval::{evaluate, icp_eligible, write_gallery, EvalOptions};
use kmn_core::icp::IcpConfig;
use kmn_core::pipeline::{generate_dataset, read_dataset, train_loop, write_dataset, Dataset, Split};
use kmn_core::regressor::{read_weights, write_weights, NetworkWeights, WeightsMeta};

use crate::config::Config;
use crate::manifest::{Manifest, Status};
use crate::{Common, EvalArgs, GenerateArgs, Mode, RenderArgs, TrainArgs};

pub const OUTPUT_ROOT_VAR: &str = "KMN_OUTPUT_ROOT";

/// Errors the user can fix by changing the invocation; they exit with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    use kmn_core::Error as E;
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(E::Config(_) | E::Schema(_) | E::Task(_) | E::Camera(_) | E::NetworkSpec(_)) = cause.downcast_ref::<E>() {
            return 2;
        }
    }
    1
}

fn load_config(common: &Common) -> Result<Config> {
    let mut c = match &common.config {
        Some(p) => Config::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        c.seed = Some(s);
    }
    Ok(c)
}

fn output_dir(common: &Common, command: &str, task: &str, seed: u64) -> Result<PathBuf> {
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => {
            let root = std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(format!("{command}-{task}-{seed}"))
        }
    };
    if dir.exists() && fs::read_dir(&dir)?.next().is_some() {
        if !common.force {
            return Err(usage(format!("{} already exists; pass --force to overwrite", dir.display())));
        }
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_dataset(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

fn open_weights(path: &Path) -> Result<(NetworkWeights, WeightsMeta)> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_weights(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn save_weights(path: &Path, w: &NetworkWeights, meta: &WeightsMeta) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_weights(&mut out, w, meta)?;
    out.flush()?;
    Ok(())
}

fn run_guarded(mut m: Manifest, body: impl FnOnce(&mut Manifest) -> Result<()>) -> Result<()> {
    match body(&mut m) {
        Ok(()) => m.finish(Status::Complete),
        Err(e) => {
            m.note("error", format!("{e:#}"));
            let _ = m.finish(Status::Failed);
            Err(e)
        }
    }
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(t) = args.task {
        cfg.task = Some(t);
    }
    if let Some(n) = args.n {
        cfg.generate.n_data = n;
    }
    if let Some(s) = args.schema {
        cfg.schema = Some(s.display().to_string());
    }
    let obs = cfg.observer().map_err(|e| usage(format!("{e:#}")))?;
    let seed = cfg.seed();
    let dir = output_dir(&args.common, "generate", obs.task.task.name(), seed)?;
    let m = Manifest::start(&dir, "generate", args.common.config.as_deref(), seed, cfg.to_toml())?;
    run_guarded(m, |m| {
        let ds = generate_dataset(&obs, &cfg.generate())?;
        let path = dir.join("dataset.kmnd");
        save_dataset(&path, &ds)?;
        let digest = ds.digest();
        m.note("digest", &digest);
        m.note("records", ds.records.len());
        m.note("resampled", ds.resampled);
        m.phase("generate", &[("dataset", &path)])?;
        println!(
            "{}: {} records ({} train, {} test), {} redrawn, sha256 {digest}",
            path.display(),
            ds.records.len(),
            ds.count(Split::Train),
            ds.count(Split::Test),
            ds.resampled
        );
        for (e, (lo, hi)) in obs.task.schema.entries().iter().zip(ds.label_ranges(Split::Train)) {
            println!("  {:<16} [{lo:+.4}, {hi:+.4}] {}", e.name, e.unit.as_str());
        }
        Ok(())
    })
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let mut dataset = open_dataset(&args.dataset)?;
    let task = dataset.task.task;
    match &cfg.task {
        Some(t) if t != task.name() => {
            return Err(usage(format!("config task `{t}` does not match the dataset task `{task}`")));
        }
        _ => cfg.task = Some(task.name().to_string()),
    }
    if cfg.seed.is_none() {
        cfg.seed = Some(dataset.seed);
    }
    let t = &mut cfg.train;
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.retrain_epochs = args.retrain_epochs.unwrap_or(t.retrain_epochs);
    t.rounds = args.rounds.unwrap_or(t.rounds);
    t.n_aug = args.n_aug.unwrap_or(t.n_aug);
    if args.mode == Mode::Baseline {
        t.rounds = 0;
    }
    let loop_cfg = cfg.train_loop(task);
    loop_cfg.validate().map_err(|e| usage(e.to_string()))?;
    let mode = match args.mode {
        Mode::Kmn => "kmn",
        Mode::Baseline => "baseline",
    };
    let seed = cfg.seed();
    let dir = output_dir(&args.common, &format!("train-{mode}"), task.name(), seed)?;
    let mut m = Manifest::start(&dir, "train", args.common.config.as_deref(), seed, cfg.to_toml())?;
    m.note("mode", mode);
    m.note("dataset", args.dataset.display());
    m.note("dataset_digest", dataset.digest());
    run_guarded(m, |m| {
        let meta = |rounds: usize, loss: f64| WeightsMeta {
            task: task.name().to_string(),
            mode: mode.to_string(),
            seed,
            epochs: loop_cfg.train.epochs,
            rounds,
            best_val_loss: loss,
        };
        let result = train_loop(&mut dataset, &loop_cfg, &mut |r, w| {
            let path = dir.join(format!("round_{}.kmnw", r.round));
            let mut step = || -> Result<()> {
                save_weights(&path, w, &meta(r.round, r.best_val_loss))?;
                m.phase(&format!("round_{}", r.round), &[(&format!("round_{}", r.round), &path)])
            };
            step().map_err(|e| kmn_core::Error::Io(std::io::Error::other(format!("{e:#}"))))
        })?;
        let last = result.report.rounds.last().expect("at least the initial round");
        let weights = dir.join("weights.kmnw");
        save_weights(&weights, &result.weights, &meta(last.round, last.best_val_loss))?;
        let rounds_csv = dir.join("rounds.csv");
        fs::write(&rounds_csv, result.report.to_csv())?;
        let loss_csv = dir.join("loss.csv");
        fs::write(&loss_csv, result.report.loss_csv())?;
        let mut artifacts = vec![("weights", weights.clone()), ("rounds", rounds_csv), ("loss", loss_csv)];
        if args.mode == Mode::Kmn {
            let first = &result.report.rounds[0];
            let baseline = dir.join("baseline.kmnw");
            save_weights(&baseline, &result.baseline, &WeightsMeta {
                mode: "baseline".into(),
                ..meta(0, first.best_val_loss)
            })?;
            let augmented = dir.join("augmented.kmnd");
            save_dataset(&augmented, &dataset)?;
            artifacts.push(("baseline", baseline));
            artifacts.push(("augmented_dataset", augmented));
        }
        let seq: Vec<String> = result.report.n_pred_sequence().iter().map(ToString::to_string).collect();
        m.note("n_pred_sequence", seq.join(","));
        m.note("stop", format!("{:?}", result.report.stop));
        let refs: Vec<(&str, &Path)> = artifacts.iter().map(|(k, p)| (*k, p.as_path())).collect();
        m.phase("finalize", &refs)?;
        print!("{}", result.report.summary());
        println!("weights: {}", weights.display());
        Ok(())
    })
}

fn check_weights(w: &NetworkWeights, meta: &WeightsMeta, ds: &Dataset, path: &Path) -> Result<()> {
    let obs = ds.observer()?;
    let (nw, nh) = obs.net_size();
    let spec = &w.spec;
    if meta.task != ds.task.task.name()
        || spec.output_dim != obs.task.schema.len()
        || (spec.input_width, spec.input_height) != (nw, nh)
    {
        return Err(usage(format!(
            "{} was trained for task `{}` ({}x{} input, {} outputs); the dataset is `{}` ({nw}x{nh}, {} parameters)",
            path.display(),
            meta.task,
            spec.input_width,
            spec.input_height,
            spec.output_dim,
            ds.task.task,
            obs.task.schema.len()
        )));
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let dataset = open_dataset(&args.dataset)?;
    let (kmn, kmn_meta) = open_weights(&args.weights)?;
    let (baseline, base_meta) = open_weights(&args.baseline)?;
    check_weights(&kmn, &kmn_meta, &dataset, &args.weights)?;
    check_weights(&baseline, &base_meta, &dataset, &args.baseline)?;
    if args.icp && !icp_eligible(&dataset.task.schema) {
        return Err(usage(format!(
            "--icp is only defined for rigid tasks without configuration parameters; `{}` has {} transform ({}) and {} configuration parameters",
            dataset.task.task,
            dataset.task.schema.n_transform(),
            if dataset.task.schema.is_rigid() { "rigid" } else { "includes scale" },
            dataset.task.schema.n_config()
        )));
    }
    cfg.task = Some(dataset.task.task.name().to_string());
    cfg.seed = cfg.seed.or(Some(dataset.seed));
    cfg.eval.n_pred = args.n_pred.unwrap_or(cfg.eval.n_pred);
    cfg.eval.gallery = args.gallery.unwrap_or(cfg.eval.gallery);
    let opts = EvalOptions {
        n_pred: cfg.eval.n_pred,
        max_iter: cfg.eval.max_iter,
        icp: args.icp.then_some(IcpConfig {
            max_iter: cfg.eval.icp_max_iter,
            tol: cfg.eval.icp_tolerance,
        }),
    };
    let seed = cfg.seed();
    let dir = output_dir(&args.common, "eval", dataset.task.task.name(), seed)?;
    let mut m = Manifest::start(&dir, "eval", args.common.config.as_deref(), seed, cfg.to_toml())?;
    m.note("dataset", args.dataset.display());
    m.note("weights", args.weights.display());
    m.note("baseline", args.baseline.display());
    run_guarded(m, |m| {
        let (report, traces) = evaluate(&dataset, &kmn, &baseline, &opts)?;
        let mae = dir.join("mae.csv");
        fs::write(&mae, report.to_csv())?;
        let series = dir.join("series.csv");
        fs::write(&series, report.series_csv())?;
        let md = dir.join("report.md");
        let markdown = report.to_markdown();
        fs::write(&md, &markdown)?;
        m.phase("evaluate", &[("mae", &mae), ("series", &series), ("report", &md)])?;
        let gallery = dir.join("gallery");
        write_gallery(&gallery, &dataset, &report, &traces, cfg.eval.gallery)?;
        m.phase("gallery", &[("gallery", &gallery)])?;
        print!("{markdown}");
        Ok(())
    })
}

pub fn render_samples(args: RenderArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(t) = args.task {
        cfg.task = Some(t);
    }
    if let Some(s) = args.schema {
        cfg.schema = Some(s.display().to_string());
    }
    cfg.generate.n_data = args.count;
    let obs = cfg.observer().map_err(|e| usage(format!("{e:#}")))?;
    let seed = cfg.seed();
    let dir = output_dir(&args.common, "samples", obs.task.task.name(), seed)?;
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let m = Manifest::start(&dir, "render-samples", args.common.config.as_deref(), seed, cfg.to_toml())?;
    run_guarded(m, |m| {
        let ds = generate_dataset(&obs, &cfg.generate())?;
        for (i, r) in ds.records.iter().enumerate() {
            let mut w = BufWriter::new(File::create(images.join(format!("sample_{i:04}.pgm")))?);
            r.depth.write_pgm(&mut w)?;
            w.flush()?;
            let mut label = String::new();
            for (e, v) in obs.task.schema.entries().iter().zip(r.label()) {
                label += &format!("{} {v:.9} {}\n", e.name, e.unit.as_str());
            }
            label += &format!("occupied_fraction {:.6}\n", r.depth.occupied_fraction());
            fs::write(images.join(format!("sample_{i:04}.txt")), label)?;
        }
        m.note("count", ds.records.len());
        m.phase("render", &[("images", &images)])?;
        println!("{} samples in {}", ds.records.len(), images.display());
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_map_to_two() {
        assert_eq!(exit_code(&usage("bad flag")), 2);
        assert_eq!(exit_code(&kmn_core::Error::Config("x".into()).into()), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("disk full")), 1);
        let wrapped = anyhow::Error::from(kmn_core::Error::Diverged { epoch: 1, loss: f64::NAN }).context("training");
        assert_eq!(exit_code(&wrapped), 1);
    }
}
