//! `meshcontact`: data generation, training, evaluation, inference and ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meshcontact_core::ablate::run_ablation;
use meshcontact_core::metrics::evaluate;
use meshcontact_core::scenes::{generate_dataset, read_dataset, write_dataset};
use meshcontact_core::train::{train, Checkpoint};
use meshcontact_core::{Error, MeshTemplate, Model, Result, RunConfig, Sample};

#[derive(Parser)]
#[command(name = "meshcontact", version, about = "Per-vertex body contact prediction on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        count: usize,
        /// Defaults to `scene.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write its best checkpoint and loss history.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Validation set; defaults to the last fifth of `--data`.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `train.threshold` of the checkpoint's configuration.
        #[arg(long)]
        threshold: Option<f64>,
        /// Directory for `metrics.txt` and `metrics.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predict contacts and a mesh for one sample file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train and evaluate every path count, with and without routing.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Path counts, e.g. `1,2,3,4` or `1..4`.
        #[arg(long, default_value = "1..4", value_parser = parse_paths)]
        paths: PathList,
        /// Number of training seeds, `0..k`.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

#[derive(Args, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(e) = self.epochs {
            cfg.train.max_epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(n) = self.n_paths {
            cfg.simu.n_paths = n;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        cfg.validate()
    }
}

#[derive(Clone)]
struct PathList(Vec<usize>);

fn parse_paths(s: &str) -> std::result::Result<PathList, String> {
    let bad = || format!("expected a list like `1,2,4` or a range like `1..4`, got `{s}`");
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return if a <= b { Ok(PathList((a..=b).collect())) } else { Err(bad()) };
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<std::result::Result<_, _>>().map(PathList)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Training and validation sets; without `val`, the last ⌈n/5⌉ samples are held out.
fn split(cfg: &RunConfig, data: &Path, val: Option<&Path>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut train_set = read_dataset(data, cfg, true)?;
    let val_set = match val {
        Some(v) => read_dataset(v, cfg, true)?,
        None => {
            let hold = train_set.len().div_ceil(5);
            if hold == 0 || hold >= train_set.len() {
                return Err(Error::Load(format!("{}: too few samples to hold out validation", data.display())));
            }
            train_set.split_off(train_set.len() - hold)
        }
    };
    Ok((train_set, val_set))
}

fn gen_data(config: Option<&Path>, out: &Path, count: usize, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    if count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let seed = seed.unwrap_or(cfg.scene.seed);
    let template = MeshTemplate::build(&cfg.mesh)?;
    let samples = generate_dataset(&cfg, &template, seed, count)?;
    write_dataset(out, &samples, &cfg, seed)?;
    let prevalence = samples.iter().map(|s| s.contacts.sum()).sum::<f64>() / (count * cfg.mesh.v_full) as f64;
    println!("dataset      {}", out.display());
    println!("samples      {count}");
    println!("seed         {seed}");
    println!("config_hash  {}", cfg.data_hash());
    println!("prevalence   {:.2}%", 100.0 * prevalence);
    Ok(())
}

fn train_cmd(config: Option<&Path>, data: &Path, val: Option<&Path>, out: &Path, overrides: &TrainOverrides) -> Result<()> {
    let mut cfg = load_config(config)?;
    overrides.apply(&mut cfg)?;
    let (train_set, val_set) = split(&cfg, data, val)?;
    let model = Model::new(cfg.clone())?;
    create_dir(out)?;
    println!("config_hash {}", cfg.hash());
    println!("training on {} samples, validating on {}", train_set.len(), val_set.len());
    let outcome = train(&model, &train_set, &val_set, None, |r| {
        println!(
            "epoch {:>3}  lr {:.2e}  L_all {:.5}  val {:.5}",
            r.epoch, r.lr, r.train_total, r.val_total
        );
    })?;
    outcome.best.save(&out.join("model.ckpt"))?;
    let csv = format!("# config_hash={}\n{}", cfg.hash(), outcome.history.to_csv());
    write(&out.join("history.csv"), csv)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    println!(
        "best epoch {} of {}{}; checkpoint {}",
        outcome.best.epoch,
        outcome.history.records.len(),
        if outcome.stopped_early { " (early stop)" } else { "" },
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn eval_cmd(checkpoint: &Path, data: &Path, threshold: Option<f64>, report: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let tau = threshold.unwrap_or(ckpt.config.train.threshold);
    let samples = read_dataset(data, &ckpt.config, true)?;
    let r = evaluate(&model, &ckpt.params, &samples, tau)?;
    println!("{}", r.contact_row());
    println!("{}", r.reconstruction_row());
    if let Some(dir) = report {
        create_dir(dir)?;
        let extra = BTreeMap::from([
            ("config_hash".to_string(), ckpt.config.hash()),
            ("threshold".to_string(), tau.to_string()),
        ]);
        write(&dir.join("metrics.txt"), r.to_text(&extra))?;
        write(&dir.join("metrics.json"), r.to_json())?;
    }
    Ok(())
}

fn infer_cmd(checkpoint: &Path, sample: &Path, out: &Path, threshold: Option<f64>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    let tau = threshold.unwrap_or(ckpt.config.train.threshold);
    let bytes = fs::read(sample).map_err(|e| Error::io(sample, e))?;
    let s = Sample::from_bytes(&bytes, &sample.display().to_string())?;
    let p = model.predict(&ckpt.params, &s.image)?;
    let contacts = p.contact_set(tau);
    let hash = ckpt.config.hash();
    create_dir(out)?;

    let mut obj = format!("# config_hash={hash}\n# contact vertices listed in contacts.txt\n");
    for v in p.vertices.data().chunks(3) {
        let _ = writeln!(obj, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in model.template().faces() {
        let _ = writeln!(obj, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    write(&out.join("mesh.obj"), obj)?;

    let mut list = format!("# config_hash={hash}\n# threshold={tau}\n# 0-based vertex indices\n");
    for v in &contacts {
        let _ = writeln!(list, "{v}");
    }
    write(&out.join("contacts.txt"), list)?;

    let mut probs = format!("# config_hash={hash}\n");
    for (i, q) in p.probs.iter().enumerate() {
        let _ = writeln!(probs, "{i} {q}");
    }
    write(&out.join("probs.txt"), probs)?;
    println!("{} of {} vertices in contact at threshold {tau}", contacts.len(), p.probs.len());
    Ok(())
}

fn ablate_cmd(
    config: Option<&Path>,
    data: &Path,
    val: Option<&Path>,
    paths: &[usize],
    seeds: u64,
    report: &Path,
    overrides: &TrainOverrides,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    overrides.apply(&mut cfg)?;
    let (train_set, val_set) = split(&cfg, data, val)?;
    let seeds: Vec<u64> = (0..seeds).collect();
    let grid = run_ablation(&cfg, &train_set, &val_set, paths, &seeds, |v, seed, out| {
        println!(
            "N={} tarm={:?} seed={seed}: best epoch {} val {:.5}",
            v.n_paths,
            v.tarm,
            out.best.epoch,
            out.history.best().map_or(f64::NAN, |r| r.val_total)
        );
    })?;
    create_dir(report)?;
    let text = grid.to_text();
    write(&report.join("grid.txt"), &text)?;
    write(&report.join("grid.json"), grid.to_json())?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, count, seed } => gen_data(config.as_deref(), &out, count, seed),
        Command::Train {
            config,
            data,
            val,
            out,
            overrides,
        } => train_cmd(config.as_deref(), &data, val.as_deref(), &out, &overrides),
        Command::Eval {
            checkpoint,
            data,
            threshold,
            report,
        } => eval_cmd(&checkpoint, &data, threshold, report.as_deref()),
        Command::Infer {
            checkpoint,
            sample,
            out,
            threshold,
        } => infer_cmd(&checkpoint, &sample, &out, threshold),
        Command::Ablate {
            config,
            data,
            val,
            paths,
            seeds,
            report,
            overrides,
        } => ablate_cmd(config.as_deref(), &data, val.as_deref(), &paths.0, seeds, &report, &overrides),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::parse_paths;

    #[test]
    fn path_lists_and_ranges() {
        assert_eq!(parse_paths("1..4").unwrap().0, vec![1, 2, 3, 4]);
        assert_eq!(parse_paths("1, 4").unwrap().0, vec![1, 4]);
        assert!(parse_paths("4..1").is_err());
        assert!(parse_paths("x").is_err());
    }
}
