use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fogcount::ablation::run_ablation;
use fogcount::checkpoint::Checkpoint;
use fogcount::config::{ModelConfig, Variant};
use fogcount::fogbench::{synth_benchmark, BenchConfig, FogTier};
use fogcount::gradsuite::{run_suite, DEFAULT_TOL};
use fogcount::io;
use fogcount::model::Model;
use fogcount::train::{evaluate, train, Benchmark, TrainData};

/// Fog-robust crowd counting toolkit.
#[derive(Parser, Debug)]
#[command(name = "fogcount", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Model config file (`key = value` lines).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                if !p.is_file() {
                    bail!("--config: file not found: {}", p.display());
                }
                ModelConfig::load(p)?
            }
            None => ModelConfig::default(),
        };
        for kv in &self.set {
            if !kv.contains('=') {
                bail!("--set: expected KEY=VALUE, got `{kv}`");
            }
            cfg.apply(kv).with_context(|| format!("--set {kv}"))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the synthetic fog benchmark.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        /// Derive β and A from image statistics instead of fixed tiers.
        #[arg(long)]
        adaptive: bool,
    },
    /// Train a model on a benchmark.
    Train {
        #[command(flatten)]
        common: Common,
        /// Benchmark directory or manifest.
        #[arg(long, value_name = "PATH")]
        bench: PathBuf,
    },
    /// Evaluate a checkpoint per fog tier.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        bench: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Restrict to one tier: none, light, moderate or severe.
        #[arg(long)]
        tier: Option<String>,
    },
    /// Predict a density map and count for one image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
    },
    /// Restore one image and write its transmission map.
    Dehaze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
    },
    /// Train and evaluate every variant over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        bench: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Comma-separated variants.
        #[arg(long, value_delimiter = ',', default_value = "full,no_physics,no_kan,no_wgcn")]
        variants: Vec<Variant>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
}

fn require_file(flag: &str, p: &Path) -> Result<()> {
    if !p.exists() {
        bail!("{flag}: not found: {}", p.display());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    require_file("--checkpoint", path)?;
    Ok(Checkpoint::load(path)?.to_model()?)
}

fn open_bench(path: &Path) -> Result<Benchmark> {
    require_file("--bench", path)?;
    Benchmark::open(path).with_context(|| format!("--bench {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            train,
            val,
            test,
            adaptive,
        } => {
            let out = common.out_dir("bench");
            let mut cfg = BenchConfig {
                splits: vec![("train".into(), train), ("val".into(), val), ("test".into(), test)],
                ..BenchConfig::default()
            };
            cfg.fog.adaptive = adaptive;
            let seed = common.seed.unwrap_or(0);
            let entries = synth_benchmark(&out, &cfg, seed)?;
            println!("wrote {} items ({} scenes) to {}", entries.len(), train + val + test, out.join("manifest.txt").display());
        }
        Command::Train { common, bench } => {
            let cfg = common.model_config()?;
            let b = open_bench(&bench)?;
            let out = common.out_dir("run");
            let scenes = b.scenes("train")?;
            let val = b.items("val", None)?;
            cfg.save(&out.join("config.txt"))?;
            let r = train(&cfg, TrainData { train: &scenes, val: &val }, Some(&out))?;
            let first = r.epochs.first().map_or(f64::NAN, |e| e.train_loss);
            let last = r.epochs.last().map_or(f64::NAN, |e| e.train_loss);
            println!(
                "trained {} epochs ({} steps): loss {first:.5} -> {last:.5}, best val MAE {:.4} at epoch {}",
                r.epochs.len(),
                r.steps,
                r.best_val_mae,
                r.best_epoch
            );
            println!("checkpoint: {}", out.join("best.fckp").display());
        }
        Command::Eval {
            common,
            checkpoint,
            bench,
            split,
            tier,
        } => {
            let model = load_model(&checkpoint)?;
            let b = open_bench(&bench)?;
            let tier = match tier {
                Some(t) => Some(FogTier::parse(&t).with_context(|| format!("--tier: unknown tier `{t}`"))?),
                None => None,
            };
            let items = b.items(&split, tier)?;
            if items.is_empty() {
                bail!("--split {split}: no items in {}", bench.display());
            }
            let rep = evaluate(&model, &items)?;
            let out = common.out_dir("eval");
            rep.write(&out)?;
            print!("{}", rep.table());
        }
        Command::Infer { common, checkpoint, image } => {
            let model = load_model(&checkpoint)?;
            require_file("--image", &image)?;
            let img = io::load_image(&image)?;
            let p = model.predict(&img)?;
            let out = common.out_dir("infer");
            io::write_fcdm(&out.join("density.fcdm"), &p.density)?;
            let peak = p.density.data().iter().cloned().fold(0.0, f64::max);
            if peak > 0.0 {
                io::save_image(&out.join("density.png"), &gray3(&p.density.map(|v| v / peak)))?;
            }
            println!("count {:.4}", p.count);
            if let (Some(b), Some(a)) = (p.beta, p.a) {
                println!("beta {b:.4} A {:.4}", a[0]);
            }
        }
        Command::Dehaze { common, checkpoint, image } => {
            let model = load_model(&checkpoint)?;
            if model.variant() == Variant::NoPhysics {
                bail!("--checkpoint: {} has no physics branch (variant no_physics)", checkpoint.display());
            }
            require_file("--image", &image)?;
            let img = io::load_image(&image)?;
            let p = model.predict(&img)?;
            let (Some(j), Some(t)) = (p.dehazed, p.t) else {
                bail!("model produced no dehazed output");
            };
            let out = common.out_dir("dehaze");
            io::save_image(&out.join("dehazed.png"), &j)?;
            io::write_fcdm(&out.join("t.fcdm"), &t)?;
            io::save_image(&out.join("t.png"), &gray3(&t))?;
            println!(
                "beta {:.4} A {:.4} mean t {:.4}",
                p.beta.unwrap_or(f64::NAN),
                p.a.map_or(f64::NAN, |a| a[0]),
                t.sum() / t.data().len() as f64
            );
        }
        Command::Ablate {
            common,
            bench,
            seeds,
            variants,
        } => {
            let cfg = common.model_config()?;
            let b = open_bench(&bench)?;
            let out = common.out_dir("ablate");
            let rep = run_ablation(&cfg, &b, &variants, &seeds, Some(&out))?;
            print!("{}", rep.table());
        }
        Command::Gradcheck { common, tol } => {
            let entries = run_suite(tol)?;
            let mut text = String::from("case\tcoords\tmax_rel_err\tpassed\n");
            for e in &entries {
                text.push_str(&format!("{}\t{}\t{:e}\t{}\n", e.name, e.coords, e.max_rel_err, e.passed));
            }
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out).with_context(|| format!("--out {}", out.display()))?;
                std::fs::write(out.join("gradcheck.tsv"), &text).with_context(|| format!("--out {}", out.display()))?;
            }
            let worst = entries.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
            let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
            if let Some(w) = worst {
                println!("{} cases, max relative error {:e} ({})", entries.len(), w.max_rel_err, w.name);
            }
            if !failed.is_empty() {
                bail!("gradient check failed at tolerance {tol:e}: {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn gray3(map: &fogcount::autodiff::Tensor) -> fogcount::autodiff::Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(map.data());
    }
    fogcount::autodiff::Tensor::new(&[3, h, w], data).expect("shape matches data")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
