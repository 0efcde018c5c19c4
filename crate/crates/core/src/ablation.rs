//! Trains and evaluates every model variant over a list of seeds.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::config::{ModelConfig, Variant};
use crate::error::Result;
use crate::fogbench::FogTier;
use crate::train::{evaluate, train, Benchmark, EpochLog, EvalReport, TrainData};

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub seed: u64,
    pub variant: Variant,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub seconds: f64,
    pub test: EvalReport,
}

#[derive(Clone, Debug, Default)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn run(&self, seed: u64, variant: Variant) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.seed == seed && r.variant == variant)
    }

    pub fn mae(&self, seed: u64, variant: Variant, tier: FogTier) -> Option<f64> {
        self.run(seed, variant)
            .and_then(|r| r.test.tier(tier))
            .map(|t| t.mae)
    }

    /// Mean tier MAE of `variant` across all seeds it was run with.
    pub fn mean_mae(&self, variant: Variant, tier: FogTier) -> Option<f64> {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| r.test.tier(tier).map(|t| t.mae))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `seed variant tier beta mae mse` lines.
    pub fn table(&self) -> String {
        let mut s = String::from("seed\tvariant\ttier\tbeta\tmae\tmse\n");
        for r in &self.runs {
            for t in &r.test.tiers {
                let _ = writeln!(s, "{}\t{}\t{}\t{}\t{:.6}\t{:.6}", r.seed, r.variant, t.tier.name(), t.tier.beta(), t.mae, t.mse);
            }
        }
        s
    }
}

/// For each seed and variant: train on `train`, pick the best epoch on `val`,
/// evaluate on every tier of `test`. Per-run artifacts go to
/// `out/{variant}-s{seed}/` when `out` is given.
pub fn run_ablation(base: &ModelConfig, bench: &Benchmark, variants: &[Variant], seeds: &[u64], out: Option<&Path>) -> Result<AblationReport> {
    let train_scenes = bench.scenes("train")?;
    let val = bench.items("val", None)?;
    let test = bench.items("test", None)?;
    let mut report = AblationReport::default();
    for &seed in seeds {
        for &variant in variants {
            let cfg = ModelConfig {
                seed,
                variant,
                ..base.clone()
            };
            let dir = out.map(|d| d.join(format!("{variant}-s{seed}")));
            log::info!("ablation: {variant} seed {seed}");
            let start = Instant::now();
            let tr = train(
                &cfg,
                TrainData {
                    train: &train_scenes,
                    val: &val,
                },
                dir.as_deref(),
            )?;
            let seconds = start.elapsed().as_secs_f64();
            let rep = evaluate(&tr.best, &test)?;
            if let Some(d) = &dir {
                rep.write(d)?;
            }
            report.runs.push(AblationRun {
                seed,
                variant,
                best_epoch: tr.best_epoch,
                epochs: tr.epochs,
                seconds,
                test: rep,
            });
        }
    }
    if let Some(d) = out {
        crate::io::write_bytes(&d.join("ablation.tsv"), report.table().as_bytes())?;
    }
    Ok(report)
}
