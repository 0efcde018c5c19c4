//! Benchmark loading, the training loop and per-tier evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::atmos::{refine_loss, synthesize_fog, transmission};
use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fogbench::{curriculum_schedule, FogTier, ScenePaths};
use crate::io::{self, ManifestEntry};
use crate::losses::{self, LossParts, PhysicsPrediction, PhysicsTruth};
use crate::model::Model;
use crate::optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};

/// Largest β drawn for training fog (the severe tier).
pub const TRAIN_BETA_MAX: f64 = 2.0;

/// A clear scene with the data needed to fog it on the fly.
#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub id: String,
    pub clear: Tensor,
    pub depth: Tensor,
    pub density: Tensor,
}

/// One fogged benchmark image with its ground truth.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub tier: FogTier,
    pub beta: f64,
    pub a: f64,
    pub hazy: Tensor,
    pub density: Tensor,
    pub t: Tensor,
}

impl EvalItem {
    pub fn count(&self) -> f64 {
        self.density.sum()
    }
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Benchmark {
    /// Opens `manifest.txt` (or the given manifest file).
    pub fn open(path: &Path) -> Result<Self> {
        let manifest = if path.is_dir() { path.join("manifest.txt") } else { path.to_path_buf() };
        if !manifest.is_file() {
            return Err(Error::io(&manifest, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let entries = io::read_manifest(&manifest)?;
        Ok(Self {
            root: manifest.parent().unwrap_or(Path::new("")).to_path_buf(),
            entries,
        })
    }

    fn ids(&self, split: &str) -> Vec<String> {
        let mut ids: Vec<String> = self.entries.iter().filter(|e| e.split() == split).map(|e| e.id.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn scenes(&self, split: &str) -> Result<Vec<SceneRecord>> {
        self.ids(split)
            .into_iter()
            .map(|id| {
                let p = ScenePaths::new(&self.root, &id);
                Ok(SceneRecord {
                    clear: io::load_image(&p.clear)?,
                    depth: io::read_fcdm(&p.depth)?,
                    density: io::read_fcdm(&p.density)?,
                    id,
                })
            })
            .collect()
    }

    /// Items of `split`, optionally restricted to one tier.
    pub fn items(&self, split: &str, tier: Option<FogTier>) -> Result<Vec<EvalItem>> {
        self.entries
            .iter()
            .filter(|e| e.split() == split && tier.is_none_or(|t| t == e.tier))
            .map(|e| {
                Ok(EvalItem {
                    id: e.id.clone(),
                    tier: e.tier,
                    beta: e.beta,
                    a: e.a,
                    hazy: io::load_image(&e.image)?,
                    density: io::read_fcdm(&e.density)?,
                    t: io::read_fcdm(&e.t)?,
                })
            })
            .collect()
    }
}

/// A training image fogged with a random β below `beta_cap`, quantized to 8
/// bits like the stored benchmark images.
pub fn fog_sample(scene: &SceneRecord, beta_cap: f64, a_range: (f64, f64), rng: &mut impl Rng) -> Result<EvalItem> {
    let beta = if beta_cap > 0.0 { rng.gen_range(0.0..=beta_cap) } else { 0.0 };
    let a = if a_range.1 > a_range.0 { rng.gen_range(a_range.0..a_range.1) } else { a_range.0 };
    fog_item(scene, beta, a)
}

/// `scene` fogged with gray airlight `a` at scattering `beta`, quantized to 8 bits.
pub fn fog_item(scene: &SceneRecord, beta: f64, a: f64) -> Result<EvalItem> {
    let hazy = synthesize_fog(&scene.clear, &scene.depth, beta, [a; 3])?.map(|v| io::quantize(v) as f64 / 255.0);
    Ok(EvalItem {
        id: scene.id.clone(),
        tier: FogTier::None,
        beta,
        a,
        hazy,
        density: scene.density.clone(),
        t: transmission(&scene.depth, beta),
    })
}

/// `n` stratified uniform draws on `[lo, hi)`: one per equal-width cell, in
/// random order. Each draw is marginally uniform and the set covers the range
/// evenly, so epoch averages do not wander with the luck of the draw.
pub fn stratified(n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * (k as f64 + rng.gen::<f64>()) / n as f64).collect();
    v.shuffle(rng);
    v
}

/// Per-sample loss terms.
pub struct SampleLoss<'t> {
    pub total: Var<'t>,
    pub density: f64,
    pub physics: Option<f64>,
}

/// Full objective for one sample: density loss on scaled maps, physics and
/// refinement supervision when the model has a physics branch, and the
/// regularizer.
pub fn sample_loss<'t>(tape: &'t Tape, model: &Model, item: &EvalItem) -> Result<SampleLoss<'t>> {
    let cfg = model.config();
    let w = &cfg.loss;
    let out = model.forward(tape, &item.hazy)?;
    let gt = tape.constant(&item.density.map(|v| v * cfg.density_scale));
    let density = losses::density_loss(out.scaled, gt, w.alpha_ssim)?;
    let physics = match (out.t_final, out.t_refined, out.beta, out.a_raw) {
        (Some(t), Some(tr), Some(beta), Some(a)) => {
            let t_gt = tape.constant(&item.t);
            let truth = PhysicsTruth {
                t: Some(t_gt),
                beta: Some(tape.scalar(item.beta)),
                a: Some(tape.constant(&Tensor::from_vec(vec![item.a; 3]))),
            };
            let p = losses::physics_loss(tape, PhysicsPrediction { t, beta, a }, truth)?.value;
            Some(p.add(refine_loss(tr, t_gt, w.lambda_edge)?)?)
        }
        _ => None,
    };
    let reg = losses::regularization_loss(tape, &model.store, w)?;
    let total = losses::total_loss(
        LossParts {
            density,
            physics,
            regularization: reg,
        },
        w,
    )?;
    Ok(SampleLoss {
        total,
        density: density.item(),
        physics: physics.map(|p| p.item()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TierMetrics {
    pub tier: FogTier,
    pub n: usize,
    pub mae: f64,
    pub mse: f64,
    pub mean_gt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tiers: Vec<TierMetrics>,
    pub mae: f64,
    pub mse: f64,
    /// `(id, tier, ground-truth count, predicted count)` per item.
    pub rows: Vec<(String, FogTier, f64, f64)>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<(String, FogTier, f64, f64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("evaluate", "empty split"));
        }
        let mut by_tier: BTreeMap<FogTier, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (_, tier, gt, pred) in &rows {
            let e = by_tier.entry(*tier).or_default();
            e.0.push(*gt);
            e.1.push(*pred);
        }
        let tiers = by_tier
            .into_iter()
            .map(|(tier, (gt, pred))| {
                let (mae, mse) = losses::mae_mse(&gt, &pred)?;
                Ok(TierMetrics {
                    tier,
                    n: gt.len(),
                    mae,
                    mse,
                    mean_gt: gt.iter().sum::<f64>() / gt.len() as f64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gt: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let pred: Vec<f64> = rows.iter().map(|r| r.3).collect();
        let (mae, mse) = losses::mae_mse(&gt, &pred)?;
        Ok(Self { tiers, mae, mse, rows })
    }

    pub fn tier(&self, tier: FogTier) -> Option<&TierMetrics> {
        self.tiers.iter().find(|t| t.tier == tier)
    }

    /// `tier beta n mae mse` lines.
    pub fn table(&self) -> String {
        let mut s = String::from("tier\tbeta\tn\tmae\tmse\tmean_gt\n");
        for t in &self.tiers {
            let _ = writeln!(s, "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.4}", t.tier.name(), t.tier.beta(), t.n, t.mae, t.mse, t.mean_gt);
        }
        let _ = writeln!(s, "all\t-\t{}\t{:.6}\t{:.6}\t-", self.rows.len(), self.mae, self.mse);
        s
    }

    /// Two-column `beta metric` text for MAE or MSE.
    pub fn plot_data(&self, mse: bool) -> String {
        self.tiers
            .iter()
            .map(|t| format!("{} {}\n", t.tier.beta(), if mse { t.mse } else { t.mae }))
            .collect()
    }

    /// Writes `metrics.tsv`, `predictions.tsv`, `plot_mae.txt` and `plot_mse.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_bytes(&dir.join("metrics.tsv"), self.table().as_bytes())?;
        let mut rows = String::from("id\ttier\tgt\tpred\n");
        for (id, tier, gt, pred) in &self.rows {
            let _ = writeln!(rows, "{id}\t{}\t{gt}\t{pred}", tier.name());
        }
        io::write_bytes(&dir.join("predictions.tsv"), rows.as_bytes())?;
        io::write_bytes(&dir.join("plot_mae.txt"), self.plot_data(false).as_bytes())?;
        io::write_bytes(&dir.join("plot_mse.txt"), self.plot_data(true).as_bytes())
    }
}

/// Predicted count = sum of the predicted density map.
pub fn evaluate(model: &Model, items: &[EvalItem]) -> Result<EvalReport> {
    let rows = items
        .iter()
        .map(|it| Ok((it.id.clone(), it.tier, it.count(), model.predict(&it.hazy)?.count)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub beta_cap: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_density: f64,
    pub val_mae: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub steps: u64,
    /// Largest clipped gradient norm seen, for auditing the clip contract.
    pub max_clipped_norm: f64,
    pub best: Model,
}

pub struct TrainData<'a> {
    pub train: &'a [SceneRecord],
    pub val: &'a [EvalItem],
}

/// Trains from `cfg`, saving `best.fckp`, `last_good.fckp` and `train_log.tsv`
/// under `out` when given. A non-finite loss aborts with the last good
/// checkpoint left in place.
pub fn train(cfg: &ModelConfig, data: TrainData<'_>, out: Option<&Path>) -> Result<TrainReport> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("train", "empty train or validation split"));
    }
    let mut model = Model::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696E);
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        },
    );
    let per_epoch = data.train.len().div_ceil(cfg.batch);
    let total_steps = per_epoch * cfg.epochs;
    let save = |model: &Model, name: &str, step: u64, rng: &ChaCha8Rng| -> Result<()> {
        match out {
            Some(dir) => Checkpoint::from_model(model, step, Some(rng)).save(&dir.join(name)),
            None => Ok(()),
        }
    };
    save(&model, "last_good.fckp", 0, &rng)?;

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best = (usize::MAX, f64::INFINITY, model.clone());
    let mut max_clipped: f64 = 0.0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let cap = if cfg.curriculum {
            curriculum_schedule(epoch, cfg.epochs, TRAIN_BETA_MAX)?
        } else {
            TRAIN_BETA_MAX
        };
        order.shuffle(&mut rng);
        let betas = stratified(order.len(), 0.0, cap, &mut rng);
        let airs = stratified(order.len(), cfg.train_a_lo, cfg.train_a_hi, &mut rng);
        let (mut loss_sum, mut dens_sum) = (0.0, 0.0);
        let mut lr = cfg.lr;
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            model.store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for (j, &k) in batch.iter().enumerate() {
                let slot = b * cfg.batch + j;
                let item = fog_item(&data.train[k], betas[slot], airs[slot])?;
                let tape = Tape::new();
                let l = sample_loss(&tape, &model, &item)?;
                let value = l.total.item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}, scene {}", item.id)));
                }
                loss_sum += value;
                dens_sum += l.density;
                let g = tape.backward(l.total.mul_scalar(scale))?;
                model.store.accumulate(&g)?;
            }
            let norm = clip_grad_norm(&mut model.store, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient norm at epoch {epoch}, step {step}")));
            }
            max_clipped = max_clipped.max(crate::optim::grad_norm(&model.store));
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min);
            opt.step(&mut model.store, lr)?;
            step += 1;
        }
        model.store.zero_grad();
        let val = evaluate(&model, data.val)?;
        let n = data.train.len() as f64;
        let log = EpochLog {
            epoch,
            beta_cap: cap,
            lr,
            train_loss: loss_sum / n,
            train_density: dens_sum / n,
            val_mae: val.mae,
            val_mse: val.mse,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch:>3} cap {cap:.3} lr {lr:.2e} loss {:.5} density {:.5} val MAE {:.3} MSE {:.3} ({:.1}s)",
            log.train_loss,
            log.train_density,
            log.val_mae,
            log.val_mse,
            log.seconds
        );
        if val.mae < best.1 {
            best = (epoch, val.mae, model.clone());
            save(&model, "best.fckp", step as u64, &rng)?;
        }
        save(&model, "last_good.fckp", step as u64, &rng)?;
        logs.push(log);
    }
    if let Some(dir) = out {
        let mut text = String::from("epoch\tbeta_cap\tlr\ttrain_loss\ttrain_density\tval_mae\tval_mse\tseconds\n");
        for l in &logs {
            let _ = writeln!(
                text,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
                l.epoch, l.beta_cap, l.lr, l.train_loss, l.train_density, l.val_mae, l.val_mse, l.seconds
            );
        }
        io::write_bytes(&dir.join("train_log.tsv"), text.as_bytes())?;
    }
    Ok(TrainReport {
        epochs: logs,
        best_epoch: best.0,
        best_val_mae: best.1,
        steps: step as u64,
        max_clipped_norm: max_clipped,
        best: best.2,
    })
}
