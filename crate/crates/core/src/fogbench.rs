//! Procedural crowd scenes, density ground truth and fog-tier benchmarks.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::atmos::{depth_ramp, synthesize_fog, transmission};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::{self, ManifestEntry};

pub const MAX_COUNT: usize = 500;
pub const DEFAULT_SIGMA_D: f64 = 4.0;
/// Largest head count per pixel of image area.
pub const CAPACITY_PER_PIXEL: f64 = 1.0 / 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FogTier {
    None,
    Light,
    Moderate,
    Severe,
}

impl FogTier {
    pub const ALL: [FogTier; 4] = [FogTier::None, FogTier::Light, FogTier::Moderate, FogTier::Severe];

    pub fn beta(self) -> f64 {
        match self {
            FogTier::None => 0.0,
            FogTier::Light => 0.5,
            FogTier::Moderate => 1.0,
            FogTier::Severe => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FogTier::None => "none",
            FogTier::Light => "light",
            FogTier::Moderate => "moderate",
            FogTier::Severe => "severe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive head-count range.
    pub count: (usize, usize),
    pub d_min: f64,
    pub d_max: f64,
    /// Relative jitter applied to `d_max` per scene.
    pub depth_jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            count: (10, 60),
            d_min: 0.1,
            d_max: 2.0,
            depth_jitter: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    /// `[3, H, W]`, every value a multiple of 1/255.
    pub clear: Tensor,
    /// Head centers as `(x, y)` pixel coordinates.
    pub points: Vec<(f64, f64)>,
    /// `[H, W]`, far rows at the top.
    pub depth: Tensor,
}

/// Renders dark head blobs on a smooth textured background. Blob radius grows
/// towards the bottom rows, matching the depth ramp.
pub fn generate_scene(seed: u64, id: &str, cfg: &SceneConfig) -> Result<Scene> {
    let (h, w) = (cfg.height, cfg.width);
    if h < 32 || w < 32 {
        return Err(Error::invalid("generate_scene", format!("size {h}x{w} below 32x32")));
    }
    let (lo, hi) = cfg.count;
    let capacity = ((h * w) as f64 * CAPACITY_PER_PIXEL) as usize;
    if lo > hi || hi > MAX_COUNT {
        return Err(Error::invalid("generate_scene", format!("count range {lo}..={hi} outside 0..={MAX_COUNT}")));
    }
    if hi > capacity {
        return Err(Error::invalid("generate_scene", format!("count {hi} exceeds capacity {capacity} of a {h}x{w} image")));
    }
    if !(cfg.d_min >= 0.0 && cfg.d_max >= cfg.d_min && (0.0..1.0).contains(&cfg.depth_jitter)) {
        return Err(Error::invalid("generate_scene", "invalid depth range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let mut img = vec![0.0; 3 * n];

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.75));
    let tilt = rng.gen_range(-0.15..0.15);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.02..0.06),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    for r in 0..h {
        for c in 0..w {
            let mut tex = tilt * (r as f64 / (h - 1) as f64 - 0.5);
            for &(amp, fx, fy, ph) in &waves {
                tex += amp * (fx * c as f64 + fy * r as f64 + ph).sin();
            }
            for (ch, b) in base.iter().enumerate() {
                img[ch * n + r * w + c] = b + tex + rng.gen_range(-0.02..0.02);
            }
        }
    }

    let count = rng.gen_range(lo..=hi);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng.gen_range(0.0..w as f64);
        let y = rng.gen_range(0.0..h as f64);
        let radius = 0.9 + 1.6 * y / h as f64;
        let shade = rng.gen_range(0.05..0.2);
        let color = [shade + rng.gen_range(0.0..0.05), shade, shade];
        let reach = (3.0 * radius).ceil() as isize;
        let (cx, cy) = (x.round() as isize, y.round() as isize);
        for r in (cy - reach).max(0)..(cy + reach + 1).min(h as isize) {
            for c in (cx - reach).max(0)..(cx + reach + 1).min(w as isize) {
                let d2 = (c as f64 - x).powi(2) + (r as f64 - y).powi(2);
                let alpha = 0.95 * (-d2 / (2.0 * radius * radius)).exp();
                let k = r as usize * w + c as usize;
                for (ch, col) in color.iter().enumerate() {
                    let v = &mut img[ch * n + k];
                    *v = *v * (1.0 - alpha) + col * alpha;
                }
            }
        }
        points.push((x, y));
    }
    for v in &mut img {
        *v = io::quantize(*v) as f64 / 255.0;
    }

    let d_max = cfg.d_max * (1.0 + rng.gen_range(-1.0..=1.0) * cfg.depth_jitter);
    Ok(Scene {
        id: id.to_string(),
        seed,
        clear: Tensor::new(&[3, h, w], img)?,
        points,
        depth: depth_ramp(h, w, cfg.d_min, d_max, true),
    })
}

/// Sum of unit-mass Gaussians, one per point. Each kernel is normalized over
/// the image so the map sums to the point count.
pub fn density_from_points(points: &[(f64, f64)], h: usize, w: usize, sigma_d: f64) -> Result<Tensor> {
    if !(sigma_d > 0.0) {
        return Err(Error::invalid("density_from_points", format!("sigma {sigma_d} must be positive")));
    }
    let mut map = vec![0.0; h * w];
    let axis = |center: f64, len: usize| {
        let g: Vec<f64> = (0..len).map(|k| (-(k as f64 - center).powi(2) / (2.0 * sigma_d * sigma_d)).exp()).collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    for &(x, y) in points {
        if !(0.0..w as f64).contains(&x) || !(0.0..h as f64).contains(&y) {
            return Err(Error::invalid("density_from_points", format!("point ({x}, {y}) outside {h}x{w}")));
        }
        let gx = axis(x, w);
        let gy = axis(y, h);
        for (r, vy) in gy.iter().enumerate() {
            for (c, vx) in gx.iter().enumerate() {
                map[r * w + c] += vy * vx;
            }
        }
    }
    Tensor::new(&[h, w], map)
}

/// Scene statistics and the fog parameters derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveFog {
    pub beta: f64,
    pub a: f64,
    pub contrast: f64,
    pub edge_density: f64,
    pub brightness: f64,
}

/// Heuristic fog parameters: low-contrast scenes get up to 50% more
/// scattering, brighter scenes a brighter airlight.
pub fn adaptive_fog_params(j: &Tensor, beta_base: f64) -> Result<AdaptiveFog> {
    let (h, w) = match j.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::invalid("adaptive_fog_params", format!("expected a [3, H, W] image, got {s:?}"))),
    };
    let d = j.data();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64;
    let contrast = if m > 0.0 { var.sqrt() / m } else { 0.0 };
    let mut grad = 0.0;
    for ch in 0..3 {
        for r in 0..h {
            for c in 0..w {
                let k = ch * h * w + r * w + c;
                let gx = if c + 1 < w { d[k + 1] - d[k] } else { 0.0 };
                let gy = if r + 1 < h { d[k + w] - d[k] } else { 0.0 };
                grad += (gx * gx + gy * gy).sqrt();
            }
        }
    }
    Ok(AdaptiveFog {
        beta: beta_base * (1.0 + 0.5 * (1.0 - contrast.min(1.0))),
        a: (0.6 + 0.35 * m).clamp(0.5, 0.95),
        contrast,
        edge_density: grad / d.len() as f64,
        brightness: m,
    })
}

/// Largest β drawn at `epoch`: ramps linearly to `beta_max` over the first
/// 60% of training.
pub fn curriculum_schedule(epoch: usize, total: usize, beta_max: f64) -> Result<f64> {
    if epoch >= total {
        return Err(Error::invalid("curriculum_schedule", format!("epoch {epoch} not below total {total}")));
    }
    Ok(beta_max * (epoch as f64 / (0.6 * total as f64)).min(1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FogOptions {
    /// Range of the gray airlight.
    pub a_range: (f64, f64),
    pub adaptive: bool,
}

impl Default for FogOptions {
    fn default() -> Self {
        Self {
            a_range: (0.7, 0.95),
            adaptive: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchItem {
    pub id: String,
    pub tier: FogTier,
    pub beta: f64,
    pub a: f64,
    pub hazy: Tensor,
    pub t: Tensor,
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fogged copies of one scene, one per tier. All tiers share one airlight
/// drawn from the scene seed.
pub fn build_items(scene: &Scene, tiers: &[FogTier], opts: &FogOptions) -> Result<Vec<BenchItem>> {
    let (lo, hi) = opts.a_range;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid("build_items", format!("airlight range {lo}..{hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(scene.seed, 1));
    let sampled = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    tiers
        .iter()
        .map(|&tier| {
            let (beta, a) = if opts.adaptive {
                let f = adaptive_fog_params(&scene.clear, tier.beta())?;
                (f.beta, f.a)
            } else {
                (tier.beta(), sampled)
            };
            let hazy = if beta == 0.0 {
                scene.clear.clone()
            } else {
                synthesize_fog(&scene.clear, &scene.depth, beta, [a; 3])?
            };
            Ok(BenchItem {
                id: scene.id.clone(),
                tier,
                beta,
                a,
                hazy,
                t: transmission(&scene.depth, beta),
            })
        })
        .collect()
}

pub fn build_benchmark(scenes: &[Scene], tiers: &[FogTier], opts: &FogOptions) -> Result<Vec<BenchItem>> {
    let mut out = Vec::with_capacity(scenes.len() * tiers.len());
    for s in scenes {
        out.extend(build_items(s, tiers, opts)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub scene: SceneConfig,
    pub fog: FogOptions,
    pub sigma_d: f64,
    pub splits: Vec<(String, usize)>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            fog: FogOptions::default(),
            sigma_d: DEFAULT_SIGMA_D,
            splits: vec![("train".into(), 200), ("val".into(), 50), ("test".into(), 50)],
        }
    }
}

/// File locations of per-scene data under a benchmark root.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePaths {
    pub clear: PathBuf,
    pub depth: PathBuf,
    pub density: PathBuf,
    pub points: PathBuf,
}

impl ScenePaths {
    pub fn new(root: &Path, id: &str) -> Self {
        let dir = root.join("scenes");
        Self {
            clear: dir.join(format!("{id}.png")),
            depth: dir.join(format!("{id}.depth.fcdm")),
            density: dir.join(format!("{id}.density.fcdm")),
            points: dir.join(format!("{id}.points.txt")),
        }
    }
}

pub fn scene_id(split: &str, index: usize) -> String {
    format!("{split}-{index:04}")
}

pub fn scene_seed(seed: u64, split: usize, index: usize) -> u64 {
    mix(seed, ((split as u64) << 32) | index as u64)
}

/// Generates every split, writes scenes, fogged items and `manifest.txt`
/// under `root`, and returns the manifest entries.
pub fn synth_benchmark(root: &Path, cfg: &BenchConfig, seed: u64) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (si, (split, n)) in cfg.splits.iter().enumerate() {
        for i in 0..*n {
            let id = scene_id(split, i);
            let scene = generate_scene(scene_seed(seed, si, i), &id, &cfg.scene)?;
            let paths = ScenePaths::new(root, &id);
            let density = density_from_points(&scene.points, cfg.scene.height, cfg.scene.width, cfg.sigma_d)?;
            io::save_image(&paths.clear, &scene.clear)?;
            io::write_fcdm(&paths.depth, &scene.depth)?;
            io::write_fcdm(&paths.density, &density)?;
            io::write_points(&paths.points, &scene.points)?;
            for item in build_items(&scene, &FogTier::ALL, &cfg.fog)? {
                let image = root.join("items").join(format!("{id}.{}.png", item.tier.name()));
                let t = root.join("items").join(format!("{id}.{}.t.fcdm", item.tier.name()));
                io::save_image(&image, &item.hazy)?;
                io::write_fcdm(&t, &item.t)?;
                entries.push(ManifestEntry {
                    id: id.clone(),
                    tier: item.tier,
                    beta: item.beta,
                    a: item.a,
                    image,
                    density: paths.density.clone(),
                    t,
                });
            }
        }
    }
    io::write_manifest(&root.join("manifest.txt"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use rand::Rng;

    fn rms_contrast(d: &[f64]) -> f64 {
        let m = d.iter().sum::<f64>() / d.len() as f64;
        (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt() / m
    }

    /// Mean over rows of std/mean, all channels pooled. Depth is constant
    /// along a row.
    fn contrast(img: &Tensor) -> f64 {
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let d = img.data();
        let rows = (0..h).map(|r| {
            let px: Vec<f64> = (0..c).flat_map(|k| d[(k * h + r) * w..(k * h + r + 1) * w].iter().copied()).collect();
            rms_contrast(&px)
        });
        rows.sum::<f64>() / h as f64
    }

    #[test]
    fn whole_image_contrast_can_rise_with_fog() {
        let s = generate_scene(12657531000490599896, "c", &SceneConfig::default()).unwrap();
        let items = build_items(&s, &FogTier::ALL, &FogOptions::default()).unwrap();
        let whole: Vec<f64> = items.iter().map(|it| rms_contrast(it.hazy.data())).collect();
        assert!(whole[2] > whole[1], "{whole:?}");
        let rows: Vec<f64> = items.iter().map(|it| contrast(&it.hazy)).collect();
        assert!(rows.windows(2).all(|p| p[1] <= p[0]), "{rows:?}");
    }

    #[test]
    fn tiers_match_the_beta_list() {
        let betas: Vec<f64> = FogTier::ALL.iter().map(|t| t.beta()).collect();
        assert_eq!(betas, vec![0.0, 0.5, 1.0, 2.0]);
        for t in FogTier::ALL {
            assert_eq!(FogTier::parse(t.name()), Some(t));
        }
        assert_eq!(FogTier::parse("dense"), None);
    }

    #[test]
    fn empty_scene_and_exact_count() {
        let cfg = SceneConfig {
            count: (0, 0),
            ..SceneConfig::default()
        };
        let s = generate_scene(1, "a", &cfg).unwrap();
        assert!(s.points.is_empty());
        let cfg = SceneConfig {
            count: (37, 37),
            ..SceneConfig::default()
        };
        let s = generate_scene(2, "b", &cfg).unwrap();
        assert_eq!(s.points.len(), 37);
        assert!(s.points.iter().all(|&(x, y)| (0.0..64.0).contains(&x) && (0.0..64.0).contains(&y)));
        assert!(s.clear.data().iter().all(|v| (0.0..=1.0).contains(v) && (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
        assert_eq!(generate_scene(2, "b", &cfg).unwrap(), s);
        assert_ne!(generate_scene(3, "b", &cfg).unwrap(), s);
    }

    #[test]
    fn scene_rejects_bad_configs() {
        let bad = |cfg: SceneConfig| generate_scene(0, "x", &cfg).is_err();
        assert!(bad(SceneConfig {
            height: 16,
            ..SceneConfig::default()
        }));
        assert!(bad(SceneConfig {
            count: (0, 501),
            ..SceneConfig::default()
        }));
        assert!(bad(SceneConfig {
            height: 32,
            width: 32,
            count: (0, 200),
            ..SceneConfig::default()
        }));
        assert!(bad(SceneConfig {
            count: (5, 4),
            ..SceneConfig::default()
        }));
    }

    #[test]
    fn density_examples() {
        let z = density_from_points(&[], 8, 8, 4.0).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
        let one = density_from_points(&[(20.3, 30.7)], 64, 64, 4.0).unwrap();
        assert!((one.sum() - 1.0).abs() < 1e-6);
        assert!(density_from_points(&[(64.0, 1.0)], 64, 64, 4.0).is_err());
        assert!(density_from_points(&[(1.0, 1.0)], 64, 64, 0.0).is_err());

        // Corner point: truncated kernel renormalized over the image, by a 2-D loop.
        let corner = density_from_points(&[(0.0, 0.0)], 32, 32, 4.0).unwrap();
        let mut total = 0.0;
        for r in 0..32 {
            for c in 0..32 {
                total += (-((r * r + c * c) as f64) / 32.0).exp();
            }
        }
        assert!((corner.at(&[0, 0]) - 1.0 / total).abs() < 1e-15);
        assert!((corner.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_params_examples() {
        let gray = Tensor::full(&[3, 8, 8], 0.5);
        let f = adaptive_fog_params(&gray, 1.0).unwrap();
        assert!((f.beta - 1.5).abs() < 1e-15);
        assert!((f.a - 0.775).abs() < 1e-15);
        assert_eq!(f.edge_density, 0.0);
        let black = adaptive_fog_params(&Tensor::zeros(&[3, 8, 8]), 0.5).unwrap();
        assert_eq!(black.a, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let data: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let j = Tensor::new(&[3, 16, 16], data).unwrap();
            let base = rng.gen_range(0.1..2.0);
            let f = adaptive_fog_params(&j, base).unwrap();
            assert!(f.beta >= base && f.beta <= 1.5 * base + 1e-12);
            assert!((0.5..=0.95).contains(&f.a));
            assert_eq!(adaptive_fog_params(&j, base).unwrap(), f);
        }
    }

    #[test]
    fn curriculum_examples() {
        assert_eq!(curriculum_schedule(0, 30, 2.0).unwrap(), 0.0);
        assert_eq!(curriculum_schedule(18, 30, 2.0).unwrap(), 2.0);
        assert_eq!(curriculum_schedule(29, 30, 2.0).unwrap(), 2.0);
        assert!((curriculum_schedule(9, 30, 2.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(curriculum_schedule(30, 30, 2.0).is_err());
    }

    #[test]
    fn tier_items_follow_the_closed_forms() {
        let cfg = SceneConfig {
            depth_jitter: 0.0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(5, "s", &cfg).unwrap();
        let items = build_items(&scene, &FogTier::ALL, &FogOptions::default()).unwrap();
        assert_eq!(items[0].hazy, scene.clear);
        assert!(items[0].t.data().iter().all(|v| *v == 1.0));
        let severe = &items[3];
        assert!((severe.t.at(&[0, 0]) - (-4.0f64).exp()).abs() < 1e-15);
        assert!((severe.t.at(&[0, 0]) - 0.01832).abs() < 1e-5);
        for it in &items {
            assert!((0.7..0.95).contains(&it.a));
            assert_eq!(it.a, items[0].a);
        }
        let cs: Vec<f64> = items.iter().map(|it| contrast(&it.hazy)).collect();
        assert!(cs.windows(2).all(|p| p[1] <= p[0]), "{cs:?}");
    }

    #[test]
    fn benchmark_transmission_matches_exponential_oracle() {
        let cfg = SceneConfig::default();
        let scenes: Vec<Scene> = (0..10).map(|i| generate_scene(100 + i, &format!("t-{i}"), &cfg).unwrap()).collect();
        let items = build_benchmark(&scenes, &FogTier::ALL, &FogOptions::default()).unwrap();
        assert_eq!(items.len(), 40);
        for (k, it) in items.iter().enumerate() {
            let d = &scenes[k / 4].depth;
            for (t, dv) in it.t.data().iter().zip(d.data()) {
                assert_eq!(*t, (-it.beta * dv).exp());
            }
        }
    }

    #[test]
    fn synth_writes_deterministic_files() {
        let cfg = BenchConfig {
            splits: vec![("train".into(), 2), ("test".into(), 1)],
            ..BenchConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ea = synth_benchmark(a.path(), &cfg, 7).unwrap();
        synth_benchmark(b.path(), &cfg, 7).unwrap();
        assert_eq!(ea.len(), 12);
        assert_eq!(ea[0].id, "train-0000");
        assert_eq!(ea[11].id, "test-0000");
        let read = |root: &Path, rel: &str| std::fs::read(root.join(rel)).unwrap();
        assert_eq!(read(a.path(), "manifest.txt"), read(b.path(), "manifest.txt"));
        assert_eq!(read(a.path(), "items/train-0001.severe.png"), read(b.path(), "items/train-0001.severe.png"));
        assert_eq!(read(a.path(), "scenes/test-0000.density.fcdm"), read(b.path(), "scenes/test-0000.density.fcdm"));
        let back = io::read_manifest(&a.path().join("manifest.txt")).unwrap();
        assert_eq!(back, ea);
        let pts = io::read_points(&ScenePaths::new(a.path(), "train-0001").points).unwrap();
        let dm = io::read_fcdm(&ea[4].density).unwrap();
        assert!((dm.sum() - pts.len() as f64).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn density_mass_is_conserved(seed in any::<u64>()) {
            let cfg = SceneConfig::default();
            let s = generate_scene(seed, "p", &cfg).unwrap();
            let d = density_from_points(&s.points, 64, 64, DEFAULT_SIGMA_D).unwrap();
            prop_assert!((d.sum() - s.points.len() as f64).abs() < 1e-6);
            prop_assert!(d.data().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn curriculum_is_nondecreasing(total in 1usize..200, beta_max in 0.0f64..4.0) {
            let caps: Vec<f64> = (0..total).map(|e| curriculum_schedule(e, total, beta_max).unwrap()).collect();
            prop_assert!(caps.windows(2).all(|p| p[1] >= p[0]));
            prop_assert!(caps.iter().all(|c| *c <= beta_max));
        }

        #[test]
        fn contrast_is_nonincreasing_across_tiers(seed in any::<u64>()) {
            let s = generate_scene(seed, "c", &SceneConfig::default()).unwrap();
            let items = build_items(&s, &FogTier::ALL, &FogOptions::default()).unwrap();
            let cs: Vec<f64> = items.iter().map(|it| contrast(&it.hazy)).collect();
            prop_assert!(cs.windows(2).all(|p| p[1] <= p[0]), "{:?}", cs);
        }
    }
}
