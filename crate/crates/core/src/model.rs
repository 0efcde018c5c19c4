//! The full counting network: physics-guided restoration, feature stem,
//! KAN stack, weather-aware graph and density decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::atmos::{self, Backbone, ParamEstimator, Refiner};
use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result, StageExt};
use crate::kan::{KanStackConfig, MsaKanStack, SplineSpec};
use crate::layers::{Conv2d, Linear};
use crate::params::ParamStore;
use crate::wgcn::{self, AdjacencyMode, Wgcn, WgcnConfig};

#[derive(Clone, Debug)]
struct Physics {
    backbone: Backbone,
    estimator: ParamEstimator,
    refiner: Refiner,
}

#[derive(Clone, Debug)]
enum Trunk {
    Kan(MsaKanStack),
    /// Per-site MLP, i.e. a stack of 1×1 convolutions.
    Mlp(Vec<Linear>),
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    pub store: ParamStore,
    physics: Option<Physics>,
    stem: Conv2d,
    trunk: Trunk,
    wgcn: Wgcn,
    dec1: Conv2d,
    dec2: Conv2d,
}

/// Forward results. Physics fields are `None` for the `no_physics` variant.
pub struct Output<'t> {
    /// `[H, W]` crowd density.
    pub density: Var<'t>,
    /// `density × density_scale`, the decoder's native output.
    pub scaled: Var<'t>,
    pub beta: Option<Var<'t>>,
    pub a: Option<Var<'t>>,
    /// Unclipped airlight, used for supervision.
    pub a_raw: Option<Var<'t>>,
    pub t_init: Option<Var<'t>>,
    pub t_refined: Option<Var<'t>>,
    pub t_final: Option<Var<'t>>,
    pub dehazed: Option<Var<'t>>,
    /// `[N, 1]` per-node visibility.
    pub visibility: Option<Var<'t>>,
}

/// Detached inference results.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub density: Tensor,
    pub count: f64,
    pub beta: Option<f64>,
    pub a: Option<[f64; 3]>,
    pub t: Option<Tensor>,
    pub dehazed: Option<Tensor>,
    pub visibility: Option<Tensor>,
}

pub fn kan_config(cfg: &ModelConfig) -> KanStackConfig {
    KanStackConfig {
        widths: cfg.kan_widths,
        spline: SplineSpec {
            lo: cfg.spline_lo,
            hi: cfg.spline_hi,
            n_coeffs: cfg.spline_coeffs,
            degree: cfg.spline_degree,
        },
        scales: cfg.kan_scales.clone(),
    }
}

/// Scalar count of the KAN stack built from `cfg`.
pub fn kan_param_count(cfg: &ModelConfig) -> Result<usize> {
    let mut store = ParamStore::new();
    MsaKanStack::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "kan", &kan_config(cfg))?;
    Ok(store.num_scalars())
}

fn mlp_params(d_in: usize, hidden: usize, d_out: usize) -> usize {
    d_in * hidden + hidden + hidden * hidden + hidden + hidden * d_out + d_out
}

/// Hidden width of the `d_in → h → h → d_out` MLP closest to `budget` scalars.
pub fn matched_hidden(d_in: usize, d_out: usize, budget: usize) -> usize {
    (1..=4096)
        .min_by_key(|&h| mlp_params(d_in, h, d_out).abs_diff(budget))
        .expect("nonempty range")
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let physics = (cfg.variant != Variant::NoPhysics).then(|| {
            let backbone = Backbone::new(&mut store, &mut rng, "backbone");
            let estimator = ParamEstimator::new(&mut store, &mut rng, "estimator", Backbone::CHANNELS, cfg.beta_max);
            let refiner = Refiner::new(&mut store, &mut rng, "refiner", cfg.refiner_width);
            Physics {
                backbone,
                estimator,
                refiner,
            }
        });
        let stem = Conv2d::new(&mut store, &mut rng, "stem", 3, cfg.stem_channels, 3);
        let [d_in, _, _, d_out] = cfg.kan_widths;
        let trunk = if cfg.variant == Variant::NoKan {
            let h = matched_hidden(d_in, d_out, kan_param_count(cfg)?);
            Trunk::Mlp(vec![
                Linear::new(&mut store, &mut rng, "mlp.l0", d_in, h, true),
                Linear::new(&mut store, &mut rng, "mlp.l1", h, h, true),
                Linear::new(&mut store, &mut rng, "mlp.l2", h, d_out, true),
            ])
        } else {
            Trunk::Kan(MsaKanStack::new(&mut store, &mut rng, "kan", &kan_config(cfg))?)
        };
        let wcfg = WgcnConfig {
            dim: d_out,
            embed_dim: cfg.embed_dim,
            heads: cfg.heads,
            tau: cfg.tau,
            beta_e: cfg.beta_e,
            grid: (cfg.grid_h, cfg.grid_w),
            mode: if cfg.variant == Variant::NoWgcn {
                AdjacencyMode::FixedGrid
            } else {
                AdjacencyMode::Dynamic
            },
        };
        let pitch = cfg.height as f64 / cfg.grid_h as f64;
        let wgcn = Wgcn::new(&mut store, &mut rng, "wgcn", &wcfg, pitch)?;
        let dec1 = Conv2d::new(&mut store, &mut rng, "dec1", d_out, cfg.decoder_channels, 3);
        let dec2 = Conv2d::new(&mut store, &mut rng, "dec2", cfg.decoder_channels, 1, 3);
        store.fill(dec2.bias, cfg.decoder_bias);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            physics,
            stem,
            trunk,
            wgcn,
            dec1,
            dec2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    /// Scalar count of the site-wise trunk (KAN stack or its MLP stand-in).
    pub fn trunk_param_count(&self) -> usize {
        let prefix = match self.trunk {
            Trunk::Kan(_) => "kan.",
            Trunk::Mlp(_) => "mlp.",
        };
        self.store
            .ids()
            .filter(|&id| self.store.name(id).starts_with(prefix))
            .map(|id| self.store.tensor(id).len())
            .sum()
    }

    fn run_trunk<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        match &self.trunk {
            Trunk::Kan(stack) => Ok(stack.forward(tape, &self.store, x)?[2]),
            Trunk::Mlp(layers) => {
                let mut h = x;
                for (k, l) in layers.iter().enumerate() {
                    h = l.forward(tape, &self.store, h)?;
                    if k + 1 < layers.len() {
                        h = h.relu();
                    }
                }
                Ok(h)
            }
        }
    }

    /// Runs the whole pipeline on a `[3, H, W]` hazy image.
    pub fn forward<'t>(&self, tape: &'t Tape, image: &Tensor) -> Result<Output<'t>> {
        let (h, w) = match image.shape() {
            [3, h, w] => (*h, *w),
            s => return Err(Error::invalid("forward", format!("expected a [3, H, W] image, got {s:?}"))).stage("input"),
        };
        let cfg = &self.cfg;
        let (gh, gw) = (cfg.grid_h, cfg.grid_w);
        if h / cfg.stem_pool < gh || w / cfg.stem_pool < gw {
            return Err(Error::invalid("forward", format!("{h}x{w} image too small for a {gh}x{gw} grid"))).stage("input");
        }
        let store = &self.store;
        let i = tape.constant(image);
        let mut out = Output {
            density: i,
            scaled: i,
            beta: None,
            a: None,
            a_raw: None,
            t_init: None,
            t_refined: None,
            t_final: None,
            dehazed: None,
            visibility: None,
        };
        let (restored, beta) = match &self.physics {
            Some(p) => {
                let feat = p.backbone.forward(tape, store, i).stage("backbone")?;
                let est = p.estimator.forward(tape, store, feat).stage("estimate_params")?;
                let t_init = atmos::dark_channel_transmission(i, est.a, cfg.dcp_window, cfg.omega).stage("dark_channel")?;
                let t_refined = p.refiner.forward(tape, store, t_init, i).stage("refine_transmission")?;
                let guide = atmos::luma(i).stage("guided_filter")?;
                let t_final = atmos::guided_filter(guide, t_refined, cfg.guided_radius, cfg.guided_eps).stage("guided_filter")?;
                let j = atmos::dehaze(i, est.a, t_final, cfg.t_min).stage("dehaze")?;
                out.beta = Some(est.beta);
                out.a = Some(est.a);
                out.a_raw = Some(est.a_raw);
                out.t_init = Some(t_init);
                out.t_refined = Some(t_refined);
                out.t_final = Some(t_final);
                out.dehazed = Some(j);
                (j, est.beta)
            }
            None => (i, tape.scalar(0.0)),
        };

        let (sh, sw) = (h.div_ceil(cfg.stem_pool), w.div_ceil(cfg.stem_pool));
        let feat = self
            .stem
            .forward(tape, store, restored)
            .and_then(|f| f.relu().adaptive_avg_pool(sh, sw))
            .stage("stem")?;
        let c = cfg.stem_channels;
        let sites = feat.reshape(&[c, sh * sw])?.t()?;
        let z = self.run_trunk(tape, sites).stage("msa_kan")?;
        let d = z.shape()[1];
        let nodes = wgcn::grid_nodes(z.t()?.reshape(&[d, sh, sw])?, gh, gw).stage("grid_nodes")?;
        let centers = wgcn::node_centers(h, w, gh, gw);
        let stats = wgcn::patch_stats(image, gh, gw).stage("grid_nodes")?;
        let g = self.wgcn.forward(tape, store, nodes, &centers, &stats, beta).stage("wgcn")?;
        out.visibility = g.m_weather;

        let grid = g.y.t()?.reshape(&[d, gh, gw])?;
        let scaled = self
            .dec1
            .forward(tape, store, grid)
            .and_then(|x| self.dec2.forward(tape, store, x.relu()))
            .and_then(|x| x.upsample_nearest(h, w))
            .and_then(|x| x.reshape(&[h, w]))
            .map(|x| x.relu())
            .stage("decoder")?;
        out.scaled = scaled;
        out.density = scaled.mul_scalar(1.0 / cfg.density_scale);
        Ok(out)
    }

    /// Gradient-free forward returning plain tensors.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let tape = Tape::no_grad();
        let o = self.forward(&tape, image)?;
        let density = o.density.to_tensor();
        let a = o.a.map(|a| {
            let t = a.to_tensor();
            [t.data()[0], t.data()[1], t.data()[2]]
        });
        Ok(Prediction {
            count: density.sum(),
            density,
            beta: o.beta.map(|b| b.to_tensor().sum()),
            a,
            t: o.t_final.map(|t| t.to_tensor()),
            dehazed: o.dehazed.map(|j| j.to_tensor()),
            visibility: o.visibility.map(|m| m.to_tensor()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fogbench::{generate_scene, SceneConfig};

    fn scene_image(seed: u64, h: usize, w: usize) -> Tensor {
        let cfg = SceneConfig {
            height: h,
            width: w,
            ..SceneConfig::default()
        };
        generate_scene(seed, "m", &cfg).unwrap().clear
    }

    #[test]
    fn output_is_nonnegative_and_input_sized() {
        for (h, w) in [(64, 64), (96, 64)] {
            let cfg = ModelConfig {
                height: h,
                width: w,
                ..ModelConfig::default()
            };
            let m = Model::new(&cfg).unwrap();
            let p = m.predict(&scene_image(1, h, w)).unwrap();
            assert_eq!(p.density.shape(), &[h, w]);
            assert!(p.density.data().iter().all(|v| *v >= 0.0));
            assert!(p.count.is_finite() && p.count > 0.0);
            let beta = p.beta.unwrap();
            assert!((0.0..=cfg.beta_max).contains(&beta));
            assert!(p.a.unwrap().iter().all(|a| (0.5..=0.95).contains(a)));
            assert_eq!(p.visibility.unwrap().shape(), &[256, 1]);
        }
    }

    #[test]
    fn every_variant_runs_and_is_deterministic() {
        let img = scene_image(2, 64, 64);
        for v in Variant::ALL {
            let cfg = ModelConfig {
                variant: v,
                ..ModelConfig::default()
            };
            let a = Model::new(&cfg).unwrap().predict(&img).unwrap();
            let b = Model::new(&cfg).unwrap().predict(&img).unwrap();
            assert_eq!(a, b, "{v}");
            assert_eq!(a.beta.is_none(), v == Variant::NoPhysics);
            assert_eq!(a.visibility.is_none(), v == Variant::NoWgcn);
        }
    }

    #[test]
    fn no_kan_matches_the_parameter_budget() {
        let full = Model::new(&ModelConfig::default()).unwrap();
        let mlp = Model::new(&ModelConfig {
            variant: Variant::NoKan,
            ..ModelConfig::default()
        })
        .unwrap();
        let (a, b) = (full.trunk_param_count() as f64, mlp.trunk_param_count() as f64);
        assert_eq!(a as usize, kan_param_count(full.config()).unwrap());
        assert!((a - b).abs() / a < 0.01, "kan {a} vs mlp {b}");
        assert_eq!(matched_hidden(2, 1, mlp_params(2, 7, 1)), 7);
    }

    #[test]
    fn errors_carry_stage_labels() {
        let m = Model::new(&ModelConfig::default()).unwrap();
        let tape = Tape::no_grad();
        let err = m.forward(&tape, &Tensor::zeros(&[1, 64, 64])).err().unwrap();
        assert!(err.to_string().starts_with("[input]"), "{err}");
        let err = m.forward(&tape, &Tensor::zeros(&[3, 32, 32])).err().unwrap();
        assert!(err.to_string().contains("too small"), "{err}");
    }

    #[test]
    fn no_physics_ignores_the_physics_branch() {
        let cfg = ModelConfig {
            variant: Variant::NoPhysics,
            ..ModelConfig::default()
        };
        let m = Model::new(&cfg).unwrap();
        assert!(m.store.find("estimator.beta.w").is_none());
        assert!(m.store.find("refiner.dec1.w").is_none());
        let full = Model::new(&ModelConfig::default()).unwrap();
        assert!(full.store.find("estimator.beta.w").is_some());
    }
}
