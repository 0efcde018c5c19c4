//! Model and training hyperparameters with a line-based `key = value` format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Hazy image goes straight to the feature stem; no physics branch.
    NoPhysics,
    /// Per-site MLP with the KAN stack's parameter budget.
    NoKan,
    /// Fixed 4-neighbor grid adjacency.
    NoWgcn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoPhysics, Variant::NoKan, Variant::NoWgcn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPhysics => "no_physics",
            Variant::NoKan => "no_kan",
            Variant::NoWgcn => "no_wgcn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub seed: u64,
    pub variant: Variant,
    pub height: usize,
    pub width: usize,

    pub beta_max: f64,
    pub omega: f64,
    pub dcp_window: usize,
    pub guided_radius: usize,
    pub guided_eps: f64,
    pub t_min: f64,
    pub refiner_width: usize,

    pub stem_channels: usize,
    pub stem_pool: usize,
    pub kan_widths: [usize; 4],
    pub kan_scales: [Vec<f64>; 3],
    pub spline_coeffs: usize,
    pub spline_degree: usize,
    pub spline_lo: f64,
    pub spline_hi: f64,

    pub grid_h: usize,
    pub grid_w: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub tau: f64,
    pub beta_e: f64,

    pub decoder_channels: usize,
    /// Initial bias of the last decoder layer, keeping the output ReLU active.
    pub decoder_bias: f64,
    /// The decoder predicts `density_scale × density`.
    pub density_scale: f64,

    pub loss: LossWeights,

    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub batch: usize,
    pub epochs: usize,
    pub curriculum: bool,
    /// Airlight range drawn for on-the-fly training fog.
    pub train_a_lo: f64,
    pub train_a_hi: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::Full,
            height: 64,
            width: 64,
            beta_max: 2.5,
            omega: 0.95,
            dcp_window: 15,
            guided_radius: 8,
            guided_eps: 1e-3,
            t_min: 0.1,
            refiner_width: 8,
            stem_channels: 16,
            stem_pool: 4,
            kan_widths: [16, 32, 32, 32],
            kan_scales: [vec![1.0], vec![1.0, 2.0, 4.0], vec![1.0]],
            spline_coeffs: 9,
            spline_degree: 3,
            spline_lo: -3.0,
            spline_hi: 3.0,
            grid_h: 16,
            grid_w: 16,
            heads: 4,
            embed_dim: 16,
            tau: 1.0,
            beta_e: 0.5,
            decoder_channels: 16,
            decoder_bias: 0.5,
            density_scale: 100.0,
            loss: LossWeights::default(),
            lr: 1e-3,
            lr_min: 1e-7,
            weight_decay: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            batch: 8,
            epochs: 30,
            curriculum: true,
            train_a_lo: 0.7,
            train_a_hi: 0.95,
        }
    }
}

fn join<T: fmt::Display>(v: &[T], sep: &str) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

impl ModelConfig {
    /// Every field, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let l = &self.loss;
        let scales: Vec<String> = self.kan_scales.iter().map(|s| join(s, ",")).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("variant", self.variant.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("beta_max", self.beta_max.to_string()),
            ("omega", self.omega.to_string()),
            ("dcp_window", self.dcp_window.to_string()),
            ("guided_radius", self.guided_radius.to_string()),
            ("guided_eps", self.guided_eps.to_string()),
            ("t_min", self.t_min.to_string()),
            ("refiner_width", self.refiner_width.to_string()),
            ("stem_channels", self.stem_channels.to_string()),
            ("stem_pool", self.stem_pool.to_string()),
            ("kan_widths", join(&self.kan_widths, ",")),
            ("kan_scales", scales.join(";")),
            ("spline_coeffs", self.spline_coeffs.to_string()),
            ("spline_degree", self.spline_degree.to_string()),
            ("spline_lo", self.spline_lo.to_string()),
            ("spline_hi", self.spline_hi.to_string()),
            ("grid_h", self.grid_h.to_string()),
            ("grid_w", self.grid_w.to_string()),
            ("heads", self.heads.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("tau", self.tau.to_string()),
            ("beta_e", self.beta_e.to_string()),
            ("decoder_channels", self.decoder_channels.to_string()),
            ("decoder_bias", self.decoder_bias.to_string()),
            ("density_scale", self.density_scale.to_string()),
            ("lambda_physics", l.lambda_physics.to_string()),
            ("lambda_reg", l.lambda_reg.to_string()),
            ("alpha_ssim", l.alpha_ssim.to_string()),
            ("lambda_weight", l.lambda_weight.to_string()),
            ("lambda_smooth", l.lambda_smooth.to_string()),
            ("lambda_edge", l.lambda_edge.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("batch", self.batch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("curriculum", self.curriculum.to_string()),
            ("train_a_lo", self.train_a_lo.to_string()),
            ("train_a_hi", self.train_a_hi.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let l = &mut self.loss;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "beta_max" => self.beta_max = parse(key, v)?,
            "omega" => self.omega = parse(key, v)?,
            "dcp_window" => self.dcp_window = parse(key, v)?,
            "guided_radius" => self.guided_radius = parse(key, v)?,
            "guided_eps" => self.guided_eps = parse(key, v)?,
            "t_min" => self.t_min = parse(key, v)?,
            "refiner_width" => self.refiner_width = parse(key, v)?,
            "stem_channels" => self.stem_channels = parse(key, v)?,
            "stem_pool" => self.stem_pool = parse(key, v)?,
            "kan_widths" => {
                self.kan_widths = parse_list(key, v)?
                    .try_into()
                    .map_err(|_| Error::Config("kan_widths: expected 4 values".into()))?
            }
            "kan_scales" => {
                let levels: Vec<Vec<f64>> = v.split(';').map(|s| parse_list(key, s)).collect::<Result<_>>()?;
                self.kan_scales = levels
                    .try_into()
                    .map_err(|_| Error::Config("kan_scales: expected 3 `;`-separated levels".into()))?
            }
            "spline_coeffs" => self.spline_coeffs = parse(key, v)?,
            "spline_degree" => self.spline_degree = parse(key, v)?,
            "spline_lo" => self.spline_lo = parse(key, v)?,
            "spline_hi" => self.spline_hi = parse(key, v)?,
            "grid_h" => self.grid_h = parse(key, v)?,
            "grid_w" => self.grid_w = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "beta_e" => self.beta_e = parse(key, v)?,
            "decoder_channels" => self.decoder_channels = parse(key, v)?,
            "decoder_bias" => self.decoder_bias = parse(key, v)?,
            "density_scale" => self.density_scale = parse(key, v)?,
            "lambda_physics" => l.lambda_physics = parse(key, v)?,
            "lambda_reg" => l.lambda_reg = parse(key, v)?,
            "alpha_ssim" => l.alpha_ssim = parse(key, v)?,
            "lambda_weight" => l.lambda_weight = parse(key, v)?,
            "lambda_smooth" => l.lambda_smooth = parse(key, v)?,
            "lambda_edge" => l.lambda_edge = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_min" => self.lr_min = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "curriculum" => self.curriculum = parse(key, v)?,
            "train_a_lo" => self.train_a_lo = parse(key, v)?,
            "train_a_hi" => self.train_a_hi = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` overrides in place.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_bytes(path, self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.loss.validate()?;
        if self.height < 8 || self.width < 8 {
            return bad(format!("image size {}x{} below 8x8", self.height, self.width));
        }
        if self.stem_pool == 0 || self.height / self.stem_pool < self.grid_h || self.width / self.stem_pool < self.grid_w {
            return bad("stem output smaller than the node grid".into());
        }
        if self.kan_widths.contains(&0) {
            return bad("kan widths must be positive".into());
        }
        if self.kan_widths[0] != self.stem_channels {
            return bad(format!("kan_widths[0] = {} must equal stem_channels = {}", self.kan_widths[0], self.stem_channels));
        }
        if self.kan_scales.iter().any(|s| s.is_empty() || s.iter().any(|v| !(*v > 0.0))) {
            return bad("kan scales must be positive and nonempty".into());
        }
        if self.heads == 0 || self.kan_widths[3] % self.heads != 0 {
            return bad(format!("heads = {} must divide the node dim {}", self.heads, self.kan_widths[3]));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) || self.dcp_window % 2 == 0 {
            return bad("omega must lie in (0, 1] and dcp_window must be odd".into());
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) || !(self.guided_eps > 0.0) || self.guided_radius == 0 {
            return bad("invalid transmission settings".into());
        }
        if !(self.beta_max > 0.0) || !(self.tau > 0.0) || !(self.density_scale > 0.0) {
            return bad("beta_max, tau and density_scale must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("need 0 <= lr_min <= lr, lr > 0".into());
        }
        if self.batch == 0 || self.epochs == 0 || !(self.clip_norm > 0.0) {
            return bad("batch, epochs and clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid optimizer moments".into());
        }
        if !(0.0 <= self.train_a_lo && self.train_a_lo <= self.train_a_hi && self.train_a_hi <= 1.0) {
            return bad("invalid training airlight range".into());
        }
        Ok(())
    }
}
