//! Flat `key=value` run configuration. Every field has an explicit key;
//! unknown keys are errors.
//!
//! Training keys are bare (`epochs`, `lr_g`, ...); the split, SSIM and
//! phantom settings live under `split.`, `ssim.` and `phantom.`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{check_n_in, BandSpec, PhantomConfig, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::SsimParams;
use crate::nn::{GeneratorConfig, PatchGanConfig};
use crate::objectives::LossKind;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Prior visits fed to the generator: 3 or 2.
    pub n_visits_in: usize,
    pub batch_size: usize,
    pub g_steps_per_cycle: usize,
    pub d_steps_per_cycle: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: u64,
    pub alpha: f64,
    pub loss: LossKind,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    pub disc_base_width: usize,
    pub encoder_channels: usize,
    pub encoder_out_channels: usize,
    pub dropout_rate: f64,
    /// Samples per prediction batch at evaluation time; batch-norm uses
    /// the statistics of each such batch.
    pub eval_batch_size: usize,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_visits_in: 2,
            batch_size: 8,
            g_steps_per_cycle: 4,
            d_steps_per_cycle: 1,
            epochs: 50,
            max_steps: 0,
            alpha: 100.0,
            loss: LossKind::Mse,
            lr_g: 2e-4,
            lr_d: 2e-4,
            seed: 0,
            height: 64,
            width: 128,
            base_channels: 16,
            disc_base_width: 16,
            encoder_channels: 16,
            encoder_out_channels: 16,
            dropout_rate: 0.5,
            eval_batch_size: 8,
            eval_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        check_n_in(self.n_visits_in)?;
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("g_steps_per_cycle", self.g_steps_per_cycle),
            ("base_channels", self.base_channels),
            ("disc_base_width", self.disc_base_width),
            ("encoder_channels", self.encoder_channels),
            ("encoder_out_channels", self.encoder_out_channels),
            ("eval_batch_size", self.eval_batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return bad(format!(
                "height {} and width {} must be positive multiples of 16",
                self.height, self.width
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            n_frames: self.n_visits_in,
            encoder_channels: self.encoder_channels,
            encoder_out_channels: self.encoder_out_channels,
            base_channels: self.base_channels,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn discriminator(&self) -> PatchGanConfig {
        PatchGanConfig::for_frames(self.n_visits_in, self.disc_base_width)
    }
}

/// Everything a subcommand needs, as one flat key space.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub ssim: SsimParams,
    pub phantom: PhantomConfig,
    pub dataset_root: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("{key}={value}: {e}")))
}

fn parse_bands(key: &str, value: &str) -> Result<Vec<BandSpec>> {
    value
        .split(',')
        .map(|item| {
            let (i, t) = item.split_once(':').ok_or_else(|| {
                Error::InvalidConfig(format!("{key}={value}: expected intensity:thickness pairs"))
            })?;
            Ok(BandSpec {
                intensity: parse(key, i.trim())?,
                thickness: parse(key, t.trim())?,
            })
        })
        .collect()
}

impl RunConfig {
    /// Set one key. Unknown keys and unparsable values are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, v) = (key.trim(), value.trim());
        let t = &mut self.train;
        let p = &mut self.phantom;
        match k {
            "n_visits_in" => t.n_visits_in = parse(k, v)?,
            "batch_size" => t.batch_size = parse(k, v)?,
            "g_steps_per_cycle" => t.g_steps_per_cycle = parse(k, v)?,
            "d_steps_per_cycle" => t.d_steps_per_cycle = parse(k, v)?,
            "epochs" => t.epochs = parse(k, v)?,
            "max_steps" => t.max_steps = parse(k, v)?,
            "alpha" => t.alpha = parse(k, v)?,
            "loss" => t.loss = parse(k, v)?,
            "lr_g" => t.lr_g = parse(k, v)?,
            "lr_d" => t.lr_d = parse(k, v)?,
            "seed" => t.seed = parse(k, v)?,
            "height" => t.height = parse(k, v)?,
            "width" => t.width = parse(k, v)?,
            "base_channels" => t.base_channels = parse(k, v)?,
            "disc_base_width" => t.disc_base_width = parse(k, v)?,
            "encoder_channels" => t.encoder_channels = parse(k, v)?,
            "encoder_out_channels" => t.encoder_out_channels = parse(k, v)?,
            "dropout_rate" => t.dropout_rate = parse(k, v)?,
            "eval_batch_size" => t.eval_batch_size = parse(k, v)?,
            "eval_seed" => t.eval_seed = parse(k, v)?,
            "dataset_root" => self.dataset_root = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "split.train" => self.split.train = parse(k, v)?,
            "split.val" => self.split.val = parse(k, v)?,
            "split.seed" => self.split.seed = parse(k, v)?,
            "ssim.window" => self.ssim.window = parse(k, v)?,
            "ssim.sigma" => self.ssim.sigma = parse(k, v)?,
            "ssim.k1" => self.ssim.k1 = parse(k, v)?,
            "ssim.k2" => self.ssim.k2 = parse(k, v)?,
            "ssim.range" => self.ssim.range = parse(k, v)?,
            "phantom.n_eyes" => p.n_eyes = parse(k, v)?,
            "phantom.visits_min" => p.visits_min = parse(k, v)?,
            "phantom.visits_max" => p.visits_max = parse(k, v)?,
            "phantom.n_bscans" => p.n_bscans = parse(k, v)?,
            "phantom.height" => p.height = parse(k, v)?,
            "phantom.width" => p.width = parse(k, v)?,
            "phantom.bands" => p.bands = parse_bands(k, v)?,
            "phantom.thinning_band" => p.thinning_band = parse(k, v)?,
            "phantom.pit_bands" => p.pit_bands = parse(k, v)?,
            "phantom.pit_depth" => p.pit_depth = parse(k, v)?,
            "phantom.pit_width" => p.pit_width = parse(k, v)?,
            "phantom.pit_scan_sigma" => p.pit_scan_sigma = parse(k, v)?,
            "phantom.surface_row" => p.surface_row = parse(k, v)?,
            "phantom.surface_jitter" => p.surface_jitter = parse(k, v)?,
            "phantom.rate_min" => p.rate_min = parse(k, v)?,
            "phantom.rate_max" => p.rate_max = parse(k, v)?,
            "phantom.t_min" => p.t_min = parse(k, v)?,
            "phantom.noise_std" => p.noise_std = parse(k, v)?,
            "phantom.background" => p.background = parse(k, v)?,
            "phantom.seed" => p.seed = parse(k, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, sorted by key.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let t = &self.train;
        let p = &self.phantom;
        let bands = p
            .bands
            .iter()
            .map(|b| format!("{}:{}", b.intensity, b.thickness))
            .collect::<Vec<_>>()
            .join(",");
        let root = self
            .dataset_root
            .as_ref()
            .map_or(String::new(), |r| r.display().to_string());
        BTreeMap::from([
            ("n_visits_in", t.n_visits_in.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("g_steps_per_cycle", t.g_steps_per_cycle.to_string()),
            ("d_steps_per_cycle", t.d_steps_per_cycle.to_string()),
            ("epochs", t.epochs.to_string()),
            ("max_steps", t.max_steps.to_string()),
            ("alpha", t.alpha.to_string()),
            ("loss", t.loss.to_string()),
            ("lr_g", t.lr_g.to_string()),
            ("lr_d", t.lr_d.to_string()),
            ("seed", t.seed.to_string()),
            ("height", t.height.to_string()),
            ("width", t.width.to_string()),
            ("base_channels", t.base_channels.to_string()),
            ("disc_base_width", t.disc_base_width.to_string()),
            ("encoder_channels", t.encoder_channels.to_string()),
            ("encoder_out_channels", t.encoder_out_channels.to_string()),
            ("dropout_rate", t.dropout_rate.to_string()),
            ("eval_batch_size", t.eval_batch_size.to_string()),
            ("eval_seed", t.eval_seed.to_string()),
            ("dataset_root", root),
            ("split.train", self.split.train.to_string()),
            ("split.val", self.split.val.to_string()),
            ("split.seed", self.split.seed.to_string()),
            ("ssim.window", self.ssim.window.to_string()),
            ("ssim.sigma", self.ssim.sigma.to_string()),
            ("ssim.k1", self.ssim.k1.to_string()),
            ("ssim.k2", self.ssim.k2.to_string()),
            ("ssim.range", self.ssim.range.to_string()),
            ("phantom.n_eyes", p.n_eyes.to_string()),
            ("phantom.visits_min", p.visits_min.to_string()),
            ("phantom.visits_max", p.visits_max.to_string()),
            ("phantom.n_bscans", p.n_bscans.to_string()),
            ("phantom.height", p.height.to_string()),
            ("phantom.width", p.width.to_string()),
            ("phantom.bands", bands),
            ("phantom.thinning_band", p.thinning_band.to_string()),
            ("phantom.pit_bands", p.pit_bands.to_string()),
            ("phantom.pit_depth", p.pit_depth.to_string()),
            ("phantom.pit_width", p.pit_width.to_string()),
            ("phantom.pit_scan_sigma", p.pit_scan_sigma.to_string()),
            ("phantom.surface_row", p.surface_row.to_string()),
            ("phantom.surface_jitter", p.surface_jitter.to_string()),
            ("phantom.rate_min", p.rate_min.to_string()),
            ("phantom.rate_max", p.rate_max.to_string()),
            ("phantom.t_min", p.t_min.to_string()),
            ("phantom.noise_std", p.noise_std.to_string()),
            ("phantom.background", p.background.to_string()),
            ("phantom.seed", p.seed.to_string()),
        ])
    }

    /// Canonical text: one `key=value` line per key, sorted.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Apply `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Apply a `key=value` override such as one given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override {pair:?} is not key=value")))?;
        self.set(k, v)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.split.validate()?;
        self.ssim.validate()?;
        self.phantom.validate()
    }
}
