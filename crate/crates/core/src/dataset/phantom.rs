//! Synthetic longitudinal B-scans: horizontal retinal bands bent by a
//! foveal pit, one band thinning from visit to visit, multiplicative speckle.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{bscan_file, eye_dir, save_bscan, visit_dir, Image, LongitudinalDataset, MANIFEST};
use crate::error::{Error, Result};
use crate::nn::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandSpec {
    pub intensity: f64,
    /// Thickness in pixels at visit 0.
    pub thickness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub n_eyes: usize,
    pub visits_min: usize,
    pub visits_max: usize,
    pub n_bscans: usize,
    pub height: usize,
    pub width: usize,
    /// Top to bottom.
    pub bands: Vec<BandSpec>,
    /// Index of the band that thins over visits.
    pub thinning_band: usize,
    /// Bands `0..pit_bands` are pushed down by the pit; the boundary below
    /// them stays put.
    pub pit_bands: usize,
    pub pit_depth: f64,
    /// Gaussian sigma of the pit across columns, in pixels.
    pub pit_width: f64,
    /// Gaussian sigma of the pit across scan indices.
    pub pit_scan_sigma: f64,
    /// Row of the inner surface away from the pit.
    pub surface_row: f64,
    /// Per-eye uniform jitter of the surface row, +-pixels.
    pub surface_jitter: f64,
    /// Thinning rate range, pixels per visit.
    pub rate_min: f64,
    pub rate_max: f64,
    /// Floor for the thinning band.
    pub t_min: f64,
    pub noise_std: f64,
    pub background: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let band = |intensity, thickness| BandSpec { intensity, thickness };
        Self {
            n_eyes: 20,
            visits_min: 5,
            visits_max: 5,
            n_bscans: 8,
            height: 64,
            width: 128,
            bands: vec![
                band(0.85, 5.0),
                band(0.45, 10.0),
                band(0.7, 4.0),
                band(0.3, 4.0),
                band(0.6, 3.0),
                band(0.2, 9.0),
                band(0.95, 4.0),
                band(0.55, 7.0),
            ],
            thinning_band: 1,
            pit_bands: 5,
            pit_depth: 8.0,
            pit_width: 14.0,
            pit_scan_sigma: 2.5,
            surface_row: 12.0,
            surface_jitter: 2.0,
            rate_min: 0.5,
            rate_max: 1.5,
            t_min: 2.0,
            noise_std: 0.05,
            background: 0.05,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("phantom: {m}")));
        if self.n_eyes == 0 || self.n_bscans == 0 {
            return bad("n_eyes and n_bscans must be >= 1".into());
        }
        if self.visits_min == 0 || self.visits_min > self.visits_max {
            return bad(format!("visit range [{}, {}] is empty", self.visits_min, self.visits_max));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return bad(format!("height {} and width {} must be positive multiples of 16", self.height, self.width));
        }
        if self.bands.is_empty() {
            return bad("at least one band is required".into());
        }
        for (i, b) in self.bands.iter().enumerate() {
            if !(b.thickness > 0.0 && b.thickness.is_finite()) {
                return bad(format!("band {i} thickness {} must be > 0", b.thickness));
            }
            if !(0.0..=1.0).contains(&b.intensity) {
                return bad(format!("band {i} intensity {} outside [0, 1]", b.intensity));
            }
        }
        if self.thinning_band >= self.bands.len() {
            return bad(format!("thinning_band {} out of range", self.thinning_band));
        }
        if self.pit_bands > self.bands.len() {
            return bad(format!("pit_bands {} exceeds the band count", self.pit_bands));
        }
        if self.t_min.is_nan() || self.t_min < 1.0 {
            return bad(format!("t_min {} must be >= 1 pixel", self.t_min));
        }
        if !(0.0 <= self.rate_min && self.rate_min <= self.rate_max && self.rate_max.is_finite()) {
            return bad(format!("rate range [{}, {}] is invalid", self.rate_min, self.rate_max));
        }
        let non_neg = [
            ("pit_depth", self.pit_depth),
            ("surface_jitter", self.surface_jitter),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in non_neg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be finite and >= 0"));
            }
        }
        if !(self.pit_width > 0.0 && self.pit_scan_sigma > 0.0) {
            return bad("pit widths must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.background) {
            return bad(format!("background {} outside [0, 1]", self.background));
        }
        Ok(())
    }

    /// Per-eye draws, fixed by `(seed, eye)`.
    pub fn eye(&self, id: u32) -> PhantomEye {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, id as u64));
        let n_visits = rng.random_range(self.visits_min..=self.visits_max);
        let rate = if self.rate_max > self.rate_min {
            rng.random_range(self.rate_min..=self.rate_max)
        } else {
            self.rate_min
        };
        let jitter = if self.surface_jitter > 0.0 {
            rng.random_range(-self.surface_jitter..=self.surface_jitter)
        } else {
            0.0
        };
        PhantomEye {
            id,
            n_visits,
            rate,
            surface_row: self.surface_row + jitter,
        }
    }

    /// Thickness of the thinning band at visit `v` for an eye thinning at `rate`.
    pub fn thinning_thickness(&self, rate: f64, v: usize) -> f64 {
        (self.bands[self.thinning_band].thickness - rate * v as f64).max(self.t_min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomEye {
    pub id: u32,
    pub n_visits: usize,
    pub rate: f64,
    pub surface_row: f64,
}

/// Noise-free scan `j` of visit `v`, plus speckle when `noise_seed` is given.
pub fn render_bscan(cfg: &PhantomConfig, eye: &PhantomEye, v: usize, j: usize, noise_seed: Option<u64>) -> Image {
    let (h, w) = (cfg.height, cfg.width);
    let thick: Vec<f64> = cfg
        .bands
        .iter()
        .enumerate()
        .map(|(k, b)| {
            if k == cfg.thinning_band {
                cfg.thinning_thickness(eye.rate, v)
            } else {
                b.thickness
            }
        })
        .collect();
    let mut base = Vec::with_capacity(thick.len() + 1);
    base.push(eye.surface_row);
    for t in &thick {
        base.push(base.last().unwrap() + t);
    }
    let pit_span = base[cfg.pit_bands] - base[0];
    let jc = (cfg.n_bscans as f64 - 1.0) / 2.0;
    let scan_fall = (-(j as f64 - jc).powi(2) / (2.0 * cfg.pit_scan_sigma.powi(2))).exp();
    let cx = w as f64 / 2.0;

    let mut data = vec![0f32; h * w];
    let mut bounds = base.clone();
    for x in 0..w {
        let dx = x as f64 + 0.5 - cx;
        let dip = cfg.pit_depth * scan_fall * (-dx * dx / (2.0 * cfg.pit_width.powi(2))).exp();
        for k in 0..cfg.pit_bands.min(base.len()) {
            let frac = if pit_span > 0.0 { (base[k] - base[0]) / pit_span } else { 0.0 };
            bounds[k] = base[k] + dip * (1.0 - frac);
        }
        let mut band = 0usize;
        for y in 0..h {
            let c = y as f64 + 0.5;
            while band < bounds.len() && bounds[band] <= c {
                band += 1;
            }
            // band == 0: above the surface; band == len: below the stack.
            let val = if band == 0 || band == bounds.len() {
                cfg.background
            } else {
                cfg.bands[band - 1].intensity
            };
            data[y * w + x] = val as f32;
        }
    }
    if let (Some(seed), true) = (noise_seed, cfg.noise_std > 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.noise_std).expect("validated std");
        for px in data.iter_mut() {
            let n: f64 = normal.sample(&mut rng);
            *px = ((*px as f64) * (1.0 + n)).clamp(0.0, 1.0) as f32;
        }
    }
    Image {
        height: h,
        width: w,
        data,
    }
}

pub(crate) fn noise_seed(cfg: &PhantomConfig, eye: u32, v: usize, j: usize) -> u64 {
    mix_seed(mix_seed(mix_seed(cfg.seed ^ 0x5e_ed0f_5ca7, eye as u64), v as u64), j as u64)
}

/// Write the full tree under `root` together with its manifest and return
/// the per-eye draws. Existing files are overwritten.
pub fn generate_phantom(cfg: &PhantomConfig, root: &Path) -> Result<Vec<PhantomEye>> {
    cfg.validate()?;
    let eyes: Vec<PhantomEye> = (0..cfg.n_eyes as u32).map(|id| cfg.eye(id)).collect();
    for e in &eyes {
        for v in 0..e.n_visits {
            let dir = root.join(eye_dir(e.id)).join(visit_dir(v));
            fs::create_dir_all(&dir)?;
            for j in 0..cfg.n_bscans {
                let img = render_bscan(cfg, e, v, j, Some(noise_seed(cfg, e.id, v, j)));
                save_bscan(&img, &dir.join(bscan_file(j)))?;
            }
        }
    }
    let counts: Vec<usize> = eyes.iter().map(|e| e.n_visits).collect();
    fs::write(
        root.join(MANIFEST),
        LongitudinalDataset::from_counts(&counts, cfg.n_bscans).manifest(),
    )?;
    Ok(eyes)
}
