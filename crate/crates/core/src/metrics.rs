//! SSIM, MSE and PSNR on single-channel images, plus per-pair reports.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::dataset::Image;
use crate::error::{shape_mismatch, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    /// Side of the square Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the intensities.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.window == 0 {
            return bad("ssim.window must be >= 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("ssim.sigma must be > 0, got {}", self.sigma));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return bad(format!("ssim.k1 and ssim.k2 must be > 0, got {} and {}", self.k1, self.k2));
        }
        if !(self.range > 0.0 && self.range.is_finite()) {
            return bad(format!("ssim.range must be > 0, got {}", self.range));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product
    /// and therefore also sums to one.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(shape_mismatch(format!(
            "images are {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Valid-mode separable filter of a row-major `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, t) in taps.iter().enumerate() {
            let src_row = &rows[(y + i) * ow..(y + i + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src_row) {
                *o += t * v;
            }
        }
    }
    out
}

/// Map of local SSIM values at every valid window position.
pub fn ssim_map(a: &Image, b: &Image, p: &SsimParams) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    p.validate()?;
    let (h, w) = (a.height, a.width);
    if h < p.window || w < p.window {
        return Err(Error::WindowTooLarge {
            window: p.window,
            height: h,
            width: w,
        });
    }
    let x: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
    let taps = p.taps();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|s| filter_valid(s, h, w, &taps));
    let (c1, c2) = (p.c1(), p.c2());
    Ok((0..mx.len())
        .map(|i| {
            let (ma, mb) = (mx[i], my[i]);
            let va = sxx[i] - ma * ma;
            let vb = syy[i] - mb * mb;
            let cov = sxy[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect())
}

/// Mean SSIM over all valid window positions. Not clamped.
pub fn ssim(a: &Image, b: &Image, p: &SsimParams) -> Result<f64> {
    let map = ssim_map(a, b, p)?;
    let mean = map.iter().sum::<f64>() / map.len() as f64;
    if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&mean) {
        return Err(Error::NumericalFailure(format!("ssim {mean} outside [-1, 1]")));
    }
    Ok(mean)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&u, &v)| {
            let d = u as f64 - v as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// PSNR in dB; identical images have no finite value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn from_mse(mse: f64, range: f64) -> Self {
        if mse == 0.0 {
            Psnr::Infinite
        } else {
            Psnr::Finite(10.0 * (range * range / mse).log10())
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

pub fn psnr(a: &Image, b: &Image, range: f64) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b)?, range))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub eye: u32,
    /// Visit index of the predicted (target) scan.
    pub visit: usize,
    pub bscan: usize,
    pub ssim: f64,
    pub mse: f64,
    pub psnr: Psnr,
}

impl EvalRow {
    pub fn compare(eye: u32, visit: usize, bscan: usize, pred: &Image, truth: &Image, p: &SsimParams) -> Result<Self> {
        let mse = mse(pred, truth)?;
        Ok(Self {
            eye,
            visit,
            bscan,
            ssim: ssim(pred, truth, p)?,
            mse,
            psnr: Psnr::from_mse(mse, p.range),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const EVAL_CSV_HEADER: &str = "eye,visit,bscan,ssim,mse,psnr";

impl EvalReport {
    pub fn mean_ssim(&self) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    /// Population standard deviation of the per-row SSIM.
    pub fn std_ssim(&self) -> f64 {
        let m = self.mean_ssim();
        let n = self.rows.len() as f64;
        (self.rows.iter().map(|r| (r.ssim - m).powi(2)).sum::<f64>() / n).sqrt()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{EVAL_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{},{}", r.eye, r.visit, r.bscan, r.ssim, r.mse, r.psnr)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidConfig(format!("evaluation csv: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(EVAL_CSV_HEADER) {
            return Err(bad("missing header".into()));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields in {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
            rows.push(EvalRow {
                eye: f[0].parse().map_err(|e| bad(format!("{:?}: {e}", f[0])))?,
                visit: int(f[1])?,
                bscan: int(f[2])?,
                ssim: num(f[3])?,
                mse: num(f[4])?,
                psnr: if f[5] == "inf" { Psnr::Infinite } else { Psnr::Finite(num(f[5])?) },
            });
        }
        Ok(Self { rows })
    }
}
