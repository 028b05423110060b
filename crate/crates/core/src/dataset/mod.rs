//! Longitudinal B-scan hierarchy (eyes, visits, scans), sliding-window
//! samples, eye-level splits, PGM ingestion and the synthetic phantom.

mod image_io;
mod phantom;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::{Real, Tensor};

pub use image_io::{load_bscan, save_bscan};
pub use phantom::{generate_phantom, render_bscan, BandSpec, PhantomConfig, PhantomEye};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(shape_mismatch(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// `[0, 1]` to the `[-1, 1]` range the networks work in.
    pub fn to_network(&self) -> Vec<f32> {
        self.data.iter().map(|v| 2.0 * v - 1.0).collect()
    }

    /// Inverse of [`Image::to_network`], clamped into `[0, 1]`.
    pub fn from_network(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        Self::new(
            height,
            width,
            values.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Visit {
    /// Index parsed from the directory name; visits are kept sorted by it.
    pub index: usize,
    pub bscans: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Eye {
    pub id: u32,
    pub visits: Vec<Visit>,
}

impl Eye {
    pub fn n_bscans(&self) -> usize {
        self.visits.first().map_or(0, |v| v.bscans.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongitudinalDataset {
    pub eyes: Vec<Eye>,
}

pub const MANIFEST: &str = "manifest.txt";

pub fn eye_dir(id: u32) -> String {
    format!("eye_{id:03}")
}

pub fn visit_dir(k: usize) -> String {
    format!("visit_{k:02}")
}

pub fn bscan_file(j: usize) -> String {
    format!("bscan_{j:03}.pgm")
}

fn indexed_entries(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(digits) = name.strip_prefix(prefix).and_then(|s| s.strip_suffix(suffix)) else {
            continue;
        };
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        let idx = digits
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("index out of range in {}", entry.path().display())))?;
        out.push((idx, entry.path()));
    }
    out.sort();
    Ok(out)
}

fn read_manifest(root: &Path) -> Result<Option<BTreeMap<u32, (usize, usize)>>> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<&str> = line.split_whitespace().collect();
        let parsed: Option<(u32, usize, usize)> = match nums.as_slice() {
            [a, b, c] => a.parse().ok().zip(b.parse().ok()).zip(c.parse().ok()).map(|((a, b), c)| (a, b, c)),
            _ => None,
        };
        let (id, v, s) = parsed.ok_or_else(|| Error::DecodeError {
            path: path.clone(),
            reason: format!("line {}: expected `eye_id n_visits n_bscans`", n + 1),
        })?;
        out.insert(id, (v, s));
    }
    Ok(Some(out))
}

/// Walk `root/eye_<id>/visit_<k>/bscan_<j>.pgm`. Visits are sorted by
/// index regardless of directory order; every visit of an eye must hold
/// the same number of scans, and the manifest, when present, must agree
/// with the tree.
pub fn scan_dataset(root: &Path) -> Result<LongitudinalDataset> {
    if !root.is_dir() {
        return Err(Error::EmptyDataset(format!("{} is not a directory", root.display())));
    }
    let mut eyes = Vec::new();
    for (id, eye_path) in indexed_entries(root, "eye_", "")? {
        if !eye_path.is_dir() {
            continue;
        }
        let id = u32::try_from(id).map_err(|_| Error::InconsistentVolume(u32::MAX))?;
        let mut visits = Vec::new();
        for (k, visit_path) in indexed_entries(&eye_path, "visit_", "")? {
            if !visit_path.is_dir() {
                continue;
            }
            let scans = indexed_entries(&visit_path, "bscan_", ".pgm")?;
            if scans.iter().enumerate().any(|(j, (idx, _))| *idx != j) {
                return Err(Error::InconsistentVolume(id));
            }
            visits.push(Visit {
                index: k,
                bscans: scans.into_iter().map(|(_, p)| p).collect(),
            });
        }
        if visits.is_empty() {
            continue;
        }
        let s = visits[0].bscans.len();
        if s == 0 || visits.iter().any(|v| v.bscans.len() != s) {
            return Err(Error::InconsistentVolume(id));
        }
        eyes.push(Eye { id, visits });
    }
    if eyes.is_empty() {
        return Err(Error::EmptyDataset(format!("no eyes under {}", root.display())));
    }
    if let Some(manifest) = read_manifest(root)? {
        let found: BTreeMap<u32, (usize, usize)> =
            eyes.iter().map(|e| (e.id, (e.visits.len(), e.n_bscans()))).collect();
        for (id, counts) in manifest.iter() {
            if found.get(id) != Some(counts) {
                return Err(Error::InconsistentVolume(*id));
            }
        }
        if let Some(id) = found.keys().find(|id| !manifest.contains_key(id)) {
            return Err(Error::InconsistentVolume(*id));
        }
    }
    Ok(LongitudinalDataset { eyes })
}

impl LongitudinalDataset {
    /// Hierarchy with the given visit counts and `s` scans per visit. Paths
    /// point into a notional root and are never touched; useful for
    /// accounting checks.
    pub fn from_counts(visits_per_eye: &[usize], s: usize) -> Self {
        let eyes = visits_per_eye
            .iter()
            .enumerate()
            .map(|(i, &v)| Eye {
                id: i as u32,
                visits: (0..v)
                    .map(|k| Visit {
                        index: k,
                        bscans: (0..s)
                            .map(|j| PathBuf::from(eye_dir(i as u32)).join(visit_dir(k)).join(bscan_file(j)))
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        Self { eyes }
    }

    pub fn eye_ids(&self) -> Vec<u32> {
        self.eyes.iter().map(|e| e.id).collect()
    }

    pub fn manifest(&self) -> String {
        self.eyes
            .iter()
            .map(|e| format!("{} {} {}\n", e.id, e.visits.len(), e.n_bscans()))
            .collect()
    }

    fn subset(&self, ids: &[u32]) -> Self {
        Self {
            eyes: self.eyes.iter().filter(|e| ids.contains(&e.id)).cloned().collect(),
        }
    }
}

/// One training or evaluation pair: `n_in` consecutive visits of one eye at
/// scan index `bscan`, and the visit right after them as target. Visits are
/// positions in the eye's sorted visit list.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub eye: u32,
    pub bscan: usize,
    pub inputs: Vec<usize>,
    pub target: usize,
}

pub fn check_n_in(n_in: usize) -> Result<()> {
    if !(2..=3).contains(&n_in) {
        return Err(Error::InvalidConfig(format!("n_visits_in must be 2 or 3, got {n_in}")));
    }
    Ok(())
}

/// All sliding windows: an eye with `v` visits gives `max(0, v - n_in)`
/// windows per scan index.
pub fn make_samples(ds: &LongitudinalDataset, n_in: usize) -> Result<Vec<Sample>> {
    check_n_in(n_in)?;
    let mut out = Vec::new();
    for eye in &ds.eyes {
        let v = eye.visits.len();
        for start in 0..v.saturating_sub(n_in) {
            for j in 0..eye.n_bscans() {
                out.push(Sample {
                    eye: eye.id,
                    bscan: j,
                    inputs: (start..start + n_in).collect(),
                    target: start + n_in,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.75,
            val: 0.15,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.train) || !ok(self.val) || self.train + self.val > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "split fractions must lie in [0, 1] and sum to <= 1, got {} and {}",
                self.train, self.val
            )));
        }
        Ok(())
    }

    /// Eye counts `(train, val, test)` for `n` eyes.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let tr = (self.train * n as f64).floor() as usize;
        let va = (self.val * n as f64).floor() as usize;
        (tr, va, n - tr - va)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: LongitudinalDataset,
    pub val: LongitudinalDataset,
    pub test: LongitudinalDataset,
}

/// Seeded permutation of the eyes, cut by floored fractions with the
/// remainder going to test. Train and test must both end up non-empty.
pub fn split(ds: &LongitudinalDataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = ds.eyes.len();
    let (tr, va, te) = spec.counts(n);
    if n < 3 || tr == 0 || te == 0 {
        return Err(Error::TooFewEyes(format!(
            "{n} eyes give {tr}/{va}/{te} train/val/test eyes; need at least 3 eyes and non-empty train and test"
        )));
    }
    let mut ids = ds.eye_ids();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    Ok(Splits {
        train: ds.subset(&ids[..tr]),
        val: ds.subset(&ids[tr..tr + va]),
        test: ds.subset(&ids[tr + va..]),
    })
}

/// The last input frame, used unchanged as the prediction.
pub fn baseline_copy_last(frames: &[Image]) -> Image {
    frames.last().expect("a sample has at least one input frame").clone()
}

/// Every scan of a dataset decoded once and kept in memory.
#[derive(Clone, Debug, Default)]
pub struct ImageBank {
    images: HashMap<(u32, usize, usize), Image>,
    pub height: usize,
    pub width: usize,
}

impl ImageBank {
    pub fn load(ds: &LongitudinalDataset) -> Result<Self> {
        let mut bank = Self::default();
        for eye in &ds.eyes {
            for (pos, visit) in eye.visits.iter().enumerate() {
                for (j, path) in visit.bscans.iter().enumerate() {
                    bank.insert(eye.id, pos, j, load_bscan(path)?)?;
                }
            }
        }
        Ok(bank)
    }

    pub fn insert(&mut self, eye: u32, visit: usize, bscan: usize, img: Image) -> Result<()> {
        if self.images.is_empty() {
            self.height = img.height;
            self.width = img.width;
        } else if (img.height, img.width) != (self.height, self.width) {
            return Err(shape_mismatch(format!(
                "eye {eye} visit {visit} scan {bscan} is {}x{}, others are {}x{}",
                img.height, img.width, self.height, self.width
            )));
        }
        self.images.insert((eye, visit, bscan), img);
        Ok(())
    }

    pub fn get(&self, eye: u32, visit: usize, bscan: usize) -> Result<&Image> {
        self.images
            .get(&(eye, visit, bscan))
            .ok_or_else(|| Error::EmptyDataset(format!("eye {eye} visit {visit} scan {bscan} not loaded")))
    }

    pub fn frames(&self, s: &Sample) -> Result<Vec<Image>> {
        s.inputs.iter().map(|&v| self.get(s.eye, v, s.bscan).cloned()).collect()
    }

    pub fn target(&self, s: &Sample) -> Result<&Image> {
        self.get(s.eye, s.target, s.bscan)
    }

    /// Network-range tensors for a batch: frames `[b, 1, T, h, w]` and
    /// targets `[b, 1, h, w]`.
    pub fn batch<R: Real>(&self, samples: &[&Sample]) -> Result<(Tensor<R>, Tensor<R>)> {
        let t = samples.first().map_or(0, |s| s.inputs.len());
        let (h, w) = (self.height, self.width);
        let mut frames = Vec::with_capacity(samples.len() * t * h * w);
        let mut targets = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if s.inputs.len() != t {
                return Err(shape_mismatch("batch mixes samples with different frame counts"));
            }
            for &v in &s.inputs {
                frames.extend(self.get(s.eye, v, s.bscan)?.to_network().into_iter().map(|x| R::of(x as f64)));
            }
            targets.extend(self.target(s)?.to_network().into_iter().map(|x| R::of(x as f64)));
        }
        let b = samples.len();
        Ok((Tensor::new(&[b, 1, t, h, w], frames)?, Tensor::new(&[b, 1, h, w], targets)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        let ds = LongitudinalDataset::from_counts(&[4, 5, 2, 3], 61);
        assert_eq!(make_samples(&ds, 3).unwrap().len(), (1 + 2) * 61);
        assert_eq!(make_samples(&ds, 2).unwrap().len(), (2 + 3 + 1) * 61);
        assert!(matches!(make_samples(&ds, 4), Err(Error::InvalidConfig(_))));
        let s = &make_samples(&ds, 3).unwrap()[61];
        assert_eq!((s.eye, s.bscan, s.inputs.clone(), s.target), (1, 0, vec![0, 1, 2], 3));
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = LongitudinalDataset::from_counts(&[4; 20], 2);
        let spec = SplitSpec { seed: 9, ..Default::default() };
        let a = split(&ds, &spec).unwrap();
        assert_eq!((a.train.eyes.len(), a.val.eyes.len(), a.test.eyes.len()), (15, 3, 2));
        assert_eq!(a, split(&ds, &spec).unwrap());
        let other = split(&ds, &SplitSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.test.eye_ids(), other.test.eye_ids());
        let two = LongitudinalDataset::from_counts(&[4; 2], 2);
        assert!(matches!(split(&two, &spec), Err(Error::TooFewEyes(_))));
    }

    #[test]
    fn network_mapping() {
        let img = Image::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(img.to_network(), vec![-1.0, 0.0, 1.0]);
        let back = Image::from_network(1, 3, &[-1.5, 0.0, 1.0]).unwrap();
        assert_eq!(back.data, vec![0.0, 0.5, 1.0]);
    }
}
