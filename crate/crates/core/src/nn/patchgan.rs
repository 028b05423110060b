use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{require, BatchNorm, Block, Bound, Conv, ForwardCtx, Module, ParamStore, LEAKY_SLOPE};
use crate::tensor::Real;

pub const PATCHGAN_KERNEL: usize = 4;
pub const PATCHGAN_STRIDES: [usize; 5] = [2, 2, 2, 1, 1];

/// Five-stage fully convolutional patch classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGanConfig {
    /// Conditioning frames plus one candidate channel.
    pub in_channels: usize,
    /// Width of the first stage; later stages use 2x, 4x, 8x, then 1.
    pub base_width: usize,
}

impl PatchGanConfig {
    pub fn for_frames(n_frames: usize, base_width: usize) -> Self {
        Self {
            in_channels: n_frames + 1,
            base_width,
        }
    }

    pub fn widths(&self) -> [usize; 5] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w, 1]
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&PATCHGAN_STRIDES, &[PATCHGAN_KERNEL; 5]).expect("non-empty plan")
    }

    /// Output map extent for an input extent, by the per-stage recurrence.
    pub fn output_extent(&self, n: usize) -> Option<usize> {
        PATCHGAN_STRIDES.iter().try_fold(n, |n, &s| {
            (n + 2 >= PATCHGAN_KERNEL).then(|| (n + 2 - PATCHGAN_KERNEL) / s + 1)
        })
    }
}

impl Default for PatchGanConfig {
    fn default() -> Self {
        Self::for_frames(3, 64)
    }
}

/// Receptive field of a conv stack, walking back from one output pixel:
/// `r <- (r - 1) * stride + kernel`.
pub fn receptive_field(strides: &[usize], kernels: &[usize]) -> Result<usize> {
    if strides.is_empty() || strides.len() != kernels.len() {
        return Err(Error::InvalidConfig(format!(
            "receptive_field needs equal-length non-empty lists, got {} strides and {} kernels",
            strides.len(),
            kernels.len()
        )));
    }
    Ok(strides
        .iter()
        .zip(kernels)
        .rev()
        .fold(1, |r, (&s, &k)| (r - 1) * s + k))
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    conv: Conv,
    norm: Option<BatchNorm>,
    act: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGan {
    pub cfg: PatchGanConfig,
    stages: Vec<Stage>,
}

impl PatchGan {
    pub fn build<R: Real>(cfg: PatchGanConfig, store: &mut ParamStore<R>, prefix: &str) -> Result<Self> {
        if cfg.in_channels < 2 || cfg.base_width == 0 {
            return Err(Error::InvalidConfig(format!("invalid PatchGAN config {cfg:?}")));
        }
        let widths = cfg.widths();
        let mut c_in = cfg.in_channels;
        let mut stages = Vec::with_capacity(5);
        for (i, (&w, &s)) in widths.iter().zip(&PATCHGAN_STRIDES).enumerate() {
            let name = format!("{prefix}.stage{i}");
            let has_norm = (1..=3).contains(&i);
            let conv = Conv::new2d(store, &format!("{name}.conv"), c_in, w, PATCHGAN_KERNEL, s, 1, !has_norm)?;
            let norm = has_norm
                .then(|| BatchNorm::new(store, &format!("{name}.bn"), w))
                .transpose()?;
            stages.push(Stage { conv, norm, act: i < 4 });
            c_in = w;
        }
        Ok(Self { cfg, stages })
    }
}

impl Block for PatchGan {
    /// `[b, in_channels, h, w]` to raw scores `[b, 1, h', w']`.
    fn forward<'t, R: Real>(&self, b: &mut Bound<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let s = x.shape();
        require(s.len() == 4 && s[1] == self.cfg.in_channels, || {
            format!("PatchGAN expects [b, {}, h, w], got {s:?}", self.cfg.in_channels)
        })?;
        let mut h = x;
        for stage in &self.stages {
            h = stage.conv.forward(b, h)?;
            if let Some(norm) = &stage.norm {
                h = norm.forward(b, h)?;
            }
            if stage.act {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        Ok(h)
    }
}

pub type Discriminator<R = f32> = Module<PatchGan, R>;

impl<R: Real> Discriminator<R> {
    pub fn new(cfg: PatchGanConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let layers = PatchGan::build(cfg, &mut store, "disc")?;
        store.init_weights(seed);
        Ok(Module { layers, store })
    }

    pub fn config(&self) -> PatchGanConfig {
        self.layers.cfg
    }
}

/// Score `candidate` conditioned on `frames`: the `T` frames become `T`
/// channels, the candidate is appended as one more, and the stack is fed
/// through the patch classifier.
pub fn discriminator_forward<'t, R: Real>(
    disc: &mut Discriminator<R>,
    vars: &[Var<'t, R>],
    frames: Var<'t, R>,
    candidate: Var<'t, R>,
    ctx: ForwardCtx,
) -> Result<Var<'t, R>> {
    let fs = frames.shape();
    let cs = candidate.shape();
    require(fs.len() == 5 && fs[1] == 1, || format!("frames must be [b, 1, T, h, w], got {fs:?}"))?;
    require(cs.len() == 4 && cs[1] == 1 && cs[0] == fs[0] && cs[2..] == fs[3..], || {
        format!("candidate {cs:?} does not match frames {fs:?}")
    })?;
    let flat = frames.reshape(&[fs[0], fs[2], fs[3], fs[4]])?;
    let input = flat.concat_channels(candidate)?;
    disc.forward_bound(vars, input, ctx)
}
