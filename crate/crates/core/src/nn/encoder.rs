use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{require, Block, Bound, Conv, Module, ParamStore, LEAKY_SLOPE};
use crate::tensor::Real;

/// 3D convolutional front end that fuses the stack of prior frames into a
/// single 2D feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatioTemporalEncoderConfig {
    pub n_frames: usize,
    pub feat_channels: usize,
    pub out_channels: usize,
}

impl SpatioTemporalEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 || self.feat_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "encoder needs >= 2 frames and >= 1 channel per stage, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Two 3D convolutions: `(3,3,3)` with same-padding and leaky ReLU, then
/// `(T,3,3)` with no depth padding, which collapses the time axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatioTemporalEncoder {
    pub cfg: SpatioTemporalEncoderConfig,
    stage1: Conv,
    stage2: Conv,
}

impl SpatioTemporalEncoder {
    pub fn build<R: Real>(
        cfg: SpatioTemporalEncoderConfig,
        store: &mut ParamStore<R>,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        let stage1 = Conv::new3d(store, &format!("{prefix}.conv1"), 1, cfg.feat_channels, [3, 3, 3], [1, 1, 1])?;
        let stage2 = Conv::new3d(
            store,
            &format!("{prefix}.conv2"),
            cfg.feat_channels,
            cfg.out_channels,
            [cfg.n_frames, 3, 3],
            [0, 1, 1],
        )?;
        Ok(Self { cfg, stage1, stage2 })
    }

    /// Standalone encoder with freshly initialized parameters.
    pub fn module<R: Real>(cfg: SpatioTemporalEncoderConfig, seed: u64) -> Result<Module<Self, R>> {
        let mut store = ParamStore::new();
        let layers = Self::build(cfg, &mut store, "encoder")?;
        store.init_weights(seed);
        Ok(Module { layers, store })
    }
}

impl Block for SpatioTemporalEncoder {
    /// `[b, 1, T, h, w]` to `[b, out_channels, h, w]`.
    fn forward<'t, R: Real>(&self, b: &mut Bound<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let s = x.shape();
        require(s.len() == 5 && s[1] == 1 && s[2] == self.cfg.n_frames, || {
            format!("encoder expects [b, 1, {}, h, w], got {s:?}", self.cfg.n_frames)
        })?;
        let h = self.stage1.forward(b, x)?.leaky_relu(LEAKY_SLOPE);
        let h = self.stage2.forward(b, h)?;
        h.reshape(&[s[0], self.cfg.out_channels, s[3], s[4]])
    }
}
