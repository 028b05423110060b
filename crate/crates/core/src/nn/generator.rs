use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{
    Block, Bound, ForwardCtx, Module, ParamStore, SpatioTemporalEncoder, SpatioTemporalEncoderConfig, UNet,
    UNetConfig,
};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_frames: usize,
    pub encoder_channels: usize,
    pub encoder_out_channels: usize,
    pub base_channels: usize,
    pub dropout_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_frames: 3,
            encoder_channels: 16,
            encoder_out_channels: 16,
            base_channels: 64,
            dropout_rate: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn encoder(&self) -> SpatioTemporalEncoderConfig {
        SpatioTemporalEncoderConfig {
            n_frames: self.n_frames,
            feat_channels: self.encoder_channels,
            out_channels: self.encoder_out_channels,
        }
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.encoder_out_channels,
            base_channels: self.base_channels,
            depth: 4,
            dropout_rate: self.dropout_rate,
        }
    }
}

/// Spatio-temporal encoder followed by the U-Net trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    pub cfg: GeneratorConfig,
    pub encoder: SpatioTemporalEncoder,
    pub unet: UNet,
}

impl Block for GeneratorNet {
    fn forward<'t, R: Real>(&self, b: &mut Bound<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let feats = self.encoder.forward(b, x)?;
        self.unet.forward(b, feats)
    }
}

pub type Generator<R = f32> = Module<GeneratorNet, R>;

impl<R: Real> Generator<R> {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = SpatioTemporalEncoder::build(cfg.encoder(), &mut store, "gen.encoder")?;
        let unet = UNet::build(cfg.unet(), &mut store, "gen.unet")?;
        store.init_weights(seed);
        Ok(Module {
            layers: GeneratorNet { cfg, encoder, unet },
            store,
        })
    }

    pub fn config(&self) -> GeneratorConfig {
        self.layers.cfg
    }
}

/// Train and test both keep dropout on and normalize by the current batch;
/// only training updates the running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// `frames` `[b, 1, T, h, w]` to a prediction `[b, 1, h, w]` in (-1, 1).
pub fn generator_forward<'t, R: Real>(
    gen: &mut Generator<R>,
    vars: &[Var<'t, R>],
    frames: Var<'t, R>,
    mode: Mode,
    dropout_seed: u64,
) -> Result<Var<'t, R>> {
    let ctx = match mode {
        Mode::Train => ForwardCtx::train(dropout_seed),
        Mode::Test => ForwardCtx::test(dropout_seed),
    };
    gen.forward_bound(vars, frames, ctx)
}
