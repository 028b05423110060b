use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{mix_seed, require, BatchNorm, Block, Bound, Conv, ConvTranspose, Module, ParamStore, LEAKY_SLOPE};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout_rate: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 16,
            base_channels: 64,
            depth: 4,
            dropout_rate: 0.5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth != 4 {
            return Err(Error::InvalidConfig(format!(
                "U-Net depth must be 4, got {}",
                self.depth
            )));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::InvalidConfig("U-Net channel counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidRate(self.dropout_rate));
        }
        Ok(())
    }

    /// Output width of encoder stage `i` (0-based).
    pub fn encoder_width(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Output width of decoder stage `d` (0-based).
    pub fn decoder_width(&self, d: usize) -> usize {
        if d + 1 < self.depth {
            self.encoder_width(self.depth - 2 - d)
        } else {
            self.base_channels
        }
    }

    /// Spatial extents must survive `depth` halvings.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }
}

/// Wiring of one decoder stage, for inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderStage {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Encoder stage (0-based) whose features are concatenated to this
    /// stage's output before the next stage, if any.
    pub skip_from: Option<usize>,
    pub dropout: bool,
}

#[derive(Clone, Debug, PartialEq)]
struct Down {
    conv: Conv,
    norm: Option<BatchNorm>,
}

#[derive(Clone, Debug, PartialEq)]
struct Up {
    conv: ConvTranspose,
    norm: BatchNorm,
    dropout: bool,
}

/// Encoder-decoder with long skips: the output of encoder stage `i` is
/// concatenated to the output of the decoder stage at the mirrored
/// resolution. The innermost encoder output feeds the decoder directly.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub cfg: UNetConfig,
    down: Vec<Down>,
    up: Vec<Up>,
    head: Conv,
}

impl UNet {
    pub fn build<R: Real>(cfg: UNetConfig, store: &mut ParamStore<R>, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let mut down = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let c_in = if i == 0 { cfg.in_channels } else { cfg.encoder_width(i - 1) };
            let name = format!("{prefix}.down{i}");
            let conv = Conv::new2d(store, &format!("{name}.conv"), c_in, cfg.encoder_width(i), 4, 2, 1, i == 0)?;
            let norm = (i > 0)
                .then(|| BatchNorm::new(store, &format!("{name}.bn"), cfg.encoder_width(i)))
                .transpose()?;
            down.push(Down { conv, norm });
        }
        let plan = Self::plan(&cfg);
        let mut up = Vec::with_capacity(cfg.depth);
        for (d, stage) in plan.iter().enumerate() {
            let name = format!("{prefix}.up{d}");
            let conv = ConvTranspose::new(store, &format!("{name}.conv"), stage.in_channels, stage.out_channels, 4, 2, 1)?;
            let norm = BatchNorm::new(store, &format!("{name}.bn"), stage.out_channels)?;
            up.push(Up {
                conv,
                norm,
                dropout: stage.dropout,
            });
        }
        let head = Conv::new2d(store, &format!("{prefix}.head"), cfg.base_channels, 1, 3, 1, 1, true)?;
        Ok(Self { cfg, down, up, head })
    }

    pub fn module<R: Real>(cfg: UNetConfig, seed: u64) -> Result<Module<Self, R>> {
        let mut store = ParamStore::new();
        let layers = Self::build(cfg, &mut store, "unet")?;
        store.init_weights(seed);
        Ok(Module { layers, store })
    }

    fn plan(cfg: &UNetConfig) -> Vec<DecoderStage> {
        let depth = cfg.depth;
        (0..depth)
            .map(|d| {
                let in_channels = if d == 0 {
                    cfg.encoder_width(depth - 1)
                } else {
                    cfg.decoder_width(d - 1) + cfg.encoder_width(depth - 1 - d)
                };
                DecoderStage {
                    in_channels,
                    out_channels: cfg.decoder_width(d),
                    skip_from: (d + 1 < depth).then(|| depth - 2 - d),
                    dropout: d > 0 && d + 1 < depth,
                }
            })
            .collect()
    }

    pub fn decoder_plan(&self) -> Vec<DecoderStage> {
        Self::plan(&self.cfg)
    }
}

fn zeros_like<'t, R: Real>(x: Var<'t, R>) -> Result<Var<'t, R>> {
    Ok(x.tape().constant(Tensor::zeros(&x.shape())?))
}

impl Block for UNet {
    /// `[b, in_channels, h, w]` to `[b, 1, h, w]` in (-1, 1).
    fn forward<'t, R: Real>(&self, b: &mut Bound<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let s = x.shape();
        let div = self.cfg.divisor();
        require(s.len() == 4 && s[1] == self.cfg.in_channels, || {
            format!("U-Net expects [b, {}, h, w], got {s:?}", self.cfg.in_channels)
        })?;
        require(s[2].is_multiple_of(div) && s[3].is_multiple_of(div), || {
            format!("U-Net input extents {}x{} must be divisible by {div}", s[2], s[3])
        })?;

        let mut feats = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for stage in &self.down {
            h = stage.conv.forward(b, h)?;
            if let Some(norm) = &stage.norm {
                h = norm.forward(b, h)?;
            }
            h = h.leaky_relu(LEAKY_SLOPE);
            feats.push(h);
        }
        if let Some(i) = b.ctx.zero_skip {
            feats[i] = zeros_like(feats[i])?;
        }

        let mut h = feats[self.cfg.depth - 1];
        let plan = self.decoder_plan();
        for (d, (stage, wiring)) in self.up.iter().zip(&plan).enumerate() {
            h = stage.conv.forward(b, h)?;
            h = stage.norm.forward(b, h)?.relu();
            if stage.dropout && b.ctx.dropout {
                h = h.dropout(self.cfg.dropout_rate, mix_seed(b.dropout_seed(0x5EED), d as u64), true)?;
            }
            if let Some(src) = wiring.skip_from {
                h = h.concat_channels(feats[src])?;
            }
        }
        Ok(self.head.forward(b, h)?.tanh())
    }
}
