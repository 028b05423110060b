//! Network building blocks: a named parameter store, the layers the
//! generator and discriminator are made of, and the forward context that
//! selects dropout/batch-norm behaviour.

mod encoder;
mod generator;
mod patchgan;
mod unet;

pub use encoder::{SpatioTemporalEncoder, SpatioTemporalEncoderConfig};
pub use generator::{generator_forward, Generator, GeneratorConfig, GeneratorNet, Mode};
pub use patchgan::{
    discriminator_forward, receptive_field, Discriminator, PatchGan, PatchGanConfig,
};
pub use unet::{DecoderStage, UNet, UNetConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BnMode, Gradients, Tape, Var};
use crate::error::{shape_mismatch, Result};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Kernel,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<R: Real> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<R>,
}

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics), both addressed by stable unique names.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<R: Real = f32> {
    params: Vec<Param<R>>,
    buffers: Vec<(String, Tensor<R>)>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn check_unique(&self, name: &str) {
        assert!(
            self.params.iter().all(|p| p.name != name) && self.buffers.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
    }

    pub fn add_param(&mut self, name: String, kind: ParamKind, shape: &[usize]) -> Result<usize> {
        self.check_unique(&name);
        let tensor = Tensor::zeros(shape)?.with_grad(true);
        self.params.push(Param { name, kind, tensor });
        Ok(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: String, tensor: Tensor<R>) -> usize {
        self.check_unique(&name);
        self.buffers.push((name, tensor));
        self.buffers.len() - 1
    }

    pub fn params(&self) -> &[Param<R>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<R>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor<R>)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [(String, Tensor<R>)] {
        &mut self.buffers
    }

    /// Same store at another precision.
    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            buffers: self.buffers.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<R>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Conv kernels ~ N(0, 0.02), batch-norm gamma ~ N(1, 0.02), biases and
    /// beta zero. Reproducible per seed.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, INIT_STD).expect("valid std");
        for p in &mut self.params {
            let center = match p.kind {
                ParamKind::Kernel => Some(0.0),
                ParamKind::Gamma => Some(1.0),
                ParamKind::Bias | ParamKind::Beta => None,
            };
            for v in p.tensor.data_mut() {
                *v = match center {
                    Some(c) => R::of(c + noise.sample(&mut rng)),
                    None => R::zero(),
                };
            }
        }
        for (name, buf) in &mut self.buffers {
            let fill = if name.ends_with("running_var") { R::one() } else { R::zero() };
            buf.data_mut().iter_mut().for_each(|v| *v = fill);
        }
    }

    /// Record every parameter on `tape`. With `trainable = false` they are
    /// constants and receive no gradient.
    pub fn bind<'t>(&self, tape: &'t Tape<R>, trainable: bool) -> Vec<Var<'t, R>> {
        self.params
            .iter()
            .map(|p| {
                let t = p.tensor.clone().with_grad(trainable);
                tape.leaf(t)
            })
            .collect()
    }

    /// Copy the gradient of each bound parameter into its `grad` slot;
    /// parameters the loss does not reach get zeros.
    pub fn store_grads(&mut self, grads: &Gradients<R>, vars: &[Var<'_, R>]) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            p.tensor.grad = Some(grads.get_or_zero(*v).into_data());
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Drop the gradient slots entirely.
    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.grad = None);
    }
}

/// Where batch-norm takes its statistics from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormStats {
    Batch,
    Running,
}

/// Per-call switches for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardCtx {
    pub dropout: bool,
    pub dropout_seed: u64,
    pub norm: NormStats,
    pub update_running: bool,
    /// Zero the features of this encoder stage (0-based) where the U-Net
    /// consumes them. Diagnostic hook for skip-wiring checks.
    pub zero_skip: Option<usize>,
}

impl ForwardCtx {
    pub fn train(dropout_seed: u64) -> Self {
        Self {
            dropout: true,
            dropout_seed,
            norm: NormStats::Batch,
            update_running: true,
            zero_skip: None,
        }
    }

    /// Test-time protocol: dropout stays on and batch-norm keeps using
    /// current batch statistics, but running averages are left untouched.
    pub fn test(dropout_seed: u64) -> Self {
        Self {
            update_running: false,
            ..Self::train(dropout_seed)
        }
    }

    /// Conventional inference: no dropout, running statistics.
    pub fn eval() -> Self {
        Self {
            dropout: false,
            dropout_seed: 0,
            norm: NormStats::Running,
            update_running: false,
            zero_skip: None,
        }
    }
}

/// Parameters bound to a tape plus mutable access to buffers for one
/// forward pass.
pub struct Bound<'s, 't, R: Real> {
    vars: &'s [Var<'t, R>],
    buffers: &'s mut [(String, Tensor<R>)],
    pub ctx: ForwardCtx,
}

impl<'t, R: Real> Bound<'_, 't, R> {
    fn var(&self, idx: usize) -> Var<'t, R> {
        self.vars[idx]
    }

    fn dropout_seed(&self, tag: u64) -> u64 {
        mix_seed(self.ctx.dropout_seed, tag)
    }
}

/// SplitMix64-style combination of a seed with a stream tag.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub trait Block {
    fn forward<'t, R: Real>(&self, b: &mut Bound<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>>;
}

/// A block together with the parameters it owns.
#[derive(Clone, Debug, PartialEq)]
pub struct Module<L, R: Real = f32> {
    pub layers: L,
    pub store: ParamStore<R>,
}

impl<L: Block, R: Real> Module<L, R> {
    pub fn cast<S: Real>(&self) -> Module<L, S>
    where
        L: Clone,
    {
        Module {
            layers: self.layers.clone(),
            store: self.store.cast(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<R>, trainable: bool) -> Vec<Var<'t, R>> {
        self.store.bind(tape, trainable)
    }

    pub fn forward_bound<'t>(
        &mut self,
        vars: &[Var<'t, R>],
        x: Var<'t, R>,
        ctx: ForwardCtx,
    ) -> Result<Var<'t, R>> {
        assert_eq!(vars.len(), self.store.params.len(), "bound parameter count");
        let mut b = Bound {
            vars,
            buffers: &mut self.store.buffers,
            ctx,
        };
        self.layers.forward(&mut b, x)
    }

    /// Bind and run. Returns the output and the bound parameters.
    pub fn forward<'t>(
        &mut self,
        tape: &'t Tape<R>,
        x: Var<'t, R>,
        ctx: ForwardCtx,
        trainable: bool,
    ) -> Result<(Var<'t, R>, Vec<Var<'t, R>>)> {
        let vars = self.bind(tape, trainable);
        let y = self.forward_bound(&vars, x, ctx)?;
        Ok((y, vars))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Conv {
    weight: usize,
    bias: Option<usize>,
    stride: [usize; 3],
    pad: [usize; 3],
    rank: usize,
}

impl Conv {
    /// 2D conv with a square kernel.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new2d<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add_param(format!("{name}.weight"), ParamKind::Kernel, &[c_out, c_in, k, k])?;
        let bias = bias
            .then(|| store.add_param(format!("{name}.bias"), ParamKind::Bias, &[c_out]))
            .transpose()?;
        Ok(Self {
            weight,
            bias,
            stride: [1, stride, stride],
            pad: [0, pad, pad],
            rank: 2,
        })
    }

    pub(crate) fn new3d<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let weight = store.add_param(
            format!("{name}.weight"),
            ParamKind::Kernel,
            &[c_out, c_in, k[0], k[1], k[2]],
        )?;
        let bias = store.add_param(format!("{name}.bias"), ParamKind::Bias, &[c_out])?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride: [1, 1, 1],
            pad,
            rank: 3,
        })
    }

    pub(crate) fn forward<'t, R: Real>(&self, b: &Bound<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let bias = self.bias.map(|i| b.var(i));
        if self.rank == 3 {
            x.conv3d(b.var(self.weight), bias, self.stride, self.pad)
        } else {
            x.conv2d(b.var(self.weight), bias, self.stride[1], self.pad[1])
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvTranspose {
    weight: usize,
    stride: usize,
    pad: usize,
}

impl ConvTranspose {
    pub(crate) fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let weight = store.add_param(format!("{name}.weight"), ParamKind::Kernel, &[c_in, c_out, k, k])?;
        Ok(Self { weight, stride, pad })
    }

    pub(crate) fn forward<'t, R: Real>(&self, b: &Bound<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        x.conv_transpose2d(b.var(self.weight), None, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BatchNorm {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

impl BatchNorm {
    pub(crate) fn new<R: Real>(store: &mut ParamStore<R>, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add_param(format!("{name}.gamma"), ParamKind::Gamma, &[channels])?;
        let beta = store.add_param(format!("{name}.beta"), ParamKind::Beta, &[channels])?;
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])?);
        let running_var = store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])?);
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    pub(crate) fn forward<'t, R: Real>(&self, b: &mut Bound<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let (gamma, beta) = (b.var(self.gamma), b.var(self.beta));
        match b.ctx.norm {
            NormStats::Running => {
                let mean = b.buffers[self.running_mean].1.data().to_vec();
                let var = b.buffers[self.running_var].1.data().to_vec();
                let (y, _) = x.batch_norm(gamma, beta, BnMode::RunningStats { mean: &mean, var: &var }, BN_EPS)?;
                Ok(y)
            }
            NormStats::Batch => {
                let (y, moments) = x.batch_norm(gamma, beta, BnMode::BatchStats, BN_EPS)?;
                if b.ctx.update_running {
                    let m = moments.expect("batch statistics");
                    let momentum = R::of(BN_MOMENTUM);
                    let keep = R::one() - momentum;
                    let unbias = if m.count > 1 {
                        R::of(m.count as f64 / (m.count - 1) as f64)
                    } else {
                        R::one()
                    };
                    for (r, &v) in b.buffers[self.running_mean].1.data_mut().iter_mut().zip(&m.mean) {
                        *r = keep * *r + momentum * v;
                    }
                    for (r, &v) in b.buffers[self.running_var].1.data_mut().iter_mut().zip(&m.var) {
                        *r = keep * *r + momentum * v * unbias;
                    }
                }
                Ok(y)
            }
        }
    }
}

pub(crate) fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(shape_mismatch(msg()))
    }
}
