//! Central finite-difference verification of the reverse pass.

use std::cell::RefCell;

use crate::autodiff::{BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    discriminator_forward, generator_forward, Discriminator, ForwardCtx, Generator, GeneratorConfig, Mode,
    ParamKind, ParamStore, PatchGanConfig,
};
use crate::objectives::{adversarial_term, l1_loss, LossKind};
use crate::tensor::{Real, Tensor};

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)` for
/// the scalar function `f` at `point`, using central differences with step
/// `eps`.
pub fn finite_diff_check<R, F>(f: F, point: &Tensor<R>, eps: f64) -> Result<f64>
where
    R: Real,
    F: for<'t> Fn(Var<'t, R>) -> Result<Var<'t, R>>,
{
    check_with_scale(&f, point, eps, 1.0)
}

/// Like [`finite_diff_check`] but multiplies the analytic gradient by
/// `grad_scale` before comparing; used to prove the checker catches faults.
fn check_with_scale<R, F>(f: &F, point: &Tensor<R>, eps: f64, grad_scale: f64) -> Result<f64>
where
    R: Real,
    F: for<'t> Fn(Var<'t, R>) -> Result<Var<'t, R>>,
{
    check_against(f, f, point, eps, grad_scale)
}

/// Analytic gradient of `f` (precision `R`) against central differences of
/// `oracle` (precision `Q`), which must compute the same function.
fn check_against<R, Q, F, G>(f: &F, oracle: &G, point: &Tensor<R>, eps: f64, grad_scale: f64) -> Result<f64>
where
    R: Real,
    Q: Real,
    F: for<'t> Fn(Var<'t, R>) -> Result<Var<'t, R>>,
    G: for<'t> Fn(Var<'t, Q>) -> Result<Var<'t, Q>>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.param(point.clone());
        let y = f(x)?;
        let grads = tape.backward(y)?;
        grads.get_or_zero(x)
    };
    let eval = |p: Tensor<Q>| -> Result<f64> {
        let tape = Tape::new();
        let v = oracle(tape.constant(p))?.item()?.f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NumericalFailure("function is not finite near the check point".into()))
        }
    };
    let base: Tensor<Q> = point.cast().with_grad(false);
    let step = Q::of(eps);
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = base.clone();
        plus.data_mut()[i] += step;
        let mut minus = base.clone();
        minus.data_mut()[i] -= step;
        let (hi, lo) = (plus.data()[i].f64(), minus.data()[i].f64());
        let numeric = (eval(plus)? - eval(minus)?) / (hi - lo);
        let a = analytic.data()[i].f64() * grad_scale;
        if !a.is_finite() {
            return Err(Error::NumericalFailure(format!("analytic gradient {i} is not finite")));
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// One line of the gradcheck report.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub precision: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

/// Acceptance threshold at a precision.
pub fn threshold_for<R: Real>() -> f64 {
    if R::NAME == "f64" {
        1e-4
    } else {
        1e-2
    }
}

fn step_for<R: Real>() -> f64 {
    if R::NAME == "f64" {
        1e-6
    } else {
        1e-2
    }
}

fn weights<R: Real>(shape: &[usize], seed: u64) -> Tensor<R> {
    Tensor::randn(shape, 0.0, 1.0, seed).expect("valid shape")
}

/// Random point with every coordinate at least `margin` away from zero, so
/// the kinks of ReLU-type functions are never straddled.
fn away_from_zero<R: Real>(shape: &[usize], seed: u64, margin: f64) -> Tensor<R> {
    weights::<R>(shape, seed).map(|v| {
        let m = R::of(margin);
        if v >= R::zero() {
            v + m
        } else {
            v - m
        }
    })
}

/// `sum(y * w)` for a fixed random `w`, making every output coordinate matter.
fn project<'t, R: Real>(y: Var<'t, R>, seed: u64) -> Result<Var<'t, R>> {
    let w = y.tape().constant(weights(&y.shape(), seed));
    Ok(y.mul(w)?.sum())
}

struct Suite<'a, R: Real> {
    fault: Option<&'a str>,
    results: Vec<CheckResult>,
    _r: std::marker::PhantomData<R>,
}

impl<R: Real> Suite<'_, R> {
    fn fault_scale(&self, name: &str) -> f64 {
        let hit = self
            .fault
            .is_some_and(|op| name == op || name.starts_with(&format!("{op}.")));
        if hit {
            1.5
        } else {
            1.0
        }
    }

    fn push(&mut self, name: &str, err: f64) {
        self.results.push(CheckResult {
            name: name.to_string(),
            precision: R::NAME,
            max_rel_error: err,
            threshold: threshold_for::<R>(),
        });
    }

    fn run<F>(&mut self, name: &str, point: Tensor<R>, eps: f64, f: F) -> Result<()>
    where
        F: for<'t> Fn(Var<'t, R>) -> Result<Var<'t, R>>,
    {
        let err = check_with_scale(&f, &point, eps, self.fault_scale(name))?;
        self.push(name, err);
        Ok(())
    }
}

/// Re-draw parameters at unit scale. With the 0.02 training init the tiny
/// networks carry activations around 1e-5, so every finite-difference step
/// would straddle a ReLU kink.
fn rescale_for_check<R: Real>(store: &mut ParamStore<R>, seed: u64) {
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        let shape = p.tensor.shape().to_vec();
        let fan = (p.tensor.len() / shape[0]).max(1) as f64;
        let (mean, std) = match p.kind {
            ParamKind::Kernel => (0.0, 1.0 / fan.sqrt()),
            ParamKind::Gamma => (1.0, 0.2),
            ParamKind::Bias | ParamKind::Beta => (0.0, 0.2),
        };
        let fresh = Tensor::<R>::randn(&shape, mean, std, seed + i as u64).expect("valid shape");
        p.tensor.data_mut().copy_from_slice(fresh.data());
    }
}

/// Tiny generator used by the end-to-end checks.
pub fn tiny_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        n_frames: 2,
        encoder_channels: 2,
        encoder_out_channels: 2,
        base_channels: 2,
        dropout_rate: 0.5,
    }
}

/// Run the finite-difference suite over every differentiable primitive and
/// both networks at precision `R`. `fault` names a check whose analytic
/// gradient is deliberately corrupted.
pub fn run_suite<R: Real>(fault: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut s = Suite::<R> {
        fault,
        results: Vec::new(),
        _r: std::marker::PhantomData,
    };
    let eps = step_for::<R>();

    // conv2d
    let x = weights::<R>(&[1, 2, 5, 5], 1);
    let k = weights::<R>(&[3, 2, 3, 3], 2);
    let b = weights::<R>(&[3], 3);
    {
        let (k, b) = (k.clone(), b.clone());
        s.run("conv2d.input", x.clone(), eps, move |v| {
            let t = v.tape();
            project(v.conv2d(t.constant(k.clone()), Some(t.constant(b.clone())), 2, 1)?, 10)
        })?;
    }
    {
        let (x, b) = (x.clone(), b.clone());
        s.run("conv2d.kernel", k.clone(), eps, move |v| {
            let t = v.tape();
            project(t.constant(x.clone()).conv2d(v, Some(t.constant(b.clone())), 2, 1)?, 10)
        })?;
    }
    s.run("conv2d.bias", b, eps, move |v| {
        let t = v.tape();
        project(t.constant(x.clone()).conv2d(t.constant(k.clone()), Some(v), 2, 1)?, 10)
    })?;

    // conv3d
    let x = weights::<R>(&[1, 1, 3, 4, 4], 4);
    let k = weights::<R>(&[2, 1, 2, 3, 3], 5);
    {
        let k = k.clone();
        s.run("conv3d.input", x.clone(), eps, move |v| {
            let t = v.tape();
            project(v.conv3d(t.constant(k.clone()), None, [1, 1, 1], [0, 1, 1])?, 11)
        })?;
    }
    s.run("conv3d.kernel", k, eps, move |v| {
        let t = v.tape();
        project(t.constant(x.clone()).conv3d(v, None, [1, 1, 1], [0, 1, 1])?, 11)
    })?;

    // conv_transpose2d
    let x = weights::<R>(&[1, 2, 3, 3], 6);
    let k = weights::<R>(&[2, 3, 4, 4], 7);
    let b = weights::<R>(&[3], 8);
    {
        let (k, b) = (k.clone(), b.clone());
        s.run("conv_transpose2d.input", x.clone(), eps, move |v| {
            let t = v.tape();
            project(v.conv_transpose2d(t.constant(k.clone()), Some(t.constant(b.clone())), 2, 1)?, 12)
        })?;
    }
    {
        let (x, b) = (x.clone(), b.clone());
        s.run("conv_transpose2d.kernel", k.clone(), eps, move |v| {
            let t = v.tape();
            project(t.constant(x.clone()).conv_transpose2d(v, Some(t.constant(b.clone())), 2, 1)?, 12)
        })?;
    }
    s.run("conv_transpose2d.bias", b, eps, move |v| {
        let t = v.tape();
        project(t.constant(x.clone()).conv_transpose2d(t.constant(k.clone()), Some(v), 2, 1)?, 12)
    })?;

    // batch_norm (batch statistics)
    let x = weights::<R>(&[3, 2, 3, 3], 9);
    let gamma = weights::<R>(&[2], 13).map(|v| v + R::one());
    let beta = weights::<R>(&[2], 14);
    {
        let (g, bt) = (gamma.clone(), beta.clone());
        s.run("batch_norm.input", x.clone(), eps, move |v| {
            let t = v.tape();
            let (y, _) = v.batch_norm(t.constant(g.clone()), t.constant(bt.clone()), BnMode::BatchStats, 1e-5)?;
            project(y, 15)
        })?;
    }
    {
        let (x, bt) = (x.clone(), beta.clone());
        s.run("batch_norm.gamma", gamma.clone(), eps, move |v| {
            let t = v.tape();
            let (y, _) = t.constant(x.clone()).batch_norm(v, t.constant(bt.clone()), BnMode::BatchStats, 1e-5)?;
            project(y, 15)
        })?;
    }
    s.run("batch_norm.beta", beta, eps, move |v| {
        let t = v.tape();
        let (y, _) = t.constant(x.clone()).batch_norm(t.constant(gamma.clone()), v, BnMode::BatchStats, 1e-5)?;
        project(y, 15)
    })?;

    // dropout (disabled path is the identity; enabled uses a fixed mask)
    let x = weights::<R>(&[4, 25], 16);
    s.run("dropout.disabled", x.clone(), eps, |v| project(v.dropout(0.5, 3, false)?, 17))?;
    s.run("dropout.fixed_mask", x, eps, |v| project(v.dropout(0.5, 3, true)?, 17))?;

    // activations
    let x = away_from_zero::<R>(&[100], 18, 0.05);
    s.run("relu", x.clone(), eps, |v| project(v.relu(), 19))?;
    s.run("leaky_relu", x.clone(), eps, |v| project(v.leaky_relu(0.2), 19))?;
    s.run("tanh", x.clone(), eps, |v| project(v.tanh(), 19))?;
    s.run("sigmoid", x, eps, |v| project(v.sigmoid(), 19))?;

    // concat
    let a = weights::<R>(&[2, 2, 3, 3], 20);
    let b = weights::<R>(&[2, 3, 3, 3], 21);
    {
        let b = b.clone();
        s.run("concat_channels.first", a.clone(), eps, move |v| {
            project(v.concat_channels(v.tape().constant(b.clone()))?, 22)
        })?;
    }
    s.run("concat_channels.second", b, eps, move |v| {
        project(v.tape().constant(a.clone()).concat_channels(v)?, 22)
    })?;

    // losses
    let pred = away_from_zero::<R>(&[1, 1, 4, 4], 23, 0.05);
    s.run("l1_loss", pred.clone(), eps, |v| {
        l1_loss(v, v.tape().constant(Tensor::zeros(&v.shape())?))
    })?;
    s.run("adversarial.mse", pred.clone(), eps, |v| Ok(adversarial_term(LossKind::Mse, v, 1.0)))?;
    s.run("adversarial.bce", pred, eps, |v| Ok(adversarial_term(LossKind::Bce, v, 0.0)))?;

    network_checks(&mut s)?;
    Ok(s.results)
}

fn generator_objective<'t, R: Real>(
    gen: &RefCell<Generator<R>>,
    frames: Var<'t, R>,
    replace: Option<(usize, Var<'t, R>)>,
) -> Result<Var<'t, R>> {
    let mut g = gen.borrow_mut();
    let mut vars = g.bind(frames.tape(), false);
    if let Some((i, p)) = replace {
        vars[i] = p;
    }
    let out = generator_forward(&mut g, &vars, frames, Mode::Test, 33)?;
    project(out, 34)
}

fn discriminator_objective<'t, R: Real>(
    disc: &RefCell<Discriminator<R>>,
    frames: &Tensor<R>,
    candidate: Var<'t, R>,
    replace: Option<(usize, Var<'t, R>)>,
) -> Result<Var<'t, R>> {
    let tape = candidate.tape();
    let mut d = disc.borrow_mut();
    let mut vars = d.bind(tape, false);
    if let Some((i, p)) = replace {
        vars[i] = p;
    }
    let ctx = ForwardCtx {
        update_running: false,
        ..ForwardCtx::train(0)
    };
    let fv = tape.constant(frames.clone());
    project(discriminator_forward(&mut d, &vars, fv, candidate, ctx)?, 36)
}

/// End-to-end checks: each network is differentiated w.r.t. its input and
/// every parameter tensor; the worst coordinate is reported as one line.
/// The reference differences are always taken in f64 at the same point: a
/// 32-bit step large enough to beat rounding straddles ReLU kinks somewhere
/// in a network this deep.
fn network_checks<R: Real>(s: &mut Suite<'_, R>) -> Result<()> {
    let eps = 1e-6;
    let gcfg = tiny_generator_config();
    let (h, w) = (32, 32);
    let frames = weights::<R>(&[2, 1, gcfg.n_frames, h, w], 30).map(|v| v.tanh());
    let candidate = weights::<R>(&[2, 1, h, w], 31).map(|v| v.tanh());
    let frames64: Tensor<f64> = frames.cast();

    let mut g = Generator::<R>::new(gcfg, 32)?;
    rescale_for_check(&mut g.store, 100);
    let gen64 = RefCell::new(g.cast::<f64>());
    let gen = RefCell::new(g);
    let scale = s.fault_scale("generator");
    let mut worst = check_against(
        &|v| generator_objective(&gen, v, None),
        &|v| generator_objective(&gen64, v, None),
        &frames,
        eps,
        scale,
    )?;
    let n = gen.borrow().store.params().len();
    for i in 0..n {
        let point = gen.borrow().store.params()[i].tensor.clone().with_grad(false);
        let err = check_against(
            &|p| generator_objective(&gen, p.tape().constant(frames.clone()), Some((i, p))),
            &|p| generator_objective(&gen64, p.tape().constant(frames64.clone()), Some((i, p))),
            &point,
            eps,
            scale,
        )?;
        worst = worst.max(err);
    }
    s.push("generator", worst);

    let dcfg = PatchGanConfig::for_frames(gcfg.n_frames, 2);
    let mut d = Discriminator::<R>::new(dcfg, 35)?;
    rescale_for_check(&mut d.store, 200);
    let disc64 = RefCell::new(d.cast::<f64>());
    let disc = RefCell::new(d);
    let candidate64: Tensor<f64> = candidate.cast();
    let scale = s.fault_scale("discriminator");
    let mut worst = check_against(
        &|v| discriminator_objective(&disc, &frames, v, None),
        &|v| discriminator_objective(&disc64, &frames64, v, None),
        &candidate,
        eps,
        scale,
    )?;
    let n = disc.borrow().store.params().len();
    for i in 0..n {
        let point = disc.borrow().store.params()[i].tensor.clone().with_grad(false);
        let err = check_against(
            &|p| discriminator_objective(&disc, &frames, p.tape().constant(candidate.clone()), Some((i, p))),
            &|p| discriminator_objective(&disc64, &frames64, p.tape().constant(candidate64.clone()), Some((i, p))),
            &point,
            eps,
            scale,
        )?;
        worst = worst.max(err);
    }
    s.push("discriminator", worst);
    Ok(())
}
