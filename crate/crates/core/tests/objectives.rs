use octgan_core::nn::{generator_forward, Discriminator, Generator, GeneratorConfig, Mode, PatchGanConfig};
use octgan_core::objectives::{
    adversarial_term, discriminator_loss, discriminator_loss_from_scores, generator_loss, LossKind,
};
use octgan_core::{Tape, Tensor};

const H: usize = 32;
const W: usize = 64;

/// A discriminator whose last stage ignores its input and emits `score`.
fn constant_disc(score: f64) -> Discriminator<f64> {
    let mut d = Discriminator::<f64>::new(PatchGanConfig::for_frames(2, 4), 0).unwrap();
    d.store.param_mut("disc.stage4.conv.weight").unwrap().data_mut().fill(0.0);
    d.store.param_mut("disc.stage4.conv.bias").unwrap().data_mut().fill(score);
    d
}

fn frames() -> Tensor<f64> {
    Tensor::randn(&[2, 1, 2, H, W], 0.0, 0.5, 1).unwrap()
}

fn target() -> Tensor<f64> {
    Tensor::randn(&[2, 1, H, W], 0.0, 0.5, 2).unwrap()
}

#[test]
fn alpha_zero_is_pure_adversarial() {
    let mut d = Discriminator::<f64>::new(PatchGanConfig::for_frames(2, 4), 3).unwrap();
    let tape = Tape::new();
    let dv = d.bind(&tape, false);
    let x = tape.constant(frames());
    let y = tape.constant(target());
    let p = tape.constant(Tensor::randn(&[2, 1, H, W], 0.0, 0.5, 4).unwrap());
    for kind in [LossKind::Mse, LossKind::Bce] {
        let gl = generator_loss(&mut d, &dv, x, p, y, kind, 0.0).unwrap();
        assert!(gl.l1.item().unwrap() > 0.0);
        assert_eq!(gl.total.item().unwrap(), gl.adversarial.item().unwrap());
        assert_eq!(gl.adversarial.item().unwrap(), adversarial_term(kind, gl.scores, 1.0).item().unwrap());
    }
}

#[test]
fn perfect_prediction_and_fooled_d_is_zero() {
    let mut d = constant_disc(1.0);
    let tape = Tape::new();
    let dv = d.bind(&tape, false);
    let x = tape.constant(frames());
    let y = tape.constant(target());
    let gl = generator_loss(&mut d, &dv, x, y, y, LossKind::Mse, 100.0).unwrap();
    assert_eq!(gl.total.item().unwrap(), 0.0);
}

#[test]
fn weighted_sum_by_hand() {
    let mut d = constant_disc(0.5);
    let tape = Tape::new();
    let dv = d.bind(&tape, false);
    let x = tape.constant(frames());
    let y = target();
    let p = tape.constant(y.map(|v| v + 0.01));
    let y = tape.constant(y);
    let gl = generator_loss(&mut d, &dv, x, p, y, LossKind::Mse, 100.0).unwrap();
    assert!((gl.adversarial.item().unwrap() - 0.25).abs() < 1e-15);
    assert!((gl.l1.item().unwrap() - 0.01).abs() < 1e-12);
    assert!((gl.total.item().unwrap() - 1.25).abs() < 1e-9);
}

#[test]
fn generator_loss_grows_with_alpha() {
    let mut d = Discriminator::<f64>::new(PatchGanConfig::for_frames(2, 4), 3).unwrap();
    let tape = Tape::new();
    let dv = d.bind(&tape, false);
    let x = tape.constant(frames());
    let y = tape.constant(target());
    let p = tape.constant(Tensor::randn(&[2, 1, H, W], 0.0, 0.5, 4).unwrap());
    let mut last = f64::NEG_INFINITY;
    for alpha in [0.0, 0.5, 1.0, 10.0, 100.0] {
        let total = generator_loss(&mut d, &dv, x, p, y, LossKind::Mse, alpha).unwrap().total.item().unwrap();
        assert!(total >= last);
        last = total;
    }
}

#[test]
fn discriminator_identities() {
    let tape = Tape::<f64>::new();
    let map = |v: f64| tape.constant(Tensor::full(&[2, 1, 6, 14], v).unwrap());
    let perfect = discriminator_loss_from_scores(LossKind::Mse, map(0.0), map(1.0)).unwrap();
    assert_eq!(perfect.item().unwrap(), 0.0);
    let blind = discriminator_loss_from_scores(LossKind::Mse, map(0.5), map(0.5)).unwrap();
    assert_eq!(blind.item().unwrap(), 0.5);
    let bce = discriminator_loss_from_scores(LossKind::Bce, map(0.0), map(0.0)).unwrap();
    assert!((bce.item().unwrap() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

    // the same values through the full network with a rigged last stage
    let mut d = constant_disc(0.5);
    let dv = d.bind(&tape, false);
    let x = tape.constant(frames());
    let y = tape.constant(target());
    let dl = discriminator_loss(&mut d, &dv, x, y, y, LossKind::Mse).unwrap();
    assert_eq!(dl.total.item().unwrap(), 0.5);
}

#[test]
fn mse_discriminator_loss_is_nonnegative() {
    let tape = Tape::<f64>::new();
    for seed in 0..20 {
        let f = tape.constant(Tensor::randn(&[1, 1, 4, 4], 0.0, 2.0, seed).unwrap());
        let r = tape.constant(Tensor::randn(&[1, 1, 4, 4], 0.0, 2.0, seed + 100).unwrap());
        assert!(discriminator_loss_from_scores(LossKind::Mse, f, r).unwrap().item().unwrap() > 0.0);
    }
}

#[test]
fn discriminator_loss_does_not_reach_generator() {
    let cfg = GeneratorConfig {
        n_frames: 2,
        encoder_channels: 2,
        encoder_out_channels: 2,
        base_channels: 2,
        dropout_rate: 0.5,
    };
    let mut g = Generator::<f64>::new(cfg, 1).unwrap();
    let mut d = Discriminator::<f64>::new(PatchGanConfig::for_frames(2, 4), 2).unwrap();
    let tape = Tape::new();
    let gv = g.bind(&tape, true);
    let dv = d.bind(&tape, true);
    let x = tape.constant(frames());
    let y = tape.constant(target());
    let pred = generator_forward(&mut g, &gv, x, Mode::Train, 3).unwrap();
    let dl = discriminator_loss(&mut d, &dv, x, pred, y, LossKind::Bce).unwrap();
    let grads = tape.backward(dl.total).unwrap();
    for (p, v) in g.store.params().iter().zip(&gv) {
        let g = grads.get_or_zero(*v);
        assert!(g.data().iter().all(|&x| x == 0.0), "{} received gradient", p.name);
    }
    assert!(dv.iter().any(|v| grads.get_or_zero(*v).data().iter().any(|&x| x != 0.0)));

    // and the generator loss does reach it
    let gl = generator_loss(&mut d, &dv, x, pred, y, LossKind::Bce, 1.0).unwrap();
    let grads = tape.backward(gl.total).unwrap();
    assert!(gv.iter().all(|v| grads.get(*v).is_some()));
}
