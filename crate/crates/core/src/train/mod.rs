//! Alternating generator/discriminator training, prediction, evaluation.
//!
//! Batches come from one continuing stream: each epoch is a seeded
//! permutation of the training samples cut into batches, and every
//! optimizer step consumes the next batch. A cycle is `g_steps_per_cycle`
//! generator updates followed by `d_steps_per_cycle` discriminator updates.

mod checkpoint;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::dataset::{make_samples, scan_dataset, split, Image, ImageBank, LongitudinalDataset, Sample, Splits};
use crate::error::{shape_mismatch, Error, Result};
use crate::metrics::{EvalReport, EvalRow};
use crate::nn::{discriminator_forward, generator_forward, mix_seed, Discriminator, ForwardCtx, Generator, Mode};
use crate::objectives::{adversarial_term, discriminator_loss, generator_loss, l1_loss};
use crate::optim::{Adam, AdamConfig, SgdConfig, SgdMomentum};
use crate::tensor::{Real, Tensor};

const SHUFFLE_TAG: u64 = 0x5348_5546;
const DROPOUT_TAG: u64 = 0x4452_4f50;
const EVAL_TAG: u64 = 0x4556_414c;

/// Position in the batch stream and update counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainState {
    pub global_step: u64,
    pub g_updates: u64,
    pub d_updates: u64,
    pub epoch: usize,
    /// Index of the next batch within the current epoch.
    pub cursor: usize,
    /// Position within the current G/D cycle.
    pub cycle_pos: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Generator,
    Discriminator,
}

/// Losses seen at one optimizer step. Every column is filled on both kinds
/// of step: a generator step also scores `L_D` (without updating `D`), a
/// discriminator step derives the `L_G` terms from the same fake scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub kind: StepKind,
    pub loss_g_total: f64,
    pub loss_g_adv: f64,
    pub loss_g_l1: f64,
    pub loss_d: f64,
}

impl StepRecord {
    fn check_finite(&self) -> Result<()> {
        let vals = [
            ("loss_g_total", self.loss_g_total),
            ("loss_g_adv", self.loss_g_adv),
            ("loss_g_l1", self.loss_g_l1),
            ("loss_d", self.loss_d),
        ];
        match vals.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(Error::DivergenceDetected {
                step: self.step,
                detail: format!("{name} = {v}"),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
}

pub const TRAIN_CSV_HEADER: &str = "step,loss_g_total,loss_g_adv,loss_g_l1,loss_d";

impl TrainReport {
    pub fn g_updates(&self) -> usize {
        self.records.iter().filter(|r| r.kind == StepKind::Generator).count()
    }

    pub fn d_updates(&self) -> usize {
        self.records.iter().filter(|r| r.kind == StepKind::Discriminator).count()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRAIN_CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.step, r.loss_g_total, r.loss_g_adv, r.loss_g_l1, r.loss_d
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Generator, discriminator, their optimizers and the stream position.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam: Adam,
    pub sgd: SgdMomentum,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.train.validate()?;
        let t = &config.train;
        let generator = Generator::new(t.generator(), mix_seed(t.seed, 1))?;
        let discriminator = Discriminator::new(t.discriminator(), mix_seed(t.seed, 2))?;
        let adam = Adam::new(
            AdamConfig {
                lr: t.lr_g,
                ..AdamConfig::default()
            },
            &generator.store,
        );
        let sgd = SgdMomentum::new(
            SgdConfig {
                lr: t.lr_d,
                ..SgdConfig::default()
            },
            &discriminator.store,
        );
        Ok(Self {
            config,
            generator,
            discriminator,
            adam,
            sgd,
            state: TrainState::default(),
        })
    }

    pub fn from_checkpoint(c: Checkpoint) -> Self {
        Self {
            config: c.config,
            generator: c.generator,
            discriminator: c.discriminator,
            adam: c.adam,
            sgd: c.sgd,
            state: c.state,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            adam: self.adam.clone(),
            sgd: self.sgd.clone(),
            state: self.state,
        }
    }

    fn dropout_seed(&self) -> u64 {
        mix_seed(self.config.train.seed ^ DROPOUT_TAG, self.state.global_step)
    }

    /// One Adam update of the generator on `L_G`; `D` is bound as constants.
    pub fn generator_step(&mut self, frames: &Tensor, target: &Tensor) -> Result<StepRecord> {
        let t = &self.config.train;
        let (kind, alpha) = (t.loss, t.alpha);
        let seed = self.dropout_seed();
        let tape = Tape::new();
        let gv = self.generator.bind(&tape, true);
        let dv = self.discriminator.bind(&tape, false);
        let x = tape.constant(frames.clone());
        let y = tape.constant(target.clone());
        let pred = generator_forward(&mut self.generator, &gv, x, Mode::Train, seed)?;
        let gl = generator_loss(&mut self.discriminator, &dv, x, pred, y, kind, alpha)?;
        let real = discriminator_forward(&mut self.discriminator, &dv, x, y, ForwardCtx::train(0))?;
        let loss_d = adversarial_term(kind, gl.scores, 0.0).item()?.f64() + adversarial_term(kind, real, 1.0).item()?.f64();
        let rec = StepRecord {
            step: self.state.global_step,
            kind: StepKind::Generator,
            loss_g_total: gl.total.item()?.f64(),
            loss_g_adv: gl.adversarial.item()?.f64(),
            loss_g_l1: gl.l1.item()?.f64(),
            loss_d,
        };
        rec.check_finite()?;
        let grads = tape.backward(gl.total)?;
        self.generator.store.store_grads(&grads, &gv);
        self.adam.step(&mut self.generator.store)?;
        self.generator.store.clear_grads();
        self.state.g_updates += 1;
        self.state.global_step += 1;
        Ok(rec)
    }

    /// One SGD-momentum update of the discriminator on `L_D`; the
    /// prediction is detached, so `G` is untouched.
    pub fn discriminator_step(&mut self, frames: &Tensor, target: &Tensor) -> Result<StepRecord> {
        let t = &self.config.train;
        let (kind, alpha) = (t.loss, t.alpha);
        let seed = self.dropout_seed();
        let tape = Tape::new();
        let gv = self.generator.bind(&tape, false);
        let dv = self.discriminator.bind(&tape, true);
        let x = tape.constant(frames.clone());
        let y = tape.constant(target.clone());
        let pred = generator_forward(&mut self.generator, &gv, x, Mode::Train, seed)?;
        let dl = discriminator_loss(&mut self.discriminator, &dv, x, pred, y, kind)?;
        let adv = adversarial_term(kind, dl.fake_scores, 1.0).item()?.f64();
        let l1 = l1_loss(pred, y)?.item()?.f64();
        let rec = StepRecord {
            step: self.state.global_step,
            kind: StepKind::Discriminator,
            loss_g_total: adv + alpha * l1,
            loss_g_adv: adv,
            loss_g_l1: l1,
            loss_d: dl.total.item()?.f64(),
        };
        rec.check_finite()?;
        let grads = tape.backward(dl.total)?;
        self.discriminator.store.store_grads(&grads, &dv);
        self.sgd.step(&mut self.discriminator.store)?;
        self.discriminator.store.clear_grads();
        self.state.d_updates += 1;
        self.state.global_step += 1;
        Ok(rec)
    }

    /// One step of whichever kind the cycle position calls for.
    pub fn step(&mut self, frames: &Tensor, target: &Tensor) -> Result<StepRecord> {
        let t = &self.config.train;
        let cycle = t.g_steps_per_cycle + t.d_steps_per_cycle;
        let rec = if self.state.cycle_pos < t.g_steps_per_cycle {
            self.generator_step(frames, target)?
        } else {
            self.discriminator_step(frames, target)?
        };
        self.state.cycle_pos = (self.state.cycle_pos + 1) % cycle;
        Ok(rec)
    }

    /// Batches of one epoch, as sample indices. A trailing batch with fewer
    /// than two samples is dropped because batch-norm needs two.
    pub fn epoch_batches(&self, n_samples: usize, epoch: usize) -> Vec<Vec<usize>> {
        let t = &self.config.train;
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(t.seed ^ SHUFFLE_TAG, epoch as u64)));
        let mut batches: Vec<Vec<usize>> = order.chunks(t.batch_size).map(|c| c.to_vec()).collect();
        if let Some(last) = batches.last() {
            if last.len() < t.batch_size && last.len() < 2 {
                batches.pop();
            }
        }
        batches
    }

    /// Train on `samples` until `epochs` (or `max_steps`) is reached,
    /// resuming from the current stream position. `on_step` sees every
    /// record as it is produced.
    pub fn run(
        &mut self,
        samples: &[Sample],
        bank: &ImageBank,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<TrainReport> {
        let t = self.config.train.clone();
        if samples.is_empty() {
            return Err(Error::EmptyDataset("no training samples".into()));
        }
        if (bank.height, bank.width) != (t.height, t.width) {
            return Err(shape_mismatch(format!(
                "images are {}x{}, config expects {}x{}",
                bank.height, bank.width, t.height, t.width
            )));
        }
        if let Some(s) = samples.iter().find(|s| s.inputs.len() != t.n_visits_in) {
            return Err(shape_mismatch(format!(
                "sample of eye {} has {} input frames, config expects {}",
                s.eye,
                s.inputs.len(),
                t.n_visits_in
            )));
        }
        let mut report = TrainReport::default();
        while self.state.epoch < t.epochs {
            let batches = self.epoch_batches(samples.len(), self.state.epoch);
            if batches.is_empty() {
                return Err(Error::EmptyDataset("no batch of at least two samples".into()));
            }
            while self.state.cursor < batches.len() {
                if t.max_steps > 0 && self.state.global_step >= t.max_steps {
                    return Ok(report);
                }
                let picked: Vec<&Sample> = batches[self.state.cursor].iter().map(|&i| &samples[i]).collect();
                let (frames, target) = bank.batch::<f32>(&picked)?;
                let rec = self.step(&frames, &target)?;
                self.state.cursor += 1;
                on_step(&rec);
                report.records.push(rec);
            }
            self.state.epoch += 1;
            self.state.cursor = 0;
        }
        Ok(report)
    }
}

/// Train a fresh model on every sample of `train_set`.
pub fn train(train_set: &LongitudinalDataset, config: &RunConfig) -> Result<(Checkpoint, TrainReport)> {
    train_with(train_set, config, |_| {})
}

pub fn train_with(
    train_set: &LongitudinalDataset,
    config: &RunConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<(Checkpoint, TrainReport)> {
    let samples = make_samples(train_set, config.train.n_visits_in)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset("training split yields no samples".into()));
    }
    let bank = ImageBank::load(train_set)?;
    let mut trainer = Trainer::new(config.clone())?;
    let report = trainer.run(&samples, &bank, on_step)?;
    Ok((trainer.checkpoint(), report))
}

/// Test-time forward pass on a batch: dropout on with `seed`, batch-norm
/// on the batch's own statistics. Returns `[0, 1]` images.
pub fn predict_batch(gen: &mut Generator, frames: &Tensor, seed: u64) -> Result<Vec<Image>> {
    let shape = frames.shape().to_vec();
    let expect = gen.config().n_frames;
    if shape.len() != 5 || shape[1] != 1 || shape[2] != expect {
        return Err(shape_mismatch(format!(
            "generator expects frames [b, 1, {expect}, h, w], got {shape:?}"
        )));
    }
    let tape = Tape::new();
    let vars = gen.bind(&tape, false);
    let out = generator_forward(gen, &vars, tape.constant(frames.clone()), Mode::Test, seed)?;
    let out = out.value();
    let (h, w) = (shape[3], shape[4]);
    out.data()
        .chunks(h * w)
        .map(|c| Image::from_network(h, w, c))
        .collect()
}

/// Predict the next scan from `frames` (oldest first).
pub fn predict(ckpt: &Checkpoint, frames: &[Image], seed: u64) -> Result<Image> {
    let t = &ckpt.config.train;
    if frames.len() != t.n_visits_in {
        return Err(shape_mismatch(format!(
            "checkpoint expects {} input frames, got {}",
            t.n_visits_in,
            frames.len()
        )));
    }
    for f in frames {
        if (f.height, f.width) != (t.height, t.width) {
            return Err(shape_mismatch(format!(
                "frame is {}x{}, checkpoint expects {}x{}",
                f.height, f.width, t.height, t.width
            )));
        }
    }
    let data: Vec<f32> = frames.iter().flat_map(|f| f.to_network()).collect();
    let x = Tensor::new(&[1, 1, frames.len(), t.height, t.width], data)?;
    let mut gen = ckpt.generator.clone();
    Ok(predict_batch(&mut gen, &x, seed)?.remove(0))
}

/// One prediction and one row per sample, in sample order.
/// Predictions are made in batches of `eval_batch_size`; batch `i` uses
/// dropout seed `mix(eval_seed, i)`.
pub fn evaluate_generator(
    gen: &mut Generator,
    config: &RunConfig,
    samples: &[Sample],
    bank: &ImageBank,
    mut on_pair: impl FnMut(&Sample, &Image, &Image) -> Result<()>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no evaluation samples".into()));
    }
    let t = &config.train;
    let mut report = EvalReport::default();
    for (i, chunk) in samples.chunks(t.eval_batch_size).enumerate() {
        let picked: Vec<&Sample> = chunk.iter().collect();
        let (frames, _) = bank.batch::<f32>(&picked)?;
        let preds = predict_batch(gen, &frames, mix_seed(t.eval_seed ^ EVAL_TAG, i as u64))?;
        for (s, pred) in chunk.iter().zip(&preds) {
            let truth = bank.target(s)?;
            on_pair(s, pred, truth)?;
            report
                .rows
                .push(EvalRow::compare(s.eye, s.target, s.bscan, pred, truth, &config.ssim)?);
        }
    }
    Ok(report)
}

pub fn evaluate(ckpt: &Checkpoint, test_set: &LongitudinalDataset) -> Result<EvalReport> {
    let samples = make_samples(test_set, ckpt.config.train.n_visits_in)?;
    let bank = ImageBank::load(test_set)?;
    let mut gen = ckpt.generator.clone();
    evaluate_generator(&mut gen, &ckpt.config, &samples, &bank, |_, _, _| Ok(()))
}

/// Splits of the dataset at `config.dataset_root`.
pub fn load_splits(config: &RunConfig) -> Result<Splits> {
    let root = config
        .dataset_root
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("dataset_root is not set".into()))?;
    split(&scan_dataset(root)?, &config.split)
}

/// What [`run_experiment`] produces.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub checkpoint: Checkpoint,
    pub train_report: TrainReport,
    pub eval_report: EvalReport,
}

/// Split, train on the training eyes, evaluate on the held-out test eyes.
pub fn run_experiment(dataset_root: &Path, config: &RunConfig) -> Result<Experiment> {
    let mut config = config.clone();
    config.dataset_root = Some(dataset_root.to_path_buf());
    config.validate()?;
    let splits = load_splits(&config)?;
    let (checkpoint, train_report) = train(&splits.train, &config)?;
    let eval_report = evaluate(&checkpoint, &splits.test)?;
    Ok(Experiment {
        checkpoint,
        train_report,
        eval_report,
    })
}
