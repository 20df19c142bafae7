//! Loss in bits per sub-pixel, Adam with per-step decay, parameter EMA,
//! evaluation, and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablations::{dequantize, dequantized_log_prob_on_tape, softmax_log_prob_on_tape};
use crate::data::Dataset;
use crate::dlm;
use crate::error::{Error, Result};
use crate::image::{Images, HALF_RANGE};
use crate::network::{HeadKind, Mode, Model};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// `−total_logprob / (n·H·W·3·ln 2)`.
pub fn bits_per_subpixel(total_logprob_nats: f64, n_images: usize, h: usize, w: usize) -> Result<f64> {
    if n_images == 0 || h == 0 || w == 0 {
        return Err(Error::Invalid("bits per sub-pixel needs positive counts".into()));
    }
    Ok(-total_logprob_nats / (n_images * h * w * 3) as f64 / std::f64::consts::LN_2)
}

/// Neumaier-compensated sum; exact enough that equal terms add up to the
/// correctly rounded product.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Multiplied into the learning rate after every step.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ema_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            lr_decay: 0.999995,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ema_decay: 0.9995,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optim.lr", "must be finite and non-negative"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("optim.lr_decay", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("optim.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optim.beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        if !unit(self.ema_decay) {
            return Err(Error::config("optim.ema_decay", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Adam moments, step counter, current learning rate and EMA shadow parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: u64,
    /// Learning rate for the next step.
    pub lr: f64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub ema: Vec<Tensor<f32>>,
}

impl OptimState {
    pub fn new(config: OptimConfig, model: &Model<f32>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor<f32>> = model.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Ok(OptimState {
            lr: config.lr,
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            ema: model.params().to_vec(),
        })
    }

    /// Copy of `model` carrying the EMA parameters.
    pub fn ema_model(&self, model: &Model<f32>) -> Result<Model<f32>> {
        let mut m = model.clone();
        m.set_params(self.ema.clone())?;
        Ok(m)
    }

    fn apply(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>]) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = c.eps as f32;
        let update = self.lr != 0.0;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .elems_mut()
                .iter_mut()
                .zip(g.elems())
                .zip(m.elems_mut().iter_mut().zip(v.elems_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                if update {
                    *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
                }
            }
        }
        self.lr *= c.lr_decay;
        let d = c.ema_decay as f32;
        for (e, p) in self.ema.iter_mut().zip(params.iter()) {
            for (ev, &pv) in e.elems_mut().iter_mut().zip(p.elems()) {
                *ev = d * *ev + (1.0 - d) * pv;
            }
        }
    }
}

/// Total log-probability (nats, scalar) of `images` under the model's head.
///
/// The continuous head scores dequantized values drawn from `rng`, and the
/// network conditions on those same values.
#[allow(clippy::too_many_arguments)]
pub fn log_prob_on_tape<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    params: &[Var],
    images: &Images,
    labels: Option<&[usize]>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    let cfg = model.config();
    let (n, h, w) = (images.len(), images.height(), images.width());
    let log_probs = match cfg.head {
        HeadKind::DiscretizedLogistic => {
            let x = tape.constant(images.to_centered());
            let f = model.forward(tape, params, x, labels, mode, rng)?;
            dlm::log_prob_on_tape(tape, f.head, images, cfg.n_mixtures)?
        }
        HeadKind::Softmax => {
            let x = tape.constant(images.to_centered());
            let f = model.forward(tape, params, x, labels, mode, rng)?;
            softmax_log_prob_on_tape(tape, f.head, images)?
        }
        HeadKind::ContinuousLogistic => {
            let z = dequantize(images, rng);
            let zt = z.iter().map(|&v| T::from_f64(v / HALF_RANGE - 1.0)).collect();
            let x = tape.constant(Tensor::new([n, h, w, 3], zt)?);
            let f = model.forward(tape, params, x, labels, mode, rng)?;
            dequantized_log_prob_on_tape(tape, f.head, &z, (n, h, w), cfg.n_mixtures)?
        }
    };
    tape.sum(log_probs)
}

fn non_finite_as_loss(batch_index: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { batch_index },
        other => other,
    }
}

/// One Adam step on the mean negative log-likelihood of `batch`; returns its
/// bits per sub-pixel. On a non-finite loss or gradient nothing is modified.
pub fn train_step(
    model: &mut Model<f32>,
    optim: &mut OptimState,
    batch: &Images,
    labels: Option<&[usize]>,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let batch_index = optim.step;
    let to_loss = non_finite_as_loss(batch_index);
    let mut tape = Tape::<f32>::new();
    let params = model.bind(&mut tape, true);
    let total = log_prob_on_tape(model, &mut tape, &params, batch, labels, Mode::Train, rng).map_err(&to_loss)?;
    let denom = (batch.subpixels() as f64 * std::f64::consts::LN_2) as f32;
    let loss = tape.scale(total, -1.0 / denom).map_err(&to_loss)?;
    let bpd = tape.value(loss).item()? as f64;
    if !bpd.is_finite() {
        return Err(Error::NonFiniteLoss { batch_index });
    }
    let mut grads = tape.backward(loss).map_err(&to_loss)?;
    let mut g = Vec::with_capacity(params.len());
    for &p in &params {
        let t = grads.take(p).ok_or_else(|| Error::Invalid("missing parameter gradient".into()))?;
        if !t.is_finite() {
            return Err(Error::NonFiniteLoss { batch_index });
        }
        g.push(t);
    }
    drop(tape);
    optim.apply(model.params_mut(), &g);
    Ok(bpd)
}

/// Fixed seed for the dequantization noise used during evaluation.
const EVAL_NOISE_SEED: u64 = 0x5eed;

/// Deterministic eval-mode bits per sub-pixel over the whole dataset.
pub fn evaluate(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let bs = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_NOISE_SEED);
    let mut totals = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(bs) {
        let part = data.select(chunk);
        let mut tape = Tape::<f32>::new();
        let params = model.bind(&mut tape, false);
        let lp = log_prob_on_tape(
            model,
            &mut tape,
            &params,
            &part.images,
            part.labels.as_deref(),
            Mode::Eval,
            &mut rng,
        )?;
        totals.push(tape.value(lp).item()? as f64);
    }
    let total = compensated_sum(totals);
    let im = &data.images;
    bits_per_subpixel(total, im.len(), im.height(), im.width())
}
