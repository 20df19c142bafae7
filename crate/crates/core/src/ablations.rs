//! Alternative output heads and the named single-change model variants.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dlm::{self, logsumexp, MixtureParams};
use crate::error::{Error, Result};
use crate::image::{centered, Images, Pixel, HALF_RANGE};
use crate::logistic::log_pdf;
use crate::network::{HeadKind, ModelConfig, SOFTMAX_HEAD_CHANNELS, SOFTMAX_LEVELS as L};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Depth of the plain small-field stack; its vertical stream sees 5 rows x 11 columns.
pub const SMALL_FIELD_DEPTH: usize = 2;

/// Log-probabilities of the three conditional softmaxes of one pixel
/// (`r`, then `g | r`, then `b | r, g`).
pub fn softmax_conditionals(p: Pixel, head: &[f64]) -> Result<[Vec<f64>; 3]> {
    if head.len() != SOFTMAX_HEAD_CHANNELS {
        return Err(Error::shape(
            "softmax head",
            format!("{} channels, expected {SOFTMAX_HEAD_CHANNELS}", head.len()),
        ));
    }
    let block = |b: usize| &head[b * L..(b + 1) * L];
    let (rt, gt) = (centered(p.r), centered(p.g));
    let logits = [
        block(0).to_vec(),
        (0..L).map(|v| block(1)[v] + block(3)[v] * rt).collect::<Vec<_>>(),
        (0..L).map(|v| block(2)[v] + block(4)[v] * rt + block(5)[v] * gt).collect(),
    ];
    Ok(logits.map(|l| {
        let z = logsumexp(&l);
        l.into_iter().map(|v| v - z).collect()
    }))
}

/// `ln p(r, g, b)` under the 256-way softmax head.
pub fn softmax_pixel_logprob(p: Pixel, head: &[f64]) -> Result<f64> {
    let c = softmax_conditionals(p, head)?;
    Ok(c[0][p.r as usize] + c[1][p.g as usize] + c[2][p.b as usize])
}

/// Per-sub-pixel log-likelihood `[N, H, W, 3]` under a `[N, H, W, 1536]` softmax head.
pub fn softmax_log_prob_on_tape<T: Scalar>(tape: &mut Tape<T>, head: Var, images: &Images) -> Result<Var> {
    let shape = tape.shape(head).to_vec();
    let expected = [images.len(), images.height(), images.width(), SOFTMAX_HEAD_CHANNELS];
    if shape != expected {
        return Err(Error::shape("softmax log_prob", format!("head {shape:?}, expected {expected:?}")));
    }
    let p = images.len() * images.height() * images.width();
    let grouped = tape.reshape(head, vec![p, 6, L])?;
    let block = |tape: &mut Tape<T>, b: usize| -> Result<Var> {
        let s = tape.slice(grouped, 1, b, 1)?;
        tape.reshape(s, vec![p, L])
    };
    let data = images.data();
    let chan = |c: usize| -> Vec<usize> { (0..p).map(|i| data[3 * i + c] as usize).collect() };
    let cent = |c: usize| -> Vec<T> { (0..p).map(|i| T::from_f64(centered(data[3 * i + c]))).collect() };

    let lr = block(tape, 0)?;
    let base_g = block(tape, 1)?;
    let c_gr = block(tape, 3)?;
    let shift = tape.mul_row_const(c_gr, cent(0))?;
    let lg = tape.add(base_g, shift)?;
    let base_b = block(tape, 2)?;
    let c_br = block(tape, 4)?;
    let c_bg = block(tape, 5)?;
    let s1 = tape.mul_row_const(c_br, cent(0))?;
    let s2 = tape.mul_row_const(c_bg, cent(1))?;
    let lb = tape.add(base_b, s1)?;
    let lb = tape.add(lb, s2)?;

    let mut cols = Vec::with_capacity(3);
    for (c, logits) in [lr, lg, lb].into_iter().enumerate() {
        let ls = tape.log_softmax(logits, 1)?;
        let picked = tape.pick(ls, chan(c))?;
        cols.push(tape.reshape(picked, vec![p, 1])?);
    }
    let stacked = tape.concat(&cols, 1)?;
    tape.reshape(stacked, vec![images.len(), images.height(), images.width(), 3])
}

/// Continuous sub-pixel values `z = x + u − ½`, one uniform per sub-pixel.
pub fn dequantize(images: &Images, rng: &mut impl Rng) -> Vec<f64> {
    images
        .data()
        .iter()
        .map(|&x| x as f64 + rng.random::<f64>() - 0.5)
        .collect()
}

/// Log-density of the continuous logistic mixture at `z` (integer-pixel units),
/// with the indicator shared across channels and means coupled on earlier `z`.
pub fn dequantized_logprob(z: [f64; 3], params: &MixtureParams) -> Result<f64> {
    params.validate()?;
    let zt = z.map(|v| v / HALF_RANGE - 1.0);
    let log_pi = params.log_pi();
    let terms: Vec<f64> = (0..params.k())
        .map(|i| {
            let [mr, mg, mb] = params.mu[i];
            let [a, b, c] = params.coeff[i];
            let means = [
                mr,
                mg + HALF_RANGE * a * zt[0],
                mb + HALF_RANGE * (b * zt[0] + c * zt[1]),
            ];
            log_pi[i] + (0..3).map(|ch| log_pdf(z[ch], means[ch], params.log_s[i][ch])).sum::<f64>()
        })
        .collect();
    Ok(logsumexp(&terms))
}

/// Per-pixel continuous log-density `[N, H, W]` of dequantized values `z`
/// (`N·H·W·3`, interleaved) under a `[N, H, W, 10K]` head.
pub fn dequantized_log_prob_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    head: Var,
    z: &[f64],
    (n, h, w): (usize, usize, usize),
    k: usize,
) -> Result<Var> {
    let shape = tape.shape(head).to_vec();
    if shape != [n, h, w, dlm::head_channels(k)] || z.len() != n * h * w * 3 {
        return Err(Error::shape("dequantized log_prob", format!("head {shape:?} with {} values", z.len())));
    }
    let hv = dlm::unpack_on_tape(tape, head, k)?;
    let p = n * h * w;
    let cent = |c: usize| -> Vec<T> { (0..p).map(|i| T::from_f64(z[3 * i + c] / HALF_RANGE - 1.0)).collect() };
    let means = dlm::coupled_means_on_tape(tape, &hv, &cent(0), &cent(1))?;
    let log_pi = tape.log_softmax(hv.logit, 1)?;
    let mut t = log_pi;
    for c in 0..3 {
        let zc: Vec<T> = (0..p)
            .flat_map(|i| std::iter::repeat_n(T::from_f64(z[3 * i + c]), k))
            .collect();
        let zc = tape.constant(crate::tensor::Tensor::new([p, k], zc)?);
        let diff = tape.sub(zc, means[c])?;
        let neg_ls = tape.neg(hv.log_s[c])?;
        let inv_s = tape.exp(neg_ls)?;
        let u = tape.mul(diff, inv_s)?;
        let nu = tape.neg(u)?;
        let sp = tape.softplus(nu)?;
        let sp2 = tape.scale(sp, T::from_f64(2.0))?;
        let lp = tape.sub(nu, hv.log_s[c])?;
        let lp = tape.sub(lp, sp2)?;
        t = tape.add(t, lp)?;
    }
    let lse = tape.logsumexp(t, 1)?;
    tape.reshape(lse, vec![n, h, w])
}

/// The named single-change variants of the desk configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    SoftmaxHead,
    Dequantized,
    NoShortcut,
    NoDropout,
    SmallFieldPlain,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::SoftmaxHead,
        Ablation::Dequantized,
        Ablation::NoShortcut,
        Ablation::NoDropout,
        Ablation::SmallFieldPlain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::SoftmaxHead => "softmax_head",
            Ablation::Dequantized => "dequantized",
            Ablation::NoShortcut => "no_shortcut",
            Ablation::NoDropout => "no_dropout",
            Ablation::SmallFieldPlain => "small_field_plain",
        }
    }

    /// Config fields this variant changes relative to its base.
    pub fn changed_fields(self) -> &'static [&'static str] {
        match self {
            Ablation::SoftmaxHead | Ablation::Dequantized => &["head"],
            Ablation::NoShortcut => &["use_shortcuts"],
            Ablation::NoDropout => &["dropout_rate"],
            Ablation::SmallFieldPlain => &["small_field", "use_downsampling"],
        }
    }

    /// `base` with exactly this variant's change applied.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Ablation::SoftmaxHead => c.head = HeadKind::Softmax,
            Ablation::Dequantized => c.head = HeadKind::ContinuousLogistic,
            Ablation::NoShortcut => c.use_shortcuts = false,
            Ablation::NoDropout => c.dropout_rate = 0.0,
            Ablation::SmallFieldPlain => {
                c.use_downsampling = false;
                c.small_field = Some(SMALL_FIELD_DEPTH);
            }
        }
        c
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
                Error::Invalid(format!("unknown ablation '{s}' (expected one of {})", known.join(", ")))
            })
    }
}

/// Desk configuration with the named change applied.
pub fn ablation_config(name: &str) -> Result<ModelConfig> {
    Ok(name.parse::<Ablation>()?.apply(&ModelConfig::desk()))
}

/// Names of the fields in which two configs differ.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (va, vb) = (serde_json::to_value(a), serde_json::to_value(b));
    let (Ok(serde_json::Value::Object(ma)), Ok(serde_json::Value::Object(mb))) = (va, vb) else {
        return vec!["<unserializable>".into()];
    };
    let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| ma.get(*k) != mb.get(*k))
        .cloned()
        .collect()
}
