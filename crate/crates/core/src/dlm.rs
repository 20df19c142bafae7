//! Discretized logistic mixture likelihood over whole RGB pixels.
//!
//! A pixel is drawn by first picking a mixture component, then the red,
//! green and blue channels in turn from that component's discretized
//! logistic. The green mean shifts linearly with the observed red value and
//! the blue mean with red and green; shifts are formed in centered units.
//!
//! Raw network output carries ten channels per component, in the order
//! `[logit, mu_r, mu_g, mu_b, log_s_r, log_s_g, log_s_b, alpha, beta, gamma]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{centered, Images, Pixel, HALF_RANGE};
use crate::logistic::{log_bin_mass, MAX_LEVEL};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Raw channels per mixture component.
pub const CHANNELS_PER_COMPONENT: usize = 10;

/// Lower clamp on raw log-scales (centered units).
pub const RAW_LOG_SCALE_MIN: f64 = -7.0;

/// Lower clamp on log-scales in integer-pixel units.
pub fn log_scale_min() -> f64 {
    RAW_LOG_SCALE_MIN + HALF_RANGE.ln()
}

/// Raw head channels for `k` components.
pub fn head_channels(k: usize) -> usize {
    CHANNELS_PER_COMPONENT * k
}

/// Per-pixel mixture parameters in integer-pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub logit_pi: Vec<f64>,
    /// Means `(μ_r, μ_g, μ_b)` before the linear channel coupling.
    pub mu: Vec<[f64; 3]>,
    pub log_s: Vec<[f64; 3]>,
    /// `(α, β, γ)`: green-on-red, blue-on-red, blue-on-green.
    pub coeff: Vec<[f64; 3]>,
}

impl MixtureParams {
    pub fn k(&self) -> usize {
        self.logit_pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.mu.len() != k || self.log_s.len() != k || self.coeff.len() != k {
            return Err(Error::Invalid(format!(
                "mixture arrays disagree on K: {} logits, {} means, {} scales, {} coefficients",
                k,
                self.mu.len(),
                self.log_s.len(),
                self.coeff.len()
            )));
        }
        let finite = self.logit_pi.iter().all(|v| v.is_finite())
            && self.mu.iter().flatten().all(|v| v.is_finite())
            && self.log_s.iter().flatten().all(|v| v.is_finite())
            && self.coeff.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invalid("non-finite mixture parameter".into()));
        }
        Ok(())
    }

    /// Normalized mixture log-weights.
    pub fn log_pi(&self) -> Vec<f64> {
        let lse = logsumexp(&self.logit_pi);
        self.logit_pi.iter().map(|l| l - lse).collect()
    }

    pub fn pi(&self) -> Vec<f64> {
        self.log_pi().into_iter().map(f64::exp).collect()
    }

    /// Channel means of component `i` after coupling on observed `r` and `g`
    /// (only the channels preceding each one are used).
    pub fn coupled_means(&self, i: usize, r: u8, g: u8) -> [f64; 3] {
        let [mr, mg, mb] = self.mu[i];
        let [a, b, c] = self.coeff[i];
        let (rt, gt) = (centered(r), centered(g));
        [
            mr,
            mg + HALF_RANGE * a * rt,
            mb + HALF_RANGE * (b * rt + c * gt),
        ]
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln P(x | μ, s)` of one discretized logistic.
pub fn channel_logprob(x: u8, mu: f64, s: f64) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() || !mu.is_finite() {
        return Err(Error::Invalid(format!("scale must be positive and finite, got s={s}, mu={mu}")));
    }
    Ok(log_bin_mass(x as f64, mu, s.ln()))
}

/// Which channel of a pixel a conditional refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    R,
    G,
    B,
}

/// Per-component log-terms `ln π_i + Σ_{c ≤ upto} ln B_c,i`.
fn component_terms(p: Pixel, params: &MixtureParams, upto: Channel) -> Vec<f64> {
    let log_pi = params.log_pi();
    let channels = p.channels();
    let last = upto as usize;
    (0..params.k())
        .map(|i| {
            let means = params.coupled_means(i, p.r, p.g);
            let mut t = log_pi[i];
            for c in 0..=last {
                t += log_bin_mass(channels[c] as f64, means[c], params.log_s[i][c]);
            }
            t
        })
        .collect()
}

/// `ln p(r, g, b)` with the component indicator shared by all three channels.
pub fn pixel_logprob(p: Pixel, params: &MixtureParams) -> Result<f64> {
    params.validate()?;
    Ok(logsumexp(&component_terms(p, params, Channel::B)))
}

/// `ln p(channel | preceding channels of p)`; the value of `channel` is taken
/// from `p` and later channels are ignored.
pub fn conditional_logprob(p: Pixel, channel: Channel, params: &MixtureParams) -> Result<f64> {
    params.validate()?;
    let joint = logsumexp(&component_terms(p, params, channel));
    let prefix = match channel {
        Channel::R => 0.0,
        Channel::G => logsumexp(&component_terms(p, params, Channel::R)),
        Channel::B => logsumexp(&component_terms(p, params, Channel::G)),
    };
    Ok(joint - prefix)
}

/// Maps one pixel's raw head channels to mixture parameters.
pub fn unpack_head(raw: &[f64], k: usize) -> Result<MixtureParams> {
    if k == 0 || raw.len() != head_channels(k) {
        return Err(Error::shape(
            "unpack_head",
            format!("{} raw channels for K={k}, expected {}", raw.len(), head_channels(k)),
        ));
    }
    let mut params = MixtureParams {
        logit_pi: Vec::with_capacity(k),
        mu: Vec::with_capacity(k),
        log_s: Vec::with_capacity(k),
        coeff: Vec::with_capacity(k),
    };
    let ls_offset = HALF_RANGE.ln();
    for c in raw.chunks(CHANNELS_PER_COMPONENT) {
        params.logit_pi.push(c[0]);
        params.mu.push([1, 2, 3].map(|j| HALF_RANGE * (c[j] + 1.0)));
        params
            .log_s
            .push([4, 5, 6].map(|j| c[j].max(RAW_LOG_SCALE_MIN) + ls_offset));
        params.coeff.push([7, 8, 9].map(|j| c[j].tanh()));
    }
    params.validate()?;
    Ok(params)
}

/// Unpacks the parameters of pixel `(n, i, j)` from a `[N, H, W, 10K]` head.
pub fn unpack_at<T: Scalar>(head: &Tensor<T>, k: usize, n: usize, i: usize, j: usize) -> Result<MixtureParams> {
    let [_, _, _, c] = *head.shape() else {
        return Err(Error::shape("unpack_at", format!("head {:?}", head.shape())));
    };
    let off = head.offset(&[n, i, j, 0]);
    let raw: Vec<f64> = head.elems()[off..off + c].iter().map(|&v| Scalar::to_f64(v)).collect();
    unpack_head(&raw, k)
}

fn logistic_draw(mu: f64, log_s: f64, u: f64) -> u8 {
    let nu = mu + log_s.exp() * (u / (1.0 - u)).ln();
    nu.round_ties_even().clamp(0.0, MAX_LEVEL as f64) as u8
}

/// Ancestral draw with explicit uniforms: one for the component, then one per channel.
pub fn sample_pixel_with(params: &MixtureParams, mut uniform: impl FnMut() -> f64) -> Pixel {
    let pi = params.pi();
    let u = uniform();
    let mut acc = 0.0;
    let mut comp = pi.len() - 1;
    for (i, p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            comp = i;
            break;
        }
    }
    let ls = params.log_s[comp];
    let r = logistic_draw(params.coupled_means(comp, 0, 0)[0], ls[0], uniform());
    let g = logistic_draw(params.coupled_means(comp, r, 0)[1], ls[1], uniform());
    let b = logistic_draw(params.coupled_means(comp, r, g)[2], ls[2], uniform());
    Pixel::new(r, g, b)
}

pub fn sample_pixel(params: &MixtureParams, rng: &mut impl Rng) -> Pixel {
    sample_pixel_with(params, || rng.random::<f64>())
}

/// Total log-probability of `images` under per-pixel heads `[N, H, W, 10K]`.
pub fn image_logprob<T: Scalar>(images: &Images, head: &Tensor<T>, k: usize) -> Result<f64> {
    let expected = [images.len(), images.height(), images.width(), head_channels(k)];
    if head.shape() != expected {
        return Err(Error::shape(
            "image_logprob",
            format!("head {:?}, expected {expected:?}", head.shape()),
        ));
    }
    let mut total = 0.0;
    for n in 0..images.len() {
        for i in 0..images.height() {
            for j in 0..images.width() {
                let params = unpack_at(head, k, n, i, j)?;
                total += pixel_logprob(images.pixel(n, i, j), &params)?;
            }
        }
    }
    Ok(total)
}

/// Head fields sliced into `[P, K]` tape variables.
pub(crate) struct HeadVars {
    pub logit: Var,
    pub mu: [Var; 3],
    pub log_s: [Var; 3],
    pub coeff: [Var; 3],
}

/// Unpacks a `[N, H, W, 10K]` head on the tape into `[P, K]` fields
/// (scales clamped and offset, coefficients squashed, means not yet shifted).
pub(crate) fn unpack_on_tape<T: Scalar>(tape: &mut Tape<T>, head: Var, k: usize) -> Result<HeadVars> {
    let shape = tape.shape(head).to_vec();
    if shape.len() != 4 || shape[3] != head_channels(k) || k == 0 {
        return Err(Error::shape("dlm head", format!("{shape:?} for K={k}")));
    }
    let p = shape[0] * shape[1] * shape[2];
    let grouped = tape.reshape(head, vec![p, k, CHANNELS_PER_COMPONENT])?;
    let field = |tape: &mut Tape<T>, j: usize| -> Result<Var> {
        let s = tape.slice(grouped, 2, j, 1)?;
        tape.reshape(s, vec![p, k])
    };
    let logit = field(tape, 0)?;
    let mut mu = [logit; 3];
    let mut log_s = [logit; 3];
    let mut coeff = [logit; 3];
    for c in 0..3 {
        mu[c] = field(tape, 1 + c)?;
        let raw_ls = field(tape, 4 + c)?;
        let clamped = tape.clamp_min(raw_ls, T::from_f64(RAW_LOG_SCALE_MIN))?;
        log_s[c] = tape.add_scalar(clamped, T::from_f64(HALF_RANGE.ln()))?;
        let raw_c = field(tape, 7 + c)?;
        coeff[c] = tape.tanh(raw_c)?;
    }
    Ok(HeadVars {
        logit,
        mu,
        log_s,
        coeff,
    })
}

/// Coupled channel means in integer units, `[P, K]` each.
pub(crate) fn coupled_means_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    hv: &HeadVars,
    r_centered: &[T],
    g_centered: &[T],
) -> Result<[Var; 3]> {
    let to_int = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let shifted = tape.add_scalar(v, T::one())?;
        tape.scale(shifted, T::from_f64(HALF_RANGE))
    };
    let mu_r = to_int(tape, hv.mu[0])?;

    let a_r = tape.mul_row_const(hv.coeff[0], r_centered.to_vec())?;
    let g_mean = tape.add(hv.mu[1], a_r)?;
    let mu_g = to_int(tape, g_mean)?;

    let b_r = tape.mul_row_const(hv.coeff[1], r_centered.to_vec())?;
    let c_g = tape.mul_row_const(hv.coeff[2], g_centered.to_vec())?;
    let b_mean = tape.add(hv.mu[2], b_r)?;
    let b_mean = tape.add(b_mean, c_g)?;
    let mu_b = to_int(tape, b_mean)?;
    Ok([mu_r, mu_g, mu_b])
}

/// Per-pixel log-likelihood `[N, H, W]` of `images` under the raw head.
pub fn log_prob_on_tape<T: Scalar>(tape: &mut Tape<T>, head: Var, images: &Images, k: usize) -> Result<Var> {
    let shape = tape.shape(head).to_vec();
    let expected = [images.len(), images.height(), images.width(), head_channels(k)];
    if shape != expected {
        return Err(Error::shape("dlm log_prob", format!("head {shape:?}, expected {expected:?}")));
    }
    let hv = unpack_on_tape(tape, head, k)?;
    let data = images.data();
    let p = data.len() / 3;
    let chan = |c: usize| -> Vec<u8> { (0..p).map(|i| data[3 * i + c]).collect() };
    let (r, g, b) = (chan(0), chan(1), chan(2));
    let cent = |v: &[u8]| -> Vec<T> { v.iter().map(|&x| T::from_f64(centered(x))).collect() };
    let means = coupled_means_on_tape(tape, &hv, &cent(&r), &cent(&g))?;

    let expand = |v: &[u8]| -> Vec<T> {
        v.iter()
            .flat_map(|&x| std::iter::repeat_n(T::from_f64(x as f64), k))
            .collect()
    };
    let lr = tape.bin_log_mass(expand(&r), means[0], hv.log_s[0])?;
    let lg = tape.bin_log_mass(expand(&g), means[1], hv.log_s[1])?;
    let lb = tape.bin_log_mass(expand(&b), means[2], hv.log_s[2])?;

    let log_pi = tape.log_softmax(hv.logit, 1)?;
    let t = tape.add(log_pi, lr)?;
    let t = tape.add(t, lg)?;
    let t = tape.add(t, lb)?;
    let lp = tape.logsumexp(t, 1)?;
    tape.reshape(lp, vec![shape[0], shape[1], shape[2]])
}
