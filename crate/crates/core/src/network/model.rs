use rand::Rng;

use crate::conv::{ConvGeometry, Padding};
use crate::error::{Error, Result};
use crate::network::config::ModelConfig;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Vertical-stream kernel (rows, cols).
pub(crate) const U_KERNEL: (usize, usize) = (2, 3);
/// Horizontal-stream kernel (rows, cols).
pub(crate) const UL_KERNEL: (usize, usize) = (2, 2);
/// Embedding kernel of the vertical stream, shifted one row down afterwards.
pub(crate) const U_EMBED_KERNEL: (usize, usize) = (1, 3);
/// Embedding kernel of the pixels left of the current one, shifted one column right.
pub(crate) const UL_EMBED_KERNEL: (usize, usize) = (2, 1);

const RESIDUAL_INIT_GAIN: f64 = 0.1;
const HEAD_INIT_GAIN: f64 = 0.1;
const CLASS_INIT_STD: f64 = 0.05;

/// Zero-padded so that output row `i` only sees input rows `<= i`.
pub(crate) fn down_shifted(kh: usize, kw: usize, stride: usize) -> ConvGeometry {
    let side = (kw - 1) / 2;
    ConvGeometry::new(kh, kw, (stride, stride), Padding::new(kh - 1, 0, side, kw - 1 - side))
}

/// Zero-padded so that output `(i, j)` only sees rows `<= i` and columns `<= j`.
pub(crate) fn down_right_shifted(kh: usize, kw: usize, stride: usize) -> ConvGeometry {
    ConvGeometry::new(kh, kw, (stride, stride), Padding::new(kh - 1, 0, kw - 1, 0))
}

/// Stride-2 transposed geometry doubling both extents; row `2i` and `2i+1`
/// both come from row `i`.
pub(crate) fn down_shifted_up(kh: usize, kw: usize) -> ConvGeometry {
    let left = (kw - 1) / 2;
    ConvGeometry::new(kh, kw, (2, 2), Padding::new(0, kh - 2, left, kw - 2 - left))
}

pub(crate) fn down_right_shifted_up(kh: usize, kw: usize) -> ConvGeometry {
    ConvGeometry::new(kh, kw, (2, 2), Padding::new(0, kh - 2, 0, kw - 2))
}

fn kernel_extent<T: Scalar>(tape: &Tape<T>, kernel: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.shape(kernel) {
        [kh, kw, _, _] if kh > 0 && kw > 0 => Ok((kh, kw)),
        ref s => Err(Error::shape(op, format!("kernel {s:?}"))),
    }
}

/// Convolution whose output row `i` sees only input rows `<= i`; `kernel: [kh, kw, cin, cout]`.
pub fn down_shifted_conv<T: Scalar>(tape: &mut Tape<T>, x: Var, kernel: Var, stride: usize) -> Result<Var> {
    let (kh, kw) = kernel_extent(tape, kernel, "down_shifted_conv")?;
    if kw % 2 == 0 {
        return Err(Error::shape("down_shifted_conv", format!("kernel width {kw} has no center column")));
    }
    tape.conv2d(x, kernel, down_shifted(kh, kw, stride))
}

/// Convolution whose output `(i, j)` sees only inputs `(i', j')` with `i' <= i`, `j' <= j`.
pub fn down_right_shifted_conv<T: Scalar>(tape: &mut Tape<T>, x: Var, kernel: Var, stride: usize) -> Result<Var> {
    let (kh, kw) = kernel_extent(tape, kernel, "down_right_shifted_conv")?;
    tape.conv2d(x, kernel, down_right_shifted(kh, kw, stride))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    /// Deterministic.
    Eval,
}

/// Instrumentation knobs for tests and probes.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replace the skip tensors emitted by this encoder block with zeros.
    pub zero_encoder_skips: Option<usize>,
}

/// Result of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Raw head, `[N, H, W, head_channels]`.
    pub head: Var,
    /// Final vertical-stream activations at full resolution.
    pub u: Var,
    /// Final horizontal-stream activations at full resolution.
    pub ul: Var,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Vertical,
    Horizontal,
}

#[derive(Debug, Clone)]
struct Gated {
    stream: Stream,
    conv1: Lin,
    aux: Option<Lin>,
    conv2: Lin,
    class: Option<usize>,
}

#[derive(Debug, Clone)]
struct Pair {
    u: Gated,
    ul: Gated,
}

#[derive(Debug, Clone)]
struct Resample {
    u: Lin,
    ul: Lin,
}

#[derive(Debug, Clone)]
struct Wiring {
    embed_u: Lin,
    embed_ul_above: Lin,
    embed_ul_left: Lin,
    plain: Vec<Pair>,
    encoder: Vec<Vec<Pair>>,
    down: Vec<Resample>,
    decoder: Vec<Vec<Pair>>,
    up: Vec<Resample>,
    out: Lin,
}

struct Builder<'r, T, R> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    rng: &'r mut R,
    n_classes: Option<usize>,
    nf: usize,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn conv(&mut self, name: &str, (kh, kw): (usize, usize), cin: usize, cout: usize, gain: f64) -> Lin {
        let std = gain / ((kh * kw * cin) as f64).sqrt();
        let t = Tensor::randn([kh, kw, cin, cout], std, self.rng);
        let w = self.push(format!("{name}.w"), t);
        let b = self.push(format!("{name}.b"), Tensor::zeros([cout]));
        Lin { w, b }
    }

    fn dense(&mut self, name: &str, cin: usize, cout: usize, gain: f64) -> Lin {
        let std = gain / (cin as f64).sqrt();
        let t = Tensor::randn([cin, cout], std, self.rng);
        let w = self.push(format!("{name}.w"), t);
        let b = self.push(format!("{name}.b"), Tensor::zeros([cout]));
        Lin { w, b }
    }

    fn gated(&mut self, name: &str, stream: Stream, aux_channels: usize) -> Gated {
        let nf = self.nf;
        let kernel = match stream {
            Stream::Vertical => U_KERNEL,
            Stream::Horizontal => UL_KERNEL,
        };
        let conv1 = self.conv(&format!("{name}.conv1"), kernel, 2 * nf, nf, 1.0);
        let aux = (aux_channels > 0).then(|| self.dense(&format!("{name}.aux"), 2 * aux_channels, nf, 1.0));
        let conv2 = self.conv(&format!("{name}.conv2"), kernel, 2 * nf, 2 * nf, RESIDUAL_INIT_GAIN);
        let class = self.n_classes.map(|c| {
            let t = Tensor::randn([c, 2 * nf], CLASS_INIT_STD, self.rng);
            self.push(format!("{name}.class"), t)
        });
        Gated {
            stream,
            conv1,
            aux,
            conv2,
            class,
        }
    }

    fn pair(&mut self, name: &str, u_aux: usize, ul_aux: usize) -> Pair {
        Pair {
            u: self.gated(&format!("{name}.u"), Stream::Vertical, u_aux),
            ul: self.gated(&format!("{name}.ul"), Stream::Horizontal, ul_aux),
        }
    }
}

/// Two-stream causal network with its parameters.
#[derive(Clone)]
pub struct Model<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    wiring: Wiring,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let nf = config.n_filters;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng,
            n_classes: config.n_classes,
            nf,
        };
        let embed_u = b.conv("embed.u", U_EMBED_KERNEL, 4, nf, 1.0);
        let embed_ul_above = b.conv("embed.ul_above", U_EMBED_KERNEL, 4, nf, 1.0);
        let embed_ul_left = b.conv("embed.ul_left", UL_EMBED_KERNEL, 4, nf, 1.0);

        let mut plain = Vec::new();
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        let mut decoder = Vec::new();
        let mut up = Vec::new();
        if let Some(depth) = config.small_field {
            for l in 0..depth {
                plain.push(b.pair(&format!("plain{l}"), 0, nf));
            }
        } else {
            let l = config.layers_per_block;
            for blk in 0..3 {
                encoder.push((0..l).map(|i| b.pair(&format!("enc{blk}.{i}"), 0, nf)).collect());
                if blk < 2 {
                    down.push(Resample {
                        u: b.conv(&format!("down{blk}.u"), U_KERNEL, nf, nf, 1.0),
                        ul: b.conv(&format!("down{blk}.ul"), UL_KERNEL, nf, nf, 1.0),
                    });
                }
            }
            let (u_aux, ul_aux) = if config.use_shortcuts { (nf, 2 * nf) } else { (0, nf) };
            for blk in 0..3 {
                let layers = if blk == 0 { l } else { l + 1 };
                decoder.push(
                    (0..layers)
                        .map(|i| b.pair(&format!("dec{blk}.{i}"), u_aux, ul_aux))
                        .collect(),
                );
                if blk < 2 {
                    up.push(Resample {
                        u: b.conv(&format!("up{blk}.u"), U_KERNEL, nf, nf, 1.0),
                        ul: b.conv(&format!("up{blk}.ul"), UL_KERNEL, nf, nf, 1.0),
                    });
                }
            }
        }
        let out = b.dense("out", 2 * nf, config.head_channels(), HEAD_INIT_GAIN);
        let wiring = Wiring {
            embed_u,
            embed_ul_above,
            embed_ul_left,
            plain,
            encoder,
            down,
            decoder,
            up,
            out,
        };
        Ok(Model {
            config,
            names: b.names,
            params: b.tensors,
            wiring,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Replaces all parameters; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "set_params",
                format!("{} tensors, model has {}", params.len(), self.params.len()),
            ));
        }
        for ((new, old), name) in params.iter().zip(&self.params).zip(&self.names) {
            if new.shape() != old.shape() {
                return Err(Error::shape(
                    "set_params",
                    format!("{name}: {:?} vs {:?}", new.shape(), old.shape()),
                ));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            wiring: self.wiring.clone(),
        }
    }

    /// Places the parameters on `tape`, as differentiable leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Runs the network on `x: [N, H, W, 3]` in centered units.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        labels: Option<&[usize]>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Forward> {
        self.forward_with(tape, params, x, labels, mode, rng, ForwardOptions::default())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        labels: Option<&[usize]>,
        mode: Mode,
        rng: &mut impl Rng,
        opts: ForwardOptions,
    ) -> Result<Forward> {
        if params.len() != self.params.len() {
            return Err(Error::shape("forward", "parameter count mismatch"));
        }
        let shape = tape.shape(x).to_vec();
        let [n, h, w, 3] = shape[..] else {
            return Err(Error::shape("forward", format!("input {shape:?}, expected [N, H, W, 3]")));
        };
        self.config.check_input(h, w)?;
        let labels = match (self.config.n_classes, labels) {
            (Some(_), Some(l)) if l.len() == n => Some(l),
            (Some(_), Some(l)) => {
                return Err(Error::shape("forward", format!("{} labels for batch of {n}", l.len())))
            }
            (Some(_), None) => return Err(Error::Invalid("class-conditional model needs labels".into())),
            (None, Some(_)) => return Err(Error::Invalid("model is not class-conditional".into())),
            (None, None) => None,
        };
        let mut cx = Ctx {
            tape,
            params,
            labels,
            dropout: match mode {
                Mode::Train => self.config.dropout_rate,
                Mode::Eval => 0.0,
            },
            rng,
        };
        let wi = &self.wiring;

        let ones = cx.tape.constant(Tensor::full([n, h, w, 1], T::one()));
        let xin = cx.tape.concat(&[x, ones], 3)?;
        let (eh, ew) = U_EMBED_KERNEL;
        let (lh, lw) = UL_EMBED_KERNEL;
        let u0 = cx.conv(xin, wi.embed_u, down_shifted(eh, ew, 1))?;
        let mut u = cx.down_shift(u0)?;
        let a0 = cx.conv(xin, wi.embed_ul_above, down_shifted(eh, ew, 1))?;
        let a0 = cx.down_shift(a0)?;
        let l0 = cx.conv(xin, wi.embed_ul_left, down_right_shifted(lh, lw, 1))?;
        let l0 = cx.right_shift(l0)?;
        let mut ul = cx.tape.add(a0, l0)?;

        if self.config.small_field.is_some() {
            for pair in &wi.plain {
                u = cx.gated(&pair.u, u, None)?;
                ul = cx.gated(&pair.ul, ul, Some(u))?;
            }
        } else {
            let mut u_skips = vec![u];
            let mut ul_skips = vec![ul];
            let zeroed = |cx: &mut Ctx<'_, T, _>, blk: usize, v: Var| -> Var {
                if opts.zero_encoder_skips == Some(blk) {
                    cx.tape.constant(Tensor::zeros(cx.tape.shape(v).to_vec()))
                } else {
                    v
                }
            };
            u_skips[0] = zeroed(&mut cx, 0, u);
            ul_skips[0] = zeroed(&mut cx, 0, ul);
            for (blk, layers) in wi.encoder.iter().enumerate() {
                for pair in layers {
                    u = cx.gated(&pair.u, u, None)?;
                    ul = cx.gated(&pair.ul, ul, Some(u))?;
                    u_skips.push(zeroed(&mut cx, blk, u));
                    ul_skips.push(zeroed(&mut cx, blk, ul));
                }
                if let Some(rs) = wi.down.get(blk) {
                    u = cx.conv(u, rs.u, down_shifted(U_KERNEL.0, U_KERNEL.1, 2))?;
                    ul = cx.conv(ul, rs.ul, down_right_shifted(UL_KERNEL.0, UL_KERNEL.1, 2))?;
                    u_skips.push(zeroed(&mut cx, blk, u));
                    ul_skips.push(zeroed(&mut cx, blk, ul));
                }
            }

            let mut u = u_skips.pop().expect("encoder output");
            let mut ul = ul_skips.pop().expect("encoder output");
            for (blk, layers) in wi.decoder.iter().enumerate() {
                for pair in layers {
                    if self.config.use_shortcuts {
                        let su = u_skips.pop().ok_or_else(|| Error::Invalid("skip stack underflow".into()))?;
                        let sl = ul_skips.pop().ok_or_else(|| Error::Invalid("skip stack underflow".into()))?;
                        u = cx.gated(&pair.u, u, Some(su))?;
                        let aux = cx.tape.concat(&[u, sl], 3)?;
                        ul = cx.gated(&pair.ul, ul, Some(aux))?;
                    } else {
                        u = cx.gated(&pair.u, u, None)?;
                        ul = cx.gated(&pair.ul, ul, Some(u))?;
                    }
                }
                if let Some(rs) = wi.up.get(blk) {
                    u = cx.conv_up(u, rs.u, down_shifted_up(U_KERNEL.0, U_KERNEL.1))?;
                    ul = cx.conv_up(ul, rs.ul, down_right_shifted_up(UL_KERNEL.0, UL_KERNEL.1))?;
                }
            }
            if self.config.use_shortcuts && (!u_skips.is_empty() || !ul_skips.is_empty()) {
                return Err(Error::Invalid("unconsumed skip connections".into()));
            }
            return self.finish(&mut cx, u, ul);
        }
        self.finish(&mut cx, u, ul)
    }

    fn finish<R: Rng>(&self, cx: &mut Ctx<'_, T, R>, u: Var, ul: Var) -> Result<Forward> {
        let act = cx.concat_elu(ul)?;
        let out = self.wiring.out;
        let head = cx.tape.dense(act, cx.params[out.w], Some(cx.params[out.b]))?;
        Ok(Forward { head, u, ul })
    }
}

impl<T: Scalar> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("tensors", &self.params.len())
            .field("scalars", &self.param_count())
            .finish()
    }
}

struct Ctx<'a, T, R> {
    tape: &'a mut Tape<T>,
    params: &'a [Var],
    labels: Option<&'a [usize]>,
    dropout: f64,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Ctx<'_, T, R> {
    fn conv(&mut self, x: Var, lin: Lin, geom: ConvGeometry) -> Result<Var> {
        let y = self.tape.conv2d(x, self.params[lin.w], geom)?;
        self.tape.add_bias(y, self.params[lin.b])
    }

    fn conv_up(&mut self, x: Var, lin: Lin, geom: ConvGeometry) -> Result<Var> {
        let y = self.tape.conv2d_transpose(x, self.params[lin.w], geom)?;
        self.tape.add_bias(y, self.params[lin.b])
    }

    fn dense(&mut self, x: Var, lin: Lin) -> Result<Var> {
        self.tape.dense(x, self.params[lin.w], Some(self.params[lin.b]))
    }

    fn down_shift(&mut self, x: Var) -> Result<Var> {
        let h = self.tape.shape(x)[1];
        let p = self.tape.pad(x, &[(0, 0), (1, 0), (0, 0), (0, 0)])?;
        self.tape.slice(p, 1, 0, h)
    }

    fn right_shift(&mut self, x: Var) -> Result<Var> {
        let w = self.tape.shape(x)[2];
        let p = self.tape.pad(x, &[(0, 0), (0, 0), (1, 0), (0, 0)])?;
        self.tape.slice(p, 2, 0, w)
    }

    fn concat_elu(&mut self, x: Var) -> Result<Var> {
        let pos = self.tape.elu(x)?;
        let nx = self.tape.neg(x)?;
        let neg = self.tape.elu(nx)?;
        self.tape.concat(&[pos, neg], 3)
    }

    fn gated(&mut self, g: &Gated, x: Var, aux: Option<Var>) -> Result<Var> {
        let (kh, kw, geom) = match g.stream {
            Stream::Vertical => (U_KERNEL.0, U_KERNEL.1, down_shifted as fn(usize, usize, usize) -> ConvGeometry),
            Stream::Horizontal => (UL_KERNEL.0, UL_KERNEL.1, down_right_shifted as fn(usize, usize, usize) -> ConvGeometry),
        };
        let a = self.concat_elu(x)?;
        let mut c = self.conv(a, g.conv1, geom(kh, kw, 1))?;
        match (aux, g.aux) {
            (Some(aux), Some(lin)) => {
                let a = self.concat_elu(aux)?;
                let proj = self.dense(a, lin)?;
                c = self.tape.add(c, proj)?;
            }
            (None, None) => {}
            _ => return Err(Error::Invalid("aux input does not match layer wiring".into())),
        }
        let mut c = self.concat_elu(c)?;
        if self.dropout > 0.0 {
            let keep = 1.0 - self.dropout;
            let shape = self.tape.shape(c).to_vec();
            let rng = &mut *self.rng;
            let scale = T::from_f64(1.0 / keep);
            let numel: usize = shape.iter().product();
            // keep probability quantized to 1/65536, four draws per u64
            let threshold = (keep * 65536.0).round() as u32;
            let mut elems = Vec::with_capacity(numel + 3);
            while elems.len() < numel {
                let bits = rng.next_u64();
                for lane in 0..4 {
                    let draw = ((bits >> (16 * lane)) & 0xffff) as u32;
                    elems.push(if draw < threshold { scale } else { T::zero() });
                }
            }
            elems.truncate(numel);
            let mask = Tensor::from_parts(shape, elems);
            c = self.tape.dropout_mask_apply(c, mask)?;
        }
        let mut c2 = self.conv(c, g.conv2, geom(kh, kw, 1))?;
        if let (Some(table), Some(labels)) = (g.class, self.labels) {
            let bias = self.tape.gather_rows(self.params[table], labels)?;
            c2 = self.tape.add_item_bias(c2, bias)?;
        }
        let nf = self.tape.shape(x)[3];
        let parts = self.tape.split(c2, 3, &[nf, nf])?;
        let gate = self.tape.sigmoid(parts[1])?;
        let gated = self.tape.mul(parts[0], gate)?;
        self.tape.add(x, gated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(config: ModelConfig) -> ModelConfig {
        ModelConfig {
            n_filters: 4,
            layers_per_block: 1,
            n_mixtures: 2,
            ..config
        }
    }

    fn run(model: &Model<f64>, x: &Tensor<f64>, labels: Option<&[usize]>, opts: ForwardOptions) -> Tensor<f64> {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = model
            .forward_with(&mut tape, &p, xv, labels, Mode::Eval, &mut rng, opts)
            .unwrap();
        tape.value(f.head).clone()
    }

    #[test]
    fn resampling_geometries_halve_and_double() {
        let g = down_shifted(2, 3, 2);
        assert_eq!(g.output_hw(8, 8).unwrap(), (4, 4));
        let g = down_right_shifted(2, 2, 2);
        assert_eq!(g.output_hw(8, 8).unwrap(), (4, 4));
        assert_eq!(down_shifted_up(2, 3).transpose_output_hw(4, 4).unwrap(), (8, 8));
        assert_eq!(down_right_shifted_up(2, 2).transpose_output_hw(4, 4).unwrap(), (8, 8));
        assert_eq!(down_shifted(2, 3, 1).output_hw(5, 7).unwrap(), (5, 7));
    }

    #[test]
    fn shifted_convs_on_a_delta_stay_below_and_right() {
        let mut tape = Tape::<f64>::new();
        let mut img = Tensor::zeros([1, 6, 6, 1]);
        let o = img.offset(&[0, 3, 2, 0]);
        img.elems_mut()[o] = 1.0;
        let x = tape.constant(img);
        let k = tape.constant(Tensor::full([2, 3, 1, 1], 1.0));
        let y = down_shifted_conv(&mut tape, x, k, 1).unwrap();
        let v = tape.value(y);
        for i in 0..6 {
            for j in 0..6 {
                if v.at(&[0, i, j, 0]) != 0.0 {
                    assert!(i >= 3, "({i}, {j})");
                }
            }
        }
        let k2 = tape.constant(Tensor::full([2, 2, 1, 1], 1.0));
        let y = down_right_shifted_conv(&mut tape, x, k2, 1).unwrap();
        let v = tape.value(y);
        for i in 0..6 {
            for j in 0..6 {
                if v.at(&[0, i, j, 0]) != 0.0 {
                    assert!(i >= 3 && j >= 2, "({i}, {j})");
                }
            }
        }
        let even = tape.constant(Tensor::full([2, 2, 1, 1], 1.0));
        assert!(down_shifted_conv(&mut tape, x, even, 1).is_err());
        let z = tape.constant(Tensor::zeros([1, 6, 6, 1]));
        let y = down_shifted_conv(&mut tape, z, k, 1).unwrap();
        assert!(tape.value(y).elems().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_has_ten_k_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::<f64>::new(tiny(ModelConfig::desk()), &mut rng).unwrap();
        let x = Tensor::uniform([2, 8, 8, 3], -1.0, 1.0, &mut rng);
        let head = run(&model, &x, None, ForwardOptions::default());
        assert_eq!(head.shape(), &[2, 8, 8, 20]);
        assert!(head.is_finite());
    }

    #[test]
    fn decoder_consumes_every_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for l in 1..4 {
            let cfg = ModelConfig {
                layers_per_block: l,
                ..tiny(ModelConfig::desk())
            };
            let model = Model::<f64>::new(cfg, &mut rng).unwrap();
            let x = Tensor::uniform([1, 4, 4, 3], -1.0, 1.0, &mut rng);
            run(&model, &x, None, ForwardOptions::default());
        }
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::<f64>::new(tiny(ModelConfig::desk()), &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([1, 6, 8, 3]));
        let err = model.forward(&mut tape, &p, x, None, Mode::Eval, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn skip_zeroing_matters_only_with_shortcuts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform([1, 8, 8, 3], -1.0, 1.0, &mut rng);
        let zero = ForwardOptions {
            zero_encoder_skips: Some(0),
        };
        let on = Model::<f64>::new(tiny(ModelConfig::desk()), &mut rng).unwrap();
        let a = run(&on, &x, None, ForwardOptions::default());
        let b = run(&on, &x, None, zero);
        assert!(a.elems().iter().zip(b.elems()).any(|(p, q)| p != q));

        let off_cfg = ModelConfig {
            use_shortcuts: false,
            ..tiny(ModelConfig::desk())
        };
        let off = Model::<f64>::new(off_cfg, &mut rng).unwrap();
        let a = run(&off, &x, None, ForwardOptions::default());
        let b = run(&off, &x, None, zero);
        assert_eq!(a, b);
    }

    #[test]
    fn class_bias_depends_on_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig {
            n_classes: Some(3),
            ..tiny(ModelConfig::small_field(2))
        };
        let mut model = Model::<f64>::new(cfg, &mut rng).unwrap();
        let x = Tensor::uniform([1, 4, 4, 3], -1.0, 1.0, &mut rng);
        let a = run(&model, &x, Some(&[0]), ForwardOptions::default());
        let b = run(&model, &x, Some(&[2]), ForwardOptions::default());
        assert_ne!(a, b);

        let class_ids: Vec<usize> = (0..model.param_names().len())
            .filter(|&i| model.param_names()[i].ends_with(".class"))
            .collect();
        assert_eq!(class_ids.len(), 4);
        for i in class_ids {
            let z = Tensor::zeros(model.params()[i].shape().to_vec());
            model.params_mut()[i] = z;
        }
        let a = run(&model, &x, Some(&[0]), ForwardOptions::default());
        let b = run(&model, &x, Some(&[2]), ForwardOptions::default());
        assert_eq!(a, b);
    }

    #[test]
    fn label_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ModelConfig {
            n_classes: Some(3),
            ..tiny(ModelConfig::small_field(1))
        };
        let model = Model::<f64>::new(cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([1, 2, 2, 3]));
        assert!(model.forward(&mut tape, &p, x, None, Mode::Eval, &mut rng).is_err());
        assert!(model.forward(&mut tape, &p, x, Some(&[3]), Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn eval_is_deterministic_and_train_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Model::<f64>::new(tiny(ModelConfig::small_field(2)), &mut rng).unwrap();
        let xt = Tensor::uniform([1, 4, 4, 3], -1.0, 1.0, &mut rng);
        let go = |mode: Mode, seed: u64| {
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, false);
            let x = tape.constant(xt.clone());
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let f = model.forward(&mut tape, &p, x, None, mode, &mut r).unwrap();
            tape.value(f.head).clone()
        };
        assert_eq!(go(Mode::Eval, 1), go(Mode::Eval, 2));
        assert_ne!(go(Mode::Train, 1), go(Mode::Train, 2));
        assert_eq!(go(Mode::Train, 3), go(Mode::Train, 3));
    }
}
