//! Exact dependency measurement by input gradients.
//!
//! Each batch item gets its own target position; the root sums the chosen
//! activations at that position only, so the input gradient of item `n` is
//! the dependency mask of target `n`. Zeros are exact: no tolerance.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::field::{Field, FieldRegion};
use crate::network::model::{Mode, Model};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// Which activation to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTarget {
    Head,
    Vertical,
}

const PROBE_CHUNK: usize = 64;

/// Input positions with nonzero gradient, one set per target position.
pub fn dependency_masks<T: Scalar>(
    model: &Model<T>,
    h: usize,
    w: usize,
    targets: &[(usize, usize)],
    what: ProbeTarget,
    seed: u64,
) -> Result<Vec<BTreeSet<(usize, usize)>>> {
    let model = model.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::<f64>::uniform([1, h, w, 3], -1.0, 1.0, &mut rng);
    let mut out = Vec::with_capacity(targets.len());
    for chunk in targets.chunks(PROBE_CHUNK) {
        let n = chunk.len();
        let mut data = Vec::with_capacity(n * image.numel());
        for _ in 0..n {
            data.extend_from_slice(image.elems());
        }
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let x = tape.leaf(Tensor::new([n, h, w, 3], data)?);
        let labels = model.config().n_classes.map(|_| vec![0; n]);
        let f = model.forward(&mut tape, &params, x, labels.as_deref(), Mode::Eval, &mut rng)?;
        let v = match what {
            ProbeTarget::Head => f.head,
            ProbeTarget::Vertical => f.u,
        };
        let shape = tape.shape(v).to_vec();
        let c = shape[3];
        let mut mask = Tensor::<f64>::zeros(shape);
        for (k, &(i, j)) in chunk.iter().enumerate() {
            if i >= h || j >= w {
                return Err(Error::Invalid(format!("probe target ({i}, {j}) outside {h}x{w}")));
            }
            let o = mask.offset(&[k, i, j, 0]);
            mask.elems_mut()[o..o + c].fill(1.0);
        }
        let picked = tape.mul_const(v, mask)?;
        let root = tape.sum(picked)?;
        let grads = tape.backward(root)?;
        let g = grads.get(x).expect("input is a leaf");
        for k in 0..n {
            let mut set = BTreeSet::new();
            for i in 0..h {
                for j in 0..w {
                    let o = g.offset(&[k, i, j, 0]);
                    if g.elems()[o..o + 3].iter().any(|&d| d != 0.0) {
                        set.insert((i, j));
                    }
                }
            }
            out.push(set);
        }
    }
    Ok(out)
}

/// Outcome of probing every output position of an `h x w` input.
#[derive(Debug, Clone)]
pub struct CausalityReport {
    pub height: usize,
    pub width: usize,
    /// `(output, input)` pairs where the input is not strictly earlier yet has nonzero gradient.
    pub violations: Vec<((usize, usize), (usize, usize))>,
    /// `(output, input)` pairs where the input is strictly earlier but has zero gradient.
    pub unseen: Vec<((usize, usize), (usize, usize))>,
}

impl CausalityReport {
    /// No dependence on the current or any later pixel.
    pub fn is_causal(&self) -> bool {
        self.violations.is_empty()
    }

    /// Support equals the strict raster prefix at every position.
    pub fn is_exact_prefix(&self) -> bool {
        self.violations.is_empty() && self.unseen.is_empty()
    }
}

pub fn probe_causality<T: Scalar>(model: &Model<T>, h: usize, w: usize, seed: u64) -> Result<CausalityReport> {
    let targets: Vec<(usize, usize)> = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect();
    let masks = dependency_masks(model, h, w, &targets, ProbeTarget::Head, seed)?;
    let mut report = CausalityReport {
        height: h,
        width: w,
        violations: Vec::new(),
        unseen: Vec::new(),
    };
    for (&t, mask) in targets.iter().zip(&masks) {
        for &s in &targets {
            let earlier = s < t;
            match (earlier, mask.contains(&s)) {
                (false, true) => report.violations.push((t, s)),
                (true, false) => report.unseen.push((t, s)),
                _ => {}
            }
        }
    }
    Ok(report)
}

/// Measured field of a plain stack, taken at an interior position of an
/// input large enough that no border clips it.
pub fn probe_field<T: Scalar>(model: &Model<T>, seed: u64) -> Result<Field> {
    let Some(depth) = model.config().small_field else {
        return Err(Error::Invalid("field probing needs a small_field config".into()));
    };
    let reach = 2 * depth + 4;
    let (h, w) = (reach + 1, 2 * reach + 1);
    let target = (reach, reach);
    let region = |what| -> Result<FieldRegion> {
        let mask = dependency_masks(model, h, w, &[target], what, seed)?.remove(0);
        if mask.iter().any(|&(i, j)| i == 0 || j == 0 || j == w - 1) {
            return Err(Error::Invalid("probe field reaches the border".into()));
        }
        Ok(FieldRegion::from_offsets(
            mask.iter()
                .map(|&(i, j)| (i as isize - target.0 as isize, j as isize - target.1 as isize)),
        ))
    };
    Ok(Field {
        head: region(ProbeTarget::Head)?,
        vertical: region(ProbeTarget::Vertical)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::config::ModelConfig;
    use crate::network::field::{receptive_field, ReceptiveField};

    fn tiny(config: ModelConfig) -> ModelConfig {
        ModelConfig {
            n_filters: 4,
            n_mixtures: 1,
            layers_per_block: 1,
            ..config
        }
    }

    #[test]
    fn plain_stack_is_causal_on_a_small_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::<f64>::new(tiny(ModelConfig::small_field(1)), &mut rng).unwrap();
        let r = probe_causality(&model, 4, 5, 0).unwrap();
        assert!(r.is_causal(), "{:?}", r.violations);
    }

    #[test]
    fn probed_field_matches_analytic_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for depth in 0..3 {
            let cfg = tiny(ModelConfig::small_field(depth));
            let model = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
            let ReceptiveField::Local(expected) = receptive_field(&cfg).unwrap() else {
                unreachable!()
            };
            assert_eq!(probe_field(&model, 3).unwrap(), expected, "depth {depth}");
        }
    }
}
