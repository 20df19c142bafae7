use std::collections::BTreeSet;
use std::fmt;

use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::network::config::ModelConfig;
use crate::network::model::{down_right_shifted, down_shifted, U_EMBED_KERNEL, UL_EMBED_KERNEL, UL_KERNEL, U_KERNEL};

/// Input offsets `(di, dj)` an output position depends on, relative to that position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FieldRegion {
    offsets: BTreeSet<(isize, isize)>,
}

impl FieldRegion {
    pub fn from_offsets(offsets: impl IntoIterator<Item = (isize, isize)>) -> Self {
        FieldRegion {
            offsets: offsets.into_iter().collect(),
        }
    }

    pub fn offsets(&self) -> &BTreeSet<(isize, isize)> {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Number of rows above the pixel that contribute.
    pub fn rows_above(&self) -> usize {
        self.offsets.iter().map(|&(di, _)| (-di).max(0) as usize).max().unwrap_or(0)
    }

    /// Inclusive column offsets spanned by the rows above.
    pub fn above_cols(&self) -> Option<(isize, isize)> {
        let cols = self.offsets.iter().filter(|&&(di, _)| di < 0).map(|&(_, dj)| dj);
        let v: Vec<isize> = cols.collect();
        Some((*v.iter().min()?, *v.iter().max()?))
    }

    /// Width of the region above the pixel.
    pub fn width(&self) -> usize {
        self.above_cols().map_or(0, |(lo, hi)| (hi - lo + 1) as usize)
    }

    /// Cells to the left of the pixel in its own row.
    pub fn left(&self) -> usize {
        self.offsets.iter().filter(|&&(di, _)| di == 0).count()
    }

    /// True when the region is a full rectangle above plus a contiguous run to the left.
    pub fn is_rectangle_plus_left(&self) -> bool {
        let rows = self.rows_above() as isize;
        let left = self.left() as isize;
        let Some((lo, hi)) = self.above_cols() else {
            return left == 0 && self.offsets.iter().all(|&(di, dj)| di == 0 && (-left..0).contains(&dj));
        };
        let expected = (rows as usize) * ((hi - lo + 1) as usize) + left as usize;
        expected == self.offsets.len()
            && self.offsets.iter().all(|&(di, dj)| {
                (di < 0 && di >= -rows && (lo..=hi).contains(&dj)) || (di == 0 && (-left..0).contains(&dj))
            })
    }
}

impl fmt::Display for FieldRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.above_cols() {
            Some((lo, hi)) => write!(
                f,
                "{} rows above x {} wide (cols {lo}..={hi}), {} left",
                self.rows_above(),
                self.width(),
                self.left()
            ),
            None => write!(f, "no rows above, {} left", self.left()),
        }
    }
}

/// Dependency regions of the head and of the vertical stream alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub head: FieldRegion,
    pub vertical: FieldRegion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReceptiveField {
    /// Finite region, identical for every interior pixel.
    Local(Field),
    /// Down/up-sampling makes the field cover the whole raster prefix at desk sizes.
    WholePrefix,
}

type Offsets = BTreeSet<(isize, isize)>;

fn conv(s: &Offsets, g: ConvGeometry) -> Offsets {
    let mut out = Offsets::new();
    for &(di, dj) in s {
        for a in 0..g.kh {
            for b in 0..g.kw {
                out.insert((di + a as isize - g.padding.top as isize, dj + b as isize - g.padding.left as isize));
            }
        }
    }
    out
}

fn shift(s: &Offsets, (di, dj): (isize, isize)) -> Offsets {
    s.iter().map(|&(i, j)| (i + di, j + dj)).collect()
}

fn gated(x: &Offsets, aux: Option<&Offsets>, g: ConvGeometry) -> Offsets {
    let mut c = conv(x, g);
    if let Some(a) = aux {
        c.extend(a.iter().copied());
    }
    let mut out = conv(&c, g);
    out.extend(x.iter().copied());
    out
}

/// Analytic dependency region of a plain (small-field) stack.
pub fn receptive_field(config: &ModelConfig) -> Result<ReceptiveField> {
    config.validate()?;
    let Some(depth) = config.small_field else {
        return Ok(ReceptiveField::WholePrefix);
    };
    let pixel: Offsets = [(0, 0)].into();
    let (eh, ew) = U_EMBED_KERNEL;
    let (lh, lw) = UL_EMBED_KERNEL;
    let mut u = shift(&conv(&pixel, down_shifted(eh, ew, 1)), (-1, 0));
    let mut ul = shift(&conv(&pixel, down_shifted(eh, ew, 1)), (-1, 0));
    ul.extend(shift(&conv(&pixel, down_right_shifted(lh, lw, 1)), (0, -1)));
    let gu = down_shifted(U_KERNEL.0, U_KERNEL.1, 1);
    let gul = down_right_shifted(UL_KERNEL.0, UL_KERNEL.1, 1);
    for _ in 0..depth {
        u = gated(&u, None, gu);
        ul = gated(&ul, Some(&u), gul);
    }
    let field = Field {
        head: FieldRegion { offsets: ul },
        vertical: FieldRegion { offsets: u },
    };
    if field.head.offsets.iter().any(|&(di, dj)| di > 0 || (di == 0 && dj >= 0)) {
        return Err(Error::Invalid("analytic field is not causal".into()));
    }
    Ok(ReceptiveField::Local(field))
}
