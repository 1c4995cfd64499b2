//! Raw matrix dumps to HSIC.
//!
//! A dump is a headerless array of `width · height · bands` numbers. The
//! interleave names the axis order from slowest to fastest: `bsq` is
//! band, row, column; `bil` is row, band, column; `bip` is row, column, band.
//! With column-major pixel order (MATLAB `fwrite`, Fortran) rows and columns
//! swap roles, so `bsq` reads band, column, row.

use anyhow::{bail, ensure, Context, Result};
use clap::ValueEnum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Interleave {
    Bsq,
    Bil,
    Bip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PixelOrder {
    Row,
    Column,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    U8,
    U16,
    I16,
    I32,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 | Dtype::I16 => 2,
            Dtype::I32 | Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn read(self, b: &[u8], big_endian: bool) -> f64 {
        macro_rules! num {
            ($t:ty) => {{
                let a = b.try_into().expect("sized chunk");
                if big_endian {
                    <$t>::from_be_bytes(a) as f64
                } else {
                    <$t>::from_le_bytes(a) as f64
                }
            }};
        }
        match self {
            Dtype::U8 => b[0] as f64,
            Dtype::U16 => num!(u16),
            Dtype::I16 => num!(i16),
            Dtype::I32 => num!(i32),
            Dtype::F32 => num!(f32),
            Dtype::F64 => num!(f64),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub interleave: Interleave,
    pub order: PixelOrder,
}

pub fn decode(bytes: &[u8], dtype: Dtype, big_endian: bool, count: usize) -> Result<Vec<f64>> {
    let want = count * dtype.size();
    ensure!(
        bytes.len() == want,
        "expected {count} values of {} bytes ({want} bytes), found {} bytes",
        dtype.size(),
        bytes.len()
    );
    Ok(bytes.chunks_exact(dtype.size()).map(|c| dtype.read(c, big_endian)).collect())
}

/// Band-interleaved-by-pixel raster in row-major pixel order.
pub fn to_bip(values: &[f64], layout: &Layout) -> Vec<f32> {
    let Layout {
        width: w,
        height: h,
        bands: b,
        ..
    } = *layout;
    // Slow and fast spatial extents as stored in the dump.
    let (slow, fast) = match layout.order {
        PixelOrder::Row => (h, w),
        PixelOrder::Column => (w, h),
    };
    let mut out = vec![0.0f32; w * h * b];
    for r in 0..h {
        for c in 0..w {
            let (s, f) = match layout.order {
                PixelOrder::Row => (r, c),
                PixelOrder::Column => (c, r),
            };
            for k in 0..b {
                let src = match layout.interleave {
                    Interleave::Bsq => (k * slow + s) * fast + f,
                    Interleave::Bil => (s * b + k) * fast + f,
                    Interleave::Bip => (s * fast + f) * b + k,
                };
                out[(r * w + c) * b + k] = values[src] as f32;
            }
        }
    }
    out
}

/// Label raster in row-major pixel order; values must fit in 16 bits.
pub fn labels_to_rows(values: &[f64], layout: &Layout) -> Result<Vec<u16>> {
    let (w, h) = (layout.width, layout.height);
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let v = match layout.order {
                PixelOrder::Row => values[r * w + c],
                PixelOrder::Column => values[c * h + r],
            };
            if !(0.0..=u16::MAX as f64).contains(&v) || v.fract() != 0.0 {
                bail!("label {v} at pixel ({r}, {c}) is not a 16-bit class id");
            }
            out.push(v as u16);
        }
    }
    Ok(out)
}

pub fn read(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(interleave: Interleave, order: PixelOrder) -> Layout {
        Layout {
            width: 3,
            height: 2,
            bands: 2,
            interleave,
            order,
        }
    }

    /// Value `100·band + 10·row + col` makes every position self-describing.
    fn expected() -> Vec<f32> {
        let mut v = Vec::new();
        for r in 0..2 {
            for c in 0..3 {
                for k in 0..2 {
                    v.push((100 * k + 10 * r + c) as f32);
                }
            }
        }
        v
    }

    fn dump(interleave: Interleave, order: PixelOrder) -> Vec<f64> {
        let mut v = Vec::new();
        let val = |k: usize, r: usize, c: usize| (100 * k + 10 * r + c) as f64;
        let (rows, cols): (Vec<usize>, Vec<usize>) = ((0..2).collect(), (0..3).collect());
        let spatial: Vec<(usize, usize)> = match order {
            PixelOrder::Row => rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect(),
            PixelOrder::Column => cols.iter().flat_map(|&c| rows.iter().map(move |&r| (r, c))).collect(),
        };
        let fast = if order == PixelOrder::Row { 3 } else { 2 };
        match interleave {
            Interleave::Bsq => {
                for k in 0..2 {
                    v.extend(spatial.iter().map(|&(r, c)| val(k, r, c)));
                }
            }
            Interleave::Bip => {
                for &(r, c) in &spatial {
                    v.extend((0..2).map(|k| val(k, r, c)));
                }
            }
            Interleave::Bil => {
                for line in spatial.chunks(fast) {
                    for k in 0..2 {
                        v.extend(line.iter().map(|&(r, c)| val(k, r, c)));
                    }
                }
            }
        }
        v
    }

    #[test]
    fn every_interleave_and_order_lands_in_bip() {
        for il in [Interleave::Bsq, Interleave::Bil, Interleave::Bip] {
            for order in [PixelOrder::Row, PixelOrder::Column] {
                assert_eq!(to_bip(&dump(il, order), &layout(il, order)), expected(), "{il:?} {order:?}");
            }
        }
    }

    #[test]
    fn decodes_both_endians() {
        assert_eq!(decode(&[1, 2], Dtype::U16, false, 1).unwrap(), vec![513.0]);
        assert_eq!(decode(&[1, 2], Dtype::U16, true, 1).unwrap(), vec![258.0]);
        assert_eq!(decode(&(-3i16).to_le_bytes(), Dtype::I16, false, 1).unwrap(), vec![-3.0]);
        assert_eq!(decode(&1.5f64.to_be_bytes(), Dtype::F64, true, 1).unwrap(), vec![1.5]);
        assert!(decode(&[0; 3], Dtype::F32, false, 1).is_err());
    }

    #[test]
    fn labels_must_be_small_integers() {
        let l = layout(Interleave::Bip, PixelOrder::Column);
        assert_eq!(labels_to_rows(&[0.0, 3.0, 1.0, 4.0, 2.0, 5.0], &l).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert!(labels_to_rows(&[0.5; 6], &l).is_err());
        assert!(labels_to_rows(&[-1.0; 6], &l).is_err());
    }
}
