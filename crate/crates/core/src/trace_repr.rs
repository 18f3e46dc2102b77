//! Folding side-channel traces into fixed-shape `K x N x N` matrices.
//!
//! Record `f` of a trace lands at flat index `f = k*N*N + row*N + col`,
//! i.e. row-major within a channel and channels filled in order. Cells past
//! the end of the trace are zero. Because the fill order is a fixed
//! bijection, [`unfold_index`] recovers the record position of any cell,
//! which is what leakage localization relies on.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cache_sim::ActivityVector;
use crate::error::{Error, Result};
use crate::trace_model::SideChannelTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatrixShape {
    pub channels: usize,
    pub side: usize,
}

impl MatrixShape {
    pub fn new(channels: usize, side: usize) -> Result<Self> {
        if channels == 0 || side == 0 {
            return Err(Error::Config(format!(
                "matrix shape {channels}x{side}x{side} must be positive"
            )));
        }
        Ok(Self { channels, side })
    }

    pub fn plane(&self) -> usize {
        self.side * self.side
    }

    pub fn capacity(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn flat_index(&self, channel: usize, row: usize, col: usize) -> Result<usize> {
        if channel >= self.channels || row >= self.side || col >= self.side {
            return Err(Error::OutOfBounds {
                index: channel * self.plane() + row * self.side + col,
                capacity: self.capacity(),
            });
        }
        Ok(channel * self.plane() + row * self.side + col)
    }

    pub fn cell(&self, flat: usize) -> (usize, usize, usize) {
        let plane = self.plane();
        (flat / plane, (flat % plane) / self.side, flat % self.side)
    }
}

/// What to do when a trace is longer than the matrix capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Overflow {
    #[default]
    Error,
    Truncate,
}

impl std::str::FromStr for Overflow {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "error" => Ok(Self::Error),
            "truncate" => Ok(Self::Truncate),
            _ => Err(Error::Config(format!("unknown overflow policy {s:?} (error, truncate)"))),
        }
    }
}

impl std::fmt::Display for Overflow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Error => "error",
            Self::Truncate => "truncate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMatrix {
    pub shape: MatrixShape,
    pub values: Vec<f64>,
    pub valid_len: usize,
    /// Records dropped by [`Overflow::Truncate`]; zero otherwise.
    #[serde(default)]
    pub truncated: usize,
}

impl TraceMatrix {
    pub fn zeros(shape: MatrixShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.capacity()],
            valid_len: 0,
            truncated: 0,
        }
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> Result<f64> {
        Ok(self.values[self.shape.flat_index(channel, row, col)?])
    }

    /// The valid (non-padding) prefix in flat order.
    pub fn records(&self) -> &[f64] {
        &self.values[..self.valid_len]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 4 + 32);
        let _ = writeln!(
            out,
            "{} {} {}",
            self.shape.channels, self.shape.side, self.valid_len
        );
        for row in self.values.chunks(self.shape.side) {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut toks = text.split_whitespace();
        let mut header = |what: &str| -> Result<usize> {
            toks.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Format(format!("matrix header: missing {what}")))
        };
        let shape = MatrixShape::new(header("K")?, header("N")?)?;
        let valid_len = header("valid_len")?;
        let values = toks
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad matrix value {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != shape.capacity() {
            return Err(Error::Format(format!(
                "expected {} values, found {}",
                shape.capacity(),
                values.len()
            )));
        }
        if valid_len > shape.capacity() || values[valid_len..].iter().any(|&v| v != 0.0) {
            return Err(Error::Format("padding cells must be zero".into()));
        }
        Ok(Self {
            shape,
            values,
            valid_len,
            truncated: 0,
        })
    }
}

/// Folds an arbitrary real-valued record sequence.
pub fn fold_values(records: &[f64], shape: MatrixShape, overflow: Overflow) -> Result<TraceMatrix> {
    let cap = shape.capacity();
    let (take, truncated) = if records.len() > cap {
        match overflow {
            Overflow::Error => {
                return Err(Error::Capacity {
                    len: records.len(),
                    capacity: cap,
                    required_k: records.len().div_ceil(shape.plane()),
                })
            }
            Overflow::Truncate => (cap, records.len() - cap),
        }
    } else {
        (records.len(), 0)
    };
    let mut m = TraceMatrix::zeros(shape);
    m.values[..take].copy_from_slice(&records[..take]);
    m.valid_len = take;
    m.truncated = truncated;
    Ok(m)
}

pub fn fold(trace: &SideChannelTrace, shape: MatrixShape, overflow: Overflow) -> Result<TraceMatrix> {
    let vals: Vec<f64> = trace.records.iter().map(|&r| r as f64).collect();
    fold_values(&vals, shape, overflow)
}

/// A cell reference, either flat or `(channel, row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellIndex {
    Flat(usize),
    Cell(usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unfolded {
    Record(usize),
    Padding,
}

pub fn unfold_index(index: CellIndex, shape: MatrixShape, valid_len: usize) -> Result<Unfolded> {
    let flat = match index {
        CellIndex::Flat(f) if f >= shape.capacity() => {
            return Err(Error::OutOfBounds {
                index: f,
                capacity: shape.capacity(),
            })
        }
        CellIndex::Flat(f) => f,
        CellIndex::Cell(k, r, c) => shape.flat_index(k, r, c)?,
    };
    Ok(if flat < valid_len {
        Unfolded::Record(flat)
    } else {
        Unfolded::Padding
    })
}

/// Dataset-level min/max used to map raw indices into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    #[inline]
    pub fn map(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if span <= 0.0 {
            0.0
        } else {
            ((v - self.min) / span).clamp(0.0, 1.0)
        }
    }
}

pub fn fit_norm<'a, I>(traces: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for t in traces {
        for &v in t {
            min = min.min(v);
            max = max.max(v);
        }
    }
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::Config(
            "cannot fit normalization on an empty training set".into(),
        ));
    }
    Ok(NormStats { min, max })
}

pub fn apply_norm(matrix: &TraceMatrix, stats: &NormStats) -> TraceMatrix {
    let mut out = matrix.clone();
    for v in &mut out.values[..matrix.valid_len] {
        *v = stats.map(*v);
    }
    out
}

/// Concatenates Prime+Probe activity vectors in time order and folds the
/// resulting bit stream.
pub fn encode_pp(
    vectors: &[ActivityVector],
    shape: MatrixShape,
    overflow: Overflow,
) -> Result<TraceMatrix> {
    let Some(first) = vectors.first() else {
        return Ok(TraceMatrix::zeros(shape));
    };
    let width = first.len();
    let mut bits = Vec::with_capacity(width * vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != width {
            return Err(Error::Shape {
                expected: format!("activity vectors of length {width}"),
                actual: format!("vector {i} has length {}", v.len()),
            });
        }
        bits.extend(v.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    fold_values(&bits, shape, overflow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_model::ChannelKind;
    use proptest::prelude::*;

    fn sct(records: Vec<u64>) -> SideChannelTrace {
        SideChannelTrace {
            kind: ChannelKind::CACHE_LINE,
            records,
            aligned: true,
        }
    }

    #[test]
    fn fold_fills_row_major_then_channels() {
        let shape = MatrixShape::new(2, 2).unwrap();
        let m = fold(&sct(vec![10, 20, 30, 40, 50]), shape, Overflow::Error).unwrap();
        assert_eq!(m.values, vec![10., 20., 30., 40., 50., 0., 0., 0.]);
        assert_eq!(m.get(1, 0, 0).unwrap(), 50.0);
        assert_eq!(m.get(0, 1, 0).unwrap(), 30.0);
        assert_eq!(m.valid_len, 5);
    }

    #[test]
    fn large_trace_fits_six_channel_256_matrix() {
        let shape = MatrixShape::new(6, 256).unwrap();
        assert_eq!(shape.capacity(), 393_216);
        let m = fold_values(&vec![1.0; 338_123], shape, Overflow::Error).unwrap();
        assert_eq!(m.valid_len, 338_123);
    }

    #[test]
    fn overflow_reports_required_channels() {
        let shape = MatrixShape::new(1, 2).unwrap();
        let err = fold(&sct(vec![1; 6]), shape, Overflow::Error).unwrap_err();
        assert_eq!(
            err,
            Error::Capacity {
                len: 6,
                capacity: 4,
                required_k: 2
            }
        );
        let m = fold(&sct(vec![1; 6]), shape, Overflow::Truncate).unwrap();
        assert_eq!((m.valid_len, m.truncated), (4, 2));
    }

    #[test]
    fn unfold_examples() {
        let shape = MatrixShape::new(2, 2).unwrap();
        assert_eq!(
            unfold_index(CellIndex::Cell(1, 0, 0), shape, 5).unwrap(),
            Unfolded::Record(4)
        );
        assert_eq!(
            unfold_index(CellIndex::Cell(1, 1, 1), shape, 5).unwrap(),
            Unfolded::Padding
        );
        assert!(matches!(
            unfold_index(CellIndex::Flat(8), shape, 5),
            Err(Error::OutOfBounds { index: 8, capacity: 8 })
        ));
        assert!(unfold_index(CellIndex::Cell(2, 0, 0), shape, 5).is_err());
    }

    #[test]
    fn min_max_examples() {
        let stats = fit_norm([[0.0, 50.0, 100.0].as_slice()]).unwrap();
        let shape = MatrixShape::new(1, 2).unwrap();
        let m = fold_values(&[0.0, 50.0, 100.0], shape, Overflow::Error).unwrap();
        assert_eq!(apply_norm(&m, &stats).values, vec![0.0, 0.5, 1.0, 0.0]);

        let flat = fit_norm([[7.0, 7.0].as_slice()]).unwrap();
        let m = fold_values(&[7.0, 7.0], shape, Overflow::Error).unwrap();
        assert_eq!(apply_norm(&m, &flat).values, vec![0.0; 4]);

        let m = fold_values(&[150.0], shape, Overflow::Error).unwrap();
        assert_eq!(apply_norm(&m, &stats).values[0], 1.0);

        assert!(fit_norm(std::iter::empty::<&[f64]>()).is_err());
    }

    #[test]
    fn pp_concatenates_in_time_order() {
        let v1 = ActivityVector::from_bits(vec![false, true, false, false]);
        let v2 = ActivityVector::from_bits(vec![true, false, false, false]);
        let shape = MatrixShape::new(2, 2).unwrap();
        let m = encode_pp(&[v1.clone(), v2], shape, Overflow::Error).unwrap();
        assert_eq!(m.values, vec![0., 1., 0., 0., 1., 0., 0., 0.]);
        assert_eq!(m.valid_len, 8);

        let empty = encode_pp(&[], shape, Overflow::Error).unwrap();
        assert_eq!(empty.valid_len, 0);
        assert!(empty.values.iter().all(|&v| v == 0.0));

        let short = ActivityVector::from_bits(vec![true, false]);
        assert!(matches!(
            encode_pp(&[v1, short], shape, Overflow::Error),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn text_format_is_exact_for_integers() {
        let shape = MatrixShape::new(2, 2).unwrap();
        let m = fold(&sct(vec![10, 20, 30, 40, 50]), shape, Overflow::Error).unwrap();
        let text = m.to_text();
        assert_eq!(text, "2 2 5\n10 20\n30 40\n50 0\n0 0\n");
        assert_eq!(TraceMatrix::from_text(&text).unwrap(), m);
    }

    proptest! {
        #[test]
        fn fold_roundtrip_and_inverse(
            k in 1usize..4,
            n in 1usize..9,
            seed in prop::collection::vec(any::<u32>(), 0..256),
        ) {
            let shape = MatrixShape::new(k, n).unwrap();
            let recs: Vec<u64> = seed.into_iter().take(shape.capacity()).map(u64::from).collect();
            let m = fold(&sct(recs.clone()), shape, Overflow::Error).unwrap();
            let back: Vec<u64> = m.records().iter().map(|&v| v as u64).collect();
            prop_assert_eq!(&back, &recs);
            for r in 0..recs.len() {
                let (c, row, col) = shape.cell(r);
                prop_assert_eq!(unfold_index(CellIndex::Cell(c, row, col), shape, m.valid_len).unwrap(), Unfolded::Record(r));
            }
            prop_assert!(m.values[m.valid_len..].iter().all(|&v| v == 0.0));
        }

        #[test]
        fn norm_is_monotone_and_idempotent(mut xs in prop::collection::vec(-1e6f64..1e6, 2..50)) {
            let stats = fit_norm([xs.as_slice()]).unwrap();
            xs.sort_by(f64::total_cmp);
            let mapped: Vec<f64> = xs.iter().map(|&v| stats.map(v)).collect();
            prop_assert!(mapped.windows(2).all(|w| w[0] <= w[1]));
            let unit = NormStats { min: 0.0, max: 1.0 };
            for &m in &mapped {
                prop_assert_eq!(unit.map(m), m);
            }
        }
    }
}
