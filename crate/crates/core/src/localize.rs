//! Reading leakage locations off a trained encoder's spatial attention.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pipeline::{matrix_tensor, TraceForm};
use crate::sca_model::Model;
use crate::trace_model::MemoryTrace;
use crate::trace_repr::TraceMatrix;
use crate::victim::SymbolMap;

pub const UNKNOWN_FUNCTION: &str = "<unknown>";

/// One weight per real trace record, padding excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordWeights {
    pub weights: Vec<f64>,
}

/// Upsamples the encoder's earliest spatial attention map to the matrix
/// side, broadcasts it over channels and reads it back in record order.
pub fn attention_map(model: &Model, matrix: &TraceMatrix) -> Result<RecordWeights> {
    let map = model.spatial_attention(&matrix_tensor(matrix))?;
    let (_, h, w) = map.chw()?;
    let side = matrix.shape.side;
    if h == 0 || w == 0 || side % h != 0 || side % w != 0 {
        return Err(Error::Shape {
            expected: format!("attention map dividing {side}x{side}"),
            actual: format!("{h}x{w}"),
        });
    }
    let (fy, fx) = (side / h, side / w);
    let weights = (0..matrix.valid_len)
        .map(|f| {
            let (_, r, c) = matrix.shape.cell(f);
            map.data()[(r / fy) * w + c / fx]
        })
        .collect();
    Ok(RecordWeights { weights })
}

/// Indices of the `k` largest weights, larger first, ties to the lower index.
pub fn rank_records(weights: &RecordWeights, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.weights.len()).collect();
    idx.sort_by(|&a, &b| weights.weights[b].total_cmp(&weights.weights[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// 0.1% of the trace, at least one record.
pub fn auto_topk(valid_len: usize) -> usize {
    ((valid_len as f64 * 0.001).round() as usize).max(1)
}

/// Fraction of `flagged` records that are leaky according to `mask`.
pub fn precision(flagged: &[usize], mask: &[bool]) -> f64 {
    if flagged.is_empty() {
        return 0.0;
    }
    let hits = flagged.iter().filter(|&&i| mask.get(i).copied().unwrap_or(false)).count();
    hits as f64 / flagged.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportRow {
    pub function: String,
    pub num_instructions: usize,
    pub frequency: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LeakageReport {
    /// Sorted by frequency, then function name.
    pub rows: Vec<ReportRow>,
    /// Distinct flagged instruction addresses, ascending.
    pub addresses: Vec<u64>,
}

impl LeakageReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("function,num_instructions,frequency\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.function, r.num_instructions, r.frequency);
        }
        s
    }

    pub fn addresses_text(&self) -> String {
        self.addresses.iter().map(|a| format!("{a:#x}\n")).collect()
    }

    pub fn total_frequency(&self) -> usize {
        self.rows.iter().map(|r| r.frequency).sum()
    }
}

/// A trace and the record indices flagged on it.
#[derive(Debug, Clone, Copy)]
pub struct Flagged<'a> {
    pub records: &'a [usize],
    pub trace: &'a MemoryTrace,
}

/// Maps flagged records to instructions and aggregates per function over
/// all traces. Only record-aligned trace forms are supported.
pub fn map_to_instructions(flagged: &[Flagged<'_>], form: &TraceForm, symbols: &SymbolMap) -> Result<LeakageReport> {
    if let TraceForm::PrimeProbe { .. } = form {
        return Err(Error::Unsupported(
            "Prime+Probe records have no one-to-one instruction alignment".into(),
        ));
    }
    let mut per_fn: BTreeMap<String, (BTreeSet<u64>, usize)> = BTreeMap::new();
    let mut all = BTreeSet::new();
    for f in flagged {
        let recs = f.trace.records();
        for &i in f.records {
            let rec = recs.get(i).ok_or(Error::OutOfBounds {
                index: i,
                capacity: recs.len(),
            })?;
            let ip = rec.instruction_address;
            let name = symbols.lookup(ip).map_or(UNKNOWN_FUNCTION, |s| s.name.as_str());
            let entry = per_fn.entry(name.to_string()).or_default();
            entry.0.insert(ip);
            entry.1 += 1;
            all.insert(ip);
        }
    }
    let mut rows: Vec<ReportRow> = per_fn
        .into_iter()
        .map(|(function, (ips, frequency))| ReportRow {
            function,
            num_instructions: ips.len(),
            frequency,
        })
        .collect();
    rows.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.function.cmp(&b.function)));
    Ok(LeakageReport {
        rows,
        addresses: all.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache_sim::CacheConfig;
    use crate::neural::LayerSpec;
    use crate::sca_model::ModelSpec;
    use crate::trace_model::{parse_memory_trace, ChannelKind};
    use crate::trace_repr::{fold_values, MatrixShape, Overflow};
    use crate::victim::Symbol;
    use proptest::prelude::*;

    fn w(v: &[f64]) -> RecordWeights {
        RecordWeights { weights: v.to_vec() }
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_records(&w(&[0.1, 0.9, 0.5]), 2), vec![1, 2]);
        assert_eq!(rank_records(&w(&[0.3, 0.3, 0.3]), 2), vec![0, 1]);
        assert_eq!(rank_records(&w(&[0.1, 0.9, 0.5]), 10), vec![1, 2, 0]);
        assert_eq!(auto_topk(1280), 1);
        assert_eq!(auto_topk(338_123), 338);
    }

    fn symbols() -> SymbolMap {
        SymbolMap::new(vec![
            Symbol {
                start: 0x100,
                end: 0x200,
                name: "huff_extend".into(),
                leaky: true,
            },
            Symbol {
                start: 0x200,
                end: 0x300,
                name: "emit".into(),
                leaky: false,
            },
        ])
        .unwrap()
    }

    #[test]
    fn aggregation_over_traces() {
        let t1 = parse_memory_trace("0x100 0x10\n0x104 0x20\n0x250 0x30\n").unwrap();
        let t2 = parse_memory_trace("0x104 0x10\n0x100 0x20\n").unwrap();
        let form = TraceForm::Channel(ChannelKind::CACHE_LINE);
        let report = map_to_instructions(
            &[
                Flagged {
                    records: &[0, 1],
                    trace: &t1,
                },
                Flagged {
                    records: &[1, 0],
                    trace: &t2,
                },
            ],
            &form,
            &symbols(),
        )
        .unwrap();
        assert_eq!(
            report.rows,
            vec![ReportRow {
                function: "huff_extend".into(),
                num_instructions: 2,
                frequency: 4
            }]
        );
        assert_eq!(report.addresses, vec![0x100, 0x104]);
        assert_eq!(report.to_csv(), "function,num_instructions,frequency\nhuff_extend,2,4\n");
    }

    #[test]
    fn unknown_addresses_and_unsupported_forms() {
        let t = parse_memory_trace("0x900 0x10\n0x250 0x20\n").unwrap();
        let form = TraceForm::Channel(ChannelKind::CACHE_LINE);
        let flagged = [Flagged {
            records: &[0, 1],
            trace: &t,
        }];
        let report = map_to_instructions(&flagged, &form, &symbols()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().any(|r| r.function == UNKNOWN_FUNCTION));
        let pp = TraceForm::PrimeProbe {
            cache: CacheConfig::new(4, 1, 64).unwrap(),
            epoch_len: 1,
            repeats: 1,
        };
        assert!(matches!(
            map_to_instructions(&flagged, &pp, &symbols()),
            Err(Error::Unsupported(_))
        ));
        let bad = [Flagged {
            records: &[5],
            trace: &t,
        }];
        assert!(map_to_instructions(&bad, &form, &symbols()).is_err());
    }

    fn pointwise_model() -> Model {
        // 1x1 convolutions keep a constant input constant everywhere
        let mut spec = ModelSpec::continuous([1, 8, 8], 8, 8, 4, 2).unwrap();
        spec.encoder.layers[0] = LayerSpec::conv(1, 4, 1, 1, 0);
        spec.init(3).unwrap()
    }

    #[test]
    fn constant_input_gives_uniform_weights() {
        let model = pointwise_model();
        let shape = MatrixShape::new(1, 8).unwrap();
        let m = fold_values(&[0.6; 50], shape, Overflow::Error).unwrap();
        let mut full = m.clone();
        full.values.fill(0.6);
        full.valid_len = 64;
        let rw = attention_map(&model, &full).unwrap();
        assert_eq!(rw.weights.len(), 64);
        assert!(rw.weights.iter().all(|&x| x == rw.weights[0]));
        assert_eq!(attention_map(&model, &m).unwrap().weights.len(), 50);
    }

    #[test]
    fn model_without_attention_rejected() {
        let mut spec = ModelSpec::continuous([1, 8, 8], 8, 8, 4, 2).unwrap();
        spec.encoder.layers.retain(|l| !l.is_attention());
        let model = spec.init(1).unwrap();
        let m = fold_values(&[0.5; 10], MatrixShape::new(1, 8).unwrap(), Overflow::Error).unwrap();
        assert!(matches!(attention_map(&model, &m), Err(Error::Unsupported(_))));
    }

    proptest! {
        #[test]
        fn conservation_and_no_padding(
            weights in proptest::collection::vec(0.0f64..1.0, 1..60),
            k in 1usize..20,
            traces in 1usize..4,
        ) {
            let rw = w(&weights);
            let top = rank_records(&rw, k);
            prop_assert!(top.iter().all(|&i| i < weights.len()));
            prop_assert_eq!(top.len(), k.min(weights.len()));
            let text: String = (0..weights.len()).map(|i| format!("{:#x} 0x0\n", 0x100 + 0x10 * i)).collect();
            let t = parse_memory_trace(&text).unwrap();
            let flagged: Vec<Flagged> = (0..traces).map(|_| Flagged { records: &top, trace: &t }).collect();
            let report = map_to_instructions(&flagged, &TraceForm::Channel(ChannelKind::CACHE_LINE), &symbols()).unwrap();
            prop_assert_eq!(report.total_frequency(), traces * top.len());
            for r in &report.rows {
                prop_assert!(r.frequency >= r.num_instructions && r.num_instructions >= 1);
            }
        }
    }
}
