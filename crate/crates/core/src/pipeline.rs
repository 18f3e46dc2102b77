//! Glue from victim executions to model-ready tensors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache_sim::{repeat_concat, CacheConfig, PPTrace};
use crate::error::{Error, Result};
use crate::neural::Tensor;
use crate::sca_model::Example;
use crate::trace_model::{derive_side_channel, ChannelKind, MemoryTrace};
use crate::trace_repr::{encode_pp, fit_norm, fold_values, MatrixShape, NormStats, Overflow, TraceMatrix};
use crate::victim::{Dataset, Split};

/// How the attacker observes a victim run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceForm {
    Channel(ChannelKind),
    PrimeProbe {
        cache: CacheConfig,
        epoch_len: usize,
        repeats: usize,
    },
}

impl fmt::Display for TraceForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Channel(k) => write!(f, "{k}"),
            Self::PrimeProbe {
                cache,
                epoch_len,
                repeats,
            } => write!(
                f,
                "pp:{}:{}:{}:{epoch_len}:{repeats}",
                cache.num_sets, cache.ways, cache.line_size
            ),
        }
    }
}

impl FromStr for TraceForm {
    type Err = Error;

    /// A channel name (`cacheline`, `pagetable:...`) or
    /// `pp:<sets>:<ways>:<line>:<epoch_len>:<repeats>`.
    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("pp:") else {
            return Ok(Self::Channel(s.parse()?));
        };
        let nums = rest
            .split(':')
            .map(|p| p.parse::<u64>().map_err(|_| Error::Config(format!("bad Prime+Probe field {p:?} in {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let [sets, ways, line, epoch_len, repeats] = nums[..] else {
            return Err(Error::Config(format!("expected pp:<sets>:<ways>:<line>:<epoch_len>:<repeats>, got {s:?}")));
        };
        Ok(Self::PrimeProbe {
            cache: CacheConfig::new(sets as usize, ways as usize, line)?,
            epoch_len: epoch_len as usize,
            repeats: repeats as usize,
        })
    }
}

/// A logged trace before folding.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    /// Per-record scalar values aligned with the memory trace.
    Scalar(Vec<f64>),
    Bits(PPTrace),
}

impl Observation {
    pub fn len(&self) -> usize {
        match self {
            Self::Scalar(v) => v.len(),
            Self::Bits(t) => t.vectors.iter().map(|v| v.len()).sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn observe(trace: &MemoryTrace, form: &TraceForm) -> Result<Observation> {
    match form {
        TraceForm::Channel(kind) => {
            let sc = derive_side_channel(trace, *kind);
            Ok(Observation::Scalar(sc.records.iter().map(|&r| r as f64).collect()))
        }
        TraceForm::PrimeProbe {
            cache,
            epoch_len,
            repeats,
        } => Ok(Observation::Bits(repeat_concat(trace.records(), *cache, *epoch_len, *repeats)?)),
    }
}

/// Everything needed to turn an observation into an encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub form: TraceForm,
    pub shape: MatrixShape,
    pub overflow: Overflow,
    pub norm: NormStats,
}

impl Encoding {
    /// Fits normalization on `train`; bit traces use the identity range.
    pub fn fit<'a>(
        form: TraceForm,
        shape: MatrixShape,
        overflow: Overflow,
        train: impl IntoIterator<Item = &'a Observation>,
    ) -> Result<Self> {
        let norm = match form {
            TraceForm::Channel(_) => fit_norm(train.into_iter().filter_map(|o| match o {
                Observation::Scalar(v) => Some(v.as_slice()),
                Observation::Bits(_) => None,
            }))?,
            TraceForm::PrimeProbe { .. } => NormStats { min: 0.0, max: 1.0 },
        };
        Ok(Self {
            form,
            shape,
            overflow,
            norm,
        })
    }

    pub fn matrix(&self, obs: &Observation) -> Result<TraceMatrix> {
        match (obs, &self.form) {
            (Observation::Scalar(v), TraceForm::Channel(_)) => {
                let normed: Vec<f64> = v.iter().map(|&x| self.norm.map(x)).collect();
                fold_values(&normed, self.shape, self.overflow)
            }
            (Observation::Bits(t), TraceForm::PrimeProbe { .. }) => encode_pp(&t.vectors, self.shape, self.overflow),
            _ => Err(Error::Modality(format!("observation does not match trace form {}", self.form))),
        }
    }

    pub fn tensor(&self, obs: &Observation) -> Result<Tensor> {
        Ok(matrix_tensor(&self.matrix(obs)?))
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.shape.channels, self.shape.side, self.shape.side]
    }
}

pub fn matrix_tensor(m: &TraceMatrix) -> Tensor {
    Tensor::new(vec![m.shape.channels, m.shape.side, m.shape.side], m.values.clone()).expect("matrix holds K*N*N values")
}

/// Observations of every item in `split`, in dataset order.
pub fn observe_split(data: &Dataset, split: Split, form: &TraceForm) -> Result<Vec<Observation>> {
    data.split(split).map(|it| observe(&it.trace, form)).collect()
}

/// Pairs encoded observations with the items of `split`.
pub fn examples(data: &Dataset, split: Split, enc: &Encoding, obs: &[Observation]) -> Result<Vec<Example>> {
    data.split(split)
        .zip(obs)
        .map(|(it, o)| {
            Ok(Example {
                input: enc.tensor(o)?,
                target: it.input.clone(),
                label: it.secret,
            })
        })
        .collect()
}
