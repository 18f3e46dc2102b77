//! Perception blinding with exact output recovery, and trace noise schemes.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cache_sim::PPTrace;
use crate::error::{Error, Result};
use crate::media::{MediaSample, EOS, SOS};
use crate::pipeline::Observation;
use crate::rng;

/// Blending weight `alpha` of the private input; the mask gets `1 - alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlindConfig {
    alpha: f64,
}

impl BlindConfig {
    /// `alpha` must lie in `(0, 0.5]` so the mask dominates.
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 0.5) {
            return Err(Error::Config(format!(
                "alpha {alpha} outside (0, 0.5]: the mask weight 1 - alpha must dominate"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }

    /// Mask words inserted after each word: `floor(1/alpha) - 1`.
    pub fn mask_count(&self) -> usize {
        ((1.0 / self.alpha) + 1e-9).floor() as usize - 1
    }
}

/// `alpha * input + (1 - alpha) * mask`, unclamped.
pub fn blind_continuous(input: &MediaSample, mask: &MediaSample, cfg: &BlindConfig) -> Result<MediaSample> {
    let (
        MediaSample::Continuous {
            height,
            width,
            values,
        },
        MediaSample::Continuous {
            height: mh,
            width: mw,
            values: mv,
        },
    ) = (input, mask)
    else {
        return Err(Error::Modality("continuous blinding needs two images".into()));
    };
    if (height, width) != (mh, mw) {
        return Err(Error::Shape {
            expected: format!("{height}x{width} mask"),
            actual: format!("{mh}x{mw}"),
        });
    }
    let a = cfg.alpha;
    MediaSample::image(
        *height,
        *width,
        values.iter().zip(mv).map(|(i, m)| a * i + (1.0 - a) * m).collect(),
    )
}

/// `(P_blinded - (1 - alpha) * P_mask) / alpha`, elementwise.
pub fn unblind_output(blinded: &[f64], mask_output: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 0.5]")));
    }
    if blinded.len() != mask_output.len() {
        return Err(Error::Shape {
            expected: format!("{} mask outputs", blinded.len()),
            actual: format!("{}", mask_output.len()),
        });
    }
    Ok(blinded
        .iter()
        .zip(mask_output)
        .map(|(b, m)| (b - (1.0 - alpha) * m) / alpha)
        .collect())
}

fn check_framed(tokens: &[usize]) -> Result<()> {
    if tokens.len() < 2 || tokens[0] != SOS || tokens[tokens.len() - 1] != EOS {
        return Err(Error::Format("token sequence must be framed by SOS and EOS".into()));
    }
    Ok(())
}

/// Inserts `cfg.mask_count()` copies of `mask_word` after every word.
pub fn blind_text(tokens: &[usize], mask_word: usize, cfg: &BlindConfig) -> Result<Vec<usize>> {
    check_framed(tokens)?;
    let n = cfg.mask_count();
    if n < 1 {
        return Err(Error::Config(format!("alpha {} inserts no mask words", cfg.alpha)));
    }
    if mask_word == SOS || mask_word == EOS {
        return Err(Error::Config("mask word cannot be SOS or EOS".into()));
    }
    let words = &tokens[1..tokens.len() - 1];
    let mut out = Vec::with_capacity(2 + words.len() * (n + 1));
    out.push(SOS);
    for &w in words {
        out.push(w);
        out.extend(std::iter::repeat(mask_word).take(n));
    }
    out.push(EOS);
    Ok(out)
}

/// Drops the `cfg.mask_count()` tokens following every original word.
pub fn unblind_text(blinded: &[usize], cfg: &BlindConfig) -> Result<Vec<usize>> {
    check_framed(blinded)?;
    let n = cfg.mask_count();
    let body = &blinded[1..blinded.len() - 1];
    if n < 1 || body.len() % (n + 1) != 0 {
        return Err(Error::Format(format!(
            "{} blinded words is not a multiple of {}",
            body.len(),
            n + 1
        )));
    }
    let mut out = vec![SOS];
    out.extend(body.iter().step_by(n + 1));
    out.push(EOS);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseKind {
    /// Mixing weight of Gaussian noise.
    Gaussian(f64),
    /// Percentage of records removed.
    Removal(f64),
    /// Right rotation in records.
    RoundShift(usize),
    /// Percentage of Prime+Probe bits cleared.
    LeaveOut(f64),
    /// Percentage of Prime+Probe bits flipped.
    FalseHitMiss(f64),
    /// Number of Prime+Probe bits exchanged in pairs.
    WrongOrder(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Low,
    High,
}

impl NoiseKind {
    pub const NAMES: [&'static str; 6] = ["gaussian", "removal", "shift", "leaveout", "falsehitmiss", "wrongorder"];

    pub fn preset(name: &str, level: Level) -> Result<Self> {
        let low = level == Level::Low;
        Ok(match name {
            "gaussian" => Self::Gaussian(if low { 0.2 } else { 0.5 }),
            "removal" => Self::Removal(if low { 20.0 } else { 50.0 }),
            "shift" => Self::RoundShift(if low { 10 } else { 100 }),
            "leaveout" => Self::LeaveOut(if low { 20.0 } else { 50.0 }),
            "falsehitmiss" => Self::FalseHitMiss(if low { 20.0 } else { 50.0 }),
            "wrongorder" => Self::WrongOrder(if low { 100 } else { 500 }),
            _ => {
                return Err(Error::Config(format!(
                    "unknown noise scheme {name:?} (one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian(_) => "gaussian",
            Self::Removal(_) => "removal",
            Self::RoundShift(_) => "shift",
            Self::LeaveOut(_) => "leaveout",
            Self::FalseHitMiss(_) => "falsehitmiss",
            Self::WrongOrder(_) => "wrongorder",
        }
    }

    /// Whether the scheme perturbs Prime+Probe bits rather than scalar records.
    pub fn on_bits(&self) -> bool {
        matches!(self, Self::LeaveOut(_) | Self::FalseHitMiss(_) | Self::WrongOrder(_))
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gaussian(x) | Self::Removal(x) | Self::LeaveOut(x) | Self::FalseHitMiss(x) => {
                write!(f, "{}:{x}", self.name())
            }
            Self::RoundShift(n) | Self::WrongOrder(n) => write!(f, "{}:{n}", self.name()),
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    /// `<scheme>-low`, `<scheme>-high` or `<scheme>:<value>`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(name) = s.strip_suffix("-low") {
            return Self::preset(name, Level::Low);
        }
        if let Some(name) = s.strip_suffix("-high") {
            return Self::preset(name, Level::High);
        }
        let (name, value) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("noise {s:?}: expected <scheme>-low|high or <scheme>:<value>")))?;
        let bad = || Error::Config(format!("noise {s:?}: bad value {value:?}"));
        let real = || value.parse::<f64>().map_err(|_| bad());
        let count = || value.parse::<usize>().map_err(|_| bad());
        let kind = match name {
            "gaussian" => Self::Gaussian(real()?),
            "removal" => Self::Removal(real()?),
            "shift" => Self::RoundShift(count()?),
            "leaveout" => Self::LeaveOut(real()?),
            "falsehitmiss" => Self::FalseHitMiss(real()?),
            "wrongorder" => Self::WrongOrder(count()?),
            _ => return Err(Error::Config(format!("unknown noise scheme {name:?}"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl NoiseKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Gaussian(x) => (0.0..=1.0).contains(&x),
            Self::Removal(p) | Self::LeaveOut(p) | Self::FalseHitMiss(p) => (0.0..=100.0).contains(&p),
            Self::RoundShift(_) | Self::WrongOrder(_) => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("noise parameter out of range: {self}")))
        }
    }
}

/// `x * n + (1 - x) * d`.
pub fn gaussian_mix(d: f64, n: f64, x: f64) -> f64 {
    x * n + (1.0 - x) * d
}

fn count_of(percent: f64, len: usize) -> usize {
    ((percent / 100.0 * len as f64).round() as usize).min(len)
}

fn flat_bits(t: &PPTrace) -> Vec<bool> {
    t.vectors.iter().flat_map(|v| v.bits().iter().copied()).collect()
}

fn write_bits(t: &mut PPTrace, bits: &[bool]) {
    let mut it = bits.iter();
    for v in &mut t.vectors {
        for b in v.bits_mut() {
            *b = *it.next().expect("length preserved");
        }
    }
}

/// Applies `kind` to `obs` with the `noise` sub-stream of `seed` at `index`
/// (one index per trace).
pub fn apply_noise(obs: &Observation, kind: &NoiseKind, seed: u64, index: u64) -> Result<Observation> {
    kind.validate()?;
    let mut r = rng::stream(seed, "noise", index);
    match (obs, kind) {
        (Observation::Scalar(d), NoiseKind::Gaussian(x)) => {
            let (lo, hi) = d
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let (center, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
            Ok(Observation::Scalar(
                d.iter()
                    .map(|&v| {
                        let xi: f64 = StandardNormal.sample(&mut r);
                        gaussian_mix(v, center + half * xi, *x)
                    })
                    .collect(),
            ))
        }
        (Observation::Scalar(d), NoiseKind::Removal(p)) => {
            let mut drop = vec![false; d.len()];
            for i in sample(&mut r, d.len(), count_of(*p, d.len())) {
                drop[i] = true;
            }
            Ok(Observation::Scalar(
                d.iter().zip(&drop).filter(|(_, &x)| !x).map(|(&v, _)| v).collect(),
            ))
        }
        (Observation::Scalar(d), NoiseKind::RoundShift(n)) => {
            let mut out = d.clone();
            if !out.is_empty() {
                out.rotate_right(n % d.len());
            }
            Ok(Observation::Scalar(out))
        }
        (Observation::Bits(t), k) if k.on_bits() => {
            let mut bits = flat_bits(t);
            let len = bits.len();
            match *k {
                NoiseKind::LeaveOut(p) => {
                    for i in sample(&mut r, len, count_of(p, len)) {
                        bits[i] = false;
                    }
                }
                NoiseKind::FalseHitMiss(p) => {
                    for i in sample(&mut r, len, count_of(p, len)) {
                        bits[i] = !bits[i];
                    }
                }
                NoiseKind::WrongOrder(x) => {
                    if x > len {
                        return Err(Error::Config(format!("wrong-order count {x} exceeds {len} records")));
                    }
                    let picked = sample(&mut r, len, x).into_vec();
                    for pair in picked.chunks_exact(2) {
                        bits.swap(pair[0], pair[1]);
                    }
                }
                _ => unreachable!(),
            }
            let mut out = t.clone();
            write_bits(&mut out, &bits);
            Ok(Observation::Bits(out))
        }
        (Observation::Bits(_), k) => Err(Error::Modality(format!("{} applies to scalar traces, not Prime+Probe bits", k.name()))),
        (Observation::Scalar(_), k) => Err(Error::Modality(format!("{} applies to Prime+Probe bits, not scalar traces", k.name()))),
    }
}
