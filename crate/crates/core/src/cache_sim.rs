//! Set-associative LRU cache and a Prime+Probe spy built on top of it.
//!
//! The spy owns `ways` dedicated lines per set. Each epoch it primes every
//! set, lets the victim perform `epoch_len` accesses, then probes: any set
//! where one of its lines misses on re-touch is reported as active. Epochs
//! with no activity produce no vector.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_model::MemoryAccessRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub num_sets: usize,
    pub ways: usize,
    pub line_size: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            num_sets: 64,
            ways: 8,
            line_size: 64,
        }
    }
}

impl CacheConfig {
    pub fn new(num_sets: usize, ways: usize, line_size: u64) -> Result<Self> {
        let cfg = Self {
            num_sets,
            ways,
            line_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sets == 0 || self.ways == 0 {
            return Err(Error::Config("cache sets and ways must be positive".into()));
        }
        if !self.line_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "line size {} is not a power of two",
                self.line_size
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn set_of(&self, addr: u64) -> usize {
        ((addr / self.line_size) % self.num_sets as u64) as usize
    }

    #[inline]
    fn tag_of(&self, addr: u64) -> u64 {
        addr / self.line_size / self.num_sets as u64
    }
}

/// Spy-owned lines live in a tag space victim addresses can never reach.
const SPY_TAG: u64 = 1 << 63;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivityVector {
    bits: Vec<bool>,
}

impl ActivityVector {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PPTrace {
    pub vectors: Vec<ActivityVector>,
    pub config: CacheConfig,
    pub repeats: usize,
}

impl PPTrace {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Header `S t`, then one `0`/`1` line per vector.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.vectors.len() * (self.config.num_sets + 1) + 16);
        let _ = writeln!(out, "{} {}", self.config.num_sets, self.repeats);
        for v in &self.vectors {
            out.extend(v.bits.iter().map(|&b| if b { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format("empty Prime+Probe trace file".into()))?;
        let mut h = header.split_whitespace().map(str::parse::<usize>);
        let (Some(Ok(sets)), Some(Ok(repeats)), None) = (h.next(), h.next(), h.next()) else {
            return Err(Error::Parse {
                line: 1,
                msg: "expected header `S t`".into(),
            });
        };
        let config = CacheConfig {
            num_sets: sets,
            ..CacheConfig::default()
        };
        config.validate()?;
        let mut vectors = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line.len() != sets {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected {sets} bits, found {}", line.len()),
                });
            }
            let bits = line
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(Error::Parse {
                        line: i + 1,
                        msg: format!("unexpected character {c:?}"),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            vectors.push(ActivityVector { bits });
        }
        Ok(Self {
            vectors,
            config,
            repeats: repeats.max(1),
        })
    }
}

/// One LRU set: parallel tag / last-use arrays, `None` slots are invalid.
#[derive(Clone)]
struct CacheSet {
    tags: Vec<Option<u64>>,
    stamps: Vec<u64>,
}

/// Outcome of a single access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Hit,
    /// Miss; carries the tag that was evicted, if any.
    Miss(Option<u64>),
}

/// Plain set-associative LRU cache.
#[derive(Clone)]
pub struct Cache {
    cfg: CacheConfig,
    sets: Vec<CacheSet>,
    clock: u64,
}

impl Cache {
    pub fn new(cfg: CacheConfig) -> Self {
        let set = CacheSet {
            tags: vec![None; cfg.ways],
            stamps: vec![0; cfg.ways],
        };
        Self {
            cfg,
            sets: vec![set; cfg.num_sets],
            clock: 0,
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    /// Touches `tag` in set `set`. On a miss the least recently used (or
    /// first invalid) way is replaced.
    pub fn touch(&mut self, set: usize, tag: u64) -> Access {
        self.clock += 1;
        let s = &mut self.sets[set];
        if let Some(way) = s.tags.iter().position(|&t| t == Some(tag)) {
            s.stamps[way] = self.clock;
            return Access::Hit;
        }
        let way = s.tags.iter().position(Option::is_none).unwrap_or_else(|| {
            let mut best = 0;
            for w in 1..s.stamps.len() {
                if s.stamps[w] < s.stamps[best] {
                    best = w;
                }
            }
            best
        });
        let evicted = s.tags[way].replace(tag);
        s.stamps[way] = self.clock;
        Access::Miss(evicted)
    }

    pub fn access(&mut self, addr: u64) -> Access {
        let set = self.cfg.set_of(addr);
        let tag = self.cfg.tag_of(addr);
        self.touch(set, tag)
    }
}

fn check_epoch(epoch_len: usize) -> Result<()> {
    if epoch_len == 0 {
        return Err(Error::Config("epoch length must be at least 1".into()));
    }
    Ok(())
}

/// Runs the spy/victim loop over one victim execution.
///
/// Only sets the victim touched during an epoch can change state, so prime
/// and probe are applied to those sets alone; an untouched set is already
/// fully spy-owned in prime order.
pub fn simulate_prime_probe(
    victim: &[MemoryAccessRecord],
    cfg: CacheConfig,
    epoch_len: usize,
) -> Result<PPTrace> {
    cfg.validate()?;
    check_epoch(epoch_len)?;
    let mut cache = Cache::new(cfg);
    let prime_set = |cache: &mut Cache, set: usize| {
        let mut missed = false;
        for j in 0..cfg.ways {
            missed |= cache.touch(set, SPY_TAG | j as u64) != Access::Hit;
        }
        missed
    };
    for set in 0..cfg.num_sets {
        prime_set(&mut cache, set);
    }

    let mut vectors = Vec::new();
    let mut touched = vec![false; cfg.num_sets];
    let mut dirty = Vec::with_capacity(cfg.num_sets);
    for epoch in victim.chunks(epoch_len) {
        for rec in epoch {
            let set = cfg.set_of(rec.memory_address);
            cache.access(rec.memory_address);
            if !touched[set] {
                touched[set] = true;
                dirty.push(set);
            }
        }
        let mut bits = vec![false; cfg.num_sets];
        for &set in &dirty {
            bits[set] = prime_set(&mut cache, set);
            // the next epoch's prime; all hits after a complete probe
            prime_set(&mut cache, set);
            touched[set] = false;
        }
        dirty.clear();
        let v = ActivityVector { bits };
        if v.any() {
            vectors.push(v);
        }
    }
    Ok(PPTrace {
        vectors,
        config: cfg,
        repeats: 1,
    })
}

/// Runs `t` independent simulations from a cold cache and concatenates them.
pub fn repeat_concat(
    victim: &[MemoryAccessRecord],
    cfg: CacheConfig,
    epoch_len: usize,
    t: usize,
) -> Result<PPTrace> {
    if t == 0 {
        return Err(Error::Config("repeat count must be at least 1".into()));
    }
    let mut vectors = Vec::new();
    for _ in 0..t {
        let run = simulate_prime_probe(victim, cfg, epoch_len)?;
        vectors.extend(run.vectors);
    }
    Ok(PPTrace {
        vectors,
        config: cfg,
        repeats: t,
    })
}

/// Independent brute-force model used to cross-check
/// [`simulate_prime_probe`]: each set is an explicit recency list (front is
/// least recent), and every phase walks every set.
pub fn reference_oracle(
    victim: &[MemoryAccessRecord],
    cfg: CacheConfig,
    epoch_len: usize,
) -> Result<PPTrace> {
    #[derive(Clone, PartialEq)]
    enum Line {
        Spy(usize),
        Victim(u64),
    }

    fn touch(set: &mut Vec<Line>, line: Line, ways: usize) -> bool {
        if let Some(pos) = set.iter().position(|l| *l == line) {
            let l = set.remove(pos);
            set.push(l);
            true
        } else {
            if set.len() == ways {
                set.remove(0);
            }
            set.push(line);
            false
        }
    }

    cfg.validate()?;
    check_epoch(epoch_len)?;
    let mut sets: Vec<Vec<Line>> = vec![Vec::new(); cfg.num_sets];
    for set in sets.iter_mut() {
        for j in 0..cfg.ways {
            touch(set, Line::Spy(j), cfg.ways);
        }
    }
    let mut vectors = Vec::new();
    let records = victim;
    let mut start = 0;
    while start < records.len() {
        let end = (start + epoch_len).min(records.len());
        for rec in &records[start..end] {
            let line_no = rec.memory_address / cfg.line_size;
            let set = (line_no % cfg.num_sets as u64) as usize;
            touch(&mut sets[set], Line::Victim(line_no), cfg.ways);
        }
        let mut bits = Vec::with_capacity(cfg.num_sets);
        for set in sets.iter_mut() {
            let mut miss = false;
            for j in 0..cfg.ways {
                if !touch(set, Line::Spy(j), cfg.ways) {
                    miss = true;
                }
            }
            bits.push(miss);
        }
        for set in sets.iter_mut() {
            for j in 0..cfg.ways {
                touch(set, Line::Spy(j), cfg.ways);
            }
        }
        if bits.iter().any(|&b| b) {
            vectors.push(ActivityVector { bits });
        }
        start = end;
    }
    Ok(PPTrace {
        vectors,
        config: cfg,
        repeats: 1,
    })
}
