//! Raw memory-access traces and the side channels derived from them.
//!
//! A [`MemoryTrace`] is the attacker's full view of a victim execution: one
//! `(instruction address, memory address)` pair per access, in execution
//! order. The three coarser channels an attacker can realistically observe
//! (cache bank, cache line, page) are pure per-record projections of the
//! memory address, so a [`SideChannelTrace`] stays positionally aligned with
//! its source trace.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemoryAccessRecord {
    pub instruction_address: u64,
    pub memory_address: u64,
}

impl MemoryAccessRecord {
    pub fn new(instruction_address: u64, memory_address: u64) -> Self {
        Self {
            instruction_address,
            memory_address,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryTrace {
    pub victim_id: String,
    records: Vec<MemoryAccessRecord>,
}

impl MemoryTrace {
    pub fn new(victim_id: impl Into<String>, records: Vec<MemoryAccessRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyTrace);
        }
        Ok(Self {
            victim_id: victim_id.into(),
            records,
        })
    }

    pub fn records(&self) -> &[MemoryAccessRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn addresses(&self) -> impl Iterator<Item = u64> + '_ {
        self.records.iter().map(|r| r.memory_address)
    }

    /// Text form: `0x<ip> 0x<addr>` per line, with an optional comment header.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 24);
        let _ = writeln!(out, "# victim={}", self.victim_id);
        for r in &self.records {
            let _ = writeln!(out, "{:#x} {:#x}", r.instruction_address, r.memory_address);
        }
        out
    }
}

fn parse_hex(tok: &str) -> Option<u64> {
    let digits = tok
        .strip_prefix("0x")
        .or_else(|| tok.strip_prefix("0X"))
        .unwrap_or(tok);
    if digits.is_empty() {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

/// Parses the `<ip_hex> <addr_hex>` line format. Lines starting with `#` and
/// blank lines are skipped; a `# victim=<id>` comment sets the victim label.
pub fn parse_memory_trace(text: &str) -> Result<MemoryTrace> {
    let mut records = Vec::new();
    let mut victim_id = String::from("unknown");
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(id) = comment.trim().strip_prefix("victim=") {
                victim_id = id.trim().to_string();
            }
            continue;
        }
        let mut toks = line.split_whitespace();
        let (Some(ip), Some(addr), None) = (toks.next(), toks.next(), toks.next()) else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected `<ip> <addr>`, got {line:?}"),
            });
        };
        let parse = |t: &str| {
            parse_hex(t).ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("malformed hex {t:?}"),
            })
        };
        records.push(MemoryAccessRecord::new(parse(ip)?, parse(addr)?));
    }
    MemoryTrace::new(victim_id, records)
}

/// Which address-derived side channel to observe.
///
/// Defaults follow the usual x86 geometry: 4-byte banks, 64-byte lines and
/// 4 KiB pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelKind {
    /// `addr >> shift`
    CacheBank { shift: u32 },
    /// `addr >> shift`
    CacheLine { shift: u32 },
    /// `addr & !mask`; `mask + 1` must be a power of two.
    PageTable { mask: u64 },
}

impl ChannelKind {
    pub const CACHE_BANK: ChannelKind = ChannelKind::CacheBank { shift: 2 };
    pub const CACHE_LINE: ChannelKind = ChannelKind::CacheLine { shift: 6 };
    pub const PAGE_TABLE: ChannelKind = ChannelKind::PageTable { mask: 4095 };

    pub fn validate(self) -> Result<Self> {
        match self {
            ChannelKind::CacheBank { shift } | ChannelKind::CacheLine { shift } if shift >= 64 => {
                Err(Error::Config(format!("shift {shift} must be below 64")))
            }
            ChannelKind::PageTable { mask } if !mask.wrapping_add(1).is_power_of_two() => Err(
                Error::Config(format!("page mask {mask} + 1 is not a power of two")),
            ),
            k => Ok(k),
        }
    }

    #[inline]
    pub fn project(self, addr: u64) -> u64 {
        match self {
            ChannelKind::CacheBank { shift } | ChannelKind::CacheLine { shift } => addr >> shift,
            ChannelKind::PageTable { mask } => addr & !mask,
        }
    }

    pub fn base_name(self) -> &'static str {
        match self {
            ChannelKind::CacheBank { .. } => "cachebank",
            ChannelKind::CacheLine { .. } => "cacheline",
            ChannelKind::PageTable { .. } => "pagetable",
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            k if k == Self::CACHE_BANK || k == Self::CACHE_LINE || k == Self::PAGE_TABLE => {
                f.write_str(k.base_name())
            }
            ChannelKind::CacheBank { shift } | ChannelKind::CacheLine { shift } => {
                write!(f, "{}:{shift}", self.base_name())
            }
            ChannelKind::PageTable { mask } => write!(f, "{}:{mask}", self.base_name()),
        }
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    /// Accepts `cachebank`, `cacheline`, `pagetable`, optionally followed by
    /// `:<param>` to override the shift or mask.
    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let bad = || Error::Config(format!("bad channel parameter in {s:?}"));
        let kind = match (name.trim().to_ascii_lowercase().as_str(), param) {
            ("cachebank" | "bank", None) => Self::CACHE_BANK,
            ("cacheline" | "line", None) => Self::CACHE_LINE,
            ("pagetable" | "page", None) => Self::PAGE_TABLE,
            ("cachebank" | "bank", Some(p)) => ChannelKind::CacheBank {
                shift: p.parse().map_err(|_| bad())?,
            },
            ("cacheline" | "line", Some(p)) => ChannelKind::CacheLine {
                shift: p.parse().map_err(|_| bad())?,
            },
            ("pagetable" | "page", Some(p)) => ChannelKind::PageTable {
                mask: p.parse().map_err(|_| bad())?,
            },
            _ => return Err(Error::Config(format!("unknown channel kind {s:?}"))),
        };
        kind.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideChannelTrace {
    pub kind: ChannelKind,
    pub records: Vec<u64>,
    /// Set when `records[i]` was derived from record `i` of a memory trace.
    pub aligned: bool,
}

impl SideChannelTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 8 + 16);
        let _ = writeln!(out, "kind={}", self.kind);
        for r in &self.records {
            let _ = writeln!(out, "{r}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let kind = match lines.next() {
            Some((_, header)) => match header.trim().strip_prefix("kind=") {
                Some(k) => k.parse()?,
                None => {
                    return Err(Error::Parse {
                        line: 1,
                        msg: "missing `kind=<name>` header".into(),
                    })
                }
            },
            None => return Err(Error::EmptyTrace),
        };
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            records.push(line.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("expected decimal index, got {line:?}"),
            })?);
        }
        // Aligned-ness is not part of the file format; files written by
        // `derive` are always aligned.
        Ok(Self {
            kind,
            records,
            aligned: true,
        })
    }
}

/// Projects every memory address through `kind`. Total and order-preserving.
pub fn derive_side_channel(trace: &MemoryTrace, kind: ChannelKind) -> SideChannelTrace {
    SideChannelTrace {
        kind,
        records: trace.addresses().map(|a| kind.project(a)).collect(),
        aligned: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_prefixed_hex() {
        let t = parse_memory_trace("0x401000 0x7f0010").unwrap();
        assert_eq!(t.records(), &[MemoryAccessRecord::new(0x401000, 0x7f0010)]);
    }

    #[test]
    fn skips_comments_and_accepts_bare_hex() {
        let t = parse_memory_trace("# header\n401000 1000").unwrap();
        assert_eq!(t.records(), &[MemoryAccessRecord::new(0x401000, 0x1000)]);
    }

    #[test]
    fn malformed_hex_cites_line() {
        assert_eq!(
            parse_memory_trace("0x40 zz").unwrap_err(),
            Error::Parse {
                line: 1,
                msg: "malformed hex \"zz\"".into()
            }
        );
        match parse_memory_trace("# c\n1 2\n3\n").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn empty_trace_rejected() {
        assert_eq!(parse_memory_trace("# nothing\n\n"), Err(Error::EmptyTrace));
    }

    #[test]
    fn worked_derivations() {
        assert_eq!(ChannelKind::CACHE_LINE.project(4096), 64);
        assert_eq!(ChannelKind::CACHE_BANK.project(4096), 1024);
        assert_eq!(ChannelKind::PAGE_TABLE.project(8191), 4096);
        assert_eq!(ChannelKind::PAGE_TABLE.project(4096), 4096);
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in [
            ChannelKind::CACHE_BANK,
            ChannelKind::CACHE_LINE,
            ChannelKind::PAGE_TABLE,
            ChannelKind::CacheLine { shift: 7 },
            ChannelKind::PageTable { mask: 8191 },
        ] {
            assert_eq!(k.to_string().parse::<ChannelKind>().unwrap(), k);
        }
        assert!("pagetable:4000".parse::<ChannelKind>().is_err());
        assert!("tlb".parse::<ChannelKind>().is_err());
    }

    #[test]
    fn side_channel_text_roundtrip() {
        let mt = parse_memory_trace("1 0x1000\n2 0x1fff\n").unwrap();
        let sc = derive_side_channel(&mt, ChannelKind::CACHE_LINE);
        assert_eq!(sc.to_text(), "kind=cacheline\n64\n127\n");
        assert_eq!(SideChannelTrace::from_text(&sc.to_text()).unwrap(), sc);
    }

    proptest! {
        #[test]
        fn derivation_is_positional(addrs in prop::collection::vec(any::<u64>(), 1..64)) {
            let recs = addrs.iter().enumerate().map(|(i, &a)| MemoryAccessRecord::new(i as u64, a)).collect();
            let mt = MemoryTrace::new("p", recs).unwrap();
            for kind in [ChannelKind::CACHE_BANK, ChannelKind::CACHE_LINE, ChannelKind::PAGE_TABLE] {
                let sc = derive_side_channel(&mt, kind);
                prop_assert!(sc.aligned);
                prop_assert_eq!(sc.len(), addrs.len());
                for (i, &a) in addrs.iter().enumerate() {
                    prop_assert_eq!(sc.records[i], kind.project(a));
                }
            }
        }

        #[test]
        fn line_is_bank_shifted_and_page_idempotent(addr in any::<u64>()) {
            prop_assert_eq!(ChannelKind::CACHE_LINE.project(addr), ChannelKind::CACHE_BANK.project(addr) >> 4);
            let p = ChannelKind::PAGE_TABLE.project(addr);
            prop_assert_eq!(p % 4096, 0);
            prop_assert_eq!(ChannelKind::PAGE_TABLE.project(p), p);
        }

        #[test]
        fn text_roundtrip(recs in prop::collection::vec((any::<u64>(), any::<u64>()), 1..32)) {
            let recs: Vec<_> = recs.into_iter().map(|(i, a)| MemoryAccessRecord::new(i, a)).collect();
            let mt = MemoryTrace::new("victim", recs).unwrap();
            prop_assert_eq!(parse_memory_trace(&mt.to_text()).unwrap(), mt);
        }
    }
}
