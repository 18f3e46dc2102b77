//! Toy victim programs and the synthetic datasets they are run on.
//!
//! Each victim is an interpreted access-pattern emitter modeled on a known
//! leaky idiom:
//!
//! * [`VictimKind::Lookup`]: a secret-indexed table load per input element,
//!   as in Huffman `HUFF_EXTEND`-style decoders.
//! * [`VictimKind::Transform`]: an inverse transform whose inner loop bound
//!   is the last nonzero column, so the number of coefficient loads leaks.
//! * [`VictimKind::HashCheck`]: a spell-check dictionary probe that reads
//!   the hash bucket of every word.
//!
//! Alongside the leaky loads every victim emits input-independent
//! "scaffolding" accesses from other functions, giving localization true
//! negatives. Instruction addresses come from a small [`SymbolMap`], so the
//! ground truth for which records leak is exact.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{MediaSample, Modality, Vocabulary};
use crate::rng;
use crate::trace_model::{MemoryAccessRecord, MemoryTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VictimKind {
    Lookup,
    Transform,
    HashCheck,
}

impl VictimKind {
    pub fn modality(self) -> Modality {
        match self {
            VictimKind::Lookup | VictimKind::Transform => Modality::Continuous,
            VictimKind::HashCheck => Modality::Text,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VictimKind::Lookup => "lookup",
            VictimKind::Transform => "transform",
            VictimKind::HashCheck => "hashcheck",
        }
    }
}

impl fmt::Display for VictimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VictimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lookup" => Ok(Self::Lookup),
            "transform" => Ok(Self::Transform),
            "hashcheck" | "hash" => Ok(Self::HashCheck),
            _ => Err(Error::Config(format!("unknown victim {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symbol {
    pub start: u64,
    pub end: u64,
    pub name: String,
    /// Whether the function performs secret-dependent accesses.
    pub leaky: bool,
}

/// Disjoint, sorted instruction-address ranges.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SymbolMap {
    symbols: Vec<Symbol>,
}

impl SymbolMap {
    pub fn new(mut symbols: Vec<Symbol>) -> Result<Self> {
        symbols.sort_by_key(|s| s.start);
        for s in &symbols {
            if s.start >= s.end {
                return Err(Error::Config(format!("empty symbol range for {}", s.name)));
            }
        }
        for w in symbols.windows(2) {
            if w[0].end > w[1].start {
                return Err(Error::Config(format!(
                    "symbols {} and {} overlap",
                    w[0].name, w[1].name
                )));
            }
        }
        Ok(Self { symbols })
    }

    pub fn lookup(&self, ip: u64) -> Option<&Symbol> {
        let idx = self.symbols.partition_point(|s| s.start <= ip);
        self.symbols[..idx].last().filter(|s| ip < s.end)
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    /// `<start> <end> <name> <leaky|clean>` per line.
    pub fn to_text(&self) -> String {
        self.symbols
            .iter()
            .map(|s| {
                format!(
                    "{:#x} {:#x} {} {}\n",
                    s.start,
                    s.end,
                    s.name,
                    if s.leaky { "leaky" } else { "clean" }
                )
            })
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut symbols = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let err = || Error::Parse {
                line: i + 1,
                msg: format!("expected `<start> <end> <name> [leaky|clean]`, got {line:?}"),
            };
            if parts.len() < 3 {
                return Err(err());
            }
            let hex = |t: &str| u64::from_str_radix(t.trim_start_matches("0x"), 16).map_err(|_| err());
            symbols.push(Symbol {
                start: hex(parts[0])?,
                end: hex(parts[1])?,
                name: parts[2].to_string(),
                leaky: parts.get(3) == Some(&"leaky"),
            });
        }
        Self::new(symbols)
    }
}

/// Instruction addresses used by the emitters.
mod ip {
    pub const MCU_STATE: u64 = 0x401010;
    pub const MCU_BITBUF: u64 = 0x401024;
    pub const MCU_QTAB: u64 = 0x401030;
    pub const HUFF_EXTEND: u64 = 0x401108;
    pub const EMIT_COEF: u64 = 0x401190;

    pub const IDCT_ROWPTR: u64 = 0x402010;
    pub const IDCT_LIMIT: u64 = 0x402020;
    pub const TR_COEF: u64 = 0x402108;
    pub const TR_SRC: u64 = 0x402110;

    pub const SPELL_DICT: u64 = 0x403010;
    pub const SPELL_WORDBUF: u64 = 0x403020;
    pub const SPELL_RESULT: u64 = 0x403030;
    pub const HASH_BUCKET: u64 = 0x403108;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimProgram {
    pub kind: VictimKind,
    /// Lookup table, transform matrix or hash bucket array.
    pub table_base: u64,
    /// Byte distance between consecutive table entries / buckets.
    pub stride: u64,
    /// Input-independent bookkeeping data, placed just below the table.
    pub scratch_base: u64,
    /// Quantization levels for continuous inputs.
    pub levels: usize,
    pub num_buckets: u64,
    pub symbols: SymbolMap,
}

fn sym(start: u64, end: u64, name: &str, leaky: bool) -> Symbol {
    Symbol {
        start,
        end,
        name: name.to_string(),
        leaky,
    }
}

impl VictimProgram {
    pub fn new(kind: VictimKind) -> Self {
        let (table_base, symbols) = match kind {
            VictimKind::Lookup => (
                0x10000,
                vec![
                    sym(0x401000, 0x401100, "decode_mcu", false),
                    sym(0x401100, 0x401180, "huff_extend", true),
                    sym(0x401180, 0x401200, "emit_coef", false),
                ],
            ),
            VictimKind::Transform => (
                0x20000,
                vec![
                    sym(0x402000, 0x402100, "idct_setup", false),
                    sym(0x402100, 0x402200, "tr_32", true),
                ],
            ),
            VictimKind::HashCheck => (
                0x50000,
                vec![
                    sym(0x403000, 0x403100, "spell_check", false),
                    sym(0x403100, 0x403200, "hash_lookup", true),
                ],
            ),
        };
        Self {
            kind,
            table_base,
            stride: 64,
            scratch_base: table_base - 0x100,
            levels: 8,
            num_buckets: 64,
            symbols: SymbolMap::new(symbols).expect("built-in symbol maps are disjoint"),
        }
    }

    pub fn with_table_base(mut self, base: u64) -> Self {
        self.scratch_base = base.saturating_sub(0x100);
        self.table_base = base;
        self
    }

    pub fn with_stride(mut self, stride: u64) -> Self {
        self.stride = stride;
        self
    }

    pub fn quantize(&self, v: f64) -> u64 {
        let top = self.levels as u64 - 1;
        ((v.clamp(0.0, 1.0) * self.levels as f64).floor() as u64).min(top)
    }

    /// Bucket of a word token. A multiplicative hash with an odd factor, so
    /// distinct tokens below `num_buckets` never collide.
    pub fn bucket(&self, token: usize) -> u64 {
        (token as u64).wrapping_mul(37).wrapping_add(11) % self.num_buckets
    }

    pub fn is_leaky_ip(&self, ip: u64) -> bool {
        self.symbols.lookup(ip).is_some_and(|s| s.leaky)
    }

    /// Ground-truth leak label per record.
    pub fn leaky_mask(&self, trace: &MemoryTrace) -> Vec<bool> {
        trace
            .records()
            .iter()
            .map(|r| self.is_leaky_ip(r.instruction_address))
            .collect()
    }

    fn src_base(&self) -> u64 {
        self.table_base + 0x1000
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimRun {
    pub trace: MemoryTrace,
    pub output: MediaSample,
}

/// Executes `program` on `input`, returning the access trace and the public
/// output. Outputs are linear in the input: the lookup victim mirrors the
/// image horizontally, the transform victim transposes it and the
/// hash-check victim echoes its tokens.
pub fn run_victim(program: &VictimProgram, input: &MediaSample) -> Result<VictimRun> {
    if input.modality() != program.kind.modality() {
        return Err(Error::Modality(format!(
            "{} victim expects {:?} input, got {:?}",
            program.kind,
            program.kind.modality(),
            input.modality()
        )));
    }
    let mut recs = Vec::new();
    let mut push = |ip: u64, addr: u64| recs.push(MemoryAccessRecord::new(ip, addr));
    let s = program.scratch_base;
    let output = match (program.kind, input) {
        (
            VictimKind::Lookup,
            MediaSample::Continuous {
                height,
                width,
                values,
            },
        ) => {
            for (k, &v) in values.iter().enumerate() {
                let slot = (k % 8) as u64 * 8;
                push(ip::MCU_STATE, s);
                push(ip::MCU_BITBUF, s + 0x40 + slot);
                push(ip::HUFF_EXTEND, program.table_base + program.quantize(v) * program.stride);
                push(ip::MCU_QTAB, s + 0x80 + slot);
                push(ip::EMIT_COEF, s + 0xc0 + slot);
            }
            let mut out = vec![0.0; values.len()];
            for r in 0..*height {
                for c in 0..*width {
                    out[r * width + c] = values[r * width + (width - 1 - c)];
                }
            }
            MediaSample::image(*height, *width, out)?
        }
        (
            VictimKind::Transform,
            MediaSample::Continuous {
                height,
                width,
                values,
            },
        ) => {
            let outputs = width.div_ceil(4).max(1);
            for r in 0..*height {
                let row = &values[r * width..(r + 1) * width];
                let limit = row
                    .iter()
                    .rposition(|&v| program.quantize(v) > 0)
                    .map_or(0, |p| p + 1);
                push(ip::IDCT_ROWPTR, s + (r as u64 % 8) * 8);
                push(ip::IDCT_LIMIT, s + 0x40);
                for i in 0..outputs {
                    for j in (1..limit).step_by(2) {
                        push(ip::TR_COEF, program.table_base + ((j * width + i) as u64) * 4);
                        push(ip::TR_SRC, program.src_base() + ((r * width + j) as u64) * 4);
                    }
                }
            }
            let mut out = vec![0.0; values.len()];
            for r in 0..*height {
                for c in 0..*width {
                    out[c * height + r] = values[r * width + c];
                }
            }
            MediaSample::image(*width, *height, out)?
        }
        (VictimKind::HashCheck, sample @ MediaSample::TokenSeq { .. }) => {
            for (pos, &w) in sample.words()?.iter().enumerate() {
                push(ip::SPELL_DICT, s);
                push(ip::SPELL_WORDBUF, s + 0x40 + (pos as u64 % 8) * 8);
                push(ip::HASH_BUCKET, program.table_base + program.bucket(w) * program.stride);
                push(ip::SPELL_RESULT, s + 0x80);
            }
            if sample.words()?.is_empty() {
                // an empty sentence still consults the dictionary header
                push(ip::SPELL_DICT, s);
            }
            sample.clone()
        }
        _ => unreachable!("modality checked above"),
    };
    Ok(VictimRun {
        trace: MemoryTrace::new(program.kind.name(), recs)?,
        output,
    })
}

/// Generative family for continuous samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageFamily {
    /// One anisotropic Gaussian blob: center x/y and two widths.
    Blobs,
    /// Sinusoidal gratings: frequency, orientation, phase and contrast.
    Gratings,
}

impl FromStr for ImageFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "gratings" => Ok(Self::Gratings),
            _ => Err(Error::Config(format!("unknown image family {s:?}"))),
        }
    }
}

impl fmt::Display for ImageFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Blobs => "blobs",
            Self::Gratings => "gratings",
        })
    }
}

pub const SECRET_CLASSES: usize = 4;

/// Draws a 4-factor image and its secret class.
pub fn sample_image<R: Rng>(
    family: ImageFamily,
    height: usize,
    width: usize,
    rng: &mut R,
) -> (MediaSample, usize) {
    let (h, w) = (height as f64, width as f64);
    let mut values = Vec::with_capacity(height * width);
    let label;
    match family {
        ImageFamily::Blobs => {
            let cx = rng.gen_range(0.2 * w..0.8 * w);
            let cy = rng.gen_range(0.2 * h..0.8 * h);
            let sx = rng.gen_range(0.09 * w..0.22 * w);
            let sy = rng.gen_range(0.09 * h..0.22 * h);
            label = usize::from(cy >= h / 2.0) * 2 + usize::from(cx >= w / 2.0);
            for y in 0..height {
                for x in 0..width {
                    let dx = (x as f64 + 0.5 - cx) / sx;
                    let dy = (y as f64 + 0.5 - cy) / sy;
                    values.push((-0.5 * (dx * dx + dy * dy)).exp());
                }
            }
        }
        ImageFamily::Gratings => {
            let freq = rng.gen_range(1.0..3.0);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let contrast = rng.gen_range(0.5..1.0);
            label = ((theta / std::f64::consts::PI) * SECRET_CLASSES as f64) as usize % SECRET_CLASSES;
            for y in 0..height {
                for x in 0..width {
                    let t = (x as f64 * theta.cos() + y as f64 * theta.sin()) / w;
                    let v = 0.5 + 0.5 * contrast * (std::f64::consts::TAU * freq * t + phase).sin();
                    values.push(v);
                }
            }
        }
    }
    (
        MediaSample::image(height, width, values).expect("dimensions match"),
        label,
    )
}

/// The 32-word toy lexicon, grouped by part of speech.
pub fn toy_vocabulary() -> Vocabulary {
    Vocabulary::new(LEXICON.iter().flat_map(|(_, words)| words.iter().copied()))
}

const LEXICON: [(&str, &[&str]); 6] = [
    ("det", &["the", "a", "this", "my"]),
    ("adj", &["red", "old", "small", "quiet", "bright", "cold"]),
    (
        "noun",
        &["cat", "dog", "house", "river", "child", "ship", "tree", "bird"],
    ),
    ("verb", &["sees", "likes", "finds", "follows", "hears", "builds"]),
    ("prep", &["near", "under", "with", "behind"]),
    ("adv", &["slowly", "often", "today", "again"]),
];

fn category(vocab: &Vocabulary, cat: &str) -> Vec<usize> {
    LEXICON
        .iter()
        .find(|(c, _)| *c == cat)
        .map(|(_, ws)| ws.iter().filter_map(|w| vocab.token(w)).collect())
        .unwrap_or_default()
}

/// `DET [ADJ] NOUN VERB DET [ADJ] NOUN [PREP DET NOUN] [ADV]`. The secret
/// class is derived from the subject noun.
pub fn sample_sentence<R: Rng>(vocab: &Vocabulary, rng: &mut R) -> (MediaSample, usize) {
    let det = category(vocab, "det");
    let adj = category(vocab, "adj");
    let noun = category(vocab, "noun");
    let verb = category(vocab, "verb");
    let prep = category(vocab, "prep");
    let adv = category(vocab, "adv");
    let pick = |rng: &mut R, set: &[usize]| set[rng.gen_range(0..set.len())];

    let mut words = Vec::with_capacity(11);
    words.push(pick(rng, &det));
    if rng.gen_bool(0.5) {
        words.push(pick(rng, &adj));
    }
    let subject = rng.gen_range(0..noun.len());
    words.push(noun[subject]);
    words.push(pick(rng, &verb));
    words.push(pick(rng, &det));
    if rng.gen_bool(0.5) {
        words.push(pick(rng, &adj));
    }
    words.push(pick(rng, &noun));
    if rng.gen_bool(0.4) {
        words.push(pick(rng, &prep));
        words.push(pick(rng, &det));
        words.push(pick(rng, &noun));
    }
    if rng.gen_bool(0.3) {
        words.push(pick(rng, &adv));
    }
    (MediaSample::sentence(&words), subject % SECRET_CLASSES)
}

/// Line-oriented `key=value` dataset description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub victim: VictimKind,
    pub samples: usize,
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub family: ImageFamily,
}

impl DatasetManifest {
    /// 80/20 train/test split of `samples`.
    pub fn new(victim: VictimKind, samples: usize, seed: u64) -> Self {
        let test = samples / 5;
        Self {
            victim,
            samples,
            seed,
            train: samples - test,
            test,
            height: 16,
            width: 16,
            family: ImageFamily::Blobs,
        }
    }

    pub fn with_split(mut self, train: usize, test: usize) -> Self {
        self.train = train;
        self.test = test;
        self.samples = train + test;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.train == 0 || self.test == 0 {
            return Err(Error::Config(format!(
                "dataset needs at least one train and one test sample (samples={}, train={}, test={})",
                self.samples, self.train, self.test
            )));
        }
        if self.train + self.test != self.samples {
            return Err(Error::Config("train + test must equal samples".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "victim={}\nsamples={}\nseed={}\ntrain={}\ntest={}\nheight={}\nwidth={}\nfamily={}\n",
            self.victim, self.samples, self.seed, self.train, self.test, self.height, self.width, self.family
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = DatasetManifest::new(VictimKind::Lookup, 0, 0);
        let mut seen_victim = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let num = |v: &str| -> Result<u64> {
                v.trim().parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("bad number {v:?}"),
                })
            };
            match k.trim() {
                "victim" => {
                    m.victim = v.trim().parse()?;
                    seen_victim = true;
                }
                "samples" => m.samples = num(v)? as usize,
                "seed" => m.seed = num(v)?,
                "train" => m.train = num(v)? as usize,
                "test" => m.test = num(v)? as usize,
                "height" => m.height = num(v)? as usize,
                "width" => m.width = num(v)? as usize,
                "family" => m.family = v.trim().parse()?,
                other => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("unknown manifest key {other:?}"),
                    })
                }
            }
        }
        if !seen_victim {
            return Err(Error::Config("manifest lacks victim=".into()));
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub index: usize,
    pub split: Split,
    pub input: MediaSample,
    pub secret: usize,
    pub trace: MemoryTrace,
    pub output: MediaSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub program: VictimProgram,
    pub vocab: Option<Vocabulary>,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |it| it.split == split)
    }
}

/// Draws one input for `manifest` from the per-sample seed stream.
pub fn draw_input(manifest: &DatasetManifest, vocab: &Vocabulary, index: usize) -> (MediaSample, usize) {
    let mut rng = rng::stream(manifest.seed, "dataset", index as u64);
    match manifest.victim.modality() {
        Modality::Continuous => sample_image(manifest.family, manifest.height, manifest.width, &mut rng),
        Modality::Text => sample_sentence(vocab, &mut rng),
    }
}

/// Generates the dataset described by `manifest`. Sample `i` depends only
/// on the seed and `i`; the first `train` indices form the training split.
pub fn gen_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    let program = VictimProgram::new(manifest.victim);
    let vocab = toy_vocabulary();
    let mut items = Vec::with_capacity(manifest.samples);
    for index in 0..manifest.samples {
        let (input, secret) = draw_input(manifest, &vocab, index);
        let run = run_victim(&program, &input)?;
        items.push(DatasetItem {
            index,
            split: if index < manifest.train {
                Split::Train
            } else {
                Split::Test
            },
            input,
            secret,
            trace: run.trace,
            output: run.output,
        });
    }
    Ok(Dataset {
        manifest: manifest.clone(),
        program,
        vocab: (manifest.victim.modality() == Modality::Text).then_some(vocab),
        items,
    })
}
