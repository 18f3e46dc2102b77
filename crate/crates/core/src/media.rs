//! Media inputs: continuous grayscale images and framed token sequences.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SOS: usize = 0;
pub const EOS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MediaSample {
    /// Row-major `height x width` image, values in `[0, 1]`.
    Continuous {
        height: usize,
        width: usize,
        values: Vec<f64>,
    },
    /// Token ids framed by [`SOS`] and [`EOS`].
    TokenSeq { tokens: Vec<usize> },
}

impl MediaSample {
    pub fn image(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape {
                expected: format!("{height}x{width} = {} values", height * width),
                actual: format!("{} values", values.len()),
            });
        }
        Ok(Self::Continuous {
            height,
            width,
            values,
        })
    }

    /// Frames `words` with SOS/EOS.
    pub fn sentence(words: &[usize]) -> Self {
        let mut tokens = Vec::with_capacity(words.len() + 2);
        tokens.push(SOS);
        tokens.extend_from_slice(words);
        tokens.push(EOS);
        Self::TokenSeq { tokens }
    }

    pub fn modality(&self) -> Modality {
        match self {
            Self::Continuous { .. } => Modality::Continuous,
            Self::TokenSeq { .. } => Modality::Text,
        }
    }

    pub fn pixels(&self) -> Result<&[f64]> {
        match self {
            Self::Continuous { values, .. } => Ok(values),
            Self::TokenSeq { .. } => Err(Error::Modality("expected an image, got tokens".into())),
        }
    }

    pub fn tokens(&self) -> Result<&[usize]> {
        match self {
            Self::TokenSeq { tokens } => Ok(tokens),
            Self::Continuous { .. } => Err(Error::Modality("expected tokens, got an image".into())),
        }
    }

    /// Tokens strictly between the SOS/EOS frame.
    pub fn words(&self) -> Result<&[usize]> {
        let t = self.tokens()?;
        let start = usize::from(t.first() == Some(&SOS));
        let end = if t.len() > start && t.last() == Some(&EOS) {
            t.len() - 1
        } else {
            t.len()
        };
        Ok(&t[start..end])
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self {
            Self::Continuous {
                height,
                width,
                values,
            } => {
                let _ = writeln!(out, "continuous {height} {width}");
                for row in values.chunks(*width) {
                    let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    let _ = writeln!(out, "{}", line.join(" "));
                }
            }
            Self::TokenSeq { tokens } => {
                let line: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
                let _ = writeln!(out, "tokens {}", line.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut toks = text.split_whitespace();
        match toks.next() {
            Some("continuous") => {
                let mut dim = || -> Result<usize> {
                    toks.next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::Format("bad image header".into()))
                };
                let (h, w) = (dim()?, dim()?);
                let values = toks
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| Error::Format(format!("bad pixel {t:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::image(h, w, values)
            }
            Some("tokens") => Ok(Self::TokenSeq {
                tokens: toks
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad token {t:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?,
            }),
            other => Err(Error::Format(format!("unknown sample kind {other:?}"))),
        }
    }

    /// Binary 8-bit portable graymap. Values are clamped to `[0, 1]`.
    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        let Self::Continuous {
            height,
            width,
            values,
        } = self
        else {
            return Err(Error::Modality("only images can be written as PGM".into()));
        };
        let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
        out.extend(
            values
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Continuous,
    Text,
}

/// Fixed word list; token id `i + 2` is `words[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Self {
        Self {
            words: words.into_iter().map(Into::into).collect(),
        }
    }

    /// Total token count including SOS and EOS.
    pub fn size(&self) -> usize {
        self.words.len() + 2
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn token(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word).map(|i| i + 2)
    }

    pub fn word(&self, token: usize) -> &str {
        match token {
            SOS => "<sos>",
            EOS => "<eos>",
            t => self.words.get(t - 2).map_or("<unk>", String::as_str),
        }
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
