//! Token grids, a synthetic class-conditional generator with a closed-form
//! optimal NLL, and the NPPT on-disk dataset format.
//!
//! NPPT layout, all little-endian:
//!
//! ```text
//! "NPPT" | u32 version=1 | u32 vocab | u16 H | u16 W | u32 num_classes | u64 count
//! count x ( u32 class_label | H*W x u32 token )
//! ```

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FormatError, NppError, Result};
use crate::rng::{self, Purpose};

pub const MAGIC: [u8; 4] = *b"NPPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    class_label: u32,
    height: usize,
    width: usize,
    tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(class_label: u32, height: usize, width: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != height * width {
            return Err(NppError::Dimension(format!(
                "{} tokens for a {height}x{width} grid",
                tokens.len()
            )));
        }
        Ok(TokenGrid {
            class_label,
            height,
            width,
            tokens,
        })
    }

    pub fn class_label(&self) -> u32 {
        self.class_label
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Raster-order token ids.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| t as usize).collect()
    }

    pub fn at(&self, h: usize, w: usize) -> u32 {
        self.tokens[h * self.width + w]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    vocab: u32,
    height: u16,
    width: u16,
    num_classes: u32,
    grids: Vec<TokenGrid>,
}

impl Dataset {
    pub fn new(vocab: u32, height: usize, width: usize, num_classes: u32, grids: Vec<TokenGrid>) -> Result<Self> {
        let (h, w) = (dim_u16(height)?, dim_u16(width)?);
        for (i, g) in grids.iter().enumerate() {
            if g.height != height || g.width != width {
                return Err(NppError::Dimension(format!(
                    "record {i} is {}x{}, dataset is {height}x{width}",
                    g.height, g.width
                )));
            }
            if g.class_label >= num_classes {
                return Err(NppError::Index(format!(
                    "record {i}: class {} >= {num_classes}",
                    g.class_label
                )));
            }
            if let Some(t) = g.tokens.iter().find(|&&t| t >= vocab) {
                return Err(NppError::Index(format!("record {i}: token {t} >= vocab {vocab}")));
            }
        }
        Ok(Dataset {
            vocab,
            height: h,
            width: w,
            num_classes,
            grids,
        })
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn height(&self) -> usize {
        self.height as usize
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn grids(&self) -> &[TokenGrid] {
        &self.grids
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let per = 4 + 4 * self.height() * self.width();
        let mut out = Vec::with_capacity(HEADER_LEN + per * self.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.vocab.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.num_classes.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for g in &self.grids {
            out.extend_from_slice(&g.class_label.to_le_bytes());
            for t in &g.tokens {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        if bytes.len() < 4 {
            return Err(FormatError::TruncatedHeader);
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic });
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::TruncatedHeader);
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let vocab = u32_at(8);
        let (height, width) = (u16_at(12), u16_at(14));
        let num_classes = u32_at(16);
        let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let n = height as usize * width as usize;
        let per = 4 + 4 * n;
        let mut grids = Vec::new();
        let mut offset = HEADER_LEN;
        for record in 0..count {
            if bytes.len() < offset + per {
                return Err(FormatError::TruncatedRecord { record });
            }
            let class = u32_at(offset);
            if class >= num_classes {
                return Err(FormatError::ClassOutOfRange {
                    record,
                    class,
                    num_classes,
                });
            }
            let mut tokens = Vec::with_capacity(n);
            for i in 0..n {
                let token = u32_at(offset + 4 + 4 * i);
                if token >= vocab {
                    return Err(FormatError::TokenOutOfRange { record, token, vocab });
                }
                tokens.push(token);
            }
            grids.push(TokenGrid {
                class_label: class,
                height: height as usize,
                width: width as usize,
                tokens,
            });
            offset += per;
        }
        if offset != bytes.len() {
            return Err(FormatError::TrailingBytes {
                extra: bytes.len() - offset,
            });
        }
        Ok(Dataset {
            vocab,
            height,
            width,
            num_classes,
            grids,
        })
    }
}

fn dim_u16(x: usize) -> Result<u16> {
    u16::try_from(x).map_err(|_| NppError::Dimension(format!("grid side {x} exceeds u16")))
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset.to_bytes()).map_err(|e| NppError::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| NppError::io(path, e))?;
    Ok(Dataset::from_bytes(&bytes)?)
}

/// Linear-pattern source: `token(h, w, c) = (a_c·h + b_c·w + c) mod V`, each
/// token replaced by a uniform draw with probability `noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: u32,
    pub vocab: u32,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.vocab == 0 || self.height == 0 || self.width == 0 {
            return Err(NppError::Config("synthetic spec dimensions must be positive".into()));
        }
        dim_u16(self.height)?;
        dim_u16(self.width)?;
        if !(0.0..1.0).contains(&self.noise) && self.noise != 1.0 {
            return Err(NppError::Config(format!("noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }

    /// Per-class `(a_c, b_c)`, drawn once from the seed.
    pub fn pattern_constants(&self) -> Vec<(u32, u32)> {
        let mut rng = rng::stream(self.seed, Purpose::Data, u64::MAX);
        (0..self.num_classes)
            .map(|_| (rng.gen_range(0..self.vocab), rng.gen_range(0..self.vocab)))
            .collect()
    }

    pub fn pattern_token(&self, constants: &[(u32, u32)], h: usize, w: usize, class: u32) -> u32 {
        let (a, b) = constants[class as usize];
        let v = self.vocab as u64;
        ((a as u64 * h as u64 + b as u64 * w as u64 + class as u64) % v) as u32
    }

    /// Noise-free grid for `class`.
    pub fn pattern_grid(&self, class: u32) -> TokenGrid {
        let constants = self.pattern_constants();
        let tokens = (0..self.height * self.width)
            .map(|i| self.pattern_token(&constants, i / self.width, i % self.width, class))
            .collect();
        TokenGrid {
            class_label: class,
            height: self.height,
            width: self.width,
            tokens,
        }
    }

    /// Emission probability of `token` at a cell whose pattern value is `pattern`.
    pub fn emission_prob(&self, token: u32, pattern: u32) -> f64 {
        let uniform = self.noise / self.vocab as f64;
        if token == pattern {
            1.0 - self.noise + uniform
        } else {
            uniform
        }
    }
}

/// `count` records with indices `0..count`.
pub fn generate_dataset(spec: &SyntheticSpec, count: usize) -> Result<Dataset> {
    generate_records(spec, 0, count)
}

/// Records `first..first+count`. Record `i` depends only on the seed and `i`,
/// so disjoint ranges give independent train and held-out splits.
pub fn generate_records(spec: &SyntheticSpec, first: u64, count: usize) -> Result<Dataset> {
    spec.validate()?;
    let constants = spec.pattern_constants();
    let grids = (first..first + count as u64)
        .map(|index| {
            let mut rng = rng::stream(spec.seed, Purpose::Data, index);
            let class = rng.gen_range(0..spec.num_classes);
            let tokens = (0..spec.height * spec.width)
                .map(|i| {
                    if rng.gen::<f64>() < spec.noise {
                        rng.gen_range(0..spec.vocab)
                    } else {
                        spec.pattern_token(&constants, i / spec.width, i % spec.width, class)
                    }
                })
                .collect();
            TokenGrid {
                class_label: class,
                height: spec.height,
                width: spec.width,
                tokens,
            }
        })
        .collect();
    Dataset::new(spec.vocab, spec.height, spec.width, spec.num_classes, grids)
}

/// Per-token entropy of the emission distribution,
/// `-[q ln q + (V-1)(ε/V) ln(ε/V)]` with `q = 1 - ε + ε/V`.
pub fn optimal_nll(spec: &SyntheticSpec) -> f64 {
    let v = spec.vocab as f64;
    let q = 1.0 - spec.noise + spec.noise / v;
    let r = spec.noise / v;
    let xlnx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    -(xlnx(q) + (v - 1.0) * xlnx(r))
}
