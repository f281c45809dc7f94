//! Synthetic visual question answering task and the frozen proxy language
//! space that stands in for an LLM's hidden states and input embeddings.
//!
//! # Generator
//!
//! Every draw comes from [`SplitMix64`] (constants below), so a sample is a
//! pure function of its 64-bit seed and can be regenerated bit-for-bit by
//! any implementation. Sample `i` of a dataset seeded with `s` uses
//! [`stream_seed`]`(s, i)`.
//!
//! Draw order for one sample:
//! 1. `answer = below(12)`. Answers `0..5` are colours (family
//!    `color_of_shape`), `5..9` shapes (`shape_of_color`), `9..12` glyph
//!    counts 1..=3 (`count`). Classes are therefore uniform by construction.
//! 2. Glyph count `n`: fixed by the answer for `count`, else `1 + below(3)`.
//! 3. Shapes then colours, each a distinct prefix of a Fisher-Yates shuffle
//!    (`for i in (1..len).rev() { swap(i, below(i + 1)) }`). For the two
//!    attribute families the answer attribute is removed before shuffling
//!    and placed at glyph 0, which is the glyph the question refers to.
//! 4. Cells: a shuffled prefix of the `(size/4)²` grid cells, then for each
//!    glyph a row offset and a column offset, each `below(2)`.
//! 5. Background: for every pixel in `(y, x, channel)` order,
//!    `noise · unit()`. Glyph pixels then add `0.9 · colour`.
//!
//! `below(n)` is `next_u64() % n`; `unit()` is `(next_u64() >> 40) · 2⁻²⁴`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig};
use crate::tensor::Tensor;

pub const COLORS: [&str; 5] = ["red", "green", "blue", "yellow", "magenta"];
pub const SHAPES: [&str; 4] = ["square", "plus", "cross", "triangle"];
const COLOR_RGB: [[f32; 3]; 5] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
];
const SHAPE_MASKS: [[u8; 9]; 4] = [
    [1, 1, 1, 1, 1, 1, 1, 1, 1],
    [0, 1, 0, 1, 1, 1, 0, 1, 0],
    [1, 0, 1, 0, 1, 0, 1, 0, 1],
    [1, 0, 0, 1, 1, 0, 1, 1, 1],
];
const GLYPH_INTENSITY: f32 = 0.9;
const CELL: usize = 4;
pub const MAX_GLYPHS: usize = 3;

/// Question token vocabulary, V_q = 16.
pub const QUESTION_TOKENS: [&str; 16] = [
    "what", "color", "shape", "how-many", "glyphs", "?", "square", "plus", "cross", "triangle", "red", "green", "blue",
    "yellow", "magenta", "is",
];
pub const QUESTION_VOCAB: usize = QUESTION_TOKENS.len();
/// Tokens per question, T_q.
pub const QUESTION_LEN: usize = 4;
/// Answer vocabulary, V_a = 12: five colours, four shapes, counts 1..=3.
pub const ANSWER_VOCAB: usize = COLORS.len() + SHAPES.len() + MAX_GLYPHS;

const TOK_WHAT: u32 = 0;
const TOK_COLOR: u32 = 1;
const TOK_SHAPE: u32 = 2;
const TOK_HOW_MANY: u32 = 3;
const TOK_GLYPHS: u32 = 4;
const TOK_QMARK: u32 = 5;
const TOK_FIRST_SHAPE: u32 = 6;
const TOK_FIRST_COLOR: u32 = 10;
const TOK_IS: u32 = 15;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{table} token id {id} out of range for vocabulary of {len}")]
    TokenOutOfRange { table: &'static str, id: u32, len: usize },
    #[error("empty token list")]
    Empty,
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset record: {0}")]
    Malformed(String),
}

/// SplitMix64 (Steele, Lea & Flood): `state += 0x9E3779B97F4A7C15`, then
/// two xor-shift-multiply rounds with `0xBF58476D1CE4E5B9` and
/// `0x94D049BB133111EB`.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Uniform in `[0, 1)` with 24 bits of precision.
    pub fn unit(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Seed of sample `index` in the dataset seeded by `dataset_seed`.
pub fn stream_seed(dataset_seed: u64, index: u64) -> u64 {
    SplitMix64::new(dataset_seed ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03)).next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// "what color is the <shape>?" Requires binding shape and colour locally.
    ColorOfShape,
    /// "what shape is the <color> glyph?"
    ShapeOfColor,
    /// "how many glyphs?" Answerable from global statistics.
    Count,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::ColorOfShape, Family::ShapeOfColor, Family::Count];

    pub fn name(self) -> &'static str {
        match self {
            Family::ColorOfShape => "color_of_shape",
            Family::ShapeOfColor => "shape_of_color",
            Family::Count => "count",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    /// Family an answer id belongs to.
    pub fn of_answer(answer: usize) -> Family {
        if answer < COLORS.len() {
            Family::ColorOfShape
        } else if answer < COLORS.len() + SHAPES.len() {
            Family::ShapeOfColor
        } else {
            Family::Count
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub image_size: usize,
    /// Amplitude of the uniform background noise.
    pub noise: f32,
    /// Seed of the proxy language tables.
    pub language_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            image_size: 16,
            noise: 0.1,
            language_seed: 0x1a_26_5eed,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), ConfigError> {
        if self.image_size != model.backbone.image_size || model.backbone.channels != 3 {
            return Err(ConfigError::Invalid(
                "task image must match the backbone's image_size with 3 channels".into(),
            ));
        }
        if self.image_size % CELL != 0 || (self.image_size / CELL).pow(2) < MAX_GLYPHS {
            return Err(ConfigError::Invalid(format!(
                "image_size must be a multiple of {CELL} with room for {MAX_GLYPHS} glyph cells"
            )));
        }
        if model.answers != ANSWER_VOCAB {
            return Err(ConfigError::Invalid(format!("task has {ANSWER_VOCAB} answers")));
        }
        if !(self.noise >= 0.0 && self.noise < 1.0) {
            return Err(ConfigError::Invalid("noise must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Glyph {
    pub shape: usize,
    pub color: usize,
    pub cell: usize,
    pub offset: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `H×W×3`, values in `[0, 1)`.
    pub image: Tensor<f32>,
    pub question_id: u32,
    pub question_tokens: Vec<u32>,
    pub answer_id: u32,
    pub family: Family,
    pub seed: u64,
    pub glyphs: Vec<Glyph>,
}

pub fn generate_sample(seed: u64, spec: &TaskSpec) -> Sample {
    let mut rng = SplitMix64::new(seed);
    let answer = rng.below(ANSWER_VOCAB);
    let family = Family::of_answer(answer);
    let n = match family {
        Family::Count => answer - COLORS.len() - SHAPES.len() + 1,
        _ => 1 + rng.below(MAX_GLYPHS),
    };

    let mut shapes: Vec<usize> = (0..SHAPES.len()).collect();
    let mut colors: Vec<usize> = (0..COLORS.len()).collect();
    let pinned_shape = (family == Family::ShapeOfColor).then(|| answer - COLORS.len());
    let pinned_color = (family == Family::ColorOfShape).then_some(answer);
    let draw = |rng: &mut SplitMix64, items: &mut Vec<usize>, pinned: Option<usize>| {
        if let Some(p) = pinned {
            items.retain(|&x| x != p);
        }
        rng.shuffle(items);
        if let Some(p) = pinned {
            items.insert(0, p);
        }
        items.truncate(n);
    };
    draw(&mut rng, &mut shapes, pinned_shape);
    draw(&mut rng, &mut colors, pinned_color);

    let side = spec.image_size / CELL;
    let mut cells: Vec<usize> = (0..side * side).collect();
    rng.shuffle(&mut cells);
    let glyphs: Vec<Glyph> = (0..n)
        .map(|k| {
            let offset = (rng.below(2), rng.below(2));
            Glyph {
                shape: shapes[k],
                color: colors[k],
                cell: cells[k],
                offset,
            }
        })
        .collect();

    let size = spec.image_size;
    let mut pixels: Vec<f32> = (0..size * size * 3).map(|_| spec.noise * rng.unit()).collect();
    for g in &glyphs {
        let (cy, cx) = (g.cell / side * CELL, g.cell % side * CELL);
        for (m, &on) in SHAPE_MASKS[g.shape].iter().enumerate() {
            if on == 0 {
                continue;
            }
            let y = cy + g.offset.0 + m / 3;
            let x = cx + g.offset.1 + m % 3;
            for c in 0..3 {
                pixels[(y * size + x) * 3 + c] += GLYPH_INTENSITY * COLOR_RGB[g.color][c];
            }
        }
    }

    let (question_id, question_tokens) = match family {
        Family::ColorOfShape => (
            glyphs[0].shape as u32,
            vec![TOK_WHAT, TOK_COLOR, TOK_FIRST_SHAPE + glyphs[0].shape as u32, TOK_QMARK],
        ),
        Family::ShapeOfColor => (
            (SHAPES.len() + glyphs[0].color) as u32,
            vec![TOK_WHAT, TOK_SHAPE, TOK_FIRST_COLOR + glyphs[0].color as u32, TOK_QMARK],
        ),
        Family::Count => (
            (SHAPES.len() + COLORS.len()) as u32,
            vec![TOK_HOW_MANY, TOK_GLYPHS, TOK_IS, TOK_QMARK],
        ),
    };

    Sample {
        image: Tensor::new(vec![size, size, 3], pixels).expect("image shape"),
        question_id,
        question_tokens,
        answer_id: answer as u32,
        family,
        seed,
        glyphs,
    }
}

/// Sample `index` of the dataset seeded by `dataset_seed`.
pub fn dataset_sample(dataset_seed: u64, index: u64, spec: &TaskSpec) -> Sample {
    generate_sample(stream_seed(dataset_seed, index), spec)
}

/// Frozen embedding tables with unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyLanguageSpace {
    pub question_table: Tensor<f32>,
    pub answer_table: Tensor<f32>,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnswerEmbedding {
    /// Mean of the answer-token rows, length D_llm.
    pub a: Tensor<f32>,
    pub source_token_count: usize,
}

impl ProxyLanguageSpace {
    pub fn new(rng_seed: u64, d_llm: usize) -> Self {
        let mut rng = SplitMix64::new(rng_seed);
        let mut table = |rows: usize| {
            let mut data = Vec::with_capacity(rows * d_llm);
            for _ in 0..rows {
                let row: Vec<f64> = (0..d_llm).map(|_| f64::from(rng.unit()) * 2.0 - 1.0).collect();
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                data.extend(row.iter().map(|x| (x / norm) as f32));
            }
            Tensor::new(vec![rows, d_llm], data).expect("table shape")
        };
        let question_table = table(QUESTION_VOCAB);
        let answer_table = table(ANSWER_VOCAB);
        Self {
            question_table,
            answer_table,
            rng_seed,
        }
    }

    fn lookup(table: &Tensor<f32>, name: &'static str, ids: &[u32]) -> Result<Tensor<f32>, SynthError> {
        if ids.is_empty() {
            return Err(SynthError::Empty);
        }
        let mut data = Vec::with_capacity(ids.len() * table.cols());
        for &id in ids {
            if id as usize >= table.rows() {
                return Err(SynthError::TokenOutOfRange {
                    table: name,
                    id,
                    len: table.rows(),
                });
            }
            data.extend_from_slice(table.row(id as usize));
        }
        Ok(Tensor::new(vec![ids.len(), table.cols()], data).expect("lookup shape"))
    }

    /// Question hidden states t_q, `T_q × D_llm`.
    pub fn embed_question(&self, tokens: &[u32]) -> Result<Tensor<f32>, SynthError> {
        Self::lookup(&self.question_table, "question", tokens)
    }

    /// Mean of the answer-token embedding rows.
    pub fn embed_answer_tokens(&self, tokens: &[u32]) -> Result<AnswerEmbedding, SynthError> {
        let rows = Self::lookup(&self.answer_table, "answer", tokens)?;
        let d = rows.cols();
        let mut a = vec![0.0f32; d];
        for r in 0..rows.rows() {
            for (x, &v) in a.iter_mut().zip(rows.row(r)) {
                *x += v;
            }
        }
        let inv = 1.0 / tokens.len() as f32;
        a.iter_mut().for_each(|x| *x *= inv);
        Ok(AnswerEmbedding {
            a: Tensor::vector(a),
            source_token_count: tokens.len(),
        })
    }

    /// Answer embedding with a single answer token (T_a = 1).
    pub fn embed_answer(&self, answer_id: u32) -> Result<AnswerEmbedding, SynthError> {
        self.embed_answer_tokens(&[answer_id])
    }
}

fn encode_sample(s: &Sample) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&s.seed.to_le_bytes());
    out.push(s.family.code());
    out.extend_from_slice(&s.question_id.to_le_bytes());
    out.extend_from_slice(&s.answer_id.to_le_bytes());
    out.extend_from_slice(&(s.question_tokens.len() as u32).to_le_bytes());
    for t in &s.question_tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for &d in s.image.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in s.image.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Writes samples as little-endian records, each prefixed by its `u32`
/// byte length. A record is: `seed u64`, `family u8`, `question_id u32`,
/// `answer_id u32`, `T_q u32`, `T_q × token u32`, `H u32`, `W u32`, `C u32`,
/// then `H·W·C × f32` pixels.
pub fn write_dataset<W: Write>(mut w: W, samples: &[Sample]) -> Result<(), SynthError> {
    for s in samples {
        let rec = encode_sample(s);
        w.write_all(&(rec.len() as u32).to_le_bytes())?;
        w.write_all(&rec)?;
    }
    Ok(())
}

/// Dataset record as read back from disk. Glyph metadata is not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub seed: u64,
    pub family: Family,
    pub question_id: u32,
    pub answer_id: u32,
    pub question_tokens: Vec<u32>,
    pub image: Tensor<f32>,
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<DatasetRecord>, SynthError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut out = Vec::new();
    let malformed = |m: &str| SynthError::Malformed(m.to_string());
    let take = |pos: &mut usize, n: usize, buf: &[u8]| -> Result<std::ops::Range<usize>, SynthError> {
        if *pos + n > buf.len() {
            return Err(malformed("truncated"));
        }
        let r = *pos..*pos + n;
        *pos += n;
        Ok(r)
    };
    while pos < bytes.len() {
        let len = u32::from_le_bytes(bytes[take(&mut pos, 4, &bytes)?].try_into().unwrap()) as usize;
        let rec = &bytes[take(&mut pos, len, &bytes)?];
        let mut p = 0;
        let u32_at = |p: &mut usize| -> Result<u32, SynthError> {
            let s = rec.get(*p..*p + 4).ok_or_else(|| malformed("truncated record"))?;
            *p += 4;
            Ok(u32::from_le_bytes(s.try_into().unwrap()))
        };
        let seed = u64::from_le_bytes(
            rec.get(0..8)
                .ok_or_else(|| malformed("truncated record"))?
                .try_into()
                .unwrap(),
        );
        p += 8;
        let family = Family::from_code(*rec.get(p).ok_or_else(|| malformed("truncated record"))?)
            .ok_or_else(|| malformed("unknown family"))?;
        p += 1;
        let question_id = u32_at(&mut p)?;
        let answer_id = u32_at(&mut p)?;
        let t_q = u32_at(&mut p)? as usize;
        let question_tokens = (0..t_q).map(|_| u32_at(&mut p)).collect::<Result<Vec<_>, _>>()?;
        let shape = (0..3)
            .map(|_| u32_at(&mut p).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let pix = rec.get(p..p + numel * 4).ok_or_else(|| malformed("truncated pixels"))?;
        if p + numel * 4 != rec.len() {
            return Err(malformed("trailing bytes in record"));
        }
        let data = pix
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let image = Tensor::new(shape, data).map_err(|e| SynthError::Malformed(e.to_string()))?;
        out.push(DatasetRecord {
            seed,
            family,
            question_id,
            answer_id,
            question_tokens,
            image,
        });
    }
    Ok(out)
}
