//! Synthetic key-value forms with controllable domain shift.
//!
//! A form has header lines, a block of populated fields (key phrase followed
//! by its value, either on the same row or on the next line) and filler
//! lines. Shift between two domains comes only from the spec fields: word
//! family, spacing, jitter, how many fields are populated, where values sit,
//! and rendering noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::LabelScheme;
use super::lexicon::{Lexicon, ValueKind, LEXICONS};
use super::types::{Document, InkImage, LayoutBox, QaPair, Word, GRID};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    /// Header lines at the top of the page, 0–4.
    pub header_lines: usize,
    /// Filler (`O`-labelled) lines, 0–12.
    pub filler_lines: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    /// Word family, `0..NUM_LEXICONS`.
    pub lexicon: usize,
    /// 1 = tight two-column layout, towards 0 = wide margins and spacing.
    pub layout_density: f64,
    /// Maximum per-word displacement in grid units, 0–100.
    pub box_jitter: f64,
    /// Probability that a field appears on the form, 0–1.
    pub fill_rate: f64,
    /// Fields offered per form, 1–16.
    pub num_keys: usize,
    /// Probability that a value is written below its key, 0–1.
    pub value_below_rate: f64,
    /// Pixel flip probability of the ink raster, 0–0.5.
    pub ink_noise: f64,
    /// Side of the square ink raster in pixels, 8–256.
    pub ink_resolution: usize,
    pub class_balance: ClassBalance,
}

pub const NUM_LEXICONS: usize = LEXICONS.len();

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        Self {
            lexicon: 0,
            layout_density: 0.9,
            box_jitter: 3.0,
            fill_rate: 0.7,
            num_keys: 12,
            value_below_rate: 0.0,
            ink_noise: 0.0,
            ink_resolution: 64,
            class_balance: ClassBalance {
                header_lines: 1,
                filler_lines: 3,
            },
        }
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.lexicon >= NUM_LEXICONS {
            return fail(format!("lexicon {} (have {NUM_LEXICONS})", self.lexicon));
        }
        if !(self.layout_density > 0.0 && self.layout_density <= 1.0) {
            return fail(format!("layout_density {} not in (0, 1]", self.layout_density));
        }
        if !(0.0..=100.0).contains(&self.box_jitter) {
            return fail(format!("box_jitter {} not in [0, 100]", self.box_jitter));
        }
        if !(0.0..=1.0).contains(&self.fill_rate) {
            return fail(format!("fill_rate {} not in [0, 1]", self.fill_rate));
        }
        if !(1..=16).contains(&self.num_keys) {
            return fail(format!("num_keys {} not in [1, 16]", self.num_keys));
        }
        if !(0.0..=1.0).contains(&self.value_below_rate) {
            return fail(format!("value_below_rate {} not in [0, 1]", self.value_below_rate));
        }
        if !(0.0..=0.5).contains(&self.ink_noise) {
            return fail(format!("ink_noise {} not in [0, 0.5]", self.ink_noise));
        }
        if !(8..=256).contains(&self.ink_resolution) {
            return fail(format!("ink_resolution {} not in [8, 256]", self.ink_resolution));
        }
        if self.class_balance.header_lines > 4 || self.class_balance.filler_lines > 12 {
            return fail(format!("class_balance {:?} out of range", self.class_balance));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Header,
    Key,
    Value,
    Filler,
}

struct Placed {
    text: String,
    role: Role,
    /// Position within its phrase, 0 for the first word.
    offset: usize,
    /// Field index for keys and values.
    field: Option<usize>,
    x0: f64,
    x1: f64,
}

struct Line {
    y: f64,
    words: Vec<Placed>,
}

/// Generates `count` forms. Identical `(spec, count, seed)` give identical output.
pub fn generate_synthetic(spec: &SyntheticDomainSpec, count: usize, seed: u64) -> Result<Vec<Document>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scheme = LabelScheme::funsd();
    (0..count)
        .map(|i| generate_one(spec, &scheme, &mut rng, format!("syn{seed}-{i:05}")))
        .collect()
}

fn value_words(lex: &Lexicon, kind: ValueKind, rng: &mut ChaCha8Rng) -> Vec<String> {
    let pick = |xs: &[&str], rng: &mut ChaCha8Rng| xs.choose(rng).copied().unwrap_or("x").to_string();
    match kind {
        ValueKind::Person => vec![pick(lex.first_names, rng), pick(lex.last_names, rng)],
        ValueKind::Date => vec![
            rng.gen_range(1..=28).to_string(),
            pick(lex.months, rng),
            rng.gen_range(1960..=2022).to_string(),
        ],
        ValueKind::Phone => vec![
            format!("{}", rng.gen_range(200..=999)),
            format!("{:04}", rng.gen_range(0..10000)),
        ],
        ValueKind::City => vec![pick(lex.cities, rng)],
        ValueKind::Company => vec![pick(lex.companies, rng), pick(lex.company_suffixes, rng)],
        ValueKind::Amount => {
            let amount = format!("{}", rng.gen_range(10..5000));
            match lex.currency {
                Some(c) => vec![c.to_string(), amount],
                None => vec![amount],
            }
        }
        ValueKind::Code => vec![format!("{}{}", pick(lex.code_letters, rng), rng.gen_range(100..1000))],
        ValueKind::Street => vec![
            rng.gen_range(1..200).to_string(),
            pick(lex.streets, rng),
            pick(lex.street_suffixes, rng),
        ],
    }
}

fn generate_one(
    spec: &SyntheticDomainSpec,
    scheme: &LabelScheme,
    rng: &mut ChaCha8Rng,
    id: String,
) -> Result<Document> {
    let lex = &LEXICONS[spec.lexicon];
    let sparse = 1.0 - spec.layout_density;
    let font_h: f64 = rng.gen_range(16.0..22.0);
    let char_w = font_h * 0.55;
    let gap = char_w * 1.2;
    let margin_x = 40.0 + 160.0 * sparse;
    let margin_top = 40.0 + 120.0 * sparse;
    let right_edge = f64::from(GRID) - margin_x;
    let two_columns = spec.layout_density >= 0.6;
    let col_width = if two_columns {
        (right_edge - margin_x) / 2.0
    } else {
        right_edge - margin_x
    };

    let phrase = |text: &str, role: Role, field: Option<usize>, x: f64| -> (Vec<Placed>, f64) {
        let mut x = x;
        let mut out = Vec::new();
        for (offset, w) in text.split_whitespace().enumerate() {
            let x1 = (x + w.chars().count() as f64 * char_w).min(f64::from(GRID));
            out.push(Placed {
                text: w.to_string(),
                role,
                offset,
                field,
                x0: x.min(x1),
                x1,
            });
            x = x1 + gap;
        }
        (out, x)
    };

    // header and field choice
    let mut lines: Vec<Vec<Placed>> = Vec::new();
    for _ in 0..spec.class_balance.header_lines {
        let h = lex.headers.choose(rng).copied().unwrap_or("form");
        let width = h.chars().count() as f64 * char_w;
        let x = (f64::from(GRID) - width) / 2.0 + rng.gen_range(-40.0..40.0);
        lines.push(phrase(h, Role::Header, None, x.max(margin_x)).0);
    }

    let mut order: Vec<usize> = (0..lex.fields.len()).collect();
    order.shuffle(rng);
    let offered = &order[..spec.num_keys.min(order.len())];
    let mut fields = Vec::new();
    for &f in offered {
        if rng.gen_bool(spec.fill_rate) {
            let below = rng.gen_bool(spec.value_below_rate);
            let value = value_words(lex, lex.fields[f].1, rng).join(" ");
            fields.push((f, below, value));
        }
    }

    let per_row = if two_columns { 2 } else { 1 };
    for (row_idx, row) in fields.chunks(per_row).enumerate() {
        let mut line_a = Vec::new();
        let mut line_b = Vec::new();
        for (col, (f, below, value)) in row.iter().enumerate() {
            let field_id = row_idx * per_row + col;
            let x = margin_x + col as f64 * col_width;
            let (key_words, key_end) = phrase(lex.fields[*f].0, Role::Key, Some(field_id), x);
            line_a.extend(key_words);
            if *below {
                let (v, _) = phrase(value, Role::Value, Some(field_id), x + 2.0 * char_w);
                line_b.extend(v);
            } else {
                let vx = key_end + gap * rng.gen_range(0.5..3.0);
                let (v, _) = phrase(value, Role::Value, Some(field_id), vx);
                line_a.extend(v);
            }
        }
        lines.push(line_a);
        if !line_b.is_empty() {
            lines.push(line_b);
        }
    }

    for _ in 0..spec.class_balance.filler_lines {
        let text = lex.fillers.choose(rng).copied().unwrap_or("note");
        let x = margin_x + rng.gen_range(0.0..60.0);
        let line = phrase(text, Role::Filler, None, x).0;
        // fillers go either between blocks or at the bottom
        let at = if lines.is_empty() || rng.gen_bool(0.5) {
            lines.len()
        } else {
            rng.gen_range(spec.class_balance.header_lines.min(lines.len())..=lines.len())
        };
        lines.insert(at, line);
    }

    // vertical placement, compressed to fit the page
    let desired = font_h * (1.6 + 2.4 * sparse);
    let available = f64::from(GRID) - margin_top - 40.0;
    let step = desired.min(available / lines.len().max(1) as f64);
    let lines: Vec<Line> = lines
        .into_iter()
        .enumerate()
        .map(|(i, words)| Line {
            y: margin_top + i as f64 * step,
            words,
        })
        .collect();
    let h = font_h.min(step * 0.9);

    let mut words = Vec::new();
    let mut labels = Vec::new();
    let mut value_spans: Vec<(usize, usize, usize)> = Vec::new(); // (field, start, end)
    let mut key_text: Vec<(usize, String)> = Vec::new();
    let header = scheme.type_index("HEADER").expect("funsd scheme");
    let question = scheme.type_index("QUESTION").expect("funsd scheme");
    let answer = scheme.type_index("ANSWER").expect("funsd scheme");
    let grid = f64::from(GRID);
    for line in &lines {
        for p in &line.words {
            let j = spec.box_jitter;
            let (dx, dy) = if j > 0.0 {
                (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
            } else {
                (0.0, 0.0)
            };
            let clamp = |v: f64| v.clamp(0.0, grid).round() as i32;
            let w = p.x1 - p.x0;
            let x0 = (p.x0 + dx).clamp(0.0, grid - w);
            let y0 = (line.y + dy).clamp(0.0, grid - h);
            let bbox = LayoutBox::new(clamp(x0), clamp(x0 + w), clamp(y0), clamp(y0 + h))?;
            let idx = words.len();
            words.push(Word {
                text: p.text.clone(),
                bbox,
            });
            let t = match p.role {
                Role::Header => Some(header),
                Role::Key => Some(question),
                Role::Value => Some(answer),
                Role::Filler => None,
            };
            labels.push(match t {
                Some(t) if p.offset == 0 => scheme.begin(t),
                Some(t) => scheme.inside(t),
                None => 0,
            });
            if let Some(f) = p.field {
                match p.role {
                    Role::Value => match value_spans.iter_mut().find(|s| s.0 == f) {
                        Some(span) => span.2 = idx + 1,
                        None => value_spans.push((f, idx, idx + 1)),
                    },
                    Role::Key => match key_text.iter_mut().find(|k| k.0 == f) {
                        Some(k) => {
                            k.1.push(' ');
                            k.1.push_str(&p.text);
                        }
                        None => key_text.push((f, p.text.clone())),
                    },
                    _ => {}
                }
            }
        }
    }

    let mut qa_pairs = Vec::new();
    for (f, start, end) in &value_spans {
        let key = key_text
            .iter()
            .find(|k| k.0 == *f)
            .map(|k| k.1.clone())
            .unwrap_or_default();
        let answer_text = words[*start..*end]
            .iter()
            .map(|w| w.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        qa_pairs.push(QaPair {
            question: format!("what is {key}?"),
            answer_text,
            answer_span: (*start, *end),
        });
    }

    let ink = render_ink(&words, spec, rng);
    let doc = Document {
        id,
        words,
        page_w: 850,
        page_h: 1100,
        token_labels: Some(labels),
        qa_pairs: Some(qa_pairs),
        ink_image: Some(ink),
    };
    debug_assert!(doc.validate(scheme.num_classes()).is_ok());
    Ok(doc)
}

fn render_ink(words: &[Word], spec: &SyntheticDomainSpec, rng: &mut ChaCha8Rng) -> InkImage {
    let res = spec.ink_resolution;
    let mut img = InkImage::blank(res, res);
    let to_px = |v: i32| ((v as usize) * res / (GRID as usize)).min(res - 1);
    for w in words {
        let b = w.bbox;
        for y in to_px(b.y_min)..=to_px(b.y_max) {
            for x in to_px(b.x_min)..=to_px(b.x_max) {
                img.pixels[y * res + x] = 1;
            }
        }
    }
    if spec.ink_noise > 0.0 {
        for p in img.pixels.iter_mut() {
            if rng.gen_bool(spec.ink_noise) {
                *p ^= 1;
            }
        }
    }
    img
}

/// Mean word count per document.
pub fn mean_words(docs: &[Document]) -> f64 {
    if docs.is_empty() {
        return 0.0;
    }
    docs.iter().map(|d| d.words.len()).sum::<usize>() as f64 / docs.len() as f64
}
