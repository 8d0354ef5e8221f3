use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side of the normalized layout grid.
pub const GRID: i32 = 1000;

/// Word bounding box on the 0–1000 grid, as
/// `(x_min, x_max, y_min, y_max, w, h)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayoutBox {
    pub x_min: i32,
    pub x_max: i32,
    pub y_min: i32,
    pub y_max: i32,
    pub w: i32,
    pub h: i32,
}

impl LayoutBox {
    pub fn new(x_min: i32, x_max: i32, y_min: i32, y_max: i32) -> Result<Self> {
        let b = Self {
            x_min,
            x_max,
            y_min,
            y_max,
            w: x_max - x_min,
            h: y_max - y_min,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let in_grid = |v: i32| (0..=GRID).contains(&v);
        let ok = self.x_min <= self.x_max
            && self.y_min <= self.y_max
            && self.w == self.x_max - self.x_min
            && self.h == self.y_max - self.y_min
            && [self.x_min, self.x_max, self.y_min, self.y_max]
                .into_iter()
                .all(in_grid);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid layout box {self:?}")))
        }
    }

    /// The six coordinates in embedding order.
    pub fn coords(&self) -> [i32; 6] {
        [self.x_min, self.x_max, self.y_min, self.y_max, self.w, self.h]
    }
}

/// Clamp counter for [`normalize_box`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NormalizeStats {
    pub clamped: usize,
}

/// Scales a pixel box `(x_min, x_max, y_min, y_max)` on a `page_w × page_h`
/// page onto the integer 0–1000 grid. Coordinates outside the page are
/// clamped and counted in `stats`.
pub fn normalize_box(raw: [f64; 4], page_w: f64, page_h: f64, stats: &mut NormalizeStats) -> Result<LayoutBox> {
    if !(page_w > 0.0 && page_h > 0.0) {
        return Err(Error::InvalidInput(format!(
            "page dimensions must be positive, got {page_w}x{page_h}"
        )));
    }
    let [x0, x1, y0, y1] = raw;
    if x1 < x0 || y1 < y0 || raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("malformed box {raw:?}")));
    }
    let mut clamped = false;
    let mut scale = |v: f64, extent: f64| {
        let c = v.clamp(0.0, extent);
        clamped |= c != v;
        (c / extent * f64::from(GRID)).round() as i32
    };
    let b = LayoutBox::new(
        scale(x0, page_w),
        scale(x1, page_w),
        scale(y0, page_h),
        scale(y1, page_h),
    )?;
    if clamped {
        stats.clamped += 1;
    }
    Ok(b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: LayoutBox,
}

/// Extractive question over a document. `answer_span` is the half-open word
/// index range `[start, end)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer_text: String,
    pub answer_span: (usize, usize),
}

/// Binary ink raster, row-major, one byte per pixel (0 or 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InkImage {
    pub width: usize,
    pub height: usize,
    #[serde(with = "bitstring")]
    pub pixels: Vec<u8>,
}

impl InkImage {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    /// Mean ink density over a `grid × grid` partition, row-major.
    pub fn patch_means(&self, grid: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(grid * grid);
        for py in 0..grid {
            for px in 0..grid {
                let (y0, y1) = (py * self.height / grid, (py + 1) * self.height / grid);
                let (x0, x1) = (px * self.width / grid, (px + 1) * self.width / grid);
                let mut total = 0usize;
                for y in y0..y1 {
                    total += self.pixels[y * self.width + x0..y * self.width + x1]
                        .iter()
                        .map(|&p| p as usize)
                        .sum::<usize>();
                }
                let area = ((y1 - y0) * (x1 - x0)).max(1);
                out.push(total as f32 / area as f32);
            }
        }
        out
    }
}

mod bitstring {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(pixels: &[u8], s: S) -> Result<S::Ok, S::Error> {
        let text: String = pixels.iter().map(|&p| if p > 0 { '1' } else { '0' }).collect();
        s.serialize_str(&text)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        text.chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(D::Error::custom(format!("bad pixel `{other}`"))),
            })
            .collect()
    }
}

/// One page after OCR: words with layout, optional rendering, optional
/// supervision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub words: Vec<Word>,
    pub page_w: u32,
    pub page_h: u32,
    pub token_labels: Option<Vec<usize>>,
    pub qa_pairs: Option<Vec<QaPair>>,
    pub ink_image: Option<InkImage>,
}

impl Document {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidInput(format!("document {}: {msg}", self.id)));
        for (i, w) in self.words.iter().enumerate() {
            if w.bbox.validate().is_err() {
                return fail(format!("word {i} box {:?} outside page", w.bbox));
            }
        }
        if let Some(labels) = &self.token_labels {
            if labels.len() != self.words.len() {
                return fail(format!("{} labels for {} words", labels.len(), self.words.len()));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
                return fail(format!("label {bad} out of range"));
            }
        }
        for qa in self.qa_pairs.iter().flatten() {
            let (s, e) = qa.answer_span;
            if s >= e || e > self.words.len() {
                return fail(format!("answer span {s}..{e} invalid"));
            }
            if self.span_text(s, e) != qa.answer_text {
                return fail(format!("answer text `{}` does not match span", qa.answer_text));
            }
        }
        if let Some(img) = &self.ink_image {
            if img.pixels.len() != img.width * img.height {
                return fail("ink image size mismatch".into());
            }
        }
        Ok(())
    }

    /// Words `[start, end)` joined by single spaces.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        self.words[start..end]
            .iter()
            .map(|w| w.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Copy with all supervision removed.
    pub fn unlabeled(&self) -> Self {
        Self {
            token_labels: None,
            qa_pairs: self.qa_pairs.as_ref().map(|qas| {
                qas.iter()
                    .map(|qa| QaPair {
                        question: qa.question.clone(),
                        answer_text: String::new(),
                        answer_span: (0, 0),
                    })
                    .collect()
            }),
            ..self.clone()
        }
    }
}
