//! Synthetic datasets: names from a lexicon, typeset with a 5x7 bitmap font
//! on a noisy paper-coloured background.

use std::path::Path;

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::model::{Dataset, DatasetError, DocumentImage, FieldName, FieldSet, ImageError, Record};
use crate::rng;

/// A few hundred common given names and surnames, used when no lexicon is
/// supplied.
pub const DEFAULT_LEXICON: &[&str] = &[
    "Ada",
    "Agnes",
    "Albert",
    "Alice",
    "Anna",
    "Arthur",
    "Bertha",
    "Carl",
    "Clara",
    "Daisy",
    "Edith",
    "Edna",
    "Elmer",
    "Emma",
    "Ethel",
    "Frank",
    "Fred",
    "George",
    "Grace",
    "Harry",
    "Hazel",
    "Helen",
    "Henry",
    "Ida",
    "Irene",
    "James",
    "John",
    "Joseph",
    "Laura",
    "Lydia",
    "Mabel",
    "Margaret",
    "Martha",
    "Mary",
    "Minnie",
    "Myrtle",
    "Nellie",
    "Nydia",
    "Oscar",
    "Pearl",
    "Ralph",
    "Rose",
    "Ruth",
    "Samuel",
    "Sarah",
    "Stella",
    "Thomas",
    "Walter",
    "Willard",
    "Zelda",
    "Adams",
    "Baker",
    "Brown",
    "Campbell",
    "Clark",
    "Davis",
    "Evans",
    "Fisher",
    "Gibson",
    "Hall",
    "Harris",
    "Hoffman",
    "Jones",
    "Keller",
    "Kline",
    "Lewis",
    "Martin",
    "Miller",
    "Moore",
    "Murphy",
    "Nelson",
    "OBrien",
    "Parker",
    "Reed",
    "Schmidt",
    "Shaffer",
    "Smith",
    "Snyder",
    "Stewart",
    "Taylor",
    "Thompson",
    "Walker",
    "Weaver",
    "White",
    "Wilson",
    "Yoder",
    "Young",
    "Zimmerman",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("n_records must be at least 1")]
    NoRecords,
    #[error("lexicon must not be empty")]
    EmptyLexicon,
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
const SCALE: usize = 3;
const MARGIN: usize = 12;
const LINE_GAP: usize = 10;

/// 5x7 glyph rows, most significant of the low five bits is the left column.
fn glyph(c: char) -> [u8; GLYPH_H] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '\'' => [0x04, 0x04, 0x08, 0x00, 0x00, 0x00, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        ' ' => [0; GLYPH_H],
        // Unknown characters render as a hollow box.
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

fn label(field: FieldName) -> &'static str {
    match field {
        FieldName::SelfGivenName => "NAME",
        FieldName::SelfSurname => "SURNAME",
        FieldName::MotherGivenName => "MOTHER",
        FieldName::MotherSurname => "MOTHER SURNAME",
        FieldName::FatherGivenName => "FATHER",
        FieldName::FatherSurname => "FATHER SURNAME",
    }
}

/// Typesets one line per field onto a grayscale page.
pub fn render_fields(id: &str, fields: &FieldSet, seed: u64) -> Result<DocumentImage, ImageError> {
    let lines: Vec<String> = fields
        .iter()
        .map(|(f, v)| format!("{}: {}", label(f), v.unwrap_or("")))
        .collect();
    let cols = lines.iter().map(|l| l.chars().count()).max().unwrap_or(1).max(1);
    let cell_w = (GLYPH_W + 1) * SCALE;
    let line_h = GLYPH_H * SCALE + LINE_GAP;
    let width = 2 * MARGIN + cols * cell_w;
    let height = 2 * MARGIN + lines.len() * line_h;

    let mut noise = rng::stream(&[seed, rng::str_key(id), 0x9A9E5]);
    let mut pixels: Vec<u8> = (0..width * height)
        .map(|_| 228u8.saturating_add((noise.next_u32() % 24) as u8))
        .collect();
    for (row, line) in lines.iter().enumerate() {
        let top = MARGIN + row * line_h;
        for (col, ch) in line.chars().enumerate() {
            let left = MARGIN + col * cell_w;
            for (gy, bits) in glyph(ch).iter().enumerate() {
                for gx in 0..GLYPH_W {
                    if bits & (0x10 >> gx) == 0 {
                        continue;
                    }
                    for dy in 0..SCALE {
                        for dx in 0..SCALE {
                            let y = top + gy * SCALE + dy;
                            let x = left + gx * SCALE + dx;
                            pixels[y * width + x] = 20 + (noise.next_u32() % 40) as u8;
                        }
                    }
                }
            }
        }
    }
    DocumentImage::new(id, width, height, 1, pixels)
}

/// Draws `n_records` field sets from the lexicon and writes `images/*.png`
/// plus `manifest.json` under `out_dir`. Deterministic in `seed`.
pub fn generate_synthetic_dataset(
    out_dir: &Path,
    n_records: usize,
    lexicon: &[String],
    seed: u64,
) -> Result<Dataset, SynthError> {
    if n_records == 0 {
        return Err(SynthError::NoRecords);
    }
    if lexicon.is_empty() {
        return Err(SynthError::EmptyLexicon);
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|source| SynthError::Io {
        path: images.clone(),
        source,
    })?;
    let mut records = Vec::with_capacity(n_records);
    for i in 0..n_records {
        let id = format!("rec{i:05}");
        let mut draw = rng::stream(&[seed, i as u64, 0x5E1EC7]);
        let mut truth = FieldSet::new();
        for field in FieldName::ALL {
            let name = &lexicon[draw.random_range(0..lexicon.len())];
            truth.set(field, Some(name.clone()));
        }
        let img = render_fields(&id, &truth, seed)?;
        let rel = Path::new("images").join(format!("{id}.png"));
        let path = out_dir.join(&rel);
        std::fs::write(&path, img.to_png()?).map_err(|source| SynthError::Io { path, source })?;
        records.push(Record {
            id,
            image: rel,
            truth,
            fold: None,
        });
    }
    let dataset = Dataset {
        root: out_dir.to_path_buf(),
        records,
    };
    dataset.save(&out_dir.join("manifest.json"))?;
    Ok(dataset)
}
