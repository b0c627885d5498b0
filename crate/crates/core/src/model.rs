//! Domain types shared by every stage: images, field sets and datasets.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// An 8-bit grayscale or RGB raster, row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct DocumentImage {
    pub id: String,
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image must be at least 1x1, got {width}x{height}")]
    Empty { width: usize, height: usize },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("pixel buffer has {got} bytes, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("failed to decode {path}: {source}")]
    Decode { path: PathBuf, source: image::ImageError },
    #[error("failed to encode image: {0}")]
    Encode(#[from] image::ImageError),
}

impl DocumentImage {
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<u8>,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty { width, height });
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        let expected = width * height * channels;
        if pixels.len() != expected {
            return Err(ImageError::BufferSize {
                got: pixels.len(),
                expected,
            });
        }
        Ok(Self {
            id: id.into(),
            width,
            height,
            channels,
            pixels,
        })
    }

    /// A constant-valued image.
    pub fn filled(
        id: impl Into<String>,
        width: usize,
        height: usize,
        channels: usize,
        value: u8,
    ) -> Result<Self, ImageError> {
        Self::new(id, width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// Decodes a PNG or JPEG file. Images with alpha or more than one
    /// colour channel become RGB; everything else becomes grayscale.
    pub fn load(id: impl Into<String>, path: &Path) -> Result<Self, ImageError> {
        let dynimg = image::open(path).map_err(|source| ImageError::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        let id = id.into();
        if dynimg.color().has_color() {
            let rgb = dynimg.to_rgb8();
            let (w, h) = rgb.dimensions();
            Self::new(id, w as usize, h as usize, 3, rgb.into_raw())
        } else {
            let luma = dynimg.to_luma8();
            let (w, h) = luma.dimensions();
            Self::new(id, w as usize, h as usize, 1, luma.into_raw())
        }
    }

    /// Encodes the raster as PNG bytes.
    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(encoder, &self.pixels, self.width as u32, self.height as u32, color)?;
        Ok(out)
    }
}

impl fmt::Debug for DocumentImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DocumentImage")
            .field("id", &self.id)
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

/// The six name fields extracted from every record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FieldName {
    SelfGivenName,
    SelfSurname,
    MotherGivenName,
    MotherSurname,
    FatherGivenName,
    FatherSurname,
}

impl FieldName {
    pub const ALL: [FieldName; 6] = [
        FieldName::SelfGivenName,
        FieldName::SelfSurname,
        FieldName::MotherGivenName,
        FieldName::MotherSurname,
        FieldName::FatherGivenName,
        FieldName::FatherSurname,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FieldName::SelfGivenName => "SelfGivenName",
            FieldName::SelfSurname => "SelfSurname",
            FieldName::MotherGivenName => "MotherGivenName",
            FieldName::MotherSurname => "MotherSurname",
            FieldName::FatherGivenName => "FatherGivenName",
            FieldName::FatherSurname => "FatherSurname",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.as_str() == s)
    }
}

impl fmt::Display for FieldName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One optional string per field. `None` (absent) is distinct from `""`.
///
/// Serializes as a JSON object keyed by field name; absent fields are
/// written as `null` and both `null` and a missing key read back as absent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct FieldSet {
    values: [Option<String>; 6],
}

impl FieldSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, field: FieldName) -> Option<&str> {
        self.values[field.index()].as_deref()
    }

    pub fn set(&mut self, field: FieldName, value: Option<String>) {
        self.values[field.index()] = value;
    }

    pub fn with(mut self, field: FieldName, value: impl Into<String>) -> Self {
        self.set(field, Some(value.into()));
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (FieldName, Option<&str>)> + '_ {
        FieldName::ALL.into_iter().map(move |f| (f, self.get(f)))
    }

    pub fn present_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

impl Serialize for FieldSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, Option<&str>> = self.iter().map(|(f, v)| (f.as_str(), v)).collect();
        map.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FieldSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<String, Option<String>>::deserialize(deserializer)?;
        let mut out = FieldSet::new();
        for (key, value) in map {
            match FieldName::parse(&key) {
                Some(field) => out.set(field, value),
                None => return Err(serde::de::Error::custom(format!("unknown field name {key:?}"))),
            }
        }
        Ok(out)
    }
}

/// One dataset entry: an image file and its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    /// Image path relative to the manifest directory.
    pub image: PathBuf,
    /// Ground truth; absent fields are blank and excluded from scoring.
    pub truth: FieldSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Directory image paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<Record>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    records: Vec<Record>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read manifest {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed manifest {path}: {source}")]
    Malformed { path: PathBuf, source: serde_json::Error },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("record {id:?} references missing image {path}")]
    DanglingImage { id: String, path: PathBuf },
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, record: &Record) -> PathBuf {
        self.root.join(&record.image)
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    /// Fold labels, if every record carries one.
    pub fn fold_labels(&self) -> Option<Vec<usize>> {
        self.records.iter().map(|r| r.fold).collect()
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        for rec in &self.records {
            if !seen.insert(rec.id.as_str()) {
                return Err(DatasetError::DuplicateId(rec.id.clone()));
            }
            let path = self.image_path(rec);
            if !path.is_file() {
                return Err(DatasetError::DanglingImage {
                    id: rec.id.clone(),
                    path,
                });
            }
        }
        Ok(())
    }

    /// Writes the manifest JSON. Image files are not touched.
    pub fn save(&self, manifest_path: &Path) -> Result<(), DatasetError> {
        let manifest = Manifest {
            records: self.records.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|source| DatasetError::Malformed {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        std::fs::write(manifest_path, json + "\n").map_err(|source| DatasetError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })
    }
}

/// Reads a dataset manifest, keeping manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DatasetError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|source| DatasetError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| DatasetError::Malformed {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let dataset = Dataset {
        root,
        records: manifest.records,
    };
    dataset.validate()?;
    Ok(dataset)
}
