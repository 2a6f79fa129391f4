//! Grayscale image records, JSONL manifests and binary PGM files.
//!
//! A manifest is one JSON object per line:
//!
//! ```text
//! {"id":"val-00000","path":"val/00000.pgm","label":0,"group":"dark"}
//! ```
//!
//! `path` is relative to the manifest's directory. Pixels are stored on disk as
//! 8-bit P5 PGM and scaled to `[0, 1]` by division by 255 on load.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary eye-state label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    /// Eyes open.
    Awake = 0,
    /// Eyes closed.
    Drowsy = 1,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    /// Label from a thresholded sigmoid score.
    pub fn from_score(score: f64) -> Self {
        if score >= 0.5 {
            Label::Drowsy
        } else {
            Label::Awake
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Awake),
            1 => Ok(Label::Drowsy),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

/// One grayscale image. `pixels` is row-major with values in `[0, 1]`.
///
/// `group` is an evaluation-only tag; no selection or training code reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Vec<f64>,
    pub label: Label,
    pub group: Option<String>,
}

/// An ordered collection of same-sized image records with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    height: usize,
    width: usize,
    records: Vec<ImageRecord>,
}

impl Dataset {
    /// Validates sizes, pixel ranges and id uniqueness.
    pub fn new(height: usize, width: usize, records: Vec<ImageRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            check_record(height, width, r)?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Dataset {
            height,
            width,
            records,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Pixels per image.
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ImageRecord> {
        self.records.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    /// Appends records, keeping the dataset invariants.
    pub fn extend(&mut self, extra: impl IntoIterator<Item = ImageRecord>) -> Result<()> {
        let mut seen: HashSet<String> = self.records.iter().map(|r| r.id.clone()).collect();
        let extra: Vec<ImageRecord> = extra.into_iter().collect();
        for r in &extra {
            check_record(self.height, self.width, r)?;
            if !seen.insert(r.id.clone()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        self.records.extend(extra);
        Ok(())
    }

    /// Subset by record index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let records = indices
            .iter()
            .map(|&i| self.records[i].clone())
            .collect::<Vec<_>>();
        Dataset::new(self.height, self.width, records)
    }

    /// Copy of the dataset with every group tag replaced by `tag`.
    pub fn with_groups_replaced(&self, tag: Option<&str>) -> Dataset {
        let mut out = self.clone();
        for r in &mut out.records {
            r.group = tag.map(str::to_owned);
        }
        out
    }

    /// True when both labels occur.
    pub fn has_both_labels(&self) -> bool {
        let mut seen = [false; 2];
        for r in &self.records {
            seen[r.label as usize] = true;
        }
        seen[0] && seen[1]
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a ImageRecord;
    type IntoIter = std::slice::Iter<'a, ImageRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

fn check_record(height: usize, width: usize, r: &ImageRecord) -> Result<()> {
    if r.pixels.len() != height * width {
        return Err(Error::DimensionMismatch {
            expected: height * width,
            got: r.pixels.len(),
        });
    }
    if let Some(&bad) = r
        .pixels
        .iter()
        .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(Error::InvalidPixel {
            id: r.id.clone(),
            value: bad,
        });
    }
    Ok(())
}

/// A decoded grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

/// Quantizes an intensity in `[0, 1]` to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a binary P5 PGM with maxval 255.
pub fn encode_pgm(img: &GrayImage) -> Result<Vec<u8>> {
    if img.pixels.len() != img.height * img.width {
        return Err(Error::DimensionMismatch {
            expected: img.height * img.width,
            got: img.pixels.len(),
        });
    }
    if let Some(&bad) = img
        .pixels
        .iter()
        .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(Error::Pgm(format!("pixel value {bad} outside [0, 1]")));
    }
    let header = format!("P5\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.pixels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend(img.pixels.iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Decodes a binary P5 PGM. Only maxval 255 is accepted.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let magic = cur.token()?;
    if magic != b"P5" {
        return Err(Error::Pgm(format!(
            "bad magic number `{}`",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = cur.number()?;
    let height = cur.number()?;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(Error::Pgm(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::Pgm("truncated header".into()));
    }
    let start = cur.pos + 1;
    let n = width * height;
    let data = bytes
        .get(start..start + n)
        .ok_or_else(|| Error::Pgm(format!("truncated payload: expected {n} bytes")))?;
    Ok(GrayImage {
        height,
        width,
        pixels: data.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Pgm("truncated header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::Pgm(format!(
                    "bad header field `{}`",
                    String::from_utf8_lossy(tok)
                ))
            })
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    path: String,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<String>,
}

/// Loads a JSONL manifest and the PGM images it references, in line order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut dims: Option<(usize, usize)> = None;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(raw).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::DuplicateId(entry.id));
        }
        let img = read_pgm(base.join(&entry.path))?;
        match dims {
            None => dims = Some((img.height, img.width)),
            Some((h, w)) if (h, w) != (img.height, img.width) => {
                return Err(Error::ImageSize {
                    id: entry.id,
                    want_h: h,
                    want_w: w,
                    got_h: img.height,
                    got_w: img.width,
                });
            }
            Some(_) => {}
        }
        records.push(ImageRecord {
            id: entry.id,
            pixels: img.pixels,
            label: entry.label,
            group: entry.group,
        });
    }
    let (h, w) = dims.ok_or(Error::Empty("manifest has no records"))?;
    Dataset::new(h, w, records)
}

/// Writes `<dir>/<name>.jsonl` plus one PGM per record under `<dir>/<name>/`.
///
/// Returns the manifest path. Pixels are quantized to 8 bits.
pub fn save_manifest(dataset: &Dataset, dir: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let img_dir = dir.join(name);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut manifest = Vec::new();
    for (i, r) in dataset.iter().enumerate() {
        let rel = format!("{name}/{i:05}.pgm");
        write_pgm(
            dir.join(&rel),
            &GrayImage {
                height: dataset.height(),
                width: dataset.width(),
                pixels: r.pixels.clone(),
            },
        )?;
        let line = ManifestLine {
            id: r.id.clone(),
            path: rel,
            label: r.label,
            group: r.group.clone(),
        };
        serde_json::to_writer(&mut manifest, &line)?;
        manifest.push(b'\n');
    }
    let manifest_path = dir.join(format!("{name}.jsonl"));
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(&manifest)
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
