//! On-disk formats: one directory per scan holding `slice_000.pgm ...`
//! (binary PGM, 8-bit, maxval 255) plus `meta.json`, and the dataset
//! manifest as JSON.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    normalize, DataError, DatasetManifest, IntImage, Label, SliceStack, Split,
};

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Sidecar metadata for a scan directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackMeta {
    pub id: String,
    pub spacing_mm: f32,
    pub plafond_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

/// A loaded stack with its manifest identity.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub stack: SliceStack,
}

pub fn write_pgm(path: &Path, image: &IntImage) -> Result<(), DataError> {
    let mut bytes = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    for &v in &image.data {
        if v > 255 {
            return Err(format_err(path, format!("pixel value {v} exceeds maxval 255")));
        }
        bytes.push(v as u8);
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&bytes).map_err(|e| io_err(path, e))
}

pub fn read_pgm(path: &Path) -> Result<IntImage, DataError> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut raw)
        .map_err(|e| io_err(path, e))?;

    // Header: "P5", width, height, maxval as whitespace-separated tokens,
    // with '#' comments allowed, followed by a single whitespace byte.
    let mut pos = 0;
    let mut token = |raw: &[u8]| -> Result<String, DataError> {
        while pos < raw.len() {
            match raw[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < raw.len() && raw[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };

    if token(&raw)? != "P5" {
        return Err(format_err(path, "not a binary PGM (missing P5 magic)"));
    }
    let width: usize = token(&raw)?
        .parse()
        .map_err(|_| format_err(path, "invalid width"))?;
    let height: usize = token(&raw)?
        .parse()
        .map_err(|_| format_err(path, "invalid height"))?;
    let maxval: usize = token(&raw)?
        .parse()
        .map_err(|_| format_err(path, "invalid maxval"))?;
    if maxval != 255 {
        return Err(format_err(path, format!("maxval must be 255, got {maxval}")));
    }
    pos += 1; // single whitespace between header and raster
    let expect = width * height;
    if raw.len() < pos + expect {
        return Err(format_err(
            path,
            format!("raster truncated: expected {expect} bytes, got {}", raw.len() - pos),
        ));
    }
    if raw.len() > pos + expect {
        return Err(format_err(path, "trailing bytes after raster"));
    }
    Ok(IntImage {
        height,
        width,
        data: raw[pos..].iter().map(|&b| b as u16).collect(),
    })
}

fn slice_filename(index: usize) -> String {
    format!("slice_{index:03}.pgm")
}

/// Write `meta.json` plus one PGM per slice (quantized to 8 bits).
pub fn save_stack(dir: &Path, meta: &StackMeta, stack: &SliceStack) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| format_err(&meta_path, e.to_string()))?;
    fs::write(&meta_path, json + "\n").map_err(|e| io_err(&meta_path, e))?;
    for (i, slice) in stack.slices.iter().enumerate() {
        write_pgm(&dir.join(slice_filename(i)), &super::denormalize(slice))?;
    }
    Ok(())
}

/// Read the raw integer slices and metadata of a scan directory. Slice
/// files must be contiguous from `slice_000.pgm`; a gap is reported with
/// the missing filename.
pub fn load_volume(dir: &Path) -> Result<(StackMeta, Vec<IntImage>), DataError> {
    let meta_path = dir.join("meta.json");
    let meta: StackMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?,
    )
    .map_err(|e| format_err(&meta_path, e.to_string()))?;

    let mut max_index = None;
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_prefix("slice_").and_then(|s| s.strip_suffix(".pgm")) {
            if let Ok(idx) = stem.parse::<usize>() {
                max_index = Some(max_index.map_or(idx, |m: usize| m.max(idx)));
            }
        }
    }
    let Some(max_index) = max_index else {
        return Err(format_err(dir, "no slice_*.pgm files found"));
    };

    let mut slices = Vec::with_capacity(max_index + 1);
    for i in 0..=max_index {
        let path = dir.join(slice_filename(i));
        if !path.exists() {
            return Err(format_err(&path, "missing slice file"));
        }
        slices.push(read_pgm(&path)?);
    }
    Ok((meta, slices))
}

/// Load a scan directory as a normalized stack; the meta label rides along.
pub fn load_stack(dir: &Path) -> Result<(StackMeta, SliceStack), DataError> {
    let (meta, raw) = load_volume(dir)?;
    let slices = raw
        .iter()
        .map(normalize)
        .collect::<Result<Vec<_>, _>>()?;
    let stack = SliceStack::new(slices, meta.spacing_mm, meta.label)?;
    Ok((meta, stack))
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| format_err(path, e.to_string()))?;
    fs::write(path, json + "\n").map_err(|e| io_err(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    serde_json::from_str(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)
        .map_err(|e| format_err(path, e.to_string()))
}

/// Load every stack of one split, labelled per the manifest.
pub fn load_split(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
) -> Result<Vec<Sample>, DataError> {
    let mut samples = Vec::new();
    for entry in manifest.entries_for(split) {
        let (_, mut stack) = load_stack(&root.join(&entry.dir))?;
        stack.label = Some(entry.label);
        samples.push(Sample {
            id: entry.id.clone(),
            stack,
        });
    }
    Ok(samples)
}
