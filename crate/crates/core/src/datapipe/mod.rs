//! Slice-stack data pipeline: converts raw grayscale volumes into
//! normalized fixed-length stacks, computes slice-to-slice differential
//! frames, and performs seeded stratified train/val/test splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

mod disk;

pub use disk::{
    load_manifest, load_split, load_stack, load_volume, read_pgm, save_manifest, save_stack,
    write_pgm, Sample, StackMeta,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("volume too short: {available_mm:.1} mm available proximal of the reference slice, {required_mm:.1} mm required")]
    InsufficientExtent {
        available_mm: f32,
        required_mm: f32,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

/// 2-D float image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if data.len() != height * width {
            return Err(DataError::Input(format!(
                "image data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Integer-valued grayscale image with 0..=255 range on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct IntImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

/// Binary class label: control = 0, unstable = 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Control,
    Unstable,
}

impl Label {
    pub fn as_f32(self) -> f32 {
        match self {
            Label::Control => 0.0,
            Label::Unstable => 1.0,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Control => 0,
            Label::Unstable => 1,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Label::Control),
            1 => Ok(Label::Unstable),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

/// Ordered sequence of normalized slices (distal to proximal) sharing one
/// geometry; the unit of model input.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub slices: Vec<Image>,
    /// Inter-slice spacing of the source volume, millimetres.
    pub spacing_mm: f32,
    pub label: Option<Label>,
}

impl SliceStack {
    pub fn new(
        slices: Vec<Image>,
        spacing_mm: f32,
        label: Option<Label>,
    ) -> Result<Self, DataError> {
        if slices.is_empty() {
            return Err(DataError::Input("stack must contain at least one slice".into()));
        }
        let (h, w) = (slices[0].height, slices[0].width);
        for (i, s) in slices.iter().enumerate() {
            if s.height != h || s.width != w {
                return Err(DataError::Input(format!(
                    "slice {i} is {}x{}, expected {h}x{w}",
                    s.height, s.width
                )));
            }
            if s.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(DataError::Input(format!(
                    "slice {i} holds values outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            slices,
            spacing_mm,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn height(&self) -> usize {
        self.slices[0].height
    }

    pub fn width(&self) -> usize {
        self.slices[0].width
    }

    /// Edge length for square stacks.
    pub fn side_px(&self) -> usize {
        debug_assert_eq!(self.height(), self.width());
        self.width()
    }
}

pub const DEFAULT_SPAN_MM: f32 = 50.0;
pub const DEFAULT_SLICE_COUNT: usize = 13;

/// Index offsets (relative to the reference slice) of `count` evenly spaced
/// samples spanning `span_mm`, inclusive of both endpoints:
/// `round(k * span / ((count - 1) * spacing))`.
pub fn slice_offsets(spacing_mm: f32, span_mm: f32, count: usize) -> Result<Vec<usize>, DataError> {
    if count == 0 {
        return Err(DataError::Config("slice count must be positive".into()));
    }
    if spacing_mm <= 0.0 || span_mm <= 0.0 {
        return Err(DataError::Config(format!(
            "spacing ({spacing_mm} mm) and span ({span_mm} mm) must be positive"
        )));
    }
    if count == 1 {
        return Ok(vec![0]);
    }
    let step = span_mm as f64 / ((count - 1) as f64 * spacing_mm as f64);
    Ok((0..count).map(|k| (k as f64 * step).round() as usize).collect())
}

/// Select `count` slices starting at the reference slice and reaching
/// `span_mm` proximal of it.
pub fn select_slices(
    volume: &[IntImage],
    plafond_index: usize,
    spacing_mm: f32,
    span_mm: f32,
    count: usize,
) -> Result<Vec<IntImage>, DataError> {
    if plafond_index >= volume.len() {
        return Err(DataError::Input(format!(
            "reference slice index {plafond_index} out of range for volume of {} slices",
            volume.len()
        )));
    }
    let offsets = slice_offsets(spacing_mm, span_mm, count)?;
    let last = plafond_index + offsets.last().copied().unwrap_or(0);
    if last >= volume.len() {
        return Err(DataError::InsufficientExtent {
            available_mm: (volume.len() - 1 - plafond_index) as f32 * spacing_mm,
            required_mm: offsets.last().copied().unwrap_or(0) as f32 * spacing_mm,
        });
    }
    Ok(offsets
        .into_iter()
        .map(|off| volume[plafond_index + off].clone())
        .collect())
}

/// Bilinear resampling to a square `out_side` image with half-pixel center
/// alignment. Constant images map to constant images exactly.
pub fn resize_bilinear(image: &Image, out_side: usize) -> Result<Image, DataError> {
    if image.height < 2 || image.width < 2 {
        return Err(DataError::Input(format!(
            "resize needs at least a 2x2 input, got {}x{}",
            image.height, image.width
        )));
    }
    if out_side == 0 {
        return Err(DataError::Config("output side must be positive".into()));
    }
    let scale_y = image.height as f64 / out_side as f64;
    let scale_x = image.width as f64 / out_side as f64;
    let mut data = Vec::with_capacity(out_side * out_side);
    for oy in 0..out_side {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5)
            .clamp(0.0, (image.height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let fy = (sy - y0 as f64) as f32;
        for ox in 0..out_side {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5)
                .clamp(0.0, (image.width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let fx = (sx - x0 as f64) as f32;
            // Nested lerp keeps constant inputs exactly constant.
            let top = image.at(y0, x0) + fx * (image.at(y0, x1) - image.at(y0, x0));
            let bottom = image.at(y1, x0) + fx * (image.at(y1, x1) - image.at(y1, x0));
            data.push(top + fy * (bottom - top));
        }
    }
    Image::new(out_side, out_side, data)
}

/// Map 0..=255 integer pixels to floats by dividing by 255.
pub fn normalize(image: &IntImage) -> Result<Image, DataError> {
    if let Some(&bad) = image.data.iter().find(|&&v| v > 255) {
        return Err(DataError::Input(format!(
            "pixel value {bad} outside 0..=255"
        )));
    }
    Image::new(
        image.height,
        image.width,
        image.data.iter().map(|&v| v as f32 / 255.0).collect(),
    )
}

/// Quantize a [0, 1] float image back to 0..=255 integers (round to nearest).
pub fn denormalize(image: &Image) -> IntImage {
    IntImage {
        height: image.height,
        width: image.width,
        data: image
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u16)
            .collect(),
    }
}

/// Pixel-wise differences of successive slices:
/// frame k = slice[k+1] - slice[k], k = 0..N-2.
pub fn differential(stack: &SliceStack) -> Result<Vec<Image>, DataError> {
    if stack.len() < 2 {
        return Err(DataError::Input(format!(
            "differencing needs at least 2 slices, got {}",
            stack.len()
        )));
    }
    Ok(stack
        .slices
        .windows(2)
        .map(|pair| {
            let data = pair[1]
                .data
                .iter()
                .zip(&pair[0].data)
                .map(|(&next, &prev)| next - prev)
                .collect();
            Image {
                height: pair[0].height,
                width: pair[0].width,
                data,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub dir: String,
    pub label: Label,
    pub split: Split,
}

/// Experiment bookkeeping: every stack with its label and split assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self, label: Label, split: Split) -> usize {
        self.entries
            .iter()
            .filter(|e| e.label == label && e.split == split)
            .count()
    }

    pub fn entries_for(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Unsplit record: (id, directory, label).
pub type CohortEntry = (String, String, Label);

/// Per label: test = round(r_test * N), val = round(r_val * N), train =
/// remainder; assignment by seeded shuffle. Deterministic per (entry order,
/// seed).
pub fn stratified_split(
    entries: &[CohortEntry],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    let (r_train, r_val, r_test) = ratios;
    if r_train < 0.0 || r_val < 0.0 || r_test < 0.0 || (r_train + r_val + r_test - 1.0).abs() > 1e-9
    {
        return Err(DataError::Config(format!(
            "split ratios must be non-negative and sum to 1, got ({r_train}, {r_val}, {r_test})"
        )));
    }
    for label in [Label::Control, Label::Unstable] {
        let n = entries.iter().filter(|e| e.2 == label).count();
        if n < 3 {
            return Err(DataError::Config(format!(
                "label {:?} has {n} entries; at least 3 per label required",
                label
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits: Vec<Option<Split>> = vec![None; entries.len()];
    for label in [Label::Control, Label::Unstable] {
        let mut idx: Vec<usize> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.2 == label)
            .map(|(i, _)| i)
            .collect();
        let n = idx.len();
        let n_test = (r_test * n as f64).round() as usize;
        let n_val = (r_val * n as f64).round() as usize;
        if n_test + n_val >= n {
            return Err(DataError::Config(format!(
                "label {label:?}: test {n_test} + val {n_val} leaves no training entries out of {n}"
            )));
        }
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            splits[i] = Some(if pos < n_test {
                Split::Test
            } else if pos < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            });
        }
    }

    Ok(DatasetManifest {
        seed,
        ratios: [r_train, r_val, r_test],
        entries: entries
            .iter()
            .zip(splits)
            .map(|((id, dir, label), split)| ManifestEntry {
                id: id.clone(),
                dir: dir.clone(),
                label: *label,
                split: split.expect("every entry assigned"),
            })
            .collect(),
    })
}
