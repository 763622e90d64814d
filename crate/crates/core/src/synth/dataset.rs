//! On-disk dataset layout:
//!
//! ```text
//! root/manifest.json
//! root/seq_<k>/frame_<i>.tns        image
//! root/seq_<k>/frame_<i>_aorta.tns  aorta mask
//! root/seq_<k>/frame_<i>_cath.tns   catheter mask
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, read_tensor, write_json, write_tensor};
use crate::synth::generate::{generate_sequence, FrameSample, SequenceSpec};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// A generated sequence together with the spec that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub spec: SequenceSpec,
    pub frames: Vec<FrameSample>,
}

impl Sequence {
    pub fn generate(spec: SequenceSpec) -> Result<Self> {
        let frames = generate_sequence(&spec)?;
        Ok(Sequence { spec, frames })
    }

    /// Indices of frames with an empty catheter mask.
    pub fn filtered_frames(&self) -> Vec<usize> {
        self.frames
            .iter()
            .filter(|f| !f.has_catheter())
            .map(|f| f.frame_index)
            .collect()
    }

    /// Frames a training reader may use: those showing a catheter.
    pub fn training_frames(&self) -> Vec<&FrameSample> {
        self.frames.iter().filter(|f| f.has_catheter()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub directory: String,
    pub frame_count: usize,
    pub seed: u64,
    /// Frames without any catheter pixel; skipped by training readers.
    pub filtered_frames: Vec<usize>,
    pub spec: SequenceSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sequences: usize,
    pub frames: usize,
    pub filtered_frames: usize,
    pub mean_intensity: f64,
    pub aorta_fraction: f64,
    pub catheter_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub sequences: Vec<SequenceEntry>,
    pub stats: DatasetStats,
}

fn frame_paths(dir: &Path, i: usize) -> [std::path::PathBuf; 3] {
    [
        dir.join(format!("frame_{i}.tns")),
        dir.join(format!("frame_{i}_aorta.tns")),
        dir.join(format!("frame_{i}_cath.tns")),
    ]
}

pub fn write_dataset(sequences: &[Sequence], root: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(sequences.len());
    let (mut frames, mut filtered) = (0usize, 0usize);
    let (mut intensity, mut aorta, mut cath, mut pixels) = (0f64, 0f64, 0f64, 0f64);
    for (k, seq) in sequences.iter().enumerate() {
        let directory = format!("seq_{k}");
        let dir = root.join(&directory);
        for f in &seq.frames {
            let [img, ao, ca] = frame_paths(&dir, f.frame_index);
            write_tensor(&img, &f.image)?;
            write_tensor(&ao, &f.aorta_mask)?;
            write_tensor(&ca, &f.catheter_mask)?;
            intensity += f.image.data().iter().map(|&v| v as f64).sum::<f64>();
            aorta += f.aorta_mask.sum() as f64;
            cath += f.catheter_mask.sum() as f64;
            pixels += f.image.len() as f64;
        }
        let filtered_frames = seq.filtered_frames();
        frames += seq.frames.len();
        filtered += filtered_frames.len();
        entries.push(SequenceEntry {
            directory,
            frame_count: seq.frames.len(),
            seed: seq.spec.seed,
            filtered_frames,
            spec: seq.spec.clone(),
        });
    }
    let pixels = pixels.max(1.0);
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        sequences: entries,
        stats: DatasetStats {
            sequences: sequences.len(),
            frames,
            filtered_frames: filtered,
            mean_intensity: intensity / pixels,
            aorta_fraction: aorta / pixels,
            catheter_fraction: cath / pixels,
        },
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let m: DatasetManifest = read_json(&path)?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::parse(path, format!("unsupported manifest version {}", m.format_version)));
    }
    Ok(m)
}

pub fn read_dataset(root: &Path) -> Result<(DatasetManifest, Vec<Sequence>)> {
    let manifest = read_manifest(root)?;
    let mut sequences = Vec::with_capacity(manifest.sequences.len());
    for entry in &manifest.sequences {
        let dir = root.join(&entry.directory);
        let mut frames = Vec::with_capacity(entry.frame_count);
        for i in 0..entry.frame_count {
            let [img, ao, ca] = frame_paths(&dir, i);
            let frame = FrameSample {
                frame_index: i,
                image: read_tensor(&img)?,
                aorta_mask: read_tensor(&ao)?,
                catheter_mask: read_tensor(&ca)?,
            };
            if frame.image.shape() != frame.aorta_mask.shape()
                || frame.image.shape() != frame.catheter_mask.shape()
            {
                return Err(Error::parse(img, "image and mask shapes differ"));
            }
            frames.push(frame);
        }
        let seq = Sequence {
            spec: entry.spec.clone(),
            frames,
        };
        if seq.filtered_frames() != entry.filtered_frames {
            return Err(Error::parse(
                root.join(MANIFEST_FILE),
                format!("filtered frame list of {} does not match the masks", entry.directory),
            ));
        }
        sequences.push(seq);
    }
    Ok((manifest, sequences))
}

/// Generates `count` sequences with seeds derived from `seed`.
pub fn generate_dataset(count: usize, image_size: usize, frames: usize, seed: u64) -> Result<Vec<Sequence>> {
    (0..count)
        .map(|k| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
            Sequence::generate(SequenceSpec::sample(image_size, frames, s))
        })
        .collect()
}
