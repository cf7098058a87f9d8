//! On-disk container: a JSON manifest plus one binary file of shape-prefixed
//! little-endian arrays.
//!
//! Array record layout: `dtype: u8` (0 = f32, 1 = f64), `ndim: u8`,
//! `ndim × u32` dimensions, then the elements.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoxPx, BundleMetadata, DatasetBundle, Sample, SourceRegion, VideoClip, Waveform};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "1.0";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARRAYS_FILE: &str = "arrays.bin";

const BUNDLE_FORMAT: &str = "avmix-bundle";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Default)]
pub struct ArrayWriter {
    buf: Vec<u8>,
}

impl ArrayWriter {
    pub fn new() -> Self {
        Self::default()
    }

    fn header(&mut self, dtype: DType, shape: &[usize]) {
        self.buf.push(dtype.code());
        self.buf.push(shape.len() as u8);
        for &d in shape {
            self.buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }

    pub fn write_f32(&mut self, shape: &[usize], data: &[f32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.header(DType::F32, shape);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn write_f64(&mut self, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.header(DType::F64, shape);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ArrayReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ArrayReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, owner: &str, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                sample: owner.to_string(),
                detail: format!(
                    "{what}: needed {n} bytes at offset {}, only {} remain",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn header(&mut self, dtype: DType, shape: &[usize], owner: &str) -> Result<usize> {
        let head = self.take(2, owner, "array header")?;
        if head[0] != dtype.code() {
            return Err(Error::Format(format!(
                "array for `{owner}` has dtype code {}, expected {}",
                head[0],
                dtype.code()
            )));
        }
        let ndim = head[1] as usize;
        let dims = self.take(4 * ndim, owner, "array shape")?;
        let found: Vec<usize> = dims
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        if found != shape {
            return Err(Error::Format(format!(
                "array for `{owner}` has shape {found:?}, manifest says {shape:?}"
            )));
        }
        Ok(shape.iter().product::<usize>() * dtype.width())
    }

    pub fn read_f32(&mut self, shape: &[usize], owner: &str) -> Result<Vec<f32>> {
        let n = self.header(DType::F32, shape, owner)?;
        let raw = self.take(n, owner, "array data")?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn read_f64(&mut self, shape: &[usize], owner: &str) -> Result<Vec<f64>> {
        let n = self.header(DType::F64, shape, owner)?;
        let raw = self.take(n, owner, "array data")?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Rejects manifests whose major schema version differs from ours.
pub fn check_schema_version(manifest: &serde_json::Value) -> Result<()> {
    let found = manifest
        .get("schema_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Format("manifest has no schema_version".into()))?;
    let major = |v: &str| v.split('.').next().unwrap_or("").to_string();
    if major(found) != major(SCHEMA_VERSION) {
        return Err(Error::SchemaVersion {
            found: found.to_string(),
            expected: SCHEMA_VERSION.to_string(),
        });
    }
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden_label: Option<usize>,
    /// `[T, H, W, C]`
    clip_shape: [usize; 4],
    audio_samples: usize,
    sample_rate: u32,
    frame_boxes: Vec<BoxPx>,
}

#[derive(Serialize, Deserialize)]
struct Splits {
    labeled: Vec<SampleEntry>,
    unlabeled: Vec<SampleEntry>,
    test: Vec<SampleEntry>,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    format: String,
    schema_version: String,
    data_file: String,
    metadata: BundleMetadata,
    splits: Splits,
}

fn entry(s: &Sample) -> SampleEntry {
    SampleEntry {
        id: s.id.clone(),
        label: s.label,
        hidden_label: s.hidden_label,
        clip_shape: [s.clip.frames, s.clip.height, s.clip.width, s.clip.channels],
        audio_samples: s.waveform.samples.len(),
        sample_rate: s.waveform.sample_rate,
        frame_boxes: s.source.frame_boxes.clone(),
    }
}

/// Serializes a bundle to `(manifest text, array bytes)`.
pub fn encode_bundle(bundle: &DatasetBundle) -> Result<(String, Vec<u8>)> {
    let mut w = ArrayWriter::new();
    for s in bundle.labeled.iter().chain(&bundle.unlabeled).chain(&bundle.test) {
        let c = &s.clip;
        w.write_f32(&[c.frames, c.height, c.width, c.channels], &c.data);
        w.write_f32(&[s.waveform.samples.len()], &s.waveform.samples);
    }
    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.into(),
        schema_version: SCHEMA_VERSION.into(),
        data_file: ARRAYS_FILE.into(),
        metadata: bundle.metadata.clone(),
        splits: Splits {
            labeled: bundle.labeled.iter().map(entry).collect(),
            unlabeled: bundle.unlabeled.iter().map(entry).collect(),
            test: bundle.test.iter().map(entry).collect(),
        },
    };
    Ok((serde_json::to_string_pretty(&manifest)?, w.into_bytes()))
}

pub fn decode_bundle(manifest_text: &str, arrays: &[u8]) -> Result<DatasetBundle> {
    let value: serde_json::Value = serde_json::from_str(manifest_text)?;
    check_schema_version(&value)?;
    let manifest: BundleManifest = serde_json::from_value(value)?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::Format(format!("not a dataset bundle: format `{}`", manifest.format)));
    }
    let mut r = ArrayReader::new(arrays);
    let mut read_split = |entries: Vec<SampleEntry>| -> Result<Vec<Sample>> {
        entries
            .into_iter()
            .map(|e| {
                let [t, h, w, c] = e.clip_shape;
                let data = r.read_f32(&e.clip_shape, &e.id)?;
                let samples = r.read_f32(&[e.audio_samples], &e.id)?;
                Ok(Sample {
                    clip: VideoClip::new(t, h, w, c, data)?,
                    waveform: Waveform {
                        samples,
                        sample_rate: e.sample_rate,
                    },
                    label: e.label,
                    source: SourceRegion {
                        frame_boxes: e.frame_boxes,
                    },
                    hidden_label: e.hidden_label,
                    id: e.id,
                })
            })
            .collect()
    };
    let labeled = read_split(manifest.splits.labeled)?;
    let unlabeled = read_split(manifest.splits.unlabeled)?;
    let test = read_split(manifest.splits.test)?;
    if !r.is_exhausted() {
        return Err(Error::Format("trailing bytes after the last array".into()));
    }
    Ok(DatasetBundle {
        labeled,
        unlabeled,
        test,
        metadata: manifest.metadata,
    })
}

/// Writes `manifest.json` and `arrays.bin` into directory `path`.
pub fn write_bundle(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let (manifest, arrays) = encode_bundle(bundle)?;
    write_file(&path.join(MANIFEST_FILE), manifest.as_bytes())?;
    write_file(&path.join(ARRAYS_FILE), &arrays)
}

pub fn read_bundle(path: &Path) -> Result<DatasetBundle> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let manifest = read_file(&path.join(MANIFEST_FILE))?;
    let manifest = String::from_utf8(manifest)
        .map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let arrays = read_file(&path.join(ARRAYS_FILE))?;
    decode_bundle(&manifest, &arrays)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, GenConfig};

    fn bundle() -> DatasetBundle {
        generate_dataset(&GenConfig {
            per_class_unlabeled: 10,
            per_class_test: 1,
            seed: 3,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let b = bundle();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&b, dir.path()).unwrap();
        assert_eq!(read_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = encode_bundle(&bundle()).unwrap();
        let b = encode_bundle(&bundle()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn newer_major_version_is_rejected() {
        let (m, arrays) = encode_bundle(&bundle()).unwrap();
        let m = m.replace("\"schema_version\": \"1.0\"", "\"schema_version\": \"2.0\"");
        match decode_bundle(&m, &arrays) {
            Err(Error::SchemaVersion { found, .. }) => assert_eq!(found, "2.0"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_names_the_sample() {
        let b = bundle();
        let (m, mut arrays) = encode_bundle(&b).unwrap();
        arrays.truncate(arrays.len() - 4);
        let last = &b.test.last().unwrap().id;
        match decode_bundle(&m, &arrays) {
            Err(Error::Truncated { sample, .. }) => assert_eq!(&sample, last),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn f64_arrays_round_trip() {
        let mut w = ArrayWriter::new();
        w.write_f64(&[2, 2], &[1.0, -2.5, f64::MIN_POSITIVE, 1e300]);
        let bytes = w.into_bytes();
        let mut r = ArrayReader::new(&bytes);
        assert_eq!(r.read_f64(&[2, 2], "x").unwrap(), vec![1.0, -2.5, f64::MIN_POSITIVE, 1e300]);
        assert!(r.is_exhausted());
    }
}
