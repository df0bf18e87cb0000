//! Synthetic sequence datasets with ground-truth static and dynamic factor
//! labels, plus the archive-backed container format.

mod shapes;
mod tones;

pub use shapes::{generate_shapes, quantize_direction, ShapesSpec, DIRECTIONS};
pub use tones::{generate_tones, TonesSpec, DEFAULT_VOLUME_THRESHOLD, FEATURE_BINS};

use crate::container::{Archive, ArrayData};
use crate::error::{Error, Result};
use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Shapes,
    Tones,
}

impl std::fmt::Display for DataKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataKind::Shapes => write!(f, "shapes"),
            DataKind::Tones => write!(f, "tones"),
        }
    }
}

/// Observations of one sequence: video frames or per-segment feature rows.
#[derive(Debug, Clone, PartialEq)]
pub enum SeqData {
    /// `[T, C, H, W]`, values in `[0,1]`.
    Video(Array4<f32>),
    /// `[T, F]` log-energy features.
    Audio(Array2<f32>),
}

impl SeqData {
    pub fn t_len(&self) -> usize {
        match self {
            SeqData::Video(a) => a.shape()[0],
            SeqData::Audio(a) => a.shape()[0],
        }
    }

    pub fn video(&self) -> &Array4<f32> {
        match self {
            SeqData::Video(a) => a,
            SeqData::Audio(_) => panic!("expected video data"),
        }
    }

    pub fn audio(&self) -> &Array2<f32> {
        match self {
            SeqData::Audio(a) => a,
            SeqData::Video(_) => panic!("expected audio data"),
        }
    }
}

/// One sample: T ordered observations plus factor labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub data: SeqData,
    /// Identity / speaker class.
    pub static_label: i64,
    /// One label per timestep (motion direction bin / voiced flag).
    pub dynamic_labels: Vec<i64>,
    /// The per-sequence seed the generator used.
    pub seed: u64,
}

impl Sequence {
    pub fn t_len(&self) -> usize {
        self.data.t_len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: DataKind,
    pub count: usize,
    pub t: usize,
    /// Video dims (zero for audio datasets).
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Audio feature dim (zero for video datasets).
    pub f: usize,
    pub num_static_classes: usize,
    pub num_dynamic_classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn kind(&self) -> DataKind {
        self.manifest.kind
    }

    /// New dataset restricted to `indices` (manifest count updated).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let sequences: Vec<Sequence> =
            indices.iter().map(|&i| self.sequences[i].clone()).collect();
        let mut manifest = self.manifest.clone();
        manifest.count = sequences.len();
        Dataset { manifest, sequences }
    }

    /// Consistency checks promised by the manifest.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.count != self.sequences.len() {
            return Err(Error::Format(format!(
                "manifest count {} != stored sequences {}",
                m.count,
                self.sequences.len()
            )));
        }
        if m.count == 0 {
            return Err(Error::Format("dataset must hold at least one sequence".into()));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            if s.t_len() != m.t {
                return Err(Error::Format(format!("sequence {i}: T {} != manifest {}", s.t_len(), m.t)));
            }
            if s.dynamic_labels.len() != m.t {
                return Err(Error::Format(format!("sequence {i}: dynamic label count mismatch")));
            }
            if s.static_label < 0 || s.static_label as usize >= m.num_static_classes {
                return Err(Error::Format(format!("sequence {i}: static label out of range")));
            }
            for &l in &s.dynamic_labels {
                if l < 0 || l as usize >= m.num_dynamic_classes {
                    return Err(Error::Format(format!("sequence {i}: dynamic label out of range")));
                }
            }
            match (&s.data, m.kind) {
                (SeqData::Video(a), DataKind::Shapes) => {
                    if a.shape() != [m.t, m.c, m.h, m.w] {
                        return Err(Error::Format(format!("sequence {i}: frame dims mismatch")));
                    }
                    for &v in a.iter() {
                        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                            return Err(Error::Format(format!(
                                "sequence {i}: pixel value {v} outside [0,1]"
                            )));
                        }
                    }
                }
                (SeqData::Audio(a), DataKind::Tones) => {
                    if a.shape() != [m.t, m.f] {
                        return Err(Error::Format(format!("sequence {i}: feature dims mismatch")));
                    }
                    if a.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Format(format!("sequence {i}: non-finite feature")));
                    }
                }
                _ => {
                    return Err(Error::Format(format!(
                        "sequence {i}: data modality does not match dataset kind"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let m = &self.manifest;
        let mut ar = Archive::new();
        ar.insert(
            "dataset.json",
            ArrayData::Bytes(serde_json::to_vec_pretty(m).expect("manifest serializes")),
        );

        match m.kind {
            DataKind::Shapes => {
                let mut frames =
                    ndarray::Array::zeros((m.count, m.t, m.c, m.h, m.w));
                for (i, s) in self.sequences.iter().enumerate() {
                    frames.index_axis_mut(Axis(0), i).assign(s.data.video());
                }
                ar.insert("frames", ArrayData::F32(frames.into_dyn()));
            }
            DataKind::Tones => {
                let mut feats = ndarray::Array::zeros((m.count, m.t, m.f));
                for (i, s) in self.sequences.iter().enumerate() {
                    feats.index_axis_mut(Axis(0), i).assign(s.data.audio());
                }
                ar.insert("features", ArrayData::F32(feats.into_dyn()));
            }
        }

        let statics: Vec<i64> = self.sequences.iter().map(|s| s.static_label).collect();
        ar.insert(
            "static_labels",
            ArrayData::I64(ndarray::Array1::from_vec(statics).into_dyn()),
        );
        let mut dyn_labels = Array2::<i64>::zeros((m.count, m.t));
        for (i, s) in self.sequences.iter().enumerate() {
            for (t, &l) in s.dynamic_labels.iter().enumerate() {
                dyn_labels[(i, t)] = l;
            }
        }
        ar.insert("dynamic_labels", ArrayData::I64(dyn_labels.into_dyn()));
        let seeds: Vec<i64> = self.sequences.iter().map(|s| s.seed as i64).collect();
        ar.insert("seeds", ArrayData::I64(ndarray::Array1::from_vec(seeds).into_dyn()));
        ar.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let ar = Archive::read(path)?;
        let manifest: DatasetManifest = serde_json::from_slice(ar.bytes("dataset.json")?)
            .map_err(|e| Error::Format(format!("entry 'dataset.json': {e}")))?;
        let statics = ar.i64s("static_labels")?;
        let dynamics = ar.i64s("dynamic_labels")?;
        let seeds = ar.i64s("seeds")?;
        let m = &manifest;
        if statics.len() != m.count || seeds.len() != m.count {
            return Err(Error::Format("label arrays do not match manifest count".into()));
        }
        if dynamics.shape() != [m.count, m.t] {
            return Err(Error::Format("entry 'dynamic_labels': wrong dims".into()));
        }

        let mut sequences = Vec::with_capacity(m.count);
        match m.kind {
            DataKind::Shapes => {
                let frames = ar.f32s("frames")?;
                if frames.shape() != [m.count, m.t, m.c, m.h, m.w] {
                    return Err(Error::Format("entry 'frames': wrong dims".into()));
                }
                let frames = frames
                    .view()
                    .into_dimensionality::<ndarray::Ix5>()
                    .expect("rank checked above");
                for i in 0..m.count {
                    sequences.push(Sequence {
                        data: SeqData::Video(frames.index_axis(Axis(0), i).to_owned()),
                        static_label: statics[ndarray::IxDyn(&[i])],
                        dynamic_labels: (0..m.t)
                            .map(|t| dynamics[ndarray::IxDyn(&[i, t])])
                            .collect(),
                        seed: seeds[ndarray::IxDyn(&[i])] as u64,
                    });
                }
            }
            DataKind::Tones => {
                let feats = ar.f32s("features")?;
                if feats.shape() != [m.count, m.t, m.f] {
                    return Err(Error::Format("entry 'features': wrong dims".into()));
                }
                let feats = feats
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("rank checked above");
                for i in 0..m.count {
                    sequences.push(Sequence {
                        data: SeqData::Audio(feats.index_axis(Axis(0), i).to_owned()),
                        static_label: statics[ndarray::IxDyn(&[i])],
                        dynamic_labels: (0..m.t)
                            .map(|t| dynamics[ndarray::IxDyn(&[i, t])])
                            .collect(),
                        seed: seeds[ndarray::IxDyn(&[i])] as u64,
                    });
                }
            }
        }
        let ds = Dataset { manifest, sequences };
        ds.validate()?;
        Ok(ds)
    }
}
