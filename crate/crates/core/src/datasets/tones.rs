//! Synthetic harmonic-tone audio sequences.
//!
//! Each "speaker" is a fixed harmonic-amplitude envelope (the time-invariant
//! timbre); each sequence is a random pitch/volume trajectory over T
//! segments with runs of silence mixed in. Segment features are an 80-bin
//! log-magnitude spectrum built analytically from the harmonic stack, so no
//! signal synthesis or FFT is involved.

use super::{DataKind, Dataset, DatasetManifest, SeqData, Sequence};
use crate::error::{Error, Result};
use crate::rng;
use ndarray::Array2;
use rand::Rng as _;
use rayon::prelude::*;

pub const FEATURE_BINS: usize = 80;
const NUM_HARMONICS: usize = 10;
const FREQ_LO: f64 = 50.0;
const FREQ_HI: f64 = 4000.0;
const ENERGY_FLOOR: f64 = 1e-4;

/// Default decision threshold separating silent from voiced segments by
/// mean log-energy; see `supervision::volume_labels`.
pub const DEFAULT_VOLUME_THRESHOLD: f32 = -8.2;

#[derive(Debug, Clone)]
pub struct TonesSpec {
    pub count: usize,
    pub t: usize,
    pub num_speakers: usize,
    pub seed: u64,
}

impl TonesSpec {
    pub fn new(count: usize, t: usize, num_speakers: usize, seed: u64) -> Self {
        TonesSpec { count, t, num_speakers, seed }
    }
}

/// Per-speaker harmonic envelope, fixed across all of a speaker's sequences.
fn speaker_profile(seed: u64, speaker: usize, num_speakers: usize) -> Vec<f64> {
    let mut rng = rng::derive(seed, &format!("speaker-{speaker}"));
    let frac = speaker as f64 / (num_speakers.max(2) - 1) as f64;
    let decay = 0.15 + 0.65 * frac;
    (0..NUM_HARMONICS)
        .map(|k| (-decay * k as f64).exp() * rng.gen_range(0.85..1.15))
        .collect()
}

pub fn generate_tones(spec: &TonesSpec) -> Result<Dataset> {
    if spec.t < 2 {
        return Err(Error::Config(format!("sequence length {} too short (need >= 2)", spec.t)));
    }
    if spec.num_speakers < 2 {
        return Err(Error::Config("need at least 2 speakers".into()));
    }
    if spec.count < 1 {
        return Err(Error::Config("need at least one sequence".into()));
    }

    let profiles: Vec<Vec<f64>> = (0..spec.num_speakers)
        .map(|s| speaker_profile(spec.seed, s, spec.num_speakers))
        .collect();

    let sequences: Vec<Sequence> = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let speaker = i % spec.num_speakers;
            generate_one(spec, i, speaker, &profiles[speaker])
        })
        .collect();

    let manifest = DatasetManifest {
        kind: DataKind::Tones,
        count: spec.count,
        t: spec.t,
        c: 0,
        h: 0,
        w: 0,
        f: FEATURE_BINS,
        num_static_classes: spec.num_speakers,
        num_dynamic_classes: 2,
        seed: spec.seed,
    };
    let ds = Dataset { manifest, sequences };
    ds.validate()?;
    Ok(ds)
}

fn generate_one(spec: &TonesSpec, index: usize, speaker: usize, profile: &[f64]) -> Sequence {
    let mut rng = rng::derive(spec.seed, &format!("tones-{index}"));
    let mut f0 = rng.gen_range(120.0..280.0);
    let mut voiced = rng.gen_bool(0.8);

    let mut feats = Array2::<f32>::zeros((spec.t, FEATURE_BINS));
    let mut labels = vec![0i64; spec.t];
    for t in 0..spec.t {
        if t > 0 {
            f0 = (f0 * rng.gen_range(0.94..1.06f64)).clamp(110.0, 300.0);
            voiced = if voiced { !rng.gen_bool(0.15) } else { rng.gen_bool(0.6) };
        }
        let volume = if voiced { rng.gen_range(0.4..1.0f64) } else { 0.0 };
        labels[t] = i64::from(voiced);
        let row = segment_spectrum(f0, volume, profile, &mut rng);
        for (dst, v) in feats.row_mut(t).iter_mut().zip(row) {
            *dst = v as f32;
        }
    }

    Sequence {
        data: SeqData::Audio(feats),
        static_label: speaker as i64,
        dynamic_labels: labels,
        seed: spec.seed.wrapping_add(index as u64),
    }
}

/// Log-energy per frequency bin for one segment: harmonic peaks at k*f0
/// shaped by the speaker envelope, a broadband breath component while
/// voiced, and a small stochastic noise floor.
fn segment_spectrum(f0: f64, volume: f64, profile: &[f64], rng: &mut crate::rng::Rng) -> Vec<f64> {
    let spacing = (FREQ_HI - FREQ_LO) / (FEATURE_BINS - 1) as f64;
    let sigma = 1.6 * spacing;
    (0..FEATURE_BINS)
        .map(|b| {
            let fc = FREQ_LO + spacing * b as f64;
            let mut energy = ENERGY_FLOOR + rng.gen_range(0.0..1e-5);
            if volume > 0.0 {
                energy += (0.05 * volume) * (0.05 * volume); // breath noise
                for (k, &a) in profile.iter().enumerate() {
                    let fk = (k + 1) as f64 * f0;
                    let amp = volume * a;
                    let d = (fc - fk) / sigma;
                    energy += amp * amp * (-d * d).exp();
                }
            }
            energy.ln()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_tones(&TonesSpec::new(1, 1, 2, 0)).is_err());
        assert!(generate_tones(&TonesSpec::new(1, 4, 1, 0)).is_err());
        assert!(generate_tones(&TonesSpec::new(0, 4, 2, 0)).is_err());
    }

    #[test]
    fn shapes_of_generated_set() {
        let ds = generate_tones(&TonesSpec::new(50, 20, 5, 3)).unwrap();
        assert_eq!(ds.len(), 50);
        for s in &ds.sequences {
            assert_eq!(s.data.audio().shape(), [20, 80]);
            assert!((0..5).contains(&s.static_label));
        }
    }

    #[test]
    fn silent_segments_sit_at_the_noise_floor() {
        let ds = generate_tones(&TonesSpec::new(40, 20, 3, 9)).unwrap();
        for s in &ds.sequences {
            let a = s.data.audio();
            for (t, &lab) in s.dynamic_labels.iter().enumerate() {
                let mean: f32 = a.row(t).mean().unwrap();
                if lab == 0 {
                    assert!(mean < -8.9, "silent segment mean {mean} too hot");
                } else {
                    assert!(mean > -7.6, "voiced segment mean {mean} too cold");
                }
            }
        }
    }

    #[test]
    fn same_speaker_means_same_profile() {
        let spec = TonesSpec::new(10, 8, 5, 1);
        let a = speaker_profile(spec.seed, 2, 5);
        let b = speaker_profile(spec.seed, 2, 5);
        let c = speaker_profile(spec.seed, 3, 5);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_tones(&TonesSpec::new(6, 10, 3, 21)).unwrap();
        let b = generate_tones(&TonesSpec::new(6, 10, 3, 21)).unwrap();
        for (x, y) in a.sequences.iter().zip(b.sequences.iter()) {
            assert_eq!(x, y);
        }
    }
}
