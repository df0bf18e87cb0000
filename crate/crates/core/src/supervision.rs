//! Self-supervision signal generators: frame-difference motion maps,
//! grid-patch motion pseudo-labels, temporal shuffles, audio volume labels
//! and in-batch negative sampling.

use crate::datasets::{SeqData, Sequence};
use crate::error::{Error, Result};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng as _;

/// Per-frame motion-magnitude proxy, `[T,H,W]`, nonnegative.
#[derive(Debug, Clone)]
pub struct MotionMap {
    pub magnitudes: Array3<f32>,
}

/// Top-k motion patch indices per frame. `indices: [T,k]`, each in
/// `[0, grid*grid)`, ordered by descending patch mean (ties to the lower
/// patch index).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLabels {
    pub grid: usize,
    pub k: usize,
    pub indices: Array2<i64>,
}

/// Motion proxy: per-pixel absolute temporal difference summed over
/// channels. Frame 0 reuses frame 1's map so every timestep has a
/// non-degenerate label.
pub fn flow_proxy(frames: &Array4<f32>) -> Result<MotionMap> {
    let (t, _c, h, w) = frames.dim();
    if t < 2 {
        return Err(Error::Precondition(format!("flow proxy needs T >= 2, got {t}")));
    }
    let mut mags = Array3::<f32>::zeros((t, h, w));
    for ti in 1..t {
        let cur = frames.index_axis(Axis(0), ti);
        let prev = frames.index_axis(Axis(0), ti - 1);
        let mut out = mags.index_axis_mut(Axis(0), ti);
        for ((ch, y, x), &v) in cur.indexed_iter() {
            out[(y, x)] += (v - prev[(ch, y, x)]).abs();
        }
    }
    let first = mags.index_axis(Axis(0), 1).to_owned();
    mags.index_axis_mut(Axis(0), 0).assign(&first);
    Ok(MotionMap { magnitudes: mags })
}

/// Splits each map into a `grid x grid` array of patches and keeps the k
/// patch indices with the largest mean magnitude.
pub fn patch_motion_labels(map: &MotionMap, grid: usize, k: usize) -> Result<PatchLabels> {
    let (t, h, w) = map.magnitudes.dim();
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::Config(format!(
            "grid {grid} does not divide map dims {h}x{w}"
        )));
    }
    if k == 0 || k > grid * grid {
        return Err(Error::Config(format!("k={k} outside [1, {}]", grid * grid)));
    }
    let (ph, pw) = (h / grid, w / grid);
    let mut indices = Array2::<i64>::zeros((t, k));
    for ti in 0..t {
        let frame = map.magnitudes.index_axis(Axis(0), ti);
        let mut means: Vec<(f32, usize)> = Vec::with_capacity(grid * grid);
        for gy in 0..grid {
            for gx in 0..grid {
                let mut s = 0.0f32;
                for y in 0..ph {
                    for x in 0..pw {
                        s += frame[(gy * ph + y, gx * pw + x)];
                    }
                }
                means.push((s / (ph * pw) as f32, gy * grid + gx));
            }
        }
        means.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (slot, (_, idx)) in means.iter().take(k).enumerate() {
            indices[(ti, slot)] = *idx as i64;
        }
    }
    Ok(PatchLabels { grid, k, indices })
}

/// Returns a copy of the sequence with its temporal order permuted; the
/// permutation is guaranteed not to be the identity. Labels are carried
/// over unchanged.
pub fn shuffle_sequence(seq: &Sequence, rng: &mut crate::rng::Rng) -> Sequence {
    let t = seq.t_len();
    assert!(t >= 2, "shuffle needs T >= 2");
    let mut perm: Vec<usize> = (0..t).collect();
    loop {
        // Fisher-Yates.
        for i in (1..t).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            break;
        }
    }
    let data = match &seq.data {
        SeqData::Video(v) => {
            let mut out = v.clone();
            for (dst, &src) in perm.iter().enumerate() {
                out.index_axis_mut(Axis(0), dst).assign(&v.index_axis(Axis(0), src));
            }
            SeqData::Video(out)
        }
        SeqData::Audio(a) => {
            let mut out = a.clone();
            for (dst, &src) in perm.iter().enumerate() {
                out.row_mut(dst).assign(&a.row(src));
            }
            SeqData::Audio(out)
        }
    };
    Sequence { data, ..seq.clone() }
}

/// Voiced/silent flag per segment: 1 iff the mean feature value of the
/// segment reaches the threshold.
pub fn volume_labels(features: &Array2<f32>, threshold: f32) -> Result<Vec<i64>> {
    if !threshold.is_finite() {
        return Err(Error::Precondition("volume threshold must be finite".into()));
    }
    Ok(features
        .rows()
        .into_iter()
        .map(|row| i64::from(row.mean().unwrap_or(0.0) >= threshold))
        .collect())
}

/// Uniformly samples an index different from `anchor` in `[0, batch)`.
pub fn negative_sample(batch: usize, anchor: usize, rng: &mut crate::rng::Rng) -> Result<usize> {
    if batch < 2 {
        return Err(Error::Precondition(format!("need a batch of >= 2, got {batch}")));
    }
    if anchor >= batch {
        return Err(Error::Precondition(format!(
            "anchor {anchor} out of range for batch {batch}"
        )));
    }
    let j = rng.gen_range(0..batch - 1);
    Ok(if j >= anchor { j + 1 } else { j })
}
