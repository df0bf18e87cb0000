//! Procedural moving-shape video sequences.
//!
//! Each sequence shows one (optionally two) filled shapes translating with
//! constant integer velocity and bouncing off the frame border. The static
//! factor is the shape identity (silhouette + intensity); the dynamic factor
//! is the per-frame motion direction, quantized to 8 compass bins. Motion is
//! integer-valued, so the rendered mass translates exactly and the direction
//! can be recovered from pixel centroids without ambiguity.

use super::{DataKind, Dataset, DatasetManifest, SeqData, Sequence};
use crate::error::{Error, Result};
use crate::rng;
use ndarray::Array4;
use rand::Rng as _;
use rayon::prelude::*;

/// The 8 motion direction bins: E, NE, N, NW, W, SW, S, SE as unit
/// `(dcol, drow)` patterns with rows growing downward. Velocities are
/// `speed * DIRECTIONS[bin]`.
pub const DIRECTIONS: [(i64, i64); 8] = [
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Quantizes a displacement to the nearest compass bin. `drow` grows
/// downward (image coordinates).
pub fn quantize_direction(dcol: f64, drow: f64) -> usize {
    let angle = (-drow).atan2(dcol);
    let step = std::f64::consts::FRAC_PI_4;
    (((angle / step).round() as i64).rem_euclid(8)) as usize
}

#[derive(Debug, Clone)]
pub struct ShapesSpec {
    pub count: usize,
    pub t: usize,
    pub size: usize,
    pub num_identities: usize,
    pub seed: u64,
    /// Pixels moved per frame along each active axis.
    pub speed: usize,
    /// Adds a second, independently moving object of the same identity.
    pub two_objects: bool,
}

impl ShapesSpec {
    pub fn new(count: usize, t: usize, size: usize, num_identities: usize, seed: u64) -> Self {
        ShapesSpec { count, t, size, num_identities, seed, speed: 4, two_objects: false }
    }
}

/// Generates a moving-shapes dataset. Deterministic for a fixed spec.
pub fn generate_shapes(spec: &ShapesSpec) -> Result<Dataset> {
    if spec.size < 16 {
        return Err(Error::Config(format!("frame size {} too small (need >= 16)", spec.size)));
    }
    if spec.t < 2 {
        return Err(Error::Config(format!("sequence length {} too short (need >= 2)", spec.t)));
    }
    if spec.num_identities < 2 {
        return Err(Error::Config("need at least 2 identities".into()));
    }
    if spec.count < 1 {
        return Err(Error::Config("need at least one sequence".into()));
    }
    if spec.speed < 1 {
        return Err(Error::Config("speed must be at least 1 pixel per frame".into()));
    }

    let sequences: Vec<Sequence> = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let identity = (i % spec.num_identities) as i64;
            generate_one(spec, i, identity)
        })
        .collect();

    let manifest = DatasetManifest {
        kind: DataKind::Shapes,
        count: spec.count,
        t: spec.t,
        c: 1,
        h: spec.size,
        w: spec.size,
        f: 0,
        num_static_classes: spec.num_identities,
        num_dynamic_classes: 8,
        seed: spec.seed,
    };
    let ds = Dataset { manifest, sequences };
    ds.validate()?;
    Ok(ds)
}

fn generate_one(spec: &ShapesSpec, index: usize, identity: i64) -> Sequence {
    let mut rng = rng::derive(spec.seed, &format!("shapes-{index}"));
    let size = spec.size;
    let mask_px = shape_mask_size(size);
    let bound = (size - mask_px) as i64;
    let mask = shape_mask(identity as usize % 4, mask_px);
    let intensity = identity_intensity(identity as usize, spec.num_identities);

    let speed = spec.speed.min(bound as usize).max(1) as i64;
    let n_obj = if spec.two_objects { 2 } else { 1 };
    let mut pos: Vec<(i64, i64)> = Vec::new();
    let mut vel: Vec<(i64, i64)> = Vec::new();
    for _ in 0..n_obj {
        pos.push((rng.gen_range(0..=bound), rng.gen_range(0..=bound)));
        let (dx, dy) = DIRECTIONS[rng.gen_range(0..8usize)];
        vel.push((dx * speed, dy * speed));
    }

    let mut frames = Array4::<f32>::zeros((spec.t, 1, size, size));
    let mut labels = vec![0i64; spec.t];
    for t in 0..spec.t {
        if t > 0 {
            for o in 0..n_obj {
                let (mut vx, mut vy) = vel[o];
                let (x, y) = pos[o];
                if x + vx < 0 || x + vx > bound {
                    vx = -vx;
                }
                if y + vy < 0 || y + vy > bound {
                    vy = -vy;
                }
                vel[o] = (vx, vy);
                pos[o] = (x + vx, y + vy);
            }
            labels[t] = quantize_direction(vel[0].0 as f64, vel[0].1 as f64) as i64;
        }
        for o in 0..n_obj {
            draw(&mut frames, t, &mask, pos[o], intensity);
        }
    }
    // Frame 0 has no displacement of its own; it carries frame 1's label so
    // every timestep has a well-defined target.
    labels[0] = labels[1];

    Sequence {
        data: SeqData::Video(frames),
        static_label: identity,
        dynamic_labels: labels,
        seed: spec.seed.wrapping_add(index as u64),
    }
}

fn draw(frames: &mut Array4<f32>, t: usize, mask: &ndarray::Array2<f32>, pos: (i64, i64), intensity: f32) {
    let (px, py) = (pos.0 as usize, pos.1 as usize);
    for ((my, mx), &m) in mask.indexed_iter() {
        if m > 0.0 {
            let cell = &mut frames[(t, 0, py + my, px + mx)];
            *cell = cell.max(m * intensity);
        }
    }
}

fn shape_mask_size(size: usize) -> usize {
    let s = (size * 28) / 100;
    let s = s.max(5);
    if s % 2 == 0 {
        s + 1
    } else {
        s
    }
}

fn identity_intensity(identity: usize, num_identities: usize) -> f32 {
    let tiers = num_identities.div_ceil(4);
    let tier = identity / 4;
    if tiers <= 1 {
        1.0
    } else {
        1.0 - 0.5 * tier as f32 / (tiers - 1) as f32
    }
}

/// Binary silhouette of one of the four base shapes, in an `s x s` box.
fn shape_mask(kind: usize, s: usize) -> ndarray::Array2<f32> {
    let mut m = ndarray::Array2::<f32>::zeros((s, s));
    let c = (s as f32 - 1.0) / 2.0;
    match kind {
        // disk
        0 => {
            let r = s as f32 / 2.0 - 0.35;
            for ((y, x), v) in m.indexed_iter_mut() {
                let (dy, dx) = (y as f32 - c, x as f32 - c);
                if dy * dy + dx * dx <= r * r {
                    *v = 1.0;
                }
            }
        }
        // square
        1 => m.fill(1.0),
        // upward triangle
        2 => {
            for ((y, x), v) in m.indexed_iter_mut() {
                let half = (y as f32 + 1.0) / (s as f32) * (s as f32 / 2.0);
                if (x as f32 - c).abs() <= half {
                    *v = 1.0;
                }
            }
        }
        // plus sign
        _ => {
            let arm = (s as f32 / 6.0).max(1.0);
            for ((y, x), v) in m.indexed_iter_mut() {
                if (y as f32 - c).abs() <= arm || (x as f32 - c).abs() <= arm {
                    *v = 1.0;
                }
            }
        }
    }
    m
}
