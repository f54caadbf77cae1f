//! Gaussian shift/scale perturbation of query boxes.
//!
//! Every draw is a pure function of `(seed, draw_index)`: the seed selects a ChaCha
//! key and the draw index selects the stream, so parallel evaluation stays
//! reproducible and every model sees the same perturbed boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GeometryError, Rect};

/// Smallest side length a perturbed box may shrink to.
pub const MIN_SIDE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Std-dev of the centroid offset, in frame fractions.
    pub sigma_shift: f64,
    /// Std-dev of the per-axis size factor around 1.
    pub sigma_area: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(sigma_shift: f64, sigma_area: f64, seed: u64) -> Result<Self, GeometryError> {
        if !(sigma_shift.is_finite() && sigma_area.is_finite())
            || sigma_shift < 0.0
            || sigma_area < 0.0
        {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self {
            sigma_shift,
            sigma_area,
            seed,
        })
    }

    pub fn identity() -> Self {
        Self {
            sigma_shift: 0.0,
            sigma_area: 0.0,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.sigma_shift == 0.0 && self.sigma_area == 0.0
    }

    /// Samples the four perturbation variables for one draw.
    pub fn draw(&self, draw_index: u64) -> PerturbationDraw {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(draw_index);
        let mut z = || -> f64 { rng.sample(StandardNormal) };
        let (zsx, zsy, zax, zay) = (z(), z(), z(), z());
        PerturbationDraw {
            shift_x: self.sigma_shift * zsx,
            shift_y: self.sigma_shift * zsy,
            scale_x: 1.0 + self.sigma_area * zax,
            scale_y: 1.0 + self.sigma_area * zay,
        }
    }
}

/// Normalizes an area std-dev given either as a fraction (`0.25`) or as a percentage
/// (`25`). Values above 1 are read as percentages.
pub fn normalize_sigma_area(value: f64) -> f64 {
    if value > 1.0 {
        value / 100.0
    } else {
        value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationDraw {
    pub shift_x: f64,
    pub shift_y: f64,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl PerturbationDraw {
    pub const IDENTITY: PerturbationDraw = PerturbationDraw {
        shift_x: 0.0,
        shift_y: 0.0,
        scale_x: 1.0,
        scale_y: 1.0,
    };

    /// Scales about the centroid, shifts, then translates back into the frame.
    pub fn apply(&self, b: &Rect) -> Rect {
        let (x1, x2) = perturb_axis(b.x1, b.x2, self.scale_x, self.shift_x);
        let (y1, y2) = perturb_axis(b.y1, b.y2, self.scale_y, self.shift_y);
        Rect { x1, y1, x2, y2 }
    }
}

fn perturb_axis(lo: f64, hi: f64, scale: f64, shift: f64) -> (f64, f64) {
    if scale == 1.0 && shift == 0.0 {
        return (lo, hi);
    }
    let len = ((hi - lo) * scale).clamp(MIN_SIDE, 1.0);
    let center = (lo + hi) / 2.0 + shift;
    let (lo, hi) = (center - len / 2.0, center + len / 2.0);
    if lo < 0.0 {
        (0.0, len)
    } else if hi > 1.0 {
        (1.0 - len, 1.0)
    } else {
        (lo, hi)
    }
}

pub fn perturb_box(b: &Rect, spec: &PerturbationSpec, draw_index: u64) -> Rect {
    if spec.is_identity() {
        return *b;
    }
    spec.draw(draw_index).apply(b)
}

/// Stable draw index for an annotation id, so perturbations are keyed by
/// `(annotation, seed)` and independent of iteration order.
pub fn draw_index_for(annotation_id: &str) -> u64 {
    let digest = Sha256::digest(annotation_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}
