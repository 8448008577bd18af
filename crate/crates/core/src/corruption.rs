//! Rectangle occlusion for support and query corruption.
//!
//! An image is tiled into square units of `unit_size` pixels. Each unit that
//! is selected for corruption gets one rectangle with side lengths drawn
//! uniformly from `{0, …, unit_size}` and a corner drawn so that the rectangle
//! stays inside the unit. A zero side length leaves the unit untouched.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dataset::ImageShape;
use crate::error::{Result, SpeError};

pub const DEFAULT_CORRUPTION_PROBABILITY: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionMode {
    Clean,
    Corrupt,
}

impl OcclusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            OcclusionMode::Clean => "clean",
            OcclusionMode::Corrupt => "corrupt",
        }
    }
}

impl fmt::Display for OcclusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OcclusionMode {
    type Err = SpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(OcclusionMode::Clean),
            "corrupt" => Ok(OcclusionMode::Corrupt),
            other => Err(SpeError::invalid(format!(
                "unknown occlusion mode `{other}` (expected clean or corrupt)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionPolicy {
    pub per_unit_probability: f64,
    pub unit_size: usize,
    pub mode: OcclusionMode,
}

/// A blacked-out rectangle in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

impl OcclusionPolicy {
    pub fn clean(unit_size: usize) -> Self {
        Self {
            per_unit_probability: 0.0,
            unit_size,
            mode: OcclusionMode::Clean,
        }
    }

    /// Training-style corruption: each unit independently with probability 0.2.
    pub fn training(unit_size: usize) -> Self {
        Self {
            per_unit_probability: DEFAULT_CORRUPTION_PROBABILITY,
            unit_size,
            mode: OcclusionMode::Corrupt,
        }
    }

    /// Test-style corrupt set: every unit is occluded.
    pub fn corrupt_all(unit_size: usize) -> Self {
        Self {
            per_unit_probability: 1.0,
            unit_size,
            mode: OcclusionMode::Corrupt,
        }
    }

    pub fn validate(&self, shape: Option<ImageShape>) -> Result<()> {
        if !(0.0..=1.0).contains(&self.per_unit_probability) {
            return Err(SpeError::invalid(
                "occlusion probability must lie in [0, 1]",
            ));
        }
        if self.mode == OcclusionMode::Clean {
            return Ok(());
        }
        let Some(shape) = shape else {
            return Err(SpeError::invalid(
                "occlusion needs pixel inputs; feature-mode data cannot be occluded",
            ));
        };
        if self.unit_size == 0 {
            return Err(SpeError::invalid("occlusion unit_size must be positive"));
        }
        if shape.height < self.unit_size || shape.width < self.unit_size {
            return Err(SpeError::invalid(format!(
                "occlusion unit {} exceeds image {}x{}",
                self.unit_size, shape.height, shape.width
            )));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.mode == OcclusionMode::Corrupt && self.per_unit_probability > 0.0
    }
}

/// Draws the rectangle for one unit, in unit-local coordinates.
pub fn sample_rect(unit_size: usize, rng: &mut impl Rng) -> Rect {
    let height = rng.random_range(0..=unit_size);
    let width = rng.random_range(0..=unit_size);
    let top = rng.random_range(0..=unit_size - height);
    let left = rng.random_range(0..=unit_size - width);
    Rect {
        top,
        left,
        height,
        width,
    }
}

/// Sets every channel of the pixels under `rect` to zero.
pub fn apply_rect(image: &mut [f32], shape: ImageShape, rect: Rect) {
    for row in rect.top..rect.top + rect.height {
        let start = (row * shape.width + rect.left) * shape.channels;
        let end = start + rect.width * shape.channels;
        image[start..end].fill(0.0);
    }
}

/// Occludes `image` in place according to `policy` and returns the rectangles
/// that were drawn (including empty ones), in image coordinates.
pub fn occlude(
    image: &mut [f32],
    shape: ImageShape,
    policy: &OcclusionPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<Rect>> {
    SpeError::dims(shape.len(), image.len())?;
    if !policy.is_active() {
        return Ok(Vec::new());
    }
    policy.validate(Some(shape))?;
    let u = policy.unit_size;
    let mut rects = Vec::new();
    for unit_row in 0..shape.height / u {
        for unit_col in 0..shape.width / u {
            if policy.per_unit_probability < 1.0 && !rng.random_bool(policy.per_unit_probability) {
                continue;
            }
            let local = sample_rect(u, rng);
            let rect = Rect {
                top: unit_row * u + local.top,
                left: unit_col * u + local.left,
                ..local
            };
            apply_rect(image, shape, rect);
            rects.push(rect);
        }
    }
    Ok(rects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SHAPE: ImageShape = ImageShape {
        height: 28,
        width: 28,
        channels: 3,
    };

    #[test]
    fn clean_mode_is_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let original: Vec<f32> = (0..SHAPE.len()).map(|i| i as f32).collect();
        let mut img = original.clone();
        let rects = occlude(&mut img, SHAPE, &OcclusionPolicy::clean(28), &mut r).unwrap();
        assert!(rects.is_empty());
        assert_eq!(img, original);
    }

    #[test]
    fn only_rectangle_pixels_change() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let policy = OcclusionPolicy::corrupt_all(28);
        for _ in 0..200 {
            let mut img = vec![1.0f32; SHAPE.len()];
            let rects = occlude(&mut img, SHAPE, &policy, &mut r).unwrap();
            assert_eq!(rects.len(), 1);
            let rect = rects[0];
            let zeros = img.iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, rect.area() * 3);
            for row in 0..28 {
                for col in 0..28 {
                    let inside = row >= rect.top
                        && row < rect.top + rect.height
                        && col >= rect.left
                        && col < rect.left + rect.width;
                    assert_eq!(img[(row * 28 + col) * 3] == 0.0, inside);
                }
            }
        }
    }

    #[test]
    fn maximal_rect_blacks_out_unit() {
        let mut img = vec![1.0f32; SHAPE.len()];
        apply_rect(
            &mut img,
            SHAPE,
            Rect {
                top: 0,
                left: 0,
                height: 28,
                width: 28,
            },
        );
        assert!(img.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_occluded_fraction_is_a_quarter() {
        // E[L]² / 28² with L uniform on {0..28}.
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let total: usize = (0..n).map(|_| sample_rect(28, &mut r).area()).sum();
        let frac = total as f64 / (n as f64 * 784.0);
        assert!((frac - 0.25).abs() < 0.01, "{frac}");
    }

    #[test]
    fn training_policy_corrupts_about_a_fifth_of_units() {
        let shape = ImageShape {
            height: 64,
            width: 64,
            channels: 3,
        };
        let policy = OcclusionPolicy::training(16);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut hits = 0;
        let trials = 2000;
        for _ in 0..trials {
            let mut img = vec![1.0f32; shape.len()];
            hits += occlude(&mut img, shape, &policy, &mut r).unwrap().len();
        }
        let rate = hits as f64 / (trials * 16) as f64;
        assert!((rate - 0.2).abs() < 0.01, "{rate}");
    }

    #[test]
    fn policy_validation() {
        let small = ImageShape {
            height: 16,
            width: 16,
            channels: 3,
        };
        assert!(OcclusionPolicy::corrupt_all(28)
            .validate(Some(small))
            .is_err());
        assert!(OcclusionPolicy::corrupt_all(28).validate(None).is_err());
        assert!(OcclusionPolicy::clean(28).validate(None).is_ok());
        assert_eq!(
            "corrupt".parse::<OcclusionMode>().unwrap(),
            OcclusionMode::Corrupt
        );
    }
}
