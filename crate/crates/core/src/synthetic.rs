//! Four-class color/orientation 'L'-shape dataset.
//!
//! Classes form a 2×2 grid over (orientation, hue), with centers at 90° and
//! 180° on each axis. Instances draw each latent angle from a Gaussian with a
//! 30° standard deviation around their class center, so neighbouring classes
//! overlap and the best achievable accuracy is about 87%.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{DataMode, Dataset, ImageShape, NoiseFlags};
use crate::error::{Result, SpeError};
use crate::rng;

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Pixels per image side.
    pub image_size: usize,
    /// Orientation centers (degrees) for the two orientation groups.
    pub orientation_centers: [f64; 2],
    /// Hue centers (degrees) for the two hue groups.
    pub hue_centers: [f64; 2],
    /// Per-dimension standard deviation of the latent angles, in degrees.
    pub class_std: f64,
    /// Share of instances that receive hue and leg-length noise.
    pub noisy_fraction: f64,
    pub hue_noise_std_range: (f64, f64),
    pub leg_length_range: (f64, f64),
    pub saturation: f64,
    pub value: f64,
    /// Bar width, long leg and short leg as fractions of the image side.
    pub bar_width: f64,
    pub long_leg: f64,
    pub short_leg: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            orientation_centers: [90.0, 180.0],
            hue_centers: [90.0, 180.0],
            class_std: 30.0,
            noisy_fraction: 0.15,
            hue_noise_std_range: (18.0, 54.0),
            leg_length_range: (0.10, 0.98),
            saturation: 1.0,
            value: 1.0,
            bar_width: 0.08,
            long_leg: 0.60,
            short_leg: 0.40,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noisy_fraction) {
            return Err(SpeError::invalid("noisy_fraction must lie in [0, 1]"));
        }
        if self.image_size < 8 {
            return Err(SpeError::invalid("image_size must be at least 8"));
        }
        let (lo, hi) = self.leg_length_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(SpeError::invalid(
                "leg_length_range must satisfy 0 < lo <= hi <= 1",
            ));
        }
        let (lo, hi) = self.hue_noise_std_range;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(SpeError::invalid(
                "hue_noise_std_range must satisfy 0 <= lo <= hi",
            ));
        }
        Ok(())
    }

    /// `(orientation°, hue°)` center of `class`. Class `c` uses orientation
    /// group `c / 2` and hue group `c % 2`.
    pub fn class_center(&self, class: usize) -> (f64, f64) {
        (
            self.orientation_centers[class / 2],
            self.hue_centers[class % 2],
        )
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..NUM_CLASSES)
            .map(|c| {
                let (o, h) = self.class_center(c);
                format!("orient{o}_hue{h}")
            })
            .collect()
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape {
            height: self.image_size,
            width: self.image_size,
            channels: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latent {
    pub orientation: f64,
    pub hue: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    pub pixels: Vec<f32>,
    pub label: usize,
    pub latent: Latent,
    pub noise: NoiseFlags,
}

/// Angle reduced to `[0, 360)`.
pub fn wrap_degrees(a: f64) -> f64 {
    a.rem_euclid(360.0)
}

/// Shortest distance between two angles on the circle.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Draws a latent from `class`'s Gaussian with standard deviation `std`
/// (degrees) per axis, reduced mod 360.
pub fn sample_latent_with_std(
    spec: &SyntheticSpec,
    class: usize,
    std: f64,
    rng: &mut impl Rng,
) -> Latent {
    let (o, h) = spec.class_center(class);
    if std == 0.0 {
        return Latent {
            orientation: wrap_degrees(o),
            hue: wrap_degrees(h),
        };
    }
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    Latent {
        orientation: wrap_degrees(o + normal.sample(rng)),
        hue: wrap_degrees(h + normal.sample(rng)),
    }
}

pub fn sample_latent(spec: &SyntheticSpec, class: usize, rng: &mut impl Rng) -> Result<Latent> {
    if class >= NUM_CLASSES {
        return Err(SpeError::invalid(format!("class {class} out of range")));
    }
    Ok(sample_latent_with_std(spec, class, spec.class_std, rng))
}

/// RGB for a hue in degrees at the given saturation and value.
pub fn hsv_to_rgb(hue: f64, saturation: f64, value: f64) -> [f64; 3] {
    let h = wrap_degrees(hue) / 60.0;
    let c = value * saturation;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = value - c;
    [r + m, g + m, b + m]
}

/// Hue in degrees of an RGB triple; `None` for achromatic pixels.
pub fn rgb_to_hue(rgb: [f64; 3]) -> Option<f64> {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 {
        return None;
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    Some(wrap_degrees(h * 60.0))
}

/// Whether the pixel center `(px, py)` lies inside the L.
fn inside_l(spec: &SyntheticSpec, orientation: f64, leg_fraction: f64, px: f64, py: f64) -> bool {
    let side = spec.image_size as f64;
    let c = side / 2.0;
    // Image rows grow downwards; use a y-up frame so positive angles turn
    // counter-clockwise on screen.
    let (x, y) = (px - c, c - py);
    let (sin, cos) = orientation.to_radians().sin_cos();
    let lx = cos * x + sin * y;
    let ly = -sin * x + cos * y;
    let (long, short, width) = (
        spec.long_leg * side,
        spec.short_leg * side,
        spec.bar_width * side,
    );
    let (cx, cy) = (-0.5 * long, -0.5 * short);
    let (dx, dy) = (lx - cx, ly - cy);
    let long_bar = dx >= 0.0 && dx <= long * leg_fraction && dy >= 0.0 && dy <= width;
    let short_bar = dx >= 0.0 && dx <= width && dy >= 0.0 && dy <= short * leg_fraction;
    long_bar || short_bar
}

/// In-shape mask of a render, row-major.
pub fn shape_mask(spec: &SyntheticSpec, orientation: f64, leg_fraction: f64) -> Vec<bool> {
    let n = spec.image_size;
    (0..n * n)
        .map(|i| {
            inside_l(
                spec,
                orientation,
                leg_fraction,
                (i % n) as f64 + 0.5,
                (i / n) as f64 + 0.5,
            )
        })
        .collect()
}

/// Renders an 'L' of the given hue rotated by `orientation` about the image
/// center on a black background. Returns interleaved RGB in `[0, 1]`.
///
/// When `hue_noise_std` is set, every in-shape pixel's hue gets independent
/// Gaussian noise of that standard deviation (degrees).
pub fn render(
    spec: &SyntheticSpec,
    orientation: f64,
    hue: f64,
    leg_fraction: f64,
    hue_noise_std: Option<f64>,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    if !orientation.is_finite() || !hue.is_finite() {
        return Err(SpeError::invalid("render angles must be finite"));
    }
    if !(leg_fraction > 0.0 && leg_fraction <= 1.0) {
        return Err(SpeError::invalid(format!(
            "leg_fraction must lie in (0, 1], got {leg_fraction}"
        )));
    }
    let noise = match hue_noise_std {
        Some(std) if std > 0.0 => {
            Some(Normal::new(0.0, std).map_err(|e| SpeError::invalid(e.to_string()))?)
        }
        _ => None,
    };
    let base = hsv_to_rgb(hue, spec.saturation, spec.value);
    let mask = shape_mask(spec, orientation, leg_fraction);
    let mut pixels = vec![0.0f32; mask.len() * 3];
    for (i, inside) in mask.into_iter().enumerate() {
        if !inside {
            continue;
        }
        let rgb = match &noise {
            Some(n) => hsv_to_rgb(hue + n.sample(rng), spec.saturation, spec.value),
            None => base,
        };
        for ch in 0..3 {
            pixels[i * 3 + ch] = rgb[ch] as f32;
        }
    }
    Ok(pixels)
}

/// Compact 4-value description used in feature mode: the orientation and hue
/// unit vectors, shrunk the way a circular mean over the rendered pixels would
/// be. Shorter legs scale both vectors by the leg fraction; hue noise with
/// standard deviation σ scales the hue vector by `exp(-σ²/2)` (σ in radians).
pub fn feature_vector(latent: Latent, noise: &NoiseFlags) -> [f32; 4] {
    let (so, co) = latent.orientation.to_radians().sin_cos();
    let (sh, ch) = latent.hue.to_radians().sin_cos();
    let hue_shrink = noise
        .hue_noise_std
        .map_or(1.0, |s| (-0.5 * s.to_radians().powi(2)).exp());
    let leg = noise.leg_fraction;
    [
        (co * leg) as f32,
        (so * leg) as f32,
        (ch * leg * hue_shrink) as f32,
        (sh * leg * hue_shrink) as f32,
    ]
}

/// Generates `per_class_count` instances of each class.
///
/// Labels are assigned in class-major blocks. Exactly
/// `round(noisy_fraction * total)` instances, chosen uniformly, receive hue
/// noise with std `~ U(hue_noise_std_range)` and leg fraction
/// `~ U(leg_length_range)`; all others are rendered clean with full legs.
/// Every instance draws from its own stream derived from `seed`, so the output
/// does not depend on the number of worker threads.
pub fn generate_dataset(
    spec: &SyntheticSpec,
    per_class_count: usize,
    seed: u64,
    mode: DataMode,
) -> Result<Dataset> {
    spec.validate()?;
    if per_class_count == 0 {
        return Err(SpeError::invalid("per_class_count must be at least 1"));
    }
    let total = per_class_count * NUM_CLASSES;
    let noisy_count = (spec.noisy_fraction * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::TAG_NOISY_SUBSET]));
    let mut noisy = vec![false; total];
    for &i in &order[..noisy_count] {
        noisy[i] = true;
    }

    let instances: Vec<SyntheticInstance> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::TAG_INSTANCE, i as u64]);
            let label = i / per_class_count;
            let latent = sample_latent_with_std(spec, label, spec.class_std, &mut r);
            let noise = if noisy[i] {
                let (hlo, hhi) = spec.hue_noise_std_range;
                let (llo, lhi) = spec.leg_length_range;
                NoiseFlags {
                    hue_noise_std: Some(r.random_range(hlo..=hhi)),
                    leg_fraction: r.random_range(llo..=lhi),
                }
            } else {
                NoiseFlags::clean()
            };
            let pixels = match mode {
                DataMode::Pixels => render(
                    spec,
                    latent.orientation,
                    latent.hue,
                    noise.leg_fraction,
                    noise.hue_noise_std,
                    &mut r,
                )?,
                DataMode::Features => feature_vector(latent, &noise).to_vec(),
            };
            Ok(SyntheticInstance {
                pixels,
                label,
                latent,
                noise,
            })
        })
        .collect::<Result<_>>()?;

    Ok(Dataset::from_synthetic(spec.clone(), mode, seed, instances))
}

/// Bayes posterior over the four classes for a latent, using circular
/// distances to the class centers and equal priors.
pub fn bayes_classify(latent: Latent, spec: &SyntheticSpec) -> [f64; NUM_CLASSES] {
    let var = spec.class_std * spec.class_std;
    let mut logp = [0.0; NUM_CLASSES];
    for (c, lp) in logp.iter_mut().enumerate() {
        let (o, h) = spec.class_center(c);
        let d_o = circular_distance(latent.orientation, o);
        let d_h = circular_distance(latent.hue, h);
        *lp = -(d_o * d_o + d_h * d_h) / (2.0 * var);
    }
    let norm = crate::autodiff::log_sum_exp(&logp);
    logp.map(|l| (l - norm).exp())
}

/// Circular mean hue (degrees) over the chromatic pixels of an RGB image.
pub fn mean_pixel_hue(pixels: &[f32]) -> Option<f64> {
    let (mut s, mut c, mut n) = (0.0, 0.0, 0usize);
    for px in pixels.chunks_exact(3) {
        if let Some(h) = rgb_to_hue([px[0] as f64, px[1] as f64, px[2] as f64]) {
            let (sh, ch) = h.to_radians().sin_cos();
            s += sh;
            c += ch;
            n += 1;
        }
    }
    (n > 0).then(|| wrap_degrees(s.atan2(c).to_degrees()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_std_latent_is_class_center() {
        let spec = SyntheticSpec::default();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for c in 0..NUM_CLASSES {
            let l = sample_latent_with_std(&spec, c, 0.0, &mut r);
            assert_eq!((l.orientation, l.hue), spec.class_center(c));
        }
        assert!(sample_latent(&spec, 4, &mut r).is_err());
    }

    #[test]
    fn opposite_corners_differ_by_ninety_degrees() {
        let spec = SyntheticSpec::default();
        let (o0, h0) = spec.class_center(0);
        let (o3, h3) = spec.class_center(3);
        assert_eq!((o3 - o0, h3 - h0), (90.0, 90.0));
    }

    #[test]
    fn latent_std_is_thirty_degrees() {
        let spec = SyntheticSpec::default();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        for class in [0, 3] {
            let (co, ch) = spec.class_center(class);
            let draws: Vec<Latent> = (0..n)
                .map(|_| sample_latent(&spec, class, &mut r).unwrap())
                .collect();
            // Centers sit far from the 0/360 seam, so plain moments are fine.
            for (get, center) in [
                (
                    Box::new(|l: &Latent| l.orientation) as Box<dyn Fn(&Latent) -> f64>,
                    co,
                ),
                (Box::new(|l: &Latent| l.hue), ch),
            ] {
                let dev: Vec<f64> = draws
                    .iter()
                    .map(|l| {
                        let d = get(l) - center;
                        if d > 180.0 {
                            d - 360.0
                        } else if d < -180.0 {
                            d + 360.0
                        } else {
                            d
                        }
                    })
                    .collect();
                let mean = dev.iter().sum::<f64>() / n as f64;
                let std =
                    (dev.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
                assert!((std - 30.0).abs() < 1.0, "std {std}");
            }
        }
    }

    #[test]
    fn hsv_round_trip() {
        for h in [0.0, 45.0, 90.0, 135.0, 180.0, 250.0, 359.0] {
            let rgb = hsv_to_rgb(h, 1.0, 1.0);
            assert!(circular_distance(rgb_to_hue(rgb).unwrap(), h) < 1e-9);
        }
        assert_eq!(rgb_to_hue([0.0, 0.0, 0.0]), None);
    }

    #[test]
    fn clean_render_is_deterministic_and_circular() {
        let spec = SyntheticSpec::default();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a = render(&spec, 100.0, 130.0, 1.0, None, &mut r).unwrap();
        let b = render(&spec, 100.0, 130.0, 1.0, None, &mut r).unwrap();
        assert_eq!(a, b);
        let c = render(&spec, 460.0, 130.0, 1.0, None, &mut r).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.len(), 64 * 64 * 3);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(render(&spec, 0.0, 0.0, 0.0, None, &mut r).is_err());
    }

    #[test]
    fn orientation_changes_the_mask() {
        let spec = SyntheticSpec::default();
        let m90 = shape_mask(&spec, 90.0, 1.0);
        let m180 = shape_mask(&spec, 180.0, 1.0);
        assert_ne!(m90, m180);
        let area = |m: &[bool]| m.iter().filter(|&&b| b).count();
        // Rotating by a multiple of 90° preserves the pixel area exactly.
        assert_eq!(area(&m90), area(&m180));
        assert!(area(&shape_mask(&spec, 90.0, 0.1)) < area(&m90) / 3);
    }

    #[test]
    fn noisy_render_keeps_mean_hue() {
        let spec = SyntheticSpec::default();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let px = render(&spec, 135.0, 120.0, 1.0, Some(18.0), &mut r).unwrap();
        let inside = px
            .chunks_exact(3)
            .filter(|p| p.iter().any(|&v| v > 0.0))
            .count();
        assert!(inside >= 300, "{inside} shape pixels");
        let mean = mean_pixel_hue(&px).unwrap();
        assert!(circular_distance(mean, 120.0) < 2.0, "{mean}");
    }

    #[test]
    fn clean_render_recovers_latent_hue() {
        let spec = SyntheticSpec::default();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let l = sample_latent(&spec, r.random_range(0..4), &mut r).unwrap();
            let px = render(&spec, l.orientation, l.hue, 1.0, None, &mut r).unwrap();
            assert!(circular_distance(mean_pixel_hue(&px).unwrap(), l.hue) < 3.0);
        }
    }

    #[test]
    fn bayes_classifier_properties() {
        let spec = SyntheticSpec::default();
        for c in 0..NUM_CLASSES {
            let (o, h) = spec.class_center(c);
            let p = bayes_classify(
                Latent {
                    orientation: o,
                    hue: h,
                },
                &spec,
            );
            assert_eq!(crate::sampler::argmax(&p), c);
        }
        let p = bayes_classify(
            Latent {
                orientation: 135.0,
                hue: 135.0,
            },
            &spec,
        );
        for v in p {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn dataset_counts_and_noise_share() {
        let spec = SyntheticSpec::default();
        let ds = generate_dataset(&spec, 100, 11, DataMode::Features).unwrap();
        assert_eq!(ds.len(), 400);
        assert_eq!(
            ds.noise
                .iter()
                .filter(|n| n.hue_noise_std.is_some())
                .count(),
            60
        );
        for c in 0..NUM_CLASSES {
            assert_eq!(ds.labels.iter().filter(|&&l| l as usize == c).count(), 100);
        }
        for n in &ds.noise {
            match n.hue_noise_std {
                Some(s) => {
                    assert!((18.0..=54.0).contains(&s));
                    assert!((0.10..=0.98).contains(&n.leg_fraction));
                }
                None => assert_eq!(n.leg_fraction, 1.0),
            }
        }
        let again = generate_dataset(&spec, 100, 11, DataMode::Features).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn generation_is_thread_count_independent() {
        let spec = SyntheticSpec {
            image_size: 16,
            ..SyntheticSpec::default()
        };
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let three = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let a = one.install(|| generate_dataset(&spec, 20, 5, DataMode::Pixels).unwrap());
        let b = three.install(|| generate_dataset(&spec, 20, 5, DataMode::Pixels).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn feature_vector_shrinks_with_noise() {
        let l = Latent {
            orientation: 90.0,
            hue: 180.0,
        };
        let clean = feature_vector(l, &NoiseFlags::clean());
        assert!((clean[1] - 1.0).abs() < 1e-6 && (clean[2] + 1.0).abs() < 1e-6);
        let noisy = feature_vector(
            l,
            &NoiseFlags {
                hue_noise_std: Some(54.0),
                leg_fraction: 0.5,
            },
        );
        assert!((noisy[1] - 0.5).abs() < 1e-6);
        assert!(noisy[2].abs() < 0.5 * 0.7);
    }
}
