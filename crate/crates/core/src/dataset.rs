//! In-memory labelled dataset plus its on-disk format: a `dataset.manifest`
//! text file next to little-endian `pixels.f32`, `labels.u16`, `latents.f32`
//! and `noise.f32` blobs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Result, SpeError};
use crate::manifest::{
    join_list, read_f32_blob, read_u16_blob, write_f32_blob, write_u16_blob, Manifest,
};
use crate::rng;
use crate::synthetic::{Latent, SyntheticInstance, SyntheticSpec, NUM_CLASSES};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "dataset.manifest";
const INPUTS_FILE: &str = "pixels.f32";
const LABELS_FILE: &str = "labels.u16";
const LATENTS_FILE: &str = "latents.f32";
const NOISE_FILE: &str = "noise.f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    /// Rendered RGB images, HWC-interleaved.
    Pixels,
    /// Four summary values per instance.
    Features,
}

impl DataMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DataMode::Pixels => "pixels",
            DataMode::Features => "features",
        }
    }
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DataMode {
    type Err = SpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixels" => Ok(DataMode::Pixels),
            "features" => Ok(DataMode::Features),
            other => Err(SpeError::invalid(format!(
                "unknown data mode `{other}` (expected pixels or features)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-instance corruption applied at generation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseFlags {
    /// Per-pixel hue noise standard deviation in degrees, if any.
    pub hue_noise_std: Option<f64>,
    /// Leg length as a fraction of the full leg.
    pub leg_fraction: f64,
}

impl NoiseFlags {
    pub fn clean() -> Self {
        Self {
            hue_noise_std: None,
            leg_fraction: 1.0,
        }
    }

    pub fn is_noisy(&self) -> bool {
        self.hue_noise_std.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub mode: DataMode,
    pub seed: u64,
    pub input_dim: usize,
    /// Row-major `[len, input_dim]`.
    pub inputs: Vec<f32>,
    pub labels: Vec<u16>,
    pub latents: Vec<Latent>,
    pub noise: Vec<NoiseFlags>,
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

impl Dataset {
    /// Packs generated instances. Latents and noise parameters are kept at
    /// `f32` precision so that a saved dataset reloads bit-identically.
    pub fn from_synthetic(
        spec: SyntheticSpec,
        mode: DataMode,
        seed: u64,
        instances: Vec<SyntheticInstance>,
    ) -> Self {
        let input_dim = instances.first().map_or(0, |i| i.pixels.len());
        let mut ds = Dataset {
            spec,
            mode,
            seed,
            input_dim,
            inputs: Vec::with_capacity(input_dim * instances.len()),
            labels: Vec::with_capacity(instances.len()),
            latents: Vec::with_capacity(instances.len()),
            noise: Vec::with_capacity(instances.len()),
        };
        for inst in instances {
            ds.inputs.extend_from_slice(&inst.pixels);
            ds.labels.push(inst.label as u16);
            ds.latents.push(Latent {
                orientation: f32_round(inst.latent.orientation),
                hue: f32_round(inst.latent.hue),
            });
            ds.noise.push(NoiseFlags {
                hue_noise_std: inst.noise.hue_noise_std.map(f32_round),
                leg_fraction: f32_round(inst.noise.leg_fraction),
            });
        }
        ds
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Image layout for pixel datasets.
    pub fn image_shape(&self) -> Option<ImageShape> {
        (self.mode == DataMode::Pixels).then(|| self.spec.image_shape())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.spec.class_names()
    }

    /// Instance indices grouped by class, each in ascending order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l as usize].push(i);
        }
        groups
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(SpeError::invalid(format!(
                "index {bad} out of range for dataset of {}",
                self.len()
            )));
        }
        let mut out = Dataset {
            inputs: Vec::with_capacity(indices.len() * self.input_dim),
            labels: Vec::with_capacity(indices.len()),
            latents: Vec::with_capacity(indices.len()),
            noise: Vec::with_capacity(indices.len()),
            ..self.clone_header()
        };
        for &i in indices {
            out.inputs.extend_from_slice(self.input(i));
            out.labels.push(self.labels[i]);
            out.latents.push(self.latents[i]);
            out.noise.push(self.noise[i]);
        }
        Ok(out)
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            mode: self.mode,
            seed: self.seed,
            input_dim: self.input_dim,
            inputs: Vec::new(),
            labels: Vec::new(),
            latents: Vec::new(),
            noise: Vec::new(),
        }
    }

    /// Per-class shuffled split; `first_fraction` of each class goes to the
    /// first part, rounded to the nearest instance.
    pub fn stratified_split(&self, first_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&first_fraction) {
            return Err(SpeError::invalid("split fraction must lie in [0, 1]"));
        }
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (c, mut group) in self.class_indices().into_iter().enumerate() {
            group.shuffle(&mut rng::stream(seed, &[rng::TAG_SPLIT, c as u64]));
            let cut = (first_fraction * group.len() as f64).round() as usize;
            first.extend_from_slice(&group[..cut]);
            second.extend_from_slice(&group[cut..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        Ok((self.subset(&first)?, self.subset(&second)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let s = &self.spec;
        let mut m = Manifest::new();
        m.set("format_version", DATASET_FORMAT_VERSION)
            .set("mode", self.mode)
            .set("count", self.len())
            .set("input_dim", self.input_dim)
            .set("height", s.image_size)
            .set("width", s.image_size)
            .set("channels", 3)
            .set("seed", self.seed)
            .set("class_names", self.class_names().join(","))
            .set("image_size", s.image_size)
            .set("orientation_centers", join_list(&s.orientation_centers))
            .set("hue_centers", join_list(&s.hue_centers))
            .set("class_std", s.class_std)
            .set("noisy_fraction", s.noisy_fraction)
            .set(
                "hue_noise_std_range",
                join_list(&[s.hue_noise_std_range.0, s.hue_noise_std_range.1]),
            )
            .set(
                "leg_length_range",
                join_list(&[s.leg_length_range.0, s.leg_length_range.1]),
            )
            .set("saturation", s.saturation)
            .set("value", s.value)
            .set("bar_width", s.bar_width)
            .set("long_leg", s.long_leg)
            .set("short_leg", s.short_leg);
        m.write(&dir.join(MANIFEST_FILE))?;
        write_f32_blob(&dir.join(INPUTS_FILE), self.inputs.iter().copied())?;
        write_u16_blob(&dir.join(LABELS_FILE), self.labels.iter().copied())?;
        write_f32_blob(
            &dir.join(LATENTS_FILE),
            self.latents
                .iter()
                .flat_map(|l| [l.orientation as f32, l.hue as f32]),
        )?;
        write_f32_blob(
            &dir.join(NOISE_FILE),
            self.noise.iter().flat_map(|n| {
                [
                    n.hue_noise_std.map_or(f32::NAN, |v| v as f32),
                    n.leg_fraction as f32,
                ]
            }),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let m = Manifest::read(&dir.join(MANIFEST_FILE))?;
        let version: u32 = m.parse_value("format_version")?;
        if version != DATASET_FORMAT_VERSION {
            return Err(SpeError::Format(format!(
                "unsupported dataset format version {version}"
            )));
        }
        let pair = |key: &str| -> Result<(f64, f64)> {
            match m.parse_list::<f64>(key)?.as_slice() {
                &[a, b] => Ok((a, b)),
                _ => Err(SpeError::Format(format!("`{key}` must hold two values"))),
            }
        };
        let spec = SyntheticSpec {
            image_size: m.parse_value("image_size")?,
            orientation_centers: pair("orientation_centers")?.into(),
            hue_centers: pair("hue_centers")?.into(),
            class_std: m.parse_value("class_std")?,
            noisy_fraction: m.parse_value("noisy_fraction")?,
            hue_noise_std_range: pair("hue_noise_std_range")?,
            leg_length_range: pair("leg_length_range")?,
            saturation: m.parse_value("saturation")?,
            value: m.parse_value("value")?,
            bar_width: m.parse_value("bar_width")?,
            long_leg: m.parse_value("long_leg")?,
            short_leg: m.parse_value("short_leg")?,
        };
        spec.validate()?;
        let mode: DataMode = m.require("mode")?.parse()?;
        let count: usize = m.parse_value("count")?;
        let input_dim: usize = m.parse_value("input_dim")?;
        let expected_dim = match mode {
            DataMode::Pixels => spec.image_shape().len(),
            DataMode::Features => 4,
        };
        SpeError::dims(expected_dim, input_dim)?;

        let inputs = read_f32_blob(&dir.join(INPUTS_FILE), count * input_dim)?;
        let labels = read_u16_blob(&dir.join(LABELS_FILE), count)?;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(SpeError::Format(format!("label {bad} out of range")));
        }
        let latents = read_f32_blob(&dir.join(LATENTS_FILE), count * 2)?
            .chunks_exact(2)
            .map(|c| Latent {
                orientation: c[0] as f64,
                hue: c[1] as f64,
            })
            .collect();
        let noise = read_f32_blob(&dir.join(NOISE_FILE), count * 2)?
            .chunks_exact(2)
            .map(|c| NoiseFlags {
                hue_noise_std: (!c[0].is_nan()).then_some(c[0] as f64),
                leg_fraction: c[1] as f64,
            })
            .collect();
        Ok(Dataset {
            spec,
            mode,
            seed: m.parse_value("seed")?,
            input_dim,
            inputs,
            labels,
            latents,
            noise,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_dataset;

    fn small(mode: DataMode) -> Dataset {
        let spec = SyntheticSpec {
            image_size: 16,
            ..SyntheticSpec::default()
        };
        generate_dataset(&spec, 10, 3, mode).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        for mode in [DataMode::Pixels, DataMode::Features] {
            let ds = small(mode);
            let dir = tempfile::tempdir().unwrap();
            ds.save(dir.path()).unwrap();
            assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let ds = small(DataMode::Features);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let path = dir.path().join(LABELS_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            Dataset::load(dir.path()),
            Err(SpeError::Format(_))
        ));
    }

    #[test]
    fn stratified_split_keeps_class_balance() {
        let ds = small(DataMode::Features);
        let (a, b) = ds.stratified_split(0.8, 1).unwrap();
        assert_eq!((a.len(), b.len()), (32, 8));
        for c in 0..NUM_CLASSES {
            assert_eq!(a.class_indices()[c].len(), 8);
            assert_eq!(b.class_indices()[c].len(), 2);
        }
        let (a2, _) = ds.stratified_split(0.8, 1).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn subset_copies_rows() {
        let ds = small(DataMode::Features);
        let sub = ds.subset(&[5, 0]).unwrap();
        assert_eq!(sub.input(0), ds.input(5));
        assert_eq!(sub.label(1), ds.label(0));
        assert!(ds.subset(&[40]).is_err());
    }

    #[test]
    fn data_mode_parses() {
        assert_eq!("pixels".parse::<DataMode>().unwrap(), DataMode::Pixels);
        assert!("rgb".parse::<DataMode>().is_err());
    }
}
