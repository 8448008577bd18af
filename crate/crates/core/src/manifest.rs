//! `key = value` text manifests that accompany the binary blobs of saved
//! models and datasets.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SpeError};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `key`, replacing an existing value in place.
    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| SpeError::Format(format!("manifest is missing `{key}`")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| SpeError::Format(format!("cannot parse `{key}` value `{raw}`")))
    }

    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.require(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|item| {
                item.trim()
                    .parse()
                    .map_err(|_| SpeError::Format(format!("cannot parse `{key}` item `{item}`")))
            })
            .collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut manifest = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SpeError::Format(format!("manifest line {} has no `=`", lineno + 1))
            })?;
            manifest.set(k.trim(), v.trim());
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

pub fn write_f32_blob(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(f32::to_le_bytes).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a little-endian `f32` blob that must hold exactly `expected` values.
pub fn read_f32_blob(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(SpeError::Format(format!(
            "{} holds {} bytes, manifest implies {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_u16_blob(path: &Path, values: impl IntoIterator<Item = u16>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(u16::to_le_bytes).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_u16_blob(path: &Path, expected: usize) -> Result<Vec<u16>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expected * 2 {
        return Err(SpeError::Format(format!(
            "{} holds {} bytes, manifest implies {}",
            path.display(),
            bytes.len(),
            expected * 2
        )));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_preserves_order() {
        let mut m = Manifest::new();
        m.set("version", 1)
            .set("dims", join_list(&[3, 4]))
            .set("name", "a b");
        let parsed = Manifest::from_text(&m.to_text()).unwrap();
        assert_eq!(parsed, m);
        assert_eq!(parsed.parse_list::<usize>("dims").unwrap(), vec![3, 4]);
        assert!(parsed.parse_value::<usize>("name").is_err());
        assert!(parsed.require("missing").is_err());
    }

    #[test]
    fn blob_length_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f32");
        write_f32_blob(&path, [1.0, 2.5]).unwrap();
        assert_eq!(read_f32_blob(&path, 2).unwrap(), vec![1.0, 2.5]);
        assert!(read_f32_blob(&path, 3).is_err());
    }
}
