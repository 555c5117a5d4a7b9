//! Electrode layouts: ordered channel names with head-centered unit-sphere
//! coordinates, loaded from CSV.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MontageError {
    #[error("montage I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("montage line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("montage has no electrodes")]
    Empty,
    #[error("duplicate electrode name '{0}'")]
    DuplicateName(String),
    #[error("electrode '{0}' has degenerate coordinates: {1}")]
    Degenerate(String, String),
    #[error("electrodes '{0}' and '{1}' are closer than 1e-6")]
    TooClose(String, String),
}

/// Ordered electrode set. Coordinates are dimensionless, |P_i| <= 1.2.
#[derive(Clone, Debug, PartialEq)]
pub struct Montage {
    names: Vec<String>,
    coords: Tensor, // [C, 3]
}

impl Montage {
    pub fn new(names: Vec<String>, coords: Tensor) -> Result<Self, MontageError> {
        if names.is_empty() {
            return Err(MontageError::Empty);
        }
        assert_eq!(coords.shape(), &[names.len(), 3], "one coordinate row per name");
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(MontageError::DuplicateName(n.clone()));
            }
            let p = &coords.data()[i * 3..i * 3 + 3];
            if !p.iter().all(|v| v.is_finite()) {
                return Err(MontageError::Degenerate(n.clone(), format!("{p:?}")));
            }
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if norm > 1.2 {
                return Err(MontageError::Degenerate(
                    n.clone(),
                    format!("|P| = {norm:.3} > 1.2"),
                ));
            }
        }
        for i in 0..names.len() {
            for j in i + 1..names.len() {
                let a = &coords.data()[i * 3..i * 3 + 3];
                let b = &coords.data()[j * 3..j * 3 + 3];
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                if d2 < 1e-12 {
                    return Err(MontageError::TooClose(names[i].clone(), names[j].clone()));
                }
            }
        }
        Ok(Montage { names, coords })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn coord(&self, i: usize) -> [f64; 3] {
        let p = &self.coords.data()[i * 3..i * 3 + 3];
        [p[0], p[1], p[2]]
    }

    /// Parse CSV text. Header `name,x,y,z`; the variant `name,x,y,z,normalize`
    /// rescales every row onto the unit sphere on load.
    pub fn parse(text: &str) -> Result<Self, MontageError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(MontageError::Empty)?;
        let normalize = match header.trim() {
            "name,x,y,z" => false,
            "name,x,y,z,normalize" => true,
            other => {
                return Err(MontageError::Parse {
                    line: 1,
                    reason: format!("unexpected header '{other}'"),
                })
            }
        };
        let mut names = Vec::new();
        let mut coords = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(MontageError::Parse {
                    line: i + 1,
                    reason: format!("expected 4 fields, got {}", parts.len()),
                });
            }
            let mut p = [0.0f64; 3];
            for (k, raw) in parts[1..].iter().enumerate() {
                p[k] = raw.trim().parse().map_err(|e| MontageError::Parse {
                    line: i + 1,
                    reason: format!("bad coordinate '{raw}': {e}"),
                })?;
            }
            if normalize {
                let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                if norm < 1e-9 {
                    return Err(MontageError::Degenerate(
                        parts[0].to_string(),
                        "zero-length coordinate cannot be normalized".into(),
                    ));
                }
                for v in &mut p {
                    *v /= norm;
                }
            }
            names.push(parts[0].to_string());
            coords.extend_from_slice(&p);
        }
        let c = names.len();
        if c == 0 {
            return Err(MontageError::Empty);
        }
        Montage::new(names, Tensor::new(&[c, 3], coords))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MontageError> {
        Montage::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,x,y,z\n");
        for (i, n) in self.names.iter().enumerate() {
            let p = self.coord(i);
            // `{}` prints the shortest exactly-round-tripping decimal
            let _ = writeln!(out, "{},{},{},{}", n, p[0], p[1], p[2]);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MontageError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Bundled layouts, compiled into the binary.
pub mod bundled {
    use super::Montage;

    pub const STANDARD_16: &str = include_str!("../assets/montage_1020_16.csv");
    pub const STANDARD_22: &str = include_str!("../assets/montage_1020_22.csv");
    pub const DENSE_64: &str = include_str!("../assets/montage_1010_64.csv");
    pub const CONSUMER_14: &str = include_str!("../assets/montage_consumer_14.csv");

    /// Look a bundled montage up by short name (16 | 22 | 64 | 14).
    pub fn by_name(name: &str) -> Option<Montage> {
        let text = match name {
            "16" | "standard16" => STANDARD_16,
            "22" | "standard22" => STANDARD_22,
            "64" | "dense64" => DENSE_64,
            "14" | "consumer14" => CONSUMER_14,
            _ => return None,
        };
        Some(Montage::parse(text).expect("bundled montage is valid"))
    }
}
