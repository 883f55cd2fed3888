//! Soundings, coordinates and site datasets.

use serde::{Deserialize, Serialize};

use crate::error::{GeoWarpError, Result};

/// Location of a single measurement: `D` horizontal coordinates plus depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub s: Vec<f64>,
    pub h: f64,
}

impl Coordinate {
    pub fn new(s: &[f64], h: f64) -> Self {
        Self { s: s.to_vec(), h }
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }

    /// Packs the coordinate into the internal `[s_1, .., s_D, h]` layout.
    pub(crate) fn to_u(&self) -> [f64; 3] {
        let mut u = [0.0; 3];
        u[..self.s.len()].copy_from_slice(&self.s);
        u[self.s.len()] = self.h;
        u
    }
}

/// Index of the depth bin `[k w, (k+1) w)` containing `h`. A relative
/// tolerance keeps depths written as exact multiples of `w` in the upper bin.
pub fn depth_bin(h: f64, width: f64) -> i64 {
    (h / width + 1e-9).floor() as i64
}

/// One CPT column: a fixed horizontal location and a depth-ordered vector of
/// log cone-tip resistances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sounding {
    pub id: String,
    pub location: Vec<f64>,
    pub depths: Vec<f64>,
    pub values: Vec<f64>,
}

impl Sounding {
    pub fn new(
        id: impl Into<String>,
        location: Vec<f64>,
        depths: Vec<f64>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if depths.is_empty() {
            return Err(GeoWarpError::Data(format!("sounding {id} has no measurements")));
        }
        if depths.len() != values.len() {
            return Err(GeoWarpError::Data(format!(
                "sounding {id}: {} depths but {} values",
                depths.len(),
                values.len()
            )));
        }
        if location.is_empty() || location.len() > 2 {
            return Err(GeoWarpError::Data(format!(
                "sounding {id}: location must have 1 or 2 coordinates"
            )));
        }
        if location.iter().chain(&depths).chain(&values).any(|v| !v.is_finite()) {
            return Err(GeoWarpError::Data(format!("sounding {id} contains non-finite values")));
        }
        if depths[0] < 0.0 {
            return Err(GeoWarpError::Data(format!("sounding {id} has a negative depth")));
        }
        if depths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GeoWarpError::Data(format!(
                "sounding {id}: depths must be strictly increasing"
            )));
        }
        Ok(Self { id, location, depths, values })
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn max_depth(&self) -> f64 {
        *self.depths.last().unwrap()
    }

    pub fn coordinates(&self) -> impl Iterator<Item = Coordinate> + '_ {
        self.depths.iter().map(|&h| Coordinate::new(&self.location, h))
    }
}

/// A collection of soundings sharing the same horizontal dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteDataset {
    soundings: Vec<Sounding>,
    dim: usize,
    h_max: f64,
}

impl SiteDataset {
    pub fn new(soundings: Vec<Sounding>) -> Result<Self> {
        let first = soundings
            .first()
            .ok_or_else(|| GeoWarpError::Data("dataset has no soundings".into()))?;
        let dim = first.location.len();
        for s in &soundings {
            if s.location.len() != dim {
                return Err(GeoWarpError::Data(format!(
                    "sounding {} has {} horizontal coordinates, expected {dim}",
                    s.id,
                    s.location.len()
                )));
            }
        }
        let mut ids: Vec<&str> = soundings.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(GeoWarpError::Data("duplicate sounding id".into()));
        }
        let h_max = soundings.iter().map(Sounding::max_depth).fold(0.0, f64::max);
        Ok(Self { soundings, dim, h_max })
    }

    pub fn soundings(&self) -> &[Sounding] {
        &self.soundings
    }

    /// Number of horizontal dimensions `D`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Deepest observed depth.
    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn n_points(&self) -> usize {
        self.soundings.iter().map(Sounding::len).sum()
    }

    /// Stacked measurement vector `Z`, sounding by sounding.
    pub fn values(&self) -> Vec<f64> {
        self.soundings.iter().flat_map(|s| s.values.iter().copied()).collect()
    }

    pub fn coordinates(&self) -> Vec<Coordinate> {
        self.soundings.iter().flat_map(Sounding::coordinates).collect()
    }

    pub fn depths(&self) -> Vec<f64> {
        self.soundings.iter().flat_map(|s| s.depths.iter().copied()).collect()
    }

    /// Index of the owning sounding for every stacked point.
    pub fn sounding_index(&self) -> Vec<usize> {
        self.soundings
            .iter()
            .enumerate()
            .flat_map(|(i, s)| std::iter::repeat(i).take(s.len()))
            .collect()
    }

    /// Dataset with sounding `index` removed (leave-one-out folds).
    pub fn without(&self, index: usize) -> Result<Self> {
        if index >= self.soundings.len() || self.soundings.len() < 2 {
            return Err(GeoWarpError::Data(format!("cannot withhold sounding {index}")));
        }
        let rest = self
            .soundings
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != index)
            .map(|(_, s)| s.clone())
            .collect();
        Self::new(rest)
    }

    pub(crate) fn u_points(&self) -> Vec<[f64; 3]> {
        self.coordinates().iter().map(Coordinate::to_u).collect()
    }
}
