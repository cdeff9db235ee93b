//! Descriptor-driven training-set selection.
//!
//! Archive entries are tagged with a climate class and a thematic class by
//! looking up their bounding-box centers in two class rasters. Entries sharing
//! a `(climate, thematic)` pair form a stratum, and a genetic algorithm picks a
//! spatially dispersed subset of roughly `N_s` entries from each stratum.

mod ga;
mod io;

pub use ga::{
    evolve_stratum, mutation_rate, repair, repair_band, sample_archive, EntropyDistanceFitness, EvolveOutcome, Fitness,
    GaConfig, SamplingReport, SelectedEntry, StratumReport,
};
pub use io::{read_archive, read_grid, read_grid_file, write_grid, write_selection};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spherical Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Georeferencing of a class raster; also the GRID1 header line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    pub lat_max: f64,
    pub lon_min: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub rows: usize,
    pub cols: usize,
    pub nodata: u16,
}

/// North-up class raster: row 0 lies at `lat_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRaster {
    pub header: GridHeader,
    /// Row-major codes.
    pub codes: Vec<u16>,
}

impl ClassRaster {
    pub fn new(header: GridHeader, codes: Vec<u16>) -> Result<Self> {
        let h = &header;
        if !(h.dlat > 0.0 && h.dlon > 0.0) || !h.dlat.is_finite() || !h.dlon.is_finite() {
            return Err(Error::Data(format!("raster cell size must be positive, got ({}, {})", h.dlat, h.dlon)));
        }
        if !h.lat_max.is_finite() || !h.lon_min.is_finite() {
            return Err(Error::Data("raster origin must be finite".into()));
        }
        if codes.len() != h.rows * h.cols {
            return Err(Error::Data(format!("raster has {} codes for a {}×{} grid", codes.len(), h.rows, h.cols)));
        }
        Ok(ClassRaster { header, codes })
    }

    /// Class code at a point, `None` outside the extent or on nodata.
    pub fn lookup(&self, lon: f64, lat: f64) -> Option<u16> {
        let h = &self.header;
        let r = ((h.lat_max - lat) / h.dlat).floor();
        let c = ((lon - h.lon_min) / h.dlon).floor();
        if !(r >= 0.0 && c >= 0.0 && r < h.rows as f64 && c < h.cols as f64) {
            return None;
        }
        let code = self.codes[r as usize * h.cols + c as usize];
        (code != h.nodata).then_some(code)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub id: String,
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
}

impl ArchiveEntry {
    pub fn validate(&self) -> Result<()> {
        let lon_ok = |v: f64| (-180.0..=180.0).contains(&v);
        let lat_ok = |v: f64| (-90.0..=90.0).contains(&v);
        if !(lon_ok(self.lon_min) && lon_ok(self.lon_max) && lat_ok(self.lat_min) && lat_ok(self.lat_max)) {
            return Err(Error::Data(format!("entry {}: coordinates out of range", self.id)));
        }
        if self.lon_min > self.lon_max || self.lat_min > self.lat_max {
            return Err(Error::Data(format!("entry {}: min exceeds max", self.id)));
        }
        Ok(())
    }

    /// `(lon, lat)` of the box center.
    pub fn center(&self) -> (f64, f64) {
        ((self.lon_min + self.lon_max) / 2.0, (self.lat_min + self.lat_max) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescribedEntry {
    pub entry: ArchiveEntry,
    /// Climate class.
    pub u: u16,
    /// Thematic class.
    pub v: u16,
}

/// Tags each entry with the classes at its center; entries not covered by
/// both rasters are dropped. Order is preserved.
pub fn generate_descriptors(
    archive: &[ArchiveEntry],
    climate: &ClassRaster,
    thematic: &ClassRaster,
) -> Vec<DescribedEntry> {
    archive
        .iter()
        .filter_map(|e| {
            let (lon, lat) = e.center();
            let u = climate.lookup(lon, lat)?;
            let v = thematic.lookup(lon, lat)?;
            Some(DescribedEntry { entry: e.clone(), u, v })
        })
        .collect()
}

/// Groups entries by `(u, v)`, preserving input order within each stratum.
pub fn stratify(described: &[DescribedEntry]) -> BTreeMap<(u16, u16), Vec<DescribedEntry>> {
    let mut strata: BTreeMap<(u16, u16), Vec<DescribedEntry>> = BTreeMap::new();
    for d in described {
        strata.entry((d.u, d.v)).or_default().push(d.clone());
    }
    strata
}

/// Great-circle distance in kilometers between two `(lon, lat)` points in degrees.
pub fn haversine(p: (f64, f64), q: (f64, f64)) -> f64 {
    let (lon1, lat1) = (p.0.to_radians(), p.1.to_radians());
    let (lon2, lat2) = (q.0.to_radians(), q.1.to_radians());
    let a = ((lat2 - lat1) / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Symmetric pairwise distance table over a stratum.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(points: &[(f64, f64)]) -> Self {
        let n = points.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = haversine(points[i], points[j]);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        DistanceMatrix { n, d }
    }

    /// Builds a table from a full row-major `n×n` distance array.
    pub fn from_table(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::Data(format!("distance table has {} entries for n = {n}", d.len())));
        }
        Ok(DistanceMatrix { n, d })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    /// Mean pairwise distance among `selected`, `None` below two points.
    pub fn mean_distance(&self, selected: &[usize]) -> Option<f64> {
        let k = selected.len();
        if k < 2 {
            return None;
        }
        let mut s = 0.0;
        for (a, &i) in selected.iter().enumerate() {
            for &j in &selected[a + 1..] {
                s += self.get(i, j);
            }
        }
        Some(s / (k * (k - 1) / 2) as f64)
    }
}

/// `H(p) + ln(mean d)` with `p_ij = d_ij / Σd` over all selected pairs.
/// Fewer than two points, or all points coincident, give `−∞`.
pub fn fitness(points: &[(f64, f64)]) -> f64 {
    let dm = DistanceMatrix::new(points);
    let all: Vec<usize> = (0..points.len()).collect();
    EntropyDistanceFitness.score(&dm, &all)
}
