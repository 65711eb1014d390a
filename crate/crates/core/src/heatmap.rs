//! Anomaly-region maps from a spatial feature grid.
//!
//! Both the query vector and its normal representation are compared cell by
//! cell against the query's own H×W×D feature map; the absolute difference of
//! the two cosine grids marks the regions that disagree with normal data.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array2, Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::bank::MIN_NORM;
use crate::error::{CapError, Result};
use crate::format::{self, ByteReader};

const MAP_MAGIC: &[u8; 8] = b"CAPSMAP1";
const MAP_VERSION: u32 = 1;

/// One H×W×D feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeatureMap {
    pub id: String,
    pub grid: Array3<f32>,
}

impl SpatialFeatureMap {
    pub fn new(id: impl Into<String>, grid: Array3<f32>) -> Result<Self> {
        let map = Self { id: id.into(), grid };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        let (h, w, d) = self.grid.dim();
        if h == 0 || w == 0 || d == 0 {
            return Err(CapError::Empty("spatial feature map"));
        }
        if let Some(index) = self.grid.iter().position(|v| !v.is_finite()) {
            return Err(CapError::NonFinite {
                what: "spatial feature map",
                index,
            });
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.grid.dim().0
    }

    pub fn width(&self) -> usize {
        self.grid.dim().1
    }

    pub fn dim(&self) -> usize {
        self.grid.dim().2
    }
}

#[derive(Serialize, Deserialize)]
struct MapMetadata {
    ids: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    provenance: BTreeMap<String, String>,
}

/// A file's worth of equally shaped spatial maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMapSet {
    pub ids: Vec<String>,
    /// count × H × W × D
    pub data: Array4<f32>,
    pub provenance: BTreeMap<String, String>,
}

impl SpatialMapSet {
    pub fn new(ids: Vec<String>, data: Array4<f32>) -> Result<Self> {
        let set = Self {
            ids,
            data,
            provenance: BTreeMap::new(),
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let (n, h, w, d) = self.data.dim();
        if n == 0 {
            return Err(CapError::Empty("spatial map set"));
        }
        if h == 0 || w == 0 || d == 0 {
            return Err(CapError::Empty("spatial feature map"));
        }
        if self.ids.len() != n {
            return Err(CapError::LengthMismatch {
                what: "spatial map ids",
                expected: n,
                actual: self.ids.len(),
            });
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(CapError::NonFinite {
                what: "spatial map set",
                index,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn map(&self, index: usize) -> SpatialFeatureMap {
        SpatialFeatureMap {
            id: self.ids[index].clone(),
            grid: self.data.index_axis(ndarray::Axis(0), index).to_owned(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let meta = MapMetadata {
            ids: self.ids.clone(),
            provenance: self.provenance.clone(),
        };
        let text = serde_json::to_string(&meta)
            .map_err(|e| CapError::Malformed(format!("metadata encoding: {e}")))?;
        let (n, h, wd, d) = self.data.dim();
        format::write_header(w, MAP_MAGIC, MAP_VERSION)?;
        for v in [n, h, wd, d] {
            format::write_u64(w, v as u64)?;
        }
        format::write_f32s(w, self.data.iter().copied())?;
        format::write_metadata(w, &text)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut reader = ByteReader::from_reader(r)?;
        reader.expect_header(MAP_MAGIC, MAP_VERSION)?;
        let n = reader.read_usize("header")?;
        let h = reader.read_usize("header")?;
        let w = reader.read_usize("header")?;
        let d = reader.read_usize("header")?;
        let count = format::checked_product(&[n, h, w, d], "payload")?;
        let values = reader.read_f32s(count, "payload")?;
        let text = reader.read_metadata()?;
        let meta: MapMetadata =
            serde_json::from_str(&text).map_err(|e| CapError::Malformed(format!("metadata: {e}")))?;
        let data = Array4::from_shape_vec((n, h, w, d), values).expect("payload length checked");
        let set = Self {
            ids: meta.ids,
            data,
            provenance: meta.provenance,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Per-cell cosine similarities; cells whose feature norm is below
/// [`MIN_NORM`] hold 0 and are listed in `zero_cells`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrid {
    pub values: Array2<f64>,
    pub zero_cells: Vec<(usize, usize)>,
}

pub fn similarity_map(vector: &[f64], map: &SpatialFeatureMap) -> Result<SimilarityGrid> {
    similarity_view(vector, map.grid.view())
}

fn similarity_view(vector: &[f64], grid: ArrayView3<'_, f32>) -> Result<SimilarityGrid> {
    let (h, w, d) = grid.dim();
    if vector.len() != d {
        return Err(CapError::DimensionMismatch {
            expected: d,
            actual: vector.len(),
        });
    }
    let vnorm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(vnorm > MIN_NORM) {
        return Err(CapError::ZeroNormQuery { norm: vnorm });
    }
    let mut values = Array2::zeros((h, w));
    let mut zero_cells = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let cell = grid.slice(ndarray::s![r, c, ..]);
            let (mut dot, mut sq) = (0.0f64, 0.0f64);
            for (&x, &v) in cell.iter().zip(vector) {
                let x = f64::from(x);
                dot += x * v;
                sq += x * x;
            }
            let cnorm = sq.sqrt();
            if cnorm < MIN_NORM {
                zero_cells.push((r, c));
            } else {
                values[[r, c]] = dot / (cnorm * vnorm);
            }
        }
    }
    Ok(SimilarityGrid { values, zero_cells })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapResult {
    pub raw: Array2<f64>,
    pub upsampled: Array2<f64>,
    pub min: f64,
    pub max: f64,
    pub zero_cells: Vec<(usize, usize)>,
}

/// Differences the two similarity grids at grid resolution, then upsamples.
pub fn anomaly_heatmap(
    z: &[f64],
    z_normal: &[f64],
    map: &SpatialFeatureMap,
    target_h: usize,
    target_w: usize,
) -> Result<HeatmapResult> {
    let a = similarity_map(z, map)?;
    let b = similarity_map(z_normal, map)?;
    let raw = (&a.values - &b.values).mapv(f64::abs);
    let upsampled = bilinear_upsample(&raw, target_h, target_w)?;
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(HeatmapResult {
        raw,
        upsampled,
        min,
        max,
        zero_cells: a.zero_cells,
    })
}

/// Source coordinate of output index `i` under corner alignment, split into
/// integer cell and fraction. Integer arithmetic keeps grid anchors exact.
fn source_coord(i: usize, source: usize, target: usize) -> (usize, f64) {
    if target == 1 || source == 1 {
        return (0, 0.0);
    }
    let num = i * (source - 1);
    let den = target - 1;
    let cell = num / den;
    if cell >= source - 1 {
        return (source - 1, 0.0);
    }
    (cell, (num % den) as f64 / den as f64)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// Align-corners bilinear interpolation onto a larger grid.
pub fn bilinear_upsample(grid: &Array2<f64>, target_h: usize, target_w: usize) -> Result<Array2<f64>> {
    let (h, w) = grid.dim();
    if h == 0 || w == 0 {
        return Err(CapError::Empty("heatmap grid"));
    }
    if target_h < h || target_w < w {
        return Err(CapError::UpsampleTooSmall {
            source_h: h,
            source_w: w,
            target_h,
            target_w,
        });
    }
    let cols: Vec<(usize, f64)> = (0..target_w).map(|j| source_coord(j, w, target_w)).collect();
    let mut out = Array2::zeros((target_h, target_w));
    for i in 0..target_h {
        let (r, fy) = source_coord(i, h, target_h);
        let r1 = (r + 1).min(h - 1);
        for (j, &(c, fx)) in cols.iter().enumerate() {
            let c1 = (c + 1).min(w - 1);
            let top = lerp(grid[[r, c]], grid[[r, c1]], fx);
            let bottom = lerp(grid[[r1, c]], grid[[r1, c1]], fx);
            out[[i, j]] = lerp(top, bottom, fy);
        }
    }
    Ok(out)
}

/// Writes an 8-bit binary PGM, scaling `[min, max]` to `[0, 255]`. A constant
/// grid is written as all zeros.
pub fn write_pgm<W: Write>(w: &mut W, grid: &Array2<f64>, min: f64, max: f64) -> Result<()> {
    let (h, wd) = grid.dim();
    write!(w, "P5\n{wd} {h}\n255\n")?;
    let span = max - min;
    let pixels: Vec<u8> = grid
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - min) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    w.write_all(&pixels)?;
    Ok(())
}

pub fn write_grid_csv<W: Write>(w: &mut W, grid: &Array2<f64>) -> Result<()> {
    for row in grid.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}
