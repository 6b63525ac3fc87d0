//! Synthetic datasets and IDX ingestion.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::ModeSpec;
use crate::rng::RngStream;

const CENTER: [f64; 2] = [0.5, 0.5];
/// Mode centers sit on a circle of this radius around the unit square's
/// center.
const LAYOUT_RADIUS: f64 = 0.3;
const SEGMENT_LENGTH: f64 = 0.2;
const RING_RADII: [f64; 2] = [0.15, 0.4];
// membership anchors per unit ring length
const RING_ANCHOR_DENSITY: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GaussianMixture,
    Segments,
    TwoRings,
}

impl DatasetKind {
    pub fn default_sigma(self) -> f64 {
        match self {
            DatasetKind::GaussianMixture => 0.05,
            DatasetKind::Segments | DatasetKind::TwoRings => 0.01,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-mixture" => Ok(DatasetKind::GaussianMixture),
            "segments" => Ok(DatasetKind::Segments),
            "two-rings" => Ok(DatasetKind::TwoRings),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::GaussianMixture => "gaussian-mixture",
            DatasetKind::Segments => "segments",
            DatasetKind::TwoRings => "two-rings",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub kind: DatasetKind,
    /// Mixture components or segments; rings always have two.
    pub modes: usize,
    pub per_mode: usize,
    /// Noise scale; `None` takes the kind's default.
    pub sigma: Option<f64>,
}

impl DatasetParams {
    pub fn new(kind: DatasetKind) -> Self {
        DatasetParams { kind, modes: 3, per_mode: 1000, sigma: None }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(self.kind.default_sigma())
    }
}

/// Points with the mode each was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: PointCloud,
    pub labels: Vec<usize>,
    pub modes: ModeSpec,
}

fn layout(k: usize) -> Vec<[f64; 2]> {
    (0..k)
        .map(|j| {
            let t = std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * j as f64 / k as f64;
            [CENTER[0] + LAYOUT_RADIUS * t.cos(), CENTER[1] + LAYOUT_RADIUS * t.sin()]
        })
        .collect()
}

/// Endpoints of the segments of the `segments` kind: tangent to the
/// layout circle, centered on the mode centers.
pub fn segment_endpoints(k: usize) -> Vec<[[f64; 2]; 2]> {
    layout(k)
        .into_iter()
        .map(|c| {
            let (dx, dy) = (c[0] - CENTER[0], c[1] - CENTER[1]);
            let norm = (dx * dx + dy * dy).sqrt();
            let (tx, ty) = (-dy / norm * SEGMENT_LENGTH / 2.0, dx / norm * SEGMENT_LENGTH / 2.0);
            [[c[0] - tx, c[1] - ty], [c[0] + tx, c[1] + ty]]
        })
        .collect()
}

pub fn make_dataset(params: &DatasetParams, rng: &RngStream) -> Result<Dataset> {
    let sigma = params.sigma();
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    if params.per_mode == 0 {
        return Err(Error::invalid("per_mode must be positive"));
    }
    let mut r = rng.split_named("dataset");
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    let modes = match params.kind {
        DatasetKind::GaussianMixture | DatasetKind::Segments => {
            if params.modes == 0 {
                return Err(Error::invalid("at least one mode"));
            }
            let centers = layout(params.modes);
            let ends = segment_endpoints(params.modes);
            for (j, c) in centers.iter().enumerate() {
                for _ in 0..params.per_mode {
                    let base = if params.kind == DatasetKind::Segments {
                        let t = r.uniform();
                        let [a, b] = ends[j];
                        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
                    } else {
                        *c
                    };
                    flat.push(base[0] + sigma * r.normal());
                    flat.push(base[1] + sigma * r.normal());
                    labels.push(j);
                }
            }
            let radius = match params.kind {
                DatasetKind::Segments => SEGMENT_LENGTH / 2.0 + 4.0 * sigma,
                _ => 4.0 * sigma,
            };
            ModeSpec::new(PointCloud::from_rows(2, &centers)?, radius.max(f64::MIN_POSITIVE))?
        }
        DatasetKind::TwoRings => {
            let mut anchors = Vec::new();
            for (j, rad) in RING_RADII.iter().enumerate() {
                for _ in 0..params.per_mode {
                    let t = std::f64::consts::TAU * r.uniform();
                    flat.push(CENTER[0] + rad * t.cos() + sigma * r.normal());
                    flat.push(CENTER[1] + rad * t.sin() + sigma * r.normal());
                    labels.push(j);
                }
                let m = (RING_ANCHOR_DENSITY * std::f64::consts::TAU * rad).ceil() as usize;
                for a in 0..m {
                    let t = std::f64::consts::TAU * a as f64 / m as f64;
                    anchors.push([CENTER[0] + rad * t.cos(), CENTER[1] + rad * t.sin()]);
                }
            }
            // anchors are at most 1/density apart along each ring
            ModeSpec::new(PointCloud::from_rows(2, &anchors)?, 0.5 / RING_ANCHOR_DENSITY + 4.0 * sigma)?
        }
    };
    Ok(Dataset { points: PointCloud::from_flat(2, flat)?, labels, modes })
}

/// Contents of an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum Idx {
    /// Flattened images scaled to `[0, 1]`.
    Images { rows: usize, cols: usize, points: PointCloud },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Format { offset, msg: "truncated header".into() })
}

pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    let magic = be_u32(bytes, 0)?;
    let count = be_u32(bytes, 4)? as usize;
    let (header, shape) = match magic {
        0x0000_0803 => (16, Some((be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize))),
        0x0000_0801 => (8, None),
        other => return Err(Error::Format { offset: 0, msg: format!("unsupported magic {other:#010x}") }),
    };
    let per = shape.map_or(1, |(r, c)| r * c);
    if per == 0 {
        return Err(Error::Format { offset: 8, msg: "zero-size images".into() });
    }
    let need = count
        .checked_mul(per)
        .and_then(|n| n.checked_add(header))
        .ok_or(Error::Format { offset: 4, msg: "dimensions overflow".into() })?;
    if bytes.len() < need {
        return Err(Error::Format { offset: bytes.len(), msg: format!("truncated: need {need} bytes") });
    }
    let body = &bytes[header..need];
    Ok(match shape {
        Some((rows, cols)) => {
            let flat = body.iter().map(|&b| b as f64 / 255.0).collect();
            Idx::Images { rows, cols, points: PointCloud::from_flat(per, flat)? }
        }
        None => Idx::Labels(body.to_vec()),
    })
}

/// Image file as a point cloud.
pub fn load_idx(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::Missing { path: path.to_path_buf(), what: e.to_string() })?;
    match parse_idx(&bytes)? {
        Idx::Images { points, .. } => Ok(points),
        Idx::Labels(_) => Err(Error::Format { offset: 0, msg: "label file where images were expected".into() }),
    }
}
