//! Basis-shape skeleton model.
//!
//! A category is described by `K` base shapes `B_k` (each `3 x N`). A concrete
//! object is the weighted sum `Y = sum_k alpha_k B_k`. The first base shape is
//! the category mean, stored centered at its centroid with a bounding-box
//! diagonal of one; the remaining bases are mean-free deformation directions.

use std::fs;
use std::path::Path;

use nalgebra::Matrix3xX;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEC_VERSION: &str = "skelspec-v1";

const CHAIR_JSON: &str = include_str!("../data/chair.json");
const TETRAPOD_JSON: &str = include_str!("../data/tetrapod.json");

/// Closed interval used for sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Per-category skeleton definition.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSpec {
    name: String,
    keypoint_names: Vec<String>,
    connections: Vec<(usize, usize)>,
    base_shapes: Vec<Matrix3xX<f64>>,
    alpha_ranges: Vec<Interval>,
}

/// Structural weights `alpha`, one per base shape.
#[derive(Debug, Clone, PartialEq)]
pub struct StructParams {
    pub alpha: Vec<f64>,
}

impl StructParams {
    pub fn new(alpha: Vec<f64>) -> Self {
        Self { alpha }
    }

    /// The mean shape: `alpha = e_1`.
    pub fn mean(k: usize) -> Self {
        let mut alpha = vec![0.0; k];
        alpha[0] = 1.0;
        Self { alpha }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// 3D keypoint coordinates in the object frame, one column per keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape3D {
    pub coords: Matrix3xX<f64>,
}

impl Shape3D {
    pub fn new(coords: Matrix3xX<f64>) -> Self {
        Self { coords }
    }

    pub fn n_keypoints(&self) -> usize {
        self.coords.ncols()
    }
}

impl SkeletonSpec {
    pub fn new(
        name: impl Into<String>,
        keypoint_names: Vec<String>,
        connections: Vec<(usize, usize)>,
        base_shapes: Vec<Matrix3xX<f64>>,
        alpha_ranges: Vec<Interval>,
    ) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            keypoint_names,
            connections,
            base_shapes,
            alpha_ranges,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The bundled 10-keypoint chair: mean, back tilt, leg length, seat width.
    pub fn chair() -> Self {
        Self::from_json(CHAIR_JSON).expect("bundled chair spec is valid")
    }

    /// The bundled 4-keypoint tetrapod, used for fast tests.
    pub fn tetrapod() -> Self {
        Self::from_json(TETRAPOD_JSON).expect("bundled tetrapod spec is valid")
    }

    /// Looks up a bundled spec by name.
    pub fn bundled(name: &str) -> Option<Self> {
        match name {
            "chair" => Some(Self::chair()),
            "tetrapod" => Some(Self::tetrapod()),
            _ => None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_keypoints(&self) -> usize {
        self.base_shapes[0].ncols()
    }

    pub fn n_bases(&self) -> usize {
        self.base_shapes.len()
    }

    pub fn keypoint_names(&self) -> &[String] {
        &self.keypoint_names
    }

    pub fn connections(&self) -> &[(usize, usize)] {
        &self.connections
    }

    pub fn base_shapes(&self) -> &[Matrix3xX<f64>] {
        &self.base_shapes
    }

    pub fn alpha_ranges(&self) -> &[Interval] {
        &self.alpha_ranges
    }

    fn validate(&self) -> Result<()> {
        let k = self.base_shapes.len();
        if k == 0 {
            return Err(Error::invariant("base_shapes", "at least one base shape is required"));
        }
        let n = self.base_shapes[0].ncols();
        if n < 4 {
            return Err(Error::invariant("base_shapes", format!("need at least 4 keypoints, got {n}")));
        }
        for (i, b) in self.base_shapes.iter().enumerate() {
            if b.ncols() != n {
                return Err(Error::invariant(
                    "base_shapes",
                    format!("base shape {i} has {} columns, expected {n}", b.ncols()),
                ));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::invariant("base_shapes", format!("base shape {i} is not finite")));
            }
        }
        if self.keypoint_names.len() != n {
            return Err(Error::invariant(
                "keypoint_names",
                format!("{} names for {n} keypoints", self.keypoint_names.len()),
            ));
        }
        for &(a, b) in &self.connections {
            if a >= n || b >= n {
                return Err(Error::invariant(
                    "connections",
                    format!("connection ({a}, {b}) out of range for {n} keypoints"),
                ));
            }
        }
        if self.alpha_ranges.len() != k {
            return Err(Error::invariant(
                "alpha_ranges",
                format!("{} ranges for {k} base shapes", self.alpha_ranges.len()),
            ));
        }
        if let Some(i) = self.alpha_ranges.iter().position(|r| !r.is_valid()) {
            return Err(Error::invariant("alpha_ranges", format!("range {i} is empty or not finite")));
        }
        if !self.alpha_ranges[0].contains(1.0) {
            return Err(Error::invariant("alpha_ranges", "first range must contain 1.0"));
        }
        Ok(())
    }

    fn check_params(&self, params: &StructParams) -> Result<()> {
        if params.len() != self.n_bases() {
            return Err(Error::argument(format!(
                "expected {} structural weights, got {}",
                self.n_bases(),
                params.len()
            )));
        }
        if params.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::argument("structural weights must be finite"));
        }
        Ok(())
    }

    /// `Y = sum_k alpha_k B_k`.
    pub fn compose_shape(&self, params: &StructParams) -> Result<Shape3D> {
        self.check_params(params)?;
        let mut coords = Matrix3xX::zeros(self.n_keypoints());
        for (a, b) in params.alpha.iter().zip(&self.base_shapes) {
            coords += b * *a;
        }
        Ok(Shape3D { coords })
    }

    /// Derivative table of the shape with respect to each weight.
    ///
    /// The model is linear, so entry `k` is simply `B_k`.
    pub fn shape_basis_jacobian(&self) -> Vec<Matrix3xX<f64>> {
        self.base_shapes.clone()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SpecDocument = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        doc.into_spec()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SpecDocument::from_spec(self)).expect("spec serializes")
    }

    /// Compact single-line JSON, used inside dataset headers.
    pub fn to_json_compact(&self) -> String {
        serde_json::to_string(&SpecDocument::from_spec(self)).expect("spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Euclidean length of the axis-aligned bounding-box diagonal.
pub fn diagonal_length(shape: &Shape3D) -> f64 {
    let c = &shape.coords;
    if c.ncols() == 0 {
        return 0.0;
    }
    let mut sq = 0.0;
    for row in c.row_iter() {
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        sq += (hi - lo) * (hi - lo);
    }
    sq.sqrt()
}

/// On-disk representation of a skeleton spec.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDocument {
    version: String,
    name: String,
    keypoint_names: Vec<String>,
    connections: Vec<[usize; 2]>,
    /// `K x 3 x N`.
    base_shapes: Vec<Vec<Vec<f64>>>,
    alpha_ranges: Vec<[f64; 2]>,
}

impl SpecDocument {
    fn from_spec(spec: &SkeletonSpec) -> Self {
        Self {
            version: SPEC_VERSION.to_string(),
            name: spec.name.clone(),
            keypoint_names: spec.keypoint_names.clone(),
            connections: spec.connections.iter().map(|&(a, b)| [a, b]).collect(),
            base_shapes: spec
                .base_shapes
                .iter()
                .map(|b| b.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            alpha_ranges: spec.alpha_ranges.iter().map(|r| [r.lo, r.hi]).collect(),
        }
    }

    fn into_spec(self) -> Result<SkeletonSpec> {
        if self.version != SPEC_VERSION {
            return Err(Error::invariant(
                "version",
                format!("expected {SPEC_VERSION}, found {}", self.version),
            ));
        }
        let mut bases = Vec::with_capacity(self.base_shapes.len());
        for (k, rows) in self.base_shapes.into_iter().enumerate() {
            if rows.len() != 3 {
                return Err(Error::invariant(
                    "base_shapes",
                    format!("base shape {k} has {} rows, expected 3", rows.len()),
                ));
            }
            let n = rows[0].len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(Error::invariant("base_shapes", format!("base shape {k} has ragged rows")));
            }
            bases.push(Matrix3xX::from_fn(n, |r, c| rows[r][c]));
        }
        SkeletonSpec::new(
            self.name,
            self.keypoint_names,
            self.connections.into_iter().map(|[a, b]| (a, b)).collect(),
            bases,
            self.alpha_ranges.into_iter().map(|[lo, hi]| Interval::new(lo, hi)).collect(),
        )
    }
}
