//! Synthetic corpus generation and the `skelds-v1` dataset container.
//!
//! Each record draws structural weights and a camera uniformly from
//! [`SamplingRanges`], composes the skeleton, jitters every coordinate with
//! Gaussian noise whose standard deviation is a fixed fraction of the shape's
//! bounding-box diagonal, projects it and renders heatmaps.
//!
//! Record `i` of a dataset uses its own ChaCha stream derived from
//! `(seed, i)`, so generation order does not affect the output.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3xX, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{project, CameraPose, Keypoints2D, DEPTH_EPSILON};
use crate::error::{Error, Result};
use crate::heatmap::{render_heatmaps, GridGeometry, HeatmapStack, DEFAULT_SIGMA};
use crate::skeleton::{diagonal_length, Interval, Shape3D, SkeletonSpec, StructParams};

pub const DATASET_FORMAT: &str = "skelds-v1";

/// Fraction of the bounding-box diagonal used as the perturbation std.
pub const DEFAULT_PERTURBATION: f64 = 0.01;

const MAX_ATTEMPTS: usize = 100;
const MIN_VISIBLE: usize = 4;

/// Uniform sampling intervals for every recoverable parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingRanges {
    pub alpha: Vec<Interval>,
    pub omega: [Interval; 3],
    pub t: [Interval; 3],
    pub f: Interval,
    /// Perturbation standard deviation as a fraction of the diagonal.
    pub perturbation: f64,
}

impl SamplingRanges {
    /// Default camera ranges with the spec's own structural ranges.
    pub fn for_spec(spec: &SkeletonSpec) -> Self {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let rot = Interval::new(-half_pi, half_pi);
        Self {
            alpha: spec.alpha_ranges().to_vec(),
            omega: [rot; 3],
            t: [Interval::new(-0.5, 0.5), Interval::new(-0.5, 0.5), Interval::new(2.0, 6.0)],
            f: Interval::new(1.0, 3.0),
            perturbation: DEFAULT_PERTURBATION,
        }
    }

    pub fn validate(&self, spec: &SkeletonSpec) -> Result<()> {
        if self.alpha.len() != spec.n_bases() {
            return Err(Error::Config(format!(
                "{} alpha ranges for {} base shapes",
                self.alpha.len(),
                spec.n_bases()
            )));
        }
        let all = self.alpha.iter().chain(&self.omega).chain(&self.t).chain(std::iter::once(&self.f));
        if all.clone().any(|r| !r.is_valid()) {
            return Err(Error::Config("sampling intervals must be finite and non-empty".into()));
        }
        if self.t[2].lo <= 10.0 * DEPTH_EPSILON {
            return Err(Error::Config(format!(
                "depth lower bound {} must exceed {}",
                self.t[2].lo,
                10.0 * DEPTH_EPSILON
            )));
        }
        if self.f.lo <= 0.0 {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        let max_angle = self.omega.iter().map(|r| r.lo.abs().max(r.hi.abs()).powi(2)).sum::<f64>().sqrt();
        if max_angle >= std::f64::consts::PI {
            return Err(Error::Config("rotation ranges must keep |omega| below pi".into()));
        }
        if !(self.perturbation >= 0.0) || !self.perturbation.is_finite() {
            return Err(Error::Config("perturbation fraction must be non-negative".into()));
        }
        Ok(())
    }
}

/// How heatmaps are rendered from projected keypoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub geometry: GridGeometry,
    /// Gaussian standard deviation in cells.
    pub sigma: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            geometry: GridGeometry::default(),
            sigma: DEFAULT_SIGMA,
        }
    }
}

impl RenderSettings {
    pub fn render(&self, x: &Keypoints2D) -> (HeatmapStack, Vec<bool>) {
        render_heatmaps(x, &self.geometry, self.sigma)
    }
}

/// One synthetic instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub params: StructParams,
    pub pose: CameraPose,
    pub y_clean: Shape3D,
    pub y_perturbed: Shape3D,
    /// Projection of `y_perturbed`.
    pub x: Keypoints2D,
    /// `None` when heatmaps are re-rendered from `x` on demand.
    pub heatmaps: Option<HeatmapStack>,
    pub visibility: Vec<bool>,
}

impl SampleRecord {
    pub fn n_visible(&self) -> usize {
        self.visibility.iter().filter(|&&v| v).count()
    }
}

/// Generation parameters recorded alongside a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub ranges: SamplingRanges,
    pub render: RenderSettings,
    pub generator: String,
    /// Total rejected draws across all records.
    pub resampled: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SkeletonSpec,
    pub records: Vec<SampleRecord>,
    pub provenance: Provenance,
}

/// 2D-only view of one record: heatmaps and keypoint labels, no 3D fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation2D {
    pub x: Keypoints2D,
    pub visibility: Vec<bool>,
    heatmaps: Option<HeatmapStack>,
}

/// 2D-annotated corpus, the input of projection-supervised fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset2D {
    pub spec: SkeletonSpec,
    pub render: RenderSettings,
    pub observations: Vec<Observation2D>,
}

impl Dataset2D {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn heatmaps(&self, i: usize) -> Cow<'_, HeatmapStack> {
        let obs = &self.observations[i];
        match &obs.heatmaps {
            Some(h) => Cow::Borrowed(h),
            None => Cow::Owned(self.render.render(&obs.x).0),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: &Interval) -> f64 {
    // one draw per interval even when degenerate, so streams stay aligned
    let u: f64 = rng.random();
    r.lo + u * r.width()
}

/// Draws one instance, resampling draws that put a keypoint behind the camera
/// or leave fewer than four keypoints in the heatmap window.
///
/// Returns the record and the number of rejected draws.
pub fn sample_instance(
    spec: &SkeletonSpec,
    ranges: &SamplingRanges,
    render: &RenderSettings,
    rng: &mut ChaCha8Rng,
) -> Result<(SampleRecord, usize)> {
    ranges.validate(spec)?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for attempt in 0..MAX_ATTEMPTS {
        let alpha = ranges.alpha.iter().map(|r| uniform(rng, r)).collect();
        let omega = Vector3::new(
            uniform(rng, &ranges.omega[0]),
            uniform(rng, &ranges.omega[1]),
            uniform(rng, &ranges.omega[2]),
        );
        let t = Vector3::new(uniform(rng, &ranges.t[0]), uniform(rng, &ranges.t[1]), uniform(rng, &ranges.t[2]));
        let f = uniform(rng, &ranges.f);
        let params = StructParams::new(alpha);
        let pose = CameraPose { omega, t, f };
        let y_clean = spec.compose_shape(&params)?;
        let std = ranges.perturbation * diagonal_length(&y_clean);
        let n = spec.n_keypoints();
        let noise = Matrix3xX::from_fn(n, |_, _| std * unit.sample(rng));
        let y_perturbed = Shape3D::new(&y_clean.coords + noise);
        let x = match project(&y_perturbed, &pose) {
            Ok(x) => x,
            Err(Error::Domain { .. }) => continue,
            Err(e) => return Err(e),
        };
        let (heatmaps, visibility) = render.render(&x);
        if visibility.iter().filter(|&&v| v).count() < MIN_VISIBLE {
            continue;
        }
        let record = SampleRecord {
            params,
            pose,
            y_clean,
            y_perturbed,
            x,
            heatmaps: Some(heatmaps),
            visibility,
        };
        return Ok((record, attempt));
    }
    Err(Error::Config(format!(
        "no valid instance after {MAX_ATTEMPTS} draws; check the sampling ranges"
    )))
}

/// The RNG stream for record `index` of a dataset seeded with `seed`.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `count` records. Heatmaps are kept in memory only when
/// `store_heatmaps` is set; otherwise they are re-rendered on demand.
pub fn generate_dataset(
    spec: &SkeletonSpec,
    ranges: &SamplingRanges,
    render: &RenderSettings,
    count: usize,
    seed: u64,
    store_heatmaps: bool,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::argument("dataset count must be at least 1"));
    }
    ranges.validate(spec)?;
    render.geometry.validate()?;
    let drawn: Vec<(SampleRecord, usize)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = record_rng(seed, i as u64);
            let (mut rec, rejected) = sample_instance(spec, ranges, render, &mut rng)?;
            if !store_heatmaps {
                rec.heatmaps = None;
            }
            Ok((rec, rejected))
        })
        .collect::<Result<_>>()?;
    let resampled = drawn.iter().map(|(_, r)| *r as u64).sum();
    let records = drawn.into_iter().map(|(r, _)| r).collect();
    Ok(Dataset {
        spec: spec.clone(),
        records,
        provenance: Provenance {
            seed,
            ranges: ranges.clone(),
            render: *render,
            generator: crate::VERSION.to_string(),
            resampled,
        },
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn render(&self) -> &RenderSettings {
        &self.provenance.render
    }

    /// Heatmaps of record `i`, borrowed if stored and rendered otherwise.
    pub fn heatmaps(&self, i: usize) -> Cow<'_, HeatmapStack> {
        let rec = &self.records[i];
        match &rec.heatmaps {
            Some(h) => Cow::Borrowed(h),
            None => Cow::Owned(self.provenance.render.render(&rec.x).0),
        }
    }

    /// Fraction of draws that were rejected during generation.
    pub fn resample_rate(&self) -> f64 {
        let r = self.provenance.resampled as f64;
        r / (r + self.len() as f64)
    }

    /// Withholds all 3D fields.
    pub fn to_2d_only(&self) -> Dataset2D {
        Dataset2D {
            spec: self.spec.clone(),
            render: self.provenance.render,
            observations: self
                .records
                .iter()
                .map(|r| Observation2D {
                    x: r.x.clone(),
                    visibility: r.visibility.clone(),
                    heatmaps: r.heatmaps.clone(),
                })
                .collect(),
        }
    }

    /// Splits off the trailing `n` records.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.records.len());
        let tail = self.records.split_off(self.records.len() - n);
        let other = Dataset {
            spec: self.spec.clone(),
            records: tail,
            provenance: self.provenance.clone(),
        };
        (self, other)
    }

    fn stores_heatmaps(&self) -> bool {
        self.records.first().is_some_and(|r| r.heatmaps.is_some())
    }

    fn record_bytes(&self) -> usize {
        let n = self.spec.n_keypoints();
        let k = self.spec.n_bases();
        let mut size = 8 * (k + 7 + 3 * n + 3 * n + 2 * n) + n;
        if self.stores_heatmaps() {
            size += 4 * n * self.provenance.render.geometry.cells();
        }
        size
    }

    fn encode_body(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(self.record_bytes() * self.len());
        let put = |body: &mut Vec<u8>, v: f64| body.extend_from_slice(&v.to_le_bytes());
        for r in &self.records {
            r.params.alpha.iter().for_each(|&v| put(&mut body, v));
            r.pose.omega.iter().for_each(|&v| put(&mut body, v));
            r.pose.t.iter().for_each(|&v| put(&mut body, v));
            put(&mut body, r.pose.f);
            r.y_clean.coords.iter().for_each(|&v| put(&mut body, v));
            r.y_perturbed.coords.iter().for_each(|&v| put(&mut body, v));
            r.x.coords.iter().for_each(|&v| put(&mut body, v));
            body.extend(r.visibility.iter().map(|&v| v as u8));
            if let Some(h) = &r.heatmaps {
                for v in h.as_slice() {
                    body.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        body
    }

    /// Serializes to the `skelds-v1` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let body = self.encode_body();
        let mut header = String::new();
        writeln!(header, "{DATASET_FORMAT}").unwrap();
        writeln!(header, "spec: {}", self.spec.to_json_compact()).unwrap();
        writeln!(header, "count: {}", self.len()).unwrap();
        writeln!(header, "heatmaps: {}", if self.stores_heatmaps() { "stored" } else { "rerender" }).unwrap();
        writeln!(header, "provenance: {}", serde_json::to_string(&self.provenance).unwrap()).unwrap();
        writeln!(
            header,
            "perturbation: gaussian, std = {} * bounding-box diagonal",
            self.provenance.ranges.perturbation
        )
        .unwrap();
        writeln!(header, "body-bytes: {}", body.len()).unwrap();
        writeln!(header, "sha256: {}", hex_digest(&body)).unwrap();
        writeln!(header, "end").unwrap();
        let mut out = header.into_bytes();
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let mut pos = 0;
        let mut first = true;
        loop {
            let Some(len) = bytes[pos..].iter().position(|&b| b == b'\n') else {
                return Err(Error::Integrity("header is truncated".into()));
            };
            let line = std::str::from_utf8(&bytes[pos..pos + len])
                .map_err(|_| Error::Integrity("header is not UTF-8".into()))?;
            pos += len + 1;
            if first {
                if line != DATASET_FORMAT {
                    return Err(Error::Parse(format!("not a {DATASET_FORMAT} file")));
                }
                first = false;
                continue;
            }
            if line == "end" {
                break;
            }
            let (key, value) = line
                .split_once(": ")
                .ok_or_else(|| Error::Integrity(format!("malformed header line `{line}`")))?;
            fields.insert(key.to_string(), value.to_string());
        }
        let field = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Integrity(format!("header field `{k}` missing")))
        };
        let spec = SkeletonSpec::from_json(field("spec")?)?;
        let count: usize = field("count")?
            .parse()
            .map_err(|_| Error::Integrity("bad record count".into()))?;
        let stored = match field("heatmaps")? {
            "stored" => true,
            "rerender" => false,
            other => return Err(Error::Integrity(format!("unknown heatmap mode `{other}`"))),
        };
        let provenance: Provenance =
            serde_json::from_str(field("provenance")?).map_err(|e| Error::Parse(e.to_string()))?;
        let expected_len: usize = field("body-bytes")?
            .parse()
            .map_err(|_| Error::Integrity("bad body length".into()))?;
        let body = &bytes[pos..];
        if body.len() != expected_len {
            return Err(Error::Integrity(format!(
                "body has {} bytes, header declares {expected_len}",
                body.len()
            )));
        }
        let digest = hex_digest(body);
        if digest != field("sha256")? {
            return Err(Error::Integrity(format!(
                "checksum mismatch: stored {}, computed {digest}",
                field("sha256")?
            )));
        }
        decode_records(spec, provenance, body, count, stored)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

fn decode_records(
    spec: SkeletonSpec,
    provenance: Provenance,
    body: &[u8],
    count: usize,
    stored: bool,
) -> Result<Dataset> {
    let n = spec.n_keypoints();
    let k = spec.n_bases();
    let cells = provenance.render.geometry.cells();
    let mut per = 8 * (k + 7 + 8 * n) + n;
    if stored {
        per += 4 * n * cells;
    }
    if body.len() != per * count {
        return Err(Error::Integrity(format!(
            "body length {} does not hold {count} records of {per} bytes",
            body.len()
        )));
    }
    let mut cur = 0usize;
    let mut take = |len: usize| {
        let s = &body[cur..cur + len];
        cur += len;
        s
    };
    let f64s = |s: &[u8]| -> Vec<f64> {
        s.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    };
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let alpha = f64s(take(8 * k));
        let cam = f64s(take(8 * 7));
        let y_clean = Matrix3xX::from_column_slice(&f64s(take(8 * 3 * n)));
        let y_perturbed = Matrix3xX::from_column_slice(&f64s(take(8 * 3 * n)));
        let x = nalgebra::Matrix2xX::from_column_slice(&f64s(take(8 * 2 * n)));
        let visibility = take(n).iter().map(|&b| b != 0).collect();
        let heatmaps = if stored {
            let data = take(4 * n * cells)
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Some(HeatmapStack::from_data(provenance.render.geometry, n, data)?)
        } else {
            None
        };
        records.push(SampleRecord {
            params: StructParams::new(alpha),
            pose: CameraPose {
                omega: Vector3::new(cam[0], cam[1], cam[2]),
                t: Vector3::new(cam[3], cam[4], cam[5]),
                f: cam[6],
            },
            y_clean: Shape3D::new(y_clean),
            y_perturbed: Shape3D::new(y_perturbed),
            x: Keypoints2D::new(x),
            heatmaps,
            visibility,
        });
    }
    Ok(Dataset { spec, records, provenance })
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::decode_argmax;

    fn chair_setup() -> (SkeletonSpec, SamplingRanges, RenderSettings) {
        let spec = SkeletonSpec::chair();
        let ranges = SamplingRanges::for_spec(&spec);
        (spec, ranges, RenderSettings::default())
    }

    #[test]
    fn same_seed_same_record() {
        let (spec, ranges, render) = chair_setup();
        let a = sample_instance(&spec, &ranges, &render, &mut record_rng(5, 0)).unwrap();
        let b = sample_instance(&spec, &ranges, &render, &mut record_rng(5, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn records_are_internally_consistent() {
        let (spec, ranges, render) = chair_setup();
        let ds = generate_dataset(&spec, &ranges, &render, 50, 3, true).unwrap();
        for r in &ds.records {
            let x = project(&r.y_perturbed, &r.pose).unwrap();
            assert!((x.coords - &r.x.coords).amax() < 1e-9);
            let y = spec.compose_shape(&r.params).unwrap();
            assert!((y.coords - &r.y_clean.coords).amax() < 1e-12);
            let (dec, vis) = decode_argmax(r.heatmaps.as_ref().unwrap());
            for i in 0..spec.n_keypoints() {
                assert_eq!(vis[i], r.visibility[i]);
                if vis[i] {
                    let d = (dec.coords.column(i) - r.x.coords.column(i)).norm();
                    assert!(d <= render.geometry.half_cell_diagonal() + 1e-12);
                }
            }
            assert_eq!(r.params.alpha[0], 1.0);
        }
    }

    #[test]
    fn perturbation_std_matches_diagonal_fraction() {
        let (spec, ranges, render) = chair_setup();
        let ds = generate_dataset(&spec, &ranges, &render, 10_000, 11, false).unwrap();
        let mut ratios = Vec::new();
        for r in &ds.records {
            let diag = diagonal_length(&r.y_clean);
            for (a, b) in r.y_perturbed.coords.iter().zip(r.y_clean.coords.iter()) {
                ratios.push((a - b) / diag);
            }
        }
        let m = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / m;
        let std = (ratios.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        assert!((std - 0.01).abs() < 0.05 * 0.01, "std {std}");
        assert!(mean.abs() < 1e-3 * 0.01 * 10.0);
    }

    #[test]
    fn unit_diagonal_gives_one_percent_noise() {
        let spec = SkeletonSpec::chair();
        let mean = spec.compose_shape(&StructParams::mean(4)).unwrap();
        assert!((diagonal_length(&mean) - 1.0).abs() < 1e-12);
        assert_eq!(DEFAULT_PERTURBATION * diagonal_length(&mean), 0.01 * diagonal_length(&mean));
    }

    #[test]
    fn resample_rate_is_low_under_defaults() {
        let (spec, ranges, render) = chair_setup();
        let ds = generate_dataset(&spec, &ranges, &render, 2_000, 1, false).unwrap();
        assert!(ds.resample_rate() < 0.05, "rate {}", ds.resample_rate());
    }

    #[test]
    fn impossible_ranges_are_a_configuration_error() {
        let (spec, mut ranges, render) = chair_setup();
        // every object lands far outside the window
        ranges.t[0] = Interval::new(50.0, 60.0);
        let err = sample_instance(&spec, &ranges, &render, &mut record_rng(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        ranges.t[0] = Interval::new(-0.5, 0.5);
        ranges.t[2] = Interval::new(0.0, 1.0);
        assert!(matches!(ranges.validate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn single_record_dataset() {
        let (spec, ranges, render) = chair_setup();
        let ds = generate_dataset(&spec, &ranges, &render, 1, 0, false).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.records[0].n_visible() >= 4);
        assert!(generate_dataset(&spec, &ranges, &render, 0, 0, false).is_err());
    }

    #[test]
    fn generation_is_schedule_independent() {
        let (spec, ranges, render) = chair_setup();
        let full = generate_dataset(&spec, &ranges, &render, 20, 9, false).unwrap();
        for i in [0usize, 7, 19] {
            let (mut rec, _) = sample_instance(&spec, &ranges, &render, &mut record_rng(9, i as u64)).unwrap();
            rec.heatmaps = None;
            assert_eq!(rec, full.records[i]);
        }
    }

    #[test]
    fn round_trip_and_checksums() {
        let (spec, ranges, render) = chair_setup();
        let dir = tempfile::tempdir().unwrap();
        for stored in [false, true] {
            let ds = generate_dataset(&spec, &ranges, &render, 100, 4, stored).unwrap();
            let path = dir.path().join(format!("ds-{stored}.skelds"));
            ds.save(&path).unwrap();
            assert_eq!(Dataset::load(&path).unwrap(), ds);
        }
        let a = generate_dataset(&spec, &ranges, &render, 30, 8, false).unwrap().to_bytes();
        let b = generate_dataset(&spec, &ranges, &render, 30, 8, false).unwrap().to_bytes();
        assert_eq!(hex_digest(&a), hex_digest(&b));
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let (spec, ranges, render) = chair_setup();
        let bytes = generate_dataset(&spec, &ranges, &render, 10, 4, false).unwrap().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 40] {
            let err = Dataset::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Integrity(_)), "{err}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0xff;
        assert!(matches!(Dataset::from_bytes(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn two_d_view_withholds_3d_fields() {
        let (spec, ranges, render) = chair_setup();
        let ds = generate_dataset(&spec, &ranges, &render, 5, 4, false).unwrap();
        let view = ds.to_2d_only();
        assert_eq!(view.len(), 5);
        assert_eq!(view.heatmaps(2).as_ref(), ds.heatmaps(2).as_ref());
        assert_eq!(view.observations[3].x, ds.records[3].x);
    }
}
