//! Experiment driver behind the `skelterp` binary.
//!
//! Every command reads one [`ExperimentConfig`], derives all randomness from
//! its master seed and writes fixed file names under the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{fit_baseline, FitInput, FitOptions, FitResult};
use crate::camera::{reproject, CameraPose, Keypoints2D};
use crate::error::{Error, Result};
use crate::heatmap::{corrupt_salt_pepper, GridGeometry, NoiseConfig, DEFAULT_SIGMA, STANDARD_NOISE_LEVELS};
use crate::metrics::{
    average_error, average_recall, azimuth_error, azimuth_recall, bbox_diagonal_2d, curves_to_csv, pck_curve, pcp,
    recall_curve, retrieve_nearest, rmse_recall_curve, rmse_structure, rmse_thresholds, CurveSeries, RetrievalMode,
    AE_BOUND, AZIMUTH_DELTAS,
};
use crate::nn::{
    finetune_projection_stage3, load_interpreter, load_refiner, predict_corpus, save_interpreter, save_refiner,
    train_interpreter_stage2, train_refiner, EpochStats, FinetuneConfig, Interpreter, RefinerConfig, RefinerModel,
    TrainConfig,
};
use crate::skeleton::{Interval, SkeletonSpec, StructParams};
use crate::synth::{generate_dataset, Dataset, RenderSettings, SamplingRanges, DEFAULT_PERTURBATION};

pub const TRAIN_DATASET: &str = "dataset.skelds";
pub const TEST_DATASET: &str = "dataset-test.skelds";
pub const SHIFT_DATASET: &str = "dataset-shift.skelds";
pub const STAGE2_MODEL: &str = "model-stage2.skelmlp";
pub const STAGE3_MODEL: &str = "model-stage3.skelmlp";
pub const REFINER_MODEL: &str = "refiner.skelmlp";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_STRUCTURE_SVG: &str = "sweep-structure.svg";
pub const SWEEP_AZIMUTH_SVG: &str = "sweep-azimuth.svg";
pub const MANIFEST: &str = "manifest.txt";

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
pub const EXIT_BAD_CONFIG: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
/// Any other failure.
pub const EXIT_FAILURE: i32 = 1;

/// Maps an error to the process exit status.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse(_) => EXIT_BAD_CONFIG,
        Error::MissingInput(_) => EXIT_MISSING_INPUT,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_FAILURE,
    }
}

/// How the fine-tuning corpus departs from the training distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    /// Multiplier on every free structural range.
    pub alpha_scale: f64,
    pub perturbation: f64,
    /// Replaces the depth range when set.
    pub depth: Option<Interval>,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            alpha_scale: 1.5,
            perturbation: 0.03,
            depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub shift_count: usize,
    pub grid: GridGeometry,
    pub sigma: f64,
    pub perturbation: f64,
    /// Overrides the default sampling ranges when set.
    pub ranges: Option<SamplingRanges>,
    pub store_heatmaps: bool,
    pub shift: ShiftConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 30_000,
            test_count: 1_000,
            shift_count: 2_000,
            grid: GridGeometry::default(),
            sigma: DEFAULT_SIGMA,
            perturbation: DEFAULT_PERTURBATION,
            ranges: None,
            store_heatmaps: false,
            shift: ShiftConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub rmse_thresholds: Vec<f64>,
    pub azimuth_deltas: Vec<f64>,
    pub pck_thresholds: Vec<f64>,
    pub ae_bound: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            rmse_thresholds: rmse_thresholds(),
            azimuth_deltas: AZIMUTH_DELTAS.to_vec(),
            pck_thresholds: (1..=10).map(|i| i as f64 / 50.0).collect(),
            ae_bound: AE_BOUND,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieveConfig {
    pub queries: usize,
    pub k: usize,
    pub mode: RetrievalMode,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        Self {
            queries: 5,
            k: 5,
            mode: RetrievalMode::ByStructure,
        }
    }
}

/// Everything one experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// A bundled spec name (`chair`, `tetrapod`) or a path to a spec file.
    pub spec: String,
    pub seed: u64,
    pub out: PathBuf,
    pub noise_levels: Vec<f64>,
    /// Feed stage II (and everything downstream) through the refiner.
    pub use_refiner: bool,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub refiner: RefinerConfig,
    pub baseline: FitOptions,
    pub metrics: MetricConfig,
    pub retrieve: RetrieveConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            spec: "chair".into(),
            seed: 0,
            out: PathBuf::from("out"),
            noise_levels: STANDARD_NOISE_LEVELS.to_vec(),
            use_refiner: false,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            refiner: RefinerConfig::default(),
            baseline: FitOptions::default(),
            metrics: MetricConfig::default(),
            retrieve: RetrieveConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; a relative spec path resolves against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        if SkeletonSpec::bundled(&cfg.spec).is_none() && Path::new(&cfg.spec).is_relative() {
            if let Some(dir) = path.parent() {
                cfg.spec = dir.join(&cfg.spec).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn skeleton(&self) -> Result<SkeletonSpec> {
        match SkeletonSpec::bundled(&self.spec) {
            Some(s) => Ok(s),
            None => SkeletonSpec::load(&self.spec),
        }
    }

    pub fn render(&self) -> RenderSettings {
        RenderSettings {
            geometry: self.data.grid,
            sigma: self.data.sigma,
        }
    }

    pub fn ranges(&self, spec: &SkeletonSpec) -> SamplingRanges {
        self.data.ranges.clone().unwrap_or_else(|| SamplingRanges {
            perturbation: self.data.perturbation,
            ..SamplingRanges::for_spec(spec)
        })
    }

    /// Training ranges with the configured shift applied.
    pub fn shift_ranges(&self, spec: &SkeletonSpec) -> SamplingRanges {
        let mut r = self.ranges(spec);
        let s = &self.data.shift;
        for a in r.alpha.iter_mut() {
            let mid = a.midpoint();
            let half = a.width() / 2.0 * s.alpha_scale;
            *a = Interval::new(mid - half, mid + half);
        }
        r.perturbation = s.perturbation;
        if let Some(d) = s.depth {
            r.t[2] = d;
        }
        r
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.skeleton().map_err(|e| match e {
            Error::MissingInput(p) => Error::MissingInput(p),
            other => Error::Config(format!("spec: {other}")),
        })?;
        self.data.grid.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.data.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.data.train_count == 0 || self.data.test_count == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        self.ranges(&spec).validate(&spec)?;
        self.shift_ranges(&spec).validate(&spec)?;
        if self.noise_levels.is_empty() || self.noise_levels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("noise levels must be a non-empty list in [0, 1]".into()));
        }
        self.train.validate()?;
        self.refiner.validate()?;
        if self.metrics.ae_bound <= 0.0 {
            return Err(Error::Config("AE bound must be positive".into()));
        }
        for grid in [&self.metrics.rmse_thresholds, &self.metrics.azimuth_deltas, &self.metrics.pck_thresholds] {
            if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Config("metric grids must be non-empty and strictly ascending".into()));
            }
        }
        if self.retrieve.k == 0 {
            return Err(Error::Config("retrieval k must be positive".into()));
        }
        Ok(())
    }

    /// Digest of the config with the output directory blanked, so identical
    /// experiments written to different places hash alike.
    pub fn sha256(&self) -> String {
        let canonical = Self {
            out: PathBuf::new(),
            ..self.clone()
        };
        let text = toml::to_string(&canonical).unwrap_or_default();
        crate::synth::hex_digest(text.as_bytes())
    }
}

/// Mixes the master seed with a purpose tag.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let digest = Sha256::digest(format!("{master}/{tag}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub count: Option<usize>,
    pub noise_levels: Option<Vec<f64>>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(n) = self.count {
            cfg.data.train_count = n;
            cfg.data.test_count = cfg.data.test_count.min(n);
            cfg.data.shift_count = cfg.data.shift_count.min(n);
        }
        if let Some(levels) = &self.noise_levels {
            cfg.noise_levels = levels.clone();
        }
    }
}

/// A loaded experiment bound to its output directory.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub spec: SkeletonSpec,
    command: String,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, command: &str) -> Result<Self> {
        config.validate()?;
        let spec = config.skeleton()?;
        fs::create_dir_all(&config.out)?;
        Ok(Self {
            config,
            spec,
            command: command.to_string(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.out.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingInput(p))
        }
    }

    fn load_dataset(&self, name: &str) -> Result<Dataset> {
        Dataset::load(self.require(name)?)
    }

    /// Writes a file and records it in the manifest.
    fn emit(&self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.path(name), bytes)?;
        self.record(name)
    }

    fn record(&self, name: &str) -> Result<()> {
        let line = format!(
            "{name}\tcommand={}\tconfig_sha256={}\tseed={}\tversion={}\n",
            self.command,
            self.config.sha256(),
            self.config.seed,
            crate::VERSION
        );
        let mut manifest = fs::read_to_string(self.path(MANIFEST)).unwrap_or_default();
        manifest.push_str(&line);
        fs::write(self.path(MANIFEST), manifest)?;
        Ok(())
    }

    fn provenance(&self) -> serde_json::Value {
        serde_json::json!({
            "command": self.command,
            "config_sha256": self.config.sha256(),
            "seed": self.config.seed,
            "version": crate::VERSION,
        })
    }

    fn refiner_if_used(&self, interp_refined: bool) -> Result<Option<RefinerModel>> {
        if interp_refined {
            Ok(Some(load_refiner(self.require(REFINER_MODEL)?)?.0))
        } else {
            Ok(None)
        }
    }

    /// Generates the training, test and shifted corpora.
    pub fn gen(&self) -> Result<()> {
        let c = &self.config;
        let render = c.render();
        let sets = [
            (TRAIN_DATASET, c.ranges(&self.spec), c.data.train_count, "train"),
            (TEST_DATASET, c.ranges(&self.spec), c.data.test_count, "test"),
            (SHIFT_DATASET, c.shift_ranges(&self.spec), c.data.shift_count, "shift"),
        ];
        for (name, ranges, count, tag) in sets {
            if count == 0 {
                continue;
            }
            let ds = generate_dataset(&self.spec, &ranges, &render, count, derive_seed(c.seed, tag), c.data.store_heatmaps)?;
            self.emit(name, &ds.to_bytes())?;
            log::info!("{name}: {count} records, resample rate {:.4}", ds.resample_rate());
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.config.seed, &format!("stage2/{}", self.config.train.seed)),
            ..self.config.train.clone()
        }
    }

    /// Stage II on the synthetic training corpus.
    pub fn train(&self) -> Result<Interpreter<f32>> {
        let ds = self.load_dataset(TRAIN_DATASET)?;
        let refiner = self.refiner_if_used(self.config.use_refiner)?;
        let report = train_interpreter_stage2::<f32>(&ds, &self.spec, refiner.as_ref(), &self.train_config())?;
        save_interpreter(self.path(STAGE2_MODEL), &report.interpreter, self.provenance())?;
        self.record(STAGE2_MODEL)?;
        self.emit("loss-trace-stage2.csv", trace_csv(&report.trace).as_bytes())?;
        Ok(report.interpreter)
    }

    /// Stage III on the shifted 2D-only corpus.
    pub fn finetune(&self) -> Result<()> {
        let (interp, _) = load_interpreter(self.require(STAGE2_MODEL)?)?;
        let data = self.load_dataset(SHIFT_DATASET)?.to_2d_only();
        let refiner = self.refiner_if_used(interp.refined_inputs)?;
        let cfg = FinetuneConfig {
            seed: derive_seed(self.config.seed, &format!("stage3/{}", self.config.finetune.seed)),
            ..self.config.finetune.clone()
        };
        let report = finetune_projection_stage3(&interp, &data, &self.spec, refiner.as_ref(), &cfg)?;
        save_interpreter(self.path(STAGE3_MODEL), &report.interpreter, self.provenance())?;
        self.record(STAGE3_MODEL)?;
        self.emit("loss-trace-stage3.csv", trace_csv(&report.trace).as_bytes())?;
        let summary = format!(
            "held-out mean reprojection error\nbefore,{}\nafter,{}\ndomain_failures_before,{}\ndomain_failures_after,{}\n",
            report.before.mean_error, report.after.mean_error, report.before.domain_failures, report.after.domain_failures
        );
        print!("{summary}");
        self.emit("finetune-summary.csv", summary.as_bytes())
    }

    pub fn train_refiner(&self) -> Result<()> {
        let ds = self.load_dataset(TRAIN_DATASET)?;
        let cfg = RefinerConfig {
            seed: derive_seed(self.config.seed, &format!("refiner/{}", self.config.refiner.seed)),
            ..self.config.refiner.clone()
        };
        let report = train_refiner(&ds, &cfg)?;
        save_refiner(self.path(REFINER_MODEL), &report.model, self.provenance())?;
        self.record(REFINER_MODEL)?;
        self.emit("loss-trace-refiner.csv", trace_csv(&report.trace).as_bytes())
    }

    fn noise_seed(&self, level_idx: usize, index: usize) -> u64 {
        derive_seed(self.config.seed, &format!("sweep/{level_idx}/{index}"))
    }

    /// Interpreter and baseline metrics on the clean test corpus.
    pub fn eval(&self) -> Result<()> {
        let ds = self.load_dataset(TEST_DATASET)?;
        let (interp, _) = load_interpreter(self.require(STAGE2_MODEL)?)?;
        let refiner = self.refiner_if_used(interp.refined_inputs)?;
        let idx: Vec<usize> = (0..ds.len()).collect();
        let preds = predict_corpus(&interp, &ds, &idx, &|_| None, refiner.as_ref())?;
        let fits = self.baseline_fits(&ds, None);
        let fitted: Vec<Option<(StructParams, CameraPose)>> =
            fits.iter().map(|f| f.as_ref().ok().map(|f| (f.params.clone(), f.pose))).collect();
        let interp_preds: Vec<Option<(StructParams, CameraPose)>> = preds.into_iter().map(Some).collect();
        let mut curves = Vec::new();
        let mut summary = String::from("method,metric,value\n");
        for (method, p) in [("interpreter", &interp_preds), ("baseline", &fitted)] {
            let m = self.method_metrics(&ds, p)?;
            for c in m.curves {
                curves.push(CurveSeries {
                    label: format!("{method}/{}", c.label),
                    ..c
                });
            }
            for (name, v) in m.scalars {
                let _ = writeln!(summary, "{method},{name},{v}");
            }
        }
        print!("{summary}");
        self.emit("eval.csv", curves_to_csv(&curves).as_bytes())?;
        self.emit("eval-summary.csv", summary.as_bytes())
    }

    fn baseline_fits(&self, ds: &Dataset, noise: Option<(usize, f64)>) -> Vec<Result<FitResult>> {
        (0..ds.len())
            .into_par_iter()
            .map(|i| {
                let clean = ds.heatmaps(i);
                let hm = match noise {
                    Some((li, level)) if level > 0.0 => corrupt_salt_pepper(
                        &clean,
                        &NoiseConfig {
                            level,
                            seed: self.noise_seed(li, i),
                        },
                    ),
                    _ => clean.into_owned(),
                };
                fit_baseline(FitInput::Heatmaps(&hm), &self.spec, &self.config.baseline)
            })
            .collect()
    }

    fn method_metrics(&self, ds: &Dataset, preds: &[Option<(StructParams, CameraPose)>]) -> Result<MethodMetrics> {
        let mc = &self.config.metrics;
        let (rmse, az) = structure_and_azimuth(ds, preds, &self.spec);
        let rc = rmse_recall_curve(&rmse, &mc.rmse_thresholds)?;
        let ac = recall_curve(&az, &mc.azimuth_deltas, "azimuth_recall")?;
        let mut scalars = vec![
            ("structure_avg_recall".to_string(), average_recall(&rc)),
            ("azimuth_avg_recall".to_string(), average_recall(&ac)),
        ];
        let mut curves = vec![rc, ac];
        // 2D families on instances whose prediction projects
        let cell = ds.render().geometry.cell_size;
        let mut pred2d = Vec::new();
        let mut gt2d = Vec::new();
        for (rec, p) in ds.records.iter().zip(preds) {
            let projected = p.as_ref().and_then(|(a, pose)| reproject(&self.spec, a, pose).ok());
            // failed instances are scored as predicting the image origin
            pred2d.push(projected.unwrap_or_else(|| Keypoints2D::new(nalgebra::Matrix2xX::zeros(rec.x.n_keypoints()))));
            gt2d.push(rec.x.clone());
        }
        let norms: Vec<f64> = gt2d.iter().map(|g| bbox_diagonal_2d(g).max(1e-12)).collect();
        let mut pck = pck_curve(&pred2d, &gt2d, &norms, &mc.pck_thresholds)?;
        pck.label = "pck".into();
        let tau = vec![ds.render().sigma * cell; self.spec.n_keypoints()];
        scalars.push(("pcp".into(), pcp(&pred2d, &gt2d, &tau)?));
        let in_cells = |v: &[Keypoints2D]| -> Vec<Keypoints2D> {
            v.iter().map(|k| Keypoints2D::new(&k.coords / cell)).collect()
        };
        scalars.push(("ae_cells".into(), average_error(&in_cells(&pred2d), &in_cells(&gt2d), mc.ae_bound)?));
        scalars.push(("mean_rmse".into(), finite_mean(&rmse)));
        curves.push(pck);
        Ok(MethodMetrics { curves, scalars })
    }

    /// The noise sweep comparing the interpreter with argmax + baseline.
    pub fn sweep(&self) -> Result<SweepTable> {
        let ds = self.load_dataset(TEST_DATASET)?;
        let (interp, _) = load_interpreter(self.require(STAGE2_MODEL)?)?;
        let refiner = self.refiner_if_used(interp.refined_inputs)?;
        let table = run_sweep(
            &ds,
            &self.spec,
            &interp,
            refiner.as_ref(),
            &self.config.noise_levels,
            &self.config.baseline,
            &self.config.metrics,
            |li, i| self.noise_seed(li, i),
        )?;
        let csv = table.to_csv();
        self.emit(SWEEP_CSV, csv.as_bytes())?;
        self.write_plots(&csv)?;
        Ok(table)
    }

    fn write_plots(&self, csv: &str) -> Result<()> {
        self.emit(SWEEP_STRUCTURE_SVG, plot_sweep(csv, "structure_avg_recall", "Average structure recall")?.as_bytes())?;
        self.emit(SWEEP_AZIMUTH_SVG, plot_sweep(csv, "azimuth_avg_recall", "Average azimuth recall")?.as_bytes())
    }

    /// Re-plots the sweep from its CSV.
    pub fn plot(&self) -> Result<()> {
        let csv = fs::read_to_string(self.require(SWEEP_CSV)?)?;
        self.write_plots(&csv)
    }

    /// Per-instance baseline results on the clean test corpus.
    pub fn baseline(&self) -> Result<()> {
        let ds = self.load_dataset(TEST_DATASET)?;
        let fits = self.baseline_fits(&ds, None);
        let mut csv = String::from("index,rmse,azimuth_error,residual,iterations,converged\n");
        for (i, (rec, fit)) in ds.records.iter().zip(&fits).enumerate() {
            match fit {
                Ok(f) => {
                    let rmse = rmse_structure(&f.params, &rec.params, &self.spec).unwrap_or(f64::INFINITY);
                    let _ = writeln!(
                        csv,
                        "{i},{rmse},{},{},{},{}",
                        azimuth_error(&f.pose, &rec.pose),
                        f.residual,
                        f.iterations,
                        f.converged
                    );
                }
                Err(e) => {
                    let _ = writeln!(csv, "{i},inf,180,inf,0,false # {e}");
                }
            }
        }
        self.emit("baseline.csv", csv.as_bytes())
    }

    /// Nearest neighbours of the first few test instances among all predictions.
    pub fn retrieve(&self) -> Result<()> {
        let ds = self.load_dataset(TEST_DATASET)?;
        let (interp, _) = load_interpreter(self.require(STAGE2_MODEL)?)?;
        let refiner = self.refiner_if_used(interp.refined_inputs)?;
        let idx: Vec<usize> = (0..ds.len()).collect();
        let preds = predict_corpus(&interp, &ds, &idx, &|_| None, refiner.as_ref())?;
        let rc = &self.config.retrieve;
        let mode = match rc.mode {
            RetrievalMode::ByStructure => "by-structure",
            RetrievalMode::ByViewpoint => "by-viewpoint",
        };
        let mut csv = String::from("query,rank,index,distance,mode\n");
        for q in 0..rc.queries.min(preds.len()) {
            let hits = retrieve_nearest((&preds[q].0, &preds[q].1), &preds, rc.mode, rc.k)?;
            for (rank, (i, d)) in hits.iter().enumerate() {
                let _ = writeln!(csv, "{q},{},{i},{d},{mode}", rank + 1);
            }
        }
        print!("{csv}");
        self.emit("retrieve.csv", csv.as_bytes())
    }
}

struct MethodMetrics {
    curves: Vec<CurveSeries>,
    scalars: Vec<(String, f64)>,
}

fn finite_mean(v: &[f64]) -> f64 {
    // failures carry an infinite error; they are counted at the largest finite value seen
    let cap = v.iter().copied().filter(|x| x.is_finite()).fold(0.0, f64::max);
    v.iter().map(|x| if x.is_finite() { *x } else { cap }).sum::<f64>() / v.len().max(1) as f64
}

/// Canonical RMSE and azimuth error per instance; a missing or degenerate
/// prediction scores infinite RMSE and a 180 degree error.
pub fn structure_and_azimuth(
    ds: &Dataset,
    preds: &[Option<(StructParams, CameraPose)>],
    spec: &SkeletonSpec,
) -> (Vec<f64>, Vec<f64>) {
    ds.records
        .iter()
        .zip(preds)
        .map(|(rec, p)| match p {
            Some((a, pose)) => (
                rmse_structure(a, &rec.params, spec).unwrap_or(f64::INFINITY),
                azimuth_error(pose, &rec.pose),
            ),
            None => (f64::INFINITY, 180.0),
        })
        .unzip()
}

/// One row of the sweep CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub noise_level: f64,
    pub method: String,
    pub metric: String,
    /// `None` for scalar summaries.
    pub threshold: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("noise_level,method,metric,threshold,value\n");
        for r in &self.rows {
            let t = r.threshold.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{t},{}", r.noise_level, r.method, r.metric, r.value);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("noise_level,method,metric,threshold,value") {
            return Err(Error::Parse("sweep CSV header mismatch".into()));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("sweep CSV: {e}")));
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 5 {
                    return Err(Error::Parse(format!("sweep CSV row has {} fields", f.len())));
                }
                Ok(SweepRow {
                    noise_level: parse(f[0])?,
                    method: f[1].to_string(),
                    metric: f[2].to_string(),
                    threshold: if f[3].is_empty() { None } else { Some(parse(f[3])?) },
                    value: parse(f[4])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// Scalar value for `(level, method, metric)`.
    pub fn scalar(&self, level: f64, method: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.noise_level == level && r.method == method && r.metric == metric && r.threshold.is_none())
            .map(|r| r.value)
    }
}

/// Evaluates both pipelines at each noise level on identical corrupted heatmaps.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    ds: &Dataset,
    spec: &SkeletonSpec,
    interp: &Interpreter<f32>,
    refiner: Option<&RefinerModel>,
    levels: &[f64],
    baseline: &FitOptions,
    metrics: &MetricConfig,
    noise_seed: impl Fn(usize, usize) -> u64 + Sync,
) -> Result<SweepTable> {
    let mut table = SweepTable::default();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for (li, &level) in levels.iter().enumerate() {
        let noise = |i: usize| (level > 0.0).then(|| NoiseConfig { level, seed: noise_seed(li, i) });
        let preds: Vec<_> = predict_corpus(interp, ds, &idx, &noise, refiner)?.into_iter().map(Some).collect();
        let fits: Vec<Option<(StructParams, CameraPose)>> = idx
            .par_iter()
            .map(|&i| {
                let clean = ds.heatmaps(i);
                let hm = match noise(i) {
                    Some(cfg) => corrupt_salt_pepper(&clean, &cfg),
                    None => clean.into_owned(),
                };
                fit_baseline(FitInput::Heatmaps(&hm), spec, baseline).ok().map(|f| (f.params, f.pose))
            })
            .collect();
        for (method, p) in [("interpreter", &preds), ("baseline", &fits)] {
            let (rmse, az) = structure_and_azimuth(ds, p, spec);
            let rc = rmse_recall_curve(&rmse, &metrics.rmse_thresholds)?;
            let mut push = |metric: &str, threshold: Option<f64>, value: f64| {
                table.rows.push(SweepRow {
                    noise_level: level,
                    method: method.into(),
                    metric: metric.into(),
                    threshold,
                    value,
                })
            };
            for (t, v) in rc.thresholds.iter().zip(&rc.values) {
                push("structure_recall", Some(*t), *v);
            }
            let mut az_values = Vec::new();
            for &d in &metrics.azimuth_deltas {
                let v = azimuth_recall(&az, d)?;
                az_values.push(v);
                push("azimuth_recall", Some(d), v);
            }
            push("structure_avg_recall", None, average_recall(&rc));
            push("azimuth_avg_recall", None, az_values.iter().sum::<f64>() / az_values.len() as f64);
            push("mean_rmse", None, finite_mean(&rmse));
            log::info!(
                "noise {level}: {method} structure {:.4} azimuth {:.4}",
                average_recall(&rc),
                az_values.iter().sum::<f64>() / az_values.len() as f64
            );
        }
    }
    Ok(table)
}

/// `epoch,train_loss,val_loss` rows.
pub fn trace_csv(trace: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for e in trace {
        let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
    }
    out
}

/// A self-contained SVG line chart of one scalar sweep metric, one line per
/// method. The output depends only on the CSV text.
pub fn plot_sweep(csv: &str, metric: &str, title: &str) -> Result<String> {
    let table = SweepTable::from_csv(csv)?;
    let mut methods: Vec<String> = Vec::new();
    let mut levels: Vec<f64> = Vec::new();
    for r in table.rows.iter().filter(|r| r.metric == metric && r.threshold.is_none()) {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
        if !levels.contains(&r.noise_level) {
            levels.push(r.noise_level);
        }
    }
    if levels.is_empty() {
        return Err(Error::Parse(format!("sweep CSV has no rows for {metric}")));
    }
    levels.sort_by(f64::total_cmp);
    let (w, h, pad) = (480.0, 320.0, 50.0);
    let x_max = levels.last().copied().unwrap_or(1.0).max(1e-9);
    let px = |x: f64| pad + (x / x_max) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - y.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        svg,
        r#"<polyline points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="none" stroke="black"/>"#,
        pad,
        pad,
        pad,
        h - pad,
        w - pad,
        h - pad
    );
    for tick in 0..=4 {
        let y = tick as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{y:.2}</text>"#,
            pad - 4.0,
            py(y) + 3.0
        );
    }
    for &l in &levels {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{l}</text>"#,
            px(l),
            h - pad + 14.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">salt-and-pepper level</text>"#,
        w / 2.0,
        h - 10.0
    );
    for (mi, m) in methods.iter().enumerate() {
        let color = colors[mi % colors.len()];
        let pts: Vec<String> = levels
            .iter()
            .filter_map(|&l| table.scalar(l, m, metric).map(|v| format!("{:.2},{:.2}", px(l), py(v))))
            .collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{color}">{m}</text>"#,
            w - pad - 80.0,
            pad + 14.0 * (mi as f64 + 1.0)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
