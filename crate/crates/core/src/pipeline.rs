//! End-to-end orchestration: configuration, the five-stage analysis run with
//! its artifacts and manifest, and seeded replication of the simulation
//! tables.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::{default_num_basis, BSplineBasis, CenteredBasis, MAX_ORDER};
use crate::covest::{
    estimate_covariance, write_spectrum_csv, write_surface_csv, CovOptions, CovarianceModel, ResidualSet,
};
use crate::data::{load_long_csv, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::gscad::{
    bic_path, write_scad_curves_csv, write_structure_csv, BicPath, GscadDesign, ModelStructure, TuningConfig,
};
use crate::ksmooth::KernelFamily;
use crate::nis::{mmms, screen, write_screen_csv, ScreenResult, ScreenRule};
use crate::profile::{
    fit_refined, fit_semivarying, pilot_residuals, write_constants_csv, write_curves_csv, ProfileOptions, RefineMethod,
    SemiVaryingFit, SemiVaryingSpec,
};
use crate::published;
use crate::simgen::{
    align_estimate, estimation_metrics, gen_case_with, replicate_rng, selection_metrics, CaseId, CaseSpec,
    EstimationMetrics, ReplicateEstimate, ReplicateSelection, SelectionMetrics, Summary, TruthRecord,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputConfig {
    /// Long-format CSV: `subject,time,y,<covariates...>`.
    Csv {
        path: PathBuf,
        #[serde(default)]
        normalize_time: bool,
    },
    /// A simulated dataset drawn from `case` with `seed`.
    Simulated { case: CaseSpec, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    /// Basis dimension `L`; `None` uses `clamp(round(2.5 n^{1/5}), order, 15)`.
    pub dim: Option<usize>,
    pub order: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { dim: None, order: 3 }
    }
}

impl BasisConfig {
    fn validate(&self) -> Result<()> {
        if self.order == 0 || self.order > MAX_ORDER {
            return Err(Error::Config(format!("basis order must be in 1..={MAX_ORDER}, got {}", self.order)));
        }
        match self.dim {
            Some(d) if d < self.order => {
                Err(Error::Config(format!("basis dimension {d} is smaller than the order {}", self.order)))
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self, n_subjects: usize) -> Result<BSplineBasis> {
        BSplineBasis::new(self.dim.unwrap_or_else(|| default_num_basis(n_subjects, self.order)), self.order)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandwidthConfig {
    pub kernel: KernelFamily,
    pub h1: Option<f64>,
    pub h1_grid: Option<Vec<f64>>,
    pub h2: Option<f64>,
    pub h2_grid: Option<Vec<f64>>,
    pub h3: Option<f64>,
    pub h3_grid: Option<Vec<f64>>,
    /// Covariance surface grid size; `None` uses 101.
    pub surface_grid: Option<usize>,
}

impl BandwidthConfig {
    fn validate(&self) -> Result<()> {
        for (name, h) in [("h1", self.h1), ("h2", self.h2), ("h3", self.h3)] {
            if let Some(h) = h {
                if !(h > 0.0 && h.is_finite()) {
                    return Err(Error::Config(format!("{name} must be positive, got {h}")));
                }
            }
        }
        for (name, g) in [("h1_grid", &self.h1_grid), ("h2_grid", &self.h2_grid), ("h3_grid", &self.h3_grid)] {
            if let Some(g) = g {
                if g.is_empty() || g.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
                    return Err(Error::Config(format!("{name} must be a nonempty list of positive bandwidths")));
                }
            }
        }
        if self.surface_grid == Some(0) {
            return Err(Error::Config("surface_grid must be positive".into()));
        }
        Ok(())
    }

    fn profile(&self, bootstrap: usize, seed: u64) -> ProfileOptions {
        ProfileOptions { kernel: self.kernel, h1: self.h1, h1_grid: self.h1_grid.clone(), bootstrap, seed }
    }

    fn covariance(&self) -> CovOptions {
        let mut c = CovOptions {
            kernel: self.kernel,
            h2: self.h2,
            h3: self.h3,
            h2_grid: self.h2_grid.clone(),
            h3_grid: self.h3_grid.clone(),
            ..Default::default()
        };
        if let Some(g) = self.surface_grid {
            c.grid_size = g;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    pub enabled: bool,
    pub method: RefineMethod,
    /// Covariance re-estimation / refit passes.
    pub iterations: usize,
    /// Subject bootstrap replicates for standard errors of the reported fit.
    pub bootstrap: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self { enabled: true, method: RefineMethod::default(), iterations: 1, bootstrap: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: InputConfig,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub screening: ScreenRule,
    #[serde(default)]
    pub scad: TuningConfig,
    #[serde(default)]
    pub bandwidths: BandwidthConfig,
    #[serde(default)]
    pub refinement: RefinementConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Bootstrap seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl PipelineConfig {
    pub fn new(input: InputConfig) -> Self {
        Self {
            input,
            basis: BasisConfig::default(),
            screening: ScreenRule::default(),
            scad: TuningConfig::default(),
            bandwidths: BandwidthConfig::default(),
            refinement: RefinementConfig::default(),
            output: None,
            seed: 0,
            threads: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let InputConfig::Simulated { case, .. } = &self.input {
            case.validate()?;
        }
        self.basis.validate()?;
        self.screening.validate()?;
        self.scad.validate()?;
        self.bandwidths.validate()?;
        if self.refinement.enabled && self.refinement.iterations == 0 {
            return Err(Error::Config("refinement iterations must be at least 1".into()));
        }
        validate_threads(self.threads)
    }
}

fn validate_threads(t: Option<usize>) -> Result<()> {
    if t == Some(0) {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    Ok(())
}

/// Runs `f` on a pool of `threads` workers, or on the current pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

pub fn load_input(input: &InputConfig) -> Result<(LongitudinalDataset, Option<TruthRecord>)> {
    match input {
        InputConfig::Csv { path, normalize_time } => Ok((load_long_csv(path, *normalize_time)?, None)),
        InputConfig::Simulated { case, seed } => {
            let (ds, truth) = gen_case_with(case, &mut rand_chacha::ChaCha8Rng::seed_from_u64_compat(*seed))?;
            Ok((ds, Some(truth)))
        }
    }
}

trait SeedCompat {
    fn seed_from_u64_compat(seed: u64) -> Self;
}

impl SeedCompat for rand_chacha::ChaCha8Rng {
    fn seed_from_u64_compat(seed: u64) -> Self {
        <Self as rand::SeedableRng>::seed_from_u64(seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementPass {
    pub h2: f64,
    pub h3: f64,
    pub retained_eigenvalues: usize,
    pub variance_floored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: PipelineConfig,
    pub status: String,
    pub error: Option<String>,
    pub basis_dim: Option<usize>,
    pub keep_count: Option<usize>,
    pub lambda: Option<f64>,
    pub h1: Option<f64>,
    pub refinement: Vec<RefinementPass>,
    pub timings: Vec<StageTiming>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, config: &PipelineConfig) -> Self {
        Self {
            tool: "vcselect".into(),
            version: VERSION.into(),
            command: command.into(),
            config: config.clone(),
            status: "running".into(),
            error: None,
            basis_dim: None,
            keep_count: None,
            lambda: None,
            h1: None,
            refinement: vec![],
            timings: vec![],
            outputs: vec![],
        }
    }
}

/// Everything a run produced; stages after a disabled refinement are `None`.
#[derive(Clone, Debug)]
pub struct AnalysisReport {
    pub names: Vec<String>,
    pub truth: Option<TruthRecord>,
    pub screen: ScreenResult,
    pub bic: BicPath,
    pub structure: ModelStructure,
    pub initial: SemiVaryingFit,
    pub covariance: Option<CovarianceModel>,
    pub refined: Option<SemiVaryingFit>,
    pub manifest: RunManifest,
}

impl AnalysisReport {
    /// The fit whose constants and curves are reported as final.
    pub fn final_fit(&self) -> &SemiVaryingFit {
        self.refined.as_ref().unwrap_or(&self.initial)
    }
}

struct Artifacts {
    dir: Option<PathBuf>,
    manifest: RunManifest,
    clock: Instant,
}

impl Artifacts {
    fn new(dir: Option<PathBuf>, manifest: RunManifest) -> Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
        }
        Ok(Self { dir, manifest, clock: Instant::now() })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        if let Some(d) = &self.dir {
            let mut w = BufWriter::new(File::create(d.join(name))?);
            f(&mut w)?;
            w.flush()?;
            self.manifest.outputs.push(name.into());
        }
        Ok(())
    }

    fn stage<T>(&mut self, stage: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self).map_err(|e| e.at_stage(stage));
        self.manifest.timings.push(StageTiming { stage: stage.into(), seconds: start.elapsed().as_secs_f64() });
        out
    }

    fn finish(mut self, result: &Result<()>) -> Result<RunManifest> {
        self.manifest.timings.push(StageTiming { stage: "total".into(), seconds: self.clock.elapsed().as_secs_f64() });
        match result {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "failed".into();
                self.manifest.error = Some(e.to_string());
            }
        }
        if let Some(d) = &self.dir {
            let mut m = self.manifest.clone();
            m.outputs.push("manifest.json".into());
            let mut f = BufWriter::new(File::create(d.join("manifest.json"))?);
            serde_json::to_writer_pretty(&mut f, &m)?;
            f.flush()?;
            self.manifest = m;
        }
        Ok(self.manifest)
    }
}

fn write_bic_csv<W: Write>(path: &BicPath, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lambda", "bic", "converged", "n_constant", "n_varying", "selected"])?;
    for (i, f) in path.fits.iter().enumerate() {
        w.write_record([
            path.lambdas[i].to_string(),
            path.bic[i].to_string(),
            (f.converged as u8).to_string(),
            f.structure.constant.len().to_string(),
            f.structure.varying.len().to_string(),
            ((i == path.best) as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Screening only: ranks, kept set and a manifest.
pub fn run_screen_only(config: &PipelineConfig) -> Result<(ScreenResult, RunManifest)> {
    config.validate()?;
    with_threads(config.threads, || {
        let mut art = Artifacts::new(config.output.clone(), RunManifest::new("screen-only", config))?;
        let mut out = None;
        let res = (|| {
            let (ds, _) = art.stage("input", |_| load_input(&config.input))?;
            let basis = config.basis.build(ds.n_subjects()).map_err(|e| e.at_stage("basis"))?;
            art.manifest.basis_dim = Some(basis.dim());
            let sc = art.stage("screening", |_| screen(&ds, &basis, config.screening))?;
            art.manifest.keep_count = Some(sc.keep_count);
            art.write("screening.csv", |w| write_screen_csv(&sc, ds.names(), w))?;
            out = Some(sc);
            Ok(())
        })();
        let manifest = art.finish(&res)?;
        res.map(|_| (out.unwrap(), manifest))
    })?
}

/// Screening, group SCAD with BIC, initial profile fit, covariance
/// estimation and the refined fit. Artifacts are written as each stage
/// completes, so a failing stage leaves the earlier ones on disk.
pub fn run_pipeline(config: &PipelineConfig) -> Result<AnalysisReport> {
    config.validate()?;
    with_threads(config.threads, || {
        let mut art = Artifacts::new(config.output.clone(), RunManifest::new("fit", config))?;
        let mut report = None;
        let res = run_stages(config, &mut art).map(|r| report = Some(r));
        let manifest = art.finish(&res)?;
        res.map(|_| {
            let mut r = report.unwrap();
            r.manifest = manifest;
            r
        })
    })?
}

/// Relative-change stop for repeated covariance/coefficient passes.
pub const ITERATE_TOL: f64 = 1e-4;

/// Largest change between two fits' constants and curves, relative to the
/// larger of 1 and the previous magnitude.
fn relative_change(prev: &SemiVaryingFit, next: &SemiVaryingFit) -> f64 {
    let a = prev.beta1.iter().chain(prev.curves.iter().flatten());
    let b = next.beta1.iter().chain(next.curves.iter().flatten());
    let (mut num, mut den) = (0.0f64, 1.0f64);
    for (x, y) in a.zip(b) {
        num = num.max((x - y).abs());
        den = den.max(x.abs());
    }
    num / den
}

fn run_stages(config: &PipelineConfig, art: &mut Artifacts) -> Result<AnalysisReport> {
    let (ds, truth) = art.stage("input", |_| load_input(&config.input))?;
    let names = ds.names().to_vec();
    let basis = config.basis.build(ds.n_subjects()).map_err(|e| e.at_stage("basis"))?;
    art.manifest.basis_dim = Some(basis.dim());

    let sc = art.stage("screening", |_| screen(&ds, &basis, config.screening))?;
    art.manifest.keep_count = Some(sc.keep_count);
    art.write("screening.csv", |w| write_screen_csv(&sc, &names, w))?;

    let centered = CenteredBasis::new(basis);
    let path = art.stage("selection", |_| {
        let design = GscadDesign::new(&ds, &centered, &sc.kept)?;
        bic_path(&design, &config.scad)
    })?;
    let best = path.best_fit().clone();
    art.manifest.lambda = Some(path.best_lambda());
    art.write("bic_path.csv", |w| write_bic_csv(&path, w))?;
    art.write("structure.csv", |w| write_structure_csv(&best, &names, w))?;
    art.write("gscad_curves.csv", |w| write_scad_curves_csv(&best, &centered, &names, w))?;
    let structure = best.structure.clone();
    let spec = SemiVaryingSpec::new(structure.constant_indices(), structure.varying.clone());

    let refine = config.refinement.enabled;
    let boot = config.refinement.bootstrap;
    let initial = art.stage("initial_fit", |_| {
        fit_semivarying(&ds, &spec, &config.bandwidths.profile(if refine { 0 } else { boot }, config.seed), None)
    })?;
    art.manifest.h1 = Some(initial.h1);
    art.write("initial_constants.csv", |w| write_constants_csv(&initial, &names, w))?;
    art.write("initial_curves.csv", |w| write_curves_csv(&initial, &names, w))?;

    let (mut covariance, mut refined) = (None, None);
    if refine {
        let mut residuals = initial.residuals.clone();
        let iters = config.refinement.iterations;
        let method = config.refinement.method;
        let pilot = match method {
            RefineMethod::ConditionalResidual => {
                Some(art.stage("pilot_fit", |_| pilot_residuals(&ds, &spec, &config.bandwidths.profile(0, 0)))?)
            }
            RefineMethod::Whitened => None,
        };
        for _ in 0..iters {
            let model = art.stage("covariance", |_| {
                let res = ResidualSet::from_values(&ds, &residuals)?;
                Ok(estimate_covariance(&res, &config.bandwidths.covariance())?.model)
            })?;
            art.manifest.refinement.push(RefinementPass {
                h2: model.h2,
                h3: model.h3,
                retained_eigenvalues: model.retained,
                variance_floored: model.sigma2.floored,
            });
            let fit = art.stage("refined_fit", |_| {
                let mut opts = config.bandwidths.profile(0, config.seed);
                opts.h1 = Some(initial.h1);
                fit_refined(&ds, &spec, &opts, &model.dataset_lambdas(&ds), method, pilot.as_deref())
            })?;
            let change = relative_change(refined.as_ref().unwrap_or(&initial), &fit);
            residuals = fit.residuals.clone();
            covariance = Some(model);
            refined = Some(fit);
            if change < ITERATE_TOL {
                break;
            }
        }
        if boot > 0 {
            let model = covariance.as_ref().unwrap();
            refined = Some(art.stage("bootstrap", |_| {
                let mut opts = config.bandwidths.profile(boot, config.seed);
                opts.h1 = Some(initial.h1);
                fit_refined(&ds, &spec, &opts, &model.dataset_lambdas(&ds), method, pilot.as_deref())
            })?);
        }
        let (model, fit) = (covariance.as_ref().unwrap(), refined.as_ref().unwrap());
        art.write("covariance_surface.csv", |w| write_surface_csv(model, w))?;
        art.write("covariance_spectrum.csv", |w| write_spectrum_csv(model, w))?;
        art.write("refined_constants.csv", |w| write_constants_csv(fit, &names, w))?;
        art.write("refined_curves.csv", |w| write_curves_csv(fit, &names, w))?;
    }
    Ok(AnalysisReport {
        names,
        truth,
        screen: sc,
        bic: path,
        structure,
        initial,
        covariance,
        refined,
        manifest: art.manifest.clone(),
    })
}

// ---------------------------------------------------------------------------
// Table replication

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub case: CaseId,
    pub n: usize,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateConfig {
    /// 1: selection table, 2: estimation table.
    pub table: u8,
    pub columns: Vec<ColumnSpec>,
    pub reps: usize,
    pub seed: u64,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_s0")]
    pub s0: usize,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub screening: ScreenRule,
    #[serde(default)]
    pub scad: TuningConfig,
    #[serde(default)]
    pub bandwidths: BandwidthConfig,
    /// Estimation table: also run screening and selection for the practical
    /// estimate.
    #[serde(default)]
    pub practical: bool,
    #[serde(default)]
    pub refine_method: RefineMethod,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_m() -> usize {
    20
}
fn default_p() -> usize {
    500
}
fn default_s0() -> usize {
    10
}

impl ReplicateConfig {
    /// Published columns of the chosen table.
    pub fn new(table: u8, reps: usize, seed: u64) -> Self {
        let columns = match table {
            1 => published::table1_columns().into_iter().map(|(case, n, rho)| ColumnSpec { case, n, rho }).collect(),
            _ => [CaseId::I, CaseId::II, CaseId::III]
                .into_iter()
                .map(|case| ColumnSpec { case, n: 100, rho: 0.1 })
                .collect(),
        };
        Self {
            table,
            columns,
            reps,
            seed,
            m: default_m(),
            p: default_p(),
            s0: default_s0(),
            basis: BasisConfig::default(),
            screening: ScreenRule::default(),
            scad: TuningConfig::default(),
            bandwidths: BandwidthConfig::default(),
            practical: false,
            refine_method: RefineMethod::default(),
            output: None,
            threads: None,
        }
    }

    pub fn case_spec(&self, c: &ColumnSpec) -> CaseSpec {
        CaseSpec { case: c.case, n: c.n, m: self.m, p: self.p, rho: c.rho, s0: self.s0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.table, 1 | 2) {
            return Err(Error::Config(format!("table must be 1 or 2, got {}", self.table)));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.columns.is_empty() {
            return Err(Error::Config("no table columns requested".into()));
        }
        for c in &self.columns {
            self.case_spec(c).validate()?;
        }
        self.basis.validate()?;
        self.screening.validate()?;
        self.scad.validate()?;
        self.bandwidths.validate()?;
        validate_threads(self.threads)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Stream of replicate `rep` in column `col`.
fn stream(col: usize, rep: usize) -> u64 {
    ((col as u64) << 32) | rep as u64
}

/// Screening and BIC-selected structure for one simulated dataset.
pub fn selection_replicate(
    cfg: &ReplicateConfig,
    spec: &CaseSpec,
    rng_stream: u64,
) -> Result<(ReplicateSelection, f64)> {
    let (ds, truth) = gen_case_with(spec, &mut replicate_rng(cfg.seed, rng_stream))?;
    let (structure, lambda, mm) = select_structure(cfg, &ds, &truth)?;
    Ok((ReplicateSelection::from_structure(&structure, Some(mm)), lambda))
}

fn select_structure(
    cfg: &ReplicateConfig,
    ds: &LongitudinalDataset,
    truth: &TruthRecord,
) -> Result<(ModelStructure, f64, usize)> {
    let basis = cfg.basis.build(ds.n_subjects())?;
    let sc = screen(ds, &basis, cfg.screening)?;
    let mm = mmms(&sc.ranked, &truth.nonzero())?;
    let centered = CenteredBasis::new(basis);
    let path = bic_path(&GscadDesign::new(ds, &centered, &sc.kept)?, &cfg.scad)?;
    Ok((path.best_fit().structure.clone(), path.best_lambda(), mm))
}

/// Initial and refined estimates under a given structure, aligned with the truth.
fn initial_and_refined(
    cfg: &ReplicateConfig,
    ds: &LongitudinalDataset,
    truth: &TruthRecord,
    spec: &SemiVaryingSpec,
) -> Result<(ReplicateEstimate, ReplicateEstimate, f64, f64, f64)> {
    let initial = fit_semivarying(ds, spec, &cfg.bandwidths.profile(0, 0), None)?;
    let res = ResidualSet::from_values(ds, &initial.residuals)?;
    let model = estimate_covariance(&res, &cfg.bandwidths.covariance())?.model;
    let mut opts = cfg.bandwidths.profile(0, 0);
    opts.h1 = Some(initial.h1);
    let refined = fit_refined(ds, spec, &opts, &model.dataset_lambdas(ds), cfg.refine_method, None)?;
    let align =
        |f: &SemiVaryingFit| align_estimate(truth, &spec.constant_idx, &f.beta1, &spec.varying_idx, &f.curves, &f.grid);
    Ok((align(&initial)?, align(&refined)?, initial.h1, model.h2, model.h3))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationReplicate {
    pub oracle: (ReplicateEstimate, ReplicateEstimate),
    pub practical: Option<(ReplicateEstimate, ReplicateEstimate)>,
    pub bandwidths: [f64; 3],
}

pub fn estimation_replicate(cfg: &ReplicateConfig, spec: &CaseSpec, rng_stream: u64) -> Result<EstimationReplicate> {
    let (ds, truth) = gen_case_with(spec, &mut replicate_rng(cfg.seed, rng_stream))?;
    let oracle_spec = SemiVaryingSpec::new(truth.constant.iter().map(|c| c.0).collect(), truth.varying.clone());
    let (i0, r0, h1, h2, h3) = initial_and_refined(cfg, &ds, &truth, &oracle_spec)?;
    let practical = if cfg.practical {
        let (s, _, _) = select_structure(cfg, &ds, &truth)?;
        let ps = SemiVaryingSpec::new(s.constant_indices(), s.varying.clone());
        let (i1, r1, ..) = initial_and_refined(cfg, &ds, &truth, &ps)?;
        Some((i1, r1))
    } else {
        None
    };
    Ok(EstimationReplicate { oracle: (i0, r0), practical, bandwidths: [h1, h2, h3] })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionColumn {
    pub column: ColumnSpec,
    pub metrics: SelectionMetrics,
    pub replicates: Vec<ReplicateSelection>,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationColumn {
    pub column: ColumnSpec,
    pub oracle: (EstimationMetrics, EstimationMetrics),
    pub practical: Option<(EstimationMetrics, EstimationMetrics)>,
    pub replicates: Vec<EstimationReplicate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TableResult {
    Selection(Vec<SelectionColumn>),
    Estimation(Vec<EstimationColumn>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: ReplicateConfig,
    pub outputs: Vec<String>,
    pub seconds: f64,
}

/// Runs `reps` seeded replicates per column; replicate `r` of column `c`
/// uses stream `(c << 32) | r` of the master seed, so results do not depend
/// on scheduling.
pub fn replicate_table(cfg: &ReplicateConfig) -> Result<(TableResult, Option<ReplicateManifest>)> {
    cfg.validate()?;
    let start = Instant::now();
    let result = with_threads(cfg.threads, || -> Result<TableResult> {
        if cfg.table == 1 {
            let mut cols = Vec::new();
            for (ci, c) in cfg.columns.iter().enumerate() {
                let spec = cfg.case_spec(c);
                let reps: Vec<(ReplicateSelection, f64)> = (0..cfg.reps)
                    .into_par_iter()
                    .map(|r| selection_replicate(cfg, &spec, stream(ci, r)))
                    .collect::<Result<_>>()?;
                let (replicates, lambdas): (Vec<_>, Vec<_>) = reps.into_iter().unzip();
                let metrics = selection_metrics(&replicates, &spec.truth())?;
                cols.push(SelectionColumn { column: *c, metrics, replicates, lambdas });
            }
            Ok(TableResult::Selection(cols))
        } else {
            let mut cols = Vec::new();
            for (ci, c) in cfg.columns.iter().enumerate() {
                let spec = cfg.case_spec(c);
                let truth = spec.truth();
                let reps: Vec<EstimationReplicate> = (0..cfg.reps)
                    .into_par_iter()
                    .map(|r| estimation_replicate(cfg, &spec, stream(ci, r)))
                    .collect::<Result<_>>()?;
                let grid = crate::gscad::report_grid();
                let summarize =
                    |pick: &dyn Fn(&EstimationReplicate) -> Option<(ReplicateEstimate, ReplicateEstimate)>| {
                        let pairs: Vec<_> = reps.iter().filter_map(pick).collect();
                        if pairs.is_empty() {
                            return Ok(None);
                        }
                        let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
                        Ok::<_, Error>(Some((
                            estimation_metrics(&a, &truth, &grid)?,
                            estimation_metrics(&b, &truth, &grid)?,
                        )))
                    };
                let oracle = summarize(&|r| Some(r.oracle.clone()))?.unwrap();
                let practical = summarize(&|r| r.practical.clone())?;
                cols.push(EstimationColumn { column: *c, oracle, practical, replicates: reps });
            }
            Ok(TableResult::Estimation(cols))
        }
    })??;
    let mut manifest = None;
    if let Some(dir) = &cfg.output {
        fs::create_dir_all(dir)?;
        let mut outputs = Vec::new();
        let mut put = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> Result<()>| -> Result<()> {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            f(&mut w)?;
            w.flush()?;
            outputs.push(name.to_string());
            Ok(())
        };
        match &result {
            TableResult::Selection(cols) => {
                put("table1.csv", &|w| write_table1_csv(cols, cfg.reps, w))?;
                put("replicates.csv", &|w| write_selection_replicates_csv(cols, w))?;
            }
            TableResult::Estimation(cols) => {
                put("table2.csv", &|w| write_table2_csv(cols, cfg.reps, w))?;
                put("replicates.csv", &|w| write_estimation_replicates_csv(cols, w))?;
            }
        }
        outputs.push("manifest.json".into());
        let m = ReplicateManifest {
            tool: "vcselect".into(),
            version: VERSION.into(),
            command: "replicate-table".into(),
            config: cfg.clone(),
            outputs,
            seconds: start.elapsed().as_secs_f64(),
        };
        let mut f = BufWriter::new(File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut f, &m)?;
        f.flush()?;
        manifest = Some(m);
    }
    Ok((result, manifest))
}

/// Re-runs a replication from its manifest, writing into `output` (or the
/// manifest's own output directory).
pub fn replicate_from_manifest(
    path: impl AsRef<Path>,
    output: Option<PathBuf>,
) -> Result<(TableResult, Option<ReplicateManifest>)> {
    let m: ReplicateManifest =
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?;
    let mut cfg = m.config;
    if output.is_some() {
        cfg.output = output;
    }
    replicate_table(&cfg)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Rows in published order: `case,n,rho,metric,value,robust_sd,published,published_robust_sd,flag`.
pub fn write_table1_csv<W: Write>(cols: &[SelectionColumn], reps: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["case", "n", "rho", "metric", "value", "robust_sd", "published", "published_robust_sd", "flag"])?;
    let flag = if reps == 1 { "single_replicate" } else { "" };
    for col in cols {
        let m = &col.metrics;
        let c = col.column;
        for row in published::TABLE1_ROWS {
            let (value, sd): (Option<f64>, Option<f64>) = match row {
                "Cvar" => (m.cvar.map(|s| s.mean), m.cvar.map(|s| s.robust_sd)),
                "Cfix" => (m.cfix.map(|s| s.mean), m.cfix.map(|s| s.robust_sd)),
                "U" => (Some(m.under), None),
                "O" => (Some(m.over), None),
                "MMMS" => (m.mmms.map(|s| s.median), m.mmms.map(|s| s.robust_sd)),
                _ => {
                    let s: &Summary = match row {
                        "Size" => &m.size,
                        "TP" => &m.tp,
                        "FP" => &m.fp,
                        "TPvar" => &m.tpvar,
                        "FPvar" => &m.fpvar,
                        "TPfix" => &m.tpfix,
                        _ => &m.fpfix,
                    };
                    (Some(s.mean), Some(s.robust_sd))
                }
            };
            let publ = published::table1_value(c.case, c.n, c.rho, row);
            w.write_record([
                c.case.to_string(),
                c.n.to_string(),
                c.rho.to_string(),
                row.to_string(),
                opt(value),
                opt(sd),
                opt(publ.map(|p| p.0)),
                opt(publ.and_then(|p| p.1)),
                flag.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `case,n,rho,estimate,parameter,error,initial,refined,published_initial,published_refined`.
pub fn write_table2_csv<W: Write>(cols: &[EstimationColumn], reps: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "case",
        "n",
        "rho",
        "estimate",
        "parameter",
        "error",
        "initial",
        "refined",
        "published_initial",
        "published_refined",
        "flag",
    ])?;
    let flag = if reps == 1 { "single_replicate" } else { "" };
    for col in cols {
        let c = col.column;
        let mut blocks = vec![("oracle", &col.oracle)];
        if let Some(p) = &col.practical {
            blocks.push(("practical", p));
        }
        for (label, (init, refd)) in blocks {
            let sections =
                [(&init.constants, &refd.constants, ["MAE", "RMSE"]), (&init.curves, &refd.curves, ["MIAE", "RMISE"])];
            for (ri, rr, errs) in sections {
                for (a, b) in ri.iter().zip(rr.iter()) {
                    let publ = published::table2_value(c.case, c.n, c.rho, &a.name, label == "practical");
                    for (e, err) in errs.iter().enumerate() {
                        let (x, y) = if e == 0 { (a.mean_abs, b.mean_abs) } else { (a.root_mean_sq, b.root_mean_sq) };
                        w.write_record([
                            c.case.to_string(),
                            c.n.to_string(),
                            c.rho.to_string(),
                            label.to_string(),
                            a.name.clone(),
                            err.to_string(),
                            x.to_string(),
                            y.to_string(),
                            opt(publ.map(|p| p[e])),
                            opt(publ.map(|p| p[2 + e])),
                            flag.to_string(),
                        ])?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(|k| (k + 1).to_string()).collect::<Vec<_>>().join(" ")
}

fn write_selection_replicates_csv<W: Write>(cols: &[SelectionColumn], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["case", "n", "rho", "rep", "lambda", "constant", "varying", "mmms"])?;
    for col in cols {
        for (r, (s, lam)) in col.replicates.iter().zip(&col.lambdas).enumerate() {
            w.write_record([
                col.column.case.to_string(),
                col.column.n.to_string(),
                col.column.rho.to_string(),
                r.to_string(),
                lam.to_string(),
                join(&s.constant),
                join(&s.varying),
                s.mmms.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_estimation_replicates_csv<W: Write>(cols: &[EstimationColumn], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["case", "n", "rho", "rep", "h1", "h2", "h3", "estimate", "stage", "constants"])?;
    for col in cols {
        for (r, rep) in col.replicates.iter().enumerate() {
            let mut rows = vec![("oracle", &rep.oracle)];
            if let Some(p) = &rep.practical {
                rows.push(("practical", p));
            }
            for (label, (i, f)) in rows {
                for (stage, e) in [("initial", i), ("refined", f)] {
                    w.write_record([
                        col.column.case.to_string(),
                        col.column.n.to_string(),
                        col.column.rho.to_string(),
                        r.to_string(),
                        rep.bandwidths[0].to_string(),
                        rep.bandwidths[1].to_string(),
                        rep.bandwidths[2].to_string(),
                        label.to_string(),
                        stage.to_string(),
                        e.constants.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
