//! Command-line surface and command implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use deepwarp_core::baseline::{gp_fit_ml, gp_predict};
use deepwarp_core::domain::make_knots;
use deepwarp_core::scoring::{score_gaussian_predictions, threat_score};
use deepwarp_core::sdsp::{fit_sdsp, predict_sdsp, SdspModel};
use deepwarp_core::simulate::{
    add_noise, randomize_stack_weights, sample_matern_field, sample_uniform, simulate_1d,
    TestProcess1d,
};
use deepwarp_core::siwgp::{fit_siwgp, predict_siwgp, SiwgpModel};
use deepwarp_core::toplayer::ProcessLayer;
use deepwarp_core::warp::WarpStack;
use deepwarp_core::{Dataset, Domain, LocationSet, RngStream};
use nalgebra::{DMatrix, DVector};

use crate::config::{ModelKind, RunConfig, SimProcess};
use crate::io;
use crate::model::Model;
use crate::svg;

/// Posterior warp samples (mixture components) used when summarising SDSP
/// predictions; independent of the fit-time Monte Carlo budget.
pub const PREDICT_COMPONENTS: usize = 50;
/// Posterior warp samples drawn per mixture component when summarising
/// SDSP predictions.
pub const PREDICT_DRAWS_PER_COMPONENT: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] deepwarp_core::Error),
    #[error("{0}")]
    Mismatch(String),
}

impl AppError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            AppError::Io(_) => "io_error",
            AppError::Parse(_) => "parse_error",
            AppError::Config(_) => "config_error",
            AppError::Model(_) => "model_error",
            AppError::Mismatch(_) => "mismatch_error",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "deepwarp",
    about = "Deep compositional spatial models: simulate, fit, predict, diagnose, export warps"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate observation and truth CSVs from a configured process.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (data.csv, truth.csv).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the configured model to an observation CSV.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory (model.bin, fit_report.json).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict at new locations from a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        locations: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predictions against held-out truth.
    Diagnose {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated threat-score thresholds (e.g. 50,100,150).
        #[arg(long)]
        thresholds: Option<String>,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the fitted warp's action on a chequered grid.
    #[command(name = "warp-export")]
    WarpExport {
        #[arg(long)]
        model: PathBuf,
        /// Grid lines per dimension.
        #[arg(long, default_value_t = 17)]
        grid: usize,
        /// Output directory (warp.csv, warp.svg).
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn dispatch(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Simulate { config, out, seed } => cmd_simulate(&config, &out, seed),
        Command::Fit {
            config,
            data,
            out,
            seed,
        } => cmd_fit(&config, &data, &out, seed),
        Command::Predict {
            model,
            locations,
            out,
            seed,
        } => cmd_predict(&model, &locations, &out, seed),
        Command::Diagnose {
            predictions,
            truth,
            thresholds,
            out,
        } => cmd_diagnose(&predictions, &truth, thresholds.as_deref(), &out),
        Command::WarpExport { model, grid, out } => cmd_warp_export(&model, grid, &out),
    }
}

fn ensure_dir(path: &Path) -> Result<(), AppError> {
    std::fs::create_dir_all(path).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

/// Bounding box of the data locations, fattened minimally if degenerate.
fn data_domain(locs: &LocationSet) -> Result<Domain, AppError> {
    let d = locs.dim();
    let c = locs.coords();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..locs.len() {
        for k in 0..d {
            lo[k] = lo[k].min(c[(i, k)]);
            hi[k] = hi[k].max(c[(i, k)]);
        }
    }
    for k in 0..d {
        if !(hi[k] > lo[k]) {
            return Err(AppError::Config(format!(
                "data locations are degenerate in dimension {k}"
            )));
        }
    }
    Domain::new(&lo, &hi).map_err(AppError::Model)
}

fn grid_1d(domain: &Domain, n: usize) -> LocationSet {
    let xs: Vec<f64> = (0..n)
        .map(|i| domain.lower(0) + domain.side(0) * i as f64 / (n - 1) as f64)
        .collect();
    LocationSet::from_1d(&xs).expect("grid is nonempty")
}

fn grid_2d(domain: &Domain, n: usize) -> LocationSet {
    let mut m = DMatrix::zeros(n * n, 2);
    for row in 0..n {
        for col in 0..n {
            m[(row * n + col, 0)] = domain.lower(0) + domain.side(0) * col as f64 / (n - 1) as f64;
            m[(row * n + col, 1)] = domain.lower(1) + domain.side(1) * row as f64 / (n - 1) as f64;
        }
    }
    LocationSet::new(m).expect("grid is nonempty")
}

fn stack_locations(a: &LocationSet, b: &LocationSet) -> LocationSet {
    let d = a.dim();
    let mut m = DMatrix::zeros(a.len() + b.len(), d);
    m.rows_mut(0, a.len()).copy_from(a.coords());
    m.rows_mut(a.len(), b.len()).copy_from(b.coords());
    LocationSet::new(m).expect("nonempty")
}

pub fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), AppError> {
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let sim = cfg
        .simulate
        .clone()
        .ok_or_else(|| AppError::Config("config has no \"simulate\" section".into()))?;
    ensure_dir(out)?;
    let data_path = out.join("data.csv");
    let truth_path = out.join("truth.csv");

    match sim.process {
        SimProcess::Y11 | SimProcess::Y12 => {
            let process = if sim.process == SimProcess::Y11 {
                TestProcess1d::Step
            } else {
                TestProcess1d::Sharp
            };
            let data = simulate_1d(process, sim.n, sim.noise_var, seed)?;
            let z: Vec<f64> = data.z.iter().copied().collect();
            io::write_data(&data_path, &data.locations, &z)?;
            let grid = grid_1d(&process.domain(), sim.grid);
            let truth: Vec<f64> = (0..grid.len())
                .map(|i| process.eval(grid.coords()[(i, 0)]))
                .collect();
            io::write_data(&truth_path, &grid, &truth)?;
        }
        SimProcess::Matern => {
            let domain = Domain::new(&[-0.5], &[0.5]).map_err(AppError::Model)?;
            let mut rng = RngStream::new(seed);
            let obs = sample_uniform(&domain, sim.n, &mut rng)?;
            let grid = grid_1d(&domain, sim.grid);
            let all = stack_locations(&obs, &grid);
            let sigma2 = sim.sigma2.unwrap_or(1.0);
            let rho = sim.rho.unwrap_or(0.05);
            let field = sample_matern_field(&all, sigma2, rho, &mut rng)?;
            let y_obs = DVector::from_fn(sim.n, |i, _| field[i]);
            let z = add_noise(&y_obs, sim.noise_var, &mut rng);
            io::write_data(&data_path, &obs, z.as_slice())?;
            let truth: Vec<f64> = (0..grid.len()).map(|i| field[sim.n + i]).collect();
            io::write_data(&truth_path, &grid, &truth)?;
        }
        SimProcess::SiwgpDraw => {
            let domain = Domain::unit(2);
            let mut rng = RngStream::new(seed);
            let obs = sample_uniform(&domain, sim.n, &mut rng)?;
            let grid = grid_2d(&domain, sim.grid);
            let all = stack_locations(&obs, &grid);

            let layers = cfg.build_layers(&domain)?;
            // knots from the observation locations, as in fitting
            let dummy = Dataset::new(obs.clone(), DVector::zeros(sim.n), 1.0, seed)
                .map_err(AppError::Model)?;
            let knots = make_knots(&dummy, 2000).map_err(AppError::Model)?;
            let mut stack = WarpStack::new(layers, knots);
            randomize_stack_weights(&mut stack, &mut rng);
            let mut top = ProcessLayer::new(cfg.top_per_dim, 2);
            top.log_sigma2 = libm::log(sim.sigma2.unwrap_or(1.0));
            top.log_ell = libm::log(sim.ell.unwrap_or(0.04));
            let model = SiwgpModel {
                stack,
                top,
                log_noise: libm::log(sim.noise_var.max(1e-12)),
            };
            let field = deepwarp_core::simulate::draw_siwgp(&model, &all, &mut rng)?;
            let y_obs = DVector::from_fn(sim.n, |i, _| field[i]);
            let z = add_noise(&y_obs, sim.noise_var, &mut rng);
            io::write_data(&data_path, &obs, z.as_slice())?;
            let truth: Vec<f64> = (0..grid.len()).map(|i| field[sim.n + i]).collect();
            io::write_data(&truth_path, &grid, &truth)?;
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct FitReport {
    model: String,
    n_obs: usize,
    n_params: usize,
    initial_objective: f64,
    final_objective: f64,
    skipped_steps: usize,
    wall_time_s: f64,
    sigma2: f64,
    ell_or_rho: f64,
    noise_var: f64,
    trace: Vec<f64>,
}

pub fn cmd_fit(config: &Path, data_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), AppError> {
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let data = io::read_data(data_path, 1.0, seed)?;
    let geo = data_domain(&data.locations)?;
    let side = (0..geo.dim()).map(|k| geo.side(k)).fold(0.0, f64::max);
    ensure_dir(out)?;
    let start = Instant::now();

    let (saved, report) = match cfg.model {
        ModelKind::Siwgp | ModelKind::Frk => {
            let layers = if cfg.model == ModelKind::Frk {
                Vec::new()
            } else {
                cfg.build_layers(&geo)?
            };
            let knots = make_knots(&data, 2000).map_err(AppError::Model)?;
            let mut model = SiwgpModel {
                stack: WarpStack::new(layers, knots),
                top: ProcessLayer::new(cfg.top_per_dim, geo.dim()),
                log_noise: 0.0,
            };
            model.init_hypers(&data, side);
            let fit = fit_siwgp(&model, &data, &cfg.schedule.into())?;
            let report = FitReport {
                model: if cfg.model == ModelKind::Frk { "frk" } else { "siwgp" }.into(),
                n_obs: data.len(),
                n_params: fit.model.n_params(),
                initial_objective: fit.initial_ll,
                final_objective: fit.final_ll,
                skipped_steps: fit.skipped_steps,
                wall_time_s: start.elapsed().as_secs_f64(),
                sigma2: fit.model.top.sigma2(),
                ell_or_rho: fit.model.top.ell(),
                noise_var: fit.model.noise_var(),
                trace: fit.trace,
            };
            (
                Model::Siwgp {
                    model: fit.model,
                    data: data.clone(),
                },
                report,
            )
        }
        ModelKind::Sdsp => {
            let layers = cfg.build_layers(&geo)?;
            let knots = make_knots(&data, 2000).map_err(AppError::Model)?;
            let stack = WarpStack::new(layers, knots);
            let mut model = SdspModel::new(
                stack,
                ProcessLayer::new(cfg.top_per_dim, geo.dim()),
                cfg.n_mc,
                !cfg.full_covariance,
            );
            model.init_hypers(&data, side);
            let fit = fit_sdsp(&model, &data, &cfg.schedule.into(), seed)?;
            let report = FitReport {
                model: "sdsp".into(),
                n_obs: data.len(),
                n_params: fit.model.n_params(),
                initial_objective: fit.initial_elbo,
                final_objective: fit.final_elbo,
                skipped_steps: fit.skipped_steps,
                wall_time_s: start.elapsed().as_secs_f64(),
                sigma2: fit.model.top.sigma2(),
                ell_or_rho: fit.model.top.ell(),
                noise_var: fit.model.noise_var(),
                trace: fit.trace,
            };
            (
                Model::Sdsp {
                    model: fit.model,
                    data: data.clone(),
                },
                report,
            )
        }
        ModelKind::Gp => {
            let steps = cfg.schedule.stage1 + cfg.schedule.stage2 + cfg.schedule.stage3;
            let fit = gp_fit_ml(&data, side, steps, 0.05)?;
            let report = FitReport {
                model: "gp".into(),
                n_obs: data.len(),
                n_params: 3,
                initial_objective: *fit.trace.first().unwrap_or(&fit.final_ll),
                final_objective: fit.final_ll,
                skipped_steps: 0,
                wall_time_s: start.elapsed().as_secs_f64(),
                sigma2: fit.params.sigma2(),
                ell_or_rho: fit.params.rho(),
                noise_var: fit.params.noise_var(),
                trace: fit.trace,
            };
            (
                Model::Gp {
                    params: fit.params,
                    data: data.clone(),
                },
                report,
            )
        }
    };

    saved.save(&out.join("model.bin"))?;
    let report_path = out.join("fit_report.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| AppError::Io(format!("serialize report: {e}")))?;
    std::fs::write(&report_path, text)
        .map_err(|e| AppError::Io(format!("{}: {e}", report_path.display())))?;
    Ok(())
}

pub fn cmd_predict(
    model_path: &Path,
    locations: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), AppError> {
    let model = Model::load(model_path)?;
    let locs = io::read_locations(locations)?;
    let Some(locs) = locs else {
        // header-only input: header-only output
        return io::write_predictions(out, None, None, model.dim());
    };
    if locs.dim() != model.dim() {
        return Err(AppError::Mismatch(format!(
            "model is {}-dimensional but locations are {}-dimensional",
            model.dim(),
            locs.dim()
        )));
    }
    let summary = match &model {
        Model::Siwgp { model, data } => predict_siwgp(model, data, &locs)?,
        Model::Sdsp { model, data } => {
            let mut rng = RngStream::new(seed.unwrap_or(data.seed)).substream(0x70726564);
            predict_sdsp(
                model,
                data,
                &locs,
                PREDICT_COMPONENTS,
                PREDICT_DRAWS_PER_COMPONENT,
                &mut rng,
            )?
        }
        Model::Gp { params, data } => gp_predict(data, params, &locs)?,
    };
    io::write_predictions(out, Some(&locs), Some(&summary), locs.dim())
}

#[derive(serde::Serialize)]
struct ThreatScoreEntry {
    threshold: f64,
    threat_score: f64,
}

#[derive(serde::Serialize)]
struct Scores {
    mape: f64,
    rmspe: f64,
    crps: f64,
    interval_score95: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    threat_scores: Vec<ThreatScoreEntry>,
}

pub fn cmd_diagnose(
    predictions: &Path,
    truth_path: &Path,
    thresholds: Option<&str>,
    out: &Path,
) -> Result<(), AppError> {
    let (pred_locs, summary) = io::read_predictions(predictions)?;
    let truth = io::read_data(truth_path, 1.0, 0)?;
    if truth.locations != pred_locs {
        return Err(AppError::Mismatch(
            "prediction and truth locations differ".into(),
        ));
    }
    let t: Vec<f64> = truth.z.iter().copied().collect();
    let report = score_gaussian_predictions(&t, &summary).map_err(AppError::Model)?;
    let mut ts = Vec::new();
    if let Some(spec) = thresholds {
        for raw in spec.split(',').filter(|s| !s.trim().is_empty()) {
            let thr: f64 = raw
                .trim()
                .parse()
                .map_err(|_| AppError::Parse(format!("bad threshold: {raw:?}")))?;
            ts.push(ThreatScoreEntry {
                threshold: thr,
                threat_score: threat_score(&t, &summary.mean, thr).map_err(AppError::Model)?,
            });
        }
    }
    let scores = Scores {
        mape: report.mape,
        rmspe: report.rmspe,
        crps: report.crps,
        interval_score95: report.interval_score95,
        threat_scores: ts,
    };
    let text = serde_json::to_string_pretty(&scores)
        .map_err(|e| AppError::Io(format!("serialize scores: {e}")))?;
    std::fs::write(out, text).map_err(|e| AppError::Io(format!("{}: {e}", out.display())))
}

pub fn cmd_warp_export(model_path: &Path, grid: usize, out: &Path) -> Result<(), AppError> {
    let model = Model::load(model_path)?;
    let stack = model.export_stack().ok_or_else(|| {
        AppError::Config("the stationary GP baseline has no warp to export".into())
    })?;
    ensure_dir(out)?;
    let g = svg::warp_grid(&stack, grid.max(2))?;
    svg::write_warp_csv(&out.join("warp.csv"), &g)?;
    svg::write_warp_svg(&out.join("warp.svg"), &g)
}
