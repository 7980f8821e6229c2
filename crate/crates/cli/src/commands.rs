//! Subcommand implementations. Each command writes its artifacts, the
//! resolved config echo and a manifest into one output directory.

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use locrate::analysis::{
    boxplot_stats, coherence_radius_2d, detect_extrema, pearson_and_fit, BoxStats, LinearFit,
};
use locrate::env2d::{
    generate_environment, outage_capacity_map, point_capacity_samples, EnvironmentMap,
    OutageCapacityMap,
};
use locrate::io::{
    capacity_csv, capacity_map_from_csv, parse_report_csv, peb_csv, read_environment, report_csv,
    write_environment, write_json, write_text, EnvironmentSidecar, RunManifest,
};
use locrate::locfim::LocalizationModel;
use locrate::normal::{std_normal_pdf, std_normal_quantile};
use locrate::rateselect::{
    calibrate_scheme_2d, evaluate_scheme_2d, CalibrationOptions, EvalOptions, EvaluationSummary,
    RateScheme, SchemeFamily,
};
use locrate::rayleigh1d::{
    backoff_meta_1d, backoff_outage_distance, backoff_rate_1d, calibrate_backoff_1d,
    coherence_radius_1d, outage_capacity_1d, throughput_ratio_1d, BackoffCalibration,
    CoherenceMode, LocStd1D, PathLossParams, Scheme1D,
};
use locrate::Error;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Output directory, manifest and stage clock of one invocation.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    clock: Instant,
}

impl Run {
    pub fn start(command: &str, cfg: RunConfig, threads: Option<usize>) -> CliResult<Self> {
        let dir = cfg.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let mut manifest = RunManifest::new(command, cfg.seed, cfg.to_json());
        manifest.threads = threads;
        manifest.warnings = cfg.warnings();
        let mut run = Self {
            cfg,
            dir,
            manifest,
            clock: Instant::now(),
        };
        let echo = run.cfg.to_json();
        run.json("config.json", &echo)?;
        Ok(run)
    }

    /// Records the time since the previous stage under `stage`.
    fn lap(&mut self, stage: &str) {
        let t = self.clock.elapsed().as_secs_f64();
        *self.manifest.runtimes.entry(stage.to_string()).or_default() += t;
        self.clock = Instant::now();
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> CliResult<()> {
        let p = self.path(name);
        let sha = write_text(&p, text).map_err(|e| io_at(&p, e))?;
        self.manifest.outputs.insert(name.to_string(), sha);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let p = self.path(name);
        let sha = write_json(&p, value).map_err(|e| io_at(&p, e))?;
        self.manifest.outputs.insert(name.to_string(), sha);
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<PathBuf> {
        self.lap("write");
        let p = self.path("manifest.json");
        write_json(&p, &self.manifest).map_err(|e| io_at(&p, e))?;
        Ok(self.dir)
    }
}

fn io_at(path: &Path, e: Error) -> CliError {
    match e {
        Error::Io(source) => CliError::io(path, source),
        other => CliError::Core(other),
    }
}

fn load_environment(path: &Path) -> CliResult<EnvironmentMap> {
    read_environment(path).map_err(|e| io_at(path, e))
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn localization(
    run: &Run,
    env: &EnvironmentMap,
    points: &[usize],
) -> CliResult<(LocalizationModel, usize)> {
    let cfg = &run.cfg;
    Ok(match cfg.crlb_options() {
        Some(opts) => {
            let sys = cfg.system.clone();
            let m = LocalizationModel::crlb(env, &sys, points, &opts, cfg.seed)?;
            (m, opts.draws)
        }
        None => {
            let var = match cfg.localization {
                crate::config::LocalizationSection::Constant { variance } => variance,
                crate::config::LocalizationSection::Crlb { .. } => unreachable!("handled above"),
            };
            (LocalizationModel::constant(&env.grid, var)?, 0)
        }
    })
}

fn capacity_map(run: &Run, env: &EnvironmentMap) -> CliResult<OutageCapacityMap> {
    let cfg = &run.cfg;
    Ok(outage_capacity_map(
        env,
        cfg.capacity.bs,
        &cfg.system,
        cfg.capacity.samples,
        cfg.seed,
    )?)
}

pub fn gen_env(mut run: Run) -> CliResult<PathBuf> {
    let env = generate_environment(&run.cfg.env_config())?;
    run.lap("environment");
    let p = run.path("environment.bin");
    let sha = write_environment(&p, &env).map_err(|e| io_at(&p, e))?;
    run.manifest
        .outputs
        .insert("environment.bin".into(), sha.clone());
    run.json("environment.json", &EnvironmentSidecar::new(&env, sha))?;
    run.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MapKind {
    Capacity,
    Peb,
}

pub fn maps(mut run: Run, env_path: &Path, which: MapKind) -> CliResult<PathBuf> {
    let env = load_environment(env_path)?;
    run.lap("read environment");
    match which {
        MapKind::Capacity => {
            let map = capacity_map(&run, &env)?;
            run.lap("capacity map");
            run.text("capacity.csv", &capacity_csv(&map, run.cfg.seed))?;
        }
        MapKind::Peb => {
            let points = env.grid.in_cell_indices();
            let (model, draws) = localization(&run, &env, &points)?;
            run.lap("peb map");
            note_crlb(&mut run, &model);
            run.text("peb.csv", &peb_csv(&model, draws, run.cfg.seed))?;
        }
    }
    run.finish()
}

fn note_crlb(run: &mut Run, model: &LocalizationModel) {
    if model.skipped_draws > 0 {
        run.manifest.warnings.push(format!(
            "{} singular FIM draws skipped",
            model.skipped_draws
        ));
    }
    if model.pseudo_inverse_draws > 0 {
        run.manifest.warnings.push(format!(
            "{} FIM draws used a pseudo-inverse",
            model.pseudo_inverse_draws
        ));
    }
}

#[derive(Debug, Serialize)]
struct Location {
    index: usize,
    x: f64,
    y: f64,
}

#[derive(Debug, Serialize)]
struct EvalSummaryFile {
    family: SchemeFamily,
    parameter: f64,
    scheme: RateScheme,
    delta: f64,
    /// Calibrated max meta-probability over the grid is at most delta.
    certificate: bool,
    calibration_max_meta: f64,
    calibration_worst: Location,
    /// Independent verification stays within delta + 3 SE.
    verified_within_3se: bool,
    verification_worst: Location,
    verification: EvaluationSummary,
    points: usize,
}

pub fn calibrate_eval(
    mut run: Run,
    env_path: &Path,
    capacity: Option<&Path>,
) -> CliResult<PathBuf> {
    let env = load_environment(env_path)?;
    run.lap("read environment");
    let map = match capacity {
        Some(p) => {
            let map = capacity_map_from_csv(&read_text(p)?, &env.grid)?;
            if map.eps != run.cfg.system.reliability_target {
                return Err(CliError::Config(format!(
                    "capacity map has eps = {} but system.reliability_target = {}",
                    map.eps, run.cfg.system.reliability_target
                )));
            }
            map
        }
        None => {
            let map = capacity_map(&run, &env)?;
            run.text("capacity.csv", &capacity_csv(&map, run.cfg.seed))?;
            map
        }
    };
    run.lap("capacity map");
    let points = env.grid.in_cell_indices();
    let (loc, draws) = localization(&run, &env, &points)?;
    note_crlb(&mut run, &loc);
    run.text("peb.csv", &peb_csv(&loc, draws, run.cfg.seed))?;
    run.lap("localization");

    let cfg = run.cfg.clone();
    let delta = cfg.scheme.delta;
    let cal = calibrate_scheme_2d(
        cfg.scheme.family,
        delta,
        &map,
        &loc,
        &points,
        &CalibrationOptions {
            method: cfg.calibration.method,
            seed: cfg.seed,
            rel_tol: cfg.calibration.rel_tol,
            allow_out_of_map: cfg.calibration.allow_out_of_map,
        },
    )?;
    if cal.floored_points > 0 {
        run.manifest.warnings.push(format!(
            "{} points had the covariance eigenvalue floor applied",
            cal.floored_points
        ));
    }
    run.json("calibration.json", &cal)?;
    run.lap("calibration");

    let samples_at = |i: usize| {
        point_capacity_samples(
            &env,
            cfg.capacity.bs,
            i,
            &cfg.system,
            cfg.capacity.samples,
            cfg.seed,
        )
    };
    let report = evaluate_scheme_2d(
        &map,
        &loc,
        cal.scheme,
        delta,
        &points,
        &samples_at,
        &EvalOptions {
            method: cfg.evaluation.method,
            throughput_draws: cfg.evaluation.throughput_draws,
            seed: cfg.seed,
            allow_out_of_map: cfg.evaluation.allow_out_of_map,
        },
    )?;
    run.lap("evaluation");
    if report.summary.clamped_draws > 0 {
        run.manifest.warnings.push(format!(
            "{} location draws left the map and were clamped",
            report.summary.clamped_draws
        ));
    }
    run.text("report.csv", &report_csv(&report))?;
    run.json("report.json", &report)?;

    let s = report.summary;
    let worst = report
        .points
        .iter()
        .max_by(|a, b| a.meta.total_cmp(&b.meta))
        .expect("nonempty report");
    let location = |index: usize| {
        let (x, y) = env.grid.point_at(index);
        Location { index, x, y }
    };
    let summary = EvalSummaryFile {
        family: cal.family,
        parameter: cal.parameter,
        scheme: cal.scheme,
        delta,
        certificate: cal.max_meta <= delta,
        calibration_max_meta: cal.max_meta,
        calibration_worst: location(cal.worst_point),
        verified_within_3se: s.max_meta <= delta + 3.0 * s.max_meta_se.unwrap_or(0.0),
        verification_worst: location(worst.index),
        verification: s,
        points: report.points.len(),
    };
    run.json("summary.json", &summary)?;
    run.finish()
}

#[derive(Debug, Serialize)]
struct RayleighCalibration {
    delta: f64,
    backoff: BackoffCalibration,
    backoff_affine: BackoffCalibration,
    interval_q: f64,
}

#[derive(Debug, Serialize)]
struct RayleighSummary {
    illustration_outage_distance: f64,
    illustration_meta: f64,
    calibrations: Vec<RayleighCalibration>,
}

fn steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| lo + k as f64 * step).collect()
}

pub fn rayleigh(mut run: Run) -> CliResult<PathBuf> {
    let r = run.cfg.rayleigh.clone();
    let db = |v: f64| 10f64.powf(v / 10.0);
    let p = PathLossParams::new(
        db(r.path_gain_db),
        r.exponent,
        db(r.tx_snr_db),
        r.cell_min,
        r.cell_max,
    )?;
    let p_ext = PathLossParams {
        cell_max: r.extended_cell_max,
        ..p
    };
    let eta = p.exponent;
    let constant = LocStd1D::Constant(r.sigma);
    let affine = LocStd1D::Affine {
        slope: r.sigma_slope,
        offset: r.sigma_offset,
    };

    // Selected rate around one true location.
    let (x0, s0, beta0) = (
        r.illustration_x,
        r.illustration_variance.sqrt(),
        r.illustration_beta,
    );
    let c_true = outage_capacity_1d(x0, r.eps, &p)?;
    let mut fig1 = format!(
        "# x={x0},variance={},beta={beta0},eps={}\nx_hat,rate,c_eps_true,pdf,outage\n",
        r.illustration_variance, r.eps
    );
    for x_hat in steps((x0 - 5.0 * s0).max(s0 / 10.0), x0 + 5.0 * s0, s0 / 10.0) {
        let rate = backoff_rate_1d(x_hat, beta0, r.eps, &p)?;
        let pdf = std_normal_pdf((x_hat - x0) / s0) / s0;
        let _ = writeln!(
            fig1,
            "{x_hat},{rate},{c_true},{pdf},{}",
            u8::from(rate > c_true)
        );
    }
    run.text("rayleigh_rate.csv", &fig1)?;

    let xs = steps(r.cell_min, r.cell_max, r.x_step);
    let mut fig2 = format!("# eps={}\nx", r.eps);
    for t in &r.coherence_thresholds {
        let _ = write!(fig2, ",exact_t{t},approx_t{t}");
    }
    fig2.push('\n');
    for &x in &xs {
        let _ = write!(fig2, "{x}");
        for &t in &r.coherence_thresholds {
            let exact = coherence_radius_1d(x, t, r.eps, &p, CoherenceMode::Exact)?;
            let approx = coherence_radius_1d(x, t, r.eps, &p, CoherenceMode::Approx)?;
            let _ = write!(fig2, ",{exact},{approx}");
        }
        fig2.push('\n');
    }
    run.text("rayleigh_coherence.csv", &fig2)?;

    let mut cals = Vec::new();
    for &delta in &r.deltas {
        cals.push(RayleighCalibration {
            delta,
            backoff: calibrate_backoff_1d(delta, &constant, &p)?,
            backoff_affine: calibrate_backoff_1d(delta, &affine, &p)?,
            interval_q: std_normal_quantile(1.0 - delta)?,
        });
    }
    run.lap("calibration");

    let mut fig3 = format!("# eps={},sigma={}\nx", r.eps, r.sigma);
    for c in &cals {
        let _ = write!(fig3, ",constant_d{},affine_d{}", c.delta, c.delta);
    }
    fig3.push('\n');
    for &x in &xs {
        let _ = write!(fig3, "{x}");
        for c in &cals {
            let m_const = backoff_meta_1d(x, c.backoff.beta, constant.sigma(x), eta)?;
            let m_aff = backoff_meta_1d(x, c.backoff_affine.beta, affine.sigma(x), eta)?;
            let _ = write!(fig3, ",{m_const},{m_aff}");
        }
        fig3.push('\n');
    }
    run.text("rayleigh_meta.csv", &fig3)?;

    let txs = steps(r.cell_min, r.extended_cell_max, r.throughput_step);
    let rows: Vec<String> = txs
        .par_iter()
        .map(|&x| -> CliResult<String> {
            let mut row = format!("{x}");
            for c in &cals {
                let tb = throughput_ratio_1d(
                    x,
                    Scheme1D::Backoff(c.backoff.beta),
                    r.sigma,
                    r.eps,
                    &p_ext,
                )?;
                let ti = throughput_ratio_1d(
                    x,
                    Scheme1D::Interval(c.interval_q),
                    r.sigma,
                    r.eps,
                    &p_ext,
                )?;
                let _ = write!(row, ",{tb},{ti}");
            }
            Ok(row)
        })
        .collect::<CliResult<_>>()?;
    let mut fig4 = format!("# eps={},sigma={}\nx", r.eps, r.sigma);
    for c in &cals {
        let _ = write!(fig4, ",backoff_d{},interval_d{}", c.delta, c.delta);
    }
    fig4.push('\n');
    for row in rows {
        fig4.push_str(&row);
        fig4.push('\n');
    }
    run.lap("throughput");
    run.text("rayleigh_throughput.csv", &fig4)?;

    let summary = RayleighSummary {
        illustration_outage_distance: backoff_outage_distance(x0, beta0, eta),
        illustration_meta: backoff_meta_1d(x0, beta0, s0, eta)?,
        calibrations: cals,
    };
    run.json("rayleigh_summary.json", &summary)?;
    run.finish()
}

#[derive(Debug, Serialize)]
struct GroupStats {
    group: &'static str,
    quantity: &'static str,
    stats: Option<BoxStats>,
}

#[derive(Debug, Serialize)]
struct Correlation {
    group: &'static str,
    quantity: &'static str,
    fit: Option<LinearFit>,
    /// Why no fit was produced.
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct ReportAnalysis {
    file: String,
    scheme: String,
    parameter: String,
    groups: Vec<GroupStats>,
    correlations: Vec<Correlation>,
}

#[derive(Debug, Serialize)]
struct AnalysisFile {
    coherence_threshold: f64,
    neighborhood_radius: f64,
    prominence: f64,
    box_alpha: f64,
    peaks: usize,
    valleys: usize,
    /// In-cell points whose coherence radius exceeds the map.
    coherence_exceeds_map: usize,
    reports: Vec<ReportAnalysis>,
}

pub fn analyze(
    mut run: Run,
    env_path: &Path,
    capacity: &Path,
    reports: &[PathBuf],
) -> CliResult<PathBuf> {
    let env = load_environment(env_path)?;
    let map = capacity_map_from_csv(&read_text(capacity)?, &env.grid)?;
    run.lap("read inputs");
    let a = run.cfg.analysis;
    let grid = &env.grid;
    let points = grid.in_cell_indices();
    let radii: Vec<Option<f64>> = points
        .par_iter()
        .map(
            |&i| match coherence_radius_2d(&map, i, a.coherence_threshold) {
                Ok(r) => Ok(Some(r)),
                Err(Error::CoherenceRadiusExceedsMap { .. }) => Ok(None),
                Err(e) => Err(e),
            },
        )
        .collect::<Result<_, _>>()?;
    let mut cr = vec![None; grid.len()];
    for (&i, r) in points.iter().zip(&radii) {
        cr[i] = *r;
    }
    let mut text = format!("# t={}\nx,y,cr\n", a.coherence_threshold);
    for &i in &points {
        let (x, y) = grid.point_at(i);
        let _ = writeln!(text, "{x},{y},{}", cr[i].unwrap_or(f64::INFINITY));
    }
    run.text("coherence.csv", &text)?;
    run.lap("coherence radius");

    let ext = detect_extrema(&map, a.neighborhood_radius, a.prominence)?;
    let mut text = format!(
        "# radius={},prominence={}\nkind,x,y,c_eps,cr\n",
        a.neighborhood_radius, a.prominence
    );
    for (kind, set) in [("peak", &ext.peaks), ("valley", &ext.valleys)] {
        for &i in set {
            let (x, y) = grid.point_at(i);
            let _ = writeln!(
                text,
                "{kind},{x},{y},{},{}",
                map.values[i],
                cr[i].unwrap_or(f64::INFINITY)
            );
        }
    }
    run.text("extrema.csv", &text)?;
    run.lap("extrema");

    let mut analyses = Vec::new();
    let mut groups_csv =
        "report,group,quantity,alpha,q_alpha,q1,median,q3,q_one_minus_alpha,count\n".to_string();
    for path in reports {
        let (header, rows) = parse_report_csv(&read_text(path)?)?;
        let mut meta = vec![None; grid.len()];
        let mut tp = vec![None; grid.len()];
        for row in &rows {
            let (ix, iy) = grid.nearest(row.x, row.y);
            let i = grid.index(ix, iy);
            let (gx, gy) = grid.point_at(i);
            if (gx - row.x).abs() > 1e-6 * grid.spacing || (gy - row.y).abs() > 1e-6 * grid.spacing
            {
                return Err(Error::Corrupt(format!(
                    "{}: row ({}, {}) is not a grid point",
                    path.display(),
                    row.x,
                    row.y
                ))
                .into());
            }
            meta[i] = Some(row.meta);
            tp[i] = Some(row.throughput);
        }
        let all: Vec<usize> = (0..grid.len()).filter(|&i| meta[i].is_some()).collect();
        let name = path.display().to_string();
        if name.contains([',', '"', '\n']) {
            return Err(CliError::Config(format!(
                "report path {name:?} cannot be written as a CSV field"
            )));
        }
        let mut groups = Vec::new();
        let mut correlations = Vec::new();
        for (group, set) in [
            ("all", &all),
            ("peaks", &ext.peaks),
            ("valleys", &ext.valleys),
        ] {
            for (quantity, values) in [("meta", &meta), ("throughput", &tp)] {
                let v: Vec<f64> = set.iter().filter_map(|&i| values[i]).collect();
                let stats = if v.is_empty() {
                    None
                } else {
                    Some(boxplot_stats(&v, a.box_alpha)?)
                };
                if let Some(b) = stats {
                    let _ = writeln!(
                        groups_csv,
                        "{name},{group},{quantity},{},{},{},{},{},{},{}",
                        b.alpha, b.q_alpha, b.q1, b.median, b.q3, b.q_one_minus_alpha, b.count
                    );
                }
                groups.push(GroupStats {
                    group,
                    quantity,
                    stats,
                });
                if group == "all" {
                    continue;
                }
                let (xs, ys): (Vec<f64>, Vec<f64>) = set
                    .iter()
                    .filter_map(|&i| Some((cr[i]?, values[i]?)))
                    .unzip();
                let (fit, error) = match pearson_and_fit(&xs, &ys) {
                    Ok(f) => (Some(f), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                correlations.push(Correlation {
                    group,
                    quantity,
                    fit,
                    error,
                });
            }
        }
        analyses.push(ReportAnalysis {
            file: name,
            scheme: header["scheme"].clone(),
            parameter: header["parameter"].clone(),
            groups,
            correlations,
        });
    }
    run.text("groups.csv", &groups_csv)?;
    run.lap("statistics");
    let file = AnalysisFile {
        coherence_threshold: a.coherence_threshold,
        neighborhood_radius: a.neighborhood_radius,
        prominence: a.prominence,
        box_alpha: a.box_alpha,
        peaks: ext.peaks.len(),
        valleys: ext.valleys.len(),
        coherence_exceeds_map: radii.iter().filter(|r| r.is_none()).count(),
        reports: analyses,
    };
    run.json("analysis.json", &file)?;
    run.finish()
}
