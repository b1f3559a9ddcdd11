use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ndarray::{Array1, Array2};

use psse::forecaster::{make_window_dataset, train_rnn, var1_fit, var1_predict, RnnForecaster};
use psse::grid::{
    build_admittance, parse_matpower_case, solve_power_flow_with, GridModel, PfInit, StateVector,
};
use psse::measurement::{
    build_measurement_matrices, MeasurementPlan, NoiseConfig, QuadraticForm,
};
use psse::neuralnet::checkpoint::{ArchDescriptor, Checkpoint};
use psse::neuralnet::fnn::Fnn;
use psse::neuralnet::proxnet::ProxLinearNet;
use psse::neuralnet::{predict_rows, train_estimator, Activation, Loss, LrSchedule};
use psse::pipeline::{
    generate_dataset, ingest_load_csv, load_dataset, monitor_loop, rmse_arrays, save_dataset,
    scale_loads, synth_load_series, ColumnMap, Dataset, ForecastModel, LoadProfile,
    MonitorEstimator,
};
use psse::solvers::{gauss_newton_wls, prox_linear_lav, AngleRef, ProxLinearConfig};

use crate::config::FileConfig;
use crate::reports::{mean_std, write_csv, MethodReport, RunReport, TimingReport};
use crate::{Cli, Command, ForecastModelKind, PsseModel, SolveMethod};

pub fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))?;
    let cfg = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let out = cli.out.clone();
    match cli.command {
        Command::ParseCase { case } => parse_case(&case, &out),
        Command::Powerflow {
            case,
            tol,
            max_iter,
            flat_start,
        } => powerflow(&case, tol, max_iter, flat_start, &out),
        Command::GenData {
            case,
            length,
            profile,
            load_csv,
            col_map,
            subsample,
            include_injections,
            sigma_flow,
            sigma_mag,
        } => gen_data(
            &case,
            &cfg,
            GenDataArgs {
                length,
                profile,
                load_csv,
                col_map,
                subsample,
                include_injections,
                sigma_flow,
                sigma_mag,
            },
            seed,
            &out,
        ),
        Command::Solve {
            dataset,
            grid,
            method,
            start,
            limit,
        } => solve(&dataset, grid.as_deref(), method, start, limit, &cfg, &out),
        Command::TrainPsse {
            dataset,
            grid,
            model,
            hidden_layers,
            blocks,
            layers_per_block,
            train_count,
            init,
            perturb,
            activation,
        } => train_psse(
            &dataset,
            grid.as_deref(),
            TrainPsseArgs {
                model,
                hidden_layers,
                blocks,
                layers_per_block,
                train_count,
                init,
                perturb,
                activation,
            },
            &cfg,
            seed,
            &out,
        ),
        Command::EvalPsse {
            dataset,
            ckpt,
            test_start,
            instance,
        } => eval_psse(&dataset, &ckpt, test_start, instance, seed, &out),
        Command::TrainForecast {
            dataset,
            grid,
            model,
            window,
            layers,
            use_estimates,
            train_count,
        } => train_forecast(
            &dataset,
            grid.as_deref(),
            model,
            window,
            layers,
            use_estimates,
            train_count,
            &cfg,
            seed,
            &out,
        ),
        Command::EvalForecast {
            dataset,
            ckpt,
            test_start,
            instance,
        } => eval_forecast(&dataset, &ckpt, test_start, instance, seed, &out),
        Command::Monitor {
            dataset,
            grid,
            mask_rate,
            forecaster,
            estimator,
            start,
            end,
        } => monitor(
            &dataset,
            grid.as_deref(),
            mask_rate,
            &forecaster,
            &estimator,
            start,
            end,
            &cfg,
            seed,
            &out,
        ),
        Command::Bench {
            dataset,
            grid,
            ckpt,
            samples,
        } => bench(&dataset, grid.as_deref(), ckpt.as_deref(), samples, &cfg, seed, &out),
    }
}

// ---------------------------------------------------------------- helpers

fn resolve_case(case: &str) -> Result<String> {
    if let Some(text) = psse::cases::builtin(case) {
        return Ok(text.to_string());
    }
    std::fs::read_to_string(case).with_context(|| format!("reading case file {case}"))
}

fn load_grid(dataset: &Path, grid_flag: Option<&Path>) -> Result<GridModel> {
    let path = match grid_flag {
        Some(p) => p.to_path_buf(),
        None => dataset
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("grid.json"),
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading grid JSON {} (pass --grid)", path.display()))?;
    Ok(GridModel::from_json(&text)?)
}

/// Grid, measurement forms, and angle reference for a dataset, with the
/// fingerprint checked so estimates always refer to the generating grid.
fn dataset_context(
    ds: &Dataset,
    dataset: &Path,
    grid_flag: Option<&Path>,
) -> Result<(GridModel, Vec<QuadraticForm>, AngleRef)> {
    let grid = load_grid(dataset, grid_flag)?;
    if grid.fingerprint() != ds.grid_fingerprint {
        bail!(
            "grid fingerprint mismatch: dataset was generated from a different grid \
             (expected {}, got {})",
            ds.grid_fingerprint,
            grid.fingerprint()
        );
    }
    let adm = build_admittance(&grid)?;
    let forms = build_measurement_matrices(&adm, &ds.plan)?;
    let slack = grid.slack_index()?;
    let angle_ref = AngleRef {
        bus: slack,
        angle: grid.buses[slack].va_init,
    };
    Ok((grid, forms, angle_ref))
}

fn default_split(len: usize) -> usize {
    (len * 4) / 5
}

fn parse_activation(name: Option<&str>, eta: f64) -> Result<Activation> {
    match name.unwrap_or("relu") {
        "relu" => Ok(Activation::Relu),
        "soft-threshold" => Ok(Activation::SoftThreshold(eta)),
        other => bail!("unknown activation `{other}` (relu|soft-threshold)"),
    }
}

/// Estimates every state in `range` with the prox-linear solver, in parallel.
fn estimate_span(
    ds: &Dataset,
    forms: &[QuadraticForm],
    solver: &ProxLinearConfig,
    range: std::ops::Range<usize>,
) -> Result<Array2<f64>> {
    let steps: Vec<usize> = range.clone().collect();
    let rows = psse::par::map_indexed(&steps, |_, &t| {
        prox_linear_lav(forms, &ds.z.row(t).to_owned(), solver).map(|(v, _)| v.into_values())
    });
    let mut out = Array2::zeros((steps.len(), ds.state_dim()));
    for (k, row) in rows.into_iter().enumerate() {
        out.row_mut(k).assign(&row?);
    }
    Ok(out)
}

fn polar_parts(values: &Array1<f64>, bus: usize) -> (f64, f64) {
    let re = values[2 * bus];
    let im = values[2 * bus + 1];
    ((re * re + im * im).sqrt(), im.atan2(re))
}

// --------------------------------------------------------------- commands

fn parse_case(case: &str, out: &Path) -> Result<()> {
    let grid = parse_matpower_case(&resolve_case(case)?)?;
    let path = out.join("grid.json");
    std::fs::write(&path, grid.to_json()?)?;
    println!(
        "parsed {} buses, {} branches, {} generators -> {}",
        grid.n_buses(),
        grid.branches.len(),
        grid.gens.len(),
        path.display()
    );
    Ok(())
}

fn powerflow(case: &str, tol: f64, max_iter: usize, flat_start: bool, out: &Path) -> Result<()> {
    let grid = parse_matpower_case(&resolve_case(case)?)?;
    let adm = build_admittance(&grid)?;
    let init = if flat_start { PfInit::Flat } else { PfInit::CaseValues };
    let sol = solve_power_flow_with(&grid, &adm, tol, max_iter, init)?;
    let buses: Vec<serde_json::Value> = grid
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let (vm, va) = polar_parts(sol.state.values(), i);
            serde_json::json!({ "id": b.id, "vm": vm, "va_rad": va })
        })
        .collect();
    let doc = serde_json::json!({
        "schema": "powerflow/1",
        "iterations": sol.iterations,
        "max_mismatch": sol.max_mismatch,
        "buses": buses,
    });
    let path = out.join("powerflow.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
    println!(
        "converged in {} iterations (mismatch {:.3e}) -> {}",
        sol.iterations,
        sol.max_mismatch,
        path.display()
    );
    Ok(())
}

struct GenDataArgs {
    length: Option<usize>,
    profile: Option<String>,
    load_csv: Option<PathBuf>,
    col_map: Option<PathBuf>,
    subsample: Option<usize>,
    include_injections: bool,
    sigma_flow: Option<f64>,
    sigma_mag: Option<f64>,
}

fn gen_data(case: &str, cfg: &FileConfig, args: GenDataArgs, seed: u64, out: &Path) -> Result<()> {
    let grid = parse_matpower_case(&resolve_case(case)?)?;
    let raw = match &args.load_csv {
        Some(csv_path) => {
            let map: ColumnMap = match &args.col_map {
                Some(p) => serde_json::from_str(
                    &std::fs::read_to_string(p)
                        .with_context(|| format!("reading column map {}", p.display()))?,
                )?,
                None => bail!("--load-csv requires --col-map"),
            };
            let factor = args.subsample.or(cfg.subsample).unwrap_or(1);
            ingest_load_csv(csv_path, &map, &grid, factor)?
        }
        None => {
            let length = args.length.or(cfg.length).unwrap_or(1000);
            let profile = match args
                .profile
                .as_deref()
                .or(cfg.profile.as_deref())
                .unwrap_or("sinusoid")
            {
                "sinusoid" => LoadProfile::Sinusoid {
                    amplitude: cfg.amplitude.unwrap_or(0.2),
                    period: cfg.period.unwrap_or(200.0),
                    noise_std: cfg.noise_std.unwrap_or(0.02),
                },
                "random-walk" => LoadProfile::RandomWalk {
                    step_std: cfg.noise_std.unwrap_or(0.01),
                    lo: 0.7,
                    hi: 1.3,
                },
                other => bail!("unknown profile `{other}` (sinusoid|random-walk)"),
            };
            synth_load_series(&grid, length, seed, profile)
        }
    };
    let series = scale_loads(&raw, &grid)?;
    let plan = if args.include_injections || cfg.include_injections.unwrap_or(false) {
        MeasurementPlan::with_injections(&grid)
    } else {
        MeasurementPlan::default_for(&grid)
    };
    let noise = NoiseConfig {
        sigma_flow: args.sigma_flow.or(cfg.sigma_flow).unwrap_or(0.02),
        sigma_mag: args.sigma_mag.or(cfg.sigma_mag).unwrap_or(0.01),
    };
    let started = Instant::now();
    let ds = generate_dataset(&grid, &series, &plan, &noise, seed)?;
    let ds_path = out.join("dataset.psse");
    save_dataset(&ds, &ds_path)?;
    std::fs::write(out.join("grid.json"), grid.to_json()?)?;
    std::fs::write(out.join("plan.json"), plan.to_json()?)?;
    let mut timing = TimingReport::new();
    timing.push("generate_dataset", started.elapsed().as_secs_f64(), ds.len());
    timing.write(out)?;
    println!(
        "generated {} samples (M = {}, 2N = {}) -> {}",
        ds.len(),
        ds.m(),
        ds.state_dim(),
        ds_path.display()
    );
    Ok(())
}

fn solve(
    dataset: &Path,
    grid_flag: Option<&Path>,
    method: SolveMethod,
    start: usize,
    limit: Option<usize>,
    cfg: &FileConfig,
    out: &Path,
) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let (grid, forms, angle_ref) = dataset_context(&ds, dataset, grid_flag)?;
    let end = limit.map_or(ds.len(), |k| (start + k).min(ds.len()));
    if start >= end {
        bail!("empty sample range {start}..{end}");
    }
    let steps: Vec<usize> = (start..end).collect();

    let mut solver_cfg = cfg.solver_config();
    solver_cfg.angle_ref = Some(angle_ref);
    let gn_iter = cfg.gn_max_iter.unwrap_or(30);
    let gn_tol = cfg.gn_tol.unwrap_or(1e-8);
    let weights: Array1<f64> = Array1::from_iter(ds.plan.entries.iter().map(|&(kind, _)| {
        let sigma = ds.noise.sigma_for(kind);
        if sigma > 0.0 {
            1.0 / (sigma * sigma)
        } else {
            1.0
        }
    }));
    let n = grid.n_buses();

    let started = Instant::now();
    let results = psse::par::map_indexed(&steps, |_, &t| -> psse::Result<Array1<f64>> {
        let z = ds.z.row(t).to_owned();
        let v = match method {
            SolveMethod::ProxLinear => prox_linear_lav(&forms, &z, &solver_cfg)?.0,
            SolveMethod::GaussNewton => {
                gauss_newton_wls(
                    &forms,
                    &z,
                    &weights,
                    &StateVector::flat(n),
                    gn_iter,
                    gn_tol,
                    Some(angle_ref),
                )?
                .0
            }
        };
        Ok(v.into_values())
    });
    let elapsed = started.elapsed().as_secs_f64();

    let mut est_rows = Vec::new();
    let mut rmse_rows = Vec::new();
    let mut errs = Vec::new();
    for (&t, result) in steps.iter().zip(results.into_iter()) {
        let v_hat = result?;
        let err = rmse_arrays(&v_hat, &ds.v.row(t).to_owned(), ds.n_buses)?;
        errs.push(err);
        let mut row = vec![ds.times[t].to_string()];
        row.extend(v_hat.iter().map(|x| x.to_string()));
        est_rows.push(row);
        rmse_rows.push(vec![ds.times[t].to_string(), err.to_string()]);
    }

    let mut est_header = vec!["t".to_string()];
    est_header.extend((1..=ds.state_dim()).map(|i| format!("v_{i}")));
    let est_header_refs: Vec<&str> = est_header.iter().map(|s| s.as_str()).collect();
    write_csv(&out.join("estimates.csv"), &est_header_refs, &est_rows)?;
    write_csv(&out.join("rmse.csv"), &["t", "rmse"], &rmse_rows)?;

    let method_name = match method {
        SolveMethod::ProxLinear => "prox-linear",
        SolveMethod::GaussNewton => "gauss-newton",
    };
    let (mean, std) = mean_std(&errs);
    let mut report = RunReport::new(
        "solve",
        ds.seed,
        serde_json::json!({ "method": method_name, "start": start, "end": end }),
    );
    report.methods.push(MethodReport {
        name: method_name.into(),
        rmse_mean: mean,
        rmse_std: std,
        n_samples: errs.len(),
        n_runs: 1,
        extra: None,
    });
    report.artifacts = vec!["estimates.csv".into(), "rmse.csv".into()];
    report.write(out)?;
    let mut timing = TimingReport::new();
    timing.push(method_name, elapsed, errs.len());
    timing.write(out)?;
    println!(
        "{method_name}: rmse {mean:.3e} +/- {std:.3e} over {} samples",
        errs.len()
    );
    Ok(())
}

struct TrainPsseArgs {
    model: PsseModel,
    hidden_layers: Option<usize>,
    blocks: Option<usize>,
    layers_per_block: Option<usize>,
    train_count: Option<usize>,
    init: Option<String>,
    perturb: f64,
    activation: Option<String>,
}

fn train_psse(
    dataset: &Path,
    grid_flag: Option<&Path>,
    args: TrainPsseArgs,
    cfg: &FileConfig,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let n_train = args
        .train_count
        .or(cfg.train_count)
        .unwrap_or(default_split(ds.len()));
    if n_train == 0 || n_train > ds.len() {
        bail!("train_count {n_train} out of range for {} samples", ds.len());
    }
    let train_z = ds.z.slice(ndarray::s![..n_train, ..]).to_owned();
    let train_v = ds.v.slice(ndarray::s![..n_train, ..]).to_owned();
    let train_cfg = cfg.train_config(seed)?;

    let started = Instant::now();
    let (ckpt, history, label) = match args.model {
        PsseModel::Proxnet => {
            let blocks = args.blocks.unwrap_or(2);
            let layers = args.layers_per_block.unwrap_or(3);
            let mut solver_cfg = cfg.solver_config();
            solver_cfg.outer_blocks = blocks;
            solver_cfg.inner_iters = layers;
            let net = match args.init.as_deref().unwrap_or("tied") {
                "tied" => {
                    let (grid, forms, _) = dataset_context(&ds, dataset, grid_flag)?;
                    let mut tied = ProxLinearNet::solver_tied(
                        &forms,
                        &solver_cfg,
                        &StateVector::flat(grid.n_buses()),
                        args.perturb,
                        seed,
                    )?;
                    // The tied construction carries soft-threshold layers; a
                    // ReLU request swaps the activation only.
                    if let Some(name) = args.activation.as_deref() {
                        if name == "relu" {
                            for block in &mut tied.blocks {
                                block.activation = Activation::Relu;
                            }
                        }
                    } else {
                        for block in &mut tied.blocks {
                            block.activation = Activation::Relu;
                        }
                    }
                    tied
                }
                "random" => {
                    let activation = parse_activation(args.activation.as_deref(), 0.1)?;
                    ProxLinearNet::random(ds.m(), ds.state_dim(), blocks, layers, activation, seed)
                }
                other => bail!("unknown init `{other}` (tied|random)"),
            };
            let (trained, history) = train_estimator(&net, &train_z, &train_v, &train_cfg)?;
            (
                Checkpoint::from_proxnet(&trained, seed, Some(train_cfg.clone())),
                history,
                format!("proxnet-{blocks}x{layers}"),
            )
        }
        PsseModel::Fnn => {
            let hidden = args.hidden_layers.or(cfg.hidden_layers).unwrap_or(6);
            let activation = parse_activation(args.activation.as_deref(), 0.1)?;
            let net = Fnn::estimator_baseline(ds.m(), ds.state_dim(), hidden, activation, seed);
            let (trained, history) = train_estimator(&net, &train_z, &train_v, &train_cfg)?;
            (
                Checkpoint::from_fnn(&trained, seed, Some(train_cfg.clone())),
                history,
                format!("fnn-{hidden}"),
            )
        }
    };
    let elapsed = started.elapsed().as_secs_f64();

    let ckpt_path = out.join("ckpt.json");
    ckpt.save(&ckpt_path)?;
    let rows: Vec<Vec<String>> = history
        .iter()
        .enumerate()
        .map(|(e, l)| vec![e.to_string(), l.to_string()])
        .collect();
    write_csv(&out.join("history.csv"), &["epoch", "train_loss"], &rows)?;
    let mut timing = TimingReport::new();
    timing.push("train", elapsed, train_cfg.epochs);
    timing.write(out)?;
    println!(
        "trained {label} on {n_train} samples, final loss {:.3e} -> {}",
        history.last().copied().unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(())
}

enum EstimatorModel {
    Prox(ProxLinearNet),
    Dense(Fnn),
}

impl EstimatorModel {
    fn from_ckpt(ckpt: &Checkpoint) -> Result<(EstimatorModel, String)> {
        match &ckpt.arch {
            ArchDescriptor::ProxNet { blocks, layers_per_block, .. } => Ok((
                EstimatorModel::Prox(ckpt.to_proxnet()?),
                format!("proxnet-{blocks}x{layers_per_block}"),
            )),
            ArchDescriptor::Fnn { dims, .. } => Ok((
                EstimatorModel::Dense(ckpt.to_fnn()?),
                format!("fnn-{}", dims.len().saturating_sub(2)),
            )),
            other => bail!("checkpoint is not an estimator network: {other:?}"),
        }
    }

    fn predict(&self, inputs: &Array2<f64>) -> Array2<f64> {
        match self {
            EstimatorModel::Prox(net) => predict_rows(net, inputs),
            EstimatorModel::Dense(net) => predict_rows(net, inputs),
        }
    }

    fn forward_one(&self, z: &Array1<f64>) -> Array1<f64> {
        match self {
            EstimatorModel::Prox(net) => net.forward_one(z),
            EstimatorModel::Dense(net) => net.forward_one(z),
        }
    }
}

fn eval_psse(
    dataset: &Path,
    ckpt_path: &Path,
    test_start: Option<usize>,
    instance: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (model, label) = EstimatorModel::from_ckpt(&ckpt)?;
    let start = test_start.unwrap_or(default_split(ds.len()));
    if start >= ds.len() {
        bail!("test_start {start} beyond dataset of {}", ds.len());
    }
    let test_z = ds.z.slice(ndarray::s![start.., ..]).to_owned();
    let started = Instant::now();
    let pred = model.predict(&test_z);
    let elapsed = started.elapsed().as_secs_f64();

    let mut errs = Vec::new();
    let mut rmse_rows = Vec::new();
    for k in 0..pred.nrows() {
        let t = start + k;
        let err = rmse_arrays(&pred.row(k).to_owned(), &ds.v.row(t).to_owned(), ds.n_buses)?;
        errs.push(err);
        rmse_rows.push(vec![ds.times[t].to_string(), err.to_string()]);
    }
    write_csv(&out.join("rmse_per_instance.csv"), &["t", "rmse"], &rmse_rows)?;

    // Per-bus magnitude/angle comparison at one instance.
    let inst = instance.unwrap_or(start).clamp(start, ds.len() - 1);
    let k = inst - start;
    let mut bus_rows = Vec::new();
    for bus in 0..ds.n_buses {
        let truth = ds.v.row(inst).to_owned();
        let est = pred.row(k).to_owned();
        let (vm_t, va_t) = polar_parts(&truth, bus);
        let (vm_e, va_e) = polar_parts(&est, bus);
        bus_rows.push(vec![
            (bus + 1).to_string(),
            vm_t.to_string(),
            va_t.to_string(),
            vm_e.to_string(),
            va_e.to_string(),
        ]);
    }
    write_csv(
        &out.join("per_bus_errors.csv"),
        &["bus", "vm_true", "va_true", "vm_est", "va_est"],
        &bus_rows,
    )?;

    let (mean, std) = mean_std(&errs);
    let mut report = RunReport::new(
        "eval-psse",
        seed,
        serde_json::json!({ "ckpt": ckpt_path.display().to_string(), "test_start": start, "instance": inst }),
    );
    report.methods.push(MethodReport {
        name: label.clone(),
        rmse_mean: mean,
        rmse_std: std,
        n_samples: errs.len(),
        n_runs: 1,
        extra: None,
    });
    report.artifacts = vec![
        "rmse_per_instance.csv".into(),
        "per_bus_errors.csv".into(),
    ];
    report.write(out)?;
    let mut timing = TimingReport::new();
    timing.push("inference", elapsed, errs.len());
    timing.write(out)?;
    println!("{label}: test rmse {mean:.3e} +/- {std:.3e} over {} samples", errs.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_forecast(
    dataset: &Path,
    grid_flag: Option<&Path>,
    model: ForecastModelKind,
    window: Option<usize>,
    layers: Option<usize>,
    use_estimates: bool,
    train_count: Option<usize>,
    cfg: &FileConfig,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let n_train = train_count
        .or(cfg.train_count)
        .unwrap_or(default_split(ds.len()));
    let window = window.or(cfg.window).unwrap_or(10);
    let layers = layers.or(cfg.rnn_layers).unwrap_or(3);

    let series = if use_estimates {
        let (_, forms, angle_ref) = dataset_context(&ds, dataset, grid_flag)?;
        let mut solver_cfg = cfg.solver_config();
        solver_cfg.angle_ref = Some(angle_ref);
        estimate_span(&ds, &forms, &solver_cfg, 0..ds.len())?
    } else {
        ds.v.clone()
    };

    // Forecaster defaults differ from the estimator ones: squared loss and a
    // decaying rate for fine-tuning from the persistence initialization.
    let mut train_cfg = cfg.train_config(seed)?;
    if cfg.loss.is_none() {
        train_cfg.loss = Loss::Mse;
    }
    if cfg.learning_rate.is_none() {
        train_cfg.learning_rate = 3e-4;
    }
    if cfg.lr_schedule.is_none() {
        train_cfg.lr_schedule = LrSchedule::Cosine;
    }

    let started = Instant::now();
    let (ckpt, history, label) = match model {
        ForecastModelKind::Rnn => {
            let (wtrain, _) = make_window_dataset(&series, window, n_train)?;
            let net = RnnForecaster::persistence(
                ds.state_dim(),
                layers,
                window,
                Activation::Relu,
                seed,
                0.0,
            );
            let (trained, history) = train_rnn(&net, &wtrain, &train_cfg)?;
            (
                Checkpoint::from_rnn(&trained, seed, Some(train_cfg.clone())),
                history,
                format!("rnn-{layers}l-r{window}"),
            )
        }
        ForecastModelKind::Var1 => {
            let params = var1_fit(&series.slice(ndarray::s![..n_train, ..]).to_owned())?;
            (Checkpoint::from_var(&params, seed), Vec::new(), "var1".to_string())
        }
        ForecastModelKind::Fnn2 => {
            // Single-hidden-layer network over flattened windows.
            let (wtrain, _) = make_window_dataset(&series, window, n_train)?;
            let dim = ds.state_dim();
            let mut inputs = Array2::zeros((wtrain.len(), window * dim));
            let mut targets = Array2::zeros((wtrain.len(), dim));
            for (row, &g) in wtrain.targets.iter().enumerate() {
                for tau in 0..window {
                    let src = series.row(g - window + tau);
                    for j in 0..dim {
                        inputs[[row, tau * dim + j]] = src[j];
                    }
                }
                targets.row_mut(row).assign(&series.row(g));
            }
            let net = Fnn::random(&[window * dim, dim, dim], Activation::Relu, seed);
            let (trained, history) = train_estimator(&net, &inputs, &targets, &train_cfg)?;
            (
                Checkpoint::from_fnn(&trained, seed, Some(train_cfg.clone())),
                history,
                format!("fnn2-r{window}"),
            )
        }
    };
    let elapsed = started.elapsed().as_secs_f64();

    let ckpt_path = out.join("ckpt.json");
    ckpt.save(&ckpt_path)?;
    if !history.is_empty() {
        let rows: Vec<Vec<String>> = history
            .iter()
            .enumerate()
            .map(|(e, l)| vec![e.to_string(), l.to_string()])
            .collect();
        write_csv(&out.join("history.csv"), &["epoch", "train_loss"], &rows)?;
    }
    let mut timing = TimingReport::new();
    timing.push("train", elapsed, 1);
    timing.write(out)?;
    println!("trained {label} on {n_train} samples -> {}", ckpt_path.display());
    Ok(())
}

fn eval_forecast(
    dataset: &Path,
    ckpt_path: &Path,
    test_start: Option<usize>,
    instance: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let start = test_start.unwrap_or(default_split(ds.len()));
    let dim = ds.state_dim();

    enum Forecaster {
        Rnn(RnnForecaster),
        Var(psse::forecaster::VarParams),
        Windowed(Fnn, usize),
    }
    let (model, label, window) = match &ckpt.arch {
        ArchDescriptor::Rnn { window, widths, .. } => {
            let w = *window;
            (
                Forecaster::Rnn(ckpt.to_rnn()?),
                format!("rnn-{}l-r{w}", widths.len()),
                w,
            )
        }
        ArchDescriptor::Var1 { .. } => (Forecaster::Var(ckpt.to_var()?), "var1".to_string(), 1),
        ArchDescriptor::Fnn { dims, .. } => {
            if dims[0] % dim != 0 || dims[0] == 0 {
                bail!("fnn forecaster input {} incompatible with state dim {dim}", dims[0]);
            }
            let w = dims[0] / dim;
            (Forecaster::Windowed(ckpt.to_fnn()?, w), format!("fnn2-r{w}"), w)
        }
        other => bail!("checkpoint is not a forecaster: {other:?}"),
    };

    let targets: Vec<usize> = ((start + window).max(window)..ds.len()).collect();
    if targets.is_empty() {
        bail!("no test windows after index {start}");
    }
    let started = Instant::now();
    let mut errs = Vec::new();
    let mut rows = Vec::new();
    let mut forecasts: Vec<Array1<f64>> = Vec::new();
    for &g in &targets {
        let forecast = match &model {
            Forecaster::Rnn(net) => net.forecast(&ds.v, g)?,
            Forecaster::Var(params) => var1_predict(params, &ds.v.row(g - 1).to_owned()),
            Forecaster::Windowed(net, w) => {
                let mut flat = Array1::zeros(w * dim);
                for tau in 0..*w {
                    let src = ds.v.row(g - w + tau);
                    for j in 0..dim {
                        flat[tau * dim + j] = src[j];
                    }
                }
                net.forward_one(&flat)
            }
        };
        let err = rmse_arrays(&forecast, &ds.v.row(g).to_owned(), ds.n_buses)?;
        errs.push(err);
        rows.push(vec![ds.times[g].to_string(), err.to_string()]);
        forecasts.push(forecast);
    }
    let elapsed = started.elapsed().as_secs_f64();
    write_csv(&out.join("rmse_per_instance.csv"), &["t", "rmse"], &rows)?;

    let inst = instance.unwrap_or(targets[0]).clamp(targets[0], *targets.last().unwrap());
    let k = inst - targets[0];
    let mut bus_rows = Vec::new();
    for bus in 0..ds.n_buses {
        let (vm_t, va_t) = polar_parts(&ds.v.row(inst).to_owned(), bus);
        let (vm_f, va_f) = polar_parts(&forecasts[k], bus);
        bus_rows.push(vec![
            (bus + 1).to_string(),
            vm_t.to_string(),
            va_t.to_string(),
            vm_f.to_string(),
            va_f.to_string(),
        ]);
    }
    write_csv(
        &out.join("per_bus_errors.csv"),
        &["bus", "vm_true", "va_true", "vm_forecast", "va_forecast"],
        &bus_rows,
    )?;

    let (mean, std) = mean_std(&errs);
    let mut report = RunReport::new(
        "eval-forecast",
        seed,
        serde_json::json!({ "ckpt": ckpt_path.display().to_string(), "test_start": start, "instance": inst }),
    );
    report.methods.push(MethodReport {
        name: label.clone(),
        rmse_mean: mean,
        rmse_std: std,
        n_samples: errs.len(),
        n_runs: 1,
        extra: None,
    });
    report.artifacts = vec!["rmse_per_instance.csv".into(), "per_bus_errors.csv".into()];
    report.write(out)?;
    let mut timing = TimingReport::new();
    timing.push("forecast", elapsed, errs.len());
    timing.write(out)?;
    println!("{label}: forecast rmse {mean:.3e} +/- {std:.3e} over {} targets", errs.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn monitor(
    dataset: &Path,
    grid_flag: Option<&Path>,
    mask_rate: f64,
    forecaster: &str,
    estimator: &str,
    start: Option<usize>,
    end: Option<usize>,
    cfg: &FileConfig,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if !(0.0..=1.0).contains(&mask_rate) {
        bail!("mask rate must lie in [0, 1]");
    }
    let ds = load_dataset(dataset)?;
    let (_, forms, angle_ref) = dataset_context(&ds, dataset, grid_flag)?;
    let start = start.unwrap_or(ds.len() / 2);
    let end = end.unwrap_or(ds.len());
    let mask_rate = cfg.mask_rate.unwrap_or(mask_rate);

    let mut solver_cfg = cfg.solver_config();
    solver_cfg.angle_ref = Some(angle_ref);

    // Estimator for the loop.
    let net;
    let est = match estimator {
        "solver" => MonitorEstimator::Solver(&solver_cfg),
        path => {
            let ckpt = Checkpoint::load(Path::new(path))?;
            net = ckpt.to_proxnet()?;
            MonitorEstimator::Net(&net)
        }
    };

    // Forecaster: fit VAR(1) on estimated states over the warmup span, or
    // load a trained recurrent checkpoint.
    let var_params;
    let rnn;
    let fc = match forecaster {
        "var1" => {
            if start < 2 {
                bail!("monitor needs a warmup span before --start to fit var1");
            }
            let warm = estimate_span(&ds, &forms, &solver_cfg, 0..start)?;
            var_params = var1_fit(&warm)?;
            ForecastModel::Var(&var_params)
        }
        path => {
            let ckpt = Checkpoint::load(Path::new(path))?;
            rnn = ckpt.to_rnn()?;
            ForecastModel::Rnn(&rnn)
        }
    };

    let started = Instant::now();
    let outcome = monitor_loop(&ds, &forms, start..end, &fc, &est, mask_rate, seed)?;
    let elapsed = started.elapsed().as_secs_f64();

    let improved = outcome
        .rmse_imputed
        .iter()
        .zip(outcome.rmse_zero_filled.iter())
        .filter(|(a, b)| a < b)
        .count();
    let rows: Vec<Vec<String>> = outcome
        .rmse_imputed
        .iter()
        .zip(outcome.rmse_zero_filled.iter())
        .zip(outcome.missing_counts.iter())
        .enumerate()
        .map(|(k, ((imp, zero), miss))| {
            vec![
                k.to_string(),
                imp.to_string(),
                zero.to_string(),
                miss.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("monitor_steps.csv"),
        &["step", "rmse_imputed", "rmse_zero_filled", "missing"],
        &rows,
    )?;

    let (imp_mean, imp_std) = mean_std(&outcome.rmse_imputed);
    let (zero_mean, zero_std) = mean_std(&outcome.rmse_zero_filled);
    let mut report = RunReport::new(
        "monitor",
        seed,
        serde_json::json!({
            "mask_rate": mask_rate, "forecaster": forecaster, "estimator": estimator,
            "start": start, "end": end,
            "steps_improved": improved, "steps_total": outcome.rmse_imputed.len(),
        }),
    );
    report.methods.push(MethodReport {
        name: "forecast-imputation".into(),
        rmse_mean: imp_mean,
        rmse_std: imp_std,
        n_samples: outcome.rmse_imputed.len(),
        n_runs: 1,
        extra: None,
    });
    report.methods.push(MethodReport {
        name: "zero-filling".into(),
        rmse_mean: zero_mean,
        rmse_std: zero_std,
        n_samples: outcome.rmse_zero_filled.len(),
        n_runs: 1,
        extra: None,
    });
    report.artifacts = vec!["monitor_steps.csv".into()];
    report.write(out)?;
    let mut timing = TimingReport::new();
    timing.push("monitor", elapsed, outcome.rmse_imputed.len());
    timing.write(out)?;
    println!(
        "monitor: imputed rmse {imp_mean:.3e} vs zero-filled {zero_mean:.3e} ({improved}/{} steps improved)",
        outcome.rmse_imputed.len()
    );
    Ok(())
}

fn bench(
    dataset: &Path,
    grid_flag: Option<&Path>,
    ckpt: Option<&Path>,
    samples: usize,
    cfg: &FileConfig,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let (grid, forms, angle_ref) = dataset_context(&ds, dataset, grid_flag)?;
    let count = samples.min(ds.len());
    if count == 0 {
        bail!("no samples to benchmark");
    }
    let n = grid.n_buses();

    let net = match ckpt {
        Some(path) => EstimatorModel::from_ckpt(&Checkpoint::load(path)?)?.0,
        None => {
            let mut solver_cfg = cfg.solver_config();
            solver_cfg.outer_blocks = 2;
            solver_cfg.inner_iters = 3;
            EstimatorModel::Prox(ProxLinearNet::solver_tied(
                &forms,
                &solver_cfg,
                &StateVector::flat(n),
                0.0,
                seed,
            )?)
        }
    };

    // Per-sample network inference, sequential on purpose.
    let started = Instant::now();
    for t in 0..count {
        let z = ds.z.row(t).to_owned();
        std::hint::black_box(net.forward_one(&z));
    }
    let net_total = started.elapsed().as_secs_f64();

    // Gauss-Newton per sample.
    let weights = Array1::ones(forms.len());
    let started = Instant::now();
    for t in 0..count {
        let z = ds.z.row(t).to_owned();
        let _ = gauss_newton_wls(
            &forms,
            &z,
            &weights,
            &StateVector::flat(n),
            30,
            1e-8,
            Some(angle_ref),
        )?;
    }
    let gn_total = started.elapsed().as_secs_f64();

    // Prox-linear solver on a smaller slice (it is the slowest path).
    let solver_cfg = ProxLinearConfig {
        angle_ref: Some(angle_ref),
        ..cfg.solver_config()
    };
    let prox_count = count.min(50);
    let started = Instant::now();
    for t in 0..prox_count {
        let z = ds.z.row(t).to_owned();
        let _ = prox_linear_lav(&forms, &z, &solver_cfg)?;
    }
    let prox_total = started.elapsed().as_secs_f64();

    let mut timing = TimingReport::new();
    timing.push("net_inference", net_total, count);
    timing.push("gauss_newton", gn_total, count);
    timing.push("prox_linear_solver", prox_total, prox_count);
    timing.write(out)?;

    let speedup = (gn_total / count as f64) / (net_total / count as f64);
    let mut report = RunReport::new(
        "bench",
        seed,
        serde_json::json!({ "samples": count, "speedup_vs_gauss_newton_in": "timing.json" }),
    );
    report.artifacts = vec!["timing.json".into()];
    report.write(out)?;
    println!(
        "net {:.3e}s vs gauss-newton {:.3e}s per sample ({speedup:.1}x)",
        net_total / count as f64,
        gn_total / count as f64
    );
    Ok(())
}
