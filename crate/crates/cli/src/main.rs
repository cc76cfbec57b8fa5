//! `mvbfa`: fit, classify, simulate, evaluate and draw heatmaps for mixtures of
//! matrix variate bilinear factor analyzers.
//!
//! Exit codes: 0 success, 2 usage, 3 input (unreadable file, bad value, dimension
//! mismatch), 4 schema or parse error in a file, 5 numerical degeneracy, 6 model
//! selection failure (every grid cell failed).

mod input;
mod report;

use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use mvbfa::data::{
    atomic_write, format_t3, generate, mask_labels, preset, replicate_seed, write_heatmap_pgm,
    Preset, SyntheticSpec,
};
use mvbfa::metrics::{ari, location_errors, mcr, mean_sd};
use mvbfa::persist::{format_model, read_model};
use mvbfa::{
    grid_search, map_classify, model::responsibilities, DataSet3D, Error, FitConfig, GridSpec,
    MixtureParams, Result, Selection,
};

use input::{load_dataset, read_label_file, IdxRequest};
use report::Report;

#[derive(Parser)]
#[command(
    name = "mvbfa",
    version,
    about = "Mixtures of matrix variate bilinear factor analyzers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Unsupervised clustering with (G, q, r) chosen by BIC.
    Fit(FitArgs),
    /// Semi-supervised classification; label 0 marks an unlabeled observation.
    Classify(ClassifyArgs),
    /// Replicate datasets from a bundled simulation design.
    Simulate(SimulateArgs),
    /// Agreement between label vectors, or recovery of true locations by fitted models.
    Evaluate(EvaluateArgs),
    /// PGM heatmaps of the component locations of a model file.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct DataArgs {
    /// T3 text file, or IDX image file (MNIST layout).
    #[arg(long)]
    data: PathBuf,
    /// Label file (comma or whitespace separated); for IDX input, the IDX label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Digits kept from IDX input, in class order.
    #[arg(long, value_delimiter = ',', default_value = "1,7")]
    digits: Vec<u8>,
    /// Skip the IDX preprocessing (uniform noise and +50 on nonzero pixels).
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct GridArgs {
    /// Number of components, `a:b` or a single value.
    #[arg(long = "G", value_parser = parse_range)]
    groups: Option<RangeInclusive<usize>>,
    /// Column factors (reduce the row dimension n).
    #[arg(long, value_parser = parse_range, default_value = "1:2")]
    q: RangeInclusive<usize>,
    /// Row factors (reduce the column dimension p).
    #[arg(long, value_parser = parse_range, default_value = "1:2")]
    r: RangeInclusive<usize>,
    /// Do not grow q or r when the winner sits at the top of its range.
    #[arg(long)]
    no_expand: bool,
    #[arg(long, default_value_t = 10)]
    starts: usize,
    #[arg(long, default_value_t = 10)]
    burn: usize,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Output directory for report, model and selection table.
    #[arg(long)]
    out: PathBuf,
    /// Also write one location heatmap per component.
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Args)]
struct ClassifyArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Treat the labels as complete truth and reveal only this fraction of them.
    #[arg(long)]
    supervision: Option<f64>,
    /// Complete true labels used to score the unlabeled observations.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// `sim1` or `sim2`.
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Observations per replicate.
    #[arg(long = "N")]
    n_obs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Keep only this fraction of labels in the data files (truth files stay complete).
    #[arg(long)]
    supervision: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// True model file, or a simulation directory holding `truth.model`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Fitted model files, one per replicate.
    #[arg(long)]
    model: Vec<PathBuf>,
    /// Labeled datasets matching `--model`, scored by MAP classification.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// True labels, compared with `--predicted`.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    predicted: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(s: &str) -> std::result::Result<RangeInclusive<usize>, String> {
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| format!("`{t}` is not a nonnegative integer"))
    };
    let (lo, hi) = match s.split_once(':') {
        Some((a, b)) => (parse(a)?, parse(b)?),
        None => {
            let v = parse(s)?;
            (v, v)
        }
    };
    if lo > hi {
        return Err(format!("empty range {s}"));
    }
    Ok(lo..=hi)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Input(_) | Error::Dimension(_) => 3,
        Error::Parse { .. } | Error::Schema(_) | Error::Format(_) => 4,
        Error::Degenerate(_) | Error::EmptyComponent { .. } | Error::AllStartsFailed(_) => 5,
        Error::Selection(_) => 6,
    }
}

fn range_text(r: &RangeInclusive<usize>) -> String {
    format!("{}:{}", r.start(), r.end())
}

fn load(args: &DataArgs, seed: u64) -> Result<DataSet3D> {
    load_dataset(
        &args.data,
        IdxRequest {
            labels: args.labels.as_deref(),
            digits: &args.digits,
            raw: args.raw,
            seed,
        },
    )
}

fn select(
    data: &DataSet3D,
    grid: &GridArgs,
    groups: RangeInclusive<usize>,
    report: &mut Report,
) -> Result<Selection> {
    let mut spec = GridSpec::new(groups, grid.q.clone(), grid.r.clone());
    spec.expand = !grid.no_expand;
    let mut config = FitConfig::new(*spec.groups.start(), *spec.q.start(), *spec.r.start());
    config.n_starts = grid.starts;
    config.burn_in = grid.burn;
    config.max_iters = grid.max_iters;
    config.seed = grid.seed;
    let (n, p) = data.dims();
    report
        .kv("config", "N", data.len())
        .kv("config", "n", n)
        .kv("config", "p", p)
        .kv("config", "G", range_text(&spec.groups))
        .kv("config", "q", range_text(&spec.q))
        .kv("config", "r", range_text(&spec.r))
        .kv("config", "expand", spec.expand)
        .kv("config", "starts", config.n_starts)
        .kv("config", "burn", config.burn_in)
        .kv("config", "max_iters", config.max_iters)
        .kv("config", "epsilon_rel", config.epsilon_rel)
        .kv("config", "seed", config.seed);
    let selection = grid_search(data, &spec, &config)?;
    for line in selection.table().lines() {
        report.line("selection", line);
    }
    report.empty("failures");
    for f in &selection.failures {
        report.line(
            "failures",
            format!(
                "{},{},{},{}",
                f.groups,
                f.q,
                f.r,
                f.cause.replace(['\n', ','], " ")
            ),
        );
    }
    let best = selection.best();
    report
        .kv("chosen", "G", best.groups)
        .kv("chosen", "q", best.q)
        .kv("chosen", "r", best.r)
        .kv("chosen", "logLik", best.log_lik)
        .kv("chosen", "rho", best.rho)
        .kv("chosen", "BIC", best.bic)
        .kv("chosen", "converged", best.converged)
        .kv("chosen", "iterations", best.fit.iterations)
        .kv("chosen", "failed_starts", best.fit.failed_starts.len());
    for (g, w) in best.fit.params.weights().iter().enumerate() {
        report.kv("weights", &format!("pi_{}", g + 1), w);
    }
    Ok(selection)
}

/// Writes model, selection table, heatmaps and finally the report. Nothing is
/// created until the whole computation has succeeded.
fn write_fit_outputs(
    out: &Path,
    selection: &Selection,
    heatmaps: bool,
    report: &mut Report,
) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let params = &selection.best().fit.params;
    let model_path = out.join("model.txt");
    atomic_write(&model_path, format_model(params).as_bytes())?;
    report.kv("artifacts", "model", model_path.display());
    let table_path = out.join("selection.csv");
    atomic_write(&table_path, selection.table().as_bytes())?;
    report.kv("artifacts", "selection", table_path.display());
    if heatmaps {
        for (g, c) in params.components().iter().enumerate() {
            let path = out.join(format!("location_{}.pgm", g + 1));
            write_heatmap_pgm(c.location(), &path)?;
            report.kv("artifacts", &format!("heatmap_{}", g + 1), path.display());
        }
    }
    let report_path = out.join("report.txt");
    report.kv("artifacts", "report", report_path.display());
    let text = report.render();
    atomic_write(&report_path, text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let data = load(&args.data, args.grid.seed)?;
    let mut report = Report::new();
    report
        .kv("config", "command", "fit")
        .kv("config", "data", args.data.data.display());
    let groups = args.grid.groups.clone().unwrap_or(1..=3);
    let selection = select(&data.without_labels(), &args.grid, groups, &mut report)?;
    report.empty("metrics");
    if let Some(labels) = data.labels() {
        // labels are ground truth here; unlabeled entries are left out of the scores
        let predicted = selection.best().fit.labels();
        let scored: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0).collect();
        let truth: Vec<usize> = scored.iter().map(|&i| labels[i]).collect();
        let pred: Vec<usize> = scored.iter().map(|&i| predicted[i]).collect();
        let scope = if scored.len() == labels.len() {
            "all"
        } else {
            "labeled"
        };
        report.metrics(scope, &truth, &pred)?;
    }
    write_fit_outputs(&args.out, &selection, args.heatmaps, &mut report)
}

fn cmd_classify(args: &ClassifyArgs) -> Result<()> {
    let fit = &args.fit;
    let data = load(&fit.data, fit.grid.seed)?;
    let given = data.labels().map(<[usize]>::to_vec).ok_or_else(|| {
        Error::Input("classify needs labels (in the data file or via --labels)".into())
    })?;
    let (supervised, truth) = match args.supervision {
        Some(fraction) => {
            if given.contains(&0) {
                return Err(Error::Input(
                    "--supervision needs complete labels to mask".into(),
                ));
            }
            (mask_labels(&given, fraction, fit.grid.seed)?, Some(given))
        }
        None => {
            let truth = args.truth.as_deref().map(read_label_file).transpose()?;
            if truth.as_ref().is_some_and(|t| t.len() != given.len()) {
                return Err(Error::Schema(
                    "--truth has a different number of labels than the data".into(),
                ));
            }
            (given, truth)
        }
    };
    let data = data.set_labels(Some(supervised.clone()))?;
    let labeled = data.labeled_count();

    let mut report = Report::new();
    report
        .kv("config", "command", "classify")
        .kv("config", "data", fit.data.data.display());
    if let Some(f) = args.supervision {
        report.kv("config", "supervision", f);
    }
    report.kv("supervision", "labeled", labeled).kv(
        "supervision",
        "unlabeled",
        data.len() - labeled,
    );
    let top = data.max_label().max(1);
    let groups = fit.grid.groups.clone().unwrap_or(top..=top);
    if *groups.end() < data.max_label() {
        return Err(Error::Input(format!(
            "labels reference component {} but G is at most {}",
            data.max_label(),
            groups.end()
        )));
    }
    let selection = select(&data, &fit.grid, groups, &mut report)?;
    report.empty("metrics");
    if let Some(truth) = truth {
        let predicted = selection.best().fit.labels();
        let unlabeled: Vec<usize> = (0..supervised.len())
            .filter(|&i| supervised[i] == 0)
            .collect();
        if !unlabeled.is_empty() {
            let t: Vec<usize> = unlabeled.iter().map(|&i| truth[i]).collect();
            let p: Vec<usize> = unlabeled.iter().map(|&i| predicted[i]).collect();
            report.metrics("unlabeled", &t, &p)?;
        }
    }
    write_fit_outputs(&fit.out, &selection, fit.heatmaps, &mut report)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let which = Preset::from_name(&args.preset)?;
    if args.reps == 0 {
        return Err(Error::Input("--reps must be at least 1".into()));
    }
    let truth = preset(which);
    let mut files = Vec::with_capacity(args.reps);
    for rep in 1..=args.reps {
        let sim = generate(&SyntheticSpec {
            params: truth.clone(),
            n_obs: args.n_obs,
            seed: replicate_seed(args.seed, rep),
            supervision: args.supervision,
        })?;
        let data = match args.supervision {
            Some(_) => sim.data.clone(),
            None => sim.labeled(),
        };
        files.push((rep, format_t3(&data), sim.truth));
    }

    let out = &args.out;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let (g, n, p, q, r, weights) = which.design();
    let mut manifest = format!(
        "preset={}\nN={}\nreps={}\nseed={}\nG={g}\nn={n}\np={p}\nq={q}\nr={r}\npi={}\ntruth_model=truth.model\n",
        which.name(),
        args.n_obs,
        args.reps,
        args.seed,
        weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
    );
    if let Some(f) = args.supervision {
        manifest.push_str(&format!("supervision={f}\n"));
    }
    atomic_write(&out.join("truth.model"), format_model(&truth).as_bytes())?;
    for (rep, text, labels) in &files {
        let data_name = format!("rep_{rep:03}.t3");
        let label_name = format!("rep_{rep:03}.labels");
        atomic_write(&out.join(&data_name), text.as_bytes())?;
        let label_text: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
        atomic_write(
            &out.join(&label_name),
            format!("{}\n", label_text.join(",")).as_bytes(),
        )?;
        manifest.push_str(&format!("replicate={data_name},{label_name}\n"));
    }
    atomic_write(&out.join("manifest.txt"), manifest.as_bytes())?;
    println!("wrote {} replicate(s) to {}", args.reps, out.display());
    Ok(())
}

fn truth_model(path: &Path) -> Result<MixtureParams> {
    if path.is_dir() {
        read_model(&path.join("truth.model"))
    } else {
        read_model(path)
    }
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let mut report = Report::new();
    report.kv("config", "command", "evaluate");
    match (&args.labels, &args.predicted) {
        (Some(labels), Some(predicted)) => {
            let truth = read_label_file(labels)?;
            let pred = read_label_file(predicted)?;
            report.metrics("all", &truth, &pred)?;
        }
        (None, None) => {}
        _ => return Err(Error::Input("--labels and --predicted go together".into())),
    }

    if !args.model.is_empty() {
        let truth_path = args
            .truth
            .as_deref()
            .ok_or_else(|| Error::Input("--model needs --truth".into()))?;
        let truth = truth_model(truth_path)?;
        if !args.data.is_empty() && args.data.len() != args.model.len() {
            return Err(Error::Input("give one --data per --model, or none".into()));
        }
        let true_locations: Vec<DMatrix<f64>> = truth
            .components()
            .iter()
            .map(|c| c.location().clone())
            .collect();
        let mut per_component = vec![Vec::new(); truth.groups()];
        let mut aris = Vec::new();
        let mut mcrs = Vec::new();
        report.line("replicates", "replicate,model,norms,ARI,MCR");
        for (k, model_path) in args.model.iter().enumerate() {
            let model = read_model(model_path)?;
            let (tn, tp, _, _) = truth.dims();
            let (mn, mp, _, _) = model.dims();
            if (tn, tp) != (mn, mp) {
                return Err(Error::Dimension(format!(
                    "{} is {mn}x{mp} but the truth is {tn}x{tp}",
                    model_path.display()
                )));
            }
            let estimated: Vec<DMatrix<f64>> = model
                .components()
                .iter()
                .map(|c| c.location().clone())
                .collect();
            let norms = location_errors(&true_locations, &estimated)?;
            for (g, v) in norms.iter().enumerate() {
                per_component[g].push(*v);
            }
            let (mut a, mut m) = (String::new(), String::new());
            if let Some(data_path) = args.data.get(k) {
                let data = read_dataset_plain(data_path)?;
                let labels = data
                    .labels()
                    .ok_or_else(|| Error::Input(format!("{} has no labels", data_path.display())))?
                    .to_vec();
                let predicted = map_classify(&responsibilities(&data.without_labels(), &model)?);
                let (x, y) = (ari(&labels, &predicted)?, mcr(&labels, &predicted)?);
                aris.push(x);
                mcrs.push(y);
                a = x.to_string();
                m = y.to_string();
            }
            let norm_text: Vec<String> = norms.iter().map(|v| v.to_string()).collect();
            report.line(
                "replicates",
                format!(
                    "{},{},{},{a},{m}",
                    k + 1,
                    model_path.display(),
                    norm_text.join(";")
                ),
            );
        }
        for (g, values) in per_component.iter().enumerate() {
            let (mean, sd) = mean_sd(values);
            report.kv("recovery", &format!("norm_mean_{}", g + 1), mean);
            report.kv("recovery", &format!("norm_sd_{}", g + 1), sd);
        }
        if !aris.is_empty() {
            let (mean, sd) = mean_sd(&aris);
            report
                .kv("recovery", "ARI_mean", mean)
                .kv("recovery", "ARI_sd", sd);
            let (mean, sd) = mean_sd(&mcrs);
            report
                .kv("recovery", "MCR_mean", mean)
                .kv("recovery", "MCR_sd", sd);
        }
    } else if args.labels.is_none() {
        return Err(Error::Input(
            "nothing to evaluate: give --labels/--predicted or --truth/--model".into(),
        ));
    }

    let text = report.render();
    if let Some(out) = &args.out {
        atomic_write(out, text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

fn read_dataset_plain(path: &Path) -> Result<DataSet3D> {
    load_dataset(
        path,
        IdxRequest {
            labels: None,
            digits: &[],
            raw: true,
            seed: 0,
        },
    )
}

fn cmd_heatmap(args: &HeatmapArgs) -> Result<()> {
    let model = read_model(&args.model)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    for (g, c) in model.components().iter().enumerate() {
        let path = args.out.join(format!("location_{}.pgm", g + 1));
        write_heatmap_pgm(c.location(), &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("MVBFA_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| {
            Error::Input(format!(
                "MVBFA_THREADS must be a positive integer, got `{value}`"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Input(format!("cannot size the worker pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Classify(args) => cmd_classify(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Heatmap(args) => cmd_heatmap(args),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
