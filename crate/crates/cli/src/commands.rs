//! Subcommand bodies. Each writes its primary outputs into the output
//! directory; wall-clock timing goes to `run.log` only.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Duration;

use serde::Serialize;
use toml::{Table, Value};

use mcreg_core::backtest::{run_backtests, BacktestConfig, BacktestReport, Formation, Strategy};
use mcreg_core::matrix::pairs;
use mcreg_core::mtest::{run_test, Criterion, Mode};
use mcreg_core::panel::origin_correlation_vechs;
use mcreg_core::procedure::Procedure;
use mcreg_core::regularizer::{regularize_with_mask, DEFAULT_EPSILON};
use mcreg_core::resampler::{generate_null, ResamplingPlan};
use mcreg_core::simlab::{run_grid, write_rows, GridConfig};
use mcreg_core::{center, CenteredPanel, Centering, ReturnsPanel};

use crate::config::{io_error, overlay, pick, value, CliError, Common};
use crate::{BacktestArgs, RegularizeArgs, SimulateArgs, TestArgs};

const DEFAULT_ALPHA: f64 = 0.05;
const DEFAULT_RESAMPLES: usize = 100;

fn read_panel(table: &Table, flag: Option<&PathBuf>) -> Result<ReturnsPanel, CliError> {
    let path: PathBuf = pick(flag.cloned(), table, "input")?
        .ok_or_else(|| CliError::Config("no input file; pass --input or set `input`".into()))?;
    let file = File::open(&path).map_err(io_error(&path))?;
    Ok(ReturnsPanel::from_csv(file)?)
}

fn output_file(common: &Common, name: &str) -> Result<(PathBuf, BufWriter<File>), CliError> {
    fs::create_dir_all(&common.out).map_err(io_error(&common.out))?;
    let path = common.out.join(name);
    let f = File::create(&path).map_err(io_error(&path))?;
    Ok((path, BufWriter::new(f)))
}

fn write_json<T: Serialize>(common: &Common, name: &str, v: &T) -> Result<(), CliError> {
    let (path, mut w) = output_file(common, name)?;
    serde_json::to_writer_pretty(&mut w, v).map_err(|e| CliError::Io {
        path: path.clone(),
        source: e.into(),
    })?;
    writeln!(w).and_then(|_| w.flush()).map_err(io_error(&path))
}

fn write_csv_rows(common: &Common, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let (path, w) = output_file(common, name)?;
    let to_io = |e: csv::Error| CliError::Io {
        path: path.clone(),
        source: std::io::Error::other(e),
    };
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(header).map_err(to_io)?;
    for r in rows {
        csv.write_record(r).map_err(to_io)?;
    }
    csv.flush().map_err(io_error(&path))
}

fn write_matrix(
    common: &Common,
    name: &str,
    ids: &[String],
    f: impl Fn(usize, usize) -> f64,
) -> Result<(), CliError> {
    let mut header = vec!["asset".to_string()];
    header.extend(ids.iter().cloned());
    let rows: Vec<Vec<String>> = (0..ids.len())
        .map(|i| {
            let mut r = vec![ids[i].clone()];
            r.extend((0..ids.len()).map(|j| f(i, j).to_string()));
            r
        })
        .collect();
    write_csv_rows(common, name, &header, &rows)
}

fn centering(table: &Table, flag: Option<&String>, n: usize) -> Result<Centering, CliError> {
    match pick(flag.cloned(), table, "centering")?.as_deref() {
        None | Some("mean") => Ok(Centering::SampleMean),
        Some("zero") => Ok(Centering::KnownLocation(vec![0.0; n])),
        Some(other) => Err(CliError::Config(format!("centering must be `mean` or `zero`, got `{other}`"))),
    }
}

fn centering_name(c: &Centering) -> &'static str {
    match c {
        Centering::SampleMean => "mean",
        Centering::KnownLocation(_) => "zero",
    }
}

fn procedure(table: &Table, flag: Option<&String>) -> Result<Procedure, CliError> {
    let s: String = pick(flag.cloned(), table, "procedure")?.unwrap_or_else(|| "sd".into());
    Ok(s.parse()?)
}

struct Tested {
    panel: ReturnsPanel,
    centered: CenteredPanel,
    procedure: Procedure,
    alpha: f64,
    resamples: Option<usize>,
    seed: Option<u64>,
    mask: Vec<bool>,
    pvalues: Option<mcreg_core::mtest::TestOutcome>,
    correlations: mcreg_core::HalfVec,
}

fn run_procedure(table: &Table, common: &Common, a: &TestArgs, require_mc: bool) -> Result<Tested, CliError> {
    let procedure = procedure(table, a.procedure.as_ref())?;
    if require_mc && !procedure.needs_null() {
        return Err(CliError::Config(format!(
            "`{procedure}` produces no p-values; use an ss/sd procedure"
        )));
    }
    let alpha = pick(a.alpha, table, "alpha")?.unwrap_or(DEFAULT_ALPHA);
    let resamples = pick(a.resamples, table, "B")?.unwrap_or(DEFAULT_RESAMPLES);
    let panel = read_panel(table, a.input.as_ref())?;
    let n = panel.n_assets();
    let spec = procedure
        .test_spec(mcreg_core::matrix::pair_count(n), alpha, resamples)
        .transpose()?;
    let seed = if spec.is_some() { Some(common.require_seed()?) } else { None };
    let centering = centering(table, a.centering.as_ref(), n)?;
    let centered = center(&panel, &centering)?;
    let obs = origin_correlation_vechs(&centered)?;

    let (mask, pvalues) = match (spec, seed) {
        (Some(spec), Some(seed)) => {
            let null = generate_null(&centered, &ResamplingPlan::new(resamples, seed)?)?;
            if let Some(path) = &a.dump_null {
                let f = File::create(path).map_err(io_error(path))?;
                null.write_binary(BufWriter::new(f))?;
            }
            let outcome = run_test(&spec, &obs, &null)?;
            (outcome.rejected.clone(), Some(outcome))
        }
        _ => {
            let d = procedure.decide(&obs, centered.n_obs(), None, alpha)?;
            (d.rejected, None)
        }
    };
    Ok(Tested {
        panel,
        centered,
        procedure,
        alpha,
        resamples: spec.map(|_| resamples),
        seed,
        mask,
        pvalues,
        correlations: obs,
    })
}

#[derive(Serialize)]
struct PairEntry<'a> {
    row: &'a str,
    col: &'a str,
    i: usize,
    j: usize,
    correlation: f64,
    pvalue: f64,
    numerator: usize,
    rejected: bool,
}

#[derive(Serialize)]
struct PvalueReport<'a> {
    procedure: String,
    mode: Mode,
    criterion: &'static str,
    k: Option<usize>,
    gamma: Option<f64>,
    alpha: f64,
    replications: usize,
    seed: u64,
    centering: &'static str,
    n_obs: usize,
    assets: &'a [String],
    k_star: Option<usize>,
    evaluations: usize,
    rejections: usize,
    pairs: Vec<PairEntry<'a>>,
}

pub fn adjust_pvalues(table: &Table, common: &Common, a: &TestArgs) -> Result<(), CliError> {
    let t = run_procedure(table, common, a, true)?;
    let outcome = t.pvalues.as_ref().expect("Monte Carlo procedure");
    let ids = t.panel.asset_ids();
    let n = ids.len();
    let (criterion, k, gamma) = match outcome.spec.criterion {
        Criterion::KFwer(k) => ("k_fwer", Some(k), None),
        Criterion::Fdp(g) => ("fdp", None, Some(g)),
    };
    let p = &outcome.pvalues;
    let pairs_out: Vec<PairEntry> = pairs(n)
        .enumerate()
        .map(|(l, (i, j))| PairEntry {
            row: &ids[i],
            col: &ids[j],
            i,
            j,
            correlation: t.correlations.as_slice()[l],
            pvalue: p.value(l),
            numerator: p.numerators()[l],
            rejected: outcome.rejected[l],
        })
        .collect();
    let report = PvalueReport {
        procedure: t.procedure.to_string(),
        mode: outcome.spec.mode,
        criterion,
        k,
        gamma,
        alpha: t.alpha,
        replications: outcome.spec.replications,
        seed: t.seed.expect("seeded"),
        centering: centering_name(t.centered.centering()),
        n_obs: t.centered.n_obs(),
        assets: ids,
        k_star: p.k_star(),
        evaluations: outcome.evaluations,
        rejections: outcome.reject_count(),
        pairs: pairs_out,
    };
    write_json(common, "pvalues.json", &report)?;

    let mut dense = vec![0.0; n * n];
    for (l, (i, j)) in pairs(n).enumerate() {
        dense[i * n + j] = p.value(l);
        dense[j * n + i] = p.value(l);
    }
    write_matrix(common, "pvalue_matrix.csv", ids, |i, j| dense[i * n + j])
}

#[derive(Serialize)]
struct RegularizeReport<'a> {
    procedure: String,
    alpha: f64,
    replications: Option<usize>,
    seed: Option<u64>,
    epsilon: f64,
    centering: &'static str,
    n_obs: usize,
    assets: &'a [String],
    xi_star: f64,
    theta_star: f64,
    lambda_min_before: f64,
    lambda_min_after: f64,
    mask_density: f64,
    k_star: Option<usize>,
}

pub fn regularize(table: &Table, common: &Common, a: &RegularizeArgs) -> Result<(), CliError> {
    let epsilon = pick(a.epsilon, table, "epsilon")?.unwrap_or(DEFAULT_EPSILON);
    let t = run_procedure(table, common, &a.test, false)?;
    let gamma_hat = t.correlations.fill()?;
    let est = regularize_with_mask(&t.centered, &gamma_hat, t.mask.clone(), epsilon)?;
    let ids = t.panel.asset_ids();
    write_matrix(common, "covariance.csv", ids, |i, j| est.covariance.get(i, j))?;
    write_matrix(common, "correlation.csv", ids, |i, j| est.correlation.get(i, j))?;
    let report = RegularizeReport {
        procedure: t.procedure.to_string(),
        alpha: t.alpha,
        replications: t.resamples,
        seed: t.seed,
        epsilon,
        centering: centering_name(t.centered.centering()),
        n_obs: t.centered.n_obs(),
        assets: ids,
        xi_star: est.xi_star,
        theta_star: est.theta_star,
        lambda_min_before: est.lambda_min_before,
        lambda_min_after: est.lambda_min_after,
        mask_density: est.mask_density(),
        k_star: t.pvalues.as_ref().and_then(|o| o.pvalues.k_star()),
    };
    write_json(common, "regularize.json", &report)
}

fn list<T: Into<Value>>(v: &Option<Vec<T>>) -> Option<Value>
where
    T: Clone,
{
    v.as_ref()
        .map(|xs| Value::Array(xs.iter().cloned().map(Into::into).collect()))
}

fn int(v: Option<usize>) -> Option<Value> {
    v.map(|x| Value::Integer(x as i64))
}

pub fn simulate(table: &Table, common: &Common, a: &SimulateArgs) -> Result<(), CliError> {
    let seed = common.require_seed()?;
    let ints = |v: &Option<Vec<usize>>| {
        v.as_ref()
            .map(|xs| Value::Array(xs.iter().map(|&x| Value::Integer(x as i64)).collect()))
    };
    let merged = overlay(
        table,
        vec![
            ("N_list", ints(&a.n)),
            ("T_list", ints(&a.t)),
            ("delta", list(&a.delta)),
            ("innovation", list(&a.innovation)),
            ("procedures", list(&a.procedures)),
            ("R", int(a.replications)),
            ("B", int(a.resamples)),
            ("alpha", a.alpha.map(Value::Float)),
            ("seed", Some(Value::Integer(seed as i64))),
            ("size_adjusted_bps", a.size_adjusted_bps.then_some(Value::Boolean(true))),
            ("frobenius", a.frobenius.then_some(Value::Boolean(true))),
        ],
    );
    let mut grid_table = merged;
    for k in ["input", "out", "workers"] {
        grid_table.remove(k);
    }
    let grid: GridConfig = Value::Table(grid_table)
        .try_into()
        .map_err(|e| CliError::Config(format!("experiment grid: {e}")))?;
    let results = run_grid(&grid)?;
    let (path, mut w) = output_file(common, "results.csv")?;
    write_rows(&results, &mut w)?;
    w.flush().map_err(io_error(&path))
}

#[derive(Serialize)]
struct StrategyJson<'a> {
    strategy: &'a str,
    window: usize,
    holding: usize,
    kappa: f64,
    short_sales: bool,
    av: f64,
    sd: f64,
    ir: Option<f64>,
    to: f64,
    mdd: f64,
    tw: f64,
    n_formations: usize,
    n_returns: usize,
    fdp_unavailable: usize,
    formations: &'a [Formation],
}

#[derive(Serialize)]
struct BacktestJson<'a> {
    seed: Option<u64>,
    alpha: f64,
    replications: usize,
    epsilon: f64,
    assets: &'a [String],
    strategies: Vec<StrategyJson<'a>>,
}

pub fn backtest(table: &Table, common: &Common, a: &BacktestArgs) -> Result<(), CliError> {
    let panel = read_panel(table, a.input.as_ref())?;
    let strategies: Vec<String> = pick(a.strategy.clone(), table, "strategies")?
        .ok_or_else(|| CliError::Config("no strategies; pass --strategy or set `strategies`".into()))?;
    let strategies: Vec<Strategy> = strategies.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    if strategies.is_empty() {
        return Err(CliError::Config("no strategies given".into()));
    }
    let window = pick(a.window, table, "window")?
        .ok_or_else(|| CliError::Config("no window length; pass --window or set `window`".into()))?;
    let stochastic = strategies
        .iter()
        .any(|s| matches!(s, Strategy::Regularized(p) if p.needs_null()));
    let seed = if stochastic { Some(common.require_seed()?) } else { common.seed };
    let short_sales = if a.no_short_sales {
        false
    } else {
        value(table, "short_sales")?.unwrap_or(true)
    };
    let mut base = BacktestConfig::new(window, Strategy::EqualWeight);
    base.holding = pick(a.holding, table, "holding")?.unwrap_or(base.holding);
    base.kappa = pick(a.kappa, table, "kappa")?.unwrap_or(base.kappa);
    base.short_sales = short_sales;
    base.initial_index = pick(a.initial_index, table, "initial_index")?;
    base.alpha = pick(a.alpha, table, "alpha")?.unwrap_or(DEFAULT_ALPHA);
    base.resamples = pick(a.resamples, table, "B")?.unwrap_or(DEFAULT_RESAMPLES);
    base.epsilon = pick(a.epsilon, table, "epsilon")?.unwrap_or(DEFAULT_EPSILON);
    base.seed = seed.unwrap_or(0);
    let cfgs: Vec<BacktestConfig> = strategies
        .iter()
        .map(|&strategy| BacktestConfig { strategy, ..base })
        .collect();
    for c in &cfgs {
        c.validate()?;
    }

    let reports: Vec<BacktestReport> = run_backtests(&panel, &cfgs).into_iter().collect::<Result<_, _>>()?;

    let json = BacktestJson {
        seed,
        alpha: base.alpha,
        replications: base.resamples,
        epsilon: base.epsilon,
        assets: panel.asset_ids(),
        strategies: reports
            .iter()
            .map(|r| StrategyJson {
                strategy: &r.strategy,
                window: r.window,
                holding: r.holding,
                kappa: r.kappa,
                short_sales: r.short_sales,
                av: r.av,
                sd: r.sd,
                ir: r.ir,
                to: r.to,
                mdd: r.mdd,
                tw: r.tw,
                n_formations: r.formations.len(),
                n_returns: r.net_returns.len(),
                fdp_unavailable: r.formations.iter().filter(|f| f.fdp_unavailable).count(),
                formations: &r.formations,
            })
            .collect(),
    };
    write_json(common, "report.json", &json)?;

    let mut header = vec!["date".to_string()];
    header.extend(reports.iter().map(|r| r.strategy.clone()));
    let rows: Vec<Vec<String>> = (0..reports[0].net_returns.len())
        .map(|k| {
            let mut row = vec![reports[0].return_timestamps[k].clone()];
            row.extend(reports.iter().map(|r| r.net_returns[k].to_string()));
            row
        })
        .collect();
    write_csv_rows(common, "net_returns.csv", &header, &rows)?;

    let thresholded: Vec<&BacktestReport> = reports
        .iter()
        .filter(|r| r.formations.iter().any(|f| f.significant_proportion.is_some()))
        .collect();
    let mut header = vec!["date".to_string()];
    header.extend(thresholded.iter().map(|r| r.strategy.clone()));
    let rows: Vec<Vec<String>> = (0..reports[0].formations.len())
        .map(|k| {
            let mut row = vec![reports[0].formations[k].timestamp.clone()];
            row.extend(thresholded.iter().map(|r| {
                r.formations[k]
                    .significant_proportion
                    .map(|p| p.to_string())
                    .unwrap_or_default()
            }));
            row
        })
        .collect();
    write_csv_rows(common, "significant_proportion.csv", &header, &rows)
}

/// Timing and provenance of a run; the only output allowed to differ between identical runs.
pub fn write_log(common: &Common, command: &str, elapsed: Duration) -> Result<(), CliError> {
    let (path, mut w) = output_file(common, "run.log")?;
    let finished = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    writeln!(
        w,
        "command={command}\nseed={}\nworkers={}\nwall_time_secs={:.3}\nfinished_unix={finished}",
        common.seed.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
        common
            .workers
            .map(|s| s.to_string())
            .unwrap_or_else(|| rayon::current_num_threads().to_string()),
        elapsed.as_secs_f64(),
    )
    .and_then(|_| w.flush())
    .map_err(io_error(&path))
}
