use std::fs;
use std::path::PathBuf;

use jointnorm::diagnostics::FieldSummary;
use jointnorm::experiments::{cokrige, darcy, factor_compare, monod, sampling, FieldPosterior};
use jointnorm::inference::MwgConfig;
use jointnorm::verify::{self, VerifyConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::output::{header, numbered, OutDir};
use crate::plots;
use crate::{CliError, Common};

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Starts from `base`, overlays the TOML file if any, then validates the
/// result against the schema.
fn load<T: Serialize + DeserializeOwned>(args: &Common, base: T) -> Result<T, CliError> {
    let Some(path) = &args.config else {
        return Ok(base);
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let file: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut table = toml::Table::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?;
    merge(&mut table, file);
    table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {}", path.display(), e.message())))
}

fn check_scale(args: &Common) -> Result<Option<f64>, CliError> {
    match args.scale {
        Some(f) if !(f > 0.0 && f.is_finite()) => Err(CliError::Config(format!("--scale must be positive (got {f})"))),
        s => Ok(s),
    }
}

fn reject(flag: bool, what: &str, command: &str) -> Result<(), CliError> {
    if flag {
        return Err(CliError::Config(format!("{what} does not apply to {command}")));
    }
    Ok(())
}

fn apply_mcmc(args: &Common, mcmc: &mut MwgConfig) {
    if let Some(n) = args.samples {
        mcmc.total_samples = n;
    }
    if let Some(b) = args.burn_in {
        mcmc.burn_in = b;
    }
}

/// Prints the resolved configuration and returns `true` when asked to.
fn dumped<T: Serialize>(args: &Common, cfg: &T) -> Result<bool, CliError> {
    if args.dump_config {
        print!("{}", toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?);
    }
    Ok(args.dump_config)
}

fn out_dir(args: &Common, command: &str) -> Result<OutDir, CliError> {
    OutDir::create(args.out.clone().unwrap_or_else(|| PathBuf::from("out").join(command)))
}

fn report(path: &std::path::Path) {
    println!("outputs written to {}", path.display());
}

pub fn sample_prior(args: &Common) -> Result<(), CliError> {
    let command = "sample-prior";
    reject(args.burn_in.is_some(), "--burn-in", command)?;
    reject(args.full_scale, "--full-scale", command)?;
    let mut cfg = load(args, sampling::SamplePriorConfig::default())?;
    if let Some(f) = check_scale(args)? {
        cfg = cfg.scaled(f);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.samples {
        cfg.samples = n;
    }
    if dumped(args, &cfg)? {
        return Ok(());
    }
    let mut out = out_dir(args, command)?;
    let cases = sampling::run(&cfg)?;
    out.phase("sample");
    let mut summary = Vec::new();
    for case in &cases {
        let k = case.p_samples.len();
        for (field, nodes, samples) in [("p", &case.p_nodes, &case.p_samples), ("m", &case.m_nodes, &case.m_samples)] {
            let mut head = header(&["x", "y"]);
            head.extend(numbered("sample", k));
            let rows = nodes.iter().enumerate().map(|(i, n)| {
                let mut r = vec![n[0], n[1]];
                r.extend(samples.iter().map(|s| s[i]));
                r
            });
            out.csv(&format!("{}_{field}.csv", case.name), &head, rows)?;
        }
        let rows = case
            .pairs
            .iter()
            .zip(case.target_correlation.iter().zip(&case.realised_correlation))
            .map(|(&(i, j), (&t, &r))| vec![i as f64, j as f64, t, r]);
        out.csv(
            &format!("{}_correlation.csv", case.name),
            &header(&["p_node", "m_node", "target", "realised"]),
            rows,
        )?;
        let worst = case
            .target_correlation
            .iter()
            .zip(&case.realised_correlation)
            .map(|(t, r)| (t - r).abs())
            .fold(0.0, f64::max);
        summary.push(json!({ "case": case.name, "p_nodes": case.p_nodes.len(), "m_nodes": case.m_nodes.len(),
            "max_correlation_gap": worst }));
    }
    let names: Vec<&str> = cases.iter().map(|c| c.name.as_str()).collect();
    out.text("plot.py", &plots::sample_prior(&names))?;
    report(&out.finish(command, cfg.seed, &cfg, json!({ "cases": summary }))?);
    Ok(())
}

pub fn factor_compare(args: &Common) -> Result<(), CliError> {
    let command = "factor-compare";
    reject(args.burn_in.is_some(), "--burn-in", command)?;
    reject(args.full_scale, "--full-scale", command)?;
    let mut cfg = load(args, factor_compare::FactorCompareConfig::default())?;
    if let Some(f) = check_scale(args)? {
        cfg = cfg.scaled(f);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.samples {
        cfg.samples = n;
    }
    if dumped(args, &cfg)? {
        return Ok(());
    }
    let mut out = out_dir(args, command)?;
    let r = factor_compare::run(&cfg)?;
    out.phase("compute");
    let kinds: Vec<String> = r.outcomes.iter().map(|o| kind_name(o.kind)).collect();
    let mut head = header(&["x", "target"]);
    head.extend(kinds.iter().map(|k| format!("phi_{k}")));
    let rows = (0..r.x.len()).map(|i| {
        let mut row = vec![r.x[i], r.target[i]];
        row.extend(r.outcomes.iter().map(|o| o.phi_diag[i]));
        row
    });
    out.csv("phi.csv", &head, rows)?;
    let mut summary = Vec::new();
    for (o, k) in r.outcomes.iter().zip(&kinds) {
        let n = o.p_samples.len();
        let mut head = header(&["x"]);
        head.extend(numbered("p", n));
        head.extend(numbered("m", n));
        let rows = (0..r.x.len()).map(|i| {
            let mut row = vec![r.x[i]];
            row.extend(o.p_samples.iter().map(|s| s[i]));
            row.extend(o.m_samples.iter().map(|s| s[i]));
            row
        });
        out.csv(&format!("samples_{k}.csv"), &head, rows)?;
        let gap = o.phi_diag.iter().zip(&r.target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        summary.push(json!({ "filter": k, "max_abs_phi_minus_target": gap }));
    }
    out.text("plot.py", &plots::factor_compare(&kinds))?;
    report(&out.finish(command, cfg.seed, &cfg, json!({ "filters": summary }))?);
    Ok(())
}

fn kind_name(k: jointnorm::covariance::FilterKind) -> String {
    serde_json::to_value(k)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{k:?}"))
}

pub fn monod(args: &Common) -> Result<(), CliError> {
    let command = "monod";
    reject(args.full_scale, "--full-scale", command)?;
    let mut cfg = load(args, monod::MonodConfig::default())?;
    if let Some(f) = check_scale(args)? {
        for n in &mut cfg.grid.points {
            *n = ((*n as f64 * f).round() as usize).max(2);
        }
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    apply_mcmc(args, &mut cfg.mcmc);
    if dumped(args, &cfg)? {
        return Ok(());
    }
    let mut out = out_dir(args, command)?;
    let r = monod::run(&cfg, true)?;
    out.phase("compute");
    let (pv, mv) = (cfg.grid.p_values(), cfg.grid.m_values());
    let mut scans = Vec::new();
    let mut summary_rows = Vec::new();
    for (k, scan) in r.scans.iter().enumerate() {
        let mut head = header(&["p", "m", "log_prior"]);
        head.extend(scan.entries.iter().map(|e| format!("log_post_c{}", e.correlation)));
        let rows = (0..pv.len()).flat_map(|i| {
            let (pv, mv) = (&pv, &mv);
            (0..mv.len()).map(move |j| {
                let mut row = vec![pv[i], mv[j], scan.entries[0].log_prior_grid[(i, j)]];
                row.extend(scan.entries.iter().map(|e| e.log_posterior_grid[(i, j)]));
                row
            })
        });
        out.csv(&format!("grid_noise{k}.csv"), &head, rows)?;
        out.csv(&format!("data_noise{k}.csv"), &header(&["substrate", "data"]), cfg.substrate.iter().zip(scan.data.iter()).map(|(&s, &d)| vec![s, d]))?;
        for e in &scan.entries {
            summary_rows.push(vec![scan.noise, e.correlation, e.log_density_at_truth]);
        }
        scans.push(json!({ "noise": scan.noise, "best_correlation": scan.best_correlation,
            "log_density_at_truth": scan.entries.iter().map(|e| (e.correlation, e.log_density_at_truth)).collect::<Vec<_>>() }));
    }
    out.csv("scan_summary.csv", &header(&["noise", "correlation", "log_density_at_truth"]), summary_rows)?;
    let mut chain_summary = Value::Null;
    if let Some(ch) = &r.chain {
        let rows = (0..ch.c.len()).map(|k| vec![ch.p[k], ch.m[k], ch.c[k]]);
        out.csv("chain.csv", &header(&["p", "m", "c"]), rows)?;
        chain_summary = json!({
            "map": ch.map.point.iter().collect::<Vec<_>>(),
            "positive_mass": ch.positive_mass,
            "s_acceptance": ch.s_acceptance,
            "gamma_acceptance": ch.gamma_acceptance,
            "ess_c": ch.ess_c,
            "retained": ch.c.len(),
        });
    }
    out.text("plot.py", &plots::monod(r.scans.len()))?;
    report(&out.finish(command, cfg.seed, &cfg, json!({ "scans": scans, "chain": chain_summary }))?);
    Ok(())
}

fn summary_columns(name: &str, s: &FieldSummary, field: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    (
        vec![format!("{name}_mean_{field}"), format!("{name}_std_{field}")],
        vec![s.mean.iter().copied().collect(), s.variance.iter().map(|v| v.max(0.0).sqrt()).collect()],
    )
}

/// Columns of `mean_*`/`std_*` for every named posterior.
fn posterior_columns(runs: &[(String, &FieldPosterior)]) -> (Vec<String>, Vec<Vec<f64>>) {
    let (mut names, mut cols) = (Vec::new(), Vec::new());
    for (name, post) in runs {
        for (field, s) in [("p", &post.p), ("m", &post.m)] {
            let (n, c) = summary_columns(name, s, field);
            names.extend(n);
            cols.extend(c);
        }
    }
    (names, cols)
}

fn transpose_rows(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = cols.first().map_or(0, Vec::len);
    (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

fn histogram_rows(counts: &[usize], lo: f64, hi: f64) -> Vec<Vec<f64>> {
    let w = (hi - lo) / counts.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| vec![lo + i as f64 * w, lo + (i + 1) as f64 * w, c as f64])
        .collect()
}

pub fn cokrige(args: &Common) -> Result<(), CliError> {
    let command = "cokrige";
    let base = if args.full_scale {
        cokrige::CokrigeConfig::full_scale()
    } else {
        cokrige::CokrigeConfig::default()
    };
    let mut cfg = load(args, base)?;
    if let Some(f) = check_scale(args)? {
        cfg = cfg.scaled(f);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    apply_mcmc(args, &mut cfg.mcmc);
    if dumped(args, &cfg)? {
        return Ok(());
    }
    let mut out = out_dir(args, command)?;
    let r = cokrige::run(&cfg, true)?;
    out.phase("compute");
    let joint = r.joint.as_ref().expect("MCMC requested");
    let mut runs = vec![("independent".to_string(), &r.independent.posterior)];
    for f in &r.fixed {
        runs.push((format!("fixed_c{}", f.correlation), &f.posterior));
    }
    runs.push(("joint".to_string(), &joint.posterior));
    let (names, cols) = posterior_columns(&runs);
    let mut head = header(&["x", "y", "truth_p", "truth_m"]);
    head.extend(names);
    head.extend(header(&["d_p", "d_m"]));
    let mut all = vec![
        r.nodes.iter().map(|n| n[0]).collect(),
        r.nodes.iter().map(|n| n[1]).collect(),
        r.truth_p.iter().copied().collect(),
        r.truth_m.iter().copied().collect(),
    ];
    all.extend(cols);
    all.push(joint.d_p.iter().copied().collect());
    all.push(joint.d_m.iter().copied().collect());
    out.csv("fields.csv", &head, transpose_rows(&all))?;
    out.csv("data.csv", &header(&["data"]), r.data.iter().map(|&d| vec![d]))?;
    out.csv("c_chain.csv", &header(&["c"]), joint.c.iter().map(|&c| vec![c]))?;
    out.csv("c_histogram.csv", &header(&["lo", "hi", "count"]), histogram_rows(&joint.c_histogram, -1.0, 1.0))?;
    out.csv("tau_trace.csv", &header(&["iteration", "tau"]), joint.tau_trace.iter().map(|&(i, t)| vec![i as f64, t]))?;
    let fixed: Vec<Value> = r.fixed.iter().map(|f| json!({ "correlation": f.correlation, "metrics": f.metrics })).collect();
    let summary = json!({
        "report": joint.report,
        "fixed": fixed,
        "c_median": joint.c_median,
        "negative_mass": joint.negative_mass,
    });
    out.json("report.json", &summary)?;
    out.text("plot.py", &plots::fields(&runs.iter().map(|r| r.0.as_str()).collect::<Vec<_>>(), false))?;
    report(&out.finish(command, cfg.seed, &cfg, summary)?);
    Ok(())
}

pub fn darcy(args: &Common) -> Result<(), CliError> {
    let command = "darcy";
    let base = if args.full_scale {
        darcy::DarcyConfig::full_scale()
    } else {
        darcy::DarcyConfig::default()
    };
    let mut cfg = load(args, base)?;
    if let Some(f) = check_scale(args)? {
        cfg = cfg.scaled(f);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    apply_mcmc(args, &mut cfg.mcmc);
    if dumped(args, &cfg)? {
        return Ok(());
    }
    let mut out = out_dir(args, command)?;
    let r = darcy::run(&cfg)?;
    out.phase("compute");
    let runs = vec![
        ("independent".to_string(), &r.independent.posterior),
        ("joint".to_string(), &r.joint.posterior),
    ];
    let (names, cols) = posterior_columns(&runs);
    let mut head = header(&["x", "y", "label", "truth_p", "truth_m", "truth_u"]);
    head.extend(names);
    head.extend(header(&["d_p", "d_m"]));
    let mut all = vec![
        r.nodes.iter().map(|n| n[0]).collect(),
        r.nodes.iter().map(|n| n[1]).collect(),
        r.labels.iter().map(|&l| l as f64).collect(),
        r.truth_p.iter().copied().collect(),
        r.truth_m.iter().copied().collect(),
        r.truth_u.iter().copied().collect(),
    ];
    all.extend(cols);
    all.push(r.d_p.iter().copied().collect());
    all.push(r.d_m.iter().copied().collect());
    out.csv("fields.csv", &head, transpose_rows(&all))?;
    out.csv("data.csv", &header(&["data"]), r.data.iter().map(|&d| vec![d]))?;
    let nc = r.joint.c.len();
    out.csv("c_chain.csv", &numbered("c", nc), transpose_rows(&r.joint.c))?;
    for (l, h) in r.c_histograms.iter().enumerate() {
        out.csv(&format!("c{l}_histogram.csv"), &header(&["lo", "hi", "count"]), histogram_rows(h, -1.0, 1.0))?;
    }
    let bins = r.c_histogram_2d.len();
    out.csv(
        "c_histogram_2d.csv",
        &numbered("c1_bin", bins),
        r.c_histogram_2d.iter().map(|row| row.iter().map(|&c| c as f64).collect()),
    )?;
    let tau = r
        .independent
        .tau_trace
        .iter()
        .map(|&(i, t)| vec![0.0, i as f64, t])
        .chain(r.joint.tau_trace.iter().map(|&(i, t)| vec![1.0, i as f64, t]));
    out.csv("tau_trace.csv", &header(&["joint", "iteration", "tau"]), tau)?;
    out.csv("map_reduced.csv", &header(&["coefficient"]), r.map.point.iter().map(|&v| vec![v]))?;
    let run_summary = |d: &darcy::DarcyRun| {
        json!({
            "metrics": d.metrics,
            "c_median": d.c_median,
            "ess_c": d.ess_c,
            "ess_p_median": d.ess_p_median,
            "ess_m_median": d.ess_m_median,
            "s_acceptance": d.s_acceptance,
            "gamma_acceptance": d.gamma_acceptance,
        })
    };
    let summary = json!({
        "report": r.report,
        "captured_variance": r.captured,
        "map_iterations": r.map.iterations,
        "independent": run_summary(&r.independent),
        "joint": run_summary(&r.joint),
    });
    out.json("report.json", &summary)?;
    out.text("plot.py", &plots::fields(&["independent", "joint"], true))?;
    report(&out.finish(command, cfg.seed, &cfg, summary)?);
    Ok(())
}

pub fn verify(args: &Common) -> Result<(), CliError> {
    let command = "verify";
    reject(args.burn_in.is_some(), "--burn-in", command)?;
    reject(args.full_scale, "--full-scale", command)?;
    let mut cfg = load(args, VerifyConfig::default())?;
    if let Some(f) = check_scale(args)? {
        cfg.sign_mesh = cfg.sign_mesh.scaled(f);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.samples {
        cfg.mc_samples = n;
    }
    if dumped(args, &cfg)? {
        return Ok(());
    }
    let mut out = out_dir(args, command)?;
    let checks = verify::run_suite(&cfg)?;
    out.phase("checks");
    let width = checks.iter().map(|c| c.name.chars().count()).max().unwrap_or(0);
    println!("{:<width$}  {:>6}  {:>10}  {:>10}  {:>8}", "check", "result", "measured", "tolerance", "seconds");
    for c in &checks {
        println!(
            "{:<width$}  {:>6}  {:>10.3e}  {:>10.1e}  {:>8.2}",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.measured,
            c.tolerance,
            c.seconds
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    // Per-check seconds live in timings.json so the other files stay reproducible.
    let stable: Vec<Value> = checks
        .iter()
        .map(|c| json!({ "name": c.name, "passed": c.passed, "measured": c.measured, "tolerance": c.tolerance, "detail": c.detail }))
        .collect();
    for c in &checks {
        out.record(&c.name, c.seconds);
    }
    out.json("checks.json", &Value::Array(stable))?;
    let path = out.finish(command, cfg.seed, &cfg, json!({ "passed": checks.len() - failed, "failed": failed }))?;
    report(&path);
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(())
}
