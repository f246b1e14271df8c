//! Subcommand implementations. Each returns the files to write.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use regsing::geometry::{
    assemble_biharmonic, assemble_harmonic, build_metric_family, recover_biharmonic, recover_harmonic, Conformal,
    GeometryError, MetricFamily, MetricForm, MetricSpec, DEFAULT_T_SWITCH,
};
use regsing::linalg::CMatrix;
use regsing::linear_rs::{
    fundamental_solution, monodromy_at, monodromy_generator, solve_inhomogeneous, LinearError, LinearRSSystem,
};
use regsing::singular_ivp::{AdmissibilityReport, ExprSystem, SingularError, SingularIVP, SolveOptions, Trajectory};
use regsing::{parse, parse_with, Expr};

use crate::config::{LinearConfig, MetricConfig, RunConfig, SystemConfig};
use crate::format::{complex_json, complex_matrix_json, csv, gradient, parse_sweep, real_matrix_json};
use crate::CliError;

/// Output of a command: optional CSV body and a JSON summary.
pub struct Output {
    pub csv: Option<String>,
    pub summary: Value,
    /// A failure to report after the outputs are written.
    pub failure: Option<CliError>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn parse_expr(text: &str, what: &str) -> Result<Expr, CliError> {
    parse(text).map_err(|e| config_err(format!("{what}: {e}")))
}

fn required<T: Copy>(v: Option<T>, name: &str) -> Result<T, CliError> {
    v.ok_or_else(|| config_err(format!("missing required field '{name}'")))
}

pub fn geometry_error(e: GeometryError) -> CliError {
    match e {
        GeometryError::Shape(_) => CliError::Config(e.to_string()),
        GeometryError::Eval(_) => CliError::Numerical(e.to_string()),
        GeometryError::Solve(s) => singular_error(s),
        _ => CliError::Validation(e.to_string()),
    }
}

pub fn singular_error(e: SingularError) -> CliError {
    match e {
        SingularError::Inadmissible(_) | SingularError::Precondition(_) => CliError::Validation(e.to_string()),
        SingularError::Shape(_) => CliError::Config(e.to_string()),
        _ => CliError::Numerical(e.to_string()),
    }
}

pub fn linear_error(e: LinearError) -> CliError {
    match e {
        LinearError::Dimension(_) | LinearError::Shape(_) => CliError::Config(e.to_string()),
        LinearError::Integration(_) => CliError::Numerical(e.to_string()),
        _ => CliError::Validation(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>], r: usize, c: usize, name: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(config_err(format!("block '{name}' must be {r}x{c}")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn expr_matrix(rows: Option<&Vec<Vec<String>>>, r: usize, c: usize, name: &str) -> Result<Vec<Vec<Expr>>, CliError> {
    match rows {
        None => Ok(vec![vec![Expr::num(0.0); c]; r]),
        Some(rows) => {
            if rows.len() != r || rows.iter().any(|row| row.len() != c) {
                return Err(config_err(format!("block '{name}' must be {r}x{c}")));
            }
            rows.iter()
                .map(|row| row.iter().map(|s| parse_expr(s, &format!("block '{name}'"))).collect())
                .collect()
        }
    }
}

pub fn metric_spec(m: &MetricConfig, cfg: &RunConfig) -> Result<MetricSpec, CliError> {
    let (p, q) = (m.dim_p, m.dim_m);
    let form = match (&m.diagonal, &m.block) {
        (Some(d), None) => {
            if d.len() != p + q {
                return Err(config_err(format!("'diagonal' has {} entries, expected dim_p + dim_m = {}", d.len(), p + q)));
            }
            MetricForm::Diagonal(d.iter().map(|s| parse_expr(s, "metric diagonal")).collect::<Result<_, _>>()?)
        }
        (None, Some(b)) => {
            let zeros = |r: usize, c: usize| vec![vec![0.0; c]; r];
            MetricForm::Block {
                a0: matrix(&b.a0, q, q, "a0")?,
                a1: matrix(b.a1.as_ref().unwrap_or(&zeros(q, q)), q, q, "a1")?,
                c0: matrix(b.c0.as_ref().unwrap_or(&zeros(p, q)), p, q, "c0")?,
                b: expr_matrix(b.b.as_ref(), p, p, "b")?,
                a: expr_matrix(b.a.as_ref(), q, q, "a")?,
                c: expr_matrix(b.c.as_ref(), p, q, "c")?,
            }
        }
        _ => return Err(config_err("metric needs exactly one of 'diagonal' or 'block'")),
    };
    let conformal = match &m.conformal {
        Some(c) => Some(Conformal { alpha: parse_expr(&c.alpha, "conformal alpha")?, n: c.n }),
        None => None,
    };
    let t_end = cfg.t_end.unwrap_or(1.0);
    Ok(MetricSpec {
        dim_p: p,
        dim_m: q,
        form,
        conformal,
        t_validate: m.t_validate.unwrap_or(t_end),
        t_switch: cfg.t_switch.unwrap_or(DEFAULT_T_SWITCH),
    })
}

fn metric_family(cfg: &RunConfig) -> Result<Arc<MetricFamily>, CliError> {
    let m = cfg.metric.as_ref().ok_or_else(|| config_err("missing 'metric' block"))?;
    let spec = metric_spec(m, cfg)?;
    build_metric_family(&spec).map(Arc::new).map_err(geometry_error)
}

fn solve_options(cfg: &RunConfig) -> SolveOptions {
    SolveOptions {
        order: cfg.order(),
        tol: cfg.tol(),
        t_max: cfg.t_max.unwrap_or(f64::INFINITY),
        handoff: cfg.handoff,
    }
}

fn t_end(cfg: &RunConfig) -> Result<f64, CliError> {
    let t = required(cfg.t_end, "t_end")?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(config_err("'t_end' must be positive"));
    }
    Ok(t)
}

fn grid(t_end: f64, samples: usize) -> Vec<f64> {
    (1..=samples).map(|j| t_end * j as f64 / samples as f64).collect()
}

pub fn report_json(r: &AdmissibilityReport) -> Value {
    json!({
        "pass": r.pass,
        "residual_norm": r.residual_norm,
        "order": r.order,
        "offending_h": r.offending_h,
        "offending_tail": r.offending_tail,
        "jacobian": real_matrix_json(&r.jacobian),
    })
}

fn trajectory_json(traj: &Trajectory) -> Value {
    let coeffs: Vec<Vec<f64>> = (0..=traj.bootstrap.order()).map(|h| traj.bootstrap.coeff(h)).collect();
    json!({
        "handoff": traj.handoff,
        "y_handoff": traj.y_handoff,
        "series_coefficients": coeffs,
        "admissibility": report_json(&traj.report),
        "diagnostics": {
            "accepted_steps": traj.diagnostics.accepted_steps,
            "rejected_steps": traj.diagnostics.rejected_steps,
            "evaluations": traj.diagnostics.evaluations,
            "max_midpoint_residual": traj.diagnostics.max_midpoint_residual,
            "warnings": traj.diagnostics.warnings,
        },
    })
}

fn summary(cfg: &RunConfig, command: &str) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("command".into(), json!(command));
    m.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    m
}

/// Inadmissible problems still produce their report.
fn inadmissible(mut s: Map<String, Value>, ivp: &SingularIVP, order: usize) -> Result<Output, CliError> {
    let report = ivp.check_admissibility(order).map_err(singular_error)?;
    s.insert("admissibility".into(), report_json(&report));
    let failure = CliError::Validation(format!(
        "problem is not admissible (residual {:.3e}, offending h = {:?})",
        report.residual_norm, report.offending_h
    ));
    Ok(Output { csv: None, summary: Value::Object(s), failure: Some(failure) })
}

struct HarmonicRun {
    traj: Trajectory,
    r_t: f64,
    r_dot_t: f64,
}

fn harmonic_once(fam: &Arc<MetricFamily>, v: f64, t_end: f64, opts: &SolveOptions) -> Result<HarmonicRun, CliError> {
    let ivp = assemble_harmonic(fam, v, t_end).map_err(geometry_error)?;
    let traj = ivp.solve(opts).map_err(singular_error)?;
    let y = traj.eval(t_end);
    Ok(HarmonicRun { r_t: t_end * y[0], r_dot_t: y[0] + t_end * y[1], traj })
}

pub fn solve_harmonic(cfg: &RunConfig) -> Result<Output, CliError> {
    let fam = metric_family(cfg)?;
    let t_end = t_end(cfg)?;
    let opts = solve_options(cfg);
    let mut s = summary(cfg, "solve-harmonic");
    if let Some(spec) = cfg.sweep.as_ref().and_then(|sw| sw.v.as_ref()) {
        let vs = parse_sweep(spec).map_err(CliError::Config)?;
        return harmonic_sweep(&fam, &vs, t_end, &opts, cfg.samples(), s);
    }
    let v = required(cfg.v, "v")?;
    let ivp = assemble_harmonic(&fam, v, t_end).map_err(geometry_error)?;
    let traj = match ivp.solve(&opts) {
        Err(SingularError::Inadmissible(_)) => return inadmissible(s, &ivp, opts.order),
        other => other.map_err(singular_error)?,
    };
    let sol = recover_harmonic(&fam, &traj, &grid(t_end, cfg.samples())).map_err(geometry_error)?;
    let rows: Vec<Vec<f64>> = sol.samples.iter().map(|p| vec![p.t, p.r, p.r_dot, p.residual]).collect();
    s.insert("v".into(), json!(v));
    s.insert("t_end".into(), json!(t_end));
    s.insert("y0".into(), json!(ivp.y0));
    s.insert("max_residual".into(), json!(sol.max_residual));
    s.insert("trajectory".into(), trajectory_json(&traj));
    Ok(Output { csv: Some(csv(&["t", "r", "r_dot", "residual"], &rows)), summary: Value::Object(s), failure: None })
}

fn harmonic_sweep(
    fam: &Arc<MetricFamily>,
    vs: &[f64],
    t_end: f64,
    opts: &SolveOptions,
    samples: usize,
    mut s: Map<String, Value>,
) -> Result<Output, CliError> {
    let times = grid(t_end, samples);
    let results: Vec<Result<(f64, f64, f64), CliError>> = vs
        .par_iter()
        .map(|&v| {
            let run = harmonic_once(fam, v, t_end, opts)?;
            let sol = recover_harmonic(fam, &run.traj, &times).map_err(geometry_error)?;
            Ok((run.r_t, run.r_dot_t, sol.max_residual))
        })
        .collect();
    sweep_output(&mut s, vs, None, results)
}

fn sweep_output(
    s: &mut Map<String, Value>,
    vs: &[f64],
    ws: Option<&[f64]>,
    results: Vec<Result<(f64, f64, f64), CliError>>,
) -> Result<Output, CliError> {
    let mut rows = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    let mut first_failure = None;
    let nv = vs.len();
    for (k, res) in results.into_iter().enumerate() {
        let v = vs[k % nv];
        let mut row = vec![v];
        if let Some(ws) = ws {
            row.push(ws[k / nv]);
        }
        match res {
            Ok((r, rd, m)) => row.extend([r, rd, m]),
            Err(e) => {
                row.extend([f64::NAN; 3]);
                errors.push(json!({"row": k, "error": e.to_string()}));
                first_failure.get_or_insert(e);
            }
        }
        rows.push(row);
    }
    let rcol = if ws.is_some() { 2 } else { 1 };
    let groups: Vec<Value> = rows
        .chunks(nv)
        .map(|chunk| {
            let r: Vec<f64> = chunk.iter().map(|row| row[rcol]).collect();
            json!(gradient(vs, &r))
        })
        .collect();
    s.insert("sweep_v".into(), json!(vs));
    if let Some(ws) = ws {
        s.insert("sweep_w".into(), json!(ws));
        s.insert("dr_dv".into(), Value::Array(groups));
    } else {
        s.insert("dr_dv".into(), groups.into_iter().next().unwrap_or(json!([])));
    }
    s.insert("errors".into(), Value::Array(errors));
    let header: &[&str] = if ws.is_some() {
        &["v", "w", "r_T", "r_dot_T", "max_residual"]
    } else {
        &["v", "r_T", "r_dot_T", "max_residual"]
    };
    Ok(Output { csv: Some(csv(header, &rows)), summary: Value::Object(s.clone()), failure: first_failure })
}

pub fn solve_biharmonic(cfg: &RunConfig) -> Result<Output, CliError> {
    let fam = metric_family(cfg)?;
    let t_end = t_end(cfg)?;
    let opts = solve_options(cfg);
    let mut s = summary(cfg, "solve-biharmonic");
    let sweep = cfg.sweep.as_ref();
    if sweep.is_some_and(|sw| sw.v.is_some() || sw.w.is_some()) {
        let sw = sweep.unwrap();
        let vs = match &sw.v {
            Some(spec) => parse_sweep(spec).map_err(CliError::Config)?,
            None => vec![required(cfg.v, "v")?],
        };
        let ws = match &sw.w {
            Some(spec) => parse_sweep(spec).map_err(CliError::Config)?,
            None => vec![required(cfg.w, "w")?],
        };
        let times = grid(t_end, cfg.samples());
        let pairs: Vec<(f64, f64)> = ws.iter().flat_map(|&w| vs.iter().map(move |&v| (v, w))).collect();
        let results = pairs
            .par_iter()
            .map(|&(v, w)| {
                let ivp = assemble_biharmonic(&fam, v, w, t_end).map_err(geometry_error)?;
                let traj = ivp.solve(&opts).map_err(singular_error)?;
                let sol = recover_biharmonic(&fam, &traj, &times).map_err(geometry_error)?;
                let y = traj.eval(t_end);
                Ok((t_end * y[0], y[0] + t_end * y[1], sol.max_res_def.max(sol.max_res_eq)))
            })
            .collect();
        return sweep_output(&mut s, &vs, Some(&ws), results);
    }
    let (v, w) = (required(cfg.v, "v")?, required(cfg.w, "w")?);
    let ivp = assemble_biharmonic(&fam, v, w, t_end).map_err(geometry_error)?;
    let traj = match ivp.solve(&opts) {
        Err(SingularError::Inadmissible(_)) => return inadmissible(s, &ivp, opts.order),
        other => other.map_err(singular_error)?,
    };
    let sol = recover_biharmonic(&fam, &traj, &grid(t_end, cfg.samples())).map_err(geometry_error)?;
    let rows: Vec<Vec<f64>> = sol
        .samples
        .iter()
        .map(|p| vec![p.t, p.r, p.r_dot, p.f, p.f_dot, p.res_def, p.res_eq])
        .collect();
    s.insert("v".into(), json!(v));
    s.insert("w".into(), json!(w));
    s.insert("t_end".into(), json!(t_end));
    s.insert("y0".into(), json!(ivp.y0));
    s.insert("r_ddot0".into(), json!(sol.r_ddot0));
    s.insert("r_dddot0".into(), json!(sol.r_dddot0));
    s.insert("max_res_def".into(), json!(sol.max_res_def));
    s.insert("max_res_eq".into(), json!(sol.max_res_eq));
    s.insert("trajectory".into(), trajectory_json(&traj));
    let header = ["t", "r", "r_dot", "F", "F_dot", "res_def", "res_eq"];
    Ok(Output { csv: Some(csv(&header, &rows)), summary: Value::Object(s), failure: None })
}

fn singular_problem(sys: &SystemConfig, t_end: f64) -> Result<SingularIVP, CliError> {
    let singular: Vec<&str> = sys.singular.iter().map(String::as_str).collect();
    let regular: Vec<&str> = sys.regular.iter().map(String::as_str).collect();
    if sys.y0.len() != singular.len() {
        return Err(config_err(format!("'y0' has {} entries for a system of dimension {}", sys.y0.len(), singular.len())));
    }
    let system = ExprSystem::parse(&singular, &regular).map_err(|e| config_err(format!("system: {e}")))?;
    SingularIVP::new(Arc::new(system), sys.y0.clone(), t_end).map_err(singular_error)
}

pub fn solve_singular(cfg: &RunConfig) -> Result<Output, CliError> {
    let sys = cfg.system.as_ref().ok_or_else(|| config_err("missing 'system' block"))?;
    let t_end = t_end(cfg)?;
    let ivp = singular_problem(sys, t_end)?;
    let opts = solve_options(cfg);
    let mut s = summary(cfg, "solve-singular");
    let traj = match ivp.solve(&opts) {
        Err(SingularError::Inadmissible(_)) => return inadmissible(s, &ivp, opts.order),
        other => other.map_err(singular_error)?,
    };
    let k = sys.y0.len();
    let mut rows = Vec::new();
    let mut max_residual = 0.0f64;
    for t in grid(t_end, cfg.samples()) {
        let mut row = vec![t];
        row.extend(traj.eval(t));
        let res = traj.residual(t).map_err(|e| CliError::Numerical(e.to_string()))?;
        max_residual = max_residual.max(res);
        row.push(res);
        rows.push(row);
    }
    let mut header = vec!["t".to_string()];
    header.extend((1..=k).map(|i| format!("y{i}")));
    header.push("residual".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    s.insert("t_end".into(), json!(t_end));
    s.insert("max_residual".into(), json!(max_residual));
    s.insert("trajectory".into(), trajectory_json(&traj));
    Ok(Output { csv: Some(csv(&header, &rows)), summary: Value::Object(s), failure: None })
}

/// Admissibility report only; exit status reflects the verdict.
pub fn check(cfg: &RunConfig) -> Result<Output, CliError> {
    let mut s = summary(cfg, "check");
    let order = cfg.order();
    let ivp = if let Some(sys) = &cfg.system {
        singular_problem(sys, cfg.t_end.unwrap_or(1.0))?
    } else if cfg.metric.is_some() {
        let fam = metric_family(cfg)?;
        let v = required(cfg.v, "v")?;
        let t = cfg.t_end.unwrap_or(1.0);
        match cfg.w {
            Some(w) => assemble_biharmonic(&fam, v, w, t),
            None => assemble_harmonic(&fam, v, t),
        }
        .map_err(geometry_error)?
    } else {
        return Err(config_err("check needs a 'system' or 'metric' block"));
    };
    let report = ivp.check_admissibility(order).map_err(singular_error)?;
    s.insert("y0".into(), json!(ivp.y0));
    s.insert("admissibility".into(), report_json(&report));
    let failure = (!report.pass).then(|| {
        CliError::Validation(format!(
            "problem is not admissible (residual {:.3e}, offending h = {:?}, beyond order = {:?})",
            report.residual_norm, report.offending_h, report.offending_tail
        ))
    });
    if report.pass {
        let boot = ivp.bootstrap_series(order).map_err(singular_error)?;
        let coeffs: Vec<Vec<f64>> = (0..=boot.order()).map(|h| boot.coeff(h)).collect();
        s.insert("series_coefficients".into(), json!(coeffs));
        s.insert("warnings".into(), json!(boot.warnings));
    }
    Ok(Output { csv: None, summary: Value::Object(s), failure })
}

fn linear_system(l: &LinearConfig) -> Result<LinearRSSystem, CliError> {
    let p = |text: &String| parse_with(text, &["s"]).map_err(|e| config_err(format!("linear system: {e}")));
    let a: Vec<Vec<Expr>> = l.a.iter().map(|row| row.iter().map(p).collect()).collect::<Result<_, _>>()?;
    let rho = l.rho.unwrap_or(f64::INFINITY);
    if l.euler_form {
        if l.h.is_some() {
            return Err(config_err("'euler_form' does not take an inhomogeneity"));
        }
        return LinearRSSystem::from_euler_form(a, rho).map_err(linear_error);
    }
    let h = match &l.h {
        Some(h) => Some(h.iter().map(p).collect::<Result<Vec<_>, _>>()?),
        None => None,
    };
    LinearRSSystem::new(a, h, rho).map_err(linear_error)
}

fn linear_block(cfg: &RunConfig) -> Result<&LinearConfig, CliError> {
    cfg.linear.as_ref().ok_or_else(|| config_err("missing 'linear' block"))
}

pub fn monodromy(cfg: &RunConfig) -> Result<Output, CliError> {
    let l = linear_block(cfg)?;
    let sys = linear_system(l)?;
    let sigma = required(l.sigma, "linear.sigma")?;
    let res = monodromy_at(&sys, sigma, cfg.tol()).map_err(linear_error)?;
    let a0 = sys.a_at(Complex64::new(0.0, 0.0)).map_err(CliError::Numerical)?;
    let mut s = summary(cfg, "monodromy");
    s.insert("sigma".into(), json!(sigma));
    s.insert("monodromy".into(), complex_matrix_json(&res.m));
    s.insert("generator".into(), complex_matrix_json(&monodromy_generator(&a0)));
    s.insert("charpoly".into(), Value::Array(res.charpoly.iter().map(|&z| complex_json(z)).collect()));
    s.insert("charpoly_residual".into(), json!(res.charpoly_residual));
    s.insert("determinant_error".into(), json!(res.est_error));
    s.insert("path_steps".into(), json!(res.path_steps));
    Ok(Output { csv: None, summary: Value::Object(s), failure: None })
}

pub fn fundamental(cfg: &RunConfig) -> Result<Output, CliError> {
    let l = linear_block(cfg)?;
    let sys = linear_system(l)?;
    let z = |v: Option<[f64; 2]>, name: &str| required(v, name).map(|[re, im]| Complex64::new(re, im));
    let (z0, z1) = (z(l.z0, "linear.z0")?, z(l.z1, "linear.z1")?);
    let fs = fundamental_solution(&sys, z0, z1, cfg.tol()).map_err(linear_error)?;
    let mut s = summary(cfg, "fundamental");
    s.insert("u".into(), complex_matrix_json(&fs.u));
    s.insert("condition".into(), json!(fs.condition));
    s.insert("steps".into(), json!(fs.steps));
    if let Some(y0) = &l.y0 {
        let y0: Vec<Complex64> = y0.iter().map(|&[re, im]| Complex64::new(re, im)).collect();
        let y = if sys.has_inhomogeneity() {
            solve_inhomogeneous(&sys, z0, &y0, z1, cfg.tol()).map_err(linear_error)?
        } else {
            if y0.len() != sys.dim() {
                return Err(config_err(format!("'y0' has {} entries for dimension {}", y0.len(), sys.dim())));
            }
            &fs.u * CMatrix::from_column_slice(y0.len(), 1, &y0).column(0)
        };
        s.insert("y".into(), Value::Array(y.iter().map(|&v| complex_json(v)).collect()));
    }
    Ok(Output { csv: None, summary: Value::Object(s), failure: None })
}
