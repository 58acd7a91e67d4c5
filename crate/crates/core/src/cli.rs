//! Command-line driver: loads a spec, runs the analyses and writes reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::lindstedt::{compute_series, gradient_structure_check, melnikov, range_residual, RecursionOptions, SolutionSeries};
use crate::model::{load_spec, SpecError, SystemSpec};
use crate::selfenergy::{
    determinant_check, identity_suite, jacobian_check, m_minus1, sample_points, symmetry_sweep, Multiscale, MultiscaleConfig,
};
use crate::smalldiv::{build_profile, ScaleProfile};
use crate::trees::{count_trees, oracle_check, verify_counting, Framework};
use crate::verify::{assemble, residual, solve_bifurcation, sweep, ResidualOptions, SweepOptions};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Profile,
    Series,
    Melnikov,
    Trees,
    Selfenergy,
    Solve,
    Sweep,
    All,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Parser, Debug, Clone, Serialize)]
#[command(name = "qpt", version, about = "Perturbative series, tree expansions and self-energy checks for quasi-periodically forced systems")]
pub struct RunConfig {
    /// System specification file (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    pub command: Command,
    /// Series truncation order.
    #[arg(long = "k", visible_alias = "K", default_value_t = 2)]
    pub k: usize,
    /// Largest tree order for the oracle and counting sweeps.
    #[arg(long = "k-tree", visible_alias = "K-tree", default_value_t = 3)]
    pub k_tree: usize,
    /// Largest order in the self-energy expansions.
    #[arg(long, default_value_t = 3)]
    pub k_max: usize,
    /// Number of scales in the small-divisor profile.
    #[arg(long, visible_alias = "N-profile", default_value_t = 8)]
    pub n_profile: usize,
    /// Comma-separated ε values.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1e-4, 3e-4, 1e-3, 3e-3])]
    pub eps: Vec<f64>,
    #[arg(long, env = "QPT_OUTPUT_DIR", default_value = "qpt-out")]
    #[serde(skip)]
    pub output_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Allow K > 8, K_tree > 3, k_max > 3 or N_profile > 12.
    #[arg(long)]
    pub override_caps: bool,
}

#[derive(Debug)]
pub enum RunError {
    Spec(SpecError),
    Config(String),
    Module { stage: &'static str, message: String },
    Io { path: String, message: String },
}

impl RunError {
    pub fn kind(&self) -> String {
        match self {
            RunError::Spec(e) => format!("spec.{}", e.kind()),
            RunError::Config(_) => "config".into(),
            RunError::Module { stage, .. } => format!("module.{stage}"),
            RunError::Io { .. } => "io".into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Spec(SpecError::Io { .. }) | RunError::Io { .. } => 2,
            RunError::Spec(_) => 3,
            RunError::Config(_) => 4,
            RunError::Module { .. } => 5,
        }
    }

    fn record(&self) -> Value {
        let (message, path) = match self {
            RunError::Spec(SpecError::Io { path, .. }) => (self.to_string(), Some(path.clone())),
            RunError::Io { path, .. } => (self.to_string(), Some(path.clone())),
            _ => (self.to_string(), None),
        };
        json!({ "schema_version": SCHEMA_VERSION, "error": { "kind": self.kind(), "message": message, "path": path } })
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Spec(e) => write!(f, "{e}"),
            RunError::Config(m) => write!(f, "{m}"),
            RunError::Module { stage, message } => write!(f, "{stage}: {message}"),
            RunError::Io { path, message } => write!(f, "cannot write {path}: {message}"),
        }
    }
}

fn module<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> RunError {
    move |e| RunError::Module { stage, message: e.to_string() }
}

impl RunConfig {
    pub fn check_caps(&self) -> Result<(), RunError> {
        if self.override_caps {
            return Ok(());
        }
        let caps = [("k", self.k, 8), ("k-tree", self.k_tree, 3), ("k-max", self.k_max, 3), ("n-profile", self.n_profile, 12)];
        for (name, v, cap) in caps {
            if v > cap {
                return Err(RunError::Config(format!("--{name} = {v} exceeds the cap {cap}; pass --override-caps to allow it")));
            }
        }
        if self.k == 0 || self.n_profile == 0 {
            return Err(RunError::Config("--k and --n-profile must be positive".into()));
        }
        if self.eps.is_empty() {
            return Err(RunError::Config("--eps needs at least one value".into()));
        }
        Ok(())
    }
}

/// One stage's output: a JSON result, optional CSV rows and the violations found.
pub struct StageReport {
    pub name: &'static str,
    pub result: Value,
    pub csv: Option<String>,
    pub violations: Vec<String>,
}

struct Context {
    spec: SystemSpec,
    cfg: RunConfig,
    series: Option<SolutionSeries>,
    profile: Option<ScaleProfile>,
}

impl Context {
    fn series(&mut self) -> Result<&SolutionSeries, RunError> {
        if self.series.is_none() {
            let k = self.cfg.k.max(self.cfg.k_max);
            self.series = Some(compute_series(&self.spec, k, &RecursionOptions::default()).map_err(module("series"))?);
        }
        Ok(self.series.as_ref().unwrap())
    }

    fn profile(&mut self) -> Result<&ScaleProfile, RunError> {
        if self.profile.is_none() {
            self.profile = Some(build_profile(&self.spec.omega, self.cfg.n_profile).map_err(module("profile"))?);
        }
        Ok(self.profile.as_ref().unwrap())
    }
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("serializable")
}

fn csv_line(out: &mut String, cells: &[String]) {
    let _ = writeln!(out, "{}", cells.join(","));
}

fn stage_profile(ctx: &mut Context) -> Result<StageReport, RunError> {
    let p = ctx.profile()?.clone();
    let part = p.partition_check(&p.sample_points(1000), &[0, 1, 2]);
    let mut v = Vec::new();
    if part.max_defect >= 1e-12 {
        v.push(format!("partition of unity defect {:e}", part.max_defect));
    }
    if part.max_scales > 2 || part.support_violations > 0 {
        v.push(format!("support: {} scales at one point, {} violations", part.max_scales, part.support_violations));
    }
    let mut csv = String::new();
    csv_line(&mut csv, &["n".into(), "alpha_n".into(), "bryuno_partial".into()]);
    for (n, a) in p.alphas.iter().enumerate() {
        csv_line(&mut csv, &[n.to_string(), format!("{a:e}"), format!("{:e}", p.bryuno_partials[n])]);
    }
    Ok(StageReport { name: "profile", result: json!({ "profile": to_value(&p), "partition": to_value(&part) }), csv: Some(csv), violations: v })
}

fn stage_series(ctx: &mut Context) -> Result<StageReport, RunError> {
    let k = ctx.cfg.k;
    let spec = ctx.spec.clone();
    let s = ctx.series()?;
    let mut rows = Vec::new();
    let mut v = Vec::new();
    let mut csv = String::new();
    csv_line(&mut csv, &["k".into(), "range_residual".into(), "gamma0_sup".into(), "b0_sup".into()]);
    for j in 1..=k {
        let r = range_residual(&spec, s, j);
        if r >= 1e-12 {
            v.push(format!("range residual {r:e} at order {j}"));
        }
        let g = s.gamma0[j].sup_norm();
        let b0 = s.b0(j).sup_norm();
        csv_line(&mut csv, &[j.to_string(), format!("{r:e}"), format!("{g:e}"), format!("{b0:e}")]);
        rows.push(json!({ "k": j, "range_residual": r, "gamma0": to_value(&s.gamma0[j]), "b0": to_value(&s.b0(j)), "modes": s.b[j].len().max(s.big_b[j].len()) }));
    }
    Ok(StageReport { name: "series", result: json!({ "orders": rows, "warnings": to_value(&s.warnings) }), csv: Some(csv), violations: v })
}

fn stage_melnikov(ctx: &mut Context) -> Result<StageReport, RunError> {
    let spec = ctx.spec.clone();
    let k = ctx.cfg.k;
    let s = ctx.series()?.clone();
    let mut s = s;
    s.k_max = k;
    let rep = melnikov(&spec, &s);
    let grad = gradient_structure_check(&spec, &s, &rep);
    let mut v = Vec::new();
    if grad.hamiltonian && rep.k0.is_some() && !grad.passed {
        v.push(format!("gradient structure defect {:e}", grad.mean_defect));
    }
    Ok(StageReport { name: "melnikov", result: json!({ "melnikov": to_value(&rep), "gradient": to_value(&grad) }), csv: None, violations: v })
}

fn stage_trees(ctx: &mut Context) -> Result<StageReport, RunError> {
    let spec = ctx.spec.clone();
    let kt = ctx.cfg.k_tree;
    let profile = ctx.profile()?.clone();
    let mut v = Vec::new();
    let mut result = serde_json::Map::new();
    let mut csv = String::new();
    csv_line(&mut csv, &["k".into(), "nu".into(), "h".into(), "trees".into(), "rel_err".into()]);
    if spec.is_hamiltonian() {
        let s = compute_series(&spec, kt, &RecursionOptions::default()).map_err(module("trees"))?;
        let oracle = oracle_check(&spec, &s, kt).map_err(module("trees"))?;
        let worst = oracle.iter().map(|e| e.rel_err).fold(0.0, f64::max);
        if worst >= 1e-11 {
            v.push(format!("tree/recursion relative error {worst:e}"));
        }
        for e in &oracle {
            let nu: Vec<String> = e.nu.0.iter().map(|x| x.to_string()).collect();
            csv_line(&mut csv, &[e.k.to_string(), nu.join(" "), format!("{:?}", e.h), e.trees.to_string(), format!("{:e}", e.rel_err)]);
        }
        result.insert("oracle_max_rel_err".into(), json!(worst));
        result.insert("oracle".into(), to_value(&oracle));
        result.insert("counts".into(), to_value(&count_trees(&spec, kt).map_err(module("trees"))?));
        let ham = verify_counting(&spec, &profile, kt, Framework::Hamiltonian).map_err(module("trees"))?;
        v.extend(ham.violations.iter().map(|x| format!("{}: {}", x.lemma, x.detail)));
        result.insert("counting_hamiltonian".into(), to_value(&ham));
    } else {
        result.insert("oracle".into(), json!(null));
    }
    let gen = verify_counting(&spec, &profile, kt, Framework::General).map_err(module("trees"))?;
    v.extend(gen.violations.iter().map(|x| format!("{}: {}", x.lemma, x.detail)));
    result.insert("counting_general".into(), to_value(&gen));
    Ok(StageReport { name: "trees", result: Value::Object(result), csv: Some(csv), violations: v })
}

fn stage_selfenergy(ctx: &mut Context) -> Result<StageReport, RunError> {
    let spec = ctx.spec.clone();
    let k_max = ctx.cfg.k_max;
    let eps = ctx.cfg.eps[0];
    let profile = ctx.profile()?.clone();
    let s = ctx.series()?.clone();
    let mut v = Vec::new();
    let mel = melnikov(&spec, &s);
    let beta0 = mel.zeros.first().map(|z| z.beta).unwrap_or(0.0);
    let b0 = spec.b0bar + eps;
    let m1 = m_minus1(&spec, eps, beta0, b0);
    let jac = jacobian_check(&spec, 0.0, k_max).map_err(module("selfenergy"))?;
    if jac.max_defect >= 1e-10 {
        v.push(format!("Jacobian identity defect {:e}", jac.max_defect));
    }
    let ids = identity_suite(&spec, &s, k_max).map_err(module("selfenergy"))?;
    if spec.is_hamiltonian() {
        let m = &ids.max;
        for (name, d) in [("diagonal", m.diagonal), ("off-diagonal derivative", m.off_diagonal_deriv), ("diagonal derivative", m.diagonal_deriv), ("chain rule", m.chain_rule)] {
            if d >= 1e-11 {
                v.push(format!("{name} cancellation defect {d:e}"));
            }
        }
        if ids.precondition {
            for (name, d) in [("B column", m.column_b), ("beta column", m.column_beta)] {
                if d >= 1e-11 {
                    v.push(format!("{name} cancellation defect {d:e}"));
                }
            }
        }
    }
    let det = match mel.k0 {
        Some(k0) if k0 >= 2 && k0 <= s.k_max => {
            let d = determinant_check(&spec, &s, k0).map_err(module("selfenergy"))?;
            if d.max_defect >= 1e-10 {
                v.push(format!("determinant defect {:e} below order {k0}", d.max_defect));
            }
            to_value(&d)
        }
        _ => json!(null),
    };
    let ms = Multiscale::new(&spec, &profile, MultiscaleConfig { eps, beta0, b0, k_max, regularisation: None }).map_err(module("selfenergy"))?;
    let mut sym = Vec::new();
    for n in 0..=(profile.n_profile as i32 - 1).min(3) {
        let r = symmetry_sweep(&ms, n, &sample_points(&profile, n, 50)).map_err(module("selfenergy"))?;
        for (name, d) in [("conjugation", r.conjugation), ("reality at 0", r.real_at_zero), ("imaginary derivative at 0", r.imaginary_derivative_at_zero)] {
            if d >= 1e-11 {
                v.push(format!("{name} defect {d:e} at scale {n}"));
            }
        }
        sym.push(to_value(&r));
    }
    Ok(StageReport {
        name: "selfenergy",
        result: json!({
            "m_minus1": to_value(&m1),
            "jacobian": to_value(&jac),
            "identities": to_value(&ids),
            "determinant": det,
            "structures": ms.structure_count,
            "symmetry": sym,
        }),
        csv: None,
        violations: v,
    })
}

fn stage_solve(ctx: &mut Context) -> Result<StageReport, RunError> {
    let spec = ctx.spec.clone();
    let k = ctx.cfg.k;
    let eps_list = ctx.cfg.eps.clone();
    let s = ctx.series()?.clone();
    let mel = melnikov(&spec, &SolutionSeries { k_max: k, ..s.clone() });
    let mut v = Vec::new();
    let mut rows = Vec::new();
    let mut csv = String::new();
    csv_line(&mut csv, &["seed".into(), "eps".into(), "beta0".into(), "B0".into(), "gamma_residual".into(), "phi_residual".into(), "sup_residual".into()]);
    if let Some(k0) = mel.k0 {
        for z in mel.zeros.iter().filter(|z| z.order % 2 == 1) {
            for &eps in &eps_list {
                let b = solve_bifurcation(&spec, &s, eps, k, z, k0).map_err(module("solve"))?;
                if b.gamma_residual >= 1e-12 || b.phi_residual >= 1e-12 {
                    v.push(format!("bifurcation residuals {:e}, {:e} at eps {eps}", b.gamma_residual, b.phi_residual));
                }
                let sol = assemble(&spec, &s, eps, b.beta0, k).map_err(module("solve"))?;
                let r = residual(&sol, &spec, &ResidualOptions::default());
                csv_line(
                    &mut csv,
                    &[z.beta.to_string(), eps.to_string(), b.beta0.to_string(), sol.b0.to_string(), format!("{:e}", b.gamma_residual), format!("{:e}", b.phi_residual), format!("{:e}", r.sup_residual)],
                );
                rows.push(json!({ "seed": to_value(z), "eps": eps, "solution": to_value(&b), "B0": sol.b0, "sup_residual": r.sup_residual, "aliasing_warning": r.aliasing_warning }));
            }
        }
    }
    Ok(StageReport { name: "solve", result: json!({ "k0": mel.k0, "solutions": rows }), csv: Some(csv), violations: v })
}

fn stage_sweep(ctx: &mut Context) -> Result<StageReport, RunError> {
    let spec = ctx.spec.clone();
    let k = ctx.cfg.k;
    let s = ctx.series()?.clone();
    let mel = melnikov(&spec, &SolutionSeries { k_max: k, ..s });
    let Some(z) = mel.zeros.iter().find(|z| z.order % 2 == 1) else {
        return Ok(StageReport { name: "sweep", result: json!({ "note": "no odd-order Melnikov zero" }), csv: None, violations: Vec::new() });
    };
    let opts = SweepOptions { k, seed_beta: z.beta, ..SweepOptions::default() };
    let r = sweep(&spec, &ctx.cfg.eps, &opts).map_err(module("sweep"))?;
    let mut v = Vec::new();
    let floor = r.rows.iter().map(|x| x.sup_residual).fold(0.0, f64::max);
    // an exact solution satisfies any residual bound; the slope is then undefined
    let exact = floor <= 1e-15;
    if !exact && r.rows.len() >= 2 && (r.residual_slope - (k as f64 + 1.0)).abs() > 0.2 {
        v.push(format!("residual slope {} outside {} ± 0.2", r.residual_slope, k + 1));
    }
    let mut csv = String::new();
    csv_line(&mut csv, &["eps".into(), "beta0".into(), "sup_residual".into(), "deviation".into()]);
    for row in &r.rows {
        csv_line(&mut csv, &[row.eps.to_string(), row.beta0.to_string(), format!("{:e}", row.sup_residual), format!("{:e}", row.deviation)]);
    }
    Ok(StageReport { name: "sweep", result: json!({ "sweep": to_value(&r), "exact_solution": exact }), csv: Some(csv), violations: v })
}

fn spec_hash(path: &Path) -> Result<String, RunError> {
    let bytes = std::fs::read(path).map_err(|e| RunError::Spec(SpecError::Io { path: path.display().to_string(), source: e }))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_file(path: &Path, text: &str) -> Result<(), RunError> {
    std::fs::write(path, text).map_err(|e| RunError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Outcome of a run: the stage reports and whether any stage found a violation.
pub struct RunOutcome {
    pub stages: Vec<StageReport>,
    pub files: Vec<PathBuf>,
    pub passed: bool,
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    cfg.check_caps()?;
    let spec = load_spec(&cfg.spec).map_err(RunError::Spec)?;
    let hash = spec_hash(&cfg.spec)?;
    let mut ctx = Context { spec, cfg: cfg.clone(), series: None, profile: None };
    let order: Vec<Command> = match cfg.command {
        Command::All => vec![
            Command::Profile,
            Command::Series,
            Command::Melnikov,
            Command::Trees,
            Command::Selfenergy,
            Command::Solve,
            Command::Sweep,
        ],
        c => vec![c],
    };
    let mut stages = Vec::new();
    for c in order {
        let r = match c {
            Command::Profile => stage_profile(&mut ctx),
            Command::Series => stage_series(&mut ctx),
            Command::Melnikov => stage_melnikov(&mut ctx),
            Command::Trees => stage_trees(&mut ctx),
            Command::Selfenergy => stage_selfenergy(&mut ctx),
            Command::Solve => stage_solve(&mut ctx),
            Command::Sweep => stage_sweep(&mut ctx),
            Command::All => unreachable!(),
        }?;
        stages.push(r);
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| RunError::Io { path: cfg.output_dir.display().to_string(), message: e.to_string() })?;
    let config = to_value(cfg);
    let mut files = Vec::new();
    for st in &stages {
        let (path, text) = match (&st.csv, cfg.format) {
            (Some(csv), Format::Csv) => (cfg.output_dir.join(format!("{}.csv", st.name)), csv.clone()),
            _ => {
                let doc = json!({
                    "schema_version": SCHEMA_VERSION,
                    "command": st.name,
                    "config": config,
                    "spec_sha256": hash,
                    "result": st.result,
                    "violations": st.violations,
                    "passed": st.violations.is_empty(),
                });
                (cfg.output_dir.join(format!("{}.json", st.name)), serde_json::to_string_pretty(&doc).expect("json") + "\n")
            }
        };
        write_file(&path, &text)?;
        files.push(path);
    }
    let passed = stages.iter().all(|s| s.violations.is_empty());
    if cfg.command == Command::All {
        let verdicts: Vec<Value> = stages.iter().map(|s| json!({ "stage": s.name, "passed": s.violations.is_empty(), "violations": s.violations })).collect();
        let doc = json!({ "schema_version": SCHEMA_VERSION, "command": "all", "config": config, "spec_sha256": hash, "stages": verdicts, "passed": passed });
        let path = cfg.output_dir.join("summary.json");
        write_file(&path, &(serde_json::to_string_pretty(&doc).expect("json") + "\n"))?;
        files.push(path);
    }
    Ok(RunOutcome { stages, files, passed })
}

/// Parses arguments, runs, and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cfg = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cfg) {
        Ok(out) => {
            for s in &out.stages {
                let status = if s.violations.is_empty() { "ok" } else { "VIOLATION" };
                println!("{:<11} {status}", s.name);
                for v in &s.violations {
                    println!("    {v}");
                }
            }
            if out.passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            let rec = e.record();
            let text = serde_json::to_string_pretty(&rec).expect("json") + "\n";
            if std::fs::create_dir_all(&cfg.output_dir).is_ok() {
                let _ = std::fs::write(cfg.output_dir.join("error.json"), &text);
            }
            eprint!("{text}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caps_are_enforced() {
        let cfg = RunConfig::try_parse_from(["qpt", "--spec", "x.json", "series", "--k", "9"]).unwrap();
        assert!(matches!(cfg.check_caps(), Err(RunError::Config(_))));
        let cfg = RunConfig::try_parse_from(["qpt", "--spec", "x.json", "series", "--K", "9", "--override-caps"]).unwrap();
        assert!(cfg.check_caps().is_ok());
        let cfg = RunConfig::try_parse_from(["qpt", "--spec", "x.json", "trees", "--k-tree", "4"]).unwrap();
        assert!(cfg.check_caps().is_err());
    }

    #[test]
    fn eps_list_parses() {
        let cfg = RunConfig::try_parse_from(["qpt", "--spec", "x.json", "sweep", "--eps", "1e-3,2e-3"]).unwrap();
        assert_eq!(cfg.eps, vec![1e-3, 2e-3]);
        assert_eq!(cfg.command, Command::Sweep);
        assert_eq!(cfg.n_profile, 8);
    }

    #[test]
    fn missing_spec_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        let out = dir.path().join("out");
        let code = main_with(["qpt", "--spec", missing.to_str().unwrap(), "--output-dir", out.to_str().unwrap(), "melnikov"]);
        assert_eq!(code, 2);
        let rec: Value = serde_json::from_str(&std::fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
        assert_eq!(rec["error"]["kind"], "spec.io");
        assert_eq!(rec["error"]["path"], missing.to_str().unwrap());
    }
}
