//! Truncated solutions: assembly, bifurcation solve, Fourier residuals and
//! time-integration checks.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::lindstedt::{compute_series, melnikov, MelnikovZero, RecursionOptions, SeriesError, SolutionSeries};
use crate::model::{c, Mode, SystemSpec, TrigPoly, I};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error("|eps| = {eps} exceeds eps_max = {max}")]
    EpsTooLarge { eps: f64, max: f64 },
    #[error("order {k} exceeds the computed series ({k_max})")]
    OrderTooLarge { k: usize, k_max: usize },
    #[error("no root of the bifurcation function within {radius} of {seed}")]
    NoRoot { seed: f64, radius: f64 },
    #[error("bifurcation function vanishes identically through the computed orders")]
    NoMelnikovOrder,
    #[error("step {dt} does not resolve frequency {freq} (dt*freq = {prod} >= 0.1)")]
    StepTooLarge { dt: f64, freq: f64, prod: f64 },
    #[error("no Melnikov zero near {beta}")]
    NoSeed { beta: f64 },
}

pub const EPS_MAX: f64 = 0.1;

#[derive(Clone, Debug, Serialize)]
pub struct Seed {
    pub beta: f64,
    pub order: usize,
    pub k0: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TruncatedSolution {
    pub eps: f64,
    pub beta0: f64,
    pub b0: f64,
    pub k: usize,
    /// Fourier tables at ν ≠ 0.
    #[serde(serialize_with = "ser_table")]
    pub beta: BTreeMap<Mode, Complex64>,
    #[serde(serialize_with = "ser_table")]
    pub big_b: BTreeMap<Mode, Complex64>,
    pub seed: Option<Seed>,
}

fn ser_table<S: serde::Serializer>(t: &BTreeMap<Mode, Complex64>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(t.len()))?;
    for (nu, v) in t {
        seq.serialize_element(&(&nu.0, v.re, v.im))?;
    }
    seq.end()
}

impl TruncatedSolution {
    /// Largest |x_{−ν} − conj x_ν| over both tables.
    pub fn reality_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for t in [&self.beta, &self.big_b] {
            for (nu, v) in t {
                let w = t.get(&nu.neg()).copied().unwrap_or_default();
                worst = worst.max((w - v.conj()).norm());
            }
        }
        worst
    }

    /// (β(t), B(t)).
    pub fn eval(&self, spec: &SystemSpec, t: f64) -> (f64, f64) {
        let mut b = self.beta0;
        let mut bb = self.b0;
        for (nu, v) in &self.beta {
            b += (v * (I * spec.dot(nu) * t).exp()).re;
        }
        for (nu, v) in &self.big_b {
            bb += (v * (I * spec.dot(nu) * t).exp()).re;
        }
        (b, bb)
    }

    pub fn modes(&self) -> Vec<Mode> {
        let mut m: Vec<Mode> = self.beta.keys().chain(self.big_b.keys()).cloned().collect();
        m.sort();
        m.dedup();
        m
    }
}

/// Σ_{k≤K} ε^k coefficient tables at β₀.
pub fn assemble(spec: &SystemSpec, series: &SolutionSeries, eps: f64, beta0: f64, k: usize) -> Result<TruncatedSolution, VerifyError> {
    if eps.abs() > EPS_MAX {
        return Err(VerifyError::EpsTooLarge { eps, max: EPS_MAX });
    }
    if k > series.k_max {
        return Err(VerifyError::OrderTooLarge { k, k_max: series.k_max });
    }
    let mut beta = BTreeMap::new();
    let mut big_b = BTreeMap::new();
    let mut b0 = spec.b0bar;
    let mut w = 1.0;
    for j in 1..=k {
        w *= eps;
        for (nu, p) in &series.b[j] {
            if !nu.is_zero() {
                *beta.entry(nu.clone()).or_insert(c(0.0, 0.0)) += p.eval(beta0) * w;
            }
        }
        for (nu, p) in &series.big_b[j] {
            if nu.is_zero() {
                b0 += p.eval(beta0).re * w;
            } else {
                *big_b.entry(nu.clone()).or_insert(c(0.0, 0.0)) += p.eval(beta0) * w;
            }
        }
    }
    Ok(TruncatedSolution { eps, beta0, b0, k, beta, big_b, seed: None })
}

fn eps_poly(parts: &[TrigPoly], eps: f64, from: usize, to: usize) -> TrigPoly {
    let mut out = TrigPoly::zero();
    for (k, p) in parts.iter().enumerate().take(to + 1).skip(from) {
        out.add_assign(&p.scale_re(eps.powi((k - from) as i32)));
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct BifurcationSolution {
    pub beta0: f64,
    pub seed: f64,
    /// |Σ ε^k Γ⁽ᵏ⁾₀(β₀*)|.
    pub gamma_residual: f64,
    /// |Σ ε^k (Φ⁽ᵏ⁾₀ + ω₀′B⁽ᵏ⁾₀)(β₀*)|.
    pub phi_residual: f64,
    pub iterations: usize,
    pub method: &'static str,
    /// Sign condition of the seed for the sign of ε.
    pub hypothesis_status: bool,
}

/// Root of Σ_{k≤K} ε^k Γ⁽ᵏ⁾₀(β₀) near the seed zero.
pub fn solve_bifurcation(spec: &SystemSpec, series: &SolutionSeries, eps: f64, k: usize, seed: &MelnikovZero, k0: usize) -> Result<BifurcationSolution, VerifyError> {
    if k > series.k_max {
        return Err(VerifyError::OrderTooLarge { k, k_max: series.k_max });
    }
    // divided by ε^{k0} so that the function stays O(1) as ε → 0
    let g = eps_poly(&series.gamma0, eps, k0, k);
    let dg = g.deriv();
    let f = |x: f64| g.eval(x).re;
    let radius = 0.5;
    let (lo, hi) = (seed.beta - radius, seed.beta + radius);
    let mut x = seed.beta;
    let mut iterations = 0;
    let mut method = "newton";
    let mut ok = false;
    if seed.order == 1 {
        for _ in 0..60 {
            iterations += 1;
            let d = dg.eval(x).re;
            if d.abs() < 1e-14 || !d.is_finite() {
                break;
            }
            let step = f(x) / d;
            x -= step;
            if !(lo..=hi).contains(&x) {
                break;
            }
            if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                ok = true;
                break;
            }
        }
        ok = ok && (lo..=hi).contains(&x);
    }
    if !ok {
        method = "bisection";
        let (a, b) = bracket(&f, seed.beta, radius).ok_or(VerifyError::NoRoot { seed: seed.beta, radius })?;
        let (r, it) = bisect(&f, a, b);
        x = r;
        iterations += it;
    }
    let zero = Mode::zero(spec.d);
    let w1 = spec.omega0_prime();
    let mut gamma = c(0.0, 0.0);
    let mut phi = c(0.0, 0.0);
    for j in 1..=k {
        let e = eps.powi(j as i32);
        gamma += series.gamma0[j].eval(x) * e;
        phi += (series.phi0[j].eval(x) + series.big_b_at(j, &zero).eval(x) * w1) * e;
    }
    let hypothesis_status = if eps >= 0.0 { seed.eps_positive } else { seed.eps_negative };
    Ok(BifurcationSolution {
        beta0: x,
        seed: seed.beta,
        gamma_residual: gamma.norm(),
        phi_residual: phi.norm(),
        iterations,
        method,
        hypothesis_status,
    })
}

/// Closest sign change to the centre within the radius.
fn bracket(f: &dyn Fn(f64) -> f64, centre: f64, radius: f64) -> Option<(f64, f64)> {
    let n = 400;
    let h = radius / n as f64;
    if f(centre) == 0.0 {
        return Some((centre, centre));
    }
    for i in 0..n {
        for s in [1.0, -1.0] {
            let a = centre + s * i as f64 * h;
            let b = centre + s * (i + 1) as f64 * h;
            let (fa, fb) = (f(a), f(b));
            if fb == 0.0 {
                return Some((b, b));
            }
            if (fa < 0.0) != (fb < 0.0) {
                return Some(if a < b { (a, b) } else { (b, a) });
            }
        }
    }
    None
}

fn bisect(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, usize) {
    if a == b {
        return (a, 0);
    }
    let mut fa = f(a);
    let mut it = 0;
    while it < 200 {
        it += 1;
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if fm == 0.0 {
            return (m, it);
        }
        if (fa < 0.0) == (fm < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    (0.5 * (a + b), it)
}

/// Right-hand side (ω₀(B) + εF, εG) at time t.
pub fn vector_field(spec: &SystemSpec, eps: f64, t: f64, beta: f64, b: f64) -> (f64, f64) {
    let db = b - spec.b0bar;
    let mut fsum = c(0.0, 0.0);
    let mut gsum = c(0.0, 0.0);
    for (nu, p) in &spec.big_f.table {
        fsum += p.eval(beta, db) * (I * spec.dot(nu) * t).exp();
    }
    for (nu, p) in &spec.big_g.table {
        gsum += p.eval(beta, db) * (I * spec.dot(nu) * t).exp();
    }
    (spec.omega0_at(db) + eps * fsum.re, eps * gsum.re)
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualOptions {
    /// Extra ℓ1 shells beyond (K+1)·N in the analysis mode set.
    pub extra_shells: i64,
    pub t_span: f64,
    pub dt: f64,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        ResidualOptions { extra_shells: 1, t_span: 600.0, dt: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualReport {
    /// (ν, |r^β_ν|, |r^B_ν|).
    pub per_mode: Vec<(Vec<i32>, f64, f64)>,
    pub sup_residual: f64,
    pub modes: usize,
    pub samples: usize,
    /// Largest fitted coefficient on the outer shell over the largest overall.
    pub tail_ratio: f64,
    pub aliasing_warning: bool,
}

/// Lattice vectors with ℓ1 norm ≤ r.
pub fn l1_ball(d: usize, r: i64) -> Vec<Mode> {
    let mut out = vec![Vec::new()];
    for _ in 0..d {
        let mut next = Vec::new();
        for v in &out {
            let used: i64 = v.iter().map(|x: &i32| x.abs() as i64).sum();
            for x in -(r - used)..=(r - used) {
                let mut w = v.clone();
                w.push(x as i32);
                next.push(w);
            }
        }
        out = next;
    }
    let mut m: Vec<Mode> = out.into_iter().map(Mode).collect();
    m.sort();
    m
}

/// Fourier residual of the full equations on the assembled solution, by
/// least-squares harmonic inversion of a sampled trajectory.
pub fn residual(sol: &TruncatedSolution, spec: &SystemSpec, opts: &ResidualOptions) -> ResidualReport {
    let n_sup = spec.support().iter().map(|m| m.norm()).max().unwrap_or(0).max(1);
    let sol_max = sol.modes().iter().map(|m| m.norm()).max().unwrap_or(0);
    let radius = (sol_max + n_sup).max((sol.k as i64 + 1) * n_sup) + opts.extra_shells;
    let modes = l1_ball(spec.d, radius);
    let samples = (opts.t_span / opts.dt).ceil() as usize + 1;
    let mut a = DMatrix::<Complex64>::zeros(samples, modes.len());
    let mut h = DMatrix::<Complex64>::zeros(samples, 2);
    for j in 0..samples {
        let t = j as f64 * opts.dt;
        for (i, nu) in modes.iter().enumerate() {
            a[(j, i)] = (I * spec.dot(nu) * t).exp();
        }
        let (b, bb) = sol.eval(spec, t);
        let (h1, h2) = vector_field(spec, sol.eps, t, b, bb);
        h[(j, 0)] = c(h1, 0.0);
        h[(j, 1)] = c(h2, 0.0);
    }
    let coef = a.svd(true, true).solve(&h, 1e-14).expect("svd solve");
    let mut per_mode = Vec::new();
    let mut sup: f64 = 0.0;
    let mut head: f64 = 0.0;
    let mut tail: f64 = 0.0;
    for (i, nu) in modes.iter().enumerate() {
        let ix = I * spec.dot(nu);
        let bn = sol.beta.get(nu).copied().unwrap_or_default();
        let bbn = sol.big_b.get(nu).copied().unwrap_or_default();
        let rb = (ix * bn - coef[(i, 0)]).norm();
        let rbb = (ix * bbn - coef[(i, 1)]).norm();
        sup = sup.max(rb).max(rbb);
        let size = coef[(i, 0)].norm().max(coef[(i, 1)].norm());
        head = head.max(size);
        if nu.norm() == radius {
            tail = tail.max(size);
        }
        per_mode.push((nu.0.clone(), rb, rbb));
    }
    let tail_ratio = if head > 0.0 { tail / head } else { 0.0 };
    ResidualReport { per_mode, sup_residual: sup, modes: modes.len(), samples, tail_ratio, aliasing_warning: tail_ratio > 1e-10 }
}

/// One fixed Dormand–Prince step (fifth-order solution).
fn dp5_step(f: &dyn Fn(f64, [f64; 2]) -> [f64; 2], t: f64, y: [f64; 2], h: f64) -> [f64; 2] {
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    let mut k = [[0.0; 2]; 7];
    k[0] = f(t, y);
    for s in 0..6 {
        let mut ys = y;
        for (j, kj) in k.iter().enumerate().take(s + 1) {
            ys[0] += h * A[s][j] * kj[0];
            ys[1] += h * A[s][j] * kj[1];
        }
        k[s + 1] = f(t + C[s] * h, ys);
    }
    // the last stage is evaluated at the fifth-order solution itself
    let b = A[5];
    let mut out = y;
    for j in 0..6 {
        out[0] += h * b[j] * k[j][0];
        out[1] += h * b[j] * k[j][1];
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct IntegrationReport {
    pub t_end: f64,
    pub dt: f64,
    pub steps: usize,
    pub max_deviation: f64,
}

/// Integrates from the solution's t = 0 state and records the largest
/// distance to the assembled quasi-periodic evaluation.
pub fn integrate_check(sol: &TruncatedSolution, spec: &SystemSpec, t_end: f64, dt: f64) -> Result<IntegrationReport, VerifyError> {
    let freq = sol
        .modes()
        .iter()
        .chain(spec.support().iter())
        .map(|nu| spec.dot(nu).abs())
        .fold(0.0, f64::max);
    if dt * freq >= 0.1 {
        return Err(VerifyError::StepTooLarge { dt, freq, prod: dt * freq });
    }
    let steps = (t_end / dt).round() as usize;
    let h = t_end / steps as f64;
    let rhs = |t: f64, y: [f64; 2]| {
        let (a, b) = vector_field(spec, sol.eps, t, y[0], y[1]);
        [a, b]
    };
    let (b0, bb0) = sol.eval(spec, 0.0);
    let mut y = [b0, bb0];
    let mut worst: f64 = 0.0;
    for s in 0..steps {
        let t = s as f64 * h;
        y = dp5_step(&rhs, t, y, h);
        let (qb, qbb) = sol.eval(spec, t + h);
        worst = worst.max((y[0] - qb).abs()).max((y[1] - qbb).abs());
    }
    Ok(IntegrationReport { t_end, dt: h, steps, max_deviation: worst })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    pub beta0: f64,
    pub b0: f64,
    pub sup_residual: f64,
    pub deviation: f64,
    pub gamma_residual: f64,
    pub phi_residual: f64,
    pub aliasing_warning: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub k: usize,
    pub seed: Seed,
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of log sup_residual against log ε.
    pub residual_slope: f64,
    /// Geometric mean of sup_residual / |ε|^{K+1}.
    pub residual_constant: f64,
    /// Least-squares slope of log |β₀* − seed| against log ε.
    pub beta_slope: f64,
    pub t_end: f64,
}

/// Slope of the least-squares line through (log x, log y); NaN when any
/// point is not positive.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    if x.len() < 2 || x.iter().chain(y.iter()).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return f64::NAN;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepOptions {
    pub k: usize,
    /// Seed zero closest to this phase.
    pub seed_beta: f64,
    pub t_end: f64,
    pub dt: f64,
    pub residual: ResidualOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { k: 2, seed_beta: 0.0, t_end: 50.0, dt: 0.01, residual: ResidualOptions::default() }
    }
}

fn angle_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Melnikov zero of the series closest to `beta`.
pub fn pick_seed(spec: &SystemSpec, series: &SolutionSeries, beta: f64) -> Result<(MelnikovZero, usize), VerifyError> {
    let rep = melnikov(spec, series);
    let k0 = rep.k0.ok_or(VerifyError::NoMelnikovOrder)?;
    let z = rep
        .zeros
        .iter()
        .min_by(|a, b| angle_dist(a.beta, beta).total_cmp(&angle_dist(b.beta, beta)))
        .cloned()
        .ok_or(VerifyError::NoSeed { beta })?;
    Ok((z, k0))
}

/// Solve, assemble, residual and integration at each ε, with slope fits.
pub fn sweep(spec: &SystemSpec, eps_list: &[f64], opts: &SweepOptions) -> Result<SweepReport, VerifyError> {
    let series = compute_series(spec, opts.k, &RecursionOptions::default())?;
    let (zero, k0) = pick_seed(spec, &series, opts.seed_beta)?;
    let seed = Seed { beta: zero.beta, order: zero.order, k0 };
    let mut rows = Vec::new();
    for &eps in eps_list {
        let sol_b = solve_bifurcation(spec, &series, eps, opts.k, &zero, k0)?;
        let mut sol = assemble(spec, &series, eps, sol_b.beta0, opts.k)?;
        sol.seed = Some(seed.clone());
        let res = residual(&sol, spec, &opts.residual);
        let integ = integrate_check(&sol, spec, opts.t_end, opts.dt)?;
        rows.push(SweepRow {
            eps,
            beta0: sol_b.beta0,
            b0: sol.b0,
            sup_residual: res.sup_residual,
            deviation: integ.max_deviation,
            gamma_residual: sol_b.gamma_residual,
            phi_residual: sol_b.phi_residual,
            aliasing_warning: res.aliasing_warning,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.eps.abs()).collect();
    let rs: Vec<f64> = rows.iter().map(|r| r.sup_residual).collect();
    let bs: Vec<f64> = rows.iter().map(|r| angle_dist(r.beta0, seed.beta)).collect();
    let p = (opts.k + 1) as f64;
    let logs: Vec<f64> = rows.iter().map(|r| (r.sup_residual / r.eps.abs().powf(p)).ln()).collect();
    let residual_constant = (logs.iter().sum::<f64>() / logs.len().max(1) as f64).exp();
    Ok(SweepReport {
        k: opts.k,
        seed,
        rows,
        residual_slope: loglog_slope(&xs, &rs),
        residual_constant,
        beta_slope: loglog_slope(&xs, &bs),
        t_end: opts.t_end,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{sample_model, ForcingField, Truncation};

    /// Sample model plus a B-dependent term and a term −0.2 sin(α₁ − β), so that
    /// the solved phase is not an equilibrium.
    pub(crate) fn verification_model() -> SystemSpec {
        let mut f = ForcingField::new();
        for m in [1, -1] {
            f.add_term(&Mode(vec![0, 0]), m, 0, c(0.5, 0.0));
            for s in [1, -1] {
                f.add_term(&Mode(vec![s, 0]), m, 0, c(0.25, 0.0));
            }
        }
        // −0.2 sin(α₁ − β)
        f.add_term(&Mode(vec![1, 0]), -1, 0, c(0.0, 0.1));
        f.add_term(&Mode(vec![-1, 0]), 1, 0, c(0.0, -0.1));
        for s in [1, -1] {
            f.add_term(&Mode(vec![0, s]), 0, 1, c(0.25, 0.0));
        }
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        SystemSpec::from_hamiltonian(vec![1.0, golden], 0.0, vec![0.0, 1.0], f, Truncation { n_modes: 1, m_beta: 1, d_b: 1 }).unwrap()
    }

    #[test]
    fn zero_eps_is_constant() {
        let spec = sample_model();
        let s = compute_series(&spec, 2, &RecursionOptions::default()).unwrap();
        let sol = assemble(&spec, &s, 0.0, 0.7, 2).unwrap();
        assert_eq!(sol.b0, spec.b0bar);
        assert!(sol.beta.values().chain(sol.big_b.values()).all(|v| v.norm() == 0.0));
        assert_eq!(residual(&sol, &spec, &ResidualOptions::default()).sup_residual, 0.0);
        let r = integrate_check(&sol, &spec, 100.0, 0.01).unwrap();
        assert!(r.max_deviation < 1e-12);
    }

    #[test]
    fn first_order_closed_forms() {
        let spec = sample_model();
        let s = compute_series(&spec, 2, &RecursionOptions::default()).unwrap();
        let e1 = Mode(vec![1, 0]);
        let sol = assemble(&spec, &s, 1e-3, 0.0, 1).unwrap();
        assert!(sol.beta.values().chain(sol.big_b.values()).all(|v| v.norm() < 1e-18));
        let sol = assemble(&spec, &s, 1e-3, PI / 2.0, 1).unwrap();
        assert!((sol.beta[&e1] - c(-5e-4, 0.0)).norm() < 1e-16);
        assert!((sol.big_b[&e1] - c(0.0, -5e-4)).norm() < 1e-16);
        let sol2 = assemble(&spec, &s, 1e-3, PI / 2.0, 2).unwrap();
        assert!((sol2.beta[&e1] - c(-5e-4, 0.0)).norm() < 1e-5);
        assert!(sol2.reality_defect() < 1e-18);
    }

    #[test]
    fn solver_on_sample_model() {
        let spec = sample_model();
        let s = compute_series(&spec, 2, &RecursionOptions::default()).unwrap();
        let (z, k0) = pick_seed(&spec, &s, 0.1).unwrap();
        assert_eq!((k0, z.order), (1, 1));
        let r = solve_bifurcation(&spec, &s, 1e-3, 2, &z, k0).unwrap();
        assert!(r.beta0.abs() < 1e-2);
        assert!(r.gamma_residual < 1e-14 && r.phi_residual < 1e-14);
        let r1 = solve_bifurcation(&spec, &s, 1e-3, 1, &z, k0).unwrap();
        assert!(angle_dist(r1.beta0, z.beta) < 1e-15);
    }

    #[test]
    fn wrong_sign_side_still_solves() {
        let spec = sample_model();
        let s = compute_series(&spec, 2, &RecursionOptions::default()).unwrap();
        let rep = melnikov(&spec, &s);
        for z in &rep.zeros {
            let pos = solve_bifurcation(&spec, &s, 1e-3, 2, z, 1).unwrap();
            let neg = solve_bifurcation(&spec, &s, -1e-3, 2, z, 1).unwrap();
            assert!(pos.gamma_residual < 1e-14 && neg.gamma_residual < 1e-14);
            assert_ne!(pos.hypothesis_status, neg.hypothesis_status);
        }
    }

    #[test]
    fn residual_and_deviation_scale_on_verification_model() {
        let spec = verification_model();
        let eps = [1e-4, 3e-4, 1e-3, 3e-3];
        let r = sweep(&spec, &eps, &SweepOptions::default()).unwrap();
        assert!((r.residual_slope - 3.0).abs() < 0.2, "{r:?}");
        assert!((r.beta_slope - 1.0).abs() < 0.2, "{r:?}");
        for row in &r.rows {
            assert!(row.gamma_residual < 1e-14 && row.phi_residual < 1e-14, "{row:?}");
            // the zero-mode residual drives B linearly and β quadratically in t
            let bound = 10.0 * r.residual_constant * row.eps.powi(3) * r.t_end * r.t_end;
            assert!(row.deviation < bound, "{row:?} {bound}");
        }
    }

    #[test]
    fn perturbed_coefficient_raises_residual() {
        let spec = verification_model();
        let s = compute_series(&spec, 2, &RecursionOptions::default()).unwrap();
        let (z, k0) = pick_seed(&spec, &s, 0.0).unwrap();
        let b = solve_bifurcation(&spec, &s, 1e-4, 2, &z, k0).unwrap();
        let mut sol = assemble(&spec, &s, 1e-4, b.beta0, 2).unwrap();
        let base = residual(&sol, &spec, &ResidualOptions::default()).sup_residual;
        let nu = Mode(vec![1, 0]);
        *sol.beta.get_mut(&nu).unwrap() += 1e-6;
        let rep = residual(&sol, &spec, &ResidualOptions::default());
        let at = rep.per_mode.iter().find(|m| m.0 == nu.0).unwrap().1;
        assert!(base < 1e-10);
        assert!((at / (1e-6 * spec.dot(&nu).abs()) - 1.0).abs() < 1e-2, "{at}");
    }

    #[test]
    fn off_root_phase_drifts_more() {
        let spec = verification_model();
        let s = compute_series(&spec, 2, &RecursionOptions::default()).unwrap();
        let (z, k0) = pick_seed(&spec, &s, 0.0).unwrap();
        let eps = 1e-3;
        let b = solve_bifurcation(&spec, &s, eps, 2, &z, k0).unwrap();
        let on = integrate_check(&assemble(&spec, &s, eps, b.beta0, 2).unwrap(), &spec, 50.0, 0.01).unwrap();
        let off = integrate_check(&assemble(&spec, &s, eps, b.beta0 + 0.3, 2).unwrap(), &spec, 50.0, 0.01).unwrap();
        assert!(off.max_deviation > 10.0 * on.max_deviation, "{} {}", on.max_deviation, off.max_deviation);
    }

    #[test]
    fn coarse_step_is_rejected() {
        let spec = sample_model();
        let s = compute_series(&spec, 1, &RecursionOptions::default()).unwrap();
        let sol = assemble(&spec, &s, 1e-3, 0.5, 1).unwrap();
        assert!(matches!(integrate_check(&sol, &spec, 1.0, 0.5), Err(VerifyError::StepTooLarge { .. })));
    }

    #[test]
    fn large_eps_is_rejected() {
        let spec = sample_model();
        let s = compute_series(&spec, 1, &RecursionOptions::default()).unwrap();
        assert!(matches!(assemble(&spec, &s, 0.5, 0.0, 1), Err(VerifyError::EpsTooLarge { .. })));
    }

    #[test]
    fn dormand_prince_is_fifth_order() {
        let f = |_t: f64, y: [f64; 2]| [y[1], -y[0]];
        let err = |h: f64| {
            let n = (2.0 / h).round() as usize;
            let mut y = [0.0, 1.0];
            for i in 0..n {
                y = dp5_step(&f, i as f64 * h, y, h);
            }
            (y[0] - 2f64.sin()).abs()
        };
        let p = (err(0.1) / err(0.05)).log2();
        assert!((p - 5.0).abs() < 0.3, "{p}");
    }

    #[test]
    fn ball_counts() {
        assert_eq!(l1_ball(2, 3).len(), 25);
        assert_eq!(l1_ball(3, 1).len(), 7);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn assembled_solution_is_real(eps in -0.05f64..0.05, beta0 in -3.0f64..3.0, t in -100.0f64..100.0) {
            let spec = verification_model();
            let s = compute_series(&spec, 3, &RecursionOptions::default()).unwrap();
            let sol = assemble(&spec, &s, eps, beta0, 3).unwrap();
            proptest::prop_assert!(sol.reality_defect() < 1e-14);
            let (b, bb) = sol.eval(&spec, t);
            proptest::prop_assert!(b.is_finite() && bb.is_finite());
        }
    }
}
