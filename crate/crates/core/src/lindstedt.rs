//! Order-by-order solution of the range equations and the Melnikov analysis.
//!
//! The unknowns are expanded as β = β₀ + Σ ε^k b⁽ᵏ⁾(ψ), B = B̄₀ + Σ ε^k B⁽ᵏ⁾(ψ)
//! with ψ = ωt. Each coefficient is a mode table of trigonometric
//! polynomials in β₀.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::model::{c, factorial, ForcingField, Mode, SystemSpec, TrigPoly, I};

/// Coefficient ring used by the series composition.
pub trait Coef: Clone {
    fn zero() -> Self;
    fn one() -> Self;
    fn is_zero(&self) -> bool;
    fn add_assign(&mut self, o: &Self);
    fn mul(&self, o: &Self) -> Self;
    fn scale(&self, s: Complex64) -> Self;
}

impl Coef for TrigPoly {
    fn zero() -> Self {
        TrigPoly::zero()
    }
    fn one() -> Self {
        TrigPoly::constant(c(1.0, 0.0))
    }
    fn is_zero(&self) -> bool {
        TrigPoly::is_zero(self)
    }
    fn add_assign(&mut self, o: &Self) {
        TrigPoly::add_assign(self, o)
    }
    fn mul(&self, o: &Self) -> Self {
        TrigPoly::mul(self, o)
    }
    fn scale(&self, s: Complex64) -> Self {
        TrigPoly::scale(self, s)
    }
}

/// First-order jet v + λ·d in an auxiliary parameter λ.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Jet {
    pub v: TrigPoly,
    pub d: TrigPoly,
}

impl Coef for Jet {
    fn zero() -> Self {
        Jet::default()
    }
    fn one() -> Self {
        Jet { v: TrigPoly::one(), d: TrigPoly::zero() }
    }
    fn is_zero(&self) -> bool {
        self.v.is_zero() && self.d.is_zero()
    }
    fn add_assign(&mut self, o: &Self) {
        self.v.add_assign(&o.v);
        self.d.add_assign(&o.d);
    }
    fn mul(&self, o: &Self) -> Self {
        Jet {
            v: self.v.mul(&o.v),
            d: self.v.mul(&o.d).add(&self.d.mul(&o.v)),
        }
    }
    fn scale(&self, s: Complex64) -> Self {
        Jet { v: self.v.scale(s), d: self.d.scale(s) }
    }
}

impl TrigPoly {
    pub fn one() -> TrigPoly {
        TrigPoly::constant(c(1.0, 0.0))
    }
}

pub type Field<C = TrigPoly> = BTreeMap<Mode, C>;

pub fn field_add_assign<C: Coef>(a: &mut Field<C>, b: &Field<C>) {
    for (nu, v) in b {
        add_entry(a, nu.clone(), v);
    }
}

fn add_entry<C: Coef>(a: &mut Field<C>, nu: Mode, v: &C) {
    if v.is_zero() {
        return;
    }
    let e = a.entry(nu.clone()).or_insert_with(C::zero);
    e.add_assign(v);
    if e.is_zero() {
        a.remove(&nu);
    }
}

/// Mode convolution.
pub fn field_mul<C: Coef>(a: &Field<C>, b: &Field<C>) -> Field<C> {
    let mut r = Field::new();
    for (n1, v1) in a {
        for (n2, v2) in b {
            add_entry(&mut r, n1.add(n2), &v1.mul(v2));
        }
    }
    r
}

fn field_scale<C: Coef>(a: &Field<C>, s: Complex64) -> Field<C> {
    a.iter().map(|(k, v)| (k.clone(), v.scale(s))).filter(|(_, v)| !v.is_zero()).collect()
}

fn unit_field<C: Coef>(d: usize) -> Field<C> {
    let mut f = Field::new();
    f.insert(Mode::zero(d), C::one());
    f
}

/// Powers of a series x = Σ_{j≥1} ε^j x[j]: out[p][j] = (x^p)_j for j ≤ order.
pub fn series_powers<C: Coef>(x: &[Field<C>], pmax: usize, order: usize, d: usize) -> Vec<Vec<Field<C>>> {
    let mut out: Vec<Vec<Field<C>>> = Vec::with_capacity(pmax + 1);
    let mut p0 = vec![Field::new(); order + 1];
    p0[0] = unit_field(d);
    out.push(p0);
    for p in 1..=pmax {
        let prev = &out[p - 1];
        let mut cur = vec![Field::new(); order + 1];
        for (j, slot) in cur.iter_mut().enumerate() {
            for j1 in 1..=j {
                if j1 >= x.len() || x[j1].is_empty() || prev[j - j1].is_empty() {
                    continue;
                }
                field_add_assign(slot, &field_mul(&x[j1], &prev[j - j1]));
            }
        }
        out.push(cur);
    }
    out
}

/// Taylor data of one forcing table about an expansion point:
/// taylor[ν₀][q][p] = (1/p!) ∂^p_β c_q, c_q the coefficient of (B − B₀)^q.
pub struct TaylorTable<C> {
    pub entries: Vec<(Mode, Vec<Vec<C>>)>,
}

impl<C: Coef> TaylorTable<C> {
    pub fn get(&self, idx: usize, p: usize, q: usize) -> Option<&C> {
        self.entries[idx].1.get(q).and_then(|row| row.get(p))
    }
}

fn beta_derivatives(t: &TrigPoly, pmax: usize) -> Vec<TrigPoly> {
    let mut out = Vec::with_capacity(pmax + 1);
    let mut cur = t.clone();
    for p in 0..=pmax {
        out.push(cur.scale_re(1.0 / factorial(p)));
        cur = cur.deriv();
    }
    out
}

/// Taylor data at B̄₀ + delta.
pub fn taylor_table(field: &ForcingField, delta: f64, pmax: usize) -> TaylorTable<TrigPoly> {
    let entries = field
        .table
        .iter()
        .map(|(nu, p)| {
            let cq = p.taylor_at(delta);
            (nu.clone(), cq.iter().map(|t| beta_derivatives(t, pmax)).collect())
        })
        .collect();
    TaylorTable { entries }
}

/// Taylor data at B̄₀ + delta + λ, as jets in λ.
pub fn taylor_table_jet(field: &ForcingField, delta: f64, pmax: usize) -> TaylorTable<Jet> {
    let entries = field
        .table
        .iter()
        .map(|(nu, p)| {
            let cq = p.taylor_at(delta);
            let rows = (0..cq.len())
                .map(|q| {
                    let v = beta_derivatives(&cq[q], pmax);
                    let d = match cq.get(q + 1) {
                        Some(next) => beta_derivatives(&next.scale_re((q + 1) as f64), pmax),
                        None => vec![TrigPoly::zero(); pmax + 1],
                    };
                    v.into_iter().zip(d).map(|(v, d)| Jet { v, d }).collect()
                })
                .collect();
            (nu.clone(), rows)
        })
        .collect();
    TaylorTable { entries }
}

/// Order-j coefficient of P(ψ, β₀ + δβ, B₀ + δB) expanded in ε.
pub fn compose<C: Coef>(
    table: &TaylorTable<C>,
    pb: &[Vec<Field<C>>],
    pbb: &[Vec<Field<C>>],
    j: usize,
) -> Field<C> {
    let mut out = Field::new();
    for (idx, (nu0, rows)) in table.entries.iter().enumerate() {
        for q in 0..rows.len() {
            for p in 0..=j.saturating_sub(q) {
                if p + q > j {
                    continue;
                }
                let Some(t) = table.get(idx, p, q) else { continue };
                if t.is_zero() {
                    continue;
                }
                let mut prod: Field<C> = Field::new();
                for j1 in 0..=j {
                    let a = &pb[p][j1];
                    let b = &pbb[q][j - j1];
                    if a.is_empty() || b.is_empty() {
                        continue;
                    }
                    field_add_assign(&mut prod, &field_mul(a, b));
                }
                for (nu, v) in prod {
                    add_entry(&mut out, nu.add(nu0), &v.mul(t));
                }
            }
        }
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("resonance: |omega.nu| = {value:e} at nu = {nu:?}")]
    Resonance { nu: Mode, value: f64 },
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct DivisorWarning {
    pub order: usize,
    pub nu: Mode,
    pub divisor: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RecursionOptions {
    /// Divisors below this are reported.
    pub divisor_floor: f64,
}

/// Per-order tables of the formal solution; index 0 is unused.
#[derive(Clone, Debug)]
pub struct SolutionSeries {
    pub k_max: usize,
    pub d: usize,
    pub b: Vec<Field>,
    pub big_b: Vec<Field>,
    pub phi: Vec<Field>,
    pub gamma: Vec<Field>,
    pub phi0: Vec<TrigPoly>,
    pub gamma0: Vec<TrigPoly>,
    pub warnings: Vec<DivisorWarning>,
}

impl SolutionSeries {
    pub fn empty(d: usize) -> SolutionSeries {
        SolutionSeries {
            k_max: 0,
            d,
            b: vec![Field::new()],
            big_b: vec![Field::new()],
            phi: vec![Field::new()],
            gamma: vec![Field::new()],
            phi0: vec![TrigPoly::zero()],
            gamma0: vec![TrigPoly::zero()],
            warnings: Vec::new(),
        }
    }

    pub fn b_at(&self, k: usize, nu: &Mode) -> TrigPoly {
        self.b[k].get(nu).cloned().unwrap_or_default()
    }

    pub fn big_b_at(&self, k: usize, nu: &Mode) -> TrigPoly {
        self.big_b[k].get(nu).cloned().unwrap_or_default()
    }

    /// Zero-mode of B at order k.
    pub fn b0(&self, k: usize) -> TrigPoly {
        self.big_b_at(k, &Mode::zero(self.d))
    }
}

fn divisor(spec: &SystemSpec, nu: &Mode) -> Result<f64, SeriesError> {
    let x = spec.dot(nu);
    if x.abs() < 1e-14 * (1.0 + nu.norm() as f64) {
        return Err(SeriesError::Resonance { nu: nu.clone(), value: x.abs() });
    }
    Ok(x)
}

/// Computes order k from orders 1..k−1.
pub fn advance_order(
    spec: &SystemSpec,
    series: &mut SolutionSeries,
    opts: &RecursionOptions,
) -> Result<(), SeriesError> {
    let k = series.k_max + 1;
    let d = spec.d;
    let tf = taylor_table(&spec.big_f, 0.0, k);
    let tg = taylor_table(&spec.big_g, 0.0, k);
    let pb = series_powers(&series.b, k, k, d);
    let pbb = series_powers(&series.big_b, k.max(spec.omega0.len()), k, d);
    let gamma = compose(&tg, &pb, &pbb, k - 1);
    let mut phi = compose(&tf, &pb, &pbb, k - 1);
    for (s, &a) in spec.omega0.iter().enumerate().skip(2) {
        if a != 0.0 && s <= k {
            field_add_assign(&mut phi, &field_scale(&pbb[s][k], c(a, 0.0)));
        }
    }
    let w1 = spec.omega0_prime();
    let zero = Mode::zero(d);
    let mut b = Field::new();
    let mut big_b = Field::new();
    let mut modes: Vec<&Mode> = phi.keys().chain(gamma.keys()).collect();
    modes.sort();
    modes.dedup();
    for nu in modes {
        let ph = phi.get(nu).cloned().unwrap_or_default();
        let ga = gamma.get(nu).cloned().unwrap_or_default();
        if nu.is_zero() {
            add_entry(&mut big_b, zero.clone(), &ph.scale_re(-1.0 / w1));
            continue;
        }
        let x = divisor(spec, nu)?;
        if x.abs() < opts.divisor_floor {
            series.warnings.push(DivisorWarning { order: k, nu: nu.clone(), divisor: x });
        }
        let inv = 1.0 / (I * x);
        add_entry(&mut big_b, nu.clone(), &ga.scale(inv));
        add_entry(&mut b, nu.clone(), &ph.scale(inv).add(&ga.scale(inv * inv * w1)));
    }
    series.phi0.push(phi.get(&zero).cloned().unwrap_or_default());
    series.gamma0.push(gamma.get(&zero).cloned().unwrap_or_default());
    series.b.push(b);
    series.big_b.push(big_b);
    series.phi.push(phi);
    series.gamma.push(gamma);
    series.k_max = k;
    Ok(())
}

pub fn compute_series(spec: &SystemSpec, k_max: usize, opts: &RecursionOptions) -> Result<SolutionSeries, SeriesError> {
    let mut s = SolutionSeries::empty(spec.d);
    for _ in 0..k_max {
        advance_order(spec, &mut s, opts)?;
    }
    Ok(s)
}

/// Largest relative defect of the order-k range equations over all ν ≠ 0.
pub fn range_residual(spec: &SystemSpec, series: &SolutionSeries, k: usize) -> f64 {
    let w1 = spec.omega0_prime();
    let mut worst: f64 = 0.0;
    let mut modes: Vec<&Mode> = series.b[k]
        .keys()
        .chain(series.big_b[k].keys())
        .chain(series.phi[k].keys())
        .chain(series.gamma[k].keys())
        .collect();
    modes.sort();
    modes.dedup();
    let get = |f: &Field, nu: &Mode| f.get(nu).cloned().unwrap_or_default();
    for nu in modes.into_iter().filter(|nu| !nu.is_zero()) {
        let ix = I * spec.dot(nu);
        let b = get(&series.b[k], nu);
        let bb = get(&series.big_b[k], nu);
        let ph = get(&series.phi[k], nu);
        let ga = get(&series.gamma[k], nu);
        let r1 = b.scale(ix).sub(&ph).sub(&bb.scale_re(w1));
        let r2 = bb.scale(ix).sub(&ga);
        let s1 = b.scale(ix).max_coeff().max(ph.max_coeff()).max(bb.scale_re(w1).max_coeff());
        let s2 = bb.scale(ix).max_coeff().max(ga.max_coeff());
        if s1 > 0.0 {
            worst = worst.max(r1.max_coeff() / s1);
        }
        if s2 > 0.0 {
            worst = worst.max(r2.max_coeff() / s2);
        }
    }
    worst
}

/// Expansion with (β₀, B₀) both free: no zero modes in b, B.
#[derive(Clone, Debug)]
pub struct TwoParamSeries<C> {
    pub b: Vec<Field<C>>,
    pub big_b: Vec<Field<C>>,
    /// Φ₀ per order, with order 0 equal to ω₀(B₀).
    pub phi0: Vec<C>,
    pub gamma0: Vec<C>,
}

fn two_param_generic<C: Coef>(
    spec: &SystemSpec,
    tf: &TaylorTable<C>,
    tg: &TaylorTable<C>,
    w: &[C],
    k_max: usize,
) -> Result<TwoParamSeries<C>, SeriesError> {
    let d = spec.d;
    let zero = Mode::zero(d);
    let mut s = TwoParamSeries {
        b: vec![Field::new()],
        big_b: vec![Field::new()],
        phi0: vec![w.first().cloned().unwrap_or_else(C::zero)],
        gamma0: vec![C::zero()],
    };
    for k in 1..=k_max {
        let pb = series_powers(&s.b, k, k, d);
        let pbb_prev = series_powers(&s.big_b, k, k - 1, d);
        let gamma = compose(tg, &pb, &pbb_prev, k - 1);
        let mut f_part = compose(tf, &pb, &pbb_prev, k - 1);
        let mut big_b = Field::new();
        for (nu, ga) in &gamma {
            if nu.is_zero() {
                continue;
            }
            let x = divisor(spec, nu)?;
            add_entry(&mut big_b, nu.clone(), &ga.scale(1.0 / (I * x)));
        }
        s.big_b.push(big_b);
        let pbb = series_powers(&s.big_b, k, k, d);
        for (sdeg, a) in w.iter().enumerate().skip(1) {
            if sdeg <= k {
                let term: Field<C> = pbb[sdeg][k].iter().map(|(nu, v)| (nu.clone(), v.mul(a))).collect();
                field_add_assign(&mut f_part, &term);
            }
        }
        let mut b = Field::new();
        for (nu, ph) in &f_part {
            if nu.is_zero() {
                continue;
            }
            let x = divisor(spec, nu)?;
            add_entry(&mut b, nu.clone(), &ph.scale(1.0 / (I * x)));
        }
        s.b.push(b);
        s.phi0.push(f_part.get(&zero).cloned().unwrap_or_else(C::zero));
        s.gamma0.push(gamma.get(&zero).cloned().unwrap_or_else(C::zero));
    }
    Ok(s)
}

/// Two-parameter expansion about B₀ = B̄₀ + delta.
pub fn two_param_series(spec: &SystemSpec, delta: f64, k_max: usize) -> Result<TwoParamSeries<TrigPoly>, SeriesError> {
    let tf = taylor_table(&spec.big_f, delta, k_max);
    let tg = taylor_table(&spec.big_g, delta, k_max);
    let w: Vec<TrigPoly> = spec.omega0_taylor(delta).iter().map(|&a| TrigPoly::constant(c(a, 0.0))).collect();
    two_param_generic(spec, &tf, &tg, &w, k_max)
}

/// Per order, [[∂β₀Φ₀, ∂B₀Φ₀], [∂β₀Γ₀, ∂B₀Γ₀]] of the two-parameter expansion at B̄₀ + delta.
pub fn two_param_jacobian(spec: &SystemSpec, delta: f64, k_max: usize) -> Result<Vec<[[TrigPoly; 2]; 2]>, SeriesError> {
    let tf = taylor_table_jet(&spec.big_f, delta, k_max);
    let tg = taylor_table_jet(&spec.big_g, delta, k_max);
    let a = spec.omega0_taylor(delta);
    let w: Vec<Jet> = (0..a.len())
        .map(|s| Jet {
            v: TrigPoly::constant(c(a[s], 0.0)),
            d: TrigPoly::constant(c(a.get(s + 1).copied().unwrap_or(0.0) * (s + 1) as f64, 0.0)),
        })
        .collect();
    let s = two_param_generic(spec, &tf, &tg, &w, k_max)?;
    Ok((0..=k_max)
        .map(|k| {
            let p = &s.phi0[k];
            let g = &s.gamma0[k];
            [[p.v.deriv(), p.d.clone()], [g.v.deriv(), g.d.clone()]]
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct MelnikovZero {
    pub beta: f64,
    pub order: usize,
    pub leading_derivative: f64,
    /// Sign condition ε^{k0}·ω₀′·∂ⁿΓ > 0 for ε > 0 and ε < 0, only for odd order.
    pub eps_positive: bool,
    pub eps_negative: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MelnikovReport {
    pub k0: Option<usize>,
    pub all_zero: bool,
    pub gamma_k0: TrigPoly,
    pub zeros: Vec<MelnikovZero>,
    pub tol_zero: f64,
    pub tol_order: f64,
    pub order_tolerance: f64,
}

/// Scale of the G table, used for the identically-zero test on Γ⁽ᵏ⁾₀.
fn data_scale(spec: &SystemSpec) -> f64 {
    spec.big_g
        .table
        .values()
        .flat_map(|p| p.coeffs.iter().map(|t| t.max_coeff()))
        .fold(0.0, f64::max)
}

pub fn melnikov(spec: &SystemSpec, series: &SolutionSeries) -> MelnikovReport {
    let order_tolerance = 1e-9 * data_scale(spec).max(f64::MIN_POSITIVE);
    let k0 = (1..=series.k_max).find(|&k| series.gamma0[k].sup_norm() > order_tolerance);
    let Some(k0) = k0 else {
        return MelnikovReport {
            k0: None,
            all_zero: true,
            gamma_k0: TrigPoly::zero(),
            zeros: Vec::new(),
            tol_zero: 0.0,
            tol_order: 0.0,
            order_tolerance,
        };
    };
    let g = series.gamma0[k0].clone();
    let norm = g.sup_norm();
    let tol_zero = 1e-9 * norm;
    let tol_order = 1e-6 * norm;
    let w1 = spec.omega0_prime();
    let zeros = find_zeros(&g, tol_zero, tol_order)
        .into_iter()
        .map(|(beta, order, lead)| {
            let odd = order % 2 == 1;
            let sgn_neg = if k0 % 2 == 0 { 1.0 } else { -1.0 };
            MelnikovZero {
                beta,
                order,
                leading_derivative: lead,
                eps_positive: odd && w1 * lead > 0.0,
                eps_negative: odd && sgn_neg * w1 * lead > 0.0,
            }
        })
        .collect();
    MelnikovReport {
        k0: Some(k0),
        all_zero: false,
        gamma_k0: g,
        zeros,
        tol_zero,
        tol_order,
        order_tolerance,
    }
}

fn re_eval(g: &TrigPoly, beta: f64) -> f64 {
    g.eval(beta).re
}

fn wrap(beta: f64) -> f64 {
    let t = beta.rem_euclid(2.0 * PI);
    if (2.0 * PI - t).abs() < 1e-12 {
        0.0
    } else {
        t
    }
}

fn newton(g: &TrigPoly, dg: &TrigPoly, mut x: f64) -> f64 {
    for _ in 0..50 {
        let f = re_eval(g, x);
        let d = re_eval(dg, x);
        if d == 0.0 || !d.is_finite() {
            break;
        }
        let step = f / d;
        x -= step;
        if step.abs() < 1e-16 {
            break;
        }
    }
    x
}

fn bisect(g: &TrigPoly, mut a: f64, mut b: f64) -> f64 {
    let mut fa = re_eval(g, a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m == a || m == b {
            break;
        }
        let fm = re_eval(g, m);
        if fm == 0.0 {
            return m;
        }
        if (fa < 0.0) == (fm < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Zeros of a real trigonometric polynomial on [0, 2π) with multiplicities.
pub fn find_zeros(g: &TrigPoly, tol_zero: f64, tol_order: f64) -> Vec<(f64, usize, f64)> {
    let n = 256.max(64 * (g.max_harmonic() as usize + 1));
    let h = 2.0 * PI / n as f64;
    let vals: Vec<f64> = (0..n).map(|i| re_eval(g, i as f64 * h)).collect();
    let dg = g.deriv();
    let ddg = dg.deriv();
    let mut cands: Vec<f64> = Vec::new();
    for i in 0..n {
        let (a, b) = (vals[i], vals[(i + 1) % n]);
        let prev = vals[(i + n - 1) % n];
        let x = i as f64 * h;
        if a == 0.0 {
            cands.push(x);
        } else if a * b < 0.0 {
            cands.push(bisect(g, x, x + h));
        }
        if a.abs() <= prev.abs() && a.abs() <= b.abs() {
            // local minimum of |g|: refine as a critical point
            let y = newton(&dg, &ddg, x);
            if (y - x).abs() < 2.0 * h {
                cands.push(y);
            }
        }
    }
    let mut roots: Vec<(f64, usize, f64)> = Vec::new();
    for x in cands {
        let mut x = wrap(x);
        if re_eval(g, x).abs() >= tol_zero {
            continue;
        }
        if re_eval(&dg, x).abs() > tol_order {
            let y = wrap(newton(g, &dg, x));
            if re_eval(g, y).abs() <= re_eval(g, x).abs() {
                x = y;
            }
        }
        if roots.iter().any(|r| {
            let dd = (r.0 - x).abs();
            dd.min(2.0 * PI - dd) < 1e-8
        }) {
            continue;
        }
        let mut der = g.clone();
        let mut order = 0;
        let mut lead = 0.0;
        for j in 1..=12 {
            der = der.deriv();
            let v = re_eval(&der, x);
            if v.abs() > tol_order {
                order = j;
                lead = v;
                break;
            }
        }
        if order > 0 {
            roots.push((x, order, lead));
        }
    }
    roots.sort_by(|a, b| a.0.total_cmp(&b.0));
    roots
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientCheck {
    pub hamiltonian: bool,
    pub k0: Option<usize>,
    pub mean_defect: f64,
    pub passed: bool,
    /// Antiderivative with zero mean.
    pub g: TrigPoly,
}

/// Checks that Γ⁽ᵏ⁰⁾₀ has no mean harmonic and reconstructs its antiderivative.
pub fn gradient_structure_check(spec: &SystemSpec, series: &SolutionSeries, report: &MelnikovReport) -> GradientCheck {
    let gam = &report.gamma_k0;
    let mean = gam.get(0).norm();
    let mut g = TrigPoly::zero();
    for (&m, &v) in &gam.harmonics {
        if m != 0 {
            g.add_term(m, v / c(0.0, m as f64));
        }
    }
    let scale = report.gamma_k0.max_coeff().max(data_scale(spec)).max(1e-300);
    let _ = series;
    GradientCheck {
        hamiltonian: spec.is_hamiltonian(),
        k0: report.k0,
        mean_defect: mean,
        passed: report.k0.is_some() && mean <= 1e-12 * scale,
        g,
    }
}
