//! System specification and the Fourier-Taylor coefficient algebra.
//!
//! A [`TrigPoly`] is a finite Fourier series in the free phase β₀. A [`BPoly`]
//! is a polynomial in `B - B̄₀` whose coefficients are trigonometric
//! polynomials in β. A [`ForcingField`] attaches one `BPoly` to each retained
//! lattice mode of the quasi-periodic forcing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Integer lattice vector.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mode(pub Vec<i32>);

impl Mode {
    pub fn zero(d: usize) -> Mode {
        Mode(vec![0; d])
    }

    pub fn unit(d: usize, i: usize) -> Mode {
        let mut v = vec![0; d];
        v[i] = 1;
        Mode(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0)
    }

    /// ℓ1 norm.
    pub fn norm(&self) -> i64 {
        self.0.iter().map(|&x| (x as i64).abs()).sum()
    }

    pub fn dot(&self, omega: &[f64]) -> f64 {
        self.0.iter().zip(omega).map(|(&n, &w)| n as f64 * w).sum()
    }

    pub fn add(&self, o: &Mode) -> Mode {
        Mode(self.0.iter().zip(&o.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, o: &Mode) -> Mode {
        Mode(self.0.iter().zip(&o.0).map(|(a, b)| a - b).collect())
    }

    pub fn neg(&self) -> Mode {
        Mode(self.0.iter().map(|a| -a).collect())
    }
}

impl fmt::Debug for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Finite Fourier series Σ c_m e^{imβ₀}. Exact zeros are never stored.
#[derive(Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrigPoly {
    pub harmonics: BTreeMap<i32, Complex64>,
}

impl fmt::Debug for TrigPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.harmonics.iter()).finish()
    }
}

impl TrigPoly {
    pub fn zero() -> TrigPoly {
        TrigPoly::default()
    }

    pub fn constant(v: Complex64) -> TrigPoly {
        TrigPoly::monomial(0, v)
    }

    pub fn monomial(m: i32, v: Complex64) -> TrigPoly {
        let mut t = TrigPoly::zero();
        t.add_term(m, v);
        t
    }

    pub fn from_pairs(pairs: &[(i32, Complex64)]) -> TrigPoly {
        let mut t = TrigPoly::zero();
        for &(m, v) in pairs {
            t.add_term(m, v);
        }
        t
    }

    /// sin(mβ) with unit amplitude.
    pub fn sin(m: i32) -> TrigPoly {
        TrigPoly::from_pairs(&[(m, c(0.0, -0.5)), (-m, c(0.0, 0.5))])
    }

    /// cos(mβ) with unit amplitude.
    pub fn cos(m: i32) -> TrigPoly {
        if m == 0 {
            return TrigPoly::constant(c(1.0, 0.0));
        }
        TrigPoly::from_pairs(&[(m, c(0.5, 0.0)), (-m, c(0.5, 0.0))])
    }

    pub fn add_term(&mut self, m: i32, v: Complex64) {
        if v == Complex64::new(0.0, 0.0) {
            return;
        }
        let e = self.harmonics.entry(m).or_insert(Complex64::new(0.0, 0.0));
        *e += v;
        if *e == Complex64::new(0.0, 0.0) {
            self.harmonics.remove(&m);
        }
    }

    pub fn get(&self, m: i32) -> Complex64 {
        self.harmonics.get(&m).copied().unwrap_or_default()
    }

    pub fn is_zero(&self) -> bool {
        self.harmonics.is_empty()
    }

    pub fn add(&self, o: &TrigPoly) -> TrigPoly {
        let mut r = self.clone();
        r.add_assign(o);
        r
    }

    pub fn add_assign(&mut self, o: &TrigPoly) {
        for (&m, &v) in &o.harmonics {
            self.add_term(m, v);
        }
    }

    pub fn sub(&self, o: &TrigPoly) -> TrigPoly {
        self.add(&o.scale(c(-1.0, 0.0)))
    }

    pub fn scale(&self, s: Complex64) -> TrigPoly {
        let mut r = TrigPoly::zero();
        for (&m, &v) in &self.harmonics {
            r.add_term(m, v * s);
        }
        r
    }

    pub fn scale_re(&self, s: f64) -> TrigPoly {
        self.scale(c(s, 0.0))
    }

    /// Harmonic convolution.
    pub fn mul(&self, o: &TrigPoly) -> TrigPoly {
        let mut r = TrigPoly::zero();
        for (&m1, &v1) in &self.harmonics {
            for (&m2, &v2) in &o.harmonics {
                r.add_term(m1 + m2, v1 * v2);
            }
        }
        r
    }

    /// d/dβ₀: c_m ↦ im·c_m.
    pub fn deriv(&self) -> TrigPoly {
        let mut r = TrigPoly::zero();
        for (&m, &v) in &self.harmonics {
            r.add_term(m, v * c(0.0, m as f64));
        }
        r
    }

    pub fn deriv_n(&self, n: usize) -> TrigPoly {
        let mut r = self.clone();
        for _ in 0..n {
            r = r.deriv();
        }
        r
    }

    pub fn eval(&self, beta: f64) -> Complex64 {
        self.harmonics
            .iter()
            .map(|(&m, &v)| v * Complex64::from_polar(1.0, m as f64 * beta))
            .sum()
    }

    /// Complex conjugate of the function β ↦ p(β) for real β.
    pub fn conj(&self) -> TrigPoly {
        let mut r = TrigPoly::zero();
        for (&m, &v) in &self.harmonics {
            r.add_term(-m, v.conj());
        }
        r
    }

    /// p(β + δ).
    pub fn shift(&self, delta: f64) -> TrigPoly {
        let mut r = TrigPoly::zero();
        for (&m, &v) in &self.harmonics {
            r.add_term(m, v * Complex64::from_polar(1.0, m as f64 * delta));
        }
        r
    }

    pub fn max_harmonic(&self) -> i32 {
        self.harmonics.keys().map(|m| m.abs()).max().unwrap_or(0)
    }

    /// Sum of coefficient moduli; bounds the sup norm.
    pub fn l1(&self) -> f64 {
        self.harmonics.values().map(|v| v.norm()).sum()
    }

    pub fn max_coeff(&self) -> f64 {
        self.harmonics.values().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Sup norm sampled on a uniform grid fine enough for the highest harmonic.
    pub fn sup_norm(&self) -> f64 {
        let n = 64 * (self.max_harmonic() as usize + 1);
        (0..n)
            .map(|j| self.eval(2.0 * std::f64::consts::PI * j as f64 / n as f64).norm())
            .fold(0.0, f64::max)
    }

    /// Largest |c_{-m} - conj(c_m)|.
    pub fn reality_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (&m, &v) in &self.harmonics {
            worst = worst.max((self.get(-m) - v.conj()).norm());
        }
        worst
    }

    pub fn max_diff(&self, o: &TrigPoly) -> f64 {
        self.sub(o).max_coeff()
    }
}

/// Polynomial in (B − B̄₀) with trigonometric coefficients in β.
#[derive(Clone, PartialEq, Default, Debug)]
pub struct BPoly {
    pub coeffs: Vec<TrigPoly>,
}

impl BPoly {
    pub fn new(coeffs: Vec<TrigPoly>) -> BPoly {
        let mut p = BPoly { coeffs };
        p.trim();
        p
    }

    pub fn from_trig(t: TrigPoly) -> BPoly {
        BPoly::new(vec![t])
    }

    fn trim(&mut self) {
        while self.coeffs.last().is_some_and(|t| t.is_zero()) {
            self.coeffs.pop();
        }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn coeff(&self, q: usize) -> TrigPoly {
        self.coeffs.get(q).cloned().unwrap_or_default()
    }

    pub fn deriv_b(&self) -> BPoly {
        BPoly::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(q, t)| t.scale_re(q as f64))
                .collect(),
        )
    }

    pub fn deriv_beta(&self) -> BPoly {
        BPoly::new(self.coeffs.iter().map(|t| t.deriv()).collect())
    }

    pub fn scale(&self, s: Complex64) -> BPoly {
        BPoly::new(self.coeffs.iter().map(|t| t.scale(s)).collect())
    }

    pub fn add(&self, o: &BPoly) -> BPoly {
        let n = self.coeffs.len().max(o.coeffs.len());
        BPoly::new((0..n).map(|q| self.coeff(q).add(&o.coeff(q))).collect())
    }

    pub fn conj(&self) -> BPoly {
        BPoly::new(self.coeffs.iter().map(|t| t.conj()).collect())
    }

    /// Value at (β, B̄₀ + db).
    pub fn eval(&self, beta: f64, db: f64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for t in self.coeffs.iter().rev() {
            acc = acc * db + t.eval(beta);
        }
        acc
    }

    /// Taylor coefficients in (B − B̄₀ − delta): c'_q = Σ_j C(j,q) c_j delta^{j−q}.
    pub fn taylor_at(&self, delta: f64) -> Vec<TrigPoly> {
        if delta == 0.0 {
            return self.coeffs.clone();
        }
        let n = self.coeffs.len();
        (0..n)
            .map(|q| {
                let mut t = TrigPoly::zero();
                for j in q..n {
                    let w = binom(j, q) * delta.powi((j - q) as i32);
                    t.add_assign(&self.coeffs[j].scale_re(w));
                }
                t
            })
            .collect()
    }
}

pub fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Mode-indexed table of [`BPoly`] entries.
#[derive(Clone, PartialEq, Default, Debug)]
pub struct ForcingField {
    pub table: BTreeMap<Mode, BPoly>,
}

impl ForcingField {
    pub fn new() -> ForcingField {
        ForcingField::default()
    }

    pub fn insert(&mut self, nu: Mode, p: BPoly) {
        if p.is_zero() {
            self.table.remove(&nu);
        } else {
            self.table.insert(nu, p);
        }
    }

    /// Adds a term coeff·e^{imβ}(B−B̄₀)^q at mode ν.
    pub fn add_term(&mut self, nu: &Mode, m: i32, q: usize, v: Complex64) {
        let mut p = self.get(nu);
        while p.coeffs.len() <= q {
            p.coeffs.push(TrigPoly::zero());
        }
        p.coeffs[q].add_term(m, v);
        self.insert(nu.clone(), BPoly::new(p.coeffs));
    }

    pub fn get(&self, nu: &Mode) -> BPoly {
        self.table.get(nu).cloned().unwrap_or_default()
    }

    pub fn modes(&self) -> impl Iterator<Item = &Mode> {
        self.table.keys()
    }

    pub fn is_zero(&self) -> bool {
        self.table.is_empty()
    }

    pub fn map(&self, f: impl Fn(&BPoly) -> BPoly) -> ForcingField {
        let mut r = ForcingField::new();
        for (nu, p) in &self.table {
            r.insert(nu.clone(), f(p));
        }
        r
    }

    /// Largest coefficient mismatch between the entry at −ν and the conjugate of the entry at ν.
    pub fn reality_defect(&self) -> (f64, Option<Mode>) {
        let mut worst = (0.0, None);
        for nu in self.table.keys() {
            let a = self.get(nu).conj();
            let b = self.get(&nu.neg());
            let n = a.coeffs.len().max(b.coeffs.len());
            for q in 0..n {
                let d = a.coeff(q).max_diff(&b.coeff(q));
                if d > worst.0 {
                    worst = (d, Some(nu.clone()));
                }
            }
        }
        worst
    }

    pub fn max_diff(&self, o: &ForcingField) -> f64 {
        let mut worst: f64 = 0.0;
        for nu in self.table.keys().chain(o.table.keys()) {
            let a = self.get(nu);
            let b = o.get(nu);
            let n = a.coeffs.len().max(b.coeffs.len());
            for q in 0..n {
                worst = worst.max(a.coeff(q).max_diff(&b.coeff(q)));
            }
        }
        worst
    }
}

/// F = ∂_B f and G = −∂_β f.
pub fn derive_forcing_from_hamiltonian(f: &ForcingField) -> (ForcingField, ForcingField) {
    let big_f = f.map(|p| p.deriv_b());
    let big_g = f.map(|p| p.deriv_beta().scale(c(-1.0, 0.0)));
    (big_f, big_g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    #[serde(rename = "N_modes")]
    pub n_modes: i64,
    #[serde(rename = "M_beta")]
    pub m_beta: i32,
    #[serde(rename = "D_B")]
    pub d_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec {
    pub d: usize,
    pub omega: Vec<f64>,
    /// Textual form of ω as read, kept for saving.
    pub omega_src: Vec<String>,
    pub b0bar: f64,
    /// ω₀ as ascending coefficients in (B − B̄₀).
    pub omega0: Vec<f64>,
    pub big_f: ForcingField,
    pub big_g: ForcingField,
    pub hamiltonian: Option<ForcingField>,
    pub truncation: Truncation,
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("normalization violated: |omega0(B0bar)| = {0:e} > 1e-12")]
    Normalization(f64),
    #[error("anisochrony violated: |omega0'(B0bar)| = {0:e} <= 1e-10")]
    Anisochrony(f64),
    #[error("reality violated in {table} at mode {mode:?} (defect {defect:e})")]
    Reality {
        table: String,
        mode: Mode,
        defect: f64,
    },
    #[error("truncation violated: {0}")]
    Truncation(String),
    #[error("F/G inconsistent with the Hamiltonian f (defect {0:e})")]
    Hamiltonian(f64),
}

impl SpecError {
    pub fn kind(&self) -> &'static str {
        match self {
            SpecError::Io { .. } => "io",
            SpecError::Parse(_) => "parse",
            SpecError::Normalization(_) => "normalization",
            SpecError::Anisochrony(_) => "anisochrony",
            SpecError::Reality { .. } => "reality",
            SpecError::Truncation(_) => "truncation",
            SpecError::Hamiltonian(_) => "hamiltonian",
        }
    }
}

impl SystemSpec {
    /// Builds and validates a spec from a Hamiltonian f.
    pub fn from_hamiltonian(
        omega: Vec<f64>,
        b0bar: f64,
        omega0: Vec<f64>,
        f: ForcingField,
        truncation: Truncation,
    ) -> Result<SystemSpec, SpecError> {
        let (big_f, big_g) = derive_forcing_from_hamiltonian(&f);
        let spec = SystemSpec {
            d: omega.len(),
            omega_src: omega.iter().map(|w| format!("{w:?}")).collect(),
            omega,
            b0bar,
            omega0,
            big_f,
            big_g,
            hamiltonian: Some(f),
            truncation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_forcing(
        omega: Vec<f64>,
        b0bar: f64,
        omega0: Vec<f64>,
        big_f: ForcingField,
        big_g: ForcingField,
        truncation: Truncation,
    ) -> Result<SystemSpec, SpecError> {
        let spec = SystemSpec {
            d: omega.len(),
            omega_src: omega.iter().map(|w| format!("{w:?}")).collect(),
            omega,
            b0bar,
            omega0,
            big_f,
            big_g,
            hamiltonian: None,
            truncation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn is_hamiltonian(&self) -> bool {
        self.hamiltonian.is_some()
    }

    /// Taylor coefficients of ω₀ about B̄₀ + delta.
    pub fn omega0_taylor(&self, delta: f64) -> Vec<f64> {
        let n = self.omega0.len();
        (0..n)
            .map(|s| {
                (s..n)
                    .map(|j| binom(j, s) * self.omega0[j] * delta.powi((j - s) as i32))
                    .sum()
            })
            .collect()
    }

    /// ω₀ at B̄₀ + db.
    pub fn omega0_at(&self, db: f64) -> f64 {
        self.omega0.iter().rev().fold(0.0, |acc, &a| acc * db + a)
    }

    /// ω₀′ at B̄₀ + db.
    pub fn omega0_prime_at(&self, db: f64) -> f64 {
        self.omega0_taylor(db).get(1).copied().unwrap_or(0.0)
    }

    pub fn omega0_prime(&self) -> f64 {
        self.omega0.get(1).copied().unwrap_or(0.0)
    }

    pub fn dot(&self, nu: &Mode) -> f64 {
        nu.dot(&self.omega)
    }

    /// Union of the F, G and f mode supports.
    pub fn support(&self) -> Vec<Mode> {
        let mut s: Vec<Mode> = self
            .big_f
            .modes()
            .chain(self.big_g.modes())
            .chain(self.hamiltonian.iter().flat_map(|f| f.modes()))
            .cloned()
            .collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.d == 0 || self.omega.len() != self.d {
            return Err(SpecError::Parse(format!(
                "omega has {} entries, d = {}",
                self.omega.len(),
                self.d
            )));
        }
        let w0 = self.omega0_at(0.0);
        if w0.abs() > 1e-12 {
            return Err(SpecError::Normalization(w0.abs()));
        }
        let w1 = self.omega0_prime();
        if w1.abs() <= 1e-10 {
            return Err(SpecError::Anisochrony(w1.abs()));
        }
        let mut tables = vec![("F", &self.big_f), ("G", &self.big_g)];
        if let Some(f) = &self.hamiltonian {
            tables.push(("f", f));
        }
        for (name, t) in &tables {
            for (nu, p) in &t.table {
                if nu.dim() != self.d {
                    return Err(SpecError::Parse(format!("mode {nu:?} in {name} has wrong dimension")));
                }
                if nu.norm() > self.truncation.n_modes {
                    return Err(SpecError::Truncation(format!("{name} mode {nu:?} exceeds N_modes")));
                }
                if p.degree() > self.truncation.d_b {
                    return Err(SpecError::Truncation(format!("{name} mode {nu:?} exceeds D_B")));
                }
                if p.coeffs.iter().any(|t| t.max_harmonic() > self.truncation.m_beta) {
                    return Err(SpecError::Truncation(format!("{name} mode {nu:?} exceeds M_beta")));
                }
            }
            let (defect, mode) = t.reality_defect();
            let scale = t
                .table
                .values()
                .flat_map(|p| p.coeffs.iter().map(|c| c.max_coeff()))
                .fold(1.0, f64::max);
            if defect > 1e-14 * scale {
                return Err(SpecError::Reality {
                    table: name.to_string(),
                    mode: mode.unwrap_or_else(|| Mode::zero(self.d)),
                    defect,
                });
            }
        }
        if let Some(f) = &self.hamiltonian {
            let (df, dg) = derive_forcing_from_hamiltonian(f);
            let defect = df.max_diff(&self.big_f).max(dg.max_diff(&self.big_g));
            if defect > 0.0 {
                return Err(SpecError::Hamiltonian(defect));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TermRecord {
    nu: Vec<i32>,
    m: i32,
    b_coeffs: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    d: usize,
    omega: Vec<String>,
    #[serde(rename = "B0bar")]
    b0bar: f64,
    omega0_poly: Vec<f64>,
    #[serde(rename = "F", default, skip_serializing_if = "Option::is_none")]
    big_f: Option<Vec<TermRecord>>,
    #[serde(rename = "G", default, skip_serializing_if = "Option::is_none")]
    big_g: Option<Vec<TermRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    f: Option<Vec<TermRecord>>,
    truncation: Truncation,
}

fn records_to_field(recs: &[TermRecord]) -> ForcingField {
    let mut t = ForcingField::new();
    for r in recs {
        let nu = Mode(r.nu.clone());
        for (q, v) in r.b_coeffs.iter().enumerate() {
            t.add_term(&nu, r.m, q, c(v[0], v[1]));
        }
    }
    t
}

fn field_to_records(t: &ForcingField) -> Vec<TermRecord> {
    let mut out = Vec::new();
    for (nu, p) in &t.table {
        let mut ms: Vec<i32> = p.coeffs.iter().flat_map(|c| c.harmonics.keys().copied()).collect();
        ms.sort();
        ms.dedup();
        for m in ms {
            let b_coeffs = p
                .coeffs
                .iter()
                .map(|c| {
                    let v = c.get(m);
                    [v.re, v.im]
                })
                .collect();
            out.push(TermRecord { nu: nu.0.clone(), m, b_coeffs });
        }
    }
    out
}

/// Parses a decimal literal or a quadratic surd `(p+q√r)/s` (also `sqrt(r)`).
pub fn parse_frequency(s: &str) -> Result<f64, SpecError> {
    let t = s.trim();
    if let Ok(v) = t.parse::<f64>() {
        return Ok(v);
    }
    let re = Regex::new(
        r"^\(?\s*(?P<p>[+-]?\d+)?\s*(?P<sg>[+-])?\s*(?P<q>\d+)?\s*\*?\s*(?:√|sqrt)\s*\(?\s*(?P<r>\d+)\s*\)?\s*\)?\s*(?:/\s*(?P<s>\d+))?$",
    )
    .expect("static regex");
    let caps = re
        .captures(t)
        .ok_or_else(|| SpecError::Parse(format!("cannot parse frequency {s:?}")))?;
    let num = |name: &str, default: f64| -> f64 {
        caps.name(name).map_or(default, |m| m.as_str().parse::<f64>().unwrap_or(default))
    };
    let p = num("p", 0.0);
    let mut q = num("q", 1.0);
    if caps.name("sg").is_some_and(|m| m.as_str() == "-") {
        q = -q;
    }
    let (p, q) = if caps.name("sg").is_none() && caps.name("q").is_none() && caps.name("p").is_some() {
        // a bare leading integer multiplies the root
        (0.0, p)
    } else {
        (p, q)
    };
    let r = num("r", 0.0);
    let den = num("s", 1.0);
    if den == 0.0 {
        return Err(SpecError::Parse(format!("zero denominator in {s:?}")));
    }
    Ok(surd_value(p, q, r, den))
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// (p + q√r)/s in double-double arithmetic, rounded once.
fn surd_value(p: f64, q: f64, r: f64, s: f64) -> f64 {
    let h = r.sqrt();
    let (sq, e) = two_prod(h, h);
    let l = ((r - sq) - e) / (2.0 * h);
    let (qh, qe) = two_prod(q, h);
    let ql = qe + q * l;
    let (n_hi, n_e) = two_sum(p, qh);
    let n_lo = n_e + ql;
    let (n_hi, n_lo) = two_sum(n_hi, n_lo);
    let d_hi = n_hi / s;
    let (ph, pe) = two_prod(d_hi, s);
    let d_lo = ((n_hi - ph) - pe + n_lo) / s;
    d_hi + d_lo
}

pub fn parse_spec(text: &str) -> Result<SystemSpec, SpecError> {
    let raw: SpecFile = serde_json::from_str(text).map_err(|e| SpecError::Parse(e.to_string()))?;
    let omega = raw
        .omega
        .iter()
        .map(|s| parse_frequency(s))
        .collect::<Result<Vec<_>, _>>()?;
    let hamiltonian = raw.f.as_deref().map(records_to_field);
    let (big_f, big_g) = match (&hamiltonian, &raw.big_f, &raw.big_g) {
        (Some(f), None, None) => derive_forcing_from_hamiltonian(f),
        _ => (
            raw.big_f.as_deref().map(records_to_field).unwrap_or_default(),
            raw.big_g.as_deref().map(records_to_field).unwrap_or_default(),
        ),
    };
    let spec = SystemSpec {
        d: raw.d,
        omega,
        omega_src: raw.omega,
        b0bar: raw.b0bar,
        omega0: raw.omega0_poly,
        big_f,
        big_g,
        hamiltonian,
        truncation: raw.truncation,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn load_spec(path: &Path) -> Result<SystemSpec, SpecError> {
    let text = std::fs::read_to_string(path).map_err(|e| SpecError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_spec(&text)
}

pub fn spec_to_json(spec: &SystemSpec) -> String {
    let (big_f, big_g, f) = match &spec.hamiltonian {
        Some(f) => (None, None, Some(field_to_records(f))),
        None => (
            Some(field_to_records(&spec.big_f)),
            Some(field_to_records(&spec.big_g)),
            None,
        ),
    };
    let file = SpecFile {
        d: spec.d,
        omega: spec.omega_src.clone(),
        b0bar: spec.b0bar,
        omega0_poly: spec.omega0.clone(),
        big_f,
        big_g,
        f,
        truncation: spec.truncation,
    };
    serde_json::to_string_pretty(&file).expect("spec serializes")
}

pub fn save_spec(spec: &SystemSpec, path: &Path) -> Result<(), SpecError> {
    std::fs::write(path, spec_to_json(spec)).map_err(|e| SpecError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// The reference model: d=2, ω=(1, golden mean), ω₀(B)=B, f=(1+cos α₁)cos β.
pub fn sample_model() -> SystemSpec {
    let text = r#"{
  "d": 2,
  "omega": ["1", "(1+sqrt(5))/2"],
  "B0bar": 0.0,
  "omega0_poly": [0.0, 1.0],
  "f": [
    {"nu": [0, 0], "m": 1, "b_coeffs": [[0.5, 0.0]]},
    {"nu": [0, 0], "m": -1, "b_coeffs": [[0.5, 0.0]]},
    {"nu": [1, 0], "m": 1, "b_coeffs": [[0.25, 0.0]]},
    {"nu": [1, 0], "m": -1, "b_coeffs": [[0.25, 0.0]]},
    {"nu": [-1, 0], "m": 1, "b_coeffs": [[0.25, 0.0]]},
    {"nu": [-1, 0], "m": -1, "b_coeffs": [[0.25, 0.0]]}
  ],
  "truncation": {"N_modes": 1, "M_beta": 1, "D_B": 1}
}"#;
    parse_spec(text).expect("sample model is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Complex64, b: Complex64) -> bool {
        (a - b).norm() < 1e-14
    }

    #[test]
    fn sin_squared() {
        let s = TrigPoly::sin(1);
        let p = s.mul(&s);
        assert!(close(p.get(0), c(0.5, 0.0)));
        assert!(close(p.get(2), c(-0.25, 0.0)));
        assert!(close(p.get(-2), c(-0.25, 0.0)));
        assert_eq!(p.harmonics.len(), 3);
    }

    #[test]
    fn derivative_and_eval() {
        assert!(TrigPoly::sin(1).deriv().max_diff(&TrigPoly::cos(1)) < 1e-15);
        assert!((TrigPoly::sin(1).eval(std::f64::consts::FRAC_PI_2) - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn sample_model_derivation() {
        let s = sample_model();
        assert!(s.big_f.is_zero());
        let g0 = s.big_g.get(&Mode(vec![0, 0]));
        assert_eq!(g0.degree(), 0);
        assert!(g0.coeff(0).max_diff(&TrigPoly::sin(1)) < 1e-15);
        for nu in [Mode(vec![1, 0]), Mode(vec![-1, 0])] {
            let g = s.big_g.get(&nu);
            assert!(g.coeff(0).max_diff(&TrigPoly::sin(1).scale_re(0.5)) < 1e-15);
        }
        assert!((s.omega[1] - 1.618_033_988_749_895).abs() < 1e-15);
    }

    #[test]
    fn b_cos_beta() {
        let mut f = ForcingField::new();
        let z = Mode(vec![0]);
        f.add_term(&z, 1, 1, c(0.5, 0.0));
        f.add_term(&z, -1, 1, c(0.5, 0.0));
        let (bf, bg) = derive_forcing_from_hamiltonian(&f);
        assert!(bf.get(&z).coeff(0).max_diff(&TrigPoly::cos(1)) < 1e-15);
        assert_eq!(bg.get(&z).degree(), 1);
        assert!(bg.get(&z).coeff(0).is_zero());
        assert!(bg.get(&z).coeff(1).max_diff(&TrigPoly::sin(1)) < 1e-15);
    }

    #[test]
    fn zero_hamiltonian() {
        let (a, b) = derive_forcing_from_hamiltonian(&ForcingField::new());
        assert!(a.is_zero() && b.is_zero());
    }

    fn sample_text() -> String {
        spec_to_json(&sample_model())
    }

    #[test]
    fn anisochrony_error() {
        let mut v: serde_json::Value = serde_json::from_str(&sample_text()).unwrap();
        v["omega0_poly"] = serde_json::json!([0.0, 0.0, 1.0]);
        match parse_spec(&v.to_string()) {
            Err(SpecError::Anisochrony(_)) => {}
            other => panic!("expected anisochrony error, got {other:?}"),
        }
    }

    #[test]
    fn normalization_error() {
        let mut s = sample_model();
        s.omega0 = vec![0.1, 1.0];
        assert!(matches!(s.validate(), Err(SpecError::Normalization(_))));
    }

    #[test]
    fn reality_error() {
        let text = r#"{"d": 1, "omega": ["1"], "B0bar": 0.0, "omega0_poly": [0.0, 1.0],
            "F": [{"nu": [1], "m": 0, "b_coeffs": [[1.0, 0.0]]},
                  {"nu": [-1], "m": 0, "b_coeffs": [[2.0, 0.0]]}],
            "G": [],
            "truncation": {"N_modes": 1, "M_beta": 0, "D_B": 0}}"#;
        match parse_spec(text) {
            Err(SpecError::Reality { table, .. }) => assert_eq!(table, "F"),
            other => panic!("expected reality error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_spec(Path::new("/nonexistent/spec.json")).unwrap_err();
        assert_eq!(err.kind(), "io");
        assert!(err.to_string().contains("/nonexistent/spec.json"));
    }

    #[test]
    fn surd_parsing() {
        let g = parse_frequency("(1+sqrt(5))/2").unwrap();
        assert_eq!(g, (1.0 + 5f64.sqrt()) / 2.0);
        assert_eq!(parse_frequency("(1+√5)/2").unwrap(), g);
        assert_eq!(parse_frequency("sqrt(2)").unwrap(), std::f64::consts::SQRT_2);
        assert!((parse_frequency("(3-sqrt(5))/2").unwrap() - (2.0 - g)).abs() < 1e-16);
        assert_eq!(parse_frequency("0.75").unwrap(), 0.75);
        assert!(parse_frequency("pi").is_err());
    }

    #[test]
    fn taylor_shift_matches_eval() {
        let p = BPoly::new(vec![TrigPoly::sin(1), TrigPoly::cos(2), TrigPoly::constant(c(0.3, 0.0))]);
        let delta = 0.37;
        let shifted = p.taylor_at(delta);
        let q = BPoly::new(shifted);
        for &(beta, db) in &[(0.1, 0.2), (1.3, -0.4)] {
            assert!((p.eval(beta, delta + db) - q.eval(beta, db)).norm() < 1e-14);
        }
    }

    fn real_trig(max_m: i32) -> impl Strategy<Value = TrigPoly> {
        prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), (max_m + 1) as usize).prop_map(move |v| {
            let mut t = TrigPoly::zero();
            for (m, (re, im)) in v.into_iter().enumerate() {
                let m = m as i32;
                if m == 0 {
                    t.add_term(0, c(re, 0.0));
                } else {
                    t.add_term(m, c(re, im));
                    t.add_term(-m, c(re, -im));
                }
            }
            t
        })
    }

    fn hamiltonian_field() -> impl Strategy<Value = ForcingField> {
        prop::collection::vec((0i32..2, -2i32..=2, 0usize..3, -1.0f64..1.0, -1.0f64..1.0), 1..8).prop_map(|terms| {
            let mut f = ForcingField::new();
            for (n, m, q, re, im) in terms {
                let nu = Mode(vec![n, 1 - n]);
                f.add_term(&nu, m, q, c(re, im));
                f.add_term(&nu.neg(), -m, q, c(re, -im));
            }
            f
        })
    }

    proptest! {
        #[test]
        fn trig_ops_preserve_reality(a in real_trig(3), b in real_trig(3), beta in 0.0f64..6.3) {
            prop_assert!(a.add(&b).reality_defect() < 1e-13);
            prop_assert!(a.mul(&b).reality_defect() < 1e-13);
            prop_assert!(a.deriv().reality_defect() < 1e-13);
            prop_assert!(a.eval(beta).im.abs() < 1e-13);
        }

        #[test]
        fn hamiltonian_divergence_free(f in hamiltonian_field()) {
            let (bf, bg) = derive_forcing_from_hamiltonian(&f);
            for nu in f.modes() {
                let div = bf.get(nu).deriv_beta().add(&bg.get(nu).deriv_b());
                for t in &div.coeffs {
                    prop_assert!(t.max_coeff() < 1e-13);
                }
            }
        }

        #[test]
        fn save_load_round_trip(f in hamiltonian_field(), w in 0.1f64..3.0) {
            let spec = SystemSpec::from_hamiltonian(
                vec![1.0, w], 0.25, vec![0.0, -1.5, 0.125], f,
                Truncation { n_modes: 2, m_beta: 2, d_b: 2 },
            ).unwrap();
            let back = parse_spec(&spec_to_json(&spec)).unwrap();
            prop_assert_eq!(&back, &spec);
            let mut g = spec.clone();
            g.hamiltonian = None;
            let back = parse_spec(&spec_to_json(&g)).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
