//! Self-energy matrices, resummed propagators and their structural identities.
//!
//! Matrices are indexed [u][e] with β = 0 and B = 1. Self-energy structures
//! are trees whose exit line carries zero momentum and whose single entering
//! line is a stub of momentum x; only the lines on the path from the stub to
//! the exit depend on x.

use std::collections::HashMap;
use std::rc::Rc;

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::lindstedt::{two_param_jacobian, Coef, SeriesError, SolutionSeries};
use crate::model::{binom, c, factorial, BPoly, ForcingField, Mode, SystemSpec, TrigPoly, I};
use crate::smalldiv::ScaleProfile;
use crate::trees::{Comp, EnumOptions, Enumerator, FlatTree, HamEvaluator, Tree, TreeError};

pub type Mat2 = [[Complex64; 2]; 2];

const COMPS: [Comp; 2] = [Comp::Beta, Comp::B];

fn zero2() -> Mat2 {
    [[c(0.0, 0.0); 2]; 2]
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelfEnergyError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error("singular inversion at scale {n}, argument {y:e}: det = {det:e}")]
    Singular { n: i32, y: f64, det: f64 },
    #[error("scale {n} exceeds the profile ({max})")]
    ScaleOutOfRange { n: i32, max: usize },
}

#[derive(Clone, Debug, Serialize)]
pub struct SEMatrix {
    pub value: Mat2,
    /// x-derivative.
    pub deriv: Mat2,
    pub scale: i32,
    pub k_max: usize,
    pub x: f64,
    pub eps: f64,
    pub beta0: f64,
    pub b0: f64,
}

impl SEMatrix {
    /// Largest imaginary part of the value and real part of the derivative.
    pub fn structure_defect(&self) -> (f64, f64) {
        let mut a: f64 = 0.0;
        let mut b: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                a = a.max(self.value[i][j].im.abs());
                b = b.max(self.deriv[i][j].re.abs());
            }
        }
        (a, b)
    }
}

fn f_derivative(p: &BPoly, pb: usize, pq: usize) -> BPoly {
    let mut out = p.clone();
    for _ in 0..pq {
        out = out.deriv_b();
    }
    for _ in 0..pb {
        out = out.deriv_beta();
    }
    out
}

/// Explicit ℳ^{[−1]}: [[ε∂_βF₀, ω₀′(B₀)+ε∂_BF₀], [ε∂_βG₀, ε∂_BG₀]].
pub fn m_minus1(spec: &SystemSpec, eps: f64, beta0: f64, b0: f64) -> SEMatrix {
    let db = b0 - spec.b0bar;
    let zero = Mode::zero(spec.d);
    let f0 = spec.big_f.get(&zero);
    let g0 = spec.big_g.get(&zero);
    let at = |p: &BPoly, a: usize, b: usize| f_derivative(p, a, b).eval(beta0, db) * eps;
    let value = [
        [at(&f0, 1, 0), at(&f0, 0, 1) + spec.omega0_prime_at(db)],
        [at(&g0, 1, 0), at(&g0, 0, 1)],
    ];
    SEMatrix { value, deriv: zero2(), scale: -1, k_max: 0, x: 0.0, eps, beta0, b0 }
}

/// Node factors and stub-free line propagators for plain expansions.
trait Valuer {
    type C: Coef;
    fn node(&mut self, t: &Tree) -> Self::C;
    fn line(&self, t: &Tree) -> Complex64;
    fn memo(&mut self) -> &mut HashMap<*const Tree, Self::C>;
}

fn free_value<V: Valuer>(v: &mut V, t: &Rc<Tree>) -> V::C {
    let key = Rc::as_ptr(t);
    if let Some(x) = v.memo().get(&key) {
        return x.clone();
    }
    let mut val = v.node(t).scale(v.line(t) * t.weight());
    for ch in &t.children {
        let cv = free_value(v, ch);
        val = val.mul(&cv);
    }
    v.memo().insert(key, val.clone());
    val
}

/// Value at x = 0 and Σ over path lines of −1/(ω·ν⁰), which turns the value
/// into its x-derivative.
fn se_value<V: Valuer>(v: &mut V, t: &Rc<Tree>, omega: &[f64], root: bool) -> (V::C, Complex64) {
    let mut val = v.node(t).scale(c(t.weight(), 0.0));
    let mut s = c(0.0, 0.0);
    if !root {
        let a = t.momentum.dot(omega);
        val = val.scale(1.0 / (I * a));
        s -= 1.0 / a;
    }
    for ch in &t.children {
        if ch.has_stub() {
            let (cv, cs) = se_value(v, ch, omega, false);
            val = val.mul(&cv);
            s += cs;
        } else {
            let cv = free_value(v, ch);
            val = val.mul(&cv);
        }
    }
    (val, s)
}

struct HamValuer<'a> {
    ev: HamEvaluator<'a>,
    memo: HashMap<*const Tree, TrigPoly>,
}

impl Valuer for HamValuer<'_> {
    type C = TrigPoly;
    fn node(&mut self, t: &Tree) -> TrigPoly {
        self.ev.node_factor(t)
    }
    fn line(&self, t: &Tree) -> Complex64 {
        self.ev.propagator(t)
    }
    fn memo(&mut self) -> &mut HashMap<*const Tree, TrigPoly> {
        &mut self.memo
    }
}

/// General-framework factors at B₀ = B̄₀ + delta.
struct GenValuer<'a> {
    spec: &'a SystemSpec,
    delta: f64,
    memo: HashMap<*const Tree, TrigPoly>,
}

fn bpoly_at(p: &BPoly, delta: f64) -> TrigPoly {
    let mut out = TrigPoly::zero();
    let mut w = 1.0;
    for q in 0..=p.degree() {
        out.add_assign(&p.coeff(q).scale_re(w));
        w *= delta;
    }
    out
}

fn omega0_coeff(spec: &SystemSpec, q: usize, delta: f64) -> f64 {
    let a = &spec.omega0;
    (q..a.len()).map(|j| binom(j, q) * a[j] * delta.powi((j - q) as i32)).sum()
}

fn gen_table(spec: &SystemSpec, comp: Comp) -> &ForcingField {
    match comp {
        Comp::Beta => &spec.big_f,
        Comp::B => &spec.big_g,
    }
}

impl Valuer for GenValuer<'_> {
    type C = TrigPoly;
    fn node(&mut self, t: &Tree) -> TrigPoly {
        let (p, q) = t.pq();
        if t.order == 0 {
            return TrigPoly::constant(c(omega0_coeff(self.spec, q, self.delta), 0.0));
        }
        let poly = gen_table(self.spec, t.comp).get(&t.mode);
        let mut d = poly;
        for _ in 0..q {
            d = d.deriv_b();
        }
        bpoly_at(&d, self.delta).deriv_n(p).scale_re(1.0 / (factorial(p) * factorial(q)))
    }
    fn line(&self, t: &Tree) -> Complex64 {
        1.0 / (I * self.spec.dot(&t.momentum))
    }
    fn memo(&mut self) -> &mut HashMap<*const Tree, TrigPoly> {
        &mut self.memo
    }
}

/// Truncated power series in ε with trigonometric-polynomial coefficients.
#[derive(Clone, Debug)]
pub struct EpsSeries {
    pub c: Vec<TrigPoly>,
    pub trunc: usize,
}

impl EpsSeries {
    pub fn new(c: Vec<TrigPoly>, trunc: usize) -> EpsSeries {
        let mut s = EpsSeries { c, trunc };
        s.c.truncate(trunc);
        s
    }

    pub fn coeff(&self, k: usize) -> TrigPoly {
        self.c.get(k).cloned().unwrap_or_default()
    }

    /// Multiplication by ε^k.
    pub fn shift(&self, k: usize) -> EpsSeries {
        let mut c = vec![TrigPoly::zero(); k];
        c.extend(self.c.iter().cloned());
        EpsSeries::new(c, self.trunc)
    }

    pub fn sub(&self, o: &EpsSeries) -> EpsSeries {
        let mut a = self.clone();
        a.add_assign(&o.scale(c(-1.0, 0.0)));
        a
    }
}

impl Coef for EpsSeries {
    fn zero() -> Self {
        EpsSeries { c: Vec::new(), trunc: usize::MAX }
    }
    fn one() -> Self {
        EpsSeries { c: vec![TrigPoly::one()], trunc: usize::MAX }
    }
    fn is_zero(&self) -> bool {
        self.c.iter().all(|t| t.is_zero())
    }
    fn add_assign(&mut self, o: &Self) {
        self.trunc = self.trunc.min(o.trunc);
        if self.c.len() < o.c.len() {
            self.c.resize(o.c.len(), TrigPoly::zero());
        }
        for (a, b) in self.c.iter_mut().zip(&o.c) {
            a.add_assign(b);
        }
        self.c.truncate(self.trunc);
    }
    fn mul(&self, o: &Self) -> Self {
        let trunc = self.trunc.min(o.trunc);
        if self.c.is_empty() || o.c.is_empty() {
            return EpsSeries { c: Vec::new(), trunc };
        }
        let n = (self.c.len() + o.c.len() - 1).min(trunc);
        let mut c = vec![TrigPoly::zero(); n];
        for (i, a) in self.c.iter().enumerate() {
            for (j, b) in o.c.iter().enumerate() {
                if i + j < n {
                    c[i + j].add_assign(&a.mul(b));
                }
            }
        }
        EpsSeries { c, trunc }
    }
    fn scale(&self, s: Complex64) -> Self {
        EpsSeries { c: self.c.iter().map(|t| t.scale(s)).collect(), trunc: self.trunc }
    }
}

/// General-framework factors at B₀ = B̄₀ + δ(ε), expanded in ε.
struct EpsValuer<'a> {
    spec: &'a SystemSpec,
    /// Powers δ(ε)^j / j!.
    dpow: Vec<EpsSeries>,
    memo: HashMap<*const Tree, EpsSeries>,
}

impl Valuer for EpsValuer<'_> {
    type C = EpsSeries;
    fn node(&mut self, t: &Tree) -> EpsSeries {
        let (p, q) = t.pq();
        let mut out = EpsSeries::zero();
        for (j, dj) in self.dpow.iter().enumerate() {
            let coef = if t.order == 0 {
                let a = self.spec.omega0.get(q + j).copied().unwrap_or(0.0);
                TrigPoly::constant(c(a * factorial(q + j) / factorial(q), 0.0))
            } else {
                let d = f_derivative(&gen_table(self.spec, t.comp).get(&t.mode), 0, q + j);
                d.coeff(0).deriv_n(p).scale_re(1.0 / (factorial(p) * factorial(q)))
            };
            if !coef.is_zero() {
                out.add_assign(&dj.mul(&EpsSeries::new(vec![coef], usize::MAX)));
            }
        }
        out
    }
    fn line(&self, t: &Tree) -> Complex64 {
        1.0 / (I * self.spec.dot(&t.momentum))
    }
    fn memo(&mut self) -> &mut HashMap<*const Tree, EpsSeries> {
        &mut self.memo
    }
}

pub type PolyMat = [[TrigPoly; 2]; 2];

fn poly_zero2() -> PolyMat {
    [[TrigPoly::zero(), TrigPoly::zero()], [TrigPoly::zero(), TrigPoly::zero()]]
}

/// Order-by-order plain self-energies ℳ⁽ᵏ⁾(0) and ∂ₓℳ⁽ᵏ⁾(0), scale-summed,
/// as functions of β₀.
#[derive(Clone, Debug)]
pub struct PlainSelfEnergy {
    pub value: Vec<PolyMat>,
    pub deriv: Vec<PolyMat>,
    pub structures: Vec<[[usize; 2]; 2]>,
}

fn plain_sums<V: Valuer<C = TrigPoly>>(v: &mut V, en: &mut Enumerator, omega: &[f64], k_max: usize) -> Result<PlainSelfEnergy, TreeError> {
    let mut out = PlainSelfEnergy { value: Vec::new(), deriv: Vec::new(), structures: Vec::new() };
    for k in 0..=k_max {
        let mut val = poly_zero2();
        let mut der = poly_zero2();
        let mut cnt = [[0usize; 2]; 2];
        for u in COMPS {
            for e in COMPS {
                let list = en.self_energy(u, e, k)?;
                cnt[u.index()][e.index()] = list.len();
                for t in list.iter() {
                    let (x, s) = se_value(v, t, omega, true);
                    der[u.index()][e.index()].add_assign(&x.scale(s));
                    val[u.index()][e.index()].add_assign(&x);
                }
            }
        }
        out.value.push(val);
        out.deriv.push(der);
        out.structures.push(cnt);
    }
    Ok(out)
}

/// Non-renormalised Hamiltonian self-energies at B̄₀.
pub fn hamiltonian_self_energy(spec: &SystemSpec, k_max: usize) -> Result<PlainSelfEnergy, SelfEnergyError> {
    let mut en = Enumerator::new(spec, EnumOptions::hamiltonian())?;
    let mut v = HamValuer { ev: HamEvaluator::new(spec)?, memo: HashMap::new() };
    Ok(plain_sums(&mut v, &mut en, &spec.omega, k_max)?)
}

/// Plain general-framework self-energies at B₀ = B̄₀ + delta (self-energy
/// clusters allowed, diagonal propagators).
pub fn general_self_energy(spec: &SystemSpec, delta: f64, k_max: usize) -> Result<PlainSelfEnergy, SelfEnergyError> {
    let mut en = Enumerator::new(spec, EnumOptions::general_plain())?;
    let mut v = GenValuer { spec, delta, memo: HashMap::new() };
    Ok(plain_sums(&mut v, &mut en, &spec.omega, k_max)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct JacobianCheck {
    pub delta: f64,
    /// Per order, max coefficient difference scaled by max(1, ‖reference‖).
    pub defects: Vec<[[f64; 2]; 2]>,
    pub max_defect: f64,
}

/// Self-energy sums at x = 0 against the (β₀, B₀)-Jacobian of the
/// bifurcation functions from the two-parameter recursion.
pub fn jacobian_check(spec: &SystemSpec, delta: f64, k_max: usize) -> Result<JacobianCheck, SelfEnergyError> {
    let m = general_self_energy(spec, delta, k_max)?;
    let jac = two_param_jacobian(spec, delta, k_max)?;
    let mut defects = Vec::new();
    let mut max_defect: f64 = 0.0;
    for k in 0..=k_max {
        let mut d = [[0.0; 2]; 2];
        for u in 0..2 {
            for e in 0..2 {
                let r = &jac[k][u][e];
                d[u][e] = m.value[k][u][e].max_diff(r) / r.max_coeff().max(1.0);
                max_defect = max_defect.max(d[u][e]);
            }
        }
        defects.push(d);
    }
    Ok(JacobianCheck { delta, defects, max_defect })
}

#[derive(Clone, Debug, Serialize)]
pub struct DeterminantCheck {
    pub k0: usize,
    /// δ⁽ᵏ⁾ for k < k₀, as max coefficient over max(1, size of the products).
    pub defects: Vec<f64>,
    pub max_defect: f64,
}

/// Expands det ℳ(0; ε, β₀, B̄₀ + Σ_{h<k₀} ε^h B₀⁽ʰ⁾) in ε through order k₀−1.
pub fn determinant_check(spec: &SystemSpec, series: &SolutionSeries, k0: usize) -> Result<DeterminantCheck, SelfEnergyError> {
    let k0 = k0.max(1);
    let zero = Mode::zero(spec.d);
    let mut dc = vec![TrigPoly::zero()];
    for h in 1..k0 {
        dc.push(series.big_b.get(h).and_then(|f| f.get(&zero)).cloned().unwrap_or_default());
    }
    let delta = EpsSeries::new(dc, k0);
    let mut dpow = vec![EpsSeries::new(vec![TrigPoly::one()], k0)];
    for j in 1..k0 {
        let next = dpow[j - 1].mul(&delta).scale(c(1.0 / j as f64, 0.0));
        dpow.push(next);
    }
    let mut v = EpsValuer { spec, dpow, memo: HashMap::new() };
    let mut en = Enumerator::new(spec, EnumOptions::general_plain())?;
    let mut m: [[EpsSeries; 2]; 2] = Default::default();
    for row in m.iter_mut() {
        for x in row.iter_mut() {
            *x = EpsSeries::new(Vec::new(), k0);
        }
    }
    for k in 0..k0 {
        for u in COMPS {
            for e in COMPS {
                for t in en.self_energy(u, e, k)?.iter() {
                    let (x, _) = se_value(&mut v, t, &spec.omega, true);
                    m[u.index()][e.index()].add_assign(&x.shift(k));
                }
            }
        }
    }
    let a = m[0][0].mul(&m[1][1]);
    let b = m[0][1].mul(&m[1][0]);
    let det = a.sub(&b);
    let defects: Vec<f64> = (0..k0)
        .map(|k| det.coeff(k).max_coeff() / a.coeff(k).max_coeff().max(b.coeff(k).max_coeff()).max(1.0))
        .collect();
    let max_defect = defects.iter().cloned().fold(0.0, f64::max);
    Ok(DeterminantCheck { k0, defects, max_defect })
}

impl Default for EpsSeries {
    fn default() -> Self {
        EpsSeries::zero()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    pub hamiltonian: bool,
    pub k_max: usize,
    /// Γ₀⁽ᵏ⁾ ≡ 0 for 1 ≤ k ≤ k_max.
    pub precondition: bool,
    pub gamma_size: f64,
    pub skipped: bool,
    /// Per identity, defect per order k = 1..=k_max.
    pub column_b: Vec<f64>,
    pub column_beta: Vec<f64>,
    pub diagonal: Vec<f64>,
    pub off_diagonal_deriv: Vec<f64>,
    pub diagonal_deriv: Vec<f64>,
    /// The same column relations with ∂β₀Γ₀ and ∂β₀Φ₀ on the left, which hold
    /// without the precondition.
    pub chain_rule_gamma: Vec<f64>,
    pub chain_rule_phi: Vec<f64>,
    pub max: IdentityMax,
}

#[derive(Clone, Debug, Serialize, Default)]
pub struct IdentityMax {
    pub column_b: f64,
    pub column_beta: f64,
    pub diagonal: f64,
    pub off_diagonal_deriv: f64,
    pub diagonal_deriv: f64,
    pub chain_rule: f64,
}

fn vmax(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, f64::max)
}

/// Cancellation identities of the self-energy at x = 0, order by order.
///
/// Hamiltonian specs use the Hamiltonian expansion at B̄₀; other specs use
/// the plain general expansion at B̄₀, where only the diagonal and
/// derivative identities are evaluated.
pub fn identity_suite(spec: &SystemSpec, series: &SolutionSeries, k_max: usize) -> Result<IdentityReport, SelfEnergyError> {
    let k_max = k_max.min(series.k_max);
    let hamiltonian = spec.is_hamiltonian();
    let gamma_size = (1..=k_max).map(|k| series.gamma0[k].max_coeff()).fold(0.0, f64::max);
    let data = (1..=k_max)
        .flat_map(|k| series.big_b[k].values().chain(series.b[k].values()).map(|t| t.max_coeff()))
        .fold(1.0, f64::max);
    let precondition = gamma_size <= 1e-12 * data;
    let m = if hamiltonian { hamiltonian_self_energy(spec, k_max)? } else { general_self_energy(spec, 0.0, k_max)? };
    let zero = Mode::zero(spec.d);
    let db0: Vec<TrigPoly> = (0..=k_max)
        .map(|k| if k == 0 { TrigPoly::zero() } else { series.big_b_at(k, &zero).deriv() })
        .collect();
    let w1 = spec.omega0_prime();
    let mut r = IdentityReport {
        hamiltonian,
        k_max,
        precondition,
        gamma_size,
        skipped: !precondition,
        column_b: Vec::new(),
        column_beta: Vec::new(),
        diagonal: Vec::new(),
        off_diagonal_deriv: Vec::new(),
        diagonal_deriv: Vec::new(),
        chain_rule_gamma: Vec::new(),
        chain_rule_phi: Vec::new(),
        max: IdentityMax::default(),
    };
    for k in 1..=k_max {
        let v = &m.value;
        let dv = &m.deriv;
        let size = |t: &[&TrigPoly]| t.iter().map(|x| x.max_coeff()).fold(1.0, f64::max);
        let diag = v[k][0][0].add(&v[k][1][1]);
        r.diagonal.push(diag.max_coeff() / size(&[&v[k][0][0], &v[k][1][1]]));
        let off = dv[k][1][0].max_coeff().max(dv[k][0][1].max_coeff());
        r.off_diagonal_deriv.push(off / size(&[&dv[k][0][0], &dv[k][1][1]]));
        r.diagonal_deriv.push(dv[k][0][0].max_diff(&dv[k][1][1]) / size(&[&dv[k][0][0], &dv[k][1][1]]));
        if hamiltonian {
            let mut col_b = v[k][1][0].clone();
            let mut col_beta = v[k][0][0].clone();
            for k1 in 0..=k {
                col_b.add_assign(&v[k1][1][1].mul(&db0[k - k1]));
                col_beta.add_assign(&v[k1][0][1].mul(&db0[k - k1]));
            }
            let sb = size(&[&v[k][1][0], &col_b]);
            let sbeta = size(&[&v[k][0][0], &col_beta]);
            r.column_b.push(col_b.max_coeff() / sb);
            r.column_beta.push(col_beta.max_coeff() / sbeta);
            let dg = series.gamma0[k].deriv();
            let dphi = series.phi0[k].add(&series.b0(k).scale_re(w1)).deriv();
            r.chain_rule_gamma.push(col_b.max_diff(&dg) / sb);
            r.chain_rule_phi.push(col_beta.max_diff(&dphi) / sbeta);
        }
    }
    r.max = IdentityMax {
        column_b: vmax(&r.column_b),
        column_beta: vmax(&r.column_beta),
        diagonal: vmax(&r.diagonal),
        off_diagonal_deriv: vmax(&r.off_diagonal_deriv),
        diagonal_deriv: vmax(&r.diagonal_deriv),
        chain_rule: vmax(&r.chain_rule_gamma).max(vmax(&r.chain_rule_phi)),
    };
    Ok(r)
}

/// Complex number paired with its x-derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Dual {
    v: Complex64,
    d: Complex64,
}

impl Dual {
    fn new(v: Complex64, d: Complex64) -> Dual {
        Dual { v, d }
    }
    fn zero() -> Dual {
        Dual::new(c(0.0, 0.0), c(0.0, 0.0))
    }
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.v * o.d + self.d * o.v)
    }
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
    fn scale(self, s: Complex64) -> Dual {
        Dual::new(self.v * s, self.d * s)
    }
}

type DMat = [[Dual; 2]; 2];

fn dzero() -> DMat {
    [[Dual::zero(); 2]; 2]
}

struct LineInfo {
    e: usize,
    u: usize,
    momentum: Mode,
    path: bool,
}

/// Connected node set of a structure that would be a self-energy cluster if
/// its internal lines were all below its external lines.
struct SubCandidate {
    internal: Vec<usize>,
    external: Vec<usize>,
}

const EXTERNAL: usize = usize::MAX;

struct Structure {
    u: usize,
    e: usize,
    order: usize,
    /// Node factors times the class weight, without the ε power.
    factor: Complex64,
    lines: Vec<LineInfo>,
    subs: Vec<SubCandidate>,
}

fn numeric_node(spec: &SystemSpec, t: &Tree, beta0: f64, db: f64) -> Complex64 {
    let (p, q) = t.pq();
    if t.order == 0 {
        return c(omega0_coeff(spec, q, db), 0.0);
    }
    let d = f_derivative(&gen_table(spec, t.comp).get(&t.mode), p, q);
    d.eval(beta0, db) / (factorial(p) * factorial(q))
}

fn structure_from(t: &Rc<Tree>, spec: &SystemSpec, beta0: f64, db: f64, u: usize, e: usize) -> Structure {
    let flat = FlatTree::from_tree(t);
    let mut factor = c(1.0, 0.0);
    fn walk(t: &Tree, spec: &SystemSpec, beta0: f64, db: f64, f: &mut Complex64) {
        *f *= numeric_node(spec, t, beta0, db) * t.weight();
        for ch in &t.children {
            walk(ch, spec, beta0, db, f);
        }
    }
    walk(t, spec, beta0, db, &mut factor);
    let n = flat.len();
    let on_path: Vec<bool> = (0..n).map(|v| flat.subtree(v).iter().any(|&w| flat.nodes[w].stub.is_some())).collect();
    let lines: Vec<LineInfo> = (1..n)
        .map(|v| {
            let node = &flat.nodes[v];
            let (e, u) = match node.line {
                crate::trees::LineLabel::Gen { e, u } => (e.index(), u.index()),
                _ => unreachable!("general framework only"),
            };
            LineInfo { e, u, momentum: node.momentum.clone(), path: on_path[v] }
        })
        .collect();
    let mut subs = Vec::new();
    let stub_node = flat.nodes.iter().position(|x| x.stub.is_some());
    for mask in 1u32..(1 << n) {
        let set: Vec<usize> = (0..n).filter(|&v| mask & (1 << v) != 0).collect();
        if set.len() < 2 || set.len() == n {
            continue;
        }
        let inside = |v: usize| mask & (1 << v) != 0;
        let tops: Vec<usize> = set.iter().copied().filter(|&v| flat.nodes[v].parent.is_none_or(|p| !inside(p))).collect();
        if tops.len() != 1 {
            continue;
        }
        let top = tops[0];
        let mut entering: Vec<usize> = Vec::new();
        for &v in &set {
            for &ch in &flat.nodes[v].children {
                if !inside(ch) {
                    entering.push(ch - 1);
                }
            }
            if Some(v) == stub_node {
                entering.push(EXTERNAL);
            }
        }
        if entering.len() != 1 {
            continue;
        }
        let sum = set.iter().fold(Mode::zero(spec.d), |a, &v| a.add(&flat.nodes[v].mode));
        if !sum.is_zero() {
            continue;
        }
        let internal: Vec<usize> = set.iter().copied().filter(|&v| v != top).map(|v| v - 1).collect();
        let exit = if top == 0 { EXTERNAL } else { top - 1 };
        subs.push(SubCandidate { internal, external: vec![exit, entering[0]] });
    }
    Structure { u, e, order: t.total_order(), factor, lines, subs }
}

/// Parameters of a multiscale evaluation. With `regularisation` set, B₀ is
/// B̄₀ + Σ_{h<k₀} ε^h jet[h−1] + ε^{k₀} b0_prime and `b0` is ignored.
#[derive(Clone, Debug, Serialize)]
pub struct MultiscaleConfig {
    pub eps: f64,
    pub beta0: f64,
    pub b0: f64,
    pub k_max: usize,
    pub regularisation: Option<Regularisation>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Regularisation {
    pub k0: usize,
    pub b0_prime: f64,
    /// B₀⁽ʰ⁾(β₀) for h = 1..k₀−1.
    pub jet: Vec<f64>,
}

impl MultiscaleConfig {
    pub fn effective_b0(&self, b0bar: f64) -> f64 {
        match &self.regularisation {
            None => self.b0,
            Some(r) => {
                let mut b = b0bar;
                for (h, a) in r.jet.iter().enumerate() {
                    b += self.eps.powi(h as i32 + 1) * a;
                }
                b + self.eps.powi(r.k0 as i32) * r.b0_prime
            }
        }
    }
}

/// Renormalised multiscale self-energies ℳ^{[n]} and propagators G^{[n]}.
pub struct Multiscale<'a> {
    spec: &'a SystemSpec,
    profile: &'a ScaleProfile,
    cfg: MultiscaleConfig,
    b0: f64,
    structs: Vec<Structure>,
    m1: Mat2,
    pub structure_count: usize,
}

/// Memo tables and diagnostics for one value of x.
struct Eval {
    x: f64,
    memo_m: HashMap<(i32, Mode, bool), DMat>,
    memo_g: HashMap<(i32, Mode, bool), DMat>,
    xi: HashMap<i32, f64>,
    singular: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfEnergyResult {
    /// ℳ^{[n]}(x) = Σ_{q ≤ n} χ_q(x) M^{[q]}(x).
    pub accumulated: SEMatrix,
    /// M^{[n]}(x).
    pub level: SEMatrix,
    /// Inversions with |det| < y²/4.
    pub near_singular: usize,
}

impl<'a> Multiscale<'a> {
    pub fn new(spec: &'a SystemSpec, profile: &'a ScaleProfile, cfg: MultiscaleConfig) -> Result<Multiscale<'a>, SelfEnergyError> {
        let b0 = cfg.effective_b0(spec.b0bar);
        let db = b0 - spec.b0bar;
        let mut en = Enumerator::new(spec, EnumOptions::general())?;
        let mut structs = Vec::new();
        for k in 1..=cfg.k_max {
            for u in COMPS {
                for e in COMPS {
                    for t in en.self_energy(u, e, k)?.iter() {
                        structs.push(structure_from(t, spec, cfg.beta0, db, u.index(), e.index()));
                    }
                }
            }
        }
        let m1 = m_minus1(spec, cfg.eps, cfg.beta0, b0).value;
        let structure_count = structs.len();
        Ok(Multiscale { spec, profile, cfg, b0, structs, m1, structure_count })
    }

    pub fn b0(&self) -> f64 {
        self.b0
    }

    pub fn config(&self) -> &MultiscaleConfig {
        &self.cfg
    }

    fn check_scale(&self, n: i32) -> Result<(), SelfEnergyError> {
        if n > self.profile.n_profile as i32 - 1 {
            return Err(SelfEnergyError::ScaleOutOfRange { n, max: self.profile.n_profile });
        }
        Ok(())
    }

    fn arg(&self, ev: &Eval, mu: &Mode, shifted: bool) -> f64 {
        self.spec.dot(mu) + if shifted { ev.x } else { 0.0 }
    }

    /// M^{[q]} at ω·μ (+ x).
    fn level(&self, ev: &mut Eval, q: i32, mu: &Mode, shifted: bool) -> Result<DMat, SelfEnergyError> {
        if q < 0 {
            let mut m = dzero();
            for i in 0..2 {
                for j in 0..2 {
                    m[i][j] = Dual::new(self.m1[i][j], c(0.0, 0.0));
                }
            }
            return Ok(m);
        }
        let key = (q, mu.clone(), shifted);
        if let Some(m) = ev.memo_m.get(&key) {
            return Ok(*m);
        }
        let mut out = dzero();
        for s in &self.structs {
            // candidate scales and propagator entries per line
            let mut options: Vec<Vec<(i32, Dual)>> = Vec::with_capacity(s.lines.len());
            let mut dead = false;
            for l in &s.lines {
                let (m, sh) = if l.path { (l.momentum.add(mu), shifted) } else { (l.momentum.clone(), false) };
                let mut opts = Vec::new();
                for n in 0..=q {
                    let g = self.propagator_d(ev, n, &m, sh)?;
                    let entry = g[l.e][l.u];
                    if entry != Dual::zero() {
                        opts.push((n, entry));
                    }
                }
                if opts.is_empty() {
                    dead = true;
                    break;
                }
                options.push(opts);
            }
            if dead {
                continue;
            }
            let mut acc = Dual::zero();
            let mut scales = vec![0i32; s.lines.len()];
            fn dfs(
                s: &Structure,
                options: &[Vec<(i32, Dual)>],
                i: usize,
                q: i32,
                prod: Dual,
                scales: &mut Vec<i32>,
                acc: &mut Dual,
            ) {
                if i == options.len() {
                    if !scales.contains(&q) {
                        return;
                    }
                    let get = |l: usize| if l == EXTERNAL { i32::MAX } else { scales[l] };
                    for sub in &s.subs {
                        let inner = sub.internal.iter().map(|&l| get(l)).max().unwrap();
                        let outer = sub.external.iter().map(|&l| get(l)).min().unwrap();
                        if inner < outer {
                            return;
                        }
                    }
                    *acc = acc.add(prod);
                    return;
                }
                for &(n, g) in &options[i] {
                    scales[i] = n;
                    dfs(s, options, i + 1, q, prod.mul(g), scales, acc);
                }
            }
            dfs(s, &options, 0, q, Dual::new(c(1.0, 0.0), c(0.0, 0.0)), &mut scales, &mut acc);
            let w = s.factor * self.cfg.eps.powi(s.order as i32);
            out[s.u][s.e] = out[s.u][s.e].add(acc.scale(w));
        }
        ev.memo_m.insert(key, out);
        Ok(out)
    }

    /// ℳ^{[n]} at ω·μ (+ x).
    fn accumulated(&self, ev: &mut Eval, n: i32, mu: &Mode, shifted: bool) -> Result<DMat, SelfEnergyError> {
        let y = self.arg(ev, mu, shifted);
        let mut out = self.level(ev, -1, mu, shifted)?;
        for q in 0..=n {
            let (ch, dch) = self.profile.chi_n_d(q, y);
            if ch == 0.0 && dch == 0.0 {
                continue;
            }
            let dch = if shifted { dch } else { 0.0 };
            let m = self.level(ev, q, mu, shifted)?;
            for i in 0..2 {
                for j in 0..2 {
                    let t = Dual::new(m[i][j].v * ch, m[i][j].d * ch + m[i][j].v * dch);
                    out[i][j] = out[i][j].add(t);
                }
            }
        }
        Ok(out)
    }

    fn xi_factor(&self, ev: &mut Eval, n: i32) -> Result<f64, SelfEnergyError> {
        let Some(reg) = &self.cfg.regularisation else { return Ok(1.0) };
        if n < 0 {
            return Ok(1.0);
        }
        if let Some(&v) = ev.xi.get(&n) {
            return Ok(v);
        }
        let zero = Mode::zero(self.spec.d);
        let m = self.accumulated(ev, n, &zero, false)?;
        let det = (m[0][0].v * m[1][1].v - m[0][1].v * m[1][0].v).re;
        let jet = if reg.k0 <= 1 { 0.0 } else { self.det_jet(n, reg)? };
        let v = self.profile.xi_n(n, det - jet);
        ev.xi.insert(n, v);
        Ok(v)
    }

    /// Σ_{k<k₀} ε^k [det ℳ^{[n]}(0)]⁽ᵏ⁾ at fixed (β₀, B₀′), by Chebyshev
    /// interpolation in ε.
    fn det_jet(&self, n: i32, reg: &Regularisation) -> Result<f64, SelfEnergyError> {
        let npts = reg.k0 + 4;
        let r = self.cfg.eps.abs().clamp(1e-3, 2e-2);
        let nodes: Vec<f64> = (0..npts)
            .map(|j| r * (std::f64::consts::PI * (j as f64 + 0.5) / npts as f64).cos())
            .collect();
        let mut vals = Vec::with_capacity(npts);
        for &e in &nodes {
            let mut cfg = self.cfg.clone();
            cfg.eps = e;
            let ms = Multiscale::new(self.spec, self.profile, cfg)?;
            let mut ev = Eval::new(0.0);
            let zero = Mode::zero(self.spec.d);
            let m = ms.accumulated(&mut ev, n, &zero, false)?;
            vals.push((m[0][0].v * m[1][1].v - m[0][1].v * m[1][0].v).re);
        }
        // monomial coefficients of the interpolant
        let a = nalgebra::DMatrix::from_fn(npts, npts, |i, j| nodes[i].powi(j as i32));
        let b = nalgebra::DVector::from_vec(vals);
        let coef = a.lu().solve(&b).unwrap_or_else(|| nalgebra::DVector::zeros(npts));
        Ok((0..reg.k0).map(|k| coef[k] * self.cfg.eps.powi(k as i32)).sum())
    }

    /// G^{[n]} at ω·μ (+ x).
    fn propagator_d(&self, ev: &mut Eval, n: i32, mu: &Mode, shifted: bool) -> Result<DMat, SelfEnergyError> {
        let key = (n, mu.clone(), shifted);
        if let Some(g) = ev.memo_g.get(&key) {
            return Ok(*g);
        }
        let y = self.arg(ev, mu, shifted);
        let (psi, dpsi) = self.profile.big_psi_n_d(n, y);
        let dpsi = if shifted { dpsi } else { 0.0 };
        let out = if psi == 0.0 && dpsi == 0.0 {
            dzero()
        } else {
            let xi = self.xi_factor(ev, n - 1)?;
            let mut m = self.accumulated(ev, n - 1, mu, shifted)?;
            for row in m.iter_mut() {
                for x in row.iter_mut() {
                    *x = x.scale(c(xi, 0.0));
                }
            }
            let dy = if shifted { 1.0 } else { 0.0 };
            let a = [
                [Dual::new(I * y - m[0][0].v, I * dy - m[0][0].d), Dual::new(-m[0][1].v, -m[0][1].d)],
                [Dual::new(-m[1][0].v, -m[1][0].d), Dual::new(I * y - m[1][1].v, I * dy - m[1][1].d)],
            ];
            let det = a[0][0].mul(a[1][1]).add(a[0][1].mul(a[1][0]).scale(c(-1.0, 0.0)));
            if det.v.norm() == 0.0 || !det.v.is_finite() {
                return Err(SelfEnergyError::Singular { n, y, det: det.v.norm() });
            }
            if det.v.norm() < y * y / 4.0 {
                ev.singular += 1;
            }
            // inverse = adj / det
            let inv_det = Dual::new(1.0 / det.v, -det.d / (det.v * det.v));
            let adj = [[a[1][1], a[0][1].scale(c(-1.0, 0.0))], [a[1][0].scale(c(-1.0, 0.0)), a[0][0]]];
            let p = Dual::new(c(psi, 0.0), c(dpsi, 0.0));
            let mut g = dzero();
            for i in 0..2 {
                for j in 0..2 {
                    g[i][j] = adj[i][j].mul(inv_det).mul(p);
                }
            }
            g
        };
        ev.memo_g.insert(key, out);
        Ok(out)
    }

    fn to_sem(&self, m: DMat, n: i32, x: f64) -> SEMatrix {
        let mut value = zero2();
        let mut deriv = zero2();
        for i in 0..2 {
            for j in 0..2 {
                value[i][j] = m[i][j].v;
                deriv[i][j] = m[i][j].d;
            }
        }
        SEMatrix { value, deriv, scale: n, k_max: self.cfg.k_max, x, eps: self.cfg.eps, beta0: self.cfg.beta0, b0: self.b0 }
    }

    /// ℳ^{[n]}(x) and M^{[n]}(x).
    pub fn self_energy(&self, n: i32, x: f64) -> Result<SelfEnergyResult, SelfEnergyError> {
        self.check_scale(n)?;
        let mut ev = Eval::new(x);
        let zero = Mode::zero(self.spec.d);
        let acc = self.accumulated(&mut ev, n, &zero, true)?;
        let lev = self.level(&mut ev, n, &zero, true)?;
        Ok(SelfEnergyResult { accumulated: self.to_sem(acc, n, x), level: self.to_sem(lev, n, x), near_singular: ev.singular })
    }

    /// G^{[n]}(x) and its x-derivative.
    pub fn propagator(&self, n: i32, x: f64) -> Result<(Mat2, Mat2), SelfEnergyError> {
        self.check_scale(n - 1)?;
        let mut ev = Eval::new(x);
        let g = self.propagator_d(&mut ev, n, &Mode::zero(self.spec.d), true)?;
        let s = self.to_sem(g, n, x);
        Ok((s.value, s.deriv))
    }

    /// ξ_{n−1}(Δ_{n−1}) as used by the regularised G^{[n]}; 1 when unregularised.
    pub fn xi_value(&self, n: i32) -> Result<f64, SelfEnergyError> {
        let mut ev = Eval::new(0.0);
        self.xi_factor(&mut ev, n - 1)
    }
}

impl Eval {
    fn new(x: f64) -> Eval {
        Eval { x, memo_m: HashMap::new(), memo_g: HashMap::new(), xi: HashMap::new(), singular: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SymmetryReport {
    pub n: i32,
    pub samples: usize,
    /// max |ℳ(−x) − conj ℳ(x)| over max(1, |ℳ|), also for the derivative.
    pub conjugation: f64,
    pub real_at_zero: f64,
    pub imaginary_derivative_at_zero: f64,
    pub near_singular: usize,
}

fn mat_norm(m: &Mat2) -> f64 {
    m.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Conjugation symmetry at the sample points and the real/imaginary
/// structure at x = 0.
pub fn symmetry_sweep(ms: &Multiscale, n: i32, xs: &[f64]) -> Result<SymmetryReport, SelfEnergyError> {
    let mut conj: f64 = 0.0;
    let mut sing = 0;
    for &x in xs {
        let a = ms.self_energy(n, x)?;
        let b = ms.self_energy(n, -x)?;
        sing += a.near_singular + b.near_singular;
        let mut dv: f64 = 0.0;
        let mut dd: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                dv = dv.max((b.accumulated.value[i][j] - a.accumulated.value[i][j].conj()).norm());
                // d/dx of conj ℳ(−x) is −conj ℳ′(−x)
                dd = dd.max((b.accumulated.deriv[i][j] + a.accumulated.deriv[i][j].conj()).norm());
            }
        }
        let sv = mat_norm(&a.accumulated.value).max(1.0);
        let sd = mat_norm(&a.accumulated.deriv).max(1.0);
        conj = conj.max(dv / sv).max(dd / sd);
    }
    let z = ms.self_energy(n, 0.0)?;
    let (re, im) = z.accumulated.structure_defect();
    Ok(SymmetryReport {
        n,
        samples: xs.len(),
        conjugation: conj,
        real_at_zero: re / mat_norm(&z.accumulated.value).max(1.0),
        imaginary_derivative_at_zero: im / mat_norm(&z.accumulated.deriv).max(1.0),
        near_singular: sing,
    })
}

/// Sample points spread over the supports of scales 0..=n.
pub fn sample_points(profile: &ScaleProfile, n: i32, count: usize) -> Vec<f64> {
    let lo = profile.alpha_m(n.max(0) as usize) / 32.0;
    let hi = 1.5;
    (0..count)
        .map(|i| {
            let t = i as f64 / (count - 1).max(1) as f64;
            lo * (hi / lo).powf(t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindstedt::{compute_series, melnikov, tests::random_spec, RecursionOptions};
    use crate::model::{sample_model, Truncation};
    use crate::smalldiv::build_profile;
    use crate::trees::near_resonant_model;

    fn golden() -> Vec<f64> {
        vec![1.0, (1.0 + 5f64.sqrt()) / 2.0]
    }

    #[test]
    fn minus_one_on_sample_model() {
        let spec = sample_model();
        for (eps, b) in [(0.1, 0.7), (0.0, -1.2)] {
            let m = m_minus1(&spec, eps, b, 0.0).value;
            let want = [[0.0, 1.0], [eps * b.cos(), 0.0]];
            for i in 0..2 {
                for j in 0..2 {
                    assert!((m[i][j] - c(want[i][j], 0.0)).norm() < 1e-15);
                }
            }
            let det = (m[0][0] * m[1][1] - m[0][1] * m[1][0]).re;
            assert!((det + eps * b.cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn low_orders_of_hamiltonian_self_energy() {
        let spec = sample_model();
        let m = hamiltonian_self_energy(&spec, 1).unwrap();
        let one = TrigPoly::one();
        assert!(m.value[0][0][1].max_diff(&one) < 1e-15);
        assert!(m.value[0][0][0].is_zero() && m.value[0][1][0].is_zero() && m.value[0][1][1].is_zero());
        let f0 = spec.hamiltonian.as_ref().unwrap().get(&Mode::zero(2));
        let want = f0.deriv_b().deriv_beta().coeff(0);
        assert!(m.value[1][0][0].max_diff(&want) < 1e-15);
        assert!(m.value[1][1][1].max_diff(&want.scale_re(-1.0)) < 1e-15);
    }

    /// At first order only the single zero-mode node with the stub attached
    /// contributes; the two-node pairs need a path line of zero momentum.
    #[test]
    fn first_order_general_self_energy() {
        let spec = random_spec(3);
        let m = general_self_energy(&spec, 0.0, 1).unwrap();
        let z = Mode::zero(spec.d);
        let f0 = spec.big_f.get(&z);
        let g0 = spec.big_g.get(&z);
        let w = [[f0.deriv_beta().coeff(0), f0.coeff(1)], [g0.deriv_beta().coeff(0), g0.coeff(1)]];
        for u in 0..2 {
            for e in 0..2 {
                assert!(m.value[1][u][e].max_diff(&w[u][e]) < 1e-13, "{u}{e}");
            }
        }
    }

    #[test]
    fn jacobian_identity_holds() {
        for (spec, delta) in [(sample_model(), 0.0), (sample_model(), 0.03), (random_spec(5), -0.02), (near_resonant_model(), 0.0)] {
            let r = jacobian_check(&spec, delta, 3).unwrap();
            assert!(r.max_defect < 1e-10, "{:?}", r.defects);
        }
    }

    #[test]
    fn determinant_vanishes_below_k0() {
        // Γ⁽¹⁾₀ ≡ 0 and Γ⁽²⁾₀ ≠ 0 for this model
        let mut f = ForcingField::new();
        for s in [1, -1] {
            for m in [1, -1] {
                f.add_term(&Mode(vec![s, 0]), m, 0, c(0.25, 0.0));
            }
        }
        f.add_term(&Mode(vec![0, 1]), 0, 1, c(0.1, 0.0));
        f.add_term(&Mode(vec![0, -1]), 0, 1, c(0.1, 0.0));
        let spec = SystemSpec::from_hamiltonian(golden(), 0.0, vec![0.0, 1.0, 0.4], f, Truncation { n_modes: 2, m_beta: 1, d_b: 1 }).unwrap();
        let s = compute_series(&spec, 3, &RecursionOptions::default()).unwrap();
        let rep = melnikov(&spec, &s);
        assert_eq!(rep.k0, Some(2));
        let d = determinant_check(&spec, &s, 2).unwrap();
        assert!(d.max_defect < 1e-10, "{:?}", d.defects);
        // one order further the nonzero Γ⁽²⁾₀ shows up
        let d3 = determinant_check(&spec, &s, 3).unwrap();
        assert!(d3.defects[2] > 1e-6, "{:?}", d3.defects);
    }

    #[test]
    fn hamiltonian_identities_on_generic_models() {
        for spec in [sample_model(), random_spec(1), random_spec(2)] {
            let s = compute_series(&spec, 3, &RecursionOptions::default()).unwrap();
            let r = identity_suite(&spec, &s, 3).unwrap();
            assert!(r.max.diagonal < 1e-11, "{r:?}");
            assert!(r.max.off_diagonal_deriv < 1e-11, "{r:?}");
            assert!(r.max.diagonal_deriv < 1e-11, "{r:?}");
            assert!(r.max.chain_rule < 1e-11, "{r:?}");
        }
    }

    /// Model with β-independent f and a non-Hamiltonian control.
    pub(crate) fn beta_free_model() -> SystemSpec {
        let mut f = ForcingField::new();
        let z = Mode(vec![0, 0]);
        f.add_term(&z, 0, 2, c(0.3, 0.0));
        for (nu, a) in [(Mode(vec![1, 0]), c(0.2, 0.1)), (Mode(vec![0, 1]), c(0.15, 0.0))] {
            f.add_term(&nu, 0, 1, a);
            f.add_term(&nu.neg(), 0, 1, a.conj());
            f.add_term(&nu, 0, 2, a * 0.5);
            f.add_term(&nu.neg(), 0, 2, a.conj() * 0.5);
        }
        SystemSpec::from_hamiltonian(golden(), 0.0, vec![0.0, 1.0, 0.3], f, Truncation { n_modes: 1, m_beta: 0, d_b: 2 }).unwrap()
    }

    pub(crate) fn non_hamiltonian_control() -> SystemSpec {
        let z = Mode(vec![0, 0]);
        let mut g = ForcingField::new();
        g.add_term(&z, 0, 1, c(0.5, 0.0));
        SystemSpec::from_forcing(golden(), 0.0, vec![0.0, 1.0], ForcingField::new(), g, Truncation { n_modes: 0, m_beta: 0, d_b: 1 })
            .unwrap()
    }

    #[test]
    fn cancellations_on_beta_free_model() {
        let spec = beta_free_model();
        let s = compute_series(&spec, 3, &RecursionOptions::default()).unwrap();
        let r = identity_suite(&spec, &s, 3).unwrap();
        assert!(r.precondition && !r.skipped);
        for v in [r.max.column_b, r.max.column_beta, r.max.diagonal, r.max.off_diagonal_deriv, r.max.diagonal_deriv] {
            assert!(v < 1e-11, "{r:?}");
        }
    }

    #[test]
    fn negative_control_breaks_diagonal_identity() {
        let spec = non_hamiltonian_control();
        let s = compute_series(&spec, 2, &RecursionOptions::default()).unwrap();
        let r = identity_suite(&spec, &s, 2).unwrap();
        assert!(r.precondition);
        assert!(r.max.diagonal > 1e-3, "{r:?}");
    }

    #[test]
    fn precondition_violation_is_reported() {
        let spec = sample_model();
        let s = compute_series(&spec, 2, &RecursionOptions::default()).unwrap();
        let r = identity_suite(&spec, &s, 2).unwrap();
        assert!(!r.precondition && r.skipped);
    }

    fn cfg(eps: f64, b0: f64) -> MultiscaleConfig {
        MultiscaleConfig { eps, beta0: 0.3, b0, k_max: 3, regularisation: None }
    }

    #[test]
    fn zero_eps_leaves_only_the_explicit_part() {
        let spec = near_resonant_model();
        let profile = build_profile(&golden(), 8).unwrap();
        let ms = Multiscale::new(&spec, &profile, cfg(0.0, 0.01)).unwrap();
        let m1 = m_minus1(&spec, 0.0, 0.3, 0.01);
        for x in [0.5, 0.05, 0.004] {
            let r = ms.self_energy(3, x).unwrap();
            assert_eq!(r.accumulated.value, m1.value);
            assert_eq!(mat_norm(&r.level.value), 0.0);
        }
    }

    #[test]
    fn propagator_outside_support_vanishes_and_inverts_at_zero_eps() {
        let spec = sample_model();
        let profile = build_profile(&golden(), 8).unwrap();
        let ms = Multiscale::new(&spec, &profile, cfg(0.0, 0.0)).unwrap();
        let (g, _) = ms.propagator(2, 1.0).unwrap();
        assert_eq!(mat_norm(&g), 0.0);
        let x = 0.9;
        let psi = profile.big_psi_n(0, x);
        assert!(psi > 0.0);
        let (g, _) = ms.propagator(0, x).unwrap();
        let ix = I * x;
        let want = [[psi / ix, psi / (ix * ix)], [c(0.0, 0.0), psi / ix]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((g[i][j] - want[i][j]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let spec = near_resonant_model();
        let profile = build_profile(&golden(), 8).unwrap();
        let ms = Multiscale::new(&spec, &profile, cfg(0.01, 0.01)).unwrap();
        for x in [0.7, 0.12, 0.03] {
            let h = 1e-6;
            let a = ms.self_energy(2, x + h).unwrap().accumulated.value;
            let b = ms.self_energy(2, x - h).unwrap().accumulated.value;
            let d = ms.self_energy(2, x).unwrap().accumulated.deriv;
            for i in 0..2 {
                for j in 0..2 {
                    let fd = (a[i][j] - b[i][j]) / (2.0 * h);
                    assert!((fd - d[i][j]).norm() < 1e-5 * (1.0 + d[i][j].norm()), "{x} {i}{j}");
                }
            }
        }
    }

    #[test]
    fn conjugation_symmetry_and_structure() {
        let profile = build_profile(&golden(), 8).unwrap();
        for spec in [sample_model(), near_resonant_model()] {
            let ms = Multiscale::new(&spec, &profile, cfg(0.01, spec.b0bar + 0.01)).unwrap();
            assert!(ms.structure_count > 0);
            for n in 0..=3 {
                let xs = sample_points(&profile, n, 50);
                let r = symmetry_sweep(&ms, n, &xs).unwrap();
                assert!(r.conjugation < 1e-11, "{r:?}");
                assert!(r.real_at_zero < 1e-11, "{r:?}");
                assert!(r.imaginary_derivative_at_zero < 1e-11, "{r:?}");
            }
        }
    }

    #[test]
    fn higher_scales_contribute_on_near_resonant_model() {
        let spec = near_resonant_model();
        let profile = build_profile(&golden(), 8).unwrap();
        let ms = Multiscale::new(&spec, &profile, cfg(0.01, 0.01)).unwrap();
        let x = profile.alpha_m(1) / 20.0;
        let r = ms.self_energy(1, x).unwrap();
        assert!(mat_norm(&r.level.value) > 0.0);
    }

    #[test]
    fn regularised_matches_plain_on_plateau() {
        let spec = near_resonant_model();
        let profile = build_profile(&golden(), 8).unwrap();
        let reg = MultiscaleConfig {
            eps: 0.01,
            beta0: 0.3,
            b0: f64::NAN,
            k_max: 3,
            regularisation: Some(Regularisation { k0: 1, b0_prime: 1.0, jet: vec![] }),
        };
        let ms_r = Multiscale::new(&spec, &profile, reg).unwrap();
        let ms_p = Multiscale::new(&spec, &profile, cfg(0.01, ms_r.b0())).unwrap();
        assert_eq!(ms_r.b0(), spec.b0bar + 0.01);
        for n in 1..=3 {
            assert_eq!(ms_r.xi_value(n).unwrap(), 1.0);
        }
        for x in sample_points(&profile, 3, 20) {
            for n in 0..=3 {
                assert_eq!(ms_r.propagator(n, x).unwrap(), ms_p.propagator(n, x).unwrap());
            }
        }
    }

    #[test]
    fn regularisation_cuts_off_large_determinant() {
        let spec = sample_model();
        let profile = build_profile(&golden(), 8).unwrap();
        let reg = MultiscaleConfig {
            eps: 0.5,
            beta0: std::f64::consts::PI,
            b0: 0.0,
            k_max: 1,
            regularisation: Some(Regularisation { k0: 1, b0_prime: 0.0, jet: vec![] }),
        };
        let ms = Multiscale::new(&spec, &profile, reg).unwrap();
        // det ℳ^{[0]}(0) = −ε cos β₀ = ε is far outside the ξ plateau at scale 0
        assert_eq!(ms.xi_value(1).unwrap(), 0.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn reflection_conjugates(x in 0.0f64..1.5, beta0 in -3.0f64..3.0, eps in -0.02f64..0.02, n in 0i32..3) {
            let profile = build_profile(&golden(), 6).unwrap();
            let spec = sample_model();
            let ms = Multiscale::new(&spec, &profile, MultiscaleConfig { eps, beta0, b0: 0.01, k_max: 2, regularisation: None }).unwrap();
            let p = ms.self_energy(n, x).unwrap().accumulated;
            let m = ms.self_energy(n, -x).unwrap().accumulated;
            let scale = 1.0 + mat_norm(&p.value);
            for u in 0..2 {
                for e in 0..2 {
                    proptest::prop_assert!((m.value[u][e] - p.value[u][e].conj()).norm() < 1e-11 * scale);
                }
            }
        }
    }
}
