//! Small divisors: α_n(ω), the scale sequences m_n, p_n, Bryuno partial sums
//! and the C∞ cutoff family χ_n, ψ_n, Ψ_n, ξ_n.

use thiserror::Error;

use crate::model::Mode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmallDivError {
    #[error("resonance: |omega.nu| = {value:e} at nu = {nu:?}")]
    Resonance { nu: Mode, value: f64 },
    #[error("lattice search budget exceeded: radius 2^{n} above 2^{max_exp}")]
    Budget { n: usize, max_exp: usize },
    #[error("lattice scan of {rows} rows exceeds the row budget")]
    Rows { rows: u128 },
    #[error("omega must have a nonzero entry")]
    ZeroFrequency,
    #[error("|x| = {x:e} lies below the smallest resolved scale")]
    BelowProfile { x: f64 },
}

/// Search limits for the α_n lattice scan.
#[derive(Clone, Copy, Debug)]
pub struct Budget {
    /// Largest n with 2^n allowed as ℓ1 radius.
    pub max_exp: usize,
    /// Cap on the number of scanned rows (the last coordinate is optimized exactly).
    pub max_rows: u128,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_exp: 20, max_rows: 50_000_000 }
    }
}

/// min |ω·ν| over 0 < |ν|₁ ≤ 2^n.
pub fn alpha_n(omega: &[f64], n: usize) -> Result<f64, SmallDivError> {
    alpha_n_with(omega, n, Budget::default())
}

pub fn alpha_n_with(omega: &[f64], n: usize, budget: Budget) -> Result<f64, SmallDivError> {
    if n > budget.max_exp {
        return Err(SmallDivError::Budget { n, max_exp: budget.max_exp });
    }
    min_divisor(omega, 1i64 << n, budget).map(|(v, _)| v)
}

/// Exact minimum of |ω·ν| over the punctured ℓ1 ball of the given radius.
///
/// The coordinate with the largest |ω_i| is solved for by rounding, the
/// remaining ones are enumerated; ν and −ν are identified.
pub fn min_divisor(omega: &[f64], radius: i64, budget: Budget) -> Result<(f64, Mode), SmallDivError> {
    let d = omega.len();
    let (piv, wp) = omega
        .iter()
        .enumerate()
        .map(|(i, w)| (i, *w))
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .ok_or(SmallDivError::ZeroFrequency)?;
    if wp == 0.0 {
        return Err(SmallDivError::ZeroFrequency);
    }
    let rows = (2 * radius as u128 + 1).pow(d as u32 - 1);
    if rows > budget.max_rows {
        return Err(SmallDivError::Rows { rows });
    }
    let others: Vec<usize> = (0..d).filter(|&i| i != piv).collect();
    let mut rest = vec![0i64; others.len()];
    let mut best = (f64::INFINITY, Mode::zero(d));
    let mut scan = |rest: &[i64]| -> Result<(), SmallDivError> {
        let used: i64 = rest.iter().map(|x| x.abs()).sum();
        if used > radius {
            return Ok(());
        }
        let partial: f64 = rest.iter().zip(&others).map(|(&r, &i)| r as f64 * omega[i]).sum();
        let room = radius - used;
        let target = (-partial / wp).round().clamp(-(room as f64), room as f64) as i64;
        for cand in [target - 1, target, target + 1] {
            if cand.abs() > room || (used == 0 && cand == 0) {
                continue;
            }
            let mut v = vec![0i32; d];
            for (&r, &i) in rest.iter().zip(&others) {
                v[i] = r as i32;
            }
            v[piv] = cand as i32;
            let nu = Mode(v);
            let val = (partial + cand as f64 * wp).abs();
            if val < 1e-14 * (1.0 + nu.norm() as f64) {
                return Err(SmallDivError::Resonance { nu, value: val });
            }
            if val < best.0 {
                best = (val, nu);
            }
        }
        Ok(())
    };
    if others.is_empty() {
        scan(&rest)?;
        return Ok(best);
    }
    for r in rest.iter_mut() {
        *r = -radius;
    }
    loop {
        scan(&rest)?;
        let mut i = 0;
        loop {
            if i == rest.len() {
                return Ok(best);
            }
            if rest[i] < radius {
                rest[i] += 1;
                break;
            }
            rest[i] = -radius;
            i += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ScaleProfile {
    pub omega: Vec<f64>,
    /// α_n for n = 0..alphas.len().
    pub alphas: Vec<f64>,
    /// m_0..m_{N+1}.
    pub m_seq: Vec<usize>,
    /// p_0..p_N.
    pub p_seq: Vec<usize>,
    pub bryuno_partials: Vec<f64>,
    pub n_profile: usize,
}

pub fn build_profile(omega: &[f64], n_profile: usize) -> Result<ScaleProfile, SmallDivError> {
    build_profile_with(omega, n_profile, Budget::default())
}

pub fn build_profile_with(omega: &[f64], n_profile: usize, budget: Budget) -> Result<ScaleProfile, SmallDivError> {
    let mut alphas: Vec<f64> = Vec::new();
    let alpha = |i: usize, alphas: &mut Vec<f64>| -> Result<f64, SmallDivError> {
        while alphas.len() <= i {
            let v = alpha_n_with(omega, alphas.len(), budget)?;
            alphas.push(v);
        }
        Ok(alphas[i])
    };
    let mut m_seq = vec![0usize];
    let mut p_seq = Vec::new();
    for n in 0..=n_profile {
        let m = m_seq[n];
        let am = alpha(m, &mut alphas)?;
        let mut p = 0;
        while am < 2.0 * alpha(m + p + 1, &mut alphas)? {
            p += 1;
        }
        p_seq.push(p);
        m_seq.push(m + p + 1);
    }
    let last = *m_seq.last().expect("nonempty");
    alpha(last, &mut alphas)?;
    let mut acc = 0.0;
    let bryuno_partials = alphas
        .iter()
        .enumerate()
        .map(|(n, a)| {
            acc += (0.5f64).powi(n as i32) * (1.0 / a).ln();
            acc
        })
        .collect();
    Ok(ScaleProfile {
        omega: omega.to_vec(),
        alphas,
        m_seq,
        p_seq,
        bryuno_partials,
        n_profile,
    })
}

fn g(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp()
    } else {
        0.0
    }
}

fn dg(s: f64) -> f64 {
    if s > 0.0 {
        g(s) / (s * s)
    } else {
        0.0
    }
}

/// The plateau bump χ and its derivative.
pub fn chi_with_deriv(x: f64) -> (f64, f64) {
    let a = x.abs();
    if a <= 0.5 {
        return (1.0, 0.0);
    }
    if a >= 1.0 {
        return (0.0, 0.0);
    }
    let sg = x.signum();
    let (u, v) = (g(2.0 - 2.0 * a), g(2.0 * a - 1.0));
    let (du, dv) = (-2.0 * sg * dg(2.0 - 2.0 * a), 2.0 * sg * dg(2.0 * a - 1.0));
    let s = u + v;
    (u / s, (du * v - u * dv) / (s * s))
}

pub fn chi(x: f64) -> f64 {
    chi_with_deriv(x).0
}

/// One-sided plateau: 1 for x ≤ 1/2, 0 for x ≥ 1.
pub fn xi(x: f64) -> f64 {
    if x <= 0.5 {
        1.0
    } else {
        chi(x)
    }
}

impl ScaleProfile {
    pub fn alpha_m(&self, n: usize) -> f64 {
        self.alphas[self.m_seq[n]]
    }

    fn check(&self, n: i32) {
        assert!(
            n <= self.n_profile as i32,
            "scale {n} beyond profile depth {}",
            self.n_profile
        );
    }

    /// χ_n with χ_{−1} ≡ 1, paired with its x-derivative.
    pub fn chi_n_d(&self, n: i32, x: f64) -> (f64, f64) {
        if n < 0 {
            return (1.0, 0.0);
        }
        self.check(n);
        let s = 8.0 / self.alpha_m(n as usize);
        let (v, d) = chi_with_deriv(s * x);
        (v, d * s)
    }

    pub fn chi_n(&self, n: i32, x: f64) -> f64 {
        self.chi_n_d(n, x).0
    }

    pub fn psi_n_d(&self, n: i32, x: f64) -> (f64, f64) {
        let (v, d) = self.chi_n_d(n, x);
        (1.0 - v, -d)
    }

    pub fn psi_n(&self, n: i32, x: f64) -> f64 {
        self.psi_n_d(n, x).0
    }

    /// Ψ_n = χ_{n−1}ψ_n, paired with its x-derivative.
    pub fn big_psi_n_d(&self, n: i32, x: f64) -> (f64, f64) {
        let (a, da) = self.chi_n_d(n - 1, x);
        let (b, db) = self.psi_n_d(n, x);
        (a * b, da * b + a * db)
    }

    pub fn big_psi_n(&self, n: i32, x: f64) -> f64 {
        self.big_psi_n_d(n, x).0
    }

    /// ξ_n with ξ_{−1} ≡ 1.
    pub fn xi_n(&self, n: i32, x: f64) -> f64 {
        if n < 0 {
            return 1.0;
        }
        self.check(n);
        let a = self.alphas[self.m_seq[n as usize + 1]];
        xi(256.0 * x / (a * a))
    }

    /// Scales n ≥ 0 with Ψ_n(x) ≠ 0; fails when x is below the resolved range.
    pub fn admissible_scales(&self, x: f64) -> Result<Vec<i32>, SmallDivError> {
        if x == 0.0 || self.chi_n(self.n_profile as i32, x) != 0.0 {
            return Err(SmallDivError::BelowProfile { x });
        }
        Ok((0..=self.n_profile as i32).filter(|&n| self.big_psi_n(n, x) != 0.0).collect())
    }

    /// Deterministic sample points in [−α₀, α₀] \ {0}, log-uniform in |x|
    /// down to the smallest resolved scale, alternating in sign.
    pub fn sample_points(&self, count: usize) -> Vec<f64> {
        let hi = self.alphas[0];
        let lo = self.alpha_m(self.n_profile) / 8.0;
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        (0..count)
            .map(|j| {
                let u = ((j as f64 + 0.5) * phi).fract();
                let x = lo * (hi / lo).powf(u);
                if j % 2 == 0 { x } else { -x }
            })
            .collect()
    }

    /// ψ_p(x) + Σ_{n=p+1}^{N} Ψ_n(x) − 1 and the support of Ψ at each sample.
    pub fn partition_check(&self, xs: &[f64], ps: &[i32]) -> PartitionReport {
        let n_max = self.n_profile as i32;
        let mut rep = PartitionReport { samples: 0, unresolved: 0, max_defect: 0.0, max_scales: 0, support_violations: 0 };
        for &x in xs {
            if x == 0.0 || self.chi_n(n_max, x) != 0.0 {
                rep.unresolved += 1;
                continue;
            }
            rep.samples += 1;
            for &p in ps {
                let s: f64 = self.psi_n(p, x) + (p + 1..=n_max).map(|n| self.big_psi_n(n, x)).sum::<f64>();
                rep.max_defect = rep.max_defect.max((s - 1.0).abs());
            }
            let live: Vec<i32> = (0..=n_max).filter(|&n| self.big_psi_n(n, x) != 0.0).collect();
            rep.max_scales = rep.max_scales.max(live.len());
            for &n in &live {
                let lo = self.alpha_m(n as usize) / 16.0;
                let hi = if n == 0 { f64::INFINITY } else { self.alpha_m(n as usize - 1) / 8.0 };
                if !(lo < x.abs() && x.abs() < hi) {
                    rep.support_violations += 1;
                }
            }
        }
        rep
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct PartitionReport {
    pub samples: usize,
    /// Samples below the smallest resolved scale, skipped.
    pub unresolved: usize,
    pub max_defect: f64,
    /// Most scales with Ψ_n(x) ≠ 0 at a single sample.
    pub max_scales: usize,
    pub support_violations: usize,
}
