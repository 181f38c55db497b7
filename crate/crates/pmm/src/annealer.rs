//! Transverse-field annealing of small Ising problems, with the signal
//! chain that turns dimensionless problem coefficients into DAC codes.
//!
//! The processor realizes `H(s) = A(s) * sum_j X_j + B(s) * H_P` where
//! `H_P = sum_j h_j Z_j + sum_(i,j) K_ij Z_i Z_j` and `s` runs 0 to 1
//! over the anneal. At `s = 0` the transverse term dominates and the
//! system sits in its product ground state; at `s = 1` only the problem
//! term survives and the computational-basis distribution is read out.
//!
//! Evolution is exact state-vector integration: uniform time steps with
//! the Hamiltonian frozen at each midpoint, each step applied as a
//! matrix exponential through a Lanczos/Krylov projection. This is
//! practical up to a dozen or so spins, which covers a unit cell.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;

use crate::device::{CouplerCurve, DeviceError};
use crate::flux_dac::{DacDesign, FluxDacError, TwoStageDac};

/// Largest problem accepted by exhaustive enumeration.
pub const MAX_BRUTE_FORCE_QUBITS: usize = 24;
/// Largest problem accepted by state-vector evolution.
pub const MAX_EVOLVE_QUBITS: usize = 12;

/// Target accumulated phase per midpoint step, in radians.
const PHASE_PER_STEP: f64 = 4.0;
const MIN_STEPS: usize = 64;
const KRYLOV_MAX: usize = 48;
const KRYLOV_TOL: f64 = 1e-13;

fn edge_key(i: usize, j: usize) -> (usize, usize) {
    (i.min(j), i.max(j))
}

/// An Ising problem over `n` spins: local fields `h` and couplings `k`
/// on a fixed edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct IsingProblem {
    n: usize,
    h: Vec<f64>,
    k: BTreeMap<(usize, usize), f64>,
}

impl IsingProblem {
    pub fn new(
        n: usize,
        h: Vec<f64>,
        k: BTreeMap<(usize, usize), f64>,
    ) -> Result<IsingProblem, AnnealError> {
        if n == 0 {
            return Err(AnnealError::BadProblem("problem needs at least one spin".into()));
        }
        if h.len() != n {
            return Err(AnnealError::BadProblem(format!(
                "{} fields for {} spins",
                h.len(),
                n
            )));
        }
        for (&(i, j), _) in &k {
            if i >= j || j >= n {
                return Err(AnnealError::BadProblem(format!(
                    "coupling ({i}, {j}) is not an ordered pair below {n}"
                )));
            }
        }
        Ok(IsingProblem { n, h, k })
    }

    pub fn spin_count(&self) -> usize {
        self.n
    }

    pub fn fields(&self) -> &[f64] {
        &self.h
    }

    pub fn couplings(&self) -> &BTreeMap<(usize, usize), f64> {
        &self.k
    }

    /// Parses a line-oriented problem file: `h <j> <value>` and
    /// `K <i> <j> <value>` entries, `#` comments. Couplings must lie on
    /// the given edge set; duplicates are rejected; omitted entries are
    /// zero.
    pub fn parse(
        text: &str,
        n: usize,
        edges: &[(usize, usize)],
    ) -> Result<IsingProblem, AnnealError> {
        let allowed: BTreeSet<(usize, usize)> =
            edges.iter().map(|&(i, j)| edge_key(i, j)).collect();
        let mut h = vec![0.0; n];
        let mut seen_h = vec![false; n];
        let mut k = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| AnnealError::BadProblem(format!("line {}: {msg}", lineno + 1));
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens[0] {
                "h" => {
                    if tokens.len() != 3 {
                        return Err(bad("expected `h <spin> <value>`".into()));
                    }
                    let j: usize =
                        tokens[1].parse().map_err(|_| bad(format!("bad spin `{}`", tokens[1])))?;
                    let v: f64 =
                        tokens[2].parse().map_err(|_| bad(format!("bad value `{}`", tokens[2])))?;
                    if j >= n {
                        return Err(bad(format!("spin {j} out of range for {n} spins")));
                    }
                    if seen_h[j] {
                        return Err(bad(format!("duplicate field for spin {j}")));
                    }
                    seen_h[j] = true;
                    h[j] = v;
                }
                "K" => {
                    if tokens.len() != 4 {
                        return Err(bad("expected `K <i> <j> <value>`".into()));
                    }
                    let i: usize =
                        tokens[1].parse().map_err(|_| bad(format!("bad spin `{}`", tokens[1])))?;
                    let j: usize =
                        tokens[2].parse().map_err(|_| bad(format!("bad spin `{}`", tokens[2])))?;
                    let v: f64 =
                        tokens[3].parse().map_err(|_| bad(format!("bad value `{}`", tokens[3])))?;
                    if i == j || i >= n || j >= n {
                        return Err(bad(format!("coupling ({i}, {j}) out of range")));
                    }
                    let key = edge_key(i, j);
                    if !allowed.contains(&key) {
                        return Err(bad(format!(
                            "no coupler between spins {} and {}",
                            key.0, key.1
                        )));
                    }
                    if k.contains_key(&key) {
                        return Err(bad(format!("duplicate coupling ({}, {})", key.0, key.1)));
                    }
                    k.insert(key, v);
                }
                other => return Err(bad(format!("unknown entry `{other}`"))),
            }
        }
        IsingProblem::new(n, h, k)
    }

    /// Energy of a spin assignment (entries must be +-1).
    pub fn objective(&self, spins: &[i8]) -> Result<f64, AnnealError> {
        if spins.len() != self.n {
            return Err(AnnealError::BadProblem(format!(
                "{} spins supplied for {} variables",
                spins.len(),
                self.n
            )));
        }
        for &s in spins {
            if s != 1 && s != -1 {
                return Err(AnnealError::SpinDomain { value: s });
            }
        }
        let mut e = 0.0;
        for (j, &s) in spins.iter().enumerate() {
            e += self.h[j] * s as f64;
        }
        for (&(i, j), &v) in &self.k {
            e += v * (spins[i] as i32 * spins[j] as i32) as f64;
        }
        Ok(e)
    }

    /// Energy of every computational basis state, indexed by bit mask
    /// with bit `j` set meaning spin `j` is -1.
    pub fn diagonal_energies(&self) -> Result<Vec<f64>, AnnealError> {
        if self.n > MAX_BRUTE_FORCE_QUBITS {
            return Err(AnnealError::SizeLimit { n: self.n, max: MAX_BRUTE_FORCE_QUBITS });
        }
        let dim = 1usize << self.n;
        let mut diag = vec![0.0; dim];
        for mask in 0..dim {
            let spin = |j: usize| 1.0 - 2.0 * ((mask >> j) & 1) as f64;
            let mut e = 0.0;
            for j in 0..self.n {
                e += self.h[j] * spin(j);
            }
            for (&(i, j), &v) in &self.k {
                e += v * spin(i) * spin(j);
            }
            diag[mask] = e;
        }
        Ok(diag)
    }

    fn spins_of_mask(&self, mask: usize) -> Vec<i8> {
        (0..self.n).map(|j| if (mask >> j) & 1 == 1 { -1 } else { 1 }).collect()
    }

    /// Exact minimum energy and all minimizing assignments.
    pub fn brute_force_minimize(&self) -> Result<(f64, Vec<Vec<i8>>), AnnealError> {
        let diag = self.diagonal_energies()?;
        let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
        let minimizers = diag
            .iter()
            .enumerate()
            .filter(|(_, &e)| e == min)
            .map(|(mask, _)| self.spins_of_mask(mask))
            .collect();
        Ok((min, minimizers))
    }
}

/// Annealing waveforms: rows of (s, a, b) with the envelopes in rad/ns,
/// plus the wall-clock duration mapping s linearly onto time.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealSchedule {
    pub t_f_ns: f64,
    table: Vec<(f64, f64, f64)>,
}

impl AnnealSchedule {
    pub fn new(t_f_ns: f64, table: Vec<(f64, f64, f64)>) -> Result<AnnealSchedule, AnnealError> {
        let sched = AnnealSchedule { t_f_ns, table };
        sched.validate()?;
        Ok(sched)
    }

    /// Smooth reference schedule: transverse envelope `8*pi*(1-s)^3`,
    /// problem envelope `2*pi*s`, tabulated on 1024 points.
    pub fn reference(t_f_ns: f64) -> AnnealSchedule {
        let table = (0..1024)
            .map(|i| {
                let s = i as f64 / 1023.0;
                (s, 8.0 * PI * (1.0 - s).powi(3), 2.0 * PI * s)
            })
            .collect();
        AnnealSchedule { t_f_ns, table }
    }

    /// Parses a schedule file: rows `s a b`, `#` comments.
    pub fn parse(text: &str, t_f_ns: f64) -> Result<AnnealSchedule, AnnealError> {
        let mut table = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let nums: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
            let nums = nums.map_err(|_| {
                AnnealError::BadSchedule(format!("line {}: expected `s a b`", lineno + 1))
            })?;
            if nums.len() != 3 {
                return Err(AnnealError::BadSchedule(format!(
                    "line {}: expected 3 columns, got {}",
                    lineno + 1,
                    nums.len()
                )));
            }
            table.push((nums[0], nums[1], nums[2]));
        }
        AnnealSchedule::new(t_f_ns, table)
    }

    fn validate(&self) -> Result<(), AnnealError> {
        if !(self.t_f_ns > 0.0) || !self.t_f_ns.is_finite() {
            return Err(AnnealError::BadSchedule("duration must be positive".into()));
        }
        if self.table.len() < 2 {
            return Err(AnnealError::BadSchedule("schedule needs at least 2 rows".into()));
        }
        let first = self.table.first().unwrap();
        let last = self.table.last().unwrap();
        if first.0 != 0.0 || last.0 != 1.0 {
            return Err(AnnealError::BadSchedule("s must run from 0 to 1".into()));
        }
        for w in self.table.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(AnnealError::BadSchedule("s must be strictly increasing".into()));
            }
        }
        for &(s, a, b) in &self.table {
            if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
                return Err(AnnealError::BadSchedule(format!(
                    "envelopes must be finite and nonnegative at s = {s}"
                )));
            }
        }
        let (_, a0, b0) = *first;
        let (_, a1, b1) = *last;
        if !(a0 > 0.0) || a0 < 100.0 * b0 {
            return Err(AnnealError::BadSchedule(
                "transverse term must dominate at the start (a(0) >= 100 b(0))".into(),
            ));
        }
        if !(b1 > 0.0) || a1 > 0.01 * b1 {
            return Err(AnnealError::BadSchedule(
                "problem term must dominate at the end (a(1) <= 0.01 b(1))".into(),
            ));
        }
        Ok(())
    }

    fn interpolate(&self, s: f64, col: fn(&(f64, f64, f64)) -> f64) -> f64 {
        let s = s.clamp(0.0, 1.0);
        let idx = self.table.partition_point(|row| row.0 <= s);
        if idx == 0 {
            return col(&self.table[0]);
        }
        if idx == self.table.len() {
            return col(self.table.last().unwrap());
        }
        let lo = &self.table[idx - 1];
        let hi = &self.table[idx];
        let t = (s - lo.0) / (hi.0 - lo.0);
        col(lo) + t * (col(hi) - col(lo))
    }

    /// Transverse envelope at `s`, rad/ns.
    pub fn a(&self, s: f64) -> f64 {
        self.interpolate(s, |row| row.1)
    }

    /// Problem envelope at `s`, rad/ns.
    pub fn b(&self, s: f64) -> f64 {
        self.interpolate(s, |row| row.2)
    }

    pub fn rows(&self) -> &[(f64, f64, f64)] {
        &self.table
    }
}

fn l2_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn dot(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

fn apply_hamiltonian(
    a: f64,
    b: f64,
    diag: &[f64],
    n_bits: usize,
    src: &[Complex64],
    dst: &mut [Complex64],
) {
    for i in 0..src.len() {
        let mut acc = src[i] * (b * diag[i]);
        for j in 0..n_bits {
            acc += src[i ^ (1usize << j)] * a;
        }
        dst[i] = acc;
    }
}

/// `y = exp(-i * dt * T) e1` for the real symmetric tridiagonal `T`
/// with diagonal `alphas` and off-diagonal `betas`.
fn tridiag_expm_e1(alphas: &[f64], betas: &[f64], dt: f64) -> Vec<Complex64> {
    let m = alphas.len();
    let mut t = nalgebra::DMatrix::<f64>::zeros(m, m);
    for (i, &al) in alphas.iter().enumerate() {
        t[(i, i)] = al;
    }
    for (i, &be) in betas.iter().enumerate() {
        t[(i, i + 1)] = be;
        t[(i + 1, i)] = be;
    }
    let eig = nalgebra::SymmetricEigen::new(t);
    let mut y = vec![Complex64::default(); m];
    for k in 0..m {
        let lambda = eig.eigenvalues[k];
        let phase = Complex64::from_polar(1.0, -dt * lambda);
        let c = eig.eigenvectors[(0, k)];
        for i in 0..m {
            y[i] += phase * (eig.eigenvectors[(i, k)] * c);
        }
    }
    y
}

/// One midpoint step: `psi <- exp(-i * dt * H) psi` through a Lanczos
/// projection with full reorthogonalization.
fn expm_multiply(
    a: f64,
    b: f64,
    diag: &[f64],
    n_bits: usize,
    dt: f64,
    psi: &[Complex64],
) -> Vec<Complex64> {
    let dim = psi.len();
    let norm0 = l2_norm(psi);
    if norm0 == 0.0 {
        return psi.to_vec();
    }
    let mut basis: Vec<Vec<Complex64>> = vec![psi.iter().map(|z| z / norm0).collect()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut w = vec![Complex64::default(); dim];
    loop {
        let m = basis.len();
        apply_hamiltonian(a, b, diag, n_bits, &basis[m - 1], &mut w);
        let alpha = dot(&basis[m - 1], &w).re;
        alphas.push(alpha);
        for i in 0..dim {
            w[i] -= basis[m - 1][i] * alpha;
        }
        if m >= 2 {
            let beta_prev = betas[m - 2];
            for i in 0..dim {
                w[i] -= basis[m - 2][i] * beta_prev;
            }
        }
        // Full reorthogonalization keeps the basis clean over many steps.
        for v in &basis {
            let c = dot(v, &w);
            for i in 0..dim {
                w[i] -= v[i] * c;
            }
        }
        let beta = l2_norm(&w);
        let y = tridiag_expm_e1(&alphas, &betas, dt);
        let happy_breakdown = beta < 1e-14;
        let converged = beta * y[m - 1].norm() < KRYLOV_TOL;
        if happy_breakdown || converged || m == KRYLOV_MAX || m == dim {
            let mut out = vec![Complex64::default(); dim];
            for (k, v) in basis.iter().enumerate() {
                let c = y[k] * norm0;
                for i in 0..dim {
                    out[i] += v[i] * c;
                }
            }
            return out;
        }
        betas.push(beta);
        basis.push(w.iter().map(|z| z / beta).collect());
    }
}

/// Final state of one anneal.
#[derive(Debug, Clone)]
pub struct FinalState {
    pub amplitudes: Vec<Complex64>,
    pub steps_used: usize,
    /// Deviation of the final norm from 1.
    pub norm_error: f64,
}

fn product_superposition(n: usize) -> Vec<Complex64> {
    let dim = 1usize << n;
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|mask: usize| {
            let sign = if mask.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            Complex64::new(sign * scale, 0.0)
        })
        .collect()
}

fn default_steps(n: usize, diag: &[f64], sched: &AnnealSchedule) -> usize {
    let max_abs_e = diag.iter().fold(0.0f64, |m, &e| m.max(e.abs()));
    let rho = sched
        .rows()
        .iter()
        .fold(0.0f64, |m, &(_, a, b)| m.max(a * n as f64 + b * max_abs_e));
    (((sched.t_f_ns * rho / PHASE_PER_STEP).ceil() as usize).max(MIN_STEPS)).max(1)
}

/// Integrates the full anneal and returns the final state vector. The
/// initial state is the transverse-field ground state; `steps` overrides
/// the automatic midpoint step count.
pub fn evolve_final_state(
    p: &IsingProblem,
    sched: &AnnealSchedule,
    steps: Option<usize>,
) -> Result<FinalState, AnnealError> {
    sched.validate()?;
    let n = p.spin_count();
    if n > MAX_EVOLVE_QUBITS {
        return Err(AnnealError::SizeLimit { n, max: MAX_EVOLVE_QUBITS });
    }
    let diag = p.diagonal_energies()?;
    let steps = match steps {
        Some(s) if s == 0 => {
            return Err(AnnealError::BadSchedule("step count must be positive".into()))
        }
        Some(s) => s,
        None => default_steps(n, &diag, sched),
    };
    let dt = sched.t_f_ns / steps as f64;
    let mut psi = product_superposition(n);
    for k in 0..steps {
        let s_mid = (k as f64 + 0.5) / steps as f64;
        psi = expm_multiply(sched.a(s_mid), sched.b(s_mid), &diag, n, dt, &psi);
    }
    let norm_error = (l2_norm(&psi) - 1.0).abs();
    Ok(FinalState { amplitudes: psi, steps_used: steps, norm_error })
}

/// Exact outcome distribution of one anneal.
#[derive(Debug, Clone)]
pub struct ProbabilityReport {
    /// Probability of each basis state, indexed by mask.
    pub probabilities: Vec<f64>,
    /// Total probability on the minimum-energy states.
    pub ground_probability: f64,
    pub ground_masks: Vec<usize>,
    pub steps_used: usize,
    pub norm_error: f64,
}

/// Evolves the anneal and reduces the final state to basis-state
/// probabilities.
pub fn anneal_probabilities(
    p: &IsingProblem,
    sched: &AnnealSchedule,
) -> Result<ProbabilityReport, AnnealError> {
    let state = evolve_final_state(p, sched, None)?;
    let diag = p.diagonal_energies()?;
    let mut probs: Vec<f64> = state.amplitudes.iter().map(|z| z.norm_sqr()).collect();
    let total: f64 = probs.iter().sum();
    for q in &mut probs {
        *q /= total;
    }
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let ground_masks: Vec<usize> =
        diag.iter().enumerate().filter(|(_, &e)| e == min).map(|(m, _)| m).collect();
    let ground_probability = ground_masks.iter().map(|&m| probs[m]).sum();
    Ok(ProbabilityReport {
        probabilities: probs,
        ground_probability,
        ground_masks,
        steps_used: state.steps_used,
        norm_error: state.norm_error,
    })
}

/// Sampled outcomes of repeated anneals.
#[derive(Debug, Clone)]
pub struct AnnealResult {
    pub outcomes: Vec<Vec<i8>>,
    pub energies: Vec<f64>,
    /// Fraction of samples that hit a minimum-energy state.
    pub ground_fraction: f64,
    pub norm_error: f64,
    pub steps_used: usize,
}

/// Runs the anneal once and samples the final distribution `repeats`
/// times with a seeded stream.
pub fn anneal(
    p: &IsingProblem,
    sched: &AnnealSchedule,
    repeats: u32,
    seed: u64,
) -> Result<AnnealResult, AnnealError> {
    if repeats == 0 {
        return Err(AnnealError::BadProblem("repeats must be positive".into()));
    }
    let report = anneal_probabilities(p, sched)?;
    let diag = p.diagonal_energies()?;
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let mut cumulative = Vec::with_capacity(report.probabilities.len());
    let mut acc = 0.0;
    for &q in &report.probabilities {
        acc += q;
        cumulative.push(acc);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut outcomes = Vec::with_capacity(repeats as usize);
    let mut energies = Vec::with_capacity(repeats as usize);
    let mut ground_hits = 0u32;
    for _ in 0..repeats {
        let u: f64 = rng.gen::<f64>() * acc;
        let mask = cumulative.partition_point(|&c| c <= u).min(diag.len() - 1);
        outcomes.push(p.spins_of_mask(mask));
        energies.push(diag[mask]);
        if diag[mask] == min {
            ground_hits += 1;
        }
    }
    Ok(AnnealResult {
        outcomes,
        energies,
        ground_fraction: ground_hits as f64 / repeats as f64,
        norm_error: report.norm_error,
        steps_used: report.steps_used,
    })
}

/// The analog chain between a dimensionless coefficient and a DAC code:
/// the coefficient scales a target mutual inductance on a coupling
/// element, the element's flux-vs-mutual curve is inverted, and the flux
/// is rounded to the nearest representable DAC level.
#[derive(Debug, Clone)]
pub struct TransferChain {
    pub h_dac: DacDesign,
    pub k_dac: DacDesign,
    pub h_curve: CouplerCurve,
    pub k_curve: CouplerCurve,
}

impl TransferChain {
    /// Design-target coupler DACs driving the default coupling curve for
    /// both fields and couplings. The design span is sized to sweep the
    /// curve's full range; the as-fabricated coupler DAC falls short of
    /// it and saturates before the strongest couplings.
    pub fn reference() -> TransferChain {
        TransferChain {
            h_dac: DacDesign::designed(crate::flux_dac::DacType::Coupler),
            k_dac: DacDesign::designed(crate::flux_dac::DacType::Coupler),
            h_curve: CouplerCurve::default(),
            k_curve: CouplerCurve::default(),
        }
    }
}

/// A problem mapped to DAC codes, with the coefficients actually
/// realized after quantization.
#[derive(Debug, Clone)]
pub struct QuantizedProgram {
    /// (spin, n_coarse, n_fine) per field.
    pub h_targets: Vec<(usize, i32, i32)>,
    /// (edge, n_coarse, n_fine) per coupling.
    pub k_targets: Vec<((usize, usize), i32, i32)>,
    pub achieved: IsingProblem,
    /// Largest |achieved - requested| over all coefficients, as a
    /// fraction of full scale (coefficients live in [-1, 1]).
    pub max_scale_error: f64,
}

fn quantize_value(
    value: f64,
    dac: &TwoStageDac,
    curve: &CouplerCurve,
    name: &str,
) -> Result<(i32, i32, f64), AnnealError> {
    if value.abs() > 1.0 {
        return Err(AnnealError::OutOfRange { name: name.to_string(), value });
    }
    let unit = curve.unit_mutual_ph();
    let flux = curve.flux_for_mutual(value * unit)?;
    let (nc, nf) = dac.quantize(flux)?;
    let achieved_flux = dac.output_at(nc, nf);
    let achieved = curve.mutual_ph(achieved_flux)? / unit;
    Ok((nc, nf, achieved))
}

/// Quantizes every coefficient of a problem through the transfer chain.
pub fn quantize_problem(
    p: &IsingProblem,
    chain: &TransferChain,
) -> Result<QuantizedProgram, AnnealError> {
    let h_dac = TwoStageDac::from_design(&chain.h_dac);
    let k_dac = TwoStageDac::from_design(&chain.k_dac);
    let mut h_targets = Vec::with_capacity(p.spin_count());
    let mut achieved_h = Vec::with_capacity(p.spin_count());
    let mut max_err = 0.0f64;
    for (j, &v) in p.fields().iter().enumerate() {
        let (nc, nf, got) = quantize_value(v, &h_dac, &chain.h_curve, &format!("h[{j}]"))?;
        max_err = max_err.max((got - v).abs());
        h_targets.push((j, nc, nf));
        achieved_h.push(got);
    }
    let mut k_targets = Vec::with_capacity(p.couplings().len());
    let mut achieved_k = BTreeMap::new();
    for (&edge, &v) in p.couplings() {
        let name = format!("K[{},{}]", edge.0, edge.1);
        let (nc, nf, got) = quantize_value(v, &k_dac, &chain.k_curve, &name)?;
        max_err = max_err.max((got - v).abs());
        k_targets.push((edge, nc, nf));
        achieved_k.insert(edge, got);
    }
    let achieved = IsingProblem::new(p.spin_count(), achieved_h, achieved_k)?;
    Ok(QuantizedProgram { h_targets, k_targets, achieved, max_scale_error: max_err })
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnnealError {
    SpinDomain { value: i8 },
    SizeLimit { n: usize, max: usize },
    BadProblem(String),
    BadSchedule(String),
    OutOfRange { name: String, value: f64 },
    Device(DeviceError),
    Dac(FluxDacError),
}

impl From<DeviceError> for AnnealError {
    fn from(e: DeviceError) -> AnnealError {
        AnnealError::Device(e)
    }
}

impl From<FluxDacError> for AnnealError {
    fn from(e: FluxDacError) -> AnnealError {
        AnnealError::Dac(e)
    }
}

impl fmt::Display for AnnealError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnnealError::SpinDomain { value } => {
                write!(f, "spin value {value} is not +1 or -1")
            }
            AnnealError::SizeLimit { n, max } => {
                write!(f, "{n} spins exceed the supported maximum of {max}")
            }
            AnnealError::BadProblem(msg) => write!(f, "problem: {msg}"),
            AnnealError::BadSchedule(msg) => write!(f, "schedule: {msg}"),
            AnnealError::OutOfRange { name, value } => {
                write!(f, "coefficient {name} = {value} outside [-1, 1]")
            }
            AnnealError::Device(e) => write!(f, "device: {e}"),
            AnnealError::Dac(e) => write!(f, "dac: {e}"),
        }
    }
}

impl std::error::Error for AnnealError {}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_spin_problem() -> IsingProblem {
        let mut k = BTreeMap::new();
        k.insert((0, 1), 0.7);
        IsingProblem::new(2, vec![0.3, -0.2], k).unwrap()
    }

    #[test]
    fn objective_matches_hand_computation() {
        let p = two_spin_problem();
        assert_eq!(p.objective(&[1, 1]).unwrap(), 0.3 - 0.2 + 0.7);
        assert_eq!(p.objective(&[-1, 1]).unwrap(), -0.3 - 0.2 - 0.7);
        assert_eq!(p.objective(&[1, -1]).unwrap(), 0.3 + 0.2 - 0.7);
        assert_eq!(p.objective(&[-1, -1]).unwrap(), -0.3 + 0.2 + 0.7);
        assert!(matches!(
            p.objective(&[0, 1]),
            Err(AnnealError::SpinDomain { value: 0 })
        ));
        assert!(p.objective(&[1]).is_err());
    }

    #[test]
    fn diagonal_energies_agree_with_objective() {
        let p = two_spin_problem();
        let diag = p.diagonal_energies().unwrap();
        for mask in 0..4usize {
            let spins: Vec<i8> =
                (0..2).map(|j| if (mask >> j) & 1 == 1 { -1 } else { 1 }).collect();
            assert_eq!(diag[mask], p.objective(&spins).unwrap());
        }
    }

    #[test]
    fn brute_force_finds_the_unique_minimum() {
        let p = two_spin_problem();
        let (min, states) = p.brute_force_minimize().unwrap();
        assert_eq!(min, -1.2);
        assert_eq!(states, vec![vec![-1, 1]]);
    }

    #[test]
    fn brute_force_reports_degenerate_ties() {
        // No fields, one ferromagnetic bond: both aligned states win.
        let mut k = BTreeMap::new();
        k.insert((0, 1), -1.0);
        let p = IsingProblem::new(2, vec![0.0, 0.0], k).unwrap();
        let (min, states) = p.brute_force_minimize().unwrap();
        assert_eq!(min, -1.0);
        assert_eq!(states.len(), 2);
        assert!(states.contains(&vec![1, 1]) && states.contains(&vec![-1, -1]));
    }

    #[test]
    fn problem_files_parse_and_reject_bad_entries() {
        let edges = [(0, 1), (1, 2)];
        let text = "# demo\nh 0 0.5\nK 1 0 -1 # reversed is fine\nh 2 -0.25\n";
        let p = IsingProblem::parse(text, 3, &edges).unwrap();
        assert_eq!(p.fields(), &[0.5, 0.0, -0.25]);
        assert_eq!(p.couplings()[&(0, 1)], -1.0);

        assert!(IsingProblem::parse("h 9 1\n", 3, &edges).is_err());
        assert!(IsingProblem::parse("K 0 2 1\n", 3, &edges).is_err());
        assert!(IsingProblem::parse("h 0 1\nh 0 2\n", 3, &edges).is_err());
        assert!(IsingProblem::parse("K 0 1 1\nK 1 0 2\n", 3, &edges).is_err());
        assert!(IsingProblem::parse("J 0 1 1\n", 3, &edges).is_err());
    }

    #[test]
    fn reference_schedule_is_valid_and_has_the_right_endpoints() {
        let sched = AnnealSchedule::reference(100.0);
        sched.validate().unwrap();
        assert!((sched.a(0.0) - 8.0 * PI).abs() < 1e-12);
        assert!(sched.a(1.0).abs() < 1e-12);
        assert!(sched.b(0.0).abs() < 1e-12);
        assert!((sched.b(1.0) - 2.0 * PI).abs() < 1e-12);
        // Interpolation midpoint sanity.
        let a_mid = sched.a(0.5);
        assert!((a_mid - 8.0 * PI * 0.125).abs() < 1e-3);
    }

    #[test]
    fn bad_schedules_are_rejected() {
        assert!(AnnealSchedule::new(100.0, vec![(0.0, 1.0, 0.0)]).is_err());
        assert!(AnnealSchedule::new(
            100.0,
            vec![(0.0, 25.0, 0.0), (0.5, 10.0, 3.0), (0.5, 5.0, 4.0), (1.0, 0.0, 6.0)]
        )
        .is_err());
        // Transverse term too weak at the start.
        assert!(AnnealSchedule::new(100.0, vec![(0.0, 1.0, 0.5), (1.0, 0.0, 6.0)]).is_err());
        // Problem term missing at the end.
        assert!(AnnealSchedule::new(100.0, vec![(0.0, 25.0, 0.0), (1.0, 0.0, 0.0)]).is_err());
        assert!(AnnealSchedule::new(-5.0, vec![(0.0, 25.0, 0.0), (1.0, 0.0, 6.0)]).is_err());
        let text = "0 25 0\n0.5 10 3\n1 0 6.28\n";
        assert!(AnnealSchedule::parse(text, 100.0).is_ok());
        assert!(AnnealSchedule::parse("0 25\n1 0 6.28\n", 100.0).is_err());
    }

    #[test]
    fn initial_state_is_uniform_with_alternating_signs() {
        let psi = product_superposition(3);
        assert_eq!(psi.len(), 8);
        for (mask, z) in psi.iter().enumerate() {
            let expect = if mask.count_ones() % 2 == 0 { 1.0 } else { -1.0 } / 8f64.sqrt();
            assert!((z.re - expect).abs() < 1e-15 && z.im == 0.0);
        }
        // It is the transverse-field ground state: H psi = -n*A psi.
        let diag = vec![0.0; 8];
        let mut out = vec![Complex64::default(); 8];
        apply_hamiltonian(1.0, 0.0, &diag, 3, &psi, &mut out);
        for (y, x) in out.iter().zip(&psi) {
            assert!((y + 3.0 * x).norm() < 1e-14);
        }
    }

    #[test]
    fn krylov_step_matches_rk4_on_a_two_spin_anneal() {
        let p = two_spin_problem();
        let sched = AnnealSchedule::reference(5.0);
        // At this step density the midpoint discretization error is far
        // below the comparison tolerance, so the check isolates the
        // Krylov exponential itself.
        let lanczos = evolve_final_state(&p, &sched, Some(100_000)).unwrap();

        // Independent integrator: classic RK4 on the same midpoint-free
        // ODE psi' = -i H(s(t)) psi with a very fine grid.
        let diag = p.diagonal_energies().unwrap();
        let h_apply = |s: f64, psi: &[Complex64]| -> Vec<Complex64> {
            let (a, b) = (sched.a(s), sched.b(s));
            let mut out = vec![Complex64::default(); 4];
            apply_hamiltonian(a, b, &diag, 2, psi, &mut out);
            out.iter().map(|z| -Complex64::i() * z).collect()
        };
        let steps = 40_000usize;
        let dt = sched.t_f_ns / steps as f64;
        let mut psi = product_superposition(2);
        for k in 0..steps {
            let t0 = k as f64 * dt;
            let k1 = h_apply(t0 / sched.t_f_ns, &psi);
            let p2: Vec<Complex64> =
                psi.iter().zip(&k1).map(|(x, d)| x + d * (dt / 2.0)).collect();
            let k2 = h_apply((t0 + dt / 2.0) / sched.t_f_ns, &p2);
            let p3: Vec<Complex64> =
                psi.iter().zip(&k2).map(|(x, d)| x + d * (dt / 2.0)).collect();
            let k3 = h_apply((t0 + dt / 2.0) / sched.t_f_ns, &p3);
            let p4: Vec<Complex64> = psi.iter().zip(&k3).map(|(x, d)| x + d * dt).collect();
            let k4 = h_apply((t0 + dt) / sched.t_f_ns, &p4);
            for i in 0..4 {
                psi[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0);
            }
        }
        for i in 0..4 {
            let diff = (lanczos.amplitudes[i].norm_sqr() - psi[i].norm_sqr()).abs();
            assert!(diff < 1e-6, "basis state {i}: probability differs by {diff}");
        }
        assert!(lanczos.norm_error < 1e-10);
    }

    #[test]
    fn step_halving_converges_at_second_order() {
        let p = two_spin_problem();
        let sched = AnnealSchedule::reference(8.0);
        let states: Vec<FinalState> = [256usize, 512, 1024]
            .iter()
            .map(|&s| evolve_final_state(&p, &sched, Some(s)).unwrap())
            .collect();
        let max_diff = |a: &FinalState, b: &FinalState| {
            a.amplitudes
                .iter()
                .zip(&b.amplitudes)
                .map(|(x, y)| (x - y).norm())
                .fold(0.0f64, f64::max)
        };
        let d1 = max_diff(&states[0], &states[1]);
        let d2 = max_diff(&states[1], &states[2]);
        assert!(d1 < 5e-3, "coarse-step error too large: {d1}");
        assert!(d2 < d1 / 2.0, "halving must shrink the error: {d1} -> {d2}");
    }

    #[test]
    fn sudden_quench_leaves_the_uniform_distribution() {
        let p = two_spin_problem();
        let sched = AnnealSchedule::reference(1e-4);
        let report = anneal_probabilities(&p, &sched).unwrap();
        for &q in &report.probabilities {
            assert!((q - 0.25).abs() < 1e-3, "probability {q}");
        }
    }

    #[test]
    fn slow_anneal_concentrates_on_the_ground_state() {
        let p = two_spin_problem();
        let sched = AnnealSchedule::reference(60.0);
        let report = anneal_probabilities(&p, &sched).unwrap();
        assert_eq!(report.ground_masks, vec![1]);
        assert!(
            report.ground_probability > 0.9,
            "ground probability {}",
            report.ground_probability
        );
    }

    #[test]
    fn sampling_matches_the_exact_distribution() {
        let p = two_spin_problem();
        let sched = AnnealSchedule::reference(60.0);
        let report = anneal_probabilities(&p, &sched).unwrap();
        let result = anneal(&p, &sched, 4000, 99).unwrap();
        assert!((result.ground_fraction - report.ground_probability).abs() < 0.03);
        for (spins, &e) in result.outcomes.iter().zip(&result.energies) {
            assert_eq!(p.objective(spins).unwrap(), e);
        }
        let again = anneal(&p, &sched, 4000, 99).unwrap();
        assert_eq!(result.outcomes, again.outcomes);
    }

    #[test]
    fn oversized_problems_are_rejected() {
        let n = MAX_EVOLVE_QUBITS + 1;
        let p = IsingProblem::new(n, vec![0.1; n], BTreeMap::new()).unwrap();
        let sched = AnnealSchedule::reference(10.0);
        assert!(matches!(
            evolve_final_state(&p, &sched, None),
            Err(AnnealError::SizeLimit { .. })
        ));
        let n = MAX_BRUTE_FORCE_QUBITS + 1;
        let p = IsingProblem::new(n, vec![0.0; n], BTreeMap::new()).unwrap();
        assert!(matches!(p.brute_force_minimize(), Err(AnnealError::SizeLimit { .. })));
    }

    #[test]
    fn quantization_error_stays_well_under_the_step_size() {
        let mut k = BTreeMap::new();
        k.insert((0, 1), -0.437);
        k.insert((1, 2), 0.951);
        let p = IsingProblem::new(3, vec![0.313, -0.998, 0.0], k).unwrap();
        let q = quantize_problem(&p, &TransferChain::reference()).unwrap();
        assert!(q.max_scale_error < 0.01, "error {}", q.max_scale_error);
        assert_eq!(q.h_targets.len(), 3);
        assert_eq!(q.k_targets.len(), 2);
        for (_, nc, nf) in &q.k_targets {
            assert!(nc.unsigned_abs() <= 40 && nf.unsigned_abs() <= 10);
        }
        // Quantized coefficients re-quantize to themselves.
        let q2 = quantize_problem(&q.achieved, &TransferChain::reference()).unwrap();
        assert!(q2.max_scale_error < 1e-9);
    }

    #[test]
    fn out_of_scale_coefficients_are_rejected() {
        let p = IsingProblem::new(1, vec![1.2], BTreeMap::new()).unwrap();
        assert!(matches!(
            quantize_problem(&p, &TransferChain::reference()),
            Err(AnnealError::OutOfRange { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn objective_is_invariant_under_global_flip_without_fields(
            k01 in -1.0f64..1.0, k12 in -1.0f64..1.0,
            s0 in prop_oneof![Just(1i8), Just(-1i8)],
            s1 in prop_oneof![Just(1i8), Just(-1i8)],
            s2 in prop_oneof![Just(1i8), Just(-1i8)],
        ) {
            let mut k = BTreeMap::new();
            k.insert((0, 1), k01);
            k.insert((1, 2), k12);
            let p = IsingProblem::new(3, vec![0.0; 3], k).unwrap();
            let spins = [s0, s1, s2];
            let flipped: Vec<i8> = spins.iter().map(|s| -s).collect();
            let a = p.objective(&spins).unwrap();
            let b = p.objective(&flipped).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn quantization_never_needs_more_than_half_a_fine_step(v in -1.0f64..1.0) {
            let chain = TransferChain::reference();
            let dac = TwoStageDac::from_design(&chain.k_dac);
            let (_, _, got) = quantize_value(v, &dac, &chain.k_curve, "v").unwrap();
            prop_assert!((got - v).abs() < 0.01);
        }
    }
}
