//! Static models of the analog devices the DACs bias: the
//! compound-junction flux qubit and the tunable inter-qubit coupler.
//!
//! The qubit is described by its classical potential over the body flux
//! `phi_q` and junction-loop flux `phi_cjj` (both in units of phi0, as are
//! the external biases). In the units `phi0*Ic/(2*pi)`:
//!
//! ```text
//! u = -cos(2*pi*phi_q) * cos(pi*phi_cjj)
//!     + (2*pi^2/beta_q)   * (phi_q   - phi_q_ext)^2
//!     + (2*pi^2/beta_cjj) * (phi_cjj - phi_cjj_ext)^2
//! ```
//!
//! With the junction loop biased past half a quantum the body potential is
//! a double well; the flux bias where both wells are equally deep is the
//! degeneracy point, and locating it is the primitive behind in-situ DAC
//! calibration: whatever static flux a DAC couples into the body must be
//! cancelled by the measured compensation at degeneracy.

use std::f64::consts::PI;
use std::fmt;

use crate::PHI_0_WB;

/// Electrical parameters of one flux qubit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QubitParams {
    pub i_c_ua: f64,
    pub l_body_ph: f64,
    pub l_cjj_ph: f64,
}

impl Default for QubitParams {
    fn default() -> QubitParams {
        QubitParams { i_c_ua: 3.0, l_body_ph: 320.0, l_cjj_ph: 20.0 }
    }
}

impl QubitParams {
    /// Screening parameter of the qubit body loop.
    pub fn beta_body(&self) -> f64 {
        2.0 * PI * (self.l_body_ph * 1e-12) * (self.i_c_ua * 1e-6) / PHI_0_WB
    }

    /// Screening parameter of the junction loop.
    pub fn beta_cjj(&self) -> f64 {
        2.0 * PI * (self.l_cjj_ph * 1e-12) * (self.i_c_ua * 1e-6) / PHI_0_WB
    }
}

/// Qubit potential in units of `phi0*Ic/(2*pi)`. All fluxes in phi0.
pub fn potential(p: &QubitParams, phi_q: f64, phi_q_ext: f64, phi_cjj: f64, phi_cjj_ext: f64) -> f64 {
    let beta_q = p.beta_body();
    let beta_cjj = p.beta_cjj();
    debug_assert!(beta_q > 0.0 && beta_cjj > 0.0);
    -(2.0 * PI * phi_q).cos() * (PI * phi_cjj).cos()
        + (2.0 * PI * PI / beta_q) * (phi_q - phi_q_ext).powi(2)
        + (2.0 * PI * PI / beta_cjj) * (phi_cjj - phi_cjj_ext).powi(2)
}

/// Potential along the body-flux axis with the junction loop pinned to its
/// external bias. The junction loop is much stiffer than the body
/// (beta_cjj << 1), so its internal flux tracks the bias closely and the
/// one-dimensional cut captures the well structure.
pub fn potential_1d(p: &QubitParams, phi_q: f64, phi_q_ext: f64, phi_cjj_ext: f64) -> f64 {
    potential(p, phi_q, phi_q_ext, phi_cjj_ext, phi_cjj_ext)
}

/// Default convergence tolerance for the degeneracy search, in phi0.
pub const DEGENERACY_TOL_PHI0: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Well {
    location: f64,
    depth: f64,
}

fn golden_min(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> Well {
    const INVPHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INVPHI * (b - a);
    let mut d = a + INVPHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a) > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INVPHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INVPHI * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    Well { location: x, depth: f(x) }
}

/// Strict local minima of the 1-D potential near total body bias `t`,
/// deepest first.
fn find_wells(p: &QubitParams, phi_cjj_ext: f64, t: f64) -> Vec<Well> {
    const GRID: usize = 1501;
    let lo = t - 0.75;
    let hi = t + 0.75;
    let step = (hi - lo) / (GRID - 1) as f64;
    let u: Vec<f64> = (0..GRID)
        .map(|i| potential_1d(p, lo + i as f64 * step, t, phi_cjj_ext))
        .collect();
    let f = |x: f64| potential_1d(p, x, t, phi_cjj_ext);
    let mut wells = Vec::new();
    for i in 1..GRID - 1 {
        if u[i] < u[i - 1] && u[i] < u[i + 1] {
            let a = lo + (i - 1) as f64 * step;
            let b = lo + (i + 1) as f64 * step;
            wells.push(golden_min(&f, a, b, 1e-10));
        }
    }
    wells.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    wells.dedup_by(|a, b| (a.location - b.location).abs() < 1e-6);
    wells
}

/// Depth difference (left well minus right well) of the two deepest wells
/// at total body bias `t`. Positive when the right well is deeper.
fn well_imbalance(p: &QubitParams, phi_cjj_ext: f64, t: f64) -> Result<f64, DeviceError> {
    let wells = find_wells(p, phi_cjj_ext, t);
    if wells.len() < 2 {
        return Err(DeviceError::SingleWell);
    }
    let (a, b) = (wells[0], wells[1]);
    let (left, right) = if a.location < b.location { (a, b) } else { (b, a) };
    Ok(left.depth - right.depth)
}

/// Compensation flux (in phi0) that brings the qubit to its degeneracy
/// point when `applied_flux_phi0` is already coupled into the body.
///
/// The junction-loop bias must put the body in the double-well regime
/// (`cos(pi * phi_cjj_ext) < 0`). The search brackets the nearest integer
/// quantum and bisects the well-depth imbalance to `tol` in flux.
pub fn degeneracy_point_with(
    p: &QubitParams,
    phi_cjj_ext: f64,
    applied_flux_phi0: f64,
    tol: f64,
) -> Result<f64, DeviceError> {
    if (PI * phi_cjj_ext).cos() >= 0.0 {
        return Err(DeviceError::SingleWell);
    }
    if !(tol > 0.0) {
        return Err(DeviceError::NonPhysical);
    }
    let center = applied_flux_phi0.round();
    let mut lo = center - 0.05;
    let mut hi = center + 0.05;
    let d_lo = well_imbalance(p, phi_cjj_ext, lo)?;
    let d_hi = well_imbalance(p, phi_cjj_ext, hi)?;
    if d_lo == 0.0 {
        return Ok(lo - applied_flux_phi0);
    }
    if d_hi == 0.0 {
        return Ok(hi - applied_flux_phi0);
    }
    if d_lo.signum() == d_hi.signum() {
        return Err(DeviceError::NotBracketed);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let d_mid = well_imbalance(p, phi_cjj_ext, mid)?;
        if d_mid == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if d_mid.signum() == d_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi) - applied_flux_phi0)
}

/// Degeneracy point with no pre-applied flux.
pub fn degeneracy_point(p: &QubitParams, phi_cjj_ext: f64) -> Result<f64, DeviceError> {
    degeneracy_point_with(p, phi_cjj_ext, 0.0, DEGENERACY_TOL_PHI0)
}

/// Body-flux locations and depths of the two deepest wells, left then
/// right, at the given biases.
pub fn well_pair(
    p: &QubitParams,
    phi_cjj_ext: f64,
    phi_q_ext: f64,
) -> Result<((f64, f64), (f64, f64)), DeviceError> {
    let wells = find_wells(p, phi_cjj_ext, phi_q_ext);
    if wells.len() < 2 {
        return Err(DeviceError::SingleWell);
    }
    let (a, b) = (wells[0], wells[1]);
    let (l, r) = if a.location < b.location { (a, b) } else { (b, a) };
    Ok(((l.location, l.depth), (r.location, r.depth)))
}

/// A time series of flux values, as (time_ns, flux_phi0) samples.
pub type Waveform = Vec<(f64, f64)>;

/// Static offset plus gain applied to a flux waveform, modeling a DAC
/// conditioning an externally supplied analog signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainElement {
    pub offset_phi0: f64,
    pub gain: f64,
}

impl GainElement {
    pub fn identity() -> GainElement {
        GainElement { offset_phi0: 0.0, gain: 1.0 }
    }

    pub fn apply(&self, flux_phi0: f64) -> f64 {
        self.offset_phi0 + self.gain * flux_phi0
    }
}

/// Applies a gain element sample-wise to a waveform.
pub fn scaled_signal(g: &GainElement, w: &Waveform) -> Waveform {
    w.iter().map(|&(t, v)| (t, g.apply(v))).collect()
}

/// Flux dependence of a tunable coupler's qubit-to-qubit mutual
/// inductance. The junction loop of the coupler screens the geometric
/// mutual nonlinearly:
///
/// ```text
/// M(phi) = m_afm * cos(pi*phi) / (1 + chi * cos(pi*phi))    [pH]
/// ```
///
/// which runs monotonically from a positive value at zero bias through
/// zero at half a quantum to a larger-magnitude negative value at the
/// full span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplerCurve {
    pub m_afm_ph: f64,
    pub chi: f64,
    pub span_phi0: f64,
}

impl Default for CouplerCurve {
    fn default() -> CouplerCurve {
        CouplerCurve { m_afm_ph: 1.8, chi: 0.3, span_phi0: 0.968 }
    }
}

impl CouplerCurve {
    /// Mutual inductance in pH at the given coupler flux bias.
    pub fn mutual_ph(&self, flux_phi0: f64) -> Result<f64, DeviceError> {
        if flux_phi0.abs() > self.span_phi0 {
            return Err(DeviceError::OutOfSpan { flux_phi0, span_phi0: self.span_phi0 });
        }
        let c = (PI * flux_phi0).cos();
        Ok(self.m_afm_ph * c / (1.0 + self.chi * c))
    }

    /// Largest mutual magnitude reachable with either sign, in pH. Signal
    /// scaling treats this as one unit of coupling strength.
    pub fn unit_mutual_ph(&self) -> f64 {
        let at_zero = self.mutual_ph(0.0).expect("zero is in span");
        let at_span = self.mutual_ph(self.span_phi0).expect("span edge is in span");
        at_zero.min(at_span.abs())
    }

    /// Coupler flux (in phi0, on the non-negative branch) that realizes
    /// the requested mutual. Inverse of `mutual_ph` by bisection on the
    /// monotone branch `[0, span]`.
    pub fn flux_for_mutual(&self, target_ph: f64) -> Result<f64, DeviceError> {
        let hi_val = self.mutual_ph(0.0)?;
        let lo_val = self.mutual_ph(self.span_phi0)?;
        if target_ph > hi_val || target_ph < lo_val {
            return Err(DeviceError::MutualOutOfRange {
                target_ph,
                min_ph: lo_val,
                max_ph: hi_val,
            });
        }
        let mut lo = 0.0f64;
        let mut hi = self.span_phi0;
        // mutual_ph is decreasing on [lo, hi]
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let v = self.mutual_ph(mid)?;
            if v > target_ph {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-14 {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeviceError {
    /// The junction-loop bias does not produce a double-well potential.
    SingleWell,
    /// No sign change of the well imbalance inside the search bracket.
    NotBracketed,
    OutOfSpan { flux_phi0: f64, span_phi0: f64 },
    MutualOutOfRange { target_ph: f64, min_ph: f64, max_ph: f64 },
    NonPhysical,
}

impl fmt::Display for DeviceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceError::SingleWell => {
                write!(f, "potential has a single well at this junction-loop bias")
            }
            DeviceError::NotBracketed => {
                write!(f, "degeneracy point not bracketed by the search window")
            }
            DeviceError::OutOfSpan { flux_phi0, span_phi0 } => {
                write!(f, "flux {flux_phi0} phi0 outside coupler span +-{span_phi0} phi0")
            }
            DeviceError::MutualOutOfRange { target_ph, min_ph, max_ph } => {
                write!(f, "mutual {target_ph} pH outside reachable [{min_ph}, {max_ph}] pH")
            }
            DeviceError::NonPhysical => write!(f, "parameters outside the physical domain"),
        }
    }
}

impl std::error::Error for DeviceError {}
