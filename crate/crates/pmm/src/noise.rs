//! Dissipation and flux noise a storage DAC presents to its target qubit.
//!
//! The only resistive element in the programming system is the shunt
//! across each stage's reset junction. Seen from the qubit, that
//! resistance is transformed twice: the junction inductance divides it
//! against the storage loop inductance, and the weak storage-to-qubit
//! mutual divides it against the qubit loop. The result is an equivalent
//! parallel resistance `r_eq` across the qubit of tens of megohms, and a
//! Johnson flux noise level well below intrinsic 1/f noise.
//!
//! The lumped circuit is:
//!
//! ```text
//! Y_shunt = 1/R + 1/(jwLdj) + jwCdj          reset shunt, junction L and C
//! Z_dac   = 1/Y_shunt + jwLdac               storage loop
//! Z_refl  = (wM)^2 / Z_dac                   reflected into the qubit
//! Y_qubit = 1/(jwLq + Z_refl) + 1/(jwLqj) + jwCqj
//! r_eq    = 1 / Re(Y_qubit)
//! ```

use num_complex::Complex64;
use std::fmt;

use crate::{K_B_J_PER_K, PHI_0_WB};

/// Whether the DAC stage adjacent to the qubit holds flux. Stored flux
/// biases the stage junction and raises its effective inductance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DacState {
    Empty,
    Full,
}

/// Lumped element values for one qubit-flux DAC stage and its qubit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseCircuitParams {
    pub r_shunt_ohm: f64,
    pub l_junction_empty_ph: f64,
    pub l_junction_full_ph: f64,
    pub c_junction_ff: f64,
    pub l_storage_nh: f64,
    pub m_ph: f64,
    pub l_qubit_ph: f64,
    pub l_qubit_junction_ph: f64,
    pub c_qubit_junction_ff: f64,
}

impl Default for NoiseCircuitParams {
    fn default() -> NoiseCircuitParams {
        NoiseCircuitParams {
            r_shunt_ohm: 0.9,
            l_junction_empty_ph: 26.0,
            l_junction_full_ph: 36.0,
            c_junction_ff: 160.0,
            l_storage_nh: 3.6,
            m_ph: 10.2,
            l_qubit_ph: 320.0,
            l_qubit_junction_ph: 91.0,
            c_qubit_junction_ff: 200.0,
        }
    }
}

impl NoiseCircuitParams {
    fn l_junction_h(&self, state: DacState) -> f64 {
        match state {
            DacState::Empty => self.l_junction_empty_ph * 1e-12,
            DacState::Full => self.l_junction_full_ph * 1e-12,
        }
    }
}

/// The lumped model ignores on-chip propagation delay and is trusted only
/// below this frequency.
pub const LUMPED_VALIDITY_MAX_HZ: f64 = 100e9;

pub fn lumped_model_valid(f_hz: f64) -> bool {
    f_hz > 0.0 && f_hz <= LUMPED_VALIDITY_MAX_HZ
}

/// Admittance seen across the qubit at frequency `f_hz`.
pub fn qubit_admittance(
    p: &NoiseCircuitParams,
    f_hz: f64,
    state: DacState,
) -> Result<Complex64, NoiseError> {
    if !(f_hz > 0.0) || !f_hz.is_finite() {
        return Err(NoiseError::NonPositiveFrequency { f_hz });
    }
    let w = 2.0 * std::f64::consts::PI * f_hz;
    let j = Complex64::new(0.0, 1.0);

    let l_dj = p.l_junction_h(state);
    let c_dj = p.c_junction_ff * 1e-15;
    let l_dac = p.l_storage_nh * 1e-9;
    let m = p.m_ph * 1e-12;
    let l_q = p.l_qubit_ph * 1e-12;
    let l_qj = p.l_qubit_junction_ph * 1e-12;
    let c_qj = p.c_qubit_junction_ff * 1e-15;

    let y_shunt = Complex64::new(1.0 / p.r_shunt_ohm, 0.0) + 1.0 / (j * w * l_dj) + j * w * c_dj;
    let z_dac = y_shunt.inv() + j * w * l_dac;
    let z_refl = Complex64::new((w * m).powi(2), 0.0) / z_dac;
    let y_qubit = (j * w * l_q + z_refl).inv() + (j * w * l_qj).inv() + j * w * c_qj;
    Ok(y_qubit)
}

/// Equivalent parallel resistance across the qubit, in ohms.
pub fn r_eq(p: &NoiseCircuitParams, f_hz: f64, state: DacState) -> Result<f64, NoiseError> {
    let y = qubit_admittance(p, f_hz, state)?;
    let re = y.re;
    if re <= 0.0 {
        return Err(NoiseError::NonPhysical);
    }
    Ok(1.0 / re)
}

/// Low-frequency closed form for `r_eq`: the shunt resistance stepped up
/// by the (storage loop / junction) and (qubit loop / mutual) inductance
/// ratios. Useful as an order-of-magnitude cross-check.
pub fn r_eq_low_frequency_estimate(p: &NoiseCircuitParams, state: DacState) -> f64 {
    let l_dj = p.l_junction_h(state);
    let l_loop = p.l_storage_nh * 1e-9 + l_dj;
    let l_q_total = (p.l_qubit_ph + p.l_qubit_junction_ph) * 1e-12;
    let m = p.m_ph * 1e-12;
    p.r_shunt_ohm * (l_loop / l_dj).powi(2) * (l_q_total / m).powi(2)
}

/// One-sided Johnson flux noise amplitude referred to the qubit, in
/// phi0 per sqrt(Hz): `Lq * sqrt(4 kB T / r_eq) / phi0`.
pub fn flux_noise_density(
    r_eq_ohm: f64,
    l_qubit_ph: f64,
    temperature_k: f64,
) -> Result<f64, NoiseError> {
    if r_eq_ohm <= 0.0 || temperature_k < 0.0 || l_qubit_ph <= 0.0 {
        return Err(NoiseError::NonPhysical);
    }
    let l_q = l_qubit_ph * 1e-12;
    Ok(l_q * (4.0 * K_B_J_PER_K * temperature_k / r_eq_ohm).sqrt() / PHI_0_WB)
}

/// Fraction of an AC signal on a qubit's inductance-tuner loop that leaks
/// into the qubit body when the tuner junctions are mismatched by the
/// given fraction. Nominally zero at zero tuner flux; grows as
/// `mismatch * tan(pi * flux)` and diverges toward a half quantum.
pub fn ltuner_transfer_fraction(flux_phi0: f64, mismatch: f64) -> f64 {
    mismatch * (std::f64::consts::PI * flux_phi0).tan()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseError {
    NonPositiveFrequency { f_hz: f64 },
    NonPhysical,
}

impl fmt::Display for NoiseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseError::NonPositiveFrequency { f_hz } => {
                write!(f, "frequency must be positive, got {f_hz} Hz")
            }
            NoiseError::NonPhysical => write!(f, "parameters outside the physical domain"),
        }
    }
}

impl std::error::Error for NoiseError {}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const P: NoiseCircuitParams = NoiseCircuitParams {
        r_shunt_ohm: 0.9,
        l_junction_empty_ph: 26.0,
        l_junction_full_ph: 36.0,
        c_junction_ff: 160.0,
        l_storage_nh: 3.6,
        m_ph: 10.2,
        l_qubit_ph: 320.0,
        l_qubit_junction_ph: 91.0,
        c_qubit_junction_ff: 200.0,
    };

    #[test]
    fn default_params_match_reference_values() {
        assert_eq!(NoiseCircuitParams::default(), P);
    }

    #[test]
    fn empty_stage_requ_is_tens_of_megohms_and_flat() {
        let lo = r_eq(&P, 1e6, DacState::Empty).unwrap();
        assert!((lo - 1.7224e7).abs() / 1.7224e7 < 1e-3, "r_eq = {lo}");
        let hi = r_eq(&P, 1e8, DacState::Empty).unwrap();
        assert!((hi - lo).abs() / lo < 0.02, "lo {lo} hi {hi}");
    }

    #[test]
    fn stored_flux_lowers_requ_roughly_by_inductance_ratio_squared() {
        let empty = r_eq(&P, 1e6, DacState::Empty).unwrap();
        let full = r_eq(&P, 1e6, DacState::Full).unwrap();
        assert!((full - 9.035e6).abs() / 9.035e6 < 1e-3, "r_eq full = {full}");
        let expected_ratio = (26.0f64 / 36.0).powi(2);
        assert!((full / empty - expected_ratio).abs() < 0.02);
    }

    #[test]
    fn closed_form_matches_circuit_within_factor_three() {
        for state in [DacState::Empty, DacState::Full] {
            let est = r_eq_low_frequency_estimate(&P, state);
            let exact = r_eq(&P, 1e6, state).unwrap();
            let ratio = est / exact;
            assert!((1.0 / 3.0..3.0).contains(&ratio), "{state:?}: ratio {ratio}");
        }
    }

    #[test]
    fn requ_rises_above_a_few_gigahertz() {
        let band = r_eq(&P, 1e8, DacState::Empty).unwrap();
        let ten_ghz = r_eq(&P, 1e10, DacState::Empty).unwrap();
        let hundred_ghz = r_eq(&P, LUMPED_VALIDITY_MAX_HZ, DacState::Empty).unwrap();
        assert!(ten_ghz > 2.0 * band, "{ten_ghz} vs {band}");
        assert!(hundred_ghz > ten_ghz);
    }

    #[test]
    fn johnson_flux_noise_at_base_temperature() {
        let d = flux_noise_density(1e7, 320.0, 0.02).unwrap();
        assert!((d - 5.143e-11).abs() / 5.143e-11 < 1e-3, "density = {d}");
        // Parked well under a typical 1/f amplitude of ~1e-6 phi0/rtHz at 1 Hz.
        assert!(d < 1e-9);
    }

    #[test]
    fn noise_scales_as_sqrt_temperature_and_inverse_sqrt_resistance() {
        let base = flux_noise_density(1e7, 320.0, 0.02).unwrap();
        let hot = flux_noise_density(1e7, 320.0, 0.08).unwrap();
        assert!((hot / base - 2.0).abs() < 1e-12);
        let stiff = flux_noise_density(4e7, 320.0, 0.02).unwrap();
        assert!((stiff / base - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ltuner_leakage_grows_with_bias_and_mismatch() {
        assert_eq!(ltuner_transfer_fraction(0.0, 0.02), 0.0);
        let f = ltuner_transfer_fraction(0.25, 0.01);
        assert!((f - 0.01).abs() < 1e-15);
        assert!(ltuner_transfer_fraction(0.4, 0.01) > f);
        assert!((ltuner_transfer_fraction(-0.25, 0.01) + 0.01).abs() < 1e-15);
    }

    #[test]
    fn domain_errors_are_reported() {
        assert!(matches!(
            r_eq(&P, 0.0, DacState::Empty),
            Err(NoiseError::NonPositiveFrequency { .. })
        ));
        assert!(matches!(
            r_eq(&P, -5.0, DacState::Empty),
            Err(NoiseError::NonPositiveFrequency { .. })
        ));
        assert!(flux_noise_density(-1.0, 320.0, 0.02).is_err());
        assert!(flux_noise_density(1e7, 320.0, -0.1).is_err());
        assert!(!lumped_model_valid(0.0));
        assert!(lumped_model_valid(1e9));
        assert!(!lumped_model_valid(2e11));
    }

    proptest! {
        #[test]
        fn dissipation_is_passive_everywhere(log_f in 3.0f64..11.0, full in any::<bool>()) {
            let state = if full { DacState::Full } else { DacState::Empty };
            let y = qubit_admittance(&P, 10f64.powf(log_f), state).unwrap();
            prop_assert!(y.re > 0.0);
        }
    }
}
