//! Two-stage superconducting flux DAC model.
//!
//! Each DAC stores integer numbers of flux quanta in a COARSE and a FINE
//! storage loop. Both loops couple into the same target transformer; the
//! FINE loop is attenuated by the ratio `gamma`, so the coupled output flux
//! is
//!
//! ```text
//! phi_out = k * (n_coarse + n_fine / gamma)   [units of phi0]
//! ```
//!
//! Storage capacity is set by the loop screening parameter
//! `beta = 2*pi*L*Ic/phi0`: loops in the beta range 75..300 hold roughly
//! 10..40 quanta, after which further pulses of the same sign are rejected.
//! Each stage is emptied through a reset SQUID; when the reset SQUID's
//! junctions are mismatched by more than about 5% a single reset pulse can
//! strand one or two quanta, and repeated pulses are needed to fully empty
//! the loop.

use rand::Rng;
use std::collections::BTreeMap;
use std::fmt;

use crate::kvfile;

/// The four DAC flavors on the processor, named after what they bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DacType {
    /// Static flux offset applied to a qubit body.
    QubitFlux,
    /// Minor-lobe trim of a qubit's compound-compound Josephson junction.
    CcjjMinor,
    /// Qubit inductance tuner.
    LTuner,
    /// Inter-qubit coupler (also used for persistent-current compensators
    /// and breakout dc-SQUIDs, which share the coupler design).
    Coupler,
}

impl DacType {
    pub const ALL: [DacType; 4] =
        [DacType::QubitFlux, DacType::CcjjMinor, DacType::LTuner, DacType::Coupler];

    pub fn section_name(self) -> &'static str {
        match self {
            DacType::QubitFlux => "qubit_flux",
            DacType::CcjjMinor => "ccjj",
            DacType::LTuner => "l_tuner",
            DacType::Coupler => "coupler",
        }
    }
}

impl fmt::Display for DacType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.section_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Fine,
}

/// Design/operating parameters for one DAC flavor.
#[derive(Debug, Clone, PartialEq)]
pub struct DacDesign {
    pub dac_type: DacType,
    /// Flux coupled into the target per COARSE quantum, in phi0.
    pub k: f64,
    /// COARSE-to-FINE attenuation ratio.
    pub gamma: f64,
    pub capacity_coarse: u32,
    pub capacity_fine: u32,
    /// One-sided span the target device needs, in phi0.
    pub span_phi0: f64,
    /// Smallest useful increment the target device needs, in phi0.
    pub min_step_phi0: f64,
    pub beta_coarse: f64,
    pub beta_fine: f64,
    /// Fractional critical-current mismatch of the reset SQUID junctions.
    pub reset_junction_mismatch: f64,
}

/// Threshold above which a reset SQUID's junction mismatch leaves residual
/// flux after a single reset pulse.
pub const RESET_MISMATCH_THRESHOLD: f64 = 0.05;

/// Capacity in quanta for a storage loop with the given screening
/// parameter. The map is linear and matches the observed 10..40 quanta
/// over beta in 75..300.
pub fn capacity_from_beta(beta: f64) -> Result<u32, FluxDacError> {
    if !(75.0..=300.0).contains(&beta) {
        return Err(FluxDacError::BetaOutOfRange { beta });
    }
    Ok((beta / 7.5).floor() as u32)
}

impl DacDesign {
    /// Design-target parameters for each DAC flavor.
    pub fn designed(dac_type: DacType) -> DacDesign {
        let (k_mphi0, gamma, cap_c, cap_f, span_mphi0, min_step_mphi0) = match dac_type {
            DacType::QubitFlux => (3.0, 14.1, 17, 17, 25.5, 0.1),
            DacType::CcjjMinor => (5.6, 14.1, 17, 17, 66.1, 0.4),
            DacType::LTuner => (11.3, 10.7, 40, 10, 465.0, 1.1),
            DacType::Coupler => (23.6, 10.6, 40, 10, 968.0, 2.2),
        };
        DacDesign {
            dac_type,
            k: k_mphi0 * 1e-3,
            gamma,
            capacity_coarse: cap_c,
            capacity_fine: cap_f,
            span_phi0: span_mphi0 * 1e-3,
            min_step_phi0: min_step_mphi0 * 1e-3,
            beta_coarse: 7.5 * cap_c as f64,
            beta_fine: 7.5 * cap_f as f64,
            reset_junction_mismatch: 0.0,
        }
    }

    /// As-fabricated parameters measured on the reference chip.
    pub fn achieved(dac_type: DacType) -> DacDesign {
        let (coarse_mphi0, fine_mphi0, cap_c, cap_f) = match dac_type {
            DacType::QubitFlux => (3.506, 0.268, 22, 17),
            DacType::CcjjMinor => (3.899, 0.296, 22, 17),
            DacType::LTuner => (8.481, 1.061, 40, 10),
            DacType::Coupler => (19.0221, 1.788, 35, 10),
        };
        let designed = DacDesign::designed(dac_type);
        DacDesign {
            dac_type,
            k: coarse_mphi0 * 1e-3,
            gamma: coarse_mphi0 / fine_mphi0,
            capacity_coarse: cap_c,
            capacity_fine: cap_f,
            beta_coarse: 7.5 * cap_c as f64,
            beta_fine: 7.5 * cap_f as f64,
            ..designed
        }
    }

    /// COARSE step in phi0.
    pub fn coarse_step(&self) -> f64 {
        self.k
    }

    /// FINE step in phi0.
    pub fn fine_step(&self) -> f64 {
        self.k / self.gamma
    }

    /// Copy with the transformer coupling perturbed by a relative factor,
    /// modeling fabrication spread.
    pub fn with_k_scaled(&self, factor: f64) -> DacDesign {
        DacDesign { k: self.k * factor, ..self.clone() }
    }

    /// Reads one flavor's parameters from a parsed key=value section;
    /// missing keys fall back to the designed values.
    pub fn from_section(
        dac_type: DacType,
        section: &BTreeMap<String, String>,
    ) -> Result<DacDesign, FluxDacError> {
        const KNOWN: [&str; 9] = [
            "coarse_step_mphi0",
            "fine_step_mphi0",
            "coarse_capacity",
            "fine_capacity",
            "span_mphi0",
            "min_step_mphi0",
            "beta_coarse",
            "beta_fine",
            "reset_mismatch",
        ];
        for key in section.keys() {
            if !KNOWN.contains(&key.as_str()) {
                return Err(FluxDacError::UnknownKey { section: dac_type.section_name(), key: key.clone() });
            }
        }
        let get = |key: &str| kvfile::get_f64(section, key).map_err(FluxDacError::from_kv);
        let getu = |key: &str| kvfile::get_u32(section, key).map_err(FluxDacError::from_kv);

        let mut d = DacDesign::designed(dac_type);
        if let Some(coarse) = get("coarse_step_mphi0")? {
            d.k = coarse * 1e-3;
            d.gamma = match get("fine_step_mphi0")? {
                Some(fine) => coarse / fine,
                None => d.gamma,
            };
        } else if let Some(fine) = get("fine_step_mphi0")? {
            d.gamma = d.k / (fine * 1e-3);
        }
        if let Some(v) = getu("coarse_capacity")? {
            d.capacity_coarse = v;
            d.beta_coarse = 7.5 * v as f64;
        }
        if let Some(v) = getu("fine_capacity")? {
            d.capacity_fine = v;
            d.beta_fine = 7.5 * v as f64;
        }
        if let Some(v) = get("span_mphi0")? {
            d.span_phi0 = v * 1e-3;
        }
        if let Some(v) = get("min_step_mphi0")? {
            d.min_step_phi0 = v * 1e-3;
        }
        if let Some(v) = get("beta_coarse")? {
            d.beta_coarse = v;
            d.capacity_coarse = capacity_from_beta(v)?;
        }
        if let Some(v) = get("beta_fine")? {
            d.beta_fine = v;
            d.capacity_fine = capacity_from_beta(v)?;
        }
        if let Some(v) = get("reset_mismatch")? {
            d.reset_junction_mismatch = v;
        }
        if d.k <= 0.0 || d.gamma <= 0.0 {
            return Err(FluxDacError::NonPhysical);
        }
        Ok(d)
    }

    /// Renders the flavor's parameters as a key=value section body.
    pub fn to_section(&self) -> BTreeMap<String, String> {
        let mut s = BTreeMap::new();
        s.insert("coarse_step_mphi0".into(), format!("{}", self.k * 1e3));
        s.insert("fine_step_mphi0".into(), format!("{}", self.fine_step() * 1e3));
        s.insert("coarse_capacity".into(), format!("{}", self.capacity_coarse));
        s.insert("fine_capacity".into(), format!("{}", self.capacity_fine));
        s.insert("span_mphi0".into(), format!("{}", self.span_phi0 * 1e3));
        s.insert("min_step_mphi0".into(), format!("{}", self.min_step_phi0 * 1e3));
        s.insert("reset_mismatch".into(), format!("{}", self.reset_junction_mismatch));
        s
    }
}

/// One flavor-complete set of DAC parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    designs: BTreeMap<DacType, DacDesign>,
}

impl ParameterSet {
    pub fn designed() -> ParameterSet {
        ParameterSet {
            designs: DacType::ALL.iter().map(|&t| (t, DacDesign::designed(t))).collect(),
        }
    }

    pub fn achieved() -> ParameterSet {
        ParameterSet {
            designs: DacType::ALL.iter().map(|&t| (t, DacDesign::achieved(t))).collect(),
        }
    }

    pub fn get(&self, t: DacType) -> &DacDesign {
        &self.designs[&t]
    }

    pub fn set(&mut self, d: DacDesign) {
        self.designs.insert(d.dac_type, d);
    }

    /// Loads a parameter file; sections not present keep designed values.
    pub fn from_kv_text(text: &str) -> Result<ParameterSet, FluxDacError> {
        let sections = kvfile::parse(text).map_err(FluxDacError::from_kv)?;
        let mut set = ParameterSet::designed();
        for (name, body) in &sections {
            if name.is_empty() && body.is_empty() {
                continue;
            }
            let t = DacType::ALL
                .iter()
                .copied()
                .find(|t| t.section_name() == name)
                .ok_or_else(|| FluxDacError::UnknownKey { section: "", key: format!("[{name}]") })?;
            set.set(DacDesign::from_section(t, body)?);
        }
        Ok(set)
    }

    pub fn to_kv_text(&self) -> String {
        let sections: kvfile::Sections = self
            .designs
            .values()
            .map(|d| (d.dac_type.section_name().to_string(), d.to_section()))
            .collect();
        kvfile::render(&sections)
    }
}

/// A single storage loop.
#[derive(Debug, Clone, PartialEq)]
pub struct DacStage {
    stored: i32,
    pub capacity: u32,
    pub beta: f64,
    pub reset_junction_mismatch: f64,
}

impl DacStage {
    pub fn new(capacity: u32, beta: f64, reset_junction_mismatch: f64) -> DacStage {
        DacStage { stored: 0, capacity, beta, reset_junction_mismatch }
    }

    pub fn stored(&self) -> i32 {
        self.stored
    }

    /// Adds one flux quantum of the given sign. Returns false (and leaves
    /// the loop unchanged) if the loop is already saturated in that
    /// direction.
    pub fn apply_quantum(&mut self, sign: i8) -> bool {
        debug_assert!(sign == 1 || sign == -1, "quantum sign must be +1 or -1");
        let next = self.stored + sign as i32;
        if next.unsigned_abs() > self.capacity {
            return false;
        }
        self.stored = next;
        true
    }

    pub fn set_stored(&mut self, value: i32) -> Result<(), FluxDacError> {
        if value.unsigned_abs() > self.capacity {
            return Err(FluxDacError::OverCapacity { value, capacity: self.capacity });
        }
        self.stored = value;
        Ok(())
    }

    /// Applies `pulse_count` reset pulses and returns the residual stored
    /// flux. A well-matched reset SQUID empties the loop on the first
    /// pulse. Above the mismatch threshold each pulse leaves a residual
    /// drawn from {0, +-1, +-2} (probabilities 0.5, 0.2 each, 0.05 each),
    /// capped at the currently stored magnitude, so the residual shrinks
    /// to zero geometrically over repeated pulses.
    pub fn reset<R: Rng>(&mut self, pulse_count: u32, rng: &mut R) -> i32 {
        for _ in 0..pulse_count {
            if self.stored == 0 {
                break;
            }
            if self.reset_junction_mismatch <= RESET_MISMATCH_THRESHOLD {
                self.stored = 0;
                break;
            }
            let u: f64 = rng.gen();
            let drawn: i32 = if u < 0.5 {
                0
            } else if u < 0.7 {
                1
            } else if u < 0.9 {
                -1
            } else if u < 0.95 {
                2
            } else {
                -2
            };
            let capped = drawn.clamp(-self.stored.abs(), self.stored.abs());
            self.stored = capped;
        }
        self.stored
    }
}

/// A complete two-stage DAC.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageDac {
    pub coarse: DacStage,
    pub fine: DacStage,
    pub k: f64,
    pub gamma: f64,
    pub dac_type: DacType,
}

impl TwoStageDac {
    pub fn from_design(d: &DacDesign) -> TwoStageDac {
        TwoStageDac {
            coarse: DacStage::new(d.capacity_coarse, d.beta_coarse, d.reset_junction_mismatch),
            fine: DacStage::new(d.capacity_fine, d.beta_fine, d.reset_junction_mismatch),
            k: d.k,
            gamma: d.gamma,
            dac_type: d.dac_type,
        }
    }

    pub fn stage(&self, s: Stage) -> &DacStage {
        match s {
            Stage::Coarse => &self.coarse,
            Stage::Fine => &self.fine,
        }
    }

    pub fn stage_mut(&mut self, s: Stage) -> &mut DacStage {
        match s {
            Stage::Coarse => &mut self.coarse,
            Stage::Fine => &mut self.fine,
        }
    }

    pub fn apply_quantum(&mut self, s: Stage, sign: i8) -> bool {
        self.stage_mut(s).apply_quantum(sign)
    }

    /// Flux coupled into the target device, in phi0.
    pub fn output_flux(&self) -> f64 {
        self.output_at(self.coarse.stored, self.fine.stored)
    }

    /// Output flux for hypothetical stage contents, in phi0.
    pub fn output_at(&self, n_coarse: i32, n_fine: i32) -> f64 {
        self.k * (n_coarse as f64 + n_fine as f64 / self.gamma)
    }

    pub fn stored(&self) -> (i32, i32) {
        (self.coarse.stored, self.fine.stored)
    }

    pub fn set_stored(&mut self, n_coarse: i32, n_fine: i32) -> Result<(), FluxDacError> {
        // Validate both before mutating either.
        if n_coarse.unsigned_abs() > self.coarse.capacity {
            return Err(FluxDacError::OverCapacity { value: n_coarse, capacity: self.coarse.capacity });
        }
        if n_fine.unsigned_abs() > self.fine.capacity {
            return Err(FluxDacError::OverCapacity { value: n_fine, capacity: self.fine.capacity });
        }
        self.coarse.stored = n_coarse;
        self.fine.stored = n_fine;
        Ok(())
    }

    /// Whether the FINE range stitches adjacent COARSE steps together:
    /// the full FINE swing must cover at least one COARSE step.
    pub fn coverage_check(&self) -> Coverage {
        let overlap_ratio = 2.0 * self.fine.capacity as f64 / self.gamma;
        Coverage { overlap_ratio, covered: overlap_ratio >= 1.0 }
    }

    /// Number of distinct output levels over the full stage ranges.
    pub fn representable_levels(&self) -> usize {
        let mut keys = std::collections::BTreeSet::new();
        let cc = self.coarse.capacity as i32;
        let cf = self.fine.capacity as i32;
        for nc in -cc..=cc {
            for nf in -cf..=cf {
                let v = nc as f64 * self.gamma + nf as f64;
                keys.insert(v.to_bits());
            }
        }
        keys.len()
    }

    /// Nearest representable stage contents for a requested output flux.
    pub fn quantize(&self, phi_target: f64) -> Result<(i32, i32), FluxDacError> {
        let cc = self.coarse.capacity as i32;
        let cf = self.fine.capacity as i32;
        let ideal = phi_target / self.k;
        let center = ideal.round().clamp(-(cc as f64), cc as f64) as i32;
        let mut best: Option<(f64, i32, i32)> = None;
        for nc in (center - 2).max(-cc)..=(center + 2).min(cc) {
            let nf_ideal = (ideal - nc as f64) * self.gamma;
            let nf = nf_ideal.round().clamp(-(cf as f64), cf as f64) as i32;
            for cand in [nf - 1, nf, nf + 1] {
                if cand.abs() > cf {
                    continue;
                }
                let err = (self.output_at(nc, cand) - phi_target).abs();
                let better = match best {
                    None => true,
                    Some((e, _, bf)) => {
                        err < e - 1e-15 || (err < e + 1e-15 && cand.abs() < bf.abs())
                    }
                };
                if better {
                    best = Some((err, nc, cand));
                }
            }
        }
        let (_, nc, nf) = best.expect("candidate window is never empty");
        Ok((nc, nf))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub overlap_ratio: f64,
    pub covered: bool,
}

/// Symmetric 3-port inductance matrix of the FINE/COARSE/target
/// transformer, in henries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InductanceMatrix3 {
    pub l_fine: f64,
    pub l_coarse: f64,
    pub l_target: f64,
    pub m_fine_coarse: f64,
    pub m_fine_target: f64,
    pub m_coarse_target: f64,
}

impl InductanceMatrix3 {
    /// Extracted values for the reference chip's qubit-flux DAC
    /// transformer.
    pub fn reference_qubit_flux() -> InductanceMatrix3 {
        InductanceMatrix3 {
            l_fine: 3.50e-9,
            l_coarse: 3.90e-9,
            l_target: 7.8e-12,
            m_fine_coarse: 9.9e-12,
            m_fine_target: 0.7e-12,
            m_coarse_target: -10.2e-12,
        }
    }

    fn is_positive_definite(&self) -> bool {
        let m11 = self.l_fine;
        let m2 = self.l_fine * self.l_coarse - self.m_fine_coarse.powi(2);
        let m3 = self.l_fine * (self.l_coarse * self.l_target - self.m_coarse_target.powi(2))
            - self.m_fine_coarse
                * (self.m_fine_coarse * self.l_target - self.m_coarse_target * self.m_fine_target)
            + self.m_fine_target
                * (self.m_fine_coarse * self.m_coarse_target - self.l_coarse * self.m_fine_target);
        m11 > 0.0 && m2 > 0.0 && m3 > 0.0
    }
}

/// Derives the per-quantum coupling `k` and the COARSE/FINE attenuation
/// `gamma` from the transformer inductance matrix. A stage holding `n`
/// quanta circulates `n*phi0/L`, coupling `n*phi0*|M|/L` into the target,
/// so `k = |M_ct|/L_c` and `gamma = (|M_ct|/L_c) / (|M_ft|/L_f)`.
pub fn k_gamma_from_inductances(m: &InductanceMatrix3) -> Result<(f64, f64), FluxDacError> {
    if !m.is_positive_definite() {
        return Err(FluxDacError::NonPhysical);
    }
    let k = m.m_coarse_target.abs() / m.l_coarse;
    let fine_coupling = m.m_fine_target.abs() / m.l_fine;
    if fine_coupling == 0.0 {
        return Err(FluxDacError::NonPhysical);
    }
    Ok((k, k / fine_coupling))
}

#[derive(Debug, Clone, PartialEq)]
pub enum FluxDacError {
    OverCapacity { value: i32, capacity: u32 },
    BetaOutOfRange { beta: f64 },
    NonPhysical,
    UnknownKey { section: &'static str, key: String },
    FileFormat(String),
}

impl FluxDacError {
    fn from_kv(e: kvfile::KvError) -> FluxDacError {
        FluxDacError::FileFormat(e.to_string())
    }
}

impl fmt::Display for FluxDacError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FluxDacError::OverCapacity { value, capacity } => {
                write!(f, "stored value {value} exceeds stage capacity {capacity}")
            }
            FluxDacError::BetaOutOfRange { beta } => {
                write!(f, "beta = {beta} outside the modeled 75..300 range")
            }
            FluxDacError::NonPhysical => write!(f, "inductance matrix is not physical"),
            FluxDacError::UnknownKey { section, key } => {
                write!(f, "unknown key `{key}` in section [{section}]")
            }
            FluxDacError::FileFormat(msg) => write!(f, "parameter file: {msg}"),
        }
    }
}

impl std::error::Error for FluxDacError {}
