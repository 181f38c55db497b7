//! Orchestration layer: owns every DAC on a chip together with the
//! pulse-routing trees that reach them, compiles target states into
//! pulse programs, executes programs through the routing model, and
//! runs in-situ calibration of individual DACs.
//!
//! Addressing: DAC `id` lives on tree `id / 32` at slot `id % 32`; the
//! slot's even leaf feeds the COARSE stage and the odd leaf the FINE
//! stage. All trees share address and bias lines, so they run at a
//! common operating point.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use statrs::distribution::Normal;
use std::collections::BTreeMap;
use std::fmt;

use rand::distributions::Distribution;

use crate::demux::{
    leaf_for, slot_stage, AddressTree, DemuxError, PulseOp, RouteError, RoutingOutcome, TreeConfig,
};
use crate::device::{degeneracy_point_with, DeviceError, QubitParams, DEGENERACY_TOL_PHI0};
use crate::flux_dac::{DacType, FluxDacError, ParameterSet, Stage, TwoStageDac};
use crate::topology::{DacId, DacRole, DeviceId, UnitCellGrid};

/// DAC slots served per tree (64 leaves, two stages per DAC).
pub const SLOTS_PER_TREE: usize = 32;

/// Maximum reset pulses spent per stage before giving up.
pub const MAX_RESET_PULSES: u32 = 10;

/// DAC flavor used for each assignment role. Persistent-current
/// compensators and readout breakouts reuse the coupler design.
pub fn dac_type_for_role(role: DacRole) -> DacType {
    match role {
        DacRole::QubitFlux => DacType::QubitFlux,
        DacRole::CcjjMinorA | DacRole::CcjjMinorB => DacType::CcjjMinor,
        DacRole::LTuner => DacType::LTuner,
        DacRole::IpCompensator | DacRole::InterQubitCoupler | DacRole::Breakout => DacType::Coupler,
    }
}

/// Tree/slot coordinates of one DAC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DacAddress {
    pub tree: usize,
    pub slot: usize,
}

/// One physical DAC with its identity, role, state, and address.
#[derive(Debug, Clone)]
pub struct ProgrammableDac {
    pub id: DacId,
    pub device: DeviceId,
    pub role: DacRole,
    pub dac: TwoStageDac,
    pub address: DacAddress,
}

/// How a pulse program reaches its targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompileMode {
    /// Pulse each stage by the signed difference from the current state.
    Incremental,
    /// Reset every stage, then program each target from zero.
    ResetFirst,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProgOp {
    Reset { dac: DacId, stage: Stage },
    Pulse { dac: DacId, stage: Stage, polarity: i8 },
}

/// A compiled sequence of reset and programming pulses.
#[derive(Debug, Clone)]
pub struct PulseProgram {
    pub ops: Vec<ProgOp>,
    /// State every DAC should hold after execution.
    pub expected_final: BTreeMap<DacId, (i32, i32)>,
    pub routed_pulse_count: u64,
    pub reset_pulse_count: u64,
}

impl PulseProgram {
    pub fn pulse_count(&self) -> u64 {
        self.routed_pulse_count + self.reset_pulse_count
    }
}

/// Flat per-program cost summary. Wall-clock time is dominated by the
/// post-programming thermal recovery, not by pulse throughput, so it is
/// modeled as a constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgramCost {
    pub pulse_count: u64,
    pub programming_time_s: f64,
}

pub const PROGRAMMING_TIME_S: f64 = 1e-3;

/// Mismatch between a DAC stage's expected and achieved state after a
/// program ran, with the routing events that touched it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Discrepancy {
    pub dac: DacId,
    pub stage: Stage,
    pub expected: i32,
    pub achieved: i32,
    /// Pulses addressed to this stage that never arrived.
    pub lost: u32,
    /// Pulses that arrived here but were addressed elsewhere.
    pub stray: u32,
    /// Pulses that arrived while the stage was saturated.
    pub saturated_hits: u32,
}

#[derive(Debug, Clone)]
pub struct ExecutionReport {
    pub achieved: BTreeMap<DacId, (i32, i32)>,
    pub discrepancies: Vec<Discrepancy>,
    pub routed_pulses: u64,
    pub reset_pulses: u64,
    pub drops: u64,
    pub misroutes: u64,
}

impl ExecutionReport {
    pub fn clean(&self) -> bool {
        self.discrepancies.is_empty()
    }
}

/// Flux measurement used during calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementModel {
    /// One-sigma flux read noise per measurement, in phi0.
    pub sigma_flux_phi0: f64,
    /// Measurements averaged per point.
    pub repeats: u32,
}

impl Default for MeasurementModel {
    fn default() -> MeasurementModel {
        MeasurementModel { sigma_flux_phi0: 2.68e-5, repeats: 4 }
    }
}

/// How the flux a DAC applies is read back during calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibrationTarget {
    /// Bias the target qubit into its double-well regime and read the
    /// compensation flux that restores degeneracy.
    QubitDegeneracy { cjj_bias_phi0: f64 },
    /// Read the applied flux directly (bench-style measurement).
    DirectCompensation,
}

/// Measured transfer parameters of one DAC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationRecord {
    pub k_measured: f64,
    pub gamma_measured: f64,
    /// Mutual of the shared analog line, extracted from the period of
    /// the qubit response; exact within this model.
    pub analog_mutual_ph: f64,
    /// One-sigma uncertainty of `k_measured`.
    pub k_uncertainty: f64,
}

/// Quanta loaded into a stage for its calibration measurement.
const CALIBRATION_COARSE_QUANTA: i32 = 5;

/// Measures one DAC's coarse coupling and stage attenuation by loading
/// known quanta counts and reading back the applied flux. The DAC is
/// returned to its prior state.
pub fn calibrate_dac(
    dac: &mut TwoStageDac,
    qubit: &QubitParams,
    target: CalibrationTarget,
    analog_mutual_ph: f64,
    model: &MeasurementModel,
    seed: u64,
) -> Result<CalibrationRecord, ControllerError> {
    if model.repeats == 0 {
        return Err(ControllerError::BadState("measurement repeats must be positive".into()));
    }
    let prior = dac.stored();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut measure = |dac: &TwoStageDac| -> Result<f64, ControllerError> {
        let applied = dac.output_flux();
        let true_flux = match target {
            CalibrationTarget::QubitDegeneracy { cjj_bias_phi0 } => {
                -degeneracy_point_with(qubit, cjj_bias_phi0, applied, DEGENERACY_TOL_PHI0)
                    .map_err(ControllerError::Unmeasurable)?
            }
            CalibrationTarget::DirectCompensation => applied,
        };
        let mut sum = 0.0;
        for _ in 0..model.repeats {
            sum += true_flux + model.sigma_flux_phi0 * normal.sample(&mut rng);
        }
        Ok(sum / model.repeats as f64)
    };

    dac.set_stored(CALIBRATION_COARSE_QUANTA, 0).map_err(ControllerError::Dac)?;
    let coarse_flux = measure(dac)?;
    let k_measured = coarse_flux / CALIBRATION_COARSE_QUANTA as f64;

    let fine_quanta = dac.fine.capacity as i32;
    dac.set_stored(0, fine_quanta).map_err(ControllerError::Dac)?;
    let fine_flux = measure(dac)?;
    let k_fine = fine_flux / fine_quanta as f64;

    dac.set_stored(prior.0, prior.1).map_err(ControllerError::Dac)?;

    if !(k_fine.abs() > 0.0) {
        return Err(ControllerError::BadState("fine stage produced no measurable flux".into()));
    }
    let sigma_mean = model.sigma_flux_phi0 / (model.repeats as f64).sqrt();
    Ok(CalibrationRecord {
        k_measured,
        gamma_measured: k_measured / k_fine,
        analog_mutual_ph,
        k_uncertainty: sigma_mean / CALIBRATION_COARSE_QUANTA as f64,
    })
}

/// The full programming system of one chip.
pub struct Controller {
    dacs: Vec<ProgrammableDac>,
    trees: Vec<AddressTree>,
    qubit_params: QubitParams,
    pub analog_mutual_ph: f64,
    pub cjj_calibration_bias_phi0: f64,
    pub measurement: MeasurementModel,
}

impl Controller {
    /// Builds the controller for a chip: one DAC per assignment in the
    /// grid, parameters chosen per role, and enough trees to address
    /// them all. Tree `i` is seeded with `seed + i`.
    pub fn new(
        grid: &UnitCellGrid,
        params: &ParameterSet,
        tree_config: TreeConfig,
        seed: u64,
    ) -> Result<Controller, ControllerError> {
        let mut entries: Vec<(DacId, DeviceId, DacRole)> = Vec::new();
        for (device, assignments) in &grid.dac_assignments {
            for a in assignments {
                entries.push((a.dac, device.clone(), a.role));
            }
        }
        entries.sort_by_key(|e| e.0);
        let mut dacs = Vec::with_capacity(entries.len());
        for (expect, (id, device, role)) in entries.into_iter().enumerate() {
            if id as usize != expect {
                return Err(ControllerError::BadState(format!(
                    "DAC ids are not dense: expected {expect}, found {id}"
                )));
            }
            let design = params.get(dac_type_for_role(role));
            dacs.push(ProgrammableDac {
                id,
                device,
                role,
                dac: TwoStageDac::from_design(design),
                address: DacAddress {
                    tree: id as usize / SLOTS_PER_TREE,
                    slot: id as usize % SLOTS_PER_TREE,
                },
            });
        }
        let tree_count = dacs.len().div_ceil(SLOTS_PER_TREE).max(1);
        let mut trees = Vec::with_capacity(tree_count);
        for i in 0..tree_count {
            trees.push(
                AddressTree::new(tree_config.clone(), seed + i as u64)
                    .map_err(ControllerError::Demux)?,
            );
        }
        Ok(Controller {
            dacs,
            trees,
            qubit_params: QubitParams::default(),
            analog_mutual_ph: 2.0,
            cjj_calibration_bias_phi0: 1.0,
            measurement: MeasurementModel::default(),
        })
    }

    pub fn dac_count(&self) -> usize {
        self.dacs.len()
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    pub fn dac(&self, id: DacId) -> Option<&ProgrammableDac> {
        self.dacs.get(id as usize)
    }

    pub fn dac_mut(&mut self, id: DacId) -> Option<&mut ProgrammableDac> {
        self.dacs.get_mut(id as usize)
    }

    pub fn dacs(&self) -> &[ProgrammableDac] {
        &self.dacs
    }

    pub fn qubit_params(&self) -> &QubitParams {
        &self.qubit_params
    }

    /// Sets the shared bias/address operating point on every tree.
    pub fn set_operating_point(&mut self, bias_ua: f64, address_mphi0: f64) {
        for tree in &mut self.trees {
            tree.set_operating_point(bias_ua, address_mphi0);
        }
    }

    pub fn current_state(&self) -> BTreeMap<DacId, (i32, i32)> {
        self.dacs.iter().map(|d| (d.id, d.dac.stored())).collect()
    }

    fn check_target(&self, id: DacId, value: (i32, i32)) -> Result<(), ControllerError> {
        let dac = self.dac(id).ok_or(ControllerError::UnknownDac { dac: id })?;
        if value.0.unsigned_abs() > dac.dac.coarse.capacity {
            return Err(ControllerError::TargetOutOfRange {
                dac: id,
                stage: Stage::Coarse,
                value: value.0,
                capacity: dac.dac.coarse.capacity,
            });
        }
        if value.1.unsigned_abs() > dac.dac.fine.capacity {
            return Err(ControllerError::TargetOutOfRange {
                dac: id,
                stage: Stage::Fine,
                value: value.1,
                capacity: dac.dac.fine.capacity,
            });
        }
        Ok(())
    }

    /// Compiles a pulse program that drives the chip from `current` to
    /// `targets`. DACs absent from `current` are taken to be empty;
    /// DACs absent from `targets` keep their current state
    /// (incremental) or end empty (reset-first). Pulses are grouped by
    /// polarity (positive first) because the polarity lives on shared
    /// bias lines, then ordered by tree, slot, and stage.
    pub fn compile(
        &self,
        current: &BTreeMap<DacId, (i32, i32)>,
        targets: &BTreeMap<DacId, (i32, i32)>,
        mode: CompileMode,
    ) -> Result<PulseProgram, ControllerError> {
        for (&id, &value) in targets {
            self.check_target(id, value)?;
        }
        for (&id, &value) in current {
            self.check_target(id, value)?;
        }
        let mut ops = Vec::new();
        let mut reset_pulse_count = 0u64;
        if mode == CompileMode::ResetFirst {
            for dac in &self.dacs {
                ops.push(ProgOp::Reset { dac: dac.id, stage: Stage::Coarse });
                ops.push(ProgOp::Reset { dac: dac.id, stage: Stage::Fine });
                reset_pulse_count += 2;
            }
        }
        // (polarity group, tree, slot, stage) -> pulse count
        let mut pulses: Vec<(u8, usize, usize, u8, DacId, i8, u32)> = Vec::new();
        let mut expected_final = BTreeMap::new();
        for dac in &self.dacs {
            let from = match mode {
                CompileMode::ResetFirst => (0, 0),
                CompileMode::Incremental => current.get(&dac.id).copied().unwrap_or((0, 0)),
            };
            let to = match mode {
                CompileMode::ResetFirst => targets.get(&dac.id).copied().unwrap_or((0, 0)),
                CompileMode::Incremental => targets.get(&dac.id).copied().unwrap_or(from),
            };
            expected_final.insert(dac.id, to);
            for (stage_idx, delta) in [(0u8, to.0 - from.0), (1u8, to.1 - from.1)] {
                if delta == 0 {
                    continue;
                }
                let polarity: i8 = if delta > 0 { 1 } else { -1 };
                pulses.push((
                    (polarity < 0) as u8,
                    dac.address.tree,
                    dac.address.slot,
                    stage_idx,
                    dac.id,
                    polarity,
                    delta.unsigned_abs(),
                ));
            }
        }
        pulses.sort();
        let mut routed_pulse_count = 0u64;
        for (_, _, _, stage_idx, id, polarity, count) in pulses {
            let stage = if stage_idx == 0 { Stage::Coarse } else { Stage::Fine };
            for _ in 0..count {
                ops.push(ProgOp::Pulse { dac: id, stage, polarity });
            }
            routed_pulse_count += count as u64;
        }
        Ok(PulseProgram { ops, expected_final, routed_pulse_count, reset_pulse_count })
    }

    pub fn program_cost(&self, program: &PulseProgram) -> ProgramCost {
        ProgramCost {
            pulse_count: program.pulse_count(),
            programming_time_s: PROGRAMMING_TIME_S,
        }
    }

    /// Runs a compiled program against the chip. Routing noise draws
    /// from the trees' own streams; reset residual draws use a stream
    /// seeded by `seed`.
    pub fn execute(
        &mut self,
        program: &PulseProgram,
        seed: u64,
    ) -> Result<ExecutionReport, ControllerError> {
        let mut reset_rng = ChaCha12Rng::seed_from_u64(seed);
        let mut routed_pulses = 0u64;
        let mut reset_pulses = 0u64;
        let mut drops = 0u64;
        let mut misroutes = 0u64;
        // (dac index, stage index) -> event counters
        let mut lost: BTreeMap<(usize, u8), u32> = BTreeMap::new();
        let mut stray: BTreeMap<(usize, u8), u32> = BTreeMap::new();
        let mut saturated: BTreeMap<(usize, u8), u32> = BTreeMap::new();
        let stage_idx = |s: Stage| matches!(s, Stage::Fine) as u8;
        for op in &program.ops {
            match *op {
                ProgOp::Reset { dac, stage } => {
                    let d = self
                        .dacs
                        .get_mut(dac as usize)
                        .ok_or(ControllerError::UnknownDac { dac })?;
                    for _ in 0..MAX_RESET_PULSES {
                        reset_pulses += 1;
                        d.dac.stage_mut(stage).reset(1, &mut reset_rng);
                        if d.dac.stage(stage).stored() == 0 {
                            break;
                        }
                    }
                }
                ProgOp::Pulse { dac, stage, polarity } => {
                    let address = self
                        .dacs
                        .get(dac as usize)
                        .ok_or(ControllerError::UnknownDac { dac })?
                        .address;
                    let leaf = leaf_for(address.slot, stage);
                    let tree = &mut self.trees[address.tree];
                    let pulse = PulseOp::to_leaf(address.tree, tree.config().depth, leaf, polarity);
                    routed_pulses += 1;
                    match tree.route(&pulse).map_err(ControllerError::Routing)? {
                        RoutingOutcome::Delivered { .. } => {
                            let d = &mut self.dacs[dac as usize];
                            if !d.dac.apply_quantum(stage, polarity) {
                                *saturated.entry((dac as usize, stage_idx(stage))).or_default() +=
                                    1;
                            }
                        }
                        RoutingOutcome::Misrouted { leaf } => {
                            misroutes += 1;
                            *lost.entry((dac as usize, stage_idx(stage))).or_default() += 1;
                            let (slot, hit_stage) = slot_stage(leaf);
                            let victim = address.tree * SLOTS_PER_TREE + slot;
                            if let Some(v) = self.dacs.get_mut(victim) {
                                let key = (victim, stage_idx(hit_stage));
                                *stray.entry(key).or_default() += 1;
                                if !v.dac.apply_quantum(hit_stage, polarity) {
                                    *saturated.entry(key).or_default() += 1;
                                }
                            }
                        }
                        RoutingOutcome::Dropped => {
                            drops += 1;
                            *lost.entry((dac as usize, stage_idx(stage))).or_default() += 1;
                        }
                    }
                }
            }
        }
        let achieved = self.current_state();
        let mut discrepancies = Vec::new();
        for d in &self.dacs {
            let expected = program.expected_final.get(&d.id).copied().unwrap_or((0, 0));
            let got = d.dac.stored();
            for (stage, s_idx, exp, ach) in
                [(Stage::Coarse, 0u8, expected.0, got.0), (Stage::Fine, 1u8, expected.1, got.1)]
            {
                if exp != ach {
                    let key = (d.id as usize, s_idx);
                    discrepancies.push(Discrepancy {
                        dac: d.id,
                        stage,
                        expected: exp,
                        achieved: ach,
                        lost: lost.get(&key).copied().unwrap_or(0),
                        stray: stray.get(&key).copied().unwrap_or(0),
                        saturated_hits: saturated.get(&key).copied().unwrap_or(0),
                    });
                }
            }
        }
        Ok(ExecutionReport { achieved, discrepancies, routed_pulses, reset_pulses, drops, misroutes })
    }

    /// Compiles from the controller's own state and executes.
    pub fn apply_targets(
        &mut self,
        targets: &BTreeMap<DacId, (i32, i32)>,
        mode: CompileMode,
        seed: u64,
    ) -> Result<ExecutionReport, ControllerError> {
        let program = self.compile(&self.current_state(), targets, mode)?;
        self.execute(&program, seed)
    }

    /// Calibrates one DAC in place using the controller's qubit model
    /// and measurement settings.
    pub fn calibrate(
        &mut self,
        id: DacId,
        target: CalibrationTarget,
        seed: u64,
    ) -> Result<CalibrationRecord, ControllerError> {
        let qubit = self.qubit_params;
        let analog = self.analog_mutual_ph;
        let model = self.measurement;
        let d = self.dac_mut(id).ok_or(ControllerError::UnknownDac { dac: id })?;
        calibrate_dac(&mut d.dac, &qubit, target, analog, &model, seed)
    }
}

#[derive(Debug)]
pub enum ControllerError {
    UnknownDac { dac: DacId },
    TargetOutOfRange { dac: DacId, stage: Stage, value: i32, capacity: u32 },
    Routing(RouteError),
    Unmeasurable(DeviceError),
    Dac(FluxDacError),
    Demux(DemuxError),
    BadState(String),
}

impl fmt::Display for ControllerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControllerError::UnknownDac { dac } => write!(f, "no DAC with id {dac}"),
            ControllerError::TargetOutOfRange { dac, stage, value, capacity } => write!(
                f,
                "target {value} exceeds capacity {capacity} on DAC {dac} {stage:?} stage"
            ),
            ControllerError::Routing(e) => write!(f, "routing: {e}"),
            ControllerError::Unmeasurable(e) => write!(f, "calibration measurement: {e}"),
            ControllerError::Dac(e) => write!(f, "dac: {e}"),
            ControllerError::Demux(e) => write!(f, "tree: {e}"),
            ControllerError::BadState(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for ControllerError {}
