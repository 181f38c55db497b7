//! Full-system acceptance checks. Each test prints one labeled
//! pass/fail line (visible with `--nocapture`) before asserting, so a
//! run of this target reads as a checklist.

use std::collections::BTreeMap;

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use statrs::distribution::Normal;

use pmm::annealer::{
    anneal_probabilities, quantize_problem, AnnealSchedule, IsingProblem, TransferChain,
};
use pmm::controller::{
    calibrate_dac, CalibrationTarget, CompileMode, Controller, MeasurementModel,
};
use pmm::demux::{
    error_upper_bound, per_pulse_error_budget, AddressTree, PulseOp, RoutingOutcome, TreeConfig,
};
use pmm::device::QubitParams;
use pmm::flux_dac::{
    k_gamma_from_inductances, DacDesign, DacStage, DacType, InductanceMatrix3, ParameterSet,
    Stage, TwoStageDac,
};
use pmm::noise::{flux_noise_density, r_eq, DacState, NoiseCircuitParams};
use pmm::topology::{build_grid, parts_count, DacId};

fn check(label: &str, ok: bool, detail: &str) {
    println!("acceptance {label}: {} ({detail})", if ok { "pass" } else { "FAIL" });
    assert!(ok, "{label}: {detail}");
}

/// Tree configuration with the soft failure walls disabled, so the gate
/// failure probability is exactly `p_gate` everywhere inside the hard
/// margins.
fn walls_off(p_gate: f64) -> TreeConfig {
    TreeConfig {
        p_gate,
        bias_wall_width_ua: 0.0,
        address_wall_width_mphi0: 0.0,
        ..TreeConfig::default()
    }
}

fn random_cell_problem(rng: &mut ChaCha12Rng) -> IsingProblem {
    let grid = build_grid(1, 1).unwrap();
    let n = grid.qubits.len();
    let h: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let k: BTreeMap<(usize, usize), f64> = grid
        .edge_indices()
        .into_iter()
        .map(|e| (e, rng.gen_range(-1.0..=1.0)))
        .collect();
    IsingProblem::new(n, h, k).unwrap()
}

#[test]
fn a01_part_count_table() {
    let expected = [
        (1u32, 8u64, 16u64, 56u64, 1500u64),
        (2, 32, 72, 232, 6000),
        (4, 128, 328, 968, 24000),
        (8, 512, 1416, 3976, 96000),
        (16, 2048, 5896, 16136, 384000),
    ];
    let mut ok = true;
    for (edge, qubits, couplers, dacs, junctions) in expected {
        let p = parts_count(&build_grid(edge, edge).unwrap());
        ok &= (p.qubits, p.couplers, p.dacs, p.junctions) == (qubits, couplers, dacs, junctions);
    }
    check("01 part-count table", ok, "five square grids, all four columns exact");
}

#[test]
fn a02_stage_coverage() {
    // Adjacent COARSE sweeps must overlap: the top of each FINE sweep
    // reaches past the bottom of the next one.
    let d = DacDesign::achieved(DacType::QubitFlux);
    let dac = TwoStageDac::from_design(&d);
    let cap_c = d.capacity_coarse as i32;
    let cap_f = d.capacity_fine as i32;
    let mut overlap = true;
    for nc in -cap_c..cap_c {
        overlap &= dac.output_at(nc, cap_f) >= dac.output_at(nc + 1, -cap_f);
    }
    let mut covered = true;
    for &t in &DacType::ALL {
        for d in [DacDesign::designed(t), DacDesign::achieved(t)] {
            covered &= TwoStageDac::from_design(&d).coverage_check().covered;
        }
    }
    check(
        "02 stage coverage",
        overlap && covered,
        "FINE bridges adjacent COARSE values; all flavors gap-free under both tables",
    );
}

#[test]
fn a03_transformer_attenuation() {
    let (k, gamma) =
        k_gamma_from_inductances(&InductanceMatrix3::reference_qubit_flux()).unwrap();
    let measured = 3.506 / 0.268;
    let ok = k > 0.0 && (gamma / measured - 1.0).abs() < 0.05;
    check(
        "03 transformer attenuation",
        ok,
        &format!("gamma {gamma:.4} within 5% of measured {measured:.4}"),
    );
}

#[test]
fn a04_coupler_saturation() {
    let d = DacDesign::achieved(DacType::Coupler);
    let mut dac = TwoStageDac::from_design(&d);
    dac.set_stored(35, 0).unwrap();
    let full_scale = dac.output_flux();
    let clipped = !dac.apply_quantum(Stage::Coarse, 1);
    let ok = clipped && (full_scale - 0.665).abs() <= d.fine_step();
    check(
        "04 coupler saturation",
        ok,
        &format!("COARSE clips at 35 quanta = {full_scale:.4} phi0 (0.665 within a FINE step)"),
    );
}

#[test]
fn a05_routing_statistics() {
    let mut tree = AddressTree::new(walls_off(1e-3), 2025).unwrap();
    let n = 1_000_000u64;
    let mut misloads = 0u64;
    for i in 0..n {
        let leaf = (i % tree.leaf_count() as u64) as usize;
        let op = PulseOp::to_leaf(0, tree.config().depth, leaf, 1);
        match tree.route(&op).unwrap() {
            RoutingOutcome::Delivered { .. } => {}
            _ => misloads += 1,
        }
    }
    let q = 1.0 - (1.0 - 1e-3f64).powi(6);
    let sigma = (q * (1.0 - q) / n as f64).sqrt();
    let rate = misloads as f64 / n as f64;
    let ok_rate = (rate - q).abs() <= 3.0 * sigma;

    let bound = error_upper_bound(15_000_000, 0, 0.95).unwrap();
    let ok_bound = (1.9e-7..=3.0e-7).contains(&bound);
    check(
        "05 routing statistics",
        ok_rate && ok_bound,
        &format!(
            "misload rate {rate:.4e} vs {q:.4e} (3 sigma = {:.1e}); soak bound {bound:.4e}",
            3.0 * sigma
        ),
    );
}

#[test]
fn a06_error_budget() {
    // A full reprogramming of the largest chip issues ~3.2e5 pulses.
    let quanta = 3.2e5 / 16136.0;
    let large = per_pulse_error_budget(16136, quanta, 100, 100, 0.95).unwrap();
    let small = per_pulse_error_budget(968, quanta, 100, 100, 0.95).unwrap();
    let within = |x: f64, target: f64| x >= target / 3.0 && x <= target * 3.0;
    check(
        "06 error budget",
        within(large, 1e-9) && within(small, 1e-8),
        &format!("16136 DACs -> {large:.3e} (~1e-9); 968 DACs -> {small:.3e} (~1e-8)"),
    );
}

#[test]
fn a07_addressing_exclusivity() {
    let grid = build_grid(1, 1).unwrap();
    let mut controller =
        Controller::new(&grid, &ParameterSet::designed(), walls_off(0.0), 7).unwrap();
    let n = controller.dac_count() as u32;
    let mut violations = 0u32;
    for hold in 0..n {
        let targets: BTreeMap<DacId, (i32, i32)> =
            (0..n).filter(|&id| id != hold).map(|id| (id, (3, -2))).collect();
        let report =
            controller.apply_targets(&targets, CompileMode::Incremental, 100 + hold as u64).unwrap();
        assert!(report.clean(), "programming the other {} DACs must succeed", n - 1);
        if controller.dac(hold).unwrap().dac.stored() != (0, 0) {
            violations += 1;
        }
        let zero: BTreeMap<DacId, (i32, i32)> = (0..n).map(|id| (id, (0, 0))).collect();
        let back =
            controller.apply_targets(&zero, CompileMode::Incremental, 200 + hold as u64).unwrap();
        assert!(back.clean());
    }
    check(
        "07 addressing exclusivity",
        violations == 0,
        &format!("{n} held-out DACs untouched while the other {} were programmed", n - 1),
    );
}

#[test]
fn a08_round_trip() {
    let grid = build_grid(1, 1).unwrap();
    let mut controller =
        Controller::new(&grid, &ParameterSet::designed(), walls_off(0.0), 11).unwrap();
    let n = controller.dac_count() as u32;
    let mut rng = ChaCha12Rng::seed_from_u64(808);
    let zero_current: BTreeMap<DacId, (i32, i32)> = BTreeMap::new();
    let mut all_exact = true;
    let mut cost_ok = true;
    for trial in 0..1000u64 {
        let mut targets = BTreeMap::new();
        for id in 0..n {
            if rng.gen_bool(0.5) {
                let d = &controller.dac(id).unwrap().dac;
                let cap_c = d.coarse.capacity as i32;
                let cap_f = d.fine.capacity as i32;
                targets
                    .insert(id, (rng.gen_range(-cap_c..=cap_c), rng.gen_range(-cap_f..=cap_f)));
            }
        }
        let incremental =
            controller.compile(&zero_current, &targets, CompileMode::Incremental).unwrap();
        let reset_first =
            controller.compile(&zero_current, &targets, CompileMode::ResetFirst).unwrap();
        cost_ok &= incremental.pulse_count() <= reset_first.pulse_count();

        let report = controller.execute(&incremental, 9000 + trial).unwrap();
        all_exact &= report.clean();
        for (&id, &value) in &targets {
            all_exact &= controller.dac(id).unwrap().dac.stored() == value;
        }
        let zero_targets: BTreeMap<DacId, (i32, i32)> =
            targets.keys().map(|&id| (id, (0, 0))).collect();
        let back =
            controller.apply_targets(&zero_targets, CompileMode::Incremental, 50_000 + trial).unwrap();
        all_exact &= back.clean();
    }
    check(
        "08 round trip",
        all_exact && cost_ok,
        "1000 random target maps land exactly; incremental never costs more pulses",
    );
}

#[test]
fn a09_noise() {
    let p = NoiseCircuitParams::default();
    let mut in_window = true;
    for f in [1e3, 1e6, 1e8] {
        for state in [DacState::Empty, DacState::Full] {
            let r = r_eq(&p, f, state).unwrap();
            in_window &= (5e6..=5e7).contains(&r);
        }
    }
    let rises = r_eq(&p, 1e10, DacState::Empty).unwrap()
        > 2.0 * r_eq(&p, 1e6, DacState::Empty).unwrap();
    let density = flux_noise_density(1e7, 320.0, 0.02).unwrap();
    let density_ok = (density - 5e-11).abs() <= 1e-11 && density < 1.3e-6 * 1e-2;
    check(
        "09 noise",
        in_window && rises && density_ok,
        &format!("r_eq in [5, 50] Mohm below 100 MHz, rising by 10 GHz; density {density:.3e} phi0/rtHz"),
    );
}

#[test]
fn a10_annealing() {
    let mut rng = ChaCha12Rng::seed_from_u64(4242);
    let t_fs = [16.0, 40.0, 160.0];
    let mut monotone = true;
    let mut norm_ok = true;
    let mut min_final = 1.0f64;
    for _ in 0..20 {
        let problem = random_cell_problem(&mut rng);
        let mut prev = 0.0;
        for (i, &t_f) in t_fs.iter().enumerate() {
            let report =
                anneal_probabilities(&problem, &AnnealSchedule::reference(t_f)).unwrap();
            norm_ok &= report.norm_error < 1e-8;
            if i > 0 {
                monotone &= report.ground_probability >= prev - 0.02;
            }
            prev = report.ground_probability;
        }
        min_final = min_final.min(prev);
    }
    check(
        "10 annealing",
        monotone && norm_ok && min_final >= 0.9,
        &format!(
            "20 instances over t_f 16..160 ns: monotone, norm conserved, worst slow-anneal ground probability {min_final:.3}"
        ),
    );
}

#[test]
fn a11_quantization() {
    let chain = TransferChain::reference();
    let mut rng = ChaCha12Rng::seed_from_u64(1111);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let problem = random_cell_problem(&mut rng);
        let q = quantize_problem(&problem, &chain).unwrap();
        worst = worst.max(q.max_scale_error);
    }
    check(
        "11 quantization",
        worst <= 0.05,
        &format!("100 random instances: worst full-scale coefficient error {worst:.3e} <= 5%"),
    );
}

#[test]
fn a12_calibration_spread() {
    let base = DacDesign::achieved(DacType::QubitFlux);
    let qubit = QubitParams::default();
    let target = CalibrationTarget::QubitDegeneracy { cjj_bias_phi0: 1.0 };
    let model = MeasurementModel::default();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(1212);
    let mut recovered = Vec::with_capacity(121);
    for i in 0..121u64 {
        let z: f64 = normal.sample(&mut rng);
        let d = base.with_k_scaled(1.0 + 0.012 * z);
        let mut dac = TwoStageDac::from_design(&d);
        let record = calibrate_dac(&mut dac, &qubit, target, 2.0, &model, 7000 + i).unwrap();
        recovered.push(record.k_measured);
    }
    let mean = recovered.iter().sum::<f64>() / recovered.len() as f64;
    let var = recovered.iter().map(|k| (k - mean).powi(2)).sum::<f64>()
        / (recovered.len() - 1) as f64;
    let sigma_rel = var.sqrt() / mean;
    let spread_ok = (0.009..=0.015).contains(&sigma_rel);

    // Without read noise each coupling comes back to 4 significant digits.
    let quiet = MeasurementModel { sigma_flux_phi0: 0.0, ..model };
    let mut exact = true;
    for (i, factor) in [0.988, 0.994, 1.0, 1.006, 1.012].into_iter().enumerate() {
        let d = base.with_k_scaled(factor);
        let mut dac = TwoStageDac::from_design(&d);
        let record = calibrate_dac(&mut dac, &qubit, target, 2.0, &quiet, i as u64).unwrap();
        exact &= ((record.k_measured - d.k) / d.k).abs() < 1e-4;
    }
    check(
        "12 calibration spread",
        spread_ok && exact,
        &format!("recovered sigma {:.2}% in [0.9%, 1.5%]; noise-free reads to 4 digits", sigma_rel * 100.0),
    );
}

#[test]
fn a13_reset_pathology() {
    let mismatch = 0.08;
    let mut rng = ChaCha12Rng::seed_from_u64(31415);
    let mut one_pulse_nonzero = 0u32;
    let mut residual_in_band = true;
    for _ in 0..2000 {
        let mut stage = DacStage::new(17, 127.5, mismatch);
        stage.set_stored(17).unwrap();
        let residual = stage.reset(1, &mut rng);
        if residual != 0 {
            one_pulse_nonzero += 1;
            residual_in_band &= (1..=2).contains(&residual.abs());
        }
    }
    let trials = 10_000u32;
    let mut emptied = 0u32;
    for _ in 0..trials {
        let mut stage = DacStage::new(17, 127.5, mismatch);
        stage.set_stored(17).unwrap();
        if stage.reset(10, &mut rng) == 0 {
            emptied += 1;
        }
    }
    let fraction = emptied as f64 / trials as f64;
    check(
        "13 reset pathology",
        one_pulse_nonzero > 0 && residual_in_band && fraction >= 0.999,
        &format!(
            "one pulse leaves 1-2 quanta in {}/2000 trials; 10 pulses empty {:.2}%",
            one_pulse_nonzero,
            fraction * 100.0
        ),
    );
}
