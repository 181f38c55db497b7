//! Command-line front end for the chip control models.
//!
//! Every subcommand prints a small CSV table or key=value report to
//! stdout (or `--out FILE`); progress notes go to stderr. All stochastic
//! models draw from seeded streams, so a fixed `--seed` reproduces output
//! byte for byte. The seed is resolved from `--seed`, then a `seed` key
//! in the `--config` file, then the `PMM_SEED` environment variable, then
//! zero.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pmm::annealer::{anneal, quantize_problem, AnnealSchedule, IsingProblem, TransferChain};
use pmm::controller::{CalibrationTarget, CompileMode, Controller, MeasurementModel};
use pmm::demux::{
    error_upper_bound, margin_scan, per_pulse_error_budget, AddressTree, PulseOp, RoutingOutcome,
    TreeConfig,
};
use pmm::device::{potential_1d, CouplerCurve, QubitParams};
use pmm::flux_dac::{DacDesign, DacType, ParameterSet, TwoStageDac};
use pmm::kvfile;
use pmm::noise::{flux_noise_density, r_eq, DacState, NoiseCircuitParams};
use pmm::topology::{build_grid, parts_count, DacRole, DeviceId, UnitCellGrid};

#[derive(Parser)]
#[command(name = "pmm", version, about = "Programmable magnetic memory control models")]
struct Cli {
    /// Write the primary output to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for every stochastic model in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// key=value config file; a top-level `seed` key is honored.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Part counts or the coupler list for a grid of unit cells.
    Topology(TopologyArgs),
    /// Output staircase of one two-stage DAC flavor.
    Dac(DacArgs),
    /// Route repeated pulses down one address tree and tally outcomes.
    Demux(DemuxArgs),
    /// Scan the tree operating region over bias and address amplitude.
    Margins(MarginsArgs),
    /// Upper confidence bound on a per-operation error rate.
    Errorbound(ErrorboundArgs),
    /// Per-pulse error budget that keeps programming cycles reliable.
    Budget(BudgetArgs),
    /// Equivalent shunt resistance and flux noise seen by a qubit.
    Noise(NoiseArgs),
    /// Device curves: qubit potential or coupler mutual inductance.
    Device(DeviceArgs),
    /// Quantize a problem, anneal it, and sample the final state.
    Anneal(AnnealArgs),
    /// Compile and execute a full chip programming cycle.
    Program(ProgramArgs),
    /// Measure DAC transfer parameters and emit a parameter file.
    Calibrate(CalibrateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<(), String> {
    let seed = resolve_seed(cli.seed, cli.config.as_deref())?;
    let output = match &cli.command {
        Command::Topology(a) => run_topology(a)?,
        Command::Dac(a) => run_dac(a)?,
        Command::Demux(a) => run_demux(a, seed)?,
        Command::Margins(a) => run_margins(a, seed)?,
        Command::Errorbound(a) => run_errorbound(a)?,
        Command::Budget(a) => run_budget(a)?,
        Command::Noise(a) => run_noise(a)?,
        Command::Device(a) => run_device(a)?,
        Command::Anneal(a) => run_anneal(a, seed)?,
        Command::Program(a) => run_program(a, seed)?,
        Command::Calibrate(a) => run_calibrate(a, seed)?,
    };
    emit(cli.out.as_deref(), &output)
}

fn resolve_seed(explicit: Option<u64>, config: Option<&std::path::Path>) -> Result<u64, String> {
    if let Some(seed) = explicit {
        return Ok(seed);
    }
    if let Some(path) = config {
        let text =
            fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let sections =
            kvfile::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if let Some(global) = sections.get("") {
            if let Some(seed) =
                kvfile::get_u64(global, "seed").map_err(|e| format!("{}: {e}", path.display()))?
            {
                return Ok(seed);
            }
        }
    }
    if let Ok(raw) = std::env::var("PMM_SEED") {
        return raw
            .parse::<u64>()
            .map_err(|_| format!("PMM_SEED must be an unsigned integer, got `{raw}`"));
    }
    Ok(0)
}

fn emit(out: Option<&std::path::Path>, content: &str) -> Result<(), String> {
    match out {
        Some(path) => {
            fs::write(path, content).map_err(|e| format!("{}: {e}", path.display()))
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn read_file(path: &std::path::Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn linspace(min: f64, max: f64, steps: usize) -> Result<Vec<f64>, String> {
    if steps == 0 {
        return Err("grids need at least one point".into());
    }
    if max < min {
        return Err(format!("grid maximum {max} is below minimum {min}"));
    }
    if steps == 1 {
        return Ok(vec![min]);
    }
    Ok((0..steps).map(|i| min + (max - min) * i as f64 / (steps - 1) as f64).collect())
}

// ---------------------------------------------------------------- topology

#[derive(Args)]
struct TopologyArgs {
    /// Unit-cell rows.
    #[arg(long, default_value_t = 1)]
    rows: u32,
    /// Unit-cell columns.
    #[arg(long, default_value_t = 1)]
    cols: u32,
    #[arg(long, value_enum, default_value_t = TopologyFormat::Table)]
    format: TopologyFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyFormat {
    /// One row of part counts.
    Table,
    /// One row per coupler.
    Edgelist,
}

fn run_topology(a: &TopologyArgs) -> Result<String, String> {
    let grid = build_grid(a.rows, a.cols).map_err(|e| e.to_string())?;
    match a.format {
        TopologyFormat::Table => {
            let p = parts_count(&grid);
            let cells = a.rows as u64 * a.cols as u64;
            Ok(format!(
                "cells,qubits,couplers,dacs,junctions\n{},{},{},{},{}\n",
                cells, p.qubits, p.couplers, p.dacs, p.junctions
            ))
        }
        TopologyFormat::Edgelist => {
            let mut out = String::from("index_a,index_b,qubit_a,qubit_b\n");
            for (qa, qb) in &grid.couplers {
                let ia = grid.qubit_index(qa).expect("coupler endpoint in grid");
                let ib = grid.qubit_index(qb).expect("coupler endpoint in grid");
                let ((ia, qa), (ib, qb)) = if ia <= ib {
                    ((ia, qa), (ib, qb))
                } else {
                    ((ib, qb), (ia, qa))
                };
                writeln!(out, "{ia},{ib},{qa},{qb}").unwrap();
            }
            Ok(out)
        }
    }
}

// --------------------------------------------------------------------- dac

#[derive(Args)]
struct DacArgs {
    /// DAC flavor.
    #[arg(long = "type", value_enum)]
    dac_type: DacFlavor,
    /// Built-in parameter table to use.
    #[arg(long, value_enum, default_value_t = ParamsChoice::Designed, conflicts_with = "file")]
    params: ParamsChoice,
    /// Parameter file to read instead of a built-in table.
    #[arg(long)]
    file: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DacFlavor {
    QubitFlux,
    Ccjj,
    LTuner,
    Coupler,
}

impl DacFlavor {
    fn dac_type(self) -> DacType {
        match self {
            DacFlavor::QubitFlux => DacType::QubitFlux,
            DacFlavor::Ccjj => DacType::CcjjMinor,
            DacFlavor::LTuner => DacType::LTuner,
            DacFlavor::Coupler => DacType::Coupler,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamsChoice {
    Designed,
    Achieved,
}

fn load_design(
    dac_type: DacType,
    params: ParamsChoice,
    file: Option<&std::path::Path>,
) -> Result<DacDesign, String> {
    if let Some(path) = file {
        let set = ParameterSet::from_kv_text(&read_file(path)?)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        return Ok(set.get(dac_type).clone());
    }
    Ok(match params {
        ParamsChoice::Designed => DacDesign::designed(dac_type),
        ParamsChoice::Achieved => DacDesign::achieved(dac_type),
    })
}

fn run_dac(a: &DacArgs) -> Result<String, String> {
    let design = load_design(a.dac_type.dac_type(), a.params, a.file.as_deref())?;
    let dac = TwoStageDac::from_design(&design);
    let mut out = String::from("n_coarse,n_fine,output_phi0\n");
    let cap_c = design.capacity_coarse as i32;
    let cap_f = design.capacity_fine as i32;
    for nc in -cap_c..=cap_c {
        for nf in -cap_f..=cap_f {
            writeln!(out, "{nc},{nf},{:.9}", dac.output_at(nc, nf)).unwrap();
        }
    }
    let cov = dac.coverage_check();
    eprintln!(
        "{}: {} levels, coarse step {:.4} mphi0, fine step {:.4} mphi0, stage overlap {:.2}",
        design.dac_type.section_name(),
        dac.representable_levels(),
        design.coarse_step() * 1e3,
        design.fine_step() * 1e3,
        cov.overlap_ratio,
    );
    Ok(out)
}

// ------------------------------------------------------------------- demux

#[derive(Args)]
struct DemuxArgs {
    /// Pulses to route.
    #[arg(long, default_value_t = 10_000)]
    pulses: u64,
    /// Per-gate failure probability floor.
    #[arg(long, default_value_t = 1e-3)]
    p_gate: f64,
    /// Addressed leaf.
    #[arg(long, default_value_t = 0)]
    leaf: usize,
    /// Pulse polarity, +1 or -1.
    #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
    polarity: i8,
    /// Gate bias in uA (nominal when omitted).
    #[arg(long, allow_negative_numbers = true)]
    bias: Option<f64>,
    /// Address amplitude in mphi0 (nominal when omitted).
    #[arg(long, allow_negative_numbers = true)]
    address: Option<f64>,
}

fn run_demux(a: &DemuxArgs, seed: u64) -> Result<String, String> {
    if a.polarity != 1 && a.polarity != -1 {
        return Err(format!("polarity must be +1 or -1, got {}", a.polarity));
    }
    let config = TreeConfig { p_gate: a.p_gate, ..TreeConfig::default() };
    let mut tree = AddressTree::new(config, seed).map_err(|e| e.to_string())?;
    if a.leaf >= tree.leaf_count() {
        return Err(format!("leaf {} out of range (tree has {} leaves)", a.leaf, tree.leaf_count()));
    }
    let (bias, address) = tree.operating_point();
    tree.set_operating_point(a.bias.unwrap_or(bias), a.address.unwrap_or(address));
    let op = PulseOp::to_leaf(0, tree.config().depth, a.leaf, a.polarity);
    let (mut delivered, mut misrouted, mut dropped) = (0u64, 0u64, 0u64);
    for _ in 0..a.pulses {
        match tree.route(&op).map_err(|e| e.to_string())? {
            RoutingOutcome::Delivered { .. } => delivered += 1,
            RoutingOutcome::Misrouted { .. } => misrouted += 1,
            RoutingOutcome::Dropped => dropped += 1,
        }
    }
    Ok(format!(
        "outcome,count\ndelivered,{delivered}\nmisrouted,{misrouted}\ndropped,{dropped}\n"
    ))
}

// ----------------------------------------------------------------- margins

#[derive(Args)]
struct MarginsArgs {
    #[arg(long, default_value_t = 100.0)]
    bias_min: f64,
    #[arg(long, default_value_t = 220.0)]
    bias_max: f64,
    #[arg(long, default_value_t = 13)]
    bias_steps: usize,
    #[arg(long, default_value_t = 250.0)]
    addr_min: f64,
    #[arg(long, default_value_t = 750.0)]
    addr_max: f64,
    #[arg(long, default_value_t = 11)]
    addr_steps: usize,
    /// Probe pulses per leaf at each grid point.
    #[arg(long, default_value_t = 200)]
    trials: u32,
    /// Per-gate failure probability floor.
    #[arg(long, default_value_t = 1e-3)]
    p_gate: f64,
}

fn run_margins(a: &MarginsArgs, seed: u64) -> Result<String, String> {
    if a.trials == 0 {
        return Err("trials must be positive".into());
    }
    let bias_grid = linspace(a.bias_min, a.bias_max, a.bias_steps)?;
    let addr_grid = linspace(a.addr_min, a.addr_max, a.addr_steps)?;
    let config = TreeConfig { p_gate: a.p_gate, ..TreeConfig::default() };
    let mut tree = AddressTree::new(config, seed).map_err(|e| e.to_string())?;
    let mut out = String::from("bias_ua,address_mphi0,pass_fraction,pass\n");
    for point in margin_scan(&mut tree, &bias_grid, &addr_grid, a.trials) {
        writeln!(
            out,
            "{:.3},{:.3},{:.4},{}",
            point.bias_ua,
            point.address_mphi0,
            point.pass_fraction,
            point.pass as u8
        )
        .unwrap();
    }
    Ok(out)
}

// -------------------------------------------------------------- errorbound

#[derive(Args)]
struct ErrorboundArgs {
    /// Operations observed.
    #[arg(long)]
    operations: u64,
    /// Errors observed.
    #[arg(long, default_value_t = 0)]
    errors: u64,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
}

fn run_errorbound(a: &ErrorboundArgs) -> Result<String, String> {
    let bound = error_upper_bound(a.operations, a.errors, a.confidence)
        .map_err(|e| e.to_string())?;
    Ok(format!("upper_bound\n{bound:.3e}\n"))
}

// ------------------------------------------------------------------ budget

#[derive(Args)]
struct BudgetArgs {
    /// DACs programmed per cycle.
    #[arg(long)]
    dacs: u64,
    /// Mean quanta loaded per DAC.
    #[arg(long, default_value_t = 20.0)]
    mean_quanta: f64,
    /// Programming cycles in the batch.
    #[arg(long, default_value_t = 100)]
    programs: u64,
    /// Cycles that must be error-free (all of them when omitted).
    #[arg(long)]
    min_successes: Option<u64>,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
}

fn run_budget(a: &BudgetArgs) -> Result<String, String> {
    let min_successes = a.min_successes.unwrap_or(a.programs);
    let budget =
        per_pulse_error_budget(a.dacs, a.mean_quanta, a.programs, min_successes, a.confidence)
            .map_err(|e| e.to_string())?;
    Ok(format!("per_pulse_budget\n{budget:.3e}\n"))
}

// ------------------------------------------------------------------- noise

#[derive(Args)]
struct NoiseArgs {
    #[arg(long, default_value_t = 1e3)]
    f_min: f64,
    #[arg(long, default_value_t = 1e10)]
    f_max: f64,
    /// Points in the logarithmic frequency sweep.
    #[arg(long, default_value_t = 29)]
    points: usize,
    /// Bath temperature in kelvin.
    #[arg(long, default_value_t = 0.02)]
    temperature: f64,
}

fn run_noise(a: &NoiseArgs) -> Result<String, String> {
    if a.points < 2 {
        return Err("sweep needs at least 2 points".into());
    }
    if !(a.f_min > 0.0) || a.f_max <= a.f_min {
        return Err("need 0 < f_min < f_max".into());
    }
    let p = NoiseCircuitParams::default();
    let ratio = a.f_max / a.f_min;
    let mut out = String::from(
        "f_hz,r_eq_empty_ohm,r_eq_full_ohm,noise_empty_phi0_rthz,noise_full_phi0_rthz\n",
    );
    for i in 0..a.points {
        let f = a.f_min * ratio.powf(i as f64 / (a.points - 1) as f64);
        let r_empty = r_eq(&p, f, DacState::Empty).map_err(|e| e.to_string())?;
        let r_full = r_eq(&p, f, DacState::Full).map_err(|e| e.to_string())?;
        let n_empty = flux_noise_density(r_empty, p.l_qubit_ph, a.temperature)
            .map_err(|e| e.to_string())?;
        let n_full =
            flux_noise_density(r_full, p.l_qubit_ph, a.temperature).map_err(|e| e.to_string())?;
        writeln!(out, "{f:.6e},{r_empty:.6e},{r_full:.6e},{n_empty:.6e},{n_full:.6e}")
            .unwrap();
    }
    Ok(out)
}

// ------------------------------------------------------------------ device

#[derive(Args)]
struct DeviceArgs {
    #[arg(long, value_enum)]
    curve: CurveKind,
    /// Junction-loop bias for the potential curve, in phi0.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    cjj_bias: f64,
    /// Body bias for the potential curve, in phi0.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    body_bias: f64,
    /// Half-width of the sweep around zero, in phi0.
    #[arg(long)]
    span: Option<f64>,
    #[arg(long, default_value_t = 301)]
    points: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum CurveKind {
    /// Qubit potential vs body flux.
    Potential,
    /// Coupler mutual inductance vs coupler flux.
    Coupler,
}

fn run_device(a: &DeviceArgs) -> Result<String, String> {
    if a.points < 2 {
        return Err("sweep needs at least 2 points".into());
    }
    match a.curve {
        CurveKind::Potential => {
            let p = QubitParams::default();
            let span = a.span.unwrap_or(0.75);
            let grid = linspace(-span, span, a.points)?;
            let mut out = String::from("phi_q,potential\n");
            for phi in grid {
                writeln!(out, "{phi:.6},{:.9}", potential_1d(&p, phi, a.body_bias, a.cjj_bias))
                    .unwrap();
            }
            Ok(out)
        }
        CurveKind::Coupler => {
            let curve = CouplerCurve::default();
            let span = a.span.unwrap_or(curve.span_phi0);
            if span > curve.span_phi0 {
                return Err(format!(
                    "span {span} exceeds the coupler's {} phi0 range",
                    curve.span_phi0
                ));
            }
            let grid = linspace(-span, span, a.points)?;
            let mut out = String::from("flux_phi0,mutual_ph\n");
            for phi in grid {
                let m = curve.mutual_ph(phi).map_err(|e| e.to_string())?;
                writeln!(out, "{phi:.6},{m:.6}").unwrap();
            }
            Ok(out)
        }
    }
}

// ------------------------------------------------------------------ anneal

#[derive(Args)]
struct AnnealArgs {
    /// Problem file: `h <spin> <v>` and `K <i> <j> <v>` lines.
    #[arg(long)]
    problem: PathBuf,
    /// Anneal duration in ns.
    #[arg(long, default_value_t = 20.0)]
    tf: f64,
    /// Samples drawn from the final state.
    #[arg(long, default_value_t = 100)]
    repeats: u32,
    /// Schedule file with `s a b` rows; built-in schedule when omitted.
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    rows: u32,
    #[arg(long, default_value_t = 1)]
    cols: u32,
    /// Anneal the requested coefficients without DAC quantization.
    #[arg(long)]
    exact: bool,
}

fn run_anneal(a: &AnnealArgs, seed: u64) -> Result<String, String> {
    let grid = build_grid(a.rows, a.cols).map_err(|e| e.to_string())?;
    let n = grid.qubits.len();
    let edges = grid.edge_indices();
    let problem = IsingProblem::parse(&read_file(&a.problem)?, n, &edges)
        .map_err(|e| format!("{}: {e}", a.problem.display()))?;
    let annealed = if a.exact {
        problem.clone()
    } else {
        let q = quantize_problem(&problem, &TransferChain::reference())
            .map_err(|e| e.to_string())?;
        eprintln!("quantized {} coefficients, max scale error {:.2e}", n + problem.couplings().len(), q.max_scale_error);
        q.achieved
    };
    let sched = match &a.schedule {
        Some(path) => AnnealSchedule::parse(&read_file(path)?, a.tf)
            .map_err(|e| format!("{}: {e}", path.display()))?,
        None => AnnealSchedule::reference(a.tf),
    };
    let result = anneal(&annealed, &sched, a.repeats, seed).map_err(|e| e.to_string())?;
    let (min_energy, _) = problem.brute_force_minimize().map_err(|e| e.to_string())?;
    let mut out = String::from("sample,spins,energy,is_ground\n");
    let mut ground_hits = 0u32;
    for (i, spins) in result.outcomes.iter().enumerate() {
        let energy = problem.objective(spins).map_err(|e| e.to_string())?;
        let is_ground = energy <= min_energy + 1e-9;
        ground_hits += is_ground as u32;
        let word: String = spins.iter().map(|&s| if s > 0 { '+' } else { '-' }).collect();
        writeln!(out, "{i},{word},{energy:.6},{}", is_ground as u8).unwrap();
    }
    eprintln!(
        "{} spins, {} ns anneal in {} steps: ground fraction {:.3}, norm error {:.1e}",
        n,
        a.tf,
        result.steps_used,
        ground_hits as f64 / a.repeats as f64,
        result.norm_error,
    );
    Ok(out)
}

// ----------------------------------------------------------------- program

#[derive(Args)]
struct ProgramArgs {
    /// Problem file: `h <spin> <v>` and `K <i> <j> <v>` lines.
    #[arg(long)]
    problem: PathBuf,
    /// Calibration parameter file; design-target parameters when omitted.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeChoice::ResetFirst)]
    mode: ModeChoice,
    #[arg(long, default_value_t = 1)]
    rows: u32,
    #[arg(long, default_value_t = 1)]
    cols: u32,
    /// Per-gate failure probability floor for the address trees.
    #[arg(long)]
    p_gate: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeChoice {
    Incremental,
    ResetFirst,
}

impl ModeChoice {
    fn mode(self) -> CompileMode {
        match self {
            ModeChoice::Incremental => CompileMode::Incremental,
            ModeChoice::ResetFirst => CompileMode::ResetFirst,
        }
    }

    fn label(self) -> &'static str {
        match self {
            ModeChoice::Incremental => "incremental",
            ModeChoice::ResetFirst => "reset-first",
        }
    }
}

/// Coupler devices keyed by their sorted qubit-index pair.
fn edge_devices(grid: &UnitCellGrid) -> BTreeMap<(usize, usize), DeviceId> {
    let mut map = BTreeMap::new();
    for &(qa, qb) in &grid.couplers {
        let ia = grid.qubit_index(&qa).expect("coupler endpoint in grid");
        let ib = grid.qubit_index(&qb).expect("coupler endpoint in grid");
        map.insert((ia.min(ib), ia.max(ib)), DeviceId::Coupler(qa, qb));
    }
    map
}

fn run_program(a: &ProgramArgs, seed: u64) -> Result<String, String> {
    let grid = build_grid(a.rows, a.cols).map_err(|e| e.to_string())?;
    let n = grid.qubits.len();
    let edges = grid.edge_indices();
    let problem = IsingProblem::parse(&read_file(&a.problem)?, n, &edges)
        .map_err(|e| format!("{}: {e}", a.problem.display()))?;
    let params = match &a.calibration {
        Some(path) => ParameterSet::from_kv_text(&read_file(path)?)
            .map_err(|e| format!("{}: {e}", path.display()))?,
        None => ParameterSet::designed(),
    };
    let chain = TransferChain {
        h_dac: params.get(DacType::Coupler).clone(),
        k_dac: params.get(DacType::Coupler).clone(),
        h_curve: CouplerCurve::default(),
        k_curve: CouplerCurve::default(),
    };
    let quantized = quantize_problem(&problem, &chain).map_err(|e| e.to_string())?;

    let mut config = TreeConfig::default();
    if let Some(p) = a.p_gate {
        config.p_gate = p;
    }
    let mut controller =
        Controller::new(&grid, &params, config, seed).map_err(|e| e.to_string())?;

    let couplers = edge_devices(&grid);
    let mut targets = BTreeMap::new();
    for &(j, nc, nf) in &quantized.h_targets {
        let device = DeviceId::Qubit(grid.qubits[j]);
        let dac = grid
            .dac_for(&device, DacRole::IpCompensator)
            .ok_or_else(|| format!("no field DAC on qubit {}", grid.qubits[j]))?;
        targets.insert(dac, (nc, nf));
    }
    for &(edge, nc, nf) in &quantized.k_targets {
        let device = couplers
            .get(&edge)
            .ok_or_else(|| format!("no coupler between spins {} and {}", edge.0, edge.1))?;
        let dac = grid
            .dac_for(device, DacRole::InterQubitCoupler)
            .ok_or_else(|| format!("no coupler DAC between spins {} and {}", edge.0, edge.1))?;
        targets.insert(dac, (nc, nf));
    }

    let report = controller
        .apply_targets(&targets, a.mode.mode(), seed.wrapping_add(1))
        .map_err(|e| e.to_string())?;

    let total = controller.dac_count();
    let off: std::collections::BTreeSet<_> =
        report.discrepancies.iter().map(|d| d.dac).collect();
    let mut out = String::new();
    writeln!(out, "spins = {n}").unwrap();
    writeln!(out, "coefficients = {}", n + problem.couplings().len()).unwrap();
    writeln!(out, "max_scale_error = {:.3e}", quantized.max_scale_error).unwrap();
    writeln!(out, "mode = {}", a.mode.label()).unwrap();
    writeln!(out, "pulses_routed = {}", report.routed_pulses).unwrap();
    writeln!(out, "pulses_reset = {}", report.reset_pulses).unwrap();
    writeln!(out, "drops = {}", report.drops).unwrap();
    writeln!(out, "misroutes = {}", report.misroutes).unwrap();
    writeln!(out, "dacs_on_target = {} of {}", total - off.len(), total).unwrap();
    for d in &report.discrepancies {
        writeln!(
            out,
            "off: dac {} {:?} expected {} achieved {} (lost {}, stray {}, saturated {})",
            d.dac, d.stage, d.expected, d.achieved, d.lost, d.stray, d.saturated_hits
        )
        .unwrap();
    }
    if !report.clean() {
        emit_partial(&out);
        return Err(format!("{} stages off target", report.discrepancies.len()));
    }
    Ok(out)
}

/// Prints a failed run's report to stderr so it survives the error exit.
fn emit_partial(report: &str) {
    eprint!("{report}");
}

// --------------------------------------------------------------- calibrate

#[derive(Args)]
struct CalibrateArgs {
    /// Suppress measurement read noise.
    #[arg(long)]
    noise_free: bool,
    /// Measurements averaged per read point.
    #[arg(long, default_value_t = 4)]
    repeats: u32,
}

fn run_calibrate(a: &CalibrateArgs, seed: u64) -> Result<String, String> {
    if a.repeats == 0 {
        return Err("repeats must be positive".into());
    }
    let qubit = QubitParams::default();
    let mut model = MeasurementModel { repeats: a.repeats, ..MeasurementModel::default() };
    if a.noise_free {
        model.sigma_flux_phi0 = 0.0;
    }
    let mut set = ParameterSet::achieved();
    for (i, &dac_type) in DacType::ALL.iter().enumerate() {
        let mut design = DacDesign::achieved(dac_type);
        let mut dac = TwoStageDac::from_design(&design);
        // Body-coupled DACs are read through the qubit's degeneracy
        // point; the rest are read directly on a test structure.
        let target = match dac_type {
            DacType::QubitFlux => CalibrationTarget::QubitDegeneracy { cjj_bias_phi0: 1.0 },
            _ => CalibrationTarget::DirectCompensation,
        };
        let record = pmm::controller::calibrate_dac(
            &mut dac,
            &qubit,
            target,
            2.0,
            &model,
            seed.wrapping_add(i as u64),
        )
        .map_err(|e| format!("{}: {e}", dac_type.section_name()))?;
        eprintln!(
            "{}: coarse {:.4} mphi0/quantum, attenuation {:.3}, sigma_k {:.1e}",
            dac_type.section_name(),
            record.k_measured * 1e3,
            record.gamma_measured,
            record.k_uncertainty,
        );
        design.k = record.k_measured;
        design.gamma = record.gamma_measured;
        set.set(design);
    }
    Ok(set.to_kv_text())
}
