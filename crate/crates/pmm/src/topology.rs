//! Processor topology: rectangular grids of eight-qubit unit cells, the
//! couplers between qubits, and the per-device flux DAC inventory.
//!
//! Each unit cell holds four horizontal and four vertical qubit bodies,
//! every horizontal qubit coupling to every vertical one (16 intra-cell
//! couplers). Adjacent cells are stitched together with eight couplers per
//! interior cell corner, which makes the inter-cell coupler count of an
//! `m x n` grid exactly `8(m-1)(n-1)`. Every qubit carries five DACs
//! (static flux, two compound-junction minor-lobe trims, an inductance
//! tuner, and a persistent-current compensator) and every coupler one, so
//! the DAC count is `5q + c`. A standalone single-cell chip additionally
//! exposes its eight unused boundary couplers as dc-SQUID breakout devices,
//! each with its own DAC.

use std::collections::BTreeMap;
use std::fmt;

/// Orientation of a qubit body within its unit cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Orientation::Horizontal => write!(f, "H"),
            Orientation::Vertical => write!(f, "V"),
        }
    }
}

/// Identifies one qubit by cell coordinates, body orientation, and its
/// index 0..4 within that orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QubitId {
    pub cell_row: u32,
    pub cell_col: u32,
    pub orientation: Orientation,
    pub index: u8,
}

impl fmt::Display for QubitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}.{}{}{}", self.cell_row, self.cell_col, self.orientation, self.index)
    }
}

/// An on-chip device served by one or more DACs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DeviceId {
    Qubit(QubitId),
    Coupler(QubitId, QubitId),
    /// Boundary coupler repurposed as a dc-SQUID test device on the
    /// standalone single-cell chip.
    Breakout(u32),
}

/// What a DAC controls on its device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DacRole {
    QubitFlux,
    CcjjMinorA,
    CcjjMinorB,
    LTuner,
    IpCompensator,
    InterQubitCoupler,
    Breakout,
}

impl fmt::Display for DacRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DacRole::QubitFlux => "qubit_flux",
            DacRole::CcjjMinorA => "ccjj_minor_a",
            DacRole::CcjjMinorB => "ccjj_minor_b",
            DacRole::LTuner => "l_tuner",
            DacRole::IpCompensator => "ip_compensator",
            DacRole::InterQubitCoupler => "coupler",
            DacRole::Breakout => "breakout",
        };
        write!(f, "{name}")
    }
}

pub type DacId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DacAssignment {
    pub dac: DacId,
    pub role: DacRole,
}

/// A built grid: qubits and couplers in deterministic order, plus the DAC
/// assignment per device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitCellGrid {
    pub rows: u32,
    pub cols: u32,
    pub qubits: Vec<QubitId>,
    pub couplers: Vec<(QubitId, QubitId)>,
    pub dac_assignments: BTreeMap<DeviceId, Vec<DacAssignment>>,
}

/// Part counts for a grid; the DAC count excludes breakout DACs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartsCount {
    pub qubits: u64,
    pub couplers: u64,
    pub dacs: u64,
    pub junctions: u64,
}

const QUBITS_PER_CELL: u64 = 8;
const INTRA_CELL_COUPLERS: u64 = 16;
const DACS_PER_QUBIT: u64 = 5;
const JUNCTIONS_PER_CELL: u64 = 1500;
const BREAKOUTS_SINGLE_CELL: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyError {
    EmptyGrid,
}

impl fmt::Display for TopologyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyError::EmptyGrid => write!(f, "grid must have at least one cell"),
        }
    }
}

impl std::error::Error for TopologyError {}

/// Builds an `rows x cols` grid of unit cells.
pub fn build_grid(rows: u32, cols: u32) -> Result<UnitCellGrid, TopologyError> {
    if rows == 0 || cols == 0 {
        return Err(TopologyError::EmptyGrid);
    }

    let qubit = |r: u32, c: u32, orientation: Orientation, index: u8| QubitId {
        cell_row: r,
        cell_col: c,
        orientation,
        index,
    };

    let mut qubits = Vec::with_capacity((rows * cols) as usize * 8);
    for r in 0..rows {
        for c in 0..cols {
            for orientation in [Orientation::Horizontal, Orientation::Vertical] {
                for index in 0..4 {
                    qubits.push(qubit(r, c, orientation, index));
                }
            }
        }
    }

    let mut couplers = Vec::new();
    // Intra-cell: complete bipartite between the four horizontal and four
    // vertical bodies of each cell.
    for r in 0..rows {
        for c in 0..cols {
            for i in 0..4 {
                for j in 0..4 {
                    couplers.push((
                        qubit(r, c, Orientation::Horizontal, i),
                        qubit(r, c, Orientation::Vertical, j),
                    ));
                }
            }
        }
    }
    // Inter-cell: eight couplers per interior cell corner, four extending
    // the vertical bodies downward and four extending the horizontal bodies
    // rightward.
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols.saturating_sub(1) {
            for k in 0..4 {
                couplers.push((
                    qubit(r, c, Orientation::Vertical, k),
                    qubit(r + 1, c, Orientation::Vertical, k),
                ));
            }
            for k in 0..4 {
                couplers.push((
                    qubit(r, c, Orientation::Horizontal, k),
                    qubit(r, c + 1, Orientation::Horizontal, k),
                ));
            }
        }
    }

    let mut dac_assignments: BTreeMap<DeviceId, Vec<DacAssignment>> = BTreeMap::new();
    let mut next_dac: DacId = 0;
    let mut assign = |device: DeviceId, role: DacRole, next: &mut DacId| {
        let a = DacAssignment { dac: *next, role };
        *next += 1;
        dac_assignments.entry(device).or_default().push(a);
    };

    for &q in &qubits {
        for role in [
            DacRole::QubitFlux,
            DacRole::CcjjMinorA,
            DacRole::CcjjMinorB,
            DacRole::LTuner,
            DacRole::IpCompensator,
        ] {
            assign(DeviceId::Qubit(q), role, &mut next_dac);
        }
    }
    for &(a, b) in &couplers {
        assign(DeviceId::Coupler(a, b), DacRole::InterQubitCoupler, &mut next_dac);
    }
    if rows == 1 && cols == 1 {
        for k in 0..BREAKOUTS_SINGLE_CELL {
            assign(DeviceId::Breakout(k), DacRole::Breakout, &mut next_dac);
        }
    }

    Ok(UnitCellGrid { rows, cols, qubits, couplers, dac_assignments })
}

/// Part counts for a grid of `rows x cols` unit cells.
pub fn parts_count(grid: &UnitCellGrid) -> PartsCount {
    let cells = grid.rows as u64 * grid.cols as u64;
    let qubits = grid.qubits.len() as u64;
    let couplers = grid.couplers.len() as u64;
    debug_assert_eq!(qubits, QUBITS_PER_CELL * cells);
    debug_assert!(couplers >= INTRA_CELL_COUPLERS * cells);
    PartsCount {
        qubits,
        couplers,
        dacs: DACS_PER_QUBIT * qubits + couplers,
        junctions: JUNCTIONS_PER_CELL * cells,
    }
}

impl UnitCellGrid {
    /// Position of a qubit in the deterministic enumeration order, usable
    /// as a 0-based spin index.
    pub fn qubit_index(&self, q: &QubitId) -> Option<usize> {
        if q.cell_row >= self.rows || q.cell_col >= self.cols || q.index >= 4 {
            return None;
        }
        let orient = match q.orientation {
            Orientation::Horizontal => 0,
            Orientation::Vertical => 1,
        };
        let cell = (q.cell_row * self.cols + q.cell_col) as usize;
        Some((cell * 2 + orient) * 4 + q.index as usize)
    }

    /// Coupler endpoints as sorted pairs of 0-based qubit indices.
    pub fn edge_indices(&self) -> Vec<(usize, usize)> {
        self.couplers
            .iter()
            .map(|(a, b)| {
                let ia = self.qubit_index(a).expect("coupler endpoint in grid");
                let ib = self.qubit_index(b).expect("coupler endpoint in grid");
                (ia.min(ib), ia.max(ib))
            })
            .collect()
    }

    /// Total number of DACs on the chip, breakout DACs included.
    pub fn dac_inventory(&self) -> u64 {
        self.dac_assignments.values().map(|v| v.len() as u64).sum()
    }

    /// The DAC serving `role` on `device`, if the device exists and carries
    /// one.
    pub fn dac_for(&self, device: &DeviceId, role: DacRole) -> Option<DacId> {
        self.dac_assignments
            .get(device)?
            .iter()
            .find(|a| a.role == role)
            .map(|a| a.dac)
    }
}
