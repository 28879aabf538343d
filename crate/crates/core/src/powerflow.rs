//! Network state computation: injection currents, branch currents, voltage
//! drops, losses and sequence components.
//!
//! Two solvers share the same topology matrices. `solve_linear_pf` is the
//! one-shot linearisation (flat-start currents, real part of the rotated
//! voltage drop) that keeps OPF constraints affine. `solve_fixedpoint_pf`
//! iterates the full complex update and serves as the validation oracle.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use thiserror::Error;

use crate::grid::{Conductor, FeederModel, Phase, TopologyMatrices};

/// Minimum phase voltage magnitude (p.u.) accepted when converting powers
/// to currents.
pub const VOLTAGE_GUARD_PU: f64 = 0.1;

pub const DEFAULT_FIXEDPOINT_TOL: f64 = 1e-8;
pub const DEFAULT_FIXEDPOINT_MAX_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("voltage magnitude below {guard} p.u. at bus {bus} phase {phase}")]
    SingularVoltage { bus: u32, phase: Phase, guard: f64 },
    #[error("tap {tap} outside [{tap_min}, {tap_max}]")]
    TapOutOfRange { tap: i32, tap_min: i32, tap_max: i32 },
    #[error("fixed point did not converge after {iterations} iterations (residual {residual:.3e} p.u.)")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("fixed point diverged at iteration {iteration} (|V| = {magnitude:.3} p.u.)")]
    Diverged { iteration: usize, magnitude: f64 },
    #[error("positive sequence voltage is numerically zero; VUF undefined")]
    UndefinedVuf,
}

/// Active/reactive power injected per (bus, phase), in kW / kvar.
/// Positive means generation (power flowing into the network).
#[derive(Debug, Clone, PartialEq)]
pub struct NodalInjection {
    /// (n_buses, 3)
    pub p_kw: Array2<f64>,
    /// (n_buses, 3)
    pub q_kvar: Array2<f64>,
}

impl NodalInjection {
    pub fn zeros(n_buses: usize) -> Self {
        Self {
            p_kw: Array2::zeros((n_buses, 3)),
            q_kvar: Array2::zeros((n_buses, 3)),
        }
    }

    pub fn add(&mut self, bus_idx: usize, phase: Phase, p_kw: f64, q_kvar: f64) {
        self.p_kw[(bus_idx, phase.index())] += p_kw;
        self.q_kvar[(bus_idx, phase.index())] += q_kvar;
    }
}

/// Solved network state for one instant.
#[derive(Debug, Clone)]
pub struct PowerFlowResult {
    /// Complex node voltages in p.u., (n_buses, 4). The slack row holds the
    /// tap-adjusted slack phasors and the transformer neutral potential.
    pub voltages: Array2<Complex64>,
    /// Complex branch currents in amps, (n_sections, 4), oriented as the sum
    /// of downstream injection currents.
    pub branch_currents: Array2<Complex64>,
    /// I^2 R series loss per (section, conductor) in kW.
    pub losses_kw: Array2<f64>,
    pub tap_used: i32,
    pub iterations: usize,
}

impl PowerFlowResult {
    pub fn voltage_magnitude(&self, bus_idx: usize, cond: Conductor) -> f64 {
        self.voltages[(bus_idx, cond.index())].norm()
    }

    pub fn neutral_voltage(&self, bus_idx: usize) -> f64 {
        self.voltage_magnitude(bus_idx, Conductor::Neutral)
    }

    pub fn phase_voltages(&self, bus_idx: usize) -> [Complex64; 3] {
        [
            self.voltages[(bus_idx, 0)],
            self.voltages[(bus_idx, 1)],
            self.voltages[(bus_idx, 2)],
        ]
    }

    pub fn total_losses_kw(&self) -> f64 {
        self.losses_kw.sum()
    }
}

/// Symmetrical components of a bus voltage triple, p.u.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceComponents {
    pub v_zero: Complex64,
    pub v_pos: Complex64,
    pub v_neg: Complex64,
}

impl SequenceComponents {
    /// Recombine into phase voltages.
    pub fn to_phases(self) -> [Complex64; 3] {
        let a = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI / 3.0);
        let a2 = a * a;
        [
            self.v_zero + self.v_pos + self.v_neg,
            self.v_zero + a2 * self.v_pos + a * self.v_neg,
            self.v_zero + a * self.v_pos + a2 * self.v_neg,
        ]
    }
}

/// Nodal injection currents (amps) on the node-conductor vector, from
/// powers and the voltages they are evaluated at. The neutral current at
/// each bus is the negated sum of the three phase currents.
pub fn injection_currents(
    feeder: &FeederModel,
    matrices: &TopologyMatrices,
    inj: &NodalInjection,
    voltages: &Array2<Complex64>,
) -> Result<Array1<Complex64>, PowerFlowError> {
    let v_base = feeder.base_voltage_phase();
    let mut currents = Array1::from_elem(matrices.n_node_cols(), Complex64::new(0.0, 0.0));
    for &bus in &matrices.node_buses {
        let mut i_neutral = Complex64::new(0.0, 0.0);
        for phase in Phase::ALL {
            let p = inj.p_kw[(bus, phase.index())];
            let q = inj.q_kvar[(bus, phase.index())];
            let col = matrices.node_col(bus, phase.conductor()).unwrap();
            if p == 0.0 && q == 0.0 {
                continue;
            }
            let v_pu = voltages[(bus, phase.index())];
            if v_pu.norm() < VOLTAGE_GUARD_PU {
                return Err(PowerFlowError::SingularVoltage {
                    bus: feeder.bus_id(bus),
                    phase,
                    guard: VOLTAGE_GUARD_PU,
                });
            }
            let s_va = Complex64::new(p, q) * 1e3;
            let v_volt = v_pu * v_base;
            let i = s_va.conj() / v_volt.conj();
            currents[col] = i;
            i_neutral -= i;
        }
        let ncol = matrices.node_col(bus, Conductor::Neutral).unwrap();
        currents[ncol] = i_neutral;
    }
    Ok(currents)
}

/// Slack-bus voltage row: tap-adjusted p.u. phasors on the phases. The
/// neutral conductor is bonded to the transformer star point, whose single
/// grounding impedance carries no current (there is no other earth path),
/// so the transformer neutral sits at earth potential.
pub(crate) fn slack_voltages(feeder: &FeederModel, tap: i32) -> [Complex64; 4] {
    let mut v = [Complex64::new(0.0, 0.0); 4];
    for phase in Phase::ALL {
        v[phase.index()] = Complex64::from_polar(feeder.oltc.slack_magnitude(phase, tap), phase.angle());
    }
    v
}

fn check_tap(feeder: &FeederModel, tap: i32) -> Result<(), PowerFlowError> {
    if tap < feeder.oltc.tap_min || tap > feeder.oltc.tap_max {
        return Err(PowerFlowError::TapOutOfRange {
            tap,
            tap_min: feeder.oltc.tap_min,
            tap_max: feeder.oltc.tap_max,
        });
    }
    Ok(())
}

pub(crate) fn flat_voltages(feeder: &FeederModel, tap: i32) -> Array2<Complex64> {
    let slack = slack_voltages(feeder, tap);
    let mut v = Array2::from_elem((feeder.n_buses(), 4), Complex64::new(0.0, 0.0));
    for b in 0..feeder.n_buses() {
        for c in 0..4 {
            v[(b, c)] = slack[c];
        }
    }
    v
}

fn assemble_result(
    feeder: &FeederModel,
    matrices: &TopologyMatrices,
    voltages: Array2<Complex64>,
    currents: &Array1<Complex64>,
    tap: i32,
    iterations: usize,
) -> PowerFlowResult {
    let n_sections = feeder.n_sections();
    let mut branch_currents = Array2::from_elem((n_sections, 4), Complex64::new(0.0, 0.0));
    for s in 0..n_sections {
        for c in 0..4 {
            let row = matrices.branch_row(s, Conductor::from_index(c));
            let mut acc = Complex64::new(0.0, 0.0);
            for col in 0..matrices.n_node_cols() {
                if matrices.path[(row, col)] != 0.0 {
                    acc += currents[col];
                }
            }
            branch_currents[(s, c)] = acc;
        }
    }
    let losses_kw = branch_losses_kw(feeder, &branch_currents);
    PowerFlowResult {
        voltages,
        branch_currents,
        losses_kw,
        tap_used: tap,
        iterations,
    }
}

/// I^2 R series loss per (section, conductor) in kW.
pub fn branch_losses_kw(feeder: &FeederModel, branch_currents: &Array2<Complex64>) -> Array2<f64> {
    let mut losses = Array2::zeros(branch_currents.dim());
    for (s, section) in feeder.sections().iter().enumerate() {
        let r = section.r_self();
        for c in 0..4 {
            losses[(s, c)] = branch_currents[(s, c)].norm_sqr() * r / 1e3;
        }
    }
    losses
}

/// One-shot linear power flow: currents at flat start, voltage drop taken
/// as the real part in each phase's rotated frame.
pub fn solve_linear_pf(
    feeder: &FeederModel,
    matrices: &TopologyMatrices,
    inj: &NodalInjection,
    tap: i32,
) -> Result<PowerFlowResult, PowerFlowError> {
    check_tap(feeder, tap)?;
    let flat = flat_voltages(feeder, tap);
    let currents = injection_currents(feeder, matrices, inj, &flat)?;
    let drops = matrices.drop_ohm.dot(&currents);
    let slack = slack_voltages(feeder, tap);
    let v_base = feeder.base_voltage_phase();

    let mut voltages = Array2::from_elem((feeder.n_buses(), 4), Complex64::new(0.0, 0.0));
    for c in 0..4 {
        voltages[(feeder.slack_index(), c)] = slack[c];
    }
    for &bus in &matrices.node_buses {
        for phase in Phase::ALL {
            let col = matrices.node_col(bus, phase.conductor()).unwrap();
            let dv_pu = drops[col] / v_base;
            // Magnitude approximation: project the complex drop onto the
            // phase's nominal direction.
            let mag = feeder.oltc.slack_magnitude(phase, tap) + (dv_pu * phase.rotation().conj()).re;
            voltages[(bus, phase.index())] = Complex64::from_polar(mag, phase.angle());
        }
        let ncol = matrices.node_col(bus, Conductor::Neutral).unwrap();
        voltages[(bus, 3)] = slack[3] + drops[ncol] / v_base;
    }
    Ok(assemble_result(feeder, matrices, voltages, &currents, tap, 1))
}

/// Fixed-point power flow with the full complex voltage update; the
/// validation oracle for the linear solver.
pub fn solve_fixedpoint_pf(
    feeder: &FeederModel,
    matrices: &TopologyMatrices,
    inj: &NodalInjection,
    tap: i32,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowResult, PowerFlowError> {
    assert!(tol > 0.0, "tolerance must be positive");
    assert!(max_iter >= 1, "max_iter must be at least 1");
    check_tap(feeder, tap)?;
    let v_base = feeder.base_voltage_phase();
    let mut voltages = flat_voltages(feeder, tap);
    let mut currents = Array1::from_elem(matrices.n_node_cols(), Complex64::new(0.0, 0.0));
    let mut residual = f64::INFINITY;
    for iteration in 1..=max_iter {
        currents = injection_currents(feeder, matrices, inj, &voltages)?;
        let drops = matrices.drop_ohm.dot(&currents);
        let slack = slack_voltages(feeder, tap);
        let mut max_delta = 0.0f64;
        for c in 0..4 {
            voltages[(feeder.slack_index(), c)] = slack[c];
        }
        for &bus in &matrices.node_buses {
            for c in 0..4 {
                let col = matrices.node_col(bus, Conductor::from_index(c)).unwrap();
                let v_new = slack[c] + drops[col] / v_base;
                max_delta = max_delta.max((v_new - voltages[(bus, c)]).norm());
                voltages[(bus, c)] = v_new;
                if c < 3 {
                    let mag = v_new.norm();
                    if mag > 2.0 || mag < 0.05 {
                        return Err(PowerFlowError::Diverged { iteration, magnitude: mag });
                    }
                }
            }
        }
        residual = max_delta;
        if residual < tol {
            return Ok(assemble_result(feeder, matrices, voltages, &currents, tap, iteration));
        }
    }
    let _ = currents;
    Err(PowerFlowError::NoConvergence { iterations: max_iter, residual })
}

/// Symmetrical components and the voltage unbalance factor of a phase
/// voltage triple. Returns the exact ratio together with the `|v_neg|`
/// approximation used for constraints.
pub fn compute_sequence_vuf(
    v: [Complex64; 3],
) -> Result<(SequenceComponents, f64, f64), PowerFlowError> {
    let a = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI / 3.0);
    let a2 = a * a;
    let third = 1.0 / 3.0;
    let seq = SequenceComponents {
        v_zero: (v[0] + v[1] + v[2]) * third,
        v_pos: (v[0] + a * v[1] + a2 * v[2]) * third,
        v_neg: (v[0] + a2 * v[1] + a * v[2]) * third,
    };
    let pos = seq.v_pos.norm();
    if pos < 1e-9 {
        return Err(PowerFlowError::UndefinedVuf);
    }
    let vuf = seq.v_neg.norm() / pos;
    let vuf_approx = seq.v_neg.norm();
    Ok((seq, vuf, vuf_approx))
}

/// One entry of an operational-limit violation report.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Voltage { bus: u32, phase: Phase, value_pu: f64, limit_pu: f64 },
    Current { section: usize, conductor: Conductor, value_a: f64, limit_a: f64, pct_of_rating: f64 },
    NeutralVoltage { bus: u32, value_pu: f64, limit_pu: f64 },
    Unbalance { bus: u32, vuf_approx: f64, limit: f64 },
}

impl Violation {
    /// How far past the limit, in the quantity's own unit.
    pub fn magnitude(&self) -> f64 {
        match self {
            Violation::Voltage { value_pu, limit_pu, .. } => {
                if *value_pu > *limit_pu { value_pu - limit_pu } else { limit_pu - value_pu }
            }
            Violation::Current { value_a, limit_a, .. } => value_a - limit_a,
            Violation::NeutralVoltage { value_pu, limit_pu, .. } => value_pu - limit_pu,
            Violation::Unbalance { vuf_approx, limit, .. } => vuf_approx - limit,
        }
    }
}

/// Check Eqs.-(6)-(8) style operating limits plus the unbalance bound on a
/// solved state. Empty report means fully feasible.
pub fn check_operational_limits(result: &PowerFlowResult, feeder: &FeederModel) -> Vec<Violation> {
    let mut violations = Vec::new();
    let lim = &feeder.limits;
    for bus in 0..feeder.n_buses() {
        let vn = result.neutral_voltage(bus);
        if vn > lim.v_neut_max {
            violations.push(Violation::NeutralVoltage {
                bus: feeder.bus_id(bus),
                value_pu: vn,
                limit_pu: lim.v_neut_max,
            });
        }
        if bus == feeder.slack_index() {
            continue;
        }
        for phase in Phase::ALL {
            let v = result.voltage_magnitude(bus, phase.conductor());
            if v < lim.v_min {
                violations.push(Violation::Voltage {
                    bus: feeder.bus_id(bus),
                    phase,
                    value_pu: v,
                    limit_pu: lim.v_min,
                });
            } else if v > lim.v_max {
                violations.push(Violation::Voltage {
                    bus: feeder.bus_id(bus),
                    phase,
                    value_pu: v,
                    limit_pu: lim.v_max,
                });
            }
        }
        if let Ok((_, _, vuf_approx)) = compute_sequence_vuf(result.phase_voltages(bus)) {
            if vuf_approx > lim.vuf_max {
                violations.push(Violation::Unbalance {
                    bus: feeder.bus_id(bus),
                    vuf_approx,
                    limit: lim.vuf_max,
                });
            }
        }
    }
    for (s, _) in feeder.sections().iter().enumerate() {
        let limit = feeder.section_i_max(s);
        for c in 0..4 {
            let i = result.branch_currents[(s, c)].norm();
            if i > limit {
                violations.push(Violation::Current {
                    section: s,
                    conductor: Conductor::from_index(c),
                    value_a: i,
                    limit_a: limit,
                    pct_of_rating: i / limit * 100.0,
                });
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_feeder_from_str, build_topology_matrices};
    use approx::assert_abs_diff_eq;

    fn feeder_doc(n_chain: usize) -> String {
        let buses: Vec<_> = (1..=n_chain as u32).map(|id| serde_json::json!({"id": id})).collect();
        let sections: Vec<_> = (1..n_chain as u32)
            .map(|i| {
                serde_json::json!({
                    "from": i, "to": i + 1, "length_km": 0.05,
                    "z_self": [0.65, 0.412], "z_mutual": [0.0065, 0.00412]
                })
            })
            .collect();
        serde_json::json!({
            "base_voltage_ll": 380.0,
            "base_voltage_phase": 220.0,
            "slack_bus": 1,
            "transformer_ground_ohm": 3.0,
            "buses": buses,
            "sections": sections,
            "oltc": {"v_slack": [1.01, 1.01, 1.01], "dv_per_tap": 0.0125, "tap_min": -4, "tap_max": 4},
            "limits": {"v_min": 0.93, "v_max": 1.07, "v_neut_max": 0.05, "vuf_max": 0.02, "i_max_default_a": 100.0}
        })
        .to_string()
    }

    fn two_bus() -> (crate::grid::FeederModel, crate::grid::TopologyMatrices) {
        let feeder = build_feeder_from_str(&feeder_doc(2)).unwrap();
        let matrices = build_topology_matrices(&feeder);
        (feeder, matrices)
    }

    #[test]
    fn zero_power_gives_zero_currents() {
        let (feeder, matrices) = two_bus();
        let inj = NodalInjection::zeros(feeder.n_buses());
        let flat = super::flat_voltages(&feeder, 0);
        let currents = injection_currents(&feeder, &matrices, &inj, &flat).unwrap();
        assert!(currents.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn single_phase_kva_current_and_neutral_return() {
        let (feeder, matrices) = two_bus();
        let mut inj = NodalInjection::zeros(feeder.n_buses());
        inj.add(1, Phase::A, 1.0, 0.0);
        // Evaluate at exactly 1 p.u. flat voltage.
        let mut flat = super::flat_voltages(&feeder, 0);
        for b in 0..feeder.n_buses() {
            for phase in Phase::ALL {
                flat[(b, phase.index())] = phase.rotation();
            }
        }
        let currents = injection_currents(&feeder, &matrices, &inj, &flat).unwrap();
        let ca = currents[matrices.node_col(1, Conductor::PhaseA).unwrap()];
        let cn = currents[matrices.node_col(1, Conductor::Neutral).unwrap()];
        assert_abs_diff_eq!(ca.re, 1000.0 / 220.0, epsilon = 1e-9);
        assert_abs_diff_eq!(ca.im, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cn.re, -1000.0 / 220.0, epsilon = 1e-9);
    }

    #[test]
    fn balanced_three_phase_injection_cancels_neutral() {
        let (feeder, matrices) = two_bus();
        let mut inj = NodalInjection::zeros(feeder.n_buses());
        for phase in Phase::ALL {
            inj.add(1, phase, 3.0, 1.0);
        }
        let flat = super::flat_voltages(&feeder, 0);
        let currents = injection_currents(&feeder, &matrices, &inj, &flat).unwrap();
        let cn = currents[matrices.node_col(1, Conductor::Neutral).unwrap()];
        assert!(cn.norm() < 1e-12);
    }

    #[test]
    fn voltage_guard_names_the_bus() {
        let (feeder, matrices) = two_bus();
        let mut inj = NodalInjection::zeros(feeder.n_buses());
        inj.add(1, Phase::B, 1.0, 0.0);
        let mut flat = super::flat_voltages(&feeder, 0);
        flat[(1, 1)] = Complex64::new(0.01, 0.0);
        match injection_currents(&feeder, &matrices, &inj, &flat) {
            Err(PowerFlowError::SingularVoltage { bus, phase, .. }) => {
                assert_eq!(bus, 2);
                assert_eq!(phase, Phase::B);
            }
            other => panic!("expected singular-voltage error, got {other:?}"),
        }
    }

    #[test]
    fn no_load_linear_pf_is_flat() {
        let (feeder, matrices) = two_bus();
        let inj = NodalInjection::zeros(feeder.n_buses());
        let result = solve_linear_pf(&feeder, &matrices, &inj, 0).unwrap();
        for bus in 0..feeder.n_buses() {
            for phase in Phase::ALL {
                assert_abs_diff_eq!(result.voltage_magnitude(bus, phase.conductor()), 1.01, epsilon = 1e-12);
            }
        }
        assert_eq!(result.total_losses_kw(), 0.0);
        assert!(result.branch_currents.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn tap_shifts_every_phase_voltage() {
        let (feeder, matrices) = two_bus();
        let inj = NodalInjection::zeros(feeder.n_buses());
        let result = solve_linear_pf(&feeder, &matrices, &inj, 2).unwrap();
        for bus in 0..feeder.n_buses() {
            for phase in Phase::ALL {
                assert_abs_diff_eq!(result.voltage_magnitude(bus, phase.conductor()), 0.985, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn tap_out_of_range_is_a_domain_error() {
        let (feeder, matrices) = two_bus();
        let inj = NodalInjection::zeros(feeder.n_buses());
        assert!(matches!(
            solve_linear_pf(&feeder, &matrices, &inj, 7),
            Err(PowerFlowError::TapOutOfRange { .. })
        ));
    }

    #[test]
    fn two_bus_single_phase_drop_matches_hand_calculation() {
        let (feeder, matrices) = two_bus();
        let mut inj = NodalInjection::zeros(feeder.n_buses());
        inj.add(1, Phase::A, -10.0, 0.0); // 10 kW load
        let result = solve_linear_pf(&feeder, &matrices, &inj, 0).unwrap();
        // Hand evaluation: I = -10e3 / (1.01 * 220) on phase a, +I on neutral.
        let i_mag = 10e3 / (1.01 * 220.0);
        let z_self = Complex64::new(0.0325, 0.0206);
        let z_mut = Complex64::new(0.000325, 0.000206);
        // Phase a drop: (z_self * (-i) + z_mut * (+i)), projected on phase a axis.
        let dv = (z_self - z_mut) * Complex64::new(-i_mag, 0.0) / 220.0;
        let expected = 1.01 + dv.re;
        assert_abs_diff_eq!(result.voltage_magnitude(1, Conductor::PhaseA), expected, epsilon = 1e-12);
        // Neutral rises by the return-current drop along the section.
        let vn_expected = (z_self - z_mut) * Complex64::new(i_mag, 0.0) / 220.0;
        assert_abs_diff_eq!(result.neutral_voltage(1), vn_expected.norm(), epsilon = 1e-12);
    }

    #[test]
    fn linear_pf_superposition_is_exact() {
        let feeder = build_feeder_from_str(&feeder_doc(5)).unwrap();
        let matrices = build_topology_matrices(&feeder);
        let mut inj1 = NodalInjection::zeros(feeder.n_buses());
        inj1.add(2, Phase::B, -4.0, -1.0);
        let mut inj2 = NodalInjection::zeros(feeder.n_buses());
        inj2.add(4, Phase::C, 6.0, 2.0);
        let mut inj_sum = NodalInjection::zeros(feeder.n_buses());
        inj_sum.add(2, Phase::B, -4.0, -1.0);
        inj_sum.add(4, Phase::C, 6.0, 2.0);

        // Superposition on the current-to-voltage mapping: the drop of the
        // summed currents equals the sum of drops.
        let flat = super::flat_voltages(&feeder, 0);
        let c1 = injection_currents(&feeder, &matrices, &inj1, &flat).unwrap();
        let c2 = injection_currents(&feeder, &matrices, &inj2, &flat).unwrap();
        let cs = injection_currents(&feeder, &matrices, &inj_sum, &flat).unwrap();
        let d1 = matrices.drop_ohm.dot(&c1);
        let d2 = matrices.drop_ohm.dot(&c2);
        let ds = matrices.drop_ohm.dot(&cs);
        for i in 0..ds.len() {
            assert_abs_diff_eq!((d1[i] + d2[i]).re, ds[i].re, epsilon = 1e-9);
            assert_abs_diff_eq!((d1[i] + d2[i]).im, ds[i].im, epsilon = 1e-9);
        }
    }

    #[test]
    fn fixedpoint_converges_immediately_without_load() {
        let (feeder, matrices) = two_bus();
        let inj = NodalInjection::zeros(feeder.n_buses());
        let result = solve_fixedpoint_pf(&feeder, &matrices, &inj, 0, 1e-8, 100).unwrap();
        assert_eq!(result.iterations, 1);
        assert_abs_diff_eq!(result.voltage_magnitude(1, Conductor::PhaseA), 1.01, epsilon = 1e-12);
    }

    #[test]
    fn fixedpoint_agrees_with_linear_at_light_load() {
        let feeder = build_feeder_from_str(&feeder_doc(8)).unwrap();
        let matrices = build_topology_matrices(&feeder);
        let mut inj = NodalInjection::zeros(feeder.n_buses());
        for bus in 1..feeder.n_buses() {
            for phase in Phase::ALL {
                inj.add(bus, phase, -2.0, -0.5);
            }
        }
        let lin = solve_linear_pf(&feeder, &matrices, &inj, 0).unwrap();
        let fp = solve_fixedpoint_pf(&feeder, &matrices, &inj, 0, 1e-8, 100).unwrap();
        for bus in 0..feeder.n_buses() {
            for c in 0..4 {
                let gap = (lin.voltage_magnitude(bus, Conductor::from_index(c))
                    - fp.voltage_magnitude(bus, Conductor::from_index(c)))
                .abs();
                assert!(gap <= 0.01, "bus {bus} conductor {c}: gap {gap}");
            }
        }
    }

    #[test]
    fn absurd_load_is_detected() {
        let (feeder, matrices) = two_bus();
        let mut inj = NodalInjection::zeros(feeder.n_buses());
        inj.add(1, Phase::A, -1000.0, 0.0); // 1 MW on a 50 m LV section
        let err = solve_fixedpoint_pf(&feeder, &matrices, &inj, 0, 1e-8, 100);
        assert!(
            matches!(err, Err(PowerFlowError::Diverged { .. }) | Err(PowerFlowError::NoConvergence { .. })
                | Err(PowerFlowError::SingularVoltage { .. })),
            "{err:?}"
        );
    }

    #[test]
    fn fixedpoint_power_balance() {
        let feeder = build_feeder_from_str(&feeder_doc(6)).unwrap();
        let matrices = build_topology_matrices(&feeder);
        let mut inj = NodalInjection::zeros(feeder.n_buses());
        inj.add(2, Phase::A, -8.0, -2.0);
        inj.add(3, Phase::B, -5.0, -1.0);
        inj.add(5, Phase::C, 4.0, 0.0);
        let fp = solve_fixedpoint_pf(&feeder, &matrices, &inj, 0, 1e-13, 200).unwrap();
        // Circuit-level balance: power entering from the slack plus power
        // injected at every node-conductor equals the series losses.
        let v_base = feeder.base_voltage_phase();
        let currents = injection_currents(&feeder, &matrices, &inj, &fp.voltages).unwrap();
        let mut injected_kw = 0.0;
        for &bus in &matrices.node_buses {
            for c in 0..4 {
                let col = matrices.node_col(bus, Conductor::from_index(c)).unwrap();
                let v = fp.voltages[(bus, c)] * v_base;
                injected_kw += (v * currents[col].conj()).re / 1e3;
            }
        }
        let mut slack_kw = 0.0;
        for (s, section) in feeder.sections().iter().enumerate() {
            let at_slack = feeder.bus_index(section.from_bus) == Some(feeder.slack_index())
                || feeder.bus_index(section.to_bus) == Some(feeder.slack_index());
            if !at_slack {
                continue;
            }
            for c in 0..4 {
                let v = fp.voltages[(feeder.slack_index(), c)] * v_base;
                // Branch current is oriented as the sum of downstream
                // injections (toward the slack); power fed into the feeder
                // is the negative of what arrives.
                slack_kw += -(v * fp.branch_currents[(s, c)].conj()).re / 1e3;
            }
        }
        // Exact dissipation Re{I^H Z I}: the reported per-conductor I^2 R
        // split omits the (tiny) mutual-resistance cross terms.
        let mut dissipated_kw = 0.0;
        for (s, section) in feeder.sections().iter().enumerate() {
            let z = section.impedance_block();
            for ci in 0..4 {
                for cj in 0..4 {
                    let term = fp.branch_currents[(s, ci)].conj() * z[(ci, cj)] * fp.branch_currents[(s, cj)];
                    dissipated_kw += term.re / 1e3;
                }
            }
        }
        let residual = slack_kw + injected_kw - dissipated_kw;
        let total_power = inj.p_kw.iter().map(|p| p.abs()).sum::<f64>();
        assert!(residual.abs() <= 1e-6 * total_power, "residual {residual}");
        // And the reported split is within the mutual-resistance margin.
        assert!((fp.total_losses_kw() - dissipated_kw).abs() <= 0.05 * dissipated_kw.max(1e-9));
    }

    #[test]
    fn loss_arithmetic() {
        let (feeder, _) = two_bus();
        let mut branch_currents = Array2::from_elem((1, 4), Complex64::new(0.0, 0.0));
        branch_currents[(0, 0)] = Complex64::new(10.0, 0.0);
        let losses = branch_losses_kw(&feeder, &branch_currents);
        assert_abs_diff_eq!(losses[(0, 0)], 3.25e-3, epsilon = 1e-15); // 3.25 W
        // Doubling currents quadruples losses.
        branch_currents[(0, 0)] = Complex64::new(20.0, 0.0);
        let losses2 = branch_losses_kw(&feeder, &branch_currents);
        assert_abs_diff_eq!(losses2[(0, 0)], 4.0 * losses[(0, 0)], epsilon = 1e-15);
    }

    #[test]
    fn balanced_voltages_have_zero_vuf() {
        let v = [
            Complex64::from_polar(1.0, 0.0),
            Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI / 3.0),
            Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI / 3.0),
        ];
        let (_, vuf, approx) = compute_sequence_vuf(v).unwrap();
        assert_abs_diff_eq!(vuf, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(approx, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn unbalanced_magnitudes_match_hand_calculation() {
        let v = [
            Complex64::from_polar(1.05, 0.0),
            Complex64::from_polar(1.00, -2.0 * std::f64::consts::PI / 3.0),
            Complex64::from_polar(0.95, 2.0 * std::f64::consts::PI / 3.0),
        ];
        let (seq, vuf, _) = compute_sequence_vuf(v).unwrap();
        assert_abs_diff_eq!(seq.v_pos.norm(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(seq.v_neg.norm(), 0.028867513459481287, epsilon = 1e-12);
        assert_abs_diff_eq!(vuf, 0.028867513459481287, epsilon = 1e-12);
    }

    #[test]
    fn vuf_is_scale_invariant() {
        let v = [
            Complex64::from_polar(1.05, 0.1),
            Complex64::from_polar(1.00, -2.0),
            Complex64::from_polar(0.95, 2.2),
        ];
        let (_, vuf1, _) = compute_sequence_vuf(v).unwrap();
        let (_, vuf2, _) = compute_sequence_vuf([v[0] * 1.02, v[1] * 1.02, v[2] * 1.02]).unwrap();
        assert_abs_diff_eq!(vuf1, vuf2, epsilon = 1e-12);
    }

    #[test]
    fn sequence_round_trip() {
        let v = [
            Complex64::new(1.03, 0.02),
            Complex64::new(-0.51, -0.88),
            Complex64::new(-0.49, 0.84),
        ];
        let (seq, _, _) = compute_sequence_vuf(v).unwrap();
        let back = seq.to_phases();
        for i in 0..3 {
            assert!((back[i] - v[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn limit_checks_flag_voltage_and_current() {
        let (feeder, matrices) = two_bus();
        let inj = NodalInjection::zeros(feeder.n_buses());
        let mut result = solve_linear_pf(&feeder, &matrices, &inj, 0).unwrap();
        assert!(check_operational_limits(&result, &feeder).is_empty());

        result.voltages[(1, 0)] = Complex64::from_polar(1.09, 0.0);
        result.branch_currents[(0, 1)] = Complex64::new(117.78, 0.0);
        let violations = check_operational_limits(&result, &feeder);
        let voltage: Vec<_> = violations
            .iter()
            .filter(|v| matches!(v, Violation::Voltage { .. }))
            .collect();
        assert_eq!(voltage.len(), 1);
        assert_abs_diff_eq!(voltage[0].magnitude(), 0.02, epsilon = 1e-12);
        let current: Vec<_> = violations
            .iter()
            .filter_map(|v| match v {
                Violation::Current { pct_of_rating, .. } => Some(*pct_of_rating),
                _ => None,
            })
            .collect();
        assert_eq!(current, vec![117.78]);
    }
}
