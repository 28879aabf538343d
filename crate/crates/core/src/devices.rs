//! PV units, battery storage and controllable loads, plus the assembly of
//! net nodal injections from a device fleet.
//!
//! The battery step rule follows the local control design verbatim: the
//! charge power is scaled by the efficiency before the energy update, which
//! differs from the centralised schedule model (efficiency inside the
//! energy recursion). Test names call out which convention they pin down.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BessConfig, ClConfig, DevicesConfig, FeederModel, Phase, PvConfig};
use crate::powerflow::NodalInjection;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("shift sequence must sum to zero over the horizon, got {sum}")]
    UnbalancedShifts { sum: i64 },
    #[error("shift at step {step} drives demand negative ({kw} kW)")]
    NegativeDemand { step: usize, kw: f64 },
    #[error("invalid battery parameters: {0}")]
    InvalidBess(String),
    #[error("device references unknown bus {bus}")]
    UnknownBus { bus: u32 },
}

/// A rooftop PV unit on one phase conductor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PvUnit {
    pub bus: u32,
    pub phase: Phase,
    pub kw_peak: f64,
    pub q_min_kvar: f64,
    pub q_max_kvar: f64,
}

impl PvUnit {
    pub fn from_config(c: &PvConfig) -> Self {
        Self {
            bus: c.bus,
            phase: c.phase,
            kw_peak: c.kw_peak,
            q_min_kvar: c.q_min_kvar,
            q_max_kvar: c.q_max_kvar,
        }
    }

    /// Maximum available active power at an availability factor in [0, 1].
    pub fn available_kw(&self, availability: f64) -> f64 {
        (self.kw_peak * availability).max(0.0)
    }
}

/// Battery parameters for one (bus, phase) unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BessParams {
    pub bus: u32,
    pub phase: Phase,
    pub e_capa_kwh: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub e_start_kwh: f64,
    pub eta: f64,
    pub p_max_kw: f64,
    pub s_max_kva: f64,
}

impl BessParams {
    pub fn from_config(c: &BessConfig) -> Result<Self, DeviceError> {
        let p = Self {
            bus: c.bus,
            phase: c.phase,
            e_capa_kwh: c.e_capa_kwh,
            soc_min: c.soc_min,
            soc_max: c.soc_max,
            e_start_kwh: c.e_start_kwh,
            eta: c.eta,
            p_max_kw: c.p_max_kw,
            s_max_kva: c.s_max_kva,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), DeviceError> {
        let err = |m: String| Err(DeviceError::InvalidBess(m));
        if !(0.0..1.0).contains(&self.soc_min) || self.soc_min >= self.soc_max || self.soc_max > 1.0 {
            return err(format!("soc bounds [{}, {}] invalid", self.soc_min, self.soc_max));
        }
        if self.e_start_kwh < self.e_min_kwh() - 1e-9 || self.e_start_kwh > self.e_max_kwh() + 1e-9 {
            return err(format!("initial energy {} outside soc window", self.e_start_kwh));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return err(format!("efficiency {} outside (0, 1]", self.eta));
        }
        if self.p_max_kw > self.s_max_kva {
            return err(format!("p_max {} exceeds s_max {}", self.p_max_kw, self.s_max_kva));
        }
        Ok(())
    }

    pub fn e_min_kwh(&self) -> f64 {
        self.soc_min * self.e_capa_kwh
    }

    pub fn e_max_kwh(&self) -> f64 {
        self.soc_max * self.e_capa_kwh
    }
}

/// Battery operating point after one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BessState {
    pub energy_kwh: f64,
    pub p_char_kw: f64,
    pub p_disc_kw: f64,
    pub q_kvar: f64,
}

/// One step of the rule-based battery controller.
///
/// Surplus local PV charges the battery (power scaled by the efficiency,
/// then clamped to the state-of-charge headroom and the power rating);
/// deficit discharges it symmetrically. Returns the new state and the
/// final active power demand seen by the network (initial load plus
/// charging power, or minus discharging power).
pub fn bess_step(
    params: &BessParams,
    energy_prev_kwh: f64,
    p_pv_kw: f64,
    p_load_kw: f64,
    dt_h: f64,
) -> (BessState, f64) {
    assert!(dt_h > 0.0, "dt must be positive");
    let mut state = BessState {
        energy_kwh: energy_prev_kwh,
        p_char_kw: 0.0,
        p_disc_kw: 0.0,
        q_kvar: 0.0,
    };
    let p_final;
    if p_pv_kw >= p_load_kw {
        let headroom_kwh = (params.e_max_kwh() - energy_prev_kwh).max(0.0);
        let mut p_char = (p_pv_kw - p_load_kw) * params.eta;
        if p_char * dt_h >= headroom_kwh {
            p_char = headroom_kwh / dt_h;
        }
        p_char = p_char.min(params.p_max_kw);
        state.p_char_kw = p_char;
        state.energy_kwh = energy_prev_kwh + p_char * dt_h;
        p_final = p_load_kw + p_char;
    } else {
        let available_kwh = (energy_prev_kwh - params.e_min_kwh()).max(0.0);
        let mut p_disc = (p_load_kw - p_pv_kw) / params.eta;
        if p_disc * dt_h >= available_kwh {
            p_disc = available_kwh / dt_h;
        }
        p_disc = p_disc.min(params.p_max_kw);
        state.p_disc_kw = p_disc;
        state.energy_kwh = energy_prev_kwh - p_disc * dt_h;
        p_final = p_load_kw - p_disc;
    }
    (state, p_final)
}

/// Reactive headroom left by the active power operating point.
pub fn bess_reactive_capability(params: &BessParams, p_char_kw: f64, p_disc_kw: f64) -> f64 {
    let p = p_char_kw.max(p_disc_kw);
    let slack = params.s_max_kva * params.s_max_kva - p * p;
    if slack <= 0.0 {
        0.0
    } else {
        slack.sqrt()
    }
}

/// A shiftable load block on one phase: demand is the base profile plus a
/// per-step integer shift in {-1, 0, +1} times the block size. Shifts must
/// cancel over the horizon so the daily energy stays constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllableLoad {
    pub bus: u32,
    pub phase: Phase,
    pub p_base_profile_kw: Vec<f64>,
    pub p_block_kw: f64,
    shifts: Vec<i8>,
}

impl ControllableLoad {
    pub fn new(
        bus: u32,
        phase: Phase,
        p_base_profile_kw: Vec<f64>,
        p_block_kw: f64,
        shifts: Vec<i8>,
    ) -> Result<Self, DeviceError> {
        assert_eq!(p_base_profile_kw.len(), shifts.len());
        assert!(shifts.iter().all(|s| (-1..=1).contains(s)));
        let sum: i64 = shifts.iter().map(|&s| s as i64).sum();
        if sum != 0 {
            return Err(DeviceError::UnbalancedShifts { sum });
        }
        let cl = Self { bus, phase, p_base_profile_kw, p_block_kw, shifts };
        for t in 0..cl.shifts.len() {
            cl.demand_at(t)?;
        }
        Ok(cl)
    }

    pub fn from_config(c: &ClConfig, p_base_profile_kw: Vec<f64>) -> Self {
        let n = p_base_profile_kw.len();
        Self {
            bus: c.bus,
            phase: c.phase,
            p_base_profile_kw,
            p_block_kw: c.p_block_kw,
            shifts: vec![0; n],
        }
    }

    pub fn shifts(&self) -> &[i8] {
        &self.shifts
    }

    pub fn horizon(&self) -> usize {
        self.shifts.len()
    }

    /// Demand after applying the step's shift.
    pub fn demand_at(&self, t: usize) -> Result<f64, DeviceError> {
        apply_shift(self.p_base_profile_kw[t], self.p_block_kw, self.shifts[t], t)
    }
}

/// `P_d = P_1 + n * P_block` with a nonnegativity check.
pub fn apply_shift(p_base_kw: f64, p_block_kw: f64, shift: i8, step: usize) -> Result<f64, DeviceError> {
    debug_assert!((-1..=1).contains(&shift));
    let kw = p_base_kw + shift as f64 * p_block_kw;
    if kw < 0.0 {
        return Err(DeviceError::NegativeDemand { step, kw });
    }
    Ok(kw)
}

/// All devices attached to a feeder.
#[derive(Debug, Clone, Default)]
pub struct DeviceFleet {
    pub pv: Vec<PvUnit>,
    pub bess: Vec<BessParams>,
    pub cl: Vec<ClConfig>,
}

impl DeviceFleet {
    pub fn from_config(feeder: &FeederModel, devices: &DevicesConfig) -> Result<Self, DeviceError> {
        let known = |bus: u32| feeder.bus_index(bus).is_some();
        for d in &devices.pv {
            if !known(d.bus) {
                return Err(DeviceError::UnknownBus { bus: d.bus });
            }
        }
        for d in &devices.bess {
            if !known(d.bus) {
                return Err(DeviceError::UnknownBus { bus: d.bus });
            }
        }
        for d in &devices.cl {
            if !known(d.bus) {
                return Err(DeviceError::UnknownBus { bus: d.bus });
            }
        }
        Ok(Self {
            pv: devices.pv.iter().map(PvUnit::from_config).collect(),
            bess: devices.bess.iter().map(BessParams::from_config).collect::<Result<_, _>>()?,
            cl: devices.cl.clone(),
        })
    }
}

/// Device setpoints at one instant, aligned with a fleet's unit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSetpoints {
    /// (p_g, q_g) per PV unit, kW / kvar.
    pub pv: Vec<(f64, f64)>,
    /// (p_char, p_disc, q) per battery unit.
    pub bess: Vec<(f64, f64, f64)>,
    /// Shift in {-1, 0, 1} per controllable load.
    pub cl_shift: Vec<i8>,
}

impl FleetSetpoints {
    pub fn zeros(fleet: &DeviceFleet) -> Self {
        Self {
            pv: vec![(0.0, 0.0); fleet.pv.len()],
            bess: vec![(0.0, 0.0, 0.0); fleet.bess.len()],
            cl_shift: vec![0; fleet.cl.len()],
        }
    }
}

/// Demand power factor applied to every load: `tan(acos(0.95))` lagging.
pub const DEFAULT_LOAD_COS_PHI: f64 = 0.95;

pub fn load_tan_phi(cos_phi: f64) -> f64 {
    (cos_phi.acos()).tan()
}

/// Net nodal injection at one instant: generation minus demand minus
/// charging plus discharging on the active side; generation reactive
/// output minus the demand's power-factor draw plus battery reactive on
/// the reactive side. Buses without devices contribute only their load.
#[allow(clippy::too_many_arguments)]
pub fn nodal_net_injection(
    feeder: &FeederModel,
    fleet: &DeviceFleet,
    setpoints: &FleetSetpoints,
    load_kw: &ndarray::Array2<f64>,
    cl_demand_kw: &[f64],
    cos_phi: f64,
) -> NodalInjection {
    let tan_phi = load_tan_phi(cos_phi);
    let mut inj = NodalInjection::zeros(feeder.n_buses());
    // Base demand (the controllable loads' base profile is part of
    // load_kw; cl_demand replaces it below via the shift delta).
    for bus in 0..feeder.n_buses() {
        for phase in Phase::ALL {
            let p_d = load_kw[(bus, phase.index())];
            inj.add(bus, phase, -p_d, -p_d * tan_phi);
        }
    }
    for (u, unit) in fleet.pv.iter().enumerate() {
        let (p_g, q_g) = setpoints.pv[u];
        let bus = feeder.bus_index(unit.bus).expect("validated at fleet build");
        inj.add(bus, unit.phase, p_g, q_g);
    }
    for (u, unit) in fleet.bess.iter().enumerate() {
        let (p_char, p_disc, q) = setpoints.bess[u];
        let bus = feeder.bus_index(unit.bus).expect("validated at fleet build");
        inj.add(bus, unit.phase, p_disc - p_char, q);
    }
    for (u, cl) in fleet.cl.iter().enumerate() {
        // The shift delta on top of the base demand already counted.
        let delta = cl_demand_kw[u];
        let bus = feeder.bus_index(cl.bus).expect("validated at fleet build");
        inj.add(bus, cl.phase, -delta, -delta * tan_phi);
    }
    inj
}
