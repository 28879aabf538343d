//! Communication-free local control: a three-class model decides the
//! controllable-load action from local measurements, storage follows its
//! rule-based policy, and PV inverters run a voltage droop on reactive
//! power. Training data comes from replaying centralised schedules.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{bess_step, BessState, DeviceFleet, FleetSetpoints};
use crate::opf::{OpfProblem, OpfSolution};
use crate::powerflow::solve_linear_pf;

/// Reference controllable-load responses: (local PV injection p.u., local
/// voltage p.u., action). Hand-labeled operating points; linearly
/// separable, so a trained model must reproduce them exactly.
pub const REFERENCE_CL_RESPONSES: [(f64, f64, ClAction); 20] = [
    (0.0, 0.995, ClAction::Increase),
    (0.0, 0.996, ClAction::Increase),
    (0.0, 1.020, ClAction::Unchanged),
    (0.0, 1.017, ClAction::Unchanged),
    (0.0, 1.045, ClAction::Decrease),
    (0.0, 1.044, ClAction::Decrease),
    (0.1, 1.007, ClAction::Increase),
    (0.1, 1.0325, ClAction::Unchanged),
    (0.1, 1.032, ClAction::Unchanged),
    (0.1, 1.0575, ClAction::Decrease),
    (0.13, 1.060, ClAction::Decrease),
    (0.2, 1.016, ClAction::Increase),
    (0.2, 1.043, ClAction::Unchanged),
    (0.3, 1.030, ClAction::Increase),
    (0.36, 1.035, ClAction::Increase),
    (0.38, 1.037, ClAction::Increase),
    (0.384, 1.037, ClAction::Increase),
    (0.5, 1.042, ClAction::Increase),
    (0.71, 1.054, ClAction::Increase),
    (0.8, 1.048, ClAction::Increase),
];

pub const DEFAULT_DROOP_KVAR_PER_PU: f64 = 20.0;
pub const DEFAULT_DROOP_V_REF: f64 = 1.03;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("need at least 3 samples to train, got {0}")]
    TooFewSamples(usize),
    #[error("training stalled at {accuracy:.1}% accuracy after {epochs} epochs; final losses {tail:?}")]
    TrainingFailed { accuracy: f64, epochs: usize, tail: Vec<f64> },
    #[error("feature width mismatch: model expects {expected}, got {got}")]
    FeatureWidth { expected: usize, got: usize },
    #[error(transparent)]
    Opf(#[from] crate::opf::OpfError),
    #[error(transparent)]
    PowerFlow(#[from] crate::powerflow::PowerFlowError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClAction {
    Increase,
    Unchanged,
    Decrease,
}

impl ClAction {
    pub const ALL: [ClAction; 3] = [ClAction::Increase, ClAction::Unchanged, ClAction::Decrease];

    pub fn index(self) -> usize {
        match self {
            ClAction::Increase => 0,
            ClAction::Unchanged => 1,
            ClAction::Decrease => 2,
        }
    }

    pub fn shift(self) -> i8 {
        match self {
            ClAction::Increase => 1,
            ClAction::Unchanged => 0,
            ClAction::Decrease => -1,
        }
    }

    pub fn from_shift(n: i8) -> ClAction {
        match n.signum() {
            1 => ClAction::Increase,
            -1 => ClAction::Decrease,
            _ => ClAction::Unchanged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    /// (local PV injection p.u., local voltage p.u.) by convention, but
    /// any fixed-width feature vector trains.
    pub features: Vec<f64>,
    pub label: ClAction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub class_counts: [usize; 3],
    pub epochs: usize,
    pub seed: u64,
}

/// Multinomial logistic model over standardized features. Deterministic:
/// zero-initialised weights, full-batch gradient descent, seeded split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classifier {
    /// (3, d + 1); last column is the bias.
    weights: Vec<Vec<f64>>,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    pub report: TrainingReport,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub seed: u64,
    pub train_fraction: f64,
    pub max_epochs: usize,
    pub learning_rate: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { seed: 0, train_fraction: 0.8, max_epochs: 20_000, learning_rate: 0.5 }
    }
}

impl Classifier {
    pub fn n_features(&self) -> usize {
        self.feature_mean.len()
    }

    fn scores(&self, features: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (k, row) in self.weights.iter().enumerate() {
            let mut z = row[features.len()];
            for (j, &x) in features.iter().enumerate() {
                let std = self.feature_std[j];
                let xn = if std > 0.0 { (x - self.feature_mean[j]) / std } else { 0.0 };
                z += row[j] * xn;
            }
            out[k] = z;
        }
        out
    }
}

/// Deterministic class decision; near-ties resolve to `Unchanged` so a
/// borderline reading never toggles load.
pub fn classify_cl_action(model: &Classifier, features: &[f64]) -> Result<ClAction, ControlError> {
    if features.len() != model.n_features() {
        return Err(ControlError::FeatureWidth { expected: model.n_features(), got: features.len() });
    }
    let scores = model.scores(features);
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if scores[ClAction::Unchanged.index()] >= best - 1e-9 {
        return Ok(ClAction::Unchanged);
    }
    let winner = ClAction::ALL
        .into_iter()
        .max_by(|a, b| scores[a.index()].partial_cmp(&scores[b.index()]).unwrap())
        .unwrap();
    Ok(winner)
}

pub fn train_classifier(
    samples: &[LabeledSample],
    options: &TrainOptions,
) -> Result<Classifier, ControlError> {
    if samples.len() < 3 {
        return Err(ControlError::TooFewSamples(samples.len()));
    }
    let d = samples[0].features.len();
    assert!(samples.iter().all(|s| s.features.len() == d), "ragged feature vectors");

    let mut class_counts = [0usize; 3];
    for s in samples {
        class_counts[s.label.index()] += 1;
    }

    // Seeded shuffle, then an 80/20 (by default) split.
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    order.shuffle(&mut rng);
    let n_train = ((samples.len() as f64) * options.train_fraction).round().max(1.0) as usize;
    let (train_idx, test_idx) = order.split_at(n_train.min(samples.len()));

    // Single-class data needs no optimisation: a constant decision rule.
    if class_counts.iter().filter(|&&c| c > 0).count() == 1 {
        let only = ClAction::ALL.into_iter().find(|a| class_counts[a.index()] > 0).unwrap();
        let mut weights = vec![vec![0.0; d + 1]; 3];
        weights[only.index()][d] = 1.0;
        return Ok(Classifier {
            weights,
            feature_mean: vec![0.0; d],
            feature_std: vec![1.0; d],
            report: TrainingReport {
                train_accuracy: 100.0,
                test_accuracy: 100.0,
                class_counts,
                epochs: 0,
                seed: options.seed,
            },
        });
    }

    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in train_idx {
        for j in 0..d {
            mean[j] += samples[i].features[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= train_idx.len() as f64;
    }
    for &i in train_idx {
        for j in 0..d {
            let dx = samples[i].features[j] - mean[j];
            std[j] += dx * dx;
        }
    }
    for s in std.iter_mut() {
        *s = (*s / train_idx.len() as f64).sqrt();
        if *s < 1e-12 {
            *s = 0.0;
        }
    }
    let norm = |i: usize| -> Vec<f64> {
        (0..d)
            .map(|j| {
                if std[j] > 0.0 {
                    (samples[i].features[j] - mean[j]) / std[j]
                } else {
                    0.0
                }
            })
            .collect()
    };

    let x_train: Vec<Vec<f64>> = train_idx.iter().map(|&i| norm(i)).collect();
    let y_train: Vec<usize> = train_idx.iter().map(|&i| samples[i].label.index()).collect();
    let mut w = Array2::<f64>::zeros((3, d + 1));
    let mut losses = Vec::new();
    let mut epochs = 0;
    let mut accuracy = 0.0;
    for epoch in 1..=options.max_epochs {
        epochs = epoch;
        let mut grad = Array2::<f64>::zeros((3, d + 1));
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (x, &y) in x_train.iter().zip(&y_train) {
            let mut z = [0.0f64; 3];
            for k in 0..3 {
                z[k] = w[(k, d)] + (0..d).map(|j| w[(k, j)] * x[j]).sum::<f64>();
            }
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let sum: f64 = exps.iter().sum();
            loss -= (exps[y] / sum).ln();
            let pred = (0..3).max_by(|&a, &b| z[a].partial_cmp(&z[b]).unwrap()).unwrap();
            if pred == y {
                correct += 1;
            }
            for k in 0..3 {
                let err = exps[k] / sum - if k == y { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[(k, j)] += err * x[j];
                }
                grad[(k, d)] += err;
            }
        }
        losses.push(loss / x_train.len() as f64);
        accuracy = 100.0 * correct as f64 / x_train.len() as f64;
        if correct == x_train.len() {
            break;
        }
        let scale = options.learning_rate / x_train.len() as f64;
        w.scaled_add(-scale, &grad);
    }
    if accuracy < 100.0 {
        let tail = losses.iter().rev().take(5).rev().cloned().collect();
        return Err(ControlError::TrainingFailed { accuracy, epochs, tail });
    }

    let model = Classifier {
        weights: (0..3).map(|k| (0..=d).map(|j| w[(k, j)]).collect()).collect(),
        feature_mean: mean,
        feature_std: std,
        report: TrainingReport {
            train_accuracy: accuracy,
            test_accuracy: 0.0,
            class_counts,
            epochs,
            seed: options.seed,
        },
    };
    let mut model = model;
    let test_correct = test_idx
        .iter()
        .filter(|&&i| {
            let scores = model.scores(&samples[i].features);
            let pred = (0..3).max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap()).unwrap();
            pred == samples[i].label.index()
        })
        .count();
    model.report.test_accuracy = if test_idx.is_empty() {
        100.0
    } else {
        100.0 * test_correct as f64 / test_idx.len() as f64
    };
    Ok(model)
}

#[derive(Debug, Clone, Default)]
pub struct LabelReport {
    pub class_counts: [usize; 3],
    pub skipped: usize,
}

/// Replay a centralised schedule and emit one labeled sample per
/// (controllable load, timestep): the label is the schedule's shift and
/// the features are the local voltage and local PV output the device
/// would have measured.
pub fn generate_training_labels(
    problem: &OpfProblem,
    solution: &OpfSolution,
) -> Result<(Vec<LabeledSample>, LabelReport), ControlError> {
    let mut samples = Vec::new();
    let mut report = LabelReport::default();
    for t in 0..problem.horizon() {
        let sp = &solution.setpoints[t];
        let inj = step_injection_for_labels(problem, t, sp);
        let pf = solve_linear_pf(problem.feeder, problem.matrices, &inj, solution.taps[t])?;
        for (u, cl) in problem.fleet.cl.iter().enumerate() {
            let bus = problem.feeder.bus_index(cl.bus).expect("fleet validated");
            let v = pf.voltage_magnitude(bus, cl.phase.conductor());
            let pv = local_pv_pu(problem.fleet, sp, cl.bus, cl.phase);
            let label = ClAction::from_shift(sp.cl_shift[u]);
            report.class_counts[label.index()] += 1;
            samples.push(LabeledSample { features: vec![pv, v], label });
        }
    }
    Ok((samples, report))
}

fn step_injection_for_labels(
    problem: &OpfProblem,
    t: usize,
    sp: &FleetSetpoints,
) -> crate::powerflow::NodalInjection {
    let cl_delta: Vec<f64> = problem
        .fleet
        .cl
        .iter()
        .zip(&sp.cl_shift)
        .map(|(cl, &n)| n as f64 * cl.p_block_kw)
        .collect();
    crate::devices::nodal_net_injection(
        problem.feeder,
        problem.fleet,
        sp,
        &problem.profiles.load_kw[t],
        &cl_delta,
        crate::devices::DEFAULT_LOAD_COS_PHI,
    )
}

/// PV output on the device's own bus and phase, normalised by the
/// installed peak there (0 when no PV shares the connection).
fn local_pv_pu(fleet: &DeviceFleet, sp: &FleetSetpoints, bus: u32, phase: crate::grid::Phase) -> f64 {
    let mut p = 0.0;
    let mut peak = 0.0;
    for (u, unit) in fleet.pv.iter().enumerate() {
        if unit.bus == bus && unit.phase == phase {
            p += sp.pv[u].0;
            peak += unit.kw_peak;
        }
    }
    if peak > 0.0 {
        p / peak
    } else {
        0.0
    }
}

/// Local measurements one device controller is allowed to see.
#[derive(Debug, Clone, Copy)]
pub struct LocalMeasurements {
    /// Voltage magnitude at the device's own connection, p.u. (previous
    /// step's converged state).
    pub v_pu: f64,
    /// Available PV power at the connection, kW.
    pub pv_kw: f64,
    /// Local load at the connection, kW.
    pub load_kw: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DroopParams {
    pub k_kvar_per_pu: f64,
    pub v_ref_pu: f64,
}

impl Default for DroopParams {
    fn default() -> Self {
        Self { k_kvar_per_pu: DEFAULT_DROOP_KVAR_PER_PU, v_ref_pu: DEFAULT_DROOP_V_REF }
    }
}

/// Voltage droop on inverter reactive power: absorb above the reference,
/// inject below, clamped to the unit's band.
pub fn pv_droop_q(droop: &DroopParams, v_pu: f64, q_min: f64, q_max: f64) -> f64 {
    (-droop.k_kvar_per_pu * (v_pu - droop.v_ref_pu)).clamp(q_min, q_max)
}

/// Mutable per-day controller state: storage energies and the running
/// shift balance per controllable load.
#[derive(Debug, Clone)]
pub struct LocalControllerState {
    pub bess_energy_kwh: Vec<f64>,
    pub cl_cum_shift: Vec<i64>,
}

impl LocalControllerState {
    pub fn fresh(fleet: &DeviceFleet) -> Self {
        Self {
            bess_energy_kwh: fleet.bess.iter().map(|b| b.e_start_kwh).collect(),
            cl_cum_shift: vec![0; fleet.cl.len()],
        }
    }
}

/// One step of fully local dispatch. `measurements` are indexed per fleet
/// unit (PV, storage, controllable loads in fleet order); nothing about
/// any other bus enters. The shift guard clamps the model's decision so
/// the day always ends balanced.
#[allow(clippy::too_many_arguments)]
pub fn local_dispatch(
    fleet: &DeviceFleet,
    model: &Classifier,
    droop: &DroopParams,
    state: &mut LocalControllerState,
    pv_meas: &[LocalMeasurements],
    bess_meas: &[LocalMeasurements],
    cl_meas: &[LocalMeasurements],
    t: usize,
    horizon: usize,
    dt_h: f64,
) -> Result<FleetSetpoints, ControlError> {
    let mut sp = FleetSetpoints::zeros(fleet);
    for (u, unit) in fleet.pv.iter().enumerate() {
        let m = &pv_meas[u];
        // Inverter offline when not producing: no reactive support at night.
        let q = if m.pv_kw > 0.0 {
            pv_droop_q(droop, m.v_pu, unit.q_min_kvar, unit.q_max_kvar)
        } else {
            0.0
        };
        sp.pv[u] = (m.pv_kw, q);
    }
    for (u, unit) in fleet.bess.iter().enumerate() {
        let m = &bess_meas[u];
        let (next, _p_final): (BessState, f64) =
            bess_step(unit, state.bess_energy_kwh[u], m.pv_kw, m.load_kw, dt_h);
        state.bess_energy_kwh[u] = next.energy_kwh;
        sp.bess[u] = (next.p_char_kw, next.p_disc_kw, 0.0);
    }
    let remaining = (horizon - 1 - t) as i64;
    for (u, unit) in fleet.cl.iter().enumerate() {
        let m = &cl_meas[u];
        let peak: f64 = fleet
            .pv
            .iter()
            .filter(|p| p.bus == unit.bus && p.phase == unit.phase)
            .map(|p| p.kw_peak)
            .sum();
        let pv_pu = if peak > 0.0 { m.pv_kw / peak } else { 0.0 };
        let wanted = classify_cl_action(model, &[pv_pu, m.v_pu])?.shift() as i64;
        let lo = (-(remaining + state.cl_cum_shift[u])).max(-1);
        let hi = (remaining - state.cl_cum_shift[u]).min(1);
        let n = wanted.clamp(lo, hi);
        state.cl_cum_shift[u] += n;
        sp.cl_shift[u] = n as i8;
    }
    Ok(sp)
}

pub fn reference_samples() -> Vec<LabeledSample> {
    REFERENCE_CL_RESPONSES
        .iter()
        .map(|&(pv, v, label)| LabeledSample { features: vec![pv, v], label })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reference_set_trains_to_perfect_accuracy() {
        let samples = reference_samples();
        let model = train_classifier(&samples, &TrainOptions::default()).unwrap();
        assert_eq!(model.report.train_accuracy, 100.0);
        for s in &samples {
            assert_eq!(classify_cl_action(&model, &s.features).unwrap(), s.label, "{:?}", s);
        }
    }

    #[test]
    fn spot_predictions_match_reference_rows() {
        let model = train_classifier(&reference_samples(), &TrainOptions::default()).unwrap();
        assert_eq!(classify_cl_action(&model, &[0.0, 0.995]).unwrap(), ClAction::Increase);
        assert_eq!(classify_cl_action(&model, &[0.0, 1.045]).unwrap(), ClAction::Decrease);
        assert_eq!(classify_cl_action(&model, &[0.2, 1.043]).unwrap(), ClAction::Unchanged);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let samples = reference_samples();
        let a = train_classifier(&samples, &TrainOptions::default()).unwrap();
        let b = train_classifier(&samples, &TrainOptions::default()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.report.epochs, b.report.epochs);
    }

    #[test]
    fn single_class_data_yields_constant_model() {
        let samples: Vec<LabeledSample> = (0..5)
            .map(|i| LabeledSample { features: vec![i as f64], label: ClAction::Increase })
            .collect();
        let model = train_classifier(&samples, &TrainOptions::default()).unwrap();
        assert_eq!(model.report.train_accuracy, 100.0);
        assert_eq!(classify_cl_action(&model, &[42.0]).unwrap(), ClAction::Increase);
    }

    #[test]
    fn nonseparable_data_reports_failure() {
        // XOR pattern with a linear model: cannot reach 100%.
        let samples = vec![
            LabeledSample { features: vec![0.0, 0.0], label: ClAction::Increase },
            LabeledSample { features: vec![1.0, 1.0], label: ClAction::Increase },
            LabeledSample { features: vec![0.0, 1.0], label: ClAction::Decrease },
            LabeledSample { features: vec![1.0, 0.0], label: ClAction::Decrease },
        ];
        let options = TrainOptions { max_epochs: 500, train_fraction: 1.0, ..TrainOptions::default() };
        match train_classifier(&samples, &options) {
            Err(ControlError::TrainingFailed { accuracy, tail, .. }) => {
                assert!(accuracy < 100.0);
                assert!(!tail.is_empty());
            }
            other => panic!("expected training failure, got {other:?}"),
        }
    }

    #[test]
    fn ties_resolve_to_unchanged() {
        // A zero-weight model scores every class equally.
        let model = Classifier {
            weights: vec![vec![0.0; 3]; 3],
            feature_mean: vec![0.0; 2],
            feature_std: vec![1.0; 2],
            report: TrainingReport {
                train_accuracy: 100.0,
                test_accuracy: 100.0,
                class_counts: [1, 1, 1],
                epochs: 0,
                seed: 0,
            },
        };
        assert_eq!(classify_cl_action(&model, &[0.3, 1.0]).unwrap(), ClAction::Unchanged);
    }

    #[test]
    fn droop_injects_below_reference_and_saturates_above() {
        let droop = DroopParams { k_kvar_per_pu: 10.0, v_ref_pu: 1.03 };
        assert_abs_diff_eq!(pv_droop_q(&droop, 1.03, -5.0, 5.0), 0.0, epsilon = 1e-12);
        // 1.08 p.u. asks for -0.5 kvar * 10/pu = absorption at the bound.
        assert_abs_diff_eq!(pv_droop_q(&droop, 1.08, -0.4, 0.4), -0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(pv_droop_q(&droop, 1.02, -5.0, 5.0), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn shift_guard_forces_end_of_day_balance() {
        let doc = serde_json::json!({
            "base_voltage_ll": 380.0,
            "base_voltage_phase": 220.0,
            "slack_bus": 1,
            "transformer_ground_ohm": 3.0,
            "buses": [{"id": 1}, {"id": 2}],
            "sections": [
                {"from": 1, "to": 2, "length_km": 0.05,
                 "z_self": [0.65, 0.412], "z_mutual": [0.0065, 0.00412]}
            ],
            "oltc": {"v_slack": [1.0, 1.0, 1.0], "dv_per_tap": 0.0125, "tap_min": 0, "tap_max": 0},
            "limits": {"v_min": 0.9, "v_max": 1.1, "v_neut_max": 0.5,
                       "vuf_max": 0.5, "i_max_default_a": 10000.0},
            "devices": {"cl": [{"bus": 2, "phase": "c", "p_block_kw": 1.0}]}
        })
        .to_string();
        let feeder = crate::grid::build_feeder_from_str(&doc).unwrap();
        let fleet = DeviceFleet::from_config(&feeder, &feeder.config().devices.clone()).unwrap();
        let model = train_classifier(&reference_samples(), &TrainOptions::default()).unwrap();
        let droop = DroopParams::default();
        let horizon = 8;

        // A low voltage all day keeps asking for Increase; the guard must
        // still end the day at zero net shift.
        let mut state = LocalControllerState::fresh(&fleet);
        let mut total = 0i64;
        for t in 0..horizon {
            let m = LocalMeasurements { v_pu: 0.99, pv_kw: 0.0, load_kw: 2.0 };
            let sp = local_dispatch(
                &fleet, &model, &droop, &mut state, &[], &[], &[m], t, horizon, 1.0 / 12.0,
            )
            .unwrap();
            total += sp.cl_shift[0] as i64;
        }
        assert_eq!(total, 0);
        assert_eq!(state.cl_cum_shift[0], 0);
    }

    #[test]
    fn model_round_trips_through_serialization() {
        let model = train_classifier(&reference_samples(), &TrainOptions::default()).unwrap();
        let text = serde_json::to_string(&model).unwrap();
        let back: Classifier = serde_json::from_str(&text).unwrap();
        assert_eq!(model.weights, back.weights);
        for s in reference_samples() {
            assert_eq!(
                classify_cl_action(&model, &s.features).unwrap(),
                classify_cl_action(&back, &s.features).unwrap()
            );
        }
    }
}
