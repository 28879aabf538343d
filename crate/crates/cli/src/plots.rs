//! Plot-data CSV emission: tidy long-format time series plus per-hour
//! current box summaries. Every file carries a schema-version comment
//! line above the header.

use std::io::Write;
use std::path::Path;

use anyhow::Context;
use feederflow::sim::RunLog;
use feederflow::FeederModel;

/// Five-number summary with linear interpolation between order statistics
/// (the numpy default): returns [min, q1, median, q3, max].
pub fn quartiles(samples: &[f64]) -> Option<[f64; 5]> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let at = |p: f64| -> f64 {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    Some([sorted[0], at(0.25), at(0.5), at(0.75), sorted[sorted.len() - 1]])
}

fn create(dir: &Path, name: &str, schema: &str) -> anyhow::Result<std::fs::File> {
    let path = dir.join(name);
    let mut f = std::fs::File::create(&path)
        .with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "# schema: {schema}")?;
    Ok(f)
}

/// Storage energy per unit plus the aggregate PV reactive output, from the
/// decentralized-mode log.
pub fn write_soc_trace(dir: &Path, proposed: &RunLog) -> anyhow::Result<()> {
    let mut f = create(dir, "soc_trace.csv", "soc-trace v1")?;
    writeln!(f, "t,series,value")?;
    let mut t = 0usize;
    for day in &proposed.days {
        for step in &day.steps {
            for (u, e) in step.bess_energy_kwh.iter().enumerate() {
                writeln!(f, "{t},soc_kwh_unit_{u},{e:.6}")?;
            }
            let q: f64 = step.pv_q_kvar.iter().sum();
            writeln!(f, "{t},pv_q_kvar_total,{q:.6}")?;
            t += 1;
        }
    }
    Ok(())
}

/// The bus that runs hottest in the uncontrolled log: where overvoltage
/// shows first, and the natural trace to plot.
pub fn hottest_bus(feeder: &FeederModel, traditional: &RunLog) -> usize {
    let mut best = (0usize, 0.0f64);
    for day in &traditional.days {
        for step in &day.steps {
            for b in 0..feeder.n_buses() {
                if b == feeder.slack_index() {
                    continue;
                }
                for p in 0..3 {
                    let m = step.phase_voltages[(b, p)].norm();
                    if m > best.1 {
                        best = (b, m);
                    }
                }
            }
        }
    }
    best.0
}

/// Max phase voltage at one bus per step, one series per mode.
pub fn write_voltage_trace(
    dir: &Path,
    feeder: &FeederModel,
    logs: &[RunLog],
    bus_idx: usize,
) -> anyhow::Result<()> {
    let mut f = create(dir, "voltage_trace.csv", "voltage-trace v1")?;
    writeln!(f, "t,series,value")?;
    writeln!(f, "# bus {}", feeder.bus_id(bus_idx))?;
    for log in logs {
        let mut t = 0usize;
        for day in &log.days {
            for step in &day.steps {
                let v = (0..3)
                    .map(|p| step.phase_voltages[(bus_idx, p)].norm())
                    .fold(0.0f64, f64::max);
                writeln!(f, "{t},{},{v:.6}", log.mode.label())?;
                t += 1;
            }
        }
    }
    Ok(())
}

/// Per-hour five-number summary of each section's worst-conductor current,
/// pooled across days.
pub fn write_current_boxes(
    dir: &Path,
    feeder: &FeederModel,
    logs: &[RunLog],
) -> anyhow::Result<()> {
    let mut f = create(dir, "current_boxes.csv", "current-boxes v1")?;
    writeln!(f, "mode,section,hour,min,q1,median,q3,max")?;
    for log in logs {
        for s in 0..feeder.n_sections() {
            let mut per_hour: Vec<Vec<f64>> = vec![Vec::new(); 24];
            for day in &log.days {
                let steps = day.steps.len();
                for (t, step) in day.steps.iter().enumerate() {
                    let hour = (t * 24 / steps.max(1)).min(23);
                    let dims = step.branch_current_a.dim();
                    let i = (0..dims.1)
                        .map(|c| step.branch_current_a[(s, c)])
                        .fold(0.0f64, f64::max);
                    per_hour[hour].push(i);
                }
            }
            let sec = &feeder.sections()[s];
            for (hour, samples) in per_hour.iter().enumerate() {
                if let Some([min, q1, med, q3, max]) = quartiles(samples) {
                    writeln!(
                        f,
                        "{},{}-{},{hour},{min:.4},{q1:.4},{med:.4},{q3:.4},{max:.4}",
                        log.mode.label(),
                        sec.from_bus,
                        sec.to_bus
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Worst-conductor current of the head section per step, one series per mode.
pub fn write_current_trace(
    dir: &Path,
    feeder: &FeederModel,
    logs: &[RunLog],
) -> anyhow::Result<()> {
    let slack_id = feeder.bus_id(feeder.slack_index());
    let head = feeder
        .sections()
        .iter()
        .position(|s| s.from_bus == slack_id)
        .context("feeder has no section leaving the slack bus")?;
    let mut f = create(dir, "current_trace.csv", "current-trace v1")?;
    writeln!(f, "t,series,value")?;
    for log in logs {
        let mut t = 0usize;
        for day in &log.days {
            for step in &day.steps {
                let dims = step.branch_current_a.dim();
                let i = (0..dims.1)
                    .map(|c| step.branch_current_a[(head, c)])
                    .fold(0.0f64, f64::max);
                writeln!(f, "{t},{},{i:.4}", log.mode.label())?;
                t += 1;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_samples_collapse_the_box() {
        let q = quartiles(&[3.0; 7]).unwrap();
        assert_eq!(q, [3.0; 5]);
    }

    #[test]
    fn five_distinct_samples_hit_the_order_statistics() {
        let q = quartiles(&[5.0, 3.0, 1.0, 4.0, 2.0]).unwrap();
        assert_eq!(q, [1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn even_count_interpolates_linearly() {
        // {1,2,3,4}: q1 at h=0.75 -> 1.75, median 2.5, q3 3.25.
        let q = quartiles(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(q, [1.0, 1.75, 2.5, 3.25, 4.0]);
    }

    #[test]
    fn empty_input_yields_none() {
        assert!(quartiles(&[]).is_none());
    }
}
