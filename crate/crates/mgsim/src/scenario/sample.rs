//! Deterministic sample scenario generator.
//!
//! Produces the bundled one-week data set: a raw per-bus power file
//! (`raw_power.csv`, the `scenario-convert` input schema) plus the four
//! scenario CSVs derived from it through the real conversion pipeline.
//! Profiles are synthetic but sized like a mid-size feeder: ~2..4 MW of
//! load against 3 wind and 2 solar units, with storage absorbing the
//! forecast imbalance.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::Result;
use crate::grid::{ConverterKind, GridTopology};
use crate::scenario::{convert_raw_scenario, raw_columns, XiConvention, SCENARIO_DT_S};

/// Voltage magnitude used when converting the sample's load powers to
/// impedances, and the baseline of its voltage setpoints (V).
pub const SAMPLE_V_NOMINAL: f64 = 10336.0;

const SEED: u64 = 33;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * (rng.next_u32() as f64 / u32::MAX as f64)
}

/// Writes `raw_power.csv` and the four scenario files into `dir`.
/// `n_points` of 672 gives one week at 15-minute resolution. Byte-identical
/// across runs and platforms.
pub fn write_sample_week(dir: &Path, topo: &GridTopology, n_points: usize) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);

    // Per-element baselines.
    struct LoadShape {
        base_p: f64,
        tan_phi: f64,
        phase: f64,
    }
    let load_shapes: Vec<LoadShape> = topo
        .loads
        .iter()
        .map(|_| LoadShape {
            base_p: uniform(&mut rng, 95e3, 200e3),
            tan_phi: uniform(&mut rng, 0.25, 0.40),
            phase: uniform(&mut rng, -0.8, 0.8),
        })
        .collect();

    struct ConvShape {
        kind: ConverterKind,
        p_max: f64,
        phase: f64,
        wind_period_h: f64,
        q_frac: f64,
        u_offset: f64,
    }
    let conv_shapes: Vec<ConvShape> = topo
        .converters
        .iter()
        .map(|c| ConvShape {
            kind: c.params.kind,
            p_max: c.params.p_max,
            phase: uniform(&mut rng, 0.0, std::f64::consts::TAU),
            wind_period_h: uniform(&mut rng, 14.0, 38.0),
            q_frac: uniform(&mut rng, 0.10, 0.16),
            u_offset: uniform(&mut rng, -0.004, 0.004),
        })
        .collect();

    let timestamps: Vec<i64> = (0..n_points).map(|k| k as i64 * SCENARIO_DT_S).collect();
    let columns = raw_columns(topo);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_points);

    for &t in &timestamps {
        let hour = t as f64 / 3600.0;
        let hour_of_day = hour % 24.0;
        let mut row = Vec::with_capacity(columns.len());

        for shape in &load_shapes {
            let daily =
                0.85 + 0.22 * (std::f64::consts::TAU * (hour_of_day - 10.0) / 24.0 + shape.phase).sin();
            let noise = uniform(&mut rng, -0.04, 0.04);
            let p = shape.base_p * (daily + noise);
            let q = p * shape.tan_phi;
            row.push(p);
            row.push(q);
        }

        for shape in &conv_shapes {
            match shape.kind {
                ConverterKind::Storage => {}
                ConverterKind::Wind => {
                    let swing =
                        (std::f64::consts::TAU * hour / shape.wind_period_h + shape.phase).sin();
                    let forecast = (shape.p_max
                        * (0.45 + 0.28 * swing + uniform(&mut rng, -0.12, 0.12)))
                    .clamp(0.05 * shape.p_max, 0.92 * shape.p_max);
                    let actual = (forecast * (1.0 + uniform(&mut rng, -0.10, 0.10)))
                        .clamp(0.0, shape.p_max);
                    row.push(forecast);
                    row.push(actual);
                }
                ConverterKind::Solar => {
                    let elevation = if (6.0..18.0).contains(&hour_of_day) {
                        (std::f64::consts::PI * (hour_of_day - 6.0) / 12.0).sin()
                    } else {
                        0.0
                    };
                    let sky = 0.75 + 0.25 * uniform(&mut rng, 0.0, 1.0);
                    let forecast = shape.p_max * 0.85 * elevation.powf(1.3) * sky;
                    let err = uniform(&mut rng, -0.08, 0.08);
                    let actual = (forecast * (1.0 + err)).clamp(0.0, shape.p_max);
                    row.push(forecast);
                    row.push(actual);
                }
            }
        }

        for shape in &conv_shapes {
            let q_star = shape.p_max
                * (shape.q_frac
                    + 0.04 * (std::f64::consts::TAU * hour_of_day / 24.0 + shape.phase).sin());
            let u_star = SAMPLE_V_NOMINAL
                * (1.0
                    + shape.u_offset
                    + 0.003 * (std::f64::consts::TAU * hour_of_day / 24.0 + 2.0 * shape.phase).sin());
            row.push(q_star);
            row.push(u_star);
        }
        rows.push(row);
    }

    let raw_path = dir.join("raw_power.csv");
    super::write_table(&raw_path, &timestamps, &columns, &rows)?;
    convert_raw_scenario(
        &raw_path,
        topo,
        SAMPLE_V_NOMINAL,
        XiConvention::ActualMinusForecast,
        dir,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridTopology;

    #[test]
    fn generation_is_deterministic() {
        let topo = GridTopology::default_33bus();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_sample_week(dir_a.path(), &topo, 8).unwrap();
        write_sample_week(dir_b.path(), &topo, 8).unwrap();
        for name in ["raw_power.csv", "loads.csv", "setpoints_p.csv", "setpoints_qu.csv", "xi.csv"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }

    #[test]
    fn sample_setpoints_respect_limits() {
        let topo = GridTopology::default_33bus();
        let dir = tempfile::tempdir().unwrap();
        let warnings = write_sample_week(dir.path(), &topo, 672).unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
    }
}
