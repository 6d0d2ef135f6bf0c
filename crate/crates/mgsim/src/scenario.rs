//! Ingestion of 15-minute time-varying parameter data and the conversion
//! utilities that produce it from plain per-bus power series.
//!
//! A scenario directory holds four CSV files sharing one `t_s` axis
//! (integer seconds, 900 apart):
//!
//! - `loads.csv`:        `rL_<loadid>`, `LL_<loadid>` (Ohm, H)
//! - `setpoints_p.csv`:  `Pstar_<convid>` (W)
//! - `setpoints_qu.csv`: `Qstar_<convid>` (var), `Ustar_<convid>` (V)
//! - `xi.csv`:           `xi_<convid>` (W); storage columns must be all-zero
//!
//! Values are held constant over each 15-minute interval (zero-order hold).

pub mod sample;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use crate::dynamics::Exogenous;
use crate::error::{Error, Result};
use crate::grid::{ConverterParams, GridTopology, LoadParams};

/// Spacing of scenario points (s).
pub const SCENARIO_DT_S: i64 = 900;

/// Sign convention of the forecast-error column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum XiConvention {
    /// xi = actual - forecast, so P* + xi is the available power. Default.
    #[default]
    ActualMinusForecast,
    ForecastMinusActual,
}

/// A full scenario: one shared timestamp axis plus per-load impedances and
/// per-converter setpoints and forecast errors. Immutable after load.
#[derive(Clone, Debug)]
pub struct ScenarioSeries {
    /// Seconds from scenario start, spacing 900.
    pub timestamps: Vec<i64>,
    pub load_ids: Vec<String>,
    pub conv_ids: Vec<String>,
    /// Indexed [point][load].
    pub load_r: Vec<Vec<f64>>,
    pub load_l: Vec<Vec<f64>>,
    /// Indexed [point][converter].
    pub p_star: Vec<Vec<f64>>,
    pub q_star: Vec<Vec<f64>>,
    pub u_star: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
    /// Droop frequency reference forwarded into each point's Exogenous.
    pub omega_ref: f64,
    /// Non-fatal findings (setpoints brushing their limits).
    pub warnings: Vec<String>,
}

/// One 15-minute snapshot served to the engine.
#[derive(Clone, Debug)]
pub struct ScenarioPoint {
    pub t: f64,
    pub loads: Vec<LoadParams>,
    pub exo: Exogenous,
}

impl ScenarioSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.timestamps[0] as f64
    }

    /// Last instant covered by the zero-order hold (exclusive).
    pub fn end_time(&self) -> f64 {
        (*self.timestamps.last().unwrap() + SCENARIO_DT_S) as f64
    }

    pub fn with_omega_ref(mut self, omega_ref: f64) -> Self {
        self.omega_ref = omega_ref;
        self
    }
}

/// Loads and validates the four scenario files against the topology's load
/// and converter rosters.
pub fn load_scenario(dir: &Path, topo: &GridTopology) -> Result<ScenarioSeries> {
    let load_ids = topo.load_ids();
    let conv_ids = topo.converter_ids();

    let mut expected_loads = Vec::new();
    for id in &load_ids {
        expected_loads.push(format!("rL_{id}"));
        expected_loads.push(format!("LL_{id}"));
    }
    let loads_file = read_table(&dir.join("loads.csv"), &expected_loads)?;

    let expected_p: Vec<String> = conv_ids.iter().map(|c| format!("Pstar_{c}")).collect();
    let p_file = read_table(&dir.join("setpoints_p.csv"), &expected_p)?;

    let mut expected_qu = Vec::new();
    for id in &conv_ids {
        expected_qu.push(format!("Qstar_{id}"));
        expected_qu.push(format!("Ustar_{id}"));
    }
    let qu_file = read_table(&dir.join("setpoints_qu.csv"), &expected_qu)?;

    let expected_xi: Vec<String> = conv_ids.iter().map(|c| format!("xi_{c}")).collect();
    let xi_file = read_table(&dir.join("xi.csv"), &expected_xi)?;

    // One shared timestamp axis across the four files.
    for (name, table) in [
        ("setpoints_p.csv", &p_file),
        ("setpoints_qu.csv", &qu_file),
        ("xi.csv", &xi_file),
    ] {
        if table.timestamps != loads_file.timestamps {
            return Err(Error::Scenario(format!(
                "{name}: timestamp axis differs from loads.csv"
            )));
        }
    }

    let n_points = loads_file.timestamps.len();
    let n_load = load_ids.len();
    let n_conv = conv_ids.len();

    let mut series = ScenarioSeries {
        timestamps: loads_file.timestamps.clone(),
        load_ids: load_ids.clone(),
        conv_ids: conv_ids.clone(),
        load_r: vec![vec![0.0; n_load]; n_points],
        load_l: vec![vec![0.0; n_load]; n_points],
        p_star: vec![vec![0.0; n_conv]; n_points],
        q_star: vec![vec![0.0; n_conv]; n_points],
        u_star: vec![vec![0.0; n_conv]; n_points],
        xi: vec![vec![0.0; n_conv]; n_points],
        omega_ref: topo.converters[0].params.omega_n,
        warnings: Vec::new(),
    };

    for (row, t) in loads_file.timestamps.iter().enumerate() {
        for (j, id) in load_ids.iter().enumerate() {
            let r = loads_file.get(row, &format!("rL_{id}"));
            let l = loads_file.get(row, &format!("LL_{id}"));
            if !(r > 0.0 && l > 0.0) {
                return Err(Error::Scenario(format!(
                    "loads.csv line {}: load {id} has non-positive impedance (rL = {r}, LL = {l})",
                    row + 2
                )));
            }
            series.load_r[row][j] = r;
            series.load_l[row][j] = l;
        }
        for (i, id) in conv_ids.iter().enumerate() {
            let params = &topo.converters[i].params;
            let p_star = p_file.get(row, &format!("Pstar_{id}"));
            let q_star = qu_file.get(row, &format!("Qstar_{id}"));
            let u_star = qu_file.get(row, &format!("Ustar_{id}"));
            let xi = xi_file.get(row, &format!("xi_{id}"));
            if params.is_storage() && xi != 0.0 {
                return Err(Error::Scenario(format!(
                    "xi.csv line {}: column xi_{id} must be all-zero (storage has no forecast error), found {xi}",
                    row + 2
                )));
            }
            if p_star < params.p_min || p_star > params.p_max {
                series.warnings.push(format!(
                    "t_s={t}: Pstar_{id} = {p_star} outside [{}, {}]",
                    params.p_min, params.p_max
                ));
            }
            if q_star < params.q_min || q_star > params.q_max {
                series.warnings.push(format!(
                    "t_s={t}: Qstar_{id} = {q_star} outside [{}, {}]",
                    params.q_min, params.q_max
                ));
            }
            series.p_star[row][i] = p_star;
            series.q_star[row][i] = q_star;
            series.u_star[row][i] = u_star;
            series.xi[row][i] = xi;
        }
    }
    Ok(series)
}

/// Zero-order hold lookup: the scenario point in force at time `t` seconds.
pub fn point_at(series: &ScenarioSeries, t: f64) -> Result<ScenarioPoint> {
    if series.is_empty() {
        return Err(Error::Scenario("scenario has no points".into()));
    }
    if t < series.start_time() || t >= series.end_time() {
        return Err(Error::Scenario(format!(
            "time {t} s outside scenario range [{}, {}) s",
            series.start_time(),
            series.end_time()
        )));
    }
    let idx = series
        .timestamps
        .partition_point(|&ts| ts as f64 <= t)
        .saturating_sub(1);
    let loads = (0..series.load_ids.len())
        .map(|j| LoadParams {
            r_l: series.load_r[idx][j],
            l_l: series.load_l[idx][j],
        })
        .collect();
    let exo = Exogenous {
        xi: DVector::from_vec(series.xi[idx].clone()),
        p_star: DVector::from_vec(series.p_star[idx].clone()),
        q_star: DVector::from_vec(series.q_star[idx].clone()),
        u_star: DVector::from_vec(series.u_star[idx].clone()),
        omega_ref: series.omega_ref,
    };
    Ok(ScenarioPoint {
        t: series.timestamps[idx] as f64,
        loads,
        exo,
    })
}

/// Splits the unbalanced power (total load minus total renewable forecast)
/// across storage units in proportion to their maximum active power. The
/// last unit absorbs the rounding residue so the shares sum bit-exactly.
pub fn allocate_storage_setpoints(
    total_load_p: f64,
    renewable_forecast_p: &[f64],
    storage_p_max: &[f64],
) -> Result<Vec<f64>> {
    if storage_p_max.is_empty() {
        return Err(Error::Scenario("no storage units to allocate to".into()));
    }
    let p_max_sum: f64 = storage_p_max.iter().sum();
    if !(p_max_sum > 0.0) {
        return Err(Error::Scenario(
            "storage units have zero total power capability".into(),
        ));
    }
    let unbalanced = total_load_p - renewable_forecast_p.iter().sum::<f64>();
    let n = storage_p_max.len();
    let mut shares = Vec::with_capacity(n);
    let mut allocated = 0.0;
    for &p_max in &storage_p_max[..n - 1] {
        let share = unbalanced * p_max / p_max_sum;
        shares.push(share);
        allocated += share;
    }
    // Residue assignment, nudged by ulps so the sequential sum reproduces
    // the unbalanced power bit-exactly (plain subtraction can land one ulp
    // off after the re-addition rounds).
    let mut last = unbalanced - allocated;
    for _ in 0..4 {
        let sum = allocated + last;
        if sum == unbalanced {
            break;
        }
        last = if sum > unbalanced {
            last.next_down()
        } else {
            last.next_up()
        };
    }
    shares.push(last);
    Ok(shares)
}

/// Series RL equivalent drawing (p, q) at the given voltage magnitude and
/// nominal frequency: r = p v^2 / S^2, X = q v^2 / S^2, L = X / omega_n.
pub fn impedance_from_power(
    p_load: f64,
    q_load: f64,
    v_nominal: f64,
    omega_n: f64,
) -> Result<LoadParams> {
    if !(p_load > 0.0) {
        return Err(Error::Scenario(format!(
            "load active power must be positive, got {p_load} W"
        )));
    }
    if !(q_load > 0.0) {
        return Err(Error::Scenario(format!(
            "load reactive power must be positive to give the series RL a positive inductance, \
             got {q_load} var; enforce a minimum (inductive) power factor when preparing data"
        )));
    }
    if !(v_nominal > 0.0) {
        return Err(Error::Scenario(format!(
            "nominal voltage must be positive, got {v_nominal} V"
        )));
    }
    let s2 = p_load * p_load + q_load * q_load;
    let v2 = v_nominal * v_nominal;
    let r_l = p_load * v2 / s2;
    let x = q_load * v2 / s2;
    LoadParams::new(r_l, x / omega_n)
}

/// Steady-state power draw of a series RL at the given voltage; the inverse
/// of [`impedance_from_power`].
pub fn power_from_impedance(lp: &LoadParams, v_nominal: f64, omega_n: f64) -> (f64, f64) {
    let x = omega_n * lp.l_l;
    let z2 = lp.r_l * lp.r_l + x * x;
    let v2 = v_nominal * v_nominal;
    (v2 * lp.r_l / z2, v2 * x / z2)
}

// ---------------------------------------------------------------------------
// Raw-power conversion (the `scenario-convert` pipeline)
// ---------------------------------------------------------------------------

/// Expected value columns of the raw power file: per-load `p_`/`q_` (W,
/// var), per wind/solar converter `pfc_` (forecast W) and `pact_` (actual
/// W), and per-converter `qstar_`/`ustar_`.
pub fn raw_columns(topo: &GridTopology) -> Vec<String> {
    let mut cols = Vec::new();
    for l in &topo.loads {
        cols.push(format!("p_{}", l.id));
        cols.push(format!("q_{}", l.id));
    }
    for c in &topo.converters {
        if !c.params.is_storage() {
            cols.push(format!("pfc_{}", c.id));
            cols.push(format!("pact_{}", c.id));
        }
    }
    for c in &topo.converters {
        cols.push(format!("qstar_{}", c.id));
        cols.push(format!("ustar_{}", c.id));
    }
    cols
}

/// Converts a raw per-bus power CSV into the four scenario files inside
/// `out_dir`. Load powers become series RL impedances at `v_nominal`;
/// wind/solar setpoints take the forecast column with xi from the
/// actual/forecast deviation; storage setpoints absorb the unbalanced power
/// in proportion to their power ratings. Returns the limit warnings.
pub fn convert_raw_scenario(
    raw_path: &Path,
    topo: &GridTopology,
    v_nominal: f64,
    xi_convention: XiConvention,
    out_dir: &Path,
) -> Result<Vec<String>> {
    let table = read_table(raw_path, &raw_columns(topo))?;
    let omega_n = topo.converters[0].params.omega_n;
    let storage: Vec<(usize, &ConverterParams)> = topo
        .converters
        .iter()
        .enumerate()
        .filter(|(_, c)| c.params.is_storage())
        .map(|(i, c)| (i, &c.params))
        .collect();
    let storage_p_max: Vec<f64> = storage.iter().map(|(_, p)| p.p_max).collect();
    let renewables: Vec<usize> = topo
        .converters
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.params.is_storage())
        .map(|(i, _)| i)
        .collect();

    let n_conv = topo.n_converter();
    let mut warnings = Vec::new();

    let mut loads_rows = Vec::with_capacity(table.timestamps.len());
    let mut p_rows = Vec::with_capacity(table.timestamps.len());
    let mut qu_rows = Vec::with_capacity(table.timestamps.len());
    let mut xi_rows = Vec::with_capacity(table.timestamps.len());

    for (row, &t) in table.timestamps.iter().enumerate() {
        let mut load_vals = Vec::with_capacity(2 * topo.n_load());
        let mut total_load_p = 0.0;
        for l in &topo.loads {
            let p = table.get(row, &format!("p_{}", l.id));
            let q = table.get(row, &format!("q_{}", l.id));
            let lp = impedance_from_power(p, q, v_nominal, omega_n).map_err(|e| {
                Error::Scenario(format!("{} line {}: {e}", raw_path.display(), row + 2))
            })?;
            total_load_p += p;
            load_vals.push(lp.r_l);
            load_vals.push(lp.l_l);
        }

        let mut p_star = vec![0.0; n_conv];
        let mut xi = vec![0.0; n_conv];
        let mut forecast = Vec::with_capacity(renewables.len());
        for &i in &renewables {
            let id = &topo.converters[i].id;
            let pfc = table.get(row, &format!("pfc_{id}"));
            let pact = table.get(row, &format!("pact_{id}"));
            p_star[i] = pfc;
            xi[i] = match xi_convention {
                XiConvention::ActualMinusForecast => pact - pfc,
                XiConvention::ForecastMinusActual => pfc - pact,
            };
            forecast.push(pfc);
        }
        if !storage.is_empty() {
            let shares = allocate_storage_setpoints(total_load_p, &forecast, &storage_p_max)?;
            for ((i, _), share) in storage.iter().zip(shares) {
                p_star[*i] = share;
            }
        }

        let mut qu_vals = Vec::with_capacity(2 * n_conv);
        for (i, c) in topo.converters.iter().enumerate() {
            let q_star = table.get(row, &format!("qstar_{}", c.id));
            let u_star = table.get(row, &format!("ustar_{}", c.id));
            if p_star[i] < c.params.p_min || p_star[i] > c.params.p_max {
                warnings.push(format!(
                    "t_s={t}: Pstar_{} = {} outside [{}, {}]",
                    c.id, p_star[i], c.params.p_min, c.params.p_max
                ));
            }
            if q_star < c.params.q_min || q_star > c.params.q_max {
                warnings.push(format!(
                    "t_s={t}: Qstar_{} = {q_star} outside [{}, {}]",
                    c.id, c.params.q_min, c.params.q_max
                ));
            }
            qu_vals.push(q_star);
            qu_vals.push(u_star);
        }

        loads_rows.push(load_vals);
        p_rows.push(p_star);
        qu_rows.push(qu_vals);
        xi_rows.push(xi);
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut load_cols = Vec::new();
    for l in &topo.loads {
        load_cols.push(format!("rL_{}", l.id));
        load_cols.push(format!("LL_{}", l.id));
    }
    write_table(&out_dir.join("loads.csv"), &table.timestamps, &load_cols, &loads_rows)?;
    let p_cols: Vec<String> = topo.converters.iter().map(|c| format!("Pstar_{}", c.id)).collect();
    write_table(&out_dir.join("setpoints_p.csv"), &table.timestamps, &p_cols, &p_rows)?;
    let mut qu_cols = Vec::new();
    for c in &topo.converters {
        qu_cols.push(format!("Qstar_{}", c.id));
        qu_cols.push(format!("Ustar_{}", c.id));
    }
    write_table(&out_dir.join("setpoints_qu.csv"), &table.timestamps, &qu_cols, &qu_rows)?;
    let xi_cols: Vec<String> = topo.converters.iter().map(|c| format!("xi_{}", c.id)).collect();
    write_table(&out_dir.join("xi.csv"), &table.timestamps, &xi_cols, &xi_rows)?;
    Ok(warnings)
}

// ---------------------------------------------------------------------------
// CSV plumbing
// ---------------------------------------------------------------------------

struct Table {
    timestamps: Vec<i64>,
    columns: BTreeMap<String, usize>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn get(&self, row: usize, column: &str) -> f64 {
        self.rows[row][self.columns[column]]
    }
}

/// Reads a scenario-style CSV: `t_s` first, then exactly `expected` value
/// columns in any order. Timestamps must be strictly increasing and 900 s
/// apart.
fn read_table(path: &Path, expected: &[String]) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Scenario(format!("missing file {}", path.display())),
            _ => Error::parse(path, e.to_string()),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    let names: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    if names.first().map(String::as_str) != Some("t_s") {
        return Err(Error::Scenario(format!(
            "{}: first column must be t_s, found {:?}",
            path.display(),
            names.first()
        )));
    }
    let mut columns = BTreeMap::new();
    for (idx, name) in names.iter().enumerate().skip(1) {
        if !expected.contains(name) {
            return Err(Error::Scenario(format!(
                "{}: unexpected column {name}",
                path.display()
            )));
        }
        if columns.insert(name.clone(), idx - 1).is_some() {
            return Err(Error::Scenario(format!(
                "{}: duplicate column {name}",
                path.display()
            )));
        }
    }
    for want in expected {
        if !columns.contains_key(want) {
            return Err(Error::Scenario(format!(
                "{}: missing column {want}",
                path.display()
            )));
        }
    }

    let mut timestamps: Vec<i64> = Vec::new();
    let mut rows = Vec::new();
    for (line_idx, record) in reader.records().enumerate() {
        let line = line_idx + 2; // 1-based, after the header
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        if record.len() != names.len() {
            return Err(Error::Scenario(format!(
                "{} line {line}: expected {} fields, found {}",
                path.display(),
                names.len(),
                record.len()
            )));
        }
        let t: i64 = record[0].parse().map_err(|_| {
            Error::Scenario(format!(
                "{} line {line}: t_s must be an integer, found {:?}",
                path.display(),
                &record[0]
            ))
        })?;
        if let Some(&prev) = timestamps.last() {
            if t <= prev {
                return Err(Error::Scenario(format!(
                    "{} line {line}: non-monotonic timestamp {t} after {prev}",
                    path.display()
                )));
            }
            if t - prev != SCENARIO_DT_S {
                return Err(Error::Scenario(format!(
                    "{} line {line}: timestamp spacing {} s, expected {SCENARIO_DT_S} s",
                    path.display(),
                    t - prev
                )));
            }
        }
        timestamps.push(t);
        let mut values = Vec::with_capacity(record.len() - 1);
        for field in record.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| {
                Error::Scenario(format!(
                    "{} line {line}: cannot parse {field:?} as a number",
                    path.display()
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Scenario(format!(
                    "{} line {line}: non-finite value {field:?}",
                    path.display()
                )));
            }
            values.push(v);
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Scenario(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    Ok(Table {
        timestamps,
        columns,
        rows,
    })
}

pub(crate) fn write_table(
    path: &Path,
    timestamps: &[i64],
    columns: &[String],
    rows: &[Vec<f64>],
) -> Result<()> {
    let mut text = String::new();
    let _ = write!(text, "t_s");
    for c in columns {
        let _ = write!(text, ",{c}");
    }
    let _ = writeln!(text);
    for (t, row) in timestamps.iter().zip(rows) {
        let _ = write!(text, "{t}");
        for v in row {
            let _ = write!(text, ",{v:.16e}");
        }
        let _ = writeln!(text);
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The four files of a scenario directory.
pub fn scenario_paths(dir: &Path) -> [PathBuf; 4] {
    [
        dir.join("loads.csv"),
        dir.join("setpoints_p.csv"),
        dir.join("setpoints_qu.csv"),
        dir.join("xi.csv"),
    ]
}
