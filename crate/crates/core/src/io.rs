//! File formats: JSON model configs and the CSV tables written by the CLI.
//!
//! Every table has a header row. Floats are written as `{:.16e}` (17
//! significant digits, enough to round-trip an `f64`); fast states and
//! channel endpoints are 1-based.

use std::fs;
use std::io::Write;
use std::path::Path as FsPath;

use crate::averaging::{LlnRow, Path};
use crate::error::{Error, Result};
use crate::experiments::{SweepResult, TiltRow};
use crate::model::{build_model, Model, ModelConfig};
use crate::perturb::PerturbResult;
use crate::ratefn::PathRate;
use crate::simulator::{EnsembleStats, Trajectory};

/// Formats a float for CSV output.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Parses a model config; syntax errors carry line and column.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    ModelConfig::from_json(text)
}

pub fn load_config(path: &FsPath) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn load_model(path: &FsPath) -> Result<Model> {
    build_model(&load_config(path)?)
}

/// Column-ordered table with a fixed header.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Table { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.header)?;
        for row in &self.rows {
            out.write_record(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        self.write_to(fs::File::create(path)?)
    }
}

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

fn channel_names(prefix: &str, model: &Model) -> Vec<String> {
    model
        .channels()
        .iter()
        .map(|&(i, j)| format!("{prefix}_{}_{}", i + 1, j + 1))
        .collect()
}

/// `t, x_1..x_d, y` on the trajectory grid.
pub fn trajectory_table(traj: &Trajectory) -> Table {
    let d = traj.path.dim();
    let mut header = vec!["t".to_string()];
    header.extend(numbered("x", d));
    header.push("y".into());
    let mut table = Table::new(header);
    for (k, &t) in traj.path.grid().iter().enumerate() {
        let mut row = vec![fmt_f64(t)];
        row.extend(traj.path.point(k).iter().map(|&v| fmt_f64(v)));
        row.push((traj.state_at(t) + 1).to_string());
        table.push(row);
    }
    table
}

/// `time, from, to`.
pub fn jumps_table(traj: &Trajectory) -> Table {
    let mut table = Table::new(vec!["time".into(), "from".into(), "to".into()]);
    for j in &traj.jumps {
        table.push(vec![fmt_f64(j.time), (j.from + 1).to_string(), (j.to + 1).to_string()]);
    }
    table
}

/// `traj_index, terminal_x_1..d, sup_dev, n_jumps, cost_psi, cost_phi`.
pub fn ensemble_table(stats: &EnsembleStats, d: usize) -> Table {
    let mut header = vec!["traj_index".to_string()];
    header.extend(numbered("terminal_x", d));
    header.extend(["sup_dev", "n_jumps", "cost_psi", "cost_phi"].map(String::from));
    let mut table = Table::new(header);
    for r in &stats.rows {
        let mut row = vec![r.index.to_string()];
        row.extend(r.terminal_x.iter().map(|&v| fmt_f64(v)));
        row.push(fmt_opt(r.sup_dev));
        row.push(r.n_jumps.to_string());
        row.push(fmt_f64(r.cost_psi));
        row.push(fmt_f64(r.cost_phi));
        table.push(row);
    }
    table
}

/// `epsilon, n, mean_sup_dev, q50, q90, stderr`.
pub fn lln_table(rows: &[LlnRow]) -> Table {
    let mut table = Table::new(["epsilon", "n", "mean_sup_dev", "q50", "q90", "stderr"].map(String::from).to_vec());
    for r in rows {
        table.push(vec![
            fmt_f64(r.epsilon),
            r.n.to_string(),
            fmt_f64(r.mean_sup_dev),
            fmt_f64(r.q50),
            fmt_f64(r.q90),
            fmt_f64(r.stderr),
        ]);
    }
    table
}

/// `t_mid, slope_1..d, L_value, feasible, pi_1..L, q_i_j.., cumulative_I`.
/// Infeasible slices leave the law and rate columns empty.
pub fn path_rate_table(rate: &PathRate, model: &Model) -> Table {
    let (d, l) = (model.d(), model.n_states());
    let mut header = vec!["t_mid".to_string()];
    header.extend(numbered("slope", d));
    header.extend(["L_value".to_string(), "feasible".to_string()]);
    header.extend(numbered("pi", l));
    header.extend(channel_names("q", model));
    header.push("cumulative_I".into());
    let mut table = Table::new(header);
    for s in &rate.slices {
        let mut row = vec![fmt_f64(s.t_mid)];
        row.extend(s.slope.iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(s.result.value));
        row.push(s.result.feasible.to_string());
        match &s.result.argmin {
            Some(t) => {
                row.extend(t.pi.iter().map(|&v| fmt_f64(v)));
                row.extend(t.q.iter().map(|&v| fmt_f64(v)));
            }
            None => row.extend(std::iter::repeat_n(String::new(), l + model.n_channels())),
        }
        row.push(fmt_f64(s.cumulative));
        table.push(row);
    }
    table
}

/// `epsilon, N, p_hat, stderr, neg_eps_log_p, censored`.
pub fn sweep_table(sweep: &SweepResult) -> Table {
    let mut table = Table::new(["epsilon", "N", "p_hat", "stderr", "neg_eps_log_p", "censored"].map(String::from).to_vec());
    for r in &sweep.rows {
        table.push(vec![
            fmt_f64(r.epsilon),
            r.n.to_string(),
            fmt_f64(r.p_hat),
            fmt_f64(r.stderr),
            fmt_opt(r.neg_eps_log_p),
            r.censored.to_string(),
        ]);
    }
    table
}

/// `epsilon, n, mean_sup_dev, stderr_sup_dev, mean_cost, stderr_cost, deterministic_cost`.
pub fn tilt_table(rows: &[TiltRow]) -> Table {
    let mut table = Table::new(
        [
            "epsilon",
            "n",
            "mean_sup_dev",
            "stderr_sup_dev",
            "mean_cost",
            "stderr_cost",
            "deterministic_cost",
        ]
        .map(String::from)
        .to_vec(),
    );
    for r in rows {
        table.push(vec![
            fmt_f64(r.epsilon),
            r.n.to_string(),
            fmt_f64(r.mean_sup_dev),
            fmt_f64(r.stderr_sup_dev),
            fmt_f64(r.mean_cost),
            fmt_f64(r.stderr_cost),
            fmt_f64(r.deterministic_cost),
        ]);
    }
    table
}

/// Per-interval perturbed controls:
/// `t_start, t_end, pi_1..L, u_i_k.., q_i_j.., phi_i_j..`.
pub fn perturb_table(result: &PerturbResult, model: &Model) -> Table {
    let (l, m, nc) = (model.n_states(), model.m(), model.n_channels());
    let mut header = vec!["t_start".to_string(), "t_end".to_string()];
    header.extend(numbered("pi", l));
    for i in 1..=l {
        header.extend((1..=m).map(|k| format!("u_{i}_{k}")));
    }
    header.extend(channel_names("q", model));
    header.extend(channel_names("phi", model));
    let mut table = Table::new(header);
    let grid = &result.controls.grid;
    for (k, s) in result.controls.slices.iter().enumerate() {
        let mut row = vec![fmt_f64(grid[k]), fmt_f64(grid[k + 1])];
        row.extend(s.pi.iter().map(|&v| fmt_f64(v)));
        row.extend(s.u.iter().map(|&v| fmt_f64(v)));
        row.extend(s.q.iter().map(|&v| fmt_f64(v)));
        row.extend(result.phi_star[k * nc..(k + 1) * nc].iter().map(|&v| fmt_f64(v)));
        table.push(row);
    }
    table
}

/// `t, x_1..x_d`.
pub fn path_table(path: &Path) -> Table {
    let mut header = vec!["t".to_string()];
    header.extend(numbered("x", path.dim()));
    let mut table = Table::new(header);
    for (k, &t) in path.grid().iter().enumerate() {
        let mut row = vec![fmt_f64(t)];
        row.extend(path.point(k).iter().map(|&v| fmt_f64(v)));
        table.push(row);
    }
    table
}

/// Reads a path table (`t, x_1..x_d`, header required).
pub fn parse_path_csv(text: &str) -> Result<Path> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.len() < 2 || &header[0] != "t" {
        return Err(Error::Config("path CSV needs a header `t, x_1, ..`".into()));
    }
    let d = header.len() - 1;
    let mut grid = Vec::new();
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Config(format!("path CSV row {}: {e}", line + 2)))
        };
        grid.push(parse(&record[0])?);
        for k in 1..=d {
            values.push(parse(&record[k])?);
        }
    }
    Path::from_flat(d, grid, values)
}

pub fn load_path(path: &FsPath) -> Result<Path> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_path_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::rng::StreamId;
    use crate::simulator::{simulate, SimSpec};

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn config_round_trip() {
        let cfg = fixtures::reference_two_state_config();
        let again = parse_config(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(build_model(&again).unwrap().config(), Some(&cfg));
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = parse_config("{\n  \"d\": 1,\n  \"m\": ,\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("column"), "{msg}");
        assert!(err.is_user_error());
    }

    #[test]
    fn trajectory_tables_are_one_based() {
        let model = fixtures::frozen_two_state([1.0, 1.0]);
        let traj = simulate(&model, &SimSpec::new(0.1, vec![0.0], 0, 1.0, 0.25), StreamId::new(5, 1)).unwrap();
        let t = trajectory_table(&traj);
        assert_eq!(t.header(), ["t", "x_1", "y"]);
        assert_eq!(t.len(), 5);
        let text = t.to_csv_string().unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",1"));
        let j = jumps_table(&traj).to_csv_string().unwrap();
        for line in j.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            assert!(["1", "2"].contains(&f[1]) && f[1] != f[2]);
        }
    }

    #[test]
    fn path_csv_round_trip() {
        let p = Path::straight_line(&[0.1, -2.0], &[1.0 / 3.0, 5.0], 1.5, 7).unwrap();
        let back = parse_path_csv(&path_table(&p).to_csv_string().unwrap()).unwrap();
        assert_eq!(back, p);
        assert!(parse_path_csv("time,x\n0,1\n").is_err());
    }

    #[test]
    fn path_rate_headers_name_channels() {
        let model = fixtures::three_state_cycle();
        let p = Path::straight_line(&[0.0], &[0.0], 1.0, 2).unwrap();
        let rate = crate::ratefn::path_rate(&model, &p, &Default::default()).unwrap();
        let t = path_rate_table(&rate, &model);
        let names: Vec<&str> = t.header().iter().map(|s| s.as_str()).collect();
        assert!(names.contains(&"q_1_2") && names.contains(&"q_3_1") && names.contains(&"pi_3"));
        assert_eq!(*names.last().unwrap(), "cumulative_I");
    }
}
