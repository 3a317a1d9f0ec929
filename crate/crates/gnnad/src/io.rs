//! On-disk formats: series, label, anomaly-record and river-network CSVs,
//! plus JSON output.
//!
//! Floats are written with Rust's shortest round-trip formatting, so loading
//! a written file and writing it again reproduces it byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use gnnad_core::anomgen::AnomalyRecord;
use gnnad_core::simgen::{Locations, Placement, RiverNetwork};
use gnnad_core::{Matrix, MultivariateSeries};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

/// What to do with empty, `NaN` or `NA` cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    /// Carry the previous reading of the same sensor forward. A missing
    /// first row is still an error.
    ForwardFill,
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| AppError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> AppError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AppError::io(path, io),
        other => AppError::format(path, format!("{other:?}")),
    }
}

fn headers(path: &Path, rdr: &mut csv::Reader<File>) -> Result<Vec<String>> {
    let h = rdr.headers().map_err(|e| csv_error(path, e))?;
    if h.is_empty() || (h.len() == 1 && h[0].is_empty()) {
        return Err(AppError::format(path, "missing header row"));
    }
    Ok(h.iter().map(str::to_owned).collect())
}

fn parse_tick(path: &Path, row: usize, cell: &str) -> Result<i64> {
    cell.trim()
        .parse()
        .map_err(|_| AppError::format(path, format!("row {row}: tick {cell:?} is not an integer")))
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("nan") || c.eq_ignore_ascii_case("na")
}

/// Reads a series CSV with header `tick,<sensor ids...>`. Row numbers in
/// error messages count data rows from 1.
pub fn read_series(path: &Path, missing: MissingPolicy) -> Result<MultivariateSeries> {
    let mut rdr = reader(path)?;
    let head = headers(path, &mut rdr)?;
    let ids: Vec<String> = head[1..].to_vec();
    let n = ids.len();
    if n == 0 {
        return Err(AppError::format(path, "no sensor columns"));
    }
    let mut ticks = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != n + 1 {
            return Err(AppError::format(
                path,
                format!("row {row}: expected {} cells, found {}", n + 1, rec.len()),
            ));
        }
        ticks.push(parse_tick(path, row, &rec[0])?);
        for (c, cell) in rec.iter().skip(1).enumerate() {
            let value = if is_missing(cell) {
                match (missing, data.len() >= n) {
                    (MissingPolicy::ForwardFill, true) => data[data.len() - n],
                    _ => {
                        return Err(AppError::format(
                            path,
                            format!("row {row}, column {:?}: missing value", ids[c]),
                        ))
                    }
                }
            } else {
                match cell.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        return Err(AppError::format(
                            path,
                            format!("row {row}, column {:?}: {cell:?} is not a finite number", ids[c]),
                        ))
                    }
                }
            };
            data.push(value);
        }
    }
    if ticks.is_empty() {
        return Err(AppError::format(path, "no data rows"));
    }
    let values = Matrix::from_vec(ticks.len(), n, data).map_err(|e| AppError::format(path, e.to_string()))?;
    MultivariateSeries::new(values, ticks, ids).map_err(|e| AppError::format(path, e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| AppError::io(path, e))
}

/// Writes rows of pre-formatted cells under a header.
pub fn write_rows<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = create(path)?;
    let io = |e| AppError::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for row in rows {
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn header_with(first: &[&str], ids: &[String]) -> Vec<String> {
    first.iter().map(|s| s.to_string()).chain(ids.iter().cloned()).collect()
}

/// Writes `tick,<ids>` followed by one row per tick.
pub fn write_matrix(path: &Path, ticks: &[i64], ids: &[String], m: &Matrix) -> Result<()> {
    let rows = ticks.iter().enumerate().map(|(r, t)| {
        let mut row = Vec::with_capacity(m.cols() + 1);
        row.push(t.to_string());
        row.extend(m.row(r).iter().map(|v| v.to_string()));
        row
    });
    write_rows(path, &header_with(&["tick"], ids), rows)
}

pub fn write_series(path: &Path, series: &MultivariateSeries) -> Result<()> {
    write_matrix(path, series.ticks(), series.sensor_ids(), series.values())
}

/// Labels read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// `tick,label`.
    Network { ticks: Vec<i64>, labels: Vec<bool> },
    /// `tick,<ids>`, row-major `T × n`.
    Sensor {
        ticks: Vec<i64>,
        ids: Vec<String>,
        labels: Vec<bool>,
    },
}

impl Labels {
    pub fn ticks(&self) -> &[i64] {
        match self {
            Labels::Network { ticks, .. } | Labels::Sensor { ticks, .. } => ticks,
        }
    }

    /// Attaches the labels to a series with the same ticks.
    pub fn attach(&self, series: MultivariateSeries, path: &Path) -> Result<MultivariateSeries> {
        if self.ticks() != series.ticks() {
            return Err(AppError::format(path, "label ticks do not match the series ticks"));
        }
        let out = match self {
            Labels::Network { labels, .. } => series.with_labels(labels.clone()),
            Labels::Sensor { ids, labels, .. } => {
                if ids != series.sensor_ids() {
                    return Err(AppError::format(path, "label columns do not match the series sensors"));
                }
                series.with_sensor_labels(labels.clone())
            }
        };
        out.map_err(|e| AppError::format(path, e.to_string()))
    }
}

fn parse_flag(path: &Path, row: usize, col: &str, cell: &str) -> Result<bool> {
    match cell.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(AppError::format(
            path,
            format!("row {row}, column {col:?}: expected 0 or 1, found {other:?}"),
        )),
    }
}

/// Reads either label layout, chosen by the header.
pub fn read_labels(path: &Path) -> Result<Labels> {
    let mut rdr = reader(path)?;
    let head = headers(path, &mut rdr)?;
    if head.len() < 2 {
        return Err(AppError::format(path, "label file needs a tick column and at least one label column"));
    }
    let network = head.len() == 2 && head[1] == "label";
    let mut ticks = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != head.len() {
            return Err(AppError::format(
                path,
                format!("row {row}: expected {} cells, found {}", head.len(), rec.len()),
            ));
        }
        ticks.push(parse_tick(path, row, &rec[0])?);
        for (c, cell) in rec.iter().enumerate().skip(1) {
            labels.push(parse_flag(path, row, &head[c], cell)?);
        }
    }
    Ok(if network {
        Labels::Network { ticks, labels }
    } else {
        Labels::Sensor {
            ticks,
            ids: head[1..].to_vec(),
            labels,
        }
    })
}

fn bit(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

pub fn write_network_labels(path: &Path, ticks: &[i64], labels: &[bool]) -> Result<()> {
    let rows = ticks.iter().zip(labels).map(|(t, &l)| vec![t.to_string(), bit(l)]);
    write_rows(path, &["tick".to_string(), "label".to_string()], rows)
}

/// Row-major `T × n` flags under `tick,<ids>`.
pub fn write_sensor_labels(path: &Path, ticks: &[i64], ids: &[String], labels: &[bool]) -> Result<()> {
    let n = ids.len();
    let rows = ticks.iter().enumerate().map(|(r, t)| {
        let mut row = vec![t.to_string()];
        row.extend(labels[r * n..(r + 1) * n].iter().map(|&b| bit(b)));
        row
    });
    write_rows(path, &header_with(&["tick"], ids), rows)
}

/// Per-tick flags under `tick,network_flag,<ids>`.
pub fn write_flags(path: &Path, ticks: &[i64], ids: &[String], network: &[bool], sensor: &[bool]) -> Result<()> {
    let n = ids.len();
    let rows = ticks.iter().enumerate().map(|(r, t)| {
        let mut row = vec![t.to_string(), bit(network[r])];
        row.extend(sensor[r * n..(r + 1) * n].iter().map(|&b| bit(b)));
        row
    });
    write_rows(path, &header_with(&["tick", "network_flag"], ids), rows)
}

/// Flags file as written by [`write_flags`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlagTable {
    pub ticks: Vec<i64>,
    pub ids: Vec<String>,
    pub network: Vec<bool>,
    pub sensor: Vec<bool>,
}

pub fn read_flags(path: &Path) -> Result<FlagTable> {
    let mut rdr = reader(path)?;
    let head = headers(path, &mut rdr)?;
    if head.len() < 2 || head[1] != "network_flag" {
        return Err(AppError::format(path, "expected header tick,network_flag,<sensor ids>"));
    }
    let mut table = FlagTable {
        ticks: Vec::new(),
        ids: head[2..].to_vec(),
        network: Vec::new(),
        sensor: Vec::new(),
    };
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != head.len() {
            return Err(AppError::format(
                path,
                format!("row {row}: expected {} cells, found {}", head.len(), rec.len()),
            ));
        }
        table.ticks.push(parse_tick(path, row, &rec[0])?);
        table.network.push(parse_flag(path, row, &head[1], &rec[1])?);
        for (c, cell) in rec.iter().enumerate().skip(2) {
            table.sensor.push(parse_flag(path, row, &head[c], cell)?);
        }
    }
    Ok(table)
}

/// `kind,sensor_id,start_tick,length,realized_length`; `start_tick` is the
/// series tick value at which the anomaly begins.
pub fn write_records(path: &Path, series: &MultivariateSeries, records: &[AnomalyRecord]) -> Result<()> {
    let t_len = series.len();
    let header: Vec<String> = ["kind", "sensor_id", "start_tick", "length", "realized_length"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = records.iter().map(|r| {
        vec![
            r.kind.as_str().to_string(),
            series.sensor_ids()[r.sensor].clone(),
            series.ticks()[r.start_tick - 1].to_string(),
            r.length.to_string(),
            r.realized_length(t_len).to_string(),
        ]
    });
    write_rows(path, &header, rows)
}

pub fn write_locations(path: &Path, loc: &Locations) -> Result<()> {
    let header: Vec<String> = ["sensor_id", "x", "y"].iter().map(|s| s.to_string()).collect();
    let rows = loc
        .ids
        .iter()
        .zip(&loc.coords)
        .map(|(id, p)| vec![id.clone(), p[0].to_string(), p[1].to_string()]);
    write_rows(path, &header, rows)
}

/// Writes `edges.csv` (`segment_id,parent_id,length`, empty parent at the
/// outlet) and `placements.csv` (`sensor_id,segment_id,offset`, offsets
/// measured from the downstream end of the segment).
pub fn write_network(dir: &Path, net: &RiverNetwork, ids: &[String]) -> Result<()> {
    let edges = net.segments().iter().enumerate().map(|(s, seg)| {
        vec![
            s.to_string(),
            seg.parent.map(|p| p.to_string()).unwrap_or_default(),
            seg.length.to_string(),
        ]
    });
    write_rows(
        &dir.join("edges.csv"),
        &["segment_id", "parent_id", "length"].map(String::from),
        edges,
    )?;
    let placements = ids
        .iter()
        .zip(net.placements())
        .map(|(id, p)| vec![id.clone(), p.segment.to_string(), p.offset.to_string()]);
    write_rows(
        &dir.join("placements.csv"),
        &["sensor_id", "segment_id", "offset"].map(String::from),
        placements,
    )
}

fn parse_cell<T: std::str::FromStr>(path: &Path, row: usize, col: &str, cell: &str) -> Result<T> {
    cell.trim()
        .parse()
        .map_err(|_| AppError::format(path, format!("row {row}, column {col:?}: cannot parse {cell:?}")))
}

/// Reads the two network files written by [`write_network`]. Segment ids
/// must be `0..S` in order.
pub fn read_network(edges_path: &Path, placements_path: &Path) -> Result<(RiverNetwork, Vec<String>)> {
    let mut rdr = reader(edges_path)?;
    headers(edges_path, &mut rdr)?;
    let mut edges = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(edges_path, e))?;
        if rec.len() != 3 {
            return Err(AppError::format(edges_path, format!("row {}: expected 3 cells", r + 1)));
        }
        let id: usize = parse_cell(edges_path, r + 1, "segment_id", &rec[0])?;
        if id != r {
            return Err(AppError::format(edges_path, format!("row {}: segment ids must be 0..S in order", r + 1)));
        }
        let parent = if rec[1].trim().is_empty() {
            None
        } else {
            Some(parse_cell(edges_path, r + 1, "parent_id", &rec[1])?)
        };
        edges.push((parent, parse_cell(edges_path, r + 1, "length", &rec[2])?));
    }
    let mut rdr = reader(placements_path)?;
    headers(placements_path, &mut rdr)?;
    let mut ids = Vec::new();
    let mut placements = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(placements_path, e))?;
        if rec.len() != 3 {
            return Err(AppError::format(placements_path, format!("row {}: expected 3 cells", r + 1)));
        }
        ids.push(rec[0].to_string());
        placements.push(Placement {
            segment: parse_cell(placements_path, r + 1, "segment_id", &rec[1])?,
            offset: parse_cell(placements_path, r + 1, "offset", &rec[2])?,
        });
    }
    let net = RiverNetwork::from_edges(&edges, placements)
        .map_err(|e| AppError::format(edges_path, e.to_string()))?;
    Ok((net, ids))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| AppError::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| AppError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gnnad_core::simgen::build_river_network;
    use tempfile::tempdir;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn reads_shape_and_ids() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "s.csv", "tick,a,b\n1,0.5,1\n2,1.5,2\n3,2,3\n4,3,-4\n");
        let s = read_series(&p, MissingPolicy::Reject).unwrap();
        assert_eq!((s.len(), s.n_sensors()), (4, 2));
        assert_eq!(s.sensor_ids(), ["a", "b"]);
        assert_eq!(s.values()[(3, 1)], -4.0);
    }

    #[test]
    fn nan_cell_is_named() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "s.csv", "tick,a,b\n1,0.5,1\n2,NaN,2\n");
        let msg = read_series(&p, MissingPolicy::Reject).unwrap_err().to_string();
        assert!(msg.contains("row 2") && msg.contains("\"a\""), "{msg}");
    }

    #[test]
    fn forward_fill_carries_previous_value() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "s.csv", "tick,a\n1,0.5\n2,\n3,NA\n4,2\n");
        let s = read_series(&p, MissingPolicy::ForwardFill).unwrap();
        assert_eq!(s.values().as_slice(), &[0.5, 0.5, 0.5, 2.0]);
        let first = write(dir.path(), "f.csv", "tick,a\n1,\n");
        assert!(read_series(&first, MissingPolicy::ForwardFill).is_err());
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempdir().unwrap();
        for (name, text) in [
            ("text.csv", "tick,a\n1,abc\n"),
            ("dup.csv", "tick,a,a\n1,1,2\n"),
            ("order.csv", "tick,a\n2,1\n1,1\n"),
            ("inf.csv", "tick,a\n1,inf\n"),
            ("ragged.csv", "tick,a,b\n1,1\n"),
            ("empty.csv", "tick,a\n"),
        ] {
            let p = write(dir.path(), name, text);
            let err = read_series(&p, MissingPolicy::Reject).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{name}: {err}");
        }
        let err = read_series(&dir.path().join("absent.csv"), MissingPolicy::Reject).unwrap_err();
        assert!(matches!(err, AppError::Io { .. }));
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let text = "tick,s1,s2\n1,0.1,-3\n2,0.0000001,123456.789\n5,0.30000000000000004,2\n";
        let p = write(dir.path(), "s.csv", text);
        let s = read_series(&p, MissingPolicy::Reject).unwrap();
        let out = dir.path().join("out.csv");
        write_series(&out, &s).unwrap();
        assert_eq!(std::fs::read_to_string(out).unwrap(), text);
    }

    #[test]
    fn label_layouts() {
        let dir = tempdir().unwrap();
        let net = write(dir.path(), "l.csv", "tick,label\n1,0\n2,1\n");
        assert_eq!(
            read_labels(&net).unwrap(),
            Labels::Network { ticks: vec![1, 2], labels: vec![false, true] }
        );
        let per = write(dir.path(), "p.csv", "tick,a,b\n1,0,0\n2,0,1\n");
        let l = read_labels(&per).unwrap();
        let s = MultivariateSeries::new(Matrix::zeros(2, 2), vec![1, 2], vec!["a".into(), "b".into()]).unwrap();
        let s = l.attach(s, &per).unwrap();
        assert_eq!(s.labels().unwrap(), &[false, true]);
        let bad = write(dir.path(), "b.csv", "tick,label\n1,2\n");
        assert!(read_labels(&bad).is_err());
    }

    #[test]
    fn flags_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("flags.csv");
        let ids = vec!["a".to_string(), "b".to_string()];
        write_flags(&p, &[4, 5], &ids, &[true, false], &[false, true, false, false]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "tick,network_flag,a,b\n4,1,0,1\n5,0,0,0\n");
        let t = read_flags(&p).unwrap();
        assert_eq!(t.ticks, vec![4, 5]);
        assert_eq!(t.sensor, vec![false, true, false, false]);
    }

    #[test]
    fn network_files_round_trip() {
        let dir = tempdir().unwrap();
        let net = build_river_network(6, 0.8, 4, 3).unwrap();
        let ids: Vec<String> = (1..=6).map(|i| format!("s{i}")).collect();
        write_network(dir.path(), &net, &ids).unwrap();
        let (back, back_ids) = read_network(&dir.path().join("edges.csv"), &dir.path().join("placements.csv")).unwrap();
        assert_eq!(back_ids, ids);
        assert_eq!(back.placements(), net.placements());
        for (a, b) in back.segments().iter().zip(net.segments()) {
            assert_eq!((a.parent, a.length, a.shreve_order), (b.parent, b.length, b.shreve_order));
        }
    }
}
