//! CSV and JSON helpers for trajectories, tables and result files.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqgame::Trajectory;

/// Row-major nested arrays, the matrix layout of every result and config file.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Parses row-major nested arrays; every row must have the same length.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::ShapeMismatch("ragged matrix rows".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("matrix entries must be finite".into()));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

/// Serde adapter for `DMatrix<f64>` fields stored as nested rows.
pub mod rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Generic trajectory header `t,x1..xn,u_a1..,u_h1..` for two players, or
/// `u<i>_<j>` columns otherwise.
pub fn trajectory_header(n: usize, input_dims: &[usize]) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|i| format!("x{i}")));
    let names: Vec<String> = if input_dims.len() == 2 {
        vec!["u_a".into(), "u_h".into()]
    } else {
        (1..=input_dims.len()).map(|i| format!("u{i}_")).collect()
    };
    for (name, &p) in names.iter().zip(input_dims) {
        h.extend((1..=p).map(|j| format!("{name}{j}")));
    }
    h
}

/// Writes one row per sample: time, states, then every player's inputs.
pub fn write_trajectory_csv<W: Write>(w: W, traj: &Trajectory<f64>, header: &[String]) -> Result<()> {
    let width = 1 + traj.states.nrows() + traj.inputs.iter().map(|u| u.nrows()).sum::<usize>();
    if header.len() != width {
        return Err(Error::ShapeMismatch(format!("header has {} columns, trajectory {width}", header.len())));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header).map_err(csv_err)?;
    for k in 0..traj.len() {
        let mut rec = Vec::with_capacity(width);
        rec.push(traj.times[k].to_string());
        rec.extend(traj.states.column(k).iter().map(f64::to_string));
        for u in &traj.inputs {
            rec.extend(u.column(k).iter().map(f64::to_string));
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::InvalidParams(e.to_string()))
}

/// Reads a trajectory written by [`write_trajectory_csv`] (header row required).
pub fn read_trajectory_csv<R: Read>(r: R, n: usize, input_dims: &[usize]) -> Result<Trajectory<f64>> {
    let width = 1 + n + input_dims.iter().sum::<usize>();
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != width {
            return Err(Error::ShapeMismatch(format!("row has {} columns, expected {width}", rec.len())));
        }
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::InvalidParams(format!("bad number {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(Error::InvalidParams("trajectory file has no samples".into()));
    }
    let len = rows.len();
    let times = rows.iter().map(|r| r[0]).collect();
    let states = DMatrix::from_fn(n, len, |i, k| rows[k][1 + i]);
    let mut inputs = Vec::with_capacity(input_dims.len());
    let mut off = 1 + n;
    for &p in input_dims {
        inputs.push(DMatrix::from_fn(p, len, |i, k| rows[k][off + i]));
        off += p;
    }
    Ok(Trajectory { times, states, inputs })
}

/// Splits a file holding several runs back to back: a new segment starts wherever the
/// time column does not increase.
pub fn split_at_time_resets(traj: &Trajectory<f64>) -> Vec<Trajectory<f64>> {
    let mut starts = vec![0];
    starts.extend((1..traj.len()).filter(|&k| traj.times[k] <= traj.times[k - 1]));
    starts.push(traj.len());
    starts.windows(2).filter(|w| w[1] > w[0]).map(|w| traj.window(w[0], w[1] - w[0])).collect()
}

/// Concatenates segments with each segment's time shifted to start at zero, the inverse of
/// [`split_at_time_resets`].
pub fn join_segments(segments: &[Trajectory<f64>]) -> Result<Trajectory<f64>> {
    let first = segments.first().ok_or_else(|| Error::InvalidParams("no segments to join".into()))?;
    let len: usize = segments.iter().map(Trajectory::len).sum();
    let n = first.states.nrows();
    let dims: Vec<usize> = first.inputs.iter().map(|u| u.nrows()).collect();
    let mut out = Trajectory {
        times: Vec::with_capacity(len),
        states: DMatrix::zeros(n, len),
        inputs: dims.iter().map(|&p| DMatrix::zeros(p, len)).collect(),
    };
    let mut off = 0;
    for seg in segments {
        if seg.states.nrows() != n || seg.inputs.iter().map(|u| u.nrows()).ne(dims.iter().copied()) {
            return Err(Error::ShapeMismatch("segments differ in dimensions".into()));
        }
        let t0 = seg.times.first().copied().unwrap_or(0.0);
        out.times.extend(seg.times.iter().map(|t| t - t0));
        out.states.columns_mut(off, seg.len()).copy_from(&seg.states);
        for (dst, src) in out.inputs.iter_mut().zip(&seg.inputs) {
            dst.columns_mut(off, seg.len()).copy_from(src);
        }
        off += seg.len();
    }
    Ok(out)
}

/// Writes serializable rows as CSV with a header taken from the field names.
pub fn write_table_csv<W: Write, S: Serialize>(w: W, rows: &[S]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::InvalidParams(e.to_string()))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<S: Serialize>(value: &S) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidParams(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<D: for<'de> Deserialize<'de>>(text: &str) -> Result<D> {
    serde_json::from_str(text).map_err(|e| Error::InvalidParams(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidParams(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
        assert_eq!(to_rows(&m), vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.5]]);
        assert_eq!(from_rows(&to_rows(&m)).unwrap(), m);
        assert!(from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let traj = Trajectory {
            times: vec![0.0, 0.04],
            states: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.25, 0.125]),
            inputs: vec![DMatrix::from_row_slice(1, 2, &[0.1, 0.2]), DMatrix::from_row_slice(1, 2, &[0.3, 1e-17])],
        };
        let header = trajectory_header(2, &[1, 1]);
        assert_eq!(header, ["t", "x1", "x2", "u_a1", "u_h1"]);
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj, &header).unwrap();
        let back = read_trajectory_csv(buf.as_slice(), 2, &[1, 1]).unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn empty_trajectory_file_is_rejected() {
        let text = "t,x1,u_a1,u_h1\n";
        assert!(read_trajectory_csv(text.as_bytes(), 1, &[1, 1]).is_err());
    }

    #[test]
    fn segments_survive_join_and_split() {
        let seg = |t0: f64, v: f64| Trajectory {
            times: vec![t0, t0 + 0.5, t0 + 1.0],
            states: DMatrix::from_element(1, 3, v),
            inputs: vec![DMatrix::from_element(1, 3, -v)],
        };
        let joined = join_segments(&[seg(0.0, 1.0), seg(3.0, 2.0)]).unwrap();
        assert_eq!(joined.times, [0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
        let parts = split_at_time_resets(&joined);
        assert_eq!(parts, vec![seg(0.0, 1.0), seg(0.0, 2.0)]);
    }
}
