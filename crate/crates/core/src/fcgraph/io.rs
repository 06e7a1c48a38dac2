//! On-disk formats for ROI timeseries and dynamic graphs.
//!
//! Timeseries CSV: first row ROI labels, second row ICN labels, then one row per timepoint
//! (`Tmax × N`, transposed on load). A sidecar JSON next to the CSV (same stem, `.json`)
//! carries `{"tr_s": <seconds>}`.
//!
//! DFCG binary (all integers little-endian):
//!
//! | field        | type                                             |
//! |--------------|--------------------------------------------------|
//! | magic        | `b"DFCG"`                                        |
//! | version      | `u32` (= 1)                                      |
//! | n            | `u32` nodes                                      |
//! | t            | `u32` graphs                                     |
//! | triangles    | `t` × `ceil(n(n-1)/2 / 8)` bytes                 |
//! | window_ends  | `t` × `u32`                                      |
//!
//! Each triangle lists `A[i][j]` for `i < j` in row-major order, bit `k` stored in byte `k / 8`
//! at bit position `k % 8` (LSB first); each graph starts on a fresh byte.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Adjacency, DynamicGraph, FcError, RoiTimeseries};

pub const DFCG_MAGIC: &[u8; 4] = b"DFCG";
pub const DFCG_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    tr_s: f64,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn read_timeseries(csv_path: &Path) -> Result<RoiTimeseries, FcError> {
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(csv_path))?).map_err(|e| FcError::Format {
        what: "timeseries sidecar",
        detail: e.to_string(),
    })?;
    let file = fs::File::open(csv_path)?;
    parse_timeseries(file, sidecar.tr_s)
}

pub fn parse_timeseries<R: Read>(reader: R, tr_s: f64) -> Result<RoiTimeseries, FcError> {
    let fmt = |detail: String| FcError::Format {
        what: "timeseries CSV",
        detail,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(reader);
    let mut records = rdr.records();
    let mut next_row = |what: &str| -> Result<Vec<String>, FcError> {
        records
            .next()
            .ok_or_else(|| fmt(format!("missing {what} row")))?
            .map(|r| r.iter().map(|s| s.trim().to_string()).collect())
            .map_err(|e| fmt(e.to_string()))
    };
    let roi_labels = next_row("ROI label")?;
    let icn_labels = next_row("ICN label")?;
    let n = roi_labels.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let row: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| fmt(format!("{s:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        columns.push(row);
    }
    let t_max = columns.len();
    let mut values = vec![0.0; n * t_max];
    for (t, row) in columns.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            values[i * t_max + t] = *v;
        }
    }
    RoiTimeseries::new(n, t_max, values, roi_labels, icn_labels, tr_s)
}

pub fn write_timeseries(ts: &RoiTimeseries, csv_path: &Path) -> Result<(), FcError> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let csv_err = |e: csv::Error| FcError::Format {
            what: "timeseries CSV",
            detail: e.to_string(),
        };
        w.write_record(ts.roi_labels()).map_err(csv_err)?;
        w.write_record(ts.icn_labels()).map_err(csv_err)?;
        for t in 0..ts.t_max() {
            // `{:?}` on f64 is the shortest representation that round-trips exactly.
            let row: Vec<String> = (0..ts.n_rois()).map(|i| format!("{:?}", ts.get(i, t))).collect();
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
    }
    fs::write(csv_path, buf)?;
    let sidecar = serde_json::to_vec(&Sidecar {
        tr_s: ts.repetition_time_s(),
    })
    .expect("plain struct serializes");
    fs::write(sidecar_path(csv_path), sidecar)?;
    Ok(())
}

pub fn encode_dfcg(graph: &DynamicGraph) -> Vec<u8> {
    let n = graph.n_nodes;
    let pairs = n * (n - 1) / 2;
    let bytes_per = pairs.div_ceil(8);
    let mut out = Vec::with_capacity(16 + graph.len() * (bytes_per + 4));
    out.extend_from_slice(DFCG_MAGIC);
    out.extend_from_slice(&DFCG_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(graph.len() as u32).to_le_bytes());
    for a in &graph.adjacency {
        let mut packed = vec![0u8; bytes_per];
        for (k, bit) in a.upper_triangle().into_iter().enumerate() {
            if bit {
                packed[k / 8] |= 1 << (k % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    for &end in &graph.window_ends {
        out.extend_from_slice(&(end as u32).to_le_bytes());
    }
    out
}

pub fn decode_dfcg(bytes: &[u8]) -> Result<DynamicGraph, FcError> {
    let fmt = |detail: String| FcError::Format { what: "DFCG", detail };
    let u32_at = |off: usize| -> Result<u32, FcError> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| fmt(format!("truncated at byte {off}")))
    };
    if bytes.get(..4) != Some(DFCG_MAGIC.as_slice()) {
        return Err(fmt("bad magic".to_string()));
    }
    let version = u32_at(4)?;
    if version != DFCG_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let n = u32_at(8)? as usize;
    let t = u32_at(12)? as usize;
    if n < 2 {
        return Err(fmt(format!("node count {n}")));
    }
    let pairs = n * (n - 1) / 2;
    let bytes_per = pairs.div_ceil(8);
    let expected = 16 + t * bytes_per + 4 * t;
    if bytes.len() != expected {
        return Err(fmt(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut adjacency = Vec::with_capacity(t);
    for g in 0..t {
        let packed = &bytes[16 + g * bytes_per..16 + (g + 1) * bytes_per];
        let upper: Vec<bool> = (0..pairs).map(|k| packed[k / 8] >> (k % 8) & 1 == 1).collect();
        adjacency.push(Adjacency::from_upper_triangle(n, &upper)?);
    }
    let ends_off = 16 + t * bytes_per;
    let window_ends = (0..t)
        .map(|i| u32_at(ends_off + 4 * i).map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DynamicGraph {
        adjacency,
        window_ends,
        n_nodes: n,
    })
}

pub fn write_dfcg(graph: &DynamicGraph, path: &Path) -> Result<(), FcError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_dfcg(graph))?;
    Ok(())
}

pub fn read_dfcg(path: &Path) -> Result<DynamicGraph, FcError> {
    decode_dfcg(&fs::read(path)?)
}
