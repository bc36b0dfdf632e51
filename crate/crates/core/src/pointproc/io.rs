//! Text formats for event sequences and count matrices.
//!
//! Writers return strings; the harness decides where (and how atomically)
//! they land on disk. Floats use Rust's shortest round-trip formatting so a
//! write/read cycle is lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::binning::SpikeCountMatrix;
use super::hawkes::{Event, EventSequence};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

/// CSV with header `t,node`.
pub fn events_to_csv(seq: &EventSequence) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "node"]).map_err(|e| Error::Serde(e.to_string()))?;
    for e in &seq.events {
        w.write_record([e.t.to_string(), e.node.to_string()])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    into_string(w)
}

/// Parse a `t,node` CSV. `n_nodes` and `horizon` are inferred when not given.
pub fn events_from_csv(text: &str, path: &Path, n_nodes: Option<usize>, horizon: Option<f64>) -> Result<EventSequence> {
    #[derive(Deserialize)]
    struct Row {
        t: f64,
        node: usize,
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut events = Vec::new();
    for rec in rdr.deserialize::<Row>() {
        let row = rec.map_err(|e| csv_err(path, e))?;
        events.push(Event { t: row.t, node: row.node });
    }
    let n = n_nodes.unwrap_or_else(|| events.iter().map(|e| e.node + 1).max().unwrap_or(0));
    let h = horizon.unwrap_or_else(|| events.last().map_or(0.0, |e| e.t));
    let seq = EventSequence {
        n_nodes: n,
        horizon: h,
        events,
    };
    seq.validate()?;
    Ok(seq)
}

/// Sidecar metadata for a count CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct CountsMeta {
    pub N: usize,
    pub T: usize,
    pub bin_width: f64,
    pub t0: f64,
}

/// One row per node, one column per bin, with header `node,0,1,...`.
pub fn counts_to_csv(m: &SpikeCountMatrix) -> Result<(String, String)> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["node".to_string()];
    header.extend((0..m.n_bins).map(|i| i.to_string()));
    w.write_record(&header).map_err(|e| Error::Serde(e.to_string()))?;
    for n in 0..m.n_nodes {
        let mut row = vec![n.to_string()];
        row.extend((0..m.n_bins).map(|i| m.get(n, i).to_string()));
        w.write_record(&row).map_err(|e| Error::Serde(e.to_string()))?;
    }
    let meta = CountsMeta {
        N: m.n_nodes,
        T: m.n_bins,
        bin_width: m.bin_width,
        t0: m.t0,
    };
    Ok((into_string(w)?, serde_json::to_string_pretty(&meta)?))
}

pub fn counts_from_csv(text: &str, meta_json: &str, path: &Path) -> Result<SpikeCountMatrix> {
    let meta: CountsMeta = serde_json::from_str(meta_json)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut m = SpikeCountMatrix::zeros(meta.N, meta.T, meta.bin_width);
    m.t0 = meta.t0;
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if rec.len() != meta.T + 1 {
            return Err(bad(format!("expected {} columns, got {}", meta.T + 1, rec.len())));
        }
        let node: usize = rec[0].parse().map_err(|e| bad(format!("node id: {e}")))?;
        if node >= meta.N {
            return Err(bad(format!("node {node} out of range")));
        }
        for i in 0..meta.T {
            let c: u64 = rec[i + 1].parse().map_err(|e| bad(format!("count: {e}")))?;
            m.set(node, i, c);
        }
        rows += 1;
    }
    if rows != meta.N {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("expected {} node rows, got {rows}", meta.N),
        });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_round_trip() {
        let seq = EventSequence {
            n_nodes: 3,
            horizon: 5.0,
            events: vec![Event { t: 0.1 + 0.2, node: 2 }, Event { t: 4.999_999_999, node: 0 }],
        };
        let text = events_to_csv(&seq).unwrap();
        assert!(text.starts_with("t,node\n"));
        let back = events_from_csv(&text, Path::new("x.csv"), Some(3), Some(5.0)).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn counts_round_trip() {
        let mut m = SpikeCountMatrix::zeros(2, 3, 0.5);
        m.set(1, 2, 7);
        m.set(0, 0, 1);
        let (csv, meta) = counts_to_csv(&m).unwrap();
        assert_eq!(counts_from_csv(&csv, &meta, Path::new("c.csv")).unwrap(), m);
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "t,node\n0.5,0\nabc,1\n";
        match events_from_csv(text, Path::new("e.csv"), None, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
