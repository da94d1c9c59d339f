//! On-disk sequence format: a directory with `manifest.json` and per-snapshot
//! CSV files.
//!
//! ```text
//! manifest.json                 format_version, sizes, node ids, provenance
//! snapshot_00000_edges.csv      src,dst[,label]
//! snapshot_00000_features.csv   one row of d values per node, in node order
//! snapshot_00000_labels.csv     node,label   (node-labelled sequences only)
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so a save/load
//! cycle reproduces the sequence bit for bit.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DynamicGraphSequence, GraphSnapshot, Labels, Provenance};

pub const SEQUENCE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LabelKind {
    None,
    Node,
    Edge,
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceManifest {
    format_version: u32,
    num_nodes: usize,
    feature_dim: usize,
    num_classes: usize,
    label_kind: LabelKind,
    provenance: Provenance,
    timesteps: Vec<usize>,
    node_ids: Vec<String>,
    #[serde(default)]
    warnings: Vec<String>,
    content_hash: String,
}

fn stem(t: usize) -> String {
    format!("snapshot_{t:05}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn parse<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec.get(i).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing column {i}"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse `{raw}`"),
    })
}

/// Writes `seq` into `dir`, creating it if needed.
pub fn save_sequence(seq: &DynamicGraphSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let label_kind = match seq.snapshots()[0].labels() {
        None => LabelKind::None,
        Some(Labels::Node(_)) => LabelKind::Node,
        Some(Labels::Edge(_)) => LabelKind::Edge,
    };
    for s in seq.snapshots() {
        let base = stem(s.timestep());
        let mut w = csv_writer(&dir.join(format!("{base}_edges.csv")))?;
        let edge_labels = match s.labels() {
            Some(Labels::Edge(v)) => Some(v),
            _ => None,
        };
        if edge_labels.is_some() {
            w.write_record(["src", "dst", "label"])?;
        } else {
            w.write_record(["src", "dst"])?;
        }
        match edge_labels {
            Some(v) => {
                // labelled edges first-class; unlabelled ones cannot occur in
                // edge-labelled snapshots built by the loader, but keep them anyway
                let mut it = v.iter().peekable();
                for &(a, b) in s.edges() {
                    match it.peek() {
                        Some(&&((x, y), c)) if (x, y) == (a, b) => {
                            w.write_record([a.to_string(), b.to_string(), c.to_string()])?;
                            it.next();
                        }
                        _ => w.write_record([a.to_string(), b.to_string(), String::new()])?,
                    }
                }
            }
            None => {
                for &(a, b) in s.edges() {
                    w.write_record([a.to_string(), b.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv_writer(&dir.join(format!("{base}_features.csv")))?;
        let header: Vec<String> = (0..s.feature_dim()).map(|j| format!("x{j}")).collect();
        w.write_record(&header)?;
        let x = s.features();
        for i in 0..x.nrows() {
            w.write_record(x.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        if let Some(Labels::Node(v)) = s.labels() {
            let mut w = csv_writer(&dir.join(format!("{base}_labels.csv")))?;
            w.write_record(["node", "label"])?;
            for (i, l) in v.iter().enumerate() {
                if let Some(c) = l {
                    w.write_record([i.to_string(), c.to_string()])?;
                }
            }
            w.flush().map_err(|e| Error::io(dir, e))?;
        }
    }
    let manifest = SequenceManifest {
        format_version: SEQUENCE_FORMAT_VERSION,
        num_nodes: seq.num_nodes(),
        feature_dim: seq.feature_dim(),
        num_classes: seq.num_classes(),
        label_kind,
        provenance: seq.provenance,
        timesteps: seq.snapshots().iter().map(|s| s.timestep()).collect(),
        node_ids: seq.node_ids().to_vec(),
        warnings: seq.warnings.clone(),
        content_hash: seq.content_hash(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Reads a sequence written by [`save_sequence`].
pub fn load_sequence(dir: &Path) -> Result<DynamicGraphSequence> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: SequenceManifest = serde_json::from_str(&text)?;
    if m.format_version != SEQUENCE_FORMAT_VERSION {
        return Err(Error::validation(format!(
            "unsupported sequence format version {}",
            m.format_version
        )));
    }
    let n = m.num_nodes;
    let mut snapshots = Vec::with_capacity(m.timesteps.len());
    for &t in &m.timesteps {
        let base = stem(t);
        let mut edges = Vec::new();
        let mut edge_labels = Vec::new();
        for rec in csv_reader(&dir.join(format!("{base}_edges.csv")))?.records() {
            let rec = rec?;
            let (a, b): (usize, usize) = (parse(&rec, 0)?, parse(&rec, 1)?);
            edges.push((a, b));
            if m.label_kind == LabelKind::Edge && rec.get(2).is_some_and(|s| !s.is_empty()) {
                edge_labels.push(((a, b), parse(&rec, 2)?));
            }
        }
        let mut x = DMatrix::zeros(n, m.feature_dim);
        let mut rows = 0;
        for (i, rec) in csv_reader(&dir.join(format!("{base}_features.csv")))?
            .records()
            .enumerate()
        {
            let rec = rec?;
            if i >= n || rec.len() != m.feature_dim {
                return Err(Error::dims("stored feature row", m.feature_dim, rec.len()));
            }
            for j in 0..m.feature_dim {
                x[(i, j)] = parse(&rec, j)?;
            }
            rows += 1;
        }
        if rows != n {
            return Err(Error::dims("stored feature rows", n, rows));
        }
        let labels = match m.label_kind {
            LabelKind::None => None,
            LabelKind::Edge => Some(Labels::Edge(edge_labels)),
            LabelKind::Node => {
                let mut v = vec![None; n];
                for rec in csv_reader(&dir.join(format!("{base}_labels.csv")))?.records() {
                    let rec = rec?;
                    let i: usize = parse(&rec, 0)?;
                    if i >= n {
                        return Err(Error::Index {
                            context: "stored node label",
                            index: i,
                            size: n,
                        });
                    }
                    v[i] = Some(parse(&rec, 1)?);
                }
                Some(Labels::Node(v))
            }
        };
        snapshots.push(GraphSnapshot::new(t, n, edges, x, labels)?);
    }
    let mut seq = DynamicGraphSequence::new(snapshots, m.num_classes, Some(m.node_ids))?;
    seq.provenance = m.provenance;
    seq.warnings = m.warnings;
    if seq.content_hash() != m.content_hash {
        return Err(Error::validation(format!(
            "content hash mismatch for {}: manifest says {}, files give {}",
            dir.display(),
            m.content_hash,
            seq.content_hash()
        )));
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{load_temporal_edgelist, EdgeListSchema};

    #[test]
    fn edge_labelled_round_trip() {
        let schema = EdgeListSchema {
            label: Some(crate::graph::Column::Index(3)),
            ..Default::default()
        };
        let seq = load_temporal_edgelist("a,b,0,1\nb,c,0,0\nc,a,1,1\n".as_bytes(), &schema, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn tampered_files_are_detected() {
        let seq = load_temporal_edgelist("a,b,0\n".as_bytes(), &EdgeListSchema::default(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        fs::write(dir.path().join("snapshot_00000_features.csv"), "x0\n0\n1\n0\n0\n0\n0\n0\n0\n")
            .unwrap();
        assert!(load_sequence(dir.path()).is_err());
    }
}
