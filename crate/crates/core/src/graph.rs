//! Temporal graph data: snapshots, sequences, windows and the normalized
//! propagation operator used by the GCN layers.
//!
//! Every snapshot of a sequence shares one global node index space, so node
//! counts are constant across timesteps. Nodes that do not appear at a
//! timestep keep a zero feature row and have no edges.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Class labels attached to a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// One optional class per node.
    Node(Vec<Option<usize>>),
    /// Classes for (canonical) undirected edges, sorted by edge.
    Edge(Vec<((usize, usize), usize)>),
}

/// One timestep of a dynamic graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSnapshot {
    timestep: usize,
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: DMatrix<f64>,
    labels: Option<Labels>,
}

fn canonical(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl GraphSnapshot {
    /// Builds a snapshot, symmetrizing edges, dropping self-loops and
    /// collapsing duplicates.
    pub fn new(
        timestep: usize,
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: DMatrix<f64>,
        labels: Option<Labels>,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::validation("snapshot must contain at least one node"));
        }
        if features.nrows() != num_nodes {
            return Err(Error::dims(
                "snapshot feature rows",
                num_nodes,
                features.nrows(),
            ));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            for v in [a, b] {
                if v >= num_nodes {
                    return Err(Error::Index {
                        context: "edge endpoint",
                        index: v,
                        size: num_nodes,
                    });
                }
            }
            if a != b {
                set.insert(canonical(a, b));
            }
        }
        let labels = match labels {
            None => None,
            Some(Labels::Node(v)) => {
                if v.len() != num_nodes {
                    return Err(Error::dims("node labels", num_nodes, v.len()));
                }
                Some(Labels::Node(v))
            }
            Some(Labels::Edge(v)) => {
                let mut map = std::collections::BTreeMap::new();
                for ((a, b), c) in v {
                    let e = canonical(a, b);
                    if !set.contains(&e) {
                        return Err(Error::validation(format!(
                            "edge label for ({a}, {b}) which is not an edge of the snapshot"
                        )));
                    }
                    map.entry(e).or_insert(c);
                }
                Some(Labels::Edge(map.into_iter().collect()))
            }
        };
        Ok(Self {
            timestep,
            num_nodes,
            edges: set.into_iter().collect(),
            features,
            labels,
        })
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Canonical undirected edges `(min, max)`, sorted and unique.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.binary_search(&canonical(a, b)).is_ok()
    }

    /// Same snapshot with a different edge set; edge labels are dropped.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let labels = match &self.labels {
            Some(Labels::Node(v)) => Some(Labels::Node(v.clone())),
            _ => None,
        };
        Self::new(self.timestep, self.num_nodes, edges, self.features.clone(), labels)
    }

    /// Same snapshot with a different feature matrix of identical shape.
    pub fn with_features(&self, features: DMatrix<f64>) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(Error::dims(
                "replacement features",
                format!("{:?}", self.features.shape()),
                format!("{:?}", features.shape()),
            ));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    /// Digest of the structure only (node count and edges); the Laplacian is a
    /// function of exactly this.
    pub fn structure_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.num_nodes as u64).to_le_bytes());
        for &(a, b) in &self.edges {
            h.update((a as u64).to_le_bytes());
            h.update((b as u64).to_le_bytes());
        }
        h.finalize().into()
    }

    fn hash_into(&self, h: &mut Sha256) {
        h.update((self.timestep as u64).to_le_bytes());
        h.update(self.structure_hash());
        h.update((self.features.ncols() as u64).to_le_bytes());
        for v in self.features.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        match &self.labels {
            None => h.update([0u8]),
            Some(Labels::Node(v)) => {
                h.update([1u8]);
                for l in v {
                    h.update(l.map_or(u64::MAX, |c| c as u64).to_le_bytes());
                }
            }
            Some(Labels::Edge(v)) => {
                h.update([2u8]);
                for ((a, b), c) in v {
                    for x in [*a, *b, *c] {
                        h.update((x as u64).to_le_bytes());
                    }
                }
            }
        }
    }
}

/// Which kind of data a sequence holds, recorded in its manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Id,
    Sm,
    Fi,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Id => "id",
            Provenance::Sm => "sm",
            Provenance::Fi => "fi",
        })
    }
}

/// An ordered list of snapshots over a shared node index space.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGraphSequence {
    snapshots: Vec<GraphSnapshot>,
    feature_dim: usize,
    num_classes: usize,
    node_ids: Vec<String>,
    pub provenance: Provenance,
    /// Non-fatal notes produced while loading (e.g. compacted timesteps).
    pub warnings: Vec<String>,
}

impl DynamicGraphSequence {
    pub fn new(
        snapshots: Vec<GraphSnapshot>,
        num_classes: usize,
        node_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        let first = snapshots.first().ok_or(Error::EmptyDataset)?;
        let feature_dim = first.feature_dim();
        let num_nodes = first.num_nodes();
        for w in snapshots.windows(2) {
            if w[1].timestep <= w[0].timestep {
                return Err(Error::validation(format!(
                    "timesteps must be strictly increasing ({} then {})",
                    w[0].timestep, w[1].timestep
                )));
            }
        }
        for s in &snapshots {
            if s.feature_dim() != feature_dim {
                return Err(Error::dims("sequence feature dimension", feature_dim, s.feature_dim()));
            }
            if s.num_nodes() != num_nodes {
                return Err(Error::dims("sequence node count", num_nodes, s.num_nodes()));
            }
            let bad = match s.labels() {
                Some(Labels::Node(v)) => v.iter().flatten().find(|&&c| c >= num_classes).copied(),
                Some(Labels::Edge(v)) => v.iter().map(|x| x.1).find(|&c| c >= num_classes),
                None => None,
            };
            if let Some(c) = bad {
                return Err(Error::Index {
                    context: "class label",
                    index: c,
                    size: num_classes,
                });
            }
        }
        let node_ids = node_ids.unwrap_or_else(|| (0..num_nodes).map(|i| i.to_string()).collect());
        if node_ids.len() != num_nodes {
            return Err(Error::dims("node id table", num_nodes, node_ids.len()));
        }
        Ok(Self {
            snapshots,
            feature_dim,
            num_classes,
            node_ids,
            provenance: Provenance::Id,
            warnings: Vec::new(),
        })
    }

    pub fn snapshots(&self) -> &[GraphSnapshot] {
        &self.snapshots
    }

    pub fn total_timesteps(&self) -> usize {
        self.snapshots.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_nodes(&self) -> usize {
        self.snapshots[0].num_nodes()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    /// Replaces every snapshot, keeping metadata; used by the OOD generators.
    pub fn map_snapshots(
        &self,
        provenance: Provenance,
        exec: Execution,
        f: impl Fn(&GraphSnapshot) -> Result<GraphSnapshot> + Sync + Send,
    ) -> Result<Self> {
        let snapshots = par::try_map_slice(exec, &self.snapshots, f)?;
        let mut out = Self::new(snapshots, self.num_classes, Some(self.node_ids.clone()))?;
        out.provenance = provenance;
        Ok(out)
    }

    /// Contiguous sub-sequence `[start, end)`, keeping original timesteps.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.total_timesteps() {
            return Err(Error::OutOfRange {
                start,
                length: end.saturating_sub(start),
                total: self.total_timesteps(),
            });
        }
        let mut out = Self::new(
            self.snapshots[start..end].to_vec(),
            self.num_classes,
            Some(self.node_ids.clone()),
        )?;
        out.provenance = self.provenance;
        Ok(out)
    }

    /// SHA-256 over snapshot contents (not provenance or warnings).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_classes as u64).to_le_bytes());
        h.update((self.feature_dim as u64).to_le_bytes());
        for id in &self.node_ids {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        for s in &self.snapshots {
            s.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }
}

/// A contiguous run of snapshots `G^{t:t+Δt}`.
#[derive(Debug, Clone, Copy)]
pub struct SnapshotWindow<'a> {
    start: usize,
    snapshots: &'a [GraphSnapshot],
}

impl<'a> SnapshotWindow<'a> {
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &'a [GraphSnapshot] {
        self.snapshots
    }

    pub fn last(&self) -> &'a GraphSnapshot {
        self.snapshots.last().expect("windows are non-empty")
    }
}

/// Slices `length` snapshots starting at position `start`.
pub fn window(seq: &DynamicGraphSequence, start: usize, length: usize) -> Result<SnapshotWindow<'_>> {
    let total = seq.total_timesteps();
    if length == 0 {
        return Err(Error::validation("window length must be at least 1"));
    }
    if start + length > total {
        return Err(Error::OutOfRange {
            start,
            length,
            total,
        });
    }
    Ok(SnapshotWindow {
        start,
        snapshots: &seq.snapshots[start..start + length],
    })
}

/// All windows of `length` lying entirely inside positions `[from, to)`.
pub fn windows_in(
    seq: &DynamicGraphSequence,
    from: usize,
    to: usize,
    length: usize,
) -> Result<Vec<SnapshotWindow<'_>>> {
    let to = to.min(seq.total_timesteps());
    if to < from + length {
        return Ok(Vec::new());
    }
    (from..=to - length).map(|t| window(seq, t, length)).collect()
}

/// Symmetric sparse matrix `D̃^{-1/2}(A + I)D̃^{-1/2}` in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl PropagationMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// `P · Z`
    pub fn apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.nrows() != self.n {
            return Err(Error::dims("propagation operand rows", self.n, z.nrows()));
        }
        let mut out = DMatrix::zeros(self.n, z.ncols());
        for c in 0..z.ncols() {
            let col = z.column(c);
            for i in 0..self.n {
                let mut acc = 0.0;
                for (j, v) in self.row(i) {
                    acc += v * col[j];
                }
                out[(i, c)] = acc;
            }
        }
        Ok(out)
    }
}

/// Message-passing operator fed to the encoder: the sparse normalized
/// adjacency of a snapshot, or a dense substitute such as `I - L⁻`.
#[derive(Debug, Clone)]
pub enum Propagator {
    Sparse(std::sync::Arc<PropagationMatrix>),
    Dense(std::sync::Arc<DMatrix<f64>>),
}

impl Propagator {
    pub fn dim(&self) -> usize {
        match self {
            Propagator::Sparse(p) => p.dim(),
            Propagator::Dense(p) => p.nrows(),
        }
    }

    /// `P · Z`
    pub fn apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Propagator::Sparse(p) => p.apply(z),
            Propagator::Dense(p) => {
                if z.nrows() != p.ncols() {
                    return Err(Error::dims("propagation operand rows", p.ncols(), z.nrows()));
                }
                Ok(p.as_ref() * z)
            }
        }
    }

    /// `Pᵀ · G`
    pub fn apply_transpose(&self, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            // normalized adjacency is symmetric
            Propagator::Sparse(p) => p.apply(g),
            Propagator::Dense(p) => {
                if g.nrows() != p.nrows() {
                    return Err(Error::dims("propagation operand rows", p.nrows(), g.nrows()));
                }
                Ok(p.tr_mul(g))
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Propagator::Sparse(p) => p.to_dense(),
            Propagator::Dense(p) => p.as_ref().clone(),
        }
    }
}

impl From<PropagationMatrix> for Propagator {
    fn from(p: PropagationMatrix) -> Self {
        Propagator::Sparse(std::sync::Arc::new(p))
    }
}

impl From<DMatrix<f64>> for Propagator {
    fn from(p: DMatrix<f64>) -> Self {
        Propagator::Dense(std::sync::Arc::new(p))
    }
}

/// Builds `D̃^{-1/2} Ã D̃^{-1/2}` with `Ã = A + I`.
pub fn normalize_propagation(snap: &GraphSnapshot) -> PropagationMatrix {
    let n = snap.num_nodes();
    let mut adj: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for &(a, b) in snap.edges() {
        adj[a].push(b);
        adj[b].push(a);
    }
    let inv_sqrt: Vec<f64> = adj.iter().map(|r| 1.0 / (r.len() as f64).sqrt()).collect();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for (i, nb) in adj.iter_mut().enumerate() {
        nb.sort_unstable();
        for &j in nb.iter() {
            col_idx.push(j);
            values.push(inv_sqrt[i] * inv_sqrt[j]);
        }
        row_ptr.push(col_idx.len());
    }
    PropagationMatrix {
        n,
        row_ptr,
        col_idx,
        values,
    }
}

/// Column reference in an edge-list file.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

/// Column mapping and parsing options for temporal edge lists.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EdgeListSchema {
    /// Field delimiter; sniffed from the first line (tab if present, else comma) when unset.
    #[serde(default)]
    pub delimiter: Option<char>,
    #[serde(default)]
    pub has_header: bool,
    pub src: Column,
    pub dst: Column,
    pub timestep: Column,
    #[serde(default)]
    pub label: Option<Column>,
    /// Feature dimension used for the one-hot degree default when no feature file is given.
    #[serde(default = "default_feature_dim")]
    pub default_feature_dim: usize,
    /// Number of classes; inferred as `max label + 1` when unset.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

fn default_feature_dim() -> usize {
    8
}

impl Default for EdgeListSchema {
    fn default() -> Self {
        Self {
            delimiter: None,
            has_header: false,
            src: Column::Index(0),
            dst: Column::Index(1),
            timestep: Column::Index(2),
            label: None,
            default_feature_dim: default_feature_dim(),
            num_classes: None,
        }
    }
}

fn read_all(mut source: impl Read) -> Result<String> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })?;
    Ok(text)
}

fn sniff_delimiter(text: &str) -> u8 {
    match text.lines().find(|l| !l.trim().is_empty()) {
        Some(l) if l.contains('\t') => b'\t',
        _ => b',',
    }
}

fn resolve(col: &Column, header: Option<&csv::StringRecord>) -> Result<usize> {
    match col {
        Column::Index(i) => Ok(*i),
        Column::Name(name) => header
            .and_then(|h| h.iter().position(|f| f.trim() == name))
            .ok_or_else(|| Error::Config(format!("column `{name}` not found in header"))),
    }
}

struct EdgeRow {
    src: usize,
    dst: usize,
    raw_t: i64,
    label: Option<usize>,
}

/// Reads a temporal edge list (`src, dst, timestep[, label]`) and optional
/// node feature file (`node_id,v1,...,vd`).
///
/// Node ids are arbitrary strings, re-indexed densely in order of first
/// appearance. Timestep values are compacted onto `0..T`; gaps are recorded in
/// the sequence warnings. Without a feature file each node present at a
/// timestep gets a one-hot encoding of `min(degree, d - 1)`.
pub fn load_temporal_edgelist(
    source: impl Read,
    schema: &EdgeListSchema,
    features: Option<&mut dyn Read>,
) -> Result<DynamicGraphSequence> {
    let text = read_all(source)?;
    if text.trim().is_empty() {
        return Err(Error::EmptyDataset);
    }
    let delim = schema.delimiter.map_or_else(|| sniff_delimiter(&text), |c| c as u8);
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = if schema.has_header {
        Some(rdr.headers()?.clone())
    } else {
        None
    };
    let c_src = resolve(&schema.src, header.as_ref())?;
    let c_dst = resolve(&schema.dst, header.as_ref())?;
    let c_t = resolve(&schema.timestep, header.as_ref())?;
    let c_label = schema
        .label
        .as_ref()
        .map(|c| resolve(c, header.as_ref()))
        .transpose()?;

    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut intern = |s: &str| -> usize {
        if let Some(&i) = index.get(s) {
            return i;
        }
        index.insert(s.to_owned(), ids.len());
        ids.push(s.to_owned());
        ids.len() - 1
    };

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: usize, what: &str| -> Result<&str> {
            rec.get(c)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("missing {what} column {c}"),
                })
        };
        let src = field(c_src, "source")?.to_owned();
        let dst = field(c_dst, "destination")?.to_owned();
        let t_raw = field(c_t, "timestep")?;
        let raw_t: i64 = t_raw
            .parse::<i64>()
            .or_else(|_| t_raw.parse::<f64>().map_err(|_| ()).and_then(|f| {
                if f.fract() == 0.0 && f.is_finite() {
                    Ok(f as i64)
                } else {
                    Err(())
                }
            }))
            .map_err(|_| Error::Parse {
                line,
                message: format!("timestep `{t_raw}` is not an integer"),
            })?;
        let label = match c_label {
            None => None,
            Some(c) => {
                let l = field(c, "label")?;
                Some(l.parse::<usize>().map_err(|_| Error::Parse {
                    line,
                    message: format!("label `{l}` is not a class index"),
                })?)
            }
        };
        rows.push(EdgeRow {
            src: intern(&src),
            dst: intern(&dst),
            raw_t,
            label,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }

    // Feature file rows: node_id,v1..vd
    let mut static_features: Option<(usize, HashMap<usize, Vec<f64>>)> = None;
    if let Some(src) = features {
        let ftext = read_all(src)?;
        let fdelim = sniff_delimiter(&ftext);
        let mut frdr = csv::ReaderBuilder::new()
            .delimiter(fdelim)
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(ftext.as_bytes());
        let mut dim = None;
        let mut map = HashMap::new();
        for rec in frdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let id = rec.get(0).unwrap_or_default();
            let vals = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>().map_err(|_| Error::Parse {
                        line,
                        message: format!("feature value `{v}` is not a number"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(Error::Parse {
                        line,
                        message: format!("expected {d} feature values, found {}", vals.len()),
                    })
                }
                _ => {}
            }
            map.insert(intern(id), vals);
        }
        let d = dim.ok_or(Error::EmptyDataset)?;
        if d == 0 {
            return Err(Error::validation("feature file rows carry no values"));
        }
        static_features = Some((d, map));
    }

    let n = ids.len();
    let distinct: BTreeSet<i64> = rows.iter().map(|r| r.raw_t).collect();
    let tmap: HashMap<i64, usize> = distinct.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let mut warnings = Vec::new();
    let (lo, hi) = (*distinct.first().unwrap(), *distinct.last().unwrap());
    if (hi - lo + 1) as usize != distinct.len() {
        warnings.push(format!(
            "non-contiguous timesteps in [{lo}, {hi}]: {} distinct values compacted to 0..{}",
            distinct.len(),
            distinct.len()
        ));
    }
    if lo != 0 && warnings.is_empty() {
        warnings.push(format!("timesteps shifted by {lo} to start at 0"));
    }

    let num_t = distinct.len();
    let mut buckets: Vec<Vec<&EdgeRow>> = vec![Vec::new(); num_t];
    for r in &rows {
        buckets[tmap[&r.raw_t]].push(r);
    }
    let has_labels = c_label.is_some();
    let num_classes = schema.num_classes.unwrap_or_else(|| {
        rows.iter()
            .filter_map(|r| r.label)
            .max()
            .map_or(2, |m| (m + 1).max(2))
    });

    let d = static_features
        .as_ref()
        .map_or(schema.default_feature_dim, |(d, _)| *d);
    if d == 0 {
        return Err(Error::validation("feature dimension must be positive"));
    }
    let mut snapshots = Vec::with_capacity(num_t);
    for (t, bucket) in buckets.iter().enumerate() {
        let edges: Vec<(usize, usize)> = bucket.iter().map(|r| (r.src, r.dst)).collect();
        let mut present = vec![false; n];
        for &(a, b) in &edges {
            present[a] = true;
            present[b] = true;
        }
        let labels = has_labels.then(|| {
            Labels::Edge(
                bucket
                    .iter()
                    .filter(|r| r.src != r.dst)
                    .map(|r| ((r.src, r.dst), r.label.unwrap_or(0)))
                    .collect(),
            )
        });
        // features are filled after dedup so degrees count unique neighbours
        let tmp = GraphSnapshot::new(t, n, edges, DMatrix::zeros(n, d), labels)?;
        let mut x = DMatrix::zeros(n, d);
        match &static_features {
            Some((_, map)) => {
                for (i, row) in map {
                    if present[*i] {
                        for (j, v) in row.iter().enumerate() {
                            x[(*i, j)] = *v;
                        }
                    }
                }
            }
            None => {
                for (i, deg) in tmp.degrees().into_iter().enumerate() {
                    if present[i] {
                        x[(i, deg.min(d - 1))] = 1.0;
                    }
                }
            }
        }
        snapshots.push(tmp.with_features(x)?);
    }
    let mut seq = DynamicGraphSequence::new(snapshots, num_classes, Some(ids))?;
    for w in &warnings {
        log::warn!("{w}");
    }
    seq.warnings = warnings;
    Ok(seq)
}

/// Reads static node labels (`node_id,label`) and attaches them to every
/// snapshot of `seq`. Unknown node ids are rejected.
pub fn attach_node_labels(seq: &DynamicGraphSequence, source: impl Read) -> Result<DynamicGraphSequence> {
    let text = read_all(source)?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(&text))
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let index: HashMap<&str, usize> = seq
        .node_ids()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut labels = vec![None; seq.num_nodes()];
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec.get(0).unwrap_or_default();
        let node = *index.get(id).ok_or_else(|| Error::Parse {
            line,
            message: format!("unknown node id `{id}`"),
        })?;
        let raw = rec.get(1).unwrap_or_default();
        labels[node] = Some(raw.parse::<usize>().map_err(|_| Error::Parse {
            line,
            message: format!("label `{raw}` is not a class index"),
        })?);
    }
    let k = labels
        .iter()
        .flatten()
        .max()
        .map_or(seq.num_classes(), |m| (m + 1).max(seq.num_classes()));
    let snapshots = seq
        .snapshots()
        .iter()
        .map(|s| {
            GraphSnapshot::new(
                s.timestep(),
                s.num_nodes(),
                s.edges().iter().copied(),
                s.features().clone(),
                Some(Labels::Node(labels.clone())),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = DynamicGraphSequence::new(snapshots, k, Some(seq.node_ids().to_vec()))?;
    out.provenance = seq.provenance;
    out.warnings = seq.warnings.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn snap(n: usize, edges: &[(usize, usize)]) -> GraphSnapshot {
        GraphSnapshot::new(0, n, edges.iter().copied(), DMatrix::zeros(n, 2), None).unwrap()
    }

    fn load(text: &str) -> Result<DynamicGraphSequence> {
        load_temporal_edgelist(text.as_bytes(), &EdgeListSchema::default(), None)
    }

    #[test]
    fn buckets_rows_by_timestep() {
        let seq = load("a,b,0\nb,c,0\na,c,1\n").unwrap();
        assert_eq!(seq.total_timesteps(), 2);
        assert_eq!(seq.num_nodes(), 3);
        assert_eq!(seq.snapshots()[0].edges().len(), 2);
        assert_eq!(seq.snapshots()[1].edges(), &[(0, 2)]);
    }

    #[test]
    fn non_numeric_timestep_names_line() {
        match load("a,b,notanumber\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        match load("a,b,0\na,c,zz\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_source_is_rejected() {
        assert!(matches!(load(""), Err(Error::EmptyDataset)));
        assert!(matches!(load("# only a comment\n"), Err(Error::EmptyDataset)));
    }

    #[test]
    fn reverse_duplicate_collapses() {
        let seq = load("1,2,0\n2,1,0\n").unwrap();
        assert_eq!(seq.snapshots()[0].edges(), &[(0, 1)]);
    }

    #[test]
    fn gaps_are_compacted_with_warning() {
        let seq = load("a,b,3\na,c,7\n").unwrap();
        assert_eq!(seq.total_timesteps(), 2);
        assert_eq!(seq.snapshots()[1].timestep(), 1);
        assert_eq!(seq.warnings.len(), 1);
    }

    #[test]
    fn tab_delimited_with_header_and_labels() {
        let schema = EdgeListSchema {
            has_header: true,
            src: Column::Name("u".into()),
            dst: Column::Name("v".into()),
            timestep: Column::Name("t".into()),
            label: Some(Column::Name("y".into())),
            ..EdgeListSchema::default()
        };
        let text = "u\tv\tt\ty\nx\ty\t0\t1\ny\tz\t0\t0\n";
        let seq = load_temporal_edgelist(text.as_bytes(), &schema, None).unwrap();
        assert_eq!(seq.num_classes(), 2);
        match seq.snapshots()[0].labels() {
            Some(Labels::Edge(v)) => assert_eq!(v, &vec![((0, 1), 1), ((1, 2), 0)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn default_features_are_degree_one_hot() {
        let schema = EdgeListSchema {
            default_feature_dim: 3,
            ..Default::default()
        };
        // hub h has degree 3 -> clipped to index 2; isolated-at-t1 nodes get zero rows
        let text = "h,a,0\nh,b,0\nh,c,0\na,b,1\n";
        let seq = load_temporal_edgelist(text.as_bytes(), &schema, None).unwrap();
        let x0 = seq.snapshots()[0].features();
        assert_eq!(x0.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
        assert_eq!(x0.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
        let x1 = seq.snapshots()[1].features();
        assert_eq!(x1.row(0).iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn feature_file_is_keyed_by_node_id() {
        let mut feats = "b,1.5,2\na,0.5,-1\n".as_bytes();
        let seq = load_temporal_edgelist(
            "a,b,0\n".as_bytes(),
            &EdgeListSchema::default(),
            Some(&mut feats),
        )
        .unwrap();
        let x = seq.snapshots()[0].features();
        assert_eq!(seq.feature_dim(), 2);
        assert_eq!((x[(0, 0)], x[(0, 1)]), (0.5, -1.0));
        assert_eq!((x[(1, 0)], x[(1, 1)]), (1.5, 2.0));
    }

    #[test]
    fn node_labels_attach_by_id() {
        let seq = load("a,b,0\nb,c,1\n").unwrap();
        let seq = attach_node_labels(&seq, "c,2\na,0\n".as_bytes()).unwrap();
        assert_eq!(seq.num_classes(), 3);
        assert_eq!(
            seq.snapshots()[1].labels(),
            Some(&Labels::Node(vec![Some(0), None, Some(2)]))
        );
        assert!(attach_node_labels(&seq, "nope,1\n".as_bytes()).is_err());
    }

    #[test]
    fn propagation_examples() {
        assert_eq!(normalize_propagation(&snap(1, &[])).to_dense()[(0, 0)], 1.0);

        let p = normalize_propagation(&snap(2, &[(0, 1)])).to_dense();
        for v in p.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-15);
        }

        let p = normalize_propagation(&snap(3, &[(0, 1), (1, 2), (0, 2)])).to_dense();
        for v in p.iter() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn propagation_is_exactly_symmetric_and_random_walk_rows_sum_to_one() {
        let s = snap(5, &[(0, 1), (1, 2), (2, 3), (0, 3), (3, 4)]);
        let p = normalize_propagation(&s).to_dense();
        assert_eq!(p, p.transpose());
        // D^{-1/2} P D^{1/2} = D^{-1} Ã
        let deg: Vec<f64> = s.degrees().iter().map(|&d| (d + 1) as f64).collect();
        for i in 0..5 {
            let sum: f64 = (0..5).map(|j| p[(i, j)] * deg[j].sqrt() / deg[i].sqrt()).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn windows() {
        let snaps = (0..5)
            .map(|t| GraphSnapshot::new(t, 2, [], DMatrix::zeros(2, 1), None).unwrap())
            .collect();
        let seq = DynamicGraphSequence::new(snaps, 2, None).unwrap();
        assert_eq!(window(&seq, 0, 5).unwrap().len(), 5);
        assert!(matches!(window(&seq, 3, 3), Err(Error::OutOfRange { .. })));
        let w = window(&seq, 2, 1).unwrap();
        assert_eq!(w.snapshots()[0].timestep(), 2);
        assert!(window(&seq, 0, 0).is_err());
        assert_eq!(windows_in(&seq, 1, 5, 3).unwrap().len(), 2);
        assert!(windows_in(&seq, 3, 5, 3).unwrap().is_empty());
    }

    #[test]
    fn snapshot_validation() {
        assert!(GraphSnapshot::new(0, 2, [(0, 2)], DMatrix::zeros(2, 1), None).is_err());
        assert!(GraphSnapshot::new(0, 2, [], DMatrix::zeros(3, 1), None).is_err());
        let s = GraphSnapshot::new(0, 2, [(1, 1), (0, 1)], DMatrix::zeros(2, 1), None).unwrap();
        assert_eq!(s.edges(), &[(0, 1)]);
    }
}
