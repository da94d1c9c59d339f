//! Evolving-weight GCN encoder and task heads.
//!
//! Each layer's weight matrix is the hidden state of a matrix GRU. At every
//! timestep the layer input `Z` is summarized by top-k pooling (`k = d_out`)
//! into `X = summaryᵀ` (shape `d_in × d_out`), then
//!
//! ```text
//! z  = σ(W_z X + U_z H + B_z)
//! r  = σ(W_r X + U_r H + B_r)
//! H̃  = tanh(W_h X + U_h (r ⊙ H) + B_h)
//! W' = (1 − z) ⊙ H + z ⊙ H̃
//! ```
//!
//! and the layer output is `σ(P Z W')`.
//!
//! Two forward implementations exist: plain matrix code used for scoring and
//! a [`Tape`] version used for training. Tests keep them in agreement.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{top_k_rows, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{normalize_propagation, Propagator, SnapshotWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, m: DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Relu => m.map(|x| x.max(0.0)),
            Activation::Identity => m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    #[default]
    NodeClassification,
    EdgeClassification,
    LinkPrediction,
}

/// How two endpoint embeddings become one head input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairRule {
    /// `[z_i, z_j]`
    #[default]
    Concat,
    /// `[z_i + z_j, z_i ⊙ z_j]`, invariant to endpoint order.
    Symmetric,
}

/// What the head scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Targets {
    Nodes(Vec<usize>),
    Pairs(Vec<(usize, usize)>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Nodes(v) => v.len(),
            Targets::Pairs(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Output width of each layer; the last entry is the embedding size.
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default)]
    pub pair_rule: PairRule,
}

impl ModelConfig {
    pub fn embedding_dim(&self) -> usize {
        *self.hidden_dims.last().unwrap_or(&self.input_dim)
    }

    pub fn head_input_dim(&self) -> usize {
        match self.head {
            HeadKind::NodeClassification => self.embedding_dim(),
            _ => 2 * self.embedding_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.head == HeadKind::LinkPrediction && self.num_classes != 2 {
            return Err(Error::Config("link prediction uses exactly two classes".into()));
        }
        Ok(())
    }

    /// `(d_in, d_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut prev = self.input_dim;
        self.hidden_dims
            .iter()
            .map(|&d| {
                let pair = (prev, d);
                prev = d;
                pair
            })
            .collect()
    }
}

/// One gate: `W` and `U` are `d_in × d_in`, `B` is `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate<T = DMatrix<f64>> {
    pub w: T,
    pub u: T,
    pub b: T,
}

/// Gate parameters plus the pooling score vector `q` (`d_in × 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentCell<T = DMatrix<f64>> {
    pub update: Gate<T>,
    pub reset: Gate<T>,
    pub candidate: Gate<T>,
    pub q: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = DMatrix<f64>> {
    /// Initial weights `W_0`, `d_in × d_out`.
    pub w0: T,
    pub cell: RecurrentCell<T>,
}

/// Linear head `E·weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = DMatrix<f64>> {
    pub weight: T,
    pub bias: T,
}

/// All trainable tensors. Instantiated with matrices for values and
/// gradients, and with [`Var`] while recording on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T = DMatrix<f64>> {
    pub layers: Vec<LayerParams<T>>,
    pub head: HeadParams<T>,
}

impl<T> Gate<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Gate<U> {
        Gate {
            w: f(&self.w),
            u: f(&self.u),
            b: f(&self.b),
        }
    }
}

impl<T> Params<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Params<U> {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w0: f(&l.w0),
                    cell: RecurrentCell {
                        update: l.cell.update.map(&mut f),
                        reset: l.cell.reset.map(&mut f),
                        candidate: l.cell.candidate.map(&mut f),
                        q: f(&l.cell.q),
                    },
                })
                .collect(),
            head: HeadParams {
                weight: f(&self.head.weight),
                bias: f(&self.head.bias),
            },
        }
    }

    /// Named tensors in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w0"), &l.w0));
            for (g, gate) in [("update", &l.cell.update), ("reset", &l.cell.reset), ("candidate", &l.cell.candidate)] {
                out.push((format!("layer{i}.{g}.w"), &gate.w));
                out.push((format!("layer{i}.{g}.u"), &gate.u));
                out.push((format!("layer{i}.{g}.b"), &gate.b));
            }
            out.push((format!("layer{i}.q"), &l.cell.q));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Same order as [`Params::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w0);
            let c = &mut l.cell;
            for gate in [&mut c.update, &mut c.reset, &mut c.candidate] {
                out.push(&mut gate.w);
                out.push(&mut gate.u);
                out.push(&mut gate.b);
            }
            out.push(&mut c.q);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

impl Params {
    /// Uniform `(−1/√fan_in, 1/√fan_in)` for every tensor except the head
    /// bias, which starts at zero.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut uni = |r: usize, c: usize, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            DMatrix::from_fn(r, c, |_, _| rng.random_range(-a..a))
        };
        let mut layers = Vec::new();
        for (din, dout) in config.layer_dims() {
            let mut gate = || Gate {
                w: uni(din, din, din),
                u: uni(din, din, din),
                b: uni(din, dout, din),
            };
            let (update, reset, candidate) = (gate(), gate(), gate());
            layers.push(LayerParams {
                w0: uni(din, dout, din),
                cell: RecurrentCell {
                    update,
                    reset,
                    candidate,
                    q: uni(din, 1, din),
                },
            });
        }
        let hin = config.head_input_dim();
        let head = HeadParams {
            weight: uni(hin, config.num_classes, hin),
            bias: DMatrix::zeros(1, config.num_classes),
        };
        Ok(Params { layers, head })
    }

    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(Self::init(config, &mut rng)?.zeros_like())
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let dims = config.layer_dims();
        if self.layers.len() != dims.len() {
            return Err(Error::dims("encoder layers", dims.len(), self.layers.len()));
        }
        let expect = |ctx: &'static str, m: &DMatrix<f64>, r: usize, c: usize| {
            if m.shape() != (r, c) {
                Err(Error::dims(ctx, format!("({r}, {c})"), format!("{:?}", m.shape())))
            } else {
                Ok(())
            }
        };
        for (l, &(din, dout)) in self.layers.iter().zip(&dims) {
            expect("initial weights", &l.w0, din, dout)?;
            for g in [&l.cell.update, &l.cell.reset, &l.cell.candidate] {
                expect("gate input weights", &g.w, din, din)?;
                expect("gate hidden weights", &g.u, din, din)?;
                expect("gate bias", &g.b, din, dout)?;
            }
            expect("summary score vector", &l.cell.q, din, 1)?;
        }
        expect("head weight", &self.head.weight, config.head_input_dim(), config.num_classes)?;
        expect("head bias", &self.head.bias, 1, config.num_classes)
    }
}

/// Model configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = Params::init(&config, rng)?;
        Ok(Self { config, params })
    }
}

/// `σ(P · Z · W)`.
pub fn gcn_layer(p: &Propagator, z: &DMatrix<f64>, w: &DMatrix<f64>, act: Activation) -> Result<DMatrix<f64>> {
    if z.ncols() != w.nrows() {
        return Err(Error::dims("gcn layer input width", w.nrows(), z.ncols()));
    }
    Ok(act.apply(p.apply(z)? * w))
}

/// Top-k pooling of the rows of `z`: `k × d_in`, zero rows appended when
/// `N < k`.
pub fn summarize_embeddings(z: &DMatrix<f64>, q: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let (rows, scores) = top_k_rows(z, q, k)?;
    let mut out = DMatrix::zeros(k, z.ncols());
    for (r, &i) in rows.iter().enumerate() {
        let s = scores[i].tanh();
        for j in 0..z.ncols() {
            out[(r, j)] = s * z[(i, j)];
        }
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gate_pre(g: &Gate, x: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if g.w.shape() != (x.nrows(), x.nrows()) || g.u.shape() != (h.nrows(), h.nrows()) || g.b.shape() != h.shape() {
        return Err(Error::dims(
            "gate parameters",
            format!("{0}x{0}, {0}x{0}, {0}x{1}", h.nrows(), h.ncols()),
            format!("{:?}, {:?}, {:?}", g.w.shape(), g.u.shape(), g.b.shape()),
        ));
    }
    Ok(&g.w * x + &g.u * h + &g.b)
}

/// One GRU step on the weight matrix `w_prev` driven by layer input `z_prev`.
pub fn evolve_weights(z_prev: &DMatrix<f64>, w_prev: &DMatrix<f64>, cell: &RecurrentCell) -> Result<DMatrix<f64>> {
    if z_prev.ncols() != w_prev.nrows() {
        return Err(Error::dims("evolving layer input width", w_prev.nrows(), z_prev.ncols()));
    }
    let x = summarize_embeddings(z_prev, &cell.q, w_prev.ncols())?.transpose();
    let z = gate_pre(&cell.update, &x, w_prev)?.map(sigmoid);
    let r = gate_pre(&cell.reset, &x, w_prev)?.map(sigmoid);
    let rh = r.component_mul(w_prev);
    let cand = gate_pre(&cell.candidate, &x, &rh)?.map(f64::tanh);
    Ok(z.map(|v| 1.0 - v).component_mul(w_prev) + z.component_mul(&cand))
}

/// Per-timestep inputs of a window: a propagation operator and features.
#[derive(Debug, Clone)]
pub struct WindowInput<'a> {
    pub propagators: Vec<Propagator>,
    pub features: Vec<&'a DMatrix<f64>>,
}

impl<'a> WindowInput<'a> {
    /// The window's own normalized adjacencies.
    pub fn from_window(window: &SnapshotWindow<'a>) -> Self {
        let snaps = window.snapshots();
        Self {
            propagators: snaps.iter().map(|s| Propagator::from(normalize_propagation(s))).collect(),
            features: snaps.iter().map(|s| s.features()).collect(),
        }
    }

    /// The window's features with substitute operators (e.g. spectral negatives).
    pub fn with_propagators(window: &SnapshotWindow<'a>, propagators: Vec<Propagator>) -> Result<Self> {
        if propagators.len() != window.len() {
            return Err(Error::dims("negative window length", window.len(), propagators.len()));
        }
        Ok(Self {
            propagators,
            features: window.snapshots().iter().map(|s| s.features()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.propagators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.propagators.is_empty()
    }
}

/// Activations after the last timestep of a window.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingState {
    /// `Z^{(1)} .. Z^{(L)}` at the final timestep.
    pub layers: Vec<DMatrix<f64>>,
    /// Evolved weights after the final timestep.
    pub weights: Vec<DMatrix<f64>>,
    /// Number of weight-set advances performed.
    pub evolutions: usize,
}

impl EmbeddingState {
    pub fn embedding(&self) -> &DMatrix<f64> {
        self.layers.last().expect("at least one layer")
    }
}

fn layer_activation(l: usize, depth: usize) -> Activation {
    if l + 1 == depth {
        Activation::Identity
    } else {
        Activation::Relu
    }
}

/// Runs the encoder over every timestep of `input`, starting from `W_0`.
pub fn encode(input: &WindowInput<'_>, params: &Params) -> Result<EmbeddingState> {
    if input.is_empty() {
        return Err(Error::validation("cannot encode an empty window"));
    }
    let depth = params.layers.len();
    let mut weights: Vec<DMatrix<f64>> = params.layers.iter().map(|l| l.w0.clone()).collect();
    let mut layers = Vec::new();
    let mut evolutions = 0;
    for (p, x) in input.propagators.iter().zip(&input.features) {
        layers.clear();
        let mut z = (*x).clone();
        for (l, lp) in params.layers.iter().enumerate() {
            weights[l] = evolve_weights(&z, &weights[l], &lp.cell)?;
            z = gcn_layer(p, &z, &weights[l], layer_activation(l, depth))?;
            layers.push(z.clone());
        }
        evolutions += 1;
    }
    Ok(EmbeddingState {
        layers,
        weights,
        evolutions,
    })
}

/// [`encode`] on a window's own graphs.
pub fn encode_window(window: &SnapshotWindow<'_>, params: &Params) -> Result<EmbeddingState> {
    encode(&WindowInput::from_window(window), params)
}

fn check_targets(targets: &Targets, kind: HeadKind, n: usize) -> Result<()> {
    let bad = |i: usize| Error::Index {
        context: "head target node",
        index: i,
        size: n,
    };
    match (targets, kind) {
        (Targets::Nodes(v), HeadKind::NodeClassification) => match v.iter().find(|&&i| i >= n) {
            Some(&i) => Err(bad(i)),
            None => Ok(()),
        },
        (Targets::Pairs(v), HeadKind::EdgeClassification | HeadKind::LinkPrediction) => {
            match v.iter().flat_map(|&(a, b)| [a, b]).find(|&i| i >= n) {
                Some(i) => Err(bad(i)),
                None => Ok(()),
            }
        }
        _ => Err(Error::validation(format!("targets do not match head kind {kind:?}"))),
    }
}

fn head_input(emb: &DMatrix<f64>, targets: &Targets, rule: PairRule) -> DMatrix<f64> {
    let d = emb.ncols();
    match targets {
        Targets::Nodes(v) => DMatrix::from_fn(v.len(), d, |r, j| emb[(v[r], j)]),
        Targets::Pairs(v) => DMatrix::from_fn(v.len(), 2 * d, |r, j| {
            let (a, b) = v[r];
            match (rule, j < d) {
                (PairRule::Concat, true) => emb[(a, j)],
                (PairRule::Concat, false) => emb[(b, j - d)],
                (PairRule::Symmetric, true) => emb[(a, j)] + emb[(b, j)],
                (PairRule::Symmetric, false) => emb[(a, j - d)] * emb[(b, j - d)],
            }
        }),
    }
}

/// Logits (`M × K`) for the given targets.
pub fn apply_head(
    emb: &DMatrix<f64>,
    head: &HeadParams,
    kind: HeadKind,
    rule: PairRule,
    targets: &Targets,
) -> Result<DMatrix<f64>> {
    check_targets(targets, kind, emb.nrows())?;
    let e = head_input(emb, targets, rule);
    if e.ncols() != head.weight.nrows() {
        return Err(Error::dims("head input width", head.weight.nrows(), e.ncols()));
    }
    let mut out = e * &head.weight;
    for mut row in out.row_iter_mut() {
        row += &head.bias;
    }
    Ok(out)
}

/// Full forward pass: encode then score `targets`.
pub fn forward(model: &Model, input: &WindowInput<'_>, targets: &Targets) -> Result<DMatrix<f64>> {
    let state = encode(input, &model.params)?;
    apply_head(state.embedding(), &model.params.head, model.config.head, model.config.pair_rule, targets)
}

/// Parameters recorded as tape leaves.
pub type ParamVars = Params<Var>;

impl ParamVars {
    pub fn record(tape: &mut Tape, params: &Params) -> Self {
        params.map(|m| tape.leaf(m.clone()))
    }

    /// Collects leaf gradients into a parameter-shaped structure.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> Params {
        self.map(|&v| grads.of(tape, v))
    }
}

fn gate_on_tape(tape: &mut Tape, g: &Gate<Var>, x: Var, h: Var) -> Result<Var> {
    let a = tape.matmul(g.w, x)?;
    let b = tape.matmul(g.u, h)?;
    let s = tape.add(a, b)?;
    tape.add(s, g.b)
}

fn evolve_on_tape(tape: &mut Tape, z_prev: Var, w_prev: Var, cell: &RecurrentCell<Var>) -> Result<Var> {
    let k = tape.value(w_prev).ncols();
    let pooled = tape.top_k_pool(z_prev, cell.q, k)?;
    let x = tape.transpose(pooled);
    let zp = gate_on_tape(tape, &cell.update, x, w_prev)?;
    let z = tape.sigmoid(zp);
    let rp = gate_on_tape(tape, &cell.reset, x, w_prev)?;
    let r = tape.sigmoid(rp);
    let rh = tape.mul(r, w_prev)?;
    let cp = gate_on_tape(tape, &cell.candidate, x, rh)?;
    let cand = tape.tanh(cp);
    let keep = tape.one_minus(z);
    let a = tape.mul(keep, w_prev)?;
    let b = tape.mul(z, cand)?;
    tape.add(a, b)
}

/// Records encoder and head on `tape`; returns the logits variable.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    config: &ModelConfig,
    input: &WindowInput<'_>,
    targets: &Targets,
) -> Result<Var> {
    if input.is_empty() {
        return Err(Error::validation("cannot encode an empty window"));
    }
    let depth = vars.layers.len();
    let mut weights: Vec<Var> = vars.layers.iter().map(|l| l.w0).collect();
    let mut z = None;
    for (p, x) in input.propagators.iter().zip(&input.features) {
        let mut cur = tape.leaf((*x).clone());
        for (l, lv) in vars.layers.iter().enumerate() {
            if tape.value(cur).ncols() != tape.value(weights[l]).nrows() {
                return Err(Error::dims(
                    "evolving layer input width",
                    tape.value(weights[l]).nrows(),
                    tape.value(cur).ncols(),
                ));
            }
            weights[l] = evolve_on_tape(tape, cur, weights[l], &lv.cell)?;
            let pz = tape.propagate(p, cur)?;
            let pre = tape.matmul(pz, weights[l])?;
            cur = match layer_activation(l, depth) {
                Activation::Relu => tape.relu(pre),
                Activation::Identity => pre,
            };
        }
        z = Some(cur);
    }
    let emb = z.expect("non-empty window");
    check_targets(targets, config.head, tape.value(emb).nrows())?;
    let e = match targets {
        Targets::Nodes(v) => tape.gather_rows(emb, v)?,
        Targets::Pairs(v) => {
            let (a, b): (Vec<usize>, Vec<usize>) = v.iter().copied().unzip();
            let ea = tape.gather_rows(emb, &a)?;
            let eb = tape.gather_rows(emb, &b)?;
            match config.pair_rule {
                PairRule::Concat => tape.concat_cols(ea, eb)?,
                PairRule::Symmetric => {
                    let s = tape.add(ea, eb)?;
                    let m = tape.mul(ea, eb)?;
                    tape.concat_cols(s, m)?
                }
            }
        }
    };
    let lin = tape.matmul(e, vars.head.weight)?;
    tape.add_row(lin, vars.head.bias)
}
