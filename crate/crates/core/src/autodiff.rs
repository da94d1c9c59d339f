//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! The tape records exactly the operations the encoder needs. Loss gradients
//! with respect to logits are computed analytically elsewhere and passed to
//! [`Tape::backward`] as seeds.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::Propagator;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    OneMinus(Var),
    Transpose(Var),
    Propagate(Propagator, Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    TopKPool { z: Var, q: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(ctx: &'static str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(ctx, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row order and values of top-k pooling: rows ranked by `Z q / ‖q‖`
/// (descending, ties by row index), each scaled by `tanh(score)`.
pub(crate) fn top_k_rows(z: &DMatrix<f64>, q: &DMatrix<f64>, k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if q.nrows() != z.ncols() || q.ncols() != 1 {
        return Err(Error::dims("summary score vector", format!("({}, 1)", z.ncols()), format!("{:?}", q.shape())));
    }
    let norm = q.norm();
    if norm == 0.0 {
        return Err(Error::Numeric("summary score vector has zero norm".into()));
    }
    let scores: Vec<f64> = (0..z.nrows()).map(|i| z.row(i).dot(&q.transpose()) / norm).collect();
    let mut order: Vec<usize> = (0..z.nrows()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok((order, scores))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or parameter.
    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.nrows() {
            return Err(Error::dims("matmul inner dimension", x.ncols(), y.nrows()));
        }
        let v = x * y;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Entrywise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("hadamard product", self.value(a), self.value(b))?;
        let v = self.value(a).component_mul(self.value(b));
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `a + 1 bᵀ` for a row vector `b`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.nrows() != 1 || r.ncols() != x.ncols() {
            return Err(Error::dims("row broadcast", format!("(1, {})", x.ncols()), format!("{:?}", r.shape())));
        }
        let mut v = x.clone();
        for mut rw in v.row_iter_mut() {
            rw += r;
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// `P · a` for a constant operator `P`.
    pub fn propagate(&mut self, p: &Propagator, a: Var) -> Result<Var> {
        let v = p.apply(self.value(a))?;
        Ok(self.push(v, Op::Propagate(p.clone(), a)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= x.nrows()) {
            return Err(Error::Index {
                context: "gathered row",
                index: bad,
                size: x.nrows(),
            });
        }
        let v = DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)]);
        Ok(self.push(v, Op::GatherRows(a, rows.to_vec())))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.nrows() != y.nrows() {
            return Err(Error::dims("column concatenation rows", x.nrows(), y.nrows()));
        }
        let (n, ca, cb) = (x.nrows(), x.ncols(), y.ncols());
        let v = DMatrix::from_fn(n, ca + cb, |i, j| if j < ca { x[(i, j)] } else { y[(i, j - ca)] });
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    /// Top-k pooling of the rows of `z` with score vector `q` (shape d × 1);
    /// output is `k × d`, zero-padded when `z` has fewer than `k` rows.
    pub fn top_k_pool(&mut self, z: Var, q: Var, k: usize) -> Result<Var> {
        let (rows, scores) = top_k_rows(self.value(z), self.value(q), k)?;
        let x = self.value(z);
        let mut v = DMatrix::zeros(k, x.ncols());
        for (r, &i) in rows.iter().enumerate() {
            let s = scores[i].tanh();
            for j in 0..x.ncols() {
                v[(r, j)] = s * x[(i, j)];
            }
        }
        Ok(self.push(v, Op::TopKPool { z, q, rows }))
    }

    /// Distance of the current point from the nearest non-differentiable
    /// point: ReLU inputs at zero and ties in the top-k ranking.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for x in self.value(*a).iter() {
                        m = m.min(x.abs());
                    }
                }
                Op::TopKPool { z, q, rows } => {
                    let zv = self.value(*z);
                    if let Ok((_, scores)) = top_k_rows(zv, self.value(*q), zv.nrows()) {
                        let mut sorted = scores.clone();
                        sorted.sort_by(|a, b| b.total_cmp(a));
                        let upto = (rows.len() + 1).min(sorted.len());
                        for w in sorted[..upto].windows(2) {
                            m = m.min(w[0] - w[1]);
                        }
                    }
                }
                _ => {}
            }
        }
        m
    }

    /// Back-propagates the given output gradients; returns one gradient slot
    /// per recorded value (`None` where nothing flowed).
    pub fn backward(&self, seeds: &[(Var, DMatrix<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            check_same("gradient seed", self.value(*v), g)?;
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = &g * self.value(*b).transpose();
                    let gb = self.value(*a).transpose() * &g;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.component_mul(self.value(*b));
                    let gb = g.component_mul(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let gr = DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *r, gr);
                }
                Op::Sigmoid(a) => {
                    let s = &node.value;
                    let ga = g.zip_map(s, |gi, si| gi * si * (1.0 - si));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let t = &node.value;
                    let ga = g.zip_map(t, |gi, ti| gi * (1.0 - ti * ti));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::OneMinus(a) => accumulate(&mut grads, *a, -g.clone()),
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Propagate(p, a) => {
                    let ga = p.apply_transpose(&g)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let x = self.value(*a);
                    let mut ga = DMatrix::zeros(x.nrows(), x.ncols());
                    for (r, &i) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(i);
                        dst += g.row(r);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    let ga = g.columns(0, ca).into_owned();
                    let gb = g.columns(ca, g.ncols() - ca).into_owned();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::TopKPool { z, q, rows } => {
                    let zv = self.value(*z);
                    let qv = self.value(*q);
                    let norm = qv.norm();
                    let qhat = qv / norm;
                    let mut gz = DMatrix::zeros(zv.nrows(), zv.ncols());
                    let mut gq = DMatrix::zeros(qv.nrows(), 1);
                    for (r, &i) in rows.iter().enumerate() {
                        let zi = zv.row(i).transpose();
                        let s = zi.dot(&qhat);
                        let t = s.tanh();
                        let gr = g.row(r).transpose();
                        // d/ds of tanh(s) * z_i, contracted with the upstream row
                        let ds = (1.0 - t * t) * gr.dot(&zi);
                        let row_grad = &gr * t + &qhat * ds;
                        let mut dst = gz.row_mut(i);
                        dst += row_grad.transpose();
                        // s = z·q/‖q‖ → ds/dq = z/‖q‖ − s q/‖q‖²
                        gq += (&zi - &qhat * s) * (ds / norm);
                    }
                    accumulate(&mut grads, *z, gz);
                    accumulate(&mut grads, *q, gq);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients(grads))
    }
}

fn accumulate(grads: &mut [Option<DMatrix<f64>>], v: Var, g: DMatrix<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += g,
        slot => *slot = Some(g),
    }
}

/// Gradients of leaves after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<DMatrix<f64>>>);

impl Gradients {
    /// Gradient for a leaf, or zeros of the leaf's shape when none flowed.
    pub fn of(&self, tape: &Tape, v: Var) -> DMatrix<f64> {
        self.0[v.0].clone().unwrap_or_else(|| {
            let x = tape.value(v);
            DMatrix::zeros(x.nrows(), x.ncols())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` around `x`.
    fn numeric_grad(x: &DMatrix<f64>, h: f64, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(x.nrows(), x.ncols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-12)
    }

    /// Builds a small graph exercising every op and returns sum(weights ⊙ out).
    fn build(tape: &mut Tape, x: &DMatrix<f64>, q: &DMatrix<f64>, w: &DMatrix<f64>, p: &Propagator, probe: &DMatrix<f64>) -> (Var, Var, Var, Var) {
        let xv = tape.leaf(x.clone());
        let qv = tape.leaf(q.clone());
        let wv = tape.leaf(w.clone());
        let pooled = tape.top_k_pool(xv, qv, 2).unwrap(); // 2 × 3
        let pt = tape.transpose(pooled); // 3 × 2
        let gate = tape.sigmoid(pt);
        let cand = tape.tanh(wv);
        let inv = tape.one_minus(gate);
        let a = tape.mul(inv, wv).unwrap();
        let b = tape.mul(gate, cand).unwrap();
        let wn = tape.add(a, b).unwrap(); // 3 × 2
        let px = tape.propagate(p, xv).unwrap(); // 4 × 3
        let h = tape.matmul(px, wn).unwrap(); // 4 × 2
        let h = tape.relu(h);
        let g = tape.gather_rows(h, &[1, 3, 1]).unwrap();
        let g2 = tape.gather_rows(h, &[0, 2, 2]).unwrap();
        let cat = tape.concat_cols(g, g2).unwrap(); // 3 × 4
        let bias = tape.leaf(DMatrix::from_row_slice(1, 4, &[0.1, -0.2, 0.3, 0.05]));
        let out = tape.add_row(cat, bias).unwrap();
        assert_eq!(tape.value(out).shape(), probe.shape());
        (xv, qv, wv, out)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p: Propagator = rand_mat(&mut rng, 4, 4).into();
        let x = rand_mat(&mut rng, 4, 3);
        let q = rand_mat(&mut rng, 3, 1);
        let w = rand_mat(&mut rng, 3, 2);
        let probe = rand_mat(&mut rng, 3, 4);
        let eval = |x: &DMatrix<f64>, q: &DMatrix<f64>, w: &DMatrix<f64>| {
            let mut t = Tape::new();
            let (_, _, _, out) = build(&mut t, x, q, w, &p, &probe);
            t.value(out).component_mul(&probe).sum()
        };
        let mut tape = Tape::new();
        let (xv, qv, wv, out) = build(&mut tape, &x, &q, &w, &p, &probe);
        assert!(tape.kink_margin() > 1e-4, "unlucky draw: {}", tape.kink_margin());
        let grads = tape.backward(&[(out, probe.clone())]).unwrap();
        let h = 1e-6;
        let nx = numeric_grad(&x, h, |v| eval(v, &q, &w));
        let nq = numeric_grad(&q, h, |v| eval(&x, v, &w));
        let nw = numeric_grad(&w, h, |v| eval(&x, &q, v));
        assert!(rel_err(&grads.of(&tape, xv), &nx) < 1e-6);
        assert!(rel_err(&grads.of(&tape, qv), &nq) < 1e-6);
        assert!(rel_err(&grads.of(&tape, wv), &nw) < 1e-6);
    }

    #[test]
    fn top_k_pads_and_orders() {
        let mut t = Tape::new();
        let z = t.leaf(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 1.0]));
        let q = t.leaf(DMatrix::from_column_slice(2, 1, &[2.0, 0.0]));
        let out = t.top_k_pool(z, q, 3).unwrap();
        let v = t.value(out);
        assert_eq!(v.shape(), (3, 2));
        assert!((v[(0, 0)] - 3.0 * 3f64.tanh()).abs() < 1e-15);
        assert!((v[(1, 0)] - 1f64.tanh()).abs() < 1e-15);
        assert_eq!(v.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.leaf(DMatrix::zeros(2, 3));
        let b = t.leaf(DMatrix::zeros(2, 3));
        assert!(t.matmul(a, b).is_err());
        assert!(t.gather_rows(a, &[2]).is_err());
        let c = t.leaf(DMatrix::zeros(3, 1));
        assert!(t.add(a, c).is_err());
    }
}
