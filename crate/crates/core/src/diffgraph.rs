//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! A [`Tape`] borrows constants and parameter values, records every
//! operation in evaluation order, and can be traversed backwards from any
//! scalar node. Running one traversal per loss term gives exact per-term
//! gradients from a single forward pass, which is what the trainer needs to
//! rescale only the distillation gradient of the shared up-projections.

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::Projection;
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, sigmoid, softmax_unchecked, softplus, Matrix};

/// Identifies a trainable (or potentially trainable) tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKey {
    SharedUp { block: usize, proj: Projection },
    SharedDown { block: usize, proj: Projection },
    SpecificUp { task: usize, block: usize, proj: Projection },
    SpecificDown { task: usize, block: usize, proj: Projection },
    BlockWeight { task: usize },
    HeadWeight,
    HeadBias,
    Backbone { index: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamTag {
    SharedUp,
    SharedDown,
    SpecificUp,
    SpecificDown,
    BlockWeight,
    Head,
    Backbone,
}

impl ParamKey {
    pub fn tag(&self) -> ParamTag {
        match self {
            ParamKey::SharedUp { .. } => ParamTag::SharedUp,
            ParamKey::SharedDown { .. } => ParamTag::SharedDown,
            ParamKey::SpecificUp { .. } => ParamTag::SpecificUp,
            ParamKey::SpecificDown { .. } => ParamTag::SpecificDown,
            ParamKey::BlockWeight { .. } => ParamTag::BlockWeight,
            ParamKey::HeadWeight | ParamKey::HeadBias => ParamTag::Head,
            ParamKey::Backbone { .. } => ParamTag::Backbone,
        }
    }
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamKey::SharedUp { block, proj } => write!(f, "shared_up[{block}.{proj}]"),
            ParamKey::SharedDown { block, proj } => write!(f, "shared_down[{block}.{proj}]"),
            ParamKey::SpecificUp { task, block, proj } => {
                write!(f, "specific_up[t{task}.{block}.{proj}]")
            }
            ParamKey::SpecificDown { task, block, proj } => {
                write!(f, "specific_down[t{task}.{block}.{proj}]")
            }
            ParamKey::BlockWeight { task } => write!(f, "block_weight[t{task}]"),
            ParamKey::HeadWeight => write!(f, "head_weight"),
            ParamKey::HeadBias => write!(f, "head_bias"),
            ParamKey::Backbone { index } => write!(f, "backbone[{index}]"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub key: ParamKey,
    pub value: Matrix,
    pub trainable: bool,
}

impl Parameter {
    /// Backbone tensors can never be trainable.
    pub fn new(key: ParamKey, value: Matrix, trainable: bool) -> Result<Self> {
        if trainable && key.tag() == ParamTag::Backbone {
            return Err(Error::InvalidParameter(format!("{key} is frozen")));
        }
        Ok(Self {
            key,
            value,
            trainable,
        })
    }

    pub fn tag(&self) -> ParamTag {
        self.key.tag()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Ce,
    Kd,
    Orth,
}

impl LossTerm {
    pub const ALL: [LossTerm; 3] = [LossTerm::Ce, LossTerm::Kd, LossTerm::Orth];

    fn index(self) -> usize {
        self as usize
    }
}

pub type Gradients = BTreeMap<ParamKey, Matrix>;

/// Per-parameter gradients kept separate per loss term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientBundle {
    terms: [Gradients; 3],
}

impl GradientBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn term(&self, term: LossTerm) -> &Gradients {
        &self.terms[term.index()]
    }

    pub fn term_mut(&mut self, term: LossTerm) -> &mut Gradients {
        &mut self.terms[term.index()]
    }

    pub fn get(&self, term: LossTerm, key: &ParamKey) -> Option<&Matrix> {
        self.terms[term.index()].get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.terms[0].keys()
    }

    /// Accumulates `other` into `self`, entrywise per term.
    pub fn accumulate(&mut self, other: &GradientBundle) -> Result<()> {
        for (mine, theirs) in self.terms.iter_mut().zip(&other.terms) {
            for (key, g) in theirs {
                match mine.get_mut(key) {
                    Some(acc) => acc.add_assign(g)?,
                    None => {
                        mine.insert(*key, g.clone());
                    }
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for term in &mut self.terms {
            for g in term.values_mut() {
                *g = g.scale(alpha);
            }
        }
    }

    /// `ce + λ₁·kd + λ₂·orth` for every parameter.
    pub fn combined(&self, lambda_kd: f64, lambda_orth: f64) -> Result<Gradients> {
        let mut out = Gradients::new();
        for (key, ce) in self.term(LossTerm::Ce) {
            let mut g = ce.clone();
            if let Some(kd) = self.get(LossTerm::Kd, key) {
                g.axpy(lambda_kd, kd)?;
            }
            if let Some(orth) = self.get(LossTerm::Orth, key) {
                g.axpy(lambda_orth, orth)?;
            }
            out.insert(*key, g);
        }
        Ok(out)
    }

    /// Makes every term carry an entry for every key in `shapes`, filling
    /// missing ones with zeros.
    pub fn fill_missing(&mut self, shapes: &BTreeMap<ParamKey, (usize, usize)>) {
        for term in &mut self.terms {
            for (key, &(r, c)) in shapes {
                term.entry(*key).or_insert_with(|| Matrix::zeros(r, c));
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Constant,
    Param(ParamKey),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleByEntry {
        x: Var,
        weights: Var,
        index: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Vec<f64>,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    Cols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Row {
        x: Var,
        index: usize,
    },
    Softplus(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Vec<f64>,
        tau: f64,
        probs: Vec<f64>,
    },
    AbsDotSum {
        x: Var,
        others: Vec<Vec<f64>>,
        signs: Vec<f64>,
    },
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Recorded computation. Single-owner; build one per sample.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, m: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(m), Op::Constant, false)
    }

    pub fn constant_owned(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Constant, false)
    }

    /// Leaf whose gradient is reported under `key`.
    pub fn param(&mut self, key: ParamKey, m: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(m), Op::Param(key), true)
    }

    /// Parameter leaf when `trainable`, plain constant otherwise.
    pub fn leaf(&mut self, key: ParamKey, m: &'a Matrix, trainable: bool) -> Var {
        if trainable {
            self.param(key, m)
        } else {
            self.constant(m)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Cow::Owned(value), Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Cow::Owned(value), Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Cow::Owned(value), Op::Add(a, b), ng))
    }

    /// `a + 1·row`, broadcasting a `1 × cols` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        if self.shape(row) != (1, ac) {
            return Err(Error::Shape {
                op: "add_row",
                left: (ar, ac),
                right: self.shape(row),
            });
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for r in 0..ar {
            for (v, b) in value.row_mut(r).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let ng = self.needs_grad(a) || self.needs_grad(row);
        Ok(self.push(Cow::Owned(value), Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let value = self.value(a).scale(alpha);
        let ng = self.needs_grad(a);
        self.push(Cow::Owned(value), Op::Scale(a, alpha), ng)
    }

    /// `weights[0, index] · x`.
    pub fn scale_by_entry(&mut self, x: Var, weights: Var, index: usize) -> Result<Var> {
        let w = self.value(weights);
        if w.rows() != 1 || index >= w.cols() {
            return Err(Error::Range {
                what: "scale index",
                index,
                range: format!("row vector of shape {:?}", w.shape()),
            });
        }
        let alpha = w.data()[index];
        let value = self.value(x).scale(alpha);
        let ng = self.needs_grad(x) || self.needs_grad(weights);
        Ok(self.push(
            Cow::Owned(value),
            Op::ScaleByEntry { x, weights, index },
            ng,
        ))
    }

    /// Row-wise layer normalization with a fixed affine transform.
    pub fn layer_norm(&mut self, x: Var, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if gamma.len() != cols || beta.len() != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                left: (rows, cols),
                right: (1, gamma.len()),
            });
        }
        let input = self.value(x);
        let mut normalized = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let n = (row[c] - mean) * inv;
                normalized.set(r, c, n);
                out.set(r, c, gamma[c] * n + beta[c]);
            }
        }
        let ng = self.needs_grad(x);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma: gamma.to_vec(),
                normalized,
                inv_std,
            },
            ng,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let ng = self.needs_grad(x);
        self.push(Cow::Owned(value), Op::Gelu(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let mut out = Matrix::zeros(input.rows(), input.cols());
        for r in 0..input.rows() {
            out.row_mut(r)
                .copy_from_slice(&softmax_unchecked(input.row(r), 1.0));
        }
        let ng = self.needs_grad(x);
        self.push(Cow::Owned(out), Op::SoftmaxRows(x), ng)
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let input = self.value(x);
        if len == 0 || start + len > input.cols() {
            return Err(Error::Range {
                what: "column slice end",
                index: start + len,
                range: format!("1..={}", input.cols()),
            });
        }
        let mut out = Matrix::zeros(input.rows(), len);
        for r in 0..input.rows() {
            out.row_mut(r)
                .copy_from_slice(&input.row(r)[start..start + len]);
        }
        let ng = self.needs_grad(x);
        Ok(self.push(Cow::Owned(out), Op::Cols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.shape(*p).0)
            .ok_or_else(|| Error::InvalidInput("concat of zero parts".into()))?;
        for p in parts {
            if self.shape(*p).0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]),
                    right: self.shape(*p),
                });
            }
        }
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let ng = parts.iter().any(|p| self.needs_grad(*p));
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let input = self.value(x);
        if index >= input.rows() {
            return Err(Error::Range {
                what: "row",
                index,
                range: format!("0..{}", input.rows()),
            });
        }
        let out = Matrix::row_vector(input.row(index).to_vec());
        let ng = self.needs_grad(x);
        Ok(self.push(Cow::Owned(out), Op::Row { x, index }, ng))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        let ng = self.needs_grad(x);
        self.push(Cow::Owned(value), Op::Softplus(x), ng)
    }

    /// `−log softmax(logits)[label]` for a `1 × C` logit row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != 1 {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: z.shape(),
                right: (1, z.cols()),
            });
        }
        if label >= z.cols() {
            return Err(Error::Label {
                label,
                classes: z.cols(),
            });
        }
        let probs = softmax_unchecked(z.data(), 1.0);
        let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z.data()[label];
        let ng = self.needs_grad(logits);
        Ok(self.push(
            Cow::Owned(Matrix::filled(1, 1, loss)),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            ng,
        ))
    }

    /// `−Σ target_i · log softmax(logits / τ)_i`; `target` is a constant.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Vec<f64>, tau: f64) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != 1 || target.len() != z.cols() {
            return Err(Error::Shape {
                op: "soft_cross_entropy",
                left: z.shape(),
                right: (1, target.len()),
            });
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let probs = softmax_unchecked(z.data(), tau);
        let scaled: Vec<f64> = z.data().iter().map(|v| v / tau).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss: f64 = target
            .iter()
            .zip(&scaled)
            .map(|(t, s)| -t * (s - lse))
            .sum();
        let ng = self.needs_grad(logits);
        Ok(self.push(
            Cow::Owned(Matrix::filled(1, 1, loss)),
            Op::SoftCrossEntropy {
                logits,
                target,
                tau,
                probs,
            },
            ng,
        ))
    }

    /// `Σ_i |⟨x, others_i⟩|` for a `1 × m` row `x`; `others` are constants.
    pub fn abs_dot_sum(&mut self, x: Var, others: Vec<Vec<f64>>) -> Result<Var> {
        let u = self.value(x);
        if u.rows() != 1 {
            return Err(Error::Shape {
                op: "abs_dot_sum",
                left: u.shape(),
                right: (1, u.cols()),
            });
        }
        let mut total = 0.0;
        let mut signs = Vec::with_capacity(others.len());
        for o in &others {
            if o.len() != u.cols() {
                return Err(Error::Shape {
                    op: "abs_dot_sum",
                    left: u.shape(),
                    right: (1, o.len()),
                });
            }
            let dot: f64 = u.data().iter().zip(o).map(|(a, b)| a * b).sum();
            total += dot.abs();
            signs.push(if dot > 0.0 {
                1.0
            } else if dot < 0.0 {
                -1.0
            } else {
                0.0
            });
        }
        let ng = self.needs_grad(x);
        Ok(self.push(
            Cow::Owned(Matrix::filled(1, 1, total)),
            Op::AbsDotSum { x, others, signs },
            ng,
        ))
    }

    /// Parameter leaves recorded on this tape with their shapes.
    pub fn parameters(&self) -> BTreeMap<ParamKey, (usize, usize)> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(key) => Some((key, n.value.shape())),
                _ => None,
            })
            .collect()
    }

    /// Gradient of the scalar at `root` with respect to every parameter leaf
    /// that `root` depends on. Parameters `root` does not reach are absent.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Internal(format!(
                "root node {} not on tape of {} nodes",
                root.0,
                self.nodes.len()
            )));
        }
        if self.shape(root) != (1, 1) {
            return Err(Error::Internal(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Gradients = BTreeMap::new();
        if !self.needs_grad(root) {
            return Ok(grads);
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(key) => match grads.get_mut(key) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        grads.insert(*key, g);
                    }
                },
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = matmul_nt(&g, self.value(*b))?;
                        accumulate(&mut adj, *a, ga)?;
                    }
                    if self.needs_grad(*b) {
                        let gb = matmul_tn(self.value(*a), &g)?;
                        accumulate(&mut adj, *b, gb)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = matmul(&g, self.value(*b))?;
                        accumulate(&mut adj, *a, ga)?;
                    }
                    if self.needs_grad(*b) {
                        let gb = matmul_tn(&g, self.value(*a))?;
                        accumulate(&mut adj, *b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad(*a) {
                        accumulate(&mut adj, *a, g.clone())?;
                    }
                    if self.needs_grad(*b) {
                        accumulate(&mut adj, *b, g)?;
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs_grad(*row) {
                        let mut sums = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (s, v) in sums.data_mut().iter_mut().zip(g.row(r)) {
                                *s += v;
                            }
                        }
                        accumulate(&mut adj, *row, sums)?;
                    }
                    if self.needs_grad(*a) {
                        accumulate(&mut adj, *a, g)?;
                    }
                }
                Op::Scale(a, alpha) => {
                    accumulate(&mut adj, *a, g.scale(*alpha))?;
                }
                Op::ScaleByEntry { x, weights, index } => {
                    let alpha = self.value(*weights).data()[*index];
                    if self.needs_grad(*weights) {
                        let dot: f64 = g
                            .data()
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(a, b)| a * b)
                            .sum();
                        let (r, c) = self.shape(*weights);
                        let mut gw = Matrix::zeros(r, c);
                        gw.data_mut()[*index] = dot;
                        accumulate(&mut adj, *weights, gw)?;
                    }
                    if self.needs_grad(*x) {
                        accumulate(&mut adj, *x, g.scale(alpha))?;
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    normalized,
                    inv_std,
                } => {
                    let (rows, cols) = normalized.shape();
                    let n = cols as f64;
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gy = g.row(r);
                        let xh = normalized.row(r);
                        let dxh: Vec<f64> = gy.iter().zip(gamma).map(|(a, b)| a * b).collect();
                        let sum_dxh: f64 = dxh.iter().sum();
                        let sum_dxh_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] = inv_std[r] / n * (n * dxh[c] - sum_dxh - xh[c] * sum_dxh_xh);
                        }
                    }
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::Gelu(x) => {
                    let input = self.value(*x);
                    let mut gx = g;
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(input.data()) {
                        *gv *= gelu_grad(xv);
                    }
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::Cols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(*p);
                        if self.needs_grad(*p) {
                            let mut gp = Matrix::zeros(rows, cols);
                            for r in 0..rows {
                                gp.row_mut(r)
                                    .copy_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            accumulate(&mut adj, *p, gp)?;
                        }
                        offset += cols;
                    }
                }
                Op::Row { x, index } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    gx.row_mut(*index).copy_from_slice(g.data());
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::Softplus(x) => {
                    let input = self.value(*x);
                    let mut gx = g;
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(input.data()) {
                        *gv *= sigmoid(xv);
                    }
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let upstream = g.data()[0];
                    let mut gz = Matrix::row_vector(probs.clone());
                    gz.data_mut()[*label] -= 1.0;
                    accumulate(&mut adj, *logits, gz.scale(upstream))?;
                }
                Op::SoftCrossEntropy {
                    logits,
                    target,
                    tau,
                    probs,
                } => {
                    let upstream = g.data()[0];
                    let target_mass: f64 = target.iter().sum();
                    let gz: Vec<f64> = probs
                        .iter()
                        .zip(target)
                        .map(|(q, t)| upstream * (target_mass * q - t) / tau)
                        .collect();
                    accumulate(&mut adj, *logits, Matrix::row_vector(gz))?;
                }
                Op::AbsDotSum { x, others, signs } => {
                    let upstream = g.data()[0];
                    let cols = self.shape(*x).1;
                    let mut gx = vec![0.0; cols];
                    for (o, s) in others.iter().zip(signs) {
                        for (acc, v) in gx.iter_mut().zip(o) {
                            *acc += upstream * s * v;
                        }
                    }
                    accumulate(&mut adj, *x, Matrix::row_vector(gx))?;
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Per-term gradients from one tape: one traversal per present loss term,
/// with every parameter on the tape present in every term (zeros where the
/// term does not reach it).
pub fn backward(tape: &Tape<'_>, losses: &[(LossTerm, Var)]) -> Result<GradientBundle> {
    let mut bundle = GradientBundle::new();
    for &(term, root) in losses {
        let grads = tape.backward(root)?;
        let slot = bundle.term_mut(term);
        for (key, g) in grads {
            match slot.get_mut(&key) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    slot.insert(key, g);
                }
            }
        }
    }
    bundle.fill_missing(&tape.parameters());
    Ok(bundle)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked_scalars: usize,
    pub skipped_frozen: usize,
    pub per_param: BTreeMap<String, f64>,
}

/// Compares `analytic` against central differences of `f` for every scalar
/// of every trainable parameter. Relative error per scalar uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Parameter],
    analytic: &Gradients,
    step: f64,
) -> Result<FdReport>
where
    F: Fn(&[Parameter]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {step}")));
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut report = FdReport::default();
    let mut work = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        if !param.trainable {
            report.skipped_frozen += 1;
            continue;
        }
        let grad = analytic.get(&param.key).ok_or_else(|| {
            Error::Internal(format!("no analytic gradient for {}", param.key))
        })?;
        if grad.shape() != param.value.shape() {
            return Err(Error::Internal(format!(
                "gradient shape {:?} does not match {} of shape {:?}",
                grad.shape(),
                param.key,
                param.value.shape()
            )));
        }
        let mut worst: f64 = 0.0;
        for i in 0..param.value.len() {
            let orig = param.value.data()[i];
            work[pi].value.data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[pi].value.data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[pi].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            report.checked_scalars += 1;
        }
        report.per_param.insert(param.key.to_string(), worst);
        report.max_rel_error = report.max_rel_error.max(worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn key(i: usize) -> ParamKey {
        ParamKey::Backbone { index: i }
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        // ½‖p‖² = ½ p·pᵀ
        let p = Matrix::row_vector(vec![0.5, -2.0, 3.0]);
        let mut tape = Tape::new();
        let v = tape.param(ParamKey::HeadBias, &p);
        let sq = tape.matmul_nt(v, v).unwrap();
        let half = tape.scale(sq, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g[&ParamKey::HeadBias], p);
    }

    #[test]
    fn independent_loss_gives_zero_gradient() {
        let p = Matrix::row_vector(vec![1.0, 2.0]);
        let c = Matrix::row_vector(vec![3.0, 4.0]);
        let mut tape = Tape::new();
        let _pv = tape.param(ParamKey::HeadBias, &p);
        let cv = tape.constant(&c);
        let loss = tape.matmul_nt(cv, cv).unwrap();
        let bundle = backward(&tape, &[(LossTerm::Ce, loss)]).unwrap();
        assert_eq!(bundle.get(LossTerm::Ce, &ParamKey::HeadBias), Some(&Matrix::zeros(1, 2)));
        assert_eq!(bundle.get(LossTerm::Kd, &ParamKey::HeadBias), Some(&Matrix::zeros(1, 2)));
    }

    #[test]
    fn frozen_leaves_get_no_entry() {
        let p = Matrix::row_vector(vec![1.0, 2.0]);
        let w = Matrix::row_vector(vec![0.5, 0.5]);
        let mut tape = Tape::new();
        let pv = tape.param(ParamKey::HeadBias, &p);
        let wv = tape.leaf(ParamKey::HeadWeight, &w, false);
        let loss = tape.matmul_nt(pv, wv).unwrap();
        let bundle = backward(&tape, &[(LossTerm::Ce, loss)]).unwrap();
        assert!(bundle.get(LossTerm::Ce, &ParamKey::HeadWeight).is_none());
        assert_eq!(bundle.get(LossTerm::Ce, &ParamKey::HeadBias).unwrap(), &w);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let p = Matrix::zeros(2, 2);
        let mut tape = Tape::new();
        let v = tape.param(ParamKey::HeadWeight, &p);
        assert!(matches!(tape.backward(v), Err(Error::Internal(_))));
        assert!(matches!(tape.backward(Var(99)), Err(Error::Internal(_))));
    }

    #[test]
    fn linear_model_fd_is_exact() {
        let x = Matrix::row_vector(vec![0.3, -1.2, 2.5]);
        let params = vec![Parameter::new(
            ParamKey::HeadWeight,
            Matrix::row_vector(vec![1.5, 0.25, -0.75]),
            true,
        )
        .unwrap()];
        let forward = |ps: &[Parameter]| -> Result<f64> {
            let mut tape = Tape::new();
            let w = tape.param(ps[0].key, &ps[0].value);
            let xv = tape.constant(&x);
            let y = tape.matmul_nt(w, xv)?;
            Ok(tape.scalar(y))
        };
        let mut tape = Tape::new();
        let w = tape.param(params[0].key, &params[0].value);
        let xv = tape.constant(&x);
        let y = tape.matmul_nt(w, xv).unwrap();
        let analytic = tape.backward(y).unwrap();
        let report = finite_difference_check(forward, &params, &analytic, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-10, "{}", report.max_rel_error);
        assert_eq!(report.checked_scalars, 3);
    }

    #[test]
    fn softmax_cross_entropy_head_fd() {
        let mut rng = SeededRng::new(9);
        let x = Matrix::random_normal(1, 6, 1.0, &mut rng);
        let params = vec![
            Parameter::new(ParamKey::HeadWeight, Matrix::random_normal(4, 6, 0.5, &mut rng), true)
                .unwrap(),
            Parameter::new(ParamKey::HeadBias, Matrix::random_normal(1, 4, 0.5, &mut rng), true)
                .unwrap(),
            Parameter::new(key(0), Matrix::random_normal(1, 4, 0.5, &mut rng), false).unwrap(),
        ];
        let build = |ps: &[Parameter]| -> Result<(f64, Gradients)> {
            let mut tape = Tape::new();
            let w = tape.param(ps[0].key, &ps[0].value);
            let b = tape.param(ps[1].key, &ps[1].value);
            let frozen = tape.constant(&ps[2].value);
            let xv = tape.constant(&x);
            let z = tape.matmul_nt(xv, w)?;
            let z = tape.add_row(z, b)?;
            let z = tape.add(z, frozen)?;
            let loss = tape.cross_entropy(z, 2)?;
            Ok((tape.scalar(loss), tape.backward(loss)?))
        };
        let (_, analytic) = build(&params).unwrap();
        let report =
            finite_difference_check(|ps| Ok(build(ps)?.0), &params, &analytic, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-6, "{}", report.max_rel_error);
        assert_eq!(report.skipped_frozen, 1);
        assert_eq!(report.checked_scalars, 28);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = SeededRng::new(21);
        let params = vec![
            Parameter::new(key(0), Matrix::random_normal(3, 4, 0.7, &mut rng), false).unwrap(),
            Parameter::new(ParamKey::HeadWeight, Matrix::random_normal(4, 4, 0.7, &mut rng), true)
                .unwrap(),
            Parameter::new(ParamKey::BlockWeight { task: 1 }, Matrix::row_vector(vec![0.3, -0.4]), true)
                .unwrap(),
            Parameter::new(ParamKey::HeadBias, Matrix::random_normal(1, 4, 0.7, &mut rng), true)
                .unwrap(),
        ];
        let gamma = [1.1, 0.9, 1.0, 1.2];
        let beta = [0.1, 0.0, -0.1, 0.2];
        let build = |ps: &[Parameter]| -> Result<(Vec<(LossTerm, f64)>, GradientBundle)> {
            let mut tape = Tape::new();
            let x = tape.constant(&ps[0].value);
            let w = tape.param(ps[1].key, &ps[1].value);
            let mu_raw = tape.param(ps[2].key, &ps[2].value);
            let b = tape.param(ps[3].key, &ps[3].value);
            let h = tape.layer_norm(x, &gamma, &beta, 1e-6)?;
            let h = tape.matmul_nt(h, w)?;
            let h = tape.add_row(h, b)?;
            let a = tape.cols(h, 0, 2)?;
            let c = tape.cols(h, 2, 2)?;
            let att = tape.matmul_nt(a, c)?;
            let att = tape.scale(att, 0.5);
            let att = tape.softmax_rows(att);
            let mixed = tape.matmul(att, c)?;
            let mixed = tape.gelu(mixed);
            let mu = tape.softplus(mu_raw);
            let scaled = tape.scale_by_entry(mixed, mu, 1)?;
            let joined = tape.concat_cols(&[scaled, a])?;
            let joined = tape.add(joined, h)?;
            let cls = tape.row(joined, 0)?;
            let ce = tape.cross_entropy(cls, 1)?;
            let kd = tape.soft_cross_entropy(cls, vec![0.1, 0.2, 0.3, 0.4], 2.0)?;
            let orth = tape.abs_dot_sum(mu, vec![vec![0.5, 1.5], vec![-2.0, 0.3]])?;
            let losses = [(LossTerm::Ce, ce), (LossTerm::Kd, kd), (LossTerm::Orth, orth)];
            let values = losses.iter().map(|(t, v)| (*t, tape.scalar(*v))).collect();
            Ok((values, backward(&tape, &losses)?))
        };
        let (_, bundle) = build(&params).unwrap();
        for (ti, term) in LossTerm::ALL.iter().enumerate() {
            let report = finite_difference_check(
                |ps| Ok(build(ps)?.0[ti].1),
                &params,
                bundle.term(*term),
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-6, "{term:?}: {report:?}");
        }
    }

    #[test]
    fn determinism_violation_is_reported() {
        let params = vec![Parameter::new(ParamKey::HeadBias, Matrix::zeros(1, 1), true).unwrap()];
        let counter = std::cell::Cell::new(0.0);
        let f = |_: &[Parameter]| -> Result<f64> {
            counter.set(counter.get() + 1.0);
            Ok(counter.get())
        };
        let err = finite_difference_check(f, &params, &Gradients::new(), 1e-5).unwrap_err();
        assert!(matches!(err, Error::Determinism { .. }));
    }

    #[test]
    fn backbone_parameters_cannot_be_trainable() {
        assert!(Parameter::new(key(3), Matrix::zeros(1, 1), true).is_err());
    }

    #[test]
    fn combined_is_linear_in_terms() {
        let mut bundle = GradientBundle::new();
        let k = ParamKey::HeadBias;
        bundle.term_mut(LossTerm::Ce).insert(k, Matrix::row_vector(vec![1.0, 2.0]));
        bundle.term_mut(LossTerm::Kd).insert(k, Matrix::row_vector(vec![0.5, -1.0]));
        bundle.term_mut(LossTerm::Orth).insert(k, Matrix::row_vector(vec![4.0, 0.0]));
        let g = bundle.combined(2.0, 0.25).unwrap();
        assert_eq!(g[&k], Matrix::row_vector(vec![3.0, 0.0]));
    }
}
