//! Wengert tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so parents always precede their
//! children and the backward sweep is a single reverse pass. A tape is good
//! for exactly one backward pass; afterwards every operation reports
//! [`GradError::StaleTape`] until [`Tape::reset`] is called.
//!
//! Model code is written once against [`Graph`] and runs either on a [`Tape`]
//! (training) or on [`Eval`] (inference, nothing recorded).

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{GradError, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Operations shared by the recording tape and the plain evaluator.
pub trait Graph {
    type Value: Clone;

    fn constant(&mut self, value: Tensor) -> Result<Self::Value>;
    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Self::Value>;
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// `[m, n] + [n]` broadcast over rows.
    fn add_row(&mut self, a: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;
    fn tanh(&mut self, a: &Self::Value) -> Result<Self::Value>;
    /// Selects rows `ids` of a `[v, e]` table, giving `[ids.len(), e]`.
    fn gather_rows(&mut self, table: &Self::Value, ids: &[usize]) -> Result<Self::Value>;
    /// Concatenates `[m, n_i]` matrices along columns.
    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn value<'a>(&'a self, v: &'a Self::Value) -> Result<&'a Tensor>;
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Tanh(usize),
    Gather { table: usize, ids: Vec<usize> },
    Concat(Vec<usize>),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Square(usize),
    RowSqNorm(usize),
    WeightedMean { input: usize, weights: Vec<f64> },
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Clears all nodes; previously issued `Var`s become foreign.
    pub fn reset(&mut self) {
        *self = Tape::new();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if self.consumed {
            return Err(GradError::StaleTape);
        }
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(GradError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(GradError::StaleTape);
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn value_of(&self, v: Var) -> Result<&Tensor> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(GradError::ForeignVar);
        }
        Ok(&self.nodes[v.index].value)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value_of(v)?.item()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        self.push(out, Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        self.push(out, Op::Sub(ia, ib))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.scale(s)?;
        self.push(out, Op::Scale(ia, s))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map("square", |v| v * v)?;
        self.push(out, Op::Square(ia))
    }

    /// Squared L2 norm of each row of a `[m, n]` matrix, shape `[m]`.
    pub fn row_sq_norm(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let (m, n) = x.dims2("row_sq_norm")?;
        let out: Vec<f64> = (0..m)
            .map(|i| x.data()[i * n..(i + 1) * n].iter().map(|v| v * v).sum())
            .collect();
        let out = Tensor::computed("row_sq_norm", vec![m], out)?;
        self.push(out, Op::RowSqNorm(ia))
    }

    /// `(1/m) Σ w_i a_i` over a `[m]` vector with constant weights.
    pub fn weighted_mean(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.shape() != [weights.len()] {
            return Err(GradError::shape(
                "weighted_mean",
                format!("{:?} values vs {} weights", x.shape(), weights.len()),
            ));
        }
        if weights.is_empty() {
            return Err(GradError::shape("weighted_mean", "empty input"));
        }
        let m = weights.len() as f64;
        // Scale each weight by 1/m before multiplying so weights near f64::MAX stay finite.
        let total: f64 = x
            .data()
            .iter()
            .zip(weights)
            .map(|(v, w)| (w / m) * v)
            .sum();
        let out = Tensor::computed("weighted_mean", vec![], vec![total])?;
        self.push(
            out,
            Op::WeightedMean {
                input: ia,
                weights: weights.to_vec(),
            },
        )
    }

    /// Mean over all entries.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.numel() == 0 {
            return Err(GradError::shape("mean", "empty input"));
        }
        let out = Tensor::computed("mean", vec![], vec![x.sum() / x.numel() as f64])?;
        self.push(out, Op::Mean(ia))
    }

    /// Reverse sweep from a scalar `loss`. Every parameter of `store` gets an
    /// entry; parameters the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(GradError::NonScalarLoss(self.nodes[il].value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..=il).map(|_| None).collect();
        grads[il] = Some(Tensor::full(self.nodes[il].value.shape(), 1.0)?);
        let mut out = Gradients::zeros_like(store);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    let acc = match out.get(name) {
                        Some(prev) => prev.add(&g)?,
                        None => return Err(GradError::MissingParam(name.clone())),
                    };
                    out.insert(name.clone(), acc);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(&self.nodes[*b].value)?;
                    let gb = self.nodes[*a].value.matmul_tn(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_rows()?;
                    accumulate(&mut grads, *a, g)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, "tanh_backward", |g, y| g * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Gather { table, ids } => {
                    let tshape = self.nodes[*table].value.shape();
                    let e = tshape[1];
                    let mut gt = vec![0.0; tshape[0] * e];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..e {
                            gt[id * e + j] += g.data()[r * e + j];
                        }
                    }
                    let gt = Tensor::computed("gather_backward", tshape.to_vec(), gt)?;
                    accumulate(&mut grads, *table, gt)?;
                }
                Op::Concat(parts) => {
                    let (m, total) = g.dims2("concat_backward")?;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.shape()[1];
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, Tensor::computed("concat_backward", vec![m, w], gp)?)?;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0)?)?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)?)?,
                Op::Square(a) => {
                    let ga = g.zip_map(&self.nodes[*a].value, "square_backward", |g, x| 2.0 * g * x)?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::RowSqNorm(a) => {
                    let x = &self.nodes[*a].value;
                    let (m, n) = x.dims2("row_sq_norm_backward")?;
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        let gr = 2.0 * g.data()[r];
                        for j in 0..n {
                            ga[r * n + j] = gr * x.data()[r * n + j];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::computed("row_sq_norm_backward", vec![m, n], ga)?)?;
                }
                Op::WeightedMean { input, weights } => {
                    let g0 = g.item()?;
                    let m = weights.len() as f64;
                    let ga: Vec<f64> = weights.iter().map(|w| (w / m) * g0).collect();
                    accumulate(&mut grads, *input, Tensor::computed("weighted_mean_backward", vec![weights.len()], ga)?)?;
                }
                Op::Mean(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = Tensor::full(x.shape(), g.item()? / x.numel() as f64)?;
                    accumulate(&mut grads, *a, ga)?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], index: usize, g: Tensor) -> Result<()> {
    grads[index] = Some(match grads[index].take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

fn gather(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, e) = table.dims2("gather_rows")?;
    let mut out = Vec::with_capacity(ids.len() * e);
    for &id in ids {
        if id >= v {
            return Err(GradError::OutOfRange {
                what: "embedding table",
                index: id,
                size: v,
            });
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::computed("gather_rows", vec![ids.len(), e], out)
}

fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let mut m = None;
    let mut total = 0;
    for p in parts {
        let (r, c) = p.dims2("concat_cols")?;
        if *m.get_or_insert(r) != r {
            return Err(GradError::shape("concat_cols", "row counts differ"));
        }
        total += c;
    }
    let m = m.unwrap_or(0);
    let mut out = Vec::with_capacity(m * total);
    for r in 0..m {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::computed("concat_cols", vec![m, total], out)
}

impl Graph for Tape {
    type Value = Var;

    fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        self.push(value, Op::Param(name.to_string()))
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ia, ib) = (self.idx(*a)?, self.idx(*b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        self.push(out, Op::MatMul(ia, ib))
    }

    fn add_row(&mut self, a: &Var, bias: &Var) -> Result<Var> {
        let (ia, ib) = (self.idx(*a)?, self.idx(*bias)?);
        let out = self.nodes[ia].value.add_row(&self.nodes[ib].value)?;
        self.push(out, Op::AddRow(ia, ib))
    }

    fn tanh(&mut self, a: &Var) -> Result<Var> {
        let ia = self.idx(*a)?;
        let out = self.nodes[ia].value.map("tanh", f64::tanh)?;
        self.push(out, Op::Tanh(ia))
    }

    fn gather_rows(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(*table)?;
        let out = gather(&self.nodes[it].value, ids)?;
        self.push(
            out,
            Op::Gather {
                table: it,
                ids: ids.to_vec(),
            },
        )
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|p| self.idx(*p)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = concat(&values)?;
        self.push(out, Op::Concat(idx))
    }

    fn value<'a>(&'a self, v: &'a Var) -> Result<&'a Tensor> {
        self.value_of(*v)
    }
}

/// Evaluates model code directly on tensors without recording anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Graph for Eval {
    type Value = Tensor;

    fn constant(&mut self, value: Tensor) -> Result<Tensor> {
        Ok(value)
    }

    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Tensor> {
        Ok(store.get(name)?.clone())
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul(b)
    }

    fn add_row(&mut self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        a.add_row(bias)
    }

    fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        a.map("tanh", f64::tanh)
    }

    fn gather_rows(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        gather(table, ids)
    }

    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        concat(&refs)
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> Result<&'a Tensor> {
        Ok(v)
    }
}
