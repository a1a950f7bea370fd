//! Tape-based reverse-mode differentiation over a fixed primitive set.
//!
//! Operations are recorded in creation order, so the tape is acyclic by
//! construction. Shapes are checked when an operation is recorded; the
//! backward pass never fails on shapes.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Binary composition of an entity row with a relation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    /// Complex rotation: the relation row, read as `d/2` complex numbers
    /// (real halves then imaginary halves), is normalised to unit modulus and
    /// multiplied elementwise with the entity row.
    Rotate,
    Subtract,
    Multiply,
    /// Ignores the relation and passes the entity row through.
    Identity,
}

impl std::str::FromStr for Composition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotate" => Ok(Composition::Rotate),
            "subtract" | "sub" => Ok(Composition::Subtract),
            "multiply" | "mult" => Ok(Composition::Multiply),
            "identity" => Ok(Composition::Identity),
            other => Err(Error::Config(format!("unknown composition {other:?}"))),
        }
    }
}

impl Composition {
    /// Relation row for which the composition returns the entity row.
    pub fn identity_row(self, d: usize) -> Vec<f64> {
        match self {
            Composition::Rotate => (0..d).map(|j| if j < d / 2 { 1.0 } else { 0.0 }).collect(),
            Composition::Subtract | Composition::Identity => vec![0.0; d],
            Composition::Multiply => vec![1.0; d],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Sum,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "sum" => Ok(Pooling::Sum),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

/// Weighted edges `(source, relation) -> target`, grouped by target.
#[derive(Debug, Clone, Default)]
pub struct EdgeMessages {
    source: Vec<u32>,
    relation: Vec<u32>,
    weight: Vec<f64>,
    /// Edges of target `t` occupy `offsets[t]..offsets[t + 1]`.
    offsets: Vec<usize>,
}

impl EdgeMessages {
    /// Builds the grouped edge list. Within a target, edges keep the order of
    /// `(source, relation)` ascending so summation order is fixed.
    pub fn new(num_targets: usize, edges: impl IntoIterator<Item = (u32, u32, u32, f64)>) -> Self {
        let mut list: Vec<(u32, u32, u32, f64)> = edges.into_iter().collect();
        list.sort_by_key(|a| (a.2, a.0, a.1));
        let mut offsets = vec![0usize; num_targets + 1];
        for e in &list {
            offsets[e.2 as usize + 1] += 1;
        }
        for t in 0..num_targets {
            offsets[t + 1] += offsets[t];
        }
        Self {
            source: list.iter().map(|e| e.0).collect(),
            relation: list.iter().map(|e| e.1).collect(),
            weight: list.iter().map(|e| e.3).collect(),
            offsets,
        }
    }

    pub fn num_targets(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    fn max_source(&self) -> Option<u32> {
        self.source.iter().copied().max()
    }

    fn max_relation(&self) -> Option<u32> {
        self.relation.iter().copied().max()
    }
}

/// Score requests for the multilinear product primitives. Query `q` pools the
/// relation rows it lists and multiplies them with its entity rows; the
/// position of an entity within the query selects its positional filter.
#[derive(Debug, Clone)]
pub struct ProductQueries {
    pooling: Pooling,
    relations: Vec<u32>,
    rel_offsets: Vec<usize>,
    entities: Vec<u32>,
    ent_offsets: Vec<usize>,
}

impl ProductQueries {
    pub fn new(pooling: Pooling) -> Self {
        Self {
            pooling,
            relations: Vec::new(),
            rel_offsets: vec![0],
            entities: Vec::new(),
            ent_offsets: vec![0],
        }
    }

    pub fn push(&mut self, relations: &[u32], entities: &[u32]) {
        assert!(!relations.is_empty(), "a query needs at least one relation");
        self.relations.extend_from_slice(relations);
        self.rel_offsets.push(self.relations.len());
        self.entities.extend_from_slice(entities);
        self.ent_offsets.push(self.entities.len());
    }

    pub fn len(&self) -> usize {
        self.rel_offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rels(&self, q: usize) -> &[u32] {
        &self.relations[self.rel_offsets[q]..self.rel_offsets[q + 1]]
    }

    fn ents(&self, q: usize) -> &[u32] {
        &self.entities[self.ent_offsets[q]..self.ent_offsets[q + 1]]
    }

    fn max_arity(&self) -> usize {
        (0..self.len()).map(|q| self.ents(q).len()).max().unwrap_or(0)
    }

    fn pool_weight(&self, q: usize) -> f64 {
        match self.pooling {
            Pooling::Mean => 1.0 / self.rels(q).len() as f64,
            Pooling::Sum => 1.0,
        }
    }
}

const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Tanh(usize),
    Relu(usize),
    GatherRows(usize, Arc<Vec<u32>>),
    ScatterRows(usize, Arc<Vec<u32>>),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    Compose(usize, usize, Composition),
    EdgeAggregate {
        ent: usize,
        rel: usize,
        edges: Arc<EdgeMessages>,
        comp: Composition,
    },
    MaskMul(usize, Vec<f64>),
    SumAll(usize),
    Multilinear {
        ent: usize,
        rel: usize,
        queries: Arc<ProductQueries>,
    },
    PositionalMultilinear {
        ent: usize,
        rel: usize,
        filters: usize,
        queries: Arc<ProductQueries>,
    },
    SoftmaxXent {
        scores: usize,
        groups: Arc<Vec<(usize, usize)>>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn compose_row(comp: Composition, x: &[f64], r: &[f64], out: &mut [f64]) {
    match comp {
        Composition::Identity => out.copy_from_slice(x),
        Composition::Subtract => {
            for j in 0..x.len() {
                out[j] = x[j] - r[j];
            }
        }
        Composition::Multiply => {
            for j in 0..x.len() {
                out[j] = x[j] * r[j];
            }
        }
        Composition::Rotate => {
            let h = x.len() / 2;
            for k in 0..h {
                let (c, s) = unit_phase(r[k], r[k + h]);
                let (xr, xi) = (x[k], x[k + h]);
                out[k] = xr * c - xi * s;
                out[k + h] = xr * s + xi * c;
            }
        }
    }
}

fn unit_phase(a: f64, b: f64) -> (f64, f64) {
    let rho = (a * a + b * b).sqrt();
    if rho == 0.0 {
        (1.0, 0.0)
    } else {
        (a / rho, b / rho)
    }
}

/// Accumulates `w * J^T g` into `dx` / `dr` for one composed row.
fn compose_row_backward(
    comp: Composition,
    x: &[f64],
    r: &[f64],
    g: &[f64],
    w: f64,
    dx: Option<&mut [f64]>,
    dr: Option<&mut [f64]>,
) {
    match comp {
        Composition::Identity => {
            if let Some(dx) = dx {
                for j in 0..g.len() {
                    dx[j] += w * g[j];
                }
            }
        }
        Composition::Subtract => {
            if let Some(dx) = dx {
                for j in 0..g.len() {
                    dx[j] += w * g[j];
                }
            }
            if let Some(dr) = dr {
                for j in 0..g.len() {
                    dr[j] -= w * g[j];
                }
            }
        }
        Composition::Multiply => {
            if let Some(dx) = dx {
                for j in 0..g.len() {
                    dx[j] += w * g[j] * r[j];
                }
            }
            if let Some(dr) = dr {
                for j in 0..g.len() {
                    dr[j] += w * g[j] * x[j];
                }
            }
        }
        Composition::Rotate => {
            let h = x.len() / 2;
            let mut dx = dx;
            let mut dr = dr;
            for k in 0..h {
                let (a, b) = (r[k], r[k + h]);
                let (c, s) = unit_phase(a, b);
                let (xr, xi) = (x[k], x[k + h]);
                let (gr, gi) = (w * g[k], w * g[k + h]);
                if let Some(dx) = dx.as_deref_mut() {
                    dx[k] += gr * c + gi * s;
                    dx[k + h] += -gr * s + gi * c;
                }
                if let Some(dr) = dr.as_deref_mut() {
                    let rho2 = a * a + b * b;
                    if rho2 > 0.0 {
                        let rho3 = rho2 * rho2.sqrt();
                        let dc = gr * xr + gi * xi;
                        let ds = -gr * xi + gi * xr;
                        dr[k] += (dc * b * b - ds * a * b) / rho3;
                        dr[k + h] += (-dc * a * b + ds * a * a) / rho3;
                    }
                }
            }
        }
    }
}

fn circular_conv(h: &[f64], filter: &[f64], out: &mut [f64]) {
    let d = h.len();
    for j in 0..d {
        let mut acc = 0.0;
        for (t, f) in filter.iter().enumerate() {
            acc += f * h[(j + t) % d];
        }
        out[j] = acc;
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        Ok(())
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.elementwise(a, b, |p, q| p + q, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.elementwise(a, b, |p, q| p - q, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.elementwise(a, b, |p, q| p * q, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a.0, c), rg)
    }

    /// `(n x k) * (k x m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.cols() != y.rows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", x.shape(), y.shape())));
        }
        let value = matmul(x, y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.tanh()).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<u32>>) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(shape_err("gather_rows", format!("expected a matrix, got {:?}", x.shape())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= x.rows()) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {}", x.rows())));
        }
        let c = x.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(x.row(i as usize));
        }
        let value = Tensor::matrix(index.len(), c, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a.0, index), rg))
    }

    /// `out[index[i]] += a[i]` into a zero matrix with `rows` rows.
    pub fn scatter_rows(&mut self, a: Var, index: Arc<Vec<u32>>, rows: usize) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 || x.rows() != index.len() {
            return Err(shape_err(
                "scatter_rows",
                format!("{:?} with {} indices", x.shape(), index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= rows) {
            return Err(shape_err("scatter_rows", format!("row {bad} out of {rows}")));
        }
        let mut out = Tensor::zeros(&[rows, x.cols()]);
        for (i, &t) in index.iter().enumerate() {
            for (o, v) in out.row_mut(t as usize).iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::ScatterRows(a.0, index), rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.cols() != y.cols() {
            return Err(shape_err("concat_rows", format!("{:?} and {:?}", x.shape(), y.shape())));
        }
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        let value = Tensor::matrix(x.rows() + y.rows(), x.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatRows(a.0, b.0), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
            return Err(shape_err("concat_cols", format!("{:?} and {:?}", x.shape(), y.shape())));
        }
        let (n, ca, cb) = (x.rows(), x.cols(), y.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&x.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&y.data()[i * cb..(i + 1) * cb]);
        }
        let value = Tensor::matrix(n, ca + cb, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a.0, b.0), rg))
    }

    /// Row-wise composition of two equally shaped matrices.
    pub fn compose(&mut self, a: Var, b: Var, comp: Composition) -> Result<Var> {
        self.same_shape("compose", a, b)?;
        let (x, r) = (self.value(a), self.value(b));
        if comp == Composition::Rotate && x.cols() % 2 != 0 {
            return Err(shape_err("compose", "rotate needs an even width".into()));
        }
        let mut out = Tensor::zeros(x.shape());
        let c = x.cols();
        for i in 0..x.rows() {
            compose_row(comp, x.row(i), r.row(i), &mut out.data_mut()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Compose(a.0, b.0, comp), rg))
    }

    /// `out[t] = sum over edges (u, r, t) of w * compose(ent[u], rel[r])`.
    pub fn edge_aggregate(
        &mut self,
        ent: Var,
        rel: Var,
        edges: Arc<EdgeMessages>,
        comp: Composition,
    ) -> Result<Var> {
        let (x, r) = (self.value(ent), self.value(rel));
        if x.shape().len() != 2 || r.shape().len() != 2 || x.cols() != r.cols() {
            return Err(shape_err("edge_aggregate", format!("{:?} and {:?}", x.shape(), r.shape())));
        }
        if comp == Composition::Rotate && x.cols() % 2 != 0 {
            return Err(shape_err("edge_aggregate", "rotate needs an even width".into()));
        }
        if edges.max_source().is_some_and(|m| m as usize >= x.rows())
            || edges.max_relation().is_some_and(|m| m as usize >= r.rows())
        {
            return Err(shape_err("edge_aggregate", "edge index out of range".into()));
        }
        let d = x.cols();
        let mut out = Tensor::zeros(&[edges.num_targets(), d]);
        out.data_mut()
            .par_chunks_mut(d.max(1))
            .enumerate()
            .for_each(|(t, row)| {
                let mut buf = vec![0.0; d];
                for e in edges.offsets[t]..edges.offsets[t + 1] {
                    compose_row(comp, x.row(edges.source[e] as usize), r.row(edges.relation[e] as usize), &mut buf);
                    let w = edges.weight[e];
                    for j in 0..d {
                        row[j] += w * buf[j];
                    }
                }
            });
        let rg = self.rg(ent) || self.rg(rel);
        Ok(self.push(
            out,
            Op::EdgeAggregate {
                ent: ent.0,
                rel: rel.0,
                edges,
                comp,
            },
            rg,
        ))
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if x.len() != mask.len() {
            return Err(shape_err("mask_mul", format!("{} values vs mask of {}", x.len(), mask.len())));
        }
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MaskMul(a.0, mask), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), rg)
    }

    fn check_queries(&self, op: &'static str, ent: Var, rel: Var, q: &ProductQueries) -> Result<usize> {
        let (x, r) = (self.value(ent), self.value(rel));
        if x.shape().len() != 2 || r.shape().len() != 2 || x.cols() != r.cols() {
            return Err(shape_err(op, format!("{:?} and {:?}", x.shape(), r.shape())));
        }
        if q.entities.iter().any(|&e| e as usize >= x.rows()) || q.relations.iter().any(|&v| v as usize >= r.rows()) {
            return Err(shape_err(op, "query index out of range".into()));
        }
        Ok(x.cols())
    }

    /// One score per query: `sum_j pool(rel)[j] * prod_i ent_i[j]`.
    pub fn multilinear(&mut self, ent: Var, rel: Var, queries: Arc<ProductQueries>) -> Result<Var> {
        let d = self.check_queries("multilinear", ent, rel, &queries)?;
        let (x, r) = (self.value(ent), self.value(rel));
        let scores: Vec<f64> = (0..queries.len())
            .into_par_iter()
            .map(|q| {
                let mut acc = pooled(r, queries.rels(q), queries.pool_weight(q), d);
                for &e in queries.ents(q) {
                    for (a, v) in acc.iter_mut().zip(x.row(e as usize)) {
                        *a *= v;
                    }
                }
                acc.iter().sum()
            })
            .collect();
        let rg = self.rg(ent) || self.rg(rel);
        Ok(self.push(
            Tensor::vector(scores),
            Op::Multilinear {
                ent: ent.0,
                rel: rel.0,
                queries,
            },
            rg,
        ))
    }

    /// Multilinear product after circular convolution of each entity row with
    /// the filters of its position; `filters` has shape
    /// `[positions, num_filters, filter_len]` and the per-filter products are summed.
    pub fn positional_multilinear(
        &mut self,
        ent: Var,
        rel: Var,
        filters: Var,
        queries: Arc<ProductQueries>,
    ) -> Result<Var> {
        let d = self.check_queries("positional_multilinear", ent, rel, &queries)?;
        let f = self.value(filters);
        if f.shape().len() != 3 || f.shape()[2] > d || f.shape()[2] == 0 {
            return Err(shape_err("positional_multilinear", format!("filters {:?}", f.shape())));
        }
        let (positions, nf, len) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        if queries.max_arity() > positions {
            return Err(Error::Config(format!(
                "query with {} positions exceeds the {positions} configured positional filters",
                queries.max_arity()
            )));
        }
        let (x, r) = (self.value(ent), self.value(rel));
        let fd = f.data();
        let scores: Vec<f64> = (0..queries.len())
            .into_par_iter()
            .map(|q| {
                let rhat = pooled(r, queries.rels(q), queries.pool_weight(q), d);
                let mut conv = vec![0.0; d];
                let mut total = 0.0;
                for k in 0..nf {
                    let mut acc = rhat.clone();
                    for (p, &e) in queries.ents(q).iter().enumerate() {
                        let off = (p * nf + k) * len;
                        circular_conv(x.row(e as usize), &fd[off..off + len], &mut conv);
                        for (a, c) in acc.iter_mut().zip(&conv) {
                            *a *= c;
                        }
                    }
                    total += acc.iter().sum::<f64>();
                }
                total
            })
            .collect();
        let rg = self.rg(ent) || self.rg(rel) || self.rg(filters);
        Ok(self.push(
            Tensor::vector(scores),
            Op::PositionalMultilinear {
                ent: ent.0,
                rel: rel.0,
                filters: filters.0,
                queries,
            },
            rg,
        ))
    }

    /// Sum over groups of `-log softmax(scores[group])[0]`; each group is
    /// `(start, len)` with the positive score first.
    pub fn softmax_xent(&mut self, scores: Var, groups: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let s = self.value(scores);
        if s.shape().len() != 1 {
            return Err(shape_err("softmax_xent", format!("expected a vector, got {:?}", s.shape())));
        }
        if groups.iter().any(|&(st, len)| len == 0 || st + len > s.len()) {
            return Err(shape_err("softmax_xent", "group out of range".into()));
        }
        let loss: f64 = groups
            .iter()
            .map(|&(st, len)| {
                let g = &s.data()[st..st + len];
                log_sum_exp(g) - g[0]
            })
            .sum();
        let rg = self.rg(scores);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                scores: scores.0,
                groups,
            },
            rg,
        ))
    }

    /// Per-column standardisation over rows followed by an affine map.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if xv.shape().len() != 2 || g.len() != d || b.len() != d || xv.rows() == 0 {
            return Err(shape_err(
                "batch_norm",
                format!("{:?} with gamma {:?} beta {:?}", xv.shape(), g.shape(), b.shape()),
            ));
        }
        let n = xv.rows();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let c = xv.row(i)[j] - mean[j];
                var[j] += c * c;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / n as f64 + BATCH_NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (xv.row(i)[j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = g.data()[j] * h + b.data()[j];
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |i: usize| self.nodes[i].requires_grad;
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, || g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, || g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, || g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, || map(g, |v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, || zip(g, val(*b), |p, q| p * q));
                }
                if needs(*b) {
                    accumulate(grads, *b, || zip(g, val(*a), |p, q| p * q));
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    accumulate(grads, *a, || map(g, |v| v * c));
                }
            }
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, || matmul_bt(g, val(*b)));
                }
                if needs(*b) {
                    accumulate(grads, *b, || matmul_at(val(*a), g));
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    accumulate(grads, *a, || zip(g, &node.value, |p, y| p * (1.0 - y * y)));
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    accumulate(grads, *a, || zip(g, val(*a), |p, x| if x > 0.0 { p } else { 0.0 }));
                }
            }
            Op::GatherRows(a, index) => {
                if needs(*a) {
                    let src = val(*a);
                    let mut d = Tensor::zeros(src.shape());
                    for (i, &r) in index.iter().enumerate() {
                        for (o, v) in d.row_mut(r as usize).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *a, || d);
                }
            }
            Op::ScatterRows(a, index) => {
                if needs(*a) {
                    let c = g.cols();
                    let mut data = Vec::with_capacity(index.len() * c);
                    for &t in index.iter() {
                        data.extend_from_slice(g.row(t as usize));
                    }
                    let d = Tensor::matrix(index.len(), c, data).expect("gathered gradient");
                    accumulate(grads, *a, || d);
                }
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).len();
                if needs(*a) {
                    let t = Tensor::new(val(*a).shape().to_vec(), g.data()[..split].to_vec()).expect("split");
                    accumulate(grads, *a, || t);
                }
                if needs(*b) {
                    let t = Tensor::new(val(*b).shape().to_vec(), g.data()[split..].to_vec()).expect("split");
                    accumulate(grads, *b, || t);
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(*a).cols(), val(*b).cols());
                let n = g.rows();
                if needs(*a) {
                    let mut d = Vec::with_capacity(n * ca);
                    for i in 0..n {
                        d.extend_from_slice(&g.row(i)[..ca]);
                    }
                    let t = Tensor::matrix(n, ca, d).expect("split");
                    accumulate(grads, *a, || t);
                }
                if needs(*b) {
                    let mut d = Vec::with_capacity(n * cb);
                    for i in 0..n {
                        d.extend_from_slice(&g.row(i)[ca..]);
                    }
                    let t = Tensor::matrix(n, cb, d).expect("split");
                    accumulate(grads, *b, || t);
                }
            }
            Op::Compose(a, b, comp) => {
                let (x, r) = (val(*a), val(*b));
                let c = x.cols();
                let mut dx = needs(*a).then(|| Tensor::zeros(x.shape()));
                let mut dr = needs(*b).then(|| Tensor::zeros(r.shape()));
                for i in 0..x.rows() {
                    compose_row_backward(
                        *comp,
                        x.row(i),
                        r.row(i),
                        g.row(i),
                        1.0,
                        dx.as_mut().map(|t| &mut t.data_mut()[i * c..(i + 1) * c]),
                        dr.as_mut().map(|t| &mut t.data_mut()[i * c..(i + 1) * c]),
                    );
                }
                if let Some(dx) = dx {
                    accumulate(grads, *a, || dx);
                }
                if let Some(dr) = dr {
                    accumulate(grads, *b, || dr);
                }
            }
            Op::EdgeAggregate { ent, rel, edges, comp } => {
                let (x, r) = (val(*ent), val(*rel));
                let d = x.cols();
                let mut dx = needs(*ent).then(|| Tensor::zeros(x.shape()));
                let mut dr = needs(*rel).then(|| Tensor::zeros(r.shape()));
                for t in 0..edges.num_targets() {
                    let gt = g.row(t);
                    for e in edges.offsets[t]..edges.offsets[t + 1] {
                        let (u, q) = (edges.source[e] as usize, edges.relation[e] as usize);
                        compose_row_backward(
                            *comp,
                            x.row(u),
                            r.row(q),
                            gt,
                            edges.weight[e],
                            dx.as_mut().map(|m| &mut m.data_mut()[u * d..(u + 1) * d]),
                            dr.as_mut().map(|m| &mut m.data_mut()[q * d..(q + 1) * d]),
                        );
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *ent, || dx);
                }
                if let Some(dr) = dr {
                    accumulate(grads, *rel, || dr);
                }
            }
            Op::MaskMul(a, mask) => {
                if needs(*a) {
                    let data = g.data().iter().zip(mask).map(|(p, m)| p * m).collect();
                    let t = Tensor::new(g.shape().to_vec(), data).expect("mask shape");
                    accumulate(grads, *a, || t);
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let s = g.item();
                    accumulate(grads, *a, || Tensor::filled(val(*a).shape(), s));
                }
            }
            Op::Multilinear { ent, rel, queries } => {
                self.multilinear_backward(*ent, *rel, None, queries, g, grads);
            }
            Op::PositionalMultilinear {
                ent,
                rel,
                filters,
                queries,
            } => {
                self.multilinear_backward(*ent, *rel, Some(*filters), queries, g, grads);
            }
            Op::SoftmaxXent { scores, groups } => {
                if needs(*scores) {
                    let s = val(*scores);
                    let up = g.item();
                    let mut d = Tensor::zeros(s.shape());
                    for &(st, len) in groups.iter() {
                        let grp = &s.data()[st..st + len];
                        let lse = log_sum_exp(grp);
                        for (k, v) in grp.iter().enumerate() {
                            let p = (v - lse).exp();
                            d.data_mut()[st + k] += up * (p - if k == 0 { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(grads, *scores, || d);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xv = val(*x);
                let (n, d) = (xv.rows(), xv.cols());
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        sum_g[j] += g.data()[i * d + j];
                        sum_gx[j] += g.data()[i * d + j] * xhat[i * d + j];
                    }
                }
                if needs(*gamma) {
                    let t = Tensor::new(val(*gamma).shape().to_vec(), sum_gx.clone()).expect("gamma shape");
                    accumulate(grads, *gamma, || t);
                }
                if needs(*beta) {
                    let t = Tensor::new(val(*beta).shape().to_vec(), sum_g.clone()).expect("beta shape");
                    accumulate(grads, *beta, || t);
                }
                if needs(*x) {
                    let gm = val(*gamma).data();
                    let nf = n as f64;
                    let mut dx = Tensor::zeros(xv.shape());
                    for i in 0..n {
                        for j in 0..d {
                            let k = i * d + j;
                            dx.data_mut()[k] = gm[j] * inv_std[j] / nf
                                * (nf * g.data()[k] - sum_g[j] - xhat[k] * sum_gx[j]);
                        }
                    }
                    accumulate(grads, *x, || dx);
                }
            }
        }
    }

    fn multilinear_backward(
        &self,
        ent: usize,
        rel: usize,
        filters: Option<usize>,
        queries: &ProductQueries,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let needs = |i: usize| self.nodes[i].requires_grad;
        let (x, r) = (&self.nodes[ent].value, &self.nodes[rel].value);
        let d = x.cols();
        let mut dx = needs(ent).then(|| Tensor::zeros(x.shape()));
        let mut dr = needs(rel).then(|| Tensor::zeros(r.shape()));
        let fv = filters.map(|f| &self.nodes[f].value);
        let mut df = filters.filter(|&f| needs(f)).map(|f| Tensor::zeros(self.nodes[f].value.shape()));
        let (nf, len) = fv.map(|f| (f.shape()[1], f.shape()[2])).unwrap_or((1, 0));

        for q in 0..queries.len() {
            let up = g.data()[q];
            if up == 0.0 {
                continue;
            }
            let ents = queries.ents(q);
            let w = queries.pool_weight(q);
            let rhat = pooled(r, queries.rels(q), w, d);
            let mut rel_grad = vec![0.0; d];
            for k in 0..nf {
                // factor rows: raw entity rows, or their positional convolutions
                let factors: Vec<Vec<f64>> = ents
                    .iter()
                    .enumerate()
                    .map(|(p, &e)| match fv {
                        None => x.row(e as usize).to_vec(),
                        Some(f) => {
                            let off = (p * nf + k) * len;
                            let mut c = vec![0.0; d];
                            circular_conv(x.row(e as usize), &f.data()[off..off + len], &mut c);
                            c
                        }
                    })
                    .collect();
                // suffix[i] = prod of factors i.. ; prefix carries rhat
                let n = factors.len();
                let mut suffix = vec![vec![1.0; d]; n + 1];
                for i in (0..n).rev() {
                    for j in 0..d {
                        suffix[i][j] = suffix[i + 1][j] * factors[i][j];
                    }
                }
                for j in 0..d {
                    rel_grad[j] += up * w * suffix[0][j];
                }
                let mut prefix = rhat.clone();
                for (i, &e) in ents.iter().enumerate() {
                    let gi: Vec<f64> = (0..d).map(|j| up * prefix[j] * suffix[i + 1][j]).collect();
                    let e = e as usize;
                    match fv {
                        None => {
                            if let Some(dx) = dx.as_mut() {
                                for (o, v) in dx.row_mut(e).iter_mut().zip(&gi) {
                                    *o += v;
                                }
                            }
                        }
                        Some(f) => {
                            let off = (i * nf + k) * len;
                            let filt = &f.data()[off..off + len];
                            let h = x.row(e);
                            if let Some(dx) = dx.as_mut() {
                                let row = dx.row_mut(e);
                                for j in 0..d {
                                    for (t, fw) in filt.iter().enumerate() {
                                        row[(j + t) % d] += fw * gi[j];
                                    }
                                }
                            }
                            if let Some(df) = df.as_mut() {
                                let dfs = &mut df.data_mut()[off..off + len];
                                for j in 0..d {
                                    for (t, o) in dfs.iter_mut().enumerate() {
                                        *o += gi[j] * h[(j + t) % d];
                                    }
                                }
                            }
                        }
                    }
                    for j in 0..d {
                        prefix[j] *= factors[i][j];
                    }
                }
            }
            if let Some(dr) = dr.as_mut() {
                for &rr in queries.rels(q) {
                    for (o, v) in dr.row_mut(rr as usize).iter_mut().zip(&rel_grad) {
                        *o += v;
                    }
                }
            }
        }
        if let Some(dx) = dx {
            accumulate(grads, ent, || dx);
        }
        if let Some(dr) = dr {
            accumulate(grads, rel, || dr);
        }
        if let (Some(f), Some(df)) = (filters, df) {
            accumulate(grads, f, || df);
        }
    }
}

fn pooled(r: &Tensor, rels: &[u32], w: f64, d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    for &q in rels {
        for (a, v) in acc.iter_mut().zip(r.row(q as usize)) {
            *a += v;
        }
    }
    if w != 1.0 {
        acc.iter_mut().for_each(|a| *a *= w);
    }
    acc
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, make: impl FnOnce() -> Tensor) {
    let t = make();
    match grads[i].as_mut() {
        Some(existing) => existing.add_assign(&t),
        None => grads[i] = Some(t),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect()).expect("shape preserved")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(p, q)| f(*p, *q)).collect(),
    )
    .expect("shape preserved")
}

/// `a * b`, parallel over output rows.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    let bd = b.data();
    out.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
        let ar = &a.data()[i * k..(i + 1) * k];
        for (kk, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &bd[kk * m..(kk + 1) * m];
            for (o, bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    Tensor::matrix(n, m, out).expect("matmul shape")
}

/// `g * b^T`.
fn matmul_bt(g: &Tensor, b: &Tensor) -> Tensor {
    let (n, m, k) = (g.rows(), g.cols(), b.rows());
    let mut out = vec![0.0; n * k];
    out.par_chunks_mut(k.max(1)).enumerate().for_each(|(i, row)| {
        let gr = &g.data()[i * m..(i + 1) * m];
        for (kk, o) in row.iter_mut().enumerate() {
            *o = gr.iter().zip(b.row(kk)).map(|(p, q)| p * q).sum();
        }
    });
    Tensor::matrix(n, k, out).expect("matmul shape")
}

/// `a^T * g`.
fn matmul_at(a: &Tensor, g: &Tensor) -> Tensor {
    let at = a.transpose();
    matmul(&at, g)
}
