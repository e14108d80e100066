//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Value`] is a shared handle to a node in an implicit computation graph.
//! Every operation computes its result eagerly and, when any input requires
//! gradients, records a backward rule holding handles to its parents. Calling
//! [`Value::backward`] on a scalar seeds it with gradient 1 and propagates
//! vector-Jacobian products through the graph in reverse topological order,
//! visiting each node exactly once.
//!
//! Values created from constants record nothing, so evaluation-only code paths
//! build no graph and free intermediate results as soon as handles drop. The
//! graph is single-threaded by construction (`Rc` handles are not `Send`);
//! parallel workers each build their own graph and exchange plain tensors.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;

/// Shared handle to a node of the autodiff graph.
#[derive(Clone)]
pub struct Value(Rc<Node>);

impl std::fmt::Debug for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Value")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &self.data().data())
            .finish()
    }
}

struct Node {
    data: Tensor,
    grad: RefCell<Option<Tensor>>,
    rule: Option<Rule>,
    requires_grad: bool,
}

/// Backward rule attached to a non-leaf node: which op produced it and from
/// which parents.
enum Rule {
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Div(Value, Value),
    Neg(Value),
    Scale(Value, f64),
    Matmul(Value, Value),
    Matvec(Value, Value),
    Vecmat(Value, Value),
    Dot(Value, Value),
    Outer(Value, Value),
    Transpose(Value),
    Relu(Value),
    Tanh(Value),
    Exp(Value),
    Log(Value),
    Sqrt(Value),
    Softplus(Value),
    ClampMin(Value, f64),
    LogSumExp(Value),
    LogSumExpRows(Value),
    Sum(Value),
    Mean(Value),
    Concat(Vec<Value>),
    Slice { src: Value, start: usize },
    Get { src: Value, index: usize },
    Row { src: Value, index: usize },
    Diag(Value),
    StackScalars(Vec<Value>),
    StackRows(Vec<Value>),
}

impl Rule {
    fn parents(&self) -> Vec<&Value> {
        use Rule::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) | Matvec(a, b)
            | Vecmat(a, b) | Dot(a, b) | Outer(a, b) => vec![a, b],
            Neg(a) | Scale(a, _) | Transpose(a) | Relu(a) | Tanh(a) | Exp(a) | Log(a)
            | Sqrt(a) | Softplus(a) | ClampMin(a, _) | LogSumExp(a) | LogSumExpRows(a)
            | Sum(a) | Mean(a) | Diag(a) => vec![a],
            Slice { src, .. } | Get { src, .. } | Row { src, .. } => vec![src],
            Concat(vs) | StackScalars(vs) | StackRows(vs) => vs.iter().collect(),
        }
    }

    /// Move all parent handles out, leaving the rule parentless. Used by the
    /// iterative drop to avoid recursive destruction of deep graphs.
    fn take_parents(self) -> Vec<Value> {
        use Rule::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) | Matvec(a, b)
            | Vecmat(a, b) | Dot(a, b) | Outer(a, b) => vec![a, b],
            Neg(a) | Scale(a, _) | Transpose(a) | Relu(a) | Tanh(a) | Exp(a) | Log(a)
            | Sqrt(a) | Softplus(a) | ClampMin(a, _) | LogSumExp(a) | LogSumExpRows(a)
            | Sum(a) | Mean(a) | Diag(a) => vec![a],
            Slice { src, .. } | Get { src, .. } | Row { src, .. } => vec![src],
            Concat(vs) | StackScalars(vs) | StackRows(vs) => vs,
        }
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        // Graphs from long streams can be hundreds of thousands of nodes deep;
        // the default recursive drop of the parent chain would overflow the
        // stack. Claim sole owners iteratively instead.
        let mut work: Vec<Value> = match self.rule.take() {
            Some(rule) => rule.take_parents(),
            None => return,
        };
        while let Some(v) = work.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                if let Some(rule) = node.rule.take() {
                    work.extend(rule.take_parents());
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Construction and accessors
// ---------------------------------------------------------------------------

impl Value {
    fn from_node(data: Tensor, rule: Option<Rule>, requires_grad: bool) -> Value {
        Value(Rc::new(Node {
            data,
            grad: RefCell::new(None),
            rule: if requires_grad { rule } else { None },
            requires_grad,
        }))
    }

    /// A node that requires gradients (a trainable parameter or test input).
    pub fn leaf(data: Tensor) -> Value {
        Value::from_node(data, None, true)
    }

    /// A node that never requires gradients. Operations on constants record
    /// no backward rules.
    pub fn constant(data: Tensor) -> Value {
        Value::from_node(data, None, false)
    }

    pub fn scalar(v: f64) -> Value {
        Value::constant(Tensor::scalar(v))
    }

    pub fn data(&self) -> &Tensor {
        &self.0.data
    }

    /// Scalar payload; panics if the node is not scalar-shaped.
    pub fn item(&self) -> f64 {
        self.0.data.item()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Two handles naming the same graph node.
    pub fn ptr_eq(a: &Value, b: &Value) -> bool {
        Rc::ptr_eq(&a.0, &b.0)
    }

    /// Copy of the data as a fresh constant, cut off from the graph.
    pub fn detach(&self) -> Value {
        Value::constant(self.0.data.clone())
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    /// Remove and return the accumulated gradient.
    pub fn take_grad(&self) -> Option<Tensor> {
        self.0.grad.borrow_mut().take()
    }

    fn accumulate(&self, delta: &Tensor) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise and scalar-broadcast arithmetic
// ---------------------------------------------------------------------------

/// Elementwise combine with scalar broadcast: shapes must match exactly or one
/// operand must be scalar-shaped.
fn bcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        a.zip(b, f)
    } else if a.is_scalar() {
        let av = a.item();
        b.map(|bv| f(av, bv))
    } else if b.is_scalar() {
        let bv = b.item();
        a.map(|av| f(av, bv))
    } else {
        panic!(
            "elementwise op on incompatible shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
    }
}

/// Reduce `grad` down to `shape` by total summation when `shape` is scalar
/// (the broadcast adjoint); otherwise pass through.
fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        grad.clone()
    } else {
        debug_assert!(shape.is_empty());
        Tensor::scalar(grad.data().iter().sum())
    }
}

macro_rules! binary_op {
    ($name:ident, $rule:ident, $f:expr) => {
        pub fn $name(&self, other: &Value) -> Value {
            let data = bcast_zip(self.data(), other.data(), $f);
            let rg = self.requires_grad() || other.requires_grad();
            Value::from_node(data, Some(Rule::$rule(self.clone(), other.clone())), rg)
        }
    };
}

impl Value {
    binary_op!(add, Add, |a, b| a + b);
    binary_op!(sub, Sub, |a, b| a - b);
    binary_op!(mul, Mul, |a, b| a * b);
    binary_op!(div, Div, |a, b| a / b);

    pub fn neg(&self) -> Value {
        let data = self.data().map(|v| -v);
        Value::from_node(data, Some(Rule::Neg(self.clone())), self.requires_grad())
    }

    /// Multiply by a plain (non-learned) scalar.
    pub fn scale(&self, k: f64) -> Value {
        let data = self.data().scale(k);
        Value::from_node(data, Some(Rule::Scale(self.clone(), k)), self.requires_grad())
    }

    /// Add a plain scalar to every element.
    pub fn add_scalar(&self, k: f64) -> Value {
        self.add(&Value::scalar(k))
    }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

impl Value {
    pub fn matmul(&self, other: &Value) -> Value {
        let data = self.data().matmul(other.data());
        let rg = self.requires_grad() || other.requires_grad();
        Value::from_node(data, Some(Rule::Matmul(self.clone(), other.clone())), rg)
    }

    /// `A v` for matrix `self` and vector `v`.
    pub fn matvec(&self, v: &Value) -> Value {
        let data = self.data().matvec(v.data());
        let rg = self.requires_grad() || v.requires_grad();
        Value::from_node(data, Some(Rule::Matvec(self.clone(), v.clone())), rg)
    }

    /// `xᵀ M` for vector `self` and matrix `m`; returns a vector of length
    /// `m.cols()`.
    pub fn vecmat(&self, m: &Value) -> Value {
        let x = self.data();
        let mt = m.data();
        let (rows, cols) = (mt.rows(), mt.cols());
        assert_eq!(
            x.shape(),
            &[rows],
            "vecmat dims differ: {:?} x {:?}",
            x.shape(),
            mt.shape()
        );
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            let xi = x.data()[i];
            if xi == 0.0 {
                continue;
            }
            for j in 0..cols {
                out[j] += xi * mt.data()[i * cols + j];
            }
        }
        let rg = self.requires_grad() || m.requires_grad();
        Value::from_node(
            Tensor::vector(out),
            Some(Rule::Vecmat(self.clone(), m.clone())),
            rg,
        )
    }

    /// Inner product of two equally shaped tensors, as a scalar node.
    pub fn dot(&self, other: &Value) -> Value {
        let data = Tensor::scalar(self.data().dot(other.data()));
        let rg = self.requires_grad() || other.requires_grad();
        Value::from_node(data, Some(Rule::Dot(self.clone(), other.clone())), rg)
    }

    /// Outer product `x yᵀ` of two vectors, shape `[x.len, y.len]`.
    pub fn outer(&self, other: &Value) -> Value {
        let x = self.data();
        let y = other.data();
        assert_eq!(x.shape().len(), 1, "outer lhs must be a vector, got {:?}", x.shape());
        assert_eq!(y.shape().len(), 1, "outer rhs must be a vector, got {:?}", y.shape());
        let (m, n) = (x.len(), y.len());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = x.data()[i] * y.data()[j];
            }
        }
        let rg = self.requires_grad() || other.requires_grad();
        Value::from_node(
            Tensor::matrix(m, n, out),
            Some(Rule::Outer(self.clone(), other.clone())),
            rg,
        )
    }

    pub fn transpose(&self) -> Value {
        let data = self.data().transpose();
        Value::from_node(data, Some(Rule::Transpose(self.clone())), self.requires_grad())
    }

    /// Embed a vector as the diagonal of a square matrix.
    pub fn diag(&self) -> Value {
        let v = self.data();
        assert_eq!(v.shape().len(), 1, "diag requires a vector, got {:?}", v.shape());
        let n = v.len();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            out.data_mut()[i * n + i] = v.data()[i];
        }
        Value::from_node(out, Some(Rule::Diag(self.clone())), self.requires_grad())
    }
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

fn softplus_scalar(x: f64) -> f64 {
    // Stable log(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|}).
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

macro_rules! unary_op {
    ($name:ident, $rule:ident, $f:expr) => {
        pub fn $name(&self) -> Value {
            let data = self.data().map($f);
            Value::from_node(data, Some(Rule::$rule(self.clone())), self.requires_grad())
        }
    };
}

impl Value {
    unary_op!(relu, Relu, |v| v.max(0.0));
    unary_op!(tanh, Tanh, f64::tanh);
    unary_op!(exp, Exp, f64::exp);
    unary_op!(log, Log, f64::ln);
    unary_op!(sqrt, Sqrt, f64::sqrt);
    unary_op!(softplus, Softplus, softplus_scalar);

    /// Elementwise `max(v, floor)`. Gradient is zero where the floor binds.
    /// NaN passes through (`f64::max` would silently swallow it) so corrupt
    /// values keep propagating to the caller's finiteness checks.
    pub fn clamp_min(&self, floor: f64) -> Value {
        let data = self.data().map(|v| if v.is_nan() { v } else { v.max(floor) });
        Value::from_node(
            data,
            Some(Rule::ClampMin(self.clone(), floor)),
            self.requires_grad(),
        )
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

impl Value {
    /// `log Σ exp` over a vector, as a scalar node. Stable under large shifts;
    /// an all-`-inf` input yields `-inf` with zero gradients.
    pub fn logsumexp(&self) -> Value {
        let v = self.data();
        assert_eq!(v.shape().len(), 1, "logsumexp requires a vector, got {:?}", v.shape());
        let out = crate::tensor::log_sum_exp(v.data());
        Value::from_node(
            Tensor::scalar(out),
            Some(Rule::LogSumExp(self.clone())),
            self.requires_grad(),
        )
    }

    /// Column-wise `log Σ exp` over the rows of a matrix: `[r, c] -> [c]`.
    pub fn logsumexp_rows(&self) -> Value {
        let m = self.data();
        let (rows, cols) = (m.rows(), m.cols());
        let mut out = vec![0.0; cols];
        for j in 0..cols {
            let col: Vec<f64> = (0..rows).map(|i| m.data()[i * cols + j]).collect();
            out[j] = crate::tensor::log_sum_exp(&col);
        }
        Value::from_node(
            Tensor::vector(out),
            Some(Rule::LogSumExpRows(self.clone())),
            self.requires_grad(),
        )
    }

    pub fn sum(&self) -> Value {
        let s: f64 = self.data().data().iter().sum();
        Value::from_node(Tensor::scalar(s), Some(Rule::Sum(self.clone())), self.requires_grad())
    }

    pub fn mean(&self) -> Value {
        let n = self.data().len();
        assert!(n > 0, "mean of an empty tensor");
        let s: f64 = self.data().data().iter().sum();
        Value::from_node(
            Tensor::scalar(s / n as f64),
            Some(Rule::Mean(self.clone())),
            self.requires_grad(),
        )
    }
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

impl Value {
    /// Concatenate 1-D vectors end to end.
    pub fn concat(parts: &[Value]) -> Value {
        assert!(!parts.is_empty(), "concat of zero vectors");
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(
                p.shape().len(),
                1,
                "concat requires vectors, got {:?}",
                p.shape()
            );
            data.extend_from_slice(p.data().data());
        }
        let rg = parts.iter().any(Value::requires_grad);
        Value::from_node(
            Tensor::vector(data),
            Some(Rule::Concat(parts.to_vec())),
            rg,
        )
    }

    /// Contiguous sub-vector `[start, start + len)` of a 1-D vector.
    pub fn slice(&self, start: usize, len: usize) -> Value {
        let v = self.data();
        assert_eq!(v.shape().len(), 1, "slice requires a vector, got {:?}", v.shape());
        assert!(
            start + len <= v.len(),
            "slice [{}, {}) out of bounds for length {}",
            start,
            start + len,
            v.len()
        );
        let data = Tensor::vector(v.data()[start..start + len].to_vec());
        Value::from_node(
            data,
            Some(Rule::Slice { src: self.clone(), start }),
            self.requires_grad(),
        )
    }

    /// Single element of a 1-D vector, as a scalar node.
    pub fn get(&self, index: usize) -> Value {
        let v = self.data();
        assert_eq!(v.shape().len(), 1, "get requires a vector, got {:?}", v.shape());
        assert!(index < v.len(), "get index {} out of bounds for length {}", index, v.len());
        Value::from_node(
            Tensor::scalar(v.data()[index]),
            Some(Rule::Get { src: self.clone(), index }),
            self.requires_grad(),
        )
    }

    /// Row `index` of a matrix, as a vector node.
    pub fn row(&self, index: usize) -> Value {
        let m = self.data();
        let (rows, cols) = (m.rows(), m.cols());
        assert!(index < rows, "row index {} out of bounds for {} rows", index, rows);
        let data = Tensor::vector(m.data()[index * cols..(index + 1) * cols].to_vec());
        Value::from_node(
            data,
            Some(Rule::Row { src: self.clone(), index }),
            self.requires_grad(),
        )
    }

    /// Build a vector node from scalar nodes.
    pub fn stack_scalars(parts: &[Value]) -> Value {
        assert!(!parts.is_empty(), "stack of zero scalars");
        let data: Vec<f64> = parts.iter().map(Value::item).collect();
        let rg = parts.iter().any(Value::requires_grad);
        Value::from_node(
            Tensor::vector(data),
            Some(Rule::StackScalars(parts.to_vec())),
            rg,
        )
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(parts: &[Value]) -> Value {
        assert!(!parts.is_empty(), "stack of zero rows");
        let cols = parts[0].data().len();
        let mut data = Vec::with_capacity(parts.len() * cols);
        for p in parts {
            assert_eq!(
                p.data().shape(),
                &[cols],
                "stack_rows requires equal-length vectors"
            );
            data.extend_from_slice(p.data().data());
        }
        let rg = parts.iter().any(Value::requires_grad);
        Value::from_node(
            Tensor::matrix(parts.len(), cols, data),
            Some(Rule::StackRows(parts.to_vec())),
            rg,
        )
    }
}

/// Log density of a diagonal-covariance Gaussian at `y`, built from primitive
/// ops so gradients flow to `mean` and `var` (and `y` if it is learned).
/// All three must share shape `[d]`; `var` holds variances.
pub fn gaussian_diag_logpdf(y: &Value, mean: &Value, var: &Value) -> Value {
    let d = y.data().len();
    assert_eq!(y.shape(), mean.shape(), "gaussian logpdf: y vs mean shape");
    assert_eq!(y.shape(), var.shape(), "gaussian logpdf: y vs var shape");
    let diff = y.sub(mean);
    let mahal = diff.mul(&diff).div(var);
    let logdet = var.log();
    mahal
        .add(&logdet)
        .sum()
        .add_scalar(d as f64 * LN_2PI)
        .scale(-0.5)
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

impl Value {
    /// Reverse-mode sweep from a scalar loss. Seeds this node with gradient 1
    /// and accumulates vector-Jacobian products into every ancestor that
    /// requires gradients. Each graph node is processed exactly once.
    ///
    /// Panics if called on a non-scalar node.
    pub fn backward(&self) {
        assert!(
            self.data().is_scalar(),
            "backward requires a scalar loss, got shape {:?}",
            self.shape()
        );
        if !self.requires_grad() {
            return;
        }

        // Iterative post-order DFS for the topological order.
        let mut topo: Vec<Value> = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Value, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.0));
        while let Some((node, child)) = stack.pop() {
            let parents: Vec<Value> = match &node.0.rule {
                Some(rule) => rule.parents().into_iter().cloned().collect(),
                None => Vec::new(),
            };
            if child < parents.len() {
                stack.push((node.clone(), child + 1));
                let p = &parents[child];
                if p.requires_grad() && visited.insert(Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), 0));
                }
            } else {
                topo.push(node);
            }
        }

        self.accumulate(&Tensor::scalar(1.0));
        for node in topo.iter().rev() {
            let grad = match node.0.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            if let Some(rule) = &node.0.rule {
                propagate(rule, node.data(), &grad);
            }
        }
    }
}

fn propagate(rule: &Rule, out: &Tensor, g: &Tensor) {
    use Rule::*;
    match rule {
        Add(a, b) => {
            if a.requires_grad() {
                a.accumulate(&reduce_to_shape(g, a.shape()));
            }
            if b.requires_grad() {
                b.accumulate(&reduce_to_shape(g, b.shape()));
            }
        }
        Sub(a, b) => {
            if a.requires_grad() {
                a.accumulate(&reduce_to_shape(g, a.shape()));
            }
            if b.requires_grad() {
                let neg = g.scale(-1.0);
                b.accumulate(&reduce_to_shape(&neg, b.shape()));
            }
        }
        Mul(a, b) => {
            if a.requires_grad() {
                let da = bcast_zip(g, b.data(), |gi, bi| gi * bi);
                a.accumulate(&reduce_to_shape(&da, a.shape()));
            }
            if b.requires_grad() {
                let db = bcast_zip(g, a.data(), |gi, ai| gi * ai);
                b.accumulate(&reduce_to_shape(&db, b.shape()));
            }
        }
        Div(a, b) => {
            if a.requires_grad() {
                let da = bcast_zip(g, b.data(), |gi, bi| gi / bi);
                a.accumulate(&reduce_to_shape(&da, a.shape()));
            }
            if b.requires_grad() {
                // d(a/b)/db = -a / b^2 = -out / b.
                let goverb = bcast_zip(g, b.data(), |gi, bi| gi / bi);
                let db = bcast_zip(&goverb, out, |gb, oi| -gb * oi);
                b.accumulate(&reduce_to_shape(&db, b.shape()));
            }
        }
        Neg(a) => {
            if a.requires_grad() {
                a.accumulate(&g.scale(-1.0));
            }
        }
        Scale(a, k) => {
            if a.requires_grad() {
                a.accumulate(&g.scale(*k));
            }
        }
        Matmul(a, b) => {
            if a.requires_grad() {
                a.accumulate(&g.matmul(&b.data().transpose()));
            }
            if b.requires_grad() {
                b.accumulate(&a.data().transpose().matmul(g));
            }
        }
        Matvec(a, v) => {
            if a.requires_grad() {
                // dA = g vᵀ
                let (m, k) = (a.data().rows(), a.data().cols());
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..k {
                        da[i * k + j] = g.data()[i] * v.data().data()[j];
                    }
                }
                a.accumulate(&Tensor::matrix(m, k, da));
            }
            if v.requires_grad() {
                v.accumulate(&a.data().transpose().matvec(g));
            }
        }
        Vecmat(x, m) => {
            if x.requires_grad() {
                x.accumulate(&m.data().matvec(g));
            }
            if m.requires_grad() {
                let (rows, cols) = (m.data().rows(), m.data().cols());
                let mut dm = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dm[i * cols + j] = x.data().data()[i] * g.data()[j];
                    }
                }
                m.accumulate(&Tensor::matrix(rows, cols, dm));
            }
        }
        Dot(a, b) => {
            let gs = g.item();
            if a.requires_grad() {
                a.accumulate(&b.data().scale(gs));
            }
            if b.requires_grad() {
                b.accumulate(&a.data().scale(gs));
            }
        }
        Outer(x, y) => {
            if x.requires_grad() {
                x.accumulate(&g.matvec(y.data()));
            }
            if y.requires_grad() {
                y.accumulate(&g.transpose().matvec(x.data()));
            }
        }
        Transpose(a) => {
            if a.requires_grad() {
                a.accumulate(&g.transpose());
            }
        }
        Relu(a) => {
            if a.requires_grad() {
                let da = a.data().zip_with_grad(g, |ai, gi| if ai > 0.0 { gi } else { 0.0 });
                a.accumulate(&da);
            }
        }
        Tanh(a) => {
            if a.requires_grad() {
                let da = out.zip_with_grad(g, |oi, gi| gi * (1.0 - oi * oi));
                a.accumulate(&da);
            }
        }
        Exp(a) => {
            if a.requires_grad() {
                let da = out.zip_with_grad(g, |oi, gi| gi * oi);
                a.accumulate(&da);
            }
        }
        Log(a) => {
            if a.requires_grad() {
                let da = a.data().zip_with_grad(g, |ai, gi| gi / ai);
                a.accumulate(&da);
            }
        }
        Sqrt(a) => {
            if a.requires_grad() {
                let da = out.zip_with_grad(g, |oi, gi| gi / (2.0 * oi));
                a.accumulate(&da);
            }
        }
        Softplus(a) => {
            if a.requires_grad() {
                let da = a.data().zip_with_grad(g, |ai, gi| gi * sigmoid(ai));
                a.accumulate(&da);
            }
        }
        ClampMin(a, floor) => {
            if a.requires_grad() {
                let f = *floor;
                let da = a.data().zip_with_grad(g, |ai, gi| if ai > f { gi } else { 0.0 });
                a.accumulate(&da);
            }
        }
        LogSumExp(a) => {
            if a.requires_grad() {
                let gs = g.item();
                let lse = out.item();
                let da = if lse.is_finite() {
                    a.data().map(|ai| gs * (ai - lse).exp())
                } else {
                    Tensor::zeros(a.shape())
                };
                a.accumulate(&da);
            }
        }
        LogSumExpRows(a) => {
            if a.requires_grad() {
                let (rows, cols) = (a.data().rows(), a.data().cols());
                let mut da = vec![0.0; rows * cols];
                for j in 0..cols {
                    let lse = out.data()[j];
                    if !lse.is_finite() {
                        continue;
                    }
                    for i in 0..rows {
                        da[i * cols + j] = g.data()[j] * (a.data().data()[i * cols + j] - lse).exp();
                    }
                }
                a.accumulate(&Tensor::matrix(rows, cols, da));
            }
        }
        Sum(a) => {
            if a.requires_grad() {
                a.accumulate(&Tensor::filled(a.shape(), g.item()));
            }
        }
        Mean(a) => {
            if a.requires_grad() {
                let n = a.data().len() as f64;
                a.accumulate(&Tensor::filled(a.shape(), g.item() / n));
            }
        }
        Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = p.data().len();
                if p.requires_grad() {
                    p.accumulate(&Tensor::vector(g.data()[offset..offset + len].to_vec()));
                }
                offset += len;
            }
        }
        Slice { src, start } => {
            if src.requires_grad() {
                let mut ds = Tensor::zeros(src.shape());
                let len = g.data().len();
                ds.data_mut()[*start..start + len].copy_from_slice(g.data());
                src.accumulate(&ds);
            }
        }
        Get { src, index } => {
            if src.requires_grad() {
                let mut ds = Tensor::zeros(src.shape());
                ds.data_mut()[*index] = g.item();
                src.accumulate(&ds);
            }
        }
        Row { src, index } => {
            if src.requires_grad() {
                let cols = src.data().cols();
                let mut ds = Tensor::zeros(src.shape());
                ds.data_mut()[index * cols..(index + 1) * cols].copy_from_slice(g.data());
                src.accumulate(&ds);
            }
        }
        Diag(v) => {
            if v.requires_grad() {
                let n = v.data().len();
                let dv: Vec<f64> = (0..n).map(|i| g.data()[i * n + i]).collect();
                v.accumulate(&Tensor::vector(dv));
            }
        }
        StackScalars(parts) => {
            for (i, p) in parts.iter().enumerate() {
                if p.requires_grad() {
                    p.accumulate(&Tensor::scalar(g.data()[i]));
                }
            }
        }
        StackRows(parts) => {
            let cols = g.cols();
            for (i, p) in parts.iter().enumerate() {
                if p.requires_grad() {
                    p.accumulate(&Tensor::vector(
                        g.data()[i * cols..(i + 1) * cols].to_vec(),
                    ));
                }
            }
        }
    }
}

impl Tensor {
    /// Elementwise combine with an equally shaped gradient tensor.
    fn zip_with_grad(&self, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.zip(g, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
    }

    fn rand_positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(0.3..2.0)).collect(),
        )
    }

    /// Scalarize an arbitrary output with fixed pseudo-random weights so
    /// transposition mistakes cannot cancel out in a plain sum.
    fn weighted(out: &Value, rng: &mut ChaCha8Rng) -> Value {
        let w = Value::constant(rand_tensor(out.shape(), rng));
        if out.shape().is_empty() {
            out.mul(&w)
        } else {
            out.mul(&w).sum()
        }
    }

    /// Central finite differences against the analytic gradient for every
    /// input element. `f` must rebuild the graph from scratch on each call.
    fn fd_check(name: &str, inputs: &[Tensor], f: &dyn Fn(&[Value]) -> Value) {
        const H: f64 = 1e-5;
        let leaves: Vec<Value> = inputs.iter().cloned().map(Value::leaf).collect();
        let loss = f(&leaves);
        loss.backward();
        for (i, input) in inputs.iter().enumerate() {
            let grad = leaves[i]
                .grad()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            for j in 0..input.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Value> = Vec::with_capacity(inputs.len());
                    for (k, t) in inputs.iter().enumerate() {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += delta;
                        }
                        perturbed.push(Value::leaf(t));
                    }
                    f(&perturbed).item()
                };
                let fd = (eval(H) - eval(-H)) / (2.0 * H);
                let ad = grad.data()[j];
                let denom = ad.abs().max(fd.abs()).max(1.0);
                assert!(
                    ((ad - fd) / denom).abs() < 1e-6,
                    "{}: input {} elem {}: analytic {:.9e} vs fd {:.9e}",
                    name,
                    i,
                    j,
                    ad,
                    fd
                );
            }
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a4 = rand_tensor(&[4], &mut rng);
        let b4 = rand_tensor(&[4], &mut rng);
        let p4 = rand_positive(&[4], &mut rng);
        let s = rand_tensor(&[], &mut rng);
        let m23 = rand_tensor(&[2, 3], &mut rng);
        let m34 = rand_tensor(&[3, 4], &mut rng);
        let v3 = rand_tensor(&[3], &mut rng);

        let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&[Value]) -> Value>)> = vec![
            ("add", vec![a4.clone(), b4.clone()], Box::new(|v| v[0].add(&v[1]).sum())),
            ("add_bcast", vec![a4.clone(), s.clone()], Box::new(|v| v[0].add(&v[1]).sum())),
            ("sub", vec![a4.clone(), b4.clone()], Box::new(|v| v[0].sub(&v[1]).sum())),
            ("sub_bcast", vec![s.clone(), a4.clone()], Box::new(|v| v[0].sub(&v[1]).sum())),
            ("mul", vec![a4.clone(), b4.clone()], Box::new(|v| v[0].mul(&v[1]).sum())),
            ("mul_bcast", vec![a4.clone(), s.clone()], Box::new(|v| v[0].mul(&v[1]).sum())),
            ("div", vec![a4.clone(), p4.clone()], Box::new(|v| v[0].div(&v[1]).sum())),
            (
                "div_bcast",
                vec![a4.clone(), rand_positive(&[], &mut rng)],
                Box::new(|v| v[0].div(&v[1]).sum()),
            ),
            ("neg", vec![a4.clone()], Box::new(|v| v[0].neg().sum())),
            ("scale", vec![a4.clone()], Box::new(|v| v[0].scale(-1.7).sum())),
            ("matmul", vec![m23.clone(), m34.clone()], {
                let r = ChaCha8Rng::seed_from_u64(11);
                Box::new(move |v| weighted(&v[0].matmul(&v[1]), &mut r.clone()))
            }),
            ("matvec", vec![m23.clone(), v3.clone()], {
                let r = ChaCha8Rng::seed_from_u64(12);
                Box::new(move |v| weighted(&v[0].matvec(&v[1]), &mut r.clone()))
            }),
            ("vecmat", vec![v3.clone(), m34.clone()], {
                let r = ChaCha8Rng::seed_from_u64(13);
                Box::new(move |v| weighted(&v[0].vecmat(&v[1]), &mut r.clone()))
            }),
            ("dot", vec![a4.clone(), b4.clone()], Box::new(|v| v[0].dot(&v[1]))),
            ("outer", vec![v3.clone(), a4.clone()], {
                let r = ChaCha8Rng::seed_from_u64(14);
                Box::new(move |v| weighted(&v[0].outer(&v[1]), &mut r.clone()))
            }),
            ("transpose", vec![m23.clone()], {
                let r = ChaCha8Rng::seed_from_u64(15);
                Box::new(move |v| weighted(&v[0].transpose(), &mut r.clone()))
            }),
            ("relu", vec![a4.clone()], Box::new(|v| v[0].relu().sum())),
            ("tanh", vec![a4.clone()], Box::new(|v| v[0].tanh().sum())),
            ("exp", vec![a4.clone()], Box::new(|v| v[0].exp().sum())),
            ("log", vec![p4.clone()], Box::new(|v| v[0].log().sum())),
            ("sqrt", vec![p4.clone()], Box::new(|v| v[0].sqrt().sum())),
            ("softplus", vec![a4.clone()], Box::new(|v| v[0].softplus().sum())),
            ("clamp_min", vec![a4.clone()], Box::new(|v| v[0].clamp_min(0.3).sum())),
            ("logsumexp", vec![a4.clone()], Box::new(|v| v[0].logsumexp())),
            ("logsumexp_rows", vec![m23.clone()], {
                let r = ChaCha8Rng::seed_from_u64(16);
                Box::new(move |v| weighted(&v[0].logsumexp_rows(), &mut r.clone()))
            }),
            ("sum", vec![m23.clone()], Box::new(|v| v[0].sum())),
            ("mean", vec![a4.clone()], Box::new(|v| v[0].mean())),
            ("concat", vec![a4.clone(), v3.clone()], {
                let r = ChaCha8Rng::seed_from_u64(17);
                Box::new(move |v| weighted(&Value::concat(&[v[0].clone(), v[1].clone()]), &mut r.clone()))
            }),
            ("slice", vec![a4.clone()], Box::new(|v| v[0].slice(1, 2).sum())),
            ("get", vec![a4.clone()], Box::new(|v| v[0].get(2))),
            ("row", vec![m23.clone()], {
                let r = ChaCha8Rng::seed_from_u64(18);
                Box::new(move |v| weighted(&v[0].row(1), &mut r.clone()))
            }),
            ("diag", vec![v3.clone()], {
                let r = ChaCha8Rng::seed_from_u64(19);
                Box::new(move |v| weighted(&v[0].diag(), &mut r.clone()))
            }),
            ("stack_scalars", vec![s.clone(), rand_tensor(&[], &mut rng)], {
                let r = ChaCha8Rng::seed_from_u64(20);
                Box::new(move |v| {
                    weighted(
                        &Value::stack_scalars(&[v[0].clone(), v[1].clone()]),
                        &mut r.clone(),
                    )
                })
            }),
            ("stack_rows", vec![a4.clone(), b4.clone()], {
                let r = ChaCha8Rng::seed_from_u64(21);
                Box::new(move |v| {
                    weighted(&Value::stack_rows(&[v[0].clone(), v[1].clone()]), &mut r.clone())
                })
            }),
            (
                "gaussian_logpdf",
                vec![a4.clone(), b4.clone(), p4.clone()],
                Box::new(|v| gaussian_diag_logpdf(&v[0], &v[1], &v[2])),
            ),
            (
                "composite",
                vec![m23.clone(), v3.clone(), a4.clone()],
                Box::new(|v| {
                    let h = v[0].matvec(&v[1]).tanh();
                    let mixed = Value::concat(&[h, v[2].softplus()]);
                    mixed.logsumexp()
                }),
            ),
        ];

        for (name, inputs, f) in &cases {
            fd_check(name, inputs, f.as_ref());
        }
    }

    #[test]
    fn value_reused_twice_accumulates_both_paths() {
        // f(a) = a·a  =>  df/da = 2a.
        let a = Value::leaf(Tensor::vector(vec![1.5, -2.0]));
        let loss = a.dot(&a);
        loss.backward();
        let g = a.grad().unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-12);
        assert!((g.data()[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = rand_tensor(&[5], &mut rng);

        let build = |v: &Value| -> (Value, Value) {
            let f = v.tanh().sum();
            let g = v.mul(v).logsumexp();
            (f, g)
        };

        let (alpha, beta) = (0.7, -1.3);

        let a = Value::leaf(t.clone());
        let (f, _) = build(&a);
        f.backward();
        let gf = a.grad().unwrap();

        let b = Value::leaf(t.clone());
        let (_, g) = build(&b);
        g.backward();
        let gg = b.grad().unwrap();

        let c = Value::leaf(t.clone());
        let (f2, g2) = build(&c);
        let combined = f2.scale(alpha).add(&g2.scale(beta));
        combined.backward();
        let gc = c.grad().unwrap();

        let expect = gf.scale(alpha).add(&gg.scale(beta));
        assert!(gc.max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn constants_record_no_graph() {
        let a = Value::constant(Tensor::vector(vec![1.0, 2.0]));
        let b = Value::constant(Tensor::vector(vec![3.0, 4.0]));
        let c = a.add(&b).tanh().sum();
        assert!(!c.requires_grad());
        c.backward();
        assert!(c.grad().is_none());
        assert!(a.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let a = Value::leaf(Tensor::scalar(2.0));
        let through = a.mul(&a);
        let blocked = through.detach().mul(&a);
        blocked.backward();
        // d/da [const(4) * a] = 4, not d/da [a^3] = 12.
        assert!((a.grad().unwrap().item() - 4.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let a = Value::leaf(Tensor::vector(vec![1.0, 2.0]));
        a.relu().backward();
    }

    #[test]
    fn logsumexp_of_all_neg_inf_is_neg_inf_with_zero_grads() {
        let a = Value::leaf(Tensor::vector(vec![f64::NEG_INFINITY; 3]));
        let l = a.logsumexp();
        assert_eq!(l.item(), f64::NEG_INFINITY);
        l.backward();
        assert_eq!(a.grad().unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn deep_graph_drops_without_stack_overflow() {
        let mut v = Value::leaf(Tensor::scalar(0.0));
        for _ in 0..200_000 {
            v = v.add_scalar(1.0);
        }
        assert_eq!(v.item(), 200_000.0);
        drop(v);
    }

    #[test]
    fn gaussian_logpdf_standard_normal_at_zero() {
        let y = Value::constant(Tensor::vector(vec![0.0]));
        let mean = Value::constant(Tensor::vector(vec![0.0]));
        let var = Value::constant(Tensor::vector(vec![1.0]));
        let lp = gaussian_diag_logpdf(&y, &mean, &var);
        assert!((lp.item() - (-0.5 * LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_example_two_zeros() {
        let v = Value::constant(Tensor::vector(vec![0.0, 0.0]));
        assert!((v.logsumexp().item() - 2.0f64.ln()).abs() < 1e-15);
    }
}
