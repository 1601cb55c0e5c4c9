//! Reverse-mode differentiation on an eagerly built operation tape.
//!
//! Every forward operation appends one node holding its output value, the
//! operation record, and whatever intermediates its backward rule needs.
//! Creation order is a topological order, so the backward pass is a single
//! reverse sweep that visits each node exactly once and adds gradient
//! contributions into shared inputs.
//!
//! Nodes whose inputs all have `needs_grad == false` are detached: the sweep
//! never propagates through them. `stop_grad` produces such a node
//! unconditionally.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{pooled_uninit, pooled_zeros, recycle, shape_str, Matrix, NumericsError, LOG_CLAMP};
use ndarray::linalg::general_mat_mul;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// alpha * a . b, optionally with b transposed.
    Matmul {
        a: Var,
        b: Var,
        trans_b: bool,
        alpha: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast-add a 1 x F row vector over every row of x.
    AddRow {
        x: Var,
        row: Var,
    },
    /// Broadcast-multiply a T x 1 column over every column of x.
    MulCol {
        x: Var,
        col: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Transpose(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    StopGrad,
    Exp(Var),
    /// ln(max(x, LOG_CLAMP)).
    LogClamped(Var),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        index: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    /// Temporal alignment to a new row count: bin-averaging when shrinking,
    /// floor-replication when growing.
    AlignRows {
        x: Var,
        t_in: usize,
    },
}

#[derive(Debug, Clone)]
enum Saved {
    None,
    LayerNorm { xhat: Matrix, inv_std: Vec<f64> },
    /// Standard normal CDF of the inputs, reused by the GELU backward.
    Gelu { cdf: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    saved: Saved,
    needs_grad: bool,
}

/// Which values parameters are read from when `Tape::param` is called.
enum ParamSource<'a> {
    Store(&'a ParamStore),
    /// Override values indexed by `ParamId`; used by the finite-difference
    /// harness to evaluate at perturbed points.
    Values(&'a [Matrix]),
}

pub struct Tape<'a> {
    nodes: Vec<Node>,
    source: ParamSource<'a>,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

/// Gradients produced by one backward sweep, indexed by `Var`.
pub struct Grads {
    by_node: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}


impl Drop for Tape<'_> {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            recycle(node.value);
            match node.saved {
                Saved::None => {}
                Saved::LayerNorm { xhat, .. } => recycle(xhat),
                Saved::Gelu { cdf } => recycle(cdf),
            }
        }
    }
}

impl Drop for Grads {
    fn drop(&mut self) {
        for g in self.by_node.drain(..).flatten() {
            recycle(g);
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            nodes: Vec::new(),
            source: ParamSource::Store(store),
            bound: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// Tape whose parameter reads come from `values` instead of a store.
    pub fn with_values(values: &'a [Matrix]) -> Self {
        Tape {
            nodes: Vec::new(),
            source: ParamSource::Values(values),
            bound: vec![None; values.len()],
            grad_enabled: true,
        }
    }

    /// Evaluation-only tape: parameters are registered detached, so the
    /// whole graph stays gradient-free.
    pub fn inference(store: &'a ParamStore) -> Self {
        let mut t = Tape::new(store);
        t.grad_enabled = false;
        t
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

    /// The scalar held by a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[(0, 0)]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, saved: Saved, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            saved,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a detached constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, Saved::None, false)
    }

    /// Register a leaf that participates in differentiation.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        let ng = self.grad_enabled;
        self.push(value, Op::Leaf, Saved::None, ng)
    }

    /// Register a parameter (memoized: repeated calls return the same node).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = match self.source {
            ParamSource::Store(s) => s.value(id).clone(),
            ParamSource::Values(vals) => vals[id.0].clone(),
        };
        let v = self.leaf(value);
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameters touched by this tape, in registration order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), var)))
            .collect()
    }

    // ── Operations ───────────────────────────────────────────────────

    fn out_grad2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_ext(a, b, false, 1.0)
    }

    /// alpha * a . b, with optional transposition of b.
    pub fn matmul_ext(
        &mut self,
        a: Var,
        b: Var,
        trans_b: bool,
        alpha: f64,
    ) -> Result<Var, NumericsError> {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        let (bk, _bn) = if trans_b { (bc, br) } else { (br, bc) };
        if ac != bk {
            return Err(NumericsError::DimMismatch {
                op: "matmul",
                lhs: format!("{ar}x{ac}"),
                rhs: if trans_b {
                    format!("{br}x{bc} (transposed)")
                } else {
                    format!("{br}x{bc}")
                },
            });
        }
        let value = {
            let av = self.value(a);
            let bv = self.value(b);
            let (m, n) = (av.nrows(), if trans_b { bv.nrows() } else { bv.ncols() });
            let mut out = pooled_uninit(m, n);
            if trans_b {
                general_mat_mul(alpha, av, &bv.t(), 0.0, &mut out);
            } else {
                general_mat_mul(alpha, av, bv, 0.0, &mut out);
            }
            out
        };
        let ng = self.out_grad2(a, b);
        Ok(self.push(value, Op::Matmul { a, b, trans_b, alpha }, Saved::None, ng))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(), NumericsError> {
        if self.value(a).dim() != self.value(b).dim() {
            return Err(NumericsError::DimMismatch {
                op: op_name,
                lhs: shape_str(self.value(a)),
                rhs: shape_str(self.value(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape("add", a, b)?;
        let value = self.zip_into(a, b, |x, y| x + y);
        let ng = self.out_grad2(a, b);
        Ok(self.push(value, Op::Add(a, b), Saved::None, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape("sub", a, b)?;
        let value = self.zip_into(a, b, |x, y| x - y);
        let ng = self.out_grad2(a, b);
        Ok(self.push(value, Op::Sub(a, b), Saved::None, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape("mul", a, b)?;
        let value = self.zip_into(a, b, |x, y| x * y);
        let ng = self.out_grad2(a, b);
        Ok(self.push(value, Op::Mul(a, b), Saved::None, ng))
    }

    /// Elementwise combination into a pooled output.
    fn zip_into(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let av = self.value(a);
        let bv = self.value(b);
        let (r, c) = av.dim();
        let mut out = pooled_uninit(r, c);
        let os = out.as_slice_mut().expect("contiguous");
        let asl = av.as_slice().expect("contiguous");
        let bsl = bv.as_slice().expect("contiguous");
        for i in 0..os.len() {
            os[i] = f(asl[i], bsl[i]);
        }
        out
    }

    /// Elementwise map into a pooled output.
    fn map_into(&self, x: Var, f: impl Fn(f64) -> f64) -> Matrix {
        let xv = self.value(x);
        let (r, c) = xv.dim();
        let mut out = pooled_uninit(r, c);
        let os = out.as_slice_mut().expect("contiguous");
        let xs = xv.as_slice().expect("contiguous");
        for i in 0..os.len() {
            os[i] = f(xs[i]);
        }
        out
    }

    /// x + row, broadcasting the 1 x F row over every row of x.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (_, xc) = self.value(x).dim();
        let (rr, rc) = self.value(row).dim();
        if rr != 1 || rc != xc {
            return Err(NumericsError::DimMismatch {
                op: "add_row",
                lhs: shape_str(self.value(x)),
                rhs: shape_str(self.value(row)),
            });
        }
        let value = {
            let xv = self.value(x);
            let rv = self.value(row).as_slice().expect("contiguous");
            let (r, c) = xv.dim();
            let mut out = pooled_uninit(r, c);
            let os = out.as_slice_mut().expect("contiguous");
            let xs = xv.as_slice().expect("contiguous");
            for i in 0..r {
                let base = i * c;
                for j in 0..c {
                    os[base + j] = xs[base + j] + rv[j];
                }
            }
            out
        };
        let ng = self.out_grad2(x, row);
        Ok(self.push(value, Op::AddRow { x, row }, Saved::None, ng))
    }

    /// x * col, broadcasting the T x 1 column over every column of x.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var, NumericsError> {
        let (xr, _) = self.value(x).dim();
        let (cr, cc) = self.value(col).dim();
        if cc != 1 || cr != xr {
            return Err(NumericsError::DimMismatch {
                op: "mul_col",
                lhs: shape_str(self.value(x)),
                rhs: shape_str(self.value(col)),
            });
        }
        let value = {
            let xv = self.value(x);
            let cv = self.value(col).as_slice().expect("contiguous");
            let (r, c) = xv.dim();
            let mut out = pooled_uninit(r, c);
            let os = out.as_slice_mut().expect("contiguous");
            let xs = xv.as_slice().expect("contiguous");
            for i in 0..r {
                let base = i * c;
                for j in 0..c {
                    os[base + j] = xs[base + j] * cv[i];
                }
            }
            out
        };
        let ng = self.out_grad2(x, col);
        Ok(self.push(value, Op::MulCol { x, col }, Saved::None, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.map_into(x, |v| v * c);
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Scale { x, c }, Saved::None, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Transpose(x), Saved::None, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map_into(x, crate::tensor::sigmoid_scalar);
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Sigmoid(x), Saved::None, ng)
    }

    /// Row-wise softmax with max subtraction. Requires at least two columns;
    /// this is the classifier-facing form.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (_, c) = self.value(x).dim();
        if c < 2 {
            return Err(NumericsError::BadArgument {
                op: "softmax_rows",
                requirement: "at least 2 columns",
                got: shape_str(self.value(x)),
            });
        }
        Ok(self.softmax_rows_any(x))
    }

    /// Row softmax without the column floor; attention over a single key is
    /// the identity distribution.
    pub fn softmax_rows_any(&mut self, x: Var) -> Var {
        let (rows, cols) = self.value(x).dim();
        let mut value = pooled_uninit(rows, cols);
        value
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(self.value(x).as_slice().expect("contiguous"));
        let flat = value.as_slice_mut().expect("contiguous");
        for r in 0..rows {
            let row = &mut flat[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in row.iter_mut() {
                *v -= max;
            }
            crate::tensor::exp_nonpos_slice(row);
            let sum: f64 = row.iter().sum();
            let inv = 1.0 / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::SoftmaxRows(x), Saved::None, ng)
    }

    /// Per-row normalization to zero mean and unit variance (population
    /// variance, floored by eps), followed by the gamma/beta affine.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let (rows, cols) = self.value(x).dim();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let d = self.value(v).dim();
            if d != (1, cols) {
                return Err(NumericsError::BadArgument {
                    op: "layer_norm",
                    requirement: "1 x F affine vectors",
                    got: format!("{name} is {}x{}", d.0, d.1),
                });
            }
        }
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let mut xhat = pooled_uninit(rows, cols);
        xhat.as_slice_mut()
            .unwrap()
            .copy_from_slice(self.value(x).as_slice().expect("contiguous"));
        let mut value = pooled_uninit(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        {
            let g = self.value(gamma).as_slice().expect("contiguous");
            let b = self.value(beta).as_slice().expect("contiguous");
            let xh = xhat.as_slice_mut().expect("contiguous");
            let out = value.as_slice_mut().expect("contiguous");
            for r in 0..rows {
                let row = &mut xh[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let mut var = 0.0;
                for v in row.iter() {
                    let d = v - mean;
                    var += d * d;
                }
                var /= cols as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std.push(istd);
                let out_row = &mut out[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    let h = (row[j] - mean) * istd;
                    row[j] = h;
                    out_row[j] = h * g[j] + b[j];
                }
            }
        }
        let ng = self.out_grad2(x, gamma) || self.nodes[beta.0].needs_grad;
        Ok(self.push(
            value,
            Op::LayerNorm { x, gamma, beta },
            Saved::LayerNorm { xhat, inv_std },
            ng,
        ))
    }

    /// Identity forward; no gradient flows to any ancestor through this edge.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.map_into(x, |v| v);
        self.push(value, Op::StopGrad, Saved::None, false)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.map_into(x, f64::exp);
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Exp(x), Saved::None, ng)
    }

    /// ln(max(x, 1e-12)); the clamp keeps saturated probabilities finite.
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.map_into(x, |v| v.max(LOG_CLAMP).ln());
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::LogClamped(x), Saved::None, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (cdf, value) = {
            let xv = self.value(x);
            let (r, c) = xv.dim();
            let mut cdf = pooled_uninit(r, c);
            let mut value = pooled_uninit(r, c);
            let xs = xv.as_slice().expect("contiguous");
            let cs = cdf.as_slice_mut().unwrap();
            let vs = value.as_slice_mut().unwrap();
            for i in 0..xs.len() {
                let phi = 0.5 * (1.0 + libm::erf(xs[i] * std::f64::consts::FRAC_1_SQRT_2));
                cs[i] = phi;
                vs[i] = xs[i] * phi;
            }
            (cdf, value)
        };
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Gelu(x), Saved::Gelu { cdf }, ng)
    }

    /// Concatenate along the feature axis; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).nrows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).nrows() != rows {
                return Err(NumericsError::DimMismatch {
                    op: "concat_cols",
                    lhs: shape_str(self.value(parts[0])),
                    rhs: shape_str(self.value(p)),
                });
            }
            cols += self.value(p).ncols();
        }
        let mut value = pooled_uninit(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            let w = pv.ncols();
            value
                .slice_mut(ndarray::s![.., at..at + w])
                .assign(pv);
            at += w;
        }
        let ng = parts.iter().any(|&p| self.nodes[p.0].needs_grad);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), Saved::None, ng))
    }

    /// Concatenate along the time axis; all parts share the feature width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).ncols();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).ncols() != cols {
                return Err(NumericsError::DimMismatch {
                    op: "concat_rows",
                    lhs: shape_str(self.value(parts[0])),
                    rhs: shape_str(self.value(p)),
                });
            }
            rows += self.value(p).nrows();
        }
        let mut value = pooled_uninit(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            let h = pv.nrows();
            value.slice_mut(ndarray::s![at..at + h, ..]).assign(pv);
            at += h;
        }
        let ng = parts.iter().any(|&p| self.nodes[p.0].needs_grad);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), Saved::None, ng))
    }

    /// Contiguous row window [start, start+len).
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (rows, _) = self.value(x).dim();
        if start + len > rows {
            return Err(NumericsError::BadArgument {
                op: "slice_rows",
                requirement: "window within row count",
                got: format!("[{start}, {}) of {rows}", start + len),
            });
        }
        let value = {
            let xv = self.value(x);
            let mut out = pooled_uninit(len, xv.ncols());
            out.assign(&xv.slice(ndarray::s![start..start + len, ..]));
            out
        };
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(value, Op::SliceRows { x, start }, Saved::None, ng))
    }

    /// Gather the given rows, in the given order.
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let (rows, cols) = self.value(x).dim();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::BadArgument {
                op: "select_rows",
                requirement: "indices within row count",
                got: format!("{bad} of {rows}"),
            });
        }
        let mut value = pooled_uninit(index.len(), cols);
        for (k, &i) in index.iter().enumerate() {
            value.row_mut(k).assign(&self.value(x).row(i));
        }
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                index: index.to_vec(),
            },
            Saved::None,
            ng,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.nodes[x.0].needs_grad;
        self.push(
            Matrix::from_elem((1, 1), s),
            Op::SumAll(x),
            Saved::None,
            ng,
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.value(x).sum() / n;
        let ng = self.nodes[x.0].needs_grad;
        self.push(
            Matrix::from_elem((1, 1), s),
            Op::MeanAll(x),
            Saved::None,
            ng,
        )
    }

    /// Temporal alignment to `t_target` rows.
    ///
    /// Shrinking averages over the bin [floor(i*T_in/T), floor((i+1)*T_in/T));
    /// growing replicates row floor(i*T_in/T). Equal counts are the identity.
    pub fn align_rows(&mut self, x: Var, t_target: usize) -> Result<Var, NumericsError> {
        if t_target == 0 {
            return Err(NumericsError::BadArgument {
                op: "align_rows",
                requirement: "positive target length",
                got: "0".into(),
            });
        }
        let (t_in, cols) = self.value(x).dim();
        let mut value = if t_target <= t_in {
            pooled_zeros(t_target, cols)
        } else {
            pooled_uninit(t_target, cols)
        };
        if t_target <= t_in {
            for i in 0..t_target {
                let lo = i * t_in / t_target;
                let hi = (i + 1) * t_in / t_target;
                let inv = 1.0 / (hi - lo) as f64;
                for j in lo..hi {
                    value.row_mut(i).scaled_add(inv, &self.value(x).row(j));
                }
            }
        } else {
            for i in 0..t_target {
                let src = i * t_in / t_target;
                value.row_mut(i).assign(&self.value(x).row(src));
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(value, Op::AlignRows { x, t_in }, Saved::None, ng))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each node is visited once; gradient
    /// contributions into shared inputs are additive.
    pub fn backward(&self, loss: Var) -> Result<Grads, NumericsError> {
        let dim = self.value(loss).dim();
        if dim != (1, 1) {
            return Err(NumericsError::NonScalarLoss {
                got: format!("{}x{}", dim.0, dim.1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));
        }
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let d = grads[i].take().expect("present");
            self.backward_node(i, &d, &mut grads);
            grads[i] = Some(d);
        }
        Ok(Grads { by_node: grads })
    }


    /// Temporary profiling helper: per-op-kind cumulative backward times.
    pub fn backward_profiled(&self, loss: Var) -> Result<(Grads, Vec<(String, f64, usize)>), NumericsError> {
        use std::collections::HashMap;
        use std::time::Instant;
        let dim = self.value(loss).dim();
        if dim != (1, 1) {
            return Err(NumericsError::NonScalarLoss {
                got: format!("{}x{}", dim.0, dim.1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));
        }
        let mut table: HashMap<&'static str, (f64, usize)> = HashMap::new();
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let d = grads[i].take().expect("present");
            let kind = match &self.nodes[i].op {
                Op::Leaf => "leaf",
                Op::Matmul { .. } => "matmul",
                Op::Add(..) => "add",
                Op::Sub(..) => "sub",
                Op::Mul(..) => "mul",
                Op::AddRow { .. } => "add_row",
                Op::MulCol { .. } => "mul_col",
                Op::Scale { .. } => "scale",
                Op::Transpose(_) => "transpose",
                Op::Sigmoid(_) => "sigmoid",
                Op::SoftmaxRows(_) => "softmax",
                Op::LayerNorm { .. } => "layer_norm",
                Op::StopGrad => "stop_grad",
                Op::Exp(_) => "exp",
                Op::LogClamped(_) => "log",
                Op::Gelu(_) => "gelu",
                Op::ConcatCols(_) => "concat_cols",
                Op::ConcatRows(_) => "concat_rows",
                Op::SliceRows { .. } => "slice_rows",
                Op::SelectRows { .. } => "select_rows",
                Op::SumAll(_) => "sum_all",
                Op::MeanAll(_) => "mean_all",
                Op::AlignRows { .. } => "align",
            };
            let t0 = Instant::now();
            self.backward_node(i, &d, &mut grads);
            let e = table.entry(kind).or_insert((0.0, 0));
            e.0 += t0.elapsed().as_secs_f64();
            e.1 += 1;
            grads[i] = Some(d);
        }
        let mut rows: Vec<(String, f64, usize)> =
            table.into_iter().map(|(k, (t, n))| (k.to_string(), t, n)).collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok((Grads { by_node: grads }, rows))
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, contrib: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                *g += &contrib;
                recycle(contrib);
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Accumulate a borrowed contribution; clones only when the slot is
    /// still empty.
    fn acc_ref(&self, grads: &mut [Option<Matrix>], v: Var, contrib: &Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += contrib,
            slot @ None => *slot = Some(contrib.clone()),
        }
    }

    fn backward_node(&self, i: usize, d: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Matmul { a, b, trans_b, alpha } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.nodes[a.0].needs_grad {
                    let (r, c) = av.dim();
                    let mut da = pooled_uninit(r, c);
                    if *trans_b {
                        general_mat_mul(*alpha, d, bv, 0.0, &mut da);
                    } else {
                        general_mat_mul(*alpha, d, &bv.t(), 0.0, &mut da);
                    }
                    self.acc(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let (r, c) = bv.dim();
                    let mut db = pooled_uninit(r, c);
                    if *trans_b {
                        general_mat_mul(*alpha, &d.t(), av, 0.0, &mut db);
                    } else {
                        general_mat_mul(*alpha, &av.t(), d, 0.0, &mut db);
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc_ref(grads, *a, d);
                self.acc_ref(grads, *b, d);
            }
            Op::Sub(a, b) => {
                self.acc_ref(grads, *a, d);
                if self.nodes[b.0].needs_grad {
                    let (r, c) = d.dim();
                    let mut neg = pooled_uninit(r, c);
                    let ns = neg.as_slice_mut().unwrap();
                    let ds = d.as_slice().expect("contiguous");
                    for i in 0..ns.len() {
                        ns[i] = -ds[i];
                    }
                    self.acc(grads, *b, neg);
                }
            }
            Op::Mul(a, b) => {
                let prod = |other: &Matrix| {
                    let (r, c) = d.dim();
                    let mut out = pooled_uninit(r, c);
                    let os = out.as_slice_mut().unwrap();
                    let ds = d.as_slice().expect("contiguous");
                    let vs = other.as_slice().expect("contiguous");
                    for i in 0..os.len() {
                        os[i] = ds[i] * vs[i];
                    }
                    out
                };
                if self.nodes[a.0].needs_grad {
                    self.acc(grads, *a, prod(&self.nodes[b.0].value));
                }
                if self.nodes[b.0].needs_grad {
                    self.acc(grads, *b, prod(&self.nodes[a.0].value));
                }
            }
            Op::AddRow { x, row } => {
                self.acc_ref(grads, *x, d);
                if self.nodes[row.0].needs_grad {
                    let mut dr = pooled_zeros(1, d.ncols());
                    for r in d.rows() {
                        dr.row_mut(0).scaled_add(1.0, &r);
                    }
                    self.acc(grads, *row, dr);
                }
            }
            Op::MulCol { x, col } => {
                let (rows, cols) = d.dim();
                let ds = d.as_slice().expect("contiguous");
                let cv = self.nodes[col.0].value.as_slice().expect("contiguous");
                if self.nodes[x.0].needs_grad {
                    let mut dx = pooled_uninit(rows, cols);
                    let os = dx.as_slice_mut().unwrap();
                    for i in 0..rows {
                        let base = i * cols;
                        for j in 0..cols {
                            os[base + j] = ds[base + j] * cv[i];
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.nodes[col.0].needs_grad {
                    let xv = self.nodes[x.0].value.as_slice().expect("contiguous");
                    let mut dc = pooled_uninit(rows, 1);
                    let os = dc.as_slice_mut().unwrap();
                    for i in 0..rows {
                        let base = i * cols;
                        let mut s = 0.0;
                        for j in 0..cols {
                            s += ds[base + j] * xv[base + j];
                        }
                        os[i] = s;
                    }
                    self.acc(grads, *col, dc);
                }
            }
            Op::Scale { x, c } => {
                let (r, cc) = d.dim();
                let mut dx = pooled_uninit(r, cc);
                let os = dx.as_slice_mut().unwrap();
                let ds = d.as_slice().expect("contiguous");
                for i in 0..os.len() {
                    os[i] = ds[i] * c;
                }
                self.acc(grads, *x, dx);
            }
            Op::Transpose(x) => {
                self.acc(grads, *x, d.t().to_owned());
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.as_slice().expect("contiguous");
                let ds = d.as_slice().expect("contiguous");
                let (r, c) = d.dim();
                let mut dx = pooled_uninit(r, c);
                let os = dx.as_slice_mut().unwrap();
                for i in 0..os.len() {
                    os[i] = ds[i] * y[i] * (1.0 - y[i]);
                }
                self.acc(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let (rows, cols) = d.dim();
                let p = self.nodes[i].value.as_slice().expect("contiguous");
                let ds = d.as_slice().expect("contiguous");
                let mut dx = pooled_uninit(rows, cols);
                let dxs = dx.as_slice_mut().expect("contiguous");
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += ds[base + c] * p[base + c];
                    }
                    for c in 0..cols {
                        dxs[base + c] = p[base + c] * (ds[base + c] - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (xhat, inv_std) = match &self.nodes[i].saved {
                    Saved::LayerNorm { xhat, inv_std } => (xhat, inv_std),
                    _ => unreachable!("layer_norm saved state"),
                };
                let (rows, cols) = d.dim();
                let xh = xhat.as_slice().expect("contiguous");
                let ds = d.as_slice().expect("contiguous");
                let g = self.nodes[gamma.0].value.as_slice().expect("contiguous");
                if self.nodes[gamma.0].needs_grad {
                    let mut dg = pooled_zeros(1, cols);
                    let dgs = dg.as_slice_mut().unwrap();
                    for r in 0..rows {
                        let base = r * cols;
                        for c in 0..cols {
                            dgs[c] += ds[base + c] * xh[base + c];
                        }
                    }
                    self.acc(grads, *gamma, dg);
                }
                if self.nodes[beta.0].needs_grad {
                    let mut db = pooled_zeros(1, cols);
                    let dbs = db.as_slice_mut().unwrap();
                    for r in 0..rows {
                        let base = r * cols;
                        for c in 0..cols {
                            dbs[c] += ds[base + c];
                        }
                    }
                    self.acc(grads, *beta, db);
                }
                if self.nodes[x.0].needs_grad {
                    let n = cols as f64;
                    let mut dx = pooled_uninit(rows, cols);
                    let dxs = dx.as_slice_mut().unwrap();
                    for r in 0..rows {
                        let base = r * cols;
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            let dxh = ds[base + c] * g[c];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[base + c];
                        }
                        mean_dxhat /= n;
                        mean_dxhat_xhat /= n;
                        let istd = inv_std[r];
                        for c in 0..cols {
                            let dxh = ds[base + c] * g[c];
                            dxs[base + c] =
                                istd * (dxh - mean_dxhat - xh[base + c] * mean_dxhat_xhat);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.as_slice().expect("contiguous");
                let ds = d.as_slice().expect("contiguous");
                let (r, c) = d.dim();
                let mut dx = pooled_uninit(r, c);
                let os = dx.as_slice_mut().unwrap();
                for i in 0..os.len() {
                    os[i] = ds[i] * y[i];
                }
                self.acc(grads, *x, dx);
            }
            Op::LogClamped(x) => {
                let xv = self.nodes[x.0].value.as_slice().expect("contiguous");
                let ds = d.as_slice().expect("contiguous");
                let (r, c) = d.dim();
                let mut dx = pooled_uninit(r, c);
                let os = dx.as_slice_mut().unwrap();
                for i in 0..os.len() {
                    os[i] = if xv[i] > LOG_CLAMP { ds[i] / xv[i] } else { 0.0 };
                }
                self.acc(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let cdf = match &self.nodes[i].saved {
                    Saved::Gelu { cdf } => cdf,
                    _ => unreachable!("gelu saved state"),
                };
                let xv = self.nodes[x.0].value.as_slice().expect("contiguous");
                let cdfs = cdf.as_slice().expect("contiguous");
                let ds = d.as_slice().expect("contiguous");
                let (gr, gc) = d.dim();
                let mut dx = pooled_uninit(gr, gc);
                let dxs = dx.as_slice_mut().unwrap();
                let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                for j in 0..dxs.len() {
                    let x_j = xv[j];
                    let pdf = (-0.5 * x_j * x_j).exp() * inv_sqrt_2pi;
                    dxs[j] = ds[j] * (cdfs[j] + x_j * pdf);
                }
                self.acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.ncols();
                    if self.nodes[p.0].needs_grad {
                        let mut dp = pooled_uninit(d.nrows(), w);
                        dp.assign(&d.slice(ndarray::s![.., at..at + w]));
                        self.acc(grads, p, dp);
                    }
                    at += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let h = self.nodes[p.0].value.nrows();
                    if self.nodes[p.0].needs_grad {
                        let mut dp = pooled_uninit(h, d.ncols());
                        dp.assign(&d.slice(ndarray::s![at..at + h, ..]));
                        self.acc(grads, p, dp);
                    }
                    at += h;
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.nodes[x.0].value.dim();
                let mut dx = pooled_zeros(rows, cols);
                dx.slice_mut(ndarray::s![*start..*start + d.nrows(), ..])
                    .assign(d);
                self.acc(grads, *x, dx);
            }
            Op::SelectRows { x, index } => {
                let (rows, cols) = self.nodes[x.0].value.dim();
                let mut dx = pooled_zeros(rows, cols);
                for (k, &i) in index.iter().enumerate() {
                    dx.row_mut(i).scaled_add(1.0, &d.row(k));
                }
                self.acc(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let s = d[(0, 0)];
                let dim = self.nodes[x.0].value.dim();
                let mut dx = pooled_uninit(dim.0, dim.1);
                dx.as_slice_mut().unwrap().fill(s);
                self.acc(grads, *x, dx);
            }
            Op::MeanAll(x) => {
                let dim = self.nodes[x.0].value.dim();
                let s = d[(0, 0)] / (dim.0 * dim.1) as f64;
                let mut dx = pooled_uninit(dim.0, dim.1);
                dx.as_slice_mut().unwrap().fill(s);
                self.acc(grads, *x, dx);
            }
            Op::AlignRows { x, t_in } => {
                let t_in = *t_in;
                let t_target = d.nrows();
                let cols = d.ncols();
                let mut dx = pooled_zeros(t_in, cols);
                if t_target <= t_in {
                    for i in 0..t_target {
                        let lo = i * t_in / t_target;
                        let hi = (i + 1) * t_in / t_target;
                        let inv = 1.0 / (hi - lo) as f64;
                        for j in lo..hi {
                            dx.row_mut(j).scaled_add(inv, &d.row(i));
                        }
                    }
                } else {
                    for i in 0..t_target {
                        let src = i * t_in / t_target;
                        dx.row_mut(src).scaled_add(1.0, &d.row(i));
                    }
                }
                self.acc(grads, *x, dx);
            }
        }
    }
}
