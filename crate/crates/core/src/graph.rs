//! Tape-based reverse-mode automatic differentiation over dynamic-rank f64 arrays.
//!
//! A [`Graph`] records every operation as a node holding its owned output
//! value, the indices of its parents, and a backward closure that maps the
//! incoming gradient to per-parent gradients. [`Graph::backward`] consumes the
//! tape and walks it in reverse, accumulating gradients; leaf gradients are
//! retained for extraction, interior gradients are dropped as soon as they
//! have been propagated.
//!
//! All values are owned, standard-layout `ArrayD<f64>`. Shape violations are
//! programming errors and panic; fallible validation belongs to the callers
//! that construct graphs from external input.

use std::cell::RefCell;

use ndarray::{concatenate, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2, IxDyn};

pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the graph
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&[&Arr], &Arr, &Arr) -> Vec<Arr>>;

struct Node {
    value: Arr,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.grads[v.0].take()
    }
}

fn view2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 array")
}

fn view1(a: &Arr) -> ArrayView1<'_, f64> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("expected a rank-1 array")
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_deriv(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * phi
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Arr, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            back,
        });
        Var(nodes.len() - 1)
    }

    /// Insert an input node. Gradients with respect to every leaf on the path
    /// to the loss are available after [`Graph::backward`].
    pub fn leaf(&self, value: Arr) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.push(value, vec![], None)
    }

    pub fn value(&self, v: Var) -> Arr {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn shapes_equal(&self, a: Var, b: Var, op: &str) {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[a.0].value.shape(),
            nodes[b.0].value.shape(),
            "{op}: operand shapes differ"
        );
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.shapes_equal(a, b, "add");
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value + &nodes[b.0].value
        };
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|_, _, g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.shapes_equal(a, b, "sub");
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value - &nodes[b.0].value
        };
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|_, _, g| vec![g.clone(), g.map(|x| -x)])),
        )
    }

    /// Elementwise product. Both gradients are formed from the other operand,
    /// so `mul(x, x)` correctly yields `2x` through accumulation.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.shapes_equal(a, b, "mul");
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value * &nodes[b.0].value
        };
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|p, _, g| vec![g * p[1], g * p[0]])),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.map(|x| c * x)
        };
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |_, _, g| vec![g.map(|x| c * x)])),
        )
    }

    /// Multiply each row of a rank-2 array by a per-row factor:
    /// `y[f, t] = x[f, t] * gain[f]`.
    pub fn mul_bcast_col(&self, x: Var, gain: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = view2(&nodes[x.0].value);
            let gv = view1(&nodes[gain.0].value);
            assert_eq!(xv.nrows(), gv.len(), "mul_bcast_col: row count vs gain length");
            let mut out = xv.to_owned();
            for (mut row, &g) in out.rows_mut().into_iter().zip(gv.iter()) {
                row.mapv_inplace(|v| v * g);
            }
            out.into_dyn()
        };
        self.push(
            value,
            vec![x.0, gain.0],
            Some(Box::new(|p, _, g| {
                let xv = view2(p[0]);
                let gainv = view1(p[1]);
                let gv = view2(g);
                let mut dx = gv.to_owned();
                for (mut row, &gn) in dx.rows_mut().into_iter().zip(gainv.iter()) {
                    row.mapv_inplace(|v| v * gn);
                }
                let mut dgain = ndarray::Array1::<f64>::zeros(gainv.len());
                for f in 0..xv.nrows() {
                    dgain[f] = gv.row(f).dot(&xv.row(f));
                }
                vec![dx.into_dyn(), dgain.into_dyn()]
            })),
        )
    }

    /// Rank-2 matrix product `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = view2(&nodes[a.0].value);
            let bv = view2(&nodes[b.0].value);
            assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dimensions differ");
            av.dot(&bv).into_dyn()
        };
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|p, _, g| {
                let av = view2(p[0]);
                let bv = view2(p[1]);
                let gv = view2(g);
                vec![gv.dot(&bv.t()).into_dyn(), av.t().dot(&gv).into_dyn()]
            })),
        )
    }

    pub fn transpose2(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            view2(&nodes[a.0].value).t().as_standard_layout().into_owned().into_dyn()
        };
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|_, _, g| {
                vec![view2(g).t().as_standard_layout().into_owned().into_dyn()]
            })),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let (value, old_shape) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            assert_eq!(
                v.len(),
                shape.iter().product::<usize>(),
                "reshape: element count differs"
            );
            (
                v.clone()
                    .into_shape_with_order(IxDyn(shape))
                    .expect("reshape: non-contiguous value"),
                v.shape().to_vec(),
            )
        };
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |_, _, g| {
                vec![g
                    .clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("reshape backward: non-contiguous gradient")]
            })),
        )
    }

    /// Permute axes; the backward pass applies the inverse permutation.
    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let axes_vec = axes.to_vec();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .view()
                .permuted_axes(IxDyn(&axes_vec))
                .as_standard_layout()
                .into_owned()
        };
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |_, _, g| {
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned()]
            })),
        )
    }

    /// Column lookup `y[:, j] = table[:, ids[j]]`; the backward pass
    /// scatter-adds into the table gradient. Ids may repeat.
    pub fn gather_cols(&self, table: Var, ids: &[usize]) -> Var {
        let ids_vec = ids.to_vec();
        let value = {
            let nodes = self.nodes.borrow();
            let tv = view2(&nodes[table.0].value);
            let mut out = ndarray::Array2::<f64>::zeros((tv.nrows(), ids_vec.len()));
            for (j, &id) in ids_vec.iter().enumerate() {
                assert!(id < tv.ncols(), "gather_cols: id {id} out of range");
                out.column_mut(j).assign(&tv.column(id));
            }
            out.into_dyn()
        };
        self.push(
            value,
            vec![table.0],
            Some(Box::new(move |p, _, g| {
                let tv = view2(p[0]);
                let gv = view2(g);
                let mut dt = ndarray::Array2::<f64>::zeros((tv.nrows(), tv.ncols()));
                for (j, &id) in ids_vec.iter().enumerate() {
                    let mut col = dt.column_mut(id);
                    col += &gv.column(j);
                }
                vec![dt.into_dyn()]
            })),
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = view2(&nodes[a.0].value);
            assert!(start + len <= av.ncols(), "slice_cols: out of range");
            av.slice(ndarray::s![.., start..start + len])
                .as_standard_layout()
                .into_owned()
                .into_dyn()
        };
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |p, _, g| {
                let av = view2(p[0]);
                let gv = view2(g);
                let mut da = ndarray::Array2::<f64>::zeros((av.nrows(), av.ncols()));
                da.slice_mut(ndarray::s![.., start..start + len]).assign(&gv);
                vec![da.into_dyn()]
            })),
        )
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = view2(&nodes[a.0].value);
            assert!(start + len <= av.nrows(), "slice_rows: out of range");
            av.slice(ndarray::s![start..start + len, ..])
                .as_standard_layout()
                .into_owned()
                .into_dyn()
        };
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |p, _, g| {
                let av = view2(p[0]);
                let gv = view2(g);
                let mut da = ndarray::Array2::<f64>::zeros((av.nrows(), av.ncols()));
                da.slice_mut(ndarray::s![start..start + len, ..]).assign(&gv);
                vec![da.into_dyn()]
            })),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let (value, widths) = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|v| view2(&nodes[v.0].value)).collect();
            let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
            (
                concatenate(Axis(1), &views).expect("concat_cols: row counts differ").into_dyn(),
                widths,
            )
        };
        self.push(
            value,
            parts.iter().map(|v| v.0).collect(),
            Some(Box::new(move |_, _, g| {
                let gv = view2(g);
                let mut out = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    out.push(
                        gv.slice(ndarray::s![.., off..off + w])
                            .as_standard_layout()
                            .into_owned()
                            .into_dyn(),
                    );
                    off += w;
                }
                out
            })),
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let (value, heights) = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|v| view2(&nodes[v.0].value)).collect();
            let heights: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
            (
                concatenate(Axis(0), &views).expect("concat_rows: column counts differ").into_dyn(),
                heights,
            )
        };
        self.push(
            value,
            parts.iter().map(|v| v.0).collect(),
            Some(Box::new(move |_, _, g| {
                let gv = view2(g);
                let mut out = Vec::with_capacity(heights.len());
                let mut off = 0;
                for &h in &heights {
                    out.push(
                        gv.slice(ndarray::s![off..off + h, ..])
                            .as_standard_layout()
                            .into_owned()
                            .into_dyn(),
                    );
                    off += h;
                }
                out
            })),
        )
    }

    /// Exact Gelu, `0.5 x (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.map(|&x| gelu_scalar(x))
        };
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|p, _, g| {
                let mut dx = p[0].map(|&x| gelu_deriv(x));
                dx *= g;
                vec![dx]
            })),
        )
    }

    /// Normalize each column of a rank-2 array to zero mean and unit variance
    /// (population variance, stabilized by `eps` under the square root).
    /// Gain application is a separate [`Graph::mul_bcast_col`].
    pub fn layernorm_cols(&self, x: Var, eps: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = view2(&nodes[x.0].value);
            let mut out = xv.to_owned();
            for mut col in out.columns_mut() {
                let n = col.len() as f64;
                let mean = col.sum() / n;
                let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                col.mapv_inplace(|v| (v - mean) * inv);
            }
            out.into_dyn()
        };
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |p, val, g| {
                let xv = view2(p[0]);
                let xhat = view2(val);
                let gv = view2(g);
                let mut dx = ndarray::Array2::<f64>::zeros((xv.nrows(), xv.ncols()));
                let n = xv.nrows() as f64;
                for t in 0..xv.ncols() {
                    let col = xv.column(t);
                    let mean = col.sum() / n;
                    let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gcol = gv.column(t);
                    let hcol = xhat.column(t);
                    let gmean = gcol.sum() / n;
                    let ghmean = gcol.dot(&hcol) / n;
                    for f in 0..xv.nrows() {
                        dx[[f, t]] = (gcol[f] - gmean - hcol[f] * ghmean) * inv;
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Causal column softmax over an `(n, n)` score matrix whose entry
    /// `[j, t]` is the score of key position `j` for query position `t`.
    /// Column `t` is a softmax over rows `0..=t`; future rows are exactly
    /// zero, which a following value matmul treats as masked.
    pub fn causal_softmax(&self, scores: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let sv = view2(&nodes[scores.0].value);
            assert_eq!(sv.nrows(), sv.ncols(), "causal_softmax: square scores required");
            let n = sv.nrows();
            let mut out = ndarray::Array2::<f64>::zeros((n, n));
            for t in 0..n {
                let col = sv.column(t);
                let max = col.iter().take(t + 1).cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..=t {
                    let e = (col[j] - max).exp();
                    out[[j, t]] = e;
                    z += e;
                }
                for j in 0..=t {
                    out[[j, t]] /= z;
                }
            }
            out.into_dyn()
        };
        self.push(
            value,
            vec![scores.0],
            Some(Box::new(|_, val, g| {
                let av = view2(val);
                let gv = view2(g);
                let n = av.nrows();
                let mut ds = ndarray::Array2::<f64>::zeros((n, n));
                for t in 0..n {
                    let mut dot = 0.0;
                    for j in 0..=t {
                        dot += av[[j, t]] * gv[[j, t]];
                    }
                    for j in 0..=t {
                        ds[[j, t]] = av[[j, t]] * (gv[[j, t]] - dot);
                    }
                }
                vec![ds.into_dyn()]
            })),
        )
    }

    /// Contract a key vector against the first axis:
    /// `y[rest] = sum_k key[k] * x[k, rest]`.
    pub fn contract0(&self, key: Var, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let kv = view1(&nodes[key.0].value);
            let xv = &nodes[x.0].value;
            assert!(xv.ndim() >= 1 && xv.shape()[0] == kv.len(), "contract0: leading axis mismatch");
            let rest: Vec<usize> = xv.shape()[1..].to_vec();
            let m: usize = rest.iter().product();
            let x2 = xv
                .view()
                .into_shape_with_order((kv.len(), m))
                .expect("contract0: non-contiguous operand");
            x2.t()
                .dot(&kv)
                .into_shape_with_order(IxDyn(&rest))
                .expect("contract0: reshape result")
        };
        self.push(
            value,
            vec![key.0, x.0],
            Some(Box::new(|p, _, g| {
                let kv = view1(p[0]);
                let xv = p[1];
                let m: usize = xv.shape()[1..].iter().product();
                let x2 = xv
                    .view()
                    .into_shape_with_order((kv.len(), m))
                    .expect("contract0 backward: operand");
                let g1 = g
                    .view()
                    .into_shape_with_order(m)
                    .expect("contract0 backward: gradient");
                let dkey = x2.dot(&g1).into_dyn();
                let mut dx = ndarray::Array2::<f64>::zeros((kv.len(), m));
                for (k, &kval) in kv.iter().enumerate() {
                    dx.row_mut(k).assign(&g1.map(|&v| v * kval));
                }
                vec![
                    dkey,
                    dx.into_shape_with_order(xv.raw_dim()).expect("contract0 backward: reshape"),
                ]
            })),
        )
    }

    /// Outer write of a key vector against an arbitrary operand:
    /// `y[k, rest] = key[k] * m[rest]`.
    pub fn outer0(&self, key: Var, m: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let kv = view1(&nodes[key.0].value);
            let mv = &nodes[m.0].value;
            let cols: usize = mv.len();
            let m1 = mv
                .view()
                .into_shape_with_order(cols)
                .expect("outer0: non-contiguous operand");
            let mut out = ndarray::Array2::<f64>::zeros((kv.len(), cols));
            for (k, &kval) in kv.iter().enumerate() {
                out.row_mut(k).assign(&m1.map(|&v| v * kval));
            }
            let mut shape = vec![kv.len()];
            shape.extend_from_slice(mv.shape());
            out.into_shape_with_order(IxDyn(&shape)).expect("outer0: reshape result")
        };
        self.push(
            value,
            vec![key.0, m.0],
            Some(Box::new(|p, _, g| {
                let kv = view1(p[0]);
                let mv = p[1];
                let cols: usize = mv.len();
                let m1 = mv.view().into_shape_with_order(cols).expect("outer0 backward: operand");
                let g2 = g
                    .view()
                    .into_shape_with_order((kv.len(), cols))
                    .expect("outer0 backward: gradient");
                let dkey = g2.dot(&m1).into_dyn();
                let dm = g2.t().dot(&kv);
                vec![
                    dkey,
                    dm.into_shape_with_order(mv.raw_dim()).expect("outer0 backward: reshape"),
                ]
            })),
        )
    }

    /// Stable per-column log-sum-exp of a `(v, t)` logit matrix, yielding a
    /// length-`t` vector.
    pub fn logsumexp_cols(&self, logits: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let lv = view2(&nodes[logits.0].value);
            let mut out = ndarray::Array1::<f64>::zeros(lv.ncols());
            for (t, col) in lv.columns().into_iter().enumerate() {
                let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = col.iter().map(|&x| (x - max).exp()).sum();
                out[t] = max + z.ln();
            }
            out.into_dyn()
        };
        self.push(
            value,
            vec![logits.0],
            Some(Box::new(|p, val, g| {
                let lv = view2(p[0]);
                let lse = view1(val);
                let gv = view1(g);
                let mut dl = ndarray::Array2::<f64>::zeros((lv.nrows(), lv.ncols()));
                for t in 0..lv.ncols() {
                    for v in 0..lv.nrows() {
                        dl[[v, t]] = (lv[[v, t]] - lse[t]).exp() * gv[t];
                    }
                }
                vec![dl.into_dyn()]
            })),
        )
    }

    /// Select one row entry per column: `y[t] = x[ids[t], t]`.
    pub fn pick_cols(&self, x: Var, ids: &[usize]) -> Var {
        let ids_vec = ids.to_vec();
        let value = {
            let nodes = self.nodes.borrow();
            let xv = view2(&nodes[x.0].value);
            assert_eq!(xv.ncols(), ids_vec.len(), "pick_cols: id count vs columns");
            let mut out = ndarray::Array1::<f64>::zeros(ids_vec.len());
            for (t, &id) in ids_vec.iter().enumerate() {
                assert!(id < xv.nrows(), "pick_cols: id {id} out of range");
                out[t] = xv[[id, t]];
            }
            out.into_dyn()
        };
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |p, _, g| {
                let xv = view2(p[0]);
                let gv = view1(g);
                let mut dx = ndarray::Array2::<f64>::zeros((xv.nrows(), xv.ncols()));
                for (t, &id) in ids_vec.iter().enumerate() {
                    dx[[id, t]] = gv[t];
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Mean of a rank-1 array, producing the rank-0 scalar used as a loss
    /// root.
    pub fn mean1(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = view1(&nodes[x.0].value);
            ndarray::arr0(xv.sum() / xv.len() as f64).into_dyn()
        };
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|p, _, g| {
                let n = p[0].len() as f64;
                let gs = g[[]] / n;
                vec![ArrayD::from_elem(p[0].raw_dim(), gs)]
            })),
        )
    }

    /// Reverse pass from a rank-0 root, consuming the tape. Returns per-node
    /// gradients with interior nodes already released; leaves keep theirs.
    pub fn backward(self, root: Var) -> Gradients {
        let nodes = self.nodes.into_inner();
        assert_eq!(nodes[root.0].value.ndim(), 0, "backward: root must be a scalar");
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || nodes[i].back.is_none() {
                continue;
            }
            let g = grads[i].take().expect("gradient present");
            let node = &nodes[i];
            let parent_vals: Vec<&Arr> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let back = node.back.as_ref().expect("backward closure present");
            let parent_grads = back(&parent_vals, &node.value, &g);
            assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Central finite-difference gradients of `f` with respect to each input, for
/// verifying analytic gradients in tests and the gradient-check command.
pub fn numeric_gradients<F>(mut f: F, inputs: &[Arr], step: f64) -> Vec<Arr>
where
    F: FnMut(&[Arr]) -> f64,
{
    let mut work: Vec<Arr> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Arr::zeros(inputs[i].raw_dim());
        for idx in 0..inputs[i].len() {
            let slot = work[i].as_slice_mut().expect("standard layout")[idx];
            work[i].as_slice_mut().expect("standard layout")[idx] = slot + step;
            let up = f(&work);
            work[i].as_slice_mut().expect("standard layout")[idx] = slot - step;
            let down = f(&work);
            work[i].as_slice_mut().expect("standard layout")[idx] = slot;
            grad.as_slice_mut().expect("standard layout")[idx] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// Relative error with an absolute floor, `|a - b| / max(|a| + |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(floor)
}
