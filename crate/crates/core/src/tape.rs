//! Minimal reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes;
//! [`Tape::backward`] replays it in reverse, accumulating vector-Jacobian
//! products. Every value is an `ArrayD<f64>`; by convention embeddings are
//! `[1, d]`, sequences `[T, d]`, and scalars `[1]`.
//!
//! The engine is deliberately small: only the operations the model needs,
//! each with a hand-written VJP, checked against central finite differences
//! in the test suite.

use std::cell::RefCell;

use ndarray::{ArrayD, Axis, IxDyn};

type GradFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
}

/// Records a single forward pass. Not `Sync`; use one tape per thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&ArrayD<f64>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: ArrayD<f64>, parents: Vec<usize>, grad_fn: Option<GradFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            grad_fn,
        });
        Var { tape: self, id }
    }

    /// Insert a value with no gradient history (inputs, constants, parameters).
    pub fn leaf(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, vec![], None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_of(&self, id: usize) -> ArrayD<f64> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a scalar root. Gradients accumulate at every node,
    /// including leaves.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(ArrayD::ones(nodes[root.id].value.raw_dim()));
        for id in (0..=root.id).rev() {
            let Some(gout) = grads[id].clone() else {
                continue;
            };
            let node = &nodes[id];
            let Some(gfn) = &node.grad_fn else { continue };
            let parent_grads = gfn(&gout);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[*pid] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> ArrayD<f64> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar extraction; panics unless the value has exactly one element.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on non-scalar value");
        v.iter().copied().next().unwrap()
    }

    fn unary(self, value: ArrayD<f64>, gfn: GradFn) -> Var<'t> {
        self.tape.push(value, vec![self.id], Some(gfn))
    }

    fn binary(self, other: Var<'t>, value: ArrayD<f64>, gfn: GradFn) -> Var<'t> {
        self.tape
            .push(value, vec![self.id, other.id], Some(gfn))
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), o.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        self.binary(o, &a + &b, Box::new(|g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), o.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        self.binary(o, &a - &b, Box::new(|g| vec![g.clone(), -g]))
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), o.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out = &a * &b;
        self.binary(o, out, Box::new(move |g| vec![g * &b, g * &a]))
    }

    /// Elementwise division.
    pub fn div(self, o: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), o.value());
        assert_eq!(a.shape(), b.shape(), "div: shape mismatch");
        let out = &a / &b;
        self.binary(
            o,
            out,
            Box::new(move |g| vec![g / &b, -(g * &a) / (&b * &b)]),
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(-self.value(), Box::new(|g| vec![-g]))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(self.value() * c, Box::new(move |g| vec![g * c]))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(self.value() + c, Box::new(|g| vec![g.clone()]))
    }

    /// Matrix product of two 2-D values.
    pub fn matmul(self, o: Var<'t>) -> Var<'t> {
        let a = self.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = o.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dim mismatch");
        let out = a.dot(&b).into_dyn();
        self.binary(
            o,
            out,
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                vec![
                    g2.dot(&b.t()).into_dyn(),
                    a.t().dot(&g2).into_dyn(),
                ]
            }),
        )
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = x.mapv(|v| v.max(0.0));
        self.unary(
            out,
            Box::new(move |g| vec![ndarray::Zip::from(g).and(&x).map_collect(|&gv, &xv| {
                if xv > 0.0 {
                    gv
                } else {
                    0.0
                }
            })]),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let s = out.clone();
        self.unary(
            out,
            Box::new(move |g| vec![g * &(s.mapv(|v| v * (1.0 - v)))]),
        )
    }

    pub fn tanh(self) -> Var<'t> {
        let out = self.value().mapv(f64::tanh);
        let t = out.clone();
        self.unary(out, Box::new(move |g| vec![g * &t.mapv(|v| 1.0 - v * v)]))
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().mapv(f64::exp);
        let e = out.clone();
        self.unary(out, Box::new(move |g| vec![g * &e]))
    }

    pub fn ln(self) -> Var<'t> {
        let x = self.value();
        let out = x.mapv(f64::ln);
        self.unary(out, Box::new(move |g| vec![g / &x]))
    }

    pub fn sqrt(self) -> Var<'t> {
        let out = self.value().mapv(f64::sqrt);
        let s = out.clone();
        self.unary(out, Box::new(move |g| vec![g / &(s.mapv(|v| 2.0 * v))]))
    }

    /// Numerically stable `ln(1 + e^x)`; derivative is the sigmoid.
    pub fn softplus(self) -> Var<'t> {
        let x = self.value();
        let out = x.mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.unary(
            out,
            Box::new(move |g| vec![g * &x.mapv(|v| 1.0 / (1.0 + (-v).exp()))]),
        )
    }

    /// Clamp values into `[lo, hi]`; gradient passes only where unclamped.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let x = self.value();
        let out = x.mapv(|v| v.clamp(lo, hi));
        self.unary(
            out,
            Box::new(move |g| {
                vec![ndarray::Zip::from(g).and(&x).map_collect(|&gv, &xv| {
                    if xv > lo && xv < hi {
                        gv
                    } else {
                        0.0
                    }
                })]
            }),
        )
    }

    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let shape = x.raw_dim();
        let s = ArrayD::from_elem(IxDyn(&[1]), x.sum());
        self.unary(
            s,
            Box::new(move |g| vec![ArrayD::from_elem(shape.clone(), g[[0]])]),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Row-broadcast addition: `[m, n] + [1, n]`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = row.value();
        assert_eq!(a.shape()[1], b.shape()[1], "add_row: width mismatch");
        assert_eq!(b.shape()[0], 1, "add_row: rhs must be [1, n]");
        let out = &a + &b;
        self.binary(
            row,
            out,
            Box::new(move |g| {
                let gsum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![g.clone(), gsum]
            }),
        )
    }

    /// Row-broadcast multiplication: `[m, n] * [1, n]`.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = row.value();
        assert_eq!(a.shape()[1], b.shape()[1], "mul_row: width mismatch");
        assert_eq!(b.shape()[0], 1, "mul_row: rhs must be [1, n]");
        let out = &a * &b;
        self.binary(
            row,
            out,
            Box::new(move |g| {
                let ga = g * &b;
                let gb = (g * &a).sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![ga, gb]
            }),
        )
    }

    /// Row-broadcast division: `[m, n] / [1, n]`.
    pub fn div_row(self, row: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = row.value();
        assert_eq!(a.shape()[1], b.shape()[1], "div_row: width mismatch");
        assert_eq!(b.shape()[0], 1, "div_row: rhs must be [1, n]");
        let out = &a / &b;
        self.binary(
            row,
            out,
            Box::new(move |g| {
                let ga = g / &b;
                let gb = (-(g * &a) / (&b * &b)).sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![ga, gb]
            }),
        )
    }

    /// Broadcast a `[1]` scalar var over the whole array: `a + s`.
    pub fn add_scalar_var(self, s: Var<'t>) -> Var<'t> {
        let a = self.value();
        let sv = s.scalar();
        self.binary(
            s,
            &a + sv,
            Box::new(move |g| {
                vec![g.clone(), ArrayD::from_elem(IxDyn(&[1]), g.sum())]
            }),
        )
    }

    pub fn sub_scalar_var(self, s: Var<'t>) -> Var<'t> {
        let a = self.value();
        let sv = s.scalar();
        self.binary(
            s,
            &a - sv,
            Box::new(move |g| {
                vec![g.clone(), ArrayD::from_elem(IxDyn(&[1]), -g.sum())]
            }),
        )
    }

    pub fn mul_scalar_var(self, s: Var<'t>) -> Var<'t> {
        let a = self.value();
        let sv = s.scalar();
        let av = a.clone();
        self.binary(
            s,
            &a * sv,
            Box::new(move |g| {
                vec![
                    g * sv,
                    ArrayD::from_elem(IxDyn(&[1]), (g * &av).sum()),
                ]
            }),
        )
    }

    pub fn div_scalar_var(self, s: Var<'t>) -> Var<'t> {
        let a = self.value();
        let sv = s.scalar();
        let av = a.clone();
        self.binary(
            s,
            &a / sv,
            Box::new(move |g| {
                vec![
                    g / sv,
                    ArrayD::from_elem(IxDyn(&[1]), -(g * &av).sum() / (sv * sv)),
                ]
            }),
        )
    }

    /// Mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(self) -> Var<'t> {
        let a = self.value();
        let m = a.shape()[0] as f64;
        let out = a.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let shape = a.raw_dim();
        self.unary(
            out,
            Box::new(move |g| {
                let mut full = ArrayD::zeros(shape.clone());
                let grow = g.index_axis(Axis(0), 0);
                for mut row in full.axis_iter_mut(Axis(0)) {
                    row.assign(&(&grow / m));
                }
                vec![full]
            }),
        )
    }

    /// Sum over rows: `[m, n] -> [1, n]`.
    pub fn sum_rows(self) -> Var<'t> {
        let a = self.value();
        let out = a.sum_axis(Axis(0)).insert_axis(Axis(0));
        let shape = a.raw_dim();
        self.unary(
            out,
            Box::new(move |g| {
                let mut full = ArrayD::zeros(shape.clone());
                let grow = g.index_axis(Axis(0), 0);
                for mut row in full.axis_iter_mut(Axis(0)) {
                    row.assign(&grow);
                }
                vec![full]
            }),
        )
    }

    /// Column slice `[m, lo..hi]`.
    pub fn slice_cols(self, lo: usize, hi: usize) -> Var<'t> {
        let a = self.value();
        let n = a.shape()[1];
        assert!(lo < hi && hi <= n, "slice_cols out of range");
        let out = a
            .slice_axis(Axis(1), ndarray::Slice::from(lo..hi))
            .to_owned();
        let shape = a.raw_dim();
        self.unary(
            out,
            Box::new(move |g| {
                let mut full = ArrayD::zeros(shape.clone());
                full.slice_axis_mut(Axis(1), ndarray::Slice::from(lo..hi))
                    .assign(g);
                vec![full]
            }),
        )
    }

    /// Row slice `[lo..hi, n]`.
    pub fn slice_rows(self, lo: usize, hi: usize) -> Var<'t> {
        let a = self.value();
        let m = a.shape()[0];
        assert!(lo < hi && hi <= m, "slice_rows out of range");
        let out = a
            .slice_axis(Axis(0), ndarray::Slice::from(lo..hi))
            .to_owned();
        let shape = a.raw_dim();
        self.unary(
            out,
            Box::new(move |g| {
                let mut full = ArrayD::zeros(shape.clone());
                full.slice_axis_mut(Axis(0), ndarray::Slice::from(lo..hi))
                    .assign(g);
                vec![full]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        let old = a.raw_dim();
        let out = a.to_shape(IxDyn(shape)).unwrap().to_owned();
        self.unary(
            out,
            Box::new(move |g| vec![g.to_shape(old.clone()).unwrap().to_owned()]),
        )
    }

    pub fn transpose(self) -> Var<'t> {
        let a = self.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        let out = a.t().to_owned().into_dyn();
        self.unary(
            out,
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                vec![g2.t().to_owned().into_dyn()]
            }),
        )
    }

    /// Multiply by a constant mask (dropout, cell masks); no gradient to the mask.
    pub fn mul_const(self, c: &ArrayD<f64>) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape(), c.shape(), "mul_const: shape mismatch");
        let cc = c.clone();
        self.unary(&a * c, Box::new(move |g| vec![g * &cc]))
    }

    pub fn add_const(self, c: &ArrayD<f64>) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape(), c.shape(), "add_const: shape mismatch");
        self.unary(&a + c, Box::new(|g| vec![g.clone()]))
    }

    /// Causal 1-D unfolding for dilated convolution.
    ///
    /// `[T, C] -> [T, k*C]` where the row at `t` concatenates
    /// `x[t-(k-1)*d], ..., x[t-d], x[t]`, zero-padded on the left, so a
    /// following matmul with a `[k*C, C_out]` filter is a causal conv.
    pub fn unfold1d(self, k: usize, dilation: usize) -> Var<'t> {
        let x = self.value();
        let (t_len, c) = (x.shape()[0], x.shape()[1]);
        let mut out = ArrayD::zeros(IxDyn(&[t_len, k * c]));
        for t in 0..t_len {
            for j in 0..k {
                let lag = (k - 1 - j) * dilation;
                if t >= lag {
                    let src = t - lag;
                    for ch in 0..c {
                        out[[t, j * c + ch]] = x[[src, ch]];
                    }
                }
            }
        }
        let shape = x.raw_dim();
        self.unary(
            out,
            Box::new(move |g| {
                let mut gx = ArrayD::zeros(shape.clone());
                let (t_len, kc) = (g.shape()[0], g.shape()[1]);
                let c = kc / k;
                for t in 0..t_len {
                    for j in 0..k {
                        let lag = (k - 1 - j) * dilation;
                        if t >= lag {
                            let src = t - lag;
                            for ch in 0..c {
                                gx[[src, ch]] += g[[t, j * c + ch]];
                            }
                        }
                    }
                }
                vec![gx]
            }),
        )
    }

    /// 3x3 same-padding unfolding for 2-D convolution over a `[h*w, C]`
    /// feature map: output `[h*w, 9*C]`.
    pub fn unfold2d_3x3(self, h: usize, w: usize) -> Var<'t> {
        let x = self.value();
        let c = x.shape()[1];
        assert_eq!(x.shape()[0], h * w, "unfold2d: spatial size mismatch");
        let mut out = ArrayD::zeros(IxDyn(&[h * w, 9 * c]));
        for y in 0..h {
            for xw in 0..w {
                let p = y * w + xw;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        let sx = xw as isize + kx as isize - 1;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            let sp = sy as usize * w + sx as usize;
                            let off = (ky * 3 + kx) * c;
                            for ch in 0..c {
                                out[[p, off + ch]] = x[[sp, ch]];
                            }
                        }
                    }
                }
            }
        }
        let shape = x.raw_dim();
        self.unary(
            out,
            Box::new(move |g| {
                let c = g.shape()[1] / 9;
                let mut gx = ArrayD::zeros(shape.clone());
                for y in 0..h {
                    for xw in 0..w {
                        let p = y * w + xw;
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xw as isize + kx as isize - 1;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    let sp = sy as usize * w + sx as usize;
                                    let off = (ky * 3 + kx) * c;
                                    for ch in 0..c {
                                        gx[[sp, ch]] += g[[p, off + ch]];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx]
            }),
        )
    }

    /// 2x2 max pooling (floor semantics) over a `[h*w, C]` feature map.
    pub fn max_pool2(self, h: usize, w: usize) -> Var<'t> {
        let x = self.value();
        let c = x.shape()[1];
        assert_eq!(x.shape()[0], h * w, "max_pool2: spatial size mismatch");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = ArrayD::zeros(IxDyn(&[oh * ow, c]));
        let mut argmax = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let op = oy * ow + ox;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_p = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let p = (oy * 2 + dy) * w + (ox * 2 + dx);
                            let v = x[[p, ch]];
                            if v > best {
                                best = v;
                                best_p = p;
                            }
                        }
                    }
                    out[[op, ch]] = best;
                    argmax[op * c + ch] = best_p;
                }
            }
        }
        let shape = x.raw_dim();
        self.unary(
            out,
            Box::new(move |g| {
                let c = g.shape()[1];
                let mut gx = ArrayD::zeros(shape.clone());
                for op in 0..g.shape()[0] {
                    for ch in 0..c {
                        gx[[argmax[op * c + ch], ch]] += g[[op, ch]];
                    }
                }
                vec![gx]
            }),
        )
    }

    /// Row-wise log-softmax of a 2-D value.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let x = self.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let soft = out.mapv(f64::exp);
        self.unary(
            out.into_dyn(),
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let row_sums = g2.sum_axis(Axis(1)).insert_axis(Axis(1));
                let gx = &g2 - &(&soft * &row_sums);
                vec![gx.into_dyn()]
            }),
        )
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

/// Concatenate `[1, n_i]` (or `[m, n_i]`) values along columns.
pub fn concat_cols<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let values: Vec<ArrayD<f64>> = parts.iter().map(|p| p.value()).collect();
    let m = values[0].shape()[0];
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
    let total: usize = widths.iter().sum();
    let mut out = ArrayD::zeros(IxDyn(&[m, total]));
    let mut off = 0;
    for v in &values {
        let w = v.shape()[1];
        out.slice_axis_mut(Axis(1), ndarray::Slice::from(off..off + w))
            .assign(v);
        off += w;
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let widths2 = widths.clone();
    tape.push(
        out,
        ids,
        Some(Box::new(move |g| {
            let mut grads = Vec::with_capacity(widths2.len());
            let mut off = 0;
            for w in &widths2 {
                grads.push(
                    g.slice_axis(Axis(1), ndarray::Slice::from(off..off + w))
                        .to_owned(),
                );
                off += w;
            }
            grads
        })),
    )
}

/// Stack `[1, n]` values into `[m, n]` rows.
pub fn stack_rows<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let values: Vec<ArrayD<f64>> = parts.iter().map(|p| p.value()).collect();
    let n = values[0].shape()[1];
    let mut out = ArrayD::zeros(IxDyn(&[values.len(), n]));
    for (i, v) in values.iter().enumerate() {
        assert_eq!(v.shape(), [1, n]);
        out.index_axis_mut(Axis(0), i)
            .assign(&v.index_axis(Axis(0), 0));
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let count = parts.len();
    tape.push(
        out,
        ids,
        Some(Box::new(move |g| {
            (0..count)
                .map(|i| {
                    g.index_axis(Axis(0), i)
                        .to_owned()
                        .insert_axis(Axis(0))
                })
                .collect()
        })),
    )
}

/// Layer normalization over the last axis of a `[1, n]` (or `[m, n]`,
/// per-row) value, without affine parameters. `eps` is kept tiny so the
/// unit-variance invariant holds to 1e-6.
pub fn layer_norm_rows(x: Var<'_>) -> Var<'_> {
    let m = x.mean_cols_keep();
    let d = x.sub_col(m);
    let v = d.mul(d).mean_cols_keep();
    let s = v.add_scalar(LN_EPS).sqrt();
    d.div_col(s)
}

pub const LN_EPS: f64 = 1e-12;

impl<'t> Var<'t> {
    /// Mean over columns per row: `[m, n] -> [m, 1]`.
    pub fn mean_cols_keep(self) -> Var<'t> {
        let a = self.value();
        let n = a.shape()[1] as f64;
        let out = a.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let shape = a.raw_dim();
        self.unary(
            out,
            Box::new(move |g| {
                let mut full = ArrayD::zeros(shape.clone());
                for (i, mut row) in full.axis_iter_mut(Axis(0)).enumerate() {
                    let gv = g[[i, 0]] / n;
                    row.fill(gv);
                }
                vec![full]
            }),
        )
    }

    /// Column-broadcast subtraction: `[m, n] - [m, 1]`.
    pub fn sub_col(self, col: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = col.value();
        assert_eq!(a.shape()[0], b.shape()[0], "sub_col: height mismatch");
        assert_eq!(b.shape()[1], 1, "sub_col: rhs must be [m, 1]");
        let out = &a - &b;
        self.binary(
            col,
            out,
            Box::new(move |g| {
                let gcol = -g.sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![g.clone(), gcol]
            }),
        )
    }

    /// Column-broadcast division: `[m, n] / [m, 1]`.
    pub fn div_col(self, col: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = col.value();
        assert_eq!(a.shape()[0], b.shape()[0], "div_col: height mismatch");
        assert_eq!(b.shape()[1], 1, "div_col: rhs must be [m, 1]");
        let out = &a / &b;
        self.binary(
            col,
            out,
            Box::new(move |g| {
                let ga = g / &b;
                let gb = (-(g * &a) / (&b * &b)).sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![ga, gb]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Central finite-difference check: the builder constructs a scalar
    /// loss from the leaf under test, and its analytic gradient must match.
    fn check<B>(build: B, x0: &ArrayD<f64>, tol: f64)
    where
        B: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
    {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = build(&tape, x);
        let grads = tape.backward(loss);
        let analytic = grads
            .get(x)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(x0.raw_dim()));
        let eps = 1e-6;
        let mut max_err: f64 = 0.0;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            xm.as_slice_mut().unwrap()[i] -= eps;
            let tp = Tape::new();
            let fp = build(&tp, tp.leaf(xp)).scalar();
            let tm = Tape::new();
            let fm = build(&tm, tm.leaf(xm)).scalar();
            let num = (fp - fm) / (2.0 * eps);
            let ana = analytic.as_slice().unwrap()[i];
            let denom = ana.abs().max(num.abs()).max(1e-6);
            max_err = max_err.max((ana - num).abs() / denom);
        }
        assert!(max_err < tol, "gradient mismatch: max rel err {max_err}");
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[3, 4]);
        check(|t, x| (x * x + x).sum_all(), &x, 1e-5);
        check(
            |t, x| {
                let c = t.leaf(ArrayD::from_elem(IxDyn(&[3, 4]), 0.7));
                x.div(c).sum_all()
            },
            &x,
            1e-5,
        );
        check(|_t, x| x.sigmoid().sum_all(), &x, 1e-5);
        check(|_t, x| x.tanh().sum_all(), &x, 1e-5);
        check(|_t, x| x.exp().sum_all(), &x, 1e-5);
        check(|_t, x| x.softplus().sum_all(), &x, 1e-5);
        check(|_t, x| x.scale(2.5).add_scalar(1.0).mean_all(), &x, 1e-5);
        let xp = x.mapv(|v| v.abs() + 0.5);
        check(|_t, x| x.ln().sum_all(), &xp, 1e-5);
        check(|_t, x| x.sqrt().sum_all(), &xp, 1e-5);
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[3, 5]);
        let w0 = randn(&mut rng, &[5, 2]);
        check(
            move |t, x| {
                let w = t.leaf(w0.clone());
                x.matmul(w).sum_all()
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn broadcast_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[4, 3]);
        let row0 = randn(&mut rng, &[1, 3]);
        let r1 = row0.clone();
        check(
            move |t, x| x.add_row(t.leaf(r1.clone())).mul(x).sum_all(),
            &x,
            1e-5,
        );
        let r2 = row0.clone();
        check(
            move |t, x| x.mul_row(t.leaf(r2.clone())).sum_all(),
            &x,
            1e-5,
        );
        let r3 = row0.mapv(|v| v.abs() + 0.5);
        check(
            move |t, x| x.div_row(t.leaf(r3.clone())).sum_all(),
            &x,
            1e-5,
        );
        // gradient w.r.t. the row operand
        let base = randn(&mut rng, &[4, 3]);
        check(
            move |t, r| t.leaf(base.clone()).mul_row(r).mul(t.leaf(base.clone())).sum_all(),
            &row0,
            1e-5,
        );
    }

    #[test]
    fn scalar_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, &[2, 3]);
        check(
            |_t, x| {
                let m = x.mean_all();
                x.sub_scalar_var(m).mul(x).sum_all()
            },
            &x,
            1e-5,
        );
        check(
            |_t, x| {
                let s = x.mul(x).mean_all().add_scalar(0.3).sqrt();
                x.div_scalar_var(s).sum_all()
            },
            &x,
            1e-5,
        );
        check(
            |_t, x| {
                let s = x.mean_all().add_scalar(2.0);
                x.mul_scalar_var(s).sum_all()
            },
            &x,
            1e-5,
        );
        check(
            |_t, x| {
                let s = x.mean_all();
                x.add_scalar_var(s).mul(x).sum_all()
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn structural_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn(&mut rng, &[3, 6]);
        check(|_t, x| x.slice_cols(1, 4).mul(x.slice_cols(2, 5)).sum_all(), &x, 1e-5);
        check(|_t, x| x.slice_rows(0, 2).sum_all(), &x, 1e-5);
        check(|_t, x| x.transpose().matmul(x).sum_all(), &x, 1e-5);
        check(|_t, x| x.reshape(&[6, 3]).mul(x.reshape(&[6, 3])).sum_all(), &x, 1e-5);
        check(|_t, x| x.mean_rows().mul(x.mean_rows()).sum_all(), &x, 1e-5);
        check(|_t, x| x.sum_rows().mul(x.sum_rows()).sum_all(), &x, 1e-5);
        check(
            |t, x| {
                let parts = [x.slice_cols(0, 2), x.slice_cols(4, 6)];
                concat_cols(t, &parts).mul(concat_cols(t, &parts)).sum_all()
            },
            &x,
            1e-5,
        );
        let v = randn(&mut rng, &[1, 4]);
        check(
            |t, v| {
                let rows = [v, v.scale(2.0), v.add_scalar(1.0)];
                stack_rows(t, &rows).mul(stack_rows(t, &rows)).sum_all()
            },
            &v,
            1e-5,
        );
    }

    #[test]
    fn unfold_and_pool_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = randn(&mut rng, &[8, 3]);
        check(|_t, x| x.unfold1d(3, 2).mul(x.unfold1d(3, 2)).sum_all(), &x, 1e-5);
        let img = randn(&mut rng, &[4 * 6, 2]);
        check(
            |_t, x| x.unfold2d_3x3(4, 6).mul(x.unfold2d_3x3(4, 6)).sum_all(),
            &img,
            1e-5,
        );
        // max pooling is piecewise-linear; random values avoid ties
        check(|_t, x| x.max_pool2(4, 6).mul(x.max_pool2(4, 6)).sum_all(), &img, 1e-4);
    }

    #[test]
    fn log_softmax_and_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = randn(&mut rng, &[2, 5]);
        check(|_t, x| x.log_softmax_rows().mul(x.log_softmax_rows()).sum_all(), &x, 1e-5);
        check(|_t, x| layer_norm_rows(x).mul(layer_norm_rows(x)).sum_all(), &x, 1e-4);
        check(|_t, x| x.clamp(-0.5, 0.5).mul(x.clamp(-0.5, 0.5)).sum_all(), &x, 1e-4);
        check(|_t, x| x.relu().sum_all(), &x, 1e-4);
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = randn(&mut rng, &[1, 128]);
        let tape = Tape::new();
        let y = layer_norm_rows(tape.leaf(x));
        let v = y.value();
        let mean = v.mean().unwrap();
        let var = v.mapv(|e| e * e).mean().unwrap() - mean * mean;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn multi_use_accumulates() {
        // f(x) = sum(x*x) counted through two separate uses: grad = 2x
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![1.0, -2.0, 3.0]).unwrap();
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let loss = v.mul(v).sum_all();
        let grads = tape.backward(loss);
        let g = grads.get(v).unwrap();
        assert_eq!(g.as_slice().unwrap(), &[2.0, -4.0, 6.0]);
    }
}
