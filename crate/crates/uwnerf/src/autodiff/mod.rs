//! Reverse-mode automatic differentiation over dynamically shaped `f64`
//! tensors.
//!
//! The engine is a classic define-by-run tape: every operation appends one
//! node holding its forward value and (when gradients are enabled) a boxed
//! backward closure.  [`Tape::backward`] walks the node list strictly in
//! reverse creation order and accumulates gradients with in-order `+=`, so
//! the same graph always produces bit-identical gradients — a property the
//! trainer's replay guarantees lean on.
//!
//! Conventions used throughout:
//!
//! * Tensors are [`ndarray::ArrayD<f64>`].  Scalars are one-element arrays
//!   of shape `[1]`.
//! * Matrices are row-major `[rows, cols]`; images and feature maps are
//!   channel-first `[C, H, W]`.
//! * Shape mismatches are programmer errors and panic via `assert!`; the
//!   crate's fallible API validates its inputs before building graphs.
//! * Everything runs single-threaded.  There is no implicit parallelism to
//!   keep summation order (and therefore the last ulp) reproducible.
//!
//! Fused domain-specific operations (convolution, attention, bilinear
//! gathers, ...) live in the [`spatial`] and [`attention`] submodules and
//! re-export through this module; graph code only ever talks to [`Tape`].

mod attention;
mod spatial;

pub use attention::AttentionStats;

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};

/// Handle to a node on a [`Tape`].  Cheap to copy; only meaningful for the
/// tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tape, &ArrayD<f64>, &mut Vec<Option<ArrayD<f64>>>)>;

struct Node {
    value: ArrayD<f64>,
    back: Option<BackFn>,
}

/// Gradients produced by [`Tape::backward`], indexable by [`Var`].
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`, if `v` influenced the root.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves the gradient for `v` out of the set (for optimizer updates).
    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// A gradient tape: owns every node of one computation graph.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Tape {
    /// Creates a tape.  With `grad_enabled = false` the forward values are
    /// still recorded (handles stay valid) but no backward closures are
    /// built, and [`Tape::backward`] must not be called.
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled,
        }
    }

    /// Whether this tape records backward closures.
    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when no node has been recorded.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        // Every stored value is row-major so backward closures may reshape
        // views of it freely.
        self.nodes.push(Node { value: to_c_order(value), back });
        Var(self.nodes.len() - 1)
    }

    /// Enters a tensor onto the tape as a leaf (input or parameter).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// Convenience leaf for a scalar, stored with shape `[1]`.
    pub fn scalar_leaf(&mut self, x: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), x))
    }

    /// Forward value of `v`.
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Forward value of a one-element tensor as `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on tensor of shape {:?}", val.shape());
        val.iter().copied().next().unwrap()
    }

    /// Runs the backward pass from a one-element root, returning gradients
    /// for every node that influenced it.  Nodes are visited strictly in
    /// reverse creation order, which makes the accumulation deterministic.
    pub fn backward(&self, root: Var) -> Grads {
        assert!(
            self.grad_enabled,
            "backward() on a tape created with grad_enabled = false"
        );
        let root_val = self.value(root);
        assert_eq!(
            root_val.len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            root_val.shape()
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(root_val.raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            // Accumulated deltas may carry transposed strides; hand every
            // closure a row-major gradient so view reshapes cannot fail.
            let g = to_c_order(g);
            if let Some(back) = self.nodes[i].back.as_ref() {
                back(self, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    // ---- elementwise -----------------------------------------------------

    /// Generic unary elementwise op.  `f` maps input to output; `df(x, y)`
    /// is the local derivative given input `x` and output `y`.
    fn unary<F, D>(&mut self, a: Var, f: F, df: D) -> Var
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let value = self.value(a).mapv(&f);
        let own = self.nodes.len();
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |tape, g, grads| {
                let x = tape.value(a);
                let y = tape.value(Var(own));
                let mut delta = g.clone();
                delta
                    .iter_mut()
                    .zip(x.iter())
                    .zip(y.iter())
                    .for_each(|((d, &xv), &yv)| *d *= df(xv, yv));
                accumulate(&mut grads[a.0], delta);
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = same_shape_zip(self.value(a), self.value(b), "add", |x, y| x + y);
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Elementwise difference `a - b` of two same-shape tensors.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = same_shape_zip(self.value(a), self.value(b), "sub", |x, y| x - y);
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.mapv(|x| -x));
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = same_shape_zip(self.value(a), self.value(b), "mul", |x, y| x * y);
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |tape, g, grads| {
                accumulate(&mut grads[a.0], g * tape.value(b));
                accumulate(&mut grads[b.0], g * tape.value(a));
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Elementwise quotient `a / b` of two same-shape tensors.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = same_shape_zip(self.value(a), self.value(b), "div", |x, y| x / y);
        let own = self.nodes.len();
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |tape, g, grads| {
                let bv = tape.value(b);
                accumulate(&mut grads[a.0], g / bv);
                // d/db (a/b) = -(a/b)/b, reusing the stored output.
                let y = tape.value(Var(own));
                let mut delta = g.clone();
                delta
                    .iter_mut()
                    .zip(y.iter())
                    .zip(bv.iter())
                    .for_each(|((d, &yv), &bvv)| *d *= -yv / bvv);
                accumulate(&mut grads[b.0], delta);
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, move |_, _| c)
    }

    /// Adds the constant `c` to every element.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, |_, _| 1.0)
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    /// Elementwise natural logarithm.
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    /// Elementwise square root.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, |_, y| 0.5 / y)
    }

    /// Elementwise logistic sigmoid, computed in the numerically stable
    /// branch-split form.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, |_, y| y * (1.0 - y))
    }

    /// Elementwise rectifier.  The subgradient at zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Clamps every element to `[lo, hi]`.  The derivative is one strictly
    /// inside the interval and zero elsewhere.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo < hi, "clamp: empty interval [{lo}, {hi}]");
        self.unary(
            a,
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    // ---- reductions and shape --------------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let value = ArrayD::from_elem(IxDyn(&[1]), s);
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |tape, g, grads| {
                let gs = g[[0]];
                let delta = ArrayD::from_elem(tape.value(a).raw_dim(), gs);
                accumulate(&mut grads[a.0], delta);
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        assert!(n > 0, "mean of empty tensor");
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reinterprets `a` with a new shape holding the same number of
    /// elements.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let value = to_c_order(av.to_owned())
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| {
                panic!("reshape: {:?} -> {shape:?} mismatch", self.value(a).shape());
            });
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |tape, g, grads| {
                let orig = tape.value(a).raw_dim();
                let delta = to_c_order(g.to_owned()).into_shape_with_order(orig).unwrap();
                accumulate(&mut grads[a.0], delta);
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Concatenates `[m, p]` and `[m, q]` into `[m, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ndim(), 2, "concat_cols: lhs must be 2-d");
        assert_eq!(bv.ndim(), 2, "concat_cols: rhs must be 2-d");
        assert_eq!(av.shape()[0], bv.shape()[0], "concat_cols: row mismatch");
        let p = av.shape()[1];
        let value = ndarray::concatenate(
            Axis(1),
            &[
                av.view().into_dimensionality::<Ix2>().unwrap(),
                bv.view().into_dimensionality::<Ix2>().unwrap(),
            ],
        )
        .unwrap()
        .into_dyn();
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let ga = g2.slice(ndarray::s![.., ..p]).to_owned().into_dyn();
                let gb = g2.slice(ndarray::s![.., p..]).to_owned().into_dyn();
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Extracts columns `[start, end)` of a `[m, n]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 2, "slice_cols: input must be 2-d");
        let (m, n) = (av.shape()[0], av.shape()[1]);
        assert!(start < end && end <= n, "slice_cols: bad range {start}..{end} of {n}");
        let value = av
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .slice(ndarray::s![.., start..end])
            .to_owned()
            .into_dyn();
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut delta = ndarray::Array2::<f64>::zeros((m, n));
                delta.slice_mut(ndarray::s![.., start..end]).assign(&g2);
                accumulate(&mut grads[a.0], delta.into_dyn());
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Transpose of a `[m, n]` matrix.
    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 2, "transpose: input must be 2-d");
        let value = av
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .t()
            .to_owned()
            .into_dyn();
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                accumulate(&mut grads[a.0], g2.t().to_owned().into_dyn());
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Column means of a `[m, n]` matrix, shape `[1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 2, "mean_rows: input must be 2-d");
        let m = av.shape()[0];
        assert!(m > 0, "mean_rows: empty matrix");
        let n = av.shape()[1];
        let mean = av
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .mean_axis(Axis(0))
            .unwrap();
        let value = mean.into_shape_with_order(IxDyn(&[1, n])).unwrap();
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut delta = ndarray::Array2::<f64>::zeros((m, n));
                let row = g2.row(0).mapv(|x| x / m as f64);
                for mut r in delta.rows_mut() {
                    r.assign(&row);
                }
                accumulate(&mut grads[a.0], delta.into_dyn());
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Tiles a `[1, n]` row `m` times into `[m, n]`.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 2, "repeat_rows: input must be 2-d");
        assert_eq!(av.shape()[0], 1, "repeat_rows: input must have one row");
        let n = av.shape()[1];
        let row = av.view().into_dimensionality::<Ix2>().unwrap();
        let mut value = ndarray::Array2::<f64>::zeros((m, n));
        for mut r in value.rows_mut() {
            r.assign(&row.row(0));
        }
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let summed = g2.sum_axis(Axis(0));
                let delta = summed.into_shape_with_order(IxDyn(&[1, n])).unwrap();
                accumulate(&mut grads[a.0], delta);
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), back)
    }

    /// Per-position maximum over the channel axis of `[C, H, W]`, shape
    /// `[H, W]`.  Ties resolve to the lowest channel index.
    pub fn channel_max(&mut self, a: Var) -> Var {
        self.channel_extremum(a, true)
    }

    /// Per-position minimum over the channel axis of `[C, H, W]`, shape
    /// `[H, W]`.  Ties resolve to the lowest channel index.
    pub fn channel_min(&mut self, a: Var) -> Var {
        self.channel_extremum(a, false)
    }

    fn channel_extremum(&mut self, a: Var, take_max: bool) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 3, "channel extremum: input must be [C, H, W]");
        let (c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert!(c > 0, "channel extremum: zero channels");
        let mut value = ndarray::Array2::<f64>::zeros((h, w));
        let mut arg = ndarray::Array2::<usize>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let mut best = av[[0, i, j]];
                let mut best_c = 0usize;
                for ch in 1..c {
                    let x = av[[ch, i, j]];
                    if (take_max && x > best) || (!take_max && x < best) {
                        best = x;
                        best_c = ch;
                    }
                }
                value[[i, j]] = best;
                arg[[i, j]] = best_c;
            }
        }
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut delta = ndarray::Array3::<f64>::zeros((c, h, w));
                for i in 0..h {
                    for j in 0..w {
                        delta[[arg[[i, j]], i, j]] += g2[[i, j]];
                    }
                }
                accumulate(&mut grads[a.0], delta.into_dyn());
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), back)
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ndim(), 2, "matmul: lhs must be 2-d");
        assert_eq!(bv.ndim(), 2, "matmul: rhs must be 2-d");
        assert_eq!(
            av.shape()[1],
            bv.shape()[0],
            "matmul: inner dims {} vs {}",
            av.shape()[1],
            bv.shape()[0]
        );
        let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
        let value = a2.dot(&b2).into_dyn();
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = tape.value(a).view().into_dimensionality::<Ix2>().unwrap();
                let b2 = tape.value(b).view().into_dimensionality::<Ix2>().unwrap();
                accumulate(&mut grads[a.0], g2.dot(&b2.t()).into_dyn());
                accumulate(&mut grads[b.0], a2.t().dot(&g2).into_dyn());
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(av.ndim(), 2, "add_row_bias: lhs must be 2-d");
        assert_eq!(bv.ndim(), 1, "add_row_bias: bias must be 1-d");
        assert_eq!(av.shape()[1], bv.shape()[0], "add_row_bias: width mismatch");
        let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let value = (&a2 + &b1).into_dyn();
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[bias.0], g2.sum_axis(Axis(0)).into_dyn());
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Layer normalisation over the last axis of a `[m, n]` matrix with
    /// learned gain and bias of shape `[n]`.
    ///
    /// Each row is shifted and scaled to zero mean and unit variance
    /// (population variance, stabilised by `eps`) before the affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 2, "layer_norm: input must be 2-d");
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        assert!(n > 0, "layer_norm: empty rows");
        let gv = self.value(gain);
        let bv = self.value(bias);
        assert_eq!(gv.shape(), &[n], "layer_norm: gain shape");
        assert_eq!(bv.shape(), &[n], "layer_norm: bias shape");
        let x2 = xv.view().into_dimensionality::<Ix2>().unwrap();
        let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();

        let mut normed = ndarray::Array2::<f64>::zeros((m, n));
        let mut inv_std = vec![0.0f64; m];
        for i in 0..m {
            let row = x2.row(i);
            let mu = row.mean().unwrap();
            let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                normed[[i, j]] = (row[j] - mu) * is;
            }
        }
        let mut value = ndarray::Array2::<f64>::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                value[[i, j]] = normed[[i, j]] * g1[j] + b1[j];
            }
        }
        let back: Option<BackFn> = if self.grad_enabled {
            let normed = normed.clone();
            Some(Box::new(move |tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let gain_v = tape.value(gain).view().into_dimensionality::<Ix1>().unwrap().to_owned();
                let mut dgain = ndarray::Array1::<f64>::zeros(n);
                let mut dbias = ndarray::Array1::<f64>::zeros(n);
                let mut dx = ndarray::Array2::<f64>::zeros((m, n));
                for i in 0..m {
                    // d/dnormed, then the standard layer-norm input gradient:
                    // dx = inv_std * (dn - mean(dn) - normed * mean(dn * normed))
                    let mut dn = ndarray::Array1::<f64>::zeros(n);
                    for j in 0..n {
                        let gij = g2[[i, j]];
                        dgain[j] += gij * normed[[i, j]];
                        dbias[j] += gij;
                        dn[j] = gij * gain_v[j];
                    }
                    let dn_mean = dn.mean().unwrap();
                    let dn_dot = dn
                        .iter()
                        .zip(normed.row(i).iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / n as f64;
                    for j in 0..n {
                        dx[[i, j]] = inv_std[i] * (dn[j] - dn_mean - normed[[i, j]] * dn_dot);
                    }
                }
                accumulate(&mut grads[x.0], dx.into_dyn());
                accumulate(&mut grads[gain.0], dgain.into_dyn());
                accumulate(&mut grads[bias.0], dbias.into_dyn());
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), back)
    }
}

/// Numerically stable logistic function.
pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Returns `a` backed by row-major memory, copying only when needed.
/// Transposes and matrix products can come back with reversed strides,
/// which raw reshapes reject.
pub(crate) fn to_c_order<D: ndarray::Dimension>(
    a: ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Adds `delta` into an optional gradient slot.
pub(crate) fn accumulate(slot: &mut Option<ArrayD<f64>>, delta: ArrayD<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

fn same_shape_zip(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    op: &str,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = a.clone();
    out.iter_mut().zip(b.iter()).for_each(|(x, &y)| *x = f(*x, y));
    out
}
