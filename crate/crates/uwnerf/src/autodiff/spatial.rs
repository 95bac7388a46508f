//! Spatial tape operations: convolution, pooling, padding, resampling and
//! row gathers.  All image tensors are channel-first `[C, H, W]`.

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use super::{accumulate, BackFn, Tape, Var};

impl Tape {
    /// 2-d convolution of `x = [Cin, H, W]` with kernel
    /// `w = [Cout, Cin, kh, kw]`, bias `[Cout]`, zero padding `pad` and the
    /// given stride.  Output is `[Cout, OH, OW]`.
    ///
    /// Implemented as im2col followed by one matrix product; the unfolded
    /// column matrix is kept alive for the backward pass.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        assert!(stride > 0, "conv2d: zero stride");
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        assert_eq!(xv.ndim(), 3, "conv2d: input must be [C, H, W]");
        assert_eq!(wv.ndim(), 4, "conv2d: kernel must be [Cout, Cin, kh, kw]");
        let (cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, kcin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(cin, kcin, "conv2d: channel mismatch {cin} vs {kcin}");
        assert_eq!(bv.shape(), &[cout], "conv2d: bias shape");
        assert!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            wd + 2 * pad
        );
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let mut cols = ndarray::Array2::<f64>::zeros((cin * kh * kw, oh * ow));
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            cols[[row, oy * ow + ox]] = x3[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        let w2 = wv
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let mut out2 = w2.dot(&cols);
        for (mut row, &bias) in out2.rows_mut().into_iter().zip(b1.iter()) {
            row += bias;
        }
        let value = super::to_c_order(out2)
            .into_shape_with_order(IxDyn(&[cout, oh, ow]))
            .unwrap();

        let back: Option<BackFn> = if self.grad_enabled {
            let cols = cols.clone();
            Some(Box::new(move |tape, g, grads| {
                let g2 = g.view().into_shape_with_order((cout, oh * ow)).unwrap();
                let wv = tape.value(w);
                let w2 = wv
                    .view()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .unwrap();
                // Kernel and bias gradients from the matrix form.  The
                // product can come back with reversed strides, so normalise
                // before reshaping.
                let dw2 = super::to_c_order(g2.dot(&cols.t()));
                accumulate(
                    &mut grads[w.0],
                    dw2.into_shape_with_order(IxDyn(&[cout, cin, kh, kw])).unwrap(),
                );
                accumulate(&mut grads[b.0], g2.sum_axis(Axis(1)).into_dyn());
                // Input gradient: fold the column gradient back into the image.
                let dcols = w2.t().dot(&g2);
                let mut dx = ndarray::Array3::<f64>::zeros((cin, h, wd));
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let row = (ci * kh + ky) * kw + kx;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    dx[[ci, iy as usize, ix as usize]] +=
                                        dcols[[row, oy * ow + ox]];
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]` to `[C, 2H, 2W]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "upsample2: input must be [C, H, W]");
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let mut value = ndarray::Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    value[[ci, i, j]] = x3[[ci, i / 2, j / 2]];
                }
            }
        }
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dx[[ci, i / 2, j / 2]] += g3[[ci, i, j]];
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), back)
    }

    /// Average pooling with window and stride `k`; the spatial extent must
    /// be divisible by `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        assert!(k > 0, "avg_pool: zero window");
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "avg_pool: input must be [C, H, W]");
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(
            h % k == 0 && w % k == 0,
            "avg_pool: {h}x{w} not divisible by {k}"
        );
        let (oh, ow) = (h / k, w / k);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let inv = 1.0 / (k * k) as f64;
        let mut value = ndarray::Array3::<f64>::zeros((c, oh, ow));
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += x3[[ci, oy * k + dy, ox * k + dx]];
                        }
                    }
                    value[[ci, oy, ox]] = s * inv;
                }
            }
        }
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g3[[ci, oy, ox]] * inv;
                            for dy in 0..k {
                                for dxx in 0..k {
                                    dx[[ci, oy * k + dy, ox * k + dxx]] += gv;
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), back)
    }

    /// Mirror padding of `[C, H, W]` by `p` on each side.  The border pixel
    /// itself is not repeated (`[c b a | a b c | c b a]` style), which
    /// requires `p < H` and `p < W`.
    pub fn reflect_pad(&mut self, x: Var, p: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "reflect_pad: input must be [C, H, W]");
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(p < h && p < w, "reflect_pad: pad {p} too large for {h}x{w}");
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let r = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
            r as usize
        };
        let (oh, ow) = (h + 2 * p, w + 2 * p);
        let mut value = ndarray::Array3::<f64>::zeros((c, oh, ow));
        for ci in 0..c {
            for i in 0..oh {
                let sy = reflect(i as isize - p as isize, h);
                for j in 0..ow {
                    let sx = reflect(j as isize - p as isize, w);
                    value[[ci, i, j]] = x3[[ci, sy, sx]];
                }
            }
        }
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..oh {
                        let sy = reflect(i as isize - p as isize, h);
                        for j in 0..ow {
                            let sx = reflect(j as isize - p as isize, w);
                            dx[[ci, sy, sx]] += g3[[ci, i, j]];
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), back)
    }

    /// Valid-region box filter: each output position is the mean of a
    /// `win x win` window, so `[C, H, W]` maps to
    /// `[C, H - win + 1, W - win + 1]`.
    pub fn box_mean(&mut self, x: Var, win: usize) -> Var {
        assert!(win > 0, "box_mean: zero window");
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "box_mean: input must be [C, H, W]");
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(h >= win && w >= win, "box_mean: window {win} exceeds {h}x{w}");
        let (oh, ow) = (h - win + 1, w - win + 1);
        let inv = 1.0 / (win * win) as f64;
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let mut value = ndarray::Array3::<f64>::zeros((c, oh, ow));
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..win {
                        for dx in 0..win {
                            s += x3[[ci, oy + dy, ox + dx]];
                        }
                    }
                    value[[ci, oy, ox]] = s * inv;
                }
            }
        }
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g3[[ci, oy, ox]] * inv;
                            for dy in 0..win {
                                for dxx in 0..win {
                                    dx[[ci, oy + dy, ox + dxx]] += gv;
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), back)
    }

    /// Crops `[C, H, W]` to the `h x w` window whose top-left corner is
    /// `(y0, x0)`.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "crop: input must be [C, H, W]");
        let (c, ih, iw) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(
            y0 + h <= ih && x0 + w <= iw,
            "crop: window {h}x{w}@({y0},{x0}) exceeds {ih}x{iw}"
        );
        let value = xv
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .slice(ndarray::s![.., y0..y0 + h, x0..x0 + w])
            .to_owned()
            .into_dyn();
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<f64>::zeros((c, ih, iw));
                dx.slice_mut(ndarray::s![.., y0..y0 + h, x0..x0 + w])
                    .assign(&g3);
                accumulate(&mut grads[x.0], dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Gathers rows of a `[m, n]` matrix by index (duplicates allowed),
    /// producing `[idx.len(), n]`.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 2, "select_rows: input must be 2-d");
        let (m, n) = (av.shape()[0], av.shape()[1]);
        assert!(
            idx.iter().all(|&i| i < m),
            "select_rows: index out of range ({} rows)",
            m
        );
        let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
        let mut value = ndarray::Array2::<f64>::zeros((idx.len(), n));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&a2.row(i));
        }
        let back: Option<BackFn> = if self.grad_enabled {
            let idx = idx.to_vec();
            Some(Box::new(move |_tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array2::<f64>::zeros((m, n));
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(i);
                    row += &g2.row(r);
                }
                accumulate(&mut grads[a.0], dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), back)
    }

    /// Concatenates matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let n = self.value(parts[0]).shape()[1];
        let mut row_counts = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ndim(), 2, "concat_rows: inputs must be 2-d");
            assert_eq!(pv.shape()[1], n, "concat_rows: column mismatch");
            row_counts.push(pv.shape()[0]);
        }
        let views: Vec<_> = parts
            .iter()
            .map(|&p| self.value(p).view().into_dimensionality::<Ix2>().unwrap())
            .collect();
        let value = ndarray::concatenate(Axis(0), &views).unwrap().into_dyn();
        let back: Option<BackFn> = if self.grad_enabled {
            let parts = parts.to_vec();
            Some(Box::new(move |_tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut at = 0usize;
                for (&p, &rows) in parts.iter().zip(row_counts.iter()) {
                    let gp = g2.slice(ndarray::s![at..at + rows, ..]).to_owned();
                    accumulate(&mut grads[p.0], gp.into_dyn());
                    at += rows;
                }
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Samples a `[C, H, W]` grid at continuous `(x, y)` positions (in grid
    /// units, where integer coordinates land exactly on grid nodes) with
    /// bilinear interpolation, returning `[coords.len(), C]`.  Positions are
    /// clamped to the grid rectangle, so out-of-bounds queries return edge
    /// values; callers that care track validity separately.
    pub fn bilinear_gather(&mut self, grid: Var, coords: &[(f64, f64)]) -> Var {
        let gv = self.value(grid);
        assert_eq!(gv.ndim(), 3, "bilinear_gather: grid must be [C, H, W]");
        let (c, h, w) = (gv.shape()[0], gv.shape()[1], gv.shape()[2]);
        assert!(h > 0 && w > 0, "bilinear_gather: empty grid");
        let g3 = gv.view().into_dimensionality::<Ix3>().unwrap();
        // Each sample touches up to four nodes; precompute (y, x, weight).
        let mut taps: Vec<[(usize, usize, f64); 4]> = Vec::with_capacity(coords.len());
        for &(xc, yc) in coords {
            assert!(xc.is_finite() && yc.is_finite(), "bilinear_gather: non-finite coord");
            let xc = xc.clamp(0.0, (w - 1) as f64);
            let yc = yc.clamp(0.0, (h - 1) as f64);
            let x0 = xc.floor() as usize;
            let y0 = yc.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = xc - x0 as f64;
            let fy = yc - y0 as f64;
            taps.push([
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ]);
        }
        let mut value = ndarray::Array2::<f64>::zeros((coords.len(), c));
        for (r, tap) in taps.iter().enumerate() {
            for &(y, x, wt) in tap {
                if wt == 0.0 {
                    continue;
                }
                for ci in 0..c {
                    value[[r, ci]] += wt * g3[[ci, y, x]];
                }
            }
        }
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dg = ndarray::Array3::<f64>::zeros((c, h, w));
                for (r, tap) in taps.iter().enumerate() {
                    for &(y, x, wt) in tap {
                        if wt == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            dg[[ci, y, x]] += wt * g2[[r, ci]];
                        }
                    }
                }
                accumulate(&mut grads[grid.0], dg.into_dyn());
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), back)
    }

    /// Per-channel mean over the spatial axes of `[C, H, W]`, shape `[C]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "channel_mean: input must be [C, H, W]");
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(h * w > 0, "channel_mean: empty image");
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let inv = 1.0 / (h * w) as f64;
        let mut value = ndarray::Array1::<f64>::zeros(c);
        for ci in 0..c {
            value[ci] = x3.index_axis(Axis(0), ci).sum() * inv;
        }
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    dx.index_axis_mut(Axis(0), ci).fill(g1[ci] * inv);
                }
                accumulate(&mut grads[x.0], dx.into_dyn());
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), back)
    }

    /// Subtracts a `[1]` scalar node from every element of `a`.
    pub fn sub_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.len(), 1, "sub_scalar: subtrahend must be scalar");
        let sc = sv[[0]];
        let value: ArrayD<f64> = self.value(a).mapv(|x| x - sc);
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |_tape, g, grads| {
                accumulate(&mut grads[a.0], g.clone());
                let gs = ArrayD::from_elem(IxDyn(&[1]), -g.sum());
                accumulate(&mut grads[s.0], gs);
            }))
        } else {
            None
        };
        self.push(value, back)
    }

    /// Multiplies every element of `a` by a `[1]` scalar node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.len(), 1, "mul_scalar: factor must be scalar");
        let sc = sv[[0]];
        let value: ArrayD<f64> = self.value(a).mapv(|x| x * sc);
        let back: Option<BackFn> = if self.grad_enabled {
            Some(Box::new(move |tape, g, grads| {
                let sc = tape.value(s)[[0]];
                accumulate(&mut grads[a.0], g.mapv(|x| x * sc));
                let dot = g
                    .iter()
                    .zip(tape.value(a).iter())
                    .map(|(x, y)| x * y)
                    .sum::<f64>();
                accumulate(&mut grads[s.0], ArrayD::from_elem(IxDyn(&[1]), dot));
            }))
        } else {
            None
        };
        self.push(value, back)
    }
}
