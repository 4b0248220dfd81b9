//! Differentiable ops recorded on a [`Tape`].

use crate::autograd::{BackCtx, Tape, Var};
use crate::tensor::{col2im, gemm, im2col, ConvGeometry, Tensor};

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.op(
            out,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.op(
            out,
            &[a, b],
            Box::new(|ctx| {
                let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
                let ga = ctx.grad.data().iter().zip(b.data()).map(|(g, y)| g * y);
                let gb = ctx.grad.data().iter().zip(a.data()).map(|(g, x)| g * x);
                vec![
                    Some(Tensor::from_vec(a.shape(), ga.collect())),
                    Some(Tensor::from_vec(b.shape(), gb.collect())),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).scale(c);
        self.op(out, &[a], Box::new(move |ctx| vec![Some(ctx.grad.scale(c))]))
    }

    /// `Σ c_i · v_i` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.shape(terms[0].0).to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, c) in terms {
            let val = self.value(v);
            assert_eq!(val.shape(), &shape[..], "weighted_sum: shape mismatch");
            for (o, x) in out.data_mut().iter_mut().zip(val.data()) {
                *o += c * x;
            }
        }
        let coeffs: Vec<f32> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.op(
            out,
            &vars,
            Box::new(move |ctx| coeffs.iter().map(|&c| Some(ctx.grad.scale(c))).collect()),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum() as f32);
        self.op(
            out,
            &[a],
            Box::new(|ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f32;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        self.op(
            out,
            &[a],
            Box::new(|ctx| vec![Some(ctx.grad.clone().reshaped(ctx.inputs[0].shape()))]),
        )
    }

    /// Entry `i` along the leading axis.
    pub fn select(&mut self, a: Var, i: usize) -> Var {
        let val = self.value(a);
        let out = Tensor::from_vec(&val.shape()[1..], val.outer(i).to_vec());
        self.op(
            out,
            &[a],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                g.outer_mut(i).copy_from_slice(ctx.grad.data());
                vec![Some(g)]
            }),
        )
    }

    /// Stacks same-shaped inputs along a new leading axis.
    pub fn stack(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "stack of nothing");
        let inner = self.shape(vars[0]).to_vec();
        let mut data = Vec::with_capacity(vars.len() * inner.iter().product::<usize>());
        for &v in vars {
            assert_eq!(self.shape(v), &inner[..], "stack: shape mismatch");
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![vars.len()];
        shape.extend_from_slice(&inner);
        let out = Tensor::from_vec(&shape, data);
        self.op(
            out,
            vars,
            Box::new(move |ctx| {
                (0..ctx.inputs.len())
                    .map(|i| Some(Tensor::from_vec(&inner, ctx.grad.outer(i).to_vec())))
                    .collect()
            }),
        )
    }

    /// Elementwise mean of same-shaped inputs.
    pub fn mean_of(&mut self, vars: &[Var]) -> Var {
        let c = 1.0 / vars.len() as f32;
        let terms: Vec<(Var, f32)> = vars.iter().map(|&v| (v, c)).collect();
        self.weighted_sum(&terms)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.op(
            out,
            &[a],
            Box::new(move |ctx| {
                let x = ctx.inputs[0];
                let g = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                    .collect();
                vec![Some(Tensor::from_vec(x.shape(), g))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.op(
            out,
            &[a],
            Box::new(|ctx| {
                let g = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(ctx.output.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                vec![Some(Tensor::from_vec(ctx.output.shape(), g))]
            }),
        )
    }

    /// Identity forward; gradient multiplied by `-lambda` on the way back.
    pub fn grl(&mut self, a: Var, lambda: f32) -> Var {
        let out = self.value(a).clone();
        self.op(
            out,
            &[a],
            Box::new(move |ctx| vec![Some(ctx.grad.scale(-lambda))]),
        )
    }

    /// Nearest-neighbour 2× upsampling of an N×C×H×W tensor.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let s = val.shape().to_vec();
        assert_eq!(s.len(), 4);
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[s[0], s[1], 2 * h, 2 * w]);
        {
            let src = val.data();
            let dst = out.data_mut();
            for p in 0..planes {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        dst[(p * 2 * h + y) * 2 * w + x] = src[(p * h + y / 2) * w + x / 2];
                    }
                }
            }
        }
        self.op(
            out,
            &[a],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&s);
                let gd = g.data_mut();
                let go = ctx.grad.data();
                for p in 0..planes {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            gd[(p * h + y / 2) * w + x / 2] += go[(p * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean over the two trailing (spatial) axes.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let s = val.shape().to_vec();
        assert!(s.len() >= 2);
        let plane = s[s.len() - 2] * s[s.len() - 1];
        let outer = &s[..s.len() - 2];
        let out_data: Vec<f32> = val
            .data()
            .chunks(plane)
            .map(|c| (c.iter().map(|&x| x as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let out_shape = if outer.is_empty() { vec![1] } else { outer.to_vec() };
        let out = Tensor::from_vec(&out_shape, out_data);
        self.op(
            out,
            &[a],
            Box::new(move |ctx| {
                let inv = 1.0 / plane as f32;
                let mut g = Vec::with_capacity(ctx.inputs[0].numel());
                for &go in ctx.grad.data() {
                    g.extend(std::iter::repeat(go * inv).take(plane));
                }
                vec![Some(Tensor::from_vec(&s, g))]
            }),
        )
    }

    /// `x · wᵀ + b` for x of shape N×I, w of O×I, b of O.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 2);
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        assert_eq!(ws[1], i, "linear: input width mismatch");
        let mut out = Tensor::zeros(&[n, o]);
        {
            let bias = self.value(b).data();
            for r in 0..n {
                out.outer_mut(r).copy_from_slice(bias);
            }
        }
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            out.data_mut(),
        );
        self.op(
            out,
            &[x, w, b],
            Box::new(move |ctx| {
                let (xv, wv) = (ctx.inputs[0], ctx.inputs[1]);
                let g = ctx.grad.data();
                let gx = ctx.needs[0].then(|| {
                    let mut gx = Tensor::zeros(&[n, i]);
                    gemm(n, o, i, g, false, wv.data(), false, 0.0, gx.data_mut());
                    gx
                });
                let mut gw = Tensor::zeros(&[o, i]);
                gemm(o, n, i, g, true, xv.data(), false, 0.0, gw.data_mut());
                let mut gb = Tensor::zeros(&[o]);
                for r in 0..n {
                    for (acc, v) in gb.data_mut().iter_mut().zip(ctx.grad.outer(r)) {
                        *acc += v;
                    }
                }
                vec![gx, Some(gw), Some(gb)]
            }),
        )
    }

    /// 2-D convolution of N×C×H×W by O×C×k×k with bias O.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects N×C×H×W");
        assert_eq!(ws[1], xs[1], "conv2d: channel mismatch");
        let geom = ConvGeometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let (n, o) = (xs[0], ws[0]);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0f32; n * rows * cols_n];
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for s in 0..n {
                let c = &mut cols[s * rows * cols_n..(s + 1) * rows * cols_n];
                im2col(xv.outer(s), &geom, c);
                let y = out.outer_mut(s);
                for (ch, plane) in y.chunks_mut(cols_n).enumerate() {
                    plane.fill(bv[ch]);
                }
                gemm(o, rows, cols_n, wv, false, c, false, 1.0, y);
            }
        }
        self.op(
            out,
            &[x, w, b],
            Box::new(move |ctx| conv2d_backward(ctx, &geom, &cols, n, o)),
        )
    }

    /// 1-D convolution across a channel vector with zero padding:
    /// `y[c] = b + Σ_j k[j] · x[c + j − (K−1)/2]`.
    pub fn conv1d_channels(&mut self, x: Var, kernel: Var, bias: Var) -> Var {
        let xv = self.value(x).data().to_vec();
        let kv = self.value(kernel).data().to_vec();
        let bv = self.value(bias).item();
        let (c, k) = (xv.len(), kv.len());
        assert!(k % 2 == 1, "channel kernel size must be odd");
        let half = (k / 2) as isize;
        let out: Vec<f32> = (0..c)
            .map(|i| {
                let mut acc = bv;
                for (j, kw) in kv.iter().enumerate() {
                    let src = i as isize + j as isize - half;
                    if src >= 0 && (src as usize) < c {
                        acc += kw * xv[src as usize];
                    }
                }
                acc
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.op(
            Tensor::from_vec(&shape, out),
            &[x, kernel, bias],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let (xv, kv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut gx = vec![0.0; c];
                let mut gk = vec![0.0; k];
                for i in 0..c {
                    for j in 0..k {
                        let src = i as isize + j as isize - half;
                        if src >= 0 && (src as usize) < c {
                            gx[src as usize] += g[i] * kv[j];
                            gk[j] += g[i] * xv[src as usize];
                        }
                    }
                }
                let gb: f32 = g.iter().sum();
                vec![
                    Some(Tensor::from_vec(ctx.inputs[0].shape(), gx)),
                    Some(Tensor::from_vec(&[k], gk)),
                    Some(Tensor::scalar(gb)),
                ]
            }),
        )
    }

    /// Scales a vector to unit Euclidean norm (zero vectors pass through).
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let norm = val.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt() as f32;
        let inv = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
        let out = val.scale(inv);
        self.op(
            out,
            &[a],
            Box::new(move |ctx| {
                // d(x/|x|) = (g − y (y·g)) / |x|
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let dot: f32 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                let gx = g.iter().zip(y).map(|(g, y)| (g - y * dot) * inv).collect();
                vec![Some(Tensor::from_vec(ctx.output.shape(), gx))]
            }),
        )
    }
}

fn conv2d_backward(
    ctx: &BackCtx<'_>,
    geom: &ConvGeometry,
    cols: &[f32],
    n: usize,
    o: usize,
) -> Vec<Option<Tensor>> {
    let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
    let wv = ctx.inputs[1];
    let mut gw = Tensor::zeros(wv.shape());
    let mut gb = Tensor::zeros(&[o]);
    let mut gx = ctx.needs[0].then(|| Tensor::zeros(ctx.inputs[0].shape()));
    let mut dcols = vec![0.0f32; rows * cols_n];
    for s in 0..n {
        let gy = ctx.grad.outer(s);
        let c = &cols[s * rows * cols_n..(s + 1) * rows * cols_n];
        gemm(o, cols_n, rows, gy, false, c, true, 1.0, gw.data_mut());
        for (acc, plane) in gb.data_mut().iter_mut().zip(gy.chunks(cols_n)) {
            *acc += plane.iter().sum::<f32>();
        }
        if let Some(gx) = gx.as_mut() {
            gemm(rows, o, cols_n, wv.data(), true, gy, false, 0.0, &mut dcols);
            col2im(&dcols, geom, gx.outer_mut(s));
        }
    }
    vec![gx, Some(gw), Some(gb)]
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
