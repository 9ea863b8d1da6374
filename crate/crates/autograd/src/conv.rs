//! 2-D convolution (stride 1, square kernel, zero padding) and 2x2 average
//! pooling, each paired with its adjoint so that gradients stay
//! differentiable to any order.

use crate::tensor::{gemm, Tensor};
use crate::var::{BackwardCtx, Function, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn columns(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    fn from_input(x: &[usize], w: &[usize], pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be (B,C,H,W), got {:?}", x);
        assert_eq!(w.len(), 4, "conv2d weight must be (Co,Ci,k,k), got {:?}", w);
        assert_eq!(x[1], w[1], "conv2d channel mismatch {:?} vs {:?}", x, w);
        assert_eq!(w[2], w[3], "conv2d kernel must be square");
        assert!(
            x[2] + 2 * pad >= w[2] && x[3] + 2 * pad >= w[3],
            "kernel larger than padded input"
        );
        Geometry {
            batch: x[0],
            cin: x[1],
            cout: w[0],
            h: x[2],
            w: x[3],
            k: w[2],
            pad,
        }
    }
}

/// `x (B,Ci,H,W)` to columns `(Ci·k·k, B·Ho·Wo)`.
fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncol = g.columns();
    let mut cols = vec![0.0; g.patch() * ncol];
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for b in 0..g.batch {
                    let src = &x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                    for oh in 0..ho {
                        let ih = oh as isize + ki as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let srow = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let drow = &mut dst[b * ho * wo + oh * wo..b * ho * wo + (oh + 1) * wo];
                        for (ow, d) in drow.iter_mut().enumerate() {
                            let iw = ow as isize + kj as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                *d = srow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `(B,Ci,H,W)`.
fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncol = g.columns();
    let mut x = vec![0.0; g.batch * g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                    for oh in 0..ho {
                        let ih = oh as isize + ki as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let srow = &src[b * ho * wo + oh * wo..b * ho * wo + (oh + 1) * wo];
                        let drow = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for (ow, s) in srow.iter().enumerate() {
                            let iw = ow as isize + kj as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                drow[iw as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(B,C,S)` to `(C,B·S)`.
fn to_channel_major(y: &[f64], b: usize, c: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for n in 0..b {
        for ch in 0..c {
            out[ch * b * s + n * s..ch * b * s + (n + 1) * s]
                .copy_from_slice(&y[(n * c + ch) * s..(n * c + ch + 1) * s]);
        }
    }
    out
}

/// `(C,B·S)` to `(B,C,S)`.
fn from_channel_major(y: &[f64], b: usize, c: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for n in 0..b {
        for ch in 0..c {
            out[(n * c + ch) * s..(n * c + ch + 1) * s]
                .copy_from_slice(&y[ch * b * s + n * s..ch * b * s + (n + 1) * s]);
        }
    }
    out
}

fn conv_forward(x: &Tensor, w: &Tensor, g: &Geometry) -> Tensor {
    let cols = im2col(x.data(), g);
    let n = g.columns();
    let mut out = vec![0.0; g.cout * n];
    gemm(g.cout, g.patch(), n, w.data(), false, &cols, false, &mut out, 0.0);
    let s = g.out_h() * g.out_w();
    Tensor::new(
        &[g.batch, g.cout, g.out_h(), g.out_w()],
        from_channel_major(&out, g.batch, g.cout, s),
    )
}

fn conv_input_grad_kernel(gy: &Tensor, w: &Tensor, g: &Geometry) -> Tensor {
    let s = g.out_h() * g.out_w();
    let gcm = to_channel_major(gy.data(), g.batch, g.cout, s);
    let n = g.columns();
    let mut dcols = vec![0.0; g.patch() * n];
    gemm(g.patch(), g.cout, n, w.data(), true, &gcm, false, &mut dcols, 0.0);
    Tensor::new(&[g.batch, g.cin, g.h, g.w], col2im(&dcols, g))
}

fn conv_weight_grad_kernel(x: &Tensor, gy: &Tensor, g: &Geometry) -> Tensor {
    let cols = im2col(x.data(), g);
    let s = g.out_h() * g.out_w();
    let gcm = to_channel_major(gy.data(), g.batch, g.cout, s);
    let n = g.columns();
    let mut dw = vec![0.0; g.cout * g.patch()];
    gemm(g.cout, n, g.patch(), &gcm, false, &cols, true, &mut dw, 0.0);
    Tensor::new(&[g.cout, g.cin, g.k, g.k], dw)
}

struct ConvFn {
    pad: usize,
}

impl Function for ConvFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Var>> {
        let (x, w) = (&ctx.inputs[0], &ctx.inputs[1]);
        vec![
            ctx.needs[0].then(|| conv2d_input_grad(ctx.grad, w, x.shape(), self.pad)),
            ctx.needs[1].then(|| conv2d_weight_grad(x, ctx.grad, w.shape()[2], self.pad)),
        ]
    }
}

struct ConvInputGradFn {
    pad: usize,
}

impl Function for ConvInputGradFn {
    fn name(&self) -> &'static str {
        "conv2d_input_grad"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Var>> {
        // inputs: (upstream gy, weight); output has the conv input's shape.
        let (gy, w) = (&ctx.inputs[0], &ctx.inputs[1]);
        vec![
            ctx.needs[0].then(|| ctx.grad.conv2d(w, self.pad)),
            ctx.needs[1].then(|| conv2d_weight_grad(ctx.grad, gy, w.shape()[2], self.pad)),
        ]
    }
}

struct ConvWeightGradFn {
    pad: usize,
}

impl Function for ConvWeightGradFn {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Var>> {
        // inputs: (x, gy); output has the weight's shape.
        let (x, gy) = (&ctx.inputs[0], &ctx.inputs[1]);
        vec![
            ctx.needs[0].then(|| conv2d_input_grad(gy, ctx.grad, x.shape(), self.pad)),
            ctx.needs[1].then(|| x.conv2d(ctx.grad, self.pad)),
        ]
    }
}

/// Gradient of `<gy, conv2d(x, w)>` with respect to `x`.
pub fn conv2d_input_grad(gy: &Var, w: &Var, input_shape: &[usize], pad: usize) -> Var {
    let geo = Geometry::from_input(input_shape, w.shape(), pad);
    assert_eq!(
        gy.shape(),
        &[geo.batch, geo.cout, geo.out_h(), geo.out_w()],
        "conv2d_input_grad upstream shape"
    );
    let v = conv_input_grad_kernel(gy.value(), w.value(), &geo);
    Var::from_op(v, vec![gy.clone(), w.clone()], Box::new(ConvInputGradFn { pad }))
}

/// Gradient of `<gy, conv2d(x, w)>` with respect to a `k x k` kernel `w`.
pub fn conv2d_weight_grad(x: &Var, gy: &Var, k: usize, pad: usize) -> Var {
    let xs = x.shape();
    let gs = gy.shape();
    let geo = Geometry::from_input(xs, &[gs[1], xs[1], k, k], pad);
    assert_eq!(
        gs,
        &[geo.batch, geo.cout, geo.out_h(), geo.out_w()],
        "conv2d_weight_grad upstream shape"
    );
    let v = conv_weight_grad_kernel(x.value(), gy.value(), &geo);
    Var::from_op(v, vec![x.clone(), gy.clone()], Box::new(ConvWeightGradFn { pad }))
}

struct AvgPoolFn;
impl Function for AvgPoolFn {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Var>> {
        vec![Some(ctx.grad.avg_pool2_adjoint())]
    }
}

struct AvgPoolAdjointFn;
impl Function for AvgPoolAdjointFn {
    fn name(&self) -> &'static str {
        "avg_pool2_adjoint"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Var>> {
        vec![Some(ctx.grad.avg_pool2())]
    }
}

impl Var {
    /// Stride-1 convolution of `(B,Ci,H,W)` with `(Co,Ci,k,k)` and zero padding `pad`.
    pub fn conv2d(&self, w: &Var, pad: usize) -> Var {
        let geo = Geometry::from_input(self.shape(), w.shape(), pad);
        let v = conv_forward(self.value(), w.value(), &geo);
        Var::from_op(v, vec![self.clone(), w.clone()], Box::new(ConvFn { pad }))
    }

    /// Non-overlapping 2x2 mean pooling; spatial sizes must be even.
    pub fn avg_pool2(&self) -> Var {
        let s = self.shape();
        assert!(
            s.len() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0,
            "avg_pool2 needs even (B,C,H,W), got {:?}",
            s
        );
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value().data();
        let mut out = vec![0.0; bc * oh * ow];
        for p in 0..bc {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let a = plane[2 * i * w + 2 * j];
                    let b = plane[2 * i * w + 2 * j + 1];
                    let c = plane[(2 * i + 1) * w + 2 * j];
                    let d = plane[(2 * i + 1) * w + 2 * j + 1];
                    out[p * oh * ow + i * ow + j] = 0.25 * (a + b + c + d);
                }
            }
        }
        let v = Tensor::new(&[s[0], s[1], oh, ow], out);
        Var::from_op(v, vec![self.clone()], Box::new(AvgPoolFn))
    }

    /// Adjoint of [`Var::avg_pool2`]: spread each value over its 2x2 cell, times 1/4.
    pub fn avg_pool2_adjoint(&self) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 4);
        let (bc, oh, ow) = (s[0] * s[1], s[2], s[3]);
        let (h, w) = (oh * 2, ow * 2);
        let src = self.value().data();
        let mut out = vec![0.0; bc * h * w];
        for p in 0..bc {
            for i in 0..h {
                for j in 0..w {
                    out[p * h * w + i * w + j] = 0.25 * src[p * oh * ow + (i / 2) * ow + j / 2];
                }
            }
        }
        let v = Tensor::new(&[s[0], s[1], h, w], out);
        Var::from_op(v, vec![self.clone()], Box::new(AvgPoolAdjointFn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
        let g = Geometry::from_input(x.shape(), w.shape(), pad);
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut out = Tensor::zeros(&[g.batch, g.cout, ho, wo]);
        for b in 0..g.batch {
            for co in 0..g.cout {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let ih = i as isize + ki as isize - pad as isize;
                                    let iw = j as isize + kj as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= g.h as isize || iw >= g.w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * g.cin + ci) * g.h + ih as usize) * g.w + iw as usize]
                                        * w.data()[((co * g.cin + ci) * g.k + ki) * g.k + kj];
                                }
                            }
                        }
                        out.data_mut()[((b * g.cout + co) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor::from_fn(&[2, 3, 5, 4], |i| ((i * 37) % 11) as f64 / 7.0 - 0.6);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13) % 7) as f64 / 5.0 - 0.5);
        for pad in [0, 1] {
            let got = Var::constant(x.clone()).conv2d(&Var::constant(w.clone()), pad);
            let want = naive_conv(&x, &w, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.value().data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_identities() {
        // <conv(x,w), gy> == <x, input_grad(gy,w)> == <w, weight_grad(x,gy)>
        let x = Var::constant(Tensor::from_fn(&[2, 2, 4, 4], |i| (i as f64 * 0.37).sin()));
        let w = Var::constant(Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.71).cos()));
        let y = x.conv2d(&w, 1);
        let gy = Var::constant(Tensor::from_fn(y.shape(), |i| (i as f64 * 0.13).sin()));
        let lhs: f64 = y.value().data().iter().zip(gy.value().data()).map(|(a, b)| a * b).sum();
        let gx = conv2d_input_grad(&gy, &w, x.shape(), 1);
        let gw = conv2d_weight_grad(&x, &gy, 3, 1);
        let via_x: f64 = x.value().data().iter().zip(gx.value().data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.value().data().iter().zip(gw.value().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn pool_adjoint_identity() {
        let x = Var::constant(Tensor::from_fn(&[1, 2, 4, 6], |i| (i as f64).sqrt()));
        let y = x.avg_pool2();
        let g = Var::constant(Tensor::from_fn(y.shape(), |i| i as f64 - 3.0));
        let lhs: f64 = y.value().data().iter().zip(g.value().data()).map(|(a, b)| a * b).sum();
        let adj = g.avg_pool2_adjoint();
        let rhs: f64 = x
            .value()
            .data()
            .iter()
            .zip(adj.value().data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
