//! Element-wise, shape, reduction and matrix ops on [`Var`].

use crate::tensor::Tensor;
use crate::var::{BackwardCtx, Function, Var};

macro_rules! unit_fn {
    ($name:ident, $label:literal, |$ctx:ident| $body:expr) => {
        struct $name;
        impl Function for $name {
            fn name(&self) -> &'static str {
                $label
            }
            fn backward(&self, $ctx: &BackwardCtx<'_>) -> Vec<Option<Var>> {
                $body
            }
        }
    };
}

fn reduce_grad(g: Var, shape: &[usize]) -> Var {
    if g.shape() == shape {
        g
    } else {
        g.sum_to(shape)
    }
}

unit_fn!(AddFn, "add", |ctx| {
    vec![
        ctx.needs[0].then(|| reduce_grad(ctx.grad.clone(), ctx.inputs[0].shape())),
        ctx.needs[1].then(|| reduce_grad(ctx.grad.clone(), ctx.inputs[1].shape())),
    ]
});

unit_fn!(SubFn, "sub", |ctx| {
    vec![
        ctx.needs[0].then(|| reduce_grad(ctx.grad.clone(), ctx.inputs[0].shape())),
        ctx.needs[1].then(|| reduce_grad(ctx.grad.neg(), ctx.inputs[1].shape())),
    ]
});

unit_fn!(MulFn, "mul", |ctx| {
    let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
    vec![
        ctx.needs[0].then(|| reduce_grad(ctx.grad.mul(b), a.shape())),
        ctx.needs[1].then(|| reduce_grad(ctx.grad.mul(a), b.shape())),
    ]
});

unit_fn!(DivFn, "div", |ctx| {
    let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
    vec![
        ctx.needs[0].then(|| reduce_grad(ctx.grad.div(b), a.shape())),
        ctx.needs[1].then(|| reduce_grad(ctx.grad.mul(ctx.output).div(b).neg(), b.shape())),
    ]
});

unit_fn!(NegFn, "neg", |ctx| vec![Some(ctx.grad.neg())]);

struct ScaleFn(f64);
impl Function for ScaleFn {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Var>> {
        vec![Some(ctx.grad.scale(self.0))]
    }
}

unit_fn!(AddScalarFn, "add_scalar", |ctx| vec![Some(ctx.grad.clone())]);

unit_fn!(ExpFn, "exp", |ctx| vec![Some(ctx.grad.mul(ctx.output))]);

unit_fn!(LogFn, "log", |ctx| vec![Some(ctx.grad.div(&ctx.inputs[0]))]);

unit_fn!(SqrtFn, "sqrt", |ctx| {
    vec![Some(ctx.grad.mul(&ctx.output.recip_safe()).scale(0.5))]
});

unit_fn!(RecipSafeFn, "recip_safe", |ctx| {
    vec![Some(ctx.grad.mul(ctx.output).mul(ctx.output).neg())]
});

unit_fn!(SquareFn, "square", |ctx| {
    vec![Some(ctx.grad.mul(&ctx.inputs[0]).scale(2.0))]
});

unit_fn!(ReluFn, "relu", |ctx| {
    let mask = ctx.inputs[0].value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    vec![Some(ctx.grad.mul(&Var::constant(mask)))]
});

unit_fn!(ReshapeFn, "reshape", |ctx| vec![Some(
    ctx.grad.reshape(ctx.inputs[0].shape())
)]);

unit_fn!(SumToFn, "sum_to", |ctx| vec![Some(
    ctx.grad.broadcast_to(ctx.inputs[0].shape())
)]);

unit_fn!(BroadcastToFn, "broadcast_to", |ctx| vec![Some(
    ctx.grad.sum_to(ctx.inputs[0].shape())
)]);

unit_fn!(MatMulFn, "matmul", |ctx| {
    let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
    vec![
        ctx.needs[0].then(|| ctx.grad.matmul(&b.transpose_last())),
        ctx.needs[1].then(|| a.transpose_last().matmul(ctx.grad)),
    ]
});

unit_fn!(TransposeLastFn, "transpose_last", |ctx| vec![Some(
    ctx.grad.transpose_last()
)]);

unit_fn!(DiagFn, "diag", |ctx| vec![Some(ctx.grad.diag_embed())]);

unit_fn!(DiagEmbedFn, "diag_embed", |ctx| vec![Some(ctx.grad.diag())]);

impl Var {
    fn unary(&self, value: Tensor, func: impl Function + 'static) -> Var {
        Var::from_op(value, vec![self.clone()], Box::new(func))
    }

    fn binary(&self, other: &Var, value: Tensor, func: impl Function + 'static) -> Var {
        Var::from_op(value, vec![self.clone(), other.clone()], Box::new(func))
    }

    pub fn add(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a + b);
        self.binary(other, v, AddFn)
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a - b);
        self.binary(other, v, SubFn)
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a * b);
        self.binary(other, v, MulFn)
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a / b);
        self.binary(other, v, DivFn)
    }

    pub fn neg(&self) -> Var {
        self.unary(self.value().map(|a| -a), NegFn)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(self.value().map(|a| a * c), ScaleFn(c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(self.value().map(|a| a + c), AddScalarFn)
    }

    pub fn exp(&self) -> Var {
        self.unary(self.value().map(f64::exp), ExpFn)
    }

    pub fn ln(&self) -> Var {
        self.unary(self.value().map(f64::ln), LogFn)
    }

    /// Square root whose derivative is taken as zero where the input is zero.
    pub fn sqrt(&self) -> Var {
        self.unary(self.value().map(f64::sqrt), SqrtFn)
    }

    /// `1/x`, with `0` where `x == 0`.
    pub fn recip_safe(&self) -> Var {
        let v = self.value().map(|a| if a == 0.0 { 0.0 } else { 1.0 / a });
        self.unary(v, RecipSafeFn)
    }

    pub fn square(&self) -> Var {
        self.unary(self.value().map(|a| a * a), SquareFn)
    }

    pub fn relu(&self) -> Var {
        self.unary(self.value().map(|a| a.max(0.0)), ReluFn)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if shape == self.shape() {
            return self.clone();
        }
        self.unary(self.value().reshape(shape), ReshapeFn)
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if shape == self.shape() {
            return self.clone();
        }
        self.unary(self.value().sum_to(shape), SumToFn)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if shape == self.shape() {
            return self.clone();
        }
        self.unary(self.value().broadcast_to(shape), BroadcastToFn)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 axes.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Var {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Var {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_keepdim(axes).scale(1.0 / count as f64)
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let v = self.value().matmul(other.value());
        self.binary(other, v, MatMulFn)
    }

    pub fn transpose_last(&self) -> Var {
        self.unary(self.value().transpose_last(), TransposeLastFn)
    }

    /// Diagonal of a batch of square matrices: `(B,D,D) -> (B,D)`.
    pub fn diag(&self) -> Var {
        let s = self.shape();
        assert!(s.len() == 3 && s[1] == s[2], "diag expects (B,D,D), got {:?}", s);
        let (b, d) = (s[0], s[1]);
        let src = self.value().data();
        let v = Tensor::from_fn(&[b, d], |i| {
            let (n, k) = (i / d, i % d);
            src[n * d * d + k * d + k]
        });
        self.unary(v, DiagFn)
    }

    /// Inverse of [`Var::diag`]: `(B,D) -> (B,D,D)` with zero off-diagonals.
    pub fn diag_embed(&self) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 2, "diag_embed expects (B,D), got {:?}", s);
        let (b, d) = (s[0], s[1]);
        let mut v = Tensor::zeros(&[b, d, d]);
        let src = self.value().data();
        let dst = v.data_mut();
        for n in 0..b {
            for k in 0..d {
                dst[n * d * d + k * d + k] = src[n * d + k];
            }
        }
        self.unary(v, DiagEmbedFn)
    }

    /// Row-wise log-softmax of a `(B,C)` tensor.
    pub fn log_softmax(&self) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 2, "log_softmax expects (B,C), got {:?}", s);
        let (b, c) = (s[0], s[1]);
        let data = self.value().data();
        let row_max = Tensor::from_fn(&[b, 1], |i| {
            data[i * c..(i + 1) * c]
                .iter()
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        });
        let shifted = self.sub(&Var::constant(row_max));
        let lse = shifted.exp().sum_to(&[b, 1]).ln();
        shifted.sub(&lse)
    }

    pub fn softmax(&self) -> Var {
        self.log_softmax().exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::var::grad;

    #[test]
    fn log_softmax_rows_normalize() {
        let x = Var::constant(Tensor::new(&[2, 3], vec![1., 2., 3., -1., 0., 1000.]));
        let p = x.softmax();
        let rows = p.value().sum_to(&[2, 1]);
        for r in rows.data() {
            assert!((r - 1.0).abs() < 1e-12);
        }
        assert!(p.value().all_finite());
    }

    #[test]
    fn product_rule_and_broadcast_grad() {
        let a = Var::parameter(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]));
        let b = Var::parameter(Tensor::new(&[1, 2], vec![10., 20.]));
        let y = a.mul(&b).sum();
        let g = grad(&y, &[&a, &b], false);
        assert_eq!(g[0].as_ref().unwrap().value().data(), &[10., 20., 10., 20.]);
        assert_eq!(g[1].as_ref().unwrap().value().data(), &[4., 6.]);
    }

    #[test]
    fn second_derivative_of_cube() {
        let x = Var::parameter(Tensor::scalar(1.5));
        let y = x.square().mul(&x);
        let dy = grad(&y, &[&x], true)[0].clone().unwrap();
        assert!((dy.item() - 3.0 * 1.5 * 1.5).abs() < 1e-12);
        let d2y = grad(&dy, &[&x], false)[0].clone().unwrap();
        assert!((d2y.item() - 6.0 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn sqrt_of_zero_has_zero_gradient() {
        let x = Var::parameter(Tensor::new(&[2], vec![0.0, 4.0]));
        let y = x.sqrt().sum();
        let g = grad(&y, &[&x], false)[0].clone().unwrap();
        assert_eq!(g.value().data(), &[0.0, 0.25]);
    }

    #[test]
    fn unrelated_input_has_no_gradient() {
        let x = Var::parameter(Tensor::scalar(2.0));
        let z = Var::parameter(Tensor::scalar(3.0));
        let y = x.exp();
        let g = grad(&y, &[&x, &z], false);
        assert!(g[0].is_some());
        assert!(g[1].is_none());
    }
}
