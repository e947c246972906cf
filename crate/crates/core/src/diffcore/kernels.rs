//! Forward evaluation of each recorded op into a reusable output buffer.

use super::graph::{MaskKind, Op, Target};
use super::Tensor;

type KResult = Result<(), String>;

fn get(vals: &[Option<Tensor>], i: usize) -> &Tensor {
    vals[i]
        .as_ref()
        .expect("dependency evaluated before its consumer")
}

/// Resizes `out` to `shape` and hands back its buffer.
fn prepare<'a>(out: &'a mut Tensor, shape: &[usize]) -> &'a mut [f64] {
    let n: usize = shape.iter().product();
    if out.shape() != shape {
        let mut data = std::mem::replace(out, Tensor::placeholder()).into_data();
        data.resize(n, 0.0);
        out.set_shape_and_data(shape, data);
    }
    out.data_mut()
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn unary(a: &Tensor, out: &mut Tensor, f: impl Fn(f64) -> f64) -> KResult {
    let dst = prepare(out, a.shape());
    for (d, &x) in dst.iter_mut().zip(a.data()) {
        *d = f(x);
    }
    Ok(())
}

fn binary(a: &Tensor, b: &Tensor, out: &mut Tensor, f: impl Fn(f64, f64) -> f64) -> KResult {
    if a.shape() == b.shape() {
        let dst = prepare(out, a.shape());
        for ((d, &x), &y) in dst.iter_mut().zip(a.data()).zip(b.data()) {
            *d = f(x, y);
        }
    } else if is_suffix(b.shape(), a.shape()) {
        let m = b.numel().max(1);
        let dst = prepare(out, a.shape());
        for (dc, ac) in dst.chunks_mut(m).zip(a.data().chunks(m)) {
            for ((d, &x), &y) in dc.iter_mut().zip(ac).zip(b.data()) {
                *d = f(x, y);
            }
        }
    } else if is_suffix(a.shape(), b.shape()) {
        let m = a.numel().max(1);
        let dst = prepare(out, b.shape());
        for (dc, bc) in dst.chunks_mut(m).zip(b.data().chunks(m)) {
            for ((d, &y), &x) in dc.iter_mut().zip(bc).zip(a.data()) {
                *d = f(x, y);
            }
        }
    } else {
        return Err(format!(
            "cannot broadcast shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul(a: &Tensor, b: &Tensor, out: &mut Tensor) -> KResult {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(format!(
            "matmul needs [n,k] x [k,m], got {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let dst = prepare(out, &[n, m]);
    if n == 0 || m == 0 {
        return Ok(());
    }
    if k == 0 {
        dst.fill(0.0);
        return Ok(());
    }
    // SAFETY: all three buffers are contiguous row-major with the extents
    // checked above, and `dst` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            m as isize,
            1,
            0.0,
            dst.as_mut_ptr(),
            m as isize,
            1,
        );
    }
    Ok(())
}

pub(crate) fn eval_op(op: &Op, vals: &[Option<Tensor>], out: &mut Tensor) -> KResult {
    match *op {
        Op::Input(_) | Op::Param(_) | Op::Const => unreachable!("leaves are bound, not evaluated"),
        Op::OnesLike(a) => {
            prepare(out, get(vals, a).shape()).fill(1.0);
            Ok(())
        }
        Op::ZerosLike(a) => {
            prepare(out, get(vals, a).shape()).fill(0.0);
            Ok(())
        }
        Op::MatMul(a, b) => matmul(get(vals, a), get(vals, b), out),
        Op::Transpose(a) => {
            let a = get(vals, a);
            if a.shape().len() != 2 {
                return Err(format!("transpose needs a 2-D tensor, got {:?}", a.shape()));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let src = a.data();
            let dst = prepare(out, &[c, r]);
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
            Ok(())
        }
        Op::Add(a, b) => binary(get(vals, a), get(vals, b), out, |x, y| x + y),
        Op::Sub(a, b) => binary(get(vals, a), get(vals, b), out, |x, y| x - y),
        Op::Mul(a, b) => binary(get(vals, a), get(vals, b), out, |x, y| x * y),
        Op::Div(a, b) => binary(get(vals, a), get(vals, b), out, |x, y| x / y),
        Op::Neg(a) => unary(get(vals, a), out, |x| -x),
        Op::Scale(a, c) => unary(get(vals, a), out, |x| x * c),
        Op::AddScalar(a, c) => unary(get(vals, a), out, |x| x + c),
        Op::Exp(a) => unary(get(vals, a), out, f64::exp),
        Op::Log(a) => unary(get(vals, a), out, f64::ln),
        Op::Square(a) => unary(get(vals, a), out, |x| x * x),
        Op::Sqrt(a) => unary(get(vals, a), out, f64::sqrt),
        Op::Softplus(a) => unary(get(vals, a), out, softplus),
        Op::Sigmoid(a) => unary(get(vals, a), out, sigmoid),
        Op::Elu(a) => unary(get(vals, a), out, |x| if x > 0.0 { x } else { x.exp_m1() }),
        Op::EluDeriv(a) => unary(get(vals, a), out, |x| x.min(0.0).exp()),
        Op::Relu(a) => unary(get(vals, a), out, |x| x.max(0.0)),
        Op::Clamp(a, lo, hi) => unary(get(vals, a), out, |x| x.clamp(lo, hi)),
        Op::Mask(a, kind) => unary(get(vals, a), out, |x| {
            let on = match kind {
                MaskKind::Positive => x > 0.0,
                MaskKind::Negative => x < 0.0,
                MaskKind::Inside(lo, hi) => x > lo && x < hi,
            };
            if on {
                1.0
            } else {
                0.0
            }
        }),
        Op::MaxAll(a) => {
            let a = get(vals, a);
            if a.numel() == 0 {
                return Err("max of an empty tensor".into());
            }
            let m = a.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prepare(out, &[])[0] = m;
            Ok(())
        }
        Op::StopGrad(a) => unary(get(vals, a), out, |x| x),
        Op::Reduce { src, target, mean } => {
            let s = get(vals, src);
            match target {
                Target::Scalar => {
                    let mut acc: f64 = s.data().iter().sum();
                    if mean {
                        if s.numel() == 0 {
                            return Err("mean of an empty tensor".into());
                        }
                        acc /= s.numel() as f64;
                    }
                    prepare(out, &[])[0] = acc;
                }
                Target::Like(l) => {
                    let shape = get(vals, l).shape().to_vec();
                    if !is_suffix(&shape, s.shape()) {
                        return Err(format!(
                            "cannot reduce {:?} to {:?}",
                            s.shape(),
                            shape
                        ));
                    }
                    let m: usize = shape.iter().product::<usize>().max(1);
                    let dst = prepare(out, &shape);
                    dst.copy_from_slice(&s.data()[..m.min(s.numel())]);
                    for chunk in s.data().chunks(m).skip(1) {
                        for (d, &x) in dst.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    if mean && s.numel() > 0 {
                        let f = m as f64 / s.numel() as f64;
                        dst.iter_mut().for_each(|d| *d *= f);
                    }
                }
            }
            Ok(())
        }
        Op::Expand { src, like, mean } => {
            let s = get(vals, src);
            let shape = get(vals, like).shape().to_vec();
            if !is_suffix(s.shape(), &shape) {
                return Err(format!("cannot expand {:?} to {:?}", s.shape(), shape));
            }
            let m = s.numel().max(1);
            let total: usize = shape.iter().product();
            let f = if mean && total > 0 {
                m as f64 / total as f64
            } else {
                1.0
            };
            let dst = prepare(out, &shape);
            for chunk in dst.chunks_mut(m) {
                for (d, &x) in chunk.iter_mut().zip(s.data()) {
                    *d = x * f;
                }
            }
            Ok(())
        }
        Op::SumLast(a) => {
            let a = get(vals, a);
            let Some((&m, lead)) = a.shape().split_last() else {
                return Err("sum_last of a scalar".into());
            };
            let lead = lead.to_vec();
            let dst = prepare(out, &lead);
            if m == 0 {
                dst.fill(0.0);
            } else {
                for (d, row) in dst.iter_mut().zip(a.data().chunks(m)) {
                    *d = row.iter().sum();
                }
            }
            Ok(())
        }
        Op::ExpandLast { src, like } => {
            let s = get(vals, src);
            let shape = get(vals, like).shape().to_vec();
            let Some((&m, lead)) = shape.split_last() else {
                return Err("expand_last into a scalar".into());
            };
            if lead != s.shape() {
                return Err(format!(
                    "expand_last: {:?} does not match leading axes of {:?}",
                    s.shape(),
                    shape
                ));
            }
            let dst = prepare(out, &shape);
            if m > 0 {
                for (row, &x) in dst.chunks_mut(m).zip(s.data()) {
                    row.fill(x);
                }
            }
            Ok(())
        }
        Op::Unsqueeze(a) => {
            let a = get(vals, a);
            let mut shape = a.shape().to_vec();
            shape.push(1);
            prepare(out, &shape).copy_from_slice(a.data());
            Ok(())
        }
        Op::SqueezeLast(a) => {
            let a = get(vals, a);
            match a.shape().split_last() {
                Some((1, lead)) => {
                    let lead = lead.to_vec();
                    prepare(out, &lead).copy_from_slice(a.data());
                    Ok(())
                }
                _ => Err(format!("squeeze_last needs a trailing unit axis, got {:?}", a.shape())),
            }
        }
    }
}
