//! Primitive tensor operations with their backward rules.
//!
//! Every operation validates shapes (naming the op and both shapes on
//! mismatch) and rejects non-finite inputs. Binary elementwise ops
//! broadcast the right operand against the left, numpy-style, restricted
//! to `rhs` rank <= `lhs` rank with right-aligned dims equal or 1.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::linalg;
use crate::tensor::{GradSink, OpNode, Tape, Tensor};

fn check_finite(op: &'static str, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn check_same_tape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.tape.same_tape(&b.tape) {
        Ok(())
    } else {
        Err(Error::shape(op, "inputs live on different tapes"))
    }
}

fn output(
    tape: &Tape,
    vals: Vec<f64>,
    shape: Vec<usize>,
    requires: bool,
    backward: impl FnOnce() -> super::BackwardFn,
) -> Tensor {
    let tracked = tape.grad_enabled() && requires;
    let node = if tracked {
        Some(OpNode {
            backward: backward(),
        })
    } else {
        None
    };
    tape.push(vals, shape, tracked, node)
}

// ---------------------------------------------------------------------------
// broadcasting

#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// rhs is a flat suffix of lhs; field is rhs length.
    Suffix(usize),
    /// per-lhs-dim rhs strides (0 where broadcast).
    Strided(Vec<usize>),
}

fn broadcast_plan(op: &'static str, ls: &[usize], rs: &[usize]) -> Result<Bcast> {
    if ls == rs {
        return Ok(Bcast::Same);
    }
    if rs.len() > ls.len() {
        return Err(Error::shape(
            op,
            format!("rhs {rs:?} has higher rank than lhs {ls:?}"),
        ));
    }
    let off = ls.len() - rs.len();
    let mut suffix = true;
    for (i, &rd) in rs.iter().enumerate() {
        let ld = ls[off + i];
        if rd != ld {
            suffix = false;
            if rd != 1 {
                return Err(Error::shape(op, format!("{ls:?} vs {rs:?}")));
            }
        }
    }
    if suffix {
        return Ok(Bcast::Suffix(rs.iter().product()));
    }
    let mut rstrides = vec![0usize; ls.len()];
    let mut stride = 1;
    for i in (0..rs.len()).rev() {
        rstrides[off + i] = if rs[i] == ls[off + i] { stride } else { 0 };
        stride *= rs[i];
    }
    Ok(Bcast::Strided(rstrides))
}

/// Calls `f(lhs_index, rhs_index)` for every element of the lhs.
fn for_each_pair(ls: &[usize], plan: &Bcast, mut f: impl FnMut(usize, usize)) {
    let n: usize = ls.iter().product();
    match plan {
        Bcast::Same => {
            for i in 0..n {
                f(i, i);
            }
        }
        Bcast::Suffix(rlen) => {
            let mut ri = 0;
            for i in 0..n {
                f(i, ri);
                ri += 1;
                if ri == *rlen {
                    ri = 0;
                }
            }
        }
        Bcast::Strided(rstrides) => {
            let rank = ls.len();
            let mut idx = vec![0usize; rank];
            let mut ri = 0usize;
            for i in 0..n {
                f(i, ri);
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    ri += rstrides[d];
                    if idx[d] < ls[d] {
                        break;
                    }
                    idx[d] = 0;
                    ri -= rstrides[d] * ls[d];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn binary_op(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
    // partial derivatives as (lhs value, rhs value, out value) -> d
    dfl: fn(f64, f64, f64) -> f64,
    dfr: fn(f64, f64, f64) -> f64,
) -> Result<Tensor> {
    check_same_tape(op, a, b)?;
    let av = a.data();
    let bv = b.data();
    check_finite(op, &av)?;
    check_finite(op, &bv)?;
    let plan = broadcast_plan(op, &a.shape, &b.shape)?;
    let mut out = vec![0.0; a.numel()];
    for_each_pair(&a.shape, &plan, |li, ri| out[li] = f(av[li], bv[ri]));
    let requires = a.requires_grad() || b.requires_grad();
    let out_rc = Rc::new(out);
    let out_for_node = out_rc.clone();
    let (aid, bid) = (a.id, b.id);
    let (alen, blen) = (a.numel(), b.numel());
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    let lshape = a.shape.clone();
    let tensor = {
        let tracked = a.tape.grad_enabled() && requires;
        let node = if tracked {
            Some(OpNode {
                backward: Box::new(move |dy: &[f64], sink: &mut GradSink| {
                    if need_a {
                        let ga = sink.accum(aid, alen);
                        for_each_pair(&lshape, &plan, |li, ri| {
                            ga[li] += dy[li] * dfl(av[li], bv[ri], out_for_node[li]);
                        });
                    }
                    if need_b {
                        let gb = sink.accum(bid, blen);
                        for_each_pair(&lshape, &plan, |li, ri| {
                            gb[ri] += dy[li] * dfr(av[li], bv[ri], out_for_node[li]);
                        });
                    }
                }),
            })
        } else {
            None
        };
        a.tape
            .push_shared(out_rc, a.shape.clone(), tracked, node)
    };
    Ok(tensor)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_op("add", a, b, |x, y| x + y, |_, _, _| 1.0, |_, _, _| 1.0)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_op("sub", a, b, |x, y| x - y, |_, _, _| 1.0, |_, _, _| -1.0)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_op("mul", a, b, |x, y| x * y, |_, y, _| y, |x, _, _| x)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = binary_op(
        "div",
        a,
        b,
        |x, y| x / y,
        |_, y, _| 1.0 / y,
        |_, y, o| -o / y,
    )?;
    if !out.data().iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("div: non-finite result".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// unary elementwise

fn unary_op(
    op: &'static str,
    x: &Tensor,
    f: fn(f64) -> f64,
    // derivative as (input value, output value) -> d
    df: fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let xv = x.data();
    check_finite(op, &xv)?;
    let out: Vec<f64> = xv.iter().map(|&v| f(v)).collect();
    let out_rc = Rc::new(out);
    let out_for_node = out_rc.clone();
    let (xid, xlen) = (x.id, x.numel());
    let tracked = x.tape.grad_enabled() && x.requires_grad();
    let node = if tracked {
        Some(OpNode {
            backward: Box::new(move |dy: &[f64], sink: &mut GradSink| {
                let gx = sink.accum(xid, xlen);
                for i in 0..xlen {
                    gx[i] += dy[i] * df(xv[i], out_for_node[i]);
                }
            }),
        })
    } else {
        None
    };
    Ok(x.tape.push_shared(out_rc, x.shape.clone(), tracked, node))
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    unary_op(
        "sigmoid",
        x,
        |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        },
        |_, o| o * (1.0 - o),
    )
}

pub fn tanh(x: &Tensor) -> Result<Tensor> {
    unary_op("tanh", x, f64::tanh, |_, o| 1.0 - o * o)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    unary_op(
        "relu",
        x,
        |v| if v > 0.0 { v } else { 0.0 },
        |v, _| if v > 0.0 { 1.0 } else { 0.0 },
    )
}

pub fn exp(x: &Tensor) -> Result<Tensor> {
    unary_op("exp", x, f64::exp, |_, o| o)
}

pub fn sqrt(x: &Tensor) -> Result<Tensor> {
    if x.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Numeric("sqrt: negative input".into()));
    }
    unary_op("sqrt", x, f64::sqrt, |_, o| 0.5 / o)
}

pub fn abs(x: &Tensor) -> Result<Tensor> {
    unary_op("abs", x, f64::abs, |v, _| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Elementwise `max(x, c)`; gradient passes where `x > c`.
pub fn maximum_scalar(x: &Tensor, c: f64) -> Result<Tensor> {
    let xv = x.data();
    check_finite("maximum", &xv)?;
    let out: Vec<f64> = xv.iter().map(|&v| v.max(c)).collect();
    let (xid, xlen) = (x.id, x.numel());
    let requires = x.requires_grad();
    Ok(output(&x.tape, out, x.shape.clone(), requires, move || {
        Box::new(move |dy, sink| {
            let gx = sink.accum(xid, xlen);
            for i in 0..xlen {
                if xv[i] > c {
                    gx[i] += dy[i];
                }
            }
        })
    }))
}

/// `y = scale * x + shift` elementwise with scalar coefficients.
pub fn affine(x: &Tensor, scale: f64, shift: f64) -> Result<Tensor> {
    let xv = x.data();
    check_finite("affine", &xv)?;
    let out: Vec<f64> = xv.iter().map(|&v| scale * v + shift).collect();
    let (xid, xlen) = (x.id, x.numel());
    let requires = x.requires_grad();
    Ok(output(&x.tape, out, x.shape.clone(), requires, move || {
        Box::new(move |dy, sink| {
            let gx = sink.accum(xid, xlen);
            for i in 0..xlen {
                gx[i] += dy[i] * scale;
            }
        })
    }))
}

// ---------------------------------------------------------------------------
// structural

/// Concatenation along `axis`.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat", "no inputs"));
    }
    let first = parts[0];
    let rank = first.shape.len();
    if axis >= rank {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    let mut axis_total = 0;
    for p in parts {
        check_same_tape("concat", first, p)?;
        check_finite("concat", &p.data())?;
        if p.shape.len() != rank
            || p.shape[..axis] != first.shape[..axis]
            || p.shape[axis + 1..] != first.shape[axis + 1..]
        {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} on axis {}", first.shape, p.shape, axis),
            ));
        }
        axis_total += p.shape[axis];
    }
    let mut shape = first.shape.clone();
    shape[axis] = axis_total;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * axis_total * inner];
    let datas: Vec<Rc<Vec<f64>>> = parts.iter().map(|p| p.data()).collect();
    let axis_lens: Vec<usize> = parts.iter().map(|p| p.shape[axis]).collect();
    for o in 0..outer {
        let mut dst = o * axis_total * inner;
        for (d, alen) in datas.iter().zip(&axis_lens) {
            let src = o * alen * inner;
            out[dst..dst + alen * inner].copy_from_slice(&d[src..src + alen * inner]);
            dst += alen * inner;
        }
    }
    let metas: Vec<(usize, usize, bool)> = parts
        .iter()
        .map(|p| (p.id, p.numel(), p.requires_grad()))
        .collect();
    let requires = metas.iter().any(|&(_, _, r)| r);
    Ok(output(&first.tape, out, shape, requires, move || {
        Box::new(move |dy, sink| {
            for o in 0..outer {
                let mut src = o * axis_total * inner;
                for (&(id, len, need), &alen) in metas.iter().zip(&axis_lens) {
                    if need {
                        let g = sink.accum(id, len);
                        let dst = o * alen * inner;
                        for (gd, d) in g[dst..dst + alen * inner]
                            .iter_mut()
                            .zip(&dy[src..src + alen * inner])
                        {
                            *gd += d;
                        }
                    }
                    src += alen * inner;
                }
            }
        })
    }))
}

/// `x[.., start..end, ..]` along `axis`.
pub fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    let rank = x.shape.len();
    if axis >= rank || start >= end || end > x.shape[axis] {
        return Err(Error::shape(
            "slice",
            format!(
                "range {start}..{end} on axis {axis} of {:?}",
                x.shape
            ),
        ));
    }
    let xv = x.data();
    check_finite("slice", &xv)?;
    let alen = x.shape[axis];
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let slen = end - start;
    let mut shape = x.shape.clone();
    shape[axis] = slen;
    let mut out = vec![0.0; outer * slen * inner];
    for o in 0..outer {
        let src = (o * alen + start) * inner;
        let dst = o * slen * inner;
        out[dst..dst + slen * inner].copy_from_slice(&xv[src..src + slen * inner]);
    }
    let (xid, xlen) = (x.id, x.numel());
    let requires = x.requires_grad();
    Ok(output(&x.tape, out, shape, requires, move || {
        Box::new(move |dy, sink| {
            let gx = sink.accum(xid, xlen);
            for o in 0..outer {
                let dst = (o * alen + start) * inner;
                let src = o * slen * inner;
                for (gd, d) in gx[dst..dst + slen * inner]
                    .iter_mut()
                    .zip(&dy[src..src + slen * inner])
                {
                    *gd += d;
                }
            }
        })
    }))
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn permute_copy(vals: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = vals[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += perm_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= perm_strides[d] * out_shape[d];
        }
    }
    (out, out_shape)
}

/// Axis permutation (generalized transpose).
pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape(
            "permute",
            format!("{perm:?} is not a permutation of rank {rank}"),
        ));
    }
    let xv = x.data();
    check_finite("permute", &xv)?;
    let (out, out_shape) = permute_copy(&xv, &x.shape, perm);
    let mut inverse = vec![0usize; rank];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let (xid, xlen) = (x.id, x.numel());
    let requires = x.requires_grad();
    let out_shape_back = out_shape.clone();
    Ok(output(&x.tape, out, out_shape, requires, move || {
        Box::new(move |dy, sink| {
            let (gperm, _) = permute_copy(dy, &out_shape_back, &inverse);
            let gx = sink.accum(xid, xlen);
            for (g, d) in gx.iter_mut().zip(&gperm) {
                *g += d;
            }
        })
    }))
}

/// Swap the last two axes.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let rank = x.shape.len();
    if rank < 2 {
        return Err(Error::shape("transpose", format!("rank {rank} < 2")));
    }
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 2, rank - 1);
    permute(x, &perm)
}

/// Zero-copy reshape (row-major layout is unchanged).
pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(
            "reshape",
            format!("{:?} -> {:?}", x.shape, shape),
        ));
    }
    let (xid, xlen) = (x.id, x.numel());
    let requires = x.requires_grad();
    let tracked = x.tape.grad_enabled() && requires;
    let node = if tracked {
        Some(OpNode {
            backward: Box::new(move |dy: &[f64], sink: &mut GradSink| {
                let gx = sink.accum(xid, xlen);
                for (g, d) in gx.iter_mut().zip(dy) {
                    *g += d;
                }
            }),
        })
    } else {
        None
    };
    Ok(x.tape.push_shared(x.data(), shape.to_vec(), tracked, node))
}

/// Stack equal-shape tensors along a fresh leading `axis`.
pub fn stack(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("stack", "no inputs"));
    }
    let mut shape = parts[0].shape.clone();
    if axis > shape.len() {
        return Err(Error::shape("stack", format!("axis {axis} out of range")));
    }
    shape.insert(axis, 1);
    let reshaped: Vec<Tensor> = parts
        .iter()
        .map(|p| reshape(p, &shape))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = reshaped.iter().collect();
    concat(&refs, axis)
}

// ---------------------------------------------------------------------------
// reductions

/// Sum along `axis`, optionally keeping it as a 1-sized dim.
pub fn sum_axis(x: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor> {
    let rank = x.shape.len();
    if axis >= rank {
        return Err(Error::shape(
            "sum",
            format!("axis {axis} out of range for {:?}", x.shape),
        ));
    }
    let xv = x.data();
    check_finite("sum", &xv)?;
    let alen = x.shape[axis];
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..alen {
            let base = (o * alen + j) * inner;
            for i in 0..inner {
                out[o * inner + i] += xv[base + i];
            }
        }
    }
    let mut shape: Vec<usize> = x.shape.clone();
    if keepdim {
        shape[axis] = 1;
    } else if rank == 1 {
        shape = vec![1];
    } else {
        shape.remove(axis);
    }
    let (xid, xlen) = (x.id, x.numel());
    let requires = x.requires_grad();
    Ok(output(&x.tape, out, shape, requires, move || {
        Box::new(move |dy, sink| {
            let gx = sink.accum(xid, xlen);
            for o in 0..outer {
                for j in 0..alen {
                    let base = (o * alen + j) * inner;
                    for i in 0..inner {
                        gx[base + i] += dy[o * inner + i];
                    }
                }
            }
        })
    }))
}

pub fn mean_axis(x: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor> {
    let n = x.shape.get(axis).copied().unwrap_or(0).max(1) as f64;
    let s = sum_axis(x, axis, keepdim)?;
    affine(&s, 1.0 / n, 0.0)
}

/// Sum of all elements; result has shape `[1]`.
pub fn sum_all(x: &Tensor) -> Result<Tensor> {
    let xv = x.data();
    check_finite("sum", &xv)?;
    let total: f64 = xv.iter().sum();
    let (xid, xlen) = (x.id, x.numel());
    let requires = x.requires_grad();
    Ok(output(&x.tape, vec![total], vec![1], requires, move || {
        Box::new(move |dy, sink| {
            let gx = sink.accum(xid, xlen);
            for g in gx.iter_mut() {
                *g += dy[0];
            }
        })
    }))
}

pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    let n = x.numel() as f64;
    let s = sum_all(x)?;
    affine(&s, 1.0 / n, 0.0)
}

// ---------------------------------------------------------------------------
// softmax / layer norm / dropout

/// Numerically stable softmax along `axis` (max-subtracted); every lane
/// sums to 1.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let rank = x.shape.len();
    if axis >= rank {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for {:?}", x.shape),
        ));
    }
    let xv = x.data();
    check_finite("softmax", &xv)?;
    let alen = x.shape[axis];
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = vec![0.0; xv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * alen + j) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..alen {
                m = m.max(xv[at(j)]);
            }
            let mut z = 0.0;
            for j in 0..alen {
                let e = (xv[at(j)] - m).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..alen {
                out[at(j)] /= z;
            }
        }
    }
    let out_rc = Rc::new(out);
    let y = out_rc.clone();
    let (xid, xlen) = (x.id, x.numel());
    let tracked = x.tape.grad_enabled() && x.requires_grad();
    let node = if tracked {
        Some(OpNode {
            backward: Box::new(move |dy: &[f64], sink: &mut GradSink| {
                let gx = sink.accum(xid, xlen);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * alen + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..alen {
                            dot += dy[at(j)] * y[at(j)];
                        }
                        for j in 0..alen {
                            gx[at(j)] += y[at(j)] * (dy[at(j)] - dot);
                        }
                    }
                }
            }),
        })
    } else {
        None
    };
    Ok(x.tape.push_shared(out_rc, x.shape.clone(), tracked, node))
}

/// Layer normalization over the last axis with learnable scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    check_same_tape("layer_norm", x, gamma)?;
    check_same_tape("layer_norm", x, beta)?;
    let rank = x.shape.len();
    if rank == 0 {
        return Err(Error::shape("layer_norm", "rank 0 input"));
    }
    let d = x.shape[rank - 1];
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} must be [{}] for input {:?}",
                gamma.shape(),
                beta.shape(),
                d,
                x.shape
            ),
        ));
    }
    let xv = x.data();
    let gv = gamma.data();
    let bv = beta.data();
    check_finite("layer_norm", &xv)?;
    check_finite("layer_norm", &gv)?;
    check_finite("layer_norm", &bv)?;
    let rows = x.numel() / d;
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &xv[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            xhat[r * d + j] = xh;
            out[r * d + j] = gv[j] * xh + bv[j];
        }
    }
    let xhat = Rc::new(xhat);
    let inv_std = Rc::new(inv_std);
    let (xid, xlen) = (x.id, x.numel());
    let (gid, bid) = (gamma.id, beta.id);
    let (need_x, need_g, need_b) = (
        x.requires_grad(),
        gamma.requires_grad(),
        beta.requires_grad(),
    );
    let requires = need_x || need_g || need_b;
    Ok(output(&x.tape, out, x.shape.clone(), requires, move || {
        Box::new(move |dy, sink| {
            if need_g {
                let gg = sink.accum(gid, d);
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += dy[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if need_b {
                let gb = sink.accum(bid, d);
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += dy[r * d + j];
                    }
                }
            }
            if need_x {
                let gx = sink.accum(xid, xlen);
                for r in 0..rows {
                    let mut mean_gdy = 0.0;
                    let mut mean_gdy_xhat = 0.0;
                    for j in 0..d {
                        let gdy = gv[j] * dy[r * d + j];
                        mean_gdy += gdy;
                        mean_gdy_xhat += gdy * xhat[r * d + j];
                    }
                    mean_gdy /= d as f64;
                    mean_gdy_xhat /= d as f64;
                    for j in 0..d {
                        let gdy = gv[j] * dy[r * d + j];
                        gx[r * d + j] +=
                            inv_std[r] * (gdy - mean_gdy - xhat[r * d + j] * mean_gdy_xhat);
                    }
                }
            }
        })
    }))
}

/// Inverted dropout. Identity when `train` is false or `rate` is 0.
pub fn dropout(x: &Tensor, rate: f64, train: bool, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} not in [0,1)")));
    }
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let xv = x.data();
    check_finite("dropout", &xv)?;
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let out: Vec<f64> = xv.iter().zip(&mask).map(|(v, m)| v * m).collect();
    let mask = Rc::new(mask);
    let (xid, xlen) = (x.id, x.numel());
    let requires = x.requires_grad();
    Ok(output(&x.tape, out, x.shape.clone(), requires, move || {
        Box::new(move |dy, sink| {
            let gx = sink.accum(xid, xlen);
            for i in 0..xlen {
                gx[i] += dy[i] * mask[i];
            }
        })
    }))
}

// ---------------------------------------------------------------------------
// matmul

/// Batched matrix product over the last two axes.
///
/// Rank-2 operands broadcast across the other side's leading dims;
/// otherwise the leading dims must match exactly.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_tape("matmul", a, b)?;
    let (ar, br) = (a.shape.len(), b.shape.len());
    if ar < 2 || br < 2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?} (need rank >= 2)", a.shape, b.shape),
        ));
    }
    let (m, k) = (a.shape[ar - 2], a.shape[ar - 1]);
    let (k2, n) = (b.shape[br - 2], b.shape[br - 1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let a_lead = &a.shape[..ar - 2];
    let b_lead = &b.shape[..br - 2];
    let (lead, a_batched, b_batched): (Vec<usize>, bool, bool) =
        match (a_lead.is_empty(), b_lead.is_empty()) {
            (true, true) => (vec![], false, false),
            (true, false) => (b_lead.to_vec(), false, true),
            (false, true) => (a_lead.to_vec(), true, false),
            (false, false) => {
                if a_lead != b_lead {
                    return Err(Error::shape(
                        "matmul",
                        format!("batch dims differ: {:?} x {:?}", a.shape, b.shape),
                    ));
                }
                (a_lead.to_vec(), true, true)
            }
        };
    let batch: usize = lead.iter().product::<usize>().max(1);
    let av = a.data();
    let bv = b.data();
    check_finite("matmul", &av)?;
    check_finite("matmul", &bv)?;
    let mut out = vec![0.0; batch * m * n];
    for t in 0..batch {
        let ao = if a_batched { t * m * k } else { 0 };
        let bo = if b_batched { t * k * n } else { 0 };
        linalg::matmul_nn(
            &av[ao..ao + m * k],
            &bv[bo..bo + k * n],
            &mut out[t * m * n..(t + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let mut shape = lead;
    shape.push(m);
    shape.push(n);
    let (aid, bid) = (a.id, b.id);
    let (alen, blen) = (a.numel(), b.numel());
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    let requires = need_a || need_b;
    Ok(output(&a.tape, out, shape, requires, move || {
        Box::new(move |dy, sink| {
            if need_a {
                let ga = sink.accum(aid, alen);
                for t in 0..batch {
                    let ao = if a_batched { t * m * k } else { 0 };
                    let bo = if b_batched { t * k * n } else { 0 };
                    // dA = dY * B^T
                    linalg::matmul_nt(
                        &dy[t * m * n..(t + 1) * m * n],
                        &bv[bo..bo + k * n],
                        &mut ga[ao..ao + m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if need_b {
                let gb = sink.accum(bid, blen);
                for t in 0..batch {
                    let ao = if a_batched { t * m * k } else { 0 };
                    let bo = if b_batched { t * k * n } else { 0 };
                    // dB = A^T * dY
                    linalg::matmul_tn(
                        &av[ao..ao + m * k],
                        &dy[t * m * n..(t + 1) * m * n],
                        &mut gb[bo..bo + k * n],
                        k,
                        m,
                        n,
                    );
                }
            }
        })
    }))
}

// ---------------------------------------------------------------------------
// graph convolution

/// Fused multi-support graph convolution:
/// `out[b] = sum_s supports[s] * x[b] * w[s] + bias`
/// with `x: [B,N,F]`, `supports: [S,N,N]`, `w: [S*F,H]`, `bias: [H]`.
///
/// The per-support projections `supports[s] * x[b]` are recomputed during
/// the backward pass instead of being stored, which keeps the live memory
/// of a stacked recurrent cell proportional to `B*N*F` rather than
/// `B*N*S*F`.
pub fn graph_conv(x: &Tensor, supports: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_same_tape("graph_conv", x, supports)?;
    check_same_tape("graph_conv", x, w)?;
    check_same_tape("graph_conv", x, bias)?;
    let (xs, ss, ws, bs) = (&x.shape, &supports.shape, &w.shape, &bias.shape);
    if xs.len() != 3 || ss.len() != 3 || ws.len() != 2 || bs.len() != 1 {
        return Err(Error::shape(
            "graph_conv",
            format!("x {xs:?}, supports {ss:?}, w {ws:?}, bias {bs:?}"),
        ));
    }
    let (bsz, n, f) = (xs[0], xs[1], xs[2]);
    let s = ss[0];
    let h = ws[1];
    if ss[1] != n || ss[2] != n || ws[0] != s * f || bs[0] != h {
        return Err(Error::shape(
            "graph_conv",
            format!("x {xs:?}, supports {ss:?}, w {ws:?}, bias {bs:?}"),
        ));
    }
    let xv = x.data();
    let sv = supports.data();
    let wv = w.data();
    let bv = bias.data();
    check_finite("graph_conv", &xv)?;
    check_finite("graph_conv", &sv)?;
    check_finite("graph_conv", &wv)?;
    check_finite("graph_conv", &bv)?;
    let mut out = vec![0.0; bsz * n * h];
    let mut proj = vec![0.0; n * f];
    for b in 0..bsz {
        let xb = &xv[b * n * f..(b + 1) * n * f];
        let ob = &mut out[b * n * h..(b + 1) * n * h];
        for si in 0..s {
            proj.fill(0.0);
            linalg::matmul_nn(&sv[si * n * n..(si + 1) * n * n], xb, &mut proj, n, n, f);
            linalg::matmul_nn(&proj, &wv[si * f * h..(si + 1) * f * h], ob, n, f, h);
        }
        for row in 0..n {
            for j in 0..h {
                ob[row * h + j] += bv[j];
            }
        }
    }
    let ids = (x.id, supports.id, w.id, bias.id);
    let lens = (x.numel(), supports.numel(), w.numel(), bias.numel());
    let needs = (
        x.requires_grad(),
        supports.requires_grad(),
        w.requires_grad(),
        bias.requires_grad(),
    );
    let requires = needs.0 || needs.1 || needs.2 || needs.3;
    Ok(output(
        &x.tape,
        out,
        vec![bsz, n, h],
        requires,
        move || {
            Box::new(move |dy, sink| {
                let mut g = vec![0.0; n * f];
                let mut proj = vec![0.0; n * f];
                for b in 0..bsz {
                    let xb = &xv[b * n * f..(b + 1) * n * f];
                    let dyb = &dy[b * n * h..(b + 1) * n * h];
                    for si in 0..s {
                        let sup = &sv[si * n * n..(si + 1) * n * n];
                        let wsi = &wv[si * f * h..(si + 1) * f * h];
                        // g = dY * W_s^T
                        g.fill(0.0);
                        linalg::matmul_nt(dyb, wsi, &mut g, n, h, f);
                        if needs.1 {
                            // dSup_s += g * x_b^T
                            let gs = sink.accum(ids.1, lens.1);
                            linalg::matmul_nt(
                                &g,
                                xb,
                                &mut gs[si * n * n..(si + 1) * n * n],
                                n,
                                f,
                                n,
                            );
                        }
                        if needs.0 {
                            // dX_b += Sup_s^T * g
                            let gx = sink.accum(ids.0, lens.0);
                            linalg::matmul_tn(
                                sup,
                                &g,
                                &mut gx[b * n * f..(b + 1) * n * f],
                                n,
                                n,
                                f,
                            );
                        }
                        if needs.2 {
                            // dW_s += (Sup_s * x_b)^T * dY
                            proj.fill(0.0);
                            linalg::matmul_nn(sup, xb, &mut proj, n, n, f);
                            let gw = sink.accum(ids.2, lens.2);
                            linalg::matmul_tn(
                                &proj,
                                dyb,
                                &mut gw[si * f * h..(si + 1) * f * h],
                                f,
                                n,
                                h,
                            );
                        }
                    }
                    if needs.3 {
                        let gb = sink.accum(ids.3, lens.3);
                        for row in 0..n {
                            for j in 0..h {
                                gb[j] += dyb[row * h + j];
                            }
                        }
                    }
                }
            })
        },
    ))
}

// ---------------------------------------------------------------------------
// gather

/// Select rows of a `[K, d]` matrix; gradients scatter-add back into it.
pub fn gather_rows(m: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if m.shape.len() != 2 {
        return Err(Error::shape(
            "gather_rows",
            format!("expected rank-2 matrix, got {:?}", m.shape),
        ));
    }
    let (k, d) = (m.shape[0], m.shape[1]);
    if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
        return Err(Error::shape(
            "gather_rows",
            format!("index {bad} out of range for {k} rows"),
        ));
    }
    let mv = m.data();
    check_finite("gather_rows", &mv)?;
    let mut out = vec![0.0; idx.len() * d];
    for (r, &i) in idx.iter().enumerate() {
        out[r * d..(r + 1) * d].copy_from_slice(&mv[i * d..(i + 1) * d]);
    }
    let indices = Rc::new(idx.to_vec());
    let (mid, mlen) = (m.id, m.numel());
    let requires = m.requires_grad();
    let rows = idx.len();
    Ok(output(&m.tape, out, vec![rows, d], requires, move || {
        Box::new(move |dy, sink| {
            let gm = sink.accum(mid, mlen);
            for (r, &i) in indices.iter().enumerate() {
                for j in 0..d {
                    gm[i * d + j] += dy[r * d + j];
                }
            }
        })
    }))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Negative control for gradient checking: forward computes `2x` but
    /// the registered backward rule wrongly claims a derivative of 3.
    pub(crate) fn scale_with_wrong_backward(x: &Tensor) -> Result<Tensor> {
        let xv = x.data();
        check_finite("wrong_scale", &xv)?;
        let out: Vec<f64> = xv.iter().map(|v| 2.0 * v).collect();
        let (xid, xlen) = (x.id, x.numel());
        let requires = x.requires_grad();
        Ok(output(&x.tape, out, x.shape.clone(), requires, move || {
            Box::new(move |dy, sink| {
                let gx = sink.accum(xid, xlen);
                for i in 0..xlen {
                    gx[i] += dy[i] * 3.0;
                }
            })
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(vals: &[f64], shape: &[usize]) -> (Tape, Tensor) {
        let t = Tape::new();
        let x = t.leaf(vals.to_vec(), shape).unwrap();
        (t, x)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let (_t, x) = tape_with(&[0.0, 0.0, 0.0], &[3]);
        let y = softmax(&x, 0).unwrap();
        for v in y.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_definition() {
        let (_t, x) = tape_with(&[-1.0, 0.0, 2.0], &[3]);
        let y = relu(&x).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        // d/dx sigmoid(0) = 0.25; compare against central differences
        let (t, x) = tape_with(&[0.0], &[1]);
        let y = sigmoid(&x).unwrap();
        let loss = sum_all(&y).unwrap();
        t.backward(&loss).unwrap();
        let g = x.grad().unwrap()[0];
        assert!((g - 0.25).abs() < 1e-12);

        let h = 1e-5;
        let f = |v: f64| 1.0 / (1.0 + (-v).exp());
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!((g - fd).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let b = t.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let err = add(&a, &b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn non_finite_input_rejected() {
        let t = Tape::new();
        let a = t.leaf(vec![f64::NAN], &[1]).unwrap();
        assert!(relu(&a).is_err());
        let b = t.leaf(vec![f64::INFINITY, 1.0], &[2]).unwrap();
        assert!(sum_all(&b).is_err());
    }

    #[test]
    fn bias_broadcast_add() {
        let t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = t.leaf(vec![10.0, 20.0], &[2]).unwrap();
        let y = add(&x, &b).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
        let loss = sum_all(&y).unwrap();
        t.backward(&loss).unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn keepdim_broadcast_div_normalizes_rows() {
        let t = Tape::new();
        let x = t.leaf(vec![1.0, 3.0, 2.0, 2.0], &[2, 2]).unwrap();
        let s = sum_axis(&x, 1, true).unwrap();
        let y = div(&x, &s).unwrap();
        assert_eq!(y.to_vec(), vec![0.25, 0.75, 0.5, 0.5]);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = t.leaf(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_broadcasts_rank2_lhs_over_batched_rhs() {
        let t = Tape::new();
        let a = t.leaf(vec![2.0, 0.0, 0.0, 3.0], &[2, 2]).unwrap();
        let x = t
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 2, 2])
            .unwrap();
        let y = matmul(&a, &x).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert_eq!(y.to_vec(), vec![2.0, 4.0, 9.0, 12.0, 10.0, 12.0, 21.0, 24.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = t.leaf(vec![3.0, 4.0], &[1, 2]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let s = slice(&c, 1, 2, 4).unwrap();
        assert_eq!(s.to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn permute_moves_axes() {
        let t = Tape::new();
        let x = t
            .leaf((0..6).map(|v| v as f64).collect(), &[2, 3])
            .unwrap();
        let y = permute(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn graph_conv_matches_explicit_sum() {
        // 1 batch, 2 nodes, 1 feature, 2 supports
        let t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[1, 2, 1]).unwrap();
        let sup = t
            .leaf(vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0], &[2, 2, 2])
            .unwrap();
        let w = t.leaf(vec![3.0, 5.0], &[2, 1]).unwrap();
        let bias = t.leaf(vec![0.5], &[1]).unwrap();
        let y = graph_conv(&x, &sup, &w, &bias).unwrap();
        // node0: I*x=1 -> 1*3; swap*x=2 -> 2*5; +0.5 = 13.5
        // node1: 2*3 + 1*5 + 0.5 = 11.5
        assert_eq!(y.to_vec(), vec![13.5, 11.5]);
    }

    #[test]
    fn gather_rows_selects_and_scatters() {
        let t = Tape::new();
        let m = t
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2])
            .unwrap();
        let g = gather_rows(&m, &[2, 0, 2]).unwrap();
        assert_eq!(g.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = sum_all(&g).unwrap();
        t.backward(&loss).unwrap();
        assert_eq!(m.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let t = Tape::new();
        let mut rng = Rng::seed_from_u64(1);
        let x = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = dropout(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let t = Tape::new();
        let mut rng = Rng::seed_from_u64(1);
        let x = t.leaf(vec![1.0; 1000], &[1000]).unwrap();
        let y = dropout(&x, 0.5, true, &mut rng).unwrap();
        let v = y.to_vec();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let kept = v.iter().filter(|&&e| e != 0.0).count();
        assert!(kept > 380 && kept < 620, "kept {kept}");
    }
}
