//! Minimal reverse-mode automatic differentiation on f64 arrays.
//!
//! A [`Tape`] evaluates eagerly and records every operation; calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients.
//! Everything is sequential f64 arithmetic with a fixed reduction order, so
//! gradients and values are bit-reproducible for identical inputs.
//!
//! The op set is exactly what the cascaded audio-visual network needs:
//! dense/conv layers, pointwise nonlinearities, concatenation and row
//! selection for the recurrent encoder, pooling, and the two losses.

use ndarray::{Array2, Array4, ArrayD, Axis, Ix2, Ix4};

use crate::error::{Error, Result};
use crate::geometry::MIN_NORM;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    AddChannelBias { x: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Matmul { a: Var, b: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    ConcatCols { parts: Vec<Var>, widths: Vec<usize> },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize, cols: Array2<f64> },
    GlobalAvgPool { x: Var },
    MseLoss { pred: Var, target: ArrayD<f64> },
    CosineLoss { pred: Var, target: Array2<f64> },
    WeightedSum { terms: Vec<(Var, f64)> },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. `var`; `None` if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&ArrayD<f64>> {
        self.grads[var.0].as_ref()
    }
}

/// Recording evaluation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

fn as4(v: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    v.view().into_dimensionality::<Ix4>().expect("4-d tensor")
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn flows(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, v: Var) -> f64 {
        *self.nodes[v.0]
            .value
            .first()
            .expect("scalar node is non-empty")
    }

    /// Trainable leaf: gradients are tracked.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, targets, mask bits).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.flows(a) || self.flows(b);
        self.push(value, Op::Add { a, b }, rg)
    }

    /// `[m, n] + [n]` row-broadcast bias.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let bv = &self.nodes[b.0].value;
        assert_eq!(xv.ncols(), bv.len(), "bias width mismatch");
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            for (o, &bb) in row.iter_mut().zip(bv.iter()) {
                *o += bb;
            }
        }
        let rg = self.flows(x) || self.flows(b);
        self.push(out.into_dyn(), Op::AddBias { x, b }, rg)
    }

    /// `[B, C, H, W] + [C]` channel-broadcast bias.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let bv = &self.nodes[b.0].value;
        assert_eq!(xv.dim().1, bv.len(), "channel bias mismatch");
        let mut out = xv.to_owned();
        for (c, &bb) in bv.iter().enumerate() {
            out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bb);
        }
        let rg = self.flows(x) || self.flows(b);
        self.push(out.into_dyn(), Op::AddChannelBias { x, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.flows(a) || self.flows(b);
        self.push(value, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v * c);
        let rg = self.flows(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
        let value = av.dot(&bv).into_dyn();
        let rg = self.flows(a) || self.flows(b);
        self.push(value, Op::Matmul { a, b }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.flows(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(f64::tanh);
        let rg = self.flows(x);
        self.push(value, Op::Tanh { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.flows(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// Concatenate 2-d tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = as2(&self.nodes[parts[0].0].value).nrows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = as2(&self.nodes[p.0].value);
                assert_eq!(v.nrows(), rows, "concat row mismatch");
                v.ncols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Array2::zeros((rows, total));
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(widths.iter()) {
            out.slice_mut(ndarray::s![.., offset..offset + w])
                .assign(&as2(&self.nodes[p.0].value));
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.flows(p));
        self.push(
            out.into_dyn(),
            Op::ConcatCols {
                parts: parts.to_vec(),
                widths,
            },
            rg,
        )
    }

    /// Column slice `[.., start..end]` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        assert!(start < end && end <= xv.ncols(), "slice out of range");
        let value = xv.slice(ndarray::s![.., start..end]).to_owned().into_dyn();
        let rg = self.flows(x);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    /// Select rows of a 2-d tensor by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let mut out = Array2::zeros((rows.len(), xv.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&xv.row(r));
        }
        let rg = self.flows(x);
        self.push(out.into_dyn(), Op::GatherRows { x, rows }, rg)
    }

    /// 2-d convolution, square kernel, via im2col.
    ///
    /// `x: [B, C, H, W]`, `w: [OC, C, K, K]` -> `[B, OC, OH, OW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (cols, out2, b, h, wdt, oc, k) = {
            let xv = as4(&self.nodes[x.0].value);
            let wv = as4(&self.nodes[w.0].value);
            let (oc, c, k, k2) = wv.dim();
            assert_eq!(k, k2, "square kernels only");
            assert_eq!(xv.dim().1, c, "conv channel mismatch");
            let cols = im2col(&xv, k, stride, pad);
            let w2 = wv
                .to_owned()
                .into_shape_with_order((oc, c * k * k))
                .expect("reshape");
            let out2 = cols.dot(&w2.t()); // [B*OH*OW, OC]
            let (b, _, h, wdt) = xv.dim();
            (cols, out2, b, h, wdt, oc, k)
        };
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wdt + 2 * pad - k) / stride + 1;
        let out = out2
            .into_shape_with_order((b, oh, ow, oc))
            .expect("reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        let rg = self.flows(x) || self.flows(w);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (b, c, h, w) = xv.dim();
        let mut out = Array2::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let mut s = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        s += xv[(bi, ci, hi, wi)];
                    }
                }
                out[(bi, ci)] = s / (h * w) as f64;
            }
        }
        let rg = self.flows(x);
        self.push(out.into_dyn(), Op::GlobalAvgPool { x }, rg)
    }

    /// Scalar mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: ArrayD<f64>) -> Var {
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.shape(), target.shape(), "mse target shape mismatch");
        let n = pv.len() as f64;
        let loss = pv
            .iter()
            .zip(target.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.flows(pred);
        self.push(ndarray::arr0(loss).into_dyn(), Op::MseLoss { pred, target }, rg)
    }

    /// Scalar mean over rows of `1 - cos(pred_row, target_row)`.
    ///
    /// Errors if any row of either side has a (near-)zero norm.
    pub fn cosine_loss(&mut self, pred: Var, target: Array2<f64>) -> Result<Var> {
        let pv = as2(&self.nodes[pred.0].value);
        if pv.dim() != target.dim() {
            return Err(Error::Shape(format!(
                "cosine target shape {:?} vs pred {:?}",
                target.dim(),
                pv.dim()
            )));
        }
        let mut total = 0.0;
        for (p, t) in pv.rows().into_iter().zip(target.rows()) {
            let np = p.dot(&p).sqrt();
            let nt = t.dot(&t).sqrt();
            if np <= MIN_NORM || nt <= MIN_NORM {
                return Err(Error::DegenerateVector {
                    norm: np.min(nt),
                    min: MIN_NORM,
                });
            }
            total += 1.0 - p.dot(&t) / (np * nt);
        }
        let loss = total / pv.nrows() as f64;
        let rg = self.flows(pred);
        Ok(self.push(
            ndarray::arr0(loss).into_dyn(),
            Op::CosineLoss { pred, target },
            rg,
        ))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value: f64 = terms
            .iter()
            .map(|(v, c)| c * self.scalar(*v))
            .sum();
        let rg = terms.iter().any(|&(v, _)| self.flows(v));
        self.push(
            ndarray::arr0(value).into_dyn(),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ndarray::arr0(1.0).into_dyn());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g.clone());
                }
                Op::AddBias { x, b } => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let db = g2.sum_axis(Axis(0)).into_dyn();
                    self.accum(&mut grads, *x, g.clone());
                    self.accum(&mut grads, *b, db);
                }
                Op::AddChannelBias { x, b } => {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (bs, c, h, w) = g4.dim();
                    let mut db = ndarray::Array1::zeros(c);
                    for bi in 0..bs {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..w {
                                    db[ci] += g4[(bi, ci, hi, wi)];
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *x, g.clone());
                    self.accum(&mut grads, *b, db.into_dyn());
                }
                Op::Mul { a, b } => {
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::Scale { x, c } => {
                    self.accum(&mut grads, *x, g.mapv(|v| v * c));
                }
                Op::Matmul { a, b } => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let av = as2(&self.nodes[a.0].value);
                    let bv = as2(&self.nodes[b.0].value);
                    let da = g2.dot(&bv.t()).into_dyn();
                    let db = av.t().dot(&g2).into_dyn();
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::Relu { x } => {
                    let dx = ndarray::Zip::from(&g)
                        .and(&self.nodes[x.0].value)
                        .map_collect(|&gv, &xv| if xv > 0.0 { gv } else { 0.0 });
                    self.accum(&mut grads, *x, dx);
                }
                Op::Tanh { x } => {
                    let y = &self.nodes[idx].value;
                    let dx = ndarray::Zip::from(&g)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * (1.0 - yv * yv));
                    self.accum(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[idx].value;
                    let dx = ndarray::Zip::from(&g)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * yv * (1.0 - yv));
                    self.accum(&mut grads, *x, dx);
                }
                Op::ConcatCols { parts, widths } => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut offset = 0;
                    for (p, &w) in parts.iter().zip(widths.iter()) {
                        let dp = g2.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        self.accum(&mut grads, *p, dp.into_dyn());
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let xv = as2(&self.nodes[x.0].value);
                    let mut dx = Array2::zeros(xv.dim());
                    dx.slice_mut(ndarray::s![.., *start..start + g2.ncols()])
                        .assign(&g2);
                    self.accum(&mut grads, *x, dx.into_dyn());
                }
                Op::GatherRows { x, rows } => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let xv = as2(&self.nodes[x.0].value);
                    let mut dx = Array2::zeros(xv.dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = dx.row_mut(r);
                        dst += &g2.row(i);
                    }
                    self.accum(&mut grads, *x, dx.into_dyn());
                }
                Op::Conv2d {
                    x,
                    w,
                    stride,
                    pad,
                    cols,
                } => {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (b, oc, oh, ow) = g4.dim();
                    let g2 = g4
                        .permuted_axes([0, 2, 3, 1])
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((b * oh * ow, oc))
                        .expect("reshape");
                    let wv = as4(&self.nodes[w.0].value);
                    let (_, c, k, _) = wv.dim();
                    let w2 = wv
                        .to_owned()
                        .into_shape_with_order((oc, c * k * k))
                        .expect("reshape");
                    // dW = g2^T . cols
                    let dw2 = g2.t().dot(cols);
                    let dw = dw2
                        .into_shape_with_order((oc, c, k, k))
                        .expect("reshape")
                        .into_dyn();
                    // dX = col2im(g2 . W)
                    let dcols = g2.dot(&w2);
                    let xdim = as4(&self.nodes[x.0].value).dim();
                    let dx = col2im(&dcols, xdim, k, *stride, *pad);
                    self.accum(&mut grads, *x, dx.into_dyn());
                    self.accum(&mut grads, *w, dw);
                }
                Op::GlobalAvgPool { x } => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let (b, c, h, w) = as4(&self.nodes[x.0].value).dim();
                    let scale = 1.0 / (h * w) as f64;
                    let mut dx = Array4::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            let gv = g2[(bi, ci)] * scale;
                            dx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(gv);
                        }
                    }
                    self.accum(&mut grads, *x, dx.into_dyn());
                }
                Op::MseLoss { pred, target } => {
                    let gl = *g.first().unwrap();
                    let pv = &self.nodes[pred.0].value;
                    let n = pv.len() as f64;
                    let dp = ndarray::Zip::from(pv)
                        .and(target)
                        .map_collect(|&p, &t| gl * 2.0 * (p - t) / n);
                    self.accum(&mut grads, *pred, dp);
                }
                Op::CosineLoss { pred, target } => {
                    let gl = *g.first().unwrap();
                    let pv = as2(&self.nodes[pred.0].value);
                    let bsz = pv.nrows() as f64;
                    let mut dp = Array2::zeros(pv.dim());
                    for (i, (p, t)) in pv.rows().into_iter().zip(target.rows()).enumerate() {
                        let np = p.dot(&p).sqrt();
                        let nt = t.dot(&t).sqrt();
                        let cosv = p.dot(&t) / (np * nt);
                        for j in 0..p.len() {
                            let u = p[j] / np;
                            let v = t[j] / nt;
                            dp[(i, j)] = gl * (-(v - cosv * u) / np) / bsz;
                        }
                    }
                    self.accum(&mut grads, *pred, dp.into_dyn());
                }
                Op::WeightedSum { terms } => {
                    let gl = *g.first().unwrap();
                    for (v, c) in terms {
                        self.accum(&mut grads, *v, ndarray::arr0(gl * c).into_dyn());
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

fn im2col(x: &ndarray::ArrayView4<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((b * oh * ow, c * k * k));
    for bi in 0..b {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = (bi * oh + ohi) * ow + owi;
                for ci in 0..c {
                    for kh in 0..k {
                        let hi = (ohi * stride + kh) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let wi = (owi * stride + kw) as isize - pad as isize;
                            if wi < 0 || wi >= w as isize {
                                continue;
                            }
                            cols[(row, (ci * k + kh) * k + kw)] =
                                x[(bi, ci, hi as usize, wi as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    xdim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, c, h, w) = xdim;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = (bi * oh + ohi) * ow + owi;
                for ci in 0..c {
                    for kh in 0..k {
                        let hi = (ohi * stride + kh) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let wi = (owi * stride + kw) as isize - pad as isize;
                            if wi < 0 || wi >= w as isize {
                                continue;
                            }
                            dx[(bi, ci, hi as usize, wi as usize)] +=
                                dcols[(row, (ci * k + kh) * k + kw)];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array1, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Central-difference check of d(loss)/d(leaf) for a graph builder.
    ///
    /// `build` receives the tape and the leaf var and returns the loss var.
    fn check_grad<F>(leaf_value: ArrayD<f64>, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let leaf = tape.param(leaf_value.clone());
        let loss = build(&mut tape, leaf);
        let grads = tape.backward(loss);
        let analytic = grads.wrt(leaf).expect("leaf receives gradient").clone();

        let h = 1e-6;
        for idx in 0..leaf_value.len() {
            let eval = |delta: f64| -> f64 {
                let mut v = leaf_value.clone();
                *v.iter_mut().nth(idx).unwrap() += delta;
                let mut t = Tape::new();
                let l = t.param(v);
                let loss = build(&mut t, l);
                t.scalar(loss)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = *analytic.iter().nth(idx).unwrap();
            let denom = a.abs().max(fd.abs()).max(1e-8);
            assert!(
                (a - fd).abs() / denom < 1e-5,
                "grad[{idx}]: analytic {a} vs fd {fd}"
            );
        }
    }

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_bias_tanh_grad() {
        let w = rand_arr(&[4, 3], 1);
        check_grad(rand_arr(&[2, 4], 0), move |t, leaf| {
            let w = t.param(w.clone());
            let b = t.constant(Array1::from(vec![0.1, -0.2, 0.3]).into_dyn());
            let y = t.matmul(leaf, w);
            let y = t.add_bias(y, b);
            let y = t.tanh(y);
            let target = ArrayD::zeros(IxDyn(&[2, 3]));
            t.mse_loss(y, target)
        });
    }

    #[test]
    fn weight_grad_through_matmul() {
        let x = rand_arr(&[3, 4], 2);
        check_grad(rand_arr(&[4, 2], 3), move |t, leaf| {
            let x = t.constant(x.clone());
            let y = t.matmul(x, leaf);
            let y = t.sigmoid(y);
            let target = ArrayD::zeros(IxDyn(&[3, 2]));
            t.mse_loss(y, target)
        });
    }

    #[test]
    fn conv_pool_grad() {
        let w = rand_arr(&[3, 2, 3, 3], 5);
        check_grad(rand_arr(&[2, 2, 5, 5], 4), move |t, leaf| {
            let w = t.param(w.clone());
            let y = t.conv2d(leaf, w, 2, 1);
            let y = t.tanh(y);
            let y = t.global_avg_pool(y);
            let target = ArrayD::zeros(IxDyn(&[2, 3]));
            t.mse_loss(y, target)
        });
    }

    #[test]
    fn conv_weight_grad() {
        let x = rand_arr(&[1, 2, 6, 6], 6);
        check_grad(rand_arr(&[4, 2, 3, 3], 7), move |t, leaf| {
            let x = t.constant(x.clone());
            let y = t.conv2d(x, leaf, 1, 1);
            let y = t.global_avg_pool(y);
            let target = ArrayD::zeros(IxDyn(&[1, 4]));
            t.mse_loss(y, target)
        });
    }

    #[test]
    fn concat_slice_gather_grad() {
        let other = rand_arr(&[4, 3], 9);
        check_grad(rand_arr(&[4, 3], 8), move |t, leaf| {
            let o = t.param(other.clone());
            let cat = t.concat_cols(&[leaf, o]);
            let sl = t.slice_cols(cat, 1, 5);
            let gathered = t.gather_rows(sl, vec![0, 2, 2, 3]);
            let y = t.tanh(gathered);
            let target = ArrayD::zeros(IxDyn(&[4, 4]));
            t.mse_loss(y, target)
        });
    }

    #[test]
    fn cosine_loss_grad_matches_closed_form() {
        let target = arr2(&[[0.2, -0.4, -0.8], [0.9, 0.1, -0.3]]);
        check_grad(rand_arr(&[2, 3], 10), move |t, leaf| {
            let y = t.tanh(leaf);
            t.cosine_loss(y, target.clone()).unwrap()
        });
    }

    #[test]
    fn weighted_sum_combines_losses() {
        let mut tape = Tape::new();
        let p = tape.param(rand_arr(&[2, 3], 11));
        let t1 = ArrayD::zeros(IxDyn(&[2, 3]));
        let l1 = tape.mse_loss(p, t1);
        let l2 = tape
            .cosine_loss(p, arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
            .unwrap();
        let total = tape.weighted_sum(&[(l1, 2.0), (l2, 0.5)]);
        let expected = 2.0 * tape.scalar(l1) + 0.5 * tape.scalar(l2);
        assert!((tape.scalar(total) - expected).abs() < 1e-12);

        let grads = tape.backward(total);
        assert!(grads.wrt(p).is_some());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(rand_arr(&[2, 2], 12));
        let w = tape.param(rand_arr(&[2, 2], 13));
        let y = tape.matmul(x, w);
        let loss = tape.mse_loss(y, ArrayD::zeros(IxDyn(&[2, 2])));
        let grads = tape.backward(loss);
        assert!(grads.wrt(x).is_none());
        assert!(grads.wrt(w).is_some());
    }

    #[test]
    fn cosine_loss_rejects_zero_rows() {
        let mut tape = Tape::new();
        let p = tape.param(ArrayD::zeros(IxDyn(&[1, 3])));
        let err = tape.cosine_loss(p, arr2(&[[1.0, 0.0, 0.0]]));
        assert!(matches!(err, Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn lstm_style_composition_grad() {
        // One recurrent gate step composed from primitives.
        let wh = rand_arr(&[3, 3], 15);
        check_grad(rand_arr(&[2, 3], 14), move |t, leaf| {
            let wh = t.param(wh.clone());
            let mut h = t.constant(ArrayD::zeros(IxDyn(&[2, 3])));
            for _ in 0..3 {
                let xz = t.matmul(leaf, wh);
                let hz = t.matmul(h, wh);
                let z = t.add(xz, hz);
                let gate = t.sigmoid(z);
                let cand = t.tanh(z);
                h = t.mul(gate, cand);
            }
            let target = ArrayD::zeros(IxDyn(&[2, 3]));
            t.mse_loss(h, target)
        });
    }
}
