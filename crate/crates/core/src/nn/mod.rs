//! A small reverse-mode autodiff tape over `[batch, channel, height, width]`
//! tensors, with exactly the operations the segmentation networks need.
//!
//! Values are `f64` throughout so analytic gradients can be validated against
//! central finite differences at tight tolerances. Batch-level loops go
//! through [`crate::exec`], which keeps the rayon and sequential paths
//! bit-identical.

use ndarray::{s, Array2, Array4, ArrayView3, Axis};

use crate::error::{LtdError, Result};
use crate::exec::{self, ExecMode};
use crate::losses::{BCE_EPS, DICE_SMOOTH};

pub type NodeId = usize;

enum Op {
    Leaf,
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u8>,
    },
    Upsample2 {
        x: NodeId,
    },
    ConcatChannels {
        xs: Vec<NodeId>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array4<f64>,
        inv_std: Vec<f64>,
    },
    /// Per-channel `y = scale[c] * x + shift[c]`; used for eval-mode
    /// normalization with frozen statistics.
    ChannelAffine {
        x: NodeId,
        scale: Vec<f64>,
    },
    L1Loss {
        pred: NodeId,
        target: Array4<f64>,
    },
    BceLoss {
        pred: NodeId,
        target: Array4<f64>,
    },
    SoftDiceLoss {
        pred: NodeId,
        target: Array4<f64>,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
}

struct Node {
    value: Array4<f64>,
    op: Op,
}

/// Gradients of one backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Array4<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array4<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    mode: ExecMode,
}

impl Tape {
    pub fn new(mode: ExecMode) -> Self {
        Tape {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn value(&self, id: NodeId) -> &Array4<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[[0, 0, 0, 0]]
    }

    fn push(&mut self, value: Array4<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array4<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.mapv(|v| v.max(0.0));
        self.push(value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid { x })
    }

    /// 2-D convolution, stride 1, zero padding `kernel / 2` (same spatial
    /// size for odd kernels). Weight layout `[c_out, c_in, k, k]`, bias
    /// `[1, c_out, 1, 1]`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, b: NodeId, kernel: usize) -> Result<NodeId> {
        let (n, c_in, h, wd) = self.nodes[x].value.dim();
        let (c_out, wc_in, kh, kw) = self.nodes[w].value.dim();
        if wc_in != c_in || kh != kernel || kw != kernel {
            return Err(LtdError::shape(
                format!("weight [*, {c_in}, {kernel}, {kernel}]"),
                format!("[{c_out}, {wc_in}, {kh}, {kw}]"),
            ));
        }
        let weight2d = self.nodes[w]
            .value
            .view()
            .into_shape_with_order((c_out, c_in * kernel * kernel))
            .expect("contiguous weight");
        let bias = &self.nodes[b].value;

        let input = &self.nodes[x].value;
        let mut per_sample: Vec<Array2<f64>> = Vec::with_capacity(n);
        per_sample.resize_with(n, || Array2::zeros((0, 0)));
        exec::for_each_indexed(self.mode, &mut per_sample, |i, slot| {
            let cols = im2col(input.index_axis(Axis(0), i), kernel);
            *slot = weight2d.dot(&cols);
        });

        let mut out = Array4::zeros((n, c_out, h, wd));
        for (i, mat) in per_sample.into_iter().enumerate() {
            let reshaped = mat
                .into_shape_with_order((c_out, h, wd))
                .expect("conv output shape");
            out.index_axis_mut(Axis(0), i).assign(&reshaped);
        }
        for c in 0..c_out {
            let bv = bias[[0, c, 0, 0]];
            out.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v + bv);
        }
        Ok(self.push(out, Op::Conv { x, w, b, kernel }))
    }

    /// 2x2 max pooling, stride 2. Spatial dims must be even.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[x].value.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(LtdError::shape("even spatial dims".to_string(), format!("{h}x{w}")));
        }
        let input = &self.nodes[x].value;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::zeros((n, c, oh, ow));
        let mut argmax = vec![0u8; n * c * oh * ow];
        let mut flat = 0usize;
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_pos = 0u8;
                        for (pos, (dy, dx)) in
                            [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate()
                        {
                            let v = input[[ni, ci, 2 * y + dy, 2 * xo + dx]];
                            if v > best {
                                best = v;
                                best_pos = pos as u8;
                            }
                        }
                        out[[ni, ci, y, xo]] = best;
                        argmax[flat] = best_pos;
                        flat += 1;
                    }
                }
            }
        }
        Ok(self.push(out, Op::MaxPool2 { x, argmax }))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.nodes[x].value.dim();
        let input = &self.nodes[x].value;
        let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for xo in 0..w {
                        let v = input[[ni, ci, y, xo]];
                        out[[ni, ci, 2 * y, 2 * xo]] = v;
                        out[[ni, ci, 2 * y, 2 * xo + 1]] = v;
                        out[[ni, ci, 2 * y + 1, 2 * xo]] = v;
                        out[[ni, ci, 2 * y + 1, 2 * xo + 1]] = v;
                    }
                }
            }
        }
        self.push(out, Op::Upsample2 { x })
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (n, _, h, w) = self.nodes[xs[0]].value.dim();
        let mut c_total = 0;
        for &id in xs {
            let (ni, ci, hi, wi) = self.nodes[id].value.dim();
            if (ni, hi, wi) != (n, h, w) {
                return Err(LtdError::shape(
                    format!("[{n}, *, {h}, {w}]"),
                    format!("[{ni}, {ci}, {hi}, {wi}]"),
                ));
            }
            c_total += ci;
        }
        let mut out = Array4::zeros((n, c_total, h, w));
        let mut offset = 0;
        for &id in xs {
            let c = self.nodes[id].value.dim().1;
            out.slice_mut(s![.., offset..offset + c, .., ..])
                .assign(&self.nodes[id].value);
            offset += c;
        }
        Ok(self.push(out, Op::ConcatChannels { xs: xs.to_vec() }))
    }

    /// Batch normalization over `(batch, height, width)` per channel, using
    /// batch statistics. Returns the node plus the per-channel batch mean
    /// and (biased) variance for running-statistics updates. Callers skip
    /// this op entirely at batch size 1.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> (NodeId, Vec<f64>, Vec<f64>) {
        let (n, c, h, w) = self.nodes[x].value.dim();
        let count = (n * h * w) as f64;
        let input = &self.nodes[x].value;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let slice = input.slice(s![.., ci, .., ..]);
            let m = slice.iter().sum::<f64>() / count;
            let v = slice.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / count;
            mean[ci] = m;
            var[ci] = v;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = input.clone();
        for ci in 0..c {
            let m = mean[ci];
            let is = inv_std[ci];
            xhat.slice_mut(s![.., ci, .., ..])
                .mapv_inplace(|v| (v - m) * is);
        }
        let gamma_v = &self.nodes[gamma].value;
        let beta_v = &self.nodes[beta].value;
        let mut out = xhat.clone();
        for ci in 0..c {
            let g = gamma_v[[0, ci, 0, 0]];
            let b = beta_v[[0, ci, 0, 0]];
            out.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| g * v + b);
        }
        let id = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        (id, mean, var)
    }

    /// Frozen-statistics normalization for evaluation.
    pub fn channel_affine(&mut self, x: NodeId, scale: Vec<f64>, shift: Vec<f64>) -> NodeId {
        let c = self.nodes[x].value.dim().1;
        debug_assert_eq!(scale.len(), c);
        let mut out = self.nodes[x].value.clone();
        for ci in 0..c {
            let (sc, sh) = (scale[ci], shift[ci]);
            out.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| sc * v + sh);
        }
        self.push(out, Op::ChannelAffine { x, scale })
    }

    fn scalar_node(&mut self, value: f64, op: Op) -> NodeId {
        self.push(Array4::from_elem((1, 1, 1, 1), value), op)
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: NodeId, target: Array4<f64>) -> Result<NodeId> {
        self.check_loss_dims(pred, &target)?;
        let p = &self.nodes[pred].value;
        let n = p.len() as f64;
        let value = p
            .iter()
            .zip(target.iter())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>()
            / n;
        Ok(self.scalar_node(value, Op::L1Loss { pred, target }))
    }

    /// Mean binary cross-entropy against a constant target.
    pub fn bce_loss(&mut self, pred: NodeId, target: Array4<f64>) -> Result<NodeId> {
        self.check_loss_dims(pred, &target)?;
        let p = &self.nodes[pred].value;
        let n = p.len() as f64;
        let value = p
            .iter()
            .zip(target.iter())
            .map(|(&a, &b)| {
                let pc = a.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(b * pc.ln() + (1.0 - b) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.scalar_node(value, Op::BceLoss { pred, target }))
    }

    /// Soft DICE loss, averaged over the batch axis.
    pub fn soft_dice_loss(&mut self, pred: NodeId, target: Array4<f64>) -> Result<NodeId> {
        self.check_loss_dims(pred, &target)?;
        let p = &self.nodes[pred].value;
        let batch = p.dim().0;
        let mut loss = 0.0;
        for ni in 0..batch {
            let ps = p.index_axis(Axis(0), ni);
            let ts = target.index_axis(Axis(0), ni);
            let inter: f64 = ps.iter().zip(ts.iter()).map(|(&a, &b)| a * b).sum();
            let total: f64 = ps.iter().sum::<f64>() + ts.iter().sum::<f64>();
            loss += 1.0 - (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH);
        }
        let value = loss / batch as f64;
        Ok(self.scalar_node(value, Op::SoftDiceLoss { pred, target }))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let value = terms
            .iter()
            .map(|&(id, coef)| self.scalar(id) * coef)
            .sum();
        self.scalar_node(
            value,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    fn check_loss_dims(&self, pred: NodeId, target: &Array4<f64>) -> Result<()> {
        let pd = self.nodes[pred].value.dim();
        if pd != target.dim() {
            return Err(LtdError::shape(
                format!("{:?}", target.dim()),
                format!("{pd:?}"),
            ));
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Array4<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array4::from_elem(self.nodes[root].value.dim(), 1.0));

        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(grad);
                    continue;
                }
                Op::Relu { x } => {
                    let mut dx = grad;
                    dx.zip_mut_with(&self.nodes[*x].value, |g, &v| {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let mut dx = grad;
                    dx.zip_mut_with(&self.nodes[id].value, |g, &y| *g *= y * (1.0 - y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Conv { x, w, b, kernel } => {
                    let (dx, dw, db) = self.conv_backward(*x, *w, *kernel, &grad);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::MaxPool2 { x, argmax } => {
                    let (n, c, oh, ow) = self.nodes[id].value.dim();
                    let mut dx = Array4::zeros(self.nodes[*x].value.dim());
                    let mut flat = 0usize;
                    for ni in 0..n {
                        for ci in 0..c {
                            for y in 0..oh {
                                for xo in 0..ow {
                                    let pos = argmax[flat] as usize;
                                    let (dy, dxo) = (pos / 2, pos % 2);
                                    dx[[ni, ci, 2 * y + dy, 2 * xo + dxo]] +=
                                        grad[[ni, ci, y, xo]];
                                    flat += 1;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2 { x } => {
                    let (n, c, h, w) = self.nodes[*x].value.dim();
                    let mut dx = Array4::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            for y in 0..h {
                                for xo in 0..w {
                                    dx[[ni, ci, y, xo]] = grad[[ni, ci, 2 * y, 2 * xo]]
                                        + grad[[ni, ci, 2 * y, 2 * xo + 1]]
                                        + grad[[ni, ci, 2 * y + 1, 2 * xo]]
                                        + grad[[ni, ci, 2 * y + 1, 2 * xo + 1]];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatChannels { xs } => {
                    let mut offset = 0;
                    for &src in xs {
                        let c = self.nodes[src].value.dim().1;
                        let dx = grad.slice(s![.., offset..offset + c, .., ..]).to_owned();
                        accumulate(&mut grads, src, dx);
                        offset += c;
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, c, h, w) = xhat.dim();
                    let count = (n * h * w) as f64;
                    let gamma_v = &self.nodes[*gamma].value;
                    let mut dx = Array4::zeros((n, c, h, w));
                    let mut dgamma = Array4::zeros((1, c, 1, 1));
                    let mut dbeta = Array4::zeros((1, c, 1, 1));
                    for ci in 0..c {
                        let g_slice = grad.slice(s![.., ci, .., ..]);
                        let xh_slice = xhat.slice(s![.., ci, .., ..]);
                        let sum_dy: f64 = g_slice.iter().sum();
                        let sum_dy_xhat: f64 = g_slice
                            .iter()
                            .zip(xh_slice.iter())
                            .map(|(&a, &b)| a * b)
                            .sum();
                        dgamma[[0, ci, 0, 0]] = sum_dy_xhat;
                        dbeta[[0, ci, 0, 0]] = sum_dy;
                        let gm = gamma_v[[0, ci, 0, 0]];
                        let is = inv_std[ci];
                        let mut dxs = dx.slice_mut(s![.., ci, .., ..]);
                        for ((d, &dy), &xh) in
                            dxs.iter_mut().zip(g_slice.iter()).zip(xh_slice.iter())
                        {
                            *d = gm * is / count
                                * (count * dy - sum_dy - xh * sum_dy_xhat);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::ChannelAffine { x, scale, .. } => {
                    let mut dx = grad;
                    let c = dx.dim().1;
                    for ci in 0..c {
                        let sc = scale[ci];
                        dx.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v * sc);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::L1Loss { pred, target } => {
                    let g = grad[[0, 0, 0, 0]];
                    let p = &self.nodes[*pred].value;
                    let n = p.len() as f64;
                    let mut dp = p - target;
                    dp.mapv_inplace(|v| g * v.signum() / n);
                    accumulate(&mut grads, *pred, dp);
                }
                Op::BceLoss { pred, target } => {
                    let g = grad[[0, 0, 0, 0]];
                    let p = &self.nodes[*pred].value;
                    let n = p.len() as f64;
                    let mut dp = Array4::zeros(p.dim());
                    for ((d, &pv), &tv) in dp.iter_mut().zip(p.iter()).zip(target.iter()) {
                        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        *d = g * (pc - tv) / (pc * (1.0 - pc)) / n;
                    }
                    accumulate(&mut grads, *pred, dp);
                }
                Op::SoftDiceLoss { pred, target } => {
                    let g = grad[[0, 0, 0, 0]];
                    let p = &self.nodes[*pred].value;
                    let batch = p.dim().0 as f64;
                    let mut dp = Array4::zeros(p.dim());
                    for ni in 0..p.dim().0 {
                        let ps = p.index_axis(Axis(0), ni);
                        let ts = target.index_axis(Axis(0), ni);
                        let inter: f64 = ps.iter().zip(ts.iter()).map(|(&a, &b)| a * b).sum();
                        let total: f64 = ps.iter().sum::<f64>() + ts.iter().sum::<f64>();
                        let num = 2.0 * inter + DICE_SMOOTH;
                        let den = total + DICE_SMOOTH;
                        let mut dps = dp.index_axis_mut(Axis(0), ni);
                        for (d, &tv) in dps.iter_mut().zip(ts.iter()) {
                            *d = -g * (2.0 * tv * den - num) / (den * den) / batch;
                        }
                    }
                    accumulate(&mut grads, *pred, dp);
                }
                Op::WeightedSum { terms } => {
                    let g = grad[[0, 0, 0, 0]];
                    for &(src, coef) in terms {
                        accumulate(
                            &mut grads,
                            src,
                            Array4::from_elem((1, 1, 1, 1), g * coef),
                        );
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn conv_backward(
        &self,
        x: NodeId,
        w: NodeId,
        kernel: usize,
        grad: &Array4<f64>,
    ) -> (Array4<f64>, Array4<f64>, Array4<f64>) {
        let (n, c_in, h, wd) = self.nodes[x].value.dim();
        let (c_out, _, _, _) = self.nodes[w].value.dim();
        let weight2d = self.nodes[w]
            .value
            .view()
            .into_shape_with_order((c_out, c_in * kernel * kernel))
            .expect("contiguous weight");
        let input = &self.nodes[x].value;

        // Per-sample contributions, computed independently (parallelizable),
        // then reduced in a fixed order.
        struct SampleGrad {
            dx: Array2<f64>,
            dw: Array2<f64>,
        }
        let mut parts: Vec<Option<SampleGrad>> = Vec::with_capacity(n);
        parts.resize_with(n, || None);
        exec::for_each_indexed(self.mode, &mut parts, |i, slot| {
            let gout = grad
                .index_axis(Axis(0), i)
                .into_shape_with_order((c_out, h * wd))
                .expect("contiguous grad")
                .to_owned();
            let cols = im2col(input.index_axis(Axis(0), i), kernel);
            let dw = gout.dot(&cols.t());
            let dcols = weight2d.t().dot(&gout);
            *slot = Some(SampleGrad { dx: dcols, dw });
        });

        let mut dx = Array4::zeros((n, c_in, h, wd));
        let mut dw2d = Array2::zeros((c_out, c_in * kernel * kernel));
        for (i, part) in parts.into_iter().enumerate() {
            let part = part.expect("filled by for_each_indexed");
            col2im_add(&part.dx, dx.index_axis_mut(Axis(0), i), kernel);
            dw2d += &part.dw;
        }
        let dw = dw2d
            .into_shape_with_order((c_out, c_in, kernel, kernel))
            .expect("weight grad shape");

        let mut db = Array4::zeros((1, c_out, 1, 1));
        for c in 0..c_out {
            db[[0, c, 0, 0]] = grad.slice(s![.., c, .., ..]).iter().sum();
        }
        (dx, dw, db)
    }
}

fn accumulate(grads: &mut [Option<Array4<f64>>], id: NodeId, delta: Array4<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Unfold a `[c, h, w]` view into `[c * k * k, h * w]` patch columns with
/// zero padding `k / 2`.
fn im2col(input: ArrayView3<'_, f64>, kernel: usize) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let pad = kernel / 2;
    let mut cols = Array2::zeros((c * kernel * kernel, h * w));
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let mut out_row = cols.row_mut(row);
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out_row[y * w + x] = input[[ci, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold `[c * k * k, h * w]` patch-column gradients back onto a `[c, h, w]`
/// gradient view, adding into place.
fn col2im_add(cols: &Array2<f64>, mut out: ndarray::ArrayViewMut3<'_, f64>, kernel: usize) {
    let (c, h, w) = out.dim();
    let pad = kernel / 2;
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let col_row = cols.row(row);
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[[ci, sy as usize, sx as usize]] += col_row[y * w + x];
                    }
                }
            }
        }
    }
}

/// Per-parameter Adam state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Array4<f64>,
    pub v: Array4<f64>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update in place. `t` is the 1-based step counter.
pub fn adam_step(
    value: &mut Array4<f64>,
    state: &mut AdamState,
    grad: &Array4<f64>,
    lr: f64,
    t: u64,
) {
    let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for ((val, (m, v)), &g) in value
        .iter_mut()
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .zip(grad.iter())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let mhat = *m / bias1;
        let vhat = *v / bias2;
        *val -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}
