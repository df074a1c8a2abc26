//! Spatial operations: softmax keypoints, Gaussian heatmaps, upsampling,
//! pooling and the reconstruction loss.

use super::graph::{Accum, Graph, Op, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Normalized coordinate of grid index `i` on an axis of extent `n`:
/// index 0 maps to -1, index n-1 to +1.
pub fn grid_coord(i: usize, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

fn grid<T: Scalar>(n: usize) -> Vec<T> {
    (0..n).map(|i| T::from_f64c(grid_coord(i, n))).collect()
}

/// Source coordinate and blend weights for align-corners linear resampling.
fn lerp_taps(out_i: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    if in_n == 1 || out_n == 1 {
        return (0, 0, 0.0);
    }
    let src = out_i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64;
    let i0 = (src.floor() as usize).min(in_n - 1);
    let i1 = (i0 + 1).min(in_n - 1);
    (i0, i1, src - i0 as f64)
}

impl<T: Scalar> Graph<T> {
    /// Softmax over the `H x W` positions of each `(n, k)` map.
    pub fn spatial_softmax(&mut self, logits: Var) -> Result<Var> {
        let (n, k, h, w) = self.value(logits).dims4("spatial_softmax")?;
        if h < 2 || w < 2 {
            return Err(Error::dim("spatial_softmax", format!("H, W must be >= 2, got {h}x{w}")));
        }
        let hw = h * w;
        let lv = self.value(logits).data();
        let mut out = vec![T::zero(); lv.len()];
        for (src, dst) in lv.chunks(hw).zip(out.chunks_mut(hw)) {
            let m = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                z = z + *d;
            }
            dst.iter_mut().for_each(|d| *d = *d / z);
        }
        let out = Tensor::new(&[n, k, h, w], out)?;
        self.push("spatial_softmax", out, Op::SpatialSoftmax(logits))
    }

    /// Probability-weighted mean position `[N,K,2]` (x then y) of each map on
    /// the normalized `[-1,1]^2` grid.
    pub fn expected_coords(&mut self, probs: Var) -> Result<Var> {
        let (n, k, h, w) = self.value(probs).dims4("expected_coords")?;
        let gx: Vec<T> = grid(w);
        let gy: Vec<T> = grid(h);
        let pv = self.value(probs).data();
        let mut out = Vec::with_capacity(n * k * 2);
        for map in pv.chunks(h * w) {
            let (mut cx, mut cy) = (T::zero(), T::zero());
            for i in 0..h {
                for j in 0..w {
                    let p = map[i * w + j];
                    cx = cx + p * gx[j];
                    cy = cy + p * gy[i];
                }
            }
            out.push(cx);
            out.push(cy);
        }
        let out = Tensor::new(&[n, k, 2], out)?;
        self.push("expected_coords", out, Op::ExpectedCoords(probs))
    }

    /// Softmax probabilities and their expected coordinates.
    pub fn spatial_softmax_keypoints(&mut self, logits: Var) -> Result<(Var, Var)> {
        let probs = self.spatial_softmax(logits)?;
        let coords = self.expected_coords(probs)?;
        Ok((coords, probs))
    }

    /// Isotropic Gaussian maps `exp(-|g - c|^2 / (2 sigma_k^2))` on an
    /// `h x w` normalized grid. `coords: [N,K,2]`, `sigma: [K]`.
    pub fn gaussian_render(&mut self, coords: Var, sigma: Var, h: usize, w: usize) -> Result<Var> {
        let cs = self.shape(coords).to_vec();
        let [n, k, 2] = cs[..] else {
            return Err(Error::dim("gaussian_render", format!("coords must be [N,K,2], got {cs:?}")));
        };
        if self.shape(sigma) != [k] {
            return Err(Error::dim(
                "gaussian_render",
                format!("sigma shape {:?}, expected [{k}]", self.shape(sigma)),
            ));
        }
        let sv = self.value(sigma).data();
        if sv.iter().any(|&s| s <= T::zero()) {
            return Err(Error::InvalidArgument("gaussian_render: sigma must be positive".into()));
        }
        let gx: Vec<T> = grid(w);
        let gy: Vec<T> = grid(h);
        let cv = self.value(coords).data();
        let two = T::from_f64c(2.0);
        let mut out = vec![T::zero(); n * k * h * w];
        for (idx, map) in out.chunks_mut(h * w).enumerate() {
            let (cx, cy) = (cv[idx * 2], cv[idx * 2 + 1]);
            let s = sv[idx % k];
            let denom = two * s * s;
            for i in 0..h {
                let dy = gy[i] - cy;
                for j in 0..w {
                    let dx = gx[j] - cx;
                    map[i * w + j] = (-(dx * dx + dy * dy) / denom).exp();
                }
            }
        }
        let out = Tensor::new(&[n, k, h, w], out)?;
        self.push("gaussian_render", out, Op::GaussianRender { coords, sigma })
    }

    /// Bilinear upsampling by an integer factor, align-corners convention.
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let (n, c, h, w) = self.value(x).dims4("bilinear_upsample")?;
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let rows: Vec<_> = (0..oh).map(|i| lerp_taps(i, oh, h)).collect();
        let cols: Vec<_> = (0..ow).map(|j| lerp_taps(j, ow, w)).collect();
        for (src, dst) in xv.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for (i, &(y0, y1, fy)) in rows.iter().enumerate() {
                let fy = T::from_f64c(fy);
                for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let fx = T::from_f64c(fx);
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[i * ow + j] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        self.push("bilinear_upsample", out, Op::Upsample { x })
    }

    /// Mean squared error; `target` must not require a gradient.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::dim(
                "mse_loss",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        if self.requires_grad(target) {
            return Err(Error::InvalidArgument("mse_loss: target must be detached".into()));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(s / T::from_usize(p.len()).unwrap());
        self.push("mse_loss", out, Op::Mse { pred, target })
    }

    /// `[N,C,H,W] -> [N,C,1,1]` mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let hw = T::from_usize(h * w).unwrap();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / hw)
            .collect();
        let out = Tensor::new(&[n, c, 1, 1], out)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x))
    }

    /// `[N,C,H,W] -> [N,C,1,1]` max.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_max_pool")?;
        let mut argmax = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for (pi, p) in self.value(x).data().chunks(h * w).enumerate() {
            let (best, v) = argmax_of(p);
            argmax.push(pi * h * w + best);
            out.push(v);
        }
        let out = Tensor::new(&[n, c, 1, 1], out)?;
        self.mix_kinks(argmax.iter().map(|&a| a as u64));
        self.push("global_max_pool", out, Op::GlobalMaxPool { x, argmax })
    }

    /// `[N,C,H,W] -> [N,1,H,W]` mean over channels.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("channel_mean")?;
        let hw = h * w;
        let xv = self.value(x).data();
        let cf = T::from_usize(c).unwrap();
        let mut out = vec![T::zero(); n * hw];
        for i in 0..n {
            for ch in 0..c {
                let src = &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                for (o, &v) in out[i * hw..(i + 1) * hw].iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / cf);
        let out = Tensor::new(&[n, 1, h, w], out)?;
        self.push("channel_mean", out, Op::ChannelMean(x))
    }

    /// `[N,C,H,W] -> [N,1,H,W]` max over channels.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("channel_max")?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::neg_infinity(); n * hw];
        let mut argmax = vec![0usize; n * hw];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for p in 0..hw {
                    let v = xv[base + p];
                    if v > out[i * hw + p] {
                        out[i * hw + p] = v;
                        argmax[i * hw + p] = base + p;
                    }
                }
            }
        }
        let out = Tensor::new(&[n, 1, h, w], out)?;
        self.mix_kinks(argmax.iter().map(|&a| a as u64));
        self.push("channel_max", out, Op::ChannelMax { x, argmax })
    }

    /// Concatenates `[N,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut total_c = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4("concat_channels")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::dim("concat_channels", "N/H/W differ between inputs"));
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for i in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[i * c * hw..(i + 1) * c * hw]);
            }
        }
        let out = Tensor::new(&[n, total_c, h, w], out)?;
        self.push("concat_channels", out, Op::ConcatChannels(xs.to_vec()))
    }
}

fn argmax_of<T: Scalar>(p: &[T]) -> (usize, T) {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    (best, p[best])
}

pub(crate) fn backward_spatial<T: Scalar>(acc: &mut Accum<'_, T>, node: usize, g: &[T]) -> Result<()> {
    let nodes = acc.nodes;
    let out = nodes[node].value.data();
    match &nodes[node].op {
        Op::SpatialSoftmax(logits) => {
            let (_, _, h, w) = nodes[logits.0].value.dims4("spatial_softmax")?;
            let mut gl = vec![T::zero(); g.len()];
            for ((p, gp), d) in out.chunks(h * w).zip(g.chunks(h * w)).zip(gl.chunks_mut(h * w)) {
                let dot: T = p.iter().zip(gp).map(|(&a, &b)| a * b).sum();
                for ((d, &pi), &gi) in d.iter_mut().zip(p).zip(gp) {
                    *d = pi * (gi - dot);
                }
            }
            acc.add(*logits, &gl);
        }
        Op::ExpectedCoords(probs) => {
            let (_, _, h, w) = nodes[probs.0].value.dims4("expected_coords")?;
            let gx: Vec<T> = grid(w);
            let gy: Vec<T> = grid(h);
            let mut gp = vec![T::zero(); nodes[probs.0].value.len()];
            for (m, d) in gp.chunks_mut(h * w).enumerate() {
                let (dcx, dcy) = (g[m * 2], g[m * 2 + 1]);
                for i in 0..h {
                    for j in 0..w {
                        d[i * w + j] = dcx * gx[j] + dcy * gy[i];
                    }
                }
            }
            acc.add(*probs, &gp);
        }
        Op::GaussianRender { coords, sigma } => {
            let (coords, sigma) = (*coords, *sigma);
            let (n, k, h, w) = nodes[node].value.dims4("gaussian_render")?;
            let gx: Vec<T> = grid(w);
            let gy: Vec<T> = grid(h);
            let cv = nodes[coords.0].value.data();
            let sv = nodes[sigma.0].value.data();
            let mut gc = vec![T::zero(); n * k * 2];
            let mut gs = vec![T::zero(); k];
            for idx in 0..n * k {
                let (cx, cy) = (cv[idx * 2], cv[idx * 2 + 1]);
                let s = sv[idx % k];
                let s2 = s * s;
                let (mut acx, mut acy, mut asg) = (T::zero(), T::zero(), T::zero());
                let base = idx * h * w;
                for i in 0..h {
                    let dy = gy[i] - cy;
                    for j in 0..w {
                        let dx = gx[j] - cx;
                        let t = g[base + i * w + j] * out[base + i * w + j];
                        acx = acx + t * dx;
                        acy = acy + t * dy;
                        asg = asg + t * (dx * dx + dy * dy);
                    }
                }
                gc[idx * 2] = acx / s2;
                gc[idx * 2 + 1] = acy / s2;
                gs[idx % k] = gs[idx % k] + asg / (s2 * s);
            }
            acc.add(coords, &gc);
            acc.add(sigma, &gs);
        }
        Op::Upsample { x, .. } => {
            let x = *x;
            let (_, _, h, w) = nodes[x.0].value.dims4("bilinear_upsample")?;
            let (_, _, oh, ow) = nodes[node].value.dims4("bilinear_upsample")?;
            let rows: Vec<_> = (0..oh).map(|i| lerp_taps(i, oh, h)).collect();
            let cols: Vec<_> = (0..ow).map(|j| lerp_taps(j, ow, w)).collect();
            let mut gx = vec![T::zero(); nodes[x.0].value.len()];
            for (src, dst) in g.chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
                for (i, &(y0, y1, fy)) in rows.iter().enumerate() {
                    let fy = T::from_f64c(fy);
                    for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
                        let fx = T::from_f64c(fx);
                        let v = src[i * ow + j];
                        dst[y0 * w + x0] = dst[y0 * w + x0] + v * (T::one() - fy) * (T::one() - fx);
                        dst[y0 * w + x1] = dst[y0 * w + x1] + v * (T::one() - fy) * fx;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + v * fy * (T::one() - fx);
                        dst[y1 * w + x1] = dst[y1 * w + x1] + v * fy * fx;
                    }
                }
            }
            acc.add(x, &gx);
        }
        Op::Mse { pred, target } => {
            let p = nodes[pred.0].value.data();
            let t = nodes[target.0].value.data();
            let k = T::from_f64c(2.0) * g[0] / T::from_usize(p.len()).unwrap();
            let gp: Vec<T> = p.iter().zip(t).map(|(&a, &b)| k * (a - b)).collect();
            acc.add(*pred, &gp);
        }
        Op::GlobalAvgPool(x) => {
            let (_, _, h, w) = nodes[x.0].value.dims4("global_avg_pool")?;
            let hw = T::from_usize(h * w).unwrap();
            let gx: Vec<T> = g.iter().flat_map(|&gi| std::iter::repeat_n(gi / hw, h * w)).collect();
            acc.add(*x, &gx);
        }
        Op::GlobalMaxPool { x, argmax } | Op::ChannelMax { x, argmax } => {
            let x = *x;
            if let Some(buf) = acc.buf(x) {
                for (&gi, &a) in g.iter().zip(argmax) {
                    buf[a] = buf[a] + gi;
                }
            }
        }
        Op::ChannelMean(x) => {
            let (n, c, h, w) = nodes[x.0].value.dims4("channel_mean")?;
            let hw = h * w;
            let cf = T::from_usize(c).unwrap();
            let mut gx = vec![T::zero(); n * c * hw];
            for i in 0..n {
                for ch in 0..c {
                    for p in 0..hw {
                        gx[(i * c + ch) * hw + p] = g[i * hw + p] / cf;
                    }
                }
            }
            acc.add(*x, &gx);
        }
        Op::ConcatChannels(xs) => {
            let (n, total_c, h, w) = nodes[node].value.dims4("concat_channels")?;
            let hw = h * w;
            let mut offset = 0;
            for &v in xs {
                let c = nodes[v.0].value.shape()[1];
                if acc.wants(v) {
                    let mut gv = Vec::with_capacity(n * c * hw);
                    for i in 0..n {
                        let start = (i * total_c + offset) * hw;
                        gv.extend_from_slice(&g[start..start + c * hw]);
                    }
                    acc.add(v, &gv);
                }
                offset += c;
            }
        }
        _ => unreachable!("not a spatial op"),
    }
    Ok(())
}
