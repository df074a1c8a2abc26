//! 2-d convolution (im2col + GEMM) and batch normalisation.

use super::graph::{Accum, Graph, Op, Var};
use super::tensor::{Scalar, Tensor};
use super::{ConvGeom, LayerKind, LayerSpec};
use crate::error::{Error, Result};

/// Batchnorm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

// Output columns `ox` whose input column `ox*stride + kj - pad` lies in `[0, w)`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let off = kj as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi = if off >= g.w as isize { 0 } else { ((g.w as isize - off + s - 1) / s) as usize };
    (lo.min(g.ow), hi.min(g.ow).max(lo.min(g.ow)))
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ohw = g.oh * g.ow;
    let h = g.h as isize;
    for c in 0..g.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, s) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ohw = g.oh * g.ow;
    let h = g.h as isize;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                let start = lo * g.stride + kj - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    for (d, &s) in dst[start..].iter_mut().step_by(g.stride).zip(line) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of `x: [N,C,H,W]` with `w: [OC,C,KH,KW]` plus an
    /// optional per-channel bias `[OC]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &LayerSpec) -> Result<Var> {
        if spec.kind != LayerKind::Conv2d {
            return Err(Error::InvalidArgument(format!(
                "conv2d called with a {:?} layer spec",
                spec.kind
            )));
        }
        let (n, c, h, wd) = self.value(x).dims4("conv2d")?;
        let geom = spec.conv_geom(h, wd)?;
        if c != spec.in_channels {
            return Err(Error::dim(
                "conv2d",
                format!("input channels (axis 1) {c} != spec in_channels {}", spec.in_channels),
            ));
        }
        let want_w = [spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1];
        if self.shape(w) != want_w {
            return Err(Error::dim(
                "conv2d",
                format!("weight shape {:?}, expected {want_w:?}", self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [spec.out_channels] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), spec.out_channels),
                ));
            }
        }

        let ckk = geom.in_c * geom.kh * geom.kw;
        let ohw = geom.oh * geom.ow;
        let mut out = vec![T::zero(); n * geom.out_c * ohw];
        let mut cols = vec![T::zero(); ckk * ohw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &geom, &mut cols);
            let dst = &mut out[i * geom.out_c * ohw..(i + 1) * geom.out_c * ohw];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (oc, chunk) in dst.chunks_mut(ohw).enumerate() {
                    chunk.fill(bv[oc]);
                }
            }
            T::gemm(
                geom.out_c,
                ckk,
                ohw,
                T::one(),
                wv,
                (ckk as isize, 1),
                &cols,
                (ohw as isize, 1),
                T::one(),
                dst,
                (ohw as isize, 1),
            );
        }
        let out = Tensor::new(&[n, geom.out_c, geom.oh, geom.ow], out)?;
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom })
    }

    /// Train-mode batch normalisation over `(N, H, W)` per channel.
    ///
    /// Returns the output and the batch mean / unbiased variance used to
    /// update running statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, h, w) = self.value(x).dims4("batchnorm2d")?;
        if n * h * w < 2 {
            return Err(Error::InvalidArgument(
                "batchnorm2d: train mode needs more than one value per channel".into(),
            ));
        }
        check_affine(self, gamma, beta, c)?;
        let hw = h * w;
        let m = n * hw;
        let mf = T::from_usize(m).unwrap();
        let eps = T::from_f64c(BN_EPS);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                s = s + xv[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let mu = s / mf;
            let mut ss = T::zero();
            for i in 0..n {
                for &v in &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    ss = ss + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = ss / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for j in r {
                    let xh = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let unbiased: Vec<T> = var
            .iter()
            .map(|&v| v * mf / T::from_usize(m - 1).unwrap())
            .collect();
        let out = Tensor::new(&[n, c, h, w], out)?;
        let y = self.push(
            "batchnorm2d",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )?;
        Ok((y, mean, unbiased))
    }

    /// Eval-mode batch normalisation with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("batchnorm2d")?;
        check_affine(self, gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batchnorm2d", "running statistics length != channels"));
        }
        let eps = T::from_f64c(BN_EPS);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let hw = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (j, (&v, (xh, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (j / hw) % c;
            *xh = (v - running_mean[ch]) * inv_std[ch];
            *o = gv[ch] * *xh + bv[ch];
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        self.push(
            "batchnorm2d_eval",
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }
}

fn check_affine<T: Scalar>(g: &Graph<T>, gamma: Var, beta: Var, c: usize) -> Result<()> {
    if g.shape(gamma) != [c] || g.shape(beta) != [c] {
        return Err(Error::dim(
            "batchnorm2d",
            format!(
                "scale {:?} / shift {:?} must both be [{c}]",
                g.shape(gamma),
                g.shape(beta)
            ),
        ));
    }
    Ok(())
}

pub(crate) fn backward_conv<T: Scalar>(acc: &mut Accum<'_, T>, node: usize, gout: &[T]) -> Result<()> {
    let nodes = acc.nodes;
    let Op::Conv2d { x, w, b, geom } = &nodes[node].op else {
        unreachable!()
    };
    let (x, w, b, geom) = (*x, *w, *b, *geom);
    let n = acc.value(x).shape()[0];
    let ckk = geom.in_c * geom.kh * geom.kw;
    let ohw = geom.oh * geom.ow;
    let in_len = geom.in_c * geom.h * geom.w;

    if let Some(b) = b {
        if acc.wants(b) {
            let mut gb = vec![T::zero(); geom.out_c];
            for i in 0..n {
                for (oc, g) in gb.iter_mut().enumerate() {
                    let off = (i * geom.out_c + oc) * ohw;
                    *g = *g + gout[off..off + ohw].iter().copied().sum::<T>();
                }
            }
            acc.add(b, &gb);
        }
    }

    let want_w = acc.wants(w);
    let want_x = acc.wants(x);
    if !want_w && !want_x {
        return Ok(());
    }
    let xv = nodes[x.0].value.data();
    let wv = nodes[w.0].value.data();
    let mut cols = vec![T::zero(); ckk * ohw];
    let mut gw = vec![T::zero(); geom.out_c * ckk];
    let mut gx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
    for i in 0..n {
        let go = &gout[i * geom.out_c * ohw..(i + 1) * geom.out_c * ohw];
        if want_w {
            im2col(&xv[i * in_len..(i + 1) * in_len], &geom, &mut cols);
            // gw += go [OC, OHW] * cols^T [OHW, CKK]
            T::gemm(
                geom.out_c,
                ohw,
                ckk,
                T::one(),
                go,
                (ohw as isize, 1),
                &cols,
                (1, ohw as isize),
                T::one(),
                &mut gw,
                (ckk as isize, 1),
            );
        }
        if want_x {
            // dcols = w^T [CKK, OC] * go [OC, OHW]
            T::gemm(
                ckk,
                geom.out_c,
                ohw,
                T::one(),
                wv,
                (1, ckk as isize),
                go,
                (ohw as isize, 1),
                T::zero(),
                &mut cols,
                (ohw as isize, 1),
            );
            col2im(&cols, &geom, &mut gx[i * in_len..(i + 1) * in_len]);
        }
    }
    if want_w {
        acc.add(w, &gw);
    }
    if want_x {
        acc.add(x, &gx);
    }
    Ok(())
}

pub(crate) fn backward_batchnorm<T: Scalar>(acc: &mut Accum<'_, T>, node: usize, g: &[T]) -> Result<()> {
    let nodes = acc.nodes;
    let (x, gamma, beta, xhat, inv_std, train) = match &nodes[node].op {
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => (*x, *gamma, *beta, xhat, inv_std, true),
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => (*x, *gamma, *beta, xhat, inv_std, false),
        _ => unreachable!(),
    };
    let shape = nodes[x.0].value.shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let gv = nodes[gamma.0].value.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                dgamma[ch] = dgamma[ch] + g[j] * xhat[j];
                dbeta[ch] = dbeta[ch] + g[j];
            }
        }
    }
    if acc.wants(x) {
        let mut dx = vec![T::zero(); g.len()];
        if train {
            let m = T::from_usize(n * hw).unwrap();
            for ch in 0..c {
                // sums of dxhat and dxhat * xhat over the channel
                let s1 = dbeta[ch] * gv[ch];
                let s2 = dgamma[ch] * gv[ch];
                let k = inv_std[ch] / m;
                for i in 0..n {
                    let off = (i * c + ch) * hw;
                    for j in off..off + hw {
                        let dxh = g[j] * gv[ch];
                        dx[j] = k * (m * dxh - s1 - xhat[j] * s2);
                    }
                }
            }
        } else {
            for (j, d) in dx.iter_mut().enumerate() {
                let ch = (j / hw) % c;
                *d = g[j] * gv[ch] * inv_std[ch];
            }
        }
        acc.add(x, &dx);
    }
    acc.add(gamma, &dgamma);
    acc.add(beta, &dbeta);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4("t").unwrap();
        let (oc, _, kh, kw) = w.dims4("t").unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, oc, oh, ow]);
        for i in 0..n {
            for o in 0..oc {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = b[o];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (y * stride + ki) as isize - pad as isize;
                                    let ix = (xx * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((i * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * c + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((i * oc + o) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut g = Graph::<f32>::new();
        let spec = LayerSpec::conv(1, 2, 3, 1, 1);
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::full(&[2, 1, 3, 3], 0.7));
        let b = g.constant(Tensor::new(&[2], vec![0.25, -1.5]).unwrap());
        let y = g.conv2d(x, w, Some(b), &spec).unwrap();
        let out = g.value(y).data();
        assert!(out[..9].iter().all(|&v| v == 0.25));
        assert!(out[9..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut g = Graph::<f32>::new();
        let spec = LayerSpec::conv(1, 1, 3, 1, 1);
        let data: Vec<f32> = (0..9).map(|v| v as f32 * 0.5 - 1.0).collect();
        let x = g.constant(Tensor::new(&[1, 1, 3, 3], data.clone()).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(Tensor::new(&[1, 1, 3, 3], k).unwrap());
        let y = g.conv2d(x, w, None, &spec).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn strided_conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[1, 2, 8, 8], &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], &mut rng);
        let b = vec![0.1, -0.2, 0.3];
        let expected = naive_conv(&x, &w, &b, 2, 1);
        let mut g = Graph::<f64>::new();
        let spec = LayerSpec::conv(2, 3, 3, 2, 1);
        let (xv, wv) = (g.constant(x), g.constant(w));
        let bv = g.constant(Tensor::new(&[3], b).unwrap());
        let y = g.conv2d(xv, wv, Some(bv), &spec).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 4, 4]);
        assert!(g.value(y).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let mut g = Graph::<f32>::new();
        let spec = LayerSpec::conv(3, 2, 3, 1, 1);
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let err = g.conv2d(x, w, None, &spec).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
    }

    #[test]
    fn batchnorm_train_normalises_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f64>::new();
        let mut x = Tensor::<f64>::randn(&[4, 2, 5, 5], &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v = 3.0 * *v + 7.0);
        let x = g.constant(x);
        let gamma = g.constant(Tensor::new(&[2], vec![2.0, 0.5]).unwrap());
        let beta = g.constant(Tensor::new(&[2], vec![-1.0, 4.0]).unwrap());
        let (y, _, _) = g.batchnorm_train(x, gamma, beta).unwrap();
        let v = g.value(y).data();
        for (ch, (scale, shift)) in [(2.0, -1.0), (0.5, 4.0)].into_iter().enumerate() {
            let vals: Vec<f64> = (0..4)
                .flat_map(|i| v[(i * 2 + ch) * 25..(i * 2 + ch + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((m - shift).abs() < 1e-4);
            assert!((var - scale * scale).abs() < 1e-4 * scale * scale + 1e-4);
        }
    }

    #[test]
    fn batchnorm_constant_channel_outputs_shift() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2, 1, 3, 3], 5.0));
        let gamma = g.constant(Tensor::full(&[1], 3.0));
        let beta = g.constant(Tensor::full(&[1], 0.25));
        let (y, _, _) = g.batchnorm_train(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn batchnorm_standard_normal_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn(&[8, 1, 16, 16], &mut rng));
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::full(&[1], 0.0));
        let (y, _, _) = g.batchnorm_train(x, gamma, beta).unwrap();
        let t = g.value(y);
        let m = t.mean();
        let var = t.data().iter().map(|v| (v - m).powi(2)).sum::<f32>() / t.len() as f32;
        assert!(m.abs() < 0.1);
        assert!((0.8..=1.2).contains(&var));
    }

    #[test]
    fn batchnorm_rejects_single_value_channels() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::full(&[1], 0.0));
        assert!(g.batchnorm_train(x, gamma, beta).is_err());
    }

    #[test]
    fn batchnorm_eval_with_identity_statistics_is_affine() {
        let mut g = Graph::<f64>::new();
        let data = vec![0.5, -2.0, 3.0, 1.0];
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], data.clone()).unwrap());
        let gamma = g.constant(Tensor::full(&[1], 2.0));
        let beta = g.constant(Tensor::full(&[1], 0.5));
        let y = g.batchnorm_eval(x, gamma, beta, &[0.0], &[1.0]).unwrap();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        for (o, i) in g.value(y).data().iter().zip(&data) {
            assert!((o - (2.0 * i * s + 0.5)).abs() < 1e-12);
        }
    }
}
