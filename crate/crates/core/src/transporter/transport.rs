//! Feature transport: move source features away from source keypoints and
//! paste target features at target keypoints, one keypoint at a time.

use crate::error::{Error, Result};
use crate::numerics::graph::{Accum, Graph, Op, Var};
use crate::numerics::{Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    /// `eps <- (1 - w_k phi_s_k)(1 - w_k phi_t_k) eps + w_k phi_t_k psi_t`
    /// for k in index order, starting from `eps = psi_s`.
    ///
    /// `psi_*: [N,C,H,W]`, `phi_*: [N,K,H,W]`, `weights: [K]` or `None` for
    /// unit weights.
    pub fn transport(&mut self, psi_s: Var, psi_t: Var, phi_s: Var, phi_t: Var, weights: Option<Var>) -> Result<Var> {
        let (n, c, h, w) = self.value(psi_s).dims4("transport")?;
        if self.shape(psi_t) != self.shape(psi_s) {
            return Err(Error::dim(
                "transport",
                format!("source features {:?} vs target features {:?}", self.shape(psi_s), self.shape(psi_t)),
            ));
        }
        let (pn, k, ph, pw) = self.value(phi_s).dims4("transport")?;
        if self.shape(phi_t) != self.shape(phi_s) || (pn, ph, pw) != (n, h, w) {
            return Err(Error::dim(
                "transport",
                format!(
                    "heatmaps {:?} / {:?} do not match features {:?}",
                    self.shape(phi_s),
                    self.shape(phi_t),
                    self.shape(psi_s)
                ),
            ));
        }
        let wts: Vec<T> = match weights {
            Some(v) => {
                if self.shape(v) != [k] {
                    return Err(Error::dim(
                        "transport",
                        format!("weights {:?}, expected [{k}]", self.shape(v)),
                    ));
                }
                self.value(v).data().to_vec()
            }
            None => vec![T::one(); k],
        };
        let hw = h * w;
        let ps = self.value(phi_s).data();
        let pt = self.value(phi_t).data();
        let yt = self.value(psi_t).data();
        let mut eps = self.value(psi_s).data().to_vec();
        let mut history = Vec::with_capacity(k);
        for kk in 0..k {
            history.push(eps.clone());
            let wk = wts[kk];
            for i in 0..n {
                let hm = (i * k + kk) * hw;
                for ch in 0..c {
                    let f = (i * c + ch) * hw;
                    for p in 0..hw {
                        let a = wk * ps[hm + p];
                        let b = wk * pt[hm + p];
                        eps[f + p] = (T::one() - a) * (T::one() - b) * eps[f + p] + b * yt[f + p];
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], eps)?;
        self.push(
            "transport",
            out,
            Op::Transport {
                psi_s,
                psi_t,
                phi_s,
                phi_t,
                weights,
                history,
            },
        )
    }
}

pub(crate) fn backward_transport<T: Scalar>(acc: &mut Accum<'_, T>, node: usize, gout: &[T]) -> Result<()> {
    let nodes = acc.nodes;
    let Op::Transport {
        psi_s,
        psi_t,
        phi_s,
        phi_t,
        weights,
        history,
    } = &nodes[node].op
    else {
        unreachable!("backward_transport on another op");
    };
    let (psi_s, psi_t, phi_s, phi_t, weights) = (*psi_s, *psi_t, *phi_s, *phi_t, *weights);
    let shape = acc.value(psi_s).shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let k = acc.value(phi_s).shape()[1];
    let ps = acc.value(phi_s).data();
    let pt = acc.value(phi_t).data();
    let yt = acc.value(psi_t).data();
    let wts: Vec<T> = match weights {
        Some(v) => acc.value(v).data().to_vec(),
        None => vec![T::one(); k],
    };

    let mut g = gout.to_vec();
    let mut d_yt = vec![T::zero(); g.len()];
    let mut d_ps = vec![T::zero(); ps.len()];
    let mut d_pt = vec![T::zero(); pt.len()];
    let mut d_w = vec![T::zero(); k];
    for kk in (0..k).rev() {
        let eps = &history[kk];
        let wk = wts[kk];
        for i in 0..n {
            let hm = (i * k + kk) * hw;
            for p in 0..hw {
                let a = wk * ps[hm + p];
                let b = wk * pt[hm + p];
                let (mut da, mut db) = (T::zero(), T::zero());
                for ch in 0..c {
                    let f = (i * c + ch) * hw + p;
                    let gi = g[f];
                    d_yt[f] = d_yt[f] + gi * b;
                    da = da - gi * (T::one() - b) * eps[f];
                    db = db + gi * (yt[f] - (T::one() - a) * eps[f]);
                    g[f] = gi * (T::one() - a) * (T::one() - b);
                }
                d_ps[hm + p] = wk * da;
                d_pt[hm + p] = wk * db;
                d_w[kk] = d_w[kk] + ps[hm + p] * da + pt[hm + p] * db;
            }
        }
    }
    acc.add(psi_s, &g);
    acc.add(psi_t, &d_yt);
    acc.add(phi_s, &d_ps);
    acc.add(phi_t, &d_pt);
    if let Some(v) = weights {
        acc.add(v, &d_w);
    }
    Ok(())
}
