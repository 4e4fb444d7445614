//! Volumetric network layers on single-sample `[C, D0, D1, D2]` tensors.

use super::{Graph, Op, Tensor, Var};
use crate::error::shape_err;
use crate::Result;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape[..] {
        [c, a, b, d] => Ok([c, a, b, d]),
        _ => Err(shape_err!("{what} expects [C, D0, D1, D2], got {:?}", t.shape)),
    }
}

/// Output-index range along one axis for kernel tap `tap`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, tap: usize, pad: usize) -> (usize, usize) {
    // input index = out + tap - pad must lie in [0, in_len)
    let lo = pad.saturating_sub(tap);
    let hi = (in_len + pad).saturating_sub(tap).min(out_len);
    (lo, hi.max(lo))
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    pad: usize,
    ind: [usize; 3],
    outd: [usize; 3],
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, pad: usize) -> Result<Self> {
        let [cin, a, b, d] = dims4(x, "conv3d input")?;
        let (cout, wc, k) = match w.shape[..] {
            [o, c, k0, k1, k2] if k0 == k1 && k1 == k2 => (o, c, k0),
            _ => return Err(shape_err!("conv3d weight must be [O, C, k, k, k], got {:?}", w.shape)),
        };
        if wc != cin {
            return Err(shape_err!("conv3d: input has {cin} channels, weight expects {wc}"));
        }
        let ind = [a, b, d];
        let mut outd = [0; 3];
        for i in 0..3 {
            if ind[i] + 2 * pad < k {
                return Err(shape_err!("conv3d: kernel {k} larger than padded input {:?}", ind));
            }
            outd[i] = ind[i] + 2 * pad - k + 1;
        }
        Ok(ConvGeom {
            cin,
            cout,
            k,
            pad,
            ind,
            outd,
        })
    }

    /// Calls `f(weight_index, out_start, in_start, len)` for every contiguous
    /// D2 row segment touched by kernel tap `weight_index`.
    #[inline]
    fn for_each_row(&self, o: usize, c: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [i0n, i1n, i2n] = self.ind;
        let [o0n, o1n, o2n] = self.outd;
        let k = self.k;
        let pad = self.pad;
        for a in 0..k {
            let (z0lo, z0hi) = valid_range(o0n, i0n, a, pad);
            for b in 0..k {
                let (z1lo, z1hi) = valid_range(o1n, i1n, b, pad);
                for e in 0..k {
                    let (z2lo, z2hi) = valid_range(o2n, i2n, e, pad);
                    if z2lo >= z2hi {
                        continue;
                    }
                    let widx = (((o * self.cin + c) * k + a) * k + b) * k + e;
                    for z0 in z0lo..z0hi {
                        let x0 = z0 + a - pad;
                        for z1 in z1lo..z1hi {
                            let x1 = z1 + b - pad;
                            let out_row = ((o * o0n + z0) * o1n + z1) * o2n;
                            let in_row = ((c * i0n + x0) * i1n + x1) * i2n;
                            f(widx, out_row + z2lo, in_row + z2lo + e - pad, z2hi - z2lo);
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv3d_forward(x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x, w, pad)?;
    let plane = g.outd.iter().product::<usize>();
    let mut out = vec![0.0; g.cout * plane];
    for o in 0..g.cout {
        for c in 0..g.cin {
            g.for_each_row(o, c, |widx, os, is, len| {
                let wv = w.data[widx];
                let dst = &mut out[os..os + len];
                let src = &x.data[is..is + len];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            });
        }
    }
    Ok(Tensor {
        shape: vec![g.cout, g.outd[0], g.outd[1], g.outd[2]],
        data: out,
    })
}

pub(super) fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    pad: usize,
    gy: &Tensor,
    want_input: bool,
) -> (Option<Tensor>, Tensor) {
    let g = ConvGeom::new(x, w, pad).expect("validated in forward");
    let mut gw = vec![0.0; w.data.len()];
    let mut gx = if want_input {
        Some(vec![0.0; x.data.len()])
    } else {
        None
    };
    for o in 0..g.cout {
        for c in 0..g.cin {
            g.for_each_row(o, c, |widx, os, is, len| {
                let go = &gy.data[os..os + len];
                let src = &x.data[is..is + len];
                gw[widx] += go.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                if let Some(gx) = gx.as_mut() {
                    let wv = w.data[widx];
                    for (d, s) in gx[is..is + len].iter_mut().zip(go) {
                        *d += wv * s;
                    }
                }
            });
        }
    }
    (
        gx.map(|data| Tensor {
            shape: x.shape.clone(),
            data,
        }),
        Tensor {
            shape: w.shape.clone(),
            data: gw,
        },
    )
}

pub(super) fn instance_norm_backward(
    gamma: &Tensor,
    normalized: &[f64],
    inv_std: &[f64],
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gamma.data.len();
    let n = normalized.len() / c;
    let mut gx = vec![0.0; normalized.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let xh = &normalized[ch * n..(ch + 1) * n];
        let dy = &gy.data[ch * n..(ch + 1) * n];
        let sum_dy: f64 = dy.iter().sum();
        let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
        gg[ch] = sum_dy_xh;
        gb[ch] = sum_dy;
        let k = gamma.data[ch] * inv_std[ch];
        let mean_dy = sum_dy / n as f64;
        let mean_dy_xh = sum_dy_xh / n as f64;
        for ((g, &d), &x) in gx[ch * n..(ch + 1) * n].iter_mut().zip(dy).zip(xh) {
            *g = k * (d - mean_dy - x * mean_dy_xh);
        }
    }
    (
        Tensor {
            shape: gy.shape.clone(),
            data: gx,
        },
        Tensor {
            shape: gamma.shape.clone(),
            data: gg,
        },
        Tensor {
            shape: gamma.shape.clone(),
            data: gb,
        },
    )
}

pub(super) fn max_pool_backward(shape: &[usize], argmax: &[usize], gy: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(shape.to_vec());
    for (&src, &d) in argmax.iter().zip(&gy.data) {
        g.data[src] += d;
    }
    g
}

impl Graph {
    /// Stride-1 3D convolution, zero padding `pad` on every side, no bias.
    pub fn conv3d(&mut self, input: Var, weight: Var, pad: usize) -> Result<Var> {
        let v = conv3d_forward(self.value(input), self.value(weight), pad)?;
        self.push(v, Op::Conv3d { input, weight, pad }, &[input, weight])
    }

    /// Per-channel normalization over all voxels with learned scale and shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let [c, a, b, d] = dims4(t, "instance_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "instance_norm: {c} channels but scale {:?} / shift {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let n = a * b * d;
        let mut normalized = vec![0.0; t.data.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; t.data.len()];
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        for ch in 0..c {
            let xs = &t.data[ch * n..(ch + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            inv_std[ch] = is;
            for i in 0..n {
                let xh = (xs[i] - mean) * is;
                normalized[ch * n + i] = xh;
                out[ch * n + i] = gv[ch] * xh + bv[ch];
            }
        }
        self.push(
            Tensor {
                shape: t.shape.clone(),
                data: out,
            },
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// 2x2x2 max pooling with stride 2; ties route to the first maximum in scan order.
    pub fn max_pool3d(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [c, a, b, d] = dims4(t, "max_pool3d")?;
        let (oa, ob, od) = (a / 2, b / 2, d / 2);
        if oa == 0 || ob == 0 || od == 0 {
            return Err(shape_err!("max_pool3d: input {:?} too small", t.shape));
        }
        let mut out = Vec::with_capacity(c * oa * ob * od);
        let mut argmax = Vec::with_capacity(out.capacity());
        for ch in 0..c {
            for i in 0..oa {
                for j in 0..ob {
                    for k in 0..od {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for di in 0..2 {
                            for dj in 0..2 {
                                for dk in 0..2 {
                                    let idx = ((ch * a + 2 * i + di) * b + 2 * j + dj) * d
                                        + 2 * k
                                        + dk;
                                    if t.data[idx] > best {
                                        best = t.data[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        self.push(
            Tensor {
                shape: vec![c, oa, ob, od],
                data: out,
            },
            Op::MaxPool { x, argmax },
            &[x],
        )
    }
}
