//! Forward and backward kernels for the layer ops recorded on the tape.
//!
//! All loops run in a fixed order so results are bit-reproducible.

/// Geometry of a 2-D cross-correlation over NCHW data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output extent along one axis, or `None` when the window does not tile
    /// the padded input exactly.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = input + 2 * padding;
        if stride == 0 || kernel == 0 || kernel > padded || (padded - kernel) % stride != 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    /// Range of output columns whose input column `ow*stride + kj - padding` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
        if self.in_w + p <= kj {
            return (0, 0);
        }
        let hi = ((self.in_w - 1 + p - kj) / s + 1).min(self.out_w);
        (lo.min(hi), hi)
    }

    fn input_row(&self, oh: usize, ki: usize) -> Option<usize> {
        let ih = (oh * self.stride + ki) as isize - self.padding as isize;
        (ih >= 0 && (ih as usize) < self.in_h).then_some(ih as usize)
    }
}

pub fn conv2d_forward(x: &[f64], k: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hw, ohw) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let mut out = vec![0.0; g.batch * g.filters * ohw];
    for b in 0..g.batch {
        for f in 0..g.filters {
            let plane = &mut out[(b * g.filters + f) * ohw..][..ohw];
            plane.fill(bias[f]);
            for c in 0..g.in_channels {
                let xin = &x[(b * g.in_channels + c) * hw..][..hw];
                for ki in 0..g.kernel_h {
                    for kj in 0..g.kernel_w {
                        let w = k[((f * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                        let (lo, hi) = g.valid_cols(kj);
                        for oh in 0..g.out_h {
                            let Some(ih) = g.input_row(oh, ki) else { continue };
                            let orow = &mut plane[oh * g.out_w..][..g.out_w];
                            let irow = &xin[ih * g.in_w..][..g.in_w];
                            if g.stride == 1 {
                                let shift = kj as isize - g.padding as isize;
                                let src = &irow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                                for (o, i) in orow[lo..hi].iter_mut().zip(src) {
                                    *o += w * i;
                                }
                            } else {
                                for ow in lo..hi {
                                    orow[ow] += w * irow[ow * g.stride + kj - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (d input, d kernels, d bias).
pub fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    need_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (hw, ohw) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let mut dx = if need_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; g.filters];
    for b in 0..g.batch {
        for f in 0..g.filters {
            let gplane = &grad_out[(b * g.filters + f) * ohw..][..ohw];
            db[f] += gplane.iter().sum::<f64>();
            for c in 0..g.in_channels {
                let xin = &x[(b * g.in_channels + c) * hw..][..hw];
                for ki in 0..g.kernel_h {
                    for kj in 0..g.kernel_w {
                        let widx = ((f * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj;
                        let w = k[widx];
                        let (lo, hi) = g.valid_cols(kj);
                        let mut acc = 0.0;
                        for oh in 0..g.out_h {
                            let Some(ih) = g.input_row(oh, ki) else { continue };
                            let grow = &gplane[oh * g.out_w..][..g.out_w];
                            for ow in lo..hi {
                                let iw = ow * g.stride + kj - g.padding;
                                acc += grow[ow] * xin[ih * g.in_w + iw];
                                if need_input {
                                    dx[(b * g.in_channels + c) * hw + ih * g.in_w + iw] += w * grow[ow];
                                }
                            }
                        }
                        dk[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// out[b,o] = sum_i x[b,i] w[i,o] + bias[o]
pub fn dense_forward(x: &[f64], w: &[f64], bias: &[f64], batch: usize, inp: usize, outp: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * outp);
    for b in 0..batch {
        let mut row = bias.to_vec();
        for i in 0..inp {
            let xv = x[b * inp + i];
            for (r, wv) in row.iter_mut().zip(&w[i * outp..(i + 1) * outp]) {
                *r += xv * wv;
            }
        }
        out.extend(row);
    }
    out
}

pub fn dense_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    batch: usize,
    inp: usize,
    outp: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; batch * inp];
    let mut dw = vec![0.0; inp * outp];
    let mut db = vec![0.0; outp];
    for b in 0..batch {
        let g = &grad_out[b * outp..(b + 1) * outp];
        for (d, gv) in db.iter_mut().zip(g) {
            *d += gv;
        }
        for i in 0..inp {
            let wrow = &w[i * outp..(i + 1) * outp];
            dx[b * inp + i] = wrow.iter().zip(g).map(|(a, c)| a * c).sum();
            let xv = x[b * inp + i];
            for (d, gv) in dw[i * outp..(i + 1) * outp].iter_mut().zip(g) {
                *d += xv * gv;
            }
        }
    }
    (dx, dw, db)
}

/// Geometry of an unpadded pooling window over NCHW data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub size: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Max pooling; also returns the flat input index of each window maximum
/// (first occurrence wins on ties).
pub fn max_pool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let n = g.planes * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base;
                for i in 0..g.size {
                    for j in 0..g.size {
                        let idx = base + (oh * g.stride + i) * g.in_w + ow * g.stride + j;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let norm = 1.0 / (g.size * g.size) as f64;
    let mut out = Vec::with_capacity(g.planes * g.out_h * g.out_w);
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut s = 0.0;
                for i in 0..g.size {
                    for j in 0..g.size {
                        s += x[base + (oh * g.stride + i) * g.in_w + ow * g.stride + j];
                    }
                }
                out.push(s * norm);
            }
        }
    }
    out
}

pub fn avg_pool_backward(grad_out: &[f64], g: &PoolGeom) -> Vec<f64> {
    let norm = 1.0 / (g.size * g.size) as f64;
    let mut dx = vec![0.0; g.planes * g.in_h * g.in_w];
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let gv = grad_out[(p * g.out_h + oh) * g.out_w + ow] * norm;
                for i in 0..g.size {
                    for j in 0..g.size {
                        dx[base + (oh * g.stride + i) * g.in_w + ow * g.stride + j] += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Saved state for the batch-norm backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch_stats: bool,
}

/// Per-channel batch norm over a [B, C, S] layout (S = spatial size, 1 for dense).
/// `stats` is `Some((mean, var))` to use fixed statistics, `None` for batch statistics.
/// Returns output, cache, and the batch (mean, biased var) when computed.
#[allow(clippy::type_complexity)]
pub fn batch_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    layout: (usize, usize, usize),
    eps: f64,
    stats: Option<(&[f64], &[f64])>,
) -> (Vec<f64>, BnCache, Option<(Vec<f64>, Vec<f64>)>) {
    let (bsz, ch, sp) = layout;
    let count = (bsz * sp) as f64;
    let (mean, var, batch) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec(), false),
        None => {
            let mut mean = vec![0.0; ch];
            let mut var = vec![0.0; ch];
            for c in 0..ch {
                let mut s = 0.0;
                for b in 0..bsz {
                    s += x[(b * ch + c) * sp..][..sp].iter().sum::<f64>();
                }
                let m = s / count;
                let mut v = 0.0;
                for b in 0..bsz {
                    v += x[(b * ch + c) * sp..][..sp].iter().map(|t| (t - m) * (t - m)).sum::<f64>();
                }
                mean[c] = m;
                var[c] = v / count;
            }
            (mean, var, true)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..bsz {
        for c in 0..ch {
            let off = (b * ch + c) * sp;
            for s in 0..sp {
                let n = (x[off + s] - mean[c]) * inv_std[c];
                normalized[off + s] = n;
                out[off + s] = gamma[c] * n + beta[c];
            }
        }
    }
    let cache = BnCache { normalized, inv_std, batch_stats: batch };
    (out, cache, batch.then_some((mean, var)))
}

/// Returns (d input, d gamma, d beta).
pub fn batch_norm_backward(
    grad_out: &[f64],
    gamma: &[f64],
    cache: &BnCache,
    layout: (usize, usize, usize),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (bsz, ch, sp) = layout;
    let count = (bsz * sp) as f64;
    let mut dgamma = vec![0.0; ch];
    let mut dbeta = vec![0.0; ch];
    for b in 0..bsz {
        for c in 0..ch {
            let off = (b * ch + c) * sp;
            for s in 0..sp {
                dgamma[c] += grad_out[off + s] * cache.normalized[off + s];
                dbeta[c] += grad_out[off + s];
            }
        }
    }
    let mut dx = vec![0.0; grad_out.len()];
    for b in 0..bsz {
        for c in 0..ch {
            let off = (b * ch + c) * sp;
            let scale = gamma[c] * cache.inv_std[c];
            for s in 0..sp {
                dx[off + s] = if cache.batch_stats {
                    scale
                        * (grad_out[off + s]
                            - dbeta[c] / count
                            - cache.normalized[off + s] * dgamma[c] / count)
                } else {
                    scale * grad_out[off + s]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax of a [B, K] matrix with max subtraction.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

/// Row-wise log-softmax of a [B, K] matrix with max subtraction.
pub fn log_softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(h: usize, w: usize, k: usize, stride: usize, padding: usize) -> ConvGeom {
        ConvGeom {
            batch: 1,
            in_channels: 1,
            in_h: h,
            in_w: w,
            filters: 1,
            kernel_h: k,
            kernel_w: k,
            stride,
            padding,
            out_h: ConvGeom::out_extent(h, k, stride, padding).unwrap(),
            out_w: ConvGeom::out_extent(w, k, stride, padding).unwrap(),
        }
    }

    /// Sliding-window reference with explicit bounds checks.
    fn conv_oracle(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.out_h * g.out_w];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut s = 0.0;
                for i in 0..g.kernel_h {
                    for j in 0..g.kernel_w {
                        let ih = (oh * g.stride + i) as isize - g.padding as isize;
                        let iw = (ow * g.stride + j) as isize - g.padding as isize;
                        if ih >= 0 && iw >= 0 && (ih as usize) < g.in_h && (iw as usize) < g.in_w {
                            s += x[ih as usize * g.in_w + iw as usize] * k[i * g.kernel_w + j];
                        }
                    }
                }
                out[oh * g.out_w + ow] = s;
            }
        }
        out
    }

    #[test]
    fn conv_matches_sliding_window_with_padding_and_stride() {
        let x: Vec<f64> = (0..35).map(|v| (v as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..9).map(|v| v as f64 - 4.0).collect();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (1, 2)] {
            let Some(_) = ConvGeom::out_extent(5, 3, stride, pad) else { continue };
            let Some(_) = ConvGeom::out_extent(7, 3, stride, pad) else { continue };
            let g = geom(5, 7, 3, stride, pad);
            let got = conv2d_forward(&x, &k, &[0.0], &g);
            let want = conv_oracle(&x, &k, &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn out_extent_rejects_non_integral() {
        assert_eq!(ConvGeom::out_extent(4, 3, 2, 0), None);
        assert_eq!(ConvGeom::out_extent(5, 3, 2, 0), Some(2));
        assert_eq!(ConvGeom::out_extent(2, 3, 1, 0), None);
        assert_eq!(ConvGeom::out_extent(2, 3, 1, 1), Some(2));
    }

    #[test]
    fn max_pool_ties_pick_first() {
        let g = PoolGeom { planes: 1, in_h: 2, in_w: 2, size: 2, stride: 2, out_h: 1, out_w: 1 };
        let (out, arg) = max_pool_forward(&[1.0, 3.0, 3.0, 0.0], &g);
        assert_eq!(out, vec![3.0]);
        assert_eq!(arg, vec![1]);
    }
}
