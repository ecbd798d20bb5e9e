//! Naive reference implementations used as test oracles. Everything works on
//! flat `f64` buffers with explicit shapes and plain nested loops.

/// Row-major `[m, k] x [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Cross-correlation of `x: [n, c, d, h, w]` with `w: [o, c, kd, kh, kw]`,
/// zero padding. Returns the output and its shape.
pub fn conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [n, c, d, h, wd] = xs;
    let [o, wc, kd, kh, kw] = ws;
    assert_eq!(c, wc);
    let out_len = |len: usize, k: usize, s: usize, p: usize| (len + 2 * p - k) / s + 1;
    let od = out_len(d, kd, stride[0], pad[0]);
    let oh = out_len(h, kh, stride[1], pad[1]);
    let ow = out_len(wd, kw, stride[2], pad[2]);
    let mut y = vec![0.0; n * o * od * oh * ow];
    for b in 0..n {
        for f in 0..o {
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias.map_or(0.0, |bs| bs[f]);
                        for ch in 0..c {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let iz = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let iy = (yy * stride[1] + bb) as isize - pad[1] as isize;
                                        let ix = (xx * stride[2] + cc) as isize - pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        let xi = (((b * c + ch) * d + iz) * h + iy) * wd + ix;
                                        let wi = (((f * c + ch) * kd + a) * kh + bb) * kw + cc;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        y[(((b * o + f) * od + z) * oh + yy) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (y, [n, o, od, oh, ow])
}

/// Mean over every axis after the first two of `[n, c, ...]`.
pub fn avgpool_global(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    let spatial = x.len() / (n * c);
    (0..n * c)
        .map(|i| x[i * spatial..(i + 1) * spatial].iter().sum::<f64>() / spatial as f64)
        .collect()
}

/// Bilinear resize of one `h x w` image, half-pixel centres, computed pixel
/// by pixel from the source-coordinate formula.
pub fn bilinear(img: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0);
            let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0);
            let y0 = (sy.floor() as usize).min(h - 1);
            let x0 = (sx.floor() as usize).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let p = |y: usize, x: usize| img[y * w + x];
            let v = p(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + p(y0, x1) * (1.0 - fy) * fx
                + p(y1, x0) * fy * (1.0 - fx)
                + p(y1, x1) * fy * fx;
            out.push(v);
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean `-(pw * y * ln s(z) + (1 - y) * ln(1 - s(z)))`, with `ln s(z)`
/// evaluated as `-ln(1 + e^-z)` through `ln_1p` on the stable side.
pub fn bce_with_logits(z: &[f64], y: &[f64], pos_weight: f64) -> f64 {
    let log_sig = |v: f64| if v >= 0.0 { -(-v).exp().ln_1p() } else { v - v.exp().ln_1p() };
    let total: f64 = z
        .iter()
        .zip(y)
        .map(|(&z, &y)| -(pos_weight * y * log_sig(z) + (1.0 - y) * log_sig(-z)))
        .sum();
    total / z.len() as f64
}

/// Residual self-attention `x + MHA(x)` on `x: [n, t, e]`, projections
/// `[e, e]` applied as `x . W`, output bias `b_o`. Heads are handled one
/// at a time with explicit loops.
#[allow(clippy::too_many_arguments)]
pub fn mha_residual(
    x: &[f64],
    n: usize,
    t: usize,
    e: usize,
    heads: usize,
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
    bo: &[f64],
) -> Vec<f64> {
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = x.to_vec();
    for b in 0..n {
        let xb = &x[b * t * e..(b + 1) * t * e];
        let q = matmul(xb, wq, t, e, e);
        let k = matmul(xb, wk, t, e, e);
        let v = matmul(xb, wv, t, e, e);
        let mut concat = vec![0.0; t * e];
        for hd in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|c| q[i * e + hd * dh + c] * k[j * e + hd * dh + c]).sum::<f64>() * scale)
                    .collect();
                let p = softmax(&scores);
                for c in 0..dh {
                    concat[i * e + hd * dh + c] = (0..t).map(|j| p[j] * v[j * e + hd * dh + c]).sum();
                }
            }
        }
        let proj = matmul(&concat, wo, t, e, e);
        for i in 0..t * e {
            out[b * t * e + i] += proj[i] + bo[i % e];
        }
    }
    out
}

/// Trainable parameter count of the 3D ResNet-18 family with one block
/// configuration per stage, derived layer by layer: stem conv 1->c0 with a
/// `3x7x7` kernel and no bias; each block has two `3x3x3` convs without
/// bias, two batchnorms, and a `1x1x1` projection plus batchnorm when the
/// shape changes; optional attention `4e^2 + e`; linear head `e + 1`.
pub fn r3d18_param_count(in_ch: usize, ch: [usize; 4], strides: [usize; 4], blocks: usize, mha: bool) -> usize {
    let conv = |i: usize, o: usize, k: usize| i * o * k;
    let bn = |c: usize| 2 * c;
    let mut total = conv(in_ch, ch[0], 3 * 7 * 7) + bn(ch[0]);
    let mut prev = ch[0];
    for s in 0..4 {
        for b in 0..blocks {
            let stride = if b == 0 { strides[s] } else { 1 };
            total += conv(prev, ch[s], 27) + bn(ch[s]) + conv(ch[s], ch[s], 27) + bn(ch[s]);
            if stride != 1 || prev != ch[s] {
                total += conv(prev, ch[s], 1) + bn(ch[s]);
            }
            prev = ch[s];
        }
    }
    if mha {
        total += 4 * prev * prev + prev;
    }
    total + prev + 1
}
