//! Loop oracles shared by the test targets. Every function spells out the
//! textbook definition with plain nested loops over row-major buffers.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `x [B, Cin, H, W]`, `w [Cout, Cin, Kh, Kw]`.
pub fn conv(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    (b, cin, h, wd): (usize, usize, usize, usize),
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * cin + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                s += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((n * cout + co) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    out
}

/// Max over `k x k` windows with step `s`, per plane.
pub fn max_pool(x: &[f64], planes: usize, h: usize, w: usize, k: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(x[(p * h + oy * s + ky) * w + ox * s + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Per-plane spatial sum, or mean when `mean` is set.
pub fn global_pool(x: &[f64], area: usize, mean: bool) -> Vec<f64> {
    x.chunks(area)
        .map(|p| {
            let s: f64 = p.iter().sum();
            if mean {
                s / area as f64
            } else {
                s
            }
        })
        .collect()
}

/// Non-overlapping `kh x kw` averages per plane.
pub fn avg_pool_rect(x: &[f64], planes: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for pl in 0..planes {
        for oy in 0..h / kh {
            for ox in 0..w / kw {
                let mut s = 0.0;
                for y in oy * kh..(oy + 1) * kh {
                    for x2 in ox * kw..(ox + 1) * kw {
                        s += x[(pl * h + y) * w + x2];
                    }
                }
                out.push(s / (kh * kw) as f64);
            }
        }
    }
    out
}

/// `x [B, D] . w [D, K] + bias`.
pub fn linear(x: &[f64], w: &[f64], bias: &[f64], b: usize, d: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * k];
    for n in 0..b {
        for j in 0..k {
            out[n * k + j] = bias[j] + (0..d).map(|i| x[n * d + i] * w[i * k + j]).sum::<f64>();
        }
    }
    out
}

/// Class-`class` weighted sum of feature planes, `f [C, H, W]`, `wt [C, K]`.
pub fn cam(f: &[f64], wt: &[f64], c: usize, area: usize, k: usize, class: usize) -> Vec<f64> {
    let mut out = vec![0.0; area];
    for (cell, v) in out.iter_mut().enumerate() {
        for ch in 0..c {
            *v += wt[ch * k + class] * f[ch * area + cell];
        }
    }
    out
}

/// Mean of each of `n` full-height column slabs, laid out `[B, n, C]`.
pub fn serialize(x: &[f64], (b, c, h, w): (usize, usize, usize, usize), n: usize) -> Vec<f64> {
    let slab = w / n;
    let mut out = Vec::new();
    for bi in 0..b {
        for i in 0..n {
            for ch in 0..c {
                let mut s = 0.0;
                for y in 0..h {
                    for x2 in i * slab..(i + 1) * slab {
                        s += x[((bi * c + ch) * h + y) * w + x2];
                    }
                }
                out.push(s / (h * slab) as f64);
            }
        }
    }
    out
}

/// Half-pixel-centre bilinear sampling with edge clamping, one plane.
pub fn bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, c - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}
