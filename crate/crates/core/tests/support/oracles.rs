//! Naive loop oracles for the metric suite, shared by the metric tests and
//! the acceptance target (included with `#[path]`).
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scaleformer::patchify::bicubic_resize;
use scaleformer::Tensor;

pub fn random(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn get(t: &Tensor, b: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[(b * s[1] + y) * s[2] + x] as f64
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---- naive oracles -------------------------------------------------------

pub fn psnr_oracle(x: &Tensor, r: &Tensor) -> f64 {
    let s = x.shape();
    let mut se = 0.0;
    for b in 0..s[0] {
        for y in 0..s[1] {
            for i in 0..s[2] {
                se += (get(x, b, y, i) - get(r, b, y, i)).powi(2);
            }
        }
    }
    10.0 * (1.0 / (se / x.numel() as f64)).log10()
}

pub fn ssim_oracle(x: &Tensor, r: &Tensor, range: f64) -> f64 {
    let s = x.shape();
    let mut win = [[0.0f64; 11]; 11];
    let mut norm = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            norm += *v;
        }
    }
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut total = 0.0;
    for b in 0..s[0] {
        let mut acc = 0.0;
        let mut n = 0;
        for y0 in 0..=s[1] - 11 {
            for x0 in 0..=s[2] - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wv = win[i][j] / norm;
                        let a = get(x, b, y0 + i, x0 + j);
                        let c = get(r, b, y0 + i, x0 + j);
                        mx += wv * a;
                        my += wv * c;
                        sxx += wv * a * a;
                        syy += wv * c * c;
                        sxy += wv * a * c;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
        total += acc / n as f64;
    }
    total / s[0] as f64
}

pub fn sam_oracle(x: &Tensor, r: &Tensor) -> f64 {
    let s = x.shape();
    let mut total = 0.0;
    for y in 0..s[1] {
        for i in 0..s[2] {
            let (mut d, mut a2, mut b2) = (0.0, 0.0, 0.0);
            for b in 0..s[0] {
                d += get(x, b, y, i) * get(r, b, y, i);
                a2 += get(x, b, y, i).powi(2);
                b2 += get(r, b, y, i).powi(2);
            }
            total += (d / (a2.sqrt() * b2.sqrt())).min(1.0).acos();
        }
    }
    total / (s[1] * s[2]) as f64
}

pub fn ergas_oracle(x: &Tensor, r: &Tensor, ratio: f64) -> f64 {
    let s = x.shape();
    let mut acc = 0.0;
    for b in 0..s[0] {
        let (mut se, mut sum) = (0.0, 0.0);
        for y in 0..s[1] {
            for i in 0..s[2] {
                se += (get(x, b, y, i) - get(r, b, y, i)).powi(2);
                sum += get(r, b, y, i);
            }
        }
        let n = (s[1] * s[2]) as f64;
        acc += (se / n).sqrt().powi(2) / (sum / n).powi(2);
    }
    100.0 / ratio * (acc / s[0] as f64).sqrt()
}

pub fn scc_oracle(x: &Tensor, r: &Tensor) -> f64 {
    let k = [[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]];
    let s = x.shape();
    let filt = |t: &Tensor, b: usize| {
        let mut v = Vec::new();
        for y in 0..s[1] - 2 {
            for i in 0..s[2] - 2 {
                let mut acc = 0.0;
                for (dy, row) in k.iter().enumerate() {
                    for (dx, kv) in row.iter().enumerate() {
                        acc += kv * get(t, b, y + dy, i + dx);
                    }
                }
                v.push(acc);
            }
        }
        v
    };
    let mut total = 0.0;
    for b in 0..s[0] {
        let (a, c) = (filt(x, b), filt(r, b));
        let n = a.len() as f64;
        let (ma, mc) = (a.iter().sum::<f64>() / n, c.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&c).map(|(p, q)| (p - ma) * (q - mc)).sum();
        let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
        let vc: f64 = c.iter().map(|q| (q - mc).powi(2)).sum();
        total += cov / (va.sqrt() * vc.sqrt());
    }
    total / s[0] as f64
}

/// Blockwise Q on two planes using sample (N−1) statistics.
pub fn q_plane_oracle(a: &dyn Fn(usize, usize) -> f64, b: &dyn Fn(usize, usize) -> f64, h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for y0 in 0..=h - 8 {
        for x0 in 0..=w - 8 {
            let pts: Vec<(f64, f64)> = (0..64).map(|k| (a(y0 + k / 8, x0 + k % 8), b(y0 + k / 8, x0 + k % 8))).collect();
            let ma = pts.iter().map(|p| p.0).sum::<f64>() / 64.0;
            let mb = pts.iter().map(|p| p.1).sum::<f64>() / 64.0;
            let va = pts.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / 63.0;
            let vb = pts.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / 63.0;
            let cab = pts.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / 63.0;
            total += 4.0 * cab * ma * mb / ((va + vb) * (ma * ma + mb * mb));
            n += 1;
        }
    }
    total / n as f64
}

pub fn q_oracle(x: &Tensor, r: &Tensor) -> f64 {
    let s = x.shape();
    (0..s[0])
        .map(|b| q_plane_oracle(&|y, i| get(x, b, y, i), &|y, i| get(r, b, y, i), s[1], s[2]))
        .sum::<f64>()
        / s[0] as f64
}

pub fn nr_oracle(f: &Tensor, m: &Tensor, p: &Tensor) -> (f64, f64, f64) {
    let c = f.shape()[0];
    let (h, w) = (f.shape()[1], f.shape()[2]);
    let (mh, mw) = (m.shape()[1], m.shape()[2]);
    let mut dl = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                let qf = q_plane_oracle(&|y, x| get(f, i, y, x), &|y, x| get(f, j, y, x), h, w);
                let qm = q_plane_oracle(&|y, x| get(m, i, y, x), &|y, x| get(m, j, y, x), mh, mw);
                dl += (qf - qm).abs();
            }
        }
    }
    dl /= (c * (c - 1)) as f64;
    let plow = bicubic_resize(&p.reshape(&[1, 1, h, w]).unwrap(), mh, mw).unwrap().reshape(&[1, mh, mw]).unwrap();
    let mut ds = 0.0;
    for i in 0..c {
        let qf = q_plane_oracle(&|y, x| get(f, i, y, x), &|y, x| get(p, 0, y, x), h, w);
        let qm = q_plane_oracle(&|y, x| get(m, i, y, x), &|y, x| get(&plow, 0, y, x), mh, mw);
        ds += (qf - qm).abs();
    }
    ds /= c as f64;
    (dl, ds, (1.0 - dl) * (1.0 - ds))
}
