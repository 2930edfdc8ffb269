//! Brute-force oracles written from the definitions, independently of the
//! library's loops. Shared by the oracle and acceptance suites.
#![allow(dead_code)]

use bevseg::decoder::{BevGridSpec, CameraIntrinsics, DepthInterval};
use bevseg::scene::{ClassPalette, Scene};
use bevseg::tensor::{LossForm, Padding, Tensor};

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

pub fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, s: usize, p: Padding) -> Vec<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + p.top + p.bottom - kh) / s + 1;
    let ow = (w + p.left + p.right - kw) / s + 1;
    let mut out = Vec::new();
    for co in 0..cout {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b.at(&[co]);
                for ci in 0..cin {
                    for a in 0..kh {
                        for c in 0..kw {
                            let y = (i * s + a) as isize - p.top as isize;
                            let xx = (j * s + c) as isize - p.left as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                acc += k.at(&[co, ci, a, c]) * x.at(&[ci, y as usize, xx as usize]);
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

pub fn conv_transpose_oracle(x: &Tensor, k: &Tensor, b: &Tensor, s: usize, p: Padding) -> (Vec<usize>, Vec<f64>) {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3]);
    let oh = (h - 1) * s + kh - p.top - p.bottom;
    let ow = (w - 1) * s + kw - p.left - p.right;
    let mut out = vec![0.0; cout * oh * ow];
    for (co, plane) in out.chunks_mut(oh * ow).enumerate() {
        plane.iter_mut().for_each(|v| *v = b.at(&[co]));
    }
    for ci in 0..cin {
        for i in 0..h {
            for j in 0..w {
                for co in 0..cout {
                    for a in 0..kh {
                        for c in 0..kw {
                            let y = (i * s + a) as isize - p.top as isize;
                            let xx = (j * s + c) as isize - p.left as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < oh && (xx as usize) < ow {
                                out[co * oh * ow + y as usize * ow + xx as usize] +=
                                    x.at(&[ci, i, j]) * k.at(&[ci, co, a, c]);
                            }
                        }
                    }
                }
            }
        }
    }
    (vec![cout, oh, ow], out)
}

/// Bilinear read of one channel at continuous `(y, x)`; zero outside.
pub fn bilinear_oracle(x: &Tensor, ch: usize, y: f64, xx: f64) -> f64 {
    let (h, w) = (x.shape()[1] as isize, x.shape()[2] as isize);
    let (y0, x0) = (y.floor(), xx.floor());
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - (y - y0)), (1, y - y0)] {
        for (dx, wx) in [(0, 1.0 - (xx - x0)), (1, xx - x0)] {
            let (r, c) = (y0 as isize + dy, x0 as isize + dx);
            if r >= 0 && c >= 0 && r < h && c < w {
                acc += wy * wx * x.at(&[ch, r as usize, c as usize]);
            }
        }
    }
    acc
}

/// Ray-casting count of polygon edges crossed by a ray toward +x.
pub fn crossings(poly: &[[f64; 2]], x: f64, z: f64) -> usize {
    (0..poly.len())
        .filter(|&i| {
            let [x1, z1] = poly[i];
            let [x2, z2] = poly[(i + 1) % poly.len()];
            (z1 > z) != (z2 > z) && x < x1 + (z - z1) * (x2 - x1) / (z2 - z1)
        })
        .count()
}

/// Same-side test against every edge of a convex polygon.
pub fn inside_convex(pts: &[(f64, f64); 4], x: f64, z: f64) -> bool {
    let signs: Vec<f64> = (0..4)
        .map(|i| {
            let (ax, az) = pts[i];
            let (bx, bz) = pts[(i + 1) % 4];
            (bx - ax) * (z - az) - (bz - az) * (x - ax)
        })
        .collect();
    signs.iter().all(|s| *s >= 0.0) || signs.iter().all(|s| *s <= 0.0)
}

pub fn loss_oracle(p: &[f64], y: &[f64], w: &[f64], lambda: f64, mask: &[f64], form: LossForm, cells: usize) -> f64 {
    let eps = 1e-7;
    let mut total = 0.0;
    for i in 0..p.len() {
        let q = p[i].max(eps).min(1.0 - eps);
        let wi = w[i / cells];
        let bce = wi * y[i] * q.ln() + (1.0 - wi) * (1.0 - y[i]) * (1.0 - q).ln();
        let u = match form {
            LossForm::Printed => 1.0 - q * q.ln() / std::f64::consts::LN_2,
            LossForm::EntropyBonus => (q * q.ln() + (1.0 - q) * (1.0 - q).ln()) / std::f64::consts::LN_2,
        };
        total += -bce + lambda * mask[i % cells] * u;
    }
    total / p.len() as f64
}

/// Every output of `resample_bilinear(x, coords)`, channel-major.
pub fn resample_oracle(x: &Tensor, coords: &Tensor) -> Vec<f64> {
    let points = coords.numel() / 2;
    let mut out = Vec::with_capacity(x.shape()[0] * points);
    for ch in 0..x.shape()[0] {
        for p in 0..points {
            out.push(bilinear_oracle(x, ch, coords.data()[2 * p], coords.data()[2 * p + 1]));
        }
    }
    out
}

/// Per-cell projection of an interval's Cartesian cells into the polar map:
/// column u = f·x/z + c_u scaled to the polar width, row = depth bin.
pub fn polar_oracle(polar: &Tensor, intr: &CameraIntrinsics, spec: &BevGridSpec, interval: &DepthInterval) -> Vec<f64> {
    let polar_w = polar.shape()[2];
    let xb = spec.lateral_bins();
    let mut out = Vec::new();
    for ch in 0..polar.shape()[0] {
        for r in 0..interval.rows {
            let z = spec.z_min + (interval.row_start + r) as f64 * spec.cell + spec.cell / 2.0;
            for c in 0..xb {
                let x = -spec.x_max + c as f64 * spec.cell + spec.cell / 2.0;
                let u = intr.fx * x / z + intr.cu;
                out.push(if (0.0..intr.width as f64).contains(&u) {
                    bilinear_oracle(polar, ch, r as f64, u * polar_w as f64 / intr.width as f64)
                } else {
                    0.0
                });
            }
        }
    }
    out
}

/// Flat-ground homography per BEV cell: v = f·h/z + c_v, sampled at the
/// pixel-center convention.
pub fn ipm_oracle(image: &Tensor, intr: &CameraIntrinsics, spec: &BevGridSpec, cam_height: f64) -> Vec<f64> {
    let (zb, xb) = (spec.depth_bins(), spec.lateral_bins());
    let mut out = vec![0.0; 3 * zb * xb];
    for r in 0..zb {
        let z = spec.z_min + (r as f64 + 0.5) * spec.cell;
        let v = intr.fy * cam_height / z + intr.cv;
        for c in 0..xb {
            let x = -spec.x_max + (c as f64 + 0.5) * spec.cell;
            let u = intr.fx * x / z + intr.cu;
            if u >= 0.0 && u < intr.width as f64 && v >= 0.0 && v < intr.height as f64 {
                for ch in 0..3 {
                    out[(ch * zb + r) * xb + c] = bilinear_oracle(image, ch, v - 0.5, u - 0.5);
                }
            }
        }
    }
    out
}

/// Label masks by point-in-polygon tests at each cell center.
pub fn raster_oracle(scene: &Scene, palette: &ClassPalette, spec: &BevGridSpec) -> Vec<f64> {
    let (zb, xb) = (spec.depth_bins(), spec.lateral_bins());
    let mut out = vec![0.0; palette.len() * zb * xb];
    for r in 0..zb {
        let z = spec.z_min + (r as f64 + 0.5) * spec.cell;
        for c in 0..xb {
            let x = -spec.x_max + (c as f64 + 0.5) * spec.cell;
            if crossings(&scene.ground, x, z) % 2 == 1 {
                out[(palette.surface_class() * zb + r) * xb + c] = 1.0;
            }
            for b in &scene.boxes {
                if inside_convex(&b.footprint(), x, z) {
                    out[(b.cls * zb + r) * xb + c] = 1.0;
                }
            }
        }
    }
    out
}

/// Per-class intersection and union counts at a strict threshold.
pub fn count_oracle(p: &Tensor, y: &Tensor, threshold: f64, inter: &mut [u64], uni: &mut [u64]) {
    let cells = p.numel() / inter.len();
    for i in 0..p.numel() {
        let (a, b) = (p.data()[i] > threshold, y.data()[i] == 1.0);
        inter[i / cells] += u64::from(a && b);
        uni[i / cells] += u64::from(a || b);
    }
}
