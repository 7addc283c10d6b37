//! Brute-force reference for Telea slice inpainting.
//!
//! Written for clarity, not speed: 2D arrays indexed `[y][x]`, the next band
//! pixel found by a linear scan over the whole slice for the smallest
//! `(T, y, x)`, and the weighted sum evaluated directly from its definition.

#![allow(dead_code)]

#[derive(Clone, Copy, PartialEq)]
enum Flag {
    Known,
    Band,
    Inside,
}

struct Slice {
    w: usize,
    h: usize,
    flag: Vec<Vec<Flag>>,
    t: Vec<Vec<f64>>,
    img: Vec<Vec<f64>>,
}

impl Slice {
    fn inside_grid(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h
    }

    fn has_value(&self, x: i64, y: i64) -> bool {
        self.inside_grid(x, y) && self.flag[y as usize][x as usize] != Flag::Inside
    }

    fn is_known(&self, x: i64, y: i64) -> bool {
        self.inside_grid(x, y) && self.flag[y as usize][x as usize] == Flag::Known
    }

    fn eikonal(&self, x: i64, y: i64) -> f64 {
        let mut best = f64::INFINITY;
        for (hx, vy) in [(x - 1, y - 1), (x + 1, y - 1), (x - 1, y + 1), (x + 1, y + 1)] {
            let a_ok = self.is_known(hx, y);
            let b_ok = self.is_known(x, vy);
            let candidate = if a_ok && b_ok {
                let a = self.t[y as usize][hx as usize];
                let b = self.t[vy as usize][x as usize];
                if (a - b).abs() >= 1.0 {
                    1.0 + a.min(b)
                } else {
                    (a + b + (2.0 - (a - b) * (a - b)).sqrt()) * 0.5
                }
            } else if a_ok {
                1.0 + self.t[y as usize][hx as usize]
            } else if b_ok {
                1.0 + self.t[vy as usize][x as usize]
            } else {
                f64::INFINITY
            };
            if candidate < best {
                best = candidate;
            }
        }
        best
    }

    /// Derivative of `field` at (x, y) along (dx, dy).
    fn derivative(&self, field: &[Vec<f64>], x: i64, y: i64, dx: i64, dy: i64) -> f64 {
        let back = self.has_value(x - dx, y - dy);
        let fwd = self.has_value(x + dx, y + dy);
        let here = field[y as usize][x as usize];
        if back && fwd {
            (field[(y + dy) as usize][(x + dx) as usize] - field[(y - dy) as usize][(x - dx) as usize]) / 2.0
        } else if fwd {
            field[(y + dy) as usize][(x + dx) as usize] - here
        } else if back {
            here - field[(y - dy) as usize][(x - dx) as usize]
        } else {
            0.0
        }
    }

    fn estimate(&self, x: i64, y: i64, radius: i64) -> f64 {
        let t_p = self.t[y as usize][x as usize];
        let nt = [self.derivative(&self.t, x, y, 1, 0), self.derivative(&self.t, x, y, 0, 1)];
        let nt_len = (nt[0] * nt[0] + nt[1] * nt[1]).sqrt();
        let mut num = 0.0;
        let mut den = 0.0;
        for qy in y - radius..=y + radius {
            for qx in x - radius..=x + radius {
                let (rx, ry) = ((x - qx) as f64, (y - qy) as f64);
                let dist2 = rx * rx + ry * ry;
                if dist2 == 0.0 || dist2 > (radius * radius) as f64 || !self.has_value(qx, qy) {
                    continue;
                }
                let dist = dist2.sqrt();
                let direction = if nt_len < 1e-12 {
                    1.0
                } else {
                    let cos = (nt[0] * rx + nt[1] * ry) / (nt_len * dist);
                    if cos > 1e-6 {
                        cos
                    } else {
                        1e-6
                    }
                };
                let level = 1.0 / (1.0 + (self.t[qy as usize][qx as usize] - t_p).abs());
                let weight = direction * level / dist2;
                let grad = [self.derivative(&self.img, qx, qy, 1, 0), self.derivative(&self.img, qx, qy, 0, 1)];
                num += weight * (self.img[qy as usize][qx as usize] + grad[0] * rx + grad[1] * ry);
                den += weight;
            }
        }
        num / den
    }
}

/// Inpaints the `hole` pixels of an x-fastest `w` × `h` slice.
pub fn inpaint(values: &[f64], hole: &[bool], w: usize, h: usize, radius: usize) -> Vec<f64> {
    let mut s =
        Slice { w, h, flag: vec![vec![Flag::Known; w]; h], t: vec![vec![0.0; w]; h], img: vec![vec![0.0; w]; h] };
    for y in 0..h {
        for x in 0..w {
            s.img[y][x] = values[x + w * y];
            if hole[x + w * y] {
                s.flag[y][x] = Flag::Inside;
                s.t[y][x] = f64::INFINITY;
            }
        }
    }
    let nbrs = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if s.flag[y as usize][x as usize] != Flag::Known {
                continue;
            }
            let touches = nbrs
                .iter()
                .any(|(dx, dy)| s.inside_grid(x + dx, y + dy) && hole[(x + dx) as usize + w * (y + dy) as usize]);
            if touches {
                s.flag[y as usize][x as usize] = Flag::Band;
            }
        }
    }
    loop {
        let mut pick: Option<(f64, usize, usize)> = None;
        for y in 0..h {
            for x in 0..w {
                if s.flag[y][x] != Flag::Band {
                    continue;
                }
                let better = match pick {
                    None => true,
                    Some((t, py, px)) => s.t[y][x] < t || (s.t[y][x] == t && (y, x) < (py, px)),
                };
                if better {
                    pick = Some((s.t[y][x], y, x));
                }
            }
        }
        let Some((_, py, px)) = pick else { break };
        s.flag[py][px] = Flag::Known;
        for (dx, dy) in nbrs {
            let (nx, ny) = (px as i64 + dx, py as i64 + dy);
            if !s.inside_grid(nx, ny) {
                continue;
            }
            let (ux, uy) = (nx as usize, ny as usize);
            match s.flag[uy][ux] {
                Flag::Inside => {
                    s.t[uy][ux] = s.eikonal(nx, ny);
                    s.img[uy][ux] = s.estimate(nx, ny, radius as i64);
                    s.flag[uy][ux] = Flag::Band;
                }
                Flag::Band => {
                    let t = s.eikonal(nx, ny);
                    if t < s.t[uy][ux] {
                        s.t[uy][ux] = t;
                    }
                }
                Flag::Known => {}
            }
        }
    }
    let mut out = values.to_vec();
    for y in 0..h {
        for x in 0..w {
            out[x + w * y] = s.img[y][x];
        }
    }
    out
}
