//! Dense kernels shared by the forward and backward passes.

/// Valid output range `[lo, hi)` for a shift of `d` over an axis of length `n`.
#[inline]
fn shifted_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeometry {
    fn taps(&self) -> impl Iterator<Item = (usize, usize, isize, isize)> + '_ {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        (0..self.kh).flat_map(move |ky| {
            (0..self.kw).map(move |kx| (ky, kx, ky as isize - ph, kx as isize - pw))
        })
    }

    fn kernel_index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c_in + ci) * self.kh + ky) * self.kw + kx
    }
}

/// Same-size 2-D cross-correlation with zero padding.
pub(crate) fn conv2d(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (h, w) = (g.height, g.width);
    let hw = h * w;
    let mut out = vec![0.0; g.c_out * hw];
    for co in 0..g.c_out {
        let dst = &mut out[co * hw..(co + 1) * hw];
        for ci in 0..g.c_in {
            let src = &input[ci * hw..(ci + 1) * hw];
            for (ky, kx, dy, dx) in g.taps() {
                let wt = kernel[g.kernel_index(co, ci, ky, kx)];
                if wt == 0.0 {
                    continue;
                }
                let (y0, y1) = shifted_range(h, dy);
                let (x0, x1) = shifted_range(w, dx);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let s = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                    let d = &mut dst[y * w + x0..y * w + x1];
                    for (o, i) in d.iter_mut().zip(s) {
                        *o += wt * i;
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv2d`] with respect to its input.
pub(crate) fn conv2d_grad_input(g: &ConvGeometry, grad: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (h, w) = (g.height, g.width);
    let hw = h * w;
    let mut out = vec![0.0; g.c_in * hw];
    for co in 0..g.c_out {
        let src = &grad[co * hw..(co + 1) * hw];
        for ci in 0..g.c_in {
            let dst = &mut out[ci * hw..(ci + 1) * hw];
            for (ky, kx, dy, dx) in g.taps() {
                let wt = kernel[g.kernel_index(co, ci, ky, kx)];
                if wt == 0.0 {
                    continue;
                }
                let (y0, y1) = shifted_range(h, dy);
                let (x0, x1) = shifted_range(w, dx);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let d = &mut dst[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                    let s = &src[y * w + x0..y * w + x1];
                    for (o, i) in d.iter_mut().zip(s) {
                        *o += wt * i;
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub(crate) fn conv2d_grad_kernel(g: &ConvGeometry, grad: &[f64], input: &[f64]) -> Vec<f64> {
    let (h, w) = (g.height, g.width);
    let hw = h * w;
    let mut out = vec![0.0; g.c_out * g.c_in * g.kh * g.kw];
    for co in 0..g.c_out {
        let gp = &grad[co * hw..(co + 1) * hw];
        for ci in 0..g.c_in {
            let ip = &input[ci * hw..(ci + 1) * hw];
            for (ky, kx, dy, dx) in g.taps() {
                let (y0, y1) = shifted_range(h, dy);
                let (x0, x1) = shifted_range(w, dx);
                let mut acc = 0.0;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let s = &ip[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                    let d = &gp[y * w + x0..y * w + x1];
                    acc += d.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                }
                out[g.kernel_index(co, ci, ky, kx)] = acc;
            }
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling of `planes` planes of `h × w`.
pub(crate) fn upsample2x(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h2 * w2];
    for p in 0..planes {
        for y in 0..h2 {
            let src = &input[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
            let dst = &mut out[(p * h2 + y) * w2..(p * h2 + y + 1) * w2];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2×2 block.
pub(crate) fn upsample2x_adjoint(grad: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h2 {
            let src = &grad[(p * h2 + y) * w2..(p * h2 + y + 1) * w2];
            let dst = &mut out[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
            for (x, g) in src.iter().enumerate() {
                dst[x / 2] += g;
            }
        }
    }
    out
}

/// Angle between `a` and `b`, via `atan2(|rejection|, projection)`.
pub(crate) fn angle(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let proj = dot(a, b) / na;
    let rej: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let r = y - proj * x / na;
            r * r
        })
        .sum::<f64>()
        .sqrt();
    rej.atan2(proj)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let g = ConvGeometry {
            c_in: 1,
            c_out: 1,
            height: 3,
            width: 4,
            kh: 3,
            kw: 3,
        };
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let input: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(conv2d(&g, &input, &kernel), input);
    }

    #[test]
    fn conv_shift_kernel_pads_with_zero() {
        let g = ConvGeometry {
            c_in: 1,
            c_out: 1,
            height: 1,
            width: 4,
            kh: 1,
            kw: 3,
        };
        // out[x] = in[x + 1]
        let kernel = vec![0.0, 0.0, 1.0];
        let out = conv2d(&g, &[1.0, 2.0, 3.0, 4.0], &kernel);
        assert_eq!(out, vec![2.0, 3.0, 4.0, 0.0]);
    }

    #[test]
    fn upsample_roundtrip_counts() {
        let up = upsample2x(&[1.0, 2.0, 3.0, 4.0], 1, 2, 2);
        assert_eq!(up.len(), 16);
        assert_eq!(&up[..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(upsample2x_adjoint(&up, 1, 2, 2), vec![4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn angle_is_stable_at_extremes() {
        assert_eq!(angle(&[1.0, 0.0], &[2.0, 0.0]), 0.0);
        assert!((angle(&[1.0, 0.0], &[0.0, 3.0]) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!((angle(&[1.0, 1e-9], &[-1.0, 0.0]) - std::f64::consts::PI).abs() < 1e-8);
    }
}
