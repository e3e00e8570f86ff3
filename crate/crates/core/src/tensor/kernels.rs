use crate::scalar::Real;

/// Extents of a stride-1, zero-padded 'same' convolution over a
/// `[channels, depth, height, width]` volume. 2-D convolutions use depth 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    fn kernel_index(&self, co: usize, ci: usize, dz: usize, dy: usize, dx: usize) -> usize {
        (((co * self.cin + ci) * self.kd + dz) * self.kh + dy) * self.kw + dx
    }

    fn volume(&self) -> usize {
        self.d * self.h * self.w
    }
}

/// Output index range along one axis for kernel tap `tap` with half-width `pad`.
#[inline]
fn valid_range(len: usize, tap: usize, pad: usize) -> (usize, usize, isize) {
    let off = tap as isize - pad as isize;
    let start = (-off).max(0) as usize;
    let end = (len as isize - off).min(len as isize).max(0) as usize;
    (start, end.max(start), off)
}

/// Visits every (kernel tap, output row, input row) pairing of the convolution.
/// The callback receives the kernel index, the output row offset, the input
/// offset aligned with `xs`, and the valid output span `[xs, xe)`.
#[inline]
fn for_each_tap(dims: &ConvDims, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (pd, ph, pw) = (dims.kd / 2, dims.kh / 2, dims.kw / 2);
    let vol = dims.volume();
    for co in 0..dims.cout {
        for ci in 0..dims.cin {
            for dz in 0..dims.kd {
                let (zs, ze, zoff) = valid_range(dims.d, dz, pd);
                for dy in 0..dims.kh {
                    let (ys, ye, yoff) = valid_range(dims.h, dy, ph);
                    for dx in 0..dims.kw {
                        let (xs, xe, xoff) = valid_range(dims.w, dx, pw);
                        if xs >= xe {
                            continue;
                        }
                        let k = dims.kernel_index(co, ci, dz, dy, dx);
                        for z in zs..ze {
                            let zi = (z as isize + zoff) as usize;
                            for y in ys..ye {
                                let yi = (y as isize + yoff) as usize;
                                let out_row = co * vol + (z * dims.h + y) * dims.w;
                                let in_row = ci * vol + (zi * dims.h + yi) * dims.w;
                                let in_start = (xs as isize + xoff) as usize;
                                f(k, out_row, in_row + in_start, xs, xe);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(input: &[T], kernel: &[T], dims: &ConvDims) -> Vec<T> {
    let mut out = vec![T::zero(); dims.cout * dims.volume()];
    for_each_tap(dims, |k, out_row, in_at, xs, xe| {
        let w = kernel[k];
        let dst = &mut out[out_row + xs..out_row + xe];
        let src = &input[in_at..in_at + (xe - xs)];
        for (o, &i) in dst.iter_mut().zip(src) {
            *o += w * i;
        }
    });
    out
}

pub(crate) fn conv_backward_input<T: Real>(kernel: &[T], grad_out: &[T], dims: &ConvDims) -> Vec<T> {
    let mut gx = vec![T::zero(); dims.cin * dims.volume()];
    for_each_tap(dims, |k, out_row, in_at, xs, xe| {
        let w = kernel[k];
        let src = &grad_out[out_row + xs..out_row + xe];
        let dst = &mut gx[in_at..in_at + (xe - xs)];
        for (g, &o) in dst.iter_mut().zip(src) {
            *g += w * o;
        }
    });
    gx
}

pub(crate) fn conv_backward_kernel<T: Real>(input: &[T], grad_out: &[T], dims: &ConvDims) -> Vec<T> {
    let mut gk = vec![T::zero(); dims.cout * dims.cin * dims.kd * dims.kh * dims.kw];
    for_each_tap(dims, |k, out_row, in_at, xs, xe| {
        let g = &grad_out[out_row + xs..out_row + xe];
        let x = &input[in_at..in_at + (xe - xs)];
        let mut acc = T::zero();
        for (&a, &b) in g.iter().zip(x) {
            acc += a * b;
        }
        gk[k] += acc;
    });
    gk
}

/// `[m, k] x [k, n] -> [m, n]`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Gradients of `[m, k] x [k, n]` with respect to both operands.
pub(crate) fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); m * k];
    let mut gb = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            ga[i * k + p] = acc;
            let aip = a[i * k + p];
            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    (ga, gb)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.cout * d.d * d.h * d.w];
        let (pd, ph, pw) = (d.kd as isize / 2, d.kh as isize / 2, d.kw as isize / 2);
        for co in 0..d.cout {
            for z in 0..d.d {
                for y in 0..d.h {
                    for x in 0..d.w {
                        let mut acc = 0.0;
                        for ci in 0..d.cin {
                            for dz in 0..d.kd {
                                for dy in 0..d.kh {
                                    for dx in 0..d.kw {
                                        let zi = z as isize + dz as isize - pd;
                                        let yi = y as isize + dy as isize - ph;
                                        let xi = x as isize + dx as isize - pw;
                                        if zi < 0
                                            || yi < 0
                                            || xi < 0
                                            || zi >= d.d as isize
                                            || yi >= d.h as isize
                                            || xi >= d.w as isize
                                        {
                                            continue;
                                        }
                                        let iv = input[((ci * d.d + zi as usize) * d.h + yi as usize) * d.w
                                            + xi as usize];
                                        acc += kernel[d.kernel_index(co, ci, dz, dy, dx)] * iv;
                                    }
                                }
                            }
                        }
                        out[((co * d.d + z) * d.h + y) * d.w + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let dims = ConvDims {
            cin: 2,
            cout: 3,
            d: 3,
            h: 4,
            w: 5,
            kd: 3,
            kh: 3,
            kw: 1,
        };
        let input: Vec<f64> = (0..2 * 60).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let kernel: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.7).collect();
        let fast = conv_forward(&input, &kernel, &dims);
        let slow = naive_conv(&input, &kernel, &dims);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-800.0f64), 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
