//! Dense numeric kernels behind the graph ops.
//!
//! Spatial tensors are `[C, nz, ny, nx]` with `x` fastest. Convolutions use
//! zero "same" padding with odd cubic kernels laid out `[Cout, Cin, kz, ky, kx]`.

use rayon::prelude::*;

use super::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub dilation: usize,
    /// `[nz, ny, nx]`
    pub spatial: [usize; 3],
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    fn offset(&self, t: usize) -> isize {
        (t as isize - (self.k / 2) as isize) * self.dilation as isize
    }

    pub fn n_spatial(&self) -> usize {
        self.spatial.iter().product()
    }
}

/// Valid output range along one axis for a source offset `d`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

#[inline]
fn axpy<T: Real>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

/// `acc[j] += Σ_t a[t]·xs[t][j]` over one kernel row. With `last` set the
/// row total is moved into the `f64` output and `acc` is cleared.
#[inline]
fn axpy_row<T: Real, const K: usize>(acc: &mut [T], out: &mut [f64], last: bool, a: [T; K], xs: [&[T]; K]) {
    let n = acc.len();
    let xs = xs.map(|x| &x[..n]);
    if last {
        let out = &mut out[..n];
        for j in 0..n {
            let mut s = acc[j];
            for t in 0..K {
                s = s + a[t] * xs[t][j];
            }
            out[j] += s.f64();
            acc[j] = T::zero();
        }
    } else {
        for j in 0..n {
            let mut s = acc[j];
            for t in 0..K {
                s = s + a[t] * xs[t][j];
            }
            acc[j] = s;
        }
    }
}

fn flush<T: Real>(acc: &mut [T], out: &mut [f64]) {
    for (o, a) in out.iter_mut().zip(acc.iter_mut()) {
        *o += a.f64();
        *a = T::zero();
    }
}

/// Three dot products against a shared left operand, sixteen lanes each.
#[inline]
fn dot3<T: Real>(a: &[T], x0: &[T], x1: &[T], x2: &[T]) -> [T; 3] {
    const L: usize = 16;
    let n = a.len();
    let (x0, x1, x2) = (&x0[..n], &x1[..n], &x2[..n]);
    let mut l0 = [T::zero(); L];
    let mut l1 = [T::zero(); L];
    let mut l2 = [T::zero(); L];
    let chunks = n / L;
    for (((pa, p0), p1), p2) in a
        .chunks_exact(L)
        .zip(x0.chunks_exact(L))
        .zip(x1.chunks_exact(L))
        .zip(x2.chunks_exact(L))
    {
        for l in 0..L {
            l0[l] = l0[l] + pa[l] * p0[l];
            l1[l] = l1[l] + pa[l] * p1[l];
            l2[l] = l2[l] + pa[l] * p2[l];
        }
    }
    let fold = |v: &[T; L], x: &[T]| {
        let mut tail = T::zero();
        for j in chunks * L..n {
            tail = tail + a[j] * x[j];
        }
        let mut half = [T::zero(); 8];
        for l in 0..8 {
            half[l] = v[l] + v[l + 8];
        }
        ((half[0] + half[4]) + (half[1] + half[5])) + ((half[2] + half[6]) + (half[3] + half[7])) + tail
    };
    [fold(&l0, x0), fold(&l1, x1), fold(&l2, x2)]
}

/// Dot product with eight independent accumulators, summed in a fixed order.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (pa, pb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] = acc[l] + pa[l] * pb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    for pa in &mut ca {
        for l in 0..8 {
            acc[l] = acc[l] + pa[l];
        }
    }
    let mut tail = T::zero();
    for &v in ca.remainder() {
        tail = tail + v;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Zero-halo copy of a `[C, nz, ny, nx]` buffer.
///
/// Each channel becomes `(nz+2h)·(ny+2h)·(nx+2h)` values followed by a zero
/// tail, so that a tap can read a whole `ny × (nx+2h)` window as one slice.
struct Padded<T> {
    data: Vec<T>,
    halo: usize,
    /// padded row width
    w: usize,
    /// padded rows per plane
    h: usize,
    chan: usize,
}

impl<T: Real> Padded<T> {
    fn new(x: &[T], c: usize, [nz, ny, nx]: [usize; 3], halo: usize) -> Self {
        let (w, h, d) = (nx + 2 * halo, ny + 2 * halo, nz + 2 * halo);
        let chan = d * h * w + w + 2 * halo;
        let mut data = vec![T::zero(); c * chan];
        let n = nz * ny * nx;
        for ci in 0..c {
            for z in 0..nz {
                for y in 0..ny {
                    let src = &x[ci * n + (z * ny + y) * nx..ci * n + (z * ny + y) * nx + nx];
                    let dst = ci * chan + ((z + halo) * h + y + halo) * w + halo;
                    data[dst..dst + nx].copy_from_slice(src);
                }
            }
        }
        Self { data, halo, w, h, chan }
    }

    /// Window starting at output row 0 of plane `z`, shifted by `(dz, dy, dx)`.
    #[inline]
    fn window(&self, ci: usize, z: usize, d: [isize; 3], len: usize) -> &[T] {
        let hz = (z as isize + self.halo as isize + d[0]) as usize;
        let hy = (self.halo as isize + d[1]) as usize;
        let hx = (self.halo as isize + d[2]) as usize;
        let start = ci * self.chan + (hz * self.h + hy) * self.w + hx;
        &self.data[start..start + len]
    }
}

/// Cross-correlation forward pass.
pub fn conv3d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: ConvGeom) -> Vec<T> {
    let [nz, ny, nx] = g.spatial;
    let n = g.n_spatial();
    let plane = ny * nx;
    let taps = g.taps();
    debug_assert_eq!(x.len(), g.c_in * n);
    debug_assert_eq!(w.len(), g.c_out * g.c_in * taps);
    let halo = (g.k / 2) * g.dilation;
    let xp = Padded::new(x, g.c_in, g.spatial, halo);
    let row = xp.w;
    let span = ny * row;

    let slices: Vec<Vec<f64>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut buf = vec![0.0f64; g.c_out * span];
            if let Some(b) = bias {
                for co in 0..g.c_out {
                    buf[co * span..(co + 1) * span].fill(b[co].f64());
                }
            }
            let kk = g.k * g.k;
            let mut part = vec![T::zero(); g.c_out * span];
            let mut srcs: Vec<&[T]> = vec![&[]; g.k];
            for ci in 0..g.c_in {
                for kz in 0..g.k {
                    let dz = g.offset(kz);
                    let zz = z as isize + dz;
                    if zz < 0 || zz >= nz as isize {
                        continue;
                    }
                    let plane = |co: usize| &w[(co * g.c_in + ci) * taps + kz * kk..][..kk];
                    if (0..g.c_out).all(|co| plane(co).iter().all(|&v| v == T::zero())) {
                        continue;
                    }
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            srcs[kx] = xp.window(ci, z, [dz, g.offset(ky), g.offset(kx)], span);
                        }
                        let last = ky + 1 == g.k;
                        for co in 0..g.c_out {
                            let a = &plane(co)[ky * g.k..(ky + 1) * g.k];
                            let acc = &mut part[co * span..(co + 1) * span];
                            let out = &mut buf[co * span..(co + 1) * span];
                            match g.k {
                                1 => axpy_row(acc, out, last, [a[0]], [srcs[0]]),
                                3 => axpy_row(acc, out, last, [a[0], a[1], a[2]], [srcs[0], srcs[1], srcs[2]]),
                                5 => axpy_row(
                                    acc,
                                    out,
                                    last,
                                    [a[0], a[1], a[2], a[3], a[4]],
                                    [srcs[0], srcs[1], srcs[2], srcs[3], srcs[4]],
                                ),
                                7 => axpy_row(
                                    acc,
                                    out,
                                    last,
                                    [a[0], a[1], a[2], a[3], a[4], a[5], a[6]],
                                    [srcs[0], srcs[1], srcs[2], srcs[3], srcs[4], srcs[5], srcs[6]],
                                ),
                                _ => {
                                    for kx in 0..g.k {
                                        axpy(acc, a[kx], srcs[kx]);
                                    }
                                    if last {
                                        flush(acc, out);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            buf
        })
        .collect();

    let mut out = vec![T::zero(); g.c_out * n];
    for (z, buf) in slices.into_iter().enumerate() {
        for co in 0..g.c_out {
            for y in 0..ny {
                let dst = co * n + z * plane + y * nx;
                let src = co * span + y * row;
                for (o, &v) in out[dst..dst + nx].iter_mut().zip(&buf[src..src + nx]) {
                    *o = T::of(v);
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the input: correlation of `gout` with the spatially
/// flipped, channel-transposed kernel.
pub fn conv3d_backward_input<T: Real>(gout: &[T], w: &[T], g: ConvGeom) -> Vec<T> {
    let taps = g.taps();
    let mut wt = vec![T::zero(); w.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for t in 0..taps {
                wt[(ci * g.c_out + co) * taps + (taps - 1 - t)] = w[(co * g.c_in + ci) * taps + t];
            }
        }
    }
    let gt = ConvGeom {
        c_in: g.c_out,
        c_out: g.c_in,
        ..g
    };
    conv3d_forward(gout, &wt, None, gt)
}

/// Gradients w.r.t. weights and bias.
pub fn conv3d_backward_params<T: Real>(x: &[T], gout: &[T], g: ConvGeom) -> (Vec<T>, Vec<T>) {
    let [nz, ny, nx] = g.spatial;
    let n = g.n_spatial();
    let taps = g.taps();
    let halo = (g.k / 2) * g.dilation;
    let xp = Padded::new(x, g.c_in, g.spatial, halo);
    let row = xp.w;
    let span = ny * row;
    let per_co: Vec<(Vec<T>, T)> = (0..g.c_out)
        .into_par_iter()
        .map(|co| {
            let go = &gout[co * n..(co + 1) * n];
            // output gradient re-laid on padded rows, zero in the halo columns
            let mut gp = vec![T::zero(); nz * span];
            for z in 0..nz {
                for y in 0..ny {
                    let src = (z * ny + y) * nx;
                    let dst = z * span + y * row;
                    gp[dst..dst + nx].copy_from_slice(&go[src..src + nx]);
                }
            }
            let mut gw = vec![T::zero(); g.c_in * taps];
            for ci in 0..g.c_in {
                for kz in 0..g.k {
                    let dz = g.offset(kz);
                    let (z0, z1) = valid_range(nz, dz);
                    for ky in 0..g.k {
                        let dy = g.offset(ky);
                        let t0 = ci * taps + (kz * g.k + ky) * g.k;
                        for z in z0..z1 {
                            let a = &gp[z * span..(z + 1) * span];
                            let win = |kx: usize| xp.window(ci, z, [dz, dy, g.offset(kx)], span);
                            match g.k {
                                3 => {
                                    let d = dot3(a, win(0), win(1), win(2));
                                    for kx in 0..3 {
                                        gw[t0 + kx] = gw[t0 + kx] + d[kx];
                                    }
                                }
                                _ => {
                                    for kx in 0..g.k {
                                        gw[t0 + kx] = gw[t0 + kx] + dot(a, win(kx));
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (gw, sum(go))
        })
        .collect();
    let mut gw = Vec::with_capacity(g.c_out * g.c_in * taps);
    let mut gb = Vec::with_capacity(g.c_out);
    for (w, b) in per_co {
        gw.extend(w);
        gb.push(b);
    }
    (gw, gb)
}

/// Naive 6-loop convolution used as an independent reference in tests.
#[doc(hidden)]
pub fn conv3d_reference<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: ConvGeom) -> Vec<T> {
    let [nz, ny, nx] = g.spatial;
    let n = g.n_spatial();
    let r = (g.k / 2) as isize;
    let d = g.dilation as isize;
    let mut out = vec![T::zero(); g.c_out * n];
    for co in 0..g.c_out {
        for z in 0..nz as isize {
            for y in 0..ny as isize {
                for xx in 0..nx as isize {
                    let mut acc = bias.map_or(T::zero(), |b| b[co]);
                    for ci in 0..g.c_in {
                        for kz in 0..g.k as isize {
                            for ky in 0..g.k as isize {
                                for kx in 0..g.k as isize {
                                    let (sz, sy, sx) = (z + (kz - r) * d, y + (ky - r) * d, xx + (kx - r) * d);
                                    if sz < 0 || sy < 0 || sx < 0 || sz >= nz as isize || sy >= ny as isize || sx >= nx as isize {
                                        continue;
                                    }
                                    let wi = (((co * g.c_in + ci) * g.k + kz as usize) * g.k + ky as usize) * g.k + kx as usize;
                                    let xi = ci * n + ((sz as usize * ny) + sy as usize) * nx + sx as usize;
                                    acc = acc + w[wi] * x[xi];
                                }
                            }
                        }
                    }
                    out[co * n + ((z as usize * ny) + y as usize) * nx + xx as usize] = acc;
                }
            }
        }
    }
    out
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel mean and biased variance of a `[C, S]` buffer.
pub fn channel_moments<T: Real>(x: &[T], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let per = x.len() / channels;
    let mut means = Vec::with_capacity(channels);
    let mut vars = Vec::with_capacity(channels);
    for c in 0..channels {
        let xc = &x[c * per..(c + 1) * per];
        let mean = xc.iter().map(|v| v.f64()).sum::<f64>() / per as f64;
        let var = xc.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / per as f64;
        means.push(mean);
        vars.push(var);
    }
    (means, vars)
}
