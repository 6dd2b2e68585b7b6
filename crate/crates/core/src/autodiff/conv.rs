//! 3D convolution kernels: replicate ("same"-style) padding, odd kernels,
//! stride 1 or 2.
//!
//! The stride-1 forward and input-gradient paths are written as shifted
//! row-axpy operations over the fastest axis so the inner loops vectorize;
//! everything else runs at a fraction of their voxel count and stays
//! scalar.

use super::Real;

pub(crate) fn out_dims(xs: &[usize; 4], ws: &[usize; 5], stride: usize) -> [usize; 4] {
    let o = |n: usize, k: usize| (n + 2 * (k / 2) - k) / stride + 1;
    [ws[0], o(xs[1], ws[2]), o(xs[2], ws[3]), o(xs[3], ws[4])]
}

/// `out[i] += w * inp[clamp(i + delta)]` over a full row (stride 1).
#[inline]
fn axpy_shifted<R: Real>(out: &mut [R], inp: &[R], w: R, delta: isize) {
    let n = out.len();
    if delta >= 0 {
        let d = (delta as usize).min(n);
        let m = n - d;
        for (o, &i) in out[..m].iter_mut().zip(&inp[d..]) {
            *o = *o + w * i;
        }
        let edge = w * inp[n - 1];
        for o in &mut out[m..] {
            *o = *o + edge;
        }
    } else {
        let d = ((-delta) as usize).min(n);
        let edge = w * inp[0];
        for o in &mut out[..d] {
            *o = *o + edge;
        }
        for (o, &i) in out[d..].iter_mut().zip(&inp[..n - d]) {
            *o = *o + w * i;
        }
    }
}

/// `out[ox] += w * inp[clamp(stride*ox + delta)]` for stride 2.
#[inline]
fn axpy_strided<R: Real>(out: &mut [R], inp: &[R], w: R, delta: isize, stride: usize) {
    let n = inp.len() as isize;
    for (ox, o) in out.iter_mut().enumerate() {
        let i = ((ox * stride) as isize + delta).clamp(0, n - 1) as usize;
        *o = *o + w * inp[i];
    }
}

/// Fused `out[i] += w0*in[clamp(i-1)] + w1*in[i] + w2*in[clamp(i+1)]` for
/// the hot stride-1 kx=3 path: one pass, one store per element. The zip
/// keeps the interior loop free of bounds checks so it vectorizes.
#[inline]
fn axpy3<R: Real>(out: &mut [R], inp: &[R], w0: R, w1: R, w2: R) {
    let n = out.len();
    if n == 1 {
        out[0] = out[0] + (w0 + w1 + w2) * inp[0];
        return;
    }
    out[0] = out[0] + (w0 + w1) * inp[0] + w2 * inp[1];
    let inp = &inp[..n];
    for (((o, &a), &b), &c) in out[1..n - 1]
        .iter_mut()
        .zip(&inp[..n - 2])
        .zip(&inp[1..n - 1])
        .zip(&inp[2..n])
    {
        *o = *o + w0 * a + w1 * b + w2 * c;
    }
    out[n - 1] = out[n - 1] + w0 * inp[n - 2] + (w1 + w2) * inp[n - 1];
}

pub(crate) fn forward<R: Real>(
    x: &[R],
    xs: &[usize; 4],
    w: &[R],
    ws: &[usize; 5],
    b: &[R],
    stride: usize,
) -> (Vec<R>, [usize; 4]) {
    let os = out_dims(xs, ws, stride);
    let [cin, iz, iy, ix] = *xs;
    let [cout, _, kz, ky, kx] = *ws;
    let [_, oz, oy, ox] = os;
    let (pz, py, px) = (kz / 2, ky / 2, kx / 2);
    let mut out = vec![R::zero(); cout * oz * oy * ox];
    let fast3 = stride == 1 && kx == 3;

    for oc in 0..cout {
        let out_ch = &mut out[oc * oz * oy * ox..(oc + 1) * oz * oy * ox];
        let bias = b[oc];
        for v in out_ch.iter_mut() {
            *v = bias;
        }
        for ic in 0..cin {
            let x_ch = &x[ic * iz * iy * ix..(ic + 1) * iz * iy * ix];
            let w_base = ((oc * cin) + ic) * kz * ky * kx;
            for dz in 0..kz {
                for dy in 0..ky {
                    let w_row = &w[w_base + (dz * ky + dy) * kx..w_base + (dz * ky + dy) * kx + kx];
                    for zo in 0..oz {
                        let zi = ((zo * stride) as isize + dz as isize - pz as isize)
                            .clamp(0, iz as isize - 1) as usize;
                        for yo in 0..oy {
                            let yi = ((yo * stride) as isize + dy as isize - py as isize)
                                .clamp(0, iy as isize - 1) as usize;
                            let in_row = &x_ch[(zi * iy + yi) * ix..(zi * iy + yi) * ix + ix];
                            let out_row =
                                &mut out_ch[(zo * oy + yo) * ox..(zo * oy + yo) * ox + ox];
                            if fast3 {
                                axpy3(out_row, in_row, w_row[0], w_row[1], w_row[2]);
                            } else {
                                for (dx, &wv) in w_row.iter().enumerate() {
                                    let delta = dx as isize - px as isize;
                                    if stride == 1 {
                                        axpy_shifted(out_row, in_row, wv, delta);
                                    } else {
                                        axpy_strided(out_row, in_row, wv, delta, stride);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, os)
}

pub(crate) fn backward_bias<R: Real>(gout: &[R], os: &[usize; 4], gb: &mut [R]) {
    let sp = os[1] * os[2] * os[3];
    for oc in 0..os[0] {
        let mut acc = 0.0f64;
        for g in &gout[oc * sp..(oc + 1) * sp] {
            acc += g.f64();
        }
        gb[oc] = gb[oc] + R::of(acc);
    }
}

/// `dot = sum_ox gout[ox] * x[clamp(stride*ox + delta)]`.
#[inline]
fn dot_shifted<R: Real>(gout: &[R], x_row: &[R], delta: isize, stride: usize) -> R {
    let n = x_row.len();
    let mut acc = R::zero();
    if stride == 1 {
        if delta >= 0 {
            let d = (delta as usize).min(n);
            let m = n - d;
            for (&g, &xv) in gout[..m].iter().zip(&x_row[d..]) {
                acc = acc + g * xv;
            }
            let mut tail = R::zero();
            for &g in &gout[m..] {
                tail = tail + g;
            }
            acc = acc + tail * x_row[n - 1];
        } else {
            let d = ((-delta) as usize).min(n);
            let mut head = R::zero();
            for &g in &gout[..d] {
                head = head + g;
            }
            acc = acc + head * x_row[0];
            for (&g, &xv) in gout[d..].iter().zip(&x_row[..n - d]) {
                acc = acc + g * xv;
            }
        }
    } else {
        for (ox, &g) in gout.iter().enumerate() {
            let i = ((ox * stride) as isize + delta).clamp(0, n as isize - 1) as usize;
            acc = acc + g * x_row[i];
        }
    }
    acc
}

pub(crate) fn backward_weight<R: Real>(
    x: &[R],
    xs: &[usize; 4],
    gout: &[R],
    os: &[usize; 4],
    ws: &[usize; 5],
    stride: usize,
    gw: &mut [R],
) {
    let [cin, iz, iy, ix] = *xs;
    let [cout, _, kz, ky, kx] = *ws;
    let [_, oz, oy, ox] = *os;
    let (pz, py, px) = (kz / 2, ky / 2, kx / 2);

    let fast3 = stride == 1 && kx == 3;
    for oc in 0..cout {
        let g_ch = &gout[oc * oz * oy * ox..(oc + 1) * oz * oy * ox];
        for ic in 0..cin {
            let x_ch = &x[ic * iz * iy * ix..(ic + 1) * iz * iy * ix];
            let w_base = ((oc * cin) + ic) * kz * ky * kx;
            for dz in 0..kz {
                for dy in 0..ky {
                    let mut accs = vec![R::zero(); kx];
                    for zo in 0..oz {
                        let zi = ((zo * stride) as isize + dz as isize - pz as isize)
                            .clamp(0, iz as isize - 1) as usize;
                        for yo in 0..oy {
                            let yi = ((yo * stride) as isize + dy as isize - py as isize)
                                .clamp(0, iy as isize - 1) as usize;
                            let g_row = &g_ch[(zo * oy + yo) * ox..(zo * oy + yo) * ox + ox];
                            let x_row = &x_ch[(zi * iy + yi) * ix..(zi * iy + yi) * ix + ix];
                            if fast3 {
                                let n = x_row.len();
                                if n == 1 {
                                    let c = g_row[0] * x_row[0];
                                    accs[0] = accs[0] + c;
                                    accs[1] = accs[1] + c;
                                    accs[2] = accs[2] + c;
                                } else {
                                    let (mut a0, mut a1, mut a2) =
                                        (R::zero(), R::zero(), R::zero());
                                    let x_row = &x_row[..n];
                                    for (((&g, &xa), &xb), &xc) in g_row[1..n - 1]
                                        .iter()
                                        .zip(&x_row[..n - 2])
                                        .zip(&x_row[1..n - 1])
                                        .zip(&x_row[2..n])
                                    {
                                        a0 = a0 + g * xa;
                                        a1 = a1 + g * xb;
                                        a2 = a2 + g * xc;
                                    }
                                    a0 = a0 + g_row[0] * x_row[0] + g_row[n - 1] * x_row[n - 2];
                                    a1 = a1 + g_row[0] * x_row[0] + g_row[n - 1] * x_row[n - 1];
                                    a2 = a2 + g_row[0] * x_row[1] + g_row[n - 1] * x_row[n - 1];
                                    accs[0] = accs[0] + a0;
                                    accs[1] = accs[1] + a1;
                                    accs[2] = accs[2] + a2;
                                }
                            } else {
                                for dx in 0..kx {
                                    let delta = dx as isize - px as isize;
                                    accs[dx] =
                                        accs[dx] + dot_shifted(g_row, x_row, delta, stride);
                                }
                            }
                        }
                    }
                    for dx in 0..kx {
                        let wi = w_base + (dz * ky + dy) * kx + dx;
                        gw[wi] = gw[wi] + accs[dx];
                    }
                }
            }
        }
    }
}

/// scatter: `gx[clamp(stride*ox + delta)] += w * gout[ox]`.
#[inline]
fn scatter_shifted<R: Real>(gx_row: &mut [R], gout: &[R], w: R, delta: isize, stride: usize) {
    let n = gx_row.len();
    if stride == 1 {
        if delta >= 0 {
            let d = (delta as usize).min(n);
            let m = n - d;
            for (gx, &g) in gx_row[d..].iter_mut().zip(&gout[..m]) {
                *gx = *gx + w * g;
            }
            let mut tail = R::zero();
            for &g in &gout[m..] {
                tail = tail + g;
            }
            gx_row[n - 1] = gx_row[n - 1] + w * tail;
        } else {
            let d = ((-delta) as usize).min(n);
            let mut head = R::zero();
            for &g in &gout[..d] {
                head = head + g;
            }
            gx_row[0] = gx_row[0] + w * head;
            for (gx, &g) in gx_row[..n - d].iter_mut().zip(&gout[d..]) {
                *gx = *gx + w * g;
            }
        }
    } else {
        for (ox, &g) in gout.iter().enumerate() {
            let i = ((ox * stride) as isize + delta).clamp(0, n as isize - 1) as usize;
            gx_row[i] = gx_row[i] + w * g;
        }
    }
}

pub(crate) fn backward_input<R: Real>(
    w: &[R],
    ws: &[usize; 5],
    gout: &[R],
    os: &[usize; 4],
    xs: &[usize; 4],
    stride: usize,
    gx: &mut [R],
) {
    let [cin, iz, iy, ix] = *xs;
    let [cout, _, kz, ky, kx] = *ws;
    let [_, oz, oy, ox] = *os;
    let (pz, py, px) = (kz / 2, ky / 2, kx / 2);

    let fast3 = stride == 1 && kx == 3;
    for oc in 0..cout {
        let g_ch = &gout[oc * oz * oy * ox..(oc + 1) * oz * oy * ox];
        for ic in 0..cin {
            let gx_ch = &mut gx[ic * iz * iy * ix..(ic + 1) * iz * iy * ix];
            let w_base = ((oc * cin) + ic) * kz * ky * kx;
            for dz in 0..kz {
                for dy in 0..ky {
                    let w_row = &w[w_base + (dz * ky + dy) * kx..w_base + (dz * ky + dy) * kx + kx];
                    for zo in 0..oz {
                        let zi = ((zo * stride) as isize + dz as isize - pz as isize)
                            .clamp(0, iz as isize - 1) as usize;
                        for yo in 0..oy {
                            let yi = ((yo * stride) as isize + dy as isize - py as isize)
                                .clamp(0, iy as isize - 1) as usize;
                            let g_row = &g_ch[(zo * oy + yo) * ox..(zo * oy + yo) * ox + ox];
                            let gx_row =
                                &mut gx_ch[(zi * iy + yi) * ix..(zi * iy + yi) * ix + ix];
                            if fast3 {
                                // gather form of the three shifted scatters
                                let (w0, w1, w2) = (w_row[0], w_row[1], w_row[2]);
                                let n = gx_row.len();
                                if n == 1 {
                                    gx_row[0] = gx_row[0] + (w0 + w1 + w2) * g_row[0];
                                } else {
                                    gx_row[0] =
                                        gx_row[0] + w0 * (g_row[0] + g_row[1]) + w1 * g_row[0];
                                    let g_row = &g_row[..n];
                                    for (((gx, &ga), &gb), &gc) in gx_row[1..n - 1]
                                        .iter_mut()
                                        .zip(&g_row[2..n])
                                        .zip(&g_row[1..n - 1])
                                        .zip(&g_row[..n - 2])
                                    {
                                        *gx = *gx + w0 * ga + w1 * gb + w2 * gc;
                                    }
                                    gx_row[n - 1] = gx_row[n - 1]
                                        + w1 * g_row[n - 1]
                                        + w2 * (g_row[n - 2] + g_row[n - 1]);
                                }
                            } else {
                                for (dx, &wv) in w_row.iter().enumerate() {
                                    let delta = dx as isize - px as isize;
                                    scatter_shifted(gx_row, g_row, wv, delta, stride);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
