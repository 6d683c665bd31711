//! Differentiable building blocks over channels-last [`Tensor`]s.
//!
//! Layers are plain descriptors holding offsets into a network's flat
//! parameter vector; `forward` reads parameters, `backward` accumulates into a
//! gradient vector of the same length and returns the input gradient.

use rand::Rng;

use super::params::{fill_normal, ParamLayout};
use super::tensor::Tensor;
use crate::volume::{voxel_count, Dims};

/// Same-padded, stride-1 convolution with per-axis kernel extent 1 or 3.
#[derive(Debug, Clone)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub w: usize,
    pub b: usize,
}

impl Conv {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, kernel: [usize; 3]) -> Self {
        let taps = kernel.iter().product::<usize>();
        let w = layout.push(format!("{name}.weight"), vec![taps, cin, cout]);
        let b = layout.push(format!("{name}.bias"), vec![cout]);
        Self {
            cin,
            cout,
            kernel,
            w,
            b,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.taps() * self.cin * self.cout
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R, gain: f64) {
        let fan_in = (self.taps() * self.cin) as f64;
        fill_normal(rng, &mut params[self.w..self.w + self.weight_len()], gain * (2.0 / fan_in).sqrt());
        params[self.b..self.b + self.cout].fill(0.0);
    }

    pub fn zero(&self, params: &mut [f64]) {
        params[self.w..self.w + self.weight_len()].fill(0.0);
        params[self.b..self.b + self.cout].fill(0.0);
    }

    /// Visits every pairing of an output x-line with an in-bounds input
    /// x-line. `f(block, out_line, in_line)` where `block = ty + ky * tz` and a
    /// line index is `y + ny * z`.
    fn for_each_line(&self, dims: Dims, mut f: impl FnMut(usize, usize, usize)) {
        let [_, ny, nz] = dims;
        let [_, ky, kz] = self.kernel;
        let (ry, rz) = ((ky / 2) as isize, (kz / 2) as isize);
        let range = |d: isize, n: usize| -> (usize, usize) {
            let lo = (-d).max(0) as usize;
            let hi = (n as isize - d).min(n as isize).max(0) as usize;
            (lo, hi)
        };
        for tz in 0..kz {
            let dz = tz as isize - rz;
            let (z0, z1) = range(dz, nz);
            for ty in 0..ky {
                let dy = ty as isize - ry;
                let (y0, y1) = range(dy, ny);
                for zo in z0..z1 {
                    let zi = (zo as isize + dz) as usize;
                    for yo in y0..y1 {
                        let yi = (yo as isize + dy) as usize;
                        f(ty + ky * tz, yo + ny * zo, yi + ny * zi);
                    }
                }
            }
        }
    }

    fn pad_x(&self, x: &Tensor) -> Vec<f64> {
        let px = self.kernel[0] / 2;
        if px == 0 {
            return x.data.clone();
        }
        let [nx, ny, nz] = x.dims;
        let c = x.c;
        let row = (nx + 2 * px) * c;
        let mut out = vec![0.0; row * ny * nz];
        for (line, src) in x.data.chunks_exact(nx * c).enumerate() {
            out[line * row + px * c..line * row + (px + nx) * c].copy_from_slice(src);
        }
        out
    }

    pub fn forward(&self, p: &[f64], x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.cin);
        let (cin, cout) = (self.cin, self.cout);
        let nx = x.dims[0];
        let kw = self.kernel[0] * cin;
        let row_in = (nx + 2 * (self.kernel[0] / 2)) * cin;
        let mut y = Tensor::zeros(x.dims, cout);
        let bias = &p[self.b..self.b + cout];
        for row in y.data.chunks_exact_mut(cout) {
            row.copy_from_slice(bias);
        }
        let w = &p[self.w..self.w + self.weight_len()];
        let xp = self.pad_x(x);
        let yd = &mut y.data;
        self.for_each_line(x.dims, |b, ol, il| {
            let wb = &w[b * kw * cout..(b + 1) * kw * cout];
            let xs = &xp[il * row_in..(il + 1) * row_in];
            let ys = &mut yd[ol * nx * cout..(ol + 1) * nx * cout];
            dispatch!(cout, rows_times_matrix(xs, cin, kw, wb, ys, cout, cout, nx));
        });
        y
    }

    /// Accumulates weight/bias gradients; returns the input gradient when requested.
    pub fn backward(&self, p: &[f64], x: &Tensor, gy: &Tensor, g: &mut [f64], need_input: bool) -> Option<Tensor> {
        let (cin, cout) = (self.cin, self.cout);
        debug_assert_eq!(gy.data.len(), x.voxels() * cout);
        let nx = x.dims[0];
        let px = self.kernel[0] / 2;
        let kw = self.kernel[0] * cin;
        let row_in = (nx + 2 * px) * cin;
        {
            let gb = &mut g[self.b..self.b + cout];
            for row in gy.data.chunks_exact(cout) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        let xp = self.pad_x(x);
        let gyd = &gy.data;
        let gw_all = &mut g[self.w..self.w + self.weight_len()];
        self.for_each_line(x.dims, |b, ol, il| {
            let gwb = &mut gw_all[b * kw * cout..(b + 1) * kw * cout];
            let xs = &xp[il * row_in..(il + 1) * row_in];
            let gs = &gyd[ol * nx * cout..(ol + 1) * nx * cout];
            dispatch!(cout, outer_accumulate(xs, cin, kw, gs, gwb, cout, nx));
        });
        if !need_input {
            return None;
        }
        // Input gradient: scatter gy through the transposed weight blocks.
        let w = &p[self.w..self.w + self.weight_len()];
        let blk = kw * cout;
        let mut wt = vec![0.0; w.len()];
        for b in 0..w.len() / blk {
            for r in 0..kw {
                for o in 0..cout {
                    wt[b * blk + o * kw + r] = w[b * blk + r * cout + o];
                }
            }
        }
        let mut gxp = vec![0.0; xp.len()];
        self.for_each_line(x.dims, |b, ol, il| {
            let wb = &wt[b * blk..(b + 1) * blk];
            let gs = &gyd[ol * nx * cout..(ol + 1) * nx * cout];
            let out = &mut gxp[il * row_in..(il + 1) * row_in];
            dispatch!(kw, rows_times_matrix(gs, cout, cout, wb, out, cin, kw, nx));
        });
        let mut gx = Tensor::zeros(x.dims, cin);
        for (line, dst) in gx.data.chunks_exact_mut(nx * cin).enumerate() {
            dst.copy_from_slice(&gxp[line * row_in + px * cin..line * row_in + (px + nx) * cin]);
        }
        Some(gx)
    }
}

/// Calls `$f::<N>` for common row widths, falling back to the dynamic kernel.
macro_rules! dispatch {
    ($n:expr, $f:ident($($arg:expr),*)) => {
        match $n {
            1 => $f::<1>($($arg),*),
            2 => $f::<2>($($arg),*),
            3 => $f::<3>($($arg),*),
            4 => $f::<4>($($arg),*),
            6 => $f::<6>($($arg),*),
            8 => $f::<8>($($arg),*),
            9 => $f::<9>($($arg),*),
            12 => $f::<12>($($arg),*),
            16 => $f::<16>($($arg),*),
            24 => $f::<24>($($arg),*),
            32 => $f::<32>($($arg),*),
            48 => $f::<48>($($arg),*),
            64 => $f::<64>($($arg),*),
            96 => $f::<96>($($arg),*),
            _ => $f::<0>($($arg),*),
        }
    };
}
use dispatch;

/// For `rows` rows: `out[j*os..][..n] += a[j*as_..][..k] * m`, with `m` a
/// `k x n` row-major matrix. Rows may overlap; they are processed in order.
/// `N` equals `n` when nonzero.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn rows_times_matrix<const N: usize>(
    a: &[f64],
    a_stride: usize,
    k: usize,
    m: &[f64],
    out: &mut [f64],
    out_stride: usize,
    n: usize,
    rows: usize,
) {
    for j in 0..rows {
        let ar = &a[j * a_stride..j * a_stride + k];
        let or = &mut out[j * out_stride..j * out_stride + n];
        if N == 0 {
            for (&av, mr) in ar.iter().zip(m.chunks_exact(n)) {
                for (o, &mv) in or.iter_mut().zip(mr) {
                    *o += av * mv;
                }
            }
        } else {
            let mut acc: [f64; N] = (&*or).try_into().unwrap();
            for (&av, mr) in ar.iter().zip(m.chunks_exact(N)) {
                for o in 0..N {
                    acc[o] += av * mr[o];
                }
            }
            or.copy_from_slice(&acc);
        }
    }
}

/// `m += sum_j a_j^T b_j` over `rows` rows, `a_j = a[j*as_..][..k]` and
/// `b_j = b[j*n..][..n]`; `m` is `k x n`.
#[inline(always)]
fn outer_accumulate<const N: usize>(a: &[f64], a_stride: usize, k: usize, b: &[f64], m: &mut [f64], n: usize, rows: usize) {
    for (r, mr) in m.chunks_exact_mut(n).enumerate().take(k) {
        if N == 0 {
            for j in 0..rows {
                let av = a[j * a_stride + r];
                for (o, &bv) in mr.iter_mut().zip(&b[j * n..(j + 1) * n]) {
                    *o += av * bv;
                }
            }
        } else {
            let mut acc: [f64; N] = (&*mr).try_into().unwrap();
            for (j, br) in b.chunks_exact(N).enumerate().take(rows) {
                let av = a[j * a_stride + r];
                for o in 0..N {
                    acc[o] += av * br[o];
                }
            }
            mr.copy_from_slice(&acc);
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// x * sigmoid(x)
pub fn silu(x: &Tensor) -> Tensor {
    Tensor {
        dims: x.dims,
        c: x.c,
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
    }
}

/// Gradient of [`silu`] given its input.
pub fn silu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    Tensor {
        dims: x.dims,
        c: x.c,
        data: x
            .data
            .iter()
            .zip(&gy.data)
            .map(|(&v, &g)| {
                let s = sigmoid(v);
                g * s * (1.0 + v * (1.0 - s))
            })
            .collect(),
    }
}

/// Dense layer `y = W x + b` with `W` stored row-major `[out][in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub nin: usize,
    pub nout: usize,
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, nin: usize, nout: usize) -> Self {
        let w = layout.push(format!("{name}.weight"), vec![nout, nin]);
        let b = layout.push(format!("{name}.bias"), vec![nout]);
        Self { nin, nout, w, b }
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R, std: f64) {
        fill_normal(rng, &mut params[self.w..self.w + self.nin * self.nout], std);
        params[self.b..self.b + self.nout].fill(0.0);
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.nout)
            .map(|o| {
                let row = &p[self.w + o * self.nin..self.w + (o + 1) * self.nin];
                p[self.b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Parameter gradients only; inputs to these layers are constants.
    pub fn backward_params(&self, x: &[f64], gy: &[f64], g: &mut [f64]) {
        for (o, &go) in gy.iter().enumerate() {
            g[self.b + o] += go;
            let row = &mut g[self.w + o * self.nin..self.w + (o + 1) * self.nin];
            for (r, &xi) in row.iter_mut().zip(x) {
                *r += go * xi;
            }
        }
    }
}

/// Per-channel affine modulation `h * (1 + scale) + shift`, with
/// `(scale, shift)` produced by a [`Linear`] from the time embedding.
#[derive(Debug, Clone)]
pub struct Film {
    pub channels: usize,
    pub proj: Linear,
}

impl Film {
    pub fn new(layout: &mut ParamLayout, name: &str, embed_dim: usize, channels: usize) -> Self {
        Self {
            channels,
            proj: Linear::new(layout, name, embed_dim, 2 * channels),
        }
    }

    pub fn coefficients(&self, p: &[f64], temb: &[f64]) -> Vec<f64> {
        self.proj.forward(p, temb)
    }

    pub fn forward(&self, coef: &[f64], h: &Tensor) -> Tensor {
        let c = self.channels;
        let mut y = h.clone();
        for row in y.data.chunks_exact_mut(c) {
            for (ch, v) in row.iter_mut().enumerate() {
                *v = *v * (1.0 + coef[ch]) + coef[c + ch];
            }
        }
        y
    }

    pub fn backward(&self, coef: &[f64], temb: &[f64], h: &Tensor, gy: &Tensor, g: &mut [f64]) -> Tensor {
        let c = self.channels;
        let mut gcoef = vec![0.0; 2 * c];
        let mut gh = gy.clone();
        for (hr, (gr, ghr)) in h
            .data
            .chunks_exact(c)
            .zip(gy.data.chunks_exact(c).zip(gh.data.chunks_exact_mut(c)))
        {
            for ch in 0..c {
                gcoef[ch] += gr[ch] * hr[ch];
                gcoef[c + ch] += gr[ch];
                ghr[ch] = gr[ch] * (1.0 + coef[ch]);
            }
        }
        self.proj.backward_params(temb, &gcoef, g);
        gh
    }
}

/// Per-axis pooling factor: 2 where the axis has more than one voxel.
pub fn pool_factors(dims: Dims, axes: [bool; 3]) -> [usize; 3] {
    std::array::from_fn(|a| if axes[a] && dims[a] > 1 { 2 } else { 1 })
}

pub fn pooled_dims(dims: Dims, f: [usize; 3]) -> Dims {
    std::array::from_fn(|a| dims[a].div_ceil(f[a]))
}

/// Average pooling with ceil-sized output; partial edge windows average over
/// the voxels they contain.
pub fn avg_pool(x: &Tensor, f: [usize; 3]) -> Tensor {
    let od = pooled_dims(x.dims, f);
    let c = x.c;
    let mut y = Tensor::zeros(od, c);
    let mut count = vec![0u32; voxel_count(od)];
    let [nx, ny, nz] = x.dims;
    for z in 0..nz {
        for yy in 0..ny {
            for xx in 0..nx {
                let o = xx / f[0] + od[0] * (yy / f[1] + od[1] * (z / f[2]));
                let i = xx + nx * (yy + ny * z);
                count[o] += 1;
                for ch in 0..c {
                    y.data[o * c + ch] += x.data[i * c + ch];
                }
            }
        }
    }
    for (o, &n) in count.iter().enumerate() {
        let inv = 1.0 / n as f64;
        for v in &mut y.data[o * c..(o + 1) * c] {
            *v *= inv;
        }
    }
    y
}

pub fn avg_pool_backward(in_dims: Dims, f: [usize; 3], gy: &Tensor) -> Tensor {
    let od = gy.dims;
    let c = gy.c;
    let mut count = vec![0u32; voxel_count(od)];
    let [nx, ny, nz] = in_dims;
    let out_index = |xx: usize, yy: usize, z: usize| xx / f[0] + od[0] * (yy / f[1] + od[1] * (z / f[2]));
    for z in 0..nz {
        for yy in 0..ny {
            for xx in 0..nx {
                count[out_index(xx, yy, z)] += 1;
            }
        }
    }
    let mut gx = Tensor::zeros(in_dims, c);
    for z in 0..nz {
        for yy in 0..ny {
            for xx in 0..nx {
                let o = out_index(xx, yy, z);
                let i = xx + nx * (yy + ny * z);
                let inv = 1.0 / count[o] as f64;
                for ch in 0..c {
                    gx.data[i * c + ch] = gy.data[o * c + ch] * inv;
                }
            }
        }
    }
    gx
}

/// Nearest-neighbour upsampling by `f` onto exactly `dims` (cropping the
/// ceil-sized overhang).
pub fn upsample(x: &Tensor, f: [usize; 3], dims: Dims) -> Tensor {
    let c = x.c;
    let sd = x.dims;
    let mut y = Tensor::zeros(dims, c);
    let [nx, ny, nz] = dims;
    for z in 0..nz {
        for yy in 0..ny {
            for xx in 0..nx {
                let s = xx / f[0] + sd[0] * (yy / f[1] + sd[1] * (z / f[2]));
                let o = xx + nx * (yy + ny * z);
                y.data[o * c..(o + 1) * c].copy_from_slice(&x.data[s * c..(s + 1) * c]);
            }
        }
    }
    y
}

pub fn upsample_backward(src_dims: Dims, f: [usize; 3], gy: &Tensor) -> Tensor {
    let c = gy.c;
    let mut gx = Tensor::zeros(src_dims, c);
    let [nx, ny, nz] = gy.dims;
    for z in 0..nz {
        for yy in 0..ny {
            for xx in 0..nx {
                let s = xx / f[0] + src_dims[0] * (yy / f[1] + src_dims[1] * (z / f[2]));
                let o = xx + nx * (yy + ny * z);
                for ch in 0..c {
                    gx.data[s * c + ch] += gy.data[o * c + ch];
                }
            }
        }
    }
    gx
}

/// Single-head self-attention over voxels with a residual connection:
/// `y = x + softmax(q k^T / sqrt(c)) v Wo + bo`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub c: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    a: Vec<f64>,
    o: Vec<f64>,
}

/// `out[n][j] = sum_i x[n][i] * w[i][j]` for row-major matrices.
fn matmul(x: &[f64], w: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    for r in 0..n {
        let xr = &x[r * din..(r + 1) * din];
        let or = &mut out[r * dout..(r + 1) * dout];
        for (i, &a) in xr.iter().enumerate() {
            for (o, &wv) in or.iter_mut().zip(&w[i * dout..(i + 1) * dout]) {
                *o += a * wv;
            }
        }
    }
    out
}

/// Gradients of `out = x w`: accumulates `x^T g` into `gw`, returns `g w^T`.
fn matmul_backward(x: &[f64], w: &[f64], g: &[f64], n: usize, din: usize, dout: usize, gw: &mut [f64]) -> Vec<f64> {
    let mut gx = vec![0.0; n * din];
    for r in 0..n {
        let xr = &x[r * din..(r + 1) * din];
        let gr = &g[r * dout..(r + 1) * dout];
        let gxr = &mut gx[r * din..(r + 1) * din];
        for i in 0..din {
            let wr = &w[i * dout..(i + 1) * dout];
            gxr[i] = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
            let gwr = &mut gw[i * dout..(i + 1) * dout];
            for (o, &gv) in gwr.iter_mut().zip(gr) {
                *o += xr[i] * gv;
            }
        }
    }
    gx
}

impl Attention {
    pub fn new(layout: &mut ParamLayout, name: &str, c: usize) -> Self {
        let wq = layout.push(format!("{name}.wq"), vec![c, c]);
        let wk = layout.push(format!("{name}.wk"), vec![c, c]);
        let wv = layout.push(format!("{name}.wv"), vec![c, c]);
        let wo = layout.push(format!("{name}.wo"), vec![c, c]);
        let bo = layout.push(format!("{name}.bo"), vec![c]);
        Self { c, wq, wk, wv, wo, bo }
    }

    /// Random projections; the output projection starts at zero so the block is
    /// initially the identity.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let c = self.c;
        let std = (1.0 / c as f64).sqrt();
        for off in [self.wq, self.wk, self.wv] {
            fill_normal(rng, &mut params[off..off + c * c], std);
        }
        params[self.wo..self.wo + c * c].fill(0.0);
        params[self.bo..self.bo + c].fill(0.0);
    }

    pub fn forward(&self, p: &[f64], x: &Tensor) -> (Tensor, AttentionCache) {
        let c = self.c;
        let n = x.voxels();
        let m = |off: usize| &p[off..off + c * c];
        let q = matmul(&x.data, m(self.wq), n, c, c);
        let k = matmul(&x.data, m(self.wk), n, c, c);
        let v = matmul(&x.data, m(self.wv), n, c, c);
        let scale = 1.0 / (c as f64).sqrt();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            let qi = &q[i * c..(i + 1) * c];
            let row = &mut a[i * n..(i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                *r = scale * qi.iter().zip(&k[j * c..(j + 1) * c]).map(|(a, b)| a * b).sum::<f64>();
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                sum += *r;
            }
            row.iter_mut().for_each(|r| *r /= sum);
        }
        let o = matmul(&a, &v, n, n, c);
        let proj = matmul(&o, m(self.wo), n, c, c);
        let mut y = x.clone();
        for (r, (yr, pr)) in y.data.chunks_exact_mut(c).zip(proj.chunks_exact(c)).enumerate() {
            let _ = r;
            for ch in 0..c {
                yr[ch] += pr[ch] + p[self.bo + ch];
            }
        }
        (y, AttentionCache { q, k, v, a, o })
    }

    pub fn backward(&self, p: &[f64], x: &Tensor, cache: &AttentionCache, gy: &Tensor, g: &mut [f64]) -> Tensor {
        let c = self.c;
        let n = x.voxels();
        let scale = 1.0 / (c as f64).sqrt();
        for row in gy.data.chunks_exact(c) {
            for ch in 0..c {
                g[self.bo + ch] += row[ch];
            }
        }
        let go = matmul_backward(&cache.o, &p[self.wo..self.wo + c * c], &gy.data, n, c, c, &mut g[self.wo..self.wo + c * c]);
        // o = a v
        let mut ga = vec![0.0; n * n];
        let mut gv = vec![0.0; n * c];
        for i in 0..n {
            let gor = &go[i * c..(i + 1) * c];
            for j in 0..n {
                let vj = &cache.v[j * c..(j + 1) * c];
                ga[i * n + j] = gor.iter().zip(vj).map(|(a, b)| a * b).sum();
                let aij = cache.a[i * n + j];
                for (gvv, &gg) in gv[j * c..(j + 1) * c].iter_mut().zip(gor) {
                    *gvv += aij * gg;
                }
            }
        }
        // softmax rows
        let mut gs = vec![0.0; n * n];
        for i in 0..n {
            let ar = &cache.a[i * n..(i + 1) * n];
            let gar = &ga[i * n..(i + 1) * n];
            let dot: f64 = ar.iter().zip(gar).map(|(a, b)| a * b).sum();
            for j in 0..n {
                gs[i * n + j] = ar[j] * (gar[j] - dot) * scale;
            }
        }
        let mut gq = vec![0.0; n * c];
        let mut gk = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..n {
                let s = gs[i * n + j];
                if s == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    gq[i * c + ch] += s * cache.k[j * c + ch];
                    gk[j * c + ch] += s * cache.q[i * c + ch];
                }
            }
        }
        let mut gx = gy.clone();
        for (off, grad) in [(self.wq, &gq), (self.wk, &gk), (self.wv, &gv)] {
            let gin = matmul_backward(&x.data, &p[off..off + c * c], grad, n, c, c, &mut g[off..off + c * c]);
            for (a, b) in gx.data.iter_mut().zip(&gin) {
                *a += b;
            }
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: Dims, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(dims, c);
        fill_normal(&mut rng, &mut t.data, 1.0);
        t
    }

    /// Direct 7-loop convolution used as an oracle.
    fn naive_conv(conv: &Conv, p: &[f64], x: &Tensor) -> Tensor {
        let [nx, ny, nz] = x.dims;
        let [kx, ky, kz] = conv.kernel;
        let mut y = Tensor::zeros(x.dims, conv.cout);
        for z in 0..nz {
            for yy in 0..ny {
                for xx in 0..nx {
                    for co in 0..conv.cout {
                        let mut acc = p[conv.b + co];
                        for tz in 0..kz {
                            for ty in 0..ky {
                                for tx in 0..kx {
                                    let (sx, sy, sz) = (
                                        xx as isize + tx as isize - (kx / 2) as isize,
                                        yy as isize + ty as isize - (ky / 2) as isize,
                                        z as isize + tz as isize - (kz / 2) as isize,
                                    );
                                    if sx < 0 || sy < 0 || sz < 0 || sx >= nx as isize || sy >= ny as isize || sz >= nz as isize {
                                        continue;
                                    }
                                    let i = sx as usize + nx * (sy as usize + ny * sz as usize);
                                    let tap = tx + kx * (ty + ky * tz);
                                    for ci in 0..conv.cin {
                                        acc += x.data[i * conv.cin + ci]
                                            * p[conv.w + (tap * conv.cin + ci) * conv.cout + co];
                                    }
                                }
                            }
                        }
                        y.data[(xx + nx * (yy + ny * z)) * conv.cout + co] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (cin, cout, kernel) in [(2, 3, [3, 3, 3]), (3, 1, [3, 3, 1]), (1, 4, [1, 1, 1])] {
            let mut layout = ParamLayout::default();
            let conv = Conv::new(&mut layout, "c", cin, cout, kernel);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut p = vec![0.0; layout.len()];
            fill_normal(&mut rng, &mut p, 1.0);
            let x = random_tensor([4, 3, 5], cin, 2);
            let fast = conv.forward(&p, &x);
            let slow = naive_conv(&conv, &p, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_and_upsample_handle_odd_dims() {
        let x = random_tensor([5, 4, 3], 2, 3);
        let f = pool_factors(x.dims, [true; 3]);
        let y = avg_pool(&x, f);
        assert_eq!(y.dims, [3, 2, 2]);
        // output (2, 0, 1) covers x = 4 only, y = 0..2, z = 2 only
        let want = (x.data[(4 + 5 * (0 + 4 * 2)) * 2] + x.data[(4 + 5 * (1 + 4 * 2)) * 2]) / 2.0;
        assert!((y.data[(2 + 3 * (0 + 2 * 1)) * 2] - want).abs() < 1e-14);
        let up = upsample(&y, f, x.dims);
        assert_eq!(up.dims, x.dims);
        assert_eq!(up.data[(4 + 5 * (1 + 4 * 2)) * 2], y.data[(2 + 3 * (0 + 2 * 1)) * 2]);
    }

    #[test]
    fn pool_of_constant_is_constant() {
        let mut x = Tensor::zeros([5, 3, 1], 1);
        x.data.fill(2.5);
        let y = avg_pool(&x, pool_factors(x.dims, [true; 3]));
        assert_eq!(y.dims, [3, 2, 1]);
        assert!(y.data.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }
}
