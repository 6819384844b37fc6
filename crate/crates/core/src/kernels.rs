//! Forward and backward kernels for the two convolution families.
//!
//! All arithmetic is `f64`. Loop nesting and GEMM blocking are fixed, so a
//! given input always produces bit-identical output.

use crate::error::{Error, Result};
use crate::gemm::{gemm, Strides};

/// Number of im2col columns processed per GEMM call.
const TARGET_COLS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    /// `x` is `[B, C_in, H, W]`, `w` is `[C_out, C_in, k, k]`.
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape(OP, format!("input {x:?}, weight {w:?}")));
        }
        if w[1] != x[1] {
            return Err(Error::shape(
                OP,
                format!("weight expects {} input channels, input has {}", w[1], x[1]),
            ));
        }
        if w[2] != w[3] || w[2] == 0 {
            return Err(Error::shape(OP, format!("kernel must be square, got {w:?}")));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        let k = w[2];
        let out_extent = |n: usize| -> Result<usize> {
            let padded = n + 2 * pad;
            if padded < k {
                return Err(Error::shape(
                    OP,
                    format!("non-positive output extent: input {n}, pad {pad}, kernel {k}"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(Conv2dGeom {
            batch: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            k,
            stride,
            pad,
            ho: out_extent(x[2])?,
            wo: out_extent(x[3])?,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn frames_per_chunk(&self) -> usize {
        (TARGET_COLS / self.out_plane().max(1)).clamp(1, self.batch.max(1))
    }

    pub fn out_dims(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in range.
fn valid_cols(g: &Conv2dGeom, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // largest ox with ox*s + kx - p <= w - 1
    let hi = if g.w + p > kx { ((g.w + p - kx - 1) / s + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Writes the patches of one frame into columns `[col0, col0 + ho*wo)` of a
/// `[patch, ncols]` matrix.
fn im2col(g: &Conv2dGeom, frame: &[f64], cols: &mut [f64], ncols: usize, col0: usize) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for ci in 0..g.cin {
        let plane = &frame[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncols + col0..row * ncols + col0 + g.out_plane()];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let ix0 = lo * s + kx - g.pad;
                    if s == 1 {
                        line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[ix0 + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into one frame.
fn col2im(g: &Conv2dGeom, cols: &[f64], ncols: usize, col0: usize, frame: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for ci in 0..g.cin {
        let plane = &mut frame[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ncols + col0..row * ncols + col0 + g.out_plane()];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * s + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if s == 1 {
                        for (d, &v) in dst[ix0..ix0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            dst[ix0 + j * s] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &Conv2dGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (plane_in, plane_out) = (g.cin * g.in_plane(), g.cout * g.out_plane());
    let mut out = vec![0.0; g.batch * plane_out];
    let chunk = g.frames_per_chunk();
    let mut cols = vec![0.0; g.patch() * chunk * g.out_plane()];
    let mut tmp = vec![0.0; g.cout * chunk * g.out_plane()];
    let mut f0 = 0;
    while f0 < g.batch {
        let nf = chunk.min(g.batch - f0);
        let ncols = nf * g.out_plane();
        for fi in 0..nf {
            let frame = &x[(f0 + fi) * plane_in..(f0 + fi + 1) * plane_in];
            im2col(g, frame, &mut cols, ncols, fi * g.out_plane());
        }
        gemm(
            g.cout,
            g.patch(),
            ncols,
            w,
            Strides(g.patch(), 1),
            &cols,
            Strides(ncols, 1),
            0.0,
            &mut tmp,
            Strides(ncols, 1),
        );
        for fi in 0..nf {
            let dst = &mut out[(f0 + fi) * plane_out..(f0 + fi + 1) * plane_out];
            for co in 0..g.cout {
                let src = &tmp[co * ncols + fi * g.out_plane()..][..g.out_plane()];
                let bias = b[co];
                for (d, &s) in dst[co * g.out_plane()..(co + 1) * g.out_plane()]
                    .iter_mut()
                    .zip(src)
                {
                    *d = s + bias;
                }
            }
        }
        f0 += nf;
    }
    out
}

/// Gradient buffers are accumulated into (`+=`), never overwritten.
pub(crate) struct ConvGrads<'a> {
    pub dx: Option<&'a mut [f64]>,
    pub dw: Option<&'a mut [f64]>,
    pub db: Option<&'a mut [f64]>,
}

pub(crate) fn conv2d_backward(
    g: &Conv2dGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut grads: ConvGrads<'_>,
) {
    let (plane_in, plane_out) = (g.cin * g.in_plane(), g.cout * g.out_plane());
    if let Some(db) = grads.db.as_deref_mut() {
        for f in 0..g.batch {
            for (co, d) in db.iter_mut().enumerate() {
                let s: f64 = gout[f * plane_out + co * g.out_plane()..][..g.out_plane()]
                    .iter()
                    .sum();
                *d += s;
            }
        }
    }
    if grads.dx.is_none() && grads.dw.is_none() {
        return;
    }
    let chunk = g.frames_per_chunk();
    let cap = chunk * g.out_plane();
    let mut cols = vec![0.0; g.patch() * cap];
    let mut gtmp = vec![0.0; g.cout * cap];
    let mut f0 = 0;
    while f0 < g.batch {
        let nf = chunk.min(g.batch - f0);
        let ncols = nf * g.out_plane();
        for fi in 0..nf {
            let src = &gout[(f0 + fi) * plane_out..(f0 + fi + 1) * plane_out];
            for co in 0..g.cout {
                gtmp[co * ncols + fi * g.out_plane()..][..g.out_plane()]
                    .copy_from_slice(&src[co * g.out_plane()..(co + 1) * g.out_plane()]);
            }
        }
        if let Some(dw) = grads.dw.as_deref_mut() {
            for fi in 0..nf {
                let frame = &x[(f0 + fi) * plane_in..(f0 + fi + 1) * plane_in];
                im2col(g, frame, &mut cols, ncols, fi * g.out_plane());
            }
            gemm(
                g.cout,
                ncols,
                g.patch(),
                &gtmp,
                Strides(ncols, 1),
                &cols,
                Strides(1, ncols),
                1.0,
                dw,
                Strides(g.patch(), 1),
            );
        }
        if let Some(dx) = grads.dx.as_deref_mut() {
            gemm(
                g.patch(),
                g.cout,
                ncols,
                w,
                Strides(1, g.patch()),
                &gtmp,
                Strides(ncols, 1),
                0.0,
                &mut cols,
                Strides(ncols, 1),
            );
            for fi in 0..nf {
                let frame = &mut dx[(f0 + fi) * plane_in..(f0 + fi + 1) * plane_in];
                col2im(g, &cols, ncols, fi * g.out_plane(), frame);
            }
        }
        f0 += nf;
    }
}

/// Shape of a temporal convolution over `[C_in, T, S]` with a `[C_out, C_in, N]`
/// kernel (`[C, 1, N]` when depthwise) and `m = N/2` frames of zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct TemporalGeom {
    pub cin: usize,
    pub cout: usize,
    pub t: usize,
    pub s: usize,
    pub n: usize,
    pub depthwise: bool,
}

impl TemporalGeom {
    /// `x` is `[C_in, T, H, W]` (trailing spatial axes flattened into S).
    pub fn new(x: &[usize], w: &[usize], depthwise: bool) -> Result<Self> {
        const OP: &str = "conv3d_temporal";
        if x.len() < 2 || w.len() != 3 {
            return Err(Error::shape(OP, format!("input {x:?}, weight {w:?}")));
        }
        let n = w[2];
        if n % 2 == 0 {
            return Err(Error::invalid(OP, format!("temporal kernel extent {n} must be odd")));
        }
        let expected_in = if depthwise { 1 } else { x[0] };
        if w[1] != expected_in || (depthwise && w[0] != x[0]) {
            return Err(Error::shape(
                OP,
                format!("weight {w:?} incompatible with {} input channels", x[0]),
            ));
        }
        Ok(TemporalGeom {
            cin: x[0],
            cout: w[0],
            t: x[1],
            s: x[2..].iter().product(),
            n,
            depthwise,
        })
    }

    pub fn half(&self) -> isize {
        (self.n / 2) as isize
    }

    /// Offset of tap `n` in the flattened `[T * S]` axis.
    fn shift(&self, tap: usize) -> isize {
        (tap as isize - self.half()) * self.s as isize
    }

    /// Output columns in `[j0, j1)` whose source column `j + shift` exists.
    fn valid(&self, tap: usize, j0: usize, j1: usize) -> Option<(usize, usize, isize)> {
        let row = (self.t * self.s) as isize;
        let sh = self.shift(tap);
        let lo = (j0 as isize).max(-sh);
        let hi = (j1 as isize).min(row - sh);
        (hi > lo).then_some((lo as usize, hi as usize, sh))
    }

    /// Index of weight `(co, ci, tap)`; for depthwise kernels `ci` is ignored.
    fn widx(&self, co: usize, ci: usize, tap: usize) -> usize {
        if self.depthwise {
            co * self.n + tap
        } else {
            (co * self.cin + ci) * self.n + tap
        }
    }

    /// Input channels feeding output channel `co`.
    fn sources(&self, co: usize) -> std::ops::Range<usize> {
        if self.depthwise {
            co..co + 1
        } else {
            0..self.cin
        }
    }
}

/// Columns of the flattened `[T * S]` axis handled per tile; sized so the
/// touched slices of every channel stay cache resident.
const TILE: usize = 512;

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += a * v;
    }
}

/// Dot product with eight independent partial sums (vectorizable, and the
/// summation order is still fixed).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    lanes.iter().sum::<f64>() + tail
}

pub(crate) fn temporal_forward(g: &TemporalGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let row = g.t * g.s;
    let mut out = vec![0.0; g.cout * row];
    for j0 in (0..row).step_by(TILE) {
        let j1 = (j0 + TILE).min(row);
        for co in 0..g.cout {
            let dst = &mut out[co * row + j0..co * row + j1];
            dst.fill(b[co]);
            for ci in g.sources(co) {
                for tap in 0..g.n {
                    let Some((lo, hi, sh)) = g.valid(tap, j0, j1) else {
                        continue;
                    };
                    let src = (ci * row) as isize + lo as isize + sh;
                    axpy(
                        &mut dst[lo - j0..hi - j0],
                        w[g.widx(co, ci, tap)],
                        &x[src as usize..src as usize + (hi - lo)],
                    );
                }
            }
        }
    }
    out
}

pub(crate) fn temporal_backward(
    g: &TemporalGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut grads: ConvGrads<'_>,
) {
    let row = g.t * g.s;
    if let Some(db) = grads.db.as_deref_mut() {
        for (co, d) in db.iter_mut().enumerate() {
            *d += gout[co * row..(co + 1) * row].iter().sum::<f64>();
        }
    }
    if let Some(dw) = grads.dw.as_deref_mut() {
        let mut acc = vec![0.0; dw.len()];
        for j0 in (0..row).step_by(TILE) {
            let j1 = (j0 + TILE).min(row);
            for co in 0..g.cout {
                let go = &gout[co * row..(co + 1) * row];
                for ci in g.sources(co) {
                    for tap in 0..g.n {
                        let Some((lo, hi, sh)) = g.valid(tap, j0, j1) else {
                            continue;
                        };
                        let src = ((ci * row) as isize + lo as isize + sh) as usize;
                        acc[g.widx(co, ci, tap)] += dot(&go[lo..hi], &x[src..src + (hi - lo)]);
                    }
                }
            }
        }
        for (d, a) in dw.iter_mut().zip(acc) {
            *d += a;
        }
    }
    if let Some(dx) = grads.dx.as_deref_mut() {
        // dx[ci, j + sh] += w[co, ci, tap] * gout[co, j], tiled over the output
        // column j so each gout slice is reused across taps
        for j0 in (0..row).step_by(TILE) {
            let j1 = (j0 + TILE).min(row);
            for co in 0..g.cout {
                for ci in g.sources(co) {
                    for tap in 0..g.n {
                        let Some((lo, hi, sh)) = g.valid(tap, j0, j1) else {
                            continue;
                        };
                        let dst = ((ci * row) as isize + lo as isize + sh) as usize;
                        axpy(
                            &mut dx[dst..dst + (hi - lo)],
                            w[g.widx(co, ci, tap)],
                            &gout[co * row + lo..co * row + hi],
                        );
                    }
                }
            }
        }
    }
}

