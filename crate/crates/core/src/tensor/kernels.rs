//! Raw slice kernels behind the graph operations.
//!
//! All buffers are row-major. Output buffers are accumulated into, not
//! overwritten, so backward passes can sum contributions in place.

/// Runs `$body` compiled with AVX2 enabled when the CPU supports it.
///
/// Float contraction stays off in both versions, so the vector and scalar
/// paths produce bit-identical results.
macro_rules! dispatch {
    ($avx:ident, $generic:ident, ($($arg:expr),*)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                return unsafe { $avx($($arg),*) };
            }
        }
        $generic($($arg),*)
    }};
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    dispatch!(matmul_acc_avx2, matmul_acc_generic, (a, b, out, m, k, n))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_acc_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_acc_generic(a, b, out, m, k, n)
}

#[inline(always)]
fn matmul_acc_generic(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            axpy(aip, &b[p * n..(p + 1) * n], out_row);
        }
    }
}

/// `y += alpha · x`
#[inline(always)]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    let len = y.len().min(x.len());
    let (x, y) = (&x[..len], &mut y[..len]);
    for i in 0..len {
        y[i] += alpha * x[i];
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let bt = transpose(b, k, n);
    matmul_acc(g, &bt, out, m, n, k);
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    dispatch!(matmul_tn_acc_avx2, matmul_tn_acc_generic, (a, g, out, m, k, n))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_tn_acc_avx2(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_tn_acc_generic(a, g, out, m, k, n)
}

#[inline(always)]
fn matmul_tn_acc_generic(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            axpy(aip, g_row, &mut out[p * n..(p + 1) * n]);
        }
    }
}

/// Row-major transpose of an `r×c` buffer.
pub fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four partial sums let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Geometry of a 1-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub in_len: usize,
}

impl ConvGeometry {
    pub fn padded_len(&self) -> usize {
        self.in_len + self.pad_left + self.pad_right
    }

    /// `floor((T_padded − k) / stride) + 1`, or `None` if the input is too short.
    pub fn out_len(&self) -> Option<usize> {
        let padded = self.padded_len();
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    fn channels_per_group(&self) -> (usize, usize) {
        (
            self.in_channels / self.groups,
            self.out_channels / self.groups,
        )
    }

    fn padded(&self, x: &[f64]) -> Vec<f64> {
        let tp = self.padded_len();
        let mut xp = vec![0.0; self.in_channels * tp];
        for c in 0..self.in_channels {
            xp[c * tp + self.pad_left..c * tp + self.pad_left + self.in_len]
                .copy_from_slice(&x[c * self.in_len..(c + 1) * self.in_len]);
        }
        xp
    }
}

/// `out[C_out×T_out] += conv(x[C_in×T], w[C_out×(C_in/groups)×k])`
pub fn conv1d_acc(geo: &ConvGeometry, x: &[f64], w: &[f64], out: &mut [f64]) {
    let t_out = geo.out_len().expect("conv1d input shorter than kernel");
    let (cin_g, cout_g) = geo.channels_per_group();
    let tp = geo.padded_len();
    let xp = geo.padded(x);
    let (k, s) = (geo.kernel, geo.stride);
    for o in 0..geo.out_channels {
        let g = o / cout_g;
        let out_row = &mut out[o * t_out..(o + 1) * t_out];
        for ci in 0..cin_g {
            let c = g * cin_g + ci;
            let x_row = &xp[c * tp..(c + 1) * tp];
            let w_row = &w[(o * cin_g + ci) * k..(o * cin_g + ci + 1) * k];
            for (j, &wv) in w_row.iter().enumerate() {
                if s == 1 {
                    for (ov, &xv) in out_row.iter_mut().zip(&x_row[j..j + t_out]) {
                        *ov += wv * xv;
                    }
                } else {
                    for (t, ov) in out_row.iter_mut().enumerate() {
                        *ov += wv * x_row[t * s + j];
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients of [`conv1d_acc`] for upstream `g`.
pub fn conv1d_backward_acc(
    geo: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let t_out = geo.out_len().expect("conv1d input shorter than kernel");
    let (cin_g, cout_g) = geo.channels_per_group();
    let tp = geo.padded_len();
    let (k, s) = (geo.kernel, geo.stride);

    if let Some(dw) = dw {
        let xp = geo.padded(x);
        for o in 0..geo.out_channels {
            let grp = o / cout_g;
            let g_row = &g[o * t_out..(o + 1) * t_out];
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                let x_row = &xp[c * tp..(c + 1) * tp];
                for j in 0..k {
                    let acc = if s == 1 {
                        dot(g_row, &x_row[j..j + t_out])
                    } else {
                        g_row
                            .iter()
                            .enumerate()
                            .map(|(t, &gv)| gv * x_row[t * s + j])
                            .sum()
                    };
                    dw[(o * cin_g + ci) * k + j] += acc;
                }
            }
        }
    }

    if let Some(dx) = dx {
        let mut dxp = vec![0.0; geo.in_channels * tp];
        for o in 0..geo.out_channels {
            let grp = o / cout_g;
            let g_row = &g[o * t_out..(o + 1) * t_out];
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                let dx_row = &mut dxp[c * tp..(c + 1) * tp];
                let w_row = &w[(o * cin_g + ci) * k..(o * cin_g + ci + 1) * k];
                for (j, &wv) in w_row.iter().enumerate() {
                    if s == 1 {
                        for (dv, &gv) in dx_row[j..j + t_out].iter_mut().zip(g_row) {
                            *dv += wv * gv;
                        }
                    } else {
                        for (t, &gv) in g_row.iter().enumerate() {
                            dx_row[t * s + j] += wv * gv;
                        }
                    }
                }
            }
        }
        for c in 0..geo.in_channels {
            let src = &dxp[c * tp + geo.pad_left..c * tp + geo.pad_left + geo.in_len];
            for (d, &v) in dx[c * geo.in_len..(c + 1) * geo.in_len].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
}
