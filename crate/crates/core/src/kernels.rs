//! Numeric kernels shared by the autodiff graph and the incremental decoder.
//!
//! All matrices are row-major slices. Nothing here allocates except the
//! attention kernels' per-head scratch.

/// `C = beta*C + A·B` for strided operands (strides in elements).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[i * rsc + j * csc];
                *x = if beta == 0.0 { 0.0 } else { *x * beta };
            }
        }
        return;
    }
    // SAFETY: every addressed element lies within the slices (checked above);
    // `c` is exclusively borrowed and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `C[m×n] = beta*C + A[m×k]·B[k×n]`.
pub fn mm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    gemm(m, k, n, a, k, 1, b, n, 1, beta, c, n, 1);
}

/// `C[m×n] = beta*C + Aᵀ·B` where `a` is stored `[k×m]`.
pub fn mm_at_b(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    gemm(m, k, n, a, 1, m, b, n, 1, beta, c, n, 1);
}

/// `C[m×n] = beta*C + A·Bᵀ` where `b` is stored `[n×k]`.
pub fn mm_a_bt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    gemm(m, k, n, a, k, 1, b, 1, k, beta, c, n, 1);
}

pub const RMS_EPS: f32 = 1e-5;

/// Row-wise RMS normalization with a learned gain. Writes `1/rms` per row.
pub fn rms_norm_forward(x: &[f32], gain: &[f32], out: &mut [f32], inv_rms: &mut [f32]) {
    let d = gain.len();
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let ms = xr.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        inv_rms[r] = inv;
        for ((o, &xv), &g) in or.iter_mut().zip(xr).zip(gain) {
            *o = xv * inv * g;
        }
    }
}

/// Accumulates gradients of [`rms_norm_forward`] into `dx` and `dgain`.
pub fn rms_norm_backward(
    x: &[f32],
    gain: &[f32],
    inv_rms: &[f32],
    dout: &[f32],
    dx: Option<&mut [f32]>,
    dgain: Option<&mut [f32]>,
) {
    let d = gain.len();
    if let Some(dgain) = dgain {
        for ((xr, dr), &inv) in x.chunks_exact(d).zip(dout.chunks_exact(d)).zip(inv_rms) {
            for ((dg, &xv), &dv) in dgain.iter_mut().zip(xr).zip(dr) {
                *dg += dv * xv * inv;
            }
        }
    }
    if let Some(dx) = dx {
        for (((xr, dr), dxr), &inv) in x
            .chunks_exact(d)
            .zip(dout.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
            .zip(inv_rms)
        {
            // y = x * inv * g;  dx = inv * (g*dy) - x * inv^3 * mean(x * g * dy)
            let dot = xr
                .iter()
                .zip(dr)
                .zip(gain)
                .map(|((&xv, &dv), &g)| xv * dv * g)
                .sum::<f32>()
                / d as f32;
            let inv3 = inv * inv * inv;
            for (((o, &xv), &dv), &g) in dxr.iter_mut().zip(xr).zip(dr).zip(gain) {
                *o += inv * g * dv - xv * inv3 * dot;
            }
        }
    }
}

/// Rotary position embedding tables (interleaved pairs, base 10000).
#[derive(Clone, Debug)]
pub struct Rope {
    head_dim: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl Rope {
    pub fn new(head_dim: usize, max_pos: usize) -> Self {
        assert!(head_dim % 2 == 0, "rotary head_dim must be even");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for pos in 0..max_pos {
            for i in 0..half {
                let freq = 10000f64.powf(-((2 * i) as f64) / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Self { head_dim, cos, sin }
    }

    pub fn max_pos(&self) -> usize {
        self.cos.len() / (self.head_dim / 2)
    }

    /// Rotates every head of a `[heads*head_dim]` row in place; `inverse`
    /// applies the transpose rotation (used in backward).
    pub fn rotate(&self, row: &mut [f32], pos: usize, inverse: bool) {
        let half = self.head_dim / 2;
        let cs = &self.cos[pos * half..(pos + 1) * half];
        let sn = &self.sin[pos * half..(pos + 1) * half];
        for head in row.chunks_exact_mut(self.head_dim) {
            for i in 0..half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let (c, s) = (cs[i], if inverse { -sn[i] } else { sn[i] });
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }

    /// Rotates a `[batch*seq, dim]` block, position = row index within each sequence.
    pub fn rotate_rows(&self, data: &mut [f32], dim: usize, seq: usize, inverse: bool) {
        for (r, row) in data.chunks_exact_mut(dim).enumerate() {
            self.rotate(row, r % seq, inverse);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn probs_len(&self) -> usize {
        self.batch * self.heads * self.seq * self.seq
    }
}

/// Causal multi-head attention over rotated `q`, `k` and `v` laid out as
/// `[batch*seq, heads*head_dim]`. Stores the attention weights in `probs`
/// (`[batch, heads, seq, seq]`, zero above the diagonal).
pub fn attention_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    dims: AttnDims,
    out: &mut [f32],
    probs: &mut [f32],
) {
    let AttnDims {
        batch,
        seq,
        heads,
        head_dim,
    } = dims;
    let d = dims.model_dim();
    let scale = 1.0 / (head_dim as f32).sqrt();
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * d + h * head_dim;
            let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
            // S = Q Kᵀ
            gemm(seq, head_dim, seq, &q[off..], d, 1, &k[off..], 1, d, 0.0, p, seq, 1);
            for t in 0..seq {
                let row = &mut p[t * seq..(t + 1) * seq];
                let mut max = f32::NEG_INFINITY;
                for s in row.iter_mut().take(t + 1) {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in row.iter_mut().take(t + 1) {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = 1.0 / sum;
                for s in row.iter_mut().take(t + 1) {
                    *s *= inv;
                }
                for s in row.iter_mut().skip(t + 1) {
                    *s = 0.0;
                }
            }
            // O = P V
            gemm(seq, seq, head_dim, p, seq, 1, &v[off..], d, 1, 0.0, &mut out[off..], d, 1);
        }
    }
}

/// Accumulates gradients of [`attention_forward`] w.r.t. rotated `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    dims: AttnDims,
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let AttnDims {
        batch,
        seq,
        heads,
        head_dim,
    } = dims;
    let d = dims.model_dim();
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut dp = vec![0.0f32; seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * d + h * head_dim;
            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
            // dV += Pᵀ dO
            gemm(seq, seq, head_dim, p, 1, seq, &dout[off..], d, 1, 1.0, &mut dv[off..], d, 1);
            // dP = dO Vᵀ
            gemm(seq, head_dim, seq, &dout[off..], d, 1, &v[off..], 1, d, 0.0, &mut dp, seq, 1);
            for t in 0..seq {
                let pr = &p[t * seq..(t + 1) * seq];
                let dr = &mut dp[t * seq..(t + 1) * seq];
                let dot: f32 = pr[..=t].iter().zip(&dr[..=t]).map(|(a, b)| a * b).sum();
                for s in 0..=t {
                    dr[s] = pr[s] * (dr[s] - dot) * scale;
                }
                for x in dr.iter_mut().skip(t + 1) {
                    *x = 0.0;
                }
            }
            // dQ += dS K ; dK += dSᵀ Q
            gemm(seq, seq, head_dim, &dp, seq, 1, &k[off..], d, 1, 1.0, &mut dq[off..], d, 1);
            gemm(seq, seq, head_dim, &dp, 1, seq, &q[off..], d, 1, 1.0, &mut dk[off..], d, 1);
        }
    }
}

/// Single-query attention against cached (rotated) keys and values, each
/// `[len, heads*head_dim]`.
pub fn attention_decode(
    q: &[f32],
    k_cache: &[f32],
    v_cache: &[f32],
    heads: usize,
    head_dim: usize,
    out: &mut [f32],
    scratch: &mut Vec<f32>,
) {
    let d = heads * head_dim;
    let len = k_cache.len() / d;
    let scale = 1.0 / (head_dim as f32).sqrt();
    scratch.resize(len, 0.0);
    for h in 0..heads {
        let qh = &q[h * head_dim..(h + 1) * head_dim];
        let mut max = f32::NEG_INFINITY;
        for (s, w) in scratch.iter_mut().enumerate() {
            let kh = &k_cache[s * d + h * head_dim..][..head_dim];
            *w = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale;
            max = max.max(*w);
        }
        let mut sum = 0.0;
        for w in scratch.iter_mut() {
            *w = (*w - max).exp();
            sum += *w;
        }
        let oh = &mut out[h * head_dim..(h + 1) * head_dim];
        oh.fill(0.0);
        for (s, w) in scratch.iter().enumerate() {
            let vh = &v_cache[s * d + h * head_dim..][..head_dim];
            let w = w / sum;
            for (o, &vv) in oh.iter_mut().zip(vh) {
                *o += w * vv;
            }
        }
    }
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// `out = silu(gate) * up`.
pub fn swiglu_forward(gate: &[f32], up: &[f32], out: &mut [f32]) {
    for ((o, &g), &u) in out.iter_mut().zip(gate).zip(up) {
        *o = silu(g) * u;
    }
}

pub fn swiglu_backward(
    gate: &[f32],
    up: &[f32],
    dout: &[f32],
    dgate: Option<&mut [f32]>,
    dup: Option<&mut [f32]>,
) {
    if let Some(dgate) = dgate {
        for (((dg, &g), &u), &d) in dgate.iter_mut().zip(gate).zip(up).zip(dout) {
            let sig = 1.0 / (1.0 + (-g).exp());
            *dg += d * u * sig * (1.0 + g * (1.0 - sig));
        }
    }
    if let Some(dup) = dup {
        for ((du, &g), &d) in dup.iter_mut().zip(gate).zip(dout) {
            *du += d * silu(g);
        }
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax value of entry `idx` computed in `f64`.
pub fn log_softmax_at(row: &[f32], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row[idx] as f64 - lse
}
