//! Dense building blocks over a flat parameter vector. Every layer stores
//! offsets into that vector; forward passes return what their backward needs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scene::Vec3;

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub len: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.len;
        let e = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        };
        self.len += e.numel();
        self.entries.push(e);
        offset
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Fully connected layer `y = W x + b` with `W` stored `out × in` row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, inp: usize, out: usize) -> Self {
        let w = layout.push(format!("{name}.weight"), &[out, inp]);
        let b = layout.push(format!("{name}.bias"), &[out]);
        Self { w, b, inp, out }
    }

    pub fn weight<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.inp * self.out]
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.out]
    }

    /// Uniform Glorot initialization scaled by `gain`; zero bias.
    pub fn init(&self, p: &mut [f64], rng: &mut ChaCha8Rng, gain: f64) {
        let bound = gain * (6.0 / (self.inp + self.out) as f64).sqrt();
        for v in &mut p[self.w..self.w + self.inp * self.out] {
            *v = if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 };
        }
        p[self.b..self.b + self.out].fill(0.0);
    }

    /// `x` is `n × in` row-major.
    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let n = x.len() / self.inp;
        let (w, b) = (self.weight(p), self.bias(p));
        let mut y = Vec::with_capacity(n * self.out);
        for row in x.chunks_exact(self.inp) {
            for o in 0..self.out {
                let wr = &w[o * self.inp..(o + 1) * self.inp];
                y.push(b[o] + dot(wr, row));
            }
        }
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let w = self.weight(p);
        let mut dx = vec![0.0; x.len()];
        for ((row, dyr), dxr) in x
            .chunks_exact(self.inp)
            .zip(dy.chunks_exact(self.out))
            .zip(dx.chunks_exact_mut(self.inp))
        {
            for (o, &d) in dyr.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g[self.b + o] += d;
                let gw = &mut g[self.w + o * self.inp..self.w + (o + 1) * self.inp];
                axpy(d, row, gw);
                axpy(d, &w[o * self.inp..(o + 1) * self.inp], dxr);
            }
        }
        dx
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Two-layer perceptron `W₂ silu(W₁ x + b₁) + b₂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl Mlp2 {
    pub fn new(layout: &mut ParamLayout, name: &str, inp: usize, hidden: usize, out: usize) -> Self {
        Self {
            l1: Linear::new(layout, &format!("{name}.0"), inp, hidden),
            l2: Linear::new(layout, &format!("{name}.1"), hidden, out),
        }
    }

    pub fn init(&self, p: &mut [f64], rng: &mut ChaCha8Rng, out_gain: f64) {
        self.l1.init(p, rng, 1.0);
        self.l2.init(p, rng, out_gain);
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, MlpCache) {
        let pre = self.l1.forward(p, x);
        let act: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
        let y = self.l2.forward(p, &act);
        (
            y,
            MlpCache {
                x: x.to_vec(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, p: &[f64], cache: &MlpCache, dy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let mut dact = self.l2.backward(p, &cache.act, dy, g);
        for (d, &z) in dact.iter_mut().zip(&cache.pre) {
            *d *= silu_grad(z);
        }
        self.l1.backward(p, &cache.x, &dact, g)
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
    pub dim: usize,
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        let gain = layout.push(format!("{name}.gain"), &[dim]);
        let bias = layout.push(format!("{name}.bias"), &[dim]);
        Self { gain, bias, dim }
    }

    pub fn init(&self, p: &mut [f64]) {
        p[self.gain..self.gain + self.dim].fill(1.0);
        p[self.bias..self.bias + self.dim].fill(0.0);
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let d = self.dim;
        let (gain, bias) = (&p[self.gain..self.gain + d], &p[self.bias..self.bias + d]);
        let mut y = Vec::with_capacity(x.len());
        let mut cache = LayerNormCache {
            xhat: Vec::with_capacity(x.len()),
            inv_std: Vec::with_capacity(x.len() / d),
        };
        for row in x.chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (k, v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                cache.xhat.push(xh);
                y.push(gain[k] * xh + bias[k]);
            }
            cache.inv_std.push(inv);
        }
        (y, cache)
    }

    pub fn backward(&self, p: &[f64], cache: &LayerNormCache, dy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let d = self.dim;
        let gain = &p[self.gain..self.gain + d];
        let mut dx = Vec::with_capacity(dy.len());
        for ((dyr, xh), &inv) in dy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)).zip(&cache.inv_std) {
            let mut dxh = vec![0.0; d];
            for k in 0..d {
                g[self.gain + k] += dyr[k] * xh[k];
                g[self.bias + k] += dyr[k];
                dxh[k] = dyr[k] * gain[k];
            }
            let m1 = dxh.iter().sum::<f64>() / d as f64;
            let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for k in 0..d {
                dx.push(inv * (dxh[k] - m1 - xh[k] * m2));
            }
        }
        dx
    }
}

/// Sinusoidal frequencies per axis in the positional encoding.
pub const PE_FREQS: usize = 6;
/// `3 + 3 · 2 · PE_FREQS`.
pub const PE_DIM: usize = 3 + 6 * PE_FREQS;

/// `[x, y, z, sin(2ᵏπx), cos(2ᵏπx), …]` for `k < PE_FREQS`, per axis.
pub fn positional_encoding(m: &Vec3, out: &mut Vec<f64>) {
    out.extend_from_slice(m.as_slice());
    for a in 0..3 {
        for k in 0..PE_FREQS {
            let w = (1u32 << k) as f64 * std::f64::consts::PI;
            let (s, c) = (w * m[a]).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
}

pub fn positional_encoding_backward(m: &Vec3, d: &[f64]) -> Vec3 {
    let mut g = Vec3::new(d[0], d[1], d[2]);
    let mut i = 3;
    for a in 0..3 {
        for k in 0..PE_FREQS {
            let w = (1u32 << k) as f64 * std::f64::consts::PI;
            let (s, c) = (w * m[a]).sin_cos();
            g[a] += w * (c * d[i] - s * d[i + 1]);
            i += 2;
        }
    }
    g
}

/// A two-layer head on `concat(PE(mean), query feature)` evaluated for every child
/// Gaussian of a query. The query half of the first layer is computed once per
/// query and shared by its children.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChildHead {
    pub mlp: Mlp2,
    pub feat: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ChildHeadCache {
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl ChildHead {
    pub fn new(layout: &mut ParamLayout, name: &str, feat: usize, hidden: usize, out: usize) -> Self {
        Self {
            mlp: Mlp2::new(layout, name, PE_DIM + feat, hidden, out),
            feat,
        }
    }

    pub fn hidden(&self) -> usize {
        self.mlp.l1.out
    }

    pub fn out(&self) -> usize {
        self.mlp.l2.out
    }

    /// `pe` holds `Q·kc` encoded means (query-major), `feats` holds `Q` rows.
    pub fn forward(&self, p: &[f64], pe: &[f64], feats: &[f64], kc: usize) -> (Vec<f64>, ChildHeadCache) {
        let l1 = &self.mlp.l1;
        let (hid, inp) = (l1.out, l1.inp);
        let w = l1.weight(p);
        let b = l1.bias(p);
        let mut pre = Vec::with_capacity(pe.len() / PE_DIM * hid);
        for (q, f) in feats.chunks_exact(self.feat).enumerate() {
            let shared: Vec<f64> = (0..hid)
                .map(|o| b[o] + dot(&w[o * inp + PE_DIM..(o + 1) * inp], f))
                .collect();
            for e in pe[q * kc * PE_DIM..(q + 1) * kc * PE_DIM].chunks_exact(PE_DIM) {
                for o in 0..hid {
                    pre.push(shared[o] + dot(&w[o * inp..o * inp + PE_DIM], e));
                }
            }
        }
        let act: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
        let y = self.mlp.l2.forward(p, &act);
        (y, ChildHeadCache { pre, act })
    }

    /// Returns `(dL/dpe, dL/dfeats)`.
    pub fn backward(
        &self,
        p: &[f64],
        cache: &ChildHeadCache,
        pe: &[f64],
        feats: &[f64],
        kc: usize,
        dy: &[f64],
        g: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let l1 = &self.mlp.l1;
        let (hid, inp) = (l1.out, l1.inp);
        let mut dpre = self.mlp.l2.backward(p, &cache.act, dy, g);
        for (d, &z) in dpre.iter_mut().zip(&cache.pre) {
            *d *= silu_grad(z);
        }
        let w = l1.weight(p);
        let mut dpe = vec![0.0; pe.len()];
        let mut dfeat = vec![0.0; feats.len()];
        let nq = feats.len() / self.feat;
        for q in 0..nq {
            let mut dsum = vec![0.0; hid];
            for c in 0..kc {
                let i = q * kc + c;
                let e = &pe[i * PE_DIM..(i + 1) * PE_DIM];
                let dh = &dpre[i * hid..(i + 1) * hid];
                let de = &mut dpe[i * PE_DIM..(i + 1) * PE_DIM];
                for o in 0..hid {
                    if dh[o] == 0.0 {
                        continue;
                    }
                    dsum[o] += dh[o];
                    axpy(dh[o], e, &mut g[l1.w + o * inp..l1.w + o * inp + PE_DIM]);
                    axpy(dh[o], &w[o * inp..o * inp + PE_DIM], de);
                }
            }
            let f = &feats[q * self.feat..(q + 1) * self.feat];
            let df = &mut dfeat[q * self.feat..(q + 1) * self.feat];
            for o in 0..hid {
                if dsum[o] == 0.0 {
                    continue;
                }
                g[l1.b + o] += dsum[o];
                axpy(dsum[o], f, &mut g[l1.w + o * inp + PE_DIM..l1.w + (o + 1) * inp]);
                axpy(dsum[o], &w[o * inp + PE_DIM..(o + 1) * inp], df);
            }
        }
        (dpe, dfeat)
    }
}
