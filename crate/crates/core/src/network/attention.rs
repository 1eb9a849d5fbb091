//! Multi-head attention between dynamic and static query features.

use serde::{Deserialize, Serialize};

use super::layers::{axpy, dot, LayerNorm, LayerNormCache, Linear, ParamLayout};
use crate::error::{OdgError, Result};

/// How dynamic and static queries exchange information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AttentionMode {
    /// Dynamic queries attend to static ones; static features pass through.
    #[serde(rename = "cross")]
    Cross,
    /// Self-attention over the row concatenation `[dynamic; static]`.
    #[default]
    #[serde(rename = "concat-self")]
    ConcatSelf,
}

/// `LayerNorm(x + W_o · MHA(x W_qᵀ, y W_kᵀ, y W_vᵀ))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln: LayerNorm,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Default)]
pub struct AttentionCache {
    mode: AttentionMode,
    dyn_rows: usize,
    xq: Vec<f64>,
    xkv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, `Tq × Tk` attention weights.
    probs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    ln: LayerNormCache,
}

impl Attention {
    pub fn new(layout: &mut ParamLayout, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(OdgError::config(
                "heads",
                format!("head count {heads} must divide the feature width {dim}"),
            ));
        }
        Ok(Self {
            q: Linear::new(layout, &format!("{name}.q"), dim, dim),
            k: Linear::new(layout, &format!("{name}.k"), dim, dim),
            v: Linear::new(layout, &format!("{name}.v"), dim, dim),
            o: Linear::new(layout, &format!("{name}.o"), dim, dim),
            ln: LayerNorm::new(layout, &format!("{name}.norm"), dim),
            heads,
            dim,
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Returns updated `(dynamic, static)` features.
    pub fn forward(
        &self,
        p: &[f64],
        dynamic: &[f64],
        statics: &[f64],
        mode: AttentionMode,
    ) -> (Vec<f64>, Vec<f64>, AttentionCache) {
        let d = self.dim;
        let dyn_rows = dynamic.len() / d;
        let (xq, xkv) = match mode {
            AttentionMode::ConcatSelf => {
                let x = [dynamic, statics].concat();
                (x.clone(), x)
            }
            AttentionMode::Cross => (dynamic.to_vec(), statics.to_vec()),
        };
        let (tq, tk) = (xq.len() / d, xkv.len() / d);
        let q = self.q.forward(p, &xq);
        let k = self.k.forward(p, &xkv);
        let v = self.v.forward(p, &xkv);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = vec![0.0; tq * d];
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * dh;
            let mut ph = vec![0.0; tq * tk];
            for i in 0..tq {
                let qi = &q[i * d + off..i * d + off + dh];
                let row = &mut ph[i * tk..(i + 1) * tk];
                for j in 0..tk {
                    row[j] = scale * dot(qi, &k[j * d + off..j * d + off + dh]);
                }
                softmax_in_place(row);
                let ci = &mut ctx[i * d + off..i * d + off + dh];
                for j in 0..tk {
                    axpy(row[j], &v[j * d + off..j * d + off + dh], ci);
                }
            }
            probs.push(ph);
        }
        let proj = self.o.forward(p, &ctx);
        let z: Vec<f64> = xq.iter().zip(&proj).map(|(a, b)| a + b).collect();
        let (y, ln) = self.ln.forward(p, &z);
        let (dyn_out, static_out) = match mode {
            AttentionMode::ConcatSelf => (y[..dyn_rows * d].to_vec(), y[dyn_rows * d..].to_vec()),
            AttentionMode::Cross => (y, statics.to_vec()),
        };
        let cache = AttentionCache {
            mode,
            dyn_rows,
            xq,
            xkv,
            q,
            k,
            v,
            probs,
            ctx,
            ln,
        };
        (dyn_out, static_out, cache)
    }

    /// Returns `(dL/d dynamic, dL/d static)` for the inputs.
    pub fn backward(
        &self,
        p: &[f64],
        c: &AttentionCache,
        d_dyn: &[f64],
        d_static: &[f64],
        g: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let dy = match c.mode {
            AttentionMode::ConcatSelf => [d_dyn, d_static].concat(),
            AttentionMode::Cross => d_dyn.to_vec(),
        };
        let dz = self.ln.backward(p, &c.ln, &dy, g);
        let mut dxq = dz.clone();
        let dctx = self.o.backward(p, &c.ctx, &dz, g);
        let (tq, tk) = (c.xq.len() / d, c.xkv.len() / d);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; tq * d];
        let mut dk = vec![0.0; tk * d];
        let mut dv = vec![0.0; tk * d];
        for h in 0..self.heads {
            let off = h * dh;
            let ph = &c.probs[h];
            for i in 0..tq {
                let dci = &dctx[i * d + off..i * d + off + dh];
                let row = &ph[i * tk..(i + 1) * tk];
                let dp: Vec<f64> = (0..tk).map(|j| dot(dci, &c.v[j * d + off..j * d + off + dh])).collect();
                let inner: f64 = row.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..tk {
                    axpy(row[j], dci, &mut dv[j * d + off..j * d + off + dh]);
                    let ds = row[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    axpy(ds, &c.k[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                    axpy(ds, &c.q[i * d + off..i * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
                }
            }
        }
        let from_q = self.q.backward(p, &c.xq, &dq, g);
        let from_k = self.k.backward(p, &c.xkv, &dk, g);
        let from_v = self.v.backward(p, &c.xkv, &dv, g);
        for (a, b) in dxq.iter_mut().zip(&from_q) {
            *a += b;
        }
        let dxkv: Vec<f64> = from_k.iter().zip(&from_v).map(|(a, b)| a + b).collect();
        match c.mode {
            AttentionMode::ConcatSelf => {
                for (a, b) in dxq.iter_mut().zip(&dxkv) {
                    *a += b;
                }
                let split = c.dyn_rows * d;
                (dxq[..split].to_vec(), dxq[split..].to_vec())
            }
            AttentionMode::Cross => {
                let mut ds = d_static.to_vec();
                for (a, b) in ds.iter_mut().zip(&dxkv) {
                    *a += b;
                }
                (dxq, ds)
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Dynamic-and-static attention on feature matrices (`D × M` and `S × M`,
/// row-major). Returns `(static, dynamic)` features.
pub fn das_attention(
    attn: &Attention,
    params: &[f64],
    static_feats: &[f64],
    dynamic_feats: &[f64],
    mode: AttentionMode,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if static_feats.len() % attn.dim != 0 || dynamic_feats.len() % attn.dim != 0 {
        return Err(OdgError::InvalidArgument(format!(
            "feature rows must have width {}",
            attn.dim
        )));
    }
    let (d, s, _) = attn.forward(params, dynamic_feats, static_feats, mode);
    Ok((s, d))
}
