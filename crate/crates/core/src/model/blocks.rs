use crate::error::{dim_err, Result};
use crate::tensor::{Element, Graph, Var};

/// `w1 * a + w2 * hflip(a)`, with `w1` and `w2` single-element tensors.
pub fn ssaa<T: Element>(g: &mut Graph<T>, a: Var, w1: Var, w2: Var) -> Result<Var> {
    let mirrored = g.hflip(a)?;
    let direct = g.scale(a, w1)?;
    let mirrored = g.scale(mirrored, w2)?;
    g.add(direct, mirrored)
}

/// `x @ w + b` over the last axis, with `w` stored as `[in, out]`.
pub(crate) fn linear<T: Element>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// `softmax(q k^T / sqrt(d)) v` for `[B, L, d]` inputs. Returns the output
/// and the `[B, L, L]` attention weights.
pub fn scaled_dot_product_attention<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 3 || g.shape(k) != shape.as_slice() || g.shape(v) != shape.as_slice() {
        return Err(dim_err!(
            "attention expects equal [B, L, d] inputs, got {:?}, {:?}, {:?}",
            shape,
            g.shape(k),
            g.shape(v)
        ));
    }
    let kt = g.permute(k, &[0, 2, 1])?;
    let logits = g.matmul(q, kt)?;
    let logits = g.mul_const(logits, T::of(1.0 / (shape[2] as f64).sqrt()));
    let weights = g.softmax(logits, 2)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Projections of one multi-head attention layer; weights are `[C, C]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl AttentionVars {
    /// Multi-head attention over `[N, L, C]` tokens.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, tokens: Var, heads: usize) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 3 || heads == 0 || shape[2] % heads != 0 {
            return Err(dim_err!(
                "attention tokens {shape:?} cannot be split into {heads} heads"
            ));
        }
        let (n, l, c) = (shape[0], shape[1], shape[2]);
        let dk = c / heads;
        let mut split = |w: Var, b: Var| -> Result<Var> {
            let y = linear(g, tokens, w, b)?;
            let y = g.reshape(y, &[n, l, heads, dk])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[n * heads, l, dk])
        };
        let q = split(self.q_w, self.q_b)?;
        let k = split(self.k_w, self.k_b)?;
        let v = split(self.v_w, self.v_b)?;
        let (o, _) = scaled_dot_product_attention(g, q, k, v)?;
        let o = g.reshape(o, &[n, heads, l, dk])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[n, l, c])?;
        linear(g, o, self.proj_w, self.proj_b)
    }
}

/// `[N, C, H, W]` to `[N, H*W, C]`, tokens in row-major spatial order.
pub(crate) fn to_tokens<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(t, &[s[0], s[2] * s[3], s[1]])
}

pub(crate) fn from_tokens<T: Element>(g: &mut Graph<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(t).to_vec();
    let x = g.reshape(t, &[s[0], h, w, s[2]])?;
    g.permute(x, &[0, 3, 1, 2])
}
