//! Similarity maps, recurrent cells and the two normalization heads, as graph
//! compositions.
//!
//! Inside the graph a visual feature is laid out `[D, T, I]` and an audio
//! feature `[D, T]`, so a time slice is a `[D, I]` grid or a `[D]` vector.

use crate::scalar::Real;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

fn dims<T: Real>(g: &Graph<T>, v: Var) -> Vec<usize> {
    g.shape(v).to_vec()
}

fn check_pair<T: Real>(g: &Graph<T>, op: &'static str, v: Var, a: Var) -> Result<(usize, usize, usize)> {
    let (sv, sa) = (dims(g, v), dims(g, a));
    match (sv.as_slice(), sa.as_slice()) {
        ([d, t, i], [da, ta]) if d == da && t == ta => Ok((*d, *t, *i)),
        _ => Err(TensorError::ShapeMismatch { op, lhs: sv, rhs: sa }),
    }
}

/// `M_static[i] = mean_t(v_t^i . a_t)`.
pub fn static_fusion<T: Real>(g: &mut Graph<T>, v: Var, a: Var) -> Result<Var> {
    let (_, t_steps, cells) = check_pair(g, "static_fusion", v, a)?;
    let mut rows = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let vt = g.select(v, 1, t)?;
        let at = g.select(a, 1, t)?;
        let dot = g.dot_along_channel(vt, at)?;
        rows.push(g.reshape(dot, &[1, cells])?);
    }
    let stacked = g.concat(&rows, 0)?;
    g.mean(stacked, 0)
}

/// Weights of a gated recurrent cell. For the convolutional cell the weights
/// are `[D, 2D, k, k]` (gates) and `[D, D, k, k]` (candidate); for the plain
/// cell they are `[D, 2D]` and `[D, D]` matrices.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    pub z_w: Var,
    pub z_b: Var,
    pub r_w: Var,
    pub r_b: Var,
    pub n_x_w: Var,
    pub n_h_w: Var,
    pub n_b: Var,
}

/// One step `h' = (1 - z) h + z n` with `z, r = sigmoid(W [x, h] + b)` and
/// `n = tanh(W_x x + W_h (r h) + b)`. `x` and `h` are `[D, H, W]` grids when
/// `conv` is set and `[D]` vectors otherwise.
pub fn gru_cell<T: Real>(g: &mut Graph<T>, w: &GruWeights, x: Var, h: Var, conv: bool) -> Result<Var> {
    let affine = |g: &mut Graph<T>, weight: Var, input: Var| if conv { g.conv2d(input, weight) } else { g.matmul(weight, input) };
    let bias = |g: &mut Graph<T>, y: Var, b: Var| if conv { g.add_bias(y, b, 0) } else { g.add(y, b) };
    let xh = g.concat(&[x, h], 0)?;
    let z = affine(g, w.z_w, xh)?;
    let z = bias(g, z, w.z_b)?;
    let z = g.sigmoid(z)?;
    let r = affine(g, w.r_w, xh)?;
    let r = bias(g, r, w.r_b)?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, h)?;
    let nx = affine(g, w.n_x_w, x)?;
    let nh = affine(g, w.n_h_w, rh)?;
    let n = g.add(nx, nh)?;
    let n = bias(g, n, w.n_b)?;
    let n = g.tanh(n)?;
    let diff = g.sub(n, h)?;
    let step = g.mul(z, diff)?;
    g.add(h, step)
}

/// Final states of a ConvGRU over `v` and a GRU over `a`, both from zero, and
/// their per-cell dot products.
pub fn dynamic_fusion<T: Real>(
    g: &mut Graph<T>,
    conv_gru: &GruWeights,
    gru: &GruWeights,
    v: Var,
    a: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let (d, t_steps, cells) = check_pair(g, "dynamic_fusion", v, a)?;
    let (gw, gh) = grid;
    if gw * gh != cells {
        return Err(TensorError::InvalidArgument {
            op: "dynamic_fusion",
            msg: format!("grid {gw}x{gh} does not match {cells} cells"),
        });
    }
    let mut hv = g.constant(Tensor::zeros(&[d, gh, gw]));
    let mut ha = g.constant(Tensor::zeros(&[d]));
    for t in 0..t_steps {
        let xt = g.select(v, 1, t)?;
        let xt = g.reshape(xt, &[d, gh, gw])?;
        hv = gru_cell(g, conv_gru, xt, hv, true)?;
        let at = g.select(a, 1, t)?;
        ha = gru_cell(g, gru, at, ha, false)?;
    }
    let hv = g.reshape(hv, &[d, cells])?;
    g.dot_along_channel(hv, ha)
}

/// Hadamard product of the static and dynamic maps.
pub fn cdf<T: Real>(g: &mut Graph<T>, m_static: Var, m_dynamic: Var) -> Result<Var> {
    g.mul(m_static, m_dynamic)
}

/// Per-cell sigmoid and its global max: `(M_loc, z_avc)`.
pub fn local_normalize<T: Real>(g: &mut Graph<T>, s: Var) -> Result<(Var, Var)> {
    let m_loc = g.sigmoid(s)?;
    let z = g.max_global(m_loc)?;
    Ok((m_loc, z))
}

/// Softmax attention over cells, the attended `[D']` feature and the class
/// logits: `(w_att, v_att, logits)`. `v_cls` is `[D', I]`.
pub fn global_attend<T: Real>(g: &mut Graph<T>, s: Var, v_cls: Var, fc_w: Var, fc_b: Var) -> Result<(Var, Var, Var)> {
    let w = g.softmax(s, 0)?;
    let v_att = g.matmul(v_cls, w)?;
    let logits = g.matmul(fc_w, v_att)?;
    let logits = g.add(logits, fc_b)?;
    Ok((w, v_att, logits))
}
