//! Scaled dot-product attention, multi-head self-attention and the
//! shifted-window variant used over spatial tiles.
//!
//! Shift convention: the grid is rolled by `-shift` on both axes before
//! partitioning (cell `(r, c)` lands at `(r - shift, c - shift)` mod extent)
//! and rolled back after merging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LayerNorm;
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Additive score for a blocked pair. After the max-subtracting softmax it
/// underflows to exactly zero weight.
pub const BLOCKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_h: usize,
    pub window_w: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn square(size: usize, shift: usize) -> Self {
        Self {
            window_h: size,
            window_w: size,
            shift,
        }
    }

    pub fn tokens(&self) -> usize {
        self.window_h * self.window_w
    }

    /// Checks the spec against a `height x width` grid.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.window_h == 0 || self.window_w == 0 {
            return Err(Error::Config("window extents must be positive".into()));
        }
        if height % self.window_h != 0 || width % self.window_w != 0 {
            return Err(Error::Config(format!(
                "window {}x{} does not divide the {height}x{width} tile",
                self.window_h, self.window_w
            )));
        }
        if self.shift >= self.window_h.min(self.window_w) {
            return Err(Error::Config(format!(
                "shift {} must be smaller than the window",
                self.shift
            )));
        }
        Ok(())
    }

    pub fn num_windows(&self, height: usize, width: usize) -> usize {
        (height / self.window_h) * (width / self.window_w)
    }
}

/// Query, key, value and output maps, all `[C, C]`; head `i` uses columns
/// `i * d_k .. (i + 1) * d_k` of the first three.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionParams {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide latent dimension {dim}"
            )));
        }
        let mut w = |n: &str, rng: &mut Rng| store.add_uniform(format!("{prefix}.{n}"), &[dim, dim], dim, rng);
        Ok(Self {
            q: w("q", rng)?,
            k: w("k", rng)?,
            v: w("v", rng)?,
            o: w("o", rng)?,
            heads,
            dim,
        })
    }

    pub fn num_scalars(dim: usize) -> usize {
        4 * dim * dim
    }
}

fn check_mask(mask: &Tensor, batch: usize, nq: usize, nk: usize) -> Result<()> {
    let s = mask.shape();
    if s.len() != 3 || s[1] != nq || s[2] != nk || s[0] == 0 || batch % s[0] != 0 {
        return Err(Error::shape("attention mask", s, &[batch, nq, nk]));
    }
    for (r, row) in mask.data().chunks(nk).enumerate() {
        if row.iter().all(|&v| v <= BLOCKED / 2.0) {
            return Err(Error::Contract(format!(
                "attention row {} of mask group {} blocks every key",
                r % nq,
                r / nq
            )));
        }
    }
    Ok(())
}

/// Attention weights `softmax(q k^T / sqrt(d) + mask)` for `q[B, nq, d]`,
/// `k[B, nk, d]`. A mask of shape `[G, nq, nk]` applies group `b % G` to batch
/// entry `b`.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, mask: Option<&Tensor>) -> Result<Var> {
    let scores = tape.bmm(q, k, true)?;
    let sq = tape.shape(q).to_vec();
    let d = sq[2];
    let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(mask) = mask {
        let shape = tape.shape(scores).to_vec();
        let (b, nq, nk) = (shape[0], shape[1], shape[2]);
        check_mask(mask, b, nq, nk)?;
        let g = mask.shape()[0];
        let grouped = tape.reshape(scores, &[b / g, g, nq, nk])?;
        let mv = tape.constant(mask.clone());
        let masked = tape.add(grouped, mv)?;
        scores = tape.reshape(masked, &[b, nq, nk])?;
    }
    tape.softmax(scores, 2)
}

/// `softmax(q k^T / sqrt(d) + mask) v`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var> {
    let w = attention_weights(tape, q, k, mask)?;
    tape.bmm(w, v, false)
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(x);
    }
    let s = tape.shape(x).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[b, n, heads, c / heads])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b * heads, n, c / heads])
}

fn merge_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(x);
    }
    let s = tape.shape(x).to_vec();
    let (bh, n, dk) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[bh / heads, heads, n, dk])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[bh / heads, n, heads * dk])
}

/// Repeats each mask group once per head to follow the head-split batch order.
fn expand_mask(mask: &Tensor, heads: usize) -> Result<Tensor> {
    if heads == 1 {
        return Ok(mask.clone());
    }
    let s = mask.shape();
    let block = s[1] * s[2];
    let mut data = Vec::with_capacity(mask.numel() * heads);
    for g in mask.data().chunks(block) {
        for _ in 0..heads {
            data.extend_from_slice(g);
        }
    }
    Tensor::new(vec![s[0] * heads, s[1], s[2]], data)
}

/// Multi-head self-attention over `x[B, n, C]`.
pub fn msa(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttentionParams,
    x: Var,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] != p.dim {
        return Err(Error::shape("msa", &s, &[p.dim]));
    }
    let (wq, wk, wv, wo) = (
        tape.param(store, p.q),
        tape.param(store, p.k),
        tape.param(store, p.v),
        tape.param(store, p.o),
    );
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let (q, k, v) = (
        split_heads(tape, q, p.heads)?,
        split_heads(tape, k, p.heads)?,
        split_heads(tape, v, p.heads)?,
    );
    let expanded = mask.map(|m| expand_mask(m, p.heads)).transpose()?;
    let a = attention(tape, q, k, v, expanded.as_ref())?;
    let a = merge_heads(tape, a, p.heads)?;
    tape.matmul(a, wo)
}

/// Source index (row-major in the grid) of every token in window-major order.
pub fn partition_order(height: usize, width: usize, spec: &WindowSpec) -> Result<Vec<usize>> {
    spec.validate(height, width)?;
    let (wh, ww) = (spec.window_h, spec.window_w);
    let mut out = Vec::with_capacity(height * width);
    for br in 0..height / wh {
        for bc in 0..width / ww {
            for r in 0..wh {
                for c in 0..ww {
                    out.push((br * wh + r) * width + bc * ww + c);
                }
            }
        }
    }
    Ok(out)
}

/// Source index of every cell after rolling both axes by `-shift`.
pub fn shift_order(height: usize, width: usize, shift: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            out.push(((r + shift) % height) * width + (c + shift) % width);
        }
    }
    out
}

fn invert(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (dst, &src) in order.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

fn gather_rows(t: &Tensor, order: &[usize]) -> Result<Tensor> {
    let row = t.numel() / t.shape()[0].max(1);
    let mut data = Vec::with_capacity(t.numel());
    for &i in order {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    Tensor::new(t.shape().to_vec(), data)
}

fn grid_dims(grid: &Tensor) -> Result<(usize, usize, usize)> {
    match grid.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::shape("grid", s, &[0, 0, 0])),
    }
}

/// `[H, W, C]` grid to `[num_windows, wh * ww, C]`.
pub fn window_partition(grid: &Tensor, spec: &WindowSpec) -> Result<Tensor> {
    let (h, w, c) = grid_dims(grid)?;
    let order = partition_order(h, w, spec)?;
    let flat = grid.clone().reshaped(vec![h * w, c])?;
    gather_rows(&flat, &order)?.reshaped(vec![spec.num_windows(h, w), spec.tokens(), c])
}

/// Inverse of [`window_partition`].
pub fn window_merge(windows: &Tensor, height: usize, width: usize, spec: &WindowSpec) -> Result<Tensor> {
    let c = *windows.shape().last().unwrap_or(&0);
    let order = invert(&partition_order(height, width, spec)?);
    let flat = windows.clone().reshaped(vec![height * width, c])?;
    gather_rows(&flat, &order)?.reshaped(vec![height, width, c])
}

/// Rolls both axes of an `[H, W, C]` grid by `-shift`.
pub fn cyclic_shift(grid: &Tensor, shift: usize) -> Result<Tensor> {
    let (h, w, c) = grid_dims(grid)?;
    let flat = grid.clone().reshaped(vec![h * w, c])?;
    gather_rows(&flat, &shift_order(h, w, shift))?.reshaped(vec![h, w, c])
}

/// Rolls both axes by `+shift`.
pub fn inverse_shift(grid: &Tensor, shift: usize) -> Result<Tensor> {
    let (h, w, c) = grid_dims(grid)?;
    let flat = grid.clone().reshaped(vec![h * w, c])?;
    gather_rows(&flat, &invert(&shift_order(h, w, shift)))?.reshaped(vec![h, w, c])
}

/// Band of a rolled coordinate: 0 for cells that never wrap, 1 and 2 for the
/// two pieces sharing the last window.
fn band(pos: usize, extent: usize, window: usize, shift: usize) -> usize {
    if pos < extent - window {
        0
    } else if pos < extent - shift {
        1
    } else {
        2
    }
}

/// Additive masks `[num_windows, n, n]` for the rolled partition. Tokens that
/// were not contiguous before the roll (one of them wrapped around an edge)
/// are blocked. With `shift = 0` every entry is zero.
pub fn sw_attention_mask(height: usize, width: usize, spec: &WindowSpec) -> Result<Tensor> {
    let order = partition_order(height, width, spec)?;
    let (nw, n) = (spec.num_windows(height, width), spec.tokens());
    let mut data = vec![0.0; nw * n * n];
    if spec.shift == 0 {
        return Tensor::new(vec![nw, n, n], data);
    }
    let region: Vec<(usize, usize)> = order
        .iter()
        .map(|&p| {
            (
                band(p / width, height, spec.window_h, spec.shift),
                band(p % width, width, spec.window_w, spec.shift),
            )
        })
        .collect();
    for win in 0..nw {
        for i in 0..n {
            for j in 0..n {
                if region[win * n + i] != region[win * n + j] {
                    data[(win * n + i) * n + j] = BLOCKED;
                }
            }
        }
    }
    Tensor::new(vec![nw, n, n], data)
}

/// Shifted-window MSA over tokens laid out on a `height x width` grid.
///
/// `x` is `[height * width, T, C]`: grid cells row-major on axis 0 and `T`
/// independent slices (time steps) on axis 1.
pub fn sw_msa(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttentionParams,
    x: Var,
    height: usize,
    width: usize,
    spec: &WindowSpec,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] != height * width {
        return Err(Error::shape("sw_msa", &s, &[height * width]));
    }
    let (t, c) = (s[1], s[2]);
    let part = partition_order(height, width, spec)?;
    let roll = shift_order(height, width, spec.shift);
    let order: Vec<usize> = part.iter().map(|&i| roll[i]).collect();
    let nw = spec.num_windows(height, width);
    let mask = (spec.shift > 0)
        .then(|| sw_attention_mask(height, width, spec))
        .transpose()?;
    let g = tape.index_select(x, &order)?;
    let g = tape.permute(g, &[1, 0, 2])?;
    let g = tape.reshape(g, &[t * nw, spec.tokens(), c])?;
    let a = msa(tape, store, p, g, mask.as_ref())?;
    let a = tape.reshape(a, &[t, height * width, c])?;
    let a = tape.permute(a, &[1, 0, 2])?;
    tape.index_select(a, &invert(&order))
}

/// One shifted-window block of a stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwStage {
    pub spec: WindowSpec,
    pub attn: AttentionParams,
    pub norm: LayerNorm,
}

/// `x <- layer_norm(x + sw_msa_i(x))` for each stage in order.
pub fn sw_msa_stack(
    tape: &mut Tape,
    store: &ParamStore,
    stages: &[SwStage],
    x: Var,
    height: usize,
    width: usize,
) -> Result<Var> {
    if stages.is_empty() {
        return Err(Error::Config("shifted-window schedule is empty".into()));
    }
    let mut h = x;
    for st in stages {
        let a = sw_msa(tape, store, &st.attn, h, height, width, &st.spec)?;
        h = st.norm.residual(tape, store, h, a)?;
    }
    Ok(h)
}
