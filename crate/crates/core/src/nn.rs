//! Transformer building blocks over a [`Graph`], addressed by name prefix.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{AttentionParams, Scalar, Tensor, Var};
use crate::params::{Graph, ParamStore};

pub const LN_EPS: f64 = 1e-6;

fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

/// Xavier-uniform weight `[din, dout]` and zero bias.
pub fn init_linear<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    din: usize,
    dout: usize,
    requires_grad: bool,
) {
    let bound = (6.0 / (din + dout) as f64).sqrt();
    store.insert(format!("{prefix}.w"), uniform(rng, &[din, dout], bound), requires_grad);
    store.insert(format!("{prefix}.b"), Tensor::zeros([dout]), requires_grad);
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, requires_grad: bool) {
    store.insert(format!("{prefix}.gain"), Tensor::full([d], T::one()), requires_grad);
    store.insert(format!("{prefix}.bias"), Tensor::zeros([d]), requires_grad);
}

/// Attention with queries from width `d` and keys/values from width `d_kv`.
pub fn init_attention<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    d: usize,
    d_kv: usize,
    requires_grad: bool,
) {
    init_linear(store, rng, &format!("{prefix}.q"), d, d, requires_grad);
    init_linear(store, rng, &format!("{prefix}.k"), d_kv, d, requires_grad);
    init_linear(store, rng, &format!("{prefix}.v"), d_kv, d, requires_grad);
    init_linear(store, rng, &format!("{prefix}.o"), d, d, requires_grad);
}

pub fn init_mlp<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    d: usize,
    hidden: usize,
    requires_grad: bool,
) {
    init_linear(store, rng, &format!("{prefix}.fc1"), d, hidden, requires_grad);
    init_linear(store, rng, &format!("{prefix}.fc2"), hidden, d, requires_grad);
}

/// Pre-norm self-attention + MLP block.
pub fn init_block<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    d: usize,
    mlp_ratio: usize,
    requires_grad: bool,
) {
    init_layer_norm(store, &format!("{prefix}.norm1"), d, requires_grad);
    init_attention(store, rng, &format!("{prefix}.attn"), d, d, requires_grad);
    init_layer_norm(store, &format!("{prefix}.norm2"), d, requires_grad);
    init_mlp(store, rng, &format!("{prefix}.mlp"), d, d * mlp_ratio, requires_grad);
}

pub fn linear<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.tape.matmul(x, w)?;
    g.tape.add_bias(y, b)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.gain"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    g.tape.layer_norm(x, gain, bias, LN_EPS)
}

pub fn attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    q_src: Var,
    kv_src: Var,
    heads: usize,
) -> Result<Var> {
    let mut p = |s: &str| g.param(&format!("{prefix}.{s}"));
    let params = AttentionParams {
        wq: p("q.w")?,
        bq: p("q.b")?,
        wk: p("k.w")?,
        bk: p("k.b")?,
        wv: p("v.w")?,
        bv: p("v.b")?,
        wo: p("o.w")?,
        bo: p("o.b")?,
    };
    g.tape.attention(q_src, kv_src, &params, heads)
}

pub fn mlp<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, &format!("{prefix}.fc1"), x)?;
    let h = g.tape.gelu(h);
    linear(g, &format!("{prefix}.fc2"), h)
}

pub fn block<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let h = layer_norm(g, &format!("{prefix}.norm1"), x)?;
    let h = attention(g, &format!("{prefix}.attn"), h, h, heads)?;
    let x = g.tape.add(x, h)?;
    let h = layer_norm(g, &format!("{prefix}.norm2"), x)?;
    let h = mlp(g, &format!("{prefix}.mlp"), h)?;
    g.tape.add(x, h)
}

/// Learned scalars in one [`init_block`] of width `d`.
pub fn block_param_count(d: usize, mlp_ratio: usize) -> usize {
    let h = d * mlp_ratio;
    2 * (2 * d) + 4 * (d * d + d) + (d * h + h) + (h * d + d)
}
