//! Closed-form parameter and multiply-accumulate counts.
//!
//! MACs count the multiplications of convolutions, dense layers and the two
//! attention matmuls. Bias adds, batch norm, activations, softmax and pooling
//! are not counted.

use super::config::PainViTConfig;
use crate::error::{Error, Result};

/// Cost of one named component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

fn dense(inp: usize, out: usize, tokens: usize) -> (usize, u64) {
    (inp * out + out, (tokens * inp * out) as u64)
}

fn dw(ch: usize, out_tokens: usize) -> (usize, u64) {
    (ch * 9 + ch, (out_tokens * ch * 9) as u64)
}

fn add(acc: &mut (usize, u64), c: (usize, u64)) {
    acc.0 += c.0;
    acc.1 += c.1;
}

fn token_mixer(d: usize, ratio: usize, n: usize) -> (usize, u64) {
    let mut c = dw(d, n);
    c.0 += 2 * d; // batch-norm affine
    add(&mut c, dense(d, d * ratio, n));
    add(&mut c, dense(d * ratio, d, n));
    c
}

fn attention(d: usize, heads: usize, n: usize, qkv_norm: bool) -> (usize, u64) {
    let s = d / heads;
    let mut c = (0, 0);
    for _ in 0..heads {
        for _ in 0..3 {
            add(&mut c, dense(s, s, n));
        }
        c.0 -= s; // keys are unbiased
        add(&mut c, dw(s, n));
        if qkv_norm {
            c.0 += 2 * s;
        }
        c.1 += 2 * (n * n * s) as u64;
    }
    add(&mut c, dense(d, d, n));
    c
}

/// Per-component parameter and MAC counts for an input of
/// `image_size × image_size`.
pub fn breakdown(config: &PainViTConfig, image_size: usize) -> Result<Vec<ComponentCost>> {
    let config = PainViTConfig {
        image_size,
        ..config.clone()
    };
    config.validate()?;
    let mut rows = Vec::new();
    let mut push = |name: String, c: (usize, u64)| {
        rows.push(ComponentCost {
            name,
            params: c.0,
            macs: c.1,
        })
    };

    let mut hw = image_size;
    let mut cin = config.in_channels;
    for (i, cout) in config.stem_widths().into_iter().enumerate() {
        hw = super::config::halve(hw);
        push(
            format!("patch_embed.{i}"),
            (cout * cin * 9 + cout, (hw * hw * cout * cin * 9) as u64),
        );
        cin = cout;
    }

    let stages = config.stages();
    for (s, st) in stages.iter().enumerate() {
        let n = st.tokens();
        for d in 0..st.depth {
            let mut c = token_mixer(st.dim, config.ffn_ratio, n);
            add(&mut c, attention(st.dim, st.heads, n, config.qkv_norm));
            add(&mut c, token_mixer(st.dim, config.ffn_ratio, n));
            push(format!("stages.{s}.{d}"), c);
        }
        if let Some(next) = stages.get(s + 1) {
            let hidden = st.dim * config.subsample_ratio;
            let n2 = next.tokens();
            let mut c = token_mixer(st.dim, config.ffn_ratio, n);
            add(&mut c, dense(st.dim, hidden, n));
            add(&mut c, dw(hidden, n2));
            add(&mut c, dense(hidden, next.dim, n2));
            add(&mut c, token_mixer(next.dim, config.ffn_ratio, n2));
            push(format!("subsample.{s}"), c);
        }
    }
    push("head".into(), dense(config.embed_dim(), config.num_classes, 1));
    Ok(rows)
}

/// Trainable scalar count implied by `config`.
pub fn count_params(config: &PainViTConfig) -> Result<usize> {
    Ok(breakdown(config, config.image_size)?.iter().map(|c| c.params).sum())
}

/// Multiply-accumulates of one forward pass on a single image.
pub fn count_macs(config: &PainViTConfig, image_size: usize) -> Result<u64> {
    Ok(breakdown(config, image_size)?.iter().map(|c| c.macs).sum())
}

/// Floating-point operations of one forward pass, counting a
/// multiply-accumulate as two operations.
///
/// `input_shape` is `[channels, height, width]` with `height == width`.
pub fn count_flops(config: &PainViTConfig, input_shape: [usize; 3]) -> Result<u64> {
    let [c, h, w] = input_shape;
    if c != config.in_channels || h != w {
        return Err(Error::Dimension(format!(
            "expected a square {}-channel input, got {input_shape:?}",
            config.in_channels
        )));
    }
    Ok(2 * count_macs(config, h)?)
}
