//! Helpers shared by the integration tests. The reference encoder here is a
//! plain loop transcription over `Vec<Vec<f64>>`; it reads weights by name and
//! shares no code with the tape.

#![allow(dead_code)]

use recid_core::backbone::{Matrix, Transformer};

pub type Rows = Vec<Vec<f64>>;

fn w(net: &Transformer, name: &str) -> Rows {
    let m = net.params.by_name(name).unwrap_or_else(|| panic!("missing {name}"));
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn vecw(net: &Transformer, name: &str) -> Vec<f64> {
    w(net, name).remove(0)
}

fn linear(x: &Rows, wt: &Rows, b: &[f64]) -> Rows {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| {
                    let mut s = b[j];
                    for (k, xv) in row.iter().enumerate() {
                        s += xv * wt[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Rows, g: &[f64], b: &[f64], eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let denom = (var + eps).sqrt();
            row.iter().enumerate().map(|(j, v)| g[j] * (v - mean) / denom + b[j]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

/// One post-LN encoder block.
pub fn reference_layer(net: &Transformer, i: usize, x: &Rows) -> Rows {
    let cfg = &net.config;
    let p = |s: &str| format!("encoder.layer.{i}.{s}");
    let q = linear(x, &w(net, &p("attention.query.weight")), &vecw(net, &p("attention.query.bias")));
    let k = linear(x, &w(net, &p("attention.key.weight")), &vecw(net, &p("attention.key.bias")));
    let v = linear(x, &w(net, &p("attention.value.weight")), &vecw(net, &p("attention.value.bias")));
    let n = x.len();
    let dh = cfg.hidden_size / cfg.num_heads;
    let mut ctx = vec![vec![0.0; cfg.hidden_size]; n];
    for h in 0..cfg.num_heads {
        let off = h * dh;
        for r in 0..n {
            let visible = if cfg.causal { r + 1 } else { n };
            let scores: Vec<f64> = (0..visible)
                .map(|c| (0..dh).map(|t| q[r][off + t] * k[c][off + t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..dh {
                ctx[r][off + t] = (0..visible).map(|c| e[c] / z * v[c][off + t]).sum();
            }
        }
    }
    let attn = linear(&ctx, &w(net, &p("attention.output.weight")), &vecw(net, &p("attention.output.bias")));
    let eps = cfg.layer_norm_eps;
    let h1 = layer_norm(
        &add(x, &attn),
        &vecw(net, &p("attention.layer_norm.weight")),
        &vecw(net, &p("attention.layer_norm.bias")),
        eps,
    );
    let mut ff = linear(&h1, &w(net, &p("intermediate.weight")), &vecw(net, &p("intermediate.bias")));
    for row in &mut ff {
        for v in row.iter_mut() {
            *v = gelu(*v);
        }
    }
    let ff = linear(&ff, &w(net, &p("output.weight")), &vecw(net, &p("output.bias")));
    layer_norm(
        &add(&h1, &ff),
        &vecw(net, &p("output.layer_norm.weight")),
        &vecw(net, &p("output.layer_norm.bias")),
        eps,
    )
}

/// Word + position (starting at `offset`) + segment-0 embeddings, normalised.
pub fn reference_embed(net: &Transformer, ids: &[u32], offset: usize) -> Rows {
    let word = w(net, "embeddings.word_embeddings");
    let pos = w(net, "embeddings.position_embeddings");
    let tt = w(net, "embeddings.token_type_embeddings");
    let x: Rows = ids
        .iter()
        .enumerate()
        .map(|(t, id)| {
            (0..net.config.hidden_size)
                .map(|j| word[*id as usize][j] + pos[offset + t][j] + tt[0][j])
                .collect()
        })
        .collect();
    layer_norm(
        &x,
        &vecw(net, "embeddings.layer_norm.weight"),
        &vecw(net, "embeddings.layer_norm.bias"),
        net.config.layer_norm_eps,
    )
}

pub fn reference_forward(net: &Transformer, ids: &[u32]) -> Rows {
    let mut x = reference_embed(net, ids, 0);
    for i in 0..net.config.num_layers {
        x = reference_layer(net, i, &x);
    }
    x
}

/// Deep prompt forward: at every layer `i` with a prefix `P_i`, the first `p`
/// rows of the layer input are replaced by `P_i` (layer 0 prepends them to
/// the token embeddings, whose positions start at `p`). Layers without a
/// prefix keep the previous layer's outputs at those rows. Returns the token
/// rows of the last layer.
pub fn reference_prefix_forward(net: &Transformer, ids: &[u32], prefix: &[Option<Rows>]) -> Rows {
    let p = prefix[0].as_ref().map_or(0, |m| m.len());
    let mut x = prefix[0].clone().unwrap_or_default();
    x.extend(reference_embed(net, ids, p));
    assert_eq!(prefix.len(), net.config.num_layers, "one entry per layer");
    for (i, layer_prefix) in prefix.iter().enumerate() {
        if let Some(pi) = layer_prefix {
            x.splice(0..p, pi.iter().cloned());
        }
        x = reference_layer(net, i, &x);
    }
    x.split_off(p)
}

pub fn to_rows(m: &Matrix) -> Rows {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Largest `|a - b| / max(|b|, 1e-300)` over all entries.
pub fn max_rel_err(a: &Matrix, b: &Rows) -> f64 {
    let mut worst: f64 = 0.0;
    for (r, row) in b.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((a[(r, c)] - v).abs() / v.abs().max(1e-300));
        }
    }
    worst
}
