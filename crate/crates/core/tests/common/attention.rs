#![allow(dead_code)]
//! Straight-line cascaded-attention reference shared by the model tests
//! and the acceptance suite.

use painvit::model::{CascadedAttention, ParamStore, Pass, PassOptions};
use painvit::Tensor;

use super::{rand_t, rng};

pub fn set(store: &mut ParamStore, name: &str, f: impl Fn(usize) -> f64) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    for (i, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

pub fn get<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store.get(store.find(name).unwrap()).data()
}

/// Direct loop transcription: split channels into `h` segments, chain each
/// head's output into the next head's input, depthwise 3×3 conv on Q over
/// the grid, scaled softmax attention, concatenate, project, add residual.
#[allow(clippy::too_many_arguments)]
pub fn attention_oracle(
    store: &ParamStore,
    x: &[f64],
    b: usize,
    (rows, cols): (usize, usize),
    d: usize,
    h: usize,
    residual: bool,
) -> Vec<f64> {
    let n = rows * cols;
    let s = d / h;
    let mut out = vec![0.0; b * n * d];
    for bi in 0..b {
        let xb = &x[bi * n * d..(bi + 1) * n * d];
        let mut concat = vec![0.0; n * d];
        let mut prev = vec![0.0; n * s];
        for j in 0..h {
            let name = |t: &str| format!("attn.heads.{j}.{t}");
            let mut xin = vec![0.0; n * s];
            for t in 0..n {
                for c in 0..s {
                    xin[t * s + c] = xb[t * d + j * s + c] + if j > 0 { prev[t * s + c] } else { 0.0 };
                }
            }
            let proj = |w: &[f64], bias: Option<&[f64]>| {
                let mut y = vec![0.0; n * s];
                for t in 0..n {
                    for o in 0..s {
                        let mut acc = bias.map_or(0.0, |bb| bb[o]);
                        for i in 0..s {
                            acc += xin[t * s + i] * w[i * s + o];
                        }
                        y[t * s + o] = acc;
                    }
                }
                y
            };
            let q0 = proj(get(store, &name("q.weight")), Some(get(store, &name("q.bias"))));
            let k = proj(get(store, &name("k.weight")), None);
            let v = proj(get(store, &name("v.weight")), Some(get(store, &name("v.bias"))));
            let kern = get(store, &name("q_dw.weight"));
            let kb = get(store, &name("q_dw.bias"));
            let mut q = vec![0.0; n * s];
            for c in 0..s {
                for y in 0..rows {
                    for xx in 0..cols {
                        let mut acc = kb[c];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as i64 + ky as i64 - 1, xx as i64 + kx as i64 - 1);
                                if sy >= 0 && sx >= 0 && (sy as usize) < rows && (sx as usize) < cols {
                                    acc += kern[c * 9 + ky * 3 + kx] * q0[(sy as usize * cols + sx as usize) * s + c];
                                }
                            }
                        }
                        q[(y * cols + xx) * s + c] = acc;
                    }
                }
            }
            let mut head = vec![0.0; n * s];
            for t in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|u| (0..s).map(|c| q[t * s + c] * k[u * s + c]).sum::<f64>() / (s as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..s {
                    head[t * s + c] = (0..n).map(|u| e[u] / z * v[u * s + c]).sum();
                }
            }
            for t in 0..n {
                for c in 0..s {
                    concat[t * d + j * s + c] = head[t * s + c];
                }
            }
            prev = head;
        }
        let wp = get(store, "attn.proj.weight");
        let bp = get(store, "attn.proj.bias");
        for t in 0..n {
            for o in 0..d {
                let mut acc = bp[o];
                for i in 0..d {
                    acc += concat[t * d + i] * wp[i * d + o];
                }
                out[bi * n * d + t * d + o] = acc + if residual { xb[t * d + o] } else { 0.0 };
            }
        }
    }
    out
}

pub fn random_attention(d: usize, h: usize, seed: u64) -> (ParamStore, CascadedAttention) {
    let mut store = ParamStore::default();
    let ca = CascadedAttention::build(&mut store, &mut rng(seed), "attn", d, h, false).unwrap();
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        let n = p.tensor.numel();
        p.tensor.data_mut().copy_from_slice(rand_t(&[n], seed * 100 + i as u64).data());
    }
    (store, ca)
}

pub fn run_attention(store: &ParamStore, ca: &CascadedAttention, x: &Tensor, grid: (usize, usize), residual: bool) -> Tensor {
    let opts = PassOptions {
        residual,
        ..PassOptions::eval()
    };
    let mut pass = Pass::new(store, opts);
    let xv = pass.graph.constant(x.clone());
    let y = ca.forward(&mut pass, xv, grid).unwrap();
    pass.graph.value(y).clone()
}

