//! Hand-coded baseline transformer, independent of the genotype machinery.
//!
//! Reads parameters from a model built with the baseline genotype and
//! recomputes the forward pass with plain loops. Mirrors the documented
//! operation order exactly (same accumulation order, same normalization
//! sequence), so outputs must be bit-identical to the genotype evaluator.

use deskmt_core::numerics::Tensor;
use deskmt_core::seq2seq::Seq2SeqModel;

const MASK_NEG: f64 = -1e30;
const LN_EPS: f64 = 1e-5;

fn get<'a>(m: &'a Seq2SeqModel, name: &str) -> &'a Tensor {
    m.params.get(
        m.params
            .id_by_name(name)
            .unwrap_or_else(|| panic!("missing parameter {name}")),
    )
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

fn add_bias(x: &mut [f64], bias: &[f64]) {
    let c = bias.len();
    for (i, v) in x.iter_mut().enumerate() {
        *v += bias[i % c];
    }
}

fn softmax_row(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in xs.iter_mut() {
        *v /= s;
    }
}

fn layer_norm(x: &[f64], rows: usize, d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for i in 0..rows {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * inv * g[j] + b[j];
        }
    }
    out
}

fn sinusoidal(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = angle.sin();
            if 2 * i + 1 < d {
                pe[pos * d + 2 * i + 1] = angle.cos();
            }
        }
    }
    pe
}

fn embed(m: &Seq2SeqModel, ids: &[usize]) -> Vec<f64> {
    let d = m.config.d_model;
    let table = &get(m, "emb.src").data;
    let pe = sinusoidal(m.config.max_len, d);
    let scale = (d as f64).sqrt();
    let mut x = vec![0.0; ids.len() * d];
    for (t, &id) in ids.iter().enumerate() {
        for j in 0..d {
            x[t * d + j] = table[id * d + j] * scale + pe[t * d + j];
        }
    }
    x
}

#[allow(clippy::too_many_arguments)]
fn attention(
    m: &Seq2SeqModel,
    prefix: &str,
    q_in: &[f64],
    kv_in: &[f64],
    tq: usize,
    tk: usize,
    causal: bool,
) -> Vec<f64> {
    let d = m.config.d_model;
    let h = m.config.n_heads;
    let dk = d / h;
    let mut q = matmul(q_in, &get(m, &format!("{prefix}.wq")).data, tq, d, d);
    add_bias(&mut q, &get(m, &format!("{prefix}.bq")).data);
    let mut k = matmul(kv_in, &get(m, &format!("{prefix}.wk")).data, tk, d, d);
    add_bias(&mut k, &get(m, &format!("{prefix}.bk")).data);
    let mut v = matmul(kv_in, &get(m, &format!("{prefix}.wv")).data, tk, d, d);
    add_bias(&mut v, &get(m, &format!("{prefix}.bv")).data);

    let mut ctx = vec![0.0; tq * d];
    for head in 0..h {
        let off = head * dk;
        let mut scores = vec![0.0; tq * tk];
        for i in 0..tq {
            for j in 0..tk {
                let mut s = 0.0;
                for p in 0..dk {
                    s += q[i * d + off + p] * k[j * d + off + p];
                }
                scores[i * tk + j] = s;
            }
        }
        for s in scores.iter_mut() {
            *s *= 1.0 / (dk as f64).sqrt();
        }
        if causal {
            for i in 0..tq {
                for j in 0..tk {
                    if j > i {
                        scores[i * tk + j] += MASK_NEG;
                    }
                }
            }
        }
        for i in 0..tq {
            softmax_row(&mut scores[i * tk..(i + 1) * tk]);
        }
        for i in 0..tq {
            for p in 0..dk {
                let mut s = 0.0;
                for j in 0..tk {
                    s += scores[i * tk + j] * v[j * d + off + p];
                }
                ctx[i * d + off + p] = s;
            }
        }
    }
    let mut out = matmul(&ctx, &get(m, &format!("{prefix}.wo")).data, tq, d, d);
    add_bias(&mut out, &get(m, &format!("{prefix}.bo")).data);
    out
}

fn ffn(m: &Seq2SeqModel, prefix: &str, x: &[f64], t: usize) -> Vec<f64> {
    let d = m.config.d_model;
    let f = m.config.d_ffn;
    let mut h = matmul(x, &get(m, &format!("{prefix}.w1")).data, t, d, f);
    add_bias(&mut h, &get(m, &format!("{prefix}.b1")).data);
    for v in h.iter_mut() {
        *v = v.max(0.0);
    }
    let mut out = matmul(&h, &get(m, &format!("{prefix}.w2")).data, t, f, d);
    add_bias(&mut out, &get(m, &format!("{prefix}.b2")).data);
    out
}

/// Node output: branch op output + zero branch + residual from first input,
/// mirroring `(b0 + b1) + input` with b1 = 0.
fn node_sum(op_out: &[f64], input: &[f64]) -> Vec<f64> {
    op_out.iter().zip(input).map(|(a, b)| (a + 0.0) + b).collect()
}

/// Full teacher-forced logits of the baseline transformer.
pub fn reference_logits(m: &Seq2SeqModel, src: &[usize], dec_input: &[usize]) -> Vec<f64> {
    let d = m.config.d_model;
    let sp = m.specials;

    // canonical source: cut at first EOS/PAD, append EOS
    let cut = src.iter().position(|&t| t == sp.eos || t == sp.pad).unwrap_or(src.len());
    let mut canon = src[..cut].to_vec();
    canon.push(sp.eos);
    let s_len = canon.len();

    let mut x = embed(m, &canon);
    for l in 0..m.config.n_layers {
        let a = attention(m, &format!("enc.l{l}.n0.b0.sa"), &x, &x, s_len, s_len, false);
        let n1 = node_sum(&a, &x);
        let f = ffn(m, &format!("enc.l{l}.n1.b0.ff"), &n1, s_len);
        let n2 = node_sum(&f, &n1);
        x = layer_norm(
            &n2,
            s_len,
            d,
            &get(m, &format!("enc.l{l}.ln.g")).data,
            &get(m, &format!("enc.l{l}.ln.b")).data,
        );
    }
    let memory = x;

    let t_len = dec_input.len();
    let mut y = embed(m, dec_input);
    for l in 0..m.config.n_layers {
        let a = attention(m, &format!("dec.l{l}.n0.b0.sa"), &y, &y, t_len, t_len, true);
        let n1 = node_sum(&a, &y);
        let c = attention(m, &format!("dec.l{l}.n1.b0.ca"), &n1, &memory, t_len, s_len, false);
        let n2 = node_sum(&c, &n1);
        let f = ffn(m, &format!("dec.l{l}.n2.b0.ff"), &n2, t_len);
        let n3 = node_sum(&f, &n2);
        y = layer_norm(
            &n3,
            t_len,
            d,
            &get(m, &format!("dec.l{l}.ln.g")).data,
            &get(m, &format!("dec.l{l}.ln.b")).data,
        );
    }

    // tied output projection: logits = y @ emb^T + out.b
    let v = m.vocab_size;
    let emb = &get(m, "emb.src").data;
    let bias = &get(m, "out.b").data;
    let mut logits = vec![0.0; t_len * v];
    for i in 0..t_len {
        for j in 0..v {
            let mut s = 0.0;
            for p in 0..d {
                s += y[i * d + p] * emb[j * d + p];
            }
            logits[i * v + j] = s + bias[j];
        }
    }
    logits
}
