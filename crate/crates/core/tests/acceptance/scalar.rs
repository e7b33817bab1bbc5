//! Straight-line scalar forward of the full subjective-ground model.
//!
//! Written from the model definition with explicit loops over plain
//! vectors; it shares nothing with the graph code except parameter storage.

use subjground::autograd::ParamStore;
use subjground::model::ModelConfig;

type Mat = Vec<Vec<f64>>;

fn param(store: &ParamStore, name: &str) -> Mat {
    let t = store.get(store.require(name).expect(name));
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i][j];
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    (0..x.len()).map(|j| (x[j] - mean) / sd * gain[j] + bias[j]).collect()
}

fn softmax(scores: &[f64], mask: &[bool]) -> Vec<f64> {
    let m = scores
        .iter()
        .zip(mask)
        .filter(|p| *p.1)
        .map(|p| *p.0)
        .fold(f64::MIN, f64::max);
    let e: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(s, &on)| if on { (s - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Sentence vector of one token sequence.
pub fn encode(store: &ParamStore, cfg: &ModelConfig, ids: &[usize]) -> Vec<f64> {
    let h = cfg.encoder.hidden;
    let heads = cfg.encoder.heads;
    let dh = h / heads;
    let tok = param(store, "enc.tok");
    let mut x: Mat = ids.iter().map(|&i| tok[i].clone()).collect();
    for b in 0..cfg.encoder.blocks {
        let p = |n: &str| param(store, &format!("enc.b{b}.{n}"));
        let (g1, b1) = (p("ln1_g"), p("ln1_b"));
        let (wq, wk, wv, wo) = (p("wq"), p("wk"), p("wv"), p("wo"));
        let (g2, b2) = (p("ln2_g"), p("ln2_b"));
        let (w1, c1, w2, c2) = (p("w1"), p("b1"), p("w2"), p("b2"));
        let hn: Mat = x.iter().map(|r| layer_norm(r, &g1[0], &b1[0])).collect();
        let q: Mat = hn.iter().map(|r| vecmat(r, &wq)).collect();
        let k: Mat = hn.iter().map(|r| vecmat(r, &wk)).collect();
        let v: Mat = hn.iter().map(|r| vecmat(r, &wv)).collect();
        let n = x.len();
        let mut att = vec![vec![0.0; h]; n];
        for hd in 0..heads {
            for i in 0..n {
                let mut s = vec![0.0; n];
                for (j, sj) in s.iter_mut().enumerate() {
                    for d in hd * dh..(hd + 1) * dh {
                        *sj += q[i][d] * k[j][d];
                    }
                    *sj /= (dh as f64).sqrt();
                }
                let w = softmax(&s, &vec![true; n]);
                for j in 0..n {
                    for d in hd * dh..(hd + 1) * dh {
                        att[i][d] += w[j] * v[j][d];
                    }
                }
            }
        }
        for i in 0..n {
            x[i] = add(&x[i], &vecmat(&att[i], &wo));
        }
        for r in x.iter_mut() {
            let hn = layer_norm(r, &g2[0], &b2[0]);
            let mut f = add(&vecmat(&hn, &w1), &c1[0]);
            for v in f.iter_mut() {
                *v = v.max(0.0);
            }
            let f = add(&vecmat(&f, &w2), &c2[0]);
            *r = add(r, &f);
        }
    }
    let mut pooled = vec![0.0; h];
    for r in &x {
        for d in 0..h {
            pooled[d] += r[d] / x.len() as f64;
        }
    }
    add(
        &vecmat(&pooled, &param(store, "enc.w_out")),
        &param(store, "enc.b_out")[0],
    )
}

/// Multi-head attention of `key` over `rows`: context after the output map
/// and the per-head weights.
fn attention(
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    scale: f64,
    rows: &Mat,
    key: &[f64],
    mask: &[bool],
) -> (Vec<f64>, Mat) {
    let h = key.len();
    let dh = h / heads;
    let p = |n: &str| param(store, &format!("{prefix}{n}"));
    let (wq, wk, wv, wo) = (p("wq"), p("wk"), p("wv"), p("wo"));
    let kp = vecmat(key, &wk);
    let qp: Mat = rows.iter().map(|r| vecmat(r, &wq)).collect();
    let vp: Mat = rows.iter().map(|r| vecmat(r, &wv)).collect();
    let mut mixed = vec![0.0; h];
    let mut weights = vec![vec![0.0; heads]; rows.len()];
    for hd in 0..heads {
        let scores: Vec<f64> = qp
            .iter()
            .map(|q| (hd * dh..(hd + 1) * dh).map(|d| q[d] * kp[d]).sum::<f64>() * scale)
            .collect();
        let w = softmax(&scores, mask);
        for (g, wg) in w.iter().enumerate() {
            weights[g][hd] = *wg;
            for d in hd * dh..(hd + 1) * dh {
                mixed[d] += wg * vp[g][d];
            }
        }
    }
    (vecmat(&mixed, &wo), weights)
}

fn classify(store: &ParamStore, prefix: &str, x: &[f64]) -> [f64; 2] {
    let p = |n: &str| param(store, &format!("{prefix}{n}"));
    let mut hid = add(&vecmat(x, &p("w1")), &p("b1")[0]);
    for v in hid.iter_mut() {
        *v = v.max(0.0);
    }
    let o = add(&vecmat(&hid, &p("w2")), &p("b2")[0]);
    [o[0], o[1]]
}

pub struct ScalarOut {
    pub stage1_logits: [f64; 2],
    pub logits: [f64; 2],
    pub sg_weights: Mat,
    pub value_weights: Mat,
}

/// Full model on one instance: stage-1 logits and final logits.
pub fn sg_attention(
    store: &ParamStore,
    cfg: &ModelConfig,
    situation: &[usize],
    sg: &[Vec<usize>],
    mask: &[bool],
    rots: &[Vec<usize>],
) -> ScalarOut {
    let heads = cfg.attention_heads;
    let scale = match cfg.norm {
        subjground::model::NormMode::One => 1.0,
        subjground::model::NormMode::SqrtDk => 1.0 / (cfg.encoder.hidden as f64).sqrt(),
    };
    let z = encode(store, cfg, situation);
    let sg_rows: Mat = sg.iter().map(|t| encode(store, cfg, t)).collect();
    let (sg_ctx, sg_weights) = attention(store, "sg_attn.", heads, scale, &sg_rows, &z, mask);
    let mut first = sg_ctx.clone();
    first.extend_from_slice(&z);
    let stage1_logits = classify(store, "clf1.", &first);

    let val: Mat = rots.iter().map(|t| encode(store, cfg, t)).collect();
    let (ctx, value_weights) = attention(store, "val_attn.", heads, scale, &val, &sg_ctx, &vec![true; val.len()]);
    let mut x = ctx;
    x.extend_from_slice(&z);
    ScalarOut {
        stage1_logits,
        logits: classify(store, "clf_final.", &x),
        sg_weights,
        value_weights,
    }
}
