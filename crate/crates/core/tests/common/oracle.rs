//! Straight-line reference implementation on plain vectors. Shares no code
//! with the tape; parameters are read from the store by name.

use dan_core::{ParamStore, Tensor};

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(cols, x.len());
    let mut out = vec![0.0; rows];
    for i in 0..rows {
        let mut acc = 0.0;
        for j in 0..cols {
            acc += w.data()[i * cols + j] * x[j];
        }
        out[i] = acc;
    }
    out
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn tanh(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.tanh()).collect()
}

fn sigmoid(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(scores: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(s, &m)| if m { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn affine(store: &ParamStore, w: &str, b: &str, x: &[f64]) -> Vec<f64> {
    add(&matvec(p(store, w), x), p(store, b).data())
}

fn weighted_rows(weights: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (w, row) in weights.iter().zip(rows) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += w * r;
        }
    }
    out
}

/// One LSTM step with gates under `{dir}/{input,forget,output,cell}`.
pub fn lstm_step(store: &ParamStore, dir: &str, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let gate = |g: &str| {
        add(
            &affine(store, &format!("{dir}/{g}/w_x"), &format!("{dir}/{g}/b"), x),
            &matvec(p(store, &format!("{dir}/{g}/w_h")), h),
        )
    };
    let i = sigmoid(&gate("input"));
    let f = sigmoid(&gate("forget"));
    let o = sigmoid(&gate("output"));
    let g = tanh(&gate("cell"));
    let c_new = add(&mul(&f, c), &mul(&i, &g));
    let h_new = mul(&o, &tanh(&c_new));
    (h_new, c_new)
}

/// `u_t` for every valid token, followed by zero rows for the padding.
pub fn encode(store: &ParamStore, prefix: &str, ids: &[usize], valid: usize) -> Vec<Vec<f64>> {
    let m = p(store, &format!("{prefix}/text/embed"));
    let (d, vocab) = (m.shape()[0], m.shape()[1]);
    let xs: Vec<Vec<f64>> = ids[..valid]
        .iter()
        .map(|&id| (0..d).map(|r| m.data()[r * vocab + id]).collect())
        .collect();
    let zero = vec![0.0; d];
    let mut fwd = Vec::new();
    let (mut h, mut c) = (zero.clone(), zero.clone());
    for x in &xs {
        (h, c) = lstm_step(store, &format!("{prefix}/text/lstm_fwd"), x, &h, &c);
        fwd.push(h.clone());
    }
    let mut bwd = vec![zero.clone(); valid];
    let (mut h, mut c) = (zero.clone(), zero.clone());
    for t in (0..valid).rev() {
        (h, c) = lstm_step(store, &format!("{prefix}/text/lstm_bwd"), &xs[t], &h, &c);
        bwd[t] = h.clone();
    }
    let mut rows: Vec<Vec<f64>> = (0..valid).map(|t| add(&fwd[t], &bwd[t])).collect();
    rows.resize(ids.len(), zero);
    rows
}

pub fn global_visual(store: &ParamStore, prefix: &str, regions: &[Vec<f64>]) -> Vec<f64> {
    let n = regions.len() as f64;
    let mut mean = vec![0.0; regions[0].len()];
    for r in regions {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    tanh(&affine(store, &format!("{prefix}/visual/p0"), &format!("{prefix}/visual/b_p0"), &mean))
}

pub fn global_textual(rows: &[Vec<f64>], valid: usize) -> Vec<f64> {
    let mut mean = vec![0.0; rows[0].len()];
    for r in &rows[..valid] {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= valid as f64);
    mean
}

fn gated_scores(store: &ParamStore, base: &str, x_name: &str, items: &[Vec<f64>], memory: &[f64]) -> Vec<f64> {
    let mem = tanh(&affine(store, &format!("{base}/w_m"), &format!("{base}/b_m"), memory));
    items
        .iter()
        .map(|item| {
            let it = tanh(&affine(store, &format!("{base}/w_{x_name}"), &format!("{base}/b_{x_name}"), item));
            let h = mul(&it, &mem);
            affine(store, &format!("{base}/w_h"), &format!("{base}/b_h"), &h)[0]
        })
        .collect()
}

/// Step-`k` visual attention: `(weights, context)`.
pub fn visual_attend(store: &ParamStore, prefix: &str, k: usize, regions: &[Vec<f64>], memory: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let base = format!("{prefix}/visual/step{k}");
    let scores = gated_scores(store, &base, "v", regions, memory);
    let alpha = softmax(&scores, &vec![true; regions.len()]);
    let pooled = weighted_rows(&alpha, regions);
    let ctx = tanh(&affine(store, &format!("{base}/p"), &format!("{base}/b_p"), &pooled));
    (alpha, ctx)
}

/// Step-`k` textual attention over the first `valid` rows: `(weights, context)`.
pub fn textual_attend(store: &ParamStore, prefix: &str, k: usize, rows: &[Vec<f64>], valid: usize, memory: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let base = format!("{prefix}/textual/step{k}");
    let scores = gated_scores(store, &base, "u", rows, memory);
    let mask: Vec<bool> = (0..rows.len()).map(|t| t < valid).collect();
    let alpha = softmax(&scores, &mask);
    let ctx = weighted_rows(&alpha, rows);
    (alpha, ctx)
}

pub struct RDanOracle {
    pub m0: Vec<f64>,
    pub memories: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub visual: Vec<Vec<f64>>,
    pub textual: Vec<Vec<f64>>,
}

pub fn rdan(store: &ParamStore, steps: usize, regions: &[Vec<f64>], ids: &[usize], valid: usize) -> RDanOracle {
    let pre = "rdan";
    let u = encode(store, pre, ids, valid);
    let v0 = global_visual(store, pre, regions);
    let u0 = global_textual(&u, valid);
    let m0 = mul(&v0, &u0);
    let mut m = m0.clone();
    let (mut memories, mut visual, mut textual) = (Vec::new(), Vec::new(), Vec::new());
    for k in 1..=steps {
        let (av, vk) = visual_attend(store, pre, k, regions, &m);
        let (au, uk) = textual_attend(store, pre, k, &u, valid, &m);
        m = add(&m, &mul(&vk, &uk));
        memories.push(m.clone());
        visual.push(av);
        textual.push(au);
    }
    let logits = affine(store, "rdan/answer/w", "rdan/answer/b", &m);
    let probs = softmax(&logits, &vec![true; logits.len()]);
    RDanOracle { m0, memories, probs, visual, textual }
}

/// `(S, [s_0..s_K])` of the matching network.
pub fn mdan(store: &ParamStore, steps: usize, regions: &[Vec<f64>], ids: &[usize], valid: usize) -> (f64, Vec<f64>) {
    let pre = "mdan";
    let u = encode(store, pre, ids, valid);
    let mut mv = global_visual(store, pre, regions);
    let mut mu = global_textual(&u, valid);
    let mut per_step = vec![dot(&mv, &mu)];
    for k in 1..=steps {
        let (_, vk) = visual_attend(store, pre, k, regions, &mv);
        let (_, uk) = textual_attend(store, pre, k, &u, valid, &mu);
        per_step.push(dot(&vk, &uk));
        mv = add(&mv, &vk);
        mu = add(&mu, &uk);
    }
    (per_step.iter().sum(), per_step)
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}
