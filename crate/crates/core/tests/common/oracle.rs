//! Straight-line reference for one region-aware joint-attention layer.
//!
//! Written against plain `Vec<Vec<f64>>` with explicit loops and no shared
//! code with the engine, so agreement between the two is evidence that the
//! engine's matrix plumbing is right.
//!
//! Layer semantics, in order:
//! 1. `Q = Z Wq`, `K = Z Wk`, `V = Z Wv`; `s = 1 / sqrt(d)`.
//! 2. `A_sub[r][j] = softmax_j(s * Q[sub_r] . K[story_j])`, `a[j]` = mean over r.
//! 3. `M_sub[j] = a[j] >= tau * max(a)` (relative) or `a[j] >= tau`;
//!    `M_ele = 1 - M_sub`.
//! 4. `L = s * Q K^T`. Story->reference and reference->story cross blocks
//!    are softmaxed within the block. Reference j is in `M_ref` when some
//!    subject-region story token i has both block weights at or above
//!    their row's linear-interpolated quantile. `match[i]` = first argmax.
//! 5. Story values of subject tokens whose match is in `M_ref` become
//!    `lambda V_s[i] + (1 - lambda) V_r[match[i]]`.
//! 6. Element-token rows get `+ alpha * M_ele[j]` on story keys; the layer
//!    output is `Z + softmax_rows(L + B) V'`.

#![allow(dead_code)]

pub type Mat = Vec<Vec<f64>>;

pub struct Instance {
    pub z: Mat,
    pub prompt_len: usize,
    pub hw: usize,
    pub subject: (usize, usize),
    pub element: (usize, usize),
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub tau: f64,
    pub relative: bool,
    pub lambda: f64,
    pub alpha: f64,
    pub quantile: f64,
}

pub struct OracleOut {
    pub z_new: Mat,
    pub a_sub: Vec<f64>,
    pub m_sub: Vec<bool>,
    pub m_ref: Vec<bool>,
    pub matches: Vec<Option<usize>>,
    pub a_ele: Mat,
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let inner = b.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..inner {
                acc += a[i][k] * b[k][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        acc += a[k] * b[k];
    }
    acc
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// `Z + softmax(Q K^T / sqrt(d)) V` with no region control at all.
pub fn plain_layer(z: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> Mat {
    let d = z[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    let q = matmul(z, wq);
    let k = matmul(z, wk);
    let v = matmul(z, wv);
    let n = z.len();
    let mut out = z.clone();
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| dot(&q[i], &k[j]) * scale).collect();
        let w = softmax(&logits);
        for c in 0..d {
            let mut acc = 0.0;
            for j in 0..n {
                acc += w[j] * v[j][c];
            }
            out[i][c] += acc;
        }
    }
    out
}

pub fn forward(inst: &Instance) -> OracleOut {
    let z = &inst.z;
    let n = z.len();
    let d = z[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    let ref0 = inst.prompt_len;
    let story0 = inst.prompt_len + inst.hw;
    let hw = inst.hw;

    let q = matmul(z, &inst.wq);
    let k = matmul(z, &inst.wk);
    let v = matmul(z, &inst.wv);

    // subject attention, averaged over subject rows
    let mut a_sub = vec![0.0; hw];
    let rows = inst.subject.1 - inst.subject.0;
    for r in inst.subject.0..inst.subject.1 {
        let logits: Vec<f64> = (0..hw).map(|j| dot(&q[r], &k[story0 + j]) * scale).collect();
        let w = softmax(&logits);
        for j in 0..hw {
            a_sub[j] += w[j];
        }
    }
    for x in a_sub.iter_mut() {
        *x /= rows as f64;
    }

    let mut max = f64::NEG_INFINITY;
    for &x in &a_sub {
        if x > max {
            max = x;
        }
    }
    let cut = if inst.relative { inst.tau * max } else { inst.tau };
    let m_sub: Vec<bool> = a_sub.iter().map(|&x| x >= cut).collect();
    let m_ele: Vec<bool> = m_sub.iter().map(|&b| !b).collect();

    // cross blocks
    let mut s_to_r = vec![vec![0.0; hw]; hw];
    let mut r_to_s = vec![vec![0.0; hw]; hw];
    for i in 0..hw {
        let logits: Vec<f64> = (0..hw).map(|j| dot(&q[story0 + i], &k[ref0 + j]) * scale).collect();
        s_to_r[i] = softmax(&logits);
    }
    for j in 0..hw {
        let logits: Vec<f64> = (0..hw).map(|i| dot(&q[ref0 + j], &k[story0 + i]) * scale).collect();
        r_to_s[j] = softmax(&logits);
    }
    let q_s: Vec<f64> = (0..hw).map(|i| quantile(&s_to_r[i], inst.quantile)).collect();
    let q_r: Vec<f64> = (0..hw).map(|j| quantile(&r_to_s[j], inst.quantile)).collect();
    let mut m_ref = vec![false; hw];
    let mut matches = vec![None; hw];
    for i in 0..hw {
        if !m_sub[i] {
            continue;
        }
        let mut best = 0;
        for j in 0..hw {
            if s_to_r[i][j] > s_to_r[i][best] {
                best = j;
            }
            if s_to_r[i][j] >= q_s[i] && r_to_s[j][i] >= q_r[j] {
                m_ref[j] = true;
            }
        }
        matches[i] = Some(best);
    }

    // value mixing
    let mut v_mixed = v.clone();
    for i in 0..hw {
        if let Some(j) = matches[i] {
            if m_sub[i] && m_ref[j] {
                for c in 0..d {
                    v_mixed[story0 + i][c] =
                        inst.lambda * v[story0 + i][c] + (1.0 - inst.lambda) * v[ref0 + j][c];
                }
            }
        }
    }

    // element attention over story keys only (diagnostic)
    let mut a_ele = Vec::new();
    for r in inst.element.0..inst.element.1 {
        let logits: Vec<f64> = (0..hw)
            .map(|j| dot(&q[r], &k[story0 + j]) * scale + if m_ele[j] { inst.alpha } else { 0.0 })
            .collect();
        a_ele.push(softmax(&logits));
    }

    // biased joint attention
    let mut z_new = z.clone();
    for i in 0..n {
        let in_element = i >= inst.element.0 && i < inst.element.1;
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                let mut l = dot(&q[i], &k[j]) * scale;
                if in_element && j >= story0 && m_ele[j - story0] {
                    l += inst.alpha;
                }
                l
            })
            .collect();
        let w = softmax(&logits);
        for c in 0..d {
            let mut acc = 0.0;
            for j in 0..n {
                acc += w[j] * v_mixed[j][c];
            }
            z_new[i][c] += acc;
        }
    }

    OracleOut { z_new, a_sub, m_sub, m_ref, matches, a_ele }
}
