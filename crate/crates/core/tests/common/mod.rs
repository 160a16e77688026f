//! Plain-array reference computations shared by the integration tests.
#![allow(dead_code)]

use meed::models::Model;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub struct Ref<'a> {
    pub model: &'a Model<f64>,
}

impl Ref<'_> {
    pub fn p(&self, name: &str) -> (Vec<usize>, Vec<f64>) {
        let t = self.model.param(name).unwrap_or_else(|| panic!("no param {name}"));
        (t.shape().to_vec(), t.data().to_vec())
    }

    /// `W x` for `W` stored `[out×in]`.
    pub fn mv(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let (shape, w) = self.p(name);
        assert_eq!(shape[1], x.len(), "{name}");
        (0..shape[0]).map(|i| (0..shape[1]).map(|j| w[i * shape[1] + j] * x[j]).sum()).collect()
    }

    pub fn bias(&self, name: &str) -> Vec<f64> {
        self.p(name).1
    }

    pub fn row(&self, name: &str, i: usize) -> Vec<f64> {
        let (shape, w) = self.p(name);
        w[i * shape[1]..(i + 1) * shape[1]].to_vec()
    }

    pub fn gru(&self, prefix: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
        let add = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<f64>>();
        let z: Vec<f64> = add(add(self.mv(&format!("{prefix}.w_z"), x), self.mv(&format!("{prefix}.u_z"), h)), self.bias(&format!("{prefix}.b_z")))
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = add(add(self.mv(&format!("{prefix}.w_r"), x), self.mv(&format!("{prefix}.u_r"), h)), self.bias(&format!("{prefix}.b_r")))
            .into_iter()
            .map(sigmoid)
            .collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = add(add(self.mv(&format!("{prefix}.w_h"), x), self.mv(&format!("{prefix}.u_h"), &rh)), self.bias(&format!("{prefix}.b_h")))
            .into_iter()
            .map(f64::tanh)
            .collect();
        (0..h.len()).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect()
    }

    pub fn word_states(&self, ids: &[usize]) -> Vec<Vec<f64>> {
        let d = self.model.config.rnn_hidden;
        let embs: Vec<Vec<f64>> = ids.iter().map(|&i| self.row("embedding", i)).collect();
        let mut fwd = Vec::new();
        let mut h = vec![0.0; d];
        for e in &embs {
            h = self.gru("encoder.words.fwd", e, &h);
            fwd.push(h.clone());
        }
        let mut bwd = vec![Vec::new(); ids.len()];
        let mut h = vec![0.0; d];
        for k in (0..ids.len()).rev() {
            h = self.gru("encoder.words.bwd", &embs[k], &h);
            bwd[k] = h.clone();
        }
        fwd.into_iter().zip(bwd).map(|(mut f, b)| {
            f.extend(b);
            f
        }).collect()
    }

    /// Additive attention with query `q` over `items` projected by `w`.
    pub fn attention(&self, prefix: &str, q: &[f64], items: &[Vec<f64>], w: &str) -> (Vec<f64>, Vec<f64>) {
        let scores: Vec<f64> = items
            .iter()
            .map(|h| {
                let proj = self.mv(&format!("{prefix}.{w}"), h);
                let e: Vec<f64> = proj.iter().zip(q).map(|(a, b)| (a + b).tanh()).collect();
                self.mv(&format!("{prefix}.v"), &e)[0]
            })
            .collect();
        let alpha = softmax(&scores);
        let dim = items[0].len();
        let r = (0..dim).map(|i| items.iter().zip(&alpha).map(|(h, a)| a * h[i]).sum()).collect();
        (r, alpha)
    }

    /// Context vector and β for a hierarchical model at decoder state `s`.
    pub fn hier_context(&self, words: &[Vec<Vec<f64>>], s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.model.config.rnn_hidden;
        let m = words.len();
        let mut ells = vec![Vec::new(); m];
        let mut l_next = vec![0.0; d];
        for j in (0..m).rev() {
            let mut q = self.mv("encoder.word_attn.u", s);
            for (a, b) in q.iter_mut().zip(self.mv("encoder.word_attn.v_l", &l_next)) {
                *a += b;
            }
            let (r, _) = self.attention("encoder.word_attn", &q, &words[j], "w");
            let l = self.gru("encoder.utt.gru", &r, &l_next);
            ells[j] = l.clone();
            l_next = l;
        }
        let q = self.mv("encoder.utt_attn.u", s);
        self.attention("encoder.utt_attn", &q, &ells, "w")
    }

    pub fn emotion(&self, inds: &[[u8; 6]]) -> Vec<f64> {
        let d = self.model.config.rnn_hidden;
        let mut h = vec![0.0; d];
        for ind in inds {
            let x: Vec<f64> = ind.iter().map(|&b| b as f64).collect();
            let a: Vec<f64> = self
                .mv("emotion.w_e", &x)
                .iter()
                .zip(self.bias("emotion.b_e"))
                .map(|(v, b)| sigmoid(v + b))
                .collect();
            h = self.gru("emotion.gru", &a, &h);
        }
        h
    }

    /// One decoder step, returning `(p, s_t)`.
    pub fn step(&self, c: &[f64], e: Option<&[f64]>, s: &[f64], prev: usize) -> (Vec<f64>, Vec<f64>) {
        let mut x = c.to_vec();
        x.extend(self.row("embedding", prev));
        let s1 = self.gru("decoder.gru", &x, s);
        let mut o = s1.clone();
        if let Some(e) = e {
            o.extend_from_slice(e);
        }
        let logits: Vec<f64> = self.mv("output.w", &o).iter().zip(self.bias("output.b")).map(|(a, b)| a + b).collect();
        (softmax(&logits), s1)
    }
}
