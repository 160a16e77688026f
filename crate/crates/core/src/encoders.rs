//! Hierarchical attention encoder.
//!
//! A bidirectional GRU encodes every context utterance into per-word states
//! `h_jk = [h^f_jk ; h^b_jk]`. At each decoding step an utterance-level GRU
//! runs from the last utterance to the first; its input for utterance `j` is
//! an additive-attention summary of `h_j·` conditioned on the previous decoder
//! state and the utterance encoder's previous state. A second attention over
//! the utterance-level outputs gives the context vector `c_t`.
//!
//! All activations are batched as rows: a `[B×d]` matrix holds one vector per
//! example. Weight matrices are stored `[out×in]` and applied as `x·Wᵀ`.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Parameter initialisation: weights uniform in `[-scale, scale)`, biases zero.
pub struct Init<'a> {
    pub rng: &'a mut SeededRng,
    pub scale: f64,
}

impl Init<'_> {
    pub(crate) fn weight<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        name: String,
        shape: &[usize],
    ) -> Result<ParamId> {
        let t = Tensor::uniform(shape.to_vec(), self.scale, self.rng)?;
        store.add(name, t)
    }

    pub(crate) fn bias<T: Real>(&mut self, store: &mut ParamStore<T>, name: String, n: usize) -> Result<ParamId> {
        store.add(name, Tensor::zeros(vec![n])?)
    }
}

pub(crate) fn affine<T: Real>(t: &mut Tape<'_, T>, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
    let w = t.param(w)?;
    let y = t.matmul_nt(x, w)?;
    match b {
        Some(b) => {
            let b = t.param(b)?;
            t.add_bias(y, b)
        }
        None => Ok(y),
    }
}

/// One GRU cell.
///
/// ```text
/// z  = σ(x W_zᵀ + h U_zᵀ + b_z)
/// r  = σ(x W_rᵀ + h U_rᵀ + b_r)
/// h̃  = tanh(x W_hᵀ + (r ⊙ h) U_hᵀ + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: &mut Init<'_>,
    ) -> Result<Self> {
        let w = |init: &mut Init<'_>, store: &mut ParamStore<T>, n: &str, cols: usize| {
            init.weight(store, format!("{prefix}.{n}"), &[hidden, cols])
        };
        let w_z = w(init, store, "w_z", input)?;
        let u_z = w(init, store, "u_z", hidden)?;
        let b_z = init.bias(store, format!("{prefix}.b_z"), hidden)?;
        let w_r = w(init, store, "w_r", input)?;
        let u_r = w(init, store, "u_r", hidden)?;
        let b_r = init.bias(store, format!("{prefix}.b_r"), hidden)?;
        let w_h = w(init, store, "w_h", input)?;
        let u_h = w(init, store, "u_h", hidden)?;
        let b_h = init.bias(store, format!("{prefix}.b_h"), hidden)?;
        Ok(Self {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
            input,
            hidden,
        })
    }

    /// `h_prev: [B×hidden]`, `x: [B×input]`.
    pub fn step<T: Real>(&self, t: &mut Tape<'_, T>, h_prev: Var, x: Var) -> Result<Var> {
        let xz = affine(t, x, self.w_z, Some(self.b_z))?;
        let hz = affine(t, h_prev, self.u_z, None)?;
        let z = t.add(xz, hz)?;
        let z = t.sigmoid(z)?;

        let xr = affine(t, x, self.w_r, Some(self.b_r))?;
        let hr = affine(t, h_prev, self.u_r, None)?;
        let r = t.add(xr, hr)?;
        let r = t.sigmoid(r)?;

        let xh = affine(t, x, self.w_h, Some(self.b_h))?;
        let rh = t.mul(r, h_prev)?;
        let rh = affine(t, rh, self.u_h, None)?;
        let cand = t.add(xh, rh)?;
        let cand = t.tanh(cand)?;

        // (1 − z) ⊙ h + z ⊙ h̃  ==  h + z ⊙ (h̃ − h)
        let delta = t.sub(cand, h_prev)?;
        let delta = t.mul(z, delta)?;
        t.add(h_prev, delta)
    }

    /// Like [`step`](Self::step), but rows whose `mask` entry is 0 keep `h_prev`.
    pub fn step_masked<T: Real>(&self, t: &mut Tape<'_, T>, h_prev: Var, x: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.step(t, h_prev, x)?;
        match mask {
            None => Ok(h),
            Some(m) => {
                let delta = t.sub(h, h_prev)?;
                let delta = t.row_scale(delta, m)?;
                t.add(h_prev, delta)
            }
        }
    }
}

/// A batch of equal-position token sequences, right-padded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub rows: usize,
    pub len: usize,
    /// Row-major `[rows×len]`.
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[&[usize]], pad_id: usize) -> Result<Self> {
        let rows = seqs.len();
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if rows == 0 || len == 0 {
            return Err(Error::contract("token batch needs at least one non-empty sequence"));
        }
        let mut ids = Vec::with_capacity(rows * len);
        let mut mask = Vec::with_capacity(rows * len);
        for s in seqs {
            if s.is_empty() {
                return Err(Error::contract("empty utterance in batch"));
            }
            for k in 0..len {
                ids.push(s.get(k).copied().unwrap_or(pad_id));
                mask.push(k < s.len());
            }
        }
        Ok(Self { rows, len, ids, mask })
    }

    pub fn column(&self, k: usize) -> Vec<usize> {
        (0..self.rows).map(|b| self.ids[b * self.len + k]).collect()
    }

    pub fn column_mask(&self, k: usize) -> Vec<bool> {
        (0..self.rows).map(|b| self.mask[b * self.len + k]).collect()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.mask.chunks(self.len).map(|r| r.iter().filter(|&&m| m).count()).collect()
    }
}

fn mask_var<T: Real>(t: &mut Tape<'_, T>, mask: &[bool]) -> Result<Option<Var>> {
    if mask.iter().all(|&m| m) {
        return Ok(None);
    }
    let data = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    t.constant_from(vec![mask.len(), 1], data).map(Some)
}

/// Word-level outputs for one utterance position across the batch.
#[derive(Clone, Debug)]
pub struct EncodedUtterance {
    /// `h_k` for each position, each `[B×2d_w]`.
    pub states: Vec<Var>,
    /// `[B×len]`, true for real tokens.
    pub mask: Vec<bool>,
    /// Cached `h_k W_aᵀ`, independent of the decoding step.
    pub projected: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct WordEncoder {
    pub forward: GruCell,
    pub backward: GruCell,
}

impl WordEncoder {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: &mut Init<'_>,
    ) -> Result<Self> {
        Ok(Self {
            forward: GruCell::register(store, &format!("{prefix}.fwd"), input, hidden, init)?,
            backward: GruCell::register(store, &format!("{prefix}.bwd"), input, hidden, init)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    /// Per-position `[h^f_k ; h^b_k]`. Padding is skipped by both directions:
    /// the forward state carries over padded positions and the backward pass
    /// starts from zero at each row's last real token.
    pub fn encode<T: Real>(&self, t: &mut Tape<'_, T>, embeddings: Var, batch: &TokenBatch) -> Result<Vec<Var>> {
        let b = batch.rows;
        let d = self.forward.hidden;
        let mut inputs = Vec::with_capacity(batch.len);
        let mut masks = Vec::with_capacity(batch.len);
        for k in 0..batch.len {
            inputs.push(t.gather_rows(embeddings, &batch.column(k))?);
            masks.push(mask_var(t, &batch.column_mask(k))?);
        }
        let mut fwd = Vec::with_capacity(batch.len);
        let mut h = t.zeros(vec![b, d])?;
        for k in 0..batch.len {
            h = self.forward.step_masked(t, h, inputs[k], masks[k])?;
            fwd.push(h);
        }
        let mut bwd = vec![None; batch.len];
        let mut h = t.zeros(vec![b, d])?;
        for k in (0..batch.len).rev() {
            h = self.backward.step_masked(t, h, inputs[k], masks[k])?;
            bwd[k] = Some(h);
        }
        fwd.into_iter()
            .zip(bwd)
            .map(|(f, bk)| t.concat(&[f, bk.expect("filled")], 1))
            .collect()
    }
}

/// Additive attention over the words of one utterance:
/// `a_k = vᵀ tanh(U s + V ℓ + W h_k)`, `α = softmax(a)`, `r = Σ α_k h_k`.
///
/// `V` is absent in the flat (non-hierarchical) variant.
#[derive(Clone, Debug)]
pub struct WordAttention {
    pub v: ParamId,
    pub u: ParamId,
    pub v_l: Option<ParamId>,
    pub w: ParamId,
    pub depth: usize,
}

impl WordAttention {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        decoder_dim: usize,
        utterance_dim: Option<usize>,
        word_dim: usize,
        depth: usize,
        init: &mut Init<'_>,
    ) -> Result<Self> {
        let v = init.weight(store, format!("{prefix}.v"), &[1, depth])?;
        let u = init.weight(store, format!("{prefix}.u"), &[depth, decoder_dim])?;
        let v_l = match utterance_dim {
            Some(du) => Some(init.weight(store, format!("{prefix}.v_l"), &[depth, du])?),
            None => None,
        };
        let w = init.weight(store, format!("{prefix}.w"), &[depth, word_dim])?;
        Ok(Self { v, u, v_l, w, depth })
    }

    /// Computes `W h_k` for every position; valid for all decoding steps.
    pub fn project<T: Real>(&self, t: &mut Tape<'_, T>, states: &[Var]) -> Result<Vec<Var>> {
        states.iter().map(|&h| affine(t, h, self.w, None)).collect()
    }

    pub fn prepare<T: Real>(&self, t: &mut Tape<'_, T>, states: Vec<Var>, mask: Vec<bool>) -> Result<EncodedUtterance> {
        let projected = self.project(t, &states)?;
        Ok(EncodedUtterance {
            states,
            mask,
            projected,
        })
    }

    /// Returns `(r [B×2d_w], α [B×len])`. `l_next = None` stands for a zero state.
    pub fn attend<T: Real>(
        &self,
        t: &mut Tape<'_, T>,
        s_prev: Var,
        l_next: Option<Var>,
        utt: &EncodedUtterance,
    ) -> Result<(Var, Var)> {
        let mut query = affine(t, s_prev, self.u, None)?;
        if let (Some(v_l), Some(l)) = (self.v_l, l_next) {
            let q2 = affine(t, l, v_l, None)?;
            query = t.add(query, q2)?;
        }
        let mut scores = Vec::with_capacity(utt.states.len());
        for &p in &utt.projected {
            let e = t.add(p, query)?;
            let e = t.tanh(e)?;
            scores.push(affine(t, e, self.v, None)?);
        }
        let scores = t.concat(&scores, 1)?;
        let alpha = t.masked_softmax(scores, &utt.mask)?;
        let r = weighted_sum(t, alpha, &utt.states)?;
        Ok((r, alpha))
    }
}

/// `Σ_k weights[:,k] ⊙ items[k]` for `weights: [B×n]`.
pub(crate) fn weighted_sum<T: Real>(t: &mut Tape<'_, T>, weights: Var, items: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (k, &item) in items.iter().enumerate() {
        let w = t.slice_cols(weights, k, 1)?;
        let term = t.row_scale(item, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => t.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::contract("weighted sum over nothing"))
}

/// Utterance-level GRU, run from the last context utterance to the first.
#[derive(Clone, Debug)]
pub struct UtteranceEncoder {
    pub cell: GruCell,
}

impl UtteranceEncoder {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: &mut Init<'_>,
    ) -> Result<Self> {
        Ok(Self {
            cell: GruCell::register(store, &format!("{prefix}.gru"), input, hidden, init)?,
        })
    }

    /// `ℓ_j` for `j = 1..m` (returned oldest first), recomputed for the
    /// decoder state `s_prev`.
    pub fn encode<T: Real>(
        &self,
        t: &mut Tape<'_, T>,
        s_prev: Var,
        utterances: &[EncodedUtterance],
        attention: &WordAttention,
    ) -> Result<Vec<Var>> {
        self.encode_traced(t, s_prev, utterances, attention, |_| {})
    }

    /// As [`encode`](Self::encode), calling `on_step(j)` (0-based) as each
    /// utterance is consumed.
    pub fn encode_traced<T: Real>(
        &self,
        t: &mut Tape<'_, T>,
        s_prev: Var,
        utterances: &[EncodedUtterance],
        attention: &WordAttention,
        mut on_step: impl FnMut(usize),
    ) -> Result<Vec<Var>> {
        let m = utterances.len();
        if m == 0 {
            return Err(Error::contract("utterance encoder needs at least one utterance"));
        }
        let rows = t.shape(s_prev)[0];
        let zero = t.zeros(vec![rows, self.cell.hidden])?;
        let mut out = vec![None; m];
        let mut l_next: Option<Var> = None;
        for j in (0..m).rev() {
            on_step(j);
            let (r, _) = attention.attend(t, s_prev, l_next, &utterances[j])?;
            let l = self.cell.step(t, l_next.unwrap_or(zero), r)?;
            out[j] = Some(l);
            l_next = Some(l);
        }
        Ok(out.into_iter().map(|l| l.expect("filled")).collect())
    }
}

/// `b_j = v_bᵀ tanh(U_b s + W_b ℓ_j)`, `β = softmax(b)`, `c = Σ β_j ℓ_j`.
#[derive(Clone, Debug)]
pub struct UtteranceAttention {
    pub v: ParamId,
    pub u: ParamId,
    pub w: ParamId,
    pub depth: usize,
}

impl UtteranceAttention {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        decoder_dim: usize,
        utterance_dim: usize,
        depth: usize,
        init: &mut Init<'_>,
    ) -> Result<Self> {
        Ok(Self {
            v: init.weight(store, format!("{prefix}.v"), &[1, depth])?,
            u: init.weight(store, format!("{prefix}.u"), &[depth, decoder_dim])?,
            w: init.weight(store, format!("{prefix}.w"), &[depth, utterance_dim])?,
            depth,
        })
    }

    /// Returns `(c [B×d_u], β [B×m])`.
    pub fn attend<T: Real>(&self, t: &mut Tape<'_, T>, s_prev: Var, ells: &[Var]) -> Result<(Var, Var)> {
        if ells.is_empty() {
            return Err(Error::contract("utterance attention over zero utterances"));
        }
        let query = affine(t, s_prev, self.u, None)?;
        let mut scores = Vec::with_capacity(ells.len());
        for &l in ells {
            let e = affine(t, l, self.w, None)?;
            let e = t.add(e, query)?;
            let e = t.tanh(e)?;
            scores.push(affine(t, e, self.v, None)?);
        }
        let scores = t.concat(&scores, 1)?;
        let beta = t.softmax(scores, 1)?;
        let c = weighted_sum(t, beta, ells)?;
        Ok((c, beta))
    }
}
