//! Perplexity, BLEU, rater agreement, and output-layer weight export.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::models::{Example, Model};
use crate::tensor::{Real, Tape};

const PPL_CHUNK: usize = 64;

/// Corpus-level perplexity: `exp(Σ NLL / Σ target tokens)` under teacher
/// forcing, with eos counted as a target and padding excluded.
pub fn perplexity<T: Real>(model: &Model<T>, examples: &[Example]) -> Result<f64> {
    let (nll, tokens) = total_nll(model, examples)?;
    Ok((nll / tokens as f64).exp())
}

/// Summed NLL and token count over `examples`.
pub fn total_nll<T: Real>(model: &Model<T>, examples: &[Example]) -> Result<(f64, usize)> {
    if examples.is_empty() {
        return Err(Error::contract("perplexity over an empty set"));
    }
    let (mut nll, mut tokens) = (0.0, 0usize);
    for part in examples.chunks(PPL_CHUNK) {
        let refs: Vec<&Example> = part.iter().collect();
        let mut t = Tape::new(&model.params);
        let (sum, n) = model.nll(&mut t, &refs)?;
        nll += t.value(sum)[0].as_f64();
        tokens += n;
    }
    Ok((nll, tokens))
}

/// Single-reference corpus BLEU.
///
/// `precisions[n-1]` is the clipped n-gram precision pooled over the corpus.
/// `bleu[n-1]` is `BP · (p_1 ⋯ p_n)^(1/n)` with brevity penalty
/// `BP = min(1, exp(1 − r/c))` for total reference length `r` and candidate
/// length `c`. No smoothing: any zero precision makes that score 0, and an
/// all-empty candidate set scores 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScores {
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub bleu: [f64; 4],
    /// Mean of BLEU-1..4.
    pub average: f64,
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

pub fn bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<BleuScores> {
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refr) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refr.len();
        for n in 1..=4 {
            let rc = ngrams(refr, n);
            for (g, count) in ngrams(cand, n) {
                matches[n - 1] += count.min(rc.get(&g).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    let precisions = [0, 1, 2, 3].map(|i| if totals[i] == 0 { 0.0 } else { matches[i] as f64 / totals[i] as f64 });
    let bp = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let mut bleu = [0.0; 4];
    for n in 1..=4 {
        let ps = &precisions[..n];
        bleu[n - 1] = if ps.contains(&0.0) {
            0.0
        } else {
            bp * (ps.iter().map(|p| p.ln()).sum::<f64>() / n as f64).exp()
        };
    }
    Ok(BleuScores {
        precisions,
        brevity_penalty: bp,
        bleu,
        average: bleu.iter().sum::<f64>() / 4.0,
    })
}

/// Categorical ratings: one row per item, one column per rater, values in
/// `0..k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RatingMatrix {
    k: usize,
    raters: usize,
    rows: Vec<Vec<usize>>,
}

impl RatingMatrix {
    pub fn new(rows: Vec<Vec<usize>>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::contract("a rating scale needs at least 2 points"));
        }
        let raters = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || raters < 2 {
            return Err(Error::contract("need at least one item and two raters"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != raters {
                return Err(Error::contract(format!("item {} has {} ratings, expected {raters}", i + 1, r.len())));
            }
            if let Some(&bad) = r.iter().find(|&&v| v >= k) {
                return Err(Error::contract(format!("item {} has score {bad} outside 0..{k}", i + 1)));
            }
        }
        Ok(Self { k, raters, rows })
    }

    /// Tab-separated integers, one item per line. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str, k: usize) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split('\t')
                .map(|c| {
                    c.trim().parse::<usize>().map_err(|e| Error::Parse {
                        line: i + 1,
                        message: format!("{c:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::new(rows, k)
    }

    pub fn load(path: &Path, k: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, k)
    }

    pub fn items(&self) -> usize {
        self.rows.len()
    }

    pub fn raters(&self) -> usize {
        self.raters
    }

    pub fn scale(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }
}

/// Fleiss' kappa, `(P̄ − P̄_e) / (1 − P̄_e)`.
pub fn fleiss_kappa(m: &RatingMatrix) -> Result<f64> {
    let (n, r) = (m.items() as f64, m.raters as f64);
    let mut totals = vec![0usize; m.k];
    let mut p_bar = 0.0;
    for row in &m.rows {
        let mut counts = vec![0usize; m.k];
        for &v in row {
            counts[v] += 1;
            totals[v] += 1;
        }
        let sq: usize = counts.iter().map(|c| c * c).sum();
        p_bar += (sq as f64 - r) / (r * (r - 1.0));
    }
    p_bar /= n;
    let p_e: f64 = totals.iter().map(|&c| (c as f64 / (n * r)).powi(2)).sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Err(Error::DegenerateAgreement);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Finn's r: `1 − mean item variance / ((k² − 1) / 12)`. Item variance is
/// the population variance of that item's ratings.
pub fn finns_r(m: &RatingMatrix, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::contract("Finn's r needs k >= 2"));
    }
    let chance = (k * k - 1) as f64 / 12.0;
    let r = m.raters as f64;
    let mean_var = m
        .rows
        .iter()
        .map(|row| {
            let mu = row.iter().sum::<usize>() as f64 / r;
            row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / r
        })
        .sum::<f64>()
        / m.items() as f64;
    Ok(1.0 - mean_var / chance)
}

/// Output-layer rows for a word list.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightExport {
    pub d: usize,
    pub rows: Vec<WeightRow>,
    /// Requested words absent from the vocabulary.
    pub skipped: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRow {
    pub word: String,
    pub polarity: String,
    pub lm_half: Vec<f64>,
    pub emotion_half: Option<Vec<f64>>,
    /// First two principal-component coordinates of `lm_half` over the export.
    pub lm_pc: [f64; 2],
    pub emotion_pc: Option<[f64; 2]>,
}

/// Parses `word<TAB>polarity` lines; `#` comments and blank lines skipped.
pub fn parse_wordlist(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (w, p) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected word<TAB>polarity".into(),
        })?;
        out.push((w.trim().to_string(), p.trim().to_string()));
    }
    Ok(out)
}

pub fn export_output_weights<T: Real>(
    model: &Model<T>,
    vocab: &Vocabulary,
    words: &[(String, String)],
) -> Result<WeightExport> {
    let d = model.config.rnn_hidden;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (word, polarity) in words {
        let Some(id) = vocab.lookup(word) else {
            skipped.push(word.clone());
            continue;
        };
        let (lm, emo) = model.output_row(id)?;
        let f = |v: Vec<T>| v.into_iter().map(Real::as_f64).collect::<Vec<f64>>();
        rows.push(WeightRow {
            word: word.clone(),
            polarity: polarity.clone(),
            lm_half: f(lm),
            emotion_half: emo.map(f),
            lm_pc: [0.0; 2],
            emotion_pc: None,
        });
    }
    let lm: Vec<Vec<f64>> = rows.iter().map(|r| r.lm_half.clone()).collect();
    for (r, p) in rows.iter_mut().zip(pca_2d(&lm)) {
        r.lm_pc = p;
    }
    if rows.iter().all(|r| r.emotion_half.is_some()) && !rows.is_empty() {
        let emo: Vec<Vec<f64>> = rows.iter().filter_map(|r| r.emotion_half.clone()).collect();
        for (r, p) in rows.iter_mut().zip(pca_2d(&emo)) {
            r.emotion_pc = Some(p);
        }
    }
    Ok(WeightExport { d, rows, skipped })
}

impl WeightExport {
    pub fn has_emotion(&self) -> bool {
        self.rows.first().is_some_and(|r| r.emotion_half.is_some())
    }

    /// Tab-separated text. Columns: `word, polarity, lm_0..lm_{d-1}`, then
    /// `emo_0..emo_{d-1}` (MEED only), then `lm_pc1, lm_pc2` and
    /// `emo_pc1, emo_pc2` (MEED only). Skipped words follow as
    /// `# skipped<TAB>word` lines.
    pub fn to_tsv(&self) -> String {
        let emo = self.has_emotion();
        let mut s = String::from("word\tpolarity");
        for i in 0..self.d {
            let _ = write!(s, "\tlm_{i}");
        }
        if emo {
            for i in 0..self.d {
                let _ = write!(s, "\temo_{i}");
            }
        }
        s.push_str("\tlm_pc1\tlm_pc2");
        if emo {
            s.push_str("\temo_pc1\temo_pc2");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}\t{}", r.word, r.polarity);
            let mut cols: Vec<f64> = r.lm_half.clone();
            if let Some(e) = &r.emotion_half {
                cols.extend(e);
            }
            cols.extend(r.lm_pc);
            if let Some(p) = r.emotion_pc {
                cols.extend(p);
            }
            for v in cols {
                let _ = write!(s, "\t{v:.9e}");
            }
            s.push('\n');
        }
        for w in &self.skipped {
            let _ = writeln!(s, "# skipped\t{w}");
        }
        s
    }
}

/// Projects rows onto their top two principal components.
///
/// Deterministic: power iteration from a fixed start vector, with each
/// component's sign chosen so its largest-magnitude entry is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for r in &x {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2.min(d) {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / d as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum()).collect();
            for c in &comps {
                let dot: f64 = w.iter().zip(c).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            w.iter_mut().for_each(|a| *a /= norm);
            let converged = (norm - lambda).abs() <= 1e-12 * norm.max(1.0);
            lambda = norm;
            v = w;
            if converged {
                break;
            }
        }
        let big = v.iter().cloned().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        // Deflate so the next component is orthogonal.
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        comps.push(v);
    }
    x.iter()
        .map(|r| {
            let mut p = [0.0; 2];
            for (k, c) in comps.iter().enumerate() {
                p[k] = r.iter().zip(c).map(|(a, b)| a * b).sum();
            }
            p
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity over same-tag pairs minus the mean over
/// different-tag pairs. `None` if either kind of pair is missing.
pub fn cluster_margin(vectors: &[Vec<f64>], tags: &[String]) -> Option<f64> {
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let c = cosine(&vectors[i], &vectors[j]);
            if tags[i] == tags[j] {
                within += c;
                nw += 1;
            } else {
                across += c;
                na += 1;
            }
        }
    }
    (nw > 0 && na > 0).then(|| within / nw as f64 - across / na as f64)
}

/// Perplexity and BLEU for one evaluated set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_kind: String,
    pub pairs: usize,
    pub target_tokens: usize,
    pub perplexity: f64,
    pub bleu: BleuScores,
}

impl fmt::Display for EvalReport {
    /// BLEU values are printed as percentages.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model\t{}", self.model_kind)?;
        writeln!(f, "pairs\t{}", self.pairs)?;
        writeln!(f, "target_tokens\t{}", self.target_tokens)?;
        writeln!(f, "perplexity\t{:.6}", self.perplexity)?;
        for (n, b) in self.bleu.bleu.iter().enumerate() {
            writeln!(f, "bleu{}\t{:.6}", n + 1, b * 100.0)?;
        }
        writeln!(f, "bleu_avg\t{:.6}", self.bleu.average * 100.0)
    }
}
