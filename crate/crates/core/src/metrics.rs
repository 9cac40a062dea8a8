//! Corpus BLEU-1..4, ROUGE-L and METEOR-simplified (exact and stem
//! matching only, no synonym tables).

use std::collections::HashMap;
use std::fmt;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
const METEOR_ALPHA: f64 = 0.9;
const METEOR_BETA: f64 = 3.0;
const METEOR_GAMMA: f64 = 0.5;

/// Treatment of n-gram orders with zero clipped matches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "epsilon")]
pub enum Smoothing {
    /// A zero precision zeroes the score.
    #[default]
    None,
    /// Zero numerators are replaced by `epsilon`.
    Epsilon(f64),
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped matches and candidate n-gram total for one sentence.
fn clipped(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let counts = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = counts
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, counts.values().sum())
}

/// Reference length closest to `c`, the shorter one on ties.
fn closest_ref_len(references: &[Vec<String>], c: usize) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn check_corpus(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Metric("empty candidate corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Metric(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Metric("every candidate needs at least one reference".into()));
    }
    Ok(())
}

/// Corpus BLEU-n: n-gram matches and totals are summed over the corpus
/// before the geometric mean, then scaled by the brevity penalty.
pub fn corpus_bleu(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    n: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Metric(format!("BLEU order {n} outside 1..=4")));
    }
    check_corpus(candidates, references)?;
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        for k in 0..n {
            let (m, t) = clipped(cand, refs, k + 1);
            num[k] += m;
            den[k] += t;
        }
        c += cand.len();
        r += closest_ref_len(refs, cand.len());
    }
    if c == 0 || num[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        let p = if num[k] > 0 {
            num[k] as f64 / den[k] as f64
        } else {
            match smoothing {
                Smoothing::None => return Ok(0.0),
                Smoothing::Epsilon(eps) if den[k] > 0 => eps / den[k] as f64,
                Smoothing::Epsilon(_) => return Ok(0.0),
            }
        };
        log_sum += p.ln() / n as f64;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_sum.exp())
}

/// Sentence BLEU-n: corpus BLEU over a single candidate.
pub fn sentence_bleu(candidate: &[String], references: &[Vec<String>], n: usize, smoothing: Smoothing) -> Result<f64> {
    corpus_bleu(&[candidate.to_vec()], &[references.to_vec()], n, smoothing)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with `beta = 1.2`, maximized over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Metric("ROUGE-L needs at least one reference".into()));
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let best = references
        .iter()
        .map(|r| {
            let l = lcs(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max);
    Ok(best)
}

/// Greedy matching from the end of the hypothesis: each hypothesis word
/// takes the latest unused reference position with the same key.
fn match_keys(hyp: &mut Vec<(usize, String)>, refs: &mut Vec<(usize, String)>) -> Vec<(usize, usize)> {
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, (_, w)) in refs.iter().enumerate() {
        positions.entry(w.as_str()).or_default().push(j);
    }
    let mut pairs = Vec::new();
    let mut hyp_used = vec![false; hyp.len()];
    let mut ref_used = vec![false; refs.len()];
    for i in (0..hyp.len()).rev() {
        if let Some(j) = positions.get_mut(hyp[i].1.as_str()).and_then(Vec::pop) {
            hyp_used[i] = true;
            ref_used[j] = true;
            pairs.push((hyp[i].0, refs[j].0));
        }
    }
    let unused = |v: &mut Vec<(usize, String)>, used: &[bool]| {
        *v = v.drain(..).zip(used).filter(|(_, &u)| !u).map(|(p, _)| p).collect();
    };
    unused(hyp, &hyp_used);
    unused(refs, &ref_used);
    pairs
}

fn count_chunks(matches: &[(usize, usize)]) -> usize {
    1 + matches
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// METEOR-simplified against one reference.
pub fn meteor_single(candidate: &[String], reference: &[String], stemmer: &Stemmer) -> f64 {
    let enumerate = |s: &[String]| s.iter().map(|w| w.to_lowercase()).enumerate().collect::<Vec<_>>();
    let (mut hyp, mut refs) = (enumerate(candidate), enumerate(reference));
    let mut matches = match_keys(&mut hyp, &mut refs);
    let stem = |v: Vec<(usize, String)>| {
        v.into_iter()
            .map(|(i, w)| (i, stemmer.stem(&w).into_owned()))
            .collect::<Vec<_>>()
    };
    let (mut hyp, mut refs) = (stem(hyp), stem(refs));
    matches.extend(match_keys(&mut hyp, &mut refs));
    matches.sort_by_key(|m| m.0);
    let m = matches.len();
    if m == 0 || candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let chunks = count_chunks(&matches);
    if chunks == 1 && m == candidate.len() && m == reference.len() {
        return 1.0;
    }
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

/// Best METEOR-simplified score over the references.
pub fn meteor(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Metric("METEOR needs at least one reference".into()));
    }
    let stemmer = Stemmer::create(Algorithm::English);
    Ok(references
        .iter()
        .map(|r| meteor_single(candidate, r, &stemmer))
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub candidate: String,
    pub bleu4: f64,
    pub meteor: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub samples: Vec<SampleScore>,
}

impl EvalReport {
    pub fn scores(&self) -> [(&'static str, f64); 6] {
        [
            ("BLEU-1", self.bleu1),
            ("BLEU-2", self.bleu2),
            ("BLEU-3", self.bleu3),
            ("BLEU-4", self.bleu4),
            ("METEOR", self.meteor),
            ("ROUGE-L", self.rouge_l),
        ]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scores = self.scores();
        let header: Vec<String> = scores.iter().map(|(n, _)| format!("{n:>8}")).collect();
        let values: Vec<String> = scores.iter().map(|(_, v)| format!("{v:>8.4}")).collect();
        writeln!(f, "{}", header.join(" "))?;
        write!(f, "{}", values.join(" "))
    }
}

/// Scores decoded captions against their references. `ids`,
/// `candidates` and `references` are aligned one-to-one.
pub fn evaluate_captions(
    ids: &[String],
    candidates: &[String],
    references: &[Vec<String>],
    smoothing: Smoothing,
) -> Result<EvalReport> {
    if ids.len() != candidates.len() {
        return Err(Error::Metric(format!(
            "{} ids but {} candidates",
            ids.len(),
            candidates.len()
        )));
    }
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let refs: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| tokenize(r)).collect())
        .collect();
    check_corpus(&cands, &refs)?;
    let stemmer = Stemmer::create(Algorithm::English);
    let mut samples = Vec::with_capacity(cands.len());
    for (i, (c, rs)) in cands.iter().zip(&refs).enumerate() {
        samples.push(SampleScore {
            id: ids[i].clone(),
            candidate: candidates[i].clone(),
            bleu4: sentence_bleu(c, rs, 4, smoothing)?,
            meteor: rs.iter().map(|r| meteor_single(c, r, &stemmer)).fold(0.0, f64::max),
            rouge_l: rouge_l(c, rs)?,
        });
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        bleu1: corpus_bleu(&cands, &refs, 1, smoothing)?,
        bleu2: corpus_bleu(&cands, &refs, 2, smoothing)?,
        bleu3: corpus_bleu(&cands, &refs, 3, smoothing)?,
        bleu4: corpus_bleu(&cands, &refs, 4, smoothing)?,
        meteor: samples.iter().map(|s| s.meteor).sum::<f64>() / n,
        rouge_l: samples.iter().map(|s| s.rouge_l).sum::<f64>() / n,
        samples,
    })
}
