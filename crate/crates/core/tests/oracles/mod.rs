//! Reference computations written independently of the library code, for
//! cross-checking it. Shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

/// Every alignment of `a` against `b`, as (substitutions, insertions,
/// deletions), by plain recursion over edit scripts without memoization.
pub fn all_alignments(a: &[&str], b: &[&str]) -> Vec<(u64, u64, u64)> {
    fn walk(a: &[&str], b: &[&str], acc: (u64, u64, u64), out: &mut Vec<(u64, u64, u64)>) {
        match (a.split_first(), b.split_first()) {
            (None, None) => out.push(acc),
            (Some((_, ra)), None) => walk(ra, b, (acc.0, acc.1, acc.2 + 1), out),
            (None, Some((_, rb))) => walk(a, rb, (acc.0, acc.1 + 1, acc.2), out),
            (Some((x, ra)), Some((y, rb))) => {
                walk(ra, rb, (acc.0 + u64::from(x != y), acc.1, acc.2), out);
                walk(a, rb, (acc.0, acc.1 + 1, acc.2), out);
                walk(ra, b, (acc.0, acc.1, acc.2 + 1), out);
            }
        }
    }
    let mut out = Vec::new();
    walk(a, b, (0, 0, 0), &mut out);
    out
}

/// Minimum edit count over all alignments, plus the set of minimal
/// (S, I, D) triples.
pub fn brute_force_edits(a: &[&str], b: &[&str]) -> (u64, Vec<(u64, u64, u64)>) {
    let all = all_alignments(a, b);
    let best = all.iter().map(|(s, i, d)| s + i + d).min().unwrap();
    let mut minimal: Vec<_> = all.into_iter().filter(|(s, i, d)| s + i + d == best).collect();
    minimal.sort();
    minimal.dedup();
    (best, minimal)
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *m.entry(tokens[i..i + n].join("\u{1}")).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU over whitespace-tokenized text with exponential smoothing
/// optional. Returns (bleu, precisions, bp).
pub fn reference_bleu(refs: &[String], hyps: &[String], smooth: bool) -> (f64, [f64; 4], f64) {
    let mut correct = [0u64; 4];
    let mut total = [0u64; 4];
    let (mut hyp_len, mut ref_len) = (0u64, 0u64);
    for (r, h) in refs.iter().zip(hyps) {
        let rt: Vec<String> = r.split(' ').filter(|t| !t.is_empty()).map(String::from).collect();
        let ht: Vec<String> = h.split(' ').filter(|t| !t.is_empty()).map(String::from).collect();
        hyp_len += ht.len() as u64;
        ref_len += rt.len() as u64;
        for n in 1..=4 {
            let hn = ngrams(&ht, n);
            let rn = ngrams(&rt, n);
            for (g, c) in &hn {
                correct[n - 1] += (*c).min(*rn.get(g).unwrap_or(&0));
                total[n - 1] += c;
            }
        }
    }
    let mut p = [0.0f64; 4];
    let mut smooth_mult = 1.0;
    for n in 0..4 {
        if total[n] == 0 {
            break;
        }
        if correct[n] == 0 {
            if smooth {
                smooth_mult *= 2.0;
                p[n] = 1.0 / (smooth_mult * total[n] as f64);
            }
        } else {
            p[n] = correct[n] as f64 / total[n] as f64;
        }
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let geo = (p[0] * p[1] * p[2] * p[3]).powf(0.25);
    (100.0 * bp * geo, p, bp)
}

fn char_ngrams(s: &str, n: usize) -> BTreeMap<String, u64> {
    let chars: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
    let mut m = BTreeMap::new();
    for start in 0..chars.len() {
        if start + n <= chars.len() {
            let g: String = chars[start..start + n].iter().collect();
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// chrF with n-gram multisets built as explicit string maps; corpus sums,
/// orders without reference n-grams skipped.
pub fn reference_chrf(refs: &[String], hyps: &[String], order: usize, beta: f64) -> f64 {
    let mut scores = Vec::new();
    for n in 1..=order {
        let (mut hyp_total, mut ref_total, mut matched) = (0u64, 0u64, 0u64);
        for (r, h) in refs.iter().zip(hyps) {
            let rn = char_ngrams(r, n);
            let hn = char_ngrams(h, n);
            hyp_total += hn.values().sum::<u64>();
            ref_total += rn.values().sum::<u64>();
            for (g, c) in &hn {
                if let Some(rc) = rn.get(g) {
                    matched += (*c).min(*rc);
                }
            }
        }
        if ref_total == 0 {
            continue;
        }
        let p = if hyp_total == 0 { 0.0 } else { matched as f64 / hyp_total as f64 };
        let r = matched as f64 / ref_total as f64;
        let b2 = beta * beta;
        scores.push(if p + r == 0.0 { 0.0 } else { (1.0 + b2) * p * r / (b2 * p + r) });
    }
    if scores.is_empty() {
        0.0
    } else {
        100.0 * scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Probability that one mask with width ~ U{0..max_width} and start
/// ~ U{0..dim-width} covers position `pos`.
pub fn mask_cover_probability(dim: usize, max_width: usize, pos: usize) -> f64 {
    let mut p = 0.0;
    for w in 0..=max_width {
        let starts = dim - w + 1;
        let covering = (0..starts).filter(|&s| s <= pos && pos < s + w).count();
        p += covering as f64 / starts as f64;
    }
    p / (max_width + 1) as f64
}

/// Exact expected masked fraction for `mf` frequency masks (param `f`) and
/// `mt` time masks (param `t`, proportion `p`) on a `frames x bins` matrix.
pub fn expected_masked_fraction(frames: usize, bins: usize, f: usize, mf: usize, t: usize, mt: usize, p: f64) -> f64 {
    let fw = f.min(bins);
    let tw = t.min((p * frames as f64).floor() as usize);
    let keep_col: f64 =
        (0..bins).map(|j| (1.0 - mask_cover_probability(bins, fw, j)).powi(mf as i32)).sum::<f64>() / bins as f64;
    let keep_row: f64 =
        (0..frames).map(|i| (1.0 - mask_cover_probability(frames, tw, i)).powi(mt as i32)).sum::<f64>() / frames as f64;
    1.0 - keep_col * keep_row
}

/// Crude upper bound: every mask at mean width, no overlaps.
pub fn masked_fraction_union_bound(
    frames: usize,
    bins: usize,
    f: usize,
    mf: usize,
    t: usize,
    mt: usize,
    p: f64,
) -> f64 {
    let tw = (t as f64).min(p * frames as f64);
    (mf as f64 * f as f64 / 2.0) / bins as f64 + (mt as f64 * tw / 2.0) / frames as f64
}

/// Magnitude of the DFT of `x` at `freq` Hz (direct sum).
pub fn dft_magnitude(x: &[f32], rate: f64, freq: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * freq / rate;
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &v) in x.iter().enumerate() {
        re += v as f64 * (w * n as f64).cos();
        im -= v as f64 * (w * n as f64).sin();
    }
    (re * re + im * im).sqrt()
}

/// Frequency in `lo..=hi` (1 Hz grid) with the largest DFT magnitude.
pub fn spectral_peak(x: &[f32], rate: f64, lo: u32, hi: u32) -> f64 {
    (lo..=hi).map(|f| (f as f64, dft_magnitude(x, rate, f as f64))).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0
}
