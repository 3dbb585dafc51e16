//! Direct-formula BLEU and chrF, written independently of the library.

#![allow(dead_code)]

/// Every n-gram of `items`, as owned vectors, with repeats.
pub fn ngrams<T: Clone>(items: &[T], n: usize) -> Vec<Vec<T>> {
    if items.len() < n {
        return Vec::new();
    }
    (0..=items.len() - n).map(|i| items[i..i + n].to_vec()).collect()
}

/// Clipped matches by repeatedly removing matched items from a reference pool.
pub fn clipped_matches<T: Clone + PartialEq>(hyp: &[Vec<T>], reference: &[Vec<T>]) -> usize {
    let mut pool = reference.to_vec();
    let mut hits = 0;
    for g in hyp {
        if let Some(pos) = pool.iter().position(|r| r == g) {
            pool.remove(pos);
            hits += 1;
        }
    }
    hits
}

/// Oracle BLEU over pre-split tokens.
pub fn oracle_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut matches = [0f64; 4];
    let mut totals = [0f64; 4];
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=4 {
            let (hg, rg) = (ngrams(h, n), ngrams(r, n));
            matches[n - 1] += clipped_matches(&hg, &rg) as f64;
            totals[n - 1] += hg.len() as f64;
        }
    }
    let mut p = Vec::new();
    let mut m = 1.0;
    for n in 0..4 {
        if totals[n] == 0.0 {
            return 0.0;
        }
        if matches[n] == 0.0 {
            m *= 2.0;
            p.push(1.0 / (m * totals[n]));
        } else {
            p.push(matches[n] / totals[n]);
        }
    }
    let geo = (p[0] * p[1] * p[2] * p[3]).powf(0.25);
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * geo
}

/// Oracle chrF: char 1..6-grams without whitespace, corpus-summed, β = 2.
pub fn oracle_chrf(hyps: &[String], refs: &[String]) -> f64 {
    let strip = |s: &String| s.chars().filter(|c| !c.is_whitespace()).collect::<Vec<char>>();
    let mut fs = Vec::new();
    for n in 1..=6 {
        let (mut m, mut ht, mut rt) = (0usize, 0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let (hg, rg) = (ngrams(&strip(h), n), ngrams(&strip(r), n));
            m += clipped_matches(&hg, &rg);
            ht += hg.len();
            rt += rg.len();
        }
        if ht + rt == 0 {
            continue;
        }
        let f = if ht == 0 || rt == 0 || m == 0 {
            0.0
        } else {
            let (p, r) = (m as f64 / ht as f64, m as f64 / rt as f64);
            5.0 * p * r / (4.0 * p + r)
        };
        fs.push(f);
    }
    if fs.is_empty() {
        0.0
    } else {
        100.0 * fs.iter().sum::<f64>() / fs.len() as f64
    }
}
