//! Reference implementations written directly from the metric and retrieval
//! definitions, kept deliberately naive. Shared by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use statrs::function::erf::erfc;

pub fn words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                '\u{0}'
            }
        })
        .filter(|c| *c != '\u{0}')
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

pub fn joined(text: &str) -> String {
    words(text).join(" ")
}

pub fn overlap(a: &[String], b: &[String]) -> usize {
    let mut ca: BTreeMap<&str, usize> = BTreeMap::new();
    let mut cb: BTreeMap<&str, usize> = BTreeMap::new();
    for w in a {
        *ca.entry(w).or_default() += 1;
    }
    for w in b {
        *cb.entry(w).or_default() += 1;
    }
    ca.iter()
        .map(|(w, n)| (*n).min(cb.get(w).copied().unwrap_or(0)))
        .sum()
}

fn harmonic(hits: usize, np: usize, nr: usize) -> f64 {
    if np == 0 && nr == 0 {
        return 1.0;
    }
    if hits == 0 {
        return 0.0;
    }
    let p = hits as f64 / np as f64;
    let r = hits as f64 / nr as f64;
    2.0 * p * r / (p + r)
}

pub fn f1(pred: &str, reference: &str) -> f64 {
    let (p, r) = (words(pred), words(reference));
    harmonic(overlap(&p, &r), p.len(), r.len())
}

/// Full `(n+1) x (m+1)` table.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn rouge_l(pred: &str, reference: &str) -> f64 {
    let (p, r) = (words(pred), words(reference));
    harmonic(lcs(&p, &r), p.len(), r.len())
}

/// Top-down recursion with memoization.
pub fn edit_distance(a: &str, b: &str) -> usize {
    fn go(
        a: &[char],
        b: &[char],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(v) = memo.get(&(i, j)) {
            return *v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    go(&a, &b, 0, 0, &mut HashMap::new())
}

pub fn lev_similarity(pred: &str, reference: &str) -> f64 {
    let (p, r) = (joined(pred), joined(reference));
    let n = p.chars().count().max(r.chars().count());
    if n == 0 {
        1.0
    } else {
        1.0 - edit_distance(&p, &r) as f64 / n as f64
    }
}

const VOCAB: &[&str] = &[
    "the", "a", "cat", "Cat", "sat", "mat", "dog", "Paris", "paris,", "river", "kitten", "sitting",
    "an", "42", "x", "blue!", "über", "naïve", "of", "it's",
];

/// A short random answer-like string, sometimes empty.
pub fn random_text<R: Rng>(rng: &mut R) -> String {
    let len = rng.gen_range(0..=8);
    (0..len)
        .map(|_| *VOCAB.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(if rng.gen_bool(0.2) { "  " } else { " " })
}

/// Standard normal quantile by bisection on `Phi(z) = erfc(-z / sqrt 2) / 2`.
/// Upper-tail probabilities are solved through `1 - Phi(z) = erfc(z / sqrt 2) / 2`
/// to avoid cancellation near 1.
pub fn normal_quantile(p: f64) -> f64 {
    if p > 0.5 {
        return -normal_quantile_lower(1.0 - p);
    }
    normal_quantile_lower(p)
}

fn normal_quantile_lower(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if 0.5 * erfc(-mid / std::f64::consts::SQRT_2) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Scores every document and sorts by score descending, then id ascending.
pub fn brute_force_top_n(docs: &[(String, Vec<f64>)], q: &[f64], n: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = docs
        .iter()
        .map(|(id, e)| {
            let mut s = 0.0;
            for i in 0..q.len() {
                s += e[i] * q[i];
            }
            (id.clone(), s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(n);
    all
}
