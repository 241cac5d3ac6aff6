//! Keyword histograms over an ensemble of model responses.
//!
//! Each response is reduced to a *set* of normalized word tokens, so a single
//! response contributes at most one to any bin. That property is what bounds
//! the sensitivity of every count by 1 and every sorted gap by 2.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

const STOPWORD_LIST: &str = include_str!("stopwords.txt");

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORD_LIST
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .collect()
    })
}

/// Returns true if `word` is on the embedded English stopword list.
pub fn is_stopword(word: &str) -> bool {
    stopwords().contains(word)
}

/// Characters removed by the tokenizer: anything that is neither
/// alphanumeric nor whitespace.
pub fn is_stripped_char(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// A lowercase, punctuation-free, non-stopword token of at least two characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NormalizedToken(String);

impl NormalizedToken {
    /// Validates an already-normalized word. Returns `None` if the word would
    /// have been removed or altered by [`normalize_and_tokenize`].
    pub fn new(word: &str) -> Option<Self> {
        let ok = word.chars().count() >= 2
            && word
                .chars()
                .all(|c| !is_stripped_char(c) && !c.is_whitespace() && !c.is_uppercase())
            && !is_stopword(word);
        ok.then(|| Self(word.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for NormalizedToken {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(&value).ok_or_else(|| format!("not a normalized token: {value:?}"))
    }
}

impl From<NormalizedToken> for String {
    fn from(t: NormalizedToken) -> Self {
        t.0
    }
}

impl fmt::Display for NormalizedToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for NormalizedToken {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// The deduplicated tokens of one response.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResponseTokenSet {
    tokens: BTreeSet<NormalizedToken>,
}

impl ResponseTokenSet {
    pub fn tokens(&self) -> impl Iterator<Item = &NormalizedToken> {
        self.tokens.iter()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.tokens.iter().any(|t| t.as_str() == word)
    }
}

impl FromIterator<NormalizedToken> for ResponseTokenSet {
    fn from_iter<I: IntoIterator<Item = NormalizedToken>>(iter: I) -> Self {
        Self {
            tokens: iter.into_iter().collect(),
        }
    }
}

/// Lowercases, strips punctuation, splits on whitespace and drops stopwords and
/// single-character words, returning the word sequence in order (duplicates kept).
pub fn normalized_words(raw: &str) -> Vec<NormalizedToken> {
    let cleaned: String = raw
        .to_lowercase()
        .chars()
        .filter(|c| !is_stripped_char(*c))
        .collect();
    cleaned
        .split_whitespace()
        .filter_map(NormalizedToken::new)
        .collect()
}

/// Reduces a raw response to its set of normalized tokens.
pub fn normalize_and_tokenize(raw_response: &str) -> ResponseTokenSet {
    normalized_words(raw_response).into_iter().collect()
}

/// Count of responses containing each token.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenHistogram {
    counts: BTreeMap<NormalizedToken, u32>,
    ensemble_size: usize,
}

impl TokenHistogram {
    /// Builds a histogram from explicit counts. Zero counts are dropped; counts
    /// above `ensemble_size` are rejected.
    pub fn from_counts(
        counts: impl IntoIterator<Item = (NormalizedToken, u32)>,
        ensemble_size: usize,
    ) -> Result<Self, String> {
        let mut map = BTreeMap::new();
        for (token, count) in counts {
            if count as usize > ensemble_size {
                return Err(format!(
                    "count {count} for {token} exceeds ensemble size {ensemble_size}"
                ));
            }
            if count > 0 {
                map.insert(token, count);
            }
        }
        Ok(Self {
            counts: map,
            ensemble_size,
        })
    }

    pub fn count(&self, word: &str) -> u32 {
        self.counts
            .iter()
            .find(|(t, _)| t.as_str() == word)
            .map_or(0, |(_, c)| *c)
    }

    pub fn counts(&self) -> &BTreeMap<NormalizedToken, u32> {
        &self.counts
    }

    pub fn ensemble_size(&self) -> usize {
        self.ensemble_size
    }

    /// Number of distinct tokens with a non-zero count.
    pub fn support(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Tokens ordered by count descending, then token ascending.
    pub fn ranked(&self) -> Vec<(&NormalizedToken, u32)> {
        let mut ranked: Vec<_> = self.counts.iter().map(|(t, c)| (t, *c)).collect();
        // BTreeMap iteration is already token-ascending; a stable sort on count keeps it.
        ranked.sort_by_key(|t| std::cmp::Reverse(t.1));
        ranked
    }
}

pub fn build_histogram(responses: &[ResponseTokenSet]) -> TokenHistogram {
    let mut counts: BTreeMap<NormalizedToken, u32> = BTreeMap::new();
    for response in responses {
        for token in response.tokens() {
            *counts.entry(token.clone()).or_default() += 1;
        }
    }
    TokenHistogram {
        counts,
        ensemble_size: responses.len(),
    }
}

/// Sorted counts `H_(1) >= H_(2) >= ...` and the gaps `d_k = H_(k) - H_(k+1)`,
/// with `H_(j) = 0` past the support. `gaps[k - 1]` holds `d_k`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapProfile {
    sorted_counts: Vec<u32>,
    gaps: Vec<u32>,
}

impl GapProfile {
    /// Builds a profile directly from gap values (useful for mechanism tests).
    /// The sorted counts are reconstructed by accumulating gaps from the end.
    pub fn from_gaps(gaps: Vec<u32>) -> Self {
        let mut sorted_counts = vec![0u32; gaps.len()];
        let mut acc = 0u32;
        for (i, g) in gaps.iter().enumerate().rev() {
            acc += g;
            sorted_counts[i] = acc;
        }
        Self {
            sorted_counts,
            gaps,
        }
    }

    pub fn sorted_counts(&self) -> &[u32] {
        &self.sorted_counts
    }

    pub fn gaps(&self) -> &[u32] {
        &self.gaps
    }

    /// `d_k` for 1-based `k`; zero beyond the support.
    pub fn gap(&self, k: usize) -> u32 {
        if k == 0 {
            return 0;
        }
        self.gaps.get(k - 1).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }
}

pub fn gap_profile(h: &TokenHistogram) -> GapProfile {
    let mut sorted_counts: Vec<u32> = h.counts.values().copied().collect();
    sorted_counts.sort_unstable_by(|a, b| b.cmp(a));
    let gaps = sorted_counts
        .iter()
        .enumerate()
        .map(|(i, c)| c - sorted_counts.get(i + 1).copied().unwrap_or(0))
        .collect();
    GapProfile {
        sorted_counts,
        gaps,
    }
}

/// The `k` highest-count tokens (non-private). Returns the whole support when
/// `k` exceeds it.
pub fn top_k_tokens(h: &TokenHistogram, k: usize) -> Vec<NormalizedToken> {
    h.ranked()
        .into_iter()
        .take(k)
        .map(|(t, _)| t.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(s: &str) -> NormalizedToken {
        NormalizedToken::new(s).unwrap()
    }

    fn set(words: &[&str]) -> ResponseTokenSet {
        words.iter().map(|w| tok(w)).collect()
    }

    fn hist(pairs: &[(&str, u32)], n: usize) -> TokenHistogram {
        TokenHistogram::from_counts(pairs.iter().map(|(w, c)| (tok(w), *c)), n).unwrap()
    }

    #[test]
    fn tokenizer_examples() {
        assert!(normalize_and_tokenize("").is_empty());
        assert_eq!(
            normalize_and_tokenize("The Imperial Family."),
            set(&["imperial", "family"])
        );
        assert_eq!(
            normalize_and_tokenize("Family, family, FAMILY!"),
            set(&["family"])
        );
    }

    #[test]
    fn tokenizer_drops_short_words_and_unicode_punctuation() {
        let s = normalize_and_tokenize("x «Tokyo» — palace’s I 7 42");
        assert_eq!(s, set(&["tokyo", "palaces", "42"]));
    }

    #[test]
    fn token_validation() {
        assert!(NormalizedToken::new("the").is_none());
        assert!(NormalizedToken::new("a").is_none());
        assert!(NormalizedToken::new("Paris").is_none());
        assert!(NormalizedToken::new("pa ris").is_none());
        assert!(NormalizedToken::new("paris!").is_none());
        assert!(NormalizedToken::new("paris").is_some());
        assert!(serde_json::from_str::<NormalizedToken>("\"the\"").is_err());
    }

    #[test]
    fn histogram_examples() {
        let empty = build_histogram(&[]);
        assert!(empty.is_empty());
        assert_eq!(empty.ensemble_size(), 0);

        let h = build_histogram(&[
            set(&["imperial", "family"]),
            set(&["imperial", "palace"]),
            set(&["family"]),
        ]);
        assert_eq!(h, hist(&[("imperial", 2), ("family", 2), ("palace", 1)], 3));

        let same = vec![set(&["aa"]); 7];
        assert_eq!(build_histogram(&same).count("aa"), 7);
    }

    #[test]
    fn gap_profile_examples() {
        let p = gap_profile(&hist(&[("aa", 5), ("bb", 3), ("cc", 3), ("dd", 1)], 5));
        assert_eq!(p.sorted_counts(), &[5, 3, 3, 1]);
        assert_eq!(p.gaps(), &[2, 0, 2, 1]);
        assert_eq!(p.gap(5), 0);

        let p = gap_profile(&hist(&[("aa", 4)], 4));
        assert_eq!(p.sorted_counts(), &[4]);
        assert_eq!(p.gaps(), &[4]);

        assert!(gap_profile(&TokenHistogram::default()).is_empty());
    }

    #[test]
    fn from_gaps_roundtrips() {
        let p = gap_profile(&hist(&[("aa", 5), ("bb", 3), ("cc", 3), ("dd", 1)], 5));
        assert_eq!(GapProfile::from_gaps(p.gaps().to_vec()), p);
    }

    #[test]
    fn top_k_examples() {
        let h = hist(&[("aa", 5), ("bb", 3), ("cc", 1)], 5);
        assert_eq!(top_k_tokens(&h, 2), vec![tok("aa"), tok("bb")]);
        assert!(top_k_tokens(&h, 0).is_empty());
        assert_eq!(top_k_tokens(&h, 10).len(), 3);

        let tie = hist(&[("bb", 2), ("aa", 2)], 2);
        assert_eq!(top_k_tokens(&tie, 1), vec![tok("aa")]);
    }

    #[test]
    fn from_counts_rejects_overflow() {
        assert!(TokenHistogram::from_counts([(tok("aa"), 3)], 2).is_err());
    }
}
