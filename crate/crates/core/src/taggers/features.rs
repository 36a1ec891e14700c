//! Hand-crafted token features, hashed into a fixed number of buckets.

use crate::corpus::Sentence;

pub const DEFAULT_HASH_BUCKETS: u32 = 1 << 18;

const HASH_SEED: u64 = 0x6d6f_6261_6c21_0001;
const BOS: &str = "<BOS>";
const EOS: &str = "<EOS>";

/// FNV-1a over the feature string, offset by a fixed seed.
fn hash_feature(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ HASH_SEED;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Word shape: X for uppercase, x for lowercase, d for digits, other
/// characters verbatim; runs longer than four are truncated to four.
pub fn word_shape(word: &str) -> String {
    let mut out = String::new();
    let mut last = '\0';
    let mut run = 0;
    for c in word.chars() {
        let m = if c.is_uppercase() {
            'X'
        } else if c.is_lowercase() {
            'x'
        } else if c.is_numeric() {
            'd'
        } else {
            c
        };
        if m == last {
            run += 1;
        } else {
            last = m;
            run = 1;
        }
        if run <= 4 {
            out.push(m);
        }
    }
    out
}

fn suffix(word: &str, n: usize) -> Option<String> {
    let chars: Vec<char> = word.chars().collect();
    (chars.len() >= n).then(|| chars[chars.len() - n..].iter().collect())
}

/// Maps tokens to sparse feature ids with a ±2 token window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureExtractor {
    buckets: u32,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::new(DEFAULT_HASH_BUCKETS)
    }
}

impl FeatureExtractor {
    pub fn new(buckets: u32) -> Self {
        assert!(buckets > 0, "need at least one hash bucket");
        FeatureExtractor { buckets }
    }

    pub fn buckets(&self) -> u32 {
        self.buckets
    }

    /// Feature strings for token `t`, before hashing.
    pub fn feature_strings(tokens: &[String], t: usize) -> Vec<String> {
        let lower: Vec<String> = tokens.iter().map(|w| w.to_lowercase()).collect();
        Self::feature_strings_lower(tokens, &lower, t)
    }

    fn feature_strings_lower(tokens: &[String], lower: &[String], t: usize) -> Vec<String> {
        assert!(t < tokens.len(), "token index {t} out of range");
        let word = &tokens[t];
        let w = &lower[t];
        let ctx = |off: isize| -> &str {
            let i = t as isize + off;
            if i < 0 {
                BOS
            } else if i as usize >= lower.len() {
                EOS
            } else {
                &lower[i as usize]
            }
        };
        let mut f = vec![
            "bias".to_string(),
            format!("w.lower={w}"),
            format!("shape={}", word_shape(word)),
            format!("w[-1]={}", ctx(-1)),
            format!("w[-2]={}", ctx(-2)),
            format!("w[+1]={}", ctx(1)),
            format!("w[+2]={}", ctx(2)),
            format!("w[-1]|w={}|{w}", ctx(-1)),
        ];
        for n in 1..=3 {
            if let Some(s) = suffix(w, n) {
                f.push(format!("suffix{n}={s}"));
            }
        }
        if !word.is_empty() && word.chars().all(|c| c.is_ascii_digit()) {
            f.push("is_digit".into());
        }
        if t == 0 {
            f.push(BOS.into());
        }
        if t + 1 == tokens.len() {
            f.push(EOS.into());
        }
        f
    }

    pub fn hash(&self, feature: &str) -> u32 {
        (hash_feature(feature) % u64::from(self.buckets)) as u32
    }

    /// Sorted, deduplicated bucket ids for token `t`.
    pub fn extract(&self, tokens: &[String], t: usize) -> Vec<u32> {
        let lower: Vec<String> = tokens.iter().map(|w| w.to_lowercase()).collect();
        self.extract_lower(tokens, &lower, t)
    }

    fn extract_lower(&self, tokens: &[String], lower: &[String], t: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = Self::feature_strings_lower(tokens, lower, t).iter().map(|f| self.hash(f)).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Feature ids for every token of a sentence.
    pub fn encode(&self, sentence: &Sentence) -> Vec<Vec<u32>> {
        let tokens: Vec<String> = sentence.token_strs().into_iter().map(str::to_string).collect();
        self.encode_tokens(&tokens)
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<Vec<u32>> {
        let lower: Vec<String> = tokens.iter().map(|w| w.to_lowercase()).collect();
        (0..tokens.len()).map(|t| self.extract_lower(tokens, &lower, t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn template_table() {
        let f = FeatureExtractor::feature_strings(&toks(&["Pt", "ambulates", "independently"]), 1);
        for expected in
            ["w.lower=ambulates", "suffix3=tes", "shape=xxxx", "w[-1]=pt", "w[+1]=independently", "w[+2]=<EOS>"]
        {
            assert!(f.contains(&expected.to_string()), "missing {expected}: {f:?}");
        }
        assert_eq!(word_shape("Pt"), "Xx");
        assert_eq!(word_shape("150"), "ddd");
        assert_eq!(word_shape("2.5"), "d.d");
    }

    #[test]
    fn boundary_padding() {
        let f = FeatureExtractor::feature_strings(&toks(&["Walks", "."]), 0);
        assert!(f.contains(&"<BOS>".to_string()));
        assert!(f.contains(&"w[-1]=<BOS>".to_string()));
        let f = FeatureExtractor::feature_strings(&toks(&["7"]), 0);
        assert!(f.contains(&"is_digit".to_string()));
        assert!(f.contains(&"<EOS>".to_string()));
    }

    #[test]
    fn deterministic_ids() {
        let fx = FeatureExtractor::new(1 << 16);
        let a = Sentence::new("Pt ambulates with walker", Vec::<String>::new());
        let b = Sentence::new("Pt ambulates with walker", Vec::<String>::new());
        assert_eq!(fx.encode(&a), fx.encode(&b));
        assert!(fx.encode(&a).iter().flatten().all(|&id| id < 1 << 16));
    }

    #[test]
    fn collision_rate_is_small() {
        // distinct feature strings from a few hundred synthetic tokens
        let fx = FeatureExtractor::default();
        let mut strings = std::collections::BTreeSet::new();
        for i in 0..400 {
            let words = toks(&["pt", &format!("word{i}"), &format!("tok{}", i * 7)]);
            for t in 0..words.len() {
                strings.extend(FeatureExtractor::feature_strings(&words, t));
            }
        }
        let ids: std::collections::BTreeSet<u32> = strings.iter().map(|s| fx.hash(s)).collect();
        let collisions = strings.len() - ids.len();
        assert!((collisions as f64) / (strings.len() as f64) < 0.01, "{collisions} of {}", strings.len());
    }
}
