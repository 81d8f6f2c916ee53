use std::collections::HashSet;

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn trigrams(s: &str) -> HashSet<&str> {
    let bounds: Vec<usize> = s.char_indices().map(|(i, _)| i).chain([s.len()]).collect();
    if bounds.len() <= 4 {
        return HashSet::from([s]);
    }
    bounds.windows(4).map(|w| &s[w[0]..w[3]]).collect()
}

/// Jaccard similarity of character trigram sets after lowercasing and
/// whitespace normalization. Only equal normalized strings score exactly 1.
pub fn trigram_similarity(a: &str, b: &str) -> f64 {
    let (na, nb) = (normalize(a), normalize(b));
    if na == nb {
        return 1.0;
    }
    let (ta, tb) = (trigrams(&na), trigrams(&nb));
    let inter = ta.intersection(&tb).count() as f64;
    let union = ta.union(&tb).count() as f64;
    // distinct strings can share every trigram ("aaa" vs "aaaa")
    (inter / union).min(1.0 - f64::EPSILON)
}

/// Keep items in order, dropping any whose similarity to an already kept
/// item reaches `threshold`. Returns the kept items and the drop count.
pub fn dedup_by<T, F>(items: Vec<T>, threshold: f64, key: F) -> (Vec<T>, usize)
where
    F: Fn(&T) -> &str,
{
    let mut kept: Vec<T> = Vec::with_capacity(items.len());
    let mut dropped = 0;
    for item in items {
        if kept.iter().any(|k| trigram_similarity(key(k), key(&item)) >= threshold) {
            dropped += 1;
        } else {
            kept.push(item);
        }
    }
    (kept, dropped)
}
