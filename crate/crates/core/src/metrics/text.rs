use crate::error::{Error, Result};

/// Levenshtein distance over Unicode scalar values (unit costs).
pub fn edit_distance(hyp: &str, reference: &str) -> usize {
    let a: Vec<char> = hyp.chars().collect();
    let b: Vec<char> = reference.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate: edit distance over reference length.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(Error::Range("character error rate needs a nonempty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_distances() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("flaw", "lawn"), 2);
        assert_eq!(edit_distance("ümlaut", "umlaut"), 1);
        assert_eq!(cer("", "abcd").unwrap(), 1.0);
        assert!(cer("a", "").is_err());
    }
}
