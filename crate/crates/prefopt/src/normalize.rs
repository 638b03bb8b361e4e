//! The single text-normalization rule used for every equality check in this
//! repo: exact match scoring, preference-pair partitioning, and validation.
//!
//! Trim leading/trailing whitespace and collapse internal whitespace runs to
//! a single space. No case folding: math symbols are case-sensitive.

/// Normalize a piece of text for equality comparison.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_ws = false;
    for ch in text.trim().chars() {
        if ch.is_whitespace() {
            in_ws = true;
        } else {
            if in_ws && !out.is_empty() {
                out.push(' ');
            }
            in_ws = false;
            out.push(ch);
        }
    }
    out
}

/// Equality after normalization.
pub fn normalized_eq(a: &str, b: &str) -> bool {
    normalize(a) == normalize(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trims_and_collapses() {
        assert_eq!(normalize("  170 "), "170");
        assert_eq!(normalize("a  b\t c"), "a b c");
        assert_eq!(normalize("\n5.2\n"), "5.2");
    }

    #[test]
    fn case_sensitive() {
        assert!(!normalized_eq("X", "x"));
        assert!(normalized_eq("  170 ", "170"));
        assert!(!normalized_eq("12", "5.2"));
    }

    #[test]
    fn idempotent() {
        let s = normalize("  a   b ");
        assert_eq!(normalize(&s), s);
    }
}
