//! Sentence segmentation shared by pruning and the split strategy.

/// Terminators that always end a sentence (no trailing whitespace needed).
const CJK_TERMINATORS: [char; 3] = ['。', '！', '？'];
/// Terminators that end a sentence only before whitespace or end of text.
const LATIN_TERMINATORS: [char; 3] = ['.', '!', '?'];

/// Clause terminators added on top of sentence terminators when splitting
/// narrative text per defendant.
pub const CLAUSE_TERMINATORS: [char; 2] = [';', '；'];

fn is_terminator(c: char, extra: &[char]) -> bool {
    CJK_TERMINATORS.contains(&c) || LATIN_TERMINATORS.contains(&c) || extra.contains(&c)
}

/// Splits `text` into segments. Each segment carries its terminator and the
/// whitespace that follows it, so concatenating all segments reproduces the
/// input exactly.
pub fn segments<'a>(text: &'a str, extra: &[char]) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if !is_terminator(c, extra) {
            continue;
        }
        let mut end = i + c.len_utf8();
        let mut always = CJK_TERMINATORS.contains(&c) || "；".contains(c);
        while let Some(&(j, n)) = iter.peek() {
            if is_terminator(n, extra) {
                always |= CJK_TERMINATORS.contains(&n) || n == '；';
                end = j + n.len_utf8();
                iter.next();
            } else {
                break;
            }
        }
        let at_boundary = match iter.peek() {
            None => true,
            Some(&(_, n)) => n.is_whitespace(),
        };
        if !(always || at_boundary) {
            continue;
        }
        while let Some(&(j, n)) = iter.peek() {
            if n.is_whitespace() {
                end = j + n.len_utf8();
                iter.next();
            } else {
                break;
            }
        }
        out.push(&text[start..end]);
        start = end;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Sentence segments with surrounding whitespace trimmed, empty ones dropped.
pub fn sentences(text: &str) -> Vec<&str> {
    segments(text, &[]).into_iter().map(str::trim).filter(|s| !s.is_empty()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latin_and_cjk() {
        assert_eq!(sentences("A led. A is the principal. B helped."), vec![
            "A led.",
            "A is the principal.",
            "B helped."
        ]);
        assert_eq!(sentences("甲持刀。乙望风！丙"), vec!["甲持刀。", "乙望风！", "丙"]);
        // decimal points are not boundaries
        assert_eq!(sentences("It cost 3.5 yuan. Done"), vec!["It cost 3.5 yuan.", "Done"]);
    }

    #[test]
    fn segments_concatenate_back() {
        for t in ["Zhang invited Li; Zhang beat Wang.", "a?! b.  c", "", "。。x"] {
            assert_eq!(segments(t, &CLAUSE_TERMINATORS).concat(), t);
            assert_eq!(segments(t, &[]).concat(), t);
        }
        assert_eq!(segments("Zhang invited Li; Zhang beat Wang.", &CLAUSE_TERMINATORS), vec![
            "Zhang invited Li; ",
            "Zhang beat Wang."
        ]);
    }
}
