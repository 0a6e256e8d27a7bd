use unicode_normalization::UnicodeNormalization;

/// Canonical form for transcriptions: NFC, control characters dropped, every
/// whitespace run collapsed to one ASCII space, ends trimmed.
///
/// All comparisons (CER/WER, charset construction, LM tokenization) assume
/// their inputs went through this function.
pub fn normalize_transcription(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.nfc() {
        if ch.is_whitespace() {
            pending_space = true;
            continue;
        }
        if ch.is_control() {
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        out.push(ch);
    }
    out
}

/// Whitespace-delimited tokens. Punctuation stays attached to its word.
pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

pub fn word_count(text: &str) -> usize {
    words(text).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapses_and_trims() {
        assert_eq!(normalize_transcription("  a \t b\n\nc  "), "a b c");
    }

    #[test]
    fn composes_to_nfc() {
        // e + combining acute
        assert_eq!(normalize_transcription("e\u{301}"), "\u{e9}");
    }

    #[test]
    fn drops_controls() {
        assert_eq!(normalize_transcription("a\u{7}b"), "ab");
    }

    #[test]
    fn idempotent() {
        let s = "  Johannes  de\u{A751}  ";
        let once = normalize_transcription(s);
        assert_eq!(normalize_transcription(&once), once);
    }
}
