//! Prompt text helpers shared by the router, the text encoders and inversion.
//!
//! Placeholder tokens are written `<name>` (ASCII angle brackets). The
//! mathematical brackets `⟨name⟩` are accepted on input and normalized.

/// Rewrites `⟨x⟩` to `<x>`.
pub fn normalize_brackets(text: &str) -> String {
    text.replace('⟨', "<").replace('⟩', ">")
}

/// Collapses runs of whitespace to single spaces and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_placeholder_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-'
}

/// Byte ranges of every placeholder occurrence, in order.
fn placeholder_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            let mut j = i + 1;
            while j < bytes.len() && is_placeholder_char(bytes[j] as char) {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'>' {
                spans.push((i, j + 1));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    spans
}

/// Placeholder tokens (including brackets) in order of appearance.
pub fn placeholders(text: &str) -> Vec<String> {
    let text = normalize_brackets(text);
    placeholder_spans(&text)
        .into_iter()
        .map(|(a, b)| text[a..b].to_string())
        .collect()
}

/// True when `token` looks like `<name>`.
pub fn is_placeholder(token: &str) -> bool {
    let spans = placeholder_spans(token);
    spans.len() == 1 && spans[0] == (0, token.len())
}

/// Deletes every placeholder for which `keep` returns false, then
/// normalizes whitespace. No grammar repair is attempted.
pub fn retain_placeholders(text: &str, keep: impl Fn(&str) -> bool) -> String {
    let text = normalize_brackets(text);
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (a, b) in placeholder_spans(&text) {
        out.push_str(&text[last..a]);
        let token = &text[a..b];
        if keep(token) {
            out.push_str(token);
        } else {
            out.push(' ');
        }
        last = b;
    }
    out.push_str(&text[last..]);
    normalize_whitespace(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_placeholders_in_order() {
        assert_eq!(
            placeholders("a <c> colored photo in ⟨s⟩ style"),
            vec!["<c>".to_string(), "<s>".to_string()]
        );
        assert!(placeholders("a < b > c").is_empty());
        assert!(placeholders("<|endoftext|>").is_empty());
    }

    #[test]
    fn strips_inactive_tokens() {
        let kept = retain_placeholders("a <c> colored photo in <s> style", |t| t == "<s>");
        assert_eq!(kept, "a colored photo in <s> style");
        assert_eq!(retain_placeholders("  a   photo ", |_| false), "a photo");
    }

    #[test]
    fn recognizes_single_placeholder() {
        assert!(is_placeholder("<x12>"));
        assert!(!is_placeholder("<x12> dog"));
        assert!(!is_placeholder("dog"));
    }
}
