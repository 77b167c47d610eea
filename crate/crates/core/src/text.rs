//! Rule-based keyword extraction used when no reasoner answer is available:
//! quoted spans plus runs of capitalized tokens.

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "what", "when", "where", "who", "whom", "whose", "which", "why", "how",
    "did", "do", "does", "is", "are", "was", "were", "find", "list", "show", "name", "give",
    "tell", "in", "on", "of", "for", "and", "or", "to", "by", "with", "from", "at", "as", "be",
    "been", "has", "have", "had", "can", "could", "would", "should", "will", "i", "me", "my", "we",
    "our", "you", "your", "it", "its", "this", "that", "these", "those",
];

fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token.to_lowercase().as_str())
}

fn quoted_spans(query: &str) -> (Vec<String>, String) {
    let mut spans = Vec::new();
    let mut rest = String::with_capacity(query.len());
    let mut current: Option<String> = None;
    for ch in query.chars() {
        let is_open = ch == '"' || ch == '\u{201c}';
        let is_close = ch == '"' || ch == '\u{201d}';
        match current.as_mut() {
            Some(buf) if is_close => {
                let span = buf.trim().to_string();
                if !span.is_empty() {
                    spans.push(span);
                }
                current = None;
                rest.push(' ');
            }
            Some(buf) => buf.push(ch),
            None if is_open => current = Some(String::new()),
            None => rest.push(ch),
        }
    }
    // an unterminated quote is treated as ordinary text
    if let Some(buf) = current {
        rest.push_str(&buf);
    }
    (spans, rest)
}

/// Quoted spans, then maximal runs of capitalized tokens with leading
/// stopwords dropped. Never empty for a non-blank query.
pub fn fallback_keywords(query: &str) -> Vec<String> {
    let (mut out, rest) = quoted_spans(query);
    let mut run: Vec<String> = Vec::new();
    let flush = |run: &mut Vec<String>, out: &mut Vec<String>| {
        let start = run
            .iter()
            .position(|t| !is_stopword(t))
            .unwrap_or(run.len());
        if start < run.len() {
            out.push(run[start..].join(" "));
        }
        run.clear();
    };
    for raw in rest.split_whitespace() {
        let trimmed_end = raw.trim_end_matches(|c: char| !c.is_alphanumeric() && c != '\'');
        let breaks_after = trimmed_end.len() < raw.len();
        let mut token = trimmed_end.trim_start_matches(|c: char| !c.is_alphanumeric());
        let mut possessive = false;
        for suffix in ["'s", "\u{2019}s", "'"] {
            if let Some(stem) = token.strip_suffix(suffix) {
                token = stem;
                possessive = true;
                break;
            }
        }
        let capitalized = token.chars().next().is_some_and(char::is_uppercase);
        if capitalized {
            run.push(token.to_string());
            if breaks_after || possessive {
                flush(&mut run, &mut out);
            }
        } else {
            flush(&mut run, &mut out);
        }
    }
    flush(&mut run, &mut out);

    let mut seen = std::collections::HashSet::new();
    out.retain(|k| seen.insert(k.clone()));
    if out.is_empty() {
        let whole = query
            .trim()
            .trim_end_matches(|c: char| c.is_ascii_punctuation())
            .trim();
        if !whole.is_empty() {
            out.push(whole.to_string());
        }
    }
    out
}
