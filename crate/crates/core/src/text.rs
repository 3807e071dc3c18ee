//! Text normalization, tokenization and sentence splitting.
//!
//! Everything that compares strings (surface index lookups, lexical grounding,
//! claim/fact extraction) goes through this module so both sides of every
//! comparison see the same canonical form.

/// Lowercase, collapse whitespace, strip terminal punctuation. No stemming.
pub fn normalize(s: &str) -> String {
    let lowered = s.replace('\u{2019}', "'").to_lowercase();
    let mut out = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    while out
        .chars()
        .last()
        .is_some_and(|c| matches!(c, '.' | '!' | '?' | ';' | ':' | ','))
    {
        out.pop();
        let trimmed = out.trim_end().len();
        out.truncate(trimmed);
    }
    out
}

/// A word or a punctuation mark that can bound a negation scope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    Punct(char),
}

impl Piece {
    pub fn word(&self) -> Option<&str> {
        match self {
            Piece::Word(w) => Some(w),
            Piece::Punct(_) => None,
        }
    }
}

/// Splits text into lowercase words (number words replaced by digits) and
/// the punctuation marks that matter for scoping. Hyphens and slashes split
/// words; apostrophes stay inside them.
pub fn pieces(text: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<Piece>| {
        let w = word.trim_matches('\'');
        if !w.is_empty() {
            out.push(Piece::Word(canonical_word(w)));
        }
        word.clear();
    };
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        let c = if c == '\u{2019}' { '\'' } else { c };
        if c.is_alphanumeric() || c == '\'' {
            word.extend(c.to_lowercase());
            continue;
        }
        let next_digit = chars.peek().is_some_and(|n| n.is_ascii_digit());
        if c == '.' && next_digit && !word.is_empty() && word.chars().all(|w| w.is_ascii_digit()) {
            // Decimal point.
            word.push('.');
            continue;
        }
        let initial = c == '.' && word.chars().count() == 1 && word.chars().all(char::is_alphabetic);
        flush(&mut word, &mut out);
        if matches!(c, '.' | ',' | ';' | ':' | '?' | '!' | '(' | ')') && !initial {
            out.push(Piece::Punct(c));
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Words only, in order.
pub fn words(text: &str) -> Vec<String> {
    pieces(text)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Word(w) => Some(w),
            Piece::Punct(_) => None,
        })
        .collect()
}

/// Canonical key for a surface form: its words joined by single spaces.
/// "H. pylori" and "h pylori" share a key; "non-penicillin" becomes
/// "non penicillin".
pub fn surface_key(s: &str) -> String {
    words(s).join(" ")
}

const NUMBER_WORDS: &[(&str, &str)] = &[
    ("zero", "0"),
    ("one", "1"),
    ("two", "2"),
    ("three", "3"),
    ("four", "4"),
    ("five", "5"),
    ("six", "6"),
    ("seven", "7"),
    ("eight", "8"),
    ("nine", "9"),
    ("ten", "10"),
    ("eleven", "11"),
    ("twelve", "12"),
    ("thirteen", "13"),
    ("fourteen", "14"),
    ("fifteen", "15"),
    ("sixteen", "16"),
    ("seventeen", "17"),
    ("eighteen", "18"),
    ("nineteen", "19"),
    ("twenty", "20"),
    ("thirty", "30"),
    ("forty", "40"),
    ("fifty", "50"),
    ("sixty", "60"),
];

/// Number words become digits so "six months" and "6 months" compare equal.
pub fn canonical_word(w: &str) -> String {
    NUMBER_WORDS
        .iter()
        .find(|(word, _)| *word == w)
        .map(|(_, digit)| (*digit).to_string())
        .unwrap_or_else(|| w.to_string())
}

/// Folds regular English plurals ("allergies" -> "allergy", "sounds" ->
/// "sound"). Applied to both sides of a lexical comparison, never to
/// surface-index keys.
pub fn fold(w: &str) -> String {
    let n = w.chars().count();
    if n > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..w.len() - 3]);
    }
    if n > 3
        && w.ends_with('s')
        && !w.ends_with("ss")
        && !w.ends_with("us")
        && !w.ends_with("is")
        && !w.ends_with("'s")
    {
        return w[..w.len() - 1].to_string();
    }
    w.to_string()
}

pub fn is_number(w: &str) -> bool {
    let mut parts = w.split('.');
    let whole = parts.next().unwrap_or("");
    let frac = parts.next();
    let digits = |p: &str| !p.is_empty() && p.chars().all(|c| c.is_ascii_digit());
    digits(whole) && parts.next().is_none() && frac.is_none_or(digits)
}

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "am", "an", "and", "any", "approximately", "are", "as",
    "at", "be", "because", "been", "being", "but", "by", "can", "could", "did", "do", "does",
    "each", "every", "for", "from", "given", "had", "has", "have", "having", "he", "her", "here",
    "him", "his", "how", "i", "i'm", "i've", "if", "in", "into", "is", "it", "it's", "its",
    "just", "let", "may", "me", "might", "more", "most", "much", "my", "of", "on", "or", "our",
    "out", "patient", "patient's", "per", "pretty", "pt", "really", "reported", "reports",
    "she", "should", "so", "some", "states", "that", "that's", "the", "their", "them", "then",
    "there", "these", "they", "this", "those", "to", "too", "up", "very", "was", "we", "we'll",
    "were", "what", "when", "which", "who", "will", "with", "would", "you", "you're", "your",
];

pub fn is_stopword(w: &str) -> bool {
    STOPWORDS.binary_search(&w).is_ok()
}

const ABBREVIATIONS: &[&str] = &[
    "approx", "dr", "e.g", "etc", "i.e", "mr", "mrs", "ms", "st", "vs",
];

/// Splits prose into sentences at `.`, `!` and `?` followed by whitespace.
/// Single-letter initials ("H. pylori") and common abbreviations do not end
/// a sentence. Returned sentences are trimmed, with terminal punctuation kept.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let next_is_space = chars.get(i + 1).is_none_or(|n| n.is_whitespace());
            if next_is_space && !(c == '.' && ends_with_abbreviation(&chars[start..i])) {
                push_trimmed(&chars[start..=i], &mut out);
                start = i + 1;
            }
        } else if c == '\n' && chars.get(i + 1) == Some(&'\n') {
            push_trimmed(&chars[start..i], &mut out);
            start = i + 1;
        }
        i += 1;
    }
    if start < chars.len() {
        push_trimmed(&chars[start..], &mut out);
    }
    out
}

fn push_trimmed(chars: &[char], out: &mut Vec<String>) {
    let s: String = chars.iter().collect();
    let s = s.trim();
    if !s.is_empty() && s.chars().any(char::is_alphanumeric) {
        out.push(s.to_string());
    }
}

fn ends_with_abbreviation(before: &[char]) -> bool {
    let word: String = before
        .iter()
        .rev()
        .take_while(|c| c.is_alphanumeric() || **c == '.')
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    let lower = word.to_lowercase();
    if lower.chars().count() == 1 && lower.chars().all(char::is_alphabetic) {
        return true;
    }
    ABBREVIATIONS.contains(&lower.as_str())
}

/// Splits a sentence at top-level occurrences of `sep`, ignoring separators
/// inside parentheses.
pub fn split_top_level(text: &str, sep: char) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for c in text.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            _ => {}
        }
        if c == sep && depth == 0 {
            out.push(std::mem::take(&mut cur));
        } else {
            cur.push(c);
        }
    }
    out.push(cur);
    out.into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| s.chars().any(char::is_alphanumeric))
        .collect()
}

/// Removes trailing sentence punctuation and surrounding whitespace while
/// keeping the original casing.
pub fn trim_terminal(s: &str) -> String {
    s.trim()
        .trim_end_matches(['.', '!', '?', ';', ',', ':'])
        .trim()
        .to_string()
}
