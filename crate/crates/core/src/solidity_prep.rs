//! Source cleaning for the text branch: comment removal and whitespace
//! normalization, both aware of string literals.

use serde::{Deserialize, Serialize};

/// Cleaned source plus bookkeeping. Lengths are in `char`s.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanSource {
    pub text: String,
    pub original_len: usize,
    pub cleaned_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanOptions {
    /// Collapse runs of interior spaces/tabs to one space. Changes columns.
    pub collapse_interior_spaces: bool,
}

impl Default for CleanOptions {
    fn default() -> Self {
        Self { collapse_interior_spaces: true }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Quote {
    Double,
    Single,
}

impl Quote {
    fn from_char(c: char) -> Option<Quote> {
        match c {
            '"' => Some(Quote::Double),
            '\'' => Some(Quote::Single),
            _ => None,
        }
    }

    fn closes(self, c: char) -> bool {
        matches!((self, c), (Quote::Double, '"') | (Quote::Single, '\''))
    }
}

/// Removes `//` line comments and `/* */` block comments.
///
/// Comment markers inside `"…"` / `'…'` literals are kept. Literals do not
/// span lines, so an unterminated quote ends at the newline. An unterminated
/// block comment runs to end of input. A block comment wedged between two
/// non-space characters becomes one space, so `a/**/b` stays two tokens.
pub fn strip_comments(source: &str) -> String {
    let chars: Vec<char> = source.chars().collect();
    let mut out = String::with_capacity(source.len());
    let mut quote: Option<Quote> = None;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if let Some(q) = quote {
            out.push(c);
            if c == '\\' && i + 1 < chars.len() && chars[i + 1] != '\n' {
                out.push(chars[i + 1]);
                i += 2;
                continue;
            }
            if q.closes(c) || c == '\n' {
                quote = None;
            }
            i += 1;
            continue;
        }
        match (c, chars.get(i + 1)) {
            ('/', Some('/')) => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            ('/', Some('*')) => {
                let mut j = i + 2;
                while j < chars.len() && !(chars[j] == '*' && chars.get(j + 1) == Some(&'/')) {
                    j += 1;
                }
                let end = (j + 2).min(chars.len());
                let before = out.chars().last().is_some_and(|p| !p.is_whitespace());
                let after = chars.get(end).is_some_and(|n| !n.is_whitespace());
                if before && after {
                    out.push(' ');
                }
                i = end;
            }
            _ => {
                quote = Quote::from_char(c);
                out.push(c);
                i += 1;
            }
        }
    }
    out
}

/// CRLF/CR → LF, trailing spaces and tabs dropped, runs of two or more blank
/// lines collapsed to one, and (optionally) interior whitespace runs outside
/// string literals collapsed to a single space. Leading indentation is kept.
pub fn normalize_whitespace(source: &str, options: CleanOptions) -> String {
    let unified = source.replace("\r\n", "\n").replace('\r', "\n");
    let mut lines: Vec<String> = Vec::new();
    let mut blank_run = 0usize;
    for raw in unified.split('\n') {
        let trimmed = raw.trim_end_matches([' ', '\t']);
        let line = if options.collapse_interior_spaces { collapse_interior(trimmed) } else { trimmed.to_string() };
        if line.is_empty() {
            blank_run += 1;
            if blank_run > 1 {
                continue;
            }
        } else {
            blank_run = 0;
        }
        lines.push(line);
    }
    lines.join("\n")
}

fn collapse_interior(line: &str) -> String {
    let indent_len = line.len() - line.trim_start_matches([' ', '\t']).len();
    let (indent, body) = line.split_at(indent_len);
    let mut out = String::with_capacity(line.len());
    out.push_str(indent);
    let mut quote: Option<Quote> = None;
    let mut escaped = false;
    let mut pending_space = false;
    for c in body.chars() {
        if let Some(q) = quote {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if q.closes(c) {
                quote = None;
            }
            continue;
        }
        if c == ' ' || c == '\t' {
            pending_space = true;
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        quote = Quote::from_char(c);
        out.push(c);
    }
    out
}

/// `strip_comments` followed by `normalize_whitespace`.
pub fn clean_source(source: &str, options: CleanOptions) -> CleanSource {
    let text = normalize_whitespace(&strip_comments(source), options);
    CleanSource { original_len: source.chars().count(), cleaned_len: text.chars().count(), text }
}
