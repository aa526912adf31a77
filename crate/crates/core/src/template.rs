//! Prompt templates with `{name}` placeholders and `{{`/`}}` escapes.
//!
//! The syntax is the subset of Python `str.format` that prompt revisions are
//! allowed to use: named placeholders made of identifier characters, and
//! doubled braces for literal braces. Anything else involving a brace is
//! reported as a stray brace and refused by the renderer.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token<'a> {
    Text(&'a str),
    /// `{{`, renders as `{`.
    OpenEscape,
    /// `}}`, renders as `}`.
    CloseEscape,
    Placeholder(&'a str),
    Stray { offset: usize, fragment: &'a str },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("no value supplied for placeholder {{{0}}}")]
    UnboundPlaceholder(String),
    #[error("unescaped brace at byte {offset}: `{fragment}`")]
    StrayBrace { offset: usize, fragment: String },
}

fn is_ident(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Splits `text` into literal runs, escapes, placeholders and stray braces.
pub fn tokenize(text: &str) -> Vec<Token<'_>> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut literal_start = 0;
    let mut i = 0;

    fn flush<'t>(tokens: &mut Vec<Token<'t>>, text: &'t str, start: usize, end: usize) {
        if end > start {
            tokens.push(Token::Text(&text[start..end]));
        }
    }

    while i < bytes.len() {
        match bytes[i] {
            b'{' => {
                flush(&mut tokens, text, literal_start, i);
                if bytes.get(i + 1) == Some(&b'{') {
                    tokens.push(Token::OpenEscape);
                    i += 2;
                } else if let Some(close) = text[i + 1..].find(['}', '{']).map(|p| p + i + 1) {
                    let name = &text[i + 1..close];
                    if bytes[close] == b'}' && is_ident(name) {
                        tokens.push(Token::Placeholder(name));
                        i = close + 1;
                    } else {
                        let end = if bytes[close] == b'}' { close + 1 } else { i + 1 };
                        tokens.push(Token::Stray { offset: i, fragment: &text[i..end] });
                        i = end;
                    }
                } else {
                    tokens.push(Token::Stray { offset: i, fragment: &text[i..i + 1] });
                    i += 1;
                }
                literal_start = i;
            }
            b'}' => {
                flush(&mut tokens, text, literal_start, i);
                if bytes.get(i + 1) == Some(&b'}') {
                    tokens.push(Token::CloseEscape);
                    i += 2;
                } else {
                    tokens.push(Token::Stray { offset: i, fragment: &text[i..i + 1] });
                    i += 1;
                }
                literal_start = i;
            }
            _ => i += 1,
        }
    }
    flush(&mut tokens, text, literal_start, bytes.len());
    tokens
}

/// Placeholder names in order of appearance, repeats included.
pub fn placeholders(text: &str) -> Vec<&str> {
    tokenize(text)
        .into_iter()
        .filter_map(|t| match t {
            Token::Placeholder(name) => Some(name),
            _ => None,
        })
        .collect()
}

/// Placeholder occurrence counts.
pub fn placeholder_counts(text: &str) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for name in placeholders(text) {
        *counts.entry(name).or_insert(0) += 1;
    }
    counts
}

/// Stray braces as `(offset, fragment)` pairs.
pub fn stray_braces(text: &str) -> Vec<(usize, &str)> {
    tokenize(text)
        .into_iter()
        .filter_map(|t| match t {
            Token::Stray { offset, fragment } => Some((offset, fragment)),
            _ => None,
        })
        .collect()
}

/// Substitutes every placeholder. Values are inserted verbatim and never
/// re-scanned, so they may contain braces.
pub fn render(text: &str, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len());
    for token in tokenize(text) {
        match token {
            Token::Text(s) => out.push_str(s),
            Token::OpenEscape => out.push('{'),
            Token::CloseEscape => out.push('}'),
            Token::Placeholder(name) => match values.get(name) {
                Some(v) => out.push_str(v),
                None => return Err(TemplateError::UnboundPlaceholder(name.to_string())),
            },
            Token::Stray { offset, fragment } => {
                return Err(TemplateError::StrayBrace { offset, fragment: fragment.to_string() })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vals(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn renders_placeholders_and_escapes() {
        let out = render("Q: {question} {{\"k\": 1}}", &vals(&[("question", "why?")])).unwrap();
        assert_eq!(out, "Q: why? {\"k\": 1}");
    }

    #[test]
    fn escaped_placeholder_is_literal() {
        assert_eq!(render("{{question}}", &BTreeMap::new()).unwrap(), "{question}");
        assert!(placeholders("{{question}}").is_empty());
    }

    #[test]
    fn values_are_not_rescanned() {
        let out = render("{a}", &vals(&[("a", "{b} }")])).unwrap();
        assert_eq!(out, "{b} }");
    }

    #[test]
    fn unbound_placeholder_is_an_error() {
        let err = render("x {stage1}", &BTreeMap::new()).unwrap_err();
        assert_eq!(err, TemplateError::UnboundPlaceholder("stage1".into()));
    }

    #[test]
    fn stray_braces_are_found() {
        assert_eq!(stray_braces("a { b"), vec![(2, "{")]);
        assert_eq!(stray_braces("a } b"), vec![(2, "}")]);
        assert_eq!(stray_braces("{ \"k\": 1 }"), vec![(0, "{ \"k\": 1 }")]);
        assert_eq!(stray_braces("{}"), vec![(0, "{}")]);
        assert_eq!(stray_braces("{1abc}"), vec![(0, "{1abc}")]);
        assert!(stray_braces("{ok} {{ }}").is_empty());
    }

    #[test]
    fn nested_open_brace_is_stray() {
        // `{a{b}`: the first brace never closes before another opens.
        let toks = tokenize("{a{b}");
        assert_eq!(toks[0], Token::Stray { offset: 0, fragment: "{" });
        assert_eq!(toks[2], Token::Placeholder("b"));
    }

    proptest! {
        #[test]
        fn tokens_cover_input(text in ".{0,80}") {
            let mut rebuilt = String::new();
            for t in tokenize(&text) {
                match t {
                    Token::Text(s) => rebuilt.push_str(s),
                    Token::OpenEscape => rebuilt.push_str("{{"),
                    Token::CloseEscape => rebuilt.push_str("}}"),
                    Token::Placeholder(n) => { rebuilt.push('{'); rebuilt.push_str(n); rebuilt.push('}'); }
                    Token::Stray { fragment, .. } => rebuilt.push_str(fragment),
                }
            }
            prop_assert_eq!(rebuilt, text);
        }

        #[test]
        fn rendered_output_has_no_placeholders_left(name in "[a-z_]{1,8}", value in "[^{}]{0,20}") {
            let text = format!("before {{{name}}} after");
            let mut values = BTreeMap::new();
            values.insert(name.as_str(), value.clone());
            let out = render(&text, &values).unwrap();
            prop_assert_eq!(out, format!("before {value} after"));
        }
    }
}
