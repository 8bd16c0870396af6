//! The fenced action directive the reasoner emits inside its planning text.
//!
//! ````text
//! I should look closer at the sign in the upper left.
//! ```action
//! ZoomIn image=input x=0 y=0 w=120 h=80 factor=2
//! ```
//! ````
//!
//! Exactly one block per planning. The first word is the action name, the
//! rest are `key=value` pairs; values containing spaces are double-quoted
//! with `\"` and `\\` escapes. Everything outside the block is the planning
//! text proper.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{ActionKind, ToolInvocation};

pub const FENCE_OPEN: &str = "```action";
pub const FENCE_CLOSE: &str = "```";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DirectiveError {
    #[error("no ```action block found")]
    Missing,
    #[error("action block is not terminated")]
    Unterminated,
    #[error("more than one action block")]
    Multiple,
    #[error("action block is empty")]
    Empty,
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("malformed argument `{0}`")]
    MalformedArgument(String),
    #[error("duplicate argument `{0}`")]
    DuplicateArgument(String),
    #[error("planning text outside the action block is empty")]
    EmptyPlanning,
}

/// Splits a reasoner output into its planning text and the invocation.
pub fn parse(text: &str) -> Result<(String, ToolInvocation), DirectiveError> {
    let start = text.find(FENCE_OPEN).ok_or(DirectiveError::Missing)?;
    let body_start = start + FENCE_OPEN.len();
    let rel_end = text[body_start..].find(FENCE_CLOSE).ok_or(DirectiveError::Unterminated)?;
    let body = &text[body_start..body_start + rel_end];
    let rest = &text[body_start + rel_end + FENCE_CLOSE.len()..];
    if rest.contains(FENCE_OPEN) {
        return Err(DirectiveError::Multiple);
    }
    let invocation = parse_body(body)?;

    let before = text[..start].trim();
    let after = rest.trim();
    let planning = match (before.is_empty(), after.is_empty()) {
        (true, true) => return Err(DirectiveError::EmptyPlanning),
        (false, true) => before.to_string(),
        (true, false) => after.to_string(),
        (false, false) => format!("{before}\n{after}"),
    };
    Ok((planning, invocation))
}

/// True when the text contains a directive fence at all.
pub fn has_directive(text: &str) -> bool {
    text.contains(FENCE_OPEN)
}

fn parse_body(body: &str) -> Result<ToolInvocation, DirectiveError> {
    let words = split_words(body.trim())?;
    let mut iter = words.into_iter();
    let name = iter.next().ok_or(DirectiveError::Empty)?;
    let action = ActionKind::parse(&name).ok_or(DirectiveError::UnknownAction(name))?;
    let mut arguments = BTreeMap::new();
    for word in iter {
        let (k, v) = word
            .split_once('=')
            .filter(|(k, _)| !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
            .ok_or_else(|| DirectiveError::MalformedArgument(word.clone()))?;
        if arguments.insert(k.to_string(), v.to_string()).is_some() {
            return Err(DirectiveError::DuplicateArgument(k.to_string()));
        }
    }
    Ok(ToolInvocation { action, arguments })
}

/// Whitespace split honouring double quotes inside values.
fn split_words(s: &str) -> Result<Vec<String>, DirectiveError> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut in_quotes = false;
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        match c {
            '"' => in_quotes = !in_quotes,
            '\\' if in_quotes => match chars.next() {
                Some(e @ ('"' | '\\')) => cur.push(e),
                _ => return Err(DirectiveError::MalformedArgument(cur)),
            },
            c if c.is_whitespace() && !in_quotes => {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if in_quotes {
        return Err(DirectiveError::MalformedArgument(cur));
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    Ok(words)
}

fn quote(value: &str) -> String {
    let plain = !value.is_empty() && !value.chars().any(|c| c.is_whitespace() || c == '"' || c == '\\' || c == '`');
    if plain {
        value.to_string()
    } else {
        let escaped = value.replace('\\', "\\\\").replace('"', "\\\"");
        format!("\"{escaped}\"")
    }
}

/// Canonical directive text: action name, then arguments in key order.
pub fn render(inv: &ToolInvocation) -> String {
    let mut line = inv.action.name().to_string();
    for (k, v) in &inv.arguments {
        line.push(' ');
        line.push_str(k);
        line.push('=');
        line.push_str(&quote(v));
    }
    format!("{FENCE_OPEN}\n{line}\n{FENCE_CLOSE}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_planning_and_arguments() {
        let text = "Look at the top left.\n```action\nCrop image=input x=0 y=0 w=50 h=50\n```\n";
        let (planning, inv) = parse(text).unwrap();
        assert_eq!(planning, "Look at the top left.");
        assert_eq!(inv.action, ActionKind::Crop);
        assert_eq!(inv.arguments["w"], "50");
    }

    #[test]
    fn quoted_values() {
        let text = "find it\n```action\nGrounding image=input target=\"red \\\"big\\\" car\"\n```";
        let (_, inv) = parse(text).unwrap();
        assert_eq!(inv.arguments["target"], "red \"big\" car");
    }

    #[test]
    fn errors() {
        assert_eq!(parse("just text").unwrap_err(), DirectiveError::Missing);
        assert_eq!(parse("x\n```action\nCrop").unwrap_err(), DirectiveError::Unterminated);
        assert_eq!(
            parse("x\n```action\nFly a=1\n```").unwrap_err(),
            DirectiveError::UnknownAction("Fly".into())
        );
        assert_eq!(
            parse("x\n```action\nCrop nonsense\n```").unwrap_err(),
            DirectiveError::MalformedArgument("nonsense".into())
        );
        assert_eq!(parse("```action\nCrop\n```").unwrap_err(), DirectiveError::EmptyPlanning);
        assert_eq!(
            parse("x ```action\nCrop\n``` y ```action\nOCR\n```").unwrap_err(),
            DirectiveError::Multiple
        );
        assert_eq!(
            parse("x\n```action\nCrop a=1 a=2\n```").unwrap_err(),
            DirectiveError::DuplicateArgument("a".into())
        );
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            idx in 0usize..10,
            args in proptest::collection::btree_map("[a-z_]{1,6}", "[ -_a-~]{0,12}", 0..4),
        ) {
            let inv = ToolInvocation { action: ActionKind::ALL[idx], arguments: args };
            let text = format!("plan\n{}", render(&inv));
            let (planning, back) = parse(&text).unwrap();
            prop_assert_eq!(planning, "plan");
            prop_assert_eq!(back, inv);
        }
    }
}
