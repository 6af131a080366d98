//! Extraction of labeled sections from expert-model responses.
//!
//! A section starts at a line whose text (after leading whitespace and
//! markdown emphasis) begins with a known label and a colon, matched
//! case-insensitively. It runs until the next labeled line.

pub const LABELS: [&str; 6] = [
    "PLAN",
    "ACTION",
    "STATE",
    "TRIGGER",
    "MECHANISM",
    "REASONING",
];

fn label_of(line: &str) -> Option<(&'static str, &str)> {
    let trimmed = line.trim_start().trim_start_matches(['*', '#', '_', ' ']);
    let colon = trimmed.find(':')?;
    let head = trimmed[..colon].trim_end_matches(['*', '_']).trim();
    let label = LABELS.iter().find(|l| l.eq_ignore_ascii_case(head))?;
    let rest = trimmed[colon + 1..].trim_start_matches(['*', '_']);
    Some((label, rest))
}

/// Text of section `label`, trimmed; `None` when the label is absent.
pub fn section(response: &str, label: &str) -> Option<String> {
    let mut out: Option<Vec<&str>> = None;
    for line in response.lines() {
        match label_of(line) {
            Some((found, rest)) => {
                if out.is_some() {
                    break;
                }
                if found.eq_ignore_ascii_case(label) {
                    out = Some(vec![rest]);
                }
            }
            None => {
                if let Some(lines) = out.as_mut() {
                    lines.push(line);
                }
            }
        }
    }
    out.map(|lines| lines.join("\n").trim().to_string())
}

fn has_any_label(response: &str) -> bool {
    response.lines().any(|l| label_of(l).is_some())
}

/// Section `label`, or the whole response when it carries no labels at all.
pub fn labeled_or_whole(response: &str, label: &str) -> Option<String> {
    let text = match section(response, label) {
        Some(s) => s,
        None if !has_any_label(response) => response.trim().to_string(),
        None => return None,
    };
    (!text.is_empty()).then_some(text)
}

/// Items of a numbered list (`1. x` or `1) x`), read from the PLAN section
/// when present and from the whole response otherwise.
pub fn numbered_list(response: &str) -> Vec<String> {
    let body = section(response, "PLAN").unwrap_or_else(|| response.to_string());
    body.lines()
        .filter_map(|line| {
            let line = line.trim();
            let digits = line.chars().take_while(char::is_ascii_digit).count();
            if digits == 0 {
                return None;
            }
            let rest = line[digits..].strip_prefix(['.', ')'])?;
            let item = rest.trim();
            (!item.is_empty()).then(|| item.to_string())
        })
        .collect()
}
