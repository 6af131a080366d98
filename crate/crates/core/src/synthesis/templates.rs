use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{template} template: unknown placeholder {{{name}}}")]
    Unknown {
        template: &'static str,
        name: String,
    },
    #[error("{template} template: missing placeholder {{{name}}}")]
    Missing {
        template: &'static str,
        name: &'static str,
    },
}

/// Prompt text with `{name}` placeholders. Braces that do not enclose a
/// lowercase identifier are kept literally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: &'static str,
    text: String,
}

fn placeholders(text: &str) -> BTreeSet<&str> {
    let mut found = BTreeSet::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_ident(&after[..close]) => {
                found.insert(&after[..close]);
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    found
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

impl Template {
    fn new(
        name: &'static str,
        text: String,
        allowed: &[&'static str],
        required: &[&'static str],
    ) -> Result<Self, TemplateError> {
        let used = placeholders(&text);
        if let Some(unknown) = used.iter().find(|p| !allowed.contains(p)) {
            return Err(TemplateError::Unknown {
                template: name,
                name: unknown.to_string(),
            });
        }
        if let Some(missing) = required.iter().find(|r| !used.contains(*r)) {
            return Err(TemplateError::Missing {
                template: name,
                name: missing,
            });
        }
        Ok(Template { name, text })
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len() + 256);
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_ident(&after[..close]) => {
                    let key = &after[..close];
                    match values.iter().find(|(k, _)| *k == key) {
                        Some((_, v)) => out.push_str(v),
                        None => out.push_str(&rest[open..open + close + 2]),
                    }
                    rest = &after[close + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// The four prompts driving stage-one synthesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub planning: Template,
    pub grounding: Template,
    pub state_description: Template,
    pub causal_analysis: Template,
}

pub const TEMPLATE_FILES: [&str; 4] = [
    "planning.txt",
    "grounding.txt",
    "state_description.txt",
    "causal_analysis.txt",
];

impl PromptTemplates {
    pub fn new(
        planning: String,
        grounding: String,
        state_description: String,
        causal_analysis: String,
    ) -> Result<Self, TemplateError> {
        Ok(PromptTemplates {
            planning: Template::new("planning", planning, &["task"], &["task"])?,
            grounding: Template::new(
                "grounding",
                grounding,
                &["task", "action", "ui_metadata"],
                &["action", "ui_metadata"],
            )?,
            state_description: Template::new("state_description", state_description, &[], &[])?,
            causal_analysis: Template::new(
                "causal_analysis",
                causal_analysis,
                &["task", "action", "pre_state", "post_state"],
                &["task", "action", "pre_state", "post_state"],
            )?,
        })
    }

    pub fn builtin() -> Self {
        Self::new(
            include_str!("../../assets/templates/planning.txt").into(),
            include_str!("../../assets/templates/grounding.txt").into(),
            include_str!("../../assets/templates/state_description.txt").into(),
            include_str!("../../assets/templates/causal_analysis.txt").into(),
        )
        .expect("built-in templates are valid")
    }

    /// Loads the four template files (see [`TEMPLATE_FILES`]) from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |file: &str| {
            let path = dir.join(file);
            fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        Self::new(
            read(TEMPLATE_FILES[0])?,
            read(TEMPLATE_FILES[1])?,
            read(TEMPLATE_FILES[2])?,
            read(TEMPLATE_FILES[3])?,
        )
    }
}
