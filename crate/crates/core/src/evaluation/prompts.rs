//! Prompt files: one prompt per line, `#` comment lines, and an optional
//! trailing `*` that flags a prompt without changing its text.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROMPT_PREFIX: &str = "A photograph of";

const EVAL_PROMPTS: &str = include_str!("../../data/eval_prompts.txt");
const TOY_PROMPTS: &str = include_str!("../../data/toy_prompts.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub text: String,
    pub flagged: bool,
}

pub fn parse_prompt_file(text: &str) -> Result<Vec<PromptEntry>> {
    let bad = |r: String| Error::format("prompt file", r);
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.chars().any(char::is_control) {
            return Err(bad(format!("line {} contains control characters", i + 1)));
        }
        let (body, flagged) = match line.strip_suffix('*') {
            Some(b) => (b.trim_end(), true),
            None => (line, false),
        };
        if body.is_empty() {
            return Err(bad(format!("line {} has a flag but no prompt", i + 1)));
        }
        out.push(PromptEntry { text: body.to_string(), flagged });
    }
    if out.is_empty() {
        return Err(bad("no prompts".into()));
    }
    Ok(out)
}

pub fn load_prompt_file(path: &Path) -> Result<Vec<PromptEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prompt_file(&text)
}

/// The 64-prompt evaluation list shipped with the crate.
pub fn bundled_eval_prompts() -> Vec<PromptEntry> {
    parse_prompt_file(EVAL_PROMPTS).expect("bundled prompt file parses")
}

/// The eight toy concept prompts.
pub fn bundled_toy_prompts() -> Vec<PromptEntry> {
    parse_prompt_file(TOY_PROMPTS).expect("bundled prompt file parses")
}

pub fn with_prefix(prompt: &str) -> String {
    format!("{PROMPT_PREFIX} {prompt}")
}

/// First sixteen evaluation prompts, prefixed.
pub fn default_validation_prompts() -> Vec<String> {
    bundled_eval_prompts().iter().take(16).map(|p| with_prefix(&p.text)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn parsed_prompts_are_clean(text in "(\\PC{0,12}\n){0,8}") {
            if let Ok(entries) = parse_prompt_file(&text) {
                prop_assert!(!entries.is_empty());
                for e in entries {
                    prop_assert!(!e.text.is_empty());
                    prop_assert_eq!(e.text.trim(), e.text.as_str());
                }
            }
        }
    }

    #[test]
    fn bundled_lists() {
        let eval = bundled_eval_prompts();
        assert_eq!(eval.len(), 64);
        assert_eq!(eval.iter().filter(|p| p.flagged).count(), 19);
        assert_eq!(eval[0].text, "a person with glasses");
        assert!(eval.iter().all(|p| !p.text.ends_with('*')));
        assert_eq!(bundled_toy_prompts().len(), 8);
        assert_eq!(default_validation_prompts()[0], "A photograph of a person with glasses");
    }

    #[test]
    fn parse_rules() {
        let p = parse_prompt_file("\u{feff}# c\n\n  forest  \nRobert *\n").unwrap();
        assert_eq!(p, vec![
            PromptEntry { text: "forest".into(), flagged: false },
            PromptEntry { text: "Robert".into(), flagged: true },
        ]);
        assert!(parse_prompt_file("# only comments\n").is_err());
        assert!(parse_prompt_file("*\n").is_err());
        assert!(parse_prompt_file("a\u{7}b\n").is_err());
    }
}
