//! Shipped prompt templates and the rendering split into chat messages.

use std::collections::BTreeMap;

use crate::stage::StageId;
use crate::template::{self, TemplateError};

pub const STAGE1: &str = include_str!("../prompts/stage1.txt");
pub const STAGE2: &str = include_str!("../prompts/stage2.txt");
pub const PLAN: &str = include_str!("../prompts/plan.txt");
pub const SQL: &str = include_str!("../prompts/sql.txt");
pub const CRITIC: &str = include_str!("../prompts/critic.txt");
pub const REFINER: &str = include_str!("../prompts/refiner.txt");
pub const JUDGE: &str = include_str!("../prompts/judge.txt");

/// Line separating the instruction part of a prompt from its invocation part.
pub const INVOCATION_MARKER: &str = "Task Invocation";

/// User message sent when a prompt has no invocation section.
pub const FALLBACK_USER_TEXT: &str = "Respond now, following the output contract above.";

/// Headers that prompt revisions must keep verbatim.
pub const PROTECTED_HEADERS: [&str; 3] = ["Question:", "Relevant tables/attributes:", "Value instances:"];

pub fn default_stage_prompt(stage: StageId) -> &'static str {
    match stage {
        StageId::Stage1 => STAGE1,
        StageId::Stage2 => STAGE2,
        StageId::Plan => PLAN,
        StageId::Sql => SQL,
    }
}

/// Placeholders a stage prompt must always carry, whatever its history.
pub fn required_placeholders(stage: StageId) -> &'static [&'static str] {
    match stage {
        StageId::Stage1 => &["question", "schema"],
        StageId::Stage2 => &["question", "stage1"],
        StageId::Plan => &["question", "stage1", "stage2"],
        StageId::Sql => &["question", "semantic_plan"],
    }
}

/// Headers of the invocation section of each default stage prompt; they
/// frame the substituted inputs and are protected like [`PROTECTED_HEADERS`].
pub fn invocation_headers(stage: StageId) -> &'static [&'static str] {
    match stage {
        StageId::Stage1 => &["Special evidence to consider:", "Schema:"],
        StageId::Stage2 => &["Stage-1 (Tables and Attributes):", "Additional database context (important):"],
        StageId::Plan => &["Stage 1 (Tables and Attributes):", "Stage 2 (Literals and Constraint Signals):"],
        StageId::Sql => &[
            "Semantic plan:",
            "Additional database information:",
            "Additional evidence:",
            "Natural-language question:",
        ],
    }
}

/// A rendered prompt, split into system and user messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

/// Renders `template` and splits it at the invocation marker line.
pub fn render_messages(template: &str, values: &BTreeMap<&str, String>) -> Result<RenderedPrompt, TemplateError> {
    let rendered = template::render(template, values)?;
    Ok(split_at_marker(&rendered))
}

fn split_at_marker(rendered: &str) -> RenderedPrompt {
    let mut offset = 0;
    for line in rendered.split_inclusive('\n') {
        if line.trim() == INVOCATION_MARKER {
            let system = rendered[..offset].trim_end().to_string();
            let user = rendered[offset + line.len()..].trim().to_string();
            if !user.is_empty() {
                return RenderedPrompt { system, user };
            }
            break;
        }
        offset += line.len();
    }
    RenderedPrompt { system: rendered.trim().to_string(), user: FALLBACK_USER_TEXT.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::{placeholders, stray_braces};

    #[test]
    fn shipped_prompts_are_brace_safe() {
        for text in [STAGE1, STAGE2, PLAN, SQL, CRITIC, REFINER, JUDGE] {
            assert!(stray_braces(text).is_empty(), "stray brace in shipped prompt");
        }
    }

    #[test]
    fn stage_prompts_carry_required_placeholders_and_headers() {
        for stage in StageId::ALL {
            let text = default_stage_prompt(stage);
            let present = placeholders(text);
            for name in required_placeholders(stage) {
                assert!(present.contains(name), "{stage} lacks {{{name}}}");
            }
            for header in invocation_headers(stage) {
                assert!(text.contains(header), "{stage} lacks header {header}");
            }
        }
    }

    #[test]
    fn placeholder_sets_match_invocations() {
        assert_eq!(placeholders(STAGE1), vec!["question", "extra_evidence", "schema"]);
        assert_eq!(placeholders(STAGE2), vec!["question", "stage1", "extra_db_info"]);
        assert_eq!(placeholders(PLAN), vec!["question", "stage1", "stage2"]);
        assert_eq!(placeholders(SQL), vec!["semantic_plan", "extra_db_info", "extra_evidence", "question"]);
        assert_eq!(placeholders(CRITIC), vec!["question", "schema", "sql", "stage1", "stage2", "analysis"]);
        assert_eq!(placeholders(REFINER), vec!["stage", "original_prompt", "critique_json"]);
    }

    #[test]
    fn split_puts_invocation_in_user_message() {
        let mut values = BTreeMap::new();
        values.insert("question", "How many heads?".to_string());
        values.insert("stage1", "{}".to_string());
        values.insert("stage2", "{}".to_string());
        let msgs = render_messages(PLAN, &values).unwrap();
        assert!(msgs.system.starts_with("Role."));
        assert!(!msgs.system.contains("How many heads?"));
        assert!(msgs.user.starts_with("Question:\nHow many heads?"));
    }

    #[test]
    fn missing_marker_falls_back_to_single_system_message() {
        let msgs = render_messages("Just do it: {question}", &[("question", "x".to_string())].into()).unwrap();
        assert_eq!(msgs.system, "Just do it: x");
        assert_eq!(msgs.user, FALLBACK_USER_TEXT);
    }

    #[test]
    fn refiner_prompt_renders_literal_brace_examples() {
        let mut values = BTreeMap::new();
        values.insert("stage", "sql".to_string());
        values.insert("original_prompt", "P".to_string());
        values.insert("critique_json", "C".to_string());
        let msgs = render_messages(REFINER, &values).unwrap();
        assert!(msgs.system.contains("{question}, {stage1}, {stage2}"));
        assert!(msgs.system.contains("double braces {{ ... }}"));
    }
}
