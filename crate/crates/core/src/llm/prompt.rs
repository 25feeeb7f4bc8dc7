//! Three-part prompts: task description with candidates, demonstrations,
//! then the test query.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CANDIDATES_PREFIX: &str = "Candidates: ";
pub const DEFAULT_INSTRUCTION: &str =
    "Predict the tail entity that completes the triple (head, relation, ?). Answer with one entity name from the candidates.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub question: String,
    pub answer: String,
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            instruction: DEFAULT_INSTRUCTION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub task_description: String,
    pub candidates: Vec<String>,
    pub demonstrations: Vec<Demonstration>,
    pub test_query: String,
    pub rendered: String,
}

/// `(head, relation, ?)`
pub fn query_text(head: &str, relation: &str) -> String {
    format!("({head}, {relation}, ?)")
}

pub fn rationale_text(head: &str, relation: &str, tail: &str) -> String {
    format!("{head} is connected to {tail} via {relation}, so the answer is {tail}.")
}

/// Layout:
///
/// ```text
/// <instruction>
/// Candidates: a, b, c
///
/// Q: <demo question>
/// [<rationale>]
/// A: <demo answer>
///
/// Q: <test query>
/// A:
/// ```
///
/// The final line ends in a single space.
pub fn build_prompt(
    template: &PromptTemplate,
    candidates: &[String],
    demonstrations: &[Demonstration],
    test_query: &str,
) -> Result<Prompt> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "prompt needs at least one candidate".into(),
        ));
    }
    let task_description = format!(
        "{}\n{CANDIDATES_PREFIX}{}",
        template.instruction,
        candidates.join(", ")
    );
    let mut sections = vec![task_description.clone()];
    for d in demonstrations {
        let mut s = format!("Q: {}\n", d.question);
        if let Some(r) = &d.rationale {
            s.push_str(r);
            s.push('\n');
        }
        s.push_str("A: ");
        s.push_str(&d.answer);
        sections.push(s);
    }
    sections.push(format!("Q: {test_query}\nA: "));
    Ok(Prompt {
        task_description,
        candidates: candidates.to_vec(),
        demonstrations: demonstrations.to_vec(),
        test_query: test_query.to_string(),
        rendered: sections.join("\n\n"),
    })
}

/// Candidate list read back from a rendered prompt.
pub fn parse_candidates(rendered: &str) -> Option<Vec<String>> {
    let line = rendered
        .lines()
        .find_map(|l| l.strip_prefix(CANDIDATES_PREFIX))?;
    Some(line.split(", ").map(str::to_string).collect())
}

/// Test query read back from a rendered prompt (the last `Q:` line).
pub fn parse_test_query(rendered: &str) -> Option<String> {
    rendered
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("Q: "))
        .map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn layout_with_one_demo() {
        let demo = Demonstration {
            question: query_text("apple", "has color"),
            answer: "red".into(),
            rationale: Some(rationale_text("apple", "has color", "red")),
        };
        let p = build_prompt(
            &PromptTemplate::default(),
            &names(&["red", "yellow"]),
            &[demo],
            "(banana, has color, ?)",
        )
        .unwrap();
        assert_eq!(p.rendered.matches("Q:").count(), 2);
        assert_eq!(p.rendered.matches(CANDIDATES_PREFIX).count(), 1);
        assert!(p.rendered.ends_with("A: "));
        assert!(!p.rendered.ends_with("A:  "));
        let expected = format!(
            "{DEFAULT_INSTRUCTION}\nCandidates: red, yellow\n\n\
             Q: (apple, has color, ?)\napple is connected to red via has color, so the answer is red.\nA: red\n\n\
             Q: (banana, has color, ?)\nA: "
        );
        assert_eq!(p.rendered, expected);
        assert_eq!(
            parse_candidates(&p.rendered).unwrap(),
            names(&["red", "yellow"])
        );
        assert_eq!(
            parse_test_query(&p.rendered).unwrap(),
            "(banana, has color, ?)"
        );
    }

    #[test]
    fn zero_shot_and_empty_candidates() {
        let p = build_prompt(&PromptTemplate::default(), &names(&["x"]), &[], "(a, b, ?)").unwrap();
        assert_eq!(p.rendered.split("\n\n").count(), 2);
        assert!(build_prompt(&PromptTemplate::default(), &[], &[], "q").is_err());
    }
}
