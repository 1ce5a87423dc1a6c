//! Prompt templates with `{name}` placeholders and the system prompt
//! assembled from the kept prompt-engineering clauses.
//!
//! Placeholders are substituted in a single pass; substituted values are
//! never scanned again. A doubled brace (`{{`, `}}`) renders as a literal
//! brace. A `{` that does not open a well-formed placeholder is copied
//! through unchanged.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("no binding for placeholder `{0}`")]
    MissingBinding(String),
    #[error("final objective is empty")]
    EmptyObjective,
    #[error("template `{template}` must contain `{needle}`")]
    MissingPlaceholder { template: &'static str, needle: &'static str },
}

pub const REVIEWER_TEMPLATE: &str = "Based on the following analysis, provide your critique or agreement: {gemini_response}. Please collaborate with each other and try to reach an agreement as soon as possible. If you agree, please explicitly state 'I agree'. If you do not agree, please explicitly state 'I do not agree' first. In brackets, state the final objective at the start of your response.";

pub const REFINE_TEMPLATE: &str = "ChatGPT has provided the following critique: {chatgpt_response}. Please collaborate with each other and try to reach an agreement as soon as possible. If you agree, please refine your analysis. If you don't agree, please state why, and repeat your analysis.";

/// `{summarize_clause}` and `{format_suffix}` are filled from
/// [`SystemPromptFlags`].
pub const ROI_FORMAT_INSTRUCTION: &str = "Very important: {summarize_clause} clearly state the label (e.g., a) of the largest ROI identified in this exact format \"The final largest ROI is a\". Please replace 'a' with the actual result. This sentence must appear in the exact format{format_suffix}.";

pub const SYSTEM_BASE: &str = "You are an assistant operating a scanning electron microscope through function calls. Use the available functions to work towards the final objective.";

pub const EXP2_ANALYST_ROUND1: &str = "Tell me how many white particles are larger than 10 micrometers² in this photo. Use appropriate techniques to isolate the white particles and exclude irrelevant regions like the scale bar. Ensure particles at the bottom that may be intersecting are not included. Use the scale bar at the bottom for pixel to micrometer conversion and show me an annotated image that highlights the detected particles, along with the number. The detection should focus on particles over 10 micrometers² and avoid any false positives from the scale bar region.";

pub const EXP2_REVIEWER_META: &str = "Assume the role where you are talking to ChatGPT, so your answer needs to be directly addressed to ChatGPT. I'm going to tell you what prompt i gave ChatGPT and what it responded me with. Evaluate its answer and give it feedback so that it can improve. You can also improve the prompt to help ChatGPT give a better answer.\n\nPrompt for ChatGPT:\n\n{analyst_prompt}\n\nChatGPT's response: {analyst_response}";

pub const EXP2_ANALYST_ROUND2_PREFIX: &str = "See the feedback below and try the analysis again:\n\n";

pub const COLLABORATE_ASAP: &str =
    "Please collaborate with each other and try to reach an agreement as soon as possible.";
pub const SUMMARIZE_CLAUSE_CONCISE: &str = "Once the list-summarize function is called,";
pub const SUMMARIZE_CLAUSE_VERBOSE: &str =
    "Once the final objective has been achieved (after the list-summarize function is called),";
pub const EXACT_FORMAT_ONCE_SUFFIX: &str = ", exactly one time at the end";
pub const LABEL_IN_FINAL_IMAGE: &str = "Label can be found in the final image generated.";

pub const DEFAULT_OBJECTIVE: &str = "take a picture of the martensite phase with HFW of 80 microns and state the label of the largest ROI when the summarize function is called";

/// Prompt variants that were tried and dropped because accuracy did not
/// improve. They are only reachable by overriding the system base text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectedVariant {
    NeedleHint,
    RoundTracking,
}

impl RejectedVariant {
    pub fn text(self) -> &'static str {
        match self {
            RejectedVariant::NeedleHint => {
                "Information that will be helpful: Martensite phases consist of needle-like structures."
            }
            RejectedVariant::RoundTracking => "Keep track of which round of debate you are at, and in the last round, the largest ROI must be stated explicitly. Since there is a debate that occurs for each image analysis, you can get the final largest ROI from the last analysis provided by either ChatGPT and Gemini.",
        }
    }

    /// Returns `base` with the variant appended as an extra sentence.
    pub fn apply_to(self, base: &str) -> String {
        let mut out = String::from(base);
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(self.text());
        out
    }
}

/// Templates for every prompt the harnesses send.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplateSet {
    pub system_base: String,
    pub reviewer_template: String,
    pub refine_template: String,
    pub roi_format_instruction: String,
    pub exp2_analyst_round1: String,
    pub exp2_reviewer_meta: String,
    pub exp2_analyst_round2_prefix: String,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        Self {
            system_base: SYSTEM_BASE.into(),
            reviewer_template: REVIEWER_TEMPLATE.into(),
            refine_template: REFINE_TEMPLATE.into(),
            roi_format_instruction: ROI_FORMAT_INSTRUCTION.into(),
            exp2_analyst_round1: EXP2_ANALYST_ROUND1.into(),
            exp2_reviewer_meta: EXP2_REVIEWER_META.into(),
            exp2_analyst_round2_prefix: EXP2_ANALYST_ROUND2_PREFIX.into(),
        }
    }
}

impl PromptTemplateSet {
    pub fn validate(&self) -> Result<(), PromptError> {
        let checks: [(&'static str, &str, &'static str); 5] = [
            ("reviewer_template", &self.reviewer_template, "{gemini_response}"),
            ("refine_template", &self.refine_template, "{chatgpt_response}"),
            ("roi_format_instruction", &self.roi_format_instruction, "The final largest ROI is"),
            ("exp2_reviewer_meta", &self.exp2_reviewer_meta, "{analyst_prompt}"),
            ("exp2_reviewer_meta", &self.exp2_reviewer_meta, "{analyst_response}"),
        ];
        for (template, text, needle) in checks {
            if !text.contains(needle) {
                return Err(PromptError::MissingPlaceholder { template, needle });
            }
        }
        Ok(())
    }
}

/// Which kept prompt-engineering clauses go into the system prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemPromptFlags {
    pub collaborate_asap: bool,
    pub concise_summarize_clause: bool,
    pub exact_format_once_at_end: bool,
    pub append_final_objective: bool,
    pub label_in_final_image: bool,
}

impl Default for SystemPromptFlags {
    fn default() -> Self {
        Self {
            collaborate_asap: true,
            concise_summarize_clause: true,
            exact_format_once_at_end: true,
            append_final_objective: true,
            label_in_final_image: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalObjective {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hfw_microns: Option<f64>,
}

impl Default for FinalObjective {
    fn default() -> Self {
        Self { text: DEFAULT_OBJECTIVE.into(), hfw_microns: Some(80.0) }
    }
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn parse(template: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut literal_start = 0;
    let mut i = 0;
    let bytes = template.as_bytes();
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' if bytes.get(i + 1) == Some(&bytes[i]) => {
                pieces.push(Piece::Literal(&template[literal_start..i + 1]));
                i += 2;
                literal_start = i;
            }
            b'{' => {
                let rest = &template[i + 1..];
                let name_len = rest.find(|c: char| !is_name_char(c)).unwrap_or(rest.len());
                if name_len > 0 && rest[name_len..].starts_with('}') {
                    pieces.push(Piece::Literal(&template[literal_start..i]));
                    pieces.push(Piece::Placeholder(&rest[..name_len]));
                    i += name_len + 2;
                    literal_start = i;
                } else {
                    i += 1;
                }
            }
            _ => i += 1,
        }
    }
    pieces.push(Piece::Literal(&template[literal_start..]));
    pieces
}

/// Names of all placeholders in `template`, in order of appearance.
pub fn placeholders(template: &str) -> Vec<String> {
    parse(template)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Placeholder(name) => Some(name.to_string()),
            Piece::Literal(_) => None,
        })
        .collect()
}

/// Substitutes every `{name}` in `template`. Bindings that are never used
/// are reported through `log::warn!`.
pub fn render_template(template: &str, bindings: &BTreeMap<&str, &str>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut used = BTreeSet::new();
    for piece in parse(template) {
        match piece {
            Piece::Literal(s) => out.push_str(s),
            Piece::Placeholder(name) => {
                let value = bindings.get(name).ok_or_else(|| PromptError::MissingBinding(name.to_string()))?;
                used.insert(name);
                out.push_str(value);
            }
        }
    }
    for name in bindings.keys().filter(|k| !used.contains(*k)) {
        log::warn!("unused template binding `{name}`");
    }
    Ok(out)
}

fn render_one(template: &str, name: &str, value: &str) -> Result<String, PromptError> {
    if value.is_empty() {
        log::warn!("empty value substituted for `{name}`");
    }
    let mut bindings = BTreeMap::new();
    bindings.insert(name, value);
    render_template(template, &bindings)
}

pub fn build_reviewer_prompt(templates: &PromptTemplateSet, gemini_response: &str) -> Result<String, PromptError> {
    render_one(&templates.reviewer_template, "gemini_response", gemini_response)
}

pub fn build_refine_prompt(templates: &PromptTemplateSet, chatgpt_response: &str) -> Result<String, PromptError> {
    render_one(&templates.refine_template, "chatgpt_response", chatgpt_response)
}

/// Assembles the system prompt, one sentence group per line, in the fixed
/// order: base, collaboration, ROI format, label visibility, objective.
pub fn build_system_prompt(
    templates: &PromptTemplateSet,
    flags: &SystemPromptFlags,
    objective: &FinalObjective,
) -> Result<String, PromptError> {
    if objective.text.trim().is_empty() {
        return Err(PromptError::EmptyObjective);
    }
    let summarize_clause =
        if flags.concise_summarize_clause { SUMMARIZE_CLAUSE_CONCISE } else { SUMMARIZE_CLAUSE_VERBOSE };
    let format_suffix = if flags.exact_format_once_at_end { EXACT_FORMAT_ONCE_SUFFIX } else { "" };
    let mut bindings = BTreeMap::new();
    bindings.insert("summarize_clause", summarize_clause);
    bindings.insert("format_suffix", format_suffix);
    let roi = render_template(&templates.roi_format_instruction, &bindings)?;

    let mut lines: Vec<&str> = Vec::new();
    if !templates.system_base.is_empty() {
        lines.push(&templates.system_base);
    }
    if flags.collaborate_asap {
        lines.push(COLLABORATE_ASAP);
    }
    lines.push(&roi);
    if flags.label_in_final_image {
        lines.push(LABEL_IN_FINAL_IMAGE);
    }
    if flags.append_final_objective {
        lines.push(&objective.text);
    }
    Ok(lines.join("\n"))
}

/// Builds the critic prompt that wraps the analyst's first exchange.
pub fn build_exp2_reviewer_prompt(
    templates: &PromptTemplateSet,
    analyst_prompt: &str,
    analyst_response: &str,
) -> Result<String, PromptError> {
    let mut bindings = BTreeMap::new();
    bindings.insert("analyst_prompt", analyst_prompt);
    bindings.insert("analyst_response", analyst_response);
    render_template(&templates.exp2_reviewer_meta, &bindings)
}

pub fn build_exp2_round2_prompt(templates: &PromptTemplateSet, critique: &str) -> String {
    let mut out = templates.exp2_analyst_round2_prefix.clone();
    out.push_str(critique);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind<'a>(pairs: &[(&'a str, &'a str)]) -> BTreeMap<&'a str, &'a str> {
        pairs.iter().copied().collect()
    }

    fn count(hay: &str, needle: &str) -> usize {
        hay.matches(needle).count()
    }

    #[test]
    fn render_basic_cases() {
        let t = PromptTemplateSet::default();
        let out =
            render_template(&t.reviewer_template, &bind(&[("gemini_response", "Region a shows needles")])).unwrap();
        assert!(out.contains("agreement: Region a shows needles"));
        assert_eq!(render_template("{x}", &BTreeMap::new()), Err(PromptError::MissingBinding("x".into())));
        assert_eq!(render_template("plain text", &bind(&[("y", "z")])).unwrap(), "plain text");
    }

    #[test]
    fn braces_escape_and_stray_braces() {
        assert_eq!(render_template("{{x}} {x}", &bind(&[("x", "1")])).unwrap(), "{x} 1");
        assert_eq!(render_template("a { b } {not closed", &BTreeMap::new()).unwrap(), "a { b } {not closed");
        assert_eq!(placeholders("{a}{{b}}{c_1}"), ["a", "c_1"]);
    }

    #[test]
    fn reviewer_prompt_examples() {
        let t = PromptTemplateSet::default();
        let out = build_reviewer_prompt(&t, "needle-like region a").unwrap();
        assert!(out.contains("needle-like region a"));
        assert!(out.ends_with("In brackets, state the final objective at the start of your response."));
        let empty = build_reviewer_prompt(&t, "").unwrap();
        assert!(empty.contains("agreement: . Please"));
        let braces = build_reviewer_prompt(&t, "{gemini_response} {x}").unwrap();
        assert!(braces.contains("agreement: {gemini_response} {x}."));
    }

    #[test]
    fn refine_prompt_examples() {
        let t = PromptTemplateSet::default();
        let out = build_refine_prompt(&t, "C").unwrap();
        assert!(out.contains("following critique: C"));
        assert!(out.contains("If you don't agree, please state why, and repeat your analysis."));
        assert!(build_refine_prompt(&t, "").is_ok());
        let multi = build_refine_prompt(&t, "line one\nline two\n").unwrap();
        assert!(multi.contains("critique: line one\nline two\n."));
    }

    #[test]
    fn system_prompt_all_flags() {
        let t = PromptTemplateSet::default();
        let obj = FinalObjective::default();
        let out = build_system_prompt(&t, &SystemPromptFlags::default(), &obj).unwrap();
        assert_eq!(out.lines().last(), Some(obj.text.as_str()));
        for needle in [
            COLLABORATE_ASAP,
            SUMMARIZE_CLAUSE_CONCISE,
            "This sentence must appear in the exact format, exactly one time at the end.",
            LABEL_IN_FINAL_IMAGE,
            "The final largest ROI is",
        ] {
            assert_eq!(count(&out, needle), 1, "{needle}");
        }
    }

    #[test]
    fn system_prompt_flag_examples() {
        let t = PromptTemplateSet::default();
        let obj = FinalObjective::default();
        let flags = SystemPromptFlags { exact_format_once_at_end: false, ..Default::default() };
        let out = build_system_prompt(&t, &flags, &obj).unwrap();
        assert!(!out.contains("exactly one time at the end"));
        assert!(out.contains("The final largest ROI is"));
        let flags = SystemPromptFlags { label_in_final_image: false, ..Default::default() };
        assert!(!build_system_prompt(&t, &flags, &obj).unwrap().contains(LABEL_IN_FINAL_IMAGE));
        let flags = SystemPromptFlags { concise_summarize_clause: false, ..Default::default() };
        let out = build_system_prompt(&t, &flags, &obj).unwrap();
        assert!(out.contains(SUMMARIZE_CLAUSE_VERBOSE) && !out.contains(SUMMARIZE_CLAUSE_CONCISE));
        let empty = FinalObjective { text: "  ".into(), hfw_microns: None };
        assert_eq!(build_system_prompt(&t, &SystemPromptFlags::default(), &empty), Err(PromptError::EmptyObjective));
    }

    #[test]
    fn disabling_a_flag_changes_only_its_clause() {
        let t = PromptTemplateSet::default();
        let obj = FinalObjective::default();
        let all = build_system_prompt(&t, &SystemPromptFlags::default(), &obj).unwrap();
        let cases: [(SystemPromptFlags, &str, &str); 5] = [
            (
                SystemPromptFlags { collaborate_asap: false, ..Default::default() },
                &alloc::format!("{COLLABORATE_ASAP}\n"),
                "",
            ),
            (
                SystemPromptFlags { label_in_final_image: false, ..Default::default() },
                &alloc::format!("{LABEL_IN_FINAL_IMAGE}\n"),
                "",
            ),
            (
                SystemPromptFlags { append_final_objective: false, ..Default::default() },
                &alloc::format!("\n{}", obj.text),
                "",
            ),
            (SystemPromptFlags { exact_format_once_at_end: false, ..Default::default() }, EXACT_FORMAT_ONCE_SUFFIX, ""),
            (
                SystemPromptFlags { concise_summarize_clause: false, ..Default::default() },
                SUMMARIZE_CLAUSE_CONCISE,
                SUMMARIZE_CLAUSE_VERBOSE,
            ),
        ];
        for (flags, from, to) in cases {
            let out = build_system_prompt(&t, &flags, &obj).unwrap();
            assert_eq!(out, all.replacen(from, to, 1), "{flags:?}");
        }
    }

    #[test]
    fn rejected_variants_are_not_in_defaults() {
        let t = PromptTemplateSet::default();
        let out = build_system_prompt(&t, &SystemPromptFlags::default(), &FinalObjective::default()).unwrap();
        assert!(!out.contains("needle-like"));
        assert!(!out.contains("Keep track of which round"));
        let overridden = PromptTemplateSet { system_base: RejectedVariant::NeedleHint.apply_to(SYSTEM_BASE), ..t };
        let out = build_system_prompt(&overridden, &SystemPromptFlags::default(), &FinalObjective::default()).unwrap();
        assert!(out.contains("needle-like structures"));
    }

    #[test]
    fn template_set_validation() {
        assert!(PromptTemplateSet::default().validate().is_ok());
        let bad = PromptTemplateSet { refine_template: "no slot".into(), ..Default::default() };
        assert!(matches!(bad.validate(), Err(PromptError::MissingPlaceholder { template: "refine_template", .. })));
    }

    #[test]
    fn exp2_prompts() {
        let t = PromptTemplateSet::default();
        let out = build_exp2_reviewer_prompt(&t, EXP2_ANALYST_ROUND1, "I count 4.").unwrap();
        assert!(out.starts_with("Assume the role where you are talking to ChatGPT"));
        assert!(out.ends_with("ChatGPT's response: I count 4."));
        assert_eq!(
            build_exp2_round2_prompt(&t, "fix it"),
            "See the feedback below and try the analysis again:\n\nfix it"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn substitution_is_single_pass(value in "[{}a-z_ ]{0,30}") {
                let out = render_template("<{v}>", &bind(&[("v", &value)])).unwrap();
                prop_assert_eq!(out, alloc::format!("<{value}>"));
            }
        }
    }
}
