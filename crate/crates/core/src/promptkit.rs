//! Prompt rendering and response parsing for the prompting pathways.
//!
//! Rendering is byte-stable: the same space and slots always produce the
//! same prompt. Parsing is total over arbitrary strings: it returns either
//! a [`ParsedResponse`] or the single unparseable error, never panics, and
//! never sets a bit that does not correspond to a matched label token in
//! the raw text. Unparseable responses are scored all-negative by callers
//! so prompting and fine-tuned pathways are evaluated over identical
//! instance sets.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::labelspace::{LabelSpace, Violation};

/// Bundled prompt templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// Zero-shot video activity recognition; answers as a JSON list.
    VideoZero,
    /// Zero-shot discourse recognition; answers as a JSON object.
    DiscourseZero,
    /// Discourse recognition with the two bundled transcript exemplars.
    DiscourseFew,
}

/// Fillable parts of a prompt.
#[derive(Debug, Clone, Default)]
pub struct PromptSlots<'a> {
    /// Up to two preceding utterances, oldest first, already formatted as
    /// display lines.
    pub context: &'a [String],
    pub speaker: Option<&'a str>,
    pub sentence: Option<&'a str>,
}

#[derive(Debug, Deserialize)]
struct FewShotExample {
    context: Vec<String>,
    speaker: String,
    text: String,
    labels: Vec<String>,
}

fn label_catalog(space: &LabelSpace) -> String {
    space
        .labels()
        .iter()
        .map(|l| format!("- {}: {}", l.name, l.description))
        .collect::<Vec<_>>()
        .join("\n")
}

fn join_names(names: &[String]) -> String {
    match names.len() {
        0 => String::new(),
        1 => names[0].clone(),
        2 => format!("{} and {}", names[0], names[1]),
        _ => format!(
            "{} and {}",
            names[..names.len() - 1].join(", "),
            names[names.len() - 1]
        ),
    }
}

fn constraint_rules(space: &LabelSpace) -> String {
    let mut lines = Vec::new();
    for group in space.pair_groups() {
        lines.push(format!("{} are usually paired together.", join_names(group)));
    }
    for group in space.exclusion_groups() {
        lines.push(format!("{} are mutually exclusive.", join_names(group)));
    }
    if lines.is_empty() {
        lines.push("(no pairing or exclusion rules for this label space)".to_string());
    }
    lines.join("\n\n")
}

fn render_examples(space: &LabelSpace) -> String {
    let examples: Vec<FewShotExample> =
        serde_json::from_str(include_str!("../assets/prompts/fewshot_examples.json"))
            .expect("bundled few-shot examples are valid");
    let mut out = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let mut vector = vec![0u8; space.len()];
        for name in &ex.labels {
            if let Some(idx) = space.index_of(name) {
                vector[idx] = 1;
            }
        }
        out.push(format!(
            "### Example {}:\n\n## Context:\n\n{}\n\n## Speaker:\n\n{}\n\n## Transcript excerpt:\n\n{}\n\n## Result:\n\n{}",
            i + 1,
            ex.context.join("\n\n"),
            ex.speaker,
            ex.text,
            to_label_object_json(&vector, space).expect("vector sized to space"),
        ));
    }
    out.join("\n\n")
}

/// Renders a prompt for the given label space and slots. Byte-stable for
/// identical inputs.
pub fn render_prompt(kind: PromptKind, space: &LabelSpace, slots: &PromptSlots<'_>) -> Result<String> {
    let template = match kind {
        PromptKind::VideoZero => include_str!("../assets/prompts/video_zero.txt"),
        PromptKind::DiscourseZero => include_str!("../assets/prompts/discourse_zero.txt"),
        PromptKind::DiscourseFew => include_str!("../assets/prompts/discourse_few.txt"),
    };
    let mut out = template.to_string();
    out = out.replace("{{label_count}}", &space.len().to_string());
    out = out.replace("{{label_catalog}}", &label_catalog(space));
    if matches!(kind, PromptKind::DiscourseZero | PromptKind::DiscourseFew) {
        let speaker = slots.speaker.ok_or(Error::MissingSlot("speaker"))?;
        let sentence = slots.sentence.ok_or(Error::MissingSlot("sentence"))?;
        let context = if slots.context.is_empty() {
            "(no preceding utterances)".to_string()
        } else {
            slots.context.join("\n\n")
        };
        out = out.replace("{{constraint_rules}}", &constraint_rules(space));
        out = out.replace("{{context}}", &context);
        out = out.replace("{{speaker}}", speaker);
        out = out.replace("{{current}}", sentence);
    }
    if matches!(kind, PromptKind::DiscourseFew) {
        out = out.replace("{{examples}}", &render_examples(space));
    }
    Ok(out)
}

/// A model response reduced to a multi-hot vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub vector: Vec<u8>,
    pub repairs: Vec<String>,
    pub violations: Vec<Violation>,
    pub raw: String,
}

/// Canonical response form for the list pathway: a JSON array of the active
/// label names in space order.
pub fn to_label_list_json(vector: &[u8], space: &LabelSpace) -> Result<String> {
    if vector.len() != space.len() {
        return Err(Error::LengthMismatch {
            expected: space.len(),
            got: vector.len(),
        });
    }
    let active: Vec<&str> = space
        .names()
        .enumerate()
        .filter(|(j, _)| vector[*j] != 0)
        .map(|(_, n)| n)
        .collect();
    Ok(serde_json::to_string(&active)?)
}

/// Canonical response form for the object pathway: every label name mapped
/// to 0/1, in space order.
pub fn to_label_object_json(vector: &[u8], space: &LabelSpace) -> Result<String> {
    if vector.len() != space.len() {
        return Err(Error::LengthMismatch {
            expected: space.len(),
            got: vector.len(),
        });
    }
    let mut out = String::from("{");
    for (j, name) in space.names().enumerate() {
        if j > 0 {
            out.push_str(", ");
        }
        out.push_str(&serde_json::to_string(name)?);
        out.push_str(": ");
        out.push(if vector[j] != 0 { '1' } else { '0' });
    }
    out.push('}');
    Ok(out)
}

fn normalize_name(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.chars() {
        if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(c.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

/// Replaces markdown code-fence markers, keeping fenced content.
fn strip_code_fences(text: &str) -> (String, bool) {
    if !text.contains("```") {
        return (text.to_string(), false);
    }
    let mut out = text.replace("```json", " ");
    out = out.replace("```", " ");
    (out, true)
}

/// Byte spans (inclusive delimiters) of balanced `open..close` candidates,
/// respecting JSON string literals and escapes.
fn balanced_spans(text: &str, open: char, close: char) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start_positions = Vec::new();
    for (i, c) in text.char_indices() {
        if c == open {
            start_positions.push(i);
        }
    }
    for &start in &start_positions {
        let mut depth = 0i64;
        let mut in_string = false;
        let mut escaped = false;
        let mut i = start;
        while i < bytes.len() {
            let b = bytes[i] as char;
            if in_string {
                if escaped {
                    escaped = false;
                } else if b == '\\' {
                    escaped = true;
                } else if b == '"' {
                    in_string = false;
                }
            } else if b == '"' {
                in_string = true;
            } else if b == open {
                depth += 1;
            } else if b == close {
                depth -= 1;
                if depth == 0 {
                    spans.push((start, i));
                    break;
                }
                if depth < 0 {
                    break;
                }
            }
            i += 1;
        }
    }
    spans
}

fn first_json_value(text: &str, open: char, close: char, want_array: bool) -> Option<Value> {
    for (a, b) in balanced_spans(text, open, close) {
        let candidate = &text[a..=b];
        if let Ok(value) = serde_json::from_str::<Value>(candidate) {
            let matches = if want_array {
                value.is_array()
            } else {
                value.is_object()
            };
            if matches {
                return Some(value);
            }
        }
    }
    None
}

/// Matches a free-form name to a label index: exact first, then normalized.
/// Returns the index and whether normalization was needed.
fn match_label(space: &LabelSpace, raw: &str) -> Option<(usize, bool)> {
    if let Some(idx) = space.index_of(raw) {
        return Some((idx, false));
    }
    let wanted = normalize_name(raw);
    if wanted.is_empty() {
        return None;
    }
    let mut found = None;
    for (idx, name) in space.names().enumerate() {
        if normalize_name(name) == wanted {
            if found.is_some() {
                return None; // ambiguous after normalization
            }
            found = Some(idx);
        }
    }
    found.map(|idx| (idx, true))
}

/// Parses a JSON-list response ("selected label names") into a multi-hot
/// vector. Repair pipeline: strip code fences, extract the first array
/// literal, exact-match names, then a case/punctuation-normalized fallback.
/// Unknown names are recorded and ignored; an empty array is a valid
/// all-negative answer.
pub fn parse_label_list(raw: &str, space: &LabelSpace) -> Result<ParsedResponse> {
    let mut repairs = Vec::new();
    let (text, stripped) = strip_code_fences(raw);
    if stripped {
        repairs.push("stripped code fences".to_string());
    }
    let value = first_json_value(&text, '[', ']', true)
        .ok_or(Error::Unparseable { expected: "array" })?;
    let mut vector = vec![0u8; space.len()];
    for element in value.as_array().expect("checked array") {
        let Some(name) = element.as_str() else {
            repairs.push(format!("ignored non-string element {element}"));
            continue;
        };
        match match_label(space, name) {
            Some((idx, false)) => vector[idx] = 1,
            Some((idx, true)) => {
                vector[idx] = 1;
                repairs.push(format!("normalized {name:?}"));
            }
            None => repairs.push(format!("unknown label {name:?}")),
        }
    }
    let violations = space.check_constraints(&vector)?;
    Ok(ParsedResponse {
        vector,
        repairs,
        violations,
        raw: raw.to_string(),
    })
}

fn coerce_binary(value: &Value) -> Option<u8> {
    match value {
        Value::Bool(b) => Some(u8::from(*b)),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                match i {
                    0 => Some(0),
                    1 => Some(1),
                    _ => None,
                }
            } else {
                match n.as_f64() {
                    Some(f) if f == 0.0 => Some(0),
                    Some(f) if f == 1.0 => Some(1),
                    _ => None,
                }
            }
        }
        Value::String(s) => match s.as_str() {
            "0" => Some(0),
            "1" => Some(1),
            _ => None,
        },
        _ => None,
    }
}

/// Parses a JSON-object response (label name -> 0/1) into a multi-hot
/// vector. Values are coerced from {0, 1, true, false, "0", "1"}; missing
/// keys default to 0 with a note; extra keys are ignored with a note. The
/// constraint check is attached to the result.
pub fn parse_label_object(raw: &str, space: &LabelSpace) -> Result<ParsedResponse> {
    let mut repairs = Vec::new();
    let (text, stripped) = strip_code_fences(raw);
    if stripped {
        repairs.push("stripped code fences".to_string());
    }
    let value = first_json_value(&text, '{', '}', false)
        .ok_or(Error::Unparseable { expected: "object" })?;
    let mut vector = vec![0u8; space.len()];
    let mut seen = vec![false; space.len()];
    for (key, raw_value) in value.as_object().expect("checked object") {
        let matched = match match_label(space, key) {
            Some((idx, false)) => Some(idx),
            Some((idx, true)) => {
                repairs.push(format!("normalized key {key:?}"));
                Some(idx)
            }
            None => {
                repairs.push(format!("ignored extra key {key:?}"));
                None
            }
        };
        if let Some(idx) = matched {
            seen[idx] = true;
            match coerce_binary(raw_value) {
                Some(bit) => vector[idx] = bit,
                None => repairs.push(format!(
                    "uncoercible value {raw_value} for key {key:?}, treated as 0"
                )),
            }
        }
    }
    let missing: Vec<&str> = space
        .names()
        .enumerate()
        .filter(|(j, _)| !seen[*j])
        .map(|(_, n)| n)
        .collect();
    if !missing.is_empty() {
        repairs.push(format!("missing keys defaulted to 0: {}", missing.join(", ")));
    }
    let violations = space.check_constraints(&vector)?;
    Ok(ParsedResponse {
        vector,
        repairs,
        violations,
        raw: raw.to_string(),
    })
}

/// Decoding parameters passed through the generation-provider contract.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecodingParams {
    pub greedy: bool,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            greedy: true,
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub prompt: String,
    pub params: DecodingParams,
}

#[derive(Debug, Clone)]
pub struct GenerationResponse {
    pub text: String,
}

/// A text-generation provider. Implementations may call local processes or
/// network endpoints; the toolkit never embeds a specific model.
pub trait TextGenerator: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse>;
}

/// Replays a fixed response list in request order. Used for evaluation
/// harnesses and tests.
pub struct ScriptedGenerator {
    id: String,
    responses: Vec<String>,
    cursor: AtomicUsize,
}

impl ScriptedGenerator {
    pub fn new(id: impl Into<String>, responses: Vec<String>) -> Self {
        ScriptedGenerator {
            id: id.into(),
            responses,
            cursor: AtomicUsize::new(0),
        }
    }
}

impl TextGenerator for ScriptedGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, _request: &GenerationRequest) -> Result<GenerationResponse> {
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        self.responses
            .get(i)
            .map(|text| GenerationResponse { text: text.clone() })
            .ok_or_else(|| {
                Error::invalid(format!(
                    "scripted generator {} exhausted after {} responses",
                    self.id,
                    self.responses.len()
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelspace::LabelSpace;

    #[test]
    fn video_prompt_contains_every_label_exactly_once_in_catalog() {
        let space = LabelSpace::bundled_activity();
        let prompt = render_prompt(PromptKind::VideoZero, &space, &PromptSlots::default()).unwrap();
        for label in space.labels() {
            let needle = format!("- {}:", label.name);
            assert_eq!(
                prompt.matches(&needle).count(),
                1,
                "label {:?} should appear once in the catalog",
                label.name
            );
        }
    }

    #[test]
    fn discourse_prompt_lays_out_context_then_speaker_then_excerpt() {
        let space = LabelSpace::bundled_discourse();
        let context = vec![
            "Teacher 1 (0:05): What is three times four?".to_string(),
            "Student 2 (0:09): Twelve.".to_string(),
        ];
        let slots = PromptSlots {
            context: &context,
            speaker: Some("Teacher 1"),
            sentence: Some("Teacher 1 (0:11): How did you get twelve?"),
        };
        let prompt = render_prompt(PromptKind::DiscourseZero, &space, &slots).unwrap();
        let ctx_pos = prompt.find("## Context:").unwrap();
        let first = prompt.find("What is three times four").unwrap();
        let second = prompt.find("Twelve.").unwrap();
        let speaker_pos = prompt.find("## Speaker:").unwrap();
        assert!(ctx_pos < first && first < second && second < speaker_pos);
        assert!(prompt.contains("mutually exclusive"));
        assert!(prompt.contains("usually paired together"));
    }

    #[test]
    fn rendering_is_byte_stable() {
        let space = LabelSpace::bundled_discourse();
        let context = vec!["a".to_string()];
        let slots = PromptSlots {
            context: &context,
            speaker: Some("Teacher"),
            sentence: Some("b"),
        };
        let a = render_prompt(PromptKind::DiscourseFew, &space, &slots).unwrap();
        let b = render_prompt(PromptKind::DiscourseFew, &space, &slots).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn few_shot_prompt_embeds_both_bundled_exemplars() {
        let space = LabelSpace::bundled_discourse();
        let context = vec![];
        let slots = PromptSlots {
            context: &context,
            speaker: Some("Teacher"),
            sentence: Some("x"),
        };
        let prompt = render_prompt(PromptKind::DiscourseFew, &space, &slots).unwrap();
        assert!(prompt.contains("### Example 1:"));
        assert!(prompt.contains("### Example 2:"));
        assert!(prompt.contains("Greedy? Why do you say greedy?"));
        assert!(prompt.contains("10 plus seven is 17"));
    }

    #[test]
    fn missing_slot_is_rejected() {
        let space = LabelSpace::bundled_discourse();
        let slots = PromptSlots {
            context: &[],
            speaker: None,
            sentence: Some("x"),
        };
        assert!(matches!(
            render_prompt(PromptKind::DiscourseZero, &space, &slots),
            Err(Error::MissingSlot("speaker"))
        ));
    }

    #[test]
    fn list_parse_sets_bits_for_exact_names() {
        let space = LabelSpace::bundled_activity();
        let parsed =
            parse_label_list(r#"["Teacher standing", "Transition"]"#, &space).unwrap();
        assert_eq!(parsed.vector.iter().map(|v| u32::from(*v)).sum::<u32>(), 2);
        assert!(parsed.repairs.is_empty());
        assert_eq!(parsed.vector[space.index_of("Transition").unwrap()], 1);
    }

    #[test]
    fn fenced_response_is_repaired_with_a_note() {
        let space = LabelSpace::bundled_activity();
        let parsed = parse_label_list(
            "```json\n[\"Teacher standing\"]\n```",
            &space,
        )
        .unwrap();
        assert_eq!(parsed.vector.iter().map(|v| u32::from(*v)).sum::<u32>(), 1);
        assert!(parsed.repairs.iter().any(|r| r.contains("code fences")));
    }

    #[test]
    fn unknown_names_are_ignored_with_notes() {
        let space = LabelSpace::bundled_activity();
        let parsed = parse_label_list(r#"["Teacher flying"]"#, &space).unwrap();
        assert!(parsed.vector.iter().all(|v| *v == 0));
        assert!(parsed.repairs.iter().any(|r| r.contains("Teacher flying")));
    }

    #[test]
    fn empty_array_is_a_valid_zero_vector() {
        let space = LabelSpace::bundled_activity();
        let parsed = parse_label_list("the answer is []", &space).unwrap();
        assert!(parsed.vector.iter().all(|v| *v == 0));
    }

    #[test]
    fn no_array_is_the_single_unparseable_error() {
        let space = LabelSpace::bundled_activity();
        assert!(matches!(
            parse_label_list("no structured output here", &space),
            Err(Error::Unparseable { expected: "array" })
        ));
    }

    #[test]
    fn normalized_fallback_matches_with_note() {
        let space = LabelSpace::bundled_activity();
        let parsed = parse_label_list(r#"["teacher-standing"]"#, &space).unwrap();
        assert_eq!(
            parsed.vector[space.index_of("Teacher standing").unwrap()],
            1
        );
        assert!(parsed.repairs.iter().any(|r| r.contains("normalized")));
    }

    #[test]
    fn object_parse_handles_missing_and_extra_keys() {
        let space = LabelSpace::bundled_discourse();
        let raw = r#"{"Feedback Affirming": 1, "Made Up Key": 1, "Uptake Building": "1"}"#;
        let parsed = parse_label_object(raw, &space).unwrap();
        assert_eq!(parsed.vector[space.index_of("Feedback Affirming").unwrap()], 1);
        assert_eq!(parsed.vector[space.index_of("Uptake Building").unwrap()], 1);
        assert!(parsed.repairs.iter().any(|r| r.contains("Made Up Key")));
        assert!(parsed.repairs.iter().any(|r| r.contains("missing keys")));
    }

    #[test]
    fn object_parse_attaches_exclusion_violations() {
        let space = LabelSpace::bundled_discourse();
        let raw = r#"{"Questions Closed-Ended": 1, "Questions Open-Ended": true}"#;
        let parsed = parse_label_object(raw, &space).unwrap();
        assert_eq!(
            parsed
                .violations
                .iter()
                .filter(|v| !v.is_advisory())
                .count(),
            1
        );
    }

    #[test]
    fn uncoercible_values_default_to_zero_with_note() {
        let space = LabelSpace::bundled_discourse();
        let raw = r#"{"Feedback Affirming": 0.7}"#;
        let parsed = parse_label_object(raw, &space).unwrap();
        assert_eq!(parsed.vector[space.index_of("Feedback Affirming").unwrap()], 0);
        assert!(parsed.repairs.iter().any(|r| r.contains("uncoercible")));
    }

    #[test]
    fn list_round_trip_is_identity() {
        let space = LabelSpace::bundled_activity();
        let mut vector = vec![0u8; space.len()];
        vector[0] = 1;
        vector[7] = 1;
        vector[23] = 1;
        let rendered = to_label_list_json(&vector, &space).unwrap();
        let parsed = parse_label_list(&rendered, &space).unwrap();
        assert_eq!(parsed.vector, vector);
        assert!(parsed.repairs.is_empty());
    }

    #[test]
    fn object_round_trip_is_identity() {
        let space = LabelSpace::bundled_discourse();
        let mut vector = vec![0u8; space.len()];
        vector[2] = 1;
        vector[11] = 1;
        let rendered = to_label_object_json(&vector, &space).unwrap();
        let parsed = parse_label_object(&rendered, &space).unwrap();
        assert_eq!(parsed.vector, vector);
    }

    #[test]
    fn nested_brackets_inside_strings_do_not_confuse_the_scanner() {
        let space = LabelSpace::bundled_activity();
        let raw = r#"noise ["Teacher standing", "odd ] name"] trailing"#;
        let parsed = parse_label_list(raw, &space).unwrap();
        assert_eq!(parsed.vector.iter().map(|v| u32::from(*v)).sum::<u32>(), 1);
    }

    #[test]
    fn scripted_generator_replays_in_order_then_errors() {
        let generator = ScriptedGenerator::new("s", vec!["a".into(), "b".into()]);
        let req = GenerationRequest {
            prompt: "p".into(),
            params: DecodingParams::default(),
        };
        assert_eq!(generator.generate(&req).unwrap().text, "a");
        assert_eq!(generator.generate(&req).unwrap().text, "b");
        assert!(generator.generate(&req).is_err());
    }
}
