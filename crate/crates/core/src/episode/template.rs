use crate::error::{Error, Result};

pub const ANNOTATION_MARKER: &str = "{</annotations>}";
pub const PROMPT_MARKER: &str = "{</visual prompts>}";

/// Instruction text with placeholder markers for the pixel-aware and
/// prompt-aware segments. The `refer to` clause only lists the markers whose
/// segment is present and disappears entirely when neither is.
pub fn render_template(instruction: &str, has_annotation: bool, has_prompts: bool) -> Result<String> {
    let instruction = instruction.trim();
    if instruction.is_empty() {
        return Err(Error::Validation("instruction is empty".into()));
    }
    let mut out = format!("What should the robot do to {instruction}");
    let markers: Vec<&str> = [(has_annotation, ANNOTATION_MARKER), (has_prompts, PROMPT_MARKER)]
        .into_iter()
        .filter_map(|(on, m)| on.then_some(m))
        .collect();
    if !markers.is_empty() {
        out.push_str(", refer to ");
        out.push_str(&markers.join(" "));
    }
    Ok(out)
}
