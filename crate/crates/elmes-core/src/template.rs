//! Prompt template rendering: `{name}` placeholders with dotted accessors.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("unclosed '{{' at offset {offset}")]
    Unbalanced { offset: usize },
    #[error("empty placeholder '{{}}' at offset {offset}")]
    EmptyPlaceholder { offset: usize },
    #[error("unbound placeholder '{{{name}}}' at offset {offset}")]
    Unbound { name: String, offset: usize },
    #[error("no dialogue available for '{{messages.as_dialog()}}' at offset {offset}")]
    NoDialog { offset: usize },
}

/// One resolvable slot recognized by the grammar. Anything between braces
/// that matches none of these is passed through as literal text.
#[derive(Debug, Clone, PartialEq)]
enum Slot<'a> {
    Var(&'a str),
    TaskVar(&'a str),
    Dialog,
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn classify(inner: &str) -> Option<Slot<'_>> {
    if inner == "messages.as_dialog()" {
        return Some(Slot::Dialog);
    }
    if let Some(name) = inner.strip_prefix("task.") {
        if is_identifier(name) {
            return Some(Slot::TaskVar(name));
        }
        return None;
    }
    if is_identifier(inner) {
        return Some(Slot::Var(inner));
    }
    None
}

/// Values available while rendering one template.
#[derive(Debug, Default, Clone)]
pub struct RenderContext<'a> {
    bindings: Option<&'a BTreeMap<String, String>>,
    dialog: Option<String>,
}

impl<'a> RenderContext<'a> {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_bindings(bindings: &'a BTreeMap<String, String>) -> Self {
        Self {
            bindings: Some(bindings),
            dialog: None,
        }
    }

    pub fn dialog(mut self, dialog: String) -> Self {
        self.dialog = Some(dialog);
        self
    }

    fn lookup(&self, name: &str) -> Option<&str> {
        self.bindings.and_then(|b| b.get(name)).map(String::as_str)
    }
}

/// Renders a transcript as one `speaker: content` line per message.
pub fn as_dialog<'a, I>(lines: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    lines
        .into_iter()
        .map(|(speaker, content)| format!("{speaker}: {content}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Checks placeholder well-formedness without rendering: every `{` is
/// balanced and no placeholder is empty.
pub fn validate(text: &str) -> Result<(), TemplateError> {
    walk(text, |_, _| Ok(String::new())).map(|_| ())
}

/// Renders one prompt template into a sendable message.
pub fn render_template(
    template: &crate::config::PromptTemplate,
    ctx: &RenderContext<'_>,
) -> Result<crate::config::Message, TemplateError> {
    Ok(crate::config::Message::new(
        template.role,
        render(&template.content, ctx)?,
    ))
}

/// Substitutes every recognized placeholder from the context. `{{` and `}}`
/// escape to literal braces; unrecognized brace contents pass through.
pub fn render(text: &str, ctx: &RenderContext<'_>) -> Result<String, TemplateError> {
    walk(text, |slot, offset| match slot {
        Slot::Var(name) | Slot::TaskVar(name) => {
            ctx.lookup(name)
                .map(str::to_owned)
                .ok_or_else(|| TemplateError::Unbound {
                    name: name.to_string(),
                    offset,
                })
        }
        Slot::Dialog => ctx.dialog.clone().ok_or(TemplateError::NoDialog { offset }),
    })
}

fn walk<F>(text: &str, mut resolve: F) -> Result<String, TemplateError>
where
    F: FnMut(Slot<'_>, usize) -> Result<String, TemplateError>,
{
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push('{');
                i += 2;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push('}');
                i += 2;
            }
            b'{' => {
                let rest = &text[i + 1..];
                let Some(close) = rest.find('}') else {
                    return Err(TemplateError::Unbalanced { offset: i });
                };
                let inner = &rest[..close];
                if inner.is_empty() {
                    return Err(TemplateError::EmptyPlaceholder { offset: i });
                }
                match classify(inner) {
                    Some(slot) => out.push_str(&resolve(slot, i)?),
                    None => {
                        // Not part of the grammar: emit verbatim.
                        out.push('{');
                        out.push_str(inner);
                        out.push('}');
                    }
                }
                i += inner.len() + 2;
            }
            _ => {
                let ch = text[i..].chars().next().expect("in-bounds char");
                out.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    Ok(out)
}
