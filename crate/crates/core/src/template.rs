//! Minimal logic-less template syntax used by prompt files.
//!
//! `{{name}}` substitutes a variable, `{{#flag}}...{{/flag}}` keeps its body
//! only when the flag is set and `{{^flag}}...{{/flag}}` only when it is not.
//! Substituted values are never re-parsed.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unterminated tag at byte {0}")]
    Unterminated(usize),
    #[error("unexpected closing tag {{{{/{name}}}}} at byte {at}")]
    UnexpectedClose { name: String, at: usize },
    #[error("section {{{{#{0}}}}} is never closed")]
    UnclosedSection(String),
    #[error("unknown variable {{{{{0}}}}}")]
    UnknownVariable(String),
    #[error("unknown section {{{{#{0}}}}}")]
    UnknownSection(String),
    #[error("template does not reference required variable {{{{{0}}}}}")]
    MissingVariable(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Text(String),
    Var(String),
    Section {
        name: String,
        inverted: bool,
        body: Vec<Node>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Template {
    nodes: Vec<Node>,
}

#[derive(Debug, Default)]
pub(crate) struct Context<'a> {
    vars: HashMap<&'a str, &'a str>,
    flags: HashSet<&'a str>,
}

impl<'a> Context<'a> {
    pub fn var(mut self, name: &'a str, value: &'a str) -> Self {
        self.vars.insert(name, value);
        self
    }

    pub fn flag(mut self, name: &'a str, on: bool) -> Self {
        if on {
            self.flags.insert(name);
        }
        self
    }
}

impl Template {
    pub fn parse(source: &str) -> Result<Self, TemplateError> {
        // stack of (section name, inverted, nodes collected so far)
        let mut stack: Vec<(String, bool, Vec<Node>)> = vec![(String::new(), false, Vec::new())];
        let mut rest = source;
        let mut offset = 0;
        while let Some(open) = rest.find("{{") {
            if open > 0 {
                push_text(&mut stack.last_mut().unwrap().2, &rest[..open]);
            }
            let after = &rest[open + 2..];
            let close = after
                .find("}}")
                .ok_or(TemplateError::Unterminated(offset + open))?;
            let tag = after[..close].trim();
            let at = offset + open;
            if let Some(name) = tag.strip_prefix('#') {
                stack.push((name.trim().to_string(), false, Vec::new()));
            } else if let Some(name) = tag.strip_prefix('^') {
                stack.push((name.trim().to_string(), true, Vec::new()));
            } else if let Some(name) = tag.strip_prefix('/') {
                let name = name.trim();
                if stack.len() < 2 || stack.last().unwrap().0 != name {
                    return Err(TemplateError::UnexpectedClose {
                        name: name.to_string(),
                        at,
                    });
                }
                let (name, inverted, body) = stack.pop().unwrap();
                stack
                    .last_mut()
                    .unwrap()
                    .2
                    .push(Node::Section { name, inverted, body });
            } else {
                stack.last_mut().unwrap().2.push(Node::Var(tag.to_string()));
            }
            let consumed = open + 2 + close + 2;
            rest = &rest[consumed..];
            offset += consumed;
        }
        if !rest.is_empty() {
            push_text(&mut stack.last_mut().unwrap().2, rest);
        }
        if stack.len() > 1 {
            return Err(TemplateError::UnclosedSection(stack.pop().unwrap().0));
        }
        Ok(Template {
            nodes: stack.pop().unwrap().2,
        })
    }

    /// Checks every tag against the allowed names and that each required
    /// variable appears at least once.
    pub fn check_names(
        &self,
        variables: &[&str],
        sections: &[&str],
        required: &[&str],
    ) -> Result<(), TemplateError> {
        let mut seen = HashSet::new();
        check_nodes(&self.nodes, variables, sections, &mut seen)?;
        for name in required {
            if !seen.contains(*name) {
                return Err(TemplateError::MissingVariable(name.to_string()));
            }
        }
        Ok(())
    }

    pub fn render(&self, ctx: &Context<'_>) -> Result<String, TemplateError> {
        let mut out = String::new();
        render_nodes(&self.nodes, ctx, &mut out)?;
        Ok(out)
    }
}

fn push_text(nodes: &mut Vec<Node>, text: &str) {
    if let Some(Node::Text(prev)) = nodes.last_mut() {
        prev.push_str(text);
    } else {
        nodes.push(Node::Text(text.to_string()));
    }
}

fn check_nodes(
    nodes: &[Node],
    variables: &[&str],
    sections: &[&str],
    seen: &mut HashSet<String>,
) -> Result<(), TemplateError> {
    for node in nodes {
        match node {
            Node::Text(_) => {}
            Node::Var(name) => {
                if !variables.contains(&name.as_str()) {
                    return Err(TemplateError::UnknownVariable(name.clone()));
                }
                seen.insert(name.clone());
            }
            Node::Section { name, body, .. } => {
                if !sections.contains(&name.as_str()) {
                    return Err(TemplateError::UnknownSection(name.clone()));
                }
                check_nodes(body, variables, sections, seen)?;
            }
        }
    }
    Ok(())
}

fn render_nodes(nodes: &[Node], ctx: &Context<'_>, out: &mut String) -> Result<(), TemplateError> {
    for node in nodes {
        match node {
            Node::Text(text) => out.push_str(text),
            Node::Var(name) => {
                let value = ctx
                    .vars
                    .get(name.as_str())
                    .ok_or_else(|| TemplateError::UnknownVariable(name.clone()))?;
                out.push_str(value);
            }
            Node::Section {
                name,
                inverted,
                body,
            } => {
                if ctx.flags.contains(name.as_str()) != *inverted {
                    render_nodes(body, ctx, out)?;
                }
            }
        }
    }
    Ok(())
}

/// Splits a template file into its body, dropping the `#` header lines that
/// precede a `---` separator and one trailing newline.
pub(crate) fn template_body(file: &str) -> &str {
    let body = match file.find("\n---\n") {
        Some(pos) if file[..pos].lines().all(|l| l.starts_with('#') || l.is_empty()) => {
            &file[pos + 5..]
        }
        _ => file,
    };
    body.strip_suffix('\n').unwrap_or(body)
}
