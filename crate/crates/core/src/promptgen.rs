//! Prompt construction for the baseline, marked, comparative and name-only conditions.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EssayRecord, Variant, BASELINE_ATTRIBUTE};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("variant '{0}' requires an attribute")]
    MissingAttribute(Variant),
    #[error("attribute '{0}' has no comparative descriptor")]
    NoComparative(String),
    #[error("named prompts are built with build_name_prompt")]
    NamedVariant,
    #[error("student name must be non-empty")]
    EmptyName,
    #[error("invalid prompt config: {0}")]
    InvalidConfig(String),
    #[error("failed to read {path}: {message}")]
    Read { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeCategory {
    Needs,
    Identity,
    SocioPsychological,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub category: AttributeCategory,
    pub marked_descriptor: String,
    /// Absent when the attribute is contrasted against the baseline condition.
    #[serde(default)]
    pub comparative_descriptor: Option<String>,
}

impl AttributeSpec {
    pub fn has_comparative(&self) -> bool {
        self.comparative_descriptor.is_some()
    }

    /// The variant whose corpus plays the contrast role for this attribute.
    pub fn contrast_variant(&self) -> Variant {
        if self.has_comparative() {
            Variant::Comparative
        } else {
            Variant::Baseline
        }
    }

    /// Attribute label carried by documents of the contrast corpus.
    pub fn contrast_attribute(&self) -> &str {
        if self.has_comparative() {
            &self.name
        } else {
            BASELINE_ATTRIBUTE
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameSpec {
    pub name: String,
    pub race_category: String,
    pub gender_category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub id: String,
    pub text: String,
}

fn default_name_template() -> String {
    "The student's name is {name}.".into()
}

/// Fixed prompt text shared by every condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Role and task instruction; descriptors are appended to it.
    pub baseline_prompt: String,
    /// Output-format instruction placed after the instruction block.
    #[serde(default)]
    pub output_instruction: String,
    /// `{name}` is substituted.
    #[serde(default = "default_name_template")]
    pub name_template: String,
}

/// The attributes config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    #[serde(flatten)]
    pub template: PromptTemplate,
    #[serde(default)]
    pub assignments: Vec<Assignment>,
    #[serde(default)]
    pub attributes: Vec<AttributeSpec>,
}

impl PromptConfig {
    pub fn from_toml(src: &str) -> Result<Self, PromptError> {
        let cfg: PromptConfig =
            toml::from_str(src).map_err(|e| PromptError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let src = std::fs::read_to_string(path).map_err(|e| PromptError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&src)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.template.baseline_prompt.trim().is_empty() {
            return Err(PromptError::InvalidConfig(
                "baseline_prompt is empty".into(),
            ));
        }
        let mut names = BTreeSet::new();
        for a in &self.attributes {
            if !names.insert(a.name.as_str()) {
                return Err(PromptError::InvalidConfig(format!(
                    "attribute '{}' defined twice",
                    a.name
                )));
            }
            if a.name == BASELINE_ATTRIBUTE {
                return Err(PromptError::InvalidConfig(
                    "'baseline' is reserved for the baseline condition".into(),
                ));
            }
            if a.marked_descriptor.trim().is_empty() {
                return Err(PromptError::InvalidConfig(format!(
                    "attribute '{}' has an empty marked_descriptor",
                    a.name
                )));
            }
        }
        let mut ids = BTreeSet::new();
        for a in &self.assignments {
            if !ids.insert(a.id.as_str()) {
                return Err(PromptError::InvalidConfig(format!(
                    "assignment '{}' defined twice",
                    a.id
                )));
            }
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn assignment_text(&self, id: &str) -> Option<&str> {
        self.assignments
            .iter()
            .find(|a| a.id == id)
            .map(|a| a.text.as_str())
    }
}

/// The names config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameRegistry {
    pub race_categories: Vec<String>,
    pub gender_categories: Vec<String>,
    /// Reference levels for the name-category dummies.
    pub reference_race: String,
    pub reference_gender: String,
    pub names: Vec<NameSpec>,
}

impl NameRegistry {
    pub fn from_toml(src: &str) -> Result<Self, PromptError> {
        let reg: NameRegistry =
            toml::from_str(src).map_err(|e| PromptError::InvalidConfig(e.to_string()))?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let src = std::fs::read_to_string(path).map_err(|e| PromptError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&src)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let bad = |what: &str, v: &str| {
            Err(PromptError::InvalidConfig(format!(
                "{what} '{v}' is not a configured category"
            )))
        };
        if !self.race_categories.contains(&self.reference_race) {
            return bad("reference_race", &self.reference_race);
        }
        if !self.gender_categories.contains(&self.reference_gender) {
            return bad("reference_gender", &self.reference_gender);
        }
        let mut seen = BTreeSet::new();
        for n in &self.names {
            if n.name.trim().is_empty() {
                return Err(PromptError::EmptyName);
            }
            if !seen.insert(n.name.as_str()) {
                return Err(PromptError::InvalidConfig(format!(
                    "name '{}' listed twice",
                    n.name
                )));
            }
            if !self.race_categories.contains(&n.race_category) {
                return bad("race_category", &n.race_category);
            }
            if !self.gender_categories.contains(&n.gender_category) {
                return bad("gender_category", &n.gender_category);
            }
        }
        Ok(())
    }

    pub fn resolve(&self, name: &str) -> Option<&NameSpec> {
        self.names.iter().find(|n| n.name == name)
    }
}

const WRITING_PROMPT_HEADER: &str = "\n\nWriting prompt:\n";

fn assemble(
    template: &PromptTemplate,
    appended: Option<&str>,
    assignment: &str,
    essay: &str,
) -> String {
    let mut out = template.baseline_prompt.trim_end().to_string();
    if let Some(sentence) = appended {
        out.push(' ');
        out.push_str(sentence.trim());
    }
    if !template.output_instruction.trim().is_empty() {
        out.push_str("\n\n");
        out.push_str(template.output_instruction.trim());
    }
    out.push_str(WRITING_PROMPT_HEADER);
    out.push_str("\"\"\"");
    out.push_str(assignment.trim());
    out.push_str("\"\"\"\n\nStudent writing:\n\"\"\"");
    out.push_str(essay.trim());
    out.push_str("\"\"\"");
    out
}

/// Splits a built prompt into the instruction block and the quoted material.
pub fn split_prompt(prompt: &str) -> (&str, &str) {
    match prompt.find(WRITING_PROMPT_HEADER) {
        Some(i) => (&prompt[..i], prompt[i..].trim_start()),
        None => (prompt, ""),
    }
}

pub fn build_prompt(
    template: &PromptTemplate,
    essay: &EssayRecord,
    assignment_text: &str,
    attribute: Option<&AttributeSpec>,
    variant: Variant,
) -> Result<String, PromptError> {
    let descriptor = match variant {
        Variant::Baseline => None,
        Variant::Marked => Some(
            attribute
                .ok_or(PromptError::MissingAttribute(variant))?
                .marked_descriptor
                .as_str(),
        ),
        Variant::Comparative => {
            let attr = attribute.ok_or(PromptError::MissingAttribute(variant))?;
            Some(
                attr.comparative_descriptor
                    .as_deref()
                    .ok_or_else(|| PromptError::NoComparative(attr.name.clone()))?,
            )
        }
        Variant::Named => return Err(PromptError::NamedVariant),
    };
    Ok(assemble(template, descriptor, assignment_text, &essay.text))
}

pub fn build_name_prompt(
    template: &PromptTemplate,
    essay: &EssayRecord,
    assignment_text: &str,
    name: &NameSpec,
) -> Result<String, PromptError> {
    if name.name.trim().is_empty() {
        return Err(PromptError::EmptyName);
    }
    let sentence = template.name_template.replace("{name}", name.name.trim());
    Ok(assemble(
        template,
        Some(&sentence),
        assignment_text,
        &essay.text,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Condition {
    /// Attribute name, or `baseline`.
    pub attribute: String,
    pub variant: Variant,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.attribute, self.variant)
    }
}

/// Baseline once, every marked variant, and comparative variants where defined.
pub fn enumerate_conditions(registry: &[AttributeSpec]) -> Vec<Condition> {
    let mut out = vec![Condition {
        attribute: BASELINE_ATTRIBUTE.into(),
        variant: Variant::Baseline,
    }];
    out.extend(registry.iter().map(|a| Condition {
        attribute: a.name.clone(),
        variant: Variant::Marked,
    }));
    out.extend(
        registry
            .iter()
            .filter(|a| a.has_comparative())
            .map(|a| Condition {
                attribute: a.name.clone(),
                variant: Variant::Comparative,
            }),
    );
    out
}
