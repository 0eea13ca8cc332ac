use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::reduction::ReductionOperator;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldRequest {
    pub name: String,
    /// Send every `cadence` timesteps.
    pub cadence: u64,
}

impl FieldRequest {
    pub fn due(&self, timestep: u64) -> bool {
        timestep % self.cadence == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    HorizontalReduction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticAction {
    pub kind: ActionKind,
    pub operator: ReductionOperator,
    pub field: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoServerConfig {
    pub fields: Vec<FieldRequest>,
    pub actions: Vec<DiagnosticAction>,
    pub output: PathBuf,
}

pub const DEFAULT_OUTPUT: &str = "diagnostics.csv";

impl IoServerConfig {
    pub fn request(&self, field: &str) -> Option<&FieldRequest> {
        self.fields.iter().find(|f| f.name == field)
    }

    /// Actions producing output at `timestep`.
    pub fn actions_due(&self, timestep: u64) -> impl Iterator<Item = &DiagnosticAction> {
        self.actions
            .iter()
            .filter(move |a| self.request(&a.field).is_some_and(|r| r.due(timestep)))
    }
}

fn attr<'a>(node: roxmltree::Node<'a, '_>, name: &str) -> Result<&'a str> {
    node.attribute(name).ok_or_else(|| {
        Error::config(format!(
            "<{}> is missing attribute `{name}`",
            node.tag_name().name()
        ))
    })
}

fn elements<'a, 'i>(node: roxmltree::Node<'a, 'i>) -> impl Iterator<Item = roxmltree::Node<'a, 'i>> {
    node.children().filter(|c| c.is_element())
}

/// Parses the diagnostics XML:
///
/// ```xml
/// <io-config>
///   <fields><field name="theta" cadence="10"/></fields>
///   <actions>
///     <action kind="horizontal_reduction" field="theta" operator="mean" output="theta_mean"/>
///   </actions>
///   <output path="diagnostics.csv"/>
/// </io-config>
/// ```
pub fn parse_io_config(xml: &str) -> Result<IoServerConfig> {
    let doc = roxmltree::Document::parse(xml)
        .map_err(|e| Error::config(format!("io configuration is not well-formed XML: {e}")))?;
    let root = doc.root_element();
    if root.tag_name().name() != "io-config" {
        return Err(Error::config(format!(
            "expected root element <io-config>, found <{}>",
            root.tag_name().name()
        )));
    }
    let mut fields = Vec::new();
    let mut actions = Vec::new();
    let mut output = None;
    for section in elements(root) {
        match section.tag_name().name() {
            "fields" => {
                for f in elements(section) {
                    if f.tag_name().name() != "field" {
                        return Err(unknown(f));
                    }
                    let name = attr(f, "name")?.to_owned();
                    let cadence = match f.attribute("cadence") {
                        None => 1,
                        Some(c) => c.trim().parse::<u64>().map_err(|_| {
                            Error::config(format!("field `{name}`: bad cadence `{c}`"))
                        })?,
                    };
                    if cadence == 0 {
                        return Err(Error::config(format!("field `{name}`: cadence must be >= 1")));
                    }
                    if fields.iter().any(|r: &FieldRequest| r.name == name) {
                        return Err(Error::config(format!("field `{name}` requested twice")));
                    }
                    fields.push(FieldRequest { name, cadence });
                }
            }
            "actions" => {
                for a in elements(section) {
                    if a.tag_name().name() != "action" {
                        return Err(unknown(a));
                    }
                    let kind = match attr(a, "kind")? {
                        "horizontal_reduction" => ActionKind::HorizontalReduction,
                        other => return Err(Error::config(format!("unknown action kind `{other}`"))),
                    };
                    let operator = attr(a, "operator")?.parse()?;
                    actions.push(DiagnosticAction {
                        kind,
                        operator,
                        field: attr(a, "field")?.to_owned(),
                        output: attr(a, "output")?.to_owned(),
                    });
                }
            }
            "output" => {
                if output.is_some() {
                    return Err(Error::config("<output> given twice"));
                }
                output = Some(PathBuf::from(attr(section, "path")?));
            }
            _ => return Err(unknown(section)),
        }
    }
    let mut outputs = BTreeSet::new();
    for a in &actions {
        if !fields.iter().any(|f| f.name == a.field) {
            return Err(Error::config(format!(
                "action `{}` references field `{}` which is not requested",
                a.output, a.field
            )));
        }
        if !outputs.insert(a.output.as_str()) {
            return Err(Error::config(format!("duplicate output name `{}`", a.output)));
        }
    }
    Ok(IoServerConfig {
        fields,
        actions,
        output: output.unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT)),
    })
}

fn unknown(node: roxmltree::Node) -> Error {
    Error::config(format!("unknown element <{}>", node.tag_name().name()))
}
