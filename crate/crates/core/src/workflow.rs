//! Linear plugin chains and their shareable URLs.
//!
//! A workflow URL is `<base>/#/workflow?def=<payload>` where the payload is
//! the unpadded base64url form of the definition's canonical JSON (sorted
//! keys, no whitespace).

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::names::is_valid_name;
use crate::rpc::{CallError, HostValue, Router, WireValue};

pub const WORKFLOW_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub plugin: String,
    pub method: String,
}

impl Step {
    pub fn new(plugin: &str, method: &str) -> Self {
        Step { plugin: plugin.to_string(), method: method.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowDef {
    pub name: String,
    pub workspace: String,
    pub steps: Vec<Step>,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkflowError {
    #[error("step {index} failed: {source}")]
    StepFailed {
        index: usize,
        #[source]
        source: CallError,
    },
    #[error("not a workflow url: {0:?}")]
    NotAWorkflowUrl(String),
    #[error("malformed workflow definition: {0}")]
    MalformedDef(String),
}

impl WorkflowDef {
    pub fn new(name: &str, workspace: &str, steps: Vec<Step>) -> Self {
        WorkflowDef { name: name.to_string(), workspace: workspace.to_string(), steps, version: WORKFLOW_VERSION.to_string() }
    }

    pub fn validate(&self) -> Result<(), WorkflowError> {
        let bad = |m: String| Err(WorkflowError::MalformedDef(m));
        if self.version != WORKFLOW_VERSION {
            return bad(format!("unsupported version {:?}", self.version));
        }
        if self.steps.is_empty() {
            return bad("a workflow needs at least one step".into());
        }
        for name in [&self.name, &self.workspace] {
            if !is_valid_name(name) {
                return bad(format!("illegal name {name:?}"));
            }
        }
        for (i, s) in self.steps.iter().enumerate() {
            if !is_valid_name(&s.plugin) || !is_valid_name(&s.method) {
                return bad(format!("step {i} has an illegal plugin or method name"));
            }
        }
        Ok(())
    }

    /// Sorted-key compact JSON.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("definition serializes").to_string()
    }
}

/// Feeds `input` to the first step and each result to the next.
pub async fn run_workflow(router: &Router, def: &WorkflowDef, input: WireValue) -> Result<WireValue, WorkflowError> {
    def.validate()?;
    let mut value = HostValue::from_data(input).map_err(|e| WorkflowError::StepFailed { index: 0, source: e.into() })?;
    for (index, step) in def.steps.iter().enumerate() {
        value = router
            .call(&def.workspace, &step.plugin, &step.method, vec![value])
            .await
            .map_err(|source| WorkflowError::StepFailed { index, source })?;
    }
    let last = def.steps.len() - 1;
    value.into_data().map_err(|e| WorkflowError::StepFailed { index: last, source: e.into() })
}

pub fn encode_workflow_url(base: &str, def: &WorkflowDef) -> Result<String, WorkflowError> {
    def.validate()?;
    let payload = URL_SAFE_NO_PAD.encode(def.canonical_json());
    Ok(format!("{}/#/workflow?def={payload}", base.trim_end_matches('/')))
}

pub fn parse_workflow_url(url: &str) -> Result<WorkflowDef, WorkflowError> {
    let (_, query) = url.split_once("#/workflow?").ok_or_else(|| WorkflowError::NotAWorkflowUrl(url.to_string()))?;
    let payload = url::form_urlencoded::parse(query.as_bytes())
        .find(|(k, _)| k == "def")
        .map(|(_, v)| v.into_owned())
        .ok_or_else(|| WorkflowError::NotAWorkflowUrl(url.to_string()))?;
    let malformed = |m: String| WorkflowError::MalformedDef(m);
    let bytes = URL_SAFE_NO_PAD.decode(payload.as_bytes()).map_err(|e| malformed(e.to_string()))?;
    let text = String::from_utf8(bytes).map_err(|_| malformed("payload is not UTF-8".into()))?;
    let def: WorkflowDef = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    def.validate()?;
    if def.canonical_json() != text {
        return Err(malformed("payload is not in canonical form".into()));
    }
    Ok(def)
}
