//! Single-file plugin documents.
//!
//! A document is UTF-8 text with top-level sections opened and closed by
//! tags at the start of a line:
//!
//! ```text
//! <config lang="json">
//! {"name": "calculator", "type": "worker", "version": "0.1.0", "api_version": "0.1"}
//! </config>
//! <script>
//! fn calc_exp(x) = exp(x)
//! </script>
//! ```
//!
//! Recognised sections are `config`, `script`, `window` and `style`; text
//! outside them (docs, comments) is kept in `raw_source` only. Attributes
//! after the tag name are carried through verbatim.

use std::collections::BTreeMap;
use std::fmt;

use serde_json::{Map, Value as Json};

use crate::names::is_valid_name;
use crate::refs::PluginRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuntimeKind {
    Window,
    Worker,
    Native,
}

impl RuntimeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RuntimeKind::Window => "window",
            RuntimeKind::Worker => "worker",
            RuntimeKind::Native => "native",
        }
    }

    pub fn parse(s: &str) -> Option<RuntimeKind> {
        match s {
            "window" => Some(RuntimeKind::Window),
            "worker" => Some(RuntimeKind::Worker),
            "native" => Some(RuntimeKind::Native),
            _ => None,
        }
    }
}

impl fmt::Display for RuntimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SectionKind {
    Config,
    Script,
    WindowTemplate,
    Style,
}

impl SectionKind {
    const ALL: [SectionKind; 4] = [SectionKind::Config, SectionKind::Script, SectionKind::WindowTemplate, SectionKind::Style];

    pub fn tag(self) -> &'static str {
        match self {
            SectionKind::Config => "config",
            SectionKind::Script => "script",
            SectionKind::WindowTemplate => "window",
            SectionKind::Style => "style",
        }
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Body of a code section plus the free-form attributes of its open tag.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CodeSection {
    pub attrs: String,
    pub text: String,
}

impl CodeSection {
    pub fn new(text: impl Into<String>) -> Self {
        CodeSection { attrs: String::new(), text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Requirements {
    Flat(Vec<String>),
    Tagged(BTreeMap<String, Vec<String>>),
}

impl Default for Requirements {
    fn default() -> Self {
        Requirements::Flat(Vec::new())
    }
}

impl Requirements {
    /// Union of every requirement entry.
    pub fn all(&self) -> Vec<&str> {
        match self {
            Requirements::Flat(l) => l.iter().map(String::as_str).collect(),
            Requirements::Tagged(m) => m.values().flatten().map(String::as_str).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PluginSpec {
    pub name: String,
    pub runtime_kind: RuntimeKind,
    pub version: String,
    pub api_version: String,
    pub tags: Vec<String>,
    pub description: Option<String>,
    pub ui: Option<String>,
    pub requirements: Requirements,
    pub dependencies: Vec<String>,
    /// Scalar defaults only.
    pub defaults: BTreeMap<String, Json>,
    pub code_sections: BTreeMap<SectionKind, CodeSection>,
    /// Attributes of the `<config>` open tag.
    pub config_attrs: String,
    /// Config keys this version does not interpret, kept for re-serialization.
    pub extra: BTreeMap<String, Json>,
    pub raw_source: String,
}

impl PluginSpec {
    /// A spec with the required fields set and everything else empty.
    pub fn new(name: &str, runtime_kind: RuntimeKind, version: &str, api_version: &str) -> Self {
        PluginSpec {
            name: name.to_string(),
            runtime_kind,
            version: version.to_string(),
            api_version: api_version.to_string(),
            tags: Vec::new(),
            description: None,
            ui: None,
            requirements: Requirements::default(),
            dependencies: Vec::new(),
            defaults: BTreeMap::new(),
            code_sections: BTreeMap::new(),
            config_attrs: String::new(),
            extra: BTreeMap::new(),
            raw_source: String::new(),
        }
    }

    pub fn with_section(mut self, kind: SectionKind, text: &str) -> Self {
        self.code_sections.insert(kind, CodeSection::new(text));
        self
    }

    pub fn script(&self) -> Option<&str> {
        self.code_sections.get(&SectionKind::Script).map(|s| s.text.as_str())
    }

    /// Equality on every field except `raw_source`.
    pub fn same_content(&self, other: &PluginSpec) -> bool {
        let mut a = self.clone();
        a.raw_source = other.raw_source.clone();
        &a == other
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("plugin file is not valid UTF-8")]
    NotUtf8,
    #[error("plugin file has no <config> section")]
    MissingConfig,
    #[error("malformed config: {0}")]
    MalformedConfig(String),
    #[error("missing required config field {0:?}")]
    MissingRequiredField(&'static str),
    #[error("duplicate <{0}> section")]
    DuplicateSection(SectionKind),
    #[error("<{0}> section is never closed")]
    UnterminatedSection(SectionKind),
    #[error("illegal plugin name {0:?}")]
    IllegalName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationCode {
    IllegalName,
    MissingField,
    BadVersion,
    OrphanTagKey,
    DuplicateTag,
    MissingScript,
    WindowSectionOnNonWindow,
    BadDependency,
    NonScalarDefault,
    UnrepresentableSection,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("plugin spec violates its invariants: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct InvariantViolation(pub Vec<Violation>);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown tag {tag:?}; available: {available:?}")]
pub struct UnknownTag {
    pub tag: String,
    pub available: Vec<String>,
}

/// A spec with one tag selected.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPlugin {
    pub spec: PluginSpec,
    pub chosen_tag: Option<String>,
    pub effective_requirements: Vec<String>,
    pub effective_code: BTreeMap<SectionKind, CodeSection>,
}

struct RawSection {
    kind: SectionKind,
    attrs: String,
    body: String,
}

fn open_tag(line: &str) -> Option<(SectionKind, &str, &str)> {
    let rest = line.strip_prefix('<')?;
    SectionKind::ALL.into_iter().find_map(|kind| {
        let after = rest.strip_prefix(kind.tag())?;
        if !(after.starts_with('>') || after.starts_with(char::is_whitespace)) {
            return None;
        }
        let close = after.find('>')?;
        Some((kind, after[..close].trim(), &after[close + 1..]))
    })
}

fn split_sections(source: &str) -> Result<Vec<RawSection>, ParseError> {
    let mut sections = Vec::new();
    let mut current: Option<(SectionKind, String, Vec<&str>)> = None;
    for raw_line in source.split('\n') {
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        match current.take() {
            Some((kind, attrs, mut body)) => {
                let close = format!("</{}>", kind.tag());
                if line.starts_with(&close) {
                    sections.push(RawSection { kind, attrs, body: body.join("\n") });
                } else {
                    body.push(line);
                    current = Some((kind, attrs, body));
                }
            }
            None => {
                if let Some((kind, attrs, rest)) = open_tag(line) {
                    let close = format!("</{}>", kind.tag());
                    if let Some(end) = rest.find(&close) {
                        sections.push(RawSection { kind, attrs: attrs.to_string(), body: rest[..end].to_string() });
                    } else {
                        let body = if rest.trim().is_empty() { Vec::new() } else { vec![rest] };
                        current = Some((kind, attrs.to_string(), body));
                    }
                }
            }
        }
    }
    if let Some((kind, _, _)) = current {
        return Err(ParseError::UnterminatedSection(kind));
    }
    Ok(sections)
}

fn take_string(cfg: &mut Map<String, Json>, key: &'static str) -> Result<Option<String>, ParseError> {
    match cfg.remove(key) {
        None | Some(Json::Null) => Ok(None),
        Some(Json::String(s)) => Ok(Some(s)),
        Some(other) => Err(ParseError::MalformedConfig(format!("{key} must be a string, got {other}"))),
    }
}

fn string_list(v: Json, what: &str) -> Result<Vec<String>, ParseError> {
    match v {
        Json::Array(items) => items
            .into_iter()
            .map(|i| match i {
                Json::String(s) => Ok(s),
                other => Err(ParseError::MalformedConfig(format!("{what} entries must be strings, got {other}"))),
            })
            .collect(),
        other => Err(ParseError::MalformedConfig(format!("{what} must be a list, got {other}"))),
    }
}

fn take_list(cfg: &mut Map<String, Json>, key: &'static str) -> Result<Vec<String>, ParseError> {
    match cfg.remove(key) {
        None | Some(Json::Null) => Ok(Vec::new()),
        Some(v) => string_list(v, key),
    }
}

fn required(v: Option<String>, key: &'static str) -> Result<String, ParseError> {
    match v {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(ParseError::MissingRequiredField(key)),
    }
}

pub fn parse_plugin_bytes(bytes: &[u8]) -> Result<PluginSpec, ParseError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ParseError::NotUtf8)?;
    parse_plugin_file(text)
}

pub fn parse_plugin_file(source: &str) -> Result<PluginSpec, ParseError> {
    let sections = split_sections(source)?;
    let mut config: Option<RawSection> = None;
    let mut code_sections = BTreeMap::new();
    for s in sections {
        if s.kind == SectionKind::Config {
            if config.is_some() {
                return Err(ParseError::DuplicateSection(SectionKind::Config));
            }
            config = Some(s);
        } else {
            if code_sections.contains_key(&s.kind) {
                return Err(ParseError::DuplicateSection(s.kind));
            }
            code_sections.insert(s.kind, CodeSection { attrs: s.attrs, text: s.body });
        }
    }
    let config = config.ok_or(ParseError::MissingConfig)?;
    let mut cfg = match serde_json::from_str::<Json>(&config.body) {
        Ok(Json::Object(m)) => m,
        Ok(_) => return Err(ParseError::MalformedConfig("config must be an object".into())),
        Err(e) => return Err(ParseError::MalformedConfig(e.to_string())),
    };

    let name = required(take_string(&mut cfg, "name")?, "name")?;
    if !is_valid_name(&name) {
        return Err(ParseError::IllegalName(name));
    }
    let kind = required(take_string(&mut cfg, "type")?, "type")?;
    let runtime_kind = RuntimeKind::parse(&kind)
        .ok_or_else(|| ParseError::MalformedConfig(format!("type must be window, worker or native, got {kind:?}")))?;
    let version = required(take_string(&mut cfg, "version")?, "version")?;
    let api_version = required(take_string(&mut cfg, "api_version")?, "api_version")?;
    let tags = take_list(&mut cfg, "tags")?;
    let description = take_string(&mut cfg, "description")?;
    let ui = take_string(&mut cfg, "ui")?;
    let requirements = match cfg.remove("requirements") {
        None | Some(Json::Null) => Requirements::default(),
        Some(Json::Object(m)) => Requirements::Tagged(
            m.into_iter()
                .map(|(k, v)| Ok((k, string_list(v, "requirements")?)))
                .collect::<Result<_, ParseError>>()?,
        ),
        Some(v) => Requirements::Flat(string_list(v, "requirements")?),
    };
    let dependencies = take_list(&mut cfg, "dependencies")?;
    let defaults = match cfg.remove("defaults") {
        None | Some(Json::Null) => BTreeMap::new(),
        Some(Json::Object(m)) => m.into_iter().collect(),
        Some(other) => return Err(ParseError::MalformedConfig(format!("defaults must be an object, got {other}"))),
    };

    Ok(PluginSpec {
        name,
        runtime_kind,
        version,
        api_version,
        tags,
        description,
        ui,
        requirements,
        dependencies,
        defaults,
        code_sections,
        config_attrs: config.attrs,
        extra: cfg.into_iter().collect(),
        raw_source: source.to_string(),
    })
}

fn violation(code: ViolationCode, message: impl Into<String>) -> Violation {
    Violation { code, message: message.into() }
}

/// Every invariant the spec breaks; empty when it is valid.
pub fn validate_spec(spec: &PluginSpec) -> Vec<Violation> {
    use ViolationCode::*;
    let mut out = Vec::new();
    if !is_valid_name(&spec.name) {
        out.push(violation(IllegalName, format!("name {:?} is empty, too long or contains : @ / ? &", spec.name)));
    }
    if spec.api_version.is_empty() {
        out.push(violation(MissingField, "api_version is empty"));
    }
    if semver::Version::parse(&spec.version).is_err() {
        out.push(violation(BadVersion, format!("version {:?} is not semver", spec.version)));
    }
    let mut seen = std::collections::HashSet::new();
    for t in &spec.tags {
        if !seen.insert(t) {
            out.push(violation(DuplicateTag, format!("tag {t:?} listed twice")));
        }
    }
    if let Requirements::Tagged(map) = &spec.requirements {
        for key in map.keys() {
            if !spec.tags.contains(key) {
                out.push(violation(OrphanTagKey, format!("requirements keyed by {key:?}, which is not a declared tag")));
            }
        }
    }
    match spec.runtime_kind {
        RuntimeKind::Window => {}
        kind => {
            if !spec.code_sections.contains_key(&SectionKind::Script) {
                out.push(violation(MissingScript, format!("{kind} plugins need a <script> section")));
            }
            for s in [SectionKind::WindowTemplate, SectionKind::Style] {
                if spec.code_sections.contains_key(&s) {
                    out.push(violation(WindowSectionOnNonWindow, format!("<{s}> is only allowed for window plugins")));
                }
            }
        }
    }
    for dep in &spec.dependencies {
        if let Err(e) = PluginRef::parse(dep) {
            out.push(violation(BadDependency, e.to_string()));
        }
    }
    for (k, v) in &spec.defaults {
        if v.is_array() || v.is_object() {
            out.push(violation(NonScalarDefault, format!("default {k:?} is not a scalar")));
        }
    }
    for (kind, section) in &spec.code_sections {
        let close = format!("</{}>", kind.tag());
        if section.text.split('\n').any(|l| l.starts_with(&close)) || section.attrs.contains('>') || section.attrs.contains('\n') {
            out.push(violation(UnrepresentableSection, format!("<{kind}> body or attributes would end the section early")));
        }
    }
    if spec.config_attrs.contains('>') || spec.config_attrs.contains('\n') {
        out.push(violation(UnrepresentableSection, "config attributes contain '>' or a newline"));
    }
    out
}

fn config_json(spec: &PluginSpec) -> Json {
    let mut m: Map<String, Json> = spec.extra.clone().into_iter().collect();
    m.insert("name".into(), Json::String(spec.name.clone()));
    m.insert("type".into(), Json::String(spec.runtime_kind.as_str().into()));
    m.insert("version".into(), Json::String(spec.version.clone()));
    m.insert("api_version".into(), Json::String(spec.api_version.clone()));
    if !spec.tags.is_empty() {
        m.insert("tags".into(), spec.tags.clone().into());
    }
    if let Some(d) = &spec.description {
        m.insert("description".into(), Json::String(d.clone()));
    }
    if let Some(ui) = &spec.ui {
        m.insert("ui".into(), Json::String(ui.clone()));
    }
    match &spec.requirements {
        Requirements::Flat(l) if l.is_empty() => {}
        Requirements::Flat(l) => {
            m.insert("requirements".into(), l.clone().into());
        }
        Requirements::Tagged(t) => {
            let obj: Map<String, Json> = t.iter().map(|(k, v)| (k.clone(), v.clone().into())).collect();
            m.insert("requirements".into(), Json::Object(obj));
        }
    }
    if !spec.dependencies.is_empty() {
        m.insert("dependencies".into(), spec.dependencies.clone().into());
    }
    if !spec.defaults.is_empty() {
        m.insert("defaults".into(), Json::Object(spec.defaults.clone().into_iter().collect()));
    }
    Json::Object(m)
}

fn write_section(out: &mut String, kind: SectionKind, attrs: &str, body: &str) {
    out.push('<');
    out.push_str(kind.tag());
    if !attrs.is_empty() {
        out.push(' ');
        out.push_str(attrs);
    }
    out.push_str(">\n");
    if !body.is_empty() {
        out.push_str(body);
        out.push('\n');
    }
    out.push_str("</");
    out.push_str(kind.tag());
    out.push_str(">\n");
}

/// Canonical text: config, script, window, style.
pub fn serialize_plugin_file(spec: &PluginSpec) -> Result<String, InvariantViolation> {
    let violations = validate_spec(spec);
    if !violations.is_empty() {
        return Err(InvariantViolation(violations));
    }
    let mut out = String::new();
    let config = serde_json::to_string_pretty(&config_json(spec)).expect("json values serialize");
    write_section(&mut out, SectionKind::Config, &spec.config_attrs, &config);
    for kind in [SectionKind::Script, SectionKind::WindowTemplate, SectionKind::Style] {
        if let Some(s) = spec.code_sections.get(&kind) {
            write_section(&mut out, kind, &s.attrs, &s.text);
        }
    }
    Ok(out)
}

/// Selects a tag; without one, the first declared tag is used.
pub fn resolve_tag(spec: &PluginSpec, tag: Option<&str>) -> Result<ResolvedPlugin, UnknownTag> {
    let unknown = |t: &str| UnknownTag { tag: t.to_string(), available: spec.tags.clone() };
    let chosen = match tag {
        Some(t) if spec.tags.iter().any(|x| x == t) => Some(t.to_string()),
        Some(t) => return Err(unknown(t)),
        None => spec.tags.first().cloned(),
    };
    let effective_requirements = match (&spec.requirements, &chosen) {
        (Requirements::Flat(l), _) => l.clone(),
        (Requirements::Tagged(m), Some(t)) => m.get(t).cloned().unwrap_or_default(),
        (Requirements::Tagged(_), None) => Vec::new(),
    };
    Ok(ResolvedPlugin {
        spec: spec.clone(),
        chosen_tag: chosen,
        effective_requirements,
        effective_code: spec.code_sections.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CALCULATOR: &str = r#"<config lang="json">
{"name":"calculator", "type":"worker", "version":"0.1.0", "api_version":"0.1"}
</config>
<script lang="pluginscript">
fn calc_exp(x) = exp(x)
</script>
"#;

    #[test]
    fn parses_calculator() {
        let s = parse_plugin_file(CALCULATOR).unwrap();
        assert_eq!(s.name, "calculator");
        assert_eq!(s.runtime_kind, RuntimeKind::Worker);
        assert_eq!(s.config_attrs, r#"lang="json""#);
        assert_eq!(s.script(), Some("fn calc_exp(x) = exp(x)"));
        assert_eq!(s.code_sections[&SectionKind::Script].attrs, r#"lang="pluginscript""#);
        assert_eq!(s.raw_source, CALCULATOR);
        assert!(validate_spec(&s).is_empty());
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_plugin_file("<script>\nfn f() = 1\n</script>\n"), Err(ParseError::MissingConfig));
        let two = format!("{CALCULATOR}<config>\n{{}}\n</config>\n");
        assert_eq!(parse_plugin_file(&two), Err(ParseError::DuplicateSection(SectionKind::Config)));
        let bad_name = CALCULATOR.replace("\"calculator\"", "\"a:b\"");
        assert_eq!(parse_plugin_file(&bad_name), Err(ParseError::IllegalName("a:b".into())));
        let no_version = CALCULATOR.replace(", \"version\":\"0.1.0\"", "");
        assert_eq!(parse_plugin_file(&no_version), Err(ParseError::MissingRequiredField("version")));
        assert!(matches!(
            parse_plugin_file("<config>\n{name: calculator}\n</config>\n"),
            Err(ParseError::MalformedConfig(_))
        ));
        assert_eq!(
            parse_plugin_file("<config>\n{}\n"),
            Err(ParseError::UnterminatedSection(SectionKind::Config))
        );
        assert_eq!(parse_plugin_bytes(&[0xff, 0xfe]), Err(ParseError::NotUtf8));
    }

    #[test]
    fn unknown_keys_preserved() {
        let src = CALCULATOR.replace("\"api_version\":\"0.1\"", "\"api_version\":\"0.1\", \"cover\": \"x.png\"");
        let s = parse_plugin_file(&src).unwrap();
        assert_eq!(s.extra.get("cover"), Some(&Json::String("x.png".into())));
        let again = parse_plugin_file(&serialize_plugin_file(&s).unwrap()).unwrap();
        assert!(again.same_content(&s));
    }

    #[test]
    fn one_line_sections_and_outside_text() {
        let src = "# Docs before\n<config>{\"name\":\"n\",\"type\":\"window\",\"version\":\"1.0.0\",\"api_version\":\"0.1\"}</config>\n<docs>\nignored\n</docs>\n<window>\n<div>hi</div>\n</window>\n";
        let s = parse_plugin_file(src).unwrap();
        assert_eq!(s.code_sections[&SectionKind::WindowTemplate].text, "<div>hi</div>");
        assert_eq!(s.code_sections.len(), 1);
    }

    #[test]
    fn canonical_serialization() {
        let s = parse_plugin_file(CALCULATOR).unwrap();
        let out = serialize_plugin_file(&s).unwrap();
        assert_eq!(out.matches("<config").count(), 1);
        assert_eq!(out.matches("<script").count(), 1);
        assert!(out.find("<config").unwrap() < out.find("<script").unwrap());
        assert!(parse_plugin_file(&out).unwrap().same_content(&s));
    }

    #[test]
    fn serialize_rejects_window_section_on_worker() {
        let s = parse_plugin_file(CALCULATOR).unwrap().with_section(SectionKind::WindowTemplate, "<div/>");
        let err = serialize_plugin_file(&s).unwrap_err();
        assert_eq!(err.0[0].code, ViolationCode::WindowSectionOnNonWindow);
    }

    #[test]
    fn validation_examples() {
        let mut s = parse_plugin_file(CALCULATOR).unwrap();
        s.version = "1.0".into();
        let v = validate_spec(&s);
        assert_eq!(v.iter().map(|v| v.code).collect::<Vec<_>>(), vec![ViolationCode::BadVersion]);

        let mut s = parse_plugin_file(CALCULATOR).unwrap();
        s.requirements = Requirements::Tagged([("x".to_string(), vec![])].into());
        let v = validate_spec(&s);
        assert_eq!(v.iter().map(|v| v.code).collect::<Vec<_>>(), vec![ViolationCode::OrphanTagKey]);

        let mut s = parse_plugin_file(CALCULATOR).unwrap();
        s.code_sections.clear();
        assert_eq!(validate_spec(&s)[0].code, ViolationCode::MissingScript);
    }

    fn gpu_cpu() -> PluginSpec {
        let mut s = parse_plugin_file(CALCULATOR).unwrap();
        s.tags = vec!["cpu".into(), "gpu".into()];
        s.requirements = Requirements::Tagged(
            [
                ("cpu".to_string(), vec!["none:stub-cpu".to_string()]),
                ("gpu".to_string(), vec!["none:stub-gpu".to_string()]),
            ]
            .into(),
        );
        s
    }

    #[test]
    fn tag_resolution() {
        let s = gpu_cpu();
        let r = resolve_tag(&s, Some("gpu")).unwrap();
        assert_eq!(r.chosen_tag.as_deref(), Some("gpu"));
        assert_eq!(r.effective_requirements, vec!["none:stub-gpu"]);
        let r = resolve_tag(&s, None).unwrap();
        assert_eq!(r.chosen_tag.as_deref(), Some("cpu"));
        assert_eq!(r.effective_requirements, vec!["none:stub-cpu"]);
        assert_eq!(resolve_tag(&s, Some("osx")).unwrap_err().tag, "osx");

        let mut flat = parse_plugin_file(CALCULATOR).unwrap();
        flat.requirements = Requirements::Flat(vec!["none:a".into()]);
        let r = resolve_tag(&flat, None).unwrap();
        assert_eq!(r.chosen_tag, None);
        assert_eq!(r.effective_requirements, vec!["none:a"]);
        assert!(resolve_tag(&flat, Some("cpu")).is_err());
    }

    fn arb_spec() -> impl Strategy<Value = PluginSpec> {
        let name = "[A-Za-z0-9_-][A-Za-z0-9 ._-]{0,20}";
        let tags = proptest::collection::btree_set("[a-z]{1,6}", 0..4).prop_map(|s| s.into_iter().collect::<Vec<_>>());
        let line = "[ -~]{0,30}".prop_filter("no closing tags", |l| !l.starts_with("</"));
        let body = proptest::collection::vec(line, 0..5).prop_map(|ls| ls.join("\n"));
        (
            name,
            prop_oneof![Just(RuntimeKind::Worker), Just(RuntimeKind::Native), Just(RuntimeKind::Window)],
            (0u32..20, 0u32..20, 0u32..20),
            tags,
            proptest::option::of("[ -~]{0,20}"),
            body.clone(),
            body,
            proptest::collection::vec("[a-z]{1,5}:[a-z]{1,5}", 0..3),
            any::<bool>(),
            proptest::collection::btree_map("[a-z]{1,5}", prop_oneof![any::<i32>().prop_map(Json::from), any::<bool>().prop_map(Json::from), "[a-z]{0,5}".prop_map(Json::from)], 0..3),
        )
            .prop_map(|(name, kind, (ma, mi, pa), tags, description, script, window, reqs, tagged, defaults)| {
                let mut s = PluginSpec::new(&name, kind, &format!("{ma}.{mi}.{pa}"), "0.1");
                s.description = description;
                s.requirements = if tagged && !tags.is_empty() {
                    Requirements::Tagged(tags.iter().map(|t| (t.clone(), reqs.clone())).collect())
                } else {
                    Requirements::Flat(reqs)
                };
                s.tags = tags;
                s.defaults = defaults;
                s.dependencies = vec!["owner/repo:Helper@abc".into()];
                s.code_sections.insert(SectionKind::Script, CodeSection { attrs: "lang=\"x\"".into(), text: script });
                if kind == RuntimeKind::Window {
                    s.code_sections.insert(SectionKind::WindowTemplate, CodeSection::new(window));
                    s.code_sections.insert(SectionKind::Style, CodeSection::new("div { }"));
                }
                s
            })
    }

    proptest! {
        #[test]
        fn serialize_parse_roundtrip(spec in arb_spec()) {
            prop_assert!(validate_spec(&spec).is_empty(), "{:?}", validate_spec(&spec));
            let text = serialize_plugin_file(&spec).unwrap();
            let back = parse_plugin_file(&text).unwrap();
            prop_assert!(back.same_content(&spec), "{:?}\n{:?}", back, spec);
        }

        #[test]
        fn every_tag_resolves_within_union(spec in arb_spec()) {
            let all = spec.requirements.all();
            for t in &spec.tags {
                let r = resolve_tag(&spec, Some(t)).unwrap();
                prop_assert!(r.effective_requirements.iter().all(|x| all.contains(&x.as_str())));
            }
        }

        #[test]
        fn parser_total_on_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..4096)) {
            let _ = parse_plugin_bytes(&bytes);
            let _ = parse_plugin_file(&String::from_utf8_lossy(&bytes));
        }

        #[test]
        fn parser_total_on_tag_soup(parts in proptest::collection::vec(prop_oneof![
            Just("<config>".to_string()), Just("</config>".to_string()), Just("<script>".to_string()),
            Just("</script>".to_string()), Just("<window x>".to_string()), Just("{\"name\":".to_string()),
            Just("\n".to_string()), "[ -~]{0,10}"
        ], 0..40)) {
            let _ = parse_plugin_file(&parts.concat());
        }
    }

    #[test]
    fn parser_handles_megabyte_input() {
        let big = "x".repeat(1 << 20);
        assert_eq!(parse_plugin_file(&big), Err(ParseError::MissingConfig));
        let big_cfg = format!("<config>\n{}\n</config>\n", "[".repeat(1 << 19));
        assert!(matches!(parse_plugin_file(&big_cfg), Err(ParseError::MalformedConfig(_))));
    }
}
