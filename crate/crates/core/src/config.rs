//! Line-based sectioned config format.
//!
//! ```text
//! # comment
//! [pipeline]
//! task = captioning
//! encoder = self_attention
//!
//! [decode]
//! name = beam
//! beam = 3
//! ```
//!
//! Values are typed on read: integer, real, `true`/`false`, comma-separated
//! list, or otherwise string.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use xmodal_tensor::rng::name_hash;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Int(i64),
    Real(f64),
    Bool(bool),
    Str(String),
    List(Vec<Value>),
}

impl Value {
    fn parse(raw: &str) -> Value {
        let raw = raw.trim();
        if raw.contains(',') {
            return Value::List(
                raw.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(Value::parse_scalar)
                    .collect(),
            );
        }
        Value::parse_scalar(raw)
    }

    fn parse_scalar(raw: &str) -> Value {
        if let Ok(i) = raw.parse::<i64>() {
            return Value::Int(i);
        }
        if let Ok(r) = raw.parse::<f64>() {
            if r.is_finite() {
                return Value::Real(r);
            }
        }
        match raw {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => Value::Str(raw.to_string()),
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "integer",
            Value::Real(_) => "real",
            Value::Bool(_) => "boolean",
            Value::Str(_) => "string",
            Value::List(_) => "list",
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r:?}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Str(s) => f.write_str(s),
            Value::List(items) => match items.as_slice() {
                [] => f.write_str(","),
                [one] => write!(f, "{one},"),
                _ => {
                    let parts: Vec<String> = items.iter().map(Value::to_string).collect();
                    f.write_str(&parts.join(", "))
                }
            },
        }
    }
}

pub type Section = BTreeMap<String, Value>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Captioning,
    Vlp,
    Vqa,
    Retrieval,
    Vcr,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Captioning => "captioning",
            Task::Vlp => "vlp",
            Task::Vqa => "vqa",
            Task::Retrieval => "retrieval",
            Task::Vcr => "vcr",
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "captioning" => Task::Captioning,
            "vlp" => Task::Vlp,
            "vqa" => Task::Vqa,
            "retrieval" => Task::Retrieval,
            "vcr" => Task::Vcr,
            other => return Err(format!("unknown task `{other}`")),
        })
    }
}

/// The seven pipeline stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Preprocessing,
    Encoder,
    Interaction,
    Decoder,
    Decode,
    Training,
    Pretraining,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Preprocessing,
        Stage::Encoder,
        Stage::Interaction,
        Stage::Decoder,
        Stage::Decode,
        Stage::Training,
        Stage::Pretraining,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Preprocessing => "preprocessing",
            Stage::Encoder => "encoder",
            Stage::Interaction => "interaction",
            Stage::Decoder => "decoder",
            Stage::Decode => "decode",
            Stage::Training => "training",
            Stage::Pretraining => "pretraining",
        }
    }

    /// Key naming the module inside the stage's own section.
    pub fn name_key(self) -> &'static str {
        match self {
            Stage::Training => "strategy",
            _ => "name",
        }
    }

    pub fn default_module(self, task: Task) -> Option<&'static str> {
        match self {
            Stage::Preprocessing => Some("standard"),
            Stage::Encoder => Some("self_attention"),
            Stage::Interaction => Some(if task == Task::Vlp { "co_attention" } else { "attention" }),
            Stage::Decoder => Some("lstm"),
            Stage::Decode => Some("greedy"),
            Stage::Training => Some("ce"),
            Stage::Pretraining => (task == Task::Vlp).then_some("vlp"),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parsed config: stage selections plus every section's typed values.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub task: Task,
    pub stage_choices: BTreeMap<Stage, String>,
    pub sections: BTreeMap<String, Section>,
}

fn is_section_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
}

fn is_key(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'.')
}

pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let content = raw.split('#').next().unwrap_or("");
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let column = raw.len() - raw.trim_start().len() + 1;
        let syntax = |message: String| Error::Syntax {
            line: line_no,
            column,
            message,
        };
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| syntax("unterminated section header".into()))?;
            if !is_section_name(name) {
                return Err(syntax(format!("invalid section name `{name}`")));
            }
            sections.entry(name.to_string()).or_default();
            current = Some(name.to_string());
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| syntax(format!("expected `key = value`, found `{trimmed}`")))?;
        let key = key.trim();
        if !is_key(key) {
            return Err(syntax(format!("invalid key `{key}`")));
        }
        let section = current
            .as_ref()
            .ok_or_else(|| syntax(format!("key `{key}` appears before any section header")))?;
        let entries = sections.get_mut(section).expect("section registered");
        if entries.insert(key.to_string(), Value::parse(value)).is_some() {
            return Err(syntax(format!("duplicate key `{key}` in [{section}]")));
        }
    }
    PipelineConfig::from_sections(sections)
}

impl PipelineConfig {
    pub fn from_sections(sections: BTreeMap<String, Section>) -> Result<Self> {
        let pipeline = sections
            .get("pipeline")
            .ok_or_else(|| Error::config("pipeline", "", "missing [pipeline] section"))?;
        let task = match pipeline.get("task") {
            Some(Value::Str(s)) => s
                .parse::<Task>()
                .map_err(|m| Error::config("pipeline", "task", m))?,
            Some(v) => return Err(Error::config("pipeline", "task", format!("unknown task `{v}`"))),
            None => Task::Captioning,
        };
        let mut stage_choices = BTreeMap::new();
        for stage in Stage::ALL {
            let from_pipeline = pipeline.get(stage.as_str());
            let from_section = sections.get(stage.as_str()).and_then(|s| s.get(stage.name_key()));
            let pick = |v: &Value, sec: &str, key: &str| match v {
                Value::Str(s) => Ok(s.clone()),
                other => Err(Error::config(
                    sec,
                    key,
                    format!("module name must be a string, got {}", other.type_name()),
                )),
            };
            let choice = match (from_pipeline, from_section) {
                (Some(a), Some(b)) => {
                    let a = pick(a, "pipeline", stage.as_str())?;
                    let b = pick(b, stage.as_str(), stage.name_key())?;
                    if a != b {
                        return Err(Error::config(
                            stage.as_str(),
                            stage.name_key(),
                            format!("`{b}` conflicts with [pipeline] {} = {a}", stage.as_str()),
                        ));
                    }
                    Some(a)
                }
                (Some(a), None) => Some(pick(a, "pipeline", stage.as_str())?),
                (None, Some(b)) => Some(pick(b, stage.as_str(), stage.name_key())?),
                (None, None) => stage.default_module(task).map(str::to_string),
            };
            if let Some(c) = choice {
                stage_choices.insert(stage, c);
            }
        }
        Ok(Self {
            task,
            stage_choices,
            sections,
        })
    }

    pub fn choice(&self, stage: Stage) -> Option<&str> {
        self.stage_choices.get(&stage).map(String::as_str)
    }

    pub fn section(&self, name: &str) -> SectionView<'_> {
        SectionView {
            name: name.to_string(),
            entries: self.sections.get(name),
        }
    }

    /// Sets a value, re-deriving stage choices when `[pipeline]` or a stage
    /// name key changes.
    pub fn set(&mut self, section: &str, key: &str, value: Value) -> Result<()> {
        let mut sections = self.sections.clone();
        sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value);
        *self = Self::from_sections(sections)?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let order = std::iter::once("pipeline")
            .chain(self.sections.keys().map(String::as_str).filter(|s| *s != "pipeline"));
        for name in order {
            let Some(entries) = self.sections.get(name) else { continue };
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    /// Hash of every section that determines parameter shapes.
    /// Decoding, optimizer and data settings are excluded so they can change
    /// between training and evaluation.
    pub fn model_hash(&self) -> u64 {
        let mut view = self.clone();
        for name in ["decode", "training", "data"] {
            view.sections.remove(name);
            if let Some(p) = view.sections.get_mut("pipeline") {
                p.remove(name);
            }
        }
        name_hash(&view.render())
    }
}

/// Typed read access to one section with defaults.
pub struct SectionView<'a> {
    name: String,
    entries: Option<&'a Section>,
}

impl SectionView<'_> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.and_then(|e| e.get(key))
    }

    fn wrong(&self, key: &str, want: &str, got: &Value) -> Error {
        Error::config(
            &self.name,
            key,
            format!("expected {want}, got {} `{got}`", got.type_name()),
        )
    }

    pub fn int(&self, key: &str, default: i64) -> Result<i64> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Int(i)) => Ok(*i),
            Some(v) => Err(self.wrong(key, "integer", v)),
        }
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.int(key, default as i64)?;
        usize::try_from(v).map_err(|_| Error::config(&self.name, key, format!("must be non-negative, got {v}")))
    }

    pub fn positive(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.usize(key, default)?;
        if v == 0 {
            return Err(Error::config(&self.name, key, "must be positive"));
        }
        Ok(v)
    }

    pub fn real(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Real(r)) => Ok(*r),
            Some(Value::Int(i)) => Ok(*i as f64),
            Some(v) => Err(self.wrong(key, "real", v)),
        }
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Bool(b)) => Ok(*b),
            Some(v) => Err(self.wrong(key, "boolean", v)),
        }
    }

    pub fn string(&self, key: &str, default: &str) -> Result<String> {
        match self.get(key) {
            None => Ok(default.to_string()),
            Some(Value::Str(s)) => Ok(s.clone()),
            Some(v) => Err(self.wrong(key, "string", v)),
        }
    }
}
