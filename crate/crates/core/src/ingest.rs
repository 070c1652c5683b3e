//! Rollout log format: one JSON object per line. The first record is a
//! `meta` record describing the environment; every following record is a
//! `step`. Loading assembles the steps into a [`Session`].

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::rollout::{Episode, Experience, Session, SessionMeta};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: schema violation in `{field}`: {reason}")]
    SchemaViolation {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("log contains no step records")]
    EmptyLog,
    #[error("line {line}: `{field}` has length {found}, expected {expected}")]
    DimensionMismatch {
        line: usize,
        field: String,
        expected: usize,
        found: usize,
    },
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::Io(_) => "IO_ERROR",
            IngestError::MalformedRecord { .. } => "MALFORMED_RECORD",
            IngestError::SchemaViolation { .. } => "SCHEMA_VIOLATION",
            IngestError::EmptyLog => "EMPTY_LOG",
            IngestError::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            IngestError::Io(_) => 1,
            IngestError::MalformedRecord { .. } => 2,
            IngestError::SchemaViolation { .. } => 3,
            IngestError::EmptyLog => 4,
            IngestError::DimensionMismatch { .. } => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Meta,
    Step,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub episode: usize,
    pub t: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub next_obs: Option<Vec<f64>>,
    pub value: Option<f64>,
    pub next_value: Option<f64>,
    pub reward_components: Option<Vec<f64>>,
    pub render: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogRecord {
    Meta(SessionMeta),
    Step(StepRecord),
}

impl LogRecord {
    pub fn kind(&self) -> RecordKind {
        match self {
            LogRecord::Meta(_) => RecordKind::Meta,
            LogRecord::Step(_) => RecordKind::Step,
        }
    }
}

/// A parsed record plus any forward-compatibility warnings (unknown fields).
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRecord {
    pub record: LogRecord,
    pub unknown_fields: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub episodes_loaded: usize,
    pub steps_loaded: usize,
    pub warnings: Vec<String>,
    pub td_available: bool,
    pub renders_available: bool,
}

const META_FIELDS: &[&str] = &[
    "type",
    "env",
    "obs_dim",
    "action_dim",
    "discount",
    "obs_labels",
    "action_labels",
    "reward_component_labels",
];

const STEP_FIELDS: &[&str] = &[
    "type",
    "episode",
    "t",
    "obs",
    "action",
    "reward",
    "done",
    "next_obs",
    "value",
    "next_value",
    "reward_components",
    "render",
];

struct Fields<'a> {
    line: usize,
    map: &'a Map<String, Value>,
}

impl<'a> Fields<'a> {
    fn violation(&self, field: &str, reason: impl Into<String>) -> IngestError {
        IngestError::SchemaViolation {
            line: self.line,
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    fn required(&self, field: &str) -> Result<&'a Value, IngestError> {
        match self.map.get(field) {
            Some(Value::Null) | None => Err(self.violation(field, "missing")),
            Some(v) => Ok(v),
        }
    }

    fn optional(&self, field: &str) -> Option<&'a Value> {
        self.map.get(field).filter(|v| !v.is_null())
    }

    fn as_f64(&self, field: &str, v: &Value) -> Result<f64, IngestError> {
        v.as_f64()
            .ok_or_else(|| self.violation(field, "expected a number"))
    }

    fn as_index(&self, field: &str, v: &Value) -> Result<usize, IngestError> {
        v.as_u64()
            .map(|n| n as usize)
            .ok_or_else(|| self.violation(field, "expected a non-negative integer"))
    }

    fn as_f64_vec(&self, field: &str, v: &Value) -> Result<Vec<f64>, IngestError> {
        let arr = v
            .as_array()
            .ok_or_else(|| self.violation(field, "expected an array of numbers"))?;
        arr.iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| self.violation(field, "expected an array of numbers"))
            })
            .collect()
    }

    fn as_string_vec(&self, field: &str, v: &Value) -> Result<Vec<String>, IngestError> {
        let arr = v
            .as_array()
            .ok_or_else(|| self.violation(field, "expected an array of strings"))?;
        arr.iter()
            .map(|x| {
                x.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| self.violation(field, "expected an array of strings"))
            })
            .collect()
    }

    fn unknown(&self, known: &[&str]) -> Vec<String> {
        self.map
            .keys()
            .filter(|k| !known.contains(&k.as_str()))
            .cloned()
            .collect()
    }
}

/// Parses one line of a rollout log. `line` is the 1-based line number used
/// in error messages.
pub fn parse_record(text: &str, line: usize) -> Result<ParsedRecord, IngestError> {
    let value: Value = serde_json::from_str(text).map_err(|e| IngestError::MalformedRecord {
        line,
        reason: e.to_string(),
    })?;
    let Value::Object(map) = value else {
        return Err(IngestError::MalformedRecord {
            line,
            reason: "record is not a JSON object".into(),
        });
    };
    let f = Fields { line, map: &map };
    let kind = f
        .required("type")?
        .as_str()
        .ok_or_else(|| f.violation("type", "expected a string"))?;
    match kind {
        "meta" => parse_meta(&f),
        "step" => parse_step(&f),
        other => Err(f.violation("type", format!("unknown record type `{other}`"))),
    }
}

fn parse_meta(f: &Fields<'_>) -> Result<ParsedRecord, IngestError> {
    let env_name = f
        .required("env")?
        .as_str()
        .ok_or_else(|| f.violation("env", "expected a string"))?
        .to_string();
    let obs_dim = f.as_index("obs_dim", f.required("obs_dim")?)?;
    if obs_dim == 0 {
        return Err(f.violation("obs_dim", "must be positive"));
    }
    let action_dim = f.as_index("action_dim", f.required("action_dim")?)?;
    if action_dim == 0 {
        return Err(f.violation("action_dim", "must be positive"));
    }
    let discount = f.as_f64("discount", f.required("discount")?)?;
    if !(0.0..=1.0).contains(&discount) {
        return Err(f.violation("discount", "must lie in [0, 1]"));
    }
    let labels = |field: &str, dim: Option<usize>| -> Result<Option<Vec<String>>, IngestError> {
        let Some(v) = f.optional(field) else {
            return Ok(None);
        };
        let labels = f.as_string_vec(field, v)?;
        if let Some(dim) = dim {
            if labels.len() != dim {
                return Err(IngestError::DimensionMismatch {
                    line: f.line,
                    field: field.to_string(),
                    expected: dim,
                    found: labels.len(),
                });
            }
        }
        Ok(Some(labels))
    };
    let meta = SessionMeta {
        env_name,
        obs_dim,
        action_dim,
        discount,
        obs_labels: labels("obs_labels", Some(obs_dim))?,
        action_labels: labels("action_labels", Some(action_dim))?,
        reward_component_labels: labels("reward_component_labels", None)?,
    };
    Ok(ParsedRecord {
        record: LogRecord::Meta(meta),
        unknown_fields: f.unknown(META_FIELDS),
    })
}

fn parse_step(f: &Fields<'_>) -> Result<ParsedRecord, IngestError> {
    let opt_f64 = |field: &str| f.optional(field).map(|v| f.as_f64(field, v)).transpose();
    let opt_vec = |field: &str| f.optional(field).map(|v| f.as_f64_vec(field, v)).transpose();
    let step = StepRecord {
        episode: f.as_index("episode", f.required("episode")?)?,
        t: f.as_index("t", f.required("t")?)?,
        obs: f.as_f64_vec("obs", f.required("obs")?)?,
        action: f.as_f64_vec("action", f.required("action")?)?,
        reward: f.as_f64("reward", f.required("reward")?)?,
        done: f
            .required("done")?
            .as_bool()
            .ok_or_else(|| f.violation("done", "expected a boolean"))?,
        next_obs: opt_vec("next_obs")?,
        value: opt_f64("value")?,
        next_value: opt_f64("next_value")?,
        reward_components: opt_vec("reward_components")?,
        render: f
            .optional("render")
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| f.violation("render", "expected a string"))
            })
            .transpose()?,
    };
    Ok(ParsedRecord {
        record: LogRecord::Step(step),
        unknown_fields: f.unknown(STEP_FIELDS),
    })
}

/// Where renders live. Relative render paths resolve against `render_root`;
/// inline `data:` renders are written under `inline_render_dir`, which must
/// sit inside `render_root`.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub render_root: Option<PathBuf>,
    pub inline_render_dir: Option<PathBuf>,
}

impl LoadOptions {
    pub fn for_log_file(path: &Path) -> Self {
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "log".into());
        Self {
            inline_render_dir: Some(root.join(format!("{stem}.renders"))),
            render_root: Some(root),
        }
    }
}

pub fn load_session(path: impl AsRef<Path>) -> Result<(Session, IngestReport), IngestError> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    load_session_from_reader(BufReader::new(file), &LoadOptions::for_log_file(path))
}

pub fn load_session_from_reader<R: BufRead>(
    reader: R,
    options: &LoadOptions,
) -> Result<(Session, IngestReport), IngestError> {
    let mut meta: Option<SessionMeta> = None;
    let mut steps: Vec<(usize, StepRecord)> = Vec::new();
    let mut unknown: BTreeMap<String, usize> = BTreeMap::new();
    let mut component_len: Option<usize> = None;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| match e.kind() {
            io::ErrorKind::InvalidData => IngestError::MalformedRecord {
                line: line_no,
                reason: "invalid UTF-8".into(),
            },
            _ => IngestError::Io(e),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed = parse_record(&text, line_no)?;
        for field in parsed.unknown_fields {
            unknown.entry(field).or_insert(line_no);
        }
        match parsed.record {
            LogRecord::Meta(m) => {
                if meta.is_some() || !steps.is_empty() {
                    return Err(IngestError::SchemaViolation {
                        line: line_no,
                        field: "type".into(),
                        reason: "exactly one meta record is allowed, before all steps".into(),
                    });
                }
                component_len = m.reward_component_labels.as_ref().map(Vec::len);
                meta = Some(m);
            }
            LogRecord::Step(step) => {
                let Some(m) = meta.as_ref() else {
                    return Err(IngestError::SchemaViolation {
                        line: line_no,
                        field: "type".into(),
                        reason: "step record before the meta record".into(),
                    });
                };
                check_dims(m, &step, line_no, &mut component_len)?;
                steps.push((line_no, step));
            }
        }
    }

    let meta = meta.ok_or(IngestError::EmptyLog)?;
    if steps.is_empty() {
        return Err(IngestError::EmptyLog);
    }

    let mut warnings: Vec<String> = unknown
        .iter()
        .map(|(field, line)| format!("unknown field `{field}` ignored (first seen on line {line})"))
        .collect();
    let (episodes, repairs) = assemble_episodes(steps, options)?;
    let mut session = Session::new(meta, episodes).with_render_root(options.render_root.clone());
    session.repairs = repairs;
    warnings.extend(validate_session(&session));

    let report = IngestReport {
        episodes_loaded: session.episodes.len(),
        steps_loaded: session.len(),
        warnings,
        td_available: session.td_available(),
        renders_available: session.renders_available(),
    };
    Ok((session, report))
}

fn check_dims(
    meta: &SessionMeta,
    step: &StepRecord,
    line: usize,
    component_len: &mut Option<usize>,
) -> Result<(), IngestError> {
    let check = |field: &str, expected: usize, found: usize| {
        if expected == found {
            Ok(())
        } else {
            Err(IngestError::DimensionMismatch {
                line,
                field: field.to_string(),
                expected,
                found,
            })
        }
    };
    check("obs", meta.obs_dim, step.obs.len())?;
    check("action", meta.action_dim, step.action.len())?;
    if let Some(next) = &step.next_obs {
        check("next_obs", meta.obs_dim, next.len())?;
    }
    if let Some(c) = &step.reward_components {
        match component_len {
            Some(n) => check("reward_components", *n, c.len())?,
            None => *component_len = Some(c.len()),
        }
    }
    Ok(())
}

fn assemble_episodes(
    steps: Vec<(usize, StepRecord)>,
    options: &LoadOptions,
) -> Result<(Vec<Episode>, Vec<String>), IngestError> {
    let mut repairs = Vec::new();

    // Explicit episode indices decide boundaries. A `done` that the index
    // contradicts is cleared below.
    let mut groups: Vec<(usize, Vec<(usize, StepRecord)>)> = Vec::new();
    for (line, step) in steps {
        if groups.last().is_none_or(|(idx, _)| *idx != step.episode) {
            groups.push((step.episode, Vec::new()));
        }
        groups.last_mut().unwrap().1.push((line, step));
    }

    let mut seen = HashSet::new();
    let mut renumbered = false;
    let mut episodes = Vec::with_capacity(groups.len());
    for (position, (log_index, group)) in groups.into_iter().enumerate() {
        if !seen.insert(log_index) {
            repairs.push(format!(
                "episode index {log_index} reappears non-contiguously; loaded as episode {position}"
            ));
        }
        if log_index != position {
            renumbered = true;
        }
        let n = group.len();
        let mut gap = false;
        let mut synthesized = 0;
        let mut cleared_done = 0;
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let (line, step) = &group[k];
            if step.t != k {
                gap = true;
            }
            let next_obs = match &step.next_obs {
                Some(v) => v.clone(),
                None if k + 1 < n => {
                    synthesized += 1;
                    group[k + 1].1.obs.clone()
                }
                None => {
                    repairs.push(format!(
                        "episode {position}: final step lacks next_obs; copied from obs"
                    ));
                    step.obs.clone()
                }
            };
            let mut done = step.done;
            if done && k + 1 < n {
                cleared_done += 1;
                done = false;
            }
            let render = match &step.render {
                Some(r) if r.starts_with("data:") => {
                    Some(materialize_render(r, position, k, *line, options)?)
                }
                other => other.clone(),
            };
            out.push(Experience {
                episode_index: position,
                t: k,
                obs: step.obs.clone(),
                action: step.action.clone(),
                reward: step.reward,
                reward_components: step.reward_components.clone(),
                next_obs,
                done,
                value: step.value,
                next_value: step.next_value,
                render,
            });
        }
        if gap {
            repairs.push(format!("episode {position}: non-contiguous timesteps renumbered from 0"));
        }
        if synthesized > 0 {
            repairs.push(format!(
                "episode {position}: next_obs synthesized from the following obs for {synthesized} steps"
            ));
        }
        if cleared_done > 0 {
            repairs.push(format!(
                "episode {position}: done flag on {cleared_done} non-final steps conflicts with the episode index; index kept"
            ));
        }
        if !out.last().is_some_and(|s| s.done) {
            repairs.push(format!("episode {position}: ends without a terminal step"));
        }
        episodes.push(Episode {
            index: position,
            steps: out,
        });
    }
    if renumbered {
        repairs.insert(0, "episode indices renumbered to 0..n in file order".into());
    }
    Ok((episodes, repairs))
}

fn materialize_render(
    data_url: &str,
    episode: usize,
    t: usize,
    line: usize,
    options: &LoadOptions,
) -> Result<String, IngestError> {
    let violation = |reason: &str| IngestError::SchemaViolation {
        line,
        field: "render".into(),
        reason: reason.into(),
    };
    let (_, encoded) = data_url
        .split_once("base64,")
        .ok_or_else(|| violation("inline render must be base64 encoded"))?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(encoded.trim())
        .map_err(|_| violation("invalid base64 payload"))?;
    let (Some(root), Some(dir)) = (&options.render_root, &options.inline_render_dir) else {
        return Err(violation("inline renders need a render directory"));
    };
    fs::create_dir_all(dir)?;
    let name = format!("ep{episode:05}_t{t:06}.png");
    fs::write(dir.join(&name), bytes)?;
    let rel = dir.strip_prefix(root).unwrap_or(dir).join(name);
    Ok(rel.to_string_lossy().replace('\\', "/"))
}

/// Non-fatal observations about a session. Never fails.
pub fn validate_session(session: &Session) -> Vec<String> {
    let mut warnings = session.repairs.clone();

    let missing_renders = session.experiences().filter(|e| e.render.is_none()).count();
    if missing_renders == session.len() {
        warnings.push("render references absent; render viewports disabled".into());
    } else if missing_renders > 0 {
        warnings.push(format!("{missing_renders} steps lack render references"));
    }

    if session.len() > 1 {
        for k in 0..session.meta.obs_dim {
            let mut values = session.experiences().map(|e| e.obs[k]);
            let first = values.next().unwrap_or(0.0);
            if values.all(|v| v == first) {
                warnings.push(format!(
                    "observation dimension {k} ({}) is constant",
                    session.meta.obs_label(k)
                ));
            }
        }
    }

    if !session.td_available() {
        warnings.push("value estimates absent; TD viewports disabled".into());
    }
    warnings
}

#[derive(Serialize)]
struct MetaLine<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    env: &'a str,
    obs_dim: usize,
    action_dim: usize,
    discount: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    obs_labels: &'a Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    action_labels: &'a Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reward_component_labels: &'a Option<Vec<String>>,
}

#[derive(Serialize)]
struct StepLine<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    episode: usize,
    t: usize,
    obs: &'a [f64],
    action: &'a [f64],
    reward: f64,
    done: bool,
    next_obs: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    next_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reward_components: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    render: Option<&'a str>,
}

pub fn write_meta<W: Write>(meta: &SessionMeta, out: &mut W) -> io::Result<()> {
    let line = MetaLine {
        kind: "meta",
        env: &meta.env_name,
        obs_dim: meta.obs_dim,
        action_dim: meta.action_dim,
        discount: meta.discount,
        obs_labels: &meta.obs_labels,
        action_labels: &meta.action_labels,
        reward_component_labels: &meta.reward_component_labels,
    };
    serde_json::to_writer(&mut *out, &line)?;
    out.write_all(b"\n")
}

pub fn write_step<W: Write>(exp: &Experience, out: &mut W) -> io::Result<()> {
    let line = StepLine {
        kind: "step",
        episode: exp.episode_index,
        t: exp.t,
        obs: &exp.obs,
        action: &exp.action,
        reward: exp.reward,
        done: exp.done,
        next_obs: &exp.next_obs,
        value: exp.value,
        next_value: exp.next_value,
        reward_components: exp.reward_components.as_deref(),
        render: exp.render.as_deref(),
    };
    serde_json::to_writer(&mut *out, &line)?;
    out.write_all(b"\n")
}

/// Writes a session back out in the log format.
pub fn write_session<W: Write>(session: &Session, out: &mut W) -> io::Result<()> {
    write_meta(&session.meta, out)?;
    for exp in session.experiences() {
        write_step(exp, out)?;
    }
    Ok(())
}
