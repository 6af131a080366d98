//! Domain records shared by every stage, and their line-delimited I/O.
//!
//! Trajectories come in as one JSON object per line. Synthesized samples go
//! out the same way, optionally preceded by a `#` header line that carries
//! the fingerprint of the configuration that produced them. Screenshots are
//! only ever referenced by locator.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("coordinate ({x}, {y}) outside the unit square")]
    CoordinateOutOfRange { x: f64, y: f64 },
    #[error(
        "invalid identifier {0:?}: must be non-empty, without whitespace, not starting with '#'"
    )]
    BadId(String),
    #[error("step indices must be contiguous from 0; found {found} at position {position}")]
    StepIndex { position: usize, found: usize },
    #[error("plan subgoal {0} spans multiple lines")]
    MultilineSubgoal(usize),
    #[error("sample id {found:?} does not match {expected:?}")]
    SampleId { expected: String, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScrollDirection {
    Up,
    Down,
    Left,
    Right,
}

impl fmt::Display for ScrollDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScrollDirection::Up => "up",
            ScrollDirection::Down => "down",
            ScrollDirection::Left => "left",
            ScrollDirection::Right => "right",
        };
        f.write_str(s)
    }
}

/// A low-level GUI action. Coordinates are normalized to the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Click { x: f64, y: f64 },
    Type { text: String },
    Scroll { direction: ScrollDirection },
    PressBack,
    PressHome,
    Enter,
    OpenApp { app: String },
    Wait,
    LongPress { x: f64, y: f64 },
    Complete,
    Impossible,
}

impl Action {
    pub fn kind(&self) -> &'static str {
        match self {
            Action::Click { .. } => "CLICK",
            Action::Type { .. } => "TYPE",
            Action::Scroll { .. } => "SCROLL",
            Action::PressBack => "PRESS_BACK",
            Action::PressHome => "PRESS_HOME",
            Action::Enter => "ENTER",
            Action::OpenApp { .. } => "OPEN_APP",
            Action::Wait => "WAIT",
            Action::LongPress { .. } => "LONG_PRESS",
            Action::Complete => "COMPLETE",
            Action::Impossible => "IMPOSSIBLE",
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        match self {
            Action::Click { x, y } | Action::LongPress { x, y } => {
                let inside = |v: &f64| (0.0..=1.0).contains(v);
                if inside(x) && inside(y) {
                    Ok(())
                } else {
                    Err(ValidationError::CoordinateOutOfRange { x: *x, y: *y })
                }
            }
            Action::Type { text } if text.is_empty() => Err(ValidationError::Empty("TYPE text")),
            Action::OpenApp { app } if app.trim().is_empty() => {
                Err(ValidationError::Empty("OPEN_APP app name"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Action {
    /// Compact rendering used inside prompts, e.g. `CLICK(0.910, 0.050)`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Click { x, y } | Action::LongPress { x, y } => {
                write!(f, "{}({x:.3}, {y:.3})", self.kind())
            }
            Action::Type { text } => write!(f, "TYPE({text:?})"),
            Action::Scroll { direction } => write!(f, "SCROLL({direction})"),
            Action::OpenApp { app } => write!(f, "OPEN_APP({app:?})"),
            other => f.write_str(other.kind()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub screenshot_ref: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ui_metadata: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub task: String,
    pub steps: Vec<Step>,
    /// Screen reached after the last action, when the recorder captured one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_screenshot_ref: Option<String>,
}

pub(crate) fn check_id(id: &str) -> Result<(), ValidationError> {
    if id.is_empty() || id.starts_with('#') || id.chars().any(char::is_whitespace) {
        return Err(ValidationError::BadId(id.to_string()));
    }
    Ok(())
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), ValidationError> {
        check_id(&self.id)?;
        if self.task.trim().is_empty() {
            return Err(ValidationError::Empty("task"));
        }
        if self.steps.is_empty() {
            return Err(ValidationError::Empty("steps"));
        }
        for (position, step) in self.steps.iter().enumerate() {
            if step.index != position {
                return Err(ValidationError::StepIndex {
                    position,
                    found: step.index,
                });
            }
            if step.screenshot_ref.is_empty() {
                return Err(ValidationError::Empty("screenshot_ref"));
            }
            step.action.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Ordered subgoal decomposition of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Plan {
    pub subgoals: Vec<String>,
}

impl Plan {
    pub fn new(subgoals: Vec<String>) -> Result<Self, ValidationError> {
        let plan = Plan { subgoals };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.subgoals.is_empty() {
            return Err(ValidationError::Empty("plan"));
        }
        for (i, goal) in self.subgoals.iter().enumerate() {
            if goal.trim().is_empty() {
                return Err(ValidationError::Empty("plan subgoal"));
            }
            if goal.contains(['\n', '\r']) {
                return Err(ValidationError::MultilineSubgoal(i));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub pre_state: String,
    pub post_state: String,
    pub trigger: String,
    pub mechanism: String,
    pub chain_of_thought: String,
}

impl Rationale {
    pub fn fields(&self) -> [&str; 5] {
        [
            &self.pre_state,
            &self.post_state,
            &self.trigger,
            &self.mechanism,
            &self.chain_of_thought,
        ]
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        const NAMES: [&str; 5] = [
            "pre_state",
            "post_state",
            "trigger",
            "mechanism",
            "chain_of_thought",
        ];
        for (name, value) in NAMES.iter().zip(self.fields()) {
            if value.trim().is_empty() {
                return Err(ValidationError::Empty(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesizedSample {
    pub id: String,
    pub task: String,
    pub plan: Plan,
    pub grounded_action: String,
    pub rationale: Rationale,
}

/// `<trajectory_id>#<step_index>`
pub fn sample_id(trajectory_id: &str, step_index: usize) -> String {
    format!("{trajectory_id}#{step_index}")
}

/// Inverse of [`sample_id`].
pub fn split_sample_id(id: &str) -> Option<(&str, usize)> {
    let (trajectory, step) = id.rsplit_once('#')?;
    Some((trajectory, step.parse().ok()?))
}

impl SynthesizedSample {
    pub fn new(
        trajectory_id: &str,
        step_index: usize,
        task: String,
        plan: Plan,
        grounded_action: String,
        rationale: Rationale,
    ) -> Result<Self, ValidationError> {
        check_id(trajectory_id)?;
        let sample = SynthesizedSample {
            id: sample_id(trajectory_id, step_index),
            task,
            plan,
            grounded_action,
            rationale,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        match split_sample_id(&self.id) {
            Some((trajectory, _)) => check_id(trajectory)?,
            None => {
                return Err(ValidationError::SampleId {
                    expected: "<trajectory_id>#<step_index>".into(),
                    found: self.id.clone(),
                })
            }
        }
        if self.task.trim().is_empty() {
            return Err(ValidationError::Empty("task"));
        }
        if self.grounded_action.trim().is_empty() {
            return Err(ValidationError::Empty("grounded_action"));
        }
        self.plan.validate()?;
        self.rationale.validate()
    }
}

/// Leading `#` line of an artifact file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordHeader {
    pub stage: String,
    pub fingerprint: String,
}

impl RecordHeader {
    pub fn new(stage: impl Into<String>, fingerprint: impl Into<String>) -> Self {
        RecordHeader {
            stage: stage.into(),
            fingerprint: fingerprint.into(),
        }
    }

    pub fn to_line(&self) -> String {
        format!(
            "# cider stage={} fingerprint={}",
            self.stage, self.fingerprint
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# cider ")?;
        let mut stage = None;
        let mut fingerprint = None;
        for part in rest.split_whitespace() {
            if let Some(v) = part.strip_prefix("stage=") {
                stage = Some(v.to_string());
            } else if let Some(v) = part.strip_prefix("fingerprint=") {
                fingerprint = Some(v.to_string());
            }
        }
        Some(RecordHeader {
            stage: stage?,
            fingerprint: fingerprint?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Parsed records plus the per-line failures encountered along the way.
#[derive(Debug, Clone)]
pub struct RecordBatch<T> {
    pub header: Option<RecordHeader>,
    pub records: Vec<T>,
    pub errors: Vec<LineError>,
}

impl<T> Default for RecordBatch<T> {
    fn default() -> Self {
        RecordBatch {
            header: None,
            records: Vec::new(),
            errors: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
#[error("write failed after {written} record(s): {source}")]
pub struct WriteError {
    pub written: usize,
    #[source]
    pub source: io::Error,
}

fn read_records<T, R, F>(source: R, mut accept: F) -> io::Result<RecordBatch<T>>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
    F: FnMut(&T) -> Result<(), String>,
{
    let mut batch = RecordBatch::default();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if batch.header.is_none() && batch.records.is_empty() {
                batch.header = RecordHeader::parse(&line);
            }
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(record) => match accept(&record) {
                Ok(()) => batch.records.push(record),
                Err(message) => batch.errors.push(LineError {
                    line: lineno,
                    message,
                }),
            },
            Err(e) => batch.errors.push(LineError {
                line: lineno,
                message: e.to_string(),
            }),
        }
    }
    Ok(batch)
}

/// Reads one trajectory per line. Malformed or invalid lines are collected
/// as errors and skipped; duplicate ids are rejected after their first use.
pub fn read_trajectories<R: BufRead>(source: R) -> io::Result<RecordBatch<Trajectory>> {
    let mut seen = HashSet::new();
    read_records(source, |t: &Trajectory| {
        t.validate().map_err(|e| e.to_string())?;
        if !seen.insert(t.id.clone()) {
            return Err(format!("duplicate trajectory id {:?}", t.id));
        }
        Ok(())
    })
}

pub fn read_samples<R: BufRead>(source: R) -> io::Result<RecordBatch<SynthesizedSample>> {
    let mut seen = HashSet::new();
    read_records(source, |s: &SynthesizedSample| {
        s.validate().map_err(|e| e.to_string())?;
        if !seen.insert(s.id.clone()) {
            return Err(format!("duplicate sample id {:?}", s.id));
        }
        Ok(())
    })
}

/// Writes any serializable records one per line after an optional header.
pub fn write_records<T: Serialize, W: Write>(
    records: &[T],
    header: Option<&RecordHeader>,
    sink: &mut W,
) -> Result<usize, WriteError> {
    let fail = |written, source| WriteError { written, source };
    if let Some(h) = header {
        writeln!(sink, "{}", h.to_line()).map_err(|e| fail(0, e))?;
    }
    for (written, record) in records.iter().enumerate() {
        serde_json::to_writer(&mut *sink, record).map_err(|e| fail(written, e.into()))?;
        sink.write_all(b"\n").map_err(|e| fail(written, e))?;
    }
    sink.flush().map_err(|e| fail(records.len(), e))?;
    Ok(records.len())
}

/// Writes samples one per line. Every sample is validated first so an
/// invalid record never reaches the sink.
pub fn write_samples<W: Write>(
    samples: &[SynthesizedSample],
    header: Option<&RecordHeader>,
    sink: &mut W,
) -> Result<usize, WriteError> {
    for sample in samples {
        if let Err(e) = sample.validate() {
            return Err(WriteError {
                written: 0,
                source: io::Error::new(io::ErrorKind::InvalidInput, format!("{}: {e}", sample.id)),
            });
        }
    }
    write_records(samples, header, sink)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn sample(traj: &str, step: usize, text: &str) -> SynthesizedSample {
        SynthesizedSample::new(
            traj,
            step,
            format!("task {text}"),
            Plan::new(vec!["open app".into(), format!("do {text}")]).unwrap(),
            format!("tap {text}"),
            Rationale {
                pre_state: "home screen".into(),
                post_state: format!("{text} screen"),
                trigger: "the button is visible".into(),
                mechanism: "tapping opens it".into(),
                chain_of_thought: "because the goal needs it".into(),
            },
        )
        .unwrap()
    }

    #[test]
    fn minimal_trajectory_record() {
        let line = r#"{"id":"t1","task":"open clock","steps":[{"index":0,"screenshot_ref":"s/0.png","action":{"kind":"OPEN_APP","payload":{"app":"Clock"}}}]}"#;
        let batch = read_trajectories(line.as_bytes()).unwrap();
        assert!(batch.errors.is_empty(), "{:?}", batch.errors);
        assert_eq!(batch.records.len(), 1);
        assert_eq!(batch.records[0].len(), 1);
        assert_eq!(batch.records[0].task, "open clock");
    }

    #[test]
    fn missing_task_is_reported_and_skipped() {
        let input = concat!(
            r#"{"id":"a","task":"x","steps":[{"index":0,"screenshot_ref":"s","action":{"kind":"WAIT"}}]}"#,
            "\n",
            r#"{"id":"b","steps":[{"index":0,"screenshot_ref":"s","action":{"kind":"WAIT"}}]}"#,
            "\n",
            r#"{"id":"c","task":"y","steps":[{"index":0,"screenshot_ref":"s","action":{"kind":"ENTER"}}]}"#,
            "\n"
        );
        let batch = read_trajectories(input.as_bytes()).unwrap();
        let ids: Vec<_> = batch.records.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);
        assert_eq!(batch.errors.len(), 1);
        assert_eq!(batch.errors[0].line, 2);
        assert!(batch.errors[0].message.contains("task"));
    }

    #[test]
    fn empty_source_yields_nothing() {
        let batch = read_trajectories(&b""[..]).unwrap();
        assert!(batch.records.is_empty() && batch.errors.is_empty());
    }

    #[test]
    fn invalid_actions_rejected() {
        assert!(Action::Click { x: 1.2, y: 0.1 }.validate().is_err());
        assert!(Action::Type {
            text: String::new()
        }
        .validate()
        .is_err());
        assert!(Action::LongPress { x: 0.0, y: 1.0 }.validate().is_ok());
    }

    #[test]
    fn step_indices_must_be_contiguous() {
        let line = r#"{"id":"t","task":"x","steps":[{"index":1,"screenshot_ref":"s","action":{"kind":"WAIT"}}]}"#;
        let batch = read_trajectories(line.as_bytes()).unwrap();
        assert_eq!(batch.errors.len(), 1);
    }

    #[test]
    fn duplicate_trajectory_ids() {
        let l = r#"{"id":"t","task":"x","steps":[{"index":0,"screenshot_ref":"s","action":{"kind":"WAIT"}}]}"#;
        let input = format!("{l}\n{l}\n");
        let batch = read_trajectories(input.as_bytes()).unwrap();
        assert_eq!(batch.records.len(), 1);
        assert_eq!(batch.errors[0].line, 2);
    }

    #[test]
    fn action_wire_format() {
        let json = serde_json::to_string(&Action::Click { x: 0.91, y: 0.05 }).unwrap();
        assert_eq!(json, r#"{"kind":"CLICK","payload":{"x":0.91,"y":0.05}}"#);
        let json = serde_json::to_string(&Action::PressHome).unwrap();
        assert_eq!(json, r#"{"kind":"PRESS_HOME"}"#);
    }

    #[test]
    fn write_empty_and_ordered() {
        let mut out = Vec::new();
        assert_eq!(write_samples(&[], None, &mut out).unwrap(), 0);
        assert!(out.is_empty());

        let samples = vec![
            sample("b", 0, "x"),
            sample("a", 2, "y"),
            sample("a", 1, "z"),
        ];
        let mut out = Vec::new();
        assert_eq!(write_samples(&samples, None, &mut out).unwrap(), 3);
        let text = String::from_utf8(out).unwrap();
        let ids: Vec<String> = text
            .lines()
            .map(|l| serde_json::from_str::<SynthesizedSample>(l).unwrap().id)
            .collect();
        assert_eq!(ids, ["b#0", "a#2", "a#1"]);
    }

    #[test]
    fn sample_field_order_is_stable() {
        let mut out = Vec::new();
        write_samples(&[sample("t", 0, "x")], None, &mut out).unwrap();
        let line = String::from_utf8(out).unwrap();
        let keys = [
            "\"id\"",
            "\"task\"",
            "\"plan\"",
            "\"grounded_action\"",
            "\"rationale\"",
            "\"pre_state\"",
            "\"chain_of_thought\"",
        ];
        let positions: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn header_round_trip() {
        let header = RecordHeader::new("synth", "abc123");
        let mut out = Vec::new();
        write_samples(&[sample("t", 0, "x")], Some(&header), &mut out).unwrap();
        let batch = read_samples(out.as_slice()).unwrap();
        assert_eq!(batch.header, Some(header));
        assert_eq!(batch.records.len(), 1);
    }

    #[test]
    fn invalid_sample_is_not_written() {
        let mut bad = sample("t", 0, "x");
        bad.rationale.mechanism.clear();
        let mut out = Vec::new();
        let err = write_samples(&[bad], None, &mut out).unwrap_err();
        assert_eq!(err.written, 0);
        assert!(out.is_empty());
    }

    struct FailAfter(usize);
    impl Write for FailAfter {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            if buf == b"\n" {
                if self.0 == 0 {
                    return Err(io::Error::other("disk full"));
                }
                self.0 -= 1;
            }
            Ok(buf.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn sink_failure_reports_partial_count() {
        let samples: Vec<_> = (0..4).map(|i| sample("t", i, "x")).collect();
        let err = write_samples(&samples, None, &mut FailAfter(2)).unwrap_err();
        assert_eq!(err.written, 2);
    }

    #[test]
    fn sample_ids_split_back() {
        assert_eq!(split_sample_id("traj-1#12"), Some(("traj-1", 12)));
        assert_eq!(split_sample_id("a#b#3"), Some(("a#b", 3)));
        assert_eq!(split_sample_id("nohash"), None);
    }

    fn text() -> impl Strategy<Value = String> {
        "[A-Za-z0-9 ,.'\"\\\\é😀\n-]{1,40}".prop_filter("non-blank", |s| !s.trim().is_empty())
    }

    prop_compose! {
        fn arb_sample(step: usize)(
            traj in "[a-z][a-z0-9_-]{0,8}",
            task in text(),
            goals in prop::collection::vec("[^\n\r]{1,20}".prop_filter("non-blank", |s| !s.trim().is_empty()), 1..4),
            action in text(),
            fields in prop::array::uniform5(text()),
        ) -> SynthesizedSample {
            let [pre_state, post_state, trigger, mechanism, chain_of_thought] = fields;
            SynthesizedSample::new(&traj, step, task, Plan::new(goals).unwrap(), action, Rationale {
                pre_state, post_state, trigger, mechanism, chain_of_thought,
            }).unwrap()
        }
    }

    fn arb_samples() -> impl Strategy<Value = Vec<SynthesizedSample>> {
        prop::collection::vec(arb_sample(0), 0..50).prop_map(|mut v| {
            for (i, s) in v.iter_mut().enumerate() {
                let (traj, _) = split_sample_id(&s.id).unwrap();
                s.id = sample_id(traj, i);
            }
            v
        })
    }

    proptest! {
        #[test]
        fn write_read_round_trip(samples in arb_samples()) {
            let mut first = Vec::new();
            write_samples(&samples, None, &mut first).unwrap();
            let batch = read_samples(first.as_slice()).unwrap();
            prop_assert!(batch.errors.is_empty());
            prop_assert_eq!(&batch.records, &samples);
            let mut second = Vec::new();
            write_samples(&batch.records, None, &mut second).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
