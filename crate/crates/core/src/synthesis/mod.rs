//! Stage one: turn GUI trajectories into self-contained textual samples.
//!
//! Per trajectory the task is planned once. Per step the raw action is
//! grounded into a functional description, the screens before and after are
//! described in text, and a causal analyst explains the transition.

pub mod client;
pub mod parse;
pub mod templates;

use std::collections::HashMap;
use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{ClientError, ClientIdentity, ExpertClient, MockClient};
pub use templates::PromptTemplates;

use crate::model::{Action, Plan, Rationale, SynthesizedSample, Trajectory};

/// Extra attempts after the first failed one.
pub const DEFAULT_RETRIES: usize = 2;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SynthesisError {
    #[error("{stage}: could not parse response after {attempts} attempt(s): {raw:?}")]
    Unparseable {
        stage: &'static str,
        attempts: usize,
        raw: String,
    },
    #[error("{stage}: {source}")]
    Client {
        stage: &'static str,
        #[source]
        source: ClientError,
    },
    #[error("screenshot {locator:?} could not be described: {source}")]
    Screenshot {
        locator: String,
        #[source]
        source: ClientError,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl SynthesisError {
    /// Service outages and rejected requests; these make a run fail.
    pub fn is_hard(&self) -> bool {
        match self {
            SynthesisError::Client { source, .. } | SynthesisError::Screenshot { source, .. } => {
                source.is_service_failure()
            }
            _ => false,
        }
    }
}

/// Clients for the planner, the action grounder, the screenshot describer,
/// and the causal analyst. They may all be the same client.
#[derive(Clone)]
pub struct ExpertClients {
    pub planner: Arc<dyn ExpertClient>,
    pub grounder: Arc<dyn ExpertClient>,
    pub describer: Arc<dyn ExpertClient>,
    pub analyst: Arc<dyn ExpertClient>,
}

impl ExpertClients {
    pub fn shared(client: Arc<dyn ExpertClient>) -> Self {
        ExpertClients {
            planner: client.clone(),
            grounder: client.clone(),
            describer: client.clone(),
            analyst: client,
        }
    }
}

fn attempt<T>(
    stage: &'static str,
    retries: usize,
    mut call: impl FnMut() -> Result<String, ClientError>,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<T, SynthesisError> {
    let attempts = retries + 1;
    let mut last = None;
    for _ in 0..attempts {
        match call() {
            Ok(raw) => match parse(&raw) {
                Some(v) => return Ok(v),
                None => {
                    last = Some(SynthesisError::Unparseable {
                        stage,
                        attempts,
                        raw,
                    })
                }
            },
            Err(source) => last = Some(SynthesisError::Client { stage, source }),
        }
    }
    Err(last.expect("at least one attempt"))
}

pub fn plan_task(
    task: &str,
    client: &dyn ExpertClient,
    templates: &PromptTemplates,
    retries: usize,
) -> Result<Plan, SynthesisError> {
    if task.trim().is_empty() {
        return Err(SynthesisError::Invalid("empty task".into()));
    }
    let prompt = templates.planning.render(&[("task", task)]);
    attempt(
        "plan",
        retries,
        || client.complete_text(&prompt),
        |raw| Plan::new(parse::numbered_list(raw)).ok(),
    )
}

pub fn ground_action(
    task: &str,
    action: &Action,
    ui_metadata: Option<&str>,
    client: &dyn ExpertClient,
    templates: &PromptTemplates,
    retries: usize,
) -> Result<String, SynthesisError> {
    action
        .validate()
        .map_err(|e| SynthesisError::Invalid(e.to_string()))?;
    let rendered = action.to_string();
    let prompt = templates.grounding.render(&[
        ("task", task),
        ("action", &rendered),
        ("ui_metadata", ui_metadata.unwrap_or("(none)")),
    ]);
    let mut text = attempt(
        "ground",
        retries,
        || client.complete_text(&prompt),
        |raw| parse::labeled_or_whole(raw, "ACTION").map(|t| t.replace(['\r', '\n'], " ")),
    )?;
    if let Action::Type { text: typed } = action {
        if !text.contains(typed.as_str()) {
            text = format!("{text} (typed text: \"{typed}\")");
        }
    }
    Ok(text)
}

pub fn describe_state(
    screenshot_ref: &str,
    client: &dyn ExpertClient,
    templates: &PromptTemplates,
    retries: usize,
) -> Result<String, SynthesisError> {
    let prompt = templates.state_description.render(&[]);
    attempt(
        "describe",
        retries,
        || client.describe_image(screenshot_ref, &prompt),
        |raw| parse::labeled_or_whole(raw, "STATE"),
    )
    .map_err(|e| match e {
        SynthesisError::Client { source, .. } => SynthesisError::Screenshot {
            locator: screenshot_ref.to_string(),
            source,
        },
        other => other,
    })
}

pub fn induce_rationale(
    task: &str,
    pre_state: &str,
    grounded_action: &str,
    post_state: &str,
    client: &dyn ExpertClient,
    templates: &PromptTemplates,
    retries: usize,
) -> Result<Rationale, SynthesisError> {
    for (name, v) in [
        ("task", task),
        ("pre_state", pre_state),
        ("action", grounded_action),
        ("post_state", post_state),
    ] {
        if v.trim().is_empty() {
            return Err(SynthesisError::Invalid(format!("empty {name}")));
        }
    }
    let prompt = templates.causal_analysis.render(&[
        ("task", task),
        ("pre_state", pre_state),
        ("action", grounded_action),
        ("post_state", post_state),
    ]);
    attempt(
        "analyse",
        retries,
        || client.complete_text(&prompt),
        |raw| {
            let get = |label| parse::section(raw, label).filter(|s| !s.is_empty());
            Some(Rationale {
                pre_state: pre_state.to_string(),
                post_state: post_state.to_string(),
                trigger: get("TRIGGER")?,
                mechanism: get("MECHANISM")?,
                chain_of_thought: get("REASONING")?,
            })
        },
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFailure {
    pub trajectory_id: String,
    pub step_index: usize,
    pub cause: String,
    pub hard: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SynthesisOutput {
    pub samples: Vec<SynthesizedSample>,
    pub failures: Vec<StepFailure>,
}

impl SynthesisOutput {
    pub fn hard_failures(&self) -> usize {
        self.failures.iter().filter(|f| f.hard).count()
    }
}

fn failure(traj: &Trajectory, step: usize, err: &SynthesisError) -> StepFailure {
    StepFailure {
        trajectory_id: traj.id.clone(),
        step_index: step,
        cause: err.to_string(),
        hard: err.is_hard(),
    }
}

fn synthesize_trajectory(
    traj: &Trajectory,
    clients: &ExpertClients,
    templates: &PromptTemplates,
    retries: usize,
) -> SynthesisOutput {
    let mut out = SynthesisOutput::default();
    if let Err(e) = traj.validate() {
        let err = SynthesisError::Invalid(e.to_string());
        out.failures
            .extend((0..traj.len().max(1)).map(|t| failure(traj, t, &err)));
        return out;
    }
    let plan = match plan_task(&traj.task, clients.planner.as_ref(), templates, retries) {
        Ok(plan) => plan,
        Err(err) => {
            out.failures
                .extend((0..traj.len()).map(|t| failure(traj, t, &err)));
            return out;
        }
    };

    let mut described: HashMap<&str, Result<String, SynthesisError>> = HashMap::new();
    let mut describe = |locator| {
        described
            .entry(locator)
            .or_insert_with(|| {
                describe_state(locator, clients.describer.as_ref(), templates, retries)
            })
            .clone()
    };

    for (t, step) in traj.steps.iter().enumerate() {
        // the screen after step t is the screen of step t + 1; the last step
        // falls back to the final capture, or to its own screen for terminal actions
        let post_locator = traj
            .steps
            .get(t + 1)
            .map(|s| s.screenshot_ref.as_str())
            .or(traj.final_screenshot_ref.as_deref())
            .unwrap_or(&step.screenshot_ref);
        let result = (|| {
            let grounded = ground_action(
                &traj.task,
                &step.action,
                step.ui_metadata.as_deref(),
                clients.grounder.as_ref(),
                templates,
                retries,
            )?;
            let pre = describe(step.screenshot_ref.as_str())?;
            let post = describe(post_locator)?;
            let rationale = induce_rationale(
                &traj.task,
                &pre,
                &grounded,
                &post,
                clients.analyst.as_ref(),
                templates,
                retries,
            )?;
            SynthesizedSample::new(
                &traj.id,
                t,
                traj.task.clone(),
                plan.clone(),
                grounded,
                rationale,
            )
            .map_err(|e| SynthesisError::Invalid(e.to_string()))
        })();
        match result {
            Ok(sample) => out.samples.push(sample),
            Err(err) => {
                warn!("{}#{t}: {err}", traj.id);
                out.failures.push(failure(traj, t, &err));
            }
        }
    }
    out
}

/// Runs stage one over every trajectory. Step failures land in the
/// returned ledger and never abort the run. Trajectories are processed in
/// parallel on the current rayon pool; output is ordered by trajectory id
/// and then step index.
pub fn synthesize_corpus(
    dataset: &[Trajectory],
    clients: &ExpertClients,
    templates: &PromptTemplates,
    retries: usize,
) -> SynthesisOutput {
    let parts: Vec<SynthesisOutput> = dataset
        .par_iter()
        .map(|traj| synthesize_trajectory(traj, clients, templates, retries))
        .collect();
    let mut out = SynthesisOutput::default();
    for part in parts {
        out.samples.extend(part.samples);
        out.failures.extend(part.failures);
    }
    out.samples
        .sort_by(|a, b| sample_order(&a.id).cmp(&sample_order(&b.id)));
    out.failures.sort_by(|a, b| {
        (a.trajectory_id.as_str(), a.step_index).cmp(&(b.trajectory_id.as_str(), b.step_index))
    });
    out
}

fn sample_order(id: &str) -> (&str, usize) {
    crate::model::split_sample_id(id).unwrap_or((id, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScrollDirection, Step};
    use std::collections::BTreeSet;
    use std::sync::atomic::{AtomicUsize, Ordering};

    type Script = Box<dyn Fn(&str) -> Result<String, ClientError> + Send + Sync>;

    struct Scripted {
        text: Script,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(f: impl Fn(&str) -> Result<String, ClientError> + Send + Sync + 'static) -> Self {
            Scripted {
                text: Box::new(f),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl ExpertClient for Scripted {
        fn complete_text(&self, prompt: &str) -> Result<String, ClientError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            (self.text)(prompt)
        }
        fn describe_image(&self, image_ref: &str, _: &str) -> Result<String, ClientError> {
            Ok(format!("screen {image_ref}"))
        }
        fn identity(&self) -> ClientIdentity {
            ClientIdentity {
                model: "scripted".into(),
                endpoint: "test".into(),
            }
        }
    }

    fn templates() -> PromptTemplates {
        PromptTemplates::builtin()
    }

    fn trajectory(id: &str, steps: usize) -> Trajectory {
        Trajectory {
            id: id.into(),
            task: format!("task for {id}"),
            steps: (0..steps)
                .map(|i| Step {
                    index: i,
                    screenshot_ref: format!("{id}/{i}.png"),
                    action: if i % 2 == 0 {
                        Action::Click {
                            x: 0.5,
                            y: 0.1 * i as f64,
                        }
                    } else {
                        Action::Scroll {
                            direction: ScrollDirection::Down,
                        }
                    },
                    ui_metadata: Some("<button text='+'/>".into()),
                })
                .collect(),
            final_screenshot_ref: None,
        }
    }

    #[test]
    fn plan_from_numbered_echo() {
        let client = Scripted::new(|_| Ok("1. open app\n2. tap plus".into()));
        let plan = plan_task("anything", &client, &templates(), DEFAULT_RETRIES).unwrap();
        assert_eq!(plan.subgoals, ["open app", "tap plus"]);
    }

    #[test]
    fn empty_plan_response_fails_after_retries() {
        let client = Scripted::new(|_| Ok(String::new()));
        let err = plan_task("x", &client, &templates(), 2).unwrap_err();
        assert!(matches!(
            err,
            SynthesisError::Unparseable {
                stage: "plan",
                attempts: 3,
                ..
            }
        ));
        assert_eq!(client.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn fixture_plan_for_add_task() {
        let t = templates();
        let task = "Add task 'eat'";
        let mut mock = MockClient::new();
        mock.insert(
            &t.planning.render(&[("task", task)]),
            "PLAN:\n1. Open the to-do app\n2. Tap the plus button to create a task\n3. Type 'eat' into the title field\n4. Confirm to save the task",
        );
        let plan = plan_task(task, &mock, &t, DEFAULT_RETRIES).unwrap();
        assert_eq!(plan.subgoals.len(), 4);
        let keywords = ["open", "tap", "type", "confirm"];
        for (goal, kw) in plan.subgoals.iter().zip(keywords) {
            assert!(goal.to_lowercase().starts_with(kw), "{goal}");
        }
    }

    #[test]
    fn grounding_outputs() {
        let t = templates();
        let meta =
            "<node class='ImageButton' content-desc='Add new task' bounds='[960,40][1040,120]'/>";
        let click = Action::Click { x: 0.91, y: 0.05 };
        let mut mock = MockClient::new();
        let prompt = t.grounding.render(&[
            ("task", "Add task 'eat'"),
            ("action", &click.to_string()),
            ("ui_metadata", meta),
        ]);
        mock.insert(
            &prompt,
            "ACTION: Tap the \"+\" button in the top-right corner to add a new task.",
        );
        let text = ground_action("Add task 'eat'", &click, Some(meta), &mock, &t, 2).unwrap();
        assert!(text.to_lowercase().contains("add"), "{text}");

        let home = Scripted::new(|p| {
            assert!(p.contains("PRESS_HOME"));
            Ok("ACTION: Press the home key to navigate to the home screen.".into())
        });
        let text = ground_action("x", &Action::PressHome, None, &home, &t, 2).unwrap();
        assert!(text.contains("home screen"));

        let forgetful = Scripted::new(|_| Ok("ACTION: Enter the task title.".into()));
        let text = ground_action(
            "x",
            &Action::Type { text: "eat".into() },
            None,
            &forgetful,
            &t,
            2,
        )
        .unwrap();
        assert!(text.contains("eat"));
        assert!(ground_action(
            "x",
            &Action::Type {
                text: String::new()
            },
            None,
            &forgetful,
            &t,
            2
        )
        .is_err());
    }

    #[test]
    fn describing_states() {
        let t = templates();
        let mut mock = MockClient::new();
        mock.insert_image(
            "a.png",
            t.state_description.text(),
            "The clock app alarm tab.",
        );
        assert_eq!(
            describe_state("a.png", &mock, &t, 2).unwrap(),
            "The clock app alarm tab."
        );
        assert_eq!(
            describe_state("b.png", &mock, &t, 2).unwrap(),
            describe_state("b.png", &mock, &t, 2).unwrap()
        );
        match describe_state("missing://x", &mock, &t, 2) {
            Err(SynthesisError::Screenshot { locator, .. }) => assert_eq!(locator, "missing://x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rationale_sections() {
        let t = templates();
        let full = Scripted::new(|_| {
            Ok("TRIGGER: the + button is visible\nMECHANISM: tapping opens the editor\nREASONING: because a new task needs an editor".into())
        });
        let pre = "  To-do list, 3 items \n";
        let r = induce_rationale("Add task", pre, "tap +", "editor open", &full, &t, 2).unwrap();
        assert_eq!(r.pre_state, pre);
        assert_eq!(r.post_state, "editor open");
        assert_eq!(r.mechanism, "tapping opens the editor");
        assert_eq!(r.chain_of_thought, "because a new task needs an editor");

        let partial = Scripted::new(|_| Ok("TRIGGER: x\nREASONING: y".into()));
        let err = induce_rationale("a", "b", "c", "d", &partial, &t, 2).unwrap_err();
        assert!(matches!(
            err,
            SynthesisError::Unparseable {
                stage: "analyse",
                ..
            }
        ));
    }

    #[test]
    fn corpus_shares_one_plan_per_trajectory() {
        let scripted = Arc::new(Scripted::new(|p| {
            Ok(if p.contains("PLAN:") {
                "PLAN:\n1. a\n2. b".into()
            } else if p.contains("ACTION:") {
                "ACTION: tap".into()
            } else {
                "TRIGGER: t\nMECHANISM: m\nREASONING: r".into()
            })
        }));
        let clients = ExpertClients::shared(scripted.clone());
        let out = synthesize_corpus(&[trajectory("t", 3)], &clients, &templates(), 2);
        assert_eq!(out.samples.len(), 3);
        assert!(out.failures.is_empty());
        assert!(out.samples.iter().all(|s| s.plan == out.samples[0].plan));
        // 1 plan + 3 x (ground + analyse)
        assert_eq!(scripted.calls.load(Ordering::SeqCst), 7);
        // post state of step t is pre state of step t+1
        assert_eq!(
            out.samples[0].rationale.post_state,
            out.samples[1].rationale.pre_state
        );
    }

    #[test]
    fn failing_step_goes_to_ledger() {
        let mut bad = trajectory("b", 2);
        bad.steps[1].screenshot_ref = "missing://gone".into();
        let data = [trajectory("a", 3), bad];
        let clients = ExpertClients::shared(Arc::new(MockClient::new()));
        let out = synthesize_corpus(&data, &clients, &templates(), 2);
        // step b#0 needs the screen of b#1 as its post state, so both fail
        assert_eq!(out.samples.len(), 3);
        assert_eq!(out.failures.len(), 2);
        assert!(out
            .failures
            .iter()
            .all(|f| f.trajectory_id == "b" && !f.hard));

        let mut last = trajectory("c", 2);
        last.final_screenshot_ref = Some("missing://end".into());
        let out = synthesize_corpus(&[trajectory("a", 2), last], &clients, &templates(), 2);
        assert_eq!(out.samples.len(), 2 + 2 - 1);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(
            (
                out.failures[0].trajectory_id.as_str(),
                out.failures[0].step_index
            ),
            ("c", 1)
        );
    }

    #[test]
    fn service_outage_is_hard() {
        let down = Arc::new(Scripted::new(|_| {
            Err(ClientError::Unavailable("refused".into()))
        }));
        let out = synthesize_corpus(
            &[trajectory("a", 2)],
            &ExpertClients::shared(down),
            &templates(),
            0,
        );
        assert_eq!(out.hard_failures(), 2);
    }

    #[test]
    fn ids_cover_every_step_and_are_deterministic() {
        let data: Vec<Trajectory> = (0..10)
            .map(|i| trajectory(&format!("traj{i}"), 1 + i % 4))
            .collect();
        let clients = ExpertClients::shared(Arc::new(MockClient::new()));
        let first = synthesize_corpus(&data, &clients, &templates(), 2);
        let expected: BTreeSet<String> = data
            .iter()
            .flat_map(|t| (0..t.len()).map(move |s| format!("{}#{s}", t.id)))
            .collect();
        let got: BTreeSet<String> = first.samples.iter().map(|s| s.id.clone()).collect();
        assert_eq!(got, expected);
        let again = synthesize_corpus(&data, &clients, &templates(), 2);
        assert_eq!(first.samples, again.samples);
    }
}
