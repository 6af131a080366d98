//! Expert-model clients.
//!
//! Two backends are registered: `mock`, a deterministic offline client
//! driven by a fixture map, and `http`, a chat-completions client. Either
//! can be wrapped in a token-bucket rate limiter.

use std::collections::HashMap;
use std::fs;
use std::num::NonZeroU32;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use governor::clock::{Clock, DefaultClock};
use governor::{DefaultDirectRateLimiter, Quota, RateLimiter};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientIdentity {
    pub model: String,
    pub endpoint: String,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("image {0:?} is unreachable")]
    ImageUnreachable(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl ClientError {
    /// Failures of the service itself, as opposed to bad inputs or outputs.
    pub fn is_service_failure(&self) -> bool {
        matches!(
            self,
            ClientError::Unavailable(_) | ClientError::Rejected { .. }
        )
    }
}

pub trait ExpertClient: Send + Sync {
    fn complete_text(&self, prompt: &str) -> Result<String, ClientError>;
    fn describe_image(&self, image_ref: &str, prompt: &str) -> Result<String, ClientError>;
    fn identity(&self) -> ClientIdentity;
}

/// Hex SHA-256 of a prompt; the key space of mock fixture maps.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Fixture key for an image request.
pub fn image_prompt_hash(image_ref: &str, prompt: &str) -> String {
    prompt_hash(&format!("{image_ref}\n{prompt}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSettings {
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Requests per second; unlimited when absent.
    #[serde(default)]
    pub rate_limit: Option<f64>,
    /// JSON object mapping prompt hashes to responses (mock backend).
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
    #[serde(skip)]
    pub api_token: Option<String>,
}

fn default_backend() -> String {
    "mock".into()
}

impl Default for ExpertSettings {
    fn default() -> Self {
        ExpertSettings {
            backend: default_backend(),
            endpoint: None,
            model: None,
            rate_limit: None,
            fixtures: None,
            timeout_secs: None,
            api_token: None,
        }
    }
}

/// Deterministic offline client.
///
/// Responses come from the fixture map when the prompt hash is present.
/// Otherwise a canned response is assembled from phrase banks indexed by the
/// prompt hash, carrying every section label the parsers look for. Image
/// locators with the `missing://` scheme are unreachable.
#[derive(Debug, Clone, Default)]
pub struct MockClient {
    fixtures: HashMap<String, String>,
    model: String,
}

impl MockClient {
    pub fn new() -> Self {
        MockClient {
            fixtures: HashMap::new(),
            model: "mock-expert".into(),
        }
    }

    pub fn with_fixtures(fixtures: HashMap<String, String>) -> Self {
        MockClient {
            fixtures,
            ..Self::new()
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let fixtures =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self::with_fixtures(fixtures))
    }

    /// Adds a response for an exact prompt.
    pub fn insert(&mut self, prompt: &str, response: impl Into<String>) {
        self.fixtures.insert(prompt_hash(prompt), response.into());
    }

    pub fn insert_image(&mut self, image_ref: &str, prompt: &str, response: impl Into<String>) {
        self.fixtures
            .insert(image_prompt_hash(image_ref, prompt), response.into());
    }
}

const CONTROLS: [&str; 8] = [
    "the floating add button",
    "the search field",
    "the settings gear icon",
    "the first list entry",
    "the confirm button of the dialog",
    "the navigation drawer toggle",
    "the text input at the top of the form",
    "the back arrow in the toolbar",
];

const SCREENS: [&str; 8] = [
    "a to-do list with three pending items and an add button in the lower right corner",
    "a settings page listing network, display and sound sections",
    "a search results page showing several matching entries",
    "an empty form with a title field and a save button",
    "a confirmation dialog asking whether to keep the changes",
    "the device home screen with a grid of app icons",
    "a calendar week view with two events on Tuesday",
    "a shopping cart showing one item and a checkout button",
];

const TRIGGERS: [&str; 6] = [
    "The target control is visible and enabled because the previous step opened this screen.",
    "The task cannot progress until this field holds the requested value.",
    "If the dialog stays open, no later step is reachable, so it must be answered first.",
    "The list already shows the entry named in the task.",
    "Since the current page lacks the needed option, navigation is required before any edit.",
    "The keyboard is open and the cursor sits in the expected field.",
];

const MECHANISMS: [&str; 6] = [
    "Tapping the control fires its click handler, which pushes a new screen onto the back stack.",
    "The input field forwards each key to the form model, so the typed value appears immediately.",
    "Confirming the dialog commits the pending change and then dismisses the overlay.",
    "Scrolling moves the list viewport, which reveals entries that were off screen.",
    "The system back action pops the current activity, therefore the previous screen returns.",
    "Opening the app launches its main activity, which restores the last visited page.",
];

const REASONING: [&str; 8] = [
    "The task asks for a specific outcome.",
    "Because the needed control is on screen, acting on it is the shortest path.",
    "If a different element were chosen, the screen would not change in the required way.",
    "After this step the interface shows the state that the next subgoal depends on.",
    "The new screen confirms the action took effect, so the plan can continue.",
    "Unless the change is saved, it would be lost when leaving the page.",
    "This is consistent with the layout seen before the action.",
    "Given that the value now appears in the field, the entry step is complete.",
];

fn pick<'a>(bank: &[&'a str], digest: &[u8], at: usize) -> &'a str {
    bank[digest[at % digest.len()] as usize % bank.len()]
}

fn field_after<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.trim().strip_prefix(label))
        .map(str::trim)
        .filter(|v| !v.is_empty())
}

fn canned_text(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    let task = field_after(prompt, "Task:").unwrap_or("the requested task");
    let action = field_after(prompt, "Raw action:").unwrap_or("the action");
    let reasoning_len = 1 + digest[7] as usize % 4;
    let reasoning: Vec<&str> = (0..reasoning_len)
        .map(|i| pick(&REASONING, &digest, 8 + i))
        .collect();
    format!(
        "PLAN:\n1. Open the app needed for: {task}\n2. Navigate to the screen where it is done\n3. Enter the required details\n4. Confirm and check the result\n\
         ACTION: {action} on {control}, in order to advance the task \"{task}\".\n\
         STATE: The screen shows {screen}.\n\
         TRIGGER: {trigger}\n\
         MECHANISM: {mechanism}\n\
         REASONING: {reasoning}\n",
        control = pick(&CONTROLS, &digest, 0),
        screen = pick(&SCREENS, &digest, 1),
        trigger = pick(&TRIGGERS, &digest, 2),
        mechanism = pick(&MECHANISMS, &digest, 3),
        reasoning = reasoning.join(" "),
    )
}

impl ExpertClient for MockClient {
    fn complete_text(&self, prompt: &str) -> Result<String, ClientError> {
        Ok(self
            .fixtures
            .get(&prompt_hash(prompt))
            .cloned()
            .unwrap_or_else(|| canned_text(prompt)))
    }

    fn describe_image(&self, image_ref: &str, prompt: &str) -> Result<String, ClientError> {
        if image_ref.starts_with("missing://") {
            return Err(ClientError::ImageUnreachable(image_ref.to_string()));
        }
        if let Some(r) = self.fixtures.get(&image_prompt_hash(image_ref, prompt)) {
            return Ok(r.clone());
        }
        let digest = Sha256::digest(image_ref.as_bytes());
        Ok(format!(
            "STATE: The screen shows {}; {} is highlighted.",
            pick(&SCREENS, &digest, 0),
            pick(&CONTROLS, &digest, 1)
        ))
    }

    fn identity(&self) -> ClientIdentity {
        ClientIdentity {
            model: self.model.clone(),
            endpoint: "mock://local".into(),
        }
    }
}

/// Chat-completions client (`POST {endpoint}/chat/completions`).
pub struct HttpExpertClient {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    token: Option<String>,
}

impl HttpExpertClient {
    pub fn new(endpoint: &str, model: &str, token: Option<String>, timeout: Duration) -> Self {
        HttpExpertClient {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            token,
        }
    }

    fn chat(&self, content: Value) -> Result<String, ClientError> {
        let body = json!({
            "model": self.model,
            "temperature": 0.0,
            "messages": [{"role": "user", "content": content}],
        });
        let mut request = self
            .agent
            .post(&format!("{}/chat/completions", self.endpoint));
        if let Some(token) = &self.token {
            request = request.set("Authorization", &format!("Bearer {token}"));
        }
        let response = match request.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(status, r)) => {
                let body = r.into_string().unwrap_or_default();
                return Err(ClientError::Rejected { status, body });
            }
            Err(ureq::Error::Transport(t)) => return Err(ClientError::Unavailable(t.to_string())),
        };
        let value: Value = response
            .into_json()
            .map_err(|e| ClientError::Malformed(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ClientError::Malformed(format!("no message content in {value}")))
    }
}

fn image_url(image_ref: &str) -> Result<String, ClientError> {
    if ["http://", "https://", "data:"]
        .iter()
        .any(|p| image_ref.starts_with(p))
    {
        return Ok(image_ref.to_string());
    }
    let path = image_ref.strip_prefix("file://").unwrap_or(image_ref);
    let bytes = fs::read(path).map_err(|_| ClientError::ImageUnreachable(image_ref.to_string()))?;
    let mime = match Path::new(path).extension().and_then(|e| e.to_str()) {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "image/png",
    };
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{mime};base64,{encoded}"))
}

impl ExpertClient for HttpExpertClient {
    fn complete_text(&self, prompt: &str) -> Result<String, ClientError> {
        self.chat(Value::String(prompt.to_string()))
    }

    fn describe_image(&self, image_ref: &str, prompt: &str) -> Result<String, ClientError> {
        let url = image_url(image_ref)?;
        self.chat(json!([
            {"type": "text", "text": prompt},
            {"type": "image_url", "image_url": {"url": url}},
        ]))
    }

    fn identity(&self) -> ClientIdentity {
        ClientIdentity {
            model: self.model.clone(),
            endpoint: self.endpoint.clone(),
        }
    }
}

/// Blocks each request until the token bucket admits it.
pub struct RateLimited<C> {
    inner: C,
    limiter: DefaultDirectRateLimiter,
}

/// Token bucket refilling at `per_second` with a burst of one.
pub fn token_bucket(per_second: f64) -> Option<DefaultDirectRateLimiter> {
    if !(per_second.is_finite() && per_second > 0.0) {
        return None;
    }
    let quota =
        Quota::with_period(Duration::from_secs_f64(1.0 / per_second))?.allow_burst(NonZeroU32::MIN);
    Some(RateLimiter::direct(quota))
}

pub fn wait_for(limiter: &DefaultDirectRateLimiter) {
    let clock = DefaultClock::default();
    while let Err(not_until) = limiter.check() {
        thread::sleep(not_until.wait_time_from(clock.now()));
    }
}

impl<C> RateLimited<C> {
    pub fn new(inner: C, per_second: f64) -> Option<Self> {
        Some(RateLimited {
            inner,
            limiter: token_bucket(per_second)?,
        })
    }
}

impl<C: ExpertClient> ExpertClient for RateLimited<C> {
    fn complete_text(&self, prompt: &str) -> Result<String, ClientError> {
        wait_for(&self.limiter);
        self.inner.complete_text(prompt)
    }

    fn describe_image(&self, image_ref: &str, prompt: &str) -> Result<String, ClientError> {
        wait_for(&self.limiter);
        self.inner.describe_image(image_ref, prompt)
    }

    fn identity(&self) -> ClientIdentity {
        self.inner.identity()
    }
}

impl ExpertClient for Box<dyn ExpertClient> {
    fn complete_text(&self, prompt: &str) -> Result<String, ClientError> {
        (**self).complete_text(prompt)
    }
    fn describe_image(&self, image_ref: &str, prompt: &str) -> Result<String, ClientError> {
        (**self).describe_image(image_ref, prompt)
    }
    fn identity(&self) -> ClientIdentity {
        (**self).identity()
    }
}

fn limited(
    client: Box<dyn ExpertClient>,
    settings: &ExpertSettings,
) -> Result<Box<dyn ExpertClient>, String> {
    match settings.rate_limit {
        None => Ok(client),
        Some(rps) => RateLimited::new(client, rps)
            .map(|c| Box::new(c) as Box<dyn ExpertClient>)
            .ok_or_else(|| format!("rate_limit must be a positive number, got {rps}")),
    }
}

pub type ExpertRegistry = Registry<dyn ExpertClient, ExpertSettings>;

pub fn expert_registry() -> ExpertRegistry {
    let mut registry = ExpertRegistry::new("expert client");
    registry.register("mock", |s: &ExpertSettings| {
        let client = match &s.fixtures {
            Some(path) => MockClient::load(path)?,
            None => MockClient::new(),
        };
        limited(Box::new(client), s)
    });
    registry.register("http", |s: &ExpertSettings| {
        let endpoint = s
            .endpoint
            .as_deref()
            .ok_or("http backend needs an endpoint")?;
        let model = s.model.as_deref().ok_or("http backend needs a model")?;
        let timeout = Duration::from_secs(s.timeout_secs.unwrap_or(120));
        let client = HttpExpertClient::new(endpoint, model, s.api_token.clone(), timeout);
        limited(Box::new(client), s)
    });
    registry
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;
    use std::time::Instant;

    /// Serves one canned HTTP response per connection and forwards request bodies.
    pub(crate) fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; length];
                reader.read_exact(&mut buf).unwrap();
                tx.send(String::from_utf8(buf).unwrap()).unwrap();
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}"), rx)
    }

    #[test]
    fn mock_is_deterministic_and_uses_fixtures() {
        let mut mock = MockClient::new();
        assert_eq!(
            mock.complete_text("hello").unwrap(),
            mock.complete_text("hello").unwrap()
        );
        assert_ne!(
            mock.complete_text("hello").unwrap(),
            mock.complete_text("hello!").unwrap()
        );
        mock.insert("hello", "1. open app\n2. tap plus");
        assert_eq!(
            mock.complete_text("hello").unwrap(),
            "1. open app\n2. tap plus"
        );
        assert_eq!(
            mock.describe_image("s/1.png", "p").unwrap(),
            mock.describe_image("s/1.png", "p").unwrap()
        );
        assert_eq!(
            mock.describe_image("missing://x", "p"),
            Err(ClientError::ImageUnreachable("missing://x".into()))
        );
    }

    #[test]
    fn mock_fixture_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.json");
        fs::write(
            &path,
            format!(
                "{{\"{}\": \"STATE: fixed\"}}",
                image_prompt_hash("a.png", "p")
            ),
        )
        .unwrap();
        let mock = MockClient::load(&path).unwrap();
        assert_eq!(mock.describe_image("a.png", "p").unwrap(), "STATE: fixed");
    }

    #[test]
    fn http_chat_round_trip() {
        let reply = r#"{"choices":[{"message":{"role":"assistant","content":"PLAN:\n1. a"}}]}"#;
        let (url, requests) = serve(vec![(200, reply.into()), (500, "boom".into())]);
        let client =
            HttpExpertClient::new(&url, "expert-1", Some("tok".into()), Duration::from_secs(5));
        assert_eq!(client.complete_text("plan this").unwrap(), "PLAN:\n1. a");
        let sent: Value = serde_json::from_str(&requests.recv().unwrap()).unwrap();
        assert_eq!(sent["model"], "expert-1");
        assert_eq!(sent["messages"][0]["content"], "plan this");
        assert!(matches!(
            client.complete_text("x"),
            Err(ClientError::Rejected { status: 500, .. })
        ));
    }

    #[test]
    fn http_image_is_inlined_and_missing_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("s.png");
        fs::write(&png, [1u8, 2, 3]).unwrap();
        let reply = r#"{"choices":[{"message":{"content":"STATE: ok"}}]}"#;
        let (url, requests) = serve(vec![(200, reply.into())]);
        let client = HttpExpertClient::new(&url, "vlm", None, Duration::from_secs(5));
        assert_eq!(
            client
                .describe_image(png.to_str().unwrap(), "describe")
                .unwrap(),
            "STATE: ok"
        );
        let sent: Value = serde_json::from_str(&requests.recv().unwrap()).unwrap();
        assert_eq!(
            sent["messages"][0]["content"][1]["image_url"]["url"],
            "data:image/png;base64,AQID"
        );
        let missing = dir.path().join("nope.png");
        assert!(matches!(
            client.describe_image(missing.to_str().unwrap(), "d"),
            Err(ClientError::ImageUnreachable(_))
        ));
    }

    #[test]
    fn unreachable_endpoint_is_a_service_failure() {
        let port = TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let client = HttpExpertClient::new(
            &format!("http://127.0.0.1:{port}"),
            "m",
            None,
            Duration::from_secs(2),
        );
        let err = client.complete_text("x").unwrap_err();
        assert!(err.is_service_failure(), "{err}");
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let client = RateLimited::new(MockClient::new(), 20.0).unwrap();
        let start = Instant::now();
        for _ in 0..5 {
            client.complete_text("x").unwrap();
        }
        // first request is free, the remaining four wait ~50 ms each
        assert!(
            start.elapsed() >= Duration::from_millis(180),
            "{:?}",
            start.elapsed()
        );
        assert!(RateLimited::new(MockClient::new(), 0.0).is_none());
    }

    #[test]
    fn registry_builds_backends() {
        let reg = expert_registry();
        let mock = reg.build("mock", &ExpertSettings::default()).unwrap();
        assert_eq!(mock.identity().model, "mock-expert");
        assert!(reg
            .build(
                "http",
                &ExpertSettings {
                    backend: "http".into(),
                    ..Default::default()
                }
            )
            .is_err());
        let http = reg
            .build(
                "http",
                &ExpertSettings {
                    endpoint: Some("http://x/v1/".into()),
                    model: Some("m".into()),
                    rate_limit: Some(5.0),
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(http.identity().endpoint, "http://x/v1");
    }
}
