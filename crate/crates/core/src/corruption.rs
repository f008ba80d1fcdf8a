//! Targeted non-factual prompt corruption via a generic LLM endpoint.
//!
//! Each prompt is corrupted along four dimensions (color, count,
//! background, main subject), one instruction per dimension rendered from a
//! fixed template. Responses must pass mechanical validation (changed,
//! single line, sane length) before a `FactualSet` is accepted. Every call
//! can be recorded into a transcript cache and replayed offline, so
//! benchmark builds are reproducible without the endpoint.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::fnv1a64;

/// The corruption instruction template. `{ERROR_TYPE}` and `{PROMPT}` are
/// the only substitution sites; everything else is fixed bytes.
pub const CORRUPTION_TEMPLATE: &str = include_str!("corruption_template.txt");

/// The four corruption dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorType {
    #[serde(rename = "color")]
    Color,
    #[serde(rename = "count")]
    Count,
    #[serde(rename = "background")]
    Background,
    #[serde(rename = "main_subject")]
    MainSubject,
}

impl ErrorType {
    pub const ALL: [ErrorType; 4] = [
        ErrorType::Color,
        ErrorType::Count,
        ErrorType::Background,
        ErrorType::MainSubject,
    ];

    /// The text substituted for `{ERROR_TYPE}` in the instruction.
    pub fn label(&self) -> &'static str {
        match self {
            ErrorType::Color => "color",
            ErrorType::Count => "count",
            ErrorType::Background => "background",
            ErrorType::MainSubject => "main subject",
        }
    }

    /// Stable machine name used in records and error messages.
    pub fn name(&self) -> &'static str {
        match self {
            ErrorType::Color => "color",
            ErrorType::Count => "count",
            ErrorType::Background => "background",
            ErrorType::MainSubject => "main_subject",
        }
    }
}

impl std::fmt::Display for ErrorType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One ground-truth prompt plus its four validated corruptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactualSet {
    pub original: String,
    pub corruptions: BTreeMap<ErrorType, String>,
}

impl FactualSet {
    pub fn new(original: String, corruptions: BTreeMap<ErrorType, String>) -> Result<Self> {
        if corruptions.len() != ErrorType::ALL.len() {
            return Err(Error::Data(format!(
                "factual set needs exactly {} corruptions, got {}",
                ErrorType::ALL.len(),
                corruptions.len()
            )));
        }
        for (et, c) in &corruptions {
            if c.trim().eq_ignore_ascii_case(original.trim()) {
                return Err(Error::Data(format!(
                    "corruption for {et} does not differ from the original"
                )));
            }
        }
        Ok(Self {
            original,
            corruptions,
        })
    }

    /// Original first, then corruptions in fixed `ErrorType` order. This is
    /// the candidate order every Recall@1 computation uses.
    pub fn candidates(&self) -> Vec<(Option<ErrorType>, &str)> {
        let mut out: Vec<(Option<ErrorType>, &str)> = vec![(None, self.original.as_str())];
        for et in ErrorType::ALL {
            out.push((Some(et), self.corruptions[&et].as_str()));
        }
        out
    }
}

/// Substitutes `{ERROR_TYPE}` and `{PROMPT}` into the template in a single
/// left-to-right pass. Values are inserted literally; placeholders inside a
/// prompt are never re-expanded.
pub fn render_corruption_prompt(error_type: ErrorType, prompt: &str) -> String {
    render_template(CORRUPTION_TEMPLATE, error_type.label(), prompt)
}

fn render_template(template: &str, error_type: &str, prompt: &str) -> String {
    const ET: &str = "{ERROR_TYPE}";
    const PR: &str = "{PROMPT}";
    let mut out = String::with_capacity(template.len() + prompt.len());
    let mut rest = template;
    loop {
        let et_pos = rest.find(ET);
        let pr_pos = rest.find(PR);
        match (et_pos, pr_pos) {
            (None, None) => {
                out.push_str(rest);
                return out;
            }
            (Some(e), None) => {
                out.push_str(&rest[..e]);
                out.push_str(error_type);
                rest = &rest[e + ET.len()..];
            }
            (None, Some(p)) => {
                out.push_str(&rest[..p]);
                out.push_str(prompt);
                rest = &rest[p + PR.len()..];
            }
            (Some(e), Some(p)) if e < p => {
                out.push_str(&rest[..e]);
                out.push_str(error_type);
                rest = &rest[e + ET.len()..];
            }
            (Some(_), Some(p)) => {
                out.push_str(&rest[..p]);
                out.push_str(prompt);
                rest = &rest[p + PR.len()..];
            }
        }
    }
}

/// Outcome of the mechanical acceptance test for one candidate corruption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accepted,
    Rejected(String),
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }
}

/// Accepts a candidate iff it is nonempty, single-line, differs from the
/// original (case-insensitive), and its length is within a factor of two of
/// the original.
pub fn validate_corruption(original: &str, candidate: &str) -> Verdict {
    if candidate.is_empty() {
        return Verdict::Rejected("empty output".into());
    }
    if candidate.contains('\n') {
        return Verdict::Rejected("multiline output".into());
    }
    if candidate.eq_ignore_ascii_case(original) {
        return Verdict::Rejected("unchanged from original".into());
    }
    let orig_len = original.chars().count().max(1) as f64;
    let cand_len = candidate.chars().count() as f64;
    let ratio = cand_len / orig_len;
    if !(0.5..=2.0).contains(&ratio) {
        return Verdict::Rejected(format!("length ratio {ratio:.2} outside [0.5, 2.0]"));
    }
    Verdict::Accepted
}

/// Endpoint configuration for the corruption LLM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model_tag: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model_tag: String::new(),
            // sampling temperature and retry policy are this artifact's
            // defaults; the corruption protocol itself does not fix them
            temperature: 0.7,
            timeout_secs: 60,
            max_retries: 3,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_secs == 0 {
            return Err(Error::Config("LLM client timeout must be > 0".into()));
        }
        Ok(())
    }
}

/// A chat-completion-style text endpoint.
pub trait ChatClient: Send + Sync {
    fn complete(&self, instruction: &str) -> Result<String>;
    fn tag(&self) -> &str;
}

/// HTTP client speaking the common `/chat/completions` JSON shape.
/// Credentials come from the `LLM_API_KEY` environment variable when set.
pub struct HttpChatClient {
    config: LlmClientConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

impl HttpChatClient {
    pub fn new(config: LlmClientConfig) -> Result<Self> {
        config.validate()?;
        if config.endpoint.is_empty() {
            return Err(Error::Config("LLM endpoint is empty".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(Self { config, agent })
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, instruction: &str) -> Result<String> {
        let body = ChatRequest {
            model: &self.config.model_tag,
            messages: vec![ChatMessage {
                role: "user",
                content: instruction,
            }],
            temperature: self.config.temperature,
        };
        let mut request = self.agent.post(&self.config.endpoint);
        if let Ok(key) = std::env::var("LLM_API_KEY") {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| Error::Transport(format!("endpoint {}: {e}", self.config.endpoint)))?;
        let parsed: ChatResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(format!("malformed completion response: {e}")))?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| Error::Transport("completion response had no choices".into()))
    }

    fn tag(&self) -> &str {
        &self.config.model_tag
    }
}

/// One cached request/response pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub request_hash: String,
    pub instruction: String,
    pub response: String,
    pub verdict: Verdict,
}

/// Append-only transcript store: one file per call, named by the
/// instruction hash plus a per-instruction sequence number, so concurrent
/// writers never contend on a shared file.
pub struct TranscriptCache {
    dir: PathBuf,
}

impl TranscriptCache {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn file_for(&self, instruction: &str, seq: u32) -> PathBuf {
        let hash = fnv1a64(instruction.as_bytes());
        self.dir.join(format!("{hash:016x}_{seq:03}.json"))
    }

    /// Records a call under the next free sequence slot for its
    /// instruction. Slots are claimed with `create_new`, so concurrent
    /// writers of the same instruction never clobber each other.
    pub fn record(&self, instruction: &str, response: &str, verdict: &Verdict) -> Result<PathBuf> {
        use std::io::Write;
        let hash = fnv1a64(instruction.as_bytes());
        let mut seq = 0u32;
        loop {
            let path = self.file_for(instruction, seq);
            match std::fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
            {
                Ok(mut file) => {
                    let record = TranscriptRecord {
                        request_hash: format!("{hash:016x}:{seq}"),
                        instruction: instruction.to_string(),
                        response: response.to_string(),
                        verdict: verdict.clone(),
                    };
                    file.write_all(serde_json::to_string_pretty(&record)?.as_bytes())?;
                    return Ok(path);
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    seq += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn lookup(&self, instruction: &str, seq: u32) -> Result<TranscriptRecord> {
        let path = self.file_for(instruction, seq);
        let text = std::fs::read_to_string(&path).map_err(|_| {
            Error::Transport(format!(
                "no cached transcript for this instruction (seq {seq}) under {:?}",
                self.dir
            ))
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Replays recorded transcripts in call order, never touching the network.
pub struct ReplayChatClient {
    cache: TranscriptCache,
    counters: Mutex<HashMap<u64, u32>>,
}

impl ReplayChatClient {
    pub fn new(dir: &Path) -> Result<Self> {
        Ok(Self {
            cache: TranscriptCache::new(dir)?,
            counters: Mutex::new(HashMap::new()),
        })
    }
}

impl ChatClient for ReplayChatClient {
    fn complete(&self, instruction: &str) -> Result<String> {
        let hash = fnv1a64(instruction.as_bytes());
        let seq = {
            let mut counters = self.counters.lock().unwrap();
            let c = counters.entry(hash).or_insert(0);
            let seq = *c;
            *c += 1;
            seq
        };
        Ok(self.cache.lookup(instruction, seq)?.response)
    }

    fn tag(&self) -> &str {
        "replay"
    }
}

/// Drives the corruption protocol against any [`ChatClient`], validating
/// responses and optionally recording transcripts.
pub struct PromptCorruptor<'a> {
    pub client: &'a dyn ChatClient,
    pub cache: Option<&'a TranscriptCache>,
    pub max_retries: u32,
}

impl<'a> PromptCorruptor<'a> {
    pub fn new(client: &'a dyn ChatClient, max_retries: u32) -> Self {
        Self {
            client,
            cache: None,
            max_retries,
        }
    }

    pub fn with_cache(mut self, cache: &'a TranscriptCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Produces one validated corruption, retrying on validation failures
    /// up to `max_retries` extra attempts. Transport errors propagate
    /// immediately.
    pub fn corrupt_prompt(&self, error_type: ErrorType, prompt: &str) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::Argument("cannot corrupt an empty prompt".into()));
        }
        let instruction = render_corruption_prompt(error_type, prompt);
        let mut transcript = Vec::new();
        for _attempt in 0..=self.max_retries {
            let raw = self.client.complete(&instruction)?;
            let candidate = raw.trim().to_string();
            let verdict = validate_corruption(prompt, &candidate);
            if let Some(cache) = self.cache {
                cache.record(&instruction, &raw, &verdict)?;
            }
            match verdict {
                Verdict::Accepted => return Ok(candidate),
                Verdict::Rejected(reason) => {
                    transcript.push(format!("{candidate:?} rejected: {reason}"));
                }
            }
        }
        Err(Error::Corruption {
            failed: vec![error_type.name().to_string()],
            transcript: transcript.join("; "),
        })
    }

    /// Builds the full four-dimension set for one prompt. Any failing
    /// dimension makes the whole set an error naming every failed
    /// dimension.
    pub fn build_factual_set(&self, prompt: &str) -> Result<FactualSet> {
        let mut corruptions = BTreeMap::new();
        let mut failed = Vec::new();
        let mut transcripts = Vec::new();
        for et in ErrorType::ALL {
            match self.corrupt_prompt(et, prompt) {
                Ok(c) => {
                    corruptions.insert(et, c);
                }
                Err(Error::Corruption { transcript, .. }) => {
                    failed.push(et.name().to_string());
                    transcripts.push(format!("{et}: {transcript}"));
                }
                Err(other) => return Err(other),
            }
        }
        if !failed.is_empty() {
            return Err(Error::Corruption {
                failed,
                transcript: transcripts.join(" | "),
            });
        }
        FactualSet::new(prompt.to_string(), corruptions)
    }
}

/// One line of a factual-set output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactualSetRecord {
    pub prompt_id: String,
    pub original: String,
    pub color: String,
    pub count: String,
    pub background: String,
    pub main_subject: String,
}

impl FactualSetRecord {
    pub fn from_set(prompt_id: &str, set: &FactualSet) -> Self {
        Self {
            prompt_id: prompt_id.to_string(),
            original: set.original.clone(),
            color: set.corruptions[&ErrorType::Color].clone(),
            count: set.corruptions[&ErrorType::Count].clone(),
            background: set.corruptions[&ErrorType::Background].clone(),
            main_subject: set.corruptions[&ErrorType::MainSubject].clone(),
        }
    }

    pub fn to_set(&self) -> Result<FactualSet> {
        let mut corruptions = BTreeMap::new();
        corruptions.insert(ErrorType::Color, self.color.clone());
        corruptions.insert(ErrorType::Count, self.count.clone());
        corruptions.insert(ErrorType::Background, self.background.clone());
        corruptions.insert(ErrorType::MainSubject, self.main_subject.clone());
        FactualSet::new(self.original.clone(), corruptions)
    }
}

pub fn write_factual_sets(path: &Path, records: &[FactualSetRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_factual_sets(path: &Path) -> Result<Vec<FactualSetRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::NotFound(format!("factual sets {path:?}")))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Echoes the prompt back, which validation must reject.
    struct EchoClient;

    impl ChatClient for EchoClient {
        fn complete(&self, instruction: &str) -> Result<String> {
            let prompt = instruction
                .rsplit("PROMPT: ")
                .next()
                .unwrap_or("")
                .to_string();
            Ok(prompt)
        }

        fn tag(&self) -> &str {
            "echo"
        }
    }

    #[test]
    fn template_renders_with_both_sites_substituted() {
        let rendered = render_corruption_prompt(ErrorType::Color, "a red apple on a table");
        assert!(rendered.contains("Change the color in the following PROMPT:"));
        assert!(rendered.contains("PROMPT: a red apple on a table"));
        assert!(!rendered.contains("{ERROR_TYPE}"));
        assert!(!rendered.contains("{PROMPT}"));
        // deterministic bytes
        assert_eq!(
            rendered,
            render_corruption_prompt(ErrorType::Color, "a red apple on a table")
        );
    }

    #[test]
    fn template_diff_is_exactly_the_substitution_sites() {
        // reconstruct the render by splitting the template at its
        // placeholders; every fixed segment must appear verbatim in order
        let et = ErrorType::MainSubject;
        let prompt = "a bird on a branch";
        let rendered = render_corruption_prompt(et, prompt);
        let mut cursor = 0usize;
        let mut rest = CORRUPTION_TEMPLATE;
        loop {
            let et_pos = rest.find("{ERROR_TYPE}");
            let pr_pos = rest.find("{PROMPT}");
            let (pos, len, value) = match (et_pos, pr_pos) {
                (None, None) => break,
                (Some(e), None) => (e, "{ERROR_TYPE}".len(), et.label()),
                (None, Some(p)) => (p, "{PROMPT}".len(), prompt),
                (Some(e), Some(p)) if e < p => (e, "{ERROR_TYPE}".len(), et.label()),
                (Some(_), Some(p)) => (p, "{PROMPT}".len(), prompt),
            };
            let segment = &rest[..pos];
            assert_eq!(&rendered[cursor..cursor + segment.len()], segment);
            cursor += segment.len();
            assert_eq!(&rendered[cursor..cursor + value.len()], value);
            cursor += value.len();
            rest = &rest[pos + len..];
        }
        assert_eq!(&rendered[cursor..], rest);
    }

    #[test]
    fn braces_in_prompt_are_not_reexpanded() {
        let tricky = "a {ERROR_TYPE} sign next to {PROMPT} graffiti";
        let rendered = render_corruption_prompt(ErrorType::Count, tricky);
        assert!(rendered.contains("PROMPT: a {ERROR_TYPE} sign next to {PROMPT} graffiti"));
        // exactly one occurrence of the tricky prompt, injected verbatim
        assert_eq!(rendered.matches(tricky).count(), 1);
    }

    #[test]
    fn validation_rules() {
        assert!(validate_corruption("a red apple", "a green apple").is_accepted());
        assert_eq!(
            validate_corruption("a red apple", "a red apple"),
            Verdict::Rejected("unchanged from original".into())
        );
        assert_eq!(
            validate_corruption("a red apple", "A RED APPLE"),
            Verdict::Rejected("unchanged from original".into())
        );
        assert!(matches!(
            validate_corruption("a red apple", "The answer is: a green apple\nExplanation..."),
            Verdict::Rejected(r) if r.contains("multiline")
        ));
        assert!(matches!(
            validate_corruption("a red apple", ""),
            Verdict::Rejected(r) if r.contains("empty")
        ));
        assert!(matches!(
            validate_corruption("a red apple", "no"),
            Verdict::Rejected(r) if r.contains("length ratio")
        ));
        let long = "a ".repeat(40);
        assert!(matches!(
            validate_corruption("a red apple", &long),
            Verdict::Rejected(r) if r.contains("length ratio")
        ));
    }

    #[test]
    fn validation_rejects_identity_for_all_inputs() {
        for s in ["", "x", "a red apple", "  spaced  ", "émoji ✓"] {
            assert!(!validate_corruption(s, s).is_accepted(), "{s:?}");
        }
    }

    #[test]
    fn echo_client_fails_after_retries() {
        let client = EchoClient;
        let corruptor = PromptCorruptor::new(&client, 2);
        match corruptor.corrupt_prompt(ErrorType::Color, "a red apple") {
            Err(Error::Corruption { failed, transcript }) => {
                assert_eq!(failed, vec!["color".to_string()]);
                assert!(transcript.matches("rejected").count() == 3);
            }
            other => panic!("expected Corruption, got {other:?}"),
        }
    }

    #[test]
    fn replay_round_trips_recorded_transcripts() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TranscriptCache::new(dir.path()).unwrap();
        let instruction = render_corruption_prompt(ErrorType::Count, "two dogs in a park");
        cache
            .record(&instruction, "three dogs in a park", &Verdict::Accepted)
            .unwrap();
        let replay = ReplayChatClient::new(dir.path()).unwrap();
        assert_eq!(
            replay.complete(&instruction).unwrap(),
            "three dogs in a park"
        );
        // second call for the same instruction has no recorded slot
        assert!(matches!(
            replay.complete(&instruction),
            Err(Error::Transport(_))
        ));
    }

    #[test]
    fn transcript_sequences_preserve_retry_order() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TranscriptCache::new(dir.path()).unwrap();
        let instruction = "same instruction";
        cache
            .record(instruction, "first", &Verdict::Rejected("unchanged".into()))
            .unwrap();
        cache
            .record(instruction, "second", &Verdict::Accepted)
            .unwrap();
        let replay = ReplayChatClient::new(dir.path()).unwrap();
        assert_eq!(replay.complete(instruction).unwrap(), "first");
        assert_eq!(replay.complete(instruction).unwrap(), "second");
    }

    #[test]
    fn factual_set_requires_four_distinct_corruptions() {
        let mut corruptions = BTreeMap::new();
        corruptions.insert(ErrorType::Color, "a green apple".to_string());
        assert!(FactualSet::new("a red apple".into(), corruptions.clone()).is_err());
        corruptions.insert(ErrorType::Count, "two red apples".to_string());
        corruptions.insert(ErrorType::Background, "a red apple on a chair".to_string());
        corruptions.insert(ErrorType::MainSubject, "a red pear".to_string());
        let set = FactualSet::new("a red apple".into(), corruptions).unwrap();
        let candidates = set.candidates();
        assert_eq!(candidates.len(), 5);
        assert_eq!(candidates[0], (None, "a red apple"));
    }

    #[test]
    fn factual_set_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut corruptions = BTreeMap::new();
        corruptions.insert(ErrorType::Color, "a green apple".to_string());
        corruptions.insert(ErrorType::Count, "two red apples".to_string());
        corruptions.insert(ErrorType::Background, "a red apple on a chair".to_string());
        corruptions.insert(ErrorType::MainSubject, "a red pear".to_string());
        let set = FactualSet::new("a red apple".into(), corruptions).unwrap();
        let record = FactualSetRecord::from_set("p0", &set);
        let path = dir.path().join("sets.jsonl");
        write_factual_sets(&path, std::slice::from_ref(&record)).unwrap();
        let back = read_factual_sets(&path).unwrap();
        assert_eq!(back, vec![record.clone()]);
        assert_eq!(back[0].to_set().unwrap(), set);
    }
}
