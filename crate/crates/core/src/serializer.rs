//! Packing retained samples into a plain-text training stream.
//!
//! A document is eight sections in fixed order, each an uppercase header
//! line followed by its text, separated by single blank lines. The corpus is
//! every document followed by a delimiter line (`====` by default). A text
//! line that would read as a header or delimiter, or that already starts with
//! a backslash, is written with one extra leading backslash.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{RecordHeader, SynthesizedSample};

pub const HEADERS: [&str; 8] = [
    "TASK",
    "PLAN",
    "ACTION",
    "PRE-STATE",
    "POST-STATE",
    "TRIGGER",
    "MECHANISM",
    "REASONING",
];
pub const DEFAULT_DELIMITER: &str = "====";
const ESCAPE: char = '\\';

fn reserved(line: &str, delimiter: &str) -> bool {
    line == delimiter || HEADERS.contains(&line) || line.starts_with(ESCAPE)
}

fn push_escaped(out: &mut String, text: &str, delimiter: &str) {
    for (i, line) in text.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if reserved(line, delimiter) {
            out.push(ESCAPE);
        }
        out.push_str(line);
    }
}

/// One document with the default delimiter reserved.
pub fn pack_sample(sample: &SynthesizedSample) -> String {
    pack_sample_with(sample, DEFAULT_DELIMITER)
}

pub fn pack_sample_with(sample: &SynthesizedSample, delimiter: &str) -> String {
    let plan = sample
        .plan
        .subgoals
        .iter()
        .enumerate()
        .map(|(i, g)| format!("{}. {g}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let r = &sample.rationale;
    let bodies = [
        sample.task.as_str(),
        plan.as_str(),
        sample.grounded_action.as_str(),
        &r.pre_state,
        &r.post_state,
        &r.trigger,
        &r.mechanism,
        &r.chain_of_thought,
    ];
    let mut out = String::new();
    for (i, (header, body)) in HEADERS.iter().zip(bodies).enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        out.push_str(header);
        out.push('\n');
        push_escaped(&mut out, body, delimiter);
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentStats {
    pub chars: u64,
    /// Whitespace-separated tokens.
    pub tokens: u64,
}

impl DocumentStats {
    pub fn of(text: &str) -> Self {
        DocumentStats {
            chars: text.chars().count() as u64,
            tokens: text.split_whitespace().count() as u64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PackStats {
    pub documents: usize,
    pub total_chars: u64,
    pub total_tokens: u64,
    pub bytes: u64,
    pub shards: usize,
    pub per_document: Vec<DocumentStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedCorpus {
    pub documents: Vec<String>,
    pub manifest: Vec<String>,
    pub stats: PackStats,
}

#[derive(Debug, Error)]
pub enum PackError {
    #[error("nothing to pack")]
    Empty,
    #[error("delimiter must be a single non-empty line")]
    Delimiter,
    #[error("sink failed after {written} document(s): {source}")]
    Sink {
        written: usize,
        #[source]
        source: io::Error,
    },
}

/// Destination for packed documents. `document` receives each document
/// already terminated by its delimiter line.
pub trait CorpusSink {
    fn document(&mut self, sample_id: &str, bytes: &[u8]) -> io::Result<()>;
    fn finish(&mut self) -> io::Result<usize>;
}

/// Packs in input order, writing each document and its manifest entry
/// before moving on, so a failing sink leaves a manifest of what was
/// written.
pub fn pack_corpus(
    samples: &[SynthesizedSample],
    delimiter: &str,
    sink: &mut dyn CorpusSink,
) -> Result<PackedCorpus, PackError> {
    if samples.is_empty() {
        return Err(PackError::Empty);
    }
    if delimiter.is_empty() || delimiter.contains(['\n', '\r']) || delimiter.starts_with(ESCAPE) {
        return Err(PackError::Delimiter);
    }
    let mut packed = PackedCorpus {
        documents: Vec::new(),
        manifest: Vec::new(),
        stats: PackStats::default(),
    };
    for (written, sample) in samples.iter().enumerate() {
        let doc = pack_sample_with(sample, delimiter);
        let unit = format!("{doc}\n{delimiter}\n");
        sink.document(&sample.id, unit.as_bytes())
            .map_err(|source| PackError::Sink { written, source })?;
        let s = DocumentStats::of(&doc);
        packed.stats.total_chars += s.chars;
        packed.stats.total_tokens += s.tokens;
        packed.stats.bytes += unit.len() as u64;
        packed.stats.per_document.push(s);
        packed.documents.push(doc);
        packed.manifest.push(sample.id.clone());
    }
    packed.stats.documents = packed.documents.len();
    packed.stats.shards = sink.finish().map_err(|source| PackError::Sink {
        written: samples.len(),
        source,
    })?;
    Ok(packed)
}

/// Writes the corpus to `<dir>/<name>` or, with a shard threshold, to
/// `<dir>/<stem>-00000.<ext>`, ... A shard is closed before a document
/// would push it past the threshold; a document larger than the threshold
/// gets a shard of its own. The manifest starts with an optional header.
pub struct FileSink {
    dir: PathBuf,
    name: String,
    shard_bytes: Option<u64>,
    current: Option<(BufWriter<File>, u64)>,
    paths: Vec<PathBuf>,
    manifest: BufWriter<File>,
}

impl FileSink {
    pub fn create(
        corpus_path: &Path,
        manifest_path: &Path,
        shard_bytes: Option<u64>,
        header: Option<&RecordHeader>,
    ) -> io::Result<Self> {
        let mut manifest = BufWriter::new(File::create(manifest_path)?);
        if let Some(h) = header {
            writeln!(manifest, "{}", h.to_line())?;
        }
        let dir = corpus_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let name = corpus_path
            .file_name()
            .ok_or_else(|| {
                io::Error::new(io::ErrorKind::InvalidInput, "corpus path has no file name")
            })?
            .to_string_lossy()
            .into_owned();
        Ok(FileSink {
            dir,
            name,
            shard_bytes: shard_bytes.filter(|b| *b > 0),
            current: None,
            paths: Vec::new(),
            manifest,
        })
    }

    pub fn shard_path(&self, index: usize) -> PathBuf {
        match self.shard_bytes {
            None => self.dir.join(&self.name),
            Some(_) => {
                let (stem, ext) = match self.name.rsplit_once('.') {
                    Some((s, e)) if !s.is_empty() => (s, format!(".{e}")),
                    _ => (self.name.as_str(), String::new()),
                };
                self.dir.join(format!("{stem}-{index:05}{ext}"))
            }
        }
    }

    /// Files written so far, in order.
    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    fn open_next(&mut self) -> io::Result<()> {
        if let Some((mut w, _)) = self.current.take() {
            w.flush()?;
        }
        let path = self.shard_path(self.paths.len());
        self.current = Some((BufWriter::new(File::create(&path)?), 0));
        self.paths.push(path);
        Ok(())
    }
}

impl CorpusSink for FileSink {
    fn document(&mut self, sample_id: &str, bytes: &[u8]) -> io::Result<()> {
        let len = bytes.len() as u64;
        let roll = match (&self.current, self.shard_bytes) {
            (None, _) => true,
            (Some((_, used)), Some(limit)) => *used > 0 && used + len > limit,
            (Some(_), None) => false,
        };
        if roll {
            self.open_next()?;
        }
        let (w, used) = self.current.as_mut().expect("open shard");
        w.write_all(bytes)?;
        *used += len;
        writeln!(self.manifest, "{sample_id}")
    }

    fn finish(&mut self) -> io::Result<usize> {
        if let Some((w, _)) = self.current.as_mut() {
            w.flush()?;
        }
        self.manifest.flush()?;
        Ok(self.paths.len())
    }
}

/// In-memory sink.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub bytes: Vec<u8>,
    pub manifest: Vec<String>,
}

impl CorpusSink for MemorySink {
    fn document(&mut self, sample_id: &str, bytes: &[u8]) -> io::Result<()> {
        self.bytes.extend_from_slice(bytes);
        self.manifest.push(sample_id.to_string());
        Ok(())
    }

    fn finish(&mut self) -> io::Result<usize> {
        Ok(1)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::tests::sample;
    use crate::model::{Plan, Rationale};
    use proptest::prelude::*;

    fn unescape(line: &str) -> &str {
        line.strip_prefix(ESCAPE).unwrap_or(line)
    }

    /// Inverse of [`pack_sample_with`], returning the eight section texts.
    pub(crate) fn parse_document(doc: &str) -> Vec<String> {
        let lines: Vec<&str> = doc.split('\n').collect();
        let starts: Vec<usize> = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| HEADERS.contains(l))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(starts.len(), HEADERS.len(), "{doc}");
        starts
            .iter()
            .enumerate()
            .map(|(n, &s)| {
                let end = match starts.get(n + 1) {
                    Some(&next) => next - 1, // blank separator line
                    None => lines.len(),
                };
                lines[s + 1..end]
                    .iter()
                    .map(|l| unescape(l))
                    .collect::<Vec<_>>()
                    .join("\n")
            })
            .collect()
    }

    fn fields(s: &SynthesizedSample) -> Vec<String> {
        let plan = s
            .plan
            .subgoals
            .iter()
            .enumerate()
            .map(|(i, g)| format!("{}. {g}", i + 1))
            .collect::<Vec<_>>();
        let r = &s.rationale;
        vec![
            s.task.clone(),
            plan.join("\n"),
            s.grounded_action.clone(),
            r.pre_state.clone(),
            r.post_state.clone(),
            r.trigger.clone(),
            r.mechanism.clone(),
            r.chain_of_thought.clone(),
        ]
    }

    #[test]
    fn headers_once_in_order() {
        let doc = pack_sample(&sample("t", 0, "x"));
        let found: Vec<&str> = doc.lines().filter(|l| HEADERS.contains(l)).collect();
        assert_eq!(found, HEADERS);
        assert!(doc.starts_with("TASK\ntask x\n\nPLAN\n1. open app\n2. do x\n\nACTION\n"));
        assert_ne!(doc, pack_sample(&sample("t", 0, "y")));
    }

    #[test]
    fn reserved_lines_are_escaped() {
        let mut s = sample("t", 0, "x");
        s.rationale.chain_of_thought = "====\nPLAN\n\\n\nfine\n".into();
        let doc = pack_sample(&s);
        assert!(doc.ends_with("REASONING\n\\====\n\\PLAN\n\\\\n\nfine\n"));
        assert_eq!(doc.lines().filter(|l| *l == DEFAULT_DELIMITER).count(), 0);
        assert_eq!(parse_document(&doc), fields(&s));
    }

    #[test]
    fn corpus_layout_and_stats() {
        let samples: Vec<_> = (0..3).map(|i| sample("t", i, "x")).collect();
        let mut sink = MemorySink::default();
        let packed = pack_corpus(&samples, DEFAULT_DELIMITER, &mut sink).unwrap();
        assert_eq!(packed.stats.documents, 3);
        assert_eq!(sink.manifest, ["t#0", "t#1", "t#2"]);
        let text = String::from_utf8(sink.bytes).unwrap();
        assert_eq!(
            text,
            packed
                .documents
                .iter()
                .map(|d| format!("{d}\n====\n"))
                .collect::<String>()
        );
        let chars: u64 = packed.stats.per_document.iter().map(|d| d.chars).sum();
        assert_eq!(chars, packed.stats.total_chars);
        assert!(matches!(
            pack_corpus(&[], DEFAULT_DELIMITER, &mut MemorySink::default()),
            Err(PackError::Empty)
        ));
        assert_eq!(PackError::Empty.to_string(), "nothing to pack");
    }

    struct Failing(usize);
    impl CorpusSink for Failing {
        fn document(&mut self, _: &str, _: &[u8]) -> io::Result<()> {
            if self.0 == 0 {
                return Err(io::Error::other("disk full"));
            }
            self.0 -= 1;
            Ok(())
        }
        fn finish(&mut self) -> io::Result<usize> {
            Ok(1)
        }
    }

    #[test]
    fn sink_failure_reports_progress() {
        let samples: Vec<_> = (0..4).map(|i| sample("t", i, "x")).collect();
        match pack_corpus(&samples, DEFAULT_DELIMITER, &mut Failing(2)) {
            Err(PackError::Sink { written, .. }) => assert_eq!(written, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shards_concatenate_to_whole() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..12)
            .map(|i| sample("t", i, &"w".repeat(40 + i * 5)))
            .collect();
        let mut whole = FileSink::create(
            &dir.path().join("all.txt"),
            &dir.path().join("all.ids"),
            None,
            None,
        )
        .unwrap();
        let packed = pack_corpus(&samples, DEFAULT_DELIMITER, &mut whole).unwrap();
        assert!(packed.stats.bytes > 3072);
        let mut sharded = FileSink::create(
            &dir.path().join("part.txt"),
            &dir.path().join("part.ids"),
            Some(1024),
            None,
        )
        .unwrap();
        pack_corpus(&samples, DEFAULT_DELIMITER, &mut sharded).unwrap();
        assert!(sharded.paths().len() >= 3);
        assert!(sharded.paths()[0].ends_with("part-00000.txt"));
        let mut joined = Vec::new();
        for p in sharded.paths() {
            let bytes = std::fs::read(p).unwrap();
            assert!(bytes.len() <= 1024);
            joined.extend(bytes);
        }
        assert_eq!(joined, std::fs::read(dir.path().join("all.txt")).unwrap());
    }

    fn text() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop_oneof![
                Just("TASK".to_string()),
                Just("====".to_string()),
                Just("\\".to_string()),
                Just(String::new()),
                "[a-zA-Z \\\\=#-]{1,12}",
            ],
            1..5,
        )
        .prop_map(|lines| lines.join("\n"))
        .prop_filter("non-blank", |s| !s.trim().is_empty())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn pack_parse_round_trip(
            task in text(), action in text(),
            goals in prop::collection::vec("[a-z]{1,8}( [a-z]{1,8})?", 1..4),
            r in prop::collection::vec(text(), 5),
        ) {
            let s = SynthesizedSample::new(
                "traj", 3, task, Plan::new(goals).unwrap(), action,
                Rationale {
                    pre_state: r[0].clone(), post_state: r[1].clone(), trigger: r[2].clone(),
                    mechanism: r[3].clone(), chain_of_thought: r[4].clone(),
                },
            ).unwrap();
            let doc = pack_sample(&s);
            prop_assert!(!doc.split('\n').any(|l| l == DEFAULT_DELIMITER));
            prop_assert_eq!(parse_document(&doc), fields(&s));
        }
    }
}
