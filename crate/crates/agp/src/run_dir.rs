//! Run directory artifacts.
//!
//! ```text
//! run.json               resumable state
//! prompts/prompt_v{n}.txt one file per prompt version
//! prompts/lineage.jsonl  version, parent, origin and note per version
//! metrics.csv            epoch,split,ndcg@10,avg_pos,repair_rate
//! ledger.csv             training-stage calls per purpose
//! ledger_validation.csv  validation calls per purpose
//! feedback.log           one JSON line per user per batch
//! reranked.jsonl         every training rerank
//! eval/                  reports written by `agp eval`
//! ```

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use agp_core::feedback::pairs_digest;
use agp_core::optimizer::{BatchRecord, EpochMetrics, Evaluation, RunState, TrainObserver};
use agp_core::{PromptOrigin, PromptState};
use serde::Serialize;

pub const STATE_FILE: &str = "run.json";

#[derive(Debug, thiserror::Error)]
pub enum RunDirError {
    #[error("run directory {} is not empty; pass --resume to continue it", .0.display())]
    NotEmpty(PathBuf),
    #[error("no checkpoint in {}: {STATE_FILE} is missing", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> RunDirError + '_ {
    move |source| RunDirError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize)]
struct LineageEntry<'a> {
    version: u32,
    parent_version: Option<u32>,
    created_by: PromptOrigin,
    note: &'a str,
    file: String,
}

#[derive(Serialize)]
struct FeedbackLine<'a> {
    epoch: u32,
    batch_index: usize,
    user_id: &'a str,
    pairs: String,
    avg_pos: f64,
    weight: f64,
    diagnosis: &'a str,
}

#[derive(Serialize)]
struct RerankLine<'a> {
    epoch: u32,
    batch_index: usize,
    #[serde(flatten)]
    list: &'a agp_core::RerankedList,
}

impl RunDir {
    /// A new run; the directory may exist only if it is empty.
    pub fn create_fresh(root: &Path) -> Result<Self, RunDirError> {
        if root.exists() {
            let mut entries = fs::read_dir(root).map_err(io_at(root))?;
            if entries.next().is_some() {
                return Err(RunDirError::NotEmpty(root.to_path_buf()));
            }
        }
        fs::create_dir_all(root.join("prompts")).map_err(io_at(root))?;
        Ok(RunDir {
            root: root.to_path_buf(),
        })
    }

    /// An existing run with a saved state.
    pub fn open(root: &Path) -> Result<Self, RunDirError> {
        if !root.join(STATE_FILE).is_file() {
            return Err(RunDirError::MissingCheckpoint(root.to_path_buf()));
        }
        Ok(RunDir {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn load_state(&self) -> Result<RunState, RunDirError> {
        let path = self.root.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(io_at(&path))?;
        serde_json::from_str(&text).map_err(|e| RunDirError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    /// Replaces `name` atomically.
    fn write_file(&self, name: &str, contents: &[u8]) -> Result<(), RunDirError> {
        let path = self.root.join(name);
        let tmp = self.root.join(format!("{name}.tmp"));
        fs::write(&tmp, contents).map_err(io_at(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_at(&path))
    }

    fn append_lines<T: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<(), RunDirError> {
        let path = self.root.join(name);
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_at(&path))?;
        let mut w = BufWriter::new(file);
        for row in rows {
            serde_json::to_writer(&mut w, &row).map_err(|e| io_at(&path)(e.into()))?;
            w.write_all(b"\n").map_err(io_at(&path))?;
        }
        w.flush().map_err(io_at(&path))
    }

    /// Everything derived from the state: run.json, prompts, metrics and ledgers.
    pub fn save(&self, state: &RunState) -> Result<(), RunDirError> {
        let json = serde_json::to_vec_pretty(state).expect("run state serializes");
        self.write_file(STATE_FILE, &json)?;
        self.write_prompts(&state.lineage)?;
        self.write_file("metrics.csv", metrics_csv(&state.metrics).as_bytes())?;
        self.write_file("ledger.csv", state.training_calls.to_csv().as_bytes())?;
        self.write_file("ledger_validation.csv", state.validation_calls.to_csv().as_bytes())
    }

    fn write_prompts(&self, lineage: &[PromptState]) -> Result<(), RunDirError> {
        let mut index = String::new();
        for p in lineage {
            let file = format!("prompt_v{}.txt", p.version);
            let path = self.root.join("prompts").join(&file);
            if !path.exists() {
                fs::write(&path, &p.text).map_err(io_at(&path))?;
            }
            let entry = LineageEntry {
                version: p.version,
                parent_version: p.parent_version,
                created_by: p.created_by,
                note: &p.note,
                file,
            };
            index.push_str(&serde_json::to_string(&entry).expect("lineage entry serializes"));
            index.push('\n');
        }
        self.write_file("prompts/lineage.jsonl", index.as_bytes())
    }

    pub fn append_batch(&self, record: &BatchRecord) -> Result<(), RunDirError> {
        let (epoch, batch_index) = (record.batch.epoch, record.batch.index);
        self.append_lines(
            "feedback.log",
            record.feedbacks.iter().map(|f| FeedbackLine {
                epoch,
                batch_index,
                user_id: &f.user_id,
                pairs: pairs_digest(&f.pairs),
                avg_pos: f.avg_pos,
                weight: f.weight,
                diagnosis: &f.diagnosis,
            }),
        )?;
        self.append_lines(
            "reranked.jsonl",
            record.lists.iter().map(|list| RerankLine {
                epoch,
                batch_index,
                list,
            }),
        )
    }

    /// Writes `eval/<label>.csv`, `<label>_summary.txt` and
    /// `<label>_reranked.jsonl`; returns the CSV path.
    pub fn write_eval(&self, label: &str, eval: &Evaluation) -> Result<PathBuf, RunDirError> {
        let dir = self.root.join("eval");
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        let csv = dir.join(format!("{label}.csv"));
        fs::write(&csv, eval.report.to_csv()).map_err(io_at(&csv))?;
        let summary = dir.join(format!("{label}_summary.txt"));
        fs::write(&summary, eval.report.summary()).map_err(io_at(&summary))?;
        let lists = dir.join(format!("{label}_reranked.jsonl"));
        crate::formats::write_jsonl(&lists, &eval.lists).map_err(io_at(&lists))?;
        Ok(csv)
    }
}

/// Opens (or creates) a run directory for `agp eval` without requiring a
/// checkpoint.
pub fn for_reports(root: &Path) -> Result<RunDir, RunDirError> {
    fs::create_dir_all(root).map_err(io_at(root))?;
    Ok(RunDir {
        root: root.to_path_buf(),
    })
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,ndcg@10,avg_pos,repair_rate\n");
    for m in metrics {
        let splits = [("train", Some(m.train)), ("validation", m.validation)];
        for (name, split) in splits {
            if let Some(s) = split {
                let _ = writeln!(
                    out,
                    "{},{name},{:.6},{:.4},{:.4}",
                    m.epoch, s.ndcg_at_10, s.avg_pos, s.repair_rate
                );
            }
        }
    }
    out
}

/// Persists after every batch and epoch. I/O errors are kept and reported
/// once training returns.
pub struct Checkpointer<'a> {
    dir: &'a RunDir,
    pub error: Option<RunDirError>,
}

impl<'a> Checkpointer<'a> {
    pub fn new(dir: &'a RunDir) -> Self {
        Checkpointer { dir, error: None }
    }

    fn keep(&mut self, result: Result<(), RunDirError>) {
        if let Err(e) = result {
            log::error!("checkpoint failed: {e}");
            self.error.get_or_insert(e);
        }
    }
}

impl TrainObserver for Checkpointer<'_> {
    fn on_batch(&mut self, record: &BatchRecord, state: &RunState) {
        let r = self.dir.append_batch(record).and_then(|_| self.dir.save(state));
        self.keep(r);
    }

    fn on_epoch(&mut self, _metrics: &EpochMetrics, state: &RunState) {
        let r = self.dir.save(state);
        self.keep(r);
    }
}

/// Reads a prompt file as a version-0 seed.
pub fn read_prompt_file(path: &Path) -> io::Result<PromptState> {
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "prompt file is empty"));
    }
    Ok(PromptState::seed(text.trim_end().to_string(), format!("file {}", path.display())))
}

/// Plain-text per-epoch table for the terminal.
pub fn epoch_table(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch  train_ndcg  val_ndcg  val_avg_pos  prompt  calls\n");
    for m in metrics {
        let (v, p) = m
            .validation
            .map(|v| (format!("{:.4}", v.ndcg_at_10), format!("{:.3}", v.avg_pos)))
            .unwrap_or(("-".into(), "-".into()));
        let _ = writeln!(
            out,
            "{:>5}  {:>10.4}  {:>8}  {:>11}  {:>6}  {:>5}",
            m.epoch,
            m.train.ndcg_at_10,
            v,
            p,
            format!("v{}", m.prompt_version),
            m.training_calls.total()
        );
    }
    out
}

#[allow(dead_code)]
fn _assert_file_is_send(_: File) {}
