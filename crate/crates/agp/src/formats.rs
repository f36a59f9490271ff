//! Line-delimited JSON files for users and baseline rankings.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use agp_core::{BaselineRanking, DatasetBundle, DatasetError, UserRecord};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Data(#[from] DatasetError),
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> LoadError + '_ {
    move |source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, LoadError> {
    let file = File::open(path).map_err(io_error(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| LoadError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, records: impl IntoIterator<Item = &'a T>) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn load_users(path: &Path) -> Result<Vec<UserRecord>, LoadError> {
    read_jsonl(path)
}

pub fn load_rankings(path: &Path) -> Result<Vec<BaselineRanking>, LoadError> {
    read_jsonl(path)
}

/// Loads and cross-checks both files. The split is left empty.
pub fn load_bundle(users: &Path, rankings: &Path) -> Result<DatasetBundle, LoadError> {
    let users = load_users(users)?;
    let rankings = load_rankings(rankings)?;
    Ok(DatasetBundle::new(users, rankings)?)
}

/// Writes `users.jsonl` and `rankings.jsonl` into `dir`.
pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> io::Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let users = dir.join("users.jsonl");
    let rankings = dir.join("rankings.jsonl");
    write_jsonl(&users, bundle.users.values())?;
    write_jsonl(&rankings, bundle.rankings.values())?;
    Ok((users, rankings))
}
