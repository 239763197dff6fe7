//! Cumulative coverage and dedup hashes, shared between instances through
//! per-instance append-only logs.
//!
//! Layout under the persist directory:
//!
//! ```text
//! hashes/<instance-id>.log     one 64-hex candidate hash per line
//! coverage/<instance-id>.log   `file<TAB>line` per line
//! claims/<xx>/<hash>           empty marker, created exclusively
//! ```
//!
//! Each instance only ever appends to its own two files and reads everybody
//! else's. A reader consumes complete lines only, so a file cut short by a
//! crash is still a valid prefix.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::model::{CandidateHash, FeedbackRecord};

/// Records longer than this are never written.
pub const MAX_RECORD_BYTES: usize = 4096;

const HASH_DIR: &str = "hashes";
const COVERAGE_DIR: &str = "coverage";
const CLAIM_DIR: &str = "claims";

/// What one `sync` call moved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SyncStats {
    pub written: usize,
    pub merged_hashes: usize,
    pub merged_lines: usize,
}

#[derive(Debug)]
struct Persistence {
    dir: PathBuf,
    instance_id: String,
    pending_hashes: Vec<CandidateHash>,
    pending_lines: Vec<(String, u32)>,
    /// Read position per foreign log file; always just past a newline.
    offsets: HashMap<PathBuf, u64>,
}

#[derive(Debug, Default)]
pub struct GlobalCoverageStore {
    covered: HashMap<String, HashSet<u32>>,
    seen_hashes: HashSet<CandidateHash>,
    persist: Option<Persistence>,
}

impl GlobalCoverageStore {
    /// A store that never touches the filesystem.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) the shared layout and loads every instance's
    /// persisted entries, including this instance's own from earlier runs.
    pub fn open(persist_dir: impl AsRef<Path>, instance_id: impl Into<String>) -> io::Result<Self> {
        let dir = persist_dir.as_ref().to_path_buf();
        let instance_id = instance_id.into();
        if instance_id.is_empty() || instance_id.contains(['/', '\\', '\n']) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("invalid instance id {instance_id:?}"),
            ));
        }
        fs::create_dir_all(dir.join(HASH_DIR))?;
        fs::create_dir_all(dir.join(COVERAGE_DIR))?;

        let mut store = GlobalCoverageStore {
            persist: Some(Persistence {
                dir,
                instance_id,
                pending_hashes: Vec::new(),
                pending_lines: Vec::new(),
                offsets: HashMap::new(),
            }),
            ..Default::default()
        };
        let own = store.own_logs().expect("persistent store");
        for path in &own {
            terminate_partial_line(path)?;
        }
        store.merge_foreign(true)?;
        Ok(store)
    }

    pub fn persist_dir(&self) -> Option<&Path> {
        self.persist.as_ref().map(|p| p.dir.as_path())
    }

    pub fn instance_id(&self) -> Option<&str> {
        self.persist.as_ref().map(|p| p.instance_id.as_str())
    }

    pub fn has_seen(&self, hash: &CandidateHash) -> bool {
        self.seen_hashes.contains(hash)
    }

    /// Records a hash; returns false if it was already known.
    pub fn insert_hash(&mut self, hash: CandidateHash) -> bool {
        let new = self.seen_hashes.insert(hash);
        if new {
            if let Some(p) = &mut self.persist {
                p.pending_hashes.push(hash);
            }
        }
        new
    }

    /// Records a hash and, for a persistent store, takes it exclusively on the
    /// shared volume. Returns false if this or any other instance got there
    /// first, so a hash is evaluated at most once even between syncs.
    pub fn claim(&mut self, hash: CandidateHash) -> io::Result<bool> {
        if self.seen_hashes.contains(&hash) {
            return Ok(false);
        }
        if let Some(p) = &self.persist {
            let hex = hash.to_hex();
            let path = p.dir.join(CLAIM_DIR).join(&hex[..2]).join(&hex);
            let create = || OpenOptions::new().write(true).create_new(true).open(&path);
            let created = match create() {
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    fs::create_dir_all(path.parent().expect("claim dir"))?;
                    create()
                }
                r => r,
            };
            match created {
                Ok(_) => {}
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    self.seen_hashes.insert(hash);
                    return Ok(false);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(self.insert_hash(hash))
    }

    pub fn seen_hashes(&self) -> &HashSet<CandidateHash> {
        &self.seen_hashes
    }

    pub fn is_covered(&self, file: &str, line: u32) -> bool {
        self.covered.get(file).is_some_and(|l| l.contains(&line))
    }

    pub fn knows_file(&self, file: &str) -> bool {
        self.covered.contains_key(file)
    }

    pub fn covered_lines(&self) -> usize {
        self.covered.values().map(HashSet::len).sum()
    }

    pub fn known_files(&self) -> usize {
        self.covered.len()
    }

    /// Every covered `(file, line)` pair.
    pub fn covered_pairs(&self) -> impl Iterator<Item = (&str, u32)> {
        self.covered
            .iter()
            .flat_map(|(f, lines)| lines.iter().map(move |l| (f.as_str(), *l)))
    }

    fn add_line(&mut self, file: &str, line: u32, record: bool) -> bool {
        let new = match self.covered.get_mut(file) {
            Some(lines) => lines.insert(line),
            None => {
                self.covered.insert(file.to_string(), HashSet::from([line]));
                true
            }
        };
        if new && record {
            if let Some(p) = &mut self.persist {
                p.pending_lines.push((file.to_string(), line));
            }
        }
        new
    }

    /// Merges a feedback record's coverage; monotone.
    pub fn merge_coverage(&mut self, fb: &FeedbackRecord) {
        for (file, lines) in &fb.coverage {
            for &line in lines {
                self.add_line(file, line, true);
            }
        }
    }

    /// Appends this instance's new entries to its logs, then merges every
    /// other instance's logs. On error, unwritten entries stay pending and
    /// are retried by the next call.
    pub fn sync(&mut self) -> io::Result<SyncStats> {
        let Some(p) = &mut self.persist else {
            return Ok(SyncStats::default());
        };
        let mut stats = SyncStats::default();

        let hash_path = p.dir.join(HASH_DIR).join(format!("{}.log", p.instance_id));
        let cov_path = p
            .dir
            .join(COVERAGE_DIR)
            .join(format!("{}.log", p.instance_id));

        if !p.pending_hashes.is_empty() {
            let mut file = open_append(&hash_path)?;
            let mut done = 0;
            for hash in &p.pending_hashes {
                let record = format!("{hash}\n");
                if let Err(e) = file.write_all(record.as_bytes()) {
                    p.pending_hashes.drain(..done);
                    return Err(e);
                }
                done += 1;
            }
            stats.written += done;
            p.pending_hashes.clear();
        }

        if !p.pending_lines.is_empty() {
            let mut file = open_append(&cov_path)?;
            let mut done = 0;
            for (path, line) in &p.pending_lines {
                done += 1;
                if path.contains(['\t', '\n', '\r']) {
                    tracing::warn!(file = %path, "coverage path not representable in log");
                    continue;
                }
                let record = format!("{path}\t{line}\n");
                if record.len() > MAX_RECORD_BYTES {
                    tracing::warn!(file = %path, "coverage record exceeds 4 KiB, not persisted");
                    continue;
                }
                if let Err(e) = file.write_all(record.as_bytes()) {
                    p.pending_lines.drain(..done - 1);
                    return Err(e);
                }
                stats.written += 1;
            }
            p.pending_lines.clear();
        }

        let (hashes, lines) = self.merge_foreign(false)?;
        stats.merged_hashes = hashes;
        stats.merged_lines = lines;
        Ok(stats)
    }

    fn own_logs(&self) -> Option<[PathBuf; 2]> {
        let p = self.persist.as_ref()?;
        Some([
            p.dir.join(HASH_DIR).join(format!("{}.log", p.instance_id)),
            p.dir
                .join(COVERAGE_DIR)
                .join(format!("{}.log", p.instance_id)),
        ])
    }

    /// Reads new complete lines from log files. `include_own` is only set
    /// while loading at open time.
    fn merge_foreign(&mut self, include_own: bool) -> io::Result<(usize, usize)> {
        let own = self.own_logs().expect("persistent store");
        let dir = self.persist.as_ref().expect("persistent store").dir.clone();
        let mut merged_hashes = 0;
        let mut merged_lines = 0;

        for (sub, is_hash) in [(HASH_DIR, true), (COVERAGE_DIR, false)] {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir.join(sub))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "log"))
                .filter(|p| include_own || !own.contains(p))
                .collect();
            paths.sort();

            for path in paths {
                let offset = self
                    .persist
                    .as_ref()
                    .and_then(|p| p.offsets.get(&path).copied())
                    .unwrap_or(0);
                let (chunk, consumed) = match read_complete_lines(&path, offset) {
                    Ok(r) => r,
                    // Another instance may be rotating or just created it.
                    Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                    Err(e) => return Err(e),
                };
                for line in chunk.lines() {
                    if is_hash {
                        if let Ok(hash) = line.parse::<CandidateHash>() {
                            if self.seen_hashes.insert(hash) {
                                merged_hashes += 1;
                            }
                        }
                    } else if let Some((file, n)) = line.rsplit_once('\t') {
                        if let Ok(n) = n.parse::<u32>() {
                            if n >= 1 && self.add_line(file, n, false) {
                                merged_lines += 1;
                            }
                        }
                    }
                }
                if let Some(p) = &mut self.persist {
                    p.offsets.insert(path, offset + consumed);
                }
            }
        }
        Ok((merged_hashes, merged_lines))
    }
}

fn open_append(path: &Path) -> io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

/// Returns the text from `offset` up to and including the last newline, and
/// the number of bytes that covers.
fn read_complete_lines(path: &Path, offset: u64) -> io::Result<(String, u64)> {
    let mut file = File::open(path)?;
    file.seek(SeekFrom::Start(offset))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let Some(last_nl) = buf.iter().rposition(|&b| b == b'\n') else {
        return Ok((String::new(), 0));
    };
    buf.truncate(last_nl + 1);
    let consumed = buf.len() as u64;
    Ok((String::from_utf8_lossy(&buf).into_owned(), consumed))
}

/// A crash can leave this instance's own log without a trailing newline;
/// close it off so the next record does not fuse with the fragment.
fn terminate_partial_line(path: &Path) -> io::Result<()> {
    let mut file = match OpenOptions::new().read(true).append(true).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    let len = file.metadata()?.len();
    if len == 0 {
        return Ok(());
    }
    file.seek(SeekFrom::Start(len - 1))?;
    let mut last = [0u8; 1];
    file.read_exact(&mut last)?;
    if last[0] != b'\n' {
        file.write_all(b"\n")?;
    }
    Ok(())
}
