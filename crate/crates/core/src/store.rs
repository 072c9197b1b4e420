//! Event-sourced course store.
//!
//! Each course has its own mutex, in-memory state and append-only log. A
//! transaction emits events that are applied to the live state as they are
//! emitted; on error the state is rebuilt from the committed log, so a
//! failed transaction leaves nothing behind. With a root directory the log
//! is also written to `courses/<id>/events.jsonl` (one record per line) and
//! snapshotted periodically.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use sha2::{Digest, Sha256};

use crate::archive::{read_zip, ZipWriter};
use crate::domain::{CourseId, Timestamp};
use crate::error::{Error, Result};
use crate::state::{CourseState, Event, EventRecord};
use crate::workflow::Payload;

const EVENTS_FILE: &str = "events.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub root: Option<PathBuf>,
    /// Write a snapshot after this many events since the last one.
    pub snapshot_every: u64,
    /// fsync the log on every commit.
    pub sync: bool,
}

impl StoreConfig {
    pub fn in_memory() -> Self {
        Self { root: None, snapshot_every: 1000, sync: false }
    }

    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self { root: Some(root.into()), snapshot_every: 1000, sync: true }
    }
}

struct CourseSlot {
    state: CourseState,
    log: Vec<EventRecord>,
    file: Option<File>,
    since_snapshot: u64,
}

/// Course names and enrollment codes must be unique across the store.
#[derive(Default)]
pub struct Registry {
    pub names: BTreeMap<String, CourseId>,
    pub codes: BTreeMap<String, CourseId>,
    pub next_course: u64,
}

impl Registry {
    fn index(&mut self, state: &CourseState) {
        self.forget(state.course.id);
        self.names.insert(state.course.name.clone(), state.course.id);
        for code in state.course.enrollment_codes.values() {
            self.codes.insert(code.clone(), state.course.id);
        }
        self.next_course = self.next_course.max(state.course.id.0 + 1);
    }

    fn forget(&mut self, id: CourseId) {
        self.names.retain(|_, c| *c != id);
        self.codes.retain(|_, c| *c != id);
    }

    /// Checks that `name` and `codes` are free for course `id`.
    pub fn check_free<'a>(
        &self,
        id: Option<CourseId>,
        name: &str,
        codes: impl IntoIterator<Item = &'a String>,
    ) -> Result<()> {
        if self.names.get(name).is_some_and(|c| Some(*c) != id) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        for code in codes {
            if self.codes.get(code).is_some_and(|c| Some(*c) != id) {
                return Err(Error::DuplicateCode(code.clone()));
            }
        }
        Ok(())
    }
}

/// Content-addressed file storage.
pub struct BlobStore {
    dir: Option<PathBuf>,
    mem: RwLock<BTreeMap<String, Arc<Vec<u8>>>>,
}

pub fn content_address(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl BlobStore {
    fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
        }
        Ok(Self { dir, mem: RwLock::new(BTreeMap::new()) })
    }

    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let hash = content_address(bytes);
        if let Some(dir) = &self.dir {
            let path = dir.join(&hash);
            if !path.exists() {
                write_atomic(&path, bytes)?;
            }
        } else {
            self.mem
                .write()
                .unwrap()
                .entry(hash.clone())
                .or_insert_with(|| Arc::new(bytes.to_vec()));
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> Result<Arc<Vec<u8>>> {
        if !hash.chars().all(|c| c.is_ascii_hexdigit()) || hash.is_empty() {
            return Err(Error::not_found(format!("blob {hash}")));
        }
        if let Some(dir) = &self.dir {
            return match fs::read(dir.join(hash)) {
                Ok(b) => Ok(Arc::new(b)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    Err(Error::not_found(format!("blob {hash}")))
                }
                Err(e) => Err(e.into()),
            };
        }
        self.mem
            .read()
            .unwrap()
            .get(hash)
            .cloned()
            .ok_or_else(|| Error::not_found(format!("blob {hash}")))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Handle given to a transaction body.
pub struct Tx<'a> {
    state: &'a mut CourseState,
    pending: Vec<EventRecord>,
    actor: &'a str,
    now: Timestamp,
    reserved: u64,
}

impl<'a> Tx<'a> {
    pub fn state(&self) -> &CourseState {
        self.state
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn actor(&self) -> &str {
        self.actor
    }

    /// A fresh entity id. Ids that end up unused are not consumed.
    pub fn fresh_id(&mut self) -> u64 {
        let id = self.state.next_id.max(self.reserved);
        self.reserved = id + 1;
        id
    }

    /// Sequence number the next emitted event will get.
    pub fn next_sequence(&self) -> u64 {
        self.state.last_seq + 1
    }

    pub fn emit(&mut self, event: Event) {
        let record = EventRecord {
            sequence: self.state.last_seq + 1,
            timestamp: self.now,
            actor: self.actor.to_string(),
            tx_end: false,
            event,
        };
        self.state.apply(&record);
        self.pending.push(record);
    }

    pub fn emitted(&self) -> usize {
        self.pending.len()
    }
}

pub struct Store {
    config: StoreConfig,
    courses: RwLock<BTreeMap<CourseId, Arc<Mutex<CourseSlot>>>>,
    registry: Mutex<Registry>,
    blobs: BlobStore,
}

impl Store {
    pub fn in_memory() -> Self {
        Self::open(StoreConfig::in_memory()).expect("in-memory store cannot fail to open")
    }

    /// Opens a store, recovering every course found under the root.
    pub fn open(config: StoreConfig) -> Result<Self> {
        let blobs = BlobStore::new(config.root.as_ref().map(|r| r.join("blobs")))?;
        let store = Store {
            config,
            courses: RwLock::new(BTreeMap::new()),
            registry: Mutex::new(Registry { next_course: 1, ..Registry::default() }),
            blobs,
        };
        if let Some(root) = store.config.root.clone() {
            let courses = root.join("courses");
            fs::create_dir_all(&courses)?;
            let mut dirs: Vec<PathBuf> = fs::read_dir(&courses)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            for dir in dirs {
                let slot = recover_course(&dir, store.config.sync)?;
                let mut reg = store.registry.lock().unwrap();
                reg.index(&slot.state);
                store
                    .courses
                    .write()
                    .unwrap()
                    .insert(slot.state.course.id, Arc::new(Mutex::new(slot)));
            }
        }
        Ok(store)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn registry(&self) -> std::sync::MutexGuard<'_, Registry> {
        self.registry.lock().unwrap()
    }

    pub fn course_ids(&self) -> Vec<CourseId> {
        self.courses.read().unwrap().keys().copied().collect()
    }

    fn slot(&self, course: CourseId) -> Result<Arc<Mutex<CourseSlot>>> {
        self.courses
            .read()
            .unwrap()
            .get(&course)
            .cloned()
            .ok_or_else(|| Error::not_found(format!("course {course}")))
    }

    /// Creates a course from its first event. The caller must hold the
    /// registry lock and have checked uniqueness.
    pub fn create_course(
        &self,
        registry: &mut Registry,
        actor: &str,
        now: Timestamp,
        first: Event,
        then: impl FnOnce(&mut Tx) -> Result<()>,
    ) -> Result<CourseState> {
        let (course, rubric) = match &first {
            Event::CourseCreated { course, evaluation_rubric } => (course.clone(), evaluation_rubric.clone()),
            _ => return Err(Error::invalid("a course log must start with course_created")),
        };
        if self.courses.read().unwrap().contains_key(&course.id) {
            return Err(Error::Conflict(format!("course {} already exists", course.id)));
        }
        let mut state = CourseState::new(course.clone(), rubric);
        let mut tx = Tx { state: &mut state, pending: Vec::new(), actor, now, reserved: 0 };
        // CourseState::new is the effect of the first event; apply it again
        // through emit so the log and live state share one code path.
        tx.emit(first);
        then(&mut tx)?;
        let pending = std::mem::take(&mut tx.pending);
        let file = match &self.config.root {
            Some(root) => {
                let dir = root.join("courses").join(course.id.0.to_string());
                fs::create_dir_all(&dir)?;
                Some(
                    OpenOptions::new()
                        .create(true)
                        .truncate(true)
                        .write(true)
                        .open(dir.join(EVENTS_FILE))?,
                )
            }
            None => None,
        };
        let mut slot = CourseSlot { state, log: Vec::new(), file, since_snapshot: 0 };
        self.append(&mut slot, pending)?;
        let snapshot = slot.state.clone();
        registry.index(&snapshot);
        self.courses.write().unwrap().insert(course.id, Arc::new(Mutex::new(slot)));
        Ok(snapshot)
    }

    /// Runs `body` as one atomic transaction on `course`.
    pub fn transact<R>(
        &self,
        course: CourseId,
        actor: &str,
        now: Timestamp,
        body: impl FnOnce(&mut Tx) -> Result<R>,
    ) -> Result<R> {
        let slot = self.slot(course)?;
        let mut slot = slot.lock().unwrap();
        let slot = &mut *slot;
        let mut tx = Tx { state: &mut slot.state, pending: Vec::new(), actor, now, reserved: 0 };
        let out = body(&mut tx);
        let pending = std::mem::take(&mut tx.pending);
        match out {
            Ok(value) => {
                if !pending.is_empty() {
                    if let Err(e) = self.append(slot, pending) {
                        slot.state = CourseState::replay(&slot.log)?;
                        return Err(e);
                    }
                }
                if let Some(root) = &self.config.root {
                    if slot.since_snapshot >= self.config.snapshot_every {
                        write_snapshot(&course_dir(root, course), &slot.state)?;
                        slot.since_snapshot = 0;
                    }
                }
                Ok(value)
            }
            Err(e) => {
                if !pending.is_empty() {
                    slot.state = CourseState::replay(&slot.log)?;
                }
                Err(e)
            }
        }
    }

    fn append(&self, slot: &mut CourseSlot, mut pending: Vec<EventRecord>) -> Result<()> {
        if let Some(last) = pending.last_mut() {
            last.tx_end = true;
        }
        if let Some(file) = slot.file.as_mut() {
            let mut buf = Vec::new();
            for r in &pending {
                serde_json::to_writer(&mut buf, r)?;
                buf.push(b'\n');
            }
            file.write_all(&buf)?;
            if self.config.sync {
                file.sync_data()?;
            }
        }
        slot.since_snapshot += pending.len() as u64;
        slot.log.extend(pending);
        Ok(())
    }

    /// Snapshot-isolated read of one course.
    pub fn read<R>(&self, course: CourseId, f: impl FnOnce(&CourseState) -> R) -> Result<R> {
        let slot = self.slot(course)?;
        let slot = slot.lock().unwrap();
        Ok(f(&slot.state))
    }

    pub fn read_log<R>(&self, course: CourseId, f: impl FnOnce(&[EventRecord]) -> R) -> Result<R> {
        let slot = self.slot(course)?;
        let slot = slot.lock().unwrap();
        Ok(f(&slot.log))
    }

    /// Rebuilds the course from its log alone.
    pub fn replay(&self, course: CourseId) -> Result<CourseState> {
        self.read_log(course, |log| CourseState::replay(log))?
    }

    /// Event log, snapshot and referenced blobs as a zip archive.
    pub fn export_course(&self, course: CourseId) -> Result<Vec<u8>> {
        let (log, state) = {
            let slot = self.slot(course)?;
            let slot = slot.lock().unwrap();
            (slot.log.clone(), slot.state.clone())
        };
        let mut events = Vec::new();
        for r in &log {
            serde_json::to_writer(&mut events, r)?;
            events.push(b'\n');
        }
        let mut w = ZipWriter::new();
        w.add(EVENTS_FILE, &events)?;
        w.add(SNAPSHOT_FILE, &serde_json::to_vec_pretty(&state)?)?;
        for hash in referenced_blobs(&state) {
            let data = self.blobs.get(&hash)?;
            w.add(&format!("blobs/{hash}"), &data)?;
        }
        w.finish()
    }

    /// Restores an exported course. The log must be gap-free and replay to
    /// the included snapshot.
    pub fn import_course(&self, archive: &[u8]) -> Result<CourseId> {
        let entries = read_zip(archive)?;
        let find = |name: &str| entries.iter().find(|e| e.name == name);
        let events = find(EVENTS_FILE).ok_or_else(|| Error::MalformedArchive("missing events".into()))?;
        let snapshot = find(SNAPSHOT_FILE).ok_or_else(|| Error::MalformedArchive("missing snapshot".into()))?;
        let records = parse_records(&events.data)?;
        if records.first().map(|r| r.sequence) != Some(1) {
            return Err(Error::MalformedArchive("gap detected: log must start at sequence 1".into()));
        }
        let state = CourseState::replay(&records).map_err(|e| match e {
            Error::CorruptLog(m) => Error::MalformedArchive(m),
            other => other,
        })?;
        let expected: serde_json::Value = serde_json::from_slice(&snapshot.data)?;
        if serde_json::to_value(&state)? != expected {
            return Err(Error::MalformedArchive("replayed state differs from snapshot".into()));
        }
        for e in &entries {
            if let Some(hash) = e.name.strip_prefix("blobs/") {
                if content_address(&e.data) != hash {
                    return Err(Error::MalformedArchive(format!("blob {hash} does not match its address")));
                }
                self.blobs.put(&e.data)?;
            }
        }

        let mut registry = self.registry.lock().unwrap();
        let id = state.course.id;
        if self.courses.read().unwrap().contains_key(&id) {
            return Err(Error::Conflict(format!("course {id} already exists")));
        }
        registry.check_free(None, &state.course.name, state.course.enrollment_codes.values())?;
        let file = match &self.config.root {
            Some(root) => {
                let dir = course_dir(root, id);
                fs::create_dir_all(&dir)?;
                let mut f = OpenOptions::new()
                    .create(true)
                    .truncate(true)
                    .write(true)
                    .open(dir.join(EVENTS_FILE))?;
                f.write_all(&events.data)?;
                f.sync_all()?;
                write_snapshot(&dir, &state)?;
                Some(f)
            }
            None => None,
        };
        registry.index(&state);
        let slot = CourseSlot { state, log: records, file, since_snapshot: 0 };
        self.courses.write().unwrap().insert(id, Arc::new(Mutex::new(slot)));
        Ok(id)
    }
}

fn course_dir(root: &Path, course: CourseId) -> PathBuf {
    root.join("courses").join(course.0.to_string())
}

fn write_snapshot(dir: &Path, state: &CourseState) -> Result<()> {
    write_atomic(&dir.join(SNAPSHOT_FILE), &serde_json::to_vec(state)?)
}

pub fn referenced_blobs(state: &CourseState) -> std::collections::BTreeSet<String> {
    let payloads = state
        .submissions
        .values()
        .map(|s| &s.payload)
        .chain(state.calibration.values().map(|c| &c.payload));
    payloads
        .filter_map(|p| match p {
            Payload::File { blob, .. } => Some(blob.clone()),
            _ => None,
        })
        .collect()
}

fn parse_records(bytes: &[u8]) -> Result<Vec<EventRecord>> {
    let mut out = Vec::new();
    for (i, line) in bytes.split(|b| *b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let r: EventRecord = serde_json::from_slice(line)
            .map_err(|e| Error::MalformedArchive(format!("line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Reads a course directory, dropping a torn final line and any trailing
/// events of an unfinished transaction, and truncates the file to match.
fn recover_course(dir: &Path, sync: bool) -> Result<CourseSlot> {
    let path = dir.join(EVENTS_FILE);
    let file = OpenOptions::new().read(true).write(true).open(&path)?;
    let mut reader = BufReader::new(&file);
    let mut records = Vec::new();
    let mut committed_len = 0u64;
    let mut committed_count = 0usize;
    let mut offset = 0u64;
    let mut line = Vec::new();
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 {
            break;
        }
        let complete = line.last() == Some(&b'\n');
        match serde_json::from_slice::<EventRecord>(&line) {
            Ok(r) if complete => {
                offset += n as u64;
                let end = r.tx_end;
                records.push(r);
                if end {
                    committed_len = offset;
                    committed_count = records.len();
                }
            }
            // A torn write can only be the last line.
            _ if reader.fill_buf()?.is_empty() => break,
            Err(e) => {
                return Err(Error::CorruptLog(format!("{}: {e}", path.display())));
            }
            Ok(_) => unreachable!("an incomplete line is always the last"),
        }
    }
    records.truncate(committed_count);
    drop(reader);
    file.set_len(committed_len)?;
    if sync {
        file.sync_all()?;
    }
    let mut file = file;
    file.seek(SeekFrom::End(0))?;

    if records.is_empty() {
        return Err(Error::CorruptLog(format!("{}: no committed events", path.display())));
    }
    for (i, r) in records.iter().enumerate() {
        if r.sequence != i as u64 + 1 {
            return Err(Error::CorruptLog(format!(
                "gap detected: expected sequence {}, found {}",
                i + 1,
                r.sequence
            )));
        }
    }

    let last = records.len() as u64;
    let snapshot: Option<CourseState> = fs::read(dir.join(SNAPSHOT_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .filter(|s: &CourseState| s.last_seq <= last);
    let state = match snapshot {
        Some(mut s) => {
            for r in &records[s.last_seq as usize..] {
                s.apply_checked(r)?;
            }
            s
        }
        None => CourseState::replay(&records)?,
    };
    Ok(CourseSlot { state, log: records, file: Some(file), since_snapshot: 0 })
}
