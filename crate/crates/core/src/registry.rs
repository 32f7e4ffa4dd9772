//! The blind registry: an append-only pseudonym -> status log with a
//! last-writer-wins index and a line-oriented persistence format.
//!
//! Records hold nothing but the fixed-width pseudonym encoding, the status,
//! and a sequence number. Alarm status is sticky; a duplicate `ok` insert for
//! the same pseudonym is an error.

use crate::oprfcore::Pid;
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Ok,
    Alarm,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Ok => "ok",
            Status::Alarm => "alarm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupResult {
    Ok,
    Alarm,
    Absent,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("pseudonym already registered with status ok")]
    AlreadyRegistered,
    #[error("pseudonym is alarm-locked; ok may not overwrite alarm")]
    AlarmLocked,
    #[error("pseudonym encoding does not match the registry width")]
    BadPidWidth,
    #[error("corrupt log: {0}")]
    CorruptLog(String),
    #[error("io: {0}")]
    Io(String),
}

/// One log entry: fixed-width pseudonym bytes, status, sequence number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryRecord {
    pub pid_encoded: Vec<u8>,
    pub status: Status,
    pub seq: u64,
}

/// Append-only log plus its latest-status projection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registry {
    pid_width: usize,
    records: Vec<RegistryRecord>,
    index: HashMap<Vec<u8>, Status>,
}

impl Registry {
    /// `pid_width` is the byte length of the master modulus.
    pub fn new(pid_width: usize) -> Registry {
        Registry { pid_width, records: Vec::new(), index: HashMap::new() }
    }

    pub fn pid_width(&self) -> usize {
        self.pid_width
    }

    pub fn records(&self) -> &[RegistryRecord] {
        &self.records
    }

    fn encode_pid(&self, pid: &Pid) -> Result<Vec<u8>, RegistryError> {
        pid.encode(self.pid_width).map_err(|_| RegistryError::BadPidWidth)
    }

    /// Appends a record. Transitions: absent->ok, absent->alarm, ok->alarm.
    /// ok->ok is `AlreadyRegistered`; alarm->ok and alarm->alarm are
    /// `AlarmLocked` (alarm is sticky and never re-recorded).
    pub fn insert(&mut self, pid: &Pid, status: Status) -> Result<u64, RegistryError> {
        let encoded = self.encode_pid(pid)?;
        match (self.index.get(&encoded), status) {
            (Some(Status::Ok), Status::Ok) => return Err(RegistryError::AlreadyRegistered),
            (Some(Status::Alarm), _) => return Err(RegistryError::AlarmLocked),
            _ => {}
        }
        let seq = self.records.last().map_or(1, |r| r.seq + 1);
        self.records.push(RegistryRecord { pid_encoded: encoded.clone(), status, seq });
        self.index.insert(encoded, status);
        Ok(seq)
    }

    pub fn lookup(&self, pid: &Pid) -> LookupResult {
        let Ok(encoded) = self.encode_pid(pid) else { return LookupResult::Absent };
        match self.index.get(&encoded) {
            Some(Status::Ok) => LookupResult::Ok,
            Some(Status::Alarm) => LookupResult::Alarm,
            None => LookupResult::Absent,
        }
    }

    /// First pid in list order whose latest status is ok. Alarm entries do
    /// not count as a verified identity.
    pub fn match_any(&self, pids: &[Pid]) -> Option<Pid> {
        pids.iter().find(|p| self.lookup(p) == LookupResult::Ok).cloned()
    }

    /// Serialized log, one `seq:<dec> pid:<hex> status:<ok|alarm>` line per
    /// record; pid hex is fixed-width (leading zeros preserved).
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            let hex: String = rec.pid_encoded.iter().map(|b| format!("{b:02x}")).collect();
            out.push_str(&format!("seq:{} pid:{} status:{}\n", rec.seq, hex, rec.status));
        }
        out
    }

    pub fn from_log(text: &str, pid_width: usize) -> Result<Registry, RegistryError> {
        let mut reg = Registry::new(pid_width);
        if text.is_empty() {
            return Ok(reg);
        }
        if !text.ends_with('\n') {
            return Err(RegistryError::CorruptLog("truncated final line".into()));
        }
        let mut expected_seq = 1u64;
        for line in text.lines() {
            let mut parts = line.split(' ');
            let seq = parts
                .next()
                .and_then(|p| p.strip_prefix("seq:"))
                .and_then(|v| v.parse::<u64>().ok())
                .ok_or_else(|| RegistryError::CorruptLog(format!("bad seq in {line:?}")))?;
            if seq != expected_seq {
                return Err(RegistryError::CorruptLog(format!(
                    "non-monotonic seq {seq}, expected {expected_seq}"
                )));
            }
            expected_seq += 1;
            let pid_hex = parts
                .next()
                .and_then(|p| p.strip_prefix("pid:"))
                .ok_or_else(|| RegistryError::CorruptLog(format!("bad pid in {line:?}")))?;
            if pid_hex.len() != pid_width * 2
                || !pid_hex.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
            {
                return Err(RegistryError::CorruptLog(format!("wrong pid width in {line:?}")));
            }
            let pid_bytes: Vec<u8> = (0..pid_width)
                .map(|i| u8::from_str_radix(&pid_hex[2 * i..2 * i + 2], 16).unwrap())
                .collect();
            let status = match parts.next().and_then(|p| p.strip_prefix("status:")) {
                Some("ok") => Status::Ok,
                Some("alarm") => Status::Alarm,
                _ => return Err(RegistryError::CorruptLog(format!("bad status in {line:?}"))),
            };
            if parts.next().is_some() {
                return Err(RegistryError::CorruptLog(format!("trailing fields in {line:?}")));
            }
            reg.records.push(RegistryRecord { pid_encoded: pid_bytes.clone(), status, seq });
            reg.index.insert(pid_bytes, status);
        }
        Ok(reg)
    }

    pub fn persist(&self, path: &Path) -> Result<(), RegistryError> {
        std::fs::write(path, self.to_log()).map_err(|e| RegistryError::Io(e.to_string()))
    }

    pub fn load(path: &Path, pid_width: usize) -> Result<Registry, RegistryError> {
        let text = std::fs::read_to_string(path).map_err(|e| RegistryError::Io(e.to_string()))?;
        Registry::from_log(&text, pid_width)
    }

    /// (ok, alarm, total) counts for reporting.
    pub fn summary(&self) -> (usize, usize, usize) {
        let ok = self.index.values().filter(|s| **s == Status::Ok).count();
        let alarm = self.index.values().filter(|s| **s == Status::Alarm).count();
        (ok, alarm, self.records.len())
    }
}
