use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Teacher, TeacherReply, TeacherRequest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Serve from the cache when possible, otherwise call and store.
    Record,
    /// Serve only from the cache.
    Replay,
    /// Always call; never touch the cache.
    Live,
}

impl std::str::FromStr for CacheMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "record" => Ok(CacheMode::Record),
            "replay" => Ok(CacheMode::Replay),
            "live" => Ok(CacheMode::Live),
            other => Err(Error::Configuration(format!(
                "unknown mode `{other}` (record, replay or live)"
            ))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    request: TeacherRequest,
    reply: TeacherReply,
}

/// One JSON file per request digest.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    writes: Mutex<()>,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ResponseCache {
            dir: dir.to_path_buf(),
            writes: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Result<Option<TeacherReply>> {
        let path = self.path(digest);
        if !path.exists() {
            return Ok(None);
        }
        let entry: Entry = serde_json::from_slice(&fs::read(&path)?)?;
        Ok(Some(entry.reply))
    }

    pub fn put(&self, request: &TeacherRequest, reply: &TeacherReply) -> Result<()> {
        let digest = request.digest();
        let body = serde_json::to_vec_pretty(&Entry {
            request: request.clone(),
            reply: reply.clone(),
        })?;
        let _guard = self.writes.lock().unwrap_or_else(|e| e.into_inner());
        let tmp = self.dir.join(format!(".{digest}.tmp"));
        fs::write(&tmp, body)?;
        fs::rename(&tmp, self.path(&digest))?;
        Ok(())
    }

    pub fn len(&self) -> Result<usize> {
        Ok(fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
            .count())
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}

/// Sends `request` according to `mode`. Replay never reaches `backend`.
pub fn cached_call(
    backend: &dyn Teacher,
    cache: Option<&ResponseCache>,
    request: &TeacherRequest,
    mode: CacheMode,
) -> Result<TeacherReply> {
    request.validate()?;
    match mode {
        CacheMode::Live => backend.complete(request),
        CacheMode::Replay => {
            let cache = cache.ok_or_else(|| Error::Configuration("replay mode needs a cache directory".into()))?;
            let digest = request.digest();
            cache.get(&digest)?.ok_or(Error::CacheMiss { digest })
        }
        CacheMode::Record => {
            let cache = cache.ok_or_else(|| Error::Configuration("record mode needs a cache directory".into()))?;
            if let Some(hit) = cache.get(&request.digest())? {
                return Ok(hit);
            }
            let reply = backend.complete(request)?;
            cache.put(request, &reply)?;
            Ok(reply)
        }
    }
}
