//! Plain-text `key = value` configuration files.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored. Keys are
//! unique within a file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`: {message}")]
    Parse { key: String, value: String, message: String },
    #[error("unknown key(s): {0}")]
    Unknown(String),
}

/// Parsed pairs. Values are raw strings until typed access.
#[derive(Debug, Clone, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
    taken: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(KvError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(KvError::Syntax { line: i + 1 });
            }
            if entries.insert(k.to_owned(), v.to_owned()).is_some() {
                return Err(KvError::Duplicate { line: i + 1, key: k.to_owned() });
            }
        }
        Ok(Self { entries, taken: Default::default() })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.taken.borrow_mut().insert(key.to_owned());
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, KvError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| KvError::Parse {
                    key: key.to_owned(),
                    value: v.to_owned(),
                    message: e.to_string(),
                })
            })
            .transpose()
    }

    pub fn require<T>(&self, key: &str) -> Result<T, KvError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| KvError::Missing(key.to_owned()))
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T, KvError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Fails if any key was never looked up; catches typos in config files.
    pub fn deny_unknown(&self) -> Result<(), KvError> {
        let taken = self.taken.borrow();
        let unknown: Vec<&str> =
            self.entries.keys().filter(|k| !taken.contains(*k)).map(String::as_str).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(KvError::Unknown(unknown.join(", ")))
        }
    }
}

/// Accumulates pairs in insertion order for writing.
#[derive(Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn comment(&mut self, text: &str) -> &mut Self {
        self.out.push_str("# ");
        self.out.push_str(text);
        self.out.push('\n');
        self
    }

    /// `Display` for f64 prints the shortest string that parses back to the
    /// same value, so numeric fields round-trip exactly.
    pub fn pair(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn finish(&mut self) -> String {
        std::mem::take(&mut self.out)
    }
}
