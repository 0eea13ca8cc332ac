//! Options database: the central store of run configuration.
//!
//! Populated from a `key=value` text file or from a checkpoint, read by
//! components through typed accessors, and serialised into checkpoints.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OptionValue {
    Int(i64),
    Real(f64),
    Bool(bool),
    Str(String),
    List(Vec<OptionValue>),
}

impl OptionValue {
    fn type_name(&self) -> &'static str {
        match self {
            OptionValue::Int(_) => "integer",
            OptionValue::Real(_) => "real",
            OptionValue::Bool(_) => "boolean",
            OptionValue::Str(_) => "string",
            OptionValue::List(_) => "list",
        }
    }

    /// Infers the type from literal syntax.
    pub fn parse(text: &str) -> OptionValue {
        let text = text.trim();
        if text.contains(',') {
            return OptionValue::List(text.split(',').map(parse_scalar).collect());
        }
        parse_scalar(text)
    }
}

fn parse_scalar(text: &str) -> OptionValue {
    let t = text.trim();
    if t.eq_ignore_ascii_case(".true.") {
        return OptionValue::Bool(true);
    }
    if t.eq_ignore_ascii_case(".false.") {
        return OptionValue::Bool(false);
    }
    if let Ok(i) = t.parse::<i64>() {
        return OptionValue::Int(i);
    }
    if looks_numeric(t) {
        if let Ok(r) = t.parse::<f64>() {
            return OptionValue::Real(r);
        }
        // Fortran double exponent, e.g. 1.0d-4
        if let Ok(r) = t.replace(['d', 'D'], "e").parse::<f64>() {
            return OptionValue::Real(r);
        }
    }
    let unquoted = t
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .or_else(|| t.strip_prefix('\'').and_then(|s| s.strip_suffix('\'')))
        .unwrap_or(t);
    OptionValue::Str(unquoted.to_owned())
}

fn looks_numeric(t: &str) -> bool {
    let body = t.strip_prefix(['+', '-']).unwrap_or(t);
    body.starts_with(|c: char| c.is_ascii_digit())
        || (body.starts_with('.') && body[1..].starts_with(|c: char| c.is_ascii_digit()))
}

impl fmt::Display for OptionValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptionValue::Int(i) => write!(f, "{i}"),
            OptionValue::Real(r) => write!(f, "{r:?}"),
            OptionValue::Bool(true) => f.write_str(".true."),
            OptionValue::Bool(false) => f.write_str(".false."),
            OptionValue::Str(s) => f.write_str(s),
            OptionValue::List(items) => {
                for (n, v) in items.iter().enumerate() {
                    if n > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{v}")?;
                }
                Ok(())
            }
        }
    }
}

/// Case-sensitive key/value store.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptionsDatabase {
    entries: BTreeMap<String, OptionValue>,
}

impl OptionsDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses configuration text: one `key=value` per line, `#` comments,
    /// blank lines ignored.
    pub fn load_config(text: &str) -> Result<Self> {
        let mut db = OptionsDatabase::new();
        let mut first_seen: BTreeMap<String, usize> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {line_no}: expected `key=value`, got `{line}`"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {line_no}: empty key")));
            }
            if let Some(prev) = first_seen.get(key) {
                return Err(Error::config(format!(
                    "line {line_no}: duplicate key `{key}` (first set on line {prev})"
                )));
            }
            first_seen.insert(key.to_owned(), line_no);
            db.entries.insert(key.to_owned(), OptionValue::parse(value));
        }
        Ok(db)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &OptionValue)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, key: &str) -> Option<&OptionValue> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn set(&mut self, key: impl Into<String>, value: OptionValue) {
        self.entries.insert(key.into(), value);
    }

    pub fn remove(&mut self, key: &str) -> Option<OptionValue> {
        self.entries.remove(key)
    }

    fn require(&self, key: &str) -> Result<&OptionValue> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("missing required option `{key}`")))
    }

    fn mismatch(key: &str, want: &str, got: &OptionValue) -> Error {
        Error::config(format!(
            "option `{key}` should be {want}, found {} `{got}`",
            got.type_name()
        ))
    }

    pub fn int(&self, key: &str) -> Result<i64> {
        match self.require(key)? {
            OptionValue::Int(i) => Ok(*i),
            other => Err(Self::mismatch(key, "an integer", other)),
        }
    }

    pub fn int_opt(&self, key: &str) -> Result<Option<i64>> {
        self.get(key).map(|_| self.int(key)).transpose()
    }

    /// Non-negative integer as a count.
    pub fn count(&self, key: &str) -> Result<usize> {
        let v = self.int(key)?;
        usize::try_from(v)
            .map_err(|_| Error::config(format!("option `{key}` must be non-negative, got {v}")))
    }

    pub fn count_or(&self, key: &str, default: usize) -> Result<usize> {
        if self.contains(key) {
            self.count(key)
        } else {
            Ok(default)
        }
    }

    /// Reals accept integer literals too.
    pub fn real(&self, key: &str) -> Result<f64> {
        match self.require(key)? {
            OptionValue::Real(r) => Ok(*r),
            OptionValue::Int(i) => Ok(*i as f64),
            other => Err(Self::mismatch(key, "a real", other)),
        }
    }

    pub fn real_or(&self, key: &str, default: f64) -> Result<f64> {
        if self.contains(key) {
            self.real(key)
        } else {
            Ok(default)
        }
    }

    pub fn real_opt(&self, key: &str) -> Result<Option<f64>> {
        self.get(key).map(|_| self.real(key)).transpose()
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(OptionValue::Bool(b)) => Ok(*b),
            Some(other) => Err(Self::mismatch(key, "a boolean", other)),
        }
    }

    pub fn string(&self, key: &str) -> Result<String> {
        match self.require(key)? {
            OptionValue::Str(s) => Ok(s.clone()),
            other => Err(Self::mismatch(key, "a string", other)),
        }
    }

    pub fn string_opt(&self, key: &str) -> Result<Option<String>> {
        self.get(key).map(|_| self.string(key)).transpose()
    }

    /// A list of names; a single bare name is a one-element list.
    pub fn names(&self, key: &str) -> Result<Option<Vec<String>>> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        let items = match v {
            OptionValue::List(items) => items.as_slice(),
            single => std::slice::from_ref(single),
        };
        items
            .iter()
            .map(|item| match item {
                OptionValue::Str(s) => Ok(s.trim().to_owned()),
                other => Err(Self::mismatch(key, "a list of names", other)),
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// `<component>_enabled=.true.`
    pub fn is_enabled(&self, component: &str) -> bool {
        matches!(
            self.get(&format!("{component}_enabled")),
            Some(OptionValue::Bool(true))
        )
    }

    pub fn to_config_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (k, v) in &self.entries {
            put_str(&mut out, k);
            put_value(&mut out, v);
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let n = r.u32()?;
        let mut db = OptionsDatabase::new();
        for _ in 0..n {
            let key = r.string()?;
            let value = r.value(0)?;
            if db.entries.insert(key.clone(), value).is_some() {
                return Err(Error::Format(format!("duplicate option `{key}` in options block")));
            }
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after options block".into()));
        }
        Ok(db)
    }
}

const TAG_INT: u8 = 0;
const TAG_REAL: u8 = 1;
const TAG_BOOL: u8 = 2;
const TAG_STR: u8 = 3;
const TAG_LIST: u8 = 4;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_value(out: &mut Vec<u8>, v: &OptionValue) {
    match v {
        OptionValue::Int(i) => {
            out.push(TAG_INT);
            out.extend_from_slice(&i.to_le_bytes());
        }
        OptionValue::Real(r) => {
            out.push(TAG_REAL);
            out.extend_from_slice(&r.to_le_bytes());
        }
        OptionValue::Bool(b) => {
            out.push(TAG_BOOL);
            out.push(u8::from(*b));
        }
        OptionValue::Str(s) => {
            out.push(TAG_STR);
            put_str(out, s);
        }
        OptionValue::List(items) => {
            out.push(TAG_LIST);
            out.extend_from_slice(&(items.len() as u32).to_le_bytes());
            for item in items {
                put_value(out, item);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("options block truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("option text is not UTF-8".into()))
    }

    fn value(&mut self, depth: usize) -> Result<OptionValue> {
        let tag = self.take(1)?[0];
        Ok(match tag {
            TAG_INT => OptionValue::Int(i64::from_le_bytes(self.take(8)?.try_into().unwrap())),
            TAG_REAL => OptionValue::Real(f64::from_le_bytes(self.take(8)?.try_into().unwrap())),
            TAG_BOOL => OptionValue::Bool(self.take(1)?[0] != 0),
            TAG_STR => OptionValue::Str(self.string()?),
            TAG_LIST if depth == 0 => {
                let n = self.u32()?;
                OptionValue::List((0..n).map(|_| self.value(depth + 1)).collect::<Result<_>>()?)
            }
            other => return Err(Error::Format(format!("bad option type tag {other}"))),
        })
    }
}
