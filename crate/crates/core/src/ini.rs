//! Minimal `key = value` text format with `[section]` headers.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub(crate) struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<(String, String, usize)>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.as_str(), *l))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|e| Error::Config {
                line,
                reason: format!("[{}] {key} = `{v}`: {e}", self.name),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.parse(key)?.ok_or_else(|| Error::MissingKey {
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<T>().map_err(|e| Error::Config {
                        line,
                        reason: format!("[{}] {key}: item `{s}`: {e}", self.name),
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for (k, _, _) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::UnknownKey {
                    section: self.name.clone(),
                    key: k.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Parses text into sections; keys before any header land in a section
/// named `""`. Comments start with `#` or `;`; ` #` also starts a
/// trailing comment.
pub(crate) fn parse(text: &str) -> Result<Vec<Section>> {
    let mut sections = vec![Section::default()];
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split(" #").next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                line: line_no,
                reason: format!("malformed section header `{line}`"),
            })?;
            let name = name.trim().to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Config {
                    line: line_no,
                    reason: format!("duplicate section [{name}]"),
                });
            }
            sections.push(Section {
                name,
                line: line_no,
                entries: Vec::new(),
            });
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            line: line_no,
            reason: format!("expected `key = value`, got `{line}`"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config {
                line: line_no,
                reason: "empty key".into(),
            });
        }
        let v = v.trim();
        sections
            .last_mut()
            .expect("non-empty")
            .entries
            .push((k.to_string(), v.to_string(), line_no));
    }
    Ok(sections)
}
