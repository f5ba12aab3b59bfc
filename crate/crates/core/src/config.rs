//! Line-based configuration documents and atomic file writes.
//!
//! Format: UTF-8, `[section]` headers, `key = value` lines, `#` comments.
//! Parsing is strict at two levels: the document parser rejects malformed
//! lines and duplicate keys, and `SectionReader::finish` rejects keys no
//! consumer asked for, so a misspelled key fails fast.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Write `bytes` to `path` via a temp file in the same directory plus a
/// rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "tmp.{}.{}",
        std::process::id(),
        path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigDoc {
    /// Sections in document order, each a list of (key, value) in order.
    pub sections: Vec<(String, Vec<(String, String)>)>,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<ConfigDoc> {
        let mut doc = ConfigDoc::default();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::format(lineno as u64, format!("line {lineno}: unterminated section header")))?
                    .trim();
                if name.is_empty() {
                    return Err(Error::format(lineno as u64, format!("line {lineno}: empty section name")));
                }
                if doc.sections.iter().any(|(n, _)| n == name) {
                    return Err(Error::format(lineno as u64, format!("line {lineno}: duplicate section [{name}]")));
                }
                doc.sections.push((name.to_string(), Vec::new()));
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(lineno as u64, format!("line {lineno}: expected `key = value` or `[section]`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::format(lineno as u64, format!("line {lineno}: empty key")));
            }
            let section = doc.sections.last_mut().ok_or_else(|| {
                Error::format(lineno as u64, format!("line {lineno}: key `{key}` before any [section]"))
            })?;
            if section.1.iter().any(|(k, _)| k == key) {
                return Err(Error::format(
                    lineno as u64,
                    format!("line {lineno}: duplicate key `{key}` in [{}]", section.0),
                ));
            }
            section.1.push((key.to_string(), value.to_string()));
        }
        Ok(doc)
    }

    pub fn section(&self, name: &str) -> Option<&[(String, String)]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, kv)| kv.as_slice())
    }

    pub fn reader(&self, name: &str) -> Result<SectionReader<'_>> {
        let entries = self
            .section(name)
            .ok_or_else(|| Error::argument(format!("config: missing section [{name}]")))?;
        Ok(SectionReader { section: name.to_string(), entries, consumed: HashSet::new() })
    }

    /// Render back to text; `parse(render(doc)) == doc`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        let sec = match self.sections.iter_mut().find(|(n, _)| n == section) {
            Some((_, kv)) => kv,
            None => {
                self.sections.push((section.to_string(), Vec::new()));
                &mut self.sections.last_mut().unwrap().1
            }
        };
        match sec.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value.to_string(),
            None => sec.push((key.to_string(), value.to_string())),
        }
    }
}

/// Typed access to one section that records which keys were read, so
/// `finish` can reject the rest.
pub struct SectionReader<'a> {
    section: String,
    entries: &'a [(String, String)],
    consumed: HashSet<String>,
}

impl<'a> SectionReader<'a> {
    fn raw(&mut self, key: &str) -> Option<&'a str> {
        self.consumed.insert(key.to_string());
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn opt_str(&mut self, key: &str) -> Option<&'a str> {
        self.raw(key)
    }

    pub fn str_or(&mut self, key: &str, default: &'a str) -> &'a str {
        self.raw(key).unwrap_or(default)
    }

    pub fn require(&mut self, key: &str) -> Result<&'a str> {
        self.raw(key)
            .ok_or_else(|| Error::argument(format!("config: [{}] missing key `{key}`", self.section)))
    }

    pub fn parse_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::argument(format!("config: [{}] key `{key}`: cannot parse `{v}`", self.section))
            }),
        }
    }

    pub fn parse_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::argument(format!("config: [{}] key `{key}`: cannot parse `{v}`", self.section))),
        }
    }

    /// Reject any key in the section that was never asked about.
    pub fn finish(self) -> Result<()> {
        for (k, _) in self.entries {
            if !self.consumed.contains(k) {
                return Err(Error::argument(format!("config: [{}] unknown key `{k}`", self.section)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_roundtrip() {
        let text = "# comment\n[corpus]\nspeakers = 20\nduration = 1.5\n\n[train]\nsteps = 2000\n";
        let doc = ConfigDoc::parse(text).unwrap();
        assert_eq!(doc.section("corpus").unwrap().len(), 2);
        let again = ConfigDoc::parse(&doc.render()).unwrap();
        assert_eq!(doc, again);
    }

    #[test]
    fn reader_parses_and_defaults() {
        let doc = ConfigDoc::parse("[a]\nx = 3\n").unwrap();
        let mut r = doc.reader("a").unwrap();
        assert_eq!(r.parse_or::<u32>("x", 0).unwrap(), 3);
        assert_eq!(r.parse_or::<u32>("y", 7).unwrap(), 7);
        r.finish().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let doc = ConfigDoc::parse("[a]\nx = 3\nmisspelled = 1\n").unwrap();
        let mut r = doc.reader("a").unwrap();
        let _ = r.parse_or::<u32>("x", 0).unwrap();
        assert!(r.finish().is_err());
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(ConfigDoc::parse("x = 1\n").is_err());
        assert!(ConfigDoc::parse("[a]\nno equals here\n").is_err());
        assert!(ConfigDoc::parse("[a\nx = 1\n").is_err());
        assert!(ConfigDoc::parse("[a]\nx = 1\nx = 2\n").is_err());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = std::env::temp_dir().join(format!("cfg_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("out.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
