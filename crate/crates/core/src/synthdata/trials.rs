//! Trial lists: `<enroll_id> <test_id> <target|nontarget>` per line,
//! single spaces, LF endings, no trailing whitespace.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialEntry {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub entries: Vec<TrialEntry>,
}

impl TrialList {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.enroll_id);
            out.push(' ');
            out.push_str(&e.test_id);
            out.push(' ');
            out.push_str(e.label.as_str());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<TrialList> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let bad = || Error::format((i + 1) as u64, format!("line {}: expected `enroll test target|nontarget`, got `{line}`", i + 1));
            let enroll = parts.next().filter(|s| !s.is_empty()).ok_or_else(bad)?;
            let test = parts.next().filter(|s| !s.is_empty()).ok_or_else(bad)?;
            let label = match parts.next().ok_or_else(bad)? {
                "target" => TrialLabel::Target,
                "nontarget" => TrialLabel::Nontarget,
                _ => return Err(bad()),
            };
            if parts.next().is_some() {
                return Err(bad());
            }
            entries.push(TrialEntry {
                enroll_id: enroll.to_string(),
                test_id: test.to_string(),
                label,
            });
        }
        Ok(TrialList { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::config::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<TrialList> {
        let text = std::fs::read_to_string(path)?;
        TrialList::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
