//! The popular-commands palette offered by the control tab.
//!
//! One entry per line: `label | template`, optionally followed by
//! `| destructive`. The template is everything between the first `|` and the
//! optional flag, so shell pipes inside a template are preserved. Lines whose
//! first non-blank character is `#` are comments.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PLACEHOLDER: &str = "{}";

const DEFAULT_PALETTE: &str = "\
Uptime | uptime
Disk usage | df -h
Reboot | sudo reboot | destructive
Package update | sudo apt-get update && sudo apt-get -y upgrade
Service restart | sudo systemctl restart {} | destructive
";

#[derive(Debug, Error)]
pub enum PaletteParseError {
    #[error("palette line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub label: String,
    pub template: String,
    pub destructive: bool,
}

impl PaletteEntry {
    pub fn has_placeholder(&self) -> bool {
        self.template.contains(PLACEHOLDER)
    }

    /// Substitutes every `{}` with `arg`.
    pub fn render(&self, arg: &str) -> String {
        self.template.replace(PLACEHOLDER, arg)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub entries: Vec<PaletteEntry>,
}

impl Default for Palette {
    fn default() -> Self {
        Palette::parse(DEFAULT_PALETTE).expect("shipped palette parses")
    }
}

impl Palette {
    pub fn parse(text: &str) -> Result<Self, PaletteParseError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |msg: &str| PaletteParseError::Syntax { line, msg: msg.to_owned() };
            let (label, rest) = trimmed.split_once('|').ok_or_else(|| err("expected `label | command`"))?;
            let (template, destructive) = match rest.rsplit_once('|') {
                Some((t, flag)) if flag.trim() == "destructive" => (t, true),
                _ => (rest, false),
            };
            let (label, template) = (label.trim(), template.trim());
            if label.is_empty() {
                return Err(err("empty label"));
            }
            if template.is_empty() {
                return Err(err("empty command template"));
            }
            entries.push(PaletteEntry { label: label.into(), template: template.into(), destructive });
        }
        Ok(Palette { entries })
    }

    pub fn load(path: &Path) -> Result<Self, PaletteParseError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_starts_with_uptime() {
        let p = Palette::default();
        assert_eq!(p.entries.len(), 5);
        assert_eq!((p.entries[0].label.as_str(), p.entries[0].template.as_str()), ("Uptime", "uptime"));
        assert!(p.entries.iter().find(|e| e.label == "Reboot").unwrap().destructive);
        assert!(!p.entries[0].destructive);
    }

    #[test]
    fn empty_file_is_empty_palette() {
        assert!(Palette::parse("").unwrap().entries.is_empty());
        assert!(Palette::parse("# only a comment\n\n").unwrap().entries.is_empty());
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = Palette::parse("Uptime | uptime\nno separator here\n").unwrap_err();
        assert!(matches!(err, PaletteParseError::Syntax { line: 2, .. }), "{err}");
        assert!(matches!(Palette::parse(" | uptime").unwrap_err(), PaletteParseError::Syntax { line: 1, .. }));
        assert!(matches!(Palette::parse("Label |  ").unwrap_err(), PaletteParseError::Syntax { line: 1, .. }));
    }

    #[test]
    fn pipes_inside_template_survive() {
        let p = Palette::parse("Top | ps aux | sort -k3 | head\nKill | pkill {} | destructive\n").unwrap();
        assert_eq!(p.entries[0].template, "ps aux | sort -k3 | head");
        assert!(!p.entries[0].destructive);
        assert_eq!(p.entries[1].render("httpd"), "pkill httpd");
        assert!(p.entries[1].destructive);
    }
}
