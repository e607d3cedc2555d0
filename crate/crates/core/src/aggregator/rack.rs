//! Rack layout and the temperature heat map drawn from it.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Aggregator;
use crate::conf::strip_comment;
use crate::protocol::valid_hostname;

pub const TEMPERATURE_METRIC: &str = "cpu_temp";

#[derive(Debug, Error)]
pub enum LayoutParseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RackSlot {
    pub row: u32,
    pub column: u32,
    pub hostname: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RackLayout {
    pub slots: Vec<RackSlot>,
}

impl RackLayout {
    /// Lines of `row,column,hostname`; `#` comments and blank lines ignored.
    pub fn parse(text: &str) -> Result<Self, LayoutParseError> {
        let mut slots = Vec::new();
        let mut positions = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| LayoutParseError::Syntax { line: idx + 1, msg };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [row, column, hostname] = fields[..] else {
                return Err(err(format!("expected row,column,hostname; got {line:?}")));
            };
            let row: u32 = row.parse().map_err(|_| err(format!("bad row {row:?}")))?;
            let column: u32 = column.parse().map_err(|_| err(format!("bad column {column:?}")))?;
            if !valid_hostname(hostname) {
                return Err(err(format!("invalid hostname {hostname:?}")));
            }
            if !positions.insert((row, column)) {
                return Err(err(format!("position {row},{column} used twice")));
            }
            slots.push(RackSlot { row, column, hostname: hostname.to_owned() });
        }
        Ok(RackLayout { slots })
    }

    pub fn load(path: &Path) -> Result<Self, LayoutParseError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub hostname: String,
    pub row: u32,
    pub column: u32,
    /// Latest `cpu_temp` in degrees Celsius, `None` if never reported.
    pub cpu_temp: Option<f64>,
}

impl Aggregator {
    /// One cell per layout slot, in file order.
    pub fn heatmap(&self, layout: &RackLayout) -> Vec<HeatCell> {
        layout
            .slots
            .iter()
            .map(|s| HeatCell {
                hostname: s.hostname.clone(),
                row: s.row,
                column: s.column,
                cpu_temp: self.hosts().get(&s.hostname).and_then(|r| r.latest_value(TEMPERATURE_METRIC)),
            })
            .collect()
    }
}
