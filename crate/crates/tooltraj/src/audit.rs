//! Re-checks exported records from scratch.

use tooltraj_core::export::{from_sft, SftRecord, SynthRecord};
use tooltraj_core::trajectory::parse_with_toolset;

use crate::pipeline::rule_checks;

/// Reason codes found in a synthesizer record's output; empty when clean.
pub fn audit_synth(record: &SynthRecord, ground: bool) -> Vec<String> {
    match parse_with_toolset(&record.output) {
        Ok((tools, parsed)) => rule_checks(&parsed.trajectory, &tools, ground)
            .codes()
            .into_iter()
            .collect(),
        Err(e) => vec![e.code.as_str().to_string()],
    }
}

pub fn audit_sft(record: &SftRecord, ground: bool) -> Vec<String> {
    match from_sft(record) {
        Ok(t) => rule_checks(&t, &record.tools, ground).codes().into_iter().collect(),
        Err(e) => vec![format!("EXPORT: {e}")],
    }
}
