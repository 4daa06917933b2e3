//! Token-level analog of the fact-checking prompt.
//!
//! Layout, in order: system slot, description slot, event slot, video
//! placeholder, prediction request.

use crate::error::{Error, Result};

/// Reserved text ids standing in for the fixed system instruction.
pub const SYSTEM: [u32; 4] = [0, 1, 2, 3];
pub const DESC: u32 = 4;
pub const EVENT: u32 = 5;
pub const VIDEO: u32 = 6;
pub const ASK: u32 = 7;
pub const REAL_TOKEN: u32 = 8;
pub const FAKE_TOKEN: u32 = 9;
/// First id available to event signatures.
pub const TEXT_EVENT_BASE: u32 = 16;

pub fn assemble_prompt(description: &[u32], event: &[u32], max_context: usize) -> Result<Vec<u32>> {
    let mut ids = Vec::with_capacity(SYSTEM.len() + description.len() + event.len() + 4);
    ids.extend_from_slice(&SYSTEM);
    ids.push(DESC);
    ids.extend_from_slice(description);
    ids.push(EVENT);
    ids.extend_from_slice(event);
    ids.push(VIDEO);
    ids.push(ASK);
    if ids.len() > max_context {
        return Err(Error::Data(format!(
            "prompt of {} tokens exceeds the context of {max_context}",
            ids.len()
        )));
    }
    Ok(ids)
}
