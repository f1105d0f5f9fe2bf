//! Rewrites referential step texts into self-contained captions.
//!
//! The history is replayed through the instruction grammar to rebuild every
//! board state, then the current step's references ("it", "the mixture",
//! "using the result from step k") are replaced by explicit descriptions.

use crate::error::{Error, Result};
use crate::synthio::grammar::{parse, Instruction, Source};
use crate::synthio::{interpret, Step, Workspace};

/// Self-contained caption for `raw_text` given the earlier steps of the task.
///
/// `antecedent_hint` overrides the implied antecedent (the previous step)
/// when the text does not name one.
pub fn contextualize(raw_text: &str, history: &[Step], antecedent_hint: Option<usize>) -> Result<String> {
    let texts: Vec<&str> = history.iter().map(|s| s.raw_text.as_str()).collect();
    contextualize_texts(raw_text, &texts, antecedent_hint)
}

/// [`contextualize`] over bare raw texts.
pub fn contextualize_texts(raw_text: &str, history: &[&str], antecedent_hint: Option<usize>) -> Result<String> {
    let instr = parse(raw_text)?;
    if !instr.is_referential() {
        return Ok(instr.to_string());
    }
    let n = history.len() + 1;
    let antecedent = match instr.source {
        Source::Fresh(_) => 0,
        Source::FromStep(k) => {
            if k == 0 || k >= n {
                return Err(Error::UnresolvedReference {
                    expression: format!("using the result from step {k}"),
                    reason: format!("step {n} can only build on steps 1 to {}", n - 1),
                });
            }
            k
        }
        Source::Implied => antecedent_hint.unwrap_or(n - 1),
    };
    if antecedent >= n {
        return Err(Error::UnresolvedReference {
            expression: raw_text.to_string(),
            reason: format!("antecedent {antecedent} is not an earlier step"),
        });
    }
    let state = match instr.source {
        Source::Fresh(bg) => Some(Workspace::empty(bg)),
        _ if antecedent == 0 => None,
        _ => replay(&history[..antecedent])?.pop(),
    };
    let (command, _) = interpret(&instr.command, state.as_ref())?;
    let source = match instr.source {
        Source::Fresh(bg) => Source::Fresh(bg),
        _ => Source::Implied,
    };
    Ok(Instruction { source, command }.to_string())
}

/// Board state after each step of a raw-text history.
pub fn replay(history: &[&str]) -> Result<Vec<Workspace>> {
    let mut states: Vec<Workspace> = Vec::with_capacity(history.len());
    for (i, text) in history.iter().enumerate() {
        let n = i + 1;
        let instr = parse(text)?;
        let prior = match instr.source {
            Source::Fresh(bg) => Workspace::empty(bg),
            Source::FromStep(k) if k >= 1 && k < n => states[k - 1].clone(),
            Source::Implied if n > 1 => states[n - 2].clone(),
            _ => {
                return Err(Error::UnresolvedReference {
                    expression: text.to_string(),
                    reason: format!("step {n} has no board to build on"),
                })
            }
        };
        let (_, action) = interpret(&instr.command, Some(&prior))?;
        let next = prior
            .apply(&action)
            .map_err(|e| Error::State(format!("replaying step {n}: {e}")))?;
        states.push(next);
    }
    Ok(states)
}
