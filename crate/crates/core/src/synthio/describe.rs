use serde::{Deserialize, Serialize};

use super::grammar::{Command, Instruction, Ref, Source};
use super::types::{Action, Entity, EntityKey, Workspace};
use crate::error::{Error, Result};

/// How a step's raw text refers to an entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefForm {
    /// "it": the focus entity of the starting state.
    Pronoun,
    /// "the mixture": the latest combination result.
    Mixture,
    Explicit,
}

fn explicit(e: &Entity) -> Ref {
    Ref::Explicit {
        color: e.color,
        shape: e.shape,
        cell: e.cell,
    }
}

fn unresolved(r: &Ref, reason: &str) -> Error {
    Error::UnresolvedReference {
        expression: r.to_string(),
        reason: reason.to_string(),
    }
}

/// The entity a reference denotes in `state`.
pub fn resolve_ref(r: &Ref, state: Option<&Workspace>) -> Result<Entity> {
    let state = state.ok_or_else(|| unresolved(r, "there is no earlier board state"))?;
    match r {
        Ref::It => state
            .focus_entity()
            .copied()
            .ok_or_else(|| unresolved(r, "no entity has been touched yet")),
        Ref::Mixture => state
            .mixture_entity()
            .copied()
            .ok_or_else(|| unresolved(r, "nothing has been combined yet")),
        Ref::Explicit { color, shape, .. } => state
            .find(EntityKey {
                color: *color,
                shape: *shape,
            })
            .map(|i| state.entities[i])
            .ok_or_else(|| unresolved(r, "no such entity on the board")),
    }
}

/// Resolves every reference against `state`, returning the explicit command
/// and the action it denotes.
pub fn interpret(cmd: &Command, state: Option<&Workspace>) -> Result<(Command, Action)> {
    let one = |r: &Ref| -> Result<(Ref, EntityKey)> {
        let e = resolve_ref(r, state)?;
        Ok((explicit(&e), e.key()))
    };
    Ok(match cmd {
        Command::Add {
            color,
            shape,
            size,
            cell,
        } => (
            cmd.clone(),
            Action::Add {
                entity: Entity {
                    shape: *shape,
                    color: *color,
                    cell: *cell,
                    size: *size,
                },
            },
        ),
        Command::Recolor { target, color } => {
            let (r, key) = one(target)?;
            (
                Command::Recolor {
                    target: r,
                    color: *color,
                },
                Action::Recolor {
                    target: key,
                    color: *color,
                },
            )
        }
        Command::Combine {
            first,
            second,
            color,
        } => {
            let (r1, k1) = one(first)?;
            let (r2, k2) = one(second)?;
            (
                Command::Combine {
                    first: r1,
                    second: r2,
                    color: *color,
                },
                Action::Combine {
                    first: k1,
                    second: k2,
                    color: *color,
                },
            )
        }
        Command::Transform { target, change } => {
            let (r, key) = one(target)?;
            (
                Command::Transform {
                    target: r,
                    change: *change,
                },
                Action::Transform {
                    target: key,
                    change: *change,
                },
            )
        }
        Command::Paint { background } => (
            cmd.clone(),
            Action::SetBackground {
                background: *background,
            },
        ),
    })
}

fn reference(state: &Workspace, key: EntityKey, form: RefForm) -> Result<Ref> {
    let i = state
        .find(key)
        .ok_or_else(|| Error::Domain(format!("{key:?} is not on the board")))?;
    match form {
        RefForm::Pronoun if state.focus == Some(i) => Ok(Ref::It),
        RefForm::Mixture if state.mixture == Some(i) => Ok(Ref::Mixture),
        RefForm::Explicit => Ok(explicit(&state.entities[i])),
        _ => Err(Error::Domain(format!("{form:?} cannot denote {key:?} here"))),
    }
}

/// Raw and resolved text for a step.
///
/// `prior` is the starting state: the antecedent's state, or the empty board
/// when `antecedent == 0`. `forms` gives one reference form per entity the
/// action touches.
pub fn describe_step(
    index: usize,
    antecedent: usize,
    prior: &Workspace,
    action: &Action,
    forms: &[RefForm],
) -> Result<(String, String)> {
    if antecedent >= index {
        return Err(Error::Domain(format!("antecedent {antecedent} of step {index}")));
    }
    let form = |i: usize| forms.get(i).copied().unwrap_or(RefForm::Explicit);
    let command = match *action {
        Action::Add { entity } => Command::Add {
            color: entity.color,
            shape: entity.shape,
            size: entity.size,
            cell: entity.cell,
        },
        Action::Recolor { target, color } => Command::Recolor {
            target: reference(prior, target, form(0))?,
            color,
        },
        Action::Combine {
            first,
            second,
            color,
        } => Command::Combine {
            first: reference(prior, first, form(0))?,
            second: reference(prior, second, form(1))?,
            color,
        },
        Action::Transform { target, change } => Command::Transform {
            target: reference(prior, target, form(0))?,
            change,
        },
        Action::SetBackground { background } => Command::Paint { background },
    };
    let source = if antecedent == 0 {
        Source::Fresh(prior.background)
    } else if antecedent + 1 == index {
        Source::Implied
    } else {
        Source::FromStep(antecedent)
    };
    let raw = Instruction { source, command };
    let prior_state = (antecedent > 0).then_some(prior);
    let (resolved_cmd, _) = interpret(&raw.command, prior_state)?;
    let resolved = Instruction {
        source: match source {
            Source::Fresh(bg) => Source::Fresh(bg),
            _ => Source::Implied,
        },
        command: resolved_cmd,
    };
    Ok((raw.to_string(), resolved.to_string()))
}
