//! The closed instruction grammar shared by the generator and the captioner.
//!
//! ```text
//! text    := [ "on a" BG "board ," ] [ "using the result from step" N "," ] command
//! command := "add" ART [ "large" ] COLOR SHAPE [ at ]
//!          | "recolor" ref COLOR
//!          | "combine" ref "and" ref "into" ART COLOR "bar"
//!          | ( "enlarge" | "shrink" ) ref
//!          | "paint the board" BG
//! ref     := "it" | "the mixture" | "the" COLOR SHAPE [ at ]
//! at      := "at the" CELL
//! ```
//! ART is "a" or "an". Explicit references omit `at the center`.

use std::fmt;

use super::types::{Background, Cell, Color, Shape, Size, SizeChange};
use crate::error::{Error, Result};

pub const MAX_STEP_NUMBER: usize = 10;

const FIXED_WORDS: &[&str] = &[
    ",", "a", "add", "an", "and", "at", "bar", "board", "bottom", "center", "combine", "enlarge", "from",
    "into", "it", "large", "left", "mixture", "on", "paint", "recolor", "result", "right",
    "shrink", "step", "the", "top", "using",
];

/// Every token the grammar can emit, in a fixed order.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = FIXED_WORDS.iter().map(|s| s.to_string()).collect();
    v.extend(Color::ALL.iter().map(|c| c.name().to_string()));
    v.extend(Background::ALL.iter().map(|b| b.name().to_string()));
    v.extend(
        Shape::ALL
            .iter()
            .filter(|s| **s != Shape::Bar)
            .map(|s| s.name().to_string()),
    );
    v.extend((1..=MAX_STEP_NUMBER).map(|n| n.to_string()));
    v
}

/// Whitespace split with commas as separate tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        match word.strip_suffix(',') {
            Some(w) => {
                if !w.is_empty() {
                    out.push(w);
                }
                out.push(",");
            }
            None => out.push(word),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Ref {
    It,
    Mixture,
    Explicit { color: Color, shape: Shape, cell: Cell },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    Add {
        color: Color,
        shape: Shape,
        size: Size,
        cell: Cell,
    },
    Recolor {
        target: Ref,
        color: Color,
    },
    Combine {
        first: Ref,
        second: Ref,
        color: Color,
    },
    Transform {
        target: Ref,
        change: SizeChange,
    },
    Paint {
        background: Background,
    },
}

/// Where a step's starting state comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// A new, empty board of the given background.
    Fresh(Background),
    /// The result of an explicitly numbered earlier step.
    FromStep(usize),
    /// The directly preceding step.
    Implied,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instruction {
    pub source: Source,
    pub command: Command,
}

impl Instruction {
    pub fn refs(&self) -> Vec<&Ref> {
        match &self.command {
            Command::Recolor { target, .. } | Command::Transform { target, .. } => vec![target],
            Command::Combine { first, second, .. } => vec![first, second],
            Command::Add { .. } | Command::Paint { .. } => vec![],
        }
    }

    /// True when the text can only be understood with the history at hand.
    pub fn is_referential(&self) -> bool {
        matches!(self.source, Source::FromStep(_))
            || self.refs().iter().any(|r| !matches!(r, Ref::Explicit { .. }))
    }
}

struct At(Cell);

impl fmt::Display for At {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 != Cell::CENTER {
            write!(f, " at the {}", self.0.words().join(" "))?;
        }
        Ok(())
    }
}

impl fmt::Display for Ref {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ref::It => f.write_str("it"),
            Ref::Mixture => f.write_str("the mixture"),
            Ref::Explicit { color, shape, cell } => {
                write!(f, "the {} {}{}", color.name(), shape.name(), At(*cell))
            }
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::Add {
                color,
                shape,
                size,
                cell,
            } => {
                let (article, large) = match (size, color) {
                    (Size::Large, _) => ("a", "large "),
                    (Size::Small, Color::Orange) => ("an", ""),
                    (Size::Small, _) => ("a", ""),
                };
                write!(f, "add {article} {large}{} {}{}", color.name(), shape.name(), At(*cell))
            }
            Command::Recolor { target, color } => write!(f, "recolor {target} {}", color.name()),
            Command::Combine {
                first,
                second,
                color,
            } => {
                let article = if *color == Color::Orange { "an" } else { "a" };
                write!(f, "combine {first} and {second} into {article} {} bar", color.name())
            }
            Command::Transform { target, change } => match change {
                SizeChange::Enlarge => write!(f, "enlarge {target}"),
                SizeChange::Shrink => write!(f, "shrink {target}"),
            },
            Command::Paint { background } => write!(f, "paint the board {}", background.name()),
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.source {
            Source::Fresh(bg) => write!(f, "on a {} board, ", bg.name())?,
            Source::FromStep(k) => write!(f, "using the result from step {k}, ")?,
            Source::Implied => {}
        }
        write!(f, "{}", self.command)
    }
}

struct Parser<'a> {
    toks: Vec<&'a str>,
    pos: usize,
    text: &'a str,
}

impl<'a> Parser<'a> {
    fn err(&self, what: &str) -> Error {
        Error::Format {
            what: "instruction",
            reason: format!("{what} at token {} of `{}`", self.pos, self.text),
        }
    }

    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).copied()
    }

    fn next(&mut self) -> Result<&'a str> {
        let t = self.peek().ok_or_else(|| self.err("unexpected end"))?;
        self.pos += 1;
        Ok(t)
    }

    fn eat(&mut self, word: &str) -> bool {
        if self.peek() == Some(word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, words: &str) -> Result<()> {
        for w in words.split(' ') {
            if !self.eat(w) {
                return Err(self.err(&format!("expected `{w}`")));
            }
        }
        Ok(())
    }

    fn color(&mut self) -> Result<Color> {
        let t = self.next()?;
        Color::from_name(t).ok_or_else(|| self.err(&format!("`{t}` is not a colour")))
    }

    fn background(&mut self) -> Result<Background> {
        let t = self.next()?;
        Background::from_name(t).ok_or_else(|| self.err(&format!("`{t}` is not a background")))
    }

    fn shape(&mut self) -> Result<Shape> {
        let t = self.next()?;
        Shape::from_name(t).ok_or_else(|| self.err(&format!("`{t}` is not a shape")))
    }

    fn at(&mut self) -> Result<Cell> {
        if !self.eat("at") {
            return Ok(Cell::CENTER);
        }
        self.expect("the")?;
        let (row, col) = match self.next()? {
            "top" => (0, self.side()),
            "bottom" => (2, self.side()),
            "left" => (1, 0),
            "right" => (1, 2),
            "center" => (1, 1),
            t => return Err(self.err(&format!("`{t}` is not a location"))),
        };
        Cell::new(row, col)
    }

    fn side(&mut self) -> u8 {
        if self.eat("left") {
            0
        } else if self.eat("right") {
            2
        } else {
            1
        }
    }

    fn reference(&mut self) -> Result<Ref> {
        if self.eat("it") {
            return Ok(Ref::It);
        }
        self.expect("the")?;
        if self.eat("mixture") {
            return Ok(Ref::Mixture);
        }
        let color = self.color()?;
        let shape = self.shape()?;
        let cell = self.at()?;
        Ok(Ref::Explicit { color, shape, cell })
    }

    fn command(&mut self) -> Result<Command> {
        match self.next()? {
            "add" => {
                if !self.eat("a") && !self.eat("an") {
                    return Err(self.err("expected an article"));
                }
                let size = if self.eat("large") { Size::Large } else { Size::Small };
                let color = self.color()?;
                let shape = self.shape()?;
                let cell = self.at()?;
                Ok(Command::Add {
                    color,
                    shape,
                    size,
                    cell,
                })
            }
            "recolor" => {
                let target = self.reference()?;
                let color = self.color()?;
                Ok(Command::Recolor { target, color })
            }
            "combine" => {
                let first = self.reference()?;
                self.expect("and")?;
                let second = self.reference()?;
                self.expect("into")?;
                if !self.eat("a") && !self.eat("an") {
                    return Err(self.err("expected an article"));
                }
                let color = self.color()?;
                self.expect("bar")?;
                Ok(Command::Combine {
                    first,
                    second,
                    color,
                })
            }
            "enlarge" => Ok(Command::Transform {
                target: self.reference()?,
                change: SizeChange::Enlarge,
            }),
            "shrink" => Ok(Command::Transform {
                target: self.reference()?,
                change: SizeChange::Shrink,
            }),
            "paint" => {
                self.expect("the board")?;
                Ok(Command::Paint {
                    background: self.background()?,
                })
            }
            t => Err(self.err(&format!("unknown verb `{t}`"))),
        }
    }
}

pub fn parse(text: &str) -> Result<Instruction> {
    let mut p = Parser {
        toks: tokenize(text),
        pos: 0,
        text,
    };
    let mut source = Source::Implied;
    if p.eat("on") {
        p.expect("a")?;
        let bg = p.background()?;
        p.expect("board ,")?;
        source = Source::Fresh(bg);
    }
    if p.eat("using") {
        if matches!(source, Source::Fresh(_)) {
            return Err(p.err("a fresh board cannot reuse a step"));
        }
        p.expect("the result from step")?;
        let t = p.next()?;
        let k: usize = t.parse().map_err(|_| p.err("expected a step number"))?;
        p.expect(",")?;
        source = Source::FromStep(k);
    }
    let command = p.command()?;
    if p.pos != p.toks.len() {
        return Err(p.err("trailing tokens"));
    }
    Ok(Instruction { source, command })
}
