use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ENTITIES: usize = 6;
pub const GRID: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    Orange,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Magenta,
        Color::Cyan,
        Color::Orange,
        Color::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
            Color::Orange => "orange",
            Color::White => "white",
        }
    }

    /// 8-bit RGB; rendered pixels are exactly `byte / 255`.
    pub fn rgb8(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 25, 25],
            Color::Green => [25, 205, 50],
            Color::Blue => [40, 75, 240],
            Color::Yellow => [240, 230, 25],
            Color::Magenta => [230, 25, 230],
            Color::Cyan => [25, 230, 230],
            Color::Orange => [255, 140, 15],
            Color::White => [245, 245, 245],
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Charcoal,
    Navy,
    Maroon,
    Olive,
}

impl Background {
    pub const ALL: [Background; 4] = [
        Background::Charcoal,
        Background::Navy,
        Background::Maroon,
        Background::Olive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Background::Charcoal => "charcoal",
            Background::Navy => "navy",
            Background::Maroon => "maroon",
            Background::Olive => "olive",
        }
    }

    pub fn rgb8(self) -> [u8; 3] {
        match self {
            Background::Charcoal => [50, 50, 50],
            Background::Navy => [15, 25, 90],
            Background::Maroon => [100, 15, 25],
            Background::Olive => [90, 90, 15],
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }

    pub fn id(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Bar];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Bar => "bar",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn level(self) -> u8 {
        match self {
            Size::Small => 1,
            Size::Large => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeChange {
    Enlarge,
    Shrink,
}

/// One cell of the 3×3 placement grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub const CENTER: Cell = Cell { row: 1, col: 1 };

    pub fn new(row: u8, col: u8) -> Result<Self> {
        if row >= GRID || col >= GRID {
            return Err(Error::Domain(format!("cell ({row}, {col}) outside the grid")));
        }
        Ok(Self { row, col })
    }

    pub fn all() -> impl Iterator<Item = Cell> {
        (0..GRID).flat_map(|row| (0..GRID).map(move |col| Cell { row, col }))
    }

    /// Words of the location phrase, e.g. `["top", "left"]`.
    pub fn words(self) -> &'static [&'static str] {
        match (self.row, self.col) {
            (0, 0) => &["top", "left"],
            (0, 1) => &["top"],
            (0, 2) => &["top", "right"],
            (1, 0) => &["left"],
            (1, 1) => &["center"],
            (1, 2) => &["right"],
            (2, 0) => &["bottom", "left"],
            (2, 1) => &["bottom"],
            _ => &["bottom", "right"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub shape: Shape,
    pub color: Color,
    pub cell: Cell,
    pub size: Size,
}

impl Entity {
    pub fn key(&self) -> EntityKey {
        EntityKey {
            color: self.color,
            shape: self.shape,
        }
    }
}

/// Colour and shape identify an entity within one workspace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityKey {
    pub color: Color,
    pub shape: Shape,
}

/// A board state. `focus` is the entity touched most recently and `mixture`
/// the most recent combination result, both as indices into `entities`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workspace {
    pub background: Background,
    pub entities: Vec<Entity>,
    pub focus: Option<usize>,
    pub mixture: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Add { entity: Entity },
    Recolor { target: EntityKey, color: Color },
    Combine { first: EntityKey, second: EntityKey, color: Color },
    Transform { target: EntityKey, change: SizeChange },
    SetBackground { background: Background },
}

impl Action {
    pub fn kind(&self) -> &'static str {
        match self {
            Action::Add { .. } => "add",
            Action::Recolor { .. } => "recolor",
            Action::Combine { .. } => "combine",
            Action::Transform { .. } => "transform",
            Action::SetBackground { .. } => "set_background",
        }
    }
}

impl Workspace {
    pub fn empty(background: Background) -> Self {
        Self {
            background,
            entities: Vec::new(),
            focus: None,
            mixture: None,
        }
    }

    pub fn find(&self, key: EntityKey) -> Option<usize> {
        self.entities.iter().position(|e| e.key() == key)
    }

    pub fn entity(&self, key: EntityKey) -> Result<&Entity> {
        self.find(key)
            .map(|i| &self.entities[i])
            .ok_or_else(|| Error::Domain(format!("no {} {} on the board", key.color.name(), key.shape.name())))
    }

    pub fn focus_entity(&self) -> Option<&Entity> {
        self.focus.map(|i| &self.entities[i])
    }

    pub fn mixture_entity(&self) -> Option<&Entity> {
        self.mixture.map(|i| &self.entities[i])
    }

    pub fn cell_free(&self, cell: Cell) -> bool {
        self.entities.iter().all(|e| e.cell != cell)
    }

    pub fn key_free(&self, key: EntityKey) -> bool {
        self.find(key).is_none()
    }

    /// The state after `action`; fails when the action does not apply.
    pub fn apply(&self, action: &Action) -> Result<Workspace> {
        let mut w = self.clone();
        match *action {
            Action::Add { entity } => {
                if w.entities.len() >= MAX_ENTITIES {
                    return Err(Error::Domain("board already holds the maximum number of entities".into()));
                }
                if !w.cell_free(entity.cell) || !w.key_free(entity.key()) {
                    return Err(Error::Domain("added entity collides with an existing one".into()));
                }
                w.entities.push(entity);
                w.focus = Some(w.entities.len() - 1);
            }
            Action::Recolor { target, color } => {
                let i = self.index_of(target)?;
                let key = EntityKey {
                    color,
                    shape: target.shape,
                };
                if color == target.color || !w.key_free(key) {
                    return Err(Error::Domain(format!("cannot recolor to {}", color.name())));
                }
                w.entities[i].color = color;
                w.focus = Some(i);
            }
            Action::Combine {
                first,
                second,
                color,
            } => {
                let a = self.index_of(first)?;
                let b = self.index_of(second)?;
                if a == b {
                    return Err(Error::Domain("cannot combine an entity with itself".into()));
                }
                let bar = EntityKey {
                    color,
                    shape: Shape::Bar,
                };
                if self.find(bar).is_some_and(|i| i != a && i != b) {
                    return Err(Error::Domain(format!("a {} bar already exists", color.name())));
                }
                let result = Entity {
                    shape: Shape::Bar,
                    color,
                    cell: self.entities[a].cell,
                    size: Size::Large,
                };
                w.remove(a.max(b));
                w.remove(a.min(b));
                w.entities.push(result);
                let i = w.entities.len() - 1;
                w.focus = Some(i);
                w.mixture = Some(i);
            }
            Action::Transform { target, change } => {
                let i = self.index_of(target)?;
                let size = &mut w.entities[i].size;
                *size = match (change, *size) {
                    (SizeChange::Enlarge, Size::Small) => Size::Large,
                    (SizeChange::Shrink, Size::Large) => Size::Small,
                    _ => return Err(Error::Domain("size change does not apply".into())),
                };
                w.focus = Some(i);
            }
            Action::SetBackground { background } => {
                if background == w.background {
                    return Err(Error::Domain("board already has that background".into()));
                }
                w.background = background;
            }
        }
        Ok(w)
    }

    fn index_of(&self, key: EntityKey) -> Result<usize> {
        self.find(key).ok_or_else(|| {
            Error::Domain(format!("no {} {} on the board", key.color.name(), key.shape.name()))
        })
    }

    fn remove(&mut self, i: usize) {
        self.entities.remove(i);
        let fix = |slot: &mut Option<usize>| {
            *slot = match *slot {
                Some(j) if j == i => None,
                Some(j) if j > i => Some(j - 1),
                other => other,
            }
        };
        fix(&mut self.focus);
        fix(&mut self.mixture);
    }
}
