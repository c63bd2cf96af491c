//! The closed expression grammar used by the synthetic corpus.
//!
//! Three families:
//! - attribute: `the {color} {shape}`
//! - motion: `the {shape} moving {direction}`
//! - relational: one of [`RELATIONAL_TEMPLATES`]

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 90, 230],
            Color::Yellow => [230, 210, 40],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Rightward,
    Leftward,
    Upward,
    Downward,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Rightward,
        Direction::Leftward,
        Direction::Upward,
        Direction::Downward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Rightward => "rightward",
            Direction::Leftward => "leftward",
            Direction::Upward => "upward",
            Direction::Downward => "downward",
        }
    }

    /// Unit step in image coordinates (x right, y down).
    pub fn unit(self) -> (i32, i32) {
        match self {
            Direction::Rightward => (1, 0),
            Direction::Leftward => (-1, 0),
            Direction::Upward => (0, -1),
            Direction::Downward => (0, 1),
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Rightward => Direction::Leftward,
            Direction::Leftward => Direction::Rightward,
            Direction::Upward => Direction::Downward,
            Direction::Downward => Direction::Upward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Attribute,
    Motion,
    Relational,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Attribute, Family::Motion, Family::Relational];

    pub fn name(self) -> &'static str {
        match self {
            Family::Attribute => "attribute",
            Family::Motion => "motion",
            Family::Relational => "relational",
        }
    }

    /// Value stored in the `source` field of samples of this family.
    pub fn source_tag(self) -> String {
        format!("synthetic-{}", self.name())
    }

    pub fn from_source_tag(source: &str) -> Option<Family> {
        Family::ALL
            .into_iter()
            .find(|f| source == f.source_tag())
    }
}

pub const RELATIONAL_TEMPLATES: [&str; 2] = [
    "the object that moves faster than every other object in the video",
    "the shape that travels the longest distance during the video",
];

pub fn attribute_expression(color: Color, shape: ShapeKind) -> String {
    format!("the {} {}", color.name(), shape.name())
}

pub fn motion_expression(shape: ShapeKind, direction: Direction) -> String {
    format!("the {} moving {}", shape.name(), direction.name())
}

/// Every expression the grammar can produce.
pub fn all_expressions() -> Vec<String> {
    let mut out = Vec::new();
    for c in Color::ALL {
        for s in ShapeKind::ALL {
            out.push(attribute_expression(c, s));
        }
    }
    for s in ShapeKind::ALL {
        for d in Direction::ALL {
            out.push(motion_expression(s, d));
        }
    }
    out.extend(RELATIONAL_TEMPLATES.iter().map(|s| s.to_string()));
    out
}

/// Every full conversation string the grammar can produce.
pub fn conversation_corpus() -> Vec<String> {
    all_expressions()
        .iter()
        .map(|e| super::fill_template(e).expect("grammar expressions are non-empty"))
        .collect()
}
