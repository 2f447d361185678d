//! Referring-expression grammar and the brute-force resolver.
//!
//! The resolver is the semantic ground truth: an expression refers to an
//! instance iff it is the unique instance satisfying the parsed attribute
//! constraints. The generator only keeps expressions this resolver maps to
//! exactly one instance.
//!
//! Grammar (word level):
//!
//! ```text
//! expr     := "the" simple | "the" superl kind | "the" simple rel "of" "the" color kind
//! simple   := [color] kind
//! superl   := "largest" | "smallest"
//! rel      := "left" | "right" | "above" | "below"
//! ```
//!
//! "above" means smaller y (screen coordinates), "left" smaller x; both are
//! strict comparisons of shape centers.

use super::raster::ShapeKind;
use super::{color_index, ShapeInstance, COLOR_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Left,
    Right,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::Left,
        Relation::Right,
        Relation::Above,
        Relation::Below,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    fn holds(self, subject: &ShapeInstance, anchor: &ShapeInstance) -> bool {
        match self {
            Relation::Left => subject.cx < anchor.cx,
            Relation::Right => subject.cx > anchor.cx,
            Relation::Above => subject.cy < anchor.cy,
            Relation::Below => subject.cy > anchor.cy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExprAst {
    Simple {
        color: Option<usize>,
        kind: ShapeKind,
    },
    Superlative {
        largest: bool,
        kind: ShapeKind,
    },
    Relational {
        color: Option<usize>,
        kind: ShapeKind,
        rel: Relation,
        anchor_color: usize,
        anchor_kind: ShapeKind,
    },
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ResolveError {
    #[error("cannot parse expression: {0}")]
    Parse(String),
    #[error("expression matches no instance")]
    NoMatch,
    #[error("expression is ambiguous ({0} matches)")]
    Ambiguous(usize),
}

pub fn parse_expr(text: &str) -> Result<ExprAst, ResolveError> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let fail = || ResolveError::Parse(text.to_string());
    if toks.first() != Some(&"the") {
        return Err(fail());
    }
    let rest = &toks[1..];
    // superlative form
    if rest.len() == 2 && (rest[0] == "largest" || rest[0] == "smallest") {
        let kind = ShapeKind::parse(rest[1]).ok_or_else(fail)?;
        return Ok(ExprAst::Superlative {
            largest: rest[0] == "largest",
            kind,
        });
    }
    // find relation word, if any
    if let Some(pos) = rest
        .iter()
        .position(|t| Relation::ALL.iter().any(|r| r.word() == *t))
    {
        let rel = Relation::ALL
            .into_iter()
            .find(|r| r.word() == rest[pos])
            .unwrap();
        let (color, kind) = parse_simple(&rest[..pos]).ok_or_else(fail)?;
        let tail = &rest[pos + 1..];
        if tail.len() != 4 || tail[0] != "of" || tail[1] != "the" {
            return Err(fail());
        }
        let anchor_color = color_index(tail[2]).ok_or_else(fail)?;
        let anchor_kind = ShapeKind::parse(tail[3]).ok_or_else(fail)?;
        return Ok(ExprAst::Relational {
            color,
            kind,
            rel,
            anchor_color,
            anchor_kind,
        });
    }
    let (color, kind) = parse_simple(rest).ok_or_else(fail)?;
    Ok(ExprAst::Simple { color, kind })
}

fn parse_simple(toks: &[&str]) -> Option<(Option<usize>, ShapeKind)> {
    match toks {
        [kind] => Some((None, ShapeKind::parse(kind)?)),
        [color, kind] => Some((Some(color_index(color)?), ShapeKind::parse(kind)?)),
        _ => None,
    }
}

fn matches_simple(inst: &ShapeInstance, color: Option<usize>, kind: ShapeKind) -> bool {
    inst.kind == kind && color.is_none_or(|c| inst.color == c)
}

/// Brute-force resolution: scan every instance against the constraints and
/// demand exactly one survivor.
pub fn resolve(text: &str, instances: &[ShapeInstance]) -> Result<usize, ResolveError> {
    let ast = parse_expr(text)?;
    let candidates: Vec<usize> = match &ast {
        ExprAst::Simple { color, kind } => (0..instances.len())
            .filter(|&i| matches_simple(&instances[i], *color, *kind))
            .collect(),
        ExprAst::Superlative { largest, kind } => {
            let of_kind: Vec<usize> = (0..instances.len())
                .filter(|&i| instances[i].kind == *kind)
                .collect();
            if of_kind.is_empty() {
                Vec::new()
            } else {
                let pick = |cmp: bool| {
                    let mut best = of_kind[0];
                    let mut tied = false;
                    for &i in &of_kind[1..] {
                        let better = if cmp {
                            instances[i].size > instances[best].size
                        } else {
                            instances[i].size < instances[best].size
                        };
                        if better {
                            best = i;
                            tied = false;
                        } else if instances[i].size == instances[best].size {
                            tied = true;
                        }
                    }
                    if tied {
                        Vec::new()
                    } else {
                        vec![best]
                    }
                };
                pick(*largest)
            }
        }
        ExprAst::Relational {
            color,
            kind,
            rel,
            anchor_color,
            anchor_kind,
        } => {
            let anchors: Vec<usize> = (0..instances.len())
                .filter(|&i| matches_simple(&instances[i], Some(*anchor_color), *anchor_kind))
                .collect();
            if anchors.len() != 1 {
                Vec::new()
            } else {
                let anchor = &instances[anchors[0]];
                (0..instances.len())
                    .filter(|&i| {
                        i != anchors[0]
                            && matches_simple(&instances[i], *color, *kind)
                            && rel.holds(&instances[i], anchor)
                    })
                    .collect()
            }
        }
    };
    match candidates.len() {
        0 => Err(ResolveError::NoMatch),
        1 => Ok(candidates[0]),
        n => Err(ResolveError::Ambiguous(n)),
    }
}

/// Candidate phrasings for instance `i`, in generator preference order.
pub fn candidate_expressions(instances: &[ShapeInstance], i: usize) -> Vec<String> {
    let inst = &instances[i];
    let color = COLOR_NAMES[inst.color];
    let kind = inst.kind.name();
    let mut out = vec![
        format!("the {color} {kind}"),
        format!("the {kind}"),
    ];
    let same_kind = instances.iter().filter(|o| o.kind == inst.kind).count();
    if same_kind >= 2 {
        out.push(format!("the largest {kind}"));
        out.push(format!("the smallest {kind}"));
    }
    for (j, anchor) in instances.iter().enumerate() {
        if j == i {
            continue;
        }
        let ac = COLOR_NAMES[anchor.color];
        let ak = anchor.kind.name();
        for rel in Relation::ALL {
            if rel.holds(inst, anchor) {
                out.push(format!("the {color} {kind} {} of the {ac} {ak}", rel.word()));
                out.push(format!("the {kind} {} of the {ac} {ak}", rel.word()));
            }
        }
    }
    out
}
