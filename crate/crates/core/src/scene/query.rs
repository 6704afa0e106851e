//! Query templates, their geometric/attribute predicates, and subset labels.

use super::vocab::{Vocabulary, CLASS_NAMES, CLASS_PLURALS, COLOR_NAMES};
use super::{ObjectRecord, Scene};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Dead zone (m) around relational boundaries; bindings that put a candidate
/// inside it are rejected.
pub const RELATION_DEAD_ZONE: f64 = 0.1;
/// Radius (m) of the "near" relation.
pub const NEAR_RADIUS: f64 = 1.5;

/// Evaluation subsets: zero/single/multi target, with or without distractors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    #[serde(rename = "ZT_WO_D")]
    ZtWoD,
    #[serde(rename = "ZT_W_D")]
    ZtWD,
    #[serde(rename = "ST_WO_D")]
    StWoD,
    #[serde(rename = "ST_W_D")]
    StWD,
    #[serde(rename = "MT")]
    Mt,
}

impl Subset {
    pub const ALL: [Subset; 5] = [Subset::ZtWoD, Subset::ZtWD, Subset::StWoD, Subset::StWD, Subset::Mt];

    pub fn label(self) -> &'static str {
        match self {
            Subset::ZtWoD => "ZT_WO_D",
            Subset::ZtWD => "ZT_W_D",
            Subset::StWoD => "ST_WO_D",
            Subset::StWD => "ST_W_D",
            Subset::Mt => "MT",
        }
    }

    pub fn parse(s: &str) -> Option<Subset> {
        let norm = s.to_ascii_uppercase();
        Subset::ALL.into_iter().find(|x| x.label() == norm)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Subset of a query: ZT/ST/MT by target count; "with distractor" iff the
/// scene holds a non-target object of the referenced class.
pub fn classify_subset(target_ids: &[usize], referenced_class: usize, scene: &Scene) -> Subset {
    let distractor = scene
        .objects
        .iter()
        .any(|o| o.class_id == referenced_class && !target_ids.contains(&o.id));
    match (target_ids.len(), distractor) {
        (0, false) => Subset::ZtWoD,
        (0, true) => Subset::ZtWD,
        (1, false) => Subset::StWoD,
        (1, true) => Subset::StWD,
        _ => Subset::Mt,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    /// "the chairs"
    Plural,
    /// "the red chairs"
    ColorPlural,
    /// "the chair nearest to the table"
    Nearest,
    /// "the chairs left of the sofa"
    LeftOf,
    /// "the chairs right of the sofa"
    RightOf,
    /// "the chairs in front of the sofa"
    InFrontOf,
    /// "the chairs behind the sofa"
    Behind,
    /// "the chairs near the sofa"
    Near,
}

impl Template {
    pub const ALL: [Template; 8] = [
        Template::Plural,
        Template::ColorPlural,
        Template::Nearest,
        Template::LeftOf,
        Template::RightOf,
        Template::InFrontOf,
        Template::Behind,
        Template::Near,
    ];

    pub fn needs_anchor(self) -> bool {
        !matches!(self, Template::Plural | Template::ColorPlural)
    }

    pub fn needs_color(self) -> bool {
        matches!(self, Template::ColorPlural)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slots {
    pub class_id: usize,
    pub attribute_id: Option<usize>,
    /// Object id of the anchor; its class must be unique in the scene.
    pub anchor: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedQuery {
    pub text: String,
    pub tokens: Vec<usize>,
    pub target_ids: Vec<usize>,
}

/// Why a binding could not be rendered; the caller resamples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unsatisfiable {
    MissingSlot,
    AmbiguousAnchor,
    BoundaryCase,
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Evaluates a template binding against a scene's ground truth.
pub fn render_query(
    template: Template,
    slots: Slots,
    objects: &[ObjectRecord],
    vocab: &Vocabulary,
) -> Result<RenderedQuery, Unsatisfiable> {
    let c = slots.class_id;
    let cls = CLASS_NAMES[c];
    let pl = CLASS_PLURALS[c];
    let anchor = if template.needs_anchor() {
        let a = slots.anchor.ok_or(Unsatisfiable::MissingSlot)?;
        let ao = objects.iter().find(|o| o.id == a).ok_or(Unsatisfiable::MissingSlot)?;
        let same = objects.iter().filter(|o| o.class_id == ao.class_id).count();
        if same != 1 || ao.class_id == c {
            return Err(Unsatisfiable::AmbiguousAnchor);
        }
        Some(ao)
    } else {
        None
    };
    let of_class: Vec<&ObjectRecord> = objects.iter().filter(|o| o.class_id == c).collect();

    let (text, targets): (String, Vec<usize>) = match template {
        Template::Plural => (format!("the {pl}"), of_class.iter().map(|o| o.id).collect()),
        Template::ColorPlural => {
            let a = slots.attribute_id.ok_or(Unsatisfiable::MissingSlot)?;
            (
                format!("the {} {pl}", COLOR_NAMES[a]),
                of_class.iter().filter(|o| o.attribute_id == a).map(|o| o.id).collect(),
            )
        }
        Template::Nearest => {
            let ao = anchor.expect("anchored template");
            let mut d: Vec<(f64, usize)> =
                of_class.iter().map(|o| (dist(&o.centroid, &ao.centroid), o.id)).collect();
            d.sort_by(|x, y| x.0.total_cmp(&y.0));
            if d.len() >= 2 && d[1].0 - d[0].0 <= RELATION_DEAD_ZONE {
                return Err(Unsatisfiable::BoundaryCase);
            }
            let aname = CLASS_NAMES[ao.class_id];
            (
                format!("the {cls} nearest to the {aname}"),
                d.first().map(|x| x.1).into_iter().collect(),
            )
        }
        Template::LeftOf | Template::RightOf | Template::InFrontOf | Template::Behind => {
            let ao = anchor.expect("anchored template");
            let (axis, sign, phrase) = match template {
                Template::LeftOf => (0, -1.0, "left of"),
                Template::RightOf => (0, 1.0, "right of"),
                Template::InFrontOf => (1, -1.0, "in front of"),
                _ => (1, 1.0, "behind"),
            };
            let mut t = Vec::new();
            for o in &of_class {
                let off = sign * (o.centroid[axis] - ao.centroid[axis]);
                if off.abs() <= RELATION_DEAD_ZONE {
                    return Err(Unsatisfiable::BoundaryCase);
                }
                if off > RELATION_DEAD_ZONE {
                    t.push(o.id);
                }
            }
            let aname = CLASS_NAMES[ao.class_id];
            (format!("the {pl} {phrase} the {aname}"), t)
        }
        Template::Near => {
            let ao = anchor.expect("anchored template");
            let mut t = Vec::new();
            for o in &of_class {
                let d = dist(&o.centroid, &ao.centroid);
                if (d - NEAR_RADIUS).abs() <= RELATION_DEAD_ZONE {
                    return Err(Unsatisfiable::BoundaryCase);
                }
                if d < NEAR_RADIUS {
                    t.push(o.id);
                }
            }
            let aname = CLASS_NAMES[ao.class_id];
            (format!("the {pl} near the {aname}"), t)
        }
    };
    let tokens = vocab.encode(&text).map_err(|_| Unsatisfiable::MissingSlot)?;
    let mut target_ids = targets;
    target_ids.sort_unstable();
    Ok(RenderedQuery {
        text,
        tokens,
        target_ids,
    })
}
