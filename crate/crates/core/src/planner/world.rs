//! Discrete tabletop world the executor acts on.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PlanError;
use crate::perception::BBox;

pub const TABLE: &str = "table";
pub const USER_ZONE: &str = "user_zone";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Item,
    Container,
    Vessel,
    Plant,
    Switch,
}

impl ObjectKind {
    pub fn graspable(self) -> bool {
        matches!(self, ObjectKind::Item | ObjectKind::Container | ObjectKind::Vessel)
    }

    /// Kinds a vessel can pour into.
    pub fn pour_target(self) -> bool {
        matches!(self, ObjectKind::Container | ObjectKind::Vessel | ObjectKind::Plant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contents {
    #[serde(default)]
    pub substance: Option<String>,
    #[serde(default)]
    pub amount: f64,
    /// `None` means unbounded.
    #[serde(default)]
    pub capacity: Option<f64>,
}

impl Contents {
    pub fn free(&self) -> f64 {
        self.capacity.map_or(f64::INFINITY, |c| (c - self.amount).max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "at", content = "target", rename_all = "snake_case")]
pub enum Location {
    Table,
    Held,
    UserZone,
    Inside(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub kind: ObjectKind,
    pub cell: (i32, i32),
    pub bbox: Option<BBox>,
    pub location: Location,
    pub contents: Option<Contents>,
}

impl WorldObject {
    /// Visible to the scene camera: on the table or in the user zone.
    pub fn is_visible(&self) -> bool {
        matches!(self.location, Location::Table | Location::UserZone)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "object", rename_all = "snake_case")]
pub enum Gripper {
    Empty,
    Holding(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: BTreeMap<String, WorldObject>,
    pub gripper: Gripper,
    pub switches: BTreeMap<String, bool>,
    pub plants: BTreeMap<String, bool>,
    /// Target of the last `move_to`.
    pub arm_at: Option<String>,
    /// Target chosen by `place`, applied on `release`.
    pub pending_place: Option<String>,
}

impl WorldState {
    pub fn empty() -> Self {
        Self {
            objects: BTreeMap::new(),
            gripper: Gripper::Empty,
            switches: BTreeMap::new(),
            plants: BTreeMap::new(),
            arm_at: None,
            pending_place: None,
        }
    }

    pub fn exists(&self, label: &str) -> bool {
        label == TABLE || label == USER_ZONE || self.objects.contains_key(label)
    }

    pub fn held(&self) -> Option<&str> {
        match &self.gripper {
            Gripper::Holding(l) => Some(l),
            Gripper::Empty => None,
        }
    }

    pub fn amount_of(&self, label: &str) -> f64 {
        self.objects
            .get(label)
            .and_then(|o| o.contents.as_ref())
            .map_or(0.0, |c| c.amount)
    }

    /// Total of each substance across all objects.
    pub fn substance_totals(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for o in self.objects.values() {
            if let Some(Contents {
                substance: Some(s),
                amount,
                ..
            }) = &o.contents
            {
                *out.entry(s.clone()).or_insert(0.0) += amount;
            }
        }
        out
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        serde_json::to_string(self)
            .expect("world serializes")
            .hash(&mut h);
        h.finish()
    }

    /// Labels in a deterministic order.
    pub fn labels(&self) -> Vec<String> {
        self.objects.keys().cloned().collect()
    }

    /// Checks structural invariants: one held object at most, held object off the
    /// table, non-negative contents.
    pub fn check_invariants(&self) -> Result<(), String> {
        let held: Vec<_> = self
            .objects
            .iter()
            .filter(|(_, o)| o.location == Location::Held)
            .map(|(l, _)| l.clone())
            .collect();
        match (&self.gripper, held.as_slice()) {
            (Gripper::Empty, []) => {}
            (Gripper::Holding(l), [h]) if l == h => {}
            (g, h) => return Err(format!("gripper {g:?} inconsistent with held objects {h:?}")),
        }
        for (l, o) in &self.objects {
            if let Some(c) = &o.contents {
                if c.amount < 0.0 {
                    return Err(format!("{l} holds a negative amount"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureObject {
    pub kind: ObjectKind,
    #[serde(default)]
    pub cell: [i32; 2],
    #[serde(rename = "box", default)]
    pub bbox: Option<[f64; 4]>,
    #[serde(default)]
    pub contents: Option<Contents>,
}

/// World fixture file layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldFixture {
    pub objects: BTreeMap<String, FixtureObject>,
    #[serde(default)]
    pub switches: BTreeMap<String, bool>,
}

/// Scene box for a grid cell when a fixture gives none: 160×120 px cells laid out
/// across the middle band of a 1088×1080 scene.
pub fn cell_box(cell: (i32, i32)) -> BBox {
    let (r, c) = cell;
    let x0 = 60.0 + 240.0 * c as f64;
    let y0 = 390.0 + 170.0 * r as f64;
    BBox::new(x0, y0, x0 + 160.0, y0 + 120.0)
}

impl WorldFixture {
    pub fn into_world(self) -> Result<WorldState, PlanError> {
        let mut w = WorldState::empty();
        for (label, o) in self.objects {
            if label == TABLE || label == USER_ZONE {
                return Err(PlanError::Fixture(format!("{label} is a reserved name")));
            }
            let cell = (o.cell[0], o.cell[1]);
            let bbox = match o.bbox {
                Some([a, b, c, d]) => BBox::new(a, b, c, d),
                None => cell_box(cell),
            };
            if !bbox.is_valid() {
                return Err(PlanError::Fixture(format!("{label} has a degenerate box")));
            }
            let mut contents = o.contents;
            match o.kind {
                ObjectKind::Switch => {
                    let on = self.switches.get(&label).copied().unwrap_or(false);
                    w.switches.insert(label.clone(), on);
                }
                ObjectKind::Plant => {
                    w.plants.insert(label.clone(), false);
                    contents.get_or_insert(Contents {
                        substance: None,
                        amount: 0.0,
                        capacity: None,
                    });
                }
                _ => {}
            }
            if let Some(c) = &contents {
                if c.amount < 0.0 || c.capacity.is_some_and(|cap| c.amount > cap) {
                    return Err(PlanError::Fixture(format!("{label} contents out of range")));
                }
            }
            w.objects.insert(
                label,
                WorldObject {
                    kind: o.kind,
                    cell,
                    bbox: Some(bbox),
                    location: Location::Table,
                    contents,
                },
            );
        }
        for s in self.switches.keys() {
            if !w.switches.contains_key(s) {
                return Err(PlanError::Fixture(format!("switch {s} has no object entry")));
            }
        }
        Ok(w)
    }

    pub fn load(path: &Path) -> Result<Self, PlanError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PlanError::Fixture(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PlanError::Fixture(e.to_string()))
    }
}

impl std::str::FromStr for WorldFixture {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_str(s).map_err(|e| PlanError::Fixture(e.to_string()))
    }
}
