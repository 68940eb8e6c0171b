//! Joint conventions shared by every stage: the 19-joint superset, the
//! 15-joint common subset used by the 3D pose head, and the registry that
//! maps named joint sets onto the superset.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUPERSET_NAMES: [&str; 19] = [
    "pelvis",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
    "spine",
    "thorax",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_toe",
    "r_toe",
    "head_top",
];

pub const NUM_SUPERSET: usize = SUPERSET_NAMES.len();

/// Root joint (pelvis) in the superset.
pub const ROOT: usize = 0;

/// Superset indices of the common joints, in common-set order.
pub const COMMON: [usize; 15] = [0, 1, 2, 3, 4, 5, 6, 8, 9, 10, 11, 12, 13, 14, 15];

pub const NUM_COMMON: usize = COMMON.len();

/// Hips, knees, ankles, shoulders, elbows, wrists.
pub const LIMBS12: [usize; 12] = [1, 2, 3, 4, 5, 6, 10, 11, 12, 13, 14, 15];

/// Left/right counterparts in the superset.
pub const FLIP_PAIRS: [(usize, usize); 7] = [
    (1, 4),
    (2, 5),
    (3, 6),
    (10, 13),
    (11, 14),
    (12, 15),
    (16, 17),
];

/// Bones of the common-joint skeleton, as common-set indices.
pub const COMMON_EDGES: [(usize, usize); 14] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (0, 4),
    (4, 5),
    (5, 6),
    (0, 7),
    (7, 8),
    (7, 9),
    (9, 10),
    (10, 11),
    (7, 12),
    (12, 13),
    (13, 14),
];

/// Superset counterpart of `j` under a left/right mirror; self for central joints.
pub fn flip_of(j: usize) -> usize {
    for &(a, b) in FLIP_PAIRS.iter() {
        if a == j {
            return b;
        }
        if b == j {
            return a;
        }
    }
    j
}

pub const SUPERSET: &str = "superset";
pub const COMMON_SET: &str = "common";
pub const LIMBS12_SET: &str = "limbs12";

/// Maps named joint conventions onto superset indices. A `None` entry
/// marks a joint of the source set that the superset does not model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointSetRegistry {
    sets: BTreeMap<String, Vec<Option<usize>>>,
}

impl Default for JointSetRegistry {
    fn default() -> Self {
        let mut sets = BTreeMap::new();
        sets.insert(SUPERSET.to_string(), (0..NUM_SUPERSET).map(Some).collect());
        sets.insert(COMMON_SET.to_string(), COMMON.iter().copied().map(Some).collect());
        sets.insert(
            LIMBS12_SET.to_string(),
            LIMBS12.iter().copied().map(Some).collect(),
        );
        Self { sets }
    }
}

impl JointSetRegistry {
    pub fn from_json(text: &str) -> Result<Self> {
        let reg: Self = serde_json::from_str(text)?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    pub fn insert(&mut self, name: &str, mapping: Vec<Option<usize>>) -> Result<()> {
        check_mapping(name, &mapping)?;
        self.sets.insert(name.to_string(), mapping);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&[Option<usize>]> {
        self.sets
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("unknown joint set '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(|s| s.as_str())
    }

    fn validate(&self) -> Result<()> {
        for (name, mapping) in &self.sets {
            check_mapping(name, mapping)?;
        }
        Ok(())
    }
}

fn check_mapping(name: &str, mapping: &[Option<usize>]) -> Result<()> {
    let mut seen = [false; NUM_SUPERSET];
    for idx in mapping.iter().flatten() {
        if *idx >= NUM_SUPERSET {
            return Err(Error::Config(format!(
                "joint set '{name}' maps to superset index {idx} (superset has {NUM_SUPERSET})"
            )));
        }
        if std::mem::replace(&mut seen[*idx], true) {
            return Err(Error::Config(format!(
                "joint set '{name}' maps two joints onto superset index {idx}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn common_edges_cover_every_common_joint() {
        let mut touched = [false; NUM_COMMON];
        for &(a, b) in COMMON_EDGES.iter() {
            touched[a] = true;
            touched[b] = true;
        }
        assert!(touched.iter().all(|&t| t));
    }

    #[test]
    fn flip_is_an_involution() {
        for j in 0..NUM_SUPERSET {
            assert_eq!(flip_of(flip_of(j)), j);
        }
        assert_eq!(flip_of(2), 5);
        assert_eq!(flip_of(ROOT), ROOT);
    }

    #[test]
    fn registry_json_round_trip() {
        let reg = JointSetRegistry::default();
        let back = JointSetRegistry::from_json(&reg.to_json()).unwrap();
        assert_eq!(reg, back);
    }

    #[test]
    fn registry_rejects_out_of_range_and_duplicates() {
        assert!(JointSetRegistry::from_json(r#"{"bad": [0, 19]}"#).is_err());
        assert!(JointSetRegistry::from_json(r#"{"dup": [3, null, 3]}"#).is_err());
        let reg = JointSetRegistry::from_json(r#"{"ok": [0, null, 3]}"#).unwrap();
        assert_eq!(reg.get("ok").unwrap(), &[Some(0), None, Some(3)]);
        assert!(matches!(reg.get("missing"), Err(Error::Config(_))));
    }
}
