//! 17-joint skeleton, 6-sensor placement, kinematic group tables, and the
//! parent-first scan ordering used by the skeleton-aware sequence blocks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const JOINT_COUNT: usize = 17;
pub const IMU_COUNT: usize = 6;

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "Hips",
    "RightUpLeg",
    "RightLeg",
    "RightFoot",
    "LeftUpLeg",
    "LeftLeg",
    "LeftFoot",
    "Spine",
    "Spine3",
    "Neck",
    "Head",
    "LeftArm",
    "LeftForeArm",
    "LeftHand",
    "RightArm",
    "RightForeArm",
    "RightHand",
];

/// Body-frame placements of the six orientation sensors.
pub const IMU_PLACEMENTS: [&str; IMU_COUNT] =
    ["pelvis", "sternum", "left_leg", "right_leg", "left_arm", "right_arm"];

/// Joint indices by name, for code that addresses specific joints.
pub mod joints {
    pub const HIPS: usize = 0;
    pub const RIGHT_UP_LEG: usize = 1;
    pub const RIGHT_LEG: usize = 2;
    pub const RIGHT_FOOT: usize = 3;
    pub const LEFT_UP_LEG: usize = 4;
    pub const LEFT_LEG: usize = 5;
    pub const LEFT_FOOT: usize = 6;
    pub const SPINE: usize = 7;
    pub const SPINE3: usize = 8;
    pub const NECK: usize = 9;
    pub const HEAD: usize = 10;
    pub const LEFT_ARM: usize = 11;
    pub const LEFT_FORE_ARM: usize = 12;
    pub const LEFT_HAND: usize = 13;
    pub const RIGHT_ARM: usize = 14;
    pub const RIGHT_FORE_ARM: usize = 15;
    pub const RIGHT_HAND: usize = 16;
}

pub mod imus {
    pub const PELVIS: usize = 0;
    pub const STERNUM: usize = 1;
    pub const LEFT_LEG: usize = 2;
    pub const RIGHT_LEG: usize = 3;
    pub const LEFT_ARM: usize = 4;
    pub const RIGHT_ARM: usize = 5;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SkeletonError {
    #[error("group count {0} unsupported (expected 0, 3, or 5)")]
    UnsupportedGroupCount(usize),
    #[error("topology is not a tree rooted at joint 0: {0}")]
    NotATree(String),
    #[error("unknown joint name {0:?}")]
    UnknownJoint(String),
}

/// Parent array over the 17 joints. `parent[j] = None` marks the root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    pub parent: [Option<usize>; JOINT_COUNT],
}

/// The standard kinematic tree: three chains out of the hips (both legs and
/// the spine), with the neck and both arms branching from the upper spine.
pub fn default_topology() -> SkeletonTopology {
    use joints::*;
    let mut parent = [None; JOINT_COUNT];
    let edges = [
        (RIGHT_UP_LEG, HIPS),
        (RIGHT_LEG, RIGHT_UP_LEG),
        (RIGHT_FOOT, RIGHT_LEG),
        (LEFT_UP_LEG, HIPS),
        (LEFT_LEG, LEFT_UP_LEG),
        (LEFT_FOOT, LEFT_LEG),
        (SPINE, HIPS),
        (SPINE3, SPINE),
        (NECK, SPINE3),
        (HEAD, NECK),
        (LEFT_ARM, SPINE3),
        (LEFT_FORE_ARM, LEFT_ARM),
        (LEFT_HAND, LEFT_FORE_ARM),
        (RIGHT_ARM, SPINE3),
        (RIGHT_FORE_ARM, RIGHT_ARM),
        (RIGHT_HAND, RIGHT_FORE_ARM),
    ];
    for (child, par) in edges {
        parent[child] = Some(par);
    }
    SkeletonTopology { parent }
}

/// Depth-first traversal from the root, visiting children in ascending joint
/// index. Every parent precedes all of its descendants in the result.
pub fn skeleton_scan_order(t: &SkeletonTopology) -> Result<[usize; JOINT_COUNT], SkeletonError> {
    let mut roots = 0;
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); JOINT_COUNT];
    for j in 0..JOINT_COUNT {
        match t.parent[j] {
            None => roots += 1,
            Some(p) if p < JOINT_COUNT && p != j => children[p].push(j),
            Some(p) => return Err(SkeletonError::NotATree(format!("joint {j} has parent {p}"))),
        }
    }
    if roots != 1 || t.parent[0].is_some() {
        return Err(SkeletonError::NotATree(format!("{roots} roots, expected joint 0 alone")));
    }
    let mut order = [0usize; JOINT_COUNT];
    let mut pos = 0;
    let mut stack = vec![0usize];
    while let Some(j) = stack.pop() {
        order[pos] = j;
        pos += 1;
        // Pushed in reverse so the smallest child is popped first.
        for &c in children[j].iter().rev() {
            stack.push(c);
        }
    }
    if pos != JOINT_COUNT {
        return Err(SkeletonError::NotATree(format!("only {pos} of {JOINT_COUNT} joints reachable")));
    }
    Ok(order)
}

/// One kinematic group: the joints whose pose it predicts and the sensors
/// whose orientation streams inform it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointGroup {
    pub name: String,
    pub joints: Vec<usize>,
    pub imus: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub groups: Vec<JointGroup>,
}

impl GroupPartition {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
}

fn group(name: &str, joints: &[usize], imus: &[usize]) -> JointGroup {
    JointGroup { name: name.into(), joints: joints.to_vec(), imus: imus.to_vec() }
}

/// The fixed partition tables. `0` requests a single all-inclusive group;
/// `3` splits torso / upper limbs / lower limbs; `5` gives each limb its own
/// group with the torso chain shared as kinematic context.
pub fn group_partition(g: usize) -> Result<GroupPartition, SkeletonError> {
    use imus as im;
    let groups = match g {
        0 => vec![group("full_body", &(0..JOINT_COUNT).collect::<Vec<_>>(), &[0, 1, 2, 3, 4, 5])],
        3 => vec![
            group("torso", &[0, 7, 8, 9, 10], &[im::PELVIS, im::STERNUM]),
            group("upper_body", &[11, 12, 13, 14, 15, 16], &[im::LEFT_ARM, im::RIGHT_ARM]),
            group("lower_body", &[1, 2, 3, 4, 5, 6], &[im::LEFT_LEG, im::RIGHT_LEG]),
        ],
        5 => vec![
            group("torso", &[0, 7, 8, 9, 10], &[im::PELVIS, im::STERNUM]),
            group("left_arm", &[0, 7, 8, 11, 12, 13], &[im::PELVIS, im::STERNUM, im::LEFT_ARM]),
            group("right_arm", &[0, 7, 8, 14, 15, 16], &[im::PELVIS, im::STERNUM, im::RIGHT_ARM]),
            group("left_leg", &[0, 4, 5, 6], &[im::PELVIS, im::LEFT_LEG]),
            group("right_leg", &[0, 1, 2, 3], &[im::PELVIS, im::RIGHT_LEG]),
        ],
        other => return Err(SkeletonError::UnsupportedGroupCount(other)),
    };
    Ok(GroupPartition { groups })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartitionViolation {
    JointOutOfRange { group: String, joint: usize },
    ImuOutOfRange { group: String, imu: usize },
    EmptyJoints { group: String },
    EmptyImus { group: String },
    MissingJoint(usize),
}

impl std::fmt::Display for PartitionViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::JointOutOfRange { group, joint } => {
                write!(f, "group {group:?}: joint index {joint} out of range")
            }
            Self::ImuOutOfRange { group, imu } => {
                write!(f, "group {group:?}: imu index {imu} out of range")
            }
            Self::EmptyJoints { group } => write!(f, "group {group:?} has no joints"),
            Self::EmptyImus { group } => write!(f, "group {group:?} has no imus"),
            Self::MissingJoint(j) => write!(f, "joint {j} not covered by any group"),
        }
    }
}

/// Collects every violation instead of stopping at the first, so a bad
/// hand-edited partition file reports all its problems at once.
pub fn validate_partition(p: &GroupPartition) -> Vec<PartitionViolation> {
    let mut out = Vec::new();
    let mut covered = [false; JOINT_COUNT];
    for g in &p.groups {
        if g.joints.is_empty() {
            out.push(PartitionViolation::EmptyJoints { group: g.name.clone() });
        }
        if g.imus.is_empty() {
            out.push(PartitionViolation::EmptyImus { group: g.name.clone() });
        }
        for &j in &g.joints {
            if j >= JOINT_COUNT {
                out.push(PartitionViolation::JointOutOfRange { group: g.name.clone(), joint: j });
            } else {
                covered[j] = true;
            }
        }
        for &i in &g.imus {
            if i >= IMU_COUNT {
                out.push(PartitionViolation::ImuOutOfRange { group: g.name.clone(), imu: i });
            }
        }
    }
    for (j, &c) in covered.iter().enumerate() {
        if !c {
            out.push(PartitionViolation::MissingJoint(j));
        }
    }
    out
}

pub fn joint_index(name: &str) -> Result<usize, SkeletonError> {
    JOINT_NAMES
        .iter()
        .position(|&n| n == name)
        .ok_or_else(|| SkeletonError::UnknownJoint(name.to_string()))
}

/// Human-editable form: named parents and named group members.
pub fn topology_to_named_json(t: &SkeletonTopology) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = (0..JOINT_COUNT)
        .map(|j| {
            let v = match t.parent[j] {
                Some(p) => serde_json::Value::String(JOINT_NAMES[p].to_string()),
                None => serde_json::Value::Null,
            };
            (JOINT_NAMES[j].to_string(), v)
        })
        .collect();
    serde_json::Value::Object(map)
}

pub fn topology_from_named_json(v: &serde_json::Value) -> Result<SkeletonTopology, SkeletonError> {
    let obj = v
        .as_object()
        .ok_or_else(|| SkeletonError::NotATree("expected a JSON object".into()))?;
    let mut parent = [None; JOINT_COUNT];
    for (name, pv) in obj {
        let j = joint_index(name)?;
        parent[j] = match pv {
            serde_json::Value::Null => None,
            serde_json::Value::String(p) => Some(joint_index(p)?),
            other => return Err(SkeletonError::NotATree(format!("bad parent entry {other}"))),
        };
    }
    Ok(SkeletonTopology { parent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_parent_table() {
        let t = default_topology();
        let expect: [Option<usize>; 17] = [
            None,
            Some(0),
            Some(1),
            Some(2),
            Some(0),
            Some(4),
            Some(5),
            Some(0),
            Some(7),
            Some(8),
            Some(9),
            Some(8),
            Some(11),
            Some(12),
            Some(8),
            Some(14),
            Some(15),
        ];
        assert_eq!(t.parent, expect);
        assert_eq!(t.parent.iter().filter(|p| p.is_some()).count(), 16);
    }

    #[test]
    fn default_scan_order_is_identity() {
        let order = skeleton_scan_order(&default_topology()).unwrap();
        let identity: Vec<usize> = (0..17).collect();
        assert_eq!(order.to_vec(), identity);
    }

    #[test]
    fn chain_topology_scan_order_is_identity() {
        let mut parent = [None; JOINT_COUNT];
        for j in 1..JOINT_COUNT {
            parent[j] = Some(j - 1);
        }
        let order = skeleton_scan_order(&SkeletonTopology { parent }).unwrap();
        assert_eq!(order.to_vec(), (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn cyclic_topology_rejected() {
        let mut t = default_topology();
        t.parent[1] = Some(2);
        t.parent[2] = Some(1);
        assert!(matches!(skeleton_scan_order(&t), Err(SkeletonError::NotATree(_))));
    }

    #[test]
    fn partition_tables_match_expected_memberships() {
        let p5 = group_partition(5).unwrap();
        assert_eq!(p5.group_count(), 5);
        let left_leg = p5.groups.iter().find(|g| g.name == "left_leg").unwrap();
        assert_eq!(left_leg.joints, vec![0, 4, 5, 6]);
        assert_eq!(left_leg.imus, vec![0, 2]);

        let p3 = group_partition(3).unwrap();
        let upper = p3.groups.iter().find(|g| g.name == "upper_body").unwrap();
        assert_eq!(upper.joints, vec![11, 12, 13, 14, 15, 16]);
        assert_eq!(upper.imus, vec![4, 5]);

        let p0 = group_partition(0).unwrap();
        assert_eq!(p0.group_count(), 1);
        assert_eq!(p0.groups[0].joints.len(), 17);
        assert_eq!(p0.groups[0].imus.len(), 6);

        assert!(matches!(group_partition(4), Err(SkeletonError::UnsupportedGroupCount(4))));
    }

    #[test]
    fn five_group_partition_covers_all_joints_with_shared_torso_chain() {
        let p = group_partition(5).unwrap();
        assert!(validate_partition(&p).is_empty());
        let mut seen = [0usize; JOINT_COUNT];
        for g in &p.groups {
            for &j in &g.joints {
                seen[j] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c >= 1));
        // hips and spine chain shared as context across limb groups
        for j in [0, 7, 8] {
            assert!(seen[j] >= 2, "joint {j} appears {} times", seen[j]);
        }
    }

    #[test]
    fn validate_reports_all_violations() {
        let p = GroupPartition {
            groups: vec![
                group("a", &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 11, 12, 13, 14, 15, 16], &[0, 6]),
                group("b", &[25], &[]),
            ],
        };
        let v = validate_partition(&p);
        assert!(v.contains(&PartitionViolation::MissingJoint(10)));
        assert!(v.contains(&PartitionViolation::ImuOutOfRange { group: "a".into(), imu: 6 }));
        assert!(v.contains(&PartitionViolation::JointOutOfRange { group: "b".into(), joint: 25 }));
        assert!(v.contains(&PartitionViolation::EmptyImus { group: "b".into() }));
    }

    #[test]
    fn named_json_round_trip() {
        let t = default_topology();
        let j = topology_to_named_json(&t);
        assert_eq!(j["RightFoot"], "RightLeg");
        assert_eq!(j["Hips"], serde_json::Value::Null);
        let back = topology_from_named_json(&j).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn scan_order_respects_parents_on_random_trees(choices in proptest::collection::vec(any::<u64>(), 16)) {
            // parent[j] < j guarantees a tree rooted at 0
            let mut parent = [None; JOINT_COUNT];
            for j in 1..JOINT_COUNT {
                parent[j] = Some((choices[j - 1] % j as u64) as usize);
            }
            let order = skeleton_scan_order(&SkeletonTopology { parent }).unwrap();
            let mut sorted = order.to_vec();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..17).collect::<Vec<_>>());
            let mut position = [0usize; JOINT_COUNT];
            for (i, &j) in order.iter().enumerate() {
                position[j] = i;
            }
            for j in 1..JOINT_COUNT {
                prop_assert!(position[parent[j].unwrap()] < position[j]);
            }
        }
    }
}
