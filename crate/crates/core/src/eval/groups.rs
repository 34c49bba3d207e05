use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Condition, Lighting, POSES, WILD_SCENES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Illumination,
    Pose,
    Wild,
    All,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Illumination, Protocol::Pose, Protocol::Wild, Protocol::All];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Illumination => "illumination",
            Protocol::Pose => "pose",
            Protocol::Wild => "wild",
            Protocol::All => "all",
        }
    }

    /// Images contributed by each instance to one group.
    pub fn per_instance(self) -> usize {
        match self {
            Protocol::Illumination => Lighting::ALL.len(),
            Protocol::Pose => POSES,
            Protocol::Wild => WILD_SCENES,
            Protocol::All => Lighting::ALL.len() * POSES + WILD_SCENES,
        }
    }

    /// `(group key, conditions each instance must supply)` for every group of
    /// one category.
    fn layouts(self) -> Vec<(String, Vec<Condition>)> {
        let studio = |l: Lighting, p: usize| Condition::Studio {
            lighting: l,
            pose: p as u8,
        };
        let wild: Vec<Condition> = (0..WILD_SCENES).map(|k| Condition::Wild { scene: k as u8 }).collect();
        match self {
            Protocol::Illumination => (0..POSES)
                .map(|p| (format!("pose_{p:02}"), Lighting::ALL.map(|l| studio(l, p)).to_vec()))
                .collect(),
            Protocol::Pose => Lighting::ALL
                .iter()
                .map(|&l| (l.as_str().to_string(), (0..POSES).map(|p| studio(l, p)).collect()))
                .collect(),
            Protocol::Wild => vec![("wild".into(), wild)],
            Protocol::All => {
                let mut all: Vec<Condition> = Lighting::ALL
                    .iter()
                    .flat_map(|&l| (0..POSES).map(move |p| studio(l, p)))
                    .collect();
                all.extend(wild);
                vec![("all".into(), all)]
            }
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown protocol {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Member {
    /// Index into the catalog's records.
    pub index: usize,
    /// Identity label (the instance id).
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EvalGroup {
    pub protocol: Protocol,
    pub category: String,
    pub key: String,
    /// Sorted by catalog index.
    pub members: Vec<Member>,
}

impl EvalGroup {
    pub fn labels(&self) -> Vec<u32> {
        self.members.iter().map(|m| m.label).collect()
    }

    pub fn identities(&self) -> usize {
        let mut l = self.labels();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct GroupSet {
    pub groups: Vec<EvalGroup>,
    pub warnings: Vec<String>,
}

/// Forms the evaluation groups of one protocol. A group is emitted only when
/// every instance of the category supplies all of its images; skipped groups
/// are summarized per category in the warnings.
pub fn build_groups(catalog: &Catalog, protocol: Protocol) -> GroupSet {
    let index = catalog.index();
    let mut out = GroupSet::default();
    for category in catalog.categories() {
        let instances = catalog.instances(category);
        if instances.len() < 2 {
            out.warnings.push(format!(
                "{protocol}: category {category} has {} instance(s); need at least 2",
                instances.len()
            ));
            continue;
        }
        let layouts = protocol.layouts();
        let total = layouts.len();
        let mut skipped = 0usize;
        for (key, conditions) in layouts {
            let members: Option<Vec<Member>> = instances
                .iter()
                .flat_map(|&inst| conditions.iter().map(move |c| (inst, *c)))
                .map(|(inst, c)| {
                    index
                        .get(&(category.as_str(), inst, c))
                        .map(|&i| Member { index: i, label: inst })
                })
                .collect();
            let Some(mut members) = members else {
                skipped += 1;
                continue;
            };
            members.sort_by_key(|m| m.index);
            assert_eq!(
                members.len(),
                instances.len() * protocol.per_instance(),
                "group cardinality for {protocol}"
            );
            out.groups.push(EvalGroup {
                protocol,
                category: category.clone(),
                key,
                members,
            });
        }
        if skipped > 0 {
            let msg = format!("{protocol}: category {category} incomplete, skipped {skipped} of {total} groups");
            log::warn!("{msg}");
            out.warnings.push(msg);
        }
    }
    out
}
