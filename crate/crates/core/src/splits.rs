//! Object-level, category-stratified split packs with nested label budgets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetManifest, GraspSample};
use crate::{rng, Error};

pub const BUDGETS: [u32; 4] = [1, 10, 25, 100];
pub const HOLDOUT_PERCENT: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPack {
    pub pack_id: String,
    pub seed: u64,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub budgets: BTreeMap<u32, Vec<String>>,
}

fn round_half_up(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

/// Objects a budget of `percent` takes from a category with `train` training objects.
pub fn budget_quota(percent: u32, train: usize) -> usize {
    round_half_up(percent as usize * train, 100).max(1).min(train)
}

/// Per-category holdout sizes: rounded quotas, then the difference to the
/// rounded global count is absorbed by the largest category, spilling over to
/// the next largest when a category would run out of training objects.
pub fn holdout_sizes(category_sizes: &[usize]) -> Vec<usize> {
    let mut sizes: Vec<usize> = category_sizes.iter().map(|&n| round_half_up(HOLDOUT_PERCENT * n, 100)).collect();
    let total: usize = category_sizes.iter().sum();
    let target = round_half_up(HOLDOUT_PERCENT * total, 100);
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(category_sizes[i]), i));
    let mut have: usize = sizes.iter().sum();
    for &i in &order {
        // val and test each take `sizes[i]`, leaving at least one training object
        let cap = category_sizes[i].saturating_sub(1) / 2;
        if have > target {
            let cut = (have - target).min(sizes[i]);
            sizes[i] -= cut;
            have -= cut;
        } else if have < target {
            let add = (target - have).min(cap.saturating_sub(sizes[i]));
            sizes[i] += add;
            have += add;
        }
    }
    sizes
}

pub fn make_pack(manifest: &DatasetManifest, pack_id: &str, seed: u64) -> Result<SplitPack, Error> {
    let groups = manifest.objects_by_category();
    for (cat, ids) in &groups {
        if ids.len() < 3 {
            return Err(Error::Config(format!("category {cat} has {} objects, need at least 3", ids.len())));
        }
    }
    let holdout = holdout_sizes(&groups.iter().map(|(_, ids)| ids.len()).collect::<Vec<_>>());
    let mut pack = SplitPack {
        pack_id: pack_id.to_string(),
        seed,
        val: Vec::new(),
        test: Vec::new(),
        budgets: BUDGETS.iter().map(|&b| (b, Vec::new())).collect(),
    };
    for ((cat, ids), h) in groups.iter().zip(holdout) {
        if 2 * h >= ids.len() {
            return Err(Error::Config(format!("category {cat} has too few objects for {h} val and {h} test")));
        }
        let mut order = ids.clone();
        order.shuffle(&mut rng::stream(seed, &[rng::tag(pack_id), rng::tag(cat)]));
        pack.val.extend_from_slice(&order[..h]);
        pack.test.extend_from_slice(&order[h..2 * h]);
        let train = &order[2 * h..];
        for (&b, list) in pack.budgets.iter_mut() {
            list.extend_from_slice(&train[..budget_quota(b, train.len())]);
        }
    }
    pack.canonicalize();
    Ok(pack)
}

impl SplitPack {
    pub fn canonicalize(&mut self) {
        self.val.sort();
        self.test.sort();
        for list in self.budgets.values_mut() {
            list.sort();
        }
    }

    pub fn budget(&self, percent: u32) -> Result<&[String], Error> {
        self.budgets
            .get(&percent)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("pack {} has no {percent}% budget", self.pack_id)))
    }

    pub fn to_json(&self) -> String {
        format!("{}\n", serde_json::to_string_pretty(self).expect("pack serializes"))
    }

    pub fn from_json(text: &str) -> Result<Self, Error> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("split pack: {e}")))
    }

    pub fn file_name(pack_id: &str) -> String {
        format!("pack_{pack_id}.json")
    }

    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::file_name(&self.pack_id));
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// Object listed in more than one of val, test and train.
    Disjointness {
        object_id: String,
        sets: Vec<String>,
    },
    /// Grasp sample of a held-out object reachable from a train budget.
    Leakage {
        object_id: String,
        samples: usize,
    },
    Nesting {
        smaller: u32,
        larger: u32,
        object_id: String,
    },
    Stratification {
        set: String,
        category: String,
    },
    Size {
        set: String,
        expected: usize,
        found: usize,
    },
    UnknownObject {
        set: String,
        object_id: String,
    },
    Unassigned {
        object_id: String,
    },
    Duplicate {
        set: String,
        object_id: String,
    },
    MissingBudget {
        budget: u32,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Disjointness { object_id, sets } => write!(f, "disjointness: {object_id} in {}", sets.join("+")),
            Violation::Leakage { object_id, samples } => {
                write!(f, "leakage: {samples} samples of held-out {object_id} reach training")
            }
            Violation::Nesting { smaller, larger, object_id } => {
                write!(f, "nesting: {object_id} in {smaller}% but not {larger}%")
            }
            Violation::Stratification { set, category } => write!(f, "stratification: {set} has no {category} object"),
            Violation::Size { set, expected, found } => write!(f, "size: {set} has {found}, expected {expected}"),
            Violation::UnknownObject { set, object_id } => write!(f, "unknown object {object_id} in {set}"),
            Violation::Unassigned { object_id } => write!(f, "unassigned object {object_id}"),
            Violation::Duplicate { set, object_id } => write!(f, "duplicate {object_id} in {set}"),
            Violation::MissingBudget { budget } => write!(f, "missing {budget}% budget"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PackReport {
    pub violations: Vec<Violation>,
}

impl PackReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, pred: impl Fn(&Violation) -> bool) -> usize {
        self.violations.iter().filter(|v| pred(v)).count()
    }
}

/// Checks every pack invariant. `samples`, when given, enables the
/// sample-level leakage check.
pub fn verify_pack(pack: &SplitPack, manifest: &DatasetManifest, samples: Option<&[GraspSample]>) -> PackReport {
    let mut out = Vec::new();
    let category: BTreeMap<&str, &str> =
        manifest.objects.iter().map(|o| (o.object_id.as_str(), o.category_id.as_str())).collect();
    let mut sets: Vec<(String, &[String])> = vec![("val".into(), &pack.val), ("test".into(), &pack.test)];
    for b in BUDGETS {
        match pack.budgets.get(&b) {
            Some(list) => sets.push((format!("train{b}"), list)),
            None => out.push(Violation::MissingBudget { budget: b }),
        }
    }
    for (name, ids) in &sets {
        let mut seen = BTreeSet::new();
        for id in ids.iter() {
            if !seen.insert(id) {
                out.push(Violation::Duplicate { set: name.clone(), object_id: id.clone() });
            }
            if !category.contains_key(id.as_str()) {
                out.push(Violation::UnknownObject { set: name.clone(), object_id: id.clone() });
            }
        }
    }

    // one disjointness entry per object, however many sets it appears in
    let mut membership: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (name, ids) in &sets {
        let group = if name.starts_with("train") { "train" } else { name.as_str() };
        for id in ids.iter() {
            membership.entry(id.as_str()).or_default().insert(group);
        }
    }
    for (id, groups) in &membership {
        if groups.len() > 1 {
            out.push(Violation::Disjointness {
                object_id: id.to_string(),
                sets: groups.iter().map(|s| s.to_string()).collect(),
            });
        }
    }
    for o in &manifest.objects {
        if !membership.contains_key(o.object_id.as_str()) {
            out.push(Violation::Unassigned { object_id: o.object_id.clone() });
        }
    }

    for pair in BUDGETS.windows(2) {
        if let (Some(small), Some(large)) = (pack.budgets.get(&pair[0]), pack.budgets.get(&pair[1])) {
            let large: BTreeSet<&String> = large.iter().collect();
            for id in small.iter().filter(|id| !large.contains(id)) {
                out.push(Violation::Nesting { smaller: pair[0], larger: pair[1], object_id: id.clone() });
            }
        }
    }

    for (name, ids) in sets.iter().filter(|(n, _)| n.starts_with("train")) {
        let present: BTreeSet<&str> = ids.iter().filter_map(|id| category.get(id.as_str()).copied()).collect();
        for (cat, _) in &manifest.categories {
            if !present.contains(cat.as_str()) {
                out.push(Violation::Stratification { set: name.clone(), category: cat.clone() });
            }
        }
    }

    let expected = round_half_up(HOLDOUT_PERCENT * manifest.objects.len(), 100);
    for (name, ids) in &sets[..2] {
        if ids.len() != expected {
            out.push(Violation::Size { set: name.clone(), expected, found: ids.len() });
        }
    }

    if let Some(samples) = samples {
        let train: BTreeSet<&str> = pack.budgets.values().flatten().map(String::as_str).collect();
        let mut leaked: BTreeMap<&str, usize> = BTreeMap::new();
        for s in samples {
            let held_out = pack.val.contains(&s.object_id) || pack.test.contains(&s.object_id);
            if held_out && train.contains(s.object_id.as_str()) {
                *leaked.entry(s.object_id.as_str()).or_default() += 1;
            }
        }
        for (id, n) in leaked {
            out.push(Violation::Leakage { object_id: id.to_string(), samples: n });
        }
    }
    PackReport { violations: out }
}
