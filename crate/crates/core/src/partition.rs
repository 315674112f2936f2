//! Non-IID client splits.
//!
//! Label skew assigns each sample to the first listed client whose class
//! presence constraints it satisfies; samples nobody accepts stay in an
//! explicit unassigned pool. Quantity skew is a seeded random split with
//! prescribed proportions.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::loss::IGNORE_INDEX;

pub type ClientId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    LabelSkew,
    QuantitySkew,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConstraint {
    pub id: ClientId,
    #[serde(default)]
    pub required_absent: BTreeSet<u8>,
    /// Every listed class must be present.
    #[serde(default)]
    pub required_present: BTreeSet<u8>,
    #[serde(default)]
    pub max_count: Option<usize>,
}

impl ClientConstraint {
    pub fn accepts(&self, present: &BTreeSet<u8>) -> bool {
        self.required_absent.is_disjoint(present) && self.required_present.is_subset(present)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    #[serde(default)]
    pub clients: Vec<ClientConstraint>,
}

impl PartitionSpec {
    /// Three clients that never share the two classes `a` and `b`: client 1
    /// has `a` without `b`, client 2 has `b` without `a`, client 3 has
    /// neither.
    pub fn exclusive_pair(a: u8, b: u8) -> Self {
        let set = |v: &[u8]| v.iter().copied().collect::<BTreeSet<u8>>();
        Self {
            mode: PartitionMode::LabelSkew,
            clients: vec![
                ClientConstraint {
                    id: 1,
                    required_present: set(&[a]),
                    required_absent: set(&[b]),
                    max_count: None,
                },
                ClientConstraint {
                    id: 2,
                    required_present: set(&[b]),
                    required_absent: set(&[a]),
                    max_count: None,
                },
                ClientConstraint {
                    id: 3,
                    required_present: BTreeSet::new(),
                    required_absent: set(&[a, b]),
                    max_count: None,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for c in &self.clients {
            if !ids.insert(c.id) {
                return Err(Error::Partition(format!("duplicate client id {}", c.id)));
            }
            if let Some(class) = c.required_present.intersection(&c.required_absent).next() {
                return Err(Error::Partition(format!(
                    "client {}: class {class} is both required present and required absent",
                    c.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartitionResult {
    /// Sample ids per client, in dataset order.
    pub assignments: BTreeMap<ClientId, Vec<String>>,
    pub unassigned: Vec<String>,
    /// Per client: class id → number of assigned samples containing it.
    pub stats: BTreeMap<ClientId, BTreeMap<u8, usize>>,
}

/// Distinct class ids in the mask, ignore sentinel excluded.
pub fn classes_present(sample: &SegmentationSample) -> BTreeSet<u8> {
    let mut seen = [false; 256];
    for &c in sample.mask.data() {
        seen[c as usize] = true;
    }
    seen[IGNORE_INDEX as usize] = false;
    (0..=255u8).filter(|&c| seen[c as usize]).collect()
}

fn histogram(dataset: &[SegmentationSample], ids: &[String]) -> BTreeMap<u8, usize> {
    let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
    let mut hist = BTreeMap::new();
    for s in dataset.iter().filter(|s| wanted.contains(s.id.as_str())) {
        for c in classes_present(s) {
            *hist.entry(c).or_insert(0) += 1;
        }
    }
    hist
}

fn finish(
    dataset: &[SegmentationSample],
    assignments: BTreeMap<ClientId, Vec<String>>,
    unassigned: Vec<String>,
) -> PartitionResult {
    let stats = assignments
        .iter()
        .map(|(&id, ids)| (id, histogram(dataset, ids)))
        .collect();
    PartitionResult {
        assignments,
        unassigned,
        stats,
    }
}

fn check_unique_ids(dataset: &[SegmentationSample]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in dataset {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Partition(format!("duplicate sample id '{}'", s.id)));
        }
    }
    Ok(())
}

pub fn partition_label_skew(dataset: &[SegmentationSample], spec: &PartitionSpec) -> Result<PartitionResult> {
    if spec.mode != PartitionMode::LabelSkew {
        return Err(Error::Partition("spec mode is not label_skew".into()));
    }
    spec.validate()?;
    check_unique_ids(dataset)?;
    let mut assignments: BTreeMap<ClientId, Vec<String>> = spec.clients.iter().map(|c| (c.id, Vec::new())).collect();
    let mut unassigned = Vec::new();
    for sample in dataset {
        let present = classes_present(sample);
        let target = spec
            .clients
            .iter()
            .find(|c| c.accepts(&present) && c.max_count.is_none_or(|m| assignments[&c.id].len() < m));
        match target {
            Some(c) => assignments
                .get_mut(&c.id)
                .expect("seeded above")
                .push(sample.id.clone()),
            None => unassigned.push(sample.id.clone()),
        }
    }
    Ok(finish(dataset, assignments, unassigned))
}

/// Per-client counts from cumulative rounding, so each count is within one
/// of `proportion × n` and the counts sum to `n`.
pub fn quantity_counts(n: usize, proportions: &[f64]) -> Result<Vec<usize>> {
    if proportions.is_empty() {
        return Err(Error::Partition("no proportions given".into()));
    }
    if proportions.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(Error::Partition("proportions must be positive".into()));
    }
    let sum: f64 = proportions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Partition(format!("proportions sum to {sum}, not 1")));
    }
    if proportions.len() > n {
        return Err(Error::Partition(format!(
            "{} clients but only {n} samples",
            proportions.len()
        )));
    }
    let mut counts = Vec::with_capacity(proportions.len());
    let mut cum = 0.0;
    let mut prev = 0usize;
    for (i, p) in proportions.iter().enumerate() {
        cum += p;
        let edge = if i + 1 == proportions.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).clamp(prev, n)
        };
        counts.push(edge - prev);
        prev = edge;
    }
    Ok(counts)
}

/// Seeded shuffle, then consecutive slices of the sizes given by
/// [`quantity_counts`]. Clients are numbered from 1.
pub fn partition_quantity_skew(
    dataset: &[SegmentationSample],
    proportions: &[f64],
    seed: u64,
) -> Result<PartitionResult> {
    check_unique_ids(dataset)?;
    let counts = quantity_counts(dataset.len(), proportions)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = BTreeMap::new();
    let mut start = 0;
    for (i, &count) in counts.iter().enumerate() {
        let mut picked: Vec<usize> = order[start..start + count].to_vec();
        picked.sort_unstable();
        assignments.insert(
            i as ClientId + 1,
            picked.into_iter().map(|j| dataset[j].id.clone()).collect(),
        );
        start += count;
    }
    Ok(finish(dataset, assignments, Vec::new()))
}

impl PartitionResult {
    /// Text manifest: a `sample_id,client` record block (client id or
    /// `unassigned`) followed by a `client,class,samples` histogram block.
    pub fn to_manifest(&self) -> String {
        let mut out = String::from("sample_id,client\n");
        let mut rows: Vec<(&str, String)> = self
            .assignments
            .iter()
            .flat_map(|(c, ids)| ids.iter().map(move |id| (id.as_str(), c.to_string())))
            .chain(self.unassigned.iter().map(|id| (id.as_str(), "unassigned".to_owned())))
            .collect();
        rows.sort();
        for (id, client) in rows {
            let _ = writeln!(out, "{id},{client}");
        }
        out.push_str("\nclient,class,samples\n");
        for (client, hist) in &self.stats {
            for (class, count) in hist {
                let _ = writeln!(out, "{client},{class},{count}");
            }
        }
        out
    }

    /// Reads the record block of [`PartitionResult::to_manifest`]; the
    /// histogram block is recomputed by the caller when needed.
    pub fn parse_manifest(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("sample_id,client") {
            return Err(Error::Partition("manifest must start with 'sample_id,client'".into()));
        }
        let mut result = PartitionResult::default();
        for (n, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                break;
            }
            let (id, client) = line
                .split_once(',')
                .ok_or_else(|| Error::Partition(format!("manifest line {}: expected id,client", n + 2)))?;
            if client == "unassigned" {
                result.unassigned.push(id.to_owned());
            } else {
                let c: ClientId = client
                    .parse()
                    .map_err(|_| Error::Partition(format!("manifest line {}: bad client '{client}'", n + 2)))?;
                result.assignments.entry(c).or_default().push(id.to_owned());
            }
        }
        Ok(result)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_manifest()).map_err(|e| Error::io(path, e))
    }

    /// Recomputes per-client histograms against `dataset`.
    pub fn with_stats(mut self, dataset: &[SegmentationSample]) -> Self {
        self.stats = self
            .assignments
            .iter()
            .map(|(&id, ids)| (id, histogram(dataset, ids)))
            .collect();
        self
    }
}
