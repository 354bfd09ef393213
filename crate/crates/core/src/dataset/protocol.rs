//! Train/eval/test protocols: P1 (all attack types seen), P2.1 (physical
//! attacks unseen) and P2.2 (digital attacks unseen).
//!
//! Identities are partitioned between the three parts, so no identity (and in
//! particular no identity's live frames) appears in more than one part.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use super::types::{AttackKind, SampleDescriptor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProtocolId {
    P1,
    P2_1,
    P2_2,
}

impl ProtocolId {
    pub const ALL: [ProtocolId; 3] = [ProtocolId::P1, ProtocolId::P2_1, ProtocolId::P2_2];

    /// The attack family held out of train and eval, if any.
    pub fn held_out(self) -> Option<&'static [AttackKind]> {
        match self {
            ProtocolId::P1 => None,
            ProtocolId::P2_1 => Some(&[AttackKind::Physical]),
            ProtocolId::P2_2 => Some(&[AttackKind::Adversarial, AttackKind::Deepfake]),
        }
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolId::P1 => "p1",
            ProtocolId::P2_1 => "p2.1",
            ProtocolId::P2_2 => "p2.2",
        })
    }
}

impl FromStr for ProtocolId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(ProtocolId::P1),
            "p2.1" | "p2_1" => Ok(ProtocolId::P2_1),
            "p2.2" | "p2_2" => Ok(ProtocolId::P2_2),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Eval,
    Test,
}

impl SplitPart {
    pub const ALL: [SplitPart; 3] = [SplitPart::Train, SplitPart::Eval, SplitPart::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Eval => "eval",
            SplitPart::Test => "test",
        }
    }
}

impl FromStr for SplitPart {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "eval" | "dev" => Ok(SplitPart::Eval),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::Config(format!("unknown split part `{other}`"))),
        }
    }
}

/// Image counts per attack kind for one split part. `deepfake` is the
/// table's "digital" column; `adversarial` its "adv" column.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub live: usize,
    pub physical: usize,
    pub adversarial: usize,
    pub deepfake: usize,
}

impl CountRow {
    pub const fn new(live: usize, physical: usize, adversarial: usize, deepfake: usize) -> Self {
        Self { live, physical, adversarial, deepfake }
    }

    pub fn get(&self, kind: AttackKind) -> usize {
        match kind {
            AttackKind::Live => self.live,
            AttackKind::Physical => self.physical,
            AttackKind::Adversarial => self.adversarial,
            AttackKind::Deepfake => self.deepfake,
        }
    }

    pub fn get_mut(&mut self, kind: AttackKind) -> &mut usize {
        match kind {
            AttackKind::Live => &mut self.live,
            AttackKind::Physical => &mut self.physical,
            AttackKind::Adversarial => &mut self.adversarial,
            AttackKind::Deepfake => &mut self.deepfake,
        }
    }

    pub fn total(&self) -> usize {
        self.live + self.physical + self.adversarial + self.deepfake
    }
}

pub const KINDS: [AttackKind; 4] = [AttackKind::Live, AttackKind::Physical, AttackKind::Adversarial, AttackKind::Deepfake];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    pub train: CountRow,
    pub eval: CountRow,
    pub test: CountRow,
}

impl CountTable {
    pub fn row(&self, part: SplitPart) -> &CountRow {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Eval => &self.eval,
            SplitPart::Test => &self.test,
        }
    }

    pub fn row_mut(&mut self, part: SplitPart) -> &mut CountRow {
        match part {
            SplitPart::Train => &mut self.train,
            SplitPart::Eval => &mut self.eval,
            SplitPart::Test => &mut self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train.total() + self.eval.total() + self.test.total()
    }

    fn cells(&self) -> impl Iterator<Item = (SplitPart, AttackKind, usize)> + '_ {
        SplitPart::ALL.into_iter().flat_map(move |p| KINDS.into_iter().map(move |k| (p, k, self.row(p).get(k))))
    }
}

/// Image counts of the full-size protocol table, at 1800 identities with five
/// frames per video.
pub fn table_counts(protocol: ProtocolId) -> CountTable {
    match protocol {
        ProtocolId::P1 => CountTable {
            train: CountRow::new(3000, 1800, 1800, 1800),
            eval: CountRow::new(1500, 900, 1800, 1800),
            test: CountRow::new(4500, 2700, 7106, 7200),
        },
        ProtocolId::P2_1 => CountTable {
            train: CountRow::new(3000, 0, 9000, 9000),
            eval: CountRow::new(1500, 0, 1706, 1800),
            test: CountRow::new(4500, 5400, 0, 0),
        },
        ProtocolId::P2_2 => CountTable {
            train: CountRow::new(3000, 2700, 0, 0),
            eval: CountRow::new(1500, 2700, 0, 0),
            test: CountRow::new(4500, 0, 10706, 10800),
        },
    }
}

pub const TABLE_NUM_IDS: u32 = 1800;
pub const TABLE_FRAMES_PER_VIDEO: u32 = 5;

/// Largest-remainder rounding of `weights · scale` so the integer parts sum to
/// `round(Σ weights · scale)`. Ties go to the earlier entry.
pub fn largest_remainder(weights: &[usize], scale: f64) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|&w| w as f64 * scale).collect();
    let target = exact.iter().sum::<f64>().round() as usize;
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut leftover = target.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if leftover == 0 {
            break;
        }
        if exact[i] > out[i] as f64 {
            out[i] += 1;
            leftover -= 1;
        }
    }
    out
}

/// The full-size table scaled to `num_ids` identities with `frames_per_video`
/// frames. Live cells are whole identities (the full-size 600/300/900 identity
/// partition, scaled); attack cells are scaled by `(num_ids · frames) /
/// (1800 · 5)` with largest-remainder rounding over the attack cells.
pub fn scaled_counts(protocol: ProtocolId, num_ids: u32, frames_per_video: u32) -> CountTable {
    let table = table_counts(protocol);
    let frames = frames_per_video as usize;
    let live_ids: Vec<usize> =
        SplitPart::ALL.iter().map(|&p| table.row(p).live / TABLE_FRAMES_PER_VIDEO as usize).collect();
    let pools = largest_remainder(&live_ids, num_ids as f64 / TABLE_NUM_IDS as f64);
    let scale = (num_ids as f64 * frames as f64) / (TABLE_NUM_IDS as f64 * TABLE_FRAMES_PER_VIDEO as f64);
    let cells: Vec<_> = table.cells().filter(|c| c.1 != AttackKind::Live).collect();
    let weights: Vec<usize> = cells.iter().map(|c| c.2).collect();
    let scaled = largest_remainder(&weights, scale);
    let mut out = CountTable::default();
    for (part, ids) in SplitPart::ALL.into_iter().zip(pools) {
        out.row_mut(part).live = ids * frames;
    }
    for ((part, kind, _), n) in cells.into_iter().zip(scaled) {
        *out.row_mut(part).get_mut(kind) = n;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub protocol_id: ProtocolId,
    pub train: Vec<String>,
    pub eval: Vec<String>,
    pub test: Vec<String>,
    pub counts: CountTable,
}

impl ProtocolSplit {
    pub fn part(&self, part: SplitPart) -> &[String] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Eval => &self.eval,
            SplitPart::Test => &self.test,
        }
    }

    fn part_mut(&mut self, part: SplitPart) -> &mut Vec<String> {
        match part {
            SplitPart::Train => &mut self.train,
            SplitPart::Eval => &mut self.eval,
            SplitPart::Test => &mut self.test,
        }
    }

    /// Recounts the split against the manifest and checks every structural
    /// invariant: disjoint parts, matching count table, held-out families.
    pub fn validate(&self, manifest: &Manifest) -> Result<()> {
        let index = manifest.index();
        let mut seen = HashSet::new();
        let mut counted = CountTable::default();
        for part in SplitPart::ALL {
            for id in self.part(part) {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Contract(format!("sample `{id}` appears in more than one part")));
                }
                let rec = index.get(id.as_str()).ok_or_else(|| Error::Lookup(id.clone()))?;
                *counted.row_mut(part).get_mut(rec.attack.kind()) += 1;
            }
        }
        if counted != self.counts {
            return Err(Error::Contract("count table does not match the listed samples".into()));
        }
        if let Some(held) = self.protocol_id.held_out() {
            for part in [SplitPart::Train, SplitPart::Eval] {
                for &k in held {
                    if counted.row(part).get(k) != 0 {
                        return Err(Error::Contract(format!("{k} attacks leak into {}", part.as_str())));
                    }
                }
            }
            for k in KINDS {
                if k != AttackKind::Live && !held.contains(&k) && counted.test.get(k) != 0 {
                    return Err(Error::Contract(format!("seen {k} attacks in the test part")));
                }
            }
        }
        Ok(())
    }
}

/// Splits `manifest` into the parts of `protocol` with exactly `target`
/// counts. Without a target, the full-size table is scaled to the manifest.
pub fn split_protocol(manifest: &Manifest, protocol: ProtocolId, target: Option<&CountTable>) -> Result<ProtocolSplit> {
    let cfg = &manifest.generator_config;
    let target = match target {
        Some(t) => *t,
        None => scaled_counts(protocol, manifest.num_ids, cfg.frames_per_video),
    };
    if let Some(held) = protocol.held_out() {
        for part in [SplitPart::Train, SplitPart::Eval] {
            for &k in held {
                if target.row(part).get(k) != 0 {
                    return Err(Error::Contract(format!(
                        "{protocol} holds out {k} attacks but the target asks for some in {}",
                        part.as_str()
                    )));
                }
            }
        }
    }

    let mut identities: Vec<u32> = manifest.records.iter().map(|r| r.identity_id).collect();
    identities.sort_unstable();
    identities.dedup();

    // Each part gets enough whole identities for its live frames; the rest are
    // spread in proportion to the part sizes.
    let frames = cfg.frames_per_video.max(1) as usize;
    let mut pool_sizes: Vec<usize> =
        SplitPart::ALL.iter().map(|&p| target.row(p).live.div_ceil(frames)).collect();
    let needed: usize = pool_sizes.iter().sum();
    if needed > identities.len() {
        return Err(Error::Sizing(format!(
            "{protocol}/live: {needed} identities needed for the live frames, manifest has {}",
            identities.len()
        )));
    }
    let weights: Vec<usize> = SplitPart::ALL.iter().map(|&p| target.row(p).total()).collect();
    let weight_sum: usize = weights.iter().sum();
    let spare = identities.len() - needed;
    if weight_sum > 0 && spare > 0 {
        for (n, extra) in pool_sizes.iter_mut().zip(largest_remainder(&weights, spare as f64 / weight_sum as f64)) {
            *n += extra;
        }
    }
    let mut pool_of: BTreeMap<u32, SplitPart> = BTreeMap::new();
    let mut cursor = 0;
    for (part, &n) in SplitPart::ALL.iter().zip(&pool_sizes) {
        for &id in &identities[cursor..cursor + n] {
            pool_of.insert(id, *part);
        }
        cursor += n;
    }

    let mut split = ProtocolSplit {
        protocol_id: protocol,
        train: Vec::new(),
        eval: Vec::new(),
        test: Vec::new(),
        counts: CountTable::default(),
    };
    for part in SplitPart::ALL {
        for kind in KINDS {
            let want = target.row(part).get(kind);
            if want == 0 {
                continue;
            }
            let mut candidates: Vec<&SampleDescriptor> = manifest
                .records
                .iter()
                .filter(|r| r.attack.kind() == kind && pool_of.get(&r.identity_id) == Some(&part))
                .collect();
            if candidates.len() < want {
                return Err(Error::Sizing(format!(
                    "{protocol}/{}/{kind}: need {want} records, the identity pool holds {}",
                    part.as_str(),
                    candidates.len()
                )));
            }
            if kind == AttackKind::Live {
                candidates.sort_by_key(|r| (r.identity_id, r.frame));
            } else {
                // Spread attacks over identities and methods before reusing frames.
                candidates.sort_by_key(|r| (r.frame, r.identity_id, r.attack.method()));
            }
            split.part_mut(part).extend(candidates[..want].iter().map(|r| r.sample_id.clone()));
            *split.counts.row_mut(part).get_mut(kind) = want;
        }
    }
    Ok(split)
}
