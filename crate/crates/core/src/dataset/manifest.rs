use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::synth::{mix_seed, sample_id, video_id, SynthConfig};
use super::types::{AttackMethod, AttackType, Ethnicity, Label, SampleDescriptor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<SampleDescriptor>,
    pub num_ids: u32,
    pub generator_config: SynthConfig,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index(&self) -> BTreeMap<&str, &SampleDescriptor> {
        self.records.iter().map(|r| (r.sample_id.as_str(), r)).collect()
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.sample_id.as_str()) {
                return Err(Error::Contract(format!("duplicate sample_id `{}`", r.sample_id)));
            }
        }
        Ok(())
    }

    /// Concatenates two manifests. The declared method set becomes the union,
    /// so identities drawn from a narrower generator show up as violations.
    pub fn merge(&self, other: &Manifest) -> Manifest {
        let mut methods: BTreeSet<AttackMethod> = self.generator_config.methods.iter().copied().collect();
        methods.extend(other.generator_config.methods.iter().copied());
        let mut generator_config = self.generator_config.clone();
        generator_config.methods = methods.into_iter().collect();
        generator_config.num_ids = self.num_ids.max(other.num_ids);
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Manifest { records, num_ids: generator_config.num_ids, generator_config }
    }
}

/// One record per identity × method × frame, identity-major.
pub fn build_manifest(config: &SynthConfig) -> Result<Manifest> {
    config.validate()?;
    let per_id = config.methods.len() * config.frames_per_video as usize;
    let mut records = Vec::with_capacity(config.num_ids as usize * per_id);
    for identity_id in 0..config.num_ids {
        let ethnicity = Ethnicity::of_identity(identity_id);
        for &method in &config.methods {
            let attack = AttackType::from(method);
            for frame in 0..config.frames_per_video {
                records.push(SampleDescriptor {
                    sample_id: sample_id(identity_id, method, frame),
                    video_id: video_id(identity_id, method),
                    frame,
                    identity_id,
                    ethnicity,
                    attack,
                    label: Label::of(attack),
                    seed: mix_seed(&[config.seed, identity_id as u64, method.index() as u64, frame as u64]),
                });
            }
        }
    }
    Ok(Manifest { records, num_ids: config.num_ids, generator_config: config.clone() })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub ok: bool,
    /// `(identity, declared methods with no record)`.
    pub violations: Vec<(u32, BTreeSet<AttackMethod>)>,
    /// `(identity, methods present but not declared)`.
    pub unexpected: Vec<(u32, BTreeSet<AttackMethod>)>,
    /// Set when the manifest has no records at all.
    pub empty: bool,
}

pub fn verify_id_consistency(manifest: &Manifest) -> ConsistencyReport {
    if manifest.records.is_empty() {
        log::warn!("id-consistency check on an empty manifest");
        return ConsistencyReport { ok: true, violations: vec![], unexpected: vec![], empty: true };
    }
    let declared: BTreeSet<AttackMethod> = manifest.generator_config.methods.iter().copied().collect();
    let mut per_id: BTreeMap<u32, BTreeSet<AttackMethod>> = BTreeMap::new();
    for r in &manifest.records {
        per_id.entry(r.identity_id).or_default().insert(r.attack.method());
    }
    let mut violations = Vec::new();
    let mut unexpected = Vec::new();
    for (&id, present) in &per_id {
        let missing: BTreeSet<_> = declared.difference(present).copied().collect();
        if !missing.is_empty() {
            violations.push((id, missing));
        }
        let extra: BTreeSet<_> = present.difference(&declared).copied().collect();
        if !extra.is_empty() {
            unexpected.push((id, extra));
        }
    }
    ConsistencyReport { ok: violations.is_empty() && unexpected.is_empty(), violations, unexpected, empty: false }
}
