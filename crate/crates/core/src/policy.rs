//! Gadget classification and the deduplicating report store.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Policy;
use crate::isa::CodeLoc;
use crate::sanitizers::TagSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GadgetClass {
    UserMds,
    UserCache,
    UserPort,
    MassageMds,
    MassageCache,
    MassagePort,
    SfOob,
}

impl GadgetClass {
    pub const ALL: [GadgetClass; 7] = [
        GadgetClass::UserMds,
        GadgetClass::UserCache,
        GadgetClass::UserPort,
        GadgetClass::MassageMds,
        GadgetClass::MassageCache,
        GadgetClass::MassagePort,
        GadgetClass::SfOob,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GadgetClass::UserMds => "User-MDS",
            GadgetClass::UserCache => "User-Cache",
            GadgetClass::UserPort => "User-Port",
            GadgetClass::MassageMds => "Massage-MDS",
            GadgetClass::MassageCache => "Massage-Cache",
            GadgetClass::MassagePort => "Massage-Port",
            GadgetClass::SfOob => "SF-OOB",
        }
    }

    pub fn policy(self) -> Policy {
        match self {
            GadgetClass::SfOob => Policy::SpecFuzz,
            _ => Policy::Kasper,
        }
    }
}

impl fmt::Display for GadgetClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GadgetClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        GadgetClass::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| format!("unknown gadget class `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Channel {
    Cache,
    Port,
}

fn class_for(massage: bool, channel: Channel) -> GadgetClass {
    match (massage, channel) {
        (false, Channel::Cache) => GadgetClass::UserCache,
        (false, Channel::Port) => GadgetClass::UserPort,
        (true, Channel::Cache) => GadgetClass::MassageCache,
        (true, Channel::Port) => GadgetClass::MassagePort,
    }
}

/// Classes for a secret reaching a transmitter, one per provenance bit.
fn secret_transmit(tags: TagSet, channel: Channel) -> Vec<GadgetClass> {
    let mut out = Vec::new();
    if !tags.intersects(TagSet::SECRET) {
        return out;
    }
    if tags.intersects(TagSet::FROM_USER) {
        out.push(class_for(false, channel));
    }
    if tags.intersects(TagSet::FROM_MASSAGE) {
        out.push(class_for(true, channel));
    }
    out
}

/// A load seen by the taint sinks during simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadEvent {
    pub addr_tags: TagSet,
    pub oob: bool,
    /// Whether MASSAGE-controlled addresses promote (disabled for injection
    /// campaigns, where only the designated input is attacker data).
    pub massage_enabled: bool,
}

/// Value tags a load adds to its destination, and the MDS reports it emits.
///
/// A USER address that is out of bounds, or any MASSAGE address, produces a
/// SECRET carrying the provenance of the rule that fired. An out-of-bounds
/// load that produced no secret yields attacker-indirect data (MASSAGE).
pub fn kasper_on_load(ev: LoadEvent) -> (TagSet, Vec<GadgetClass>) {
    let mut extra = TagSet::EMPTY;
    let mut reports = Vec::new();
    if ev.addr_tags.intersects(TagSet::USER) && ev.oob {
        extra |= TagSet::SECRET | TagSet::FROM_USER;
        reports.push(GadgetClass::UserMds);
    }
    if ev.massage_enabled && ev.addr_tags.intersects(TagSet::MASSAGE) {
        extra |= TagSet::SECRET | TagSet::FROM_MASSAGE;
        reports.push(GadgetClass::MassageMds);
    }
    if ev.oob && ev.massage_enabled && !extra.intersects(TagSet::SECRET) {
        extra |= TagSet::MASSAGE;
    }
    (extra, reports)
}

/// A load or store whose address depends on a secret transmits through the cache.
pub fn kasper_on_addr_use(addr_tags: TagSet) -> Vec<GadgetClass> {
    secret_transmit(addr_tags, Channel::Cache)
}

/// A branch on secret-dependent flags transmits through port contention.
pub fn kasper_on_branch(flags_tags: TagSet) -> Vec<GadgetClass> {
    secret_transmit(flags_tags, Channel::Port)
}

/// Every out-of-bounds access during simulation is a gadget.
pub fn specfuzz_classify(oob: bool) -> Vec<GadgetClass> {
    if oob {
        vec![GadgetClass::SfOob]
    } else {
        Vec::new()
    }
}

/// Deduplication key of a finding.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReportKey {
    pub class: GadgetClass,
    pub loc: CodeLoc,
    /// Mispredicted branch ids, outermost first.
    pub chain: Vec<u32>,
}

impl fmt::Display for ReportKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {} via {}", self.class, self.loc, chain_string(&self.chain))
    }
}

pub fn chain_string(chain: &[u32]) -> String {
    chain.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(">")
}

fn parse_chain(s: &str) -> Option<Vec<u32>> {
    s.split('>').map(|p| p.parse().ok()).collect()
}

/// Details kept for the first occurrence of a finding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDetail {
    pub count: u64,
    pub first_input: String,
    pub access: Option<(u32, u32)>,
}

/// A single finding as produced by a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GadgetReport {
    pub key: ReportKey,
    /// Accessed address and width, when the sink is a memory access.
    pub access: Option<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportStore {
    pub policy: Policy,
    pub records: BTreeMap<ReportKey, ReportDetail>,
}

#[derive(Debug, Error)]
pub enum ReportFileError {
    #[error("missing or unsupported header")]
    BadHeader,
    #[error("line {0}: malformed record")]
    BadRecord(usize),
}

pub const REPORT_HEADER: &str = "# shadowspec-report v1";

impl ReportStore {
    pub fn new(policy: Policy) -> Self {
        ReportStore { policy, records: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Adds the findings of one input. Each distinct key counts once per input.
    pub fn add_run(&mut self, reports: &[GadgetReport], input_id: &str) {
        let mut seen = std::collections::BTreeSet::new();
        for r in reports {
            if !seen.insert(&r.key) {
                continue;
            }
            self.records.entry(r.key.clone()).and_modify(|d| d.count += 1).or_insert_with(|| ReportDetail {
                count: 1,
                first_input: input_id.to_string(),
                access: r.access,
            });
        }
    }

    /// Merges another store; records already present keep their first input.
    pub fn merge(&mut self, other: &ReportStore) {
        for (k, d) in &other.records {
            self.records.entry(k.clone()).and_modify(|e| e.count += d.count).or_insert_with(|| d.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &ReportKey> {
        self.records.keys()
    }

    pub fn to_text(&self) -> String {
        let mut out =
            format!("{REPORT_HEADER}\n# policy {}\n# class\tlocation\tchain\tcount\tfirst-input\n", self.policy);
        for (k, d) in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                k.class,
                k.loc,
                chain_string(&k.chain),
                d.count,
                d.first_input
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<ReportStore, ReportFileError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == REPORT_HEADER => {}
            _ => return Err(ReportFileError::BadHeader),
        }
        let mut policy = None;
        let mut records = BTreeMap::new();
        for (i, line) in lines {
            let n = i + 1;
            if let Some(rest) = line.strip_prefix("# policy ") {
                policy = Some(rest.trim().parse().map_err(|_| ReportFileError::BadRecord(n))?);
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(ReportFileError::BadRecord(n));
            }
            let key = ReportKey {
                class: f[0].parse().map_err(|_| ReportFileError::BadRecord(n))?,
                loc: CodeLoc::parse(f[1]).ok_or(ReportFileError::BadRecord(n))?,
                chain: parse_chain(f[2]).ok_or(ReportFileError::BadRecord(n))?,
            };
            let count = f[3].parse().map_err(|_| ReportFileError::BadRecord(n))?;
            records.insert(key, ReportDetail { count, first_input: f[4].to_string(), access: None });
        }
        Ok(ReportStore { policy: policy.ok_or(ReportFileError::BadHeader)?, records })
    }
}

/// Short stable identifier of an input.
pub fn input_id(input: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(&Sha256::digest(input)[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(addr_tags: TagSet, oob: bool) -> LoadEvent {
        LoadEvent { addr_tags, oob, massage_enabled: true }
    }

    #[test]
    fn user_oob_load_is_user_mds() {
        let (t, r) = kasper_on_load(ev(TagSet::USER, true));
        assert!(t.contains(TagSet::SECRET | TagSet::FROM_USER));
        assert_eq!(r, vec![GadgetClass::UserMds]);
        assert_eq!(kasper_on_addr_use(t), vec![GadgetClass::UserCache]);
    }

    #[test]
    fn massage_address_promotes_in_bounds() {
        let (t, r) = kasper_on_load(ev(TagSet::MASSAGE, false));
        assert!(t.contains(TagSet::SECRET | TagSet::FROM_MASSAGE));
        assert_eq!(r, vec![GadgetClass::MassageMds]);
    }

    #[test]
    fn both_rules_fire_twice() {
        let (_, r) = kasper_on_load(ev(TagSet::USER | TagSet::MASSAGE, true));
        assert_eq!(r, vec![GadgetClass::UserMds, GadgetClass::MassageMds]);
    }

    #[test]
    fn untainted_in_bounds_load_is_silent() {
        assert_eq!(kasper_on_load(ev(TagSet::EMPTY, false)), (TagSet::EMPTY, vec![]));
    }

    #[test]
    fn uncontrolled_oob_load_yields_massage() {
        let (t, r) = kasper_on_load(ev(TagSet::EMPTY, true));
        assert_eq!(t, TagSet::MASSAGE);
        assert!(r.is_empty());
        let (t, _) = kasper_on_load(LoadEvent { massage_enabled: false, ..ev(TagSet::EMPTY, true) });
        assert!(t.is_empty());
    }

    #[test]
    fn branch_needs_secret() {
        assert!(kasper_on_branch(TagSet::USER).is_empty());
        assert_eq!(kasper_on_branch(TagSet::SECRET | TagSet::FROM_MASSAGE), vec![GadgetClass::MassagePort]);
    }

    #[test]
    fn specfuzz_only_oob() {
        assert_eq!(specfuzz_classify(true), vec![GadgetClass::SfOob]);
        assert!(specfuzz_classify(false).is_empty());
    }

    fn report(class: GadgetClass, off: u32, chain: Vec<u32>) -> GadgetReport {
        GadgetReport { key: ReportKey { class, loc: CodeLoc { func: "f".into(), offset: off }, chain }, access: None }
    }

    #[test]
    fn dedupe_counts_inputs_and_separates_chains() {
        let mut store = ReportStore::new(Policy::Kasper);
        for i in 0..100u8 {
            store.add_run(
                &[report(GadgetClass::UserMds, 8, vec![0]), report(GadgetClass::UserMds, 8, vec![0])],
                &input_id(&[i]),
            );
        }
        assert_eq!(store.len(), 1);
        assert_eq!(store.records.values().next().unwrap().count, 100);
        store.add_run(&[report(GadgetClass::UserMds, 8, vec![1, 0])], "x");
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn text_roundtrip_and_empty_header() {
        let empty = ReportStore::new(Policy::SpecFuzz);
        let text = empty.to_text();
        assert!(text.starts_with(REPORT_HEADER));
        assert_eq!(ReportStore::from_text(&text).unwrap(), empty);
        let mut store = ReportStore::new(Policy::Kasper);
        store.add_run(&[report(GadgetClass::MassagePort, 0x1c, vec![2, 0, 5])], "abc");
        let back = ReportStore::from_text(&store.to_text()).unwrap();
        assert_eq!(back.to_text(), store.to_text());
        assert!(ReportStore::from_text("garbage").is_err());
    }
}
