//! Soundness and upload-authorisation checks over finished traces, and
//! classification of violations into attack patterns.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Serialize, Serializer};

use crate::adversary::Capability;
use crate::worldmodel::{
    within_14_days, Actor, Agent, DayStamp, EpochStamp, EventKind, MsgDigest, PayloadTag, PhoneId, PlaceTag, Trace,
    TraceEvent, TraceSchemaError,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Robert,
    Dp3t,
    Cwa,
}

impl Protocol {
    pub fn label(self) -> &'static str {
        match self {
            Protocol::Robert => "robert",
            Protocol::Dp3t => "dp3t",
            Protocol::Cwa => "cwa",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Property {
    Soundness,
    UploadAuthGaen,
    UploadAuthRobert,
}

macro_rules! patterns {
    ($($id:ident),* $(,)?) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum PatternId { $($id),* }

        impl PatternId {
            pub const ALL: [PatternId; 27] = [$(PatternId::$id),*];

            pub fn label(self) -> &'static str {
                match self { $(PatternId::$id => stringify!($id)),* }
            }
        }
    };
}

patterns!(A1, A2, A3, A4, B1, B2, B3, C1, C2, X1, X2, X3, X4, X5, X6, X7, Y1, Y2, Y3, Y4, Y5, Y6, Y7, Z1, Z2, Z3, Z4);

impl PatternId {
    pub fn from_label(label: &str) -> Option<PatternId> {
        Self::ALL.into_iter().find(|p| p.label() == label)
    }

    pub fn property(self) -> Property {
        use PatternId::*;
        match self {
            A1 | A2 | A3 | A4 => Property::UploadAuthRobert,
            B1 | B2 | B3 | C1 | C2 => Property::UploadAuthGaen,
            _ => Property::Soundness,
        }
    }
}

impl fmt::Display for PatternId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for PatternId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

/// Subset of the soundness conditions a–e, one bit each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Conditions(pub u8);

impl Conditions {
    pub const A: u8 = 1;
    pub const B: u8 = 2;
    pub const C: u8 = 4;
    pub const D: u8 = 8;
    pub const E: u8 = 16;
    const NAMES: [char; 5] = ['a', 'b', 'c', 'd', 'e'];

    pub fn empty() -> Self {
        Conditions(0)
    }

    pub fn only(bits: u8) -> Self {
        Conditions(bits)
    }

    pub fn contains(self, bit: u8) -> bool {
        self.0 & bit != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn names(self) -> Vec<char> {
        (0..5).filter(|i| self.0 & (1 << i) != 0).map(|i| Self::NAMES[i]).collect()
    }
}

impl fmt::Display for Conditions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self
            .names()
            .iter()
            .enumerate()
            .flat_map(|(i, c)| if i == 0 { [None, Some(*c)] } else { [Some(','), Some(*c)] })
            .flatten()
            .collect();
        f.write_str(&s)
    }
}

impl Serialize for Conditions {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let names: Vec<String> = self.names().into_iter().map(String::from).collect();
        names.serialize(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub property: Property,
    pub witness: TraceEvent,
    pub failed_conditions: Conditions,
    /// Closest infected candidate (soundness), key owner (GAEN) or uploader (ROBERT).
    pub binding: Option<PhoneId>,
    pub pattern: Option<PatternId>,
    pub evidence: Vec<TraceEvent>,
}

/// Indexes over one trace.
struct Index<'a> {
    protocol: Protocol,
    phones: BTreeSet<PhoneId>,
    at_epoch: BTreeMap<(PhoneId, EpochStamp), BTreeSet<PlaceTag>>,
    at_day: BTreeMap<(PhoneId, DayStamp), BTreeSet<PlaceTag>>,
    diagnoses: BTreeMap<PhoneId, Vec<(DayStamp, DayStamp)>>,
    key_owners: BTreeMap<MsgDigest, BTreeSet<PhoneId>>,
    first_positive: BTreeMap<PhoneId, u64>,
    released: BTreeSet<MsgDigest>,
    corrupts: Vec<&'a TraceEvent>,
    adv_writes: Vec<&'a TraceEvent>,
}

fn phones_of(kind: &EventKind) -> Vec<PhoneId> {
    match kind {
        EventKind::IsAt { phone, .. }
        | EventKind::ClaimAtRisk { phone, .. }
        | EventKind::HaClaimInfected { phone, .. }
        | EventKind::PhoneInit { phone, .. }
        | EventKind::CreateKey { phone, .. }
        | EventKind::MarkPositive { phone, .. }
        | EventKind::TestPositive { phone, .. } => alloc::vec![*phone],
        EventKind::BleWrite {
            actor: Actor::Phone(p), ..
        }
        | EventKind::BleRead {
            actor: Actor::Phone(p), ..
        } => alloc::vec![*p],
        EventKind::UploadAccepted { uploader, .. } | EventKind::KeyReleased { uploader, .. } => alloc::vec![*uploader],
        EventKind::Corrupt { target, subject, .. } => {
            let mut v = Vec::new();
            if let Agent::Phone(p) = target {
                v.push(*p);
            }
            v.extend(subject.iter().copied());
            v
        }
        _ => Vec::new(),
    }
}

impl<'a> Index<'a> {
    fn build(trace: &'a Trace, protocol: Protocol) -> Self {
        let mut ix = Index {
            protocol,
            phones: BTreeSet::new(),
            at_epoch: BTreeMap::new(),
            at_day: BTreeMap::new(),
            diagnoses: BTreeMap::new(),
            key_owners: BTreeMap::new(),
            first_positive: BTreeMap::new(),
            released: BTreeSet::new(),
            corrupts: Vec::new(),
            adv_writes: Vec::new(),
        };
        for ev in trace.iter() {
            ix.phones.extend(phones_of(&ev.kind));
            match &ev.kind {
                EventKind::IsAt { phone, place } => {
                    ix.at_epoch.entry((*phone, ev.epoch)).or_default().insert(*place);
                    ix.at_day.entry((*phone, ev.day)).or_default().insert(*place);
                }
                EventKind::HaClaimInfected {
                    phone,
                    day_contag,
                    day_test,
                } => ix.diagnoses.entry(*phone).or_default().push((*day_contag, *day_test)),
                EventKind::CreateKey { phone, key, .. } => {
                    ix.key_owners.entry(*key).or_default().insert(*phone);
                }
                EventKind::TestPositive { phone, .. } => {
                    ix.first_positive.entry(*phone).or_insert(ev.seq);
                }
                EventKind::KeyReleased { key, .. } => {
                    ix.released.insert(*key);
                }
                EventKind::Corrupt { .. } => ix.corrupts.push(ev),
                EventKind::BleWrite {
                    actor: Actor::Adversary, ..
                } => ix.adv_writes.push(ev),
                _ => {}
            }
        }
        ix
    }

    fn positive_before(&self, phone: PhoneId, seq: u64) -> bool {
        self.first_positive.get(&phone).is_some_and(|s| *s < seq)
    }

    fn is_positive(&self, phone: PhoneId) -> bool {
        self.first_positive.contains_key(&phone)
    }

    fn proximate(&self, r: PhoneId, i: PhoneId, day: DayStamp, epoch: EpochStamp) -> bool {
        let (a, b) = if self.protocol == Protocol::Dp3t {
            (self.at_day.get(&(r, day)), self.at_day.get(&(i, day)))
        } else {
            (self.at_epoch.get(&(r, epoch)), self.at_epoch.get(&(i, epoch)))
        };
        match (a, b) {
            (Some(a), Some(b)) => a.intersection(b).next().is_some(),
            _ => false,
        }
    }

    /// Failed conditions for the best binding of infected phone `i`.
    fn candidate_mask(&self, r: PhoneId, day_close: DayStamp, epoch_close: EpochStamp, i: PhoneId) -> Conditions {
        let mut base = 0;
        if !self.proximate(r, i, day_close, epoch_close) {
            base |= Conditions::C;
        }
        if r == i {
            base |= Conditions::E;
        }
        let diag = match self.diagnoses.get(&i) {
            Some(d) if !d.is_empty() => d,
            _ => return Conditions(base | Conditions::A | Conditions::B | Conditions::D),
        };
        diag.iter()
            .map(|(contag, test)| {
                let mut m = base;
                if !within_14_days(*contag, *test) {
                    m |= Conditions::B;
                }
                if !(*contag <= day_close && day_close < *test) {
                    m |= Conditions::D;
                }
                Conditions(m)
            })
            .min_by_key(|c| (c.count(), c.0))
            .unwrap_or_default()
    }

    fn corrupts_where(&self, f: impl Fn(&Agent, Capability, PayloadTag, &MsgDigest, Option<PhoneId>) -> bool) -> Vec<TraceEvent> {
        self.corrupts
            .iter()
            .filter(|ev| match &ev.kind {
                EventKind::Corrupt {
                    target,
                    capability,
                    payload,
                    tag,
                    subject,
                } => f(target, *capability, *tag, payload, *subject),
                _ => false,
            })
            .map(|ev| (*ev).clone())
            .collect()
    }

    fn adv_writes(&self) -> Vec<TraceEvent> {
        self.adv_writes.iter().map(|e| (*e).clone()).collect()
    }
}

/// Checks soundness of every at-risk claim.
pub fn check_soundness(trace: &Trace, protocol: Protocol) -> Result<Vec<Violation>, TraceSchemaError> {
    trace.validate()?;
    let ix = Index::build(trace, protocol);
    Ok(soundness_with(&ix, trace))
}

fn soundness_with(ix: &Index<'_>, trace: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    for ev in trace.iter() {
        let EventKind::ClaimAtRisk {
            phone,
            day_close,
            epoch_close,
            ..
        } = &ev.kind
        else {
            continue;
        };
        let best = ix
            .phones
            .iter()
            .map(|i| (ix.candidate_mask(*phone, *day_close, *epoch_close, *i), *i))
            .min_by_key(|(m, i)| (m.count(), m.0, *i));
        let (mask, cand) = match best {
            Some((m, i)) => (m, Some(i)),
            None => (Conditions(Conditions::A | Conditions::B | Conditions::C | Conditions::D), None),
        };
        if mask.is_empty() {
            continue;
        }
        out.push(Violation {
            property: Property::Soundness,
            witness: ev.clone(),
            failed_conditions: mask,
            binding: cand,
            pattern: None,
            evidence: Vec::new(),
        });
    }
    out
}

/// Checks that released keys and accepted ROBERT uploads come from diagnosed phones.
pub fn check_upload_auth(trace: &Trace, protocol: Protocol) -> Result<Vec<Violation>, TraceSchemaError> {
    trace.validate()?;
    let ix = Index::build(trace, protocol);
    Ok(upload_with(&ix, trace))
}

fn upload_with(ix: &Index<'_>, trace: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    for ev in trace.iter() {
        let (property, binding) = match (&ev.kind, ix.protocol) {
            (EventKind::UploadAccepted { uploader, .. }, Protocol::Robert) => {
                if ix.positive_before(*uploader, ev.seq) {
                    continue;
                }
                (Property::UploadAuthRobert, *uploader)
            }
            (EventKind::KeyReleased { key, .. }, Protocol::Dp3t | Protocol::Cwa) => {
                let Some(owners) = ix.key_owners.get(key) else {
                    continue;
                };
                match owners.iter().find(|o| !ix.positive_before(**o, ev.seq)) {
                    Some(o) => (Property::UploadAuthGaen, *o),
                    None => continue,
                }
            }
            _ => continue,
        };
        out.push(Violation {
            property,
            witness: ev.clone(),
            failed_conditions: Conditions::empty(),
            binding: Some(binding),
            pattern: None,
            evidence: Vec::new(),
        });
    }
    out
}

/// Runs both checks and classifies every violation.
pub fn check(trace: &Trace, protocol: Protocol) -> Result<Vec<Violation>, TraceSchemaError> {
    trace.validate()?;
    let ix = Index::build(trace, protocol);
    let mut v = upload_with(&ix, trace);
    v.extend(soundness_with(&ix, trace));
    v.sort_by_key(|x| x.witness.seq);
    for x in &mut v {
        if let Some((p, ev)) = classify_with(&ix, x) {
            x.pattern = Some(p);
            x.evidence = ev;
        }
    }
    Ok(v)
}

/// Classifies one violation against the pattern predicates; `None` means unclassified.
pub fn classify(violation: &Violation, trace: &Trace, protocol: Protocol) -> Option<PatternId> {
    let ix = Index::build(trace, protocol);
    classify_with(&ix, violation).map(|(p, _)| p)
}

fn some(v: Vec<TraceEvent>) -> Option<Vec<TraceEvent>> {
    if v.is_empty() {
        None
    } else {
        Some(v)
    }
}

fn classify_with(ix: &Index<'_>, v: &Violation) -> Option<(PatternId, Vec<TraceEvent>)> {
    use PatternId::*;
    let w = &v.witness.kind;
    match (v.property, ix.protocol) {
        (Property::UploadAuthRobert, _) => {
            let EventKind::UploadAccepted { token, token_issuer, .. } = w else {
                return None;
            };
            let token = *token;
            let issuer = *token_issuer;
            if let Some(e) = some(ix.corrupts_where(|t, c, _, p, _| {
                matches!(t, Agent::Backend(_)) && c == Capability::CorruptQRList && *p == token
            })) {
                return Some((A2, e));
            }
            if let Some(e) = some(ix.corrupts_where(|t, c, _, p, _| {
                matches!(t, Agent::Backend(_)) && c == Capability::CorruptBReceive && *p == token
            })) {
                return Some((A3, e));
            }
            if let Some(e) = some(ix.corrupts_where(|t, c, _, p, _| {
                matches!(t, Agent::Phone(o) if ix.is_positive(*o)) && c == Capability::CorruptPhoneReceive && *p == token
            })) {
                return Some((A1, e));
            }
            if let Some(e) = some(ix.corrupts_where(|t, c, g, _, _| {
                *t == Agent::Backend(issuer) && c == Capability::CorruptBState && g == PayloadTag::SigningKey
            })) {
                return Some((A4, e));
            }
            None
        }
        (Property::UploadAuthGaen, proto) => {
            let EventKind::KeyReleased { uploader, .. } = w else {
                return None;
            };
            let owner = v.binding?;
            let uploader = *uploader;
            if proto == Protocol::Cwa {
                if owner == uploader {
                    let e = some(ix.corrupts_where(|t, _, g, _, _| {
                        matches!(t, Agent::Phone(_) | Agent::VerificationServer(_))
                            && matches!(g, PayloadTag::Guid | PayloadTag::Tan | PayloadTag::TestResult | PayloadTag::TanCheck)
                    }))?;
                    return Some((C2, e));
                }
                let e = some(ix.corrupts_where(|t, c, _, _, _| {
                    *t == Agent::Phone(owner) && c == Capability::CorruptPhoneKey
                }))?;
                return Some((C1, e));
            }
            if owner == uploader {
                let e = some(ix.corrupts_where(|t, _, _, _, s| {
                    matches!(t, Agent::HealthAuthority(_)) && s.is_none_or(|s| s == owner)
                }))?;
                return Some((B2, e));
            }
            if let Some(e) = some(ix.corrupts_where(|t, c, _, _, _| {
                *t == Agent::Phone(uploader) && c == Capability::CorruptPhoneTestDBWrite
            })) {
                return Some((B3, e));
            }
            let e = some(ix.corrupts_where(|t, c, _, _, _| {
                *t == Agent::Phone(owner) && c == Capability::CorruptPhoneKey
            }))?;
            Some((B1, e))
        }
        (Property::Soundness, Protocol::Robert) => classify_robert_soundness(ix, v),
        (Property::Soundness, _) => classify_gaen_soundness(ix, v),
    }
}

fn classify_robert_soundness(ix: &Index<'_>, v: &Violation) -> Option<(PatternId, Vec<TraceEvent>)> {
    use PatternId::*;
    let EventKind::ClaimAtRisk { phone: r, .. } = v.witness.kind else {
        return None;
    };
    let m = v.failed_conditions;
    if let Some(e) = some(ix.corrupts_where(|_, c, g, _, s| {
        c == Capability::CorruptBSend && g == PayloadTag::StatusResponse && s == Some(r)
    })) {
        return Some((X5, e));
    }
    if let Some(e) = some(ix.corrupts_where(|t, c, g, _, _| {
        matches!(t, Agent::Phone(_)) && c == Capability::CorruptPhoneSend && g == PayloadTag::Registration
    })) {
        return Some((X7, e));
    }
    let positive_phone_corrupt = || {
        ix.corrupts_where(|t, _, _, _, _| matches!(t, Agent::Phone(p) if ix.is_positive(*p)))
    };
    if m == Conditions::only(Conditions::E) {
        let mut e = positive_phone_corrupt();
        e.extend(ix.adv_writes());
        return Some((X1, e));
    }
    if m == Conditions::only(Conditions::D) {
        return Some((X2, positive_phone_corrupt()));
    }
    if let Some(e) = some(ix.corrupts_where(|t, c, g, _, _| {
        matches!(t, Agent::Backend(_)) && c == Capability::CorruptBState && g == PayloadTag::ServerState
    })) {
        return Some((X6, e));
    }
    if ix.adv_writes.is_empty() {
        if let Some(e) = some(positive_phone_corrupt()) {
            return Some((X4, e));
        }
    }
    if m.contains(Conditions::C) {
        return some(ix.adv_writes()).map(|e| (X3, e));
    }
    None
}

fn classify_gaen_soundness(ix: &Index<'_>, v: &Violation) -> Option<(PatternId, Vec<TraceEvent>)> {
    use PatternId::*;
    let EventKind::ClaimAtRisk { matched_key, .. } = v.witness.kind else {
        return None;
    };
    let m = v.failed_conditions;
    let key = matched_key?;
    let owners = ix.key_owners.get(&key);
    let owner = owners.and_then(|o| o.iter().next().copied());
    let released = ix.released.contains(&key);
    let backend_state = ix.corrupts_where(|t, c, _, _, _| matches!(t, Agent::Backend(_)) && c == Capability::CorruptBState);
    let key_leak = |o: PhoneId| ix.corrupts_where(|t, c, _, _, _| *t == Agent::Phone(o) && c == Capability::CorruptPhoneKey);

    if ix.protocol == Protocol::Cwa {
        if !released && !backend_state.is_empty() {
            return Some((Z4, backend_state));
        }
        match owner {
            None if released => return Some((Z2, Vec::new())),
            Some(o) if !ix.is_positive(o) => return some(key_leak(o)).map(|e| (Z3, e)),
            _ => {}
        }
        if m.contains(Conditions::C) {
            return some(ix.adv_writes()).map(|e| (Z1, e));
        }
        return None;
    }

    if !released && !backend_state.is_empty() {
        return Some((if owner.is_none() { Y7 } else { Y6 }, backend_state));
    }
    let Some(o) = owner else {
        return released.then(|| (Y4, ix.corrupts_where(|t, _, _, _, _| matches!(t, Agent::HealthAuthority(_)))));
    };
    if !ix.is_positive(o) {
        return some(key_leak(o)).map(|e| (Y5, e));
    }
    if m.contains(Conditions::D) && !m.contains(Conditions::C) {
        return some(ix.corrupts_where(|t, _, _, _, _| *t == Agent::Phone(o))).map(|e| (Y1, e));
    }
    if !ix.adv_writes.is_empty() && m.contains(Conditions::C) {
        let leak = key_leak(o);
        if !leak.is_empty() {
            let mut e = leak;
            e.extend(ix.adv_writes());
            return Some((Y2, e));
        }
        return Some((Y3, ix.adv_writes()));
    }
    None
}

/// Plain nested-loop evaluation of both properties, kept free of the indexes above.
pub mod naive {
    use super::*;

    fn all_phones(trace: &Trace) -> Vec<PhoneId> {
        let mut v: Vec<PhoneId> = trace.iter().flat_map(|e| phones_of(&e.kind)).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Sequence numbers of at-risk claims with no justifying binding.
    pub fn unsound_claims(trace: &Trace, protocol: Protocol) -> Vec<u64> {
        let evs = trace.events();
        let phones = all_phones(trace);
        let mut out = Vec::new();
        for claim in evs {
            let EventKind::ClaimAtRisk {
                phone: r,
                day_close,
                epoch_close,
                ..
            } = claim.kind
            else {
                continue;
            };
            let same_time = |x: &TraceEvent| {
                if protocol == Protocol::Dp3t {
                    x.day == day_close
                } else {
                    x.epoch == epoch_close
                }
            };
            let mut justified = false;
            for &i in &phones {
                for h in evs {
                    let EventKind::HaClaimInfected {
                        phone,
                        day_contag,
                        day_test,
                    } = h.kind
                    else {
                        continue;
                    };
                    if phone != i || i == r {
                        continue;
                    }
                    if !(day_contag <= day_close && day_close < day_test) {
                        continue;
                    }
                    if day_test < day_contag || day_test.0 - day_contag.0 > 14 {
                        continue;
                    }
                    for x in evs {
                        let EventKind::IsAt { phone: px, place: qx } = x.kind else {
                            continue;
                        };
                        if px != r || !same_time(x) {
                            continue;
                        }
                        for y in evs {
                            if let EventKind::IsAt { phone: py, place: qy } = y.kind {
                                if py == i && qy == qx && same_time(y) {
                                    justified = true;
                                }
                            }
                        }
                    }
                }
            }
            if !justified {
                out.push(claim.seq);
            }
        }
        out
    }

    /// Sequence numbers of releases or accepted uploads lacking a prior positive test.
    pub fn unauthorised_uploads(trace: &Trace, protocol: Protocol) -> Vec<u64> {
        let evs = trace.events();
        let tested_before = |p: PhoneId, seq: u64| {
            evs.iter()
                .any(|e| e.seq < seq && matches!(e.kind, EventKind::TestPositive { phone, .. } if phone == p))
        };
        let mut out = Vec::new();
        for ev in evs {
            match (&ev.kind, protocol) {
                (EventKind::UploadAccepted { uploader, .. }, Protocol::Robert) => {
                    if !tested_before(*uploader, ev.seq) {
                        out.push(ev.seq);
                    }
                }
                (EventKind::KeyReleased { key, .. }, Protocol::Dp3t | Protocol::Cwa) => {
                    let bad = evs.iter().any(|c| match &c.kind {
                        EventKind::CreateKey { phone, key: k, .. } => k == key && !tested_before(*phone, ev.seq),
                        _ => false,
                    });
                    if bad {
                        out.push(ev.seq);
                    }
                }
                _ => {}
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::{Country, TimeConfig, World};
    use proptest::prelude::*;

    fn claim(w: &mut World, r: u32, epoch: u64) {
        let cfg = *w.config();
        w.emit(EventKind::ClaimAtRisk {
            phone: PhoneId(r),
            day_close: cfg.day_of(EpochStamp(epoch)),
            epoch_close: EpochStamp(epoch),
            matched_key: None,
        });
    }

    fn diag(w: &mut World, p: u32, a: u64, b: u64) {
        w.emit(EventKind::HaClaimInfected {
            phone: PhoneId(p),
            day_contag: DayStamp(a),
            day_test: DayStamp(b),
        });
    }

    fn at(w: &mut World, p: u32, q: u32) {
        w.emit(EventKind::IsAt {
            phone: PhoneId(p),
            place: PlaceTag(q),
        });
    }

    #[test]
    fn pattern_ids_are_closed() {
        assert_eq!(PatternId::ALL.len(), 27);
        for p in PatternId::ALL {
            assert_eq!(PatternId::from_label(p.label()), Some(p));
        }
        assert_eq!(PatternId::from_label("X8"), None);
    }

    #[test]
    fn empty_trace_is_clean() {
        let t = Trace::new();
        for p in [Protocol::Robert, Protocol::Dp3t, Protocol::Cwa] {
            assert!(check(&t, p).unwrap().is_empty());
        }
    }

    #[test]
    fn justified_claim() {
        let mut w = World::new(TimeConfig::default());
        at(&mut w, 1, 0);
        at(&mut w, 2, 0);
        diag(&mut w, 2, 0, 1);
        claim(&mut w, 1, 0);
        assert!(check_soundness(w.trace(), Protocol::Robert).unwrap().is_empty());
    }

    #[test]
    fn relay_fails_c() {
        let mut w = World::new(TimeConfig::default());
        at(&mut w, 1, 0);
        at(&mut w, 2, 1);
        diag(&mut w, 2, 0, 1);
        claim(&mut w, 1, 0);
        let v = check_soundness(w.trace(), Protocol::Robert).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].failed_conditions, Conditions::only(Conditions::C));
        assert_eq!(v[0].binding, Some(PhoneId(2)));
    }

    #[test]
    fn day_bounds_follow_encoding() {
        let mut w = World::new(TimeConfig::default());
        at(&mut w, 1, 0);
        at(&mut w, 2, 0);
        // Contact on day 0, test day 0: the upper bound is strict.
        diag(&mut w, 2, 0, 0);
        claim(&mut w, 1, 0);
        let v = check_soundness(w.trace(), Protocol::Robert).unwrap();
        assert_eq!(v[0].failed_conditions, Conditions::only(Conditions::D));

        let mut w = World::new(TimeConfig::default());
        at(&mut w, 1, 0);
        at(&mut w, 2, 0);
        diag(&mut w, 2, 0, 15);
        claim(&mut w, 1, 0);
        let v = check_soundness(w.trace(), Protocol::Robert).unwrap();
        assert_eq!(v[0].failed_conditions, Conditions::only(Conditions::B));
    }

    #[test]
    fn reflection_fails_e() {
        let mut w = World::new(TimeConfig::default());
        at(&mut w, 1, 0);
        diag(&mut w, 1, 0, 1);
        claim(&mut w, 1, 0);
        let v = check_soundness(w.trace(), Protocol::Robert).unwrap();
        assert_eq!(v[0].failed_conditions, Conditions::only(Conditions::E));
    }

    #[test]
    fn dp3t_proximity_is_per_day() {
        let mut w = World::new(TimeConfig::default());
        at(&mut w, 2, 0);
        w.advance(3000);
        at(&mut w, 1, 0);
        diag(&mut w, 2, 0, 1);
        claim(&mut w, 1, 5);
        assert!(check_soundness(w.trace(), Protocol::Dp3t).unwrap().is_empty());
        assert_eq!(check_soundness(w.trace(), Protocol::Cwa).unwrap().len(), 1);
    }

    #[test]
    fn injected_witness_removes_violation() {
        let run = |inject: bool| {
            let mut w = World::new(TimeConfig::default());
            at(&mut w, 1, 0);
            if inject {
                at(&mut w, 9, 0);
                diag(&mut w, 9, 0, 3);
            }
            claim(&mut w, 1, 0);
            check_soundness(w.trace(), Protocol::Cwa).unwrap().len()
        };
        assert_eq!(run(false), 1);
        assert_eq!(run(true), 0);
    }

    #[test]
    fn upload_auth_needs_prior_positive() {
        let mut w = World::new(TimeConfig::default());
        let k = MsgDigest::of(b"k");
        w.emit(EventKind::CreateKey {
            phone: PhoneId(1),
            day: DayStamp(0),
            key: k,
        });
        w.emit(EventKind::KeyReleased {
            backend: Country::DE,
            key: k,
            uploader: PhoneId(1),
        });
        w.emit(EventKind::TestPositive {
            phone: PhoneId(1),
            authority: Country::DE,
        });
        w.emit(EventKind::KeyReleased {
            backend: Country::FR,
            key: k,
            uploader: PhoneId(1),
        });
        // Adversary keys are outside the property.
        w.emit(EventKind::KeyReleased {
            backend: Country::FR,
            key: MsgDigest::of(b"forged"),
            uploader: PhoneId(1),
        });
        let v = check_upload_auth(w.trace(), Protocol::Cwa).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].binding, Some(PhoneId(1)));
        assert!(check_upload_auth(w.trace(), Protocol::Robert).unwrap().is_empty());
    }

    #[test]
    fn malformed_trace_is_rejected() {
        let mut w = World::new(TimeConfig::default());
        w.advance(10);
        let mut evs = w.trace().events().to_vec();
        evs.reverse();
        let t = Trace::from_events(evs);
        assert!(check(&t, Protocol::Robert).is_err());
    }

    #[test]
    fn conditions_display() {
        assert_eq!(alloc::format!("{}", Conditions(Conditions::A | Conditions::D)), "a,d");
        assert_eq!(alloc::format!("{}", Conditions::empty()), "");
    }

    #[derive(Clone, Debug)]
    enum Op {
        Advance(u64),
        At(u32, u32),
        Diag(u32, u64, u64),
        Claim(u32, u64),
        Key(u32, u8),
        Positive(u32),
        Release(u8, u32),
        Upload(u32),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (1u64..40_000).prop_map(Op::Advance),
            (0u32..4, 0u32..3).prop_map(|(p, q)| Op::At(p, q)),
            (0u32..4, 0u64..3, 0u64..18).prop_map(|(p, a, b)| Op::Diag(p, a, b)),
            (0u32..4, 0u64..3).prop_map(|(p, back)| Op::Claim(p, back)),
            (0u32..4, 0u8..4).prop_map(|(p, k)| Op::Key(p, k)),
            (0u32..4).prop_map(Op::Positive),
            (0u8..5, 0u32..4).prop_map(|(k, u)| Op::Release(k, u)),
            (0u32..4).prop_map(Op::Upload),
        ]
    }

    fn build(ops: &[Op]) -> Trace {
        let mut w = World::new(TimeConfig::default());
        for o in ops {
            match *o {
                Op::Advance(t) => {
                    w.advance(t);
                }
                Op::At(p, q) => at(&mut w, p, q),
                Op::Diag(p, a, b) => diag(&mut w, p, a, b),
                Op::Claim(p, back) => {
                    let e = w.epoch().0.saturating_sub(back);
                    claim(&mut w, p, e)
                }
                Op::Key(p, k) => {
                    let day = w.day();
                    w.emit(EventKind::CreateKey {
                        phone: PhoneId(p),
                        day,
                        key: MsgDigest::of(&[k]),
                    });
                }
                Op::Positive(p) => {
                    w.emit(EventKind::TestPositive {
                        phone: PhoneId(p),
                        authority: Country::FR,
                    });
                }
                Op::Release(k, u) => {
                    w.emit(EventKind::KeyReleased {
                        backend: Country::FR,
                        key: MsgDigest::of(&[k]),
                        uploader: PhoneId(u),
                    });
                }
                Op::Upload(u) => {
                    w.emit(EventKind::UploadAccepted {
                        backend: Country::FR,
                        uploader: PhoneId(u),
                        token: MsgDigest::of(b"t"),
                        token_issuer: Country::FR,
                        records: 1,
                    });
                }
            }
        }
        w.into_trace()
    }

    proptest! {
        #[test]
        fn matches_naive_oracle(ops in proptest::collection::vec(op(), 0..45)) {
            let t = build(&ops);
            for p in [Protocol::Robert, Protocol::Dp3t, Protocol::Cwa] {
                let s: Vec<u64> = check_soundness(&t, p).unwrap().iter().map(|v| v.witness.seq).collect();
                prop_assert_eq!(s, naive::unsound_claims(&t, p));
                let u: Vec<u64> = check_upload_auth(&t, p).unwrap().iter().map(|v| v.witness.seq).collect();
                prop_assert_eq!(u, naive::unauthorised_uploads(&t, p));
            }
        }
    }
}
