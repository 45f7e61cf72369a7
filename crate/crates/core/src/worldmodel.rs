//! Discretised time, tagged places, the Bluetooth space-time channel and the
//! append-only event trace.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::adversary::Capability;
use crate::cryptokit;

/// Clock position in seconds since the simulation epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Tick(pub u64);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct EpochStamp(pub u64);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct DayStamp(pub u64);

/// Opaque location tag. Equality is the only relation between places.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct PlaceTag(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct PhoneId(pub u32);

/// Country code; one back end, health authority and verification server per country.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Country(pub u8);

impl Country {
    pub const FR: Country = Country(33);
    pub const DE: Country = Country(49);
    pub const IT: Country = Country(39);
}

impl fmt::Display for Country {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Country::FR => f.write_str("FR"),
            Country::DE => f.write_str("DE"),
            Country::IT => f.write_str("IT"),
            Country(cc) => write!(f, "CC{cc}"),
        }
    }
}

impl fmt::Display for PhoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// A party that can be the target of a compromise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Agent {
    Phone(PhoneId),
    Backend(Country),
    VerificationServer(Country),
    HealthAuthority(Country),
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Agent::Phone(p) => write!(f, "{p}"),
            Agent::Backend(cc) => write!(f, "B:{cc}"),
            Agent::VerificationServer(cc) => write!(f, "VS:{cc}"),
            Agent::HealthAuthority(cc) => write!(f, "HA:{cc}"),
        }
    }
}

impl Serialize for Agent {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Who touches the Bluetooth channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Actor {
    Phone(PhoneId),
    Adversary,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Phone(p) => write!(f, "{p}"),
            Actor::Adversary => f.write_str("ADV"),
        }
    }
}

impl Serialize for Actor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// First 16 bytes of SHA-256; stands in for message bytes in the trace.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MsgDigest(pub [u8; 16]);

impl MsgDigest {
    pub fn of(bytes: &[u8]) -> Self {
        let full = cryptokit::hash(bytes);
        let mut out = [0u8; 16];
        out.copy_from_slice(&full[..16]);
        MsgDigest(out)
    }
}

impl fmt::Display for MsgDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for MsgDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{self}")
    }
}

impl Serialize for MsgDigest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// What a compromise revealed or injected, recorded next to the capability label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum PayloadTag {
    DayKey,
    PhoneKeys,
    Witnessed,
    QrCode,
    Tan,
    Guid,
    AuthCode,
    TestDb,
    ServerState,
    IdTable,
    FederationKey,
    SigningKey,
    Upload,
    StatusResponse,
    Registration,
    TestResult,
    TanCheck,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "args")]
pub enum EventKind {
    IsAt {
        phone: PhoneId,
        place: PlaceTag,
    },
    Day {
        day: DayStamp,
    },
    Epoch {
        epoch: EpochStamp,
    },
    #[serde(rename = "BLEwr")]
    BleWrite {
        actor: Actor,
        place: PlaceTag,
        msg: MsgDigest,
    },
    #[serde(rename = "BLErd")]
    BleRead {
        actor: Actor,
        place: PlaceTag,
        msg: MsgDigest,
    },
    /// Logged by an honest phone when it tells its user they were at risk.
    #[serde(rename = "PClaimAtRisk")]
    ClaimAtRisk {
        phone: PhoneId,
        day_close: DayStamp,
        epoch_close: EpochStamp,
        /// Released key that produced the match (GAEN protocols only).
        matched_key: Option<MsgDigest>,
    },
    #[serde(rename = "HAClaimInfected")]
    HaClaimInfected {
        phone: PhoneId,
        day_contag: DayStamp,
        day_test: DayStamp,
    },
    PhoneInit {
        phone: PhoneId,
        country: Country,
    },
    CreateKey {
        phone: PhoneId,
        day: DayStamp,
        key: MsgDigest,
    },
    MarkPositive {
        phone: PhoneId,
        backend: Country,
    },
    TestPositive {
        phone: PhoneId,
        authority: Country,
    },
    Corrupt {
        target: Agent,
        capability: Capability,
        payload: MsgDigest,
        tag: PayloadTag,
        /// Phone the revealed or injected message is about, when there is one.
        subject: Option<PhoneId>,
    },
    UploadAccepted {
        backend: Country,
        uploader: PhoneId,
        token: MsgDigest,
        token_issuer: Country,
        records: u32,
    },
    KeyReleased {
        backend: Country,
        key: MsgDigest,
        uploader: PhoneId,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::IsAt { .. } => "IsAt",
            EventKind::Day { .. } => "Day",
            EventKind::Epoch { .. } => "Epoch",
            EventKind::BleWrite { .. } => "BLEwr",
            EventKind::BleRead { .. } => "BLErd",
            EventKind::ClaimAtRisk { .. } => "PClaimAtRisk",
            EventKind::HaClaimInfected { .. } => "HAClaimInfected",
            EventKind::PhoneInit { .. } => "PhoneInit",
            EventKind::CreateKey { .. } => "CreateKey",
            EventKind::MarkPositive { .. } => "MarkPositive",
            EventKind::TestPositive { .. } => "TestPositive",
            EventKind::Corrupt { .. } => "Corrupt",
            EventKind::UploadAccepted { .. } => "UploadAccepted",
            EventKind::KeyReleased { .. } => "KeyReleased",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub tick: Tick,
    pub seq: u64,
    pub day: DayStamp,
    pub epoch: EpochStamp,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceSchemaError {
    #[error("event {seq}: sequence numbers must strictly increase")]
    SeqNotIncreasing { seq: u64 },
    #[error("event {seq}: tick went backwards")]
    TickDecreased { seq: u64 },
    #[error("event {seq}: day went backwards")]
    DayDecreased { seq: u64 },
    #[error("event {seq}: epoch {epoch:?} already seen with a different day")]
    EpochDayMismatch { seq: u64, epoch: EpochStamp },
}

/// Ordered event log; the only input of the property checker.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a trace from raw events without validation; see [`Trace::validate`].
    pub fn from_events(events: Vec<TraceEvent>) -> Self {
        Self { events }
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, TraceEvent> {
        self.events.iter()
    }

    /// Checks the ordering restrictions every trace must satisfy.
    pub fn validate(&self) -> Result<(), TraceSchemaError> {
        let mut epoch_days: BTreeMap<EpochStamp, DayStamp> = BTreeMap::new();
        let mut prev: Option<&TraceEvent> = None;
        for ev in &self.events {
            if let Some(p) = prev {
                if ev.seq <= p.seq {
                    return Err(TraceSchemaError::SeqNotIncreasing { seq: ev.seq });
                }
                if ev.tick < p.tick {
                    return Err(TraceSchemaError::TickDecreased { seq: ev.seq });
                }
                if ev.day < p.day {
                    return Err(TraceSchemaError::DayDecreased { seq: ev.seq });
                }
            }
            if *epoch_days.entry(ev.epoch).or_insert(ev.day) != ev.day {
                return Err(TraceSchemaError::EpochDayMismatch {
                    seq: ev.seq,
                    epoch: ev.epoch,
                });
            }
            prev = Some(ev);
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a Trace {
    type Item = &'a TraceEvent;
    type IntoIter = core::slice::Iter<'a, TraceEvent>;

    fn into_iter(self) -> Self::IntoIter {
        self.events.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeConfig {
    pub epoch_length_s: u64,
    pub epochs_per_day: u64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            epoch_length_s: 600,
            epochs_per_day: 144,
        }
    }
}

impl TimeConfig {
    pub fn day_length_s(&self) -> u64 {
        self.epoch_length_s * self.epochs_per_day
    }

    pub fn day_of(&self, epoch: EpochStamp) -> DayStamp {
        DayStamp(epoch.0 / self.epochs_per_day)
    }

    pub fn first_epoch_of(&self, day: DayStamp) -> EpochStamp {
        EpochStamp(day.0 * self.epochs_per_day)
    }

    pub fn epochs_of(&self, day: DayStamp) -> impl Iterator<Item = EpochStamp> {
        let first = day.0 * self.epochs_per_day;
        (first..first + self.epochs_per_day).map(EpochStamp)
    }

    /// Start of `day` in clock seconds.
    pub fn day_start(&self, day: DayStamp) -> Tick {
        Tick(day.0 * self.day_length_s())
    }

    pub fn epoch_start(&self, epoch: EpochStamp) -> Tick {
        Tick(epoch.0 * self.epoch_length_s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    /// Epochs counted from the clock origin (GAEN).
    UnixAligned,
    /// Epochs counted from a country's service start (ROBERT).
    CountryAligned { country: Country, start: Tick },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("tick {tick:?} precedes the service start of {country}")]
    BeforeServiceStart { country: Country, tick: Tick },
    #[error("{phone} is not at place {place:?} in the current epoch")]
    NotPresent { phone: PhoneId, place: PlaceTag },
}

pub fn epoch_of(cfg: &TimeConfig, tick: Tick, alignment: Alignment) -> Result<EpochStamp, WorldError> {
    match alignment {
        Alignment::UnixAligned => Ok(EpochStamp(tick.0 / cfg.epoch_length_s)),
        Alignment::CountryAligned { country, start } => {
            let since = tick
                .0
                .checked_sub(start.0)
                .ok_or(WorldError::BeforeServiceStart { country, tick })?;
            Ok(EpochStamp(since / cfg.epoch_length_s))
        }
    }
}

/// `true` iff `later` is at most 14 days after `earlier` (and not before it).
pub fn within_14_days(earlier: DayStamp, later: DayStamp) -> bool {
    later.0 >= earlier.0 && later.0 - earlier.0 <= 14
}

/// The shared simulation state: clock, Bluetooth cells and the trace.
#[derive(Debug, Clone)]
pub struct World {
    cfg: TimeConfig,
    now: Tick,
    next_seq: u64,
    logged_epoch: EpochStamp,
    cells: BTreeMap<(PlaceTag, EpochStamp), Vec<Vec<u8>>>,
    presence: BTreeSet<(PhoneId, PlaceTag, EpochStamp)>,
    trace: Trace,
}

impl World {
    pub fn new(cfg: TimeConfig) -> Self {
        let mut world = Self {
            cfg,
            now: Tick(0),
            next_seq: 0,
            logged_epoch: EpochStamp(0),
            cells: BTreeMap::new(),
            presence: BTreeSet::new(),
            trace: Trace::new(),
        };
        world.emit(EventKind::Day { day: DayStamp(0) });
        world.emit(EventKind::Epoch { epoch: EpochStamp(0) });
        world
    }

    pub fn config(&self) -> &TimeConfig {
        &self.cfg
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn epoch(&self) -> EpochStamp {
        EpochStamp(self.now.0 / self.cfg.epoch_length_s)
    }

    pub fn day(&self) -> DayStamp {
        self.cfg.day_of(self.epoch())
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    /// Moves the clock forward; logs Day/Epoch events when a boundary is crossed.
    ///
    /// Panics if `ticks` is zero.
    pub fn advance(&mut self, ticks: u64) -> Tick {
        assert!(ticks >= 1, "advance needs at least one tick");
        self.now = Tick(self.now.0 + ticks);
        let epoch = self.epoch();
        if epoch != self.logged_epoch {
            let day = self.cfg.day_of(epoch);
            if day != self.cfg.day_of(self.logged_epoch) {
                self.emit(EventKind::Day { day });
            }
            self.emit(EventKind::Epoch { epoch });
            self.logged_epoch = epoch;
        }
        self.now
    }

    /// Advances to `tick` if it lies in the future; otherwise does nothing.
    pub fn advance_to(&mut self, tick: Tick) -> Tick {
        if tick > self.now {
            self.advance(tick.0 - self.now.0);
        }
        self.now
    }

    pub fn advance_to_epoch(&mut self, epoch: EpochStamp) -> Tick {
        let start = self.cfg.epoch_start(epoch);
        self.advance_to(start)
    }

    pub fn emit(&mut self, kind: EventKind) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        let epoch = self.epoch();
        self.trace.events.push(TraceEvent {
            tick: self.now,
            seq,
            day: self.cfg.day_of(epoch),
            epoch,
            kind,
        });
        seq
    }

    /// Places a phone at `place` for the current epoch. A phone may occupy
    /// several places in one epoch.
    pub fn visit(&mut self, phone: PhoneId, place: PlaceTag) {
        let epoch = self.epoch();
        self.presence.insert((phone, place, epoch));
    }

    pub fn is_present(&self, phone: PhoneId, place: PlaceTag) -> bool {
        self.presence.contains(&(phone, place, self.epoch()))
    }

    fn check_presence(&mut self, actor: Actor, place: PlaceTag) -> Result<(), WorldError> {
        if let Actor::Phone(phone) = actor {
            if !self.is_present(phone, place) {
                return Err(WorldError::NotPresent { phone, place });
            }
            self.emit(EventKind::IsAt { phone, place });
        }
        Ok(())
    }

    pub fn ble_write(&mut self, actor: Actor, place: PlaceTag, msg: &[u8]) -> Result<(), WorldError> {
        self.check_presence(actor, place)?;
        let epoch = self.epoch();
        self.cells.entry((place, epoch)).or_default().push(msg.to_vec());
        self.emit(EventKind::BleWrite {
            actor,
            place,
            msg: MsgDigest::of(msg),
        });
        Ok(())
    }

    /// Returns every message written to `place` during the current epoch.
    pub fn ble_read(&mut self, actor: Actor, place: PlaceTag) -> Result<Vec<Vec<u8>>, WorldError> {
        self.check_presence(actor, place)?;
        let epoch = self.epoch();
        let msgs = self.cells.get(&(place, epoch)).cloned().unwrap_or_default();
        for m in &msgs {
            self.emit(EventKind::BleRead {
                actor,
                place,
                msg: MsgDigest::of(m),
            });
        }
        Ok(msgs)
    }
}
