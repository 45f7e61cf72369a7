//! GAEN key schedule, broadcast payloads and on-device matching.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand_core::{CryptoRng, RngCore};
use thiserror::Error;

use crate::cryptokit::{self, Key128};
use crate::worldmodel::{
    Actor, DayStamp, EpochStamp, EventKind, MsgDigest, PhoneId, PlaceTag, TimeConfig, World, WorldError,
};

/// Days a key is kept on the device.
pub const RETENTION_DAYS: u64 = 14;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GaenError {
    #[error("a key for day {0:?} already exists")]
    OneTekPerDay(DayStamp),
    #[error("no key for day {0:?}")]
    NoKeyForDay(DayStamp),
    #[error(transparent)]
    World(#[from] WorldError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Tek {
    pub key: Key128,
    pub day: DayStamp,
}

impl Tek {
    pub fn digest(&self) -> MsgDigest {
        MsgDigest::of(&self.key.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Metadata {
    pub version: u8,
    pub power: u8,
}

impl Default for Metadata {
    fn default() -> Self {
        Self {
            version: 0x40,
            power: 0xf4,
        }
    }
}

pub fn rpik(tek: &Key128) -> Key128 {
    cryptokit::kdf(&tek.0, b"ENRPIK")
}

pub fn aemk(tek: &Key128) -> Key128 {
    cryptokit::kdf(&tek.0, b"ENAEMK")
}

pub fn rpi_for(tek: &Key128, epoch: EpochStamp) -> [u8; 16] {
    let block = cryptokit::gaen_padded_epoch(epoch.0 as u32);
    cryptokit::block128_encrypt(&rpik(tek), &block).expect("padded epoch is one block")
}

/// Metadata encrypted with a keystream block derived from the RPI.
pub fn aem_for(tek: &Key128, epoch: EpochStamp, meta: Metadata) -> [u8; 16] {
    let rpi = rpi_for(tek, epoch);
    let mut ks = cryptokit::block128_encrypt(&aemk(tek), &rpi).expect("rpi is one block");
    ks[0] ^= meta.version;
    ks[1] ^= meta.power;
    ks
}

/// Broadcast payload: RPI followed by AEM.
pub fn payload(tek: &Key128, epoch: EpochStamp, meta: Metadata) -> [u8; 32] {
    let mut out = [0u8; 32];
    out[..16].copy_from_slice(&rpi_for(tek, epoch));
    out[16..].copy_from_slice(&aem_for(tek, epoch, meta));
    out
}

#[derive(Clone, Debug, Default)]
pub struct KeyRing {
    teks: Vec<Tek>,
}

impl KeyRing {
    pub fn teks(&self) -> &[Tek] {
        &self.teks
    }

    pub fn for_day(&self, day: DayStamp) -> Option<&Tek> {
        self.teks.iter().rev().find(|t| t.day == day)
    }

    /// Generates the key for the current day, logs CreateKey and drops keys
    /// older than the retention period.
    pub fn new_tek<R: RngCore + CryptoRng>(
        &mut self,
        world: &mut World,
        rng: &mut R,
        phone: PhoneId,
    ) -> Result<Tek, GaenError> {
        let day = world.day();
        if self.for_day(day).is_some() {
            return Err(GaenError::OneTekPerDay(day));
        }
        Ok(self.insert(world, rng, phone))
    }

    /// Like [`KeyRing::new_tek`] without the one-per-day rule; only a
    /// compromised phone does this.
    pub fn extra_tek<R: RngCore + CryptoRng>(&mut self, world: &mut World, rng: &mut R, phone: PhoneId) -> Tek {
        self.insert(world, rng, phone)
    }

    fn insert<R: RngCore + CryptoRng>(&mut self, world: &mut World, rng: &mut R, phone: PhoneId) -> Tek {
        let day = world.day();
        self.purge(day);
        let tek = Tek {
            key: Key128::generate(rng),
            day,
        };
        world.emit(EventKind::CreateKey {
            phone,
            day,
            key: tek.digest(),
        });
        self.teks.push(tek);
        tek
    }

    pub fn purge(&mut self, today: DayStamp) {
        self.teks.retain(|t| today.0.saturating_sub(t.day.0) <= RETENTION_DAYS);
    }

    pub fn clear(&mut self) {
        self.teks.clear();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub rpi: [u8; 16],
    pub epoch: EpochStamp,
    pub place: PlaceTag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchMode {
    /// Accept RPIs whose epoch lies within this many epochs of the observation.
    Skew { epochs: u64 },
    /// Accept any epoch of the key's day.
    SameDay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Exposure {
    pub tek: Tek,
    pub epoch: EpochStamp,
    pub place: PlaceTag,
}

/// Matches observations against released keys.
pub fn match_exposures(
    observations: &[Observation],
    released: &[Tek],
    mode: MatchMode,
    time: &TimeConfig,
) -> Vec<Exposure> {
    let mut out = Vec::new();
    for tek in released {
        let table: BTreeMap<[u8; 16], EpochStamp> = time
            .epochs_of(tek.day)
            .map(|e| (rpi_for(&tek.key, e), e))
            .collect();
        for obs in observations {
            let Some(&j) = table.get(&obs.rpi) else {
                continue;
            };
            let ok = match mode {
                MatchMode::Skew { epochs } => obs.epoch.0.abs_diff(j.0) <= epochs,
                MatchMode::SameDay => time.day_of(obs.epoch) == tek.day,
            };
            if ok {
                out.push(Exposure {
                    tek: *tek,
                    epoch: obs.epoch,
                    place: obs.place,
                });
            }
        }
    }
    out
}

/// Phone-side state shared by the DP3T and CWA apps.
#[derive(Clone, Debug)]
pub struct GaenPhone {
    pub id: PhoneId,
    pub keys: KeyRing,
    pub observations: Vec<Observation>,
    pub meta: Metadata,
    notified: BTreeSet<MsgDigest>,
}

impl GaenPhone {
    pub fn new(id: PhoneId) -> Self {
        Self {
            id,
            keys: KeyRing::default(),
            observations: Vec::new(),
            meta: Metadata::default(),
            notified: BTreeSet::new(),
        }
    }

    /// Creates today's key unless one exists.
    pub fn ensure_key<R: RngCore + CryptoRng>(&mut self, world: &mut World, rng: &mut R) -> Tek {
        let day = world.day();
        match self.keys.for_day(day) {
            Some(t) => *t,
            None => self.keys.new_tek(world, rng, self.id).expect("no key for today yet"),
        }
    }

    pub fn broadcast(&mut self, world: &mut World, place: PlaceTag) -> Result<(), GaenError> {
        let day = world.day();
        let tek = *self.keys.for_day(day).ok_or(GaenError::NoKeyForDay(day))?;
        let p = payload(&tek.key, world.epoch(), self.meta);
        world.ble_write(Actor::Phone(self.id), place, &p)?;
        Ok(())
    }

    /// Reads the cell and records every foreign GAEN payload.
    pub fn receive(&mut self, world: &mut World, place: PlaceTag) -> Result<usize, GaenError> {
        let msgs = world.ble_read(Actor::Phone(self.id), place)?;
        let epoch = world.epoch();
        let own: BTreeSet<[u8; 16]> = self.keys.teks().iter().map(|t| rpi_for(&t.key, epoch)).collect();
        let mut n = 0;
        for m in msgs.iter().filter(|m| m.len() == 32) {
            let mut rpi = [0u8; 16];
            rpi.copy_from_slice(&m[..16]);
            if own.contains(&rpi) {
                continue;
            }
            self.observations.push(Observation { rpi, epoch, place });
            n += 1;
        }
        Ok(n)
    }

    /// Logs one at-risk claim per newly matched key, at its earliest exposure.
    pub fn notify(&mut self, world: &mut World, exposures: &[Exposure]) -> usize {
        let mut first: BTreeMap<MsgDigest, Exposure> = BTreeMap::new();
        for e in exposures {
            let d = e.tek.digest();
            if self.notified.contains(&d) {
                continue;
            }
            let slot = first.entry(d).or_insert(*e);
            if e.epoch < slot.epoch {
                *slot = *e;
            }
        }
        let mut ordered: Vec<(MsgDigest, Exposure)> = first.into_iter().collect();
        ordered.sort_by_key(|(d, e)| (e.epoch, *d));
        let cfg = *world.config();
        for (d, e) in &ordered {
            self.notified.insert(*d);
            world.emit(EventKind::ClaimAtRisk {
                phone: self.id,
                day_close: cfg.day_of(e.epoch),
                epoch_close: e.epoch,
                matched_key: Some(*d),
            });
        }
        ordered.len()
    }

    pub fn is_notified(&self) -> bool {
        !self.notified.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha20Rng;
    use rand_core::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(11)
    }

    #[test]
    fn rpi_deterministic_and_distinct_per_epoch() {
        let k = Key128([3; 16]);
        assert_eq!(rpi_for(&k, EpochStamp(5)), rpi_for(&k, EpochStamp(5)));
        let cfg = TimeConfig::default();
        let all: BTreeSet<_> = cfg.epochs_of(DayStamp(2)).map(|e| rpi_for(&k, e)).collect();
        assert_eq!(all.len(), 144);
    }

    #[test]
    fn rpik_and_aemk_differ() {
        let k = Key128([0; 16]);
        assert_ne!(rpik(&k), aemk(&k));
        assert_eq!(hex::encode(rpik(&k).0), "59ea58dd0914c8b7a1b0ade4528b7912");
    }

    #[test]
    fn one_tek_per_day_and_purge() {
        let mut w = World::new(TimeConfig::default());
        let mut r = rng();
        let mut ring = KeyRing::default();
        let t0 = ring.new_tek(&mut w, &mut r, PhoneId(1)).unwrap();
        assert_eq!(ring.new_tek(&mut w, &mut r, PhoneId(1)), Err(GaenError::OneTekPerDay(DayStamp(0))));
        let day = w.config().day_length_s();
        w.advance(day);
        let t1 = ring.new_tek(&mut w, &mut r, PhoneId(1)).unwrap();
        assert_ne!(t0.key, t1.key);
        // Compromised phones may hold more than one key for a day.
        ring.extra_tek(&mut w, &mut r, PhoneId(1));
        assert_eq!(ring.teks().iter().filter(|t| t.day == DayStamp(1)).count(), 2);

        w.advance(13 * day);
        ring.new_tek(&mut w, &mut r, PhoneId(1)).unwrap();
        assert!(ring.teks().iter().any(|t| t.day == DayStamp(0)), "day 14 keeps day 0");
        w.advance(day);
        ring.new_tek(&mut w, &mut r, PhoneId(1)).unwrap();
        assert!(!ring.teks().iter().any(|t| t.day == DayStamp(0)), "day 15 drops day 0");
    }

    fn obs(rpi: [u8; 16], epoch: u64) -> Observation {
        Observation {
            rpi,
            epoch: EpochStamp(epoch),
            place: PlaceTag(0),
        }
    }

    #[test]
    fn skew_boundary_twelve_vs_thirteen() {
        let cfg = TimeConfig::default();
        let tek = Tek {
            key: Key128([7; 16]),
            day: DayStamp(1),
        };
        let j = 144 + 140;
        let rpi = rpi_for(&tek.key, EpochStamp(j));
        let mode = MatchMode::Skew { epochs: 12 };
        assert_eq!(match_exposures(&[obs(rpi, j)], &[tek], mode, &cfg).len(), 1);
        assert_eq!(match_exposures(&[obs(rpi, j + 12)], &[tek], mode, &cfg).len(), 1);
        assert!(match_exposures(&[obs(rpi, j + 13)], &[tek], mode, &cfg).is_empty());
        assert_eq!(match_exposures(&[obs(rpi, j - 12)], &[tek], mode, &cfg).len(), 1);
        assert!(match_exposures(&[obs(rpi, j - 13)], &[tek], mode, &cfg).is_empty());
    }

    #[test]
    fn same_day_mode_accepts_day_rejects_next() {
        let cfg = TimeConfig::default();
        let tek = Tek {
            key: Key128([8; 16]),
            day: DayStamp(1),
        };
        let j = 150;
        let rpi = rpi_for(&tek.key, EpochStamp(j));
        assert_eq!(match_exposures(&[obs(rpi, j + 20)], &[tek], MatchMode::SameDay, &cfg).len(), 1);
        assert_eq!(match_exposures(&[obs(rpi, 287)], &[tek], MatchMode::SameDay, &cfg).len(), 1);
        assert!(match_exposures(&[obs(rpi, 288)], &[tek], MatchMode::SameDay, &cfg).is_empty());
    }

    #[test]
    fn notify_once_per_key() {
        let mut w = World::new(TimeConfig::default());
        let mut p = GaenPhone::new(PhoneId(4));
        let tek = Tek {
            key: Key128([1; 16]),
            day: DayStamp(0),
        };
        let e = Exposure {
            tek,
            epoch: EpochStamp(3),
            place: PlaceTag(1),
        };
        assert_eq!(p.notify(&mut w, &[e, e]), 1);
        assert_eq!(p.notify(&mut w, &[e]), 0);
        assert!(p.is_notified());
    }

    #[test]
    fn phone_ignores_own_broadcast() {
        let mut w = World::new(TimeConfig::default());
        let mut r = rng();
        let mut a = GaenPhone::new(PhoneId(1));
        let mut b = GaenPhone::new(PhoneId(2));
        a.ensure_key(&mut w, &mut r);
        b.ensure_key(&mut w, &mut r);
        for p in [PhoneId(1), PhoneId(2)] {
            w.visit(p, PlaceTag(9));
        }
        a.broadcast(&mut w, PlaceTag(9)).unwrap();
        b.broadcast(&mut w, PlaceTag(9)).unwrap();
        assert_eq!(a.receive(&mut w, PlaceTag(9)).unwrap(), 1);
        assert_eq!(b.receive(&mut w, PlaceTag(9)).unwrap(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Enumerates every epoch of the key's day without a lookup table.
        fn naive(observations: &[Observation], released: &[Tek], mode: MatchMode, cfg: &TimeConfig) -> usize {
            let mut n = 0;
            for tek in released {
                for o in observations {
                    let hit = cfg.epochs_of(tek.day).any(|j| {
                        rpi_for(&tek.key, j) == o.rpi
                            && match mode {
                                MatchMode::Skew { epochs } => o.epoch.0.abs_diff(j.0) <= epochs,
                                MatchMode::SameDay => cfg.day_of(o.epoch) == tek.day,
                            }
                    });
                    if hit {
                        n += 1;
                    }
                }
            }
            n
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn matcher_agrees_with_enumeration(
                key in any::<[u8; 16]>(),
                day in 0u64..4,
                emit in 0u64..144,
                shift in -30i64..30,
                same_day in any::<bool>(),
                decoy in any::<[u8; 16]>(),
            ) {
                let cfg = TimeConfig::default();
                let tek = Tek { key: Key128(key), day: DayStamp(day) };
                let j = day * 144 + emit;
                let seen = (j as i64 + shift).max(0) as u64;
                let observations = [obs(rpi_for(&tek.key, EpochStamp(j)), seen), obs(decoy, seen)];
                let mode = if same_day { MatchMode::SameDay } else { MatchMode::Skew { epochs: 12 } };
                prop_assert_eq!(
                    match_exposures(&observations, &[tek], mode, &cfg).len(),
                    naive(&observations, &[tek], mode, &cfg)
                );
            }
        }
    }
}
