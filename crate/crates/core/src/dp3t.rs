//! DP3T with device-bound authorisation codes, key publication and
//! region-based federation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand_core::{CryptoRng, RngCore};
use thiserror::Error;

use crate::cryptokit::{self, Key128, SigKeyPair, SigPublic, Signature};
use crate::gaen::{self, GaenPhone, MatchMode, Tek};
use crate::worldmodel::{Country, DayStamp, EpochStamp, EventKind, PhoneId, Tick, TimeConfig, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dp3tConfig {
    pub ac_freshness_days: u64,
    pub release_at_day_end: bool,
    pub max_committed_keys: usize,
}

impl Default for Dp3tConfig {
    fn default() -> Self {
        Self {
            ac_freshness_days: 2,
            release_at_day_end: true,
            max_committed_keys: 14,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Dp3tError {
    #[error("{got} keys exceed the commitment cap of {max}")]
    TooManyKeys { max: usize, got: usize },
    #[error("test result is not positive")]
    NoAuthorisation,
    #[error("authorisation code signature does not verify")]
    BadSignature,
    #[error("authorisation code is not recent")]
    StaleCode,
    #[error("key does not match the committed value")]
    CommitmentMismatch,
}

pub fn commitment(tek: &Key128, t: EpochStamp, r: &[u8; 16]) -> [u8; 32] {
    let mut m = Vec::with_capacity(40);
    m.extend_from_slice(&tek.0);
    m.extend_from_slice(&t.0.to_be_bytes());
    m.extend_from_slice(r);
    cryptokit::hash(&m)
}

/// Test-database row: the committed key with its epoch tag and blinding nonce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TestDbEntry {
    pub tek: Tek,
    pub t: EpochStamp,
    pub r: [u8; 16],
}

impl TestDbEntry {
    pub fn h(&self) -> [u8; 32] {
        commitment(&self.tek.key, self.t, &self.r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AuthCode {
    pub h: [u8; 32],
    pub issue_day: DayStamp,
    pub sig: Signature,
}

impl AuthCode {
    fn signed_bytes(h: &[u8; 32], issue_day: DayStamp) -> Vec<u8> {
        let mut m = Vec::with_capacity(48);
        m.extend_from_slice(b"DP3T-AC");
        m.extend_from_slice(h);
        m.extend_from_slice(&issue_day.0.to_be_bytes());
        m
    }

    pub fn sign(key: &SigKeyPair, h: [u8; 32], issue_day: DayStamp) -> Self {
        Self {
            h,
            issue_day,
            sig: cryptokit::sign(key, &Self::signed_bytes(&h, issue_day)),
        }
    }

    pub fn verify(&self, pk: &SigPublic) -> bool {
        cryptokit::verify(pk, &Self::signed_bytes(&self.h, self.issue_day), &self.sig)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut m = Self::signed_bytes(&self.h, self.issue_day);
        m.extend_from_slice(&self.sig.0);
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UploadTuple {
    pub entry: TestDbEntry,
    pub ac: AuthCode,
}

#[derive(Clone, Debug)]
pub struct Dp3tPhone {
    pub gaen: GaenPhone,
    pub country: Country,
    pub visited: BTreeSet<Country>,
    test_db: Vec<TestDbEntry>,
    codes: Vec<AuthCode>,
}

impl Dp3tPhone {
    pub fn new(world: &mut World, id: PhoneId, country: Country) -> Self {
        world.emit(EventKind::PhoneInit { phone: id, country });
        Self {
            gaen: GaenPhone::new(id),
            country,
            visited: BTreeSet::new(),
            test_db: Vec::new(),
            codes: Vec::new(),
        }
    }

    pub fn id(&self) -> PhoneId {
        self.gaen.id
    }

    pub fn test_db(&self) -> &[TestDbEntry] {
        &self.test_db
    }

    /// Adds a row to the test database; only reachable through a compromise.
    pub fn write_test_db(&mut self, entry: TestDbEntry) {
        self.test_db.push(entry);
    }

    /// Commits to all held keys, blinded with fresh nonces.
    pub fn commit_keys<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
        cfg: &Dp3tConfig,
        time: &TimeConfig,
    ) -> Result<Vec<[u8; 32]>, Dp3tError> {
        let teks: Vec<Tek> = self.gaen.keys.teks().to_vec();
        self.commit(rng, cfg, time, &teks)
    }

    pub fn commit<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
        cfg: &Dp3tConfig,
        time: &TimeConfig,
        teks: &[Tek],
    ) -> Result<Vec<[u8; 32]>, Dp3tError> {
        if self.test_db.len() + teks.len() > cfg.max_committed_keys {
            return Err(Dp3tError::TooManyKeys {
                max: cfg.max_committed_keys,
                got: self.test_db.len() + teks.len(),
            });
        }
        for tek in teks {
            self.test_db.push(TestDbEntry {
                tek: *tek,
                t: time.first_epoch_of(tek.day),
                r: cryptokit::random_array(rng),
            });
        }
        Ok(self.test_db.iter().map(|e| e.h()).collect())
    }

    pub fn receive_codes(&mut self, codes: Vec<AuthCode>) {
        self.codes.extend(codes);
    }

    /// Tuples for keys whose day lies in `[start, end)`; the phone then forgets its material.
    pub fn upload_tuples(&mut self, window: (DayStamp, DayStamp)) -> Vec<UploadTuple> {
        let mut out = Vec::new();
        for e in &self.test_db {
            if e.tek.day < window.0 || e.tek.day >= window.1 {
                continue;
            }
            if let Some(ac) = self.codes.iter().find(|c| c.h == e.h()) {
                out.push(UploadTuple { entry: *e, ac: *ac });
            }
        }
        out
    }

    /// Deletes all key material after an upload.
    pub fn wipe(&mut self) {
        self.test_db.clear();
        self.codes.clear();
        self.gaen.keys.clear();
    }

    /// Verifies fetched bundles and raises claims for matches.
    pub fn check_exposure(&mut self, world: &mut World, bundles: &[SignedBundle], trust: &BTreeMap<Country, SigPublic>) -> usize {
        let teks = verified_keys(bundles, trust);
        let time = *world.config();
        let hits = gaen::match_exposures(&self.gaen.observations, &teks, MatchMode::SameDay, &time);
        self.gaen.notify(world, &hits)
    }
}

/// Keys from bundles whose signature checks out under the pinned key of their country.
pub fn verified_keys(bundles: &[SignedBundle], trust: &BTreeMap<Country, SigPublic>) -> Vec<Tek> {
    let mut out = Vec::new();
    for b in bundles {
        let Some(pk) = trust.get(&b.country) else { continue };
        for k in &b.keys {
            if k.verify(pk, b.country) {
                out.push(k.tek);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Dp3tHa {
    pub country: Country,
    sig: SigKeyPair,
}

impl Dp3tHa {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R, country: Country) -> Self {
        Self {
            country,
            sig: SigKeyPair::generate(rng),
        }
    }

    pub fn public(&self) -> SigPublic {
        self.sig.public()
    }

    pub fn signing_key(&self) -> &SigKeyPair {
        &self.sig
    }

    /// Signs one code per commitment for a positive test; logs the diagnosis.
    pub fn diagnose_and_sign(
        &self,
        world: &mut World,
        phone: PhoneId,
        commitments: &[[u8; 32]],
        window: (DayStamp, DayStamp),
        positive: bool,
    ) -> Result<Vec<AuthCode>, Dp3tError> {
        if !positive {
            return Err(Dp3tError::NoAuthorisation);
        }
        crate::robert::log_diagnosis(world, self.country, phone, window);
        let day = world.day();
        Ok(commitments.iter().map(|h| AuthCode::sign(&self.sig, *h, day)).collect())
    }
}

/// A released key signed by the publishing back end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignedKey {
    pub tek: Tek,
    pub sig: Signature,
}

impl SignedKey {
    fn signed_bytes(tek: &Tek, country: Country) -> Vec<u8> {
        let mut m = Vec::with_capacity(32);
        m.extend_from_slice(&tek.key.0);
        m.extend_from_slice(&tek.day.0.to_be_bytes());
        m.push(country.0);
        m
    }

    pub fn sign(key: &SigKeyPair, tek: Tek, country: Country) -> Self {
        Self {
            tek,
            sig: cryptokit::sign(key, &Self::signed_bytes(&tek, country)),
        }
    }

    pub fn verify(&self, pk: &SigPublic, country: Country) -> bool {
        cryptokit::verify(pk, &Self::signed_bytes(&self.tek, country), &self.sig)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignedBundle {
    pub country: Country,
    pub keys: Vec<SignedKey>,
}

#[derive(Clone, Debug)]
struct Pending {
    tek: Tek,
    uploader: PhoneId,
    release_at: Tick,
}

#[derive(Clone, Debug)]
pub struct Dp3tBackend {
    pub country: Country,
    sig: SigKeyPair,
    ha_pk: SigPublic,
    pending: Vec<Pending>,
    released: Vec<SignedKey>,
}

impl Dp3tBackend {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R, country: Country, ha_pk: SigPublic) -> Self {
        Self {
            country,
            sig: SigKeyPair::generate(rng),
            ha_pk,
            pending: Vec::new(),
            released: Vec::new(),
        }
    }

    pub fn public(&self) -> SigPublic {
        self.sig.public()
    }

    pub fn signing_key(&self) -> &SigKeyPair {
        &self.sig
    }

    /// Checks one tuple; accepted keys are queued for release.
    pub fn upload(&mut self, world: &World, cfg: &Dp3tConfig, uploader: PhoneId, tuple: &UploadTuple) -> Result<(), Dp3tError> {
        if !tuple.ac.verify(&self.ha_pk) {
            return Err(Dp3tError::BadSignature);
        }
        let today = world.day();
        if today.0.saturating_sub(tuple.ac.issue_day.0) > cfg.ac_freshness_days || tuple.ac.issue_day > today {
            return Err(Dp3tError::StaleCode);
        }
        if tuple.entry.h() != tuple.ac.h {
            return Err(Dp3tError::CommitmentMismatch);
        }
        let time = world.config();
        let release_at = if cfg.release_at_day_end {
            time.day_start(DayStamp(tuple.entry.tek.day.0 + 1)).max(world.now())
        } else {
            world.now()
        };
        self.pending.push(Pending {
            tek: tuple.entry.tek,
            uploader,
            release_at,
        });
        Ok(())
    }

    /// Releases every queued key whose time has come; logs KeyReleased.
    pub fn publish(&mut self, world: &mut World) -> usize {
        let now = world.now();
        let (due, rest): (Vec<Pending>, Vec<Pending>) = self.pending.drain(..).partition(|p| p.release_at <= now);
        self.pending = rest;
        for p in &due {
            world.emit(EventKind::KeyReleased {
                backend: self.country,
                key: p.tek.digest(),
                uploader: p.uploader,
            });
            self.released.push(SignedKey::sign(&self.sig, p.tek, self.country));
        }
        due.len()
    }

    pub fn bundle(&self) -> SignedBundle {
        SignedBundle {
            country: self.country,
            keys: self.released.clone(),
        }
    }
}

/// Bundles for the phone's home region and every region it declared.
pub fn publish_and_fetch(backends: &BTreeMap<Country, Dp3tBackend>, phone: &Dp3tPhone) -> Vec<SignedBundle> {
    let mut regions: BTreeSet<Country> = phone.visited.clone();
    regions.insert(phone.country);
    regions.iter().filter_map(|cc| backends.get(cc)).map(|b| b.bundle()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::PlaceTag;
    use rand_chacha::ChaCha20Rng;
    use rand_core::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(3)
    }

    #[test]
    fn commitments_distinct_and_capped() {
        let mut w = World::new(TimeConfig::default());
        let mut r = rng();
        let cfg = Dp3tConfig::default();
        let mut p = Dp3tPhone::new(&mut w, PhoneId(1), Country::DE);
        for _ in 0..3 {
            p.gaen.ensure_key(&mut w, &mut r);
            w.advance(86_400);
        }
        let hs = p.commit_keys(&mut r, &cfg, &TimeConfig::default()).unwrap();
        assert_eq!(hs.len(), 3);
        assert_eq!(hs.iter().collect::<BTreeSet<_>>().len(), 3);

        let tek = Key128([1; 16]);
        assert_ne!(commitment(&tek, EpochStamp(0), &[0; 16]), commitment(&tek, EpochStamp(0), &[1; 16]));

        let keys: Vec<Tek> = (0..15)
            .map(|d| Tek {
                key: Key128([d as u8; 16]),
                day: DayStamp(d),
            })
            .collect();
        let mut q = Dp3tPhone::new(&mut w, PhoneId(2), Country::DE);
        assert_eq!(q.commit(&mut r, &cfg, &TimeConfig::default(), &keys[..14]).unwrap().len(), 14);
        let mut q = Dp3tPhone::new(&mut w, PhoneId(3), Country::DE);
        assert_eq!(
            q.commit(&mut r, &cfg, &TimeConfig::default(), &keys).unwrap_err(),
            Dp3tError::TooManyKeys { max: 14, got: 15 }
        );
    }

    #[test]
    fn codes_verify_only_under_issuer() {
        let mut w = World::new(TimeConfig::default());
        let mut r = rng();
        let de = Dp3tHa::new(&mut r, Country::DE);
        let it = Dp3tHa::new(&mut r, Country::IT);
        let codes = de
            .diagnose_and_sign(&mut w, PhoneId(1), &[[1; 32], [2; 32]], (DayStamp(0), DayStamp(1)), true)
            .unwrap();
        assert_eq!(codes.len(), 2);
        assert!(codes.iter().all(|c| c.verify(&de.public())));
        assert!(!codes[0].verify(&it.public()));
        assert_eq!(
            de.diagnose_and_sign(&mut w, PhoneId(1), &[[1; 32]], (DayStamp(0), DayStamp(1)), false),
            Err(Dp3tError::NoAuthorisation)
        );
    }

    struct Setup {
        w: World,
        r: ChaCha20Rng,
        ha: Dp3tHa,
        be: Dp3tBackend,
        p: Dp3tPhone,
        cfg: Dp3tConfig,
    }

    fn setup() -> Setup {
        let mut w = World::new(TimeConfig::default());
        let mut r = rng();
        let ha = Dp3tHa::new(&mut r, Country::DE);
        let be = Dp3tBackend::new(&mut r, Country::DE, ha.public());
        let mut p = Dp3tPhone::new(&mut w, PhoneId(1), Country::DE);
        p.gaen.ensure_key(&mut w, &mut r);
        Setup {
            w,
            r,
            ha,
            be,
            p,
            cfg: Dp3tConfig::default(),
        }
    }

    #[test]
    fn upload_checks() {
        let mut s = setup();
        let hs = s.p.commit_keys(&mut s.r, &s.cfg, &TimeConfig::default()).unwrap();
        let codes = s
            .ha
            .diagnose_and_sign(&mut s.w, PhoneId(1), &hs, (DayStamp(0), DayStamp(1)), true)
            .unwrap();
        s.p.receive_codes(codes);
        let tuples = s.p.upload_tuples((DayStamp(0), DayStamp(1)));
        assert_eq!(tuples.len(), 1);
        let good = tuples[0];
        assert_eq!(s.be.upload(&s.w, &s.cfg, PhoneId(1), &good), Ok(()));

        let mut swapped = good;
        swapped.entry.tek.key = Key128([9; 16]);
        assert_eq!(s.be.upload(&s.w, &s.cfg, PhoneId(1), &swapped), Err(Dp3tError::CommitmentMismatch));

        let mut forged = good;
        forged.ac = AuthCode::sign(&SigKeyPair::generate(&mut s.r), good.ac.h, good.ac.issue_day);
        assert_eq!(s.be.upload(&s.w, &s.cfg, PhoneId(1), &forged), Err(Dp3tError::BadSignature));

        s.w.advance(3 * 86_400);
        assert_eq!(s.be.upload(&s.w, &s.cfg, PhoneId(1), &good), Err(Dp3tError::StaleCode));
    }

    #[test]
    fn release_waits_for_day_end() {
        let mut s = setup();
        let hs = s.p.commit_keys(&mut s.r, &s.cfg, &TimeConfig::default()).unwrap();
        let codes = s
            .ha
            .diagnose_and_sign(&mut s.w, PhoneId(1), &hs, (DayStamp(0), DayStamp(1)), true)
            .unwrap();
        s.p.receive_codes(codes);
        let t = s.p.upload_tuples((DayStamp(0), DayStamp(1)))[0];
        s.be.upload(&s.w, &s.cfg, PhoneId(1), &t).unwrap();
        assert_eq!(s.be.publish(&mut s.w), 0);
        s.w.advance(86_400);
        assert_eq!(s.be.publish(&mut s.w), 1);
        assert_eq!(s.be.bundle().keys.len(), 1);
    }

    #[test]
    fn fetch_covers_home_and_visited_regions() {
        let mut w = World::new(TimeConfig::default());
        let mut r = rng();
        let mut backends = BTreeMap::new();
        for cc in [Country::DE, Country::FR, Country::IT] {
            let ha = Dp3tHa::new(&mut r, cc);
            backends.insert(cc, Dp3tBackend::new(&mut r, cc, ha.public()));
        }
        let mut p = Dp3tPhone::new(&mut w, PhoneId(1), Country::DE);
        let got: Vec<Country> = publish_and_fetch(&backends, &p).iter().map(|b| b.country).collect();
        assert_eq!(got, alloc::vec![Country::DE]);
        p.visited.insert(Country::FR);
        p.visited.insert(Country(99));
        let got: Vec<Country> = publish_and_fetch(&backends, &p).iter().map(|b| b.country).collect();
        assert_eq!(got, alloc::vec![Country::FR, Country::DE]);
    }

    #[test]
    fn same_day_replay_matches_next_day_does_not() {
        let run = |delay_epochs: u64| {
            let mut s = setup();
            let mut victim = Dp3tPhone::new(&mut s.w, PhoneId(2), Country::DE);
            s.w.advance(600 * 10);
            s.w.visit(PhoneId(1), PlaceTag(1));
            s.p.gaen.broadcast(&mut s.w, PlaceTag(1)).unwrap();
            let captured = s.w.ble_read(crate::worldmodel::Actor::Adversary, PlaceTag(1)).unwrap();
            s.w.advance(600 * delay_epochs);
            s.w.ble_write(crate::worldmodel::Actor::Adversary, PlaceTag(2), &captured[0]).unwrap();
            s.w.visit(PhoneId(2), PlaceTag(2));
            victim.gaen.receive(&mut s.w, PlaceTag(2)).unwrap();
            let tek = s.p.gaen.keys.teks()[0];
            let bundle = SignedBundle {
                country: Country::DE,
                keys: alloc::vec![SignedKey::sign(s.be.signing_key(), tek, Country::DE)],
            };
            let trust = [(Country::DE, s.be.public())].into_iter().collect();
            victim.check_exposure(&mut s.w, &[bundle], &trust)
        };
        assert_eq!(run(20), 1);
        assert_eq!(run(133), 1);
        assert_eq!(run(134), 0);
    }
}
