//! CWA upload authorisation (guid, registration token, TAN) and the EFGS
//! gateway shared by federated back ends.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand_core::{CryptoRng, RngCore};
use thiserror::Error;

use crate::cryptokit::{self, SigKeyPair, SigPublic};
use crate::dp3t::{verified_keys, SignedBundle, SignedKey};
use crate::gaen::{self, GaenPhone, MatchMode, Tek};
use crate::worldmodel::{Country, DayStamp, EventKind, PhoneId, Tick, TimeConfig, World};

/// Upper bound on keys in one upload.
pub const MAX_UPLOAD_KEYS: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CwaConfig {
    pub one_tan_per_token: bool,
    pub skew_tolerance_epochs: u64,
}

impl Default for CwaConfig {
    fn default() -> Self {
        Self {
            one_tan_per_token: true,
            skew_tolerance_epochs: 12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EfgsConfig {
    pub expiry_agreement: bool,
    pub release_delay_hours: u64,
}

impl Default for EfgsConfig {
    fn default() -> Self {
        Self {
            expiry_agreement: true,
            release_delay_hours: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CwaError {
    #[error("guid already registered")]
    GuidAlreadyUsed,
    #[error("unknown registration token")]
    UnknownToken,
    #[error("test result is not positive")]
    NotPositive,
    #[error("a TAN was already issued for this registration token")]
    TanAlreadyIssued,
    #[error("invalid TAN")]
    InvalidTan,
    #[error("TAN already used")]
    TanReused,
    #[error("{0} keys exceed the upload limit")]
    TooManyKeys(usize),
    #[error("more than one key for day {0:?}")]
    DuplicateDay(DayStamp),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestResult {
    Pending,
    Negative,
    Positive,
}

/// Verification server and test result server, run as one entity.
#[derive(Clone, Debug)]
pub struct VerificationServer {
    pub country: Country,
    one_tan_per_token: bool,
    guid_hashes: BTreeSet<[u8; 32]>,
    reg_tokens: BTreeMap<[u8; 32], [u8; 32]>,
    tan_hashes: BTreeSet<[u8; 32]>,
    used_tans: BTreeSet<[u8; 32]>,
    tan_issue_counts: BTreeMap<[u8; 32], u32>,
    results: BTreeMap<[u8; 32], TestResult>,
}

impl VerificationServer {
    pub fn new(country: Country, cfg: &CwaConfig) -> Self {
        Self {
            country,
            one_tan_per_token: cfg.one_tan_per_token,
            guid_hashes: BTreeSet::new(),
            reg_tokens: BTreeMap::new(),
            tan_hashes: BTreeSet::new(),
            used_tans: BTreeSet::new(),
            tan_issue_counts: BTreeMap::new(),
            results: BTreeMap::new(),
        }
    }

    /// Test-result side: stores the lab result under h(guid). A positive
    /// result also logs the health authority's diagnosis.
    pub fn record_result(
        &mut self,
        world: &mut World,
        phone: PhoneId,
        guid: &[u8; 16],
        window: (DayStamp, DayStamp),
        positive: bool,
    ) {
        let res = if positive {
            crate::robert::log_diagnosis(world, self.country, phone, window);
            TestResult::Positive
        } else {
            TestResult::Negative
        };
        self.results.insert(cryptokit::hash(guid), res);
    }

    pub fn scan_and_register<R: RngCore + CryptoRng>(&mut self, rng: &mut R, guid: &[u8; 16]) -> Result<[u8; 16], CwaError> {
        let hg = cryptokit::hash(guid);
        if self.one_tan_per_token && self.guid_hashes.contains(&hg) {
            return Err(CwaError::GuidAlreadyUsed);
        }
        self.guid_hashes.insert(hg);
        let token: [u8; 16] = cryptokit::random_array(rng);
        self.reg_tokens.insert(cryptokit::hash(&token), hg);
        Ok(token)
    }

    fn result_for(&self, reg_token: &[u8; 16]) -> Result<TestResult, CwaError> {
        let hg = self.reg_tokens.get(&cryptokit::hash(reg_token)).ok_or(CwaError::UnknownToken)?;
        Ok(self.results.get(hg).copied().unwrap_or(TestResult::Pending))
    }

    /// Logs MarkPositive for the polling phone on a positive result.
    pub fn poll_result(&self, world: &mut World, phone: PhoneId, reg_token: &[u8; 16]) -> Result<TestResult, CwaError> {
        let res = self.result_for(reg_token)?;
        if res == TestResult::Positive {
            world.emit(EventKind::MarkPositive {
                phone,
                backend: self.country,
            });
        }
        Ok(res)
    }

    pub fn request_tan<R: RngCore + CryptoRng>(&mut self, rng: &mut R, reg_token: &[u8; 16]) -> Result<[u8; 16], CwaError> {
        if self.result_for(reg_token)? != TestResult::Positive {
            return Err(CwaError::NotPositive);
        }
        let ht = cryptokit::hash(reg_token);
        let count = self.tan_issue_counts.entry(ht).or_insert(0);
        if self.one_tan_per_token && *count >= 1 {
            return Err(CwaError::TanAlreadyIssued);
        }
        *count += 1;
        let tan: [u8; 16] = cryptokit::random_array(rng);
        self.tan_hashes.insert(cryptokit::hash(&tan));
        Ok(tan)
    }

    /// Back-end side: checks and deletes the TAN.
    pub fn verify_tan(&mut self, tan: &[u8; 16]) -> Result<(), CwaError> {
        let h = cryptokit::hash(tan);
        if self.tan_hashes.remove(&h) {
            self.used_tans.insert(h);
            Ok(())
        } else if self.used_tans.contains(&h) {
            Err(CwaError::TanReused)
        } else {
            Err(CwaError::InvalidTan)
        }
    }

    pub fn tans_issued(&self, reg_token: &[u8; 16]) -> u32 {
        self.tan_issue_counts.get(&cryptokit::hash(reg_token)).copied().unwrap_or(0)
    }

    /// Everything the server stores, for inspection.
    pub fn stored_values(&self) -> Vec<[u8; 32]> {
        let mut v: Vec<[u8; 32]> = self.guid_hashes.iter().copied().collect();
        v.extend(self.reg_tokens.iter().flat_map(|(a, b)| [*a, *b]));
        v.extend(self.tan_hashes.iter().copied());
        v.extend(self.used_tans.iter().copied());
        v
    }
}

#[derive(Clone, Debug)]
pub struct EfgsRow {
    pub tek: Tek,
    pub origin: Country,
    pub visited: BTreeSet<Country>,
    pub uploader: PhoneId,
}

#[derive(Clone, Debug, Default)]
pub struct Efgs {
    pub rows: Vec<EfgsRow>,
}

impl Efgs {
    pub fn sync(&mut self, rows: impl IntoIterator<Item = EfgsRow>) {
        self.rows.extend(rows);
    }

    pub fn fetch(&self, cc: Country) -> impl Iterator<Item = &EfgsRow> {
        self.rows
            .iter()
            .filter(move |r| r.origin == cc || r.visited.contains(&cc))
    }
}

#[derive(Clone, Debug)]
pub struct CwaBackend {
    pub country: Country,
    sig: SigKeyPair,
    /// Release delay after the end of a key's day when there is no federation-wide agreement.
    pub local_delay_hours: u64,
    released: Vec<SignedKey>,
    released_set: BTreeSet<[u8; 16]>,
}

impl CwaBackend {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R, country: Country) -> Self {
        Self {
            country,
            sig: SigKeyPair::generate(rng),
            local_delay_hours: 0,
            released: Vec::new(),
            released_set: BTreeSet::new(),
        }
    }

    pub fn public(&self) -> SigPublic {
        self.sig.public()
    }

    pub fn signing_key(&self) -> &SigKeyPair {
        &self.sig
    }

    fn check_batch(teks: &[Tek]) -> Result<(), CwaError> {
        if teks.len() > MAX_UPLOAD_KEYS {
            return Err(CwaError::TooManyKeys(teks.len()));
        }
        let mut days = BTreeSet::new();
        for t in teks {
            if !days.insert(t.day) {
                return Err(CwaError::DuplicateDay(t.day));
            }
        }
        Ok(())
    }

    /// Accepts up to 14 keys, one per day, authorised by a TAN; rows go to EFGS.
    pub fn upload_teks(
        &self,
        vs: &mut VerificationServer,
        efgs: &mut Efgs,
        uploader: PhoneId,
        teks: &[Tek],
        tan: &[u8; 16],
        visited: &BTreeSet<Country>,
    ) -> Result<usize, CwaError> {
        Self::check_batch(teks)?;
        vs.verify_tan(tan)?;
        self.accept_verified(efgs, uploader, teks, visited)
    }

    /// Second half of an upload, after the verification server vouched for the TAN.
    pub fn accept_verified(
        &self,
        efgs: &mut Efgs,
        uploader: PhoneId,
        teks: &[Tek],
        visited: &BTreeSet<Country>,
    ) -> Result<usize, CwaError> {
        Self::check_batch(teks)?;
        efgs.sync(teks.iter().map(|t| EfgsRow {
            tek: *t,
            origin: self.country,
            visited: visited.clone(),
            uploader,
        }));
        Ok(teks.len())
    }

    pub fn release_time(&self, time: &TimeConfig, cfg: &EfgsConfig, day: DayStamp) -> Tick {
        let hours = if cfg.expiry_agreement {
            cfg.release_delay_hours
        } else {
            self.local_delay_hours
        };
        Tick(time.day_start(DayStamp(day.0 + 1)).0 + hours * 3600)
    }

    /// Releases due rows relevant to this country; logs KeyReleased.
    pub fn publish(&mut self, world: &mut World, efgs: &Efgs, cfg: &EfgsConfig) -> usize {
        let time = *world.config();
        let now = world.now();
        let mut n = 0;
        let due: Vec<EfgsRow> = efgs
            .fetch(self.country)
            .filter(|r| !self.released_set.contains(&r.tek.key.0) && self.release_time(&time, cfg, r.tek.day) <= now)
            .cloned()
            .collect();
        for r in due {
            self.released_set.insert(r.tek.key.0);
            world.emit(EventKind::KeyReleased {
                backend: self.country,
                key: r.tek.digest(),
                uploader: r.uploader,
            });
            self.released.push(SignedKey::sign(&self.sig, r.tek, self.country));
            n += 1;
        }
        n
    }

    pub fn bundle(&self) -> SignedBundle {
        SignedBundle {
            country: self.country,
            keys: self.released.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CwaPhone {
    pub gaen: GaenPhone,
    pub country: Country,
    pub visited: BTreeSet<Country>,
    pub reg_token: Option<[u8; 16]>,
    pub tan: Option<[u8; 16]>,
}

impl CwaPhone {
    pub fn new(world: &mut World, id: PhoneId, country: Country) -> Self {
        world.emit(EventKind::PhoneInit { phone: id, country });
        Self {
            gaen: GaenPhone::new(id),
            country,
            visited: BTreeSet::new(),
            reg_token: None,
            tan: None,
        }
    }

    pub fn id(&self) -> PhoneId {
        self.gaen.id
    }

    /// Keys whose day lies in `[start, end)`.
    pub fn keys_in(&self, window: (DayStamp, DayStamp)) -> Vec<Tek> {
        self.gaen
            .keys
            .teks()
            .iter()
            .filter(|t| t.day >= window.0 && t.day < window.1)
            .copied()
            .collect()
    }

    pub fn check_exposure(
        &mut self,
        world: &mut World,
        bundles: &[SignedBundle],
        trust: &BTreeMap<Country, SigPublic>,
        cfg: &CwaConfig,
    ) -> usize {
        let teks = verified_keys(bundles, trust);
        let time = *world.config();
        let mode = MatchMode::Skew {
            epochs: cfg.skew_tolerance_epochs,
        };
        let hits = gaen::match_exposures(&self.gaen.observations, &teks, mode, &time);
        self.gaen.notify(world, &hits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cryptokit::Key128;
    use rand_chacha::ChaCha20Rng;
    use rand_core::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(21)
    }

    fn positive_vs(cfg: &CwaConfig, w: &mut World, r: &mut ChaCha20Rng) -> (VerificationServer, [u8; 16], [u8; 16]) {
        let mut vs = VerificationServer::new(Country::DE, cfg);
        let guid: [u8; 16] = cryptokit::random_array(r);
        vs.record_result(w, PhoneId(1), &guid, (DayStamp(0), DayStamp(1)), true);
        let token = vs.scan_and_register(r, &guid).unwrap();
        (vs, guid, token)
    }

    #[test]
    fn registration_and_polling() {
        let mut w = World::new(TimeConfig::default());
        let mut r = rng();
        let cfg = CwaConfig::default();
        let mut vs = VerificationServer::new(Country::DE, &cfg);
        let guid = [4u8; 16];
        let token = vs.scan_and_register(&mut r, &guid).unwrap();
        assert_eq!(vs.poll_result(&mut w, PhoneId(1), &token), Ok(TestResult::Pending));
        assert_eq!(vs.scan_and_register(&mut r, &guid), Err(CwaError::GuidAlreadyUsed));
        assert_eq!(vs.poll_result(&mut w, PhoneId(1), &[0; 16]), Err(CwaError::UnknownToken));
        vs.record_result(&mut w, PhoneId(1), &guid, (DayStamp(0), DayStamp(1)), true);
        assert_eq!(vs.poll_result(&mut w, PhoneId(1), &token), Ok(TestResult::Positive));
        assert!(vs.stored_values().iter().all(|v| v[..16] != guid && v[..16] != token));
    }

    #[test]
    fn tan_issue_limits() {
        let mut w = World::new(TimeConfig::default());
        let mut r = rng();
        let on = CwaConfig::default();
        let (mut vs, _, token) = positive_vs(&on, &mut w, &mut r);
        vs.request_tan(&mut r, &token).unwrap();
        assert_eq!(vs.request_tan(&mut r, &token), Err(CwaError::TanAlreadyIssued));
        assert_eq!(vs.tans_issued(&token), 1);

        let off = CwaConfig {
            one_tan_per_token: false,
            ..on
        };
        let (mut vs, guid, token) = positive_vs(&off, &mut w, &mut r);
        for _ in 0..5 {
            vs.request_tan(&mut r, &token).unwrap();
        }
        assert_eq!(vs.tans_issued(&token), 5);
        // The used guid registers again.
        let again = vs.scan_and_register(&mut r, &guid).unwrap();
        assert!(vs.request_tan(&mut r, &again).is_ok());

        let mut neg = VerificationServer::new(Country::DE, &on);
        let t = neg.scan_and_register(&mut r, &[1; 16]).unwrap();
        assert_eq!(neg.request_tan(&mut r, &t), Err(CwaError::NotPositive));
    }

    fn teks(n: u64) -> Vec<Tek> {
        (0..n)
            .map(|d| Tek {
                key: Key128([d as u8 + 1; 16]),
                day: DayStamp(d),
            })
            .collect()
    }

    #[test]
    fn upload_checks() {
        let mut w = World::new(TimeConfig::default());
        let mut r = rng();
        let cfg = CwaConfig::default();
        let (mut vs, _, token) = positive_vs(&cfg, &mut w, &mut r);
        let tan = vs.request_tan(&mut r, &token).unwrap();
        let be = CwaBackend::new(&mut r, Country::DE);
        let mut efgs = Efgs::default();
        let none = BTreeSet::new();
        assert_eq!(be.upload_teks(&mut vs, &mut efgs, PhoneId(1), &teks(15), &tan, &none), Err(CwaError::TooManyKeys(15)));
        let mut dup = teks(2);
        dup[1].day = DayStamp(0);
        assert_eq!(
            be.upload_teks(&mut vs, &mut efgs, PhoneId(1), &dup, &tan, &none),
            Err(CwaError::DuplicateDay(DayStamp(0)))
        );
        assert_eq!(be.upload_teks(&mut vs, &mut efgs, PhoneId(1), &teks(14), &tan, &none), Ok(14));
        assert_eq!(be.upload_teks(&mut vs, &mut efgs, PhoneId(1), &teks(1), &tan, &none), Err(CwaError::TanReused));
        assert_eq!(
            be.upload_teks(&mut vs, &mut efgs, PhoneId(1), &teks(1), &[7; 16], &none),
            Err(CwaError::InvalidTan)
        );
    }

    #[test]
    fn efgs_release_policies() {
        let mut w = World::new(TimeConfig::default());
        let mut r = rng();
        let cfg = CwaConfig::default();
        let (mut vs, _, token) = positive_vs(&cfg, &mut w, &mut r);
        let tan = vs.request_tan(&mut r, &token).unwrap();
        let de = CwaBackend::new(&mut r, Country::DE);
        let mut fr = CwaBackend::new(&mut r, Country::FR);
        let mut it = CwaBackend::new(&mut r, Country::IT);
        let mut efgs = Efgs::default();
        let visited: BTreeSet<Country> = [Country::FR].into_iter().collect();
        de.upload_teks(&mut vs, &mut efgs, PhoneId(1), &teks(1), &tan, &visited).unwrap();
        let agreed = EfgsConfig::default();
        w.advance(86_400 + 3599);
        assert_eq!(fr.publish(&mut w, &efgs, &agreed), 0);
        w.advance(3601);
        assert_eq!(fr.publish(&mut w, &efgs, &agreed), 1);
        assert_eq!(it.publish(&mut w, &efgs, &agreed), 0, "IT was not visited");
        let t = fr.release_time(w.config(), &agreed, DayStamp(0));
        assert_eq!(t, Tick(86_400 + 7200));
        let mut loose = fr.clone();
        loose.local_delay_hours = 0;
        let off = EfgsConfig {
            expiry_agreement: false,
            ..agreed
        };
        assert_eq!(loose.release_time(w.config(), &off, DayStamp(0)), Tick(86_400));
    }
}
