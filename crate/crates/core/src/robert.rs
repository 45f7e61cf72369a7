//! ROBERT: registration, EBID provisioning, HELLO broadcast, QR-authorised
//! upload, risk status and federation between national back ends.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand_core::{CryptoRng, RngCore};
use thiserror::Error;

use crate::cryptokit::{
    self, DhKeyPair, DhPublic, Key128, Key256, MacKey, Prp64Key, SigKeyPair, SigPublic, Signature, Tag40,
};
use crate::worldmodel::{
    epoch_of, within_14_days, Actor, Alignment, Country, DayStamp, EpochStamp, EventKind, MsgDigest,
    PhoneId, PlaceTag, Tick, TimeConfig, World, WorldError,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RobertConfig {
    pub hello_tolerance_s: u64,
    pub batch_limit: Option<usize>,
    pub bind_window_to_token: bool,
    pub long_validity_days: u64,
    pub short_validity_min: u64,
    pub sheet_days: u64,
    pub filter_self_uploads: bool,
    /// Epochs covered by one pre-hello.
    pub provision_epochs: u32,
    /// Allowed distance between the EBID epoch and the claimed reception epoch.
    pub epoch_tolerance: u64,
}

impl Default for RobertConfig {
    fn default() -> Self {
        Self {
            hello_tolerance_s: 5,
            batch_limit: None,
            bind_window_to_token: false,
            long_validity_days: 8,
            short_validity_min: 60,
            sheet_days: 10,
            filter_self_uploads: false,
            provision_epochs: 16 * 144,
            epoch_tolerance: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RobertError {
    #[error("{0} is already registered")]
    AlreadyRegistered(PhoneId),
    #[error("unknown id")]
    UnknownId,
    #[error("no EBID for epoch {0}")]
    ScheduleGap(u32),
    #[error("unknown country {0}")]
    UnknownCountry(Country),
    #[error("status request MAC does not verify")]
    BadMac,
    #[error(transparent)]
    World(#[from] WorldError),
}

pub fn mint_ebid(k_s: &Prp64Key, epoch: u32, id: u64) -> [u8; 8] {
    let block = cryptokit::pack_epoch_id(epoch, id).expect("epoch and id within packed widths");
    cryptokit::prp64_encrypt(k_s, &block).expect("8-byte block")
}

pub fn open_ebid(k_s: &Prp64Key, ebid: &[u8; 8]) -> (u32, u64) {
    cryptokit::unpack_epoch_id(cryptokit::prp64_decrypt(k_s, ebid).expect("8-byte block"))
}

fn ecc_mask(k_fed: &Key128, ebid: &[u8; 8]) -> u8 {
    let mut block = [0u8; 16];
    block[..8].copy_from_slice(ebid);
    cryptokit::block128_encrypt(k_fed, &block).expect("16-byte block")[0]
}

pub fn ecc_for(k_fed: &Key128, ebid: &[u8; 8], country: u8) -> u8 {
    ecc_mask(k_fed, ebid) ^ country
}

pub fn open_ecc(k_fed: &Key128, ebid: &[u8; 8], ecc: u8) -> u8 {
    ecc_mask(k_fed, ebid) ^ ecc
}

/// Lower 16 bits of the clock.
pub fn t16_of(tick: Tick) -> u16 {
    (tick.0 & 0xffff) as u16
}

/// Distance between two truncated timestamps, taking wrap-around into account.
pub fn t16_drift(a: u16, b: u16) -> u16 {
    a.wrapping_sub(b).min(b.wrapping_sub(a))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HelloMsg {
    pub ecc: u8,
    pub ebid: [u8; 8],
    pub t16: u16,
    pub mac: Tag40,
}

impl HelloMsg {
    fn mac_input(ecc: u8, ebid: &[u8; 8], t16: u16) -> [u8; 11] {
        let mut m = [0u8; 11];
        m[0] = ecc;
        m[1..9].copy_from_slice(ebid);
        m[9..].copy_from_slice(&t16.to_be_bytes());
        m
    }

    pub fn build(k_auth: &MacKey, ecc: u8, ebid: [u8; 8], t16: u16) -> Self {
        let mac = cryptokit::mac40(k_auth, &Self::mac_input(ecc, &ebid, t16));
        Self { ecc, ebid, t16, mac }
    }

    pub fn verify(&self, k_auth: &MacKey) -> bool {
        cryptokit::verify40(k_auth, &Self::mac_input(self.ecc, &self.ebid, self.t16), &self.mac)
    }

    /// Layout: EBID (8) | ECC (1) | t16 (2) | MAC (5).
    pub fn to_bytes(&self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[..8].copy_from_slice(&self.ebid);
        out[8] = self.ecc;
        out[9..11].copy_from_slice(&self.t16.to_be_bytes());
        out[11..].copy_from_slice(&self.mac.0);
        out
    }

    pub fn from_bytes(b: &[u8; 16]) -> Self {
        let mut ebid = [0u8; 8];
        ebid.copy_from_slice(&b[..8]);
        let mut mac = [0u8; 5];
        mac.copy_from_slice(&b[11..]);
        Self {
            ebid,
            ecc: b[8],
            t16: u16::from_be_bytes([b[9], b[10]]),
            mac: Tag40(mac),
        }
    }

    pub fn parse(b: &[u8]) -> Option<Self> {
        let arr: &[u8; 16] = b.try_into().ok()?;
        Some(Self::from_bytes(arr))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreHelloEntry {
    pub epoch: u32,
    pub ebid: [u8; 8],
    pub ecc: u8,
}

const ENTRY_LEN: usize = 13;

pub fn encode_prehello(entries: &[PreHelloEntry]) -> Vec<u8> {
    let mut out = Vec::with_capacity(entries.len() * ENTRY_LEN);
    for e in entries {
        out.extend_from_slice(&e.epoch.to_be_bytes());
        out.extend_from_slice(&e.ebid);
        out.push(e.ecc);
    }
    out
}

pub fn parse_prehello(bytes: &[u8]) -> Vec<PreHelloEntry> {
    bytes
        .chunks_exact(ENTRY_LEN)
        .map(|c| {
            let mut ebid = [0u8; 8];
            ebid.copy_from_slice(&c[4..12]);
            PreHelloEntry {
                epoch: u32::from_be_bytes([c[0], c[1], c[2], c[3]]),
                ebid,
                ecc: c[12],
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum QrKind {
    Long,
    Short,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RobertQr {
    pub token: [u8; 16],
    pub kind: QrKind,
    /// First valid day of a long code.
    pub start_day: DayStamp,
    /// Issue time; the validity origin of a short code.
    pub issued: Tick,
    pub issuer: Country,
    /// Contagious window bound into the signature, when that mitigation is on.
    pub window: Option<(DayStamp, DayStamp)>,
    pub sig: Signature,
}

impl RobertQr {
    fn signed_bytes(
        token: &[u8; 16],
        kind: QrKind,
        start_day: DayStamp,
        issued: Tick,
        issuer: Country,
        window: Option<(DayStamp, DayStamp)>,
    ) -> Vec<u8> {
        let mut m = Vec::with_capacity(48);
        m.extend_from_slice(b"ROBERT-QR");
        m.extend_from_slice(token);
        m.push(kind as u8);
        m.extend_from_slice(&start_day.0.to_be_bytes());
        m.extend_from_slice(&issued.0.to_be_bytes());
        m.push(issuer.0);
        match window {
            Some((a, b)) => {
                m.push(1);
                m.extend_from_slice(&a.0.to_be_bytes());
                m.extend_from_slice(&b.0.to_be_bytes());
            }
            None => m.push(0),
        }
        m
    }

    pub fn sign(
        key: &SigKeyPair,
        token: [u8; 16],
        kind: QrKind,
        start_day: DayStamp,
        issued: Tick,
        issuer: Country,
        window: Option<(DayStamp, DayStamp)>,
    ) -> Self {
        let sig = cryptokit::sign(key, &Self::signed_bytes(&token, kind, start_day, issued, issuer, window));
        Self {
            token,
            kind,
            start_day,
            issued,
            issuer,
            window,
            sig,
        }
    }

    pub fn verify(&self, pk: &SigPublic) -> bool {
        let m = Self::signed_bytes(
            &self.token,
            self.kind,
            self.start_day,
            self.issued,
            self.issuer,
            self.window,
        );
        cryptokit::verify(pk, &m, &self.sig)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut m = Self::signed_bytes(
            &self.token,
            self.kind,
            self.start_day,
            self.issued,
            self.issuer,
            self.window,
        );
        m.extend_from_slice(&self.sig.0);
        m
    }

    pub fn digest(&self) -> MsgDigest {
        MsgDigest::of(&self.token)
    }

    pub fn valid_at(&self, cfg: &RobertConfig, time: &TimeConfig, now: Tick) -> bool {
        match self.kind {
            QrKind::Long => {
                let today = time.day_of(EpochStamp(now.0 / time.epoch_length_s));
                today >= self.start_day && today.0 < self.start_day.0 + cfg.long_validity_days
            }
            QrKind::Short => now >= self.issued && now.0 - self.issued.0 <= cfg.short_validity_min * 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UploadRecord {
    pub hello: Vec<u8>,
    pub reception: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UploadMsg {
    pub qr: RobertQr,
    /// Contagious window as told by the health authority: days `[start, end)`.
    pub window: (DayStamp, DayStamp),
    pub records: Vec<UploadRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UploadError {
    #[error("invalid token")]
    InvalidToken,
    #[error("token expired")]
    TokenExpired,
    #[error("token already used")]
    TokenReused,
    #[error("batch of {got} records exceeds limit {limit}")]
    BatchTooLarge { limit: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("malformed record")]
    Malformed,
    #[error("timestamp does not match reception time")]
    StaleTimestamp,
    #[error("unknown emitter")]
    UnknownEmitter,
    #[error("bad MAC")]
    BadMac,
    #[error("EBID epoch does not match reception epoch")]
    EpochMismatch,
    #[error("reception outside the contagious window")]
    OutsideWindow,
    #[error("record of the uploader itself")]
    SelfUpload,
    #[error("record for an unknown country")]
    DropRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UploadOutcome {
    pub accepted: usize,
    pub forwarded: usize,
    pub rejected: Vec<(usize, RecordError)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatusRequest {
    pub hello: [u8; 16],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatusResponse {
    /// Country-aligned epoch of the exposure, when at risk.
    pub exposure: Option<u32>,
}

impl StatusResponse {
    pub fn to_bytes(&self) -> [u8; 5] {
        let mut out = [0u8; 5];
        if let Some(e) = self.exposure {
            out[0] = 1;
            out[1..].copy_from_slice(&e.to_be_bytes());
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct RegistrationTranscript {
    pub phone_pk: DhPublic,
    pub server_pk: DhPublic,
    pub ciphertext: Vec<u8>,
}

#[derive(Clone, Debug)]
struct IdEntry {
    phone: PhoneId,
    k_auth: MacKey,
}

#[derive(Clone, Debug)]
pub struct RobertBackend {
    pub country: Country,
    pub start: Tick,
    k_s: Prp64Key,
    dh: DhKeyPair,
    sig: SigKeyPair,
    id_table: BTreeMap<u64, IdEntry>,
    by_phone: BTreeMap<PhoneId, u64>,
    lee: BTreeMap<u64, BTreeSet<u32>>,
    qr_issued: BTreeMap<[u8; 16], RobertQr>,
    qr_used: BTreeSet<[u8; 16]>,
    notified: BTreeSet<u64>,
}

impl RobertBackend {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R, country: Country, start: Tick) -> Self {
        Self {
            country,
            start,
            k_s: Prp64Key::generate(rng),
            dh: DhKeyPair::generate(rng),
            sig: SigKeyPair::generate(rng),
            id_table: BTreeMap::new(),
            by_phone: BTreeMap::new(),
            lee: BTreeMap::new(),
            qr_issued: BTreeMap::new(),
            qr_used: BTreeSet::new(),
            notified: BTreeSet::new(),
        }
    }

    pub fn alignment(&self) -> Alignment {
        Alignment::CountryAligned {
            country: self.country,
            start: self.start,
        }
    }

    pub fn server_key(&self) -> &Prp64Key {
        &self.k_s
    }

    pub fn dh_public(&self) -> DhPublic {
        self.dh.public
    }

    pub fn dh_secret(&self) -> [u8; 32] {
        self.dh.secret_bytes()
    }

    pub fn signing_key(&self) -> &SigKeyPair {
        &self.sig
    }

    pub fn sig_public(&self) -> SigPublic {
        self.sig.public()
    }

    pub fn lee(&self, id: u64) -> Option<&BTreeSet<u32>> {
        self.lee.get(&id)
    }

    pub fn id_of(&self, phone: PhoneId) -> Option<u64> {
        self.by_phone.get(&phone).copied()
    }

    /// Tokens issued and not yet used.
    pub fn unused_qr_codes(&self) -> Vec<RobertQr> {
        self.qr_issued
            .values()
            .filter(|q| !self.qr_used.contains(&q.token))
            .cloned()
            .collect()
    }

    pub fn country_epoch(&self, time: &TimeConfig, tick: Tick) -> Result<u32, WorldError> {
        epoch_of(time, tick, self.alignment()).map(|e| e.0 as u32)
    }

    /// Global epoch at which the given country epoch starts.
    pub fn global_epoch(&self, time: &TimeConfig, i: u32) -> EpochStamp {
        EpochStamp((self.start.0 + i as u64 * time.epoch_length_s) / time.epoch_length_s)
    }

    pub fn issue_qr<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
        kind: QrKind,
        start_day: DayStamp,
        issued: Tick,
        window: Option<(DayStamp, DayStamp)>,
    ) -> RobertQr {
        let qr = RobertQr::sign(&self.sig, cryptokit::random_array(rng), kind, start_day, issued, self.country, window);
        self.qr_issued.insert(qr.token, qr.clone());
        qr
    }

    /// One long code per start day, `first_day .. first_day + sheet_days`.
    pub fn issue_sheet<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
        cfg: &RobertConfig,
        first_day: DayStamp,
        now: Tick,
    ) -> Vec<RobertQr> {
        (0..cfg.sheet_days)
            .map(|k| self.issue_qr(rng, QrKind::Long, DayStamp(first_day.0 + k), now, None))
            .collect()
    }

    fn mark_used(&mut self, token: [u8; 16]) -> bool {
        self.qr_used.insert(token)
    }

    pub fn handle_status(&mut self, time: &TimeConfig, k_fed: &Key128, req: &StatusRequest) -> Result<StatusResponse, RobertError> {
        let hello = HelloMsg::from_bytes(&req.hello);
        if open_ecc(k_fed, &hello.ebid, hello.ecc) != self.country.0 {
            return Err(RobertError::UnknownId);
        }
        let (_, id) = open_ebid(&self.k_s, &hello.ebid);
        let entry = self.id_table.get(&id).ok_or(RobertError::UnknownId)?;
        if !hello.verify(&entry.k_auth) {
            return Err(RobertError::BadMac);
        }
        let _ = time;
        let exposure = match self.lee.get(&id) {
            Some(set) if !set.is_empty() && !self.notified.contains(&id) => {
                self.notified.insert(id);
                set.iter().next_back().copied()
            }
            _ => None,
        };
        Ok(StatusResponse { exposure })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Received {
    pub hello: [u8; 16],
    pub epoch: u32,
    pub tick: Tick,
}

#[derive(Clone, Debug)]
pub struct RobertPhone {
    pub id: PhoneId,
    pub country: Country,
    start: Tick,
    dh: DhKeyPair,
    k_auth: MacKey,
    k_enc: Key256,
    schedule: BTreeMap<u32, PreHelloEntry>,
    own: BTreeSet<[u8; 8]>,
    received: Vec<Received>,
    at_risk: bool,
}

impl RobertPhone {
    pub fn dh_public(&self) -> DhPublic {
        self.dh.public
    }

    pub fn k_auth(&self) -> &MacKey {
        &self.k_auth
    }

    pub fn k_enc(&self) -> &Key256 {
        &self.k_enc
    }

    pub fn schedule(&self) -> impl Iterator<Item = &PreHelloEntry> {
        self.schedule.values()
    }

    pub fn received(&self) -> &[Received] {
        &self.received
    }

    pub fn at_risk(&self) -> bool {
        self.at_risk
    }

    pub fn country_epoch(&self, time: &TimeConfig, now: Tick) -> Result<u32, WorldError> {
        let align = Alignment::CountryAligned {
            country: self.country,
            start: self.start,
        };
        epoch_of(time, now, align).map(|e| e.0 as u32)
    }

    pub fn hello_now(&self, world: &World) -> Result<HelloMsg, RobertError> {
        let i = self.country_epoch(world.config(), world.now())?;
        let entry = self.schedule.get(&i).ok_or(RobertError::ScheduleGap(i))?;
        Ok(HelloMsg::build(&self.k_auth, entry.ecc, entry.ebid, t16_of(world.now())))
    }

    pub fn broadcast(&self, world: &mut World, place: PlaceTag) -> Result<[u8; 16], RobertError> {
        let bytes = self.hello_now(world)?.to_bytes();
        world.ble_write(Actor::Phone(self.id), place, &bytes)?;
        Ok(bytes)
    }

    /// Reads the cell and stores every HELLO whose timestamp is within tolerance.
    pub fn receive(&mut self, world: &mut World, place: PlaceTag, cfg: &RobertConfig) -> Result<usize, RobertError> {
        let msgs = world.ble_read(Actor::Phone(self.id), place)?;
        let now = world.now();
        let epoch = self.country_epoch(world.config(), now)?;
        let mut n = 0;
        for m in msgs {
            let Some(h) = HelloMsg::parse(&m) else { continue };
            if t16_drift(h.t16, t16_of(now)) as u64 > cfg.hello_tolerance_s || self.own.contains(&h.ebid) {
                continue;
            }
            self.received.push(Received {
                hello: h.to_bytes(),
                epoch,
                tick: now,
            });
            n += 1;
        }
        Ok(n)
    }

    /// Upload message with the records received inside the contagious window.
    pub fn prepare_upload(&self, time: &TimeConfig, diag: &Diagnosis) -> UploadMsg {
        let (start, end) = diag.window;
        let records = self
            .received
            .iter()
            .filter(|r| {
                let d = time.day_of(EpochStamp(r.tick.0 / time.epoch_length_s));
                d >= start && d < end
            })
            .map(|r| UploadRecord {
                hello: r.hello.to_vec(),
                reception: r.tick,
            })
            .collect();
        UploadMsg {
            qr: diag.qr.clone(),
            window: diag.window,
            records,
        }
    }

    pub fn status_request(&self, world: &World) -> Result<StatusRequest, RobertError> {
        Ok(StatusRequest {
            hello: self.hello_now(world)?.to_bytes(),
        })
    }

    /// Handles the back end's answer; logs the at-risk claim with the exposure time.
    pub fn on_status_response(&mut self, world: &mut World, resp: StatusResponse) -> bool {
        let Some(i) = resp.exposure else { return false };
        if self.at_risk {
            return false;
        }
        self.at_risk = true;
        let time = *world.config();
        let epoch = EpochStamp((self.start.0 + i as u64 * time.epoch_length_s) / time.epoch_length_s);
        world.emit(EventKind::ClaimAtRisk {
            phone: self.id,
            day_close: time.day_of(epoch),
            epoch_close: epoch,
            matched_key: None,
        });
        true
    }
}

/// What the health authority hands a positive patient.
#[derive(Clone, Debug)]
pub struct Diagnosis {
    pub qr: RobertQr,
    pub window: (DayStamp, DayStamp),
}

#[derive(Clone, Debug)]
pub struct RobertFederation {
    pub cfg: RobertConfig,
    pub time: TimeConfig,
    k_fed: Key128,
    backends: BTreeMap<Country, RobertBackend>,
}

impl RobertFederation {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R, cfg: RobertConfig, time: TimeConfig, countries: &[(Country, Tick)]) -> Self {
        let k_fed = Key128::generate(rng);
        let backends = countries
            .iter()
            .map(|&(cc, start)| (cc, RobertBackend::new(rng, cc, start)))
            .collect();
        Self {
            cfg,
            time,
            k_fed,
            backends,
        }
    }

    pub fn federation_key(&self) -> &Key128 {
        &self.k_fed
    }

    pub fn backend(&self, cc: Country) -> &RobertBackend {
        &self.backends[&cc]
    }

    pub fn backend_mut(&mut self, cc: Country) -> &mut RobertBackend {
        self.backends.get_mut(&cc).expect("country in federation")
    }

    /// Registers a phone holding `keypair`; logs PhoneInit.
    pub fn register<R: RngCore + CryptoRng>(
        &mut self,
        world: &mut World,
        rng: &mut R,
        phone: PhoneId,
        cc: Country,
        keypair: DhKeyPair,
    ) -> Result<(RobertPhone, RegistrationTranscript), RobertError> {
        let time = self.time;
        let provision = self.cfg.provision_epochs;
        let k_fed = self.k_fed;
        let backend = self.backends.get_mut(&cc).ok_or(RobertError::UnknownCountry(cc))?;
        if backend.by_phone.contains_key(&phone) {
            return Err(RobertError::AlreadyRegistered(phone));
        }
        let id = loop {
            let mut b = [0u8; 8];
            rng.fill_bytes(&mut b[3..]);
            let id = u64::from_be_bytes(b);
            if !backend.id_table.contains_key(&id) {
                break id;
            }
        };
        let shared = cryptokit::dh_shared(&backend.dh, &keypair.public);
        let (k_enc, k_auth) = cryptokit::derive(&shared);
        backend.id_table.insert(id, IdEntry { phone, k_auth });
        backend.by_phone.insert(phone, id);
        let first = backend.country_epoch(&time, world.now())?;
        let entries: Vec<PreHelloEntry> = (first..first + provision)
            .map(|i| {
                let ebid = mint_ebid(&backend.k_s, i, id);
                PreHelloEntry {
                    epoch: i,
                    ebid,
                    ecc: ecc_for(&k_fed, &ebid, cc.0),
                }
            })
            .collect();
        let ciphertext = cryptokit::ctr256(&k_enc, 0, &encode_prehello(&entries));
        let transcript = RegistrationTranscript {
            phone_pk: keypair.public,
            server_pk: backend.dh.public,
            ciphertext,
        };
        world.emit(EventKind::PhoneInit { phone, country: cc });

        // Phone side.
        let p_shared = cryptokit::dh_shared(&keypair, &transcript.server_pk);
        let (p_enc, p_auth) = cryptokit::derive(&p_shared);
        let plain = cryptokit::ctr256(&p_enc, 0, &transcript.ciphertext);
        let schedule: BTreeMap<u32, PreHelloEntry> = parse_prehello(&plain).into_iter().map(|e| (e.epoch, e)).collect();
        let own = schedule.values().map(|e| e.ebid).collect();
        let phone = RobertPhone {
            id: phone,
            country: cc,
            start: backend.start,
            dh: keypair,
            k_auth: p_auth,
            k_enc: p_enc,
            schedule,
            own,
            received: Vec::new(),
            at_risk: false,
        };
        Ok((phone, transcript))
    }

    /// Issues a code for a positive patient and logs the diagnosis.
    pub fn diagnose<R: RngCore + CryptoRng>(
        &mut self,
        world: &mut World,
        rng: &mut R,
        cc: Country,
        phone: PhoneId,
        window: (DayStamp, DayStamp),
    ) -> Diagnosis {
        let bound = self.cfg.bind_window_to_token.then_some(window);
        let qr = self
            .backend_mut(cc)
            .issue_qr(rng, QrKind::Long, world.day(), world.now(), bound);
        log_diagnosis(world, cc, phone, window);
        Diagnosis { qr, window }
    }

    /// Runs the upload checks at back end `cc`; accepted EBIDs go to the owner's LEE.
    pub fn upload(&mut self, world: &mut World, cc: Country, uploader: PhoneId, msg: &UploadMsg) -> Result<UploadOutcome, UploadError> {
        let time = self.time;
        let cfg = self.cfg;
        let now = world.now();
        if !self.backends.contains_key(&cc) {
            return Err(UploadError::InvalidToken);
        }
        if let Some(limit) = cfg.batch_limit {
            if msg.records.len() > limit {
                return Err(UploadError::BatchTooLarge {
                    limit,
                    got: msg.records.len(),
                });
            }
        }
        // (1) token
        let qr = &msg.qr;
        let issuer = self.backends.get(&qr.issuer).ok_or(UploadError::InvalidToken)?;
        if !qr.verify(&issuer.sig.public()) {
            return Err(UploadError::InvalidToken);
        }
        if !qr.valid_at(&cfg, &time, now) {
            return Err(UploadError::TokenExpired);
        }
        if issuer.qr_used.contains(&qr.token) {
            return Err(UploadError::TokenReused);
        }
        self.backend_mut(qr.issuer).mark_used(qr.token);
        let window = if cfg.bind_window_to_token { qr.window } else { None };

        let mut out = UploadOutcome::default();
        for (idx, rec) in msg.records.iter().enumerate() {
            match self.process_record(&time, &cfg, now, cc, uploader, window, rec) {
                Ok(forwarded) => {
                    out.accepted += 1;
                    if forwarded {
                        out.forwarded += 1;
                    }
                }
                Err(e) => out.rejected.push((idx, e)),
            }
        }
        if out.accepted > 0 {
            world.emit(EventKind::UploadAccepted {
                backend: cc,
                uploader,
                token: qr.digest(),
                token_issuer: qr.issuer,
                records: out.accepted as u32,
            });
            world.emit(EventKind::MarkPositive { phone: uploader, backend: cc });
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn process_record(
        &mut self,
        time: &TimeConfig,
        cfg: &RobertConfig,
        now: Tick,
        cc: Country,
        uploader: PhoneId,
        window: Option<(DayStamp, DayStamp)>,
        rec: &UploadRecord,
    ) -> Result<bool, RecordError> {
        // (2) parse
        let h = HelloMsg::parse(&rec.hello).ok_or(RecordError::Malformed)?;
        // (3) timestamp
        if t16_drift(h.t16, t16_of(rec.reception)) as u64 > cfg.hello_tolerance_s {
            return Err(RecordError::StaleTimestamp);
        }
        // (4) country, forwarding over the federation channel
        let owner_cc = Country(open_ecc(&self.k_fed, &h.ebid, h.ecc));
        let forwarded = owner_cc != cc;
        let owner = self.backends.get_mut(&owner_cc).ok_or(RecordError::DropRecord)?;
        // (5) EBID
        let (i, id) = open_ebid(&owner.k_s, &h.ebid);
        // (6) registered
        let entry = owner.id_table.get(&id).ok_or(RecordError::UnknownEmitter)?;
        // (7) epoch
        let rec_i = owner.country_epoch(time, rec.reception).map_err(|_| RecordError::EpochMismatch)?;
        if (i as u64).abs_diff(rec_i as u64) > cfg.epoch_tolerance {
            return Err(RecordError::EpochMismatch);
        }
        let today = time.day_of(EpochStamp(now.0 / time.epoch_length_s));
        let rec_day = time.day_of(owner.global_epoch(time, i));
        if !within_14_days(rec_day, today) {
            return Err(RecordError::EpochMismatch);
        }
        if let Some((start, end)) = window {
            if rec_day < start || rec_day >= end {
                return Err(RecordError::OutsideWindow);
            }
        }
        if cfg.filter_self_uploads && entry.phone == uploader {
            return Err(RecordError::SelfUpload);
        }
        // (8)-(9) MAC under the emitter's key
        if !h.verify(&entry.k_auth) {
            return Err(RecordError::BadMac);
        }
        owner.lee.entry(id).or_default().insert(i);
        Ok(forwarded)
    }

    /// Full status round trip for an honest phone.
    pub fn status(&mut self, world: &mut World, phone: &mut RobertPhone) -> Result<bool, RobertError> {
        let req = phone.status_request(world)?;
        let time = self.time;
        let k_fed = self.k_fed;
        let resp = self.backend_mut(phone.country).handle_status(&time, &k_fed, &req)?;
        Ok(phone.on_status_response(world, resp))
    }
}

/// Logs the health authority's claim and the positive test.
pub fn log_diagnosis(world: &mut World, cc: Country, phone: PhoneId, window: (DayStamp, DayStamp)) {
    world.emit(EventKind::HaClaimInfected {
        phone,
        day_contag: window.0,
        day_test: window.1,
    });
    world.emit(EventKind::TestPositive { phone, authority: cc });
}
