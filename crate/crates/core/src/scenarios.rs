//! Scenario library: honest baselines, one script per attack pattern,
//! mitigation variants, federation timing and group attacks.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Display;

use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;
use thiserror::Error;

use crate::adversary::{Adversary, Capability, Corruption, Item, Provenance};
use crate::config::{ConfigError, SimConfig};
use crate::cryptokit::{self, DhKeyPair, MacKey, SigKeyPair, SigPublic};
use crate::cwa::{CwaBackend, CwaPhone, Efgs, VerificationServer};
use crate::dp3t::{AuthCode, Dp3tBackend, Dp3tHa, Dp3tPhone, SignedBundle, SignedKey, TestDbEntry, UploadTuple};
use crate::gaen::{GaenPhone, Tek};
use crate::propcheck::{self, PatternId, Protocol, Violation};
use crate::robert::{
    self, Diagnosis, QrKind, RegistrationTranscript, RobertFederation, RobertPhone, RobertQr, StatusResponse,
    UploadMsg, UploadOutcome, UploadRecord,
};
use crate::worldmodel::{Agent, Country, DayStamp, EventKind, PayloadTag, PhoneId, PlaceTag, Tick, Trace, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expectation {
    NoViolation,
    /// Exactly this pattern is observed.
    Violation(PatternId),
    /// Exactly this set of patterns is observed.
    Patterns(&'static [PatternId]),
    /// No violation once the named flag is in force.
    ViolationAbsentWithMitigation(&'static str),
}

impl Expectation {
    pub fn patterns(&self) -> BTreeSet<PatternId> {
        match self {
            Expectation::Violation(p) => [*p].into_iter().collect(),
            Expectation::Patterns(ps) => ps.iter().copied().collect(),
            _ => BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{step}: {detail}")]
    Step { step: &'static str, detail: String },
}

type Res<T> = Result<T, ScenarioError>;

trait OrStep<T> {
    fn step(self, step: &'static str) -> Res<T>;
}

impl<T, E: Display> OrStep<T> for Result<T, E> {
    fn step(self, step: &'static str) -> Res<T> {
        self.map_err(|e| ScenarioError::Step {
            step,
            detail: e.to_string(),
        })
    }
}

fn fail<T>(step: &'static str, detail: &str) -> Res<T> {
    Err(ScenarioError::Step {
        step,
        detail: detail.to_string(),
    })
}

/// Mutable state every script works on.
pub struct Sim {
    pub world: World,
    pub rng: ChaCha20Rng,
    pub cfg: SimConfig,
    pub adv: Adversary,
}

impl Sim {
    pub fn new(cfg: SimConfig, seed: u64) -> Self {
        Self {
            world: World::new(cfg.time),
            rng: ChaCha20Rng::seed_from_u64(seed),
            cfg,
            adv: Adversary::new(cfg.time),
        }
    }

    fn goto(&mut self, day: u64, epoch: u64, sec: u64) {
        let t = &self.cfg.time;
        let tick = day * t.day_length_s() + epoch * t.epoch_length_s + sec;
        self.world.advance_to(Tick(tick));
    }

    #[allow(clippy::too_many_arguments)]
    fn corrupt(
        &mut self,
        target: Agent,
        capability: Capability,
        payload: &[u8],
        tag: PayloadTag,
        subject: Option<u32>,
        revealed: Vec<Item>,
    ) -> Res<()> {
        let c = Corruption {
            target,
            capability,
            payload,
            tag,
            subject: subject.map(PhoneId),
        };
        self.adv.corrupt(&mut self.world, c, revealed).step("corrupt")
    }

    #[allow(clippy::too_many_arguments)]
    fn inject(
        &mut self,
        target: Agent,
        capability: Capability,
        payload: &[u8],
        tag: PayloadTag,
        subject: Option<u32>,
        uses: &[Item],
    ) -> Res<()> {
        let c = Corruption {
            target,
            capability,
            payload,
            tag,
            subject: subject.map(PhoneId),
        };
        self.adv.act_on_channel(&mut self.world, c, uses).step("inject")
    }
}

fn day(d: u64) -> DayStamp {
    DayStamp(d)
}

fn q(n: u32) -> PlaceTag {
    PlaceTag(n)
}

fn phone(n: u32) -> Agent {
    Agent::Phone(PhoneId(n))
}

const ROBERT_CC: Country = Country::FR;
const DP3T_CC: Country = Country::IT;
const CWA_CC: Country = Country::DE;

// ---------------------------------------------------------------- ROBERT

struct Rob {
    fed: RobertFederation,
    phones: BTreeMap<u32, RobertPhone>,
    transcripts: BTreeMap<u32, RegistrationTranscript>,
}

impl Rob {
    fn new(sim: &mut Sim) -> Self {
        Self {
            fed: RobertFederation::new(&mut sim.rng, sim.cfg.robert, sim.cfg.time, &[(ROBERT_CC, Tick(0))]),
            phones: BTreeMap::new(),
            transcripts: BTreeMap::new(),
        }
    }

    fn join(&mut self, sim: &mut Sim, ids: &[u32]) -> Res<()> {
        for &id in ids {
            let kp = DhKeyPair::generate(&mut sim.rng);
            self.join_with(sim, id, kp)?;
        }
        Ok(())
    }

    fn join_with(&mut self, sim: &mut Sim, id: u32, kp: DhKeyPair) -> Res<RegistrationTranscript> {
        let (p, t) = self
            .fed
            .register(&mut sim.world, &mut sim.rng, PhoneId(id), ROBERT_CC, kp)
            .step("register")?;
        self.phones.insert(id, p);
        self.transcripts.insert(id, t.clone());
        Ok(t)
    }

    fn meet(&mut self, sim: &mut Sim, ids: &[u32], place: PlaceTag) -> Res<()> {
        for &id in ids {
            sim.world.visit(PhoneId(id), place);
        }
        for &id in ids {
            self.phones[&id].broadcast(&mut sim.world, place).step("broadcast")?;
        }
        for &id in ids {
            let p = self.phones.get_mut(&id).expect("registered");
            p.receive(&mut sim.world, place, &sim.cfg.robert).step("receive")?;
        }
        Ok(())
    }

    fn diagnose(&mut self, sim: &mut Sim, id: u32, window: (DayStamp, DayStamp)) -> Diagnosis {
        self.fed
            .diagnose(&mut sim.world, &mut sim.rng, ROBERT_CC, PhoneId(id), window)
    }

    fn records_of(&self, id: u32) -> Vec<UploadRecord> {
        self.phones[&id]
            .received()
            .iter()
            .map(|r| UploadRecord {
                hello: r.hello.to_vec(),
                reception: r.tick,
            })
            .collect()
    }

    fn upload(&mut self, sim: &mut Sim, uploader: u32, msg: &UploadMsg) -> Res<UploadOutcome> {
        self.fed
            .upload(&mut sim.world, ROBERT_CC, PhoneId(uploader), msg)
            .step("upload")
    }

    fn status(&mut self, sim: &mut Sim, ids: &[u32]) -> Res<()> {
        for id in ids {
            let p = self.phones.get_mut(id).expect("registered");
            self.fed.status(&mut sim.world, p).step("status")?;
        }
        Ok(())
    }
}

fn hellos(records: &[UploadRecord]) -> Vec<Item> {
    records
        .iter()
        .filter_map(|r| crate::adversary::observed_item(&r.hello))
        .collect()
}

fn concat(records: &[UploadRecord]) -> Vec<u8> {
    records.iter().flat_map(|r| r.hello.iter().copied()).collect()
}

fn honest_robert(sim: &mut Sim) -> Res<()> {
    let mut r = Rob::new(sim);
    r.join(sim, &[1, 2, 3])?;
    sim.goto(0, 10, 0);
    r.meet(sim, &[1, 2], q(1))?;
    r.meet(sim, &[3], q(2))?;
    sim.goto(2, 0, 0);
    let diag = r.diagnose(sim, 1, (day(0), day(2)));
    let msg = r.phones[&1].prepare_upload(&sim.cfg.time, &diag);
    r.upload(sim, 1, &msg)?;
    sim.goto(2, 1, 0);
    r.status(sim, &[1, 2, 3])
}

/// A compromised non-positive phone uploads its contacts with a code it should not hold.
fn robert_foreign_qr_upload(sim: &mut Sim, r: &mut Rob, qr: RobertQr) -> Res<()> {
    let diag = Diagnosis {
        qr,
        window: (day(0), day(1)),
    };
    let msg = r.phones[&2].prepare_upload(&sim.cfg.time, &diag);
    let qr_item = Item::QrCode(diag.qr.to_bytes());
    sim.inject(phone(2), Capability::CorruptPhoneSend, &diag.qr.token, PayloadTag::Upload, Some(2), &[qr_item])?;
    let out = r.upload(sim, 2, &msg)?;
    if out.accepted == 0 {
        return fail("upload", "no record accepted");
    }
    Ok(())
}

fn robert_upload_setup(sim: &mut Sim) -> Res<Rob> {
    let mut r = Rob::new(sim);
    r.join(sim, &[1, 2, 3])?;
    sim.goto(0, 10, 0);
    r.meet(sim, &[2, 3], q(1))?;
    sim.goto(1, 0, 0);
    Ok(r)
}

fn robert_a1(sim: &mut Sim) -> Res<()> {
    let mut r = robert_upload_setup(sim)?;
    let diag = r.diagnose(sim, 1, (day(0), day(1)));
    let qr = diag.qr.clone();
    sim.corrupt(
        phone(1),
        Capability::CorruptPhoneReceive,
        &qr.token,
        PayloadTag::QrCode,
        Some(1),
        alloc::vec![Item::QrCode(qr.to_bytes())],
    )?;
    robert_foreign_qr_upload(sim, &mut r, qr)
}

fn robert_a2(sim: &mut Sim) -> Res<()> {
    let mut r = robert_upload_setup(sim)?;
    let now = sim.world.now();
    let today = sim.world.day();
    let cfg = sim.cfg.robert;
    let sheet = r.fed.backend_mut(ROBERT_CC).issue_sheet(&mut sim.rng, &cfg, today, now);
    let qr = sheet[0].clone();
    sim.corrupt(
        Agent::Backend(ROBERT_CC),
        Capability::CorruptQRList,
        &qr.token,
        PayloadTag::QrCode,
        None,
        alloc::vec![Item::QrCode(qr.to_bytes())],
    )?;
    robert_foreign_qr_upload(sim, &mut r, qr)
}

fn robert_a3(sim: &mut Sim) -> Res<()> {
    let mut r = robert_upload_setup(sim)?;
    let diag = r.diagnose(sim, 1, (day(0), day(1)));
    // The patient's upload is intercepted at the back end and never processed.
    let qr = diag.qr.clone();
    sim.corrupt(
        Agent::Backend(ROBERT_CC),
        Capability::CorruptBReceive,
        &qr.token,
        PayloadTag::QrCode,
        Some(1),
        alloc::vec![Item::QrCode(qr.to_bytes())],
    )?;
    robert_foreign_qr_upload(sim, &mut r, qr)
}

fn robert_a4(sim: &mut Sim) -> Res<()> {
    let mut r = robert_upload_setup(sim)?;
    let secret = r.fed.backend(ROBERT_CC).signing_key().secret_bytes();
    sim.corrupt(
        Agent::Backend(ROBERT_CC),
        Capability::CorruptBState,
        &secret,
        PayloadTag::SigningKey,
        None,
        alloc::vec![Item::SigningKey(secret)],
    )?;
    sim.adv.require(&Item::SigningKey(secret)).step("forge")?;
    let sk = SigKeyPair::from_secret(secret);
    let token: [u8; 16] = cryptokit::random_array(&mut sim.rng);
    let qr = RobertQr::sign(&sk, token, QrKind::Long, sim.world.day(), sim.world.now(), ROBERT_CC, None);
    sim.adv.learn([Item::QrCode(qr.to_bytes())], Provenance::Forged);
    robert_foreign_qr_upload(sim, &mut r, qr)
}

fn robert_x1(sim: &mut Sim) -> Res<()> {
    let mut r = Rob::new(sim);
    r.join(sim, &[1, 2])?;
    sim.goto(0, 10, 0);
    r.meet(sim, &[1, 2], q(1))?;
    let t1 = sim.world.now();
    sim.adv.ble_read(&mut sim.world, q(1)).step("eavesdrop")?;
    let own = r.phones[&1].hello_now(&sim.world).step("hello")?.to_bytes();
    sim.adv.require(&Item::Hello(own)).step("eavesdrop")?;

    sim.goto(2, 0, 0);
    let diag = r.diagnose(sim, 1, (day(0), day(2)));
    let mut msg = r.phones[&1].prepare_upload(&sim.cfg.time, &diag);
    let extra = UploadRecord {
        hello: own.to_vec(),
        reception: t1,
    };
    sim.inject(phone(1), Capability::CorruptPhoneSend, &own, PayloadTag::Upload, Some(1), &[Item::Hello(own)])?;
    msg.records.push(extra);
    r.upload(sim, 1, &msg)?;
    sim.goto(2, 1, 0);
    r.status(sim, &[1, 2])
}

fn robert_x2(sim: &mut Sim) -> Res<()> {
    let mut r = Rob::new(sim);
    r.join(sim, &[1, 2, 3])?;
    sim.goto(0, 10, 0);
    r.meet(sim, &[1, 2], q(1))?;
    sim.goto(2, 10, 0);
    r.meet(sim, &[1, 3], q(2))?;
    sim.goto(3, 0, 0);
    let diag = r.diagnose(sim, 1, (day(2), day(3)));
    let mut msg = r.phones[&1].prepare_upload(&sim.cfg.time, &diag);
    let all = r.records_of(1);
    sim.corrupt(phone(1), Capability::CorruptPhoneReceived, &concat(&all), PayloadTag::Witnessed, Some(1), hellos(&all))?;
    sim.inject(phone(1), Capability::CorruptPhoneSend, &concat(&all), PayloadTag::Upload, Some(1), &hellos(&all))?;
    msg.records = all;
    r.upload(sim, 1, &msg)?;
    sim.goto(3, 1, 0);
    r.status(sim, &[2, 3])
}

fn robert_x3(sim: &mut Sim) -> Res<()> {
    let mut r = Rob::new(sim);
    r.join(sim, &[1, 2])?;
    sim.goto(0, 10, 0);
    r.meet(sim, &[2], q(2))?;
    let msgs = sim.adv.ble_read(&mut sim.world, q(2)).step("relay read")?;
    sim.world.advance(2);
    for m in &msgs {
        sim.adv.ble_write(&mut sim.world, q(1), m).step("relay write")?;
    }
    sim.world.visit(PhoneId(1), q(1));
    let cfg = sim.cfg.robert;
    r.phones.get_mut(&1).expect("registered").receive(&mut sim.world, q(1), &cfg).step("receive")?;
    sim.goto(2, 0, 0);
    let diag = r.diagnose(sim, 1, (day(0), day(2)));
    let msg = r.phones[&1].prepare_upload(&sim.cfg.time, &diag);
    r.upload(sim, 1, &msg)?;
    sim.goto(2, 1, 0);
    r.status(sim, &[2])
}

/// The positive phone uploads what group members witnessed.
fn robert_group_upload(sim: &mut Sim, r: &mut Rob, positive: u32, members: &[u32]) -> Res<()> {
    let diag = r.diagnose(sim, positive, (day(0), day(1)));
    let mut msg = r.phones[&positive].prepare_upload(&sim.cfg.time, &diag);
    let mut foreign = Vec::new();
    for &m in members {
        let recs = r.records_of(m);
        sim.corrupt(phone(m), Capability::CorruptPhoneReceived, &concat(&recs), PayloadTag::Witnessed, Some(m), hellos(&recs))?;
        foreign.extend(recs);
    }
    sim.inject(
        phone(positive),
        Capability::CorruptPhoneSend,
        &concat(&foreign),
        PayloadTag::Upload,
        Some(positive),
        &hellos(&foreign),
    )?;
    msg.records.extend(foreign);
    r.upload(sim, positive, &msg)?;
    Ok(())
}

fn robert_x4(sim: &mut Sim) -> Res<()> {
    let mut r = Rob::new(sim);
    r.join(sim, &[1, 2, 3])?;
    sim.goto(0, 10, 0);
    r.meet(sim, &[2, 3], q(2))?;
    sim.goto(1, 0, 0);
    robert_group_upload(sim, &mut r, 1, &[2])?;
    sim.goto(1, 1, 0);
    r.status(sim, &[3])
}

fn robert_x5(sim: &mut Sim) -> Res<()> {
    let mut r = Rob::new(sim);
    r.join(sim, &[1])?;
    sim.goto(1, 0, 0);
    let resp = StatusResponse { exposure: Some(30) };
    sim.inject(
        Agent::Backend(ROBERT_CC),
        Capability::CorruptBSend,
        &resp.to_bytes(),
        PayloadTag::StatusResponse,
        Some(1),
        &[],
    )?;
    let p = r.phones.get_mut(&1).expect("registered");
    p.on_status_response(&mut sim.world, resp);
    Ok(())
}

/// Infected phone 2 uploads a minted HELLO for the victim at `tick`.
fn robert_minted_upload(sim: &mut Sim, r: &mut Rob, hello: [u8; 16], tick: Tick) -> Res<()> {
    sim.goto(1, 30, 0);
    let diag = r.diagnose(sim, 2, (day(0), day(2)));
    let mut msg = r.phones[&2].prepare_upload(&sim.cfg.time, &diag);
    sim.inject(phone(2), Capability::CorruptPhoneSend, &hello, PayloadTag::Upload, Some(2), &[Item::Hello(hello)])?;
    msg.records.push(UploadRecord {
        hello: hello.to_vec(),
        reception: tick,
    });
    let out = r.upload(sim, 2, &msg)?;
    if out.accepted == 0 {
        return fail("upload", "minted record rejected");
    }
    sim.goto(1, 31, 0);
    r.status(sim, &[1])
}

fn robert_x6(sim: &mut Sim) -> Res<()> {
    let mut r = Rob::new(sim);
    r.join(sim, &[1, 2])?;
    let t = r.transcripts[&1].clone();
    sim.adv.learn(
        [Item::Registration {
            phone_pk: t.phone_pk.0,
            server_pk: t.server_pk.0,
            ciphertext: t.ciphertext.clone(),
        }],
        Provenance::Internet,
    );
    sim.goto(1, 0, 0);
    let b = r.fed.backend(ROBERT_CC);
    let k_s = *b.server_key();
    let dh = b.dh_secret();
    let sig = b.signing_key().secret_bytes();
    let k_fed = *r.fed.federation_key();
    let mut state = Vec::new();
    state.extend_from_slice(&k_s.0);
    state.extend_from_slice(&dh);
    state.extend_from_slice(&sig);
    state.extend_from_slice(&k_fed.0);
    sim.corrupt(
        Agent::Backend(ROBERT_CC),
        Capability::CorruptBState,
        &state,
        PayloadTag::ServerState,
        None,
        alloc::vec![
            Item::RobertServerKey(k_s.0),
            Item::DhSecret(dh),
            Item::SigningKey(sig),
            Item::FederationKey(k_fed.0),
        ],
    )?;
    let (_, auth) = sim.adv.session_for(&t.phone_pk.0).ok_or(ScenarioError::Step {
        step: "derive",
        detail: "session keys not derivable".into(),
    })?;
    let target = Tick(sim.cfg.time.day_length_s() + 20 * sim.cfg.time.epoch_length_s);
    let i = r.fed.backend(ROBERT_CC).country_epoch(&sim.cfg.time, target).step("epoch")?;
    let id = sim
        .adv
        .robert_ids()
        .into_iter()
        .find(|(e, _)| *e == i)
        .map(|(_, id)| id)
        .ok_or(ScenarioError::Step {
            step: "derive",
            detail: "victim id not recovered".into(),
        })?;
    let hello = sim
        .adv
        .mint_hello(&k_s, &k_fed, &MacKey(auth), ROBERT_CC.0, i, id, robert::t16_of(target))
        .step("mint")?;
    robert_minted_upload(sim, &mut r, hello, target)
}

fn robert_x7(sim: &mut Sim) -> Res<()> {
    let mut r = Rob::new(sim);
    r.join(sim, &[2])?;
    let kp = DhKeyPair::generate(&mut sim.rng);
    sim.adv.learn([Item::DhSecret(kp.secret_bytes())], Provenance::Forged);
    sim.inject(
        phone(1),
        Capability::CorruptPhoneSend,
        &kp.public.0,
        PayloadTag::Registration,
        Some(1),
        &[Item::DhSecret(kp.secret_bytes())],
    )?;
    let t = r.join_with(sim, 1, kp)?;
    sim.adv.learn(
        [Item::Registration {
            phone_pk: t.phone_pk.0,
            server_pk: t.server_pk.0,
            ciphertext: t.ciphertext.clone(),
        }],
        Provenance::Internet,
    );
    let (enc, auth) = sim.adv.session_for(&t.phone_pk.0).ok_or(ScenarioError::Step {
        step: "derive",
        detail: "session keys not derivable".into(),
    })?;
    let target = Tick(sim.cfg.time.day_length_s() + 20 * sim.cfg.time.epoch_length_s);
    let i = r.fed.backend(ROBERT_CC).country_epoch(&sim.cfg.time, target).step("epoch")?;
    let plain = cryptokit::ctr256(&cryptokit::Key256(enc), 0, &t.ciphertext);
    let entry = robert::parse_prehello(&plain)
        .into_iter()
        .find(|e| e.epoch == i)
        .ok_or(ScenarioError::Step {
            step: "derive",
            detail: "epoch not provisioned".into(),
        })?;
    let hello = sim
        .adv
        .mac_hello(entry.ebid, entry.ecc, &MacKey(auth), robert::t16_of(target))
        .step("mac")?;
    robert_minted_upload(sim, &mut r, hello, target)
}

/// Phones 1-3 are the group (1 tests positive); 11-16 are their contacts.
fn robert_group(sim: &mut Sim) -> Res<()> {
    let mut r = Rob::new(sim);
    r.join(sim, &[1, 2, 3, 11, 12, 13, 14, 15, 16])?;
    for (e, (m, v)) in GROUP_CONTACTS.iter().enumerate() {
        sim.goto(0, 10 + e as u64, 0);
        r.meet(sim, &[*m, *v], q(*v))?;
    }
    sim.goto(1, 0, 0);
    robert_group_upload(sim, &mut r, 1, &[2, 3])?;
    sim.goto(1, 1, 0);
    r.status(sim, &[1, 2, 3, 11, 12, 13, 14, 15, 16])
}

const GROUP_CONTACTS: [(u32, u32); 6] = [(1, 11), (1, 12), (2, 13), (2, 14), (2, 15), (3, 16)];

// ---------------------------------------------------------------- GAEN phones

trait HasGaen {
    fn gaen(&mut self) -> &mut GaenPhone;
}

impl HasGaen for Dp3tPhone {
    fn gaen(&mut self) -> &mut GaenPhone {
        &mut self.gaen
    }
}

impl HasGaen for CwaPhone {
    fn gaen(&mut self) -> &mut GaenPhone {
        &mut self.gaen
    }
}

fn gaen_meet<P: HasGaen>(sim: &mut Sim, phones: &mut BTreeMap<u32, P>, ids: &[u32], place: PlaceTag) -> Res<()> {
    for id in ids {
        sim.world.visit(PhoneId(*id), place);
        let g = phones.get_mut(id).expect("known phone").gaen();
        g.ensure_key(&mut sim.world, &mut sim.rng);
    }
    for id in ids {
        let g = phones.get_mut(id).expect("known phone").gaen();
        g.broadcast(&mut sim.world, place).step("broadcast")?;
    }
    for id in ids {
        let g = phones.get_mut(id).expect("known phone").gaen();
        g.receive(&mut sim.world, place).step("receive")?;
    }
    Ok(())
}

fn gaen_listen<P: HasGaen>(sim: &mut Sim, phones: &mut BTreeMap<u32, P>, id: u32, place: PlaceTag) -> Res<()> {
    sim.world.visit(PhoneId(id), place);
    let g = phones.get_mut(&id).expect("known phone").gaen();
    g.receive(&mut sim.world, place).step("receive")?;
    Ok(())
}

fn key_of<P: HasGaen>(phones: &mut BTreeMap<u32, P>, id: u32, d: u64) -> Res<Tek> {
    let g = phones.get_mut(&id).expect("known phone").gaen();
    g.keys.for_day(day(d)).copied().ok_or(ScenarioError::Step {
        step: "key",
        detail: format!("phone {id} has no key for day {d}"),
    })
}

fn tek_item(t: &Tek) -> Item {
    Item::Tek {
        key: t.key.0,
        day: t.day,
    }
}

fn leak_key<P: HasGaen>(sim: &mut Sim, phones: &mut BTreeMap<u32, P>, id: u32, d: u64) -> Res<Tek> {
    let t = key_of(phones, id, d)?;
    sim.corrupt(phone(id), Capability::CorruptPhoneKey, &t.key.0, PayloadTag::DayKey, Some(id), alloc::vec![tek_item(&t)])?;
    Ok(t)
}

/// Adversary broadcasts the payload of a known key at `place` in the current epoch.
fn adv_broadcast(sim: &mut Sim, t: &Tek, place: PlaceTag) -> Res<()> {
    let p = sim.adv.gaen_payload(&t.key, t.day, sim.world.epoch()).step("payload")?;
    sim.adv.ble_write(&mut sim.world, place, &p).step("broadcast")
}

fn forge(sim: &mut Sim, d: u64) -> Tek {
    let key = sim.adv.forge_tek(&mut sim.rng, day(d));
    Tek { key, day: day(d) }
}

// ---------------------------------------------------------------- DP3T

struct Dp {
    ha: Dp3tHa,
    backend: Dp3tBackend,
    phones: BTreeMap<u32, Dp3tPhone>,
}

impl Dp {
    fn new(sim: &mut Sim, ids: &[u32]) -> Self {
        let ha = Dp3tHa::new(&mut sim.rng, DP3T_CC);
        let backend = Dp3tBackend::new(&mut sim.rng, DP3T_CC, ha.public());
        let phones = ids
            .iter()
            .map(|id| (*id, Dp3tPhone::new(&mut sim.world, PhoneId(*id), DP3T_CC)))
            .collect();
        Self { ha, backend, phones }
    }

    fn trust(&self) -> BTreeMap<Country, SigPublic> {
        [(DP3T_CC, self.backend.public())].into_iter().collect()
    }

    fn upload(&mut self, sim: &mut Sim, uploader: u32, tuples: &[UploadTuple]) -> Res<()> {
        for t in tuples {
            self.backend
                .upload(&sim.world, &sim.cfg.dp3t, PhoneId(uploader), t)
                .step("upload")?;
        }
        self.backend.publish(&mut sim.world);
        Ok(())
    }

    /// Honest test: commit, sign, upload the window's keys, wipe.
    fn test_and_upload(&mut self, sim: &mut Sim, id: u32, window: (DayStamp, DayStamp)) -> Res<()> {
        let p = self.phones.get_mut(&id).expect("known phone");
        let h = p.commit_keys(&mut sim.rng, &sim.cfg.dp3t, &sim.cfg.time).step("commit")?;
        let codes = self
            .ha
            .diagnose_and_sign(&mut sim.world, PhoneId(id), &h, window, true)
            .step("diagnose")?;
        p.receive_codes(codes);
        let tuples = p.upload_tuples(window);
        p.wipe();
        self.upload(sim, id, &tuples)
    }

    fn check(&mut self, sim: &mut Sim, ids: &[u32]) {
        let bundles = alloc::vec![self.backend.bundle()];
        self.check_with(sim, ids, &bundles);
    }

    fn check_with(&mut self, sim: &mut Sim, ids: &[u32], bundles: &[SignedBundle]) {
        let trust = self.trust();
        for id in ids {
            let p = self.phones.get_mut(id).expect("known phone");
            p.check_exposure(&mut sim.world, bundles, &trust);
        }
    }

    fn steal_ha_key(&self, sim: &mut Sim) -> Res<SigKeyPair> {
        let secret = self.ha.signing_key().secret_bytes();
        sim.corrupt(
            Agent::HealthAuthority(DP3T_CC),
            Capability::CorruptHAState,
            &secret,
            PayloadTag::SigningKey,
            None,
            alloc::vec![Item::SigningKey(secret)],
        )?;
        Ok(SigKeyPair::from_secret(secret))
    }

    fn steal_backend_key(&self, sim: &mut Sim) -> Res<SigKeyPair> {
        let secret = self.backend.signing_key().secret_bytes();
        sim.corrupt(
            Agent::Backend(DP3T_CC),
            Capability::CorruptBState,
            &secret,
            PayloadTag::SigningKey,
            None,
            alloc::vec![Item::SigningKey(secret)],
        )?;
        Ok(SigKeyPair::from_secret(secret))
    }
}

/// Tuple for `tek` with an authorisation code signed under a stolen HA key.
fn forged_tuple(sim: &mut Sim, ha: &SigKeyPair, tek: Tek) -> UploadTuple {
    let entry = TestDbEntry {
        tek,
        t: sim.cfg.time.first_epoch_of(tek.day),
        r: cryptokit::random_array(&mut sim.rng),
    };
    let ac = AuthCode::sign(ha, entry.h(), sim.world.day());
    UploadTuple { entry, ac }
}

fn honest_dp3t(sim: &mut Sim) -> Res<()> {
    let mut d = Dp::new(sim, &[1, 2, 3]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut d.phones, &[1, 2], q(1))?;
    gaen_meet(sim, &mut d.phones, &[3], q(2))?;
    sim.goto(2, 0, 0);
    d.test_and_upload(sim, 1, (day(0), day(2)))?;
    sim.goto(2, 1, 0);
    d.check(sim, &[2, 3]);
    Ok(())
}

/// Phone 3 uploads `tek` with a code signed under the stolen HA key.
fn dp3t_malicious_upload(sim: &mut Sim, d: &mut Dp, ha: &SigKeyPair, tek: Tek) -> Res<()> {
    let tuple = forged_tuple(sim, ha, tek);
    sim.inject(
        phone(3),
        Capability::CorruptPhoneSend,
        &tuple.ac.to_bytes(),
        PayloadTag::Upload,
        Some(3),
        &[tek_item(&tek), Item::SigningKey(ha.secret_bytes())],
    )?;
    d.upload(sim, 3, &[tuple])
}

fn dp3t_b1(sim: &mut Sim) -> Res<()> {
    let mut d = Dp::new(sim, &[1, 3]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut d.phones, &[1], q(1))?;
    sim.goto(1, 0, 0);
    let tek = leak_key(sim, &mut d.phones, 1, 0)?;
    let ha = d.steal_ha_key(sim)?;
    dp3t_malicious_upload(sim, &mut d, &ha, tek)
}

fn dp3t_b2(sim: &mut Sim) -> Res<()> {
    let mut d = Dp::new(sim, &[1]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut d.phones, &[1], q(1))?;
    sim.goto(1, 0, 0);
    let p = d.phones.get_mut(&1).expect("known phone");
    let h = p.commit_keys(&mut sim.rng, &sim.cfg.dp3t, &sim.cfg.time).step("commit")?;
    let flat: Vec<u8> = h.iter().flatten().copied().collect();
    sim.corrupt(
        phone(1),
        Capability::CorruptPhoneTestDBRead,
        &flat,
        PayloadTag::TestDb,
        Some(1),
        alloc::vec![Item::Message(flat.clone())],
    )?;
    let ha = d.steal_ha_key(sim)?;
    let today = sim.world.day();
    let codes: Vec<AuthCode> = h.iter().map(|x| AuthCode::sign(&ha, *x, today)).collect();
    let wire: Vec<u8> = codes.iter().flat_map(|c| c.to_bytes()).collect();
    sim.inject(
        Agent::HealthAuthority(DP3T_CC),
        Capability::CorruptHASend,
        &wire,
        PayloadTag::TestResult,
        Some(1),
        &[Item::SigningKey(ha.secret_bytes())],
    )?;
    let p = d.phones.get_mut(&1).expect("known phone");
    p.receive_codes(codes);
    let tuples = p.upload_tuples((day(0), day(2)));
    p.wipe();
    d.upload(sim, 1, &tuples)
}

fn dp3t_b3(sim: &mut Sim) -> Res<()> {
    let mut d = Dp::new(sim, &[1, 2]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut d.phones, &[1], q(1))?;
    gaen_meet(sim, &mut d.phones, &[2], q(2))?;
    sim.goto(1, 0, 0);
    let tek = leak_key(sim, &mut d.phones, 1, 0)?;
    sim.inject(phone(2), Capability::CorruptPhoneTestDBWrite, &tek.key.0, PayloadTag::TestDb, Some(1), &[tek_item(&tek)])?;
    let entry = TestDbEntry {
        tek,
        t: sim.cfg.time.first_epoch_of(tek.day),
        r: cryptokit::random_array(&mut sim.rng),
    };
    d.phones.get_mut(&2).expect("known phone").write_test_db(entry);
    d.test_and_upload(sim, 2, (day(0), day(2)))
}

fn dp3t_y1(sim: &mut Sim) -> Res<()> {
    let mut d = Dp::new(sim, &[1, 2]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut d.phones, &[1, 2], q(1))?;
    sim.goto(2, 10, 0);
    gaen_meet(sim, &mut d.phones, &[1], q(3))?;
    sim.goto(3, 0, 0);
    let window = (day(2), day(3));
    let p = d.phones.get_mut(&1).expect("known phone");
    let h = p.commit_keys(&mut sim.rng, &sim.cfg.dp3t, &sim.cfg.time).step("commit")?;
    let codes = d.ha.diagnose_and_sign(&mut sim.world, PhoneId(1), &h, window, true).step("diagnose")?;
    let p = d.phones.get_mut(&1).expect("known phone");
    p.receive_codes(codes);
    // The modified app ignores the window.
    let tuples = p.upload_tuples((day(0), day(3)));
    p.wipe();
    let wire: Vec<u8> = tuples.iter().flat_map(|t| t.ac.to_bytes()).collect();
    sim.inject(phone(1), Capability::CorruptPhoneSend, &wire, PayloadTag::Upload, Some(1), &[])?;
    d.upload(sim, 1, &tuples)?;
    sim.goto(3, 1, 0);
    d.check(sim, &[2]);
    Ok(())
}

fn dp3t_y2(sim: &mut Sim) -> Res<()> {
    let mut d = Dp::new(sim, &[1, 2]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut d.phones, &[1], q(1))?;
    let tek = leak_key(sim, &mut d.phones, 1, 0)?;
    sim.goto(0, 20, 0);
    adv_broadcast(sim, &tek, q(5))?;
    gaen_listen(sim, &mut d.phones, 2, q(5))?;
    sim.goto(2, 0, 0);
    d.test_and_upload(sim, 1, (day(0), day(2)))?;
    sim.goto(2, 1, 0);
    d.check(sim, &[2]);
    Ok(())
}

fn dp3t_y3(sim: &mut Sim) -> Res<()> {
    let mut d = Dp::new(sim, &[1, 2]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut d.phones, &[1], q(1))?;
    let msgs = sim.adv.ble_read(&mut sim.world, q(1)).step("relay read")?;
    sim.goto(0, 30, 0);
    for m in &msgs {
        sim.adv.ble_write(&mut sim.world, q(5), m).step("relay write")?;
    }
    gaen_listen(sim, &mut d.phones, 2, q(5))?;
    sim.goto(2, 0, 0);
    d.test_and_upload(sim, 1, (day(0), day(2)))?;
    sim.goto(2, 1, 0);
    d.check(sim, &[2]);
    Ok(())
}

fn dp3t_y4(sim: &mut Sim) -> Res<()> {
    let mut d = Dp::new(sim, &[2, 3]);
    let ha = d.steal_ha_key(sim)?;
    let tek = forge(sim, 0);
    sim.goto(0, 10, 0);
    adv_broadcast(sim, &tek, q(5))?;
    gaen_listen(sim, &mut d.phones, 2, q(5))?;
    sim.goto(1, 0, 0);
    dp3t_malicious_upload(sim, &mut d, &ha, tek)?;
    sim.goto(1, 1, 0);
    d.check(sim, &[2]);
    Ok(())
}

fn dp3t_y5(sim: &mut Sim) -> Res<()> {
    let mut d = Dp::new(sim, &[1, 2, 3]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut d.phones, &[1, 2], q(1))?;
    sim.goto(1, 0, 0);
    let tek = leak_key(sim, &mut d.phones, 1, 0)?;
    let ha = d.steal_ha_key(sim)?;
    dp3t_malicious_upload(sim, &mut d, &ha, tek)?;
    sim.goto(1, 1, 0);
    d.check(sim, &[2]);
    Ok(())
}

/// Serves the victim a bundle signed under the stolen back-end key.
fn dp3t_signed_bundle(sim: &mut Sim, d: &mut Dp, tek: Tek) -> Res<()> {
    let sk = d.steal_backend_key(sim)?;
    sim.adv.require(&tek_item(&tek)).step("bundle")?;
    let bundle = SignedBundle {
        country: DP3T_CC,
        keys: alloc::vec![SignedKey::sign(&sk, tek, DP3T_CC)],
    };
    sim.goto(1, 1, 0);
    d.check_with(sim, &[2], &[bundle]);
    Ok(())
}

fn dp3t_y6(sim: &mut Sim) -> Res<()> {
    let mut d = Dp::new(sim, &[1, 2]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut d.phones, &[1, 2], q(1))?;
    sim.goto(1, 0, 0);
    let tek = leak_key(sim, &mut d.phones, 1, 0)?;
    dp3t_signed_bundle(sim, &mut d, tek)
}

fn dp3t_y7(sim: &mut Sim) -> Res<()> {
    let mut d = Dp::new(sim, &[2]);
    let tek = forge(sim, 0);
    sim.goto(0, 10, 0);
    adv_broadcast(sim, &tek, q(5))?;
    gaen_listen(sim, &mut d.phones, 2, q(5))?;
    sim.goto(1, 0, 0);
    dp3t_signed_bundle(sim, &mut d, tek)
}

fn dp3t_group(sim: &mut Sim) -> Res<()> {
    let mut d = Dp::new(sim, &[1, 2, 3, 11, 12, 13, 14, 15, 16]);
    for (e, (m, v)) in GROUP_CONTACTS.iter().enumerate() {
        sim.goto(0, 10 + e as u64, 0);
        gaen_meet(sim, &mut d.phones, &[*m, *v], q(*v))?;
    }
    sim.goto(1, 0, 0);
    let window = (day(0), day(1));
    let p = d.phones.get_mut(&1).expect("known phone");
    let h = p.commit_keys(&mut sim.rng, &sim.cfg.dp3t, &sim.cfg.time).step("commit")?;
    let codes = d.ha.diagnose_and_sign(&mut sim.world, PhoneId(1), &h, window, true).step("diagnose")?;
    let p = d.phones.get_mut(&1).expect("known phone");
    p.receive_codes(codes);
    let mut tuples = p.upload_tuples(window);
    p.wipe();
    // Group keys ride on the positive phone's codes; the commitments do not match.
    for m in [2, 3] {
        let tek = leak_key(sim, &mut d.phones, m, 0)?;
        let entry = TestDbEntry {
            tek,
            t: sim.cfg.time.first_epoch_of(tek.day),
            r: cryptokit::random_array(&mut sim.rng),
        };
        sim.inject(phone(1), Capability::CorruptPhoneSend, &tek.key.0, PayloadTag::Upload, Some(1), &[tek_item(&tek)])?;
        let t = UploadTuple { entry, ac: tuples[0].ac };
        if d.backend.upload(&sim.world, &sim.cfg.dp3t, PhoneId(1), &t).is_ok() {
            return fail("upload", "foreign key accepted under a mismatching code");
        }
    }
    tuples.retain(|_| true);
    d.upload(sim, 1, &tuples)?;
    sim.goto(1, 1, 0);
    d.check(sim, &[1, 2, 3, 11, 12, 13, 14, 15, 16]);
    Ok(())
}

/// Release after the end of the key's day versus immediate release.
fn federation_dp3t(sim: &mut Sim) -> Res<()> {
    let mut d = Dp::new(sim, &[1, 2]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut d.phones, &[1], q(1))?;
    sim.goto(0, 20, 0);
    d.test_and_upload(sim, 1, (day(0), day(1)))?;
    let per_day = sim.cfg.time.epochs_per_day;
    for e in 21..per_day + 12 {
        sim.world.advance_to_epoch(crate::worldmodel::EpochStamp(e));
        d.backend.publish(&mut sim.world);
        let Some(k) = d.backend.bundle().keys.first().copied() else {
            continue;
        };
        sim.adv.learn([tek_item(&k.tek)], Provenance::Internet);
        let last = crate::worldmodel::EpochStamp((k.tek.day.0 + 1) * per_day - 1);
        let p = sim.adv.gaen_payload(&k.tek.key, k.tek.day, last).step("payload")?;
        sim.adv.ble_write(&mut sim.world, q(5), &p).step("broadcast")?;
        gaen_listen(sim, &mut d.phones, 2, q(5))?;
        break;
    }
    sim.goto(1, 20, 0);
    d.check(sim, &[2]);
    Ok(())
}

// ---------------------------------------------------------------- CWA

struct Cw {
    vs: VerificationServer,
    backends: BTreeMap<Country, CwaBackend>,
    efgs: Efgs,
    phones: BTreeMap<u32, CwaPhone>,
}

impl Cw {
    fn new(sim: &mut Sim, phones: &[(u32, Country)], countries: &[Country]) -> Self {
        let vs = VerificationServer::new(CWA_CC, &sim.cfg.cwa);
        let backends = countries
            .iter()
            .map(|cc| (*cc, CwaBackend::new(&mut sim.rng, *cc)))
            .collect();
        let phones = phones
            .iter()
            .map(|(id, cc)| (*id, CwaPhone::new(&mut sim.world, PhoneId(*id), *cc)))
            .collect();
        Self {
            vs,
            backends,
            efgs: Efgs::default(),
            phones,
        }
    }

    fn single(sim: &mut Sim, ids: &[u32]) -> Self {
        let phones: Vec<(u32, Country)> = ids.iter().map(|id| (*id, CWA_CC)).collect();
        Self::new(sim, &phones, &[CWA_CC])
    }

    fn trust(&self) -> BTreeMap<Country, SigPublic> {
        self.backends.iter().map(|(cc, b)| (*cc, b.public())).collect()
    }

    /// Lab test, registration, polling and TAN for an infected phone.
    fn test_positive(&mut self, sim: &mut Sim, id: u32, window: (DayStamp, DayStamp)) -> Res<([u8; 16], [u8; 16])> {
        let guid: [u8; 16] = cryptokit::random_array(&mut sim.rng);
        self.vs.record_result(&mut sim.world, PhoneId(id), &guid, window, true);
        let tan = self.register_and_get_tan(sim, id, &guid)?;
        Ok((guid, tan))
    }

    fn register_and_get_tan(&mut self, sim: &mut Sim, id: u32, guid: &[u8; 16]) -> Res<[u8; 16]> {
        let token = self.vs.scan_and_register(&mut sim.rng, guid).step("register")?;
        self.phones.get_mut(&id).expect("known phone").reg_token = Some(token);
        self.vs.poll_result(&mut sim.world, PhoneId(id), &token).step("poll")?;
        let tan = self.vs.request_tan(&mut sim.rng, &token).step("tan")?;
        self.phones.get_mut(&id).expect("known phone").tan = Some(tan);
        Ok(tan)
    }

    fn upload(&mut self, sim: &mut Sim, id: u32, teks: &[Tek], tan: &[u8; 16]) -> Res<()> {
        let _ = sim;
        let p = &self.phones[&id];
        let b = &self.backends[&p.country];
        b.upload_teks(&mut self.vs, &mut self.efgs, PhoneId(id), teks, tan, &p.visited)
            .step("upload")?;
        Ok(())
    }

    fn publish(&mut self, sim: &mut Sim) {
        let efgs_cfg = sim.cfg.efgs;
        for b in self.backends.values_mut() {
            b.publish(&mut sim.world, &self.efgs, &efgs_cfg);
        }
    }

    fn bundles_for(&self, id: u32) -> Vec<SignedBundle> {
        let p = &self.phones[&id];
        let mut regions = p.visited.clone();
        regions.insert(p.country);
        regions.iter().filter_map(|cc| self.backends.get(cc)).map(|b| b.bundle()).collect()
    }

    fn check(&mut self, sim: &mut Sim, ids: &[u32]) {
        let trust = self.trust();
        for id in ids {
            let bundles = self.bundles_for(*id);
            let p = self.phones.get_mut(id).expect("known phone");
            p.check_exposure(&mut sim.world, &bundles, &trust, &sim.cfg.cwa);
        }
    }

    fn check_with(&mut self, sim: &mut Sim, ids: &[u32], bundles: &[SignedBundle]) {
        let trust = self.trust();
        for id in ids {
            let p = self.phones.get_mut(id).expect("known phone");
            p.check_exposure(&mut sim.world, bundles, &trust, &sim.cfg.cwa);
        }
    }
}

fn honest_cwa(sim: &mut Sim) -> Res<()> {
    let mut c = Cw::single(sim, &[1, 2, 3]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut c.phones, &[1, 2], q(1))?;
    gaen_meet(sim, &mut c.phones, &[3], q(2))?;
    sim.goto(2, 0, 0);
    let window = (day(0), day(2));
    let (_, tan) = c.test_positive(sim, 1, window)?;
    let keys = c.phones[&1].keys_in(window);
    c.upload(sim, 1, &keys, &tan)?;
    sim.goto(2, 13, 0);
    c.publish(sim);
    c.check(sim, &[2, 3]);
    Ok(())
}

/// Positive phone 3 uploads `teks` in place of its own keys.
fn cwa_foreign_upload(sim: &mut Sim, c: &mut Cw, uploader: u32, teks: &[Tek]) -> Res<()> {
    let (_, tan) = c.test_positive(sim, uploader, (day(0), day(1)))?;
    let uses: Vec<Item> = teks.iter().map(tek_item).collect();
    let wire: Vec<u8> = teks.iter().flat_map(|t| t.key.0).collect();
    sim.inject(phone(uploader), Capability::CorruptPhoneSend, &wire, PayloadTag::Upload, Some(uploader), &uses)?;
    c.upload(sim, uploader, teks, &tan)?;
    sim.goto(1, 13, 0);
    c.publish(sim);
    Ok(())
}

fn cwa_c1(sim: &mut Sim) -> Res<()> {
    let mut c = Cw::single(sim, &[1, 3]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut c.phones, &[1], q(1))?;
    gaen_meet(sim, &mut c.phones, &[3], q(2))?;
    sim.goto(1, 0, 0);
    let tek = leak_key(sim, &mut c.phones, 1, 0)?;
    cwa_foreign_upload(sim, &mut c, 3, &[tek])
}

fn cwa_c2(sim: &mut Sim) -> Res<()> {
    let mut c = Cw::single(sim, &[1, 2]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut c.phones, &[1], q(1))?;
    gaen_meet(sim, &mut c.phones, &[2], q(2))?;
    sim.goto(1, 0, 0);
    let window = (day(0), day(1));
    let guid: [u8; 16] = cryptokit::random_array(&mut sim.rng);
    c.vs.record_result(&mut sim.world, PhoneId(1), &guid, window, true);
    sim.corrupt(phone(1), Capability::CorruptPhoneReceive, &guid, PayloadTag::Guid, Some(1), alloc::vec![Item::Guid(guid)])?;
    let tan = c.register_and_get_tan(sim, 1, &guid)?;
    let keys = c.phones[&1].keys_in(window);
    c.upload(sim, 1, &keys, &tan)?;

    // The attacker's phone scans the same test QR code.
    sim.adv.require(&Item::Guid(guid)).step("guid")?;
    let token = match c.vs.scan_and_register(&mut sim.rng, &guid) {
        Ok(t) => t,
        Err(_) => return Ok(()),
    };
    c.vs.poll_result(&mut sim.world, PhoneId(2), &token).step("poll")?;
    let tan2 = match c.vs.request_tan(&mut sim.rng, &token) {
        Ok(t) => t,
        Err(_) => return Ok(()),
    };
    let keys = c.phones[&2].keys_in(window);
    c.upload(sim, 2, &keys, &tan2)?;
    sim.goto(1, 13, 0);
    c.publish(sim);
    Ok(())
}

fn cwa_c2_vs(sim: &mut Sim) -> Res<()> {
    let mut c = Cw::single(sim, &[2]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut c.phones, &[2], q(2))?;
    sim.goto(1, 0, 0);
    let guid: [u8; 16] = cryptokit::random_array(&mut sim.rng);
    let token = c.vs.scan_and_register(&mut sim.rng, &guid).step("register")?;
    c.phones.get_mut(&2).expect("known phone").reg_token = Some(token);
    let vs = Agent::VerificationServer(CWA_CC);
    sim.inject(vs, Capability::CorruptVSSendToPhone, b"positive", PayloadTag::TestResult, Some(2), &[])?;
    let tan: [u8; 16] = cryptokit::random_array(&mut sim.rng);
    sim.adv.learn([Item::Tan(tan)], Provenance::Forged);
    sim.inject(vs, Capability::CorruptVSSendToPhone, &tan, PayloadTag::Tan, Some(2), &[Item::Tan(tan)])?;
    let keys = c.phones[&2].keys_in((day(0), day(1)));
    // The back end's TAN check is answered by the attacker.
    sim.inject(vs, Capability::CorruptVSSendToTRSnB, &tan, PayloadTag::TanCheck, Some(2), &[Item::Tan(tan)])?;
    let p = &c.phones[&2];
    c.backends[&CWA_CC]
        .accept_verified(&mut c.efgs, PhoneId(2), &keys, &p.visited)
        .step("upload")?;
    sim.goto(1, 13, 0);
    c.publish(sim);
    Ok(())
}

fn cwa_z1(sim: &mut Sim) -> Res<()> {
    let mut c = Cw::single(sim, &[1, 2]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut c.phones, &[1], q(1))?;
    let msgs = sim.adv.ble_read(&mut sim.world, q(1)).step("relay read")?;
    sim.goto(0, 15, 0);
    for m in &msgs {
        sim.adv.ble_write(&mut sim.world, q(5), m).step("relay write")?;
    }
    gaen_listen(sim, &mut c.phones, 2, q(5))?;
    sim.goto(1, 0, 0);
    let window = (day(0), day(1));
    let (_, tan) = c.test_positive(sim, 1, window)?;
    let keys = c.phones[&1].keys_in(window);
    c.upload(sim, 1, &keys, &tan)?;
    sim.goto(1, 13, 0);
    c.publish(sim);
    c.check(sim, &[2]);
    Ok(())
}

fn cwa_z2(sim: &mut Sim) -> Res<()> {
    let mut c = Cw::single(sim, &[2, 3]);
    let tek = forge(sim, 0);
    sim.goto(0, 10, 0);
    adv_broadcast(sim, &tek, q(5))?;
    gaen_listen(sim, &mut c.phones, 2, q(5))?;
    sim.goto(1, 0, 0);
    cwa_foreign_upload(sim, &mut c, 3, &[tek])?;
    c.check(sim, &[2]);
    Ok(())
}

fn cwa_z3(sim: &mut Sim) -> Res<()> {
    let mut c = Cw::single(sim, &[1, 2, 3]);
    sim.goto(0, 10, 0);
    gaen_meet(sim, &mut c.phones, &[1, 2], q(1))?;
    sim.goto(1, 0, 0);
    let tek = leak_key(sim, &mut c.phones, 1, 0)?;
    cwa_foreign_upload(sim, &mut c, 3, &[tek])?;
    c.check(sim, &[2]);
    Ok(())
}

fn cwa_z4(sim: &mut Sim) -> Res<()> {
    let mut c = Cw::single(sim, &[2]);
    let secret = c.backends[&CWA_CC].signing_key().secret_bytes();
    sim.corrupt(
        Agent::Backend(CWA_CC),
        Capability::CorruptBState,
        &secret,
        PayloadTag::SigningKey,
        None,
        alloc::vec![Item::SigningKey(secret)],
    )?;
    let sk = SigKeyPair::from_secret(secret);
    let tek = forge(sim, 0);
    sim.goto(0, 10, 0);
    adv_broadcast(sim, &tek, q(5))?;
    gaen_listen(sim, &mut c.phones, 2, q(5))?;
    sim.goto(1, 1, 0);
    let bundle = SignedBundle {
        country: CWA_CC,
        keys: alloc::vec![SignedKey::sign(&sk, tek, CWA_CC)],
    };
    c.check_with(sim, &[2], &[bundle]);
    Ok(())
}

/// Positive group member uploads the day key of the member with most contacts.
fn cwa_group(sim: &mut Sim) -> Res<()> {
    let mut c = Cw::single(sim, &[1, 2, 3, 11, 12, 13, 14, 15, 16]);
    for (e, (m, v)) in GROUP_CONTACTS.iter().enumerate() {
        sim.goto(0, 10 + e as u64, 0);
        gaen_meet(sim, &mut c.phones, &[*m, *v], q(*v))?;
    }
    sim.goto(1, 0, 0);
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for (m, _) in GROUP_CONTACTS {
        *counts.entry(m).or_default() += 1;
    }
    let best = counts
        .iter()
        .max_by_key(|(m, n)| (**n, core::cmp::Reverse(**m)))
        .map(|(m, _)| *m)
        .unwrap_or(1);
    let tek = if best == 1 {
        key_of(&mut c.phones, 1, 0)?
    } else {
        leak_key(sim, &mut c.phones, best, 0)?
    };
    cwa_foreign_upload(sim, &mut c, 1, &[tek])?;
    c.check(sim, &[1, 2, 3, 11, 12, 13, 14, 15, 16]);
    Ok(())
}

/// DE releases immediately; FR waits two hours unless the gateway fixes one policy.
fn federation_cwa(sim: &mut Sim) -> Res<()> {
    let mut c = Cw::new(sim, &[(1, Country::DE), (2, Country::FR)], &[Country::DE, Country::FR]);
    c.backends.get_mut(&Country::DE).expect("backend").local_delay_hours = 0;
    c.backends.get_mut(&Country::FR).expect("backend").local_delay_hours = 2;
    c.phones.get_mut(&1).expect("known phone").visited.insert(Country::FR);
    sim.goto(0, 100, 0);
    gaen_meet(sim, &mut c.phones, &[1], q(1))?;
    sim.goto(0, 120, 0);
    let window = (day(0), day(1));
    let (_, tan) = c.test_positive(sim, 1, window)?;
    let keys = c.phones[&1].keys_in(window);
    c.upload(sim, 1, &keys, &tan)?;

    let per_day = sim.cfg.time.epochs_per_day;
    let last = crate::worldmodel::EpochStamp(per_day - 1);
    for e in per_day..per_day + 24 {
        sim.world.advance_to_epoch(crate::worldmodel::EpochStamp(e));
        c.publish(sim);
        let released = c
            .backends
            .values()
            .find_map(|b| b.bundle().keys.first().copied());
        let Some(k) = released else { continue };
        sim.adv.learn([tek_item(&k.tek)], Provenance::Internet);
        // Rebroadcast the key's final identifier as soon as it is public.
        let p = sim.adv.gaen_payload(&k.tek.key, k.tek.day, last).step("payload")?;
        sim.adv.ble_write(&mut sim.world, q(5), &p).step("broadcast")?;
        gaen_listen(sim, &mut c.phones, 2, q(5))?;
        break;
    }
    sim.goto(1, 13, 0);
    c.publish(sim);
    c.check(sim, &[2]);
    Ok(())
}

// ---------------------------------------------------------------- registry

pub struct Scenario {
    pub id: &'static str,
    pub protocol: Protocol,
    pub overrides: &'static [(&'static str, &'static str)],
    pub expectation: Expectation,
    /// Phones that must raise an at-risk claim, when fixed.
    pub alarms: Option<usize>,
    /// Unmitigated counterpart of a mitigation variant.
    pub mitigates: Option<&'static str>,
    script: fn(&mut Sim) -> Res<()>,
}

impl core::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Scenario").field("id", &self.id).finish_non_exhaustive()
    }
}

const fn sc(
    id: &'static str,
    protocol: Protocol,
    expectation: Expectation,
    script: fn(&mut Sim) -> Res<()>,
) -> Scenario {
    Scenario {
        id,
        protocol,
        overrides: &[],
        expectation,
        alarms: None,
        mitigates: None,
        script,
    }
}

use Expectation::{NoViolation, Patterns, Violation as V, ViolationAbsentWithMitigation as Mitigated};
use PatternId as P;
use Protocol::{Cwa, Dp3t, Robert};

static SCENARIOS: &[Scenario] = &[
    Scenario {
        alarms: Some(1),
        ..sc("honest.robert", Robert, NoViolation, honest_robert)
    },
    Scenario {
        alarms: Some(1),
        ..sc("honest.dp3t", Dp3t, NoViolation, honest_dp3t)
    },
    Scenario {
        alarms: Some(1),
        ..sc("honest.cwa", Cwa, NoViolation, honest_cwa)
    },
    sc("robert.A1", Robert, V(P::A1), robert_a1),
    sc("robert.A2", Robert, V(P::A2), robert_a2),
    sc("robert.A3", Robert, V(P::A3), robert_a3),
    sc("robert.A4", Robert, V(P::A4), robert_a4),
    Scenario {
        alarms: Some(2),
        ..sc("robert.X1", Robert, V(P::X1), robert_x1)
    },
    Scenario {
        alarms: Some(2),
        ..sc("robert.X2", Robert, V(P::X2), robert_x2)
    },
    sc("robert.X3", Robert, V(P::X3), robert_x3),
    sc("robert.X4", Robert, V(P::X4), robert_x4),
    sc("robert.X5", Robert, V(P::X5), robert_x5),
    sc("robert.X6", Robert, V(P::X6), robert_x6),
    sc("robert.X7", Robert, V(P::X7), robert_x7),
    sc("dp3t.B1", Dp3t, V(P::B1), dp3t_b1),
    sc("dp3t.B2", Dp3t, V(P::B2), dp3t_b2),
    sc("dp3t.B3", Dp3t, V(P::B3), dp3t_b3),
    sc("dp3t.Y1", Dp3t, V(P::Y1), dp3t_y1),
    sc("dp3t.Y2", Dp3t, V(P::Y2), dp3t_y2),
    sc("dp3t.Y3", Dp3t, V(P::Y3), dp3t_y3),
    sc("dp3t.Y4", Dp3t, V(P::Y4), dp3t_y4),
    sc("dp3t.Y5", Dp3t, Patterns(&[P::B1, P::Y5]), dp3t_y5),
    sc("dp3t.Y6", Dp3t, V(P::Y6), dp3t_y6),
    sc("dp3t.Y7", Dp3t, V(P::Y7), dp3t_y7),
    sc("cwa.C1", Cwa, V(P::C1), cwa_c1),
    Scenario {
        overrides: &[("cwa.one_tan_per_token", "false")],
        ..sc("cwa.C2", Cwa, V(P::C2), cwa_c2)
    },
    sc("cwa.Z1", Cwa, V(P::Z1), cwa_z1),
    sc("cwa.Z2", Cwa, V(P::Z2), cwa_z2),
    sc("cwa.Z3", Cwa, Patterns(&[P::C1, P::Z3]), cwa_z3),
    sc("cwa.Z4", Cwa, V(P::Z4), cwa_z4),
    Scenario {
        overrides: &[("cwa.one_tan_per_token", "true")],
        mitigates: Some("cwa.C2"),
        ..sc("cwa.C2.mitigated", Cwa, Mitigated("cwa.one_tan_per_token"), cwa_c2)
    },
    sc("cwa.C2.vs", Cwa, V(P::C2), cwa_c2_vs),
    Scenario {
        overrides: &[("robert.filter_self_uploads", "true")],
        mitigates: Some("robert.X1"),
        alarms: Some(1),
        ..sc("robert.X1.mitigated", Robert, Mitigated("robert.filter_self_uploads"), robert_x1)
    },
    Scenario {
        overrides: &[("robert.bind_window_to_token", "true")],
        mitigates: Some("robert.X2"),
        alarms: Some(1),
        ..sc("robert.X2.mitigated", Robert, Mitigated("robert.bind_window_to_token"), robert_x2)
    },
    Scenario {
        overrides: &[("efgs.expiry_agreement", "false")],
        alarms: Some(1),
        ..sc("federation.cwa.expiry", Cwa, V(P::Z1), federation_cwa)
    },
    Scenario {
        overrides: &[("efgs.expiry_agreement", "true")],
        mitigates: Some("federation.cwa.expiry"),
        alarms: Some(0),
        ..sc("federation.cwa.expiry.mitigated", Cwa, Mitigated("efgs.expiry_agreement"), federation_cwa)
    },
    Scenario {
        overrides: &[("dp3t.release_at_day_end", "false")],
        alarms: Some(1),
        ..sc("federation.dp3t.release", Dp3t, V(P::Y3), federation_dp3t)
    },
    Scenario {
        overrides: &[("dp3t.release_at_day_end", "true")],
        mitigates: Some("federation.dp3t.release"),
        alarms: Some(0),
        ..sc("federation.dp3t.release.mitigated", Dp3t, Mitigated("dp3t.release_at_day_end"), federation_dp3t)
    },
    Scenario {
        alarms: Some(6),
        ..sc("group.robert", Robert, V(P::X4), robert_group)
    },
    Scenario {
        alarms: Some(2),
        ..sc("group.dp3t", Dp3t, NoViolation, dp3t_group)
    },
    Scenario {
        alarms: Some(3),
        ..sc("group.cwa", Cwa, Patterns(&[P::C1, P::Z3]), cwa_group)
    },
];

pub fn all() -> &'static [Scenario] {
    SCENARIOS
}

pub fn find(id: &str) -> Option<&'static Scenario> {
    SCENARIOS.iter().find(|s| s.id == id)
}

/// Result of one scenario run.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub scenario: &'static str,
    pub protocol: Protocol,
    pub seed: u64,
    pub trace: Trace,
    pub violations: Vec<Violation>,
    /// Phones that raised at least one at-risk claim.
    pub alarmed: BTreeSet<PhoneId>,
    pub mismatch: Option<String>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.mismatch.is_none()
    }

    pub fn patterns(&self) -> BTreeSet<PatternId> {
        self.violations.iter().filter_map(|v| v.pattern).collect()
    }
}

impl Scenario {
    pub fn config(&self) -> SimConfig {
        let mut c = SimConfig::default();
        for (k, v) in self.overrides {
            c.set(k, v).expect("scenario overrides use known keys");
        }
        c
    }

    pub fn run(&self, seed: u64) -> Res<Outcome> {
        self.run_with(seed, self.config())
    }

    pub fn run_with(&self, seed: u64, cfg: SimConfig) -> Res<Outcome> {
        let mut sim = Sim::new(cfg, seed);
        (self.script)(&mut sim)?;
        let trace = sim.world.into_trace();
        let violations = propcheck::check(&trace, self.protocol).step("check")?;
        let alarmed: BTreeSet<PhoneId> = trace
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::ClaimAtRisk { phone, .. } => Some(phone),
                _ => None,
            })
            .collect();
        let mismatch = self.compare(&violations, alarmed.len());
        Ok(Outcome {
            scenario: self.id,
            protocol: self.protocol,
            seed,
            trace,
            violations,
            alarmed,
            mismatch,
        })
    }

    fn compare(&self, violations: &[Violation], alarms: usize) -> Option<String> {
        if violations.iter().any(|v| v.pattern.is_none()) {
            return Some("unclassified violation".into());
        }
        let seen: BTreeSet<PatternId> = violations.iter().filter_map(|v| v.pattern).collect();
        let want = self.expectation.patterns();
        if seen != want {
            let show = |s: &BTreeSet<PatternId>| s.iter().map(|p| p.label()).collect::<Vec<_>>().join(",");
            return Some(format!("expected patterns {{{}}}, observed {{{}}}", show(&want), show(&seen)));
        }
        if let Some(n) = self.alarms {
            if n != alarms {
                return Some(format!("expected {n} alarmed phones, observed {alarms}"));
            }
        }
        None
    }
}

pub fn run(id: &str, seed: u64) -> Res<Outcome> {
    find(id)
        .ok_or_else(|| ScenarioError::UnknownScenario(id.to_string()))?
        .run(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scenario_meets_its_expectation() {
        for s in all() {
            let o = s.run(42).unwrap_or_else(|e| panic!("{}: {e}", s.id));
            assert!(o.pass(), "{}: {:?} {:?}", s.id, o.mismatch, o.violations);
        }
    }

    #[test]
    fn ids_are_unique() {
        let ids: BTreeSet<&str> = all().iter().map(|s| s.id).collect();
        assert_eq!(ids.len(), all().len());
    }

    #[test]
    fn all_patterns_covered() {
        let covered: BTreeSet<PatternId> = all().iter().flat_map(|s| s.expectation.patterns()).collect();
        assert_eq!(covered.len(), 27);
    }

    #[test]
    fn unknown_id() {
        assert!(matches!(run("robert.X9", 1), Err(ScenarioError::UnknownScenario(_))));
    }
}
