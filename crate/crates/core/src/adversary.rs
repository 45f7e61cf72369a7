//! Capability-based attacker with a Dolev-Yao style knowledge base.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::cryptokit::{self, DhKeyPair, DhPublic, Key128, Prp64Key};
use crate::gaen;
use crate::worldmodel::{
    Actor, Agent, DayStamp, EpochStamp, EventKind, MsgDigest, PayloadTag, PhoneId, PlaceTag,
    TimeConfig, World, WorldError,
};

/// The closed set of adversarial capabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Capability {
    BLErd,
    BLEwr,
    CorruptPhoneKey,
    CorruptPhoneReceived,
    CorruptPhoneSend,
    CorruptPhoneReceive,
    CorruptPhoneTestDBRead,
    CorruptPhoneTestDBWrite,
    CorruptBState,
    CorruptBReceive,
    CorruptBSend,
    CorruptBReceiveFromVS,
    CorruptBReceiveFromPhone,
    CorruptQRList,
    CorruptBIDTable,
    CorruptBFederationKey,
    CorruptVSSendToTRSnB,
    CorruptVSReceiveFromTRSnB,
    CorruptVSSendToPhone,
    CorruptVSReceiveFromPhone,
    CorruptHAState,
    CorruptHASend,
}

/// Kind of party a capability applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Bluetooth,
    Phone,
    Backend,
    VerificationServer,
    HealthAuthority,
}

impl Capability {
    pub const ALL: [Capability; 22] = [
        Capability::BLErd,
        Capability::BLEwr,
        Capability::CorruptPhoneKey,
        Capability::CorruptPhoneReceived,
        Capability::CorruptPhoneSend,
        Capability::CorruptPhoneReceive,
        Capability::CorruptPhoneTestDBRead,
        Capability::CorruptPhoneTestDBWrite,
        Capability::CorruptBState,
        Capability::CorruptBReceive,
        Capability::CorruptBSend,
        Capability::CorruptBReceiveFromVS,
        Capability::CorruptBReceiveFromPhone,
        Capability::CorruptQRList,
        Capability::CorruptBIDTable,
        Capability::CorruptBFederationKey,
        Capability::CorruptVSSendToTRSnB,
        Capability::CorruptVSReceiveFromTRSnB,
        Capability::CorruptVSSendToPhone,
        Capability::CorruptVSReceiveFromPhone,
        Capability::CorruptHAState,
        Capability::CorruptHASend,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Capability::BLErd => "BLErd",
            Capability::BLEwr => "BLEwr",
            Capability::CorruptPhoneKey => "CorruptPhoneKey",
            Capability::CorruptPhoneReceived => "CorruptPhoneReceived",
            Capability::CorruptPhoneSend => "CorruptPhoneSend",
            Capability::CorruptPhoneReceive => "CorruptPhoneReceive",
            Capability::CorruptPhoneTestDBRead => "CorruptPhoneTestDBRead",
            Capability::CorruptPhoneTestDBWrite => "CorruptPhoneTestDBWrite",
            Capability::CorruptBState => "CorruptBState",
            Capability::CorruptBReceive => "CorruptBReceive",
            Capability::CorruptBSend => "CorruptBSend",
            Capability::CorruptBReceiveFromVS => "CorruptBReceiveFromVS",
            Capability::CorruptBReceiveFromPhone => "CorruptBReceiveFromPhone",
            Capability::CorruptQRList => "CorruptQRList",
            Capability::CorruptBIDTable => "CorruptBIDTable",
            Capability::CorruptBFederationKey => "CorruptBFederationKey",
            Capability::CorruptVSSendToTRSnB => "CorruptVSSendToTRSnB",
            Capability::CorruptVSReceiveFromTRSnB => "CorruptVSReceiveFromTRSnB",
            Capability::CorruptVSSendToPhone => "CorruptVSSendToPhone",
            Capability::CorruptVSReceiveFromPhone => "CorruptVSReceiveFromPhone",
            Capability::CorruptHAState => "CorruptHAState",
            Capability::CorruptHASend => "CorruptHASend",
        }
    }

    pub fn from_label(label: &str) -> Option<Capability> {
        Capability::ALL.into_iter().find(|c| c.label() == label)
    }

    pub fn role(self) -> Role {
        use Capability::*;
        match self {
            BLErd | BLEwr => Role::Bluetooth,
            CorruptPhoneKey | CorruptPhoneReceived | CorruptPhoneSend | CorruptPhoneReceive
            | CorruptPhoneTestDBRead | CorruptPhoneTestDBWrite => Role::Phone,
            CorruptBState | CorruptBReceive | CorruptBSend | CorruptBReceiveFromVS
            | CorruptBReceiveFromPhone | CorruptQRList | CorruptBIDTable
            | CorruptBFederationKey => Role::Backend,
            CorruptVSSendToTRSnB | CorruptVSReceiveFromTRSnB | CorruptVSSendToPhone
            | CorruptVSReceiveFromPhone => Role::VerificationServer,
            CorruptHAState | CorruptHASend => Role::HealthAuthority,
        }
    }

    pub fn applies_to(self, target: Agent) -> bool {
        matches!(
            (self.role(), target),
            (Role::Phone, Agent::Phone(_))
                | (Role::Backend, Agent::Backend(_))
                | (Role::VerificationServer, Agent::VerificationServer(_))
                | (Role::HealthAuthority, Agent::HealthAuthority(_))
        )
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for Capability {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

/// A value the adversary can hold.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Item {
    /// GAEN day key with the day it is used on.
    Tek { key: [u8; 16], day: DayStamp },
    Rpi([u8; 16]),
    /// Full GAEN broadcast payload (RPI followed by AEM).
    GaenPayload([u8; 32]),
    Hello([u8; 16]),
    Ebid { ebid: [u8; 8], ecc: u8 },
    RobertServerKey([u8; 24]),
    FederationKey([u8; 16]),
    RobertId { epoch: u32, id: u64 },
    DhSecret([u8; 32]),
    /// Session keys of a ROBERT registration, identified by the phone public key.
    SessionKeys { phone_pk: [u8; 32], enc: [u8; 32], auth: [u8; 32] },
    /// Registration exchange seen on the Internet: phone key, server key, pre-hello ciphertext.
    Registration { phone_pk: [u8; 32], server_pk: [u8; 32], ciphertext: Vec<u8> },
    SigningKey([u8; 32]),
    QrCode(Vec<u8>),
    Tan([u8; 16]),
    Guid([u8; 16]),
    RegToken([u8; 16]),
    Nonce([u8; 16]),
    AuthCode(Vec<u8>),
    Message(Vec<u8>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Capability(Capability, Agent),
    Bluetooth,
    Internet,
    Derived,
    Forged,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdversaryError {
    #[error("capability {capability} does not apply to {target}")]
    InvalidCapability { capability: Capability, target: Agent },
    #[error("value is not derivable from the adversary's knowledge")]
    NotDerivable,
    #[error(transparent)]
    World(#[from] WorldError),
}

/// One use of a capability against a party.
#[derive(Clone, Debug)]
pub struct Corruption<'a> {
    pub target: Agent,
    pub capability: Capability,
    pub payload: &'a [u8],
    pub tag: PayloadTag,
    pub subject: Option<PhoneId>,
}

#[derive(Clone, Debug)]
pub struct Adversary {
    time: TimeConfig,
    knowledge: BTreeMap<Item, Provenance>,
}

impl Adversary {
    pub fn new(time: TimeConfig) -> Self {
        Self {
            time,
            knowledge: BTreeMap::new(),
        }
    }

    pub fn knows(&self, item: &Item) -> bool {
        self.knowledge.contains_key(item)
    }

    pub fn provenance(&self, item: &Item) -> Option<Provenance> {
        self.knowledge.get(item).copied()
    }

    pub fn items(&self) -> impl Iterator<Item = (&Item, &Provenance)> {
        self.knowledge.iter()
    }

    pub fn require(&self, item: &Item) -> Result<(), AdversaryError> {
        if self.knows(item) {
            Ok(())
        } else {
            Err(AdversaryError::NotDerivable)
        }
    }

    /// Adds items without logging; used for Internet eavesdropping and own forgeries.
    pub fn learn(&mut self, items: impl IntoIterator<Item = Item>, prov: Provenance) {
        for it in items {
            self.knowledge.entry(it).or_insert(prov);
        }
        self.derive_knowledge();
    }

    /// Uses a capability: logs a Corrupt event and adds the revealed values.
    pub fn corrupt(
        &mut self,
        world: &mut World,
        c: Corruption<'_>,
        revealed: impl IntoIterator<Item = Item>,
    ) -> Result<(), AdversaryError> {
        if !c.capability.applies_to(c.target) {
            return Err(AdversaryError::InvalidCapability {
                capability: c.capability,
                target: c.target,
            });
        }
        world.emit(EventKind::Corrupt {
            target: c.target,
            capability: c.capability,
            payload: MsgDigest::of(c.payload),
            tag: c.tag,
            subject: c.subject,
        });
        self.learn(revealed, Provenance::Capability(c.capability, c.target));
        Ok(())
    }

    /// Sends or receives on a channel end: every value in `uses` must already be known.
    pub fn act_on_channel(
        &mut self,
        world: &mut World,
        c: Corruption<'_>,
        uses: &[Item],
    ) -> Result<(), AdversaryError> {
        if !c.capability.applies_to(c.target) {
            return Err(AdversaryError::InvalidCapability {
                capability: c.capability,
                target: c.target,
            });
        }
        for it in uses {
            self.require(it)?;
        }
        self.corrupt(world, c, Vec::new())
    }

    pub fn ble_read(&mut self, world: &mut World, place: PlaceTag) -> Result<Vec<Vec<u8>>, AdversaryError> {
        let msgs = world.ble_read(Actor::Adversary, place)?;
        let items: Vec<Item> = msgs.iter().filter_map(|m| observed_item(m)).collect();
        self.learn(items, Provenance::Bluetooth);
        Ok(msgs)
    }

    /// Broadcasts `msg`, which must be derivable from current knowledge.
    pub fn ble_write(&mut self, world: &mut World, place: PlaceTag, msg: &[u8]) -> Result<(), AdversaryError> {
        match observed_item(msg) {
            Some(it) if self.knows(&it) => {}
            _ => return Err(AdversaryError::NotDerivable),
        }
        world.ble_write(Actor::Adversary, place, msg)?;
        Ok(())
    }

    /// Creates a fresh day key that no honest phone ever generated.
    pub fn forge_tek<R: rand_core::RngCore + rand_core::CryptoRng>(&mut self, rng: &mut R, day: DayStamp) -> Key128 {
        let key = Key128::generate(rng);
        self.learn(
            [Item::Tek {
                key: key.0,
                day,
            }],
            Provenance::Forged,
        );
        key
    }

    /// Builds a GAEN payload for `epoch` from a known day key.
    pub fn gaen_payload(&self, tek: &Key128, day: DayStamp, epoch: EpochStamp) -> Result<[u8; 32], AdversaryError> {
        self.require(&Item::Tek {
            key: tek.0,
            day,
        })?;
        Ok(gaen::payload(tek, epoch, gaen::Metadata::default()))
    }

    /// Builds a ROBERT HELLO for `(epoch, id)` from known server, federation and session keys.
    #[allow(clippy::too_many_arguments)]
    pub fn mint_hello(
        &mut self,
        k_s: &Prp64Key,
        k_fed: &Key128,
        k_auth: &cryptokit::MacKey,
        country: u8,
        epoch: u32,
        id: u64,
        t16: u16,
    ) -> Result<[u8; 16], AdversaryError> {
        self.require(&Item::RobertServerKey(k_s.0))?;
        self.require(&Item::FederationKey(k_fed.0))?;
        if !self
            .knowledge
            .keys()
            .any(|it| matches!(it, Item::SessionKeys { auth, .. } if *auth == k_auth.0))
        {
            return Err(AdversaryError::NotDerivable);
        }
        let ebid = crate::robert::mint_ebid(k_s, epoch, id);
        let ecc = crate::robert::ecc_for(k_fed, &ebid, country);
        let hello = crate::robert::HelloMsg::build(k_auth, ecc, ebid, t16).to_bytes();
        self.learn([Item::Hello(hello)], Provenance::Derived);
        Ok(hello)
    }

    /// Closes the knowledge base under the implemented derivation rules.
    pub fn derive_knowledge(&mut self) {
        loop {
            let mut fresh: Vec<Item> = Vec::new();
            let dh_secrets: Vec<[u8; 32]> = self
                .knowledge
                .keys()
                .filter_map(|it| match it {
                    Item::DhSecret(s) => Some(*s),
                    _ => None,
                })
                .collect();
            let server_keys: Vec<Prp64Key> = self
                .knowledge
                .keys()
                .filter_map(|it| match it {
                    Item::RobertServerKey(k) => Some(Prp64Key(*k)),
                    _ => None,
                })
                .collect();
            let sessions: BTreeMap<[u8; 32], [u8; 32]> = self
                .knowledge
                .keys()
                .filter_map(|it| match it {
                    Item::SessionKeys { phone_pk, enc, .. } => Some((*phone_pk, *enc)),
                    _ => None,
                })
                .collect();
            for it in self.knowledge.keys() {
                match it {
                    Item::Tek { key, day } => {
                        let k = Key128(*key);
                        for e in self.time.epochs_of(*day) {
                            let p = gaen::payload(&k, e, gaen::Metadata::default());
                            fresh.push(Item::GaenPayload(p));
                        }
                    }
                    Item::GaenPayload(p) => {
                        let mut rpi = [0u8; 16];
                        rpi.copy_from_slice(&p[..16]);
                        fresh.push(Item::Rpi(rpi));
                    }
                    Item::Hello(h) => {
                        let hello = crate::robert::HelloMsg::from_bytes(h);
                        fresh.push(Item::Ebid {
                            ebid: hello.ebid,
                            ecc: hello.ecc,
                        });
                    }
                    Item::Ebid { ebid, .. } => {
                        for ks in &server_keys {
                            let (epoch, id) = crate::robert::open_ebid(ks, ebid);
                            fresh.push(Item::RobertId { epoch, id });
                        }
                    }
                    Item::Registration {
                        phone_pk,
                        server_pk,
                        ciphertext,
                    } => {
                        for s in &dh_secrets {
                            let kp = DhKeyPair::from_secret(*s);
                            let peer = if kp.public.0 == *phone_pk {
                                Some(*server_pk)
                            } else if kp.public.0 == *server_pk {
                                Some(*phone_pk)
                            } else {
                                None
                            };
                            if let Some(peer) = peer {
                                let shared = cryptokit::dh_shared(&kp, &DhPublic(peer));
                                let (enc, auth) = cryptokit::derive(&shared);
                                fresh.push(Item::SessionKeys {
                                    phone_pk: *phone_pk,
                                    enc: enc.0,
                                    auth: auth.0,
                                });
                            }
                        }
                        if let Some(enc) = sessions.get(phone_pk) {
                            let plain = cryptokit::ctr256(&cryptokit::Key256(*enc), 0, ciphertext);
                            for entry in crate::robert::parse_prehello(&plain) {
                                fresh.push(Item::Ebid {
                                    ebid: entry.ebid,
                                    ecc: entry.ecc,
                                });
                            }
                        }
                    }
                    _ => {}
                }
            }
            let before = self.knowledge.len();
            for it in fresh {
                self.knowledge.entry(it).or_insert(Provenance::Derived);
            }
            if self.knowledge.len() == before {
                break;
            }
        }
    }

    /// Session keys learnt for a registration identified by `phone_pk`.
    pub fn session_for(&self, phone_pk: &[u8; 32]) -> Option<([u8; 32], [u8; 32])> {
        self.knowledge.keys().find_map(|it| match it {
            Item::SessionKeys {
                phone_pk: pk,
                enc,
                auth,
            } if pk == phone_pk => Some((*enc, *auth)),
            _ => None,
        })
    }

    /// Builds a HELLO from a known (EBID, ECC) pair under a known session MAC key.
    pub fn mac_hello(&mut self, ebid: [u8; 8], ecc: u8, k_auth: &cryptokit::MacKey, t16: u16) -> Result<[u8; 16], AdversaryError> {
        self.require(&Item::Ebid { ebid, ecc })?;
        if !self
            .knowledge
            .keys()
            .any(|it| matches!(it, Item::SessionKeys { auth, .. } if *auth == k_auth.0))
        {
            return Err(AdversaryError::NotDerivable);
        }
        let hello = crate::robert::HelloMsg::build(k_auth, ecc, ebid, t16).to_bytes();
        self.learn([Item::Hello(hello)], Provenance::Derived);
        Ok(hello)
    }

    /// Every (epoch, id) pair recovered from known EBIDs.
    pub fn robert_ids(&self) -> BTreeSet<(u32, u64)> {
        self.knowledge
            .keys()
            .filter_map(|it| match it {
                Item::RobertId { epoch, id } => Some((*epoch, *id)),
                _ => None,
            })
            .collect()
    }
}

/// The value a passive Bluetooth listener learns from raw bytes.
pub fn observed_item(msg: &[u8]) -> Option<Item> {
    match msg.len() {
        16 => {
            let mut h = [0u8; 16];
            h.copy_from_slice(msg);
            Some(Item::Hello(h))
        }
        32 => {
            let mut p = [0u8; 32];
            p.copy_from_slice(msg);
            Some(Item::GaenPayload(p))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::{Country, Trace};
    use rand_chacha::ChaCha20Rng;
    use rand_core::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn capability_set_is_closed() {
        assert_eq!(Capability::ALL.len(), 22);
        let labels: BTreeSet<_> = Capability::ALL.iter().map(|c| c.label()).collect();
        assert_eq!(labels.len(), 22);
        for c in Capability::ALL {
            assert_eq!(Capability::from_label(c.label()), Some(c));
        }
        assert_eq!(Capability::from_label("CorruptEverything"), None);
    }

    #[test]
    fn role_mismatch_is_rejected_and_not_logged() {
        let mut w = World::new(TimeConfig::default());
        let mut adv = Adversary::new(TimeConfig::default());
        let before = w.trace().len();
        let err = adv
            .corrupt(
                &mut w,
                Corruption {
                    target: Agent::Phone(PhoneId(1)),
                    capability: Capability::CorruptQRList,
                    payload: b"x",
                    tag: PayloadTag::QrCode,
                    subject: None,
                },
                [],
            )
            .unwrap_err();
        assert!(matches!(err, AdversaryError::InvalidCapability { .. }));
        assert_eq!(w.trace().len(), before);
        assert!(!Capability::BLErd.applies_to(Agent::Backend(Country::FR)));
    }

    #[test]
    fn corrupt_logs_event_and_learns() {
        let mut w = World::new(TimeConfig::default());
        let mut adv = Adversary::new(TimeConfig::default());
        let kfed = [9u8; 16];
        adv.corrupt(
            &mut w,
            Corruption {
                target: Agent::Backend(Country::FR),
                capability: Capability::CorruptBFederationKey,
                payload: &kfed,
                tag: PayloadTag::FederationKey,
                subject: None,
            },
            [Item::FederationKey(kfed)],
        )
        .unwrap();
        assert!(adv.knows(&Item::FederationKey(kfed)));
        assert_eq!(
            adv.provenance(&Item::FederationKey(kfed)),
            Some(Provenance::Capability(
                Capability::CorruptBFederationKey,
                Agent::Backend(Country::FR)
            ))
        );
        let last = w.trace().events().last().unwrap();
        assert!(matches!(
            last.kind,
            EventKind::Corrupt {
                capability: Capability::CorruptBFederationKey,
                ..
            }
        ));
    }

    #[test]
    fn tek_yields_all_payloads_of_its_day() {
        let cfg = TimeConfig::default();
        let mut adv = Adversary::new(cfg);
        let mut r = rng();
        let day = DayStamp(3);
        let tek = adv.forge_tek(&mut r, day);
        let mut n = 0;
        for e in cfg.epochs_of(day) {
            let rpi = gaen::rpi_for(&tek, e);
            assert!(adv.knows(&Item::Rpi(rpi)));
            n += 1;
        }
        assert_eq!(n, 144);
        // Not for the next day.
        let next = gaen::rpi_for(&tek, cfg.first_epoch_of(DayStamp(4)));
        assert!(!adv.knows(&Item::Rpi(next)));
    }

    #[test]
    fn ciphertext_alone_reveals_nothing() {
        let mut adv = Adversary::new(TimeConfig::default());
        let mut r = rng();
        let phone = DhKeyPair::generate(&mut r);
        let server = DhKeyPair::generate(&mut r);
        let shared = cryptokit::dh_shared(&phone, &server.public);
        let (enc, _) = cryptokit::derive(&shared);
        let entries = [crate::robert::PreHelloEntry {
            epoch: 1,
            ebid: [1; 8],
            ecc: 2,
        }];
        let ct = cryptokit::ctr256(&enc, 0, &crate::robert::encode_prehello(&entries));
        adv.learn(
            [Item::Registration {
                phone_pk: phone.public.0,
                server_pk: server.public.0,
                ciphertext: ct,
            }],
            Provenance::Internet,
        );
        assert!(!adv.knows(&Item::Ebid { ebid: [1; 8], ecc: 2 }));
        adv.learn([Item::DhSecret(server.secret_bytes())], Provenance::Derived);
        assert!(adv.knows(&Item::Ebid { ebid: [1; 8], ecc: 2 }));
    }

    #[test]
    fn ble_write_needs_knowledge() {
        let mut w = World::new(TimeConfig::default());
        let mut adv = Adversary::new(TimeConfig::default());
        assert_eq!(
            adv.ble_write(&mut w, PlaceTag(1), &[5u8; 16]),
            Err(AdversaryError::NotDerivable)
        );
        w.ble_write(Actor::Adversary, PlaceTag(2), &[5u8; 16]).unwrap();
        adv.ble_read(&mut w, PlaceTag(2)).unwrap();
        adv.ble_write(&mut w, PlaceTag(1), &[5u8; 16]).unwrap();
        let t: &Trace = w.trace();
        assert!(t.validate().is_ok());
    }
}
