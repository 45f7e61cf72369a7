//! Concrete primitives with the widths the three protocols use.
//!
//! Everything here is a pure function of its inputs; randomness only enters
//! through the explicit `generate` constructors, which take the simulation
//! RNG.

use aes::cipher::{generic_array::GenericArray, BlockDecrypt, BlockEncrypt, KeyInit};
use aes::{Aes128, Aes256};
use alloc::vec::Vec;
use des::TdesEde3;
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand_core::{CryptoRng, RngCore};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("bad length: expected {expected} bytes, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("value out of range for packed field")]
    OutOfRange,
}

fn exact<const N: usize>(bytes: &[u8]) -> Result<[u8; N], CryptoError> {
    bytes.try_into().map_err(|_| CryptoError::BadLength {
        expected: N,
        got: bytes.len(),
    })
}

pub fn random_array<const N: usize, R: RngCore + CryptoRng>(rng: &mut R) -> [u8; N] {
    let mut out = [0u8; N];
    rng.fill_bytes(&mut out);
    out
}

macro_rules! key_newtype {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
                Self(random_array(rng))
            }

            pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
                exact(bytes).map(Self)
            }

            pub fn as_bytes(&self) -> &[u8] {
                &self.0
            }
        }

        impl core::fmt::Debug for $name {
            fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), hex::encode(self.0))
            }
        }
    };
}

key_newtype!(
    /// 192-bit key of the 64-bit block cipher used for EBIDs.
    Prp64Key,
    24
);
key_newtype!(Key128, 16);
key_newtype!(Key256, 32);
key_newtype!(MacKey, 32);

/// 40-bit truncated MAC tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag40(pub [u8; 5]);

pub fn prp64_encrypt(key: &Prp64Key, block: &[u8]) -> Result<[u8; 8], CryptoError> {
    let mut buf = GenericArray::from(exact::<8>(block)?);
    let cipher = TdesEde3::new(GenericArray::from_slice(&key.0));
    cipher.encrypt_block(&mut buf);
    Ok(buf.into())
}

pub fn prp64_decrypt(key: &Prp64Key, block: &[u8]) -> Result<[u8; 8], CryptoError> {
    let mut buf = GenericArray::from(exact::<8>(block)?);
    let cipher = TdesEde3::new(GenericArray::from_slice(&key.0));
    cipher.decrypt_block(&mut buf);
    Ok(buf.into())
}

/// Packs a 24-bit epoch index and a 40-bit identifier into one big-endian block.
pub fn pack_epoch_id(epoch: u32, id: u64) -> Result<[u8; 8], CryptoError> {
    if epoch >= 1 << 24 || id >= 1 << 40 {
        return Err(CryptoError::OutOfRange);
    }
    Ok(((u64::from(epoch) << 40) | id).to_be_bytes())
}

pub fn unpack_epoch_id(block: [u8; 8]) -> (u32, u64) {
    let word = u64::from_be_bytes(block);
    ((word >> 40) as u32, word & ((1 << 40) - 1))
}

/// HKDF-SHA256 with an empty salt and the label as info, 16 bytes out.
pub fn kdf(key: &[u8], label: &[u8]) -> Key128 {
    Key128(kdf_expand(key, label))
}

pub fn kdf_expand<const N: usize>(key: &[u8], label: &[u8]) -> [u8; N] {
    assert!(!label.is_empty(), "kdf label must be non-empty");
    let hk = Hkdf::<Sha256>::new(None, key);
    let mut okm = [0u8; N];
    hk.expand(label, &mut okm)
        .expect("output length is far below the HKDF limit");
    okm
}

pub fn mac40(key: &MacKey, msg: &[u8]) -> Tag40 {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&key.0).expect("HMAC accepts any key length");
    mac.update(msg);
    let full = mac.finalize().into_bytes();
    let mut tag = [0u8; 5];
    tag.copy_from_slice(&full[..5]);
    Tag40(tag)
}

pub fn verify40(key: &MacKey, msg: &[u8], tag: &Tag40) -> bool {
    mac40(key, msg) == *tag
}

pub fn block128_encrypt(key: &Key128, block: &[u8]) -> Result<[u8; 16], CryptoError> {
    let mut buf = GenericArray::from(exact::<16>(block)?);
    Aes128::new(GenericArray::from_slice(&key.0)).encrypt_block(&mut buf);
    Ok(buf.into())
}

pub fn block128_decrypt(key: &Key128, block: &[u8]) -> Result<[u8; 16], CryptoError> {
    let mut buf = GenericArray::from(exact::<16>(block)?);
    Aes128::new(GenericArray::from_slice(&key.0)).decrypt_block(&mut buf);
    Ok(buf.into())
}

/// GAEN padded data for epoch interval `j`: "EN-RPI", six zero bytes, then `j` little-endian.
pub fn gaen_padded_epoch(j: u32) -> [u8; 16] {
    let mut block = [0u8; 16];
    block[..6].copy_from_slice(b"EN-RPI");
    block[12..].copy_from_slice(&j.to_le_bytes());
    block
}

/// AES-256 in counter mode. The same call seals and opens.
pub fn ctr256(key: &Key256, nonce: u64, data: &[u8]) -> Vec<u8> {
    let cipher = Aes256::new(GenericArray::from_slice(&key.0));
    let mut out = Vec::with_capacity(data.len());
    for (counter, chunk) in data.chunks(16).enumerate() {
        let mut block = [0u8; 16];
        block[..8].copy_from_slice(&nonce.to_be_bytes());
        block[8..].copy_from_slice(&(counter as u64).to_be_bytes());
        let mut ks = GenericArray::from(block);
        cipher.encrypt_block(&mut ks);
        out.extend(chunk.iter().zip(ks.iter()).map(|(d, k)| d ^ k));
    }
    out
}

pub fn hash(msg: &[u8]) -> [u8; 32] {
    Sha256::digest(msg).into()
}

/// X25519 key pair.
#[derive(Clone)]
pub struct DhKeyPair {
    secret: [u8; 32],
    pub public: DhPublic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct DhPublic(pub [u8; 32]);

impl DhKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_secret(random_array(rng))
    }

    pub fn from_secret(secret: [u8; 32]) -> Self {
        let sk = x25519_dalek::StaticSecret::from(secret);
        let public = DhPublic(x25519_dalek::PublicKey::from(&sk).to_bytes());
        Self { secret, public }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret
    }
}

impl core::fmt::Debug for DhKeyPair {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("DhKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

pub fn dh_shared(own: &DhKeyPair, peer: &DhPublic) -> [u8; 32] {
    let sk = x25519_dalek::StaticSecret::from(own.secret);
    sk.diffie_hellman(&x25519_dalek::PublicKey::from(peer.0))
        .to_bytes()
}

/// Splits a registration shared secret into the encryption and MAC keys.
pub fn derive(shared: &[u8; 32]) -> (Key256, MacKey) {
    (
        Key256(kdf_expand(shared, b"enc")),
        MacKey(kdf_expand(shared, b"auth")),
    )
}

#[derive(Clone)]
pub struct SigKeyPair {
    signing: ed25519_dalek::SigningKey,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SigPublic(pub [u8; 32]);

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl core::fmt::Debug for Signature {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..8]))
    }
}

impl SigKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_secret(random_array(rng))
    }

    pub fn from_secret(secret: [u8; 32]) -> Self {
        Self {
            signing: ed25519_dalek::SigningKey::from_bytes(&secret),
        }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public(&self) -> SigPublic {
        SigPublic(self.signing.verifying_key().to_bytes())
    }
}

impl core::fmt::Debug for SigKeyPair {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("SigKeyPair")
            .field("public", &self.public())
            .finish_non_exhaustive()
    }
}

pub fn sign(key: &SigKeyPair, msg: &[u8]) -> Signature {
    Signature(key.signing.sign(msg).to_bytes())
}

pub fn verify(public: &SigPublic, msg: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    vk.verify(msg, &ed25519_dalek::Signature::from_bytes(&sig.0))
        .is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha20Rng;
    use rand_core::SeedableRng;

    fn unhex<const N: usize>(s: &str) -> [u8; N] {
        hex::decode(s).unwrap().try_into().unwrap()
    }

    // Golden values below were produced with Python's `cryptography` and
    // `hashlib` packages, not with this crate.

    #[test]
    fn kdf_golden_zero_key() {
        assert_eq!(
            kdf(&[0u8; 16], b"ENRPIK").0,
            unhex::<16>("59ea58dd0914c8b7a1b0ade4528b7912")
        );
        assert_eq!(
            kdf(&[0u8; 16], b"ENAEMK").0,
            unhex::<16>("6700962f3c90306de045f0c92b20b6c2")
        );
    }

    #[test]
    fn rpi_golden() {
        let rpik = kdf(&[0u8; 16], b"ENRPIK");
        let padded = gaen_padded_epoch(2_650_000);
        assert_eq!(padded, unhex::<16>("454e2d525049000000000000906f2800"));
        assert_eq!(
            block128_encrypt(&rpik, &padded).unwrap(),
            unhex::<16>("66446c70f11ae036e5900073952590c9")
        );
    }

    #[test]
    fn prp64_golden_and_packing() {
        let key = Prp64Key(core::array::from_fn(|i| i as u8));
        let block = pack_epoch_id(5, 0x01_0203_0405).unwrap();
        assert_eq!(block, unhex::<8>("0000050102030405"));
        let ct = prp64_encrypt(&key, &block).unwrap();
        assert_eq!(ct, unhex::<8>("2a60fc9a8b88a8f5"));
        assert_eq!(prp64_decrypt(&key, &ct).unwrap(), block);
        assert_eq!(unpack_epoch_id(block), (5, 0x01_0203_0405));
    }

    #[test]
    fn derive_golden() {
        let shared: [u8; 32] = core::array::from_fn(|i| i as u8);
        let (enc, auth) = derive(&shared);
        assert_eq!(
            enc.0,
            unhex::<32>("1d344e2635e95697b24e0bf0722e430fe83bee4504b8203a9d0f09e4bec1dff2")
        );
        assert_eq!(
            auth.0,
            unhex::<32>("d6e2faeb0c03ee07b49c896889f38eb9443a78e8eed161be1a3588526f95cbd8")
        );
    }

    #[test]
    fn mac40_golden_and_verify() {
        let key = MacKey(core::array::from_fn(|i| i as u8));
        let tag = mac40(&key, b"hello");
        assert_eq!(tag.0, unhex::<5>("53c40272a7"));
        assert_eq!(tag.0.len(), 5);
        assert!(verify40(&key, b"hello", &tag));
        let mut flipped = tag;
        flipped.0[4] ^= 0x01;
        assert!(!verify40(&key, b"hello", &flipped));
    }

    #[test]
    fn wrong_widths_rejected() {
        let key = Prp64Key([7; 24]);
        assert_eq!(
            prp64_encrypt(&key, &[0; 7]),
            Err(CryptoError::BadLength { expected: 8, got: 7 })
        );
        assert!(block128_encrypt(&Key128([0; 16]), &[0; 15]).is_err());
        assert_eq!(pack_epoch_id(1 << 24, 0), Err(CryptoError::OutOfRange));
        assert_eq!(pack_epoch_id(0, 1 << 40), Err(CryptoError::OutOfRange));
    }

    #[test]
    fn dh_is_symmetric_and_pairs_differ() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = DhKeyPair::generate(&mut rng);
        let b = DhKeyPair::generate(&mut rng);
        let c = DhKeyPair::generate(&mut rng);
        assert_eq!(dh_shared(&a, &b.public), dh_shared(&b, &a.public));
        assert_ne!(dh_shared(&a, &b.public), dh_shared(&a, &c.public));
        let (enc, auth) = derive(&dh_shared(&a, &b.public));
        assert_ne!(enc.0, auth.0);
    }

    #[test]
    fn signatures() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let k = SigKeyPair::generate(&mut rng);
        let other = SigKeyPair::generate(&mut rng);
        let sig = sign(&k, b"released keys");
        assert!(verify(&k.public(), b"released keys", &sig));
        assert!(!verify(&k.public(), b"released keyz", &sig));
        assert!(!verify(&other.public(), b"released keys", &sig));
        assert_eq!(hash(b"x"), hash(b"x"));
    }

    #[test]
    fn ctr_round_trip() {
        let key = Key256([9; 32]);
        let data: Vec<u8> = (0..50u8).collect();
        let sealed = ctr256(&key, 3, &data);
        assert_ne!(sealed, data);
        assert_eq!(ctr256(&key, 3, &sealed), data);
    }

    #[test]
    fn kdf_labels_used_in_codebase_do_not_collide() {
        let labels: [&[u8]; 4] = [b"ENRPIK", b"ENAEMK", b"enc", b"auth"];
        let key = [0x42u8; 32];
        for (i, a) in labels.iter().enumerate() {
            for b in &labels[i + 1..] {
                assert_ne!(kdf(&key, a), kdf(&key, b));
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn prp64_is_a_bijection(key in any::<[u8; 24]>(), a in any::<[u8; 8]>(), b in any::<[u8; 8]>()) {
                let key = Prp64Key(key);
                let ca = prp64_encrypt(&key, &a).unwrap();
                prop_assert_eq!(prp64_decrypt(&key, &ca).unwrap(), a);
                if a != b {
                    prop_assert_ne!(ca, prp64_encrypt(&key, &b).unwrap());
                }
            }

            #[test]
            fn block128_is_a_bijection(key in any::<[u8; 16]>(), a in any::<[u8; 16]>(), b in any::<[u8; 16]>()) {
                let key = Key128(key);
                let ca = block128_encrypt(&key, &a).unwrap();
                prop_assert_eq!(block128_decrypt(&key, &ca).unwrap(), a);
                if a != b {
                    prop_assert_ne!(ca, block128_encrypt(&key, &b).unwrap());
                }
            }

            #[test]
            fn pack_round_trip(epoch in 0u32..(1 << 24), id in 0u64..(1 << 40)) {
                prop_assert_eq!(unpack_epoch_id(pack_epoch_id(epoch, id).unwrap()), (epoch, id));
            }
        }
    }
}
