//! Byte-level crypto contracts: AES-128-CBC with PKCS#7 and a prepended IV,
//! HMAC-SHA256, 128-bit nonces and a millisecond clock.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use aes::cipher::block_padding::Pkcs7;
use aes::cipher::{BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hmac::{Hmac, Mac};
use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;

pub const KEY_LEN: usize = 16;
pub const IV_LEN: usize = 16;
pub const NONCE_LEN: usize = 16;
pub const TAG_LEN: usize = 32;
pub const ID_LEN: usize = 4;

pub type Key = [u8; KEY_LEN];
pub type Nonce = [u8; NONCE_LEN];
pub type Tag = [u8; TAG_LEN];
pub type DeviceId = [u8; ID_LEN];

type Aes128CbcEnc = cbc::Encryptor<aes::Aes128>;
type Aes128CbcDec = cbc::Decryptor<aes::Aes128>;
type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("ciphertext length {0} is not an IV plus whole blocks")]
    BadLength(usize),
    #[error("invalid padding")]
    Padding,
    #[error("inner and outer keys must differ")]
    KeyReuse,
}

/// Encrypt with an explicit IV. Output is `iv || ciphertext`.
pub fn enc_with_iv(plaintext: &[u8], key: &Key, iv: &[u8; IV_LEN]) -> Vec<u8> {
    let body = Aes128CbcEnc::new(key.into(), iv.into()).encrypt_padded_vec_mut::<Pkcs7>(plaintext);
    let mut out = Vec::with_capacity(IV_LEN + body.len());
    out.extend_from_slice(iv);
    out.extend_from_slice(&body);
    out
}

/// Encrypt under a fresh IV drawn from `rng`.
pub fn enc(plaintext: &[u8], key: &Key, rng: &mut NonceSource) -> Vec<u8> {
    let iv = rng.nonce();
    enc_with_iv(plaintext, key, &iv)
}

pub fn dec(ciphertext: &[u8], key: &Key) -> Result<Vec<u8>, CryptoError> {
    let n = ciphertext.len();
    if n < IV_LEN + 16 || (n - IV_LEN) % 16 != 0 {
        return Err(CryptoError::BadLength(n));
    }
    let (iv, body) = ciphertext.split_at(IV_LEN);
    let iv: &[u8; IV_LEN] = iv.try_into().expect("split at IV length");
    Aes128CbcDec::new(key.into(), iv.into())
        .decrypt_padded_vec_mut::<Pkcs7>(body)
        .map_err(|_| CryptoError::Padding)
}

fn mac(key: &[u8]) -> HmacSha256 {
    <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC accepts keys of any length")
}

pub fn hmac(message: &[u8], key: &[u8]) -> Tag {
    let mut m = mac(key);
    m.update(message);
    m.finalize().into_bytes().into()
}

/// Constant-time tag check.
pub fn verify(message: &[u8], tag: &[u8], key: &[u8]) -> bool {
    let mut m = mac(key);
    m.update(message);
    m.verify_slice(tag).is_ok()
}

/// Source of nonces and IVs: a seeded stream for reproducible simulations or
/// the operating system's entropy.
#[derive(Debug, Clone)]
pub enum NonceSource {
    Seeded(ChaCha20Rng),
    Os,
}

impl NonceSource {
    pub fn seeded(seed: u64) -> Self {
        NonceSource::Seeded(ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn fill(&mut self, buf: &mut [u8]) {
        match self {
            NonceSource::Seeded(r) => r.fill_bytes(buf),
            NonceSource::Os => OsRng.fill_bytes(buf),
        }
    }

    pub fn nonce(&mut self) -> Nonce {
        let mut n = [0u8; NONCE_LEN];
        self.fill(&mut n);
        n
    }

    pub fn key(&mut self) -> Key {
        let mut k = [0u8; KEY_LEN];
        self.fill(&mut k);
        k
    }
}

/// Millisecond time source. Clones of a simulated clock share one counter,
/// so a harness can advance time for every device at once.
#[derive(Debug, Clone)]
pub enum Clock {
    Simulated(Arc<AtomicU64>),
    System(Instant),
}

impl Clock {
    pub fn simulated(start_ms: u64) -> Self {
        Clock::Simulated(Arc::new(AtomicU64::new(start_ms)))
    }

    pub fn system() -> Self {
        Clock::System(Instant::now())
    }

    pub fn now(&self) -> u64 {
        match self {
            Clock::Simulated(t) => t.load(Ordering::SeqCst),
            Clock::System(origin) => origin.elapsed().as_millis() as u64,
        }
    }

    /// Move simulated time forward; no effect on the system clock.
    pub fn advance(&self, ms: u64) {
        if let Clock::Simulated(t) = self {
            t.fetch_add(ms, Ordering::SeqCst);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairKeys {
    /// Channel key `K`, used for message encryption and tags.
    pub outer: Key,
    /// Report key `K'`, used only inside the attestation context.
    pub inner: Key,
}

/// Pre-shared pairwise keys indexed by unordered device pair.
#[derive(Debug, Clone, Default)]
pub struct KeyStore {
    pairs: BTreeMap<(DeviceId, DeviceId), PairKeys>,
}

fn pair(a: DeviceId, b: DeviceId) -> (DeviceId, DeviceId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl KeyStore {
    pub fn insert(&mut self, a: DeviceId, b: DeviceId, keys: PairKeys) -> Result<(), CryptoError> {
        if keys.outer == keys.inner {
            return Err(CryptoError::KeyReuse);
        }
        self.pairs.insert(pair(a, b), keys);
        Ok(())
    }

    /// Draw distinct keys for every pair of `ids`.
    pub fn generate(ids: &[DeviceId], rng: &mut NonceSource) -> Self {
        let mut ks = KeyStore::default();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                let outer = rng.key();
                let mut inner = rng.key();
                while inner == outer {
                    inner = rng.key();
                }
                ks.insert(*a, *b, PairKeys { outer, inner }).expect("keys differ");
            }
        }
        ks
    }

    pub fn get(&self, a: DeviceId, b: DeviceId) -> Option<PairKeys> {
        self.pairs.get(&pair(a, b)).copied()
    }

    pub fn outer(&self, a: DeviceId, b: DeviceId) -> Option<Key> {
        self.get(a, b).map(|k| k.outer)
    }

    pub fn inner(&self, a: DeviceId, b: DeviceId) -> Option<Key> {
        self.get(a, b).map(|k| k.inner)
    }

    /// Inner keys visible to `id`, keyed by peer.
    pub fn inner_keys_for(&self, id: DeviceId) -> BTreeMap<DeviceId, Key> {
        self.pairs
            .iter()
            .filter_map(|(&(a, b), k)| {
                if a == id {
                    Some((b, k.inner))
                } else if b == id {
                    Some((a, k.inner))
                } else {
                    None
                }
            })
            .collect()
    }

    /// Outer keys visible to `id`, keyed by peer.
    pub fn outer_keys_for(&self, id: DeviceId) -> BTreeMap<DeviceId, Key> {
        self.pairs
            .iter()
            .filter_map(|(&(a, b), k)| {
                if a == id {
                    Some((b, k.outer))
                } else if b == id {
                    Some((a, k.outer))
                } else {
                    None
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn round_trip_29_bytes() {
        let mut r = NonceSource::seeded(1);
        let key = r.key();
        let p: Vec<u8> = (0..29).collect();
        let c = enc(&p, &key, &mut r);
        assert_eq!(c.len(), 48);
        assert_eq!(dec(&c, &key).unwrap(), p);
    }

    #[test]
    fn fresh_iv_changes_ciphertext() {
        let mut r = NonceSource::seeded(2);
        let key = r.key();
        assert_ne!(enc(b"same", &key, &mut r), enc(b"same", &key, &mut r));
    }

    #[test]
    fn wrong_key_never_yields_plaintext() {
        let mut r = NonceSource::seeded(3);
        let p = [7u8; 29];
        for _ in 0..1000 {
            let (k1, k2) = (r.key(), r.key());
            let c = enc(&p, &k1, &mut r);
            match dec(&c, &k2) {
                Ok(out) => assert_ne!(out, p),
                Err(e) => assert_eq!(e, CryptoError::Padding),
            }
        }
    }

    #[test]
    fn dec_rejects_bad_lengths() {
        let k = [0u8; 16];
        assert_eq!(dec(&[0; 16], &k), Err(CryptoError::BadLength(16)));
        assert_eq!(dec(&[0; 40], &k), Err(CryptoError::BadLength(40)));
    }

    #[test]
    fn hmac_published_vector() {
        let tag = hmac(b"Hi There", &[0x0b; 20]);
        assert_eq!(
            hex::encode(tag),
            "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"
        );
        assert!(verify(b"Hi There", &tag, &[0x0b; 20]));
    }

    #[test]
    fn hmac_bit_flip_and_verify() {
        let key = [9u8; 16];
        let msg = b"attestation".to_vec();
        let tag = hmac(&msg, &key);
        let mut flipped = msg.clone();
        flipped[0] ^= 1;
        assert_ne!(hmac(&flipped, &key), tag);
        assert!(!verify(&flipped, &tag, &key));
        assert!(!verify(&msg, &tag[..31], &key));
        let mut bad = tag;
        bad[31] ^= 0x80;
        assert!(!verify(&msg, &bad, &key));
    }

    #[test]
    fn nonces_unique_and_reproducible() {
        let mut r = NonceSource::seeded(5);
        let set: HashSet<Nonce> = (0..100_000).map(|_| r.nonce()).collect();
        assert_eq!(set.len(), 100_000);
        let mut a = NonceSource::seeded(6);
        let mut b = NonceSource::seeded(6);
        assert_eq!(a.nonce(), b.nonce());
        assert_ne!(NonceSource::Os.nonce(), NonceSource::Os.nonce());
    }

    #[test]
    fn simulated_clock_advances_exactly() {
        let c = Clock::simulated(100);
        let shared = c.clone();
        shared.advance(7);
        assert_eq!(c.now(), 107);
    }

    #[test]
    fn keystore_is_symmetric_and_separated() {
        let ids = [[0, 0, 0, 1], [0, 0, 0, 2], [0, 0, 0, 3]];
        let ks = KeyStore::generate(&ids, &mut NonceSource::seeded(9));
        let k = ks.get(ids[0], ids[1]).unwrap();
        assert_eq!(ks.get(ids[1], ids[0]), Some(k));
        assert_ne!(k.outer, k.inner);
        assert_eq!(ks.inner_keys_for(ids[2]).len(), 2);
        assert!(ks.get(ids[0], [9; 4]).is_none());
        let mut ks2 = KeyStore::default();
        assert_eq!(
            ks2.insert(ids[0], ids[1], PairKeys { outer: [1; 16], inner: [1; 16] }),
            Err(CryptoError::KeyReuse)
        );
    }
}
