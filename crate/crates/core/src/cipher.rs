//! Public-key envelopes for contact identities.
//!
//! Textbook RSA over arbitrary-precision integers: a device seals its own
//! phone number under the distributed public key, peers store only the
//! sealed value, and the decryption service holding the secret key is the
//! only party able to open it. No padding is applied; the envelope contract
//! (seal, open, key tagging) is what the rest of the crate relies on.

use std::fmt;
use std::str::FromStr;

use hmac::{Hmac, Mac};
use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_PUBLIC_EXPONENT: u32 = 65_537;
const FALLBACK_PUBLIC_EXPONENT: u32 = 17;
const MILLER_RABIN_ROUNDS: usize = 40;
const KEYGEN_ATTEMPTS: usize = 64;

const SMALL_PRIMES: [u32; 54] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131, 137,
    139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251,
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CipherError {
    #[error("unsupported key size: {0} bits")]
    UnsupportedKeySize(u32),
    #[error("no valid public exponent after {0} key generation attempts")]
    KeygenFailure(usize),
    #[error("plaintext is not smaller than the modulus")]
    PlaintextTooLarge,
    #[error("envelope sealed under key {found}, secret key belongs to {expected}")]
    KeyMismatch { expected: KeyTag, found: KeyTag },
    #[error("malformed phone number: {0:?}")]
    MalformedNumber(String),
    #[error("invalid key material: {0}")]
    InvalidKey(&'static str),
}

/// Short fingerprint of a public key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyTag(pub [u8; 8]);

impl fmt::Display for KeyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for KeyTag {
    type Err = CipherError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 8];
        hex::decode_to_slice(s, &mut out).map_err(|_| CipherError::InvalidKey("key tag"))?;
        Ok(KeyTag(out))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    pub modulus: BigUint,
    pub exponent: BigUint,
}

impl PublicKey {
    pub fn new(modulus: BigUint, exponent: BigUint) -> Self {
        Self { modulus, exponent }
    }

    pub fn tag(&self) -> KeyTag {
        key_tag(&self.modulus, &self.exponent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretKey {
    pub modulus: BigUint,
    pub exponent: BigUint,
    /// Tag of the public half this key opens.
    pub pair_tag: KeyTag,
    /// Factor-based shortcut, present when the primes are known.
    pub crt: Option<CrtParams>,
}

/// Chinese-remainder form of a private exponent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrtParams {
    pub p: BigUint,
    pub q: BigUint,
    pub dp: BigUint,
    pub dq: BigUint,
    /// q^-1 mod p.
    pub q_inv: BigUint,
}

impl CrtParams {
    fn new(p: &BigUint, q: &BigUint, d: &BigUint) -> Option<Self> {
        let one = BigUint::one();
        Some(Self { p: p.clone(), q: q.clone(), dp: d % (p - &one), dq: d % (q - &one), q_inv: mod_inverse(q, p)? })
    }

    /// Garner's recombination of the two half-size exponentiations.
    fn pow(&self, c: &BigUint) -> BigUint {
        let m1 = mod_pow(c, &self.dp, &self.p);
        let m2 = mod_pow(c, &self.dq, &self.q);
        let diff = (&m1 + &self.p - (&m2 % &self.p)) % &self.p;
        let h = diff * &self.q_inv % &self.p;
        m2 + h * &self.q
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

impl KeyPair {
    /// Assembles a keypair from its raw components.
    pub fn from_parts(modulus: BigUint, public_exp: BigUint, private_exp: BigUint) -> Result<Self, CipherError> {
        if modulus <= BigUint::from(2u32) {
            return Err(CipherError::InvalidKey("modulus too small"));
        }
        let public = PublicKey::new(modulus.clone(), public_exp);
        let secret = SecretKey { modulus, exponent: private_exp, pair_tag: public.tag(), crt: None };
        Ok(Self { public, secret })
    }

    fn with_primes(p: &BigUint, q: &BigUint, public_exp: BigUint, private_exp: BigUint) -> Result<Self, CipherError> {
        let crt = CrtParams::new(p, q, &private_exp);
        let mut pair = Self::from_parts(p * q, public_exp, private_exp)?;
        pair.secret.crt = crt;
        Ok(pair)
    }

    /// Textbook construction from two known primes, with the private
    /// exponent taken modulo Euler's totient (p-1)(q-1).
    pub fn from_primes(p: &BigUint, q: &BigUint, public_exp: u32) -> Result<Self, CipherError> {
        if p == q {
            return Err(CipherError::InvalidKey("primes must differ"));
        }
        let one = BigUint::one();
        let phi = (p - &one) * (q - &one);
        let e = BigUint::from(public_exp);
        let d = mod_inverse(&e, &phi).ok_or(CipherError::InvalidKey("exponent not invertible"))?;
        Self::with_primes(p, q, e, d)
    }

    pub fn modulus_bits(&self) -> u64 {
        self.public.modulus.bits()
    }
}

/// A sealed plaintext together with the tag of the key that sealed it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Envelope {
    pub ciphertext: BigUint,
    pub key_tag: KeyTag,
}

impl fmt::Display for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.key_tag, self.ciphertext)
    }
}

impl FromStr for Envelope {
    type Err = CipherError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (tag, ct) = s.split_once(':').ok_or(CipherError::InvalidKey("envelope"))?;
        let ciphertext = BigUint::parse_bytes(ct.as_bytes(), 10).ok_or(CipherError::InvalidKey("ciphertext"))?;
        Ok(Envelope { ciphertext, key_tag: tag.parse()? })
    }
}

fn key_tag(modulus: &BigUint, exponent: &BigUint) -> KeyTag {
    let mut h = Sha256::new();
    h.update(modulus.to_bytes_be());
    h.update([0u8]);
    h.update(exponent.to_bytes_be());
    let digest = h.finalize();
    let mut tag = [0u8; 8];
    tag.copy_from_slice(&digest[..8]);
    KeyTag(tag)
}

/// Left-to-right binary square-and-multiply.
pub fn mod_pow(base: &BigUint, exponent: &BigUint, modulus: &BigUint) -> BigUint {
    if modulus.is_one() {
        return BigUint::zero();
    }
    let base = base % modulus;
    let mut acc = BigUint::one();
    for i in (0..exponent.bits()).rev() {
        acc = &acc * &acc % modulus;
        if exponent.bit(i) {
            acc = acc * &base % modulus;
        }
    }
    acc
}

/// Multiplicative inverse via the extended Euclidean algorithm.
pub fn mod_inverse(a: &BigUint, modulus: &BigUint) -> Option<BigUint> {
    if modulus.is_zero() {
        return None;
    }
    let m = BigInt::from_biguint(Sign::Plus, modulus.clone());
    let (mut old_r, mut r) = (BigInt::from_biguint(Sign::Plus, a % modulus), m.clone());
    let (mut old_s, mut s) = (BigInt::one(), BigInt::zero());
    while !r.is_zero() {
        let q = &old_r / &r;
        let next_r = &old_r - &q * &r;
        old_r = std::mem::replace(&mut r, next_r);
        let next_s = &old_s - &q * &s;
        old_s = std::mem::replace(&mut s, next_s);
    }
    if !old_r.is_one() {
        return None;
    }
    old_s.mod_floor(&m).to_biguint()
}

/// Miller-Rabin with `rounds` random witnesses drawn from `rng`.
pub fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    if let Some(small) = n.to_u32() {
        if small < 2 {
            return false;
        }
        if SMALL_PRIMES.contains(&small) {
            return true;
        }
    }
    for &p in &SMALL_PRIMES {
        if (n % p).is_zero() {
            return false;
        }
    }

    let one = BigUint::one();
    let n_minus_one = n - &one;
    let twos = n_minus_one.trailing_zeros().unwrap_or(0);
    let odd = &n_minus_one >> twos;
    let span = n - 3u32;

    'witness: for _ in 0..rounds {
        let a = random_below(&span, rng) + 2u32;
        let mut x = mod_pow(&a, &odd, n);
        if x == one || x == n_minus_one {
            continue;
        }
        for _ in 1..twos {
            x = &x * &x % n;
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn random_below<R: Rng + ?Sized>(bound: &BigUint, rng: &mut R) -> BigUint {
    let bits = bound.bits();
    let bytes = bits.div_ceil(8) as usize;
    let excess = (bytes as u64 * 8 - bits) as u32;
    let mut buf = vec![0u8; bytes];
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xff >> excess;
        let candidate = BigUint::from_bytes_be(&buf);
        if &candidate < bound {
            return candidate;
        }
    }
}

fn random_prime<R: Rng + ?Sized>(bits: u32, rng: &mut R) -> BigUint {
    let bytes = bits.div_ceil(8) as usize;
    let excess = bytes as u32 * 8 - bits;
    let mut buf = vec![0u8; bytes];
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xff >> excess;
        let mut candidate = BigUint::from_bytes_be(&buf);
        // Top two bits set so the product has exactly 2*bits bits.
        candidate.set_bit(u64::from(bits) - 1, true);
        candidate.set_bit(u64::from(bits) - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return candidate;
        }
    }
}

/// Key sizes accepted by [`generate_keypair`]: powers of two from 32 to 4096.
pub fn supported_key_size(bits: u32) -> bool {
    (32..=4096).contains(&bits) && bits.is_power_of_two()
}

/// Deterministic RSA keypair from a seed. The private exponent is the
/// inverse of the public one modulo lcm(p-1, q-1).
pub fn generate_keypair(seed: u64, bit_length: u32) -> Result<KeyPair, CipherError> {
    if !supported_key_size(bit_length) {
        return Err(CipherError::UnsupportedKeySize(bit_length));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let half = bit_length / 2;
    let one = BigUint::one();
    for _ in 0..KEYGEN_ATTEMPTS {
        let p = random_prime(half, &mut rng);
        let q = random_prime(half, &mut rng);
        if p == q {
            continue;
        }
        let carmichael = (&p - &one).lcm(&(&q - &one));
        for e in [DEFAULT_PUBLIC_EXPONENT, FALLBACK_PUBLIC_EXPONENT] {
            let e = BigUint::from(e);
            if let Some(d) = mod_inverse(&e, &carmichael) {
                return KeyPair::with_primes(&p, &q, e, d);
            }
        }
    }
    Err(CipherError::KeygenFailure(KEYGEN_ATTEMPTS))
}

/// Seals `plaintext` under `key`.
pub fn encrypt(key: &PublicKey, plaintext: &BigUint) -> Result<Envelope, CipherError> {
    if plaintext >= &key.modulus {
        return Err(CipherError::PlaintextTooLarge);
    }
    Ok(Envelope { ciphertext: mod_pow(plaintext, &key.exponent, &key.modulus), key_tag: key.tag() })
}

/// Opens an envelope sealed under the public half of `key`.
pub fn decrypt(key: &SecretKey, envelope: &Envelope) -> Result<BigUint, CipherError> {
    if envelope.key_tag != key.pair_tag {
        return Err(CipherError::KeyMismatch { expected: key.pair_tag, found: envelope.key_tag });
    }
    if envelope.ciphertext >= key.modulus {
        return Err(CipherError::PlaintextTooLarge);
    }
    Ok(match &key.crt {
        Some(crt) => crt.pow(&envelope.ciphertext),
        None => mod_pow(&envelope.ciphertext, &key.exponent, &key.modulus),
    })
}

/// Packs a phone number into an integer as `1 <plus flag> <2-digit length> <digits>`.
///
/// The leading 1 keeps leading zeros of the number significant and the
/// length field makes the packing injective.
pub fn encode_contact(phone: &str) -> Result<BigUint, CipherError> {
    let malformed = || CipherError::MalformedNumber(phone.to_string());
    let (plus, digits) = match phone.strip_prefix('+') {
        Some(rest) => (true, rest),
        None => (false, phone),
    };
    if !(5..=15).contains(&digits.len()) || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed());
    }
    let packed = format!("1{}{:02}{}", u8::from(plus), digits.len(), digits);
    BigUint::parse_bytes(packed.as_bytes(), 10).ok_or_else(malformed)
}

pub fn decode_contact(value: &BigUint) -> Result<String, CipherError> {
    let text = value.to_str_radix(10);
    let malformed = || CipherError::MalformedNumber(text.clone());
    let rest = text.strip_prefix('1').ok_or_else(malformed)?;
    let (flag, rest) = rest.split_at_checked(1).ok_or_else(malformed)?;
    let (len, digits) = rest.split_at_checked(2).ok_or_else(malformed)?;
    let len: usize = len.parse().map_err(|_| malformed())?;
    if digits.len() != len || !(5..=15).contains(&len) {
        return Err(malformed());
    }
    match flag {
        "0" => Ok(digits.to_string()),
        "1" => Ok(format!("+{digits}")),
        _ => Err(malformed()),
    }
}

/// 256-bit output of [`keyed_digest`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token256(pub [u8; 32]);

impl Token256 {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Token256(out))
    }

    /// First eight bytes, little-endian.
    pub fn low_u64(&self) -> u64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.0[..8]);
        u64::from_le_bytes(b)
    }
}

impl fmt::Display for Token256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// HMAC-SHA256 of `message` under `key`.
pub fn keyed_digest(key: &[u8], message: &[u8]) -> Token256 {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("HMAC accepts keys of any length");
    mac.update(message);
    Token256(mac.finalize().into_bytes().into())
}

/// Draws a uniformly random plaintext below the modulus; used by self-tests.
pub fn random_plaintext<R: RngCore>(key: &PublicKey, rng: &mut R) -> BigUint {
    random_below(&key.modulus, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> KeyPair {
        KeyPair::from_primes(&BigUint::from(61u32), &BigUint::from(53u32), 17).unwrap()
    }

    #[test]
    fn toy_primes_give_classic_exponents() {
        let kp = toy();
        assert_eq!(kp.public.modulus, BigUint::from(3233u32));
        assert_eq!(kp.public.exponent, BigUint::from(17u32));
        assert_eq!(kp.secret.exponent, BigUint::from(2753u32));
    }

    #[test]
    fn toy_vector_round_trip() {
        let kp = toy();
        let env = encrypt(&kp.public, &BigUint::from(65u32)).unwrap();
        assert_eq!(env.ciphertext, BigUint::from(2790u32));
        assert_eq!(decrypt(&kp.secret, &env).unwrap(), BigUint::from(65u32));
    }

    #[test]
    fn fixed_points_and_bounds() {
        let kp = toy();
        for m in [0u32, 1] {
            let env = encrypt(&kp.public, &BigUint::from(m)).unwrap();
            assert_eq!(env.ciphertext, BigUint::from(m));
        }
        assert_eq!(encrypt(&kp.public, &BigUint::from(3233u32)), Err(CipherError::PlaintextTooLarge));
    }

    #[test]
    fn mismatched_tag_is_rejected() {
        let a = generate_keypair(1, 32).unwrap();
        let b = generate_keypair(2, 32).unwrap();
        let env = encrypt(&a.public, &BigUint::from(12345u32)).unwrap();
        assert!(matches!(decrypt(&b.secret, &env), Err(CipherError::KeyMismatch { .. })));
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let a = generate_keypair(7, 32).unwrap();
        assert_eq!(a, generate_keypair(7, 32).unwrap());
        assert_eq!(a.modulus_bits(), 32);
        assert_ne!(a.public.modulus, generate_keypair(8, 32).unwrap().public.modulus);
        assert_eq!(generate_keypair(7, 48), Err(CipherError::UnsupportedKeySize(48)));
    }

    #[test]
    fn contact_codec_edges() {
        let n = encode_contact("+393331234567").unwrap();
        assert_eq!(decode_contact(&n).unwrap(), "+393331234567");
        assert_ne!(encode_contact("12345").unwrap(), encode_contact("012345").unwrap());
        assert!(encode_contact("1234567890123456").is_err());
        assert!(encode_contact("1234").is_err());
        assert!(encode_contact("12a45").is_err());
        assert!(encode_contact("++12345").is_err());
        assert!(decode_contact(&BigUint::from(2_005_12345u64)).is_err());
    }

    #[test]
    fn digest_is_total_and_stable() {
        let a = keyed_digest(b"k", b"");
        assert_eq!(a, keyed_digest(b"k", b""));
        assert_ne!(a, keyed_digest(b"k2", b""));
        assert_eq!(Token256::from_hex(&a.to_hex()), Some(a));
        assert_eq!(Token256::from_hex("zz"), None);
    }

    #[test]
    fn envelope_text_form_parses_back() {
        let kp = toy();
        let env = encrypt(&kp.public, &BigUint::from(42u32)).unwrap();
        assert_eq!(env.to_string().parse::<Envelope>().unwrap(), env);
    }
}
