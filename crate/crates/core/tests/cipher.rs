use num_bigint::BigUint;
use proptest::prelude::*;
use proximity::cipher::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn toy() -> KeyPair {
    KeyPair::from_primes(&BigUint::from(61u32), &BigUint::from(53u32), 17).unwrap()
}

#[test]
fn toy_vector() {
    let pair = toy();
    assert_eq!(pair.public.modulus, BigUint::from(3233u32));
    assert_eq!(pair.secret.exponent, BigUint::from(2753u32));
    let env = encrypt(&pair.public, &BigUint::from(65u32)).unwrap();
    assert_eq!(env.ciphertext, BigUint::from(2790u32));
    assert_eq!(decrypt(&pair.secret, &env).unwrap(), BigUint::from(65u32));
}

#[test]
fn primality_agrees_with_trial_division() {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let is_prime = |n: u64| n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| !n.is_multiple_of(d));
    for n in 0u64..5000 {
        assert_eq!(is_probable_prime(&BigUint::from(n), 20, &mut rng), is_prime(n), "n = {n}");
    }
    // Carmichael numbers fool Fermat but not Miller-Rabin.
    for n in [561u64, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265] {
        assert!(!is_probable_prime(&BigUint::from(n), 20, &mut rng));
    }
    let m127 = (BigUint::from(1u32) << 127u32) - 1u32;
    assert!(is_probable_prime(&m127, 20, &mut rng));
}

#[test]
fn generated_keys_have_requested_size() {
    for bits in [32u32, 64, 128, 256, 512] {
        let pair = generate_keypair(u64::from(bits), bits).unwrap();
        assert_eq!(pair.modulus_bits(), u64::from(bits));
    }
    for bits in [0u32, 16, 100, 8192] {
        assert_eq!(generate_keypair(1, bits), Err(CipherError::UnsupportedKeySize(bits)));
    }
}

#[test]
fn large_key_smoke() {
    let pair = generate_keypair(2048, 2048).unwrap();
    assert_eq!(pair.modulus_bits(), 2048);
    let m = encode_contact("+393331234567").unwrap();
    let env = encrypt(&pair.public, &m).unwrap();
    assert_eq!(decode_contact(&decrypt(&pair.secret, &env).unwrap()).unwrap(), "+393331234567");
}

#[test]
fn keys_do_not_open_each_other() {
    let a = generate_keypair(1, 128).unwrap();
    let b = generate_keypair(2, 128).unwrap();
    let env = encrypt(&a.public, &BigUint::from(12345u32)).unwrap();
    assert!(matches!(decrypt(&b.secret, &env), Err(CipherError::KeyMismatch { .. })));
    assert_eq!(encrypt(&a.public, &a.public.modulus), Err(CipherError::PlaintextTooLarge));
}

#[test]
fn digest_avalanche() {
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let trials = 1000;
    let mut total = 0u32;
    for _ in 0..trials {
        let mut msg = [0u8; 24];
        rand::RngCore::fill_bytes(&mut rng, &mut msg);
        let base = keyed_digest(b"server secret", &msg);
        let bit = rand::Rng::gen_range(&mut rng, 0..msg.len() * 8);
        msg[bit / 8] ^= 1 << (bit % 8);
        let flipped = keyed_digest(b"server secret", &msg);
        total += base.0.iter().zip(flipped.0.iter()).map(|(x, y)| (x ^ y).count_ones()).sum::<u32>();
    }
    let mean = f64::from(total) / f64::from(trials);
    assert!((96.0..=160.0).contains(&mean), "mean hamming distance {mean}");
    assert!((mean - 128.0).abs() < 2.0);
}

#[test]
fn empty_message_has_a_digest() {
    assert_eq!(keyed_digest(b"k", b""), keyed_digest(b"k", b""));
    assert_ne!(keyed_digest(b"k", b""), keyed_digest(b"k", b"\0"));
}

#[test]
fn crt_and_plain_decryption_agree() {
    let pair = generate_keypair(5, 256).unwrap();
    assert!(pair.secret.crt.is_some());
    let plain = SecretKey { crt: None, ..pair.secret.clone() };
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for _ in 0..50 {
        let env = encrypt(&pair.public, &random_plaintext(&pair.public, &mut rng)).unwrap();
        assert_eq!(decrypt(&pair.secret, &env).unwrap(), decrypt(&plain, &env).unwrap());
    }
}

#[test]
fn digest_matches_published_hmac_vector() {
    // RFC 4231 test case 2.
    let d = keyed_digest(b"Jefe", b"what do ya want for nothing?");
    assert_eq!(d.to_hex(), "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843");
    assert_eq!(Token256::from_hex(&d.to_hex()), Some(d));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mod_pow_matches_reference(base in any::<u128>(), exp in any::<u64>(), modulus in 1u128..) {
        let (b, e, m) = (BigUint::from(base), BigUint::from(exp), BigUint::from(modulus));
        prop_assert_eq!(mod_pow(&b, &e, &m), b.modpow(&e, &m));
    }

    #[test]
    fn inverse_is_an_inverse(a in 1u64.., m in 2u64..) {
        let (a, m) = (BigUint::from(a), BigUint::from(m));
        match mod_inverse(&a, &m) {
            Some(inv) => prop_assert_eq!((&a * &inv) % &m, BigUint::from(1u32) % &m),
            None => prop_assert_ne!(num_integer::Integer::gcd(&a, &m), BigUint::from(1u32)),
        }
    }

    #[test]
    fn round_trip(seed in any::<u64>(), bits in prop::sample::select(vec![64u32, 128, 256]), pt_seed in any::<u64>()) {
        let pair = generate_keypair(seed, bits).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(pt_seed);
        let m = random_plaintext(&pair.public, &mut rng);
        let env = encrypt(&pair.public, &m).unwrap();
        prop_assert_eq!(&env.ciphertext, &m.modpow(&pair.public.exponent, &pair.public.modulus));
        prop_assert_eq!(decrypt(&pair.secret, &env).unwrap(), m);
        prop_assert_eq!(env.to_string().parse::<Envelope>().unwrap(), env);
    }

    #[test]
    fn contact_codec_round_trip(plus in any::<bool>(), digits in "[0-9]{5,15}") {
        let phone = if plus { format!("+{digits}") } else { digits };
        let packed = encode_contact(&phone).unwrap();
        prop_assert_eq!(decode_contact(&packed).unwrap(), phone);
    }

    #[test]
    fn contact_codec_rejects_junk(text in "[0-9a-z+ ]{0,20}") {
        let valid = {
            let digits = text.strip_prefix('+').unwrap_or(&text);
            (5..=15).contains(&digits.len()) && digits.bytes().all(|b| b.is_ascii_digit())
        };
        prop_assert_eq!(encode_contact(&text).is_ok(), valid);
    }
}
