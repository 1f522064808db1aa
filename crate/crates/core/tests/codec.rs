use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roamfl_core::protocol::{sample, Codec, DecodeError, Message, HEADER_LEN};

fn random_message(seed: u64) -> Message {
    sample::message(&mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn decode_inverts_encode(seed: u64) {
        let codec = Codec::default();
        let msg = random_message(seed);
        let bytes = codec.encode(&msg).unwrap();
        let (back, used) = codec.decode(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(&back, &msg);
        prop_assert_eq!(codec.encode(&back).unwrap(), bytes);
    }

    #[test]
    fn payload_len_matches_encoding(seed: u64) {
        let msg = random_message(seed);
        let bytes = Codec::default().encode(&msg).unwrap();
        prop_assert_eq!(msg.payload_len().unwrap() + HEADER_LEN, bytes.len());
        let declared = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        prop_assert_eq!(declared + 4, bytes.len());
        prop_assert_eq!(bytes[4], msg.tag() as u8);
    }

    #[test]
    fn randomized_checkpoints_round_trip(seed: u64) {
        let ckpt = sample::checkpoint(&mut ChaCha8Rng::seed_from_u64(seed));
        ckpt.validate().unwrap();
        let msg = Message::CheckpointTransfer(Box::new(ckpt));
        let codec = Codec::default();
        let a = codec.encode(&msg).unwrap();
        let b = codec.encode(&msg.clone()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(codec.decode_exact(&a).unwrap(), msg);
    }

    #[test]
    fn every_proper_prefix_is_incomplete(seed: u64) {
        let codec = Codec::default();
        let bytes = codec.encode(&random_message(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..8 {
            let cut = rng.random_range(0..bytes.len());
            let needed = if cut < 4 { 4 } else { bytes.len() };
            prop_assert_eq!(codec.decode(&bytes[..cut]), Err(DecodeError::Incomplete { needed }));
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic_or_overread(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        check_decode(&bytes);
    }

    #[test]
    fn mutated_frames_never_panic_or_overread(seed: u64, flips in 1usize..6) {
        let codec = Codec::default();
        let mut bytes = codec.encode(&random_message(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
        for _ in 0..flips {
            let i = rng.random_range(0..bytes.len());
            bytes[i] ^= 1 << rng.random_range(0..8);
        }
        if rng.random_bool(0.3) {
            bytes.truncate(rng.random_range(0..=bytes.len()));
        }
        check_decode(&bytes);
    }
}

/// A decode either needs more bytes, rejects, or consumes exactly the
/// declared frame and re-encodes to the same bytes.
fn check_decode(bytes: &[u8]) {
    let codec = Codec::new(1 << 20);
    match codec.decode(bytes) {
        Ok((msg, used)) => {
            let declared = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
            assert_eq!(used, declared + 4);
            assert!(used <= bytes.len());
            assert_eq!(codec.encode(&msg).unwrap(), &bytes[..used]);
        }
        Err(DecodeError::Incomplete { needed }) => assert!(needed > bytes.len()),
        Err(DecodeError::Protocol(_)) => {}
    }
}

#[test]
fn stream_of_frames_decodes_in_order() {
    let codec = Codec::default();
    let msgs: Vec<Message> = (0..50).map(random_message).collect();
    let stream: Vec<u8> = msgs.iter().flat_map(|m| codec.encode(m).unwrap()).collect();
    let mut at = 0;
    for m in &msgs {
        let (got, used) = codec.decode(&stream[at..]).unwrap();
        assert_eq!(&got, m);
        at += used;
    }
    assert_eq!(at, stream.len());
}
