use std::collections::BTreeSet;

use proptest::prelude::*;
use proximity::authority::*;
use proximity::cipher::*;
use proximity::device::*;
use proximity::world::phone_number;

fn keypair() -> KeyPair {
    generate_keypair(77, 128).unwrap()
}

fn doctor() -> DoctorCredential {
    DoctorCredential { doctor_id: "doc".into(), certified: true }
}

fn sealed(kp: &KeyPair, peer: usize) -> Envelope {
    encrypt(&kp.public, &encode_contact(&phone_number(peer)).unwrap()).unwrap()
}

/// (peer, start, duration, distance) encounters recorded on a fresh device.
fn device_with(kp: &KeyPair, encounters: &[(usize, u64, u64, f64)], threshold: f64) -> DeviceState {
    let mut d = DeviceState::new(phone_number(999), "user-999", 3600, threshold);
    for &(peer, start, duration, distance) in encounters {
        d.record_encounter(sealed(kp, peer), start, duration, -60.0, distance).unwrap();
    }
    d
}

fn encounters() -> impl Strategy<Value = Vec<(usize, u64, u64, f64)>> {
    prop::collection::vec((0usize..12, 0u64..3000, 10u64..600, 0.0f64..3.0), 0..30)
}

struct FailingUplink;

impl AlertUplink for FailingUplink {
    fn upload(&mut self, _: AlertUpload) -> Result<UploadReceipt, UploadError> {
        Err(UploadError::Transport("offline".into()))
    }
}

#[test]
fn strength_is_monotone() {
    let w = StrengthWeighting { cutoff_distance: 3.0 };
    assert_eq!(w.weight(0.0), 1.0);
    assert_eq!(w.weight(3.0), 0.0);
    assert_eq!(w.weight(5.0), 0.0);
    let kp = keypair();
    let entry = |duration, distance| EncounterEntry {
        peer_envelope: sealed(&kp, 1),
        started_at: 0,
        duration,
        mean_rssi: -60.0,
        estimated_distance: distance,
        samples: 1,
    };
    let s = |d, x| interaction_strength([&entry(d, x)], w);
    assert!(s(100, 1.0) < s(200, 1.0));
    assert!(s(100, 2.0) < s(100, 1.0));
    assert_eq!(s(100, 1.5), 50.0);
}

#[test]
fn end_to_end_dispatch_reaches_ledger_peers() {
    let kp = keypair();
    let mut device = device_with(&kp, &[(1, 0, 300, 0.5), (2, 100, 60, 2.0), (1, 400, 100, 1.0), (3, 500, 10, 2.9)], 3.0);
    device.capacity = 2;
    let mut issuer = KeyIssuer::new(b"issuer".to_vec());
    let mut server = DispatchServer::new(kp.secret.clone(), b"tags".to_vec(), UNLIMITED, 3600);
    let km = issuer.issue_activation_key(&doctor(), &device.user_id, 600).unwrap();
    server.register_key(km.clone());

    let mut uplink = DirectUplink::new(&mut server);
    let receipt = device.activate_alert_mode(&km.code(), &mut uplink, 600).unwrap();
    assert_eq!((receipt.sent, receipt.waitlisted), (2, 1));
    assert_eq!(device.mode, Mode::Alert);
    assert!(matches!(device.activate_alert_mode(&km.code(), &mut DirectUplink::new(&mut server), 601), Err(DeviceError::AlreadyAlerting)));

    let notes = server.drain_outbox();
    let recipients: Vec<&str> = notes.iter().map(|n| n.recipient_contact.as_str()).collect();
    assert_eq!(recipients, vec![phone_number(1).as_str(), phone_number(2).as_str()]);
    assert!(notes.iter().all(|n| n.message.level == AlertLevel::Red && n.message.origin_tag == receipt.origin_tag));
    assert_eq!(server.pending(&receipt.origin_tag)[0].recipient_contact, phone_number(3));
    assert_eq!(server.held_ledger_entries(), 0);
    assert!(server.key(&km.token).unwrap().consumed);
}

#[test]
fn rejected_or_failed_upload_leaves_device_tracking() {
    let kp = keypair();
    let mut device = device_with(&kp, &[(1, 0, 300, 0.5)], 3.0);
    let before = device.clone();
    let mut server = DispatchServer::new(kp.secret.clone(), b"tags".to_vec(), UNLIMITED, 3600);
    let err = device.activate_alert_mode(&"ab".repeat(32), &mut DirectUplink::new(&mut server), 10);
    assert!(matches!(err, Err(DeviceError::InvalidKey(_))));
    assert_eq!(device, before);
    assert!(matches!(device.activate_alert_mode(&"ab".repeat(32), &mut FailingUplink, 10), Err(DeviceError::UploadFailure(_))));
    assert_eq!(device, before);
    assert!(matches!(device.activate_alert_mode("not hex", &mut FailingUplink, 10), Err(DeviceError::InvalidKey(_))));
}

#[test]
fn server_refuses_second_use_of_a_key() {
    let kp = keypair();
    let mut issuer = KeyIssuer::new(b"issuer".to_vec());
    let mut server = DispatchServer::new(kp.secret.clone(), b"tags".to_vec(), UNLIMITED, 3600);
    let km = issuer.issue_activation_key(&doctor(), "u", 0).unwrap();
    server.register_key(km.clone());
    let upload = AlertUpload {
        km_token: km.code(),
        user_id: "u".into(),
        contacts: vec![ScoredContact { envelope: sealed(&kp, 4), score: 1.0 }],
        alert_count: 1,
        sent_at: 5,
    };
    assert!(server.process_alert_upload(&upload, UNLIMITED).is_ok());
    assert_eq!(server.process_alert_upload(&upload, UNLIMITED), Err(AuthorityError::RejectedUpload(KeyRejection::AlreadyConsumed)));
    let audit = server.audit();
    assert_eq!(audit.len(), 2);
    assert!(audit[0].key_consumed && !audit[1].key_consumed);
    assert_eq!(audit[1].decryptions, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn priority_split_is_a_ranked_partition(list in encounters(), capacity in 0usize..15) {
        let kp = keypair();
        let device = device_with(&kp, &list, 3.0);
        let (alert, waiting) = device.prioritized_contacts(capacity);
        let peers: BTreeSet<usize> = list.iter().map(|e| e.0).collect();
        prop_assert_eq!(alert.len(), capacity.min(peers.len()));
        prop_assert_eq!(alert.len() + waiting.len(), peers.len());
        let all: Vec<&ScoredContact> = alert.iter().chain(waiting.iter()).collect();
        let distinct: BTreeSet<&Envelope> = all.iter().map(|c| &c.envelope).collect();
        prop_assert_eq!(distinct.len(), all.len());
        for pair in all.windows(2) {
            prop_assert!(pair[0].score > pair[1].score || (pair[0].score == pair[1].score && pair[0].envelope < pair[1].envelope));
        }
    }

    #[test]
    fn longer_contact_never_lowers_priority(list in encounters(), extra in 1u64..500) {
        prop_assume!(!list.is_empty());
        let kp = keypair();
        let base = device_with(&kp, &list, 3.0);
        let mut longer = base.clone();
        longer.extend_encounter(0, extra, -60.0, list[0].3).unwrap();
        let target = sealed(&kp, list[0].0);
        let score = |d: &DeviceState| d.prioritized_contacts(UNLIMITED).0.into_iter().find(|c| c.envelope == target).unwrap().score;
        prop_assert!(score(&longer) >= score(&base));
    }

    #[test]
    fn server_dispatch_respects_capacity_and_order(list in encounters(), capacity in 0usize..15, device_cap in 0usize..15) {
        let kp = keypair();
        let mut device = device_with(&kp, &list, 3.0);
        device.capacity = device_cap;
        let mut issuer = KeyIssuer::new(b"i".to_vec());
        let mut server = DispatchServer::new(kp.secret.clone(), b"t".to_vec(), capacity, 3600);
        let km = issuer.issue_activation_key(&doctor(), &device.user_id, 3000).unwrap();
        server.register_key(km.clone());
        let mut uplink = DirectUplink::new(&mut server);
        let receipt = device.activate_alert_mode(&km.code(), &mut uplink, 3000).unwrap();
        let outcome = uplink.outcome.take().unwrap();

        let in_window: BTreeSet<String> = list.iter().filter(|e| e.1 + e.2 + 3600 >= 3000).map(|e| phone_number(e.0)).collect();
        let dispatched: BTreeSet<String> = outcome.records.iter().map(|r| r.recipient_contact.clone()).collect();
        prop_assert_eq!(&dispatched, &in_window);
        let sent = outcome.count(DispatchStatus::Sent);
        prop_assert_eq!(sent, capacity.min(device_cap).min(in_window.len()));
        prop_assert_eq!(receipt.sent, sent);
        prop_assert_eq!(receipt.waitlisted, in_window.len() - sent);
        for pair in outcome.records.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
            prop_assert!(!(pair[0].status == DispatchStatus::Waitlisted && pair[1].status == DispatchStatus::Sent));
        }
        prop_assert_eq!(server.drain_outbox().len(), sent);
        prop_assert_eq!(server.held_ledger_entries(), 0);

        let mut released = 0;
        while !server.pending(&outcome.origin_tag).is_empty() {
            released += server.release_waitlist(&outcome.origin_tag, 2, 3100).unwrap().len();
        }
        prop_assert_eq!(released, in_window.len() - sent);
        prop_assert_eq!(server.drain_outbox().len(), released);
    }

    #[test]
    fn snapshots_round_trip_without_plaintext(list in encounters(), yellow in any::<bool>()) {
        let kp = keypair();
        let mut device = device_with(&kp, &list, 3.0);
        device.yellow_enabled = yellow;
        let text = device.to_snapshot();
        prop_assert_eq!(DeviceState::from_snapshot(&text).unwrap(), device);
        for (peer, ..) in &list {
            let digits = phone_number(*peer);
            prop_assert!(!text.contains(digits.trim_start_matches('+')));
        }
    }

    #[test]
    fn purge_keeps_exactly_the_window(list in encounters(), now in 0u64..8000) {
        let kp = keypair();
        let mut device = device_with(&kp, &list, 3.0);
        device.purge_expired(now);
        let kept = list.iter().filter(|e| e.1 + e.2 + 3600 >= now).count();
        prop_assert_eq!(device.ledger.len(), kept);
    }
}
