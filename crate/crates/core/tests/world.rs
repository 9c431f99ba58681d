use std::collections::{BTreeMap, BTreeSet};

use proximity::cipher::{decode_contact, decrypt};
use proximity::device::UNLIMITED;
use proximity::world::*;

fn small(seed_sigma: f64) -> WorldConfig {
    let mut c =
        WorldConfig { agent_count: 80, box_size: 60.0, duration_seconds: 4 * 3600, incubation_seconds: 3600, ..WorldConfig::default() };
    c.radio.noise_sigma = seed_sigma;
    c
}

fn run(config: WorldConfig, seed: u64) -> World {
    let mut w = World::new(config, seed).unwrap();
    w.run();
    w
}

fn agent_of(phone: &str) -> usize {
    phone.trim_start_matches("+393").parse().unwrap()
}

#[test]
fn same_seed_same_log() {
    let a = run(small(2.0), 5);
    let b = run(small(2.0), 5);
    assert_eq!(a.trace_lines(), b.trace_lines());
    assert_eq!(a.stats, b.stats);
    assert_ne!(a.trace_lines(), run(small(2.0), 6).trace_lines());
}

#[test]
fn noiseless_sensing_is_symmetric() {
    let w = run(small(0.0), 1);
    assert!(w.stats.encounter_entries > 0);
    assert_eq!(w.stats.asymmetric_samples, 0);
    let noisy = run(small(4.0), 1);
    assert!(noisy.stats.asymmetric_samples > 0);
}

#[test]
fn non_users_never_appear_in_ledgers() {
    let w = run(small(2.0), 2);
    let non_users: BTreeSet<usize> = w.agents.iter().filter(|a| a.device.is_none()).map(|a| a.id).collect();
    assert!(!non_users.is_empty());
    for &id in &non_users {
        assert!(w.beacon(id).is_none());
    }
    for (_, entry) in w.global_ledger_view() {
        let peer = agent_of(&decode_contact(&decrypt(&w.keypair.secret, &entry.peer_envelope).unwrap()).unwrap());
        assert!(!non_users.contains(&peer));
    }
}

#[test]
fn infections_are_local() {
    let w = run(small(2.0), 3);
    let mut seen = 0;
    for e in &w.log {
        if let WorldEvent::Transmit { at, infector, infectee, distance } = e {
            seen += 1;
            assert!(*distance <= w.config.infection_range);
            let covering = pair_contacts(&w.log, *infector, *infectee, *at, *at);
            assert!(covering.iter().any(|c| c.2 <= w.config.infection_range), "no contact covers transmission at {at}");
        }
    }
    assert!(seen > 0);
}

#[test]
fn decrypted_ledgers_match_ground_truth() {
    let config = small(0.0);
    let w = run(config.clone(), 4);
    let view = w.global_ledger_view();
    assert!(!view.is_empty());
    for (observer, entry) in view {
        let peer = agent_of(&decode_contact(&decrypt(&w.keypair.secret, &entry.peer_envelope).unwrap()).unwrap());
        assert_ne!(peer, observer);
        assert!(entry.estimated_distance <= config.tracking_threshold + 1e-9);
        let truth = pair_contacts(&w.log, observer, peer, entry.started_at, entry.ended_at() - 1);
        assert!(
            truth.iter().any(|c| c.0 <= entry.started_at && c.1 >= entry.ended_at() && c.2 <= config.tracking_threshold + 1e-9),
            "entry {observer}->{peer} [{}, {}) has no ground-truth interval",
            entry.started_at,
            entry.ended_at()
        );
    }
}

#[test]
fn logs_and_devices_hold_no_plaintext_contacts() {
    let w = run(small(2.0), 7);
    assert!(!w.trace_lines().contains("+393"));
    for agent in &w.agents {
        let Some(device) = &agent.device else { continue };
        let snapshot = device.to_snapshot();
        for other in w.agents.iter().filter(|o| o.id != agent.id) {
            assert!(!snapshot.contains(&other.contact()));
        }
    }
}

#[test]
fn radio_streams_do_not_perturb_the_epidemic() {
    let transmissions = |threshold: f64, sigma: f64| {
        let mut c = small(sigma);
        c.tracking_threshold = threshold;
        let w = run(c, 8);
        w.log.iter().filter(|e| matches!(e, WorldEvent::Transmit { .. })).cloned().collect::<Vec<_>>()
    };
    let reference = transmissions(3.0, 2.0);
    assert!(!reference.is_empty());
    assert_eq!(transmissions(10.0, 2.0), reference);
    assert_eq!(transmissions(2.5, 0.0), reference);
}

#[test]
fn every_key_is_used_once_and_server_keeps_nothing() {
    let mut c = small(0.0);
    c.capacity = 3;
    let w = run(c, 9);
    let keys: Vec<_> = w.log.iter().filter_map(|e| if let WorldEvent::KeyIssue { key, .. } = e { Some(*key) } else { None }).collect();
    let uploads = w.log.iter().filter(|e| matches!(e, WorldEvent::AlertUpload { .. })).count();
    assert!(!keys.is_empty());
    assert_eq!(keys.len(), uploads);
    assert_eq!(keys.iter().collect::<BTreeSet<_>>().len(), keys.len());
    for k in &keys {
        assert!(w.server.key(k).unwrap().consumed);
    }
    assert_eq!(w.stats.max_server_residue, 0);
    assert_eq!(w.server.held_ledger_entries(), 0);
    assert_eq!(w.stats.errors, 0);
}

#[test]
fn capacity_limits_red_notices_until_release() {
    let mut c = small(0.0);
    c.capacity = 2;
    let w = run(c.clone(), 10);
    let mut sent = BTreeMap::<String, usize>::new();
    for e in &w.log {
        if let WorldEvent::Notify { origin, .. } = e {
            *sent.entry(origin.to_hex()).or_default() += 1;
        }
    }
    assert!(sent.values().all(|&n| n <= 2));
    assert!(w.server.waitlisted() > 0);

    c.release_interval_seconds = 1800;
    c.release_batch = 5;
    let released = run(c, 10);
    assert!(released.log.iter().any(|e| matches!(e, WorldEvent::WaitlistRelease { released, .. } if *released > 0)));
    assert!(released.stats.red_notifications > w.stats.red_notifications);
}

#[test]
fn yellow_fan_out_is_opt_in() {
    let mut c = small(0.0);
    let without = run(c.clone(), 11);
    assert_eq!(without.stats.yellow_notifications, 0);
    c.yellow_enabled = true;
    let with = run(c, 11);
    assert!(with.stats.yellow_notifications > 0);
    assert!(with.log.iter().any(|e| matches!(e, WorldEvent::YellowRequest { .. })));
    assert_eq!(with.stats.red_notifications, without.stats.red_notifications);
}

#[test]
fn false_alerts_grow_with_threshold() {
    let rate = |threshold: f64| {
        let mut c = small(0.0);
        c.tracking_threshold = threshold;
        c.capacity = UNLIMITED;
        let w = run(c.clone(), 12);
        false_alert_rate(&w.log, c.infection_range, c.incubation_seconds).unwrap()
    };
    assert_eq!(rate(2.5), 0.0);
    assert!(rate(10.0) > rate(3.0));
}

#[test]
fn replayed_trace_drives_encounters() {
    let text = "agent_a,agent_b,start,end,distance\n0,1,0,600,1.0\n# far pair\n2,3,0,600,8.0\n";
    let trace = read_trace(text.as_bytes()).unwrap();
    let mut c =
        WorldConfig { agent_count: 4, duration_seconds: 1200, initial_infected: 1, app_user_fraction: 1.0, ..WorldConfig::default() };
    c.radio.noise_sigma = 0.0;
    let mut w = World::with_trace(c, 1, trace).unwrap();
    w.run();
    let contacts: Vec<String> = w.log.iter().filter(|e| matches!(e, WorldEvent::Contact { .. })).map(|e| e.to_string()).collect();
    assert_eq!(contacts, vec!["CONTACT start=0 end=600 a=0 b=1 min_distance=1", "CONTACT start=0 end=600 a=2 b=3 min_distance=8"]);
    let near = w.agents[0].device.as_ref().unwrap();
    assert_eq!(near.ledger.len(), 1);
    assert_eq!(near.ledger.entries[0].duration, 600);
    assert!(w.agents[2].device.as_ref().unwrap().ledger.is_empty());
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(matches!(read_trace("0,1,5,2,1.0\n".as_bytes()), Err(WorldError::Trace { .. })));
    assert!(matches!(read_trace("0,1,x,2,1.0\n".as_bytes()), Err(WorldError::Trace { .. })));
    let c = WorldConfig { agent_count: 1, ..WorldConfig::default() };
    assert!(matches!(World::new(c, 1), Err(WorldError::InvalidConfig(_))));
    let c = WorldConfig { key_bits: 32, ..WorldConfig::default() };
    assert!(World::new(c, 1).is_err());
}
