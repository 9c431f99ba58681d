//! Agent micro-world driving the protocol.
//!
//! Agents wander a square box (or replay a recorded contact trace). Phones
//! sample each other's signal strength through a log-distance path-loss
//! model, turn it into a distance estimate and record encounters under the
//! tracking threshold. Infection spreads between agents closer than the
//! infection range. When an infected agent reaches the end of incubation it
//! is detected and, if it carries the app, goes through the full
//! activation flow: key request, upload, decryption and notification.
//!
//! The world knows true geometry, so its event log doubles as ground truth
//! for the protocol checks (false alerts, reach, symmetry).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;

use rand::Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::authority::{DirectUplink, DispatchServer, DispatchStatus, DoctorCredential, KeyIssuer};
use crate::cipher::{encode_contact, encrypt, generate_keypair, keyed_digest, CipherError, Envelope, KeyPair, Token256};
use crate::device::{AlertLevel, DeviceState, Seconds, UNLIMITED};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("distance must be positive, got {0}")]
    NonpositiveDistance(f64),
    #[error("log contains no red notifications")]
    EmptyLog,
    #[error("invalid world configuration: {0}")]
    InvalidConfig(String),
    #[error("trace line {line}: {message}")]
    Trace { line: u64, message: String },
    #[error(transparent)]
    Cipher(#[from] CipherError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioModel {
    pub rssi_at_1m: f64,
    pub path_loss_exponent: f64,
    pub noise_sigma: f64,
    pub max_radio_range: f64,
}

impl Default for RadioModel {
    fn default() -> Self {
        Self { rssi_at_1m: -59.0, path_loss_exponent: 2.0, noise_sigma: 2.0, max_radio_range: 10.0 }
    }
}

/// Received signal strength at `distance` metres, with Gaussian shadowing.
///
/// Always consumes one normal draw, also when `noise_sigma` is zero.
pub fn rssi_at_distance<R: Rng + ?Sized>(distance: f64, model: &RadioModel, rng: &mut R) -> Result<f64, WorldError> {
    if !(distance > 0.0) {
        return Err(WorldError::NonpositiveDistance(distance));
    }
    let noise: f64 = rng.sample(StandardNormal);
    Ok(model.rssi_at_1m - 10.0 * model.path_loss_exponent * distance.log10() + model.noise_sigma * noise)
}

/// Inverse of the noiseless path-loss curve.
pub fn estimate_distance(rssi: f64, model: &RadioModel) -> f64 {
    10f64.powf((model.rssi_at_1m - rssi) / (10.0 * model.path_loss_exponent))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub box_size: f64,
    pub agent_count: usize,
    pub infection_range: f64,
    pub infection_prob_per_contact_second: f64,
    pub tracking_threshold: f64,
    pub tick_seconds: Seconds,
    pub app_user_fraction: f64,
    pub radio: RadioModel,
    pub incubation_seconds: Seconds,
    pub duration_seconds: Seconds,
    pub initial_infected: usize,
    pub min_speed: f64,
    pub max_speed: f64,
    pub max_pause_seconds: Seconds,
    pub capacity: usize,
    pub yellow_enabled: bool,
    pub key_bits: u32,
    pub purge_interval_seconds: Seconds,
    /// Period of automatic waiting-list releases; 0 disables them.
    pub release_interval_seconds: Seconds,
    pub release_batch: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            box_size: 100.0,
            agent_count: 200,
            infection_range: 2.5,
            infection_prob_per_contact_second: 5e-4,
            tracking_threshold: 3.0,
            tick_seconds: 10,
            app_user_fraction: 0.8,
            radio: RadioModel::default(),
            incubation_seconds: 4 * 3600,
            duration_seconds: 12 * 3600,
            initial_infected: 5,
            min_speed: 0.5,
            max_speed: 1.5,
            max_pause_seconds: 600,
            capacity: UNLIMITED,
            yellow_enabled: false,
            key_bits: 128,
            purge_interval_seconds: 3600,
            release_interval_seconds: 0,
            release_batch: 0,
        }
    }
}

impl WorldConfig {
    /// Hard errors; ordering of the three ranges is reported by [`WorldConfig::warnings`].
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::InvalidConfig(m.to_string()));
        if !(self.box_size > 0.0) {
            return bad("box_size must be positive");
        }
        if self.agent_count < 2 {
            return bad("agent_count must be at least 2");
        }
        if !(self.infection_range > 0.0 && self.tracking_threshold > 0.0) {
            return bad("ranges must be positive");
        }
        if !(self.radio.max_radio_range > 0.0 && self.radio.path_loss_exponent > 0.0 && self.radio.noise_sigma >= 0.0) {
            return bad("radio model out of range");
        }
        if !(0.0..=1.0).contains(&self.infection_prob_per_contact_second) || !(0.0..=1.0).contains(&self.app_user_fraction) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.tick_seconds == 0 || self.purge_interval_seconds == 0 {
            return bad("tick_seconds and purge_interval_seconds must be positive");
        }
        if self.initial_infected > self.agent_count {
            return bad("initial_infected exceeds agent_count");
        }
        if !(self.min_speed >= 0.0 && self.max_speed >= self.min_speed) {
            return bad("speed range invalid");
        }
        if !crate::cipher::supported_key_size(self.key_bits) || self.key_bits < 128 {
            return bad("key_bits must be a power of two between 128 and 4096");
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.infection_range > self.tracking_threshold {
            out.push(format!(
                "infection_range {} exceeds tracking_threshold {}: some infectious contacts will go unrecorded",
                self.infection_range, self.tracking_threshold
            ));
        }
        if self.tracking_threshold > self.radio.max_radio_range {
            out.push(format!("tracking_threshold {} exceeds max_radio_range {}", self.tracking_threshold, self.radio.max_radio_range));
        }
        out
    }

    fn infection_prob_per_tick(&self) -> f64 {
        1.0 - (1.0 - self.infection_prob_per_contact_second).powf(self.tick_seconds as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Health {
    Susceptible,
    Infected { since: Seconds },
    Detected { since: Seconds },
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub id: usize,
    pub position: (f64, f64),
    pub velocity: (f64, f64),
    pub device: Option<DeviceState>,
    pub health: Health,
    waypoint: (f64, f64),
    speed: f64,
    paused_until: Seconds,
}

impl Agent {
    pub fn contact(&self) -> String {
        phone_number(self.id)
    }
}

pub fn phone_number(agent: usize) -> String {
    format!("+393{agent:09}")
}

/// One recorded proximity interval between two agents.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactInterval {
    pub agent_a: usize,
    pub agent_b: usize,
    pub start: Seconds,
    pub end: Seconds,
    pub true_distance: f64,
}

/// Reads `agent_a,agent_b,start_s,end_s,true_distance_m` lines.
pub fn read_trace<R: Read>(reader: R) -> Result<Vec<ContactInterval>, WorldError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| WorldError::Trace { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |m: &str| WorldError::Trace { line, message: m.to_string() };
        if record.get(0) == Some("agent_a") {
            continue;
        }
        if record.len() != 5 {
            return Err(err("expected 5 fields"));
        }
        let int = |i: usize| record[i].parse::<u64>().map_err(|_| err("expected an integer"));
        let interval = ContactInterval {
            agent_a: int(0)? as usize,
            agent_b: int(1)? as usize,
            start: int(2)?,
            end: int(3)?,
            true_distance: record[4].parse().map_err(|_| err("expected a distance"))?,
        };
        if interval.agent_a == interval.agent_b || interval.end < interval.start || !(interval.true_distance > 0.0) {
            return Err(err("inconsistent interval"));
        }
        out.push(interval);
    }
    Ok(out)
}

/// Ground-truth and protocol events. `Display` gives the trace line.
#[derive(Debug, Clone, PartialEq)]
pub enum WorldEvent {
    Contact { start: Seconds, end: Seconds, a: usize, b: usize, min_distance: f64 },
    Transmit { at: Seconds, infector: usize, infectee: usize, distance: f64 },
    Detect { at: Seconds, agent: usize, app_user: bool },
    KeyRequest { at: Seconds, doctor: String, user: String },
    KeyIssue { at: Seconds, user: String, key: Token256 },
    AlertUpload { at: Seconds, agent: usize, user: String, origin: Token256, contacts: usize, sent: usize, waitlisted: usize },
    YellowRequest { at: Seconds, agent: usize, origin: Token256, contacts: usize },
    Dispatch { at: Seconds, origin: Token256, level: AlertLevel, agent: usize, score: f64, status: DispatchStatus },
    Notify { at: Seconds, origin: Token256, level: AlertLevel, recipient: usize },
    WaitlistRelease { at: Seconds, origin: Token256, released: usize },
    Error { at: Seconds, agent: usize, message: String },
}

impl fmt::Display for WorldEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorldEvent::Contact { start, end, a, b, min_distance } => {
                write!(f, "CONTACT start={start} end={end} a={a} b={b} min_distance={min_distance}")
            }
            WorldEvent::Transmit { at, infector, infectee, distance } => {
                write!(f, "TRANSMIT t={at} infector={infector} infectee={infectee} distance={distance}")
            }
            WorldEvent::Detect { at, agent, app_user } => write!(f, "DETECT t={at} agent={agent} app_user={app_user}"),
            WorldEvent::KeyRequest { at, doctor, user } => write!(f, "KEY_REQUEST t={at} doctor={doctor} user={user}"),
            WorldEvent::KeyIssue { at, user, key } => write!(f, "KEY_ISSUE t={at} user={user} key={key}"),
            WorldEvent::AlertUpload { at, agent, user, origin, contacts, sent, waitlisted } => write!(
                f,
                "ALERT_UPLOAD t={at} agent={agent} user={user} origin={origin} contacts={contacts} sent={sent} waitlisted={waitlisted}"
            ),
            WorldEvent::YellowRequest { at, agent, origin, contacts } => {
                write!(f, "YELLOW_REQUEST t={at} agent={agent} origin={origin} contacts={contacts}")
            }
            WorldEvent::Dispatch { at, origin, level, agent, score, status } => {
                write!(f, "DISPATCH t={at} origin={origin} level={level} agent={agent} score={score} status={status}")
            }
            WorldEvent::Notify { at, origin, level, recipient } => {
                write!(f, "NOTIFY t={at} origin={origin} level={level} recipient={recipient}")
            }
            WorldEvent::WaitlistRelease { at, origin, released } => {
                write!(f, "WAITLIST_RELEASE t={at} origin={origin} released={released}")
            }
            WorldEvent::Error { at, agent, message } => write!(f, "ERROR t={at} agent={agent} message={message}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorldStats {
    pub ticks: u64,
    pub encounter_entries: u64,
    /// Pair-ticks where exactly one of two app users recorded the other.
    pub asymmetric_samples: u64,
    pub transmissions: u64,
    pub detections: u64,
    pub uploads: u64,
    pub red_notifications: u64,
    pub yellow_notifications: u64,
    pub errors: u64,
    /// Largest upload buffer seen on Server I between transactions.
    pub max_server_residue: usize,
}

#[derive(Debug, Clone, Copy)]
struct OpenEncounter {
    entry: usize,
    started_at: Seconds,
    last_tick: Seconds,
}

#[derive(Debug, Clone, Copy)]
struct OpenContact {
    start: Seconds,
    last_tick: Seconds,
    min_distance: f64,
}

fn stream(seed: u64, label: &str) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(keyed_digest(&seed.to_le_bytes(), label.as_bytes()).low_u64())
}

pub struct World {
    pub config: WorldConfig,
    pub now: Seconds,
    pub agents: Vec<Agent>,
    pub keypair: KeyPair,
    beacons: Vec<Option<Envelope>>,
    contact_index: BTreeMap<String, usize>,
    issuer: KeyIssuer,
    pub server: DispatchServer,
    doctor: DoctorCredential,
    trace: Option<Vec<ContactInterval>>,
    open_encounters: BTreeMap<(usize, usize), OpenEncounter>,
    open_contacts: BTreeMap<(usize, usize), OpenContact>,
    origins: Vec<Token256>,
    motion_rng: Xoshiro256PlusPlus,
    radio_rng: Xoshiro256PlusPlus,
    infection_rng: Xoshiro256PlusPlus,
    pub log: Vec<WorldEvent>,
    pub stats: WorldStats,
}

impl World {
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self, WorldError> {
        Self::build(config, seed, None)
    }

    /// World whose proximity comes from `trace` instead of motion.
    pub fn with_trace(config: WorldConfig, seed: u64, trace: Vec<ContactInterval>) -> Result<Self, WorldError> {
        let needed = trace.iter().map(|c| c.agent_a.max(c.agent_b) + 1).max().unwrap_or(0);
        if needed > config.agent_count {
            return Err(WorldError::InvalidConfig(format!("trace references {needed} agents, config has {}", config.agent_count)));
        }
        Self::build(config, seed, Some(trace))
    }

    fn build(config: WorldConfig, seed: u64, trace: Option<Vec<ContactInterval>>) -> Result<Self, WorldError> {
        config.validate()?;
        let mut setup = stream(seed, "setup");
        let keypair = generate_keypair(setup.gen(), config.key_bits)?;
        let mut agents = Vec::with_capacity(config.agent_count);
        let mut beacons = Vec::with_capacity(config.agent_count);
        let mut contact_index = BTreeMap::new();
        for id in 0..config.agent_count {
            let app_user = setup.gen::<f64>() < config.app_user_fraction;
            let position = (setup.gen::<f64>() * config.box_size, setup.gen::<f64>() * config.box_size);
            let contact = phone_number(id);
            let device = app_user.then(|| {
                let mut d = DeviceState::new(contact.clone(), format!("user-{id}"), config.incubation_seconds, config.tracking_threshold);
                d.yellow_enabled = config.yellow_enabled;
                d.capacity = config.capacity;
                d
            });
            beacons.push(match app_user {
                true => Some(encrypt(&keypair.public, &encode_contact(&contact)?)?),
                false => None,
            });
            contact_index.insert(contact, id);
            agents.push(Agent {
                id,
                position,
                velocity: (0.0, 0.0),
                device,
                health: Health::Susceptible,
                waypoint: position,
                speed: 0.0,
                paused_until: 0,
            });
        }
        // Initial cases: a seeded shuffle prefix.
        let mut order: Vec<usize> = (0..config.agent_count).collect();
        for i in 0..config.initial_infected {
            let j = setup.gen_range(i..order.len());
            order.swap(i, j);
            agents[order[i]].health = Health::Infected { since: 0 };
        }

        let mut server = DispatchServer::new(
            keypair.secret.clone(),
            keyed_digest(&seed.to_le_bytes(), b"server-i").0.to_vec(),
            config.capacity,
            config.incubation_seconds,
        );
        server.yellow_enabled = config.yellow_enabled;
        let issuer = KeyIssuer::new(keyed_digest(&seed.to_le_bytes(), b"server-ii").0.to_vec());

        Ok(Self {
            now: 0,
            agents,
            keypair,
            beacons,
            contact_index,
            issuer,
            server,
            doctor: DoctorCredential { doctor_id: "doctor-1".into(), certified: true },
            trace,
            open_encounters: BTreeMap::new(),
            open_contacts: BTreeMap::new(),
            origins: Vec::new(),
            motion_rng: stream(seed, "motion"),
            radio_rng: stream(seed, "radio"),
            infection_rng: stream(seed, "infection"),
            log: Vec::new(),
            stats: WorldStats::default(),
            config,
        })
    }

    pub fn beacon(&self, agent: usize) -> Option<&Envelope> {
        self.beacons[agent].as_ref()
    }

    fn move_agents(&mut self) {
        let dt = self.config.tick_seconds as f64;
        let now = self.now;
        let size = self.config.box_size;
        for agent in &mut self.agents {
            if matches!(agent.health, Health::Detected { .. }) || agent.paused_until > now {
                agent.velocity = (0.0, 0.0);
                continue;
            }
            let (dx, dy) = (agent.waypoint.0 - agent.position.0, agent.waypoint.1 - agent.position.1);
            let remaining = dx.hypot(dy);
            let step = agent.speed * dt;
            if remaining <= step {
                agent.position = agent.waypoint;
                agent.velocity = (0.0, 0.0);
                agent.paused_until = now + self.motion_rng.gen_range(0..=self.config.max_pause_seconds);
                agent.waypoint = (self.motion_rng.gen::<f64>() * size, self.motion_rng.gen::<f64>() * size);
                agent.speed = self.motion_rng.gen_range(self.config.min_speed..=self.config.max_speed);
            } else {
                agent.velocity = (agent.speed * dx / remaining, agent.speed * dy / remaining);
                agent.position.0 = (agent.position.0 + agent.velocity.0 * dt).clamp(0.0, size);
                agent.position.1 = (agent.position.1 + agent.velocity.1 * dt).clamp(0.0, size);
            }
        }
    }

    /// Pairs `(a, b, true distance)` with `a < b` within radio range this tick.
    fn proximate_pairs(&self) -> Vec<(usize, usize, f64)> {
        let range = self.config.radio.max_radio_range;
        let mut pairs = Vec::new();
        if let Some(trace) = &self.trace {
            for c in trace.iter().filter(|c| c.start <= self.now && self.now < c.end && c.true_distance <= range) {
                pairs.push((c.agent_a.min(c.agent_b), c.agent_a.max(c.agent_b), c.true_distance));
            }
            pairs.sort_by_key(|x| (x.0, x.1));
            pairs.dedup_by(|x, y| x.0 == y.0 && x.1 == y.1);
            return pairs;
        }
        for a in 0..self.agents.len() {
            let pa = self.agents[a].position;
            for b in a + 1..self.agents.len() {
                let pb = self.agents[b].position;
                let d = (pa.0 - pb.0).hypot(pa.1 - pb.1);
                if d <= range {
                    pairs.push((a, b, d.max(1e-3)));
                }
            }
        }
        pairs
    }

    /// Observer `o` samples the signal of `p`; returns whether it recorded.
    fn sense(&mut self, o: usize, p: usize, distance: f64) -> bool {
        let Some(peer) = self.beacons[p].clone() else { return false };
        if self.agents[o].device.is_none() {
            return false;
        }
        let model = self.config.radio;
        let rssi = rssi_at_distance(distance, &model, &mut self.radio_rng).expect("pair distances are positive");
        let estimate = estimate_distance(rssi, &model);
        if estimate > self.config.tracking_threshold {
            return false;
        }
        let now = self.now;
        let tick = self.config.tick_seconds;
        let prev = now.checked_sub(tick);
        let device = self.agents[o].device.as_mut().expect("checked above");
        match self.open_encounters.get_mut(&(o, p)) {
            Some(open) if Some(open.last_tick) == prev => {
                device.extend_encounter(open.entry, tick, rssi, estimate).expect("estimate within threshold");
                open.last_tick = now;
            }
            _ => {
                let entry = device.record_encounter(peer, now, tick, rssi, estimate).expect("estimate within threshold");
                self.open_encounters.insert((o, p), OpenEncounter { entry, started_at: now, last_tick: now });
                self.stats.encounter_entries += 1;
            }
        }
        true
    }

    fn close_stale(&mut self) {
        let now = self.now;
        self.open_encounters.retain(|_, e| e.last_tick == now);
        let stale: Vec<(usize, usize)> = self.open_contacts.iter().filter(|(_, c)| c.last_tick != now).map(|(k, _)| *k).collect();
        for key in stale {
            let c = self.open_contacts.remove(&key).expect("listed above");
            self.log.push(WorldEvent::Contact {
                start: c.start,
                end: c.last_tick + self.config.tick_seconds,
                a: key.0,
                b: key.1,
                min_distance: c.min_distance,
            });
        }
    }

    /// Re-points open encounters of `agent` after its ledger was purged.
    fn remap_open(&mut self, agent: usize) {
        let Some(device) = self.agents[agent].device.as_ref() else { return };
        let beacons = &self.beacons;
        self.open_encounters.retain(|&(o, p), open| {
            if o != agent {
                return true;
            }
            let peer = beacons[p].as_ref();
            match device.ledger.entries.iter().position(|e| Some(&e.peer_envelope) == peer && e.started_at == open.started_at) {
                Some(i) => {
                    open.entry = i;
                    true
                }
                None => false,
            }
        });
    }

    fn infectious(&self, agent: usize) -> bool {
        matches!(self.agents[agent].health, Health::Infected { since } if since < self.now)
    }

    /// Advances the world by one tick and returns the events it produced.
    pub fn tick(&mut self) -> Vec<WorldEvent> {
        let first_event = self.log.len();
        if self.trace.is_none() {
            self.move_agents();
        }
        let pairs = self.proximate_pairs();
        let now = self.now;

        for &(a, b, d) in &pairs {
            let ab = self.sense(a, b, d);
            let ba = self.sense(b, a, d);
            if self.agents[a].device.is_some() && self.agents[b].device.is_some() && ab != ba {
                self.stats.asymmetric_samples += 1;
            }
            self.open_contacts
                .entry((a, b))
                .and_modify(|c| {
                    c.last_tick = now;
                    c.min_distance = c.min_distance.min(d);
                })
                .or_insert(OpenContact { start: now, last_tick: now, min_distance: d });
        }
        self.close_stale();

        let p_tick = self.config.infection_prob_per_tick();
        let mut infections = Vec::new();
        for &(a, b, d) in pairs.iter().filter(|p| p.2 <= self.config.infection_range) {
            for (src, dst) in [(a, b), (b, a)] {
                if self.infectious(src) && self.agents[dst].health == Health::Susceptible
                    && self.infection_rng.gen::<f64>() < p_tick {
                        infections.push((src, dst, d));
                    }
            }
        }
        for (src, dst, d) in infections {
            if self.agents[dst].health == Health::Susceptible {
                self.agents[dst].health = Health::Infected { since: now };
                self.stats.transmissions += 1;
                self.log.push(WorldEvent::Transmit { at: now, infector: src, infectee: dst, distance: d });
            }
        }

        self.now += self.config.tick_seconds;
        let end = self.now;
        let due: Vec<usize> = (0..self.agents.len())
            .filter(|&i| matches!(self.agents[i].health, Health::Infected { since } if since + self.config.incubation_seconds <= end))
            .collect();
        for agent in due {
            self.detect(agent, end);
        }

        if end.is_multiple_of(self.config.purge_interval_seconds) {
            for i in 0..self.agents.len() {
                if let Some(d) = self.agents[i].device.as_mut() {
                    d.purge_expired(end);
                }
                self.remap_open(i);
            }
        }
        let release = self.config.release_interval_seconds;
        if release > 0 && end.is_multiple_of(release) && self.config.release_batch > 0 {
            self.release_waitlists(self.config.release_batch);
        }
        self.stats.ticks += 1;
        self.stats.max_server_residue = self.stats.max_server_residue.max(self.server.held_ledger_entries());
        self.log[first_event..].to_vec()
    }

    fn detect(&mut self, agent: usize, at: Seconds) {
        self.agents[agent].health = Health::Detected { since: at };
        self.stats.detections += 1;
        let app_user = self.agents[agent].device.is_some();
        self.log.push(WorldEvent::Detect { at, agent, app_user });
        if !app_user {
            return;
        }
        let user = format!("user-{agent}");
        self.log.push(WorldEvent::KeyRequest { at, doctor: self.doctor.doctor_id.clone(), user: user.clone() });
        let key = match self.issuer.issue_activation_key(&self.doctor, &user, at) {
            Ok(k) => k,
            Err(e) => return self.error(at, agent, e.to_string()),
        };
        self.log.push(WorldEvent::KeyIssue { at, user: user.clone(), key: key.token });
        let code = key.code();
        self.server.register_key(key);

        let device = self.agents[agent].device.as_mut().expect("app user");
        let mut uplink = DirectUplink::new(&mut self.server);
        let result = device.activate_alert_mode(&code, &mut uplink, at);
        let outcome = uplink.outcome.take();
        self.remap_open(agent);
        match (result, outcome) {
            (Ok(receipt), Some(outcome)) => {
                self.stats.uploads += 1;
                self.log.push(WorldEvent::AlertUpload {
                    at,
                    agent,
                    user,
                    origin: receipt.origin_tag,
                    contacts: outcome.records.len(),
                    sent: receipt.sent,
                    waitlisted: receipt.waitlisted,
                });
                self.origins.push(outcome.origin_tag);
                self.log_dispatch(at, outcome.origin_tag, &outcome.records);
                self.deliver(at);
            }
            (Err(e), _) => self.error(at, agent, e.to_string()),
            (Ok(_), None) => self.error(at, agent, "upload accepted without outcome".into()),
        }
    }

    fn log_dispatch(&mut self, at: Seconds, origin: Token256, records: &[crate::authority::DispatchRecord]) {
        for r in records {
            let Some(&recipient) = self.contact_index.get(&r.recipient_contact) else {
                self.error(at, usize::MAX, format!("dispatch to unknown contact {}", r.recipient_contact));
                continue;
            };
            self.log.push(WorldEvent::Dispatch { at, origin, level: r.level, agent: recipient, score: r.score, status: r.status });
        }
    }

    /// Carries Server I's outbox to the phones, including any yellow hop.
    fn deliver(&mut self, at: Seconds) {
        let mut queue = self.server.drain_outbox();
        while !queue.is_empty() {
            for note in std::mem::take(&mut queue) {
                let Some(&recipient) = self.contact_index.get(&note.recipient_contact) else {
                    self.error(at, usize::MAX, format!("notification to unknown contact {}", note.recipient_contact));
                    continue;
                };
                let level = note.message.level;
                self.log.push(WorldEvent::Notify { at, origin: note.message.origin_tag, level, recipient });
                match level {
                    AlertLevel::Red => self.stats.red_notifications += 1,
                    AlertLevel::Yellow => self.stats.yellow_notifications += 1,
                }
                let Some(device) = self.agents[recipient].device.as_mut() else { continue };
                let request = device.handle_notification(note.message, at);
                self.remap_open(recipient);
                if let Some(request) = request {
                    match self.server.process_yellow_request(&request) {
                        Ok(outcome) => {
                            self.log.push(WorldEvent::YellowRequest {
                                at,
                                agent: recipient,
                                origin: outcome.origin_tag,
                                contacts: request.contacts.len(),
                            });
                            self.origins.push(outcome.origin_tag);
                            self.log_dispatch(at, outcome.origin_tag, &outcome.records);
                        }
                        Err(e) => self.error(at, recipient, e.to_string()),
                    }
                }
            }
            queue = self.server.drain_outbox();
        }
    }

    /// Explicit server action promoting waitlisted contacts of every upload.
    pub fn release_waitlists(&mut self, batch: usize) {
        let at = self.now;
        for origin in self.origins.clone() {
            if self.server.pending(&origin).is_empty() {
                continue;
            }
            match self.server.release_waitlist(&origin, batch, at) {
                Ok(records) => {
                    self.log.push(WorldEvent::WaitlistRelease { at, origin, released: records.len() });
                    self.log_dispatch(at, origin, &records);
                    self.deliver(at);
                }
                Err(e) => self.error(at, usize::MAX, e.to_string()),
            }
        }
    }

    fn error(&mut self, at: Seconds, agent: usize, message: String) {
        self.stats.errors += 1;
        self.log.push(WorldEvent::Error { at, agent, message });
    }

    /// Runs until `duration_seconds` and closes every open contact interval.
    pub fn run(&mut self) {
        while self.now < self.config.duration_seconds {
            self.tick();
        }
        self.finish();
    }

    pub fn finish(&mut self) {
        let open = std::mem::take(&mut self.open_contacts);
        for ((a, b), c) in open {
            self.log.push(WorldEvent::Contact {
                start: c.start,
                end: c.last_tick + self.config.tick_seconds,
                a,
                b,
                min_distance: c.min_distance,
            });
        }
        self.open_encounters.clear();
    }

    /// Every ledger entry of every device.
    pub fn global_ledger_view(&self) -> Vec<(usize, crate::device::EncounterEntry)> {
        self.agents
            .iter()
            .filter_map(|a| a.device.as_ref().map(|d| (a.id, d)))
            .flat_map(|(id, d)| d.ledger.entries.iter().cloned().map(move |e| (id, e)))
            .collect()
    }

    pub fn trace_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.log {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}

/// Who uploaded under each origin tag, and when.
fn uploaders(log: &[WorldEvent]) -> BTreeMap<Token256, (usize, Seconds)> {
    let mut map = BTreeMap::new();
    for e in log {
        match e {
            WorldEvent::AlertUpload { at, agent, origin, .. } | WorldEvent::YellowRequest { at, agent, origin, .. } => {
                map.insert(*origin, (*agent, *at));
            }
            _ => {}
        }
    }
    map
}

/// Contact intervals of the unordered pair `(a, b)` overlapping `[from, to]`.
pub fn pair_contacts(log: &[WorldEvent], a: usize, b: usize, from: Seconds, to: Seconds) -> Vec<(Seconds, Seconds, f64)> {
    let key = (a.min(b), a.max(b));
    log.iter()
        .filter_map(|e| match e {
            WorldEvent::Contact { start, end, a, b, min_distance } if (*a, *b) == key && *end >= from && *start <= to => {
                Some((*start, *end, *min_distance))
            }
            _ => None,
        })
        .collect()
}

/// Share of red notifications whose sender and recipient were never within
/// `infection_range` of each other during the sender's retention window.
pub fn false_alert_rate(log: &[WorldEvent], infection_range: f64, retention_window: Seconds) -> Result<f64, WorldError> {
    let senders = uploaders(log);
    let mut total = 0u64;
    let mut false_alerts = 0u64;
    for e in log {
        let WorldEvent::Notify { origin, level: AlertLevel::Red, recipient, .. } = e else { continue };
        let Some(&(sender, at)) = senders.get(origin) else { continue };
        total += 1;
        let contacts = pair_contacts(log, sender, *recipient, at.saturating_sub(retention_window), at);
        if contacts.iter().all(|c| c.2 > infection_range) {
            false_alerts += 1;
        }
    }
    if total == 0 {
        return Err(WorldError::EmptyLog);
    }
    Ok(false_alerts as f64 / total as f64)
}
