//! Phone-side state machine.
//!
//! In tracking mode a device keeps an encrypted ledger of close-range
//! encounters. Entering a one-time activation key switches it to alert mode
//! and uploads the ledger, ranked by interaction strength, to the decryption
//! service. Devices that receive a red notification may trigger a single
//! hop of yellow notifications to their own contacts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::authority::KeyRejection;
use crate::cipher::{Envelope, Token256};

/// Simulated time in seconds.
pub type Seconds = u64;

/// Capacity value meaning "no threshold".
pub const UNLIMITED: usize = usize::MAX;

pub const RED_DIRECTIONS: &str = "You were in close contact with a confirmed case. Start a voluntary quarantine and book a medical test.";
pub const YELLOW_DIRECTIONS: &str = "One of your recent contacts was exposed to a confirmed case. Take precautions; \
     no medical test is requested unless you receive a red notification.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("encounter at estimated {distance} m is beyond the tracking threshold {threshold} m")]
    OutOfRange { distance: f64, threshold: f64 },
    #[error("invalid activation key: {0}")]
    InvalidKey(String),
    #[error("upload failed: {0}")]
    UploadFailure(String),
    #[error("device is already in alert mode")]
    AlreadyAlerting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncounterEntry {
    pub peer_envelope: Envelope,
    pub started_at: Seconds,
    pub duration: Seconds,
    pub mean_rssi: f64,
    pub estimated_distance: f64,
    /// Radio samples folded into the running means.
    pub samples: u32,
}

impl EncounterEntry {
    pub fn ended_at(&self) -> Seconds {
        self.started_at + self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProximalContactList {
    pub entries: Vec<EncounterEntry>,
    pub retention_window: Seconds,
}

impl ProximalContactList {
    pub fn new(retention_window: Seconds) -> Self {
        Self { entries: Vec::new(), retention_window }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops entries that ended strictly before `now - retention_window`.
    pub fn purge_expired(&mut self, now: Seconds) {
        let horizon = now.saturating_sub(self.retention_window);
        self.entries.retain(|e| e.ended_at() >= horizon);
    }

    /// Entries grouped by peer envelope.
    pub fn by_peer(&self) -> BTreeMap<&Envelope, Vec<&EncounterEntry>> {
        let mut peers: BTreeMap<&Envelope, Vec<&EncounterEntry>> = BTreeMap::new();
        for e in &self.entries {
            peers.entry(&e.peer_envelope).or_default().push(e);
        }
        peers
    }
}

/// Distance weighting w(d) = max(0, 1 - d / cutoff).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrengthWeighting {
    pub cutoff_distance: f64,
}

impl StrengthWeighting {
    pub fn weight(&self, distance: f64) -> f64 {
        (1.0 - distance / self.cutoff_distance).max(0.0)
    }
}

/// Sum of duration times distance weight over all entries with one peer.
pub fn interaction_strength<'a, I>(entries: I, weighting: StrengthWeighting) -> f64
where
    I: IntoIterator<Item = &'a EncounterEntry>,
{
    entries.into_iter().map(|e| e.duration as f64 * weighting.weight(e.estimated_distance)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredContact {
    pub envelope: Envelope,
    pub score: f64,
}

/// Highest score first; ties broken by ascending envelope.
pub fn rank_contacts(contacts: &mut [ScoredContact]) {
    contacts.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.envelope.cmp(&b.envelope)));
}

/// Splits the distinct peers of `ledger` into the top `capacity` and the rest.
pub fn prioritized_contacts(
    ledger: &ProximalContactList,
    capacity: usize,
    weighting: StrengthWeighting,
) -> (Vec<ScoredContact>, Vec<ScoredContact>) {
    let mut scored: Vec<ScoredContact> = ledger
        .by_peer()
        .into_iter()
        .map(|(envelope, entries)| ScoredContact { envelope: envelope.clone(), score: interaction_strength(entries, weighting) })
        .collect();
    rank_contacts(&mut scored);
    let cut = capacity.min(scored.len());
    let waiting = scored.split_off(cut);
    (scored, waiting)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AlertLevel {
    Red,
    Yellow,
}

impl fmt::Display for AlertLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlertLevel::Red => "red",
            AlertLevel::Yellow => "yellow",
        })
    }
}

impl FromStr for AlertLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "red" => Ok(AlertLevel::Red),
            "yellow" => Ok(AlertLevel::Yellow),
            other => Err(format!("unknown alert level {other:?}")),
        }
    }
}

/// Notification delivered to a contact. Carries no sender identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AlertMessage {
    pub level: AlertLevel,
    pub directions: String,
    pub issued_at: Seconds,
    /// Anonymous identifier of the dispatch that produced this message.
    pub origin_tag: Token256,
    /// Per-message nonce; a red notice id authorises one yellow fan-out.
    pub notice_id: Token256,
}

/// Ledger upload that accompanies an activation key.
#[derive(Debug, Clone, PartialEq)]
pub struct AlertUpload {
    pub km_token: String,
    pub user_id: String,
    /// All in-window peers, highest priority first.
    pub contacts: Vec<ScoredContact>,
    /// How many of `contacts` the device placed on its alert list.
    pub alert_count: usize,
    pub sent_at: Seconds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UploadReceipt {
    pub origin_tag: Token256,
    pub sent: usize,
    pub waitlisted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UploadError {
    Rejected(KeyRejection),
    Transport(String),
}

/// Transport from a device to the decryption service.
pub trait AlertUplink {
    fn upload(&mut self, upload: AlertUpload) -> Result<UploadReceipt, UploadError>;
}

/// Request to fan a yellow notification out to a red recipient's contacts.
#[derive(Debug, Clone, PartialEq)]
pub struct YellowRequest {
    pub red_notice: Token256,
    pub contacts: Vec<ScoredContact>,
    pub alert_count: usize,
    pub sent_at: Seconds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Tracking,
    Alert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub mode: Mode,
    pub own_contact: String,
    pub user_id: String,
    pub ledger: ProximalContactList,
    pub received: Vec<AlertMessage>,
    pub yellow_enabled: bool,
    pub tested_positive: bool,
    pub tracking_threshold: f64,
    pub capacity: usize,
}

impl DeviceState {
    pub fn new(own_contact: impl Into<String>, user_id: impl Into<String>, retention_window: Seconds, tracking_threshold: f64) -> Self {
        Self {
            mode: Mode::Tracking,
            own_contact: own_contact.into(),
            user_id: user_id.into(),
            ledger: ProximalContactList::new(retention_window),
            received: Vec::new(),
            yellow_enabled: false,
            tested_positive: false,
            tracking_threshold,
            capacity: UNLIMITED,
        }
    }

    pub fn weighting(&self) -> StrengthWeighting {
        StrengthWeighting { cutoff_distance: self.tracking_threshold }
    }

    /// Appends a new encounter and returns its ledger index.
    pub fn record_encounter(
        &mut self,
        peer_envelope: Envelope,
        started_at: Seconds,
        duration: Seconds,
        mean_rssi: f64,
        estimated_distance: f64,
    ) -> Result<usize, DeviceError> {
        self.check_range(estimated_distance)?;
        self.ledger.entries.push(EncounterEntry { peer_envelope, started_at, duration, mean_rssi, estimated_distance, samples: 1 });
        Ok(self.ledger.entries.len() - 1)
    }

    /// Extends an ongoing encounter by one more radio sample.
    pub fn extend_encounter(&mut self, index: usize, seconds: Seconds, rssi: f64, estimated_distance: f64) -> Result<(), DeviceError> {
        self.check_range(estimated_distance)?;
        let e = &mut self.ledger.entries[index];
        let n = f64::from(e.samples);
        e.mean_rssi = (e.mean_rssi * n + rssi) / (n + 1.0);
        e.estimated_distance = (e.estimated_distance * n + estimated_distance) / (n + 1.0);
        e.samples += 1;
        e.duration += seconds;
        Ok(())
    }

    fn check_range(&self, distance: f64) -> Result<(), DeviceError> {
        if distance > self.tracking_threshold {
            return Err(DeviceError::OutOfRange { distance, threshold: self.tracking_threshold });
        }
        Ok(())
    }

    pub fn purge_expired(&mut self, now: Seconds) {
        self.ledger.purge_expired(now);
    }

    pub fn prioritized_contacts(&self, capacity: usize) -> (Vec<ScoredContact>, Vec<ScoredContact>) {
        prioritized_contacts(&self.ledger, capacity, self.weighting())
    }

    fn ranked_upload(&mut self, now: Seconds) -> (Vec<ScoredContact>, usize) {
        self.purge_expired(now);
        let (mut alert, waiting) = self.prioritized_contacts(self.capacity);
        let alert_count = alert.len();
        alert.extend(waiting);
        (alert, alert_count)
    }

    /// Unlocks alert mode with `km` and uploads the ranked ledger.
    ///
    /// State is left untouched unless the service accepts the key.
    pub fn activate_alert_mode<U: AlertUplink>(&mut self, km: &str, uplink: &mut U, now: Seconds) -> Result<UploadReceipt, DeviceError> {
        if self.mode == Mode::Alert {
            return Err(DeviceError::AlreadyAlerting);
        }
        if Token256::from_hex(km).is_none() {
            return Err(DeviceError::InvalidKey("malformed key".into()));
        }
        let window = self.ledger.clone();
        let (contacts, alert_count) = self.ranked_upload(now);
        let upload = AlertUpload { km_token: km.to_string(), user_id: self.user_id.clone(), contacts, alert_count, sent_at: now };
        match uplink.upload(upload) {
            Ok(receipt) => {
                self.mode = Mode::Alert;
                self.tested_positive = true;
                Ok(receipt)
            }
            Err(err) => {
                self.ledger = window;
                Err(match err {
                    UploadError::Rejected(reason) => DeviceError::InvalidKey(reason.to_string()),
                    UploadError::Transport(msg) => DeviceError::UploadFailure(msg),
                })
            }
        }
    }

    /// Logs `msg`; a red notice may yield a one-hop yellow fan-out request.
    pub fn handle_notification(&mut self, msg: AlertMessage, now: Seconds) -> Option<YellowRequest> {
        let forward = msg.level == AlertLevel::Red && self.yellow_enabled && !self.tested_positive;
        let red_notice = msg.notice_id;
        self.received.push(msg);
        if !forward {
            return None;
        }
        let (contacts, alert_count) = self.ranked_upload(now);
        Some(YellowRequest { red_notice, contacts, alert_count, sent_at: now })
    }

    /// Line-oriented snapshot of the device, see [`DeviceState::from_snapshot`].
    pub fn to_snapshot(&self) -> String {
        let mut out = format!(
            "device user_id={} contact={} mode={} tested_positive={} yellow_enabled={} threshold={} capacity={} retention={}\n",
            self.user_id,
            self.own_contact,
            match self.mode {
                Mode::Tracking => "tracking",
                Mode::Alert => "alert",
            },
            self.tested_positive,
            self.yellow_enabled,
            self.tracking_threshold,
            self.capacity,
            self.ledger.retention_window,
        );
        for e in &self.ledger.entries {
            out.push_str(&format!(
                "entry peer={} start={} duration={} rssi={} distance={} samples={}\n",
                e.peer_envelope, e.started_at, e.duration, e.mean_rssi, e.estimated_distance, e.samples
            ));
        }
        for m in &self.received {
            out.push_str(&format!(
                "received level={} issued_at={} origin={} notice={} directions={}\n",
                m.level, m.issued_at, m.origin_tag, m.notice_id, m.directions
            ));
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self, SnapshotError> {
        let mut device: Option<DeviceState> = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let err = |msg: &str| SnapshotError { line: lineno, message: msg.to_string() };
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "device" => {
                    let f = Fields::split(rest, &[]).map_err(|m| err(&m))?;
                    let mut d = DeviceState::new(
                        f.get("contact").map_err(|m| err(&m))?,
                        f.get("user_id").map_err(|m| err(&m))?,
                        f.parse("retention").map_err(|m| err(&m))?,
                        f.parse("threshold").map_err(|m| err(&m))?,
                    );
                    d.mode = match f.get("mode").map_err(|m| err(&m))? {
                        "tracking" => Mode::Tracking,
                        "alert" => Mode::Alert,
                        _ => return Err(err("bad mode")),
                    };
                    d.tested_positive = f.parse("tested_positive").map_err(|m| err(&m))?;
                    d.yellow_enabled = f.parse("yellow_enabled").map_err(|m| err(&m))?;
                    d.capacity = f.parse("capacity").map_err(|m| err(&m))?;
                    device = Some(d);
                }
                "entry" => {
                    let d = device.as_mut().ok_or_else(|| err("entry before device"))?;
                    let f = Fields::split(rest, &[]).map_err(|m| err(&m))?;
                    d.ledger.entries.push(EncounterEntry {
                        peer_envelope: f.parse("peer").map_err(|m| err(&m))?,
                        started_at: f.parse("start").map_err(|m| err(&m))?,
                        duration: f.parse("duration").map_err(|m| err(&m))?,
                        mean_rssi: f.parse("rssi").map_err(|m| err(&m))?,
                        estimated_distance: f.parse("distance").map_err(|m| err(&m))?,
                        samples: f.parse("samples").map_err(|m| err(&m))?,
                    });
                }
                "received" => {
                    let d = device.as_mut().ok_or_else(|| err("received before device"))?;
                    let f = Fields::split(rest, &["directions"]).map_err(|m| err(&m))?;
                    let token =
                        |key: &str| f.get(key).map_err(|m| err(&m)).and_then(|v| Token256::from_hex(v).ok_or_else(|| err("bad token")));
                    d.received.push(AlertMessage {
                        level: f.parse("level").map_err(|m| err(&m))?,
                        directions: f.get("directions").map_err(|m| err(&m))?.to_string(),
                        issued_at: f.parse("issued_at").map_err(|m| err(&m))?,
                        origin_tag: token("origin")?,
                        notice_id: token("notice")?,
                    });
                }
                "" => {}
                _ => return Err(err("unknown record kind")),
            }
        }
        device.ok_or(SnapshotError { line: 0, message: "missing device record".into() })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("snapshot line {line}: {message}")]
pub struct SnapshotError {
    pub line: usize,
    pub message: String,
}

/// `key=value` pairs separated by spaces; keys listed in `tail` swallow
/// the rest of the line and must come last.
struct Fields<'a>(Vec<(&'a str, &'a str)>);

impl<'a> Fields<'a> {
    fn split(text: &'a str, tail: &[&str]) -> Result<Self, String> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let (key, after) = rest.split_once('=').ok_or_else(|| format!("expected key=value in {rest:?}"))?;
            if tail.contains(&key) {
                out.push((key, after));
                break;
            }
            let (value, next) = after.split_once(' ').unwrap_or((after, ""));
            out.push((key, value));
            rest = next;
        }
        Ok(Fields(out))
    }

    fn get(&self, key: &str) -> Result<&'a str, String> {
        self.0.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).ok_or_else(|| format!("missing field {key}"))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, String> {
        self.get(key)?.parse().map_err(|_| format!("bad value for {key}"))
    }
}
