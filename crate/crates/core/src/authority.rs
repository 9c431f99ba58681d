//! Medical-authority services.
//!
//! [`KeyIssuer`] (Server II) hands one-time activation keys to certified
//! doctors. [`DispatchServer`] (Server I) validates and consumes those keys,
//! opens uploaded ledgers with the secret key and sends anonymous
//! notifications. Both are plain state machines; delivery of their outputs
//! is left to whoever drives them.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::cipher::{decode_contact, decrypt, keyed_digest, KeyTag, SecretKey, Token256};
use crate::device::{
    AlertLevel, AlertMessage, AlertUplink, AlertUpload, ScoredContact, Seconds, UploadError, UploadReceipt, YellowRequest, RED_DIRECTIONS,
    YELLOW_DIRECTIONS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyRejection {
    UnknownKey,
    WrongUser,
    AlreadyConsumed,
}

impl fmt::Display for KeyRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyRejection::UnknownKey => "unknown key",
            KeyRejection::WrongUser => "key bound to another user",
            KeyRejection::AlreadyConsumed => "key already consumed",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthorityError {
    #[error("doctor {0} is not certified")]
    NotCertified(String),
    #[error("upload rejected: {0}")]
    RejectedUpload(KeyRejection),
    #[error("no waiting list for origin {0}")]
    UnknownOrigin(Token256),
    #[error("yellow fan-out refused: {0}")]
    YellowRefused(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DoctorCredential {
    pub doctor_id: String,
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationKey {
    pub token: Token256,
    pub bound_user_id: String,
    pub issued_by: String,
    pub issued_at: Seconds,
    pub consumed: bool,
}

impl ActivationKey {
    /// The 64 hex digits the patient types into the app.
    pub fn code(&self) -> String {
        self.token.to_hex()
    }
}

/// Server II: issues activation keys.
#[derive(Debug, Clone)]
pub struct KeyIssuer {
    secret: Vec<u8>,
    next_nonce: u64,
}

impl KeyIssuer {
    pub fn new(secret: impl Into<Vec<u8>>) -> Self {
        Self { secret: secret.into(), next_nonce: 0 }
    }

    pub fn issue_activation_key(&mut self, cred: &DoctorCredential, user_id: &str, now: Seconds) -> Result<ActivationKey, AuthorityError> {
        if !cred.certified {
            return Err(AuthorityError::NotCertified(cred.doctor_id.clone()));
        }
        let nonce = self.next_nonce;
        self.next_nonce += 1;
        let mut message = user_id.as_bytes().to_vec();
        message.push(0);
        message.extend_from_slice(&nonce.to_le_bytes());
        Ok(ActivationKey {
            token: keyed_digest(&self.secret, &message),
            bound_user_id: user_id.to_string(),
            issued_by: cred.doctor_id.clone(),
            issued_at: now,
            consumed: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchStatus {
    Sent,
    Waitlisted,
}

impl fmt::Display for DispatchStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DispatchStatus::Sent => "sent",
            DispatchStatus::Waitlisted => "waitlisted",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchRecord {
    pub recipient_contact: String,
    pub level: AlertLevel,
    pub score: f64,
    pub status: DispatchStatus,
}

/// Outcome of one upload or yellow fan-out transaction.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchOutcome {
    pub origin_tag: Token256,
    pub records: Vec<DispatchRecord>,
    pub decrypt_failures: usize,
}

impl DispatchOutcome {
    pub fn count(&self, status: DispatchStatus) -> usize {
        self.records.iter().filter(|r| r.status == status).count()
    }
}

/// A notification waiting to be carried to `recipient_contact`.
#[derive(Debug, Clone, PartialEq)]
pub struct Notification {
    pub recipient_contact: String,
    pub message: AlertMessage,
}

/// Per-transaction audit entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransactionAudit {
    pub origin_tag: Option<Token256>,
    pub level: AlertLevel,
    pub key_consumed: bool,
    pub decryptions: usize,
}

#[derive(Debug, Clone)]
struct Waitlist {
    level: AlertLevel,
    pending: Vec<(String, f64)>,
    expires_at: Seconds,
}

/// Server I: validates keys, decrypts ledgers, dispatches notifications.
#[derive(Debug, Clone)]
pub struct DispatchServer {
    secret_keys: BTreeMap<KeyTag, SecretKey>,
    tag_secret: Vec<u8>,
    registry: BTreeMap<Token256, ActivationKey>,
    waitlists: BTreeMap<Token256, Waitlist>,
    red_notices: BTreeMap<Token256, Seconds>,
    in_flight: Vec<(String, f64)>,
    outbox: Vec<Notification>,
    audit: Vec<TransactionAudit>,
    counter: u64,
    pub capacity: usize,
    pub retention_window: Seconds,
    pub yellow_enabled: bool,
}

impl DispatchServer {
    pub fn new(secret_key: SecretKey, tag_secret: impl Into<Vec<u8>>, capacity: usize, retention_window: Seconds) -> Self {
        let mut secret_keys = BTreeMap::new();
        secret_keys.insert(secret_key.pair_tag, secret_key);
        Self {
            secret_keys,
            tag_secret: tag_secret.into(),
            registry: BTreeMap::new(),
            waitlists: BTreeMap::new(),
            red_notices: BTreeMap::new(),
            in_flight: Vec::new(),
            outbox: Vec::new(),
            audit: Vec::new(),
            counter: 0,
            capacity,
            retention_window,
            yellow_enabled: false,
        }
    }

    /// Accepts envelopes sealed under an additional (rotated) public key.
    pub fn add_secret_key(&mut self, key: SecretKey) {
        self.secret_keys.insert(key.pair_tag, key);
    }

    /// Records a key issued by Server II.
    pub fn register_key(&mut self, key: ActivationKey) {
        self.registry.insert(key.token, key);
    }

    pub fn key(&self, token: &Token256) -> Option<&ActivationKey> {
        self.registry.get(token)
    }

    pub fn audit(&self) -> &[TransactionAudit] {
        &self.audit
    }

    /// Decrypted upload data held outside a transaction; always zero.
    pub fn held_ledger_entries(&self) -> usize {
        self.in_flight.len()
    }

    /// Contacts parked on waiting lists.
    pub fn waitlisted(&self) -> usize {
        self.waitlists.values().map(|w| w.pending.len()).sum()
    }

    pub fn drain_outbox(&mut self) -> Vec<Notification> {
        std::mem::take(&mut self.outbox)
    }

    fn fresh_tag(&mut self, label: &[u8]) -> Token256 {
        let mut message = label.to_vec();
        message.extend_from_slice(&self.counter.to_le_bytes());
        self.counter += 1;
        keyed_digest(&self.tag_secret, &message)
    }

    pub fn validate_and_consume(&mut self, km_token: &str, user_id: &str) -> Result<(), KeyRejection> {
        let token = Token256::from_hex(km_token).ok_or(KeyRejection::UnknownKey)?;
        let key = self.registry.get_mut(&token).ok_or(KeyRejection::UnknownKey)?;
        if key.bound_user_id != user_id {
            return Err(KeyRejection::WrongUser);
        }
        if key.consumed {
            return Err(KeyRejection::AlreadyConsumed);
        }
        key.consumed = true;
        Ok(())
    }

    fn open_contacts(&mut self, contacts: &[ScoredContact]) -> (usize, usize) {
        let mut decryptions = 0;
        let mut failures = 0;
        for c in contacts {
            let Some(key) = self.secret_keys.get(&c.envelope.key_tag) else {
                failures += 1;
                continue;
            };
            decryptions += 1;
            match decrypt(key, &c.envelope).and_then(|m| decode_contact(&m)) {
                Ok(contact) => self.in_flight.push((contact, c.score)),
                Err(_) => failures += 1,
            }
        }
        (decryptions, failures)
    }

    /// Ranks the in-flight contacts, sends the top `capacity` and parks the rest.
    fn dispatch(
        &mut self,
        level: AlertLevel,
        capacity: usize,
        now: Seconds,
        key_consumed: bool,
        decryptions: usize,
        decrypt_failures: usize,
    ) -> DispatchOutcome {
        let mut merged: BTreeMap<String, f64> = BTreeMap::new();
        for (contact, score) in self.in_flight.drain(..) {
            *merged.entry(contact).or_default() += score;
        }
        let mut ranked: Vec<(String, f64)> = merged.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let origin_tag = self.fresh_tag(b"origin");
        let cut = capacity.min(ranked.len());
        let parked = ranked.split_off(cut);
        let mut records = Vec::with_capacity(ranked.len() + parked.len());
        for (contact, score) in ranked {
            self.send(&contact, level, origin_tag, now);
            records.push(DispatchRecord { recipient_contact: contact, level, score, status: DispatchStatus::Sent });
        }
        for (contact, score) in &parked {
            records.push(DispatchRecord { recipient_contact: contact.clone(), level, score: *score, status: DispatchStatus::Waitlisted });
        }
        if !parked.is_empty() {
            self.waitlists.insert(origin_tag, Waitlist { level, pending: parked, expires_at: now + self.retention_window });
        }
        self.audit.push(TransactionAudit { origin_tag: Some(origin_tag), level, key_consumed, decryptions });
        DispatchOutcome { origin_tag, records, decrypt_failures }
    }

    fn send(&mut self, contact: &str, level: AlertLevel, origin_tag: Token256, now: Seconds) {
        let notice_id = self.fresh_tag(b"notice");
        if level == AlertLevel::Red {
            self.red_notices.insert(notice_id, now + self.retention_window);
        }
        let directions = match level {
            AlertLevel::Red => RED_DIRECTIONS,
            AlertLevel::Yellow => YELLOW_DIRECTIONS,
        };
        self.outbox.push(Notification {
            recipient_contact: contact.to_string(),
            message: AlertMessage { level, directions: directions.to_string(), issued_at: now, origin_tag, notice_id },
        });
    }

    /// Validates the upload's key, decrypts its envelopes and sends red notices.
    pub fn process_alert_upload(&mut self, upload: &AlertUpload, capacity: usize) -> Result<DispatchOutcome, AuthorityError> {
        if let Err(reason) = self.validate_and_consume(&upload.km_token, &upload.user_id) {
            self.audit.push(TransactionAudit { origin_tag: None, level: AlertLevel::Red, key_consumed: false, decryptions: 0 });
            return Err(AuthorityError::RejectedUpload(reason));
        }
        let (decryptions, failures) = self.open_contacts(&upload.contacts);
        let cap = capacity.min(upload.alert_count);
        Ok(self.dispatch(AlertLevel::Red, cap, upload.sent_at, true, decryptions, failures))
    }

    /// One-hop yellow fan-out on behalf of a red recipient.
    pub fn process_yellow_request(&mut self, request: &YellowRequest) -> Result<DispatchOutcome, AuthorityError> {
        if !self.yellow_enabled {
            return Err(AuthorityError::YellowRefused("yellow notifications are disabled"));
        }
        match self.red_notices.remove(&request.red_notice) {
            Some(expires) if expires >= request.sent_at => {}
            _ => return Err(AuthorityError::YellowRefused("no live red notice")),
        }
        let (decryptions, failures) = self.open_contacts(&request.contacts);
        let cap = self.capacity.min(request.alert_count);
        Ok(self.dispatch(AlertLevel::Yellow, cap, request.sent_at, false, decryptions, failures))
    }

    /// Promotes up to `additional` parked contacts of `origin_tag` to sent.
    pub fn release_waitlist(
        &mut self,
        origin_tag: &Token256,
        additional: usize,
        now: Seconds,
    ) -> Result<Vec<DispatchRecord>, AuthorityError> {
        self.waitlists.retain(|_, w| w.expires_at >= now);
        let list = self.waitlists.get_mut(origin_tag).ok_or(AuthorityError::UnknownOrigin(*origin_tag))?;
        let take = additional.min(list.pending.len());
        let level = list.level;
        let promoted: Vec<(String, f64)> = list.pending.drain(..take).collect();
        if list.pending.is_empty() {
            self.waitlists.remove(origin_tag);
        }
        let mut records = Vec::with_capacity(promoted.len());
        for (contact, score) in promoted {
            self.send(&contact, level, *origin_tag, now);
            records.push(DispatchRecord { recipient_contact: contact, level, score, status: DispatchStatus::Sent });
        }
        Ok(records)
    }

    /// Parked contacts of `origin_tag`, in priority order.
    pub fn pending(&self, origin_tag: &Token256) -> Vec<DispatchRecord> {
        self.waitlists
            .get(origin_tag)
            .map(|w| {
                w.pending
                    .iter()
                    .map(|(c, s)| DispatchRecord {
                        recipient_contact: c.clone(),
                        level: w.level,
                        score: *s,
                        status: DispatchStatus::Waitlisted,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Server I reached directly; keeps the last outcome for the caller.
pub struct DirectUplink<'a> {
    pub server: &'a mut DispatchServer,
    pub outcome: Option<DispatchOutcome>,
}

impl<'a> DirectUplink<'a> {
    pub fn new(server: &'a mut DispatchServer) -> Self {
        Self { server, outcome: None }
    }
}

impl AlertUplink for DirectUplink<'_> {
    fn upload(&mut self, upload: AlertUpload) -> Result<UploadReceipt, UploadError> {
        let capacity = self.server.capacity;
        match self.server.process_alert_upload(&upload, capacity) {
            Ok(outcome) => {
                let receipt = UploadReceipt {
                    origin_tag: outcome.origin_tag,
                    sent: outcome.count(DispatchStatus::Sent),
                    waitlisted: outcome.count(DispatchStatus::Waitlisted),
                };
                self.outcome = Some(outcome);
                Ok(receipt)
            }
            Err(AuthorityError::RejectedUpload(reason)) => Err(UploadError::Rejected(reason)),
            Err(other) => Err(UploadError::Transport(other.to_string())),
        }
    }
}
