//! Mock grid certificates: a single CA signs (subject, public key, expiry)
//! with Ed25519, users sign request bodies with their own keys.

use chrono::{DateTime, Utc};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub(crate) mod b64 {
    use base64::engine::general_purpose::{STANDARD, URL_SAFE_NO_PAD};
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(bytes: &[u8]) -> String {
        STANDARD.encode(bytes)
    }

    pub fn decode(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
        STANDARD.decode(text)
    }

    pub fn encode_url(bytes: &[u8]) -> String {
        URL_SAFE_NO_PAD.encode(bytes)
    }

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        decode(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("bad signature")]
    BadSignature,
    #[error("certificate expired")]
    ExpiredCertificate,
    #[error("certificate not issued by a trusted CA")]
    UntrustedCA,
}

/// A user identity vouched for by the CA.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub subject: String,
    #[serde(with = "b64")]
    pub public_key: Vec<u8>,
    #[serde(with = "b64")]
    pub ca_signature: Vec<u8>,
    pub not_after: DateTime<Utc>,
}

fn certificate_payload(subject: &str, public_key: &[u8], not_after: &DateTime<Utc>) -> Vec<u8> {
    let mut out = b"atm-cert-v1".to_vec();
    for field in [subject.as_bytes(), public_key] {
        out.extend_from_slice(&(field.len() as u64).to_be_bytes());
        out.extend_from_slice(field);
    }
    out.extend_from_slice(&not_after.timestamp().to_be_bytes());
    out
}

fn verifying_key(bytes: &[u8]) -> Option<VerifyingKey> {
    let bytes: [u8; 32] = bytes.try_into().ok()?;
    VerifyingKey::from_bytes(&bytes).ok()
}

fn check_signature(key: &VerifyingKey, message: &[u8], signature: &[u8]) -> bool {
    Signature::from_slice(signature)
        .map(|sig| key.verify_strict(message, &sig).is_ok())
        .unwrap_or(false)
}

impl Certificate {
    /// Checks the CA signature and expiry.
    pub fn verify(&self, ca: &CaVerificationKey, now: DateTime<Utc>) -> Result<(), VerifyError> {
        let ca_key = verifying_key(&ca.0).ok_or(VerifyError::UntrustedCA)?;
        let payload = certificate_payload(&self.subject, &self.public_key, &self.not_after);
        if !check_signature(&ca_key, &payload, &self.ca_signature) {
            return Err(VerifyError::UntrustedCA);
        }
        if self.not_after <= now {
            return Err(VerifyError::ExpiredCertificate);
        }
        Ok(())
    }
}

/// The CA public key every server is configured with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CaVerificationKey(#[serde(with = "b64")] pub Vec<u8>);

#[derive(Clone, Serialize, Deserialize)]
pub struct CertificateAuthority {
    #[serde(with = "b64")]
    secret_key: Vec<u8>,
}

impl std::fmt::Debug for CertificateAuthority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CertificateAuthority")
            .field("verification_key", &self.verification_key())
            .finish_non_exhaustive()
    }
}

impl CertificateAuthority {
    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let seed: [u8; 32] = rng.gen();
        Self {
            secret_key: seed.to_vec(),
        }
    }

    fn signing_key(&self) -> SigningKey {
        let seed: [u8; 32] = self.secret_key.as_slice().try_into().expect("32-byte CA key");
        SigningKey::from_bytes(&seed)
    }

    pub fn verification_key(&self) -> CaVerificationKey {
        CaVerificationKey(self.signing_key().verifying_key().to_bytes().to_vec())
    }

    pub fn certify(&self, subject: &str, public_key: &[u8], not_after: DateTime<Utc>) -> Certificate {
        let payload = certificate_payload(subject, public_key, &not_after);
        Certificate {
            subject: subject.to_string(),
            public_key: public_key.to_vec(),
            ca_signature: self.signing_key().sign(&payload).to_bytes().to_vec(),
            not_after,
        }
    }

    /// Generates a user key pair and its certificate.
    pub fn issue<R: Rng + ?Sized>(
        &self,
        subject: &str,
        not_after: DateTime<Utc>,
        rng: &mut R,
    ) -> (Certificate, UserKey) {
        let key = UserKey::generate(rng);
        let cert = self.certify(subject, &key.public_key(), not_after);
        (cert, key)
    }
}

/// A user's private signing key.
#[derive(Clone, Serialize, Deserialize)]
pub struct UserKey {
    #[serde(with = "b64")]
    secret_key: Vec<u8>,
}

impl std::fmt::Debug for UserKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("UserKey(..)")
    }
}

impl UserKey {
    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let seed: [u8; 32] = rng.gen();
        Self {
            secret_key: seed.to_vec(),
        }
    }

    fn signing_key(&self) -> SigningKey {
        let seed: [u8; 32] = self.secret_key.as_slice().try_into().expect("32-byte user key");
        SigningKey::from_bytes(&seed)
    }

    pub fn public_key(&self) -> Vec<u8> {
        self.signing_key().verifying_key().to_bytes().to_vec()
    }

    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        self.signing_key().sign(message).to_bytes().to_vec()
    }
}

/// A request body signed by a certificate holder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedRequest {
    #[serde(with = "b64")]
    pub body: Vec<u8>,
    pub subject: String,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
    pub certificate: Certificate,
}

pub fn sign_request(body: &[u8], key: &UserKey, certificate: &Certificate) -> SignedRequest {
    SignedRequest {
        body: body.to_vec(),
        subject: certificate.subject.clone(),
        signature: key.sign(body),
        certificate: certificate.clone(),
    }
}

/// Returns the authenticated subject.
pub fn verify_request(
    request: &SignedRequest,
    ca: &CaVerificationKey,
    now: DateTime<Utc>,
) -> Result<String, VerifyError> {
    request.certificate.verify(ca, now)?;
    if request.subject != request.certificate.subject {
        return Err(VerifyError::BadSignature);
    }
    let key = verifying_key(&request.certificate.public_key).ok_or(VerifyError::BadSignature)?;
    if !check_signature(&key, &request.body, &request.signature) {
        return Err(VerifyError::BadSignature);
    }
    Ok(request.subject.clone())
}

/// Salted SHA-256 of a ticket password.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasswordDigest {
    #[serde(with = "b64")]
    pub salt: Vec<u8>,
    #[serde(with = "b64")]
    pub hash: Vec<u8>,
}

pub fn new_salt<R: Rng + ?Sized>(rng: &mut R) -> [u8; 16] {
    rng.gen()
}

fn digest(password: &str, salt: &[u8]) -> Vec<u8> {
    let mut hasher = Sha256::new();
    hasher.update(b"atm-ticket-v1");
    hasher.update((salt.len() as u64).to_be_bytes());
    hasher.update(salt);
    hasher.update(password.as_bytes());
    hasher.finalize().to_vec()
}

pub fn hash_password(password: &str, salt: &[u8]) -> PasswordDigest {
    PasswordDigest {
        salt: salt.to_vec(),
        hash: digest(password, salt),
    }
}

pub fn check_password(password: &str, stored: &PasswordDigest) -> bool {
    let candidate = digest(password, &stored.salt);
    candidate.len() == stored.hash.len()
        && candidate
            .iter()
            .zip(&stored.hash)
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (CertificateAuthority, Certificate, UserKey) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ca = CertificateAuthority::generate(&mut rng);
        let (cert, key) = ca.issue("/O=Grid/CN=alice", Utc::now() + Duration::days(1), &mut rng);
        (ca, cert, key)
    }

    #[test]
    fn sign_then_verify() {
        let (ca, cert, key) = setup();
        let req = sign_request(b"hello", &key, &cert);
        assert_eq!(
            verify_request(&req, &ca.verification_key(), Utc::now()),
            Ok("/O=Grid/CN=alice".to_string())
        );
    }

    #[test]
    fn mutated_body_is_rejected() {
        let (ca, cert, key) = setup();
        let mut req = sign_request(b"hello", &key, &cert);
        req.body[0] ^= 1;
        assert_eq!(
            verify_request(&req, &ca.verification_key(), Utc::now()),
            Err(VerifyError::BadSignature)
        );
    }

    #[test]
    fn foreign_ca_and_expiry() {
        let (_, cert, key) = setup();
        let other = CertificateAuthority::generate(&mut ChaCha8Rng::seed_from_u64(2));
        let req = sign_request(b"x", &key, &cert);
        assert_eq!(
            verify_request(&req, &other.verification_key(), Utc::now()),
            Err(VerifyError::UntrustedCA)
        );
        let (ca, _, _) = setup();
        let later = Utc::now() + Duration::days(2);
        assert_eq!(
            verify_request(&req, &ca.verification_key(), later),
            Err(VerifyError::ExpiredCertificate)
        );
    }

    #[test]
    fn subject_swap_is_rejected() {
        let (ca, cert, key) = setup();
        let mut req = sign_request(b"x", &key, &cert);
        req.subject = "/O=Grid/CN=mallory".into();
        assert_eq!(
            verify_request(&req, &ca.verification_key(), Utc::now()),
            Err(VerifyError::BadSignature)
        );
        // Re-labelling the certificate breaks the CA signature.
        let mut req = sign_request(b"x", &key, &cert);
        req.certificate.subject = "/O=Grid/CN=mallory".into();
        req.subject = req.certificate.subject.clone();
        assert_eq!(
            verify_request(&req, &ca.verification_key(), Utc::now()),
            Err(VerifyError::UntrustedCA)
        );
    }

    #[test]
    fn extending_expiry_breaks_the_certificate() {
        let (ca, cert, _) = setup();
        let mut forged = cert.clone();
        forged.not_after += Duration::days(365);
        assert_eq!(
            forged.verify(&ca.verification_key(), Utc::now()),
            Err(VerifyError::UntrustedCA)
        );
    }

    #[test]
    fn password_round_trip() {
        let digest = hash_password("secret", b"salt");
        assert!(check_password("secret", &digest));
        assert!(!check_password("secreT", &digest));
        assert!(!check_password("", &digest));
        let json = serde_json::to_string(&digest).unwrap();
        assert!(!json.contains("secret"));
    }

    #[test]
    fn deterministic_under_seed() {
        let (_, a, _) = setup();
        let (_, b, _) = setup();
        assert_eq!(a.public_key, b.public_key);
    }
}
