//! Bearer token verification.
//!
//! Tokens are verified locally against keys that are either configured
//! statically or fetched from a JWKS endpoint and refreshed in the
//! background. The identity provider is never contacted per request.

use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::http::{header, HeaderMap, StatusCode};
use jsonwebtoken::errors::ErrorKind;
use jsonwebtoken::jwk::JwkSet;
use jsonwebtoken::{Algorithm, DecodingKey, Validation};
use serde_json::{Map, Value};

use crate::Shutdown;

pub type Claims = Map<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Rsa,
    Ec,
    Hmac,
}

fn family(alg: Algorithm) -> Option<Family> {
    match alg {
        Algorithm::RS256 => Some(Family::Rsa),
        Algorithm::ES256 => Some(Family::Ec),
        Algorithm::HS256 => Some(Family::Hmac),
        _ => None,
    }
}

/// One key able to verify signatures of one algorithm family.
#[derive(Clone)]
pub struct VerificationKey {
    kid: Option<String>,
    family: Family,
    key: DecodingKey,
}

impl std::fmt::Debug for VerificationKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VerificationKey").field("kid", &self.kid).field("family", &self.family).finish()
    }
}

impl VerificationKey {
    pub fn rsa_pem(kid: Option<String>, pem: &[u8]) -> Result<Self, String> {
        let key = DecodingKey::from_rsa_pem(pem).map_err(|e| format!("bad RSA public key: {e}"))?;
        Ok(VerificationKey { kid, family: Family::Rsa, key })
    }

    pub fn ec_pem(kid: Option<String>, pem: &[u8]) -> Result<Self, String> {
        let key = DecodingKey::from_ec_pem(pem).map_err(|e| format!("bad EC public key: {e}"))?;
        Ok(VerificationKey { kid, family: Family::Ec, key })
    }

    pub fn hmac_secret(kid: Option<String>, secret: &[u8]) -> Self {
        VerificationKey { kid, family: Family::Hmac, key: DecodingKey::from_secret(secret) }
    }

    /// Loads a PEM public key, detecting RSA or EC from its contents.
    pub fn from_pem(kid: Option<String>, pem: &[u8]) -> Result<Self, String> {
        Self::rsa_pem(kid.clone(), pem).or_else(|_| Self::ec_pem(kid, pem))
    }
}

/// Parses a JWKS document. Keys of unsupported types are skipped.
pub fn keys_from_jwks(document: &[u8]) -> Result<Vec<VerificationKey>, String> {
    let set: JwkSet = serde_json::from_slice(document).map_err(|e| format!("bad JWKS document: {e}"))?;
    let keys = set
        .keys
        .iter()
        .filter_map(|jwk| {
            use jsonwebtoken::jwk::AlgorithmParameters as P;
            let family = match &jwk.algorithm {
                P::RSA(_) => Family::Rsa,
                P::EllipticCurve(_) => Family::Ec,
                P::OctetKey(_) => Family::Hmac,
                P::OctetKeyPair(_) => return None,
            };
            let key = DecodingKey::from_jwk(jwk).ok()?;
            Some(VerificationKey { kid: jwk.common.key_id.clone(), family, key })
        })
        .collect();
    Ok(keys)
}

#[derive(Debug, Clone)]
pub enum KeySource {
    Static(Vec<VerificationKey>),
    Jwks { url: String, refresh_interval: Duration },
}

#[derive(Debug, Clone)]
pub struct AuthPolicy {
    pub enabled: bool,
    /// Empty accepts any issuer.
    pub accepted_issuers: Vec<String>,
    pub required_audience: Option<String>,
    /// `(name, value)`; satisfied by a string claim equal to `value` or an
    /// array claim containing it.
    pub required_claim: Option<(String, String)>,
    pub key_source: KeySource,
    pub accepted_algorithms: Vec<Algorithm>,
    pub clock_skew_tolerance: Duration,
    /// Serve `/{version}/openapi.json` without a token.
    pub docs_exempt: bool,
}

impl AuthPolicy {
    pub fn disabled() -> Self {
        AuthPolicy {
            enabled: false,
            accepted_issuers: vec![],
            required_audience: None,
            required_claim: None,
            key_source: KeySource::Static(vec![]),
            accepted_algorithms: vec![Algorithm::RS256, Algorithm::ES256],
            clock_skew_tolerance: Duration::from_secs(60),
            docs_exempt: true,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if !self.enabled {
            return Ok(());
        }
        if self.accepted_algorithms.is_empty() {
            return Err("auth enabled without accepted algorithms".into());
        }
        if let Some(bad) = self.accepted_algorithms.iter().find(|a| family(**a).is_none()) {
            return Err(format!("unsupported algorithm {bad:?}; use RS256, ES256 or HS256"));
        }
        match &self.key_source {
            KeySource::Static(keys) if keys.is_empty() => Err("auth enabled without verification keys".into()),
            KeySource::Jwks { url, .. } if url.is_empty() => Err("auth enabled with empty JWKS URL".into()),
            KeySource::Jwks { refresh_interval, .. } if refresh_interval.is_zero() => {
                Err("JWKS refresh interval must be positive".into())
            }
            _ => Ok(()),
        }
    }
}

impl Default for AuthPolicy {
    fn default() -> Self {
        Self::disabled()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Denied {
    pub status: StatusCode,
    pub reason: String,
}

impl Denied {
    fn unauthorized(reason: impl Into<String>) -> Self {
        Denied { status: StatusCode::UNAUTHORIZED, reason: reason.into() }
    }
}

/// Verifies tokens under an [`AuthPolicy`]. Cheap to share; the key set is
/// swapped atomically on refresh.
pub struct Authenticator {
    policy: AuthPolicy,
    keys: RwLock<Arc<Vec<VerificationKey>>>,
    last_refresh: RwLock<Option<Instant>>,
    http: reqwest::Client,
}

/// Minimum spacing of refreshes triggered by unknown key ids.
const ON_DEMAND_REFRESH_SPACING: Duration = Duration::from_secs(10);

impl Authenticator {
    pub fn new(policy: AuthPolicy) -> Result<Self, String> {
        policy.check()?;
        let keys = match &policy.key_source {
            KeySource::Static(keys) => keys.clone(),
            KeySource::Jwks { .. } => vec![],
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| format!("cannot build HTTP client: {e}"))?;
        Ok(Authenticator { policy, keys: RwLock::new(Arc::new(keys)), last_refresh: RwLock::new(None), http })
    }

    pub fn policy(&self) -> &AuthPolicy {
        &self.policy
    }

    fn key_snapshot(&self) -> Arc<Vec<VerificationKey>> {
        self.keys.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn install_keys(&self, keys: Vec<VerificationKey>) {
        *self.keys.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(keys);
    }

    /// Fetches the JWKS document and swaps in its keys. A no-op for static
    /// key sources.
    pub async fn refresh(&self) -> Result<usize, String> {
        let KeySource::Jwks { url, .. } = &self.policy.key_source else {
            return Ok(self.key_snapshot().len());
        };
        *self.last_refresh.write().unwrap_or_else(|p| p.into_inner()) = Some(Instant::now());
        let response = self.http.get(url).send().await.map_err(|e| format!("JWKS fetch from {url} failed: {e}"))?;
        if !response.status().is_success() {
            return Err(format!("JWKS fetch from {url} returned {}", response.status()));
        }
        let body = response.bytes().await.map_err(|e| format!("JWKS fetch from {url} failed: {e}"))?;
        let keys = keys_from_jwks(&body)?;
        let n = keys.len();
        self.install_keys(keys);
        Ok(n)
    }

    /// Refreshes JWKS keys every `refresh_interval` until shutdown.
    pub fn spawn_refresher(self: &Arc<Self>, shutdown: Shutdown) -> Option<tokio::task::JoinHandle<()>> {
        let KeySource::Jwks { refresh_interval, .. } = self.policy.key_source.clone() else { return None };
        if !self.policy.enabled {
            return None;
        }
        let this = self.clone();
        Some(tokio::spawn(async move {
            loop {
                match this.refresh().await {
                    Ok(n) => tracing::debug!(keys = n, "JWKS refreshed"),
                    Err(e) => tracing::warn!(error = %e, "JWKS refresh failed; keeping previous keys"),
                }
                tokio::select! {
                    _ = tokio::time::sleep(refresh_interval) => {}
                    _ = shutdown.triggered() => return,
                }
            }
        }))
    }

    /// Like [`authenticate`](Self::authenticate), but a token signed with
    /// an unknown key id triggers one JWKS refresh (rate limited) first.
    pub async fn authenticate_async(&self, headers: &HeaderMap) -> Result<Claims, Denied> {
        match self.authenticate(headers) {
            Err(d) if d.reason == UNKNOWN_KEY && self.may_refresh_on_demand() => {
                if let Err(e) = self.refresh().await {
                    tracing::warn!(error = %e, "on-demand JWKS refresh failed");
                }
                self.authenticate(headers)
            }
            other => other,
        }
    }

    fn may_refresh_on_demand(&self) -> bool {
        matches!(self.policy.key_source, KeySource::Jwks { .. })
            && self
                .last_refresh
                .read()
                .unwrap_or_else(|p| p.into_inner())
                .is_none_or(|t| t.elapsed() >= ON_DEMAND_REFRESH_SPACING)
    }

    pub fn authenticate(&self, headers: &HeaderMap) -> Result<Claims, Denied> {
        if !self.policy.enabled {
            return Ok(Claims::new());
        }
        let value = headers.get(header::AUTHORIZATION).ok_or_else(|| Denied::unauthorized("missing bearer token"))?;
        let value = value.to_str().map_err(|_| Denied::unauthorized("malformed Authorization header"))?;
        let token = match value.split_once(' ') {
            Some((scheme, token)) if scheme.eq_ignore_ascii_case("bearer") && !token.trim().is_empty() => token.trim(),
            _ => return Err(Denied::unauthorized("Authorization header must be 'Bearer <token>'")),
        };
        self.verify(token)
    }

    pub fn verify(&self, token: &str) -> Result<Claims, Denied> {
        let header = jsonwebtoken::decode_header(token).map_err(|_| Denied::unauthorized("malformed token"))?;
        if !self.policy.accepted_algorithms.contains(&header.alg) {
            return Err(Denied::unauthorized(format!("algorithm {:?} not accepted", header.alg)));
        }
        let fam = family(header.alg).ok_or_else(|| Denied::unauthorized("algorithm not supported"))?;
        let validation = self.validation(header.alg);
        let keys = self.key_snapshot();
        let candidates: Vec<&VerificationKey> = keys
            .iter()
            .filter(|k| k.family == fam)
            .filter(|k| match (&header.kid, &k.kid) {
                (Some(want), Some(have)) => want == have,
                _ => true,
            })
            .collect();
        if candidates.is_empty() {
            return Err(Denied::unauthorized(UNKNOWN_KEY));
        }
        let mut last = Denied::unauthorized("invalid signature");
        for key in candidates {
            match jsonwebtoken::decode::<Claims>(token, &key.key, &validation) {
                Ok(data) => return self.check_claims(data.claims),
                Err(e) => {
                    let denied = Denied::unauthorized(describe(e.kind()));
                    // Only a bad signature justifies trying the next key.
                    if !matches!(e.kind(), ErrorKind::InvalidSignature) {
                        return Err(denied);
                    }
                    last = denied;
                }
            }
        }
        Err(last)
    }

    fn validation(&self, alg: Algorithm) -> Validation {
        let mut v = Validation::new(alg);
        v.leeway = self.policy.clock_skew_tolerance.as_secs();
        v.validate_exp = true;
        v.validate_nbf = true;
        v.set_required_spec_claims(&["exp"]);
        if !self.policy.accepted_issuers.is_empty() {
            v.set_issuer(&self.policy.accepted_issuers);
        }
        match &self.policy.required_audience {
            Some(aud) => v.set_audience(&[aud]),
            None => v.validate_aud = false,
        }
        v
    }

    fn check_claims(&self, claims: Claims) -> Result<Claims, Denied> {
        if let Some((name, want)) = &self.policy.required_claim {
            let ok = match claims.get(name) {
                Some(Value::String(s)) => s == want,
                Some(Value::Array(items)) => items.iter().any(|i| i.as_str() == Some(want)),
                _ => false,
            };
            if !ok {
                return Err(Denied {
                    status: StatusCode::FORBIDDEN,
                    reason: format!("token lacks required claim {name}={want}"),
                });
            }
        }
        Ok(claims)
    }
}

const UNKNOWN_KEY: &str = "no verification key for this token";

fn describe(kind: &ErrorKind) -> &'static str {
    match kind {
        ErrorKind::ExpiredSignature => "token expired",
        ErrorKind::ImmatureSignature => "token not yet valid",
        ErrorKind::InvalidIssuer => "issuer not accepted",
        ErrorKind::InvalidAudience => "audience mismatch",
        ErrorKind::InvalidSignature => "invalid signature",
        ErrorKind::MissingRequiredClaim(_) => "token lacks exp claim",
        _ => "invalid token",
    }
}
