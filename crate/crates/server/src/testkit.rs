//! Test support: signing keys, token minting and a JWKS endpoint.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::http::StatusCode;
use axum::routing::get;
use axum::Router;
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use jsonwebtoken::{Algorithm, EncodingKey, Header};
use serde_json::{json, Value};

use crate::auth::VerificationKey;
use crate::Shutdown;

/// A private key with its public JWK.
#[derive(Clone)]
pub struct SigningKey {
    pub kid: String,
    pub alg: Algorithm,
    encoding: EncodingKey,
    public_pem: String,
    jwk: Value,
}

impl SigningKey {
    pub fn es256(kid: &str) -> Self {
        use p256::elliptic_curve::sec1::ToEncodedPoint;
        use p256::pkcs8::{EncodePrivateKey, EncodePublicKey, LineEnding};

        let secret = p256::SecretKey::random(&mut rand::rngs::OsRng);
        let private_pem = secret.to_pkcs8_pem(LineEnding::LF).expect("encode EC key");
        let public = secret.public_key();
        let point = public.to_encoded_point(false);
        let jwk = json!({
            "kty": "EC",
            "crv": "P-256",
            "kid": kid,
            "alg": "ES256",
            "use": "sig",
            "x": URL_SAFE_NO_PAD.encode(point.x().expect("x")),
            "y": URL_SAFE_NO_PAD.encode(point.y().expect("y")),
        });
        SigningKey {
            kid: kid.into(),
            alg: Algorithm::ES256,
            encoding: EncodingKey::from_ec_pem(private_pem.as_bytes()).expect("EC encoding key"),
            public_pem: public.to_public_key_pem(LineEnding::LF).expect("encode EC public key"),
            jwk,
        }
    }

    pub fn rs256(kid: &str) -> Self {
        use rsa::pkcs1::{EncodeRsaPrivateKey, EncodeRsaPublicKey, LineEnding};
        use rsa::traits::PublicKeyParts;

        let private = rsa::RsaPrivateKey::new(&mut rand::rngs::OsRng, 2048).expect("generate RSA key");
        let public = private.to_public_key();
        let private_pem = private.to_pkcs1_pem(LineEnding::LF).expect("encode RSA key");
        let jwk = json!({
            "kty": "RSA",
            "kid": kid,
            "alg": "RS256",
            "use": "sig",
            "n": URL_SAFE_NO_PAD.encode(public.n().to_bytes_be()),
            "e": URL_SAFE_NO_PAD.encode(public.e().to_bytes_be()),
        });
        SigningKey {
            kid: kid.into(),
            alg: Algorithm::RS256,
            encoding: EncodingKey::from_rsa_pem(private_pem.as_bytes()).expect("RSA encoding key"),
            public_pem: public.to_pkcs1_pem(LineEnding::LF).expect("encode RSA public key"),
            jwk,
        }
    }

    pub fn jwk(&self) -> &Value {
        &self.jwk
    }

    pub fn public_pem(&self) -> &str {
        &self.public_pem
    }

    pub fn verification_key(&self) -> VerificationKey {
        VerificationKey::from_pem(Some(self.kid.clone()), self.public_pem.as_bytes()).expect("public key")
    }

    /// Signs `claims` with this key, naming it in the `kid` header.
    pub fn sign(&self, claims: &Value) -> String {
        let mut header = Header::new(self.alg);
        header.kid = Some(self.kid.clone());
        jsonwebtoken::encode(&header, claims, &self.encoding).expect("sign token")
    }
}

pub fn jwks(keys: &[&SigningKey]) -> Value {
    json!({ "keys": keys.iter().map(|k| k.jwk.clone()).collect::<Vec<_>>() })
}

/// Serves a swappable JWKS document on an ephemeral port.
pub struct JwksServer {
    addr: SocketAddr,
    document: Arc<Mutex<Value>>,
    hits: Arc<Mutex<usize>>,
    stop: Shutdown,
    thread: Option<JoinHandle<()>>,
}

impl JwksServer {
    pub fn start(document: Value) -> Self {
        let document = Arc::new(Mutex::new(document));
        let hits = Arc::new(Mutex::new(0usize));
        let stop = Shutdown::new();
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind JWKS stub");
        std_listener.set_nonblocking(true).expect("nonblocking");
        let addr = std_listener.local_addr().expect("local addr");
        let thread = {
            let (document, hits, stop) = (document.clone(), hits.clone(), stop.clone());
            std::thread::spawn(move || {
                let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("runtime");
                runtime.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                    let app = Router::new().route(
                        "/jwks.json",
                        get(move || {
                            let (document, hits) = (document.clone(), hits.clone());
                            async move {
                                *hits.lock().unwrap() += 1;
                                let body = document.lock().unwrap().to_string();
                                (StatusCode::OK, [("content-type", "application/json")], body)
                            }
                        }),
                    );
                    let _ = axum::serve(listener, app).with_graceful_shutdown(async move { stop.triggered().await }).await;
                });
            })
        };
        JwksServer { addr, document, hits, stop, thread: Some(thread) }
    }

    pub fn url(&self) -> String {
        format!("http://{}/jwks.json", self.addr)
    }

    pub fn replace(&self, document: Value) {
        *self.document.lock().unwrap() = document;
    }

    pub fn hits(&self) -> usize {
        *self.hits.lock().unwrap()
    }
}

impl Drop for JwksServer {
    fn drop(&mut self) {
        self.stop.trigger();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
