//! TOML configuration for the runnable services and key-file handling.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::CoordinatorConfig;
use crate::crypto::{generate_identity, IdentityKeys, IssuerKey, SecureRng, SigningSecret};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Reads a TOML file; with no path, every field takes its default.
pub fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, ConfigError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordinatorServiceConfig {
    pub listen: String,
    /// State snapshot; in-memory only when absent.
    pub store_path: Option<PathBuf>,
    /// PKCS#8 PEM e-cash issuer key, generated on first start.
    pub issuer_key_path: PathBuf,
    pub issuer_bits: usize,
    /// PKCS#8 PEM key that signs bearer tokens, generated on first start.
    pub bearer_key_path: PathBuf,
    /// base64 SPKI of the trusted notary. When absent it is fetched from
    /// `notary_url` at startup.
    pub notary_public_key: Option<String>,
    pub notary_url: String,
    /// Where `bootstrap_tokens` fresh tokens are written, one per line.
    /// Minting happens only when the file does not exist yet.
    pub bootstrap_wallet_path: Option<PathBuf>,
    pub purge_interval_secs: u64,
    pub protocol: CoordinatorConfig,
}

impl Default for CoordinatorServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            store_path: Some("coordinator-state.json".into()),
            issuer_key_path: "issuer-key.pem".into(),
            issuer_bits: 2048,
            bearer_key_path: "bearer-key.pem".into(),
            notary_public_key: None,
            notary_url: "http://127.0.0.1:8090".into(),
            bootstrap_wallet_path: None,
            purge_interval_secs: 3_600,
            protocol: CoordinatorConfig::default(),
        }
    }
}

impl CoordinatorServiceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.protocol.validate().map_err(ConfigError::Invalid)?;
        if self.issuer_bits < 2048 {
            return Err(ConfigError::Invalid("issuer_bits must be at least 2048".into()));
        }
        if self.purge_interval_secs == 0 {
            return Err(ConfigError::Invalid("purge_interval_secs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NotaryServiceConfig {
    pub listen: String,
    pub key_path: PathBuf,
    pub max_transcript_bytes: usize,
}

impl Default for NotaryServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8090".into(),
            key_path: "notary-key.pem".into(),
            max_transcript_bytes: crate::provenance::DEFAULT_MAX_TRANSCRIPT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UserConfig {
    pub coordinator_url: String,
    pub backend: String,
    /// Tokens to pay with, one base64 token per line; each query consumes
    /// the first.
    pub wallet_path: PathBuf,
    pub poll_interval_ms: u64,
    pub timeout_ms: u64,
}

impl Default for UserConfig {
    fn default() -> Self {
        Self {
            coordinator_url: "http://127.0.0.1:8080".into(),
            backend: crate::chatbot::MOCK_BACKEND_ID.into(),
            wallet_path: "user-wallet.txt".into(),
            poll_interval_ms: 1_000,
            timeout_ms: 600_000,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ConfigError + '_ {
    move |source| ConfigError::Io { path: path.into(), source }
}

fn bad_key(path: &Path) -> impl FnOnce(crate::crypto::CryptoError) -> ConfigError + '_ {
    move |e| ConfigError::Parse { path: path.into(), message: e.to_string() }
}

/// Writes a secret readable by the owner only.
pub fn write_secret(path: &Path, contents: &str) -> Result<(), ConfigError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(path))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(io(path))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&tmp, std::fs::Permissions::from_mode(0o600)).map_err(io(path))?;
    }
    std::fs::rename(&tmp, path).map_err(io(path))
}

fn load_or_create<K>(
    path: &Path,
    parse: impl FnOnce(&str) -> Result<K, crate::crypto::CryptoError>,
    create: impl FnOnce() -> (K, String),
) -> Result<K, ConfigError> {
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        return parse(&text).map_err(bad_key(path));
    }
    let (key, pem) = create();
    write_secret(path, &pem)?;
    log::info!("generated new key at {}", path.display());
    Ok(key)
}

pub fn load_or_create_issuer(path: &Path, bits: usize, rng: &mut impl SecureRng) -> Result<IssuerKey, ConfigError> {
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        return IssuerKey::from_pem(&text).map_err(bad_key(path));
    }
    let key = IssuerKey::generate(rng, bits).map_err(bad_key(path))?;
    write_secret(path, &key.to_pem())?;
    log::info!("generated new issuer key at {}", path.display());
    Ok(key)
}

pub fn load_or_create_signing(path: &Path, rng: &mut impl SecureRng) -> Result<SigningSecret, ConfigError> {
    load_or_create(path, SigningSecret::from_pem, || {
        let k = SigningSecret::generate(rng);
        let pem = k.to_pem();
        (k, pem)
    })
}

pub fn load_or_create_identity(path: &Path, rng: &mut impl SecureRng) -> Result<IdentityKeys, ConfigError> {
    load_or_create(path, IdentityKeys::from_pem, || {
        let k = generate_identity(rng);
        let pem = k.to_pem();
        (k, pem)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn missing_path_gives_defaults_and_unknown_keys_fail() {
        let c: CoordinatorServiceConfig = load_toml(None).unwrap();
        assert_eq!(c, CoordinatorServiceConfig::default());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "listen = \"0.0.0.0:1\"\n[protocol]\np_a = 0.5\n").unwrap();
        let c: CoordinatorServiceConfig = load_toml(Some(&p)).unwrap();
        assert_eq!(c.listen, "0.0.0.0:1");
        assert_eq!(c.protocol.p_a, 0.5);
        assert_eq!(c.protocol.sla_threshold_secs, 60);

        std::fs::write(&p, "lisen = \"x\"\n").unwrap();
        assert!(matches!(load_toml::<CoordinatorServiceConfig>(Some(&p)), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn identity_file_is_created_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("keys/id.pem");
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = load_or_create_identity(&p, &mut rng).unwrap();
        let b = load_or_create_identity(&p, &mut rng).unwrap();
        assert_eq!(a.public_bundle(), b.public_bundle());
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            assert_eq!(std::fs::metadata(&p).unwrap().permissions().mode() & 0o777, 0o600);
        }
        std::fs::write(&p, "garbage").unwrap();
        assert!(load_or_create_identity(&p, &mut rng).is_err());
    }
}
