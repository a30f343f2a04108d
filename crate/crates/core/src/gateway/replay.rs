//! Record/replay fixtures keyed by prompt fingerprint.
//!
//! Layout: `<fixtures>/<model_config_id>/<fingerprint>.json`. The model
//! config is part of the key so one prompt can carry a recorded answer per
//! model being compared.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{FailureKind, ModelProvider, ProviderFailure, ProviderReply};
use crate::codec;
use crate::domain::{ModelConfig, TokenUsage};
use crate::prompt::PromptBundle;
use crate::store::encode_id;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixture {
    /// Fingerprint of the prompt bundle this answers.
    pub request_digest: String,
    pub model_config_id: String,
    pub body: String,
    pub usage: TokenUsage,
    pub provider_echo: String,
    pub recorded_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct FixtureStore {
    root: PathBuf,
}

impl FixtureStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FixtureStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, model_config_id: &str, fingerprint: &str) -> PathBuf {
        let dir = encode_id(model_config_id).unwrap_or_else(|_| "%00".into());
        self.root.join(dir).join(format!("{fingerprint}.json"))
    }

    pub fn load(&self, model_config_id: &str, fingerprint: &str) -> std::io::Result<Option<Fixture>> {
        match fs::read(self.path(model_config_id, fingerprint)) {
            Ok(bytes) => codec::from_slice(&bytes)
                .map(Some)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Writes a fixture via temp file and rename so readers never see half of one.
    pub fn save(&self, fixture: &Fixture) -> std::io::Result<PathBuf> {
        let path = self.path(&fixture.model_config_id, &fixture.request_digest);
        let dir = path.parent().expect("fixture path has a parent");
        fs::create_dir_all(dir)?;
        let body = codec::to_canonical(fixture).map_err(std::io::Error::other)?;
        let tmp = dir.join(format!(".{}.{}.tmp", fixture.request_digest, std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&body)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

/// Answers every prompt from its recorded fixture.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    fixtures: FixtureStore,
}

impl ReplayProvider {
    pub fn new(fixtures: FixtureStore) -> Self {
        ReplayProvider { fixtures }
    }
}

impl ModelProvider for ReplayProvider {
    fn complete(&self, bundle: &PromptBundle, config: &ModelConfig) -> Result<ProviderReply, ProviderFailure> {
        match self.fixtures.load(&config.model_config_id, &bundle.fingerprint) {
            Ok(Some(fixture)) => Ok(ProviderReply {
                body: fixture.body,
                usage: fixture.usage,
                provider_echo: fixture.provider_echo,
            }),
            Ok(None) => Err(ProviderFailure::new(
                FailureKind::FixtureMissing,
                format!("{}/{}", config.model_config_id, bundle.fingerprint),
            )),
            Err(e) => Err(ProviderFailure::new(FailureKind::Fatal, format!("unreadable fixture: {e}"))),
        }
    }
}

/// Passes calls to a live provider and saves each successful reply as a fixture.
pub struct RecordingProvider {
    inner: Arc<dyn ModelProvider>,
    fixtures: FixtureStore,
}

impl RecordingProvider {
    pub fn new(inner: Arc<dyn ModelProvider>, fixtures: FixtureStore) -> Self {
        RecordingProvider { inner, fixtures }
    }
}

impl ModelProvider for RecordingProvider {
    fn complete(&self, bundle: &PromptBundle, config: &ModelConfig) -> Result<ProviderReply, ProviderFailure> {
        let reply = self.inner.complete(bundle, config)?;
        let fixture = Fixture {
            request_digest: bundle.fingerprint.clone(),
            model_config_id: config.model_config_id.clone(),
            body: reply.body.clone(),
            usage: reply.usage,
            provider_echo: reply.provider_echo.clone(),
            recorded_at: Utc::now(),
        };
        self.fixtures
            .save(&fixture)
            .map_err(|e| ProviderFailure::new(FailureKind::Fatal, format!("cannot save fixture: {e}")))?;
        Ok(reply)
    }
}
