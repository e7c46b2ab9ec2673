//! Small dense networks with exact gradients: the Gaussian policy, the
//! discriminator, the value critic and Adam.

mod adam;
mod heads;
mod mlp;
mod policy;

pub use adam::Adam;
pub use heads::{fit_regression, mse_loss_and_grad, sigmoid, softplus, Discriminator, RewardForm, ValueNet};
pub use mlp::{Activation, ForwardCache, Mlp};
pub use policy::{gaussian_logprob, GaussianPolicy, PolicySample, DEFAULT_LOG_STD};

pub(crate) use heads::to_matrix;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const NETWORK_FILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    version: u32,
    kind: String,
    body: T,
}

/// Writes `body` as versioned JSON. Floats use serde_json's shortest
/// round-trip formatting, so reloading reproduces every parameter exactly.
pub fn save_json<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    let env = Envelope {
        version: NETWORK_FILE_VERSION,
        kind: kind.to_string(),
        body,
    };
    fs::write(path, serde_json::to_string(&env)?)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(&fs::read_to_string(path)?)?;
    if env.version != NETWORK_FILE_VERSION {
        return Err(Error::Version {
            found: env.version,
            expected: NETWORK_FILE_VERSION,
        });
    }
    if env.kind != kind {
        return Err(invalid(format!("{} holds a `{}`, expected `{kind}`", path.display(), env.kind)));
    }
    Ok(env.body)
}

impl GaussianPolicy {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, "gaussian_policy", self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path, "gaussian_policy")
    }
}

impl Discriminator {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, "discriminator", self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path, "discriminator")
    }
}

impl ValueNet {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, "value_net", self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path, "value_net")
    }
}
