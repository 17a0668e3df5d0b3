//! JSON checkpoint format shared by every network in the pipeline:
//! `{"layers":[{"rows":R,"cols":C,"w":[..],"b":[..],"act":".."}]}`.
//!
//! An optional `config_digest` key records the experiment configuration that
//! produced the weights; loaders that know the expected digest reject others.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{DenseNet, Layer};
use crate::error::Result;
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub layers: Vec<Layer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl Checkpoint {
    pub fn new(net: &DenseNet, config_digest: Option<&str>) -> Self {
        Checkpoint {
            layers: net.layers.clone(),
            config_digest: config_digest.map(str::to_owned),
        }
    }

    pub fn into_net(self) -> Result<DenseNet> {
        DenseNet::from_layers(self.layers)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn save(path: &Path, net: &DenseNet, config_digest: Option<&str>) -> Result<()> {
    util::write_json(path, &Checkpoint::new(net, config_digest))
}

/// Loads a network, checking the embedded digest when `expected` is given.
pub fn load(path: &Path, expected: Option<&str>) -> Result<DenseNet> {
    let ck: Checkpoint = util::read_json(path)?;
    util::check_digest(&path.display().to_string(), expected, ck.config_digest.as_deref())?;
    ck.into_net()
}

/// Content hash of a network's checkpoint serialization (without digest tag).
pub fn net_digest(net: &DenseNet) -> String {
    let json = serde_json::to_vec(&Checkpoint::new(net, None)).expect("finite nets serialize");
    util::sha256_hex(&json)
}

impl From<&DenseNet> for Checkpoint {
    fn from(net: &DenseNet) -> Self {
        Checkpoint::new(net, None)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::numerics::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn format_matches_documented_schema() {
        let net = DenseNet::from_layers(vec![Layer {
            rows: 1,
            cols: 2,
            w: vec![0.5, -1.25],
            b: vec![0.1],
            act: Activation::Sigmoid,
        }])
        .unwrap();
        let s = Checkpoint::new(&net, None).to_json().unwrap();
        assert_eq!(
            s,
            r#"{"layers":[{"rows":1,"cols":2,"w":[0.5,-1.25],"b":[0.1],"act":"sigmoid"}]}"#
        );
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = DenseNet::new(
            7,
            &[(13, Activation::Relu), (5, Activation::Softmax)],
            &mut rng,
        )
        .unwrap();
        let s = Checkpoint::new(&net, Some("abc")).to_json().unwrap();
        let back = Checkpoint::from_json(&s).unwrap();
        assert_eq!(back.config_digest.as_deref(), Some("abc"));
        let back = back.into_net().unwrap();
        for (a, b) in net.params().iter().zip(back.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn digest_mismatch_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::new(2, &[(1, Activation::Identity)], &mut rng).unwrap();
        save(&path, &net, Some("aaaa")).unwrap();
        assert!(load(&path, Some("aaaa")).is_ok());
        assert!(load(&path, None).is_ok());
        assert!(matches!(
            load(&path, Some("bbbb")),
            Err(Error::DigestMismatch { .. })
        ));
    }
}
