//! Versioned JSON checkpoints of trained surrogates.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use episurr_core::bundle::BundleSpec;
use episurr_core::models::{ModelDef, ModelId, ParamVec};
use episurr_core::net::{InputScaling, Layer, NetConfig, SurrogateNet};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// `fan_in` rows of `fan_out` weights; the layer computes `x W + b`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// One probe evaluation recorded at save time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub t: f64,
    pub z0: Vec<f64>,
    pub theta: [f64; 2],
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub model_id: ModelId,
    pub net_config: NetConfig,
    pub input_scaling: InputScaling,
    pub bundle_spec: BundleSpec,
    pub time_range: [f64; 2],
    pub seed: u64,
    pub layers: Vec<LayerRecord>,
    /// Constrained outputs on a fixed probe set; a load must reproduce them bit for bit.
    pub probe: Vec<Probe>,
}

/// Probe inputs: bundle center and the two extreme corners at three times.
fn probe_inputs(model: &ModelDef, bundle: &BundleSpec) -> Vec<(f64, Vec<f64>, ParamVec)> {
    let nf = model.n_free();
    let intervals = bundle.intervals();
    let corner = |hi: bool| -> Vec<f64> { intervals.iter().map(|i| if hi { i.hi } else { i.lo }).collect() };
    let mut out = Vec::new();
    for v in [bundle.center(), corner(false), corner(true)] {
        // The high corner may be infeasible (S0 < 0); keep only valid states.
        if v[..nf].iter().sum::<f64>() > 1.0 {
            continue;
        }
        for t in [0.0, bundle.t_max() / 3.0, bundle.t_max()] {
            out.push((t, model.full_state(&v[..nf]), ParamVec::new(v[nf], v[nf + 1])));
        }
    }
    out
}

impl Checkpoint {
    pub fn from_net(net: &SurrogateNet, bundle: &BundleSpec, seed: u64) -> Result<Checkpoint> {
        let model = net.model_def();
        let probe = probe_inputs(&model, bundle)
            .into_iter()
            .map(|(t, z0, theta)| {
                let output = net.constrained_forward(t, &z0, theta)?;
                Ok(Probe { t, z0, theta: theta.as_array(), output })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            schema_version: SCHEMA_VERSION,
            model_id: net.model,
            net_config: net.config.clone(),
            input_scaling: net.scaling.clone(),
            bundle_spec: bundle.clone(),
            time_range: [bundle.time_range.lo, bundle.time_range.hi],
            seed,
            layers: net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    weights: l.weights.chunks(l.fan_out).map(<[f64]>::to_vec).collect(),
                    bias: l.bias.clone(),
                })
                .collect(),
            probe,
        })
    }

    /// Rebuilds the network and checks it against the stored probe outputs.
    pub fn to_net(&self) -> Result<SurrogateNet> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let fan_out = l.bias.len();
                ensure!(
                    l.weights.iter().all(|row| row.len() == fan_out),
                    "layer {k}: weight rows must have {fan_out} entries"
                );
                Ok(Layer {
                    fan_in: l.weights.len(),
                    fan_out,
                    weights: l.weights.concat(),
                    bias: l.bias.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = SurrogateNet::from_parts(self.model_id, self.net_config.clone(), self.input_scaling.clone(), layers)?;
        for (i, p) in self.probe.iter().enumerate() {
            let out = net.constrained_forward(p.t, &p.z0, ParamVec::new(p.theta[0], p.theta[1]))?;
            let same = out.len() == p.output.len() && out.iter().zip(&p.output).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure!(same, "probe {i} does not reproduce: stored {:?}, computed {out:?}", p.output);
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(crate::json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let value: serde_json::Value = serde_json::from_str(text).context("checkpoint is not valid JSON")?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => bail!("checkpoint schema version {v} is not supported (expected {SCHEMA_VERSION})"),
            None => bail!("checkpoint has no schema_version field"),
        }
        serde_json::from_value(value).context("malformed checkpoint")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Checkpoint::from_json(&text).with_context(|| format!("loading {}", path.display()))
    }

    /// Loads and verifies a network for `model`.
    pub fn load_net(path: &Path, model: Option<ModelId>) -> Result<(SurrogateNet, Checkpoint)> {
        let ckpt = Checkpoint::load(path)?;
        if let Some(m) = model {
            ensure!(
                m == ckpt.model_id,
                "checkpoint {} holds a {} surrogate, not {m}",
                path.display(),
                ckpt.model_id
            );
        }
        let net = ckpt.to_net().with_context(|| format!("verifying {}", path.display()))?;
        Ok((net, ckpt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (SurrogateNet, BundleSpec) {
        let bundle = BundleSpec::standard_sir();
        let cfg = NetConfig::for_model(&ModelDef::SIR).with_hidden(2, 5);
        (SurrogateNet::new(ModelId::Sir, cfg, bundle.scaling(), 3).unwrap(), bundle)
    }

    #[test]
    fn save_load_save_is_identical() {
        let (net, bundle) = sample();
        let a = Checkpoint::from_net(&net, &bundle, 3).unwrap().to_json().unwrap();
        let loaded = Checkpoint::from_json(&a).unwrap().to_net().unwrap();
        assert_eq!(loaded, net);
        let b = Checkpoint::from_net(&loaded, &bundle, 3).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schema_mismatch_is_explicit() {
        let (net, bundle) = sample();
        let mut v: serde_json::Value = serde_json::from_str(&Checkpoint::from_net(&net, &bundle, 3).unwrap().to_json().unwrap()).unwrap();
        v["schema_version"] = 99.into();
        let err = Checkpoint::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("schema version 99"));
    }

    #[test]
    fn tampered_weights_fail_the_probe() {
        let (net, bundle) = sample();
        let mut c = Checkpoint::from_net(&net, &bundle, 3).unwrap();
        c.layers[0].weights[0][0] += 1e-12;
        assert!(c.to_net().is_err());
    }

    #[test]
    fn wrong_output_dim_is_rejected() {
        let (net, bundle) = sample();
        let mut c = Checkpoint::from_net(&net, &bundle, 3).unwrap();
        c.model_id = ModelId::Sirp;
        assert!(c.to_net().is_err());
    }
}
