//! Pipeline configuration file: TOML sections, one per module.
//!
//! Keys follow the usual parameter names (`n`, `V`, `H`, `B`, `alpha`,
//! `gamma`, `omega1..3`, `eta`). The feature dimension is always `2 * B * H`
//! and cannot be set.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::AeConfig;
use crate::augment::GanConfig;
use crate::bench::{CorpusConfig, ExperimentGrid, NoiseSpec};
use crate::density::MadeConfig;
use crate::detector::{DetectorConfig, ForgetSchedule, DEFAULT_FORGET_RATE};
use crate::flows::{vocab_size, DEFAULT_HEAD_PACKETS, DEFAULT_MAX_LEN};
use crate::relabel::CorrectionConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowsSection {
    pub n: usize,
    pub max_len: u32,
}

impl Default for FlowsSection {
    fn default() -> Self {
        Self { n: DEFAULT_HEAD_PACKETS, max_len: DEFAULT_MAX_LEN }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderSection {
    #[serde(rename = "V")]
    pub embed_dim: usize,
    #[serde(rename = "H")]
    pub hidden: usize,
    #[serde(rename = "B")]
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        let ae = AeConfig::default();
        Self {
            embed_dim: ae.embed_dim,
            hidden: ae.hidden,
            layers: ae.layers,
            epochs: ae.epochs,
            batch_size: ae.batch_size,
            learning_rate: ae.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelSection {
    pub alpha: f64,
}

impl Default for RelabelSection {
    fn default() -> Self {
        Self { alpha: CorrectionConfig::default().alpha }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub gamma: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub eta: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_region: Option<usize>,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let g = GanConfig::default();
        Self {
            gamma: g.gamma_pct,
            omega1: g.omega_pcts[0],
            omega2: g.omega_pcts[1],
            omega3: g.omega_pcts[2],
            eta: g.instances,
            latent_dim: g.latent_dim,
            hidden: g.hidden,
            steps: g.steps,
            batch_size: g.batch_size,
            learning_rate: g.learning_rate,
            per_region: g.per_region,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Unset: the remaining-noise estimate when ground truth is available,
    /// otherwise 0.1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forget_rate: Option<f64>,
    pub ramp_epochs: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorConfig::default();
        Self {
            hidden: d.hidden,
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            forget_rate: None,
            ramp_epochs: d.schedule.ramp_epochs,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub flows: FlowsSection,
    pub autoencoder: AutoencoderSection,
    pub density: MadeConfig,
    pub relabel: RelabelSection,
    pub augment: AugmentSection,
    pub detector: DetectorSection,
    pub corpus: CorpusConfig,
    pub noise: NoiseSpec,
    pub experiment: ExperimentGrid,
}

const SECTIONS: [&str; 9] = [
    "flows",
    "autoencoder",
    "density",
    "relabel",
    "augment",
    "detector",
    "corpus",
    "noise",
    "experiment",
];

/// Deserializes one section, naming the offending key on failure.
fn section<T: DeserializeOwned>(name: &str, table: &toml::Table) -> Result<T> {
    match toml::Value::Table(table.clone()).try_into::<T>() {
        Ok(v) => Ok(v),
        Err(whole) => {
            for (key, value) in table {
                let mut single = toml::Table::new();
                single.insert(key.clone(), value.clone());
                if let Err(e) = toml::Value::Table(single).try_into::<T>() {
                    let msg = e.to_string();
                    let reason = if msg.contains("unknown field") {
                        "unknown key".to_string()
                    } else {
                        msg.lines().last().unwrap_or(&msg).trim().to_string()
                    };
                    return Err(Error::config(name, key, reason));
                }
            }
            Err(Error::config(name, "", whole.to_string()))
        }
    }
}

fn unit_interval(section: &str, key: &str, v: f64, closed_low: bool) -> Result<()> {
    let ok = if closed_low { (0.0..1.0).contains(&v) } else { v > 0.0 && v < 1.0 };
    if ok {
        Ok(())
    } else {
        let range = if closed_low { "[0, 1)" } else { "(0, 1)" };
        Err(Error::config(section, key, format!("{v} is outside {range}")))
    }
}

fn positive(section: &str, key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(section, key, "must be at least 1"));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("", "", e.message().to_string()))?;
        let mut cfg = PipelineConfig::default();
        for (name, value) in &root {
            let Some(table) = value.as_table() else {
                return Err(Error::config(name, "", "expected a [section]"));
            };
            match name.as_str() {
                "flows" => cfg.flows = section(name, table)?,
                "autoencoder" => {
                    if table.contains_key("d") {
                        return Err(Error::config(name, "d", "derived as 2 * B * H and cannot be set"));
                    }
                    cfg.autoencoder = section(name, table)?;
                }
                "density" => cfg.density = section(name, table)?,
                "relabel" => cfg.relabel = section(name, table)?,
                "augment" => cfg.augment = section(name, table)?,
                "detector" => cfg.detector = section(name, table)?,
                "corpus" => cfg.corpus = section(name, table)?,
                "noise" => cfg.noise = section(name, table)?,
                "experiment" => cfg.experiment = section(name, table)?,
                other => {
                    return Err(Error::config(
                        other,
                        "",
                        format!("unknown section; expected one of {}", SECTIONS.join(", ")),
                    ))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        positive("flows", "n", self.flows.n)?;
        if self.flows.max_len < 1 {
            return Err(Error::config("flows", "max_len", "must be at least 1"));
        }
        positive("autoencoder", "V", self.autoencoder.embed_dim)?;
        positive("autoencoder", "H", self.autoencoder.hidden)?;
        positive("autoencoder", "B", self.autoencoder.layers)?;
        positive("autoencoder", "batch_size", self.autoencoder.batch_size)?;
        positive("density", "components", self.density.components)?;
        positive("density", "hidden_multiplier", self.density.hidden_multiplier)?;
        positive("density", "batch_size", self.density.batch_size)?;
        unit_interval("relabel", "alpha", self.relabel.alpha, false)?;
        let a = &self.augment;
        unit_interval("augment", "gamma", a.gamma, false)?;
        unit_interval("augment", "omega1", a.omega1, false)?;
        unit_interval("augment", "omega2", a.omega2, false)?;
        unit_interval("augment", "omega3", a.omega3, false)?;
        if !(a.omega1 < a.omega2 && a.omega2 < a.omega3) {
            return Err(Error::config("augment", "omega2", "omega1 < omega2 < omega3 is required"));
        }
        positive("augment", "eta", a.eta)?;
        positive("augment", "latent_dim", a.latent_dim)?;
        positive("augment", "batch_size", a.batch_size)?;
        positive("detector", "batch_size", self.detector.batch_size)?;
        if let Some(r) = self.detector.forget_rate {
            unit_interval("detector", "forget_rate", r, true)?;
        }
        if !(0.0..0.5).contains(&self.noise.ratio) {
            return Err(Error::config("noise", "ratio", "must lie in [0, 0.5)"));
        }
        self.corpus
            .validate()
            .map_err(|e| Error::config("corpus", "", e.to_string()))?;
        self.experiment
            .validate()
            .map_err(|e| Error::config("experiment", "", e.to_string()))?;
        Ok(())
    }

    /// Feature dimension `2 * B * H`.
    pub fn feature_dim(&self) -> usize {
        2 * self.autoencoder.layers * self.autoencoder.hidden
    }

    pub fn ae_config(&self) -> AeConfig {
        AeConfig {
            vocab: vocab_size(self.flows.max_len),
            embed_dim: self.autoencoder.embed_dim,
            hidden: self.autoencoder.hidden,
            layers: self.autoencoder.layers,
            seq_len: self.flows.n,
            epochs: self.autoencoder.epochs,
            batch_size: self.autoencoder.batch_size,
            learning_rate: self.autoencoder.learning_rate,
        }
    }

    pub fn correction_config(&self) -> CorrectionConfig {
        CorrectionConfig { alpha: self.relabel.alpha }
    }

    pub fn gan_config(&self) -> GanConfig {
        let a = &self.augment;
        GanConfig {
            latent_dim: a.latent_dim,
            hidden: a.hidden,
            steps: a.steps,
            batch_size: a.batch_size,
            learning_rate: a.learning_rate,
            gamma_pct: a.gamma,
            omega_pcts: [a.omega1, a.omega2, a.omega3],
            instances: a.eta,
            per_region: a.per_region,
        }
    }

    /// Detector settings; the forget rate falls back to `estimate`, then to
    /// the library default.
    pub fn detector_config(&self, estimate: Option<f64>) -> DetectorConfig {
        let d = &self.detector;
        let rate = d.forget_rate.or(estimate).unwrap_or(DEFAULT_FORGET_RATE).clamp(0.0, 0.99);
        DetectorConfig {
            hidden: d.hidden.clone(),
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            schedule: ForgetSchedule { rate, ramp_epochs: d.ramp_epochs },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_table_defaults() {
        let c = PipelineConfig::parse_str("").unwrap();
        assert_eq!(c.flows.n, 50);
        assert_eq!(c.autoencoder.embed_dim, 32);
        assert_eq!(c.autoencoder.hidden, 8);
        assert_eq!(c.autoencoder.layers, 2);
        assert_eq!(c.feature_dim(), 32);
        assert_eq!(c.relabel.alpha, 0.5);
        assert_eq!(c.augment.gamma, 0.05);
        assert_eq!((c.augment.omega1, c.augment.omega2, c.augment.omega3), (0.1, 0.2, 0.3));
        assert_eq!(c.augment.eta, 5);
        assert_eq!(c.ae_config().vocab, 1501);
    }

    #[test]
    fn feature_dim_is_derived() {
        let c = PipelineConfig::parse_str("[autoencoder]\nB = 3\nH = 8\n").unwrap();
        assert_eq!(c.feature_dim(), 48);
        let e = PipelineConfig::parse_str("[autoencoder]\nd = 48\n").unwrap_err();
        assert!(e.to_string().contains("[autoencoder] d"), "{e}");
    }

    #[test]
    fn rejects_out_of_range_and_unknown() {
        let e = PipelineConfig::parse_str("[relabel]\nalpha = 1.5\n").unwrap_err();
        assert!(e.to_string().contains("[relabel] alpha"), "{e}");
        let e = PipelineConfig::parse_str("[density]\ncomponents = 3\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("[density] bogus"), "{e}");
        assert!(e.to_string().contains("unknown key"), "{e}");
        let e = PipelineConfig::parse_str("[augment]\neta = \"five\"\n").unwrap_err();
        assert!(e.to_string().contains("[augment] eta"), "{e}");
        let e = PipelineConfig::parse_str("[nonsense]\nx = 1\n").unwrap_err();
        assert!(e.to_string().contains("[nonsense]"), "{e}");
        let e = PipelineConfig::parse_str("[augment]\nomega1 = 0.3\nomega3 = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("[augment]"), "{e}");
        assert!(PipelineConfig::parse_str("[noise]\nratio = 0.5\n").is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let text = "[noise]\nmode = \"template\"\nratio = 0.2\nwithheld = [3, 4]\n\n[experiment]\nsizes = [100]\nratios = [0.3]\nseeds = [7]\nmodes = [\"symmetric\", \"template\"]\n\n[detector]\nforget_rate = 0.2\n";
        let c = PipelineConfig::parse_str(text).unwrap();
        assert_eq!(c.noise.withheld, vec![3, 4]);
        assert_eq!(c.experiment.seeds, vec![7]);
        assert_eq!(c.detector_config(Some(0.4)).schedule.rate, 0.2);
        let d = PipelineConfig::default();
        assert_eq!(d.detector_config(Some(0.4)).schedule.rate, 0.4);
        assert_eq!(d.detector_config(None).schedule.rate, 0.1);
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.relabel.alpha = 0.4;
        assert_ne!(a.hash(), b.hash());
    }

    proptest! {
        #[test]
        fn round_trip(alpha in 0.01f64..0.99, n in 1usize..80, b in 1usize..4, h in 1usize..16, eta in 1usize..8, per in proptest::option::of(0usize..50), fr in proptest::option::of(0.0f64..0.9)) {
            let mut c = PipelineConfig::default();
            c.relabel.alpha = alpha;
            c.flows.n = n;
            c.autoencoder.layers = b;
            c.autoencoder.hidden = h;
            c.augment.eta = eta;
            c.augment.per_region = per;
            c.detector.forget_rate = fr;
            let back = PipelineConfig::parse_str(&c.to_toml()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
