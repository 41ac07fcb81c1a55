//! Declarative run configuration: TOML file plus dotted-key overrides, one
//! top-level seed, range checks and a content hash naming the run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::dataset::DatasetConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::lit::LitConfig;
use crate::loss::{LossConfig, LossToggles};
use crate::matching::MatchConstraints;
use crate::retrieval::AsmkConfig;
use crate::trainer::{TrainConfig, TrainSetup};
use crate::whitening::WHITENED_DIM;

/// Environment variable overriding the run-directory root.
pub const RUN_ROOT_ENV: &str = "SUPERFEAT_RUN_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: DatasetConfig,
    pub eval: DatasetConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: DatasetConfig {
                num_classes: 30,
                images_per_class: 5,
                image_size: 48,
                ..Default::default()
            },
            eval: DatasetConfig {
                num_classes: 15,
                images_per_class: 4,
                image_size: 48,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhiteningConfig {
    pub dim: usize,
}

impl Default for WhiteningConfig {
    fn default() -> Self {
        Self { dim: WHITENED_DIM }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    /// Neighbourhood sizes of the redundancy curve.
    pub redundancy_ks: Vec<usize>,
    /// Eval images whose attention maps are exported.
    pub heatmap_images: usize,
    /// Scale of the single-scale diagnostics.
    pub scale: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            redundancy_ks: vec![1, 5, 10],
            heatmap_images: 4,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Selection budgets of the memory sweep.
    pub budgets: Vec<usize>,
    /// Loss configurations trained by the loss ablation, by label.
    pub losses: Vec<String>,
    /// Tuples measured by the constraint ablation.
    pub match_tuples: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            budgets: vec![25, 50, 100],
            losses: vec!["super+attn".into(), "super".into(), "global".into()],
            match_tuples: 200,
        }
    }
}

/// Parses a toggle label such as `super+attn` or `global`.
pub fn parse_toggles(label: &str) -> Option<LossToggles> {
    let mut t = LossToggles {
        use_global: false,
        use_super: false,
        use_attn: false,
    };
    for part in label.split('+') {
        match part.trim() {
            "global" => t.use_global = true,
            "super" => t.use_super = true,
            "attn" => t.use_attn = true,
            "none" => {}
            _ => return None,
        }
    }
    Some(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub lit: LitConfig,
    pub whitening: WhiteningConfig,
    pub loss: LossConfig,
    pub toggles: LossToggles,
    pub constraints: MatchConstraints,
    pub train: TrainConfig,
    pub asmk: AsmkConfig,
    pub diagnose: DiagnoseConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            data: DataConfig::default(),
            encoder: EncoderConfig {
                hidden_channels: [16, 32, 64],
                output_dim: 256,
                seed: 0,
            },
            lit: LitConfig {
                templates: 16,
                dim: 256,
                input_dim: 256,
                ..Default::default()
            },
            whitening: WhiteningConfig::default(),
            loss: LossConfig::default(),
            toggles: LossToggles::default(),
            constraints: MatchConstraints::ALL,
            train: TrainConfig {
                epochs: 15,
                batches_per_epoch: 10,
                validate_every: 0,
                ..Default::default()
            },
            asmk: AsmkConfig {
                codebook_size: 64,
                codebook_samples: 5000,
                ..Default::default()
            },
            diagnose: DiagnoseConfig::default(),
            ablate: AblateConfig::default(),
        };
        cfg.propagate_seed();
        cfg
    }
}

fn leaf_paths(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaf_paths(&key, v, out);
            }
        }
        v => out.push((prefix.to_string(), v.clone())),
    }
}

fn lookup<'a>(root: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(root, |v, part| v.as_table()?.get(part))
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed key"));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(key, "is not a section"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::config(key, "is not a section"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_override_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Copies the top-level seed into every stochastic component.
    pub fn propagate_seed(&mut self) {
        let s = self.seed;
        self.data.train.seed = s;
        self.data.eval.seed = s.wrapping_add(1);
        self.encoder.seed = s.wrapping_add(10);
        self.lit.seed = s.wrapping_add(11);
        self.train.seed = s.wrapping_add(12);
    }

    pub fn codebook_seed(&self) -> u64 {
        self.seed.wrapping_add(13)
    }

    pub fn mining_seed(&self) -> u64 {
        self.seed.wrapping_add(14)
    }

    /// Resolves `text` (TOML, may be empty) with `overrides` of the form
    /// `dotted.key=value`, rejecting unknown keys and out-of-range values.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root = Value::Table(
            text.parse::<toml::Table>()
                .map_err(|e| Error::config(toml_error_key(&e), e.message().to_string()))?,
        );
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(ov.as_str(), "override must look like key=value"))?;
            set_dotted(&mut root, key.trim(), parse_override_value(raw.trim()))?;
        }
        let reference = Value::try_from(RunConfig::default()).map_err(|e| Error::config("<root>", e.to_string()))?;
        let mut leaves = Vec::new();
        leaf_paths("", &root, &mut leaves);
        for (key, value) in &leaves {
            let Some(expected) = lookup(&reference, key) else {
                return Err(Error::config(key.as_str(), "unknown key"));
            };
            if expected.is_table() {
                return Err(Error::config(key.as_str(), "is a section, not a value"));
            }
            let mut probe = reference.clone();
            set_dotted(&mut probe, key, value.clone())?;
            if let Err(e) = probe.try_into::<RunConfig>() {
                return Err(Error::config(key.as_str(), e.message().to_string()));
            }
        }
        let mut cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<root>", e.message().to_string()))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("data.train", &self.data.train), ("data.eval", &self.data.eval)] {
            if d.num_classes < 2 {
                return Err(Error::config(format!("{name}.num_classes"), "must be >= 2"));
            }
            if d.images_per_class < 2 {
                return Err(Error::config(format!("{name}.images_per_class"), "must be >= 2"));
            }
            if d.image_size < 24 {
                return Err(Error::config(format!("{name}.image_size"), "must be >= 24"));
            }
            if d.parts_per_scene == 0 {
                return Err(Error::config(format!("{name}.parts_per_scene"), "must be >= 1"));
            }
            if d.library_size < d.parts_per_scene {
                return Err(Error::config(
                    format!("{name}.library_size"),
                    "must be >= parts_per_scene",
                ));
            }
        }
        if self.encoder.hidden_channels.contains(&0) {
            return Err(Error::config("encoder.hidden_channels", "must be >= 1 each"));
        }
        if self.encoder.output_dim == 0 {
            return Err(Error::config("encoder.output_dim", "must be >= 1"));
        }
        if self.lit.templates == 0 {
            return Err(Error::config("lit.templates", "must be >= 1"));
        }
        if self.lit.iterations == 0 {
            return Err(Error::config("lit.iterations", "must be >= 1"));
        }
        if self.lit.dim < 2 {
            return Err(Error::config("lit.dim", "must be >= 2"));
        }
        if self.lit.input_dim != self.encoder.output_dim {
            return Err(Error::config("lit.input_dim", "must equal encoder.output_dim"));
        }
        if !(self.lit.template_std > 0.0 && self.lit.template_std.is_finite()) {
            return Err(Error::config("lit.template_std", "must be finite and > 0"));
        }
        if self.whitening.dim == 0 || self.whitening.dim > self.lit.dim.min(self.encoder.output_dim) {
            return Err(Error::config(
                "whitening.dim",
                "must lie in [1, min(lit.dim, encoder.output_dim)]",
            ));
        }
        self.loss.validate()?;
        self.train.validate()?;
        self.asmk.validate()?;
        if self.train.negatives == 0 {
            return Err(Error::config("train.negatives", "must be >= 1"));
        }
        if self.train.negatives >= (self.data.train.num_classes - 1) * self.data.train.images_per_class {
            return Err(Error::config(
                "train.negatives",
                "exceeds the negative pool of data.train",
            ));
        }
        if self.diagnose.redundancy_ks.is_empty() || self.diagnose.redundancy_ks.contains(&0) {
            return Err(Error::config("diagnose.redundancy_ks", "must be non-empty, each >= 1"));
        }
        if !(self.diagnose.scale > 0.0 && self.diagnose.scale <= 4.0) {
            return Err(Error::config("diagnose.scale", "must lie in (0, 4]"));
        }
        if self.ablate.budgets.is_empty() || self.ablate.budgets.contains(&0) {
            return Err(Error::config("ablate.budgets", "must be non-empty, each >= 1"));
        }
        if let Some(bad) = self.ablate.losses.iter().find(|l| parse_toggles(l).is_none()) {
            return Err(Error::config("ablate.losses", format!("unknown loss label '{bad}'")));
        }
        if self.ablate.match_tuples == 0 {
            return Err(Error::config("ablate.match_tuples", "must be >= 1"));
        }
        Ok(())
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            train: self.train.clone(),
            loss: self.loss.clone(),
            toggles: self.toggles,
            constraints: self.constraints,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical resolved config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// `$SUPERFEAT_RUN_ROOT/<hash>`, defaulting the root to `runs`.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(RUN_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| "runs".into());
        root.join(self.hash())
    }
}

fn toml_error_key(e: &toml::de::Error) -> String {
    e.span()
        .map(|s| format!("<byte {}>", s.start))
        .unwrap_or_else(|| "<file>".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str, ov: &[&str]) -> Result<RunConfig> {
        let ov: Vec<String> = ov.iter().map(|s| s.to_string()).collect();
        RunConfig::from_toml_with_overrides(text, &ov)
    }

    fn key_of(r: Result<RunConfig>) -> String {
        match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(resolve("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn roundtrip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(resolve(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        assert_eq!(key_of(resolve("[lit]\ntemplatez = 3\n", &[])), "lit.templatez");
        assert_eq!(key_of(resolve("", &["asmk.kk=3"])), "asmk.kk");
        assert_eq!(key_of(resolve("bogus = 1\n", &[])), "bogus");
    }

    #[test]
    fn bad_types_and_ranges_are_named() {
        assert_eq!(key_of(resolve("", &["lit.templates=\"many\""])), "lit.templates");
        assert_eq!(key_of(resolve("", &["loss.ratio_tau=1.5"])), "loss.ratio_tau");
        assert_eq!(key_of(resolve("", &["lit.input_dim=12"])), "lit.input_dim");
        assert_eq!(
            key_of(resolve("", &["ablate.losses=[\"super\",\"x\"]"])),
            "ablate.losses"
        );
        assert_eq!(key_of(resolve("", &["nonsense"])), "nonsense");
    }

    #[test]
    fn overrides_take_precedence_and_seed_propagates() {
        let cfg = resolve(
            "seed = 4\n[lit]\ntemplates = 8\n",
            &["lit.templates=12", "seed=9", "loss.ratio_direction=as-printed"],
        )
        .unwrap();
        assert_eq!(cfg.lit.templates, 12);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.encoder.seed, 19);
        assert_eq!(cfg.lit.seed, 20);
        assert_eq!(cfg.train.seed, 21);
        assert_eq!(cfg.data.eval.seed, 10);
        assert_eq!(cfg.loss.ratio_direction, crate::matching::RatioDirection::AsPrinted);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = resolve("", &["seed=1"]).unwrap();
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn toggle_labels() {
        let t = parse_toggles("super+attn").unwrap();
        assert!(t.use_super && t.use_attn && !t.use_global);
        assert_eq!(parse_toggles("global").unwrap().label(), "global");
        assert!(parse_toggles("attn+foo").is_none());
    }
}
