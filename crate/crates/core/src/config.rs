//! Run configuration: a TOML file with `[data]`, `[network]`, `[train]` and
//! `[eval]` tables. Key names are unique across tables so a bare
//! `key=value` override identifies its table.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{DatasetId, PatchOptions};
use crate::error::{Error, Result};
use crate::network::{IlcMode, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Learned homoscedastic weighting of both losses.
    Uncertainty,
    /// `L_main + λ·L_aux`.
    Static,
    /// Auxiliary head ignored.
    MainOnly,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Uncertainty => "uncertainty",
            LossMode::Static => "static",
            LossMode::MainOnly => "main_only",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncertainty" => Ok(LossMode::Uncertainty),
            "static" => Ok(LossMode::Static),
            "main_only" => Ok(LossMode::MainOnly),
            other => Err(Error::Config(format!("unknown loss_mode '{other}'"))),
        }
    }
}

/// What one unit of `total_epochs` / `lr_halving_period` counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochUnit {
    /// One optimisation step on one sampled batch.
    Step,
    /// Enough steps for the sampled patches to cover the training pixels once.
    Pass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetId,
    pub root: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub fold: usize,
    pub alpha: f64,
    pub beta: f64,
    pub patch_size: usize,
    pub augment: bool,
    pub arbitrary_rotation: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Drive,
            root: None,
            cache: None,
            fold: 0,
            alpha: 5.0,
            beta: 2.0,
            patch_size: 128,
            augment: true,
            arbitrary_rotation: false,
        }
    }
}

impl DataConfig {
    pub fn patch_options(&self) -> PatchOptions {
        PatchOptions {
            patch_size: self.patch_size,
            augment: self.augment,
            arbitrary_rotation: self.arbitrary_rotation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_stages: usize,
    pub channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub kernel_size: usize,
    pub downsample: usize,
    pub ilc_mode: IlcMode,
    /// Chosen from vessel widths of the training labels when unset.
    pub preeminent_layer: Option<usize>,
    /// Follows the preeminent layer's stage when unset.
    pub target_stage: Option<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let s = NetworkSpec::default();
        Self {
            num_stages: s.num_stages,
            channels: s.channels,
            convs_per_stage: s.convs_per_stage,
            kernel_size: s.kernel_size,
            downsample: s.downsample,
            ilc_mode: s.ilc_mode,
            preeminent_layer: None,
            target_stage: None,
        }
    }
}

impl NetworkConfig {
    /// Spec with the auxiliary head at `preeminent` (1-based layer, stage)
    /// unless the config pins it.
    pub fn to_spec(&self, preeminent: Option<(usize, usize)>) -> Result<NetworkSpec> {
        let mut spec = NetworkSpec {
            num_stages: self.num_stages,
            channels: self.channels.clone(),
            convs_per_stage: self.convs_per_stage,
            kernel_size: self.kernel_size,
            downsample: self.downsample,
            ilc_mode: self.ilc_mode,
            ..NetworkSpec::default()
        };
        let (layer, stage) = match (self.preeminent_layer, preeminent) {
            (Some(l), _) => {
                if l == 0 || l > spec.encoder_layers().len() {
                    return Err(Error::Config(format!("preeminent_layer {l} is outside the encoder")));
                }
                (l, spec.layer_stage(l))
            }
            (None, Some(p)) => p,
            (None, None) => (spec.preeminent_layer, 1),
        };
        spec.preeminent_layer = layer;
        spec.target_stage = self.target_stage.unwrap_or(stage);
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub total_epochs: u64,
    pub lr_halving_period: u64,
    pub epoch_unit: EpochUnit,
    pub batch_size: usize,
    pub loss_mode: LossMode,
    pub lambda: Option<f64>,
    pub use_weight_map: bool,
    pub seed: u64,
    /// Held-out evaluation every this many steps; 0 disables it.
    pub eval_interval: u64,
    /// Resumable checkpoint every this many steps.
    pub checkpoint_interval: u64,
    /// Global gradient-norm clip; off when unset.
    pub grad_clip: Option<f64>,
    pub bn_momentum: f64,
    /// Schedule divisor applied by `--reduced-schedule`.
    pub reduced_factor: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-10,
            total_epochs: 20_000,
            lr_halving_period: 5_000,
            epoch_unit: EpochUnit::Step,
            batch_size: 8,
            loss_mode: LossMode::Uncertainty,
            lambda: None,
            use_weight_map: true,
            seed: 0,
            eval_interval: 1_000,
            checkpoint_interval: 500,
            grad_clip: None,
            bn_momentum: 0.1,
            reduced_factor: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("bn_momentum", self.bn_momentum),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        if self.total_epochs == 0 || self.lr_halving_period == 0 || self.batch_size == 0 || self.reduced_factor == 0 {
            return Err(Error::Config(
                "total_epochs, lr_halving_period, batch_size and reduced_factor must be positive".into(),
            ));
        }
        match (self.loss_mode, self.lambda) {
            (LossMode::Static, None) => {
                return Err(Error::Config("loss_mode = static requires lambda".into()));
            }
            (_, Some(l)) if !(l > 0.0 && l.is_finite()) => {
                return Err(Error::Config(format!("lambda must be positive, got {l}")));
            }
            _ => {}
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Shortens the schedule by `reduced_factor`.
    pub fn reduced(&self) -> Self {
        let f = self.reduced_factor;
        Self {
            total_epochs: (self.total_epochs / f).max(1),
            lr_halving_period: (self.lr_halving_period / f).max(1),
            eval_interval: self.eval_interval / f,
            checkpoint_interval: (self.checkpoint_interval / f).max(1),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub fov_restricted: bool,
    pub per_image_auc: bool,
    pub window: usize,
    pub stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            fov_restricted: true,
            per_image_auc: false,
            window: 128,
            stride: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Every overridable key and the table holding it.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "dataset"),
    ("data", "root"),
    ("data", "cache"),
    ("data", "fold"),
    ("data", "alpha"),
    ("data", "beta"),
    ("data", "patch_size"),
    ("data", "augment"),
    ("data", "arbitrary_rotation"),
    ("network", "num_stages"),
    ("network", "channels"),
    ("network", "convs_per_stage"),
    ("network", "kernel_size"),
    ("network", "downsample"),
    ("network", "ilc_mode"),
    ("network", "preeminent_layer"),
    ("network", "target_stage"),
    ("train", "lr"),
    ("train", "adam_beta1"),
    ("train", "adam_beta2"),
    ("train", "adam_eps"),
    ("train", "total_epochs"),
    ("train", "lr_halving_period"),
    ("train", "epoch_unit"),
    ("train", "batch_size"),
    ("train", "loss_mode"),
    ("train", "lambda"),
    ("train", "use_weight_map"),
    ("train", "seed"),
    ("train", "eval_interval"),
    ("train", "checkpoint_interval"),
    ("train", "grad_clip"),
    ("train", "bn_momentum"),
    ("train", "reduced_factor"),
    ("eval", "threshold"),
    ("eval", "fov_restricted"),
    ("eval", "per_image_auc"),
    ("eval", "window"),
    ("eval", "stride"),
];

fn toml_err(e: impl fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Config = toml::from_str(s).map_err(toml_err)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(toml_err)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.eval.threshold)));
        }
        if self.eval.window == 0 || self.eval.stride == 0 || self.eval.stride > self.eval.window {
            return Err(Error::Config("window must be positive and stride in 1..=window".into()));
        }
        if !(self.data.alpha > 0.0 && self.data.beta > 0.0) {
            return Err(Error::Config("alpha and beta must be positive".into()));
        }
        if self.data.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        self.network.to_spec(None)?;
        Ok(())
    }

    /// Applies one `key=value` override. The value is read as a TOML value,
    /// falling back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let updated = self.assign(assignment)?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    fn assign(&self, assignment: &str) -> Result<Config> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let (section, _) = KEYS
            .iter()
            .find(|(_, k)| *k == key)
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed table has v"),
            Err(_) => toml::Value::String(raw.to_owned()),
        };
        let mut root = toml::Value::try_from(self).map_err(toml_err)?;
        let table = root
            .get_mut(*section)
            .and_then(toml::Value::as_table_mut)
            .expect("config serialises every table");
        table.insert(key.to_owned(), value);
        root.try_into()
            .map_err(|e| Error::Config(format!("bad value for {key}: {e}")))
    }

    /// Applies the overrides in order and validates the result once, so
    /// interdependent keys may be set together.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut updated = self.clone();
        for o in overrides {
            updated = updated.assign(o.as_ref())?;
        }
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Short digest identifying the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        let s = c.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&s).unwrap(), c);
    }

    #[test]
    fn every_serialised_key_is_overridable() {
        let mut c = Config::default();
        c.data.root = Some("r".into());
        c.data.cache = Some("c".into());
        c.network.preeminent_layer = Some(2);
        c.network.target_stage = Some(1);
        c.train.lambda = Some(1.0);
        c.train.grad_clip = Some(1.0);
        let v = toml::Value::try_from(&c).unwrap();
        let mut n = 0;
        for (section, table) in v.as_table().unwrap() {
            for key in table.as_table().unwrap().keys() {
                assert!(KEYS.contains(&(section.as_str(), key.as_str())), "{section}.{key}");
                n += 1;
            }
        }
        assert_eq!(n, KEYS.len());
    }

    #[test]
    fn overrides_parse_typed_and_bare_values() {
        let mut c = Config::default();
        c.set("loss_mode=static").unwrap_err();
        c.apply_overrides(&["loss_mode=static", "lambda=0.01"]).unwrap();
        assert_eq!(c.train.loss_mode, LossMode::Static);
        assert_eq!(c.train.lambda, Some(0.01));
        c.set("channels=[8, 16, 32, 64]").unwrap();
        assert_eq!(c.network.channels, vec![8, 16, 32, 64]);
        c.set("dataset=stare").unwrap();
        assert_eq!(c.data.dataset, DatasetId::Stare);
        c.set("ilc_mode=all_shared").unwrap();
        assert_eq!(c.network.ilc_mode, IlcMode::AllShared);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let mut c = Config::default();
        for bad in ["nonsense=1", "lr", "batch_size=-3", "lr=0", "threshold=1.5", "patch_size=\"big\""] {
            assert!(matches!(c.set(bad), Err(Error::Config(_))), "{bad}");
        }
        assert_eq!(c, Config::default());
        assert!(c.apply_overrides(&["lr=0.1", "nonsense=1"]).is_err());
        assert_eq!(c, Config::default());
    }

    #[test]
    fn unknown_table_keys_are_rejected() {
        assert!(Config::from_toml_str("[train]\nlearning_rate = 1.0\n").is_err());
        let c = Config::from_toml_str("[train]\nlr = 0.001\n[eval]\nthreshold = 0.4\n").unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.eval.threshold, 0.4);
        assert_eq!(c.data, DataConfig::default());
    }

    #[test]
    fn reduced_schedule_is_a_tenth() {
        let t = TrainConfig::default().reduced();
        assert_eq!((t.total_epochs, t.lr_halving_period), (2_000, 500));
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn spec_follows_preeminent_choice_unless_pinned() {
        let mut n = NetworkConfig::default();
        let s = n.to_spec(Some((6, 2))).unwrap();
        assert_eq!((s.preeminent_layer, s.target_stage), (6, 2));
        n.preeminent_layer = Some(1);
        let s = n.to_spec(Some((6, 2))).unwrap();
        assert_eq!((s.preeminent_layer, s.target_stage), (1, 1));
        n.target_stage = Some(3);
        assert_eq!(n.to_spec(None).unwrap().target_stage, 3);
    }
}
