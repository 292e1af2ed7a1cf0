//! Run configuration: one JSON document, overridable key by key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use xvol::data::PhantomConfig;
use xvol::fed::HARMONIZED_DIMS;
use xvol::net::{ArchitectureSpec, ModelVariant};
use xvol::saliency::TargetClass;
use xvol::train::TrainConfig;
use xvol::{Error, Precision, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Care,
    Gradcam,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV with `path,label,patient_id,eye`.
    pub manifest: Option<PathBuf>,
    /// Train / validation / test fractions, assigned per patient.
    pub split: [f64; 3],
    pub split_seed: u64,
    /// Resample every volume to this grid on load.
    pub resize: Option<[usize; 3]>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            split: [0.65, 0.15, 0.2],
            split_seed: 0,
            resize: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Stage-1 model; `{trial}` expands to the trial index. Defaults to
    /// `<out>/trial_<k>/model.xvm`.
    pub init: Option<String>,
    /// Fine-tune even when no trained stage-1 model is available.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyConfig {
    pub model: Option<PathBuf>,
    /// Single-channel OCTV volume.
    pub volume: Option<PathBuf>,
    pub method: Method,
    pub layer: Option<String>,
    pub class: TargetClass,
    pub axial: Option<usize>,
    pub coronal: Option<usize>,
    pub morphology: bool,
    /// Also write heatmap-over-volume slices.
    pub overlay: bool,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig {
            model: None,
            volume: None,
            method: Method::Both,
            layer: None,
            class: TargetClass::Predicted,
            axial: None,
            coronal: None,
            morphology: false,
            overlay: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    /// Input grid for FLOPs; the model's own `input_dims` when unset.
    pub dims: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedSection {
    pub rounds: usize,
    pub local_epochs: usize,
    /// One manifest per client.
    pub clients: Vec<PathBuf>,
    pub onh_fraction: f64,
    /// Common grid when client volumes differ in size.
    pub harmonize: [usize; 3],
}

impl Default for FedSection {
    fn default() -> Self {
        let d = xvol::fed::FedConfig::default();
        FedSection {
            rounds: d.rounds,
            local_epochs: d.local_epochs,
            clients: Vec::new(),
            onh_fraction: 0.5,
            harmonize: HARMONIZED_DIMS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: Precision,
    pub out: PathBuf,
    /// Run trials on separate threads.
    pub parallel: bool,
    pub model: ArchitectureSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub phantom: PhantomConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub saliency: SaliencyConfig,
    pub profile: ProfileConfig,
    pub fed: FedSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            precision: Precision::F32,
            out: PathBuf::from("runs"),
            parallel: false,
            model: ArchitectureSpec::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            phantom: PhantomConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            saliency: SaliencyConfig::default(),
            profile: ProfileConfig::default(),
            fed: FedSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: serde_json::Error| Error::Config(format!("{}: {e}", path.display()));
        let mut doc: Value = serde_json::from_str(&text).map_err(bad)?;
        // a variant without a placement takes that variant's default placement
        if let Some(model) = doc.get_mut("model").and_then(Value::as_object_mut) {
            if let (Some(v), false) = (model.get("variant"), model.contains_key("placement")) {
                let variant: ModelVariant = serde_json::from_value(v.clone()).map_err(bad)?;
                model.insert("placement".into(), serde_json::to_value(ArchitectureSpec::new(variant).placement)?);
            }
        }
        // likewise band geometry follows the phantom grid unless given
        if let Some(ph) = doc.get_mut("phantom").and_then(Value::as_object_mut) {
            if let Some(d) = ph.get("dims") {
                let dims: [usize; 3] = serde_json::from_value(d.clone()).map_err(bad)?;
                let derived = PhantomConfig::new(dims, 1, 0);
                ph.entry("band_center").or_insert(derived.band_center.into());
                ph.entry("band_thickness").or_insert(derived.band_thickness.into());
            }
        }
        serde_json::from_value(doc).map_err(bad)
    }

    /// Applies `key=value` with a dotted key naming an existing field.
    /// The value is parsed as JSON, falling back to a bare string. Setting
    /// `model.variant` or `phantom.dims` also resets the fields derived from
    /// them (placement, band geometry); later assignments may override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        match key {
            "model.variant" => self.model.placement = ArchitectureSpec::new(self.model.variant).placement,
            "phantom.dims" => {
                let derived = PhantomConfig::new(self.phantom.dims, 1, 0);
                self.phantom.band_center = derived.band_center;
                self.phantom.band_thickness = derived.band_thickness;
            }
            _ => {}
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Writes `config.<command>.json` into the output directory.
    pub fn echo(&self, command: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(format!("config.{command}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
