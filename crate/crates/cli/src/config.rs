//! Resolution of defaults, JSON config files and command-line flags.

use std::path::{Path, PathBuf};

use oescn::data::{load_dataset, synth_dataset, Dataset, SynthSpec};
use oescn::model::{ModelConfig, Variant};
use oescn::training::TrainConfig;
use oescn::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperShape,
    BandStructured,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Dims {
    pub n_classes: usize,
    pub trials_per_class: usize,
    pub channels: usize,
    pub len: usize,
    pub rate_hz: f64,
}

impl Preset {
    pub fn spec(self) -> SynthSpec {
        match self {
            Preset::Desk => SynthSpec::desk(),
            Preset::PaperShape => SynthSpec::paper_shape(),
            Preset::BandStructured => SynthSpec::band_structured_desk(),
        }
    }

    /// Rebuilds the preset's signature family for other dimensions.
    pub fn spec_with(self, d: Dims) -> SynthSpec {
        match self {
            Preset::Desk | Preset::PaperShape => {
                SynthSpec::with_default_signatures(d.n_classes, d.trials_per_class, d.channels, d.len, d.rate_hz)
            }
            Preset::BandStructured => {
                let mut s = SynthSpec::band_structured(d.n_classes, d.trials_per_class, d.channels, d.len);
                s.rate_hz = d.rate_hz;
                s
            }
        }
    }

    pub fn train_defaults(self) -> TrainConfig {
        match self {
            Preset::PaperShape => TrainConfig::default(),
            Preset::Desk | Preset::BandStructured => TrainConfig::desk(),
        }
    }
}

/// Sections of a JSON config file; each is merged over the defaults.
#[derive(Debug, Default)]
pub struct FileConfig {
    pub synth: Option<Value>,
    pub model: Option<Value>,
    pub train: Option<Value>,
}

pub fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))?;
    let Value::Object(mut map) = value else {
        return Err(Error::InvalidArgument("config file must hold a JSON object".into()));
    };
    let cfg = FileConfig {
        synth: map.remove("synth"),
        model: map.remove("model"),
        train: map.remove("train"),
    };
    if let Some(key) = map.keys().next() {
        return Err(Error::InvalidArgument(format!(
            "unknown config section {key:?} (expected synth, model, train)"
        )));
    }
    Ok(cfg)
}

/// Recursively overlays `top` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t.clone(),
    }
}

/// `defaults`, overlaid by a file section, overlaid by flag values.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Value>, flags: Map<String, Value>, what: &str) -> Result<T> {
    let mut v = serde_json::to_value(defaults).expect("defaults serialise");
    if let Some(f) = file {
        merge(&mut v, f);
    }
    merge(&mut v, &Value::Object(flags));
    serde_json::from_value(v).map_err(|e| Error::InvalidArgument(format!("{what} config: {e}")))
}

/// Inserts `key` into a flag map when the flag was given.
pub fn put<V: Serialize>(map: &mut Map<String, Value>, key: &str, value: Option<V>) {
    if let Some(v) = value {
        map.insert(key.into(), serde_json::to_value(v).expect("flag serialises"));
    }
}

pub fn synth_spec(preset: Preset, file: Option<&Value>, flags: Map<String, Value>) -> Result<SynthSpec> {
    let base = preset.spec();
    let dims: Dims = {
        let dims = dims_of(&base);
        let mut v = serde_json::to_value(dims).expect("dims serialise");
        for layer in file.into_iter().chain(std::iter::once(&Value::Object(flags.clone()))) {
            if let Value::Object(m) = layer {
                for k in ["n_classes", "trials_per_class", "channels", "len", "rate_hz"] {
                    if let Some(x) = m.get(k) {
                        v[k] = x.clone();
                    }
                }
            }
        }
        dims_from(&v)?
    };
    let spec = if dims == dims_of(&base) { base } else { preset.spec_with(dims) };
    let spec = layered(&spec, file, flags, "synth")?;
    spec.validate()?;
    Ok(spec)
}

fn dims_of(s: &SynthSpec) -> Dims {
    Dims {
        n_classes: s.n_classes,
        trials_per_class: s.trials_per_class,
        channels: s.channels,
        len: s.len,
        rate_hz: s.rate_hz,
    }
}

fn dims_from(v: &Value) -> Result<Dims> {
    let int = |k: &str| {
        v[k].as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("synth {k} must be a non-negative integer")))
    };
    Ok(Dims {
        n_classes: int("n_classes")?,
        trials_per_class: int("trials_per_class")?,
        channels: int("channels")?,
        len: int("len")?,
        rate_hz: v["rate_hz"]
            .as_f64()
            .ok_or_else(|| Error::InvalidArgument("synth rate_hz must be a number".into()))?,
    })
}

/// Where a command's trials come from.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    File { path: PathBuf },
    Synthetic { preset: Preset, seed: u64, spec: SynthSpec },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::File { path } => load_dataset(path),
            DataSource::Synthetic { spec, seed, .. } => synth_dataset(spec, *seed),
        }
    }
}

pub fn model_config(dataset: &Dataset, file: Option<&Value>, flags: Map<String, Value>) -> Result<ModelConfig> {
    let base = ModelConfig::new(Variant::Oescn, dataset.channels, dataset.n_classes);
    let cfg: ModelConfig = layered(&base, file, flags, "model")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config(defaults: TrainConfig, file: Option<&Value>, flags: Map<String, Value>) -> Result<TrainConfig> {
    let cfg: TrainConfig = layered(&defaults, file, flags, "train")?;
    cfg.validate()?;
    Ok(cfg)
}
