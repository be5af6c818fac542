//! Experiment configuration: flat key=value files with CLI flag overrides
//! (flags win). The resolved map is validated before any compute and
//! serialized verbatim into every run's `run.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use earlycrop_core::criteria::Criterion;
use earlycrop_core::data::{self, Dataset, Task};
use earlycrop_core::error::{CoreError, Result};
use earlycrop_core::lifecycle::PipelineConfig;
use earlycrop_core::model::{Activation, ConvSpec, Head, Model};
use earlycrop_core::rng::Rng;

#[derive(Clone, Debug, serde::Serialize)]
pub struct ExperimentConfig {
    /// The resolved key=value map, exactly as configured.
    pub raw: BTreeMap<String, String>,
    pub dataset: String,
    pub dataset_n: usize,
    pub dataset_noise: f64,
    pub dataset_path: Option<PathBuf>,
    pub dataset_labels: Option<PathBuf>,
    pub model: String,
    pub hidden: Vec<usize>,
    pub activation: String,
    pub image: Option<(usize, usize, usize)>,
    pub convs: Vec<(usize, usize, usize)>,
    pub pipeline: PipelineConfig,
    pub out: PathBuf,
    pub jobs: usize,
    pub rho_list: Vec<f64>,
    pub seeds: Vec<u64>,
    pub modes: Vec<String>,
    pub prune_epochs: Vec<usize>,
    pub post_epochs: usize,
}

fn parse_key<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse::<T>()
            .map_err(|e| CoreError::Config(format!("bad value for {key}={v:?}: {e}"))),
    }
}

fn parse_list<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(vec![]),
        Some(v) if v.trim().is_empty() => Ok(vec![]),
        Some(v) => v
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<T>()
                    .map_err(|e| CoreError::Config(format!("bad element {x:?} in {key}: {e}")))
            })
            .collect(),
    }
}

const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "dataset.n",
    "dataset.noise",
    "dataset.path",
    "dataset.labels",
    "model",
    "model.hidden",
    "model.activation",
    "model.image",
    "model.convs",
    "mode",
    "criterion",
    "rho",
    "it",
    "th",
    "epochs",
    "lr",
    "optimizer",
    "seed",
    "batch_size",
    "scoring_batch",
    "detector.normalization",
    "detector.max_epoch",
    "steps_between_iterations",
    "include_biases",
    "out",
    "jobs",
    "rho_list",
    "seeds",
    "modes",
    "prune_epochs",
    "post_epochs",
];

impl ExperimentConfig {
    /// Resolve a config file (optional) plus override pairs; overrides win.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CoreError::Config(format!("cannot read config {path:?}: {e}")))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CoreError::Config(format!("config line {} has no '=': {line:?}", lineno + 1))
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        Self::from_map(map)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CoreError::Config(format!("unknown config key {key:?}")));
            }
        }

        let mode: String = parse_key(&map, "mode", "crop-u".to_string())?;
        let rho: f64 = parse_key(&map, "rho", 0.9)?;
        let epochs: usize = parse_key(&map, "epochs", 50)?;
        let seed: u64 = parse_key(&map, "seed", 0)?;

        let mut pipeline = PipelineConfig::new(&mode, rho, epochs, seed);
        pipeline.criterion = map
            .get("criterion")
            .map(|s| s.parse::<Criterion>())
            .transpose()?
            .unwrap_or(Criterion::Crop);
        pipeline.it = parse_key(&map, "it", 1usize)?;
        pipeline.th_override = map
            .get("th")
            .map(|s| s.parse::<f64>().map_err(|e| CoreError::Config(format!("bad th: {e}"))))
            .transpose()?;
        pipeline.lr = parse_key(&map, "lr", 2e-3)?;
        pipeline.optimizer = map
            .get("optimizer")
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or(pipeline.optimizer);
        pipeline.batch_size = parse_key(&map, "batch_size", 128usize)?;
        pipeline.scoring_batch = parse_key(&map, "scoring_batch", 256usize)?;
        pipeline.detector_norm = map
            .get("detector.normalization")
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or(pipeline.detector_norm);
        pipeline.detector_max_epoch = map
            .get("detector.max_epoch")
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|e| CoreError::Config(format!("bad detector.max_epoch: {e}")))
            })
            .transpose()?;
        pipeline.steps_between_iterations = parse_key(&map, "steps_between_iterations", 0usize)?;
        pipeline.include_biases = parse_key(&map, "include_biases", false)?;

        let image = map
            .get("model.image")
            .map(|s| {
                let dims: Vec<usize> = s
                    .split(['x', ','])
                    .map(|d| {
                        d.trim()
                            .parse()
                            .map_err(|e| CoreError::Config(format!("bad model.image: {e}")))
                    })
                    .collect::<Result<_>>()?;
                if dims.len() != 3 {
                    return Err(CoreError::Config("model.image needs HxWxC".into()));
                }
                Ok((dims[0], dims[1], dims[2]))
            })
            .transpose()?;
        let convs = map
            .get("model.convs")
            .map(|s| {
                s.split(',')
                    .map(|spec| {
                        let f: Vec<&str> = spec.trim().split(':').collect();
                        if f.len() != 3 {
                            return Err(CoreError::Config(format!(
                                "conv spec {spec:?} must be out:kernel:stride"
                            )));
                        }
                        Ok((
                            f[0].parse().map_err(|e| CoreError::Config(format!("bad conv: {e}")))?,
                            f[1].parse().map_err(|e| CoreError::Config(format!("bad conv: {e}")))?,
                            f[2].parse().map_err(|e| CoreError::Config(format!("bad conv: {e}")))?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?
            .unwrap_or_default();

        let cfg = ExperimentConfig {
            dataset: parse_key(&map, "dataset", "two_moons".to_string())?,
            dataset_n: parse_key(&map, "dataset.n", 1000usize)?,
            dataset_noise: parse_key(&map, "dataset.noise", 0.1)?,
            dataset_path: map.get("dataset.path").map(PathBuf::from),
            dataset_labels: map.get("dataset.labels").map(PathBuf::from),
            model: parse_key(&map, "model", "mlp".to_string())?,
            hidden: {
                let h: Vec<usize> = parse_list(&map, "model.hidden")?;
                if h.is_empty() { vec![64, 64] } else { h }
            },
            activation: parse_key(&map, "model.activation", "relu".to_string())?,
            image,
            convs,
            pipeline,
            out: PathBuf::from(parse_key(&map, "out", "results".to_string())?),
            jobs: parse_key(&map, "jobs", 1usize)?,
            rho_list: parse_list(&map, "rho_list")?,
            seeds: parse_list(&map, "seeds")?,
            modes: {
                let m: Vec<String> = parse_list(&map, "modes")?;
                if m.is_empty() { vec![mode.clone()] } else { m }
            },
            prune_epochs: parse_list(&map, "prune_epochs")?,
            post_epochs: parse_key(&map, "post_epochs", 10usize)?,
            raw: map,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        match self.activation.as_str() {
            "relu" | "tanh" => {}
            other => return Err(CoreError::Config(format!("unknown activation {other:?}"))),
        }
        match self.model.as_str() {
            "mlp" => {}
            "cnn" => {
                if self.image.is_none() || self.convs.is_empty() {
                    return Err(CoreError::Config(
                        "cnn model needs model.image and model.convs".into(),
                    ));
                }
            }
            other => return Err(CoreError::Config(format!("unknown model {other:?}"))),
        }
        for m in &self.modes {
            let _: earlycrop_core::lifecycle::ModeSpec = m.parse()?;
        }
        if self.jobs == 0 {
            return Err(CoreError::Config("jobs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn activation_enum(&self) -> Activation {
        match self.activation.as_str() {
            "tanh" => Activation::Tanh,
            _ => Activation::Relu,
        }
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        match self.dataset.as_str() {
            "two_moons" | "spirals" | "sine_regression" => data::make_synthetic(
                &self.dataset,
                self.dataset_n,
                self.dataset_noise,
                self.pipeline.seed,
            ),
            "idx" => {
                let images = self.dataset_path.as_ref().ok_or_else(|| {
                    CoreError::Config("idx dataset needs dataset.path (images)".into())
                })?;
                let labels = self.dataset_labels.as_ref().ok_or_else(|| {
                    CoreError::Config("idx dataset needs dataset.labels".into())
                })?;
                data::load_idx(images, labels, self.pipeline.seed)
            }
            "csv" => {
                let path = self.dataset_path.as_ref().ok_or_else(|| {
                    CoreError::Config("csv dataset needs dataset.path".into())
                })?;
                data::load_csv(path, Task::Classification(0), self.pipeline.seed)
            }
            "csv_regression" => {
                let path = self.dataset_path.as_ref().ok_or_else(|| {
                    CoreError::Config("csv dataset needs dataset.path".into())
                })?;
                data::load_csv(path, Task::Regression, self.pipeline.seed)
            }
            other => Err(CoreError::Config(format!("unknown dataset {other:?}"))),
        }
    }

    /// Build the model for a dataset; the init stream derives from `seed`.
    pub fn build_model(&self, dataset: &Dataset, seed: u64) -> Result<Model> {
        let head = match dataset.task {
            Task::Classification(_) => Head::Classification,
            Task::Regression => Head::Regression,
        };
        let out_dim = dataset.output_dim();
        let mut rng = Rng::derive(seed, 0x0DE1);
        match self.model.as_str() {
            "mlp" => Model::mlp(
                dataset.features(),
                &self.hidden,
                out_dim,
                self.activation_enum(),
                head,
                &mut rng,
            ),
            "cnn" => {
                let image = self.image.expect("validated");
                if image.0 * image.1 * image.2 != dataset.features() {
                    return Err(CoreError::Config(format!(
                        "model.image {:?} does not match dataset features {}",
                        image,
                        dataset.features()
                    )));
                }
                let convs: Vec<ConvSpec> = self
                    .convs
                    .iter()
                    .map(|&(out_channels, kernel, stride)| ConvSpec {
                        out_channels,
                        kernel,
                        stride,
                    })
                    .collect();
                Model::cnn(
                    image,
                    &convs,
                    &self.hidden,
                    out_dim,
                    self.activation_enum(),
                    head,
                    &mut rng,
                )
            }
            _ => unreachable!("validated"),
        }
    }
}
