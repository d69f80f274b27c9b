//! Flat `key = value` run settings.
//!
//! Values resolve in three layers: the built-in preset for the command's
//! stage, then the config file, then `--set` overrides and `--seed`. Only
//! the keys in [`KEYS`] are accepted.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::geometry::ThresholdMode;
use crate::grounder::GrounderDims;
use crate::optibox::{FeatureMask, RefinerDims};
use crate::synthdata::{SceneConfig, Split, SplitSizes};
use crate::textenc::PretrainConfig;
use crate::train::{Stage, TrainConfig};
use crate::{Error, Result};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("stage", "training stage; fixed by the subcommand"),
    (
        "seed",
        "seed for data generation, initialization and shuffling",
    ),
    ("lambda", "weight of the classification loss"),
    ("weight_decay", "L2 weight decay added to gradients"),
    ("lr", "initial learning rate"),
    (
        "milestones",
        "comma-separated 1-based epochs where the learning rate decays",
    ),
    ("decay", "learning-rate factor applied at each milestone"),
    ("batch", "batch size"),
    ("epochs", "epoch budget"),
    ("p", "annotation fraction of the labeled training images"),
    (
        "semantic",
        "include the semantic reconstruction loss (false: classification only)",
    ),
    (
        "pair_threshold",
        "minimum IoU of an independent regression pair",
    ),
    (
        "pair_mode",
        "inclusive or strict comparison against pair_threshold",
    ),
    ("margin", "ranking-loss margin for projection pretraining"),
    ("embed", "word embedding width"),
    ("hidden", "query encoder hidden size"),
    ("proj", "grounder projection width"),
    (
        "refine_hidden",
        "refiner local projection and shared layer width",
    ),
    (
        "mask",
        "refiner input mask: all, or -visual/-box/-query/-global combinations",
    ),
    ("masks", "comma-separated masks for the ablation report"),
    ("iterations", "refiner applications per box at inference"),
    ("refine", "eval also refines the selected boxes"),
    ("split", "split evaluated by eval and refine"),
    ("threshold", "IoU threshold for accuracy"),
    (
        "grid_lambda",
        "comma-separated lambda values for grid-search",
    ),
    (
        "grid_weight_decay",
        "comma-separated weight decay values for grid-search",
    ),
    ("scenes_train", "generated training scenes"),
    ("scenes_val", "generated validation scenes"),
    ("scenes_test", "generated test scenes"),
    ("objects_min", "fewest objects per scene"),
    ("objects_max", "most objects per scene"),
    ("extent", "scene width and height"),
    ("object_size_min", "smallest object side"),
    ("object_size_max", "largest object side"),
    ("proposals", "proposals per scene"),
    (
        "jitter",
        "relative jitter of the proposals around each object",
    ),
    ("jitter_copies", "jittered proposals per object"),
    ("feature_dim", "proposal feature width"),
    ("channels", "global feature map channels"),
    ("grid", "global feature map side length"),
    ("feature_noise", "noise added to proposal features"),
    ("instance_noise", "per-object noise on identity vectors"),
    (
        "world_seed",
        "seed of the shared attribute, noun and position vectors",
    ),
    (
        "dataset",
        "dataset JSON-lines path (default <out>/dataset.jsonl)",
    ),
    ("vocab", "vocabulary path (default <out>/vocab.txt)"),
    (
        "autoencoder",
        "autoencoder checkpoint (default <out>/autoencoder.ckpt)",
    ),
    (
        "projections",
        "projection checkpoint (default <out>/projections.ckpt)",
    ),
    (
        "grounder",
        "grounder checkpoint (default <out>/grounder.ckpt)",
    ),
    ("optibox", "refiner checkpoint (default <out>/optibox.ckpt)"),
    (
        "predictions",
        "predictions to evaluate instead of running the models",
    ),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Desk,
    /// Full-size dimensions and schedules; too large for desk training.
    Paper,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn schedule_of(stage: Stage, preset: Preset) -> (TrainConfig, Option<PretrainConfig>) {
    let desk = preset == Preset::Desk;
    match stage {
        Stage::Autoencoder => {
            let p = if desk {
                PretrainConfig::desk_autoencoder()
            } else {
                PretrainConfig::paper_autoencoder()
            };
            (TrainConfig::desk_grounder(), Some(p))
        }
        Stage::Projections => {
            let p = if desk {
                PretrainConfig::desk_projections()
            } else {
                PretrainConfig::paper_projections()
            };
            (TrainConfig::desk_grounder(), Some(p))
        }
        Stage::Grounder if desk => (TrainConfig::desk_grounder(), None),
        Stage::Grounder => (TrainConfig::paper_grounder(), None),
        Stage::Optibox if desk => (TrainConfig::desk_optibox(), None),
        Stage::Optibox => (TrainConfig::paper_optibox(), None),
        Stage::OptiboxIndependent if desk => (TrainConfig::desk_optibox_independent(), None),
        Stage::OptiboxIndependent => (TrainConfig::paper_optibox_independent(), None),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub preset: Preset,
    pub stage: Stage,
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Built-in defaults of `preset` for a command running `stage`.
    pub fn new(preset: Preset, stage: Stage) -> Self {
        let (tc, pre) = schedule_of(stage, preset);
        let scene = SceneConfig::default();
        let desk = preset == Preset::Desk;
        let mut v = BTreeMap::new();
        let mut put = |k: &str, val: String| {
            v.insert(k.to_string(), val);
        };
        put("stage", stage.to_string());
        put("seed", "0".into());
        put("lambda", tc.lambda.to_string());
        put(
            "weight_decay",
            pre.as_ref()
                .map_or(tc.weight_decay, |p| p.weight_decay)
                .to_string(),
        );
        put("lr", pre.as_ref().map_or(tc.lr, |p| p.lr).to_string());
        put(
            "milestones",
            join(pre.as_ref().map_or(&tc.milestones, |p| &p.milestones)),
        );
        put(
            "decay",
            pre.as_ref().map_or(tc.decay, |p| p.decay).to_string(),
        );
        put(
            "batch",
            pre.as_ref().map_or(tc.batch, |p| p.batch).to_string(),
        );
        put(
            "epochs",
            pre.as_ref().map_or(tc.epochs, |p| p.epochs).to_string(),
        );
        put("p", tc.p.to_string());
        put("semantic", tc.semantic.to_string());
        put("pair_threshold", tc.pair_threshold.to_string());
        put("pair_mode", "inclusive".into());
        put("margin", "0.1".into());
        put("embed", if desk { "32" } else { "200" }.into());
        put("hidden", if desk { "64" } else { "512" }.into());
        put("proj", if desk { "64" } else { "128" }.into());
        put("refine_hidden", if desk { "64" } else { "512" }.into());
        put("mask", "all".into());
        put("masks", "all,-visual,-box,-query,-global".into());
        put("iterations", "1".into());
        put("refine", "true".into());
        put("split", "test".into());
        put("threshold", "0.5".into());
        put("grid_lambda", "1,10,100".into());
        put("grid_weight_decay", "0.01,0.0005".into());
        put("scenes_train", "500".into());
        put("scenes_val", "100".into());
        put("scenes_test", "100".into());
        put("objects_min", scene.objects_min.to_string());
        put("objects_max", scene.objects_max.to_string());
        put("extent", scene.extent.to_string());
        put("object_size_min", scene.object_size_min.to_string());
        put("object_size_max", scene.object_size_max.to_string());
        put("proposals", scene.proposals.to_string());
        put("jitter", scene.jitter.to_string());
        put("jitter_copies", scene.jitter_copies.to_string());
        put(
            "feature_dim",
            if desk { scene.feature_dim } else { 2048 }.to_string(),
        );
        put(
            "channels",
            if desk { scene.channels } else { 1024 }.to_string(),
        );
        put("grid", if desk { scene.grid } else { 10 }.to_string());
        put("feature_noise", scene.feature_noise.to_string());
        put("instance_noise", scene.instance_noise.to_string());
        put("world_seed", scene.world_seed.to_string());
        for k in [
            "dataset",
            "vocab",
            "autoencoder",
            "projections",
            "grounder",
            "optibox",
            "predictions",
        ] {
            put(k, String::new());
        }
        Settings {
            preset,
            stage,
            values: v,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        if key == "stage" && value != self.stage.to_string() {
            return Err(Error::Config(format!(
                "stage {value:?} does not match the command's stage {}",
                self.stage
            )));
        }
        self.values
            .insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies one `KEY=VALUE` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        self.set(k.trim(), v)
    }

    /// Applies a config file: `key = value` lines, `#` comments.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, "expected key = value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key} = {v:?} is not a valid value")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parsed(key)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parsed(key)
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("{key}: {s:?} is not a valid value")))
            })
            .collect()
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.list(key)
    }

    /// The configured path, or `<out>/<default>` when unset.
    pub fn path(&self, key: &str, out: &Path, default: &str) -> PathBuf {
        match self.get(key) {
            "" => out.join(default),
            p => PathBuf::from(p),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("seed")
    }

    pub fn threshold_mode(&self) -> Result<ThresholdMode> {
        match self.get("pair_mode") {
            "inclusive" => Ok(ThresholdMode::Inclusive),
            "strict" => Ok(ThresholdMode::Strict),
            m => Err(Error::Config(format!(
                "pair_mode {m:?}: expected inclusive or strict"
            ))),
        }
    }

    pub fn split(&self) -> Result<Split> {
        match self.get("split") {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            s => Err(Error::Config(format!(
                "split {s:?}: expected train, val or test"
            ))),
        }
    }

    pub fn mask(&self) -> Result<FeatureMask> {
        FeatureMask::parse(self.get("mask"))
    }

    pub fn masks(&self) -> Result<Vec<FeatureMask>> {
        self.get("masks")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(FeatureMask::parse)
            .collect()
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        let cfg = SceneConfig {
            objects_min: self.usize("objects_min")?,
            objects_max: self.usize("objects_max")?,
            extent: self.f64("extent")?,
            object_size_min: self.f64("object_size_min")?,
            object_size_max: self.f64("object_size_max")?,
            proposals: self.usize("proposals")?,
            jitter: self.f64("jitter")?,
            jitter_copies: self.usize("jitter_copies")?,
            feature_dim: self.usize("feature_dim")?,
            channels: self.usize("channels")?,
            grid: self.usize("grid")?,
            feature_noise: self.f64("feature_noise")?,
            instance_noise: self.f64("instance_noise")?,
            world_seed: self.u64("world_seed")?,
            ..SceneConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split_sizes(&self) -> Result<SplitSizes> {
        Ok(SplitSizes {
            train: self.usize("scenes_train")?,
            val: self.usize("scenes_val")?,
            test: self.usize("scenes_test")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            stage: self.stage,
            lambda: self.f64("lambda")?,
            weight_decay: self.f64("weight_decay")?,
            lr: self.f64("lr")?,
            milestones: self.list("milestones")?,
            decay: self.f64("decay")?,
            batch: self.usize("batch")?,
            epochs: self.usize("epochs")?,
            p: self.f64("p")?,
            seed: self.seed()?,
            semantic: self.bool("semantic")?,
            pair_threshold: self.f64("pair_threshold")?,
            pair_mode: self.threshold_mode()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let t = TrainConfig {
            lambda: 0.0,
            ..self.train_config()?
        };
        Ok(PretrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            batch: t.batch,
            milestones: t.milestones,
            decay: t.decay,
            weight_decay: t.weight_decay,
            seed: t.seed,
        })
    }

    pub fn grounder_dims(&self, vocab: usize, visual: usize) -> Result<GrounderDims> {
        Ok(GrounderDims {
            vocab,
            embed: self.usize("embed")?,
            query: self.usize("hidden")?,
            visual,
            proj: self.usize("proj")?,
        })
    }

    pub fn refiner_dims(
        &self,
        vocab: usize,
        visual: usize,
        channels: usize,
    ) -> Result<RefinerDims> {
        Ok(RefinerDims {
            vocab,
            embed: self.usize("embed")?,
            query: self.usize("hidden")?,
            visual,
            channels,
            hidden: self.usize("refine_hidden")?,
        })
    }

    /// Every resolved value as sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}
