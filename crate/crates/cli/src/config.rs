//! Sectioned key-value experiment configuration.
//!
//! One text file drives every pipeline stage. Format: `[section]` headers,
//! `key = value` lines, `#` comments. Every key has a default; unknown
//! sections or keys are rejected so typos cannot silently fall back to
//! defaults. `--set section.key=value` overrides single keys.

use std::collections::BTreeMap;

use serde::Serialize;

use mapbert_core::error::{Error, Result};
use mapbert_core::eval::{AblationCell, MaskingStrategy, QuantizerChoice};
use mapbert_core::fingerprint::fingerprint;
use mapbert_core::map::CategoryPalette;
use mapbert_core::maskformer::{DecodeMode, MaskformerConfig};
use mapbert_core::quantizers::{BitVaeConfig, TrainConfig, VqConfig};
use mapbert_core::scenegen::SceneSpec;

fn config_err(section: &str, key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        section: section.to_string(),
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SceneSection {
    pub height: usize,
    pub width: usize,
    pub rooms_min: usize,
    pub rooms_max: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub object_min: usize,
    pub object_max: usize,
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BitVaeSection {
    pub bits: usize,
    pub patch: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    pub dec_blocks: usize,
    pub smooth_width: usize,
    pub lambda_bce: f64,
    pub lambda_iou: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VqSection {
    pub codes: usize,
    pub code_dim: usize,
    pub beta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MaskformerSection {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub p_obj: f64,
    pub decode: String,
    pub steps: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSection {
    pub quantizer: String,
    pub epochs_vae: usize,
    pub epochs_mt: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSection {
    pub trials: usize,
    pub maps: usize,
    pub theta_obs: f64,
    pub min_overlap: usize,
    pub mask_ratio: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PathsSection {
    pub dataset: String,
    pub checkpoints: String,
    pub reports: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblateSection {
    pub bitvae_bits: Vec<usize>,
    pub vq_codes: Vec<usize>,
    pub maskings: Vec<String>,
    pub train_maps: usize,
    pub eval_maps: usize,
    pub epochs_vae: usize,
    pub epochs_mt: usize,
    pub trials: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub scene: SceneSection,
    pub bitvae: BitVaeSection,
    pub vqvae: VqSection,
    pub maskformer: MaskformerSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
    pub ablate: AblateSection,
}

/// Raw parsed `[section] key = value` text.
struct RawConfig {
    values: BTreeMap<(String, String), String>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    config_err("", "", format!("line {}: malformed section header", lineno + 1))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err(
                    &section,
                    line,
                    format!("line {}: expected key = value", lineno + 1),
                ));
            };
            if section.is_empty() {
                return Err(config_err(
                    "",
                    key.trim(),
                    format!("line {}: key outside any section", lineno + 1),
                ));
            }
            values.insert(
                (section.clone(), key.trim().to_string()),
                value.trim().to_string(),
            );
        }
        Ok(RawConfig { values })
    }

    fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec.split_once('=').ok_or_else(|| {
            config_err("", spec, "override must look like section.key=value")
        })?;
        let (section, key) = path.split_once('.').ok_or_else(|| {
            config_err("", path, "override must look like section.key=value")
        })?;
        self.values.insert(
            (section.trim().to_string(), key.trim().to_string()),
            value.trim().to_string(),
        );
        Ok(())
    }
}

/// Typed reader that consumes keys and rejects leftovers.
struct Reader {
    values: BTreeMap<(String, String), String>,
}

impl Reader {
    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.values.remove(&(section.to_string(), key.to_string()))
    }

    fn usize_or(&mut self, section: &str, key: &str, default: usize) -> Result<usize> {
        match self.take(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| config_err(section, key, format!("{v:?} is not an integer"))),
        }
    }

    fn u64_or(&mut self, section: &str, key: &str, default: u64) -> Result<u64> {
        match self.take(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| config_err(section, key, format!("{v:?} is not an integer"))),
        }
    }

    fn f64_or(&mut self, section: &str, key: &str, default: f64) -> Result<f64> {
        match self.take(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| config_err(section, key, format!("{v:?} is not a number"))),
        }
    }

    fn string_or(&mut self, section: &str, key: &str, default: &str) -> String {
        self.take(section, key).unwrap_or_else(|| default.to_string())
    }

    fn usize_list_or(&mut self, section: &str, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.take(section, key) {
            None => Ok(default.to_vec()),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| config_err(section, key, format!("{s:?} is not an integer")))
                })
                .collect(),
        }
    }

    fn string_list_or(&mut self, section: &str, key: &str, default: &[&str]) -> Vec<String> {
        match self.take(section, key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(((section, key), _)) = self.values.into_iter().next() {
            return Err(config_err(&section, &key, "unknown configuration key"));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Parse config text with `--set` overrides, apply defaults, and
    /// validate cross-section consistency.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut raw = RawConfig::parse(text)?;
        for o in overrides {
            raw.apply_override(o)?;
        }
        let mut r = Reader { values: raw.values };

        let scene = SceneSection {
            height: r.usize_or("scene", "height", 64)?,
            width: r.usize_or("scene", "width", 64)?,
            rooms_min: r.usize_or("scene", "rooms_min", 3)?,
            rooms_max: r.usize_or("scene", "rooms_max", 6)?,
            objects_min: r.usize_or("scene", "objects_min", 0)?,
            objects_max: r.usize_or("scene", "objects_max", 2)?,
            object_min: r.usize_or("scene", "object_min", 2)?,
            object_max: r.usize_or("scene", "object_max", 5)?,
            count: r.usize_or("scene", "count", 512)?,
            seed: r.u64_or("scene", "seed", 7)?,
        };
        let bitvae = BitVaeSection {
            bits: r.usize_or("bitvae", "bits", 6)?,
            patch: r.usize_or("bitvae", "patch", 8)?,
            enc_width: r.usize_or("bitvae", "enc_width", 48)?,
            dec_width: r.usize_or("bitvae", "dec_width", 48)?,
            dec_blocks: r.usize_or("bitvae", "dec_blocks", 2)?,
            smooth_width: r.usize_or("bitvae", "smooth_width", 16)?,
            lambda_bce: r.f64_or("bitvae", "lambda_bce", 1.0)?,
            lambda_iou: r.f64_or("bitvae", "lambda_iou", 3.0)?,
        };
        let vqvae = VqSection {
            codes: r.usize_or("vqvae", "codes", 64)?,
            code_dim: r.usize_or("vqvae", "code_dim", 16)?,
            beta: r.f64_or("vqvae", "beta", 0.25)?,
        };
        let maskformer = MaskformerSection {
            dim: r.usize_or("maskformer", "dim", 128)?,
            layers: r.usize_or("maskformer", "layers", 4)?,
            heads: r.usize_or("maskformer", "heads", 4)?,
            mlp_ratio: r.usize_or("maskformer", "mlp_ratio", 4)?,
            p_obj: r.f64_or("maskformer", "p_obj", 0.5)?,
            decode: r.string_or("maskformer", "decode", "single"),
            steps: r.usize_or("maskformer", "steps", 4)?,
        };
        let train = TrainSection {
            quantizer: r.string_or("train", "quantizer", "bitvae"),
            epochs_vae: r.usize_or("train", "epochs_vae", 32)?,
            epochs_mt: r.usize_or("train", "epochs_mt", 30)?,
            batch: r.usize_or("train", "batch", 8)?,
            lr: r.f64_or("train", "lr", 3e-3)?,
            seed: r.u64_or("train", "seed", 7)?,
            val_fraction: r.f64_or("train", "val_fraction", 0.1)?,
        };
        let eval = EvalSection {
            trials: r.usize_or("eval", "trials", 1000)?,
            maps: r.usize_or("eval", "maps", 200)?,
            theta_obs: r.f64_or("eval", "theta_obs", 0.5)?,
            min_overlap: r.usize_or("eval", "min_overlap", 1)?,
            mask_ratio: r.f64_or("eval", "mask_ratio", 0.5)?,
            seed: r.u64_or("eval", "seed", 99)?,
        };
        let paths = PathsSection {
            dataset: r.string_or("paths", "dataset", "out/dataset.bin"),
            checkpoints: r.string_or("paths", "checkpoints", "out/checkpoints"),
            reports: r.string_or("paths", "reports", "out/reports"),
        };
        let ablate = AblateSection {
            bitvae_bits: r.usize_list_or("ablate", "bitvae_bits", &[5, 6, 7])?,
            vq_codes: r.usize_list_or("ablate", "vq_codes", &[32, 64, 128])?,
            maskings: r.string_list_or("ablate", "maskings", &["random", "object"]),
            train_maps: r.usize_or("ablate", "train_maps", 128)?,
            eval_maps: r.usize_or("ablate", "eval_maps", 64)?,
            epochs_vae: r.usize_or("ablate", "epochs_vae", 4)?,
            epochs_mt: r.usize_or("ablate", "epochs_mt", 6)?,
            trials: r.usize_or("ablate", "trials", 200)?,
        };
        r.finish()?;

        let cfg = ExperimentConfig {
            scene,
            bitvae,
            vqvae,
            maskformer,
            train,
            eval,
            paths,
            ablate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let p = self.bitvae.patch;
        if p == 0 || self.scene.height % p != 0 || self.scene.width % p != 0 {
            return Err(config_err(
                "bitvae",
                "patch",
                format!(
                    "patch {p} does not divide scene {}x{}",
                    self.scene.height, self.scene.width
                ),
            ));
        }
        if self.maskformer.dim % self.maskformer.heads != 0 {
            return Err(config_err(
                "maskformer",
                "heads",
                format!(
                    "dim {} not divisible by heads {}",
                    self.maskformer.dim, self.maskformer.heads
                ),
            ));
        }
        match self.train.quantizer.as_str() {
            "bitvae" | "vqvae" => {}
            other => {
                return Err(config_err(
                    "train",
                    "quantizer",
                    format!("{other:?} is not one of bitvae, vqvae"),
                ));
            }
        }
        match self.maskformer.decode.as_str() {
            "single" | "iterative" => {}
            other => {
                return Err(config_err(
                    "maskformer",
                    "decode",
                    format!("{other:?} is not one of single, iterative"),
                ));
            }
        }
        for m in &self.ablate.maskings {
            if m != "random" && m != "object" {
                return Err(config_err(
                    "ablate",
                    "maskings",
                    format!("{m:?} is not one of random, object"),
                ));
            }
        }
        if !self.vqvae.codes.is_power_of_two() {
            return Err(config_err(
                "vqvae",
                "codes",
                format!("{} is not a power of two", self.vqvae.codes),
            ));
        }
        Ok(())
    }

    /// Hash of the canonical serialized form of the resolved config.
    pub fn fingerprint(&self) -> String {
        fingerprint(&serde_json::to_string(self).expect("config serializes"))
    }

    pub fn palette(&self) -> CategoryPalette {
        CategoryPalette::default_indoor()
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            height: self.scene.height,
            width: self.scene.width,
            patch_size: self.bitvae.patch,
            palette: self.palette(),
            room_count: (self.scene.rooms_min, self.scene.rooms_max),
            objects_per_room: (self.scene.objects_min, self.scene.objects_max),
            object_size: (self.scene.object_min, self.scene.object_max),
            seed: self.scene.seed,
        }
    }

    pub fn bitvae_config(&self) -> BitVaeConfig {
        BitVaeConfig {
            bits: self.bitvae.bits,
            patch_size: self.bitvae.patch,
            channels: self.palette().len(),
            enc_width: self.bitvae.enc_width,
            dec_width: self.bitvae.dec_width,
            dec_blocks: self.bitvae.dec_blocks,
            smooth_width: self.bitvae.smooth_width,
            lambda_bce: self.bitvae.lambda_bce,
            lambda_iou: self.bitvae.lambda_iou,
        }
    }

    pub fn vq_config(&self) -> VqConfig {
        VqConfig {
            codes: self.vqvae.codes,
            code_dim: self.vqvae.code_dim,
            beta: self.vqvae.beta,
            patch_size: self.bitvae.patch,
            channels: self.palette().len(),
            enc_width: self.bitvae.enc_width,
            dec_width: self.bitvae.dec_width,
            dec_blocks: self.bitvae.dec_blocks,
            smooth_width: self.bitvae.smooth_width,
            lambda_bce: self.bitvae.lambda_bce,
            lambda_iou: self.bitvae.lambda_iou,
        }
    }

    /// Transformer config for a tokenizer with `bits` over the scene grid.
    pub fn maskformer_config(&self, bits: usize) -> MaskformerConfig {
        let decode = match self.maskformer.decode.as_str() {
            "iterative" => DecodeMode::Iterative {
                steps: self.maskformer.steps,
            },
            _ => DecodeMode::SinglePass,
        };
        MaskformerConfig {
            dim: self.maskformer.dim,
            layers: self.maskformer.layers,
            heads: self.maskformer.heads,
            bits,
            grid_rows: self.scene.height / self.bitvae.patch,
            grid_cols: self.scene.width / self.bitvae.patch,
            object_categories: self.palette().object_count(),
            p_obj: self.maskformer.p_obj,
            decode,
            mlp_ratio: self.maskformer.mlp_ratio,
        }
    }

    pub fn vae_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs_vae,
            batch: self.train.batch,
            lr: self.train.lr,
            seed: self.train.seed,
            val_fraction: self.train.val_fraction,
        }
    }

    pub fn mt_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs_mt,
            batch: self.train.batch,
            lr: self.train.lr,
            seed: self.train.seed,
            val_fraction: self.train.val_fraction,
        }
    }

    pub fn ablation_cells(&self) -> Vec<AblationCell> {
        let mut cells = Vec::new();
        let maskings: Vec<MaskingStrategy> = self
            .ablate
            .maskings
            .iter()
            .map(|m| match m.as_str() {
                "object" => MaskingStrategy::ObjectAware,
                _ => MaskingStrategy::Random,
            })
            .collect();
        for &bits in &self.ablate.bitvae_bits {
            for &masking in &maskings {
                cells.push(AblationCell {
                    quantizer: QuantizerChoice::BitVae { bits },
                    masking,
                });
            }
        }
        for &codes in &self.ablate.vq_codes {
            for &masking in &maskings {
                cells.push(AblationCell {
                    quantizer: QuantizerChoice::Vq { codes },
                    masking,
                });
            }
        }
        cells
    }
}
