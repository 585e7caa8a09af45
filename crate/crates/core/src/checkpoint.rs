//! Versioned structured-text checkpoints of parameter sets.
//!
//! A checkpoint stores the model kind with enough architecture metadata to
//! rebuild it, followed by every parameter by name, shape and values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::classifier::LinearHead;
use crate::detector::{DetectorArch, DetectorModel};
use crate::encoder::{Encoder, EncoderKind};
use crate::error::{Error, Result};
use crate::joint::JointModel;
use crate::nn::{ParamSet, Tensor};

pub const FORMAT: &str = "ndc-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Architecture metadata, tagged by model kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelMeta {
    Detector {
        arch: DetectorArch,
        backbone: BackboneSpec,
    },
    Encoder {
        encoder_kind: EncoderKind,
        frozen: bool,
        stride: usize,
        backbone: BackboneSpec,
    },
    LinearHead {
        in_features: usize,
        classes: usize,
    },
    Joint {
        backbone: BackboneSpec,
        classes: usize,
    },
}

impl ModelMeta {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelMeta::Detector { .. } => "detector",
            ModelMeta::Encoder { .. } => "encoder",
            ModelMeta::LinearHead { .. } => "linear-head",
            ModelMeta::Joint { .. } => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelMeta,
    pub params: Vec<ParamRecord>,
}

fn records<'a>(sets: impl IntoIterator<Item = &'a ParamSet>) -> Vec<ParamRecord> {
    sets.into_iter()
        .flat_map(|s| s.iter())
        .map(|(name, p)| ParamRecord {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect()
}

impl Checkpoint {
    fn new(model: ModelMeta, params: Vec<ParamRecord>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model,
            params,
        }
    }

    pub fn from_detector(m: &DetectorModel) -> Self {
        Self::new(
            ModelMeta::Detector {
                arch: m.arch,
                backbone: m.backbone.spec.clone(),
            },
            records([&m.backbone.params, &m.heads.params]),
        )
    }

    pub fn from_encoder(e: &Encoder) -> Self {
        Self::new(
            ModelMeta::Encoder {
                encoder_kind: e.kind,
                frozen: e.frozen,
                stride: e.stride(),
                backbone: e.backbone.spec.clone(),
            },
            records([&e.backbone.params]),
        )
    }

    pub fn from_head(h: &LinearHead) -> Self {
        Self::new(
            ModelMeta::LinearHead {
                in_features: h.in_features,
                classes: h.classes,
            },
            records([&h.params]),
        )
    }

    pub fn from_joint(m: &JointModel) -> Self {
        Self::new(
            ModelMeta::Joint {
                backbone: m.backbone.spec.clone(),
                classes: m.classes,
            },
            records([&m.backbone.params, &m.heads.params, &m.class_params]),
        )
    }

    /// Parameter set holding every record.
    fn param_set(&self) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for r in &self.params {
            let t = Tensor::new(r.shape.clone(), r.data.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", r.name)))?;
            set.add(r.name.clone(), t)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(set)
    }

    /// Copies stored values into `targets`, which must cover all records.
    fn fill(&self, targets: &mut [&mut ParamSet]) -> Result<()> {
        let stored = self.param_set()?;
        let expected: usize = targets.iter().map(|t| t.len()).sum();
        if expected != stored.len() {
            return Err(Error::Checkpoint(format!(
                "expected {expected} parameters, found {}",
                stored.len()
            )));
        }
        for t in targets.iter_mut() {
            let mut part = ParamSet::new();
            for (name, _) in t.iter() {
                let id = stored
                    .find(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
                part.add(name, stored.value(id).clone())?;
            }
            t.load_values(&part)?;
        }
        Ok(())
    }

    fn wrong_kind(&self, want: &str) -> Error {
        Error::Checkpoint(format!("expected a {want} checkpoint, found {}", self.model.kind()))
    }

    pub fn to_detector(&self) -> Result<DetectorModel> {
        let ModelMeta::Detector { arch, backbone } = &self.model else {
            return Err(self.wrong_kind("detector"));
        };
        let mut m = DetectorModel::with_backbone_spec(*arch, backbone.clone(), 0)?;
        self.fill(&mut [&mut m.backbone.params, &mut m.heads.params])?;
        Ok(m)
    }

    pub fn to_encoder(&self) -> Result<Encoder> {
        let ModelMeta::Encoder {
            encoder_kind,
            frozen,
            stride,
            backbone,
        } = &self.model
        else {
            return Err(self.wrong_kind("encoder"));
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let bb = crate::backbone::Backbone::new(backbone.clone(), "backbone", &mut rng)?;
        if bb.stride() != *stride {
            return Err(Error::Checkpoint(format!(
                "stored stride {stride} disagrees with backbone stride {}",
                bb.stride()
            )));
        }
        let mut e = Encoder {
            kind: *encoder_kind,
            frozen: *frozen,
            backbone: bb,
        };
        self.fill(&mut [&mut e.backbone.params])?;
        Ok(e)
    }

    pub fn to_head(&self) -> Result<LinearHead> {
        let ModelMeta::LinearHead { in_features, classes } = &self.model else {
            return Err(self.wrong_kind("linear-head"));
        };
        let mut h = LinearHead::new(*in_features, *classes, 0)?;
        self.fill(&mut [&mut h.params])?;
        Ok(h)
    }

    pub fn to_joint(&self) -> Result<JointModel> {
        let ModelMeta::Joint { backbone, classes } = &self.model else {
            return Err(self.wrong_kind("joint"));
        };
        let mut m = JointModel::new(backbone.clone(), *classes, 0)?;
        self.fill(&mut [&mut m.backbone.params, &mut m.heads.params, &mut m.class_params])?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if c.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", c.format)));
        }
        if c.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
