//! Dataset construction: saturation-level labeling, volume slicing,
//! balancing augmentation, synthetic long-tailed generation, and image-folder
//! ingest.

mod augment;
mod folder;
mod synth;

pub use augment::{augment_once, balance_augment, derive_rng, resize_bilinear, AugmentPolicy};
pub use folder::{load_image_folder, read_volume, save_dataset_folder, write_volume};
pub use synth::{stripe_energy, synth_longtail, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;

/// Oxygen-saturation level bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SaO2Class {
    Low,
    BorderlineLow,
    Normal,
}

impl SaO2Class {
    pub const ALL: [SaO2Class; NUM_CLASSES] =
        [SaO2Class::Low, SaO2Class::BorderlineLow, SaO2Class::Normal];

    pub fn index(self) -> usize {
        match self {
            SaO2Class::Low => 0,
            SaO2Class::BorderlineLow => 1,
            SaO2Class::Normal => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<SaO2Class> {
        SaO2Class::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::contract(format!("class index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            SaO2Class::Low => "Low",
            SaO2Class::BorderlineLow => "BorderlineLow",
            SaO2Class::Normal => "Normal",
        }
    }

    pub fn parse(name: &str) -> Result<SaO2Class> {
        match name.trim() {
            "Low" | "low" => Ok(SaO2Class::Low),
            "BorderlineLow" | "Borderline Low" | "borderline_low" => Ok(SaO2Class::BorderlineLow),
            "Normal" | "normal" => Ok(SaO2Class::Normal),
            other => Err(Error::Domain(format!("unknown SaO2 class name {other:?}"))),
        }
    }

    /// Midpoint of the class's integer range; stands in for missing values
    /// when a manifest carries class names only.
    pub fn representative_percent(self) -> f64 {
        match self {
            SaO2Class::Low => 90.5,
            SaO2Class::BorderlineLow => 94.0,
            SaO2Class::Normal => 98.0,
        }
    }
}

impl std::fmt::Display for SaO2Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Maps a saturation percentage to its level. The published integer ranges
/// (Normal 96-100, Borderline Low 93-95, Low 89-92) are extended to
/// continuous values at the midpoints 92.5 and 95.5; everything below 89
/// counts as Low.
pub fn sao2_to_class(sao2_percent: f64) -> Result<SaO2Class> {
    if !(sao2_percent > 0.0 && sao2_percent <= 100.0) {
        return Err(Error::Domain(format!(
            "sao2 percent must lie in (0, 100], got {sao2_percent}"
        )));
    }
    Ok(if sao2_percent < 92.5 {
        SaO2Class::Low
    } else if sao2_percent < 95.5 {
        SaO2Class::BorderlineLow
    } else {
        SaO2Class::Normal
    })
}

/// One subject: an image stack plus its saturation label.
#[derive(Debug, Clone)]
pub struct LabeledInstance {
    pub instance_id: String,
    /// non-empty, all slices share one [H, W, C] shape
    pub slices: Vec<Tensor>,
    pub sao2_percent: f64,
    pub sao2_class: SaO2Class,
    pub is_augmented: bool,
    /// id of the original this was derived from; self for originals
    pub source_id: String,
}

impl LabeledInstance {
    pub fn new(instance_id: impl Into<String>, slices: Vec<Tensor>, sao2_percent: f64) -> Result<Self> {
        let instance_id = instance_id.into();
        let sao2_class = sao2_to_class(sao2_percent)?;
        let inst = LabeledInstance {
            source_id: instance_id.clone(),
            instance_id,
            slices,
            sao2_percent,
            sao2_class,
            is_augmented: false,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices.is_empty() {
            return Err(Error::contract(format!(
                "instance {} has no slices",
                self.instance_id
            )));
        }
        let shape = self.slices[0].shape();
        if self.slices.iter().any(|s| s.shape() != shape) {
            return Err(Error::dim(format!(
                "instance {} mixes slice shapes",
                self.instance_id
            )));
        }
        if sao2_to_class(self.sao2_percent)? != self.sao2_class {
            return Err(Error::contract(format!(
                "instance {}: stored class {} disagrees with percent {}",
                self.instance_id, self.sao2_class, self.sao2_percent
            )));
        }
        if self.is_augmented && self.source_id == self.instance_id {
            return Err(Error::contract(format!(
                "augmented instance {} must reference its original",
                self.instance_id
            )));
        }
        Ok(())
    }

    pub fn slice_shape(&self) -> &[usize] {
        self.slices[0].shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Folder,
    Augmented,
}

/// A validated bag of instances with cached per-class tallies.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub instances: Vec<LabeledInstance>,
    pub class_counts: [usize; NUM_CLASSES],
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(instances: Vec<LabeledInstance>, provenance: Provenance) -> Result<Dataset> {
        let mut counts = [0usize; NUM_CLASSES];
        let mut seen = std::collections::HashSet::new();
        for inst in &instances {
            inst.validate()?;
            if !seen.insert(inst.instance_id.clone()) {
                return Err(Error::contract(format!(
                    "duplicate instance id {}",
                    inst.instance_id
                )));
            }
            counts[inst.sao2_class.index()] += 1;
        }
        Ok(Dataset {
            instances,
            class_counts: counts,
            provenance,
        })
    }

    /// Recomputes the tallies and checks them against the stored ones.
    pub fn validate(&self) -> Result<()> {
        let mut counts = [0usize; NUM_CLASSES];
        for inst in &self.instances {
            inst.validate()?;
            counts[inst.sao2_class.index()] += 1;
        }
        if counts != self.class_counts {
            return Err(Error::contract(format!(
                "stored class counts {:?} disagree with recomputed {counts:?}",
                self.class_counts
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, instance_id: &str) -> Option<&LabeledInstance> {
        self.instances.iter().find(|i| i.instance_id == instance_id)
    }
}

/// Extracts every `stride`-th axial slice of a `[D, H, W]` volume as a
/// single-channel image, in depth order.
pub fn slice_volume(volume: &Tensor, stride: usize) -> Result<Vec<Tensor>> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("slice_volume expects [D,H,W], got {s:?}")));
    }
    if stride == 0 {
        return Err(Error::contract("slice stride must be >= 1".to_string()));
    }
    let (d, h, w) = (s[0], s[1], s[2]);
    if d == 0 {
        return Err(Error::contract("cannot slice an empty volume".to_string()));
    }
    let mut out = Vec::new();
    let mut zi = 0;
    while zi < d {
        let plane = volume.data()[zi * h * w..(zi + 1) * h * w].to_vec();
        out.push(Tensor::new(vec![h, w, 1], plane)?);
        zi += stride;
    }
    Ok(out)
}

/// Stacks same-shaped `[H, W, C]` images into a `[N, H, W, C]` batch.
pub fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::contract("cannot stack an empty image list".to_string()));
    }
    let shape = images[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("stack_images expects [H,W,C], got {shape:?}")));
    }
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape {
            return Err(Error::dim(format!(
                "cannot stack {:?} with {:?}",
                img.shape(),
                shape
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), shape[0], shape[1], shape[2]], data)
}
