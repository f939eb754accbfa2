//! Training set and mini-batch construction: five identities per batch,
//! each with two HR images (expanded into their three down-sampled
//! variants) and two original LR images that only train the feature
//! network.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::Manifest;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::imaging::{self, ImageTensor, ResolutionTag};

/// Rates of the synthesized LR variants, in order.
pub const VARIANT_RATES: [u32; 3] = [2, 3, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct MultiResolutionSample {
    pub hr: ImageTensor,
    /// Variants down-sampled at 2, 3 and 4, resized back to the HR size.
    pub lr_variants: [ImageTensor; 3],
    pub identity: u32,
}

impl MultiResolutionSample {
    pub fn from_hr(hr: ImageTensor, identity: u32) -> Result<Self> {
        let hr = hr.with_tag(ResolutionTag::HR);
        let v = |r| imaging::downsample_resize(&hr, r);
        let lr_variants = [v(2)?, v(3)?, v(4)?];
        Ok(Self {
            hr,
            lr_variants,
            identity,
        })
    }

    /// The variant at the given rate.
    pub fn variant(&self, rate: u32) -> &ImageTensor {
        &self.lr_variants[rate as usize - 2]
    }
}

#[derive(Debug, Clone)]
enum ItemSource {
    Memory(ImageTensor),
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub identity: u32,
    pub camera: u32,
    pub tag: ResolutionTag,
    source: ItemSource,
}

/// Training images grouped by identity, loaded on demand at a fixed size.
#[derive(Debug, Clone)]
pub struct TrainSet {
    items: Vec<TrainItem>,
    height: usize,
    width: usize,
    classes: BTreeMap<u32, usize>,
    by_identity: BTreeMap<u32, (Vec<usize>, Vec<usize>)>,
}

impl TrainSet {
    fn build(items: Vec<TrainItem>, height: usize, width: usize) -> Self {
        let mut by_identity: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            let slot = by_identity.entry(it.identity).or_default();
            if it.tag == ResolutionTag::HR {
                slot.0.push(i);
            } else {
                slot.1.push(i);
            }
        }
        let classes = by_identity.keys().enumerate().map(|(c, &id)| (id, c)).collect();
        Self {
            items,
            height,
            width,
            classes,
            by_identity,
        }
    }

    /// Train split of a manifest rooted at `root`. Fails listing every
    /// missing file.
    pub fn from_manifest(root: &Path, manifest: &Manifest, height: usize, width: usize) -> Result<Self> {
        let mut missing = Vec::new();
        let items = manifest
            .split(Split::Train)
            .into_iter()
            .map(|e| {
                let path = root.join(&e.record.path);
                if !path.is_file() {
                    missing.push(path.clone());
                }
                TrainItem {
                    identity: e.record.identity,
                    camera: e.record.camera,
                    tag: e.tag,
                    source: ItemSource::File(path),
                }
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        Ok(Self::build(items, height, width))
    }

    /// In-memory images `(image, identity, camera)`; tags come from the images.
    pub fn in_memory(images: Vec<(ImageTensor, u32, u32)>, height: usize, width: usize) -> Result<Self> {
        let items = images
            .into_iter()
            .map(|(img, identity, camera)| {
                let img = imaging::resize_bilinear(&img, height, width)?;
                let tag = match img.tag() {
                    ResolutionTag::Unknown => ResolutionTag::HR,
                    t => t,
                };
                Ok(TrainItem {
                    identity,
                    camera,
                    tag,
                    source: ItemSource::Memory(img.with_tag(tag)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::build(items, height, width))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, i: usize) -> &TrainItem {
        &self.items[i]
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_identities(&self) -> usize {
        self.by_identity.len()
    }

    /// Classifier label of an identity.
    pub fn class_of(&self, identity: u32) -> Option<usize> {
        self.classes.get(&identity).copied()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Identities with at least one HR image, in ascending order.
    pub fn trainable_identities(&self) -> Vec<u32> {
        self.by_identity
            .iter()
            .filter(|(_, (hr, _))| !hr.is_empty())
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn load(&self, i: usize) -> Result<ImageTensor> {
        let it = &self.items[i];
        match &it.source {
            ItemSource::Memory(img) => Ok(img.clone()),
            ItemSource::File(p) => imaging::load_resized(p, self.height, self.width, it.tag),
        }
    }

    fn indices(&self, identity: u32) -> &(Vec<usize>, Vec<usize>) {
        &self.by_identity[&identity]
    }
}

#[derive(Debug, Clone)]
pub struct PersonGroup {
    pub identity: u32,
    pub label: usize,
    pub hr: Vec<MultiResolutionSample>,
    pub lr: Vec<ImageTensor>,
    /// Whether each LR slot was synthesized on the fly because the identity
    /// lacked original LR images.
    pub lr_synthesized: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub persons: Vec<PersonGroup>,
}

impl MiniBatch {
    /// Base images per batch: HR plus original-LR slots of every person.
    pub fn base_len(&self) -> usize {
        self.persons.iter().map(|p| p.hr.len() + p.lr.len()).sum()
    }

    /// Per base image in `[hr.., lr..]` order per person: true for items that
    /// only feed the feature network.
    pub fn dffn_only_mask(&self) -> Vec<bool> {
        self.persons
            .iter()
            .flat_map(|p| std::iter::repeat(false).take(p.hr.len()).chain(std::iter::repeat(true).take(p.lr.len())))
            .collect()
    }

    pub fn validate(&self, persons: usize, hr_per: usize, lr_per: usize) -> Result<()> {
        if self.persons.len() != persons {
            return Err(Error::Dataset(format!("batch has {} persons", self.persons.len())));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.persons {
            if !seen.insert(p.identity) {
                return Err(Error::Dataset(format!("identity {} repeated in batch", p.identity)));
            }
            if p.hr.len() != hr_per || p.lr.len() != lr_per || p.lr_synthesized.len() != lr_per {
                return Err(Error::Dataset(format!("identity {} has a malformed group", p.identity)));
            }
            for s in &p.hr {
                for (v, rate) in s.lr_variants.iter().zip(VARIANT_RATES) {
                    if (v.height(), v.width()) != (s.hr.height(), s.hr.width())
                        || v.tag() != ResolutionTag::from_rate(rate)?
                    {
                        return Err(Error::Dataset("LR variant violates size or rate contract".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Seeded mini-batch sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    pub persons: usize,
    pub hr_per_person: usize,
    pub lr_per_person: usize,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            persons: 5,
            hr_per_person: 2,
            lr_per_person: 2,
        }
    }

    fn pick(&mut self, pool: &[usize], k: usize) -> Vec<usize> {
        if pool.len() >= k {
            index::sample(&mut self.rng, pool.len(), k)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        } else {
            (0..k).map(|_| pool[self.rng.gen_range(0..pool.len())]).collect()
        }
    }

    pub fn sample(&mut self, set: &TrainSet) -> Result<MiniBatch> {
        let ids = set.trainable_identities();
        if ids.len() < self.persons {
            return Err(Error::Dataset(format!(
                "{} trainable identities, a batch needs {}",
                ids.len(),
                self.persons
            )));
        }
        let chosen: Vec<u32> = index::sample(&mut self.rng, ids.len(), self.persons)
            .into_iter()
            .map(|i| ids[i])
            .collect();
        let mut persons = Vec::with_capacity(self.persons);
        for identity in chosen {
            let (hr_pool, lr_pool) = set.indices(identity).clone();
            let hr_idx = self.pick(&hr_pool, self.hr_per_person);
            let real_lr = lr_pool.len().min(self.lr_per_person);
            let lr_idx = self.pick(&lr_pool, real_lr);
            let mut lr = Vec::with_capacity(self.lr_per_person);
            let mut lr_synthesized = Vec::with_capacity(self.lr_per_person);
            for i in lr_idx {
                lr.push(set.load(i)?);
                lr_synthesized.push(false);
            }
            while lr.len() < self.lr_per_person {
                let src = hr_pool[self.rng.gen_range(0..hr_pool.len())];
                let rate = self.rng.gen_range(2..=4);
                lr.push(imaging::downsample_resize(&set.load(src)?, rate)?);
                lr_synthesized.push(true);
            }
            let hr = hr_idx
                .into_iter()
                .map(|i| MultiResolutionSample::from_hr(set.load(i)?, identity))
                .collect::<Result<Vec<_>>>()?;
            persons.push(PersonGroup {
                identity,
                label: set.class_of(identity).expect("identity of the set"),
                hr,
                lr,
                lr_synthesized,
            });
        }
        Ok(MiniBatch { persons })
    }
}
