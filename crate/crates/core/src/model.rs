//! The complete network: reconstruction, dual feature extraction and the
//! identity heads, built into one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dffn::{Branch, ClassifierHeads, Dffn, DffnConfig, JointFeature};
use crate::error::{Error, Result};
use crate::imaging::{self, ImageTensor};
use crate::params::ParamStore;
use crate::rrn::{ReconstructionPair, Rrn, RrnConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub rrn: RrnConfig,
    pub dffn: DffnConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.rrn.validate(self.height, self.width)?;
        self.dffn.validate(self.height, self.width)?;
        if self.num_classes == 0 {
            return Err(Error::Config("model needs at least one identity class".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Mrjl {
    cfg: ModelConfig,
    pub rrn: Rrn,
    pub dffn: Dffn,
    pub heads: ClassifierHeads,
}

impl Mrjl {
    /// Builds the network with parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rrn = Rrn::new(cfg.rrn.clone(), cfg.height, cfg.width, &mut store, &mut rng)?;
        let dffn = Dffn::new(&cfg.dffn, cfg.height, cfg.width, &mut store, &mut rng)?;
        let heads = ClassifierHeads::new(cfg.num_classes, &mut store, &mut rng)?;
        store.partition()?;
        Ok((Self { cfg, rrn, dffn, heads }, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Resizes to the model's input size when needed.
    pub fn prepare(&self, img: &ImageTensor) -> Result<ImageTensor> {
        if (img.height(), img.width()) == (self.cfg.height, self.cfg.width) {
            Ok(img.clone())
        } else {
            imaging::resize_bilinear(img, self.cfg.height, self.cfg.width)
        }
    }

    pub fn reconstruct(&self, store: &ParamStore, img: &ImageTensor) -> Result<ReconstructionPair> {
        self.rrn.reconstruct(store, &self.prepare(img)?)
    }

    /// Resolution-agnostic path used for every image when resolutions are
    /// unknown, and for queries when they are known.
    pub fn extract_unknown(&self, store: &ParamStore, img: &ImageTensor) -> Result<JointFeature> {
        let pair = self.reconstruct(store, img)?;
        self.dffn.extract_joint(store, &pair)
    }

    /// Gallery path when resolutions are known: the original image feeds
    /// the HR branch and only its LR reconstruction is computed.
    pub fn extract_known_gallery(&self, store: &ParamStore, img: &ImageTensor) -> Result<JointFeature> {
        let img = self.prepare(img)?;
        let pair = self.rrn.reconstruct(store, &img)?;
        let hr = self.dffn.hr.extract(store, &img)?;
        let lr = self.dffn.lr.extract(store, &pair.lr)?;
        JointFeature::new(&hr, &lr)
    }

    /// Heat maps of both branches for the reconstruction pair of `img`,
    /// side by side (HR branch left).
    pub fn feature_maps(&self, store: &ParamStore, img: &ImageTensor) -> Result<ImageTensor> {
        let pair = self.reconstruct(store, img)?;
        let hr = self.dffn.branch(Branch::Hr).feature_response_map(store, &pair.hr)?;
        let lr = self.dffn.branch(Branch::Lr).feature_response_map(store, &pair.lr)?;
        imaging::hconcat(&[&hr, &lr])
    }
}
