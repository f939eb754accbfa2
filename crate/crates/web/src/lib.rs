//! Browser bindings over canvas RGBA pixels: MLR down-sampling, the two
//! reconstructions with their attention weights, and feature response maps.

use mrjl::checkpoint::Checkpoint;
use mrjl::config::TrainConfig;
use mrjl::error::Result;
use mrjl::imaging::{self, ImageTensor};
use mrjl::model::Mrjl;
use mrjl::params::ParamStore;
use wasm_bindgen::prelude::*;

pub const DEMO_HEIGHT: usize = 128;
pub const DEMO_WIDTH: usize = 64;

fn image(rgba: &[u8], width: usize, height: usize) -> Result<ImageTensor> {
    ImageTensor::from_interleaved_u8(rgba, height, width, 4)
}

/// Down-samples by `rate` and resizes back, as the MLR synthesis does.
pub fn degrade(rgba: &[u8], width: usize, height: usize, rate: u32) -> Result<Vec<u8>> {
    Ok(imaging::downsample_resize(&image(rgba, width, height)?, rate)?.to_rgba8())
}

pub struct Reconstructed {
    pub hr: Vec<u8>,
    pub lr: Vec<u8>,
    pub weights: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

pub struct Pipeline {
    model: Mrjl,
    store: ParamStore,
}

impl Pipeline {
    /// Untrained compact model with stub backbone.
    pub fn seeded(seed: u64) -> Result<Self> {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::small(DEMO_HEIGHT, DEMO_WIDTH)
        };
        let (model, store) = Mrjl::new(cfg.model_config(1), seed)?;
        Ok(Self { model, store })
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (model, store) = Checkpoint::from_bytes(bytes)?.restore()?;
        Ok(Self { model, store })
    }

    pub fn size(&self) -> (usize, usize) {
        let c = self.model.config();
        (c.width, c.height)
    }

    pub fn reconstruct(&self, rgba: &[u8], width: usize, height: usize) -> Result<Reconstructed> {
        let img = self.model.prepare(&image(rgba, width, height)?)?;
        let pair = self.model.rrn.reconstruct(&self.store, &img)?;
        let weights = self.model.rrn.encode(&self.store, &img)?.weights.unwrap_or_default();
        let (width, height) = self.size();
        Ok(Reconstructed {
            hr: pair.hr.to_rgba8(),
            lr: pair.lr.to_rgba8(),
            weights,
            width,
            height,
        })
    }

    /// HR-branch and LR-branch heat maps side by side.
    pub fn feature_map(&self, rgba: &[u8], width: usize, height: usize) -> Result<(Vec<u8>, usize, usize)> {
        let map = self.model.feature_maps(&self.store, &image(rgba, width, height)?)?;
        Ok((map.to_rgba8(), map.width(), map.height()))
    }
}

fn js(e: mrjl::error::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn downsample(rgba: &[u8], width: usize, height: usize, rate: u32) -> std::result::Result<Vec<u8>, JsError> {
    degrade(rgba, width, height, rate).map_err(js)
}

#[wasm_bindgen]
pub struct Reconstruction(Reconstructed);

#[wasm_bindgen]
impl Reconstruction {
    #[wasm_bindgen(getter)]
    pub fn hr(&self) -> Vec<u8> {
        self.0.hr.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn lr(&self) -> Vec<u8> {
        self.0.lr.clone()
    }

    /// Attention weights of the 1×1, 3×3 and 5×5 perception branches.
    #[wasm_bindgen(getter)]
    pub fn weights(&self) -> Vec<f64> {
        self.0.weights.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.0.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.0.height
    }
}

#[wasm_bindgen]
pub struct FeatureMap {
    rgba: Vec<u8>,
    width: usize,
    height: usize,
}

#[wasm_bindgen]
impl FeatureMap {
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }
}

#[wasm_bindgen]
pub struct Demo(Pipeline);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsError> {
        Pipeline::seeded(seed as u64).map(Demo).map_err(js)
    }

    #[wasm_bindgen(js_name = fromCheckpoint)]
    pub fn from_checkpoint(bytes: &[u8]) -> std::result::Result<Demo, JsError> {
        Pipeline::from_checkpoint(bytes).map(Demo).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.0.size().0
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.0.size().1
    }

    pub fn reconstruct(&self, rgba: &[u8], width: usize, height: usize) -> std::result::Result<Reconstruction, JsError> {
        self.0.reconstruct(rgba, width, height).map(Reconstruction).map_err(js)
    }

    #[wasm_bindgen(js_name = featureMap)]
    pub fn feature_map(&self, rgba: &[u8], width: usize, height: usize) -> std::result::Result<FeatureMap, JsError> {
        let (rgba, width, height) = self.0.feature_map(rgba, width, height).map_err(js)?;
        Ok(FeatureMap { rgba, width, height })
    }
}
