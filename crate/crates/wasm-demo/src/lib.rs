//! Browser bindings for three operations: render a shape and read its
//! properties back, generate an image from requested properties, and show
//! how the free latent varies an image at fixed properties.
//!
//! The plain-Rust functions carry the logic and are tested natively; the
//! `#[wasm_bindgen]` items only convert errors.

use ctrlgen::formats;
use ctrlgen::model::prior_sample;
use ctrlgen::synth::{generate_dataset, measure_properties, render_shape, ShapeKind, ShapeSpec};
use ctrlgen::trainer::{run_training, warm_start};
use ctrlgen::{Architecture, ModelParams, PropertyVector, RangeSpec, ReplayDataset, Resolution, TrainConfig};
use wasm_bindgen::prelude::*;

const RES: Resolution = Resolution { h: 16, w: 16 };

/// Pixels followed by the measured `(size, x_pos, y_pos)`.
pub fn render_and_measure(ellipse: bool, size: f64, x_pos: f64, y_pos: f64) -> Result<Vec<f64>, String> {
    let kind = if ellipse { ShapeKind::Ellipse } else { ShapeKind::Square };
    let sample = render_shape(&ShapeSpec { kind, size, x_pos, y_pos }, RES).map_err(|e| e.to_string())?;
    let mut out = sample.pixels;
    out.extend(sample.label.as_slice());
    Ok(out)
}

fn demo_arch() -> Architecture {
    Architecture { dim_z: 4, encoder_hidden: vec![64], decoder_hidden: vec![64], ..Architecture::default() }
}

pub struct Demo {
    model: ModelParams,
    pool: Option<ReplayDataset>,
    seed: u64,
}

impl Demo {
    /// A small model trained in place for `iterations` on about 600 rendered frames.
    pub fn train_new(seed: u64, iterations: usize) -> Result<Self, String> {
        let split = generate_dataset(640, &RangeSpec::desk(), RES, seed, 16).map_err(|e| e.to_string())?;
        let mut pool = ReplayDataset::new(split.train, RES, 4).map_err(|e| e.to_string())?;
        let model =
            run_training(&mut pool, demo_arch(), &Self::config(seed, iterations)).map_err(|e| e.to_string())?.model;
        Ok(Demo { model, pool: Some(pool), seed })
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, String> {
        let model = formats::decode_checkpoint(bytes).map_err(|e| e.to_string())?;
        if model.arch().resolution != RES {
            let r = model.arch().resolution;
            return Err(format!("checkpoint is {}x{}, the demo shows 16x16", r.h, r.w));
        }
        Ok(Demo { model, pool: None, seed: 0 })
    }

    fn config(seed: u64, iterations: usize) -> TrainConfig {
        let mut cfg = TrainConfig { iterations, seed, ..TrainConfig::default() };
        cfg.weights.beta = 0.002;
        cfg
    }

    /// Continue training; a loaded checkpoint gets a fresh dataset first.
    pub fn train_more(&mut self, iterations: usize) -> Result<(), String> {
        self.seed += 1;
        let pool = match &mut self.pool {
            Some(p) => p,
            None => {
                let split = generate_dataset(640, &RangeSpec::desk(), RES, self.seed, 16).map_err(|e| e.to_string())?;
                self.pool.insert(ReplayDataset::new(split.train, RES, 4).map_err(|e| e.to_string())?)
            }
        };
        let arch = self.model.arch().clone();
        self.model = warm_start(self.model.clone(), &arch, pool, &Self::config(self.seed, iterations))
            .map_err(|e| e.to_string())?
            .model;
        Ok(())
    }

    /// Pixels followed by the measured properties of the generated image.
    pub fn generate(&self, size: f64, x_pos: f64, y_pos: f64, z_seed: u64) -> Result<Vec<f64>, String> {
        let z = prior_sample(self.model.arch().dim_z, z_seed).map_err(|e| e.to_string())?;
        let y = PropertyVector::new(vec![size, x_pos, y_pos]);
        let mut x = self.model.generate_batch(&[y], &[z]).map_err(|e| e.to_string())?.remove(0);
        let measured = measure_properties(&x, RES);
        x.extend(measured.as_slice());
        Ok(x)
    }

    /// `n` images at the same properties with z seeds `0..n`, concatenated.
    pub fn z_grid(&self, size: f64, x_pos: f64, y_pos: f64, n: usize) -> Result<Vec<f64>, String> {
        let dz = self.model.arch().dim_z;
        let zs = (0..n as u64)
            .map(|s| prior_sample(dz, s))
            .collect::<ctrlgen::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let ys = vec![PropertyVector::new(vec![size, x_pos, y_pos]); n];
        Ok(self.model.generate_batch(&ys, &zs).map_err(|e| e.to_string())?.concat())
    }

    pub fn checkpoint(&self) -> Vec<u8> {
        formats::encode_checkpoint(&self.model)
    }
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen(js_name = renderShape)]
pub fn render_shape_js(ellipse: bool, size: f64, x_pos: f64, y_pos: f64) -> Result<Vec<f64>, JsError> {
    render_and_measure(ellipse, size, x_pos, y_pos).map_err(js)
}

#[wasm_bindgen(js_name = frameSide)]
pub fn frame_side() -> usize {
    RES.w
}

#[wasm_bindgen]
pub struct DemoModel(Demo);

#[wasm_bindgen]
impl DemoModel {
    #[wasm_bindgen(js_name = train)]
    pub fn train(seed: u32, iterations: usize) -> Result<DemoModel, JsError> {
        Demo::train_new(seed.into(), iterations).map(DemoModel).map_err(js)
    }

    #[wasm_bindgen(js_name = fromCheckpoint)]
    pub fn from_checkpoint(bytes: &[u8]) -> Result<DemoModel, JsError> {
        Demo::from_checkpoint(bytes).map(DemoModel).map_err(js)
    }

    #[wasm_bindgen(js_name = trainMore)]
    pub fn train_more(&mut self, iterations: usize) -> Result<(), JsError> {
        self.0.train_more(iterations).map_err(js)
    }

    pub fn generate(&self, size: f64, x_pos: f64, y_pos: f64, z_seed: u32) -> Result<Vec<f64>, JsError> {
        self.0.generate(size, x_pos, y_pos, z_seed.into()).map_err(js)
    }

    #[wasm_bindgen(js_name = zGrid)]
    pub fn z_grid(&self, size: f64, x_pos: f64, y_pos: f64, n: usize) -> Result<Vec<f64>, JsError> {
        self.0.z_grid(size, x_pos, y_pos, n).map_err(js)
    }

    pub fn checkpoint(&self) -> Vec<u8> {
        self.0.checkpoint()
    }
}
