//! On-disk weight container.
//!
//! Format: {"layers": [{"name", "shape", "values"}...], "meta": {...}} with
//! row-major value order. `meta` carries model configuration and normalization
//! statistics so a checkpoint is self-describing.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightBundle {
    pub layers: Vec<LayerRecord>,
    pub meta: serde_json::Value,
}

impl WeightBundle {
    pub fn new(meta: serde_json::Value) -> Self {
        WeightBundle { layers: Vec::new(), meta }
    }

    pub fn push(&mut self, name: &str, tensor: &Tensor) {
        self.layers.push(LayerRecord {
            name: name.to_string(),
            shape: vec![tensor.rows, tensor.cols],
            values: tensor.data.clone(),
        });
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let rec = self
            .layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::contract(format!("checkpoint missing layer {name}")))?;
        if rec.shape.len() != 2 || rec.shape[0] * rec.shape[1] != rec.values.len() {
            return Err(Error::contract(format!("checkpoint layer {name} has bad shape")));
        }
        Ok(Tensor::new(rec.shape[0], rec.shape[1], rec.values.clone()))
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(|v| v.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_row_major_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let mut bundle = WeightBundle::new(serde_json::json!({"kind": "test"}));
        let t = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        bundle.push("enc.w", &t);
        bundle.save(&path).unwrap();

        let loaded = WeightBundle::load(&path).unwrap();
        assert_eq!(loaded.meta_str("kind"), Some("test"));
        let back = loaded.tensor("enc.w").unwrap();
        assert_eq!(back, t);
        // Row-major on disk: row 0 is the first three values.
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["layers"][0]["values"][2], serde_json::json!(3.0));
    }

    #[test]
    fn missing_layer_is_an_error() {
        let bundle = WeightBundle::new(serde_json::json!({}));
        assert!(bundle.tensor("nope").is_err());
    }
}
