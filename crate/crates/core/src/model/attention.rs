use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predictor {
    Instance,
    Relation,
}

/// Cross-attention weights of one head in one decoder layer:
/// `[num_queries, N_tokens]`, rows sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub predictor: Predictor,
    pub layer: usize,
    pub head: usize,
    pub weights: Tensor,
}

/// On-disk form of a set of attention records. Each query's weights are
/// reshaped onto the `(H', W')` token grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub grid: [usize; 2],
    pub records: Vec<AttentionGrid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionGrid {
    pub predictor: Predictor,
    pub layer: usize,
    pub head: usize,
    /// `[query][row][col]`
    pub queries: Vec<Vec<Vec<f64>>>,
}

impl AttentionExport {
    pub fn from_records(records: &[AttentionRecord], grid: (usize, usize)) -> Result<Self> {
        let (gh, gw) = grid;
        let records = records
            .iter()
            .map(|r| {
                if r.weights.cols() != gh * gw {
                    return Err(Error::shape("attention export", r.weights.shape(), &[gh, gw]));
                }
                let queries = (0..r.weights.rows())
                    .map(|q| r.weights.row(q).chunks(gw).map(<[f64]>::to_vec).collect())
                    .collect();
                Ok(AttentionGrid {
                    predictor: r.predictor,
                    layer: r.layer,
                    head: r.head,
                    queries,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            grid: [gh, gw],
            records,
        })
    }

    /// Flattens each grid back to `[num_queries, H'*W']` records.
    pub fn to_records(&self) -> Result<Vec<AttentionRecord>> {
        self.records
            .iter()
            .map(|r| {
                let data: Vec<f64> = r.queries.iter().flatten().flatten().copied().collect();
                let weights = Tensor::new(vec![r.queries.len(), self.grid[0] * self.grid[1]], data)?;
                Ok(AttentionRecord {
                    predictor: r.predictor,
                    layer: r.layer,
                    head: r.head,
                    weights,
                })
            })
            .collect()
    }
}

/// Writes attention records as JSON.
pub fn export_attention(records: &[AttentionRecord], grid: (usize, usize), path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Usage("no attention records to export".into()));
    }
    let export = AttentionExport::from_records(records, grid)?;
    fs::write(path, serde_json::to_vec_pretty(&export)?)?;
    Ok(())
}

pub fn import_attention(path: &Path) -> Result<AttentionExport> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Renders one query's weights as an 8-bit grayscale grid, scaled so the
/// largest weight is white.
pub fn attention_image(grid: &[Vec<f64>], scale: u32) -> image::GrayImage {
    let (h, w) = (grid.len() as u32, grid.first().map_or(0, Vec::len) as u32);
    let max = grid.iter().flatten().copied().fold(0.0, f64::max).max(1e-12);
    image::GrayImage::from_fn(w * scale, h * scale, |x, y| {
        let v = grid[(y / scale) as usize][(x / scale) as usize] / max;
        image::Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}
