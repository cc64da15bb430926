use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::training::{GroundTruthHOI, Sample};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    /// Path relative to the directory holding the dataset file.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u64,
    #[serde(flatten)]
    pub hoi: GroundTruthHOI,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Categories {
    pub objects: Vec<String>,
    pub relations: Vec<String>,
    /// `(object_class, relation_class)` HOI categories.
    pub hoi_pairs: Vec<(usize, usize)>,
    /// Training-set instance count of each entry of `hoi_pairs`.
    pub train_frequencies: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Categories,
}

/// Every `(object, relation)` pair in row-major order.
pub fn all_hoi_pairs(num_objects: usize, num_relations: usize) -> Vec<(usize, usize)> {
    (0..num_objects).flat_map(|o| (0..num_relations).map(move |r| (o, r))).collect()
}

/// Instance count per pair; an annotation with several relation classes
/// counts once for each.
pub fn hoi_frequencies(annotations: &[Annotation], pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for a in annotations {
        for &r in &a.hoi.relation_classes {
            *counts.entry((a.hoi.object_class, r)).or_default() += 1;
        }
    }
    pairs.iter().map(|p| counts.get(p).copied().unwrap_or(0)).collect()
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let d: Dataset = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.categories;
        let mut problems = Vec::new();
        if c.hoi_pairs.len() != c.train_frequencies.len() {
            problems.push(format!(
                "{} hoi_pairs but {} train_frequencies",
                c.hoi_pairs.len(),
                c.train_frequencies.len()
            ));
        }
        let ids: BTreeSet<u64> = self.images.iter().map(|i| i.id).collect();
        if ids.len() != self.images.len() {
            problems.push("duplicate image ids".into());
        }
        for a in &self.annotations {
            if !ids.contains(&a.image_id) {
                problems.push(format!("annotation for unknown image {}", a.image_id));
            }
            if let Err(e) = a.hoi.check_classes(c.objects.len(), c.relations.len()) {
                problems.push(format!("image {}: {e}", a.image_id));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!("invalid dataset: {}", problems.join("; "))))
        }
    }

    /// Ground truths grouped by image, including images without any.
    pub fn gts_by_image(&self) -> Result<BTreeMap<u64, Vec<GroundTruthHOI>>> {
        let mut out: BTreeMap<u64, Vec<GroundTruthHOI>> = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            out.get_mut(&a.image_id)
                .ok_or_else(|| Error::Data(format!("annotation for unknown image {}", a.image_id)))?
                .push(a.hoi.clone());
        }
        Ok(out)
    }

    /// Replays the annotations as detections with score 1.
    pub fn ground_truth_as_detections(&self) -> Result<crate::inference::PredictionDump> {
        use crate::inference::{HOIDetection, ImageDetections, PredictionDump};
        let images = self
            .gts_by_image()?
            .into_iter()
            .map(|(image_id, gts)| ImageDetections {
                image_id,
                detections: gts
                    .iter()
                    .enumerate()
                    .flat_map(|(q, g)| {
                        g.relation_classes.iter().map(move |&r| HOIDetection {
                            human_box: g.human_box,
                            object_box: g.object_box,
                            relation_box: g.relation_box,
                            object_class: g.object_class,
                            relation_class: r,
                            score: 1.0,
                            query_index: q,
                        })
                    })
                    .collect(),
            })
            .collect();
        Ok(PredictionDump { images })
    }

    /// Reads every image (relative to `root`) with its annotations.
    pub fn load_samples(&self, root: &Path) -> Result<Vec<(u64, Sample)>> {
        let gts = self.gts_by_image()?;
        self.images
            .iter()
            .map(|info| {
                let path: PathBuf = root.join(&info.file);
                let img = image::open(&path)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
                    .to_rgb8();
                if (img.width() as usize, img.height() as usize) != (info.width, info.height) {
                    return Err(Error::Data(format!(
                        "{} is {}x{}, dataset says {}x{}",
                        path.display(),
                        img.width(),
                        img.height(),
                        info.width,
                        info.height
                    )));
                }
                Ok((
                    info.id,
                    Sample {
                        image: image_to_tensor(&img),
                        gts: gts[&info.id].clone(),
                    },
                ))
            })
            .collect()
    }
}

/// `[3, H, W]` tensor with values in `[0, 1]`.
pub fn image_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f64::from(p[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("non-empty image")
}
