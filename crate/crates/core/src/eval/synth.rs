//! Synthetic scenes: stick-figure humans next to shape-coded objects, with
//! relation labels decided by spatial rules so they are recoverable from
//! pixels.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{all_hoi_pairs, hoi_frequencies, image_to_tensor, Annotation, Categories, Dataset, ImageInfo};
use crate::error::{Error, Result};
use crate::inference::{HOIDetection, ImageDetections, PredictionDump};
use crate::model::BBox;
use crate::training::{GroundTruthHOI, Sample};

/// Spatial rules a relation vocabulary may draw from.
pub const RELATION_RULES: [&str; 4] = ["overlap", "above", "left_of", "right_of"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<String>,
    /// Subset of [`RELATION_RULES`], in class-index order.
    pub relations: Vec<String>,
    /// Relative sampling weight per object class; empty means uniform.
    pub object_weights: Vec<f64>,
    /// Inclusive range of HOIs per scene.
    pub hoi_per_scene: (usize, usize),
    /// Chance that an additional HOI reuses an existing human.
    pub shared_human_prob: f64,
    pub num_train: usize,
    pub num_test: usize,
    /// Chance of a near-copy for each simulated detection.
    pub duplicate_rate: f64,
    /// Relative box jitter of simulated detections.
    pub box_jitter: f64,
    /// Low-scoring spurious detections per image in the simulated dump.
    pub false_positives_per_image: usize,
    /// Amplitude of per-pixel background noise.
    pub noise: u8,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 64,
            height: 64,
            objects: vec!["box".into(), "ball".into(), "cone".into()],
            relations: RELATION_RULES.iter().map(|s| s.to_string()).collect(),
            object_weights: Vec::new(),
            hoi_per_scene: (1, 2),
            shared_human_prob: 0.5,
            num_train: 200,
            num_test: 50,
            duplicate_rate: 0.5,
            box_jitter: 0.02,
            false_positives_per_image: 1,
            noise: 6,
        }
    }
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.width < 16 || self.height < 16 {
            bad.push(format!("canvas {}x{} is below 16x16", self.width, self.height));
        }
        if self.objects.is_empty() {
            bad.push("object vocabulary is empty".into());
        }
        if self.relations.is_empty() {
            bad.push("relation vocabulary is empty".into());
        }
        for (i, r) in self.relations.iter().enumerate() {
            if !RELATION_RULES.contains(&r.as_str()) {
                bad.push(format!("unknown relation {r:?}; expected one of {RELATION_RULES:?}"));
            }
            if self.relations[..i].contains(r) {
                bad.push(format!("duplicate relation {r:?}"));
            }
        }
        if !self.object_weights.is_empty() {
            if self.object_weights.len() != self.objects.len() {
                bad.push("object_weights must match the object vocabulary".into());
            } else if self.object_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
                || self.object_weights.iter().sum::<f64>() <= 0.0
            {
                bad.push("object_weights must be >= 0 with a positive sum".into());
            }
        }
        let (lo, hi) = self.hoi_per_scene;
        if lo == 0 || lo > hi {
            bad.push(format!("hoi_per_scene ({lo}, {hi}) must satisfy 1 <= min <= max"));
        }
        for (n, v) in [
            ("shared_human_prob", self.shared_human_prob),
            ("duplicate_rate", self.duplicate_rate),
            ("box_jitter", self.box_jitter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bad.push(format!("{n} = {v} must lie in [0, 1]"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scene spec: {}", bad.join("; "))))
        }
    }
}

/// Integer pixel box with exclusive upper corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct PixBox {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

impl PixBox {
    fn w(self) -> i64 {
        self.x1 - self.x0
    }

    fn h(self) -> i64 {
        self.y1 - self.y0
    }

    fn iou(self, o: PixBox) -> f64 {
        let iw = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0);
        let ih = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0);
        let inter = (iw * ih) as f64;
        inter / ((self.w() * self.h() + o.w() * o.h()) as f64 - inter)
    }

    fn to_bbox(self, width: usize, height: usize) -> BBox {
        let (w, h) = (width as f64, height as f64);
        BBox::from_xyxy(self.x0 as f64 / w, self.y0 as f64 / h, self.x1 as f64 / w, self.y1 as f64 / h)
    }
}

/// Names of the rules satisfied by an object relative to a human.
fn spatial_relations(h: PixBox, o: PixBox) -> Vec<&'static str> {
    let mut out = Vec::new();
    if h.x0 < o.x1 && o.x0 < h.x1 && h.y0 < o.y1 && o.y0 < h.y1 {
        out.push("overlap");
    }
    if o.y0 + o.y1 < 2 * h.y0 {
        out.push("above");
    }
    if o.x1 <= h.x0 {
        out.push("left_of");
    }
    if o.x0 >= h.x1 {
        out.push("right_of");
    }
    out
}

fn sample_box(rng: &mut ChaCha8Rng, canvas: (usize, usize), w: (f64, f64), h: (f64, f64), square: bool) -> PixBox {
    let (cw, ch) = (canvas.0 as f64, canvas.1 as f64);
    let bw = (rng.random_range(w.0..=w.1) * cw).round().max(3.0) as i64;
    let bh = if square {
        bw
    } else {
        (rng.random_range(h.0..=h.1) * ch).round().max(3.0) as i64
    };
    let x0 = rng.random_range(0..=canvas.0 as i64 - bw);
    let y0 = rng.random_range(0..=canvas.1 as i64 - bh);
    PixBox {
        x0,
        y0,
        x1: x0 + bw,
        y1: y0 + bh,
    }
}

fn put(img: &mut RgbImage, clip: PixBox, x: i64, y: i64, c: Rgb<u8>) {
    if x >= clip.x0 && x < clip.x1 && y >= clip.y0 && y < clip.y1 {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, clip: PixBox, (ax, ay): (f64, f64), (bx, by): (f64, f64), c: Rgb<u8>) {
    let steps = ((bx - ax).abs().max((by - ay).abs()) * 2.0).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (ax + t * (bx - ax)).floor() as i64;
        let y = (ay + t * (by - ay)).floor() as i64;
        put(img, clip, x, y, c);
        put(img, clip, x + 1, y, c);
    }
}

const HUMAN_COLOUR: Rgb<u8> = Rgb([240, 210, 170]);

/// Stick figure whose drawn extent is exactly `b`.
fn draw_human(img: &mut RgbImage, b: PixBox) {
    let (w, h) = (b.w() as f64, b.h() as f64);
    let cx = b.x0 as f64 + w / 2.0;
    let r = (w / 4.0).max(1.5);
    let head_cy = b.y0 as f64 + r;
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - head_cy);
            if dx * dx + dy * dy <= r * r {
                put(img, b, x, y, HUMAN_COLOUR);
            }
        }
    }
    let hip = b.y0 as f64 + 0.7 * h;
    line(img, b, (cx - 0.5, head_cy + r), (cx - 0.5, hip), HUMAN_COLOUR);
    let arm = (b.y0 as f64 + 0.35 * h).floor() as i64;
    for x in b.x0..b.x1 {
        put(img, b, x, arm, HUMAN_COLOUR);
        put(img, b, x, arm + 1, HUMAN_COLOUR);
    }
    let foot = b.y1 as f64 - 0.5;
    line(img, b, (cx - 0.5, hip), (b.x0 as f64, foot), HUMAN_COLOUR);
    line(img, b, (cx - 0.5, hip), (b.x1 as f64 - 1.0, foot), HUMAN_COLOUR);
    // pin the corners so the glyph spans the whole box
    put(img, b, b.x0, b.y1 - 1, HUMAN_COLOUR);
    put(img, b, b.x1 - 1, b.y1 - 1, HUMAN_COLOUR);
}

fn object_colour(class: usize) -> Rgb<u8> {
    const BASE: [[u8; 3]; 3] = [[220, 60, 60], [60, 190, 80], [70, 110, 240]];
    let [r, g, b] = BASE[class % 3];
    let shift = (class / 3) as u8 * 40;
    Rgb([r.wrapping_add(shift), g.wrapping_sub(shift / 2), b.wrapping_add(shift / 3)])
}

/// Square, disc or triangle by `class % 3`, filling `b` to its edges.
fn draw_object(img: &mut RgbImage, b: PixBox, class: usize) {
    let c = object_colour(class);
    let (w, h) = (b.w() as f64, b.h() as f64);
    let (cx, cy) = (b.x0 as f64 + w / 2.0, b.y0 as f64 + h / 2.0);
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = match class % 3 {
                0 => true,
                1 => {
                    let (dx, dy) = ((px - cx) / (w / 2.0), (py - cy) / (h / 2.0));
                    dx * dx + dy * dy <= 1.0
                }
                _ => {
                    let row = (y - b.y0 + 1) as f64;
                    (px - cx).abs() <= row / h * w / 2.0
                }
            };
            if inside {
                put(img, b, x, y, c);
            }
        }
    }
}

/// One generated scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub info: ImageInfo,
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
}

fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_class(rng: &mut ChaCha8Rng, spec: &SynthSceneSpec) -> usize {
    if spec.object_weights.is_empty() {
        return rng.random_range(0..spec.objects.len());
    }
    let total: f64 = spec.object_weights.iter().sum();
    let mut t = rng.random_range(0.0..total);
    for (k, w) in spec.object_weights.iter().enumerate() {
        if t < *w {
            return k;
        }
        t -= w;
    }
    spec.object_weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn generate_scene(spec: &SynthSceneSpec, id: u64) -> Result<Scene> {
    let mut rng = scene_rng(spec.seed, id);
    let canvas = (spec.width, spec.height);
    let target = rng.random_range(spec.hoi_per_scene.0..=spec.hoi_per_scene.1);
    let mut humans: Vec<PixBox> = Vec::new();
    let mut objects: Vec<(PixBox, usize)> = Vec::new();
    let mut hois: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for k in 0..target {
        let mut placed = false;
        for _ in 0..500 {
            let reuse = k > 0 && rng.random_bool(spec.shared_human_prob);
            let (hi, h) = if reuse {
                let i = rng.random_range(0..humans.len());
                (i, humans[i])
            } else {
                let h = sample_box(&mut rng, canvas, (0.16, 0.25), (0.3, 0.45), false);
                if humans.iter().any(|o| o.iou(h) >= 0.3) {
                    continue;
                }
                (humans.len(), h)
            };
            let o = sample_box(&mut rng, canvas, (0.13, 0.2), (0.13, 0.2), true);
            if objects.iter().any(|(p, _)| p.iou(o) >= 0.3) {
                continue;
            }
            let rels: Vec<usize> = spatial_relations(h, o)
                .into_iter()
                .filter_map(|name| spec.relations.iter().position(|r| r == name))
                .collect();
            if rels.is_empty() {
                continue;
            }
            let class = sample_class(&mut rng, spec);
            if hi == humans.len() {
                humans.push(h);
            }
            objects.push((o, class));
            hois.push((hi, objects.len() - 1, rels));
            placed = true;
            break;
        }
        if !placed {
            if k == 0 {
                return Err(Error::Config(format!("could not place any HOI in scene {id}")));
            }
            break;
        }
    }

    let mut image = RgbImage::new(spec.width as u32, spec.height as u32);
    let n = i16::from(spec.noise);
    for p in image.pixels_mut() {
        let base = [28i16, 28, 36];
        *p = Rgb(base.map(|v| (v + if n > 0 { rng.random_range(-n..=n) } else { 0 }).clamp(0, 255) as u8));
    }
    for &h in &humans {
        draw_human(&mut image, h);
    }
    for &(o, class) in &objects {
        draw_object(&mut image, o, class);
    }
    let annotations = hois
        .into_iter()
        .map(|(hi, oi, rels)| {
            Ok(Annotation {
                image_id: id,
                hoi: GroundTruthHOI::new(
                    humans[hi].to_bbox(spec.width, spec.height),
                    objects[oi].0.to_bbox(spec.width, spec.height),
                    objects[oi].1,
                    rels,
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        info: ImageInfo {
            id,
            width: spec.width,
            height: spec.height,
            file: format!("images/{id:05}.png"),
        },
        image,
        annotations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SynthSceneSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub train_images: Vec<RgbImage>,
    pub test_images: Vec<RgbImage>,
}

fn assemble(scenes: Vec<Scene>, categories: &Categories) -> (Dataset, Vec<RgbImage>) {
    let mut d = Dataset {
        categories: categories.clone(),
        ..Dataset::default()
    };
    let mut images = Vec::with_capacity(scenes.len());
    for s in scenes {
        d.images.push(s.info);
        d.annotations.extend(s.annotations);
        images.push(s.image);
    }
    (d, images)
}

/// Train and test splits (image ids `0..num_train` and
/// `num_train..num_train + num_test`). Each scene draws from its own RNG
/// stream, so the train split does not depend on `num_test`.
pub fn generate_synthetic_dataset(spec: &SynthSceneSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let train_scenes = (0..spec.num_train as u64)
        .map(|id| generate_scene(spec, id))
        .collect::<Result<Vec<_>>>()?;
    let test_scenes = (spec.num_train as u64..(spec.num_train + spec.num_test) as u64)
        .map(|id| generate_scene(spec, id))
        .collect::<Result<Vec<_>>>()?;
    let pairs = all_hoi_pairs(spec.objects.len(), spec.relations.len());
    let train_ann: Vec<Annotation> = train_scenes.iter().flat_map(|s| s.annotations.clone()).collect();
    let categories = Categories {
        objects: spec.objects.clone(),
        relations: spec.relations.clone(),
        train_frequencies: hoi_frequencies(&train_ann, &pairs),
        hoi_pairs: pairs,
    };
    let (train, train_images) = assemble(train_scenes, &categories);
    let (test, test_images) = assemble(test_scenes, &categories);
    Ok(SyntheticDataset {
        spec: spec.clone(),
        train,
        test,
        train_images,
        test_images,
    })
}

impl SyntheticDataset {
    pub fn samples(&self, split: Split) -> Vec<(u64, Sample)> {
        let (d, images) = match split {
            Split::Train => (&self.train, &self.train_images),
            Split::Test => (&self.test, &self.test_images),
        };
        let gts = d.gts_by_image().expect("generated annotations reference generated images");
        d.images
            .iter()
            .zip(images)
            .map(|(info, img)| {
                (
                    info.id,
                    Sample {
                        image: image_to_tensor(img),
                        gts: gts[&info.id].clone(),
                    },
                )
            })
            .collect()
    }

    /// Writes `train.json`, `test.json`, `spec.json`, the simulated raw
    /// detections `test_detections.json` and `images/*.png` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        for (info, img) in self
            .train
            .images
            .iter()
            .zip(&self.train_images)
            .chain(self.test.images.iter().zip(&self.test_images))
        {
            img.save(dir.join(&info.file))
                .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        }
        self.train.save(&dir.join("train.json"))?;
        self.test.save(&dir.join("test.json"))?;
        fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        simulate_detections(&self.test, &self.spec)?.save(&dir.join("test_detections.json"))?;
        Ok(())
    }
}

fn jitter(rng: &mut ChaCha8Rng, b: BBox, m: f64) -> BBox {
    if m == 0.0 {
        return b;
    }
    let mut d = || rng.random_range(-m..=m);
    BBox::new(b.cx + d() * b.w, b.cy + d() * b.h, b.w * (1.0 + d()), b.h * (1.0 + d()))
}

/// Stand-in for a detector's raw output on `data`: one jittered detection
/// per ground-truth (pair, relation) with a score in `[0.3, 1)`, a near-copy
/// with twice the jitter and its own score at `duplicate_rate`, and a few
/// low-scoring spurious detections per image.
pub fn simulate_detections(data: &Dataset, spec: &SynthSceneSpec) -> Result<PredictionDump> {
    let nobj = data.categories.objects.len().max(1);
    let nrel = data.categories.relations.len().max(1);
    let mut images = Vec::with_capacity(data.images.len());
    for (image_id, gts) in data.gts_by_image()? {
        let mut rng = scene_rng(spec.seed ^ 0x5eed_de7e_c710_0000, image_id);
        let mut dets = Vec::new();
        let push = |dets: &mut Vec<HOIDetection>, h: BBox, o: BBox, obj: usize, rel: usize, score: f64| {
            let q = dets.len();
            dets.push(HOIDetection {
                human_box: h,
                object_box: o,
                relation_box: h.outer(o),
                object_class: obj,
                relation_class: rel,
                score,
                query_index: q,
            });
        };
        for g in &gts {
            for &r in &g.relation_classes {
                let h = jitter(&mut rng, g.human_box, spec.box_jitter);
                let o = jitter(&mut rng, g.object_box, spec.box_jitter);
                let s = rng.random_range(0.3..1.0);
                push(&mut dets, h, o, g.object_class, r, s);
                if rng.random_bool(spec.duplicate_rate) {
                    let h = jitter(&mut rng, g.human_box, 2.0 * spec.box_jitter);
                    let o = jitter(&mut rng, g.object_box, 2.0 * spec.box_jitter);
                    let s = rng.random_range(0.3..1.0);
                    push(&mut dets, h, o, g.object_class, r, s);
                }
            }
        }
        for _ in 0..spec.false_positives_per_image {
            let mut b = || {
                let w = rng.random_range(0.1..0.3);
                let h = rng.random_range(0.1..0.4);
                BBox::new(rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h)
            };
            let (h, o) = (b(), b());
            let obj = rng.random_range(0..nobj);
            let rel = rng.random_range(0..nrel);
            let s = rng.random_range(0.0..0.3);
            push(&mut dets, h, o, obj, rel, s);
        }
        images.push(ImageDetections { image_id, detections: dets });
    }
    Ok(PredictionDump { images })
}
