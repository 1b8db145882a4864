//! Seeded generator of flat-colored shape scenes whose relations follow from geometry.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::geometry::BoxPixels;
use crate::model::ImageTensor;

use super::lexicon::Lexicon;
use super::record::{save_jsonl, CaptionRecord, GroundTruthIndex, ImageKind, ImageRef, SampleRecord, SubjectGrounding};

pub const RELATIONS: [&str; 6] = ["above", "below", "left of", "right of", "inside", "overlapping"];

const COLORS: [(&str, [u8; 3]); 10] = [
    ("red", [220, 40, 40]),
    ("green", [40, 190, 60]),
    ("blue", [50, 80, 230]),
    ("yellow", [235, 220, 50]),
    ("cyan", [60, 220, 220]),
    ("magenta", [220, 60, 220]),
    ("orange", [245, 140, 30]),
    ("white", [245, 245, 245]),
    ("purple", [130, 50, 180]),
    ("gray", [128, 128, 128]),
];

const SHAPES: [&str; 3] = ["square", "circle", "diamond"];

const BACKGROUND: [u8; 3] = [16, 16, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_scenes: usize,
    pub num_test_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Canvas side in pixels.
    pub canvas: u32,
    pub min_size: u32,
    pub max_size: u32,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    /// Chance that a new object is nested inside an already placed one.
    pub inside_prob: f64,
    /// Share of training scenes whose triplets are emitted as grounded records.
    pub grounded_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_scenes: 200,
            num_test_scenes: 50,
            min_objects: 2,
            max_objects: 5,
            canvas: 64,
            min_size: 8,
            max_size: 24,
            colors: ["red", "green", "blue", "yellow"].map(String::from).to_vec(),
            shapes: ["square", "circle"].map(String::from).to_vec(),
            inside_prob: 0.15,
            grounded_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: String,
    pub bbox: BoxPixels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub side: u32,
    /// Row-major RGB8 pixels.
    pub pixels: Vec<u8>,
    pub objects: Vec<SceneObject>,
    pub is_test: bool,
}

impl Scene {
    pub fn image_ref(&self) -> ImageRef {
        ImageRef { kind: ImageKind::Synthetic, reference: self.name.clone(), width: self.side, height: self.side }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub scenes: Vec<Scene>,
    /// Grounded records from the training scenes selected for grounding.
    pub grounded: Vec<SampleRecord>,
    /// One caption per training scene covering all of its triplets.
    pub captions: Vec<CaptionRecord>,
    /// Every triplet of the test scenes, grounded.
    pub test_pool: Vec<SampleRecord>,
    pub lexicon: Lexicon,
}

impl SyntheticDataset {
    pub fn ground_truth(&self) -> Result<GroundTruthIndex> {
        GroundTruthIndex::new(self.grounded.iter().chain(&self.test_pool).cloned())
    }

    pub fn scene(&self, name: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.name == name)
    }

    /// Model input for a record's image, straight from the in-memory pixels.
    pub fn image_tensor(&self, r: &ImageRef, side: usize) -> Result<ImageTensor> {
        let s = self
            .scene(&r.reference)
            .ok_or_else(|| Error::Validation(format!("no synthetic scene named {}", r.reference)))?;
        ImageTensor::from_rgb8(&s.pixels, s.side, s.side, side)
    }
}

/// Geometric relation of `s` to `o`, or `None` when boxes touch without a clear
/// direction (such placements are rejected).
pub fn spatial_relation(s: &BoxPixels, o: &BoxPixels) -> Option<&'static str> {
    if s.strictly_inside(o) {
        return Some("inside");
    }
    if s.intersection_area(o) > 0.0 {
        return Some("overlapping");
    }
    let dx = (o.x1 - s.x2).max(s.x1 - o.x2).max(0.0);
    let dy = (o.y1 - s.y2).max(s.y1 - o.y2).max(0.0);
    if dy > dx {
        Some(if s.y2 <= o.y1 { "above" } else { "below" })
    } else if dx > dy {
        Some(if s.x2 <= o.x1 { "left of" } else { "right of" })
    } else {
        None
    }
}

struct Class {
    name: String,
    color: [u8; 3],
    shape: usize,
}

fn classes(spec: &SyntheticSpec) -> Result<Vec<Class>> {
    let mut out = Vec::new();
    for c in &spec.colors {
        let rgb = COLORS
            .iter()
            .find(|(n, _)| n == c)
            .ok_or_else(|| config(format!("unknown color {c:?}; known: {:?}", COLORS.map(|c| c.0))))?
            .1;
        for s in &spec.shapes {
            let shape = SHAPES.iter().position(|n| n == s).ok_or_else(|| config(format!("unknown shape {s:?}; known: {SHAPES:?}")))?;
            out.push(Class { name: format!("{c} {s}"), color: rgb, shape });
        }
    }
    Ok(out)
}

fn validate(spec: &SyntheticSpec, n_classes: usize) -> Result<()> {
    if spec.num_scenes == 0 {
        return Err(config("num_scenes must be at least 1"));
    }
    if spec.min_objects < 2 || spec.min_objects > spec.max_objects {
        return Err(config(format!("object range [{}, {}] invalid", spec.min_objects, spec.max_objects)));
    }
    if spec.max_objects > n_classes {
        return Err(config(format!("{} objects per scene need at least as many classes, have {n_classes}", spec.max_objects)));
    }
    if spec.min_size == 0 || spec.min_size > spec.max_size {
        return Err(config(format!("size range [{}, {}] invalid", spec.min_size, spec.max_size)));
    }
    for (name, v) in [("inside_prob", spec.inside_prob), ("grounded_fraction", spec.grounded_fraction)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(config(format!("{name} {v} outside [0, 1]")));
        }
    }
    if spec.max_size > spec.canvas {
        return Err(Error::Generation(format!("canvas {} is smaller than max object size {}", spec.canvas, spec.max_size)));
    }
    Ok(())
}

/// A new box must keep every relation well defined and must not hide too much of,
/// or be hidden by, a partially overlapping neighbour.
fn acceptable(b: &BoxPixels, placed: &[BoxPixels]) -> bool {
    placed.iter().all(|p| {
        let (Some(r1), Some(_)) = (spatial_relation(b, p), spatial_relation(p, b)) else {
            return false;
        };
        if r1 == "overlapping" && !p.strictly_inside(b) {
            let overlap = b.intersection_area(p);
            return overlap <= 0.25 * b.area().min(p.area());
        }
        if r1 == "inside" || p.strictly_inside(b) {
            // Nested boxes need a visible rim on every side.
            let (inner, outer) = if r1 == "inside" { (b, p) } else { (p, b) };
            let rim = [inner.x1 - outer.x1, inner.y1 - outer.y1, outer.x2 - inner.x2, outer.y2 - inner.y2];
            return rim.iter().all(|&m| m >= 2.0);
        }
        true
    })
}

fn propose(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, placed: &[BoxPixels]) -> Option<BoxPixels> {
    let nest = !placed.is_empty() && rng.random_bool(spec.inside_prob);
    if nest {
        let hosts: Vec<&BoxPixels> =
            placed.iter().filter(|p| p.width() as u32 >= spec.min_size + 4 && p.height() as u32 >= spec.min_size + 4).collect();
        if let Some(host) = hosts.choose(rng) {
            let w = rng.random_range(spec.min_size..=host.width() as u32 - 4);
            let h = rng.random_range(spec.min_size..=host.height() as u32 - 4);
            let x = rng.random_range(host.x1 as u32 + 2..=host.x2 as u32 - 2 - w);
            let y = rng.random_range(host.y1 as u32 + 2..=host.y2 as u32 - 2 - h);
            return Some(BoxPixels::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64));
        }
    }
    let w = rng.random_range(spec.min_size..=spec.max_size);
    let h = rng.random_range(spec.min_size..=spec.max_size);
    let x = rng.random_range(0..=spec.canvas - w);
    let y = rng.random_range(0..=spec.canvas - h);
    Some(BoxPixels::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
}

fn place(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, n: usize) -> Result<Vec<BoxPixels>> {
    for _ in 0..100 {
        let mut placed: Vec<BoxPixels> = Vec::with_capacity(n);
        for _ in 0..400 {
            if placed.len() == n {
                break;
            }
            if let Some(b) = propose(rng, spec, &placed) {
                if acceptable(&b, &placed) {
                    placed.push(b);
                }
            }
        }
        if placed.len() == n {
            return Ok(placed);
        }
    }
    Err(Error::Generation(format!(
        "could not place {n} objects of size {}..{} on a {} canvas",
        spec.min_size, spec.max_size, spec.canvas
    )))
}

fn covers(shape: usize, b: &BoxPixels, x: u32, y: u32) -> bool {
    let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
    let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
    let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
    match shape {
        0 => true,
        1 => dx * dx + dy * dy <= 1.0,
        _ => dx.abs() + dy.abs() <= 1.0,
    }
}

fn render(side: u32, objects: &[(&Class, BoxPixels)]) -> Vec<u8> {
    let mut px: Vec<u8> = BACKGROUND.repeat((side * side) as usize);
    let mut order: Vec<usize> = (0..objects.len()).collect();
    // Larger objects first so nested ones stay visible.
    order.sort_by(|&a, &b| objects[b].1.area().total_cmp(&objects[a].1.area()).then(a.cmp(&b)));
    for i in order {
        let (cls, b) = objects[i];
        for y in b.y1 as u32..b.y2 as u32 {
            for x in b.x1 as u32..b.x2 as u32 {
                if covers(cls.shape, &b, x, y) {
                    let o = ((y * side + x) * 3) as usize;
                    px[o..o + 3].copy_from_slice(&cls.color);
                }
            }
        }
    }
    px
}

pub fn synthetic_lexicon(spec: &SyntheticSpec) -> Result<Lexicon> {
    let nouns: Vec<String> = classes(spec)?.into_iter().map(|c| c.name).collect();
    Lexicon::new(
        &["above", "below", "left", "right", "inside", "overlapping"].map(String::from),
        &["of".to_string()],
        &["a", "an", "the"].map(String::from),
        &nouns,
    )
}

/// Deterministic in `spec`: training scenes come first, then test scenes.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let classes = classes(spec)?;
    validate(spec, classes.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ds = SyntheticDataset {
        scenes: Vec::new(),
        grounded: Vec::new(),
        captions: Vec::new(),
        test_pool: Vec::new(),
        lexicon: synthetic_lexicon(spec)?,
    };
    for k in 0..spec.num_scenes + spec.num_test_scenes {
        let is_test = k >= spec.num_scenes;
        let name = if is_test { format!("test_{:05}", k - spec.num_scenes) } else { format!("train_{k:05}") };
        let n = rng.random_range(spec.min_objects..=spec.max_objects);
        let boxes = place(&mut rng, spec, n)?;
        let mut picked: Vec<&Class> = classes.iter().collect();
        picked.shuffle(&mut rng);
        let objects: Vec<(&Class, BoxPixels)> = picked.into_iter().zip(boxes).collect();
        let scene = Scene {
            name: name.clone(),
            side: spec.canvas,
            pixels: render(spec.canvas, &objects),
            objects: objects.iter().map(|(c, b)| SceneObject { class: c.name.clone(), bbox: *b }).collect(),
            is_test,
        };
        let image = scene.image_ref();
        let mut records = Vec::new();
        let mut sentences = Vec::new();
        for (si, (sc, sb)) in objects.iter().enumerate() {
            for (oi, (oc, ob)) in objects.iter().enumerate() {
                if si == oi {
                    continue;
                }
                let rel = spatial_relation(sb, ob).expect("placement guarantees a relation");
                sentences.push(format!("a {} {rel} a {}", sc.name, oc.name));
                records.push(SampleRecord {
                    id: format!("{name}_{si}_{oi}"),
                    image: image.clone(),
                    subject: sc.name.clone(),
                    subject_box: *sb,
                    relation: rel.to_string(),
                    object: oc.name.clone(),
                    object_box: Some(*ob),
                    grounded: true,
                    source: "synthetic".into(),
                });
            }
        }
        if is_test {
            ds.test_pool.extend(records);
        } else {
            if rng.random_bool(spec.grounded_fraction) {
                ds.grounded.extend(records);
            }
            ds.captions.push(CaptionRecord {
                id: format!("{name}_caption"),
                image,
                caption: sentences.join(". ") + ".",
                subjects: objects.iter().map(|(c, b)| SubjectGrounding { phrase: c.name.clone(), bbox: *b }).collect(),
            });
        }
        ds.scenes.push(scene);
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(rename = "ref")]
    pub reference: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub split: String,
}

pub fn write_ppm(path: &Path, rgb: &[u8], w: u32, h: u32) -> Result<()> {
    let f = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(f)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(rgb, w, h, ExtendedColorType::Rgb8)?;
    Ok(())
}

/// Writes `images/*.ppm`, `manifest.jsonl`, `grounded.jsonl`, `captions.jsonl`,
/// `test_pool.jsonl` and `lexicon.txt` under `dir`.
pub fn write_synthetic_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut manifest = Vec::with_capacity(ds.scenes.len());
    for s in &ds.scenes {
        let rel = format!("images/{}.ppm", s.name);
        write_ppm(&dir.join(&rel), &s.pixels, s.side, s.side)?;
        manifest.push(ManifestEntry {
            reference: s.name.clone(),
            path: rel,
            width: s.side,
            height: s.side,
            split: if s.is_test { "test" } else { "train" }.into(),
        });
    }
    save_jsonl(&dir.join("manifest.jsonl"), &manifest)?;
    save_jsonl(&dir.join("grounded.jsonl"), &ds.grounded)?;
    save_jsonl(&dir.join("captions.jsonl"), &ds.captions)?;
    save_jsonl(&dir.join("test_pool.jsonl"), &ds.test_pool)?;
    ds.lexicon.save(&dir.join("lexicon.txt"))
}
