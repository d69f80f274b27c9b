//! Synthetic oracle scenes and dataset files.
//!
//! A scene is a square image holding a few non-overlapping objects, each with
//! an attribute and a noun. Visual features come from a continuous feature
//! field defined over the image: a background vector everywhere, and inside
//! each object its identity vector plus position codes that vary linearly and
//! quadratically with the relative position inside the object. A proposal's
//! feature is the exact mean of the field over its box, and the global map is
//! the exact mean over each cell of an `S × S` grid. Proposal features
//! therefore reveal how a box sits relative to the object it overlaps.
//!
//! Dataset files are JSON lines, one [`SampleRecord`] per line:
//!
//! | key          | value                                                     |
//! |--------------|-----------------------------------------------------------|
//! | `image_id`   | string, unique per file                                   |
//! | `split`      | `"train"`, `"val"` or `"test"`                            |
//! | `labeled`    | bool, whether box labels may be used for training         |
//! | `width`      | image width                                               |
//! | `height`     | image height                                              |
//! | `proposals`  | list of `{"box": [cx, cy, w, h], "feature": [..]}`        |
//! | `queries`    | list of `{"id", "text", "tokens": [ids], "gt": [cx, cy, w, h]}` |
//! | `global_map` | `null`, `"sidecar"`, or `{"channels", "size", "values"}`  |
//!
//! Inline and sidecar maps are stored channel-major (`[C × S × S]`). The
//! sidecar file next to `data.jsonl` is `data.gfm`: the magic bytes `OBXF`,
//! then little-endian `u32` version, `C` and `S`, then per image a `u32` id
//! length, the UTF-8 id, and `C·S·S` little-endian `f64` values.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{clip_box, image_bounds, iou_unchecked, BBox};
use crate::textenc::Vocabulary;
use crate::{Error, Result};

pub const SIDECAR_MAGIC: &[u8; 4] = b"OBXF";
pub const SIDECAR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Image-level feature map, stored cell-major: row `y·S + x` holds the `C`
/// channels of grid cell `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub size: usize,
    pub cells: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, size: usize, cells: Vec<f64>) -> Result<Self> {
        if channels == 0 || size == 0 || cells.len() != channels * size * size {
            return Err(Error::Shape(format!(
                "feature map {channels}×{size}×{size} with {} values",
                cells.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            size,
            cells,
        })
    }

    pub fn from_channel_major(channels: usize, size: usize, values: &[f64]) -> Result<Self> {
        let s2 = size * size;
        if values.len() != channels * s2 {
            return Err(Error::Shape("channel-major map length".into()));
        }
        let mut cells = vec![0.0; values.len()];
        for c in 0..channels {
            for p in 0..s2 {
                cells[p * channels + c] = values[c * s2 + p];
            }
        }
        FeatureMap::new(channels, size, cells)
    }

    pub fn to_channel_major(&self) -> Vec<f64> {
        let s2 = self.size * self.size;
        let mut out = vec![0.0; self.cells.len()];
        for p in 0..s2 {
            for c in 0..self.channels {
                out[c * s2 + p] = self.cells[p * self.channels + c];
            }
        }
        out
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let p = y * self.size + x;
        &self.cells[p * self.channels..(p + 1) * self.channels]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub tokens: Vec<usize>,
    pub gt: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image_id: String,
    pub split: Split,
    pub labeled: bool,
    pub width: f64,
    pub height: f64,
    pub proposals: Vec<Proposal>,
    pub queries: Vec<Query>,
    pub global_map: Option<FeatureMap>,
}

impl SampleRecord {
    pub fn proposal_boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }

    pub fn bounds(&self) -> Result<BBox> {
        image_bounds(self.width, self.height)
    }
}

/// Generator settings for oracle scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub objects_min: usize,
    pub objects_max: usize,
    pub attributes: Vec<String>,
    pub nouns: Vec<String>,
    pub determiners: Vec<String>,
    /// Side length of the square image.
    pub extent: f64,
    pub object_size_min: f64,
    pub object_size_max: f64,
    /// Proposals per image, jittered copies included.
    pub proposals: usize,
    /// Jittered copies of each object among the proposals.
    pub jitter_copies: usize,
    /// Center shift as a fraction of box extent and log-extent change.
    pub jitter: f64,
    pub feature_dim: usize,
    pub channels: usize,
    pub grid: usize,
    pub feature_noise: f64,
    pub instance_noise: f64,
    /// Seed of the attribute, noun and position-code vectors shared by all scenes.
    pub world_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        SceneConfig {
            objects_min: 2,
            objects_max: 4,
            attributes: s(&[
                "red", "green", "blue", "yellow", "purple", "orange", "black", "white",
            ]),
            nouns: s(&["ball", "box", "cup", "car", "dog", "cat", "tree", "hat"]),
            determiners: s(&["the", "a"]),
            extent: 64.0,
            object_size_min: 12.0,
            object_size_max: 28.0,
            proposals: 12,
            jitter_copies: 1,
            jitter: 0.1,
            feature_dim: 32,
            channels: 32,
            grid: 5,
            feature_noise: 0.05,
            instance_noise: 0.1,
            world_seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return bad("object count range must be positive and ordered");
        }
        if self.attributes.is_empty() || self.nouns.is_empty() || self.determiners.is_empty() {
            return bad("grammar inventories must be non-empty");
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad("jitter must be a finite non-negative number");
        }
        if !(self.extent > 0.0)
            || !(self.object_size_min > 0.0)
            || self.object_size_min > self.object_size_max
            || self.object_size_max > self.extent
        {
            return bad("object sizes must lie in (0, extent]");
        }
        if self.jitter_copies == 0 || self.proposals < self.objects_max * self.jitter_copies {
            return bad("proposals must cover every jittered object copy");
        }
        if self.feature_dim == 0 || self.grid == 0 || self.channels == 0 {
            return bad("dimensions must be positive");
        }
        if self.channels > self.feature_dim {
            return bad("channels cannot exceed feature_dim");
        }
        Ok(())
    }
}

/// Vectors shared by every scene of a configuration.
#[derive(Clone, Debug)]
pub struct World {
    pub background: Vec<f64>,
    pub attributes: Vec<Vec<f64>>,
    pub nouns: Vec<Vec<f64>>,
    /// Codes multiplied by `u`, `v`, `u²`, `v²` inside an object.
    pub position: [Vec<f64>; 4],
}

impl World {
    pub fn new(cfg: &SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        let d = cfg.feature_dim;
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        let vec =
            |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| normal.sample(rng)).collect() };
        let background = vec(&mut rng);
        let attributes = (0..cfg.attributes.len()).map(|_| vec(&mut rng)).collect();
        let nouns = (0..cfg.nouns.len()).map(|_| vec(&mut rng)).collect();
        let position = [vec(&mut rng), vec(&mut rng), vec(&mut rng), vec(&mut rng)];
        World {
            background,
            attributes,
            nouns,
            position,
        }
    }
}

/// One placed object with its identity vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub bbox: BBox,
    pub attribute: usize,
    pub noun: usize,
    pub identity: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub extent: f64,
    pub objects: Vec<SceneObject>,
    pub background: Vec<f64>,
    pub position: [Vec<f64>; 4],
}

impl Scene {
    /// Integral of the feature field over the axis-aligned rectangle `rect`.
    fn integrate(&self, rect: [f64; 4]) -> Vec<f64> {
        let [x0, y0, x1, y1] = rect;
        let total = ((x1 - x0) * (y1 - y0)).max(0.0);
        let mut acc = vec![0.0; self.background.len()];
        let mut covered = 0.0;
        for obj in &self.objects {
            let [ox0, oy0, ox1, oy1] = obj.bbox.corners();
            let (ix0, ix1) = (x0.max(ox0), x1.min(ox1));
            let (iy0, iy1) = (y0.max(oy0), y1.min(oy1));
            if ix1 <= ix0 || iy1 <= iy0 {
                continue;
            }
            let (w, h) = (obj.bbox.w, obj.bbox.h);
            let (a0, a1) = ((ix0 - ox0) / w, (ix1 - ox0) / w);
            let (b0, b1) = ((iy0 - oy0) / h, (iy1 - oy0) / h);
            let (du, dv) = (a1 - a0, b1 - b0);
            let jac = w * h;
            let m0 = du * dv * jac;
            let mu = (a1 * a1 - a0 * a0) / 2.0 * dv * jac;
            let mv = (b1 * b1 - b0 * b0) / 2.0 * du * jac;
            let muu = (a1.powi(3) - a0.powi(3)) / 3.0 * dv * jac;
            let mvv = (b1.powi(3) - b0.powi(3)) / 3.0 * du * jac;
            covered += m0;
            for (k, a) in acc.iter_mut().enumerate() {
                *a += m0 * obj.identity[k]
                    + mu * self.position[0][k]
                    + mv * self.position[1][k]
                    + muu * self.position[2][k]
                    + mvv * self.position[3][k];
            }
        }
        let bg = (total - covered).max(0.0);
        for (a, b) in acc.iter_mut().zip(&self.background) {
            *a += bg * b;
        }
        acc
    }

    /// Mean of the feature field over `b`, which must have positive area.
    pub fn region_mean(&self, b: &BBox) -> Vec<f64> {
        let area = b.area();
        self.integrate(b.corners())
            .into_iter()
            .map(|v| v / area)
            .collect()
    }

    /// Exact adaptive average pooling of the field's leading `channels`
    /// coordinates onto a `size × size` grid.
    pub fn global_map(&self, channels: usize, size: usize) -> FeatureMap {
        let cell = self.extent / size as f64;
        let mut cells = Vec::with_capacity(size * size * channels);
        for y in 0..size {
            for x in 0..size {
                let rect = [
                    x as f64 * cell,
                    y as f64 * cell,
                    (x + 1) as f64 * cell,
                    (y + 1) as f64 * cell,
                ];
                let area = cell * cell;
                cells.extend(
                    self.integrate(rect)
                        .into_iter()
                        .take(channels)
                        .map(|v| v / area),
                );
            }
        }
        FeatureMap {
            channels,
            size,
            cells,
        }
    }
}

/// Shifts the center by up to `jitter` of the extent and scales each extent
/// by `exp(U(-jitter, jitter))`.
pub fn jitter_box<R: Rng + ?Sized>(b: &BBox, jitter: f64, rng: &mut R) -> BBox {
    if jitter == 0.0 {
        return *b;
    }
    let mut u = || rng.random_range(-jitter..=jitter);
    BBox {
        cx: b.cx + u() * b.w,
        cy: b.cy + u() * b.h,
        w: b.w * u().exp(),
        h: b.h * u().exp(),
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Places objects for scene `index` of a run seeded with `seed`.
pub fn generate_scene_objects(
    cfg: &SceneConfig,
    world: &World,
    seed: u64,
    index: u64,
) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = scene_rng(seed, index);
    let k = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let combos = cfg.attributes.len() * cfg.nouns.len();
    if combos < k {
        return Err(Error::Config(format!(
            "grammar yields {combos} distinct objects, scene needs {k}"
        )));
    }
    let mut ids: Vec<usize> = (0..combos).collect();
    ids.shuffle(&mut rng);
    let noise = Normal::new(
        0.0,
        cfg.instance_noise.max(0.0) / (cfg.feature_dim as f64).sqrt(),
    )
    .map_err(|e| Error::Config(e.to_string()))?;

    let mut placed: Vec<BBox> = Vec::with_capacity(k);
    'outer: for _attempt in 0..100 {
        placed.clear();
        for _ in 0..k {
            let mut ok = false;
            for _try in 0..200 {
                let w = rng.random_range(cfg.object_size_min..=cfg.object_size_max);
                let h = rng.random_range(cfg.object_size_min..=cfg.object_size_max);
                let cx = rng.random_range(w / 2.0..=cfg.extent - w / 2.0);
                let cy = rng.random_range(h / 2.0..=cfg.extent - h / 2.0);
                let b = BBox { cx, cy, w, h };
                if placed.iter().all(|p| p.intersection_area(&b) == 0.0) {
                    placed.push(b);
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'outer;
            }
        }
        break;
    }
    if placed.len() != k {
        return Err(Error::Config(
            "could not place non-overlapping objects".into(),
        ));
    }
    let objects = placed
        .into_iter()
        .zip(&ids)
        .map(|(bbox, &id)| {
            let (attribute, noun) = (id / cfg.nouns.len(), id % cfg.nouns.len());
            let identity = world.attributes[attribute]
                .iter()
                .zip(&world.nouns[noun])
                .map(|(a, n)| a + n + noise.sample(&mut rng))
                .collect();
            SceneObject {
                bbox,
                attribute,
                noun,
                identity,
            }
        })
        .collect();
    Ok(Scene {
        extent: cfg.extent,
        objects,
        background: world.background.clone(),
        position: world.position.clone(),
    })
}

/// `copies` jittered versions of every object followed by random distractors
/// up to `n` boxes, shuffled. Features are region means of the field plus
/// Gaussian noise.
pub fn make_proposals<R: Rng + ?Sized>(
    scene: &Scene,
    n: usize,
    jitter: f64,
    copies: usize,
    feature_noise: f64,
    rng: &mut R,
) -> Result<Vec<Proposal>> {
    let k = scene.objects.len() * copies;
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "{n} proposals cannot hold {k} object copies"
        )));
    }
    let bounds = image_bounds(scene.extent, scene.extent)?;
    let mut boxes = Vec::with_capacity(n);
    for obj in &scene.objects {
        for _ in 0..copies {
            let j = jitter_box(&obj.bbox, jitter, rng);
            boxes.push(clip_box(&j, &bounds).unwrap_or(obj.bbox));
        }
    }
    while boxes.len() < n {
        let w = rng.random_range(0.1 * scene.extent..=0.6 * scene.extent);
        let h = rng.random_range(0.1 * scene.extent..=0.6 * scene.extent);
        let cx = rng.random_range(w / 2.0..=scene.extent - w / 2.0);
        let cy = rng.random_range(h / 2.0..=scene.extent - h / 2.0);
        boxes.push(BBox { cx, cy, w, h });
    }
    boxes.shuffle(rng);
    let dim = scene.background.len();
    let noise = Normal::new(0.0, feature_noise.max(0.0) / (dim as f64).sqrt())
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(boxes
        .into_iter()
        .map(|bbox| {
            let mut feature = scene.region_mean(&bbox);
            for v in &mut feature {
                *v += noise.sample(rng);
            }
            Proposal { bbox, feature }
        })
        .collect())
}

/// Builds the vocabulary of the scene grammar in a fixed order.
pub fn grammar_vocabulary(cfg: &SceneConfig) -> Vocabulary {
    let mut v = Vocabulary::new();
    for w in cfg
        .determiners
        .iter()
        .chain(&cfg.attributes)
        .chain(&cfg.nouns)
    {
        v.insert(w);
    }
    v
}

/// Generates scene `index`: objects, one query per object, proposals and
/// the global map. A pure function of `(cfg, seed, index)`.
pub fn generate_scene(
    cfg: &SceneConfig,
    world: &World,
    vocab: &Vocabulary,
    seed: u64,
    index: u64,
    split: Split,
) -> Result<SampleRecord> {
    let scene = generate_scene_objects(cfg, world, seed, index)?;
    // proposal and phrase draws use their own stream so the object layout
    // does not depend on them
    let mut rng = scene_rng(seed ^ 0x9e37_79b9_7f4a_7c15, index);
    let proposals = make_proposals(
        &scene,
        cfg.proposals,
        cfg.jitter,
        cfg.jitter_copies,
        cfg.feature_noise,
        &mut rng,
    )?;
    let image_id = format!("scene-{index:06}");
    let queries = scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let det = &cfg.determiners[rng.random_range(0..cfg.determiners.len())];
            let text = format!(
                "{det} {} {}",
                cfg.attributes[o.attribute], cfg.nouns[o.noun]
            );
            Query {
                id: format!("{image_id}/{i}"),
                tokens: vocab.encode(&text),
                text,
                gt: o.bbox,
            }
        })
        .collect();
    Ok(SampleRecord {
        image_id,
        split,
        labeled: true,
        width: cfg.extent,
        height: cfg.extent,
        proposals,
        queries,
        global_map: Some(scene.global_map(cfg.channels, cfg.grid)),
    })
}

/// Scene counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Generates `train + val + test` scenes with consecutive indices.
pub fn generate_dataset(
    cfg: &SceneConfig,
    sizes: SplitSizes,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vocabulary)> {
    cfg.validate()?;
    let world = World::new(cfg);
    let vocab = grammar_vocabulary(cfg);
    let plan = std::iter::repeat_n(Split::Train, sizes.train)
        .chain(std::iter::repeat_n(Split::Val, sizes.val))
        .chain(std::iter::repeat_n(Split::Test, sizes.test));
    let records = plan
        .enumerate()
        .map(|(i, split)| generate_scene(cfg, &world, &vocab, seed, i as u64, split))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, vocab))
}

/// Flags exactly `round(p·n)` records as labeled, chosen by a seeded shuffle.
pub fn split_annotations(records: &mut [SampleRecord], p: f64, seed: u64) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "annotation fraction {p} outside [0, 1]"
        )));
    }
    let n = records.len();
    let k = ((p * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for r in records.iter_mut() {
        r.labeled = false;
    }
    for &i in &order[..k] {
        records[i].labeled = true;
    }
    Ok(k)
}

pub fn records_in(records: &[SampleRecord], split: Split) -> Vec<SampleRecord> {
    records
        .iter()
        .filter(|r| r.split == split)
        .cloned()
        .collect()
}

#[derive(Serialize, Deserialize)]
struct WireProposal {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    feature: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WireQuery {
    id: String,
    text: String,
    tokens: Vec<usize>,
    gt: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct InlineMap {
    channels: usize,
    size: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WireMap {
    Reference(String),
    Inline(InlineMap),
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    image_id: String,
    split: Split,
    labeled: bool,
    width: f64,
    height: f64,
    proposals: Vec<WireProposal>,
    queries: Vec<WireQuery>,
    #[serde(default)]
    global_map: Option<WireMap>,
}

const SIDECAR_REF: &str = "sidecar";

pub fn sidecar_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("gfm")
}

/// Writes `records` as JSON lines plus the sidecar map file when any record
/// carries a global map.
pub fn write_dataset(records: &[SampleRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut maps: Vec<(&str, &FeatureMap)> = Vec::new();
    for r in records {
        if let Some(m) = &r.global_map {
            maps.push((&r.image_id, m));
        }
        let wire = WireRecord {
            image_id: r.image_id.clone(),
            split: r.split,
            labeled: r.labeled,
            width: r.width,
            height: r.height,
            proposals: r
                .proposals
                .iter()
                .map(|p| WireProposal {
                    bbox: p.bbox.to_array(),
                    feature: p.feature.clone(),
                })
                .collect(),
            queries: r
                .queries
                .iter()
                .map(|q| WireQuery {
                    id: q.id.clone(),
                    text: q.text.clone(),
                    tokens: q.tokens.clone(),
                    gt: q.gt.to_array(),
                })
                .collect(),
            global_map: r
                .global_map
                .as_ref()
                .map(|_| WireMap::Reference(SIDECAR_REF.into())),
        };
        serde_json::to_writer(&mut out, &wire)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    if !maps.is_empty() {
        write_sidecar(&sidecar_path(path), &maps)?;
    }
    Ok(())
}

fn write_sidecar(path: &Path, maps: &[(&str, &FeatureMap)]) -> Result<()> {
    let (c, s) = (maps[0].1.channels, maps[0].1.size);
    if maps.iter().any(|(_, m)| m.channels != c || m.size != s) {
        return Err(Error::Shape("sidecar maps must share C and S".into()));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut put = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    put(SIDECAR_MAGIC)?;
    put(&SIDECAR_VERSION.to_le_bytes())?;
    put(&(c as u32).to_le_bytes())?;
    put(&(s as u32).to_le_bytes())?;
    for (id, m) in maps {
        put(&(id.len() as u32).to_le_bytes())?;
        put(id.as_bytes())?;
        for v in m.to_channel_major() {
            put(&v.to_le_bytes())?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_sidecar(path: &Path) -> Result<BTreeMap<String, FeatureMap>> {
    let file = std::fs::File::open(path)
        .map_err(|_| Error::MissingAsset(format!("feature map file {}", path.display())))?;
    let mut inp = BufReader::new(file);
    let corrupt = |m: &str| Error::parse(path, 0, m);
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic)
        .map_err(|_| corrupt("truncated header"))?;
    if &magic != SIDECAR_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_at = |inp: &mut BufReader<std::fs::File>| -> Result<Option<u32>> {
        let mut b = [0u8; 4];
        match inp.read_exact(&mut b) {
            Ok(()) => Ok(Some(u32::from_le_bytes(b))),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    };
    let header = |v: Option<u32>| v.ok_or_else(|| corrupt("truncated header"));
    let version = header(u32_at(&mut inp)?)?;
    if version != SIDECAR_VERSION {
        return Err(corrupt("unsupported version"));
    }
    let c = header(u32_at(&mut inp)?)? as usize;
    let s = header(u32_at(&mut inp)?)? as usize;
    let mut maps = BTreeMap::new();
    while let Some(len) = u32_at(&mut inp)? {
        let mut id = vec![0u8; len as usize];
        inp.read_exact(&mut id)
            .map_err(|_| corrupt("truncated image id"))?;
        let id = String::from_utf8(id).map_err(|_| corrupt("image id is not UTF-8"))?;
        let mut buf = vec![0u8; c * s * s * 8];
        inp.read_exact(&mut buf)
            .map_err(|_| corrupt("truncated feature values"))?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        maps.insert(id, FeatureMap::from_channel_major(c, s, &vals)?);
    }
    Ok(maps)
}

fn from_wire(
    w: WireRecord,
    path: &Path,
    line: usize,
    sidecar: &mut Option<BTreeMap<String, FeatureMap>>,
) -> Result<SampleRecord> {
    let at = |e: Error| Error::parse(path, line, e.to_string());
    if !(w.width > 0.0 && w.height > 0.0) {
        return Err(at(Error::InvalidBox(format!(
            "image extent {}×{}",
            w.width, w.height
        ))));
    }
    let bounds = image_bounds(w.width, w.height).map_err(at)?;
    let proposals = w
        .proposals
        .into_iter()
        .map(|p| {
            Ok(Proposal {
                bbox: BBox::from_array(p.bbox)?,
                feature: p.feature,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(at)?;
    if let Some(first) = proposals.first() {
        if proposals
            .iter()
            .any(|p| p.feature.len() != first.feature.len())
        {
            return Err(at(Error::Shape(
                "proposal features differ in length".into(),
            )));
        }
    }
    let queries = w
        .queries
        .into_iter()
        .map(|q| {
            let gt = BBox::from_array(q.gt)?;
            if clip_box(&gt, &bounds).ok() != Some(gt) {
                return Err(Error::InvalidBox(format!(
                    "ground truth {gt:?} outside the image"
                )));
            }
            Ok(Query {
                id: q.id,
                text: q.text,
                tokens: q.tokens,
                gt,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(at)?;
    let global_map = match w.global_map {
        None => None,
        Some(WireMap::Inline(m)) => {
            Some(FeatureMap::from_channel_major(m.channels, m.size, &m.values).map_err(at)?)
        }
        Some(WireMap::Reference(r)) if r == SIDECAR_REF => {
            if sidecar.is_none() {
                *sidecar = Some(read_sidecar(&sidecar_path(path))?);
            }
            let maps = sidecar.as_ref().expect("loaded above");
            Some(maps.get(&w.image_id).cloned().ok_or_else(|| {
                Error::MissingAsset(format!("feature map for {} (line {line})", w.image_id))
            })?)
        }
        Some(WireMap::Reference(r)) => {
            return Err(at(Error::InvalidArgument(format!(
                "unknown map reference {r:?}"
            ))))
        }
    };
    Ok(SampleRecord {
        image_id: w.image_id,
        split: w.split,
        labeled: w.labeled,
        width: w.width,
        height: w.height,
        proposals,
        queries,
        global_map,
    })
}

/// Streams records from a JSON-lines file; blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sidecar = None;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(from_wire(wire, path, i + 1, &mut sidecar)?);
    }
    Ok(out)
}

/// Result of reading an Entities-style annotation directory.
#[derive(Clone, Debug)]
pub struct EntitiesImport {
    pub records: Vec<SampleRecord>,
    pub vocab: Vocabulary,
    /// Phrases skipped because no box carries their entity id.
    pub skipped: usize,
}

/// Reads `<dir>/Annotations/*.xml` and `<dir>/Sentences/*.txt`. Phrases are
/// the bracketed `[/EN#id/type words]` spans; multiple boxes of one entity are
/// merged to their union hull. Records carry no proposals or feature maps.
pub fn import_entities(dir: &Path) -> Result<EntitiesImport> {
    let phrase_re = regex::Regex::new(r"\[/EN#(\d+)/(\S+) ([^\]]+)\]").expect("valid regex");
    let ann_dir = dir.join("Annotations");
    let sent_dir = dir.join("Sentences");
    let mut vocab = Vocabulary::new();
    let mut records = Vec::new();
    let mut skipped = 0;
    if !ann_dir.is_dir() {
        return Ok(EntitiesImport {
            records,
            vocab,
            skipped,
        });
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&ann_dir)
        .map_err(|e| Error::io(&ann_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xml"))
        .collect();
    files.sort();
    for ann in files {
        let stem = ann
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let xml = std::fs::read_to_string(&ann).map_err(|e| Error::io(&ann, e))?;
        let doc = roxmltree::Document::parse(&xml)
            .map_err(|e| Error::parse(&ann, e.pos().row as usize, e.to_string()))?;
        let num = |node: roxmltree::Node, tag: &str| -> Result<f64> {
            node.children()
                .find(|c| c.has_tag_name(tag))
                .and_then(|c| c.text())
                .and_then(|t| t.trim().parse().ok())
                .ok_or_else(|| {
                    Error::parse(
                        &ann,
                        doc.text_pos_at(node.range().start).row as usize,
                        format!("missing <{tag}>"),
                    )
                })
        };
        let size = doc.descendants().find(|n| n.has_tag_name("size"));
        let (width, height) = match size {
            Some(s) => (num(s, "width")?, num(s, "height")?),
            None => return Err(Error::parse(&ann, 1, "missing <size>")),
        };
        let mut boxes: BTreeMap<String, BBox> = BTreeMap::new();
        for obj in doc.descendants().filter(|n| n.has_tag_name("object")) {
            let Some(bnd) = obj.children().find(|c| c.has_tag_name("bndbox")) else {
                continue;
            };
            let b = BBox::from_corners(
                num(bnd, "xmin")?,
                num(bnd, "ymin")?,
                num(bnd, "xmax")?,
                num(bnd, "ymax")?,
            )
            .map_err(|e| {
                Error::parse(
                    &ann,
                    doc.text_pos_at(bnd.range().start).row as usize,
                    e.to_string(),
                )
            })?;
            for name in obj.children().filter(|c| c.has_tag_name("name")) {
                let id = name.text().unwrap_or_default().trim().to_string();
                let merged = boxes.get(&id).map_or(b, |prev| prev.union_hull(&b));
                boxes.insert(id, merged);
            }
        }
        let sent = sent_dir.join(format!("{stem}.txt"));
        let text = match std::fs::read_to_string(&sent) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(&sent, e)),
        };
        let mut queries = Vec::new();
        for (li, line) in text.lines().enumerate() {
            for (pi, cap) in phrase_re.captures_iter(line).enumerate() {
                let phrase = cap[3].to_string();
                let Some(gt) = boxes.get(&cap[1]) else {
                    skipped += 1;
                    continue;
                };
                queries.push(Query {
                    id: format!("{stem}/{li}/{pi}"),
                    tokens: vocab.encode_extend(&phrase),
                    text: phrase,
                    gt: *gt,
                });
            }
        }
        records.push(SampleRecord {
            image_id: stem,
            split: Split::Train,
            labeled: true,
            width,
            height,
            proposals: Vec::new(),
            queries,
            global_map: None,
        });
    }
    Ok(EntitiesImport {
        records,
        vocab,
        skipped,
    })
}

/// Fraction of queries with some proposal reaching `threshold` IoU.
pub(crate) fn coverage(records: &[SampleRecord], threshold: f64) -> (usize, usize) {
    let mut covered = 0;
    let mut total = 0;
    for r in records {
        for q in &r.queries {
            total += 1;
            if r.proposals
                .iter()
                .any(|p| iou_unchecked(&p.bbox, &q.gt) >= threshold)
            {
                covered += 1;
            }
        }
    }
    (covered, total)
}
