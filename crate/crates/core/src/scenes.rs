//! Synthetic long-tail scenes.
//!
//! A scene is a set of ground-truth objects whose classes follow a fixed
//! long-tail distribution. Each object carries a feature vector drawn around
//! its class centroid; proposals inherit these features, standing in for
//! pooled RoI features so that box heads can be trained without a backbone.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::{self, Rng};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub name: String,
    pub proportion: f64,
    pub group: Group,
    pub feature_centroid: Vec<f64>,
}

/// Class frequencies (percent) and groups of the VisDrone training set.
pub const VISDRONE_CLASSES: [(&str, f64, Group); 10] = [
    ("ped", 23.1, Group::Head),
    ("person", 7.9, Group::Head),
    ("bicycle", 3.1, Group::Tail),
    ("car", 42.2, Group::Head),
    ("van", 7.2, Group::Tail),
    ("truck", 3.8, Group::Tail),
    ("tricycle", 1.4, Group::Tail),
    ("awn", 0.9, Group::Tail),
    ("bus", 0.7, Group::Tail),
    ("motor", 8.6, Group::Tail),
];

/// Unit one-hot direction `index` in `dim` dimensions.
pub fn one_hot(dim: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[index] = 1.0;
    v
}

/// The ten VisDrone classes with proportions re-normalized to sum to one and
/// one-hot centroids in `C + 1` dimensions (the last is background).
pub fn default_visdrone_spec() -> Vec<ClassSpec> {
    let total: f64 = VISDRONE_CLASSES.iter().map(|c| c.1).sum();
    let dim = VISDRONE_CLASSES.len() + 1;
    VISDRONE_CLASSES
        .iter()
        .enumerate()
        .map(|(i, &(name, pct, group))| ClassSpec {
            class_id: i,
            name: name.to_string(),
            proportion: pct / total,
            group,
            feature_centroid: one_hot(dim, i),
        })
        .collect()
}

pub fn validate_specs(specs: &[ClassSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("no classes".into()));
    }
    let dim = specs[0].feature_centroid.len();
    for (i, s) in specs.iter().enumerate() {
        if s.class_id != i {
            return Err(Error::Config(format!(
                "class ids must be 0..C in order; position {i} has id {}",
                s.class_id
            )));
        }
        if !(s.proportion > 0.0 && s.proportion <= 1.0) {
            return Err(Error::Config(format!(
                "class `{}` proportion {} outside (0, 1]",
                s.name, s.proportion
            )));
        }
        if s.feature_centroid.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: s.feature_centroid.len(),
            });
        }
    }
    let sum: f64 = specs.iter().map(|s| s.proportion).sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("class proportions sum to {sum}, not 1")));
    }
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            if a.feature_centroid == b.feature_centroid {
                return Err(Error::Config(format!(
                    "classes `{}` and `{}` share a centroid",
                    a.name, b.name
                )));
            }
        }
    }
    ClassPartition::from_specs(specs).map(|_| ())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub num_scenes: usize,
    pub objects_per_scene: (usize, usize),
    pub scene_extent: (f64, f64),
    pub object_size: (f64, f64),
    pub feature_dim: usize,
    pub feature_noise_sigma: f64,
    pub background_centroid: Vec<f64>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let dim = VISDRONE_CLASSES.len() + 1;
        Self {
            num_scenes: 625,
            objects_per_scene: (30, 70),
            scene_extent: (200.0, 200.0),
            object_size: (6.0, 16.0),
            feature_dim: dim,
            feature_noise_sigma: 0.5,
            background_centroid: one_hot(dim, dim - 1),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.objects_per_scene.0 > self.objects_per_scene.1 {
            return bad("objects_per_scene: min > max");
        }
        let (w, h) = self.scene_extent;
        let (lo, hi) = self.object_size;
        if !(w > 0.0 && h > 0.0) {
            return bad("scene_extent must be positive");
        }
        if !(lo >= 0.0 && lo <= hi && hi <= w.min(h)) {
            return bad("object_size must satisfy 0 <= min <= max <= scene extent");
        }
        if !(self.feature_noise_sigma > 0.0) {
            return bad("feature_noise_sigma must be > 0");
        }
        if self.background_centroid.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: self.background_centroid.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub objects: Vec<ObjectInstance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub head_classes: BTreeSet<usize>,
    pub tail_classes: BTreeSet<usize>,
}

impl ClassPartition {
    pub fn new(head: impl IntoIterator<Item = usize>, tail: impl IntoIterator<Item = usize>) -> Result<Self> {
        let p = Self {
            head_classes: head.into_iter().collect(),
            tail_classes: tail.into_iter().collect(),
        };
        if p.head_classes.is_empty() || p.tail_classes.is_empty() {
            return Err(Error::Config("both class groups must be non-empty".into()));
        }
        if !p.head_classes.is_disjoint(&p.tail_classes) {
            return Err(Error::Config("head and tail groups overlap".into()));
        }
        let n = p.num_classes();
        if (0..n).any(|c| !p.head_classes.contains(&c) && !p.tail_classes.contains(&c)) {
            return Err(Error::Config("class groups must cover 0..C".into()));
        }
        Ok(p)
    }

    pub fn from_specs(specs: &[ClassSpec]) -> Result<Self> {
        let pick = |g| specs.iter().filter(move |s| s.group == g).map(|s| s.class_id);
        Self::new(pick(Group::Head), pick(Group::Tail))
    }

    pub fn num_classes(&self) -> usize {
        self.head_classes.len() + self.tail_classes.len()
    }

    pub fn group_of(&self, class_id: usize) -> Group {
        if self.head_classes.contains(&class_id) {
            Group::Head
        } else {
            Group::Tail
        }
    }

    pub fn is_tail(&self, class_id: usize) -> bool {
        self.tail_classes.contains(&class_id)
    }

    pub fn classes(&self, group: Group) -> &BTreeSet<usize> {
        match group {
            Group::Head => &self.head_classes,
            Group::Tail => &self.tail_classes,
        }
    }
}

fn gaussian_around(center: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, sigma).expect("sigma validated positive");
    center.iter().map(|c| c + noise.sample(rng)).collect()
}

fn uniform(lo: f64, hi: f64, rng: &mut Rng) -> f64 {
    if lo < hi {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn random_box(extent: (f64, f64), size: (f64, f64), rng: &mut Rng) -> BBox {
    let w = uniform(size.0, size.1, rng);
    let h = uniform(size.0, size.1, rng);
    let x1 = uniform(0.0, extent.0 - w, rng);
    let y1 = uniform(0.0, extent.1 - h, rng);
    BBox::new(x1, y1, (x1 + w).min(extent.0), (y1 + h).min(extent.1))
        .expect("sizes validated against extent")
}

fn generate_scene(
    scene_id: u64,
    specs: &[ClassSpec],
    classes: &WeightedIndex<f64>,
    config: &SceneConfig,
) -> Scene {
    let mut rng = rng::stream(config.seed, &[rng::SCENE, scene_id]);
    let (lo, hi) = config.objects_per_scene;
    let count = rng.random_range(lo..=hi);
    let objects = (0..count)
        .map(|_| {
            let class_id = classes.sample(&mut rng);
            let bbox = random_box(config.scene_extent, config.object_size, &mut rng);
            let feature = gaussian_around(
                &specs[class_id].feature_centroid,
                config.feature_noise_sigma,
                &mut rng,
            );
            ObjectInstance {
                bbox,
                class_id,
                feature,
            }
        })
        .collect();
    Scene { scene_id, objects }
}

/// Generate `config.num_scenes` scenes with ids `0..num_scenes`. Each scene
/// draws from its own stream keyed by `(seed, scene_id)`.
pub fn generate_dataset(specs: &[ClassSpec], config: &SceneConfig) -> Result<Vec<Scene>> {
    validate_specs(specs)?;
    config.validate()?;
    let dim = specs[0].feature_centroid.len();
    if dim != config.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: config.feature_dim,
            actual: dim,
        });
    }
    let classes = WeightedIndex::new(specs.iter().map(|s| s.proportion))
        .map_err(|e| Error::Config(format!("class proportions: {e}")))?;
    Ok((0..config.num_scenes as u64)
        .map(|id| generate_scene(id, specs, &classes, config))
        .collect())
}

/// Settings of the simulated region-proposal stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    /// Jittered copies emitted per ground-truth object.
    pub k_pos: usize,
    /// Std of the Gaussian noise added to each box corner.
    pub jitter_sigma: f64,
    /// Std of the fresh noise added to an object's feature per copy.
    pub feature_jitter_sigma: f64,
    pub num_background: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            k_pos: 4,
            jitter_sigma: 0.6,
            feature_jitter_sigma: 0.2,
            num_background: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub feature: Vec<f64>,
}

fn jitter_box(b: &BBox, sigma: f64, extent: (f64, f64), rng: &mut Rng) -> BBox {
    if sigma == 0.0 {
        return *b;
    }
    let noise = Normal::new(0.0, sigma).expect("jitter sigma validated");
    let mut c = b.to_array();
    for v in &mut c {
        *v += noise.sample(rng);
    }
    BBox::new(c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3]))
        .expect("finite coordinates")
        .clip(extent.0, extent.1)
}

/// Simulated RPN output for one scene: `k_pos` jittered copies per object
/// followed by `num_background` uniformly placed background boxes.
pub fn generate_proposals(
    scene: &Scene,
    scene_cfg: &SceneConfig,
    cfg: &ProposalConfig,
    rng: &mut Rng,
) -> Vec<Proposal> {
    assert!(cfg.jitter_sigma >= 0.0, "jitter_sigma must be >= 0");
    let mut out = Vec::with_capacity(cfg.k_pos * scene.objects.len() + cfg.num_background);
    for obj in &scene.objects {
        for _ in 0..cfg.k_pos {
            let bbox = jitter_box(&obj.bbox, cfg.jitter_sigma, scene_cfg.scene_extent, rng);
            let feature = if cfg.feature_jitter_sigma > 0.0 {
                gaussian_around(&obj.feature, cfg.feature_jitter_sigma, rng)
            } else {
                obj.feature.clone()
            };
            out.push(Proposal { bbox, feature });
        }
    }
    for _ in 0..cfg.num_background {
        let bbox = random_box(scene_cfg.scene_extent, scene_cfg.object_size, rng);
        let feature = gaussian_around(
            &scene_cfg.background_centroid,
            scene_cfg.feature_noise_sigma,
            rng,
        );
        out.push(Proposal { bbox, feature });
    }
    out
}

/// A dataset together with the specification that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub specs: Vec<ClassSpec>,
    pub config: SceneConfig,
    pub scenes: Vec<Scene>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    specs: Vec<ClassSpec>,
    config: SceneConfig,
}

impl Dataset {
    pub fn generate(specs: Vec<ClassSpec>, config: SceneConfig) -> Result<Self> {
        let scenes = generate_dataset(&specs, &config)?;
        Ok(Self {
            specs,
            config,
            scenes,
        })
    }

    pub fn partition(&self) -> Result<ClassPartition> {
        ClassPartition::from_specs(&self.specs)
    }

    pub fn num_classes(&self) -> usize {
        self.specs.len()
    }

    pub fn scene(&self, scene_id: u64) -> Option<&Scene> {
        self.scenes
            .get(scene_id as usize)
            .filter(|s| s.scene_id == scene_id)
            .or_else(|| self.scenes.iter().find(|s| s.scene_id == scene_id))
    }

    /// Serialize as JSON lines: a manifest line followed by one line per scene.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let manifest = Manifest {
            format_version: DATASET_FORMAT_VERSION,
            seed: self.config.seed,
            specs: self.specs.clone(),
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        for scene in &self.scenes {
            serde_json::to_writer(&mut w, scene)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), path)
    }

    pub fn read_from(r: impl BufRead, path: &Path) -> Result<Self> {
        let data_err = |line: usize, msg: String| Error::Data {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = r.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| data_err(1, "missing manifest line".into()))?;
        let first = first.map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&first)
            .map_err(|e| data_err(1, format!("bad manifest: {e}")))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(data_err(
                1,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        validate_specs(&manifest.specs).map_err(|e| data_err(1, e.to_string()))?;
        let num_classes = manifest.specs.len();
        let mut scenes = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let scene: Scene = serde_json::from_str(&line)
                .map_err(|e| data_err(lineno, format!("bad scene record: {e}")))?;
            if !seen.insert(scene.scene_id) {
                return Err(data_err(lineno, format!("duplicate scene id {}", scene.scene_id)));
            }
            if let Some(o) = scene.objects.iter().find(|o| o.class_id >= num_classes) {
                return Err(data_err(lineno, format!("class id {} out of range", o.class_id)));
            }
            scenes.push(scene);
        }
        Ok(Self {
            specs: manifest.specs,
            config: manifest.config,
            scenes,
        })
    }
}
