//! Triplet datasets: rendered partial clouds plus synthetic stand-ins for the
//! frozen text and image features.

use crate::error::{Error, Result};
use crate::meshgen::{
    backproject, camera_ring, normalize_mesh, rasterize, sample_points, stream_rng, surface_samples, visible_fraction,
    PartialPointCloud,
};
pub use crate::meshgen::shapes::LabeledMesh;
use crate::store::{Container, TensorData};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

const ANCHOR_STREAM: u64 = 10;
const OBJECT_STREAM_BASE: u64 = 1 << 20;
const VIEW_STREAM_BASE: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureConfig {
    pub d_clip: usize,
    /// Norm of the per-object offset from the class anchor.
    pub object_noise: f64,
    /// Norm of the per-view offset of image features.
    pub view_noise: f64,
    /// Norm of the offset of each text feature from the object feature.
    pub text_noise: f64,
    pub text_per_object: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            d_clip: 32,
            object_noise: 0.5,
            view_noise: 0.1,
            text_noise: 0.1,
            text_per_object: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub resolution: usize,
    pub points: usize,
    pub seed: u64,
    /// Surface samples per object for the visible-fraction report.
    pub visibility_samples: usize,
    pub fixtures: FixtureConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            resolution: crate::meshgen::DEFAULT_RESOLUTION,
            points: crate::meshgen::DEFAULT_POINTS,
            seed: 7,
            visibility_samples: 2000,
            fixtures: FixtureConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInfo {
    pub name: String,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletRecord {
    pub object_id: usize,
    pub view_id: usize,
    pub point_cloud: PartialPointCloud,
    pub image_feature: Vec<f64>,
    pub text_features: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletDataset {
    pub classes: Vec<String>,
    pub objects: Vec<ObjectInfo>,
    /// `[K, D]` class-name text features used for zero-shot evaluation.
    pub class_text: Tensor,
    pub records: Vec<TripletRecord>,
    pub generation: Option<GenConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub objects: usize,
    pub views: usize,
    pub points: usize,
    pub mean_visible_fraction: f64,
    pub skipped: Vec<String>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `base + noise·g/√d` renormalized, with `g` standard Gaussian.
fn perturb<R: Rng>(rng: &mut R, base: &[f64], noise: f64) -> Vec<f64> {
    let d = base.len();
    let scale = noise / (d as f64).sqrt();
    let g = gaussian_vec(rng, d);
    normalized(base.iter().zip(g).map(|(b, e)| b + scale * e).collect())
}

/// `k` orthonormal rows in `R^d`: Gram–Schmidt on seeded Gaussian vectors.
pub fn class_anchors(k: usize, d: usize, seed: u64) -> Result<Tensor> {
    if k == 0 || k > d {
        return Err(Error::InvalidConfig(format!("cannot draw {k} orthonormal anchors in dimension {d}")));
    }
    let mut rng = stream_rng(seed, ANCHOR_STREAM);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v = gaussian_vec(&mut rng, d);
        for _ in 0..2 {
            for r in &rows {
                let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::from_rows(&rows)
}

/// Renders every mesh from the 12 ring cameras and attaches fixture
/// features. Meshes that fail to normalize or render are skipped and listed
/// in the report.
pub fn generate_dataset(
    meshes: &[LabeledMesh],
    classes: &[String],
    config: &GenConfig,
) -> Result<(TripletDataset, GenReport)> {
    if config.points == 0 {
        return Err(Error::InvalidConfig("points: must be at least 1".into()));
    }
    if config.resolution == 0 {
        return Err(Error::InvalidConfig("resolution: must be at least 1".into()));
    }
    let fx = &config.fixtures;
    if fx.text_per_object == 0 {
        return Err(Error::InvalidConfig("text_per_object: must be at least 1".into()));
    }
    let anchors = class_anchors(classes.len(), fx.d_clip, config.seed)?;
    let ring = camera_ring(config.resolution);
    let mut objects = Vec::new();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut fractions = Vec::new();
    for (mi, lm) in meshes.iter().enumerate() {
        if lm.class >= classes.len() {
            return Err(Error::InvalidConfig(format!("mesh {} has class {} of {}", lm.name, lm.class, classes.len())));
        }
        let rendered = (|| -> Result<Vec<(PartialPointCloud, f64)>> {
            let mesh = normalize_mesh(&lm.mesh)?;
            let samples = surface_samples(&mesh, config.visibility_samples, config.seed ^ mi as u64);
            ring.iter()
                .map(|pose| {
                    let (depth, color) = rasterize(&mesh, pose)?;
                    let full = backproject(&depth, &color, pose)?;
                    let seed = stream_rng(config.seed, VIEW_STREAM_BASE + (mi * ring.len() + pose.view_id) as u64).random();
                    let frac = visible_fraction(&samples, &depth, pose);
                    Ok((sample_points(&full, config.points, seed)?, frac))
                })
                .collect()
        })();
        let views = match rendered {
            Ok(v) => v,
            Err(e) => {
                skipped.push(format!("{}: {e}", lm.name));
                continue;
            }
        };
        let object_id = objects.len();
        objects.push(ObjectInfo {
            name: lm.name.clone(),
            class: lm.class,
        });
        let mut rng = stream_rng(config.seed, OBJECT_STREAM_BASE + mi as u64);
        let object_feature = perturb(&mut rng, anchors.row(lm.class), fx.object_noise);
        let text_features: Vec<Vec<f64>> = (0..fx.text_per_object)
            .map(|_| perturb(&mut rng, &object_feature, fx.text_noise))
            .collect();
        for (view_id, (cloud, frac)) in views.into_iter().enumerate() {
            fractions.push(frac);
            records.push(TripletRecord {
                object_id,
                view_id,
                point_cloud: cloud,
                image_feature: perturb(&mut rng, &object_feature, fx.view_noise),
                text_features: text_features.clone(),
            });
        }
    }
    if objects.is_empty() && !meshes.is_empty() {
        return Err(Error::InvalidMesh(format!("every mesh failed: {}", skipped.join("; "))));
    }
    let report = GenReport {
        objects: objects.len(),
        views: records.len(),
        points: records.len() * config.points,
        mean_visible_fraction: if fractions.is_empty() {
            0.0
        } else {
            fractions.iter().sum::<f64>() / fractions.len() as f64
        },
        skipped,
    };
    Ok((
        TripletDataset {
            classes: classes.to_vec(),
            objects,
            class_text: anchors,
            records,
            generation: Some(config.clone()),
        },
        report,
    ))
}

impl TripletDataset {
    pub fn embed_dim(&self) -> usize {
        self.class_text.cols()
    }

    /// Record indices split into (train, held-out) by view id.
    pub fn split_by_views(&self, held_out: &[usize]) -> (Vec<usize>, Vec<usize>) {
        (0..self.records.len()).partition(|&i| !held_out.contains(&self.records[i].view_id))
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.objects[self.records[i].object_id].class).collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let r = self.records.len();
        let n = self.records.first().map_or(0, |x| x.point_cloud.len());
        let d = self.embed_dim();
        let t = self.records.first().map_or(0, |x| x.text_features.len());
        for (i, rec) in self.records.iter().enumerate() {
            if rec.point_cloud.len() != n || rec.text_features.len() != t {
                return Err(Error::shape(format!("record {i} differs in size from record 0")));
            }
            if rec.image_feature.len() != d || rec.text_features.iter().any(|f| f.len() != d) {
                return Err(Error::shape(format!("record {i} has features that are not {d}-wide")));
            }
        }
        let mut c = Container::new(json!({
            "kind": "dataset",
            "classes": self.classes,
            "objects": self.objects,
            "generation": self.generation,
        }));
        let flat3 = |f: &dyn Fn(&TripletRecord) -> Vec<[f64; 3]>| -> Vec<f64> {
            self.records.iter().flat_map(|x| f(x).into_iter().flatten()).collect()
        };
        c.push("points", vec![r, n, 3], TensorData::F64(flat3(&|x| x.point_cloud.points.clone())));
        let colors = flat3(&|x| {
            x.point_cloud
                .colors
                .clone()
                .unwrap_or_else(|| vec![[crate::tokenizer::COLOR_CONSTANT; 3]; n])
        });
        c.push("colors", vec![r, n, 3], TensorData::F64(colors));
        c.push("object", vec![r], TensorData::U32(self.records.iter().map(|x| x.object_id as u32).collect()));
        c.push("view", vec![r], TensorData::U32(self.records.iter().map(|x| x.view_id as u32).collect()));
        c.push("image", vec![r, d], TensorData::F64(self.records.iter().flat_map(|x| x.image_feature.clone()).collect()));
        c.push(
            "text",
            vec![r, t, d],
            TensorData::F64(self.records.iter().flat_map(|x| x.text_features.concat()).collect()),
        );
        c.push("class_text", vec![self.classes.len(), d], TensorData::F64(self.class_text.data().to_vec()));
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta["kind"] != "dataset" {
            return Err(Error::Config("container is not a dataset".into()));
        }
        let classes: Vec<String> = serde_json::from_value(c.meta["classes"].clone())?;
        let objects: Vec<ObjectInfo> = serde_json::from_value(c.meta["objects"].clone())?;
        let generation: Option<GenConfig> = serde_json::from_value(c.meta["generation"].clone())?;
        let shape = |name: &str| {
            c.get(name)
                .map(|e| e.shape.clone())
                .ok_or_else(|| Error::Config(format!("dataset lacks tensor {name}")))
        };
        let ps = shape("points")?;
        let ts = shape("text")?;
        if ps.len() != 3 || ts.len() != 3 {
            return Err(Error::Config("points and text must be rank 3".into()));
        }
        let (r, n, t, d) = (ps[0], ps[1], ts[1], ts[2]);
        let k = classes.len();
        let points = c.f64s("points", r * n * 3)?;
        let colors = c.f64s("colors", r * n * 3)?;
        let image = c.f64s("image", r * d)?;
        let text = c.f64s("text", r * t * d)?;
        let class_text = Tensor::from_vec(&[k, d], c.f64s("class_text", k * d)?.to_vec())?;
        let u32s = |name: &str| match c.get(name).map(|e| &e.data) {
            Some(TensorData::U32(v)) if v.len() == r => Ok(v.clone()),
            _ => Err(Error::Config(format!("dataset tensor {name} must be {r} u32 values"))),
        };
        let object = u32s("object")?;
        let view = u32s("view")?;
        let triples = |v: &[f64]| v.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect::<Vec<_>>();
        let mut records = Vec::with_capacity(r);
        for i in 0..r {
            let object_id = object[i] as usize;
            if object_id >= objects.len() || objects[object_id].class >= k {
                return Err(Error::Config(format!("record {i} refers to an unknown object or class")));
            }
            records.push(TripletRecord {
                object_id,
                view_id: view[i] as usize,
                point_cloud: PartialPointCloud {
                    points: triples(&points[i * n * 3..(i + 1) * n * 3]),
                    colors: Some(triples(&colors[i * n * 3..(i + 1) * n * 3])),
                    view_id: view[i] as usize,
                },
                image_feature: image[i * d..(i + 1) * d].to_vec(),
                text_features: (0..t).map(|j| text[(i * t + j) * d..(i * t + j + 1) * d].to_vec()).collect(),
            });
        }
        Ok(TripletDataset {
            classes,
            objects,
            class_text,
            records,
            generation,
        })
    }
}
