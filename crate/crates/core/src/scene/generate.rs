use super::query::{classify_subset, render_query, Slots, Subset, Template};
use super::vocab::{Vocabulary, CLASS_EXTENTS, COLOR_RGB, NUM_ATTRIBUTES, NUM_CLASSES};
use super::{Dataset, DatasetHeader, ObjectRecord, Query, Scene};
use crate::error::{Error, Result};
use crate::eval::{iou_aabb, Box3D};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Positional jitter of sampled points is clamped to this radius (m).
pub const POINT_NOISE_CLAMP: f64 = 0.05;
const COLOR_NOISE: f64 = 0.1;
const MAX_PAIR_IOU: f64 = 0.1;
const MAX_LAYOUTS: usize = 64;
const PLACEMENT_TRIES: usize = 300;
const QUERY_TRIES: usize = 400;

/// SplitMix64 finalizer.
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `index` derived from a root seed:
/// `splitmix64(seed + (index + 1) * 0x9E3779B97F4A7C15)`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Requested proportions of the five subsets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMix {
    pub zt_wo_d: f64,
    pub zt_w_d: f64,
    pub st_wo_d: f64,
    pub st_w_d: f64,
    pub mt: f64,
}

impl Default for SubsetMix {
    fn default() -> Self {
        SubsetMix {
            zt_wo_d: 0.1,
            zt_w_d: 0.15,
            st_wo_d: 0.2,
            st_w_d: 0.3,
            mt: 0.25,
        }
    }
}

impl SubsetMix {
    pub fn as_array(&self) -> [f64; 5] {
        [self.zt_wo_d, self.zt_w_d, self.st_wo_d, self.st_w_d, self.mt]
    }

    pub fn get(&self, s: Subset) -> f64 {
        self.as_array()[s.index()]
    }

    /// Parses `key=value` pairs such as `mt=0.5,st_w_d=0.5`; unnamed subsets
    /// get zero weight.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut w = [0.0; 5];
        for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("mix entry {part:?} is not key=value")))?;
            let s = Subset::parse(k.trim())
                .ok_or_else(|| Error::Config(format!("unknown subset {k:?} in mix")))?;
            w[s.index()] = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad proportion {v:?} in mix")))?;
        }
        let m = SubsetMix {
            zt_wo_d: w[0],
            zt_w_d: w[1],
            st_wo_d: w[2],
            st_w_d: w[3],
            mt: w[4],
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("mix proportions must be finite and nonnegative".into()));
        }
        let s: f64 = a.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("mix proportions sum to {s}, expected 1")));
        }
        Ok(())
    }

    /// Exact per-subset query counts for `total` queries (largest remainder).
    pub fn quotas(&self, total: usize) -> [usize; 5] {
        let a = self.as_array();
        let mut counts = [0usize; 5];
        let mut rem: Vec<(f64, usize)> = Vec::new();
        for (i, p) in a.iter().enumerate() {
            let exact = p * total as f64;
            counts[i] = exact.floor() as usize;
            rem.push((exact - exact.floor(), i));
        }
        let mut left = total - counts.iter().sum::<usize>();
        rem.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        for (_, i) in rem {
            if left == 0 {
                break;
            }
            if a[i] > 0.0 {
                counts[i] += 1;
                left -= 1;
            }
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub scenes: usize,
    /// Global index of the first scene; disjoint offsets give disjoint splits.
    pub index_offset: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub queries_per_scene: usize,
    pub points_per_object: usize,
    pub noise_sigma: f64,
    pub max_same_class: usize,
    pub room_extent: [f64; 3],
    pub mix: SubsetMix,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            scenes: 2000,
            index_offset: 0,
            min_objects: 4,
            max_objects: 16,
            queries_per_scene: 4,
            points_per_object: 32,
            noise_sigma: 0.02,
            max_same_class: 4,
            room_extent: [8.0, 8.0, 3.0],
            mix: SubsetMix::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        if self.scenes == 0 || self.queries_per_scene == 0 || self.points_per_object == 0 {
            return Err(Error::Config("scene, query and point counts must be positive".into()));
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object range {}..={} is invalid",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_same_class == 0 || self.max_same_class * NUM_CLASSES < self.max_objects {
            return Err(Error::Config("max_same_class too small for max_objects".into()));
        }
        if self.max_same_class < 2 && (self.mix.mt > 0.0 || self.mix.st_w_d > 0.0) {
            return Err(Error::Config(
                "infeasible mix: MT and ST_W_D need at least two objects of one class".into(),
            ));
        }
        if !self.room_extent.iter().all(|&e| e > 0.0) {
            return Err(Error::Config("room extents must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

fn base_color(class_id: usize, attribute_id: usize) -> [f64; 3] {
    let tint = 0.2 + 0.6 * class_id as f64 / (NUM_CLASSES - 1) as f64;
    let c = COLOR_RGB[attribute_id];
    [0.7 * c[0] + 0.3 * tint, 0.7 * c[1] + 0.3 * tint, 0.7 * c[2] + 0.3 * tint]
}

fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Uniform samples in the object box with clamped Gaussian position jitter
/// and colour jitter around the class/attribute base colour.
pub fn sample_points(
    obj: &ObjectRecord,
    n_points: usize,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Vec<[f64; 6]> {
    let base = base_color(obj.class_id, obj.attribute_id);
    let pos_noise = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma).expect("sigma"));
    let col_noise = Normal::new(0.0, COLOR_NOISE).expect("sigma");
    (0..n_points)
        .map(|_| {
            let mut p = [0.0; 6];
            for k in 0..3 {
                let u = open_unit(rng) - 0.5;
                let jitter = pos_noise
                    .as_ref()
                    .map_or(0.0, |n| n.sample(rng).clamp(-POINT_NOISE_CLAMP, POINT_NOISE_CLAMP));
                p[k] = obj.centroid[k] + u * obj.size[k] + jitter;
            }
            for k in 0..3 {
                p[3 + k] = (base[k] + col_noise.sample(rng)).clamp(0.0, 1.0);
            }
            p
        })
        .collect()
}

fn place_objects(config: &GenConfig, rng: &mut ChaCha8Rng) -> Option<Vec<ObjectRecord>> {
    let n = rng.random_range(config.min_objects..=config.max_objects);
    let mut counts = [0usize; NUM_CLASSES];
    let mut objects: Vec<ObjectRecord> = Vec::with_capacity(n);
    let room = config.room_extent;
    for id in 0..n {
        let open: Vec<usize> = (0..NUM_CLASSES).filter(|&c| counts[c] < config.max_same_class).collect();
        let class_id = *open.choose(rng)?;
        let attribute_id = rng.random_range(0..NUM_ATTRIBUTES);
        let mut size = [0.0; 3];
        for k in 0..3 {
            size[k] = CLASS_EXTENTS[class_id][k] * rng.random_range(0.9..1.1);
        }
        if size[0] >= room[0] || size[1] >= room[1] || size[2] >= room[2] {
            return None;
        }
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let c = [
                rng.random_range(size[0] / 2.0..room[0] - size[0] / 2.0),
                rng.random_range(size[1] / 2.0..room[1] - size[1] / 2.0),
                size[2] / 2.0,
            ];
            let b = Box3D { centroid: c, size };
            if objects.iter().all(|o| iou_aabb(&o.gt_box(), &b) < MAX_PAIR_IOU) {
                placed = Some(c);
                break;
            }
        }
        let centroid = placed?;
        counts[class_id] += 1;
        objects.push(ObjectRecord {
            id,
            class_id,
            attribute_id,
            centroid,
            size,
            points: Vec::new(),
        });
    }
    Some(objects)
}

fn sample_query(want: Subset, scene: &Scene, vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> Option<Query> {
    let mut per_class = [0usize; NUM_CLASSES];
    for o in &scene.objects {
        per_class[o.class_id] += 1;
    }
    let absent: Vec<usize> = (0..NUM_CLASSES).filter(|&c| per_class[c] == 0).collect();
    let present: Vec<usize> = (0..NUM_CLASSES).filter(|&c| per_class[c] > 0).collect();
    let pool = if want == Subset::ZtWoD { &absent } else { &present };
    if pool.is_empty() {
        return None;
    }
    for _ in 0..QUERY_TRIES {
        let template = *Template::ALL.choose(rng)?;
        let class_id = *pool.choose(rng)?;
        let attribute_id = template.needs_color().then(|| rng.random_range(0..NUM_ATTRIBUTES));
        let anchor = if template.needs_anchor() {
            let anchors: Vec<usize> = scene
                .objects
                .iter()
                .filter(|o| o.class_id != class_id && per_class[o.class_id] == 1)
                .map(|o| o.id)
                .collect();
            match anchors.choose(rng) {
                Some(&a) => Some(a),
                None => continue,
            }
        } else {
            None
        };
        let slots = Slots {
            class_id,
            attribute_id,
            anchor,
        };
        let Ok(r) = render_query(template, slots, &scene.objects, vocab) else {
            continue;
        };
        let subset = classify_subset(&r.target_ids, class_id, scene);
        if subset == want {
            return Some(Query {
                text: r.text,
                tokens: r.tokens,
                target_ids: r.target_ids,
                subset,
            });
        }
    }
    None
}

fn generate_scene(
    config: &GenConfig,
    seed: u64,
    global_index: usize,
    demands: &[Subset],
    vocab: &Vocabulary,
) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, global_index as u64));
    for _ in 0..MAX_LAYOUTS {
        let Some(mut objects) = place_objects(config, &mut rng) else {
            continue;
        };
        let mut point_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        for o in &mut objects {
            o.points = sample_points(o, config.points_per_object, config.noise_sigma, &mut point_rng);
        }
        let mut scene = Scene {
            scene_id: format!("scene_{global_index:05}"),
            room_extent: config.room_extent,
            objects,
            queries: Vec::new(),
        };
        let mut ok = true;
        for &d in demands {
            match sample_query(d, &scene, vocab, &mut rng) {
                Some(q) => scene.queries.push(q),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(scene);
        }
    }
    Err(Error::Config(format!(
        "infeasible subset mix: scene {global_index} could not satisfy {demands:?}"
    )))
}

/// Deterministic for a given `(config, seed)`. Scene `i` draws from its own
/// stream `child_seed(seed, index_offset + i)`; subset demands come from a
/// seed-shuffled list with exact per-subset quotas.
pub fn generate_dataset(config: &GenConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let vocab = Vocabulary::default();
    let total = config.scenes * config.queries_per_scene;
    let counts = config.mix.quotas(total);
    let mut demands: Vec<Subset> = Subset::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&s, c)| std::iter::repeat_n(s, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed ^ 0x5eed_0f_5ab5e7, config.index_offset as u64));
    demands.shuffle(&mut rng);

    let scenes = (0..config.scenes)
        .into_par_iter()
        .map(|i| {
            let d = &demands[i * config.queries_per_scene..(i + 1) * config.queries_per_scene];
            generate_scene(config, seed, config.index_offset + i, d, &vocab)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        header: DatasetHeader::new(vocab, config.clone(), seed),
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(scenes: usize) -> GenConfig {
        GenConfig {
            scenes,
            points_per_object: 8,
            ..GenConfig::default()
        }
    }

    #[test]
    fn quotas_are_exact() {
        let m = SubsetMix::default();
        let q = m.quotas(1000);
        assert_eq!(q, [100, 150, 200, 300, 250]);
        assert_eq!(m.quotas(7).iter().sum::<usize>(), 7);
    }

    #[test]
    fn mix_parsing() {
        let m = SubsetMix::parse("mt=1.0").unwrap();
        assert_eq!(m.mt, 1.0);
        assert!(SubsetMix::parse("mt=0.5").is_err());
        assert!(SubsetMix::parse("xx=1").is_err());
    }

    #[test]
    fn infeasible_mix_is_config_error() {
        let c = GenConfig {
            max_same_class: 1,
            max_objects: 12,
            mix: SubsetMix::parse("mt=1").unwrap(),
            ..small(3)
        };
        assert!(matches!(generate_dataset(&c, 1), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let c = small(6);
        let a = generate_dataset(&c, 3).unwrap();
        let b = generate_dataset(&c, 3).unwrap();
        let other = generate_dataset(&c, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.scenes, other.scenes);
    }

    #[test]
    fn mt_only_mix_yields_multi_target_queries() {
        let c = GenConfig {
            mix: SubsetMix::parse("mt=1").unwrap(),
            ..small(20)
        };
        let d = generate_dataset(&c, 9).unwrap();
        for q in d.scenes.iter().flat_map(|s| &s.queries) {
            assert!(q.target_ids.len() >= 2, "{}", q.text);
            assert_eq!(q.subset, Subset::Mt);
        }
    }

    #[test]
    fn noiseless_points_lie_strictly_inside() {
        let o = ObjectRecord {
            id: 0,
            class_id: 3,
            attribute_id: 1,
            centroid: [1.0, 2.0, 0.8],
            size: [0.8, 0.8, 1.6],
            points: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in sample_points(&o, 500, 0.0, &mut rng) {
            for k in 0..3 {
                assert!((p[k] - o.centroid[k]).abs() < o.size[k] / 2.0);
            }
        }
    }

    #[test]
    fn point_mean_approaches_centroid() {
        let o = ObjectRecord {
            id: 0,
            class_id: 0,
            attribute_id: 0,
            centroid: [3.0, 4.0, 0.5],
            size: [0.8, 0.8, 1.0],
            points: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = sample_points(&o, 10_000, 0.02, &mut rng);
        for k in 0..3 {
            let m = pts.iter().map(|p| p[k]).sum::<f64>() / pts.len() as f64;
            assert!((m - o.centroid[k]).abs() < 0.05);
        }
    }

    #[test]
    fn same_class_and_color_share_base_color() {
        assert_eq!(base_color(2, 1), base_color(2, 1));
        assert_ne!(base_color(2, 1), base_color(3, 1));
        assert_ne!(base_color(2, 1), base_color(2, 0));
    }
}
