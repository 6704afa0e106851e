use super::{GenConfig, Scene, Vocabulary};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const HEADER_FILE: &str = "header.json";
const FORMAT: &str = "mog-scenes-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub vocabulary: Vec<String>,
    pub seed: u64,
    pub config: GenConfig,
}

impl DatasetHeader {
    pub fn new(vocab: Vocabulary, config: GenConfig, seed: u64) -> Self {
        DatasetHeader {
            format: FORMAT.to_string(),
            vocabulary: vocab.words().to_vec(),
            seed,
            config,
        }
    }
}

/// Scenes plus the sidecar header. On disk: a directory holding
/// `scenes.jsonl` (one scene object per line) and `header.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn scenes_to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.scenes {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(header_json: &str, scenes_jsonl: &str) -> Result<Self> {
        let header: DatasetHeader = serde_json::from_str(header_json)
            .map_err(|e| Error::Data(format!("bad dataset header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Data(format!("unknown dataset format {:?}", header.format)));
        }
        let vocab = Vocabulary::default();
        if header.vocabulary != vocab.words() {
            return Err(Error::Data("dataset vocabulary does not match this build".into()));
        }
        let mut scenes = Vec::new();
        for (n, line) in scenes_jsonl.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: Scene = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("scene line {}: {e}", n + 1)))?;
            validate_scene(&s, &vocab).map_err(|e| Error::Data(format!("scene line {}: {e}", n + 1)))?;
            scenes.push(s);
        }
        if scenes.is_empty() {
            return Err(Error::Data("dataset has no scenes".into()));
        }
        Ok(Dataset { header, scenes })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        if !dir.is_dir() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("output directory {} does not exist", dir.display()),
            )));
        }
        let mut f = fs::File::create(dir.join(SCENES_FILE))?;
        f.write_all(self.scenes_to_jsonl()?.as_bytes())?;
        let mut h = serde_json::to_string_pretty(&self.header)?;
        h.push('\n');
        fs::write(dir.join(HEADER_FILE), h)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header = fs::read_to_string(dir.join(HEADER_FILE))
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join(HEADER_FILE).display())))?;
        let scenes = fs::read_to_string(dir.join(SCENES_FILE))
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join(SCENES_FILE).display())))?;
        Self::parse(&header, &scenes)
    }

    /// SHA-256 of the serialized scene lines.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.scenes_to_jsonl()?.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    pub fn query_count(&self) -> usize {
        self.scenes.iter().map(|s| s.queries.len()).sum()
    }
}

fn validate_scene(s: &Scene, vocab: &Vocabulary) -> std::result::Result<(), String> {
    use super::vocab::{NUM_ATTRIBUTES, NUM_CLASSES};
    if s.objects.is_empty() {
        return Err("scene has no objects".into());
    }
    let np = s.objects[0].points.len();
    for (i, o) in s.objects.iter().enumerate() {
        if o.id != i {
            return Err(format!("object ids must be 0..n, found {} at {i}", o.id));
        }
        if o.class_id >= NUM_CLASSES || o.attribute_id >= NUM_ATTRIBUTES {
            return Err(format!("object {i} has out-of-range class/attribute"));
        }
        if o.size.iter().any(|x| !(*x > 0.0)) {
            return Err(format!("object {i} has a nonpositive extent"));
        }
        if o.points.is_empty() || o.points.len() != np {
            return Err(format!("object {i} point count differs from the scene's"));
        }
    }
    for q in &s.queries {
        if let Some(&t) = q.tokens.iter().find(|&&t| t >= vocab.len()) {
            return Err(format!("query {:?} has unknown token {t}", q.text));
        }
        if let Some(&t) = q.target_ids.iter().find(|&&t| t >= s.objects.len()) {
            return Err(format!("query {:?} targets missing object {t}", q.text));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, GenConfig};
    use super::*;

    #[test]
    fn save_load_round_trip_is_exact() {
        let c = GenConfig {
            scenes: 4,
            points_per_object: 6,
            ..GenConfig::default()
        };
        let d = generate_dataset(&c, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.fingerprint().unwrap(), d.fingerprint().unwrap());
    }

    #[test]
    fn schema_field_names() {
        let c = GenConfig {
            scenes: 1,
            points_per_object: 2,
            ..GenConfig::default()
        };
        let d = generate_dataset(&c, 5).unwrap();
        let line = d.scenes_to_jsonl().unwrap();
        let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 4);
        for k in ["scene_id", "room_extent", "objects", "queries"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        let o = &v["objects"][0];
        for k in ["id", "class_id", "attribute_id", "centroid", "size", "points"] {
            assert!(o.get(k).is_some(), "{k}");
        }
        let q = &v["queries"][0];
        for k in ["text", "tokens", "target_ids", "subset"] {
            assert!(q.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn missing_directory_is_an_error() {
        let c = GenConfig {
            scenes: 1,
            points_per_object: 2,
            ..GenConfig::default()
        };
        let d = generate_dataset(&c, 5).unwrap();
        assert!(d.save(Path::new("/nonexistent/dir/for/test")).is_err());
    }
}
