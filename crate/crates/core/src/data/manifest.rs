use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::labels::{combine_labels, split_pair, stitch_pair, LabelCoding};
use super::netpbm::{read_netpbm, write_netpbm};
use super::scene::{generate_scene, SceneConfig};
use super::PairedSample;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ManifestFormat {
    #[serde(rename = "paired-files")]
    PairedFiles,
    #[serde(rename = "stitched")]
    Stitched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum ManifestEntry {
    Paired { condition: String, label: String },
    Stitched { pair: String },
}

/// `manifest.json`. Entry paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: ManifestFormat,
    pub count: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub scene_config: Option<SceneConfig>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io("data", "load_manifest", path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::data("data", "load_manifest", format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::data("data", "load_manifest", "manifest has no entries"));
        }
        if self.count != self.entries.len() {
            return Err(Error::data(
                "data",
                "load_manifest",
                format!("count {} but {} entries", self.count, self.entries.len()),
            ));
        }
        for entry in &self.entries {
            let ok = matches!(
                (self.format, entry),
                (ManifestFormat::PairedFiles, ManifestEntry::Paired { .. })
                    | (ManifestFormat::Stitched, ManifestEntry::Stitched { .. })
            );
            if !ok {
                return Err(Error::data(
                    "data",
                    "load_manifest",
                    format!("entry {entry:?} does not match format {:?}", self.format),
                ));
            }
            for f in self.entry_files(entry) {
                if !f.is_file() {
                    return Err(Error::data(
                        "data",
                        "load_manifest",
                        format!("referenced file {} does not exist", f.display()),
                    ));
                }
            }
        }
        Ok(())
    }

    fn entry_files(&self, entry: &ManifestEntry) -> Vec<PathBuf> {
        match entry {
            ManifestEntry::Paired { condition, label } => vec![self.root.join(condition), self.root.join(label)],
            ManifestEntry::Stitched { pair } => vec![self.root.join(pair)],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io("data", "save_manifest", path, e))
    }

    pub fn load_samples(&self) -> Result<Vec<PairedSample>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, entry)| match entry {
                ManifestEntry::Paired { condition, label } => {
                    let c = read_netpbm(&self.root.join(condition))?;
                    let l = read_netpbm(&self.root.join(label))?;
                    if l.channels() != 1 {
                        return Err(Error::data("data", "load_samples", format!("label {label} is not single-channel")));
                    }
                    PairedSample::new(c, l, condition.clone(), i).map_err(|e| {
                        Error::data("data", "load_samples", format!("{condition}: {e}"))
                    })
                }
                ManifestEntry::Stitched { pair } => {
                    let img = read_netpbm(&self.root.join(pair))?;
                    let (c, l) = split_pair(&img).map_err(|e| Error::data("data", "load_samples", format!("{pair}: {e}")))?;
                    PairedSample::new(c, l, pair.clone(), i)
                }
            })
            .collect()
    }
}

/// Filename pattern with a single `*` wildcard, e.g. `frame_*.ppm`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilePattern {
    prefix: String,
    suffix: String,
}

impl FilePattern {
    pub fn parse(pattern: &str) -> Result<Self> {
        match pattern.split_once('*') {
            Some((p, s)) if !s.contains('*') => Ok(FilePattern {
                prefix: p.to_string(),
                suffix: s.to_string(),
            }),
            _ => Err(Error::invalid(
                "data",
                "build_manifest",
                format!("pattern '{pattern}' must contain exactly one '*'"),
            )),
        }
    }

    pub fn key<'a>(&self, name: &'a str) -> Option<&'a str> {
        name.strip_prefix(&self.prefix)?.strip_suffix(&self.suffix)
    }

    pub fn name(&self, key: &str) -> String {
        format!("{}{key}{}", self.prefix, self.suffix)
    }
}

fn scan(dir: &Path, pattern: &FilePattern) -> Result<BTreeMap<String, String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io("data", "build_manifest", dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io("data", "build_manifest", dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(k) = pattern.key(&name) {
            out.insert(k.to_string(), name);
        }
    }
    Ok(out)
}

/// Scan an existing directory. `label_pattern` is required for paired files.
pub fn build_manifest(
    dir: &Path,
    format: ManifestFormat,
    primary_pattern: &str,
    label_pattern: Option<&str>,
) -> Result<DatasetManifest> {
    let primary = FilePattern::parse(primary_pattern)?;
    let found = scan(dir, &primary)?;
    if found.is_empty() {
        return Err(Error::data(
            "data",
            "build_manifest",
            format!("no files matching '{primary_pattern}' in {}", dir.display()),
        ));
    }
    let entries = match format {
        ManifestFormat::Stitched => found.into_values().map(|pair| ManifestEntry::Stitched { pair }).collect(),
        ManifestFormat::PairedFiles => {
            let lp = label_pattern
                .ok_or_else(|| Error::invalid("data", "build_manifest", "paired-files format needs a label pattern"))?;
            let labels = scan(dir, &FilePattern::parse(lp)?)?;
            if let Some((k, orphan)) = labels.iter().find(|(k, _)| !found.contains_key(*k)) {
                return Err(Error::data(
                    "data",
                    "build_manifest",
                    format!("label {orphan} has no condition file {}", primary.name(k)),
                ));
            }
            let mut entries = Vec::with_capacity(found.len());
            for (k, condition) in found {
                let Some(label) = labels.get(&k) else {
                    return Err(Error::data(
                        "data",
                        "build_manifest",
                        format!("condition {condition} has no label file"),
                    ));
                };
                entries.push(ManifestEntry::Paired {
                    condition,
                    label: label.clone(),
                });
            }
            entries
        }
    };
    let m = DatasetManifest {
        format,
        count: entries.len(),
        entries,
        seed: None,
        scene_config: None,
        root: dir.to_path_buf(),
    };
    m.validate()?;
    Ok(m)
}

fn create_dir(dir: &Path, op: &'static str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io("data", op, dir, e))
}

fn write_sample(out_dir: &Path, index: usize, sample: &PairedSample, format: ManifestFormat) -> Result<ManifestEntry> {
    let ext = if sample.condition.channels() == 3 { "ppm" } else { "pgm" };
    Ok(match format {
        ManifestFormat::PairedFiles => {
            let condition = format!("frame_{index:05}.{ext}");
            let label = format!("label_{index:05}.pgm");
            write_netpbm(&sample.condition, &out_dir.join(&condition))?;
            write_netpbm(&sample.label, &out_dir.join(&label))?;
            ManifestEntry::Paired { condition, label }
        }
        ManifestFormat::Stitched => {
            let pair = format!("pair_{index:05}.{ext}");
            write_netpbm(&stitch_pair(&sample.condition, &sample.label)?, &out_dir.join(&pair))?;
            ManifestEntry::Stitched { pair }
        }
    })
}

/// Render `count` consecutive frames and write them with a manifest.
pub fn synth_dataset(cfg: &SceneConfig, count: usize, out_dir: &Path, format: ManifestFormat) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::invalid("data", "synth_dataset", "count must be at least 1"));
    }
    cfg.validate()?;
    create_dir(out_dir, "synth_dataset")?;
    let scenes = par::map_indices(count, |i| generate_scene(cfg, i));
    let mut entries = Vec::with_capacity(count);
    for (i, scene) in scenes.into_iter().enumerate() {
        entries.push(write_sample(out_dir, i, &scene?.sample, format)?);
    }
    let m = DatasetManifest {
        format,
        count,
        entries,
        seed: Some(cfg.seed),
        scene_config: Some(cfg.clone()),
        root: out_dir.to_path_buf(),
    };
    m.save(&out_dir.join("manifest.json"))?;
    Ok(m)
}

/// Frames plus per-arm label directories, matched by file stem.
#[derive(Debug, Clone)]
pub struct PrepareRequest {
    pub frames_dir: PathBuf,
    pub left_dir: PathBuf,
    pub right_dir: PathBuf,
    pub out_dir: PathBuf,
    pub coding: LabelCoding,
    pub format: ManifestFormat,
}

fn netpbm_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io("data", "prepare", dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io("data", "prepare", dir, e))?.path();
        let is_pnm = matches!(path.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm" | "pnm"));
        if let (true, Some(stem)) = (is_pnm, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Combine left/right arm labels per frame and write training pairs.
pub fn prepare_dataset(req: &PrepareRequest) -> Result<DatasetManifest> {
    let frames = netpbm_by_stem(&req.frames_dir)?;
    if frames.is_empty() {
        return Err(Error::data(
            "data",
            "prepare",
            format!("no Netpbm frames in {}", req.frames_dir.display()),
        ));
    }
    let left = netpbm_by_stem(&req.left_dir)?;
    let right = netpbm_by_stem(&req.right_dir)?;
    create_dir(&req.out_dir, "prepare")?;
    let mut entries = Vec::with_capacity(frames.len());
    for (i, (stem, frame_path)) in frames.iter().enumerate() {
        let lookup = |map: &BTreeMap<String, PathBuf>, side: &str, dir: &Path| {
            map.get(stem).cloned().ok_or_else(|| {
                Error::data(
                    "data",
                    "prepare",
                    format!("frame {} has no {side} label {stem}.* in {}", frame_path.display(), dir.display()),
                )
            })
        };
        let l = read_netpbm(&lookup(&left, "left", &req.left_dir)?)?.to_gray();
        let r = read_netpbm(&lookup(&right, "right", &req.right_dir)?)?.to_gray();
        let label = combine_labels(&l, &r, req.coding)?;
        let sample = PairedSample::new(read_netpbm(frame_path)?, label, stem.clone(), i)?;
        entries.push(write_sample(&req.out_dir, i, &sample, req.format)?);
    }
    let m = DatasetManifest {
        format: req.format,
        count: entries.len(),
        entries,
        seed: None,
        scene_config: None,
        root: req.out_dir.clone(),
    };
    m.save(&req.out_dir.join("manifest.json"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageBuffer;

    #[test]
    fn synth_writes_readable_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            seed: 5,
            ..SceneConfig::default()
        };
        let m = synth_dataset(&cfg, 12, dir.path(), ManifestFormat::PairedFiles).unwrap();
        assert_eq!(m.count, 12);
        let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.entries, m.entries);
        assert_eq!(loaded.scene_config.as_ref(), Some(&cfg));
        let samples = loaded.load_samples().unwrap();
        assert_eq!(samples.len(), 12);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.condition, generate_scene(&cfg, i).unwrap().sample.condition);
        }
        let one = synth_dataset(&cfg, 1, &dir.path().join("one"), ManifestFormat::Stitched).unwrap();
        assert_eq!(one.entries.len(), 1);
        let s = one.load_samples().unwrap();
        assert_eq!(s[0].label, generate_scene(&cfg, 0).unwrap().sample.label);
    }

    #[test]
    fn manifest_json_shape() {
        let dir = tempfile::tempdir().unwrap();
        synth_dataset(&SceneConfig::default(), 2, dir.path(), ManifestFormat::PairedFiles).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(v["format"], "paired-files");
        assert_eq!(v["count"], 2);
        assert_eq!(v["entries"][1]["condition"], "frame_00001.ppm");
        assert_eq!(v["entries"][1]["label"], "label_00001.pgm");
        assert_eq!(v["seed"], 0);
        assert_eq!(v["scene_config"]["arm_count"], 2);
    }

    #[test]
    fn build_manifest_finds_orphans() {
        let dir = tempfile::tempdir().unwrap();
        synth_dataset(&SceneConfig::default(), 3, dir.path(), ManifestFormat::PairedFiles).unwrap();
        let m = build_manifest(dir.path(), ManifestFormat::PairedFiles, "frame_*.ppm", Some("label_*.pgm")).unwrap();
        assert_eq!(m.count, 3);
        std::fs::remove_file(dir.path().join("label_00001.pgm")).unwrap();
        let err = build_manifest(dir.path(), ManifestFormat::PairedFiles, "frame_*.ppm", Some("label_*.pgm"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("frame_00001.ppm"), "{err}");
        let err = build_manifest(dir.path(), ManifestFormat::Stitched, "pair_*.ppm", None).unwrap_err();
        assert!(err.to_string().contains("no files"));
    }

    #[test]
    fn empty_and_missing_manifests_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        std::fs::write(&p, r#"{"format":"stitched","count":0,"entries":[]}"#).unwrap();
        assert!(DatasetManifest::load(&p).is_err());
        std::fs::write(&p, r#"{"format":"stitched","count":1,"entries":[{"pair":"nope.ppm"}]}"#).unwrap();
        let err = DatasetManifest::load(&p).unwrap_err().to_string();
        assert!(err.contains("nope.ppm"));
        std::fs::write(&p, r#"{"format":"stitched","count":0,"entries":[],"extra":1}"#).unwrap();
        assert!(DatasetManifest::load(&p).is_err());
    }

    #[test]
    fn prepare_combines_and_stitches() {
        let dir = tempfile::tempdir().unwrap();
        let (frames, left, right, out) = (
            dir.path().join("frames"),
            dir.path().join("left"),
            dir.path().join("right"),
            dir.path().join("out"),
        );
        for d in [&frames, &left, &right] {
            std::fs::create_dir_all(d).unwrap();
        }
        for i in 0..2 {
            write_netpbm(&ImageBuffer::filled(4, 2, 3, 10 + i as u8), &frames.join(format!("f{i}.ppm"))).unwrap();
            write_netpbm(&ImageBuffer::new(4, 2, 1, vec![255, 0, 0, 0, 0, 0, 0, 0]).unwrap(), &left.join(format!("f{i}.pgm"))).unwrap();
            write_netpbm(&ImageBuffer::new(4, 2, 1, vec![0, 255, 0, 0, 0, 0, 0, 255]).unwrap(), &right.join(format!("f{i}.pgm"))).unwrap();
        }
        let req = PrepareRequest {
            frames_dir: frames.clone(),
            left_dir: left.clone(),
            right_dir: right.clone(),
            out_dir: out.clone(),
            coding: LabelCoding::Union,
            format: ManifestFormat::Stitched,
        };
        let m = prepare_dataset(&req).unwrap();
        let samples = m.load_samples().unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[1].label.samples(), &[255, 255, 0, 0, 0, 0, 0, 255]);
        assert_eq!(samples[1].condition, ImageBuffer::filled(4, 2, 3, 11));

        std::fs::remove_file(right.join("f1.pgm")).unwrap();
        let err = prepare_dataset(&req).unwrap_err().to_string();
        assert!(err.contains("right label f1"), "{err}");
    }
}
