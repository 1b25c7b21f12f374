//! Triplet datasets on disk.
//!
//! Layout: `root/<clip_id>/<triplet_id>/{frame0,frame1,frame2}.png` plus
//! `root/index.manifest`, one JSON record per line. `frame1.png` is the middle
//! (target) frame.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Error, Result};

use super::raster::{load_raster, Raster};
use super::sketchize::{sketchize, SketchParams};

pub const MANIFEST_NAME: &str = "index.manifest";
const FRAME_FILES: [&str; 3] = ["frame0.png", "frame1.png", "frame2.png"];
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Two keyframes and the ground-truth middle frame, all single-channel sketches.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub frame0: Raster,
    pub frame_mid: Raster,
    pub frame1: Raster,
    pub id: String,
}

impl Triplet {
    pub fn new(id: impl Into<String>, frame0: Raster, frame_mid: Raster, frame1: Raster) -> Result<Self> {
        let id = id.into();
        ensure_contract!(
            frame0.dims() == frame_mid.dims() && frame0.dims() == frame1.dims(),
            "triplet {id}: frame sizes differ ({:?}, {:?}, {:?})",
            frame0.dims(),
            frame_mid.dims(),
            frame1.dims()
        );
        ensure_contract!(frame0.channels() == 1, "triplet {id}: frames must be single-channel");
        for f in [&frame0, &frame_mid, &frame1] {
            let bg = median(f.data());
            ensure_contract!(
                bg >= 0.9,
                "triplet {id}: background median {bg:.3} below 0.9 (expected dark strokes on white)"
            );
        }
        Ok(Self {
            frame0,
            frame_mid,
            frame1,
            id,
        })
    }

    pub fn frames(&self) -> [&Raster; 3] {
        [&self.frame0, &self.frame_mid, &self.frame1]
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header {
        version: u32,
        stride: usize,
        split: String,
        triplets: usize,
        skipped_clips: usize,
    },
    Triplet {
        id: String,
        clip: String,
        frames: [String; 3],
    },
    Skipped {
        clip: String,
        frames: usize,
        needed: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub clip: String,
    /// Absolute (root-joined) paths of frame0, middle frame, frame1.
    pub paths: [PathBuf; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedClip {
    pub clip: String,
    pub frames: usize,
    pub needed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    pub split: String,
    pub stride: usize,
    pub skipped: Vec<SkippedClip>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_triplet(&self, i: usize) -> Result<Triplet> {
        let e = &self.entries[i];
        let [a, m, b] = &e.paths;
        Triplet::new(e.id.clone(), load_raster(a)?, load_raster(m)?, load_raster(b)?)
    }

    /// Read `root/index.manifest` and check every entry resolves to readable files.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = root.join(MANIFEST_NAME);
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut index = DatasetIndex {
            root: root.clone(),
            entries: Vec::new(),
            split: String::from("train"),
            stride: 1,
            skipped: Vec::new(),
        };
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| {
                Error::Dataset(format!("{}:{}: {e}", manifest.display(), lineno + 1))
            })?;
            match rec {
                Record::Header { stride, split, .. } => {
                    index.stride = stride;
                    index.split = split;
                }
                Record::Triplet { id, clip, frames } => {
                    if !seen.insert(id.clone()) {
                        return Err(Error::Dataset(format!("duplicate triplet id {id}")));
                    }
                    let paths = frames.map(|f| root.join(f));
                    for p in &paths {
                        if !p.is_file() {
                            return Err(Error::Dataset(format!(
                                "triplet {id}: missing file {}",
                                p.display()
                            )));
                        }
                    }
                    index.entries.push(DatasetEntry { id, clip, paths });
                }
                Record::Skipped {
                    clip,
                    frames,
                    needed,
                } => index.skipped.push(SkippedClip {
                    clip,
                    frames,
                    needed,
                }),
            }
        }
        Ok(index)
    }

    /// Write in-memory triplets under `root` with the standard layout. Ids of the form
    /// `clip/name` keep their clip directory; bare ids go under `clip0`.
    pub fn write(root: impl AsRef<Path>, triplets: &[Triplet], split: &str) -> Result<Self> {
        let root = root.as_ref();
        let mut entries = Vec::new();
        for t in triplets {
            let (clip, name) = match t.id.split_once('/') {
                Some((c, n)) => (c.to_string(), n.to_string()),
                None => ("clip0".to_string(), t.id.clone()),
            };
            let dir = root.join(&clip).join(&name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let rel: [String; 3] = FRAME_FILES.map(|f| format!("{clip}/{name}/{f}"));
            for (frame, r) in t.frames().into_iter().zip(&rel) {
                frame.save_png(root.join(r))?;
            }
            entries.push((format!("{clip}/{name}"), clip, rel));
        }
        write_manifest(root, 1, split, &entries, &[])?;
        Self::load(root)
    }
}

fn write_manifest(
    root: &Path,
    stride: usize,
    split: &str,
    triplets: &[(String, String, [String; 3])],
    skipped: &[SkippedClip],
) -> Result<()> {
    let mut lines = Vec::with_capacity(triplets.len() + skipped.len() + 1);
    let header = Record::Header {
        version: 1,
        stride,
        split: split.to_string(),
        triplets: triplets.len(),
        skipped_clips: skipped.len(),
    };
    lines.push(serde_json::to_string(&header).expect("serialisable"));
    for s in skipped {
        let rec = Record::Skipped {
            clip: s.clip.clone(),
            frames: s.frames,
            needed: s.needed,
        };
        lines.push(serde_json::to_string(&rec).expect("serialisable"));
    }
    for (id, clip, frames) in triplets {
        let rec = Record::Triplet {
            id: id.clone(),
            clip: clip.clone(),
            frames: frames.clone(),
        };
        lines.push(serde_json::to_string(&rec).expect("serialisable"));
    }
    let path = root.join(MANIFEST_NAME);
    fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))
}

/// Number of triplets a clip of `n_frames` yields at `stride`.
pub fn triplet_count(n_frames: usize, stride: usize) -> usize {
    n_frames.saturating_sub(2 * stride)
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub stride: usize,
    pub split: String,
    pub sketch: SketchParams,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            split: "train".into(),
            sketch: SketchParams::default(),
        }
    }
}

/// Ordered image files directly inside `dir`.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    frames.sort();
    Ok(frames)
}

/// Clip directories under `frames_dir` (sorted). A directory holding frames
/// directly is treated as a single clip named after itself.
pub fn list_clips(frames_dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut clips: Vec<(String, PathBuf)> = fs::read_dir(frames_dir)
        .map_err(|e| Error::io(frames_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    clips.sort();
    if clips.is_empty() && !list_frames(frames_dir)?.is_empty() {
        let name = frames_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "clip0".into());
        clips.push((name, frames_dir.to_path_buf()));
    }
    Ok(clips)
}

/// Build a triplet dataset from clips of ordered frames.
///
/// Each clip yields `(f[i], f[i+stride], f[i+2·stride])`. Colour frames are
/// sketchized; grey frames are taken as sketches already. Clips that are too
/// short are recorded in the manifest as skipped.
pub fn build_dataset(frames_dir: &Path, out_root: &Path, opts: &BuildOptions) -> Result<DatasetIndex> {
    ensure_contract!(opts.stride >= 1, "stride must be at least 1");
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let mut triplets = Vec::new();
    let mut skipped = Vec::new();
    for (clip, dir) in list_clips(frames_dir)? {
        let frames = list_frames(&dir)?;
        let count = triplet_count(frames.len(), opts.stride);
        if count == 0 {
            log::warn!(
                "clip {clip}: {} frame(s), need {} for stride {}",
                frames.len(),
                2 * opts.stride + 1,
                opts.stride
            );
            skipped.push(SkippedClip {
                clip,
                frames: frames.len(),
                needed: 2 * opts.stride + 1,
            });
            continue;
        }
        let mut cache: BTreeMap<usize, Raster> = BTreeMap::new();
        for i in 0..count {
            let name = format!("t{i:05}");
            let tdir = out_root.join(&clip).join(&name);
            fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
            let rel: [String; 3] = FRAME_FILES.map(|f| format!("{clip}/{name}/{f}"));
            for (k, r) in rel.iter().enumerate() {
                let idx = i + k * opts.stride;
                if !cache.contains_key(&idx) {
                    let raw = load_raster(&frames[idx])?;
                    let sketch = if raw.channels() == 3 {
                        sketchize(&raw, &opts.sketch)?
                    } else {
                        raw
                    };
                    cache.insert(idx, sketch);
                }
                cache[&idx].save_png(out_root.join(r))?;
            }
            triplets.push((format!("{clip}/{name}"), clip.clone(), rel));
        }
    }
    write_manifest(out_root, opts.stride, &opts.split, &triplets, &skipped)?;
    DatasetIndex::load(out_root)
}

/// Name of the listing written by [`sketchize_tree`].
pub const SKETCH_MANIFEST_NAME: &str = "sketches.manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SketchRecord {
    clip: String,
    source: String,
    sketch: String,
}

/// Sketchize every frame of every clip under `in_dir` into `out_dir/<clip>/`,
/// keeping file stems, and list the pairs in a JSON-lines manifest.
/// Returns `(clip, frame count)` in clip order.
pub fn sketchize_tree(in_dir: &Path, out_dir: &Path, params: &SketchParams) -> Result<Vec<(String, usize)>> {
    if !in_dir.is_dir() {
        return Err(Error::io(
            in_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input directory not found"),
        ));
    }
    let clips = list_clips(in_dir)?;
    let mut counts = Vec::new();
    let mut lines = String::new();
    for (clip, dir) in clips {
        let frames = list_frames(&dir)?;
        let cdir = out_dir.join(&clip);
        fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        for f in &frames {
            let raw = load_raster(f)?;
            let color = if raw.channels() == 3 { raw } else { raw.to_rgb() };
            let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let rel = format!("{clip}/{stem}.png");
            sketchize(&color, params)?.save_png(out_dir.join(&rel))?;
            let rec = SketchRecord {
                clip: clip.clone(),
                source: f.display().to_string(),
                sketch: rel,
            };
            lines.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Dataset(e.to_string()))?);
            lines.push('\n');
        }
        counts.push((clip, frames.len()));
    }
    if counts.iter().all(|c| c.1 == 0) {
        return Err(Error::Dataset(format!("no image frames found under {}", in_dir.display())));
    }
    let m = out_dir.join(SKETCH_MANIFEST_NAME);
    fs::write(&m, lines).map_err(|e| Error::io(&m, e))?;
    Ok(counts)
}
