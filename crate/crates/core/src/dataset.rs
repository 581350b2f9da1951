//! On-disk dataset layout: a JSON manifest plus one event file and one
//! mask container per clip.

use std::fs;
use std::path::{Path, PathBuf};

use cmtc_tensor::{Checkpoint, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CmtcError, Result};
use crate::events::{parse_events, write_events, EventFormat, EventStream};
use crate::split::ClipMeta;
use crate::synth::{SynthConfig, SynthDataset};

pub const MANIFEST: &str = "manifest.json";
const MASK_KEY: &str = "mask";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Event file, relative to the dataset root.
    pub path: String,
    /// Mask container, relative to the dataset root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub person_id: u32,
    pub camera_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    pub clips: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub source_id: String,
    pub stream: EventStream,
    /// `T x H x W` binary silhouettes, when available.
    pub masks: Option<Tensor<f32>>,
    pub meta: ClipMeta,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn metas(&self) -> Vec<ClipMeta> {
        self.clips.iter().map(|c| c.meta).collect()
    }
}

fn clip_stem(person: u32, camera: u32, clip: u32) -> String {
    format!("p{person:03}_c{camera}_k{clip:02}")
}

/// Writes events as binary files under `events/` and masks under `masks/`.
pub fn write_synth_dataset(data: &SynthDataset, root: impl AsRef<Path>) -> Result<Manifest> {
    let root = root.as_ref();
    for sub in ["events", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut entries = Vec::with_capacity(data.clips.len());
    for c in &data.clips {
        let stem = clip_stem(c.person_id, c.camera_id, c.clip_index);
        let ev = format!("events/{stem}.evs");
        let mk = format!("masks/{stem}.cmtc");
        write_events(&c.stream, root.join(&ev), EventFormat::Binary)?;
        let mut ck = Checkpoint::new();
        ck.insert(MASK_KEY, &c.masks);
        let mp = root.join(&mk);
        fs::write(&mp, ck.to_bytes()).map_err(io_err(&mp))?;
        entries.push(ManifestEntry {
            path: ev,
            mask: Some(mk),
            person_id: c.person_id,
            camera_id: c.camera_id,
        });
    }
    let manifest = Manifest {
        version: 1,
        synth: Some(data.config),
        clips: entries,
    };
    let mp = root.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CmtcError::Manifest(e.to_string()))?;
    text.push('\n');
    fs::write(&mp, text).map_err(io_err(&mp))?;
    Ok(manifest)
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<Manifest> {
    let mp = root.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CmtcError::Manifest(format!("{}: {e}", mp.display())))?;
    if m.version != 1 {
        return Err(CmtcError::Manifest(format!("unsupported manifest version {}", m.version)));
    }
    if m.clips.is_empty() {
        return Err(CmtcError::Manifest("manifest lists no clips".into()));
    }
    Ok(m)
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref().to_path_buf();
    let manifest = read_manifest(&root)?;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for e in &manifest.clips {
        let path = root.join(&e.path);
        let fmt = EventFormat::from_path(&path)
            .ok_or_else(|| CmtcError::Manifest(format!("cannot tell the format of {}", e.path)))?;
        let stream = parse_events(&path, fmt)?;
        let masks = match &e.mask {
            Some(m) => {
                let mp = root.join(m);
                let t: Tensor<f32> = Checkpoint::load(&mp)?.tensor(MASK_KEY)?;
                if t.rank() != 3 || t.shape()[1] != stream.height as usize || t.shape()[2] != stream.width as usize {
                    return Err(CmtcError::Manifest(format!(
                        "{m}: mask shape {:?} does not match the {}x{} sensor",
                        t.shape(),
                        stream.width,
                        stream.height
                    )));
                }
                Some(t)
            }
            None => None,
        };
        let source_id = Path::new(&e.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| e.path.clone());
        clips.push(Clip {
            source_id,
            stream,
            masks,
            meta: ClipMeta {
                person_id: e.person_id,
                camera_id: e.camera_id,
            },
        });
    }
    Ok(Dataset { root, manifest, clips })
}

/// In-memory view of a freshly synthesized dataset, without touching disk.
pub fn from_synth(data: &SynthDataset) -> Dataset {
    let clips = data
        .clips
        .iter()
        .map(|c| Clip {
            source_id: clip_stem(c.person_id, c.camera_id, c.clip_index),
            stream: c.stream.clone(),
            masks: Some(c.masks.clone()),
            meta: ClipMeta {
                person_id: c.person_id,
                camera_id: c.camera_id,
            },
        })
        .collect();
    Dataset {
        root: PathBuf::new(),
        manifest: Manifest {
            version: 1,
            synth: Some(data.config),
            clips: Vec::new(),
        },
        clips,
    }
}
