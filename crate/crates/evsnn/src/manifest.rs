//! Dataset manifest: a key=value file listing one or more sequences.
//!
//! ```text
//! resolution=32x32
//! interval_s=0.25
//! coord_mode=planar
//! sequence=traverse0,traverse0.bin,traverse0.poses.csv
//! sequence=traverse1,traverse1.bin,traverse1.poses.csv
//! ```
//!
//! File paths are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use evsnn_core::event::{slice_volumes, CoordMode, EventVolume, Resolution, SynthDataset};

use crate::error::{Error, Result};
use crate::events::{load_events, load_poses, save_events, save_poses, EventFormat};

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub events: PathBuf,
    pub poses: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub resolution: Resolution,
    pub interval_s: f64,
    pub coord_mode: CoordMode,
    pub sequences: Vec<Sequence>,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

/// One sequence sliced into volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSequence {
    pub name: String,
    pub volumes: Vec<EventVolume>,
    pub reordered: usize,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl Manifest {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let (mut resolution, mut interval_s, mut coord_mode) = (None, None, None);
        let mut sequences = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = format!("line {}", i + 1);
            let bad = |msg: String| Error::format(path, at.clone(), msg);
            let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            match key.trim() {
                "resolution" => {
                    let parsed = value
                        .split_once('x')
                        .and_then(|(w, h)| Some(Resolution::new(w.trim().parse().ok()?, h.trim().parse().ok()?)));
                    resolution = Some(parsed.ok_or_else(|| bad(format!("bad resolution {value:?}")))?);
                }
                "interval_s" => {
                    let v: f64 = value.trim().parse().map_err(|_| bad(format!("bad interval {value:?}")))?;
                    interval_s = Some(v);
                }
                "coord_mode" => coord_mode = Some(CoordMode::parse(value.trim()).map_err(|e| bad(e.to_string()))?),
                "sequence" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    let [name, events, poses] = parts[..] else {
                        return Err(bad("sequence needs name,events,poses".into()));
                    };
                    sequences.push(Sequence { name: name.into(), events: events.into(), poses: poses.into() });
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::format(path, "end", format!("missing {k}"));
        Ok(Self {
            resolution: resolution.ok_or_else(|| missing("resolution"))?,
            interval_s: interval_s.ok_or_else(|| missing("interval_s"))?,
            coord_mode: coord_mode.ok_or_else(|| missing("coord_mode"))?,
            sequences,
            root,
        })
    }

    /// Read a manifest file, or `manifest.txt` inside a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&path, &text)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "resolution={}x{}\ninterval_s={:?}\ncoord_mode={}\n",
            self.resolution.width,
            self.resolution.height,
            self.interval_s,
            self.coord_mode.as_str()
        );
        for q in &self.sequences {
            s.push_str(&format!("sequence={},{},{}\n", q.name, q.events.display(), q.poses.display()));
        }
        s
    }

    pub fn sequence(&self, name: &str) -> Result<&Sequence> {
        self.sequences
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("manifest has no sequence {name:?}")))
    }

    /// Load and slice one sequence.
    pub fn load_sequence(&self, seq: &Sequence) -> Result<LoadedSequence> {
        let events = self.root.join(&seq.events);
        let loaded = load_events(&events, EventFormat::from_path(&events), Some(self.resolution))?;
        let poses = load_poses(&self.root.join(&seq.poses), self.coord_mode)?;
        let volumes = slice_volumes(&loaded.stream, self.interval_s, &poses)?;
        Ok(LoadedSequence { name: seq.name.clone(), volumes, reordered: loaded.reordered })
    }
}

/// Write a synthetic dataset as binary event files, pose CSVs and a manifest.
pub fn write_dataset(dir: &Path, ds: &SynthDataset) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sequences = Vec::new();
    for t in &ds.traverses {
        let seq = Sequence {
            name: t.name.clone(),
            events: format!("{}.bin", t.name).into(),
            poses: format!("{}.poses.csv", t.name).into(),
        };
        save_events(&dir.join(&seq.events), &t.stream, EventFormat::Binary)?;
        save_poses(&dir.join(&seq.poses), &t.poses)?;
        sequences.push(seq);
    }
    let m = Manifest {
        resolution: ds.resolution,
        interval_s: ds.interval_s,
        coord_mode: ds.coord_mode,
        sequences,
        root: dir.to_path_buf(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, m.render()).map_err(|e| Error::io(&path, e))?;
    Ok(m)
}
