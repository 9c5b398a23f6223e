//! Dataset directories: one subdirectory per record plus `manifest.json`.
//!
//! ```text
//! manifest.json
//! record_00000/
//!   meta.json            seed, identity, frames
//!   description.txt
//!   script.txt           past_script.txt
//!   speech.sig           past_speech.sig
//!   semantic.lbl         past_semantic.lbl
//!   animation.json       past_animation.json
//!   image.rgb
//! ```
//!
//! Generated outputs use the same file names, so a prediction directory can
//! be evaluated against a record directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mmtok_core::synth::{generate_record, AvatarWorld, Clip, SampleRecord, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::formats::{labels_from_bytes, labels_to_bytes, rgb_from_bytes, rgb_to_bytes, signal_from_bytes, signal_to_bytes};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub dir: String,
    pub seed: u64,
    pub identity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub world: WorldConfig,
    pub frames: usize,
    pub base_seed: u64,
    pub count: usize,
    pub records: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    seed: u64,
    identity: usize,
    frames: usize,
}

/// Animation values of one clip. Absent fields are simply not compared by
/// the evaluator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnimationFile {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shape: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub expression: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pose: Option<Vec<f64>>,
}

pub fn record_dir_name(i: usize) -> String {
    format!("record_{i:05}")
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_clip(dir: &Path, prefix: &str, clip: &Clip, shape: &[f64]) -> Result<()> {
    fs::write(dir.join(format!("{prefix}script.txt")), &clip.script)?;
    fs::write(dir.join(format!("{prefix}speech.sig")), signal_to_bytes(&clip.speech))?;
    fs::write(dir.join(format!("{prefix}semantic.lbl")), labels_to_bytes(&clip.semantic)?)?;
    write_json(
        &dir.join(format!("{prefix}animation.json")),
        &AnimationFile {
            shape: Some(shape.to_vec()),
            expression: Some(clip.expression.clone()),
            pose: Some(clip.pose.clone()),
        },
    )
}

fn read_clip(dir: &Path, prefix: &str) -> Result<(Clip, Vec<f64>)> {
    let path = |name: &str| dir.join(format!("{prefix}{name}"));
    let anim: AnimationFile = read_json(&path("animation.json"))?;
    let (Some(shape), Some(expression), Some(pose)) = (anim.shape, anim.expression, anim.pose) else {
        bail!("{} is incomplete", path("animation.json").display());
    };
    let clip = Clip {
        script: fs::read_to_string(path("script.txt"))?,
        speech: signal_from_bytes(&fs::read(path("speech.sig"))?)?,
        expression,
        pose,
        semantic: labels_from_bytes(&fs::read(path("semantic.lbl"))?)?,
    };
    Ok((clip, shape))
}

pub fn write_record(dir: &Path, rec: &SampleRecord) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(
        &dir.join("meta.json"),
        &Meta {
            seed: rec.seed,
            identity: rec.identity,
            frames: rec.frames,
        },
    )?;
    fs::write(dir.join("description.txt"), &rec.description)?;
    fs::write(dir.join("image.rgb"), rgb_to_bytes(&rec.image)?)?;
    write_clip(dir, "", &rec.current, &rec.shape)?;
    write_clip(dir, "past_", &rec.past, &rec.shape)
}

pub fn read_record(dir: &Path) -> Result<SampleRecord> {
    let meta: Meta = read_json(&dir.join("meta.json"))?;
    let (current, shape) = read_clip(dir, "")?;
    let (past, _) = read_clip(dir, "past_")?;
    Ok(SampleRecord {
        seed: meta.seed,
        identity: meta.identity,
        frames: meta.frames,
        description: fs::read_to_string(dir.join("description.txt"))?,
        shape,
        past,
        current,
        image: rgb_from_bytes(&fs::read(dir.join("image.rgb"))?)?,
    })
}

/// Generates `n` records with seeds `base_seed..base_seed + n` and writes
/// them under `out`.
pub fn generate(world: &WorldConfig, n: usize, base_seed: u64, frames: usize, out: &Path) -> Result<Manifest> {
    ensure!(n >= 1, "need at least one record");
    let w = AvatarWorld::new(world.clone())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let seed = base_seed + i as u64;
        let rec = generate_record(&w, seed, frames)?;
        let dir = record_dir_name(i);
        write_record(&out.join(&dir), &rec)?;
        records.push(ManifestEntry {
            dir,
            seed,
            identity: rec.identity,
        });
    }
    let manifest = Manifest {
        world: world.clone(),
        frames,
        base_seed,
        count: n,
        records,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&dir.join(MANIFEST))?;
    ensure!(m.count == m.records.len(), "manifest count {} disagrees with its {} entries", m.count, m.records.len());
    Ok(m)
}

pub fn record_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_manifest(dir)?.records.iter().map(|e| dir.join(&e.dir)).collect())
}

pub fn load(dir: &Path) -> Result<Vec<SampleRecord>> {
    record_dirs(dir)?
        .iter()
        .map(|d| read_record(d).with_context(|| format!("loading {}", d.display())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_roundtrip_through_files() {
        let tmp = tempfile::tempdir().unwrap();
        let m = generate(&WorldConfig::default(), 3, 40, 5, tmp.path()).unwrap();
        assert_eq!(m.records.len(), 3);
        let back = load(tmp.path()).unwrap();
        let w = AvatarWorld::new(WorldConfig::default()).unwrap();
        for (i, r) in back.iter().enumerate() {
            assert_eq!(r, &generate_record(&w, 40 + i as u64, 5).unwrap());
        }
    }
}
