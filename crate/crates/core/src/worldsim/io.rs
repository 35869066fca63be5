//! Scene JSONL: a header line `{format_version, kind, count, config}`
//! followed by one scene per line, each carrying `format_version`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{Scene, SceneConfig, SCENE_FORMAT_VERSION};
use crate::error::{Error, Result};

pub const SCENES_KIND: &str = "boxmatch-scenes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenesHeader {
    pub format_version: u32,
    pub kind: String,
    pub count: usize,
    pub config: SceneConfig,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord<T> {
    format_version: u32,
    #[serde(flatten)]
    scene: T,
}

pub fn scene_to_json_line(scene: &Scene) -> Result<String> {
    serde_json::to_string(&SceneRecord {
        format_version: SCENE_FORMAT_VERSION,
        scene,
    })
    .map_err(|e| Error::json("serializing scene", e))
}

pub fn scene_from_json_line(line: &str) -> Result<Scene> {
    let rec: SceneRecord<Scene> =
        serde_json::from_str(line).map_err(|e| Error::json("parsing scene record", e))?;
    check_version(rec.format_version)?;
    Ok(rec.scene)
}

fn check_version(found: u32) -> Result<()> {
    if found != SCENE_FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: SCENE_FORMAT_VERSION,
        });
    }
    Ok(())
}

pub fn write_scenes<W: Write>(mut w: W, config: &SceneConfig, scenes: &[Scene]) -> Result<()> {
    let header = ScenesHeader {
        format_version: SCENE_FORMAT_VERSION,
        kind: SCENES_KIND.to_string(),
        count: scenes.len(),
        config: config.clone(),
    };
    let io = |source| Error::Io {
        path: "<scenes stream>".into(),
        source,
    };
    let head = serde_json::to_string(&header).map_err(|e| Error::json("serializing header", e))?;
    writeln!(w, "{head}").map_err(io)?;
    for s in scenes {
        writeln!(w, "{}", scene_to_json_line(s)?).map_err(io)?;
    }
    Ok(())
}

pub fn read_scenes<R: BufRead>(r: R) -> Result<(ScenesHeader, Vec<Scene>)> {
    let mut lines = r.lines().enumerate();
    let io = |source| Error::Io {
        path: "<scenes stream>".into(),
        source,
    };
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::config("scene file is empty (missing header line)"))?;
    let header: ScenesHeader = serde_json::from_str(&first.map_err(io)?)
        .map_err(|e| Error::json("parsing scene header (line 1)", e))?;
    check_version(header.format_version)?;
    let mut scenes = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let scene = scene_from_json_line(&line).map_err(|e| match e {
            Error::Json { source, .. } => Error::json(format!("scene record on line {}", i + 1), source),
            other => other,
        })?;
        scenes.push(scene);
    }
    if scenes.len() != header.count {
        return Err(Error::config(format!(
            "header announces {} scenes, file holds {}",
            header.count,
            scenes.len()
        )));
    }
    Ok((header, scenes))
}

pub fn save_scenes(path: &Path, config: &SceneConfig, scenes: &[Scene]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = std::io::BufWriter::new(file);
    write_scenes(&mut w, config, scenes)?;
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_scenes(path: &Path) -> Result<(ScenesHeader, Vec<Scene>)> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_scenes(std::io::BufReader::new(file))
}
