//! Corpus storage: PNG images plus one `.ann` structured text record per
//! sample, and a manifest with counts and per-split digests.
//!
//! `.ann` record format, one record per line, `key=value` fields, with
//! `text=` always last so free text can contain spaces:
//!
//! ```text
//! sample seed=0
//! canvas w=128 h=128
//! background r=40 g=40 b=40
//! instance kind=circle color=red cx=32 cy=40 size=11
//! expr target=0 text=the red circle
//! caption text=a red circle and a blue square
//! category name=circle
//! edit kind=recolor instance=0
//! ```
//!
//! Instance masks are not stored: they are re-rasterized from
//! (kind, position, size), which the rasterization contract makes exact.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::raster::{rasterize, ShapeKind};
use super::{
    color_index, EditKind, Sample, SceneSpec, ShapeInstance, ShapesError, COLOR_NAMES,
};
use crate::grid::ImageU8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub train_count: usize,
    pub val_count: usize,
    pub digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub sample: Sample,
    pub edits: Vec<(EditKind, usize)>,
}

fn storage_err<E: std::fmt::Display>(e: E) -> ShapesError {
    ShapesError::Storage(e.to_string())
}

fn write_png(path: &Path, img: &ImageU8) -> Result<(), ShapesError> {
    let buf = image::RgbImage::from_raw(img.w as u32, img.h as u32, img.rgb.clone())
        .ok_or_else(|| ShapesError::Storage("png buffer size".into()))?;
    buf.save(path).map_err(storage_err)
}

fn read_png(path: &Path) -> Result<ImageU8, ShapesError> {
    let img = image::open(path).map_err(storage_err)?.to_rgb8();
    Ok(ImageU8 {
        w: img.width() as usize,
        h: img.height() as usize,
        rgb: img.into_raw(),
    })
}

fn render_ann(sample: &Sample, edits: &[(EditKind, usize)]) -> String {
    let mut out = String::new();
    let scene = &sample.scene;
    out.push_str(&format!("sample seed={}\n", scene.seed));
    out.push_str(&format!("canvas w={} h={}\n", scene.canvas.0, scene.canvas.1));
    out.push_str(&format!(
        "background r={} g={} b={}\n",
        scene.background[0], scene.background[1], scene.background[2]
    ));
    for inst in &scene.instances {
        out.push_str(&format!(
            "instance kind={} color={} cx={} cy={} size={}\n",
            inst.kind.name(),
            COLOR_NAMES[inst.color],
            inst.cx,
            inst.cy,
            inst.size
        ));
    }
    for (text, idx) in &sample.referring_expressions {
        out.push_str(&format!("expr target={idx} text={text}\n"));
    }
    for cap in &sample.captions {
        out.push_str(&format!("caption text={cap}\n"));
    }
    for cat in &sample.category_list {
        out.push_str(&format!("category name={cat}\n"));
    }
    for (kind, idx) in edits {
        out.push_str(&format!("edit kind={} instance={idx}\n", kind.name()));
    }
    out
}

fn field<'a>(parts: &'a [&str], key: &str, line: &str) -> Result<&'a str, ShapesError> {
    parts
        .iter()
        .find_map(|p| p.strip_prefix(&format!("{key}=")[..]))
        .ok_or_else(|| ShapesError::Parse(format!("missing {key} in: {line}")))
}

fn num<T: std::str::FromStr>(parts: &[&str], key: &str, line: &str) -> Result<T, ShapesError> {
    field(parts, key, line)?
        .parse::<T>()
        .map_err(|_| ShapesError::Parse(format!("bad {key} in: {line}")))
}

fn parse_ann(text: &str, image: ImageU8) -> Result<(Sample, Vec<(EditKind, usize)>), ShapesError> {
    let mut seed = 0u64;
    let mut canvas = (0usize, 0usize);
    let mut background = [0u8; 3];
    let mut instances: Vec<ShapeInstance> = Vec::new();
    let mut exprs = Vec::new();
    let mut captions = Vec::new();
    let mut categories = Vec::new();
    let mut edits = Vec::new();
    for line in text.lines() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let (head, rest) = line.split_once(' ').unwrap_or((line, ""));
        // `text=` swallows the remainder of the line
        let (attrs, text_val) = match rest.split_once("text=") {
            Some((a, t)) => (a, Some(t.to_string())),
            None => (rest, None),
        };
        let parts: Vec<&str> = attrs.split_whitespace().collect();
        match head {
            "sample" => seed = num(&parts, "seed", line)?,
            "canvas" => {
                canvas = (num(&parts, "w", line)?, num(&parts, "h", line)?);
            }
            "background" => {
                background = [
                    num(&parts, "r", line)?,
                    num(&parts, "g", line)?,
                    num(&parts, "b", line)?,
                ];
            }
            "instance" => {
                let kind = ShapeKind::parse(field(&parts, "kind", line)?)
                    .ok_or_else(|| ShapesError::Parse(format!("bad kind in: {line}")))?;
                let color = color_index(field(&parts, "color", line)?)
                    .ok_or_else(|| ShapesError::Parse(format!("bad color in: {line}")))?;
                let cx: i64 = num(&parts, "cx", line)?;
                let cy: i64 = num(&parts, "cy", line)?;
                let size: u32 = num(&parts, "size", line)?;
                let mask = rasterize(kind, cx, cy, size, canvas.0, canvas.1);
                instances.push(ShapeInstance {
                    kind,
                    color,
                    cx,
                    cy,
                    size,
                    mask,
                });
            }
            "expr" => {
                let idx: usize = num(&parts, "target", line)?;
                let text = text_val
                    .ok_or_else(|| ShapesError::Parse(format!("expr without text: {line}")))?;
                exprs.push((text, idx));
            }
            "caption" => {
                captions.push(
                    text_val
                        .ok_or_else(|| ShapesError::Parse(format!("caption without text: {line}")))?,
                );
            }
            "category" => categories.push(field(&parts, "name", line)?.to_string()),
            "edit" => {
                let kind = EditKind::parse(field(&parts, "kind", line)?)
                    .ok_or_else(|| ShapesError::Parse(format!("bad edit kind in: {line}")))?;
                let idx: usize = num(&parts, "instance", line)?;
                edits.push((kind, idx));
            }
            other => return Err(ShapesError::Parse(format!("unknown record: {other}"))),
        }
    }
    if image.w != canvas.0 || image.h != canvas.1 {
        return Err(ShapesError::Parse(format!(
            "image {}x{} does not match canvas {}x{}",
            image.w, image.h, canvas.0, canvas.1
        )));
    }
    Ok((
        Sample {
            scene: SceneSpec {
                seed,
                canvas,
                background,
                instances,
            },
            image,
            captions,
            referring_expressions: exprs,
            category_list: categories,
        },
        edits,
    ))
}

/// Write `<dir>/{train,val}/<id>.png` + `<id>.ann` and `<dir>/manifest`.
pub fn write_corpus(
    dir: &Path,
    train: &[(Sample, Vec<(EditKind, usize)>)],
    val: &[(Sample, Vec<(EditKind, usize)>)],
) -> Result<Manifest, ShapesError> {
    let mut digests = BTreeMap::new();
    for (split, samples) in [("train", train), ("val", val)] {
        let split_dir = dir.join(split);
        std::fs::create_dir_all(&split_dir).map_err(storage_err)?;
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for (i, (sample, edits)) in samples.iter().enumerate() {
            let id = format!("{i:06}");
            let png = split_dir.join(format!("{id}.png"));
            write_png(&png, &sample.image)?;
            let ann = render_ann(sample, edits);
            std::fs::write(split_dir.join(format!("{id}.ann")), &ann).map_err(storage_err)?;
            files.push((format!("{id}.png"), std::fs::read(&png).map_err(storage_err)?));
            files.push((format!("{id}.ann"), ann.into_bytes()));
        }
        files.sort_by(|a, b| a.0.cmp(&b.0));
        let mut hasher = Sha256::new();
        for (name, bytes) in &files {
            hasher.update(name.as_bytes());
            hasher.update([0]);
            hasher.update(bytes);
        }
        digests.insert(
            split.to_string(),
            hasher
                .finalize()
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect(),
        );
    }
    let manifest = Manifest {
        train_count: train.len(),
        val_count: val.len(),
        digests,
    };
    let mut text = format!(
        "corpus total={} train={} val={}\n",
        train.len() + val.len(),
        train.len(),
        val.len()
    );
    for (split, digest) in &manifest.digests {
        text.push_str(&format!("digest split={split} sha256={digest}\n"));
    }
    std::fs::write(dir.join("manifest"), text).map_err(storage_err)?;
    Ok(manifest)
}

/// Read one split back; samples come out in id order.
pub fn read_corpus(dir: &Path, split: &str) -> Result<Vec<LoadedSample>, ShapesError> {
    let split_dir = dir.join(split);
    let mut ids: Vec<String> = std::fs::read_dir(&split_dir)
        .map_err(storage_err)?
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_suffix(".ann").map(|s| s.to_string())
        })
        .collect();
    ids.sort();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let ann =
            std::fs::read_to_string(split_dir.join(format!("{id}.ann"))).map_err(storage_err)?;
        let image = read_png(&split_dir.join(format!("{id}.png")))?;
        let (sample, edits) = parse_ann(&ann, image)?;
        out.push(LoadedSample { id, sample, edits });
    }
    Ok(out)
}
