//! Dataset directories: `images/NNNN.ppm` (or `.pgm` for grayscale),
//! `masks/NNNN.pgm`, a `manifest.txt` listing the pairs plus the scene
//! description, and `split.txt` with the index partition.

use std::fs;
use std::path::Path;

use super::pnm;
use crate::synthdata::{LabeledImage, SceneSpec};
use crate::training::SplitSpec;
use crate::{Error, Result};

/// A loaded dataset: the scene it was generated from plus all pairs.
pub struct Dataset {
    pub scene: SceneSpec,
    pub items: Vec<LabeledImage<f32>>,
}

pub fn write_dataset(
    dir: impl AsRef<Path>,
    scene: &SceneSpec,
    items: &[LabeledImage<f32>],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let ext = if scene.task.input_channels() == 3 {
        "ppm"
    } else {
        "pgm"
    };
    let mut manifest = String::new();
    manifest.push_str(&scene.to_manifest_line());
    manifest.push('\n');
    for (i, item) in items.iter().enumerate() {
        let image_rel = format!("images/{i:04}.{ext}");
        let mask_rel = format!("masks/{i:04}.pgm");
        pnm::write_image(&item.image, dir.join(&image_rel))?;
        pnm::write_mask_pgm(&item.mask, dir.join(&mask_rel))?;
        manifest.push_str(&format!("{i:04} {image_rel} {mask_rel}\n"));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load and validate a dataset directory: consistent shapes, labels inside
/// the task's class range.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut lines = manifest.lines();
    let scene_line = lines
        .next()
        .ok_or_else(|| Error::format("manifest", "empty manifest"))?;
    let scene = SceneSpec::from_manifest_line(scene_line)?;
    let mut items = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let _index = parts
            .next()
            .ok_or_else(|| Error::format("manifest", "missing pair index"))?;
        let image_rel = parts
            .next()
            .ok_or_else(|| Error::format("manifest", "missing image path"))?;
        let mask_rel = parts
            .next()
            .ok_or_else(|| Error::format("manifest", "missing mask path"))?;
        let image = pnm::read_image(dir.join(image_rel))?;
        let mask = pnm::read_mask_pgm(dir.join(mask_rel))?;
        let dims = image.spatial_dims()?;
        if (mask.height, mask.width) != (dims.height, dims.width) {
            return Err(Error::dim(format!(
                "{mask_rel} is {}x{} but {image_rel} is {}x{}",
                mask.height, mask.width, dims.height, dims.width
            )));
        }
        if dims.channels != scene.task.input_channels() {
            return Err(Error::dim(format!(
                "{image_rel} has {} channels, task {} expects {}",
                dims.channels,
                scene.task.name(),
                scene.task.input_channels()
            )));
        }
        mask.class_counts(scene.task.num_classes())?;
        items.push(LabeledImage { image, mask });
    }
    if items.is_empty() {
        return Err(Error::Size("dataset has no image/mask pairs".into()));
    }
    Ok(Dataset { scene, items })
}

pub fn write_split(dir: impl AsRef<Path>, split: &SplitSpec) -> Result<()> {
    let render = |name: &str, ids: &[usize]| {
        let mut line = String::from(name);
        line.push(':');
        for id in ids {
            line.push(' ');
            line.push_str(&id.to_string());
        }
        line.push('\n');
        line
    };
    let content = format!(
        "{}{}{}",
        render("train", &split.train),
        render("val", &split.val),
        render("test", &split.test)
    );
    fs::write(dir.as_ref().join("split.txt"), content)?;
    Ok(())
}

pub fn read_split(dir: impl AsRef<Path>) -> Result<SplitSpec> {
    let content = fs::read_to_string(dir.as_ref().join("split.txt"))?;
    let mut train = None;
    let mut val = None;
    let mut test = None;
    for line in content.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::format("split", format!("missing ':' in {line:?}")))?;
        let ids = rest
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::format("split", format!("bad index {s:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        match name {
            "train" => train = Some(ids),
            "val" => val = Some(ids),
            "test" => test = Some(ids),
            other => {
                return Err(Error::format(
                    "split",
                    format!("unknown split name {other:?}"),
                ))
            }
        }
    }
    Ok(SplitSpec {
        train: train.ok_or_else(|| Error::format("split", "missing train line"))?,
        val: val.ok_or_else(|| Error::format("split", "missing val line"))?,
        test: test.ok_or_else(|| Error::format("split", "missing test line"))?,
    })
}
