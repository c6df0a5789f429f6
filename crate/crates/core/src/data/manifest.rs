use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use super::{Benchmark, DataError, Dataset, Domain, Split};
use crate::image::GrayImage;

pub const MANIFEST_NAME: &str = "manifest.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads `relative/path,label` lines from `manifest`, resolving image paths
/// against `root`. Images are converted to grayscale and resized to
/// `height × width`.
pub fn load_dataset(
    root: &Path,
    manifest: &Path,
    height: usize,
    width: usize,
    classes: usize,
    domain: Domain,
    split: Split,
) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let mpath = manifest.display().to_string();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (rel, label) = line.rsplit_once(',').ok_or_else(|| DataError::Manifest {
            path: mpath.clone(),
            line: i + 1,
            message: format!("expected `path,label`, got `{line}`"),
        })?;
        let label: usize = label.trim().parse().map_err(|_| DataError::Manifest {
            path: mpath.clone(),
            line: i + 1,
            message: format!("bad label `{}`", label.trim()),
        })?;
        let path = root.join(rel.trim());
        if label >= classes {
            return Err(DataError::LabelOutOfRange {
                path: path.display().to_string(),
                label,
                classes,
            });
        }
        images.push(read_image(&path)?.resize(height, width));
        labels.push(label);
    }
    Ok(Dataset {
        images,
        labels: Some(labels),
        domain,
        split,
        classes,
    })
}

/// Decodes a PGM or PNG file (any bit depth or color) to grayscale.
pub fn read_image(path: &Path) -> Result<GrayImage, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let decode = |message: String| DataError::Decode {
        path: path.display().to_string(),
        message,
    };
    let img = image::load_from_memory(&bytes).map_err(|e| decode(e.to_string()))?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    GrayImage::from_u8(h as usize, w as usize, luma.as_raw()).map_err(|e| decode(e.to_string()))
}

/// Writes 8-bit grayscale: binary PGM for `.pgm`, otherwise the format
/// implied by the extension.
pub fn write_image(path: &Path, img: &GrayImage) -> Result<(), DataError> {
    let encode_err = |e: image::ImageError| DataError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let (w, h) = (img.width() as u32, img.height() as u32);
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let file = fs::File::create(path).map_err(io_err(path))?;
        PnmEncoder::new(BufWriter::new(file))
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&img.to_u8(), w, h, ExtendedColorType::L8)
            .map_err(encode_err)
    } else {
        image::save_buffer(path, &img.to_u8(), w, h, ExtendedColorType::L8).map_err(encode_err)
    }
}

/// Writes `dir/images/NNNNN.pgm` plus `dir/manifest.csv`. Unlabeled
/// datasets cannot be written since the manifest format requires labels.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<(), DataError> {
    let labels = data.labels()?;
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mpath = dir.join(MANIFEST_NAME);
    let file = fs::File::create(&mpath).map_err(io_err(&mpath))?;
    let mut out = BufWriter::new(file);
    for (i, (img, label)) in data.images.iter().zip(labels).enumerate() {
        let rel = format!("images/{i:05}.pgm");
        write_image(&dir.join(&rel), img)?;
        writeln!(out, "{rel},{label}").map_err(io_err(&mpath))?;
    }
    out.flush().map_err(io_err(&mpath))
}

/// Writes the four splits under `root/{source,target}_{train,test}/`.
pub fn write_benchmark(root: &Path, bench: &Benchmark) -> Result<(), DataError> {
    for (name, data) in bench.splits() {
        write_dataset(&root.join(name), data)?;
    }
    Ok(())
}

/// Reads the four splits written by [`write_benchmark`].
pub fn load_benchmark(root: &Path, height: usize, width: usize, classes: usize) -> Result<Benchmark, DataError> {
    let load = |name: &str, domain, split| {
        let dir = root.join(name);
        load_dataset(&dir, &dir.join(MANIFEST_NAME), height, width, classes, domain, split)
    };
    Ok(Benchmark {
        source_train: load("source_train", Domain::Source, Split::Train)?,
        source_test: load("source_test", Domain::Source, Split::Test)?,
        target_train: load("target_train", Domain::Target, Split::Train)?,
        target_test: load("target_test", Domain::Target, Split::Test)?,
    })
}
