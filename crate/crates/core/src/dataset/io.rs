//! On-disk formats: line-delimited manifest, split JSON and per-sample PNGs.
//!
//! The first manifest line is a header object carrying `num_ids` and
//! `generator_config`; every following line is one sample descriptor.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use super::protocol::ProtocolSplit;
use super::synth::SynthConfig;
use super::types::{Image, SampleDescriptor};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    num_ids: u32,
    generator_config: SynthConfig,
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = ManifestHeader { num_ids: manifest.num_ids, generator_config: manifest.generator_config.clone() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header: ManifestHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Format(format!("{} is empty", path.display()))),
    };
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleDescriptor = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 2)))?;
        records.push(rec);
    }
    let manifest = Manifest { records, num_ids: header.num_ids, generator_config: header.generator_config };
    manifest.check_unique_ids()?;
    Ok(manifest)
}

pub fn write_split(split: &ProtocolSplit, path: &Path) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, split)?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<ProtocolSplit> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// 8-bit RGB encoding of a `[0, 1]` image.
pub fn image_to_rgb8(img: &Image) -> image::RgbImage {
    let s = img.size() as u32;
    image::RgbImage::from_fn(s, s, |x, y| {
        let px = |c| (img.get(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    image_to_rgb8(img).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    if w != h {
        return Err(Error::Format(format!("{} is not square", path.display())));
    }
    let s = w as usize;
    let mut img = Image::zeros(s);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, p.0[c] as f64 / 255.0);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_manifest, render, split_protocol, ProtocolId};

    #[test]
    fn manifest_and_split_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_manifest(&SynthConfig { num_ids: 12, frames_per_video: 2, ..Default::default() }).unwrap();
        let mp = dir.path().join("manifest.jsonl");
        write_manifest(&m, &mp).unwrap();
        assert_eq!(read_manifest(&mp).unwrap(), m);
        let text = std::fs::read_to_string(&mp).unwrap();
        assert_eq!(text.lines().count(), m.len() + 1);
        let first: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        for key in ["sample_id", "identity_id", "ethnicity", "attack", "label", "seed"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }

        let s = split_protocol(&m, ProtocolId::P2_2, None).unwrap();
        let sp = dir.path().join("split.json");
        write_split(&s, &sp).unwrap();
        assert_eq!(read_split(&sp).unwrap(), s);
    }

    #[test]
    fn png_is_lossless_at_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::default();
        let m = build_manifest(&SynthConfig { num_ids: 1, frames_per_video: 1, ..cfg.clone() }).unwrap();
        let img = render(&m.records[3], &cfg).unwrap();
        let p = dir.path().join(format!("{}.png", m.records[3].sample_id));
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(image_to_rgb8(&back), image_to_rgb8(&img));
        assert!(back.mean_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }
}
