//! Corpus persistence: one lossless 8-bit PNG per item plus a JSON manifest
//! mapping filename to caption, concept, split, and seed.
//!
//! Loading quantizes pixels to 8 bits; pipeline stages always train from the
//! loaded form so that reruns see identical data.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unlearn_core::synthworld::{CaptionedImage, Concept, Corpus, Image, Split};
use unlearn_core::tensor::Tensor;

use crate::error::{LabError, Result};

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    split: String,
    seed: u64,
    side: usize,
    items: Vec<ItemRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ItemRecord {
    file: String,
    caption: String,
    shape: String,
    color: String,
    split: String,
    seed: u64,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a corpus directory: img_XXXXX.png files plus manifest.json.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut items = Vec::with_capacity(corpus.items.len());
    for (i, item) in corpus.items.iter().enumerate() {
        let name = format!("img_{i:05}.png");
        let path = dir.join(&name);
        write_png(&item.image, &path)?;
        items.push(ItemRecord {
            file: name,
            caption: item.caption.clone(),
            shape: item.concept.shape.name().to_string(),
            color: item.concept.color.name().to_string(),
            split: corpus.split.name().to_string(),
            seed: corpus.seed,
        });
    }
    let manifest = CorpusManifest {
        split: corpus.split.name().to_string(),
        seed: corpus.seed,
        side: corpus.items.first().map_or(0, |i| i.image.side()),
        items,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| LabError::json(&path, e))?;
    fs::write(&path, json).map_err(|e| LabError::io(&path, e))?;
    Ok(())
}

/// Read a corpus directory back as 8-bit-quantized images.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| LabError::io(&manifest_path, e))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| LabError::json(&manifest_path, e))?;
    let split = Split::from_name(&manifest.split)?;
    let mut items = Vec::with_capacity(manifest.items.len());
    for record in &manifest.items {
        let path = dir.join(&record.file);
        let image = read_png(&path)?;
        let concept = Concept::new(
            unlearn_core::synthworld::Shape::from_name(&record.shape)?,
            unlearn_core::synthworld::Color::from_name(&record.color)?,
        );
        items.push(CaptionedImage {
            image,
            caption: record.caption.clone(),
            concept,
        });
    }
    Ok(Corpus {
        items,
        split,
        seed: manifest.seed,
    })
}

pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    let side = image.side();
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), side as u32, side as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| LabError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut buf = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let [r, g, b] = image.pixel(y, x);
            buf.push(quantize(r));
            buf.push(quantize(g));
            buf.push(quantize(b));
        }
    }
    writer.write_image_data(&buf).map_err(|e| LabError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| LabError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| LabError::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (info.width as usize, info.height as usize);
    if w != h || info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(LabError::Png {
            path: path.to_path_buf(),
            message: format!(
                "expected square 8-bit RGB, got {w}x{h} {:?} {:?}",
                info.color_type, info.bit_depth
            ),
        });
    }
    let mut planes = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                planes.data_mut()[c * h * w + y * w + x] =
                    buf[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(Image { planes })
}
