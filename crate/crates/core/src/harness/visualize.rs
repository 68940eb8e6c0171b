//! File-emitting visualization: PNG overlays and mesh exports.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::scene::{Dataset, SceneSample};

pub fn to_rgb(image: &Array3<f32>) -> RgbImage {
    let (h, w, _) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn read_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::from(other).context(format!("reading {}", path.display())),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
}

/// Filled square marker of half-width `r` centered on each point.
pub fn draw_points(img: &mut RgbImage, points: &[[f64; 2]], color: [u8; 3], r: i64) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for p in points {
        if !(p[0].is_finite() && p[1].is_finite()) {
            continue;
        }
        let (cx, cy) = (p[0].floor() as i64, p[1].floor() as i64);
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if x >= 0 && y >= 0 && x < w && y < h {
                    img.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }
}

/// Straight segments between joint pairs.
pub fn draw_skeleton(img: &mut RgbImage, points: &[[f64; 2]], edges: &[(usize, usize)], color: [u8; 3]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    for &(a, b) in edges {
        let (p, q) = (points[a], points[b]);
        let n = ((q[0] - p[0]).hypot(q[1] - p[1]).ceil() as usize).clamp(1, 4096);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let x = p[0] + t * (q[0] - p[0]);
            let y = p[1] + t * (q[1] - p[1]);
            if x >= 0.0 && y >= 0.0 && x < w && y < h {
                img.put_pixel(x as u32, y as u32, Rgb(color));
            }
        }
    }
}

pub const PALETTE: [[u8; 3]; 6] = [
    [255, 64, 64],
    [64, 200, 255],
    [255, 220, 64],
    [120, 255, 120],
    [230, 120, 255],
    [255, 160, 80],
];

/// Scene image, silhouettes tinted per person, and GT joints with the
/// skeleton; returns the written files.
pub fn visualize_sample(sample: &SceneSample, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let base = to_rgb(&sample.image);
    let path = out_dir.join(format!("{}_image.png", sample.id));
    save_png(&base, &path)?;
    written.push(path);

    let mut masks = base.clone();
    for (i, person) in sample.persons.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for ((r, c), &m) in person.silhouette.indexed_iter() {
            if m != 0 {
                let px = masks.get_pixel_mut(c as u32, r as u32);
                for k in 0..3 {
                    px[k] = ((u16::from(px[k]) + u16::from(color[k])) / 2) as u8;
                }
            }
        }
    }
    let path = out_dir.join(format!("{}_silhouettes.png", sample.id));
    save_png(&masks, &path)?;
    written.push(path);

    let mut joints = base;
    let edges: Vec<(usize, usize)> = crate::joints::COMMON_EDGES
        .iter()
        .map(|&(a, b)| (crate::joints::COMMON[a], crate::joints::COMMON[b]))
        .collect();
    for (i, person) in sample.persons.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        draw_skeleton(&mut joints, &person.joints2d, &edges, color);
        let hidden: Vec<[f64; 2]> = person
            .joints2d
            .iter()
            .zip(&person.visible)
            .filter(|(_, v)| !**v)
            .map(|(p, _)| *p)
            .collect();
        draw_points(&mut joints, &person.joints2d, color, 1);
        draw_points(&mut joints, &hidden, [0, 0, 0], 0);
    }
    let path = out_dir.join(format!("{}_joints.png", sample.id));
    save_png(&joints, &path)?;
    written.push(path);
    Ok(written)
}

/// Visualizes the listed samples (all of `split` when empty) and, with a
/// checkpoint, their predicted joints and meshes.
pub fn visualize(
    dataset: &Path,
    split: &str,
    ids: &[String],
    checkpoint: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let ds = Dataset::open(dataset)?;
    let ids: Vec<String> = if ids.is_empty() {
        ds.split_ids(split)?.to_vec()
    } else {
        ids.to_vec()
    };
    let net = checkpoint
        .map(|c| crate::model::CrowdNet::load(c, &candle_core::Device::Cpu))
        .transpose()?;
    let mut written = Vec::new();
    for id in &ids {
        let sample = ds.load(id)?;
        written.extend(visualize_sample(&sample, out_dir)?);
        if let Some(net) = &net {
            for p in 0..sample.persons.len() {
                let pose = sample.persons[p].pose2d();
                let stem = out_dir.join(format!("{}_p{p}", sample.id));
                let files = super::infer::infer_arrays(net, &sample.image, &pose, &stem)?;
                written.extend([files.params, files.mesh, files.overlay]);
            }
        }
    }
    Ok(written)
}
