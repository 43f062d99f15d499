//! Synthetic "blobs" corpus: normal images hold one smooth Gaussian blob,
//! anomalies add a structured corruption.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{save_image, RawImage};
use super::manifest::{DatasetManifest, ManifestRecord, Split};
use crate::error::{Error, Result};

pub const NORMAL_LABEL: &str = "normal";
pub const ANOMALY_LABEL: &str = "anomaly";
pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Blobs,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SynthKind::Blobs),
            other => Err(Error::arg(format!("unknown corpus kind {other:?}; valid: blobs"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("blobs")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    SecondBlob,
    Stripe,
    Hole,
}

struct Blob {
    cx: f64,
    cy: f64,
    width: f64,
    color: [f64; 3],
}

impl Blob {
    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let r2 = (x - self.cx).powi(2) + (y - self.cy).powi(2);
        let g = (-r2 / (2.0 * self.width * self.width)).exp();
        self.color.map(|c| c * g)
    }
}

/// Number of anomalies for `n` images at `rate`, rounded to nearest.
pub fn anomaly_count(n: usize, rate: f64) -> usize {
    ((n as f64 * rate).round() as usize).min(n)
}

/// Render one image. `corruption` is `None` for a normal image.
pub fn render_blob(size: usize, corruption: Option<Corruption>, rng: &mut ChaCha8Rng) -> RawImage {
    let s = size as f64;
    let bg = rng.random_range(20.0..40.0);
    let intensity = rng.random_range(140.0..210.0);
    let main = Blob {
        cx: rng.random_range(0.35..0.65) * s,
        cy: rng.random_range(0.35..0.65) * s,
        width: rng.random_range(0.10..0.18) * s,
        color: [
            intensity,
            intensity * rng.random_range(0.55..0.75),
            intensity * rng.random_range(0.40..0.60),
        ],
    };
    let second = (corruption == Some(Corruption::SecondBlob)).then(|| {
        // opposite quadrant from the main blob
        let qx = if main.cx < s / 2.0 { 0.8 } else { 0.2 };
        let qy = if main.cy < s / 2.0 { 0.8 } else { 0.2 };
        Blob {
            cx: (qx + rng.random_range(-0.06..0.06)) * s,
            cy: (qy + rng.random_range(-0.06..0.06)) * s,
            width: rng.random_range(0.07..0.11) * s,
            color: [60.0, 110.0, 210.0],
        }
    });
    let thickness = (s / 10.0).max(2.0);
    let stripe = (corruption == Some(Corruption::Stripe)).then(|| {
        let vertical = rng.random_bool(0.5);
        let offset = rng.random_range(0.15..0.85) * s;
        (vertical, offset)
    });
    let hole_radius = main.width * rng.random_range(0.6..0.9);

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = main.at(px, py).map(|c| bg + c);
            if let Some(b) = &second {
                let extra = b.at(px, py);
                for (c, e) in v.iter_mut().zip(extra) {
                    *c += e;
                }
            }
            if let Some((vertical, offset)) = stripe {
                let d = if vertical { px - offset } else { py - offset };
                if d.abs() < thickness / 2.0 {
                    v = [235.0, 235.0, 225.0];
                }
            }
            if corruption == Some(Corruption::Hole) {
                let r = ((px - main.cx).powi(2) + (py - main.cy).powi(2)).sqrt();
                if r < hole_radius {
                    v = [bg * 0.3; 3];
                }
            }
            data.extend(v.map(|c| c.round().clamp(0.0, 255.0) as u8));
        }
    }
    RawImage::new(size, size, 3, data).expect("rendered buffer matches shape")
}

/// Default split assignment for a generated corpus: normals are split 70/10/20
/// (train/val/test_normal, floors taken for val and test), every anomaly is
/// test_anomaly.
pub fn default_split(normal_index: usize, normals: usize) -> Split {
    let test = normals / 5;
    let val = normals / 10;
    if normal_index < normals - test - val {
        Split::Train
    } else if normal_index < normals - test {
        Split::Val
    } else {
        Split::TestNormal
    }
}

/// Write `n` PPM images and `manifest.jsonl` into `out_dir`. Returns the
/// manifest and its path.
pub fn synth_generate(
    kind: SynthKind,
    n: usize,
    image_size: usize,
    anomaly_rate: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<(DatasetManifest, PathBuf)> {
    let SynthKind::Blobs = kind;
    if n == 0 {
        return Err(Error::arg("n must be at least 1"));
    }
    if image_size < 4 {
        return Err(Error::arg("image size must be at least 4"));
    }
    if !(0.0..=1.0).contains(&anomaly_rate) {
        return Err(Error::arg(format!("anomaly rate {anomaly_rate} outside [0, 1]")));
    }
    std::fs::create_dir_all(out_dir)?;
    let n_anom = anomaly_count(n, anomaly_rate);
    let normals = n - n_anom;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut master);
    let mut is_anomaly = vec![false; n];
    for i in &order[..n_anom] {
        is_anomaly[*i] = true;
    }
    let kinds = [Corruption::SecondBlob, Corruption::Stripe, Corruption::Hole];
    let mut records = Vec::with_capacity(n);
    let mut normal_index = 0;
    for (i, anomalous) in is_anomaly.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let corruption = anomalous.then(|| kinds[rng.random_range(0..kinds.len())]);
        let img = render_blob(image_size, corruption, &mut rng);
        let name = format!("blob_{i:05}.ppm");
        save_image(&out_dir.join(&name), &img)?;
        let (label, split) = if anomalous {
            (ANOMALY_LABEL, Split::TestAnomaly)
        } else {
            normal_index += 1;
            (NORMAL_LABEL, default_split(normal_index - 1, normals))
        };
        records.push(ManifestRecord {
            path: name,
            label: label.to_string(),
            split,
        });
    }
    let manifest = DatasetManifest::new(records, out_dir);
    let path = out_dir.join(MANIFEST_NAME);
    manifest.save(&path)?;
    Ok((manifest, path))
}
