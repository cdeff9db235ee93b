use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::CsmoeConfig;
use crate::numerics::{tnsr, Tensor};

/// One co-registered image pair, `C×H×W` per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedImage {
    pub id: String,
    pub x: Tensor,
    pub y: Tensor,
}

/// Loads every `<id>_x.tnsr` / `<id>_y.tnsr` pair in `dir`, sorted by id.
/// Other files are ignored; an id with only one half is a data error.
pub fn load_pairs(dir: &Path) -> Result<Vec<PairedImage>> {
    let mut halves: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name.strip_suffix(".tnsr") else {
            continue;
        };
        let (id, is_x) = if let Some(id) = stem.strip_suffix("_x") {
            (id, true)
        } else if let Some(id) = stem.strip_suffix("_y") {
            (id, false)
        } else {
            log::warn!("ignoring {}: not named <id>_x.tnsr or <id>_y.tnsr", path.display());
            continue;
        };
        let t = tnsr::load(&path)?;
        let slot = halves.entry(id.to_string()).or_default();
        if is_x {
            slot.0 = Some(t);
        } else {
            slot.1 = Some(t);
        }
    }
    let unpaired: Vec<&str> =
        halves.iter().filter(|(_, (x, y))| x.is_none() || y.is_none()).map(|(id, _)| id.as_str()).collect();
    if !unpaired.is_empty() {
        return Err(Error::Data(format!("{}: unpaired ids {}", dir.display(), unpaired.join(", "))));
    }
    Ok(halves
        .into_iter()
        .map(|(id, (x, y))| PairedImage { id, x: x.expect("paired"), y: y.expect("paired") })
        .collect())
}

pub fn write_pairs(dir: &Path, pairs: &[PairedImage]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in pairs {
        tnsr::save(&dir.join(format!("{}_x.tnsr", p.id)), &p.x)?;
        tnsr::save(&dir.join(format!("{}_y.tnsr", p.id)), &p.y)?;
    }
    Ok(())
}

/// Synthetic pairs sharing latent structure across modalities.
///
/// Each pair draws a few smooth latent fields (random plane waves). Every band
/// of either modality is a random mix of those fields plus pixel noise, so the
/// two images are informative about each other the way co-registered SAR and
/// optical tiles are.
pub fn synthesize(n: usize, cfg: &CsmoeConfig, seed: u64) -> Vec<PairedImage> {
    const LATENT: usize = 3;
    const WAVES: usize = 2;
    let side = cfg.image_side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    // Band loadings are shared by the whole data set.
    let loadings = |channels: usize, rng: &mut ChaCha8Rng| -> Vec<[f64; LATENT]> {
        (0..channels).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()
    };
    let lx = loadings(cfg.channels_x, &mut rng);
    let ly = loadings(cfg.channels_y, &mut rng);
    (0..n)
        .map(|i| {
            let waves: Vec<[(f64, f64, f64, f64); WAVES]> = (0..LATENT)
                .map(|_| {
                    std::array::from_fn(|_| {
                        let fr = rng.random_range(0.5..3.0) / side as f64;
                        let fc = rng.random_range(0.5..3.0) / side as f64;
                        (fr, fc, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0))
                    })
                })
                .collect();
            let field: Vec<f64> = (0..LATENT * side * side)
                .map(|k| {
                    let (l, r, c) = (k / (side * side), (k / side) % side, k % side);
                    waves[l]
                        .iter()
                        .map(|&(fr, fc, ph, a)| {
                            a * (std::f64::consts::TAU * (fr * r as f64 + fc * c as f64) + ph).sin()
                        })
                        .sum()
                })
                .collect();
            let render = |load: &[[f64; LATENT]], rng: &mut ChaCha8Rng| {
                Tensor::from_fn(&[load.len(), side, side], |k| {
                    let (b, px) = (k / (side * side), k % (side * side));
                    let v: f64 = (0..LATENT).map(|l| load[b][l] * field[l * side * side + px]).sum();
                    v + noise.sample(rng)
                })
            };
            let x = render(&lx, &mut rng);
            let y = render(&ly, &mut rng);
            PairedImage { id: format!("syn{i:05}"), x, y }
        })
        .collect()
}
