//! Point-annotated images: ingestion, synthetic scene generation,
//! augmentation, and cross-validation splits.

pub mod annotations;
pub mod synth;

pub use annotations::{load_annotations, save_dataset};
pub use synth::{synth_scene, SynthConfig, SynthScene};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::density::PointSet;
use crate::error::{data_err, usage_err, Result};
use crate::tensor::Tensor;

/// An image raster with its head-point annotations.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    /// `[3,H,W]`, values in [0,1].
    pub image: Tensor<f64>,
    pub points: PointSet,
    pub id: String,
}

impl AnnotatedImage {
    pub fn new(image: Tensor<f64>, points: Vec<(f64, f64)>, id: String) -> Result<Self> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(data_err!(
                "annotated image '{id}' expects [3,H,W] raster, got {:?}",
                image.shape()
            ));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let points = PointSet::validated(points, w, h)
            .map_err(|e| data_err!("annotated image '{id}': {e}"))?;
        Ok(AnnotatedImage { image, points, id })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Deterministic horizontal mirror: pixel column x maps to W-1-x and so
/// do the point coordinates. Sub-pixel points past the last pixel center
/// would leave the canvas and are dropped rather than clamped.
pub fn flip_horizontal(sample: &AnnotatedImage) -> AnnotatedImage {
    let (h, w) = (sample.height(), sample.width());
    let mut data = vec![0.0f64; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data[(c * h + y) * w + x] = sample.image.data()[(c * h + y) * w + (w - 1 - x)];
            }
        }
    }
    let points: Vec<(f64, f64)> = sample
        .points
        .iter()
        .map(|(x, y)| ((w - 1) as f64 - x, y))
        .filter(|&(x, _)| x >= 0.0)
        .collect();
    AnnotatedImage::new(
        Tensor::from_vec(&[3, h, w], data).expect("mirror layout"),
        points,
        sample.id.clone(),
    )
    .expect("mirrored points stay in bounds")
}

/// Random crop plus horizontal flip.
///
/// Points outside the crop window are dropped, not clamped, and the
/// survivors are re-based to the window origin.
pub fn augment<R: Rng>(
    sample: &AnnotatedImage,
    rng: &mut R,
    crop_size: usize,
    flip_prob: f64,
) -> Result<AnnotatedImage> {
    let (h, w) = (sample.height(), sample.width());
    if crop_size > h || crop_size > w {
        return Err(usage_err!(
            "crop size {crop_size} exceeds the {h}x{w} image"
        ));
    }
    if crop_size % 4 != 0 {
        return Err(usage_err!("crop size {crop_size} must be divisible by 4"));
    }
    let oy = if h == crop_size { 0 } else { rng.gen_range(0..=h - crop_size) };
    let ox = if w == crop_size { 0 } else { rng.gen_range(0..=w - crop_size) };

    let mut data = vec![0.0f64; 3 * crop_size * crop_size];
    for c in 0..3 {
        for y in 0..crop_size {
            let src = (c * h + oy + y) * w + ox;
            let dst = (c * crop_size + y) * crop_size;
            data[dst..dst + crop_size]
                .copy_from_slice(&sample.image.data()[src..src + crop_size]);
        }
    }
    let points: Vec<(f64, f64)> = sample
        .points
        .iter()
        .filter(|&(x, y)| {
            x >= ox as f64 && x < (ox + crop_size) as f64 && y >= oy as f64 && y < (oy + crop_size) as f64
        })
        .map(|(x, y)| (x - ox as f64, y - oy as f64))
        .collect();
    let cropped = AnnotatedImage::new(
        Tensor::from_vec(&[3, crop_size, crop_size], data)?,
        points,
        sample.id.clone(),
    )?;
    if rng.gen_range(0.0..1.0) < flip_prob {
        Ok(flip_horizontal(&cropped))
    } else {
        Ok(cropped)
    }
}

/// Deterministic shuffled partition into k folds of near-equal size;
/// each id lands in exactly one test fold.
pub fn kfold_splits(
    ids: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    if k < 2 {
        return Err(usage_err!("k-fold needs k >= 2, got {k}"));
    }
    if k > ids.len() {
        return Err(usage_err!(
            "k-fold needs at least k ids, got k={k} with {} ids",
            ids.len()
        ));
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, id) in shuffled.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok((0..k)
        .map(|i| {
            let test = folds[i].clone();
            let train = folds
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, f)| f.iter().cloned())
                .collect();
            (train, test)
        })
        .collect())
}
