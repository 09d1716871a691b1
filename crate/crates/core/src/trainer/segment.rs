use crate::numerics::ScoreMaps;
use crate::raster::Mask;
use crate::scalar::{argmax, Scalar};

pub const DEFAULT_BACKGROUND_POWER: i32 = 4;

/// Image-level label: the highest aggregated class score.
pub fn image_label<T: Scalar>(maps: &ScoreMaps<T>) -> usize {
    argmax(&maps.image)
}

/// Pixels whose probability for `label` beats the background probability
/// raised to `background_power`.
pub fn segment_2d<T: Scalar>(maps: &ScoreMaps<T>, label: usize, background_power: i32) -> Mask {
    let bg = maps.background();
    let data = (0..maps.num_pixels())
        .map(|i| {
            let q = maps.pixel_probs(i);
            q[label] > q[bg].powi(background_power)
        })
        .collect();
    Mask {
        width: maps.width,
        height: maps.height,
        data,
    }
}
