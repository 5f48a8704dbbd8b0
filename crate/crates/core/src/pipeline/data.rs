use crate::branches::{Dataset, View};
use crate::error::Result;
use crate::parsemap::{
    augment, build_feature_map, resize_rgb_nearest, rgb_to_tensor, BBox, FrameSelection, LabelMap, Palette,
    PhotometricJitter, TileLayout,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Parsing frames per sample. Training views draw random frames and
/// photometric jitter from `(seed, epoch, index)`; evaluation views use the
/// equal-interval selection without augmentation.
pub struct ParsingDataset {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub maps: Vec<Vec<LabelMap>>,
    pub boxes: Vec<Vec<Option<BBox>>>,
    pub palette: Palette,
    pub layout: TileLayout,
    pub frames: usize,
    pub jitter: PhotometricJitter,
    pub input_size: Option<u32>,
}

pub fn map_to_input(img: &image::RgbImage, input_size: Option<u32>) -> Tensor<f32> {
    match input_size {
        Some(s) if img.dimensions() != (s, s) => rgb_to_tensor(&resize_rgb_nearest(img, s, s)),
        _ => rgb_to_tensor(img),
    }
}

impl Dataset for ParsingDataset {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn sample_id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn input(&self, i: usize, view: View) -> Result<Tensor<f32>> {
        let img = match view {
            View::Eval => {
                let fm = build_feature_map(
                    &self.maps[i],
                    &self.boxes[i],
                    &FrameSelection::test(self.frames),
                    &self.palette,
                    &self.layout,
                )?;
                fm.image
            }
            View::Train { epoch, seed } => {
                let mut rng = Rng::derive(seed, &[epoch as u64, i as u64]);
                let sel = FrameSelection::train(self.frames, rng.next_u64());
                let fm = build_feature_map(&self.maps[i], &self.boxes[i], &sel, &self.palette, &self.layout)?;
                augment(&fm.image, &self.jitter, rng.next_u64())
            }
        };
        Ok(map_to_input(&img, self.input_size))
    }
}
