//! Shared fixtures for the criterion benchmarks in `benches/`.

use maf_core::model::{CaptionInput, ImageInput};
use maf_core::synth::{generate, Synthetic};
use maf_core::training::init_for_dataset;
use maf_core::{ModelParams, SynthConfig, TrainConfig};

/// A synthetic dataset with freshly initialized parameters and encoded inputs.
pub struct Fixture {
    pub synthetic: Synthetic,
    pub params: ModelParams,
    pub images: Vec<ImageInput>,
    pub captions: Vec<CaptionInput>,
}

pub fn fixture(n_images: usize) -> Fixture {
    let synthetic = generate(&SynthConfig {
        n_images,
        captions_per_image: 1,
        ..Default::default()
    })
    .expect("valid synth config");
    let params = init_for_dataset(&TrainConfig::default(), &synthetic.dataset, &synthetic.table);
    let ds = &synthetic.dataset;
    let images = ds
        .images
        .iter()
        .map(|im| ImageInput::encode(im, &synthetic.table, &ds.features))
        .collect();
    let captions = ds
        .images
        .iter()
        .map(|im| {
            let words: Vec<Vec<String>> = im.captions[0].phrases.iter().map(|p| p.words.clone()).collect();
            params.encode_caption(&words, &synthetic.table)
        })
        .collect();
    Fixture {
        synthetic,
        params,
        images,
        captions,
    }
}
