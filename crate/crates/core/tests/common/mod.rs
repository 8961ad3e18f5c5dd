#![allow(dead_code)]

use codealign::config::RunConfig;
use codealign::dataset::{make_dataset, Dataset};
use codealign::RngSeed;

/// Default world and modalities with fewer scenes.
pub fn small_config(train: usize, eval: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.dataset.train_scenes = train;
    c.dataset.eval_scenes = eval;
    c
}

pub fn dataset(c: &RunConfig) -> Dataset {
    make_dataset(&c.dataset, c.seed).unwrap()
}

pub fn seed(s: u64) -> RngSeed {
    RngSeed(s)
}
