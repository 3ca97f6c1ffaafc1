//! Fixtures shared by the benchmarks.

use dmll_core::oracle::{synth_generate, SyntheticSample, SyntheticWorld};
use dmll_core::{Example, ModelParams};

pub struct BatchFixture {
    pub sample: SyntheticSample,
    pub params: ModelParams,
}

impl BatchFixture {
    /// `n` determined samples from a random world with `k` classes over `d`
    /// features and a freshly initialised model with embedding width `m`.
    pub fn new(n: usize, k: usize, d: usize, m: usize) -> Self {
        let world = SyntheticWorld::random(k, d, 7).expect("valid world");
        Self {
            sample: synth_generate(&world, n).expect("valid sample"),
            params: ModelParams::init(7, d, m, k).expect("valid model"),
        }
    }

    pub fn batch(&self) -> Vec<Example<'_>> {
        self.sample
            .determined
            .instances()
            .iter()
            .map(Example::from)
            .collect()
    }
}
