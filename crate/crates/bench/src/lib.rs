//! Fixtures shared by the kernel benchmarks.

use stormnet::data::{Architecture, Task};
use stormnet::{Model, Rng, Tensor};

/// Image side of the synthetic samples.
pub const SIDE: usize = 48;
/// Input channels of the synthetic samples.
pub const CHANNELS: usize = 4;

/// Uniform `[n, side, side, channels]` images.
pub fn images(n: usize, side: usize, channels: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[n, side, side, channels], 0.0, 1.0, &mut Rng::new(seed))
}

/// An untrained model of `arch` with its default layout for `task`.
pub fn model(arch: Architecture, task: Task) -> Model {
    let spec = arch
        .default_spec(task, &[SIDE, SIDE, CHANNELS])
        .expect("default layout");
    Model::build(&spec).expect("default layout builds")
}
