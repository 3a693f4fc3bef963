//! Fixtures shared by the criterion benchmarks in `benches/`.

use lpmul_core::data::{Dataset, DatasetMeta};
use lpmul_core::{FormatSpec, Matrix, Network, QuantFormat, Rng, TrainConfig};

/// Uniform `[-1, 1)` matrix, optionally snapped to `fmt`.
pub fn random_matrix(rows: usize, cols: usize, seed: u64, fmt: QuantFormat) -> Matrix {
    let m = Matrix::random_uniform(&mut Rng::new(seed), rows, cols, -1.0, 1.0).expect("valid range");
    fmt.quantize_tensor(&m).expect("finite input").values
}

/// A desk-sized maxout network (784-200-200-10, two pieces) with the given
/// propagation and update formats.
pub fn desk_network(prop: FormatSpec, update: FormatSpec) -> Network {
    let cfg = TrainConfig {
        prop_format: prop,
        update_format: update,
        ..TrainConfig::default()
    };
    Network::new(784, 10, &cfg).expect("valid config")
}

/// `n` MNIST-shaped examples with random pixels in `[0, 1)`.
pub fn random_batch(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let x = Matrix::random_uniform(&mut rng, n, 784, 0.0, 1.0).expect("valid range");
    let y = (0..n).map(|_| rng.below(10) as u8).collect();
    Dataset::new(x, y, 10, DatasetMeta::default()).expect("consistent shapes")
}
