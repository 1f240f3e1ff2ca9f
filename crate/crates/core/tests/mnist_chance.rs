use std::path::{Path, PathBuf};

use alphapool::config::TrainConfig;
use alphapool::data::{load_mnist, Split};
use alphapool::experiment::{eval_checkpoint, init_checkpoint};

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("ALPHAPOOL_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("t10k-labels-idx1-ubyte").exists().then_some(dir)
}

// A single untrained network often prefers a few classes, so its accuracy
// ranges from about 0.03 to 0.14 with the seed. The mean over seeds is the
// stable quantity.
#[test]
fn untrained_models_average_chance() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST not found; skipping");
        return;
    };
    let test = load_mnist(&dir, Split::Test).unwrap().truncated(2000).unwrap();
    let mut config = TrainConfig::default();
    config.set("pool", "alphaI").unwrap();
    let mut accs = Vec::new();
    for seed in 1..=10 {
        config.seed = seed;
        let checkpoint = init_checkpoint(&config).unwrap();
        let result = eval_checkpoint(&checkpoint, &config, &test).unwrap();
        assert_eq!(result.total, 2000);
        accs.push(result.accuracy());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.10).abs() <= 0.03, "mean {mean} over {accs:?}");
}
