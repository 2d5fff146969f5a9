//! A miniature weight-transfer λ sweep: every cell trains from scratch and
//! reports hold-out mAP. The full 14-point grid from 0.30 to 0.95 runs the
//! same way through `buddynet ablate --grid lambda`.
//!
//!     cargo run --release --example lambda_sweep

use buddynet::crop::CropConfig;
use buddynet::data::{synth_dataset, SyntheticSpec};
use buddynet::train::{ablate, ablation_table, GridSpec, TrainingConfig};

fn main() {
    let mut spec = SyntheticSpec::new(3, 12, 32);
    spec.seed = 9;
    let data = synth_dataset(&spec).unwrap();

    let mut base = TrainingConfig::desk_default();
    base.epochs = 8;
    base.warmup_epochs = 1;
    base.seed = 9;
    base.crop = CropConfig { n_local: 4, ..CropConfig::desk_default() };

    let grid = GridSpec::Lambda { from: 0.25, to: 1.0, step: 0.25 };
    let rows = ablate(&grid, &base, &data).unwrap();
    print!("{}", ablation_table(&rows));
}
