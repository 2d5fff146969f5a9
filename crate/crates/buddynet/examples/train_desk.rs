//! End-to-end desk-scale training of the master/assistant pair on a small
//! synthetic texture corpus, then a retrieval evaluation with the trained
//! master. Takes a minute or so.
//!
//!     cargo run --release --example train_desk

use buddynet::data::{synth_dataset, SyntheticSpec};
use buddynet::pipeline::evaluate_on_dataset;
use buddynet::postproc::DiffusionConfig;
use buddynet::retrieval::EmbedOptions;
use buddynet::train::{train, TrainingConfig};

fn main() {
    let mut spec = SyntheticSpec::new(4, 48, 32);
    spec.seed = 1;
    let data = synth_dataset(&spec).unwrap();
    println!(
        "corpus: {} train, {} database, {} queries",
        data.train.len(),
        data.database.len(),
        data.queries.len()
    );

    let mut cfg = TrainingConfig::desk_default();
    cfg.epochs = 30;
    cfg.warmup_epochs = 2;
    cfg.seed = 1;
    let state = train(&cfg, &data.train).unwrap();
    println!("epoch  total      kl        arc_master arc_assistant lr");
    for s in &state.history {
        if s.epoch % 5 == 0 || s.epoch + 1 == cfg.epochs {
            println!(
                "{:5}  {:9.3}  {:8.3}  {:9.3}  {:9.3}     {:.5}",
                s.epoch, s.total, s.kl, s.arc_master, s.arc_assistant, s.lr
            );
        }
    }
    println!("gem p: master {:.3}, assistant {:.3}", state.master.gem_p.data[0], state.assistant.gem_p.data[0]);

    let report = evaluate_on_dataset(
        &state.master,
        &data,
        &EmbedOptions::new(cfg.crop.clone()),
        "none",
        &DiffusionConfig::default(),
    )
    .unwrap();
    println!("hold-out retrieval mAP: {:.4}", report.map);
}
