//! The joint training loop: per image, the assistant embeds its crop
//! selection (global by default) and the master embeds its own (global +
//! local by default); each block pays its angular-margin loss through its
//! own head, the KL term couples the pair grid of embeddings, the batch sum
//! backpropagates once through both blocks, and AdamW updates them. Weight
//! transfer θ_m ← λθ_m + (1−λ)θ_a runs once per epoch (per step available
//! as a config knob).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use crate::autodiff::{Graph, TensorId};
use crate::backbone::{BackboneConfig, BlockParams, BlockVars};
use crate::checkpoint::save_block;
use crate::crop::{multi_crop, CropConfig, CropSet, PixelStats};
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::loss::{arcface_loss, kl_pair_grid, ArcFaceHeadVars, LossBreakdown};
use crate::rng::{mix_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlDirection {
    /// Master embeddings are the reference distributions (the default).
    Down,
    /// Assistant embeddings are the reference (reversed ablation).
    Up,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WtDirection {
    /// Master absorbs the assistant (the default).
    Up,
    /// Assistant absorbs the master (reversed ablation).
    Down,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropSelect {
    GlobalLocal,
    Global,
    Local,
}

impl CropSelect {
    fn pick<'a>(&self, crops: &'a CropSet) -> Vec<&'a crate::crop::Crop> {
        match self {
            CropSelect::GlobalLocal => crops.globals.iter().chain(&crops.locals).collect(),
            CropSelect::Global => crops.globals.iter().collect(),
            CropSelect::Local => crops.locals.iter().collect(),
        }
    }
}

impl std::fmt::Display for CropSelect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CropSelect::GlobalLocal => "G+L",
            CropSelect::Global => "G",
            CropSelect::Local => "L",
        })
    }
}

impl std::fmt::Display for KlDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KlDirection::Down => "down",
            KlDirection::Up => "up",
            KlDirection::Off => "off",
        })
    }
}

impl std::fmt::Display for WtDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WtDirection::Up => "up",
            WtDirection::Down => "down",
            WtDirection::Off => "off",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferCadence {
    PerEpoch,
    PerStep,
}

#[derive(Clone, Debug)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub crop: CropConfig,
    pub kl_temperature: f64,
    pub kl_direction: KlDirection,
    pub wt_direction: WtDirection,
    pub master_crops: CropSelect,
    pub assistant_crops: CropSelect,
    pub cadence: TransferCadence,
    /// When set, master/assistant checkpoints are written every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainingConfig {
    pub fn desk_default() -> Self {
        TrainingConfig {
            lambda: 0.5,
            batch_size: 16,
            epochs: 30,
            lr: 4e-3,
            warmup_epochs: 3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            backbone: BackboneConfig::desk_default(),
            crop: CropConfig::desk_default(),
            kl_temperature: 0.1,
            kl_direction: KlDirection::Down,
            wt_direction: WtDirection::Up,
            master_crops: CropSelect::GlobalLocal,
            assistant_crops: CropSelect::Global,
            cadence: TransferCadence::PerEpoch,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Validation(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be >= 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Validation(format!(
                "warmup epochs {} exceed total epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Validation("learning rate must be positive".into()));
        }
        if self.kl_temperature <= 0.0 {
            return Err(Error::Validation("kl temperature must be positive".into()));
        }
        self.backbone.validate()?;
        self.crop.validate()
    }

    /// Linear warm-up then cosine decay, per epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.warmup_epochs > 0 && epoch < self.warmup_epochs {
            return self.lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let decay_span = self.epochs.saturating_sub(self.warmup_epochs);
        if decay_span <= 1 {
            return self.lr;
        }
        let progress = (epoch - self.warmup_epochs) as f64 / (decay_span - 1) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Is there at least one learning path from the assistant into the master
/// (weight transfer upward, or KL with the assistant as reference)?
pub fn cell_has_assistant_support(kl: KlDirection, wt: WtDirection) -> bool {
    wt == WtDirection::Up || kl == KlDirection::Up
}

// ---------------------------------------------------------------------------
// optimizer: decoupled weight decay + adaptive moments
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
struct AdamW {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    fn update(
        &mut self,
        params: &mut BlockParams,
        grads: &BTreeMap<String, Vec<f64>>,
        cfg: &TrainingConfig,
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - cfg.beta1.powf(t);
        let bias2 = 1.0 - cfg.beta2.powf(t);
        for (name, tensor) in params.named_tensors_mut() {
            if !BlockParams::is_trainable(&name) {
                continue;
            }
            let Some(grad) = grads.get(&name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for i in 0..grad.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                tensor.data[i] -=
                    lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * tensor.data[i]);
            }
        }
        params.clamp_invariants();
    }
}

// ---------------------------------------------------------------------------
// weight transfer (Eq.-style convex combination over every tensor)
// ---------------------------------------------------------------------------

/// Replace every tensor of `master` by λ·master + (1−λ)·assistant. λ = 1 is
/// a bitwise no-op and λ = 0 a bitwise copy. The assistant is untouched;
/// reversing the direction is just swapping the arguments.
pub fn weight_transfer(master: &mut BlockParams, assistant: &BlockParams, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Validation(format!("lambda {lambda} outside [0,1]")));
    }
    let donors = assistant.named_tensors();
    let mut receivers = master.named_tensors_mut();
    if donors.len() != receivers.len() {
        return Err(Error::Validation("blocks have different tensor sets".into()));
    }
    for ((rname, recv), (dname, donor)) in receivers.iter_mut().zip(&donors) {
        if rname != dname || recv.shape != donor.shape {
            return Err(Error::ShapeMismatch {
                op: "weight_transfer",
                lhs: recv.shape.clone(),
                rhs: donor.shape.clone(),
            });
        }
        if lambda == 1.0 {
            continue;
        }
        if lambda == 0.0 {
            recv.data.copy_from_slice(&donor.data);
            continue;
        }
        for (r, d) in recv.data.iter_mut().zip(&donor.data) {
            *r = lambda * *r + (1.0 - lambda) * d;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// training state and steps
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub kl: f64,
    pub arc_master: f64,
    pub arc_assistant: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

pub struct TrainState {
    pub config: TrainingConfig,
    pub master: BlockParams,
    pub assistant: BlockParams,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    opt_master: AdamW,
    opt_assistant: AdamW,
    rng: Rng,
}

impl TrainState {
    /// Fresh state: both blocks drawn independently from the same seeded
    /// stream, so θ_m ≠ θ_a from the start and the KL term is live.
    pub fn init(config: TrainingConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::from_seed(config.seed);
        let master = BlockParams::init(&config.backbone, num_classes, &mut rng)?;
        let assistant = BlockParams::init(&config.backbone, num_classes, &mut rng)?;
        Ok(TrainState {
            config,
            master,
            assistant,
            epoch: 0,
            history: Vec::new(),
            opt_master: AdamW::default(),
            opt_assistant: AdamW::default(),
            rng,
        })
    }

    pub fn set_pixel_stats(&mut self, stats: &PixelStats) {
        self.master.set_pixel_stats(stats);
        self.assistant.set_pixel_stats(stats);
    }

    /// One optimizer step over a batch. Crops are drawn per image from
    /// `crop_seed_base`, the summed loss of Alg.-style dual forwards is
    /// backpropagated once, then both blocks update. Never applies weight
    /// transfer; the epoch loop owns that.
    pub fn train_step(
        &mut self,
        batch: &[&LabeledImage],
        lr: f64,
        crop_seed_base: u64,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        if batch.len() > self.config.batch_size {
            return Err(Error::Validation(format!(
                "batch of {} exceeds configured size {}",
                batch.len(),
                self.config.batch_size
            )));
        }
        let n_classes = self.master.num_classes;
        let mut g = Graph::new();
        let master_vars = BlockVars::insert(&mut g, &self.master)?;
        let assistant_vars = BlockVars::insert(&mut g, &self.assistant)?;
        let master_head = ArcFaceHeadVars::from_block(&master_vars);
        let assistant_head = ArcFaceHeadVars::from_block(&assistant_vars);

        let mut breakdowns = Vec::with_capacity(batch.len());
        let mut batch_loss: Option<TensorId> = None;
        for (i, image) in batch.iter().enumerate() {
            if image.label >= n_classes {
                return Err(Error::Validation(format!(
                    "label {} out of range for {} classes (image {})",
                    image.label, n_classes, image.id
                )));
            }
            let crops = multi_crop(
                &image.image,
                &image.id,
                &self.config.crop,
                mix_seed(&[crop_seed_base, i as u64]),
            )?;
            let master_crops = self.config.master_crops.pick(&crops);
            let assistant_crops = self.config.assistant_crops.pick(&crops);
            let master_embeds: Vec<TensorId> = master_crops
                .iter()
                .map(|c| crate::backbone::embed(&mut g, &c.pixels, c.side, &master_vars))
                .collect::<Result<_>>()?;
            let assistant_embeds: Vec<TensorId> = assistant_crops
                .iter()
                .map(|c| crate::backbone::embed(&mut g, &c.pixels, c.side, &assistant_vars))
                .collect::<Result<_>>()?;

            let arc_m = arcface_loss(&mut g, &master_embeds, image.label, &master_head)?;
            let arc_a = arcface_loss(&mut g, &assistant_embeds, image.label, &assistant_head)?;
            let kl = match self.config.kl_direction {
                KlDirection::Down => {
                    Some(kl_pair_grid(&mut g, &master_embeds, &assistant_embeds, self.config.kl_temperature)?)
                }
                KlDirection::Up => {
                    Some(kl_pair_grid(&mut g, &assistant_embeds, &master_embeds, self.config.kl_temperature)?)
                }
                KlDirection::Off => None,
            };
            let kl_value = kl.map(|id| g.value(id)).unwrap_or(0.0);
            breakdowns.push(LossBreakdown::new(kl_value, g.value(arc_m), g.value(arc_a)));

            let mut image_loss = g.add(arc_m, arc_a)?;
            if let Some(kl) = kl {
                image_loss = g.add(image_loss, kl)?;
            }
            batch_loss = Some(match batch_loss {
                Some(acc) => g.add(acc, image_loss)?,
                None => image_loss,
            });
        }
        let batch_loss = batch_loss.unwrap();
        if !g.value(batch_loss).is_finite() {
            let culprit = g
                .first_non_finite()
                .map(|(_, desc)| desc)
                .unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite { detail: format!("training loss; first bad tensor: {culprit}") });
        }
        g.backward(batch_loss)?;

        let collect = |g: &Graph, vars: &BlockVars| -> BTreeMap<String, Vec<f64>> {
            vars.named()
                .into_iter()
                .filter_map(|(name, id)| g.grad(id).map(|grad| (name, grad.to_vec())))
                .collect()
        };
        let master_grads = collect(&g, &master_vars);
        let assistant_grads = collect(&g, &assistant_vars);
        self.opt_master.update(&mut self.master, &master_grads, &self.config.clone(), lr);
        self.opt_assistant.update(&mut self.assistant, &assistant_grads, &self.config.clone(), lr);
        crate::loss::total_loss(&breakdowns)
    }

    fn apply_weight_transfer(&mut self) -> Result<()> {
        match self.config.wt_direction {
            WtDirection::Up => weight_transfer(&mut self.master, &self.assistant, self.config.lambda),
            WtDirection::Down => weight_transfer(&mut self.assistant, &self.master, self.config.lambda),
            WtDirection::Off => Ok(()),
        }
    }

    fn assert_congruent(&self) -> Result<()> {
        let a = self.master.named_tensors();
        let b = self.assistant.named_tensors();
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.shape != tb.shape {
                return Err(Error::ShapeMismatch {
                    op: "epoch_congruence",
                    lhs: ta.shape.clone(),
                    rhs: tb.shape.clone(),
                });
            }
        }
        Ok(())
    }
}

fn infer_num_classes(images: &[LabeledImage]) -> Result<usize> {
    let max_label = images.iter().map(|i| i.label).max().unwrap_or(0);
    let distinct: std::collections::BTreeSet<usize> = images.iter().map(|i| i.label).collect();
    if distinct.len() < 2 {
        return Err(Error::Validation("training set needs at least 2 classes".into()));
    }
    Ok(max_label + 1)
}

/// Run the full training loop over a labeled image set. Deterministic in
/// the config seed: identical reruns produce bitwise-identical parameters.
pub fn train(config: &TrainingConfig, images: &[LabeledImage]) -> Result<TrainState> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let num_classes = infer_num_classes(images)?;
    let mut state = TrainState::init(config.clone(), num_classes)?;
    let stats = PixelStats::from_images(images.iter().map(|i| &i.image))?;
    state.set_pixel_stats(&stats);

    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = config.lr_at_epoch(epoch);
        state.rng.shuffle(&mut order);
        let mut epoch_breakdowns = Vec::new();
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| &images[i]).collect();
            let seed_base = mix_seed(&[config.seed, epoch as u64, step as u64]);
            let breakdown = state.train_step(&batch, lr, seed_base)?;
            epoch_breakdowns.push(breakdown);
            if config.cadence == TransferCadence::PerStep {
                state.apply_weight_transfer()?;
            }
        }
        if config.cadence == TransferCadence::PerEpoch {
            state.apply_weight_transfer()?;
        }
        state.assert_congruent()?;
        state.epoch = epoch + 1;
        let sums = crate::loss::total_loss(&epoch_breakdowns)?;
        state.history.push(EpochStats {
            epoch,
            kl: sums.kl,
            arc_master: sums.arc_master,
            arc_assistant: sums.arc_assistant,
            total: sums.total,
            lr,
            wall_ms: start.elapsed().as_millis(),
        });
        if let Some(dir) = &config.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            save_block(&dir.join(format!("master_e{epoch:03}.bnet")), &state.master)?;
            save_block(&dir.join(format!("assistant_e{epoch:03}.bnet")), &state.assistant)?;
        }
    }
    Ok(state)
}

/// One metrics line per epoch, tab-delimited:
/// epoch, kl, arc_master, arc_assistant, total, lr, wall_ms.
pub fn metrics_text(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch\tkl\tarc_master\tarc_assistant\ttotal\tlr\twall_ms\n");
    for s in history {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            s.epoch, s.kl, s.arc_master, s.arc_assistant, s.total, s.lr, s.wall_ms
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// ablation grids
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationCell {
    pub master_crops: CropSelect,
    pub assistant_crops: CropSelect,
    pub kl: KlDirection,
    pub wt: WtDirection,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub map: f64,
}

#[derive(Clone, Debug)]
pub enum GridSpec {
    /// λ sweep at the default mechanism settings.
    Lambda { from: f64, to: f64, step: f64 },
    /// The crop/KL/WT combination grid.
    Combinations,
}

/// Enumerate the cells of a grid. Combination cells follow the five
/// direction rows per crop pairing that keep at least one assistant-to-
/// master path.
pub fn grid_cells(grid: &GridSpec, base_lambda: f64) -> Result<Vec<AblationCell>> {
    match grid {
        GridSpec::Lambda { from, to, step } => {
            if *step <= 0.0 || from > to {
                return Err(Error::Validation(format!("bad lambda grid [{from}, {to}] step {step}")));
            }
            let count = ((to - from) / step).round() as usize + 1;
            Ok((0..count)
                .map(|i| AblationCell {
                    master_crops: CropSelect::GlobalLocal,
                    assistant_crops: CropSelect::Global,
                    kl: KlDirection::Down,
                    wt: WtDirection::Up,
                    lambda: from + i as f64 * step,
                })
                .collect())
        }
        GridSpec::Combinations => {
            let crop_pairs = [
                (CropSelect::GlobalLocal, CropSelect::Global),
                (CropSelect::GlobalLocal, CropSelect::Local),
                (CropSelect::Global, CropSelect::GlobalLocal),
                (CropSelect::Global, CropSelect::Local),
                (CropSelect::Local, CropSelect::GlobalLocal),
                (CropSelect::Local, CropSelect::Global),
            ];
            let directions = [
                (KlDirection::Off, WtDirection::Up),
                (KlDirection::Down, WtDirection::Up),
                (KlDirection::Up, WtDirection::Off),
                (KlDirection::Up, WtDirection::Down),
                (KlDirection::Up, WtDirection::Up),
            ];
            let mut cells = Vec::new();
            for (mc, ac) in crop_pairs {
                for (kl, wt) in directions {
                    cells.push(AblationCell {
                        master_crops: mc,
                        assistant_crops: ac,
                        kl,
                        wt,
                        lambda: base_lambda,
                    });
                }
            }
            Ok(cells)
        }
    }
}

/// Apply a cell's switches onto a base config.
pub fn cell_config(base: &TrainingConfig, cell: &AblationCell) -> Result<TrainingConfig> {
    if !cell_has_assistant_support(cell.kl, cell.wt) {
        return Err(Error::Validation(format!(
            "cell rejected: KL {} and WT {} leave no learning path from assistant to master",
            cell.kl, cell.wt
        )));
    }
    let mut cfg = base.clone();
    cfg.master_crops = cell.master_crops;
    cfg.assistant_crops = cell.assistant_crops;
    cfg.kl_direction = cell.kl;
    cfg.wt_direction = cell.wt;
    cfg.lambda = cell.lambda;
    Ok(cfg)
}

/// Run every cell of a grid to completion: one full train + evaluation per
/// cell, mAP recorded with the plain similarity function over the dataset's
/// database/query split.
pub fn ablate(
    grid: &GridSpec,
    base: &TrainingConfig,
    data: &crate::data::SynthDataset,
) -> Result<Vec<AblationRow>> {
    let cells = grid_cells(grid, base.lambda)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let cfg = cell_config(base, &cell)?;
        let state = train(&cfg, &data.train)?;
        let report = crate::pipeline::evaluate_on_dataset(
            &state.master,
            data,
            &crate::retrieval::EmbedOptions::new(cfg.crop.clone()),
            "none",
            &crate::postproc::DiffusionConfig::default(),
        )?;
        rows.push(AblationRow { cell, map: report.map });
    }
    Ok(rows)
}

/// Machine-readable ablation table (mirrors the combination-grid columns).
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("master_crops\tassistant_crops\tkl\twt\tlambda\tmap\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.4}\t{:.6}\n",
            r.cell.master_crops, r.cell.assistant_crops, r.cell.kl, r.cell.wt, r.cell.lambda, r.map
        ));
    }
    out
}
