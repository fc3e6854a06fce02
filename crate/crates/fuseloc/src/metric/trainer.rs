//! The training loop: place-cluster batch sampling, per-head hard-triplet
//! mining, the weighted multi-head objective, Adam with a separate
//! image-branch learning rate, and active-triplet-driven batch growth.
//!
//! Given a fixed seed and a fixed precision the loop is bit-deterministic:
//! batch composition, augmentation draws, and optimizer state all derive
//! from one counter-based seed tree.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OptimizerConfig, ParamSet, Tape, Tensor};
use crate::branches::FusedModel;
use crate::dataset::generate::derive_seed;
use crate::dataset::{augment_cloud, augment_image, AugmentationConfig, Element};
use crate::error::{Error, Result};
use crate::metric::mining::{batch_hard_mine, pairwise_distances};
use crate::metric::similarity::{default_similarity_masks, positive_clusters, SimilarityMasks};
use crate::metric::{hinge_values, multi_head_loss, triplet_margin_loss, LossConfig};
use crate::nn::norm::Mode;
use crate::scalar::Scalar;
use crate::sparse::{quantize, QuantizationConfig};

use super::controller::BatchController;

const TAG_EPOCH: u64 = 0x45504F4348;

/// Everything the training loop needs besides the model and the data.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub controller: BatchController,
    pub augment: AugmentationConfig,
    pub quantization: QuantizationConfig,
    /// How many times a batch draw without a positive pair is reshuffled
    /// before a pair is padded in from elsewhere in the training set.
    pub batch_retries: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            controller: BatchController::default(),
            augment: AugmentationConfig::default(),
            quantization: QuantizationConfig::default(),
            batch_retries: 10,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.controller.validate()?;
        self.augment.validate()?;
        if self.batch_retries == 0 {
            return Err(Error::validation("batch_retries must be at least 1"));
        }
        Ok(())
    }
}

/// Per-epoch aggregates of the batch-level log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub batches: usize,
    /// Optimizer steps actually taken (batches with at least one mined
    /// triplet in a weighted head).
    pub steps: usize,
    pub mean_fused_loss: f64,
    pub mean_pc_loss: f64,
    pub mean_rgb_loss: f64,
    /// Nominal controller size after the epoch's last update.
    pub batch_size_end: usize,
}

/// The full training log plus per-epoch aggregates.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Tab-separated log: `#`-prefixed header lines echoing the
    /// configuration, then one line per batch with
    /// `epoch  batch_size  loss_fused  loss_pc  loss_rgb
    ///  active_fused  active_pc  active_rgb  lr`.
    pub log: String,
    pub epochs: Vec<EpochSummary>,
}

/// Train `model` over `elements` for the configured number of epochs.
///
/// Fails fast with a validation error if the training set contains no
/// positive pair at all (no batch could ever satisfy the sampler's
/// contract). A single-place set trains without error: every batch mines
/// zero triplets, so parameters are never stepped.
pub fn train<F: Scalar>(
    model: &FusedModel,
    params: &mut ParamSet<F>,
    elements: &[Element],
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    train_with(model, params, elements, opts, seed, |_, _| Ok(()))
}

/// [`train`] with a per-epoch callback (epoch number, parameters after the
/// epoch) for checkpointing.
pub fn train_with<F: Scalar>(
    model: &FusedModel,
    params: &mut ParamSet<F>,
    elements: &[Element],
    opts: &TrainOptions,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &ParamSet<F>) -> Result<()>,
) -> Result<TrainOutcome> {
    opts.validate()?;
    if elements.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let positions: Vec<[f64; 2]> = elements.iter().map(|e| e.position).collect();
    let masks = default_similarity_masks(&positions);
    let clusters = positive_clusters(&masks);
    if !masks.has_positive_pair() {
        return Err(Error::validation(
            "training set has no positive pair (no two elements within the positive radius); \
             every batch would violate the sampler's positive-pair contract",
        ));
    }

    let mut log = String::new();
    write_header::<F>(&mut log, opts, seed, elements.len());

    let mut adam = opts.optimizer.build(params);
    let mut ctrl = opts.controller.clone();
    let mut epochs = Vec::with_capacity(opts.optimizer.epochs);

    for epoch in 1..=opts.optimizer.epochs {
        let scale = opts.optimizer.lr_scale_for_epoch(epoch);
        adam.set_lr_scale(scale);
        let lr_now = opts.optimizer.lr_main * scale;

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_EPOCH, epoch as u64));
        // One image-variant draw per element per epoch.
        let draws: Vec<usize> =
            (0..elements.len()).map(|_| rng.gen::<u32>() as usize).collect();

        // Per-cluster queues, shuffled once per epoch; batches pop from the
        // back of each queue.
        let mut queues: Vec<Vec<usize>> = clusters.clone();
        for q in &mut queues {
            q.shuffle(&mut rng);
        }

        let mut batches = 0usize;
        let mut steps = 0usize;
        let mut sums = [0.0f64; 3];

        while queues.iter().any(|q| !q.is_empty()) {
            let batch = assemble_batch(
                &mut queues,
                ctrl.current_size,
                &masks,
                &clusters,
                opts.batch_retries,
                &mut rng,
            )?;

            let stats = run_batch(
                model, params, elements, &batch, &draws, opts, &mut rng,
            )?;

            if stats.stepped {
                adam.step(params);
                steps += 1;
            }
            ctrl.update(stats.active_fused);

            log.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{:.6}\n",
                epoch,
                batch.len(),
                stats.loss_fused,
                stats.loss_pc,
                stats.loss_rgb,
                stats.active_fused,
                stats.active_pc,
                stats.active_rgb,
                lr_now,
            ));
            sums[0] += stats.loss_fused;
            sums[1] += stats.loss_pc;
            sums[2] += stats.loss_rgb;
            batches += 1;
        }

        let denom = batches.max(1) as f64;
        epochs.push(EpochSummary {
            epoch,
            batches,
            steps,
            mean_fused_loss: sums[0] / denom,
            mean_pc_loss: sums[1] / denom,
            mean_rgb_loss: sums[2] / denom,
            batch_size_end: ctrl.current_size,
        });
        on_epoch(epoch, params)?;
    }

    Ok(TrainOutcome { log, epochs })
}

fn write_header<F: Scalar>(log: &mut String, opts: &TrainOptions, seed: u64, n: usize) {
    let l = &opts.loss;
    let o = &opts.optimizer;
    let c = &opts.controller;
    log.push_str(&format!(
        "# multimodal descriptor trainer\n\
         # margin={} alpha={} beta={}\n\
         # batch_start={} batch_cap={} growth={} active_threshold={}\n\
         # lr_main={} lr_image={} weight_decay={} epochs={} lr_drop_epoch={} lr_drop_factor={}\n\
         # seed={} precision={} elements={}\n\
         # epoch\tbatch_size\tloss_fused\tloss_pc\tloss_rgb\tactive_fused\tactive_pc\tactive_rgb\tlr\n",
        l.margin,
        l.alpha,
        l.beta,
        c.current_size,
        c.max_size,
        c.growth,
        c.active_threshold,
        o.lr_main,
        o.lr_image_branch,
        o.weight_decay,
        o.epochs,
        o.lr_drop_epoch,
        o.lr_drop_factor,
        seed,
        F::NAME,
        n,
    ));
}

/// Draw the next batch: visit nonempty clusters in a fresh random order and
/// pop up to two elements from each until the nominal size is reached. If
/// the draw holds no positive pair it is put back and reshuffled a bounded
/// number of times, after which a positive partner (or pair) is padded in
/// from the full set.
pub(crate) fn assemble_batch<R: Rng>(
    queues: &mut [Vec<usize>],
    target: usize,
    masks: &SimilarityMasks,
    clusters: &[Vec<usize>],
    retries: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    for _attempt in 0..retries {
        let mut order: Vec<usize> =
            (0..queues.len()).filter(|&c| !queues[c].is_empty()).collect();
        order.shuffle(rng);

        let mut batch = Vec::new();
        let mut taken: Vec<(usize, usize)> = Vec::new(); // (cluster, count)
        for &c in &order {
            if batch.len() >= target {
                break;
            }
            let take = queues[c].len().min(2);
            let at = queues[c].len() - take;
            batch.extend(queues[c][at..].iter().copied());
            taken.push((c, take));
            queues[c].truncate(at);
        }

        if masks.has_positive_pair_among(&batch) {
            return Ok(batch);
        }
        // Put the draw back for another shuffle.
        for &(c, take) in taken.iter().rev() {
            let at = batch.len() - take;
            queues[c].extend(batch[at..].iter().copied());
            batch.truncate(at);
        }
    }

    // Final draw plus a padded positive pair.
    let mut order: Vec<usize> = (0..queues.len()).filter(|&c| !queues[c].is_empty()).collect();
    order.shuffle(rng);
    let mut batch = Vec::new();
    for &c in &order {
        if batch.len() >= target {
            break;
        }
        let take = queues[c].len().min(2);
        let at = queues[c].len() - take;
        batch.extend(queues[c][at..].iter().copied());
        queues[c].truncate(at);
    }
    if masks.has_positive_pair_among(&batch) {
        return Ok(batch);
    }
    // A member of the batch may have a partner outside it.
    for bi in 0..batch.len() {
        let i = batch[bi];
        if let Some(j) = (0..masks.len()).find(|&j| masks.positive(i, j)) {
            batch.push(j);
            return Ok(batch);
        }
    }
    // Otherwise pull a whole pair from some multi-member cluster.
    for cluster in clusters {
        for (ai, &i) in cluster.iter().enumerate() {
            for &j in &cluster[ai + 1..] {
                if masks.positive(i, j) {
                    batch.push(i);
                    batch.push(j);
                    return Ok(batch);
                }
            }
        }
    }
    Err(Error::validation(
        "could not assemble a batch with a positive pair after bounded retries",
    ))
}

struct BatchStats {
    loss_fused: f64,
    loss_pc: f64,
    loss_rgb: f64,
    active_fused: usize,
    active_pc: usize,
    active_rgb: usize,
    stepped: bool,
}

fn run_batch<F: Scalar, R: Rng>(
    model: &FusedModel,
    params: &mut ParamSet<F>,
    elements: &[Element],
    batch: &[usize],
    draws: &[usize],
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<BatchStats> {
    let tape: Tape<F> = Tape::new();

    let mut clouds = Vec::with_capacity(batch.len());
    let mut images = Vec::with_capacity(batch.len());
    for &i in batch {
        let el = &elements[i];
        let pts = augment_cloud(&el.cloud, &opts.augment, rng);
        let pts64: Vec<[f64; 3]> =
            pts.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
        clouds.push(Rc::new(quantize(&pts64, opts.quantization)?));
        let img = augment_image(el.training_image(draws[i]), &opts.augment, rng);
        images.push(img.to_tensor(&tape));
    }

    let out = model.forward_batch(&tape, params, &clouds, &images, Mode::Train)?;
    // NaN descriptors would mine no triplets and masquerade as a zero
    // loss, so check them directly.
    for (label, desc) in [("fused", &out.fused), ("pc", &out.pc), ("rgb", &out.rgb)] {
        if desc.values().iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite {label} descriptor during training"
            )));
        }
    }

    let batch_positions: Vec<[f64; 2]> =
        batch.iter().map(|&i| elements[i].position).collect();
    let batch_masks = default_similarity_masks(&batch_positions);
    let n = batch.len();
    let margin = opts.loss.margin;

    let head = |desc: &Tensor<F>| -> Result<(Vec<f64>, Vec<super::mining::Triplet>)> {
        let dist = pairwise_distances(desc)?;
        let triplets = batch_hard_mine(&dist, &batch_masks);
        Ok((dist, triplets))
    };
    let (dist_f, trip_f) = head(&out.fused)?;
    let (dist_p, trip_p) = head(&out.pc)?;
    let (dist_r, trip_r) = head(&out.rgb)?;

    let (loss_fused, active_fused) = hinge_values(&dist_f, n, &trip_f, margin);
    let (loss_pc, active_pc) = hinge_values(&dist_p, n, &trip_p, margin);
    let (loss_rgb, active_rgb) = hinge_values(&dist_r, n, &trip_r, margin);

    let breakdown = multi_head_loss(
        (loss_fused, active_fused),
        (loss_pc, active_pc),
        (loss_rgb, active_rgb),
        &opts.loss,
    );
    for (label, v) in [
        ("fused", breakdown.fused),
        ("pc", breakdown.pc),
        ("rgb", breakdown.rgb),
        ("total", breakdown.total),
    ] {
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite {label} loss ({v}) during training"
            )));
        }
    }

    // Tape losses only for heads with nonzero weight, combined in the
    // documented left-to-right order; zero-weight heads contribute exactly
    // zero and must stay off the tape so their branches receive no gradient.
    let mut total: Option<Tensor<F>> = None;
    let add_term = |tape: &Tape<F>,
                        total: &mut Option<Tensor<F>>,
                        desc: &Tensor<F>,
                        trips: &[super::mining::Triplet],
                        w: f64|
     -> Result<()> {
        if w == 0.0 {
            return Ok(());
        }
        let (loss, _) = triplet_margin_loss(tape, desc, trips, margin)?;
        let term = tape.scale(&loss, F::from_f64(w));
        *total = Some(match total.take() {
            None => term,
            Some(t) => tape.add(&t, &term)?,
        });
        Ok(())
    };
    add_term(&tape, &mut total, &out.fused, &trip_f, opts.loss.fused_weight())?;
    add_term(&tape, &mut total, &out.pc, &trip_p, opts.loss.alpha)?;
    add_term(&tape, &mut total, &out.rgb, &trip_r, opts.loss.beta)?;

    let mut stepped = false;
    if let Some(total) = total {
        if total.is_tracked() {
            params.zero_grad();
            tape.backward(&total, params)?;
            stepped = true;
        }
    }

    Ok(BatchStats {
        loss_fused,
        loss_pc,
        loss_rgb,
        active_fused,
        active_pc,
        active_rgb,
        stepped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branches::ModelConfig;
    use crate::dataset::{generate_synthetic, GenerateConfig};

    fn tiny_options(epochs: usize) -> TrainOptions {
        let mut opts = TrainOptions::default();
        opts.optimizer.epochs = epochs;
        opts.optimizer.lr_drop_epoch = epochs;
        opts.optimizer.lr_drop_factor = 1.0; // keep the rate flat in short runs
        opts.augment = AugmentationConfig::disabled();
        opts
    }

    fn tiny_model<F: Scalar>(params: &mut ParamSet<F>) -> FusedModel {
        let cfg = ModelConfig {
            k: 8,
            pc_channels: [4, 4, 8, 8],
            image_channels: [4, 8, 8, 16],
            ..ModelConfig::default()
        };
        FusedModel::new(params, cfg, 7).unwrap()
    }

    fn tiny_dataset(seed: u64, places: usize) -> Vec<Element> {
        let cfg = GenerateConfig {
            seed,
            n_places: places,
            traversals: 2,
            spacing_m: 60.0,
            points_per_cloud: 160,
            image_size: 32,
            image_variants: 0,
            spurious_rgb: false,
        };
        generate_synthetic(&cfg).unwrap().elements
    }

    /// One place, several co-located elements: positives but no negatives.
    fn single_place_elements() -> Vec<Element> {
        let mut ds = tiny_dataset(3, 2);
        ds.truncate(2); // both traversals of place 0
        for el in &mut ds {
            el.position = [100000.0, 4000000.0];
        }
        ds
    }

    #[test]
    fn single_place_dataset_changes_no_trainable_parameter() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let model = tiny_model(&mut params);
        let before: Vec<(String, Vec<f64>)> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| (p.name.clone(), p.values.clone()))
            .collect();

        let elements = single_place_elements();
        let outcome = train(&model, &mut params, &elements, &tiny_options(2), 11).unwrap();

        assert!(outcome.epochs.iter().all(|e| e.steps == 0));
        for (_, p) in params.iter().filter(|(_, p)| p.trainable) {
            let (name, old) = before.iter().find(|(n, _)| *n == p.name).unwrap();
            assert_eq!(&p.values, old, "parameter {name} moved with zero triplets");
        }
    }

    #[test]
    fn pairless_dataset_is_rejected() {
        // Three isolated elements, every pair > 10 m apart.
        let mut elements = single_place_elements();
        elements[0].position = [0.0, 0.0];
        elements[1].position = [100.0, 0.0];
        let err = {
            let mut params: ParamSet<f64> = ParamSet::new();
            let model = tiny_model(&mut params);
            train(&model, &mut params, &elements, &tiny_options(1), 0).unwrap_err()
        };
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("positive pair"));
    }

    #[test]
    fn alpha_one_leaves_the_image_branch_untouched() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let model = tiny_model(&mut params);
        let img_before: Vec<(String, Vec<f64>)> = params
            .iter()
            .filter(|(_, p)| p.trainable && p.name.starts_with("img."))
            .map(|(_, p)| (p.name.clone(), p.values.clone()))
            .collect();
        let pc_before: Vec<Vec<f64>> = params
            .iter()
            .filter(|(_, p)| p.trainable && p.name.starts_with("pc."))
            .map(|(_, p)| p.values.clone())
            .collect();

        let mut opts = tiny_options(1);
        opts.loss = LossConfig { margin: 0.2, alpha: 1.0, beta: 0.0 };
        opts.optimizer.weight_decay = 0.0; // decay would move zero-gradient weights

        let elements = tiny_dataset(5, 4);
        let outcome = train(&model, &mut params, &elements, &opts, 13).unwrap();
        assert!(outcome.epochs[0].steps > 0, "expected real optimizer steps");

        for (_, p) in params.iter().filter(|(_, p)| p.trainable && p.name.starts_with("img.")) {
            let (name, old) = img_before.iter().find(|(n, _)| *n == p.name).unwrap();
            assert_eq!(&p.values, old, "image parameter {name} moved with alpha=1");
        }
        let pc_after: Vec<Vec<f64>> = params
            .iter()
            .filter(|(_, p)| p.trainable && p.name.starts_with("pc."))
            .map(|(_, p)| p.values.clone())
            .collect();
        assert_ne!(pc_before, pc_after, "point-cloud branch should have moved");
    }

    #[test]
    fn training_is_bit_deterministic_per_seed() {
        let elements = tiny_dataset(9, 4);
        let run = || {
            let mut params: ParamSet<f64> = ParamSet::new();
            let model = tiny_model(&mut params);
            let mut opts = tiny_options(2);
            opts.augment = AugmentationConfig::default();
            let outcome = train(&model, &mut params, &elements, &opts, 21).unwrap();
            let values: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.values.clone()).collect();
            (outcome.log, values)
        };
        let (log_a, vals_a) = run();
        let (log_b, vals_b) = run();
        assert_eq!(log_a, log_b, "training log must be byte-identical");
        for (a, b) in vals_a.iter().zip(&vals_b) {
            let (a_bits, b_bits): (Vec<u64>, Vec<u64>) = (
                a.iter().map(|v| v.to_bits()).collect(),
                b.iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(a_bits, b_bits, "parameters must match bit for bit");
        }
    }

    #[test]
    fn loss_falls_from_the_first_to_the_last_epoch() {
        for seed in [1u64, 2, 3] {
            let elements = tiny_dataset(seed, 4);
            let mut params: ParamSet<f64> = ParamSet::new();
            let model = tiny_model(&mut params);
            let mut opts = tiny_options(10);
            opts.optimizer.lr_main = 2e-3;
            let outcome = train(&model, &mut params, &elements, &opts, seed).unwrap();
            let first = outcome.epochs.first().unwrap().mean_fused_loss;
            let last = outcome.epochs.last().unwrap().mean_fused_loss;
            assert!(
                last < first,
                "seed {seed}: epoch {} loss {last} should be below epoch 1 loss {first}",
                outcome.epochs.len(),
            );
        }
    }

    #[test]
    fn log_lines_have_the_documented_shape() {
        let elements = tiny_dataset(17, 3);
        let mut params: ParamSet<f64> = ParamSet::new();
        let model = tiny_model(&mut params);
        let outcome = train(&model, &mut params, &elements, &tiny_options(1), 5).unwrap();

        let mut data_lines = 0;
        for line in outcome.log.lines() {
            if line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols.len(), 9, "expected 9 columns in {line:?}");
            assert_eq!(cols[0], "1");
            let size: usize = cols[1].parse().unwrap();
            assert!(size >= 2);
            for c in &cols[2..5] {
                let v: f64 = c.parse().unwrap();
                assert!(v >= 0.0);
            }
            for c in &cols[5..8] {
                let _: usize = c.parse().unwrap();
            }
            let lr: f64 = cols[8].parse().unwrap();
            assert!((lr - 1e-3).abs() < 1e-12);
            data_lines += 1;
        }
        assert!(data_lines > 0, "no batch lines were logged");
        assert!(outcome.log.starts_with("# multimodal descriptor trainer\n"));
        assert!(outcome.log.contains("# margin=0.2 alpha=0.5 beta=0\n"));
        assert!(outcome.log.contains("# batch_start=8 batch_cap=160"));
    }

    #[test]
    fn non_finite_parameters_abort_with_a_numeric_error() {
        let elements = tiny_dataset(23, 3);
        let mut params: ParamSet<f64> = ParamSet::new();
        let model = tiny_model(&mut params);
        // Poison the image branch's final bias: it feeds pooling with no
        // activation in between, so the descriptor itself turns NaN.
        let id = params.lookup("img.reduce.b").unwrap();
        params.get_mut(id).values[0] = f64::NAN;
        let err = train(&model, &mut params, &elements, &tiny_options(1), 0).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn epoch_callback_sees_every_epoch_in_order() {
        let elements = tiny_dataset(29, 3);
        let mut params: ParamSet<f64> = ParamSet::new();
        let model = tiny_model(&mut params);
        let mut seen = Vec::new();
        train_with(&model, &mut params, &elements, &tiny_options(3), 1, |e, p| {
            seen.push((e, p.len()));
            Ok(())
        })
        .unwrap();
        let n = params.len();
        assert_eq!(seen, vec![(1, n), (2, n), (3, n)]);
    }

    #[test]
    fn batches_always_contain_a_positive_pair() {
        // An awkward split: clusters of uneven size force singleton pops.
        let mut elements = tiny_dataset(31, 5);
        elements.remove(1); // place 0 keeps one traversal only
        let positions: Vec<[f64; 2]> = elements.iter().map(|e| e.position).collect();
        let masks = default_similarity_masks(&positions);
        let clusters = positive_clusters(&masks);
        let mut queues = clusters.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for q in &mut queues {
            q.shuffle(&mut rng);
        }
        while queues.iter().any(|q| !q.is_empty()) {
            let batch = assemble_batch(&mut queues, 4, &masks, &clusters, 10, &mut rng).unwrap();
            assert!(
                masks.has_positive_pair_among(&batch),
                "batch {batch:?} lacks a positive pair"
            );
        }
    }

    #[test]
    fn invalid_options_are_rejected() {
        let mut opts = TrainOptions::default();
        opts.batch_retries = 0;
        assert!(opts.validate().is_err());
        let mut opts = TrainOptions::default();
        opts.loss.margin = 0.0;
        assert!(opts.validate().is_err());
    }
}
