//! Retrieval evaluation: descriptor databases, exhaustive top-N search,
//! Recall@N and AR@1% metrics, and the per-modality active-triplet
//! diagnostic that exposes a dominating modality.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use std::rc::Rc;

use crate::autodiff::{ParamSet, Tape};
use crate::branches::FusedModel;
use crate::dataset::Element;
use crate::error::{Error, Result};
use crate::metric::trainer::assemble_batch;
use crate::metric::{
    batch_hard_mine, default_similarity_masks, hinge_values, pairwise_distances,
    positive_clusters, LossConfig,
};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::sparse::{quantize, QuantizationConfig};

/// Ground-truth radius: a retrieved entry within this many meters of the
/// query's position counts as a correct match.
pub const EVAL_RADIUS_M: f64 = 25.0;

/// How many neighbors the ranking dump records per query.
pub const DUMP_TOP_N: usize = 25;

/// Which descriptor space retrieval runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Fused,
    Pc,
    Rgb,
}

impl Modality {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fused" => Some(Modality::Fused),
            "pc" => Some(Modality::Pc),
            "rgb" => Some(Modality::Rgb),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Fused => "fused",
            Modality::Pc => "pc",
            Modality::Rgb => "rgb",
        }
    }
}

/// One database or query row: a geo-tagged descriptor.
#[derive(Debug, Clone)]
pub struct DbEntry {
    pub id: String,
    pub position: [f64; 2],
    pub descriptor: Vec<f64>,
}

/// Immutable collection of geo-tagged descriptors with a uniform width.
#[derive(Debug, Clone)]
pub struct DescriptorDatabase {
    entries: Vec<DbEntry>,
    width: usize,
}

impl DescriptorDatabase {
    pub fn new(entries: Vec<DbEntry>) -> Result<Self> {
        let width = match entries.first() {
            Some(e) => e.descriptor.len(),
            None => return Err(Error::validation("descriptor database cannot be empty")),
        };
        for e in &entries {
            if e.descriptor.len() != width {
                return Err(Error::validation(format!(
                    "descriptor width mismatch: {} has {} values, expected {width}",
                    e.id,
                    e.descriptor.len()
                )));
            }
        }
        let mut ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("descriptor database ids must be unique"));
        }
        Ok(DescriptorDatabase { entries, width })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }
}

/// Forward every element through the model in eval mode (running
/// statistics, no augmentation, canonical images) and collect the chosen
/// modality's descriptors. Elements are processed in chunks across the
/// rayon pool with a private copy of the parameters per chunk, so the
/// result is independent of thread count.
pub fn build_database<F: Scalar>(
    model: &FusedModel,
    params: &ParamSet<F>,
    elements: &[Element],
    modality: Modality,
) -> Result<DescriptorDatabase> {
    if elements.is_empty() {
        return Err(Error::validation("cannot build a database from zero elements"));
    }
    let step = QuantizationConfig { step: model.cfg.quantization_step };
    let chunks: Vec<&[Element]> = elements.chunks(8).collect();
    let per_chunk: Vec<Result<Vec<DbEntry>>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut local = params.clone_values();
            let mut out = Vec::with_capacity(chunk.len());
            for el in *chunk {
                let tape: Tape<F> = Tape::new();
                let grid = Rc::new(quantize(&el.cloud_f64(), step)?);
                let image = el.image.to_tensor(&tape);
                let fwd =
                    model.forward_batch(&tape, &mut local, &[grid], &[image], Mode::Eval)?;
                let desc = match modality {
                    Modality::Fused => fwd.fused,
                    Modality::Pc => fwd.pc,
                    Modality::Rgb => fwd.rgb,
                };
                let values: Vec<f64> = desc.values().iter().map(|v| v.as_f64()).collect();
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite descriptor for element {}",
                        el.id
                    )));
                }
                out.push(DbEntry {
                    id: el.id.clone(),
                    position: el.position,
                    descriptor: values,
                });
            }
            Ok(out)
        })
        .collect();
    let mut entries = Vec::with_capacity(elements.len());
    for chunk in per_chunk {
        entries.extend(chunk?);
    }
    DescriptorDatabase::new(entries)
}

/// One retrieval hit: database entry index plus descriptor distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub distance: f64,
}

/// The `n` nearest database entries by Euclidean descriptor distance,
/// ascending, ties broken by id. Asking for more than the database holds
/// returns the full ranking.
pub fn query_top_n(
    db: &DescriptorDatabase,
    descriptor: &[f64],
    n: usize,
) -> Result<Vec<Ranked>> {
    if n == 0 {
        return Err(Error::validation("query_top_n needs n >= 1"));
    }
    if descriptor.len() != db.width {
        return Err(Error::validation(format!(
            "query width {} does not match database width {}",
            descriptor.len(),
            db.width
        )));
    }
    if descriptor.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("query descriptor contains a non-finite value"));
    }
    let mut ranked: Vec<Ranked> = db
        .entries
        .iter()
        .enumerate()
        .map(|(index, e)| {
            let d2: f64 = e
                .descriptor
                .iter()
                .zip(descriptor)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ranked { index, distance: d2.sqrt() }
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| db.entries[a.index].id.cmp(&db.entries[b.index].id))
    });
    ranked.truncate(n.min(db.entries.len()));
    Ok(ranked)
}

fn planar_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Fraction of queries whose top-`n` retrieved entries include at least one
/// within `radius_m` of the query's true position.
pub fn recall_at_n(
    db: &DescriptorDatabase,
    queries: &[DbEntry],
    n: usize,
    radius_m: f64,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::validation("recall needs at least one query"));
    }
    if !(radius_m > 0.0) {
        return Err(Error::validation("recall radius must be positive"));
    }
    let mut correct = 0usize;
    for q in queries {
        let hits = query_top_n(db, &q.descriptor, n)?;
        if hits
            .iter()
            .any(|h| planar_distance(db.entries[h.index].position, q.position) <= radius_m)
        {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

/// The `n` used by [`ar_at_1pct`] for a database of `size` entries.
pub fn one_percent_n(size: usize) -> usize {
    (size / 100).max(1)
}

/// Average recall at 1% of the database size: recall@n with
/// n = max(1, floor(size / 100)).
pub fn ar_at_1pct(db: &DescriptorDatabase, queries: &[DbEntry]) -> Result<f64> {
    recall_at_n(db, queries, one_percent_n(db.len()), EVAL_RADIUS_M)
}

/// Mean active-triplet counts per modality on training and validation
/// batches. A modality that dominates training shows few active triplets on
/// the data it overfits and many where its shortcut is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveTripletReport {
    pub train_batches: usize,
    pub val_batches: usize,
    pub pc_train: f64,
    pub rgb_train: f64,
    pub pc_val: f64,
    pub rgb_val: f64,
}

impl ActiveTripletReport {
    /// RGB − PC mean active count on training batches.
    pub fn train_delta(&self) -> f64 {
        self.rgb_train - self.pc_train
    }

    /// RGB − PC mean active count on validation batches.
    pub fn val_delta(&self) -> f64 {
        self.rgb_val - self.pc_val
    }

    /// Labeled block appended to evaluation reports.
    pub fn to_block(&self) -> String {
        format!(
            "# active-triplet diagnostic (mean per batch)\n\
             # batches\ttrain={}\tval={}\n\
             # head\ttrain\tval\n\
             # pc\t{:.6}\t{:.6}\n\
             # rgb\t{:.6}\t{:.6}\n\
             # delta_rgb_minus_pc\t{:.6}\t{:.6}\n",
            self.train_batches,
            self.val_batches,
            self.pc_train,
            self.pc_val,
            self.rgb_train,
            self.rgb_val,
            self.train_delta(),
            self.val_delta(),
        )
    }
}

/// Count active triplets in the unimodal descriptor spaces over batches
/// sampled from the train and validation sets. Forwards run in eval mode
/// and nothing is written back, so parameters are untouched.
pub fn modality_diagnostic<F: Scalar>(
    model: &FusedModel,
    params: &ParamSet<F>,
    train: &[Element],
    val: &[Element],
    loss_cfg: &LossConfig,
    batch_size: usize,
    seed: u64,
) -> Result<ActiveTripletReport> {
    loss_cfg.validate()?;
    if batch_size < 2 {
        return Err(Error::validation("diagnostic batch size must be at least 2"));
    }
    let (pc_train, rgb_train, train_batches) =
        diagnose_side(model, params, train, loss_cfg, batch_size, seed ^ 0x5452)?;
    let (pc_val, rgb_val, val_batches) =
        diagnose_side(model, params, val, loss_cfg, batch_size, seed ^ 0x564C)?;
    Ok(ActiveTripletReport {
        train_batches,
        val_batches,
        pc_train,
        rgb_train,
        pc_val,
        rgb_val,
    })
}

fn diagnose_side<F: Scalar>(
    model: &FusedModel,
    params: &ParamSet<F>,
    elements: &[Element],
    loss_cfg: &LossConfig,
    batch_size: usize,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    if elements.is_empty() {
        return Err(Error::validation("diagnostic needs a nonempty element set"));
    }
    let positions: Vec<[f64; 2]> = elements.iter().map(|e| e.position).collect();
    let masks = default_similarity_masks(&positions);
    if !masks.has_positive_pair() {
        return Err(Error::validation(
            "diagnostic element set has no positive pair; no triplet can be mined",
        ));
    }
    let clusters = positive_clusters(&masks);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues = clusters.clone();
    for q in &mut queues {
        q.shuffle(&mut rng);
    }

    let step = QuantizationConfig { step: model.cfg.quantization_step };
    let mut local = params.clone_values();
    let mut sums = [0.0f64; 2];
    let mut batches = 0usize;
    while queues.iter().any(|q| !q.is_empty()) {
        let batch = assemble_batch(&mut queues, batch_size, &masks, &clusters, 10, &mut rng)?;
        let tape: Tape<F> = Tape::new();
        let mut clouds = Vec::with_capacity(batch.len());
        let mut images = Vec::with_capacity(batch.len());
        for &i in &batch {
            clouds.push(Rc::new(quantize(&elements[i].cloud_f64(), step)?));
            images.push(elements[i].image.to_tensor(&tape));
        }
        let fwd = model.forward_batch(&tape, &mut local, &clouds, &images, Mode::Eval)?;

        let batch_positions: Vec<[f64; 2]> = batch.iter().map(|&i| elements[i].position).collect();
        let batch_masks = default_similarity_masks(&batch_positions);
        for (slot, desc) in [(0usize, &fwd.pc), (1usize, &fwd.rgb)] {
            let dist = pairwise_distances(desc)?;
            let triplets = batch_hard_mine(&dist, &batch_masks);
            let (_, active) = hinge_values(&dist, batch.len(), &triplets, loss_cfg.margin);
            sums[slot] += active as f64;
        }
        batches += 1;
    }
    let denom = batches.max(1) as f64;
    Ok((sums[0] / denom, sums[1] / denom, batches))
}

/// Retrieval metrics for one modality, ready to be formatted.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub modality: &'static str,
    pub db_size: usize,
    pub query_count: usize,
    /// `(n, recall@n)` rows in ascending `n`.
    pub recalls: Vec<(usize, f64)>,
    pub ar_n: usize,
    pub ar_1pct: f64,
}

impl EvalReport {
    /// Compute Recall@{1,5,10} and AR@1% for queries against a database.
    pub fn compute(
        db: &DescriptorDatabase,
        queries: &[DbEntry],
        modality: Modality,
    ) -> Result<Self> {
        let mut recalls = Vec::new();
        for n in [1usize, 5, 10] {
            recalls.push((n, recall_at_n(db, queries, n, EVAL_RADIUS_M)?));
        }
        Ok(EvalReport {
            modality: modality.name(),
            db_size: db.len(),
            query_count: queries.len(),
            recalls,
            ar_n: one_percent_n(db.len()),
            ar_1pct: ar_at_1pct(db, queries)?,
        })
    }

    /// Tab-separated report: `metric  n  value` rows, then the diagnostic
    /// block when one was produced.
    pub fn to_tsv(&self, diagnostic: Option<&ActiveTripletReport>) -> String {
        let mut out = format!(
            "# retrieval report: modality={} database={} queries={}\n\
             metric\tn\tvalue\n",
            self.modality, self.db_size, self.query_count
        );
        for (n, r) in &self.recalls {
            out.push_str(&format!("recall\t{n}\t{r:.6}\n"));
        }
        out.push_str(&format!("ar_1pct\t{}\t{:.6}\n", self.ar_n, self.ar_1pct));
        if let Some(d) = diagnostic {
            out.push_str(&d.to_block());
        }
        out
    }
}

/// Ranking dump for external cross-checking: one row per (query, rank)
/// pair covering the top [`DUMP_TOP_N`] neighbors.
pub fn ranking_dump(db: &DescriptorDatabase, queries: &[DbEntry]) -> Result<String> {
    let mut out = String::from("query_id\trank\tentry_id\tdistance\n");
    for q in queries {
        let hits = query_top_n(db, &q.descriptor, DUMP_TOP_N)?;
        for (rank, h) in hits.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.12}\n",
                q.id,
                rank + 1,
                db.entries[h.index].id,
                h.distance
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branches::ModelConfig;
    use crate::dataset::{generate_synthetic, traversal_split, GenerateConfig};

    fn entry(id: &str, position: [f64; 2], descriptor: &[f64]) -> DbEntry {
        DbEntry { id: id.into(), position, descriptor: descriptor.to_vec() }
    }

    fn grid_db(n: usize, width: usize) -> DescriptorDatabase {
        // Entry i sits at (100·i, 0) with descriptor (i, 0, 0, ...).
        let entries: Vec<DbEntry> = (0..n)
            .map(|i| {
                let mut d = vec![0.0; width];
                d[0] = i as f64;
                entry(&format!("e{i:03}"), [100.0 * i as f64, 0.0], &d)
            })
            .collect();
        DescriptorDatabase::new(entries).unwrap()
    }

    #[test]
    fn nearest_entry_ranks_first_with_zero_distance() {
        let db = grid_db(5, 4);
        let hits = query_top_n(&db, &[2.0, 0.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(db.entries()[hits[0].index].id, "e002");
        assert_eq!(hits[0].distance, 0.0);
        assert!(hits[1].distance <= hits[2].distance);
    }

    #[test]
    fn ties_break_by_id_and_full_ranking_is_a_permutation() {
        let entries = vec![
            entry("b", [0.0, 0.0], &[1.0]),
            entry("a", [10.0, 0.0], &[1.0]),
            entry("c", [20.0, 0.0], &[3.0]),
        ];
        let db = DescriptorDatabase::new(entries).unwrap();
        let hits = query_top_n(&db, &[1.0], 10).unwrap();
        let ids: Vec<&str> =
            hits.iter().map(|h| db.entries()[h.index].id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"], "equal distances order by id, n is clamped");
    }

    #[test]
    fn ranking_matches_an_exhaustive_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        use rand::Rng as _;
        let entries: Vec<DbEntry> = (0..50)
            .map(|i| {
                let d: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                entry(&format!("r{i:02}"), [i as f64, 0.0], &d)
            })
            .collect();
        let db = DescriptorDatabase::new(entries.clone()).unwrap();
        let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut oracle: Vec<(f64, String)> = entries
            .iter()
            .map(|e| {
                let d2: f64 =
                    e.descriptor.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2.sqrt(), e.id.clone())
            })
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

        let hits = query_top_n(&db, &q, 50).unwrap();
        for (h, (od, oid)) in hits.iter().zip(&oracle) {
            assert_eq!(&db.entries()[h.index].id, oid);
            assert_eq!(h.distance, *od);
        }
    }

    #[test]
    fn recall_counts_geographic_hits_in_the_top_n() {
        // Query descriptor is nearest to a far-away entry; the geographically
        // correct one is second.
        let entries = vec![
            entry("far", [1000.0, 0.0], &[0.0]),
            entry("near", [5.0, 0.0], &[1.0]),
        ];
        let db = DescriptorDatabase::new(entries).unwrap();
        let q = vec![entry("q", [0.0, 0.0], &[0.2])];
        assert_eq!(recall_at_n(&db, &q, 1, EVAL_RADIUS_M).unwrap(), 0.0);
        assert_eq!(recall_at_n(&db, &q, 2, EVAL_RADIUS_M).unwrap(), 1.0);
    }

    #[test]
    fn recall_is_monotone_in_n() {
        let db = grid_db(30, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        use rand::Rng as _;
        let queries: Vec<DbEntry> = (0..10)
            .map(|i| {
                let target = rng.gen_range(0..30usize);
                let d = vec![target as f64 + rng.gen_range(-2.0..2.0), 0.0, 0.0];
                entry(&format!("q{i}"), [100.0 * target as f64, 0.0], &d)
            })
            .collect();
        let mut last = 0.0;
        for n in 1..=30 {
            let r = recall_at_n(&db, &queries, n, EVAL_RADIUS_M).unwrap();
            assert!(r >= last, "recall fell from {last} to {r} at n={n}");
            last = r;
        }
        assert_eq!(last, recall_at_n(&db, &queries, 30, EVAL_RADIUS_M).unwrap());
    }

    #[test]
    fn one_percent_rule_follows_the_floor_with_a_clamp() {
        assert_eq!(one_percent_n(100), 1);
        assert_eq!(one_percent_n(250), 2);
        assert_eq!(one_percent_n(50), 1);
        assert_eq!(one_percent_n(1), 1);
    }

    #[test]
    fn metrics_ignore_database_insertion_order() {
        let db = grid_db(20, 2);
        let mut shuffled = db.entries().to_vec();
        shuffled.reverse();
        shuffled.swap(3, 11);
        let db2 = DescriptorDatabase::new(shuffled).unwrap();
        let queries: Vec<DbEntry> = (0..5)
            .map(|i| entry(&format!("q{i}"), [100.0 * i as f64, 0.0], &[i as f64, 0.0]))
            .collect();
        for n in [1, 3, 10] {
            assert_eq!(
                recall_at_n(&db, &queries, n, EVAL_RADIUS_M).unwrap(),
                recall_at_n(&db2, &queries, n, EVAL_RADIUS_M).unwrap()
            );
        }
        assert_eq!(ar_at_1pct(&db, &queries).unwrap(), ar_at_1pct(&db2, &queries).unwrap());
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(DescriptorDatabase::new(Vec::new()).is_err());
        let db = grid_db(3, 2);
        assert!(recall_at_n(&db, &[], 1, EVAL_RADIUS_M).is_err());
        assert!(query_top_n(&db, &[0.0, 0.0], 0).is_err());
        assert!(query_top_n(&db, &[0.0], 1).is_err(), "width mismatch");
    }

    fn small_world() -> (FusedModel, ParamSet<f64>, Vec<Element>, Vec<Element>) {
        let cfg = GenerateConfig {
            seed: 40,
            n_places: 4,
            traversals: 3,
            spacing_m: 60.0,
            points_per_cloud: 128,
            image_size: 32,
            image_variants: 0,
            spurious_rgb: false,
        };
        let elements = generate_synthetic(&cfg).unwrap().elements;
        let (train_idx, hold_idx) = traversal_split(&elements);
        let train: Vec<Element> = train_idx.iter().map(|&i| elements[i].clone()).collect();
        let hold: Vec<Element> = hold_idx.iter().map(|&i| elements[i].clone()).collect();
        let mut params: ParamSet<f64> = ParamSet::new();
        let model_cfg = ModelConfig {
            k: 8,
            pc_channels: [4, 4, 8, 8],
            image_channels: [4, 8, 8, 16],
            ..ModelConfig::default()
        };
        let model = FusedModel::new(&mut params, model_cfg, 31).unwrap();
        (model, params, train, hold)
    }

    #[test]
    fn database_width_tracks_the_fusion_mode() {
        let (model, params, train, _) = small_world();
        let db = build_database(&model, &params, &train, Modality::Fused).unwrap();
        assert_eq!(db.width(), 16, "concat fusion doubles k=8");
        assert_eq!(db.len(), train.len());
        let db_pc = build_database(&model, &params, &train[..1], Modality::Pc).unwrap();
        assert_eq!(db_pc.width(), 8);
        assert_eq!(db_pc.len(), 1);
    }

    #[test]
    fn identical_content_under_different_ids_gets_identical_descriptors() {
        let (model, params, train, _) = small_world();
        let mut twin = train[0].clone();
        twin.id = "copycat".into();
        let db =
            build_database(&model, &params, &[train[0].clone(), twin], Modality::Fused)
                .unwrap();
        assert_eq!(db.entries()[0].descriptor, db.entries()[1].descriptor);
    }

    #[test]
    fn database_is_identical_across_thread_counts() {
        let (model, params, train, _) = small_world();
        let a = build_database(&model, &params, &train, Modality::Fused).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool
            .install(|| build_database(&model, &params, &train, Modality::Fused))
            .unwrap();
        for (ea, eb) in a.entries().iter().zip(b.entries()) {
            assert_eq!(ea.id, eb.id);
            let (ba, bb): (Vec<u64>, Vec<u64>) = (
                ea.descriptor.iter().map(|v| v.to_bits()).collect(),
                eb.descriptor.iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn diagnostic_reports_all_batches_and_mutates_nothing() {
        let (model, params, train, _) = small_world();
        // Validation batches need their own positive pairs, so a held-out
        // single traversal will not do: use a separate two-traversal set.
        let val_cfg = GenerateConfig {
            seed: 41,
            n_places: 3,
            traversals: 2,
            spacing_m: 60.0,
            points_per_cloud: 128,
            image_size: 32,
            image_variants: 0,
            spurious_rgb: false,
        };
        let val = generate_synthetic(&val_cfg).unwrap().elements;
        let before: Vec<Vec<u64>> = params
            .iter()
            .map(|(_, p)| p.values.iter().map(|v| v.to_bits()).collect())
            .collect();
        let report = modality_diagnostic(
            &model,
            &params,
            &train,
            &val,
            &LossConfig::default(),
            4,
            5,
        )
        .unwrap();
        let after: Vec<Vec<u64>> = params
            .iter()
            .map(|(_, p)| p.values.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after, "diagnostic must not touch parameters");
        assert!(report.train_batches > 0 && report.val_batches > 0);
        assert!(report.pc_train >= 0.0 && report.rgb_val >= 0.0);
        assert_eq!(report.train_delta(), report.rgb_train - report.pc_train);
        // An untrained model shows no strong dominance either way: both
        // heads mine comparable counts per batch (within the batch size).
        assert!(report.train_delta().abs() <= 4.0);
    }

    #[test]
    fn a_pairless_val_set_is_rejected_by_the_diagnostic() {
        let (model, params, train, hold) = small_world();
        // `hold` is one traversal: one element per place, no positives.
        let err = modality_diagnostic(
            &model,
            &params,
            &train,
            &hold,
            &LossConfig::default(),
            4,
            5,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("no positive pair"));
    }

    #[test]
    fn report_and_dump_have_the_documented_shape() {
        let (model, params, train, hold) = small_world();
        let db = build_database(&model, &params, &train, Modality::Fused).unwrap();
        let queries = build_database(&model, &params, &hold, Modality::Fused).unwrap();
        let report = EvalReport::compute(&db, queries.entries(), Modality::Fused).unwrap();
        let text = report.to_tsv(None);
        assert!(text.contains("metric\tn\tvalue\n"));
        assert!(text.contains("recall\t1\t"));
        assert!(text.contains("recall\t5\t"));
        assert!(text.contains("recall\t10\t"));
        assert!(text.contains("ar_1pct\t1\t"));

        let dump = ranking_dump(&db, queries.entries()).unwrap();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines[0], "query_id\trank\tentry_id\tdistance");
        // 4 queries x top-min(25, 8) database entries.
        assert_eq!(lines.len() - 1, queries.len() * db.len().min(DUMP_TOP_N));
        for line in &lines[1..] {
            assert_eq!(line.split('\t').count(), 4);
        }
    }
}
