//! Staged training: the grounder first, then the refiner on the frozen
//! grounder's selections. Also the independent regression experiment over
//! every proposal that overlaps its ground truth, and the (λ, weight decay)
//! grid search.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{merge_singleton_tail, shuffled_batches};
use crate::diffcore::{BatchNormMode, MilestoneSchedule, OptimState, ParamStore, Tape, Tensor};
use crate::evalkit::{Prediction, Refinement};
use crate::geometry::{
    best_target_proposal, clip_box, decode_offset, encode_offset, iou_unchecked, BBox, BoxOffset,
    ThresholdMode,
};
use crate::grounder::{
    argmax, proposal_matrix, Grounder, GrounderDims, GroundingItem, ENCODER_PREFIX,
};
use crate::optibox::{FeatureMask, RefineItem, Refiner, RefinerDims};
use crate::synthdata::{split_annotations, SampleRecord, Split};
use crate::textenc::{
    apply_updates, Autoencoder, Projections, QueryEncoder, QUERY_BRANCH, VISUAL_BRANCH,
};
use crate::{Error, Result};

/// IoU a proposal needs to serve as the classification target.
pub const TARGET_IOU: f64 = 0.5;

/// Items per inference batch; results do not depend on it.
const EVAL_CHUNK: usize = 256;

/// Best-validation selections, per annotation fraction, as
/// `(p, weight decay, λ)`.
pub const TABLE2: [(f64, f64, f64); 3] = [
    (0.0312, 0.01, 10.0),
    (0.5, 0.0005, 100.0),
    (1.0, 0.01, 100.0),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Autoencoder,
    Projections,
    Grounder,
    Optibox,
    OptiboxIndependent,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Autoencoder => "autoencoder",
            Stage::Projections => "projections",
            Stage::Grounder => "grounder",
            Stage::Optibox => "optibox",
            Stage::OptiboxIndependent => "optibox_independent",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "autoencoder" => Stage::Autoencoder,
            "projections" => Stage::Projections,
            "grounder" => Stage::Grounder,
            "optibox" => Stage::Optibox,
            "optibox_independent" => Stage::OptiboxIndependent,
            _ => return Err(Error::Config(format!("unknown stage {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Weight of the classification loss.
    pub lambda: f64,
    pub weight_decay: f64,
    pub lr: f64,
    /// 1-based epochs at whose start the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Annotation fraction: share of the labeled training images whose
    /// boxes are used.
    pub p: f64,
    pub seed: u64,
    /// Include the semantic reconstruction term; off gives the
    /// classification-only baseline.
    pub semantic: bool,
    /// Minimum source/ground-truth IoU for independent regression pairs.
    pub pair_threshold: f64,
    pub pair_mode: ThresholdMode,
}

impl TrainConfig {
    /// Adam lr 1e-3, batch 128, 25 epochs, ×0.1 at epochs 15 and 25, with
    /// the full-supervision grid-search selection.
    pub fn paper_grounder() -> Self {
        TrainConfig {
            stage: Stage::Grounder,
            lambda: 100.0,
            weight_decay: 0.01,
            lr: 1e-3,
            milestones: vec![15, 25],
            decay: 0.1,
            batch: 128,
            epochs: 25,
            p: 1.0,
            seed: 0,
            semantic: true,
            pair_threshold: 0.3,
            pair_mode: ThresholdMode::Inclusive,
        }
    }

    /// lr 1e-4, batch 128. No reference epoch budget exists; 25 matches
    /// the grounder.
    pub fn paper_optibox() -> Self {
        TrainConfig {
            stage: Stage::Optibox,
            lambda: 0.0,
            weight_decay: 0.0,
            lr: 1e-4,
            milestones: Vec::new(),
            epochs: 25,
            ..TrainConfig::paper_grounder()
        }
    }

    /// 40 epochs, lr 1e-3, batch 32, ×0.1 at epochs 3, 10, 20 and 30.
    pub fn paper_optibox_independent() -> Self {
        TrainConfig {
            stage: Stage::OptiboxIndependent,
            lambda: 0.0,
            weight_decay: 0.0,
            lr: 1e-3,
            milestones: vec![3, 10, 20, 30],
            batch: 32,
            epochs: 40,
            ..TrainConfig::paper_grounder()
        }
    }

    pub fn desk_grounder() -> Self {
        TrainConfig {
            lr: 3e-3,
            weight_decay: 1e-4,
            milestones: vec![12, 18],
            batch: 32,
            epochs: 20,
            ..TrainConfig::paper_grounder()
        }
    }

    pub fn desk_optibox() -> Self {
        TrainConfig {
            lr: 2e-3,
            milestones: vec![20, 27],
            batch: 32,
            epochs: 30,
            ..TrainConfig::paper_optibox()
        }
    }

    pub fn desk_optibox_independent() -> Self {
        TrainConfig {
            lr: 2e-3,
            milestones: vec![20, 27],
            batch: 32,
            epochs: 30,
            ..TrainConfig::paper_optibox_independent()
        }
    }

    /// Applies the reference grid-search selection for annotation fraction `p`.
    pub fn with_table2(mut self, p: f64) -> Result<Self> {
        let (_, wd, lambda) = TABLE2
            .iter()
            .find(|(q, _, _)| (q - p).abs() < 1e-12)
            .ok_or_else(|| Error::Config(format!("no reference selection for p = {p}")))?;
        self.p = p;
        self.weight_decay = *wd;
        self.lambda = *lambda;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p {} outside [0, 1]", self.p));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return bad(format!("decay {} must be positive", self.decay));
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.pair_threshold) {
            return bad(format!(
                "pair_threshold {} outside [0, 1]",
                self.pair_threshold
            ));
        }
        MilestoneSchedule::new(self.milestones.clone(), self.decay).map(|_| ())
    }

    fn optimizer(&self, store: &ParamStore) -> Result<OptimState> {
        Ok(OptimState::new(
            store,
            self.lr,
            self.weight_decay,
            MilestoneSchedule::new(self.milestones.clone(), self.decay)?,
        ))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    /// Validation accuracy in percent.
    pub val_acc: Vec<f64>,
    pub lr: Vec<f64>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_acc,lr\n");
        for (i, ((l, a), r)) in self
            .losses
            .iter()
            .zip(&self.val_acc)
            .zip(&self.lr)
            .enumerate()
        {
            s.push_str(&format!("{},{l},{a},{r}\n", i + 1));
        }
        s
    }

    /// First epoch with the highest validation accuracy.
    pub fn argmax_val(&self) -> Option<usize> {
        argmax(&self.val_acc).map(|i| i + 1)
    }
}

/// Query features per token sequence; valid while the encoder is frozen.
#[derive(Default)]
struct QueryCache(HashMap<Vec<usize>, Vec<f64>>);

impl QueryCache {
    fn fill(
        &mut self,
        encoder: &QueryEncoder,
        store: &ParamStore,
        records: &[SampleRecord],
        refs: &[(usize, usize)],
    ) -> Result<()> {
        for &(r, q) in refs {
            let tokens = &records[r].queries[q].tokens;
            if !self.0.contains_key(tokens) {
                self.0
                    .insert(tokens.clone(), encoder.encode_values(store, tokens)?);
            }
        }
        Ok(())
    }

    fn get(&self, tokens: &[usize]) -> &[f64] {
        &self.0[tokens]
    }
}

/// `(record, query)` index pairs of a split, in file order.
pub fn query_refs(records: &[SampleRecord], split: Split) -> Vec<(usize, usize)> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split)
        .flat_map(|(i, r)| (0..r.queries.len()).map(move |q| (i, q)))
        .collect()
}

/// Labeled flags of the training images after drawing fraction `p` among
/// the images already flagged labeled.
fn annotation_mask(records: &[SampleRecord], p: f64, seed: u64) -> Result<Vec<bool>> {
    let mut train: Vec<SampleRecord> = records
        .iter()
        .filter(|r| r.split == Split::Train && r.labeled)
        .map(|r| SampleRecord {
            proposals: Vec::new(),
            queries: Vec::new(),
            global_map: None,
            ..r.clone()
        })
        .collect();
    split_annotations(&mut train, p, seed)?;
    let mut drawn = train.into_iter().map(|r| r.labeled);
    Ok(records
        .iter()
        .map(|r| {
            r.split == Split::Train
                && r.labeled
                && drawn.next().expect("one draw per labeled record")
        })
        .collect())
}

struct GroundingSet {
    features: Vec<Option<Tensor>>,
    cache: QueryCache,
}

impl GroundingSet {
    fn new(model: &Grounder, records: &[SampleRecord], refs: &[(usize, usize)]) -> Result<Self> {
        let mut features = vec![None; records.len()];
        for &(r, _) in refs {
            if features[r].is_none() {
                features[r] = Some(proposal_matrix(&records[r])?);
            }
        }
        let mut cache = QueryCache::default();
        cache.fill(&model.encoder, &model.store, records, refs)?;
        Ok(GroundingSet { features, cache })
    }

    fn item<'a>(
        &'a self,
        records: &'a [SampleRecord],
        (r, q): (usize, usize),
        target: Option<usize>,
    ) -> GroundingItem<'a> {
        GroundingItem {
            features: self.features[r].as_ref().expect("features cached"),
            query: self.cache.get(&records[r].queries[q].tokens),
            target,
        }
    }
}

/// Grounder selection for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub record: usize,
    pub query: usize,
    pub proposal: usize,
    pub scores: Vec<f64>,
}

fn select_with(
    model: &Grounder,
    set: &GroundingSet,
    records: &[SampleRecord],
    refs: &[(usize, usize)],
) -> Result<Vec<Selection>> {
    let mut out = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(EVAL_CHUNK) {
        let items: Vec<GroundingItem> = chunk
            .iter()
            .map(|&rq| set.item(records, rq, None))
            .collect();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let fwd = model.forward_batch(&mut tape, &b, &items, BatchNormMode::Eval)?;
        for (&(record, query), s) in chunk.iter().zip(&fwd.scores) {
            let scores = tape.value(*s).data().to_vec();
            if !scores.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite scores for {}",
                    records[record].queries[query].id
                )));
            }
            let proposal = argmax(&scores).ok_or_else(|| Error::Empty("no proposals".into()))?;
            out.push(Selection {
                record,
                query,
                proposal,
                scores,
            });
        }
    }
    Ok(out)
}

/// Selected proposal for every query of `split`.
pub fn select_proposals(
    model: &Grounder,
    records: &[SampleRecord],
    split: Split,
) -> Result<Vec<Selection>> {
    let refs = query_refs(records, split);
    if refs.is_empty() {
        return Ok(Vec::new());
    }
    let set = GroundingSet::new(model, records, &refs)?;
    select_with(model, &set, records, &refs)
}

fn selection_accuracy(records: &[SampleRecord], sel: &[Selection]) -> f64 {
    if sel.is_empty() {
        return 0.0;
    }
    let hits = sel
        .iter()
        .filter(|s| {
            let r = &records[s.record];
            iou_unchecked(&r.proposals[s.proposal].bbox, &r.queries[s.query].gt) >= TARGET_IOU
        })
        .count();
    100.0 * hits as f64 / sel.len() as f64
}

/// Trains the grounder's non-encoder parameters and returns the
/// best-validation checkpoint, flagged as converged.
pub fn train_grounder(
    model: Grounder,
    records: &[SampleRecord],
    cfg: &TrainConfig,
) -> Result<(Grounder, TrainHistory)> {
    cfg.validate()?;
    let labeled = annotation_mask(records, cfg.p, cfg.seed)?;
    let train_refs = query_refs(records, Split::Train);
    let val_refs = query_refs(records, Split::Val);
    if val_refs.is_empty() {
        return Err(Error::Empty("validation split".into()));
    }
    let mut samples: Vec<((usize, usize), Option<usize>)> = Vec::with_capacity(train_refs.len());
    for &(r, q) in &train_refs {
        let target = if labeled[r] {
            best_target_proposal(
                &records[r].proposal_boxes(),
                &records[r].queries[q].gt,
                TARGET_IOU,
                ThresholdMode::Inclusive,
            )
        } else {
            None
        };
        // without the semantic term an untargeted sample carries no loss
        if cfg.semantic || target.is_some() {
            samples.push(((r, q), target));
        }
    }
    let targets = samples.iter().filter(|(_, t)| t.is_some()).count();
    if !cfg.semantic && (targets == 0 || cfg.lambda == 0.0) {
        return Err(Error::InvalidArgument(
            "classification-only training needs labeled samples and lambda > 0".into(),
        ));
    }
    if samples.len() < 2 {
        return Err(Error::Empty(
            "grounder training needs at least 2 samples".into(),
        ));
    }

    let all_refs: Vec<(usize, usize)> = train_refs.iter().chain(&val_refs).copied().collect();
    let set = GroundingSet::new(&model, records, &all_refs)?;
    let mut model = model;
    let mut opt = cfg.optimizer(&model.store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        opt.set_epoch(epoch);
        let mut total = 0.0;
        for batch in merge_singleton_tail(shuffled_batches(samples.len(), cfg.batch, &mut rng)) {
            let items: Vec<GroundingItem> = batch
                .iter()
                .map(|&i| set.item(records, samples[i].0, samples[i].1))
                .collect();
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, true);
            let (loss, fwd) = model.batch_loss(
                &mut tape,
                &b,
                &items,
                cfg.lambda,
                cfg.semantic,
                BatchNormMode::Train,
            )?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "grounder loss {lv} at epoch {epoch}"
                )));
            }
            total += lv * items.len() as f64;
            tape.backward(loss)?;
            let grads = model.store.gradients(&tape, &b);
            opt.step(&mut model.store, &grads)?;
            apply_updates(&mut model.store, fwd.updates)?;
        }
        let acc = selection_accuracy(records, &select_with(&model, &set, records, &val_refs)?);
        history.losses.push(total / samples.len() as f64);
        history.val_acc.push(acc);
        history.lr.push(opt.lr);
        if best.as_ref().is_none_or(|(a, _)| acc > *a) {
            best = Some((acc, model.store.clone()));
            history.best_epoch = epoch;
        }
    }
    let (_, mut store) = best.expect("at least one epoch");
    store
        .meta
        .insert("stage".into(), Stage::Grounder.to_string());
    store.meta.insert("converged".into(), "true".into());
    store
        .meta
        .insert("best_epoch".into(), history.best_epoch.to_string());
    Ok((Grounder::from_store(store)?, history))
}

/// Source box and target for one regression sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionPair {
    pub record: usize,
    pub query: usize,
    pub proposal: usize,
}

impl RegressionPair {
    pub fn source<'a>(&self, records: &'a [SampleRecord]) -> &'a BBox {
        &records[self.record].proposals[self.proposal].bbox
    }

    pub fn gt<'a>(&self, records: &'a [SampleRecord]) -> &'a BBox {
        &records[self.record].queries[self.query].gt
    }

    pub fn iou_before(&self, records: &[SampleRecord]) -> f64 {
        iou_unchecked(self.source(records), self.gt(records))
    }

    pub fn target(&self, records: &[SampleRecord]) -> Result<BoxOffset> {
        encode_offset(self.source(records), self.gt(records))
    }
}

/// Every (proposal, query) pair of `split` whose IoU passes the threshold.
pub fn independent_pairs(
    records: &[SampleRecord],
    split: Split,
    threshold: f64,
    mode: ThresholdMode,
) -> Vec<RegressionPair> {
    let mut out = Vec::new();
    for (r, rec) in records.iter().enumerate().filter(|(_, r)| r.split == split) {
        for (q, query) in rec.queries.iter().enumerate() {
            for (p, prop) in rec.proposals.iter().enumerate() {
                if mode.passes(iou_unchecked(&prop.bbox, &query.gt), threshold) {
                    out.push(RegressionPair {
                        record: r,
                        query: q,
                        proposal: p,
                    });
                }
            }
        }
    }
    out
}

fn refine_item<'a>(
    records: &'a [SampleRecord],
    cache: &'a QueryCache,
    pair: &RegressionPair,
) -> Result<RefineItem<'a>> {
    let rec = &records[pair.record];
    let map = rec
        .global_map
        .as_ref()
        .ok_or_else(|| Error::MissingAsset(format!("global feature map for {}", rec.image_id)))?;
    Ok(RefineItem {
        feature: &rec.proposals[pair.proposal].feature,
        bbox: rec.proposals[pair.proposal].bbox,
        width: rec.width,
        height: rec.height,
        query: cache.get(&rec.queries[pair.query].tokens),
        map,
    })
}

fn refiner_cache(
    model: &Refiner,
    records: &[SampleRecord],
    pairs: &[RegressionPair],
) -> Result<QueryCache> {
    let refs: Vec<(usize, usize)> = pairs.iter().map(|p| (p.record, p.query)).collect();
    let mut cache = QueryCache::default();
    cache.fill(&model.encoder, &model.store, records, &refs)?;
    Ok(cache)
}

fn refine_with(
    model: &Refiner,
    cache: &QueryCache,
    records: &[SampleRecord],
    pairs: &[RegressionPair],
    iterations: usize,
) -> Result<Vec<BBox>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let items = chunk
            .iter()
            .map(|p| refine_item(records, cache, p))
            .collect::<Result<Vec<_>>>()?;
        if iterations <= 1 {
            out.extend(model.refine_boxes(&items)?);
        } else {
            for it in &items {
                out.push(model.refine_box(it, iterations)?);
            }
        }
    }
    Ok(out)
}

/// Refined boxes for `pairs` (one refinement pass per box when
/// `iterations` is 1).
pub fn refine_pairs(
    model: &Refiner,
    records: &[SampleRecord],
    pairs: &[RegressionPair],
    iterations: usize,
) -> Result<Vec<BBox>> {
    let cache = refiner_cache(model, records, pairs)?;
    refine_with(model, &cache, records, pairs, iterations)
}

fn fit_refiner(
    mut model: Refiner,
    records: &[SampleRecord],
    train: &[RegressionPair],
    val: &[RegressionPair],
    cfg: &TrainConfig,
) -> Result<(Refiner, TrainHistory)> {
    if train.is_empty() {
        return Err(Error::Empty("no qualifying regression pairs".into()));
    }
    if val.is_empty() {
        return Err(Error::Empty("no validation regression pairs".into()));
    }
    let all: Vec<RegressionPair> = train.iter().chain(val).copied().collect();
    let cache = refiner_cache(&model, records, &all)?;
    let targets = train
        .iter()
        .map(|p| p.target(records))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = cfg.optimizer(&model.store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        opt.set_epoch(epoch);
        let mut total = 0.0;
        for batch in shuffled_batches(train.len(), cfg.batch, &mut rng) {
            let items = batch
                .iter()
                .map(|&i| refine_item(records, &cache, &train[i]))
                .collect::<Result<Vec<_>>>()?;
            let t: Vec<BoxOffset> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, true);
            let loss = model.batch_loss(&mut tape, &b, &items, &t)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "refiner loss {lv} at epoch {epoch}"
                )));
            }
            total += lv * items.len() as f64;
            tape.backward(loss)?;
            let grads = model.store.gradients(&tape, &b);
            opt.step(&mut model.store, &grads)?;
        }
        let refined = refine_with(&model, &cache, records, val, 1)?;
        let hits = val
            .iter()
            .zip(&refined)
            .filter(|(p, b)| iou_unchecked(b, p.gt(records)) >= TARGET_IOU)
            .count();
        let acc = 100.0 * hits as f64 / val.len() as f64;
        history.losses.push(total / train.len() as f64);
        history.val_acc.push(acc);
        history.lr.push(opt.lr);
        if best.as_ref().is_none_or(|(a, _)| acc > *a) {
            best = Some((acc, model.store.clone()));
            history.best_epoch = epoch;
        }
    }
    let (_, mut store) = best.expect("at least one epoch");
    store.meta.insert("stage".into(), cfg.stage.to_string());
    store.meta.insert("mask".into(), model.mask.label());
    store
        .meta
        .insert("best_epoch".into(), history.best_epoch.to_string());
    Ok((Refiner::from_store(store)?, history))
}

fn require_converged(grounder: &Grounder) -> Result<()> {
    match grounder.store.meta.get("converged").map(String::as_str) {
        Some("true") => Ok(()),
        _ => Err(Error::StageOrder(
            "refiner training needs a converged grounder checkpoint".into(),
        )),
    }
}

/// Pairs of the grounder's selected proposal and the ground truth for
/// every query of `split` on labeled images.
pub fn selected_pairs(
    grounder: &Grounder,
    records: &[SampleRecord],
    split: Split,
) -> Result<Vec<RegressionPair>> {
    Ok(select_proposals(grounder, records, split)?
        .into_iter()
        .filter(|s| records[s.record].labeled)
        .map(|s| RegressionPair {
            record: s.record,
            query: s.query,
            proposal: s.proposal,
        })
        .collect())
}

/// Trains the refiner on boxes selected by a converged, frozen grounder.
pub fn train_optibox(
    grounder: &Grounder,
    model: Refiner,
    records: &[SampleRecord],
    cfg: &TrainConfig,
) -> Result<(Refiner, TrainHistory)> {
    cfg.validate()?;
    require_converged(grounder)?;
    let train = selected_pairs(grounder, records, Split::Train)?;
    let val = selected_pairs(grounder, records, Split::Val)?;
    fit_refiner(model, records, &train, &val, cfg)
}

/// Trains the refiner on every proposal passing the pair threshold.
pub fn train_optibox_independent(
    model: Refiner,
    records: &[SampleRecord],
    cfg: &TrainConfig,
) -> Result<(Refiner, TrainHistory)> {
    cfg.validate()?;
    let train: Vec<RegressionPair> =
        independent_pairs(records, Split::Train, cfg.pair_threshold, cfg.pair_mode)
            .into_iter()
            .filter(|p| records[p.record].labeled)
            .collect();
    let val = independent_pairs(records, Split::Val, cfg.pair_threshold, cfg.pair_mode);
    fit_refiner(model, records, &train, &val, cfg)
}

/// Selections of `split` as prediction records, refined when a refiner is
/// given.
pub fn predict(
    grounder: &Grounder,
    refiner: Option<(&Refiner, usize)>,
    records: &[SampleRecord],
    split: Split,
) -> Result<Vec<Prediction>> {
    let sel = select_proposals(grounder, records, split)?;
    let pairs: Vec<RegressionPair> = sel
        .iter()
        .map(|s| RegressionPair {
            record: s.record,
            query: s.query,
            proposal: s.proposal,
        })
        .collect();
    let refined = match refiner {
        Some((m, iterations)) => Some(refine_pairs(m, records, &pairs, iterations)?),
        None => None,
    };
    Ok(sel
        .into_iter()
        .enumerate()
        .map(|(i, s)| Prediction {
            query_id: records[s.record].queries[s.query].id.clone(),
            selected: records[s.record].proposals[s.proposal].bbox.to_array(),
            refined: refined.as_ref().map(|r| r[i].to_array()),
            scores: s.scores,
        })
        .collect())
}

/// Before/after records for refining `pairs`.
pub fn refinements(
    model: &Refiner,
    records: &[SampleRecord],
    pairs: &[RegressionPair],
    iterations: usize,
) -> Result<Vec<Refinement>> {
    let after = refine_pairs(model, records, pairs, iterations)?;
    Ok(pairs
        .iter()
        .zip(after)
        .map(|(p, a)| Refinement {
            query_id: records[p.record].queries[p.query].id.clone(),
            before: p.source(records).to_array(),
            after: a.to_array(),
            iou_before: p.iou_before(records),
            iou_after: iou_unchecked(&a, p.gt(records)),
        })
        .collect())
}

/// Applies one predicted offset to a box and clips it to the image.
pub fn apply_offset(source: &BBox, t: &BoxOffset, record: &SampleRecord) -> Result<BBox> {
    clip_box(&decode_offset(source, t)?, &record.bounds()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda: f64,
    pub weight_decay: f64,
    /// Best validation accuracy of the cell, percent.
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: GridCell,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,weight_decay,val_acc\n");
        for c in &self.cells {
            s.push_str(&format!("{},{},{}\n", c.lambda, c.weight_decay, c.val_acc));
        }
        s
    }
}

/// Scores every (λ, weight decay) cell with `score` and keeps the highest;
/// ties go to the smaller weight decay, then the smaller λ.
pub fn grid_search<F>(lambdas: &[f64], weight_decays: &[f64], mut score: F) -> Result<GridResult>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    if lambdas.is_empty() || weight_decays.is_empty() {
        return Err(Error::Empty("grid".into()));
    }
    let mut cells = Vec::with_capacity(lambdas.len() * weight_decays.len());
    for &wd in weight_decays {
        for &lambda in lambdas {
            let val_acc = score(lambda, wd)?;
            if !val_acc.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grid cell lambda={lambda} wd={wd}"
                )));
            }
            cells.push(GridCell {
                lambda,
                weight_decay: wd,
                val_acc,
            });
        }
    }
    let better = |a: &GridCell, b: &GridCell| {
        a.val_acc > b.val_acc
            || (a.val_acc == b.val_acc
                && (a.weight_decay < b.weight_decay
                    || (a.weight_decay == b.weight_decay && a.lambda < b.lambda)))
    };
    let mut best = cells[0];
    for c in &cells[1..] {
        if better(c, &best) {
            best = *c;
        }
    }
    Ok(GridResult { cells, best })
}

/// Grid search over grounder training runs that all start from `init`.
pub fn grid_search_grounder(
    init: &Grounder,
    records: &[SampleRecord],
    base: &TrainConfig,
    lambdas: &[f64],
    weight_decays: &[f64],
) -> Result<GridResult> {
    grid_search(lambdas, weight_decays, |lambda, weight_decay| {
        let cfg = TrainConfig {
            lambda,
            weight_decay,
            ..base.clone()
        };
        let (_, h) = train_grounder(init.clone(), records, &cfg)?;
        Ok(h.val_acc[h.best_epoch - 1])
    })
}

/// Selected weight decay and λ per annotation fraction, one column per
/// fraction: `(p, best cell)`.
pub fn selection_table(columns: &[(f64, GridCell)]) -> String {
    let pct = |p: f64| {
        let s = format!("{:.2}", 100.0 * p);
        let s = s.trim_end_matches('0').trim_end_matches('.');
        format!("{s}%")
    };
    let mut out = String::from("hyperparameter");
    for (p, _) in columns {
        out.push(',');
        out.push_str(&pct(*p));
    }
    out.push_str("\nweight_decay");
    for (_, c) in columns {
        out.push_str(&format!(",{}", c.weight_decay));
    }
    out.push_str("\nlambda");
    for (_, c) in columns {
        out.push_str(&format!(",{}", c.lambda));
    }
    out.push('\n');
    out
}

/// Training-split query token sequences for autoencoder pretraining.
pub fn autoencoder_corpus(records: &[SampleRecord]) -> Vec<Vec<usize>> {
    query_refs(records, Split::Train)
        .into_iter()
        .map(|(r, q)| records[r].queries[q].tokens.clone())
        .collect()
}

/// `(target proposal feature, query feature)` pairs of labeled training
/// queries, with query features from the frozen encoder in `store`.
pub fn projection_pairs(
    records: &[SampleRecord],
    encoder: &QueryEncoder,
    store: &ParamStore,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut cache = QueryCache::default();
    let mut image = Vec::new();
    let mut query = Vec::new();
    for (r, q) in query_refs(records, Split::Train) {
        let rec = &records[r];
        if !rec.labeled {
            continue;
        }
        let gt = &rec.queries[q].gt;
        if let Some(t) = best_target_proposal(
            &rec.proposal_boxes(),
            gt,
            TARGET_IOU,
            ThresholdMode::Inclusive,
        ) {
            cache.fill(encoder, store, records, &[(r, q)])?;
            image.push(rec.proposals[t].feature.clone());
            query.push(cache.get(&rec.queries[q].tokens).to_vec());
        }
    }
    Ok((image, query))
}

fn copy_encoder(dst: &mut ParamStore, ae: &Autoencoder) -> Result<()> {
    let n = dst.copy_prefixed(&ae.store, ENCODER_PREFIX, ENCODER_PREFIX)?;
    if n == 0 {
        return Err(Error::MissingAsset(
            "autoencoder has no encoder parameters".into(),
        ));
    }
    Ok(())
}

/// A grounder whose encoder comes from `ae` and, when given, whose
/// projection branches come from `proj`.
pub fn grounder_from_pretrained(
    dims: GrounderDims,
    ae: &Autoencoder,
    proj: Option<&Projections>,
    seed: u64,
) -> Result<Grounder> {
    let mut g = Grounder::new(dims, seed);
    copy_encoder(&mut g.store, ae)?;
    if let Some(p) = proj {
        g.store
            .copy_prefixed(&p.store, VISUAL_BRANCH, VISUAL_BRANCH)?;
        g.store
            .copy_prefixed(&p.store, QUERY_BRANCH, QUERY_BRANCH)?;
    }
    Ok(g)
}

/// A refiner with its own copy of the encoder in `ae`.
pub fn refiner_from_pretrained(
    dims: RefinerDims,
    ae: &Autoencoder,
    mask: FeatureMask,
    seed: u64,
) -> Result<Refiner> {
    let mut r = Refiner::new(dims, mask, seed);
    copy_encoder(&mut r.store, ae)?;
    Ok(r)
}
