//! Proposal scoring: both modalities are batch-normalized and projected with
//! ReLU into a common space, summed, and scored by a small attention head.
//! Training combines cross-entropy against the target proposal with an ℓ1
//! semantic loss between the query feature and a linear projection of the
//! score-weighted visual feature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{softmax, BatchNormMode, Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use crate::geometry::BBox;
use crate::synthdata::SampleRecord;
use crate::textenc::{
    xavier, ProjectionBranch, QueryEncoder, AUTOENCODER_PREFIX, QUERY_BRANCH, VISUAL_BRANCH,
};
use crate::{Error, Result};

/// Prefix of the frozen query encoder inside grounder and refiner stores.
pub const ENCODER_PREFIX: &str = AUTOENCODER_PREFIX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GrounderDims {
    pub vocab: usize,
    pub embed: usize,
    /// Query feature size (encoder hidden size).
    pub query: usize,
    /// Proposal feature size.
    pub visual: usize,
    /// Common projection size.
    pub proj: usize,
}

#[derive(Clone, Debug)]
pub struct Grounder {
    pub store: ParamStore,
    pub encoder: QueryEncoder,
    pub visual: ProjectionBranch,
    pub query: ProjectionBranch,
    pub att_hidden_w: ParamId,
    pub att_hidden_b: ParamId,
    pub att_out_w: ParamId,
    pub att_out_b: ParamId,
    /// Maps the pooled visual feature back to query-feature space.
    pub sem_w: ParamId,
    pub sem_b: ParamId,
}

/// Everything one scoring pass produces for a single query.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingOutput {
    /// Raw scores α.
    pub scores: Vec<f64>,
    /// softmax(α).
    pub weights: Vec<f64>,
    /// Fused features `[N × proj]`.
    pub fused: Tensor,
    pub selected: usize,
    /// Score-weighted visual feature.
    pub attended: Vec<f64>,
    /// Semantic reconstruction of the query feature.
    pub reconstruction: Vec<f64>,
}

/// One training or inference item.
#[derive(Clone, Copy, Debug)]
pub struct GroundingItem<'a> {
    /// `[N × visual]`
    pub features: &'a Tensor,
    pub query: &'a [f64],
    /// Target proposal, present only for labeled items with a qualifying proposal.
    pub target: Option<usize>,
}

/// Tape handles of a batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchForward {
    /// `[1 × N_i]` raw scores per item.
    pub scores: Vec<Var>,
    /// `[1 × N_i]` normalized scores per item.
    pub weights: Vec<Var>,
    /// `[ΣN × proj]`
    pub fused: Var,
    /// `[B × visual]`
    pub attended: Var,
    /// `[B × query]`
    pub reconstruction: Var,
    pub updates: Vec<(ParamId, Tensor)>,
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in v.iter().enumerate() {
        match best {
            Some(b) if *x <= v[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

impl Grounder {
    pub fn new(dims: GrounderDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = QueryEncoder::register(
            &mut store,
            ENCODER_PREFIX,
            dims.vocab,
            dims.embed,
            dims.query,
            &mut rng,
        );
        let visual =
            ProjectionBranch::register(&mut store, VISUAL_BRANCH, dims.visual, dims.proj, &mut rng);
        let query =
            ProjectionBranch::register(&mut store, QUERY_BRANCH, dims.query, dims.proj, &mut rng);
        let p = dims.proj;
        Grounder {
            att_hidden_w: store.add("att.hidden.w", xavier(p, p, &mut rng), true),
            att_hidden_b: store.add("att.hidden.b", Tensor::zeros(&[1, p]), true),
            att_out_w: store.add("att.out.w", xavier(p, 1, &mut rng), true),
            att_out_b: store.add("att.out.b", Tensor::zeros(&[1, 1]), true),
            sem_w: store.add("sem.w", xavier(dims.visual, dims.query, &mut rng), true),
            sem_b: store.add("sem.b", Tensor::zeros(&[1, dims.query]), true),
            store,
            encoder,
            visual,
            query,
        }
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        Ok(Grounder {
            encoder: QueryEncoder::lookup(&store, ENCODER_PREFIX)?,
            visual: ProjectionBranch::lookup(&store, VISUAL_BRANCH)?,
            query: ProjectionBranch::lookup(&store, QUERY_BRANCH)?,
            att_hidden_w: store.id("att.hidden.w")?,
            att_hidden_b: store.id("att.hidden.b")?,
            att_out_w: store.id("att.out.w")?,
            att_out_b: store.id("att.out.b")?,
            sem_w: store.id("sem.w")?,
            sem_b: store.id("sem.b")?,
            store,
        })
    }

    pub fn dims(&self) -> GrounderDims {
        let s = &self.store;
        GrounderDims {
            vocab: s.get(self.encoder.table).rows(),
            embed: s.get(self.encoder.table).cols(),
            query: self.encoder.hidden(),
            visual: s.get(self.visual.w).rows(),
            proj: s.get(self.visual.w).cols(),
        }
    }

    /// Parameters trained by the grounding objective; the encoder stays frozen.
    pub fn learns(name: &str) -> bool {
        !name.starts_with(ENCODER_PREFIX)
    }

    pub fn bind(&self, tape: &mut Tape, learn: bool) -> Bindings {
        self.store.bind_with(tape, |n| learn && Self::learns(n))
    }

    /// Final encoder state for each token sequence.
    pub fn encode_queries(&self, queries: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        queries
            .iter()
            .map(|q| self.encoder.encode_values(&self.store, q))
            .collect()
    }

    /// Scores every item of a batch on one tape.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        items: &[GroundingItem],
        mode: BatchNormMode,
    ) -> Result<BatchForward> {
        if items.is_empty() {
            return Err(Error::Empty("grounding batch".into()));
        }
        let dims = self.dims();
        let mut feats = Vec::new();
        let mut owner = Vec::new();
        let mut queries = Vec::with_capacity(items.len() * dims.query);
        for (i, it) in items.iter().enumerate() {
            let (n, d) = it.features.assert_rank2("proposal features")?;
            if n == 0 {
                return Err(Error::Empty("item has no proposals".into()));
            }
            if d != dims.visual || it.query.len() != dims.query {
                return Err(Error::Shape(format!(
                    "item {i}: features {d} / query {} vs model {} / {}",
                    it.query.len(),
                    dims.visual,
                    dims.query
                )));
            }
            if let Some(t) = it.target {
                if t >= n {
                    return Err(Error::IndexOutOfRange { index: t, len: n });
                }
            }
            feats.extend_from_slice(it.features.data());
            owner.extend(std::iter::repeat_n(i, n));
            queries.extend_from_slice(it.query);
        }
        let x = tape.constant(Tensor::matrix(owner.len(), dims.visual, feats)?);
        let h = tape.constant(Tensor::matrix(items.len(), dims.query, queries)?);

        let (xp, mut updates) = self.visual.forward(tape, &self.store, b, x, mode)?;
        let xp = tape.relu(xp);
        let (hp, up) = self.query.forward(tape, &self.store, b, h, mode)?;
        updates.extend(up);
        let hp = tape.relu(hp);
        let hp_rows = tape.gather_rows(hp, &owner)?;
        let fused = tape.add(xp, hp_rows)?;

        let a = tape.matmul(fused, b[self.att_hidden_w])?;
        let a = tape.add_row(a, b[self.att_hidden_b])?;
        let a = tape.relu(a);
        let alpha = tape.matmul(a, b[self.att_out_w])?;
        let alpha = tape.add_row(alpha, b[self.att_out_b])?;
        let alpha = tape.transpose(alpha)?;

        let mut scores = Vec::with_capacity(items.len());
        let mut weights = Vec::with_capacity(items.len());
        let mut attended = Vec::with_capacity(items.len());
        let mut start = 0;
        for it in items {
            let n = it.features.rows();
            let s = tape.slice_cols(alpha, start, n)?;
            let w = tape.softmax_rows(s)?;
            let xi = tape.slice_rows(x, start, n)?;
            attended.push(tape.matmul(w, xi)?);
            scores.push(s);
            weights.push(w);
            start += n;
        }
        let attended = tape.concat_rows(&attended)?;
        let recon = tape.matmul(attended, b[self.sem_w])?;
        let reconstruction = tape.add_row(recon, b[self.sem_b])?;
        Ok(BatchForward {
            scores,
            weights,
            fused,
            attended,
            reconstruction,
            updates,
        })
    }

    /// Batch objective `(1/B) Σ_i [λ·L_cls,i + L_sem,i]`, where the
    /// classification term is present only for items with a target and the
    /// semantic term only when `semantic` is set.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        items: &[GroundingItem],
        lambda: f64,
        semantic: bool,
        mode: BatchNormMode,
    ) -> Result<(Var, BatchForward)> {
        if lambda < 0.0 {
            return Err(Error::InvalidArgument(format!("lambda {lambda} < 0")));
        }
        let fwd = self.forward_batch(tape, b, items, mode)?;
        let mut terms = Vec::new();
        for (it, s) in items.iter().zip(&fwd.scores) {
            if let Some(t) = it.target {
                let ce = tape.cross_entropy(*s, t)?;
                terms.push(tape.scale(ce, lambda));
            }
        }
        if semantic {
            let h = tape.constant(Tensor::matrix(
                items.len(),
                self.dims().query,
                items
                    .iter()
                    .flat_map(|it| it.query.iter().copied())
                    .collect(),
            )?);
            terms.push(tape.l1(h, fwd.reconstruction)?);
        }
        if terms.is_empty() {
            return Err(Error::Empty("batch has no loss terms".into()));
        }
        let all = tape.concat_cols(&terms)?;
        let total = tape.sum(all);
        Ok((tape.scale(total, 1.0 / items.len() as f64), fwd))
    }

    /// Inference for one query feature over `[N × visual]` proposal features.
    pub fn fuse_and_score(&self, features: &Tensor, query: &[f64]) -> Result<GroundingOutput> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let item = GroundingItem {
            features,
            query,
            target: None,
        };
        let fwd = self.forward_batch(&mut tape, &b, &[item], BatchNormMode::Eval)?;
        let scores = tape.value(fwd.scores[0]).data().to_vec();
        let selected = argmax(&scores).ok_or_else(|| Error::Empty("no proposals".into()))?;
        if !scores.iter().all(|s| s.is_finite()) {
            return Err(Error::NonFinite("proposal scores".into()));
        }
        Ok(GroundingOutput {
            weights: tape.value(fwd.weights[0]).data().to_vec(),
            fused: tape.value(fwd.fused).clone(),
            selected,
            attended: tape.value(fwd.attended).data().to_vec(),
            reconstruction: tape.value(fwd.reconstruction).data().to_vec(),
            scores,
        })
    }

    /// Encodes `tokens`, scores the proposals of `record` and returns the
    /// selected box.
    pub fn ground(
        &self,
        tokens: &[usize],
        record: &SampleRecord,
    ) -> Result<(BBox, GroundingOutput)> {
        let query = self.encoder.encode_values(&self.store, tokens)?;
        let features = proposal_matrix(record)?;
        let out = self.fuse_and_score(&features, &query)?;
        Ok((record.proposals[out.selected].bbox, out))
    }
}

/// Proposal features of a record as `[N × d]`.
pub fn proposal_matrix(record: &SampleRecord) -> Result<Tensor> {
    if record.proposals.is_empty() {
        return Err(Error::Empty(format!(
            "record {} has no proposals",
            record.image_id
        )));
    }
    let d = record.proposals[0].feature.len();
    let data: Vec<f64> = record
        .proposals
        .iter()
        .flat_map(|p| p.feature.iter().copied())
        .collect();
    Tensor::matrix(record.proposals.len(), d, data)
}

/// `Σ_i w_i x_i` for weights on the probability simplex.
pub fn attend_visual(weights: &[f64], features: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = features.assert_rank2("features")?;
    if weights.len() != n {
        return Err(Error::Shape(format!(
            "{} weights for {n} proposals",
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < -1e-6) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(
            "weights are not on the simplex".into(),
        ));
    }
    let mut out = vec![0.0; d];
    for (i, w) in weights.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(features.row_slice(i)) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// `‖h − ĥ‖₁`
pub fn semantic_loss(query: &[f64], reconstruction: &[f64]) -> Result<f64> {
    if query.len() != reconstruction.len() {
        return Err(Error::Shape(
            "semantic loss operands differ in length".into(),
        ));
    }
    Ok(query
        .iter()
        .zip(reconstruction)
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// Softmax cross-entropy of raw scores against `target`.
pub fn classification_loss(scores: &[f64], target: usize) -> Result<f64> {
    if target >= scores.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: scores.len(),
        });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - scores[target])
}

/// `λ·L_cls + L_sem`; unlabeled items pass `None` for the classification term.
pub fn joint_loss(cls: Option<f64>, sem: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda {lambda} < 0")));
    }
    Ok(cls.map_or(0.0, |c| lambda * c) + sem)
}

/// Convenience used by tests and the acceptance suite.
pub fn normalized_scores(scores: &[f64]) -> Result<Vec<f64>> {
    softmax(scores)
}
