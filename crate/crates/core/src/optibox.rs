//! Query-guided box refinement.
//!
//! The selected box `r`, its visual feature `x` and the query feature `q` are
//! projected with ReLU; a copy of that projection is appended to every cell of
//! the global feature map, a 1×1 convolution scores the cells, and the
//! softmax-weighted cell average is the context `c`. Then `[x; r; q; c]` is
//! projected and passed five times through one shared ReLU layer before a
//! linear head emits the offset `t′` that is decoded onto `r`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use crate::geometry::{clip_box, decode_offset, image_bounds, BBox, BoxOffset};
use crate::grounder::ENCODER_PREFIX;
use crate::synthdata::FeatureMap;
use crate::textenc::{xavier, QueryEncoder};
use crate::{Error, Result};

/// Applications of the shared refinement layer.
pub const SHARED_APPLICATIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefinerDims {
    pub vocab: usize,
    pub embed: usize,
    pub query: usize,
    pub visual: usize,
    pub channels: usize,
    /// Width of the local projection and of the shared layer.
    pub hidden: usize,
}

/// Which input segments the network sees; a disabled segment is fed as
/// zeros at training and test time alike.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureMask {
    pub visual: bool,
    pub bbox: bool,
    pub query: bool,
    pub global: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask::all()
    }
}

impl FeatureMask {
    pub fn all() -> Self {
        FeatureMask {
            visual: true,
            bbox: true,
            query: true,
            global: true,
        }
    }

    /// `all`, or a `-name` list such as `-visual` or `-box-query`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(FeatureMask::all());
        }
        let mut m = FeatureMask::all();
        let bad = || {
            Error::Config(format!(
                "feature mask {s:?}: expected `all` or `-visual`, `-box`, `-query`, `-global`"
            ))
        };
        let rest = s.strip_prefix('-').ok_or_else(bad)?;
        for part in rest.split('-') {
            match part {
                "visual" => m.visual = false,
                "box" => m.bbox = false,
                "query" => m.query = false,
                "global" => m.global = false,
                _ => return Err(bad()),
            }
        }
        Ok(m)
    }

    pub fn label(&self) -> String {
        let mut s = String::new();
        for (on, name) in [
            (self.visual, "visual"),
            (self.bbox, "box"),
            (self.query, "query"),
            (self.global, "global"),
        ] {
            if !on {
                s.push('-');
                s.push_str(name);
            }
        }
        if s.is_empty() {
            "all".into()
        } else {
            s
        }
    }
}

#[derive(Clone, Debug)]
pub struct Refiner {
    pub store: ParamStore,
    pub encoder: QueryEncoder,
    pub local_w: ParamId,
    pub local_b: ParamId,
    /// 1×1 convolution over `[cell channels; local projection]`.
    pub attn_w: ParamId,
    pub attn_b: ParamId,
    pub input_w: ParamId,
    pub input_b: ParamId,
    /// The single weight set reused by every refinement application.
    pub shared_w: ParamId,
    pub shared_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub mask: FeatureMask,
}

/// Inputs for refining one box.
#[derive(Clone, Copy, Debug)]
pub struct RefineItem<'a> {
    pub feature: &'a [f64],
    pub bbox: BBox,
    pub width: f64,
    pub height: f64,
    pub query: &'a [f64],
    pub map: &'a FeatureMap,
}

#[derive(Clone, Debug)]
pub struct RefineForward {
    /// `[B × 4]`
    pub offsets: Var,
    /// `[1 × S²]` per item.
    pub attention: Vec<Var>,
    /// `[B × C]`
    pub context: Var,
}

impl Refiner {
    pub fn new(dims: RefinerDims, mask: FeatureMask, seed: u64) -> Self {
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
        let local_in = dims.visual + 4 + dims.query;
        let l = dims.hidden;
        Refiner {
            local_w: store.add("local.w", xavier(local_in, l, &mut rng), true),
            local_b: store.add("local.b", Tensor::zeros(&[1, l]), true),
            attn_w: store.add("attn.w", xavier(dims.channels + l, 1, &mut rng), true),
            attn_b: store.add("attn.b", Tensor::zeros(&[1, 1]), true),
            input_w: store.add(
                "input.w",
                xavier(local_in + dims.channels, l, &mut rng),
                true,
            ),
            input_b: store.add("input.b", Tensor::zeros(&[1, l]), true),
            shared_w: store.add("shared.w", xavier(l, l, &mut rng), true),
            shared_b: store.add("shared.b", Tensor::zeros(&[1, l]), true),
            head_w: store.add("head.w", xavier(l, 4, &mut rng).scaled(0.1), true),
            head_b: store.add("head.b", Tensor::zeros(&[1, 4]), true),
            store,
            encoder,
            mask,
        }
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let mask = match store.meta.get("mask") {
            Some(m) => FeatureMask::parse(m)?,
            None => FeatureMask::all(),
        };
        Ok(Refiner {
            encoder: QueryEncoder::lookup(&store, ENCODER_PREFIX)?,
            local_w: store.id("local.w")?,
            local_b: store.id("local.b")?,
            attn_w: store.id("attn.w")?,
            attn_b: store.id("attn.b")?,
            input_w: store.id("input.w")?,
            input_b: store.id("input.b")?,
            shared_w: store.id("shared.w")?,
            shared_b: store.id("shared.b")?,
            head_w: store.id("head.w")?,
            head_b: store.id("head.b")?,
            mask,
            store,
        })
    }

    pub fn dims(&self) -> RefinerDims {
        let s = &self.store;
        let query = self.encoder.hidden();
        let local_in = s.get(self.local_w).rows();
        RefinerDims {
            vocab: s.get(self.encoder.table).rows(),
            embed: s.get(self.encoder.table).cols(),
            query,
            visual: local_in - 4 - query,
            channels: s.get(self.input_w).rows() - local_in,
            hidden: s.get(self.shared_w).rows(),
        }
    }

    pub fn learns(name: &str) -> bool {
        !name.starts_with(ENCODER_PREFIX)
    }

    pub fn bind(&self, tape: &mut Tape, learn: bool) -> Bindings {
        self.store.bind_with(tape, |n| learn && Self::learns(n))
    }

    /// Sets the output head to zero, making refinement the identity.
    pub fn zero_head(&mut self) -> Result<()> {
        let l = self.dims().hidden;
        self.store.set(self.head_w, Tensor::zeros(&[l, 4]))?;
        self.store.set(self.head_b, Tensor::zeros(&[1, 4]))
    }

    /// `[x; r/extent; q]` with masked segments zeroed.
    fn local_input(&self, it: &RefineItem, dims: &RefinerDims) -> Result<Vec<f64>> {
        if it.feature.len() != dims.visual || it.query.len() != dims.query {
            return Err(Error::Shape(format!(
                "feature {} / query {} vs model {} / {}",
                it.feature.len(),
                it.query.len(),
                dims.visual,
                dims.query
            )));
        }
        if it.map.channels != dims.channels {
            return Err(Error::Shape(format!(
                "map has {} channels, model {}",
                it.map.channels, dims.channels
            )));
        }
        let r = it.bbox.normalized(it.width, it.height);
        let finite = it
            .feature
            .iter()
            .chain(it.query)
            .chain(&r)
            .all(|v| v.is_finite());
        if !finite || !it.map.cells.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("refinement input".into()));
        }
        let mut row = Vec::with_capacity(dims.visual + 4 + dims.query);
        let seg = |on: bool, v: &[f64], row: &mut Vec<f64>| {
            if on {
                row.extend_from_slice(v);
            } else {
                row.extend(std::iter::repeat_n(0.0, v.len()));
            }
        };
        seg(self.mask.visual, it.feature, &mut row);
        seg(self.mask.bbox, &r, &mut row);
        seg(self.mask.query, it.query, &mut row);
        Ok(row)
    }

    /// Batched forward pass producing one offset row per item.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        items: &[RefineItem],
    ) -> Result<RefineForward> {
        let shared = [b[self.shared_w]; SHARED_APPLICATIONS];
        self.forward_with_layers(tape, b, items, &shared)
    }

    /// As [`Refiner::forward_batch`] but with an explicit weight handle per
    /// shared-layer application.
    pub fn forward_with_layers(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        items: &[RefineItem],
        shared: &[Var; SHARED_APPLICATIONS],
    ) -> Result<RefineForward> {
        if items.is_empty() {
            return Err(Error::Empty("refinement batch".into()));
        }
        let dims = self.dims();
        let mut rows = Vec::new();
        for it in items {
            rows.extend(self.local_input(it, &dims)?);
        }
        let local_in = dims.visual + 4 + dims.query;
        let local = tape.constant(Tensor::matrix(items.len(), local_in, rows)?);
        let p = tape.matmul(local, b[self.local_w])?;
        let p = tape.add_row(p, b[self.local_b])?;
        let p = tape.relu(p);

        let mut attention = Vec::with_capacity(items.len());
        let mut contexts = Vec::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            let s2 = it.map.size * it.map.size;
            let g = tape.constant(Tensor::matrix(s2, dims.channels, it.map.cells.clone())?);
            let pi = tape.slice_rows(p, i, 1)?;
            let rep = tape.repeat_rows(pi, s2)?;
            let cat = tape.concat_cols(&[g, rep])?;
            let logits = tape.matmul(cat, b[self.attn_w])?;
            let logits = tape.add_row(logits, b[self.attn_b])?;
            let logits = tape.transpose(logits)?;
            let w = tape.softmax_rows(logits)?;
            contexts.push(tape.matmul(w, g)?);
            attention.push(w);
        }
        let context = tape.concat_rows(&contexts)?;
        let c_in = if self.mask.global {
            context
        } else {
            tape.constant(Tensor::zeros(&[items.len(), dims.channels]))
        };
        let input = tape.concat_cols(&[local, c_in])?;
        let hdn = tape.matmul(input, b[self.input_w])?;
        let hdn = tape.add_row(hdn, b[self.input_b])?;
        let mut hdn = tape.relu(hdn);
        for w in shared {
            let z = tape.matmul(hdn, *w)?;
            let z = tape.add_row(z, b[self.shared_b])?;
            hdn = tape.relu(z);
        }
        let out = tape.matmul(hdn, b[self.head_w])?;
        let offsets = tape.add_row(out, b[self.head_b])?;
        Ok(RefineForward {
            offsets,
            attention,
            context,
        })
    }

    /// Mean over the batch of `‖t′ − t‖₁`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        items: &[RefineItem],
        targets: &[BoxOffset],
    ) -> Result<Var> {
        if targets.len() != items.len() {
            return Err(Error::Shape("one target offset per item".into()));
        }
        if !targets.iter().all(BoxOffset::is_finite) {
            return Err(Error::NonFinite("target offset".into()));
        }
        let fwd = self.forward_batch(tape, b, items)?;
        let t = tape.constant(Tensor::matrix(
            items.len(),
            4,
            targets.iter().flat_map(|t| t.to_array()).collect(),
        )?);
        let l = tape.l1(fwd.offsets, t)?;
        Ok(tape.scale(l, 1.0 / items.len() as f64))
    }

    /// Attention weights over the `S²` cells and the context vector.
    pub fn global_attention(&self, item: &RefineItem) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let fwd = self.forward_batch(&mut tape, &b, std::slice::from_ref(item))?;
        Ok((
            tape.value(fwd.attention[0]).data().to_vec(),
            tape.value(fwd.context).data().to_vec(),
        ))
    }

    /// Offsets for a batch of items (inference).
    pub fn predict_offsets(&self, items: &[RefineItem]) -> Result<Vec<BoxOffset>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let fwd = self.forward_batch(&mut tape, &b, items)?;
        let v = tape.value(fwd.offsets);
        Ok((0..items.len())
            .map(|i| {
                let r = v.row_slice(i);
                BoxOffset::from_array([r[0], r[1], r[2], r[3]])
            })
            .collect())
    }

    pub fn refine(&self, item: &RefineItem) -> Result<BoxOffset> {
        let t = self.predict_offsets(std::slice::from_ref(item))?[0];
        if !t.is_finite() {
            return Err(Error::NonFinite("predicted offset".into()));
        }
        Ok(t)
    }

    /// Decodes the predicted offset onto the box and clips to the image;
    /// with `iterations > 1` the network is re-applied to its own output
    /// with the same visual feature.
    pub fn refine_box(&self, item: &RefineItem, iterations: usize) -> Result<BBox> {
        let bounds = image_bounds(item.width, item.height)?;
        let mut current = *item;
        for _ in 0..iterations.max(1) {
            let t = self.refine(&current)?;
            let decoded = decode_offset(&current.bbox, &t)?;
            current.bbox = clip_box(&decoded, &bounds)?;
        }
        Ok(current.bbox)
    }

    /// Batched [`Refiner::refine_box`] with one iteration.
    pub fn refine_boxes(&self, items: &[RefineItem]) -> Result<Vec<BBox>> {
        let offsets = self.predict_offsets(items)?;
        items
            .iter()
            .zip(offsets)
            .map(|(it, t)| {
                let bounds = image_bounds(it.width, it.height)?;
                clip_box(&decode_offset(&it.bbox, &t)?, &bounds)
            })
            .collect()
    }
}

/// `‖t′ − t‖₁`
pub fn optibox_loss(pred: &BoxOffset, target: &BoxOffset) -> Result<f64> {
    if !pred.is_finite() || !target.is_finite() {
        return Err(Error::NonFinite("offset".into()));
    }
    Ok(pred
        .to_array()
        .iter()
        .zip(target.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

trait Scaled {
    fn scaled(self, k: f64) -> Self;
}

impl Scaled for Tensor {
    fn scaled(mut self, k: f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v *= k);
        self
    }
}
