//! Model assembly: shared trunk and fusion pyramid, per-AU RoI branches, the
//! relation transformer with its query bank, the two prediction heads, and
//! the auxiliary-task modules (inpainting generator, patch critics, flow
//! head). Parameters live in one flat store; optimizer groups are id ranges
//! recorded during construction.

pub mod backbone;
pub mod checkpoint;
pub mod layers;
pub mod ofe;
pub mod roii;
pub mod transformer;

use ndarray::{Array2, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, ROI_WINDOW};
use crate::data::rules::{map_center, CenterPair};
use crate::error::{Error, Result};
use crate::nn::{s, xavier_normal, zeros, ParamId, ParamStore, Scalar, Tape, Var};

use backbone::{Fusion, RoiBranch, Trunk};
use layers::Linear;
use ofe::FlowHead;
use roii::{Generator, PatchCritic};
use transformer::{Relation, RelationOut};

pub struct ModelOutput {
    /// `[B, N]` AU probabilities: sigmoid of the elementwise max of the two
    /// logit heads.
    pub probs: Var,
    /// `[B, N]` pre-sigmoid fused logits (the max), the sharpening input.
    pub fused_logits: Var,
    /// `[B, N]` logits read off the decoded query tokens.
    pub regional: Var,
    /// `[B, N]` logits from the pooled deepest trunk stage.
    pub global_logits: Var,
    pub decoded: RelationOut,
    /// `[B, cf, S/4, S/4]` fused feature map the RoI windows were cut from.
    pub fused: Var,
    /// `[B, c(512), S/32, S/32]` deepest trunk stage, input of the flow head.
    pub deepest: Var,
}

pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub trunk: Trunk,
    pub fusion: Fusion,
    pub roi: Vec<RoiBranch>,
    pub relation: Relation,
    token_w: ParamId,
    token_b: ParamId,
    global: Linear,
    pub generator: Generator,
    pub disc: PatchCritic,
    pub cls: PatchCritic,
    pub flow: FlowHead,
    backbone_ids: Vec<ParamId>,
    g_ids: Vec<ParamId>,
    d_ids: Vec<ParamId>,
    c_ids: Vec<ParamId>,
    f_ids: Vec<ParamId>,
}

fn ids_in(lo: usize, hi: usize) -> Vec<ParamId> {
    (lo..hi).map(ParamId).collect()
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let trunk = Trunk::new(&mut store, &mut rng, cfg);
        let fusion = Fusion::new(&mut store, &mut rng, cfg);
        let roi: Vec<RoiBranch> = (0..cfg.au_count)
            .map(|au| RoiBranch::new(&mut store, &mut rng, au, cfg))
            .collect();
        let relation = Relation::new(&mut store, &mut rng, cfg);
        let token_w = store.add(
            "head.token.w",
            xavier_normal(&[cfg.au_count, cfg.embed_dim], cfg.embed_dim, 1, &mut rng),
        );
        let token_b = store.add("head.token.b", zeros(&[cfg.au_count]));
        let global = Linear::new(&mut store, &mut rng, "head.global", cfg.ch(512), cfg.au_count, true);
        let mark_backbone = store.len();

        let generator = Generator::new(&mut store, &mut rng, cfg);
        let mark_g = store.len();
        let disc = PatchCritic::new(&mut store, &mut rng, "disc", cfg, 1);
        let mark_d = store.len();
        let cls = PatchCritic::new(&mut store, &mut rng, "cls", cfg, cfg.au_count);
        let mark_c = store.len();
        let flow = FlowHead::new(&mut store, &mut rng, cfg);
        let mark_f = store.len();

        Ok(Model {
            cfg: cfg.clone(),
            store,
            trunk,
            fusion,
            roi,
            relation,
            token_w,
            token_b,
            global,
            generator,
            disc,
            cls,
            flow,
            backbone_ids: ids_in(0, mark_backbone),
            g_ids: ids_in(mark_backbone, mark_g),
            d_ids: ids_in(mark_g, mark_d),
            c_ids: ids_in(mark_d, mark_c),
            f_ids: ids_in(mark_c, mark_f),
        })
    }

    pub fn backbone_ids(&self) -> &[ParamId] {
        &self.backbone_ids
    }

    pub fn generator_ids(&self) -> &[ParamId] {
        &self.g_ids
    }

    pub fn discriminator_ids(&self) -> &[ParamId] {
        &self.d_ids
    }

    pub fn classifier_ids(&self) -> &[ParamId] {
        &self.c_ids
    }

    pub fn flow_ids(&self) -> &[ParamId] {
        &self.f_ids
    }

    /// Scalar count of everything the recognition path reads.
    pub fn inference_scalars(&self) -> usize {
        self.store.count_scalars(&self.backbone_ids)
    }

    /// Scalar count including the auxiliary-task modules.
    pub fn training_scalars(&self) -> usize {
        self.store.count_all_scalars()
    }

    fn check_inputs(&self, images: &ArrayD<S>, centers: &[Vec<CenterPair>]) -> Result<usize> {
        let shape = images.shape();
        let size = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
            return Err(Error::Shape(format!(
                "expected image batch [B, 3, {size}, {size}], got {shape:?}"
            )));
        }
        let b = shape[0];
        if centers.len() != b {
            return Err(Error::Shape(format!(
                "{} center lists for batch of {b}",
                centers.len()
            )));
        }
        for (i, c) in centers.iter().enumerate() {
            if c.len() != self.cfg.au_count {
                return Err(Error::Shape(format!(
                    "item {i}: {} AU centers, model has {}",
                    c.len(),
                    self.cfg.au_count
                )));
            }
        }
        Ok(b)
    }

    /// Full recognition pass. `images` is `[B, 3, S, S]` in [0, 1], `centers`
    /// holds one left/right pair per AU per item in image coordinates.
    pub fn forward(
        &self,
        t: &Tape<S>,
        images: ArrayD<S>,
        centers: &[Vec<CenterPair>],
    ) -> Result<ModelOutput> {
        let b = self.check_inputs(&images, centers)?;
        let n = self.cfg.au_count;
        let ms = self.cfg.map_size();
        let half = ROI_WINDOW / 2;

        let x = t.constant(images);
        let feats = self.trunk.apply(t, &self.store, x);
        let fused = self.fusion.apply(t, &self.store, &feats);

        let mut wins_l = Vec::with_capacity(n * b);
        let mut wins_r = Vec::with_capacity(n * b);
        for au in 0..n {
            for (bi, item) in centers.iter().enumerate() {
                let l = &item[au].left;
                let r = &item[au].right;
                wins_l.push((bi, map_center(l[1], ms) - half, map_center(l[0], ms) - half));
                wins_r.push((bi, map_center(r[1], ms) - half, map_center(r[0], ms) - half));
            }
        }
        let patches_l = t.crop_windows(fused, &wins_l, ROI_WINDOW);
        let patches_r = t.crop_windows(fused, &wins_r, ROI_WINDOW);

        let mut tok_l = Vec::with_capacity(n);
        let mut tok_r = Vec::with_capacity(n);
        for (au, branch) in self.roi.iter().enumerate() {
            tok_l.push(branch.apply(t, &self.store, t.narrow(patches_l, 0, au * b, b)));
            tok_r.push(branch.apply(t, &self.store, t.narrow(patches_r, 0, au * b, b)));
        }
        let tokens_l = t.stack_tokens(&tok_l);
        let tokens_r = t.stack_tokens(&tok_r);

        let decoded = self.relation.apply(t, &self.store, tokens_l, tokens_r);
        let regional = t.per_token_linear(
            decoded.decoded,
            t.param(&self.store, self.token_w),
            t.param(&self.store, self.token_b),
        );
        let pooled = t.global_avg_pool(feats.c4);
        let global_logits = self.global.apply(t, &self.store, pooled, false);
        let fused_logits = t.max_elem(regional, global_logits);
        let probs = t.sigmoid(fused_logits);

        Ok(ModelOutput {
            probs,
            fused_logits,
            regional,
            global_logits,
            decoded,
            fused,
            deepest: feats.c4,
        })
    }

    /// Inference without a gradient tape; returns `[B, N]` probabilities.
    pub fn predict(&self, images: ArrayD<S>, centers: &[Vec<CenterPair>]) -> Result<Array2<f32>> {
        let t = Tape::no_grad();
        let out = self.forward(&t, images, centers)?;
        to_f32_matrix(&t.value(out.probs))
    }

    /// Pre-sigmoid fused logits `[B, N]` without a gradient tape; input of
    /// the pseudo-label sharpening step.
    pub fn logits(&self, images: ArrayD<S>, centers: &[Vec<CenterPair>]) -> Result<Array2<f32>> {
        let t = Tape::no_grad();
        let out = self.forward(&t, images, centers)?;
        to_f32_matrix(&t.value(out.fused_logits))
    }

    /// All parameter tensors as named f32 arrays, in store order.
    pub fn export_tensors(&self) -> Vec<(String, ArrayD<f32>)> {
        self.store
            .ids()
            .map(|id| {
                let name = self.store.name(id).to_string();
                (name, self.store.value(id).mapv(|v| v.as_f64() as f32))
            })
            .collect()
    }

    /// Load parameter tensors by name. Every model parameter must be present
    /// with a matching shape; names under `adam.` are optimizer state and are
    /// skipped here; any other unknown name is an error.
    pub fn import_tensors(&mut self, tensors: &[(String, ArrayD<f32>)]) -> Result<()> {
        let mut seen = vec![false; self.store.len()];
        for (name, tensor) in tensors {
            if name.starts_with("adam.") {
                continue;
            }
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if self.store.value(id).shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    tensor.shape(),
                    self.store.value(id).shape()
                )));
            }
            *self.store.value_mut(id) = tensor.mapv(|v| s::<S>(v as f64));
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|&x| !x) {
            return Err(Error::Checkpoint(format!(
                "checkpoint missing parameter {}",
                self.store.name(ParamId(i))
            )));
        }
        Ok(())
    }
}

fn to_f32_matrix<S: Scalar>(v: &ArrayD<S>) -> Result<Array2<f32>> {
    let b = v.shape()[0];
    let n = v.shape()[1];
    let flat: Vec<f32> = v.iter().map(|p| p.as_f64() as f32).collect();
    Array2::from_shape_vec((b, n), flat).map_err(|e| Error::Shape(format!("matrix reshape: {e}")))
}

/// Gather decoded query tokens by (item, AU) picks: `decoded` is `[B, N, d]`,
/// the result stacks the picked rows into `[K, d]`.
pub fn gather_tokens_at<S: Scalar>(t: &Tape<S>, decoded: Var, picks: &[(usize, usize)]) -> Var {
    let d = t.shape(decoded)[2];
    let rows: Vec<Var> = picks
        .iter()
        .map(|&(b, au)| {
            let row = t.narrow(t.narrow(decoded, 0, b, 1), 1, au, 1);
            t.reshape(row, &[1, d])
        })
        .collect();
    t.concat(&rows, 0)
}
