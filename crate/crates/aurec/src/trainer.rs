//! Training orchestration. Each iteration runs two updates on the same
//! sampled batch pair:
//!
//! 1. a semi-supervised step: pseudo labels are guessed on the unlabeled
//!    batch, MixMatch mixes both streams, and `L_semi` updates the backbone;
//! 2. a joint step: one forward over the (half-cropped) batch yields
//!    `L_Sup`, the RoII losses and `L_F`, and the discriminator, the patch
//!    classifier, and the generator+backbone+flow-head groups are stepped in
//!    that order, all from gradients at the iteration-start parameter values.

use ndarray::{Array2, Array4, ArrayD, Axis, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::batch::{BatchIterator, IterState, PreparedSample};
use crate::data::rules::{AuRuleTable, CenterPair};
use crate::data::{rule_table, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, F1Report};
use crate::model::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::model::ofe::flow_loss;
use crate::model::roii::{
    adversarial_losses, classification_loss, crop_random_au, discriminator_loss,
    generator_adversarial_loss, generator_loss, reconstruction_loss, PROB_EPS,
};
use crate::model::{gather_tokens_at, Model};
use crate::nn::{s, Adam, AdamConfig, Gradients, ParamId, Scalar, Tape, Var};
use crate::semi::{mixmatch, semi_loss, sharpen};

/// Mean BCE over unmasked entries only. An all-masked batch is defined as
/// zero loss; the flag lets the caller count the degenerate case.
pub fn masked_supervised_loss<S: Scalar>(
    t: &Tape<S>,
    probs: Var,
    targets: &ArrayD<S>,
    mask: &ArrayD<S>,
) -> (Var, bool) {
    let total: S = mask.iter().cloned().sum();
    if total <= S::zero() {
        return (t.scalar(S::zero()), true);
    }
    (t.bce_mean(probs, targets, Some(mask), PROB_EPS), false)
}

/// Reported joint objective: `L_Sup + L_D + L_G + lambda_f * L_F`. The
/// optimizer never descends this sum directly; each component drives its own
/// parameter group.
pub fn joint_loss<S: Scalar>(
    t: &Tape<S>,
    l_sup: Var,
    l_d: Var,
    l_g: Var,
    l_f: Var,
    lambda_f: f64,
) -> Var {
    t.add_many(&[l_sup, l_d, l_g, t.scale(l_f, lambda_f)])
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub iter: usize,
    pub l_semi: f64,
    pub l_sup: f64,
    pub l_d: f64,
    pub l_g: f64,
    pub l_f: f64,
    /// `L_semi + L_Sup + L_D + L_G + lambda_f * L_F`.
    pub total: f64,
    pub backbone_updates: usize,
    pub d_updates: usize,
    pub c_updates: usize,
    pub g_updates: usize,
    pub f_updates: usize,
    pub all_masked: bool,
    /// True unless the isolation audit (when enabled) saw a gradient outside
    /// the groups a sub-step is allowed to touch.
    pub isolation_ok: bool,
}

pub struct FitResult {
    pub reports: Vec<StepReport>,
    /// `(iteration, train-set average F1, held-out average F1)` at each
    /// evaluation point.
    pub evals: Vec<(usize, f64, Option<f64>)>,
    /// Iterations actually executed (early stop may cut the run short).
    pub stopped_at: usize,
    pub all_masked_warnings: usize,
}

struct JointOutcome {
    l_sup: f64,
    l_d: f64,
    l_g: f64,
    l_f: f64,
    backbone_updates: usize,
    d_updates: usize,
    c_updates: usize,
    g_updates: usize,
    f_updates: usize,
    all_masked: bool,
    isolation_ok: bool,
}

fn batch_images<S: Scalar>(items: &[&PreparedSample]) -> Array4<S> {
    let dims = items[0].image.dim();
    let mut out = Array4::zeros((items.len(), dims.0, dims.1, dims.2));
    for (i, it) in items.iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .zip_mut_with(&it.image, |d, &v| *d = s(f64::from(v)));
    }
    out
}

fn to_scalar_dyn<S: Scalar, D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> ArrayD<S> {
    a.mapv(|v| s::<S>(f64::from(v))).into_dyn()
}

/// True when every parameter holding a gradient is inside `allowed`.
fn confined<S: Scalar>(
    model: &Model<S>,
    t: &Tape<S>,
    grads: &Gradients<S>,
    allowed: &HashSet<usize>,
) -> bool {
    model
        .store
        .ids()
        .all(|id| allowed.contains(&id.index()) || grads.wrt_param(t, id).is_none())
}

fn ids_set(groups: &[&[ParamId]]) -> HashSet<usize> {
    groups
        .iter()
        .flat_map(|g| g.iter().map(|id| id.index()))
        .collect()
}

pub struct Trainer<S: Scalar> {
    pub run: RunConfig,
    pub model: Model<S>,
    /// Audit gradient confinement around every optimizer sub-step. Costs one
    /// store sweep per backward; off for long runs, on in contract tests.
    pub check_isolation: bool,
    adam: Adam<S>,
    iter: BatchIterator,
    table: AuRuleTable,
    samples: Vec<Sample>,
    heldout: Vec<Sample>,
    rng: ChaCha8Rng,
    cur_iter: usize,
    all_masked_warnings: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(run: RunConfig, samples: Vec<Sample>, heldout: Vec<Sample>) -> Result<Self> {
        run.validate()?;
        for sample in samples.iter().chain(heldout.iter()) {
            sample.validate(run.model.au_count)?;
        }
        let table = rule_table(&run);
        let seed = run.train.seed;
        let model = Model::new(&run.model, seed)?;
        let iter = BatchIterator::new(&samples, &run.model, &table, seed.wrapping_add(1), true)?;
        let adam = Adam::new(
            AdamConfig {
                lr: run.train.lr,
                ..AdamConfig::default()
            },
            model.store.len(),
        );
        let rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        Ok(Trainer {
            run,
            model,
            check_isolation: false,
            adam,
            iter,
            table,
            samples,
            heldout,
            rng,
            cur_iter: 0,
            all_masked_warnings: 0,
        })
    }

    pub fn current_iteration(&self) -> usize {
        self.cur_iter
    }

    pub fn all_masked_warnings(&self) -> usize {
        self.all_masked_warnings
    }

    fn ensure_finite(&self, iter: usize, components: &[(&str, f64)]) -> Result<()> {
        if components.iter().all(|(_, v)| v.is_finite()) {
            return Ok(());
        }
        let dump: Vec<String> = components
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        Err(Error::NonFinite {
            iter,
            what: dump.join(", "),
        })
    }

    fn ensure_finite_grads(&self, iter: usize, what: &str, grads: &Gradients<S>) -> Result<()> {
        if grads.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                iter,
                what: format!("gradient of {what}"),
            })
        }
    }

    /// Pseudo labels for an unlabeled batch: fused logits averaged over
    /// `k_augment` views (the drawn view plus fresh augmentations), then
    /// sharpened. Runs without gradients; the result is a snapshot.
    fn guess_pseudo(&mut self, unlabeled: &[(usize, PreparedSample)]) -> Result<Array2<f32>> {
        let tc = self.run.train.clone();
        let n = unlabeled.len();
        let mut logits_sum = Array2::<f32>::zeros((n, self.run.model.au_count));
        for k in 0..tc.k_augment {
            let extra: Vec<PreparedSample> = if k == 0 {
                Vec::new()
            } else {
                unlabeled
                    .iter()
                    .map(|(idx, _)| self.iter.prepare(&self.samples[*idx]))
                    .collect::<Result<_>>()?
            };
            let views: Vec<&PreparedSample> = if k == 0 {
                unlabeled.iter().map(|(_, p)| p).collect()
            } else {
                extra.iter().collect()
            };
            let images = batch_images::<S>(&views).into_dyn();
            let centers: Vec<Vec<CenterPair>> = views.iter().map(|p| p.centers.clone()).collect();
            logits_sum += &self.model.logits(images, &centers)?;
        }
        let logits = logits_sum / tc.k_augment as f32;
        sharpen(&logits, tc.temperature)
    }

    fn labels_matrix(&self, labeled: &[PreparedSample]) -> Result<Array2<f32>> {
        let n_au = self.run.model.au_count;
        let mut out = Array2::<f32>::zeros((labeled.len(), n_au));
        for (i, p) in labeled.iter().enumerate() {
            let l = p.labels.as_ref().ok_or_else(|| {
                Error::Data(format!("subject {}: labeled stream without labels", p.subject_id))
            })?;
            for (au, &v) in l.iter().enumerate() {
                out[[i, au]] = f32::from(v);
            }
        }
        Ok(out)
    }

    /// MixMatch update of the backbone; returns `(L_semi, update count)`.
    fn semi_step(
        &mut self,
        labeled: &[PreparedSample],
        unlabeled: &[(usize, PreparedSample)],
        pseudo: &Array2<f32>,
        iter_idx: usize,
    ) -> Result<(f64, usize)> {
        let tc = self.run.train.clone();
        let n = labeled.len();
        let y_l = self.labels_matrix(labeled)?;
        let u_items: Vec<PreparedSample> = unlabeled.iter().map(|(_, p)| p.clone()).collect();
        let mixed = mixmatch(labeled, &y_l, &u_items, pseudo, tc.mix_alpha, &mut self.rng)?;

        let size = self.run.model.image_size;
        let mut images = Array4::<S>::zeros((2 * n, 3, size, size));
        for i in 0..n {
            images
                .index_axis_mut(Axis(0), i)
                .zip_mut_with(&mixed.labeled_images.index_axis(Axis(0), i), |d, &v| {
                    *d = s(f64::from(v))
                });
            images
                .index_axis_mut(Axis(0), n + i)
                .zip_mut_with(&mixed.unlabeled_images.index_axis(Axis(0), i), |d, &v| {
                    *d = s(f64::from(v))
                });
        }
        let mut centers = mixed.labeled_centers.clone();
        centers.extend(mixed.unlabeled_centers.iter().cloned());

        let t = Tape::new();
        let out = self.model.forward(&t, images.into_dyn(), &centers)?;
        let probs_l = t.narrow(out.probs, 0, 0, n);
        let probs_u = t.narrow(out.probs, 0, n, n);
        let loss = semi_loss(
            &t,
            probs_l,
            &to_scalar_dyn(&mixed.labeled_targets),
            probs_u,
            &to_scalar_dyn(&mixed.unlabeled_targets),
            tc.lambda_u,
        );
        let value = t.value_scalar(loss).as_f64();
        self.ensure_finite(iter_idx, &[("L_semi", value)])?;
        let grads = t.backward(loss);
        self.ensure_finite_grads(iter_idx, "L_semi", &grads)?;
        let ids = self.model.backbone_ids().to_vec();
        let moved = self.adam.step(&mut self.model.store, &t, &grads, &ids);
        Ok((value, usize::from(moved > 0)))
    }

    fn joint_step(
        &mut self,
        labeled: &[PreparedSample],
        unlabeled: &[(usize, PreparedSample)],
        pseudo: Option<&Array2<f32>>,
        iter_idx: usize,
    ) -> Result<JointOutcome> {
        let tc = self.run.train.clone();
        let n_au = self.run.model.au_count;
        let size = self.run.model.image_size;
        let patch = self.run.model.patch_size();
        let n_l = labeled.len();
        let items: Vec<&PreparedSample> = labeled
            .iter()
            .chain(unlabeled.iter().map(|(_, p)| p))
            .collect();
        let m = items.len();
        let mut images = batch_images::<S>(&items);
        let centers: Vec<Vec<CenterPair>> = items.iter().map(|p| p.centers.clone()).collect();

        let crop_idx: Vec<usize> = if tc.enable_roii {
            (0..m).filter(|i| i % 2 == 1).collect()
        } else {
            Vec::new()
        };
        let crop = if crop_idx.is_empty() {
            None
        } else {
            let mut sub = Array4::<S>::zeros((crop_idx.len(), 3, size, size));
            for (j, &i) in crop_idx.iter().enumerate() {
                sub.index_axis_mut(Axis(0), j).assign(&images.index_axis(Axis(0), i));
            }
            let sub_centers: Vec<Vec<CenterPair>> =
                crop_idx.iter().map(|&i| centers[i].clone()).collect();
            let c = crop_random_au(&sub.into_dyn(), &sub_centers, patch, &mut self.rng);
            let cropped = c
                .images_cropped
                .view()
                .into_dimensionality::<Ix4>()
                .expect("cropped batch is 4-d");
            for (j, &i) in crop_idx.iter().enumerate() {
                images
                    .index_axis_mut(Axis(0), i)
                    .assign(&cropped.index_axis(Axis(0), j));
            }
            Some(c)
        };

        let t = Tape::new();
        let out = self.model.forward(&t, images.into_dyn(), &centers)?;

        let mut targets = Array2::<S>::zeros((m, n_au));
        let mut mask = Array2::<S>::zeros((m, n_au));
        for (i, p) in labeled.iter().enumerate() {
            let l = p.labels.as_ref().ok_or_else(|| {
                Error::Data(format!("subject {}: labeled stream without labels", p.subject_id))
            })?;
            for (au, &v) in l.iter().enumerate() {
                targets[[i, au]] = s(f64::from(v));
                mask[[i, au]] = S::one();
            }
        }
        if let Some(c) = &crop {
            for (j, &i) in crop_idx.iter().enumerate() {
                if i < n_l {
                    mask[[i, c.au[j]]] = S::zero();
                }
            }
        }
        let (l_sup, all_masked) =
            masked_supervised_loss(&t, out.probs, &targets.into_dyn(), &mask.into_dyn());
        if all_masked {
            self.all_masked_warnings += 1;
        }

        let roii = if let Some(c) = &crop {
            let k = crop_idx.len();
            let picks: Vec<(usize, usize)> = crop_idx
                .iter()
                .zip(&c.au)
                .map(|(&i, &au)| (i, au))
                .collect();
            let z_l = gather_tokens_at(&t, out.decoded.decoded_left, &picks);
            let z_r = gather_tokens_at(&t, out.decoded.decoded_right, &picks);
            let fake_l = self.model.generator.apply(&t, &self.model.store, z_l);
            let fake_r = self.model.generator.apply(&t, &self.model.store, z_r);
            let fakes = t.concat(&[fake_l, fake_r], 0);

            let mut reals = ArrayD::<S>::zeros(vec![2 * k, 3, patch, patch]);
            for (j, src) in [&c.left_patches, &c.right_patches].into_iter().enumerate() {
                for bi in 0..k {
                    for ch in 0..3 {
                        for y in 0..patch {
                            for x in 0..patch {
                                reals[[j * k + bi, ch, y, x]] = src[[bi, ch, y, x]];
                            }
                        }
                    }
                }
            }
            let real_var = t.constant(reals.clone());

            let d_real = self.model.disc.apply(&t, &self.model.store, real_var, false);
            let d_fake_det = self
                .model
                .disc
                .apply(&t, &self.model.store, t.detach(fakes), false);
            let (l_adv, _) = adversarial_losses(&t, d_real, d_fake_det);
            let l_d = discriminator_loss(&t, l_adv);

            let mut yhat = Array2::<S>::zeros((2 * k, n_au));
            for (j, &i) in crop_idx.iter().enumerate() {
                for au in 0..n_au {
                    let v = if i < n_l {
                        f64::from(labeled[i].labels.as_ref().expect("checked above")[au])
                    } else {
                        let p = pseudo.ok_or_else(|| {
                            Error::Data("cropped unlabeled items need pseudo labels".into())
                        })?[[i - n_l, au]];
                        f64::from(f64::from(p) >= tc.threshold)
                    };
                    yhat[[j, au]] = s(v);
                    yhat[[k + j, au]] = s(v);
                }
            }
            let yhat = yhat.into_dyn();
            let c_real = self.model.cls.apply(&t, &self.model.store, real_var, false);
            let l_c = classification_loss(&t, c_real, &yhat);

            let d_fake_frozen = self.model.disc.apply(&t, &self.model.store, fakes, true);
            let l_adv_g = generator_adversarial_loss(&t, d_fake_frozen);
            let c_fake_frozen = self.model.cls.apply(&t, &self.model.store, fakes, true);
            let l_c_g = classification_loss(&t, c_fake_frozen, &yhat);
            let l_rec = reconstruction_loss(&t, fakes, &reals);
            let l_g = generator_loss(&t, l_adv_g, l_rec, l_c_g, tc.lambda1, tc.lambda2);
            Some((l_d, l_c, l_g))
        } else {
            None
        };

        let flow_rows: Vec<usize> = if tc.enable_flow {
            (0..m)
                .filter(|&i| items[i].flow.is_some() && !crop_idx.contains(&i))
                .collect()
        } else {
            Vec::new()
        };
        let l_f = if flow_rows.is_empty() {
            None
        } else {
            let pred = self.model.flow.apply(&t, &self.model.store, out.deepest);
            let picked: Vec<Var> = flow_rows.iter().map(|&i| t.narrow(pred, 0, i, 1)).collect();
            let pred_sel = t.concat(&picked, 0);
            let fdim = items[flow_rows[0]].flow.as_ref().expect("filtered").dim();
            let mut gt = Array4::<S>::zeros((flow_rows.len(), fdim.0, fdim.1, fdim.2));
            for (j, &i) in flow_rows.iter().enumerate() {
                gt.index_axis_mut(Axis(0), j)
                    .zip_mut_with(items[i].flow.as_ref().expect("filtered"), |d, &v| {
                        *d = s(f64::from(v))
                    });
            }
            Some(flow_loss(&t, pred_sel, &gt.into_dyn()))
        };

        let zero = t.scalar(S::zero());
        let l_d_var = roii.as_ref().map(|r| r.0).unwrap_or(zero);
        let l_g_var = roii.as_ref().map(|r| r.2).unwrap_or(zero);
        let l_f_var = l_f.unwrap_or(zero);

        let v_sup = t.value_scalar(l_sup).as_f64();
        let v_d = t.value_scalar(l_d_var).as_f64();
        let v_g = t.value_scalar(l_g_var).as_f64();
        let v_f = t.value_scalar(l_f_var).as_f64();
        self.ensure_finite(
            iter_idx,
            &[("L_Sup", v_sup), ("L_D", v_d), ("L_G", v_g), ("L_F", v_f)],
        )?;

        let mut isolation_ok = true;
        let mut d_updates = 0;
        let mut c_updates = 0;
        let frozen_digest = |model: &Model<S>, skip: &[ParamId]| {
            let skip: HashSet<usize> = skip.iter().map(|id| id.index()).collect();
            let rest: Vec<ParamId> = model
                .store
                .ids()
                .filter(|id| !skip.contains(&id.index()))
                .collect();
            model.store.group_digest(&rest)
        };
        if let Some((l_d, l_c, _)) = &roii {
            let grads_d = t.backward(*l_d);
            self.ensure_finite_grads(iter_idx, "L_D", &grads_d)?;
            let before = self
                .check_isolation
                .then(|| frozen_digest(&self.model, self.model.discriminator_ids()));
            if self.check_isolation {
                let allowed = ids_set(&[self.model.discriminator_ids()]);
                isolation_ok &= confined(&self.model, &t, &grads_d, &allowed);
            }
            let ids = self.model.discriminator_ids().to_vec();
            let moved = self.adam.step(&mut self.model.store, &t, &grads_d, &ids);
            d_updates += usize::from(moved > 0);
            if let Some(before) = before {
                isolation_ok &= frozen_digest(&self.model, &ids) == before;
            }

            let grads_c = t.backward(*l_c);
            self.ensure_finite_grads(iter_idx, "L_C", &grads_c)?;
            let before = self
                .check_isolation
                .then(|| frozen_digest(&self.model, self.model.classifier_ids()));
            if self.check_isolation {
                let allowed = ids_set(&[self.model.classifier_ids()]);
                isolation_ok &= confined(&self.model, &t, &grads_c, &allowed);
            }
            let ids = self.model.classifier_ids().to_vec();
            let moved = self.adam.step(&mut self.model.store, &t, &grads_c, &ids);
            c_updates += usize::from(moved > 0);
            if let Some(before) = before {
                isolation_ok &= frozen_digest(&self.model, &ids) == before;
            }
        }

        let l_main = t.add_many(&[l_sup, l_g_var, t.scale(l_f_var, tc.lambda_f)]);
        let grads_main = t.backward(l_main);
        self.ensure_finite_grads(iter_idx, "L_Sup + L_G + lambda_f * L_F", &grads_main)?;
        if self.check_isolation {
            let allowed = ids_set(&[
                self.model.backbone_ids(),
                self.model.generator_ids(),
                self.model.flow_ids(),
            ]);
            isolation_ok &= confined(&self.model, &t, &grads_main, &allowed);
        }
        let b_ids = self.model.backbone_ids().to_vec();
        let g_ids = self.model.generator_ids().to_vec();
        let f_ids = self.model.flow_ids().to_vec();
        let dc_before = self.check_isolation.then(|| {
            let mut dc = self.model.discriminator_ids().to_vec();
            dc.extend_from_slice(self.model.classifier_ids());
            (self.model.store.group_digest(&dc), dc)
        });
        let b_moved = self.adam.step(&mut self.model.store, &t, &grads_main, &b_ids);
        let g_moved = self.adam.step(&mut self.model.store, &t, &grads_main, &g_ids);
        let f_moved = self.adam.step(&mut self.model.store, &t, &grads_main, &f_ids);
        if let Some((before, dc)) = dc_before {
            isolation_ok &= self.model.store.group_digest(&dc) == before;
        }

        Ok(JointOutcome {
            l_sup: v_sup,
            l_d: v_d,
            l_g: v_g,
            l_f: v_f,
            backbone_updates: usize::from(b_moved > 0),
            d_updates,
            c_updates,
            g_updates: usize::from(g_moved > 0),
            f_updates: usize::from(f_moved > 0),
            all_masked,
            isolation_ok,
        })
    }

    /// One full iteration (semi step then joint step) on freshly drawn
    /// batches. Deterministic given the construction seed.
    pub fn step(&mut self) -> Result<StepReport> {
        let tc = self.run.train.clone();
        let iter_idx = self.cur_iter;
        let labeled = self.iter.next_labeled(&self.samples, tc.batch_size)?;
        let unlabeled = if self.iter.unlabeled_count() > 0 {
            self.iter.next_unlabeled_indexed(&self.samples, tc.batch_size)?
        } else {
            Vec::new()
        };

        let pseudo = if !unlabeled.is_empty() && (tc.enable_semi || tc.enable_roii) {
            Some(self.guess_pseudo(&unlabeled)?)
        } else {
            None
        };

        let (l_semi, semi_updates) = if tc.enable_semi && !unlabeled.is_empty() {
            self.semi_step(&labeled, &unlabeled, pseudo.as_ref().expect("guessed"), iter_idx)?
        } else {
            (0.0, 0)
        };

        let joint = self.joint_step(&labeled, &unlabeled, pseudo.as_ref(), iter_idx)?;

        self.cur_iter += 1;
        Ok(StepReport {
            iter: iter_idx,
            l_semi,
            l_sup: joint.l_sup,
            l_d: joint.l_d,
            l_g: joint.l_g,
            l_f: joint.l_f,
            total: l_semi + joint.l_sup + joint.l_d + joint.l_g + tc.lambda_f * joint.l_f,
            backbone_updates: semi_updates + joint.backbone_updates,
            d_updates: joint.d_updates,
            c_updates: joint.c_updates,
            g_updates: joint.g_updates,
            f_updates: joint.f_updates,
            all_masked: joint.all_masked,
            isolation_ok: joint.isolation_ok,
        })
    }

    /// F1 on the labeled part of the training pool (center-crop evaluation).
    pub fn evaluate_train(&self) -> Result<F1Report> {
        let labeled: Vec<Sample> = self
            .samples
            .iter()
            .filter(|s| s.is_labeled)
            .cloned()
            .collect();
        evaluate(&self.model, &labeled, &self.table, self.run.train.threshold)
    }

    /// F1 on the labeled part of the held-out set; `None` when no held-out
    /// sample carries labels.
    pub fn evaluate_heldout(&self) -> Result<Option<F1Report>> {
        let labeled: Vec<Sample> = self
            .heldout
            .iter()
            .filter(|s| s.is_labeled)
            .cloned()
            .collect();
        if labeled.is_empty() {
            return Ok(None);
        }
        evaluate(&self.model, &labeled, &self.table, self.run.train.threshold).map(Some)
    }

    /// Run the configured number of iterations with JSONL metric logging,
    /// periodic evaluation/checkpointing, and optional early stop.
    pub fn fit(&mut self, out_dir: Option<&Path>) -> Result<FitResult> {
        let tc = self.run.train.clone();
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut log = match out_dir {
            Some(dir) => Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("metrics.jsonl"),
            )?)),
            None => None,
        };
        let mut reports = Vec::new();
        let mut evals: Vec<(usize, f64, Option<f64>)> = Vec::new();
        while self.cur_iter < tc.iterations {
            let report = self.step()?;
            let done = report.iter + 1;
            let eval_now = tc.eval_every > 0 && done % tc.eval_every == 0;
            let mut f1_avg = None;
            let mut f1_heldout = None;
            if eval_now {
                let train = self.evaluate_train()?.average;
                f1_heldout = self.evaluate_heldout()?.map(|r| r.average);
                f1_avg = Some(train);
                evals.push((done, train, f1_heldout));
            }
            if let Some(w) = &mut log {
                let mut line = json!({
                    "iter": report.iter,
                    "L_semi": report.l_semi,
                    "L_Sup": report.l_sup,
                    "L_D": report.l_d,
                    "L_G": report.l_g,
                    "L_F": report.l_f,
                });
                if let Some(f1) = f1_avg {
                    line["f1_avg"] = json!(f1);
                    if let Some(h) = f1_heldout {
                        line["f1_heldout"] = json!(h);
                    }
                }
                writeln!(w, "{line}")?;
            }
            reports.push(report);
            if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 {
                if let Some(dir) = out_dir {
                    self.save_checkpoint(&dir.join(format!("ckpt_{done:06}.aurc")))?;
                }
            }
            if eval_now {
                let (_, train, held) = *evals.last().expect("just pushed");
                let train_ok = tc.stop_at_train_f1.is_none_or(|th| train >= th);
                let held_ok = tc
                    .stop_at_heldout_f1
                    .is_none_or(|th| held.is_some_and(|h| h >= th));
                let any_stop = tc.stop_at_train_f1.is_some() || tc.stop_at_heldout_f1.is_some();
                if any_stop && train_ok && held_ok {
                    break;
                }
            }
        }
        if let Some(w) = &mut log {
            w.flush()?;
        }
        if let Some(dir) = out_dir {
            self.save_checkpoint(&dir.join("ckpt_final.aurc"))?;
        }
        if evals.last().map(|e| e.0) != Some(self.cur_iter) {
            let train = self.evaluate_train()?.average;
            let held = self.evaluate_heldout()?.map(|r| r.average);
            evals.push((self.cur_iter, train, held));
        }
        Ok(FitResult {
            reports,
            evals,
            stopped_at: self.cur_iter,
            all_masked_warnings: self.all_masked_warnings,
        })
    }

    /// Serialize parameters, optimizer moments and loop position.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.export_tensors();
        let mut adam_t = serde_json::Map::new();
        for (i, slot) in self.adam.export_state().iter().enumerate() {
            if let Some((m, v, steps)) = slot {
                let name = self.model.store.name(ParamId(i)).to_string();
                tensors.push((format!("adam.{name}.m"), m.mapv(|x| x.as_f64() as f32)));
                tensors.push((format!("adam.{name}.v"), v.mapv(|x| x.as_f64() as f32)));
                adam_t.insert(name, json!(steps));
            }
        }
        let rng_pos = self.rng.get_word_pos();
        let meta = json!({
            "iter": self.cur_iter,
            "iter_state": self.iter.state(),
            "rng_pos_hi": (rng_pos >> 64) as u64,
            "rng_pos_lo": rng_pos as u64,
            "all_masked_warnings": self.all_masked_warnings,
            "adam_t": serde_json::Value::Object(adam_t),
        });
        write_checkpoint(
            path,
            &Checkpoint {
                config_hash: self.run.hash(),
                meta,
                tensors,
            },
        )
    }

    /// Rebuild a trainer mid-run: parameters, optimizer moments, iterator
    /// order and rng positions all restored, so the continuation reproduces
    /// an uninterrupted run bit for bit.
    pub fn resume(
        run: RunConfig,
        samples: Vec<Sample>,
        heldout: Vec<Sample>,
        path: &Path,
    ) -> Result<Self> {
        let mut tr = Self::new(run, samples, heldout)?;
        let ckpt = read_checkpoint(path, Some(&tr.run.hash()))?;
        tr.model.import_tensors(&ckpt.tensors)?;

        let meta = &ckpt.meta;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("meta missing {k}")))
        };
        tr.cur_iter = field("iter")?
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("iter not an integer".into()))? as usize;
        tr.all_masked_warnings = field("all_masked_warnings")?.as_u64().unwrap_or(0) as usize;
        let st: IterState = serde_json::from_value(field("iter_state")?)?;
        tr.iter.restore(&st);
        let hi = field("rng_pos_hi")?.as_u64().unwrap_or(0);
        let lo = field("rng_pos_lo")?.as_u64().unwrap_or(0);
        tr.rng.set_word_pos(((hi as u128) << 64) | lo as u128);

        let adam_t = field("adam_t")?;
        let mut slots = Vec::with_capacity(tr.model.store.len());
        for id in tr.model.store.ids().collect::<Vec<_>>() {
            let name = tr.model.store.name(id).to_string();
            let m = ckpt.tensors.iter().find(|(n, _)| *n == format!("adam.{name}.m"));
            let v = ckpt.tensors.iter().find(|(n, _)| *n == format!("adam.{name}.v"));
            let steps = adam_t.get(&name).and_then(|s| s.as_u64());
            slots.push(match (m, v, steps) {
                (Some((_, m)), Some((_, v)), Some(steps)) => Some((
                    m.mapv(|x| s::<S>(f64::from(x))),
                    v.mapv(|x| s::<S>(f64::from(x))),
                    steps,
                )),
                _ => None,
            });
        }
        tr.adam.import_state(slots);
        Ok(tr)
    }
}
