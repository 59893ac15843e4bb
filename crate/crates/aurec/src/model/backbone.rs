//! Convolutional feature extractor: an 18-layer residual trunk with group
//! normalization, a top-down multi-scale fusion to a stride-4 map, and the
//! per-AU private RoI branches that turn 6x6 map windows into tokens.

use rand::Rng;

use super::layers::{Conv, Norm};
use crate::config::ModelConfig;
use crate::nn::{ParamStore, Scalar, Tape, Var};

pub struct BasicBlock {
    conv1: Conv,
    n1: Norm,
    conv2: Conv,
    n2: Norm,
    down: Option<(Conv, Norm)>,
}

impl BasicBlock {
    fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false);
        let n1 = Norm::new(store, &format!("{name}.n1"), cout);
        let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false);
        let n2 = Norm::new(store, &format!("{name}.n2"), cout);
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv::new(store, rng, &format!("{name}.down"), cin, cout, 1, stride, 0, false),
                Norm::new(store, &format!("{name}.down_n"), cout),
            )
        });
        BasicBlock {
            conv1,
            n1,
            conv2,
            n2,
            down,
        }
    }

    fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let mut y = self.conv1.apply(t, store, x, false);
        y = self.n1.apply(t, store, y, false);
        y = t.relu(y);
        y = self.conv2.apply(t, store, y, false);
        y = self.n2.apply(t, store, y, false);
        let skip = match &self.down {
            Some((c, n)) => {
                let d = c.apply(t, store, x, false);
                n.apply(t, store, d, false)
            }
            None => x,
        };
        t.relu(t.add(y, skip))
    }
}

/// Stage outputs at strides 4, 8, 16 and 32.
pub struct TrunkFeatures {
    pub c1: Var,
    pub c2: Var,
    pub c3: Var,
    pub c4: Var,
}

pub struct Trunk {
    stem: Conv,
    stem_n: Norm,
    stages: Vec<Vec<BasicBlock>>,
}

impl Trunk {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let widths = [cfg.ch(64), cfg.ch(128), cfg.ch(256), cfg.ch(512)];
        let stem = Conv::new(store, rng, "trunk.stem", 3, widths[0], 7, 2, 3, false);
        let stem_n = Norm::new(store, "trunk.stem_n", widths[0]);
        let mut stages = Vec::new();
        let mut cin = widths[0];
        for (si, &cout) in widths.iter().enumerate() {
            let stride = if si == 0 { 1 } else { 2 };
            let mut blocks = Vec::new();
            blocks.push(BasicBlock::new(
                store,
                rng,
                &format!("trunk.s{si}.b0"),
                cin,
                cout,
                stride,
            ));
            blocks.push(BasicBlock::new(
                store,
                rng,
                &format!("trunk.s{si}.b1"),
                cout,
                cout,
                1,
            ));
            stages.push(blocks);
            cin = cout;
        }
        Trunk {
            stem,
            stem_n,
            stages,
        }
    }

    pub fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, images: Var) -> TrunkFeatures {
        let mut x = self.stem.apply(t, store, images, false);
        x = self.stem_n.apply(t, store, x, false);
        x = t.relu(x);
        x = t.max_pool_3x3_s2(x);
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.apply(t, store, x);
            }
            feats.push(x);
        }
        TrunkFeatures {
            c1: feats[0],
            c2: feats[1],
            c3: feats[2],
            c4: feats[3],
        }
    }
}

/// Top-down fusion: project each stage to the fused width with 1x1
/// convolutions, upsample and add down to the stride-4 grid.
pub struct Fusion {
    proj: Vec<Conv>,
}

impl Fusion {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let cf = cfg.ch(64);
        let widths = [cfg.ch(64), cfg.ch(128), cfg.ch(256), cfg.ch(512)];
        let proj = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| Conv::new(store, rng, &format!("fuse.p{i}"), w, cf, 1, 1, 0, true))
            .collect();
        Fusion { proj }
    }

    pub fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, f: &TrunkFeatures) -> Var {
        let p4 = self.proj[3].apply(t, store, f.c4, false);
        let p3 = self.proj[2].apply(t, store, f.c3, false);
        let p3 = t.add(p3, t.upsample2x(p4));
        let p2 = self.proj[1].apply(t, store, f.c2, false);
        let p2 = t.add(p2, t.upsample2x(p3));
        let p1 = self.proj[0].apply(t, store, f.c1, false);
        t.add(p1, t.upsample2x(p2))
    }
}

/// Private two-convolution branch of one AU, shared by its left and right
/// windows. Pooling the 6x6 window yields the d-dimensional token.
pub struct RoiBranch {
    conv1: Conv,
    n1: Norm,
    conv2: Conv,
}

impl RoiBranch {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        au: usize,
        cfg: &ModelConfig,
    ) -> Self {
        let cf = cfg.ch(64);
        let hidden = cfg.ch(352);
        let conv1 = Conv::new(store, rng, &format!("roi.{au}.conv1"), cf, hidden, 3, 1, 1, false);
        let n1 = Norm::new(store, &format!("roi.{au}.n1"), hidden);
        let conv2 = Conv::new(store, rng, &format!("roi.{au}.conv2"), hidden, cfg.embed_dim, 3, 1, 1, true);
        RoiBranch { conv1, n1, conv2 }
    }

    /// `windows` is `[B, cf, 6, 6]`; the result is the `[B, d]` token batch.
    pub fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, windows: Var) -> Var {
        let mut x = self.conv1.apply(t, store, windows, false);
        x = self.n1.apply(t, store, x, false);
        x = t.relu(x);
        x = self.conv2.apply(t, store, x, false);
        x = t.relu(x);
        t.global_avg_pool(x)
    }
}
