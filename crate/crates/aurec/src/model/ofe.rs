//! Single-image optical-flow estimation head: two transposed convolutions
//! lift the deepest stage from stride 32 to the stride-8 flow grid.

use ndarray::ArrayD;
use rand::Rng;

use super::layers::{ConvT, Norm};
use crate::config::ModelConfig;
use crate::nn::{ParamStore, Scalar, Tape, Var};

pub struct FlowHead {
    up1: ConvT,
    n1: Norm,
    up2: ConvT,
}

impl FlowHead {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let c = cfg.ch(512);
        FlowHead {
            up1: ConvT::new(store, rng, "flow.up1", c, c, 4, 2, 1, false),
            n1: Norm::new(store, "flow.n1", c),
            up2: ConvT::new(store, rng, "flow.up2", c, 2, 4, 2, 1, true),
        }
    }

    /// `deepest` is `[B, 512w, S/32, S/32]`; the result is `[B, 2, S/8, S/8]`
    /// with the u component leading.
    pub fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, deepest: Var) -> Var {
        let mut x = self.up1.apply(t, store, deepest, false);
        x = self.n1.apply(t, store, x, false);
        x = t.relu(x);
        self.up2.apply(t, store, x, false)
    }
}

/// `L_F`: mean absolute difference between predicted and reference flow on
/// the same grid. Samples without a flow target are excluded before this
/// call; the trainer selects the contributing sub-batch.
pub fn flow_loss<S: Scalar>(t: &Tape<S>, predicted: Var, reference: &ArrayD<S>) -> Var {
    t.l1_mean(predicted, reference, None)
}
