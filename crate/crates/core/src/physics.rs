//! Flotation residuals and the composite physics-informed loss.
//!
//! All flows enter the residuals in m³/min (the data carries m³/h), so every
//! rate term is in g/(t·min), matching time stamps in minutes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softplus, softplus_inverse, AutodiffError, LeafBlock, Tape, Var};
use crate::data::{Column, FlotationRecord};
use crate::nn::ConstrainedVolume;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("{kind:?} residual has {expected} components, got {got}")]
    ResidualArity {
        kind: PhysicsKind,
        expected: usize,
        got: usize,
    },
    #[error("batch has {targets} targets but {predictions} predictions")]
    BatchMismatch { targets: usize, predictions: usize },
    #[error("autodiff: {0}")]
    Autodiff(#[from] AutodiffError),
    #[error("raw parameter vector has {got} entries, {kind:?} needs {expected}")]
    RawLength {
        kind: PhysicsKind,
        expected: usize,
        got: usize,
    },
}

/// Conversion from m³/h to m³/min.
pub const PER_HOUR_TO_PER_MINUTE: f64 = 1.0 / 60.0;

/// Exogenous measurements of one sample, in the units of the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExogenousInputs {
    pub t: f64,
    pub q_air: f64,
    pub h: f64,
    pub c_s: f64,
    pub r_s_feed: f64,
    pub c_feed: f64,
    pub r_au_feed: f64,
    pub p80: f64,
    pub q_feed: f64,
    pub f_s_feed: f64,
    pub q_t: f64,
    pub q_c: f64,
}

impl ExogenousInputs {
    pub fn from_record(r: &FlotationRecord) -> Self {
        ExogenousInputs {
            t: r.get(Column::T),
            q_air: r.get(Column::QAir),
            h: r.get(Column::H),
            c_s: r.get(Column::Cs),
            r_s_feed: r.get(Column::RsFeed),
            c_feed: r.get(Column::CFeed),
            r_au_feed: r.get(Column::RAuFeed),
            p80: r.get(Column::P80),
            q_feed: r.get(Column::QFeed),
            f_s_feed: r.get(Column::FsFeed),
            q_t: r.get(Column::Qt),
            q_c: r.get(Column::Qc),
        }
    }

    /// Flows converted to m³/min: `(Q_air, Q_feed, Q_t, Q_c)`.
    pub fn flows_per_minute(&self) -> Flows {
        Flows {
            air: self.q_air * PER_HOUR_TO_PER_MINUTE,
            feed: self.q_feed * PER_HOUR_TO_PER_MINUTE,
            tail: self.q_t * PER_HOUR_TO_PER_MINUTE,
            conc: self.q_c * PER_HOUR_TO_PER_MINUTE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Flows {
    pub air: f64,
    pub feed: f64,
    pub tail: f64,
    pub conc: f64,
}

/// Network outputs and their time tangents from the same forward pass.
#[derive(Clone, Copy, Debug)]
pub struct StateOutputs {
    pub c_p: Var,
    pub c_f: Var,
    pub dc_p_dt: Var,
    pub dc_f_dt: Var,
}

impl StateOutputs {
    /// Splits `(C_p, C_f)` outputs carrying time tangents into values and
    /// derivative vars.
    pub fn from_outputs(tape: &mut Tape, c_p: Var, c_f: Var) -> Self {
        let dc_p_dt = tape.tangent_var(c_p);
        let dc_f_dt = tape.tangent_var(c_f);
        StateOutputs {
            c_p: c_p.detached(),
            c_f: c_f.detached(),
            dc_p_dt,
            dc_f_dt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhysicsKind {
    Bidirectional,
    Unidirectional,
    MassBalance,
}

impl PhysicsKind {
    pub fn residual_arity(self) -> usize {
        match self {
            PhysicsKind::MassBalance => 1,
            _ => 2,
        }
    }

    pub fn raw_len(self) -> usize {
        match self {
            PhysicsKind::Bidirectional => 3,
            _ => 1,
        }
    }
}

/// Learnable physical parameters in unconstrained form.
///
/// Volumes go through [`ConstrainedVolume`]; the rate coefficients
/// `α_f`, `α_p` (per m³/min of air) through softplus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub kind: PhysicsKind,
    pub volume: ConstrainedVolume,
    pub alpha_f_raw: f64,
    pub alpha_p_raw: f64,
}

/// Physical parameter values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedLambda {
    pub v_p: f64,
    pub v_f: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_p: Option<f64>,
}

impl PhysicsParams {
    /// Volume at the midpoint of its range; rate coefficients at `alpha_init`.
    pub fn new(kind: PhysicsKind, alpha_init: f64) -> Self {
        let raw = softplus_inverse(alpha_init);
        PhysicsParams {
            kind,
            volume: ConstrainedVolume::new(0.0),
            alpha_f_raw: raw,
            alpha_p_raw: raw,
        }
    }

    pub fn raw(&self) -> Vec<f64> {
        match self.kind {
            PhysicsKind::Bidirectional => vec![self.volume.raw, self.alpha_f_raw, self.alpha_p_raw],
            _ => vec![self.volume.raw],
        }
    }

    pub fn set_raw(&mut self, raw: &[f64]) -> Result<(), PhysicsError> {
        if raw.len() != self.kind.raw_len() {
            return Err(PhysicsError::RawLength {
                kind: self.kind,
                expected: self.kind.raw_len(),
                got: raw.len(),
            });
        }
        self.volume.raw = raw[0];
        if self.kind == PhysicsKind::Bidirectional {
            self.alpha_f_raw = raw[1];
            self.alpha_p_raw = raw[2];
        }
        Ok(())
    }

    pub fn decode(&self) -> DecodedLambda {
        let (v_f, v_p) = self.volume.volumes();
        let bidir = self.kind == PhysicsKind::Bidirectional;
        DecodedLambda {
            v_p,
            v_f,
            alpha_f: bidir.then(|| softplus(self.alpha_f_raw)),
            alpha_p: bidir.then(|| softplus(self.alpha_p_raw)),
        }
    }

    /// Lifts the raw parameters and decodes them on the tape.
    pub fn bind(&self, tape: &mut Tape) -> (LeafBlock, LambdaVars) {
        let block = tape.lift_block(&self.raw());
        let vars = self.decode_taped(tape, block);
        (block, vars)
    }

    pub fn decode_taped(&self, tape: &mut Tape, block: LeafBlock) -> LambdaVars {
        let (v_f, v_p) = self.volume.volumes_taped(tape, block.var(0));
        let (alpha_f, alpha_p) = if self.kind == PhysicsKind::Bidirectional {
            (
                Some(tape.softplus(block.var(1))),
                Some(tape.softplus(block.var(2))),
            )
        } else {
            (None, None)
        };
        LambdaVars::new(tape, self.kind, v_p, v_f, alpha_f, alpha_p)
            .expect("constrained volumes are strictly positive")
    }
}

/// Decoded parameters on a tape, with the shared reciprocals precomputed.
#[derive(Clone, Copy, Debug)]
pub struct LambdaVars {
    pub kind: PhysicsKind,
    pub v_p: Var,
    pub v_f: Var,
    pub alpha_f: Option<Var>,
    pub alpha_p: Option<Var>,
    inv_v_p: Var,
    inv_v_f: Var,
}

impl LambdaVars {
    pub fn new(
        tape: &mut Tape,
        kind: PhysicsKind,
        v_p: Var,
        v_f: Var,
        alpha_f: Option<Var>,
        alpha_p: Option<Var>,
    ) -> Result<Self, PhysicsError> {
        let one = tape.constant(1.0);
        let inv_v_p = tape.div(one, v_p)?;
        let inv_v_f = tape.div(one, v_f)?;
        Ok(LambdaVars {
            kind,
            v_p,
            v_f,
            alpha_f,
            alpha_p,
            inv_v_p,
            inv_v_f,
        })
    }

    /// Constant parameters, for evaluating residuals at known values.
    pub fn constants(tape: &mut Tape, kind: PhysicsKind, lambda: &DecodedLambda) -> Result<Self, PhysicsError> {
        let v_p = tape.constant(lambda.v_p);
        let v_f = tape.constant(lambda.v_f);
        let alpha_f = lambda.alpha_f.map(|a| tape.constant(a));
        let alpha_p = lambda.alpha_p.map(|a| tape.constant(a));
        LambdaVars::new(tape, kind, v_p, v_f, alpha_f, alpha_p)
    }

    fn expect_kind(&self, kind: PhysicsKind) {
        assert_eq!(self.kind, kind, "lambda set built for a different model");
    }
}

/// Pulp and froth residuals of the two-phase model with attachment and
/// drainage between phases.
pub fn residual_bidirectional(
    tape: &mut Tape,
    inputs: &ExogenousInputs,
    st: &StateOutputs,
    lambda: &LambdaVars,
) -> (Var, Var) {
    lambda.expect_kind(PhysicsKind::Bidirectional);
    let q = inputs.flows_per_minute();
    let alpha_f = lambda.alpha_f.expect("bidirectional has alpha_f");
    let alpha_p = lambda.alpha_p.expect("bidirectional has alpha_p");

    // f_Cp = dCp/dt − C_feed·Q_feed/V_p − α_f·Q_air·C_f·V_f/V_p + (α_p·Q_air + Q_t/V_p)·C_p
    let af_cf = tape.mul(alpha_f, st.c_f);
    let af_cf_vf = tape.mul(af_cf, lambda.v_f);
    let drainage = tape.mul(af_cf_vf, lambda.inv_v_p);
    let ap_cp = tape.mul(alpha_p, st.c_p);
    let cp_over_vp = tape.mul(st.c_p, lambda.inv_v_p);
    let f_cp = tape.linear(
        &[
            (st.dc_p_dt, 1.0),
            (lambda.inv_v_p, -inputs.c_feed * q.feed),
            (drainage, -q.air),
            (ap_cp, q.air),
            (cp_over_vp, q.tail),
        ],
        0.0,
    );

    // f_Cf = dCf/dt − α_p·Q_air·C_p·V_p/V_f + (α_f·Q_air + Q_c/V_f)·C_f
    let ap_cp_vp = tape.mul(ap_cp, lambda.v_p);
    let attachment = tape.mul(ap_cp_vp, lambda.inv_v_f);
    let cf_over_vf = tape.mul(st.c_f, lambda.inv_v_f);
    let f_cf = tape.linear(
        &[
            (st.dc_f_dt, 1.0),
            (attachment, -q.air),
            (af_cf, q.air),
            (cf_over_vf, q.conc),
        ],
        0.0,
    );
    (f_cp, f_cf)
}

/// Residuals of the pulp-to-froth model driven by a flotation rate `r`.
pub fn residual_unidirectional(
    tape: &mut Tape,
    inputs: &ExogenousInputs,
    st: &StateOutputs,
    lambda: &LambdaVars,
    r: Var,
) -> (Var, Var) {
    lambda.expect_kind(PhysicsKind::Unidirectional);
    let q = inputs.flows_per_minute();
    let cp_over_vp = tape.mul(st.c_p, lambda.inv_v_p);
    let r_over_vp = tape.mul(r, lambda.inv_v_p);
    let f_cp = tape.linear(
        &[
            (st.dc_p_dt, 1.0),
            (lambda.inv_v_p, -inputs.c_feed * q.feed),
            (cp_over_vp, q.tail),
            (r_over_vp, 1.0),
        ],
        0.0,
    );
    let cf_over_vf = tape.mul(st.c_f, lambda.inv_v_f);
    let r_over_vf = tape.mul(r, lambda.inv_v_f);
    let f_cf = tape.linear(
        &[(st.dc_f_dt, 1.0), (cf_over_vf, q.conc), (r_over_vf, -1.0)],
        0.0,
    );
    (f_cp, f_cf)
}

/// Froth residual of the overall mineral mass balance.
pub fn residual_mass_balance(
    tape: &mut Tape,
    inputs: &ExogenousInputs,
    st: &StateOutputs,
    lambda: &LambdaVars,
) -> Var {
    lambda.expect_kind(PhysicsKind::MassBalance);
    let q = inputs.flows_per_minute();
    // f = dCf/dt − Q_feed·C_feed/V_f + Q_c·C_f/V_f + Q_t·C_p/V_f + dCp/dt·V_p/V_f
    let cf_over_vf = tape.mul(st.c_f, lambda.inv_v_f);
    let cp_over_vf = tape.mul(st.c_p, lambda.inv_v_f);
    let dcp_vp = tape.mul(st.dc_p_dt, lambda.v_p);
    let dcp_vp_over_vf = tape.mul(dcp_vp, lambda.inv_v_f);
    tape.linear(
        &[
            (st.dc_f_dt, 1.0),
            (lambda.inv_v_f, -q.feed * inputs.c_feed),
            (cf_over_vf, q.conc),
            (cp_over_vf, q.tail),
            (dcp_vp_over_vf, 1.0),
        ],
        0.0,
    )
}

/// The two halves of a composite loss and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mse_u: Var,
    pub mse_f: Option<Var>,
}

/// `(1/n)·Σ‖u − uᵒ‖²` plus, when residuals are given, `(1/n)·Σ‖f‖²`, with an
/// explicit normalizer so a minibatch may be evaluated in shards.
pub fn composite_loss(
    tape: &mut Tape,
    targets: &[[f64; 2]],
    predictions: &[[Var; 2]],
    residuals: Option<(&[Vec<Var>], PhysicsKind)>,
    normalizer: usize,
) -> Result<LossTerms, PhysicsError> {
    if targets.is_empty() || normalizer == 0 {
        return Err(PhysicsError::EmptyBatch);
    }
    if targets.len() != predictions.len() {
        return Err(PhysicsError::BatchMismatch {
            targets: targets.len(),
            predictions: predictions.len(),
        });
    }
    let k = 1.0 / normalizer as f64;
    let mut sq = Vec::with_capacity(2 * targets.len());
    for (obs, pred) in targets.iter().zip(predictions) {
        for j in 0..2 {
            let d = tape.offset(pred[j], -obs[j]);
            sq.push((tape.square(d), k));
        }
    }
    let mse_u = tape.linear(&sq, 0.0);
    let mse_f = match residuals {
        None => None,
        Some((res, kind)) => {
            if res.len() != targets.len() {
                return Err(PhysicsError::BatchMismatch {
                    targets: targets.len(),
                    predictions: res.len(),
                });
            }
            let mut rsq = Vec::with_capacity(2 * res.len());
            for f in res {
                if f.len() != kind.residual_arity() {
                    return Err(PhysicsError::ResidualArity {
                        kind,
                        expected: kind.residual_arity(),
                        got: f.len(),
                    });
                }
                for &c in f {
                    rsq.push((tape.square(c), k));
                }
            }
            Some(tape.linear(&rsq, 0.0))
        }
    };
    let total = match mse_f {
        Some(f) => tape.add(mse_u, f),
        None => mse_u,
    };
    Ok(LossTerms { total, mse_u, mse_f })
}

/// `L = MSE_u + MSE_f` over one batch whose collocation points are its data points.
pub fn pinn_loss(
    tape: &mut Tape,
    targets: &[[f64; 2]],
    predictions: &[[Var; 2]],
    residuals: &[Vec<Var>],
    kind: PhysicsKind,
) -> Result<Var, PhysicsError> {
    composite_loss(tape, targets, predictions, Some((residuals, kind)), targets.len()).map(|t| t.total)
}
