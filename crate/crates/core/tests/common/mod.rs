#![allow(dead_code)]

use nalgebra::{Matrix2, Vector2};

use flotapinn::autodiff::Tape;
use flotapinn::data::FlotationRecord;
use flotapinn::physics::{
    residual_bidirectional, residual_mass_balance, DecodedLambda, ExogenousInputs, LambdaVars, PhysicsKind,
    StateOutputs,
};
use flotapinn::simulator::{CellDrive, TrueParams};

/// Closed-form state of `ẋ = A·x + b` after `t` minutes of constant drive.
pub fn expm_solution(p: &TrueParams, d: &CellDrive, x0: [f64; 2], t: f64) -> [f64; 2] {
    let (a, b) = d.linear_system(p);
    let a = Matrix2::new(a[0][0], a[0][1], a[1][0], a[1][1]);
    let b = Vector2::new(b[0], b[1]);
    let e = (a * t).exp();
    let ainv = a.try_inverse().expect("stable cell matrix is invertible");
    let x = e * Vector2::new(x0[0], x0[1]) + ainv * (e - Matrix2::identity()) * b;
    [x[0], x[1]]
}

pub fn bidirectional_lambda(p: &TrueParams) -> DecodedLambda {
    DecodedLambda {
        v_p: p.v_p,
        v_f: p.v_f,
        alpha_f: Some(p.alpha_f),
        alpha_p: Some(p.alpha_p),
    }
}

/// `(max |f_bidirectional|, max |f_mass_balance|)` with the given states
/// and derivatives at each record.
pub fn max_residuals(p: &TrueParams, samples: &[(FlotationRecord, [f64; 2])]) -> (f64, f64) {
    let mut tape = Tape::new();
    let mb = DecodedLambda {
        alpha_f: None,
        alpha_p: None,
        ..bidirectional_lambda(p)
    };
    let (mut bi_max, mut mb_max) = (0.0f64, 0.0f64);
    for (rec, deriv) in samples {
        tape.clear();
        let lam_bi = LambdaVars::constants(&mut tape, PhysicsKind::Bidirectional, &bidirectional_lambda(p)).unwrap();
        let lam_mb = LambdaVars::constants(&mut tape, PhysicsKind::MassBalance, &mb).unwrap();
        let st = StateOutputs {
            c_p: tape.constant(rec.0[12]),
            c_f: tape.constant(rec.0[13]),
            dc_p_dt: tape.constant(deriv[0]),
            dc_f_dt: tape.constant(deriv[1]),
        };
        let inputs = ExogenousInputs::from_record(rec);
        let (a, b) = residual_bidirectional(&mut tape, &inputs, &st, &lam_bi);
        let m = residual_mass_balance(&mut tape, &inputs, &st, &lam_mb);
        bi_max = bi_max.max(tape.value(a).abs()).max(tape.value(b).abs());
        mb_max = mb_max.max(tape.value(m).abs());
    }
    (bi_max, mb_max)
}

/// Reference quartiles by direct order-statistic selection.
pub fn reference_quartile(values: &[f64], p: f64) -> f64 {
    let n = values.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let pick = |k: usize| {
        let mut v = values.to_vec();
        let (_, x, _) = v.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).unwrap());
        *x
    };
    let a = pick(lo);
    if lo + 1 >= n {
        return a;
    }
    let b = pick(lo + 1);
    a + (h - lo as f64) * (b - a)
}

/// Central difference of `f` at `x` in coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] -= 2.0 * h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Relative error of two gradient vectors in the Euclidean norm.
pub fn vector_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}
