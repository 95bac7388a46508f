//! Underwater image formation.
//!
//! An observed underwater pixel is modeled as scene radiance attenuated by
//! a direct transmission map, plus ambient background light leaking in
//! through a backscatter transmission map:
//!
//! ```text
//! I = J * T_D + (1 - T_B) * A        (element-wise, per channel)
//! ```
//!
//! This module holds the component containers, the range-mapping applied to
//! raw network outputs, the compositor and its analytic gradients, and tape
//! variants so the same formula drives training.

use ndarray::{Array1, Array3};

use crate::autodiff::{Tape, Var};
use crate::{Result, UwError};

/// Lower bound enforced on transmission values so their logarithms (used by
/// the transmission-consistency loss) stay finite: |ln T| <= ~9.2.
pub const EPSILON_T: f64 = 1e-4;

/// Largest admissible log-variance for the background-light encoder —
/// exp(20) is already ~4.9e8, anything above signals divergence.
pub const MAX_LOG_VAR: f64 = 20.0;

/// Disentangled restoration components for one `p x p` patch, stored
/// `[p, p, 3]`: scene radiance `J` in `[0,1]` and the two transmission
/// maps in `[EPSILON_T, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentPatch {
    pub j: Array3<f64>,
    pub t_d: Array3<f64>,
    pub t_b: Array3<f64>,
}

impl ComponentPatch {
    /// Checks shapes agree and every value is finite and inside its range.
    pub fn validate(&self) -> Result<()> {
        if self.j.dim() != self.t_d.dim() || self.j.dim() != self.t_b.dim() {
            return Err(UwError::Shape(format!(
                "component patches disagree: J {:?}, T_D {:?}, T_B {:?}",
                self.j.dim(),
                self.t_d.dim(),
                self.t_b.dim()
            )));
        }
        check_range("scene radiance J", &self.j, 0.0, 1.0)?;
        check_range("direct transmission T_D", &self.t_d, EPSILON_T, 1.0)?;
        check_range("backscatter transmission T_B", &self.t_b, EPSILON_T, 1.0)?;
        Ok(())
    }
}

/// Global background light estimate: a spatial `[H, W, 3]` ambient color
/// map plus the latent statistics it was decoded from.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundLight {
    pub a: Array3<f64>,
    pub mu: Array1<f64>,
    pub log_var: Array1<f64>,
    /// Sampled latent the map was decoded from (equals `mu` in eval mode).
    pub z: Array1<f64>,
}

impl BackgroundLight {
    pub fn validate(&self) -> Result<()> {
        check_range("background light A", &self.a, 0.0, 1.0)?;
        let n = self.mu.len();
        if n == 0 || self.log_var.len() != n || self.z.len() != n {
            return Err(UwError::Shape(format!(
                "latent vectors disagree: mu {}, log_var {}, z {}",
                n,
                self.log_var.len(),
                self.z.len()
            )));
        }
        for (name, v) in [("mu", &self.mu), ("log_var", &self.log_var), ("z", &self.z)] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(UwError::Render(format!(
                    "background-light latent {name} contains a non-finite value"
                )));
            }
        }
        if self.log_var.iter().any(|&x| x > MAX_LOG_VAR) {
            return Err(UwError::Render(format!(
                "background-light log-variance exceeds {MAX_LOG_VAR}"
            )));
        }
        Ok(())
    }
}

fn check_range(name: &str, arr: &Array3<f64>, lo: f64, hi: f64) -> Result<()> {
    for &v in arr.iter() {
        if !v.is_finite() || v < lo || v > hi {
            return Err(UwError::Render(format!(
                "{name} value {v} outside [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

/// Numerically stable logistic function.
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps unconstrained network outputs into valid components: radiance via
/// a plain logistic, transmissions via a logistic rescaled into
/// `[EPSILON_T, 1]` so they never collapse to exactly zero.
pub fn map_raw_to_components(
    raw_j: &Array3<f64>,
    raw_td: &Array3<f64>,
    raw_tb: &Array3<f64>,
) -> Result<ComponentPatch> {
    if raw_j.dim() != raw_td.dim() || raw_j.dim() != raw_tb.dim() {
        return Err(UwError::Shape(format!(
            "raw component shapes disagree: {:?}, {:?}, {:?}",
            raw_j.dim(),
            raw_td.dim(),
            raw_tb.dim()
        )));
    }
    let squash_t = |x: &f64| EPSILON_T + (1.0 - EPSILON_T) * stable_sigmoid(*x);
    Ok(ComponentPatch {
        j: raw_j.mapv(stable_sigmoid),
        t_d: raw_td.map(squash_t),
        t_b: raw_tb.map(squash_t),
    })
}

/// Composes an observed patch from its components and a cropped ambient
/// patch: `I = J * T_D + (1 - T_B) * A`.
///
/// Inputs are validated against their invariant ranges (a violation means
/// an upstream activation bug).  The output is *not* clamped: when direct
/// transmission exceeds backscatter transmission the sum can exceed 1
/// (e.g. `J = T_D = A = 1`, `T_B = EPSILON_T` gives `~2`); in the
/// attenuating regime `T_D <= T_B` the output provably stays in `[0,1]`.
pub fn compose(components: &ComponentPatch, a_patch: &Array3<f64>) -> Result<Array3<f64>> {
    components.validate()?;
    if a_patch.dim() != components.j.dim() {
        return Err(UwError::Shape(format!(
            "ambient patch shape {:?} does not match components {:?}",
            a_patch.dim(),
            components.j.dim()
        )));
    }
    check_range("ambient light A", a_patch, 0.0, 1.0)?;
    Ok(&components.j * &components.t_d + (1.0 - &components.t_b) * a_patch)
}

/// Gradients of [`compose`] with respect to all four inputs, each already
/// multiplied by the upstream gradient.
#[derive(Debug, Clone)]
pub struct ComposeGradients {
    pub d_j: Array3<f64>,
    pub d_t_d: Array3<f64>,
    pub d_t_b: Array3<f64>,
    pub d_a: Array3<f64>,
}

/// Analytic differentiation of the compositor: `dI/dJ = T_D`,
/// `dI/dT_D = J`, `dI/dT_B = -A`, `dI/dA = 1 - T_B`, all element-wise
/// times `upstream`.
pub fn compose_gradients(
    components: &ComponentPatch,
    a_patch: &Array3<f64>,
    upstream: &Array3<f64>,
) -> Result<ComposeGradients> {
    components.validate()?;
    if a_patch.dim() != components.j.dim() || upstream.dim() != components.j.dim() {
        return Err(UwError::Shape(format!(
            "gradient shapes disagree: components {:?}, A {:?}, upstream {:?}",
            components.j.dim(),
            a_patch.dim(),
            upstream.dim()
        )));
    }
    check_range("ambient light A", a_patch, 0.0, 1.0)?;
    Ok(ComposeGradients {
        d_j: &components.t_d * upstream,
        d_t_d: &components.j * upstream,
        d_t_b: -(a_patch * upstream),
        d_a: (1.0 - &components.t_b) * upstream,
    })
}

/// Extracts the `[p, p, 3]` window of a spatial map at `(y0, x0)`.
pub fn crop_map(map: &Array3<f64>, y0: usize, x0: usize, p: usize) -> Result<Array3<f64>> {
    let (h, w, c) = map.dim();
    if y0 + p > h || x0 + p > w {
        return Err(UwError::Shape(format!(
            "crop {p}x{p} at ({y0}, {x0}) exceeds map {h}x{w}"
        )));
    }
    Ok(map
        .slice(ndarray::s![y0..y0 + p, x0..x0 + p, 0..c])
        .to_owned())
}

/// Tape version of [`map_raw_to_components`]; operands may use any layout
/// as long as downstream ops agree.
pub fn map_raw_on_tape(tape: &mut Tape, raw_j: Var, raw_td: Var, raw_tb: Var) -> (Var, Var, Var) {
    let j = tape.sigmoid(raw_j);
    let squash = |raw: Var, tape: &mut Tape| {
        let s = tape.sigmoid(raw);
        let scaled = tape.scale(s, 1.0 - EPSILON_T);
        tape.add_const(scaled, EPSILON_T)
    };
    let t_d = squash(raw_td, tape);
    let t_b = squash(raw_tb, tape);
    (j, t_d, t_b)
}

/// Tape version of [`compose`]: all four operands must share one shape.
/// Range checking is the caller's concern (tape inputs come straight from
/// the range-mapping above).
pub fn compose_on_tape(tape: &mut Tape, j: Var, t_d: Var, t_b: Var, a: Var) -> Var {
    let direct = tape.mul(j, t_d);
    let neg_tb = tape.scale(t_b, -1.0);
    let one_minus_tb = tape.add_const(neg_tb, 1.0);
    let back = tape.mul(one_minus_tb, a);
    tape.add(direct, back)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_patch(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Array3<f64> {
        Array::from_shape_fn((4, 4, 3), |_| rng.random_range(lo..hi))
    }

    fn random_components(rng: &mut ChaCha8Rng) -> ComponentPatch {
        ComponentPatch {
            j: random_patch(rng, 0.1, 0.9),
            t_d: random_patch(rng, 0.1, 0.9),
            t_b: random_patch(rng, 0.1, 0.9),
        }
    }

    #[test]
    fn zero_raw_outputs_map_to_midpoints() {
        let zeros = Array3::<f64>::zeros((2, 2, 3));
        let c = map_raw_to_components(&zeros, &zeros, &zeros).unwrap();
        for &v in c.j.iter() {
            assert_eq!(v, 0.5);
        }
        let expected_t = EPSILON_T + (1.0 - EPSILON_T) * 0.5;
        for &v in c.t_d.iter().chain(c.t_b.iter()) {
            assert!((v - expected_t).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_raw_outputs_reach_the_bounds() {
        let big = Array3::<f64>::from_elem((1, 1, 3), 1e4);
        let c = map_raw_to_components(&big, &big, &big).unwrap();
        assert!(c.j.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(c.t_d.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let c = map_raw_to_components(&(-&big), &(-&big), &(-&big)).unwrap();
        assert!(c.j.iter().all(|&v| v < 1e-12));
        assert!(c.t_b.iter().all(|&v| (v - EPSILON_T).abs() < 1e-12));
        c.validate().unwrap();
    }

    #[test]
    fn unit_raw_radiance_matches_logistic_oracle() {
        let ones = Array3::<f64>::ones((1, 1, 3));
        let c = map_raw_to_components(&ones, &ones, &ones).unwrap();
        // 1 / (1 + e^-1), evaluated independently.
        assert!((c.j[[0, 0, 0]] - 0.7310585786300049).abs() < 1e-9);
    }

    #[test]
    fn clean_water_composition_is_the_radiance_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = ComponentPatch {
            j: random_patch(&mut rng, 0.0, 1.0),
            t_d: Array3::ones((4, 4, 3)),
            t_b: Array3::ones((4, 4, 3)),
        };
        let a = random_patch(&mut rng, 0.0, 1.0);
        let out = compose(&c, &a).unwrap();
        assert_eq!(out, c.j);
    }

    #[test]
    fn fully_backscattered_composition_is_attenuated_ambient() {
        let c = ComponentPatch {
            j: Array3::zeros((2, 2, 3)),
            t_d: Array3::from_elem((2, 2, 3), 0.5),
            t_b: Array3::from_elem((2, 2, 3), EPSILON_T),
        };
        let a = Array3::from_elem((2, 2, 3), 0.8);
        let out = compose(&c, &a).unwrap();
        for &v in out.iter() {
            assert!((v - (1.0 - EPSILON_T) * 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_composition_oracle() {
        let c = ComponentPatch {
            j: Array3::from_elem((1, 1, 3), 0.6),
            t_d: Array3::from_elem((1, 1, 3), 0.7),
            t_b: Array3::from_elem((1, 1, 3), 0.4),
        };
        let a = Array3::from_elem((1, 1, 3), 0.5);
        let out = compose(&c, &a).unwrap();
        // 0.6*0.7 + (1-0.4)*0.5 = 0.42 + 0.30
        assert!((out[[0, 0, 0]] - 0.72).abs() < 1e-12);
    }

    #[test]
    fn output_can_exceed_one_outside_the_attenuating_regime() {
        // With T_D > T_B the formula is not a convex mix: bright radiance
        // plus strong backscatter light pushes past 1.  This documents why
        // the compositor must not clamp (training needs the raw value).
        let c = ComponentPatch {
            j: Array3::ones((1, 1, 3)),
            t_d: Array3::ones((1, 1, 3)),
            t_b: Array3::from_elem((1, 1, 3), EPSILON_T),
        };
        let a = Array3::ones((1, 1, 3));
        let out = compose(&c, &a).unwrap();
        assert!(out[[0, 0, 0]] > 1.9);
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let good = random_components(&mut rng);
        let a = random_patch(&mut rng, 0.0, 1.0);

        let mut c = good.clone();
        c.j[[0, 0, 0]] = 1.2;
        assert!(compose(&c, &a).is_err());
        let mut c = good.clone();
        c.t_d[[1, 1, 1]] = 0.5 * EPSILON_T;
        assert!(compose(&c, &a).is_err());
        let mut c = good.clone();
        c.t_b[[0, 2, 2]] = f64::NAN;
        assert!(compose(&c, &a).is_err());
        let mut bad_a = a.clone();
        bad_a[[3, 3, 0]] = -0.1;
        assert!(compose(&good, &bad_a).is_err());
        // Shape mismatch, both among components and against A.
        let c = ComponentPatch {
            j: Array3::zeros((2, 2, 3)),
            t_d: Array3::ones((2, 3, 3)),
            t_b: Array3::ones((2, 2, 3)),
        };
        assert!(matches!(c.validate(), Err(UwError::Shape(_))));
        assert!(matches!(
            compose(&good, &Array3::zeros((2, 2, 3))),
            Err(UwError::Shape(_))
        ));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let c = random_components(&mut rng);
        let a = random_patch(&mut rng, 0.1, 0.9);
        let upstream = random_patch(&mut rng, -1.0, 1.0);
        let grads = compose_gradients(&c, &a, &upstream).unwrap();

        // Scalar objective: sum(compose(...) * upstream).
        let objective = |c: &ComponentPatch, a: &Array3<f64>| -> f64 {
            (compose(c, a).unwrap() * &upstream).sum()
        };
        let h = 1e-6;
        // Perturb every element of every input and compare the analytic
        // gradient against a central difference.
        for (which, analytic) in [
            (0, &grads.d_j),
            (1, &grads.d_t_d),
            (2, &grads.d_t_b),
            (3, &grads.d_a),
        ] {
            for (idx, &g) in analytic.indexed_iter() {
                let eval_at = |delta: f64| {
                    let mut cc = c.clone();
                    let mut aa = a.clone();
                    let slot: &mut f64 = match which {
                        0 => &mut cc.j[idx],
                        1 => &mut cc.t_d[idx],
                        2 => &mut cc.t_b[idx],
                        _ => &mut aa[idx],
                    };
                    *slot += delta;
                    objective(&cc, &aa)
                };
                let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
                let denom = g.abs().max(fd.abs()).max(1.0);
                assert!(
                    ((g - fd) / denom).abs() <= 1e-6,
                    "input {which} at {idx:?}: analytic {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gradient_signs_and_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = random_components(&mut rng);
        c.t_d.fill(1.0);
        let a = random_patch(&mut rng, 0.0, 1.0);
        let ones = Array3::ones((4, 4, 3));
        let g = compose_gradients(&c, &a, &ones).unwrap();
        assert_eq!(g.d_j, ones);
        // A >= 0 makes the backscatter-transmission gradient nonpositive.
        assert!(g.d_t_b.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn tape_composition_agrees_with_plain_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let c = random_components(&mut rng);
        let a = random_patch(&mut rng, 0.1, 0.9);
        let upstream = random_patch(&mut rng, -1.0, 1.0);

        let mut tape = Tape::new(true);
        let vj = tape.leaf(c.j.clone().into_dyn());
        let vtd = tape.leaf(c.t_d.clone().into_dyn());
        let vtb = tape.leaf(c.t_b.clone().into_dyn());
        let va = tape.leaf(a.clone().into_dyn());
        let composed = compose_on_tape(&mut tape, vj, vtd, vtb, va);
        let wu = tape.leaf(upstream.clone().into_dyn());
        let weighted = tape.mul(composed, wu);
        let loss = tape.sum(weighted);

        let plain = compose(&c, &a).unwrap();
        assert_eq!(
            tape.value(composed).clone().into_dimensionality::<ndarray::Ix3>().unwrap(),
            plain
        );

        let grads = tape.backward(loss);
        let analytic = compose_gradients(&c, &a, &upstream).unwrap();
        for (var, expected) in [
            (vj, &analytic.d_j),
            (vtd, &analytic.d_t_d),
            (vtb, &analytic.d_t_b),
            (va, &analytic.d_a),
        ] {
            let got = grads.get(var).unwrap();
            for (g, e) in got.iter().zip(expected.iter()) {
                assert!((g - e).abs() < 1e-12, "tape {g} vs analytic {e}");
            }
        }
    }

    #[test]
    fn tape_range_mapping_matches_plain_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let raw_j = random_patch(&mut rng, -3.0, 3.0);
        let raw_td = random_patch(&mut rng, -3.0, 3.0);
        let raw_tb = random_patch(&mut rng, -3.0, 3.0);
        let plain = map_raw_to_components(&raw_j, &raw_td, &raw_tb).unwrap();

        let mut tape = Tape::new(false);
        let vj = tape.leaf(raw_j.into_dyn());
        let vtd = tape.leaf(raw_td.into_dyn());
        let vtb = tape.leaf(raw_tb.into_dyn());
        let (j, t_d, t_b) = map_raw_on_tape(&mut tape, vj, vtd, vtb);
        for (var, expected) in [(j, &plain.j), (t_d, &plain.t_d), (t_b, &plain.t_b)] {
            for (g, e) in tape.value(var).iter().zip(expected.iter()) {
                assert!((g - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn crop_extracts_the_expected_window() {
        let map = Array::from_shape_fn((5, 6, 3), |(y, x, c)| (y * 100 + x * 10 + c) as f64);
        let patch = crop_map(&map, 2, 3, 2).unwrap();
        assert_eq!(patch.dim(), (2, 2, 3));
        assert_eq!(patch[[0, 0, 0]], 230.0);
        assert_eq!(patch[[1, 1, 2]], 342.0);
        assert!(crop_map(&map, 4, 0, 2).is_err());
    }

    proptest! {
        /// In the attenuating regime (direct transmission no larger than
        /// backscatter transmission) the composition is a sub-convex mix
        /// and stays inside [0,1].
        #[test]
        fn output_in_unit_range_when_direct_at_most_backscatter(
            j in 0.0f64..1.0,
            tb in EPSILON_T..1.0,
            frac in 0.0f64..1.0,
            a in 0.0f64..1.0,
        ) {
            let td = EPSILON_T + frac * (tb - EPSILON_T);
            let c = ComponentPatch {
                j: Array3::from_elem((1, 1, 3), j),
                t_d: Array3::from_elem((1, 1, 3), td),
                t_b: Array3::from_elem((1, 1, 3), tb),
            };
            let ap = Array3::from_elem((1, 1, 3), a);
            let out = compose(&c, &ap).unwrap();
            prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
        }

        /// Raising the ambient light never darkens the composition.
        #[test]
        fn composition_is_monotone_in_ambient_light(
            j in 0.0f64..1.0,
            td in EPSILON_T..1.0,
            tb in EPSILON_T..1.0,
            a1 in 0.0f64..1.0,
            a2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let c = ComponentPatch {
                j: Array3::from_elem((1, 1, 3), j),
                t_d: Array3::from_elem((1, 1, 3), td),
                t_b: Array3::from_elem((1, 1, 3), tb),
            };
            let out_lo = compose(&c, &Array3::from_elem((1, 1, 3), lo)).unwrap();
            let out_hi = compose(&c, &Array3::from_elem((1, 1, 3), hi)).unwrap();
            prop_assert!(out_lo[[0, 0, 0]] <= out_hi[[0, 0, 0]] + 1e-15);
        }
    }
}
