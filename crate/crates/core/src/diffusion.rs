//! Forward noising, the ε / x₀ / v parameterizations and the training loss.
//!
//! Every conversion is evaluated per element in `f64` and rounded once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ALPHA_BAR_FLOOR};
use crate::tensorio::ImageTensor;

/// What a denoiser output represents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    Epsilon,
    #[default]
    X0,
    V,
}

impl PredictionKind {
    pub const ALL: [PredictionKind; 3] = [PredictionKind::Epsilon, PredictionKind::X0, PredictionKind::V];

    pub fn as_str(&self) -> &'static str {
        match self {
            PredictionKind::Epsilon => "epsilon",
            PredictionKind::X0 => "x0",
            PredictionKind::V => "v",
        }
    }
}

impl std::str::FromStr for PredictionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" | "eps" => Ok(PredictionKind::Epsilon),
            "x0" => Ok(PredictionKind::X0),
            "v" => Ok(PredictionKind::V),
            other => Err(Error::invalid(format!("unknown prediction kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub kind: PredictionKind,
    pub value: ImageTensor,
}

impl Prediction {
    pub fn new(kind: PredictionKind, value: ImageTensor) -> Self {
        Prediction { kind, value }
    }
}

/// A noised sample `x_t` together with the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyState {
    pub x_t: ImageTensor,
    pub t: usize,
    pub eps_used: ImageTensor,
}

/// Regression loss applied by [`simple_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    L1,
    L2,
}

fn combine(a: &ImageTensor, b: &ImageTensor, ka: f64, kb: f64) -> ImageTensor {
    a.zip_map(b, |x, y| (ka * x as f64 + kb * y as f64) as f32)
}

fn convert(
    value: &ImageTensor,
    x_t: &ImageTensor,
    f: impl Fn(f64, f64) -> f64,
) -> ImageTensor {
    value.zip_map(x_t, |v, x| f(v as f64, x as f64) as f32)
}

/// Scalar forms of the parameterization algebra. The tensor conversions
/// below evaluate exactly these per element.
pub mod scalar {
    use super::PredictionKind;

    pub fn x_t(x0: f64, eps: f64, alpha_bar: f64) -> f64 {
        alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps
    }

    pub fn v(x0: f64, eps: f64, alpha_bar: f64) -> f64 {
        alpha_bar.sqrt() * eps - (1.0 - alpha_bar).sqrt() * x0
    }

    /// x₀ implied by a prediction `value` of `kind` at state `x_t`.
    pub fn x0(kind: PredictionKind, value: f64, x_t: f64, alpha_bar: f64) -> f64 {
        match kind {
            PredictionKind::X0 => value,
            PredictionKind::Epsilon => (x_t - (1.0 - alpha_bar).sqrt() * value) / alpha_bar.sqrt(),
            PredictionKind::V => alpha_bar.sqrt() * x_t - (1.0 - alpha_bar).sqrt() * value,
        }
    }

    /// ε implied by a prediction `value` of `kind` at state `x_t`.
    pub fn eps(kind: PredictionKind, value: f64, x_t: f64, alpha_bar: f64) -> f64 {
        match kind {
            PredictionKind::Epsilon => value,
            PredictionKind::X0 => (x_t - alpha_bar.sqrt() * value) / (1.0 - alpha_bar).sqrt(),
            PredictionKind::V => (1.0 - alpha_bar).sqrt() * x_t + alpha_bar.sqrt() * value,
        }
    }

    /// Value of `kind` implied by a prediction of another kind.
    pub fn convert(from: PredictionKind, to: PredictionKind, value: f64, x_t: f64, alpha_bar: f64) -> f64 {
        match to {
            PredictionKind::X0 => x0(from, value, x_t, alpha_bar),
            PredictionKind::Epsilon => eps(from, value, x_t, alpha_bar),
            PredictionKind::V => v(
                x0(from, value, x_t, alpha_bar),
                eps(from, value, x_t, alpha_bar),
                alpha_bar,
            ),
        }
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    sch: &NoiseSchedule,
) -> Result<NoisyState> {
    sch.check_step(t)?;
    x0.check_same_dims(eps, "q_sample")?;
    let ab = sch.alpha_bar(t);
    Ok(NoisyState {
        x_t: x0.zip_map(eps, |a, e| scalar::x_t(a as f64, e as f64, ab) as f32),
        t,
        eps_used: eps.clone(),
    })
}

/// One Markov step `x_t = √(1−β_t)·x_{t−1} + √β_t·eps`.
pub fn single_forward_step(
    x_prev: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    sch: &NoiseSchedule,
) -> Result<ImageTensor> {
    sch.check_step(t)?;
    x_prev.check_same_dims(eps, "single_forward_step")?;
    Ok(forward_step_with_beta(x_prev, eps, sch.beta(t)))
}

pub fn forward_step_with_beta(x_prev: &ImageTensor, eps: &ImageTensor, beta: f64) -> ImageTensor {
    combine(x_prev, eps, (1.0 - beta).sqrt(), beta.sqrt())
}

/// `v = √ᾱ·eps − √(1−ᾱ)·x0` at an explicit ᾱ.
pub fn v_from_parts(x0: &ImageTensor, eps: &ImageTensor, alpha_bar: f64) -> Result<ImageTensor> {
    x0.check_same_dims(eps, "make_v")?;
    Ok(x0.zip_map(eps, |a, e| scalar::v(a as f64, e as f64, alpha_bar) as f32))
}

pub fn make_v(
    x0: &ImageTensor,
    eps: &ImageTensor,
    t: usize,
    sch: &NoiseSchedule,
) -> Result<Prediction> {
    sch.check_step(t)?;
    Ok(Prediction::new(
        PredictionKind::V,
        v_from_parts(x0, eps, sch.alpha_bar(t))?,
    ))
}

/// Converts a prediction of any kind into an x₀ estimate at an explicit ᾱ.
pub fn x0_from_parts(
    kind: PredictionKind,
    value: &ImageTensor,
    x_t: &ImageTensor,
    alpha_bar: f64,
) -> Result<ImageTensor> {
    value.check_same_dims(x_t, "to_x0")?;
    match kind {
        PredictionKind::X0 => Ok(value.clone()),
        PredictionKind::Epsilon => {
            if alpha_bar < ALPHA_BAR_FLOOR {
                return Err(Error::NumericDomain(format!(
                    "alpha_bar {alpha_bar:e} below floor; cannot recover x0 from epsilon"
                )));
            }
            Ok(convert(value, x_t, |v, x| scalar::x0(kind, v, x, alpha_bar)))
        }
        PredictionKind::V => Ok(convert(value, x_t, |v, x| scalar::x0(kind, v, x, alpha_bar))),
    }
}

/// Converts a prediction of any kind into an ε estimate at an explicit ᾱ.
pub fn eps_from_parts(
    kind: PredictionKind,
    value: &ImageTensor,
    x_t: &ImageTensor,
    alpha_bar: f64,
) -> Result<ImageTensor> {
    value.check_same_dims(x_t, "to_epsilon")?;
    match kind {
        PredictionKind::Epsilon => Ok(value.clone()),
        PredictionKind::X0 => {
            let one_minus = 1.0 - alpha_bar;
            if one_minus < ALPHA_BAR_FLOOR {
                return Err(Error::NumericDomain(format!(
                    "1 - alpha_bar = {one_minus:e} below floor; cannot recover epsilon from x0"
                )));
            }
            Ok(convert(value, x_t, |v, x| scalar::eps(kind, v, x, alpha_bar)))
        }
        PredictionKind::V => Ok(convert(value, x_t, |v, x| scalar::eps(kind, v, x, alpha_bar))),
    }
}

pub fn to_x0(pred: &Prediction, state: &NoisyState, sch: &NoiseSchedule) -> Result<ImageTensor> {
    sch.check_step(state.t)?;
    x0_from_parts(pred.kind, &pred.value, &state.x_t, sch.alpha_bar(state.t))
}

pub fn to_epsilon(
    pred: &Prediction,
    state: &NoisyState,
    sch: &NoiseSchedule,
) -> Result<ImageTensor> {
    sch.check_step(state.t)?;
    eps_from_parts(pred.kind, &pred.value, &state.x_t, sch.alpha_bar(state.t))
}

/// The regression target for `kind` given the clean sample and the noise.
pub fn target_for(
    kind: PredictionKind,
    x0: &ImageTensor,
    eps: &ImageTensor,
    t: usize,
    sch: &NoiseSchedule,
) -> Result<ImageTensor> {
    match kind {
        PredictionKind::Epsilon => Ok(eps.clone()),
        PredictionKind::X0 => Ok(x0.clone()),
        PredictionKind::V => Ok(make_v(x0, eps, t, sch)?.value),
    }
}

/// Mean absolute (or squared) error between a prediction and its target.
pub fn simple_loss(pred: &Prediction, target: &ImageTensor, loss: LossKind) -> Result<f64> {
    pred.value.check_same_dims(target, "simple_loss")?;
    let n = target.len() as f64;
    let sum: f64 = pred
        .value
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            match loss {
                LossKind::L1 => d.abs(),
                LossKind::L2 => d * d,
            }
        })
        .sum();
    Ok(sum / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scalar(v: f32) -> ImageTensor {
        ImageTensor::filled(1, 1, 1, v)
    }

    fn quarter() -> NoiseSchedule {
        NoiseSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(c, h, w, |_, _, _| StandardNormal.sample(rng))
    }

    #[test]
    fn q_sample_special_cases() {
        let s = NoiseSchedule::default_cosine();
        let x0 = ImageTensor::from_fn(2, 3, 3, |c, y, x| (c + y + x) as f32 * 0.1);
        let zero = ImageTensor::zeros(2, 3, 3);
        let ab = s.alpha_bar(100);
        let st = q_sample(&x0, 100, &zero, &s).unwrap();
        for (a, b) in st.x_t.data().iter().zip(x0.data()) {
            assert!((a - b * ab.sqrt() as f32).abs() < 1e-7);
        }
        let eps = x0.clone();
        let st = q_sample(&zero, 100, &eps, &s).unwrap();
        for (a, b) in st.x_t.data().iter().zip(eps.data()) {
            assert!((a - b * (1.0 - ab).sqrt() as f32).abs() < 1e-7);
        }
        assert_eq!(st.eps_used, eps);
    }

    #[test]
    fn q_sample_scalar_example() {
        let st = q_sample(&scalar(1.0), 1, &scalar(1.0), &quarter()).unwrap();
        assert!((st.x_t.data()[0] - 1.3660254).abs() < 1e-6);
    }

    #[test]
    fn q_sample_rejects_bad_input() {
        let s = NoiseSchedule::default_cosine();
        assert!(q_sample(&scalar(1.0), 1, &ImageTensor::zeros(1, 1, 2), &s).is_err());
        assert!(q_sample(&scalar(1.0), 0, &scalar(0.0), &s).is_err());
        assert!(q_sample(&scalar(1.0), 501, &scalar(0.0), &s).is_err());
    }

    #[test]
    fn forward_step_special_cases() {
        let s = NoiseSchedule::default_cosine();
        let x = ImageTensor::from_fn(1, 2, 2, |_, y, x| (y * 2 + x) as f32);
        let out = single_forward_step(&x, 7, &ImageTensor::zeros(1, 2, 2), &s).unwrap();
        let k = (1.0 - s.beta(7)).sqrt() as f32;
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b * k).abs() < 1e-6);
        }
        let eps = ImageTensor::filled(1, 2, 2, 3.0);
        assert_eq!(forward_step_with_beta(&x, &eps, 0.0), x);
    }

    #[test]
    fn chained_forward_steps_match_marginal() {
        // Monte-Carlo over 10^4 scalar chains, mean and variance compared
        // against the one-shot marginal within 3 standard errors.
        let s = NoiseSchedule::cosine(50, 0.008).unwrap();
        let t = 30;
        let x0 = 0.7f64;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = scalar(x0 as f32);
            for step in 1..=t {
                let e = scalar(StandardNormal.sample(&mut rng));
                x = single_forward_step(&x, step, &e, &s).unwrap();
            }
            samples.push(x.data()[0] as f64);
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let want_mean = ab.sqrt() * x0;
        let want_var = 1.0 - ab;
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean, "{mean} vs {want_mean}");
        assert!((var - want_var).abs() < 3.0 * se_var, "{var} vs {want_var}");
    }

    #[test]
    fn q_sample_variance_property() {
        let s = NoiseSchedule::default_cosine();
        let t = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = ImageTensor::filled(1, 100, 100, 0.4);
        let eps = randn(&mut rng, 1, 100, 100);
        let st = q_sample(&x0, t, &eps, &s).unwrap();
        let shift = s.alpha_bar(t).sqrt() as f32 * 0.4;
        let r: Vec<f64> = st.x_t.data().iter().map(|v| (v - shift) as f64).collect();
        let m = r.iter().sum::<f64>() / r.len() as f64;
        let var = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
        let want = 1.0 - s.alpha_bar(t);
        assert!((var - want).abs() < 0.05 * want, "{var} vs {want}");
    }

    #[test]
    fn make_v_cases() {
        let x0 = scalar(2.0);
        let eps = scalar(1.0);
        assert_eq!(v_from_parts(&x0, &eps, 1.0).unwrap(), eps);
        assert_eq!(v_from_parts(&x0, &eps, 0.0).unwrap(), scalar(-2.0));
        let v = make_v(&x0, &eps, 1, &quarter()).unwrap();
        assert_eq!(v.kind, PredictionKind::V);
        assert!((v.value.data()[0] - (-1.2320508)).abs() < 1e-6);
        assert!(v_from_parts(&x0, &ImageTensor::zeros(2, 1, 1), 0.5).is_err());
    }

    #[test]
    fn conversions_round_trip() {
        let s = NoiseSchedule::default_cosine();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &t in &[1usize, 17, 250, 499] {
            let x0 = randn(&mut rng, 3, 4, 4);
            let eps = randn(&mut rng, 3, 4, 4);
            let st = q_sample(&x0, t, &eps, &s).unwrap();
            let from_eps = to_x0(&Prediction::new(PredictionKind::Epsilon, eps.clone()), &st, &s).unwrap();
            let v = make_v(&x0, &eps, t, &s).unwrap();
            let from_v = to_x0(&v, &st, &s).unwrap();
            let eps_from_v = to_epsilon(&v, &st, &s).unwrap();
            let eps_from_x0 = to_epsilon(&Prediction::new(PredictionKind::X0, x0.clone()), &st, &s).unwrap();
            // The ε → x₀ inversion divides by √ᾱ, which amplifies f32 rounding of x_t near t = T.
            let tol_x0 = 1e-5 / s.alpha_bar(t).sqrt() as f32;
            let tol_eps = 1e-5 / (1.0 - s.alpha_bar(t)).sqrt() as f32;
            for i in 0..x0.len() {
                assert!((from_eps.data()[i] - x0.data()[i]).abs() < tol_x0, "t={t}");
                assert!((from_v.data()[i] - x0.data()[i]).abs() < 1e-5, "t={t}");
                assert!((eps_from_v.data()[i] - eps.data()[i]).abs() < 1e-5, "t={t}");
                assert!((eps_from_x0.data()[i] - eps.data()[i]).abs() < tol_eps, "t={t}");
            }
        }
    }

    #[test]
    fn identity_conversions() {
        let s = NoiseSchedule::default_cosine();
        let x = scalar(0.3);
        let st = NoisyState { x_t: scalar(1.0), t: 10, eps_used: scalar(0.0) };
        assert_eq!(to_x0(&Prediction::new(PredictionKind::X0, x.clone()), &st, &s).unwrap(), x);
        assert_eq!(to_epsilon(&Prediction::new(PredictionKind::Epsilon, x.clone()), &st, &s).unwrap(), x);
        assert_eq!(eps_from_parts(PredictionKind::V, &x, &scalar(5.0), 1.0).unwrap(), x);
    }

    #[test]
    fn floors_raise_numeric_domain() {
        let x = scalar(0.3);
        assert!(matches!(
            x0_from_parts(PredictionKind::Epsilon, &x, &x, 0.0),
            Err(Error::NumericDomain(_))
        ));
        assert!(matches!(
            eps_from_parts(PredictionKind::X0, &x, &x, 1.0),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn loss_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 2, 5, 5);
        let p = Prediction::new(PredictionKind::X0, a.clone());
        assert_eq!(simple_loss(&p, &a, LossKind::L1).unwrap(), 0.0);
        let shifted = Prediction::new(PredictionKind::X0, a.map(|v| v + 0.5));
        assert!((simple_loss(&shifted, &a, LossKind::L1).unwrap() - 0.5).abs() < 1e-6);
        assert!((simple_loss(&shifted, &a, LossKind::L2).unwrap() - 0.25).abs() < 1e-6);

        let b = randn(&mut rng, 2, 5, 5);
        let mut oracle = 0.0f64;
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..5 {
                    oracle += (a.get(c, y, x) as f64 - b.get(c, y, x) as f64).abs();
                }
            }
        }
        oracle /= 50.0;
        let got = simple_loss(&Prediction::new(PredictionKind::V, a), &b, LossKind::L1).unwrap();
        assert!((got - oracle).abs() < 1e-6);
        assert!(simple_loss(&shifted, &ImageTensor::zeros(1, 5, 5), LossKind::L1).is_err());
    }

    #[test]
    fn kind_parses() {
        for k in PredictionKind::ALL {
            assert_eq!(k.as_str().parse::<PredictionKind>().unwrap(), k);
        }
        assert!("z".parse::<PredictionKind>().is_err());
    }
}
