//! Synthetic observational data with known propensity and outcome laws.
//!
//! Covariates are independent standard normals x1..xp. Treatment follows a
//! baseline-category logit against group 0; the outcome is the group mean
//! m_z(x) plus N(0, σ²) noise, or a Bernoulli draw for binary outcomes.
//!
//! Built-in scenarios (`p` defaults to 3):
//!
//! * `A`: binary treatment, good overlap, Y = 1 + x1 + x2 + x3 + 0.5 z + ε.
//! * `B`: as `A` with every propensity coefficient multiplied by 3.
//! * `C`: three arms labelled 0, 1, 2 with effects 0, 0.5 and 1.
//! * `D`: the true logit has an x1·x2 term and so does the outcome, so a
//!   propensity model in x1 and x2 alone is misspecified.
//! * `E`: as `A` with a binary outcome, logit −0.5 + 0.5 x1 − 0.5 x2 + 0.25 x3 + 0.8 z.
//! * `H`: as `A` with a heterogeneous effect τ(x) = x1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::glm::{sigmoid, softmax_with_reference};
use crate::weights::{clamp_row, WeightScheme};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OutcomeLaw {
    Continuous { noise_sd: f64 },
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub p: usize,
    pub n_groups: usize,
    /// One row per non-reference group: intercept then x1..xp.
    pub ps_coef: Vec<Vec<f64>>,
    /// Coefficient of x1·x2 in every propensity logit.
    pub ps_interaction: f64,
    /// Intercept then x1..xp of the outcome's linear predictor.
    pub baseline: Vec<f64>,
    /// Coefficient of x1·x2 in the outcome's linear predictor.
    pub outcome_interaction: f64,
    /// Additive effect of each group on the linear predictor.
    pub effects: Vec<f64>,
    /// Adds z·x1 to the linear predictor (binary treatment only).
    pub heterogeneous: bool,
    pub outcome: OutcomeLaw,
}

fn padded(head: &[f64], p: usize, rest: f64) -> Vec<f64> {
    // head holds the intercept and the first few slopes
    (0..=p).map(|k| head.get(k).copied().unwrap_or(if k % 2 == 0 { -rest } else { rest })).collect()
}

impl Scenario {
    pub fn builtin(name: &str, p: Option<usize>) -> Result<Self> {
        let p = p.unwrap_or(3);
        let min_p = if name.eq_ignore_ascii_case("D") { 2 } else { 1 };
        if p < min_p {
            return invalid(format!("scenario {name} needs at least {min_p} covariates"));
        }
        let base_ps = padded(&[-0.2, 0.5, -0.5, 0.3], p, 0.1);
        let baseline = padded(&[1.0, 1.0, 1.0, 1.0], p, 0.0);
        let a = Scenario {
            name: "A".into(),
            p,
            n_groups: 2,
            ps_coef: vec![base_ps.clone()],
            ps_interaction: 0.0,
            baseline: baseline.clone(),
            outcome_interaction: 0.0,
            effects: vec![0.0, 0.5],
            heterogeneous: false,
            outcome: OutcomeLaw::Continuous { noise_sd: 1.0 },
        };
        let s = match name.to_ascii_uppercase().as_str() {
            "A" => a,
            "B" => Scenario {
                name: "B".into(),
                ps_coef: vec![base_ps.iter().map(|c| 3.0 * c).collect()],
                ..a
            },
            "C" => Scenario {
                name: "C".into(),
                n_groups: 3,
                ps_coef: vec![padded(&[0.2, 0.4, -0.3, 0.2], p, 0.1), padded(&[-0.2, -0.3, 0.5, 0.3], p, 0.1)],
                effects: vec![0.0, 0.5, 1.0],
                ..a
            },
            "D" => Scenario {
                name: "D".into(),
                ps_coef: vec![padded(&[0.0, 0.3, -0.3], p, 0.0)],
                ps_interaction: 0.8,
                baseline: padded(&[1.0, 1.0, 1.0], p, 0.0),
                outcome_interaction: 1.5,
                ..a
            },
            "E" => Scenario {
                name: "E".into(),
                baseline: padded(&[-0.5, 0.5, -0.5, 0.25], p, 0.0),
                effects: vec![0.0, 0.8],
                outcome: OutcomeLaw::Binary,
                ..a
            },
            "H" => Scenario { name: "H".into(), effects: vec![0.0, 0.0], heterogeneous: true, ..a },
            other => return invalid(format!("unknown scenario `{other}` (A | B | C | D | E | H)")),
        };
        Ok(s)
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.n_groups).map(|k| k.to_string()).collect()
    }

    fn interaction(&self, x: &[f64]) -> f64 {
        if self.p >= 2 {
            x[0] * x[1]
        } else {
            0.0
        }
    }

    /// True generalized propensity scores at `x`.
    pub fn propensity(&self, x: &[f64]) -> Vec<f64> {
        let inter = self.interaction(x);
        let eta: Vec<f64> = self
            .ps_coef
            .iter()
            .map(|c| c[0] + c[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.ps_interaction * inter)
            .collect();
        softmax_with_reference(&eta)
    }

    /// Conditional mean of the outcome under treatment `j`.
    pub fn outcome_mean(&self, x: &[f64], j: usize) -> f64 {
        let mut eta = self.baseline[0]
            + self.baseline[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            + self.outcome_interaction * self.interaction(x)
            + self.effects[j];
        if self.heterogeneous {
            eta += j as f64 * x[0];
        }
        match self.outcome {
            OutcomeLaw::Continuous { .. } => eta,
            OutcomeLaw::Binary => sigmoid(eta),
        }
    }
}

fn draw_group(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

/// `n` units with columns x1..xp, z, y; fully determined by `seed`.
pub fn generate(s: &Scenario, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return invalid("need at least one unit");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = vec![Vec::with_capacity(n); s.p];
    let mut z = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut x = vec![0.0; s.p];
    for _ in 0..n {
        for (k, v) in x.iter_mut().enumerate() {
            *v = StandardNormal.sample(&mut rng);
            xs[k].push(*v);
        }
        let g = draw_group(&s.propensity(&x), rng.random());
        let m = s.outcome_mean(&x, g);
        y.push(match s.outcome {
            OutcomeLaw::Continuous { noise_sd } => m + noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng),
            OutcomeLaw::Binary => f64::from(u8::from(rng.random::<f64>() < m)),
        });
        z.push(g as f64);
    }
    let mut names: Vec<String> = (1..=s.p).map(|k| format!("x{k}")).collect();
    names.push("z".into());
    names.push("y".into());
    let mut cols = xs;
    cols.push(z);
    cols.push(y);
    Dataset::from_numeric(names, cols)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrueValue {
    pub value: f64,
    pub mc_se: f64,
    pub draws: usize,
}

const CHUNK: usize = 1 << 16;

/// Monte Carlo value of E[h(x)(m_b(x) − m_a(x))] / E[h(x)] with h built
/// from the true propensity scores. Draws are made in fixed-size chunks,
/// each with its own random stream, so the result does not depend on
/// thread scheduling.
pub fn true_wate(s: &Scenario, scheme: &WeightScheme, pair: (usize, usize), draws: usize, seed: u64) -> Result<TrueValue> {
    if pair.0 >= s.n_groups || pair.1 >= s.n_groups || draws < 2 {
        return invalid("bad group pair or too few draws");
    }
    let labels = s.labels();
    let treated = scheme.treated_index(&labels)?;
    let n_chunks = draws.div_ceil(CHUNK);
    let parts: Vec<Vec<(f64, f64)>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = CHUNK.min(draws - c * CHUNK);
            let mut x = vec![0.0; s.p];
            (0..len)
                .map(|_| {
                    x.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                    let mut e = s.propensity(&x);
                    clamp_row(&mut e);
                    let h = scheme.tilt(&e, treated);
                    (h, s.outcome_mean(&x, pair.1) - s.outcome_mean(&x, pair.0))
                })
                .collect()
        })
        .collect();
    let all: Vec<(f64, f64)> = parts.into_iter().flatten().collect();
    let m = all.len() as f64;
    let sh: f64 = all.iter().map(|t| t.0).sum();
    let value = all.iter().map(|t| t.0 * t.1).sum::<f64>() / sh;
    let dev: Vec<f64> = all.iter().map(|t| t.0 * (t.1 - value)).collect();
    let mc_se = crate::stats::sample_variance(&dev).sqrt() / ((sh / m) * m.sqrt());
    Ok(TrueValue { value, mc_se, draws: all.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_schemes() -> Vec<WeightScheme> {
        vec![
            WeightScheme::Ipw,
            WeightScheme::Treated { group: None },
            WeightScheme::Overlap,
            WeightScheme::Matching,
            WeightScheme::Entropy,
        ]
    }

    #[test]
    fn same_seed_same_data() {
        let s = Scenario::builtin("A", None).unwrap();
        assert_eq!(generate(&s, 50, 7).unwrap(), generate(&s, 50, 7).unwrap());
        assert_ne!(generate(&s, 50, 7).unwrap(), generate(&s, 50, 8).unwrap());
        let d = generate(&s, 50, 7).unwrap();
        assert_eq!(d.names(), ["x1", "x2", "x3", "z", "y"]);
        let c = generate(&Scenario::builtin("C", Some(5)).unwrap(), 300, 1).unwrap();
        let mut levels = c.labels("z").unwrap();
        levels.sort();
        levels.dedup();
        assert_eq!(levels, ["0", "1", "2"]);
        assert_eq!(c.names().len(), 7);
    }

    #[test]
    fn unknown_scenario() {
        assert!(Scenario::builtin("Q", None).is_err());
    }

    #[test]
    fn constant_effect_truth_for_every_scheme() {
        let s = Scenario::builtin("A", None).unwrap();
        for sch in all_schemes() {
            let t = true_wate(&s, &sch, (0, 1), 100_000, 1).unwrap();
            assert!((t.value - 0.5).abs() < 1e-12, "{sch}: {}", t.value);
        }
        let c = Scenario::builtin("C", None).unwrap();
        let t = true_wate(&c, &WeightScheme::Overlap, (0, 2), 100_000, 1).unwrap();
        assert!((t.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heterogeneous_truths() {
        let s = Scenario::builtin("H", None).unwrap();
        let ate = true_wate(&s, &WeightScheme::Ipw, (0, 1), 1_000_000, 3).unwrap();
        assert!(ate.value.abs() < 4.0 * ate.mc_se + 1e-3, "{ate:?}");
        assert!(ate.mc_se < 0.002);
        let ato = true_wate(&s, &WeightScheme::Overlap, (0, 1), 1_000_000, 3).unwrap();
        assert!(ato.mc_se < 0.002);
        // the treated are enriched for large x1
        let att = true_wate(&s, &WeightScheme::Treated { group: None }, (0, 1), 1_000_000, 3).unwrap();
        assert!(att.value > ato.value);
        assert!(att.value > 0.1);
    }

    #[test]
    fn truth_is_reproducible() {
        let s = Scenario::builtin("H", None).unwrap();
        let a = true_wate(&s, &WeightScheme::Overlap, (0, 1), 200_000, 9).unwrap();
        let b = true_wate(&s, &WeightScheme::Overlap, (0, 1), 200_000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn poor_overlap_is_more_extreme() {
        let a = Scenario::builtin("A", None).unwrap();
        let b = Scenario::builtin("B", None).unwrap();
        let x = [1.0, -1.0, 0.5];
        let pa = a.propensity(&x)[1];
        let pb = b.propensity(&x)[1];
        assert!((pb - 0.5).abs() > (pa - 0.5).abs());
    }
}
