use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::diffcore::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountFamily {
    Poisson,
    Bernoulli,
    Binomial,
    NegativeBinomial,
}

/// Conditional spike-count law with natural parameter `psi`.
///
/// | family | pmf | mean | variance |
/// |---|---|---|---|
/// | Poisson | `e^{-e^psi} e^{psi x} / x!` | `e^psi` | `e^psi` |
/// | Bernoulli | `s(psi)^x s(-psi)^{1-x}` | `s(psi)` | `s(psi) s(-psi)` |
/// | Binomial | `C(u,x) s(psi)^x s(-psi)^{u-x}` | `u s(psi)` | `u s(psi) s(-psi)` |
/// | NegBin | `C(u+x-1,x) s(psi)^x s(-psi)^u` | `u e^psi` | `u e^psi / s(-psi)` |
///
/// `s` is the logistic sigmoid and `u` is `upsilon`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    pub family: CountFamily,
    pub psi: f64,
    /// Trial count (Binomial, must be integral) or dispersion (NegBin).
    pub upsilon: f64,
}

fn ln_choose(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// `ln s(psi)` without cancellation for large `|psi|`.
fn ln_sigmoid(psi: f64) -> f64 {
    -crate::diffcore::softplus(-psi)
}

impl CountDistribution {
    pub fn poisson(psi: f64) -> Self {
        CountDistribution { family: CountFamily::Poisson, psi, upsilon: 1.0 }
    }

    pub fn bernoulli(psi: f64) -> Self {
        CountDistribution { family: CountFamily::Bernoulli, psi, upsilon: 1.0 }
    }

    pub fn binomial(trials: u64, psi: f64) -> Self {
        CountDistribution { family: CountFamily::Binomial, psi, upsilon: trials as f64 }
    }

    pub fn negative_binomial(upsilon: f64, psi: f64) -> Self {
        CountDistribution { family: CountFamily::NegativeBinomial, psi, upsilon }
    }

    pub fn in_support(&self, x: u64) -> bool {
        match self.family {
            CountFamily::Poisson | CountFamily::NegativeBinomial => true,
            CountFamily::Bernoulli => x <= 1,
            CountFamily::Binomial => (x as f64) <= self.upsilon,
        }
    }

    /// Log-probability of `x`; `-inf` outside the support.
    pub fn logpmf(&self, x: u64) -> f64 {
        if !self.in_support(x) {
            log::debug!("count {x} outside support of {:?}", self.family);
            return f64::NEG_INFINITY;
        }
        let xf = x as f64;
        let psi = self.psi;
        match self.family {
            CountFamily::Poisson => -psi.exp() + xf * psi - ln_gamma(xf + 1.0),
            CountFamily::Bernoulli => xf * ln_sigmoid(psi) + (1.0 - xf) * ln_sigmoid(-psi),
            CountFamily::Binomial => {
                let u = self.upsilon;
                ln_choose(u, xf) + xf * ln_sigmoid(psi) + (u - xf) * ln_sigmoid(-psi)
            }
            CountFamily::NegativeBinomial => {
                let u = self.upsilon;
                ln_gamma(u + xf) - ln_gamma(xf + 1.0) - ln_gamma(u)
                    + xf * ln_sigmoid(psi)
                    + u * ln_sigmoid(-psi)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        let s = sigmoid(self.psi);
        match self.family {
            CountFamily::Poisson => self.psi.exp(),
            CountFamily::Bernoulli => s,
            CountFamily::Binomial => self.upsilon * s,
            CountFamily::NegativeBinomial => self.upsilon * self.psi.exp(),
        }
    }

    pub fn variance(&self) -> f64 {
        let s = sigmoid(self.psi);
        let sm = sigmoid(-self.psi);
        match self.family {
            CountFamily::Poisson => self.psi.exp(),
            CountFamily::Bernoulli => s * sm,
            CountFamily::Binomial => self.upsilon * s * sm,
            CountFamily::NegativeBinomial => self.upsilon * self.psi.exp() / sm,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        let b = CountDistribution::bernoulli(0.0);
        assert_eq!((b.mean(), b.variance()), (0.5, 0.25));
        assert!((CountDistribution::poisson(0.0).logpmf(0) + 1.0).abs() < 1e-15);
        let nb = CountDistribution::negative_binomial(2.0, 0.0);
        assert!((nb.logpmf(1) - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_support_is_neg_inf() {
        assert_eq!(CountDistribution::bernoulli(0.3).logpmf(2), f64::NEG_INFINITY);
        assert_eq!(CountDistribution::binomial(3, 0.3).logpmf(4), f64::NEG_INFINITY);
    }

    fn summed_mass(d: &CountDistribution) -> (f64, f64, f64) {
        let (mut mass, mut m1, mut m2) = (0.0, 0.0, 0.0);
        let mut x = 0u64;
        while d.in_support(x) && x < 100_000 {
            let p = d.logpmf(x).exp();
            mass += p;
            m1 += p * x as f64;
            m2 += p * (x * x) as f64;
            if mass >= 1.0 - 1e-13 && x as f64 > d.mean() {
                break;
            }
            x += 1;
        }
        (mass, m1, m2 - m1 * m1)
    }

    #[test]
    fn pmfs_normalize_and_match_moments() {
        for psi in [-1.5, 0.0, 0.7, 2.0] {
            for d in [
                CountDistribution::poisson(psi),
                CountDistribution::bernoulli(psi),
                CountDistribution::binomial(7, psi),
                CountDistribution::negative_binomial(2.5, psi),
            ] {
                let (mass, mean, var) = summed_mass(&d);
                assert!((mass - 1.0).abs() < 1e-9, "{d:?} mass {mass}");
                assert!((mean - d.mean()).abs() < 1e-7 * d.mean().max(1.0), "{d:?}");
                assert!((var - d.variance()).abs() < 1e-6 * d.variance().max(1.0), "{d:?}");
            }
        }
    }
}
