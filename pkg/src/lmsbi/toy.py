"""Conjugate Gaussian-mean problem with a closed-form posterior.

theta ~ N(prior_mean, prior_sd^2); data are ``m`` draws from N(theta, noise_sd^2);
the summary is the sample mean.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GaussianMeanProblem:
    prior_mean: float = 0.0
    prior_sd: float = 1.0
    noise_sd: float = 1.0
    m: int = 10

    def sample(self, count, gen):
        return gen.normal(self.prior_mean, self.prior_sd, size=(count, 1))

    def simulate(self, theta, seed):
        gen = np.random.default_rng(seed)
        return gen.normal(float(np.ravel(theta)[0]), self.noise_sd, size=self.m)

    @staticmethod
    def summary(x):
        return np.array([np.mean(x)])

    def simulate_summaries(self, thetas, gen):
        """Vectorised sample means (exact distribution N(theta, noise_sd^2 / m))."""
        thetas = np.asarray(thetas, dtype=np.float64).reshape(-1, 1)
        return thetas + gen.normal(0.0, self.noise_sd / np.sqrt(self.m), size=thetas.shape)

    def posterior(self, xbar):
        """Mean and standard deviation of theta given the observed sample mean."""
        prec = 1.0 / self.prior_sd**2 + self.m / self.noise_sd**2
        mean = (self.prior_mean / self.prior_sd**2 + self.m * xbar / self.noise_sd**2) / prec
        return mean, 1.0 / np.sqrt(prec)

    def posterior_sample(self, xbar, count, gen):
        mean, sd = self.posterior(xbar)
        return gen.normal(mean, sd, size=(count, 1))
