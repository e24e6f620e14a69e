"""
Evidential uncertainty by hand
==============================

A Normal-Inverse-Gamma prior (gamma, v, alpha, beta) over (mu, sigma^2)
gives a Student-t marginal for y and splits uncertainty into an aleatoric
part E[sigma^2] and an epistemic part Var[mu].
"""

import math

import numpy as np
from scipy import integrate, stats

from ceqrdqn.evidential import NIGParams, decompose, nig_density, student_t_marginal_logpdf, student_t_params

G = NIGParams(gamma=0.0, v=1.0, alpha=2.0, beta=1.0)

# The joint density at the mode of the mean, sigma^2 = 1: e^-1 / sqrt(2 pi).
print("p(0, 1 | G) =", nig_density(0.0, 1.0, G))

# Integrate mu out numerically; what is left is the inverse-gamma density.
s2 = 0.8
mass, _ = integrate.quad(lambda m: nig_density(m, s2, G), -20, 20)
print("integral over mu:", mass, " inverse-gamma pdf:", stats.invgamma.pdf(s2, G.alpha, scale=G.beta))

# The marginal over y is Student-t with 2 alpha degrees of freedom.
loc, scale2, nu = student_t_params(G)
print("Student-t location, scale^2, dof:", loc, scale2, nu)
print("log p(y=0 | G) =", student_t_marginal_logpdf(0.0, G), " log 0.375 =", math.log(0.375))

# More virtual observations (larger v) shrink epistemic uncertainty only.
for v in (0.5, 2.0, 50.0):
    est = decompose(NIGParams(0.0, v, 3.0, 4.0))
    print(f"v={v:5.1f}  aleatoric={est.aleatoric:.3f}  epistemic={est.epistemic:.3f}")

# Sampling check of the aleatoric term: E[sigma^2] = beta / (alpha - 1).
rng = np.random.default_rng(0)
draws = stats.invgamma.rvs(3.0, scale=4.0, size=200_000, random_state=rng)
print("Monte-Carlo E[sigma^2]:", draws.mean(), " closed form:", 4.0 / 2.0)
