"""Adversarial log-ratio estimation with adaptive contrast.

The discriminator network T learns to tell standardized posterior samples
from standard-Gaussian reference draws; at its optimum it outputs the
log-ratio between the two densities.  Standardizing against a
moment-matched Gaussian (the adaptive part) leaves the network the easy
job of modelling what little structure remains, while the bulk of
KL(q || prior) is carried by analytic Gaussian terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LOG2PI
from .network import MlpSpec
from .posterior import (
    MomentEstimate,
    generator_forward,
    init_mlp_params,
    leaves,
    mlp_forward_dense,
)


@dataclass
class AuxiliaryGaussian:
    """Factorizing Gaussian matched to the current posterior moments."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def from_moments(cls, est: MomentEstimate):
        return cls(mean=est.mean.copy(), var=est.var.copy())

    @classmethod
    def standard(cls, dim):
        return cls(mean=np.zeros(dim), var=np.ones(dim))


@dataclass
class DiscriminatorParams:
    """The log-ratio network; input dimension equals the main-network
    weight count."""

    mlp: MlpSpec
    arrays: dict

    @classmethod
    def create(cls, weight_count, rng, hidden=(50, 50), leaky_slope=0.2):
        mlp = MlpSpec(
            input_dim=weight_count, hidden=tuple(hidden), output_dim=1,
            leaky_slope=leaky_slope,
        )
        return cls(mlp=mlp, arrays=init_mlp_params(mlp, rng))


def standardize(tape, w, aux):
    """Elementwise (w - mean) / sqrt(var); the aux moments are constants,
    so gradients flow only through ``w``."""
    if np.any(aux.var <= 0):
        raise ValueError("auxiliary variances must be positive")
    mu = tape.constant(aux.mean)
    inv_std = tape.constant(1.0 / np.sqrt(aux.var))
    return ad.mul(ad.sub(w, mu), inv_std)


def discriminator_forward(tape, disc, nodes, x):
    """T values for a batch of (standardized) weight vectors, shape (M,)."""
    out = mlp_forward_dense(tape, disc.mlp, nodes, x)
    return ad.reshape(out, (out.shape[0],))


def discriminator_loss(tape, disc, nodes, q_standardized, reference):
    """Binary-discrimination loss to minimize over the network weights.

    Equals -[mean log sigm(T(q samples)) + mean log(1 - sigm(T(reference)))]
    written with softplus so saturated samples cannot overflow.
    """
    if q_standardized.shape[0] != reference.shape[0]:
        raise ad.ShapeMismatch("discriminator needs equal sample counts per side")
    t_q = discriminator_forward(tape, disc, nodes, q_standardized)
    t_r = discriminator_forward(tape, disc, nodes, reference)
    return ad.add(
        ad.mean(ad.softplus(ad.scale(t_q, -1.0))),
        ad.mean(ad.softplus(t_r)),
    )


def optimal_discriminator_oracle(log_q, log_p, w):
    """Analytic log q(w) - log p(w): the fixed point the training drives
    T toward.  Test-harness helper; both densities must be evaluable."""
    return log_q(w) - log_p(w)


def gaussian_logpdf_node(tape, w, mean, var):
    """Graph version of the factorized Gaussian log density, (K,) output.

    ``mean``/``var`` are constants (adaptive-contrast moments are
    stop-gradient by design)."""
    mu = tape.constant(mean)
    norm = tape.constant(-0.5 * np.sum(LOG2PI + np.log(var)))
    inv_var = tape.constant(1.0 / var)
    quad = ad.scale(ad.sum_(ad.mul(ad.square(ad.sub(w, mu)), inv_var), axis=1), -0.5)
    return ad.broadcast_add(quad, norm)


def kl_term_node(tape, w, disc, disc_arrays, aux, log_sigma0_sq):
    """KL(q || prior) estimate as a scalar node over the samples ``w``.

    mean_k [ T(standardize(w_k)) + log r_aux(w_k) - log p(w_k) ].  The
    discriminator weights enter as constants: phi-updates must treat the
    trained T as a fixed function (its optimum is insensitive to phi in
    expectation), while gradients do flow through the sample path and the
    two analytic densities.
    """
    from .network import prior_log_pdf

    disc_nodes = {name: tape.constant(a) for name, a in disc_arrays.items()}
    w_std = standardize(tape, w, aux)
    t_vals = discriminator_forward(tape, disc, disc_nodes, w_std)
    log_r = gaussian_logpdf_node(tape, w, aux.mean, aux.var)
    log_p = prior_log_pdf(tape, w, log_sigma0_sq)
    return ad.mean(ad.add(t_vals, ad.sub(log_r, log_p)))


def estimate_kl_q_prior(gen, gen_arrays, disc, disc_arrays, aux, log_sigma0_sq,
                        k, rng):
    """Fresh-sample Monte-Carlo KL(q || prior) estimate, returned as a float.

    Convenience wrapper over :func:`kl_term_node` that owns its tape; the
    trainer builds the node form inside the objective graph instead.
    """
    tape = ad.Tape()
    nodes = leaves(tape, gen_arrays)
    eps = rng.standard_normal((k, gen.noise_dim))
    w = generator_forward(tape, gen, nodes, eps)
    ls0 = tape.constant(np.atleast_1d(log_sigma0_sq))
    est = kl_term_node(tape, w, disc, disc_arrays, aux, ls0)
    return est.item()
