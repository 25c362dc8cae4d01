"""Approximate posteriors over the main-network weights.

Two families: an implicit one (learnable Gaussian noise pushed through a
generator MLP, usable only through samples) and a factorizing Gaussian
used by the mean-field VI baseline.  Both sample via the
reparameterization w = mu + sqrt(var) * z so gradients reach every
distribution parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LOG2PI
from .network import MlpSpec

MOMENT_VARIANCE_FLOOR = 1e-8


def init_mlp_params(spec, rng, prefix=""):
    """Layer weights ~ N(0, 1/fan_in), biases zero."""
    arrays = {}
    for i, (fi, fo) in enumerate(spec.layer_dims()):
        arrays[f"{prefix}W{i}"] = rng.standard_normal((fi, fo)) / np.sqrt(fi)
        arrays[f"{prefix}b{i}"] = np.zeros(fo)
    return arrays


def leaves(tape, arrays):
    """Register every parameter array as a leaf node on ``tape``."""
    return {name: tape.leaf(a, op="param") for name, a in arrays.items()}


def mlp_forward_dense(tape, spec, nodes, x, prefix=""):
    """Forward pass where the layer weights are individual leaf nodes.

    Used for the generator and the discriminator, whose weights are
    trained directly (unlike the main network, which consumes sampled
    flat weight vectors).
    """
    if not isinstance(x, ad.Node):
        x = tape.constant(x)
    n = len(spec.layer_dims())
    h = x
    for i in range(n):
        h = ad.broadcast_add(
            ad.matmul(h, nodes[f"{prefix}W{i}"]), nodes[f"{prefix}b{i}"]
        )
        if i < n - 1:
            h = ad.leaky_relu(h, spec.leaky_slope)
    return h


@dataclass
class GeneratorParams:
    """Implicit-posterior parameters: trainable input-noise moments plus
    the generator MLP that maps noise to flat weight vectors."""

    noise_dim: int
    mlp: MlpSpec
    arrays: dict

    @classmethod
    def create(cls, weight_count, rng, noise_dim=100, hidden=(50, 50), leaky_slope=0.2):
        mlp = MlpSpec(
            input_dim=noise_dim, hidden=tuple(hidden), output_dim=weight_count,
            leaky_slope=leaky_slope,
        )
        arrays = {
            "noise_mu": np.zeros(noise_dim),
            "noise_logvar": np.zeros(noise_dim),
        }
        arrays.update(init_mlp_params(mlp, rng))
        return cls(noise_dim=noise_dim, mlp=mlp, arrays=arrays)

    @property
    def weight_count(self):
        return self.mlp.output_dim


def generator_forward(tape, gen, nodes, eps):
    """Map standard-normal draws ``eps`` (K, noise_dim) to weight samples.

    Returns a (K, D) node; gradients flow to the noise moments and every
    generator layer.
    """
    z = tape.constant(eps)
    std = ad.exp(ad.scale(nodes["noise_logvar"], 0.5))
    shifted = ad.broadcast_add(ad.mul(z, std), nodes["noise_mu"])
    out = mlp_forward_dense(tape, gen.mlp, nodes, shifted)
    return out


def sample_weights(tape, gen, nodes, k, rng):
    """Draw K weight samples from the implicit posterior (differentiable)."""
    if k < 1:
        raise ValueError("need at least one sample")
    eps = rng.standard_normal((k, gen.noise_dim))
    return generator_forward(tape, gen, nodes, eps)


@dataclass
class GaussianQ:
    """Mean-field Gaussian posterior: per-weight mean and log variance."""

    arrays: dict

    @classmethod
    def create(cls, spec, rng, init_logvar=np.log(1e-2)):
        # Means follow the same fan-in scaling a plain net would use; a
        # small initial variance keeps early likelihood terms sane.
        mu = spec.flatten([
            (rng.standard_normal((fi, fo)) / np.sqrt(fi), np.zeros(fo))
            for fi, fo in spec.layer_dims()
        ])
        return cls(arrays={
            "q_mu": mu,
            "q_logvar": np.full(mu.size, float(init_logvar)),
        })

    @property
    def weight_count(self):
        return self.arrays["q_mu"].size


def gaussian_q_sample(tape, nodes, k, rng):
    """Reparameterized draws w = mu + sqrt(var) * z, shape (K, D)."""
    if k < 1:
        raise ValueError("need at least one sample")
    d = nodes["q_mu"].shape[0]
    z = tape.constant(rng.standard_normal((k, d)))
    std = ad.exp(ad.scale(nodes["q_logvar"], 0.5))
    return ad.broadcast_add(ad.mul(z, std), nodes["q_mu"])


def gaussian_logpdf(w, mean, var):
    """Factorized Gaussian log density (plain numpy, used by oracles and
    the predictive machinery; the graph version lives where it is used)."""
    w = np.atleast_2d(w)
    return -0.5 * np.sum(
        LOG2PI + np.log(var) + (w - mean) ** 2 / var, axis=-1
    )


def gaussian_q_sample_and_logpdf(q, k, rng):
    """Samples plus their log q(w); numpy path for tests and evaluation."""
    mu, logvar = q.arrays["q_mu"], q.arrays["q_logvar"]
    z = rng.standard_normal((k, mu.size))
    w = mu + np.exp(0.5 * logvar) * z
    return w, gaussian_logpdf(w, mu, np.exp(logvar))


def closed_form_kl_node(tape, nodes, log_sigma0_sq):
    """KL(q || prior) for the mean-field Gaussian q, as a scalar node."""
    mu, logvar = nodes["q_mu"], nodes["q_logvar"]
    ratio = ad.exp(ad.sub(logvar, log_sigma0_sq))
    quad = ad.mul(ad.square(mu), ad.exp(ad.scale(log_sigma0_sq, -1.0)))
    per_dim = ad.sub(ad.add(ratio, quad), ad.sub(logvar, log_sigma0_sq) + 1.0)
    return ad.scale(ad.sum_(per_dim), 0.5)


def closed_form_kl(mu, var, sigma0_sq):
    """Numpy twin of :func:`closed_form_kl_node` for direct evaluation."""
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    return 0.5 * float(
        np.sum(var / sigma0_sq + mu**2 / sigma0_sq - 1.0 - np.log(var / sigma0_sq))
    )


@dataclass
class MomentEstimate:
    """Per-coordinate sample mean and (1/K-normalized) variance of w."""

    mean: np.ndarray
    var: np.ndarray
    count: int


def estimate_moments(samples):
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ValueError("moment estimation needs at least 2 samples")
    mean = samples.mean(axis=0)
    var = np.maximum(samples.var(axis=0), MOMENT_VARIANCE_FLOOR)
    return MomentEstimate(mean=mean, var=var, count=samples.shape[0])
