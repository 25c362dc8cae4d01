"""The main predictive network, its likelihood factors and weight prior.

The network weights are the latent variables being inferred, so the
forward pass takes them as a *batch* of flat vectors: a (K, D) node of K
sampled weight vectors runs against one input batch in a single stacked
graph.  The flat layout per layer is ``W.ravel()`` followed by the bias,
layer by layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import LOG2PI


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected leaky-ReLU network."""

    input_dim: int
    hidden: tuple = (50, 50)
    output_dim: int = 1
    leaky_slope: float = 0.2

    def layer_dims(self):
        sizes = (self.input_dim, *self.hidden, self.output_dim)
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def weight_count(self):
        """Total flat parameter count D, biases included."""
        return sum((fi + 1) * fo for fi, fo in self.layer_dims())

    def layer_slices(self):
        """(weight_slice, bias_slice) offsets into the flat vector."""
        out, offset = [], 0
        for fi, fo in self.layer_dims():
            w = (offset, fi * fo)
            offset += fi * fo
            b = (offset, fo)
            offset += fo
            out.append((w, b))
        return out

    def unflatten(self, w):
        """Split a flat numpy vector into [(W, b), ...] arrays."""
        w = np.asarray(w)
        layers = []
        for (fi, fo), ((ws, wl), (bs, bl)) in zip(self.layer_dims(), self.layer_slices()):
            layers.append((w[ws:ws + wl].reshape(fi, fo), w[bs:bs + bl]))
        return layers

    def flatten(self, layers):
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])


def mlp_forward(tape, spec, w, x):
    """Outputs of the network for each weight sample and input row.

    ``w`` is a (K, D) node of flat weight vectors, ``x`` a (B, input_dim)
    array (wrapped as a constant).  Returns a (K, B) node when
    ``output_dim == 1``, otherwise (K, B, output_dim).
    """
    if w.shape[-1] != spec.weight_count:
        raise ad.ShapeMismatch(
            f"weight vector length {w.shape[-1]} != spec D {spec.weight_count}"
        )
    k = w.shape[0]
    if not isinstance(x, ad.Node):
        x = tape.constant(x)
    if x.shape[-1] != spec.input_dim:
        raise ad.ShapeMismatch(f"input dim {x.shape[-1]} != spec {spec.input_dim}")
    h = x  # (B, d); broadcasts against per-sample (K, d, fo) stacks
    dims = spec.layer_dims()
    for i, ((fi, fo), ((ws, wl), (bs, bl))) in enumerate(zip(dims, spec.layer_slices())):
        W = ad.reshape(ad.narrow(w, 1, ws, wl), (k, fi, fo))
        b = ad.reshape(ad.narrow(w, 1, bs, bl), (k, 1, fo))
        h = ad.broadcast_add(ad.matmul(h, W), b)
        if i < len(dims) - 1:
            h = ad.leaky_relu(h, spec.leaky_slope)
    if spec.output_dim == 1:
        return ad.reshape(h, (k, h.shape[1]))
    return h


def gaussian_log_lik(tape, y, f, log_sigma2):
    """Per-point Gaussian log density: -0.5*log(2*pi*s2) - (y-f)^2/(2*s2).

    ``f`` is a (K, B) node of network outputs, ``y`` the (B,) targets,
    ``log_sigma2`` a (1,) node holding the output-noise log variance.
    """
    if not isinstance(y, ad.Node):
        y = tape.constant(y)
    inv_s2 = ad.exp(ad.scale(log_sigma2, -1.0))
    quad = ad.scale(ad.mul(ad.square(ad.sub(f, y)), inv_s2), -0.5)
    norm = ad.scale(log_sigma2 + LOG2PI, -0.5)
    return ad.broadcast_add(quad, norm)


def bernoulli_log_lik(tape, y, f):
    """Per-point Bernoulli log likelihood of labels ``y`` given logits ``f``.

    Uses the log-sigmoid form -[y*softplus(-f) + (1-y)*softplus(f)] which
    saturates to 0 without overflow for large |f|.
    """
    y = np.asarray(y, dtype=np.float64)
    yc = tape.constant(y)
    y1c = tape.constant(1.0 - y)
    pos = ad.mul(yc, ad.softplus(ad.scale(f, -1.0)))
    neg = ad.mul(y1c, ad.softplus(f))
    return ad.scale(ad.add(pos, neg), -1.0)


def prior_log_pdf(tape, w, log_sigma0_sq):
    """Log density of each weight sample under the zero-mean Gaussian prior.

    ``w`` is (K, D); returns a (K,) node.  The prior variance stays
    positive because it lives in log space.
    """
    d = w.shape[-1]
    inv_s2 = ad.exp(ad.scale(log_sigma0_sq, -1.0))
    quad = ad.scale(ad.mul(ad.sum_(ad.square(w), axis=1), inv_s2), -0.5)
    norm = ad.scale(log_sigma0_sq + LOG2PI, -0.5 * d)
    return ad.broadcast_add(quad, norm)


@dataclass
class ModelHyperparams:
    """Trainable output-noise and prior log variances (log space keeps
    both positive).  Regression trains both; classification has no output
    noise, so ``log_sigma2`` is carried but unused there."""

    log_sigma2: np.ndarray = field(default_factory=lambda: np.zeros(1))
    log_sigma0_sq: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def arrays(self):
        return {"log_sigma2": self.log_sigma2, "log_sigma0_sq": self.log_sigma0_sq}
