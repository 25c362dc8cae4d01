"""Shared test machinery: packing whole objectives into flat-vector
functions so finite differences can run over every trainable parameter
with frozen random draws."""

import numpy as np

from aadm import autodiff as ad
from aadm.discriminator import AuxiliaryGaussian, DiscriminatorParams, kl_term_node
from aadm.network import MlpSpec, gaussian_log_lik, mlp_forward
from aadm.objectives import alpha_likelihood_term, vi_data_term
from aadm.posterior import GaussianQ, GeneratorParams, closed_form_kl_node


def pack(arrays):
    """Flatten an ordered dict of arrays into one vector plus its layout."""
    names = list(arrays)
    flat = np.concatenate([np.ravel(arrays[n]) for n in names])
    layout = []
    offset = 0
    for n in names:
        size = arrays[n].size
        layout.append((n, offset, size, arrays[n].shape))
        offset += size
    return flat, layout


def unpack_nodes(v, layout):
    """Slice a flat leaf node back into named parameter nodes."""
    nodes = {}
    for name, offset, size, shape in layout:
        piece = ad.narrow(v, 0, offset, size)
        nodes[name] = piece if shape == (size,) else ad.reshape(piece, shape)
    return nodes


def tiny_problem(seed=0, n_points=2):
    """A 2-point regression problem with miniature networks."""
    rng = np.random.default_rng(seed)
    spec = MlpSpec(input_dim=1, hidden=(3,), output_dim=1)
    X = rng.uniform(-1, 1, (n_points, 1))
    y = np.sin(3 * X[:, 0])
    gen = GeneratorParams.create(spec.weight_count, rng, noise_dim=2, hidden=(4,))
    disc = DiscriminatorParams.create(spec.weight_count, rng, hidden=(4,))
    return spec, X, y, gen, disc, rng


def implicit_objective_builder(method, alpha, seed=0, k=4, beta=0.7):
    """Full AADM/AVB objective as a deterministic function of the packed
    generator-plus-hyperparameter vector (draws and discriminator frozen).

    Returns (build, x0) for :func:`aadm.autodiff.finite_difference_check`.
    """
    spec, X, y, gen, disc, rng = tiny_problem(seed)
    eps = rng.standard_normal((k, gen.noise_dim))
    aux = AuxiliaryGaussian(
        mean=rng.normal(0, 0.1, spec.weight_count),
        var=rng.uniform(0.5, 1.5, spec.weight_count),
    )
    arrays = dict(gen.arrays)
    arrays["log_sigma2"] = np.array([0.1])
    arrays["log_sigma0_sq"] = np.array([-0.2])
    x0, layout = pack(arrays)
    n, b = len(y), len(y)

    def build(tape, v):
        nodes = unpack_nodes(v, layout)
        from aadm.posterior import generator_forward

        w = generator_forward(tape, gen, nodes, eps)
        f = mlp_forward(tape, spec, w, X)
        ll = gaussian_log_lik(tape, y, f, nodes["log_sigma2"])
        if method == "aadm":
            data = alpha_likelihood_term(tape, ll, alpha, n, b)
        else:
            data = vi_data_term(tape, ll, n, b)
        kl = kl_term_node(tape, w, disc, disc.arrays, aux, nodes["log_sigma0_sq"])
        return ad.sub(data, ad.scale(kl, beta))

    return build, x0


def vi_objective_builder(seed=0, k=4, beta=0.7):
    """Mean-field VI ELBO as a deterministic function of the packed
    (q_mu, q_logvar, hyperparameters) vector with frozen noise."""
    spec, X, y, _, _, rng = tiny_problem(seed)
    q = GaussianQ.create(spec, rng)
    z = rng.standard_normal((k, spec.weight_count))
    arrays = dict(q.arrays)
    arrays["log_sigma2"] = np.array([0.1])
    arrays["log_sigma0_sq"] = np.array([-0.2])
    x0, layout = pack(arrays)
    n, b = len(y), len(y)

    def build(tape, v):
        nodes = unpack_nodes(v, layout)
        std = ad.exp(ad.scale(nodes["q_logvar"], 0.5))
        w = ad.broadcast_add(ad.mul(tape.constant(z), std), nodes["q_mu"])
        f = mlp_forward(tape, spec, w, X)
        ll = gaussian_log_lik(tape, y, f, nodes["log_sigma2"])
        data = vi_data_term(tape, ll, n, b)
        kl = closed_form_kl_node(tape, nodes, nodes["log_sigma0_sq"])
        return ad.sub(data, ad.scale(kl, beta))

    return build, x0


def train_discriminator(disc, draw_q, draw_ref, steps, batch, rng, lr=1e-3):
    """Adversarial fitting loop for tests: draws fresh batches from the two
    sources each step and descends the discrimination loss."""
    from aadm.discriminator import discriminator_loss
    from aadm.posterior import leaves
    from aadm.training import AdamState, adam_step

    opt = AdamState.create(disc.arrays, lr)
    for _ in range(steps):
        qs = np.atleast_2d(draw_q(batch, rng))
        rs = np.atleast_2d(draw_ref(batch, rng))
        tape = ad.Tape()
        nodes = leaves(tape, disc.arrays)
        loss = discriminator_loss(
            tape, disc, nodes, tape.constant(qs), tape.constant(rs)
        )
        ad.backward(loss)
        adam_step(opt, disc.arrays, {k: nodes[k].grad for k in nodes},
                  direction=-1.0)
    return disc


def disc_values(disc, x):
    """T values at rows of x (no gradients)."""
    from aadm.discriminator import discriminator_forward

    tape = ad.Tape()
    nodes = {k: tape.constant(a) for k, a in disc.arrays.items()}
    return discriminator_forward(tape, disc, nodes, tape.constant(np.atleast_2d(x))).value
