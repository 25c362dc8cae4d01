"""The optimization loop: dual-learning-rate ADAM over alternating
discriminator and generator steps, with KL warm-up and checkpointing.

Two optimizer groups exist: the discriminator at its own (larger)
learning rate, and everything else (posterior parameters plus the model
hyperparameters) at the generator rate.  Mean-field VI has no
discriminator and uses the closed-form KL instead.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .discriminator import (
    AuxiliaryGaussian,
    DiscriminatorParams,
    discriminator_loss,
    kl_term_node,
    standardize,
)
from .network import MlpSpec, ModelHyperparams, bernoulli_log_lik, gaussian_log_lik, mlp_forward
from .objectives import (
    InferenceConfig,
    ObjectiveValue,
    alpha_likelihood_term,
    annealing_beta,
    assemble_objective,
    vi_data_term,
)
from .posterior import (
    GaussianQ,
    GeneratorParams,
    closed_form_kl_node,
    estimate_moments,
    gaussian_q_sample,
    generator_forward,
    leaves,
    sample_weights,
)

# Stream indices spawned from the run seed; keep stable so checkpoints and
# reruns line up exactly.
_STREAMS = ("init", "shuffle", "sample", "reference")


@dataclass
class AdamState:
    """Per-parameter first/second moments with bias correction."""

    lr: float
    m: dict
    v: dict
    t: int = 0
    skipped: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, arrays, lr):
        return cls(
            lr=lr,
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
        )


try:  # fused update kernel; the numpy fallback below is semantically equal
    from numba import njit

    @njit(cache=True)
    def _adam_kernel(p, m, v, g, beta1, beta2, step_scale, bc1, bc2, eps):
        for i in range(p.size):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            p[i] += step_scale * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)

except ImportError:  # pragma: no cover - numba is normally available
    def _adam_kernel(p, m, v, g, beta1, beta2, step_scale, bc1, bc2, eps):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p += step_scale * (m / bc1) / (np.sqrt(v / bc2) + eps)


def adam_step(state, arrays, grads, direction=-1.0):
    """One ADAM update in place; ``direction`` +1 ascends, -1 descends.

    Non-finite gradients skip the whole step (counted, moments untouched)
    rather than poisoning the moment estimates.
    """
    for key in arrays:
        if not np.isfinite(grads[key]).all():
            state.skipped += 1
            return False
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    step_scale = direction * state.lr
    for key, a in arrays.items():
        g = np.ascontiguousarray(grads[key]).reshape(-1)
        _adam_kernel(a.reshape(-1), state.m[key].reshape(-1),
                     state.v[key].reshape(-1), g, state.beta1, state.beta2,
                     step_scale, bc1, bc2, state.eps)
    return True


@dataclass
class EpochMetrics:
    epoch: int
    data_term: float
    kl_term: float
    beta: float
    seconds: float

    def row(self):
        return [self.epoch, repr(self.data_term), repr(self.kl_term),
                repr(self.beta), f"{self.seconds:.3f}"]

    HEADER = ["epoch", "data_term", "kl_term", "beta", "wallclock_seconds"]


@dataclass
class TrainState:
    """Everything a run owns: parameters, optimizer moments, rng streams."""

    config: InferenceConfig
    task: str
    spec: MlpSpec
    hyper: ModelHyperparams
    gen: GeneratorParams | None
    disc: DiscriminatorParams | None
    q: GaussianQ | None
    opt_model: AdamState
    opt_disc: AdamState | None
    rngs: dict
    epoch: int = 0
    n_train: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def weight_count(self):
        return self.spec.weight_count

    def model_arrays(self):
        """The generator-rate optimizer group (posterior + hyperparams)."""
        post = self.q.arrays if self.config.method == "vi" else self.gen.arrays
        out = dict(post)
        if self.config.train_hyperparams:
            out.update(self.hyper.arrays())
        return out


def init_state(config, input_dim, task, n_train):
    """Fresh parameters and optimizer groups for one training run."""
    streams = np.random.SeedSequence(config.seed).spawn(len(_STREAMS))
    rngs = {name: np.random.default_rng(s) for name, s in zip(_STREAMS, streams)}
    spec = MlpSpec(
        input_dim=input_dim, hidden=config.hidden, output_dim=1,
        leaky_slope=config.leaky_slope,
    )
    hyper = ModelHyperparams(
        log_sigma2=np.log([config.init_sigma2]),
        log_sigma0_sq=np.log([config.init_sigma0_sq]),
    )
    gen = disc = q = opt_disc = None
    if config.method == "vi":
        q = GaussianQ.create(spec, rngs["init"])
    else:
        gen = GeneratorParams.create(
            spec.weight_count, rngs["init"], noise_dim=config.noise_dim,
            hidden=config.gen_hidden, leaky_slope=config.leaky_slope,
        )
        disc = DiscriminatorParams.create(
            spec.weight_count, rngs["init"], hidden=config.disc_hidden,
            leaky_slope=config.leaky_slope,
        )
        opt_disc = AdamState.create(disc.arrays, config.lr_discriminator)
    state = TrainState(
        config=config, task=task, spec=spec, hyper=hyper, gen=gen, disc=disc,
        q=q, opt_model=None, opt_disc=opt_disc, rngs=rngs, n_train=n_train,
    )
    state.opt_model = AdamState.create(state.model_arrays(), config.lr_generator)
    return state


def _log_lik_node(state, tape, f, y):
    if state.task == "regression":
        ls2 = tape.leaf(state.hyper.log_sigma2, op="param")
        return gaussian_log_lik(tape, y, f, ls2), ls2
    return bernoulli_log_lik(tape, y, f), None


def _discriminator_update(state, cfg):
    """One adversarial update: fresh posterior samples (values only)
    against standard-normal references, standardized under the current
    auxiliary moments.  Returns the moments used."""
    d = state.weight_count
    for _ in range(cfg.disc_steps):
        tape = ad.Tape()
        nodes = leaves(tape, state.gen.arrays)
        w = sample_weights(tape, state.gen, nodes, cfg.k_train, state.rngs["sample"])
        moments = estimate_moments(w.value)
        if cfg.adaptive_contrast:
            aux = AuxiliaryGaussian.from_moments(moments)
            inputs = (w.value - aux.mean) / np.sqrt(aux.var)
            reference = state.rngs["reference"].standard_normal((cfg.k_train, d))
        else:
            aux = None
            inputs = w.value
            sigma0 = math.exp(float(state.hyper.log_sigma0_sq[0]) / 2.0)
            reference = sigma0 * state.rngs["reference"].standard_normal(
                (cfg.k_train, d)
            )
        dt = ad.Tape()
        dnodes = leaves(dt, state.disc.arrays)
        loss = discriminator_loss(
            dt, state.disc, dnodes, dt.constant(inputs), dt.constant(reference)
        )
        ad.backward(loss)
        grads = {k: dnodes[k].grad for k in state.disc.arrays}
        adam_step(state.opt_disc, state.disc.arrays, grads, direction=-1.0)
    return aux


def _implicit_kl_node(state, cfg, tape, w, aux):
    ls0 = tape.leaf(state.hyper.log_sigma0_sq, op="param")
    if cfg.adaptive_contrast:
        return kl_term_node(tape, w, state.disc, state.disc.arrays, aux, ls0), ls0
    # plain adversarial estimate: KL ~ mean T(w) with T trained against
    # prior samples directly
    from .discriminator import discriminator_forward

    dnodes = {k: tape.constant(a) for k, a in state.disc.arrays.items()}
    return ad.mean(discriminator_forward(tape, state.disc, dnodes, w)), ls0


def train_step(state, x_batch, y_batch, beta):
    """One minibatch update; returns the assembled objective summary."""
    cfg = state.config
    b = x_batch.shape[0]
    aux = None
    if cfg.method != "vi":
        aux = _discriminator_update(state, cfg)

    tape = ad.Tape()
    if cfg.method == "vi":
        nodes = leaves(tape, state.q.arrays)
        w = gaussian_q_sample(tape, nodes, cfg.k_train, state.rngs["sample"])
    else:
        nodes = leaves(tape, state.gen.arrays)
        w = sample_weights(tape, state.gen, nodes, cfg.k_train, state.rngs["sample"])

    f = mlp_forward(tape, state.spec, w, x_batch)
    log_liks, ls2 = _log_lik_node(state, tape, f, y_batch)
    if cfg.method == "aadm":
        data = alpha_likelihood_term(tape, log_liks, cfg.alpha, state.n_train, b)
    else:
        data = vi_data_term(tape, log_liks, state.n_train, b)

    if cfg.method == "vi":
        ls0 = tape.leaf(state.hyper.log_sigma0_sq, op="param")
        kl = closed_form_kl_node(tape, nodes, ls0)
    else:
        kl, ls0 = _implicit_kl_node(state, cfg, tape, w, aux)

    total, value = assemble_objective(tape, data, kl, beta)
    ad.backward(total)

    grads = {k: nodes[k].grad for k in nodes}
    if cfg.train_hyperparams:
        grads["log_sigma0_sq"] = ls0.grad
        grads["log_sigma2"] = (
            ls2.grad if ls2 is not None else np.zeros_like(state.hyper.log_sigma2)
        )
    adam_step(state.opt_model, state.model_arrays(), grads, direction=+1.0)
    return value


def train(config, X, y, task, metrics_writer=None):
    """Run the full optimization, one reshuffled epoch at a time.

    ``X``/``y`` must already be standardized and split by the caller.
    ``metrics_writer`` receives one :class:`EpochMetrics` per epoch.
    Returns the final state and the metrics history.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    state = init_state(config, X.shape[1], task, n_train=X.shape[0])
    history = run_epochs(state, X, y, config.epochs, metrics_writer)
    return state, history


def run_epochs(state, X, y, epochs, metrics_writer=None):
    """Advance an existing state by ``epochs`` epochs (used by resume)."""
    cfg = state.config
    n = X.shape[0]
    history = []
    for _ in range(epochs):
        start = time.perf_counter()
        beta = annealing_beta(state.epoch, cfg.epochs, cfg.warmup_fraction,
                              cfg.annealing)
        order = state.rngs["shuffle"].permutation(n)
        data_terms, kl_terms = [], []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            value = train_step(state, X[idx], y[idx], beta)
            data_terms.append(value.data_term)
            kl_terms.append(value.kl_term)
        metrics = EpochMetrics(
            epoch=state.epoch,
            data_term=float(np.mean(data_terms)),
            kl_term=float(np.mean(kl_terms)),
            beta=beta,
            seconds=time.perf_counter() - start,
        )
        history.append(metrics)
        if metrics_writer is not None:
            metrics_writer(metrics)
        state.epoch += 1
    return history


# ---------------------------------------------------------------------------
# Posterior and predictive sampling from a trained state
# ---------------------------------------------------------------------------

def sample_posterior_weights(state, k, rng):
    """K flat weight vectors from the trained posterior (values only)."""
    tape = ad.Tape()
    if state.config.method == "vi":
        nodes = leaves(tape, state.q.arrays)
        return gaussian_q_sample(tape, nodes, k, rng).value
    nodes = leaves(tape, state.gen.arrays)
    return sample_weights(tape, state.gen, nodes, k, rng).value


def network_outputs(state, X, k, rng):
    """(K, B) network outputs under K posterior weight samples."""
    w = sample_posterior_weights(state, k, rng)
    tape = ad.Tape()
    return mlp_forward(tape, state.spec, tape.constant(w), np.asarray(X)).value


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "aadm-checkpoint"
CHECKPOINT_VERSION = 1


def _pack_rng(rng):
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: int(v) for k, v in state["state"].items()},
        "has_uint32": int(state.get("has_uint32", 0)),
        "uinteger": int(state.get("uinteger", 0)),
    }


def _unpack_rng(payload):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": payload["bit_generator"],
        "state": payload["state"],
        "has_uint32": payload["has_uint32"],
        "uinteger": payload["uinteger"],
    }
    return rng


def save_checkpoint(state, path):
    """One self-describing .npz blob: config, parameters, optimizer
    moments and rng states; enough to resume exactly."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "task": state.task,
        "input_dim": state.spec.input_dim,
        "epoch": state.epoch,
        "n_train": state.n_train,
        "opt_model": {"t": state.opt_model.t, "skipped": state.opt_model.skipped},
        "opt_disc": (
            {"t": state.opt_disc.t, "skipped": state.opt_disc.skipped}
            if state.opt_disc is not None else None
        ),
        "rngs": {name: _pack_rng(rng) for name, rng in state.rngs.items()},
        "extra": state.extra,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for name, a in state.hyper.arrays().items():
        arrays[f"hyper/{name}"] = a
    group = state.q.arrays if state.config.method == "vi" else state.gen.arrays
    prefix = "q" if state.config.method == "vi" else "gen"
    for name, a in group.items():
        arrays[f"{prefix}/{name}"] = a
    if state.disc is not None:
        for name, a in state.disc.arrays.items():
            arrays[f"disc/{name}"] = a
    for kind, opt in (("model", state.opt_model), ("disc", state.opt_disc)):
        if opt is None:
            continue
        for name, a in opt.m.items():
            arrays[f"adam_{kind}/m/{name}"] = a
        for name, a in opt.v.items():
            arrays[f"adam_{kind}/v/{name}"] = a
    np.savez(path, **arrays)


def load_checkpoint(path):
    with np.load(path) as blob:
        arrays = {name: blob[name].copy() for name in blob.files}
    meta = json.loads(bytes(arrays.pop("meta")).decode())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    config = InferenceConfig.from_dict(meta["config"])
    state = init_state(config, meta["input_dim"], meta["task"], meta["n_train"])
    state.epoch = meta["epoch"]
    for name in state.hyper.arrays():
        state.hyper.arrays()[name][...] = arrays[f"hyper/{name}"]
    group = state.q.arrays if config.method == "vi" else state.gen.arrays
    prefix = "q" if config.method == "vi" else "gen"
    for name in group:
        group[name][...] = arrays[f"{prefix}/{name}"]
    if state.disc is not None:
        for name in state.disc.arrays:
            state.disc.arrays[name][...] = arrays[f"disc/{name}"]
    for kind, opt in (("model", state.opt_model), ("disc", state.opt_disc)):
        if opt is None:
            continue
        blobmeta = meta[f"opt_{kind}"]
        opt.t, opt.skipped = blobmeta["t"], blobmeta["skipped"]
        for name in opt.m:
            opt.m[name][...] = arrays[f"adam_{kind}/m/{name}"]
            opt.v[name][...] = arrays[f"adam_{kind}/v/{name}"]
    state.rngs = {name: _unpack_rng(p) for name, p in meta["rngs"].items()}
    state.extra = meta.get("extra", {})
    return state
