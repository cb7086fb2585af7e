"""Sources of the score field grad_x log p_t(x_t).

Three backends share one contract: analytic isotropic-Gaussian and Gaussian-
mixture oracles (exact scores of schedule-corrupted marginals) and an MLP
denoiser trained by denoising score matching. All models output the gradient
of the log density (+grad log p convention); the typicality module negates
the Jacobian trace where its statistic calls for curvature.

Noise levels are either a discrete step index (int, resolved through the
model's schedule) or a raw continuous sigma (float, treated as a pseudo-step
with alpha_bar = 1).

Directional derivatives of the score map are exact forward-mode quantities:
every layer of the MLP propagates a (primal, tangent) pair, so ``jvp``
returns the true Jacobian-vector product, never a finite difference.
"""

from __future__ import annotations

import math
import threading
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from ._binio import Reader, Writer, fnv1a64
from .errors import InputError, NumericalError
from .schedule import LogNormalSigmaPrior, NoiseSchedule
from .seeding import STREAM_INIT, STREAM_TRAIN, derive_rng

MAGIC_MODEL = b"SCPD"
FORMAT_VERSION = 1

_KIND_MLP, _KIND_GAUSSIAN, _KIND_GMM = 0, 1, 2
_PARAM_TAGS = ("eps", "denoiser")
_ACTIVATIONS = ("tanh", "silu", "relu")


class ScoreModel(ABC):
    """Anything that can produce scores and exact score-Jacobian JVPs."""

    @abstractmethod
    def evaluate(self, x: np.ndarray, noise_level) -> np.ndarray:
        """Score of the noise-level marginal at x; same shape as x."""

    @abstractmethod
    def jvp(self, x: np.ndarray, noise_level, v: np.ndarray):
        """(score, J v) where J is the Jacobian of the score map at x.

        The first output is bit-identical to :meth:`evaluate`.
        """

    @abstractmethod
    def to_bytes(self) -> bytes:
        """Canonical serialized form (also the fingerprint input)."""

    def fingerprint(self) -> int:
        return fnv1a64(self.to_bytes())


def _as_vector(x, dim: int, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise InputError(f"{name} has shape {x.shape}, expected ({dim},)")
    return x


def _require_schedule(model, noise_level):
    if model.schedule is None:
        raise InputError(
            f"model has no schedule attached; cannot resolve step {noise_level}"
        )
    return model.schedule


class AnalyticGaussianScore(ScoreModel):
    """Exact score of an isotropic Gaussian, composed with forward corruption.

    At step t the corrupted marginal of N(mean, base_variance I) is
    N(sqrt(ab_t) mean, (ab_t base_variance + sigma_t^2) I); at a continuous
    sigma it is N(mean, (base_variance + sigma^2) I). The score is
    -(x - center) / variance and the Jacobian is -I / variance.
    """

    def __init__(self, mean, base_variance: float, schedule: NoiseSchedule | None = None):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        if not (base_variance > 0 and math.isfinite(base_variance)):
            raise InputError("base_variance must be positive and finite")
        self.base_variance = float(base_variance)
        self.schedule = schedule

    @property
    def dim(self) -> int:
        return self.mean.size

    def marginal(self, noise_level):
        """(center, variance) of the corrupted marginal at this level."""
        if isinstance(noise_level, (int, np.integer)):
            sched = _require_schedule(self, noise_level)
            ab = sched.alpha_bar(noise_level)
            return np.sqrt(ab) * self.mean, ab * self.base_variance + sched.sigma(noise_level) ** 2
        sigma = float(noise_level)
        if sigma < 0:
            raise InputError("sigma must be >= 0")
        return self.mean, self.base_variance + sigma**2

    def evaluate(self, x, noise_level):
        x = _as_vector(x, self.dim)
        center, var = self.marginal(noise_level)
        return -(x - center) / var

    def jvp(self, x, noise_level, v):
        x = _as_vector(x, self.dim)
        v = _as_vector(v, self.dim, "v")
        center, var = self.marginal(noise_level)
        return -(x - center) / var, -v / var

    def to_bytes(self) -> bytes:
        w = Writer()
        w.magic(MAGIC_MODEL)
        w.u32(FORMAT_VERSION)
        w.u8(_KIND_GAUSSIAN)
        w.u32(self.dim)
        w.array(self.mean)
        w.f64(self.base_variance)
        return w.getvalue()


class GmmScore(ScoreModel):
    """Exact score of an isotropic-component Gaussian mixture.

    Component responsibilities are computed with log-sum-exp; the JVP uses
    the closed form (grad s) v = -v sum_k r_k / v_k
    + sum_k r_k ((g_k - s) . v) g_k with g_k the component scores.
    """

    def __init__(self, weights, means, variances, schedule: NoiseSchedule | None = None):
        self.weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        self.means = np.asarray(means, dtype=np.float64)
        self.variances = np.asarray(variances, dtype=np.float64).reshape(-1)
        if self.means.ndim != 2:
            raise InputError("means must be a (K, d) array")
        K = self.weights.size
        if K < 1 or self.means.shape[0] != K or self.variances.size != K:
            raise InputError("weights, means and variances must agree on K >= 1")
        if np.any(self.weights < 0) or not math.isclose(self.weights.sum(), 1.0, rel_tol=1e-9):
            raise InputError("weights must be non-negative and sum to 1")
        if np.any(self.variances <= 0):
            raise InputError("component variances must be positive")
        self.schedule = schedule

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def marginal(self, noise_level):
        """(centers, variances) of the corrupted mixture at this level."""
        if isinstance(noise_level, (int, np.integer)):
            sched = _require_schedule(self, noise_level)
            ab = sched.alpha_bar(noise_level)
            return np.sqrt(ab) * self.means, ab * self.variances + sched.sigma(noise_level) ** 2
        sigma = float(noise_level)
        if sigma < 0:
            raise InputError("sigma must be >= 0")
        return self.means, self.variances + sigma**2

    def _responsibilities(self, x, centers, variances):
        d = self.dim
        sq = np.sum((x[None, :] - centers) ** 2, axis=1)
        logits = np.log(np.maximum(self.weights, 1e-300)) - 0.5 * sq / variances \
            - 0.5 * d * np.log(2.0 * np.pi * variances)
        m = np.max(logits)
        r = np.exp(logits - m)
        return r / np.sum(r)

    def evaluate(self, x, noise_level):
        x = _as_vector(x, self.dim)
        centers, variances = self.marginal(noise_level)
        r = self._responsibilities(x, centers, variances)
        g = -(x[None, :] - centers) / variances[:, None]
        return r @ g

    def jvp(self, x, noise_level, v):
        x = _as_vector(x, self.dim)
        v = _as_vector(v, self.dim, "v")
        centers, variances = self.marginal(noise_level)
        r = self._responsibilities(x, centers, variances)
        g = -(x[None, :] - centers) / variances[:, None]
        s = r @ g
        jv = -v * np.sum(r / variances) + ((g - s[None, :]) @ v * r) @ g
        return s, jv

    def to_bytes(self) -> bytes:
        w = Writer()
        w.magic(MAGIC_MODEL)
        w.u32(FORMAT_VERSION)
        w.u8(_KIND_GMM)
        w.u32(self.dim)
        w.u32(self.weights.size)
        w.array(self.weights)
        w.array(self.means.reshape(-1))
        w.array(self.variances)
        return w.getvalue()


def gaussian_score(model: AnalyticGaussianScore, x) -> np.ndarray:
    """Score of the base (uncorrupted) Gaussian at x."""
    return model.evaluate(x, 0.0)


def gmm_score(model: GmmScore, x) -> np.ndarray:
    """Score of the base (uncorrupted) mixture at x."""
    return model.evaluate(x, 0.0)


def score_from_eps(eps_pred, sigma_t: float) -> np.ndarray:
    """Score implied by a noise prediction: -eps_pred / sigma_t."""
    if not sigma_t > 0:
        raise InputError("sigma_t must be > 0")
    return -np.asarray(eps_pred, dtype=np.float64) / float(sigma_t)


def score_from_denoiser(d_out, x, sigma: float) -> np.ndarray:
    """Score implied by a denoised point: (d_out - x) / sigma^2."""
    if not sigma > 0:
        raise InputError("sigma must be > 0")
    d_out = np.asarray(d_out, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if d_out.shape != x.shape:
        raise InputError("d_out and x must have the same shape")
    return (d_out - x) / float(sigma) ** 2


def jvp_score(model: ScoreModel, x, noise_level, v):
    """(score, J v) via the model's exact forward-mode facility."""
    return model.jvp(x, noise_level, v)


# ---------------------------------------------------------------------------
# MLP denoiser
# ---------------------------------------------------------------------------


def _act_tanh(a):
    h = np.tanh(a)
    return h, 1.0 - h * h


def _act_silu(a):
    with np.errstate(over="ignore"):  # exp overflow saturates cleanly to s=0
        s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s * (1.0 + a * (1.0 - s))


def _act_relu(a):
    mask = a > 0.0
    return np.where(mask, a, 0.0), mask.astype(np.float64)


_ACT_FNS = {"tanh": _act_tanh, "silu": _act_silu, "relu": _act_relu}


class MlpDenoiser(ScoreModel):
    """Fully-connected score network conditioned on the noise scale.

    The network input is the per-coordinate standardized point concatenated
    with a noise embedding (raw sigma plus sin/cos features of log sigma).
    The output is interpreted per ``parameterization``:

    * ``eps``: predicted noise, score = -out / sigma
    * ``denoiser``: standardized denoised point, score = (unstd(out) - x) / sigma^2
    """

    def __init__(self, dim: int, hidden=(128, 128, 128), activation: str = "tanh",
                 parameterization: str = "eps", emb_freqs: int = 4, seed: int = 0,
                 schedule: NoiseSchedule | None = None):
        if dim < 1:
            raise InputError("dim must be >= 1")
        if parameterization not in _PARAM_TAGS:
            raise InputError(f"unknown parameterization {parameterization!r}")
        if activation not in _ACT_FNS:
            raise InputError(f"unknown activation {activation!r}")
        if activation == "relu":
            warnings.warn(
                "relu gives a piecewise-constant score-Jacobian trace; "
                "prefer a smooth activation for curvature estimates"
            )
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.parameterization = parameterization
        self.emb_freqs = int(emb_freqs)
        self.schedule = schedule
        self.norm_mu = np.zeros(dim)
        self.norm_scale = np.ones(dim)

        n_in = dim + 1 + 2 * self.emb_freqs
        sizes = [n_in, *self.hidden, dim]
        rng = derive_rng(seed, STREAM_INIT)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    # -- noise handling ----------------------------------------------------

    def _sigma_of(self, noise_level) -> float:
        if isinstance(noise_level, (int, np.integer)):
            return _require_schedule(self, noise_level).sigma(noise_level)
        sigma = float(noise_level)
        if not sigma > 0:
            raise InputError("continuous sigma must be > 0 for the MLP")
        return sigma

    def _embed(self, sigma: float) -> np.ndarray:
        feats = np.empty(1 + 2 * self.emb_freqs)
        feats[0] = sigma
        if self.emb_freqs:
            xi = math.log(sigma)
            freqs = 2.0 ** np.arange(self.emb_freqs)
            feats[1::2] = np.sin(freqs * xi)
            feats[2::2] = np.cos(freqs * xi)
        return feats

    def _embed_batch(self, sigmas: np.ndarray) -> np.ndarray:
        feats = np.empty((sigmas.size, 1 + 2 * self.emb_freqs))
        feats[:, 0] = sigmas
        if self.emb_freqs:
            xi = np.log(sigmas)[:, None] * (2.0 ** np.arange(self.emb_freqs))
            feats[:, 1::2] = np.sin(xi)
            feats[:, 2::2] = np.cos(xi)
        return feats

    # -- single-point forward pass (scoring path) --------------------------

    def _forward(self, x: np.ndarray, sigma: float, v: np.ndarray | None):
        """Score (and its tangent along v) at one point.

        The primal arithmetic is identical whether or not a tangent rides
        along, so ``jvp``'s first output matches ``evaluate`` bit for bit.
        """
        act = _ACT_FNS[self.activation]
        h = np.concatenate([(x - self.norm_mu) / self.norm_scale, self._embed(sigma)])
        hdot = None
        if v is not None:
            hdot = np.concatenate([v / self.norm_scale, np.zeros(1 + 2 * self.emb_freqs)])
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = W @ h + b
            if hdot is not None:
                adot = W @ hdot
            h, deriv = act(a)
            if hdot is not None:
                hdot = deriv * adot
        out = self.weights[-1] @ h + self.biases[-1]
        outdot = None if hdot is None else self.weights[-1] @ hdot

        if self.parameterization == "eps":
            score = -out / sigma
            sdot = None if outdot is None else -outdot / sigma
        else:
            denoised = self.norm_mu + self.norm_scale * out
            score = (denoised - x) / sigma**2
            sdot = None if outdot is None else (self.norm_scale * outdot - v) / sigma**2
        return score, sdot

    def evaluate(self, x, noise_level):
        x = _as_vector(x, self.dim)
        score, _ = self._forward(x, self._sigma_of(noise_level), None)
        return score

    def jvp(self, x, noise_level, v):
        x = _as_vector(x, self.dim)
        v = _as_vector(v, self.dim, "v")
        return self._forward(x, self._sigma_of(noise_level), v)

    # -- batched net pass (training path) -----------------------------------

    def _net_batch(self, x_t: np.ndarray, sigmas: np.ndarray):
        """Raw network output for a batch; returns caches for backprop."""
        act = _ACT_FNS[self.activation]
        u = (x_t - self.norm_mu) / self.norm_scale
        h = np.concatenate([u, self._embed_batch(sigmas)], axis=1)
        hs, derivs = [h], []
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = h @ W.T + b
            h, deriv = act(a)
            hs.append(h)
            derivs.append(deriv)
        out = h @ self.weights[-1].T + self.biases[-1]
        return out, hs, derivs

    def _net_backward(self, dout: np.ndarray, hs, derivs):
        """Parameter gradients given d(loss)/d(out)."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        delta = dout
        for layer in range(len(self.weights) - 1, -1, -1):
            grads_w[layer] = delta.T @ hs[layer]
            grads_b[layer] = delta.sum(axis=0)
            if layer > 0:
                delta = (delta @ self.weights[layer]) * derivs[layer - 1]
        return grads_w, grads_b

    def _params(self):
        return self.weights + self.biases

    def set_standardization(self, mu: np.ndarray, scale: np.ndarray):
        mu = np.asarray(mu, dtype=np.float64).reshape(-1)
        scale = np.asarray(scale, dtype=np.float64).reshape(-1)
        if mu.size != self.dim or scale.size != self.dim:
            raise InputError("standardization stats must match data dimension")
        self.norm_mu = mu
        self.norm_scale = scale

    def to_bytes(self) -> bytes:
        w = Writer()
        w.magic(MAGIC_MODEL)
        w.u32(FORMAT_VERSION)
        w.u8(_KIND_MLP)
        w.u8(_PARAM_TAGS.index(self.parameterization))
        w.u8(_ACTIVATIONS.index(self.activation))
        w.u32(self.dim)
        w.u32(self.emb_freqs)
        w.u32(len(self.hidden))
        for width in self.hidden:
            w.u32(width)
        w.array(self.norm_mu)
        w.array(self.norm_scale)
        flat = np.concatenate([p.reshape(-1) for p in self._params()])
        w.u64(flat.size)
        w.array(flat)
        return w.getvalue()


# ---------------------------------------------------------------------------
# Denoising score matching
# ---------------------------------------------------------------------------


@dataclass
class DsmTrainConfig:
    """Hyperparameters for denoising score matching."""

    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    noise_sampling: str = "uniform-step"  # or "lognormal-sigma"
    weight_rule: str = "sigma2"           # or "uniform"
    seed: int = 0
    sigma_prior: LogNormalSigmaPrior | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise InputError("learning rate must be > 0")
        if self.noise_sampling not in ("uniform-step", "lognormal-sigma"):
            raise InputError(f"unknown noise_sampling {self.noise_sampling!r}")
        if self.weight_rule not in ("sigma2", "uniform"):
            raise InputError(f"unknown weight_rule {self.weight_rule!r}")
        if self.noise_sampling == "lognormal-sigma" and self.sigma_prior is None:
            raise InputError("lognormal-sigma sampling needs a sigma_prior")


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def train_dsm(model: MlpDenoiser, dataset: np.ndarray,
              schedule: NoiseSchedule | None, cfg: DsmTrainConfig):
    """Train the denoiser on the weighted score-matching residual.

    Minimizes the Monte Carlo estimate of E[w * ||s_theta(x_t, sigma) +
    eps/sigma||^2] with w(t) = sigma_t^2 by default (the noise-prediction
    form). Deterministic given cfg.seed. Returns (model, per-epoch losses).
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 2 or dataset.shape[0] == 0:
        raise InputError("dataset must be a non-empty (n, d) array")
    if dataset.shape[1] != model.dim:
        raise InputError("dataset dimension does not match model")
    if cfg.noise_sampling == "uniform-step":
        if schedule is None:
            raise InputError("uniform-step sampling needs a schedule")
        model.schedule = schedule

    n, d = dataset.shape
    mu = dataset.mean(axis=0)
    std = dataset.std(axis=0)
    model.set_standardization(mu, np.where(std > 1e-12, std, 1.0))

    rng = derive_rng(cfg.seed, STREAM_TRAIN)
    optimizer = _Adam(model._params(), cfg.lr)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            x0 = dataset[order[start:start + cfg.batch_size]]
            B = x0.shape[0]
            if cfg.noise_sampling == "uniform-step":
                steps = rng.integers(1, schedule.T + 1, size=B)
                ab = schedule.alpha_bars[steps - 1]
                sigmas = schedule.sigmas[steps - 1]
            else:
                prior = cfg.sigma_prior
                sigmas = np.exp(prior.mu + prior.sigma_log * rng.standard_normal(B))
                ab = np.ones(B)
            eps = rng.standard_normal((B, d))
            x_t = np.sqrt(ab)[:, None] * x0 + sigmas[:, None] * eps

            out, hs, derivs = model._net_batch(x_t, sigmas)
            mult = np.ones(B) if cfg.weight_rule == "sigma2" else 1.0 / sigmas**2
            if model.parameterization == "eps":
                resid = eps - out                        # sigma * score + eps
                dout = (-2.0 / B) * mult[:, None] * resid
            else:
                denoised = model.norm_mu + model.norm_scale * out
                resid = (denoised - x_t) / sigmas[:, None] + eps
                dout = (2.0 / B) * (mult / sigmas)[:, None] * resid * model.norm_scale

            loss = float(np.mean(mult * np.sum(resid * resid, axis=1)))
            if not math.isfinite(loss):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"batch starting at {start} (lr too high or bad data?)"
                )
            grads_w, grads_b = model._net_backward(dout, hs, derivs)
            optimizer.step(model._params(), grads_w + grads_b)
            epoch_loss += loss
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    return model, np.asarray(losses)


# ---------------------------------------------------------------------------
# Serialization and instrumentation
# ---------------------------------------------------------------------------


def save_model(model: ScoreModel, path):
    with open(path, "wb") as fh:
        fh.write(model.to_bytes())


def load_model(path, schedule: NoiseSchedule | None = None) -> ScoreModel:
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    r.magic(MAGIC_MODEL)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported model format version {version}")
    kind = r.u8()
    if kind == _KIND_GAUSSIAN:
        dim = r.u32()
        mean = r.array(dim)
        return AnalyticGaussianScore(mean, r.f64(), schedule=schedule)
    if kind == _KIND_GMM:
        dim = r.u32()
        K = r.u32()
        weights = r.array(K)
        means = r.array(K * dim).reshape(K, dim)
        return GmmScore(weights, means, r.array(K), schedule=schedule)
    if kind != _KIND_MLP:
        raise InputError(f"unknown model kind {kind}")
    param_tag = _PARAM_TAGS[r.u8()]
    activation = _ACTIVATIONS[r.u8()]
    dim = r.u32()
    emb_freqs = r.u32()
    hidden = tuple(r.u32() for _ in range(r.u32()))
    norm_mu = r.array(dim)
    norm_scale = r.array(dim)
    flat = r.array(r.u64())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # relu warning already issued at train time
        model = MlpDenoiser(dim, hidden, activation, param_tag, emb_freqs, schedule=schedule)
    model.set_standardization(norm_mu, norm_scale)
    offset = 0
    for p in model._params():
        p[...] = flat[offset:offset + p.size].reshape(p.shape)
        offset += p.size
    if offset != flat.size:
        raise InputError("parameter payload size mismatch")
    if not np.all(np.isfinite(flat)):
        raise InputError("model parameters must be finite")
    return model


class CallCounter(ScoreModel):
    """Wrapper that counts forward evaluations and JVPs for NFE accounting.

    Increments are lock-guarded so counts stay exact under threaded batch
    scoring.
    """

    def __init__(self, inner: ScoreModel):
        self.inner = inner
        self.n_forward = 0
        self.n_jvp = 0
        self._lock = threading.Lock()

    @property
    def schedule(self):
        return self.inner.schedule

    @property
    def dim(self):
        return self.inner.dim

    def evaluate(self, x, noise_level):
        with self._lock:
            self.n_forward += 1
        return self.inner.evaluate(x, noise_level)

    def jvp(self, x, noise_level, v):
        with self._lock:
            self.n_jvp += 1
        return self.inner.jvp(x, noise_level, v)

    def to_bytes(self) -> bytes:
        return self.inner.to_bytes()
