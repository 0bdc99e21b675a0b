"""L-infinity projected gradient descent against any model variant."""

from dataclasses import dataclass

import numpy as np

from .model import MoEModel, forward
from .rng import RngStream
from .tensor import ContractError, Tensor, backward, cross_entropy, kl_from_ref

_SMALL_GAUSS_SIGMA = 1e-3


@dataclass(frozen=True)
class AttackConfig:
    """Budget and schedule of one PGD attack.

    ``step_size=None`` resolves to 2.5 * eps / steps, raised to eps / 4
    for very short schedules (steps <= 2).
    """

    epsilon: float
    steps: int = 50
    step_size: float | None = None
    objective: str = "ce"  # "ce" | "kl"
    init: str = "uniform"  # "zero" | "uniform" | "small_gauss"
    stream: str = "attack"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractError("epsilon must be >= 0")
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        if self.objective not in ("ce", "kl"):
            raise ContractError(f"unknown objective {self.objective!r}")
        if self.init not in ("zero", "uniform", "small_gauss"):
            raise ContractError(f"unknown init {self.init!r}")
        if self.step_size is not None and self.step_size <= 0 and self.steps > 0:
            raise ContractError("step_size must be positive")

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.steps == 0:
            return 0.0
        alpha = 2.5 * self.epsilon / self.steps
        if self.steps <= 2:
            alpha = max(alpha, self.epsilon / 4)
        return alpha

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "steps": self.steps, "step_size": self.step_size,
                "objective": self.objective, "init": self.init, "stream": self.stream}

    @staticmethod
    def from_dict(d: dict) -> "AttackConfig":
        return AttackConfig(d["epsilon"], d["steps"], d.get("step_size"),
                            d.get("objective", "ce"), d.get("init", "uniform"),
                            d.get("stream", "attack"))


def project_linf(delta: np.ndarray, epsilon: float, x: np.ndarray) -> np.ndarray:
    """Clamp delta into the eps-ball, then keep x + delta inside [0, 1].

    The ball radius is rounded *down* to delta's dtype and re-applied
    after the box clamp, so the returned delta respects both constraints
    even at float32 resolution.
    """
    eps_t = np.asarray(epsilon, dtype=delta.dtype)
    if float(eps_t) > epsilon:
        eps_t = np.nextafter(eps_t, np.asarray(0.0, dtype=delta.dtype))
    delta = np.clip(delta, -eps_t, eps_t)
    delta = np.clip(x + delta, 0.0, 1.0) - x
    return np.clip(delta, -eps_t, eps_t)


def _softmax_np(z):
    zs = z - z.max(axis=-1, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=-1, keepdims=True)


def pgd(model, x, y, cfg: AttackConfig, reference_logits=None,
        rng: np.random.Generator | None = None, channel_gates=None) -> np.ndarray:
    """Signed-gradient ascent inside the eps-ball; returns delta.

    Model parameters are never updated. Routing is hard (straight-through)
    during the attack forward, so input gradients reach both routers and
    experts. The "kl" objective maximises divergence from the constant
    ``reference_logits`` (typically the clean-input logits). ``model`` may
    also be a bare callable mapping an input Tensor to logits.
    """
    is_model = isinstance(model, MoEModel)
    dtype = model.dtype if is_model else np.float32
    x = np.asarray(x, dtype=dtype)
    if cfg.objective == "kl":
        if reference_logits is None:
            raise ContractError("kl objective needs reference_logits")
        ref_probs = _softmax_np(np.asarray(reference_logits, dtype=np.float64)).astype(dtype)
    if rng is None:
        rng = RngStream(0, cfg.stream).generator()

    if cfg.init == "zero":
        delta = np.zeros_like(x)
    elif cfg.init == "uniform":
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(dtype)
    else:
        delta = (rng.standard_normal(x.shape) * _SMALL_GAUSS_SIGMA).astype(dtype)
    delta = project_linf(delta, cfg.epsilon, x)

    if cfg.steps == 0 or cfg.epsilon == 0.0:
        return delta

    alpha = cfg.resolved_step_size()
    mode = "hard" if is_model and model.variant == "moe" else None
    for _ in range(cfg.steps):
        xt = Tensor(x + delta, requires_grad=True)
        if is_model:
            logits, _ = forward(model, xt, mode=mode, channel_gates=channel_gates)
        else:
            logits = model(xt)
        if cfg.objective == "ce":
            loss = cross_entropy(logits, y)
        else:
            loss = kl_from_ref(ref_probs, logits)
        grads = backward(loss, wrt=[xt])
        g = grads.get(xt)
        if g is None:
            break  # gradient-free model; nothing to ascend
        delta = project_linf(delta + alpha * np.sign(g), cfg.epsilon, x)
    return delta
