"""Robust training: the TRADES objective, joint adversarial training,
the router/expert alternating bi-level trainer, and the score-based
structured-mask learner for the sparse baseline."""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, pgd, _softmax_np
from .config import ChannelMask
from .model import MoEModel, apply_mask, forward
from .optim import cosine_lr, sgd_step
from .rng import RngStream
from .tensor import (
    ContractError,
    Tensor,
    add,
    backward,
    cross_entropy,
    kl_from_ref,
    mul,
    ste_topk,
    tensor,
)


class NumericalError(ArithmeticError):
    """Training loss left the finite range."""


def default_train_attack(epsilon=8 / 255) -> AttackConfig:
    return AttackConfig(epsilon, steps=2, objective="kl", init="small_gauss")


def default_eval_attack(epsilon=8 / 255) -> AttackConfig:
    return AttackConfig(epsilon, steps=50, objective="ce", init="uniform")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    trades_inv_lambda: float = 6.0
    attack_train: AttackConfig = field(default_factory=default_train_attack)
    attack_eval: AttackConfig = field(default_factory=default_eval_attack)
    seed: int = 0
    frozen: tuple = ()          # subset of {"routers", "backbone"}
    eval_every: int = 1         # 0: evaluate at the final epoch only
    lower_steps: int = 1        # router updates per alternation
    check_isolation: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.trades_inv_lambda < 0:
            raise ContractError("trades_inv_lambda must be >= 0")
        for name in self.frozen:
            if name not in ("routers", "backbone"):
                raise ContractError(f"unknown frozen group {name!r}")


@dataclass
class MaskLearnConfig:
    target_ratio: float
    mask_epochs: int = 10
    finetune_epochs: int = 10
    score_init: str = "random"  # "random" | "ones"
    score_lr: float = 0.01

    def __post_init__(self):
        if not 0 < self.target_ratio <= 1:
            raise ContractError("target_ratio must be in (0, 1]")
        if self.score_init not in ("random", "ones"):
            raise ContractError(f"unknown score_init {self.score_init!r}")


def trades_loss(model: MoEModel, xb, yb, attack_cfg: AttackConfig, inv_lambda: float,
                rng=None, mode=None, channel_gates=None):
    """CE on clean inputs plus inv_lambda * KL(clean ‖ adversarial).

    The KL reference is the clean prediction treated as a constant; the
    inner maximisation runs the attack with the "kl" objective. At
    epsilon = 0 (or inv_lambda = 0) the loss reduces to plain CE exactly.
    """
    if attack_cfg.objective != "kl":
        raise ContractError("trades_loss requires a 'kl' attack objective")
    logits_clean, _ = forward(model, Tensor(np.asarray(xb, dtype=model.dtype)),
                              mode=mode, channel_gates=channel_gates)
    ce = cross_entropy(logits_clean, yb)
    info = {"ce": float(ce.data), "kl": 0.0}
    if inv_lambda > 0 and attack_cfg.epsilon > 0 and attack_cfg.steps > 0:
        delta = pgd(model, xb, yb, attack_cfg, reference_logits=logits_clean.data,
                    rng=rng, channel_gates=channel_gates)
        logits_adv, _ = forward(model, Tensor(xb + delta), mode=mode,
                                channel_gates=channel_gates)
        ref = _softmax_np(logits_clean.data.astype(np.float64)).astype(model.dtype)
        kl = kl_from_ref(ref, logits_adv)
        info["kl"] = float(kl.data)
        loss = add(ce, mul(kl, tensor(inv_lambda, dtype=model.dtype)))
    else:
        loss = ce
    info["loss"] = float(loss.data)
    return loss, info


def _batches(n, batch_size, order):
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _epoch_rows(metrics, epoch, lr, loss_mean, evaluator, model, want_eval):
    rows = [{"epoch": epoch, "split": "train", "sa": None, "ra": None,
             "loss": loss_mean, "lr": lr}]
    if evaluator is not None and want_eval:
        sa, ra = evaluator(model)
        rows.append({"epoch": epoch, "split": "test", "sa": sa, "ra": ra,
                     "loss": None, "lr": lr})
    metrics.extend(rows)


def _want_eval(cfg: TrainConfig, epoch: int) -> bool:
    if epoch == cfg.epochs - 1:
        return True
    return cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0


def _check_finite(value, epoch):
    if not math.isfinite(value):
        raise NumericalError(f"non-finite training loss at epoch {epoch}: {value}")


def at_train(model: MoEModel, dataset, cfg: TrainConfig, evaluator=None,
             channel_gates=None, gate_group=None, checkpoint_cb=None):
    """Joint adversarial training of every non-frozen parameter group.

    With frozen=("backbone",) this is the router-only robustification of a
    pre-trained model; with epsilon = 0 it degenerates to standard
    training. Returns (model, per-epoch metrics rows).
    """
    groups = model.param_groups()
    for name in cfg.frozen:
        groups[name].frozen = True
    trainable = [g for g in groups.values() if g.tensors and not g.frozen]
    if gate_group is not None:
        trainable = [gate_group]
    if not trainable:
        raise ContractError("no trainable parameter groups remain")
    train_params = [t for g in trainable for t in g.tensors]

    velocities = {}
    metrics = []
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        order = RngStream(cfg.seed, f"shuffle/{epoch}").generator().permutation(n)
        losses = []
        for bi, idx in enumerate(_batches(n, cfg.batch_size, order)):
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            rng = RngStream(cfg.seed, f"attack/{epoch}/{bi}").generator()
            gates = None if channel_gates is None else channel_gates()
            loss, info = trades_loss(model, xb, yb, cfg.attack_train,
                                     cfg.trades_inv_lambda, rng=rng,
                                     channel_gates=gates)
            _check_finite(info["loss"], epoch)
            losses.append(info["loss"])
            grads = backward(loss, params=train_params, wrt=train_params)
            for g in trainable:
                sgd_step(g, grads, lr, cfg.momentum, cfg.weight_decay, velocities)
        _epoch_rows(metrics, epoch, lr, float(np.mean(losses)), evaluator, model,
                    _want_eval(cfg, epoch))
        if checkpoint_cb is not None:
            checkpoint_cb(model, epoch)
    for name in cfg.frozen:
        groups[name].frozen = False
    return model, metrics


def advmoe_train(model: MoEModel, dataset, cfg: TrainConfig, evaluator=None,
                 checkpoint_cb=None):
    """Alternating bi-level robust training of routers and backbone.

    Each iteration draws two independent batches; the lower step updates
    only the routers against a fresh attack, the upper step updates only
    the backbone against another fresh attack generated under the just-
    updated routers. Both levels minimise the TRADES loss and share one
    cosine schedule. Parameter-group isolation is asserted bit-exactly
    per step via checksums when check_isolation is set.
    """
    if model.variant != "moe":
        raise ContractError("advmoe_train needs an MoE model")
    groups = model.param_groups()
    if not groups["routers"].tensors:
        raise ContractError("model has no router parameters to alternate on")
    phi, psi = groups["routers"], groups["backbone"]
    phi_params, psi_params = phi.tensors, psi.tensors

    velocities = {}
    metrics = []
    n = len(dataset)
    isolation_checks = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        phi_order = RngStream(cfg.seed, f"shuffle/phi/{epoch}").generator().permutation(n)
        psi_order = RngStream(cfg.seed, f"shuffle/psi/{epoch}").generator().permutation(n)
        losses = []
        for bi, (idx_phi, idx_psi) in enumerate(zip(_batches(n, cfg.batch_size, phi_order),
                                                    _batches(n, cfg.batch_size, psi_order))):
            # lower level: adapt routers to the current backbone
            before_psi = psi.checksum() if cfg.check_isolation else None
            for s in range(cfg.lower_steps):
                rng = RngStream(cfg.seed, f"attack/phi/{epoch}/{bi}/{s}").generator()
                loss, info = trades_loss(model, dataset.images[idx_phi],
                                         dataset.labels[idx_phi], cfg.attack_train,
                                         cfg.trades_inv_lambda, rng=rng)
                _check_finite(info["loss"], epoch)
                grads = backward(loss, params=phi_params, wrt=phi_params)
                sgd_step(phi, grads, lr, cfg.momentum, cfg.weight_decay, velocities)
            if cfg.check_isolation:
                if psi.checksum() != before_psi:
                    raise ContractError("lower step modified backbone parameters")
                isolation_checks += 1

            # upper level: robustify the backbone under the adapted routers
            before_phi = phi.checksum() if cfg.check_isolation else None
            rng = RngStream(cfg.seed, f"attack/psi/{epoch}/{bi}").generator()
            loss, info = trades_loss(model, dataset.images[idx_psi],
                                     dataset.labels[idx_psi], cfg.attack_train,
                                     cfg.trades_inv_lambda, rng=rng)
            _check_finite(info["loss"], epoch)
            losses.append(info["loss"])
            grads = backward(loss, params=psi_params, wrt=psi_params)
            sgd_step(psi, grads, lr, cfg.momentum, cfg.weight_decay, velocities)
            if cfg.check_isolation:
                if phi.checksum() != before_phi:
                    raise ContractError("upper step modified router parameters")
                isolation_checks += 1
        _epoch_rows(metrics, epoch, lr, float(np.mean(losses)), evaluator, model,
                    _want_eval(cfg, epoch))
        if checkpoint_cb is not None:
            checkpoint_cb(model, epoch)
    model._isolation_checks = isolation_checks
    return model, metrics


def learn_robust_mask(dense_model: MoEModel, dataset, mask_cfg: MaskLearnConfig,
                      cfg: TrainConfig, evaluator=None):
    """Two-phase robust structured-mask learning for the sparse baseline.

    Phase 1 trains one score per channel (weights frozen): the forward
    multiplies each unit's channels by a straight-through top-k mask of
    the scores, and the scores follow the TRADES gradient. Phase 2 fixes
    the mask at the top scores and finetunes the weights under it.

    This is a deliberately simplified score-based stand-in for full
    robustness-aware pruning pipelines.
    """
    if dense_model.variant != "dense":
        raise ContractError("mask learning starts from a dense model")
    r = mask_cfg.target_ratio
    widths = [u.spec.out_channels for u in dense_model.units]
    ks = [math.ceil(r * c) for c in widths]
    if any(k < 1 for k in ks):
        raise ContractError("target_ratio leaves a layer without channels")

    g = RngStream(cfg.seed, "mask_scores").generator()
    scores = []
    for c in widths:
        if mask_cfg.score_init == "random":
            init = (g.standard_normal(c) * 0.01).astype(dense_model.dtype)
        else:
            init = np.ones(c, dtype=dense_model.dtype)
        scores.append(Tensor(init, requires_grad=True))

    from .optim import ParamGroup

    rows1 = []
    if mask_cfg.mask_epochs > 0:
        score_group = ParamGroup("scores", scores)
        phase1 = replace(cfg, epochs=mask_cfg.mask_epochs, lr0=mask_cfg.score_lr,
                         weight_decay=0.0)
        gates = lambda: [ste_topk(s, k) for s, k in zip(scores, ks)]
        _, rows1 = at_train(dense_model, dataset, phase1, evaluator=None,
                            channel_gates=gates, gate_group=score_group)

    layers = []
    for s, k in zip(scores, ks):
        order = np.argsort(-s.data, kind="stable")
        layers.append(tuple(sorted(int(i) for i in order[:k])))
    mask = ChannelMask(r, tuple(layers))

    sparse = apply_mask(dense_model, mask)
    phase2 = replace(cfg, epochs=mask_cfg.finetune_epochs)
    sparse, rows2 = at_train(sparse, dataset, phase2, evaluator=evaluator)
    return mask, sparse, rows1 + rows2
