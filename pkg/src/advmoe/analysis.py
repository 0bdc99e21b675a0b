"""Evaluation and diagnostic instruments: SA/RA, robustness dissection,
pathway-vs-mask IoU, and grid sweeps."""

from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, pgd
from .config import ChannelMask
from .model import MoEModel, forward
from .rng import RngStream
from .tensor import ContractError


@dataclass
class EvalReport:
    sa: float  # standard accuracy, percent
    ra: float  # robust accuracy under the attack, percent
    n_samples: int
    attack: dict


@dataclass
class DissectionReport:
    """Fractions of the four attack-outcome categories.

    f1: neither routing nor prediction attacked successfully
    f2: routing changed, prediction still correct
    f3: prediction wrong, routing intact
    f4: both succeeded

    Routing robustness is f1 + f3 (pathway unchanged); prediction
    robustness is f1 + f2 and coincides with RA. A clean misclassification
    counts as a successful prediction attack, so the epsilon = 0 report is
    (SA, 0, 1 - SA, 0).
    """

    f1: float
    f2: float
    f3: float
    f4: float
    n_samples: int


@dataclass
class IoUResult:
    value: float
    split: str  # "clean" | "adversarial"


def _batch_ranges(n, batch_size):
    return [(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def _attack_rng(seed, cfg, bi):
    return RngStream(seed, f"{cfg.stream}/eval/{bi}").generator()


def evaluate(model: MoEModel, dataset, attack_cfg: AttackConfig,
             batch_size: int = 128, seed: int = 0) -> EvalReport:
    """Standard and robust accuracy over a dataset.

    Deterministic given (model, dataset, seed): batches run in dataset
    order and the attack stream is derived per batch from the seed.
    """
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot evaluate an empty dataset")
    sa_hits = ra_hits = 0
    for bi, (lo, hi) in enumerate(_batch_ranges(n, batch_size)):
        xb, yb = dataset.images[lo:hi], dataset.labels[lo:hi]
        logits, _ = forward(model, xb)
        sa_hits += int((logits.data.argmax(axis=1) == yb).sum())
        delta = pgd(model, xb, yb, attack_cfg, rng=_attack_rng(seed, attack_cfg, bi))
        adv_logits, _ = forward(model, xb + delta)
        ra_hits += int((adv_logits.data.argmax(axis=1) == yb).sum())
    return EvalReport(sa=100.0 * sa_hits / n, ra=100.0 * ra_hits / n,
                      n_samples=n, attack=attack_cfg.to_dict())


def dissect(model: MoEModel, dataset, attack_cfg: AttackConfig,
            batch_size: int = 128, seed: int = 0):
    """Four-way split of attack outcomes on an MoE model.

    Shares the attack derivation with evaluate(), so the prediction-
    robustness fraction f1 + f2 equals evaluate().ra exactly on the same
    seed. Returns (DissectionReport, EvalReport).
    """
    if model.variant != "moe":
        raise ContractError("dissection requires an MoE model")
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot dissect an empty dataset")
    counts = np.zeros(4, dtype=np.int64)
    sa_hits = ra_hits = 0
    for bi, (lo, hi) in enumerate(_batch_ranges(n, batch_size)):
        xb, yb = dataset.images[lo:hi], dataset.labels[lo:hi]
        logits, trace_clean = forward(model, xb)
        sa_hits += int((logits.data.argmax(axis=1) == yb).sum())
        delta = pgd(model, xb, yb, attack_cfg, rng=_attack_rng(seed, attack_cfg, bi))
        adv_logits, trace_adv = forward(model, xb + delta)
        pred_ok = adv_logits.data.argmax(axis=1) == yb
        ra_hits += int(pred_ok.sum())
        route_ok = (trace_clean.expert_indices == trace_adv.expert_indices).all(axis=1)
        counts[0] += int((route_ok & pred_ok).sum())
        counts[1] += int((~route_ok & pred_ok).sum())
        counts[2] += int((route_ok & ~pred_ok).sum())
        counts[3] += int((~route_ok & ~pred_ok).sum())
    f = counts / n
    report = DissectionReport(f1=float(f[0]), f2=float(f[1]), f3=float(f[2]),
                              f4=float(f[3]), n_samples=n)
    ev = EvalReport(sa=100.0 * sa_hits / n, ra=100.0 * ra_hits / n,
                    n_samples=n, attack=attack_cfg.to_dict())
    return report, ev


def pathway_iou(model: MoEModel, mask: ChannelMask, dataset,
                attack_cfg: AttackConfig | None = None, batch_size: int = 128,
                seed: int = 0):
    """IoU of each input's pathway against a static mask.

    Elements are (unit, channel) pairs pooled over all routed units. With
    an attack config the adversarial inputs' pathways are scored too.
    """
    if model.variant != "moe":
        raise ContractError("pathway IoU requires an MoE model")
    if len(mask.layers) != len(model.units):
        raise ContractError(f"mask covers {len(mask.layers)} units, model has {len(model.units)}")
    mask_set = {(ui, c) for ui, row in enumerate(mask.layers) for c in row}
    results = []
    n = len(dataset)
    for bi, (lo, hi) in enumerate(_batch_ranges(n, batch_size)):
        xb, yb = dataset.images[lo:hi], dataset.labels[lo:hi]
        _, trace = forward(model, xb)
        for pw in trace.pathway_sets(model.partitions, model.router_groups):
            inter = len(pw & mask_set)
            union = len(pw | mask_set)
            results.append(IoUResult(inter / union if union else 1.0, "clean"))
        if attack_cfg is not None:
            delta = pgd(model, xb, yb, attack_cfg, rng=_attack_rng(seed, attack_cfg, bi))
            _, trace_adv = forward(model, xb + delta)
            for pw in trace_adv.pathway_sets(model.partitions, model.router_groups):
                inter = len(pw & mask_set)
                union = len(pw | mask_set)
                results.append(IoUResult(inter / union if union else 1.0, "adversarial"))
    return results


def iou_histogram(results, bins: int = 20):
    """Uniform histogram over [0, 1]; returns (edges, counts per split)."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = {}
    for split in ("clean", "adversarial"):
        vals = [r.value for r in results if r.split == split]
        if vals:
            counts, _ = np.histogram(vals, bins=edges)
            out[split] = counts
    return edges, out


def sweep(run_cell, num_experts, model_scales, methods, seeds):
    """Long-format table over an (N, r, method, seed) grid.

    ``run_cell(n, r, method, seed)`` trains and evaluates one cell and
    returns a dict with at least sa, ra, gflops.
    """
    if not (num_experts and model_scales and methods and seeds):
        raise ContractError("sweep grid must be non-empty")
    rows = []
    for n in num_experts:
        for r in model_scales:
            for method in methods:
                for seed in seeds:
                    cell = run_cell(n, r, method, seed)
                    row = {"N": n, "r": r, "method": method, "seed": seed}
                    row.update(cell)
                    rows.append(row)
    return rows
