"""Instance-guided resampling.

For each instance, Gaussians with a weak response are overwritten by
replicas of Gaussians with a strong response; afterwards opacity and
occupancy of every source and its replicas are rescaled so the coincident
cluster composites to the source's original value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import GaussianSet, _quat_to_rotmat, effective_identities, effective_identity, logit
from .errors import UsageError

EPS = 1e-4
MAX_RETRIES = 16


def instance_response(gaussians: GaussianSet, i: int, k: int) -> float:
    """Occupancy times calibrated identity of Gaussian ``i`` for instance ``k`` (1-based)."""
    return float(gaussians.occupancy[i] * effective_identity(gaussians, i)[k - 1])


def instance_responses(gaussians: GaussianSet) -> np.ndarray:
    return gaussians.occupancy[:, None] * effective_identities(gaussians)


def sampling_distributions(responses, eps: float = EPS):
    """``(weak, strong)`` distributions from a response vector clamped to [eps, 1]."""
    clamped = np.clip(np.asarray(responses, dtype=np.float64), eps, 1.0)
    strong = clamped / clamped.sum()
    inv = 1.0 / clamped
    weak = inv / inv.sum()
    return weak, strong


@dataclass
class SamplingPlan:
    instance: int
    weak: np.ndarray
    strong: np.ndarray
    budget: int


def build_plan(gaussians: GaussianSet, k: int, eps: float = EPS, rate: float = 0.01) -> SamplingPlan:
    if gaussians.n == 0:
        raise UsageError("cannot plan resampling for an empty Gaussian set")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must lie in (0, 1]")
    gamma = gaussians.occupancy * effective_identities(gaussians)[:, k - 1]
    weak, strong = sampling_distributions(gamma, eps)
    return SamplingPlan(k, weak, strong, math.ceil(rate * gaussians.n))


def volume_adjust(value, n_replicas):
    """Per-member value so that ``n_replicas + 1`` coincident copies composite to ``value``."""
    value = np.asarray(value, dtype=np.float64)
    return -np.expm1(np.log1p(-value) / (np.asarray(n_replicas) + 1.0))


@dataclass
class RoundReport:
    pairs: list = field(default_factory=list)
    skipped: int = 0
    replica_counts: dict = field(default_factory=dict)

    @property
    def overwritten(self) -> np.ndarray:
        return np.array([w for w, _, _ in self.pairs], dtype=np.int64)

    def to_lines(self, round_index: int = 0, iteration: int = 0) -> list[str]:
        lines = [f"round={round_index} iter={iteration} pairs={len(self.pairs)} skipped={self.skipped}"]
        lines += [f"{w} {s} {k}" for w, s, k in self.pairs]
        return lines


def resample_round(gaussians: GaussianSet, eps: float, rate: float, rng: np.random.Generator):
    """One resampling round. Returns ``(new_set, report)``; the input is untouched.

    A Gaussian already used as a source or replica in this round is never
    overwritten, and a fresh replica is never used as a source.
    """
    n = gaussians.n
    if n < 2:
        raise UsageError("resampling needs at least two Gaussians")
    plans = [build_plan(gaussians, k, eps, rate) for k in range(1, gaussians.k + 1)]
    budget = plans[0].budget
    out = gaussians.copy()
    out.replicas[:] = 0
    used = np.zeros(n, dtype=bool)
    replica_of = np.full(n, -1, dtype=np.int64)
    report = RoundReport()
    rot = _quat_to_rotmat(out.rotations / np.linalg.norm(out.rotations, axis=1, keepdims=True))

    for slot in range(budget):
        plan = plans[slot % len(plans)]
        pair = None
        for _ in range(MAX_RETRIES + 1):
            s = int(rng.choice(n, p=plan.strong))
            w = int(rng.choice(n, p=plan.weak))
            if w != s and not used[w] and replica_of[s] < 0:
                pair = (w, s)
                break
        if pair is None:
            report.skipped += 1
            continue
        w, s = pair
        noise = rot[s] @ (0.5 * out.scales[s] * rng.standard_normal(3))
        out.positions[w] = out.positions[s] + noise
        for name in ("rotations", "log_scales", "colors", "base_identity", "calib_log"):
            getattr(out, name)[w] = getattr(out, name)[s]
        out.opacity_logits[w] = out.opacity_logits[s]
        out.occupancy_logits[w] = out.occupancy_logits[s]
        out.replicas[s] += 1
        used[w] = used[s] = True
        replica_of[w] = s
        report.pairs.append((w, s, plan.instance))

    sources = np.flatnonzero(out.replicas > 0)
    for s in sources:
        members = np.concatenate([[s], np.flatnonzero(replica_of == s)])
        cnt = out.replicas[s]
        alpha = volume_adjust(gaussians.opacity[s], cnt)
        occ = volume_adjust(gaussians.occupancy[s], cnt)
        out.opacity_logits[members] = logit(alpha)
        out.occupancy_logits[members] = logit(occ)
        report.replica_counts[int(s)] = int(cnt)
    out.replicas[:] = 0
    return out, report
