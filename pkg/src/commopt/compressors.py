"""Compressor zoo with certified relative bias/variance parameters.

Every spec carries a closed-form certificate (eta, omega): the relative
bias of the expected output and the relative variance around it.  Exact
outcome enumeration is provided for the randomized kinds so the
certificates can be checked without Monte-Carlo error.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng as rngmod

KINDS = ("identity", "rand_k", "top_k", "mix", "comp", "participation_nice", "scaled")

ENUMERATION_CAP = 200_000


class EnumerationGuardError(ValueError):
    pass


@dataclass(frozen=True)
class CompressorSpec:
    """A compressor kind on dimension ``d`` with certified (eta, omega)."""

    kind: str
    d: int
    k: int = 0
    kp: int = 0
    m: int = 0
    n: int = 0
    lam: float = 1.0
    inner: Optional["CompressorSpec"] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown compressor kind {self.kind!r}")
        if self.d < 1:
            raise ValueError("dimension must be positive")
        if self.kind in ("rand_k", "top_k") and not 1 <= self.k <= self.d:
            raise ValueError(f"k={self.k} out of range for d={self.d}")
        if self.kind == "mix" and not (1 <= self.k and 1 <= self.kp
                                       and self.k + self.kp <= self.d):
            raise ValueError(f"mix requires k + k' <= d, got ({self.k}, {self.kp}), d={self.d}")
        if self.kind == "comp" and not (1 <= self.k <= self.kp <= self.d):
            raise ValueError(f"comp requires k <= k' <= d, got ({self.k}, {self.kp}), d={self.d}")
        if self.kind == "participation_nice" and not 1 <= self.m <= self.n:
            raise ValueError(f"participation requires 1 <= m <= n, got m={self.m}, n={self.n}")
        if self.kind == "scaled":
            if self.inner is None or not 0.0 < self.lam <= 1.0:
                raise ValueError("scaled requires an inner spec and lam in (0, 1]")

    @property
    def certified(self) -> tuple[float, float]:
        return certified_params(self)

    def label(self) -> str:
        if self.kind == "identity":
            return "identity"
        if self.kind in ("rand_k", "top_k"):
            return f"{self.kind}:k={self.k}"
        if self.kind in ("mix", "comp"):
            return f"{self.kind}:k={self.k},kp={self.kp}"
        if self.kind == "participation_nice":
            return f"participation_nice:m={self.m},n={self.n}"
        return f"scaled({self.inner.label()},lam={self.lam})"


def identity(d: int) -> CompressorSpec:
    return CompressorSpec("identity", d)


def rand_k(d: int, k: int) -> CompressorSpec:
    return CompressorSpec("rand_k", d, k=k)


def top_k(d: int, k: int) -> CompressorSpec:
    return CompressorSpec("top_k", d, k=k)


def mix(d: int, k: int, kp: int) -> CompressorSpec:
    return CompressorSpec("mix", d, k=k, kp=kp)


def comp(d: int, k: int, kp: int) -> CompressorSpec:
    return CompressorSpec("comp", d, k=k, kp=kp)


def participation_nice(d: int, m: int, n: int) -> CompressorSpec:
    return CompressorSpec("participation_nice", d, m=m, n=n)


def certified_params(spec: CompressorSpec) -> tuple[float, float]:
    """Closed-form (eta, omega) certificate for the spec's kind."""
    d = spec.d
    if spec.kind == "identity":
        return 0.0, 0.0
    if spec.kind == "rand_k":
        return 0.0, d / spec.k - 1.0
    if spec.kind == "top_k":
        return math.sqrt(1.0 - spec.k / d), 0.0
    if spec.kind == "mix":
        k, kp = spec.k, spec.kp
        eta = (d - k - kp) / math.sqrt((d - k) * d)
        omega = kp * (d - k - kp) / ((d - k) * d)
        return eta, omega
    if spec.kind == "comp":
        k, kp = spec.k, spec.kp
        return math.sqrt((d - kp) / d), (kp - k) / k
    if spec.kind == "participation_nice":
        return 0.0, (spec.n - spec.m) / spec.m
    eta, omega = certified_params(spec.inner)
    lam = spec.lam
    return lam * eta + 1.0 - lam, lam**2 * omega


def scale_spec(spec: CompressorSpec, lam: float) -> CompressorSpec:
    """Scaled compressor lam * C; bias grows linearly, variance shrinks
    quadratically (certificate updated accordingly)."""
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"lam={lam} outside (0, 1]")
    if lam == 1.0:
        return spec
    return CompressorSpec("scaled", spec.d, lam=lam, inner=spec)


def optimal_scaling(eta: float, variance: float) -> float:
    """The lam in (0, 1] minimizing (1 - lam + lam*eta)^2 + lam^2 * variance."""
    if not 0.0 <= eta < 1.0:
        raise ValueError("eta must lie in [0, 1)")
    if variance < 0:
        raise ValueError("variance must be >= 0")
    return min((1.0 - eta) / ((1.0 - eta) ** 2 + variance), 1.0)


def _top_indices(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest |x_i|; ties broken by lowest index."""
    return np.argsort(-np.abs(x), kind="stable")[:k]


def apply(spec: CompressorSpec, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One application of the compressor to ``x`` on the caller's stream."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.d,):
        raise ValueError(f"x has shape {x.shape}, expected ({spec.d},)")
    d = spec.d
    if spec.kind == "identity":
        return x.copy()
    if spec.kind == "rand_k":
        out = np.zeros(d)
        keep = rng.choice(d, spec.k, replace=False)
        out[keep] = (d / spec.k) * x[keep]
        return out
    if spec.kind == "top_k":
        out = np.zeros(d)
        keep = _top_indices(x, spec.k)
        out[keep] = x[keep]
        return out
    if spec.kind == "mix":
        out = np.zeros(d)
        top = _top_indices(x, spec.k)
        out[top] = x[top]
        rest = np.setdiff1d(np.arange(d), top, assume_unique=False)
        keep = rng.choice(rest, spec.kp, replace=False)
        out[keep] = x[keep]
        return out
    if spec.kind == "comp":
        out = np.zeros(d)
        top = _top_indices(x, spec.kp)
        keep = top[rng.choice(spec.kp, spec.k, replace=False)]
        out[keep] = (spec.kp / spec.k) * x[keep]
        return out
    if spec.kind == "participation_nice":
        # marginal draw; the joint cohort draw lives at the ensemble level
        if rng.random() < spec.m / spec.n:
            return (spec.n / spec.m) * x
        return np.zeros(d)
    return spec.lam * apply(spec.inner, x, rng)


def scalars_per_apply(spec: CompressorSpec) -> float:
    """Transmitted scalars for one application (index overhead ignored)."""
    if spec.kind == "identity":
        return float(spec.d)
    if spec.kind in ("rand_k", "top_k", "comp"):
        return float(spec.k)
    if spec.kind == "mix":
        return float(spec.k + spec.kp)
    if spec.kind == "participation_nice":
        return spec.d * spec.m / spec.n  # m participants send d scalars each
    return scalars_per_apply(spec.inner)


def enumerate_outcomes(spec: CompressorSpec, x: np.ndarray) -> list[tuple[float, np.ndarray]]:
    """All (probability, output) pairs of the compressor on ``x``.

    Used as the exact oracle behind the certificate checks; guarded
    against combinatorial blowup.
    """
    x = np.asarray(x, dtype=float)
    d = spec.d
    if spec.kind in ("identity", "top_k"):
        return [(1.0, apply(spec, x, rngmod.stream(0, rngmod.MISC)))]
    if spec.kind == "rand_k":
        count = math.comb(d, spec.k)
        _guard(count)
        outs = []
        for keep in itertools.combinations(range(d), spec.k):
            out = np.zeros(d)
            out[list(keep)] = (d / spec.k) * x[list(keep)]
            outs.append((1.0 / count, out))
        return outs
    if spec.kind == "mix":
        top = _top_indices(x, spec.k)
        rest = np.setdiff1d(np.arange(d), top)
        count = math.comb(len(rest), spec.kp)
        _guard(count)
        outs = []
        for keep in itertools.combinations(rest.tolist(), spec.kp):
            out = np.zeros(d)
            out[top] = x[top]
            out[list(keep)] = x[list(keep)]
            outs.append((1.0 / count, out))
        return outs
    if spec.kind == "comp":
        top = _top_indices(x, spec.kp)
        count = math.comb(spec.kp, spec.k)
        _guard(count)
        outs = []
        for keep in itertools.combinations(top.tolist(), spec.k):
            out = np.zeros(d)
            out[list(keep)] = (spec.kp / spec.k) * x[list(keep)]
            outs.append((1.0 / count, out))
        return outs
    if spec.kind == "participation_nice":
        p = spec.m / spec.n
        return [(p, (spec.n / spec.m) * x), (1.0 - p, np.zeros(d))]
    return [(p, spec.lam * out) for p, out in enumerate_outcomes(spec.inner, x)]


def _guard(count: int) -> None:
    if count > ENUMERATION_CAP:
        raise EnumerationGuardError(f"{count} outcomes exceed the enumeration cap")


def exact_moments(spec: CompressorSpec, x: np.ndarray) -> tuple[np.ndarray, float]:
    """(E[C(x)], E||C(x) - E[C(x)]||^2) by exact enumeration."""
    outcomes = enumerate_outcomes(spec, x)
    mean = sum(p * out for p, out in outcomes)
    var = sum(p * float(np.sum((out - mean) ** 2)) for p, out in outcomes)
    return mean, var


@dataclass(frozen=True)
class EnsembleSpec:
    """n per-client compressors of one class plus their joint behavior."""

    per_client: tuple[CompressorSpec, ...]
    dependence: str = "independent"  # independent | m_nice_joint

    def __post_init__(self):
        if self.dependence not in ("independent", "m_nice_joint"):
            raise ValueError(f"unknown dependence {self.dependence!r}")
        if not self.per_client:
            raise ValueError("ensemble needs at least one compressor")
        first = self.per_client[0].certified
        for spec in self.per_client[1:]:
            if spec.certified != first:
                raise ValueError("ensemble members must share one (eta, omega) class")
        if self.dependence == "m_nice_joint":
            for spec in self.per_client:
                if spec.kind != "participation_nice":
                    raise ValueError("m_nice_joint requires participation_nice members")
            if self.per_client[0].n != len(self.per_client):
                raise ValueError("participation n must equal the ensemble size")

    @property
    def n(self) -> int:
        return len(self.per_client)

    @property
    def certified(self) -> tuple[float, float]:
        return self.per_client[0].certified


def homogeneous(spec: CompressorSpec, n: int,
                dependence: str = "independent") -> EnsembleSpec:
    return EnsembleSpec(tuple([spec] * n), dependence)


def omega_ran(ens: EnsembleSpec) -> float:
    """Relative variance of the averaged compressor outputs.

    omega / n under independence; (n - m) / (m (n - 1)) under the joint
    m-of-n participation draw.
    """
    _, omega = ens.certified
    if ens.dependence == "independent":
        return omega / ens.n
    m, n = ens.per_client[0].m, ens.per_client[0].n
    if n == m:
        return 0.0
    return (n - m) / (m * (n - 1))


def apply_ensemble(ens: EnsembleSpec, xs: np.ndarray, seed: int,
                   round_index: int) -> tuple[np.ndarray, float]:
    """Compress row i of ``xs`` with client i's compressor.

    Returns the stacked outputs and the number of transmitted scalars.
    Independent members draw from per-(client, round) streams; the joint
    participation mode draws one cohort per round.
    """
    n, d = xs.shape
    if n != ens.n:
        raise ValueError(f"{n} rows for an ensemble of size {ens.n}")
    if ens.dependence == "m_nice_joint":
        m = ens.per_client[0].m
        cohort = rngmod.stream(seed, rngmod.COMPRESS, n, round_index).choice(
            n, m, replace=False)
        out = np.zeros_like(xs)
        out[cohort] = (n / m) * xs[cohort]
        return out, float(m * d)
    out = np.empty_like(xs)
    sent = 0.0
    for i, spec in enumerate(ens.per_client):
        out[i] = apply(spec, xs[i], rngmod.stream(seed, rngmod.COMPRESS, i, round_index))
        sent += scalars_per_apply(spec)
    return out, sent


@dataclass(frozen=True)
class EstimateReport:
    eta_hat: float
    omega_hat: float
    violations: tuple[int, ...]  # indices of probe inputs that broke a bound


def estimate_params(spec: CompressorSpec, trials: int, rng: np.random.Generator,
                    n_inputs: int = 20) -> EstimateReport:
    """Empirical certificate audit on random unit-norm inputs.

    Estimates the worst relative bias and variance over ``n_inputs``
    probes with ``trials`` total applications.  A probe is reported as a
    violation when its estimate exceeds the certified bound by more than
    three standard errors (floored at 3/sqrt(trials), the slack for a
    noise-free estimator).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    eta_c, omega_c = spec.certified
    reps = max(1, trials // n_inputs)
    floor = 3.0 / math.sqrt(trials)
    eta_hat = 0.0
    omega_hat = 0.0
    violations = []
    for probe in range(n_inputs):
        x = rng.normal(size=spec.d)
        x /= np.linalg.norm(x)
        outs = np.stack([apply(spec, x, rng) for _ in range(reps)])
        mean = outs.mean(axis=0)
        bias = float(np.linalg.norm(mean - x))
        sq_dev = np.sum((outs - mean) ** 2, axis=1)
        var = float(sq_dev.mean())
        bias_slack = max(math.sqrt(var / reps), floor) if reps > 1 else floor
        var_slack = max(float(sq_dev.std(ddof=1)) / math.sqrt(reps), floor) \
            if reps > 1 else floor
        eta_hat = max(eta_hat, bias)
        omega_hat = max(omega_hat, var)
        if bias > eta_c + 3.0 * bias_slack or var > omega_c + 3.0 * var_slack:
            violations.append(probe)
    return EstimateReport(eta_hat, omega_hat, tuple(violations))


def parse_compressor(text: str, d: int) -> CompressorSpec:
    """Parse a config-string like ``comp:k=1,kp=56`` into a spec.

    An optional ``lam=`` entry wraps the result in a scaling; the
    participation kind reads ``m=`` (n is the ensemble size, supplied by
    the experiment config).
    """
    kind, _, rest = text.strip().partition(":")
    params: dict[str, float] = {}
    if rest:
        for item in rest.split(","):
            key, _, value = item.partition("=")
            if not value:
                raise ValueError(f"bad compressor parameter {item!r} in {text!r}")
            params[key.strip()] = float(value)
    lam = params.pop("lam", 1.0)
    try:
        if kind == "identity":
            spec = identity(d)
        elif kind == "rand_k":
            spec = rand_k(d, int(params.pop("k")))
        elif kind == "top_k":
            spec = top_k(d, int(params.pop("k")))
        elif kind == "mix":
            spec = mix(d, int(params.pop("k")), int(params.pop("kp")))
        elif kind == "comp":
            spec = comp(d, int(params.pop("k")), int(params.pop("kp")))
        elif kind == "participation_nice":
            spec = participation_nice(d, int(params.pop("m")), int(params.pop("n")))
        else:
            raise ValueError(f"unknown compressor kind {kind!r}")
    except KeyError as exc:
        raise ValueError(f"missing parameter {exc} for compressor {kind!r}") from None
    if params:
        raise ValueError(f"unused compressor parameters {sorted(params)} in {text!r}")
    return scale_spec(spec, lam) if lam != 1.0 else spec
