"""Repeated out-of-sample fusion: many fused fits, one upper bound each."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import streams
from .drm import GAMMA_TILT, TiltSpec, fit_tail_bounds

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_SUPPORT_RATIO = 1.35
# Replicates are fitted in fixed-size chunks; the chunking never depends on
# the worker count, which keeps results identical at any parallelism.
CHUNK_SIZE = 250
MAX_FAILURE_RATE = 0.01


class FusionError(RuntimeError):
    def __init__(self, message: str, attempted: int, failed: list[int]):
        super().__init__(message)
        self.attempted = attempted
        self.failed = failed


@dataclass(frozen=True)
class FusionConfig:
    n_fusions: int
    n_1: int
    support: tuple[float, float]
    ci_level: float = 0.95
    seed: int = 0
    tilt: TiltSpec = GAMMA_TILT

    def __post_init__(self):
        object.__setattr__(self, "support", (float(self.support[0]), float(self.support[1])))
        if self.n_fusions < 1:
            raise ValueError("n_fusions must be at least 1")
        if self.n_1 < 1:
            raise ValueError("empty fusion sample: n_1 must be at least 1")
        low, high = self.support
        if not low < high:
            raise ValueError(f"uniform support needs low < high, got {self.support}")
        if self.tilt.kind == "gamma" and low < 0:
            raise ValueError("uniform support must be nonnegative under the gamma tilt")
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must lie in (0, 1)")

    @classmethod
    def for_threshold(cls, T: float, n_fusions: int, n_1: int, **kw) -> "FusionConfig":
        """Config with the default uniform support ``(0, 1.35 T)``."""
        kw.setdefault("support", (0.0, DEFAULT_SUPPORT_RATIO * T))
        return cls(n_fusions=n_fusions, n_1=n_1, **kw)

    def check_threshold(self, T: float) -> None:
        if not self.support[1] > T:
            raise ValueError(
                f"uniform support upper limit {self.support[1]} must exceed the threshold {T}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["support"] = list(self.support)
        d["tilt"] = self.tilt.kind
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        d = dict(d)
        d["support"] = tuple(d["support"])
        d["tilt"] = TiltSpec(d.get("tilt", "gamma"))
        return cls(**d)


def fingerprint(reference: np.ndarray) -> str:
    arr = np.ascontiguousarray(reference, dtype="<f8")
    return hashlib.sha256(arr.tobytes()).hexdigest()


@dataclass
class BoundCollection:
    """Upper bounds ``B_1..B_N`` in generation order.

    Failed replicates are not in ``bounds``; their indices are kept in
    ``failed`` and ``attempted`` counts every replicate tried.
    """

    bounds: np.ndarray
    config: FusionConfig | None = None
    reference_fingerprint: str = ""
    threshold: float | None = None
    attempted: int = 0
    failed: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float).ravel()
        if self.bounds.size == 0:
            raise ValueError("a bound collection needs at least one bound")
        if np.any(~np.isfinite(self.bounds)) or np.any((self.bounds < 0) | (self.bounds > 1)):
            raise ValueError("bounds must be probabilities in [0, 1]")
        if not self.attempted:
            self.attempted = self.bounds.size

    def __len__(self) -> int:
        return self.bounds.size

    @cached_property
    def sorted(self) -> np.ndarray:
        out = np.sort(self.bounds, kind="stable")
        out.flags.writeable = False
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": SCHEMA_VERSION,
                "config": None if self.config is None else self.config.to_dict(),
                "reference_fingerprint": self.reference_fingerprint,
                "threshold": self.threshold,
                "attempted": self.attempted,
                "failed": list(self.failed),
                "bounds": [float(b) for b in self.bounds],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "BoundCollection":
        d = json.loads(text)
        cfg = d.get("config")
        return cls(
            bounds=np.array(d["bounds"], dtype=float),
            config=None if cfg is None else FusionConfig.from_dict(cfg),
            reference_fingerprint=d.get("reference_fingerprint", ""),
            threshold=d.get("threshold"),
            attempted=d.get("attempted", 0),
            failed=list(d.get("failed", [])),
        )


def generate_fusion_sample(seed: int, index: int, n_1: int, support: tuple[float, float]) -> np.ndarray:
    """``n_1`` uniform draws on ``(low, high]`` from the stream of replicate ``index``.

    The half-open side sits at ``high`` so a zero lower limit never yields an
    observation of exactly zero.
    """
    if n_1 < 1:
        raise ValueError("empty fusion sample: n_1 must be at least 1")
    low, high = support
    if not low < high:
        raise ValueError(f"uniform support needs low < high, got {support}")
    u = 1.0 - streams.stream(seed, streams.FUSION, index).random(n_1)
    return low + (high - low) * u


def _run_chunk(reference, T, cfg: FusionConfig, start: int, stop: int):
    fusion = np.stack(
        [generate_fusion_sample(cfg.seed, i, cfg.n_1, cfg.support) for i in range(start, stop)]
    )
    res = fit_tail_bounds(reference, fusion, T, level=cfg.ci_level, spec=cfg.tilt)
    return start, res.upper, res.converged


def _chunks(n: int):
    return [(s, min(s + CHUNK_SIZE, n)) for s in range(0, n, CHUNK_SIZE)]


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get("TAILFUSE_WORKERS")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


def run_rosf(
    reference,
    T: float,
    cfg: FusionConfig,
    workers: int | None = 1,
) -> BoundCollection:
    """Fuse ``reference`` with ``cfg.n_fusions`` uniform samples and collect bounds.

    Replicate ``i`` uses its own stream keyed by ``(cfg.seed, i)``, so the
    result depends only on ``(reference, T, cfg)``. Up to 1% of replicates may
    fail to converge; they are logged and dropped. Beyond that the run raises
    :class:`FusionError`.
    """
    reference = np.asarray(reference, dtype=float).ravel()
    if reference.size == 0:
        raise ValueError("reference sample is empty")
    cfg.tilt.check_domain(reference)
    cfg.check_threshold(T)
    chunks = _chunks(cfg.n_fusions)
    workers = min(resolve_workers(workers), len(chunks))
    if workers == 1:
        results = [_run_chunk(reference, T, cfg, a, b) for a, b in chunks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_chunk, reference, T, cfg, a, b) for a, b in chunks]
            results = [f.result() for f in futures]
    results.sort(key=lambda r: r[0])
    upper = np.concatenate([r[1] for r in results])
    ok = np.concatenate([r[2] for r in results])
    failed = np.flatnonzero(~ok).tolist()
    if len(failed) > MAX_FAILURE_RATE * cfg.n_fusions:
        raise FusionError(
            f"{len(failed)} of {cfg.n_fusions} fusions failed to converge "
            f"(budget {MAX_FAILURE_RATE:.0%}); first failures at replicates {failed[:10]}",
            cfg.n_fusions,
            failed,
        )
    for i in failed:
        log.warning("fusion replicate %d did not converge; skipped", i)
    return BoundCollection(
        bounds=upper[ok],
        config=cfg,
        reference_fingerprint=fingerprint(reference),
        threshold=float(T),
        attempted=cfg.n_fusions,
        failed=failed,
    )


def bcurve(coll: BoundCollection) -> list[tuple[int, float]]:
    """The B-curve ``(j, B_(j))`` for ``j = 1..N``."""
    return [(j, float(b)) for j, b in enumerate(coll.sorted, start=1)]


def empirical_fb(coll: BoundCollection, p):
    """Right-continuous ECDF of the bounds; accepts scalars or arrays."""
    frac = np.searchsorted(coll.sorted, p, side="right") / len(coll)
    return float(frac) if np.ndim(frac) == 0 else frac


def subsample_bounds(coll: BoundCollection, k: int, seed: int) -> BoundCollection:
    """``k`` bounds drawn uniformly without replacement."""
    if not 1 <= k <= len(coll):
        raise ValueError(f"cannot draw {k} bounds from a collection of {len(coll)}")
    idx = streams.stream(seed, streams.SUBSAMPLE).choice(len(coll), size=k, replace=False)
    return BoundCollection(
        bounds=coll.bounds[idx],
        config=coll.config,
        reference_fingerprint=coll.reference_fingerprint,
        threshold=coll.threshold,
    )


def write_bcurve_csv(coll: BoundCollection, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["j", "B_j"])
        for j, b in bcurve(coll):
            w.writerow([j, format(b, ".17g")])
