"""Monte Carlo simulation of future journeys and conversion estimation.

A predictor is anything with:

    vocab                      -> PageVocabulary
    start(prefix)              -> (state, distribution over all classes)
    step(state, page_index)    -> (new state, next distribution)

`step` must not mutate `state`, so one state can branch into several
futures; trained models and ensembles both satisfy this.  Rollouts sample a
page from each successive distribution and feed it back in until the NULL
page or the horizon; conversion probability is the fraction of rollouts that
touch any objective page.  For small instances an exact depth-first path
enumeration serves as the correctness oracle.

Randomness is counter-based: rollout i of prefix k draws from the stream
keyed (seed, prefix k) at block offset i, so estimates do not depend on how
samples are scheduled across workers.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import CapacityError
from .journeydata import NULL_PAGE, UNKNOWN_PAGE, PageVocabulary

TERMINATED_NULL = "null_page"
TERMINATED_HORIZON = "horizon"


@dataclass(frozen=True)
class JourneyPrefix:
    """Observed start of a journey: keywords plus already-visited pages."""

    keywords: str = ""
    pages: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "pages", tuple(self.pages))


@dataclass(frozen=True)
class Objective:
    """A conversion event: the journey reaches any page in `target_pages`."""

    objective_id: str
    target_pages: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "target_pages", frozenset(self.target_pages))
        if not self.target_pages:
            raise ValueError("objective needs at least one target page")
        if NULL_PAGE in self.target_pages:
            raise ValueError("the NULL page cannot be a conversion target")


@dataclass(frozen=True)
class ConversionEstimate:
    probability: float
    std_error: float
    n_samples: int
    horizon: int
    objective_id: str


@dataclass(frozen=True)
class SimulatedJourney:
    prefix: JourneyPrefix
    pages: tuple[str, ...]
    reason: str

    def __post_init__(self):
        if NULL_PAGE in self.pages and self.pages[-1] != NULL_PAGE:
            raise ValueError("NULL page must terminate the continuation")


def _target_indices(objective: Objective, vocab: PageVocabulary) -> frozenset[int]:
    indices = set()
    for name in objective.target_pages:
        idx = vocab.encode(name)
        if idx == vocab.unknown_index and name != UNKNOWN_PAGE:
            raise ValueError(
                f"objective {objective.objective_id!r}: page {name!r} is not in the vocabulary"
            )
        indices.add(idx)
    return frozenset(indices)


def _prefix_hit(prefix: JourneyPrefix, objective: Objective) -> bool:
    return any(p in objective.target_pages for p in prefix.pages)


def _sample(dist: np.ndarray, u: float) -> int:
    cdf = np.cumsum(dist)
    return min(int(np.searchsorted(cdf, u, side="right")), len(dist) - 1)


def _walk(predictor, state, dist, uniforms, null_index: int) -> list[int]:
    """Sample one continuation; returns class indices, NULL (if hit) last."""
    pages = []
    for u in uniforms:
        idx = _sample(dist, float(u))
        pages.append(idx)
        if idx == null_index:
            break
        state, dist = predictor.step(state, idx)
    return pages


def rollout(predictor, prefix: JourneyPrefix, horizon: int, rng: np.random.Generator) -> SimulatedJourney:
    """Sample one future journey of at most `horizon` steps."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    vocab = predictor.vocab
    state, dist = predictor.start(prefix)
    indices = _walk(predictor, state, dist, rng.random(horizon), vocab.null_index)
    reason = TERMINATED_NULL if indices and indices[-1] == vocab.null_index else TERMINATED_HORIZON
    return SimulatedJourney(
        prefix=prefix,
        pages=tuple(vocab.decode(i) for i in indices),
        reason=reason,
    )


def _rollout_uniform_chunks(seed_parts, n_samples: int, horizon: int, first: int = 0):
    """Yield (sample_offset, uniforms[chunk, horizon]) with per-sample alignment.

    Sample i always reads the same stream positions (blocks i * stride ..)
    regardless of chunking, which keeps estimates scheduling-independent.
    """
    stride = rngmod.blocks_for(horizon)
    chunk = 4096
    for a in range(first, first + n_samples, chunk):
        b = min(a + chunk, first + n_samples)
        gen = rngmod.stream_at(seed_parts, a * stride)
        us = gen.random((b - a) * stride * rngmod.BLOCK).reshape(b - a, stride * rngmod.BLOCK)
        yield a, us[:, :horizon]


def estimate_conversion(
    predictor,
    prefix: JourneyPrefix,
    objective: Objective,
    n_samples: int,
    horizon: int,
    seed: int,
    prefix_index: int = 0,
) -> ConversionEstimate:
    """Monte Carlo conversion probability with its binomial standard error.

    A rollout converts when any objective page appears in the prefix or the
    sampled continuation.  `prefix_index` selects the sub-stream, so a batch
    cell and a standalone call with the same index agree exactly.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    vocab = predictor.vocab
    targets = _target_indices(objective, vocab)
    if _prefix_hit(prefix, objective):
        return ConversionEstimate(1.0, 0.0, n_samples, horizon, objective.objective_id)
    state0, dist0 = predictor.start(prefix)
    null_index = vocab.null_index
    hits = 0
    for _, uniforms in _rollout_uniform_chunks((seed, "conversion", prefix_index), n_samples, horizon):
        for row in uniforms:
            indices = _walk(predictor, state0, dist0, row, null_index)
            if any(i in targets for i in indices):
                hits += 1
    p = hits / n_samples
    return ConversionEstimate(
        probability=p,
        std_error=float(np.sqrt(p * (1.0 - p) / n_samples)),
        n_samples=n_samples,
        horizon=horizon,
        objective_id=objective.objective_id,
    )


def step_distribution(
    predictor,
    prefix: JourneyPrefix,
    t: int,
    n_samples: int,
    seed: int,
) -> np.ndarray:
    """Empirical distribution of the page occupied `t` steps into the future.

    Journeys that exit before step t count in the NULL page bucket.
    """
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    vocab = predictor.vocab
    state0, dist0 = predictor.start(prefix)
    null_index = vocab.null_index
    counts = np.zeros(len(vocab))
    for _, uniforms in _rollout_uniform_chunks((seed, "step-dist"), n_samples, t):
        for row in uniforms:
            indices = _walk(predictor, state0, dist0, row, null_index)
            idx = indices[t - 1] if len(indices) >= t else null_index
            counts[idx] += 1
    return counts / n_samples


@dataclass(frozen=True)
class PathMass:
    """Exhaustive (or bounded) accounting of continuation path probability."""

    hit: float
    missed: float
    pruned: float
    nodes: int

    @property
    def total(self) -> float:
        return self.hit + self.missed + self.pruned


def conversion_path_mass(
    predictor,
    prefix: JourneyPrefix,
    objective: Objective,
    horizon: int,
    prune_tol: float = 0.0,
    max_nodes: int = 2_000_000,
) -> PathMass:
    """Depth-first enumeration of every continuation up to `horizon` steps.

    Branches end at an objective page (hit), the NULL page or the horizon
    (miss).  With `prune_tol` > 0, branches whose path probability drops
    below the tolerance are cut and their mass is reported in `pruned`, which
    bounds the error of `hit`; with the default 0 the enumeration is exact
    and guarded by the vocabulary-size ** horizon work estimate.
    """
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    if prune_tol < 0:
        raise ValueError("prune_tol must be >= 0")
    vocab = predictor.vocab
    targets = _target_indices(objective, vocab)
    if _prefix_hit(prefix, objective):
        return PathMass(1.0, 0.0, 0.0, 0)
    if horizon == 0:
        return PathMass(0.0, 1.0, 0.0, 0)
    if prune_tol == 0.0 and len(vocab) ** horizon > 10_000_000:
        raise CapacityError(
            f"exact enumeration of {len(vocab)}^{horizon} paths exceeds the budget; "
            "reduce the horizon or set prune_tol"
        )
    null_index = vocab.null_index
    hit = missed = pruned = 0.0
    nodes = 0
    state0, dist0 = predictor.start(prefix)
    stack = [(state0, dist0, 1.0, 0)]
    while stack:
        state, dist, path_p, depth = stack.pop()
        nodes += 1
        if nodes > max_nodes:
            raise CapacityError(f"path enumeration exceeded {max_nodes} nodes")
        for idx, p in enumerate(dist):
            if p <= 0.0:
                continue
            q = path_p * float(p)
            if idx in targets:
                hit += q
            elif idx == null_index:
                missed += q
            elif depth + 1 >= horizon:
                missed += q
            elif q < prune_tol:
                pruned += q
            else:
                child_state, child_dist = predictor.step(state, idx)
                stack.append((child_state, child_dist, q, depth + 1))
    return PathMass(hit, missed, pruned, nodes)


def exact_conversion(
    predictor,
    prefix: JourneyPrefix,
    objective: Objective,
    horizon: int,
    prune_tol: float = 0.0,
    max_nodes: int = 2_000_000,
) -> float:
    """Conversion probability by explicit path enumeration (see conversion_path_mass)."""
    return conversion_path_mass(predictor, prefix, objective, horizon, prune_tol, max_nodes).hit


# ---------------------------------------------------------------------------
# batch scoring


@dataclass(frozen=True)
class ScoreRow:
    prefix_id: str
    objective_id: str
    probability: float
    std_error: float
    n_samples: int
    horizon: int


_worker_predictor = None


def _init_worker(predictor):
    global _worker_predictor
    _worker_predictor = predictor


def _score_cell(args):
    i, prefix, objective, n_samples, horizon, seed = args
    est = estimate_conversion(
        _worker_predictor, prefix, objective, n_samples, horizon, seed, prefix_index=i
    )
    return est


def score_batch(
    predictor,
    prefixes: list[JourneyPrefix],
    objectives: list[Objective],
    n_samples: int = 1000,
    horizon: int = 30,
    seed: int = 0,
    workers: int = 1,
    prefix_ids: list[str] | None = None,
) -> list[ScoreRow]:
    """Score every prefix against every objective, prefix-major row order.

    Each (prefix, objective) cell uses the sub-stream keyed by its prefix
    index, so results are identical for any `workers` value and match
    standalone estimate_conversion calls with the same `prefix_index`.
    """
    if not prefixes or not objectives:
        raise ValueError("score_batch needs at least one prefix and one objective")
    if prefix_ids is None:
        prefix_ids = [f"p{i:04d}" for i in range(len(prefixes))]
    if len(prefix_ids) != len(prefixes):
        raise ValueError("prefix_ids length must match prefixes")
    cells = [
        (i, prefix, objective, n_samples, horizon, seed)
        for i, prefix in enumerate(prefixes)
        for objective in objectives
    ]
    if workers > 1:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(predictor,)
        ) as pool:
            estimates = list(pool.map(_score_cell, cells, chunksize=8))
    else:
        _init_worker(predictor)
        estimates = [_score_cell(c) for c in cells]
    rows = []
    for (i, _, objective, _, _, _), est in zip(cells, estimates):
        rows.append(
            ScoreRow(
                prefix_id=prefix_ids[i],
                objective_id=objective.objective_id,
                probability=est.probability,
                std_error=est.std_error,
                n_samples=est.n_samples,
                horizon=est.horizon,
            )
        )
    return rows


def write_scores_csv(rows: list[ScoreRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["prefix_id", "objective_id", "probability", "std_err", "n_samples", "horizon"]
        )
        for r in rows:
            writer.writerow(
                [r.prefix_id, r.objective_id, repr(r.probability), repr(r.std_error), r.n_samples, r.horizon]
            )
