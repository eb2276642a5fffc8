"""Checkpoint soups: uniform/top-p averaging and greedy pool selection."""
from __future__ import annotations

import json
import math
import os
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import tensorio


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        self.tensors = {key: np.asarray(arr, dtype=np.float64) for key, arr in self.tensors.items()}
        for key, arr in self.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"checkpoint {self.name!r}: tensor {key!r} has non-finite values")

    @classmethod
    def load(cls, path: str | os.PathLike, name: str | None = None) -> "Checkpoint":
        return cls(dict(tensorio.read_container(path)), name=str(path) if name is None else name)

    def save(self, path: str | os.PathLike) -> None:
        tensorio.write_container(self.tensors, path)


class HookError(RuntimeError):
    """The evaluation hook failed for a candidate."""

    def __init__(self, candidate: str, detail: str):
        super().__init__(f"evaluation failed for {candidate!r}: {detail}")
        self.candidate = candidate
        self.detail = detail


def _check_compatible(checkpoints: Sequence[Checkpoint]) -> None:
    ref = checkpoints[0]
    for ck in checkpoints[1:]:
        missing = ref.tensors.keys() ^ ck.tensors.keys()
        if missing:
            raise ValueError(f"checkpoint {ck.name!r}: tensor names differ from {ref.name!r}: "
                             f"{sorted(missing)[0]!r}")
        for key, arr in ref.tensors.items():
            if ck.tensors[key].shape != arr.shape:
                raise ValueError(f"checkpoint {ck.name!r}: tensor {key!r} has shape "
                                 f"{ck.tensors[key].shape}, expected {arr.shape}")


def weighted_average(checkpoints: Sequence[Checkpoint], weights: Sequence[float], name: str = "soup") -> Checkpoint:
    """Convex combination of compatible checkpoints.

    Computed as ``x0 + sum(w_i * (x_i - x0))`` with Neumaier compensation, so a
    single checkpoint or a set of identical ones comes back bit-exact and the
    result is insensitive to candidate order.
    """
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    if len(weights) != len(checkpoints):
        raise ValueError(f"{len(weights)} weights for {len(checkpoints)} checkpoints")
    w = [float(x) for x in weights]
    if any(not math.isfinite(x) or x < 0 for x in w) or not math.isclose(math.fsum(w), 1.0, abs_tol=1e-9):
        raise ValueError(f"weights must be non-negative and sum to 1, got {w}")
    _check_compatible(checkpoints)

    base = checkpoints[0].tensors
    out = {}
    for key, x0 in base.items():
        total = np.zeros_like(x0)
        comp = np.zeros_like(x0)
        for wi, ck in zip(w[1:], checkpoints[1:]):
            term = wi * (ck.tensors[key] - x0)
            t = total + term
            comp += np.where(np.abs(total) >= np.abs(term), (total - t) + term, (term - t) + total)
            total = t
        out[key] = x0 + (total + comp)
    meta = {"contributors": [ck.name for ck in checkpoints], "weights": w}
    return Checkpoint(out, meta, name)


def average_soup(checkpoints: Sequence[Checkpoint], name: str = "average_soup") -> Checkpoint:
    k = len(checkpoints)
    if k == 0:
        raise ValueError("need at least one checkpoint")
    return weighted_average(checkpoints, [1.0 / k] * k, name)


def top_p(scores: Sequence[float], p: int) -> list[int]:
    """Indices of the ``p`` best scores; ties keep input order."""
    if not 1 <= p <= len(scores):
        raise ValueError(f"p must be in [1, {len(scores)}], got {p}")
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:p]


def maximum_soup(checkpoints: Sequence[Checkpoint], scores: Sequence[float], p: int,
                 name: str = "maximum_soup") -> Checkpoint:
    """Uniform average of the ``p`` highest-scoring checkpoints."""
    if len(scores) != len(checkpoints):
        raise ValueError(f"{len(scores)} scores for {len(checkpoints)} checkpoints")
    chosen = sorted(top_p(scores, p))
    return average_soup([checkpoints[i] for i in chosen], name)


@dataclass
class SoupStep:
    candidate_id: str
    trial_score: float
    accepted: bool
    pool_after: list[str]


@dataclass
class SoupTrace:
    individual_scores: dict[str, float] = field(default_factory=dict)
    order: list[str] = field(default_factory=list)
    steps: list[SoupStep] = field(default_factory=list)
    final_score: float = -math.inf

    @property
    def pool(self) -> list[str]:
        return self.steps[-1].pool_after if self.steps else []

    def to_dict(self) -> dict:
        return {
            "individual_scores": self.individual_scores,
            "order": self.order,
            "steps": [
                {"candidate_id": s.candidate_id, "trial_score": s.trial_score,
                 "accepted": s.accepted, "pool_after": s.pool_after}
                for s in self.steps
            ],
            "pool": self.pool,
            "final_score": self.final_score,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


Evaluator = Callable[[Checkpoint], float]


def evaluate_checkpoint(evaluate: Evaluator, ck: Checkpoint, candidate: str) -> float:
    try:
        score = float(evaluate(ck))
    except HookError:
        raise
    except Exception as exc:
        raise HookError(candidate, f"{type(exc).__name__}: {exc}") from exc
    if not math.isfinite(score):
        raise HookError(candidate, f"non-finite score {score!r}")
    return score


def greedy_soup(checkpoints: Sequence[Checkpoint], evaluate: Evaluator, workers: int = 1,
                name: str = "greedy_soup") -> tuple[Checkpoint, SoupTrace]:
    """Greedy soup.

    Candidates are scored individually and visited best-first (ties keep input
    order). Each is kept if the uniform average of pool + candidate scores at
    least as well as the current pool, whose empty score is -inf.
    """
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    _check_compatible(checkpoints)
    ids = [ck.name or f"candidate_{i}" for i, ck in enumerate(checkpoints)]
    if len(set(ids)) != len(ids):
        raise ValueError("candidate names must be unique")

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(lambda i: evaluate_checkpoint(evaluate, checkpoints[i], ids[i]), range(len(ids))))
    else:
        scores = [evaluate_checkpoint(evaluate, ck, cid) for ck, cid in zip(checkpoints, ids)]

    order = top_p(scores, len(scores))
    trace = SoupTrace(dict(zip(ids, scores)), [ids[i] for i in order])
    pool_idx: list[int] = []
    pool_score = -math.inf
    for i in order:
        if not pool_idx:
            trial_score = scores[i]  # average of one checkpoint is the checkpoint itself
        else:
            trial = average_soup([checkpoints[j] for j in pool_idx + [i]])
            trial_score = evaluate_checkpoint(evaluate, trial, ids[i])
        accepted = trial_score >= pool_score
        if accepted:
            pool_idx.append(i)
            pool_score = trial_score
        trace.steps.append(SoupStep(ids[i], trial_score, accepted, [ids[j] for j in pool_idx]))

    trace.final_score = pool_score
    return average_soup([checkpoints[j] for j in pool_idx], name), trace


class CommandEvaluator:
    """Scores a checkpoint by running an external command on it.

    The checkpoint is written to a temporary container whose path is appended
    as the last argument; the last non-empty stdout line must be a number.
    A nonzero exit status is a hook failure.
    """

    def __init__(self, command: str | Sequence[str], timeout: float | None = None, tmpdir: str | None = None):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise ValueError("empty evaluation command")
        self.timeout = timeout
        self.tmpdir = tmpdir

    def __call__(self, ck: Checkpoint) -> float:
        label = ck.name or "checkpoint"
        with tempfile.TemporaryDirectory(dir=self.tmpdir) as tmp:
            path = os.path.join(tmp, "candidate.bin")
            ck.save(path)
            try:
                proc = subprocess.run(self.argv + [path], capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise HookError(label, f"could not run {self.argv[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            raise HookError(label, f"exit status {proc.returncode}; stderr: {proc.stderr.strip()[-2000:]}")
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if not lines:
            raise HookError(label, "hook printed nothing on stdout")
        try:
            score = float(lines[-1].strip())
        except ValueError:
            raise HookError(label, f"last stdout line is not a number: {lines[-1]!r}") from None
        if not math.isfinite(score):
            raise HookError(label, f"non-finite score {lines[-1]!r}")
        return score


def load_checkpoints(paths: Sequence[str | os.PathLike]) -> list[Checkpoint]:
    return [Checkpoint.load(p) for p in paths]

