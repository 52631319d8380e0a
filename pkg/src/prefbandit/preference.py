"""Bradley-Terry labels, induced preferences and preference datasets."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .bandit import Instance, SoftmaxPolicy, check_compatible

# beyond this log-odds gap the label is treated as deterministic
SATURATION = 36.0


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.where(z > SATURATION, 1.0, np.where(z < -SATURATION, 0.0, expit(z)))
    return float(out) if out.ndim == 0 else out


def log_sigmoid(z):
    return -np.logaddexp(0.0, -np.asarray(z, dtype=float))


class RewardFunction:
    """Reward table r(x, a), in nats of log-odds."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)
        if self.table.ndim != 2:
            raise ValueError("reward table must have shape (X, A)")

    @classmethod
    def from_instance(cls, inst: Instance) -> "RewardFunction":
        # offset c(x) is fixed to zero
        return cls(inst.gamma * (inst.features @ inst.true_param))

    def pref_table(self) -> np.ndarray:
        """P[x, a1, a2] = probability that a1 beats a2."""
        t = self.table
        return sigmoid(t[:, :, None] - t[:, None, :])


def bt_prob(r: RewardFunction, x: int, a1: int, a2: int) -> float:
    return float(sigmoid(r.table[x, a1] - r.table[x, a2]))


def induced_pref_prob(pi: SoftmaxPolicy, pi2: SoftmaxPolicy, x: int, a1: int, a2: int) -> float:
    check_compatible(pi, pi2)
    lp, lq = pi.log_probs()[x], pi2.log_probs()[x]
    vals = (lp[a1], lp[a2], lq[a1], lq[a2])
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"zero-probability response at prompt {x}; log-ratio undefined")
    g = pi.instance.gamma
    return float(sigmoid(g * (lp[a1] - lp[a2]) - g * (lq[a1] - lq[a2])))


@dataclass
class PreferenceDataset:
    """Triples (x, a_plus, a_minus) with provenance.

    For unlabeled pair data a_plus and a_minus are simply the two draws.
    """

    x: np.ndarray
    a_plus: np.ndarray
    a_minus: np.ndarray
    round: np.ndarray
    sampler_id: Sequence[str]
    seed: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.a_plus = np.asarray(self.a_plus, dtype=np.int64)
        self.a_minus = np.asarray(self.a_minus, dtype=np.int64)
        n = len(self.x)
        self.round = np.broadcast_to(np.asarray(self.round, dtype=np.int64), (n,)).copy()
        self.seed = np.broadcast_to(np.asarray(self.seed, dtype=np.int64), (n,)).copy()
        if isinstance(self.sampler_id, str):
            self.sampler_id = [self.sampler_id] * n
        self.sampler_id = list(self.sampler_id)
        if not (len(self.a_plus) == len(self.a_minus) == len(self.sampler_id) == n):
            raise ValueError("dataset columns have different lengths")

    def __len__(self):
        return len(self.x)

    def validate(self, inst: Instance):
        if len(self) and (self.x.min() < 0 or self.x.max() >= inst.n_prompts
                          or min(self.a_plus.min(), self.a_minus.min()) < 0
                          or max(self.a_plus.max(), self.a_minus.max()) >= inst.n_responses):
            raise IndexError("dataset index outside the instance")

    def compressed(self):
        """Unique (x, a_plus, a_minus) triples and their multiplicities."""
        keys = np.stack([self.x, self.a_plus, self.a_minus], axis=1)
        uniq, counts = np.unique(keys, axis=0, return_counts=True)
        return uniq[:, 0], uniq[:, 1], uniq[:, 2], counts.astype(float)

    @staticmethod
    def concat(parts: Sequence["PreferenceDataset"]) -> "PreferenceDataset":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        return PreferenceDataset(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.a_plus for p in parts]),
            np.concatenate([p.a_minus for p in parts]),
            np.concatenate([p.round for p in parts]),
            [s for p in parts for s in p.sampler_id],
            np.concatenate([p.seed for p in parts]))

    COLUMNS = ("round", "x", "a_plus", "a_minus", "sampler_id", "seed")

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for i in range(len(self)):
            w.writerow([int(self.round[i]), int(self.x[i]), int(self.a_plus[i]),
                        int(self.a_minus[i]), self.sampler_id[i], int(self.seed[i])])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "PreferenceDataset":
        if isinstance(source, str) and "\n" in source:
            text = source
        else:
            with open(source, newline="") as fh:
                text = fh.read()
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != cls.COLUMNS:
            raise ValueError(f"expected header {cls.COLUMNS}")
        body = rows[1:]
        col = {c: [r[i] for r in body] for i, c in enumerate(cls.COLUMNS)}
        return cls(np.array(col["x"], dtype=np.int64), np.array(col["a_plus"], dtype=np.int64),
                   np.array(col["a_minus"], dtype=np.int64), np.array(col["round"], dtype=np.int64),
                   col["sampler_id"], np.array(col["seed"], dtype=np.int64))


def _pref_probs(labeler, x, a1, a2):
    if isinstance(labeler, RewardFunction):
        t = labeler.table
        return sigmoid(t[x, a1] - t[x, a2])
    # misspecification hook: an arbitrary table P[x, a1, a2]
    table = np.asarray(labeler, dtype=float)
    return table[x, a1, a2]


def _sampler_name(sampler) -> str:
    return getattr(sampler, "sampler_id", None) or type(sampler).__name__


def label_pairs(x, a1, a2, labeler, rng):
    """Order each pair by a Bernoulli draw of the preference probability."""
    p = _pref_probs(labeler, x, a1, a2)
    win = rng.random(len(x)) < p
    return np.where(win, a1, a2), np.where(win, a2, a1)


def collect_dataset(sampler, n: int, labeler: Union[RewardFunction, np.ndarray],
                    rng: np.random.Generator, round_index: int = 0,
                    seed: int = -1, sampler_id: Optional[str] = None) -> PreferenceDataset:
    """n labeled triples from a sampler that provides sample_pairs(n, rng)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    x, a1, a2 = sampler.sample_pairs(int(n), rng)
    ap, am = label_pairs(x, a1, a2, labeler, rng)
    return PreferenceDataset(x, ap, am, round_index, sampler_id or _sampler_name(sampler), seed)


def collect_pairs(sampler, n: int, rng: np.random.Generator, round_index: int = 0,
                  seed: int = -1, sampler_id: Optional[str] = None) -> PreferenceDataset:
    """n unlabeled pairs; a_plus and a_minus hold the first and second draw."""
    if n < 1:
        raise ValueError("n must be at least 1")
    x, a1, a2 = sampler.sample_pairs(int(n), rng)
    return PreferenceDataset(x, a1, a2, round_index, sampler_id or _sampler_name(sampler), seed)


def collect_dataset_sharded(sampler, n: int, labeler, seed: int, shards: int,
                            round_index: int = 0, workers: int = 1) -> PreferenceDataset:
    """Split n across shards with spawned generators and concatenate in
    shard order, so the result does not depend on workers."""
    if n < 1 or shards < 1:
        raise ValueError("n and shards must be positive")
    sizes = [n // shards + (i < n % shards) for i in range(shards)]
    seqs = np.random.SeedSequence(seed).spawn(shards)

    def job(i):
        return collect_dataset(sampler, sizes[i], labeler, np.random.default_rng(seqs[i]),
                               round_index, seed)

    idx = [i for i in range(shards) if sizes[i] > 0]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(job, idx))
    else:
        parts = [job(i) for i in idx]
    return PreferenceDataset.concat(parts)


def bernoulli_kl(z, w):
    """KL(Bern(sigmoid(z)) || Bern(sigmoid(w)))."""
    z, w = np.asarray(z, dtype=float), np.asarray(w, dtype=float)
    sz = sigmoid(z)
    # ln s(z)/s(w) = logsig(z) - logsig(w), likewise for the complement
    return sz * (log_sigmoid(z) - log_sigmoid(w)) + (1 - sz) * (log_sigmoid(-z) - log_sigmoid(-w))
