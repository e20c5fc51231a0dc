"""Unit-norm feature maps phi(s, a) and phi(s, a1, a2)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from neuraltd.errors import ConfigurationError

NORM_TOL = 1e-12


@dataclass(frozen=True)
class FeatureMap:
    """Dense feature table, one unit-norm row per state-action pair.

    Rows are ordered lexicographically: ``s * n_actions + a`` for MDPs and
    ``(s * n_actions_p1 + a1) * n_actions_p2 + a2`` for games, matching the
    joint-action flattening used by :mod:`neuraltd.env`.
    """

    table: np.ndarray
    kind: str = "custom"
    action_shape: tuple | None = None

    def __post_init__(self):
        t = np.array(self.table, dtype=np.float64, copy=True)
        if t.ndim != 2 or t.shape[1] < 1:
            raise ConfigurationError(f"feature table must be 2-D with d >= 1, got {t.shape}")
        norms = np.linalg.norm(t, axis=1)
        if t.shape[0] and np.max(np.abs(norms - 1.0)) > NORM_TOL:
            raise ConfigurationError("feature rows must have unit Euclidean norm")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)
        if self.action_shape is not None:
            shape = tuple(int(a) for a in self.action_shape)
            if any(a < 1 for a in shape) or t.shape[0] % math.prod(shape):
                raise ConfigurationError(f"action_shape {shape} does not divide {t.shape[0]} rows")
            object.__setattr__(self, "action_shape", shape)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @property
    def n_rows(self) -> int:
        return self.table.shape[0]

    def __call__(self, index) -> np.ndarray:
        return self.table[index]

    def _actions(self):
        if self.action_shape is None:
            raise ConfigurationError("feature map has no action_shape; pass one to index by (s, a)")
        return self.action_shape

    @property
    def n_states(self) -> int:
        return self.n_rows // math.prod(self._actions())

    def pair_index(self, s, *actions) -> int:
        """Row of phi(s, a) or phi(s, a1, a2)."""
        shape = self._actions()
        if len(actions) != len(shape):
            raise ConfigurationError(f"expected {len(shape)} action indices, got {len(actions)}")
        return int(np.ravel_multi_index((s, *actions), (self.n_states, *shape)))

    def state_block(self, s) -> np.ndarray:
        """Rows for every action (pair) at state s, lexicographic order."""
        k = math.prod(self._actions())
        return self.table[s * k:(s + 1) * k]

    def with_action_shape(self, *shape) -> "FeatureMap":
        return FeatureMap(self.table, self.kind, tuple(shape))

    def to_dict(self) -> dict:
        doc = {"dim": self.dim, "kind": self.kind, "rows": self.table.tolist()}
        if self.action_shape is not None:
            doc["action_shape"] = list(self.action_shape)
        return doc

    @classmethod
    def from_dict(cls, doc) -> "FeatureMap":
        table = np.asarray(doc["rows"], dtype=np.float64)
        if table.shape[1] != doc["dim"]:
            raise ConfigurationError("declared dim does not match the rows")
        shape = doc.get("action_shape")
        return cls(table, doc.get("kind", "custom"), None if shape is None else tuple(shape))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text) -> "FeatureMap":
        return cls.from_dict(json.loads(text))


def one_hot_features(n_states, n_actions) -> FeatureMap:
    """Standard basis: the row for (s, a) is e_{s * n_actions + a}."""
    if n_states < 1 or n_actions < 1:
        raise ConfigurationError("sizes must be >= 1")
    return FeatureMap(np.eye(n_states * n_actions), "one-hot", (n_actions,))


def one_hot_game_features(n_states, n_actions_p1, n_actions_p2) -> FeatureMap:
    """Standard basis over (s, a1, a2) in lexicographic order."""
    if min(n_states, n_actions_p1, n_actions_p2) < 1:
        raise ConfigurationError("sizes must be >= 1")
    return FeatureMap(np.eye(n_states * n_actions_p1 * n_actions_p2), "one-hot",
                      (n_actions_p1, n_actions_p2))


def random_unit_features(n_pairs, d, seed=0, min_angle=math.radians(1.0), max_redraws=10_000,
                         action_shape=None) -> FeatureMap:
    """Normalized Gaussian rows, pairwise at least ``min_angle`` from parallel.

    A candidate row is redrawn while its absolute cosine with any accepted row
    exceeds cos(min_angle).
    """
    if d < 2:
        raise ConfigurationError("d must be >= 2")
    rng = np.random.default_rng(seed)
    cos_max = math.cos(min_angle)
    rows = np.empty((n_pairs, d))
    for i in range(n_pairs):
        for _ in range(max_redraws):
            v = rng.standard_normal(d)
            v /= np.linalg.norm(v)
            if i == 0 or np.max(np.abs(rows[:i] @ v)) < cos_max:
                rows[i] = v
                break
        else:
            raise ConfigurationError(
                f"could not place row {i} at min_angle={min_angle} after {max_redraws} redraws"
            )
    return FeatureMap(rows, "random-unit", action_shape)


@dataclass(frozen=True)
class GridAssignment:
    """Which one-hot row each raw sample was assigned to."""

    rows: np.ndarray
    cells: list
    n_clamped: int


def grid_features(samples, bins_per_dim, lo, hi):
    """Fixed-grid discretization of continuous samples into one-hot rows.

    ``samples`` is an (N, k) array of raw vectors.  Every occupied cell
    gets its own basis vector (in order of first occurrence); samples
    sharing a cell share a row.  Samples outside
    [lo, hi] are clamped to the boundary cell and counted in
    ``assignment.n_clamped``.

    Returns ``(FeatureMap, GridAssignment)``.
    """
    x = np.asarray(samples, dtype=np.float64)
    # 1-D input with scalar bounds is a list of scalar samples.
    x = x.reshape(-1, 1) if x.ndim == 1 and np.size(lo) == 1 else np.atleast_2d(x)
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), x.shape[1:])
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), x.shape[1:])
    bins = np.broadcast_to(np.asarray(bins_per_dim, dtype=np.int64), x.shape[1:])
    if np.any(lo >= hi):
        raise ConfigurationError("lo must be < hi component-wise")
    if np.any(bins < 1):
        raise ConfigurationError("bins_per_dim must be >= 1")
    width = (hi - lo) / bins
    idx = np.floor((x - lo) / width).astype(np.int64)
    clamped = np.any((x < lo) | (x > hi), axis=1)
    idx = np.clip(idx, 0, bins - 1)

    cell_ids = {}
    rows = np.empty(len(x), dtype=np.int64)
    for i, cell in enumerate(map(tuple, idx)):
        rows[i] = cell_ids.setdefault(cell, len(cell_ids))
    fmap = FeatureMap(np.eye(len(cell_ids)), "grid")
    return fmap, GridAssignment(rows, list(cell_ids), int(clamped.sum()))
