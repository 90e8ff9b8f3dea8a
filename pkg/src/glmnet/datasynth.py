"""Synthetic keypoint matching problems and the GLM1 dataset file format.

A problem is built from inlier points in the unit square. The second side is
an affine-deformed, jittered copy with its rows scrambled. Each point gets a
latent descriptor with three parts:

* its position relative to the inlier centroid,
* a local-shape signature: sorted distances to the other inliers over their
  mean, which rotation, translation and uniform scaling leave unchanged,
* an appearance code, one random vector per inlier shared by both sides.

One fixed random projection lifts latents to the feature width; side two
then receives Gaussian feature noise. Each side is centred on its own node
mean by default: sorted signatures share a common profile, and left in place
that offset lets the network grow a node-independent component that swamps
the discriminative part. Outliers are independent random points
with their own appearance codes on each side.

Rotation moves the position part between the two sides, so raw-feature
nearest neighbours are imperfect; a model has to learn which directions of
the feature space are stable.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DatasetFormatError, InvariantError

MAGIC = "GLM1"


@dataclass(frozen=True)
class DeformRange:
    rotation: float = 0.0  # max |angle| in radians
    scale: tuple[float, float] = (1.0, 1.0)
    shear: float = 0.0  # max |off-diagonal|
    translation: float = 0.0  # max |offset| per axis

    @classmethod
    def identity(cls) -> "DeformRange":
        return cls()

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        angle = rng.uniform(-self.rotation, self.rotation)
        s = rng.uniform(*self.scale)
        shear = rng.uniform(-self.shear, self.shear)
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        linear = s * rot @ np.array([[1.0, shear], [0.0, 1.0]])
        offset = rng.uniform(-self.translation, self.translation, size=2)
        return linear, offset


DEFAULT_DEFORM = DeformRange(rotation=np.pi / 2, scale=(0.8, 1.2), shear=0.1, translation=0.1)


@dataclass(frozen=True)
class SynthConfig:
    n_inliers: int = 10
    n_outliers: int = 0
    noise_sigma: float = 0.05
    position_jitter: float = 0.01
    deform: DeformRange = DEFAULT_DEFORM
    knn_k: int = 5
    feature_dim: int = 24
    appearance_dim: int = 8
    position_weight: float = 3.0
    shape_weight: float = 1.0
    appearance_weight: float = 0.5
    projection_seed: int = 0
    center: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.n_inliers < 2:
            raise ContractError(f"need at least 2 inliers, got {self.n_inliers}")
        if self.n_outliers < 0:
            raise ContractError("n_outliers must be >= 0")
        if self.noise_sigma < 0 or self.position_jitter < 0:
            raise ContractError("noise_sigma and position_jitter must be >= 0")
        if self.feature_dim < 1 or self.appearance_dim < 0:
            raise ContractError("feature_dim must be >= 1 and appearance_dim >= 0")
        if not 0 <= self.knn_k < self.n_inliers + self.n_outliers:
            raise ContractError(f"knn_k must be below the node count, got {self.knn_k}")

    @property
    def latent_dim(self) -> int:
        return 2 + (self.n_inliers - 1) + self.appearance_dim


@dataclass
class GraphPair:
    x_feats: np.ndarray
    y_feats: np.ndarray
    truth: np.ndarray
    support_x: Optional[np.ndarray] = None
    support_y: Optional[np.ndarray] = None
    sample_id: str = "0"
    seed: Optional[int] = field(default=None, compare=False)

    @property
    def m(self) -> int:
        return self.x_feats.shape[0]

    @property
    def n(self) -> int:
        return self.y_feats.shape[0]

    @property
    def p(self) -> int:
        return self.x_feats.shape[1]

    @property
    def supports(self):
        return self.support_x, self.support_y

    def validate(self) -> None:
        sid = self.sample_id
        if self.x_feats.ndim != 2 or self.y_feats.ndim != 2:
            raise InvariantError(f"sample {sid}: features must be 2-D")
        if self.x_feats.shape[1] != self.y_feats.shape[1]:
            raise InvariantError(f"sample {sid}: feature widths differ")
        if not (np.isfinite(self.x_feats).all() and np.isfinite(self.y_feats).all()):
            raise InvariantError(f"sample {sid}: non-finite features")
        if self.truth.shape != (self.m, self.n):
            raise InvariantError(f"sample {sid}: truth shape {self.truth.shape} != {(self.m, self.n)}")
        if not np.isin(self.truth, (0.0, 1.0)).all():
            raise InvariantError(f"sample {sid}: truth entries must be 0 or 1")
        if (self.truth.sum(axis=1) > 1).any() or (self.truth.sum(axis=0) > 1).any():
            raise InvariantError(f"sample {sid}: truth has a row or column with more than one match")
        for name, sup, size in (("support_x", self.support_x, self.m), ("support_y", self.support_y, self.n)):
            if sup is None:
                continue
            if sup.shape != (size, size):
                raise InvariantError(f"sample {sid}: {name} shape {sup.shape} != {(size, size)}")
            if (sup < 0).any() or not np.isfinite(sup).all():
                raise InvariantError(f"sample {sid}: {name} must be finite and nonnegative")
            if (np.diag(sup) <= 0).any():
                raise InvariantError(f"sample {sid}: {name} needs a positive diagonal")


def projection_matrix(config: SynthConfig) -> np.ndarray:
    """The fixed latent-to-feature lifting, shared by every sample of a width."""
    rng = np.random.default_rng([config.projection_seed, config.latent_dim, config.feature_dim])
    return rng.standard_normal((config.latent_dim, config.feature_dim)) / np.sqrt(config.latent_dim)


def shape_signature(points: np.ndarray, anchors: np.ndarray, exclude_self: bool) -> np.ndarray:
    """Sorted distances from each point to the anchors over their mean, minus one."""
    d = np.sqrt(((points[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2))
    d = np.sort(d, axis=1)
    if exclude_self:
        d = d[:, 1:]
    else:
        d = d[:, : anchors.shape[0] - 1]
    return d / d.mean(axis=1, keepdims=True) - 1.0


def knn_support(feats: np.ndarray, k: int) -> np.ndarray:
    """0/1 k-nearest-neighbour graph in feature space with self-loops."""
    n = feats.shape[0]
    d = ((feats[:, None, :] - feats[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d, np.inf)
    support = np.eye(n)
    if k > 0:
        nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
        support[np.repeat(np.arange(n), k), nbrs.reshape(-1)] = 1.0
    return support


def _latents(inliers: np.ndarray, outliers: np.ndarray, appearance: np.ndarray, config: SynthConfig) -> np.ndarray:
    blocks = [inliers]
    shapes = [shape_signature(inliers, inliers, exclude_self=True)]
    if len(outliers):
        blocks.append(outliers)
        shapes.append(shape_signature(outliers, inliers, exclude_self=False))
    pos = np.concatenate(blocks) - inliers.mean(axis=0)
    return np.concatenate([
        config.position_weight * pos,
        config.shape_weight * np.concatenate(shapes),
        config.appearance_weight * appearance,
    ], axis=1)


def generate_pair(config: SynthConfig, index: int = 0) -> GraphPair:
    """Sample ``index`` of the stream defined by ``config.seed``."""
    config.validate()
    rng = np.random.default_rng([config.seed, index])
    n_in, n_out = config.n_inliers, config.n_outliers
    proj = projection_matrix(config)

    pts_x = rng.uniform(0.0, 1.0, size=(n_in, 2))
    linear, offset = config.deform.sample(rng)
    centre = pts_x.mean(axis=0)
    pts_y = (pts_x - centre) @ linear.T + centre + offset
    pts_y = pts_y + config.position_jitter * rng.standard_normal(pts_y.shape)
    out_x = rng.uniform(0.0, 1.0, size=(n_out, 2))
    out_y = rng.uniform(0.0, 1.0, size=(n_out, 2)) @ linear.T + offset
    code = rng.standard_normal((n_in, config.appearance_dim))
    code_x = np.concatenate([code, rng.standard_normal((n_out, config.appearance_dim))])
    code_y = np.concatenate([code, rng.standard_normal((n_out, config.appearance_dim))])

    x_feats = _latents(pts_x, out_x, code_x, config) @ proj
    y_feats = _latents(pts_y, out_y, code_y, config) @ proj
    y_feats = y_feats + config.noise_sigma * rng.standard_normal(y_feats.shape)
    if config.center:
        x_feats = x_feats - x_feats.mean(axis=0)
        y_feats = y_feats - y_feats.mean(axis=0)

    size = n_in + n_out
    order = rng.permutation(size)  # row r of side two holds original node order[r]
    y_feats = y_feats[order]
    truth = np.zeros((size, size))
    where = np.argsort(order)
    truth[np.arange(n_in), where[:n_in]] = 1.0

    pair = GraphPair(
        x_feats=x_feats,
        y_feats=y_feats,
        truth=truth,
        support_x=knn_support(x_feats, config.knn_k),
        support_y=knn_support(y_feats, config.knn_k),
        sample_id=f"{config.seed}-{index}",
        seed=config.seed,
    )
    pair.validate()
    return pair


def generate_dataset(config: SynthConfig, count: int) -> list[GraphPair]:
    return [generate_pair(config, i) for i in range(count)]


def batch_split(data: Sequence, train_fraction: float, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle, then the first ``round(fraction * N)`` items form the train part."""
    if not data:
        raise ContractError("cannot split an empty dataset")
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(data))
    cut = int(round(train_fraction * len(data)))
    return [data[i] for i in order[:cut]], [data[i] for i in order[cut:]]


# ---------------------------------------------------------------------------
# GLM1 text format


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_matrix(out: io.StringIO, mat: np.ndarray, integral: bool = False) -> None:
    for row in mat:
        if integral:
            out.write(" ".join("1" if v else "0" for v in row))
        else:
            out.write(" ".join(_fmt(v) for v in row))
        out.write("\n")


def dumps_features(pairs: Iterable[GraphPair]) -> str:
    pairs = list(pairs)
    out = io.StringIO()
    out.write(f"{MAGIC} {len(pairs)}\n")
    for pair in pairs:
        if any(c.isspace() for c in pair.sample_id) or not pair.sample_id:
            raise ContractError(f"sample id {pair.sample_id!r} must be a non-empty token")
        out.write(f"sample {pair.sample_id} {pair.m} {pair.n} {pair.p}\n")
        _write_matrix(out, pair.x_feats)
        _write_matrix(out, pair.y_feats)
        out.write("perm\n")
        _write_matrix(out, pair.truth, integral=True)
        for name, sup in (("support_x", pair.support_x), ("support_y", pair.support_y)):
            if sup is not None:
                out.write(f"{name}\n")
                _write_matrix(out, sup)
    return out.getvalue()


def save_features(pairs: Iterable[GraphPair], path) -> None:
    text = dumps_features(pairs)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


class _Lines:
    def __init__(self, text: str):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0

    def peek(self) -> Optional[str]:
        return self.lines[self.pos] if self.pos < len(self.lines) else None

    def next(self, what: str) -> str:
        if self.pos >= len(self.lines):
            raise DatasetFormatError(f"unexpected end of file, expected {what}", self.pos + 1)
        line = self.lines[self.pos]
        self.pos += 1
        return line

    @property
    def lineno(self) -> int:
        return self.pos


def _read_matrix(lines: _Lines, rows: int, cols: int, what: str) -> np.ndarray:
    mat = np.empty((rows, cols))
    for r in range(rows):
        tokens = lines.next(f"{what} row {r}").split()
        if len(tokens) != cols:
            raise DatasetFormatError(f"{what} row {r}: expected {cols} values, got {len(tokens)}", lines.lineno)
        try:
            mat[r] = [float(t) for t in tokens]
        except ValueError as exc:
            raise DatasetFormatError(f"{what} row {r}: {exc}", lines.lineno) from None
    return mat


def loads_features(text: str) -> list[GraphPair]:
    lines = _Lines(text)
    header = lines.next("header").split()
    if len(header) != 2 or header[0] != MAGIC:
        raise DatasetFormatError(f"bad header, expected '{MAGIC} <count>'", 1)
    try:
        count = int(header[1])
    except ValueError:
        raise DatasetFormatError("sample count is not an integer", 1) from None
    pairs = []
    for k in range(count):
        tokens = lines.next(f"sample {k} header").split()
        if len(tokens) != 5 or tokens[0] != "sample":
            raise DatasetFormatError(f"record {k}: expected 'sample <id> <m> <n> <p>'", lines.lineno)
        sid = tokens[1]
        try:
            m, n, p = (int(t) for t in tokens[2:])
        except ValueError:
            raise DatasetFormatError(f"record {k}: sizes must be integers", lines.lineno) from None
        x = _read_matrix(lines, m, p, f"sample {sid} x")
        y = _read_matrix(lines, n, p, f"sample {sid} y")
        if lines.next("perm").strip() != "perm":
            raise DatasetFormatError(f"sample {sid}: expected 'perm'", lines.lineno)
        truth = _read_matrix(lines, m, n, f"sample {sid} perm")
        supports = {}
        while lines.peek() in ("support_x", "support_y"):
            name = lines.next("support")
            size = m if name == "support_x" else n
            supports[name] = _read_matrix(lines, size, size, f"sample {sid} {name}")
        pair = GraphPair(x, y, truth, supports.get("support_x"), supports.get("support_y"), sample_id=sid)
        pair.validate()
        pairs.append(pair)
    if lines.peek() is not None:
        raise DatasetFormatError("trailing content after last sample", lines.lineno + 1)
    return pairs


def load_features(path) -> list[GraphPair]:
    try:
        with open(path, "r", encoding="ascii") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise DatasetFormatError(f"not an ASCII dataset file: {exc}") from None
    return loads_features(text)
