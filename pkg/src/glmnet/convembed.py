"""Node-embedding layers and the three-layer embedding pipeline.

Layer stack (widths ``p -> d1 -> d2 -> d3``):

1. graph-learning smoothing convolution (``layer1.*``)
2. cross-graph convolution (``cross.*``)
3. graph-learning sharpening convolution (``layer3.*``); a second smoothing
   layer when sharpening is ablated

Intra-graph weights are shared by the two graphs. The affinity weight of the
match head (``affinity.m``) is created here too so that one store holds the
whole model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import diffcore as dc
from .config import TrainConfig
from .datasynth import GraphPair
from .diffcore import ParamStore, Tensor
from .errors import ContractError, DimensionError
from .graphlearn import fixed_propagation, learned_adjacency, row_normalized_laplacian

Supports = tuple[Optional[np.ndarray], Optional[np.ndarray]]


@dataclass
class EmbeddingPair:
    x: Tensor
    y: Tensor

    def swapped(self) -> "EmbeddingPair":
        return EmbeddingPair(self.y, self.x)


@dataclass
class LayerParams:
    """Tensors used by one layer; unused slots stay None.

    ``graph_x``/``graph_y`` of None means the layer propagates over the fixed
    initial graph instead of a learned one.
    """

    theta_n: Optional[Tensor] = None
    theta_e: Optional[Tensor] = None
    graph_x: Optional[Tensor] = None
    graph_y: Optional[Tensor] = None
    w: Optional[Tensor] = None
    theta_xy: Optional[Tensor] = None
    theta_yx: Optional[Tensor] = None

    @classmethod
    def from_mapping(cls, params: Mapping[str, Tensor], prefix: str) -> "LayerParams":
        def get(key):
            return params.get(f"{prefix}.{key}")

        shared = get("graph")
        return cls(
            theta_n=get("theta_n"),
            theta_e=get("theta_e"),
            graph_x=shared if shared is not None else get("graph_x"),
            graph_y=shared if shared is not None else get("graph_y"),
            w=get("w"),
            theta_xy=get("theta_xy"),
            theta_yx=get("theta_yx"),
        )


def _propagation(emb: Tensor, graph_theta: Optional[Tensor], support: Optional[np.ndarray]) -> Tensor:
    if graph_theta is None:
        return fixed_propagation(emb.rows, support)
    return row_normalized_laplacian(learned_adjacency(emb, graph_theta, support).adjacency)


def _intra(emb: Tensor, params: LayerParams, graph_theta, support, node_coef: float, edge_coef: float) -> Tensor:
    prop = _propagation(emb, graph_theta, support)
    node_term = dc.matmul(emb, params.theta_n)
    edge_term = dc.matmul(prop, dc.matmul(emb, params.theta_e))
    return dc.relu(dc.scalar_mix(node_coef, node_term, edge_coef, edge_term))


def smoothing_layer(emb: EmbeddingPair, params: LayerParams, gamma: float = 0.5,
                    supports: Supports = (None, None)) -> EmbeddingPair:
    """``relu[(1 - gamma) E Tn + gamma A E Te]`` on each graph."""
    if not 0.0 < gamma < 1.0:
        raise ContractError(f"gamma must lie in (0, 1), got {gamma}")
    return EmbeddingPair(
        _intra(emb.x, params, params.graph_x, supports[0], 1.0 - gamma, gamma),
        _intra(emb.y, params, params.graph_y, supports[1], 1.0 - gamma, gamma),
    )


def sharpening_layer(emb: EmbeddingPair, params: LayerParams, gamma_s: float = 0.75,
                     supports: Supports = (None, None)) -> EmbeddingPair:
    """``relu[(1 + gamma_s) E Tn - gamma_s A E Te]`` on each graph."""
    if gamma_s <= 0.0:
        raise ContractError(f"gamma_s must be positive, got {gamma_s}")
    return EmbeddingPair(
        _intra(emb.x, params, params.graph_x, supports[0], 1.0 + gamma_s, -gamma_s),
        _intra(emb.y, params, params.graph_y, supports[1], 1.0 + gamma_s, -gamma_s),
    )


def coaffinity(emb: EmbeddingPair, w: Tensor, delta: float) -> tuple[Tensor, Tensor]:
    """Row-normalized ``exp(X W Y^T / delta)`` and its graph-swapped counterpart."""
    if delta <= 0.0:
        raise ContractError(f"delta must be positive, got {delta}")
    if emb.x.cols != emb.y.cols:
        raise DimensionError(f"embedding widths differ: {emb.x.cols} vs {emb.y.cols}")
    scores = dc.scale(dc.matmul(dc.matmul(emb.x, w), dc.transpose(emb.y)), 1.0 / delta)
    return dc.row_softmax(scores), dc.row_softmax(dc.transpose(scores))


def cross_graph_layer(emb: EmbeddingPair, params: LayerParams, delta: float) -> EmbeddingPair:
    """``X' = [C_xy Y || X] T_xy`` and ``Y' = [C_yx X || Y] T_yx`` (no activation)."""
    c_xy, c_yx = coaffinity(emb, params.w, delta)
    x_new = dc.matmul(dc.concat_cols(dc.matmul(c_xy, emb.y), emb.x), params.theta_xy)
    y_new = dc.matmul(dc.concat_cols(dc.matmul(c_yx, emb.x), emb.y), params.theta_yx)
    return EmbeddingPair(x_new, y_new)


def forward_pipeline(pair: GraphPair, params: Mapping[str, Tensor], config: TrainConfig) -> EmbeddingPair:
    """Embed both sides of ``pair``, using its initial graphs as supports."""
    return embed(pair.x_feats, pair.y_feats, params, config, pair.supports)


def embed(x_feats, y_feats, params: Mapping[str, Tensor], config: TrainConfig,
          supports: Supports = (None, None)) -> EmbeddingPair:
    """Smoothing -> cross-graph -> sharpening (or smoothing) embedding."""
    x = x_feats if isinstance(x_feats, Tensor) else dc.constant(x_feats)
    y = y_feats if isinstance(y_feats, Tensor) else dc.constant(y_feats)
    first = LayerParams.from_mapping(params, "layer1")
    if first.theta_n is None:
        raise ContractError("params are missing layer1 weights")
    if x.cols != first.theta_n.rows or y.cols != first.theta_n.rows:
        raise DimensionError(
            f"feature widths ({x.cols}, {y.cols}) do not match model input width {first.theta_n.rows}"
        )
    emb = smoothing_layer(EmbeddingPair(x, y), first, config.gamma, supports)
    emb = cross_graph_layer(emb, LayerParams.from_mapping(params, "cross"), config.cross_delta)
    third = LayerParams.from_mapping(params, "layer3")
    if config.sharpening:
        return sharpening_layer(emb, third, config.gamma_sharp, supports)
    return smoothing_layer(emb, third, config.gamma, supports)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(input_width: int, config: TrainConfig, seed: Optional[int] = None) -> ParamStore:
    """Fresh model parameters for features of width ``input_width``.

    Weight matrices are Glorot-uniform. Graph-learning vectors are drawn at
    ``config.graph_theta_scale`` times the Glorot bound; zero would start from a
    uniform graph but leaves them stuck, since relu has zero slope at zero.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d1, d2, d3 = config.widths
    store = ParamStore()

    def graph_params(prefix, width):
        if not config.graph_learning:
            return
        keys = ["graph"] if config.share_graph_theta else ["graph_x", "graph_y"]
        for key in keys:
            store.add(f"{prefix}.{key}", glorot(rng, 2 * width, 1, config.graph_theta_scale))

    store.add("layer1.theta_n", glorot(rng, input_width, d1))
    store.add("layer1.theta_e", glorot(rng, input_width, d1))
    graph_params("layer1", input_width)
    store.add("cross.w", glorot(rng, d1, d1))
    store.add("cross.theta_xy", glorot(rng, 2 * d1, d2))
    store.add("cross.theta_yx", glorot(rng, 2 * d1, d2))
    store.add("layer3.theta_n", glorot(rng, d2, d3))
    store.add("layer3.theta_e", glorot(rng, d2, d3))
    graph_params("layer3", d2)
    store.add("affinity.m", glorot(rng, d3, d3))
    return store
