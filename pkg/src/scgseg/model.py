"""Full segmentation network: CNN encoder -> SCG -> GCN -> fusion head."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

from .cnn import CnnConfig, CnnEncoder
from .errors import ValidationError
from .gcn import GraphConvolution, normalize_adjacency
from .head import HeadConfig, InferenceHead, nodes_to_grid
from .scg import GraphState, ScgConfig, SelfConstructingGraph


@dataclass
class ModelConfig:
    base_channels: int = 16
    input_size: int = 512
    dropout_p: float = 0.6
    node_grid: tuple[int, int] = (16, 16)
    latent_dim: int = 128
    epsilon: float = 1e-7
    gcn_layers: int = 1
    gcn_channels: int = 16
    literal_degree_norm: bool = False
    fuse_channels: int = 16

    def __post_init__(self):
        self.node_grid = tuple(int(v) for v in self.node_grid)
        if self.gcn_layers < 1:
            raise ValidationError(f"gcn_layers must be >= 1, got {self.gcn_layers}")
        # validate through the component configs
        self.cnn_config(), self.scg_config(), self.head_config()
        deep = self.input_size // 8
        if max(self.node_grid) > deep:
            raise ValidationError(
                f"node_grid {self.node_grid} exceeds the {deep}x{deep} deep feature map of a "
                f"{self.input_size}px input; use at most ({deep}, {deep})"
            )

    def cnn_config(self) -> CnnConfig:
        return CnnConfig(self.base_channels, self.input_size, self.dropout_p)

    def scg_config(self) -> ScgConfig:
        return ScgConfig(self.node_grid, self.latent_dim, self.epsilon)

    def head_config(self) -> HeadConfig:
        return HeadConfig(self.fuse_channels, self.dropout_p)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["node_grid"] = list(self.node_grid)
        return d

    def arch_hash(self) -> str:
        """Hash of the fields that determine parameter shapes."""
        keys = ("base_channels", "node_grid", "latent_dim", "gcn_layers", "gcn_channels", "fuse_channels")
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class SegOutput(NamedTuple):
    prob: torch.Tensor
    aux_prob: torch.Tensor
    graph: GraphState


class ScgSegNet(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.cnn = CnnEncoder(config.cnn_config())
        self.scg = SelfConstructingGraph(8 * c, config.scg_config())
        dims = [config.latent_dim] * config.gcn_layers + [config.gcn_channels]
        self.gcn = nn.ModuleList([GraphConvolution(a, b) for a, b in zip(dims[:-1], dims[1:])])
        self.head = InferenceHead(config.gcn_channels, [c, 2 * c, 4 * c], config.head_config())

    def forward(self, x: torch.Tensor, noise_seed: int | None = None,
                generator: torch.Generator | None = None) -> SegOutput:
        feats = self.cnn(x)
        graph = self.scg(feats.deep, noise_seed=noise_seed, generator=generator)
        A_norm = normalize_adjacency(graph.A, literal=self.config.literal_degree_norm)
        h = graph.Z
        for layer in self.gcn:
            h = layer(A_norm, h)
        graph_map = nodes_to_grid(h, self.config.node_grid)
        prob = self.head(graph_map, feats.skips)
        return SegOutput(prob, feats.aux_prob, graph)


def build_model(config: ModelConfig = ModelConfig(), seed: int | None = None) -> ScgSegNet:
    if seed is None:
        return ScgSegNet(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ScgSegNet(config)
