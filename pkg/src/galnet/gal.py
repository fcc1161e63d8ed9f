"""Graph attention over per-attribute feature nodes.

Each attribute's branch output is projected by its own 1x1 convolution and
flattened (row-major over height, width, projected channel) into a node. The
affinity between two nodes is their dot product; a row softmax turns the
affinity into mixing weights and each refined node is the weighted sum of all
nodes. In prior mode the mixing weights come from a fixed grouping instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from galnet import autodiff as ad
from galnet.autodiff import Tensor
from galnet.errors import ContractError, DimensionError
from galnet.layers import Conv2dLayer

# CelebA column names grouped by facial region.
CELEBA_PRIOR_GROUPS: dict[str, list[str]] = {
    "Global": [
        "Attractive", "Blurry", "Chubby", "Heavy_Makeup", "Male",
        "Oval_Face", "Pale_Skin", "Smiling", "Young",
    ],
    "Hair": [
        "Bald", "Bangs", "Black_Hair", "Blond_Hair", "Brown_Hair", "Gray_Hair",
        "Receding_Hairline", "Straight_Hair", "Wavy_Hair", "Wearing_Hat",
    ],
    "Eye": ["Arched_Eyebrows", "Bags_Under_Eyes", "Bushy_Eyebrows", "Eyeglasses", "Narrow_Eyes"],
    "Nose": ["Big_Nose", "Pointy_Nose"],
    "Cheek&Ear": ["High_Cheekbones", "Rosy_Cheeks", "Sideburns", "Wearing_Earrings"],
    "Mouth": ["5_o_Clock_Shadow", "Big_Lips", "Mouth_Slightly_Open", "Mustache", "Wearing_Lipstick"],
    "Chin": ["Double_Chin", "Goatee", "No_Beard"],
    "Neck": ["Wearing_Necklace", "Wearing_Necktie"],
}


@dataclass
class PriorGraph:
    groups: list[tuple[str, list[int]]]
    affinity: np.ndarray  # M x M, row-stochastic, block structure by group

    @property
    def size(self) -> int:
        return self.affinity.shape[0]


def prior_affinity(groups: Sequence[tuple[str, Sequence[int]]], num_attributes: int | None = None) -> PriorGraph:
    """Uniform within-group edges (self included), no cross-group edges."""
    groups = [(name, [int(i) for i in members]) for name, members in groups]
    flat = [i for _, members in groups for i in members]
    m = len(flat) if num_attributes is None else num_attributes
    if any(not members for _, members in groups):
        raise ContractError("prior groups must be non-empty")
    if sorted(flat) != list(range(m)):
        raise ContractError(f"prior groups do not partition range({m}): {sorted(flat)}")
    a = np.zeros((m, m))
    for _, members in groups:
        idx = np.array(members)
        a[np.ix_(idx, idx)] = 1.0 / len(members)
    return PriorGraph(groups, a)


def celeba_prior_groups(attribute_names: Sequence[str]) -> list[tuple[str, list[int]]]:
    index = {name: i for i, name in enumerate(attribute_names)}
    missing = [n for members in CELEBA_PRIOR_GROUPS.values() for n in members if n not in index]
    if missing or len(index) != 40:
        raise ContractError(f"attribute names do not match the CelebA layout (missing {missing[:5]})")
    return [(g, [index[n] for n in members]) for g, members in CELEBA_PRIOR_GROUPS.items()]


def project_to_nodes(features: Sequence[Tensor], proj_layers: Sequence[Conv2dLayer]) -> Tensor:
    """B x M x D node tensor; node i is proj_layers[i](features[i]) flattened
    row-major over (H, W, C')."""
    if len(features) != len(proj_layers):
        raise ContractError(f"{len(features)} feature maps but {len(proj_layers)} projection layers")
    if len({f.shape for f in features}) != 1:
        raise DimensionError(f"feature maps differ in shape: {[f.shape for f in features]}")
    nodes = []
    for x, layer in zip(features, proj_layers):
        y = layer(x)
        nodes.append(ad.reshape(y, (y.shape[0], -1)))
    return ad.stack(nodes, axis=1)


def affinity(nodes: Tensor, scale: bool = False) -> Tensor:
    """Per-sample Gram matrix N N^T (B x M x M); optional 1/sqrt(D) scaling."""
    if nodes.data.ndim != 3:
        raise DimensionError(f"affinity expects B x M x D nodes, got {nodes.shape}")
    a = ad.matmul(nodes, ad.swapaxes(nodes, -1, -2))
    if scale:
        a = ad.mul(a, 1.0 / np.sqrt(nodes.shape[-1]))
    return a


def attend(a: Tensor, nodes: Tensor) -> tuple[Tensor, Tensor]:
    """Row-softmax the affinity and mix nodes with it. Returns (refined, weights)."""
    if a.shape[:-1] != nodes.shape[:-1] or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"attend: affinity {a.shape} vs nodes {nodes.shape}")
    w = ad.softmax(a, axis=-1)
    return ad.matmul(w, nodes), w


def gal_forward(
    features: Sequence[Tensor],
    proj_layers: Sequence[Conv2dLayer],
    prior: PriorGraph | None = None,
    scale: bool = False,
) -> tuple[Tensor, Tensor]:
    """Learned mode when ``prior`` is None, fixed-prior mode otherwise.

    Returns refined nodes (B x M x D) and the row-normalized weights used.
    """
    nodes = project_to_nodes(features, proj_layers)
    if prior is None:
        return attend(affinity(nodes, scale), nodes)
    b, m, _ = nodes.shape
    if prior.size != m:
        raise DimensionError(f"prior graph has {prior.size} nodes, model has {m}")
    w = Tensor(np.broadcast_to(prior.affinity, (b, m, m)))
    return ad.matmul(w, nodes), w
