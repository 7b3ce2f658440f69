"""
Backbone Geometry Engine

This module turns a backbone record into a residue graph: k-nearest-neighbour
topology over C-alpha atoms, rotation-invariant scalar features, equivariant
vector features and the per-residue local reference frames used to read
vectors out as invariants.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.transform import Rotation
from torch_cluster import knn_graph
from torch_geometric.data import Batch, Data

from src.data_ingest import FRAME_TOLERANCE, BackboneRecord

logger = logging.getLogger(__name__)

EPS = 1e-8


class GraphError(ValueError):
    """Raised when a record cannot be turned into a graph."""


class FrameError(ValueError):
    """Raised when backbone atoms are too degenerate to define a frame."""


@dataclass(frozen=True)
class RigidTransform:
    """A proper rotation followed by a translation, x -> R x + t (Angstrom)."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        if r.shape != (3, 3) or not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be a 3x3 orthonormal matrix with det=+1.")

    @classmethod
    def random(cls, rng: np.random.Generator, max_shift: float = 50.0) -> "RigidTransform":
        rotation = Rotation.random(random_state=rng).as_matrix()
        return cls(rotation, rng.uniform(-max_shift, max_shift, size=3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ np.asarray(self.rotation).T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return vectors @ np.asarray(self.rotation).T

    def inverse(self) -> "RigidTransform":
        r_inv = np.asarray(self.rotation).T
        return RigidTransform(r_inv, -r_inv @ self.translation)

    def apply_record(self, record: BackboneRecord) -> BackboneRecord:
        return record.with_coords(self.apply(record.coords))


@dataclass(frozen=True)
class LocalFrame:
    """
    Residue frame: origin at C-alpha, `axes` rows are the basis vectors e1, e2, e3.
    Coordinates of a vector v in the frame are `axes @ v`.
    """
    origin: np.ndarray
    axes: np.ndarray

    def transformed(self, transform: RigidTransform) -> "LocalFrame":
        return LocalFrame(transform.apply(self.origin), self.axes @ np.asarray(transform.rotation).T)

    def to_local(self, vectors: np.ndarray) -> np.ndarray:
        return vectors @ self.axes.T


@dataclass(frozen=True)
class FeatureConfig:
    """Featurizer settings; each block can be switched off for ablation."""
    k: int = 30
    rbf_count: int = 16
    rbf_max: float = 20.0
    offset_dims: int = 16
    dihedrals: bool = True
    orientations: bool = True
    distances: bool = True
    offsets: bool = True
    frame_copies: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1.")
        if self.offset_dims % 2:
            raise ValueError("offset_dims must be even.")
        if self.node_dims[0] == 0:
            raise ValueError("Node scalars are empty: enable dihedrals or frame copies of orientations.")
        if self.edge_dims[0] == 0:
            raise ValueError("Edge scalars are empty: enable distances, offsets or frame copies.")

    @property
    def node_dims(self) -> tuple[int, int]:
        dv = 4 if self.orientations else 0
        ds = (9 if self.dihedrals else 0) + (3 * dv if self.frame_copies else 0)
        return ds, dv

    @property
    def edge_dims(self) -> tuple[int, int]:
        es = ((self.rbf_count if self.distances else 0) + (self.offset_dims if self.offsets else 0)
              + (3 if self.frame_copies else 0))
        return es, 1


class ProteinGraph(Data):
    """
    Residue graph with scalar and vector channels.

    Edges run source -> target: `edge_index[0]` is the neighbour j, `edge_index[1]`
    the receiving residue i. Several records can share one graph (see `batch_graphs`),
    in which case `sizes` lists the node count of each record in order.

    Attributes:
        node_s (torch.Tensor): n x ds invariant node scalars.
        node_v (torch.Tensor): n x dv x 3 equivariant node vectors.
        edge_s (torch.Tensor): E x es invariant edge scalars.
        edge_v (torch.Tensor): E x 1 x 3 unit displacement from receiver to neighbour.
        frames (torch.Tensor): n x 3 x 3 local frames (rows e1, e2, e3), identity at masked residues.
        mask (torch.Tensor): n booleans, True at residues that take part in the graph.
        name (str): Record name.
    """

    def __init__(self, node_s=None, node_v=None, edge_index=None, edge_s=None, edge_v=None,
                 frames=None, mask=None, name=None, **kwargs):
        super().__init__(edge_index=edge_index, **kwargs)
        self.node_s = node_s
        self.node_v = node_v
        self.edge_s = edge_s
        self.edge_v = edge_v
        self.frames = frames
        self.mask = mask
        self.name = name
        if node_s is not None:
            self.num_nodes = node_s.shape[0]

    @property
    def names(self) -> list[str]:
        if "name" not in self:
            return []
        return list(self.name) if isinstance(self.name, (list, tuple)) else [self.name]

    @property
    def sizes(self) -> list[int]:
        if "ptr" in self:
            return self.ptr.diff().tolist()
        return [self.num_nodes]

    def frame(self, i: int, origins: np.ndarray | None = None) -> LocalFrame:
        origin = np.zeros(3) if origins is None else origins[i]
        return LocalFrame(origin, self.frames[i].detach().cpu().numpy())

    def cast(self, dtype: torch.dtype) -> "ProteinGraph":
        """Copy with every floating channel in `dtype`; indices and masks unchanged."""
        return self.clone().apply(lambda x: x.to(dtype) if x.is_floating_point() else x)


def _normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / torch.sqrt(torch.clamp(torch.sum(x * x, dim=dim, keepdim=True), min=EPS))


def _frames(n_atoms: torch.Tensor, ca: torch.Tensor, c_atoms: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Gram-Schmidt frames from (C - CA, N - CA) for every residue.

    Returns the n x 3 x 3 axes (rows e1, e2, e3) and the norm of the
    orthogonalised N direction, which is ~0 for collinear atoms.
    """
    e1 = _normalize(c_atoms - ca)
    u = n_atoms - ca
    u2 = u - torch.sum(u * e1, dim=-1, keepdim=True) * e1
    residual = torch.linalg.vector_norm(u2, dim=-1)
    e2 = _normalize(u2)
    e3 = torch.cross(e1, e2, dim=-1)
    return torch.stack([e1, e2, e3], dim=-2), residual


def local_frame(n_atom, ca, c_atom, tolerance: float = FRAME_TOLERANCE) -> LocalFrame:
    """
    Builds the right-handed local frame of one residue.

    Args:
        n_atom, ca, c_atom: 3-vectors of the backbone atoms.
        tolerance (float): Minimum out-of-line component of N, in Angstrom.

    Returns:
        LocalFrame: Origin at CA, orthonormal axes with det=+1.

    Raises:
        FrameError: If the three atoms are (nearly) collinear.
    """
    atoms = [torch.as_tensor(np.asarray(a, dtype=float)).reshape(1, 3) for a in (n_atom, ca, c_atom)]
    if torch.linalg.vector_norm(atoms[2] - atoms[1]) < tolerance:
        raise FrameError("C coincides with CA.")
    axes, residual = _frames(*atoms)
    if residual.item() < tolerance:
        raise FrameError("N, CA and C are collinear.")
    return LocalFrame(np.asarray(ca, dtype=float).reshape(3), axes[0].numpy())


def _knn(ca: torch.Tensor, mask: torch.Tensor, k: int) -> torch.Tensor:
    valid = torch.nonzero(mask, as_tuple=False).flatten()
    m = valid.numel()
    if m < 2:
        raise GraphError(f"A graph needs at least 2 unmasked residues, got {m}.")
    local = knn_graph(ca[valid], k=min(k, m - 1), loop=False, flow="source_to_target")
    # kd-tree output order is not canonical
    order = torch.argsort(local[1] * m + local[0])
    return valid[local[:, order]]


def build_knn_graph(record: BackboneRecord, k: int = 30) -> torch.Tensor:
    """
    Connects each unmasked residue to its k nearest unmasked C-alpha neighbours.

    Args:
        record (BackboneRecord): Source structure.
        k (int): Neighbours per residue; capped at (unmasked residues - 1).

    Returns:
        torch.Tensor: 2 x E edge index, row 0 the neighbour, row 1 the receiving residue.
    """
    ca = torch.as_tensor(record.coords[:, 1], dtype=torch.float64)
    return _knn(ca, torch.as_tensor(record.mask), k)


def rbf(distance: torch.Tensor, d_max: float = 20.0, count: int = 16) -> torch.Tensor:
    """Gaussian radial basis with `count` centres on [0, d_max] and width d_max / count."""
    centers = torch.linspace(0.0, d_max, count, dtype=distance.dtype)
    width = d_max / count
    return torch.exp(-(((distance.unsqueeze(-1) - centers) / width) ** 2))


def offset_encoding(offset: torch.Tensor, dims: int = 16) -> torch.Tensor:
    """Sinusoidal encoding of the sequence offset j - i."""
    frequency = torch.exp(torch.arange(0, dims, 2, dtype=torch.float64) * -(math.log(10000.0) / dims))
    angles = offset.to(torch.float64).unsqueeze(-1) * frequency
    return torch.cat([torch.cos(angles), torch.sin(angles)], dim=-1)


def _dihedral_features(coords: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """cos/sin of (phi, psi, omega) per residue followed by three validity bits."""
    n = coords.shape[0]
    atoms = coords.reshape(3 * n, 3)
    p0, p1, p2, p3 = atoms[:-3], atoms[1:-2], atoms[2:-1], atoms[3:]
    b0 = p0 - p1
    b1 = _normalize(p2 - p1)
    b2 = p3 - p2
    v = b0 - torch.sum(b0 * b1, dim=-1, keepdim=True) * b1
    w = b2 - torch.sum(b2 * b1, dim=-1, keepdim=True) * b1
    x = torch.sum(v * w, dim=-1)
    y = torch.sum(torch.cross(b1, v, dim=-1) * w, dim=-1)
    r = torch.clamp(torch.linalg.vector_norm(v, dim=-1) * torch.linalg.vector_norm(w, dim=-1), min=EPS)
    # quadruple q starts at atom q; pad so slot 3i is phi_i, 3i+1 psi_i, 3i+2 omega_i
    cos_d = F.pad(x / r, (1, 2)).reshape(n, 3)
    sin_d = F.pad(y / r, (1, 2)).reshape(n, 3)

    previous_ok = torch.zeros(n, dtype=torch.bool)
    previous_ok[1:] = mask[1:] & mask[:-1]
    next_ok = torch.zeros(n, dtype=torch.bool)
    next_ok[:-1] = mask[:-1] & mask[1:]
    valid = torch.stack([previous_ok, next_ok, next_ok], dim=-1)
    zero = torch.zeros_like(cos_d)
    cos_d = torch.where(valid, cos_d, zero)
    sin_d = torch.where(valid, sin_d, zero)
    return torch.cat([cos_d, sin_d, valid.to(coords.dtype)], dim=-1)


def _orientations(ca: torch.Tensor, n_atoms: torch.Tensor, c_atoms: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Forward/backward C-alpha directions and CA->N, CA->C unit vectors, n x 4 x 3."""
    n = ca.shape[0]
    forward = torch.zeros_like(ca)
    backward = torch.zeros_like(ca)
    pair_ok = (mask[1:] & mask[:-1]).unsqueeze(-1)
    forward[:-1] = torch.where(pair_ok, _normalize(ca[1:] - ca[:-1]), torch.zeros_like(ca[1:]))
    backward[1:] = torch.where(pair_ok, _normalize(ca[:-1] - ca[1:]), torch.zeros_like(ca[1:]))
    to_n = _normalize(n_atoms - ca)
    to_c = _normalize(c_atoms - ca)
    vectors = torch.stack([forward, backward, to_n, to_c], dim=-2)
    return torch.where(mask.view(n, 1, 1), vectors, torch.zeros_like(vectors))


def _to_local(vectors: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
    """Expresses ... x c x 3 vectors in the matching n x 3 x 3 frames, flattened to ... x 3c."""
    local = torch.einsum("nck,njk->ncj", vectors, frames)
    return local.reshape(local.shape[0], -1)


def featurize(record: BackboneRecord, config: FeatureConfig | None = None,
              dtype: torch.dtype = torch.float32) -> ProteinGraph:
    """
    Builds the invariant/equivariant feature graph of one record.

    Features are computed in float64 and cast to `dtype`. Residues whose atoms
    cannot define a frame are masked out before the graph is built.

    Args:
        record (BackboneRecord): Source structure.
        config (FeatureConfig): Block switches and sizes.
        dtype (torch.dtype): Output floating dtype.

    Returns:
        ProteinGraph: Single-record graph.
    """
    config = config or FeatureConfig()
    coords = torch.as_tensor(record.coords, dtype=torch.float64)
    mask = torch.as_tensor(record.mask).clone()
    n_atoms, ca, c_atoms = coords[:, 0], coords[:, 1], coords[:, 2]

    frames, _ = _frames(n_atoms, ca, c_atoms)
    degenerate = mask & ~torch.as_tensor(record.frame_mask)
    if degenerate.any():
        logger.warning("%s: %d residues with collinear backbone atoms masked out",
                       record.name, int(degenerate.sum()))
        mask &= ~degenerate
    identity = torch.eye(3, dtype=torch.float64).expand_as(frames)
    frames = torch.where(mask.view(-1, 1, 1), frames, identity)

    edge_index = _knn(ca, mask, config.k)
    src, dst = edge_index

    node_s, node_v = [], None
    if config.dihedrals:
        node_s.append(_dihedral_features(coords, mask))
    if config.orientations:
        node_v = _orientations(ca, n_atoms, c_atoms, mask)
        if config.frame_copies:
            node_s.append(_to_local(node_v, frames))
    else:
        node_v = torch.zeros(len(record), 0, 3, dtype=torch.float64)

    displacement = ca[src] - ca[dst]
    distance = torch.linalg.vector_norm(displacement, dim=-1)
    edge_v = _normalize(displacement).unsqueeze(-2)
    edge_s = []
    if config.distances:
        edge_s.append(rbf(distance, config.rbf_max, config.rbf_count))
    if config.offsets:
        edge_s.append(offset_encoding(src - dst, config.offset_dims))
    if config.frame_copies:
        edge_s.append(_to_local(edge_v, frames[dst]))

    node_s = torch.cat(node_s, dim=-1) * mask.unsqueeze(-1)
    return ProteinGraph(
        node_s=node_s.to(dtype), node_v=node_v.to(dtype), edge_index=edge_index,
        edge_s=torch.cat(edge_s, dim=-1).to(dtype), edge_v=edge_v.to(dtype),
        frames=frames.to(dtype), mask=mask, name=record.name,
    )


def batch_graphs(graphs: list[ProteinGraph]) -> ProteinGraph:
    """Merges graphs into one disconnected graph; `sizes` and `names` keep the input order."""
    return Batch.from_data_list(graphs)


def dump_features(graphs: list[ProteinGraph], path: Path) -> None:
    """Writes single-record graphs as line-delimited JSON for inspection."""
    with open(path, "w", encoding="utf-8") as handle:
        for graph in graphs:
            handle.write(json.dumps({
                "name": graph.names[0] if graph.names else "",
                "mask": graph.mask.tolist(),
                "node_s": graph.node_s.tolist(),
                "node_v": graph.node_v.tolist(),
                "edge_index": graph.edge_index.tolist(),
                "edge_s": graph.edge_s.tolist(),
                "edge_v": graph.edge_v.tolist(),
            }) + "\n")
    logger.info("Dumped features of %d graphs to %s", len(graphs), path)
