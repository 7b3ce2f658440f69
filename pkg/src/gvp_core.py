"""
Structural Module Engine

Geometric Vector Perceptrons and the GVPConv message-passing stack that turns
a residue graph into the invariant structural encoding Z_struc. Vector
channels stay rotation-equivariant through every layer; the readout expresses
them in each residue's local frame before mixing them with the scalars.
"""
import functools
import logging
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn
from torch_geometric.nn import MessagePassing
from torch_geometric.utils import degree

from src.checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_module_state, save_checkpoint
from src.geometry import ProteinGraph
from src.utils import sha256_file, torch_generator

logger = logging.getLogger(__name__)


class LayerShapeError(ValueError):
    """Raised when a feature tuple does not match a layer's dimensions."""


class ScalarVectorFeature(NamedTuple):
    """Paired channels: scalars n x ds (invariant), vectors n x dv x 3 (equivariant)."""
    scalars: torch.Tensor
    vectors: torch.Tensor


class StructuralEncoding(NamedTuple):
    """Invariant per-residue encoding, n x d, with its residue mask."""
    features: torch.Tensor
    mask: torch.Tensor


def tuple_sum(*args) -> ScalarVectorFeature:
    return ScalarVectorFeature(*map(sum, zip(*args)))


def tuple_cat(*args, dim: int = -1) -> ScalarVectorFeature:
    """
    Concatenates (s, V) tuples channel-wise; `dim=-1` on scalars is `dim=-2` on vectors.
    """
    dim %= len(args[0][0].shape)
    s_args, v_args = list(zip(*args))
    return ScalarVectorFeature(torch.cat(s_args, dim=dim), torch.cat(v_args, dim=dim))


def _norm_no_nan(x: torch.Tensor, axis: int = -1, keepdims: bool = False, eps: float = 1e-8,
                 sqrt: bool = True) -> torch.Tensor:
    """L2 norm clamped below at `eps`, so its gradient stays finite at zero."""
    out = torch.clamp(torch.sum(torch.square(x), axis, keepdims), min=eps)
    return torch.sqrt(out) if sqrt else out


def _merge(s: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Flattens vector channels behind the scalars, for code that passes single tensors."""
    v = torch.reshape(v, v.shape[:-2] + (3 * v.shape[-2],))
    return torch.cat([s, v], -1)


def _split(x: torch.Tensor, nv: int) -> ScalarVectorFeature:
    """Inverse of `_merge` given the number of vector channels."""
    if nv == 0:
        return ScalarVectorFeature(x, x.new_zeros(x.shape[:-1] + (0, 3)))
    v = torch.reshape(x[..., -3 * nv:], x.shape[:-1] + (nv, 3))
    return ScalarVectorFeature(x[..., :-3 * nv], v)


class GVP(nn.Module):
    """
    Geometric Vector Perceptron with vector gating.

    scalars' = act(W_m [s ; |W_h V|]), vectors' = sigmoid(W_g act_v(W_m [...])) * (W_v W_h V).
    The vector output is linear in the input vectors, hence rotation-equivariant.

    Args:
        in_dims (tuple[int, int]): (scalar, vector) input channels.
        out_dims (tuple[int, int]): (scalar, vector) output channels.
        h_dim (int | None): Intermediate vector channels; max(in, out) by default.
        activations (tuple): (scalar activation, gate activation); None disables.
        vector_gate (bool): Gate vectors with scalars instead of their own norms.
    """

    def __init__(self, in_dims, out_dims, h_dim=None, activations=(F.relu, torch.sigmoid), vector_gate=True):
        super().__init__()
        self.si, self.vi = in_dims
        self.so, self.vo = out_dims
        self.vector_gate = vector_gate
        if self.vi:
            self.h_dim = h_dim or max(self.vi, self.vo)
            self.wh = nn.Linear(self.vi, self.h_dim, bias=False)
            self.ws = nn.Linear(self.h_dim + self.si, self.so)
            if self.vo:
                self.wv = nn.Linear(self.h_dim, self.vo, bias=False)
                if self.vector_gate:
                    self.wsv = nn.Linear(self.so, self.vo)
        else:
            self.ws = nn.Linear(self.si, self.so)
        self.scalar_act, self.vector_act = activations

    def forward(self, x: ScalarVectorFeature) -> ScalarVectorFeature:
        s, v = x
        if s.shape[-1] != self.si or v.shape[-2:] != (self.vi, 3):
            raise LayerShapeError(
                f"GVP expects ({self.si}, {self.vi}x3) channels, got ({s.shape[-1]}, {tuple(v.shape[-2:])}).")
        if self.vi:
            vh = self.wh(v.transpose(-1, -2))
            vn = _norm_no_nan(vh, axis=-2)
            s = self.ws(torch.cat([s, vn], -1))
            if self.vo:
                v = self.wv(vh).transpose(-1, -2)
                if self.vector_gate:
                    gate = self.wsv(self.vector_act(s) if self.vector_act else s)
                    v = v * torch.sigmoid(gate).unsqueeze(-1)
                elif self.vector_act:
                    v = v * self.vector_act(_norm_no_nan(v, axis=-1, keepdims=True))
        else:
            s = self.ws(s)
        if not self.vo or not self.vi:
            v = s.new_zeros(s.shape[:-1] + (self.vo, 3))
        if self.scalar_act:
            s = self.scalar_act(s)
        return ScalarVectorFeature(s, v)


class _VDropout(nn.Module):
    """Drops whole vector channels (all three components together)."""

    def __init__(self, drop_rate: float):
        super().__init__()
        self.drop_rate = drop_rate

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.drop_rate == 0:
            return x
        keep = torch.bernoulli((1 - self.drop_rate) * torch.ones(x.shape[:-1], dtype=x.dtype)).unsqueeze(-1)
        return keep * x / (1 - self.drop_rate)


class Dropout(nn.Module):
    def __init__(self, drop_rate: float):
        super().__init__()
        self.sdropout = nn.Dropout(drop_rate)
        self.vdropout = _VDropout(drop_rate)

    def forward(self, x: ScalarVectorFeature) -> ScalarVectorFeature:
        s, v = x
        return ScalarVectorFeature(self.sdropout(s), self.vdropout(v))


class LayerNorm(nn.Module):
    """LayerNorm on scalars; vectors are divided by the RMS of their channel norms."""

    def __init__(self, dims):
        super().__init__()
        self.s, self.v = dims
        self.scalar_norm = nn.LayerNorm(self.s)

    def forward(self, x: ScalarVectorFeature) -> ScalarVectorFeature:
        s, v = x
        if not self.v:
            return ScalarVectorFeature(self.scalar_norm(s), v)
        vn = _norm_no_nan(v, axis=-1, keepdims=True, sqrt=False)
        vn = torch.sqrt(torch.mean(vn, dim=-2, keepdim=True))
        return ScalarVectorFeature(self.scalar_norm(s), v / vn)


class GVPConv(MessagePassing):
    """
    Message passing with GVPs: every edge j -> i emits GVP([s_j, V_j ; e_ji ; s_i, V_i]),
    and each receiving node takes the mean of its incoming messages (zero without any).
    """

    def __init__(self, in_dims, out_dims, edge_dims, n_layers: int = 3):
        super().__init__(aggr="mean")
        self.si, self.vi = in_dims
        self.so, self.vo = out_dims
        self.se, self.ve = edge_dims
        GVP_ = functools.partial(GVP, vector_gate=True)
        modules = [GVP_((2 * self.si + self.se, 2 * self.vi + self.ve), out_dims)]
        for _ in range(n_layers - 2):
            modules.append(GVP_(out_dims, out_dims))
        modules.append(GVP_(out_dims, out_dims, activations=(None, None)))
        self.message_func = nn.Sequential(*modules)

    def forward(self, x: ScalarVectorFeature, edge_index: torch.Tensor,
                edge_attr: ScalarVectorFeature) -> ScalarVectorFeature:
        s, v = x
        message = self.propagate(edge_index, s=s, v=v.reshape(v.shape[0], 3 * v.shape[1]), edge_attr=edge_attr)
        return _split(message, self.vo)

    def message(self, s_i, v_i, s_j, v_j, edge_attr):
        v_j = v_j.view(v_j.shape[0], v_j.shape[1] // 3, 3)
        v_i = v_i.view(v_i.shape[0], v_i.shape[1] // 3, 3)
        return _merge(*self.message_func(tuple_cat((s_j, v_j), edge_attr, (s_i, v_i))))


class GVPConvLayer(nn.Module):
    """
    One propagation step: residual message update and a residual GVP feed-forward,
    each followed by dropout and normalisation. Nodes without incoming edges keep
    their input features unchanged.
    """

    def __init__(self, node_dims, edge_dims, drop_rate: float = 0.1, n_message: int = 3, n_feedforward: int = 2):
        super().__init__()
        self.conv = GVPConv(node_dims, node_dims, edge_dims, n_layers=n_message)
        self.norm = nn.ModuleList([LayerNorm(node_dims) for _ in range(2)])
        self.dropout = nn.ModuleList([Dropout(drop_rate) for _ in range(2)])
        hid_dims = 4 * node_dims[0], 2 * node_dims[1]
        if n_feedforward == 1:
            ff = [GVP(node_dims, node_dims, activations=(None, None))]
        else:
            ff = [GVP(node_dims, hid_dims)]
            ff.extend(GVP(hid_dims, hid_dims) for _ in range(n_feedforward - 2))
            ff.append(GVP(hid_dims, node_dims, activations=(None, None)))
        self.ff_func = nn.Sequential(*ff)

    def forward(self, x: ScalarVectorFeature, edge_index: torch.Tensor,
                edge_attr: ScalarVectorFeature) -> ScalarVectorFeature:
        dh = self.conv(x, edge_index, edge_attr)
        h = self.norm[0](tuple_sum(x, self.dropout[0](dh)))
        dh = self.ff_func(h)
        h = self.norm[1](tuple_sum(h, self.dropout[1](dh)))
        has_messages = degree(edge_index[1], x.scalars.shape[0]) > 0
        return ScalarVectorFeature(
            torch.where(has_messages.unsqueeze(-1), h.scalars, x.scalars),
            torch.where(has_messages.view(-1, 1, 1), h.vectors, x.vectors),
        )


class StructuralEncoder(nn.Module):
    """
    The structural module: input embedding, `num_layers` GVPConv layers and a
    frame-projected readout to `d_out` invariant channels.

    Args:
        node_in_dims (tuple[int, int]): Featurizer node channels.
        edge_in_dims (tuple[int, int]): Featurizer edge channels.
        node_h_dims (tuple[int, int]): Hidden node channels (1024, 256 by default).
        edge_h_dims (tuple[int, int]): Hidden edge channels.
        d_out (int): Width of Z_struc.
        num_layers (int): GVPConv layers.
        drop_rate (float): Dropout inside each layer.
    """

    def __init__(self, node_in_dims, edge_in_dims, node_h_dims=(1024, 256), edge_h_dims=(32, 1),
                 d_out: int = 512, num_layers: int = 4, drop_rate: float = 0.1):
        super().__init__()
        self.node_in_dims, self.edge_in_dims = tuple(node_in_dims), tuple(edge_in_dims)
        self.W_v = nn.Sequential(LayerNorm(node_in_dims), GVP(node_in_dims, node_h_dims, activations=(None, None)))
        self.W_e = nn.Sequential(LayerNorm(edge_in_dims), GVP(edge_in_dims, edge_h_dims, activations=(None, None)))
        self.layers = nn.ModuleList(GVPConvLayer(node_h_dims, edge_h_dims, drop_rate) for _ in range(num_layers))
        readout_dim = node_h_dims[0] + 3 * node_h_dims[1]
        self.readout = nn.Sequential(nn.LayerNorm(readout_dim), nn.Linear(readout_dim, d_out))

    def embed(self, graph: ProteinGraph) -> tuple[ScalarVectorFeature, ScalarVectorFeature]:
        h_v = self.W_v(ScalarVectorFeature(graph.node_s, graph.node_v))
        h_e = self.W_e(ScalarVectorFeature(graph.edge_s, graph.edge_v))
        return h_v, h_e

    def propagate(self, graph: ProteinGraph) -> list[ScalarVectorFeature]:
        """Node states after the embedding and after every GVPConv layer (pre-frame)."""
        h_v, h_e = self.embed(graph)
        states = [h_v]
        for layer in self.layers:
            h_v = layer(h_v, graph.edge_index, h_e)
            states.append(h_v)
        return states

    def read_out(self, h: ScalarVectorFeature, graph: ProteinGraph) -> StructuralEncoding:
        s, v = h
        local = torch.einsum("nck,njk->ncj", v, graph.frames).reshape(v.shape[0], -1)
        features = self.readout(torch.cat([s, local], dim=-1))
        mask = graph.mask.to(features.device)
        return StructuralEncoding(features * mask.unsqueeze(-1).to(features.dtype), mask)

    def forward(self, graph: ProteinGraph) -> StructuralEncoding:
        return self.read_out(self.propagate(graph)[-1], graph)


def build_structural_encoder(config) -> StructuralEncoder:
    features = config.features
    return StructuralEncoder(
        features.node_dims, features.edge_dims,
        node_h_dims=(config.node_hidden_s, config.node_hidden_v),
        edge_h_dims=(config.edge_hidden_s, config.edge_hidden_v),
        d_out=config.d_model, num_layers=config.gvp_layers, drop_rate=config.gvp_dropout,
    )


def init_random_psm(encoder: StructuralEncoder, seed: int) -> StructuralEncoder:
    """
    Non-pretrained initialisation: uniform +-1/sqrt(fan_in) for scalar paths and
    biases, orthogonal for the vector-mixing matrices, unit LayerNorms.
    """
    generator = torch_generator(seed, "random structural module")
    with torch.no_grad():
        for module in encoder.modules():
            if isinstance(module, GVP):
                for name in ("wh", "wv"):
                    if hasattr(module, name):
                        nn.init.orthogonal_(getattr(module, name).weight, generator=generator)
                for name in ("ws", "wsv"):
                    if hasattr(module, name):
                        _uniform_fan_in(getattr(module, name), generator)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        _uniform_fan_in(encoder.readout[1], generator)
    return encoder


def _uniform_fan_in(linear: nn.Linear, generator: torch.Generator) -> None:
    bound = 1.0 / max(linear.in_features, 1) ** 0.5
    nn.init.uniform_(linear.weight, -bound, bound, generator=generator)
    if linear.bias is not None:
        nn.init.uniform_(linear.bias, -bound, bound, generator=generator)


def psm_checkpoint(encoder: StructuralEncoder, config, alphabet_hash: str, metadata: dict | None = None) -> Checkpoint:
    return Checkpoint(kind="psm", config_hash=config.fingerprint("structural"), alphabet_hash=alphabet_hash,
                      tensors={f"psm.{k}": v.detach().clone() for k, v in encoder.state_dict().items()},
                      metadata=metadata or {})


def save_psm(encoder: StructuralEncoder, config, alphabet_hash: str, path: Path, metadata: dict | None = None) -> Path:
    return save_checkpoint(psm_checkpoint(encoder, config, alphabet_hash, metadata), path)


def load_pretrained_psm(path: Path, encoder: StructuralEncoder, config, alphabet_hash: str | None = None) -> dict:
    """
    Loads structural weights into `encoder`.

    Accepts a `psm` checkpoint or a full `mmdesign` checkpoint (whose `psm.`
    tensors are used). The shape table must match exactly; nothing is loaded
    otherwise.

    Returns:
        dict: Provenance (path, file digest, source kind, loaded tensor names).
    """
    checkpoint = load_checkpoint(path, alphabet_hash=alphabet_hash)
    if checkpoint.kind not in ("psm", "mmdesign"):
        raise CheckpointError(f"{path} holds a '{checkpoint.kind}' checkpoint, not structural weights.")
    if checkpoint.kind == "psm" and checkpoint.config_hash != config.fingerprint("structural"):
        logger.warning("%s was written under a different structural config; shapes decide", path)
    loaded = load_module_state(encoder, checkpoint.subset("psm."), "structural module")
    provenance = {"path": str(path), "sha256": sha256_file(path), "kind": checkpoint.kind,
                  "tensors": [f"psm.{name}" for name in loaded]}
    logger.info("Loaded %d structural tensors from %s", len(loaded), path)
    return provenance
