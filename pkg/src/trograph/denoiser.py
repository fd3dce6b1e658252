"""Edge-augmented graph-transformer noise predictor, its loss and training loop.

Each layer runs an object-to-link attention block followed by a link-to-link
block. Values are built per (target, source) pair from both node tokens and
the edge token, and edge tokens are carried as hidden state across layers.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .diffusion import DiffusionSchedule, forward_noise
from .trograph import GEOM_EMBED_DIM, TroGraph, rescale_graph
from .pointcloud import OBJECT_FEATURE_DIM

log = logging.getLogger(__name__)

DTYPE = torch.float64
OBJ_DIM = 3 + 1 + OBJECT_FEATURE_DIM
LINK_DIM = 6 + GEOM_EMBED_DIM
CHECKPOINT_MAGIC = b"TRO1"
CHECKPOINT_VERSION = 1
_MASKED_SCORE = -1e30


@dataclass
class DenoiserConfig:
    d: int = 64
    n_layers: int = 6
    ff_mult: int = 2
    T: int = 1000
    seed: int = 0
    length_unit: float = 0.05  # meters per model length unit; graphs are rescaled by 1 / length_unit

    def __post_init__(self):
        if not self.length_unit > 0:
            raise ValueError("length_unit must be positive")


@dataclass
class TrainConfig:
    gamma_p: float = 1.0
    gamma_r: float = 1.0
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 0.8
    lr_decay_every: int = 20  # epochs
    seed: int = 0
    max_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.gamma_p < 0 or self.gamma_r < 0:
            raise ValueError("loss weights must be non-negative")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half, 1))
    args = t.to(DTYPE)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.SiLU(), nn.Linear(d_hidden, d_out))


class AttentionBlock(nn.Module):
    """Target nodes and edges refined by attending over source nodes."""

    def __init__(self, d: int, ff_mult: int = 2):
        super().__init__()
        self.d = d
        self.norm_tgt = nn.LayerNorm(d)
        self.norm_src = nn.LayerNorm(d)
        self.norm_edge = nn.LayerNorm(d)
        self.h_q = nn.Linear(d, d)
        self.h_k = nn.Linear(d, d)
        self.h_v = nn.Linear(3 * d, d)
        self.norm_out = nn.LayerNorm(d)
        self.node_mlp = _mlp(d, ff_mult * d, d)
        self.edge_mlp = _mlp(2 * d, ff_mult * d, d)

    def forward(self, x_tgt, x_src, edges, src_mask):
        """Shapes: x_tgt (B, Nt, d), x_src (B, Ns, d), edges (B, Nt, Ns, d), src_mask (B, Nt, Ns)."""
        nt, ns = x_tgt.shape[1], x_src.shape[1]
        xt = self.norm_tgt(x_tgt)
        xs = self.norm_src(x_src)
        e = self.norm_edge(edges)
        q = self.h_q(xt)
        k = self.h_k(xs)
        pair = torch.cat(
            [xt[:, :, None, :].expand(-1, -1, ns, -1), xs[:, None, :, :].expand(-1, nt, -1, -1), e],
            dim=-1,
        )
        v = self.h_v(pair)
        scores = torch.einsum("btd,bsd->bts", q, k) / math.sqrt(self.d)
        scores = torch.where(src_mask, scores, torch.full_like(scores, _MASKED_SCORE))
        w = torch.softmax(scores, dim=-1) * src_mask.any(dim=-1, keepdim=True)
        attn = torch.einsum("bts,btsd->btd", w, v)
        h = x_tgt + attn
        x_new = h + self.node_mlp(self.norm_out(h))
        e_new = edges + self.edge_mlp(torch.cat([v, edges], dim=-1))
        return x_new, e_new


class DenoiserLayer(nn.Module):
    def __init__(self, d: int, ff_mult: int = 2):
        super().__init__()
        self.or_attn = AttentionBlock(d, ff_mult)
        self.rr_attn = AttentionBlock(d, ff_mult)


class GraphDenoiser(nn.Module):
    """``eps_theta(G_t, t)`` over padded batches of graphs."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.enc_obj = _mlp(OBJ_DIM, d, d)
        self.enc_link = _mlp(LINK_DIM, d, d)
        self.enc_or = _mlp(6, d, d)
        self.enc_rr = _mlp(6, d, d)
        self.time_mlp = _mlp(d, d, d)
        self.layers = nn.ModuleList(DenoiserLayer(d, cfg.ff_mult) for _ in range(cfg.n_layers))
        self.head = nn.Linear(cfg.n_layers * d, 6)

    def forward(self, obj, links, e_or, e_rr, mask, t):
        """obj (B, P, 68), links (B, L, 134), e_or (B, P, L, 6), e_rr (B, L, L, 6),
        mask (B, L) bool, t (B,) -> (B, L, 6)."""
        phi = self.time_mlp(timestep_embedding(t, self.cfg.d))[:, None, :]
        z_o = self.enc_obj(obj) + phi
        z_r = self.enc_link(links) + phi
        z_or = self.enc_or(e_or.transpose(1, 2)) + phi[:, None]  # (B, L, P, d)
        z_rr = self.enc_rr(e_rr) + phi[:, None]

        B, L = mask.shape
        P = obj.shape[1]
        or_mask = torch.ones(B, L, P, dtype=torch.bool)
        eye = torch.eye(L, dtype=torch.bool)
        rr_mask = mask[:, None, :] & ~eye[None]

        per_layer = []
        for layer in self.layers:
            z_r, z_or = layer.or_attn(z_r, z_o, z_or, or_mask)
            z_r, z_rr = layer.rr_attn(z_r, z_r, z_rr, rr_mask)
            per_layer.append(z_r)
        out = self.head(torch.cat(per_layer, dim=-1))
        return out * mask[..., None].to(DTYPE)


def graph_arrays(graphs: list[TroGraph], ts) -> dict[str, torch.Tensor]:
    """Stack graphs into the padded tensors consumed by :class:`GraphDenoiser`."""
    return {
        "obj": torch.as_tensor(np.stack([g.object_nodes.as_array() for g in graphs]), dtype=DTYPE),
        "links": torch.as_tensor(np.stack([g.link_nodes.as_array() for g in graphs]), dtype=DTYPE),
        "e_or": torch.as_tensor(np.stack([g.edges.e_or for g in graphs]), dtype=DTYPE),
        "e_rr": torch.as_tensor(np.stack([g.edges.rr_full() for g in graphs]), dtype=DTYPE),
        "mask": torch.as_tensor(np.stack([g.mask for g in graphs])),
        "t": torch.as_tensor(np.asarray(ts, dtype=np.int64)),
    }


class DenoiserModel:
    """Parameters plus config; callable as ``model(graph, t) -> (L_pad, 6)``.

    The graph must already be in model units (see ``length_unit``).
    """

    def __init__(self, cfg: DenoiserConfig | None = None, net: GraphDenoiser | None = None):
        self.cfg = cfg or DenoiserConfig()
        if net is None:
            torch.manual_seed(self.cfg.seed)
            net = GraphDenoiser(self.cfg).to(DTYPE)
        self.net = net

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    @property
    def length_unit(self) -> float:
        """Meters per unit of the space the model diffuses in."""
        return self.cfg.length_unit

    def named_parameters(self) -> dict[str, torch.Tensor]:
        return dict(self.net.named_parameters())

    def forward(self, graph: TroGraph, t: int) -> np.ndarray:
        return self.predict([graph], [t])[0]

    __call__ = forward

    def predict(self, graphs: list[TroGraph], ts) -> np.ndarray:
        for g in graphs:
            self._check(g)
        with torch.no_grad():
            out = self.net(**graph_arrays(graphs, ts))
        return out.numpy()

    def _check(self, g: TroGraph) -> None:
        if g.object_nodes.as_array().shape[1] != OBJ_DIM or g.link_nodes.as_array().shape[1] != LINK_DIM:
            raise ValueError("graph node widths do not match the denoiser")


def loss(eps_true, eps_pred, gamma_p: float = 1.0, gamma_r: float = 1.0, mask=None):
    """Weighted squared error of translation (cols 0-2) and rotation (cols 3-5) noise.

    Summed over unmasked rows, averaged over the batch. Works on numpy arrays
    and torch tensors alike.
    """
    diff = eps_true - eps_pred
    sq = diff * diff
    per_row = gamma_p * sq[..., :3].sum(-1) + gamma_r * sq[..., 3:].sum(-1)
    if mask is not None:
        per_row = per_row * mask
    batch = per_row.shape[0] if per_row.ndim > 1 else 1
    return per_row.sum() / batch


def _batch_loss(model: DenoiserModel, arrays: dict, eps_true: torch.Tensor, gamma_p: float, gamma_r: float):
    pred = model.net(**arrays)
    return loss(eps_true, pred, gamma_p, gamma_r, arrays["mask"].to(DTYPE))


def backward(model: DenoiserModel, g_t, t, eps_true, gamma_p: float = 1.0, gamma_r: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact parameter gradients for one graph or a list of graphs."""
    graphs = g_t if isinstance(g_t, list) else [g_t]
    ts = t if isinstance(t, (list, tuple, np.ndarray)) else [t]
    eps = torch.as_tensor(np.asarray(eps_true, dtype=float).reshape(len(graphs), -1, 6), dtype=DTYPE)
    model.net.zero_grad(set_to_none=True)
    value = _batch_loss(model, graph_arrays(graphs, ts), eps, gamma_p, gamma_r)
    value.backward()
    grads = {}
    for name, p in model.net.named_parameters():
        g = p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape))
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        grads[name] = g
    return float(value.detach()), grads


def oracle_denoiser(psi0: np.ndarray, schedule: DiffusionSchedule):
    """Exact noise predictor for a one-graph dataset with clean poses ``psi0``."""
    psi0 = np.asarray(psi0, dtype=float)

    def predict(graph: TroGraph, t: int) -> np.ndarray:
        if t <= 0:
            raise ValueError("oracle denoiser is undefined at t = 0")
        ab = schedule.abar(t)
        eps = (graph.poses - np.sqrt(ab) * psi0) / np.sqrt(1.0 - ab)
        return np.where(graph.mask[:, None], eps, 0.0)

    return predict


@dataclass
class TrainState:
    step: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    model: DenoiserModel
    losses: list
    lrs: list
    state: TrainState

    def smoothed(self, window: int = 50) -> np.ndarray:
        return smooth(self.losses, window)


def smooth(values, window: int = 50) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries average what exists."""
    v = np.asarray(values, dtype=float)
    c = np.cumsum(np.insert(v, 0, 0.0))
    n = np.arange(1, len(v) + 1)
    lo = np.maximum(0, n - window)
    return (c[n] - c[lo]) / (n - lo)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, losses):
        super().__init__(msg)
        self.losses = losses


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def train(model: DenoiserModel, dataset: list[TroGraph], schedule: DiffusionSchedule, cfg: TrainConfig, state: TrainState | None = None, callback=None) -> TrainResult:
    """Noise-prediction training with Adam and step learning-rate decay.

    Randomness is derived from ``(cfg.seed, epoch)`` for batch order and
    ``(cfg.seed, step)`` for timesteps and noise, so resuming from a saved
    ``state`` reproduces the uninterrupted run. Dataset graphs are in meters
    and are rescaled to the model's length unit before noising.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    state = state or TrainState()
    params = dict(model.net.named_parameters())
    for name, p in params.items():
        state.adam_m.setdefault(name, torch.zeros_like(p))
        state.adam_v.setdefault(name, torch.zeros_like(p))
    dataset = [rescale_graph(g, 1.0 / model.length_unit) for g in dataset]
    n = len(dataset)
    bs = min(cfg.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    losses, lrs = [], []
    while state.step < total:
        step = state.step
        epoch, k = divmod(step, per_epoch)
        order = np.random.default_rng([cfg.seed, 0, epoch]).permutation(n)
        idx = order[k * bs : (k + 1) * bs]
        rng = np.random.default_rng([cfg.seed, 1, step])
        ts = rng.integers(1, schedule.T + 1, size=len(idx))
        graphs, eps = [], []
        for i, t in zip(idx, ts):
            g0 = dataset[i]
            psi_t, e = forward_noise(g0.poses, int(t), schedule, rng, mask=g0.mask)
            graphs.append(g0.with_link_poses(psi_t))
            eps.append(e)
        arrays = graph_arrays(graphs, ts)
        eps_t = torch.as_tensor(np.stack(eps), dtype=DTYPE)

        model.net.zero_grad(set_to_none=True)
        value = _batch_loss(model, arrays, eps_t, cfg.gamma_p, cfg.gamma_r)
        value.backward()
        lv = float(value.detach())
        if not math.isfinite(lv):
            raise TrainingDiverged(f"loss became non-finite at step {step}", losses)
        lr = learning_rate(cfg, epoch)
        _adam_update(params, state, lr, cfg)
        losses.append(lv)
        lrs.append(lr)
        state.step += 1
        if callback is not None:
            callback(state.step, lv, lr)
    return TrainResult(model, losses, lrs, state)


def _adam_update(params: dict, state: TrainState, lr: float, cfg: TrainConfig) -> None:
    b1, b2 = cfg.beta1, cfg.beta2
    n = state.step + 1
    with torch.no_grad():
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = state.adam_m[name]
            v = state.adam_v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**n)
            v_hat = v / (1 - b2**n)
            p.sub_(lr * m_hat / (v_hat.sqrt() + cfg.adam_eps))


# -- checkpoints -------------------------------------------------------------


def _write_tensors(path: Path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


def _read_tensors(path: Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out


def save_checkpoint(path, model: DenoiserModel, state: TrainState | None = None, train_cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    """Write ``path`` (binary tensors) and ``path.json`` (config sidecar).

    ``extra`` is stored verbatim in the sidecar (graph sizes, schedule, ...).
    """
    path = Path(path)
    tensors = {f"param/{k}": v.detach().numpy() for k, v in model.net.named_parameters()}
    if state is not None:
        tensors.update({f"adam_m/{k}": v.numpy() for k, v in state.adam_m.items()})
        tensors.update({f"adam_v/{k}": v.numpy() for k, v in state.adam_v.items()})
    _write_tensors(path, tensors)
    sidecar = {
        "schema_version": CHECKPOINT_VERSION,
        "model": asdict(model.cfg),
        "train": asdict(train_cfg) if train_cfg is not None else None,
        "step": state.step if state is not None else 0,
        "n_params": model.n_params,
        "extra": extra or {},
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[DenoiserModel, TrainState, dict]:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    cfg = DenoiserConfig(**sidecar["model"])
    model = DenoiserModel(cfg)
    tensors = _read_tensors(path)
    params = dict(model.net.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            key = f"param/{name}"
            if key not in tensors:
                raise ValueError(f"checkpoint lacks parameter {name}")
            p.copy_(torch.as_tensor(tensors[key], dtype=DTYPE))
    state = TrainState(step=int(sidecar.get("step", 0)))
    for name in params:
        if f"adam_m/{name}" in tensors:
            state.adam_m[name] = torch.as_tensor(tensors[f"adam_m/{name}"], dtype=DTYPE).clone()
            state.adam_v[name] = torch.as_tensor(tensors[f"adam_v/{name}"], dtype=DTYPE).clone()
    return model, state, sidecar
