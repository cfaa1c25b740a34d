"""Sphere responses, hull downsampling, and the S^2 -> SO(3) classifier.

The harmonic layers are evaluated as real bilinear forms obtained from the
transforms in :mod:`rotinv.spherical`; autograd (float64 torch) supplies the
reverse-mode gradients.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import spherical as sp
from .attention import AttentionParams, attention_confidences, candidate_offsets, select_attention
from .geometry import PointCloud, bounding_radius, compute_centroid

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
REFERENCE_PARAMETER_COUNT = 2201
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
DTYPE = torch.float64


@dataclass
class ModelConfig:
    s2_bandwidth_in: int = 4
    s2_bandwidth_out: int = 2
    so3_bandwidth_in: int = 2
    so3_bandwidth_out: int = 1
    channels: tuple = (1, 8, 16)
    hull_points: int = 8
    attention_points: int = 64
    radius_fraction: float = 0.25
    invariant_attention: bool = False
    normalize_scale: bool = True
    # "learned": confidence from the FC layer; "uniform": attention removed
    attention: str = "learned"
    # kernels are grid samples on the first few beta rings next to the pole
    # initial confidences softplus(g * (feature - 1)) decay like exp near the far
    # end, so sampling starts out concentrated instead of nearly uniform
    attention_init_gain: float = 8.0
    s2_kernel_rings: int = 1
    so3_kernel_rings: int = 1
    num_classes: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self):
        bws = (self.s2_bandwidth_in, self.s2_bandwidth_out, self.so3_bandwidth_in, self.so3_bandwidth_out)
        if any(int(b) != b or b < 1 for b in bws):
            raise ValueError(f"bandwidths must be positive integers: {bws}")
        if not (self.s2_bandwidth_out <= self.s2_bandwidth_in and self.so3_bandwidth_out <= self.so3_bandwidth_in):
            raise ValueError("bandwidths must not increase inside a layer")
        if self.so3_bandwidth_in != self.s2_bandwidth_out:
            raise ValueError("SO(3) layer input bandwidth must equal the S^2 layer output bandwidth")
        if len(self.channels) != 3 or self.channels[0] != 1 or min(self.channels) < 1:
            raise ValueError(f"channels must be (1, C1, C2), got {self.channels}")
        if not 1 <= self.hull_points <= self.attention_points:
            raise ValueError("need 1 <= hull_points <= attention_points")
        if not (math.isfinite(self.attention_init_gain) and self.attention_init_gain >= 0):
            raise ValueError("attention_init_gain must be finite and nonnegative")
        if self.radius_fraction <= 0:
            raise ValueError("radius_fraction must be positive")
        if self.attention not in ("learned", "uniform"):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if not 1 <= self.s2_kernel_rings <= 2 * self.s2_bandwidth_in:
            raise ValueError("s2_kernel_rings out of range")
        if not 1 <= self.so3_kernel_rings <= 2 * self.so3_bandwidth_in:
            raise ValueError("so3_kernel_rings out of range")
        if self.num_classes != 2:
            raise ValueError("only binary classification is supported")

    @property
    def attention_width(self) -> int:
        return 1 if self.invariant_attention else 3

    @property
    def s2_kernel_size(self) -> int:
        return self.s2_kernel_rings * 2 * self.s2_bandwidth_in

    @property
    def so3_kernel_size(self) -> int:
        return self.so3_kernel_rings * (2 * self.so3_bandwidth_in) ** 2

    @property
    def hull_fraction(self) -> float:
        """The top-eta share of the region of interest kept as hull points."""
        return self.hull_points / self.attention_points

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    c0, c1, c2 = config.channels
    return {
        "attention.weight": (config.attention_width,),
        "attention.bias": (1,),
        "s2.kernel": (c0, c1, config.s2_kernel_size),
        "bn1.gamma": (c1,),
        "bn1.beta": (c1,),
        "so3.kernel": (c1, c2, config.so3_kernel_size),
        "bn2.gamma": (c2,),
        "bn2.beta": (c2,),
        "fc.weight": (c2, config.num_classes),
        "fc.bias": (config.num_classes,),
    }


def parameter_count(config: ModelConfig) -> tuple[int, list[tuple[str, tuple, int]]]:
    rows = [(name, shape, int(np.prod(shape))) for name, shape in parameter_shapes(config).items()]
    return sum(r[2] for r in rows), rows


def format_parameter_table(config: ModelConfig) -> str:
    total, rows = parameter_count(config)
    lines = [f"{'parameter':<18} {'shape':<14} {'count':>7}"]
    lines += [f"{name:<18} {str(tuple(shape)):<14} {n:>7}" for name, shape, n in rows]
    lines.append(f"{'total':<18} {'':<14} {total:>7}")
    lines.append(f"{'reference total':<18} {'':<14} {REFERENCE_PARAMETER_COUNT:>7}")
    lines.append(
        f"difference {total - REFERENCE_PARAMETER_COUNT:+d}: kernels here are grid samples on "
        f"{config.s2_kernel_rings} S2 ring(s) x {2 * config.s2_bandwidth_in} nodes and "
        f"{config.so3_kernel_rings} SO(3) beta-layer(s) x {(2 * config.so3_bandwidth_in) ** 2} nodes; "
        "the reference kernel parameterization is not known"
    )
    return "\n".join(lines)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]
    running: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "Model":
        return Model(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.running.items()},
        )

    @property
    def attention_params(self) -> AttentionParams:
        return AttentionParams(self.params["attention.weight"], float(self.params["attention.bias"][0]))


def _attention_init(config: ModelConfig, rng) -> np.ndarray:
    if config.invariant_attention:
        return np.full(1, config.attention_init_gain)
    v = rng.standard_normal(3)
    return config.attention_init_gain * v / np.linalg.norm(v)


def init_model(config: ModelConfig, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    shapes = parameter_shapes(config)
    c0, c1, c2 = config.channels
    params = {
        "attention.weight": _attention_init(config, rng),
        "attention.bias": np.full(1, -config.attention_init_gain),
        "s2.kernel": rng.standard_normal(shapes["s2.kernel"]) / math.sqrt(c0 * config.s2_kernel_size),
        "bn1.gamma": np.ones(c1),
        "bn1.beta": np.zeros(c1),
        "so3.kernel": rng.standard_normal(shapes["so3.kernel"]) / math.sqrt(c1 * config.so3_kernel_size),
        "bn2.gamma": np.ones(c2),
        "bn2.beta": np.zeros(c2),
        "fc.weight": rng.standard_normal(shapes["fc.weight"]) / math.sqrt(c2),
        "fc.bias": np.zeros(config.num_classes),
    }
    if config.attention == "uniform":
        params["attention.weight"][:] = 0.0
        params["attention.bias"][:] = 0.0
    running = {
        "bn1.running_mean": np.zeros(c1),
        "bn1.running_var": np.ones(c1),
        "bn2.running_mean": np.zeros(c2),
        "bn2.running_var": np.ones(c2),
    }
    return Model(config, params, running)


# -- sphere responses and hull selection ----------------------------------------------


def sphere_response_vectors(Y: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    """S_i = sum over y outside the radius-r ball around y_i of (y - y_i).

    The response f_i(u) = u . S_i is linear in the viewing direction u.
    Returns (S, number of contributing points per center).
    """
    diff = Y[None, :, :] - Y[:, None, :]  # [i, j] = y_j - y_i
    outside = np.sqrt(np.sum(diff**2, axis=-1)) > r
    return np.einsum("ij,ijk->ik", outside, diff), outside.sum(axis=1)


def build_sphere_responses(Y, r: float, bandwidth: int = 4) -> np.ndarray:
    """Responses f_i(u) = sum_{|y - y_i| > r} u . (y - y_i) on the S^2 grid.

    Y: (M, 3) selected points. Returns (M, 2b, 2b).
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] < 2:
        raise ValueError("need at least 2 selected points")
    if r <= 0:
        raise ValueError("radius must be positive")
    S, count = sphere_response_vectors(Y, r)
    empty = np.flatnonzero(count == 0)
    if empty.size:
        logger.warning("%d sphere(s) see no points outside radius %.3g; their response is zero", empty.size, r)
    U = sp.build_s2_grid(bandwidth).directions()
    return np.einsum("jkd,id->ijk", U, S)


def hull_downsample(responses, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the k spheres with the largest peak response (ties: lowest index)."""
    responses = np.asarray(responses)
    scores = responses.reshape(responses.shape[0], -1).max(axis=1)
    if not 1 <= k <= len(scores):
        raise ValueError(f"cannot keep {k} of {len(scores)} spheres")
    order = np.argsort(-scores, kind="stable")
    return order[:k].copy(), scores


# -- per-sample preprocessing (no learnable state involved except selection) ---------------


@dataclass
class PreparedSample:
    fields: np.ndarray  # (k, 2b, 2b) responses at hull points
    hull_features: np.ndarray  # (k, F) attention inputs at hull points
    candidate_features: np.ndarray  # (M, F) attention inputs of all candidates
    diagnostics: dict


def prepare_sample(model: Model, cloud: PointCloud, seed, mode: str) -> PreparedSample:
    cfg = model.config
    if cloud.n < cfg.attention_points + 1:
        raise ValueError(f"cloud has {cloud.n} points; need more than attention_points={cfg.attention_points}")
    centroid = compute_centroid(cloud)
    pts = cloud.points - centroid.coords
    if cfg.normalize_scale:
        scale = bounding_radius(pts, np.zeros(3))
        pts = pts / scale
    else:
        scale = 1.0
    idx, offsets, norms = candidate_offsets(PointCloud(pts), type(centroid)(centroid.index, np.zeros(3)))
    feats = norms[:, None] if cfg.invariant_attention else offsets / norms[:, None]

    if cfg.attention == "uniform":
        conf = np.ones(len(idx))
        sel = select_attention(conf, cfg.attention_points, "stochastic", seed)
    else:
        conf = attention_confidences(feats, model.attention_params)
        sel = select_attention(conf, cfg.attention_points, "stochastic" if mode == "train" else "top-k", seed)
    Y = pts[idx[sel.indices]]
    radius = cfg.radius_fraction * bounding_radius(Y)
    responses = build_sphere_responses(Y, radius, cfg.s2_bandwidth_in)
    hull, scores = hull_downsample(responses, cfg.hull_points)
    chosen = sel.indices[hull]
    diagnostics = {
        "centroid": centroid.index,
        "scale": scale,
        "attention_indices": idx[sel.indices],
        "hull_indices": idx[chosen],
        "hull_scores": scores[hull],
        "radius": radius,
    }
    return PreparedSample(responses[hull], feats[chosen], feats, diagnostics)


# -- differentiable part ------------------------------------------------------------------


_TENSOR_CACHE: dict = {}


def _layer_tensors(cfg: ModelConfig):
    key = (cfg.s2_bandwidth_in, cfg.s2_bandwidth_out, cfg.so3_bandwidth_out, cfg.s2_kernel_rings, cfg.so3_kernel_rings)
    if key not in _TENSOR_CACHE:
        b1, b2, b3 = cfg.s2_bandwidth_in, cfg.s2_bandwidth_out, cfg.so3_bandwidth_out
        K1 = sp.s2_conv_tensor(b1, b2).reshape(8 * b2**3, 4 * b1 * b1, 2 * b1, 2 * b1)
        K1 = K1[:, :, : cfg.s2_kernel_rings, :].reshape(8 * b2**3, 4 * b1 * b1, -1)
        K2 = sp.so3_conv_tensor(b2, b3).reshape(8 * b3**3, 8 * b2**3, 2 * b2, 2 * b2, 2 * b2)
        K2 = K2[..., : cfg.so3_kernel_rings, :].reshape(8 * b3**3, 8 * b2**3, -1)
        haar = sp.build_so3_grid(b3).node_weights.reshape(-1)
        _TENSOR_CACHE[key] = tuple(torch.from_numpy(np.ascontiguousarray(t)) for t in (K1, K2, haar))
    return _TENSOR_CACHE[key]


def s2_kernel_grid(cfg: ModelConfig, kernel: np.ndarray) -> np.ndarray:
    """Embed ring-supported kernel samples into the full S^2 grid (zeros elsewhere)."""
    b = cfg.s2_bandwidth_in
    full = np.zeros(kernel.shape[:-1] + (2 * b, 2 * b))
    full[..., : cfg.s2_kernel_rings, :] = kernel.reshape(kernel.shape[:-1] + (cfg.s2_kernel_rings, 2 * b))
    return full


def so3_kernel_grid(cfg: ModelConfig, kernel: np.ndarray) -> np.ndarray:
    b = cfg.so3_bandwidth_in
    full = np.zeros(kernel.shape[:-1] + (2 * b, 2 * b, 2 * b))
    full[..., : cfg.so3_kernel_rings, :] = kernel.reshape(kernel.shape[:-1] + (2 * b, cfg.so3_kernel_rings, 2 * b))
    return full


def batchnorm(
    x, gamma, beta, running_mean, running_var, mode: str, axes=(0,), update: bool = True, momentum: float = BN_MOMENTUM
):
    """Per-channel batch normalization over ``axes`` (channel axis excluded).

    train: batch statistics (biased variance), running stats updated in place
    (running = momentum * running + (1 - momentum) * batch) when ``update``; eval: running statistics.
    Accepts numpy arrays or torch tensors.
    """
    as_numpy = isinstance(x, np.ndarray)
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)  # noqa: E731
    x, gamma, beta = t(x), t(gamma), t(beta)
    axes = tuple(axes)
    keep = [1 if i in axes else s for i, s in enumerate(x.shape)]
    if len(gamma) != math.prod(keep):
        raise ValueError(f"{len(gamma)} channel parameters for {math.prod(keep)} channels")
    if mode == "train":
        mean = x.mean(dim=axes, keepdim=True)
        var = ((x - mean) ** 2).mean(dim=axes, keepdim=True)
        if update:
            with torch.no_grad():
                running_mean *= momentum
                running_mean += (1 - momentum) * mean.detach().reshape(-1).numpy()
                running_var *= momentum
                running_var += (1 - momentum) * var.detach().reshape(-1).numpy()
    elif mode == "eval":
        mean = t(running_mean).reshape(keep)
        var = t(running_var).reshape(keep)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = gamma.reshape(keep) * (x - mean) / torch.sqrt(var + BN_EPS) + beta.reshape(keep)
    return out.detach().numpy() if as_numpy else out


def _first_argmax_pool(s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    # max over hull points (dim 1); gradient goes to the lowest index on ties
    arg = torch.from_numpy(np.argmax(s.detach().numpy(), axis=1))
    return torch.gather(s, 1, arg[:, None, :])[:, 0, :], arg


@dataclass
class ForwardResult:
    logits: np.ndarray  # (B, 2)
    features: np.ndarray  # (B, C2)
    diagnostics: list
    tape: dict | None = None


def forward_batch(
    model: Model,
    clouds,
    seeds,
    mode: str = "eval",
    record: bool = False,
    update_running: bool = True,
    keep_activations: bool = False,
    attention_mode: str | None = None,
    bn_momentum: float = BN_MOMENTUM,
) -> ForwardResult:
    """Run the network on a batch; batch statistics are pooled over the batch in train mode.

    ``attention_mode`` overrides the selection mode (defaults to ``mode``).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = model.config
    prepared = [prepare_sample(model, c, s, attention_mode or mode) for c, s in zip(clouds, seeds)]
    if len(prepared) != len(clouds):
        raise ValueError("need one seed per cloud")
    K1, K2, haar = _layer_tensors(cfg)

    with torch.set_grad_enabled(record):
        P = {k: torch.tensor(v, dtype=DTYPE, requires_grad=record) for k, v in model.params.items()}

        # soft confidence weights keep the attention layer on the gradient path
        weights = []
        for s in prepared:
            if cfg.attention == "uniform":
                weights.append(torch.full((len(s.fields),), 1.0 / len(s.candidate_features), dtype=DTYPE))
                continue
            z_all = torch.from_numpy(s.candidate_features) @ P["attention.weight"] + P["attention.bias"]
            z_hull = torch.from_numpy(s.hull_features) @ P["attention.weight"] + P["attention.bias"]
            weights.append(torch.nn.functional.softplus(z_hull) / torch.nn.functional.softplus(z_all).sum())
        wts = torch.stack(weights)  # (B, k)
        fields = torch.from_numpy(np.stack([s.fields for s in prepared])).reshape(len(prepared), cfg.hull_points, -1)
        x = (wts[:, :, None] * fields)[:, :, None, :]  # (B, k, 1, X)

        conv1 = torch.einsum("gxy,bkcx,coy->bkog", K1, x, P["s2.kernel"])
        act1 = batchnorm(
            torch.relu(conv1),
            P["bn1.gamma"],
            P["bn1.beta"],
            model.running["bn1.running_mean"],
            model.running["bn1.running_var"],
            mode,
            axes=(0, 1, 3),
            update=update_running,
            momentum=bn_momentum,
        )
        conv2 = torch.einsum("ghy,bkch,coy->bkog", K2, act1, P["so3.kernel"])
        act2 = batchnorm(
            torch.relu(conv2),
            P["bn2.gamma"],
            P["bn2.beta"],
            model.running["bn2.running_mean"],
            model.running["bn2.running_var"],
            mode,
            axes=(0, 1, 3),
            update=update_running,
            momentum=bn_momentum,
        )
        s_hull = torch.einsum("bkog,g->bko", act2, haar)
        s_x, argmax = _first_argmax_pool(s_hull)
        logits = s_x @ P["fc.weight"] + P["fc.bias"]

    diags = []
    for i, s in enumerate(prepared):
        d = dict(s.diagnostics)
        d["hull_weights"] = wts[i].detach().numpy().copy()
        d["maxpool_argmax"] = argmax[i].numpy().copy()
        d["hull_features"] = s_hull[i].detach().numpy().copy()
        if keep_activations:
            d["conv1"] = conv1[i].detach().numpy().copy()
            d["act1"] = act1[i].detach().numpy().copy()
            d["act2"] = act2[i].detach().numpy().copy()
        diags.append(d)
    tape = {"params": P, "logits": logits} if record else None
    return ForwardResult(logits.detach().numpy().copy(), s_x.detach().numpy().copy(), diags, tape)


def forward(model: Model, cloud: PointCloud, seed=0, mode: str = "eval", **kw):
    """Single-cloud forward: (logits (2,), feature s_X (C2,), diagnostics)."""
    res = forward_batch(model, [cloud], [seed], mode, **kw)
    return res.logits[0], res.features[0], res.diagnostics[0]


def torch_cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    return (torch.logsumexp(logits, dim=1) - logits.gather(1, labels[:, None])[:, 0]).mean()


def backward(result: ForwardResult, loss_fn) -> dict[str, np.ndarray]:
    """Gradients of ``loss_fn(logits_tensor)`` with respect to every parameter.

    Requires a forward pass run with ``record=True``; the tape is consumed.
    """
    if result.tape is None:
        raise RuntimeError("backward called without a recorded forward pass")
    P, logits = result.tape["params"], result.tape["logits"]
    result.tape = None
    loss = loss_fn(logits)
    grads = torch.autograd.grad(loss, list(P.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(P.items(), grads):
        out[name] = np.zeros(tuple(p.shape)) if g is None else g.detach().numpy().copy()
    return out


def zero_gradients(model: Model) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def grid_rotations(config: ModelConfig) -> list[np.ndarray]:
    """Rotations that permute every grid a pointwise operation touches."""
    bws = [config.s2_bandwidth_in, config.s2_bandwidth_out]
    if config.so3_bandwidth_out > 1:
        bws.append(config.so3_bandwidth_out)
    return sp.grid_rotations(math.gcd(*bws))


# -- checkpoints --------------------------------------------------------------------------


def _pack(arrays: dict) -> dict:
    return {k: {"shape": list(v.shape), "values": [float(x) for x in np.asarray(v).ravel()]} for k, v in arrays.items()}


def _unpack(blob: dict) -> dict:
    return {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in blob.items()}


def checkpoint_dict(model: Model) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "parameters": _pack(model.params),
        "running_stats": _pack(model.running),
    }


def save_checkpoint(model: Model, path) -> None:
    # json writes floats with the shortest round-tripping repr (<= 17 digits)
    Path(path).write_text(json.dumps(checkpoint_dict(model), indent=1))


def load_checkpoint(path) -> Model:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    config = ModelConfig.from_dict(doc["model_config"])
    params = _unpack(doc["parameters"])
    expected = parameter_shapes(config)
    if set(params) != set(expected) or any(params[k].shape != tuple(expected[k]) for k in expected):
        raise ValueError("checkpoint parameters do not match the model config")
    return Model(config, params, _unpack(doc["running_stats"]))
