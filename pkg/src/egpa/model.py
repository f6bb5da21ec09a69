"""Attention-based graph convolutional network in numpy with hand-derived gradients.

Per frame, a two-layer MLP embeds each joint; the sigmoid of the scaled
embedding similarity is the attention mask, which reweights the self-loop
augmented adjacency before symmetric normalization. Spatial graph
convolutions alternate with per-joint temporal convolutions, features are
mean-pooled over frames and joints, and linear heads produce the outputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ValidationError
from .skeleton import ERROR_TYPES, AssessmentLabels, symmetric_normalize

HEADS = ("exercise_class", "error_detect", "error_type", "quality_score")


@dataclass(frozen=True)
class ModelConfig:
    in_features: int = 3
    layer_channels: tuple = (64, 128, 256, 512)
    temporal_kernel: int = 9
    attention_hidden: int = 128
    attention_embed: int = 16
    heads: tuple = HEADS
    n_exercises: int = 4
    n_error_types: int = len(ERROR_TYPES)
    score_range: tuple = (0.0, 10.0)
    head_weights: tuple = (("exercise_class", 1.0), ("error_detect", 1.0),
                           ("error_type", 1.0), ("quality_score", 1.0))
    use_attention: bool = True
    use_temporal: bool = True
    # Learnable per-joint scale and shift on the inputs (the affine part of an
    # input batch norm); ties the parameter shapes to ``n_joints``.
    joint_affine: bool = False
    n_joints: int = 0
    # Subtract this joint's time-averaged position from every position
    # channel, removing where the subject stood relative to the camera.
    center_joint: Optional[int] = None
    # Joint pairs whose mean length (over time and pairs) divides the position
    # channels, making the input independent of body size.
    scale_bones: tuple = ()
    # Fit the standardization buffers per joint instead of pooled over joints.
    per_joint_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_channels", tuple(int(c) for c in self.layer_channels))
        object.__setattr__(self, "heads", tuple(self.heads))
        hw = dict(self.head_weights)
        object.__setattr__(self, "head_weights", tuple(sorted(hw.items())))
        object.__setattr__(self, "score_range", tuple(float(x) for x in self.score_range))
        if not self.layer_channels or min(self.layer_channels) < 1:
            raise ValidationError("layer_channels must be a non-empty list of positive integers")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValidationError(f"temporal_kernel must be odd and positive, got {self.temporal_kernel}")
        if self.attention_hidden < 1 or self.attention_embed < 1 or self.in_features < 1:
            raise ValidationError("attention sizes and in_features must be positive")
        object.__setattr__(self, "scale_bones", tuple((int(i), int(j)) for i, j in self.scale_bones))
        if self.center_joint is not None and self.center_joint < 0:
            raise ValidationError("center_joint must be a joint index")
        if self.joint_affine and self.n_joints < 1:
            raise ValidationError("joint_affine needs n_joints")
        bad = set(self.heads) - set(HEADS)
        if bad or not self.heads:
            raise ValidationError(f"heads must be a non-empty subset of {HEADS}")

    def weight(self, head: str) -> float:
        return dict(self.head_weights).get(head, 1.0)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        """Small configuration for tests and the synthetic benchmark."""
        base = dict(layer_channels=(8, 16), temporal_kernel=9, attention_hidden=16, attention_embed=8)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["layer_channels"] = list(self.layer_channels)
        d["heads"] = list(self.heads)
        d["score_range"] = list(self.score_range)
        d["head_weights"] = dict(self.head_weights)
        d["scale_bones"] = [list(b) for b in self.scale_bones]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown model config keys {sorted(unknown)}")
        d = dict(d)
        if "head_weights" in d and isinstance(d["head_weights"], dict):
            d["head_weights"] = tuple(d["head_weights"].items())
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict:
    F, h, d, k = config.in_features, config.attention_hidden, config.attention_embed, config.temporal_kernel
    shapes = {"att.W1": (F, h), "att.b1": (h,), "att.W2": (h, d), "att.b2": (d,)}
    if config.joint_affine:
        shapes["in.scale"] = (config.n_joints, F)
        shapes["in.shift"] = (config.n_joints, F)
    c_in = F
    for l, c in enumerate(config.layer_channels):
        shapes[f"gcn{l}.W"] = (c_in, c)
        shapes[f"tcn{l}.K"] = (k, c, c)
        shapes[f"tcn{l}.b"] = (c,)
        c_in = c
    if "exercise_class" in config.heads:
        shapes["head.exercise.W"] = (c_in, config.n_exercises)
        shapes["head.exercise.b"] = (config.n_exercises,)
    if "error_detect" in config.heads:
        shapes["head.error.W"] = (c_in, 1)
        shapes["head.error.b"] = (1,)
    if "error_type" in config.heads:
        shapes["head.type.W"] = (c_in, config.n_error_types)
        shapes["head.type.b"] = (config.n_error_types,)
    if "quality_score" in config.heads:
        shapes["head.quality.W"] = (c_in, 1)
        shapes["head.quality.b"] = (1,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict:
    """Glorot-uniform weights, zero biases; the quality bias starts mid-range."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        elif len(shape) == 3:
            k, ci, co = shape
            lim = math.sqrt(6.0 / (k * ci + k * co))
            params[name] = rng.uniform(-lim, lim, size=shape)
        else:
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-lim, lim, size=shape)
    if "in.scale" in params:
        params["in.scale"][:] = 1.0
        params["in.shift"][:] = 0.0
    if "head.quality.b" in params:
        params["head.quality.b"][:] = 0.5 * sum(config.score_range)
    return params


INPUT_MEAN, INPUT_STD = "input.mean", "input.std"


def is_buffer(name: str) -> bool:
    """Fixed tensors carried in the parameter dict but never trained."""
    return name.startswith("input.")


def fit_input_normalization(sequences, config: ModelConfig, per_joint: Optional[bool] = None,
                            min_std: float = 0.02) -> dict:
    """Feature mean and standard deviation over all frames of ``sequences``.

    Statistics are pooled over joints unless ``per_joint`` (default taken from
    the config) asks for every joint to be standardized separately.
    """
    if per_joint is None:
        per_joint = config.per_joint_norm
    X = np.concatenate([_features(s, config) for s in sequences], axis=0)
    axes = 0 if per_joint else (0, 1)
    mean = np.broadcast_to(X.mean(axis=axes), X.shape[1:]).copy()
    std = np.broadcast_to(np.maximum(X.std(axis=axes), min_std), X.shape[1:]).copy()
    return {INPUT_MEAN: mean, INPUT_STD: std}


def check_params(params: dict, config: ModelConfig) -> None:
    shapes = param_shapes(config)
    learnable = {k for k in params if not is_buffer(k)}
    if learnable != set(shapes):
        raise ValidationError(f"parameter names differ from config: {sorted(learnable ^ set(shapes))}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValidationError(f"{name}: shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise ValidationError(f"{name}: non-finite entries")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# Closest float64 values inside (0, 1); a saturated sigmoid would otherwise round onto the ends.
_MASK_LO, _MASK_HI = np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)


def _mask(S):
    return np.clip(sigmoid(S), _MASK_LO, _MASK_HI)


def attention_mask(X_t: np.ndarray, params: dict) -> np.ndarray:
    """Mask ``sigmoid(E E^T / sqrt(d))`` with ``E = relu(X W1 + b1) W2 + b2``.

    Works on a single frame ``(N, F)`` or stacked frames ``(T, N, F)``.
    """
    W1 = params["att.W1"]
    if X_t.shape[-1] != W1.shape[0]:
        raise ValidationError(f"features have {X_t.shape[-1]} columns, attention expects {W1.shape[0]}")
    E = np.maximum(X_t @ W1 + params["att.b1"], 0.0) @ params["att.W2"] + params["att.b2"]
    d = E.shape[-1]
    return _mask(E @ np.swapaxes(E, -1, -2) / math.sqrt(d))


def apply_attention(A: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Normalized masked adjacency D^-1/2 ((A+I) * M) D^-1/2, degrees taken from the masked matrix."""
    A = np.asarray(A, dtype=np.float64)
    if A.shape[-2:] != M.shape[-2:]:
        raise ValidationError(f"adjacency {A.shape} and mask {M.shape} differ in shape")
    return symmetric_normalize((A + np.eye(A.shape[-1])) * M)


def gcn_layer(H: np.ndarray, A_norm: np.ndarray, W: np.ndarray) -> np.ndarray:
    """relu(A_norm H W); H may carry a leading frame axis."""
    if H.shape[-1] != W.shape[0] or A_norm.shape[-1] != H.shape[-2]:
        raise ValidationError("gcn_layer shape mismatch")
    return np.maximum(A_norm @ H @ W, 0.0)


def temporal_conv(H_seq: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-joint 'same' convolution over frames with zero padding.

    ``H_seq`` is ``(T, N, C)``, ``kernel`` is ``(k, C, C')`` with odd ``k``;
    output frame t mixes input frames ``t - k//2 .. t + k//2``.
    """
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ValidationError(f"temporal kernel size must be odd, got {k}")
    if H_seq.shape[-1] != kernel.shape[1]:
        raise ValidationError("temporal_conv channel mismatch")
    T = H_seq.shape[0]
    r = k // 2
    padded = np.pad(H_seq, ((r, r), (0, 0), (0, 0)))
    out = np.zeros(H_seq.shape[:2] + (kernel.shape[2],))
    for j in range(k):
        out += padded[j:j + T] @ kernel[j]
    if bias is not None:
        out += bias
    return out


@dataclass
class AttentionRecord:
    """Stacked per-frame masks ``(T, N, N)`` and masked adjacencies ``(A+I) * M``."""

    mask: np.ndarray
    masked_adjacency: np.ndarray

    def frame(self, t: int):
        return self.mask[t], self.masked_adjacency[t]


@dataclass
class HeadOutputs:
    exercise_logits: Optional[np.ndarray] = None
    error_logit: Optional[float] = None
    error_type_logits: Optional[np.ndarray] = None
    quality_score: Optional[float] = None

    def predicted_error(self) -> bool:
        return self.error_logit is not None and self.error_logit > 0


def _features(seq_or_x, config):
    X = seq_or_x.features() if hasattr(seq_or_x, "features") else np.asarray(seq_or_x, dtype=np.float64)
    if X.ndim != 3 or X.shape[-1] != config.in_features:
        raise ValidationError(f"features must be (T, N, {config.in_features}), got {X.shape}")
    if config.center_joint is not None:
        if config.center_joint >= X.shape[1]:
            raise ValidationError(f"center_joint {config.center_joint} out of range for {X.shape[1]} joints")
        X = np.array(X)
        X[..., :3] -= X[:, config.center_joint, :3].mean(axis=0)
    if config.scale_bones:
        idx = np.array(config.scale_bones)
        if idx.max() >= X.shape[1]:
            raise ValidationError(f"scale_bones reference joints beyond {X.shape[1]}")
        length = np.linalg.norm(X[:, idx[:, 0], :3] - X[:, idx[:, 1], :3], axis=-1).mean()
        if not length > 0:
            raise ValidationError("reference bones have zero length")
        X = np.array(X)
        X[..., :3] /= length
    return X


def forward(seq, A: np.ndarray, params: dict, config: ModelConfig, keep_cache: bool = False):
    """Run the network on one sequence (or a ``(T, N, F)`` feature array).

    Returns ``(HeadOutputs, AttentionRecord)``, plus the activation cache when
    ``keep_cache`` is set.
    """
    X = _features(seq, config)
    T, N, _ = X.shape
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (N, N):
        raise ValidationError(f"adjacency {A.shape} does not match {N} joints")
    if INPUT_MEAN in params:
        X = (X - params[INPUT_MEAN]) / params[INPUT_STD]
    X_in = X
    if config.joint_affine:
        X = X * params["in.scale"] + params["in.shift"]
    A_self = A + np.eye(N)
    cache = {"X": X, "X_in": X_in, "A_self": A_self}

    if config.use_attention:
        Z1 = X @ params["att.W1"] + params["att.b1"]
        R1 = np.maximum(Z1, 0.0)
        E = R1 @ params["att.W2"] + params["att.b2"]
        S = E @ np.swapaxes(E, -1, -2) / math.sqrt(E.shape[-1])
        M = _mask(S)
        cache.update(Z1=Z1, R1=R1, E=E, M=M)
    else:
        M = np.ones((T, N, N))
    Ap = A_self * M
    dinv = 1.0 / np.sqrt(Ap.sum(axis=-1))
    Ahat = dinv[..., :, None] * Ap * dinv[..., None, :]
    cache.update(Ap=Ap, dinv=dinv, Ahat=Ahat)

    H = X
    layers = []
    r = config.temporal_kernel // 2
    for l in range(len(config.layer_channels)):
        P = Ahat @ H
        Q = P @ params[f"gcn{l}.W"]
        G = np.maximum(Q, 0.0)
        if config.use_temporal:
            Y = temporal_conv(G, params[f"tcn{l}.K"], params[f"tcn{l}.b"])
            H_next = np.maximum(Y, 0.0)
        else:
            Y = None
            H_next = G
        layers.append({"H": H, "P": P, "Q": Q, "G": G, "Y": Y})
        H = H_next
    pooled = H.mean(axis=(0, 1))
    cache.update(layers=layers, H_last=H, pooled=pooled, r=r)

    out = HeadOutputs()
    if "exercise_class" in config.heads:
        out.exercise_logits = pooled @ params["head.exercise.W"] + params["head.exercise.b"]
    if "error_detect" in config.heads:
        out.error_logit = float((pooled @ params["head.error.W"] + params["head.error.b"])[0])
    if "error_type" in config.heads:
        out.error_type_logits = pooled @ params["head.type.W"] + params["head.type.b"]
    if "quality_score" in config.heads:
        out.quality_score = float((pooled @ params["head.quality.W"] + params["head.quality.b"])[0])
    record = AttentionRecord(M, Ap)
    if keep_cache:
        return out, record, cache
    return out, record


def _log_softmax(z):
    z = z - z.max()
    return z - math.log(np.exp(z).sum())


def _softplus(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def loss_and_output_grads(outputs: HeadOutputs, labels: AssessmentLabels, config: ModelConfig):
    """Weighted sum of per-head losses and its gradient with respect to each head output."""
    total = 0.0
    grads = {}
    if "exercise_class" in config.heads:
        z = outputs.exercise_logits
        y = labels.exercise_class
        if y is None or not 0 <= y < len(z):
            raise ValidationError(f"exercise class {y} outside [0, {len(z)})")
        w = config.weight("exercise_class")
        ls = _log_softmax(z)
        total += -w * ls[y]
        g = np.exp(ls)
        g[y] -= 1.0
        grads["exercise_logits"] = w * g
    if "error_detect" in config.heads:
        if labels.has_error is None:
            raise ValidationError("error_detect head needs has_error label")
        z, y = outputs.error_logit, float(labels.has_error)
        w = config.weight("error_detect")
        total += w * (_softplus(z) - y * z)
        grads["error_logit"] = w * (float(sigmoid(z)) - y)
    if "error_type" in config.heads:
        z = outputs.error_type_logits
        y = labels.error_type_index
        w = config.weight("error_type")
        ls = _log_softmax(z)
        total += -w * ls[y]
        g = np.exp(ls)
        g[y] -= 1.0
        grads["error_type_logits"] = w * g
    if "quality_score" in config.heads:
        if labels.quality_score is None:
            raise ValidationError("quality head needs a quality score label")
        w = config.weight("quality_score")
        diff = outputs.quality_score - labels.quality_score
        total += w * diff * diff
        grads["quality_score"] = w * 2.0 * diff
    return float(total), grads


def loss(outputs: HeadOutputs, labels: AssessmentLabels, config: ModelConfig) -> float:
    return loss_and_output_grads(outputs, labels, config)[0]


def backward(cache: dict, out_grads: dict, params: dict, config: ModelConfig) -> dict:
    """Reverse pass from head-output gradients to every parameter."""
    grads = {name: np.zeros_like(v) for name, v in params.items() if not is_buffer(name)}
    pooled = cache["pooled"]
    d_pooled = np.zeros_like(pooled)
    for key, wname, bname in (("exercise_logits", "head.exercise.W", "head.exercise.b"),
                              ("error_type_logits", "head.type.W", "head.type.b")):
        if key in out_grads:
            g = out_grads[key]
            grads[wname] = np.outer(pooled, g)
            grads[bname] = np.array(g, dtype=float)
            d_pooled += params[wname] @ g
    for key, wname, bname in (("error_logit", "head.error.W", "head.error.b"),
                              ("quality_score", "head.quality.W", "head.quality.b")):
        if key in out_grads:
            g = out_grads[key]
            grads[wname] = pooled[:, None] * g
            grads[bname] = np.array([g])
            d_pooled += params[wname][:, 0] * g

    H_last = cache["H_last"]
    T, N = H_last.shape[:2]
    dH = np.broadcast_to(d_pooled / (T * N), H_last.shape).copy()
    Ahat = cache["Ahat"]
    dAhat = np.zeros_like(Ahat)
    r = cache["r"]
    for l in reversed(range(len(config.layer_channels))):
        st = cache["layers"][l]
        if config.use_temporal:
            dY = dH * (st["Y"] > 0)
            K = params[f"tcn{l}.K"]
            grads[f"tcn{l}.b"] = dY.sum(axis=(0, 1))
            Gpad = np.pad(st["G"], ((r, r), (0, 0), (0, 0)))
            dGpad = np.zeros_like(Gpad)
            dK = np.zeros_like(K)
            for j in range(K.shape[0]):
                dK[j] = np.einsum("tnc,tnd->cd", Gpad[j:j + T], dY)
                dGpad[j:j + T] += dY @ K[j].T
            grads[f"tcn{l}.K"] = dK
            dG = dGpad[r:r + T]
        else:
            dG = dH
        dQ = dG * (st["Q"] > 0)
        W = params[f"gcn{l}.W"]
        grads[f"gcn{l}.W"] = np.einsum("tnc,tnd->cd", st["P"], dQ)
        dP = dQ @ W.T
        dAhat += dP @ np.swapaxes(st["H"], -1, -2)
        dH = np.swapaxes(Ahat, -1, -2) @ dP

    dX = dH
    if not config.use_attention:
        return _input_grads(grads, dX, cache, config)

    # Ahat = dinv_i * Ap_ij * dinv_j with dinv = deg^-1/2, deg = rowsum(Ap).
    Ap, dinv = cache["Ap"], cache["dinv"]
    GA = dAhat * Ahat
    d_dinv = (GA.sum(axis=-1) + GA.sum(axis=-2)) / dinv
    d_deg = d_dinv * (-0.5) * dinv ** 3
    dAp = dAhat * dinv[..., :, None] * dinv[..., None, :] + d_deg[..., :, None]
    M = cache["M"]
    dS = dAp * cache["A_self"] * M * (1.0 - M)
    E = cache["E"]
    dE = (dS + np.swapaxes(dS, -1, -2)) @ E / math.sqrt(E.shape[-1])
    grads["att.b2"] = dE.sum(axis=(0, 1))
    grads["att.W2"] = np.einsum("tnh,tnd->hd", cache["R1"], dE)
    dZ1 = (dE @ params["att.W2"].T) * (cache["Z1"] > 0)
    grads["att.b1"] = dZ1.sum(axis=(0, 1))
    grads["att.W1"] = np.einsum("tnf,tnh->fh", cache["X"], dZ1)
    if config.joint_affine:
        dX = dX + dZ1 @ params["att.W1"].T
    return _input_grads(grads, dX, cache, config)


def _input_grads(grads, dX, cache, config):
    if config.joint_affine:
        grads["in.scale"] = (dX * cache["X_in"]).sum(axis=0)
        grads["in.shift"] = dX.sum(axis=0)
    return grads


def gradients(seq, labels: AssessmentLabels, params: dict, config: ModelConfig, A: np.ndarray):
    """Loss and exact parameter gradients for one labelled sequence."""
    out, _, cache = forward(seq, A, params, config, keep_cache=True)
    value, og = loss_and_output_grads(out, labels, config)
    return value, backward(cache, og, params, config)


# Checkpoint container: magic, version, tensor count, then per tensor
# name length (u16), utf-8 name, ndim (u8), dims (u64 each), little-endian f64 data.
CKPT_MAGIC = b"EGPACKPT"
CKPT_VERSION = 1


def save_params(params: dict, path) -> None:
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_params(path) -> dict:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(data):
        raise ValidationError(f"{path}: trailing bytes in checkpoint")
    return params
