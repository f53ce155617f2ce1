"""The recurrent-convolutional odometry network.

Six 1D convolutions (kernel 3, "same" padding, ReLU after each) with
average pools after the second and fourth, two linear pretraining heads
(translation regression, 112-way rotation classification), and a two-layer
LSTM whose top hidden state is mapped to ``(delta_d, delta_theta)``.

With a 2 x 3601 input the feature map lengths are::

    3601 -conv1-> 3601 -conv2-> 1801 -pool-> 900 -conv3-> 900 -conv4-> 450
         -pool-> 225 -conv5-> 225 -conv6-> 113      (x 128 channels = 14464)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .kitti import DEFAULT_ANGLE_SPEC, AngleClassSpec, class_midpoints


class ConfigError(ValueError):
    pass


class StateError(ValueError):
    pass


# (kernel, stride, channels) per layer, straight from the layer table
TABLE1_LAYERS = ((3, 1, 32), (3, 2, 32), (3, 1, 64), (3, 2, 64), (3, 1, 128), (3, 2, 128))
TABLE1_SHAPE_CHAIN = (3601, 3601, 1801, 900, 900, 450, 225, 225, 113)


@dataclass(frozen=True)
class CnnConfig:
    input_length: int = 3601
    in_channels: int = 2
    layers: tuple[tuple[int, int, int], ...] = TABLE1_LAYERS
    pool_after: tuple[int, ...] = (2, 4)  # 1-based conv indices followed by a pool
    pool_kernel: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(int(v) for v in l) for l in self.layers))
        object.__setattr__(self, "pool_after", tuple(int(v) for v in self.pool_after))

    def shape_chain(self) -> tuple[int, ...]:
        """Signal length after the input and after every conv / pool, in order."""
        length = self.input_length
        chain = [length]
        for idx, (k, s, _) in enumerate(self.layers, start=1):
            length = nn.conv_output_length(length, k, s)
            chain.append(length)
            if idx in self.pool_after:
                length //= self.pool_kernel
                chain.append(length)
        return tuple(chain)

    @property
    def feature_length(self) -> int:
        return self.layers[-1][2] * self.shape_chain()[-1]

    def check_table1(self) -> None:
        if self != CnnConfig():
            raise ConfigError(f"CNN configuration deviates from the reference layer table: {self}")
        chain = self.shape_chain()
        if chain != TABLE1_SHAPE_CHAIN:
            raise ConfigError(f"shape chain {chain} != {TABLE1_SHAPE_CHAIN}")
        if self.feature_length != 14464:
            raise ConfigError(f"feature length {self.feature_length} != 14464")


@dataclass(frozen=True)
class RnnConfig:
    num_layers: int = 2
    hidden_size: int = 1024
    estimate_size: int = 2

    def check_reference(self) -> None:
        if self.num_layers != 2 or self.hidden_size != 1024:
            raise ConfigError("recurrent part must be two LSTM layers of 1024 units")


@dataclass(frozen=True)
class ModelConfig:
    cnn: CnnConfig = field(default_factory=CnnConfig)
    rnn: RnnConfig = field(default_factory=RnnConfig)
    angle_spec: AngleClassSpec = DEFAULT_ANGLE_SPEC
    max_range: float = 80.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        """Inverse of ``to_dict``; missing keys keep their defaults."""
        cnn = dict(d.get("cnn", {}))
        if "layers" in cnn:
            cnn["layers"] = tuple(tuple(l) for l in cnn["layers"])
        if "pool_after" in cnn:
            cnn["pool_after"] = tuple(cnn["pool_after"])
        return cls(CnnConfig(**cnn), RnnConfig(**d.get("rnn", {})), AngleClassSpec(**d.get("angle_spec", {})),
                   d.get("max_range", cls.max_range))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def check_reference(self) -> None:
        self.cnn.check_table1()
        self.rnn.check_reference()
        if self.angle_spec.count != 112:
            raise ConfigError("rotation classifier must have 112 classes")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = cfg.cnn.in_channels
    for idx, (k, _, cout) in enumerate(cfg.cnn.layers, start=1):
        shapes[f"conv{idx}.weight"] = (cout, cin, k)
        shapes[f"conv{idx}.bias"] = (cout,)
        cin = cout
    feat = cfg.cnn.feature_length
    n_cls = cfg.angle_spec.count
    shapes["trans_head.weight"] = (1, feat)
    shapes["trans_head.bias"] = (1,)
    shapes["rot_head.weight"] = (n_cls, feat)
    shapes["rot_head.bias"] = (n_cls,)
    hid = cfg.rnn.hidden_size
    inp = feat + cfg.rnn.estimate_size
    for layer in range(1, cfg.rnn.num_layers + 1):
        shapes[f"lstm{layer}.w_ih"] = (4 * hid, inp)
        shapes[f"lstm{layer}.w_hh"] = (4 * hid, hid)
        shapes[f"lstm{layer}.bias"] = (4 * hid,)
        inp = hid
    shapes["out_head.weight"] = (2, hid)
    shapes["out_head.bias"] = (2,)
    return shapes


CNN_PARAMS = ("conv",)
HEAD_PARAMS = ("trans_head", "rot_head")
RNN_PARAMS = ("lstm", "out_head")


def param_group(name: str) -> str:
    if name.startswith("conv"):
        return "cnn"
    if name.startswith(HEAD_PARAMS):
        return "heads"
    return "rnn"


class ModelParams(dict):
    """Named parameter tensors plus the configuration they were built for."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        super().__init__(tensors)
        self.config = config
        expected = param_shapes(config)
        if set(expected) != set(tensors):
            raise ConfigError(f"parameter names do not match config: {sorted(set(expected) ^ set(tensors))}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ConfigError(f"{name}: shape {tensors[name].shape} != {shape}")

    @property
    def dtype(self):
        return next(iter(self.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())


def init_params(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32,
                strict: bool = True) -> ModelParams:
    """Uniform fan-in initialisation; LSTM forget-gate biases start at +1.

    Convolutions feeding a ReLU use the He bound ``sqrt(6 / fan_in)``; every
    other matrix uses ``1 / sqrt(fan_in)``.  Biases are zero.
    """
    if strict:
        cfg.check_reference()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("bias"):
            t = np.zeros(shape)
            if name.startswith("lstm"):
                hid = shape[0] // 4
                t[hid : 2 * hid] = 1.0
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in) if name.startswith("conv") else 1.0 / np.sqrt(fan_in)
            t = rng.uniform(-bound, bound, size=shape)
        tensors[name] = t.astype(dtype)
    return ModelParams(cfg, tensors)


# -- forward / backward ---------------------------------------------------------------


def cnn_forward_cached(x: np.ndarray, params: ModelParams):
    cfg = params.config.cnn
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (cfg.in_channels, cfg.input_length):
        raise ConfigError(f"input shape {x.shape[1:]} != {(cfg.in_channels, cfg.input_length)}")
    x = x.astype(params.dtype, copy=False)
    caches = []
    for idx, (_, stride, _) in enumerate(cfg.layers, start=1):
        x, c_conv = nn.conv1d_forward(x, params[f"conv{idx}.weight"], params[f"conv{idx}.bias"], stride)
        x, c_relu = nn.relu_forward(x)
        c_pool = None
        if idx in cfg.pool_after:
            x, c_pool = nn.avgpool1d_forward(x, cfg.pool_kernel)
        caches.append((c_conv, c_relu, c_pool))
    return x.reshape(x.shape[0], -1), (caches, x.shape)


def cnn_backward(dfeat: np.ndarray, cache, params: ModelParams, grads: dict) -> np.ndarray:
    caches, shape = cache
    dx = dfeat.reshape(shape)
    for idx in range(len(caches), 0, -1):
        c_conv, c_relu, c_pool = caches[idx - 1]
        if c_pool is not None:
            dx = nn.avgpool1d_backward(dx, c_pool)
        dx = nn.relu_backward(dx, c_relu)
        dx, dw, db = nn.conv1d_backward(dx, c_conv)
        _accumulate(grads, f"conv{idx}.weight", dw)
        _accumulate(grads, f"conv{idx}.bias", db)
    return dx


def cnn_forward(pair, params: ModelParams) -> np.ndarray:
    """Feature vector(s) for one ``ScanPairTensor`` / (2, L) array or a (B, 2, L) batch."""
    data = getattr(pair, "data", pair)
    feats, _ = cnn_forward_cached(np.asarray(data), params)
    return feats[0] if np.ndim(data) == 2 else feats


def pretrain_forward_cached(feats: np.ndarray, params: ModelParams):
    d_hat, c_t = nn.affine_forward(feats, params["trans_head.weight"], params["trans_head.bias"])
    logits, c_r = nn.affine_forward(feats, params["rot_head.weight"], params["rot_head.bias"])
    return d_hat[:, 0], logits, (c_t, c_r)


def pretrain_backward(dd_hat, dlogits, cache, grads: dict, update_heads: bool = True) -> np.ndarray:
    c_t, c_r = cache
    dx_t, dw_t, db_t = nn.affine_backward(dd_hat[:, None], c_t)
    dx_r, dw_r, db_r = nn.affine_backward(dlogits, c_r)
    if update_heads:
        _accumulate(grads, "trans_head.weight", dw_t)
        _accumulate(grads, "trans_head.bias", db_t)
        _accumulate(grads, "rot_head.weight", dw_r)
        _accumulate(grads, "rot_head.bias", db_r)
    return dx_t + dx_r


def pretrain_forward(feats: np.ndarray, params: ModelParams):
    """``(delta_d_hat, rot_logits)`` for one feature vector or a (B, F) batch."""
    single = feats.ndim == 1
    d_hat, logits, _ = pretrain_forward_cached(np.atleast_2d(feats), params)
    return (float(d_hat[0]), logits[0]) if single else (d_hat, logits)


def pretrain_estimate(d_hat: np.ndarray, logits: np.ndarray, angle_spec: AngleClassSpec) -> np.ndarray:
    """(B, 2) estimate fed to the LSTM: translation and the argmax class midpoint (rad)."""
    mids = class_midpoints(angle_spec)
    return np.column_stack([d_hat, mids[np.argmax(logits, axis=1)]]).astype(logits.dtype)


@dataclass
class LstmState:
    """Per-layer ``(hidden, cell)`` arrays of shape (B, H)."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def zeros(cls, cfg: RnnConfig, batch: int = 1, dtype=np.float32) -> "LstmState":
        z = lambda: np.zeros((batch, cfg.hidden_size), dtype=dtype)
        return cls([(z(), z()) for _ in range(cfg.num_layers)])

    def check(self, cfg: RnnConfig) -> None:
        if len(self.layers) != cfg.num_layers:
            raise StateError(f"state has {len(self.layers)} layers, model has {cfg.num_layers}")
        for h, c in self.layers:
            if h.shape[-1] != cfg.hidden_size or c.shape[-1] != cfg.hidden_size:
                raise StateError(f"state hidden size {h.shape[-1]} != {cfg.hidden_size}")


def rcnn_step(features: np.ndarray, estimate: np.ndarray, state: LstmState, params: ModelParams):
    """One recurrent step; returns ``(output (B, 2), new_state)``."""
    cfg = params.config.rnn
    state.check(cfg)
    x = np.concatenate([np.atleast_2d(features), np.atleast_2d(estimate)], axis=1).astype(params.dtype, copy=False)
    new_layers = []
    for layer, (h, c) in enumerate(state.layers, start=1):
        h, c, _ = nn.lstm_cell_forward(x, h, c, params[f"lstm{layer}.w_ih"], params[f"lstm{layer}.w_hh"],
                                       params[f"lstm{layer}.bias"])
        new_layers.append((h, c))
        x = h
    out, _ = nn.affine_forward(x, params["out_head.weight"], params["out_head.bias"])
    return out, LstmState(new_layers)


def rnn_window_forward(xs: np.ndarray, params: ModelParams, state: LstmState | None = None):
    """Both LSTM layers plus the output head over a window. xs: (T, B, F + 2) -> (T, B, 2)."""
    cfg = params.config.rnn
    t_len, bsz, _ = xs.shape
    state = state or LstmState.zeros(cfg, bsz, params.dtype)
    state.check(cfg)
    caches, final = [], []
    h_seq = xs
    for layer, (h0, c0) in enumerate(state.layers, start=1):
        h_seq, last, cache = nn.lstm_layer_forward(h_seq, h0, c0, params[f"lstm{layer}.w_ih"],
                                                   params[f"lstm{layer}.w_hh"], params[f"lstm{layer}.bias"])
        caches.append(cache)
        final.append(last)
    flat = h_seq.reshape(t_len * bsz, -1)
    out, c_head = nn.affine_forward(flat, params["out_head.weight"], params["out_head.bias"])
    return out.reshape(t_len, bsz, 2), LstmState(final), (caches, c_head, h_seq.shape)


def rnn_window_backward(dout: np.ndarray, cache, grads: dict) -> np.ndarray:
    caches, c_head, hshape = cache
    t_len, bsz, _ = hshape
    dflat, dw, db = nn.affine_backward(dout.reshape(t_len * bsz, 2), c_head)
    _accumulate(grads, "out_head.weight", dw)
    _accumulate(grads, "out_head.bias", db)
    dh = dflat.reshape(hshape)
    for layer in range(len(caches), 0, -1):
        dh, dw_ih, dw_hh, db, _, _ = nn.lstm_layer_backward(dh, caches[layer - 1])
        _accumulate(grads, f"lstm{layer}.w_ih", dw_ih)
        _accumulate(grads, f"lstm{layer}.w_hh", dw_hh)
        _accumulate(grads, f"lstm{layer}.bias", db)
    return dh


def _accumulate(grads: dict, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


# -- checkpoints ----------------------------------------------------------------------------
#
# layout: b"LODM" | u32 version | u32 header length | header JSON (utf-8, sorted keys)
#         | u32 tensor count | per tensor: u16 name length, name, u8 ndim, u64 dims..., f64 LE data

MAGIC = b"LODM"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    params: ModelParams
    meta: dict = field(default_factory=dict)
    extra: dict[str, np.ndarray] = field(default_factory=dict)  # e.g. optimizer moments

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    @property
    def digest(self) -> str:
        return self.config.digest()

    def to_bytes(self) -> bytes:
        header = {
            "format_version": FORMAT_VERSION,
            "config_digest": self.digest,
            "config": self.config.to_dict(),
            "meta": self.meta,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
        tensors = list(self.params.items()) + sorted(self.extra.items())
        out.append(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            nb = name.encode()
            out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes, dtype=np.float32, expect_digest: str | None = None) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file")
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(data[pos : pos + hlen])
        pos += hlen
        cfg = ModelConfig.from_dict(header["config"])
        if cfg.digest() != header["config_digest"]:
            raise CheckpointError("config digest does not match the stored configuration")
        if expect_digest is not None and expect_digest != header["config_digest"]:
            raise CheckpointError(f"checkpoint config {header['config_digest']} != expected {expect_digest}")
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        names = set(param_shapes(cfg))
        params, extra = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            if name in names:
                params[name] = arr.astype(dtype)
            else:
                extra[name] = arr.astype(dtype)
        return cls(ModelParams(cfg, params), header["meta"], extra)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path, dtype=np.float32, expect_digest: str | None = None) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes(), dtype, expect_digest)
