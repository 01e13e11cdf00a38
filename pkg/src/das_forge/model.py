"""Two-branch, two-stage classifier.

Each image of a pair goes through its own convolutional extractor; the
flattened maps are batch-normalised, cut into row bands and stacked side by
side into a sequence (one step per band, i.e. per slice of slow time), then
read by two bidirectional LSTMs and a softmax head.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nncore as nn
from .fileio import FormatError, atomic_write_bytes
from .sim import N_CLASSES

BRANCHES = ("amp", "phase")
VARIANTS = ("vgg_s", "plain_s", "depthwise_s")
WGT_MAGIC = b"WGT1"


class ModelError(ValueError):
    pass


@dataclass
class FeatureExtractorSpec:
    variant: str = "vgg_s"
    input_height: int = 64
    input_width: int = 64
    channels: tuple = (8, 16, 16)
    # convolutions per block; None picks the variant's default
    convs_per_block: Optional[tuple] = None

    def blocks(self) -> list[tuple[int, int]]:
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown extractor variant {self.variant!r}; choose from {VARIANTS}")
        if not self.channels:
            raise ModelError("extractor needs at least one block")
        if self.convs_per_block is not None:
            depth = tuple(self.convs_per_block)
        elif self.variant == "vgg_s":
            depth = (1,) + (2,) * (len(self.channels) - 1)
        else:
            depth = (1,) * len(self.channels)
        if len(depth) != len(self.channels):
            raise ModelError("convs_per_block and channels differ in length")
        return list(zip(self.channels, depth))

    def output_shape(self) -> tuple[int, int, int]:
        h, w = self.input_height, self.input_width
        for _ in self.blocks():
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ModelError(f"{len(self.channels)} pooling stages shrink {self.input_height}x{self.input_width} to nothing")
        return h, w, self.channels[-1]


@dataclass
class ModelConfig:
    extractor: FeatureExtractorSpec = field(default_factory=FeatureExtractorSpec)
    freeze_extractor: bool = False
    lstm_hidden: int = 64
    lstm_layers: int = 2
    seq_steps: Optional[int] = None
    n_classes: int = N_CLASSES
    concat_order: tuple = BRANCHES

    @property
    def steps(self) -> int:
        return self.seq_steps or self.extractor.output_shape()[0]

    def branch_features(self) -> int:
        h, w, c = self.extractor.output_shape()
        return h * w * c

    def validate(self) -> "ModelConfig":
        per_branch = self.branch_features()
        if per_branch % self.steps:
            raise ModelError(f"seq_steps {self.steps} does not divide branch feature length {per_branch}")
        if sorted(self.concat_order) != sorted(BRANCHES):
            raise ModelError(f"concat_order must be a permutation of {BRANCHES}")
        if self.lstm_layers < 1 or self.lstm_hidden < 1 or self.n_classes < 2:
            raise ModelError("need lstm_layers >= 1, lstm_hidden >= 1, n_classes >= 2")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["concat_order"] = list(self.concat_order)
        d["extractor"]["channels"] = list(self.extractor.channels)
        if self.extractor.convs_per_block is not None:
            d["extractor"]["convs_per_block"] = list(self.extractor.convs_per_block)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        ext = dict(d.pop("extractor", {}))
        if "channels" in ext:
            ext["channels"] = tuple(ext["channels"])
        if ext.get("convs_per_block") is not None:
            ext["convs_per_block"] = tuple(ext["convs_per_block"])
        if "concat_order" in d:
            d["concat_order"] = tuple(d["concat_order"])
        try:
            return cls(extractor=FeatureExtractorSpec(**ext), **d).validate()
        except TypeError as exc:
            raise ModelError(f"bad model config: {exc}") from None

    def save(self, path) -> None:
        from .fileio import write_json

        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def is_extractor_param(name: str) -> bool:
    return name.startswith("ext.")


class TwoStageClassifier:
    """Parameters live in ``self.params`` (name -> float64 array)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        self.params: dict[str, np.ndarray] = {}
        self._layers = self._layout()
        self._init_params(np.random.default_rng(np.random.SeedSequence([seed, 0x11A7])))

    # -- construction --------------------------------------------------

    def _layout(self) -> list[tuple]:
        """Per-branch op list: (kind, name, cin, cout)."""
        ops = []
        cin = 3
        kind_conv = "dw" if self.config.extractor.variant == "depthwise_s" else "conv"
        for bi, (cout, depth) in enumerate(self.config.extractor.blocks(), start=1):
            for li in range(1, depth + 1):
                name = f"block{bi}.conv{li}"
                if kind_conv == "dw" and bi > 1:
                    ops.append(("dw", name + ".dw", cin, cin))
                    ops.append(("relu", None, cin, cin))
                    ops.append(("conv1", name + ".pw", cin, cout))
                else:
                    ops.append(("conv", name, cin, cout))
                ops.append(("relu", None, cout, cout))
                cin = cout
            ops.append(("pool", None, cin, cin))
        return ops

    def _init_params(self, rng) -> None:
        p = self.params
        for br in BRANCHES:
            for kind, name, cin, cout in self._layers:
                key = f"ext.{br}.{name}"
                if kind == "conv":
                    p[key + ".W"] = rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout))
                    p[key + ".b"] = np.zeros(cout)
                elif kind == "conv1":
                    p[key + ".W"] = rng.normal(0.0, np.sqrt(2.0 / cin), (1, 1, cin, cout))
                    p[key + ".b"] = np.zeros(cout)
                elif kind == "dw":
                    p[key + ".W"] = rng.normal(0.0, np.sqrt(2.0 / 9), (3, 3, cin))
                    p[key + ".b"] = np.zeros(cin)
        n_feat = self.config.branch_features()
        for br in BRANCHES:
            p[f"bn_{br}.gamma"] = np.ones(n_feat)
            p[f"bn_{br}.beta"] = np.zeros(n_feat)
            p[f"bn_{br}.running_mean"] = np.zeros(n_feat)
            p[f"bn_{br}.running_var"] = np.ones(n_feat)
        H = self.config.lstm_hidden
        d_in = 2 * n_feat // self.config.steps
        bound = 1.0 / np.sqrt(H)
        for layer in range(1, self.config.lstm_layers + 1):
            for direction in ("fwd", "bwd"):
                key = f"lstm{layer}.{direction}"
                p[key + ".W"] = rng.uniform(-bound, bound, (d_in, 4 * H))
                p[key + ".U"] = rng.uniform(-bound, bound, (H, 4 * H))
                b = np.zeros(4 * H)
                b[H : 2 * H] = 1.0
                p[key + ".b"] = b
            d_in = 2 * H
        p["head.W"] = rng.normal(0.0, np.sqrt(2.0 / (2 * H)), (2 * H, self.config.n_classes))
        p["head.b"] = np.zeros(self.config.n_classes)

    # -- parameter bookkeeping ----------------------------------------

    def trainable_mask(self, freeze_extractor: Optional[bool] = None) -> dict[str, bool]:
        """Which tensors the optimizer may touch.  Running statistics are
        never trainable; extractor tensors only when not frozen."""
        freeze = self.config.freeze_extractor if freeze_extractor is None else freeze_extractor
        mask = {}
        for name in self.params:
            if name.endswith(("running_mean", "running_var")):
                mask[name] = False
            elif is_extractor_param(name):
                mask[name] = not freeze
            else:
                mask[name] = True
        return mask

    def set_trainable(self, freeze_extractor: bool) -> dict[str, bool]:
        self.config.freeze_extractor = freeze_extractor
        return self.trainable_mask()

    def trainable_names(self) -> list[str]:
        return [k for k, v in self.trainable_mask().items() if v]

    def extractor_names(self) -> list[str]:
        return [k for k in self.params if is_extractor_param(k)]

    # -- forward / backward -------------------------------------------

    def extract_spatial(self, images: np.ndarray, branch: str, keep_cache: bool = False):
        """Run one branch's extractor on (N, H, W, 3) images.  Returns the
        feature maps (N, Hf, Wf, Cf) and, if asked, the backward tape."""
        x = np.asarray(images, dtype=np.float64)
        ext = self.config.extractor
        if x.shape[-3:] != (ext.input_height, ext.input_width, 3):
            raise ModelError(f"image dims {x.shape[-3:]} do not match extractor input {(ext.input_height, ext.input_width, 3)}")
        p = self.params
        tape = []
        for kind, name, _, _ in self._layers:
            key = f"ext.{branch}.{name}"
            if kind == "conv":
                x, c = nn.conv2d_forward(x, p[key + ".W"], p[key + ".b"], 1, 1)
            elif kind == "conv1":
                x, c = nn.conv2d_forward(x, p[key + ".W"], p[key + ".b"], 1, 0)
            elif kind == "dw":
                x, c = nn.depthwise_conv2d_forward(x, p[key + ".W"], p[key + ".b"], 1, 1)
            elif kind == "relu":
                x, c = nn.relu_forward(x)
            else:
                x, c = nn.maxpool2d_forward(x, 2)
            if keep_cache:
                tape.append((kind, key, c))
            else:
                del c
        return (x, tape) if keep_cache else x

    def _extract_backward(self, dx, tape, grads):
        for kind, key, c in reversed(tape):
            if kind in ("conv", "conv1"):
                dx, grads[key + ".W"], grads[key + ".b"] = nn.conv2d_backward(dx, c)
            elif kind == "dw":
                dx, grads[key + ".W"], grads[key + ".b"] = nn.depthwise_conv2d_backward(dx, c)
            elif kind == "relu":
                dx = nn.relu_backward(dx, c)
            else:
                dx = nn.maxpool2d_backward(dx, c)
        return dx

    def forward(self, amp, phase, train: bool = False, need_grad: bool = False, ext_maps=None):
        """Class probabilities for a batch of image pairs.

        ``ext_maps`` may carry precomputed extractor outputs per branch (valid
        when the extractor is frozen).  Returns ``(probs, logits, state)``
        where ``state`` holds intermediate features and, when ``need_grad``,
        the backward tape.
        """
        cfg = self.config
        p = self.params
        images = {"amp": amp, "phase": phase}
        state = {"tapes": {}, "bn": {}}
        normed = {}
        for br in BRANCHES:
            if ext_maps is not None:
                maps = ext_maps[br]
            elif need_grad and not cfg.freeze_extractor:
                maps, state["tapes"][br] = self.extract_spatial(images[br], br, keep_cache=True)
            else:
                maps = self.extract_spatial(images[br], br)
            if maps.ndim == 3:
                maps = maps[None]
            n = maps.shape[0]
            state.setdefault("map_shape", maps.shape)
            flat = maps.reshape(n, -1)
            normed[br], state["bn"][br] = nn.batchnorm_forward(
                flat, p[f"bn_{br}.gamma"], p[f"bn_{br}.beta"],
                p[f"bn_{br}.running_mean"], p[f"bn_{br}.running_var"], train=train,
            )
        T = cfg.steps
        seq = np.concatenate([normed[br].reshape(n, T, -1) for br in cfg.concat_order], axis=2)
        state["stage1"] = seq.reshape(n, -1)
        h = seq
        lstm_caches = []
        for layer in range(1, cfg.lstm_layers + 1):
            fwd = tuple(p[f"lstm{layer}.fwd.{k}"] for k in "WUb")
            bwd = tuple(p[f"lstm{layer}.bwd.{k}"] for k in "WUb")
            h, c = nn.bilstm_forward(h, fwd, bwd)
            lstm_caches.append(c)
        H = cfg.lstm_hidden
        # forward direction ends at the last step, backward direction at the first
        final = np.concatenate([h[:, -1, :H], h[:, 0, H:]], axis=1)
        state["stage2"] = final
        logits, dense_cache = nn.dense_forward(final, p["head.W"], p["head.b"])
        if need_grad:
            state.update(lstm=lstm_caches, dense=dense_cache, seq_shape=h.shape)
        return nn.softmax(logits), logits, state

    def backward(self, dlogits, state) -> dict[str, np.ndarray]:
        cfg = self.config
        p = self.params
        grads: dict[str, np.ndarray] = {}
        dfinal, grads["head.W"], grads["head.b"] = nn.dense_backward(dlogits, state["dense"], p["head.W"])
        H = cfg.lstm_hidden
        dh = np.zeros(state["seq_shape"])
        dh[:, -1, :H] = dfinal[:, :H]
        dh[:, 0, H:] = dfinal[:, H:]
        for layer in range(cfg.lstm_layers, 0, -1):
            dh, gf, gb = nn.bilstm_backward(dh, state["lstm"][layer - 1])
            for direction, g in (("fwd", gf), ("bwd", gb)):
                for k, gk in zip("WUb", g):
                    grads[f"lstm{layer}.{direction}.{k}"] = gk
        n, T, _ = dh.shape
        width = cfg.branch_features() // T
        pieces = {br: dh[:, :, i * width : (i + 1) * width] for i, br in enumerate(cfg.concat_order)}
        for br in BRANCHES:
            dflat = pieces[br].reshape(n, -1)
            dflat, grads[f"bn_{br}.gamma"], grads[f"bn_{br}.beta"] = nn.batchnorm_backward(dflat, state["bn"][br])
            tape = state["tapes"].get(br)
            if tape:
                self._extract_backward(dflat.reshape(state["map_shape"]), tape, grads)
        return grads

    def loss_and_grads(self, amp, phase, labels, ext_maps=None):
        """Mean cross-entropy of a training batch, its gradients and probabilities."""
        probs, logits, state = self.forward(amp, phase, train=True, need_grad=True, ext_maps=ext_maps)
        _, loss, dlogits = nn.softmax_xent(logits, nn.one_hot(labels, self.config.n_classes))
        return loss, self.backward(dlogits, state), probs

    def predict_proba(self, amp, phase, batch_size: int = 32, ext_maps=None) -> np.ndarray:
        single = np.asarray(amp).ndim == 3
        if single:
            amp, phase = amp[None], phase[None]
        out = []
        for i in range(0, len(amp), batch_size):
            sl = slice(i, i + batch_size)
            maps = None if ext_maps is None else {br: ext_maps[br][sl] for br in BRANCHES}
            out.append(self.forward(amp[sl], phase[sl], train=False, ext_maps=maps)[0])
        probs = np.concatenate(out)
        return probs[0] if single else probs

    def features(self, amp, phase, stage: int, batch_size: int = 32) -> np.ndarray:
        """Stage 1: normalised, concatenated extractor features; stage 2:
        final Bi-LSTM state."""
        if stage not in (1, 2):
            raise ModelError("stage must be 1 or 2")
        out = []
        for i in range(0, len(amp), batch_size):
            _, _, st = self.forward(amp[i : i + batch_size], phase[i : i + batch_size], train=False)
            out.append(st[f"stage{stage}"])
        return np.concatenate(out)

    def recalibrate_batchnorm(self, amp=None, phase=None, ext_maps=None) -> None:
        """Replace the running statistics by the exact mean and variance of
        the extractor features over the given images."""
        maps = ext_maps if ext_maps is not None else self.extractor_maps(amp, phase)
        for br in BRANCHES:
            flat = maps[br].reshape(len(maps[br]), -1)
            self.params[f"bn_{br}.running_mean"][...] = flat.mean(axis=0)
            self.params[f"bn_{br}.running_var"][...] = flat.var(axis=0)

    def extractor_maps(self, amp, phase, batch_size: int = 32) -> dict[str, np.ndarray]:
        return {
            br: np.concatenate([self.extract_spatial(x[i : i + batch_size], br) for i in range(0, len(x), batch_size)])
            for br, x in (("amp", amp), ("phase", phase))
        }

    # -- persistence ----------------------------------------------------

    def save_weights(self, path, names=None) -> None:
        names = list(self.params) if names is None else list(names)
        atomic_write_bytes(path, encode_weights({k: self.params[k] for k in names}))

    def load_weights(self, path, strict: bool = False) -> list[str]:
        """Load a WGT1 file; returns the names loaded.  Unknown names and
        shape mismatches are errors; missing names are allowed unless
        ``strict``."""
        tensors = decode_weights(Path(path).read_bytes(), expected={k: v.shape for k, v in self.params.items()})
        if strict:
            missing = sorted(set(self.params) - set(tensors))
            if missing:
                raise ModelError(f"weights file lacks tensors: {missing}")
        for k, v in tensors.items():
            self.params[k] = v
        return list(tensors)


def encode_weights(tensors: dict[str, np.ndarray]) -> bytes:
    out = [WGT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_weights(blob: bytes, expected: Optional[dict] = None) -> dict[str, np.ndarray]:
    if blob[:4] != WGT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {WGT_MAGIC!r}")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated weights file while reading {what}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8") from None
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        if expected is not None and name not in expected:
            raise ModelError(f"unknown tensor name {name!r}")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        if rank > 8:
            raise ModelError(f"tensor {name!r}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        if expected is not None and tuple(dims) != tuple(expected[name]):
            raise ModelError(f"tensor {name!r}: shape {tuple(dims)} does not match expected {tuple(expected[name])}")
        size = int(np.prod(dims, dtype=np.int64))
        data = take(8 * size, f"data of {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after last tensor")
    return tensors
