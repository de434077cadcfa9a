"""Two-headed network: shared trunk, displacement head, activity head.

Checkpoints are a binary file: magic ``TFNN``, version, a JSON block with the
layer specs, then the raw little-endian float64 parameter tensors in layer
order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import CacheError, ShapeError
from .layers import Dense, Layer, Param, layer_from_spec

_MAGIC = b"TFNN"
_VERSION = 1
_FILE_HEADER = struct.Struct("<4sII")  # magic, version, json length


class Network:
    """Trunk layers feeding a 2-unit regression head and a 2-logit class head.

    Forward is deterministic given the parameters, the input, the dropout rng
    stream and training mode; the class head emits logits (take a softmax for
    probabilities).
    """

    def __init__(self, trunk: list[Layer], reg_head: Dense, cls_head: Dense,
                 input_shape: tuple, extra_header: dict | None = None):
        self.trunk = trunk
        self.reg_head = reg_head
        self.cls_head = cls_head
        self.input_shape = tuple(input_shape)
        self.extra_header = dict(extra_header or {})

    def params(self) -> list[Param]:
        out = []
        for i, layer in enumerate(self.trunk):
            for p in layer.params():
                p.name = f"trunk.{i}.{layer.kind}.{p.name.split('.')[-1]}"
                out.append(p)
        for name, head in (("reg_head", self.reg_head), ("cls_head", self.cls_head)):
            for p in head.params():
                p.name = f"{name}.{p.name.split('.')[-1]}"
                out.append(p)
        return out

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad[...] = 0.0

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x, training: bool = False, rng=None):
        """Returns (regression (N,2), class logits (N,2), cache)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"input shape {x.shape[1:]} does not match model {self.input_shape}"
            )
        h = x
        caches = []
        for i, layer in enumerate(self.trunk):
            try:
                h, ctx = layer.forward(h, training=training, rng=rng)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from exc
            caches.append(ctx)
        reg, reg_ctx = self.reg_head.forward(h, training=training, rng=rng)
        logits, cls_ctx = self.cls_head.forward(h, training=training, rng=rng)
        return reg, logits, (caches, reg_ctx, cls_ctx)

    def backward(self, cache, dreg, dlogits):
        """Accumulate parameter gradients; returns the input gradient."""
        caches, reg_ctx, cls_ctx = cache
        dh = self.reg_head.backward(np.asarray(dreg, dtype=np.float64), reg_ctx)
        dh = dh + self.cls_head.backward(np.asarray(dlogits, dtype=np.float64), cls_ctx)
        for layer, ctx in zip(reversed(self.trunk), reversed(caches)):
            dh = layer.backward(dh, ctx)
        return dh

    def get_state(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.params()]

    def set_state(self, state: list[np.ndarray]) -> None:
        params = self.params()
        if len(state) != len(params):
            raise CacheError("parameter count mismatch in state")
        for p, v in zip(params, state):
            if p.value.shape != v.shape:
                raise CacheError(f"shape mismatch for '{p.name}'")
            p.value[...] = v

    def header(self) -> dict:
        return {
            "version": _VERSION,
            "input_shape": list(self.input_shape),
            "trunk": [layer.spec() for layer in self.trunk],
            "reg_head": self.reg_head.spec(),
            "cls_head": self.cls_head.spec(),
            "extra": self.extra_header,
        }

    def save(self, path) -> None:
        blob = json.dumps(self.header()).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_FILE_HEADER.pack(_MAGIC, _VERSION, len(blob)))
            fh.write(blob)
            for p in self.params():
                fh.write(np.asarray(p.value, dtype="<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, "rb") as fh:
            head = fh.read(_FILE_HEADER.size)
            if len(head) != _FILE_HEADER.size:
                raise CacheError(f"truncated checkpoint {path}")
            magic, version, json_len = _FILE_HEADER.unpack(head)
            if magic != _MAGIC:
                raise CacheError(f"bad checkpoint magic {magic!r}")
            if version != _VERSION:
                raise CacheError(f"unsupported checkpoint version {version}")
            spec = json.loads(fh.read(json_len).decode("utf-8"))
            rng = np.random.default_rng(0)  # placeholder init, overwritten below
            trunk = [layer_from_spec(s, rng) for s in spec["trunk"]]
            reg_head = layer_from_spec(spec["reg_head"], rng)
            cls_head = layer_from_spec(spec["cls_head"], rng)
            net = cls(trunk, reg_head, cls_head, tuple(spec["input_shape"]),
                      spec.get("extra"))
            for p in net.params():
                raw = fh.read(8 * p.size)
                if len(raw) != 8 * p.size:
                    raise CacheError(f"truncated parameters in {path}")
                p.value[...] = np.frombuffer(raw, dtype="<f8").reshape(p.value.shape)
        return net
