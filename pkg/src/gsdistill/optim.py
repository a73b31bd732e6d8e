"""A small Adam optimizer over named numpy parameter groups.

State (first/second moments, step counter) is held per group and is fully
serializable so optimization can resume bit-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .errors import ConfigError, ContractError

_MAGIC = b"GADM"


@dataclass
class Adam:
    learning_rates: Dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             lr_scale: Dict[str, float] | None = None) -> None:
        """One in-place Adam update; groups are visited in sorted-name order."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name in sorted(params):
            p, g = params[name], grads[name]
            if p.shape != g.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter "
                                    f"shape {p.shape} for group '{name}'")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            if m.shape != p.shape:  # parameter count changed (densify/prune)
                raise ContractError(f"stale optimizer state for group '{name}'")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            lr = self.learning_rates[name]
            if lr_scale:
                lr *= lr_scale.get(name, 1.0)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def remap(self, name: str, keep: np.ndarray, extra: int = 0) -> None:
        """Rebuild one group's state after Gaussians were removed/appended:
        surviving rows keep their moments, new rows start at zero."""
        if name not in self.m:
            return
        for buf in (self.m, self.v):
            old = buf[name][keep]
            if extra:
                pad = np.zeros((extra,) + old.shape[1:], dtype=old.dtype)
                old = np.concatenate([old, pad], axis=0)
            buf[name] = old

    def serialize(self) -> bytes:
        names = sorted(self.m)
        parts = [struct.pack("<4sIQ", _MAGIC, len(names), self.step_count)]
        for name in names:
            nb = name.encode("utf-8")
            arr_m, arr_v = self.m[name], self.v[name]
            parts.append(struct.pack("<H", len(nb)) + nb)
            parts.append(struct.pack("<B", arr_m.ndim)
                         + struct.pack(f"<{arr_m.ndim}q", *arr_m.shape))
            parts.append(arr_m.astype("<f8").tobytes())
            parts.append(arr_v.astype("<f8").tobytes())
        return b"".join(parts)

    def load(self, blob: bytes) -> None:
        if blob[:4] != _MAGIC:
            raise ConfigError("not an optimizer-state blob")
        _magic, count, step = struct.unpack("<4sIQ", blob[:16])
        self.step_count = step
        self.m.clear()
        self.v.clear()
        off = 16
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}q", blob, off)
            off += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            self.m[name] = np.frombuffer(blob, "<f8", n, off).reshape(shape).copy()
            off += 8 * n
            self.v[name] = np.frombuffer(blob, "<f8", n, off).reshape(shape).copy()
            off += 8 * n
        if off != len(blob):
            raise ConfigError("optimizer-state blob has trailing bytes")
