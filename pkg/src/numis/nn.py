"""Parameter containers and initializers shared by the two model families."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out)).astype(np.float32)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class Model:
    """Holds named parameter tensors and the set that make up the head."""

    kind = "model"

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.head_names: tuple[str, ...] = ()

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        return t

    def named_parameters(self):
        return list(self.params.items())

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.params.items() if p.requires_grad]

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.data.size for _, p in (self.trainable() if trainable_only else self.params.items()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def freeze_backbone(self) -> None:
        for name, p in self.params.items():
            p.requires_grad = name in self.head_names
            if not p.requires_grad:
                p.grad = None

    def unfreeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = True

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in self.params.items():
            arr = np.asarray(state[n], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {n}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()
            p.grad = None

    def config_dict(self) -> dict:
        raise NotImplementedError

    def forward(self, images: np.ndarray) -> Tensor:
        raise NotImplementedError

    def __call__(self, images):
        return self.forward(images)
