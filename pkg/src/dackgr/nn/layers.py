"""Parameter containers: Module, Linear, Embedding, multi-layer LSTM."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from dackgr.nn import functional as F
from dackgr.nn.tensor import Parameter, ShapeError, Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Walks attributes to find Parameters and child Modules, naming them by path."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters in state: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError("load_state_dict", f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        self.weight = Parameter(xavier_uniform(rng, n_in, n_out, (n_in, n_out), dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError("linear", f"input width {x.shape[-1]} != {self.weight.shape[0]}")
        y = F.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Parameter(xavier_uniform(rng, n, dim, (n, dim), dtype))

    def __call__(self, ids) -> Tensor:
        return F.embedding(self.weight, ids)


class LSTMCell(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0, dtype=np.float32):
        self.hidden = hidden
        self.w_ih = Parameter(xavier_uniform(rng, n_in, 4 * hidden, (n_in, 4 * hidden), dtype))
        self.w_hh = Parameter(xavier_uniform(rng, hidden, 4 * hidden, (hidden, 4 * hidden), dtype))
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden:2 * hidden] = forget_bias
        self.bias = Parameter(b)

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return lstm_step(x, h, c, self.w_ih, self.w_hh, self.bias)


def lstm_step(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, cell, output)."""
    hidden = h.shape[-1]
    if w_hh.shape != (hidden, 4 * hidden) or x.shape[-1] != w_ih.shape[0]:
        raise ShapeError("lstm_step", f"x {x.shape}, h {h.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}")
    gates = F.matmul(x, w_ih) + F.matmul(h, w_hh) + bias
    i = F.sigmoid(gates[..., :hidden])
    f = F.sigmoid(gates[..., hidden:2 * hidden])
    g = F.tanh(gates[..., 2 * hidden:3 * hidden])
    o = F.sigmoid(gates[..., 3 * hidden:])
    c_next = f * c + i * g
    h_next = o * F.tanh(c_next)
    return h_next, c_next


LSTMState = list[tuple[Tensor, Tensor]]


class LSTM(Module):
    """Stacked LSTM advanced one step at a time."""

    def __init__(self, n_in: int, hidden: int, layers: int, rng: np.random.Generator, dtype=np.float32):
        self.hidden = hidden
        self.dtype = dtype
        self.cells = [LSTMCell(n_in if i == 0 else hidden, hidden, rng, dtype=dtype) for i in range(layers)]

    def zero_state(self, batch: int) -> LSTMState:
        z = np.zeros((batch, self.hidden), dtype=self.dtype)
        return [(Tensor(z), Tensor(z)) for _ in self.cells]

    def step(self, x: Tensor, state: LSTMState) -> tuple[Tensor, LSTMState]:
        new_state = []
        inp = x
        for cell, (h, c) in zip(self.cells, state):
            h, c = cell(inp, h, c)
            new_state.append((h, c))
            inp = h
        return inp, new_state
