"""Trainable building blocks on top of the tape: linear maps, LSTMs, small MLPs."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    return T.add(x, T.repeat_rows(b, x.shape[0]))


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, name: str = "linear"):
        self.weight = Parameter(glorot(rng, n_in, n_out), name=f"{name}.W")
        self.bias = Parameter(np.zeros((1, n_out)), name=f"{name}.b") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return add_bias(y, self.bias) if self.bias is not None else y

    def parameters(self) -> list[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class MLP:
    """Two layers, tanh hidden activation, linear output."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator, name: str = "mlp"):
        self.hidden = Linear(n_in, n_hidden, rng, name=f"{name}.0")
        self.out = Linear(n_hidden, n_out, rng, name=f"{name}.1")

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(T.tanh(self.hidden(x)))

    def parameters(self) -> list[Parameter]:
        return self.hidden.parameters() + self.out.parameters()


class LSTM:
    """Single-direction LSTM run over a padded batch, one time step at a time.

    Gate order in the fused weight is input, forget, cell, output.  The forget
    bias starts at 1.
    """

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator, name: str = "lstm"):
        self.n_hidden = n_hidden
        self.weight = Parameter(glorot(rng, n_in + n_hidden, 4 * n_hidden), name=f"{name}.W")
        b = np.zeros((1, 4 * n_hidden))
        b[0, n_hidden:2 * n_hidden] = 1.0
        self.bias = Parameter(b, name=f"{name}.b")

    def run(self, steps: Sequence[Tensor]) -> list[Tensor]:
        """``steps[t]`` is the (batch, n_in) input at time t; returns hidden states per step."""
        H = self.n_hidden
        batch = steps[0].shape[0]
        h = T.tensor(np.zeros((batch, H)))
        c = T.tensor(np.zeros((batch, H)))
        out = []
        for x in steps:
            z = add_bias(T.matmul(T.concat([x, h], axis=1), self.weight), self.bias)
            i = T.sigmoid(T.take(z, (slice(None), slice(0, H))))
            f = T.sigmoid(T.take(z, (slice(None), slice(H, 2 * H))))
            g = T.tanh(T.take(z, (slice(None), slice(2 * H, 3 * H))))
            o = T.sigmoid(T.take(z, (slice(None), slice(3 * H, 4 * H))))
            c = T.add(T.mul(f, c), T.mul(i, g))
            h = T.mul(o, T.tanh(c))
            out.append(h)
        return out

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class BiLSTM:
    """Bidirectional LSTM with ``hidden // 2`` units per direction.

    Variable-length sequences share one padded batch.  The backward direction
    reads every sequence reversed with padding kept at the end, so padding never
    reaches a real position in either direction and no mask is needed.
    """

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, name: str = "bilstm"):
        if hidden % 2:
            raise ValueError(f"bidirectional hidden size must be even, got {hidden}")
        self.hidden = hidden
        self.fwd = LSTM(n_in, hidden // 2, rng, name=f"{name}.fwd")
        self.bwd = LSTM(n_in, hidden // 2, rng, name=f"{name}.bwd")

    def __call__(self, sequences: Sequence[Tensor]) -> list[Tensor]:
        """Each input is (len_i, n_in); each output is (len_i, hidden)."""
        lengths = [s.shape[0] for s in sequences]
        if not lengths or min(lengths) == 0:
            raise T.ShapeError("BiLSTM needs at least one non-empty sequence")
        batch, longest = len(sequences), max(lengths)
        flat = T.concat(list(sequences), axis=0)
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        pad_row = flat.shape[0]
        flat = T.concat([flat, T.tensor(np.zeros((1, flat.shape[1])))], axis=0)

        def steps(reverse: bool) -> list[Tensor]:
            out = []
            for t in range(longest):
                rows = np.array([
                    (off + (n - 1 - t if reverse else t)) if t < n else pad_row
                    for off, n in zip(offsets, lengths)
                ])
                out.append(T.take(flat, rows))
            return out

        hf = T.concat(self.fwd.run(steps(False)), axis=0)  # row t * batch + b
        hb = T.concat(self.bwd.run(steps(True)), axis=0)
        results = []
        for b, n in enumerate(lengths):
            pos = np.arange(n)
            fwd_rows = pos * batch + b
            bwd_rows = (n - 1 - pos) * batch + b
            results.append(T.concat([T.take(hf, fwd_rows), T.take(hb, bwd_rows)], axis=1))
        return results

    def parameters(self) -> list[Parameter]:
        return self.fwd.parameters() + self.bwd.parameters()
