"""Dense networks with hand-written backward passes and an Adam optimizer.

Everything runs in float64. Weights are stored as ``(fan_in, fan_out)``
matrices so a layer computes ``h @ W + b`` on row-vector inputs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")


class ContractError(ValueError):
    """Raised when an operation is called with arguments violating its contract."""


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(h: np.ndarray, kind: str) -> np.ndarray:
    # expressed through the activation output h
    if kind == "relu":
        return (h > 0.0).astype(np.float64)
    return 1.0 - h * h


class DenseNet:
    """Fully connected network: hidden layers use ``hidden_activation``, the
    output layer is linear.

    Parameters are initialised uniformly in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``
    from a generator seeded with ``seed``.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        hidden_activation: str = "relu",
        seed: int = 0,
    ):
        sizes = [int(n) for n in layer_sizes]
        if len(sizes) < 2 or any(n <= 0 for n in sizes):
            raise ContractError(f"layer_sizes must hold >= 2 positive ints, got {sizes}")
        if hidden_activation not in ACTIVATIONS:
            raise ContractError(f"unknown hidden activation {hidden_activation!r}")
        self.layer_sizes = sizes
        self.hidden_activation = hidden_activation
        self.output_activation = "identity"
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.flat = np.empty(sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:])))
        self._bind_views()
        for w, b in zip(self.weights, self.biases):
            bound = 1.0 / np.sqrt(w.shape[0])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)

    def _bind_views(self) -> None:
        # weights/biases are views into the single contiguous vector self.flat
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        self._slices: list[tuple[int, int, tuple[int, ...]]] = []
        i = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self._slices.append((i, i + fan_in * fan_out, (fan_in, fan_out)))
            self.weights.append(self.flat[i : i + fan_in * fan_out].reshape(fan_in, fan_out))
            i += fan_in * fan_out
            self._slices.append((i, i + fan_out, (fan_out,)))
            self.biases.append(self.flat[i : i + fan_out])
            i += fan_out

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        """Parameters in canonical order ``[W0, b0, W1, b1, ...]`` (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_params(self) -> int:
        return self.flat.size

    def get_flat(self) -> np.ndarray:
        return self.flat.copy()

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params():
            raise ContractError(f"flat vector has {flat.size} entries, net has {self.n_params()}")
        self.flat[...] = flat.ravel()

    def copy(self) -> "DenseNet":
        new = object.__new__(DenseNet)
        new.layer_sizes = list(self.layer_sizes)
        new.hidden_activation = self.hidden_activation
        new.output_activation = self.output_activation
        new.seed = self.seed
        new.flat = self.flat.copy()
        new._bind_views()
        return new

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.in_dim:
            raise ContractError(
                f"input dimension {x.shape[-1] if x.ndim else 0} does not match "
                f"network input dimension {self.in_dim}"
            )
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the network on one input vector or a ``(batch, in_dim)`` array."""
        return self.forward_cache(x)[0]

    def forward_cache(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        x = self._check_input(x)
        h = x
        acts = [h]
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = _activate(h, self.hidden_activation)
            acts.append(h)
        return h, acts

    def forward_rows(self, x: np.ndarray) -> np.ndarray:
        """Batched forward whose every row is bitwise equal to a single-row call.

        Plain batched matmul may reorder the BLAS accumulation with the batch
        size; stacking one matmul per row avoids that, at some cost in speed.
        """
        x = self._check_input(x)
        if x.ndim == 1:
            return self.forward(x[None, :])[0]
        h = x[:, None, :]
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = _activate(h, self.hidden_activation)
        return h[:, 0, :]

    def backward(
        self, acts: list[np.ndarray], upstream: np.ndarray, need_input: bool = True
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(upstream * output)`` w.r.t. parameters and input.

        ``acts`` is the cache returned by :meth:`forward_cache`. Parameter
        gradients are summed over the batch and returned in :meth:`params` order.
        """
        g = np.asarray(upstream, dtype=np.float64)
        out = acts[-1]
        if g.shape != out.shape:
            raise ContractError(
                f"upstream gradient shape {g.shape} does not match output shape {out.shape}"
            )
        single = g.ndim == 1
        if single:
            g = g[None, :]
            acts = [a[None, :] for a in acts]
        flat = np.empty(self.flat.size)
        grads = ParamGrads(_views(flat, self))
        grads.flat = flat
        for i in range(self.n_layers - 1, -1, -1):
            h_prev = acts[i]
            np.matmul(h_prev.T, g, out=grads[2 * i])
            np.sum(g, axis=0, out=grads[2 * i + 1])
            if i == 0 and not need_input:
                return grads, None
            g = g @ self.weights[i].T
            if i > 0:
                g = g * _activation_grad(h_prev, self.hidden_activation)
        return grads, (g[0] if single else g)

    def input_grad(self, acts: list[np.ndarray], upstream: np.ndarray) -> np.ndarray:
        """Input gradient only, skipping the parameter gradients."""
        g = upstream
        for i in range(self.n_layers - 1, -1, -1):
            g = g @ self.weights[i].T
            if i > 0:
                g = g * _activation_grad(acts[i], self.hidden_activation)
        return g


def net_forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def net_backward(
    net: DenseNet, x: np.ndarray, upstream: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Parameter and input gradients of ``<upstream, net(x)>``."""
    out, acts = net.forward_cache(x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != out.shape:
        raise ContractError(
            f"upstream gradient dimension {upstream.shape[-1] if upstream.ndim else 0} "
            f"does not match output dimension {net.out_dim}"
        )
    return net.backward(acts, upstream)


class ParamGrads(list):
    """Per-parameter gradient arrays that are views into one flat vector ``.flat``."""

    flat: np.ndarray


def _views(flat: np.ndarray, net: DenseNet) -> list[np.ndarray]:
    return [flat[a:b].reshape(shape) for a, b, shape in net._slices]


def flatten_grads(grads: Sequence[np.ndarray]) -> np.ndarray:
    flat = getattr(grads, "flat", None)
    if flat is not None:
        return flat
    return np.concatenate([np.ravel(g) for g in grads])


class AdamState:
    """Adam moments stored flat; ``first_moment``/``second_moment`` are per-parameter views."""

    def __init__(self, n_params: int, shapes_from: DenseNet | None = None, step_count: int = 0,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.step_count = step_count
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self._template = shapes_from

    @classmethod
    def for_net(cls, net: DenseNet, **kwargs) -> "AdamState":
        return cls(net.n_params(), shapes_from=net, **kwargs)

    @property
    def first_moment(self) -> list[np.ndarray]:
        return _views(self.m, self._template) if self._template is not None else [self.m]

    @property
    def second_moment(self) -> list[np.ndarray]:
        return _views(self.v, self._template) if self._template is not None else [self.v]

    def copy(self) -> "AdamState":
        new = AdamState(self.m.size, self._template, self.step_count, self.beta1, self.beta2, self.epsilon)
        new.m[...] = self.m
        new.v[...] = self.v
        return new


def adam_update(
    net: DenseNet, grads: Sequence[np.ndarray], state: AdamState, learning_rate: float
) -> tuple[DenseNet, AdamState]:
    """One bias-corrected Adam step, applied in place to ``net`` and ``state``."""
    if not learning_rate > 0:
        raise ContractError(f"learning_rate must be > 0, got {learning_rate}")
    params = net.params()
    if getattr(grads, "flat", None) is None:
        if len(grads) != len(params):
            raise ContractError(f"expected {len(params)} gradient arrays, got {len(grads)}")
        for k, (p, g) in enumerate(zip(params, grads)):
            if np.shape(g) != p.shape:
                raise ContractError(f"gradient shape {np.shape(g)} != parameter shape {p.shape} (layer {k // 2})")
    g = flatten_grads(grads)
    if g.size != net.flat.size:
        raise ContractError(f"gradient has {g.size} entries, network has {net.flat.size}")
    if not np.isfinite(g).all():
        for k, part in enumerate(_views(g, net)):
            if not np.isfinite(part).all():
                kind = "weight" if k % 2 == 0 else "bias"
                raise FloatingPointError(f"non-finite {kind} gradient in layer {k // 2}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    m, v = state.m, state.v
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    step = (learning_rate / (1.0 - b1**t)) * m / (np.sqrt(v / (1.0 - b2**t)) + state.epsilon)
    net.flat -= step
    if not np.isfinite(net.flat).all():
        for k, p in enumerate(params):
            if not np.isfinite(p).all():
                raise FloatingPointError(f"non-finite parameter in layer {k // 2} after Adam step")
    return net, state


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradient(
    params: Sequence[np.ndarray], loss: Callable[[], float], h: float = 1e-5
) -> list[np.ndarray]:
    """Central differences of ``loss()`` w.r.t. every entry of ``params`` (perturbed in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss()
            flat[j] = orig - h
            down = loss()
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def max_relative_error(
    analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]
) -> float:
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def gradient_check(
    net: DenseNet,
    x: np.ndarray,
    scalar_loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
    h: float = 1e-5,
) -> float:
    """Max relative error between backprop and central-difference parameter gradients.

    ``scalar_loss(output)`` returns ``(loss, d loss / d output)``.
    """
    out, acts = net.forward_cache(x)
    _, dout = scalar_loss(out)
    analytic, _ = net.backward(acts, dout)
    numeric = numeric_gradient(net.params(), lambda: float(scalar_loss(net.forward(x))[0]), h)
    return max_relative_error(analytic, numeric)
