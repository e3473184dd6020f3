"""Rank-2 float64 reverse-mode autodiff over an explicit tape, plus optimizers.

Values are plain ``numpy`` arrays of rank 1 or 2.  A :class:`Tape` records
one backward closure per op; :meth:`Tape.backward` replays them in reverse
and accumulates into :class:`Parameter` gradients.  A tape created with
``record=False`` computes values only.
"""
import json
import os

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class Var:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad=False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


class Parameter(Var):
    """A named learnable tensor with a persistent gradient accumulator."""

    __slots__ = ("name",)

    def __init__(self, name, value):
        value = np.array(value, dtype=np.float64)
        if value.ndim not in (1, 2):
            raise ShapeError(f"parameter {name!r} must have rank 1 or 2, got shape {value.shape}")
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _acc(var, g):
    if not var.requires_grad:
        return
    if var.grad is None:
        var.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        var.grad += g


def _check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite values produced by {name}")


class Tape:
    """Records ops for one backward pass.  Confined to a single worker."""

    def __init__(self, record=True, debug=False):
        self.record = record
        self.debug = debug
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    # -- plumbing -----------------------------------------------------------

    def const(self, value):
        return Var(np.asarray(value, dtype=np.float64))

    def _out(self, name, value, parents, backward):
        if self.debug:
            _check_finite(name, value)
        needs = self.record and any(p.requires_grad for p in parents)
        out = Var(value, requires_grad=needs)
        if needs:
            self._nodes.append((out, backward))
        return out

    def backward(self, loss, seed_grad=None):
        if loss.value.size != 1 and seed_grad is None:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if not loss.requires_grad:
            return
        _acc(loss, np.ones_like(loss.value) if seed_grad is None else seed_grad)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)
        self._nodes.clear()

    # -- linear algebra ------------------------------------------------------

    def matmul(self, x, w):
        if x.value.ndim != 2 or w.value.ndim != 2 or x.value.shape[1] != w.value.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {x.value.shape} @ {w.value.shape}")

        def bw(g):
            if x.requires_grad:
                _acc(x, g @ w.value.T)
            if w.requires_grad:
                _acc(w, x.value.T @ g)
        return self._out("matmul", x.value @ w.value, (x, w), bw)

    linear = matmul

    def add(self, x, y):
        """Elementwise sum; ``y`` may be a single row broadcast over ``x``."""
        xs, ys = x.value.shape, y.value.shape
        bcast = xs != ys
        if bcast and not (len(ys) == 2 and ys[0] == 1 and ys[1] == xs[-1]):
            raise ShapeError(f"add shape mismatch: {xs} vs {ys}")

        def bw(g):
            _acc(x, g)
            _acc(y, g.sum(axis=0, keepdims=True) if bcast else g)
        return self._out("add", x.value + y.value, (x, y), bw)

    def sub(self, x, y):
        _same(x, y, "sub")

        def bw(g):
            _acc(x, g)
            _acc(y, -g)
        return self._out("sub", x.value - y.value, (x, y), bw)

    def hadamard(self, x, y):
        _same(x, y, "hadamard")

        def bw(g):
            _acc(x, g * y.value)
            _acc(y, g * x.value)
        return self._out("hadamard", x.value * y.value, (x, y), bw)

    def scale(self, x, c):
        c = float(c)
        return self._out("scale", x.value * c, (x,), lambda g: _acc(x, g * c))

    def one_minus(self, x):
        return self._out("one_minus", 1.0 - x.value, (x,), lambda g: _acc(x, -g))

    def row_scale(self, x, s):
        """Scale row i of ``x`` [m x n] by ``s[i]`` where ``s`` is [m x 1]."""
        if s.value.shape != (x.value.shape[0], 1):
            raise ShapeError(f"row_scale shape mismatch: {x.value.shape} vs {s.value.shape}")

        def bw(g):
            _acc(x, g * s.value)
            _acc(s, np.sum(g * x.value, axis=1, keepdims=True))
        return self._out("row_scale", x.value * s.value, (x, s), bw)

    def row_dot(self, x, y):
        """Row-wise inner products, [m x n], [m x n] -> [m x 1]."""
        _same(x, y, "row_dot")

        def bw(g):
            _acc(x, g * y.value)
            _acc(y, g * x.value)
        return self._out("row_dot", np.sum(x.value * y.value, axis=1, keepdims=True), (x, y), bw)

    # -- nonlinearities ------------------------------------------------------

    def relu(self, x):
        mask = x.value > 0
        return self._out("relu", x.value * mask, (x,), lambda g: _acc(x, g * mask))

    def sigmoid(self, x):
        v = _sigmoid(x.value)
        return self._out("sigmoid", v, (x,), lambda g: _acc(x, g * v * (1.0 - v)))

    def exp(self, x):
        v = np.exp(x.value)
        return self._out("exp", v, (x,), lambda g: _acc(x, g * v))

    def tanh(self, x):
        v = np.tanh(x.value)
        return self._out("tanh", v, (x,), lambda g: _acc(x, g * (1.0 - v * v)))

    def softmax_rows(self, x):
        z = x.value - x.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)

        def bw(g):
            _acc(x, p * (g - np.sum(g * p, axis=1, keepdims=True)))
        return self._out("softmax_rows", p, (x,), bw)

    # -- reductions and shape ops -------------------------------------------

    def mean_rows(self, x):
        m = x.value.shape[0]
        return self._out("mean_rows", x.value.mean(axis=0, keepdims=True), (x,),
                         lambda g: _acc(x, np.broadcast_to(g / m, x.value.shape)))

    def sum_all(self, x):
        return self._out("sum_all", np.array([[x.value.sum()]]), (x,),
                         lambda g: _acc(x, np.full(x.value.shape, g.item())))

    def weighted_sum(self, x, w):
        """Scalar sum of ``x * w`` with a constant weight array."""
        w = np.asarray(w, dtype=np.float64).reshape(x.value.shape)
        return self._out("weighted_sum", np.array([[np.sum(x.value * w)]]), (x,),
                         lambda g: _acc(x, g.item() * w))

    def concat_cols(self, *xs):
        m = xs[0].value.shape[0]
        for x in xs:
            if x.value.ndim != 2 or x.value.shape[0] != m:
                raise ShapeError(f"concat_cols row mismatch: {[v.value.shape for v in xs]}")
        widths = [x.value.shape[1] for x in xs]
        cuts = np.cumsum([0] + widths)

        def bw(g):
            for x, lo, hi in zip(xs, cuts[:-1], cuts[1:]):
                _acc(x, g[:, lo:hi])
        return self._out("concat_cols", np.concatenate([x.value for x in xs], axis=1), xs, bw)

    def slice_cols(self, x, lo, hi):
        def bw(g):
            if x.requires_grad:
                full = np.zeros_like(x.value)
                full[:, lo:hi] = g
                _acc(x, full)
        return self._out("slice_cols", x.value[:, lo:hi], (x,), bw)

    def gather_rows(self, x, idx):
        """Rows ``x[idx]``; the backward pass scatter-adds into ``x``."""
        idx = np.asarray(idx, dtype=np.int64)

        def bw(g):
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.value)
                kernels.scatter_add_rows(x.grad, idx, np.ascontiguousarray(g))
        return self._out("gather_rows", x.value[idx], (x,), bw)

    # -- segmented ops -------------------------------------------------------

    def segment_log_softmax(self, x, offsets):
        """Log-softmax of an [n x 1] column within each segment."""
        logp = kernels.segment_log_softmax(np.ascontiguousarray(x.value[:, 0]), offsets)

        def bw(g):
            _acc(x, kernels.segment_log_softmax_grad(np.ascontiguousarray(g[:, 0]), logp,
                                                     offsets)[:, None])
        return self._out("segment_log_softmax", logp[:, None], (x,), bw)

    def segment_mean_broadcast(self, x, offsets):
        """Replace every row by the mean of its segment."""
        sizes = np.diff(offsets).astype(np.float64)[:, None]
        seg = kernels.segment_ids(offsets)
        means = kernels.segment_sum_rows(np.ascontiguousarray(x.value), offsets) / sizes

        def bw(g):
            s = kernels.segment_sum_rows(np.ascontiguousarray(g), offsets) / sizes
            _acc(x, s[seg])
        return self._out("segment_mean", means[seg], (x,), bw)


def _same(x, y, name):
    if x.value.shape != y.value.shape:
        raise ShapeError(f"{name} shape mismatch: {x.value.shape} vs {y.value.shape}")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


sigmoid = _sigmoid


# ---------------------------------------------------------------------- LSTM

class LSTMParams:
    """Weights of one LSTM cell with gate order (input, forget, output, candidate)."""

    def __init__(self, prefix, input_size, hidden_size, rng=None, zero=False):
        n = hidden_size
        if zero:
            wx, wh = np.zeros((input_size, 4 * n)), np.zeros((n, 4 * n))
        else:
            wx = rng.normal(0.0, 1.0 / np.sqrt(input_size), (input_size, 4 * n))
            wh = rng.normal(0.0, 1.0 / np.sqrt(n), (n, 4 * n))
        self.w_x = Parameter(f"{prefix}.w_x", wx)
        self.w_h = Parameter(f"{prefix}.w_h", wh)
        self.b = Parameter(f"{prefix}.b", np.zeros((1, 4 * n)))
        self.hidden_size = n

    def parameters(self):
        return [self.w_x, self.w_h, self.b]


def lstm_step(tp, x, state, params):
    """One LSTM recurrence on a batch of rows; returns ``(h', c')``."""
    h, c = state
    n = params.hidden_size
    if h.value.shape[1] != n or c.value.shape != h.value.shape or x.value.shape[0] != h.value.shape[0]:
        raise ShapeError(f"lstm_step shape mismatch: input {x.value.shape}, h {h.value.shape}, "
                         f"c {c.value.shape}, hidden {n}")
    gates = tp.add(tp.add(tp.matmul(x, params.w_x), tp.matmul(h, params.w_h)), params.b)
    i = tp.sigmoid(tp.slice_cols(gates, 0, n))
    f = tp.sigmoid(tp.slice_cols(gates, n, 2 * n))
    o = tp.sigmoid(tp.slice_cols(gates, 2 * n, 3 * n))
    g = tp.tanh(tp.slice_cols(gates, 3 * n, 4 * n))
    c_new = tp.add(tp.hadamard(f, c), tp.hadamard(i, g))
    h_new = tp.hadamard(o, tp.tanh(c_new))
    return h_new, c_new


# ---------------------------------------------------------------- grad check

def grad_check(fn, params, eps=1e-6, n_coords=64, seed=0, floor=1e-6):
    """Max relative error between tape gradients and central differences.

    ``fn(tape)`` must build a scalar loss on the given tape.  Up to
    ``n_coords`` coordinates per parameter are sampled (all of them when the
    parameter is smaller).
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    tp = Tape()
    loss = fn(tp)
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("loss is not finite")
    tp.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > n_coords:
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        for k in coords:
            old = flat[k]
            flat[k] = old + eps
            up = fn(Tape(record=False)).value.item()
            flat[k] = old - eps
            down = fn(Tape(record=False)).value.item()
            flat[k] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while perturbing {p.name}[{k}]")
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[k]
            if a == numeric:
                continue
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        p.zero_grad()
    return worst


# ---------------------------------------------------------------- optimizers

class SGD:
    def __init__(self, params, lr=0.1, lr_scale=None):
        self.params = list(params)
        self.lr = lr
        self.lr_scale = dict(lr_scale or {})
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        for p in self.params:
            p.value -= self.lr * _scale_for(self.lr_scale, p.name) * p.grad
        self.zero_grad()

    def state_arrays(self):
        return {}


def _scale_for(table, name):
    best, scale = -1, 1.0
    for prefix, s in table.items():
        if name.startswith(prefix) and len(prefix) > best:
            best, scale = len(prefix), s
    return scale


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, lr_scale=None,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        # decoupled: shrinks values by lr * weight_decay per step, outside the moments
        self.weight_decay = weight_decay
        # per-parameter multipliers on lr, keyed by name prefix
        self.lr_scale = dict(lr_scale or {})
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            lr = self.lr * _scale_for(self.lr_scale, p.name)
            if self.weight_decay:
                p.value *= 1.0 - lr * self.weight_decay
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()

    def state_arrays(self):
        out = {}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"adam.m.{p.name}"] = m
            out[f"adam.v.{p.name}"] = v
        return out


def clip_grad_norm(params, max_norm):
    """Rescale grads in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if max_norm and norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


def make_optimizer(name, params, lr, lr_scale=None, weight_decay=0.0):
    if name == "adam":
        return Adam(params, lr=lr, lr_scale=lr_scale, weight_decay=weight_decay)
    if name == "sgd":
        return SGD(params, lr=lr, lr_scale=lr_scale)
    raise ValueError(f"unknown optimizer {name!r}")


# --------------------------------------------------------------- checkpoints

def save_tensors(path, tensors):
    """Write ``{name: array}`` as ``<path>.bin`` (little-endian f8) + ``<path>.json``."""
    entries, offset = [], 0
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path + ".bin", "wb") as fh:
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(data.shape), "offset": offset})
            offset += data.nbytes
    with open(path + ".json", "w") as fh:
        json.dump({"dtype": "<f8", "tensors": entries}, fh, indent=1)


def load_tensors(path):
    with open(path + ".json") as fh:
        manifest = json.load(fh)
    raw = open(path + ".bin", "rb").read()
    out = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out


def save_parameters(path, params):
    save_tensors(path, {p.name: p.value for p in params})


def load_parameters(path, params, strict=True):
    data = load_tensors(path)
    for p in params:
        if p.name not in data:
            if strict:
                raise KeyError(f"checkpoint {path} has no tensor {p.name!r}")
            continue
        if data[p.name].shape != p.value.shape:
            raise ShapeError(f"{p.name}: checkpoint shape {data[p.name].shape} != {p.value.shape}")
        p.value[...] = data[p.name]
