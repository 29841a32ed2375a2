"""Minimal dense reverse-mode differentiation on float64 numpy arrays.

Everything is desk-scale (well under a million parameters), so the engine
favors exactness and determinism over throughput: 64-bit floats everywhere,
sequential reductions, and a flat tape that can be replayed bit-identically.

A Tape records one forward pass; ``backward`` walks it in reverse from a
scalar output. Tensors are thin handles (data array + tape position).
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "tid", "name")

    def __init__(self, data, tape, tid, name=None):
        self.data = data
        self.tape = tape
        self.tid = tid
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, tid={self.tid})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


class _Node:
    __slots__ = ("op", "input_ids", "out", "compute", "backward_fn", "kink_margin")

    def __init__(self, op, input_ids, out, compute, backward_fn, kink_margin=None):
        self.op = op
        self.input_ids = input_ids
        self.out = out
        self.compute = compute          # pure fn(*input arrays) -> output array
        self.backward_fn = backward_fn  # fn(grad_out, grads dict) -> None
        self.kink_margin = kink_margin  # distance to nearest activation kink


class Tape:
    """Recorded forward pass; valid until any input array is mutated."""

    def __init__(self):
        self.nodes = []

    def leaf(self, data, name=None):
        data = np.asarray(data, dtype=np.float64)
        t = Tensor(data, self, len(self.nodes), name)
        self.nodes.append(_Node("leaf", (), t, None, None))
        return t

    def _record(self, op, inputs, out_data, compute, backward_fn, kink_margin=None):
        out = Tensor(np.asarray(out_data, dtype=np.float64), self, len(self.nodes))
        self.nodes.append(
            _Node(op, tuple(t.tid for t in inputs), out, compute, backward_fn, kink_margin)
        )
        return out

    def replay_check(self):
        """Recompute every node from its recorded inputs; True when all outputs
        reproduce bit-identically."""
        for node in self.nodes:
            if node.compute is None:
                continue
            args = [self.nodes[tid].out.data for tid in node.input_ids]
            fresh = node.compute(*args)
            if not np.array_equal(np.asarray(fresh), node.out.data):
                return False
        return True

    def min_kink_margin(self):
        """Smallest distance of any recorded pre-activation to an activation
        kink; infinity when the pass hit no kinked op."""
        margins = [n.kink_margin for n in self.nodes if n.kink_margin is not None]
        return min(margins) if margins else np.inf


def _same_tape(*tensors):
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("tensors belong to different tapes")
    return tape


def backward(output, wrt=None):
    """Accumulate gradients of a scalar ``output`` through its tape.

    Returns a dict mapping tensor id -> gradient array. Tensors never
    reached from the output simply do not appear (callers treat missing as
    zero). ``wrt`` optionally restricts the returned dict to those tensors.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.data.shape}")
    tape = output.tape
    grads = {output.tid: np.ones_like(output.data)}
    for node in reversed(tape.nodes[: output.tid + 1]):
        gy = grads.get(node.out.tid)
        if gy is None or node.backward_fn is None:
            continue
        node.backward_fn(gy, grads)
    if wrt is not None:
        return {t.tid: grads.get(t.tid, np.zeros_like(t.data)) for t in wrt}
    return grads


def _accum(grads, tid, value):
    if tid in grads:
        grads[tid] = grads[tid] + value
    else:
        grads[tid] = value


# ---------------------------------------------------------------- operators


def linear(x, W, b=None):
    """y = x @ W (+ b); x (..., in), W (in, out), b (out,)."""
    tape = _same_tape(*(t for t in (x, W, b) if t is not None))
    if x.data.shape[-1] != W.data.shape[0]:
        raise ShapeError(
            f"linear: x{x.data.shape} incompatible with W{W.data.shape}"
        )
    if b is not None and b.data.shape != (W.data.shape[1],):
        raise ShapeError(f"linear: b{b.data.shape} incompatible with W{W.data.shape}")

    if b is None:
        out_data = x.data @ W.data
        compute = lambda xd, Wd: xd @ Wd
        inputs = (x, W)
    else:
        out_data = x.data @ W.data + b.data
        compute = lambda xd, Wd, bd: xd @ Wd + bd
        inputs = (x, W, b)

    def backward_fn(gy, grads):
        x2 = x.data.reshape(-1, x.data.shape[-1])
        gy2 = gy.reshape(-1, gy.shape[-1])
        _accum(grads, x.tid, (gy @ W.data.T).reshape(x.data.shape))
        _accum(grads, W.tid, x2.T @ gy2)
        if b is not None:
            _accum(grads, b.tid, gy2.sum(axis=0))

    return tape._record("linear", inputs, out_data, compute, backward_fn)


def leaky_relu(x, slope=0.01):
    tape = x.tape
    mask = x.data >= 0
    out_data = np.where(mask, x.data, slope * x.data)
    margin = float(np.min(np.abs(x.data))) if x.data.size else np.inf

    def compute(xd):
        return np.where(xd >= 0, xd, slope * xd)

    def backward_fn(gy, grads):
        _accum(grads, x.tid, gy * np.where(mask, 1.0, slope))

    return tape._record("leaky_relu", (x,), out_data, compute, backward_fn, kink_margin=margin)


def sigmoid(x):
    tape = x.tape
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def compute(xd):
        return 1.0 / (1.0 + np.exp(-xd))

    def backward_fn(gy, grads):
        _accum(grads, x.tid, gy * out_data * (1.0 - out_data))

    return tape._record("sigmoid", (x,), out_data, compute, backward_fn)


def add(a, b):
    tape = _same_tape(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")

    def backward_fn(gy, grads):
        _accum(grads, a.tid, gy)
        _accum(grads, b.tid, gy)

    return tape._record("add", (a, b), a.data + b.data, lambda ad, bd: ad + bd, backward_fn)


def mul(a, b):
    """Elementwise product of same-shape tensors."""
    tape = _same_tape(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")

    def backward_fn(gy, grads):
        _accum(grads, a.tid, gy * b.data)
        _accum(grads, b.tid, gy * a.data)

    return tape._record("mul", (a, b), a.data * b.data, lambda ad, bd: ad * bd, backward_fn)


def scale(x, c):
    """x * scalar constant."""
    tape = x.tape
    c = float(c)

    def backward_fn(gy, grads):
        _accum(grads, x.tid, gy * c)

    return tape._record("scale", (x,), x.data * c, lambda xd: xd * c, backward_fn)


def concat(tensors, axis=-1):
    tape = _same_tape(*tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def compute(*arrs):
        return np.concatenate(arrs, axis=axis)

    def backward_fn(gy, grads):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * gy.ndim
            idx[axis] = slice(start, stop)
            _accum(grads, t.tid, gy[tuple(idx)])

    return tape._record("concat", tensors, out_data, compute, backward_fn)


def gather(x, idx):
    """Select rows along axis -2: x (..., N, F) -> (..., len(idx), F)."""
    tape = x.tape
    idx = np.asarray(idx, dtype=np.int64)

    def compute(xd):
        return np.take(xd, idx, axis=-2)

    def backward_fn(gy, grads):
        gx = np.zeros_like(x.data)
        gxm = np.moveaxis(gx, -2, 0)
        np.add.at(gxm, idx, np.moveaxis(gy, -2, 0))
        _accum(grads, x.tid, gx)

    return tape._record("gather", (x,), compute(x.data), compute, backward_fn)


def _segment_sum(xd, idx, n):
    xm = np.moveaxis(xd, -2, 0)
    out = np.zeros((n,) + xm.shape[1:], dtype=np.float64)
    np.add.at(out, idx, xm)
    return np.moveaxis(out, 0, -2)


def scatter_sum(x, idx, n_segments):
    """Sum rows of x (..., E, F) into n_segments along axis -2."""
    tape = x.tape
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.shape[-2] != len(idx):
        raise ShapeError(f"scatter_sum: {len(idx)} ids for {x.data.shape[-2]} rows")

    def compute(xd):
        return _segment_sum(xd, idx, n_segments)

    def backward_fn(gy, grads):
        _accum(grads, x.tid, np.take(gy, idx, axis=-2))

    return tape._record("scatter_sum", (x,), compute(x.data), compute, backward_fn)


def scatter_mean(x, idx, n_segments):
    """Mean per segment; empty segments yield zero rows."""
    tape = x.tape
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.shape[-2] != len(idx):
        raise ShapeError(f"scatter_mean: {len(idx)} ids for {x.data.shape[-2]} rows")
    counts = np.bincount(idx, minlength=n_segments).astype(np.float64)
    denom = np.maximum(counts, 1.0)[:, None]

    def compute(xd):
        return _segment_sum(xd, idx, n_segments) / denom

    def backward_fn(gy, grads):
        _accum(grads, x.tid, np.take(gy / denom, idx, axis=-2))

    return tape._record("scatter_mean", (x,), compute(x.data), compute, backward_fn)


def grouped_linear(x, groups, weights, biases):
    """Per-group linear over rows along axis -2 (the color-indexed layer).

    ``groups`` is a list of index arrays partitioning rows 0..R-1; row set
    ``groups[c]`` goes through ``weights[c]``/``biases[c]``.
    """
    tape = _same_tape(x, *weights, *biases)
    R = x.data.shape[-2]
    covered = np.concatenate([np.asarray(g) for g in groups]) if groups else np.array([])
    if len(covered) != R or (len(covered) and not np.array_equal(np.sort(covered), np.arange(R))):
        raise ShapeError(f"grouped_linear: groups do not partition {R} rows")
    out_dim = weights[0].data.shape[1]
    groups = [np.asarray(g, dtype=np.int64) for g in groups]

    def compute(xd, *params):
        out = np.zeros(xd.shape[:-1] + (out_dim,), dtype=np.float64)
        for c, rows in enumerate(groups):
            W, b = params[2 * c], params[2 * c + 1]
            out[..., rows, :] = xd[..., rows, :] @ W + b
        return out

    flat_params = []
    for W, b in zip(weights, biases):
        flat_params.extend((W, b))

    def backward_fn(gy, grads):
        gx = np.zeros_like(x.data)
        for c, rows in enumerate(groups):
            W = weights[c]
            gyc = gy[..., rows, :]
            xc = x.data[..., rows, :]
            gx[..., rows, :] = gyc @ W.data.T
            gy2 = gyc.reshape(-1, gyc.shape[-1])
            x2 = xc.reshape(-1, xc.shape[-1])
            _accum(grads, W.tid, x2.T @ gy2)
            _accum(grads, biases[c].tid, gy2.sum(axis=0))
        _accum(grads, x.tid, gx)

    return tape._record(
        "grouped_linear",
        (x, *flat_params),
        compute(x.data, *(p.data for p in flat_params)),
        compute,
        backward_fn,
    )


def expand_batch(x, batch):
    """Tile (N, F) -> (batch, N, F); backward sums over the batch axis."""
    tape = x.tape

    def compute(xd):
        return np.broadcast_to(xd, (batch,) + xd.shape).copy()

    def backward_fn(gy, grads):
        _accum(grads, x.tid, gy.sum(axis=0))

    return tape._record("expand_batch", (x,), compute(x.data), compute, backward_fn)


def sum_nodes(x):
    """Sum over axis -2: (..., N, F) -> (..., F)."""
    tape = x.tape

    def compute(xd):
        return xd.sum(axis=-2)

    def backward_fn(gy, grads):
        _accum(grads, x.tid, np.broadcast_to(np.expand_dims(gy, -2), x.data.shape).copy())

    return tape._record("sum_nodes", (x,), compute(x.data), compute, backward_fn)


def squeeze_last(x):
    tape = x.tape
    if x.data.shape[-1] != 1:
        raise ShapeError(f"squeeze_last: trailing axis is {x.data.shape[-1]}, not 1")

    def compute(xd):
        return xd[..., 0]

    def backward_fn(gy, grads):
        _accum(grads, x.tid, gy[..., None])

    return tape._record("squeeze_last", (x,), compute(x.data), compute, backward_fn)


def huber_loss(pred, target, delta=1.0):
    """Mean Huber loss of pred against a constant target array."""
    tape = pred.tape
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ShapeError(f"huber_loss: pred{pred.data.shape} vs target{target.shape}")
    delta = float(delta)
    n = max(pred.data.size, 1)

    def compute(pd):
        r = pd - target
        a = np.abs(r)
        per = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
        return np.asarray(per.sum() / n)

    r = pred.data - target
    margin = float(np.min(np.abs(np.abs(r) - delta))) if r.size else np.inf

    def backward_fn(gy, grads):
        dr = np.where(np.abs(r) <= delta, r, delta * np.sign(r))
        _accum(grads, pred.tid, gy * dr / n)

    return tape._record("huber_loss", (pred,), compute(pred.data), compute, backward_fn, kink_margin=margin)


# ---------------------------------------------------------- parameter store


class ParamStore:
    """Named float64 parameter tensors with AdamW moment state.

    Iteration order is insertion order and is part of the contract
    (checkpoints and deterministic updates rely on it).
    """

    def __init__(self):
        self.params = {}
        self.m = {}
        self.v = {}
        self.step_count = 0

    def add(self, name, array):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        array = np.array(array, dtype=np.float64)
        self.params[name] = array
        self.m[name] = np.zeros_like(array)
        self.v[name] = np.zeros_like(array)
        return array

    def names(self):
        return list(self.params)

    def n_scalars(self):
        return sum(p.size for p in self.params.values())

    def leaves(self, tape):
        """Register every parameter as a leaf on ``tape``; name -> Tensor."""
        return {name: tape.leaf(arr, name=name) for name, arr in self.params.items()}

    def copy(self):
        out = ParamStore()
        for name, arr in self.params.items():
            out.add(name, arr.copy())
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        out.step_count = self.step_count
        return out


def uniform_init(rng, shape, fan_in):
    bound = np.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def grads_by_name(loss, leaves):
    """Backward pass returning gradients keyed by parameter name; parameters
    the loss never touched get zeros."""
    raw = backward(loss)
    return {
        name: raw.get(t.tid, np.zeros_like(t.data)) for name, t in leaves.items()
    }


def adamw_step(store, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    """One decoupled-weight-decay Adam update, in place."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = grads[name]
        if weight_decay:
            p -= lr * weight_decay * p
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def finite_diff_check(
    loss_fn, store, n_samples=200, step=1e-5, kink_margin=1e-3, seed=0
):
    """Compare tape gradients to central finite differences.

    ``loss_fn()`` must rebuild the forward pass from ``store`` and return the
    scalar loss Tensor together with its parameter leaves. Coordinates whose
    perturbed passes come within ``kink_margin`` of an activation kink are
    excluded (finite differences are unreliable there).

    Returns a report dict with the worst accepted relative error.
    """
    loss, leaves = loss_fn()
    grads = grads_by_name(loss, leaves)

    rng = np.random.default_rng(seed)
    names = store.names()
    sizes = np.array([store.params[n].size for n in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_samples, total), replace=False)

    results = []
    skipped = 0
    for flat in np.sort(picks):
        k = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        name = names[k]
        offset = flat - int(np.cumsum(sizes)[k - 1]) if k else int(flat)
        p = store.params[name]
        orig = p.flat[offset]

        p.flat[offset] = orig + step
        loss_hi, _ = loss_fn()
        p.flat[offset] = orig - step
        loss_lo, _ = loss_fn()
        p.flat[offset] = orig

        if min(loss_hi.tape.min_kink_margin(), loss_lo.tape.min_kink_margin()) <= kink_margin:
            skipped += 1
            continue
        fd = (float(loss_hi.data) - float(loss_lo.data)) / (2.0 * step)
        an = float(grads[name].flat[offset])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-10)
        results.append((rel, name, int(offset), fd, an))

    results.sort(reverse=True)
    worst = results[0] if results else (0.0, None, -1, 0.0, 0.0)
    return {
        "n_checked": len(results),
        "n_skipped_kink": skipped,
        "max_rel_err": worst[0],
        "worst_param": worst[1],
        "worst_offset": worst[2],
        "worst_fd": worst[3],
        "worst_grad": worst[4],
    }
