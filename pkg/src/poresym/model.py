"""Space-group equivariant message passing over pore-augmented crystal graphs.

Every edge orbit gets its own message weight bank and every node orbit its
own update bank; because the color functions are constant exactly on orbits,
permuting the input occupancy by any group element permutes the node states
and leaves the pooled prediction unchanged.

Message weight banks and gating layers are shared across the message-passing
steps; node update banks are per step.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .coloring import EDGE_KINDS, SharingPattern, NodeColoring, EdgeColoring
from .graphs import build_graph


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 16
    steps: int = 6
    readout_width: int = 24
    with_pores: bool = True
    with_symmetry: bool = True
    aggregation: str = "mean"   # per-receiver mean; "sum" for sum-pooling
    rbf_size: int = 16
    leaky_slope: float = 0.01

    def __post_init__(self):
        if min(self.hidden, self.steps, self.readout_width) < 1:
            raise ValueError("hidden, steps and readout_width must be >= 1")
        if self.aggregation not in ("mean", "sum"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


@dataclass
class NodeStates:
    t: np.ndarray           # (n_atoms, hidden)
    p: np.ndarray           # (n_pores, hidden)
    step: int = 0


def collapse_pattern(pattern):
    """One color per node/edge kind: ordinary shared-weight message passing."""
    node_coloring = NodeColoring(
        atom_colors=np.zeros(pattern.n_atoms, dtype=np.int64),
        pore_colors=np.zeros(pattern.n_pores, dtype=np.int64),
        n_atom_colors=1 if pattern.n_atoms else 0,
        n_pore_colors=1 if pattern.n_pores else 0,
    )
    edge_coloring = EdgeColoring()
    for kind in EDGE_KINDS:
        n_edges = pattern.edge_count(kind)
        edge_coloring.colors[kind] = np.zeros(n_edges, dtype=np.int64)
        edge_coloring.counts[kind] = 1 if n_edges else 0
    return SharingPattern(
        n_atoms=pattern.n_atoms,
        n_pores=pattern.n_pores,
        node_coloring=node_coloring,
        edge_coloring=edge_coloring,
        permutations=pattern.permutations,
        edges=pattern.edges,
    )


def _groups(colors, n_colors):
    return [np.flatnonzero(colors == c) for c in range(n_colors)]


class Model:
    """Learnable parameters plus the sharing pattern they were built for."""

    def __init__(self, pattern, cfg, store, framework_name=""):
        self.pattern = pattern
        self.cfg = cfg
        self.store = store
        self.framework_name = framework_name
        nc = pattern.node_coloring
        self.atom_groups = _groups(nc.atom_colors, nc.n_atom_colors)
        self.pore_groups = _groups(nc.pore_colors, nc.n_pore_colors)
        self.edge_groups = {
            kind: _groups(
                pattern.edge_coloring.colors[kind], pattern.edge_coloring.counts[kind]
            )
            for kind in EDGE_KINDS
        }
        self.best_store = None

    @property
    def n_atoms(self):
        return self.pattern.n_atoms

    @property
    def n_pores(self):
        return self.pattern.n_pores

    @property
    def uses_pores(self):
        return self.cfg.with_pores and self.n_pores > 0

    def config_hash(self):
        blob = {
            "framework": self.framework_name,
            "n_atoms": self.pattern.n_atoms,
            "n_pores": self.pattern.n_pores,
            "edge_counts": {k: int(self.pattern.edge_count(k)) for k in EDGE_KINDS},
            "color_counts": {
                "atom": self.pattern.node_coloring.n_atom_colors,
                "pore": self.pattern.node_coloring.n_pore_colors,
                **{k: self.pattern.edge_coloring.counts[k] for k in EDGE_KINDS},
            },
            "config": asdict(self.cfg),
        }
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()


def init_model(pattern, cfg, seed=0, framework_name=""):
    """Allocate and seed all weight banks for a sharing pattern.

    Weights are uniform in +/-sqrt(1/fan_in), biases zero. Bank counts follow
    the pattern's color counts; ``with_symmetry=False`` collapses them to one
    bank per kind.
    """
    if not cfg.with_symmetry:
        pattern = collapse_pattern(pattern)
    if cfg.with_pores and pattern.n_pores == 0:
        raise ValueError("with_pores=True but the pattern has no pore nodes")
    if not cfg.with_pores and pattern.n_pores > 0:
        raise ValueError("with_pores=False requires a pattern built without pores")

    h = cfg.hidden
    rng = np.random.default_rng(np.random.PCG64(seed))
    store = ad.ParamStore()

    def lin(name, fan_in, fan_out):
        store.add(f"{name}/W", ad.uniform_init(rng, (fan_in, fan_out), fan_in))
        store.add(f"{name}/b", np.zeros(fan_out))

    lin("embed/atom", 2, h)
    if cfg.with_pores:
        lin("embed/pore", 2, h)
    lin("embed/edge", cfg.rbf_size, h)

    for kind in ("h", "k", "l") if cfg.with_pores else ("h",):
        for c in range(pattern.edge_coloring.counts[kind]):
            lin(f"msg/{kind}/c{c:03d}", 3 * h, h)
        if pattern.edge_coloring.counts[kind]:
            lin(f"gate/{kind}", h, h)

    for s in range(cfg.steps):
        for c in range(pattern.node_coloring.n_atom_colors):
            lin(f"step{s}/atom/c{c:02d}/l0", 3 * h, h)
            lin(f"step{s}/atom/c{c:02d}/l1", h, h)
        if cfg.with_pores:
            for c in range(pattern.node_coloring.n_pore_colors):
                lin(f"step{s}/pore/c{c:02d}/l0", 2 * h, h)
                lin(f"step{s}/pore/c{c:02d}/l1", h, h)

    lin("readout/pore" if cfg.with_pores else "readout/atom", h, cfg.readout_width)
    lin("head/l0", cfg.readout_width, cfg.readout_width)
    lin("head/l1", cfg.readout_width, 1)

    return Model(pattern, cfg, store, framework_name)


def count_parameters(model):
    """Exact number of stored learnable scalars.

    Convention: input embeddings, per-color message banks (shared across
    steps), per-kind gate layers, per-step per-color update banks, and the
    readout/head layers are all included.
    """
    return model.store.n_scalars()


def _check_graph(model, graph):
    if graph.framework_name != model.framework_name:
        raise ValueError(
            f"graph built for framework {graph.framework_name!r} does not match "
            f"model for {model.framework_name!r}"
        )
    if graph.n_atoms != model.n_atoms or graph.with_pores != model.cfg.with_pores:
        raise ValueError("graph does not match the model's sharing pattern")
    if model.cfg.with_pores and graph.n_pores != model.n_pores:
        raise ValueError("graph pore count does not match the model's sharing pattern")
    for kind in EDGE_KINDS:
        if not np.array_equal(graph.edges[kind], model.pattern.edges.get(kind, np.zeros((0, 2)))):
            raise ValueError(f"graph {kind}-edge list does not match the sharing pattern")
    if graph.edge_features["h"].shape[-1] != model.cfg.rbf_size:
        raise ValueError(
            f"graph RBF size {graph.edge_features['h'].shape[-1]} does not match "
            f"model rbf_size {model.cfg.rbf_size}"
        )


def _bank(leaves, prefix, count, layer=None):
    tail = "" if layer is None else f"/l{layer}"
    width = 3 if layer is None else 2
    Ws, bs = [], []
    for c in range(count):
        Ws.append(leaves[f"{prefix}/c{c:0{width}d}{tail}/W"])
        bs.append(leaves[f"{prefix}/c{c:0{width}d}{tail}/b"])
    return Ws, bs


class _ForwardContext:
    """Per-tape machinery shared by full forward passes and single steps."""

    def __init__(self, model, graph, batch):
        self.model = model
        self.graph = graph
        self.batch = batch
        self.tape = ad.Tape()
        self.leaves = model.store.leaves(self.tape)
        self.kinds = ("h", "k", "l") if model.uses_pores else ("h",)
        self.edge_embed = {}
        for kind in self.kinds:
            feats = self.tape.leaf(graph.edge_features[kind])
            emb = ad.linear(feats, self.leaves["embed/edge/W"], self.leaves["embed/edge/b"])
            self.edge_embed[kind] = ad.expand_batch(emb, batch)
        self.zeros_atoms = self.tape.leaf(
            np.zeros((batch, model.n_atoms, model.cfg.hidden))
        )

    def embed_inputs(self, atom_features):
        m, leaves = self.model, self.leaves
        af = self.tape.leaf(atom_features)
        t = ad.linear(af, leaves["embed/atom/W"], leaves["embed/atom/b"])
        if m.uses_pores:
            pf = self.tape.leaf(self.graph.pore_features)
            p = ad.linear(pf, leaves["embed/pore/W"], leaves["embed/pore/b"])
            p = ad.expand_batch(p, self.batch)
        else:
            p = None
        return t, p

    def _aggregate(self, kind, sender_states, receiver_states, n_receivers):
        m, leaves, cfg = self.model, self.leaves, self.model.cfg
        edges = self.graph.edges[kind]
        sen = ad.gather(sender_states, edges[:, 0])
        rec = ad.gather(receiver_states, edges[:, 1])
        x = ad.concat([sen, rec, self.edge_embed[kind]], axis=-1)
        Ws, bs = _bank(leaves, f"msg/{kind}", len(m.edge_groups[kind]))
        msg = ad.grouped_linear(x, m.edge_groups[kind], Ws, bs)
        msg = ad.leaky_relu(msg, cfg.leaky_slope)
        gate = ad.sigmoid(ad.linear(msg, leaves[f"gate/{kind}/W"], leaves[f"gate/{kind}/b"]))
        msg = ad.mul(msg, gate)
        if cfg.aggregation == "mean":
            return ad.scatter_mean(msg, edges[:, 1], n_receivers)
        return ad.scatter_sum(msg, edges[:, 1], n_receivers)

    def step(self, s, t, p):
        """One message-passing round; all messages read the incoming states."""
        m, leaves, cfg = self.model, self.leaves, self.model.cfg
        m_h = self._aggregate("h", t, t, m.n_atoms)
        m_k = self._aggregate("k", p, t, m.n_atoms) if m.uses_pores else self.zeros_atoms
        m_l = self._aggregate("l", t, p, m.n_pores) if m.uses_pores else None

        xa = ad.concat([t, m_h, m_k], axis=-1)
        ua = ad.grouped_linear(xa, m.atom_groups, *_bank(leaves, f"step{s}/atom", len(m.atom_groups), 0))
        ua = ad.leaky_relu(ua, cfg.leaky_slope)
        ua = ad.grouped_linear(ua, m.atom_groups, *_bank(leaves, f"step{s}/atom", len(m.atom_groups), 1))
        t_new = ad.add(t, ua)

        p_new = p
        if m.uses_pores:
            xp = ad.concat([p, m_l], axis=-1)
            up = ad.grouped_linear(xp, m.pore_groups, *_bank(leaves, f"step{s}/pore", len(m.pore_groups), 0))
            up = ad.leaky_relu(up, cfg.leaky_slope)
            up = ad.grouped_linear(up, m.pore_groups, *_bank(leaves, f"step{s}/pore", len(m.pore_groups), 1))
            p_new = ad.add(p, up)
        return t_new, p_new

    def readout(self, t, p):
        m, leaves, cfg = self.model, self.leaves, self.model.cfg
        if m.uses_pores:
            r = ad.linear(p, leaves["readout/pore/W"], leaves["readout/pore/b"])
        else:
            r = ad.linear(t, leaves["readout/atom/W"], leaves["readout/atom/b"])
        r = ad.leaky_relu(r, cfg.leaky_slope)
        pooled = ad.sum_nodes(r)
        hid = ad.leaky_relu(ad.linear(pooled, leaves["head/l0/W"], leaves["head/l0/b"]), cfg.leaky_slope)
        return ad.squeeze_last(ad.linear(hid, leaves["head/l1/W"], leaves["head/l1/b"]))


def _forward_tape(model, graph, atom_features):
    """Full network on a (B, n_atoms, 2) feature batch.

    Returns (prediction tensor (B,), atom states, pore states, context).
    """
    ctx = _ForwardContext(model, graph, atom_features.shape[0])
    t, p = ctx.embed_inputs(atom_features)
    for s in range(model.cfg.steps):
        t, p = ctx.step(s, t, p)
    pred = ctx.readout(t, p)
    return pred, t, p, ctx


def forward(model, graph):
    """Prediction plus final node states for a single configuration graph."""
    _check_graph(model, graph)
    pred, t, p, _ = _forward_tape(model, graph, graph.atom_features[None])
    states = NodeStates(
        t=t.data[0],
        p=p.data[0] if p is not None else np.zeros((0, model.cfg.hidden)),
        step=model.cfg.steps,
    )
    return float(pred.data[0]), states


def predict(model, graph, occupancies, batch_size=256):
    """Predictions for many occupancies of one framework, as a float array."""
    _check_graph(model, graph)
    feats = np.stack([o.one_hot() for o in occupancies])
    out = np.empty(len(occupancies))
    for lo in range(0, len(occupancies), batch_size):
        chunk = feats[lo : lo + batch_size]
        pred, _, _, _ = _forward_tape(model, graph, chunk)
        out[lo : lo + len(chunk)] = pred.data
    return out


def message_step(model, step, graph, states):
    """Apply one message-passing round (using step ``step``'s update banks)
    to explicit node states."""
    _check_graph(model, graph)
    if not 0 <= step < model.cfg.steps:
        raise ValueError(f"step {step} out of range for {model.cfg.steps}-step model")
    ctx = _ForwardContext(model, graph, 1)
    t = ctx.tape.leaf(states.t[None])
    p = ctx.tape.leaf(states.p[None]) if model.uses_pores else None
    t_new, p_new = ctx.step(step, t, p)
    return NodeStates(
        t=t_new.data[0],
        p=p_new.data[0] if p_new is not None else np.zeros((0, model.cfg.hidden)),
        step=states.step + 1,
    )


def initial_states(model, graph):
    """Embedded input states (step 0), for driving message_step by hand."""
    _check_graph(model, graph)
    ctx = _ForwardContext(model, graph, 1)
    t, p = ctx.embed_inputs(graph.atom_features[None])
    return NodeStates(
        t=t.data[0],
        p=p.data[0] if p is not None else np.zeros((0, model.cfg.hidden)),
        step=0,
    )


# ------------------------------------------------------------- equivariance


def equivariance_check(model, framework, occupancies, rbf=None, tolerance=1e-9):
    """Numerically verify equivariance for every group element.

    For each occupancy x and element g: node states of g.x must equal the
    permuted node states of x, and predictions must match. Returns a report
    with the worst deviation and the element that produced it.
    """
    graph0 = build_graph(framework, occupancies[0], rbf, model.cfg.with_pores)
    _check_graph(model, graph0)

    base_feats = np.stack([o.one_hot() for o in occupancies])
    pred0, t0, p0, _ = _forward_tape(model, graph0, base_feats)

    worst = 0.0
    worst_element = 0
    for g, (aperm, pperm) in enumerate(
        zip(framework.atom_permutations, framework.pore_permutations)
    ):
        perm_feats = np.empty_like(base_feats)
        perm_feats[:, aperm, :] = base_feats
        pred1, t1, p1, _ = _forward_tape(model, graph0, perm_feats)

        dev = float(np.max(np.abs(t1.data[:, aperm, :] - t0.data)))
        if model.uses_pores:
            dev = max(dev, float(np.max(np.abs(p1.data[:, pperm, :] - p0.data))))
        dev = max(dev, float(np.max(np.abs(pred1.data - pred0.data))))
        if dev > worst:
            worst, worst_element = dev, g
    return {
        "max_deviation": worst,
        "worst_element": worst_element,
        "n_elements": len(framework.group),
        "n_occupancies": len(occupancies),
        "tolerance": tolerance,
        "passed": bool(worst <= tolerance),
    }


def inject_orbit_fault(model, seed=1234):
    """Return a copy whose largest h-edge orbit is split across two weight
    banks with different weights; breaks equivariance on purpose."""
    pattern = model.pattern
    colors = pattern.edge_coloring.colors["h"].copy()
    counts = pattern.edge_coloring.counts.copy()
    sizes = np.bincount(colors, minlength=counts["h"])
    target = int(np.argmax(sizes))
    members = np.flatnonzero(colors == target)
    if len(members) < 2:
        raise ValueError("largest h-edge orbit has a single edge; nothing to split")
    new_color = counts["h"]
    colors[members[: len(members) // 2]] = new_color
    counts = dict(counts, h=counts["h"] + 1)

    ec = EdgeColoring(
        colors=dict(pattern.edge_coloring.colors, h=colors), counts=counts
    )
    bad_pattern = SharingPattern(
        n_atoms=pattern.n_atoms,
        n_pores=pattern.n_pores,
        node_coloring=pattern.node_coloring,
        edge_coloring=ec,
        permutations=pattern.permutations,
        edges=pattern.edges,
    )
    store = model.store.copy()
    rng = np.random.default_rng(np.random.PCG64(seed))
    h = model.cfg.hidden
    store.add(f"msg/h/c{new_color:03d}/W", ad.uniform_init(rng, (3 * h, h), 3 * h))
    store.add(f"msg/h/c{new_color:03d}/b", ad.uniform_init(rng, (h,), h))
    return Model(bad_pattern, model.cfg, store, model.framework_name)


# ------------------------------------------------------------------ training


def evaluate(model, graph, occupancies, labels, batch_size=256):
    """MAE and MSE of predictions against labels."""
    preds = predict(model, graph, occupancies, batch_size)
    labels = np.asarray(labels, dtype=np.float64)
    err = preds - labels
    return {
        "mae": float(np.mean(np.abs(err))),
        "mse": float(np.mean(err**2)),
        "predictions": preds,
    }


def train(
    model,
    graph,
    train_data,
    eval_data,
    lr=1e-3,
    epochs=200,
    batch_size=16,
    seed=0,
    weight_decay=0.01,
    huber_delta=1.0,
    log_every=0,
):
    """Seeded epoch loop: Huber loss, AdamW updates, per-epoch eval metrics.

    ``train_data``/``eval_data`` are (occupancies, labels) pairs. Keeps the
    best-eval-MAE parameter snapshot on ``model.best_store``. Returns the
    metric history as a list of dict rows.
    """
    _check_graph(model, graph)
    occs, labels = train_data
    if len(occs) == 0:
        raise ValueError("training set is empty")
    feats = np.stack([o.one_hot() for o in occs])
    labels = np.asarray(labels, dtype=np.float64)
    eval_occs, eval_labels = eval_data
    eval_labels = np.asarray(eval_labels, dtype=np.float64)

    rng = np.random.default_rng(np.random.PCG64(seed))
    n = len(occs)
    history = []
    best_mae = np.inf
    model.best_store = None

    for epoch in range(epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, batch_size):
            batch = order[lo : lo + batch_size]
            pred, _, _, ctx = _forward_tape(model, graph, feats[batch])
            loss = ad.huber_loss(pred, labels[batch], huber_delta)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, batch offset {lo}"
                )
            grads = ad.grads_by_name(loss, ctx.leaves)
            ad.adamw_step(model.store, grads, lr, weight_decay=weight_decay)
            loss_sum += value * len(batch)

        row = {"epoch": epoch, "train_loss": loss_sum / n}
        if len(eval_occs):
            metrics = evaluate(model, graph, eval_occs, eval_labels)
            row["eval_mae"] = metrics["mae"]
            row["eval_mse"] = metrics["mse"]
            if metrics["mae"] < best_mae:
                best_mae = metrics["mae"]
                model.best_store = model.store.copy()
        else:
            row["eval_mae"] = float("nan")
            row["eval_mse"] = float("nan")
        history.append(row)
        if log_every and (epoch % log_every == 0 or epoch == epochs - 1):
            print(
                f"epoch {epoch:4d}  train_loss {row['train_loss']:.6f}  "
                f"eval_mae {row['eval_mae']:.6f}"
            )
    if model.best_store is None:
        model.best_store = model.store.copy()
    return history


# ---------------------------------------------------------------- checkpoint

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model):
    """Named parameter tensors + optimizer state + config hash, as .npz."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config_hash": model.config_hash(),
        "framework": model.framework_name,
        "model_config": asdict(model.cfg),
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for name, arr in model.store.params.items():
        arrays[f"param:{name}"] = arr
        arrays[f"m:{name}"] = model.store.m[name]
        arrays[f"v:{name}"] = model.store.v[name]
    arrays["step_count"] = np.array(model.store.step_count)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns (ParamStore, meta dict)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        store = ad.ParamStore()
        for key in data.files:
            if key.startswith("param:"):
                name = key[len("param:") :]
                store.add(name, data[key])
                store.m[name] = data[f"m:{name}"].copy()
                store.v[name] = data[f"v:{name}"].copy()
        store.step_count = int(data["step_count"])
    return store, meta


def restore_model(path, framework, rbf_size=None):
    """Rebuild a Model from a checkpoint against a loaded framework.

    The checkpoint's config hash must match the hash of the freshly derived
    sharing pattern; otherwise the checkpoint belongs to different data.
    """
    store, meta = load_checkpoint(path)
    cfg = ModelConfig(**meta["model_config"])
    pattern = framework.sharing_pattern(with_pores=cfg.with_pores)
    fresh = init_model(pattern, cfg, seed=0, framework_name=framework.name)
    if fresh.config_hash() != meta["config_hash"]:
        raise ValueError(
            "checkpoint config hash does not match the framework/sharing pattern"
        )
    if set(store.params) != set(fresh.store.params):
        raise ValueError("checkpoint parameter names do not match the architecture")
    for name, arr in fresh.store.params.items():
        if store.params[name].shape != arr.shape:
            raise ValueError(f"checkpoint parameter {name} has wrong shape")
    model = Model(fresh.pattern, cfg, store, framework.name)
    return model, meta
