"""Hashed-embedding MLP predictors with hand-written backpropagation.

Both models embed each feature slot, concatenate the field embeddings and
pass them through one tanh hidden layer. ``CvrModel`` ends in a scalar
sigmoid head; ``ActionModel`` takes the hypothesised label as an extra input
and has one softmax head per action id.

Gradient buffers are plain dicts keyed like ``model.params``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

LOGIT_CLAMP = 30.0
INIT_SCALE = 0.05


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class _Embedded:
    """Shared embedding + hidden-layer machinery."""

    kind = ""

    def __init__(self, n_bins: int, n_fields: int, embed_dim: int, hidden: int,
                 dtype, extra_inputs: int = 0):
        self.n_bins, self.n_fields = int(n_bins), int(n_fields)
        self.embed_dim, self.hidden = int(embed_dim), int(hidden)
        self.dtype = np.dtype(dtype)
        self.clamp_events = 0
        self.params: dict[str, np.ndarray] = {
            "emb": np.zeros((self.n_bins, self.embed_dim), self.dtype),
            "W1": np.zeros((self.n_fields * self.embed_dim + extra_inputs, self.hidden), self.dtype),
            "b1": np.zeros(self.hidden, self.dtype),
        }

    def _init_uniform(self, rng: np.random.Generator, names):
        for name in names:
            p = self.params[name]
            p[...] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=p.shape).astype(self.dtype)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _check_slots(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.int64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_fields:
            raise ValueError(f"expected {self.n_fields} fields, got {X.shape[1]}")
        if X.size and (X.min() < 0 or X.max() >= self.n_bins):
            raise ValueError(f"slot id out of range [0, {self.n_bins})")
        return X

    def _hidden(self, X, extra=None):
        e = self.params["emb"][X].reshape(len(X), -1)
        inp = e if extra is None else np.concatenate([e, extra], axis=1)
        h = np.tanh(inp @ self.params["W1"] + self.params["b1"])
        return inp, h

    def _clamp(self, z):
        over = np.abs(z) > LOGIT_CLAMP
        if over.any():
            self.clamp_events += int(over.sum())
            z = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
        return z, ~over

    def _backprop_hidden(self, grads, X, inp, h, dh):
        dpre = dh * (1.0 - h * h)
        grads["W1"] += inp.T @ dpre
        grads["b1"] += dpre.sum(axis=0)
        dinp = dpre @ self.params["W1"].T
        d_emb = dinp[:, : self.n_fields * self.embed_dim].reshape(-1, self.embed_dim)
        np.add.at(grads["emb"], X.reshape(-1), d_emb)

    def config(self) -> dict:
        raise NotImplementedError


class CvrModel(_Embedded):
    """q(y=1|x): embeddings -> tanh hidden layer -> sigmoid."""

    kind = "cvr"

    def __init__(self, n_bins: int, n_fields: int, embed_dim: int = 8, hidden: int = 32,
                 dtype=np.float32, seed: Optional[int] = None):
        super().__init__(n_bins, n_fields, embed_dim, hidden, dtype)
        self.params["w2"] = np.zeros(self.hidden, self.dtype)
        self.params["b2"] = np.zeros(1, self.dtype)
        if seed is not None:
            self._init_uniform(np.random.default_rng(seed), ["emb", "W1", "w2"])

    def config(self) -> dict:
        return dict(n_bins=self.n_bins, n_fields=self.n_fields, embed_dim=self.embed_dim,
                    hidden=self.hidden)

    def forward(self, X):
        X = self._check_slots(X)
        inp, h = self._hidden(X)
        z, live = self._clamp(h @ self.params["w2"] + self.params["b2"][0])
        return z, (X, inp, h, live)

    def backward(self, cache, dlogit) -> dict:
        X, inp, h, live = cache
        dlogit = np.asarray(dlogit, dtype=self.dtype)
        if not np.all(np.isfinite(dlogit)):
            raise FloatingPointError("non-finite upstream gradient")
        dlogit = dlogit * live
        grads = self.zero_grads()
        grads["w2"] += h.T @ dlogit
        grads["b2"][0] += dlogit.sum()
        self._backprop_hidden(grads, X, inp, h, np.outer(dlogit, self.params["w2"]))
        return grads

    def predict(self, X) -> np.ndarray:
        return sigmoid(self.forward(X)[0])


def predict_cvr(model: CvrModel, x) -> float:
    return float(model.predict(x)[0])


class ActionModel(_Embedded):
    """q(a_j|x, y): the label enters as an extra hidden-layer input and as a
    per-(action, y) output bias."""

    kind = "action"

    def __init__(self, n_bins: int, n_fields: int, cardinalities: dict, embed_dim: int = 8,
                 hidden: int = 32, dtype=np.float32, seed: Optional[int] = None):
        super().__init__(n_bins, n_fields, embed_dim, hidden, dtype, extra_inputs=1)
        self.cardinalities = {int(j): int(k) for j, k in cardinalities.items()}
        for j, k in sorted(self.cardinalities.items()):
            self.params[f"V{j}"] = np.zeros((self.hidden, k), self.dtype)
            self.params[f"c{j}"] = np.zeros((2, k), self.dtype)
        if seed is not None:
            self._init_uniform(np.random.default_rng(seed),
                               ["emb", "W1"] + [f"V{j}" for j in sorted(self.cardinalities)])

    def config(self) -> dict:
        return dict(n_bins=self.n_bins, n_fields=self.n_fields, embed_dim=self.embed_dim,
                    hidden=self.hidden,
                    cardinalities={str(j): k for j, k in self.cardinalities.items()})

    def _check_action(self, action_id):
        if int(action_id) not in self.cardinalities:
            raise KeyError(f"unknown action id {action_id}")
        return int(action_id)

    def forward(self, X, y, action_id):
        j = self._check_action(action_id)
        X = self._check_slots(X)
        y = np.broadcast_to(np.asarray(y, dtype=np.int64), (len(X),))
        if np.any((y != 0) & (y != 1)):
            raise ValueError("y must be 0 or 1")
        inp, h = self._hidden(X, y[:, None].astype(self.dtype))
        z, live = self._clamp(h @ self.params[f"V{j}"] + self.params[f"c{j}"][y])
        return z, (X, y, j, inp, h, live)

    def backward(self, cache, dlogits) -> dict:
        X, y, j, inp, h, live = cache
        dlogits = np.asarray(dlogits, dtype=self.dtype)
        if not np.all(np.isfinite(dlogits)):
            raise FloatingPointError("non-finite upstream gradient")
        dlogits = dlogits * live
        grads = self.zero_grads()
        grads[f"V{j}"] += h.T @ dlogits
        np.add.at(grads[f"c{j}"], y, dlogits)
        self._backprop_hidden(grads, X, inp, h, dlogits @ self.params[f"V{j}"].T)
        return grads

    def predict_action(self, X, y, action_id) -> np.ndarray:
        z = self.forward(X, y, action_id)[0]
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


class IdentityChannel:
    """Stands in for an action model on the label action: q(a|y) = [a == y]."""

    def predict_action(self, X, y, action_id) -> np.ndarray:
        n = len(np.atleast_2d(X))
        y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
        return np.eye(2)[y]


def predict_action(model, x, y, action_id) -> np.ndarray:
    return model.predict_action(x, y, action_id)[0]


def accumulate_grad(model, upstream, *inputs) -> dict:
    """Gradient of ``sum(upstream * outputs)`` w.r.t. every parameter, where the
    outputs are the model's logits for ``inputs``."""
    upstream = np.asarray(upstream)
    if not np.all(np.isfinite(upstream)):
        raise FloatingPointError("non-finite upstream gradient")
    _, cache = model.forward(*inputs)
    return model.backward(cache, upstream)


def add_grads(a: dict, b: dict, scale: float = 1.0) -> dict:
    for k, v in b.items():
        a[k] += scale * v
    return a


@dataclass
class Optimizer:
    kind: str = "adam"  # "adam" | "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def apply_update(model, opt: Optimizer, grads: dict) -> None:
    for k, g in grads.items():
        if k not in model.params or model.params[k].shape != g.shape:
            raise ValueError(f"gradient {k!r} does not match the model")
    opt.step += 1
    if opt.kind == "sgd":
        for k, g in grads.items():
            model.params[k] -= np.asarray(opt.lr * g, dtype=model.dtype)
        return
    t = opt.step
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for k, g in grads.items():
        p = model.params[k]
        m = opt.m.setdefault(k, np.zeros_like(p))
        v = opt.v.setdefault(k, np.zeros_like(p))
        m *= opt.beta1
        m += (1 - opt.beta1) * g
        v *= opt.beta2
        v += (1 - opt.beta2) * g * g
        p -= np.asarray(opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps), dtype=p.dtype)


# Checkpoint: b"GDFM" | u32 version | u32 header length | JSON header | f32 LE arrays
MAGIC = b"GDFM"
FORMAT_VERSION = 1


def checkpoint_bytes(model, opt: Optional[Optimizer] = None, seed: Optional[int] = None) -> bytes:
    names = list(model.params)
    arrays = [("param", k, model.params[k]) for k in names]
    header = {
        "model": model.kind,
        "config": model.config(),
        "params": [[k, list(model.params[k].shape)] for k in names],
        "seed": seed,
        "clamp_events": model.clamp_events,
        "optimizer": None,
    }
    if opt is not None:
        state = [k for k in names if k in opt.m]
        header["optimizer"] = {"kind": opt.kind, "lr": opt.lr, "beta1": opt.beta1,
                               "beta2": opt.beta2, "eps": opt.eps, "step": opt.step,
                               "state": state}
        arrays += [("m", k, opt.m[k]) for k in state] + [("v", k, opt.v[k]) for k in state]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, _, a in arrays)
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + body


def load_checkpoint_bytes(data: bytes):
    """Returns (model, optimizer or None, header)."""
    if data[:4] != MAGIC:
        raise ValueError("not a GDFM checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    cfg = header["config"]
    if header["model"] == "cvr":
        model = CvrModel(**cfg)
    elif header["model"] == "action":
        model = ActionModel(**{**cfg, "cardinalities": {int(j): k for j, k in cfg["cardinalities"].items()}})
    else:
        raise ValueError(f"unknown model kind {header['model']!r}")
    model.clamp_events = header["clamp_events"]
    offset = 12 + hlen

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        return arr.astype(np.float32)

    for k, shape in header["params"]:
        model.params[k] = take(shape)
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = Optimizer(o["kind"], o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"])
        for k in o["state"]:
            opt.m[k] = take(model.params[k].shape)
        for k in o["state"]:
            opt.v[k] = take(model.params[k].shape)
    if offset != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return model, opt, header
