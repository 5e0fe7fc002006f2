"""Small fully connected networks with hand-written backprop.

All parameters of a network live in one flat float64 vector; the per-layer
weight and bias arrays are views into it, so optimisers and target-network
blending work on a single array. Weights are stored ``(fan_in, fan_out)``
and inputs are batched row-wise: ``h = relu(x @ W + b)``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from mcre.errors import DimensionError, TrainingDivergenceError, ValidationError

OUTPUT_ACTIVATIONS = ("identity", "tanh")
CHECKPOINT_FORMAT = "mcre-ckpt/1"


class Mlp:
    """ReLU network; ``output_activation="tanh"`` scales ``tanh`` by ``bound``."""

    def __init__(self, layer_dims, output_activation="identity", bound=1.0, params=None):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ValidationError(f"bad layer_dims {layer_dims}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValidationError(f"output_activation must be one of {OUTPUT_ACTIVATIONS}")
        if bound <= 0:
            raise ValidationError("bound must be positive")
        self.layer_dims = layer_dims
        self.output_activation = output_activation
        self.bound = float(bound)
        n = self.param_count(layer_dims)
        if params is None:
            self.params = np.zeros(n)
        else:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise DimensionError(f"expected {n} parameters, got {params.shape}")
            if not np.all(np.isfinite(params)):
                raise ValidationError("parameters must be finite")
            self.params = params.copy()
        self._bind_views()

    @staticmethod
    def param_count(layer_dims):
        return sum(i * o + o for i, o in zip(layer_dims[:-1], layer_dims[1:]))

    def _bind_views(self):
        self.weights, self.biases = _split(self.params, self.layer_dims)

    @property
    def n_params(self):
        return self.params.size

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def copy(self):
        return Mlp(self.layer_dims, self.output_activation, self.bound, self.params)

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.params.shape:
            raise DimensionError("parameter vector has the wrong size")
        self.params[:] = flat

    def manifest(self):
        return {"layer_dims": self.layer_dims, "hidden_activation": "relu",
                "output_activation": self.output_activation, "bound": self.bound}

    def __call__(self, x):
        return forward(self, x)


def _split(flat, layer_dims):
    weights, biases = [], []
    pos = 0
    for i, o in zip(layer_dims[:-1], layer_dims[1:]):
        weights.append(flat[pos:pos + i * o].reshape(i, o))
        pos += i * o
        biases.append(flat[pos:pos + o])
        pos += o
    return weights, biases


def init_mlp(layer_dims, rng, output_activation="identity", bound=1.0):
    """Uniform fan-in initialisation: every entry ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    net = Mlp(layer_dims, output_activation, bound)
    for w, b in zip(net.weights, net.biases):
        lim = 1.0 / np.sqrt(w.shape[0])
        w[:] = rng.uniform(-lim, lim, size=w.shape)
        b[:] = rng.uniform(-lim, lim, size=b.shape)
    return net


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != net.in_dim:
        raise DimensionError(f"input must have {net.in_dim} columns, got shape {x.shape}")
    return x2, single


def _forward_cache(net, x):
    acts = [x]
    pre = None
    n_layers = len(net.weights)
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        pre = acts[-1] @ w + b
        if k < n_layers - 1:
            acts.append(np.maximum(pre, 0.0))
    if net.output_activation == "tanh":
        th = np.tanh(pre)
        out = np.clip(net.bound * th, -np.nextafter(net.bound, 0), np.nextafter(net.bound, 0))
        return out, (acts, th)
    return pre, (acts, None)


def forward(net, x):
    x2, single = _as_batch(net, x)
    out, _ = _forward_cache(net, x2)
    return out[0] if single else out


def forward_with_cache(net, x):
    x2, single = _as_batch(net, x)
    out, cache = _forward_cache(net, x2)
    return (out[0] if single else out), (cache, single)


def backward(net, x, upstream, cache=None):
    """Gradients of ``sum(upstream * forward(net, x))``.

    Returns ``(flat_param_grad, input_grad)``. Pass the cache from
    :func:`forward_with_cache` to skip recomputing the forward pass.
    """
    if cache is None:
        _, cache = forward_with_cache(net, x)
    (acts, th), single = cache
    g = np.asarray(upstream, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (acts[0].shape[0], net.out_dim):
        raise DimensionError(f"upstream gradient shape {g.shape} does not match output")
    if th is not None:
        g = g * net.bound * (1.0 - th * th)
    grad = np.empty_like(net.params)
    gw, gb = _split(grad, net.layer_dims)
    for k in range(len(net.weights) - 1, -1, -1):
        gw[k][:] = acts[k].T @ g
        gb[k][:] = g.sum(axis=0)
        g = g @ net.weights[k].T
        if k > 0:
            g = g * (acts[k] > 0.0)
    return grad, (g[0] if single else g)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros_like(params), np.zeros_like(params), 0, lr, beta1, beta2, eps)


def adam_step(params, grads, state):
    """In-place Adam update of ``params``; returns ``(params, state)``."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise DimensionError("params, grads and optimiser moments must share a shape")
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergenceError("non-finite gradient")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def soft_update(target, online, tau):
    """``target <- tau * online + (1 - tau) * target`` in place (flat arrays or nets)."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError("tau must lie in [0, 1]")
    t = target.params if isinstance(target, Mlp) else target
    o = online.params if isinstance(online, Mlp) else online
    if t.shape != o.shape:
        raise DimensionError("target and online parameters differ in shape")
    t *= 1.0 - tau
    t += tau * o
    return target


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _central_difference(loss_fn, params, i, h, max_shrink):
    """Central difference at coordinate ``i``, shrinking ``h`` across kinks.

    When the forward and backward one-sided slopes disagree, a ReLU kink lies
    inside the stencil and the central difference averages two different
    slopes. ``h`` is then divided by 10, at most ``max_shrink`` times. The test
    never looks at the analytic gradient.
    """
    old = params[i]
    try:
        centre = loss_fn(params)
        for _ in range(max_shrink + 1):
            params[i] = old + h
            up = loss_fn(params)
            params[i] = old - h
            down = loss_fn(params)
            fwd, bwd = (up - centre) / h, (centre - down) / h
            if relative_error(fwd, bwd) <= 1e-3:
                break
            h /= 10.0
    finally:
        params[i] = old
    return (up - down) / (2.0 * h)


def finite_difference_check(loss_fn, params, analytic, n_probes=10, rng=None, h=1e-5,
                            max_shrink=2):
    """Max relative error between ``analytic`` and central differences.

    ``loss_fn`` maps a flat parameter vector to a scalar; ``n_probes`` random
    coordinates are checked. ``params`` is restored afterwards.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    idx = rng.choice(params.size, size=min(n_probes, params.size), replace=False)
    numeric = np.array([_central_difference(loss_fn, params, i, h, max_shrink) for i in idx])
    return float(np.max(relative_error(np.asarray(analytic)[idx], numeric)))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, nets, arrays=None, meta=None):
    """Write ``manifest.json`` and ``params.bin`` (little-endian float64).

    ``nets`` maps names to :class:`Mlp`; ``arrays`` holds any further float
    arrays (optimiser moments, normalisation statistics) stored in the blob.
    """
    os.makedirs(directory, exist_ok=True)
    entries, blobs = [], []
    offset = 0
    for name in sorted(nets):
        net = nets[name]
        entries.append({"name": name, "kind": "mlp", "offset": offset, "count": net.n_params,
                        **net.manifest()})
        blobs.append(net.params)
        offset += net.n_params
    for name in sorted(arrays or {}):
        arr = np.asarray(arrays[name], dtype=np.float64)
        entries.append({"name": name, "kind": "array", "offset": offset, "count": arr.size,
                        "shape": list(arr.shape)})
        blobs.append(arr.ravel())
        offset += arr.size
    manifest = {"format": CHECKPOINT_FORMAT, "total": offset, "entries": entries,
                "meta": meta or {}}
    blob = np.concatenate(blobs) if blobs else np.zeros(0)
    with open(os.path.join(directory, "params.bin"), "wb") as fh:
        fh.write(blob.astype("<f8").tobytes())
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(directory):
    """Inverse of :func:`save_checkpoint`: returns ``(nets, arrays, meta)``."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"unsupported checkpoint format {manifest.get('format')!r}")
    with open(os.path.join(directory, "params.bin"), "rb") as fh:
        blob = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if blob.size != manifest["total"]:
        raise ValidationError(f"blob holds {blob.size} values, manifest expects {manifest['total']}")
    nets, arrays = {}, {}
    for e in manifest["entries"]:
        chunk = blob[e["offset"]:e["offset"] + e["count"]]
        if e["kind"] == "mlp":
            if Mlp.param_count(e["layer_dims"]) != e["count"]:
                raise ValidationError(f"parameter count mismatch for {e['name']}")
            nets[e["name"]] = Mlp(e["layer_dims"], e["output_activation"], e["bound"], chunk)
        else:
            arrays[e["name"]] = chunk.reshape(e["shape"]).copy()
    return nets, arrays, manifest["meta"]
