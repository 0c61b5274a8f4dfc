"""Per-point velocity estimator for pairs of region point clouds.

Both clouds pass through shared local and global MLP stacks applied
point-wise; each cloud's global feature is the coordinate-wise max over its
points. Each moving point's local feature is concatenated with both global
features and pushed through an output head that emits one 3D velocity per
moving point. Forward, exact reverse-mode backward, and an Adam optimizer
are implemented on plain float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOCAL_SIZES = (64, 64)
GLOBAL_SIZES = (64, 128, 1024)
HEAD_SIZES = (1024, 512, 256, 128, 64, 3)
INPUT_DIM = 3


def _layer_dims(local=LOCAL_SIZES, global_=GLOBAL_SIZES, head=HEAD_SIZES):
    dims = []
    prev = INPUT_DIM
    for w in local:
        dims.append(("local", prev, w))
        prev = w
    local_out = prev
    for w in global_:
        dims.append(("global", prev, w))
        prev = w
    global_out = prev
    prev = local_out + 2 * global_out
    for w in head:
        dims.append(("head", prev, w))
        prev = w
    return dims


@dataclass
class ModelParams:
    """Weights/biases of the three MLP stacks, as ordered (W, b) lists."""

    local: list
    global_: list
    head: list
    seed: int = 0
    local_sizes: tuple = LOCAL_SIZES
    global_sizes: tuple = GLOBAL_SIZES
    head_sizes: tuple = HEAD_SIZES

    def stacks(self):
        return (("local", self.local), ("global", self.global_), ("head", self.head))

    def named_arrays(self):
        """Deterministic (name, array) iteration over every parameter tensor."""
        for stack_name, layers in self.stacks():
            for i, (w, b) in enumerate(layers):
                yield f"{stack_name}.{i}.W", w
                yield f"{stack_name}.{i}.b", b

    def count(self) -> int:
        return sum(a.size for _, a in self.named_arrays())


@dataclass
class AdamState:
    """First/second moment accumulators plus step counter."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8):
        m = {name: np.zeros_like(a) for name, a in params.named_arrays()}
        v = {name: np.zeros_like(a) for name, a in params.named_arrays()}
        return cls(m, v, 0, beta1, beta2, eps)


def init_params(seed: int, local_sizes=LOCAL_SIZES, global_sizes=GLOBAL_SIZES,
                head_sizes=HEAD_SIZES) -> ModelParams:
    """Kaiming-uniform fan-in weights, zero biases, deterministic in the seed."""
    rng = np.random.default_rng(seed)

    def stack(sizes, prev):
        layers = []
        for w in sizes:
            bound = np.sqrt(6.0 / prev)
            layers.append((rng.uniform(-bound, bound, size=(prev, w)),
                           np.zeros(w)))
            prev = w
        return layers, prev

    local, local_out = stack(local_sizes, INPUT_DIM)
    global_, global_out = stack(global_sizes, local_out)
    head, _ = stack(head_sizes, local_out + 2 * global_out)
    return ModelParams(local, global_, head, seed,
                       tuple(local_sizes), tuple(global_sizes), tuple(head_sizes))


def zero_params(local_sizes=LOCAL_SIZES, global_sizes=GLOBAL_SIZES,
                head_sizes=HEAD_SIZES) -> ModelParams:
    """All-zero parameters (test constructor; forward gives zero velocities)."""

    def stack(sizes, prev):
        layers = []
        for w in sizes:
            layers.append((np.zeros((prev, w)), np.zeros(w)))
            prev = w
        return layers, prev

    local, local_out = stack(local_sizes, INPUT_DIM)
    global_, global_out = stack(global_sizes, local_out)
    head, _ = stack(head_sizes, local_out + 2 * global_out)
    return ModelParams(local, global_, head, 0,
                       tuple(local_sizes), tuple(global_sizes), tuple(head_sizes))


def zero_grads(params: ModelParams) -> dict:
    return {name: np.zeros_like(a) for name, a in params.named_arrays()}


def _mlp_forward(layers, x, relu_last: bool):
    acts = [x]
    pre = []
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b[None, :]
        pre.append(z)
        if relu_last or i < len(layers) - 1:
            z = np.maximum(z, 0.0)
        acts.append(z)
    return acts, pre


def _mlp_backward(layers, acts, pre, d_out, relu_last: bool, prefix: str, grads: dict):
    g = d_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if relu_last or i < len(layers) - 1:
            g = g * (pre[i] > 0)
        grads[f"{prefix}.{i}.W"] += acts[i].T @ g
        grads[f"{prefix}.{i}.b"] += g.sum(axis=0)
        g = g @ w.T
    return g


def forward(params: ModelParams, p_moving: np.ndarray, q_reference: np.ndarray):
    """Velocities for the moving points, plus a cache for backward.

    ReLU follows every linear layer except the head's final one. The global
    feature of each cloud is the element-wise max over its points, which
    makes the output invariant to reference point order and equivariant to
    moving point order.
    """
    p = np.asarray(p_moving, dtype=np.float64).reshape(-1, INPUT_DIM)
    q = np.asarray(q_reference, dtype=np.float64).reshape(-1, INPUT_DIM)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("empty point cloud")

    cache = {"p": p, "q": q}
    for tag, cloud in (("p", p), ("q", q)):
        l_acts, l_pre = _mlp_forward(params.local, cloud, relu_last=True)
        g_acts, g_pre = _mlp_forward(params.global_, l_acts[-1], relu_last=True)
        feat = g_acts[-1]
        argmax = np.argmax(feat, axis=0)  # ties -> lowest point index
        pooled = feat[argmax, np.arange(feat.shape[1])]
        cache[tag + "_local"] = (l_acts, l_pre)
        cache[tag + "_global"] = (g_acts, g_pre)
        cache[tag + "_argmax"] = argmax
        cache[tag + "_pooled"] = pooled

    local_p = cache["p_local"][0][-1]
    head_in = np.concatenate(
        [local_p,
         np.broadcast_to(cache["p_pooled"], (len(p), len(cache["p_pooled"]))),
         np.broadcast_to(cache["q_pooled"], (len(p), len(cache["q_pooled"])))],
        axis=1)
    h_acts, h_pre = _mlp_forward(params.head, head_in, relu_last=False)
    cache["head"] = (h_acts, h_pre)
    return h_acts[-1], cache


def backward(params: ModelParams, cache: dict, dL_dv: np.ndarray) -> dict:
    """Exact gradients of sum(dL_dv * velocities) w.r.t. every parameter.

    Max-pool routing sends pooled-feature gradients only to each channel's
    argmax point (lowest index on ties).
    """
    dL_dv = np.asarray(dL_dv, dtype=np.float64)
    h_acts, h_pre = cache["head"]
    if dL_dv.shape != h_acts[-1].shape:
        raise ValueError("dL_dv shape mismatch")
    grads = zero_grads(params)
    d_head_in = _mlp_backward(params.head, h_acts, h_pre, dL_dv,
                              relu_last=False, prefix="head", grads=grads)
    n_local = params.local_sizes[-1]
    n_global = params.global_sizes[-1]
    d_local_p = d_head_in[:, :n_local]
    d_pooled = {
        "p": d_head_in[:, n_local:n_local + n_global].sum(axis=0),
        "q": d_head_in[:, n_local + n_global:].sum(axis=0),
    }
    for tag in ("p", "q"):
        g_acts, g_pre = cache[tag + "_global"]
        l_acts, l_pre = cache[tag + "_local"]
        d_feat = np.zeros_like(g_acts[-1])
        argmax = cache[tag + "_argmax"]
        d_feat[argmax, np.arange(len(argmax))] = d_pooled[tag]
        d_local = _mlp_backward(params.global_, g_acts, g_pre, d_feat,
                                relu_last=True, prefix="global", grads=grads)
        if tag == "p":
            d_local = d_local + d_local_p
        _mlp_backward(params.local, l_acts, l_pre, d_local,
                      relu_last=True, prefix="local", grads=grads)
    return grads


def adam_step(params: ModelParams, grads: dict, state: AdamState,
              lr: float = 1e-4) -> None:
    """In-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, arr in params.named_arrays():
        g = grads[name]
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        arr -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
