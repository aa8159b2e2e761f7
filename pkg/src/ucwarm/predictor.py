"""Self-attention commitment predictor in plain numpy with hand-written backprop.

Architecture: linear input embedding plus a learned positional table (zero
initialized), a stack of Pre-LN encoder layers (multi-head self-attention and a
ReLU feed-forward block, each wrapped in a residual), and a two-layer ReLU
classifier mapping every hour to one logit per generator.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import Profiles

LN_EPS = 1e-5
NORM_EPS = 1e-6
CHECKPOINT_VERSION = 1

# reference hyper-parameters of the full-size model; not run at desk scale
FULL_SCALE_PROFILE = {
    "T": 72, "F": 3, "n_gen": 51, "layers": 8, "heads": 64, "cls_hidden": 1024,
    "dropout": 0.05, "pos_weight": 1.5, "weight_decay": 1e-4, "grad_clip": 1.0,
    "batch_size": 1024,
}


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass(frozen=True)
class PredictorConfig:
    T: int = 24
    n_gen: int = 10
    F: int = 3
    d_model: int = 32
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 64
    cls_hidden: int = 64
    dropout: float = 0.05
    pos_weight: float = 1.5
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    lr: float = 3e-3
    epochs: int = 60
    batch_size: int = 32
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


Params = dict  # name -> np.ndarray


@dataclass(frozen=True)
class NormStats:
    mu: np.ndarray
    sigma: np.ndarray
    eps: float = NORM_EPS


@dataclass(frozen=True, eq=False)
class ProbabilityTensor:
    logits: np.ndarray  # (N_g, T)

    @property
    def probs(self) -> np.ndarray:
        return sigmoid(self.logits)

    @classmethod
    def from_probs(cls, probs) -> "ProbabilityTensor":
        p = np.clip(np.asarray(probs, dtype=float), 0.0, 1.0)
        with np.errstate(divide="ignore"):
            return cls(np.log(p) - np.log1p(-p))

    def to_json(self, instance_id: str) -> str:
        return json.dumps({"instance_id": instance_id, "probs": self.probs.tolist()})

    @classmethod
    def from_json(cls, text: str) -> tuple[str, "ProbabilityTensor"]:
        data = json.loads(text)
        return data["instance_id"], cls.from_probs(data["probs"])


# ----------------------------------------------------------------------- numerics

def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    z = np.asarray(z, dtype=float)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def bce_loss(logits, targets, alpha: float = 1.5, weights=None) -> float:
    """Class-weighted binary cross-entropy, mean over all elements.

    Uses -log(sigmoid(z)) = softplus(-z) and -log(1 - sigmoid(z)) = softplus(z).
    Optional ``weights`` mask elements; the mean is then over their total weight.
    """
    z = np.asarray(logits, dtype=float)
    y = np.asarray(targets, dtype=float)
    per = alpha * y * softplus(-z) + (1.0 - y) * softplus(z)
    if weights is None:
        return float(per.mean())
    w = np.broadcast_to(np.asarray(weights, dtype=float), per.shape)
    return float((w * per).sum() / w.sum())


def bce_grad(logits, targets, alpha: float = 1.5, weights=None) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    y = np.asarray(targets, dtype=float)
    s = sigmoid(z)
    g = alpha * y * (s - 1.0) + (1.0 - y) * s
    if weights is None:
        return g / g.size
    w = np.broadcast_to(np.asarray(weights, dtype=float), g.shape)
    return w * g / w.sum()


def fit_norm_stats(profiles: list[Profiles]) -> NormStats:
    X = np.stack([features(p) for p in profiles])
    flat = X.reshape(-1, X.shape[-1])
    return NormStats(mu=flat.mean(axis=0), sigma=flat.std(axis=0))


def features(profiles: Profiles) -> np.ndarray:
    return np.stack([profiles.load, profiles.solar, profiles.wind], axis=-1).astype(float)


def normalize_profiles(profiles: Profiles | np.ndarray, stats: NormStats) -> np.ndarray:
    X = features(profiles) if isinstance(profiles, Profiles) else np.asarray(profiles, float)
    return (X - stats.mu) / (stats.sigma + stats.eps)


# ------------------------------------------------------------------- parameters

def layer_names(l: int) -> list[str]:
    return [f"l{l}.{k}" for k in ("ln1_g", "ln1_b", "Wq", "bq", "Wk", "bk", "Wv", "bv",
                                  "Wo", "bo", "ln2_g", "ln2_b", "W1", "b1", "W2", "b2")]


def init_params(config: PredictorConfig, seed: int | None = None) -> Params:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d, F = config.d_model, config.F

    def lin(n_in, n_out):
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out))

    p: Params = {"W_e": lin(F, d), "b_e": np.zeros(d), "pos": np.zeros((config.T, d))}
    for l in range(config.layers):
        p[f"l{l}.ln1_g"] = np.ones(d)
        p[f"l{l}.ln1_b"] = np.zeros(d)
        for k in ("q", "k", "v", "o"):
            p[f"l{l}.W{k}"] = lin(d, d)
            p[f"l{l}.b{k}"] = np.zeros(d)
        p[f"l{l}.ln2_g"] = np.ones(d)
        p[f"l{l}.ln2_b"] = np.zeros(d)
        p[f"l{l}.W1"] = lin(d, config.ffn_dim)
        p[f"l{l}.b1"] = np.zeros(config.ffn_dim)
        p[f"l{l}.W2"] = lin(config.ffn_dim, d)
        p[f"l{l}.b2"] = np.zeros(d)
    p["C1"] = lin(d, config.cls_hidden)
    p["c1"] = np.zeros(config.cls_hidden)
    p["C2"] = lin(config.cls_hidden, config.n_gen)
    p["c2"] = np.zeros(config.n_gen)
    return p


# ---------------------------------------------------------------------- forward

def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg, db


def _split(x, h):
    B, T, d = x.shape
    return x.reshape(B, T, h, d // h).transpose(0, 2, 1, 3)


def _merge(x):
    B, h, T, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, h * dk)


def forward(params: Params, X, config: PredictorConfig, mode: str = "eval",
            rng: np.random.Generator | None = None, key_mask=None, return_cache: bool = False):
    """Logits of shape (B, N_g, T) for normalized inputs X of shape (B, T, F) or (T, F).

    ``key_mask`` (T,) boolean marks key positions that may be attended to;
    dropout on the feed-forward hidden layer is applied only in train mode.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
    B, T, F = X.shape
    if T != config.T or F != config.F:
        raise ValueError(f"input shape {(T, F)} does not match config {(config.T, config.F)}")
    if mode == "train" and config.dropout > 0 and rng is None:
        raise ValueError("train mode with dropout needs an explicit rng")
    h = config.heads
    scale = 1.0 / math.sqrt(config.d_k)
    cache = {"X": X, "layers": [], "key_mask": key_mask}
    H = X @ params["W_e"] + params["b_e"] + params["pos"]
    for l in range(config.layers):
        P = lambda k: params[f"l{l}.{k}"]  # noqa: E731
        c = {"H_in": H}
        A, c["ln1"] = _ln_forward(H, P("ln1_g"), P("ln1_b"))
        Q = _split(A @ P("Wq") + P("bq"), h)
        K = _split(A @ P("Wk") + P("bk"), h)
        V = _split(A @ P("Wv") + P("bv"), h)
        S = (Q @ K.transpose(0, 1, 3, 2)) * scale
        if key_mask is not None:
            S = np.where(np.asarray(key_mask, bool)[None, None, None, :], S, -np.inf)
        S = S - S.max(axis=-1, keepdims=True)
        E = np.exp(S)
        Pa = E / E.sum(axis=-1, keepdims=True)
        O = _merge(Pa @ V)
        M = O @ P("Wo") + P("bo")
        H1 = H + M
        A2, c["ln2"] = _ln_forward(H1, P("ln2_g"), P("ln2_b"))
        F1p = A2 @ P("W1") + P("b1")
        F1 = np.maximum(F1p, 0.0)
        if mode == "train" and config.dropout > 0:
            keep = (rng.random(F1.shape) >= config.dropout) / (1.0 - config.dropout)
        else:
            keep = None
        F1d = F1 * keep if keep is not None else F1
        H = H1 + F1d @ P("W2") + P("b2")
        c.update(A=A, Q=Q, K=K, V=V, attn=Pa, O=O, H1=H1, A2=A2, F1p=F1p, F1d=F1d, keep=keep)
        cache["layers"].append(c)
    C1p = H @ params["C1"] + params["c1"]
    C1 = np.maximum(C1p, 0.0)
    Z = (C1 @ params["C2"] + params["c2"]).transpose(0, 2, 1)
    cache.update(H_out=H, C1p=C1p, C1=C1)
    out = Z[0] if single else Z
    return (out, cache) if return_cache else out


def backward(params: Params, dZ, cache, config: PredictorConfig) -> Params:
    """Gradients of a scalar with respect to every parameter, given dL/dlogits."""
    g: Params = {}
    h = config.heads
    scale = 1.0 / math.sqrt(config.d_k)
    dZ = np.asarray(dZ)
    if dZ.ndim == 2:
        dZ = dZ[None]
    dZt = dZ.transpose(0, 2, 1)  # (B, T, N_g)
    sum_bt = (0, 1)
    g["C2"] = np.einsum("bti,btj->ij", cache["C1"], dZt)
    g["c2"] = dZt.sum(axis=sum_bt)
    dC1 = dZt @ params["C2"].T
    dC1p = dC1 * (cache["C1p"] > 0)
    g["C1"] = np.einsum("bti,btj->ij", cache["H_out"], dC1p)
    g["c1"] = dC1p.sum(axis=sum_bt)
    dH = dC1p @ params["C1"].T
    for l in reversed(range(config.layers)):
        c = cache["layers"][l]
        P = lambda k: params[f"l{l}.{k}"]  # noqa: E731
        # feed-forward residual
        dF2 = dH
        g[f"l{l}.W2"] = np.einsum("bti,btj->ij", c["F1d"], dF2)
        g[f"l{l}.b2"] = dF2.sum(axis=sum_bt)
        dF1d = dF2 @ P("W2").T
        dF1 = dF1d * c["keep"] if c["keep"] is not None else dF1d
        dF1p = dF1 * (c["F1p"] > 0)
        g[f"l{l}.W1"] = np.einsum("bti,btj->ij", c["A2"], dF1p)
        g[f"l{l}.b1"] = dF1p.sum(axis=sum_bt)
        dA2 = dF1p @ P("W1").T
        dH1_ln, g[f"l{l}.ln2_g"], g[f"l{l}.ln2_b"] = _ln_backward(dA2, P("ln2_g"), c["ln2"])
        dH1 = dH + dH1_ln
        # attention residual
        dM = dH1
        g[f"l{l}.Wo"] = np.einsum("bti,btj->ij", c["O"], dM)
        g[f"l{l}.bo"] = dM.sum(axis=sum_bt)
        dO = _split(dM @ P("Wo").T, h)
        Pa, Q, K, V = c["attn"], c["Q"], c["K"], c["V"]
        dPa = dO @ V.transpose(0, 1, 3, 2)
        dV = Pa.transpose(0, 1, 3, 2) @ dO
        dS = Pa * (dPa - np.sum(dPa * Pa, axis=-1, keepdims=True)) * scale
        dQ = dS @ K
        dK = dS.transpose(0, 1, 3, 2) @ Q
        dA = np.zeros_like(c["A"])
        for name, dproj in (("q", dQ), ("k", dK), ("v", dV)):
            dproj = _merge(dproj)
            g[f"l{l}.W{name}"] = np.einsum("bti,btj->ij", c["A"], dproj)
            g[f"l{l}.b{name}"] = dproj.sum(axis=sum_bt)
            dA += dproj @ P(f"W{name}").T
        dH_ln, g[f"l{l}.ln1_g"], g[f"l{l}.ln1_b"] = _ln_backward(dA, P("ln1_g"), c["ln1"])
        dH = dH1 + dH_ln
    g["pos"] = dH.sum(axis=0)
    g["b_e"] = dH.sum(axis=sum_bt)
    g["W_e"] = np.einsum("bti,btj->ij", cache["X"], dH)
    return g


def loss_and_gradients(params: Params, X, Y, config: PredictorConfig, mode: str = "eval",
                       rng: np.random.Generator | None = None, weights=None, key_mask=None):
    """Weighted BCE of the batch and its gradient for every parameter tensor."""
    Z, cache = forward(params, X, config, mode=mode, rng=rng, key_mask=key_mask, return_cache=True)
    loss = bce_loss(Z, Y, config.pos_weight, weights)
    dZ = bce_grad(Z, Y, config.pos_weight, weights)
    return loss, backward(params, dZ, cache, config)


# -------------------------------------------------------------------- training

def one_cycle_lr(step: int, total: int, lr_max: float, warmup: float = 0.3,
                 div: float = 25.0, final_div: float = 1e4) -> float:
    """Linear warm-up from lr/div to lr over ``warmup`` of the steps, then cosine to lr/final_div."""
    lr0, lr_end = lr_max / div, lr_max / final_div
    n_warm = max(1, int(round(warmup * total)))
    if step < n_warm:
        return lr0 + (lr_max - lr0) * step / n_warm
    rest = max(1, total - n_warm)
    frac = min(1.0, (step - n_warm) / rest)
    return lr_end + (lr_max - lr_end) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamW:
    lr: float
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: Params, grads: Params, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            theta = params[k]
            theta *= 1.0 - lr * self.weight_decay
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            theta -= lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_global_norm(grads: Params, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm > 0:
        f = max_norm / norm
        for g in grads.values():
            g *= f
    return norm


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)


def element_accuracy(params: Params, X, Y, config: PredictorConfig, tau: float | None = None) -> float:
    if len(X) == 0:
        return float("nan")
    tau = config.threshold if tau is None else tau
    Z = forward(params, X, config)
    return float(np.mean((sigmoid(Z) > tau) == (np.asarray(Y) > 0.5)))


def train(X_train, Y_train, config: PredictorConfig, X_val=None, Y_val=None,
          params: Params | None = None, steps: int | None = None) -> tuple[Params, TrainLog]:
    """AdamW with decoupled decay, global-norm clipping and a one-cycle schedule.

    ``steps`` overrides the epoch count with an exact number of optimizer steps.
    """
    X_train = np.asarray(X_train, float)
    Y_train = np.asarray(Y_train, float)
    rng = np.random.default_rng(config.seed)
    params = init_params(config) if params is None else {k: v.copy() for k, v in params.items()}
    n = len(X_train)
    bs = min(config.batch_size, n)
    per_epoch = max(1, math.ceil(n / bs))
    total = steps if steps is not None else per_epoch * config.epochs
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    log = TrainLog()
    step = 0
    while step < total:
        order = rng.permutation(n)
        losses = []
        for b in range(per_epoch):
            if step >= total:
                break
            idx = order[b * bs:(b + 1) * bs]
            loss, grads = loss_and_gradients(params, X_train[idx], Y_train[idx], config,
                                             mode="train", rng=rng)
            if not math.isfinite(loss):
                raise NonFiniteLoss(step)
            clip_global_norm(grads, config.grad_clip)
            lr = one_cycle_lr(step, total, config.lr)
            opt.step(params, grads, lr)
            log.step_loss.append(loss)
            log.lrs.append(lr)
            losses.append(loss)
            step += 1
        log.epoch_loss.append(float(np.mean(losses)))
        if X_val is not None and len(X_val):
            log.val_accuracy.append(element_accuracy(params, X_val, Y_val, config))
    return params, log


# ------------------------------------------------------------------- inference

def predict_logits(params: Params, profiles: Profiles, stats: NormStats,
                   config: PredictorConfig) -> ProbabilityTensor:
    return ProbabilityTensor(forward(params, normalize_profiles(profiles, stats), config))


def threshold_schedule(probs: ProbabilityTensor | np.ndarray, tau: float = 0.5) -> np.ndarray:
    p = probs.probs if isinstance(probs, ProbabilityTensor) else np.asarray(probs)
    return (p > tau).astype(np.int8)


def predict(params: Params, profiles: Profiles, stats: NormStats, config: PredictorConfig,
            tau: float | None = None) -> tuple[np.ndarray, ProbabilityTensor]:
    """Commitment u = 1[sigmoid(z) > tau] and the probability tensor behind it."""
    pt = predict_logits(params, profiles, stats, config)
    return threshold_schedule(pt, config.threshold if tau is None else tau), pt


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(path: str | Path, params: Params, config: PredictorConfig,
                    stats: NormStats | None = None) -> None:
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "shapes": {k: list(v.shape) for k, v in params.items()},
    }
    arrays = {f"param/{k}": v for k, v in params.items()}
    if stats is not None:
        arrays["stats/mu"] = stats.mu
        arrays["stats/sigma"] = stats.sigma
        manifest["norm_eps"] = stats.eps
    buf = io.BytesIO()
    np.savez(buf, __manifest__=np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8),
             **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[Params, PredictorConfig, NormStats | None]:
    with np.load(path) as z:
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        if manifest["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['version']}")
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        stats = None
        if "stats/mu" in z.files:
            stats = NormStats(z["stats/mu"].copy(), z["stats/sigma"].copy(), manifest["norm_eps"])
    for k, shape in manifest["shapes"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"shape mismatch for {k}")
    return params, PredictorConfig(**manifest["config"]), stats


def tune_threshold(score_fn, grid=(0.3, 0.4, 0.5, 0.6, 0.7)) -> float:
    """Grid-search tau; ``score_fn(tau)`` returns a value to minimize (e.g. median O.R.)."""
    scores = [(score_fn(t), t) for t in grid]
    return min(scores)[1]
