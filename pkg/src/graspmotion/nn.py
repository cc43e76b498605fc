"""Minimal neural substrate: skip-connected MLPs with manual backprop.

Everything runs in float64 on the CPU.  Forward passes cache activations
for exact reverse-mode gradients; parameter updates go through Adam with
optional global-norm clipping.  Checkpoints use the shared binary
container with magic ``GMKNET1``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import blob
from ._validation import check_finite

LEAKY_SLOPE = 0.01

NET_MAGIC = "GMKNET1"


def _act_forward(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "linear":
        return z
    if kind == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    raise ValueError(f"unknown activation {kind!r}")


def _act_backward(z: np.ndarray, kind: str, da: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return da
    if kind == "leaky_relu":
        return da * np.where(z > 0, 1.0, LEAKY_SLOPE)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class ForwardCache:
    """Activations recorded by :meth:`MlpNetwork.forward` for backprop."""

    acts: list          # acts[0] = input, acts[k+1] = output of layer k
    preacts: list       # pre-activation of each layer
    inputs: list        # concatenated input fed to each layer
    version: int


class MlpNetwork:
    """Fully-connected network with optional concat skip connections.

    ``skips`` maps a layer index to a tuple of earlier activation indices
    (0 = network input, k = output of layer k) whose values are
    concatenated onto that layer's input.
    """

    def __init__(self, weights, biases, activations, skips=None, in_dim=None):
        self.weights = list(weights)
        self.biases = list(biases)
        self.activations = list(activations)
        self.skips = {int(k): tuple(v) for k, v in (skips or {}).items()}
        self.in_dim = int(in_dim if in_dim is not None else self.weights[0].shape[0])
        self._version = 0
        self._check_chain()

    # -- construction ------------------------------------------------------

    @classmethod
    def create(cls, in_dim: int, hidden: list[int], out_dim: int,
               skips: dict[int, tuple[int, ...]] | None = None,
               seed: int = 0) -> "MlpNetwork":
        """Build a network with seeded uniform fan-in initialization."""
        skips = {int(k): tuple(v) for k, v in (skips or {}).items()}
        dims = [in_dim] + list(hidden) + [out_dim]
        rng = np.random.Generator(np.random.PCG64(seed))
        weights, biases, acts = [], [], []
        layer_out = [in_dim]  # activation sizes, index 0 = input
        for li in range(len(dims) - 1):
            d_in = layer_out[li]
            for src in skips.get(li, ()):
                d_in += layer_out[src]
            d_out = dims[li + 1]
            bound = 1.0 / np.sqrt(d_in)
            weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
            biases.append(rng.uniform(-bound, bound, size=d_out))
            acts.append("linear" if li == len(dims) - 2 else "leaky_relu")
            layer_out.append(d_out)
        return cls(weights, biases, acts, skips, in_dim=in_dim)

    def _check_chain(self) -> None:
        sizes = [self.in_dim] + [w.shape[1] for w in self.weights]
        for li, w in enumerate(self.weights):
            expect = sizes[li]
            for src in self.skips.get(li, ()):
                if src > li:
                    raise ValueError(f"skip source {src} is not earlier than layer {li}")
                expect += sizes[src]
            if w.shape[0] != expect:
                raise ValueError(
                    f"layer {li} expects input dim {expect}, weight has {w.shape[0]}")
            if self.biases[li].shape != (w.shape[1],):
                raise ValueError(f"layer {li} bias shape mismatch")
        for w in self.weights:
            check_finite(w, "network weights")

    # -- inference ---------------------------------------------------------

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i][...] = params[2 * i]
            self.biases[i][...] = params[2 * i + 1]
        self._version += 1

    def mark_updated(self) -> None:
        """Invalidate caches after in-place parameter mutation."""
        self._version += 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        """Run the network on a (B, in_dim) batch (or a single vector)."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[1]} != network input dim {self.in_dim}")
        acts = [x]
        preacts = []
        inputs = []
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            parts = [acts[li]] + [acts[src] for src in self.skips.get(li, ())]
            inp = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
            z = inp @ w + b
            acts.append(_act_forward(z, self.activations[li]))
            preacts.append(z)
            inputs.append(inp)
        y = acts[-1]
        cache = ForwardCache(acts=acts, preacts=preacts, inputs=inputs, version=self._version)
        return (y[0] if squeeze else y), cache

    def backward(self, cache: ForwardCache, d_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Exact reverse-mode gradients.

        Args:
            cache: cache from a matching :meth:`forward` call.
            d_out: cotangent of the network output, same shape as the output.

        Returns:
            (grads, d_input) where ``grads`` aligns with :meth:`params`.
        """
        if cache.version != self._version:
            raise ValueError("stale forward cache: parameters changed since forward()")
        d_out = np.asarray(d_out, dtype=np.float64)
        if d_out.ndim == 1:
            d_out = d_out[None, :]
        n_layers = len(self.weights)
        d_acts = [None] * (n_layers + 1)
        d_acts[n_layers] = d_out
        grads: list = [None] * (2 * n_layers)
        for li in range(n_layers - 1, -1, -1):
            da = d_acts[li + 1]
            dz = _act_backward(cache.preacts[li], self.activations[li], da)
            grads[2 * li] = cache.inputs[li].T @ dz
            grads[2 * li + 1] = dz.sum(axis=0)
            d_inp = dz @ self.weights[li].T
            # split the concatenated input gradient back to its sources
            sizes = [cache.acts[li].shape[1]] + [cache.acts[s].shape[1] for s in self.skips.get(li, ())]
            offsets = np.cumsum([0] + sizes)
            pieces = [d_inp[:, offsets[k]:offsets[k + 1]] for k in range(len(sizes))]
            for tag, piece in zip([li] + list(self.skips.get(li, ())), pieces):
                if d_acts[tag] is None:
                    d_acts[tag] = piece.copy()
                else:
                    d_acts[tag] = d_acts[tag] + piece
        return grads, d_acts[0]

    # -- persistence -------------------------------------------------------

    def to_arrays(self, prefix: str = "net") -> dict[str, np.ndarray]:
        out = {}
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{li:02d}"] = w
            out[f"{prefix}.b{li:02d}"] = b
        return out

    def describe(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "layer_dims": [int(w.shape[1]) for w in self.weights],
            "activations": list(self.activations),
            "skips": {str(k): list(v) for k, v in sorted(self.skips.items())},
        }

    @classmethod
    def from_arrays(cls, desc: dict, arrays: dict[str, np.ndarray], prefix: str = "net") -> "MlpNetwork":
        n_layers = len(desc["layer_dims"])
        weights = [arrays[f"{prefix}.w{li:02d}"] for li in range(n_layers)]
        biases = [arrays[f"{prefix}.b{li:02d}"] for li in range(n_layers)]
        skips = {int(k): tuple(v) for k, v in desc.get("skips", {}).items()}
        return cls(weights, biases, desc["activations"], skips, in_dim=desc["in_dim"])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moments plus hyperparameters."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params],
                   step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """One Adam update with bias correction; mutates ``params`` in place."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ValueError("gradient overflow")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def clip_global_norm(grads: list[np.ndarray], max_norm: float = 5.0) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# Gaussian latent utilities
# ---------------------------------------------------------------------------

def reparameterize(mu: np.ndarray, logvar: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Sample ``z = mu + exp(logvar / 2) * noise`` (gradients flow to both)."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = check_finite(logvar, "logvar")
    noise = np.asarray(noise, dtype=np.float64)
    return mu + np.exp(0.5 * logvar) * noise


def reparameterize_backward(logvar: np.ndarray, noise: np.ndarray,
                            d_z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d_mu = np.asarray(d_z, dtype=np.float64)
    d_logvar = d_z * noise * 0.5 * np.exp(0.5 * np.asarray(logvar, dtype=np.float64))
    return d_mu, d_logvar


def kl_standard_normal(mu: np.ndarray, logvar: np.ndarray) -> float:
    """KL divergence of N(mu, exp(logvar)) from the standard normal (>= 0)."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(np.exp(logvar) + mu * mu - 1.0 - logvar))


def kl_standard_normal_grad(mu: np.ndarray, logvar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return mu.copy(), 0.5 * (np.exp(logvar) - 1.0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def basis_hash(basis: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(basis, dtype="<f8").tobytes()).hexdigest()


def save_checkpoint(path, seed: int, nets: dict[str, MlpNetwork],
                    arrays: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Persist networks plus side arrays (BPS basis, loss curves, ...)."""
    meta_out = dict(meta or {})
    meta_out["seed"] = int(seed)
    meta_out["nets"] = {name: net.describe() for name, net in sorted(nets.items())}
    if arrays and "bps_basis" in arrays:
        meta_out["bps_basis_hash"] = basis_hash(arrays["bps_basis"])
    all_arrays = dict(arrays or {})
    for name, net in nets.items():
        all_arrays.update(net.to_arrays(prefix=name))
    blob.write_blob(path, NET_MAGIC, meta_out, all_arrays)


def load_checkpoint(path) -> tuple[dict, dict[str, MlpNetwork], dict[str, np.ndarray]]:
    _, meta, arrays = blob.read_blob(path, NET_MAGIC)
    nets = {}
    for name, desc in meta.get("nets", {}).items():
        nets[name] = MlpNetwork.from_arrays(desc, arrays, prefix=name)
    side = {k: v for k, v in arrays.items()
            if not any(k.startswith(f"{n}.") for n in meta.get("nets", {}))}
    if "bps_basis" in side and meta.get("bps_basis_hash"):
        if basis_hash(side["bps_basis"]) != meta["bps_basis_hash"]:
            raise ValueError("checkpoint BPS basis does not match its recorded hash")
    return meta, nets, side
