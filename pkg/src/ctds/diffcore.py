"""Feed-forward networks with exact input derivatives and parameter gradients.

A network maps ``(x, t[, temperature])`` through optional Gaussian Fourier
embeddings and a SiLU MLP.  The forward pass carries, alongside each
activation, its tangents with respect to the chosen inputs, so the output
comes with its exact Jacobian in ``x`` and partials in ``t`` and the
temperature.  The reverse pass then accumulates parameter gradients through
that augmented computation, which is what a loss built from input
derivatives (divergences, time partials) needs.

Values and tangents are stacked along axis 1 of a ``(batch, 1 + K, width)``
array: slot 0 is the value, slots ``1..K`` the tangents.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

GROUPS = ("x", "t", "temp")


def silu(h):
    return h / (1.0 + np.exp(-h))


def silu_derivs(h):
    """Return ``(silu(h), silu'(h), silu''(h))`` in closed form."""
    s = 1.0 / (1.0 + np.exp(-h))
    d1 = s * (1.0 + h * (1.0 - s))
    d2 = s * (1.0 - s) * (2.0 + h * (1.0 - 2.0 * s))
    return h * s, d1, d2


@dataclass(frozen=True)
class FourierMap:
    """Random Fourier features ``[cos(Wv), sin(Wv), v]`` with frozen ``W``."""

    in_dim: int
    num_features: int
    scale: float
    seed: int
    frequencies: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def create(cls, in_dim, num_features, scale, seed):
        if scale <= 0:
            raise ValueError("frequency scale must be positive")
        rng = np.random.default_rng(seed)
        w = scale * rng.standard_normal((num_features, in_dim))
        w.setflags(write=False)
        return cls(in_dim, num_features, float(scale), int(seed), w)

    @classmethod
    def from_frequencies(cls, frequencies, scale, seed):
        w = np.array(frequencies, dtype=np.float64)
        w.setflags(write=False)
        return cls(w.shape[1], w.shape[0], float(scale), int(seed), w)

    @property
    def out_dim(self):
        return 2 * self.num_features + self.in_dim


def fourier_embed(v, fmap: FourierMap):
    """Embed ``v`` of shape ``(B, in_dim)``; return features and their Jacobian.

    The Jacobian has shape ``(B, out_dim, in_dim)``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[-1] != fmap.in_dim:
        raise ValueError(f"expected input dimension {fmap.in_dim}, got {v.shape[-1]}")
    w = fmap.frequencies
    arg = v @ w.T
    c, s = np.cos(arg), np.sin(arg)
    feats = np.concatenate([c, s, v], axis=1)
    eye = np.broadcast_to(np.eye(fmap.in_dim), (v.shape[0], fmap.in_dim, fmap.in_dim))
    jac = np.concatenate([-s[:, :, None] * w, c[:, :, None] * w, eye], axis=1)
    return feats, jac


@dataclass(frozen=True)
class NetSpec:
    """Architecture of one network.

    ``depth`` is the number of affine layers (``depth - 1`` SiLU hidden
    layers).  ``features`` maps an input group (``"x"``, ``"t"``, ``"temp"``) to
    ``(num_features, frequency_scale)``; groups absent from it are fed raw.
    """

    x_dim: int
    hidden_width: int
    depth: int
    output_dim: int
    temperature: bool = False
    features: dict = field(default_factory=dict)
    activation: str = "silu"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.hidden_width < 1 or self.output_dim < 1 or self.x_dim < 0:
            raise ValueError("dimensions must be positive")
        if self.activation != "silu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        for g in self.features:
            if g not in GROUPS:
                raise ValueError(f"unknown input group {g!r}")

    def group_dims(self):
        dims = {}
        if self.x_dim:
            dims["x"] = self.x_dim
        dims["t"] = 1
        if self.temperature:
            dims["temp"] = 1
        return dims

    def to_dict(self):
        return {
            "x_dim": self.x_dim,
            "hidden_width": self.hidden_width,
            "depth": self.depth,
            "output_dim": self.output_dim,
            "temperature": self.temperature,
            "features": {k: list(v) for k, v in self.features.items()},
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["features"] = {k: tuple(v) for k, v in d.get("features", {}).items()}
        return cls(**d)


@dataclass
class AugmentedActivation:
    """Network output with its exact input derivatives.

    ``jac_x`` is ``(B, out, x_dim)``; ``d_dt`` and ``d_dtemp`` are ``(B, out)``.
    ``div_x`` is only set when the output dimension equals ``x_dim``.
    Blocks that were not requested are ``None``.
    """

    value: np.ndarray
    jac_x: np.ndarray | None = None
    div_x: np.ndarray | None = None
    d_dt: np.ndarray | None = None
    d_dtemp: np.ndarray | None = None


class Tape:
    """Cached augmented forward pass; feeds exactly one reverse pass."""

    def __init__(self, net, params, layers, last_input, wrt):
        self.net = net
        self.params = params
        self.layers = layers
        self.last_input = last_input
        self.wrt = wrt
        self.consumed = False


class Net:
    """An MLP whose parameters live in one flat float64 vector."""

    def __init__(self, spec: NetSpec, fourier: dict, params=None):
        self.spec = spec
        self.fourier = dict(fourier)
        dims = spec.group_dims()
        for g, fm in self.fourier.items():
            if fm.in_dim != dims[g]:
                raise ValueError(f"Fourier map for {g!r} has wrong input dimension")
        in_dim = sum(self.fourier[g].out_dim if g in self.fourier else n for g, n in dims.items())
        # depth counts affine layers; depth 1 is a plain linear map
        widths = [in_dim] + [spec.hidden_width] * (spec.depth - 1) + [spec.output_dim]
        self.layout = []
        offset = 0
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            self.layout.append((offset, n_out, n_in))
            offset += n_out * n_in + n_out
        self.size = offset
        if params is None:
            params = np.zeros(self.size)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.size,):
            raise ValueError(f"parameter vector has length {params.size}, expected {self.size}")
        self.params = params

    @classmethod
    def create(cls, spec: NetSpec, seed, zero_last=False):
        """Fan-in scaled uniform initialisation; Fourier frequencies from the same seed."""
        ss = np.random.SeedSequence(seed)
        fm_seed, w_seed = ss.spawn(2)
        fourier = {}
        dims = spec.group_dims()
        for i, g in enumerate(GROUPS):
            if g in spec.features and g in dims:
                num, scale = spec.features[g]
                fseed = int(fm_seed.generate_state(len(GROUPS))[i])
                fourier[g] = FourierMap.create(dims[g], int(num), scale, fseed)
        net = cls(spec, fourier)
        rng = np.random.default_rng(w_seed)
        for i, (off, n_out, n_in) in enumerate(net.layout):
            bound = 1.0 / np.sqrt(n_in)
            n = n_out * n_in + n_out
            if zero_last and i == len(net.layout) - 1:
                continue
            net.params[off:off + n] = rng.uniform(-bound, bound, n)
        return net

    def weights(self, params=None):
        p = self.params if params is None else params
        out = []
        for off, n_out, n_in in self.layout:
            w = p[off:off + n_out * n_in].reshape(n_out, n_in)
            b = p[off + n_out * n_in:off + n_out * n_in + n_out]
            out.append((w, b))
        return out

    def copy(self):
        return Net(self.spec, self.fourier, self.params.copy())

    def __call__(self, x=None, t=None, temp=None):
        return forward_augmented(self, x, t, temp, wrt=())[0].value


def _matmul(a, w):
    """``a @ w`` over the last axis of a stacked ``(B, S, n)`` array as one GEMM."""
    return (a.reshape(-1, a.shape[-1]) @ w).reshape(a.shape[:-1] + (w.shape[1],))


def _as_batch(v, batch):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        v = np.full(batch, float(v))
    return v.reshape(batch, -1)


def _input_stack(net, inputs, wrt):
    """Stack the embedded inputs with their tangents: ``(B, 1 + K, in_dim)``."""
    dims = net.spec.group_dims()
    batch = None
    for g in dims:
        v = np.asarray(inputs[g])
        if v.ndim >= 1:
            batch = v.shape[0]
            break
    if batch is None:
        batch = 1
    tangent_groups = [(g, c) for g in wrt if g in dims for c in range(dims[g])]
    n_tan = len(tangent_groups)
    blocks = []
    for g, n in dims.items():
        v = inputs[g]
        if v is None:
            raise ValueError(f"network requires input {g!r}")
        v = _as_batch(v, batch)
        if v.shape[1] != n:
            raise ValueError(f"input {g!r} has dimension {v.shape[1]}, expected {n}")
        if g in net.fourier:
            feats, jac = fourier_embed(v, net.fourier[g])
        else:
            feats = v
            jac = np.broadcast_to(np.eye(n), (batch, n, n))
        block = np.zeros((batch, 1 + n_tan, feats.shape[1]))
        block[:, 0] = feats
        for k, (tg, c) in enumerate(tangent_groups):
            if tg == g:
                block[:, 1 + k] = jac[:, :, c]
        blocks.append(block)
    return np.concatenate(blocks, axis=2), tangent_groups


def forward_augmented(net: Net, x=None, t=None, temp=None, wrt=("x", "t", "temp"), params=None):
    """Evaluate ``net`` and the exact derivatives of its output.

    ``wrt`` selects which input derivatives to propagate; fewer tangents
    make the pass cheaper.  Returns ``(AugmentedActivation, Tape)``.
    """
    p = net.params if params is None else params
    wrt = tuple(g for g in GROUPS if g in wrt)
    a, tangent_groups = _input_stack(net, {"x": x, "t": t, "temp": temp}, wrt)
    layers = []
    weights = net.weights(p)
    for i, (w, b) in enumerate(weights[:-1]):
        h = _matmul(a, w.T)
        h[:, 0] += b
        if not np.isfinite(h).all():
            raise FloatingPointError(f"non-finite pre-activation in hidden layer {i}")
        s, d1, d2 = silu_derivs(h[:, 0])
        nxt = np.empty_like(h)
        nxt[:, 0] = s
        nxt[:, 1:] = d1[:, None, :] * h[:, 1:]
        layers.append((a, h, d1, d2))
        a = nxt
    w, b = weights[-1]
    y = _matmul(a, w.T)
    y[:, 0] += b
    if not np.isfinite(y).all():
        raise FloatingPointError("non-finite output in final layer")

    act = AugmentedActivation(value=y[:, 0])
    dims = net.spec.group_dims()
    pos = {}
    for k, (g, c) in enumerate(tangent_groups):
        pos.setdefault(g, []).append(1 + k)
    if "x" in pos:
        act.jac_x = np.moveaxis(y[:, pos["x"]], 1, 2)
        if net.spec.output_dim == dims.get("x"):
            act.div_x = np.trace(act.jac_x, axis1=1, axis2=2)
    if "t" in pos:
        act.d_dt = y[:, pos["t"][0]]
    if "temp" in pos:
        act.d_dtemp = y[:, pos["temp"][0]]
    tape = Tape(net, p, layers, a, (tangent_groups, pos))
    return act, tape


def backward_params(tape: Tape, g_value=None, g_jac_x=None, g_dt=None, g_dtemp=None):
    """Reverse-accumulate parameter gradients through an augmented forward pass.

    The ``g_*`` arguments are the derivatives of a scalar loss with respect
    to the corresponding blocks of the ``AugmentedActivation`` (same shapes).
    A ``div_x`` cotangent ``g`` is passed as ``g_jac_x = g[:, None, None] * I``.
    """
    if tape.consumed:
        raise RuntimeError("tape has already been consumed by a backward pass")
    tape.consumed = True
    net = tape.net
    tangent_groups, pos = tape.wrt
    a = tape.last_input
    batch, slots, _ = a.shape
    out = net.spec.output_dim
    gy = np.zeros((batch, slots, out))
    if g_value is not None:
        gy[:, 0] = np.asarray(g_value).reshape(batch, out)
    for name, g in (("x", g_jac_x), ("t", g_dt), ("temp", g_dtemp)):
        if g is None:
            continue
        if name not in pos:
            raise ValueError(f"derivative block {name!r} was not recorded on this tape")
        if name == "x":
            gy[:, pos["x"]] += np.moveaxis(np.asarray(g), 2, 1)
        else:
            gy[:, pos[name][0]] += np.asarray(g).reshape(batch, out)

    grad = np.zeros(net.size)
    weights = net.weights(tape.params)
    layout = net.layout

    def put(i, gw, gb):
        off, n_out, n_in = layout[i]
        grad[off:off + n_out * n_in] = gw.ravel()
        grad[off + n_out * n_in:off + n_out * n_in + n_out] = gb

    last = len(weights) - 1
    w = weights[last][0]
    put(last, gy.reshape(-1, out).T @ a.reshape(-1, a.shape[2]), gy[:, 0].sum(0))
    ga = _matmul(gy, w)
    for i in range(last - 1, -1, -1):
        a_in, h, d1, d2 = tape.layers[i]
        gh = np.empty_like(h)
        gh[:, 1:] = d1[:, None, :] * ga[:, 1:]
        gh[:, 0] = d1 * ga[:, 0] + d2 * np.einsum("bkn,bkn->bn", ga[:, 1:], h[:, 1:])
        n = h.shape[2]
        put(i, gh.reshape(-1, n).T @ a_in.reshape(-1, a_in.shape[2]), gh[:, 0].sum(0))
        if i:
            ga = _matmul(gh, weights[i][0])
    return grad


# --- checkpoints -----------------------------------------------------------

FORMAT_VERSION = 1
MAGIC = b"CTDSCKPT"


def _net_header(net, name, arrays):
    arrays[f"{name}/params"] = net.params
    fm = {}
    for g, m in net.fourier.items():
        arrays[f"{name}/fourier/{g}"] = m.frequencies
        fm[g] = {"seed": m.seed, "scale": m.scale}
    return {"spec": net.spec.to_dict(), "fourier": fm}


def save_checkpoint(path, nets: dict, meta=None):
    """Write nets (plus free-form JSON ``meta``) to a self-describing binary file.

    Layout: magic, u64 header length, UTF-8 JSON header, raw little-endian
    float64 arrays.  Output bytes depend only on the contents.
    """
    arrays = {}
    header = {"format_version": FORMAT_VERSION, "nets": {}, "meta": meta or {}, "arrays": []}
    for name in sorted(nets):
        header["nets"][name] = _net_header(nets[name], name, arrays)
    offset = 0
    blobs = []
    for key in sorted(arrays):
        arr = np.ascontiguousarray(arrays[key], dtype="<f8")
        header["arrays"].append({"name": key, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Return ``(nets, meta)`` from a file written by :func:`save_checkpoint`."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + hlen])
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    body = start + hlen
    arrays = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        a = np.frombuffer(data, dtype="<f8", count=n, offset=body + entry["offset"])
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(np.float64)
    nets = {}
    for name, h in header["nets"].items():
        spec = NetSpec.from_dict(h["spec"])
        fourier = {
            g: FourierMap.from_frequencies(arrays[f"{name}/fourier/{g}"], m["scale"], m["seed"])
            for g, m in h["fourier"].items()
        }
        nets[name] = Net(spec, fourier, arrays[f"{name}/params"])
    return nets, header["meta"]
