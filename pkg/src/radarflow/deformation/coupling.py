"""Invertible time-conditioned deformation field built from affine coupling layers.

Each layer rescales and shifts one coordinate (the active axis, cycling
x, y, z) with a scale and shift predicted from the two other coordinates and
a sinusoidal embedding of time. Because the conditioner never sees the
active coordinate, every layer inverts in closed form. The log-scale is
squashed to ``alpha * tanh(.)`` so the per-layer scale stays in
``[exp(-alpha), exp(alpha)]`` for any parameter values.

Coordinates are normalised by a fixed centre and radius before the layers;
times are normalised to ``[0, 1]`` over ``time_range`` (seconds) by the
callers that work with timestamps.
"""

from __future__ import annotations

import numpy as np

N_LAYERS = 6
HIDDEN = 64
N_FREQS = 4
ALPHA = 2.0


def time_embedding(t, n_freqs=N_FREQS) -> np.ndarray:
    """``[sin(2^k π t), cos(2^k π t)]`` for ``k < n_freqs``, shape ``(N, 2 n_freqs)``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    w = np.pi * 2.0 ** np.arange(n_freqs)
    return np.concatenate([np.sin(t * w), np.cos(t * w)], axis=1)


class _LayerCache:
    __slots__ = ("z", "h1", "h2", "th", "es", "a_in", "a_out")


class CouplingField:
    """Stack of affine coupling layers sharing one parameter vector across all times.

    Parameters live in the flat array ``params``; :meth:`layer_params` gives
    named views into it. There are no per-timestamp parameters.
    """

    def __init__(
        self,
        params=None,
        *,
        n_layers=N_LAYERS,
        hidden=HIDDEN,
        n_freqs=N_FREQS,
        alpha=ALPHA,
        center=(0.0, 0.0, 0.0),
        radius=1.0,
        time_range=(0.0, 1.0),
    ):
        self.n_layers = int(n_layers)
        self.hidden = int(hidden)
        self.n_freqs = int(n_freqs)
        self.alpha = float(alpha)
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.radius = float(radius)
        if not self.radius > 0:
            raise ValueError("normalisation radius must be positive")
        self.time_range = (float(time_range[0]), float(time_range[1]))
        if not self.time_range[1] > self.time_range[0]:
            raise ValueError("time_range must be increasing")
        self._shapes = self._layer_shapes()
        size = self.n_layers * sum(int(np.prod(s)) for s in self._shapes.values())
        if params is None:
            params = np.zeros(size)
        params = np.array(params, dtype=np.float64).reshape(-1)
        if params.size != size:
            raise ValueError(f"expected {size} parameters, got {params.size}")
        self.params = params

    # ------------------------------------------------------------------ layout
    @property
    def input_dim(self) -> int:
        return 2 + 2 * self.n_freqs

    def _layer_shapes(self):
        h, d = self.hidden, 2 + 2 * self.n_freqs
        return {"W1": (d, h), "b1": (h,), "W2": (h, h), "b2": (h,), "W3": (h, 2), "b3": (2,)}

    @property
    def n_params(self) -> int:
        return self.params.size

    def layer_params(self, params=None) -> list[dict]:
        """Views of ``params`` (default: own parameters) split per layer."""
        flat = self.params if params is None else params
        out, off = [], 0
        for _ in range(self.n_layers):
            layer = {}
            for name, shape in self._shapes.items():
                n = int(np.prod(shape))
                layer[name] = flat[off : off + n].reshape(shape)
                off += n
            out.append(layer)
        return out

    @staticmethod
    def active_axis(layer: int) -> int:
        return layer % 3

    @staticmethod
    def passive_axes(layer: int) -> list[int]:
        a = layer % 3
        return [i for i in range(3) if i != a]

    @classmethod
    def initialize(cls, *, seed=0, **kwargs) -> "CouplingField":
        """Random hidden weights, zero output layer: the identity map, but trainable."""
        field = cls(**kwargs)
        rng = np.random.default_rng(seed)
        for layer in field.layer_params():
            for name in ("W1", "W2"):
                fan_in = layer[name].shape[0]
                layer[name][...] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=layer[name].shape)
        return field

    @classmethod
    def for_points(cls, points, times, *, seed=0, **kwargs) -> "CouplingField":
        """Field whose normalisation box and time range cover ``points``/``times`` (seconds)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        center = 0.5 * (lo + hi)
        radius = max(0.5 * float(np.max(hi - lo)), 1e-3)
        t = np.asarray(times, dtype=np.float64)
        t0, t1 = float(t.min()), float(t.max())
        if t1 <= t0:
            t1 = t0 + 1.0
        return cls.initialize(seed=seed, center=center, radius=radius, time_range=(t0, t1), **kwargs)

    def copy(self, params=None) -> "CouplingField":
        return CouplingField(
            self.params.copy() if params is None else params,
            n_layers=self.n_layers,
            hidden=self.hidden,
            n_freqs=self.n_freqs,
            alpha=self.alpha,
            center=self.center,
            radius=self.radius,
            time_range=self.time_range,
        )

    def normalize_time(self, t_seconds) -> np.ndarray:
        t0, t1 = self.time_range
        return (np.asarray(t_seconds, dtype=np.float64) - t0) / (t1 - t0)

    # ------------------------------------------------------------- evaluation
    def _conditioner(self, p, z):
        h1 = np.tanh(z @ p["W1"] + p["b1"])
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        o = h2 @ p["W3"] + p["b3"]
        th = np.tanh(o[:, 0])
        return self.alpha * th, o[:, 1], h1, h2, th

    def _run(self, x, t, params, inverse, caches=None):
        layers = self.layer_params(params)
        emb = time_embedding(np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),)), self.n_freqs)
        order = range(self.n_layers - 1, -1, -1) if inverse else range(self.n_layers)
        for l in order:
            a, ps = self.active_axis(l), self.passive_axes(l)
            z = np.concatenate([x[:, ps], emb], axis=1)
            s, shift, h1, h2, th = self._conditioner(layers[l], z)
            a_in = x[:, a].copy()
            x = x.copy()
            if inverse:
                es = np.exp(-s)
                x[:, a] = (x[:, a] - shift) * es
            else:
                es = np.exp(s)
                x[:, a] = x[:, a] * es + shift
            if caches is not None:
                c = _LayerCache()
                c.z, c.h1, c.h2, c.th, c.es = z, h1, h2, th, es
                c.a_in, c.a_out = a_in, x[:, a].copy()
                caches.append((l, inverse, c))
        return x

    def _prep(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        return np.atleast_2d(x).reshape(-1, 3), single

    def forward(self, x, t, params=None) -> np.ndarray:
        """Canonical point(s) to their position at normalised time ``t``."""
        X, single = self._prep(x)
        y = self.center + self.radius * self._run((X - self.center) / self.radius, t, params, inverse=False)
        return y[0] if single else y

    def inverse(self, y, t, params=None) -> np.ndarray:
        """Exact inverse of :meth:`forward` at the same ``t``."""
        Y, single = self._prep(y)
        x = self.center + self.radius * self._run((Y - self.center) / self.radius, t, params, inverse=True)
        return x[0] if single else x

    def warp(self, x, t_i, t_j, params=None) -> np.ndarray:
        """``forward(inverse(x, t_i), t_j)``."""
        X, single = self._prep(x)
        xn = (X - self.center) / self.radius
        yn = self._run(self._run(xn, t_i, params, inverse=True), t_j, params, inverse=False)
        # displacement form: an identity warp returns x bit for bit
        y = X + self.radius * (yn - xn)
        return y[0] if single else y

    # ---------------------------------------------------------- differentiation
    def warp_with_vjp(self, x, t_i, t_j, params=None):
        """Warp a batch and return ``(y, vjp)``.

        ``vjp(grad_y)`` maps ``dL/dy`` of shape ``(N, 3)`` to ``dL/dparams``
        (flat, same layout as :attr:`params`).
        """
        params = self.params if params is None else params
        X = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        caches = []
        xn = (X - self.center) / self.radius
        yn = self._run(self._run(xn, t_i, params, inverse=True, caches=caches), t_j, params, inverse=False, caches=caches)
        y = X + self.radius * (yn - xn)

        def vjp(grad_y):
            grad = np.zeros_like(params)
            gl = self.layer_params(grad)
            layers = self.layer_params(params)
            g = np.asarray(grad_y, dtype=np.float64).reshape(-1, 3) * self.radius
            for l, inverse, c in reversed(caches):
                a, ps = self.active_axis(l), self.passive_axes(l)
                p, gp = layers[l], gl[l]
                ga = g[:, a]
                g = g.copy()
                if inverse:
                    g[:, a] = ga * c.es
                    g_shift = -ga * c.es
                    g_s = -ga * c.a_out
                else:
                    g[:, a] = ga * c.es
                    g_shift = ga
                    g_s = ga * c.a_in * c.es
                g_o = np.column_stack([g_s * self.alpha * (1.0 - c.th**2), g_shift])
                gp["W3"] += c.h2.T @ g_o
                gp["b3"] += g_o.sum(axis=0)
                g_a2 = (g_o @ p["W3"].T) * (1.0 - c.h2**2)
                gp["W2"] += c.h1.T @ g_a2
                gp["b2"] += g_a2.sum(axis=0)
                g_a1 = (g_a2 @ p["W2"].T) * (1.0 - c.h1**2)
                gp["W1"] += c.z.T @ g_a1
                gp["b1"] += g_a1.sum(axis=0)
                g[:, ps] += g_a1 @ p["W1"][:2].T
            return grad

        return y, vjp

    # ------------------------------------------------------------ persistence
    def to_dict(self) -> dict:
        layers = []
        for l, p in enumerate(self.layer_params()):
            entry = {"active_axis": self.active_axis(l)}
            entry.update({k: [float(x) for x in v.ravel()] for k, v in p.items()})
            layers.append(entry)
        return {
            "type": "coupling",
            "n_layers": self.n_layers,
            "hidden": self.hidden,
            "alpha": self.alpha,
            "embedding": {"kind": "sinusoidal", "n_freqs": self.n_freqs},
            "normalization": {"center": [float(x) for x in self.center], "radius": self.radius},
            "time_range": list(self.time_range),
            "layers": layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CouplingField":
        if d.get("type") != "coupling":
            raise ValueError("not a coupling-field document")
        field = cls(
            n_layers=d["n_layers"],
            hidden=d["hidden"],
            n_freqs=d["embedding"]["n_freqs"],
            alpha=d["alpha"],
            center=d["normalization"]["center"],
            radius=d["normalization"]["radius"],
            time_range=d["time_range"],
        )
        if len(d["layers"]) != field.n_layers:
            raise ValueError("layer count mismatch")
        for l, (entry, p) in enumerate(zip(d["layers"], field.layer_params())):
            if entry["active_axis"] != field.active_axis(l):
                raise ValueError(f"layer {l}: unexpected active axis {entry['active_axis']}")
            for k in p:
                p[k][...] = np.asarray(entry[k], dtype=np.float64).reshape(p[k].shape)
        return field
