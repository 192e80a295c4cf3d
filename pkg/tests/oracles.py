"""Slow, obviously-correct reference implementations used as test oracles."""

import itertools

import numpy as np


def nearest_grid_index(u: float, lo: int, hi: int) -> int:
    """Exhaustive scan over every integer in [lo, hi]; ties go to the even integer."""
    best, best_d = None, None
    for q in range(lo, hi + 1):
        d = abs(u - q)
        if best is None or d < best_d or (d == best_d and q % 2 == 0):
            best, best_d = q, d
    return best


def nearest_grid_batch(u: np.ndarray, lo: int, hi: int, chunk: int = 64) -> np.ndarray:
    """Vectorised exhaustive scan: distance to every grid integer, minimum taken, ties to even."""
    grid = np.arange(lo, hi + 1, dtype=np.float64)
    out = np.empty(len(u), dtype=np.float64)
    for i in range(0, len(u), chunk):
        d = np.abs(u[i:i + chunk, None] - grid[None, :])
        m = d.min(axis=1, keepdims=True)
        hit = d == m
        # among the (at most two) minimisers prefer the even one
        even = hit & (np.mod(grid, 2) == 0)[None, :]
        pick = np.where(even.any(axis=1), np.argmax(even, axis=1), np.argmax(hit, axis=1))
        out[i:i + chunk] = grid[pick]
    return out


class MacCounter:
    def __init__(self):
        self.macs = 0


def naive_conv2d(x, w, b, stride=1, padding=0, counter=None):
    """Direct seven-loop convolution in float64."""
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    y = np.zeros((n, o, ho, wo))
    for bi, oc, i, j in itertools.product(range(n), range(o), range(ho), range(wo)):
        acc = 0.0 if b is None else float(b[oc])
        for cc in range(c):
            for u in range(kh):
                for v in range(kw):
                    acc += xp[bi, cc, i * stride + u, j * stride + v] * w[oc, cc, u, v]
                    if counter is not None and bi == 0:
                        counter.macs += 1
        y[bi, oc, i, j] = acc
    return y


def naive_fc(x, w, b, counter=None):
    x = x.reshape(x.shape[0], -1)
    y = np.zeros((x.shape[0], w.shape[0]))
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            acc = 0.0 if b is None else float(b[o])
            for i in range(w.shape[1]):
                acc += x[n, i] * w[o, i]
                if counter is not None and n == 0:
                    counter.macs += 1
            y[n, o] = acc
    return y


def naive_forward(g, x, counter=None):
    """Reference float forward over a graph with BN and pass-through Quant nodes."""
    vals = {}
    for n in g.nodes:
        ins = [vals[s] for s in n.inputs]
        a = n.attrs
        t = lambda name: None if name is None else g.tensors[name].astype(np.float64)  # noqa: E731
        if n.kind == "Input":
            y = np.asarray(x, dtype=np.float64)
        elif n.kind == "Conv2D":
            y = naive_conv2d(ins[0], t(n.weight), t(n.bias), a.get("stride", 1), a.get("padding", 0), counter)
        elif n.kind == "FullyConnected":
            y = naive_fc(ins[0], t(n.weight), t(n.bias), counter)
        elif n.kind == "BatchNorm":
            gm, bt, mu, var = (t(n.params[p])[None, :, None, None] for p in ("gamma", "beta", "mean", "var"))
            y = (ins[0] - mu) / np.sqrt(var + a.get("eps", 1e-5)) * gm + bt
        elif n.kind == "ReLU":
            y = np.where(ins[0] > 0, ins[0], 0.0)
        elif n.kind == "Add":
            y = ins[0] + ins[1]
        elif n.kind == "AvgPool" and a.get("global"):
            y = ins[0].mean(axis=(2, 3), keepdims=True)
        elif n.kind in ("Quant", "Output"):
            y = ins[0]
        else:
            raise NotImplementedError(n.kind)
        vals[n.id] = y
    return vals[g.output_node.id].reshape(len(x), -1)


def pareto_brute(costs, accs, chunk=512):
    """Indices not dominated by any other point, by the O(n^2) definition."""
    c = np.asarray(costs, dtype=np.float64)
    a = np.asarray(accs, dtype=np.float64)
    keep = []
    for i in range(0, len(c), chunk):
        ci = c[i:i + chunk, None]
        ai = a[i:i + chunk, None]
        dominated = ((c[None, :] <= ci) & (a[None, :] >= ai) & ((c[None, :] < ci) | (a[None, :] > ai))).any(axis=1)
        keep.extend(int(j) for j in np.nonzero(~dominated)[0] + i)
    return sorted(keep, key=lambda j: (c[j], j))
