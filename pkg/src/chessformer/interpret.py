"""Attention-map statistics, heatmap export and a cross-layer transcoder.

Attention rows are stored in the mover's frame (token 0 = a1 after
canonicalization), as the model sees them.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import chess
import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .data import ExampleSet
from .model import Chessformer

COMPONENTS = ("gab", "dpa", "weights")


# -- attention datasets ----------------------------------------------------------

@dataclass
class AttentionDataset:
    gab: np.ndarray       # (P, L, H, 64, 64) positional bias rows
    dpa: np.ndarray       # (P, L, H, 64, 64) scaled q.k logits
    weights: np.ndarray   # (P, L, H, 64, 64) softmax of their sum
    fens: list[str]

    def rows(self, component: str, post_softmax: bool = False) -> np.ndarray:
        if component not in COMPONENTS:
            raise ValueError(f"component must be one of {COMPONENTS}, got {component!r}")
        if component == "dpa" and post_softmax:
            z = self.dpa - self.dpa.max(-1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(-1, keepdims=True)
        return getattr(self, component)

    def __len__(self) -> int:
        return self.gab.shape[0]


@torch.no_grad()
def collect_attention(model: Chessformer, examples: ExampleSet, batch_size: int = 64) -> AttentionDataset:
    model.eval()
    parts = {"gab": [], "dpa": [], "weights": []}
    for start in range(0, len(examples), batch_size):
        batch = examples.batch(np.arange(start, min(start + batch_size, len(examples))))
        trace = model.run(batch, trace=True).trace
        parts["gab"].append(torch.stack([t.bias for t in trace], 1).numpy())
        parts["dpa"].append(torch.stack([t.dpa_logits for t in trace], 1).numpy())
        parts["weights"].append(torch.stack([t.weights for t in trace], 1).numpy())
    return AttentionDataset(*(np.concatenate(parts[k]) for k in ("gab", "dpa", "weights")),
                            fens=list(examples.fens))


@dataclass
class Consistency:
    mean: float
    pairs: int      # correlations averaged
    skipped: int    # pairs dropped because a row was constant

    def __float__(self) -> float:
        return float(self.mean)


def _pearson(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise correlation of (N, 64) arrays; second output marks usable rows."""
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    xc = x - x.mean(-1, keepdims=True)
    yc = y - y.mean(-1, keepdims=True)
    vx, vy = (xc * xc).sum(-1), (yc * yc).sum(-1)
    ok = (vx > 0) & (vy > 0)
    r = np.zeros(len(x))
    r[ok] = (xc * yc).sum(-1)[ok] / np.sqrt(vx[ok] * vy[ok])
    return np.clip(r, -1.0, 1.0), ok


def consistency_between(ds: AttentionDataset, component: str, pairs: int = 50, seed: int = 0,
                        layers=None, post_softmax: bool = False) -> Consistency:
    """Mean correlation between rows for the same (layer, head, query) in different positions.

    ``pairs`` position pairs are drawn per (layer, head, query square).
    """
    rows = ds.rows(component, post_softmax)
    n_pos, n_layers, n_heads = rows.shape[:3]
    if n_pos < 2:
        raise ValueError("need at least two positions")
    rng = np.random.default_rng(seed)
    total, used, skipped = 0.0, 0, 0
    for layer in (range(n_layers) if layers is None else layers):
        for head in range(n_heads):
            a = rng.integers(0, n_pos, size=(64, pairs))
            b = (a + rng.integers(1, n_pos, size=(64, pairs))) % n_pos   # b != a
            q = np.broadcast_to(np.arange(64)[:, None], a.shape)
            r, ok = _pearson(rows[a, layer, head, q].reshape(-1, 64), rows[b, layer, head, q].reshape(-1, 64))
            total += r[ok].sum()
            used += int(ok.sum())
            skipped += int((~ok).sum())
    if used == 0:
        raise ValueError(f"every sampled {component} row is constant")
    return Consistency(total / used, used, skipped)


def consistency_within(ds: AttentionDataset, component: str, layers=None,
                       post_softmax: bool = False) -> Consistency:
    """Mean correlation between rows of distinct query squares inside one position."""
    rows = ds.rows(component, post_softmax)
    n_pos, n_layers, n_heads = rows.shape[:3]
    iu = np.triu_indices(64, 1)
    total, used, skipped = 0.0, 0, 0
    for layer in (range(n_layers) if layers is None else layers):
        for pos in range(n_pos):
            for head in range(n_heads):
                m = rows[pos, layer, head].astype(np.float64)
                c = m - m.mean(-1, keepdims=True)
                var = (c * c).sum(-1)
                ok = var > 0
                cov = c @ c.T
                with np.errstate(divide="ignore", invalid="ignore"):
                    r = np.clip(cov / np.sqrt(np.outer(var, var)), -1.0, 1.0)
                good = (ok[:, None] & ok[None, :])[iu]
                total += r[iu][good].sum()
                used += int(good.sum())
                skipped += int((~good).sum())
    if used == 0:
        raise ValueError(f"every {component} row is constant")
    return Consistency(total / used, used, skipped)


def export_heatmap(ds: AttentionDataset, position: int, layer: int, head: int, query: int,
                   component: str, out_path, post_softmax: bool = False) -> np.ndarray:
    """Write an 8x8 CSV (rank 8 first, files a-h) and ``<out>.json`` describing it."""
    rows = ds.rows(component, post_softmax)
    p, l, h = rows.shape[:3]
    for name, value, limit in (("position", position, p), ("layer", layer, l), ("head", head, h), ("query", query, 64)):
        if not 0 <= value < limit:
            raise IndexError(f"{name} {value} out of range [0, {limit})")
    grid = rows[position, layer, head, query].reshape(8, 8)[::-1]
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in grid])
    sidecar = {"fen": ds.fens[position], "layer": layer, "head": head, "query_square": chess.SQUARE_NAMES[query],
               "component": component, "post_softmax": post_softmax, "frame": "side to move plays up the board"}
    out_path.with_suffix(out_path.suffix + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return grid


# -- transcoder --------------------------------------------------------------------

class Transcoder(nn.Module):
    """Cross-layer transcoder over the layers in ``layer_ids``.

    Layer i encodes its standardized pre-MLP stream X_i into M features A_i;
    every layer j >= i receives a decoded contribution A_i W_{i->j} + b_{i->j}.
    """

    def __init__(self, d: int, m: int, layer_ids, lam: float = 0.0, c: float = 1.0, seed: int = 0):
        super().__init__()
        self.layer_ids = tuple(int(x) for x in layer_ids)
        k = len(self.layer_ids)
        self.d, self.m, self.lam, self.c = d, m, lam, c
        g = torch.Generator().manual_seed(seed)
        self.enc_w = nn.ParameterList(nn.Parameter(torch.randn(d, m, generator=g) / math.sqrt(d)) for _ in range(k))
        self.enc_b = nn.ParameterList(nn.Parameter(torch.zeros(m)) for _ in range(k))
        self.tau = nn.ParameterList(nn.Parameter(torch.zeros(m)) for _ in range(k))
        self.dec_w = nn.ParameterDict({f"{i}_{j}": nn.Parameter(torch.randn(m, d, generator=g) / math.sqrt(m))
                                       for i in range(k) for j in range(i, k)})
        self.dec_b = nn.ParameterDict({f"{i}_{j}": nn.Parameter(torch.zeros(d)) for i in range(k) for j in range(i, k)})
        # per-dimension standardization of inputs and targets, rows = layers
        self.register_buffer("x_mean", torch.zeros(k, d))
        self.register_buffer("x_std", torch.ones(k, d))
        self.register_buffer("y_mean", torch.zeros(k, d))
        self.register_buffer("y_std", torch.ones(k, d))

    @property
    def k(self) -> int:
        return len(self.layer_ids)

    def standardize(self, raw: list[torch.Tensor], which: str = "x") -> list[torch.Tensor]:
        mean, std = (self.x_mean, self.x_std) if which == "x" else (self.y_mean, self.y_std)
        return [(t - mean[i]) / std[i] for i, t in enumerate(raw)]

    def fit_standardization(self, xs: list[torch.Tensor], ys: list[torch.Tensor], eps: float = 1e-6) -> None:
        with torch.no_grad():
            for i, (x, y) in enumerate(zip(xs, ys)):
                self.x_mean[i] = x.reshape(-1, self.d).mean(0)
                self.x_std[i] = x.reshape(-1, self.d).std(0, unbiased=False).clamp_min(eps)
                self.y_mean[i] = y.reshape(-1, self.d).mean(0)
                self.y_std[i] = y.reshape(-1, self.d).std(0, unbiased=False).clamp_min(eps)

    def feature_norms(self) -> list[torch.Tensor]:
        """pi_i: mean over j >= i of each feature's decoder row norm, shape (M,)."""
        return [torch.stack([self.dec_w[f"{i}_{j}"].norm(dim=1) for j in range(i, self.k)]).mean(0)
                for i in range(self.k)]

    def to_tensors(self) -> tuple[dict, dict]:
        meta = {"d": self.d, "m": self.m, "lam": repr(self.lam), "c": repr(self.c),
                "layers": ",".join(map(str, self.layer_ids))}
        return meta, {k: v.detach() for k, v in self.state_dict().items()}

    @classmethod
    def from_tensors(cls, meta: dict, tensors: dict) -> "Transcoder":
        tc = cls(int(meta["d"]), int(meta["m"]), [int(x) for x in meta["layers"].split(",")],
                 float(meta["lam"]), float(meta["c"]))
        tc.load_state_dict(tensors)
        return tc

    def save(self, path) -> None:
        meta, tensors = self.to_tensors()
        ckpt.save(path, {**meta, "kind": "transcoder"}, tensors)

    @classmethod
    def load(cls, path) -> "Transcoder":
        meta, tensors = ckpt.load(path)
        return cls.from_tensors(meta, tensors)


def transcoder_forward(xs: list[torch.Tensor], tc: Transcoder) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Standardized inputs (K tensors of shape B x T x D) -> (activations A_i, reconstructions Y_hat_j)."""
    if len(xs) != tc.k:
        raise ValueError(f"expected {tc.k} input layers, got {len(xs)}")
    acts = []
    for i, x in enumerate(xs):
        if x.shape[-1] != tc.d:
            raise ValueError(f"layer {i} input has width {x.shape[-1]}, transcoder expects {tc.d}")
        z = x @ tc.enc_w[i] + tc.enc_b[i]
        acts.append(torch.relu(z - tc.tau[i]))
    recon = []
    for j in range(tc.k):
        recon.append(sum(acts[i] @ tc.dec_w[f"{i}_{j}"] + tc.dec_b[f"{i}_{j}"] for i in range(j + 1)))
    return acts, recon


def transcoder_loss(xs, ys, tc: Transcoder) -> dict[str, torch.Tensor]:
    acts, recon = transcoder_forward(xs, tc)
    l_recon = sum(((r - y) ** 2).mean() for r, y in zip(recon, ys)) / tc.k
    norms = tc.feature_norms()
    s = [torch.tanh(tc.c * norms[i] * acts[i]).mean() for i in range(tc.k)]
    l_sparse = tc.lam * sum(s) / tc.k
    return {"recon": l_recon, "sparse": l_sparse, "total": l_recon + l_sparse, "acts": acts, "recon_out": recon}


@torch.no_grad()
def capture_activations(model: Chessformer, examples: ExampleSet, layer_ids, batch_size: int = 64):
    """Pre-MLP residual stream and MLP output at each requested block: K tensors (P, 64, D) each."""
    model.eval()
    xs = [[] for _ in layer_ids]
    ys = [[] for _ in layer_ids]
    for start in range(0, len(examples), batch_size):
        cap: list = []
        model.run(examples.batch(np.arange(start, min(start + batch_size, len(examples)))), capture=cap)
        for slot, layer in enumerate(layer_ids):
            xs[slot].append(cap[layer][0])
            ys[slot].append(cap[layer][1])
    return [torch.cat(x) for x in xs], [torch.cat(y) for y in ys]


def save_activations(path, xs, ys, layer_ids) -> None:
    tensors = {}
    for slot, layer in enumerate(layer_ids):
        tensors[f"x/{layer}"] = xs[slot]
        tensors[f"y/{layer}"] = ys[slot]
    ckpt.save(path, {"kind": "activations", "layers": ",".join(map(str, layer_ids))}, tensors)


def load_activations(path):
    meta, tensors = ckpt.load(path)
    layer_ids = [int(x) for x in meta["layers"].split(",")]
    return [tensors[f"x/{l}"] for l in layer_ids], [tensors[f"y/{l}"] for l in layer_ids], layer_ids


@dataclass
class TranscoderMetrics:
    recon_fraction: float     # squared error over target variance, all layers pooled
    sparsity: float           # share of zero activations
    mean_activation: float    # mean |A| over features, tokens and layers
    losses: list


def transcoder_metrics(tc: Transcoder, xs, ys) -> TranscoderMetrics:
    with torch.no_grad():
        out = transcoder_loss(xs, ys, tc)
        err = sum(((r - y) ** 2).sum() for r, y in zip(out["recon_out"], ys))
        var = sum(((y - y.mean(dim=(0, 1))) ** 2).sum() for y in ys)
        acts = torch.cat([a.flatten() for a in out["acts"]])
        return TranscoderMetrics(float(err / var), float((acts == 0).float().mean()),
                                 float(acts.abs().mean()), [])


def train_transcoder(xs_raw, ys_raw, layer_ids, expansion: int = 8, lam: float = 0.0, c: float = 1.0,
                     lr: float = 5e-5, steps: int = 1000, batch_positions: int = 22, seed: int = 0):
    """Fit a transcoder to captured activations (lists of (P, 64, D) tensors).

    Standardization statistics come from the full capture and are stored in
    the returned transcoder.
    """
    d = xs_raw[0].shape[-1]
    tc = Transcoder(d, expansion * d, layer_ids, lam=lam, c=c, seed=seed)
    tc.fit_standardization(xs_raw, ys_raw)
    xs, ys = tc.standardize(xs_raw, "x"), tc.standardize(ys_raw, "y")
    opt = torch.optim.Adam(tc.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    n = xs[0].shape[0]
    losses = []
    for step in range(steps):
        idx = torch.from_numpy(rng.choice(n, size=min(batch_positions, n), replace=False))
        out = transcoder_loss([x[idx] for x in xs], [y[idx] for y in ys], tc)
        total = out["total"]
        if not torch.isfinite(total):
            raise FloatingPointError(f"non-finite transcoder loss at step {step}")
        opt.zero_grad()
        total.backward()
        opt.step()
        losses.append(total.item())
    metrics = transcoder_metrics(tc, xs, ys)
    metrics.losses = losses
    return tc, metrics


# -- feature attribution --------------------------------------------------------------

@dataclass
class FeatureActivationRecord:
    feature: int
    position: int
    square: str        # board square in the real (uncanonicalized) orientation
    activation: float
    fen: str

    def to_json(self) -> str:
        return json.dumps({"feature": self.feature, "fen": self.fen, "square": self.square,
                           "activation": self.activation, "position": self.position})


@torch.no_grad()
def top_activations(tc: Transcoder, xs_raw, fens: list[str], feature: int, k: int = 10,
                    layer: int = 0) -> list[FeatureActivationRecord]:
    """Top-``k`` (position, square) activations of one feature in transcoder layer slot ``layer``.

    Ties are broken by position id, then token. An empty list means the feature
    never fires on this corpus.
    """
    if not 0 <= feature < tc.m:
        raise ValueError(f"feature {feature} out of range [0, {tc.m})")
    acts, _ = transcoder_forward(tc.standardize(xs_raw, "x"), tc)
    a = acts[layer][..., feature].numpy()          # (P, 64)
    pos, tok = np.nonzero(a > 0)
    vals = a[pos, tok]
    order = np.lexsort((tok, pos, -vals))[:k]
    out = []
    for o in order:
        fen = fens[pos[o]]
        black = fen.split()[1] == "b"
        square = int(tok[o]) ^ 56 if black else int(tok[o])
        out.append(FeatureActivationRecord(feature, int(pos[o]), chess.SQUARE_NAMES[square], float(vals[o]), fen))
    return out
