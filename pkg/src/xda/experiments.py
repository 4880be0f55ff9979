"""Multi-run drivers: ablation table, lambda sweep and attention dumps."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from xda import autodiff as ad
from xda import checkpoint as ckpt
from xda.config import ABLATION_ROWS, LAMBDA_SWEEP, TrainConfig
from xda.synthdata import gen_scene, write_pgm
from xda.train import model_from_params, train

log = logging.getLogger(__name__)

N_SEEDS = 3


@dataclass
class TableRow:
    name: str
    config: TrainConfig
    seeds: list
    mious: list

    @property
    def mean(self):
        return float(np.mean(self.mious))

    @property
    def std(self):
        return float(np.std(self.mious))


def ablation_configs(base):
    return [(name, base.with_losses(**toggles)) for name, toggles in ABLATION_ROWS.items()]


def sweep_configs(base, lambdas=LAMBDA_SWEEP):
    return [(repr(lam), replace(base, lambda_attn=lam)) for lam in lambdas]


def _slug(name):
    keep = "".join(c if c.isalnum() else "_" for c in name).strip("_")
    return keep or "row"


def run_table(named_configs, out_dir=None, n_seeds=N_SEEDS, progress=None):
    """Train every (name, config) for seeds base.seed .. base.seed + n_seeds - 1."""
    rows = []
    for name, cfg in named_configs:
        seeds = [cfg.seed + k for k in range(n_seeds)]
        mious = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            run_dir = os.path.join(out_dir, _slug(name), f"seed{seed}") if out_dir else None
            _, record = train(run_cfg, run_dir, progress)
            mious.append(record.final_miou)
            log.info("%s seed %d: mIoU %.4f", name, seed, record.final_miou)
        rows.append(TableRow(name, cfg, seeds, mious))
    return rows


def write_table(path, rows, key="row"):
    n = max(len(r.seeds) for r in rows)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([key, "mean", "std", *(f"seed_{k}" for k in range(n))])
        for r in rows:
            w.writerow([r.name, repr(r.mean), repr(r.std), *(repr(m) for m in r.mious)])


def read_table(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -- attention dumps ------------------------------------------------------------

ATTN_VIEWS = ("self_source", "self_target", "cross_s2t", "cross_t2s")


def pixel_token(config, x, y):
    """Token index of image pixel (x, y); x is the column."""
    c = config.model
    if not (0 <= x < c.width and 0 <= y < c.height):
        raise ValueError(f"pixel ({x}, {y}) lies outside the {c.width}x{c.height} image")
    return (y // c.patch) * c.grid[1] + x // c.patch


def attention_rows(model, x_s, x_t, token):
    """Attention row of ``token`` per view, layer and head: {view: (L, H, N_k)}.

    cross_s2t takes queries from the source image over target keys;
    cross_t2s the reverse.
    """
    with ad.no_grad():
        f_s = model.forward(x_s)
        f_t = model.forward(x_t)
        _, m_s2t = model.forward_cross(None, x_t, query_features=f_s.features)
        _, m_t2s = model.forward_cross(None, x_s, query_features=f_t.features)
    views = {"self_source": f_s.maps, "self_target": f_t.maps, "cross_s2t": m_s2t, "cross_t2s": m_t2s}
    return {k: np.stack([m.scores.data[:, token, :] for m in maps]) for k, maps in views.items()}


def heatmap(row, grid):
    """Key-grid map scaled so its maximum is 1."""
    h = np.asarray(row, dtype=np.float64).reshape(grid)
    top = h.max()
    return h / top if top > 0 else h


def dump_attention(checkpoint_path, scene_seed, pixel, out_dir):
    """Write one PGM per view, layer and head; returns {filename: heatmap}."""
    config, params = ckpt.load(checkpoint_path)
    model = model_from_params(config, params)
    token = pixel_token(config, *pixel)
    x_s = gen_scene("source", scene_seed, config.data).image.astype(model.dtype)
    x_t = gen_scene("target", scene_seed, config.data).image.astype(model.dtype)
    rows = attention_rows(model, x_s, x_t, token)
    os.makedirs(out_dir, exist_ok=True)
    written = {}
    for view, arr in rows.items():
        for layer in range(arr.shape[0]):
            for head in range(arr.shape[1]):
                hm = heatmap(arr[layer, head], config.model.grid)
                name = f"{view}_L{layer}_H{head}.pgm"
                write_pgm(os.path.join(out_dir, name), np.round(hm * 255).astype(np.uint8))
                written[name] = hm
    return written
