"""Training loop, optimizer and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from xda import autodiff as ad
from xda import checkpoint as ckpt
from xda import losses as L
from xda.config import TrainConfig
from xda.segnet import SegModel
from xda.synthdata import load_split, miou

log = logging.getLogger(__name__)

COMPONENTS = ("L_s", "L_t", "L_t2s", "L_s2t", "L_attn", "L_pred", "total")
SPLITS = {"train": "target_train", "eval": "target_eval", "source": "source_train"}


class TrainingDiverged(RuntimeError):
    pass


class AdamW:
    """Adam with decoupled weight decay, one learning rate per parameter."""

    def __init__(self, named_params, lr_of, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for _, p in named_params]
        self.base_lr = [lr_of(n) for n, _ in named_params]
        self.wd = weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, scale=1.0):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, lr0, m, v in zip(self.params, self.base_lr, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            lr = lr0 * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data * (1.0 - lr * self.wd) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_scale(step, config):
    warm = min(1.0, (step + 1) / config.warmup) if config.warmup else 1.0
    decay = (1.0 - step / max(config.iterations, 1)) ** config.poly_power
    return warm * decay


@dataclass
class RunRecord:
    config_hash: str
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final_miou(self):
        return self.evals[-1][1] if self.evals else float("nan")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", *COMPONENTS])
        for row in self.steps:
            w.writerow([row["step"], *(repr(row[c]) for c in COMPONENTS)])
        return buf.getvalue()

    @staticmethod
    def parse_csv(text):
        rows = list(csv.DictReader(io.StringIO(text)))
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


class Trainer:
    """Holds student, teacher, optimizer and data for one run."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.student = SegModel(config.model, seed=config.seed, dtype=self.dtype)
        self.teacher = self.student.copy()
        self.opt = AdamW(
            self.student.named_params(),
            lambda n: config.lr_encoder if self.student.is_encoder(n) else config.lr_decoder,
            config.weight_decay,
            config.beta1,
            config.beta2,
        )
        # oracle mode: supervised training on labelled target images (upper bound)
        src = load_split("target_train" if config.oracle else "source_train", config.data)
        self.xs = src.images.astype(self.dtype)
        self.ys = src.labels
        self.xt = None
        if config.losses.needs_target:
            self.xt = load_split("target_train", config.data).images.astype(self.dtype)
        seq = np.random.SeedSequence([config.seed, 7])
        data_ss, mix_ss, pert_ss = seq.spawn(3)
        self.data_rng = np.random.default_rng(data_ss)
        self.mix_rng = np.random.default_rng(mix_ss)
        self.pert_rng = np.random.default_rng(pert_ss)
        self.step_no = 0
        self.last_batch = None

    def _batch(self):
        b = self.config.batch_size
        i_s = self.data_rng.integers(0, len(self.xs), size=b)
        i_t = self.data_rng.integers(0, len(self.xt), size=b) if self.xt is not None else None
        return i_s, i_t

    def compute_losses(self, x_s, y_s, x_t=None):
        """Build the graph for one step and return (components dict, total Tensor)."""
        cfg = self.config
        tg = cfg.losses
        classes = cfg.model.classes
        b = x_s.shape[0]
        y_s1 = L.one_hot(y_s, classes, self.dtype)
        zero = ad.Tensor(np.zeros((), dtype=self.dtype))
        comp = {"L_s": zero, "L_t": zero, "L_t2s": zero, "L_s2t": zero, "L_attn": zero}
        student = self.student

        if not tg.needs_target:
            fwd = student.forward(x_s, tg.perturbation, self.pert_rng)
            if tg.sup:
                comp["L_s"] = L.seg_ce(fwd.logits, y_s1)
            return self._combine(comp)

        with ad.no_grad():
            t_in = np.concatenate([x_t, x_s]) if tg.attn else x_t
            t_fwd = self.teacher.forward(t_in)
        p_t, q = L.pseudo_label_from_logits(t_fwd.logits.data[:b], cfg.tau)
        p_t = p_t.astype(self.dtype)
        mixes = [L.dacs_mix(x_s[i], y_s1[i], x_t[i], p_t[i], self.mix_rng, q[i]) for i in range(b)]
        x_m = np.stack([m.x_mix for m in mixes]).astype(self.dtype)
        p_m = np.stack([m.p_mix for m in mixes]).astype(self.dtype)
        masks = np.stack([m.mask for m in mixes])

        fwd = student.forward(np.concatenate([x_s, x_m]), tg.perturbation, self.pert_rng)
        first, second = np.arange(b), np.arange(b, 2 * b)
        if tg.sup:
            comp["L_s"] = L.seg_ce(ad.take(fwd.logits, first), y_s1)
        if tg.tgt:
            comp["L_t"] = L.seg_ce(ad.take(fwd.logits, second), p_m, q)

        if tg.t2s or tg.s2t:
            # F'(x_m, x_s): queries from x_m over source keys; F'(x_s, x_m) the reverse
            kv, order, parts = [], [], []
            if tg.t2s:
                kv.append(x_s)
                order.append(second)
                parts.append("t2s")
            if tg.s2t:
                kv.append(x_m)
                order.append(first)
                parts.append("s2t")
            order = np.concatenate(order)
            qfeat = [ad.take(f, order) for f in fwd.features]
            logits_c, _ = student.forward_cross(None, np.concatenate(kv), tg.stop_query_grad, qfeat)
            for k, part in enumerate(parts):
                lg = ad.take(logits_c, np.arange(k * b, (k + 1) * b))
                if part == "t2s":
                    comp["L_t2s"] = L.seg_ce(lg, y_s1)
                else:
                    comp["L_s2t"] = L.seg_ce(lg, p_m, q)

        if tg.attn:
            grid = cfg.model.grid
            tmask = L.token_mask(masks, grid)
            maps_t = [m.scores.data[:b] for m in t_fwd.maps]
            maps_s = [m.scores.data[b:] for m in t_fwd.maps]
            sup = L.mix_attention_maps(maps_s, maps_t, tmask)
            maps_m = [ad.take(m.scores, second) for m in fwd.maps]
            comp["L_attn"] = L.loss_attn(maps_m, sup, L.valid_mask(tmask))

        self.last_batch = {"x_s": x_s, "y_s": y_s, "x_t": x_t, "x_mix": x_m, "mask": masks, "q": q}
        return self._combine(comp)

    def _combine(self, comp):
        comp["L_pred"] = L.loss_pred(comp["L_s"], comp["L_t2s"], comp["L_t"], comp["L_s2t"])
        comp["total"] = L.total_loss(comp["L_pred"], comp["L_attn"], self.config.lambda_attn)
        return comp, comp["total"]

    def step(self):
        cfg = self.config
        i_s, i_t = self._batch()
        x_s = self.xs[i_s]
        y_s = self.ys[i_s]
        x_t = self.xt[i_t] if i_t is not None else None
        self.last_batch = {"x_s": x_s, "y_s": y_s, "x_t": x_t}
        self.student.zero_grad()
        try:
            comp, total = self.compute_losses(x_s, y_s, x_t)
        except ad.NumericError as exc:
            raise TrainingDiverged(f"non-finite activations at step {self.step_no}: {exc}") from exc
        values = {k: float(v.data) for k, v in comp.items()}
        if not np.isfinite(values["total"]):
            raise TrainingDiverged(f"non-finite loss at step {self.step_no}: {values}")
        total.backward()
        self.opt.step(lr_scale(self.step_no, cfg))
        L.ema_update(self.teacher, self.student, cfg.ema_alpha)
        values["step"] = self.step_no
        self.step_no += 1
        return values

    def state(self):
        params = {}
        for name, t in self.student.named_params():
            params["student." + name] = t.data
        for name, t in self.teacher.named_params():
            params["teacher." + name] = t.data
        return params


def model_from_params(config, params):
    student, _ = ckpt.split_state(params)
    model = SegModel(config.model, seed=config.seed, dtype=np.float32)
    model.load_params(student)
    return model


def evaluate_model(model, config, split="eval", batch=16):
    """Per-class IoU and mIoU of ``model`` on a labelled target split."""
    data = load_split(SPLITS[split], config.data)
    pred = model.predict(data.images.astype(model.dtype), batch=batch)
    return miou(pred, data.labels, config.model.classes)


def evaluate(checkpoint_path, split="eval"):
    config, params = ckpt.load(checkpoint_path)
    model = model_from_params(config, params)
    return evaluate_model(model, config, split)


def train(config: TrainConfig, out_dir=None, progress=None):
    """Run the full schedule. Returns (checkpoint params, RunRecord).

    The checkpoint holds float32 student and teacher weights, which are also
    what the final evaluation uses, so evaluating a saved checkpoint
    reproduces the recorded mIoU exactly.
    """
    t0 = time.perf_counter()
    trainer = Trainer(config)
    record = RunRecord(config.hash().hex())
    for it in range(config.iterations):
        try:
            values = trainer.step()
        except TrainingDiverged:
            if out_dir:
                os.makedirs(out_dir, exist_ok=True)
                dump = os.path.join(out_dir, "diverged_batch.npz")
                np.savez(dump, **{k: v for k, v in trainer.last_batch.items() if v is not None})
                log.error("non-finite loss; offending batch written to %s", dump)
            raise
        record.steps.append(values)
        if progress and (it % progress == 0 or it == config.iterations - 1):
            log.info("step %d %s", it, " ".join(f"{k}={values[k]:.4f}" for k in COMPONENTS))
        if config.eval_every and (it + 1) % config.eval_every == 0 and it + 1 < config.iterations:
            _, m = evaluate_model(model_from_params(config, trainer.state()), config)
            record.evals.append((it + 1, m))
    params = {k: np.asarray(v, dtype=np.float32) for k, v in trainer.state().items()}
    _, m = evaluate_model(model_from_params(config, params), config)
    record.evals.append((config.iterations, m))
    record.wall_time = time.perf_counter() - t0
    if out_dir:
        write_run(out_dir, config, params, record)
    return params, record


def write_run(out_dir, config, params, record):
    os.makedirs(out_dir, exist_ok=True)
    ckpt.save(os.path.join(out_dir, "model.xda"), params, config)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        f.write(record.to_csv())
    with open(os.path.join(out_dir, "evals.csv"), "w") as f:
        f.write("step,miou\n")
        for s, m in record.evals:
            f.write(f"{s},{m!r}\n")
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(f"config_hash={record.config_hash}\nfinal_miou={record.final_miou!r}\nwall_time={record.wall_time:.1f}\n")
