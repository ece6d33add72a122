"""Training and evaluation loops.

A run is fully determined by its :class:`TrainConfig`: data come from
``synth_dataset(data_seed, ...)``, parameters from per-group generators keyed
on ``seed``, and the epoch-e batch order from ``default_rng([seed, 1000 + e])``.
"""
from __future__ import annotations

import dataclasses
import io
import json
import os
import time

import numpy as np

from .. import metrics
from .. import numeric as nm
from ..errors import ConfigError, NonFiniteError, TrainingDivergedError, UsageError
from ..objectives import focal_regularization, pixel_position_aware_loss, total_loss
from ..params import named_tensors, replace_tensors
from . import checkpoint as ckpt
from . import data as sd
from .model import LEVELS, ModelConfig, forward, init_model

LOG_COLUMNS = ("epoch", "l_p", "focal_sum", "total", "train_mae", "lr")
EVAL_COLUMNS = ("sample", "s_measure", "f_max", "e_max", "mae")


@dataclasses.dataclass
class TrainConfig:
    seed: int = 0
    data_seed: int = 0
    strategy: str = "mutualformer"
    epochs: int = 20
    batch_size: int = 10
    lr: float = 1e-3
    lr_milestones: tuple = (15,)
    lr_decay: float = 0.1
    lam: float = 0.4
    epsilon: float = 0.6
    layers: int = 2
    width: int = 64
    heads: int = 4
    patch: int = 4
    enc_channels: tuple = (8, 16, 16, 16)
    dec_channels: int = 8
    coarse: bool = True
    train_count: int = 200
    test_count: int = 50
    size: int = 64
    window: int = 31
    literal_focal: bool = False
    focal_modulator: str = "product"
    distractors: bool = True
    flip: bool = False
    crop: bool = False

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if not 0.0 <= self.lam <= 0.9:
            raise ConfigError(f"lambda must lie in [0, 0.9], got {self.lam}")
        if self.train_count < 1 or self.test_count < 0:
            raise ConfigError("train_count must be >= 1 and test_count >= 0")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"pooling window must be a positive odd integer, got {self.window}")
        if self.focal_modulator not in ("product", "harmonic"):
            raise ConfigError(f"unknown focal modulator {self.focal_modulator!r}")
        self.model_config()

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def model_config(self) -> ModelConfig:
        return ModelConfig(strategy=self.strategy, enc_channels=self.enc_channels,
                           dec_channels=self.dec_channels, width=self.width, heads=self.heads,
                           layers=self.layers, patch=self.patch, epsilon=self.epsilon,
                           coarse=self.coarse)

    def lr_at(self, epoch: int) -> float:
        """Learning rate of 0-based ``epoch``: decayed once per milestone passed."""
        passed = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr * self.lr_decay ** passed


# --------------------------------------------------------------------------- losses

def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool a (B, H, W) mask by ``factor`` and re-binarise at 0.5."""
    b, h, w = mask.shape
    pooled = mask.reshape(b, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return (pooled >= 0.5).astype(np.float64)


def compute_loss(out, mask: np.ndarray, cfg: TrainConfig):
    dec = out.decoder
    decoder_losses = [pixel_position_aware_loss(p, mask, window=cfg.window) for p in dec.phase_maps]
    level_losses = {l: pixel_position_aware_loss(dec.level_maps[l], mask, window=cfg.window)
                    for l in LEVELS}
    focal = {}
    for l in LEVELS:
        y = downsample_mask(mask, 2 ** (l - 1))
        p_r, p_d = out.features.p_r[l], out.features.p_d[l]
        kw = dict(literal=cfg.literal_focal, modulator=cfg.focal_modulator)
        focal[l] = (focal_regularization(p_r, p_d, y, **kw), focal_regularization(p_d, p_r, y, **kw))
    return total_loss(decoder_losses, level_losses, focal, cfg.lam)


# --------------------------------------------------------------------------- optimiser

@dataclasses.dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = dataclasses.field(default_factory=dict)
    v: dict = dataclasses.field(default_factory=dict)

    def update(self, params: dict, grads: dict) -> dict:
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        new = {}
        for name, p in params.items():
            g = grads[name]
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            new[name] = nm.parameter(p.data - update, name=name)
        return new


# --------------------------------------------------------------------------- training

@dataclasses.dataclass
class TrainResult:
    params: dict              # name -> Tensor, final
    best_params: dict
    best_epoch: int
    best_mae: float
    log: list                 # dicts keyed by LOG_COLUMNS
    optimizer: Adam
    config: TrainConfig

    def tree(self, best: bool = False):
        base = init_model(self.config.seed, self.config.model_config(), self.config.size)
        return replace_tensors(base, self.best_params if best else self.params)


def _state_tensors(result: TrainResult) -> dict:
    out = {name: t.data for name, t in result.params.items()}
    for name in result.params:
        if name in result.optimizer.m:
            out["adam.m." + name] = result.optimizer.m[name]
            out["adam.v." + name] = result.optimizer.v[name]
        out["best." + name] = result.best_params[name].data
    log = np.array([[row[c] for c in LOG_COLUMNS] for row in result.log]).reshape(-1, len(LOG_COLUMNS))
    out["train.log"] = log
    out["train.step"] = np.array([float(result.optimizer.step)])
    out["train.best"] = np.array([float(result.best_epoch), result.best_mae])
    return out


def checkpoint_bytes(result: TrainResult, best: bool = False) -> bytes:
    if best:
        tensors = {name: t.data for name, t in result.best_params.items()}
        tensors["train.best"] = np.array([float(result.best_epoch), result.best_mae])
    else:
        tensors = _state_tensors(result)
    return ckpt.encode(tensors, result.config.to_dict(), result.config.seed)


def log_csv(log: list) -> str:
    buf = io.StringIO()
    buf.write(",".join(LOG_COLUMNS) + "\n")
    for row in log:
        buf.write(",".join([str(int(row["epoch"]))] + [f"{row[c]:.17g}" for c in LOG_COLUMNS[1:]]) + "\n")
    return buf.getvalue()


def _resume_state(cfg: TrainConfig, state: ckpt.Checkpoint, names):
    stored = dict(state.config)
    stored.pop("epochs", None)
    mine = cfg.to_dict()
    mine.pop("epochs")
    if stored != mine:
        diff = sorted(k for k in set(stored) | set(mine) if stored.get(k) != mine.get(k))
        raise ConfigError(f"checkpoint was trained with a different config ({', '.join(diff)})")
    t = state.tensors
    missing = [n for n in names if n not in t]
    if missing:
        raise ConfigError(f"checkpoint lacks parameters: {missing[:3]}")
    params = {n: nm.parameter(t[n], name=n) for n in names}
    best = {n: nm.parameter(t.get("best." + n, t[n]), name=n) for n in names}
    opt = Adam(cfg.lr, step=int(t.get("train.step", [0])[0]))
    for n in names:
        if "adam.m." + n in t:
            opt.m[n], opt.v[n] = t["adam.m." + n].copy(), t["adam.v." + n].copy()
    log = [dict(zip(LOG_COLUMNS, row)) for row in t.get("train.log", np.zeros((0, 6)))]
    for row in log:
        row["epoch"] = int(row["epoch"])
    be, bm = t.get("train.best", np.array([-1.0, np.inf]))
    return params, best, opt, log, int(be), float(bm)


def _write(path, payload, written: list | None):
    mode = "wb" if isinstance(payload, bytes) else "w"
    with open(path, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
        fh.write(payload)
    if written is not None:
        written.append(path)


def train(cfg: TrainConfig, *, dataset=None, resume: ckpt.Checkpoint | None = None,
          out_dir: str | None = None, written: list | None = None, progress=None) -> TrainResult:
    """Adam on the total loss. Writes final.mfck, best.mfck and loss_log.csv
    when ``out_dir`` is given; ``written`` collects every path written."""
    samples = dataset if dataset is not None else sd.synth_dataset(
        cfg.data_seed, cfg.train_count, cfg.size, distractors=cfg.distractors)
    if not samples:
        raise UsageError("training needs at least one sample")
    rgb, depth, mask = sd.stack(samples)
    mcfg = cfg.model_config()
    tree = init_model(cfg.seed, mcfg, rgb.shape[1])
    names = list(named_tensors(tree))
    if resume is not None:
        params, best, opt, log, best_epoch, best_mae = _resume_state(cfg, resume, names)
    else:
        params = {n: nm.parameter(t.data, name=n) for n, t in named_tensors(tree).items()}
        best, opt, log, best_epoch, best_mae = dict(params), Adam(cfg.lr), [], -1, np.inf

    n = len(samples)
    for epoch in range(len(log), cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, 1000 + epoch]).permutation(n)
        aug_rng = np.random.default_rng([cfg.seed, 2000 + epoch])
        sums = np.zeros(4)
        for batch_id, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            b_rgb, b_depth, b_mask = rgb[idx], depth[idx], mask[idx]
            if cfg.flip or cfg.crop:
                b_rgb, b_depth, b_mask = sd.augment(aug_rng, b_rgb, b_depth, b_mask,
                                                    flip=cfg.flip, crop=cfg.crop)
            try:
                model = replace_tensors(tree, params)
                with nm.Tape() as tape:
                    out = forward(model, mcfg, b_rgb, b_depth)
                    loss = compute_loss(out, b_mask, cfg)
                grads = tape.backward(loss.total, params)
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise NonFiniteError("non-finite gradient")
            except NonFiniteError as exc:
                if out_dir is not None:
                    dump = {"epoch": epoch, "batch": batch_id, "samples": [int(i) for i in idx],
                            "error": str(exc)}
                    _write(os.path.join(out_dir, "diverged.json"),
                           json.dumps(dump, indent=2, sort_keys=True) + "\n", written)
                raise TrainingDivergedError(f"training diverged: {exc}", epoch, batch_id) from exc
            params = opt.update(params, grads)
            f = loss.as_floats()
            batch_mae = float(np.mean(np.abs(out.prediction.data - b_mask)))
            sums += len(idx) * np.array([f["l_p"], f["focal_sum"], f["total"], batch_mae])
        means = sums / n
        row = dict(zip(LOG_COLUMNS, [epoch + 1, *means, opt.lr]))
        log.append(row)
        if row["train_mae"] < best_mae:
            best_mae, best_epoch, best = row["train_mae"], epoch + 1, params
        if progress is not None:
            progress(row)

    result = TrainResult(params, best, best_epoch, float(best_mae), log, opt, cfg)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write(os.path.join(out_dir, "final.mfck"), checkpoint_bytes(result), written)
        _write(os.path.join(out_dir, "best.mfck"), checkpoint_bytes(result, best=True), written)
        _write(os.path.join(out_dir, "loss_log.csv"), log_csv(log), written)
    return result


# --------------------------------------------------------------------------- evaluation

def load_model(state: ckpt.Checkpoint):
    """(config, parameter tree) from a checkpoint written by :func:`train`."""
    cfg = TrainConfig.from_dict(state.config)
    tree = init_model(cfg.seed, cfg.model_config(), cfg.size)
    names = named_tensors(tree)
    missing = [n for n in names if n not in state.tensors]
    if missing:
        raise ConfigError(f"checkpoint lacks parameters: {missing[:3]}")
    return cfg, replace_tensors(tree, {n: nm.Tensor(state.tensors[n]) for n in names})


def predict(tree, cfg: TrainConfig, samples, batch_size: int = 10) -> np.ndarray:
    rgb, depth, _ = sd.stack(samples)
    mcfg = cfg.model_config()
    maps = [forward(tree, mcfg, rgb[i:i + batch_size], depth[i:i + batch_size]).prediction.data
            for i in range(0, len(samples), batch_size)]
    return np.concatenate(maps, axis=0)


def evaluate(tree, cfg: TrainConfig, samples, *, mean_curve: bool = False) -> list[dict]:
    """Per-sample metric rows followed by a ``mean`` row."""
    if not samples:
        raise UsageError("evaluation needs at least one sample")
    preds = predict(tree, cfg, samples, cfg.batch_size)
    rows, curves = [], []
    for s, p in zip(samples, preds):
        curve = metrics.pr_curve(p, s.mask)
        curves.append(curve)
        rows.append({"sample": str(s.index), "s_measure": metrics.s_measure(p, s.mask),
                     "f_max": metrics.f_measure_max(curve),
                     "e_max": metrics.e_measure_max(p, s.mask), "mae": metrics.mae(p, s.mask)})
    mean = {c: float(np.mean([r[c] for r in rows])) for c in EVAL_COLUMNS[1:]}
    mean["f_max"] = metrics.dataset_f_max(curves, mean_curve=mean_curve)
    rows.append({"sample": "mean", **mean})
    return rows


def eval_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(EVAL_COLUMNS) + "\n")
    for r in rows:
        buf.write(",".join([r["sample"]] + [f"{r[c]:.17g}" for c in EVAL_COLUMNS[1:]]) + "\n")
    return buf.getvalue()


def held_out_split(cfg: TrainConfig):
    """Held-out samples: indices following the training range of the same stream."""
    return sd.synth_dataset(cfg.data_seed, cfg.test_count, cfg.size, start=cfg.train_count,
                            distractors=cfg.distractors) if cfg.test_count else []


def timed_run(cfg: TrainConfig, progress=None) -> dict:
    """Train, evaluate on the test split and summarise; used by the ablation harness."""
    t0 = time.perf_counter()
    result = train(cfg, progress=progress)
    seconds = time.perf_counter() - t0
    rows = evaluate(result.tree(), cfg, held_out_split(cfg))
    mean = rows[-1]
    return {"strategy": cfg.strategy, "seed": cfg.seed, "layers": cfg.layers,
            "test_mae": mean["mae"], "s_measure": mean["s_measure"], "f_max": mean["f_max"],
            "e_max": mean["e_max"],
            "first_loss": result.log[0]["total"] if result.log else float("nan"),
            "final_loss": result.log[-1]["total"] if result.log else float("nan"),
            "train_seconds": seconds}
