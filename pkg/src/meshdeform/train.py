"""Optimization: Adam, plateau learning-rate schedule, checkpointing, training loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import autodiff as ad
from .augment import AugmentConfig, augment
from .deformer import DeformerConfig, MeshDeformNet, TemplateSet, fit_templates, structure_stats
from .encoder import EncoderConfig
from .losses import LossWeights, MeshTarget, StructureStats, point_loss, total_loss
from .synthetic import SceneSpec


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay_factor: float = 0.8
    patience_epochs: int = 10
    lr_min: float = 5e-6
    epochs: int = 200
    batch_size: int = 1
    seed: int = 0
    subdivisions: int = 3
    augment: bool = True

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr0:
            raise ValueError("need 0 < lr_min <= lr0")
        if self.patience_epochs < 1:
            raise ValueError("patience must be at least 1")


# ---------------------------------------------------------------------------
# Adam


def adam_step(params: dict, grads: dict, state: dict, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction.

    ``state`` maps parameter name to ``(m, v)`` and is created on first use.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m, v = state.get(name, (torch.zeros_like(p), torch.zeros_like(p)))
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            state[name] = (m, v)
            p -= lr * (m / c1) / ((v / c2).sqrt() + eps)


# ---------------------------------------------------------------------------
# learning-rate schedule


class PlateauSchedule:
    """Multiply the rate by ``factor`` after ``patience`` epochs without a strictly lower loss."""

    def __init__(self, lr0: float, factor: float = 0.8, patience: int = 10, lr_min: float = 5e-6):
        self.lr = lr0
        self.factor = factor
        self.patience = patience
        self.lr_min = lr_min
        self.best = math.inf
        self.wait = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch; returns whether it improved on the best so far."""
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
            return True
        self.wait += 1
        if self.wait >= self.patience:
            self.lr = max(self.lr * self.factor, self.lr_min)
            self.wait = 0
        return False


def lr_schedule(history, lr0: float = 1e-3, factor: float = 0.8, patience: int = 10, lr_min: float = 5e-6) -> float:
    """Learning rate after replaying a history of validation point losses."""
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    sched = PlateauSchedule(lr0, factor, patience, lr_min)
    for v in history:
        sched.step(v)
    return sched.lr


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, model: MeshDeformNet, templates: TemplateSet, stats: list[StructureStats],
               extra: dict | None = None) -> None:
    tensors = {f"param.{k}": v for k, v in model.state_dict().items()}
    tensors["templates.centroid"] = np.array([t.centroid for t in templates.templates])
    tensors["templates.radius"] = np.array([t.radius for t in templates.templates])
    tensors["stats.mu"] = np.array([s.mean_edge_length for s in stats])
    meta = {"model": model.config_dict(), "subdivisions": templates.subdivisions, **(extra or {})}
    ad.save_checkpoint(path, tensors, meta)


def load_model(path, seed: int = 0):
    """Returns ``(model, templates, stats, meta)``."""
    tensors, meta = ad.load_checkpoint(path)
    cfg = meta["model"]
    dtype = torch.float64 if cfg.get("dtype") == "f64" else torch.float32
    model = MeshDeformNet(EncoderConfig(**cfg["encoder"]), DeformerConfig(**cfg["deformer"]), seed=seed, dtype=dtype)
    state = {k[len("param."):]: torch.from_numpy(np.array(v)) for k, v in tensors.items() if k.startswith("param.")}
    model.load_state_dict(state)
    templates = TemplateSet.from_params(tensors["templates.centroid"], tensors["templates.radius"], meta["subdivisions"])
    stats = [StructureStats(float(mu), tuple(t.centroid), t.radius) for mu, t in zip(tensors["stats.mu"], templates.templates)]
    return model, templates, stats, meta


# ---------------------------------------------------------------------------
# training loop


def prepare_templates(train_scenes: list[SceneSpec], subdivisions: int):
    per_structure = [[sc.meshes[i] for sc in train_scenes] for i in range(train_scenes[0].n_structures)]
    templates = fit_templates(per_structure, subdivisions)
    return templates, structure_stats(per_structure, templates)


def sample_loss(model, scene_image, scene_occ, meshes, templates, stats, weights):
    blocks, occ = model(scene_image, templates)
    for b, coords in enumerate(blocks):
        if not all(torch.isfinite(c).all() for c in coords):
            raise NumericalError(f"non-finite vertex coordinates after block {b + 1}")
    targets = [MeshTarget(m) for m in meshes]
    truth = torch.as_tensor(np.asarray(scene_occ.data, dtype=np.float64), dtype=model.dtype)[None]
    return total_loss(blocks, templates.topologies, targets, occ, truth, weights, stats)


def validation_point_loss(model, scenes: list[SceneSpec], templates: TemplateSet) -> float:
    """Mean over scenes of the final-block point loss summed over structures."""
    was = model.training
    model.eval()
    total = 0.0
    with torch.no_grad():
        for sc in scenes:
            blocks, _ = model(sc.image, templates)
            total += sum(float(point_loss(c, MeshTarget(m))) for c, m in zip(blocks[-1], sc.meshes))
    model.train(was)
    return total / max(len(scenes), 1)


def train(train_scenes: list[SceneSpec], val_scenes: list[SceneSpec], cfg: TrainConfig,
          aug_cfg: AugmentConfig | None = None, weights: LossWeights | None = None,
          out_dir=None, model: MeshDeformNet | None = None,
          enc_cfg: EncoderConfig | None = None, def_cfg: DeformerConfig | None = None,
          progress: Callable[[dict], None] | None = None):
    """Train on ``train_scenes`` and keep the checkpoint with the best validation point loss.

    Writes ``best.ckpt`` and ``train_log.jsonl`` under ``out_dir`` when given.
    Returns ``(model, templates, stats, records)`` with the best weights loaded.
    """
    torch.manual_seed(ad.substream_seed(cfg.seed, "torch"))
    aug_cfg = aug_cfg or AugmentConfig()
    weights = weights or LossWeights()
    templates, stats = prepare_templates(train_scenes, cfg.subdivisions)
    model = model or MeshDeformNet(enc_cfg, def_cfg, seed=cfg.seed)
    model.train()
    params = dict(model.named_parameters())
    state: dict = {}
    sched = PlateauSchedule(cfg.lr0, cfg.lr_decay_factor, cfg.patience_epochs, cfg.lr_min)
    order_rng = ad.numpy_rng(cfg.seed, "order")
    aug_rng = ad.numpy_rng(cfg.seed, "augment")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        log_path.write_text("")
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    records = []
    step = 0
    for epoch in range(cfg.epochs):
        sums = {k: 0.0 for k in ("total", "point", "normal", "edge", "lap", "occ")}
        for idx in order_rng.permutation(len(train_scenes)):
            sc = train_scenes[idx]
            vols, meshes = [sc.image, sc.occupancy], sc.meshes
            if cfg.augment:
                vols, meshes = augment(vols, meshes, aug_cfg, aug_rng)
            for p in params.values():
                p.grad = None
            loss, parts = sample_loss(model, vols[0], vols[1], meshes, templates, stats, weights)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            ad.backward(loss)
            step += 1
            adam_step(params, {k: p.grad for k, p in params.items()}, state, step, sched.lr,
                      cfg.beta1, cfg.beta2, cfg.eps)
            sums["total"] += float(loss.detach())
            for k in ("point", "normal", "edge", "lap", "occ"):
                sums[k] += float(parts[k])
        n = len(train_scenes)
        val = validation_point_loss(model, val_scenes, templates) if val_scenes else sums["point"] / n
        lr_used = sched.lr
        improved = sched.step(val)
        if improved:
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if out is not None:
                save_model(out / "best.ckpt", model, templates, stats,
                           {"epoch": epoch, "val_point": val, "train": asdict(cfg)})
        rec = {
            "epoch": epoch,
            "loss_total": sums["total"] / n,
            "loss_point": sums["point"] / n,
            "loss_normal": sums["normal"] / n,
            "loss_edge": sums["edge"] / n,
            "loss_lap": sums["lap"] / n,
            "loss_occ": sums["occ"] / n,
            "lr": lr_used,
            "val_point": val,
            "saved": improved,
        }
        records.append(rec)
        if out is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if progress is not None:
            progress(rec)
    model.load_state_dict(best_state)
    model.eval()
    return model, templates, stats, records


def search_lambdas(train_scenes: list[SceneSpec], val_scenes: list[SceneSpec], cfg: TrainConfig,
                   n_sets: int = 8, aug_cfg: AugmentConfig | None = None,
                   enc_cfg: EncoderConfig | None = None, def_cfg: DeformerConfig | None = None) -> list[dict]:
    """Train once per random weight set in [0, 1)^4 and rank by validation point loss.

    Every candidate starts from the same initialization. Rows carry
    ``weights``, ``val_point`` and ``best`` (true for the argmin only).
    """
    draws = ad.numpy_rng(cfg.seed, "lambdas").uniform(0.0, 1.0, size=(n_sets, 4))
    rows = []
    for w in draws:
        weights = LossWeights(*map(float, w))
        _, _, _, recs = train(train_scenes, val_scenes, cfg, aug_cfg, weights, enc_cfg=enc_cfg, def_cfg=def_cfg)
        rows.append({"weights": list(weights.as_tuple()), "val_point": min(r["val_point"] for r in recs)})
    best = int(np.argmin([r["val_point"] for r in rows]))
    for i, r in enumerate(rows):
        r["best"] = i == best
    return rows
