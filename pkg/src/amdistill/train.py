"""Teacher training, student distillation, SGD, and run bookkeeping."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .amd import AmdConfig, LayerPairing, PairingError, TeacherMaps
from .attention import attention_map
from .data import Dataset, MixupConfig, iterate_batches, mixup_batch, one_hot, pad_crop
from .kd import LossWeights, total_loss
from .metrics import accuracy
from .nn import Model, ModelSpec, build_model, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)

METHODS = ("scratch", "kd", "amd-g", "amd-gl", "amd-g-masked", "amd-gl-masked")

# Order of keys in every RunRecord line.
EPOCH_FIELDS = ["epoch", "lr", "train_loss", "train_acc", "test_acc", "ce", "kd", "amd",
                "weighted_ce", "weighted_kd", "weighted_amd", "amd_local", "components",
                "wall_time"]


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 200
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: Tuple[int, ...] = (40, 80, 120, 160)
    lr_decay: float = 0.2
    seed: int = 0
    # None -> 0.75 * epochs, 0 -> no early-stopped snapshot
    eskd_stop: Optional[int] = None
    repeats: int = 5
    augment_pad: int = 0

    def validate(self) -> None:
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        if ms and ms[-1] >= self.epochs:
            raise ValueError(f"milestones must lie below epochs={self.epochs}: {ms}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    def lr_at(self, epoch_index: int) -> float:
        """Learning rate for the 0-based epoch ``epoch_index`` (decay applied at epoch start)."""
        passed = sum(1 for m in self.milestones if m <= epoch_index)
        return self.lr * self.lr_decay ** passed

    @property
    def eskd_epoch(self) -> int:
        if self.eskd_stop is None:
            return max(1, int(0.75 * self.epochs))
        return self.eskd_stop


# -- optimisation ---------------------------------------------------------------

def sgd_step(params: Sequence[Tuple[str, Tensor]], state: Dict[str, np.ndarray], lr: float,
             momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """v <- momentum * v + grad + wd * param;  param <- param - lr * v.

    Parameters without a gradient are skipped.
    """
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in parameter {name}")
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p.data)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v


class SGD:
    def __init__(self, model: Model, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(model.named_parameters())
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: Dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        sgd_step(self.params, self.state, lr, self.momentum, self.weight_decay)


# -- records -------------------------------------------------------------------

@dataclass
class RunRecord:
    entries: List[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, entry: dict) -> None:
        self.entries.append({k: entry.get(k) for k in EPOCH_FIELDS})

    @property
    def best_acc(self) -> float:
        return max((e["test_acc"] for e in self.entries), default=float("nan"))

    @property
    def best_epoch(self) -> int:
        best = self.best_acc
        return next(e["epoch"] for e in self.entries if e["test_acc"] == best)

    def losses(self) -> List[float]:
        return [e["train_loss"] for e in self.entries]

    def without_timing(self) -> List[dict]:
        return [{k: v for k, v in e.items() if k != "wall_time"} for e in self.entries]

    def summary(self) -> dict:
        return {"best_acc": self.best_acc, "best_epoch": self.best_epoch, **self.meta}

    def save(self, path) -> None:
        """One JSON object per line, keys in ``EPOCH_FIELDS`` order."""
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e) + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        rec = cls()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec.entries.append(json.loads(line))
        return rec


# -- the loop ------------------------------------------------------------------

BatchLoss = Callable[[Model, np.ndarray, np.ndarray, np.ndarray], Tuple[Tensor, dict]]


@dataclass
class FitResult:
    record: RunRecord
    model: Model
    best_state: Dict[str, np.ndarray]
    checkpoints: Dict[str, Path] = field(default_factory=dict)


def _copy_state(model: Model) -> Dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in model.state_dict().items()}


def fit(model: Model, train: Dataset, test: Dataset, cfg: TrainConfig, batch_loss: BatchLoss,
        mixup: Optional[MixupConfig] = None, out_dir=None, snapshot_epochs: Sequence[int] = (),
        meta: Optional[dict] = None) -> FitResult:
    """Run ``cfg.epochs`` epochs of SGD on ``batch_loss`` and track the best test accuracy.

    ``batch_loss(model, x, target, idx)`` receives integer labels, or soft
    targets when Mixup is on, plus the dataset indices of the batch.
    """
    cfg.validate()
    opt = SGD(model, cfg.momentum, cfg.weight_decay)
    order_rng = np.random.default_rng([cfg.seed, 101])
    mix_rng = np.random.default_rng([cfg.seed, 202])
    aug_rng = np.random.default_rng([cfg.seed, 303])
    record = RunRecord(meta=dict(meta or {}))
    out = Path(out_dir) if out_dir is not None else None
    checkpoints: Dict[str, Path] = {}
    best_state, best_acc = _copy_state(model), -1.0

    for e in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(e)
        model.train()
        sums: Dict[str, float] = {}
        comp_sums: Dict[str, Dict[str, float]] = {}
        local_sum, nb, correct, seen = 0.0, 0, 0, 0
        for xb, yb, idx in iterate_batches(train, cfg.batch_size, shuffle=True, rng=order_rng,
                                           with_index=True):
            if cfg.augment_pad:
                xb = pad_crop(xb, cfg.augment_pad, aug_rng)
            target = yb
            if mixup is not None and mixup.enabled and len(xb) > 1:
                xb, target, _ = mixup_batch(xb, one_hot(yb, train.num_classes, xb.dtype), mixup, mix_rng)
            opt.zero_grad()
            try:
                loss, info = batch_loss(model, xb.astype(model.dtype), target, idx)
                if not math.isfinite(info["total"]):
                    raise DivergenceError(f"loss became {info['total']} at epoch {e + 1}")
                loss.backward()
                opt.step(lr)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {e + 1}: {exc}") from exc
            nb += 1
            for key in ("total", "ce", "kd", "amd"):
                sums[key] = sums.get(key, 0.0) + info[key]
            for key in ("ce", "kd", "amd"):
                sums["w_" + key] = sums.get("w_" + key, 0.0) + info["weighted"][key]
            if info.get("local") is not None:
                local_sum += info["local"]
            for c in info.get("components", []):
                acc = comp_sums.setdefault(c["layer"], {"A": 0.0, "P": 0.0, "N": 0.0})
                for k in "APN":
                    acc[k] += c[k]
            correct += int((info["pred"] == yb).sum())
            seen += len(yb)

        test_acc = accuracy(model, test)
        entry = {
            "epoch": e + 1, "lr": lr, "train_loss": sums["total"] / nb,
            "train_acc": correct / seen, "test_acc": test_acc,
            "ce": sums["ce"] / nb, "kd": sums["kd"] / nb, "amd": sums["amd"] / nb,
            "weighted_ce": sums["w_ce"] / nb, "weighted_kd": sums["w_kd"] / nb,
            "weighted_amd": sums["w_amd"] / nb,
            "amd_local": local_sum / nb if local_sum else None,
            "components": {layer: {k: v / nb for k, v in d.items()} for layer, d in comp_sums.items()},
            "wall_time": time.perf_counter() - t0,
        }
        record.append(entry)
        log.info("epoch %d lr %.4g loss %.4f train %.4f test %.4f", e + 1, lr,
                 entry["train_loss"], entry["train_acc"], test_acc)

        if test_acc > best_acc:
            best_acc = test_acc
            best_state = _copy_state(model)
            if out is not None:
                checkpoints["best"] = save_checkpoint(model, out / "checkpoints" / "best", e + 1,
                                                      record.entries)
        if out is not None and (e + 1) in snapshot_epochs:
            checkpoints[f"epoch{e + 1}"] = save_checkpoint(
                model, out / "checkpoints" / f"epoch{e + 1}", e + 1, record.entries)

    if out is not None:
        checkpoints["last"] = save_checkpoint(model, out / "checkpoints" / "last", cfg.epochs,
                                              record.entries)
        record.save(out / "run.jsonl")
        (out / "summary.json").write_text(json.dumps(record.summary(), indent=2))
    return FitResult(record, model, best_state, checkpoints)


# -- teacher --------------------------------------------------------------------

def _logits_pred(logits: Tensor) -> np.ndarray:
    return logits.data.argmax(axis=1)


def train_teacher(spec: ModelSpec, train: Dataset, test: Dataset, cfg: TrainConfig,
                  out_dir=None, dtype=np.float32) -> FitResult:
    """Cross-entropy training from scratch.

    Saves the best-accuracy checkpoint, the last one, and a snapshot after
    ``cfg.eskd_epoch`` epochs for early-stopped distillation.
    """
    model = build_model(spec, dtype=dtype, seed=cfg.seed)
    weights = LossWeights(1.0, 0.0, 1.0, 0.0)

    def batch_loss(m, x, y, idx):
        logits, _ = m(x)
        loss, info = total_loss(None, logits, y, None, None, None, weights, None)
        info["pred"] = _logits_pred(logits)
        return loss, info

    snaps = (cfg.eskd_epoch,) if cfg.eskd_epoch else ()
    return fit(model, train, test, cfg, batch_loss, out_dir=out_dir, snapshot_epochs=snaps,
               meta={"role": "teacher", "model": spec.name, "seed": cfg.seed})


# -- student --------------------------------------------------------------------

def teacher_outputs(teacher: Model, images: np.ndarray, d: Optional[float],
                    batch_size: int = 256):
    """Eval-mode teacher logits and per-tap attention maps for every image."""
    teacher.eval()
    logits, maps = [], {}
    with no_grad():
        for start in range(0, len(images), batch_size):
            out, taps = teacher(images[start:start + batch_size].astype(teacher.dtype))
            logits.append(out.data)
            if d is not None:
                for k, v in taps.items():
                    maps.setdefault(k, []).append(attention_map(v, d).data)
    return np.concatenate(logits), {k: np.concatenate(v) for k, v in maps.items()}


def resolve_method(method: str, weights: LossWeights, amd_cfg: AmdConfig):
    """Map a method name to (weights, amd_cfg, uses_teacher_logits, uses_amd)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "scratch":
        return LossWeights(1.0, 0.0, weights.tau, 0.0), None, False, False
    if method == "kd":
        return replace(weights, gamma=0.0), None, True, False
    cfg = replace(amd_cfg, use_local="gl" in method, use_mask=method.endswith("masked"))
    return weights, cfg, True, True


def _preflight(teacher: Model, student: Model, pairing: LayerPairing, cfg: Optional[AmdConfig],
               sample: np.ndarray) -> None:
    from .amd import build_pairs
    from .attention import split_local

    with no_grad():
        teacher.eval()
        _, taps_t = teacher(sample.astype(teacher.dtype))
        was = student.training
        student.eval()
        _, taps_s = student(sample.astype(student.dtype))
        student.train(was)
        t_pairs, s_pairs = build_pairs(taps_t, taps_s, pairing, replace(cfg, norm_eps=1e-12))
        if cfg.use_local:
            for p in t_pairs + s_pairs:
                split_local(p, cfg.local_mode, 1e-12)


def distill_student(teacher: Union[Model, str, Path], student_spec: ModelSpec,
                    pairing: Optional[LayerPairing], weights: LossWeights, amd_cfg: AmdConfig,
                    train: Dataset, test: Dataset, cfg: TrainConfig, method: str = "amd-g",
                    mixup: Optional[MixupConfig] = None, out_dir=None, dtype=np.float32,
                    init_state: Optional[Dict[str, np.ndarray]] = None,
                    use_cache: bool = True) -> FitResult:
    """Train a student against a frozen teacher with the combined objective.

    The teacher runs in eval mode without a graph; its parameters are never
    touched. ``pairing`` defaults to group-by-group matching. Without Mixup or
    cropping the teacher's inputs never change, so its logits and attention
    maps are computed once up front (``use_cache``).
    """
    weights, amd_cfg, use_logits, use_amd = resolve_method(method, weights, amd_cfg)
    weights.validate()
    student = build_model(student_spec, dtype=dtype, seed=cfg.seed)
    if init_state is not None:
        student.load_state_dict(init_state)

    t_model = None
    if method != "scratch":
        t_model = load_checkpoint(teacher)[0] if isinstance(teacher, (str, Path)) else teacher
        t_model.eval()
    if use_amd:
        amd_cfg.validate()
        if pairing is None:
            pairing = LayerPairing.by_group(t_model.spec.tap_points, student_spec.tap_points)
        if not len(pairing):
            raise PairingError("empty layer pairing")
        _preflight(t_model, student, pairing, amd_cfg, train.images[:2])
    else:
        pairing = None

    cache = None
    fixed_inputs = not (mixup is not None and mixup.enabled) and not cfg.augment_pad
    if t_model is not None and fixed_inputs and use_cache:
        cache = teacher_outputs(t_model, train.images, amd_cfg.d if use_amd else None)

    def batch_loss(m, x, y, idx):
        logits, taps_s = m(x)
        a_t = taps_t = None
        if cache is not None:
            a_t = Tensor(cache[0][idx])
            taps_t = TeacherMaps({k: Tensor(v[idx]) for k, v in cache[1].items()})
        elif t_model is not None:
            with no_grad():
                a_t, taps_t = t_model(x.astype(t_model.dtype))
        loss, info = total_loss(a_t if use_logits else None, logits, y, taps_t, taps_s, pairing,
                                weights, amd_cfg)
        info["pred"] = _logits_pred(logits)
        return loss, info

    meta = {"role": "student", "method": method, "model": student_spec.name, "seed": cfg.seed,
            "teacher": None if t_model is None else t_model.spec.name}
    return fit(student, train, test, cfg, batch_loss, mixup=mixup, out_dir=out_dir, meta=meta)


# -- repeats --------------------------------------------------------------------

@dataclass
class RepeatSummary:
    mean: float
    std: float
    values: List[float]
    records: List[RunRecord] = field(default_factory=list)


def summarize(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def repeat_runs(run: Callable[[int], RunRecord], seeds: Union[int, Sequence[int]]) -> RepeatSummary:
    """Run ``run(seed)`` for each seed; report mean and sample std of best accuracies."""
    if isinstance(seeds, int):
        if seeds < 1:
            raise ValueError("need at least one run")
        seeds = list(range(seeds))
    records = [run(s) for s in seeds]
    values = [r.best_acc for r in records]
    mean, std = summarize(values)
    return RepeatSummary(mean, std, values, records)
