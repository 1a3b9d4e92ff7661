"""Training loop wiring sampling, boundary weighting and prototype loss together."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from ..gap import PrototypeBank, gap_loss, gap_step, gather_boundary_features
from ..has import HardnessTable, ScheduleState, draw
from ..morphology import IGNORE_LABEL, downsample_mask, extract_boundary, granularity_bands
from ..tensor_io import RunConfig, spawn_rngs
from ..ube import StrategySpec, strategy_terms, ube_grad_logits, weighted_ce
from .data import load_dataset
from .model import PARAM_NAMES, ToyModel

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("iter", "loss_total", "loss_ube", "loss_gap",
                 "boundary_error_rate", "interior_error_rate", "sampling_mode")
MOTIVATION_STRATEGIES = ("baseline", "enhance", "ignore", "threshold", "reduce")
EVAL_KERNEL = 3


class DivergenceError(RuntimeError):
    pass


@dataclass
class MetricsRow:
    iter: int
    loss_total: float
    loss_ube: float
    loss_gap: float
    boundary_error_rate: float
    interior_error_rate: float
    sampling_mode: str


@dataclass
class PreparedScene:
    image: np.ndarray
    train_mask: np.ndarray
    true_mask: np.ndarray
    boundary: np.ndarray  # training boundary on train_mask
    mask_d: np.ndarray
    bands: np.ndarray
    true_boundary: np.ndarray


def prepare_scene(image, train_mask, true_mask, config: RunConfig) -> PreparedScene:
    mask_d = downsample_mask(train_mask, config.feature_stride)
    return PreparedScene(
        image=np.asarray(image, dtype=np.float64),
        train_mask=np.asarray(train_mask),
        true_mask=np.asarray(true_mask),
        boundary=extract_boundary(train_mask, config.kd, config.ke).astype(bool),
        mask_d=mask_d,
        bands=granularity_bands(mask_d, config.granularity_kernels).bands,
        true_boundary=extract_boundary(true_mask, EVAL_KERNEL, EVAL_KERNEL).astype(bool),
    )


def strategy_spec(config: RunConfig) -> StrategySpec:
    if config.strategy == "baseline":
        return StrategySpec("enhance", alpha=1.0)
    return StrategySpec(config.strategy, alpha=config.strategy_alpha, tau=config.strategy_tau,
                        a=config.strategy_a, gamma=config.strategy_gamma,
                        ube_alpha=config.alpha_ube, per_image=config.ube_per_image)


@dataclass
class StepResult:
    loss_ube: float
    loss_gap: float
    loss_total: float
    ce: float
    grad_logits: np.ndarray
    grad_features: np.ndarray
    weights: np.ndarray
    bank: PrototypeBank


def loss_step(logits, features, scene: PreparedScene, bank: PrototypeBank,
              config: RunConfig, spec: Optional[StrategySpec] = None) -> StepResult:
    """Losses and upstream gradients for one image; also returns the updated bank.

    ``grad_features`` already carries the ``lambda_gap`` factor.
    """
    spec = spec or strategy_spec(config)
    loss_ube, grad_logits, weights = strategy_terms(logits, scene.train_mask, scene.boundary, spec)
    ce = weighted_ce(logits, scene.train_mask, np.ones(scene.train_mask.shape))[0]
    loss_gap, grad_feat, new_bank = gap_step(bank, features, scene.bands, scene.mask_d, config.tau_gap)
    lam = config.lambda_gap
    return StepResult(loss_ube, loss_gap, loss_ube + lam * loss_gap, ce,
                      grad_logits, lam * grad_feat, weights, new_bank)


def error_counts(pred, true_mask, true_boundary) -> Dict[str, int]:
    valid = true_mask != IGNORE_LABEL
    wrong = (pred != true_mask) & valid
    b = true_boundary & valid
    i = ~true_boundary & valid
    return {"boundary_errors": int(wrong[b].sum()), "boundary_pixels": int(b.sum()),
            "interior_errors": int(wrong[i].sum()), "interior_pixels": int(i.sum())}


def _rates(c: Dict[str, int]):
    br = c["boundary_errors"] / c["boundary_pixels"] if c["boundary_pixels"] else 0.0
    ir = c["interior_errors"] / c["interior_pixels"] if c["interior_pixels"] else 0.0
    return br, ir


def evaluate(model: ToyModel, images, true_masks) -> Dict[str, float]:
    """Dataset-wide error rates against the true masks, split by their boundary band."""
    total = {"boundary_errors": 0, "boundary_pixels": 0, "interior_errors": 0, "interior_pixels": 0}
    for img, tm in zip(images, true_masks):
        tb = extract_boundary(tm, EVAL_KERNEL, EVAL_KERNEL).astype(bool)
        for k, v in error_counts(model.predict(img), np.asarray(tm), tb).items():
            total[k] += v
    br, ir = _rates(total)
    return {**total, "boundary_error_rate": br, "interior_error_rate": ir}


@dataclass
class TrainResult:
    model: ToyModel
    bank: PrototypeBank
    hardness: HardnessTable
    rows: List[MetricsRow]


def fit_arrays(images, train_masks, true_masks, config: RunConfig,
               callback: Optional[Callable[[int, ToyModel], None]] = None) -> TrainResult:
    """Run the full sampling / forward / loss / backward / SGD loop.

    ``callback(t, model)`` runs after every parameter update.
    """
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    model_rng, sample_rng = spawn_rngs(config.seed, 2)
    model = ToyModel.initialize(config.num_classes, config.feature_dim, config.hidden_dim,
                                config.patch_radius, config.feature_stride, rng=model_rng)
    bank = PrototypeBank.initialize(config.num_classes, config.feature_dim, config.momentum, config.seed)
    table = HardnessTable(n, config.beta_has, config.ema_period)
    sched = ScheduleState(config.schedule, config.k_has, config.midpoint, config.n_iters)
    spec = strategy_spec(config)
    scenes = [prepare_scene(images[i], train_masks[i], true_masks[i], config) for i in range(n)]

    rows = []
    for t in range(config.n_iters):
        idx, mode = draw(table, sched, t, sample_rng, config.tau_has)
        sc = scenes[idx]
        cache = model.forward_cache(sc.image)
        step = loss_step(cache.logits, cache.features, sc, bank, config, spec)
        if not math.isfinite(step.loss_total):
            raise DivergenceError(
                f"non-finite loss at iteration {t} (image {idx}): ube={step.loss_ube}, gap={step.loss_gap}")
        counts = error_counts(np.argmax(cache.logits, axis=-1), sc.true_mask, sc.true_boundary)
        grads = model.backward(cache, step.grad_logits, step.grad_features)
        model.sgd_step(grads, config.lr)
        bank = step.bank
        table.record_loss(idx, step.loss_total if config.has_loss == "total" else step.ce, t)
        br, ir = _rates(counts)
        rows.append(MetricsRow(t, step.loss_total, step.loss_ube, step.loss_gap, br, ir, mode))
        if callback is not None:
            callback(t, model)
    return TrainResult(model, bank, table, rows)


def write_metrics(rows: List[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r.iter, repr(r.loss_total), repr(r.loss_ube), repr(r.loss_gap),
                        repr(r.boundary_error_rate), repr(r.interior_error_rate), r.sampling_mode])


def train(config: RunConfig, dataset_dir, out_dir) -> dict:
    """Train on a generated dataset and write metrics, bank, model and summary."""
    images, train_masks, true_masks, manifest = load_dataset(dataset_dir)
    if manifest["num_classes"] != config.num_classes:
        config = config.replace(num_classes=manifest["num_classes"])
    res = fit_arrays(images, train_masks, true_masks, config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(res.rows, out / "metrics.csv")
    res.bank.save(out / "bank")
    res.model.save(out / "model")
    last = res.rows[-1]
    summary = {
        "config": config.to_dict(),
        "final_loss_total": last.loss_total,
        "final_loss_ube": last.loss_ube,
        "final_loss_gap": last.loss_gap,
        "evaluation": evaluate(res.model, images, true_masks),
        "hardness": res.hardness.scores.tolist(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def motivation_config(config: RunConfig, strategy: str) -> RunConfig:
    """Plain CE variants: no prototype loss, uniform sampling."""
    return config.replace(strategy=strategy, lambda_gap=0.0, schedule="none")


def run_motivation(images, train_masks, true_masks, config: RunConfig,
                   strategies=MOTIVATION_STRATEGIES) -> Dict[str, dict]:
    results = {}
    for s in strategies:
        res = fit_arrays(images, train_masks, true_masks, motivation_config(config, s))
        results[s] = evaluate(res.model, images, true_masks)
    return results


def reproduce_motivation(dataset_dir, out_dir, config: Optional[RunConfig] = None) -> Dict[str, dict]:
    config = config or RunConfig()
    images, train_masks, true_masks, manifest = load_dataset(dataset_dir)
    config = config.replace(num_classes=manifest["num_classes"])
    results = run_motivation(images, train_masks, true_masks, config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "motivation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("strategy", "boundary_error_rate", "interior_error_rate"))
        for s, r in results.items():
            w.writerow((s, repr(r["boundary_error_rate"]), repr(r["interior_error_rate"])))
    return results


# ---------------------------------------------------------------- gradcheck

def rel_error(analytic, numeric) -> float:
    """Normwise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish.

    Elementwise ratios are dominated by finite-difference roundoff on
    near-zero entries, so each tensor is compared as a whole.
    """
    a = np.ravel(analytic)
    b = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0.0 else float(np.linalg.norm(a - b) / denom)


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def tiny_instance(config: RunConfig, seed: int, size: int = 8, num_classes: int = 3,
                  feature_dim: int = 8, hidden_dim: int = 6, stride: int = 2):
    """Random model, image, mask and bank for gradient checks."""
    rng = np.random.default_rng(seed)
    cfg = config.replace(num_classes=num_classes, feature_dim=feature_dim,
                         hidden_dim=hidden_dim, feature_stride=stride, seed=seed)
    model = ToyModel.initialize(num_classes, feature_dim, hidden_dim, cfg.patch_radius, stride, rng=rng)
    for k in PARAM_NAMES:
        model.params[k] += rng.normal(0.0, 0.3, model.params[k].shape)
    image = rng.uniform(0.0, 1.0, (size, size, 3))
    # blocky labels so every granularity ring is populated
    coarse = rng.integers(0, num_classes, (size // 2, size // 2))
    mask = np.kron(coarse, np.ones((2, 2), dtype=np.int64)).astype(np.int32)
    bank = PrototypeBank.initialize(num_classes, feature_dim, cfg.momentum, seed)
    bank.frequencies[:] = rng.integers(0, 20, bank.frequencies.shape)
    scene = prepare_scene(image, mask, mask, cfg)
    return cfg, model, scene, bank


def gradcheck(config: Optional[RunConfig] = None, seed: int = 0, h: float = 1e-5) -> dict:
    """Compare analytic gradients of the total loss against central differences.

    The boundary weights and the bank are frozen at their values for the
    unperturbed model, matching how they enter the analytic gradient.
    """
    config = config or RunConfig()
    cfg, model, scene, bank = tiny_instance(config, seed)
    cfg = cfg.replace(strategy="ube")
    cache = model.forward_cache(scene.image)
    step = loss_step(cache.logits, cache.features, scene, bank, cfg)
    weights = step.weights
    grads = model.backward(cache, step.grad_logits, step.grad_features)
    lam = cfg.lambda_gap

    def total():
        logits, feats = model.forward(scene.image)
        fs = gather_boundary_features(feats, scene.bands, scene.mask_d)
        return (weighted_ce(logits, scene.train_mask, weights)[0]
                + lam * gap_loss(bank, fs, cfg.tau_gap)[0])

    report = {"seed": seed, "params": {}}
    for k in PARAM_NAMES:
        num = central_difference(total, model.params[k], h)
        report["params"][k] = rel_error(grads[k], num)

    fs = gather_boundary_features(cache.features, scene.bands, scene.mask_d)
    _, gfeat = gap_loss(bank, fs, cfg.tau_gap)
    feats = fs.features.copy()
    fs_probe = dataclasses.replace(fs, features=feats)
    num = central_difference(lambda: gap_loss(bank, fs_probe, cfg.tau_gap)[0], feats, h)
    report["boundary_features"] = rel_error(gfeat, num)

    probe_logits = cache.logits.copy()
    gl_num = central_difference(
        lambda: weighted_ce(probe_logits, scene.train_mask, weights)[0], probe_logits, h)
    report["logits"] = rel_error(ube_grad_logits(cache.logits, scene.train_mask, weights), gl_num)
    report["max_rel_error"] = max([*report["params"].values(), report["boundary_features"], report["logits"]])
    report["n_boundary_features"] = len(fs)
    return report
