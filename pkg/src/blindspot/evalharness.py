"""Synthetic data, OOD metrics, and the blind-spot experiment grid.

Scores follow one orientation everywhere: the OOD score is the free energy,
higher meaning more out-of-distribution, and OOD is the positive class.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateSpectrum, EmptyInput, TrainingDiverged
from .trainer import TrainConfig, head_spectrum, train
from .vulnerability import (
    default_boundary_distance,
    head_null_basis,
    lsv_attack,
    nsv_attack,
    random_perp_attack,
)

log = logging.getLogger(__name__)

VARIANT_KINDS = ("baseline", "nsr", "nsr+lsvr", "nsr+cnr")


# ---------------------------------------------------------------------------
# metrics


def _scores(a, name) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size == 0:
        raise EmptyInput(f"{name} is empty")
    return a


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney AUROC with OOD as the positive class and ties counted half.

    Sorts once and counts, for each OOD score, the in-distribution scores
    strictly below it and those equal to it.
    """
    ids = np.sort(_scores(id_scores, "id_scores"))
    ood = _scores(ood_scores, "ood_scores")
    below = np.searchsorted(ids, ood, side="left")
    upto = np.searchsorted(ids, ood, side="right")
    # integer counts keep the result exact until the final division
    wins2 = int(2 * below.sum() + (upto - below).sum())
    return wins2 / (2 * ids.size * ood.size)


def fpr_at_tpr(id_scores, ood_scores, tpr: float = 0.95) -> tuple[float, float]:
    """FPR of OOD samples at the threshold that accepts ``tpr`` of in-distribution.

    The threshold is the ceil(tpr * n_id)-th smallest in-distribution score;
    a sample is called in-distribution when its score is at or below it.
    """
    ids = np.sort(_scores(id_scores, "id_scores"))
    ood = _scores(ood_scores, "ood_scores")
    if not 0 < tpr <= 1:
        raise ValueError("tpr must lie in (0, 1]")
    k = max(1, math.ceil(tpr * ids.size - 1e-9))
    threshold = float(ids[k - 1])
    return float(np.mean(ood <= threshold)), threshold


@dataclass(frozen=True)
class MetricsReport:
    fpr95: float
    auroc: float
    threshold_used: float
    n_id: int
    n_ood: int


def evaluate_scores(id_scores, ood_scores, tpr: float = 0.95) -> MetricsReport:
    fpr, thr = fpr_at_tpr(id_scores, ood_scores, tpr)
    return MetricsReport(fpr, auroc(id_scores, ood_scores), thr, len(id_scores), len(ood_scores))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 2
    input_dim: int = 2
    n_train_per_class: int = 500
    n_test_per_class: int = 200
    separation: float = 3.0
    spread: float = 0.6
    ood_shift: float = 3.0
    n_ood: int = 400
    ring_radius: float = 8.0

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return _strict(cls, d, "dataset")


@dataclass
class SyntheticDataset:
    """K isotropic Gaussian blobs with means evenly spaced on a circle of
    radius ``separation`` in the first two input coordinates."""

    spec: DatasetSpec
    means: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    ood_sets: dict[str, np.ndarray] = field(default_factory=dict)


def make_dataset(spec: DatasetSpec, seed: int) -> SyntheticDataset:
    """Train/test blobs plus input-space OOD sets.

    ``shifted_blobs`` moves every class blob by ``ood_shift`` towards the
    centre of the class means (the low-confidence region between classes);
    ``ring`` puts points uniformly on a circle of radius ``ring_radius`` in
    the first two coordinates.
    """
    if spec.n_classes < 2 or spec.input_dim < 2:
        raise ConfigError("need at least two classes and two input dimensions")
    rng = np.random.default_rng([seed, 0])
    k, d = spec.n_classes, spec.input_dim
    angles = 2 * np.pi * np.arange(k) / k
    means = np.zeros((k, d))
    means[:, 0] = spec.separation * np.cos(angles)
    means[:, 1] = spec.separation * np.sin(angles)

    def blobs(n_per, centres):
        x = np.vstack([c + spec.spread * rng.standard_normal((n_per, d)) for c in centres])
        y = np.repeat(np.arange(len(centres)), n_per)
        return x, y

    x_train, y_train = blobs(spec.n_train_per_class, means)
    x_test, y_test = blobs(spec.n_test_per_class, means)

    inward = -means / np.linalg.norm(means, axis=1, keepdims=True)
    shifted = means + spec.ood_shift * inward
    per = max(1, spec.n_ood // k)
    x_shift, _ = blobs(per, shifted)
    theta = rng.uniform(0, 2 * np.pi, spec.n_ood)
    ring = np.zeros((spec.n_ood, d))
    ring[:, 0] = spec.ring_radius * np.cos(theta)
    ring[:, 1] = spec.ring_radius * np.sin(theta)
    ring[:, 2:] = spec.spread * rng.standard_normal((spec.n_ood, d - 2))
    return SyntheticDataset(spec, means, x_train, y_train, x_test, y_test,
                            {"shifted_blobs": x_shift, "ring": ring})


# ---------------------------------------------------------------------------
# experiment configuration


def _strict(cls, d: dict, what: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be an object")
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from None


@dataclass(frozen=True)
class Variant:
    name: str
    kind: str
    config: TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    dataset: DatasetSpec
    hidden: tuple[int, ...]
    feature_dim: int
    variants: tuple[Variant, ...]
    d_b_scale: float = 3.0
    d_b: float | None = None


def _variant_kind(tc: TrainConfig) -> str:
    if tc.nsr_r is None:
        if tc.lambda_lsv > 0 or tc.lambda_cn > 0:
            raise ConfigError("regularised variants must use an NSR layer")
        return "baseline"
    if tc.lambda_lsv > 0:
        return "nsr+lsvr"
    if tc.lambda_cn > 0:
        return "nsr+cnr"
    return "nsr"


def parse_experiment_config(doc: dict, seed: int | None = None) -> ExperimentConfig:
    """Validate the JSON experiment document.

    ``train`` holds TrainConfig fields shared by every variant; each entry of
    ``variants`` is ``{"name": ..., **overrides}``. The grid must contain
    exactly one each of baseline, r-NSR, r-NSR+LSVR and r-NSR+CNR.
    """
    if not isinstance(doc, dict):
        raise ConfigError("experiment config must be a JSON object")
    allowed = {"seed", "dataset", "model", "train", "attack", "variants"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
    if seed is None:
        seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    dataset = DatasetSpec.from_dict(doc.get("dataset", {}))
    model = doc.get("model", {})
    if set(model) - {"hidden", "feature_dim"}:
        raise ConfigError(f"unknown model keys: {sorted(set(model) - {'hidden', 'feature_dim'})}")
    hidden = tuple(int(h) for h in model.get("hidden", [16]))
    feature_dim = int(model.get("feature_dim", 8))
    attack = doc.get("attack", {})
    if set(attack) - {"d_b_scale", "d_b"}:
        raise ConfigError(f"unknown attack keys: {sorted(set(attack) - {'d_b_scale', 'd_b'})}")
    shared = dict(doc.get("train", {}))
    if "seed" in shared:
        raise ConfigError("set the seed at the top level, not inside 'train'")
    raw_variants = doc.get("variants")
    if not isinstance(raw_variants, list) or not raw_variants:
        raise ConfigError("'variants' must be a non-empty list")
    variants = []
    for entry in raw_variants:
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError("each variant needs a 'name'")
        overrides = {k: v for k, v in entry.items() if k != "name"}
        tc = TrainConfig.from_dict({**shared, **overrides, "seed": seed})
        variants.append(Variant(str(entry["name"]), _variant_kind(tc), tc))
    kinds = sorted(v.kind for v in variants)
    if kinds != sorted(VARIANT_KINDS):
        raise ConfigError(f"variant grid must be exactly {list(VARIANT_KINDS)}, got {kinds}")
    for v in variants:
        if v.config.nsr_r is not None and v.config.nsr_r >= feature_dim:
            raise ConfigError(f"variant {v.name}: nsr_r must be below feature_dim={feature_dim}")
    d_b = attack.get("d_b")
    if d_b is not None and not d_b > 0:
        raise ConfigError("attack.d_b must be positive")
    return ExperimentConfig(seed, dataset, hidden, feature_dim, tuple(variants),
                            float(attack.get("d_b_scale", 3.0)), d_b)


def load_default_config() -> dict:
    text = resources.files("blindspot").joinpath("data/default_experiment.json").read_text()
    return json.loads(text)


# ---------------------------------------------------------------------------
# experiment


@dataclass
class VariantResult:
    name: str
    kind: str
    config: dict
    metrics: dict[str, dict]
    sigma_min: float | None
    kappa: float | None
    nullity: int | None
    diverged: bool
    accuracy: float | None = None
    composed_nullity: int | None = None
    d_b: float | None = None
    attacks: dict[str, dict] = field(default_factory=dict)
    energies: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("energies")
        # strict JSON has no infinity; a collapsed head reports kappa as null
        if d["kappa"] is not None and not math.isfinite(d["kappa"]):
            d["kappa"] = None
        return d


@dataclass
class ExperimentReport:
    seed: int
    variants: list[VariantResult]
    timestamp: str

    def to_dict(self) -> dict:
        return {"variants": [v.to_dict() for v in self.variants], "seed": self.seed,
                "timestamp": self.timestamp}

    def variant(self, kind_or_name: str) -> VariantResult:
        for v in self.variants:
            if v.name == kind_or_name or v.kind == kind_or_name:
                return v
        raise KeyError(kind_or_name)


def _attack_set(head, anchors, d_b, kind, seed):
    """Energies before/after one attack per anchor; None when there is no null space."""
    before, after = [], []
    if kind == "nsv_attack":
        basis = head_null_basis(head)
        if basis.dim == 0:
            return None
    for i, a in enumerate(anchors):
        if kind == "nsv_attack":
            r = nsv_attack(head, a, d_b, seed=[seed, i], basis=basis)
        elif kind == "lsv_attack":
            r = lsv_attack(head, a, d_b)
        else:
            r = random_perp_attack(head, a, d_b, seed=[seed, i])
        before.append(r.energy_before)
        after.append(r.energy_after)
    return np.array(before), np.array(after)


def run_variant(cfg: ExperimentConfig, variant: Variant, data: SyntheticDataset) -> VariantResult:
    dims = [data.spec.input_dim, *cfg.hidden, cfg.feature_dim]
    result = VariantResult(variant.name, variant.kind, variant.config.to_dict(), {}, None, None, None, False)
    try:
        rep = train(variant.config, data.x_train, data.y_train, dims, data.spec.n_classes)
    except TrainingDiverged as exc:
        log.warning("variant %s diverged at epoch %d", variant.name, exc.epoch)
        result.diverged = True
        return result
    model = rep.model
    head = model.head
    result.sigma_min, result.kappa, result.nullity = head_spectrum(head.w_cls)
    if head.nsr is not None:
        # informational: null space of the composed map, upstream of the NSR layer
        result.composed_nullity = head_spectrum(head.nsr @ head.w_cls)[2]
    result.accuracy = float(np.mean(model.predict(data.x_test) == data.y_test))

    id_energy = model.energy(data.x_test)
    result.energies["id_test"] = id_energy.tolist()
    for name, x in data.ood_sets.items():
        e = model.energy(x)
        result.energies[name] = e.tolist()
        result.metrics[name] = asdict(evaluate_scores(id_energy, e))

    anchors = model.features(data.x_test)
    eff = anchors @ head.nsr if head.nsr is not None else anchors
    d_b = cfg.d_b if cfg.d_b is not None else default_boundary_distance(eff, data.y_test, cfg.d_b_scale)
    result.d_b = d_b
    for kind in ("nsv_attack", "lsv_attack", "random_perp_attack"):
        if not d_b > 0:
            # every test feature sits on its class centroid (e.g. dead rectifiers)
            result.attacks[kind] = {"status": "DegenerateFeatures", "n_anchors": len(anchors)}
            continue
        try:
            out = _attack_set(head, anchors, d_b, kind, cfg.seed)
        except DegenerateSpectrum:
            result.attacks[kind] = {"status": "DegenerateSpectrum", "n_anchors": len(anchors)}
            continue
        if out is None:
            result.attacks[kind] = {"status": "NoNullSpace", "no_null_space_fraction": 1.0,
                                    "n_anchors": len(anchors)}
            continue
        before, after = out
        result.energies[kind] = after.tolist()
        result.metrics[kind] = asdict(evaluate_scores(id_energy, after))
        result.attacks[kind] = {"status": "ok", "no_null_space_fraction": 0.0,
                                "n_anchors": len(anchors),
                                "mean_abs_energy_change": float(np.mean(np.abs(after - before)))}
    return result


def run_blindspot_experiment(cfg: ExperimentConfig, timestamp: str | None = None) -> ExperimentReport:
    """Train each variant, then score ordinary and attack-generated OOD sets."""
    data = make_dataset(cfg.dataset, cfg.seed)
    results = []
    for v in cfg.variants:
        log.info("running variant %s (%s)", v.name, v.kind)
        results.append(run_variant(cfg, v, data))
    if timestamp is None:
        timestamp = datetime.now(timezone.utc).isoformat()
    return ExperimentReport(cfg.seed, results, timestamp)


def write_report(report: ExperimentReport, out_dir) -> tuple[Path, Path]:
    """Write ``report.json`` and ``energies.csv``.

    The CSV has columns ``set_name, energy``; set names are qualified by the
    variant as ``<variant>/<set>``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rpath = out / "report.json"
    rpath.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    cpath = out / "energies.csv"
    with cpath.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["set_name", "energy"])
        for v in report.variants:
            for set_name, values in v.energies.items():
                for e in values:
                    w.writerow([f"{v.name}/{set_name}", repr(e)])
    return rpath, cpath
