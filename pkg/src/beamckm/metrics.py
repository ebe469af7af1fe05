"""Evaluation: NMSE in dB over free-space pixels, main-lobe angles, scenario runs."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .propagation import ChannelMap

PERFECT_NMSE_DB = -300.0  # sentinel for a zero-error prediction


class EvaluationError(RuntimeError):
    pass


def nmse_db_arrays(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """10*log10(sum|pred-truth|^2 / sum|truth|^2) over masked pixels (dB domain)."""
    m = mask.astype(bool)
    diff = pred[m] - truth[m]
    num = float(np.sum(diff * diff))
    den = float(np.sum(truth[m] ** 2))
    if den == 0.0:
        raise EvaluationError("all-floor truth map: NMSE denominator is zero")
    if num == 0.0:
        return PERFECT_NMSE_DB
    return 10.0 * math.log10(num / den)


def nmse_db(pred: ChannelMap, truth: ChannelMap) -> float:
    if pred.values_db.shape != truth.values_db.shape:
        raise ValueError("map dimensions differ")
    if not np.array_equal(pred.valid_mask, truth.valid_mask):
        raise ValueError("masks differ")
    return nmse_db_arrays(pred.values_db, truth.values_db, truth.valid_mask)


def main_lobe_angle(ckm: ChannelMap, tx: tuple[int, int], radius_px: int,
                    bins: int) -> float:
    """Argmax angular bin of the ring-mean map value; returns the bin center.

    Angles are measured from array broadside (+row axis) toward +col, i.e.
    the steering-angle convention; ties break to the smallest bin index.
    """
    h, w = ckm.values_db.shape
    tr, tc = tx
    if (tr - radius_px < 0 or tr + radius_px >= h
            or tc - radius_px < 0 or tc + radius_px >= w):
        raise ValueError(f"ring of radius {radius_px} at {tx} leaves the grid")
    rr, cc = np.mgrid[0:h, 0:w]
    dist = np.hypot(rr - float(tr), cc - float(tc))
    ring = np.abs(dist - radius_px) <= 0.5
    ang = np.arctan2(cc - float(tc), rr - float(tr))  # 0 at broadside
    width = 2.0 * math.pi / bins
    # bin k is centered at k*width, wrapped into (-pi, pi]
    idx = np.mod(np.round(ang / width).astype(int), bins)
    sums = np.zeros(bins)
    counts = np.zeros(bins)
    np.add.at(sums, idx[ring], ckm.values_db[ring])
    np.add.at(counts, idx[ring], 1)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), -np.inf)
    best = int(np.argmax(means))
    center = best * width
    if center > math.pi:
        center -= 2.0 * math.pi
    return center


def angle_diff(a: float, b: float) -> float:
    return abs((a - b + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass
class EvalReport:
    scenario: str
    config_hash: str
    records: list[dict] = field(default_factory=list)
    aggregate_nmse_db: float = math.nan

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "config_hash": self.config_hash,
                "aggregate_nmse_db": self.aggregate_nmse_db, "records": self.records}

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def aggregate_nmse_db(pairs: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> float:
    """Pooled-pixel NMSE over (pred, truth, mask) triples."""
    num, den = 0.0, 0.0
    for pred, truth, mask in pairs:
        m = mask.astype(bool)
        diff = pred[m] - truth[m]
        num += float(np.sum(diff * diff))
        den += float(np.sum(truth[m] ** 2))
    if den == 0.0:
        raise EvaluationError("aggregate NMSE denominator is zero")
    if num == 0.0:
        return PERFECT_NMSE_DB
    return 10.0 * math.log10(num / den)


def lobe_ring_radius(tx: tuple[int, int], shape: tuple[int, int],
                     cap: int = 20) -> int | None:
    """Largest usable ring radius for a record, None when the tx hugs an edge."""
    tr, tc = tx
    h, w = shape
    r = min(tr, tc, h - 1 - tr, w - 1 - tc) - 1
    if r < 4:
        return None
    return min(r, cap)


SCENARIOS = ("unseen-beams", "unseen-locations")
LOBE_BINS = 16


def run_scenario(data, vae, dit, cond, sched, scenario: str,
                 out_dir: str | Path, seed: int = 0,
                 write_pngs: bool = True) -> EvalReport:
    """Sample and score every test record of a generalization scenario.

    Each record gets its own Generator stream derived from (seed, record
    index), so evaluation order cannot perturb results.
    """
    from .dataset import Dataset  # noqa: F401  (type only; avoids cycle at import)
    from .diffusion import sample_ckm
    from .pngio import save_grayscale
    from .propagation import BeamVector, db_to_unit

    split_key = scenario.replace("-", "_")
    if split_key not in data.splits:
        raise KeyError(f"scenario {scenario!r} not present in the dataset manifest")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    report = EvalReport(scenario=scenario, config_hash="")
    pairs = []
    for i, rid in enumerate(data.splits[split_key]):
        scene = data.scene_for(rid)
        rec = data.record(rid)
        beam = BeamVector(rec.beam, power_budget=data.manifest["power_budget"])
        rng = np.random.default_rng([seed, i])
        pred = sample_ckm(scene, beam, dit, cond, vae, sched, rng,
                          data.floor_db, data.ceiling_db)
        truth = data.truth_map(rid)
        score = nmse_db(pred, truth)
        tx = scene.tx_pos
        radius = lobe_ring_radius(tx, pred.values_db.shape)
        lobe_err = None
        if radius is not None:
            lobe_err = angle_diff(main_lobe_angle(pred, tx, radius, LOBE_BINS),
                                  main_lobe_angle(truth, tx, radius, LOBE_BINS))
        report.records.append({
            "record": rid, "scene": data.manifest["records"][rid]["scene"],
            "tx": data.manifest["records"][rid]["tx"],
            "beam": data.manifest["records"][rid]["beam"],
            "nmse_db": score,
            "main_lobe_error_rad": lobe_err,
        })
        pairs.append((pred.values_db, truth.values_db, truth.valid_mask))
        if write_pngs:
            save_grayscale(out / f"{rid}_pred.png",
                           db_to_unit(pred.values_db, data.floor_db, data.ceiling_db))
            save_grayscale(out / f"{rid}_truth.png",
                           db_to_unit(truth.values_db, data.floor_db, data.ceiling_db))
    report.aggregate_nmse_db = aggregate_nmse_db(pairs)
    return report
