"""Dataset synthesis: random urban scenes, random beams, ground-truth maps.

A dataset directory holds manifest.json (scenes, splits, seeds, normalization
constants, resolved config + hash) plus four tensor files per record: the dB
map, the building grid, the tx one-hot grid, and the beam weights stored as
2*N_t interleaved real/imag floats. Records are split into train /
unseen_beams (trained tx, held-out beams) / unseen_locations (held-out tx).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import config_hash, read_tensor, write_tensor
from .propagation import (BeamVector, ChannelParams, ChannelMap, EnvScene,
                          channel_field, db_to_unit, generate_ckm,
                          make_random_beam)


@dataclass
class DatasetConfig:
    seed: int = 0
    n_scenes: int = 4
    train_tx_per_scene: int = 3
    heldout_tx_per_scene: int = 1
    train_beams_per_tx: int = 6
    heldout_beams_per_tx: int = 2
    height_px: int = 64
    width_px: int = 64
    resolution_m: float = 1.0
    n_antennas: int = 8
    spacing_ratio: float = 0.5
    power_budget: float = 1.0
    n_buildings: tuple[int, int] = (2, 4)       # inclusive range per scene
    building_size: tuple[int, int] = (5, 12)    # inclusive side length range
    tx_margin_px: int = 8                       # keep tx away from edges
    beam_theta_deg: float = 80.0                # |theta| < this, in degrees
    beam_perturb_sigma: float = 0.1
    ceiling_db: float = 0.0
    write_png: bool = False
    channel: ChannelParams = field(default_factory=ChannelParams)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_buildings"] = list(self.n_buildings)
        d["building_size"] = list(self.building_size)
        d["channel"]["noise_floor_db"] = (
            None if math.isinf(self.channel.noise_floor_db) else self.channel.noise_floor_db)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        ch = dict(d.pop("channel", {}))
        if ch.get("noise_floor_db") is None:
            ch["noise_floor_db"] = -math.inf
        d["n_buildings"] = tuple(d.get("n_buildings", (2, 4)))
        d["building_size"] = tuple(d.get("building_size", (5, 12)))
        return cls(channel=ChannelParams(**ch), **d)


def random_scene(rng: np.random.Generator, cfg: DatasetConfig, scene_id: str,
                 n_tx: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Random axis-aligned building rectangles plus tx positions on free pixels."""
    h, w = cfg.height_px, cfg.width_px
    grid = np.zeros((h, w), dtype=np.uint8)
    n_rect = int(rng.integers(cfg.n_buildings[0], cfg.n_buildings[1] + 1))
    for _ in range(n_rect):
        bh = int(rng.integers(cfg.building_size[0], cfg.building_size[1] + 1))
        bw = int(rng.integers(cfg.building_size[0], cfg.building_size[1] + 1))
        r0 = int(rng.integers(1, max(h - bh - 1, 2)))
        c0 = int(rng.integers(1, max(w - bw - 1, 2)))
        grid[r0:r0 + bh, c0:c0 + bw] = 1

    m = cfg.tx_margin_px
    positions: list[tuple[int, int]] = []
    attempts = 0
    while len(positions) < n_tx:
        attempts += 1
        if attempts > 10_000:
            raise RuntimeError(f"{scene_id}: could not place {n_tx} transmitters")
        r = int(rng.integers(m, h - m))
        c = int(rng.integers(m, w - m))
        if grid[r, c] or (r, c) in positions:
            continue
        positions.append((r, c))
    return grid, positions


@dataclass
class DatasetRecord:
    record_id: str
    scene_idx: int
    tx_idx: int
    beam_idx: int
    map_db: np.ndarray
    buildings: np.ndarray
    tx_onehot: np.ndarray
    beam: np.ndarray  # complex

    def map_unit(self, floor_db: float, ceiling_db: float = 0.0) -> np.ndarray:
        return db_to_unit(self.map_db, floor_db, ceiling_db)

    def beam_interleaved(self) -> np.ndarray:
        out = np.empty(2 * self.beam.shape[0])
        out[0::2] = self.beam.real
        out[1::2] = self.beam.imag
        return out


def beam_from_interleaved(flat: np.ndarray, power_budget: float = 1.0) -> BeamVector:
    flat = np.asarray(flat, dtype=np.float64).reshape(-1)
    if flat.size % 2 != 0:
        raise ValueError("interleaved beam needs an even number of floats")
    return BeamVector(flat[0::2] + 1j * flat[1::2], power_budget=power_budget)


def generate_dataset(cfg: DatasetConfig, out_dir: str | Path) -> dict:
    """Write all records + manifest; returns the manifest dict."""
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    theta = math.radians(cfg.beam_theta_deg)

    scenes_meta = []
    records_meta = {}
    splits: dict[str, list[str]] = {"train": [], "unseen_beams": [], "unseen_locations": []}
    n_tx = cfg.train_tx_per_scene + cfg.heldout_tx_per_scene
    n_beams = cfg.train_beams_per_tx + cfg.heldout_beams_per_tx

    for si in range(cfg.n_scenes):
        sid = f"s{si:02d}"
        grid, tx_positions = random_scene(rng, cfg, sid, n_tx)
        write_tensor(out / "records" / f"{sid}_buildings.bckm", grid.astype(np.float32))
        scenes_meta.append({"scene": sid, "tx_positions": [list(p) for p in tx_positions],
                            "buildings_file": f"records/{sid}_buildings.bckm"})
        for ti, tx in enumerate(tx_positions):
            scene = EnvScene(cfg.width_px, cfg.height_px, cfg.resolution_m, grid,
                             tx_pos=tx, scene_id=sid)
            fld = channel_field(scene, cfg.channel, cfg.n_antennas, cfg.spacing_ratio)
            for bi in range(n_beams):
                beam = make_random_beam(rng, cfg.n_antennas, (-theta, theta),
                                        cfg.beam_perturb_sigma, cfg.power_budget,
                                        cfg.spacing_ratio)
                ckm = generate_ckm(scene, cfg.channel, beam, cfg.spacing_ratio, field=fld)
                rid = f"{sid}_t{ti:02d}_b{bi:02d}"
                rec = DatasetRecord(rid, si, ti, bi, ckm.values_db, grid,
                                    scene.tx_onehot(), beam.weights)
                _write_record(out, rec, sid, cfg)
                records_meta[rid] = {"scene": sid, "tx": ti, "beam": bi,
                                     "tx_pos": list(tx)}
                if ti >= cfg.train_tx_per_scene:
                    splits["unseen_locations"].append(rid)
                elif bi >= cfg.train_beams_per_tx:
                    splits["unseen_beams"].append(rid)
                else:
                    splits["train"].append(rid)

    resolved = cfg.to_dict()
    manifest = {
        "format": "beamckm-dataset",
        "seed": cfg.seed,
        "normalization": {"floor_db": cfg.channel.floor_db, "ceiling_db": cfg.ceiling_db},
        "n_antennas": cfg.n_antennas,
        "power_budget": cfg.power_budget,
        "spacing_ratio": cfg.spacing_ratio,
        "scenes": scenes_meta,
        "records": records_meta,
        "splits": splits,
        "config": resolved,
        "config_hash": config_hash(resolved),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _write_record(out: Path, rec: DatasetRecord, sid: str, cfg: DatasetConfig) -> None:
    base = out / "records" / rec.record_id
    write_tensor(f"{base}_map.bckm", rec.map_db.astype(np.float32))
    write_tensor(f"{base}_buildings.bckm", rec.buildings.astype(np.float32))
    write_tensor(f"{base}_tx.bckm", rec.tx_onehot.astype(np.float32))
    write_tensor(f"{base}_beam.bckm", rec.beam_interleaved().astype(np.float32))
    if cfg.write_png:
        from .pngio import save_grayscale
        save_grayscale(f"{base}.png",
                       db_to_unit(rec.map_db, cfg.channel.floor_db, cfg.ceiling_db))


class Dataset:
    """Loaded dataset directory with record access by id."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest = json.loads((self.root / "manifest.json").read_text())
        self.splits: dict[str, list[str]] = self.manifest["splits"]
        self.normalization = self.manifest["normalization"]
        self.n_antennas: int = self.manifest["n_antennas"]

    @property
    def floor_db(self) -> float:
        return self.normalization["floor_db"]

    @property
    def ceiling_db(self) -> float:
        return self.normalization["ceiling_db"]

    def record(self, rid: str) -> DatasetRecord:
        meta = self.manifest["records"][rid]
        base = self.root / "records" / rid
        map_db = read_tensor(f"{base}_map.bckm").astype(np.float64)
        buildings = read_tensor(f"{base}_buildings.bckm").astype(np.float64)
        tx = read_tensor(f"{base}_tx.bckm").astype(np.float64)
        flat = read_tensor(f"{base}_beam.bckm").astype(np.float64)
        beam = flat[0::2] + 1j * flat[1::2]
        return DatasetRecord(rid, int(meta["scene"][1:]), meta["tx"], meta["beam"],
                             map_db, buildings, tx, beam)

    def scene_for(self, rid: str) -> EnvScene:
        meta = self.manifest["records"][rid]
        cfg = self.manifest["config"]
        grid = read_tensor(self.root / "records" / f"{meta['scene']}_buildings.bckm")
        return EnvScene(cfg["width_px"], cfg["height_px"], cfg["resolution_m"],
                        grid.astype(np.uint8), tx_pos=tuple(meta["tx_pos"]),
                        scene_id=meta["scene"])

    def channel_params(self) -> ChannelParams:
        ch = dict(self.manifest["config"]["channel"])
        if ch.get("noise_floor_db") is None:
            ch["noise_floor_db"] = -math.inf
        return ChannelParams(**ch)

    def truth_map(self, rid: str) -> ChannelMap:
        rec = self.record(rid)
        return ChannelMap(values_db=rec.map_db,
                          valid_mask=(rec.buildings == 0).astype(np.uint8),
                          beam=BeamVector(rec.beam,
                                          power_budget=self.manifest["power_budget"]),
                          scene_id=self.manifest["records"][rid]["scene"])
