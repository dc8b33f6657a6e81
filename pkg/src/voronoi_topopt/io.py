"""Masks in, images, site dumps and logs out."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .elasticity import DomainMask
from .pipeline import FIELDS, IterationRecord, OptHistory
from .voronoi_field import SiteSet

logger = logging.getLogger(__name__)


def load_mask(path, nx: int, ny: int) -> DomainMask:
    """Classify a grayscale image into design, passive void and passive solid.

    The image may be an integer multiple of the grid in each direction; it is
    block-averaged down first.  The top image row is the highest ``y``.
    Pixels at or above 2/3 of the maximum are design, at or below 1/3 are
    void, anything in between is solid.
    """
    try:
        with Image.open(path) as img:
            pix = np.asarray(img.convert("F"), dtype=float)
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot read mask {path}: {exc}") from None
    h, w = pix.shape
    if w % nx or h % ny:
        raise ValueError(f"mask is {w}x{h} pixels, not a multiple of the {nx}x{ny} grid")
    fx, fy = w // nx, h // ny
    pix = pix.reshape(ny, fy, nx, fx).mean(axis=(1, 3))[::-1]
    top = pix.max()
    states = np.full((ny, nx), DomainMask.SOLID, dtype=np.int8)
    if top > 0:
        states[pix >= 2 * top / 3] = DomainMask.DESIGN
        states[pix <= top / 3] = DomainMask.VOID
    else:
        states[:] = DomainMask.VOID
    mask = DomainMask(states)
    logger.info("mask %s: %s", path, mask.counts())
    return mask


def density_pixels(rho_tilde) -> np.ndarray:
    """8-bit gray levels, solid dark, with the top row at the highest ``y``."""
    rho = np.clip(np.asarray(rho_tilde, dtype=float), 0.0, 1.0)
    return np.rint(255.0 * (1.0 - rho)).astype(np.uint8)[::-1]


def write_density_image(rho_tilde, path) -> Path:
    """Binary PGM (P5, maxval 255)."""
    path = Path(path)
    pix = density_pixels(rho_tilde)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img)


def sites_to_document(sites: SiteSet, scale: float = 1.0, iteration: int | None = None) -> dict:
    """Site records in config units; ``scale`` is element units per config unit."""
    doc = {"units": "config", "scale": scale, "sites": [
        {"position": [float(v) / scale for v in p],
         "metric_lower": [float(v) * scale for v in m]}
        for p, m in zip(sites.positions, sites.metric_lower)]}
    if iteration is not None:
        doc["iteration"] = iteration
    return doc


def sites_from_document(doc: dict, scale: float | None = None) -> SiteSet:
    """Inverse of ``sites_to_document``; ``scale`` defaults to the stored one."""
    scale = doc.get("scale", 1.0) if scale is None else scale
    try:
        pos = [[v * scale for v in rec["position"]] for rec in doc["sites"]]
        lower = [[v / scale for v in rec["metric_lower"]] for rec in doc["sites"]]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed site dump: {exc}") from None
    return SiteSet(pos, lower)


def write_sites(sites: SiteSet, path, scale: float = 1.0, iteration: int | None = None):
    # repr-based float output round-trips exactly
    Path(path).write_text(json.dumps(sites_to_document(sites, scale, iteration), indent=1))


def read_sites(path, scale: float | None = None) -> SiteSet:
    return sites_from_document(json.loads(Path(path).read_text()), scale)


def write_log(history: OptHistory, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FIELDS)
        for rec in history.records:
            writer.writerow([repr(getattr(rec, f)) for f in FIELDS])


def read_log(path) -> OptHistory:
    hist = OptHistory()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FIELDS:
            raise ValueError(f"{path} does not have the expected log header")
        for row in reader:
            vals = {f: float(row[f]) for f in FIELDS}
            vals["iteration"] = int(row["iteration"])
            hist.append(IterationRecord(**vals))
    return hist


class RunWriter:
    """Pipeline callback that streams the log and emits periodic snapshots.

    Every ``period`` iterations (and on iteration 0) it writes
    ``density_XXXX.pgm`` and ``sites_XXXX.json``; the CSV log gets one row
    per iteration.
    """

    def __init__(self, directory, period: int = 10, scale: float = 1.0):
        if period < 1:
            raise ValueError("emission period must be >= 1")
        self.directory = Path(directory)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {self.directory}: {exc}") from None
        self.period = period
        self.scale = scale
        self.log_path = self.directory / "log.csv"
        self._fh = open(self.log_path, "w", newline="")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(FIELDS)

    def __call__(self, iteration, record, rho_tilde, sites):
        self._csv.writerow([repr(getattr(record, f)) for f in FIELDS])
        self._fh.flush()
        if iteration % self.period == 0:
            self.snapshot(iteration, rho_tilde, sites)

    def snapshot(self, tag, rho_tilde, sites):
        name = f"{tag:04d}" if isinstance(tag, int) else str(tag)
        write_density_image(rho_tilde, self.directory / f"density_{name}.pgm")
        write_sites(sites, self.directory / f"sites_{name}.json", self.scale,
                    tag if isinstance(tag, int) else None)

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_run_outputs(history: OptHistory, snapshots, directory, period: int = 1,
                      scale: float = 1.0):
    """Write a finished run: the log plus a snapshot every ``period`` iterations.

    ``snapshots`` maps iteration -> ``(rho_tilde, sites)``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_log(history, directory / "log.csv")
    for it, (rho_tilde, sites) in sorted(snapshots.items()):
        if it % period == 0:
            write_density_image(rho_tilde, directory / f"density_{it:04d}.pgm")
            write_sites(sites, directory / f"sites_{it:04d}.json", scale, it)
