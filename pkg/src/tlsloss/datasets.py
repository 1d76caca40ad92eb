"""Dataset containers and file formats.

Loss surfaces travel as CSV with header
``pac_dbm,ebdot_v_per_um_s,n_photons,tan_delta`` (column order free, header
keyed; ``n_photons`` may be empty when derivable from power). IQ traces use
``freq_hz,re,im``. Lines starting with ``#`` are metadata and are skipped.
Model/plan parameters use a flat ``key = value`` format, SI units, with
``#`` comments.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

__all__ = [
    "LossSample",
    "LossSurface",
    "SchemaError",
    "read_loss_csv",
    "write_loss_csv",
    "read_config",
    "write_config",
    "config_hash",
]

LOSS_COLUMNS = ("pac_dbm", "ebdot_v_per_um_s", "n_photons", "tan_delta")


class SchemaError(ValueError):
    """A data file does not match its declared schema."""


@dataclass(frozen=True)
class LossSample:
    pac_dbm: float
    ebdot: float      # V/(m s)
    n_photons: float
    tan_delta: float


@dataclass
class LossSurface:
    """Columnar (power, bias rate, photon number, loss) records.

    ``ebdot`` is stored in SI V/(m s); the CSV column is V/(um s).
    """

    pac_dbm: np.ndarray
    ebdot: np.ndarray
    n_photons: np.ndarray
    tan_delta: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.tan_delta)
        for name in ("pac_dbm", "ebdot", "n_photons"):
            if len(getattr(self, name)) != n:
                raise ValueError("surface columns must have equal length")

    def __len__(self) -> int:
        return len(self.tan_delta)

    def samples(self) -> list[LossSample]:
        return [LossSample(float(p), float(e), float(n), float(t))
                for p, e, n, t in zip(self.pac_dbm, self.ebdot,
                                      self.n_photons, self.tan_delta)]

    def subset(self, mask: np.ndarray) -> "LossSurface":
        return LossSurface(self.pac_dbm[mask], self.ebdot[mask],
                           self.n_photons[mask], self.tan_delta[mask],
                           dict(self.meta))


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def write_loss_csv(surface: LossSurface, path,
                   columns: Iterable[str] = LOSS_COLUMNS,
                   header_meta: Optional[dict] = None) -> None:
    """Write a surface; ``header_meta`` entries go into leading ``# k: v``
    lines so artifacts carry their provenance."""
    columns = tuple(columns)
    unknown = set(columns) - set(LOSS_COLUMNS)
    if unknown:
        raise ValueError(f"unknown columns {sorted(unknown)}")
    getters = {
        "pac_dbm": surface.pac_dbm,
        "ebdot_v_per_um_s": surface.ebdot * 1e-6,
        "n_photons": surface.n_photons,
        "tan_delta": surface.tan_delta,
    }
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(header_meta or {}):
            fh.write(f"# {k}: {(header_meta or {})[k]}\n")
        fh.write(",".join(columns) + "\n")
        cols = [getters[c] for c in columns]
        for i in range(len(surface)):
            fh.write(",".join(_fmt(col[i]) for col in cols) + "\n")


def read_loss_csv(path) -> LossSurface:
    """Read and validate a loss-surface CSV.

    Rejects empty files, missing required columns, NaN or negative loss and
    unknown headers. ``n_photons`` may be absent or empty per row; those
    entries come back as NaN for the caller to derive from power.
    """
    header, rows, meta = _read_table(path)
    required = {"pac_dbm", "ebdot_v_per_um_s", "tan_delta"}
    missing = required - set(header)
    if missing:
        raise SchemaError(f"{path}: missing columns {sorted(missing)}")
    unknown = set(header) - set(LOSS_COLUMNS)
    if unknown:
        raise SchemaError(f"{path}: unknown columns {sorted(unknown)}")
    idx = {name: header.index(name) for name in header}
    n_rows = len(rows)
    pac = np.empty(n_rows)
    ebd = np.empty(n_rows)
    nph = np.full(n_rows, np.nan)
    tan = np.empty(n_rows)
    for i, (lineno, cells) in enumerate(rows):
        if len(cells) != len(header):
            raise SchemaError(f"{path}:{lineno}: expected {len(header)} "
                              f"fields, got {len(cells)}")
        pac[i] = _parse_float(cells[idx["pac_dbm"]], path, lineno)
        ebd[i] = _parse_float(cells[idx["ebdot_v_per_um_s"]], path, lineno) * 1e6
        tan[i] = _parse_float(cells[idx["tan_delta"]], path, lineno)
        if "n_photons" in idx and cells[idx["n_photons"]] not in ("", "nan"):
            nph[i] = _parse_float(cells[idx["n_photons"]], path, lineno)
        if math.isnan(tan[i]) or tan[i] < 0:
            raise SchemaError(f"{path}:{lineno}: tan_delta must be a "
                              f"nonnegative number, got {cells[idx['tan_delta']]}")
        if ebd[i] < 0:
            raise SchemaError(f"{path}:{lineno}: negative bias rate")
    return LossSurface(pac, ebd, nph, tan, meta)


def _parse_float(cell: str, path, lineno: int) -> float:
    try:
        return float(cell)
    except ValueError as exc:
        raise SchemaError(f"{path}:{lineno}: not a number: {cell!r}") from exc


def _read_table(path) -> tuple[list[str], list[tuple[int, list[str]]], dict]:
    meta: dict = {}
    header: Optional[list[str]] = None
    rows: list[tuple[int, list[str]]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    k, v = body.split(":", 1)
                    meta[k.strip()] = v.strip()
                continue
            if header is None:
                header = [c.strip() for c in line.split(",")]
                continue
            rows.append((lineno, [c.strip() for c in line.split(",")]))
    if header is None:
        raise SchemaError(f"{path}: empty file, no header")
    return header, rows, meta


# --- flat key = value configuration files -----------------------------------

def read_config(path) -> dict[str, float | str]:
    """Parse a flat ``key = value`` file; values become floats when they
    parse as numbers, strings otherwise."""
    out: dict[str, float | str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise SchemaError(f"{path}:{lineno}: empty key")
            try:
                out[key] = float(value)
            except ValueError:
                out[key] = value
    return out


def write_config(cfg: dict, path, header: Optional[str] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for key in sorted(cfg):
            value = cfg[key]
            text = repr(float(value)) if isinstance(value, (int, float)) \
                and not isinstance(value, bool) else str(value)
            fh.write(f"{key} = {text}\n")


def config_hash(cfg: dict) -> str:
    """Stable short hash of a resolved configuration."""
    canon = "\n".join(f"{k}={cfg[k]!r}" for k in sorted(cfg))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
