"""Synthetic fluence generation and all on-disk formats.

Fluence files (text, human-diffable)::

    FLU 1 <rows> <cols>
    <cols floats> ... one line per row

Plan files::

    PLN 1 <K> <rows> <cols>
    CP 1 MU <mu>
    <a> <b>          ... one line per leaf pair
    CP 2 MU <mu>
    ...

Floats are written with Python's shortest round-trip repr so write->read is
bit-exact. A corpus manifest is a newline list of fluence paths (relative
paths resolve against the manifest's directory); an optional sentinel line
``# split: train|val|test`` switches the split for subsequent entries.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .core import FluenceGrid, LeafPair, MachineState, PlanSequence, as_grid
from .errors import ContractError, ParseError
from .refine import DEFAULT_MU_MAX

SPLITS = ("train", "val", "test")


# -- synthetic fluence generation ----------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Controls the synthetic corpus: blob counts, sizes, amplitudes.

    Blobs are flat-topped ellipses with a short linear shoulder and a slight
    tilt toward the center, mimicking the high-contrast patchy structure of
    optimized fluence maps; widths are the ellipse semi-axes in cells.
    """

    shape: tuple[int, int] = (8, 32)
    n_blobs: tuple[int, int] = (1, 1)
    amplitude: tuple[float, float] = (2.5, 14.0)
    width_rows: tuple[float, float] = (1.5, 3.0)
    width_cols: tuple[float, float] = (3.0, 7.0)
    plateau_prob: float = 0.0
    hard: bool = False
    seed: int = 0
    shoulder: float = 0.4  # linear falloff band, relative to the semi-axes

    def __post_init__(self) -> None:
        if self.shape[0] < 1 or self.shape[1] < 2:
            raise ContractError(f"bad shape {self.shape}")
        if self.n_blobs[0] < 1 or self.n_blobs[1] < self.n_blobs[0]:
            raise ContractError(f"bad blob count range {self.n_blobs}")
        if self.amplitude[0] <= 0 or self.amplitude[1] < self.amplitude[0]:
            raise ContractError(f"bad amplitude range {self.amplitude}")
        if not 0 <= self.plateau_prob <= 1:
            raise ContractError(f"bad plateau probability {self.plateau_prob}")


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return float(lo if lo == hi else rng.uniform(lo, hi))


def _add_blob(v: np.ndarray, cfg: SynthConfig, rng: np.random.Generator,
              col_band: tuple[int, int]) -> None:
    n_rows, _ = v.shape
    lo, hi = col_band
    cr = rng.uniform(0.5, n_rows - 0.5)
    cc = rng.uniform(lo + 0.5, hi - 0.5)
    amp = _uniform(rng, cfg.amplitude)
    sr = _uniform(rng, cfg.width_rows)
    sc = _uniform(rng, cfg.width_cols)
    rows = np.arange(n_rows)[:, None]
    cols = np.arange(v.shape[1])[None, :]
    # elliptical radius: 1.0 at the plateau edge, shoulder ends at 1 + w
    radius = np.sqrt(((rows - cr) / sr) ** 2 + ((cols - cc) / sc) ** 2)
    w = max(cfg.shoulder, 1e-6)
    ramp = np.clip(1.0 - (radius - 1.0) / w, 0.0, 1.0)
    tilt = 1.0 - 0.03 * np.minimum(radius, 1.0 + w) / (1.0 + w)
    blob = amp * ramp * tilt
    blob[:, : lo] = 0.0
    blob[:, hi:] = 0.0
    v += blob


def _add_plateau(v: np.ndarray, cfg: SynthConfig, rng: np.random.Generator,
                 col_band: tuple[int, int]) -> None:
    n_rows, _ = v.shape
    lo, hi = col_band
    r0 = int(rng.integers(0, n_rows))
    r1 = int(rng.integers(r0 + 1, n_rows + 1))
    c0 = int(rng.integers(lo, hi - 1))
    c1 = int(rng.integers(c0 + 1, hi))
    v[r0:r1, c0:c1] += _uniform(rng, cfg.amplitude) * 0.5


def count_components(v: np.ndarray) -> int:
    """4-connected positive components, by flood fill."""
    positive = v > 0
    seen = np.zeros_like(positive, dtype=bool)
    n = 0
    n_rows, n_cols = v.shape
    for r0 in range(n_rows):
        for c0 in range(n_cols):
            if positive[r0, c0] and not seen[r0, c0]:
                n += 1
                stack = [(r0, c0)]
                seen[r0, c0] = True
                while stack:
                    r, c = stack.pop()
                    for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                        if 0 <= rr < n_rows and 0 <= cc < n_cols:
                            if positive[rr, cc] and not seen[rr, cc]:
                                seen[rr, cc] = True
                                stack.append((rr, cc))
    return n


def gen_fluence(cfg: SynthConfig, rng: np.random.Generator | None = None) -> FluenceGrid:
    """One synthetic target: Gaussian blobs plus optional plateaus, with a
    small-value cutoff so the grid has genuine zeros; hard mode lays 2-4
    islands separated by guaranteed zero column gaps."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n_rows, n_cols = cfg.shape
    for _ in range(32):
        v = np.zeros(cfg.shape)
        if cfg.hard:
            n_islands = int(rng.integers(2, 5))
            # split columns into bands with a one-column gap between them
            usable = n_cols - (n_islands - 1)
            edges = np.linspace(0, usable, n_islands + 1).astype(int)
            bands = [
                (int(edges[i] + i), int(edges[i + 1] + i)) for i in range(n_islands)
            ]
            bands = [band for band in bands if band[1] - band[0] >= 3]
        else:
            bands = [(0, n_cols)]
        for band in bands:
            for _ in range(int(rng.integers(cfg.n_blobs[0], cfg.n_blobs[1] + 1))):
                _add_blob(v, cfg, rng, band)
            if rng.random() < cfg.plateau_prob:
                _add_plateau(v, cfg, rng, band)
        v[v < 0.02 * v.max()] = 0.0
        if cfg.hard:
            for band_a, band_b in zip(bands[:-1], bands[1:]):
                v[:, band_a[1] : band_b[0]] = 0.0
            if count_components(v) < 2:
                continue
        if (v > 0).any():
            return FluenceGrid(v)
    raise ContractError("failed to generate a usable fluence; widen the config ranges")


# -- text formats ---------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_fluence(path: str | os.PathLike, grid: FluenceGrid | np.ndarray) -> None:
    grid = as_grid(grid)
    n_rows, n_cols = grid.shape
    lines = [f"FLU 1 {n_rows} {n_cols}"]
    for row in grid.values:
        lines.append(" ".join(_fmt(x) for x in row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_positive_int(token: str, path: str, line_no: int, what: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise ParseError(f"{path}:{line_no}: {what} is not an integer: {token!r}") from None
    if value <= 0:
        raise ParseError(f"{path}:{line_no}: {what} must be positive, got {value}")
    return value


def read_fluence(path: str | os.PathLike) -> FluenceGrid:
    path = os.fspath(path)
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != "FLU":
        raise ParseError(f"{path}:1: expected header 'FLU 1 <rows> <cols>'")
    if header[1] != "1":
        raise ParseError(f"{path}:1: unsupported fluence format version {header[1]!r}")
    n_rows = _parse_positive_int(header[2], path, 1, "row count")
    n_cols = _parse_positive_int(header[3], path, 1, "column count")
    if n_cols < 2:
        raise ParseError(f"{path}:1: column count must be >= 2, got {n_cols}")
    if len(lines) != 1 + n_rows:
        raise ParseError(
            f"{path}:{len(lines)}: expected {n_rows} data lines, found {len(lines) - 1}"
        )
    values = np.empty((n_rows, n_cols))
    for i in range(n_rows):
        line_no = i + 2
        tokens = lines[1 + i].split()
        if len(tokens) != n_cols:
            raise ParseError(f"{path}:{line_no}: expected {n_cols} values, got {len(tokens)}")
        try:
            row = np.array([float(t) for t in tokens])
        except ValueError:
            raise ParseError(f"{path}:{line_no}: non-numeric value") from None
        if not np.all(np.isfinite(row)):
            raise ParseError(f"{path}:{line_no}: non-finite value")
        if np.any(row < 0):
            raise ParseError(f"{path}:{line_no}: negative fluence value")
        values[i] = row
    return FluenceGrid(values)


def write_plan(
    path: str | os.PathLike, plan: PlanSequence, mu_max: float = DEFAULT_MU_MAX
) -> None:
    n_rows, n_cols = plan.grid_shape
    pos = plan.positions()
    if np.any(pos < 0) or np.any(pos > n_cols) or np.any(pos[:, :, 0] > pos[:, :, 1]):
        raise ContractError("plan has unenforced leaf positions")
    mus = plan.monitor_units()
    if np.any(mus < 0) or np.any(mus > mu_max):
        raise ContractError(f"plan MU outside [0, {mu_max}]")
    lines = [f"PLN 1 {plan.n_cp} {n_rows} {n_cols}"]
    for k, state in enumerate(plan.states):
        lines.append(f"CP {k + 1} MU {_fmt(state.mu)}")
        for pair in state.pairs:
            lines.append(f"{pair.a} {pair.b}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_plan(path: str | os.PathLike, mu_max: float = DEFAULT_MU_MAX) -> PlanSequence:
    path = os.fspath(path)
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty file")
    header = lines[0].split()
    if len(header) != 5 or header[0] != "PLN":
        raise ParseError(f"{path}:1: expected header 'PLN 1 <K> <rows> <cols>'")
    if header[1] != "1":
        raise ParseError(f"{path}:1: unsupported plan format version {header[1]!r}")
    n_cp = _parse_positive_int(header[2], path, 1, "control point count")
    n_rows = _parse_positive_int(header[3], path, 1, "row count")
    n_cols = _parse_positive_int(header[4], path, 1, "column count")
    if n_cols < 2:
        raise ParseError(f"{path}:1: column count must be >= 2, got {n_cols}")
    expected = 1 + n_cp * (1 + n_rows)
    if len(lines) != expected:
        raise ParseError(f"{path}:{len(lines)}: expected {expected} lines, found {len(lines)}")
    states = []
    cursor = 1
    for k in range(n_cp):
        line_no = cursor + 1
        tokens = lines[cursor].split()
        if len(tokens) != 4 or tokens[0] != "CP" or tokens[2] != "MU":
            raise ParseError(f"{path}:{line_no}: expected 'CP <k> MU <mu>'")
        if tokens[1] != str(k + 1):
            raise ParseError(f"{path}:{line_no}: control points out of order")
        try:
            mu = float(tokens[3])
        except ValueError:
            raise ParseError(f"{path}:{line_no}: bad MU value {tokens[3]!r}") from None
        if not np.isfinite(mu) or mu < 0 or mu > mu_max:
            raise ParseError(f"{path}:{line_no}: MU outside [0, {mu_max}]")
        cursor += 1
        pairs = []
        for _ in range(n_rows):
            line_no = cursor + 1
            tokens = lines[cursor].split()
            if len(tokens) != 2:
                raise ParseError(f"{path}:{line_no}: expected '<a> <b>'")
            try:
                a, b = int(tokens[0]), int(tokens[1])
            except ValueError:
                raise ParseError(f"{path}:{line_no}: non-integer leaf position") from None
            if not (0 <= a <= b <= n_cols):
                raise ParseError(f"{path}:{line_no}: leaf positions violate 0 <= a <= b <= cols")
            pairs.append(LeafPair(a, b))
            cursor += 1
        states.append(MachineState(tuple(pairs), mu))
    return PlanSequence(tuple(states), (n_rows, n_cols))


# -- corpus manifests -------------------------------------------------------------


def write_manifest(path: str | os.PathLike, entries: dict[str, list[str]]) -> None:
    """Write split -> relative path lists; empty splits are omitted."""
    lines = []
    for split in SPLITS:
        paths = entries.get(split, [])
        if not paths:
            continue
        lines.append(f"# split: {split}")
        lines.extend(str(p) for p in paths)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> dict[str, list[str]]:
    """Parse a manifest into absolute paths per split (default split: train)."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read manifest: {exc}") from None
    out: dict[str, list[str]] = {split: [] for split in SPLITS}
    current = "train"
    for i, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("split:"):
                name = body[len("split:") :].strip()
                if name not in SPLITS:
                    raise ParseError(f"{path}:{i}: unknown split {name!r}")
                current = name
            continue
        out[current].append(line if os.path.isabs(line) else os.path.join(base, line))
    if not any(out.values()):
        raise ParseError(f"{path}: manifest lists no fluence files")
    return out
