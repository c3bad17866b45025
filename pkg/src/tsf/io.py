"""On-disk formats.

TSF bundle
    A directory with ``meta.txt`` (UTF-8 ``key=value`` lines) and
    ``frames.bin`` (little-endian float32, layout ``[t][y][x]``). Required
    keys: format_version=1, nx, ny, nt, dt_s (frame interval), dx_m, t_on_s,
    ambient_K, temp_mode. Optional keys describe the solver grid (nz, dy_m,
    dz_m, sim_dt_s) and the beam (src_amplitude, src_center_x, src_center_y,
    src_sigma_px).

Run config
    UTF-8 ``key=value`` file, ``#`` starts a comment. Unknown keys are
    rejected; missing keys fall back to the reference wood scene with a log
    notice.

Maps are written as CSV (one row per y, 17 significant digits) and as
16-bit binary PGM (P5).
"""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import CaptureConfig, GridSpec, ParamMaps, SourceModel, TsfStack
from .errors import FormatError, InvalidArgumentError
from .inverse import OptimConfig

__all__ = [
    "FORMAT_VERSION",
    "write_bundle",
    "read_bundle",
    "read_meta",
    "source_from_meta",
    "write_map_csv",
    "read_map_csv",
    "write_map_pgm",
    "read_pgm",
    "write_curve_csv",
    "write_text",
    "RunConfig",
    "read_manifest",
    "dataset_from_manifest",
]

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_REQUIRED = ("format_version", "nx", "ny", "nt", "dt_s", "dx_m", "t_on_s", "ambient_K", "temp_mode")
_OPTIONAL = ("nz", "dy_m", "dz_m", "sim_dt_s", "src_amplitude", "src_center_x", "src_center_y",
             "src_sigma_px")
_INT_KEYS = {"format_version", "nx", "ny", "nt", "nz"}
DEFAULT_DEPTH_M = 0.03


def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text):
    _atomic_write(path, text.encode("utf-8"))


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_bundle(stack, path, source=None):
    """Write ``stack`` (and optionally its beam) as a TSF bundle directory."""
    g, c = stack.grid, stack.capture
    meta = {
        "format_version": FORMAT_VERSION,
        "nx": g.nx,
        "ny": g.ny,
        "nt": stack.n_frames,
        "dt_s": float(c.frame_dt_s),
        "dx_m": float(g.dx),
        "t_on_s": float(c.t_on_s),
        "ambient_K": float(c.ambient_K),
        "temp_mode": stack.temp_mode,
        "nz": g.nz,
        "dy_m": float(g.dy),
        "dz_m": float(g.dz),
        "sim_dt_s": float(g.dt),
    }
    if source is not None:
        meta.update(
            src_amplitude=float(source.amplitude),
            src_center_x=float(source.center_x),
            src_center_y=float(source.center_y),
            src_sigma_px=float(source.sigma_px),
        )
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    body = stack.frames.astype("<f4").tobytes(order="C")
    _atomic_write(path / "frames.bin", body)
    write_text(path / "meta.txt", "".join(f"{k}={_fmt(v)}\n" for k, v in meta.items()))


def read_meta(path):
    """Parse and validate ``meta.txt`` of a bundle; returns a dict."""
    meta_path = Path(path) / "meta.txt"
    if not meta_path.is_file():
        raise FormatError(f"{meta_path}: missing")
    meta = {}
    try:
        lines = meta_path.read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{meta_path}: not UTF-8 ({exc})") from None
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{meta_path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _REQUIRED and key not in _OPTIONAL:
            raise FormatError(f"{meta_path}: unknown key {key!r}")
        if key in meta:
            raise FormatError(f"{meta_path}: duplicate key {key!r}")
        if key == "temp_mode":
            if value not in ("kelvin", "normalized"):
                raise FormatError(f"{meta_path}: key 'temp_mode' has invalid value {value!r}")
            meta[key] = value
            continue
        try:
            meta[key] = int(value) if key in _INT_KEYS else float(value)
        except ValueError:
            raise FormatError(f"{meta_path}: key {key!r} has invalid value {value!r}") from None
        if key not in _INT_KEYS and not math.isfinite(meta[key]):
            raise FormatError(f"{meta_path}: key {key!r} is not finite")
    for key in _REQUIRED:
        if key not in meta:
            raise FormatError(f"{meta_path}: missing key {key!r}")
    if meta["format_version"] != FORMAT_VERSION:
        raise FormatError(f"{meta_path}: key 'format_version' = {meta['format_version']} is not supported")
    for key in ("nx", "ny", "nt"):
        if meta[key] < 1:
            raise FormatError(f"{meta_path}: key {key!r} must be >= 1")
    for key in ("dt_s", "dx_m", "ambient_K"):
        if meta[key] <= 0:
            raise FormatError(f"{meta_path}: key {key!r} must be > 0")
    return meta


def _grid_capture(meta):
    dx = meta["dx_m"]
    dz = meta.get("dz_m", dx)
    cap = CaptureConfig(meta["t_on_s"], meta["dt_s"], meta["nt"], meta["ambient_K"])
    nz = int(meta.get("nz", max(1, round(DEFAULT_DEPTH_M / dz))))
    grid = GridSpec.for_capture(
        meta["nx"], meta["ny"], nz, dx, meta.get("sim_dt_s", meta["dt_s"]), cap,
        dy=meta.get("dy_m", dx), dz=dz,
    )
    return grid, cap


def read_bundle(path):
    """Load a TSF bundle, validating every meta field before reading frames."""
    path = Path(path)
    meta = read_meta(path)
    try:
        grid, cap = _grid_capture(meta)
    except (InvalidArgumentError, ValueError) as exc:
        raise FormatError(f"{path / 'meta.txt'}: {exc}") from None
    frames_path = path / "frames.bin"
    if not frames_path.is_file():
        raise FormatError(f"{frames_path}: missing")
    expected = 4 * meta["nt"] * meta["ny"] * meta["nx"]
    actual = frames_path.stat().st_size
    if actual != expected:
        raise FormatError(f"{frames_path}: expected {expected} bytes, found {actual}")
    raw = np.fromfile(frames_path, dtype="<f4")
    bad = np.flatnonzero(~np.isfinite(raw))
    if bad.size:
        raise FormatError(f"{frames_path}: non-finite value at byte offset {4 * int(bad[0])}")
    frames = raw.astype(np.float64).reshape(meta["nt"], meta["ny"], meta["nx"])
    try:
        return TsfStack(frames, cap, grid, meta["temp_mode"])
    except InvalidArgumentError as exc:
        raise FormatError(f"{path}: {exc}") from None


def source_from_meta(meta, t_on_s=None):
    """Beam recorded in a bundle, or None if the bundle carries no beam keys."""
    keys = ("src_amplitude", "src_center_x", "src_center_y", "src_sigma_px")
    if not all(k in meta for k in keys):
        return None
    return SourceModel(meta["src_amplitude"], meta["src_center_x"], meta["src_center_y"],
                       meta["src_sigma_px"], meta["t_on_s"] if t_on_s is None else t_on_s)


def write_map_csv(m, path):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise InvalidArgumentError("map must be a finite 2D array")
    text = "".join(",".join(f"{v:.17g}" for v in row) + "\n" for row in m)
    write_text(path, text)


def read_map_csv(path):
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_map_pgm(m, path, lo, hi):
    """16-bit binary PGM with ``round(65535 * clamp((v - lo) / (hi - lo)))``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise InvalidArgumentError("map must be a finite 2D array")
    if not lo < hi:
        raise InvalidArgumentError("PGM range needs lo < hi")
    scaled = np.clip((m - lo) / (hi - lo), 0.0, 1.0) * 65535.0
    pix = np.floor(scaled + 0.5).astype(">u2")
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n65535\n".encode("ascii")
    _atomic_write(path, header + pix.tobytes())


def read_pgm(path):
    """Read a binary 16-bit PGM written by ``write_map_pgm``."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 65535:
        raise FormatError(f"{path}: expected 16-bit maxval")
    pix = np.frombuffer(parts[3], dtype=">u2")
    if pix.size != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, found {pix.size}")
    return pix.reshape(h, w).astype(np.int64)


def write_curve_csv(stack, pixels, path):
    """Temperature traces: ``time_s`` then one column per ``(x, y)`` pixel.

    An empty pixel list produces a header-only file.
    """
    ny, nx = stack.grid.surface_shape
    for x, y in pixels:
        if not (0 <= x < nx and 0 <= y < ny):
            raise InvalidArgumentError(f"pixel ({x}, {y}) outside {nx}x{ny} frame")
    header = ["time_s"] + [f"x{x}_y{y}" for x, y in pixels]
    lines = [",".join(header)]
    if pixels:
        for t, frame in zip(stack.capture.times, stack.frames):
            lines.append(",".join([f"{t:.17g}"] + [f"{frame[y, x]:.17g}" for x, y in pixels]))
    write_text(path, "\n".join(lines) + "\n")


# run config ---------------------------------------------------------------

_CONFIG_DEFAULTS = {
    "nx": 64, "ny": 64, "nz": 24,
    "dx_m": 5e-4, "dy_m": None, "dz_m": None, "dt_s": 0.25,
    "t_on_s": 20.0, "frame_dt_s": 0.25, "n_frames": 161, "ambient_K": 293.15,
    "src_amplitude": 1.0, "src_center_x": None, "src_center_y": None, "src_sigma_px": 2.0,
    "k_true": 1.069e-7, "eps_prime_true": 4.0, "k_bottom_true": None, "top_thickness_m": None,
    "epochs": 400, "lr0": 1e-2, "lr_decay": 0.5, "decay_every": 100,
    "adam_beta1": 0.9, "adam_beta2": 0.9, "adam_eps": 1e-8,
    "k_min": 1e-9, "k_max": 1e-5, "eps_min": 0.0, "eps_max": 10.0,
    "loss_mode": "normalized", "noise_floor_K": 0.1, "roi_radius": None, "initial_mode": "mean",
    "gaussian_sigma_K": 0.05, "seed": 0,
}
_CONFIG_INTS = {"nx", "ny", "nz", "n_frames", "epochs", "decay_every", "seed"}
_CONFIG_STRS = {"loss_mode", "initial_mode"}


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to simulate and invert one scene."""

    values: dict

    @classmethod
    def from_text(cls, text, origin="<config>"):
        vals = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{origin}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _CONFIG_DEFAULTS:
                raise FormatError(f"{origin}:{lineno}: unknown key {key!r}")
            try:
                if key in _CONFIG_STRS:
                    vals[key] = value
                elif key in _CONFIG_INTS:
                    vals[key] = int(value)
                else:
                    vals[key] = float(value)
            except ValueError:
                raise FormatError(f"{origin}:{lineno}: bad value {value!r} for {key!r}") from None
        for key, default in _CONFIG_DEFAULTS.items():
            if key not in vals:
                if default is not None:
                    log.info("%s: %s not set, using default %r", origin, key, default)
                vals[key] = default
        return cls(vals)

    @classmethod
    def from_file(cls, path):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FormatError(f"{path}: {exc}") from None
        return cls.from_text(text, str(path))

    def __getitem__(self, key):
        return self.values[key]

    @property
    def capture(self):
        v = self.values
        return CaptureConfig(v["t_on_s"], v["frame_dt_s"], v["n_frames"], v["ambient_K"])

    @property
    def grid(self):
        v = self.values
        return GridSpec.for_capture(v["nx"], v["ny"], v["nz"], v["dx_m"], v["dt_s"], self.capture,
                                    dy=v["dy_m"], dz=v["dz_m"])

    @property
    def source(self):
        v = self.values
        cx = (v["nx"] - 1) / 2.0 if v["src_center_x"] is None else v["src_center_x"]
        cy = (v["ny"] - 1) / 2.0 if v["src_center_y"] is None else v["src_center_y"]
        return SourceModel(v["src_amplitude"], cx, cy, v["src_sigma_px"], v["t_on_s"])

    @property
    def true_params(self):
        return ParamMaps.uniform(self.grid, self.values["k_true"], self.values["eps_prime_true"])

    def true_k_volume(self):
        """Diffusivity per voxel, two-layered when k_bottom_true and top_thickness_m are set."""
        g = self.grid
        k = np.full(g.shape, self.values["k_true"])
        if self.values["k_bottom_true"] is not None:
            n_top = int(round((self.values["top_thickness_m"] or g.dz) / g.dz))
            k[n_top:] = self.values["k_bottom_true"]
        return k

    @property
    def optim(self):
        v = self.values
        return OptimConfig(
            epochs=v["epochs"], lr0=v["lr0"], lr_decay=v["lr_decay"], decay_every=v["decay_every"],
            adam_beta1=v["adam_beta1"], adam_beta2=v["adam_beta2"], adam_eps=v["adam_eps"],
            k_bounds=(v["k_min"], v["k_max"]), eps_bounds=(v["eps_min"], v["eps_max"]),
            loss_mode=v["loss_mode"], noise_floor_K=v["noise_floor_K"], roi_radius=v["roi_radius"],
            initial_mode=v["initial_mode"],
        )


# dataset manifest ---------------------------------------------------------

_MANIFEST_HEADER = ["bundle_path", "label", "center_x", "center_y"]


def read_manifest(path):
    """Rows of a manifest as ``(row_number, bundle_dir, label, cx, cy)``.

    Relative bundle paths resolve against the manifest's directory. Row
    numbers count data rows from 1.
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != _MANIFEST_HEADER:
            raise FormatError(f"{path}: header must be {','.join(_MANIFEST_HEADER)}")
        rows = []
        for n, row in enumerate(reader, 1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise FormatError(f"{path}: row {n}: expected 4 fields, found {len(row)}")
            bundle, label, cx, cy = (c.strip() for c in row)
            try:
                cx, cy = float(cx), float(cy)
            except ValueError:
                raise FormatError(f"{path}: row {n}: center must be numeric") from None
            if not label:
                raise FormatError(f"{path}: row {n}: empty label")
            bdir = Path(bundle)
            if not bdir.is_absolute():
                bdir = path.parent / bdir
            rows.append((n, bdir, label, cx, cy))
    return rows


def _maps_for_row(n, bdir, cx, cy, cfg, manifest):
    """Cached maps if present (k.csv + eps_prime.csv), otherwise run recovery."""
    from .inverse import recover

    if (bdir / "k.csv").is_file() and (bdir / "eps_prime.csv").is_file():
        return ParamMaps(read_map_csv(bdir / "k.csv"), read_map_csv(bdir / "eps_prime.csv")), False
    if not (bdir / "meta.txt").is_file():
        raise FormatError(f"{manifest}: row {n}: bundle {bdir} not found")
    try:
        stack = read_bundle(bdir)
    except FormatError as exc:
        raise FormatError(f"{manifest}: row {n}: {exc}") from None
    src = source_from_meta(read_meta(bdir))
    if src is None:
        src = SourceModel(1.0, cx, cy, 2.0, stack.capture.t_on_s)
    res = recover(stack, src, stack.grid, cfg or OptimConfig())
    return res.params, res.metal_flag


def dataset_from_manifest(path, window, cfg=None):
    """Build a labelled feature dataset from a manifest.

    Returns ``(dataset, metal_rows)`` where ``metal_rows`` lists the row
    numbers whose capture showed no measurable TSF; those rows are kept out
    of the dataset because they are routed to the metal label instead.
    """
    from .classify import MaterialDataset, extract_features

    samples = []
    metal_rows = []
    for n, bdir, label, cx, cy in read_manifest(path):
        params, metal = _maps_for_row(n, bdir, cx, cy, cfg, path)
        if metal:
            metal_rows.append(n)
            continue
        try:
            fv = extract_features(params, (cx, cy), window)
        except InvalidArgumentError as exc:
            raise FormatError(f"{path}: row {n}: {exc}") from None
        samples.append(type(fv)(fv.values, label))
    if not samples:
        raise FormatError(f"{path}: no usable rows")
    return MaterialDataset.from_samples(samples), metal_rows
