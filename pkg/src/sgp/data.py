"""Synthetic 1-D latent / 3-D observed data, and the on-disk formats.

Layout of a data directory::

    latent.csv      header "x0", one row per datapoint
    observed.csv    header "y0,y1,y2"
    manifest.json   generator settings (enough to regenerate the files)

With ``fmt="bin"`` the two matrices are stored instead as ``<name>.f64``
(raw little-endian float64, row-major) plus ``<name>.shape`` holding
"rows cols". CSV floats use the shortest repr that round-trips.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as la

from .kernels import KernelSpec, jitchol, kern_cross, kern_gram

EXACT_DRAW_LIMIT = 2000
GENERATOR_INDUCING = 256


@dataclass
class GeneratorSettings:
    n: int
    seed: int
    output_dim: int = 3
    latent_dim: int = 1
    variance: float = 1.0
    lengthscale: float = 1.0
    noise_variance: float = 0.01
    method: str = ""
    inducing: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least 2 datapoints")
        if not self.method:
            self.method = "exact" if self.n <= EXACT_DRAW_LIMIT else "inducing"
        if self.method == "inducing" and not self.inducing:
            self.inducing = GENERATOR_INDUCING


def generate(settings: GeneratorSettings):
    """Draw (latent, observed) following the settings.

    Each output column is an independent GP function draw over the latent
    points plus Gaussian noise. Large n uses a Nystrom draw through
    ``inducing`` grid points: f = k(x, Z) V diag(lambda)^-1/2 eps with
    Kzz = V diag(lambda) V^T truncated to the numerically positive spectrum.
    """
    s = settings
    rng = np.random.default_rng(s.seed)
    theta = KernelSpec(s.variance, np.full(s.latent_dim, s.lengthscale))
    x = rng.standard_normal((s.n, s.latent_dim))
    if s.method == "exact":
        K = kern_gram(x, theta)
        L, _ = jitchol(K, s.variance, rel_start=1e-8)
        F = L @ rng.standard_normal((s.n, s.output_dim))
    elif s.method == "inducing":
        if s.latent_dim != 1:
            raise ValueError("inducing-point draws are implemented for a 1-d latent")
        grid = np.linspace(x.min() - s.lengthscale, x.max() + s.lengthscale, s.inducing)[:, None]
        lam, V = la.eigh(kern_gram(grid, theta))
        keep = lam > lam.max() * 1e-12
        feats = kern_cross(x, grid, theta) @ (V[:, keep] / np.sqrt(lam[keep]))
        F = feats @ rng.standard_normal((int(keep.sum()), s.output_dim))
    else:
        raise ValueError(f"unknown method {s.method!r}")
    Y = F + np.sqrt(s.noise_variance) * rng.standard_normal((s.n, s.output_dim))
    return x, Y


def format_float(v: float) -> str:
    return repr(float(v))


def write_matrix(path: Path, A: np.ndarray, prefix: str, fmt: str = "csv"):
    path = Path(path)
    A = np.atleast_2d(A)
    if fmt == "csv":
        with open(path.with_suffix(".csv"), "w", newline="\n") as fh:
            fh.write(",".join(f"{prefix}{j}" for j in range(A.shape[1])) + "\n")
            for row in A:
                fh.write(",".join(format_float(v) for v in row) + "\n")
    elif fmt == "bin":
        A.astype("<f8").tofile(path.with_suffix(".f64"))
        path.with_suffix(".shape").write_text(f"{A.shape[0]} {A.shape[1]}\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


class DataFormatError(ValueError):
    pass


def read_matrix(path: Path) -> np.ndarray:
    """Read ``<path>.csv`` or ``<path>.f64``/``.shape``; CSV errors name the line."""
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    if csv_path.exists():
        rows = []
        with open(csv_path) as fh:
            header = fh.readline().strip().split(",")
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                parts = line.strip().split(",")
                if len(parts) != len(header):
                    raise DataFormatError(f"{csv_path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
                try:
                    rows.append([float(p) for p in parts])
                except ValueError as err:
                    raise DataFormatError(f"{csv_path}:{lineno}: {err}") from None
        if not rows:
            raise DataFormatError(f"{csv_path}: no data rows")
        return np.array(rows)
    bin_path = path.with_suffix(".f64")
    if bin_path.exists():
        try:
            r, c = (int(t) for t in path.with_suffix(".shape").read_text().split())
        except (OSError, ValueError) as err:
            raise DataFormatError(f"{path.with_suffix('.shape')}: {err}") from None
        A = np.fromfile(bin_path, dtype="<f8")
        if A.size != r * c:
            raise DataFormatError(f"{bin_path}: {A.size} values, shape file says {r}x{c}")
        return A.reshape(r, c)
    raise FileNotFoundError(f"no {csv_path.name} or {bin_path.name} in {path.parent}")


def save_dataset(out: Path, settings: GeneratorSettings, x, Y, fmt: str = "csv"):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "latent", x, "x", fmt)
    write_matrix(out / "observed", Y, "y", fmt)
    manifest = {"generator": asdict(settings), "format": fmt, "files": ["latent", "observed"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path: Path):
    """Returns (latent or None, observed, manifest dict)."""
    path = Path(path)
    manifest = {}
    if (path / "manifest.json").exists():
        manifest = json.loads((path / "manifest.json").read_text())
    Y = read_matrix(path / "observed")
    try:
        x = read_matrix(path / "latent")
    except FileNotFoundError:
        x = None
    return x, Y, manifest
