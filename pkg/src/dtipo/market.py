"""Correlated geometric Brownian motion with multiplicative jumps.

Stocks follow ``dS = d⊙S dt + S⊙(σ dW) + S⊙J⊙dX`` and the bond
``dB = r B dt``, both started at 1. ``d`` is the real-world drift ``b`` or
the compensated risk-neutral drift ``r - ξ E[J]``.

Randomness is drawn from Philox streams keyed on (seed, namespace, block of
paths, kind of draw), so path ``m`` of a batch depends only on the seed and
``m``: batches are identical whatever the worker count or batch split.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PATH_BLOCK = 1024
REAL_WORLD = "real-world"
RISK_NEUTRAL = "risk-neutral"
_KIND_NORMAL, _KIND_POISSON, _KIND_JUMP = 0, 1, 2
_NAMESPACES = {"train": 0, "eval": 1, "price": 2, "misc": 3}


@dataclass(frozen=True)
class MarketParams:
    T: float
    N: int
    r: float
    b: np.ndarray
    sigma: np.ndarray
    jump_intensity: np.ndarray
    jump_mean: np.ndarray
    jump_cov: np.ndarray
    euler_substeps: int = 1

    def __post_init__(self):
        for name in ("b", "sigma", "jump_intensity", "jump_mean", "jump_cov"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64))
        k = self.b.shape[0]
        if self.b.shape != (k,) or self.sigma.shape != (k, k):
            raise ValueError("b must be a vector and sigma a square matrix of matching size")
        if self.jump_intensity.shape != (k,) or self.jump_mean.shape != (k,) or self.jump_cov.shape != (k, k):
            raise ValueError("jump parameters do not match the number of stocks")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N}")
        if int(self.euler_substeps) != self.euler_substeps or self.euler_substeps < 1:
            raise ValueError("euler_substeps must be a positive integer")
        if np.any(self.jump_intensity < 0):
            raise ValueError("jump intensities must be non-negative")
        if not np.allclose(self.jump_cov, self.jump_cov.T):
            raise ValueError("jump covariance must be symmetric")
        if np.linalg.eigvalsh(self.jump_cov).min() < -1e-12:
            raise ValueError("jump covariance must be positive semi-definite")
        cov = self.sigma @ self.sigma.T
        if np.any(self.sigma != 0) and np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("sigma sigma^T is not positive definite")

    @property
    def n_stocks(self) -> int:
        return self.b.shape[0]

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    @property
    def has_jumps(self) -> bool:
        return bool(np.any(self.jump_intensity > 0))

    def drift(self, measure: str) -> np.ndarray:
        if measure == REAL_WORLD:
            return self.b
        if measure == RISK_NEUTRAL:
            return self.r - self.jump_intensity * self.jump_mean
        raise ValueError(f"unknown measure {measure!r}")

    def to_dict(self) -> dict:
        return {
            "T": float(self.T), "N": int(self.N), "r": float(self.r),
            "b": self.b.tolist(), "sigma": self.sigma.tolist(),
            "jump_intensity": self.jump_intensity.tolist(),
            "jump_mean": self.jump_mean.tolist(), "jump_cov": self.jump_cov.tolist(),
            "euler_substeps": int(self.euler_substeps),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MarketParams:
        k = len(d["b"])
        return cls(
            T=float(d["T"]), N=int(d["N"]), r=float(d["r"]), b=d["b"], sigma=d["sigma"],
            jump_intensity=d.get("jump_intensity", [0.0] * k),
            jump_mean=d.get("jump_mean", [0.0] * k),
            jump_cov=d.get("jump_cov", np.zeros((k, k)).tolist()),
            euler_substeps=int(d.get("euler_substeps", 1)),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PAPER_SIGMA = np.array([
    [0.23, 0.05, -0.05, 0.05, 0.05],
    [0.05, 0.215, 0.05, 0.05, 0.05],
    [-0.05, 0.05, 0.2, 0.05, 0.05],
    [0.05, 0.05, 0.05, 0.185, 0.05],
    [0.05, 0.05, 0.05, 0.05, 0.17],
])
PAPER_DRIFT = np.array([0.08, 0.07, 0.06, 0.05, 0.04])


def paper_gbm_market() -> MarketParams:
    """Five correlated jump-free stocks, T=2, N=20, r=0.06."""
    return MarketParams(T=2.0, N=20, r=0.06, b=PAPER_DRIFT, sigma=PAPER_SIGMA,
                        jump_intensity=np.zeros(5), jump_mean=np.zeros(5), jump_cov=np.zeros((5, 5)))


def paper_jump_market() -> MarketParams:
    """The same economy with symmetric jumps: intensity 0.05, J ~ N(0, 0.2 I)."""
    return replace(paper_gbm_market(), jump_intensity=np.full(5, 0.05),
                   jump_mean=np.zeros(5), jump_cov=np.diag(np.full(5, 0.2)))


def scale_volatility(params: MarketParams, factor: float) -> MarketParams:
    if not factor > 0:
        raise ValueError(f"volatility factor must be positive, got {factor}")
    return replace(params, sigma=params.sigma * factor)


@dataclass(frozen=True)
class PathBatch:
    """Simulated stock and bond values on the trading grid.

    ``stocks`` has shape (M, N+1, n_stocks); ``bond`` has shape (N+1,).
    """

    measure: str
    stocks: np.ndarray
    bond: np.ndarray
    grid: np.ndarray
    seed: int
    start: int = 0
    params_digest: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.stocks.shape[0]

    @property
    def N(self) -> int:
        return self.stocks.shape[1] - 1

    @property
    def n_stocks(self) -> int:
        return self.stocks.shape[2]

    def subset(self, lo: int, hi: int) -> PathBatch:
        return replace(self, stocks=self.stocks[lo:hi], start=self.start + lo)


def _stream(seed: int, namespace: str, block: int, kind: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _NAMESPACES[namespace], block, kind])
    return np.random.Generator(np.random.Philox(ss))


def _factor(cov: np.ndarray) -> np.ndarray:
    """Square-root factor of a PSD matrix (Cholesky when possible)."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


def _block_draws(params: MarketParams, seed: int, namespace: str, block: int, n: int, steps: int):
    """Standard normals, Poisson counts and jump sizes for one block of paths.

    Each kind of draw comes from its own stream in path-major order, so the
    first ``n`` paths of a block never depend on how many are requested.
    """
    k = params.n_stocks
    z = _stream(seed, namespace, block, _KIND_NORMAL).standard_normal((n, steps, k))
    if not params.has_jumps:
        return z, None, None
    h = params.dt / params.euler_substeps
    counts = _stream(seed, namespace, block, _KIND_POISSON).poisson(params.jump_intensity * h, (n, steps, k))
    jz = _stream(seed, namespace, block, _KIND_JUMP).standard_normal((n, steps, k))
    jumps = params.jump_mean + jz @ _factor(params.jump_cov).T
    return z, counts, jumps


def _euler_block(params: MarketParams, measure: str, seed: int, namespace: str, block: int, n: int) -> np.ndarray:
    sub = params.euler_substeps
    steps = params.N * sub
    h = params.dt / sub
    z, counts, jumps = _block_draws(params, seed, namespace, block, n, steps)
    drift = params.drift(measure)
    dw = (z * np.sqrt(h)) @ params.sigma.T
    out = np.empty((n, params.N + 1, params.n_stocks))
    s = np.ones((n, params.n_stocks))
    out[:, 0] = s
    for i in range(steps):
        inc = drift * h + dw[:, i]
        if counts is not None:
            inc = inc + jumps[:, i] * counts[:, i]
        s = s + s * inc
        # absorbing floor
        np.maximum(s, 0.0, out=s)
        if (i + 1) % sub == 0:
            out[:, (i + 1) // sub] = s
    return out


def _exact_block(params: MarketParams, measure: str, seed: int, namespace: str, block: int, n: int) -> np.ndarray:
    z, _, _ = _block_draws(params, seed, namespace, block, n, params.N)
    cov = params.sigma @ params.sigma.T
    drift = params.drift(measure) - 0.5 * np.diag(cov)
    log_inc = drift * params.dt + (z * np.sqrt(params.dt)) @ params.sigma.T
    out = np.empty((n, params.N + 1, params.n_stocks))
    out[:, 0] = 1.0
    out[:, 1:] = np.exp(np.cumsum(log_inc, axis=1))
    return out


def _generate(block_fn, params, measure, M, seed, namespace, start, workers) -> np.ndarray:
    if M < 1:
        raise ValueError(f"M must be at least 1, got {M}")
    if start < 0:
        raise ValueError("start must be non-negative")
    first, last = start // PATH_BLOCK, (start + M - 1) // PATH_BLOCK
    jobs = []
    for blk in range(first, last + 1):
        need = min(PATH_BLOCK, start + M - blk * PATH_BLOCK)
        jobs.append((blk, need))

    def run(job):
        blk, need = job
        return block_fn(params, measure, seed, namespace, blk, need)

    if workers and workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    paths = np.concatenate(parts, axis=0)
    off = start - first * PATH_BLOCK
    return paths[off:off + M]


def sample_paths(params: MarketParams, M: int, seed: int, measure: str = REAL_WORLD, *,
                 namespace: str = "train", start: int = 0, workers: int = 1) -> PathBatch:
    """Euler–Maruyama paths ``start .. start+M-1`` of the stream ``(seed, namespace)``.

    Uses ``params.euler_substeps`` sub-steps per trading interval and keeps
    only the trading dates. Negative Euler values are floored at zero.
    """
    params.drift(measure)
    stocks = _generate(_euler_block, params, measure, M, seed, namespace, start, workers)
    return PathBatch(measure=measure, stocks=stocks, bond=np.exp(params.r * params.grid), grid=params.grid,
                     seed=seed, start=start, params_digest=params.digest(),
                     meta={"scheme": "euler", "namespace": namespace})


def sample_gbm_exact(params: MarketParams, M: int, seed: int, measure: str = REAL_WORLD, *,
                     namespace: str = "train", start: int = 0, workers: int = 1) -> PathBatch:
    """Exact log-normal sampling on the grid; only valid without jumps."""
    if params.has_jumps:
        raise ValueError("exact GBM sampling requires zero jump intensity")
    params.drift(measure)
    stocks = _generate(_exact_block, params, measure, M, seed, namespace, start, workers)
    return PathBatch(measure=measure, stocks=stocks, bond=np.exp(params.r * params.grid), grid=params.grid,
                     seed=seed, start=start, params_digest=params.digest(),
                     meta={"scheme": "exact", "namespace": namespace})


def sample_terminal_exact(params: MarketParams, M: int, seed: int, measure: str = RISK_NEUTRAL, *,
                          namespace: str = "price", start: int = 0) -> np.ndarray:
    """Exact draws of S_T for the continuous-time jump-diffusion, shape (M, n_stocks).

    The diffusion part is log-normal; each of the Poisson(ξT) jumps of a
    stock multiplies it by (1 + J). A non-positive factor sends the stock to
    the absorbing state 0.
    """
    drift = params.drift(measure)
    k = params.n_stocks
    cov = params.sigma @ params.sigma.T
    chol_j = _factor(params.jump_cov)
    out = np.empty((M, k))
    first, last = start // PATH_BLOCK, (start + M - 1) // PATH_BLOCK
    pos = 0
    for blk in range(first, last + 1):
        lo = max(start, blk * PATH_BLOCK) - blk * PATH_BLOCK
        hi = min(start + M, (blk + 1) * PATH_BLOCK) - blk * PATH_BLOCK
        # whole blocks are always drawn so the jump-slot layout is fixed
        z = _stream(seed, namespace, blk, _KIND_NORMAL).standard_normal((PATH_BLOCK, k))[lo:hi]
        log_s = (drift - 0.5 * np.diag(cov)) * params.T + np.sqrt(params.T) * z @ params.sigma.T
        s = np.exp(log_s)
        if params.has_jumps:
            counts = _stream(seed, namespace, blk, _KIND_POISSON).poisson(params.jump_intensity * params.T,
                                                                          (PATH_BLOCK, k))
            kmax = int(counts.max())
            counts = counts[lo:hi]
            if kmax:
                jz = _stream(seed, namespace, blk, _KIND_JUMP).standard_normal((PATH_BLOCK, kmax, k))[lo:hi]
                factors = 1.0 + params.jump_mean + jz @ chol_j.T
                active = np.arange(kmax)[None, :, None] < counts[:, None, :]
                factors = np.where(active, factors, 1.0)
                dead = np.any(factors <= 0.0, axis=1)
                s = np.where(dead, 0.0, s * np.prod(factors, axis=1))
        out[pos:pos + hi - lo] = s
        pos += hi - lo
    return out


# --- path export / import ---------------------------------------------------

_MAGIC = b"DTIPOPATHS1\n"


def save_paths(batch: PathBatch, path: str | Path, params: MarketParams | None = None) -> None:
    """Binary file: magic line, JSON header line, raw little-endian float64 stocks."""
    header = {
        "shape": list(batch.stocks.shape), "seed": int(batch.seed), "measure": batch.measure,
        "start": int(batch.start), "grid": batch.grid.tolist(), "bond": batch.bond.tolist(),
        "params_hash": batch.params_digest or (params.digest() if params else ""),
        "meta": batch.meta,
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(batch.stocks, dtype="<f8").tobytes())


def load_paths(path: str | Path) -> PathBatch:
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path}: not a path file")
        header = json.loads(fh.readline())
        raw = fh.read()
    shape = tuple(header["shape"])
    if len(raw) != 8 * int(np.prod(shape)):
        raise ValueError(f"{path}: payload size does not match header shape {shape}")
    stocks = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if np.any(stocks < 0) or not np.all(np.isfinite(stocks)):
        raise ValueError(f"{path}: stock values must be finite and non-negative")
    return PathBatch(measure=header["measure"], stocks=stocks, bond=np.array(header["bond"]),
                     grid=np.array(header["grid"]), seed=int(header["seed"]), start=int(header["start"]),
                     params_digest=header.get("params_hash", ""), meta=header.get("meta", {}))
