"""Seeded random instances for the SCAD least-squares and compressed sensing families.

Every draw comes from one :func:`~rapopt.rng.make_rng` stream in a fixed
order, so ``(family, sizes, seed)`` determines an instance bit for bit.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .problems import (
    BlockSpec,
    MultiBlockProblem,
    read_dense,
    read_sparse,
    write_dense,
    write_sparse,
)
from .rng import make_rng, normal
from .scad import ScadLeastSquares, ScadParams, SeparableScad, build_scad_ls

FAMILIES = ("scad-ls", "compressed-sensing")
DEFAULT_RHO = {"scad-ls": 0.01, "compressed-sensing": 2.0}
DEFAULT_NNZ = {"scad-ls": 20, "compressed-sensing": 200}


@dataclass
class GenSpec:
    """Instance recipe.

    For ``scad-ls``, ``m`` is the number of rows (components) and ``n`` the
    signal length.  For ``compressed-sensing``, ``m`` counts all blocks
    including the identity last block, which has dimension ``n``; the other
    ``m - 1`` blocks have dimension ``d``.
    """

    family: str = "scad-ls"
    m: int = 1000
    n: int = 100
    d: int = 1
    sparsity: float = 0.1
    nnz_signal: Optional[int] = None
    seed: int = 0
    scad: Optional[ScadParams] = None
    redraws: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.m < 1 or self.n < 1 or self.d < 1:
            raise ValueError("m, n and d must be positive")
        if self.family == "compressed-sensing" and self.m < 2:
            raise ValueError("compressed sensing needs m >= 2 blocks")
        if not 0.0 < self.sparsity <= 1.0:
            raise ValueError("sparsity must lie in (0, 1]")
        if self.nnz_signal is None:
            self.nnz_signal = DEFAULT_NNZ[self.family]
        if self.nnz_signal < 0 or self.nnz_signal > self.signal_dim:
            raise ValueError(
                f"nnz_signal={self.nnz_signal} must lie in [0, {self.signal_dim}]")
        if self.scad is None:
            self.scad = ScadParams(rho=DEFAULT_RHO[self.family])

    @property
    def signal_dim(self) -> int:
        if self.family == "scad-ls":
            return self.n
        return (self.m - 1) * self.d + self.n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scad"] = self.scad.to_dict()
        d.pop("redraws")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        d = dict(d)
        d["scad"] = ScadParams.from_dict(d["scad"])
        return cls(**d)


def _sparse_signal(rng, dim: int, nnz: int) -> np.ndarray:
    x = np.zeros(dim)
    support = rng.permutation(dim)[:nnz]
    x[np.sort(support)] = normal(rng, nnz)
    return x


def gen_scad_ls(spec: GenSpec):
    """Gaussian ``A``, sparse ground truth ``x_hat`` and ``b = A x_hat``."""
    if spec.family != "scad-ls":
        raise ValueError("gen_scad_ls needs family 'scad-ls'")
    rng = make_rng(spec.seed)
    A = normal(rng, (spec.m, spec.n))
    x_hat = _sparse_signal(rng, spec.n, spec.nnz_signal)
    b = A @ x_hat
    p = build_scad_ls(A, b, spec.scad)
    p.metadata.update({"family": spec.family, "spec": spec.to_dict(),
                       "x0_rule": "zero vector"})
    return p, x_hat


def _sparse_columns(rng, n: int, cols: int, sparsity: float):
    """Bernoulli(sparsity) mask with N(0,1) entries; all-zero columns are redrawn."""
    mask = rng.random((n, cols)) < sparsity
    redraws = 0
    empty = np.flatnonzero(~mask.any(axis=0))
    while empty.size:
        redraws += empty.size
        mask[:, empty] = rng.random((n, empty.size)) < sparsity
        empty = empty[~mask[:, empty].any(axis=0)]
    A = np.zeros((n, cols))
    A[mask] = normal(rng, int(mask.sum()))
    return A, redraws


def gen_compressed_sensing(spec: GenSpec):
    """Sparse blocks ``A_i`` (``n x d``), identity last block, ``b = sum A_i x_hat_i``.

    Returns ``(problem, (xs_hat, xm_hat))``.
    """
    if spec.family != "compressed-sensing":
        raise ValueError("gen_compressed_sensing needs family 'compressed-sensing'")
    rng = make_rng(spec.seed)
    nb, n, d = spec.m - 1, spec.n, spec.d
    A, redraws = _sparse_columns(rng, n, nb * d, spec.sparsity)
    spec.redraws = redraws
    x_hat = _sparse_signal(rng, spec.signal_dim, spec.nnz_signal)
    x_blocks, xm_hat = x_hat[: nb * d], x_hat[nb * d:]
    b = A @ x_blocks + xm_hat
    p = _cs_problem(A, b, spec)
    p.metadata["zero_column_redraws"] = redraws
    xs_hat = [x_blocks[i * d:(i + 1) * d].copy() for i in range(nb)]
    return p, (xs_hat, xm_hat.copy())


def _cs_problem(A, b, spec: GenSpec) -> MultiBlockProblem:
    nb, n, d = spec.m - 1, spec.n, spec.d
    params = spec.scad
    blocks = [BlockSpec(SeparableScad(d, params), A[:, i * d:(i + 1) * d]) for i in range(nb)]
    L = max(params.smoothness, params.weak_convexity)
    return MultiBlockProblem(
        blocks, SeparableScad(n, params), np.eye(n), b, L=L, mu=params.weak_convexity,
        metadata={"family": spec.family, "spec": spec.to_dict(), "penalty_weight": params.rho / 2,
                  "x0_rule": "zero blocks"},
        flat_oracle=SeparableScad(nb * d, params))


def generate(spec: GenSpec):
    if spec.family == "scad-ls":
        return gen_scad_ls(spec)
    return gen_compressed_sensing(spec)


# ---------------------------------------------------------------------------
# Serialization


def save_instance(directory, spec: GenSpec, problem, truth) -> tuple[Path, str]:
    """Write matrix files and ``instance.json``; returns ``(path, digest)``.

    The digest is the SHA-256 of the canonical spec JSON followed by the
    bytes of every data file, in a fixed order.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {"A": "A.txt", "b": "b.txt", "x_hat": "x_hat.txt"}
    if isinstance(problem, ScadLeastSquares):
        write_dense(directory / files["A"], problem.A)
        x_hat = truth
    else:
        write_sparse(directory / files["A"], np.hstack([blk.A for blk in problem.blocks]))
        x_hat = np.concatenate(list(truth[0]) + [truth[1]])
    write_dense(directory / files["b"], problem.b)
    write_dense(directory / files["x_hat"], x_hat)
    digest = instance_digest(directory, spec, files)
    desc = {"spec": spec.to_dict(), "files": files, "L": problem.L, "mu": problem.mu,
            "digest": digest}
    path = directory / "instance.json"
    path.write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
    return path, digest


def instance_digest(directory, spec: GenSpec, files: dict) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":")).encode())
    for key in sorted(files):
        h.update((Path(directory) / files[key]).read_bytes())
    return h.hexdigest()


def load_instance(path):
    """Inverse of :func:`save_instance`; returns ``(problem, truth, spec)``."""
    path = Path(path)
    desc = json.loads(path.read_text())
    spec = GenSpec.from_dict(desc["spec"])
    root = path.parent
    files = desc["files"]
    b = read_dense(root / files["b"])[:, 0]
    x_hat = read_dense(root / files["x_hat"])[:, 0]
    if spec.family == "scad-ls":
        A = read_dense(root / files["A"])
        p = build_scad_ls(A, b, spec.scad)
        p.metadata.update({"family": spec.family, "spec": spec.to_dict(), "x0_rule": "zero vector"})
        return p, x_hat, spec
    A = read_sparse(root / files["A"]).toarray()
    p = _cs_problem(A, b, spec)
    nb, d = spec.m - 1, spec.d
    xs = [x_hat[i * d:(i + 1) * d] for i in range(nb)]
    return p, (xs, x_hat[nb * d:]), spec
