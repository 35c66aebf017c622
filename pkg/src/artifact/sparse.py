"""Compressed-sparse-row system matrices and their differentiable application."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, make_node


@dataclass(eq=False)
class SystemMatrix:
    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    fingerprint: str = ""
    _csr: sp.csr_matrix | None = field(default=None, repr=False)
    _csr_t: sp.csr_matrix | None = field(default=None, repr=False)

    @classmethod
    def from_scipy(cls, m, fingerprint: str = "") -> "SystemMatrix":
        m = sp.csr_matrix(m, dtype=np.float64)
        m.eliminate_zeros()
        m.sort_indices()
        return cls(
            n_rows=m.shape[0],
            n_cols=m.shape[1],
            indptr=m.indptr.astype(np.int64),
            indices=m.indices.astype(np.int64),
            weights=m.data.astype(np.float64),
            fingerprint=fingerprint,
        )

    @property
    def nnz(self) -> int:
        return int(self.weights.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix((self.weights, self.indices, self.indptr), shape=self.shape)
        return self._csr

    def csr_t(self) -> sp.csr_matrix:
        if self._csr_t is None:
            self._csr_t = self.csr().T.tocsr()
            self._csr_t.sort_indices()
        return self._csr_t

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.indptr[i], self.indptr[i + 1]
        return self.indices[a:b], self.weights[a:b]

    def matvec(self, x: np.ndarray, transposed: bool = False) -> np.ndarray:
        m = self.csr_t() if transposed else self.csr()
        if x.shape[0] != m.shape[1]:
            raise ValueError(
                f"sparse_apply: operand has {x.shape[0]} rows, matrix{'ᵀ' if transposed else ''} "
                f"{m.shape} needs {m.shape[1]}"
            )
        return np.asarray(m @ x)

    def to_dense(self) -> np.ndarray:
        return self.csr().toarray()


def sparse_apply(m: SystemMatrix, x: Tensor, transposed: bool = False) -> Tensor:
    """``M @ x`` (or ``Mᵀ @ x``) for a 1D or 2D operand; backward applies the other."""
    out = m.matvec(x.data, transposed)
    return make_node(out, (x,), lambda g: (m.matvec(g, not transposed),), "sparse_apply")


# ---------------------------------------------------------------------------
# on-disk cache
# ---------------------------------------------------------------------------


class MatrixCacheError(ValueError):
    pass


def save_matrix(m: SystemMatrix, path: Path) -> None:
    """Write a JSON header plus offsets (u64), indices (u32) and weights (f64), little-endian."""
    path = Path(path)
    header = {
        "fingerprint": m.fingerprint,
        "n_rows": m.n_rows,
        "n_cols": m.n_cols,
        "nnz": m.nnz,
        "byte_order": "LE",
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")
    with open(path.with_suffix(".bin"), "wb") as fh:
        fh.write(m.indptr.astype("<u8").tobytes())
        fh.write(m.indices.astype("<u4").tobytes())
        fh.write(m.weights.astype("<f8").tobytes())


def load_matrix(path: Path, fingerprint: str | None = None) -> SystemMatrix:
    path = Path(path)
    try:
        header = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        n_rows, n_cols, nnz = int(header["n_rows"]), int(header["n_cols"]), int(header["nnz"])
    except (OSError, ValueError, KeyError) as exc:
        raise MatrixCacheError(f"unreadable matrix header {path}: {exc}") from exc
    if fingerprint is not None and header["fingerprint"] != fingerprint:
        raise MatrixCacheError(f"matrix cache {path} built for a different geometry")
    raw = path.with_suffix(".bin").read_bytes()
    expected = 8 * (n_rows + 1) + 4 * nnz + 8 * nnz
    if len(raw) != expected:
        raise MatrixCacheError(f"matrix blob {path} has {len(raw)} bytes, expected {expected}")
    a = 8 * (n_rows + 1)
    b = a + 4 * nnz
    return SystemMatrix(
        n_rows=n_rows,
        n_cols=n_cols,
        indptr=np.frombuffer(raw[:a], dtype="<u8").astype(np.int64),
        indices=np.frombuffer(raw[a:b], dtype="<u4").astype(np.int64),
        weights=np.frombuffer(raw[b:], dtype="<f8").astype(np.float64),
        fingerprint=header["fingerprint"],
    )
