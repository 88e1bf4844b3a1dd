"""
Numerical Utilities for SoLA Desk
Dense float64 linear algebra, seeded pseudo-randomness and gradient checking.

All matrices are plain ``numpy.ndarray`` objects of dtype float64 (``Mat``).
"""

import logging
from typing import Any, Callable, Dict, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp
from scipy.special import softmax as _scipy_softmax

from .errors import NumericError, ParameterError, ShapeError, SolaIndexError

logger = logging.getLogger(__name__)

Mat = NDArray[np.float64]

DEFAULT_INIT_STD = 0.02


def as_mat(data: Any, rows: Optional[int] = None, cols: Optional[int] = None) -> Mat:
    """
    Coerce ``data`` into a 2-D float64 matrix.

    Args:
        data: Nested sequence or array
        rows: Expected row count (optional)
        cols: Expected column count (optional)

    Returns:
        Mat: A contiguous float64 copy of the data

    Raises:
        ShapeError: If the data is not 2-D or does not match rows/cols
    """
    mat = np.array(data, dtype=np.float64, order="C")
    if mat.ndim != 2:
        raise ShapeError(f"Expected a 2-D matrix, got shape {mat.shape}")
    if (rows is not None and mat.shape[0] != rows) or (cols is not None and mat.shape[1] != cols):
        raise ShapeError(f"Expected shape ({rows}, {cols}), got {mat.shape}")
    return mat


def zeros(rows: int, cols: int) -> Mat:
    return np.zeros((rows, cols), dtype=np.float64)


def identity(n: int) -> Mat:
    return np.eye(n, dtype=np.float64)


def check_finite(values: np.ndarray, what: str = "value") -> np.ndarray:
    """Raise NumericError if any entry is NaN or infinite."""
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite entries in {what}")
    return values


def matmul(a: Mat, b: Mat) -> Mat:
    """
    Standard matrix product ``a @ b`` with an explicit shape check.

    Raises:
        ShapeError: If ``a.cols != b.rows``; the message names both shapes
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


class SeededRng:
    """
    Deterministic random stream built on numpy's PCG64 generator.

    PCG64 is the PCG XSL-RR 128/64 recurrence
    ``state = state * 0x2360ED051FC65DA44385DF649FCCF645 + inc (mod 2**128)``
    seeded through ``numpy.random.SeedSequence``, so identical seeds give
    identical streams on every platform. A stream is single-owner: do not
    share one instance between concurrent callers.
    """

    def __init__(self, seed: Union[int, Sequence[int]]):
        self.seed = seed
        self._generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    def child(self, key: int) -> "SeededRng":
        """Derive an independent stream that depends only on (seed, key)."""
        base = list(self.seed) if isinstance(self.seed, (list, tuple)) else [int(self.seed)]
        return SeededRng(base + [int(key)])

    def uniform(self, size: int) -> np.ndarray:
        """Uniform doubles in [0, 1)."""
        return self._generator.random(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        """Choose ``size`` distinct indices out of ``range(n)``."""
        return self._generator.choice(n, size=size, replace=False)

    def standard_normal(self, count: int) -> np.ndarray:
        """Standard normal draws via the Box–Muller transform."""
        pairs = (count + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # (0, 1], keeps log finite
        u2 = self.uniform(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        draws = np.empty(2 * pairs, dtype=np.float64)
        draws[0::2] = radius * np.cos(theta)
        draws[1::2] = radius * np.sin(theta)
        return draws[:count]


def gaussian_init(rng: SeededRng, rows: int, cols: int, std: float = DEFAULT_INIT_STD) -> Mat:
    """
    Matrix with i.i.d. N(0, std^2) entries drawn from ``rng``.

    Raises:
        ParameterError: If std is not strictly positive or a dimension is < 1
    """
    if not std > 0:
        raise ParameterError(f"Gaussian std must be positive, got {std}")
    if rows < 1 or cols < 1:
        raise ParameterError(f"Matrix dimensions must be >= 1, got ({rows}, {cols})")
    return (std * rng.standard_normal(rows * cols)).reshape(rows, cols)


def finite_diff_grad(f: Callable[[Mat], float], at: Mat, eps: float = 1e-5) -> Mat:
    """
    Central-difference gradient of a scalar function of a matrix.

    Entry (i, j) is ``(f(x + eps*E_ij) - f(x - eps*E_ij)) / (2*eps)``.

    Args:
        f: Scalar function of a matrix
        at: Point of evaluation (left untouched)
        eps: Perturbation size

    Returns:
        Mat: Gradient estimate, same shape as ``at``

    Raises:
        ParameterError: If eps <= 0
        NumericError: If f returns a non-finite value
    """
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    point = np.array(at, dtype=np.float64)
    grad = np.zeros_like(point)
    for index in np.ndindex(point.shape):
        original = point[index]
        point[index] = original + eps
        f_plus = float(f(point))
        point[index] = original - eps
        f_minus = float(f(point))
        point[index] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"Non-finite function value at perturbed index {index}")
        grad[index] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``||a - b|| / max(||a|| + ||b||, floor)``."""
    diff = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    scale = float(np.linalg.norm(a) + np.linalg.norm(b))
    return diff / max(scale, floor)


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``."""
    return _scipy_softmax(np.asarray(v, dtype=np.float64), axis=axis)


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """
    ``-log softmax(logits)[label]``, computed as ``logsumexp(logits) - logits[label]``.

    Raises:
        SolaIndexError: If label is not a valid class index
        NumericError: If logits contain non-finite values
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(label) < logits.shape[-1]:
        raise SolaIndexError(f"Label {label} out of range for {logits.shape[-1]} classes")
    check_finite(logits, "logits")
    return float(logsumexp(logits) - logits[int(label)])


def mat_to_json(m: np.ndarray) -> Dict[str, Any]:
    """Serialize a matrix (1-D arrays become a single row)."""
    mat = np.atleast_2d(np.asarray(m, dtype=np.float64))
    return {"rows": int(mat.shape[0]), "cols": int(mat.shape[1]), "data": mat.ravel().tolist()}


def mat_from_json(obj: Dict[str, Any]) -> Mat:
    rows, cols, data = int(obj["rows"]), int(obj["cols"]), obj["data"]
    if len(data) != rows * cols:
        raise ShapeError(f"Matrix payload has {len(data)} values, expected {rows}x{cols}")
    return np.array(data, dtype=np.float64).reshape(rows, cols)
