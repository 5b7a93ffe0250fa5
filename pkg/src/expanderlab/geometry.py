"""Testbed metric models and their curvature.

Three symmetry-reduced families cover the lab's runs:

* HomogeneousMetric -- a diagonal left-invariant metric on a 3-D
  unimodular Lie group written in a Milnor frame (a frame of
  left-invariant fields diagonalizing both the metric and the bracket).
  A compact quotient enters only through a total-volume scalar; every
  quantity we evolve depends on the three metric eigenvalues and that
  volume alone.
* ConformalTorusMetric -- g = exp(2 phi) * flat on a periodic uniform
  grid, the 2-D conformal reduction.  Spatial operators are centered
  second-order periodic stencils.
* ModelSpaceMetric -- a constant-curvature space of any dimension with
  abstract volume bookkeeping (metric = scale * unit model metric).

Fields on the torus are (nx, ny) float arrays indexed [i, j] with
x_i = i*lx/nx, y_j = j*ly/ny; fields on the other models are plain
floats (spatially constant).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "HomogeneousMetric",
    "ConformalTorusMetric",
    "ModelSpaceMetric",
    "CurvatureData",
    "MetricModel",
    "curvature",
    "curvature_homogeneous",
    "curvature_conformal",
    "curvature_model_space",
    "volume",
    "laplacian",
    "curvature_operator_nonneg",
    "integrate",
    "grad_norm_sq",
    "grad_pairing",
    "hessian_covariant",
    "soliton_residual_sq",
    "model_to_json",
    "model_from_json",
]


@dataclass(frozen=True)
class HomogeneousMetric:
    """Diagonal left-invariant 3-D metric in a Milnor frame.

    structure_constants (c1, c2, c3) are the bracket coefficients
    [e2,e3] = c1 e1, [e3,e1] = c2 e2, [e1,e2] = c3 e3; diag = (A, B, C)
    are the metric eigenvalues on the frame; frame_volume is the volume
    of the compact quotient at A = B = C = 1, so the volume of the
    metric is sqrt(A*B*C) * frame_volume.
    """

    structure_constants: tuple
    diag: tuple
    frame_volume: float = 1.0

    def __post_init__(self) -> None:
        if len(self.structure_constants) != 3 or len(self.diag) != 3:
            raise ValueError("structure_constants and diag must have length 3")
        if not all(d > 0 for d in self.diag):
            raise ValueError("metric eigenvalues must be positive")
        if not self.frame_volume > 0:
            raise ValueError("frame_volume must be positive")

    @property
    def dim(self) -> int:
        return 3


@dataclass(frozen=True)
class ConformalTorusMetric:
    """g = exp(2 phi) * flat on a periodic (nx, ny) grid with periods (lx, ly)."""

    phi: np.ndarray
    periods: tuple = (1.0, 1.0)

    def __post_init__(self) -> None:
        phi = np.asarray(self.phi, dtype=float)
        if phi.ndim != 2 or phi.shape[0] < 8 or phi.shape[1] < 8:
            raise ValueError("phi must be 2-d with at least 8 points per direction")
        if not np.all(np.isfinite(phi)):
            raise ValueError("phi must be finite everywhere")
        if not (self.periods[0] > 0 and self.periods[1] > 0):
            raise ValueError("periods must be positive")
        phi = phi.copy()
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def grid_size(self) -> tuple:
        return self.phi.shape

    @property
    def spacing(self) -> tuple:
        return (self.periods[0] / self.phi.shape[0], self.periods[1] / self.phi.shape[1])

    @property
    def dim(self) -> int:
        return 2


@dataclass(frozen=True)
class ModelSpaceMetric:
    """Constant-curvature model: metric = scale * (unit model metric).

    The unit model has Ricci = rho0 * (unit metric) with
    rho0 = sectional_sign * (dim - 1); volume = scale**(dim/2) * base_volume.
    """

    dim: int
    sectional_sign: int
    scale: float
    base_volume: float = 1.0

    def __post_init__(self) -> None:
        if self.dim < 2:
            raise ValueError("dimension must be at least 2")
        if self.sectional_sign not in (-1, 0, 1):
            raise ValueError("sectional_sign must be -1, 0 or +1")
        if not (self.scale > 0 and self.base_volume > 0):
            raise ValueError("scale and base_volume must be positive")

    @property
    def rho0(self) -> float:
        return float(self.sectional_sign * (self.dim - 1))


MetricModel = HomogeneousMetric | ConformalTorusMetric | ModelSpaceMetric


@dataclass(frozen=True)
class CurvatureData:
    """Ricci tensor in the reduced representation plus scalar invariants.

    ricci holds the diagonal frame components (length-3 array) for a
    homogeneous metric, the scalar coefficient rho0/scale (Ricci =
    coeff * metric) for a model space, and the scalar-curvature field
    for the torus (where Ricci = R/2 * metric identically in 2-D).
    scalar and ricci_norm_sq are fields on the torus, floats otherwise.
    """

    ricci: np.ndarray | float
    scalar: np.ndarray | float
    ricci_norm_sq: np.ndarray | float


# ---------------------------------------------------------------------------
# periodic stencils (torus)

def _dx(f: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(f, -1, axis=0) - np.roll(f, 1, axis=0)) / (2.0 * h)


def _dy(f: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(f, -1, axis=1) - np.roll(f, 1, axis=1)) / (2.0 * h)


def _lap0(f: np.ndarray, hx: float, hy: float) -> np.ndarray:
    return (np.roll(f, -1, axis=0) + np.roll(f, 1, axis=0) - 2.0 * f) / (hx * hx) + (
        np.roll(f, -1, axis=1) + np.roll(f, 1, axis=1) - 2.0 * f
    ) / (hy * hy)


def flat_gradient(m: ConformalTorusMetric, f: np.ndarray):
    """Coordinate gradient (f_x, f_y) by centered periodic differences."""
    hx, hy = m.spacing
    return _dx(f, hx), _dy(f, hy)


def flat_laplacian(m: ConformalTorusMetric, f: np.ndarray) -> np.ndarray:
    hx, hy = m.spacing
    return _lap0(f, hx, hy)


# ---------------------------------------------------------------------------
# curvature

def milnor_ricci_diag(structure_constants, diag) -> np.ndarray:
    """Frame Ricci components of a diagonal left-invariant 3-D metric.

    Standard closed form Rc_ii = ((c_i X_i)^2 - (c_j X_j - c_k X_k)^2)
    / (2 X_j X_k) with (i, j, k) cyclic and X = diag; the from-scratch
    bracket/connection oracle in the test suite certifies the
    transcription.  Operates on raw values (no positivity validation) so
    flow integrators may probe trial states freely.
    """
    c1, c2, c3 = (float(v) for v in structure_constants)
    a, b, c = (float(v) for v in diag)
    return np.array(
        [
            ((c1 * a) ** 2 - (c2 * b - c3 * c) ** 2) / (2.0 * b * c),
            ((c2 * b) ** 2 - (c3 * c - c1 * a) ** 2) / (2.0 * c * a),
            ((c3 * c) ** 2 - (c1 * a - c2 * b) ** 2) / (2.0 * a * b),
        ]
    )


def curvature_homogeneous(m: HomogeneousMetric) -> CurvatureData:
    """Diagonal Milnor-frame Ricci of a homogeneous metric."""
    rc = milnor_ricci_diag(m.structure_constants, m.diag)
    diag = np.asarray(m.diag, dtype=float)
    scalar = float(np.sum(rc / diag))
    norm_sq = float(np.sum((rc / diag) ** 2))
    return CurvatureData(ricci=rc, scalar=scalar, ricci_norm_sq=norm_sq)


def curvature_conformal(m: ConformalTorusMetric) -> CurvatureData:
    """Scalar curvature field R = -2 exp(-2 phi) lap0 phi of the conformal torus."""
    r = -2.0 * np.exp(-2.0 * m.phi) * flat_laplacian(m, m.phi)
    return CurvatureData(ricci=r, scalar=r, ricci_norm_sq=0.5 * r * r)


def curvature_model_space(m: ModelSpaceMetric) -> CurvatureData:
    """Ricci = (rho0/scale) * metric on a constant-curvature model."""
    coeff = m.rho0 / m.scale
    return CurvatureData(
        ricci=coeff,
        scalar=m.dim * coeff,
        ricci_norm_sq=m.dim * coeff * coeff,
    )


def curvature(m: MetricModel) -> CurvatureData:
    if isinstance(m, HomogeneousMetric):
        return curvature_homogeneous(m)
    if isinstance(m, ConformalTorusMetric):
        return curvature_conformal(m)
    if isinstance(m, ModelSpaceMetric):
        return curvature_model_space(m)
    raise TypeError(f"unknown metric model {type(m)!r}")


def volume(m: MetricModel) -> float:
    """Total Riemannian volume of the model."""
    if isinstance(m, HomogeneousMetric):
        a, b, c = m.diag
        return math.sqrt(a * b * c) * m.frame_volume
    if isinstance(m, ConformalTorusMetric):
        hx, hy = m.spacing
        return float(np.sum(np.exp(2.0 * m.phi))) * hx * hy
    if isinstance(m, ModelSpaceMetric):
        return m.scale ** (m.dim / 2.0) * m.base_volume
    raise TypeError(f"unknown metric model {type(m)!r}")


def laplacian(m: MetricModel, f):
    """Laplace-Beltrami operator of the model applied to a field.

    On the conformal torus this is exp(-2 phi) * lap0 f; on the reduced
    models fields are spatially constant so the result is zero.
    """
    if isinstance(m, ConformalTorusMetric):
        f = np.asarray(f, dtype=float)
        if f.shape != m.phi.shape:
            raise ValueError(f"field shape {f.shape} != grid {m.phi.shape}")
        return np.exp(-2.0 * m.phi) * flat_laplacian(m, f)
    if np.ndim(f) != 0:
        raise ValueError("fields on reduced models are scalars")
    return 0.0


def curvature_operator_nonneg(m: MetricModel, tol: float = 1e-12) -> bool:
    """True iff the curvature operator is positive semidefinite pointwise.

    Model spaces: sectional sign >= 0.  Conformal torus: Gauss curvature
    R/2 >= 0 everywhere.  Homogeneous metrics: the operator assembled on
    the frame two-planes is diagonal (the mixed curvature components
    vanish for a diagonal metric with diagonal Ricci in three
    dimensions), with eigenvalues the frame sectional curvatures
    rho_i + rho_j - R/2.
    """
    if isinstance(m, ModelSpaceMetric):
        return m.sectional_sign >= 0
    if isinstance(m, ConformalTorusMetric):
        return bool(np.min(curvature_conformal(m).scalar) >= -tol)
    if isinstance(m, HomogeneousMetric):
        data = curvature_homogeneous(m)
        rho = np.asarray(data.ricci) / np.asarray(m.diag)
        r_half = 0.5 * data.scalar
        sec = np.array(
            [rho[0] + rho[1] - r_half, rho[1] + rho[2] - r_half, rho[2] + rho[0] - r_half]
        )
        return bool(np.min(sec) >= -tol)
    raise TypeError(f"unknown metric model {type(m)!r}")


# ---------------------------------------------------------------------------
# field calculus against the model's measure

def integrate(m: MetricModel, f) -> float:
    """Integral of a field against the Riemannian volume measure."""
    if isinstance(m, ConformalTorusMetric):
        hx, hy = m.spacing
        return float(np.sum(np.asarray(f) * np.exp(2.0 * m.phi))) * hx * hy
    return float(f) * volume(m)


def measure_weights(m: MetricModel):
    """Per-point volume weights (dv) in the model's field representation."""
    if isinstance(m, ConformalTorusMetric):
        hx, hy = m.spacing
        return np.exp(2.0 * m.phi) * hx * hy
    return np.asarray(volume(m))


def grad_norm_sq(m: MetricModel, f):
    """|grad f|^2 in the model metric (zero on spatially constant fields)."""
    if isinstance(m, ConformalTorusMetric):
        fx, fy = flat_gradient(m, f)
        return np.exp(-2.0 * m.phi) * (fx * fx + fy * fy)
    return 0.0


def grad_pairing(m: MetricModel, f, g):
    """<grad f, grad g> in the model metric."""
    if isinstance(m, ConformalTorusMetric):
        fx, fy = flat_gradient(m, f)
        gx, gy = flat_gradient(m, g)
        return np.exp(-2.0 * m.phi) * (fx * gx + fy * gy)
    return 0.0


def hessian_covariant(m: ConformalTorusMetric, f: np.ndarray):
    """Covariant Hessian components (H_xx, H_xy, H_yy) on the conformal torus.

    For g = exp(2 phi) * flat the Christoffel symbols reduce to first
    derivatives of phi and the Hessian of f is the coordinate Hessian
    corrected by phi-gradient terms.
    """
    hx, hy = m.spacing
    fx, fy = flat_gradient(m, f)
    px, py = flat_gradient(m, m.phi)
    fxx = (np.roll(f, -1, 0) + np.roll(f, 1, 0) - 2.0 * f) / (hx * hx)
    fyy = (np.roll(f, -1, 1) + np.roll(f, 1, 1) - 2.0 * f) / (hy * hy)
    fxy = (
        np.roll(np.roll(f, -1, 0), -1, 1)
        - np.roll(np.roll(f, -1, 0), 1, 1)
        - np.roll(np.roll(f, 1, 0), -1, 1)
        + np.roll(np.roll(f, 1, 0), 1, 1)
    ) / (4.0 * hx * hy)
    h_xx = fxx - px * fx + py * fy
    h_xy = fxy - py * fx - px * fy
    h_yy = fyy + px * fx - py * fy
    return h_xx, h_xy, h_yy


def soliton_residual_sq(m: MetricModel, f_potential, sigma: float | None):
    """Pointwise |Ricci + Hess(f) + g/(2 sigma)|^2 in the model metric.

    f_potential is the log-density potential field; sigma = None drops
    the g/(2 sigma) term (the steady-case residual).  On reduced models
    the potential is spatially constant so the Hessian vanishes.
    """
    half_inv = 0.0 if sigma is None else 0.5 / float(sigma)
    if isinstance(m, HomogeneousMetric):
        data = curvature_homogeneous(m)
        rho = np.asarray(data.ricci) / np.asarray(m.diag)
        return float(np.sum((rho + half_inv) ** 2))
    if isinstance(m, ModelSpaceMetric):
        coeff = m.rho0 / m.scale
        return m.dim * (coeff + half_inv) ** 2
    if isinstance(m, ConformalTorusMetric):
        e2p = np.exp(2.0 * m.phi)
        r = curvature_conformal(m).scalar
        h_xx, h_xy, h_yy = hessian_covariant(m, np.asarray(f_potential, dtype=float))
        t_xx = 0.5 * r * e2p + h_xx + half_inv * e2p
        t_xy = h_xy
        t_yy = 0.5 * r * e2p + h_yy + half_inv * e2p
        return np.exp(-4.0 * m.phi) * (t_xx**2 + 2.0 * t_xy**2 + t_yy**2)
    raise TypeError(f"unknown metric model {type(m)!r}")


# ---------------------------------------------------------------------------
# JSON round-trip for scenario configs

def model_to_json(m: MetricModel) -> dict:
    if isinstance(m, HomogeneousMetric):
        return {
            "kind": "homogeneous",
            "structure_constants": list(m.structure_constants),
            "diag": list(m.diag),
            "frame_volume": m.frame_volume,
        }
    if isinstance(m, ConformalTorusMetric):
        return {
            "kind": "conformal_torus",
            "grid_size": list(m.phi.shape),
            "periods": list(m.periods),
            "phi": np.asarray(m.phi).tolist(),
        }
    if isinstance(m, ModelSpaceMetric):
        return {
            "kind": "model_space",
            "dim": m.dim,
            "sectional_sign": m.sectional_sign,
            "scale": m.scale,
            "base_volume": m.base_volume,
        }
    raise TypeError(f"unknown metric model {type(m)!r}")


def model_from_json(doc: dict) -> MetricModel:
    kind = doc.get("kind")
    if kind == "homogeneous":
        return HomogeneousMetric(
            structure_constants=tuple(doc["structure_constants"]),
            diag=tuple(doc["diag"]),
            frame_volume=float(doc.get("frame_volume", 1.0)),
        )
    if kind == "conformal_torus":
        if "phi" in doc:
            phi = np.asarray(doc["phi"], dtype=float)
        else:
            nx, ny = doc["grid_size"]
            lx = float(doc.get("periods", [1.0, 1.0])[0])
            x = (np.arange(nx) * lx / nx)[:, None]
            amp = float(doc.get("phi_sine_amplitude", 0.0))
            phi = amp * np.sin(2.0 * math.pi * x / lx) * np.ones((nx, ny))
        return ConformalTorusMetric(phi=phi, periods=tuple(doc.get("periods", (1.0, 1.0))))
    if kind == "model_space":
        return ModelSpaceMetric(
            dim=int(doc["dim"]),
            sectional_sign=int(doc["sectional_sign"]),
            scale=float(doc["scale"]),
            base_volume=float(doc.get("base_volume", 1.0)),
        )
    raise ValueError(f"unknown model kind {kind!r}")


def validate_model_json(doc: dict) -> MetricModel:
    """Parse-and-validate wrapper used by the scenario runner."""
    try:
        return model_from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"invalid metric model spec: {exc}") from exc
