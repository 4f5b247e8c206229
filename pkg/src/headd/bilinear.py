"""Bilinear mesh model: identity-mode Tucker reduction of a registered vertex tensor.

The raw tensor stacks flattened vertex positions as (3N, identities, expressions).
Only the identity mode is compressed; expressions stay as-is so expression
semantics survive truncation. Synthesis contracts the reduced core with an
identity code s (length r) and an expression blend code b (length E).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FittingError, ParseError
from .geometry import Camera

MODEL_MAGIC = b"H360BILINEAR\x00\x00\x00\x00"  # 16 bytes


@dataclass(frozen=True)
class VertexTensor:
    """Registered mesh corpus, shape (3N, I, E), plus the shared face list."""

    data: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)
        if d.ndim != 3 or d.shape[0] % 3 != 0:
            raise DimensionError(f"vertex tensor must be (3N, I, E), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise DimensionError("vertex tensor contains non-finite values")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self):
        return self.data.shape[0] // 3

    @property
    def n_identities(self):
        return self.data.shape[1]

    @property
    def n_expressions(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class BilinearModel:
    core: np.ndarray             # (3N, r, E)
    identity_factor: np.ndarray  # (I, r), orthonormal columns
    faces: np.ndarray            # (F, 3)

    def __post_init__(self):
        c = np.asarray(self.core, dtype=np.float64)
        u = np.asarray(self.identity_factor, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)
        if c.ndim != 3 or c.shape[0] % 3 != 0:
            raise DimensionError(f"core must be (3N, r, E), got {c.shape}")
        if u.ndim != 2 or u.shape[1] != c.shape[1]:
            raise DimensionError("identity factor rank does not match core")
        object.__setattr__(self, "core", c)
        object.__setattr__(self, "identity_factor", u)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self):
        return self.core.shape[0] // 3

    @property
    def rank(self):
        return self.core.shape[1]

    @property
    def n_identities(self):
        return self.identity_factor.shape[0]

    @property
    def n_expressions(self):
        return self.core.shape[2]

    def mean_identity_code(self):
        return self.identity_factor.mean(axis=0)


def build_bilinear_model(tensor: VertexTensor, rank: int) -> BilinearModel:
    """Reduce the identity mode to `rank` via truncated SVD of the mode-2 unfolding.

    Column signs are fixed so each factor column's largest-magnitude entry is
    positive, making the decomposition reproducible across runs and platforms.
    """
    I = tensor.n_identities
    if not 1 <= rank <= I:
        raise DimensionError(f"rank must be in [1, {I}], got {rank}")
    # Mode-2 unfolding: rows are identities, columns sweep (3N, E).
    unfolding = tensor.data.transpose(1, 0, 2).reshape(I, -1)
    if not np.any(unfolding):
        raise DimensionError("vertex tensor is identically zero")
    u_full, _, _ = np.linalg.svd(unfolding, full_matrices=False)
    u = u_full[:, :rank].copy()
    peak = np.abs(u).argmax(axis=0)
    flip = np.sign(u[peak, np.arange(rank)])
    flip[flip == 0] = 1.0
    u *= flip
    core = np.einsum("aie,ik->ake", tensor.data, u, optimize=True)
    return BilinearModel(core=core, identity_factor=u, faces=tensor.faces)


def reconstruct_tensor(model: BilinearModel) -> np.ndarray:
    """Project the corpus back through the identity factor: core x2 U."""
    return np.einsum("ake,ik->aie", model.core, model.identity_factor, optimize=True)


def synthesize_vertices(model: BilinearModel, s, b) -> np.ndarray:
    """Contract core with identity code s and blend code b; returns (N, 3) vertices."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if s.shape[0] != model.rank:
        raise DimensionError(f"identity code has length {s.shape[0]}, expected {model.rank}")
    if b.shape[0] != model.n_expressions:
        raise DimensionError(f"blend code has length {b.shape[0]}, expected {model.n_expressions}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(b))):
        raise DimensionError("codes must be finite")
    flat = (model.core @ b) @ s
    return flat.reshape(-1, 3)


def blend_from_activations(activations, n_expressions: int) -> np.ndarray:
    """Map activations a in [0,1]^(E-1) to a blend code anchored at the neutral base.

    b = e_0 + sum_j a_j (e_{j+1} - e_0): all-zero gives the neutral expression,
    a_j = 1 fully engages expression j+1.
    """
    a = np.asarray(activations, dtype=np.float64).reshape(-1)
    if a.shape[0] != n_expressions - 1:
        raise DimensionError(
            f"expected {n_expressions - 1} activations, got {a.shape[0]}")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise DimensionError("activations must lie in [0, 1]")
    b = np.zeros(n_expressions, dtype=np.float64)
    b[0] = 1.0 - a.sum()
    b[1:] = a
    return b


@dataclass
class ShapeFit:
    s: np.ndarray
    residual_rms: float
    iterations: int


def fit_shape_landmarks(model: BilinearModel, landmarks, camera: Camera, b,
                        ridge: float = 1e-6, iterations: int = 5,
                        step_tol: float = 1e-8) -> ShapeFit:
    """Damped Gauss-Newton fit of the identity code to 2D landmarks.

    landmarks is a sequence of (vertex_index, (px, py)). Minimizes the ridge
    objective sum ||project(V(s, b)[k]) - p_k||^2 + ridge * ||s||^2 with the
    expression blend b held fixed. With ridge=0 a rank-deficient normal matrix
    raises instead of producing garbage.
    """
    if len(landmarks) == 0:
        raise FittingError("no landmarks given")
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if b.shape[0] != model.n_expressions:
        raise DimensionError("blend code length mismatch")
    vidx = np.array([int(k) for k, _ in landmarks])
    if vidx.min() < 0 or vidx.max() >= model.n_vertices:
        raise DimensionError("landmark vertex index out of range")
    target = np.array([[float(p[0]), float(p[1])] for _, p in landmarks])

    core_b = (model.core @ b).reshape(model.n_vertices, 3, model.rank)
    A = core_b[vidx]                       # (L, 3, r): vertex position = A @ s
    s = model.mean_identity_code().copy()
    R, t = camera.rotation, camera.translation
    rms = np.inf
    it = 0
    for it in range(1, iterations + 1):
        X = A @ s
        Xc = X @ R.T + t
        zc = Xc[:, 2]
        if np.any(zc <= 1e-9):
            raise FittingError("landmark moved behind the camera during fitting")
        u = camera.fx * Xc[:, 0] / zc + camera.cx
        v = camera.fy * Xc[:, 1] / zc + camera.cy
        res = np.stack([u, v], axis=1) - target
        rms = float(np.sqrt(np.mean(res ** 2)))

        # d(pixel)/d(cam point), the standard pinhole Jacobian.
        L = len(vidx)
        Jp = np.zeros((L, 2, 3))
        Jp[:, 0, 0] = camera.fx / zc
        Jp[:, 0, 2] = -camera.fx * Xc[:, 0] / zc ** 2
        Jp[:, 1, 1] = camera.fy / zc
        Jp[:, 1, 2] = -camera.fy * Xc[:, 1] / zc ** 2
        J = np.einsum("lij,jk,lkr->lir", Jp, R, A, optimize=True).reshape(2 * L, model.rank)
        r_flat = res.reshape(-1)
        H = J.T @ J + ridge * np.eye(model.rank)
        g = J.T @ r_flat + ridge * s
        if ridge == 0.0:
            # Underdetermined without damping: fail loudly with the remedy.
            if np.linalg.matrix_rank(H) < model.rank:
                raise FittingError(
                    "normal matrix is singular; use a nonzero ridge to regularize")
        try:
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError as exc:
            raise FittingError(
                "normal matrix is singular; use a nonzero ridge to regularize") from exc
        s = s + delta
        if np.linalg.norm(delta) < step_tol:
            break
    return ShapeFit(s=s, residual_rms=rms, iterations=it)


def save_model(path, model: BilinearModel):
    """Binary model file: 16-byte magic, u32 N/I/E/r, then f64 core, factor, faces."""
    n = model.n_vertices
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<4I", n, model.n_identities, model.n_expressions, model.rank))
        fh.write(np.ascontiguousarray(model.core, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.identity_factor, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.faces, dtype=np.float64).astype("<f8").tobytes())


def load_model(path) -> BilinearModel:
    raw = Path(path).read_bytes()
    if len(raw) < 32 or raw[:16] != MODEL_MAGIC:
        raise ParseError(f"{path}: not a bilinear model file")
    n, i, e, r = struct.unpack("<4I", raw[16:32])
    body = np.frombuffer(raw[32:], dtype="<f8")
    n_core = 3 * n * r * e
    n_factor = i * r
    rest = body.size - n_core - n_factor
    if rest < 0 or rest % 3 != 0:
        raise ParseError(f"{path}: payload size does not match header")
    core = body[:n_core].reshape(3 * n, r, e)
    factor = body[n_core:n_core + n_factor].reshape(i, r)
    faces = body[n_core + n_factor:].reshape(-1, 3)
    if faces.size and not np.all(faces == np.round(faces)):
        raise ParseError(f"{path}: face indices are not integral")
    return BilinearModel(core=core.copy(), identity_factor=factor.copy(),
                         faces=faces.astype(np.int32))
