"""Image formation model: poses, CTFs, slice projectors and their adjoints.

An image is formed from a volume by rotating the Fourier grid, reading the
central slice with nearest-neighbor (``nn``) or trilinear (``tri``)
interpolation, applying the in-plane shift as a unit-modulus phase, and
multiplying by a radially symmetric CTF.  ``backproject`` is the exact
adjoint of ``project`` under the standard complex inner product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .grid import GridSpec, disk_mask

__all__ = [
    "Pose",
    "CtfParams",
    "FourierVolume",
    "ImageStack",
    "quat_to_matrix",
    "sample_uniform_poses",
    "ctf_eval",
    "Projector",
    "DatasetOperator",
    "project",
    "backproject",
    "synthesize_dataset",
    "gaussian_blob_phantom",
]

MODES = ("nn", "tri")

# Images per internal slice when streaming full-dataset passes.  Fixed so
# floating-point accumulation order never depends on callers or threads.
PASS_CHUNK = 1024


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid pose of one particle image: rotation plus in-plane shift.

    ``q`` is a unit quaternion ``(w, x, y, z)``; ``t`` the shift in pixels.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(2)
        if abs(np.linalg.norm(q) - 1.0) > 1e-12:
            raise ValueError("quaternion must have unit norm (within 1e-12)")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)


@dataclass(frozen=True)
class CtfParams:
    """Parameters of the simplified oscillatory CTF with decay envelope."""

    defocus: float
    amp_contrast: float
    b_factor: float

    def __post_init__(self) -> None:
        if not 0.0 < self.amp_contrast < 1.0:
            raise ValueError("amp_contrast must lie in (0, 1)")
        if self.b_factor < 0.0:
            raise ValueError("b_factor must be non-negative")


def ctf_eval(params: CtfParams, r, r_max: int):
    """Evaluate the CTF at Fourier radius ``r`` (scalar or array).

    The radial profile is

        C(r) = -[(1 - w) sin(pi * defocus * u^2) + w cos(pi * defocus * u^2)]
               * exp(-b_factor * u^2),        u = r / r_max

    with ``w = amp_contrast``; it is real, oscillatory, bounded by one in
    magnitude, and satisfies ``C(0) = -w``.
    """
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0) or np.any(r > r_max):
        raise ValueError(f"radius out of range [0, {r_max}]")
    u2 = (r / r_max) ** 2
    w = params.amp_contrast
    arg = np.pi * params.defocus * u2
    out = -((1.0 - w) * np.sin(arg) + w * np.cos(arg)) * np.exp(-params.b_factor * u2)
    return out if out.ndim else float(out)


@dataclass
class FourierVolume:
    """Vectorized complex volume on the grid layout of :mod:`fsld.grid`."""

    values: np.ndarray
    spec: GridSpec

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.complex128).reshape(-1)
        if v.size != self.spec.n_voxels:
            raise ValueError(
                f"volume has {v.size} entries, expected {self.spec.n_voxels}"
            )
        if not np.all(np.isfinite(v.view(np.float64))):
            raise ValueError("volume contains non-finite entries")
        self.values = v

    @classmethod
    def zeros(cls, spec: GridSpec) -> "FourierVolume":
        return cls(np.zeros(spec.n_voxels, dtype=np.complex128), spec)

    def copy(self) -> "FourierVolume":
        return FourierVolume(self.values.copy(), self.spec)


@dataclass
class ImageStack:
    """A stack of particle images with their poses and CTF parameters.

    ``images`` is ``(N, M^2)`` complex with zeros off the disk mask;
    ``ctfs`` is ``None`` for CTF-free datasets.
    """

    spec: GridSpec
    images: np.ndarray
    poses: list[Pose]
    ctfs: list[CtfParams] | None
    sigma: float
    seed: int
    mask_radius: int
    mode: str

    def __post_init__(self) -> None:
        self.images = np.ascontiguousarray(self.images, dtype=np.complex128)
        n = len(self.poses)
        if n < 1:
            raise ValueError("stack needs at least one image")
        if self.images.shape != (n, self.spec.n_pixels):
            raise ValueError(
                f"images shape {self.images.shape} does not match "
                f"(N={n}, M^2={self.spec.n_pixels})"
            )
        if self.ctfs is not None and len(self.ctfs) != n:
            raise ValueError("ctfs length must match poses")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def n_images(self) -> int:
        return len(self.poses)


def sample_uniform_poses(n: int, shift_bound: float, seed: int) -> list[Pose]:
    """Draw ``n`` poses with rotations uniform on SO(3).

    Quaternions are normalized standard-normal draws (uniform on the
    3-sphere); shifts are uniform in ``[-shift_bound, shift_bound]^2``.
    """
    if n < 1:
        raise ValueError("need n >= 1 poses")
    if shift_bound < 0:
        raise ValueError("shift_bound must be non-negative")
    rng = np.random.default_rng(seed)
    qs = rng.standard_normal((n, 4))
    qs /= np.linalg.norm(qs, axis=1, keepdims=True)
    if shift_bound > 0:
        ts = rng.uniform(-shift_bound, shift_bound, size=(n, 2))
    else:
        ts = np.zeros((n, 2))
    return [Pose(q=qs[i], t=ts[i]) for i in range(n)]


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def sample_preferred_poses(
    n: int, shift_bound: float, seed: int, concentration: float
) -> list[Pose]:
    """Draw poses whose slice normals cluster around one preferred axis.

    Real particle orientations rarely cover SO(3) evenly; clustering the
    projection directions leaves whole high-frequency regions unseen,
    which is what makes the reconstruction badly conditioned in practice.
    Directions are ``normalize(concentration * z + gaussian)`` (soft
    cluster, 0 recovers the uniform sampler); the in-plane spin is
    uniform.
    """
    if concentration == 0:
        return sample_uniform_poses(n, shift_bound, seed)
    if n < 1:
        raise ValueError("need n >= 1 poses")
    if shift_bound < 0 or concentration < 0:
        raise ValueError("shift_bound and concentration must be non-negative")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n, 3))
    dirs[:, 2] += concentration
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    psis = rng.uniform(0.0, 2.0 * np.pi, n)
    if shift_bound > 0:
        ts = rng.uniform(-shift_bound, shift_bound, size=(n, 2))
    else:
        ts = np.zeros((n, 2))
    z_axis = np.array([0.0, 0.0, 1.0])
    poses = []
    for i in range(n):
        d = dirs[i]
        c = float(d @ z_axis)
        if c > 1.0 - 1e-12:
            q_align = np.array([1.0, 0.0, 0.0, 0.0])
        elif c < -1.0 + 1e-12:
            q_align = np.array([0.0, 1.0, 0.0, 0.0])
        else:
            axis = np.cross(z_axis, d)
            axis /= np.linalg.norm(axis)
            half = 0.5 * np.arccos(c)
            q_align = np.concatenate([[np.cos(half)], np.sin(half) * axis])
        half_psi = 0.5 * psis[i]
        q_spin = np.array([np.cos(half_psi), 0.0, 0.0, np.sin(half_psi)])
        # R^T must map z to the chosen direction, so the pose quaternion is
        # the conjugate of align(z -> d) composed with the in-plane spin.
        q = _quat_multiply(q_align, q_spin)
        q[1:] = -q[1:]
        q /= np.linalg.norm(q)
        poses.append(Pose(q=q, t=ts[i]))
    return poses


def _validate_mask(spec: GridSpec, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.int64).reshape(-1)
    if mask.size == 0:
        raise ValueError("mask must not be empty")
    if np.any(np.diff(mask) <= 0):
        raise ValueError("mask must be strictly ascending pixel indices")
    limit = disk_mask(spec, spec.max_mask_radius)
    if not np.isin(mask, limit).all():
        raise ValueError(
            "mask contains pixels outside the rotation-safe disk "
            f"(radius {spec.max_mask_radius})"
        )
    return mask


class Projector:
    """Batched slice projector for a fixed grid, pixel mask, and mode."""

    def __init__(self, spec: GridSpec, mask: np.ndarray, mode: str):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.spec = spec
        self.mode = mode
        self.mask = _validate_mask(spec, mask)
        coords = spec.pixel_coords()[self.mask]
        self.pix = np.ascontiguousarray(coords, dtype=np.float64)
        self.pix_radii = np.sqrt((self.pix ** 2).sum(axis=1))
        self._ones = np.ones(self.mask.size, dtype=np.float64)

    @property
    def n_mask(self) -> int:
        return self.mask.size

    # -- per-batch coefficient tables --------------------------------------

    def rot_batch(self, poses: list[Pose]) -> np.ndarray:
        return np.ascontiguousarray([p.rotation_matrix() for p in poses])

    def phase_batch(self, poses: list[Pose]) -> np.ndarray:
        """Shift phases exp(-2*pi*i (kx*tx + ky*ty) / M), shape (B, n)."""
        ts = np.array([p.t for p in poses])
        ang = (-2.0 * np.pi / self.spec.M) * (ts @ self.pix.T)
        return np.exp(1j * ang)

    def ctf_batch(self, ctfs: list[CtfParams] | None, n: int) -> np.ndarray:
        """CTF values per (image, masked pixel); ones when ``ctfs`` is None."""
        if ctfs is None:
            return np.broadcast_to(self._ones, (n, self.n_mask))
        r_max = self.spec.half
        return np.ascontiguousarray(
            [ctf_eval(c, self.pix_radii, r_max) for c in ctfs]
        )

    # -- core operations ----------------------------------------------------

    def project_batch(self, values, rots, phases, ctf_vals) -> np.ndarray:
        out = np.empty((rots.shape[0], self.n_mask), dtype=np.complex128)
        if self.mode == "tri":
            kernels.project_tri(values, rots, self.pix, phases, ctf_vals,
                                self.spec.M, out)
        else:
            kernels.project_nn(values, rots, self.pix, phases, ctf_vals,
                               self.spec.M, out)
        return out

    def backproject_batch(self, imgs, rots, phases, ctf_vals) -> np.ndarray:
        vols = np.zeros((kernels.n_chunks(rots.shape[0]), self.spec.n_voxels),
                        dtype=np.complex128)
        if self.mode == "tri":
            kernels.backproject_tri(imgs, rots, self.pix, phases, ctf_vals,
                                    self.spec.M, vols)
        else:
            kernels.backproject_nn(imgs, rots, self.pix, phases, ctf_vals,
                                   self.spec.M, vols)
        return kernels.fold_chunks(vols)

    def assign_nn(self, rots: np.ndarray) -> np.ndarray:
        """Nearest-neighbor voxel index per (image, masked pixel)."""
        return kernels.assign_nn(rots, self.pix, self.spec.M)

    def scatter_sq(self, rots: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Diagonal of the normal operator restricted to these images."""
        if self.mode == "tri":
            vols = np.zeros((kernels.n_chunks(rots.shape[0]), self.spec.n_voxels))
            kernels.scatter_sq_tri(weights, rots, self.pix, self.spec.M, vols)
            return kernels.fold_chunks(vols)
        idx = kernels.assign_nn(rots, self.pix, self.spec.M)
        return np.bincount(idx.ravel(), weights=weights.ravel(),
                           minlength=self.spec.n_voxels)


_PROJECTOR_CACHE: dict = {}


def _cached_projector(spec: GridSpec, mask, mode: str) -> Projector:
    mask = np.asarray(mask, dtype=np.int64)
    key = (spec, mode, mask.tobytes())
    proj = _PROJECTOR_CACHE.get(key)
    if proj is None:
        proj = Projector(spec, mask, mode)
        if len(_PROJECTOR_CACHE) > 64:
            _PROJECTOR_CACHE.clear()
        _PROJECTOR_CACHE[key] = proj
    return proj


def project(
    v: FourierVolume,
    pose: Pose,
    ctf: CtfParams | None = None,
    mode: str = "tri",
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Project one volume to one image; zeros outside the mask."""
    if mask is None:
        mask = disk_mask(v.spec, v.spec.max_mask_radius)
    proj = _cached_projector(v.spec, mask, mode)
    rots = proj.rot_batch([pose])
    phases = proj.phase_batch([pose])
    ctf_vals = proj.ctf_batch([ctf] if ctf is not None else None, 1)
    img = np.zeros(v.spec.n_pixels, dtype=np.complex128)
    img[proj.mask] = proj.project_batch(v.values, rots, phases, ctf_vals)[0]
    return img


def backproject(
    img: np.ndarray,
    pose: Pose,
    ctf: CtfParams | None = None,
    mode: str = "tri",
    mask: np.ndarray | None = None,
    spec: GridSpec | None = None,
) -> FourierVolume:
    """Adjoint of :func:`project` for one image."""
    img = np.asarray(img, dtype=np.complex128).reshape(-1)
    if spec is None:
        m = round(np.sqrt(img.size))
        if m * m != img.size:
            raise ValueError("image length is not a perfect square")
        spec = GridSpec(m)
    if mask is None:
        mask = disk_mask(spec, spec.max_mask_radius)
    proj = _cached_projector(spec, mask, mode)
    rots = proj.rot_batch([pose])
    phases = proj.phase_batch([pose])
    ctf_vals = proj.ctf_batch([ctf] if ctf is not None else None, 1)
    vol = proj.backproject_batch(img[proj.mask][None, :], rots, phases, ctf_vals)
    return FourierVolume(vol, spec)


def _noise_for_image(seed: int, index: int, n: int, sigma: float) -> np.ndarray:
    """Complex Gaussian noise with total per-pixel variance ``sigma**2``.

    Drawn from an independent stream keyed by (seed, image index), so the
    dataset does not depend on generation or batch order.  The spawn-key
    namespace (100, i) is reserved for noise; other consumers of the same
    seed use disjoint leading keys.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(100, index))
    )
    scale = sigma / np.sqrt(2.0)
    re_im = rng.standard_normal((2, n))
    return scale * (re_im[0] + 1j * re_im[1])


def synthesize_dataset(
    v: FourierVolume,
    poses: list[Pose],
    ctfs: list[CtfParams] | None,
    sigma: float,
    mode: str = "tri",
    mask_radius: int | None = None,
    seed: int = 0,
) -> ImageStack:
    """Generate noisy projections of ``v`` for the given poses and CTFs."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    spec = v.spec
    if mask_radius is None:
        mask_radius = spec.max_mask_radius
    mask = disk_mask(spec, mask_radius)
    proj = _cached_projector(spec, mask, mode)
    n_img = len(poses)
    if ctfs is not None and len(ctfs) != n_img:
        raise ValueError("ctfs length must match poses")
    images = np.zeros((n_img, spec.n_pixels), dtype=np.complex128)
    for lo in range(0, n_img, PASS_CHUNK):
        hi = min(lo + PASS_CHUNK, n_img)
        batch = poses[lo:hi]
        rots = proj.rot_batch(batch)
        phases = proj.phase_batch(batch)
        ctf_vals = proj.ctf_batch(ctfs[lo:hi] if ctfs is not None else None,
                                  hi - lo)
        clean = proj.project_batch(v.values, rots, phases, ctf_vals)
        for b in range(hi - lo):
            img = clean[b]
            if sigma > 0:
                img = img + _noise_for_image(seed, lo + b, proj.n_mask, sigma)
            images[lo + b, proj.mask] = img
    return ImageStack(
        spec=spec,
        images=images,
        poses=list(poses),
        ctfs=list(ctfs) if ctfs is not None else None,
        sigma=float(sigma),
        seed=int(seed),
        mask_radius=int(mask_radius),
        mode=mode,
    )


def gaussian_blob_phantom(
    spec: GridSpec,
    n_blobs: int = 8,
    seed: int = 0,
    widths: tuple[float, float] = (0.35, 1.2),
) -> FourierVolume:
    """Deterministic synthetic volume: anisotropic Gaussian blobs.

    Each blob is a real-space Gaussian with anisotropic covariance placed
    near the box center, written directly in the Fourier domain as

        a * exp(-2 pi^2 k^T Sigma k / M^2) * exp(-2 pi i k . mu / M).

    Blob widths (axis standard deviations in pixels, drawn from
    ``widths``) default to the sub-pixel range so the spectrum keeps
    usable energy out to the mask radius.
    """
    rng = np.random.default_rng(seed)
    M = spec.M
    coords = spec.voxel_coords().astype(np.float64)
    values = np.zeros(spec.n_voxels, dtype=np.complex128)
    for _ in range(n_blobs):
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        rot = quat_to_matrix(q)
        sig = rng.uniform(widths[0], widths[1], size=3)
        cov = rot @ np.diag(sig ** 2) @ rot.T
        mu = rng.uniform(-M / 6.0, M / 6.0, size=3)
        amp = rng.uniform(0.5, 1.5)
        quad = np.einsum("vi,ij,vj->v", coords, cov, coords)
        values += amp * np.exp(-2.0 * np.pi ** 2 * quad / M ** 2) * np.exp(
            -2j * np.pi * (coords @ mu) / M
        )
    return FourierVolume(values, spec)


class DatasetOperator:
    """Forward model bound to one stack: batched projections over image subsets.

    Precomputes per-image rotation matrices, shift phases, and CTF values
    once; all optimizer and Hessian machinery works through this object.
    Full-dataset passes stream in fixed-size slices so accumulation order
    (and hence the floating-point result) is always the same.
    """

    def __init__(self, stack: ImageStack, mode: str | None = None):
        self.stack = stack
        self.spec = stack.spec
        self.mode = mode or stack.mode
        self.mask = disk_mask(self.spec, stack.mask_radius)
        self.projector = Projector(self.spec, self.mask, self.mode)
        self.rots = self.projector.rot_batch(stack.poses)
        self.phases = self.projector.phase_batch(stack.poses)
        self.ctf_vals = self.projector.ctf_batch(stack.ctfs, stack.n_images)
        self.x = np.ascontiguousarray(stack.images[:, self.mask])

    @property
    def n_images(self) -> int:
        return self.stack.n_images

    @property
    def n_mask(self) -> int:
        return self.projector.n_mask

    def all_indices(self) -> np.ndarray:
        return np.arange(self.n_images)

    def project(self, values: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Project onto the images in ``idx``; returns (len(idx), n_mask)."""
        idx = np.asarray(idx)
        return self.projector.project_batch(
            values, self.rots[idx], self.phases[idx], self.ctf_vals[idx]
        )

    def backproject(self, imgs: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Sum of per-image adjoints over ``idx``; returns a volume vector."""
        idx = np.asarray(idx)
        return self.projector.backproject_batch(
            imgs, self.rots[idx], self.phases[idx], self.ctf_vals[idx]
        )

    def hvp(self, z: np.ndarray, idx: np.ndarray, lam: float,
            n_total: int | None = None) -> np.ndarray:
        """Hessian-vector product estimated from the images in ``idx``.

        Returns ``(n_total / len(idx)) * sum_i P_i^* C_i^2 P_i z + lam * z``,
        an unbiased estimator of ``H z`` under uniform batch sampling.
        """
        idx = np.asarray(idx)
        if idx.size == 0:
            raise ValueError("batch must be nonempty")
        if n_total is None:
            n_total = self.n_images
        acc = np.zeros(self.spec.n_voxels, dtype=np.complex128)
        for lo in range(0, idx.size, PASS_CHUNK):
            sub = idx[lo:lo + PASS_CHUNK]
            acc += self.backproject(self.project(z, sub), sub)
        return (n_total / idx.size) * acc + lam * np.asarray(z, dtype=np.complex128)

    def b_vector(self) -> np.ndarray:
        """Right-hand side sum_i P_i^* C_i x_i of the normal equations."""
        acc = np.zeros(self.spec.n_voxels, dtype=np.complex128)
        idx = self.all_indices()
        for lo in range(0, idx.size, PASS_CHUNK):
            sub = idx[lo:lo + PASS_CHUNK]
            acc += self.backproject(self.x[sub], sub)
        return acc
