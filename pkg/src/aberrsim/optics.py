"""Sequential geometric ray tracing through rotationally symmetric spherical lenses.

Conventions: the optical axis is +z, the first surface vertex sits at z = 0,
geometry is in millimetres and wavelengths in micrometres. Object points are
at infinity, so a field is a collimated bundle with a common direction.
The aperture stop is the first surface.

The batch functions (``intersect_batch``, ``refract_batch``, ``trace_rays``)
work on ``(N, 3)`` arrays and carry a boolean ``alive`` mask instead of
raising; the scalar functions wrap them and raise on failure.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .errors import ConfigError, DataIOError, GeometryError, TotalInternalReflection

# Fraunhofer lines, micrometres
WAVELENGTH_D = 0.5876
WAVELENGTH_F = 0.4861
WAVELENGTH_C = 0.6563

VISIBLE_BAND = (0.4, 0.7)
_TANGENT_EPS = 1e-14


@dataclass(frozen=True)
class MaterialDispersion:
    """Two-term Cauchy model ``n(lambda) = a + b / lambda**2`` (lambda in um)."""

    a: float
    b: float

    def __post_init__(self):
        lo, hi = VISIBLE_BAND
        if min(self.a + self.b / lo**2, self.a + self.b / hi**2) <= 1.0:
            raise ConfigError(f"material index must exceed 1 on {VISIBLE_BAND} um: {self}")

    @classmethod
    def from_catalog(cls, n_d: float, abbe: float) -> "MaterialDispersion":
        """Fit (a, b) so the model reproduces the d-line index and Abbe number exactly."""
        if not (n_d > 1.0 and abbe > 0.0):
            raise ConfigError(f"need n_d > 1 and abbe > 0, got n_d={n_d}, abbe={abbe}")
        b = (n_d - 1.0) / (abbe * (WAVELENGTH_F**-2 - WAVELENGTH_C**-2))
        a = n_d - b / WAVELENGTH_D**2
        return cls(a, b)

    def index(self, wavelength: float) -> float:
        return refractive_index(self, wavelength)


def refractive_index(material: MaterialDispersion, wavelength: float) -> float:
    if not 0.3 <= wavelength <= 1.0:
        raise ConfigError(f"wavelength {wavelength} um outside [0.3, 1.0]")
    return material.a + material.b / wavelength**2


@dataclass(frozen=True)
class Surface:
    """One spherical interface; ``n_d``/``abbe`` describe the medium after it (None = air)."""

    curvature: float
    thickness_after: float
    semi_diameter: float
    n_d: float | None = None
    abbe: float | None = None

    def __post_init__(self):
        if not self.semi_diameter > 0:
            raise ConfigError(f"semi_diameter must be positive, got {self.semi_diameter}")
        if abs(self.curvature) * self.semi_diameter >= 1.0:
            raise ConfigError(
                f"|c| * semi_diameter = {abs(self.curvature) * self.semi_diameter:.4f} >= 1; "
                "surface would pass its hemisphere"
            )
        if (self.n_d is None) != (self.abbe is None):
            raise ConfigError("n_d and abbe must be given together")
        if self.n_d is not None:
            MaterialDispersion.from_catalog(self.n_d, self.abbe)

    @property
    def material(self) -> MaterialDispersion | None:
        if self.n_d is None:
            return None
        return MaterialDispersion.from_catalog(self.n_d, self.abbe)

    def index_after(self, wavelength: float) -> float:
        m = self.material
        return 1.0 if m is None else refractive_index(m, wavelength)


@dataclass(frozen=True)
class LensPrescription:
    surfaces: tuple[Surface, ...]
    max_half_fov_deg: float
    aperture_radius_mm: float
    image_distance_mm: float
    focus_shift_mm: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if not self.surfaces:
            raise ConfigError("prescription needs at least one surface")
        if not 0.0 < self.max_half_fov_deg < 90.0:
            raise ConfigError(f"max_half_fov_deg must lie in (0, 90), got {self.max_half_fov_deg}")
        if not self.aperture_radius_mm > 0:
            raise ConfigError("aperture_radius_mm must be positive")
        if self.aperture_radius_mm > self.surfaces[0].semi_diameter:
            raise ConfigError("aperture stop is larger than the first surface's clear aperture")
        for i, s in enumerate(self.surfaces[:-1]):
            if not s.thickness_after > 0:
                raise ConfigError(f"surface {i}: thickness_after must be positive")
        if self.surfaces[-1].n_d is not None:
            raise ConfigError("the last surface must exit into air")
        if not self.image_distance_mm + self.focus_shift_mm > 0:
            raise ConfigError("image plane lies before the last surface")

    @property
    def max_half_fov(self) -> float:
        return math.radians(self.max_half_fov_deg)

    @property
    def vertex_z(self) -> np.ndarray:
        gaps = [0.0] + [s.thickness_after for s in self.surfaces[:-1]]
        return np.cumsum(gaps)

    @property
    def image_z(self) -> float:
        return float(self.vertex_z[-1]) + self.image_distance_mm + self.focus_shift_mm

    def indices(self, wavelength: float) -> np.ndarray:
        """Refractive index before each surface followed by the index after the last."""
        return np.array([1.0] + [s.index_after(wavelength) for s in self.surfaces])

    def to_dict(self) -> dict:
        surfaces = []
        for s in self.surfaces:
            d = {"c": s.curvature, "s": s.thickness_after, "semi_diameter": s.semi_diameter}
            if s.n_d is not None:
                d.update(n_d=s.n_d, abbe=s.abbe)
            surfaces.append(d)
        return {
            "surfaces": surfaces,
            "max_half_fov_deg": self.max_half_fov_deg,
            "aperture_radius_mm": self.aperture_radius_mm,
            "image_distance_mm": self.image_distance_mm,
            "focus_shift_mm": self.focus_shift_mm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LensPrescription":
        try:
            surfaces = []
            for s in d["surfaces"]:
                n_d = s.get("n_d")
                if n_d is not None and float(n_d) == 1.0:
                    n_d = None
                surfaces.append(
                    Surface(
                        curvature=float(s["c"]),
                        thickness_after=float(s.get("s", 0.0)),
                        semi_diameter=float(s["semi_diameter"]),
                        n_d=None if n_d is None else float(n_d),
                        abbe=None if n_d is None else float(s["abbe"]),
                    )
                )
            return cls(
                surfaces=tuple(surfaces),
                max_half_fov_deg=float(d["max_half_fov_deg"]),
                aperture_radius_mm=float(d["aperture_radius_mm"]),
                image_distance_mm=float(d["image_distance_mm"]),
                focus_shift_mm=float(d.get("focus_shift_mm", 0.0)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed lens prescription: {exc!r}") from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_focus_shift(self, shift_mm: float) -> "LensPrescription":
        return replace(self, focus_shift_mm=shift_mm)


def load_prescription(path) -> LensPrescription:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError as exc:
        raise DataIOError(f"lens file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return LensPrescription.from_dict(data)


def save_prescription(prescription: LensPrescription, path) -> None:
    try:
        Path(path).write_text(tomli_w.dumps(prescription.to_dict()))
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def reference_lens(name: str) -> LensPrescription:
    """Load one of the bundled stand-in prescriptions (``mos_s1``, ``mos_s2``, ``singlet``)."""
    path = Path(__file__).parent / "data" / f"{name}.toml"
    if not path.exists():
        raise ConfigError(f"no bundled lens named {name!r}")
    return load_prescription(path)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    intensity_weight: float = 1.0
    alive: bool = True

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        self.direction = d / np.linalg.norm(d)


def surface_sag(curvature: float, radial_distance: float) -> float:
    """Axial depth of a spherical surface at ``radial_distance`` from its vertex."""
    c, r = curvature, radial_distance
    q = 1.0 - c * c * r * r
    if q <= 0.0:
        raise GeometryError(f"c^2 r^2 = {1 - q:.6f} >= 1: beyond the hemisphere")
    return c * r * r / (1.0 + math.sqrt(q))


def propagate(ray: Ray, t: float) -> np.ndarray:
    return ray.origin + t * ray.direction


def intersect_batch(origins, directions, curvature: float, vertex_z: float):
    """Intersect rays with the sphere branch that contains the vertex.

    Returns ``(points, normals, t, hit)``. Normals are unit vectors oriented
    against the incoming rays. ``hit`` is False where the ray misses, grazes
    (discriminant below 1e-14) or would need ``t <= 0``.
    """
    S = np.asarray(origins, dtype=float)
    D = np.asarray(directions, dtype=float)
    c = curvature
    P = S - np.array([0.0, 0.0, vertex_z])
    # c|P + tD|^2 - 2(Pz + t Dz) = 0  ->  c t^2 + 2 B t + C = 0
    B = c * np.einsum("ij,ij->i", P, D) - D[:, 2]
    C = c * np.einsum("ij,ij->i", P, P) - 2.0 * P[:, 2]
    disc = B * B - c * C
    hit = disc > _TANGENT_EPS
    root = np.sqrt(np.where(hit, disc, 1.0))
    denom = root - B
    hit &= denom != 0.0
    # rationalised root on the vertex branch; well defined as c -> 0
    t = np.where(hit, C / np.where(denom == 0.0, 1.0, denom), np.nan)
    hit &= t > 0.0
    pts = S + t[:, None] * D
    rel_z = pts[:, 2] - vertex_z
    grad = np.stack([c * pts[:, 0], c * pts[:, 1], c * rel_z - 1.0], axis=1)
    normals = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    flip = np.einsum("ij,ij->i", normals, D) > 0.0
    normals[flip] *= -1.0
    return pts, normals, t, hit


def intersect_spherical(ray: Ray, surface: Surface, vertex_z: float):
    """Hit point, inward-facing unit normal and path length for one ray.

    A ray landing outside the clear aperture is marked dead (``ray.alive``)
    and returned normally; a miss or a non-positive path length raises.
    """
    if not ray.alive:
        raise GeometryError("ray is dead")
    pts, normals, t, hit = intersect_batch(
        ray.origin[None], ray.direction[None], surface.curvature, vertex_z
    )
    if not hit[0]:
        raise GeometryError("ray misses the surface")
    if math.hypot(pts[0, 0], pts[0, 1]) > surface.semi_diameter:
        ray.alive = False
    return pts[0], normals[0], float(t[0])


def refract_batch(directions, normals, n1, n2):
    """Vector Snell refraction. Normal orientation does not matter.

    Returns ``(new_directions, ok)``; ``ok`` is False on total internal reflection.
    """
    D = np.asarray(directions, dtype=float)
    p = np.asarray(normals, dtype=float)
    n1 = np.asarray(n1, dtype=float)
    n2 = np.asarray(n2, dtype=float)
    cos = np.einsum("ij,ij->i", p, D)
    # orient p against the ray so the incidence cosine is non-negative
    sign = np.where(cos > 0.0, -1.0, 1.0)
    p = p * sign[:, None]
    cos = np.abs(cos)
    mu = n1 / n2
    radicand = 1.0 / (mu * mu) - 1.0 + cos * cos
    ok = radicand >= 0.0
    root = np.sqrt(np.where(ok, radicand, 0.0))
    scale = mu[:, None] if mu.ndim else mu
    return scale * (D + (cos - root)[:, None] * p), ok


def refract(direction, normal, n1: float, n2: float) -> np.ndarray:
    D = np.asarray(direction, dtype=float)
    p = np.asarray(normal, dtype=float)
    out, ok = refract_batch(D[None], p[None], n1, n2)
    if not ok[0]:
        raise TotalInternalReflection(f"total internal reflection (n1={n1}, n2={n2})")
    return out[0]


def field_direction(theta: float, azimuth: float = 0.0) -> np.ndarray:
    """Unit direction of a collimated bundle at polar angle ``theta`` (radians)."""
    s = math.sin(theta)
    return np.array([s * math.cos(azimuth), s * math.sin(azimuth), math.cos(theta)])


def launch_bundle(prescription: LensPrescription, field_dir, pupil_points):
    """Origins/directions of a collimated bundle crossing the stop plane z=0 at ``pupil_points``."""
    d = np.asarray(field_dir, dtype=float)
    d = d / np.linalg.norm(d)
    pp = np.atleast_2d(np.asarray(pupil_points, dtype=float))
    first = prescription.surfaces[0]
    back = 1.0 + abs(surface_sag(first.curvature, first.semi_diameter))
    through = np.column_stack([pp[:, 0], pp[:, 1], np.zeros(len(pp))])
    origins = through - (back / d[2]) * d
    return origins, np.broadcast_to(d, origins.shape).copy()


@dataclass
class TraceResult:
    hits: np.ndarray  # (N, 2) image-plane x', y' in mm; NaN for dead rays
    alive: np.ndarray  # (N,) bool
    surface_points: list = field(default_factory=list)  # per surface (N, 3), when recorded


def trace_rays(
    prescription: LensPrescription,
    origins,
    directions,
    wavelength: float,
    record: bool = False,
) -> TraceResult:
    """Trace a batch of rays through every surface to the image plane."""
    S = np.array(origins, dtype=float)
    D = np.array(directions, dtype=float)
    alive = np.ones(len(S), dtype=bool)
    n = prescription.indices(wavelength)
    recorded = []
    for i, (surf, vz) in enumerate(zip(prescription.surfaces, prescription.vertex_z)):
        pts, normals, _, hit = intersect_batch(S, D, surf.curvature, vz)
        alive &= hit
        alive &= np.hypot(pts[:, 0], pts[:, 1]) <= surf.semi_diameter
        newD, ok = refract_batch(D, normals, n[i], n[i + 1])
        alive &= ok
        S = np.where(alive[:, None], pts, S)
        D = np.where(alive[:, None], newD, D)
        if record:
            recorded.append(np.where(alive[:, None], pts, np.nan))
    zi = prescription.image_z
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (zi - S[:, 2]) / D[:, 2]
    alive &= np.isfinite(t) & (t > 0.0)
    end = S + t[:, None] * D
    hits = np.where(alive[:, None], end[:, :2], np.nan)
    return TraceResult(hits=hits, alive=alive, surface_points=recorded)


def trace_to_image(prescription: LensPrescription, field_dir, pupil_point, wavelength: float):
    """Image-plane ``(x', y')`` of one ray, or ``None`` if it is vignetted or reflected."""
    if math.hypot(*pupil_point) > prescription.aperture_radius_mm:
        raise ConfigError("pupil point outside the aperture stop")
    origins, dirs = launch_bundle(prescription, field_dir, [pupil_point])
    res = trace_rays(prescription, origins, dirs, wavelength)
    if not res.alive[0]:
        return None
    return float(res.hits[0, 0]), float(res.hits[0, 1])


@dataclass(frozen=True)
class ParaxialResult:
    efl: float
    bfl: float

    def image_height_of(self, theta: float) -> float:
        """Paraxial image height (mm) for a field at angle ``theta`` (radians)."""
        return self.efl * math.tan(theta)


def paraxial_trace(prescription: LensPrescription, wavelength: float = WAVELENGTH_D) -> ParaxialResult:
    """Small-angle (y, nu) trace of a unit-height axial-parallel ray."""
    n = prescription.indices(wavelength)
    y, nu = 1.0, 0.0
    for i, surf in enumerate(prescription.surfaces):
        nu = nu - y * surf.curvature * (n[i + 1] - n[i])
        if i < len(prescription.surfaces) - 1:
            y = y + surf.thickness_after * nu / n[i + 1]
    u = nu / n[-1]
    if abs(u) < 1e-12:
        raise GeometryError("afocal prescription: effective focal length diverges")
    return ParaxialResult(efl=-1.0 / u, bfl=-y / u)

