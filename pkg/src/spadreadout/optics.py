"""Monte Carlo ray tracing of ion fluorescence into a buried SPAD.

The stack is a list of planar slabs between the ion and the SPAD plane
(z = 0).  A slab is either a dielectric or a metal film with a circular
aperture centred on the SPAD axis; the aperture is filled with the slab's
``index`` medium.  Rays refract at every index change (Snell), may be
Fresnel-reflected (unpolarised average, sampled as a Bernoulli split), and
are absorbed on any metal outside an aperture.  By default a reflected or
totally internally reflected ray is counted as lost; bounces can be
followed instead, and metal faces can be made specular.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import dblquad

__all__ = [
    "Layer",
    "GeometryStack",
    "RayResult",
    "CrosstalkCurve",
    "default_stack",
    "refract",
    "fresnel_reflectance",
    "trace_ray",
    "trace_rays",
    "sample_cone",
    "importance_half_angle",
    "importance_region",
    "SamplingRegion",
    "collection_efficiency",
    "crosstalk_curve",
    "cone_fraction",
    "disk_solid_angle_fraction",
]


@dataclass(frozen=True)
class Layer:
    name: str
    thickness: float
    index: float = 1.0
    aperture: Optional[float] = None  # diameter; None for a plain dielectric

    @property
    def is_metal(self) -> bool:
        return self.aperture is not None


@dataclass(frozen=True)
class GeometryStack:
    """Ion height above the top layer, layers listed top to bottom, SPAD disk below."""

    ion_height: float = 50e-6
    layers: tuple = ()
    spad_diameter: float = 40e-6
    fresnel: bool = True
    track_reflections: bool = False  # follow Fresnel/TIR bounces instead of counting them lost
    metal_reflectivity: float = 0.0  # specular reflectance of horizontal metal faces
    max_bounces: int = 64

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.ion_height <= 0 or self.spad_diameter <= 0:
            raise ValueError("ion_height and spad_diameter must be positive")
        for layer in self.layers:
            if layer.thickness <= 0:
                raise ValueError(f"layer {layer.name!r}: thickness must be positive")
            if layer.index < 1:
                raise ValueError(f"layer {layer.name!r}: refractive index must be >= 1")
            if layer.aperture is not None and layer.aperture <= 0:
                raise ValueError(f"layer {layer.name!r}: aperture must be positive")
        if not 0 <= self.metal_reflectivity <= 1:
            raise ValueError("metal_reflectivity must lie in [0, 1]")
        apertures = [layer.aperture for layer in self.layers if layer.aperture is not None]
        if apertures and min(apertures) > self.spad_diameter:
            raise ValueError("the clear aperture is wider than the SPAD active area")

    @property
    def stack_height(self) -> float:
        return sum(layer.thickness for layer in self.layers)

    @property
    def ion_z(self) -> float:
        return self.stack_height + self.ion_height

    def boundaries(self):
        """(z_top, z_bottom, layer) for each layer, top first."""
        z = self.stack_height
        out = []
        for layer in self.layers:
            out.append((z, z - layer.thickness, layer))
            z -= layer.thickness
        return out

    def replace(self, **changes) -> "GeometryStack":
        from dataclasses import replace

        return replace(self, **changes)

    def with_uniform_index(self, index: float = 1.0, remove_apertures: bool = False) -> "GeometryStack":
        layers = [
            Layer(l.name, l.thickness, index, None if remove_apertures else l.aperture) for l in self.layers
        ]
        return self.replace(layers=tuple(layers))


def default_stack(
    ion_height=50e-6,
    trap_metal_thickness=1e-6,
    trap_aperture=30e-6,
    oxide_top_thickness=10e-6,
    oxide_index=1.46,
    ground_thickness=0.5e-6,
    ground_aperture=40e-6,
    oxide_bottom_thickness=2e-6,
    oxide_bottom_index=None,
    spad_diameter=40e-6,
    fresnel=True,
) -> GeometryStack:
    """Trap metal / 10 um oxide / ground plane / 2 um oxide / SPAD.

    The trap-metal aperture is open (vacuum); the ground-plane aperture is
    filled by the oxide deposited over it.
    """
    if oxide_bottom_index is None:
        oxide_bottom_index = oxide_index
    layers = (
        Layer("trap_metal", trap_metal_thickness, 1.0, trap_aperture),
        Layer("oxide_top", oxide_top_thickness, oxide_index),
        Layer("ground_plane", ground_thickness, oxide_index, ground_aperture),
        Layer("oxide_bottom", oxide_bottom_thickness, oxide_bottom_index),
    )
    return GeometryStack(ion_height, layers, spad_diameter, fresnel)


# ray status codes
ALIVE, HIT, ABSORBED, REFLECTED, TIR, ESCAPED, MISSED, BOUNCES = range(8)
STATUS_NAMES = ("alive", "hit", "absorbed", "reflected", "tir", "escaped", "missed_spad", "bounce_limit")


@dataclass
class RayResult:
    hit: bool
    path: list = field(default_factory=list)
    reason: str = ""


def refract(direction, n1: float, n2: float):
    """Refract at a horizontal interface (either travel direction); None on total internal reflection."""
    d = np.asarray(direction, dtype=float)
    eta = n1 / n2
    cos_i = abs(d[2])
    sin2_t = eta * eta * (1.0 - cos_i * cos_i)
    if sin2_t > 1.0:
        return None
    out = eta * d
    out[2] = math.copysign(math.sqrt(1.0 - sin2_t), d[2])
    return out


def fresnel_reflectance(cos_i, n1: float, n2: float):
    """Unpolarised power reflectance; 1 where total internal reflection occurs."""
    cos_i = np.asarray(cos_i, dtype=float)
    sin2_t = (n1 / n2) ** 2 * (1.0 - cos_i**2)
    tir = sin2_t >= 1.0
    cos_t = np.sqrt(np.clip(1.0 - sin2_t, 0.0, 1.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        rs = (n1 * cos_i - n2 * cos_t) / (n1 * cos_i + n2 * cos_t)
        rp = (n2 * cos_i - n1 * cos_t) / (n2 * cos_i + n1 * cos_t)
    out = np.where(tir, 1.0, 0.5 * (rs * rs + rp * rp))
    return float(out) if out.ndim == 0 else out


def _propagate(p, d, stack: GeometryStack, rng, path=None):
    """Event loop shared by the scalar and batch tracers; returns a status array.

    Each ray sits in a slab (-1 above the stack, found from its origin) and moves to the next
    horizontal plane along its direction.  At the plane it is absorbed,
    reflected or refracted into the neighbouring slab.  Aperture walls are
    absorbing; horizontal metal faces reflect with ``metal_reflectivity``.
    """
    bounds = stack.boundaries()
    nl = len(bounds)
    z_top = np.array([b[0] for b in bounds] + [0.0])
    z_bot = np.array([b[1] for b in bounds] + [0.0])
    index = np.array([b[2].index for b in bounds] + [1.0])
    radius = np.array([np.inf if b[2].aperture is None else 0.5 * b[2].aperture for b in bounds] + [np.inf])
    n = len(d)
    z0 = p[:, 2]
    if np.any(z0 <= 0):
        raise ValueError("ray origins must lie above the SPAD plane")
    # starting slab from the origin height; -1 is the vacuum above the stack
    slab = np.full(n, -1)
    for i, (zt, zb, _) in enumerate(bounds):
        slab[(z0 < zt) & (z0 >= zb)] = i
    n_cur = np.where(slab >= 0, index[np.clip(slab, 0, nl)], 1.0)
    status = np.where(d[:, 2] == 0, ESCAPED, ALIVE)  # horizontal rays never meet a plane
    tracked = stack.track_reflections
    for _ in range(stack.max_bounces):
        act = np.flatnonzero(status == ALIVE)
        if act.size == 0:
            break
        L = slab[act]
        dz = d[act, 2]
        down = dz < 0
        up_out = (~down) & (L < 0)
        status[act[up_out]] = ESCAPED
        keep = ~up_out
        act, L, dz, down = act[keep], L[keep], dz[keep], down[keep]
        if act.size == 0:
            break
        Lc = np.where(L < 0, 0, L)
        plane = np.where(down, np.where(L < 0, z_top[0], z_bot[Lc]), z_top[Lc])
        t = (plane - p[act, 2]) / dz
        p[act] += t[:, None] * d[act]
        p[act, 2] = plane
        if path is not None:
            path.append(p[0].copy())
        r = np.hypot(p[act, 0], p[act, 1])
        in_metal = (L >= 0) & (r >= radius[Lc])
        status[act[in_metal]] = ABSORBED
        nxt = np.where(down, L + 1, L - 1)
        at_spad = nxt == nl
        status[act[at_spad & ~in_metal]] = np.where(
            r[at_spad & ~in_metal] < 0.5 * stack.spad_diameter, HIT, MISSED
        )
        go = ~in_metal & ~at_spad
        act, nxt, r, L = act[go], nxt[go], r[go], L[go]
        if act.size == 0:
            continue
        n_new = np.where(nxt < 0, 1.0, index[np.clip(nxt, 0, nl)])
        face = (nxt >= 0) & (r >= radius[np.clip(nxt, 0, nl)])
        if np.any(face):
            fa = act[face]
            if stack.metal_reflectivity > 0 and rng is not None:
                bounce = rng.random(fa.size) < stack.metal_reflectivity
                d[fa[bounce], 2] *= -1
                status[fa[~bounce]] = ABSORBED
            else:
                status[fa] = ABSORBED
        act, nxt, n_new = act[~face], nxt[~face], n_new[~face]
        if act.size == 0:
            continue
        n1 = n_cur[act]
        cos_i = np.abs(d[act, 2])
        eta = n1 / n_new
        sin2_t = eta * eta * (1.0 - cos_i * cos_i)
        tir = sin2_t > 1.0
        refl = np.zeros(act.size, dtype=bool)
        if stack.fresnel and rng is not None:
            u = rng.random(act.size)
            change = n1 != n_new
            if np.any(change):
                rv = np.zeros(act.size)
                for a, b in set(zip(n1[change].tolist(), n_new[change].tolist())):
                    sel = (n1 == a) & (n_new == b)
                    rv[sel] = fresnel_reflectance(cos_i[sel], a, b)
                refl = (u < rv) & ~tir
        bounced = tir | refl
        if tracked:
            d[act[bounced], 2] *= -1
        else:
            status[act[tir]] = TIR
            status[act[refl]] = REFLECTED
        cross = act[~bounced]
        e = eta[~bounced][:, None]
        cos_t = np.sqrt(np.clip(1.0 - sin2_t[~bounced], 0.0, 1.0))
        d[cross, :2] *= e
        d[cross, 2] = np.sign(d[cross, 2]) * cos_t
        slab[cross] = nxt[~bounced]
        n_cur[cross] = n_new[~bounced]
    else:
        status[status == ALIVE] = BOUNCES
    return status


def trace_ray(origin, direction, stack: GeometryStack, rng=None) -> RayResult:
    """Follow one ray through the stack, recording every plane it meets.

    Without an ``rng`` Fresnel reflection is not sampled (pure refraction).
    """
    d = np.asarray(direction, dtype=float).reshape(1, 3).copy()
    if abs(float(np.linalg.norm(d)) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    p = np.asarray(origin, dtype=float).reshape(1, 3).copy()
    path = [p[0].copy()]
    code = int(_propagate(p, d, stack, rng, path)[0])
    return RayResult(code == HIT, path, STATUS_NAMES[code])


def trace_rays(origins, directions, stack: GeometryStack, rng=None) -> np.ndarray:
    """Batch version of :func:`trace_ray`; returns the per-ray status codes."""
    d = np.array(directions, dtype=float, copy=True)
    if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-9):
        raise ValueError("directions must be unit vectors")
    p = np.array(np.broadcast_to(np.asarray(origins, dtype=float), d.shape), copy=True)
    return _propagate(p, d, stack, rng)


def cone_fraction(half_angle: float) -> float:
    """Fraction of 4 pi inside a cone of the given half-angle."""
    return 0.5 * (1.0 - math.cos(half_angle))


def sample_cone(n: int, half_angle: float, rng) -> np.ndarray:
    """Directions uniform on the downward spherical cap of ``half_angle``."""
    cos_max = math.cos(half_angle)
    cos_t = 1.0 - rng.random(n) * (1.0 - cos_max)
    sin_t = np.sqrt(np.clip(1.0 - cos_t * cos_t, 0.0, 1.0))
    phi = 2.0 * math.pi * rng.random(n)
    return np.column_stack((sin_t * np.cos(phi), sin_t * np.sin(phi), -cos_t))


def _entrance(stack: GeometryStack):
    """(radius, height below the ion) of the first aperture, or the SPAD disk if none."""
    for z_top, _, layer in stack.boundaries():
        if layer.aperture is not None:
            return 0.5 * layer.aperture, stack.ion_z - z_top
    return 0.5 * stack.spad_diameter, stack.ion_z


def importance_half_angle(offset: float, stack: GeometryStack, margin: float = 0.10) -> float:
    """Half-angle of a downward cone that contains every ray able to reach the SPAD.

    Bounded by the top face of the first aperture (or the SPAD disk when the
    stack has none), widened by ``margin`` and capped at 90 degrees.
    """
    r, h = _entrance(stack)
    return min(0.5 * math.pi, (1.0 + margin) * math.atan2(abs(offset) + r, h))


@dataclass(frozen=True)
class SamplingRegion:
    """Directions with polar angle in [theta_lo, theta_hi] and azimuth within phi_half of phi0."""

    theta_lo: float
    theta_hi: float
    phi0: float = 0.0
    phi_half: float = math.pi

    @property
    def weight(self) -> float:
        """Solid angle of the region as a fraction of 4 pi."""
        return (math.cos(self.theta_lo) - math.cos(self.theta_hi)) * self.phi_half / (2 * math.pi)

    def sample(self, n: int, rng) -> np.ndarray:
        c_hi, c_lo = math.cos(self.theta_lo), math.cos(self.theta_hi)
        cos_t = c_hi - rng.random(n) * (c_hi - c_lo)
        sin_t = np.sqrt(np.clip(1.0 - cos_t * cos_t, 0.0, 1.0))
        phi = self.phi0 + self.phi_half * (2.0 * rng.random(n) - 1.0)
        return np.column_stack((sin_t * np.cos(phi), sin_t * np.sin(phi), -cos_t))


def importance_region(offset: float, stack: GeometryStack, margin: float = 0.10) -> SamplingRegion:
    """Direction region that bounds the first aperture as seen from the ion.

    Within one aperture radius of the axis this is the full cone of
    :func:`importance_half_angle`.  Further out it is the polar band and
    azimuth wedge subtended by the aperture disk, each widened by ``margin``.
    """
    r, h = _entrance(stack)
    d = abs(offset)
    if d <= r:
        return SamplingRegion(0.0, importance_half_angle(offset, stack, margin))
    lo = math.atan2(d - r, h) / (1.0 + margin)
    hi = min(0.5 * math.pi, (1.0 + margin) * math.atan2(d + r, h))
    half = min(math.pi, (1.0 + margin) * math.asin(r / d))
    phi0 = math.pi if offset > 0 else 0.0
    return SamplingRegion(lo, hi, phi0, half)


def collection_efficiency(offset: float, stack: GeometryStack, n_rays: int, rng, batch: int = 500_000):
    """Fraction of the full 4 pi emission reaching the SPAD, with its standard error.

    Rays are drawn uniformly inside :func:`importance_region`; every ray that
    can reach the SPAD lies inside it, so the hit fraction times the region's
    solid-angle weight is unbiased.
    """
    if n_rays < 10_000:
        raise ValueError("n_rays must be at least 1e4")
    region = importance_region(offset, stack)
    origin = np.array([offset, 0.0, stack.ion_z])
    hits = 0
    done = 0
    while done < n_rays:
        m = min(batch, n_rays - done)
        hits += int(np.count_nonzero(trace_rays(origin, region.sample(m, rng), stack, rng) == HIT))
        done += m
    p = hits / n_rays
    w = region.weight
    return w * p, w * math.sqrt(p * (1.0 - p) / n_rays)


@dataclass(frozen=True)
class CrosstalkCurve:
    offsets: np.ndarray
    fractions: np.ndarray
    stderr: np.ndarray
    predicted_rate: np.ndarray
    reference_fraction: float

    @property
    def normalized(self) -> np.ndarray:
        return self.fractions / self.reference_fraction

    def to_csv(self) -> str:
        lines = ["offset_um,fraction,stderr,normalized,predicted_kcps"]
        rows = zip(self.offsets, self.fractions, self.stderr, self.normalized, self.predicted_rate)
        for d, f, s, nf, r in rows:
            lines.append(f"{round(float(d) * 1e6, 9)!r},{float(f)!r},{float(s)!r},{float(nf)!r},{float(r) / 1e3!r}")
        return "\n".join(lines) + "\n"


def crosstalk_curve(
    offsets: Sequence[float],
    stack: GeometryStack,
    n_rays: int,
    rng,
    bright_ion_scatter_rate: Optional[float] = None,
    pde: Optional[float] = None,
    anchor_rate: float = 60e3,
) -> CrosstalkCurve:
    """Collection efficiency versus lateral ion offset and the implied count rate.

    With a scatter rate and PDE the rate is ``scatter * pde * efficiency``;
    otherwise it is anchored so that zero offset gives ``anchor_rate``.
    """
    offsets = np.asarray(offsets, dtype=float)
    if np.any(offsets < 0) or np.any(np.diff(offsets) < 0):
        raise ValueError("offsets must be non-negative and ascending")
    fr, se = [], []
    for d in offsets:
        f, s = collection_efficiency(float(d), stack, n_rays, rng)
        fr.append(f)
        se.append(s)
    fr, se = np.array(fr), np.array(se)
    if offsets.size and offsets[0] == 0.0:
        ref = fr[0]
    else:
        ref = collection_efficiency(0.0, stack, n_rays, rng)[0]
    if bright_ion_scatter_rate is not None and pde is not None:
        rate = bright_ion_scatter_rate * pde * fr
    else:
        rate = anchor_rate * fr / ref
    return CrosstalkCurve(offsets, fr, se, rate, ref)


def disk_solid_angle_fraction(radius: float, distance: float, offset: float = 0.0) -> float:
    """Fraction of 4 pi subtended by a disk, by direct quadrature over its area."""
    if offset == 0.0:
        return 0.5 * (1.0 - distance / math.hypot(distance, radius))

    def integrand(phi, rho):
        return distance * rho / (distance**2 + rho**2 + offset**2 - 2 * rho * offset * math.cos(phi)) ** 1.5

    omega, _ = dblquad(integrand, 0.0, radius, 0.0, 2 * math.pi, epsabs=1e-13, epsrel=1e-10)
    return omega / (4 * math.pi)
