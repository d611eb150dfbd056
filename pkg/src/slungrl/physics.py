"""Rigid-body dynamics for N hexrotors carrying one cable-suspended payload.

The state is kept in small dataclasses for the public API and flattened to a
single float vector for integration. Per body the flat layout is
``[position(3), velocity(3), euler(3), body_rates(3)]``: the UAV blocks come
first, the payload block (if any) last.

UAV attitude is not torque-driven. Body rates either stay fixed over a step or
relax toward commanded rates with a first-order lag, and the Euler angles
integrate those rates.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from numba import njit

log = logging.getLogger(__name__)

UAV_BLOCK = 12
N_ROTORS = 6
GIMBAL_LIMIT = math.radians(80.0)


class PhysicsFault(RuntimeError):
    """Non-finite values produced by the dynamics (a simulator bug)."""


@dataclass
class PhysicsParams:
    g: float = 9.81
    k_b: float = 1e-5
    drag_coeff: float = 1.0
    ref_area: float = 0.1
    rho0: float = 1.225
    # piecewise-constant bands: (lower edge z, value); last band extends to +inf
    density_profile: tuple = ()
    wind_profile: tuple = ()
    dt: float = 0.01
    rate_time_constant: float = 0.1

    def __post_init__(self):
        if not self.g >= 0:
            raise ValueError("g must be >= 0")
        if not self.k_b > 0:
            raise ValueError("k_b must be > 0")
        if not 0 < self.dt <= 0.05:
            raise ValueError("dt must lie in (0, 0.05]")
        if not self.rate_time_constant > 0:
            raise ValueError("rate_time_constant must be > 0")
        self.density_profile = tuple((float(z), float(r)) for z, r in self.density_profile)
        self.wind_profile = tuple((float(z), tuple(float(c) for c in w)) for z, w in self.wind_profile)
        for _, w in self.wind_profile:
            if len(w) != 3:
                raise ValueError("wind band values must have 3 components")
        for prof in (self.density_profile, self.wind_profile):
            edges = [z for z, _ in prof]
            if edges != sorted(edges):
                raise ValueError("profile bands must be sorted by lower edge")

    def density_table(self):
        if not self.density_profile:
            return np.array([0.0]), np.array([self.rho0])
        return (np.array([z for z, _ in self.density_profile]),
                np.array([r for _, r in self.density_profile]))

    def wind_table(self):
        if not self.wind_profile:
            return np.array([0.0]), np.zeros((1, 3))
        return (np.array([z for z, _ in self.wind_profile]),
                np.array([w for _, w in self.wind_profile], dtype=float))

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["density_profile"] = [list(b) for b in self.density_profile]
        out["wind_profile"] = [[z, list(w)] for z, w in self.wind_profile]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PhysicsParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown physics keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class PayloadGeometry:
    """Shape tag plus dimensions.

    Cylinder: (length d, diameter w), axis along body x.
    Box: (lx, ly, lz).
    Bucket: (radius, height), upright solid cylinder.
    """

    shape: str
    dims: tuple

    def __post_init__(self):
        expected = {"Cylinder": 2, "Box": 3, "Bucket": 2}
        if self.shape not in expected:
            raise ValueError(f"unknown payload shape {self.shape!r}")
        self.dims = tuple(float(d) for d in self.dims)
        if len(self.dims) != expected[self.shape] or min(self.dims) <= 0:
            raise ValueError(f"bad dims {self.dims} for {self.shape}")

    @property
    def half_height(self) -> float:
        if self.shape == "Box":
            return self.dims[2] / 2
        if self.shape == "Bucket":
            return self.dims[1] / 2
        return self.dims[1] / 2

    def corners(self) -> np.ndarray:
        """Bounding-box corners in the body frame, shape (8, 3)."""
        if self.shape == "Box":
            hx, hy, hz = (d / 2 for d in self.dims)
        elif self.shape == "Bucket":
            hx = hy = self.dims[0]
            hz = self.dims[1] / 2
        else:
            hx = self.dims[0] / 2
            hy = hz = self.dims[1] / 2
        sx, sy, sz = np.meshgrid([-1.0, 1.0], [-1.0, 1.0], [-1.0, 1.0], indexing="ij")
        return np.stack([sx.ravel() * hx, sy.ravel() * hy, sz.ravel() * hz], axis=1)


def solid_inertia(geometry: PayloadGeometry, mass: float) -> np.ndarray:
    """Principal inertia of a uniform-density solid of the given shape."""
    if geometry.shape == "Box":
        lx, ly, lz = geometry.dims
        return mass / 12.0 * np.array([ly**2 + lz**2, lx**2 + lz**2, lx**2 + ly**2])
    if geometry.shape == "Bucket":
        r, h = geometry.dims
        side = mass * (3 * r**2 + h**2) / 12.0
        return np.array([side, side, mass * r**2 / 2.0])
    d, w = geometry.dims
    r = w / 2
    side = mass * (3 * r**2 + d**2) / 12.0
    return np.array([mass * r**2 / 2.0, side, side])


@dataclass
class CableSpec:
    rest_length: float = 1.0
    stiffness: float = 500.0
    damping: float = 5.0
    payload_attach: np.ndarray = field(default_factory=lambda: np.zeros(3))
    uav_attach: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.payload_attach = np.asarray(self.payload_attach, dtype=float)
        self.uav_attach = np.asarray(self.uav_attach, dtype=float)
        if self.rest_length <= 0 or self.stiffness <= 0 or self.damping < 0:
            raise ValueError("cable needs L > 0, k_c > 0, c_c >= 0")


@dataclass
class UavState:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attitude: np.ndarray = field(default_factory=lambda: np.zeros(3))
    body_rates: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotor_speeds: np.ndarray = field(default_factory=lambda: np.zeros(N_ROTORS))
    mass: float = 2.0
    kb_scale: float = 1.0

    def __post_init__(self):
        for name in ("position", "velocity", "attitude", "body_rates", "rotor_speeds"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        if self.mass <= 0:
            raise ValueError("UAV mass must be > 0")
        if np.any(self.rotor_speeds < 0):
            raise ValueError("rotor speeds must be >= 0")


@dataclass
class PayloadState:
    position: np.ndarray
    mass: float
    inertia_diag: np.ndarray
    geometry: PayloadGeometry
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("position", "velocity", "orientation", "angular_velocity", "inertia_diag"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        if self.mass <= 0 or np.any(self.inertia_diag <= 0):
            raise ValueError("payload mass and inertia must be > 0")

    @property
    def tilt(self) -> float:
        return float(self.orientation[0])


@dataclass
class SystemState:
    uavs: list
    payload: PayloadState | None = None
    t: float = 0.0
    faulted: bool = False

    @property
    def n(self) -> int:
        return len(self.uavs)

    @property
    def total_mass(self) -> float:
        m = sum(u.mass for u in self.uavs)
        return m + (self.payload.mass if self.payload is not None else 0.0)

    def to_vector(self) -> np.ndarray:
        blocks = [np.concatenate([u.position, u.velocity, u.attitude, u.body_rates]) for u in self.uavs]
        if self.payload is not None:
            p = self.payload
            blocks.append(np.concatenate([p.position, p.velocity, p.orientation, p.angular_velocity]))
        return np.concatenate(blocks)

    def with_vector(self, y: np.ndarray, t: float | None = None, faulted: bool = False) -> "SystemState":
        uavs = []
        for i, u in enumerate(self.uavs):
            b = y[UAV_BLOCK * i:UAV_BLOCK * (i + 1)]
            uavs.append(replace(u, position=b[0:3].copy(), velocity=b[3:6].copy(),
                                attitude=b[6:9].copy(), body_rates=b[9:12].copy()))
        payload = None
        if self.payload is not None:
            b = y[UAV_BLOCK * len(uavs):]
            payload = replace(self.payload, position=b[0:3].copy(), velocity=b[3:6].copy(),
                              orientation=b[6:9].copy(), angular_velocity=b[9:12].copy())
        return SystemState(uavs, payload, self.t if t is None else t, faulted)

    def copy(self) -> "SystemState":
        return self.with_vector(self.to_vector(), faulted=self.faulted)


@dataclass
class StateDerivative:
    uav_velocity: np.ndarray
    uav_acceleration: np.ndarray
    uav_euler_rates: np.ndarray
    uav_rate_derivative: np.ndarray
    payload_velocity: np.ndarray | None = None
    payload_acceleration: np.ndarray | None = None
    payload_euler_rates: np.ndarray | None = None
    payload_angular_acceleration: np.ndarray | None = None
    cable_tensions: np.ndarray | None = None

    def max_acceleration(self) -> float:
        acc = [np.abs(self.uav_acceleration).max()]
        if self.payload_acceleration is not None:
            acc.append(np.abs(self.payload_acceleration).max())
            acc.append(np.abs(self.payload_angular_acceleration).max())
        return float(max(acc))


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _thrust_dir(phi, theta, psi):
    sf, cf = math.sin(phi), math.cos(phi)
    st, ct = math.sin(theta), math.cos(theta)
    sp, cp = math.sin(psi), math.cos(psi)
    return (sf * sp + cf * cp * st, cf * st * sp - cp * sf, ct * cf)


@njit(cache=True)
def _rotation(phi, theta, psi):
    sf, cf = math.sin(phi), math.cos(phi)
    st, ct = math.sin(theta), math.cos(theta)
    sp, cp = math.sin(psi), math.cos(psi)
    r = np.empty((3, 3))
    r[0, 0] = cp * ct
    r[0, 1] = cp * st * sf - sp * cf
    r[0, 2] = cp * st * cf + sp * sf
    r[1, 0] = sp * ct
    r[1, 1] = sp * st * sf + cp * cf
    r[1, 2] = sp * st * cf - cp * sf
    r[2, 0] = -st
    r[2, 1] = ct * sf
    r[2, 2] = ct * cf
    return r


@njit(cache=True)
def _euler_rates(phi, theta, p, q, r, out, k):
    sf, cf = math.sin(phi), math.cos(phi)
    ct = math.cos(theta)
    tt = math.tan(theta)
    out[k] = p + q * sf * tt + r * cf * tt
    out[k + 1] = q * cf - r * sf
    out[k + 2] = (q * sf + r * cf) / ct


@njit(cache=True)
def _band(z, edges):
    k = 0
    for j in range(edges.shape[0]):
        if z >= edges[j]:
            k = j
    return k


@njit(cache=True)
def _drag(vx, vy, vz, z, cd, area, dens_z, dens_v, wind_z, wind_v):
    rho = dens_v[_band(z, dens_z)]
    kw = _band(z, wind_z)
    rx = vx - wind_v[kw, 0]
    ry = vy - wind_v[kw, 1]
    rz = vz - wind_v[kw, 2]
    s = math.sqrt(rx * rx + ry * ry + rz * rz)
    c = -0.5 * rho * cd * area * s
    return c * rx, c * ry, c * rz


@njit(cache=True)
def _tension(dist, length, stiffness, damping, rate):
    stretch = dist - length
    if stretch <= 0.0:
        return 0.0
    t = stiffness * stretch + damping * rate
    return t if t > 0.0 else 0.0


@njit(cache=True)
def _derivative(y, n, has_payload, mass, thrust, rate_cmd, use_cmd, tau,
                cab_len, cab_k, cab_c, pay_att, uav_att, mp, inertia,
                g, cd, area, dens_z, dens_v, wind_z, wind_v, out, tensions):
    for i in range(n):
        b = UAV_BLOCK * i
        phi, theta, psi = y[b + 6], y[b + 7], y[b + 8]
        dx, dy, dz = _thrust_dir(phi, theta, psi)
        fx, fy, fz = _drag(y[b + 3], y[b + 4], y[b + 5], y[b + 2], cd, area,
                           dens_z, dens_v, wind_z, wind_v)
        m = mass[i]
        out[b] = y[b + 3]
        out[b + 1] = y[b + 4]
        out[b + 2] = y[b + 5]
        out[b + 3] = (thrust[i] * dx + fx) / m
        out[b + 4] = (thrust[i] * dy + fy) / m
        out[b + 5] = (thrust[i] * dz + fz) / m - g
        _euler_rates(phi, theta, y[b + 9], y[b + 10], y[b + 11], out, b + 6)
        for j in range(3):
            if use_cmd:
                out[b + 9 + j] = (rate_cmd[i, j] - y[b + 9 + j]) / tau
            else:
                out[b + 9 + j] = 0.0
    if not has_payload:
        return
    pb = UAV_BLOCK * n
    rp = _rotation(y[pb + 6], y[pb + 7], y[pb + 8])
    wx, wy, wz = y[pb + 9], y[pb + 10], y[pb + 11]
    fx, fy, fz = _drag(y[pb + 3], y[pb + 4], y[pb + 5], y[pb + 2], cd, area,
                       dens_z, dens_v, wind_z, wind_v)
    fz -= mp * g
    tx = 0.0
    ty = 0.0
    tz = 0.0
    for i in range(n):
        b = UAV_BLOCK * i
        # payload attach point, world position and velocity
        ax, ay, az = pay_att[i, 0], pay_att[i, 1], pay_att[i, 2]
        cx = wy * az - wz * ay
        cy = wz * ax - wx * az
        cz = wx * ay - wy * ax
        px = y[pb] + rp[0, 0] * ax + rp[0, 1] * ay + rp[0, 2] * az
        py = y[pb + 1] + rp[1, 0] * ax + rp[1, 1] * ay + rp[1, 2] * az
        pz = y[pb + 2] + rp[2, 0] * ax + rp[2, 1] * ay + rp[2, 2] * az
        pvx = y[pb + 3] + rp[0, 0] * cx + rp[0, 1] * cy + rp[0, 2] * cz
        pvy = y[pb + 4] + rp[1, 0] * cx + rp[1, 1] * cy + rp[1, 2] * cz
        pvz = y[pb + 5] + rp[2, 0] * cx + rp[2, 1] * cy + rp[2, 2] * cz
        # UAV attach point
        ux, uy, uz = uav_att[i, 0], uav_att[i, 1], uav_att[i, 2]
        ru = _rotation(y[b + 6], y[b + 7], y[b + 8])
        p, q, r = y[b + 9], y[b + 10], y[b + 11]
        ex = q * uz - r * uy
        ey = r * ux - p * uz
        ez = p * uy - q * ux
        qx = y[b] + ru[0, 0] * ux + ru[0, 1] * uy + ru[0, 2] * uz
        qy = y[b + 1] + ru[1, 0] * ux + ru[1, 1] * uy + ru[1, 2] * uz
        qz = y[b + 2] + ru[2, 0] * ux + ru[2, 1] * uy + ru[2, 2] * uz
        qvx = y[b + 3] + ru[0, 0] * ex + ru[0, 1] * ey + ru[0, 2] * ez
        qvy = y[b + 4] + ru[1, 0] * ex + ru[1, 1] * ey + ru[1, 2] * ez
        qvz = y[b + 5] + ru[2, 0] * ex + ru[2, 1] * ey + ru[2, 2] * ez
        lx, ly, lz = qx - px, qy - py, qz - pz
        dist = math.sqrt(lx * lx + ly * ly + lz * lz)
        t = 0.0
        if dist > 1e-12:
            lx /= dist
            ly /= dist
            lz /= dist
            rate = lx * (qvx - pvx) + ly * (qvy - pvy) + lz * (qvz - pvz)
            t = _tension(dist, cab_len[i], cab_k[i], cab_c[i], rate)
        tensions[i] = t
        # UAV is pulled toward the payload, payload toward the UAV
        out[b + 3] -= t * lx / mass[i]
        out[b + 4] -= t * ly / mass[i]
        out[b + 5] -= t * lz / mass[i]
        gx, gy, gz = t * lx, t * ly, t * lz
        fx += gx
        fy += gy
        fz += gz
        # torque in the payload body frame: attach x (R^T F)
        bx = rp[0, 0] * gx + rp[1, 0] * gy + rp[2, 0] * gz
        by = rp[0, 1] * gx + rp[1, 1] * gy + rp[2, 1] * gz
        bz = rp[0, 2] * gx + rp[1, 2] * gy + rp[2, 2] * gz
        tx += ay * bz - az * by
        ty += az * bx - ax * bz
        tz += ax * by - ay * bx
    out[pb] = y[pb + 3]
    out[pb + 1] = y[pb + 4]
    out[pb + 2] = y[pb + 5]
    out[pb + 3] = fx / mp
    out[pb + 4] = fy / mp
    out[pb + 5] = fz / mp
    _euler_rates(y[pb + 6], y[pb + 7], wx, wy, wz, out, pb + 6)
    ix, iy, iz = inertia[0], inertia[1], inertia[2]
    out[pb + 9] = (tx - (wy * iz * wz - wz * iy * wy)) / ix
    out[pb + 10] = (ty - (wz * ix * wx - wx * iz * wz)) / iy
    out[pb + 11] = (tz - (wx * iy * wy - wy * ix * wx)) / iz


@njit(cache=True)
def _wrap(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@njit(cache=True)
def _integrate(y, n, has_payload, mass, thrust, rate_cmd, use_cmd, tau,
               cab_len, cab_k, cab_c, pay_att, uav_att, mp, inertia,
               g, cd, area, dens_z, dens_v, wind_z, wind_v, dt, substeps, tensions):
    """Classical RK4 for ``substeps`` steps of ``dt``; returns the new vector."""
    m = y.shape[0]
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    tmp = np.empty(m)
    cur = y.copy()
    for _ in range(substeps):
        _derivative(cur, n, has_payload, mass, thrust, rate_cmd, use_cmd, tau, cab_len, cab_k, cab_c,
                    pay_att, uav_att, mp, inertia, g, cd, area, dens_z, dens_v, wind_z, wind_v, k1, tensions)
        for j in range(m):
            tmp[j] = cur[j] + 0.5 * dt * k1[j]
        _derivative(tmp, n, has_payload, mass, thrust, rate_cmd, use_cmd, tau, cab_len, cab_k, cab_c,
                    pay_att, uav_att, mp, inertia, g, cd, area, dens_z, dens_v, wind_z, wind_v, k2, tensions)
        for j in range(m):
            tmp[j] = cur[j] + 0.5 * dt * k2[j]
        _derivative(tmp, n, has_payload, mass, thrust, rate_cmd, use_cmd, tau, cab_len, cab_k, cab_c,
                    pay_att, uav_att, mp, inertia, g, cd, area, dens_z, dens_v, wind_z, wind_v, k3, tensions)
        for j in range(m):
            tmp[j] = cur[j] + dt * k3[j]
        _derivative(tmp, n, has_payload, mass, thrust, rate_cmd, use_cmd, tau, cab_len, cab_k, cab_c,
                    pay_att, uav_att, mp, inertia, g, cd, area, dens_z, dens_v, wind_z, wind_v, k4, tensions)
        for j in range(m):
            cur[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        for i in range(n):
            cur[UAV_BLOCK * i + 8] = _wrap(cur[UAV_BLOCK * i + 8])
        if has_payload:
            cur[UAV_BLOCK * n + 8] = _wrap(cur[UAV_BLOCK * n + 8])
    # tensions at the final state, for diagnostics
    _derivative(cur, n, has_payload, mass, thrust, rate_cmd, use_cmd, tau, cab_len, cab_k, cab_c,
                pay_att, uav_att, mp, inertia, g, cd, area, dens_z, dens_v, wind_z, wind_v, k1, tensions)
    return cur


# ---------------------------------------------------------------------------
# public operations


def thrust_magnitude(rotor_speeds, k_b: float) -> float:
    w = np.asarray(rotor_speeds, dtype=float)
    if np.any(w < 0):
        raise ValueError("rotor speeds must be non-negative")
    return float(k_b * np.sum(w * w))


def thrust_world_vector(attitude, thrust: float) -> np.ndarray:
    phi, theta, psi = (float(a) for a in attitude)
    return thrust * np.array(_thrust_dir(phi, theta, psi))


def air_density(z: float, params: PhysicsParams) -> float:
    edges, vals = params.density_table()
    return float(vals[_band(float(z), edges)])


def wind_at(z: float, params: PhysicsParams) -> np.ndarray:
    edges, vals = params.wind_table()
    return vals[_band(float(z), edges)].copy()


def drag_force(velocity, z: float, params: PhysicsParams) -> np.ndarray:
    v = np.asarray(velocity, dtype=float)
    dz, dv = params.density_table()
    wz, wv = params.wind_table()
    return np.array(_drag(v[0], v[1], v[2], float(z), params.drag_coeff, params.ref_area, dz, dv, wz, wv))


def cable_force(uav_attach_world, payload_attach_world, separation_rate: float, cable: CableSpec) -> np.ndarray:
    """Force the cable exerts on the UAV; the payload receives the negation.

    ``separation_rate`` is d|uav - payload|/dt (positive when the endpoints
    move apart).
    """
    delta = np.asarray(uav_attach_world, dtype=float) - np.asarray(payload_attach_world, dtype=float)
    dist = float(np.linalg.norm(delta))
    if dist <= cable.rest_length:
        return np.zeros(3)
    if dist < 1e-12:
        log.warning("coincident cable endpoints with positive stretch; returning zero force")
        return np.zeros(3)
    t = _tension(dist, cable.rest_length, cable.stiffness, cable.damping, float(separation_rate))
    return -t * delta / dist


def _rotor_thrusts(state: SystemState, rotor_speeds_all, params: PhysicsParams) -> np.ndarray:
    w = np.asarray(rotor_speeds_all, dtype=float).reshape(state.n, N_ROTORS)
    if np.any(w < 0):
        raise ValueError("rotor speeds must be non-negative")
    scales = np.array([u.kb_scale for u in state.uavs])
    return params.k_b * scales * np.sum(w * w, axis=1)


@dataclass
class Rig:
    """Packed constants of one system, in the form the kernels consume."""

    n: int
    has_payload: bool
    mass: np.ndarray
    kb: np.ndarray
    cab_len: np.ndarray
    cab_k: np.ndarray
    cab_c: np.ndarray
    pay_att: np.ndarray
    uav_att: np.ndarray
    mp: float
    inertia: np.ndarray
    params: PhysicsParams

    @classmethod
    def build(cls, state: SystemState, cables, params: PhysicsParams) -> "Rig":
        n = state.n
        cables = list(cables)
        has_payload = state.payload is not None
        if has_payload and len(cables) != n:
            raise ValueError("one cable per UAV is required when a payload is present")
        if not has_payload:
            cables = [CableSpec() for _ in range(n)]
        p = state.payload
        rig = cls(
            n=n,
            has_payload=has_payload,
            mass=np.array([u.mass for u in state.uavs], dtype=float),
            kb=params.k_b * np.array([u.kb_scale for u in state.uavs], dtype=float),
            cab_len=np.array([c.rest_length for c in cables], dtype=float),
            cab_k=np.array([c.stiffness for c in cables], dtype=float),
            cab_c=np.array([c.damping for c in cables], dtype=float),
            pay_att=np.array([c.payload_attach for c in cables], dtype=float).reshape(n, 3),
            uav_att=np.array([c.uav_attach for c in cables], dtype=float).reshape(n, 3),
            mp=float(p.mass) if has_payload else 1.0,
            inertia=np.array(p.inertia_diag, dtype=float) if has_payload else np.ones(3),
            params=params,
        )
        rig._tables = params.density_table() + params.wind_table()
        return rig

    def _args(self):
        pr = self.params
        dz, dv, wz, wv = self._tables
        return (self.cab_len, self.cab_k, self.cab_c, self.pay_att, self.uav_att, self.mp, self.inertia,
                pr.g, pr.drag_coeff, pr.ref_area, dz, dv, wz, wv)

    def derivative(self, y, thrust, rate_cmd=None):
        out = np.empty_like(y)
        tensions = np.zeros(self.n)
        use_cmd = rate_cmd is not None
        cmd = np.zeros((self.n, 3)) if rate_cmd is None else np.asarray(rate_cmd, dtype=float).reshape(self.n, 3)
        _derivative(y, self.n, self.has_payload, self.mass, np.asarray(thrust, dtype=float), cmd, use_cmd,
                    self.params.rate_time_constant, *self._args(), out, tensions)
        return out, tensions

    def integrate(self, y, thrust, dt, substeps=1, rate_cmd=None):
        """RK4 over ``substeps`` steps; returns (new vector, final tensions)."""
        tensions = np.zeros(self.n)
        use_cmd = rate_cmd is not None
        cmd = np.zeros((self.n, 3)) if rate_cmd is None else np.asarray(rate_cmd, dtype=float).reshape(self.n, 3)
        y_new = _integrate(y, self.n, self.has_payload, self.mass, np.asarray(thrust, dtype=float), cmd, use_cmd,
                           self.params.rate_time_constant, *self._args(), float(dt), int(substeps), tensions)
        return y_new, tensions

    def thrust_from_rotors(self, rotor_speeds_all) -> np.ndarray:
        w = np.asarray(rotor_speeds_all, dtype=float).reshape(self.n, N_ROTORS)
        return self.kb * np.sum(w * w, axis=1)


def vector_is_valid(y: np.ndarray, n: int, has_payload: bool) -> bool:
    if not np.all(np.isfinite(y)):
        return False
    att = y[:UAV_BLOCK * n].reshape(n, UAV_BLOCK)[:, 6:9]
    if np.any(np.abs(att[:, 0]) >= math.pi) or np.any(np.abs(att[:, 1]) >= math.pi / 2):
        return False
    if has_payload and abs(y[UAV_BLOCK * n + 7]) > GIMBAL_LIMIT:
        return False
    return True


def system_derivative(state: SystemState, rotor_speeds_all, params: PhysicsParams, cables=(),
                      rate_commands=None) -> StateDerivative:
    rig = Rig.build(state, cables, params)
    thrust = _rotor_thrusts(state, rotor_speeds_all, params)
    d, tensions = rig.derivative(state.to_vector(), thrust, rate_commands)
    if not np.all(np.isfinite(d)):
        raise PhysicsFault(f"non-finite derivative at t={state.t}: {d}")
    n = state.n
    u = d[:UAV_BLOCK * n].reshape(n, UAV_BLOCK)
    out = StateDerivative(u[:, 0:3].copy(), u[:, 3:6].copy(), u[:, 6:9].copy(), u[:, 9:12].copy())
    if state.payload is not None:
        p = d[UAV_BLOCK * n:]
        out.payload_velocity = p[0:3].copy()
        out.payload_acceleration = p[3:6].copy()
        out.payload_euler_rates = p[6:9].copy()
        out.payload_angular_acceleration = p[9:12].copy()
        out.cable_tensions = tensions
    return out


def step_rk4(state: SystemState, rotor_speeds_all, params: PhysicsParams, dt: float, cables=(),
             rate_commands=None) -> SystemState:
    """One classical RK4 step. An invalid result comes back with ``faulted=True``."""
    if not 0 < dt <= 0.05:
        raise ValueError(f"dt must lie in (0, 0.05], got {dt}")
    rig = Rig.build(state, cables, params)
    thrust = _rotor_thrusts(state, rotor_speeds_all, params)
    y, _ = rig.integrate(state.to_vector(), thrust, dt, 1, rate_commands)
    ok = vector_is_valid(y, state.n, state.payload is not None)
    new = state.with_vector(y, t=state.t + dt, faulted=state.faulted or not ok)
    w = np.asarray(rotor_speeds_all, dtype=float).reshape(state.n, N_ROTORS)
    for uav, speeds in zip(new.uavs, w):
        uav.rotor_speeds = speeds.copy()
    return new


def cable_tensions(state: SystemState, params: PhysicsParams, cables) -> np.ndarray:
    if state.payload is None:
        return np.zeros(state.n)
    rig = Rig.build(state, cables, params)
    _, tensions = rig.derivative(state.to_vector(), np.zeros(state.n))
    return tensions


def linear_momentum(state: SystemState) -> np.ndarray:
    p = sum(u.mass * u.velocity for u in state.uavs)
    if state.payload is not None:
        p = p + state.payload.mass * state.payload.velocity
    return np.asarray(p, dtype=float)


def attitude_for_direction(direction, yaw: float = 0.0) -> np.ndarray:
    """Roll and pitch that point the thrust axis along ``direction`` at the given yaw."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    c, s = math.cos(yaw), math.sin(yaw)
    # rotate into the yaw frame: d' = (cos(phi) sin(theta), -sin(phi), cos(phi) cos(theta))
    dx = c * d[0] + s * d[1]
    dy = -s * d[0] + c * d[1]
    phi = -math.asin(max(-1.0, min(1.0, dy)))
    theta = math.atan2(dx, d[2])
    return np.array([phi, theta, yaw])


def hover_rotor_speeds(thrust: float, k_b: float) -> np.ndarray:
    return np.full(N_ROTORS, math.sqrt(max(thrust, 0.0) / (N_ROTORS * k_b)))


def hover_equilibrium(payload: PayloadState, cables, uav_masses, params: PhysicsParams,
                      kb_scales=None, splay: float = 0.45, yaw: float = 0.0):
    """Static hover of N UAVs holding ``payload`` level at its current position.

    Every cable carries an equal share of the payload weight and leans outward
    by ``splay`` radians (vertical for attach points on the body z axis), so a
    symmetric attach pattern leaves zero net force and torque on the payload.
    Returns ``(state, rotor_speeds)`` with rotor speeds shaped (N, 6).
    """
    cables = list(cables)
    n = len(cables)
    masses = np.broadcast_to(np.asarray(uav_masses, dtype=float), (n,))
    scales = np.ones(n) if kb_scales is None else np.asarray(kb_scales, dtype=float)
    share = payload.mass * params.g / n
    center = np.asarray(payload.position, dtype=float)
    uavs, speeds = [], []
    for cable, m, kb_scale in zip(cables, masses, scales):
        attach = np.asarray(cable.payload_attach, dtype=float)
        radial = np.array([attach[0], attach[1], 0.0])
        rn = np.linalg.norm(radial)
        if rn > 1e-9:
            axis = math.sin(splay) * radial / rn + np.array([0.0, 0.0, math.cos(splay)])
        else:
            axis = np.array([0.0, 0.0, 1.0])
        tension = share / axis[2]
        length = cable.rest_length + tension / cable.stiffness
        top = center + attach + length * axis
        thrust_vec = m * params.g * np.array([0.0, 0.0, 1.0]) + tension * axis
        att = attitude_for_direction(thrust_vec, yaw)
        # with a UAV-side attach offset the position depends on attitude
        pos = top - _rotation(att[0], att[1], att[2]) @ cable.uav_attach
        w = hover_rotor_speeds(float(np.linalg.norm(thrust_vec)), params.k_b * kb_scale)
        uavs.append(UavState(position=pos, attitude=att, rotor_speeds=w, mass=float(m), kb_scale=float(kb_scale)))
        speeds.append(w)
    level = replace(payload, velocity=np.zeros(3), orientation=np.zeros(3), angular_velocity=np.zeros(3))
    return SystemState(uavs, level, 0.0), np.array(speeds)
