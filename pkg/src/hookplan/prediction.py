"""Payload motion forecast.

Stands in for a contact-level physics twin: a kinematic bicycle with a
single trailer follows the reference path under pure-pursuit steering and
proportional speed control; the payload rides on the trailer bed at a fixed
offset, with its height given by the terrain surface underneath.  The
planner only consumes the resulting position / velocity / yaw sequences, so
fidelity beyond that interface is intentionally out of scope (re-planning
absorbs the residual mismatch).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ReferencePath:
    """Planar polyline with arc-length parameterization and a target speed."""

    waypoints: np.ndarray           # (n, 2) [m]
    speed: float                    # target speed [m/s]
    closed: bool = False

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 2:
            raise ValueError("waypoints must be an (n, 2) array")
        if self.waypoints.shape[0] < 2:
            raise ValueError("need at least two waypoints")
        seg = np.diff(self.waypoints, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0.0):
            raise ValueError("consecutive waypoints must be distinct")
        if self.speed < 0.0:
            raise ValueError("speed must be non-negative")
        if self.closed and np.linalg.norm(self.waypoints[0] - self.waypoints[-1]) > 1e-9:
            # close the loop explicitly so arc length wraps cleanly
            self.waypoints = np.vstack([self.waypoints, self.waypoints[0]])
            seg = np.diff(self.waypoints, axis=0)
            seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.arclength = np.concatenate([[0.0], np.cumsum(seg_len)])

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    def point_at(self, s: float) -> np.ndarray:
        """Point at arc length s (wraps if closed, clamps otherwise)."""
        if self.closed:
            s = s % self.length
        else:
            s = min(max(s, 0.0), self.length)
        i = np.searchsorted(self.arclength, s, side="right") - 1
        i = min(max(i, 0), len(self.arclength) - 2)
        w = (s - self.arclength[i]) / (self.arclength[i + 1] - self.arclength[i])
        return (1 - w) * self.waypoints[i] + w * self.waypoints[i + 1]

    def project(self, xy: np.ndarray) -> float:
        """Arc length of the closest point on the polyline to xy."""
        p = np.asarray(xy, dtype=float)
        a = self.waypoints[:-1]
        d = np.diff(self.waypoints, axis=0)
        seg_len2 = np.einsum("ij,ij->i", d, d)
        t = np.clip(np.einsum("ij,ij->i", p - a, d) / seg_len2, 0.0, 1.0)
        proj = a + t[:, None] * d
        dist2 = np.einsum("ij,ij->i", proj - p, proj - p)
        i = int(np.argmin(dist2))
        return float(self.arclength[i] + t[i] * np.sqrt(seg_len2[i]))


def paperclip_path(straight: float = 4.0, radius: float = 1.0, speed: float = 0.6,
                   n_arc: int = 40) -> ReferencePath:
    """Stadium-shaped closed loop: two straights joined by semicircles."""
    h = straight / 2.0
    pts = [(-h, -radius), (h, -radius)]
    for ang in np.linspace(-np.pi / 2, np.pi / 2, n_arc, endpoint=False)[1:]:
        pts.append((h + radius * np.cos(ang), radius * np.sin(ang)))
    pts.append((h, radius))
    pts.append((-h, radius))
    for ang in np.linspace(np.pi / 2, 3 * np.pi / 2, n_arc, endpoint=False)[1:]:
        pts.append((-h + radius * np.cos(ang), radius * np.sin(ang)))
    return ReferencePath(np.array(pts), speed=speed, closed=True)


@dataclass
class TerrainModel:
    """Piecewise-planar surface over a uniform height grid.

    Each grid cell is split into two triangles along the (+x, +y) diagonal and
    the height is interpolated linearly inside each triangle, which keeps the
    surface continuous across all edges.
    """

    heights: np.ndarray             # (ny, nx) node heights [m]
    spacing: float                  # grid spacing [m]
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.heights.ndim != 2 or min(self.heights.shape) < 2:
            raise ValueError("heights must be a 2-D grid with >= 2 nodes per axis")
        if self.spacing <= 0.0:
            raise ValueError("spacing must be positive")

    @classmethod
    def flat(cls) -> "TerrainModel":
        return cls(heights=np.zeros((2, 2)), spacing=100.0, origin=np.array([-50.0, -50.0]))

    @classmethod
    def random(cls, extent: float, spacing: float = 0.25, height_range=(0.0, 0.12),
               seed: int = 0, origin=None) -> "TerrainModel":
        n = int(np.ceil(extent / spacing)) + 1
        rng = np.random.default_rng(seed)
        h = rng.uniform(height_range[0], height_range[1], size=(n, n))
        if origin is None:
            origin = np.array([-extent / 2.0, -extent / 2.0])
        return cls(heights=h, spacing=spacing, origin=np.asarray(origin, dtype=float))

    def height_and_gradient(self, x: float, y: float):
        """Surface height and its planar gradient at (x, y).

        Queries outside the grid clamp to the boundary cell.
        """
        ny, nx = self.heights.shape
        fx = (x - self.origin[0]) / self.spacing
        fy = (y - self.origin[1]) / self.spacing
        ix = int(np.clip(np.floor(fx), 0, nx - 2))
        iy = int(np.clip(np.floor(fy), 0, ny - 2))
        u = np.clip(fx - ix, 0.0, 1.0)
        v = np.clip(fy - iy, 0.0, 1.0)
        z00 = self.heights[iy, ix]
        z10 = self.heights[iy, ix + 1]
        z01 = self.heights[iy + 1, ix]
        z11 = self.heights[iy + 1, ix + 1]
        # diagonal from (0,0) to (1,1): lower triangle u >= v
        if u >= v:
            z = z00 + u * (z10 - z00) + v * (z11 - z10)
            gx, gy = (z10 - z00), (z11 - z10)
        else:
            z = z00 + u * (z11 - z01) + v * (z01 - z00)
            gx, gy = (z11 - z01), (z01 - z00)
        return float(z), np.array([gx, gy]) / self.spacing


def terrain_height(terrain: TerrainModel, x: float, y: float) -> float:
    """Surface height at (x, y); out-of-range queries clamp to the boundary."""
    z, _ = terrain.height_and_gradient(x, y)
    return z


@dataclass
class UGVState:
    """Planar tractor pose plus trailer hitch angle."""

    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    speed: float = 0.0
    hitch: float = 0.0      # heading - trailer heading [rad]

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed, self.hitch])

    @classmethod
    def from_array(cls, a) -> "UGVState":
        return cls(x=float(a[0]), y=float(a[1]), heading=float(a[2]),
                   speed=float(a[3]), hitch=float(a[4]))


@dataclass
class UGVConfig:
    """Geometry and controller gains of the tractor + trailer."""

    wheelbase: float = 0.32
    trailer_length: float = 0.45     # hitch (rear axle) to trailer axle [m]
    lookahead: float = 0.6           # pure-pursuit lookahead distance [m]
    speed_gain: float = 3.0          # proportional speed-tracking gain [1/s]
    max_steer: float = 0.45          # steering angle limit [rad]
    bed_height: float = 0.15         # trailer bed above terrain [m]
    # payload mount offset in the trailer frame (x forward, z up from bed)
    payload_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.payload_offset = np.asarray(self.payload_offset, dtype=float)


def ugv_step(state: UGVState, path: ReferencePath, config: UGVConfig, dt: float) -> UGVState:
    """One kinematic bicycle + single-trailer update under pure pursuit.

    The trailer hitch sits at the tractor rear axle, so the trailer heading
    obeys theta_t_dot = (v / L_t) sin(heading - theta_t).
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x, y, th, v, hitch = state.x, state.y, state.heading, state.speed, state.hitch

    s = path.project(np.array([x, y]))
    target = path.point_at(s + config.lookahead)
    bearing = np.arctan2(target[1] - y, target[0] - x)
    alpha = _wrap_angle(bearing - th)
    steer = np.arctan2(2.0 * config.wheelbase * np.sin(alpha), config.lookahead)
    steer = np.clip(steer, -config.max_steer, config.max_steer)

    dv = config.speed_gain * (path.speed - v)
    theta_t = th - hitch          # trailer heading before the update
    x += v * np.cos(th) * dt
    y += v * np.sin(th) * dt
    theta_t += v / config.trailer_length * np.sin(th - theta_t) * dt
    th += v / config.wheelbase * np.tan(steer) * dt
    v = max(v + dv * dt, 0.0)
    hitch = np.clip(_wrap_angle(th - theta_t), -np.pi / 2 + 1e-6, np.pi / 2 - 1e-6)
    return UGVState(x=x, y=y, heading=_wrap_angle(th), speed=v, hitch=hitch)


def _wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def payload_pose(state: UGVState, terrain: TerrainModel, config: UGVConfig):
    """Payload grasp-point position, velocity and yaw for one UGV state."""
    th = state.heading
    theta_t = th - state.hitch
    ct, st = np.cos(theta_t), np.sin(theta_t)
    axle = np.array([state.x - config.trailer_length * ct,
                     state.y - config.trailer_length * st])
    off = config.payload_offset
    pos_xy = axle + np.array([off[0] * ct - off[1] * st, off[0] * st + off[1] * ct])
    z_terrain, grad = terrain.height_and_gradient(pos_xy[0], pos_xy[1])
    z = z_terrain + config.bed_height + off[2]

    # analytic planar velocity: hitch point velocity plus trailer rotation
    v_hitch = state.speed * np.array([np.cos(th), np.sin(th)])
    dtheta_t = state.speed / config.trailer_length * np.sin(state.hitch)
    arm = pos_xy - np.array([state.x, state.y])
    v_xy = v_hitch + dtheta_t * np.array([-arm[1], arm[0]])
    v_z = grad @ v_xy
    return np.array([pos_xy[0], pos_xy[1], z]), np.array([v_xy[0], v_xy[1], v_z]), theta_t


@dataclass
class PayloadPrediction:
    """Forecast payload motion sampled at the planner step."""

    h: float
    r_p: np.ndarray        # (N+1, 3) grasp-point positions
    v_p: np.ndarray        # (N+1, 3) velocities
    psi_p: np.ndarray      # (N+1,) payload yaw
    psi_bar_p: np.ndarray  # (N+1,) velocity direction minus yaw, wrapped to (-pi, pi]

    def __post_init__(self):
        n = len(self.r_p)
        if not (len(self.v_p) == len(self.psi_p) == len(self.psi_bar_p) == n):
            raise ValueError("prediction sequences must have equal length")
        for a in (self.r_p, self.v_p, self.psi_p, self.psi_bar_p):
            if not np.all(np.isfinite(a)):
                raise ValueError("prediction contains non-finite values")

    def __len__(self):
        return len(self.r_p)


def predict_payload(ugv0: UGVState, path: ReferencePath, terrain: TerrainModel,
                    n_f: int, h: float, config: UGVConfig | None = None,
                    substeps: int = 10) -> PayloadPrediction:
    """Roll the UGV forward and sample the payload pose every h seconds.

    Integrates at h / substeps internally.  psi_bar_p is the horizontal
    velocity direction minus the payload yaw, wrapped to (-pi, pi], and
    defined as 0 when the payload is essentially at rest (|v| < 1e-3 m/s).
    """
    if n_f < 1:
        raise ValueError("n_f must be >= 1")
    if config is None:
        config = UGVConfig()
    dt = h / substeps
    state = ugv0
    r_p = np.empty((n_f + 1, 3))
    v_p = np.empty((n_f + 1, 3))
    psi_p = np.empty(n_f + 1)
    psi_bar = np.empty(n_f + 1)
    psi_unwrapped = None
    for k in range(n_f + 1):
        pos, vel, yaw = payload_pose(state, terrain, config)
        r_p[k] = pos
        v_p[k] = vel
        if psi_unwrapped is None:
            psi_unwrapped = yaw
        else:
            psi_unwrapped += _wrap_angle(yaw - psi_unwrapped)
        psi_p[k] = psi_unwrapped
        speed_xy = np.hypot(vel[0], vel[1])
        if speed_xy < 1e-3:
            psi_bar[k] = 0.0
        else:
            raw = np.arctan2(vel[1], vel[0]) - yaw
            w = _wrap_angle(raw)
            psi_bar[k] = np.pi if abs(w + np.pi) < 1e-12 else w
        if k < n_f:
            for _ in range(substeps):
                state = ugv_step(state, path, config, dt)
    return PayloadPrediction(h=h, r_p=r_p, v_p=v_p, psi_p=psi_p, psi_bar_p=psi_bar)


def perturb_initial(state: UGVState, sigma, seed: int) -> UGVState:
    """Add independent Gaussian noise per state field (deterministic in seed)."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (5,):
        raise ValueError("sigma must have 5 entries (x, y, heading, speed, hitch)")
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    noisy = state.as_array() + rng.standard_normal(5) * sigma
    noisy[3] = max(noisy[3], 0.0)
    return UGVState.from_array(noisy)
