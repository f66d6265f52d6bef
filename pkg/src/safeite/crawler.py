"""Reduced-order planar crawling robot.

A rigid trunk moves in the sagittal (x, z) plane with three degrees of
freedom (forward position, height, pitch). Four massless two-link limbs are
attached to the trunk: two arms at the front end and two legs at the rear
end. Limb joints follow their open-loop targets exactly; the trunk is driven
by spring-damper ground contacts at the four limb tips and at the two bottom
corners of the trunk.

Joint numbering::

    0 arm1 shoulder   1 arm1 elbow
    2 arm2 shoulder   3 arm2 elbow
    4 leg1 hip        5 leg1 knee
    6 leg2 hip        7 leg2 knee

Joint angles use the anatomical zero: a shoulder or hip at 0 holds the limb
along the trunk, pointing backwards, and an elbow or knee at 0 is straight.
Positive angles swing the link tip forward and down, so the crawling posture
(limb pointing at the ground) has its proximal joints at pi/2. Controller
offsets are drawn around that posture.
"""
from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from numba import njit

N_JOINTS = 8
N_LIMBS = 4
GENOTYPE_SIZE = 3 * N_JOINTS

JOINT_NAMES = (
    "arm1_shoulder", "arm1_elbow", "arm2_shoulder", "arm2_elbow",
    "leg1_hip", "leg1_knee", "leg2_hip", "leg2_knee",
)

# Anatomical angle of each joint when its link points straight down.
CRAWL_POSTURE = np.array([math.pi / 2, 0.0] * N_LIMBS)

# Bumped whenever a change to the dynamics alters simulation results.
SIM_VERSION = "planar-crawler-2"


@dataclass(frozen=True)
class RobotModel:
    """Physical constants of the crawler (SI units)."""

    body_mass: float = 20.0
    body_length: float = 0.6
    body_thickness: float = 0.4
    arm_links: tuple[float, float] = (0.12, 0.09)
    leg_links: tuple[float, float] = (0.13, 0.10)
    ground_stiffness: float = 2.0e4
    ground_damping: float = 300.0
    friction: float = 0.8
    forward_friction: float = 0.2
    body_friction: float = 1.0
    friction_velocity: float = 0.02
    gravity: float = 9.81

    def __post_init__(self):
        scalars = [self.body_mass, self.body_length, self.body_thickness,
                   self.ground_stiffness, self.gravity, *self.arm_links, *self.leg_links]
        if any(not v > 0 for v in scalars):
            raise ValueError("masses, lengths, stiffness and gravity must be positive")
        if min(self.ground_damping, self.friction, self.forward_friction, self.body_friction) < 0:
            raise ValueError("damping and friction must be non-negative")
        if not self.friction_velocity > 0:
            raise ValueError("friction_velocity must be positive")

    @property
    def body_inertia(self) -> float:
        return self.body_mass * (self.body_length ** 2 + self.body_thickness ** 2) / 12.0

    @property
    def weight(self) -> float:
        return self.body_mass * self.gravity


@dataclass(frozen=True)
class ControllerRanges:
    """Affine decoding ranges from genotype genes to joint trajectories."""

    amplitude_max: float = 0.6
    offset_min: float = -1.0
    offset_max: float = 1.0
    frequency: float = 1.0
    evolve_frequency: bool = False
    frequency_min: float = 0.5
    frequency_max: float = 2.0

    @property
    def genotype_size(self) -> int:
        return GENOTYPE_SIZE + int(self.evolve_frequency)


@dataclass(frozen=True)
class ControllerParams:
    amplitude: np.ndarray
    phase: np.ndarray
    offset: np.ndarray
    frequency: float = 1.0

    def target(self, t: float) -> np.ndarray:
        return self.offset + self.amplitude * np.sin(2 * np.pi * self.frequency * t + self.phase)


@dataclass(frozen=True)
class DamageSpec:
    """Set of joints frozen at fixed angles."""

    locks: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        ids = [j for j, _ in self.locks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate joint ids in damage locks: {ids}")
        for j, angle in self.locks:
            if not 0 <= j < N_JOINTS:
                raise ValueError(f"invalid joint id {j}")
            if not math.isfinite(angle):
                raise ValueError(f"lock angle for joint {j} must be finite")
        object.__setattr__(self, "locks", tuple(sorted((int(j), float(a)) for j, a in self.locks)))

    def union(self, other: DamageSpec) -> DamageSpec:
        merged = dict(self.locks)
        for j, angle in other.locks:
            if j in merged and merged[j] != angle:
                raise ValueError(f"conflicting locks on joint {j}")
            merged[j] = angle
        return DamageSpec(tuple(merged.items()))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        mask = np.zeros(N_JOINTS, dtype=np.bool_)
        angle = np.zeros(N_JOINTS)
        for j, a in self.locks:
            mask[j] = True
            angle[j] = a
        return mask, angle


NO_DAMAGE = DamageSpec()
D1 = DamageSpec(((0, 0.0),))
D2 = DamageSpec(((4, 0.0),))
D3 = DamageSpec(((0, 0.0), (1, math.pi / 4)))
D4 = D2.union(D3)
DAMAGES = {"none": NO_DAMAGE, "d1": D1, "d2": D2, "d3": D3, "d4": D4}


@dataclass(frozen=True)
class SimResult:
    speed: float
    duty: np.ndarray
    force_sum: float
    failed: bool = False
    peak_force: float = 0.0
    body_force: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, SimResult):
            return NotImplemented
        return (
            _same_float(self.speed, other.speed)
            and np.array_equal(self.duty, other.duty)
            and _same_float(self.force_sum, other.force_sum)
            and self.failed == other.failed
            and _same_float(self.peak_force, other.peak_force)
            and _same_float(self.body_force, other.body_force)
        )

    __hash__ = None


def _same_float(a, b):
    return a == b or (math.isnan(a) and math.isnan(b))


@dataclass(frozen=True)
class SimConfig:
    """Everything needed to turn a genotype into a measurement."""

    model: RobotModel = field(default_factory=RobotModel)
    ranges: ControllerRanges = field(default_factory=ControllerRanges)
    episode: float = 5.0
    dt: float = 1e-3
    settle_time: float = 1.0
    force_metric: str = "mean"

    def __post_init__(self):
        if self.force_metric not in ("mean", "peak"):
            raise ValueError(f"force_metric must be 'mean' or 'peak', got {self.force_metric!r}")
        if not (self.dt > 0 and self.episode > self.settle_time >= 0):
            raise ValueError("need dt > 0 and episode > settle_time >= 0")


def decode(genotype, ranges: ControllerRanges | None = None) -> ControllerParams:
    """Map genes in [0, 1] affinely onto amplitude, phase and offset ranges.

    Genes are laid out as 8 amplitudes, then 8 phases, then 8 offsets; an
    optional 25th gene sets the gait frequency. Offsets are relative to the
    crawling posture.
    """
    ranges = ranges or ControllerRanges()
    g = np.asarray(genotype, dtype=float)
    if g.shape != (ranges.genotype_size,):
        raise ValueError(f"genotype must have shape ({ranges.genotype_size},), got {g.shape}")
    if np.any(g < 0) or np.any(g > 1) or not np.all(np.isfinite(g)):
        raise ValueError("genotype components must lie in [0, 1]")
    amplitude = g[0:8] * ranges.amplitude_max
    phase = g[8:16] * 2 * np.pi
    offset = CRAWL_POSTURE + ranges.offset_min + g[16:24] * (ranges.offset_max - ranges.offset_min)
    frequency = ranges.frequency
    if ranges.evolve_frequency:
        frequency = ranges.frequency_min + g[24] * (ranges.frequency_max - ranges.frequency_min)
    return ControllerParams(amplitude, phase, offset, float(frequency))


def _model_vector(model: RobotModel) -> np.ndarray:
    return np.array([
        model.body_mass, model.body_inertia, model.body_length, model.body_thickness,
        model.arm_links[0], model.arm_links[1], model.leg_links[0], model.leg_links[1],
        model.ground_stiffness, model.ground_damping, model.friction, model.body_friction,
        model.friction_velocity, model.gravity, model.forward_friction,
    ])


@njit(cache=True)
def _joint_tables(amp, phase, offset, omega, lock_mask, lock_angle, dt, n_table):
    """Joint angles, rates and the limb trig terms over ``n_table`` steps."""
    th = np.empty((n_table, N_JOINTS))
    thd = np.empty((n_table, N_JOINTS))
    rot_s = math.sin(omega * dt)
    rot_c = math.cos(omega * dt)
    for j in range(N_JOINTS):
        # oscillator phasor rotated by omega*dt per step
        s = math.sin(phase[j])
        co = math.cos(phase[j])
        for i in range(n_table):
            if lock_mask[j]:
                th[i, j] = lock_angle[j]
                thd[i, j] = 0.0
            else:
                th[i, j] = offset[j] + amp[j] * s
                thd[i, j] = amp[j] * omega * co
            s, co = s * rot_c + co * rot_s, co * rot_c - s * rot_s
    # per limb: sin/cos of the proximal angle and of the summed angle
    trig = np.empty((n_table, N_LIMBS, 4))
    for i in range(n_table):
        for m in range(N_LIMBS):
            q1 = th[i, 2 * m]
            q12 = q1 + th[i, 2 * m + 1]
            trig[i, m, 0] = math.sin(q1)
            trig[i, m, 1] = math.cos(q1)
            trig[i, m, 2] = math.sin(q12)
            trig[i, m, 3] = math.cos(q12)
    return th, thd, trig


@njit(cache=True)
def _integrate(p, amp, phase, offset, freq, lock_mask, lock_angle, episode, dt, settle, record):
    mass, inertia, length, thick = p[0], p[1], p[2], p[3]
    k, c, mu, mu_body, v_eps, grav, mu_fwd = p[8], p[9], p[10], p[11], p[12], p[13], p[14]
    n_steps = int(round(episode / dt))
    settle_step = int(round(settle / dt))
    omega = 2.0 * math.pi * freq

    l1 = np.empty(N_LIMBS)
    l2 = np.empty(N_LIMBS)
    ax = np.empty(N_LIMBS)
    for m in range(N_LIMBS):
        if m < 2:
            l1[m], l2[m], ax[m] = p[4], p[5], 0.5 * length
        else:
            l1[m], l2[m], ax[m] = p[6], p[7], -0.5 * length

    # Targets repeat every gait period; tabulate one period when it spans a
    # whole number of steps, otherwise the full episode.
    period = 1.0 / (freq * dt)
    n_table = int(round(period))
    if n_table < 1 or abs(period - n_table) > 1e-9 * period or n_table > n_steps:
        n_table = n_steps
    th, thd, trig = _joint_tables(amp, phase, offset, omega, lock_mask, lock_angle, dt, n_table)

    # Start at rest with the lowest contact point touching the ground.
    lowest = 0.5 * thick
    for m in range(N_LIMBS):
        reach = l1[m] * trig[0, m, 1] + l2[m] * trig[0, m, 3]
        if reach > lowest:
            lowest = reach
    x, z, psi = 0.0, lowest, 0.0
    vx, vz, w = 0.0, 0.0, 0.0

    duty = np.zeros(N_LIMBS)
    force_acc = 0.0
    body_acc = 0.0
    peak = 0.0
    x_settle = 0.0
    failed = False
    n_rec = n_steps if record else 0
    traj = np.zeros((n_rec, 20))
    fn = np.zeros(N_LIMBS)
    contact = np.zeros(N_LIMBS)

    for step in range(n_steps):
        if step == settle_step:
            x_settle = x
        i = step % n_table
        cp = math.cos(psi)
        sp = math.sin(psi)
        fx_tot = 0.0
        fz_tot = -mass * grav
        tau = 0.0
        limb_force = 0.0

        for m in range(N_LIMBS):
            sq1, cq1, sq12, cq12 = trig[i, m, 0], trig[i, m, 1], trig[i, m, 2], trig[i, m, 3]
            sb1 = sp * cq1 + cp * sq1
            cb1 = cp * cq1 - sp * sq1
            sb2 = sp * cq12 + cp * sq12
            cb2 = cp * cq12 - sp * sq12
            # tip position relative to the trunk centre
            rx = ax[m] * cp + l1[m] * sb1 + l2[m] * sb2
            rz = ax[m] * sp - l1[m] * cb1 - l2[m] * cb2
            pz = z + rz
            fn[m] = 0.0
            contact[m] = 0.0
            if pz <= 0.0:
                d1 = w + thd[i, 2 * m]
                d2 = d1 + thd[i, 2 * m + 1]
                px_dot = vx - w * ax[m] * sp + l1[m] * d1 * cb1 + l2[m] * d2 * cb2
                pz_dot = vz + w * ax[m] * cp + l1[m] * d1 * sb1 + l2[m] * d2 * sb2
                f_n = -k * pz - c * pz_dot
                if f_n < 0.0:
                    f_n = 0.0
                # tips grip harder when sliding backwards (claw-like)
                mu_tip = mu if px_dot < 0.0 else mu_fwd
                f_t = -mu_tip * f_n * px_dot / math.sqrt(px_dot * px_dot + v_eps * v_eps)
                fx_tot += f_t
                fz_tot += f_n
                tau += rx * f_n - rz * f_t
                fn[m] = f_n
                contact[m] = 1.0
                duty[m] += 1.0
                limb_force += f_n

        for e in range(2):
            bx = (0.5 - e) * length
            bz = -0.5 * thick
            rx = bx * cp - bz * sp
            rz = bx * sp + bz * cp
            pz = z + rz
            if pz < 0.0:
                px_dot = vx - w * rz
                pz_dot = vz + w * rx
                f_n = -k * pz - c * pz_dot
                if f_n < 0.0:
                    f_n = 0.0
                f_t = -mu_body * f_n * px_dot / math.sqrt(px_dot * px_dot + v_eps * v_eps)
                fx_tot += f_t
                fz_tot += f_n
                tau += rx * f_n - rz * f_t
                body_acc += f_n

        force_acc += limb_force
        if limb_force > peak:
            peak = limb_force

        if record:
            traj[step, 0] = step * dt
            traj[step, 1] = x
            traj[step, 2] = z
            traj[step, 3] = psi
            for j in range(N_JOINTS):
                traj[step, 4 + j] = th[i, j]
            for m in range(N_LIMBS):
                traj[step, 12 + m] = contact[m]
                traj[step, 16 + m] = fn[m]

        # semi-implicit Euler
        vx += dt * fx_tot / mass
        vz += dt * fz_tot / mass
        w += dt * tau / inertia
        x += dt * vx
        z += dt * vz
        psi += dt * w

        if not (math.isfinite(x) and math.isfinite(z) and math.isfinite(psi)
                and math.isfinite(vx) and math.isfinite(vz) and math.isfinite(w)):
            failed = True
            break
        if abs(psi) > 0.5 * math.pi:
            failed = True
            break

    speed = (x - x_settle) / (episode - settle)
    for m in range(N_LIMBS):
        duty[m] /= n_steps
    force_mean = force_acc * dt / episode
    body_mean = body_acc * dt / episode
    return speed, duty, force_mean, peak, body_mean, failed, traj


def simulate(
    model: RobotModel,
    ctrl: ControllerParams,
    damage: DamageSpec = NO_DAMAGE,
    episode: float = 5.0,
    dt: float = 1e-3,
    settle_time: float = 1.0,
    dump_trajectory: str | Path | None = None,
) -> SimResult:
    """Run one episode and measure speed, limb duty factors and contact forces.

    ``force_sum`` is the time-averaged sum of normal force magnitudes over the
    four limb tips; ``peak_force`` is the largest instantaneous value of that
    sum and ``body_force`` the time-averaged trunk contact force. Speed is the
    forward displacement after ``settle_time`` divided by the remaining time.
    """
    mask, angle = damage.arrays()
    # the integrator measures angles from the downward vertical
    speed, duty, force, peak, body, failed, traj = _integrate(
        _model_vector(model),
        np.asarray(ctrl.amplitude, dtype=float),
        np.asarray(ctrl.phase, dtype=float),
        np.asarray(ctrl.offset, dtype=float) - CRAWL_POSTURE,
        float(ctrl.frequency),
        mask, angle - CRAWL_POSTURE, float(episode), float(dt), float(settle_time),
        dump_trajectory is not None,
    )
    if dump_trajectory is not None:
        traj[:, 4:12] += CRAWL_POSTURE
        write_trajectory(dump_trajectory, traj)
    if failed or not math.isfinite(speed):
        return SimResult(float("nan"), duty, float(force), True, float(peak), float(body))
    return SimResult(float(speed), duty, float(force), False, float(peak), float(body))


def write_trajectory(path, traj: np.ndarray) -> None:
    header = (["t", "x", "z", "pitch"] + [f"theta_{j + 1}" for j in range(N_JOINTS)]
              + [f"contact_{m + 1}" for m in range(N_LIMBS)] + [f"fn_{m + 1}" for m in range(N_LIMBS)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in traj:
            cells = [repr(float(v)) for v in row]
            for m in range(N_LIMBS):
                cells[12 + m] = str(int(row[12 + m]))
            writer.writerow(cells)


class Crawler:
    """A crawler instance, possibly damaged, that runs genotypes.

    Calling the instance on a genotype returns
    ``(performance, descriptor, safety_values)`` as expected by
    :func:`safeite.archive.run_map_elites`. The descriptor's safety
    dimension is normalised by ``force_norm_max``, which must be set first.
    """

    def __init__(self, config: SimConfig | None = None, damage: DamageSpec = NO_DAMAGE,
                 force_norm_max: float | None = None):
        self.config = config or SimConfig()
        self.damage = damage
        self.force_norm_max = force_norm_max

    def run(self, genotype, dump_trajectory=None) -> SimResult:
        cfg = self.config
        ctrl = decode(genotype, cfg.ranges)
        return simulate(cfg.model, ctrl, self.damage, cfg.episode, cfg.dt, cfg.settle_time,
                        dump_trajectory=dump_trajectory)

    def safety_value(self, result: SimResult) -> float:
        return result.peak_force if self.config.force_metric == "peak" else result.force_sum

    def describe(self, result: SimResult):
        """``(performance, descriptor, safety_values)`` of a finished run."""
        if self.force_norm_max is None:
            raise RuntimeError("force_norm_max must be set before computing descriptors")
        if result.failed:
            raise SimulationFailed("simulation diverged or the trunk flipped")
        force = self.safety_value(result)
        descriptor = np.append(result.duty, min(max(force / self.force_norm_max, 0.0), 1.0))
        return result.speed, descriptor, np.array([force])

    def __call__(self, genotype):
        return self.describe(self.run(genotype))


class SimulationFailed(RuntimeError):
    pass


def measure_with_damage(elite, damage: DamageSpec, config: SimConfig | None = None) -> SimResult:
    """Replay an archived elite's controller on a robot with ``damage`` applied."""
    return Crawler(config, damage).run(elite.genotype)


_MODEL_KEYS = {f.name for f in fields(RobotModel)}
_RANGE_KEYS = {f.name for f in fields(ControllerRanges)}
_SIM_KEYS = {"episode", "dt", "settle_time", "force_metric"}


def load_sim_config(path) -> SimConfig:
    """Read a ``[robot]``/``[controller]``/``[simulation]`` INI-style file.

    Unknown keys are rejected. Link lengths are given as two comma-separated
    numbers, e.g. ``arm_links = 0.2, 0.16``.
    """
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    return sim_config_from_sections(parser)


def sim_config_from_sections(parser: configparser.ConfigParser) -> SimConfig:
    model_kw, range_kw, sim_kw = {}, {}, {}
    for section, keys, target in (("robot", _MODEL_KEYS, model_kw),
                                  ("controller", _RANGE_KEYS, range_kw),
                                  ("simulation", _SIM_KEYS, sim_kw)):
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            if key not in keys:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            target[key] = _parse_value(key, raw)
    return SimConfig(model=RobotModel(**model_kw), ranges=ControllerRanges(**range_kw), **sim_kw)


def _parse_value(key, raw):
    raw = raw.strip()
    if key in ("arm_links", "leg_links"):
        parts = tuple(float(v) for v in raw.split(","))
        if len(parts) != 2:
            raise ValueError(f"{key} needs two values")
        return parts
    if key == "force_metric":
        return raw
    if key == "evolve_frequency":
        return raw.lower() in ("1", "true", "yes", "on")
    return float(raw)


def with_dt(config: SimConfig, dt: float) -> SimConfig:
    return replace(config, dt=dt)
