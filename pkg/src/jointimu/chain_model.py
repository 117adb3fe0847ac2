# Copyright 2022 Softpoint Consultores SL. All Rights Reserved.
#
# Licensed under MIT License (the "License");
# you may not use this file except in compliance with the License.
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
# ==============================================================================

"""
Serial kinematic chains carrying link-mounted IMUs.

Links are numbered 0 … N−1, link 0 being the base. Joint k (k ≥ 1)
connects link k−1 (parent) to link k (child) and is an ordered sequence
of single-axis rotations. The generalized coordinate vector θ stacks the
base coordinates (a rotation vector, only when the base floats) followed
by the joint angles. For the base, θ̇ and θ̈ hold the body angular
velocity and acceleration rather than rotation-vector derivatives.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .so3_math import as_finite, axis_angle, rotation_exp, random_rotation

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class JointSpec:
    """
    Args:
        axes:
            dof×3 unit rotation axes, each expressed in the frame that
            follows the preceding rotations (child frame for the last)
        mount_rotation:
            orientation of the child frame in the parent frame at zero
            joint angles
        origin_m:
            child-frame origin (joint centre) in the parent frame
        name(str):
            label used in tables and logs
    """
    axes: np.ndarray
    mount_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    origin_m: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = ''

    def __post_init__(self):
        axes = np.atleast_2d(as_finite(self.axes, 'axes'))
        if axes.ndim != 2 or axes.shape[1] != 3 \
                or not 1 <= axes.shape[0] <= 3:
            raise ValueError(
                f'a joint needs 1 to 3 axes of length 3, got {axes.shape}'
            )
        norms = np.linalg.norm(axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError(f'joint axes must be unit vectors, norms {norms}')
        mount = as_finite(self.mount_rotation, 'mount_rotation')
        origin = as_finite(self.origin_m, 'origin_m').reshape(3)
        object.__setattr__(self, 'axes', axes)
        object.__setattr__(self, 'mount_rotation', mount.reshape(3, 3))
        object.__setattr__(self, 'origin_m', origin)

    @property
    def dof_count(self):
        return self.axes.shape[0]


@dataclass(frozen=True, eq=False)
class ImuMount:
    """IMU fixed on `link`; `slot` 1 marks the second IMU of a link."""
    link: int
    position_m: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    slot: int = 0

    def __post_init__(self):
        if self.slot not in (0, 1):
            raise ValueError(f'mount slot must be 0 or 1, got {self.slot}')
        object.__setattr__(
            self, 'position_m',
            as_finite(self.position_m, 'position_m').reshape(3)
        )
        object.__setattr__(
            self, 'orientation',
            as_finite(self.orientation, 'orientation').reshape(3, 3)
        )


@dataclass(frozen=True, eq=False)
class ChainModel:
    joints: tuple
    mounts: tuple = ()
    floating_base: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'joints', tuple(self.joints))
        object.__setattr__(self, 'mounts', tuple(self.mounts))
        seen = set()
        for mount in self.mounts:
            if not 0 <= mount.link < self.n_links:
                raise ValueError(
                    f'mount on link {mount.link} but the chain has '
                    f'{self.n_links} links'
                )
            key = (mount.link, mount.slot)
            if key in seen:
                raise ValueError(f'duplicate mount for link/slot {key}')
            seen.add(key)
        offsets = [0, self.base_dof]
        for joint in self.joints:
            offsets.append(offsets[-1] + joint.dof_count)
        object.__setattr__(self, '_offsets', tuple(offsets))

    @property
    def n_links(self):
        return len(self.joints) + 1

    @property
    def base_dof(self):
        return 3 if self.floating_base else 0

    @property
    def dof_count(self):
        return self._offsets[-1]

    @property
    def joint_dof_count(self):
        return self.dof_count - self.base_dof

    def dof_slice(self, link):
        """Slice of θ holding the coordinates of the joint into `link`."""
        return slice(self._offsets[link], self._offsets[link + 1])

    def joint(self, link):
        if not 1 <= link < self.n_links:
            raise IndexError(f'link {link} has no parent joint')
        return self.joints[link - 1]

    def mount(self, link, slot=0):
        for mount in self.mounts:
            if mount.link == link and mount.slot == slot:
                return mount
        raise KeyError(f'no IMU mounted on link {link}, slot {slot}')

    def has_mount(self, link, slot=0):
        return any(m.link == link and m.slot == slot for m in self.mounts)

    def primary_mounts(self):
        """One slot-0 mount per link, in link order."""
        return [self.mount(link, 0) for link in range(self.n_links)]

    def with_mounts(self, mounts):
        return replace(self, mounts=tuple(mounts))

    def nominal(self):
        """Same chain with every IMU assumed aligned to its link frame."""
        return self.with_mounts(
            replace(m, orientation=np.eye(3)) for m in self.mounts
        )


@dataclass(frozen=True, eq=False)
class JointState:
    theta: np.ndarray
    theta_dot: np.ndarray
    theta_ddot: np.ndarray

    def __post_init__(self):
        theta = as_finite(self.theta, 'theta').reshape(-1)
        theta_dot = as_finite(self.theta_dot, 'theta_dot').reshape(-1)
        theta_ddot = as_finite(self.theta_ddot, 'theta_ddot').reshape(-1)
        if not theta.size == theta_dot.size == theta_ddot.size:
            raise ValueError(
                'theta, theta_dot and theta_ddot must have equal length'
            )
        object.__setattr__(self, 'theta', theta)
        object.__setattr__(self, 'theta_dot', theta_dot)
        object.__setattr__(self, 'theta_ddot', theta_ddot)

    @classmethod
    def at_rest(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(theta, np.zeros_like(theta), np.zeros_like(theta))


@dataclass(frozen=True, eq=False)
class LinkKinematics:
    """
    Per-link motion; every vector is expressed in its own link frame
    except `position_world`.

    orientation_world: (N, 3, 3) link → world rotations
    position_world:    (N, 3) link origins in the world frame
    omega:             (N, 3) angular velocities
    alpha:             (N, 3) angular accelerations
    accel:             (N, 3) origin accelerations, gravity excluded
    """
    orientation_world: np.ndarray
    position_world: np.ndarray
    omega: np.ndarray
    alpha: np.ndarray
    accel: np.ndarray

    def mount_acceleration(self, mount):
        r = mount.position_m
        w = self.omega[mount.link]
        return self.accel[mount.link] \
            + np.cross(self.alpha[mount.link], r) \
            + np.cross(w, np.cross(w, r))

    def mount_position_world(self, mount):
        return self.position_world[mount.link] \
            + self.orientation_world[mount.link] @ mount.position_m


def _check_theta(model, theta):
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size != model.dof_count:
        raise ValueError(
            f'theta has {theta.size} entries, the chain has '
            f'{model.dof_count} DoF'
        )
    return theta


def propagate_joint(joint, q, qd, qdd, omega, alpha):
    """
    Carry angular velocity and acceleration from the parent frame into
    the child frame through one joint.

    Returns:
        (C, ω_child, α_child) with C the child → parent rotation.
    """
    rotation = joint.mount_rotation
    omega = rotation.T @ omega
    alpha = rotation.T @ alpha
    for axis, qi, qdi, qddi in zip(joint.axes, q, qd, qdd):
        step = axis_angle(axis, qi)
        rotation = rotation @ step
        omega = step.T @ omega
        alpha = step.T @ alpha + np.cross(omega, axis) * qdi + axis * qddi
        omega = omega + axis * qdi
    return rotation, omega, alpha


def joint_rotation(joint, q):
    """Child → parent rotation C = F·E₁·…·E_d."""
    rotation = joint.mount_rotation
    for axis, qi in zip(joint.axes, q):
        rotation = rotation @ axis_angle(axis, qi)
    return rotation


def relative_motion(joint, q, qd, qdd=None):
    """
    Relative angular velocity and acceleration of the child link with
    respect to its parent, both in the child frame.
    """
    qdd = np.zeros(joint.dof_count) if qdd is None else qdd
    _, omega, alpha = propagate_joint(
        joint, q, qd, qdd, np.zeros(3), np.zeros(3)
    )
    return omega, alpha


def motion_subspace(joint, q):
    """3×dof matrix S with ω_rel = S q̇ in the child frame."""
    columns = []
    tail = np.eye(3)
    for axis, qi in zip(joint.axes[::-1], q[::-1]):
        columns.append(tail.T @ axis)
        tail = axis_angle(axis, qi) @ tail
    return np.column_stack(columns[::-1])


def forward_kinematics(model, theta):
    """
    Returns:
        (orientations, positions): link → base rotations (N, 3, 3) and
        link origins in the base frame (N, 3).
    """
    theta = _check_theta(model, theta)
    orientations = np.empty((model.n_links, 3, 3))
    positions = np.zeros((model.n_links, 3))
    orientations[0] = np.eye(3)
    for link in range(1, model.n_links):
        joint = model.joint(link)
        positions[link] = positions[link - 1] \
            + orientations[link - 1] @ joint.origin_m
        orientations[link] = orientations[link - 1] \
            @ joint_rotation(joint, theta[model.dof_slice(link)])
    return orientations, positions


def relative_rotation(model, theta, i, j):
    """R_i^j, mapping vectors in link-i coordinates to link-j coordinates."""
    for link in (i, j):
        if not 0 <= link < model.n_links:
            raise IndexError(f'link {link} outside 0..{model.n_links - 1}')
    orientations, _ = forward_kinematics(model, theta)
    return orientations[j].T @ orientations[i]


def base_rotation(model, theta, world_rotation=None):
    """Base → world rotation."""
    world = np.eye(3) if world_rotation is None else world_rotation
    if not model.floating_base:
        return np.array(world, dtype=float)
    return world @ rotation_exp(theta[:3])


def _jacobian_columns(model, theta, orientations):
    """Base-frame angular Jacobian column blocks per link."""
    blocks = [np.eye(3)[:, :model.base_dof]]
    for link in range(1, model.n_links):
        joint = model.joint(link)
        q = theta[model.dof_slice(link)]
        blocks.append(orientations[link] @ motion_subspace(joint, q))
    return blocks


def angular_jacobian_base(model, theta, i):
    """J_i¹: link-i angular velocity in the base frame from q̇."""
    theta = _check_theta(model, theta)
    orientations, _ = forward_kinematics(model, theta)
    blocks = _jacobian_columns(model, theta, orientations)
    jac = np.zeros((3, model.dof_count))
    for link in range(i + 1):
        jac[:, model.dof_slice(link)] = blocks[link]
    return jac


def angular_jacobian_local(model, theta, i):
    """J_i^i = R_1^i J_i¹: link-i angular velocity in its own frame."""
    orientations, _ = forward_kinematics(model, theta)
    return orientations[i].T @ angular_jacobian_base(model, theta, i)


def stacked_jacobian(model, theta):
    """T_J (3N × DoF): local angular Jacobians of all links stacked."""
    theta = _check_theta(model, theta)
    orientations, _ = forward_kinematics(model, theta)
    blocks = _jacobian_columns(model, theta, orientations)
    jac = np.zeros((3 * model.n_links, model.dof_count))
    for i in range(model.n_links):
        rows = slice(3 * i, 3 * i + 3)
        for link in range(i + 1):
            jac[rows, model.dof_slice(link)] = orientations[i].T @ blocks[link]
    return jac


def unconstrained_system(model, theta):
    """
    Dense block lower-triangular T with T[k, j] = R_j^k (j ≤ k), relating
    per-link relative angular velocities to link angular velocities.
    """
    orientations, _ = forward_kinematics(model, theta)
    n = model.n_links
    system = np.zeros((3 * n, 3 * n))
    for k in range(n):
        for j in range(k + 1):
            system[3 * k:3 * k + 3, 3 * j:3 * j + 3] = \
                orientations[k].T @ orientations[j]
    return system


def link_kinematics(model, state, world_rotation=None):
    """
    Recursive outward propagation of link motion.

    The base origin is fixed in the world; a floating base only rotates.

    Args:
        model(ChainModel):
            chain description
        state(JointState):
            generalized positions, velocities and accelerations
        world_rotation:
            optional rotation applied to the whole scene

    Returns:
        LinkKinematics
    """
    theta = _check_theta(model, state.theta)
    n = model.n_links
    orientation = np.empty((n, 3, 3))
    position = np.zeros((n, 3))
    omega = np.zeros((n, 3))
    alpha = np.zeros((n, 3))
    accel = np.zeros((n, 3))
    orientation[0] = base_rotation(model, theta, world_rotation)
    if model.floating_base:
        omega[0] = state.theta_dot[:3]
        alpha[0] = state.theta_ddot[:3]
    for link in range(1, n):
        joint = model.joint(link)
        sl = model.dof_slice(link)
        p = joint.origin_m
        w = omega[link - 1]
        at_origin = accel[link - 1] + np.cross(alpha[link - 1], p) \
            + np.cross(w, np.cross(w, p))
        rotation, omega[link], alpha[link] = propagate_joint(
            joint, theta[sl], state.theta_dot[sl], state.theta_ddot[sl],
            w, alpha[link - 1],
        )
        accel[link] = rotation.T @ at_origin
        position[link] = position[link - 1] + orientation[link - 1] @ p
        orientation[link] = orientation[link - 1] @ rotation
    return LinkKinematics(orientation, position, omega, alpha, accel)


def example_leg(floating_base=True, second_shank_imu=True,
                second_imus=False):
    """
    Seven-joint leg: 3-DoF hip, 1-DoF knee, 3-DoF ankle below a pelvis
    base, one IMU per link plus an optional second IMU on the shank.
    second_imus puts a second IMU on the thigh and foot as well, which
    lets the accelerometer sweep reach every joint.
    """
    hip = JointSpec(
        axes=[[0, 0, 1], [1, 0, 0], [0, 1, 0]],
        origin_m=[0.0, 0.1, -0.08],
        name='hip',
    )
    knee = JointSpec(
        axes=[[0, 1, 0]],
        origin_m=[0.0, 0.0, -0.42],
        name='knee',
    )
    ankle = JointSpec(
        axes=[[0, 1, 0], [1, 0, 0], [0, 0, 1]],
        origin_m=[0.0, 0.0, -0.40],
        name='ankle',
    )
    mounts = [
        ImuMount(0, [0.05, 0.0, 0.02]),
        ImuMount(1, [0.04, 0.02, -0.2]),
        ImuMount(2, [0.05, 0.0, -0.12]),
        ImuMount(3, [0.08, 0.0, -0.05]),
    ]
    if second_shank_imu or second_imus:
        mounts.append(ImuMount(2, [-0.03, 0.04, -0.3], slot=1))
    if second_imus:
        mounts.append(ImuMount(1, [-0.03, -0.04, -0.12], slot=1))
        mounts.append(ImuMount(3, [0.02, 0.03, -0.06], slot=1))
    return ChainModel((hip, knee, ankle), tuple(mounts), floating_base)


def random_chain(rng, dof_counts, floating_base=True, second_imus=False,
                 misaligned=False):
    """
    Chain with random axes, joint offsets and IMU poses, for simulation
    studies.

    Args:
        rng(np.random.Generator):
            source of randomness
        dof_counts:
            DoF of each joint after the base
        floating_base(bool):
            whether the base orientation is free
        second_imus(bool):
            mount a second IMU on every non-base link
        misaligned(bool):
            draw random IMU orientations instead of identity

    Returns:
        ChainModel
    """
    joints = []
    for dof in dof_counts:
        axes = random_rotation(rng)[:, :dof].T
        joints.append(JointSpec(
            axes=axes,
            mount_rotation=random_rotation(rng),
            origin_m=rng.uniform(-0.3, 0.3, 3),
        ))
    mounts = []
    for link in range(len(dof_counts) + 1):
        slots = (0, 1) if second_imus and link > 0 else (0,)
        for slot in slots:
            mounts.append(ImuMount(
                link,
                rng.uniform(-0.2, 0.2, 3),
                random_rotation(rng) if misaligned else np.eye(3),
                slot,
            ))
    return ChainModel(tuple(joints), tuple(mounts), floating_base)
