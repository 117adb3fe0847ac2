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
Joint velocities from link gyroscopes and joint accelerations from pairs
of link accelerometers, evaluated one timestep at a time.

Gyro and accelerometer inputs are per-link arrays in sensor frames; they
are rotated into link frames with the mount orientations of the model,
or with the rotational corrections of a MountCalibration when given.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .chain_model import (
    forward_kinematics, joint_rotation, motion_subspace, relative_motion,
    stacked_jacobian,
)
from .errors import NearSingular
from .so3_math import (
    DEFAULT_CONDITION_LIMIT, SvdSolver, as_finite, lstsq_svd,
    pseudo_inverse, skew,
)

logger = logging.getLogger(__name__)

ACCEL_CONDITION_LIMIT = 1e6


@dataclass(frozen=True, eq=False)
class VelocitySolveReport:
    """
    theta_dot:            generalized velocities (base ω first when floating)
    relative_velocities:  (N, 3) base ω and joint relative angular
                          velocities, each in its child-link frame
    residual, condition:  constrained solve only
    """
    theta_dot: np.ndarray
    relative_velocities: np.ndarray
    method: str
    residual: float = None
    condition: float = None
    ill_conditioned: bool = False


@dataclass(frozen=True, eq=False)
class AccelSolveReport:
    """
    theta_ddot: relative angular acceleration of the joint, child frame
    usable:     False when the stacked system lost rank
    """
    link: int
    theta_ddot: np.ndarray
    condition: float
    usable: bool
    residual: float


def _correction(model, corrections, link, slot=0):
    if corrections is not None:
        return corrections.rotation(link, slot)
    return model.mount(link, slot).orientation


def link_frame_readings(model, readings, corrections=None, slot=0):
    """
    Rotate per-link sensor-frame vectors (N×3) into their link frames.
    """
    readings = as_finite(readings, 'readings').reshape(model.n_links, 3)
    return np.array([
        _correction(model, corrections, link, slot) @ readings[link]
        for link in range(model.n_links)
    ])


def gather(samples, kind='gyro', slot=0):
    """Per-link N×3 array of one timestep's ImuSample list."""
    chosen = sorted(
        (s for s in samples if s.slot == slot), key=lambda s: s.link
    )
    return np.array([getattr(s, kind) for s in chosen])


def joint_velocities_unconstrained(model, theta, gyros, corrections=None):
    """
    Forward substitution through the block lower-triangular system
    ω̄_k = Σ_{j≤k} R_j^k θ̇_j treating every joint as a free rotation.

    Args:
        model(ChainModel):
            chain description
        theta:
            joint positions (base rotation vector first when floating)
        gyros:
            N×3 slot-0 gyro readings, sensor frames
        corrections(MountCalibration):
            optional calibrated IMU orientations

    Returns:
        VelocitySolveReport; theta_dot projects each relative velocity
        onto its joint axes with the pseudo-inverse of the motion subspace.
    """
    theta = np.asarray(theta, dtype=float)
    omega = link_frame_readings(model, gyros, corrections)
    orientations, _ = forward_kinematics(model, theta)
    relative = np.zeros((model.n_links, 3))
    relative[0] = omega[0]
    for k in range(1, model.n_links):
        carried = np.zeros(3)
        for j in range(k):
            carried += orientations[k].T @ orientations[j] @ relative[j]
        relative[k] = omega[k] - carried

    theta_dot = np.zeros(model.dof_count)
    theta_dot[:model.base_dof] = relative[0][:model.base_dof]
    for link in range(1, model.n_links):
        sl = model.dof_slice(link)
        subspace = motion_subspace(model.joint(link), theta[sl])
        theta_dot[sl] = pseudo_inverse(subspace) @ relative[link]
    return VelocitySolveReport(theta_dot, relative, 'unconstrained')


def joint_velocities_constrained(model, theta, gyros, corrections=None,
                                 condition_limit=DEFAULT_CONDITION_LIMIT):
    """
    Least-squares q̇ = argmin ‖T_J(θ) q̇ − ω̄‖ honouring each joint's DoF.
    """
    theta = np.asarray(theta, dtype=float)
    omega = link_frame_readings(model, gyros, corrections)
    jacobian = stacked_jacobian(model, theta)
    fit = lstsq_svd(jacobian, omega.reshape(-1), condition_limit)
    q_dot = fit.solution
    relative = np.zeros((model.n_links, 3))
    relative[0, :model.base_dof] = q_dot[:model.base_dof]
    for link in range(1, model.n_links):
        sl = model.dof_slice(link)
        relative[link] = motion_subspace(model.joint(link), theta[sl]) \
            @ q_dot[sl]
    return VelocitySolveReport(
        q_dot, relative, 'constrained',
        residual=fit.residual,
        condition=fit.condition,
        ill_conditioned=fit.ill_conditioned,
    )


def _second_child_imu(model, theta, link, mount, accel):
    """Position and reading of a child-side IMU expressed in link frame."""
    if mount.link == link:
        return mount.position_m, accel
    if mount.link != link + 1:
        raise ValueError(
            f'second IMU must sit on link {link} or {link + 1} (with the '
            f'joint between them locked), got link {mount.link}'
        )
    # borrowed from the next link; valid only while that joint is locked
    joint = model.joint(link + 1)
    rotation = joint_rotation(joint, theta[model.dof_slice(link + 1)])
    return joint.origin_m + rotation @ mount.position_m, rotation @ accel


def joint_acceleration(model, theta, theta_dot, parent_accel, child_accel,
                       second_accel, mounts, parent_omega=None,
                       parent_alpha=None, strict=True,
                       condition_limit=ACCEL_CONDITION_LIMIT):
    """
    Relative angular acceleration θ̈ of the joint into the link carrying
    mounts[1], from three link-frame accelerometer readings.

    With d the child-IMU lever arm from the joint centre, e the parent-IMU
    lever arm (both in the child frame) and ω_c = ω_p + θ̇, each child IMU
    gives

        [d]^× θ̈ = C ā_p − ā_c + (ω_p × θ̇) × d + α_p × (d − e)
                  + ω_c × (ω_c × d) − ω_p × (ω_p × e)

    and the two rows are stacked and solved in the least-squares sense.
    Gravity is common to all readings and cancels.

    Args:
        model(ChainModel):
            chain description
        theta:
            joint positions
        theta_dot:
            relative angular velocity of the joint, child frame
        parent_accel, child_accel, second_accel:
            accelerometer readings rotated into their link frames
        mounts:
            (parent, child, second) ImuMount; the second may sit on the
            next link when the joint between them is locked
        parent_omega, parent_alpha:
            parent link angular velocity/acceleration in the parent
            frame; zero when omitted (parent not rotating)
        strict(bool):
            raise NearSingular on a rank-deficient system instead of
            returning an unusable report
        condition_limit(float):
            condition number treated as rank loss

    Returns:
        AccelSolveReport
    """
    parent_mount, child_mount, second_mount = mounts
    link = child_mount.link
    if parent_mount.link != link - 1:
        raise ValueError(
            f'parent IMU on link {parent_mount.link}, expected {link - 1}'
        )
    theta = np.asarray(theta, dtype=float)
    joint = model.joint(link)
    rotation = joint_rotation(joint, theta[model.dof_slice(link)])
    to_child = rotation.T

    theta_dot = as_finite(theta_dot, 'theta_dot')
    w_p = np.zeros(3) if parent_omega is None \
        else to_child @ np.asarray(parent_omega)
    a_p = np.zeros(3) if parent_alpha is None \
        else to_child @ np.asarray(parent_alpha)
    w_c = w_p + theta_dot
    e = to_child @ (parent_mount.position_m - joint.origin_m)
    f_p = to_child @ as_finite(parent_accel, 'parent_accel')
    parent_term = np.cross(w_p, np.cross(w_p, e))

    def row(d, f_c):
        return f_p - f_c + np.cross(np.cross(w_p, theta_dot), d) \
            + np.cross(a_p, d - e) + np.cross(w_c, np.cross(w_c, d)) \
            - parent_term

    d = child_mount.position_m
    d2, f2 = _second_child_imu(
        model, theta, link, second_mount, as_finite(second_accel, 'accel')
    )
    lhs = np.vstack([skew(d), skew(d2)])
    rhs = np.concatenate([row(d, as_finite(child_accel, 'accel')),
                          row(d2, f2)])
    solver = SvdSolver(lhs, condition_limit)
    usable = solver.rank == 3 and not solver.ill_conditioned
    if not usable and strict:
        raise NearSingular(
            f'IMU lever arms {d} and {d2} on link {link} do not span '
            f'3 directions (condition {solver.condition:.3e})'
        )
    solution = solver.solve(rhs)
    return AccelSolveReport(
        link=link,
        theta_ddot=solution,
        condition=solver.condition,
        usable=usable,
        residual=float(np.linalg.norm(lhs @ solution - rhs)),
    )


def dof_accelerations(joint, q, q_dot, theta_ddot):
    """q̈ of a joint from its relative angular acceleration (child frame)."""
    _, velocity_product = relative_motion(joint, q, q_dot)
    return pseudo_inverse(motion_subspace(joint, q)) \
        @ (theta_ddot - velocity_product)


def joint_accelerations(model, theta, velocities, accels, base_alpha=None,
                        borrowed=None):
    """
    Outward sweep applying joint_acceleration at every joint whose child
    link carries two IMUs, carrying parent angular velocity and
    acceleration along the chain.

    Args:
        model(ChainModel):
            chain description
        theta:
            joint positions
        velocities(VelocitySolveReport):
            from either velocity solve
        accels(dict):
            (link, slot) → link-frame accelerometer reading
        base_alpha:
            base angular acceleration, base frame; zero when omitted
        borrowed(dict):
            link → (link + 1, slot) second IMU borrowed across a locked
            joint

    Returns:
        dict link → AccelSolveReport. The sweep stops at the first link
        whose angular acceleration cannot be recovered.
    """
    theta = np.asarray(theta, dtype=float)
    borrowed = borrowed or {}
    relative = velocities.relative_velocities
    omega = relative[0].copy()
    alpha = np.zeros(3) if base_alpha is None else np.asarray(base_alpha)
    reports = {}
    for link in range(1, model.n_links):
        second_key = borrowed.get(link, (link, 1))
        parent_key = (link - 1, 0)
        if not (parent_key in accels and (link, 0) in accels
                and second_key in accels
                and model.has_mount(*second_key)):
            logger.debug('link %d lacks IMUs, sweep stops', link)
            break
        report = joint_acceleration(
            model, theta, relative[link],
            accels[parent_key], accels[(link, 0)], accels[second_key],
            (model.mount(*parent_key), model.mount(link, 0),
             model.mount(*second_key)),
            parent_omega=omega, parent_alpha=alpha,
        )
        reports[link] = report
        rotation = joint_rotation(
            model.joint(link), theta[model.dof_slice(link)]
        )
        omega_p = rotation.T @ omega
        alpha = rotation.T @ alpha + np.cross(omega_p, relative[link]) \
            + report.theta_ddot
        omega = omega_p + relative[link]
    return reports
