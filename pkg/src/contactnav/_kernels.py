"""Numba kernels for the physics inner loop and the depth scan.

Everything here is float64 and strictly sequential, so results are
bit-identical regardless of how many environments run in parallel.  Body
index 0 is always the robot; walls are (W, 4) segment rows x1,y1,x2,y2.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _closest_point_on_segment(px, py, x1, y1, x2, y2):
    ex = x2 - x1
    ey = y2 - y1
    ee = ex * ex + ey * ey
    if ee == 0.0:
        return x1, y1
    t = ((px - x1) * ex + (py - y1) * ey) / ee
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    return x1 + t * ex, y1 + t * ey


@njit(cache=True)
def step_period_kernel(
    pos, vel, radius, mass, speed_cap,
    cam_state,            # (2,) camera heading, yaw rate (robot only)
    walls,
    cmd_force,            # (2,) robot command, held for the whole period
    cam_torque,
    crowd_forces,         # (B,2) behaviour forces, row 0 ignored
    k_ped, c_ped, k_wall, c_wall,
    a_max, v_max, omega_max, inertia,
    force_threshold,
    n_substeps, dt,
    wall_projection_depth,
    dd_max, dd_normal, dd_point,   # (B,B), (B,B,2), (B,B,2) peak per disc pair
    dw_max, dw_normal, dw_point,   # (B,W), ...
    robot_impulse,                 # (2,) accumulated robot<->pedestrian impulse
):
    """Integrate one control period (n_substeps semi-implicit Euler steps).

    Returns (max robot-pedestrian force ratio, diverged flag).  Peak force
    per contacting pair is recorded into the dd_*/dw_* output arrays, which
    the caller must pass in zeroed.
    """
    B = pos.shape[0]
    W = walls.shape[0]
    forces = np.zeros((B, 2))
    max_ratio = 0.0

    for _ in range(n_substeps):
        for i in range(B):
            forces[i, 0] = crowd_forces[i, 0]
            forces[i, 1] = crowd_forces[i, 1]
        forces[0, 0] = 0.0
        forces[0, 1] = 0.0

        # disc-disc compliant contacts
        for i in range(B):
            for j in range(i + 1, B):
                dx = pos[i, 0] - pos[j, 0]
                dy = pos[i, 1] - pos[j, 1]
                rsum = radius[i] + radius[j]
                d2 = dx * dx + dy * dy
                if d2 >= rsum * rsum:
                    continue
                d = np.sqrt(d2)
                if d > 0.0:
                    nx_ = dx / d
                    ny_ = dy / d
                else:
                    nx_ = 1.0  # coincident centres: deterministic +x fallback
                    ny_ = 0.0
                overlap = rsum - d
                rel_vn = (vel[i, 0] - vel[j, 0]) * nx_ + (vel[i, 1] - vel[j, 1]) * ny_
                overlap_rate = -rel_vn
                f = k_ped * overlap + c_ped * overlap_rate
                if f < 0.0:
                    f = 0.0
                forces[i, 0] += f * nx_
                forces[i, 1] += f * ny_
                forces[j, 0] -= f * nx_
                forces[j, 1] -= f * ny_
                if f > dd_max[i, j]:
                    dd_max[i, j] = f
                    dd_normal[i, j, 0] = nx_
                    dd_normal[i, j, 1] = ny_
                    dd_point[i, j, 0] = pos[i, 0] - nx_ * (radius[i] - 0.5 * overlap)
                    dd_point[i, j, 1] = pos[i, 1] - ny_ * (radius[i] - 0.5 * overlap)
                if i == 0:
                    ratio = f / force_threshold
                    if ratio > max_ratio:
                        max_ratio = ratio
                    robot_impulse[0] += f * nx_ * dt
                    robot_impulse[1] += f * ny_ * dt

        # disc-wall contacts (stiff spring-damper)
        for i in range(B):
            for w in range(W):
                qx, qy = _closest_point_on_segment(
                    pos[i, 0], pos[i, 1],
                    walls[w, 0], walls[w, 1], walls[w, 2], walls[w, 3],
                )
                dx = pos[i, 0] - qx
                dy = pos[i, 1] - qy
                d2 = dx * dx + dy * dy
                if d2 >= radius[i] * radius[i]:
                    continue
                d = np.sqrt(d2)
                if d > 0.0:
                    nx_ = dx / d
                    ny_ = dy / d
                else:
                    nx_ = 1.0
                    ny_ = 0.0
                overlap = radius[i] - d
                overlap_rate = -(vel[i, 0] * nx_ + vel[i, 1] * ny_)
                f = k_wall * overlap + c_wall * overlap_rate
                if f < 0.0:
                    f = 0.0
                forces[i, 0] += f * nx_
                forces[i, 1] += f * ny_
                if f > dw_max[i, w]:
                    dw_max[i, w] = f
                    dw_normal[i, w, 0] = nx_
                    dw_normal[i, w, 1] = ny_
                    dw_point[i, w, 0] = qx
                    dw_point[i, w, 1] = qy

        # robot: command acceleration saturated, command never raises speed
        # above v_max (contacts may, bounded by the hard cap below)
        ax = cmd_force[0] / mass[0]
        ay = cmd_force[1] / mass[0]
        a_norm = np.sqrt(ax * ax + ay * ay)
        if a_norm > a_max:
            ax *= a_max / a_norm
            ay *= a_max / a_norm
        sp_before = np.sqrt(vel[0, 0] ** 2 + vel[0, 1] ** 2)
        vx = vel[0, 0] + ax * dt
        vy = vel[0, 1] + ay * dt
        sp = np.sqrt(vx * vx + vy * vy)
        cap = v_max if v_max > sp_before else sp_before
        if sp > cap:
            vx *= cap / sp
            vy *= cap / sp
        vel[0, 0] = vx + forces[0, 0] / mass[0] * dt
        vel[0, 1] = vy + forces[0, 1] / mass[0] * dt

        # pedestrians: behaviour + contact forces
        for i in range(1, B):
            vel[i, 0] += forces[i, 0] / mass[i] * dt
            vel[i, 1] += forces[i, 1] / mass[i] * dt

        # per-body hard speed caps
        for i in range(B):
            sp = np.sqrt(vel[i, 0] ** 2 + vel[i, 1] ** 2)
            if sp > speed_cap[i]:
                vel[i, 0] *= speed_cap[i] / sp
                vel[i, 1] *= speed_cap[i] / sp

        for i in range(B):
            pos[i, 0] += vel[i, 0] * dt
            pos[i, 1] += vel[i, 1] * dt

        # deep wall penetration guard: project out and kill inward velocity
        for i in range(B):
            for w in range(W):
                qx, qy = _closest_point_on_segment(
                    pos[i, 0], pos[i, 1],
                    walls[w, 0], walls[w, 1], walls[w, 2], walls[w, 3],
                )
                dx = pos[i, 0] - qx
                dy = pos[i, 1] - qy
                d = np.sqrt(dx * dx + dy * dy)
                overlap = radius[i] - d
                if overlap <= wall_projection_depth:
                    continue
                if d > 0.0:
                    nx_ = dx / d
                    ny_ = dy / d
                else:
                    nx_ = 1.0
                    ny_ = 0.0
                pos[i, 0] = qx + nx_ * radius[i]
                pos[i, 1] = qy + ny_ * radius[i]
                vn = vel[i, 0] * nx_ + vel[i, 1] * ny_
                if vn < 0.0:
                    vel[i, 0] -= vn * nx_
                    vel[i, 1] -= vn * ny_

        # camera yaw integration with rate clamp
        omega = cam_state[1] + cam_torque / inertia * dt
        if omega > omega_max:
            omega = omega_max
        elif omega < -omega_max:
            omega = -omega_max
        cam_state[1] = omega
        theta = cam_state[0] + omega * dt
        while theta > np.pi:
            theta -= 2.0 * np.pi
        while theta <= -np.pi:
            theta += 2.0 * np.pi
        cam_state[0] = theta

    diverged = False
    for i in range(B):
        if not (
            np.isfinite(pos[i, 0]) and np.isfinite(pos[i, 1])
            and np.isfinite(vel[i, 0]) and np.isfinite(vel[i, 1])
        ):
            diverged = True
    if not (np.isfinite(cam_state[0]) and np.isfinite(cam_state[1])):
        diverged = True
    return max_ratio, diverged


@njit(cache=True)
def raycast_kernel(origin, bearings, walls, ped_pos, ped_radius, max_dist, out):
    """Nearest-hit distance from `origin` per bearing, capped at max_dist.

    A ray starting inside a pedestrian disc reports distance 0.
    """
    R = bearings.shape[0]
    W = walls.shape[0]
    P = ped_pos.shape[0]
    for r in range(R):
        cx = np.cos(bearings[r])
        sy = np.sin(bearings[r])
        best = max_dist
        for w in range(W):
            x1 = walls[w, 0]
            y1 = walls[w, 1]
            ex = walls[w, 2] - x1
            ey = walls[w, 3] - y1
            den = cx * ey - sy * ex
            if den != 0.0:
                rx = x1 - origin[0]
                ry = y1 - origin[1]
                t = (rx * ey - ry * ex) / den
                u = (rx * sy - ry * cx) / den
                if t >= 0.0 and 0.0 <= u <= 1.0 and t < best:
                    best = t
            elif ex == 0.0 and ey == 0.0:
                # degenerate point segment: hit only if exactly on the ray
                rx = x1 - origin[0]
                ry = y1 - origin[1]
                t = rx * cx + ry * sy
                if t >= 0.0 and abs(-rx * sy + ry * cx) < 1e-12 and t < best:
                    best = t
        for p in range(P):
            ox = ped_pos[p, 0] - origin[0]
            oy = ped_pos[p, 1] - origin[1]
            b = ox * cx + oy * sy
            dperp2 = ox * ox + oy * oy - b * b
            r2 = ped_radius[p] * ped_radius[p]
            if dperp2 > r2:
                continue
            half = np.sqrt(r2 - dperp2)
            t_enter = b - half
            t_exit = b + half
            if t_exit < 0.0:
                continue
            t_hit = t_enter if t_enter > 0.0 else 0.0
            if t_hit < best:
                best = t_hit
        out[r] = best


@njit(cache=True)
def _softplus_scalar(x):
    if x > 0.0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@njit(cache=True)
def policy_forward_single(scans, state, flat, meta, out_mean, out_aux):
    """Single-observation policy forward over the flat parameter buffer.

    `meta` carries parameter offsets and layer dimensions (see the policy
    module).  Mirrors the batched numpy forward; the two are asserted
    equivalent in the tests.  Returns the value estimate; the action mean
    and aux outputs are written into the output arrays.
    """
    m_c0w, m_c0b, m_c1w, m_c1b, m_pw, m_pb = meta[0], meta[1], meta[2], meta[3], meta[4], meta[5]
    m_f1w, m_f1b, m_f2w, m_f2b = meta[6], meta[7], meta[8], meta[9]
    m_mw, m_mb, m_vw, m_vb, m_aw, m_ab = meta[10], meta[11], meta[12], meta[13], meta[14], meta[15]
    C0, k0, s0 = meta[16], meta[17], meta[18]
    C1, k1, s1 = meta[19], meta[20], meta[21]
    F, H1, H2 = meta[22], meta[23], meta[24]
    n_act, n_aux = meta[25], meta[26]

    Cin0, R = scans.shape
    L0 = (R - k0) // s0 + 1
    h0 = np.empty((L0, C0))
    for l in range(L0):
        base = l * s0
        for o in range(C0):
            acc = flat[m_c0b + o]
            w_base = m_c0w + o * Cin0 * k0
            for ci in range(Cin0):
                row = w_base + ci * k0
                for t in range(k0):
                    acc += flat[row + t] * scans[ci, base + t]
            h0[l, o] = acc if acc > 0.0 else 0.0
    L1 = (L0 - k1) // s1 + 1
    h1 = np.empty((L1, C1))
    for l in range(L1):
        base = l * s1
        for o in range(C1):
            acc = flat[m_c1b + o]
            w_base = m_c1w + o * C0 * k1
            for ci in range(C0):
                row = w_base + ci * k1
                for t in range(k1):
                    acc += flat[row + t] * h0[base + t, ci]
            h1[l, o] = acc if acc > 0.0 else 0.0
    # dense layers accumulate row-wise (x[i] * W[i, :]) so the inner loops
    # run over contiguous memory
    feat = np.empty(F)
    for o in range(F):
        feat[o] = flat[m_pb + o]
    idx = 0
    for l in range(L1):
        for c in range(C1):
            x = h1[l, c]
            row = m_pw + idx * F
            for o in range(F):
                feat[o] += flat[row + o] * x
            idx += 1
    for o in range(F):
        if feat[o] < 0.0:
            feat[o] = 0.0
    for o in range(n_aux):
        out_aux[o] = flat[m_ab + o]
    for i in range(F):
        x = feat[i]
        row = m_aw + i * n_aux
        for o in range(n_aux):
            out_aux[o] += flat[row + o] * x
    S = state.shape[0]
    g1 = np.empty(H1)
    for o in range(H1):
        g1[o] = flat[m_f1b + o]
    for i in range(F):
        x = feat[i]
        row = m_f1w + i * H1
        for o in range(H1):
            g1[o] += flat[row + o] * x
    for i in range(S):
        x = state[i]
        row = m_f1w + (F + i) * H1
        for o in range(H1):
            g1[o] += flat[row + o] * x
    for o in range(H1):
        if g1[o] < 0.0:
            g1[o] = 0.0
    g2 = np.empty(H2)
    for o in range(H2):
        g2[o] = flat[m_f2b + o]
    for i in range(H1):
        x = g1[i]
        row = m_f2w + i * H2
        for o in range(H2):
            g2[o] += flat[row + o] * x
    for o in range(H2):
        if g2[o] < 0.0:
            g2[o] = 0.0
    for o in range(n_act):
        out_mean[o] = flat[m_mb + o]
    value = flat[m_vb]
    for i in range(H2):
        x = g2[i]
        row = m_mw + i * n_act
        for o in range(n_act):
            out_mean[o] += flat[row + o] * x
        value += flat[m_vw + i] * x
    return value


@njit(cache=True)
def ppo_loss_single_kernel(
    scans, state, flat, meta,
    log_std_lo, log_std_hi, log_std_off,
    pre, old_log_prob, advantage, ret, aux_target,
    clip_eps, value_coef, entropy_coef, aux_coef, v_max,
    out_mean, out_aux,
):
    """Single-transition PPO loss over the flat parameter buffer.

    Must stay value-equivalent to the batched loss; the tests assert it.
    """
    value = policy_forward_single(scans, state, flat, meta, out_mean, out_aux)
    n = out_mean.shape[0]
    logp = -0.5 * n * np.log(2.0 * np.pi)
    entropy = 0.5 * n * (1.0 + np.log(2.0 * np.pi))
    for i in range(n):
        ls = flat[log_std_off + i]
        if ls < log_std_lo:
            ls = log_std_lo
        elif ls > log_std_hi:
            ls = log_std_hi
        z = (pre[i] - out_mean[i]) / np.exp(ls)
        logp += -0.5 * z * z - ls
        entropy += ls
    u0 = pre[0]
    logp -= np.log(v_max) - u0 - 2.0 * _softplus_scalar(-u0)
    for i in range(1, n):
        logp -= np.log(np.pi) + 2.0 * (np.log(2.0) - pre[i]
                                       - _softplus_scalar(-2.0 * pre[i]))
    ratio = np.exp(logp - old_log_prob)
    clipped = ratio
    if clipped < 1.0 - clip_eps:
        clipped = 1.0 - clip_eps
    elif clipped > 1.0 + clip_eps:
        clipped = 1.0 + clip_eps
    surr1 = ratio * advantage
    surr2 = clipped * advantage
    policy_loss = -(surr1 if surr1 <= surr2 else surr2)
    value_err = value - ret
    aux_sq = 0.0
    for i in range(out_aux.shape[0]):
        d = out_aux[i] - aux_target[i]
        aux_sq += d * d
    return (policy_loss + value_coef * value_err * value_err
            - entropy_coef * entropy + aux_coef * aux_sq)


@njit(cache=True)
def log_prob_single(mean, log_std, pre, v_max):
    """Squashed-Gaussian log density for one 3-vector sample."""
    acc = -0.5 * 3.0 * np.log(2.0 * np.pi)
    for i in range(3):
        z = (pre[i] - mean[i]) / np.exp(log_std[i])
        acc += -0.5 * z * z - log_std[i]
    u0 = pre[0]
    acc -= np.log(v_max) - u0 - 2.0 * _softplus_scalar(-u0)
    for i in range(1, 3):
        acc -= np.log(np.pi) + 2.0 * (np.log(2.0) - pre[i]
                                      - _softplus_scalar(-2.0 * pre[i]))
    return acc


@njit(cache=True)
def social_force_kernel(
    pos, vel, v0, goal, is_walker,
    mass, radius, tau, A, Bscale,
    robot_pos, robot_radius, robot_repulsion,
    walls,
    out,
):
    """Social-force behaviour forces for every pedestrian, fixed index order.

    Walkers: relaxation toward v0 in the goal direction plus exponential
    repulsion from other pedestrians, the robot (optional), and walls.
    Standers: relaxation toward rest only; they hold position until physical
    contact pushes them.
    """
    P = pos.shape[0]
    W = walls.shape[0]
    for i in range(P):
        fx = 0.0
        fy = 0.0
        if is_walker[i]:
            gx = goal[i, 0] - pos[i, 0]
            gy = goal[i, 1] - pos[i, 1]
            gn = np.sqrt(gx * gx + gy * gy)
            if gn > 0.0:
                ex = gx / gn
                ey = gy / gn
            else:
                ex = 0.0
                ey = 0.0
            fx += mass[i] * (v0[i] * ex - vel[i, 0]) / tau
            fy += mass[i] * (v0[i] * ey - vel[i, 1]) / tau
            for j in range(P):
                if j == i:
                    continue
                dx = pos[i, 0] - pos[j, 0]
                dy = pos[i, 1] - pos[j, 1]
                d = np.sqrt(dx * dx + dy * dy)
                if d > 0.0:
                    nx_ = dx / d
                    ny_ = dy / d
                else:
                    nx_ = 1.0
                    ny_ = 0.0
                mag = A * np.exp((radius[i] + radius[j] - d) / Bscale)
                fx += mag * nx_
                fy += mag * ny_
            if robot_repulsion:
                dx = pos[i, 0] - robot_pos[0]
                dy = pos[i, 1] - robot_pos[1]
                d = np.sqrt(dx * dx + dy * dy)
                if d > 0.0:
                    nx_ = dx / d
                    ny_ = dy / d
                else:
                    nx_ = 1.0
                    ny_ = 0.0
                mag = A * np.exp((radius[i] + robot_radius - d) / Bscale)
                fx += mag * nx_
                fy += mag * ny_
            for w in range(W):
                qx, qy = _closest_point_on_segment(
                    pos[i, 0], pos[i, 1],
                    walls[w, 0], walls[w, 1], walls[w, 2], walls[w, 3],
                )
                dx = pos[i, 0] - qx
                dy = pos[i, 1] - qy
                d = np.sqrt(dx * dx + dy * dy)
                if d > 0.0:
                    nx_ = dx / d
                    ny_ = dy / d
                else:
                    nx_ = 1.0
                    ny_ = 0.0
                mag = A * np.exp((radius[i] - d) / Bscale)
                fx += mag * nx_
                fy += mag * ny_
        else:
            fx += mass[i] * (0.0 - vel[i, 0]) / tau
            fy += mass[i] * (0.0 - vel[i, 1]) / tau
        out[i, 0] = fx
        out[i, 1] = fy
