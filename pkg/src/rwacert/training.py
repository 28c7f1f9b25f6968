"""Certificate/controller training and the counterexample-guided loop.

The objective is a pair of hinge terms: one that pushes the certificate below
beta (minus a margin) on initial states, one that enforces the per-step
decrease on sublevel states outside the goal and unsafe sets, with the
successor taken through the clipped controller and the affine plant inside
the gradient path. Training alternates with verification; counterexamples
come back as data, with uniform samples from a small neighborhood around each
one so the networks learn locally smooth corrections instead of point fixes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry, nn
from .certificate import FrwaCertificate, RwaCertificate
from .dynamics import Plant
from .geometry import Complement, Intersection, Region, RwaTask, Union
from .nn import GradientSet, Mlp
from .verifier import (
    BnbConfig,
    check_condition1,
    check_condition2_filtered,
    check_condition2_plain,
    check_condition3,
)

__all__ = [
    "TrainConfig",
    "Dataset",
    "LossBreakdown",
    "TrainResult",
    "IterationRecord",
    "CegisResult",
    "loss_terms",
    "loss_and_grads",
    "train_to_zero",
    "make_base_dataset",
    "augment",
    "initial_controller",
    "baseline_docking_law",
    "warmup_certificate",
    "cegis",
    "legal_sampling_region",
    "validate_dataset",
]

PROVENANCE_SAMPLED = "sampled"
PROVENANCE_CEX = "counterexample-neighborhood"


@dataclass(frozen=True)
class TrainConfig:
    """Weights, margins, rates, and data knobs for certificate training.

    The margins default to the differences 1e-4 - 1e-5 and 1e-4 - 1e-7; set
    them to anything in [1e-5, 1e-4] to use the range reading instead.
    """

    c_s: float = 1.0
    c_d: float = 10.0
    delta1: float = 1e-4 - 1e-5
    delta2: float = 1e-4 - 1e-7
    lr_initial: float = 5e-3
    lr_finetune: float = 1e-4
    epochs_max: int = 6000
    batch_size: int = 0  # 0 = full batch
    zero_loss_tol: float = 0.0
    neighbor_count: int = 100
    neighbor_radius: float = 0.05
    seed: int = 0
    momentum: float = 0.0
    lr_decay: float = 1.0  # per-epoch multiplicative decay
    # Decrease-term membership pad above beta; 0 reproduces the objective
    # exactly, a positive pad keeps states in the decrease term even when
    # their value drifts above beta, which blocks the degenerate optimum of
    # lifting the certificate out of its own sublevel set.
    sublevel_pad: float = 0.0
    # Epochs of certificate pre-shaping toward the simulated time-to-dock of
    # the initial controller (0 = off). Pure optimization warm start; the
    # objective and the verified conditions are untouched by it.
    warmup_epochs: int = 0
    warmup_horizon: int = 400
    # Plain (unfiltered) mode only: weight and margin of the unsafe floor term.
    c_u: float = 1.0
    delta3: float = 1e-4 - 1e-5
    # Base dataset composition.
    data_uniform: int = 16000
    data_initial: int = 4000

    def __post_init__(self):
        if min(self.c_s, self.c_d, self.c_u) < 0:
            raise ValueError("objective weights must be >= 0")
        if min(self.delta1, self.delta2, self.delta3) <= 0:
            raise ValueError("margins must be > 0")
        if min(self.lr_initial, self.lr_finetune) <= 0:
            raise ValueError("learning rates must be > 0")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Training states with provenance tags; unsafe_points only feed the
    unfiltered mode's floor term."""

    points: np.ndarray
    provenance: tuple[str, ...]
    unsafe_points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "unsafe_points", np.atleast_2d(np.asarray(self.unsafe_points, dtype=np.float64)))
        if len(self.provenance) != pts.shape[0]:
            raise ValueError("one provenance tag per point required")

    @property
    def size(self) -> int:
        return self.points.shape[0]


def legal_sampling_region(task: RwaTask) -> Region:
    """(domain \\ (unsafe ∪ goal)) ∪ initial — the states the objective reads."""
    return Union(
        (
            Intersection((Complement(task.unsafe), Complement(task.goal))),
            task.initial,
        )
    )


def validate_dataset(data: Dataset, task: RwaTask) -> bool:
    ok = geometry.region_contains(legal_sampling_region(task), data.points)
    if data.unsafe_points.shape[0]:
        ok_u = geometry.region_contains(task.unsafe, data.unsafe_points)
        return bool(np.all(ok)) and bool(np.all(ok_u))
    return bool(np.all(ok))


def make_base_dataset(
    task: RwaTask, cfg: TrainConfig, seed: int, include_unsafe: bool = False
) -> Dataset:
    """Uniform samples over the legal set plus dedicated initial-set samples.

    The initial set is a thin slab in velocity, so uniform rejection over the
    domain would essentially never hit it; it gets sampled directly.
    """
    band = geometry.sample_region(legal_sampling_region(task), task.domain, cfg.data_uniform, seed)
    init_box = task.initial
    init_pts = geometry.sample_region(init_box, task.domain, cfg.data_initial, seed + 1)
    pts = np.concatenate([band, init_pts], axis=0)
    unsafe = np.zeros((0, task.dim))
    if include_unsafe:
        unsafe = geometry.sample_region(task.unsafe, task.domain, cfg.data_uniform // 4, seed + 2)
    return Dataset(pts, (PROVENANCE_SAMPLED,) * pts.shape[0], unsafe)


def augment(data: Dataset, counterexamples, cfg: TrainConfig, task: RwaTask, seed: int) -> Dataset:
    """Fold counterexamples plus uniform neighborhood samples into the data.

    Neighbors are drawn from the L-inf ball of ``neighbor_radius`` around each
    counterexample and filtered to the legal sampling set (clamped to the
    domain box). Counterexamples that fall in the unsafe set go to the unsafe
    pool instead; those exist only in the unfiltered mode.
    """
    rng = np.random.default_rng(seed)
    legal = legal_sampling_region(task)
    new_pts = [data.points]
    new_tags = list(data.provenance)
    new_unsafe = [data.unsafe_points]
    for cex in counterexamples:
        cex = np.asarray(cex, dtype=np.float64).reshape(task.dim)
        ball = cex + rng.uniform(-cfg.neighbor_radius, cfg.neighbor_radius,
                                 size=(cfg.neighbor_count, task.dim))
        ball = np.clip(ball, task.domain.lower, task.domain.upper)
        cand = np.concatenate([cex[None, :], ball], axis=0)
        keep = geometry.region_contains(legal, cand)
        kept = cand[keep]
        if kept.shape[0]:
            new_pts.append(kept)
            new_tags.extend([PROVENANCE_CEX] * kept.shape[0])
        in_unsafe = geometry.region_contains(task.unsafe, cand)
        if np.any(in_unsafe):
            new_unsafe.append(cand[in_unsafe])
    return Dataset(np.concatenate(new_pts, axis=0), tuple(new_tags),
                   np.concatenate(new_unsafe, axis=0))


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossBreakdown:
    sublevel: float  # initial states above beta - delta1
    decrease: float  # failed per-step decrease
    unsafe_floor: float  # unfiltered mode only
    total: float


def _filtered_values(cert: FrwaCertificate, raw: np.ndarray, in_goal, in_unsafe) -> np.ndarray:
    return np.where(in_goal, cert.c1, np.where(in_unsafe, cert.c2, raw))


def loss_and_grads(
    data: Dataset,
    cert: FrwaCertificate | RwaCertificate,
    controller: Mlp,
    plant: Plant,
    task: RwaTask,
    cfg: TrainConfig,
) -> tuple[LossBreakdown, GradientSet, GradientSet]:
    """Objective value plus exact gradients for the certificate and controller.

    Set membership (initial / goal / unsafe, and the sublevel test against the
    current certificate) is recomputed on every call and never differentiated
    through; gradients flow through the raw network values, the controller,
    the clip, and the affine step only.
    """
    if data.size == 0:
        raise ValueError("dataset must be nonempty")
    filtered = isinstance(cert, FrwaCertificate)
    w = cert.witness
    pts = data.points

    in_init = geometry.region_contains(task.initial, pts)
    in_goal = geometry.region_contains(task.goal, pts)
    in_unsafe = geometry.region_contains(task.unsafe, pts)
    raw_x, trace_x = nn.forward_trace(cert.net, pts)
    raw_x = raw_x[:, 0]
    vals_x = _filtered_values(cert, raw_x, in_goal, in_unsafe) if filtered else raw_x

    adj_x = np.zeros((pts.shape[0], 1))
    grad_pi = GradientSet.zeros_like(controller)

    # Sublevel term over initial states.
    n_init = int(in_init.sum())
    o_s = 0.0
    if n_init:
        hinge = np.maximum(cfg.delta1 + vals_x[in_init] - w.beta, 0.0)
        o_s = cfg.c_s * float(hinge.sum()) / n_init
        active = np.zeros(pts.shape[0], dtype=bool)
        active[in_init] = hinge > 0.0
        if filtered:
            active &= ~(in_goal | in_unsafe)  # clamped values carry no gradient
        adj_x[active, 0] += cfg.c_s / n_init

    # Decrease term over sublevel band states.
    band = ~in_goal & ~in_unsafe
    cand = band & (raw_x <= w.beta + cfg.sublevel_pad)
    n_cand = int(cand.sum())
    o_d = 0.0
    if n_cand:
        xc = pts[cand]
        u_raw, trace_u = nn.forward_trace(controller, xc)
        u_clip = plant.clip(u_raw)
        xp = plant.step.apply(xc, u_clip)
        raw_xp, trace_xp = nn.forward_trace(cert.net, xp)
        raw_xp = raw_xp[:, 0]
        if filtered:
            xp_goal = geometry.region_contains(task.goal, xp)
            xp_unsafe = geometry.region_contains(task.unsafe, xp)
            vals_xp = _filtered_values(cert, raw_xp, xp_goal, xp_unsafe)
        else:
            vals_xp = raw_xp
        hinge_arg = cfg.delta2 + w.epsilon + vals_xp - raw_x[cand]
        act = hinge_arg > 0.0
        o_d = cfg.c_d * float(np.maximum(hinge_arg, 0.0).sum()) / n_cand
        scale = cfg.c_d / n_cand
        # d/dV(x): -scale on active rows (x is always a raw, unclamped state here).
        cand_idx = np.flatnonzero(cand)
        adj_x[cand_idx[act], 0] -= scale
        # d/dV(x'): +scale where the successor value is the raw network.
        adj_xp = np.zeros((n_cand, 1))
        raw_rows = act & ~(xp_goal | xp_unsafe) if filtered else act
        adj_xp[raw_rows, 0] = scale
        grads_xp, input_adj_xp = nn.gradients(cert.net, trace_xp, adj_xp)
        # Controller path: x' depends on u through B and the clip.
        adj_u = input_adj_xp @ plant.step.b_matrix
        inside = np.abs(u_raw) < plant.control_limit
        grad_pi, _ = nn.gradients(controller, trace_u, adj_u * inside)
    else:
        grads_xp = GradientSet.zeros_like(cert.net)

    # Unsafe floor term (unfiltered mode).
    o_u = 0.0
    grads_u_term = GradientSet.zeros_like(cert.net)
    if not filtered and data.unsafe_points.shape[0]:
        up = data.unsafe_points
        raw_u, trace_un = nn.forward_trace(cert.net, up)
        hinge_u = np.maximum(cfg.delta3 + w.alpha - raw_u[:, 0], 0.0)
        o_u = cfg.c_u * float(hinge_u.sum()) / up.shape[0]
        adj_un = np.where(hinge_u > 0.0, -cfg.c_u / up.shape[0], 0.0)[:, None]
        grads_u_term, _ = nn.gradients(cert.net, trace_un, adj_un)

    grads_x, _ = nn.gradients(cert.net, trace_x, adj_x)
    grad_v = grads_x.added(grads_xp).added(grads_u_term)
    total = o_s + o_d + o_u
    return LossBreakdown(o_s, o_d, o_u, total), grad_v, grad_pi


def loss_terms(
    data: Dataset,
    cert: FrwaCertificate | RwaCertificate,
    controller: Mlp,
    plant: Plant,
    task: RwaTask,
    cfg: TrainConfig,
) -> LossBreakdown:
    """Objective values only (see loss_and_grads for the gradient contract)."""
    breakdown, _, _ = loss_and_grads(data, cert, controller, plant, task, cfg)
    return breakdown


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainResult:
    cert: FrwaCertificate | RwaCertificate
    controller: Mlp
    final_loss: float
    epochs: int
    status: str  # "zero", "epochs", or "diverged"


def train_to_zero(
    cert: FrwaCertificate | RwaCertificate,
    controller: Mlp,
    data: Dataset,
    cfg: TrainConfig,
    plant: Plant,
    task: RwaTask,
    joint: bool = True,
    lr: float | None = None,
) -> TrainResult:
    """Gradient descent on the objective until it reaches zero_loss_tol.

    Updates the certificate always and the controller when ``joint``. The
    objective is recomputed (with fresh memberships) every epoch; a NaN loss
    reports "diverged", running out of epochs reports "epochs".
    """
    step_lr = cfg.lr_initial if lr is None else lr
    vel_v = GradientSet.zeros_like(cert.net)
    vel_pi = GradientSet.zeros_like(controller)
    rng = np.random.default_rng(cfg.seed)
    n = data.size
    batch = n if cfg.batch_size in (0, None) or cfg.batch_size >= n else cfg.batch_size

    current_cert, current_pi = cert, controller
    best = (float("inf"), cert, controller)
    epochs_run = 0
    loss_value = float("inf")

    def step(subset):
        nonlocal current_cert, current_pi, vel_v, vel_pi
        breakdown, g_v, g_pi = loss_and_grads(subset, current_cert, current_pi, plant, task, cfg)
        if cfg.momentum > 0.0:
            vel_v = vel_v.scaled(cfg.momentum).added(g_v)
            g_v = vel_v
            if joint:
                vel_pi = vel_pi.scaled(cfg.momentum).added(g_pi)
                g_pi = vel_pi
        current_cert = current_cert.with_net(nn.sgd_step(current_cert.net, g_v, step_lr))
        if joint:
            current_pi = nn.sgd_step(current_pi, g_pi, step_lr)
        return breakdown.total

    for epoch in range(cfg.epochs_max):
        if batch == n:
            # Full-batch: the measured loss belongs to the pre-step parameters.
            pre_cert, pre_pi = current_cert, current_pi
            loss_value = step(data)
            if not np.isfinite(loss_value):
                return TrainResult(pre_cert, pre_pi, loss_value, epochs_run, "diverged")
            if loss_value < best[0]:
                best = (loss_value, pre_cert, pre_pi)
            if loss_value <= cfg.zero_loss_tol:
                return TrainResult(pre_cert, pre_pi, loss_value, epochs_run, "zero")
        else:
            order = rng.permutation(n)
            for i in range(0, n, batch):
                sel = order[i : i + batch]
                subset = Dataset(
                    data.points[sel],
                    tuple(data.provenance[j] for j in sel),
                    data.unsafe_points,
                )
                part = step(subset)
                if not np.isfinite(part):
                    return TrainResult(current_cert, current_pi, part, epochs_run, "diverged")
            loss_value = loss_terms(data, current_cert, current_pi, plant, task, cfg).total
            if loss_value < best[0]:
                best = (loss_value, current_cert, current_pi)
            if loss_value <= cfg.zero_loss_tol:
                return TrainResult(current_cert, current_pi, loss_value, epochs_run, "zero")
        epochs_run = epoch + 1
        step_lr *= cfg.lr_decay
    # Hinge objectives oscillate under a fixed rate; hand back the best pass.
    loss_value, current_cert, current_pi = best
    return TrainResult(current_cert, current_pi, loss_value, epochs_run, "epochs")


def _time_to_dock(controller: Mlp, pts: np.ndarray, task: RwaTask, plant: Plant, horizon: int) -> np.ndarray:
    """Steps until goal entry under the controller; horizon for non-dockers."""
    s = pts.copy()
    n = pts.shape[0]
    t = np.full(n, float(horizon))
    active = np.ones(n, dtype=bool)
    t[geometry.region_contains(task.goal, s)] = 0.0
    active &= t > 0
    active &= ~geometry.region_contains(task.unsafe, s)
    for step_i in range(1, horizon + 1):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        u = plant.clip(nn.forward(controller, s[idx]))
        s[idx] = plant.step.apply(s[idx], u)
        hit_u = geometry.region_contains(task.unsafe, s[idx])
        hit_g = geometry.region_contains(task.goal, s[idx]) & ~hit_u
        t[idx[hit_g]] = step_i
        active[idx[hit_u | hit_g]] = False
    return t


def warmup_certificate(
    v_net: Mlp,
    controller: Mlp,
    data: Dataset,
    task: RwaTask,
    plant: Plant,
    cfg: TrainConfig,
) -> Mlp:
    """Pre-shape the certificate toward the scaled time-to-dock of the
    current controller. A descent staircase along closed-loop trajectories is
    exactly the shape the decrease condition asks for, so regression to it
    starts the real objective near a feasible point; states that fail to dock
    within the horizon get parked above the unsafe clamp."""
    times = _time_to_dock(controller, data.points, task, plant, cfg.warmup_horizon)
    docked = times < cfg.warmup_horizon
    if docked.any():
        t_ref = max(float(np.quantile(times[docked], 0.95)), 1.0)
    else:
        t_ref = float(cfg.warmup_horizon)
    beta = 1.0
    target = np.where(
        docked, 0.05 + 0.85 * beta * np.minimum(times / t_ref, 1.0), 1.6
    )[:, None]
    velocity = GradientSet.zeros_like(v_net)
    for _ in range(cfg.warmup_epochs):
        pred, trace = nn.forward_trace(v_net, data.points)
        grads, _ = nn.gradients(v_net, trace, 2.0 * (pred - target) / data.size)
        velocity = velocity.scaled(0.9).added(grads)
        v_net = nn.sgd_step(v_net, velocity, 3e-3)
    return v_net


# ---------------------------------------------------------------------------
# Controller initialization
# ---------------------------------------------------------------------------


def baseline_docking_law(
    task: RwaTask, plant: Plant, kp: float | None = None, kd: float | None = None
):
    """Hand-written proportional-derivative law: u = clip(-kp*pos - kd*vel).

    Default gains place the closed-loop poles at a slow, critically damped
    approach so that peak speeds stay under the cap on the whole domain.
    """
    # Per-step acceleration is u/m; B's velocity rows carry t_step/m.
    vel_rows = [plant.step.b_matrix[v, :] for v in task.layout.vel]
    t_over_m = float(np.max(np.abs(np.stack(vel_rows))))
    mass_eff = plant.step.a_matrix[task.layout.pos[0], task.layout.vel[0]] / t_over_m
    # omega = 0.06 keeps the peak approach speed from corner starts at 5 m
    # under the speed cap even through the conservative norm approximations.
    omega = 0.06
    kp = mass_eff * omega**2 if kp is None else kp
    kd = 2.0 * mass_eff * omega if kd is None else kd
    pos_idx = list(task.layout.pos)
    vel_idx = list(task.layout.vel)

    def law(states: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        u = -kp * s[:, pos_idx] - kd * s[:, vel_idx]
        return plant.clip(u)

    return law


def initial_controller(
    task: RwaTask,
    plant: Plant,
    mode: str = "regress_to_baseline",
    seed: int = 0,
    layer_sizes=None,
    import_path=None,
    rms_target: float = 0.05,
    fit_samples: int = 8000,
    fit_epochs: int = 400,
    kp: float | None = None,
    kd: float | None = None,
) -> Mlp:
    """Produce the controller the first training round starts from.

    ``regress_to_baseline`` least-squares-fits the network to the hand-written
    docking law over states sampled from the domain (output layer solved
    exactly on random ReLU features, then the whole network is polished with
    momentum SGD). ``import`` loads a saved network; ``random`` just
    initializes one.
    """
    sizes = list(layer_sizes) if layer_sizes else [task.dim, 20, 20, plant.control_dim]
    if sizes[0] != task.dim or sizes[-1] != plant.control_dim:
        raise ValueError(f"controller must map {task.dim} -> {plant.control_dim}")
    if mode == "random":
        return nn.init(sizes, seed)
    if mode == "import":
        net = nn.load(import_path)
        if net.input_size != task.dim or net.output_size != plant.control_dim:
            raise ValueError(
                f"imported controller maps {net.input_size} -> {net.output_size}, "
                f"task needs {task.dim} -> {plant.control_dim}"
            )
        return net
    if mode != "regress_to_baseline":
        raise ValueError(f"unknown controller init mode {mode!r}")

    law = baseline_docking_law(task, plant, kp=kp, kd=kd)
    rng = np.random.default_rng(seed)
    states = task.domain.sample(rng, fit_samples)
    targets = law(states)
    net = nn.init(sizes, seed)

    # Closed-form least squares on the last layer over the random features.
    def features(x):
        h = x
        for wgt, b in zip(net.weights[:-1], net.biases[:-1]):
            h = np.maximum(h @ wgt.T + b, 0.0)
        return h

    feats = features(states)
    design = np.concatenate([feats, np.ones((feats.shape[0], 1))], axis=1)
    sol, *_ = np.linalg.lstsq(design, targets, rcond=None)
    net = Mlp(
        net.weights[:-1] + (sol[:-1].T.copy(),),
        net.biases[:-1] + (sol[-1].copy(),),
    )

    # Polish all layers with momentum SGD on the mean-squared residual.
    velocity = GradientSet.zeros_like(net)
    lr, momentum = 2e-3, 0.9
    for _ in range(fit_epochs):
        pred, trace = nn.forward_trace(net, states)
        resid = pred - targets
        rms = float(np.sqrt(np.mean(resid**2)))
        if rms <= 0.5 * rms_target:
            break
        grads, _ = nn.gradients(net, trace, 2.0 * resid / states.shape[0])
        velocity = velocity.scaled(momentum).added(grads)
        net = nn.sgd_step(net, velocity, lr)
    held_out = task.domain.sample(rng, 2000)
    rms = float(np.sqrt(np.mean((nn.forward(net, held_out) - law(held_out)) ** 2)))
    if rms > rms_target:
        raise RuntimeError(f"baseline regression RMS {rms:.4f} exceeds target {rms_target}")
    return net


# ---------------------------------------------------------------------------
# CEGIS
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    loss: float
    train_status: str
    train_epochs: int
    verdicts: dict
    counterexamples: list  # list of (condition, point, pseudo: bool)
    wall_time_s: float


@dataclass(frozen=True)
class CegisResult:
    status: str  # "verified" or "timed_out"
    controller: Mlp
    certificate: FrwaCertificate | RwaCertificate
    iterations: int
    wall_time_s: float
    records: list = field(default_factory=list)

    @property
    def verified(self) -> bool:
        return self.status == "verified"


def _run_checks(cert, controller, plant, task, bnb_cfg) -> dict:
    checks = {"condition1": check_condition1(cert, task, bnb_cfg)}
    if isinstance(cert, FrwaCertificate):
        checks["condition2"] = check_condition2_filtered(cert, controller, plant, task, bnb_cfg)
    else:
        checks["condition2"] = check_condition2_plain(cert, controller, plant, task, bnb_cfg)
        checks["condition3"] = check_condition3(cert, task, bnb_cfg)
    return checks


def cegis(
    task: RwaTask,
    plant: Plant,
    cfg: TrainConfig,
    bnb_cfg: BnbConfig,
    wall_budget_s: float,
    *,
    mode: str = "frwa",
    witness=None,
    c1: float = -10.0,
    c2: float = 1.2,
    controller_init: str = "regress_to_baseline",
    import_path=None,
    pi_sizes=None,
    v_sizes=None,
    joint: bool = True,
    extra_points: np.ndarray | None = None,
    baseline_kp: float | None = None,
    baseline_kd: float | None = None,
    on_iteration=None,
) -> CegisResult:
    """Alternate training to zero loss with formal checks until all verify.

    The first round trains at lr_initial; after counterexamples are folded in,
    retraining runs at lr_finetune so the incorporation acts as fine-tuning.
    An Unknown verdict counts as a failed check and contributes the center of
    its unresolved box as a pseudo-counterexample (flagged in the record).
    Returns Verified only when every applicable check verified in the final
    iteration.
    """
    from .certificate import DEFAULT_WITNESS, Witness  # avoid import cycle at module load

    start = time.perf_counter()
    witness = witness or DEFAULT_WITNESS
    if mode not in ("frwa", "rwa"):
        raise ValueError(f"mode must be 'frwa' or 'rwa', got {mode!r}")

    controller = initial_controller(
        task, plant, controller_init, cfg.seed, pi_sizes,
        import_path=import_path, kp=baseline_kp, kd=baseline_kd,
    )
    v_sizes = list(v_sizes) if v_sizes else [task.dim, 30, 30, 1]
    v_net = nn.init(v_sizes, cfg.seed + 1)

    data = make_base_dataset(task, cfg, cfg.seed + 2, include_unsafe=(mode == "rwa"))
    if extra_points is not None and np.asarray(extra_points).size:
        extra = np.atleast_2d(np.asarray(extra_points, dtype=np.float64))
        data = Dataset(
            np.concatenate([data.points, extra], axis=0),
            data.provenance + (PROVENANCE_SAMPLED,) * extra.shape[0],
            data.unsafe_points,
        )

    if cfg.warmup_epochs > 0:
        v_net = warmup_certificate(v_net, controller, data, task, plant, cfg)
    if mode == "frwa":
        cert: FrwaCertificate | RwaCertificate = FrwaCertificate(
            v_net, witness, task.goal, task.unsafe, c1, c2
        )
    else:
        cert = RwaCertificate(v_net, witness)

    records: list[IterationRecord] = []
    lr = cfg.lr_initial
    iteration = 0
    while True:
        iteration += 1
        iter_start = time.perf_counter()
        trained = train_to_zero(cert, controller, data, cfg, plant, task, joint=joint, lr=lr)
        cert, controller = trained.cert, trained.controller
        checks = _run_checks(cert, controller, plant, task, bnb_cfg)
        all_verified = all(v.is_verified for v in checks.values())

        cex_entries = []
        for name, verdict in checks.items():
            if verdict.is_counterexample:
                cex_entries.append((name, verdict.counterexample, False))
            elif verdict.is_unknown and verdict.unknown_box is not None:
                center = 0.5 * (verdict.unknown_box[:, 0] + verdict.unknown_box[:, 1])
                cex_entries.append((name, center, True))

        record = IterationRecord(
            iteration=iteration,
            loss=trained.final_loss,
            train_status=trained.status,
            train_epochs=trained.epochs,
            verdicts={k: v for k, v in checks.items()},
            counterexamples=cex_entries,
            wall_time_s=time.perf_counter() - iter_start,
        )
        records.append(record)
        if on_iteration is not None:
            on_iteration(record)

        elapsed = time.perf_counter() - start
        if all_verified:
            return CegisResult("verified", controller, cert, iteration, elapsed, records)
        if elapsed >= wall_budget_s:
            return CegisResult("timed_out", controller, cert, iteration, elapsed, records)
        data = augment(
            data, [pt for _, pt, _ in cex_entries], cfg, task, cfg.seed + 1000 + iteration
        )
        lr = cfg.lr_finetune
