"""Scene fitting: adaptive first-order updates, pruning and densification.

The update rule is Adam with per-group step-size multipliers and an
exponential step-size decay; after every step the type invariants are
re-enforced (quaternion renormalization, scale floor, opacity/color clamps;
the covariance diagonal floor is applied at read time by construction).

Pruning removes primitives whose opacity fell below a threshold;
densification duplicates primitives whose accumulated positional gradient
(w.r.t. both the center and the position-offset state) is large, jittering
the child by a tenth of the parent's mean scale.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field as dfield, replace

import numpy as np

from .errors import ConsistencyError, DivergenceError, ParseError
from .grad import Supervision, grad_state, total_loss
from .hyper_gaussian import EPS_SCALE
from .losses import LossWeights
from .renderer import DEFAULT_OPTIONS, RenderOptions
from .scene import PARAM_KEYS, GaussianParams, Scene

log = logging.getLogger(__name__)

LR_MULT = {
    "mu_p": 0.1,
    "scale": 0.5,
    "quat": 0.5,
    "opacity": 1.0,
    "color": 1.0,
    "st_dp": 0.1,
    "st_dscale": 0.1,
    "st_drot": 0.1,
    "st_t": 0.05,
    "st_quat_o": 0.1,
    "chol": 1.0,
    "c_cross": 0.1,
}


@dataclass
class FitConfig:
    iters: int = 2000
    lambda_pho: float = 1.0
    lambda_cor: float = 0.5
    lambda_arap: float = 0.1
    seed: int = 7
    prune_eps: float = 0.005
    dens_tau: float = 1e-3
    pd_interval: int = 200
    train_stride: int = 1
    window: int = 5
    neighbors: int = 8
    lr: float = 0.02
    lr_decay: float = 0.9985
    background: tuple = (0.0, 0.0, 0.0)
    init_opacity: float = 0.6
    freeze_c_cross: str = "none"  # none | all | orientation
    exact_render: bool = False

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_pho, self.lambda_cor, self.lambda_arap)

    def options(self) -> RenderOptions:
        return RenderOptions.exact() if self.exact_render else DEFAULT_OPTIONS


def parse_fit_config(source) -> FitConfig:
    """FitConfig from a dict or a key=value text file."""
    if isinstance(source, FitConfig):
        return source
    if isinstance(source, dict):
        kv = dict(source)
    else:
        kv = {}
        with open(source) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ParseError("expected key=value", path=source, line=lineno)
                key, val = line.split("=", 1)
                kv[key.strip()] = val.strip()
    defaults = FitConfig()
    args = {}
    for key, raw in kv.items():
        if not hasattr(defaults, key):
            raise ParseError(f"unknown config key {key!r}")
        default = getattr(defaults, key)
        if isinstance(default, bool):
            args[key] = str(raw).lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            args[key] = int(raw)
        elif isinstance(default, float):
            args[key] = float(raw)
        elif isinstance(default, tuple):
            parts = raw.split(",") if isinstance(raw, str) else raw
            args[key] = tuple(float(v) for v in parts)
        else:
            args[key] = str(raw)
    cfg = replace(defaults, **args)
    if cfg.freeze_c_cross not in ("none", "all", "orientation"):
        raise ParseError(f"freeze_c_cross must be none|all|orientation, got {cfg.freeze_c_cross!r}")
    return cfg


@dataclass
class OptState:
    lr: float
    lr_decay: float = 0.9985
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    prune_eps: float = 0.005
    dens_tau: float = 1e-3
    iteration: int = 0
    m: dict = dfield(default_factory=dict)
    v: dict = dfield(default_factory=dict)
    accum_pos: np.ndarray = dfield(default_factory=lambda: np.zeros(0))
    accum_count: int = 0
    rng: np.random.Generator = dfield(default_factory=lambda: np.random.default_rng(0))

    @staticmethod
    def for_scene(scene: Scene, config: FitConfig) -> "OptState":
        state = OptState(
            lr=config.lr,
            lr_decay=config.lr_decay,
            prune_eps=config.prune_eps,
            dens_tau=config.dens_tau,
            rng=np.random.default_rng(config.seed),
        )
        state.m = {k: np.zeros_like(getattr(scene.params, k)) for k in PARAM_KEYS}
        state.v = {k: np.zeros_like(getattr(scene.params, k)) for k in PARAM_KEYS}
        state.accum_pos = np.zeros(scene.num_gaussians)
        return state


def adam_update(opt: OptState, params: dict, grads: dict, lr_mult: dict | None = None) -> None:
    """One Adam step over a dict of parameter arrays, in place."""
    lr_mult = lr_mult or {}
    opt.iteration += 1
    t = opt.iteration
    lr_t = opt.lr * opt.lr_decay ** (t - 1)
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    for key, arr in params.items():
        g = grads[key]
        opt.m[key] = opt.beta1 * opt.m[key] + (1.0 - opt.beta1) * g
        opt.v[key] = opt.beta2 * opt.v[key] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[key] / bc1
        v_hat = opt.v[key] / bc2
        arr -= lr_t * lr_mult.get(key, 1.0) * m_hat / (np.sqrt(v_hat) + opt.eps)


def enforce_invariants(params: GaussianParams) -> None:
    params.quat /= np.linalg.norm(params.quat, axis=-1, keepdims=True)
    params.st_quat_o /= np.linalg.norm(params.st_quat_o, axis=-1, keepdims=True)
    np.maximum(params.scale, EPS_SCALE, out=params.scale)
    np.clip(params.opacity, 0.0, 1.0, out=params.opacity)
    np.clip(params.color, 0.0, 1.0, out=params.color)


def step(scene: Scene, opt: OptState, grads: dict) -> Scene:
    """Adam step over every primitive parameter, then invariant re-enforcement
    and gradient-magnitude accumulation for densification."""
    params = {k: getattr(scene.params, k) for k in PARAM_KEYS}
    adam_update(opt, params, grads, LR_MULT)
    enforce_invariants(scene.params)
    if opt.accum_pos.shape[0] == scene.num_gaussians:
        opt.accum_pos += np.linalg.norm(grads["mu_p"], axis=1) + np.linalg.norm(
            grads["st_dp"], axis=1
        )
        opt.accum_count += 1
    return scene


def prune_and_densify(scene: Scene, opt: OptState) -> Scene:
    """Drop low-opacity primitives, duplicate high-gradient ones (position
    jittered by a tenth of the parent's mean scale), reset accumulators."""
    n = scene.num_gaussians
    if n == 0:
        return scene
    keep = scene.params.opacity >= opt.prune_eps
    keep_idx = np.flatnonzero(keep)
    mean_grad = opt.accum_pos / max(opt.accum_count, 1)
    parents = np.flatnonzero(keep & (mean_grad > opt.dens_tau))

    new_params = scene.params.take(keep_idx)
    new_bindings = [scene.bindings[i] for i in keep_idx]
    new_ids = scene.ids[keep_idx]
    new_track = scene.track_id[keep_idx]

    if parents.size:
        children = scene.params.take(parents)
        jitter = 0.1 * children.scale.mean(axis=1, keepdims=True)
        children.mu_p = children.mu_p + jitter * opt.rng.standard_normal(children.mu_p.shape)
        new_params = GaussianParams.concatenate(new_params, children)
        new_bindings.extend(scene.bindings[i] for i in parents)
        child_ids = np.arange(scene.next_id, scene.next_id + parents.size)
        new_ids = np.concatenate([new_ids, child_ids])
        new_track = np.concatenate([new_track, np.full(parents.size, -1, dtype=int)])

    out = Scene(
        camera=scene.camera,
        field=scene.field,
        params=new_params,
        bindings=new_bindings,
        ids=new_ids,
        track_id=new_track,
        background=scene.background,
        next_id=scene.next_id + int(parents.size),
    )
    # carry deformation tables over (children copy their parent's rows)
    for frame, table in scene._tables.items():
        out._tables[frame] = {
            "r_quat": np.concatenate([table["r_quat"][keep_idx], table["r_quat"][parents]]),
            "r_mat": np.concatenate([table["r_mat"][keep_idx], table["r_mat"][parents]]),
            "t": np.concatenate([table["t"][keep_idx], table["t"][parents]]),
            "o_prime": np.concatenate([table["o_prime"][keep_idx], table["o_prime"][parents]]),
            "t_norm": table["t_norm"],
        }
    # optimizer moments follow the same reindexing
    for key in PARAM_KEYS:
        opt.m[key] = np.concatenate([opt.m[key][keep_idx], np.zeros_like(opt.m[key][parents])])
        opt.v[key] = np.concatenate([opt.v[key][keep_idx], np.zeros_like(opt.v[key][parents])])
    opt.accum_pos = np.zeros(out.num_gaussians)
    opt.accum_count = 0
    return out


def _apply_freeze(grads: dict, mode: str) -> None:
    if mode == "all":
        grads["c_cross"][...] = 0.0
    elif mode == "orientation":
        grads["c_cross"][:, :, 1:4] = 0.0


def train_frames(frame_count: int, stride: int) -> list[int]:
    return list(range(1, frame_count + 1, max(1, stride)))


def holdout_frames(frame_count: int, stride: int) -> list[int]:
    train = set(train_frames(frame_count, stride))
    return [t for t in range(1, frame_count + 1) if t not in train]


def fit(scene: Scene, sup: Supervision, config: FitConfig):
    """Frame-batched optimization loop; returns (scene, trace).

    One frame per iteration, cycling deterministically through the training
    frames; pruning and densification every ``pd_interval`` iterations.
    """
    weights = config.weights()
    options = config.options()
    frames = train_frames(scene.field.frame_count, config.train_stride)
    opt = OptState.for_scene(scene, config)
    trace = []
    for it in range(1, config.iters + 1):
        frame = frames[(it - 1) % len(frames)]
        grads, parts, flagged = grad_state(scene, sup, [frame], weights, options)
        if flagged or not np.isfinite(parts["total"]):
            raise DivergenceError(
                f"non-finite loss or gradients at iteration {it} (primitives {flagged})",
                trace=trace,
            )
        _apply_freeze(grads, config.freeze_c_cross)
        scene = step(scene, opt, grads)
        trace.append(
            {
                "iter": it,
                "total": parts["total"],
                "pho": parts["pho"],
                "cor": parts["cor"],
                "arap": parts["arap"],
                "num_gaussians": scene.num_gaussians,
            }
        )
        if config.pd_interval > 0 and it % config.pd_interval == 0 and it < config.iters:
            scene = prune_and_densify(scene, opt)
    return scene, trace


def save_trace(path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iter", "total", "pho", "cor", "arap", "num_gaussians"])
        for row in trace:
            writer.writerow(
                [
                    row["iter"],
                    "%.17g" % row["total"],
                    "%.17g" % row["pho"],
                    "%.17g" % row["cor"],
                    "%.17g" % row["arap"],
                    row["num_gaussians"],
                ]
            )


def load_trace(path) -> list[dict]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(
                {
                    "iter": int(row["iter"]),
                    "total": float(row["total"]),
                    "pho": float(row["pho"]),
                    "cor": float(row["cor"]),
                    "arap": float(row["arap"]),
                    "num_gaussians": int(row["num_gaussians"]),
                }
            )
    return out
