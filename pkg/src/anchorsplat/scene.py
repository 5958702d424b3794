"""Scene assembly: camera + orientation field + primitives + skinning topology.

Primitive parameters live in struct-of-arrays form for vectorized math; the
``HyperGaussian`` views are assembled on demand for the per-primitive APIs
and for serialization. Each track seeds one primitive at its lifted
reference-frame position (the birth association used by the correspondence
loss); densified children carry no track.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np

from .core_math import Rotation, quat_log
from .deformation import SkinningBinding, blend_tables, compute_skinning_weights
from .errors import ConsistencyError, ParseError
from .hyper_gaussian import (
    EPS_SCALE,
    DUMP_FLOATS,
    DynamicStateMean,
    FactoredCovariance,
    HyperGaussian,
    pack_chol,
    _row_to_gaussian,
    _state_to_row,
)
from .ingestion import Camera, FrameSet, Trajectory
from .orientation_field import (
    OrientationField,
    build_orientation_field,
    interpolate_orientation,
    propagate_orientations,
)

PARAM_KEYS = (
    "mu_p", "scale", "quat", "opacity", "color",
    "st_dp", "st_dscale", "st_drot", "st_t", "st_quat_o",
    "chol", "c_cross",
)


@dataclass
class GaussianParams:
    mu_p: np.ndarray  # (N, 3)
    scale: np.ndarray  # (N, 3)
    quat: np.ndarray  # (N, 4)
    opacity: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    st_dp: np.ndarray  # (N, 3)
    st_dscale: np.ndarray  # (N, 3)
    st_drot: np.ndarray  # (N, 3)
    st_t: np.ndarray  # (N,)
    st_quat_o: np.ndarray  # (N, 4)
    chol: np.ndarray  # (N, 10) packed lower triangle, raw
    c_cross: np.ndarray  # (N, 9, 4)

    @property
    def n(self) -> int:
        return self.mu_p.shape[0]

    def copy(self) -> "GaussianParams":
        return GaussianParams(**{k: getattr(self, k).copy() for k in PARAM_KEYS})

    def take(self, idx) -> "GaussianParams":
        return GaussianParams(**{k: getattr(self, k)[idx].copy() for k in PARAM_KEYS})

    @staticmethod
    def concatenate(a: "GaussianParams", b: "GaussianParams") -> "GaussianParams":
        return GaussianParams(
            **{k: np.concatenate([getattr(a, k), getattr(b, k)]) for k in PARAM_KEYS}
        )


@dataclass
class Scene:
    camera: Camera
    field: OrientationField
    params: GaussianParams
    bindings: list[SkinningBinding]
    ids: np.ndarray  # (N,) stable primitive ids
    track_id: np.ndarray  # (N,) birth track per primitive, -1 if none
    background: np.ndarray = dfield(default_factory=lambda: np.zeros(3))
    next_id: int = 0
    _tables: dict = dfield(default_factory=dict, repr=False)

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=float).reshape(3)
        if self.next_id <= (int(self.ids.max()) if self.ids.size else -1):
            self.next_id = int(self.ids.max()) + 1 if self.ids.size else 0

    @property
    def num_gaussians(self) -> int:
        return self.params.n

    def gaussian(self, j: int) -> HyperGaussian:
        p = self.params
        state = DynamicStateMean(
            p.st_dp[j], p.st_dscale[j], p.st_drot[j], p.st_t[j], Rotation(p.st_quat_o[j])
        )
        cov = FactoredCovariance(p.chol[j], p.c_cross[j])
        return HyperGaussian(
            mu_p=p.mu_p[j].copy(),
            scale=np.maximum(p.scale[j], EPS_SCALE),
            rotation=Rotation(p.quat[j]),
            opacity=float(np.clip(p.opacity[j], 0.0, 1.0)),
            color=p.color[j].copy(),
            state=state,
            cov=cov,
        )

    def gaussians(self) -> list[HyperGaussian]:
        return [self.gaussian(j) for j in range(self.num_gaussians)]

    def tables(self, frames=None) -> dict:
        """Per-frame blended deformation tables, cached until topology changes."""
        frames = list(range(1, self.field.frame_count + 1)) if frames is None else list(frames)
        missing = [f for f in frames if f not in self._tables]
        if missing:
            self._tables.update(blend_tables(self.field, self.bindings, missing))
        return {f: self._tables[f] for f in frames}

    def invalidate_tables(self) -> None:
        self._tables.clear()

    def copy(self) -> "Scene":
        return Scene(
            camera=self.camera,
            field=self.field,
            params=self.params.copy(),
            bindings=list(self.bindings),
            ids=self.ids.copy(),
            track_id=self.track_id.copy(),
            background=self.background.copy(),
            next_id=self.next_id,
        )

    # -- flat parameter vector (finite-difference checks) -------------------

    def param_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self.params, k).reshape(-1) for k in PARAM_KEYS])

    def set_param_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        offset = 0
        for k in PARAM_KEYS:
            arr = getattr(self.params, k)
            size = arr.size
            arr[...] = vec[offset : offset + size].reshape(arr.shape)
            offset += size
        if offset != vec.size:
            raise ConsistencyError("parameter vector size mismatch")


def initialize_scene(camera: Camera, trajectories: list[Trajectory], frames: FrameSet,
                     window: int = 5, k_neighbors: int = 8, background=(0.0, 0.0, 0.0),
                     init_opacity: float = 0.6) -> Scene:
    """Build the orientation field and seed one primitive per track at its
    reference-frame position, colored from the first frame."""
    field = propagate_orientations(build_orientation_field(trajectories, window, k_neighbors))
    n = len(trajectories)
    pos = np.stack([tr.positions[0] for tr in trajectories])

    # scale from local track spacing
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
    d2_sorted = np.sort(d2, axis=1)
    third = np.sqrt(d2_sorted[:, min(3, n - 1)])
    scale0 = np.clip(0.5 * third, 0.02, 0.3)

    uv, _ = camera.project(1, pos)
    h, w = frames.images.shape[1:3]
    px = np.clip(np.rint(uv[:, 0]).astype(int), 0, w - 1)
    py = np.clip(np.rint(uv[:, 1]).astype(int), 0, h - 1)
    colors = frames.images[0][py, px]

    bindings = [compute_skinning_weights(pos[i], field, k_neighbors) for i in range(n)]
    st_quat_o = np.stack(
        [
            interpolate_orientation(field, pos[i], 1, bindings[i].anchor_ids, bindings[i].weights).q
            for i in range(n)
        ]
    )

    params = GaussianParams(
        mu_p=pos.copy(),
        scale=np.repeat(scale0[:, None], 3, axis=1),
        quat=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity=np.full(n, float(init_opacity)),
        color=colors.copy(),
        st_dp=np.zeros((n, 3)),
        st_dscale=np.zeros((n, 3)),
        st_drot=np.zeros((n, 3)),
        st_t=np.zeros(n),
        st_quat_o=st_quat_o,
        chol=np.tile(pack_chol(0.3 * np.eye(4)), (n, 1)),
        c_cross=np.zeros((n, 9, 4)),
    )
    return Scene(
        camera=camera,
        field=field,
        params=params,
        bindings=bindings,
        ids=np.arange(n),
        track_id=np.arange(n),
        background=background,
        next_id=n,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def params_to_rows(params: GaussianParams) -> np.ndarray:
    rows = np.zeros((params.n, DUMP_FLOATS))
    mu_o_tangent = quat_log(params.st_quat_o)
    rows[:, 0:3] = params.mu_p
    rows[:, 3:6] = params.scale
    rows[:, 6:10] = params.quat
    rows[:, 10] = params.opacity
    rows[:, 11:14] = params.color
    rows[:, 14:17] = params.st_dp
    rows[:, 17:20] = params.st_dscale
    rows[:, 20:23] = params.st_drot
    rows[:, 23] = params.st_t
    rows[:, 24:27] = mu_o_tangent
    rows[:, 27:37] = params.chol
    rows[:, 37:73] = params.c_cross.reshape(params.n, 36)
    return rows


def save_scene_primitives(path, scene: Scene) -> None:
    from .hyper_gaussian import DUMP_MAGIC

    rows = params_to_rows(scene.params)
    with open(path, "wb") as f:
        f.write(f"{DUMP_MAGIC} {scene.num_gaussians}\n".encode("ascii"))
        f.write(rows.astype("<f4").tobytes())


def load_scene_params(path):
    """Read a primitive dump back into struct-of-arrays form."""
    from .core_math import quat_exp
    from .hyper_gaussian import DUMP_MAGIC

    with open(path, "rb") as f:
        header = f.readline().decode("ascii").strip().split()
        if len(header) != 2 or header[0] != DUMP_MAGIC:
            raise ParseError(f"bad primitive dump header: {header}", path=path)
        count = int(header[1])
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != count * DUMP_FLOATS:
        raise ParseError("primitive dump size mismatch", path=path)
    rows = data.reshape(count, DUMP_FLOATS).astype(float)
    return GaussianParams(
        mu_p=rows[:, 0:3].copy(),
        scale=np.maximum(rows[:, 3:6], EPS_SCALE),
        quat=rows[:, 6:10] / np.linalg.norm(rows[:, 6:10], axis=1, keepdims=True),
        opacity=np.clip(rows[:, 10], 0.0, 1.0),
        color=rows[:, 11:14].copy(),
        st_dp=rows[:, 14:17].copy(),
        st_dscale=rows[:, 17:20].copy(),
        st_drot=rows[:, 20:23].copy(),
        st_t=rows[:, 23].copy(),
        st_quat_o=quat_exp(rows[:, 24:27]),
        chol=rows[:, 27:37].copy(),
        c_cross=rows[:, 37:73].reshape(count, 9, 4).copy(),
    )


def save_assoc(path, scene: Scene) -> None:
    """Per-primitive id and birth-track association."""
    with open(path, "w") as f:
        for pid, tid in zip(scene.ids, scene.track_id):
            f.write(f"{int(pid)} {int(tid)}\n")


def load_assoc(path):
    ids, tids = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError("expected 'id track_id'", path=path, line=lineno)
            ids.append(int(parts[0]))
            tids.append(int(parts[1]))
    return np.array(ids, dtype=int), np.array(tids, dtype=int)


def scene_from_files(camera: Camera, field: OrientationField, params: GaussianParams,
                     background=(0.0, 0.0, 0.0), ids=None, track_id=None,
                     k_neighbors: int | None = None) -> Scene:
    """Reassemble a scene from loaded pieces, recomputing bindings from the
    (deterministic) reference-frame geometry."""
    n = params.n
    k = field.k_neighbors if k_neighbors is None else k_neighbors
    bindings = [compute_skinning_weights(params.mu_p[i], field, k) for i in range(n)]
    return Scene(
        camera=camera,
        field=field,
        params=params,
        bindings=bindings,
        ids=np.arange(n) if ids is None else ids,
        track_id=np.full(n, -1, dtype=int) if track_id is None else track_id,
        background=background,
    )
