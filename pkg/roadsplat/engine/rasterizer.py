"""
Differentiable surfel rasterizer.

Forward: every surfel center goes through the world-to-camera transform W,
its rank-2 covariance is projected to Σ' = J W Σ Wᵀ Jᵀ (top-left 2x2) plus a
low-pass floor, and its 2D Gaussian is evaluated on pixels within 3σ.
Fragments are composited front to back per pixel, ordered by camera depth
then surfel index, stopping once transmittance falls below 1e-4. Color gets
the per-camera exposure e^a·c + b; semantic logits and elevation use the
same weights without it.

Pixels are processed in fixed row bands. A pixel's result depends only on
the fragments covering it, so any windowing of the image (bands, BEV chunks,
thread counts) yields bit-identical values.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from config.constants import (
    BEV_ALPHA_EPSILON,
    BEV_CHUNK_PIXELS,
    CULL_FORWARD,
    CULL_LATERAL,
    DET_EPSILON,
    LOW_PASS_FLOOR,
    NEAR_PLANE,
    SPLAT_SIGMA_CUTOFF,
    TRANSMITTANCE_EPSILON,
    VOID_LABEL,
)
from roadsplat.core.config import get_settings
from roadsplat.core.logging import get_logger, log_performance
from roadsplat.engine.geometry import (
    CameraModel,
    Pose,
    bev_camera,
    camera_pose_world,
    orthographic_jacobian,
    perspective_jacobian,
    project_orthographic,
    quaternion_to_matrix,
)
from roadsplat.engine.scene import BevGrid, SurfelScene, bev_grid_for

logger = get_logger(__name__)
settings = get_settings()

CUTOFF_SQ = SPLAT_SIGMA_CUTOFF**2

Window = Tuple[int, int, int, int]  # row0, row1, col0, col1 (half-open)


@dataclass
class ProjectedSurfels:
    """Per-surfel projection state shared by forward, backward and culling"""

    index: np.ndarray  # scene indices
    p_cam: np.ndarray  # (n, 3)
    mean: np.ndarray  # (n, 2) pixel coordinates (u, v)
    depth: np.ndarray  # (n,)
    jacobian: np.ndarray  # (n, 2, 3)
    rotation: np.ndarray  # (n, 3, 3) surfel rotations
    scale: np.ndarray  # (n, 2)
    tmat: np.ndarray  # (n, 2, 3) J Rw
    bmat: np.ndarray  # (n, 2, 2) J Rw R S
    conic: np.ndarray  # (n, 3) inverse covariance (q00, q01, q11)
    extent: np.ndarray  # (n, 2) 3σ half widths in u and v
    opacity: np.ndarray
    world_rotation: np.ndarray  # Rw, world-to-camera rotation
    orthographic: bool = False
    behind: int = 0
    singular: int = 0

    def __len__(self) -> int:
        return len(self.index)

    def subset(self, keep: np.ndarray) -> "ProjectedSurfels":
        return ProjectedSurfels(
            index=self.index[keep],
            p_cam=self.p_cam[keep],
            mean=self.mean[keep],
            depth=self.depth[keep],
            jacobian=self.jacobian[keep],
            rotation=self.rotation[keep],
            scale=self.scale[keep],
            tmat=self.tmat[keep],
            bmat=self.bmat[keep],
            conic=self.conic[keep],
            extent=self.extent[keep],
            opacity=self.opacity[keep],
            world_rotation=self.world_rotation,
            orthographic=self.orthographic,
            behind=self.behind,
            singular=self.singular,
        )

    def pixel_bounds(self, window: Window) -> np.ndarray:
        """(n, 4) inclusive (vmin, vmax, umin, umax) clipped to the window"""
        r0, r1, c0, c1 = window
        u, v = self.mean[:, 0], self.mean[:, 1]
        eu, ev = self.extent[:, 0], self.extent[:, 1]
        return np.stack(
            [
                np.maximum(np.ceil(v - ev), r0),
                np.minimum(np.floor(v + ev), r1 - 1),
                np.maximum(np.ceil(u - eu), c0),
                np.minimum(np.floor(u + eu), c1 - 1),
            ],
            axis=1,
        ).astype(np.int64)


@dataclass
class Fragments:
    """Composited (pixel, surfel) pairs, sorted by pixel then depth"""

    pixel: np.ndarray  # flat index into the window
    local: np.ndarray  # index into ProjectedSurfels
    dx: np.ndarray
    dy: np.ndarray
    g: np.ndarray
    alpha: np.ndarray  # opacity * g
    t_before: np.ndarray

    @property
    def weight(self) -> np.ndarray:
        return self.t_before * self.alpha

    def ranks(self) -> np.ndarray:
        if len(self.pixel) == 0:
            return np.zeros(0, dtype=np.int64)
        starts = np.r_[0, np.flatnonzero(np.diff(self.pixel)) + 1]
        counts = np.diff(np.r_[starts, len(self.pixel)])
        return np.arange(len(self.pixel)) - np.repeat(starts, counts)

    @classmethod
    def empty(cls) -> "Fragments":
        z = np.zeros(0)
        i = np.zeros(0, dtype=np.int64)
        return cls(i, i, z, z, z, z, z)

    @classmethod
    def concatenate(cls, parts: List["Fragments"]) -> "Fragments":
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls.__dataclass_fields__))


@dataclass
class RenderOutput:
    """Rendered layers for one camera window"""

    color: np.ndarray  # (H, W, 3) after exposure
    raw_color: np.ndarray  # (H, W, 3) before exposure
    semantics: np.ndarray  # (H, W, C) composited logits
    alpha: np.ndarray  # (H, W) accumulated alpha
    elevation: np.ndarray  # (H, W) composited world z (not normalized)
    transmittance: np.ndarray  # (H, W) final transmittance
    window: Window
    camera_id: str
    exposure: Tuple[float, float]
    projected: Optional[ProjectedSurfels] = None
    fragments: Optional[Fragments] = None
    stats: Dict[str, int] = field(default_factory=dict)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.alpha.shape


@dataclass
class GradientBuffer:
    """Gradients for every learnable parameter class"""

    z: np.ndarray
    log_scale: np.ndarray
    logit_opacity: np.ndarray
    quaternion: np.ndarray
    color: np.ndarray
    semantics: np.ndarray
    exposure: Dict[str, np.ndarray] = field(default_factory=dict)  # camera id -> (da, db)

    @classmethod
    def zeros(cls, scene: SurfelScene) -> "GradientBuffer":
        n = scene.surfel_count
        return cls(
            z=np.zeros(n),
            log_scale=np.zeros((n, 2)),
            logit_opacity=np.zeros(n),
            quaternion=np.zeros((n, 4)),
            color=np.zeros((n, 3)),
            semantics=np.zeros((n, scene.class_count)),
        )

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {
            "z": self.z,
            "log_scale": self.log_scale,
            "logit_opacity": self.logit_opacity,
            "quaternion": self.quaternion,
            "color": self.color,
            "semantics": self.semantics,
        }


@dataclass
class BevMaps:
    """Stitched BEV layers"""

    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    labels: np.ndarray  # (H, W) uint8, VOID_LABEL where uncovered
    elevation: np.ndarray  # (H, W) meters, NaN where uncovered
    alpha: np.ndarray
    grid: BevGrid


def _world_to_camera_rotation(pose_vehicle: Pose, cam: CameraModel):
    cam_world = camera_pose_world(pose_vehicle, cam)
    rw = cam_world.rotation.T
    tw = -rw @ cam_world.translation
    return rw, tw


def project_surfels(
    scene: SurfelScene, pose_vehicle: Pose, cam: CameraModel, indices: Optional[np.ndarray] = None
) -> ProjectedSurfels:
    """Project surfel centers and covariances; drops surfels behind the near
    plane (perspective) and surfels with a singular 2D covariance"""
    if indices is None:
        indices = np.arange(scene.surfel_count)
    indices = np.asarray(indices, dtype=np.int64)
    rw, tw = _world_to_camera_rotation(pose_vehicle, cam)

    x, y, z = scene.xy[indices, 0], scene.xy[indices, 1], scene.z[indices]
    p_cam = np.stack(
        [rw[k, 0] * x + rw[k, 1] * y + rw[k, 2] * z + tw[k] for k in range(3)], axis=1
    )

    behind = 0
    if not cam.is_orthographic:
        front = p_cam[:, 2] > NEAR_PLANE
        behind = int(np.count_nonzero(~front))
        indices, p_cam = indices[front], p_cam[front]

    n = len(indices)
    if cam.is_orthographic:
        jac = orthographic_jacobian(cam, (n,))
        u, v, depth = project_orthographic(cam, p_cam)
        mean = np.stack([u, v], axis=1)
    else:
        jac = perspective_jacobian(cam, p_cam)
        depth = p_cam[:, 2]
        mean = np.stack(
            [cam.fx * p_cam[:, 0] / depth + cam.cx, cam.fy * p_cam[:, 1] / depth + cam.cy], axis=1
        )

    tmat = np.empty((n, 2, 3))
    for a in range(2):
        for j in range(3):
            tmat[:, a, j] = jac[:, a, 0] * rw[0, j] + jac[:, a, 1] * rw[1, j] + jac[:, a, 2] * rw[2, j]

    rotation = quaternion_to_matrix(scene.quaternion[indices])
    scale = np.exp(scene.log_scale[indices])
    bmat = np.empty((n, 2, 2))
    for a in range(2):
        for b in range(2):
            bmat[:, a, b] = scale[:, b] * (
                tmat[:, a, 0] * rotation[:, 0, b]
                + tmat[:, a, 1] * rotation[:, 1, b]
                + tmat[:, a, 2] * rotation[:, 2, b]
            )

    cov00 = bmat[:, 0, 0] ** 2 + bmat[:, 0, 1] ** 2 + LOW_PASS_FLOOR
    cov01 = bmat[:, 0, 0] * bmat[:, 1, 0] + bmat[:, 0, 1] * bmat[:, 1, 1]
    cov11 = bmat[:, 1, 0] ** 2 + bmat[:, 1, 1] ** 2 + LOW_PASS_FLOOR
    det = cov00 * cov11 - cov01 * cov01
    regular = det > DET_EPSILON
    singular = int(np.count_nonzero(~regular))
    if singular:
        logger.warning("Skipping surfels with singular covariance", extra={"count": singular})

    conic = np.stack([cov11 / det, -cov01 / det, cov00 / det], axis=1)
    extent = SPLAT_SIGMA_CUTOFF * np.sqrt(np.stack([cov00, cov11], axis=1))
    opacity = 1.0 / (1.0 + np.exp(-scene.logit_opacity[indices]))

    projected = ProjectedSurfels(
        index=indices,
        p_cam=p_cam,
        mean=mean,
        depth=depth,
        jacobian=jac,
        rotation=rotation,
        scale=scale,
        tmat=tmat,
        bmat=bmat,
        conic=conic,
        extent=extent,
        opacity=opacity,
        world_rotation=rw,
        orthographic=cam.is_orthographic,
        behind=behind,
        singular=singular,
    )
    return projected.subset(regular) if singular else projected


def cull_frustum(scene: SurfelScene, cam_pose_world: Pose, cam: CameraModel) -> np.ndarray:
    """Surfels inside the ground rectangle in front of a perspective camera:
    +/-20 m along the camera x-axis and 0..40 m along its z-axis, both projected
    onto the world xy-plane"""
    origin = cam_pose_world.translation[:2]
    lateral_axis = cam_pose_world.rotation[:2, 0]
    forward_axis = cam_pose_world.rotation[:2, 2]
    lateral_norm = np.linalg.norm(lateral_axis)
    forward_norm = np.linalg.norm(forward_axis)
    if lateral_norm < 1e-6 or forward_norm < 1e-6:
        # camera axis points straight up or down; the rectangle is undefined
        return np.arange(scene.surfel_count)

    offset = scene.xy - origin
    lateral = offset @ (lateral_axis / lateral_norm)
    forward = offset @ (forward_axis / forward_norm)
    inside = (np.abs(lateral) <= CULL_LATERAL) & (forward >= 0.0) & (forward <= CULL_FORWARD)
    return np.flatnonzero(inside)


def _band_fragments(
    proj: ProjectedSurfels, bounds: np.ndarray, band: Window, order_key: np.ndarray
) -> Tuple[Fragments, np.ndarray, np.ndarray]:
    """Composite one band; returns kept fragments (band-local pixels) and the
    band's final transmittance and per-fragment weights"""
    r0, r1, c0, c1 = band
    width = c1 - c0
    npix = (r1 - r0) * width

    vmin = np.maximum(bounds[:, 0], r0)
    vmax = np.minimum(bounds[:, 1], r1 - 1)
    umin, umax = bounds[:, 2], bounds[:, 3]
    nu = umax - umin + 1
    nv = vmax - vmin + 1
    live = np.flatnonzero((nu > 0) & (nv > 0))
    transmittance = np.ones(npix)
    if len(live) == 0:
        return Fragments.empty(), transmittance, np.zeros(0)

    counts = nu[live] * nv[live]
    local = np.repeat(live, counts)
    offset = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    width_rep = np.repeat(nu[live], counts)
    px = np.repeat(umin[live], counts) + offset % width_rep
    py = np.repeat(vmin[live], counts) + offset // width_rep

    dx = px - proj.mean[local, 0]
    dy = py - proj.mean[local, 1]
    conic = proj.conic[local]
    power = conic[:, 0] * dx * dx + 2.0 * conic[:, 1] * dx * dy + conic[:, 2] * dy * dy
    inside = power <= CUTOFF_SQ
    if not np.any(inside):
        return Fragments.empty(), transmittance, np.zeros(0)
    local, px, py, dx, dy, power = local[inside], px[inside], py[inside], dx[inside], dy[inside], power[inside]

    g = np.exp(-0.5 * power)
    alpha = proj.opacity[local] * g
    pixel = (py - r0) * width + (px - c0)

    order = np.lexsort((order_key[local], proj.depth[local], pixel))
    pixel, local, dx, dy, g, alpha = (a[order] for a in (pixel, local, dx, dy, g, alpha))

    frags = Fragments(pixel, local, dx, dy, g, alpha, np.zeros(len(pixel)))
    ranks = frags.ranks()
    by_rank = np.argsort(ranks, kind="stable")
    rank_bounds = np.searchsorted(ranks[by_rank], np.arange(ranks.max() + 2))

    alive = np.ones(npix, dtype=bool)
    used = np.zeros(len(pixel), dtype=bool)
    for r in range(len(rank_bounds) - 1):
        f = by_rank[rank_bounds[r] : rank_bounds[r + 1]]
        f = f[alive[pixel[f]]]
        if len(f) == 0:
            break
        p = pixel[f]
        before = transmittance[p]
        frags.t_before[f] = before
        used[f] = True
        after = before * (1.0 - alpha[f])
        transmittance[p] = after
        alive[p[after < TRANSMITTANCE_EPSILON]] = False

    kept = Fragments(
        pixel[used], local[used], dx[used], dy[used], g[used], alpha[used], frags.t_before[used]
    )
    return kept, transmittance, kept.weight


def _rasterize_window(
    scene: SurfelScene,
    proj: ProjectedSurfels,
    window: Window,
    exposure: Tuple[float, float],
    camera_id: str,
    threads: int,
    tile_rows: int,
    keep_fragments: bool,
) -> RenderOutput:
    r0, r1, c0, c1 = window
    height, width = r1 - r0, c1 - c0
    classes = scene.class_count
    bounds = proj.pixel_bounds(window)

    bands = [(b, min(b + tile_rows, r1), c0, c1) for b in range(r0, r1, tile_rows)]

    color_src = scene.color[proj.index]
    sem_src = scene.semantics[proj.index]
    z_src = scene.z[proj.index]

    def run(band: Window):
        b0, b1 = band[0], band[1]
        touching = (bounds[:, 0] <= b1 - 1) & (bounds[:, 1] >= b0)
        sub = np.flatnonzero(touching)
        frags, trans, weight = _band_fragments(proj.subset(sub), bounds[sub], band, proj.index[sub])
        frags.local = sub[frags.local]
        npix = (b1 - b0) * width
        raw = np.stack(
            [np.bincount(frags.pixel, weight * color_src[frags.local, k], minlength=npix) for k in range(3)],
            axis=1,
        )
        sem = np.stack(
            [np.bincount(frags.pixel, weight * sem_src[frags.local, k], minlength=npix) for k in range(classes)],
            axis=1,
        ) if classes else np.zeros((npix, 0))
        alpha = np.bincount(frags.pixel, weight, minlength=npix)
        elev = np.bincount(frags.pixel, weight * z_src[frags.local], minlength=npix)
        frags.pixel = frags.pixel + (b0 - r0) * width
        return frags, trans, raw, sem, alpha, elev

    if threads > 1 and len(bands) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, bands))
    else:
        results = [run(band) for band in bands]

    raw = np.concatenate([r[2] for r in results]).reshape(height, width, 3)
    a, b = exposure
    color = np.exp(a) * raw + b
    output = RenderOutput(
        color=color,
        raw_color=raw,
        semantics=np.concatenate([r[3] for r in results]).reshape(height, width, classes),
        alpha=np.concatenate([r[4] for r in results]).reshape(height, width),
        elevation=np.concatenate([r[5] for r in results]).reshape(height, width),
        transmittance=np.concatenate([r[1] for r in results]).reshape(height, width),
        window=window,
        camera_id=camera_id,
        exposure=(float(a), float(b)),
        projected=proj if keep_fragments else None,
        fragments=Fragments.concatenate([r[0] for r in results]) if keep_fragments else None,
        stats={
            "surfels": len(proj),
            "behind": proj.behind,
            "singular": proj.singular,
            "fragments": int(sum(len(r[0].pixel) for r in results)),
        },
    )
    return output


def render(
    scene: SurfelScene,
    cam_pose: Pose,
    cam: CameraModel,
    culled: Optional[np.ndarray] = None,
    *,
    window: Optional[Window] = None,
    threads: Optional[int] = None,
    tile_rows: Optional[int] = None,
    keep_fragments: bool = True,
) -> RenderOutput:
    """Render color, semantics, alpha and elevation for one camera.

    cam_pose is the vehicle pose; the camera sits at cam_pose ∘ cam.extrinsic.
    `culled` restricts the participating surfels (all when None).
    """
    window = window or (0, cam.height, 0, cam.width)
    proj = project_surfels(scene, cam_pose, cam, culled)
    return _rasterize_window(
        scene,
        proj,
        window,
        (cam.exposure_a, cam.exposure_b),
        cam.camera_id,
        threads or 1,
        tile_rows or settings.RENDER_TILE_ROWS,
        keep_fragments,
    )


def render_backward(
    scene: SurfelScene,
    cam_pose: Pose,
    cam: CameraModel,
    output: RenderOutput,
    d_color: np.ndarray,
    d_sem: np.ndarray,
) -> GradientBuffer:
    """Analytic gradients of a loss with respect to every learnable parameter,
    given the loss gradients d_color (H, W, 3) and d_sem (H, W, C) of the
    rendered layers"""
    if output.fragments is None or output.projected is None:
        raise ValueError("render output was produced without fragments")
    proj, frags = output.projected, output.fragments
    grad = GradientBuffer.zeros(scene)
    height, width = output.shape
    classes = scene.class_count
    npix = height * width

    a, _ = output.exposure
    gain = np.exp(a)
    d_color = np.asarray(d_color, dtype=np.float64).reshape(npix, 3)
    d_sem = np.asarray(d_sem, dtype=np.float64).reshape(npix, classes)
    grad.exposure[output.camera_id] = np.array(
        [float(np.sum(d_color * gain * output.raw_color.reshape(npix, 3))), float(np.sum(d_color))]
    )
    if len(frags.pixel) == 0:
        return grad

    d_raw = gain * d_color
    s = frags.local
    p = frags.pixel
    color = scene.color[proj.index][s]
    sem = scene.semantics[proj.index][s]
    weight = frags.weight
    n = len(proj)

    # back to front: behind_* is what the fragments behind k composite to
    d_alpha = np.zeros(len(p))
    behind_color = np.zeros((npix, 3))
    behind_sem = np.zeros((npix, classes))
    ranks = frags.ranks()
    by_rank = np.argsort(ranks, kind="stable")
    rank_bounds = np.searchsorted(ranks[by_rank], np.arange(ranks.max() + 2))
    for r in range(len(rank_bounds) - 2, -1, -1):
        f = by_rank[rank_bounds[r] : rank_bounds[r + 1]]
        pf = p[f]
        bc = behind_color[pf]
        bs = behind_sem[pf]
        d_alpha[f] = frags.t_before[f] * (
            np.sum((color[f] - bc) * d_raw[pf], axis=1) + np.sum((sem[f] - bs) * d_sem[pf], axis=1)
        )
        af = frags.alpha[f][:, None]
        behind_color[pf] = af * color[f] + (1.0 - af) * bc
        behind_sem[pf] = af * sem[f] + (1.0 - af) * bs

    d_color_s = np.stack([np.bincount(s, weight * d_raw[p, k], minlength=n) for k in range(3)], axis=1)
    d_sem_s = np.stack(
        [np.bincount(s, weight * d_sem[p, k], minlength=n) for k in range(classes)], axis=1
    ) if classes else np.zeros((n, 0))

    opacity = proj.opacity
    d_opacity = np.bincount(s, d_alpha * frags.g, minlength=n)
    d_g = d_alpha * opacity[s]
    d_power = -0.5 * frags.g * d_g
    conic = proj.conic
    dx, dy = frags.dx, frags.dy
    q00, q01, q11 = conic[s, 0], conic[s, 1], conic[s, 2]
    d_u = np.bincount(s, -2.0 * d_power * (q00 * dx + q01 * dy), minlength=n)
    d_v = np.bincount(s, -2.0 * d_power * (q01 * dx + q11 * dy), minlength=n)
    g00 = np.bincount(s, d_power * dx * dx, minlength=n)
    g01 = np.bincount(s, d_power * dx * dy, minlength=n)
    g11 = np.bincount(s, d_power * dy * dy, minlength=n)

    # conic = A^-1  =>  dA = -Q G Q
    q00, q01, q11 = conic[:, 0], conic[:, 1], conic[:, 2]
    h00 = g00 * q00 + g01 * q01
    h01 = g00 * q01 + g01 * q11
    h10 = g01 * q00 + g11 * q01
    h11 = g01 * q01 + g11 * q11
    da = np.empty((n, 2, 2))
    da[:, 0, 0] = -(q00 * h00 + q01 * h10)
    da[:, 0, 1] = -(q00 * h01 + q01 * h11)
    da[:, 1, 0] = -(q01 * h00 + q11 * h10)
    da[:, 1, 1] = -(q01 * h01 + q11 * h11)

    # A = B Bᵀ + floor  =>  dB = 2 dA B
    bmat = proj.bmat
    db = 2.0 * np.einsum("nij,njk->nik", da, bmat)

    # B = T M with M = R[:, :2] diag(s)
    m = proj.rotation[:, :, :2] * proj.scale[:, None, :]
    d_t = np.einsum("nab,njb->naj", db, m)
    d_m = np.einsum("naj,nab->njb", proj.tmat, db)
    rw = proj.world_rotation
    d_jac = np.einsum("naj,kj->nak", d_t, rw)

    d_log_scale = proj.scale * np.einsum("njb,njb->nb", proj.rotation[:, :, :2], d_m)
    d_rot = np.zeros((n, 3, 3))
    d_rot[:, :, :2] = d_m * proj.scale[:, None, :]
    d_quat = _quaternion_backward(scene.quaternion[proj.index], d_rot)

    # camera-space position through (u, v) and through J
    d_pcam = np.einsum("nai,na->ni", proj.jacobian, np.stack([d_u, d_v], axis=1))
    if not proj.orthographic:
        x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
        fx = proj.jacobian[:, 0, 0] * z
        fy = proj.jacobian[:, 1, 1] * z
        d_pcam[:, 0] += d_jac[:, 0, 2] * (-fx / z**2)
        d_pcam[:, 1] += d_jac[:, 1, 2] * (-fy / z**2)
        d_pcam[:, 2] += (
            d_jac[:, 0, 0] * (-fx / z**2)
            + d_jac[:, 0, 2] * (2.0 * fx * x / z**3)
            + d_jac[:, 1, 1] * (-fy / z**2)
            + d_jac[:, 1, 2] * (2.0 * fy * y / z**3)
        )
    d_world_z = d_pcam @ rw[:, 2]

    idx = proj.index
    grad.z[idx] = d_world_z
    grad.log_scale[idx] = d_log_scale
    grad.logit_opacity[idx] = d_opacity * opacity * (1.0 - opacity)
    grad.quaternion[idx] = d_quat
    grad.color[idx] = d_color_s
    grad.semantics[idx] = d_sem_s
    return grad


def _quaternion_backward(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Chain dL/dR through R(q / |q|) to the raw wxyz quaternion"""
    norm = np.sqrt(np.sum(q * q, axis=1))
    qn = q / norm[:, None]
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = d_rot
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
        - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    dy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
        + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    dz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
        - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    d_qn = np.stack([dw, dx, dy, dz], axis=1)
    radial = np.sum(d_qn * qn, axis=1, keepdims=True)
    return (d_qn - radial * qn) / norm[:, None]


def render_naive(scene: SurfelScene, cam_pose: Pose, cam: CameraModel) -> Dict[str, np.ndarray]:
    """Reference renderer: a direct per-pixel loop over all projected surfels"""
    proj = project_surfels(scene, cam_pose, cam)
    color = np.zeros((cam.height, cam.width, 3))
    sem = np.zeros((cam.height, cam.width, scene.class_count))
    alpha = np.zeros((cam.height, cam.width))
    for row in range(cam.height):
        for col in range(cam.width):
            dx = col - proj.mean[:, 0]
            dy = row - proj.mean[:, 1]
            power = proj.conic[:, 0] * dx * dx + 2 * proj.conic[:, 1] * dx * dy + proj.conic[:, 2] * dy * dy
            hits = np.flatnonzero(power <= CUTOFF_SQ)
            hits = hits[np.lexsort((proj.index[hits], proj.depth[hits]))]
            transmittance = 1.0
            for k in hits:
                a = proj.opacity[k] * np.exp(-0.5 * power[k])
                w = transmittance * a
                color[row, col] += w * scene.color[proj.index[k]]
                sem[row, col] += w * scene.semantics[proj.index[k]]
                alpha[row, col] += w
                transmittance *= 1.0 - a
                if transmittance < TRANSMITTANCE_EPSILON:
                    break
    color = np.exp(cam.exposure_a) * color + cam.exposure_b
    return {"color": color, "semantics": sem, "alpha": alpha}


def _bev_maps(output: RenderOutput, grid: BevGrid) -> BevMaps:
    covered = output.alpha >= BEV_ALPHA_EPSILON
    labels = np.full(output.alpha.shape, VOID_LABEL, dtype=np.uint8)
    if output.semantics.shape[2]:
        labels[covered] = np.argmax(output.semantics[covered], axis=1).astype(np.uint8)
    elevation = np.full(output.alpha.shape, np.nan)
    elevation[covered] = output.elevation[covered] / output.alpha[covered]
    return BevMaps(
        rgb=np.clip(output.color, 0.0, 1.0),
        labels=labels,
        elevation=elevation,
        alpha=output.alpha,
        grid=grid,
    )


def render_bev(scene: SurfelScene, grid: BevGrid, threads: Optional[int] = None) -> BevMaps:
    """Monolithic orthographic render of the whole grid"""
    pose, cam = bev_camera(grid.origin_x, grid.origin_y, grid.resolution, grid.width, grid.height)
    proj = project_surfels(scene, pose, cam)
    output = _rasterize_window(
        scene, proj, (0, grid.height, 0, grid.width), (0.0, 0.0), cam.camera_id,
        threads or 1, settings.RENDER_TILE_ROWS, keep_fragments=False,
    )
    return _bev_maps(output, grid)


@log_performance(logger)
def render_bev_chunked(
    scene: SurfelScene,
    resolution: float = 0.05,
    chunk: int = BEV_CHUNK_PIXELS,
    grid: Optional[BevGrid] = None,
    threads: Optional[int] = None,
) -> BevMaps:
    """Tile the BEV grid into chunk x chunk windows of one global orthographic
    camera, cull surfels to each window's footprint (3σ apron included) and
    stitch. Equal to render_bev on the same grid."""
    if scene.surfel_count == 0:
        raise ValueError("cannot render an empty scene")
    grid = grid or bev_grid_for(scene, resolution)
    pose, cam = bev_camera(grid.origin_x, grid.origin_y, grid.resolution, grid.width, grid.height)
    proj = project_surfels(scene, pose, cam)
    full = (0, grid.height, 0, grid.width)
    bounds = proj.pixel_bounds(full)

    rgb = np.zeros((grid.height, grid.width, 3))
    sem = np.zeros((grid.height, grid.width, scene.class_count))
    alpha = np.zeros((grid.height, grid.width))
    elev = np.zeros((grid.height, grid.width))
    windows = list(grid.windows(chunk))
    for window in windows:
        r0, r1, c0, c1 = window
        touching = (
            (bounds[:, 0] <= r1 - 1) & (bounds[:, 1] >= r0) & (bounds[:, 2] <= c1 - 1) & (bounds[:, 3] >= c0)
        )
        out = _rasterize_window(
            scene, proj.subset(np.flatnonzero(touching)), window, (0.0, 0.0), cam.camera_id,
            threads or settings.THREADS, settings.RENDER_TILE_ROWS, keep_fragments=False,
        )
        rgb[r0:r1, c0:c1] = out.color
        sem[r0:r1, c0:c1] = out.semantics
        alpha[r0:r1, c0:c1] = out.alpha
        elev[r0:r1, c0:c1] = out.elevation

    logger.info(
        "BEV rendered",
        extra={"chunks": len(windows), "height": grid.height, "width": grid.width},
    )
    stitched = RenderOutput(
        color=rgb, raw_color=rgb, semantics=sem, alpha=alpha, elevation=elev,
        transmittance=1.0 - alpha, window=full, camera_id=cam.camera_id, exposure=(0.0, 0.0),
    )
    return _bev_maps(stitched, grid)
