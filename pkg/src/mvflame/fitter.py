"""Analysis-by-synthesis fitter: staged first-order minimization of the
multi-view loss suite over model parameters, cameras, lighting, and albedo.

There is no learned encoder anywhere: initialization comes from landmarks
(closed-form camera fit against the zero-parameter model) and every update is
a plain adaptive-moment gradient step.  Two linearizations keep the problem
smooth despite the hard rasterizer:

* coverage freeze - pixel/triangle assignments, landmark inclusion flags and
  covisible masks are rebuilt once per iteration and held constant inside it;
* fixed-flow surrogate - the flow field is estimated once per iteration, then
  each covisible rendered surface point is pulled toward its flow-displaced
  target through the differentiable project(decode(.)) chain.

Camera rotations are optimized as axis-angle deltas against the initial
rotation, which keeps them far from the axis-angle singularity at pi.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from mvflame import covis, losses
from mvflame.assets import FlameAssets
from mvflame.camera import Camera, estimate_initial_camera, project_rt, project_rt_vjp
from mvflame.decoder import (FlameParams, decode_with_cache, decode_vjp,
                             embed_landmarks, embed_landmarks_vjp, rodrigues)
from mvflame.flow import estimate_flow_lk, mean_flow_magnitude
from mvflame.losses import LossWeights, landmarks_in_mask
from mvflame.renderer import SHLighting, rasterize, rasterize_uv, render
from mvflame.texture import (UVTexture, apply_face_mask, build_uv_correspondence,
                             extract_texture, face_mask_for, fuse_views,
                             inpaint_bilinear, view_cosine_weights)

ALL_GROUPS = ("beta", "psi", "theta_root", "theta_joints",
              "cameras", "lighting", "albedo")


@dataclass(frozen=True)
class StageConfig:
    name: str
    terms: tuple           # subset of losses.TERM_NAMES
    iterations: int
    step_size: float = 1e-3
    groups: tuple = ALL_GROUPS

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step size must be > 0")


def default_stages(iters_a=200, iters_b=300, iters_c=200, step=1e-3):
    """The standard 3-stage schedule.

    A: rigid alignment (cameras + global rotation) on landmarks only, so the
       coverage-frozen renderer is never asked to produce silhouette moves.
    B: shape, expression, articulated joints, lighting and albedo join, still
       on landmark-family terms plus regularization.
    C: everything, with the multi-view flow term switched on.
    """
    return (
        StageConfig("A", ("singlelmk",), iters_a, step,
                    ("cameras", "theta_root")),
        StageConfig("B", ("singlelmk", "eye", "lip", "reg"), iters_b, step,
                    ("cameras", "theta_root", "beta", "psi", "theta_joints",
                     "lighting", "albedo")),
        StageConfig("C", ("multiop", "singlelmk", "eye", "lip", "reg"),
                    iters_c, step, ALL_GROUPS),
    )


@dataclass(frozen=True)
class FitConfig:
    stages: tuple = field(default_factory=default_stages)
    weights: LossWeights = field(default_factory=LossWeights)
    resolution: int = None          # caller-side image rescale target
    flow_estimator: str = "lk"      # "lk" | "oracle" (tests) | callable via fit()
    seed: int = 0
    joint_freeze: tuple = ()        # joint indices never optimized
    texture_resolution: int = 64
    texture_refresh: int = 50
    lmk_inclusion: str = "face-mask"  # or "all" (strict-literal reading)
    bbox_margin: float = 0.05
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def to_json_dict(self):
        return {
            "stages": [{"name": s.name, "terms": list(s.terms),
                        "iterations": s.iterations, "step_size": s.step_size,
                        "groups": list(s.groups)} for s in self.stages],
            "weights": self.weights.as_dict(),
            "resolution": self.resolution,
            "flow_estimator": self.flow_estimator,
            "seed": self.seed,
            "joint_freeze": list(self.joint_freeze),
            "texture_resolution": self.texture_resolution,
            "texture_refresh": self.texture_refresh,
            "lmk_inclusion": self.lmk_inclusion,
            "bbox_margin": self.bbox_margin,
        }

    @classmethod
    def from_json_dict(cls, d):
        stages = tuple(
            StageConfig(s["name"], tuple(s["terms"]), int(s["iterations"]),
                        float(s.get("step_size", 1e-3)),
                        tuple(s.get("groups", ALL_GROUPS)))
            for s in d.get("stages", [])
        ) or default_stages()
        return cls(
            stages=stages,
            weights=LossWeights(**d.get("weights", {})),
            resolution=d.get("resolution"),
            flow_estimator=d.get("flow_estimator", "lk"),
            seed=int(d.get("seed", 0)),
            joint_freeze=tuple(d.get("joint_freeze", ())),
            texture_resolution=int(d.get("texture_resolution", 64)),
            texture_refresh=int(d.get("texture_refresh", 50)),
            lmk_inclusion=d.get("lmk_inclusion", "face-mask"),
            bbox_margin=float(d.get("bbox_margin", 0.05)),
        )


@dataclass
class ViewObservation:
    """One input view: linear image, 68 2D landmarks, optional known camera."""

    image: np.ndarray
    landmarks: np.ndarray
    camera: Camera = None
    name: str = ""

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


@dataclass
class FitState:
    """All optimized quantities, flat-vector convertible."""

    beta: np.ndarray         # (n_beta,)
    psi: np.ndarray          # (n_psi,)
    theta: np.ndarray        # (K, 3)
    cam_base: np.ndarray     # (n_views, 3, 3) frozen initial rotations
    cam_rvec: np.ndarray     # (n_views, 3) axis-angle deltas
    cam_t: np.ndarray        # (n_views, 3)
    intrinsics: np.ndarray   # (n_views, 4) fx, fy, cx, cy (frozen)
    image_sizes: np.ndarray  # (n_views, 2) width, height (frozen)
    lighting: np.ndarray     # (n_views, 9, 3)
    albedo: np.ndarray       # (T, T, 3) offset from mid-gray

    def copy(self):
        return FitState(
            beta=self.beta.copy(), psi=self.psi.copy(), theta=self.theta.copy(),
            cam_base=self.cam_base, cam_rvec=self.cam_rvec.copy(),
            cam_t=self.cam_t.copy(), intrinsics=self.intrinsics,
            image_sizes=self.image_sizes, lighting=self.lighting.copy(),
            albedo=self.albedo.copy(),
        )

    @property
    def n_views(self):
        return len(self.cam_rvec)

    def params(self) -> FlameParams:
        return FlameParams(beta=self.beta, theta=self.theta, psi=self.psi)

    def camera(self, v) -> Camera:
        R = self.cam_base[v] @ rodrigues(self.cam_rvec[v])
        fx, fy, cx, cy = self.intrinsics[v]
        w, h = self.image_sizes[v]
        return Camera(rotation=R, translation=self.cam_t[v], fx=fx, fy=fy,
                      cx=cx, cy=cy, width=int(w), height=int(h))


@dataclass
class GradState:
    """Gradient accumulator mirroring FitState's optimizable arrays."""

    beta: np.ndarray
    psi: np.ndarray
    theta: np.ndarray
    cam_rvec: np.ndarray
    cam_t: np.ndarray
    lighting: np.ndarray
    albedo: np.ndarray

    @classmethod
    def zeros_like(cls, state: FitState):
        return cls(
            beta=np.zeros_like(state.beta),
            psi=np.zeros_like(state.psi),
            theta=np.zeros_like(state.theta),
            cam_rvec=np.zeros_like(state.cam_rvec),
            cam_t=np.zeros_like(state.cam_t),
            lighting=np.zeros_like(state.lighting),
            albedo=np.zeros_like(state.albedo),
        )


def _segments(state: FitState, n_joints):
    sizes = {
        "beta": state.beta.size,
        "psi": state.psi.size,
        "theta": state.theta.size,
        "cam_rvec": state.cam_rvec.size,
        "cam_t": state.cam_t.size,
        "lighting": state.lighting.size,
        "albedo": state.albedo.size,
    }
    seg = {}
    start = 0
    for name, size in sizes.items():
        seg[name] = (start, start + size)
        start += size
    return seg, start


def state_to_vector(state: FitState):
    return np.concatenate([
        state.beta.ravel(), state.psi.ravel(), state.theta.ravel(),
        state.cam_rvec.ravel(), state.cam_t.ravel(),
        state.lighting.ravel(), state.albedo.ravel(),
    ])


def vector_to_state(vec, template: FitState) -> FitState:
    seg, total = _segments(template, len(template.theta))
    if vec.size != total:
        raise ValueError("state vector size mismatch")
    out = template.copy()

    def take(name, like):
        a, b = seg[name]
        return vec[a:b].reshape(like.shape)

    out.beta = take("beta", template.beta)
    out.psi = take("psi", template.psi)
    out.theta = take("theta", template.theta)
    out.cam_rvec = take("cam_rvec", template.cam_rvec)
    out.cam_t = take("cam_t", template.cam_t)
    out.lighting = take("lighting", template.lighting)
    out.albedo = take("albedo", template.albedo)
    return out


def grad_to_vector(grad: GradState):
    return np.concatenate([
        grad.beta.ravel(), grad.psi.ravel(), grad.theta.ravel(),
        grad.cam_rvec.ravel(), grad.cam_t.ravel(),
        grad.lighting.ravel(), grad.albedo.ravel(),
    ])


def group_mask(state: FitState, groups, joint_freeze=()):
    """Boolean mask over the flat state vector selecting unfrozen groups."""
    seg, total = _segments(state, len(state.theta))
    mask = np.zeros(total, dtype=bool)
    K = len(state.theta)

    def on(name):
        a, b = seg[name]
        mask[a:b] = True

    if "beta" in groups:
        on("beta")
    if "psi" in groups:
        on("psi")
    a, _b = seg["theta"]
    for k in range(K):
        in_group = ("theta_root" in groups) if k == 0 else ("theta_joints" in groups)
        if in_group and k not in joint_freeze:
            mask[a + 3 * k:a + 3 * k + 3] = True
    if "cameras" in groups:
        on("cam_rvec")
        on("cam_t")
    if "lighting" in groups:
        on("lighting")
    if "albedo" in groups:
        on("albedo")
    return mask


# ---------------------------------------------------------------------------
# iteration context: everything the current iteration freezes

@dataclass
class PairData:
    """Fixed-flow surrogate correspondences for one ordered view pair."""

    view_b: int
    tri: np.ndarray        # (N, 3) vertex indices of the surface triangles
    bary: np.ndarray       # (N, 3) frozen barycentric weights
    target: np.ndarray     # (N, 2) pixel targets for the projected points
    eq6_value: float       # reported flow-loss value for this pair
    mc_count: int


@dataclass
class IterationContext:
    include: list                 # per view: (68,) bool landmark inclusion
    framebuffers: list
    pairs: list = field(default_factory=list)   # PairData for ordered pairs
    n_pairs: int = 0
    multiop_value: float = 0.0    # reported Eq.-style flow loss (mean over pairs)
    mc_counts: dict = field(default_factory=dict)


class FitProblem:
    """Binds assets, observations and config; evaluates losses and gradients."""

    def __init__(self, views, assets: FlameAssets, config: FitConfig,
                 flow_estimator=None):
        if not views:
            raise ValueError("need at least one view")
        self.views = views
        self.assets = assets
        self.config = config
        self.flow_counter = 0
        if flow_estimator is not None:
            self._estimator = flow_estimator
        elif config.flow_estimator == "lk":
            self._estimator = None  # built lazily per call
        else:
            raise ValueError(f"unknown flow estimator {config.flow_estimator!r}")
        self.textures = None  # per-view UVTexture, refreshed on schedule
        self._uv_region = face_mask_for(assets, config.texture_resolution)

    # -- initialization ----------------------------------------------------

    def init_state(self) -> FitState:
        assets = self.assets
        zero_mesh, _ = decode_with_cache(assets, FlameParams.zeros(assets))
        lmk3d = embed_landmarks(zero_mesh, assets.lmk_faces, assets.lmk_bary)
        n = len(self.views)
        cam_base = np.zeros((n, 3, 3))
        cam_t = np.zeros((n, 3))
        intr = np.zeros((n, 4))
        sizes = np.zeros((n, 2))
        for v, view in enumerate(self.views):
            if view.camera is not None:
                cam = view.camera
            else:
                cam, _rmse = estimate_initial_camera(
                    view.landmarks, lmk3d, (view.width, view.height)
                )
            cam_base[v] = cam.rotation
            cam_t[v] = cam.translation
            intr[v] = (cam.fx, cam.fy, cam.cx, cam.cy)
            sizes[v] = (cam.width, cam.height)
        T = self.config.texture_resolution
        lighting = np.tile(SHLighting.gray_dc(1.0).coeffs[None], (n, 1, 1))
        return FitState(
            beta=np.zeros(assets.n_beta), psi=np.zeros(assets.n_psi),
            theta=np.zeros((assets.n_joints, 3)), cam_base=cam_base,
            cam_rvec=np.zeros((n, 3)), cam_t=cam_t, intrinsics=intr,
            image_sizes=sizes, lighting=lighting, albedo=np.zeros((T, T, 3)),
        )

    # -- frozen per-iteration data ------------------------------------------

    def _flow(self, image_a, image_b, fb_current=None, view=None):
        self.flow_counter += 1
        if self._estimator is None:
            return estimate_flow_lk(image_a, image_b)
        if getattr(self._estimator, "wants_framebuffers", False):
            return self._estimator(image_a, image_b, fb_current=fb_current,
                                   view=view)
        return self._estimator(image_a, image_b)

    def refresh_textures(self, state: FitState, framebuffers, mesh):
        """Re-extract and inpaint the per-view textures at the current geometry."""
        T = self.config.texture_resolution
        uv_fb = rasterize_uv(mesh, T)
        textures = []
        for v, view in enumerate(self.views):
            corr = build_uv_correspondence(framebuffers[v], mesh, state.camera(v),
                                           resolution=T, uv_buffer=uv_fb)
            tex = extract_texture(view.image, corr)
            tex = inpaint_bilinear(tex, region=self._uv_region, max_iters=500)
            textures.append(tex)
        self.textures = textures

    def build_context(self, state: FitState, terms,
                      refresh_textures=False) -> IterationContext:
        mesh, _ = decode_with_cache(self.assets, state.params())
        fbs = []
        for v, view in enumerate(self.views):
            fbs.append(rasterize(mesh, state.camera(v), view.width, view.height))
        include = []
        for v, view in enumerate(self.views):
            if self.config.lmk_inclusion == "all":
                include.append(np.ones(len(view.landmarks), dtype=bool))
            else:
                include.append(landmarks_in_mask(view.landmarks,
                                                 covis.face_mask(fbs[v])))
        ctx = IterationContext(include=include, framebuffers=fbs)

        want_flow = ("multiop" in terms and len(self.views) >= 2
                     and self.config.weights.multiop > 0.0)
        if want_flow and (refresh_textures or self.textures is None):
            self.refresh_textures(state, fbs, mesh)
        if not want_flow:
            return ctx

        lmk3d = embed_landmarks(mesh, self.assets.lmk_faces, self.assets.lmk_bary)
        n = len(self.views)
        pair_values = []
        for a in range(n):
            for b in range(n):
                if a == b:
                    continue
                pd = self._build_pair(state, mesh, lmk3d, fbs, a, b)
                ctx.pairs.append(pd)
                pair_values.append(pd.eq6_value)
                ctx.mc_counts[(a, b)] = pd.mc_count
        ctx.n_pairs = len(pair_values)
        ctx.multiop_value = float(np.mean(pair_values)) if pair_values else 0.0
        return ctx

    def _build_pair(self, state, mesh, lmk3d, fbs, a, b) -> PairData:
        """Covisible mask, cross-render, flow, and frozen correspondences."""
        view_b = self.views[b]
        fb_b = fbs[b]
        covis_idx = covis.covisible_landmarks(fbs[a], fb_b, mesh,
                                              self.assets.lmk_faces,
                                              self.assets.lmk_bary)
        empty = PairData(view_b=b, tri=np.zeros((0, 3), np.int64),
                         bary=np.zeros((0, 3)), target=np.zeros((0, 2)),
                         eq6_value=0.0, mc_count=0)
        if covis_idx.size == 0:
            return empty
        pix_b, z_b, _ = project_rt(state.cam_rvec[b], state.cam_t[b],
                                   state.intrinsics[b], lmk3d,
                                   base_rotation=state.cam_base[b])
        mb = covis.landmark_bbox_mask(pix_b[covis_idx],
                                      (view_b.width, view_b.height),
                                      margin=self.config.bbox_margin)
        mc = covis.covisible_mask(mb, covis.face_mask(fb_b))
        mouth = self.assets.mouth_polygon
        if mouth.size >= 3:
            mc, _ok = covis.mouth_exclusion(mc, view_b.landmarks[mouth])
        if not mc.data.any():
            return empty

        cross = render(mesh, fb_b, state.camera(b), self.textures[a].data)
        m3 = mc.data[:, :, None].astype(np.float64)
        flow = self._flow(view_b.image * m3, cross * m3, fb_current=fb_b, view=b)
        eq6_value, _cnt = mean_flow_magnitude(flow, mc.data)

        anchor = getattr(self._estimator, "anchor", "first") \
            if self._estimator is not None else "first"
        sel = mc.data & flow.valid
        ys, xs = np.nonzero(sel)
        if ys.size == 0:
            return PairData(view_b=b, tri=empty.tri, bary=empty.bary,
                            target=empty.target, eq6_value=eq6_value,
                            mc_count=int(mc.data.sum()))
        f = np.stack([flow.u[ys, xs], flow.v[ys, xs]], axis=1)
        centers = np.stack([xs + 0.5, ys + 0.5], axis=1)
        if anchor == "render":
            qx, qy = xs, ys
            target = centers - f
        else:
            # flow anchored at the real image: the matched render pixel is
            # center + f; snap to the nearest covered pixel.
            q = centers + f
            qx = np.floor(q[:, 0]).astype(np.int64)
            qy = np.floor(q[:, 1]).astype(np.int64)
            inb = ((qx >= 0) & (qx < view_b.width)
                   & (qy >= 0) & (qy < view_b.height))
            qx, qy, f = qx[inb], qy[inb], f[inb]
            target = np.stack([qx + 0.5, qy + 0.5], axis=1) - f
        covered = fb_b.triangle_id[qy, qx] >= 0
        qx, qy, target = qx[covered], qy[covered], target[covered]
        if qx.size == 0:
            return PairData(view_b=b, tri=empty.tri, bary=empty.bary,
                            target=empty.target, eq6_value=eq6_value,
                            mc_count=int(mc.data.sum()))
        tid = fb_b.triangle_id[qy, qx]
        return PairData(
            view_b=b,
            tri=self.assets.faces[tid],
            bary=fb_b.barycentric[qy, qx],
            target=target,
            eq6_value=eq6_value,
            mc_count=int(mc.data.sum()),
        )

    # -- loss evaluation -----------------------------------------------------

    def evaluate(self, state: FitState, terms, ctx: IterationContext,
                 weights: LossWeights = None, with_grad=True):
        """Values (unweighted) and, optionally, weight-scaled gradients.

        The reported multiop value is the literal masked-flow magnitude from
        the context; its gradient is the fixed-flow surrogate's.
        """
        if weights is None:
            weights = self.config.weights
        assets = self.assets
        mesh, dcache = decode_with_cache(assets, state.params())
        lmk3d = embed_landmarks(mesh, assets.lmk_faces, assets.lmk_bary)
        n_views = len(self.views)

        values = {}
        per_view = {}
        grad = GradState.zeros_like(state) if with_grad else None
        d_vertices = np.zeros_like(mesh.vertices)
        d_lmk3d = np.zeros_like(lmk3d)
        proj = []
        caches = []
        d_pix = []
        for v in range(n_views):
            pix, _z, pc = project_rt(state.cam_rvec[v], state.cam_t[v],
                                     state.intrinsics[v], lmk3d,
                                     base_rotation=state.cam_base[v])
            proj.append(pix)
            caches.append(pc)
            d_pix.append(np.zeros_like(pix))

        if "singlelmk" in terms:
            total = 0.0
            view_vals = []
            for v, view in enumerate(self.views):
                inc = ctx.include[v]
                n_inc = int(inc.sum())
                if n_inc == 0:
                    view_vals.append(0.0)
                    continue
                r = proj[v][inc] - view.landmarks[inc]
                value_v = float(np.abs(r).sum() / n_inc)
                view_vals.append(value_v)
                total += value_v
                if with_grad:
                    d = np.zeros_like(proj[v])
                    d[inc] = np.sign(r) / n_inc
                    d_pix[v] += (weights.singlelmk / n_views) * d
            values["singlelmk"] = total / n_views
            per_view["singlelmk"] = view_vals

        for term, pair_arr, weight in (
            ("eye", assets.eye_pairs, weights.eye),
            ("lip", assets.lip_pairs, weights.lip),
        ):
            if term not in terms:
                continue
            total = 0.0
            view_vals = []
            for v, view in enumerate(self.views):
                pairs = pair_arr
                if len(pairs) == 0:
                    view_vals.append(0.0)
                    continue
                d_obs = view.landmarks[pairs[:, 0]] - view.landmarks[pairs[:, 1]]
                d_prj = proj[v][pairs[:, 0]] - proj[v][pairs[:, 1]]
                r = d_prj - d_obs
                value_v = float(np.abs(r).sum() / len(pairs))
                view_vals.append(value_v)
                total += value_v
                if with_grad:
                    d = np.zeros_like(proj[v])
                    s = np.sign(r) / len(pairs)
                    np.add.at(d, pairs[:, 0], s)
                    np.add.at(d, pairs[:, 1], -s)
                    d_pix[v] += (weight / n_views) * d
            values[term] = total / n_views
            per_view[term] = view_vals

        if "reg" in terms:
            values["reg"] = losses.reg_loss(state.beta, state.psi, state.albedo)
            if with_grad:
                for arr, g in ((state.beta, grad.beta), (state.psi, grad.psi),
                               (state.albedo, grad.albedo)):
                    g += weights.reg * arr / losses.smoothed_norm(arr)

        if "multiop" in terms:
            values["multiop"] = ctx.multiop_value
            surrogate = 0.0
            if ctx.n_pairs:
                for pd in ctx.pairs:
                    if len(pd.tri) == 0:
                        continue
                    X = np.einsum("nc,ncj->nj", pd.bary,
                                  mesh.vertices[pd.tri])
                    b = pd.view_b
                    pix, _z, pc = project_rt(state.cam_rvec[b], state.cam_t[b],
                                             state.intrinsics[b], X,
                                             base_rotation=state.cam_base[b])
                    rho = pix - pd.target
                    surrogate += 0.5 * np.sum(rho**2) / len(pd.tri) / ctx.n_pairs
                    if with_grad:
                        dp = (weights.multiop / len(pd.tri) / ctx.n_pairs) * rho
                        dX, drv, dt = project_rt_vjp(state.cam_rvec[b], pc, dp)
                        grad.cam_rvec[b] += drv
                        grad.cam_t[b] += dt
                        contrib = np.einsum("nc,nj->ncj", pd.bary, dX)
                        np.add.at(d_vertices, pd.tri.ravel(),
                                  contrib.reshape(-1, 3))
            values["multiop_surrogate"] = surrogate

        values["_per_view"] = per_view

        if with_grad:
            for v in range(n_views):
                if not d_pix[v].any():
                    continue
                dl, drv, dt = project_rt_vjp(state.cam_rvec[v], caches[v], d_pix[v])
                d_lmk3d += dl
                grad.cam_rvec[v] += drv
                grad.cam_t[v] += dt
            embed_landmarks_vjp(mesh, assets.lmk_faces, assets.lmk_bary,
                                d_lmk3d, d_vertices)
            d_beta, d_psi, d_theta = decode_vjp(assets, dcache, d_vertices)
            grad.beta += d_beta
            grad.psi += d_psi
            grad.theta += d_theta
        return values, grad

    def term_value(self, state: FitState, term, ctx: IterationContext):
        """Differentiable scalar for one term at the frozen context.

        For 'multiop' this is the fixed-flow surrogate (the quantity whose
        gradient the fitter follows), not the reported flow magnitude.
        """
        values, _ = self.evaluate(state, (term,), ctx, with_grad=False)
        if term == "multiop":
            return values["multiop_surrogate"]
        return values[term]

    def term_gradient(self, state: FitState, term, ctx: IterationContext):
        """Unit-weight analytic gradient of one term (flat vector)."""
        unit = LossWeights(multiop=1.0, singlelmk=1.0, eye=1.0, lip=1.0, reg=1.0)
        _values, grad = self.evaluate(state, (term,), ctx, weights=unit,
                                      with_grad=True)
        return grad_to_vector(grad)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Standard adaptive-moment estimation over a flat vector."""

    def __init__(self, size, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x, g):
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * g
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g
        mhat = self.m / (1.0 - self.b1**self.t)
        vhat = self.v / (1.0 - self.b2**self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _clamp_axis_angles(state: FitState, limit=np.pi):
    for arr in (state.theta, state.cam_rvec):
        norms = np.linalg.norm(arr, axis=-1)
        over = norms > limit
        if over.any():
            arr[over] *= (limit / norms[over])[:, None]


def absorb_root_into_cameras(state: FitState, assets: FlameAssets):
    """Re-express the root rotation through the per-view cameras (exactly).

    The root joint's transform premultiplies every skinning chain, so it is a
    rigid motion of the whole posed mesh about the root joint; with free
    cameras it is pure gauge.  Zeroing it here keeps the recovered model in
    the canonical frame without changing any reprojection.
    """
    from mvflame.decoder import regress_joints, rotation_to_axis_angle, shaped_template

    r = state.theta[0]
    if np.linalg.norm(r) < 1e-12:
        return state
    R = rodrigues(r)
    j0 = regress_joints(assets, shaped_template(assets, state.beta, state.psi))[0]
    shift = j0 - R @ j0
    for v in range(state.n_views):
        R_full = state.cam_base[v] @ rodrigues(state.cam_rvec[v])
        state.cam_t[v] = state.cam_t[v] + R_full @ shift
        state.cam_rvec[v] = rotation_to_axis_angle(
            rodrigues(state.cam_rvec[v]) @ R
        )
    state.theta[0] = 0.0
    return state


# ---------------------------------------------------------------------------
# public operations

@dataclass
class FitResult:
    params: FlameParams
    cameras: list
    lightings: list
    albedo: np.ndarray
    texture: UVTexture
    trace: list
    wall_time: float
    state: FitState
    config: FitConfig

    def trace_jsonl(self):
        return "\n".join(json.dumps(entry) for entry in self.trace) + "\n"


def init_fit(views, assets: FlameAssets, config: FitConfig = None):
    """Landmark-based initial state: zero parameters, per-view camera fits."""
    config = config or FitConfig()
    return FitProblem(views, assets, config).init_state()


def gradient(problem: FitProblem, state: FitState, terms,
             groups=ALL_GROUPS):
    """Weighted loss gradient over the unfrozen parameter groups."""
    ctx = problem.build_context(state, terms)
    _values, grad = problem.evaluate(state, terms, ctx, with_grad=True)
    vec = grad_to_vector(grad)
    mask = group_mask(state, groups, problem.config.joint_freeze)
    vec[~mask] = 0.0
    if not np.isfinite(vec).all():
        bad = _first_bad_group(vec, state)
        raise FloatingPointError(f"non-finite gradient in parameter group {bad}")
    return vec


def _first_bad_group(vec, state):
    seg, _ = _segments(state, len(state.theta))
    for name, (a, b) in seg.items():
        if not np.isfinite(vec[a:b]).all():
            return name
    return "unknown"


def fit(views, assets: FlameAssets, config: FitConfig = None,
        flow_estimator=None) -> FitResult:
    """Run the staged fit; non-convergence is reported via the trace, not raised."""
    config = config or FitConfig()
    t0 = time.perf_counter()
    problem = FitProblem(views, assets, config, flow_estimator=flow_estimator)
    state = problem.init_state()
    trace = []

    full_terms = ("multiop", "singlelmk", "eye", "lip", "reg") \
        if len(views) > 1 and config.weights.multiop > 0 \
        else ("singlelmk", "eye", "lip", "reg")

    def log_full(tag, state):
        ctx = problem.build_context(state, full_terms, refresh_textures=True)
        vals, _ = problem.evaluate(state, full_terms, ctx, with_grad=False)
        total, _report = losses.total_loss(
            {k: v for k, v in vals.items() if k in losses.TERM_NAMES},
            config.weights,
        )
        trace.append({
            "stage": tag, "iter": 0, "total": total,
            "terms": {k: float(vals.get(k, 0.0)) for k in losses.TERM_NAMES},
            "per_view": vals.get("_per_view", {}),
            "covisible": {f"{a}-{b}": c for (a, b), c in ctx.mc_counts.items()},
        })

    log_full("init", state)

    for stage in config.stages:
        mask = group_mask(state, stage.groups, config.joint_freeze)
        adam = Adam(mask.size, lr=stage.step_size, betas=config.adam_betas,
                    eps=config.adam_eps)
        for it in range(stage.iterations):
            refresh = ("multiop" in stage.terms
                       and it % max(config.texture_refresh, 1) == 0)
            ctx = problem.build_context(state, stage.terms,
                                        refresh_textures=refresh)
            vals, grad = problem.evaluate(state, stage.terms, ctx, with_grad=True)
            total, report = losses.total_loss(
                {k: v for k, v in vals.items() if k in losses.TERM_NAMES},
                config.weights,
            )
            report.covisible_counts = ctx.mc_counts
            report.per_view = vals.get("_per_view", {})
            trace.append({
                "stage": stage.name, "iter": it, "total": total,
                "terms": report.to_json_dict()["terms"],
                "per_view": report.per_view,
                "covisible": {f"{a}-{b}": c for (a, b), c in ctx.mc_counts.items()},
            })
            g = grad_to_vector(grad)
            g[~mask] = 0.0
            if not np.isfinite(g).all():
                raise FloatingPointError(
                    f"non-finite gradient in group {_first_bad_group(g, state)}"
                )
            x = adam.step(state_to_vector(state), g)
            state = vector_to_state(x, state)
            _clamp_axis_angles(state)
        if "cameras" in stage.groups:
            state = absorb_root_into_cameras(state, assets)

    # Final artifacts: fresh textures at the final geometry, cosine-fused.
    mesh, _ = decode_with_cache(assets, state.params())
    fbs = [rasterize(mesh, state.camera(v), w.width, w.height)
           for v, w in enumerate(views)]
    problem.refresh_textures(state, fbs, mesh)
    uv_fb = rasterize_uv(mesh, config.texture_resolution)
    weights_uv = [view_cosine_weights(uv_fb, state.camera(v))
                  for v in range(len(views))]
    fused = fuse_views(problem.textures, weights_uv)
    fused = apply_face_mask(fused, problem._uv_region)

    log_full("final", state)

    return FitResult(
        params=state.params(),
        cameras=[state.camera(v) for v in range(len(views))],
        lightings=[SHLighting(state.lighting[v]) for v in range(len(views))],
        albedo=state.albedo.copy(),
        texture=fused,
        trace=trace,
        wall_time=time.perf_counter() - t0,
        state=state,
        config=config,
    )
