"""Z-buffer rasterization and orthographic texture back-projection.

Depth is exact ray-plane distance along the camera axis (perspective
correct); colors interpolate affinely in screen space, which is all the
flat-shaded meshes here need.
"""

from __future__ import annotations

import numpy as np

from .cameras import Camera, ViewImage, ortho_faces
from .meshes import TriMesh, vertex_normals

DEFAULT_VERTEX_GRAY = 0.7
FRAME_TOLERANCE = 1e-3
VISIBILITY_PIXELS = 1.5


def rasterize(mesh: TriMesh, camera: Camera, background=None) -> ViewImage:
    """Render mesh into an RGB + depth view.

    background is None (black), an RGB triple, or a full (H, W, 3) image.
    Uncovered pixels keep the background color and depth 0.  Surfaces
    outside [near, far] are not drawn.  Vertex colors default to gray.
    """
    h, w = camera.height, camera.width
    rgb = _background_image(background, h, w)
    depth = np.zeros((h, w), dtype=np.float64)
    if mesh.is_empty:
        return ViewImage(camera=camera, rgb=rgb, depth=depth)
    colors = mesh.vertex_colors if mesh.vertex_colors is not None else np.full(
        (len(mesh.vertices), 3), DEFAULT_VERTEX_GRAY)
    pc = camera.to_camera(mesh.vertices)
    tri_p = pc[mesh.triangles]
    tri_c = np.asarray(colors, dtype=np.float64)[mesh.triangles]
    if camera.kind == "perspective":
        # geometric clip at z=near so projection never divides by z <= 0
        needs = (tri_p[:, :, 2] < camera.near).any(axis=1)
        pieces_p, pieces_c = [tri_p[~needs]], [tri_c[~needs]]
        for t in np.nonzero(needs)[0]:
            for cp, cc in _clip_near(tri_p[t], tri_c[t], camera.near):
                pieces_p.append(cp[None])
                pieces_c.append(cc[None])
        tri_p = np.concatenate(pieces_p)
        tri_c = np.concatenate(pieces_c)
    pix, z, col = _fragments(tri_p, tri_c, camera)
    if len(pix):
        zflat = np.full(h * w, np.inf)
        np.minimum.at(zflat, pix, z)
        win = z == zflat[pix]
        rgb_flat = rgb.reshape(-1, 3)
        rgb_flat[pix[win]] = col[win]
        depth_flat = depth.ravel()
        depth_flat[pix[win]] = z[win]
    return ViewImage(camera=camera, rgb=np.clip(rgb, 0.0, 1.0), depth=depth)


def _background_image(background, h: int, w: int) -> np.ndarray:
    if background is None:
        return np.zeros((h, w, 3), dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    if bg.shape == (3,):
        return np.broadcast_to(bg, (h, w, 3)).copy()
    if bg.shape == (h, w, 3):
        return bg.copy()
    raise ValueError(f"background must be an RGB triple or ({h}, {w}, 3) image")


def _clip_near(p: np.ndarray, c: np.ndarray, near: float) -> list:
    """Sutherland-Hodgman clip of one camera-space triangle against z >= near."""
    inside = p[:, 2] >= near
    if inside.all():
        return [(p, c)]
    if not inside.any():
        return []
    out_p, out_c = [], []
    for i in range(3):
        j = (i + 1) % 3
        if inside[i]:
            out_p.append(p[i])
            out_c.append(c[i])
        if inside[i] != inside[j]:
            t = (near - p[i, 2]) / (p[j, 2] - p[i, 2])
            out_p.append(p[i] + t * (p[j] - p[i]))
            out_c.append(c[i] + t * (c[j] - c[i]))
    pieces = []
    for k in range(1, len(out_p) - 1):
        pieces.append((np.stack([out_p[0], out_p[k], out_p[k + 1]]),
                       np.stack([out_c[0], out_c[k], out_c[k + 1]])))
    return pieces


def _fragments(tri_p: np.ndarray, tri_c: np.ndarray, camera: Camera
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All covered (pixel_id, depth, rgb) fragments of the given camera-space
    triangles.  Triangles are bucketed by bounding-box size so each bucket
    rasterizes as one broadcast batch."""
    w_img, h_img = camera.width, camera.height
    persp = camera.kind == "perspective"
    if persp:
        fx, fy, cx, cy = camera.intrinsics
        u = fx * tri_p[:, :, 0] / tri_p[:, :, 2] + cx
        v = fy * tri_p[:, :, 1] / tri_p[:, :, 2] + cy
    else:
        we, he = camera.intrinsics
        u = (tri_p[:, :, 0] / we + 0.5) * w_img - 0.5
        v = (tri_p[:, :, 1] / he + 0.5) * h_img - 0.5
    iu0 = np.maximum(np.ceil(u.min(axis=1)).astype(np.int64), 0)
    iu1 = np.minimum(np.floor(u.max(axis=1)).astype(np.int64), w_img - 1)
    iv0 = np.maximum(np.ceil(v.min(axis=1)).astype(np.int64), 0)
    iv1 = np.minimum(np.floor(v.max(axis=1)).astype(np.int64), h_img - 1)
    det = ((u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0])
           - (v[:, 1] - v[:, 0]) * (u[:, 2] - u[:, 0]))
    live = (iu0 <= iu1) & (iv0 <= iv1) & (np.abs(det) > 1e-12)
    bw = iu1 - iu0 + 1
    bh = iv1 - iv0 + 1

    all_pix, all_z, all_col = [], [], []
    done = ~live
    size = 2
    max_size = 1
    while max_size < max(w_img, h_img):
        max_size *= 2
    while size <= max_size:
        sel_all = np.nonzero(~done & (bw <= size) & (bh <= size))[0]
        done[sel_all] = True
        chunk = max(1, (1 << 22) // (size * size))
        for s0 in range(0, len(sel_all), chunk):
            sel = sel_all[s0:s0 + chunk]
            if not len(sel):
                continue
            res = _raster_bucket(sel, size, u, v, det, iu0, iu1, iv0, iv1,
                                 tri_p, tri_c, camera, persp)
            if res is not None:
                all_pix.append(res[0])
                all_z.append(res[1])
                all_col.append(res[2])
        size *= 2
    if not all_pix:
        empty = np.zeros(0)
        return empty.astype(np.int64), empty, np.zeros((0, 3))
    return (np.concatenate(all_pix), np.concatenate(all_z),
            np.concatenate(all_col))


def _raster_bucket(sel, size, u, v, det, iu0, iu1, iv0, iv1, tri_p, tri_c,
                   camera: Camera, persp: bool):
    us = iu0[sel][:, None, None] + np.arange(size)[None, None, :]
    vs = iv0[sel][:, None, None] + np.arange(size)[None, :, None]
    inb = (us <= iu1[sel][:, None, None]) & (vs <= iv1[sel][:, None, None])
    uf = us.astype(np.float64)
    vf = vs.astype(np.float64)
    u0, u1, u2 = (u[sel, k][:, None, None] for k in range(3))
    v0, v1, v2 = (v[sel, k][:, None, None] for k in range(3))
    d = det[sel][:, None, None]
    b0 = ((u1 - uf) * (v2 - vf) - (v1 - vf) * (u2 - uf)) / d
    b1 = ((u2 - uf) * (v0 - vf) - (v2 - vf) * (u0 - uf)) / d
    b2 = 1.0 - b0 - b1
    inside = inb & (b0 >= 0.0) & (b1 >= 0.0) & (b2 >= 0.0)
    if not inside.any():
        return None
    p = tri_p[sel]
    if persp:
        fx, fy, cx, cy = camera.intrinsics
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        ndotp = (n * p[:, 0]).sum(axis=1)[:, None, None]
        denom = (n[:, 0, None, None] * (uf - cx) / fx
                 + n[:, 1, None, None] * (vf - cy) / fy
                 + n[:, 2, None, None])
        ok = np.abs(denom) > 1e-12
        z = np.where(ok, ndotp / np.where(ok, denom, 1.0), np.inf)
        inside &= ok
    else:
        z0, z1, z2 = (p[:, k, 2][:, None, None] for k in range(3))
        z = b0 * z0 + b1 * z1 + b2 * z2
    inside &= (z >= camera.near - 1e-6) & (z <= camera.far + 1e-6)
    if not inside.any():
        return None
    c = tri_c[sel]
    col = (b0[..., None] * c[:, None, None, 0, :]
           + b1[..., None] * c[:, None, None, 1, :]
           + b2[..., None] * c[:, None, None, 2, :])
    pix = vs * camera.width + us
    keep = inside
    return (pix[keep], np.clip(z[keep], camera.near, camera.far),
            np.clip(col[keep], 0.0, 1.0))


def render_ortho_views(mesh: TriMesh, size: int = 64
                       ) -> tuple[list[ViewImage], list[ViewImage]]:
    """RGB and depth views of a normalized mesh from the four side faces."""
    rgb_views, depth_views = [], []
    for i, cam in enumerate(ortho_faces(size)):
        view = rasterize(mesh, cam)
        rgb_views.append(ViewImage(camera=cam, rgb=view.rgb, face_index=i))
        depth_views.append(ViewImage(camera=cam, depth=view.depth, face_index=i))
    return rgb_views, depth_views


def bilinear_sample(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) at fractional pixel coordinates, clamped at borders."""
    h, w = image.shape[:2]
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    return ((1 - fv) * ((1 - fu) * image[v0, u0] + fu * image[v0, u1])
            + fv * ((1 - fu) * image[v1, u0] + fu * image[v1, u1]))


def backproject_texture(mesh: TriMesh, rgb_views: list[ViewImage],
                        depth_views: list[ViewImage]) -> TriMesh:
    """Color mesh vertices from the four orthographic side views.

    Each vertex blends the views in which it is visible, weighted by the
    absolute cosine between its normal and the view axis.  Visibility means
    the vertex's projected depth agrees with the stored depth map within
    1.5 pixels' worth of scene units.  Vertices visible nowhere inherit
    colors from mesh neighbors by iterative averaging.
    """
    if mesh.is_empty:
        raise ValueError("cannot texture an empty mesh")
    lo, hi = mesh.bounds()
    if lo.min() < -FRAME_TOLERANCE or hi.max() > 1.0 + FRAME_TOLERANCE:
        raise ValueError("mesh is not in the normalized unit-cube frame")
    if len(rgb_views) != len(depth_views):
        raise ValueError("need matching rgb and depth view lists")
    normals = vertex_normals(mesh)
    n_verts = len(mesh.vertices)
    accum = np.zeros((n_verts, 3))
    wsum = np.zeros(n_verts)
    for rgb_view, depth_view in zip(rgb_views, depth_views):
        if rgb_view.rgb is None or depth_view.depth is None:
            raise ValueError("rgb views need rgb, depth views need depth")
        cam = depth_view.camera
        axis = -cam.forward
        weight = np.abs(normals @ axis)
        u, v, z = cam.project(mesh.vertices)
        iu = np.rint(u).astype(np.int64)
        iv = np.rint(v).astype(np.int64)
        ok = (iu >= 0) & (iu < cam.width) & (iv >= 0) & (iv < cam.height)
        stored = np.zeros(n_verts)
        stored[ok] = depth_view.depth[iv[ok], iu[ok]]
        delta = VISIBILITY_PIXELS * cam.intrinsics[0] / cam.width
        visible = ok & (stored > 0.0) & (np.abs(z - stored) <= delta)
        if visible.any():
            sampled = bilinear_sample(rgb_view.rgb, u[visible], v[visible])
            accum[visible] += weight[visible, None] * sampled
            wsum[visible] += weight[visible]
    colors = np.full((n_verts, 3), 0.5)
    seen = wsum > 1e-9
    colors[seen] = accum[seen] / wsum[seen, None]
    colors = _diffuse_holes(mesh, colors, seen)
    return mesh.with_colors(np.clip(colors, 0.0, 1.0))


def _diffuse_holes(mesh: TriMesh, colors: np.ndarray, seen: np.ndarray) -> np.ndarray:
    """Fill unseen vertices by averaging colored neighbors until stable."""
    if seen.all() or not seen.any():
        return colors
    tris = mesh.triangles
    src = np.concatenate([tris[:, 0], tris[:, 1], tris[:, 2],
                          tris[:, 1], tris[:, 2], tris[:, 0]])
    dst = np.concatenate([tris[:, 1], tris[:, 2], tris[:, 0],
                          tris[:, 0], tris[:, 1], tris[:, 2]])
    colored = seen.copy()
    for _ in range(len(mesh.vertices)):
        if colored.all():
            break
        live = colored[src] & ~colored[dst]
        if not live.any():
            break
        contrib = np.zeros_like(colors)
        count = np.zeros(len(colors))
        np.add.at(contrib, dst[live], colors[src[live]])
        np.add.at(count, dst[live], 1.0)
        newly = ~colored & (count > 0)
        colors[newly] = contrib[newly] / count[newly, None]
        colored |= newly
    return colors
