"""Procedural face rendering kernels.

Two backends compute the exact same per-pixel formula: a numba-compiled
loop (default) and a vectorized numpy path. Selection is via the
``VFSWAP_NUMBA`` environment variable ("0" forces the numpy path). The
formula uses only +,-,*,/ and polynomial smoothsteps so both backends
produce identical IEEE-754 results; output is additionally quantized to
the 8-bit pixel grid, which is also the on-disk representation.
"""

import math
import os

import numpy as np

# Identity parameter vector layout (float64):
#   0..2  skin rgb
#   3,4   face ellipse half-axes (ax, ay), in normalized coords
#   5     eye horizontal offset from face center
#   6     eye vertical offset above face center
#   7     eye radius
#   8     eye shade (grayscale)
#   9     mouth half-width
#   10    mouth vertical offset below face center
#   11..13 mouth rgb
N_ID_PARAMS = 14

BG_RGB = (0.20, 0.26, 0.33)
DOT_RGB = (0.88, 0.08, 0.10)
DOT_RADIUS = 0.035
POSE_SHIFT = 0.15
LIGHT_GAIN = 0.25
FACE_EDGE = 0.15
EYE_EDGE = 0.4
MOUTH_EDGE = 0.3
MOUTH_HALF_HEIGHT = 0.024
MOUTH_CURVE = 0.09
BROW_DY = 0.055
BROW_HALF_WIDTH = 0.055
BROW_HALF_HEIGHT = 0.012
BROW_TILT = 0.05
DOT_DY = 0.22


def _use_numba() -> bool:
    if os.environ.get("VFSWAP_NUMBA", "1") == "0":
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def render_frame_numpy(params, pose, lighting, expression, marker, size):
    """Vectorized reference path. Returns (H,W,3 float32 in [-1,1], H,W uint8 mask)."""
    H, W = size
    v = (np.arange(H, dtype=np.float64) / (H - 1.0))[:, None]
    u = (np.arange(W, dtype=np.float64) / (W - 1.0))[None, :]
    u = np.broadcast_to(u, (H, W))
    v = np.broadcast_to(v, (H, W))

    cx = 0.5 + POSE_SHIFT * pose
    cy = 0.5
    ax, ay = params[3], params[4]

    def smoothstep(t):
        t = np.minimum(np.maximum(t, 0.0), 1.0)
        return t * t * (3.0 - 2.0 * t)

    d_face = ((u - cx) / ax) ** 2 + ((v - cy) / ay) ** 2
    s_face = smoothstep((1.0 - d_face) / FACE_EDGE)

    eye_r = params[7]
    s_eye = np.zeros((H, W), dtype=np.float64)
    for side in (-1.0, 1.0):
        ex = cx + side * params[5]
        ey = cy - params[6]
        d_eye = ((u - ex) / eye_r) ** 2 + ((v - ey) / (0.7 * eye_r)) ** 2
        s_eye = s_eye + smoothstep((1.0 - d_eye) / EYE_EDGE)
    s_eye = np.minimum(s_eye, 1.0) * s_face

    s_brow = np.zeros((H, W), dtype=np.float64)
    for side in (-1.0, 1.0):
        bx = cx + side * params[5]
        by = cy - params[6] - BROW_DY
        du = (u - bx) / BROW_HALF_WIDTH
        vb = by - BROW_TILT * expression * side * du
        s_bw = smoothstep((1.0 - du * du) / MOUTH_EDGE)
        dv2 = ((v - vb) / BROW_HALF_HEIGHT) ** 2
        s_brow = s_brow + s_bw * smoothstep((1.0 - dv2) / 0.5)
    s_brow = np.minimum(s_brow, 1.0) * s_face

    mw, mdy = params[9], params[10]
    w2 = ((u - cx) / mw) ** 2
    vm = cy + mdy + MOUTH_CURVE * expression * (w2 - 0.5)
    s_mw = smoothstep((1.0 - w2) / MOUTH_EDGE)
    mh = MOUTH_HALF_HEIGHT * (1.0 + 0.65 * expression)
    dv2 = ((v - vm) / mh) ** 2
    s_mouth = s_mw * smoothstep((1.0 - dv2) / 0.5) * s_face

    d_dot = ((u - cx) ** 2 + (v - (cy - DOT_DY)) ** 2) / (DOT_RADIUS * DOT_RADIUS)
    s_dot = smoothstep((1.0 - d_dot) / 0.5) * s_face * marker

    m_light = 1.0 - LIGHT_GAIN * lighting + lighting * u

    out = np.empty((H, W, 3), dtype=np.float32)
    for ch in range(3):
        col = np.full((H, W), BG_RGB[ch], dtype=np.float64)
        col = col + s_face * (params[ch] - col)
        col = col + s_eye * (params[8] - col)
        col = col + s_brow * (params[8] - col)
        col = col + s_mouth * (params[11 + ch] - col)
        col = col + s_dot * (DOT_RGB[ch] - col)
        col = col * m_light
        col = np.minimum(np.maximum(col, 0.0), 1.0)
        q = np.floor(col * 255.0 + 0.5)
        out[:, :, ch] = (q / 127.5 - 1.0).astype(np.float32)

    mask = (d_face <= 1.0).astype(np.uint8)
    return out, mask


def _render_frame_loop(params, pose, lighting, expression, marker, out, mask):
    H, W = mask.shape
    cx = 0.5 + POSE_SHIFT * pose
    cy = 0.5
    ax = params[3]
    ay = params[4]
    eye_r = params[7]
    mw = params[9]
    mdy = params[10]
    for y in range(H):
        v = y / (H - 1.0)
        for x in range(W):
            u = x / (W - 1.0)

            d_face = ((u - cx) / ax) ** 2 + ((v - cy) / ay) ** 2
            t = (1.0 - d_face) / FACE_EDGE
            t = min(max(t, 0.0), 1.0)
            s_face = t * t * (3.0 - 2.0 * t)

            s_eye = 0.0
            for k in range(2):
                side = -1.0 if k == 0 else 1.0
                ex = cx + side * params[5]
                ey = cy - params[6]
                d_eye = ((u - ex) / eye_r) ** 2 + ((v - ey) / (0.7 * eye_r)) ** 2
                t = (1.0 - d_eye) / EYE_EDGE
                t = min(max(t, 0.0), 1.0)
                s_eye = s_eye + t * t * (3.0 - 2.0 * t)
            s_eye = min(s_eye, 1.0) * s_face

            s_brow = 0.0
            for k in range(2):
                side = -1.0 if k == 0 else 1.0
                bx = cx + side * params[5]
                by = cy - params[6] - BROW_DY
                du = (u - bx) / BROW_HALF_WIDTH
                vb = by - BROW_TILT * expression * side * du
                t = (1.0 - du * du) / MOUTH_EDGE
                t = min(max(t, 0.0), 1.0)
                s_bw = t * t * (3.0 - 2.0 * t)
                dv2 = ((v - vb) / BROW_HALF_HEIGHT) ** 2
                t = (1.0 - dv2) / 0.5
                t = min(max(t, 0.0), 1.0)
                s_brow = s_brow + s_bw * (t * t * (3.0 - 2.0 * t))
            s_brow = min(s_brow, 1.0) * s_face

            w2 = ((u - cx) / mw) ** 2
            vm = cy + mdy + MOUTH_CURVE * expression * (w2 - 0.5)
            t = (1.0 - w2) / MOUTH_EDGE
            t = min(max(t, 0.0), 1.0)
            s_mw = t * t * (3.0 - 2.0 * t)
            mh = MOUTH_HALF_HEIGHT * (1.0 + 0.65 * expression)
            dv2 = ((v - vm) / mh) ** 2
            t = (1.0 - dv2) / 0.5
            t = min(max(t, 0.0), 1.0)
            s_mouth = s_mw * (t * t * (3.0 - 2.0 * t)) * s_face

            d_dot = ((u - cx) ** 2 + (v - (cy - DOT_DY)) ** 2) / (DOT_RADIUS * DOT_RADIUS)
            t = (1.0 - d_dot) / 0.5
            t = min(max(t, 0.0), 1.0)
            s_dot = (t * t * (3.0 - 2.0 * t)) * s_face * marker

            m_light = 1.0 - LIGHT_GAIN * lighting + lighting * u

            for ch in range(3):
                if ch == 0:
                    bg = 0.20
                    dot = 0.88
                elif ch == 1:
                    bg = 0.26
                    dot = 0.08
                else:
                    bg = 0.33
                    dot = 0.10
                col = bg
                col = col + s_face * (params[ch] - col)
                col = col + s_eye * (params[8] - col)
                col = col + s_brow * (params[8] - col)
                col = col + s_mouth * (params[11 + ch] - col)
                col = col + s_dot * (dot - col)
                col = col * m_light
                col = min(max(col, 0.0), 1.0)
                q = math.floor(col * 255.0 + 0.5)
                out[y, x, ch] = q / 127.5 - 1.0

            mask[y, x] = 1 if d_face <= 1.0 else 0


_numba_kernel = None


def _get_numba_kernel():
    global _numba_kernel
    if _numba_kernel is None:
        from numba import njit

        _numba_kernel = njit(cache=True)(_render_frame_loop)
    return _numba_kernel


def render_frame(params, pose, lighting, expression, marker, size):
    """Render one frame from an identity parameter vector and scalar factors.

    Returns (frame, mask): frame is H,W,3 float32 on the 8-bit grid of
    [-1,1]; mask is the binary face-region mask (H,W uint8).
    """
    params = np.asarray(params, dtype=np.float64)
    if _use_numba():
        H, W = size
        out = np.empty((H, W, 3), dtype=np.float32)
        mask = np.empty((H, W), dtype=np.uint8)
        kernel = _get_numba_kernel()
        kernel(params, float(pose), float(lighting), float(expression),
               float(marker), out, mask)
        return out, mask
    return render_frame_numpy(params, float(pose), float(lighting),
                              float(expression), float(marker), size)
