"""Pure-Python/numpy implementations of the hot kernels.

Behaviour is identical to ``_ckernels``; these are used when the compiled
extension is unavailable or ``TELESTAGE_PURE_PYTHON=1`` is set.
"""

import numpy as np

from .errors import CorruptStreamError, TruncatedStreamError

QOI_OP_INDEX = 0x00
QOI_OP_DIFF6 = 0x40
QOI_OP_RUN = 0x80
QOI_OP_DIFF14 = 0xC0
QOI_LITERAL = 0xFF


def _hash(v):
    return ((v * 2654435761) & 0xFFFF) >> 10


def qoi16_encode_chunks(pixels):
    """Encode a flat uint16 sequence into the QOI-16 chunk stream."""
    out = bytearray()
    index = [0] * 64
    prev = 0
    run = 0
    for v in np.asarray(pixels, dtype=np.uint16).tolist():
        if v == prev:
            run += 1
            if run == 64:
                out.append(QOI_OP_RUN | 63)
                run = 0
            continue  # prev and index[h(prev)] already hold v
        if run:
            out.append(QOI_OP_RUN | (run - 1))
            run = 0
        h = _hash(v)
        if index[h] == v:
            out.append(QOI_OP_INDEX | h)
        else:
            d = ((v - prev + 32768) & 0xFFFF) - 32768
            if -32 <= d <= 31:
                out.append(QOI_OP_DIFF6 | (d + 32))
            elif -8192 <= d <= 8190:
                b = d + 8192
                out.append(QOI_OP_DIFF14 | (b >> 8))
                out.append(b & 0xFF)
            else:
                out += bytes((0xFF, 0xFF, v >> 8, v & 0xFF))
        index[h] = v
        prev = v
    if run:
        out.append(QOI_OP_RUN | (run - 1))
    return bytes(out)


def qoi16_decode_chunks(data, pos, n_pixels):
    """Decode ``n_pixels`` values starting at ``data[pos]``.

    Returns ``(pixels uint16 array, end_pos)``.
    """
    data = bytes(data)
    end = len(data)
    out = [0] * n_pixels
    index = [0] * 64
    prev = 0
    px = 0
    while px < n_pixels:
        if pos >= end:
            raise TruncatedStreamError(f"stream ended after {px} of {n_pixels} pixels")
        b0 = data[pos]
        pos += 1
        tag = b0 & 0xC0
        if tag == QOI_OP_RUN:
            r = (b0 & 0x3F) + 1
            if r > n_pixels - px:
                raise CorruptStreamError("run overflows raster")
            for i in range(px, px + r):
                out[i] = prev
            px += r
            continue
        if tag == QOI_OP_INDEX:
            v = index[b0]
        elif tag == QOI_OP_DIFF6:
            v = (prev + (b0 & 0x3F) - 32) & 0xFFFF
        else:
            if pos >= end:
                raise TruncatedStreamError("stream ended inside a two-byte chunk")
            b1 = data[pos]
            pos += 1
            if b0 == 0xFF and b1 == 0xFF:
                if pos + 2 > end:
                    raise TruncatedStreamError("stream ended inside a literal")
                v = (data[pos] << 8) | data[pos + 1]
                pos += 2
            else:
                v = (prev + (((b0 & 0x3F) << 8) | b1) - 8192) & 0xFFFF
        out[px] = v
        px += 1
        index[_hash(v)] = v
        prev = v
    return np.array(out, dtype=np.uint16), pos


def _affine(M, pts):
    # same operation order as the compiled loop, so both backends agree bitwise
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    out = np.empty_like(pts)
    for i in range(3):
        out[:, i] = M[i, 0] * x + M[i, 1] * y + M[i, 2] * z + M[i, 3]
    return out


def splat_unit(depth, rgb, unit_id, src_k, src_to_dst, dst_k, dst_size, bias_dot, s, buf):
    """Splat one unit's depth raster into a virtual z-buffer.

    ``src_k``/``dst_k`` are ``(fx, fy, cx, cy)``; ``src_to_dst`` is the 3x4
    transform from source camera to destination camera coordinates and
    ``src_to_world`` (``buf.world``) the 3x4 source-to-world transform.
    ``bias_dot`` holds ``v . i`` per destination pixel (ignored when s == 0).
    A candidate replaces the buffer entry iff its key ``z - s * (v . i)`` is
    smaller, or equal with a lower unit id.
    """
    depth = np.asarray(depth)
    h, w = depth.shape
    dw, dh = dst_size
    rows, cols = np.nonzero((depth != 0) & (depth != 0xFFFF))
    z = depth[rows, cols] / 1000.0
    fx, fy, cx, cy = src_k
    local = np.empty((z.size, 3))
    local[:, 0] = (cols - cx) * z / fx
    local[:, 1] = (rows - cy) * z / fy
    local[:, 2] = z
    M = np.asarray(src_to_dst)
    cam = _affine(M, local)
    zc = cam[:, 2]
    dfx, dfy, dcx, dcy = dst_k
    with np.errstate(divide="ignore", invalid="ignore"):
        u = dfx * cam[:, 0] / zc + dcx
        v = dfy * cam[:, 1] / zc + dcy
    keep = (zc > 0) & (u >= -0.5) & (u < dw - 0.5) & (v >= -0.5) & (v < dh - 0.5)
    pix = (np.floor(v[keep] + 0.5).astype(np.int64) * dw
           + np.floor(u[keep] + 0.5).astype(np.int64))
    zc = zc[keep]
    src = rows[keep] * w + cols[keep]
    key = zc - s * np.asarray(bias_dot, dtype=np.float64).ravel()[pix] if s else zc.copy()
    buf.coverage[pix] |= np.uint64(1) << np.uint64(unit_id)
    if pix.size == 0:
        return
    order = np.lexsort((np.arange(pix.size), key, pix))
    sp = pix[order]
    first = np.ones(sp.size, dtype=bool)
    first[1:] = sp[1:] != sp[:-1]
    win = order[first]
    p = pix[win]
    k = key[win]
    cur = buf.key[p]
    cur_unit = buf.unit[p]
    take = (k < cur) | ((k == cur) & ((cur_unit < 0) | (unit_id < cur_unit)))
    p, win = p[take], win[take]
    buf.key[p] = key[win]
    buf.depth[p] = zc[win]
    buf.unit[p] = unit_id
    buf.rgb[p] = np.asarray(rgb).reshape(-1, 3)[src[win]]
    buf.xyz[p] = _affine(np.asarray(buf.world), local[keep][win])
