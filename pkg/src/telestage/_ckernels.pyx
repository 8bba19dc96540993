# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; must stay behaviourally identical to ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor
from libc.stdint cimport int16_t, uint8_t, uint16_t, uint32_t, int64_t, uint64_t

from .errors import CorruptStreamError, TruncatedStreamError

cnp.import_array()


cdef inline int _hash(uint32_t v) nogil:
    return <int>(((v * <uint32_t>2654435761u) & 0xFFFF) >> 10)


def qoi16_encode_chunks(pixels):
    cdef const uint16_t[::1] px = np.ascontiguousarray(pixels, dtype=np.uint16).ravel()
    cdef Py_ssize_t n = px.shape[0]
    cdef bytearray buf = bytearray(4 * n + 1)
    cdef uint8_t *out = buf
    cdef Py_ssize_t o = 0, i
    cdef uint16_t index[64]
    cdef uint32_t prev = 0, v
    cdef int run = 0, h, d, b
    for i in range(64):
        index[i] = 0
    with nogil:
        for i in range(n):
            v = px[i]
            if v == prev:
                run += 1
                if run == 64:
                    out[o] = 0x80 | 63
                    o += 1
                    run = 0
                continue
            if run:
                out[o] = 0x80 | (run - 1)
                o += 1
                run = 0
            h = _hash(v)
            if index[h] == v:
                out[o] = h
                o += 1
            else:
                d = <int>((v - prev + 32768) & 0xFFFF) - 32768
                if -32 <= d <= 31:
                    out[o] = 0x40 | (d + 32)
                    o += 1
                elif -8192 <= d <= 8190:
                    b = d + 8192
                    out[o] = 0xC0 | (b >> 8)
                    out[o + 1] = b & 0xFF
                    o += 2
                else:
                    out[o] = 0xFF
                    out[o + 1] = 0xFF
                    out[o + 2] = v >> 8
                    out[o + 3] = v & 0xFF
                    o += 4
            index[h] = v
            prev = v
        if run:
            out[o] = 0x80 | (run - 1)
            o += 1
    return bytes(buf[:o])


def qoi16_decode_chunks(data, Py_ssize_t pos, Py_ssize_t n_pixels):
    cdef const uint8_t[::1] buf = memoryview(bytes(data)).cast("B")
    cdef Py_ssize_t end = buf.shape[0]
    result = np.empty(n_pixels, dtype=np.uint16)
    cdef uint16_t[::1] out = result
    cdef uint16_t index[64]
    cdef uint32_t prev = 0, v = 0
    cdef Py_ssize_t px = 0, r, i
    cdef uint8_t b0, b1
    cdef int err = 0
    for i in range(64):
        index[i] = 0
    with nogil:
        while px < n_pixels:
            if pos >= end:
                err = 1
                break
            b0 = buf[pos]
            pos += 1
            if (b0 & 0xC0) == 0x80:
                r = (b0 & 0x3F) + 1
                if r > n_pixels - px:
                    err = 3
                    break
                for i in range(px, px + r):
                    out[i] = prev
                px += r
                continue
            if (b0 & 0xC0) == 0x00:
                v = index[b0]
            elif (b0 & 0xC0) == 0x40:
                v = (prev + (b0 & 0x3F) - 32) & 0xFFFF
            else:
                if pos >= end:
                    err = 2
                    break
                b1 = buf[pos]
                pos += 1
                if b0 == 0xFF and b1 == 0xFF:
                    if pos + 2 > end:
                        err = 4
                        break
                    v = (<uint32_t>buf[pos] << 8) | buf[pos + 1]
                    pos += 2
                else:
                    v = (prev + ((<uint32_t>(b0 & 0x3F) << 8) | b1) - 8192) & 0xFFFF
            out[px] = v
            px += 1
            index[_hash(v)] = v
            prev = v
    if err == 1:
        raise TruncatedStreamError(f"stream ended after {px} of {n_pixels} pixels")
    if err == 2:
        raise TruncatedStreamError("stream ended inside a two-byte chunk")
    if err == 3:
        raise CorruptStreamError("run overflows raster")
    if err == 4:
        raise TruncatedStreamError("stream ended inside a literal")
    return result, pos


def splat_unit(depth, rgb, int unit_id, src_k, src_to_dst, dst_k, dst_size, bias_dot,
               double s, buf):
    cdef const uint16_t[:, ::1] d = np.ascontiguousarray(depth, dtype=np.uint16)
    cdef const uint8_t[:, :, ::1] col = np.ascontiguousarray(rgb, dtype=np.uint8)
    cdef const double[:, ::1] M = np.ascontiguousarray(src_to_dst, dtype=np.float64)
    cdef const double[:, ::1] W = np.ascontiguousarray(buf.world, dtype=np.float64)
    cdef const double[::1] dot = np.ascontiguousarray(bias_dot, dtype=np.float64).ravel()
    cdef double[::1] bkey = buf.key
    cdef double[::1] bdepth = buf.depth
    cdef int16_t[::1] bunit = buf.unit
    cdef uint8_t[:, ::1] brgb = buf.rgb
    cdef double[:, ::1] bxyz = buf.xyz
    cdef uint64_t[::1] bcov = buf.coverage
    cdef double fx = src_k[0], fy = src_k[1], cx = src_k[2], cy = src_k[3]
    cdef double dfx = dst_k[0], dfy = dst_k[1], dcx = dst_k[2], dcy = dst_k[3]
    cdef Py_ssize_t dw = dst_size[0], dh = dst_size[1]
    cdef Py_ssize_t h = d.shape[0], w = d.shape[1], r, c, p
    cdef double z, lx, ly, X, Y, Z, u, v, key
    cdef uint64_t bit = (<uint64_t>1) << unit_id
    cdef bint use_bias = s != 0
    cdef int16_t uid = unit_id
    with nogil:
        for r in range(h):
            for c in range(w):
                if d[r, c] == 0 or d[r, c] == 0xFFFF:
                    continue
                z = d[r, c] / 1000.0
                lx = (c - cx) * z / fx
                ly = (r - cy) * z / fy
                Z = M[2, 0] * lx + M[2, 1] * ly + M[2, 2] * z + M[2, 3]
                if Z <= 0:
                    continue
                X = M[0, 0] * lx + M[0, 1] * ly + M[0, 2] * z + M[0, 3]
                Y = M[1, 0] * lx + M[1, 1] * ly + M[1, 2] * z + M[1, 3]
                u = dfx * X / Z + dcx
                v = dfy * Y / Z + dcy
                if not (u >= -0.5 and u < dw - 0.5 and v >= -0.5 and v < dh - 0.5):
                    continue
                p = <Py_ssize_t>floor(v + 0.5) * dw + <Py_ssize_t>floor(u + 0.5)
                bcov[p] |= bit
                key = Z - s * dot[p] if use_bias else Z
                if key < bkey[p] or (key == bkey[p] and (bunit[p] < 0 or uid < bunit[p])):
                    bkey[p] = key
                    bdepth[p] = Z
                    bunit[p] = uid
                    brgb[p, 0] = col[r, c, 0]
                    brgb[p, 1] = col[r, c, 1]
                    brgb[p, 2] = col[r, c, 2]
                    bxyz[p, 0] = W[0, 0] * lx + W[0, 1] * ly + W[0, 2] * z + W[0, 3]
                    bxyz[p, 1] = W[1, 0] * lx + W[1, 1] * ly + W[1, 2] * z + W[1, 3]
                    bxyz[p, 2] = W[2, 0] * lx + W[2, 1] * ly + W[2, 2] * z + W[2, 3]
