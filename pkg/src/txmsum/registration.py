"""Rigid jitter correction of image stacks via phase correlation."""

from __future__ import annotations

import numpy as np

from .stack import ImageStack


def _reflect_indices(idx, n):
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n
    j = np.mod(idx, period)
    return np.where(j < n, j, period - 1 - j)


def translate_image(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer translation moving content by (+dx, +dy), symmetric-reflect fill."""
    h, w = img.shape
    yy = _reflect_indices(np.arange(h) - int(dy), h)
    xx = _reflect_indices(np.arange(w) - int(dx), w)
    return img[np.ix_(yy, xx)]


def _wrap(idx, n):
    return idx - n if idx > n // 2 else idx


def _parabolic_offset(cm, c0, cp):
    denom = cm - 2.0 * c0 + cp
    if denom == 0:
        return 0.0
    return float(np.clip(0.5 * (cm - cp) / denom, -0.5, 0.5))


def estimate_shift(frame: np.ndarray, reference: np.ndarray, subpixel=False):
    """Translation (dx, dy) that maps ``reference`` onto ``frame``.

    The argmax of the phase cross-correlation; exact ties break toward
    smaller |dx| + |dy|, then lexicographically on (dx, dy). Both images are
    mean-subtracted and Hann-windowed before the FFT to suppress spurious
    periodic-wrap peaks. With ``subpixel`` a parabolic peak refinement
    returns float shifts.
    """
    frame = np.asarray(frame, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if frame.shape != reference.shape:
        raise ValueError("frame and reference must share dimensions")
    if frame.ndim != 2:
        raise ValueError("expected 2-D images")
    if np.ptp(frame) == 0 or np.ptp(reference) == 0:
        raise ValueError("constant image: correlation peak undefined")
    h, w = frame.shape
    window = np.hanning(h)[:, None] * np.hanning(w)[None, :]
    fw = (frame - frame.mean()) * window
    gw = (reference - reference.mean()) * window
    cross = np.fft.fft2(fw) * np.conj(np.fft.fft2(gw))
    # regularized spectral whitening: sharpens the peak without letting
    # noise-only frequencies dominate the way full normalization does
    mag = np.abs(cross)
    corr = np.fft.ifft2(cross / (mag + 0.05 * mag.mean() + 1e-300)).real
    peak = corr.max()
    cands = np.argwhere(corr == peak)
    shifts = [(_wrap(int(ix), w), _wrap(int(iy), h)) for iy, ix in cands]
    dx, dy = min(shifts, key=lambda s: (abs(s[0]) + abs(s[1]), s[0], s[1]))
    if not subpixel:
        return dx, dy
    iy, ix = dy % h, dx % w
    off_x = _parabolic_offset(corr[iy, (ix - 1) % w], corr[iy, ix],
                              corr[iy, (ix + 1) % w])
    off_y = _parabolic_offset(corr[(iy - 1) % h, ix], corr[iy, ix],
                              corr[(iy + 1) % h, ix])
    return dx + off_x, dy + off_y


def _shift_or_zero(frame, reference):
    # constant frames carry no shift information and translating them is a
    # no-op, so report zero instead of failing the whole stack
    if np.ptp(frame) == 0 or np.ptp(reference) == 0:
        return 0, 0
    return estimate_shift(frame, reference)


def _loo_medians(data):
    """Per-frame leave-one-out temporal medians from two order statistics.

    A frame's own noise leaks into the plain median and, after spectral
    whitening, correlates as a sharp zero-shift peak; excluding the frame
    removes that artifact.
    """
    t = data.shape[0]
    s = np.sort(data, axis=0)
    if t % 2 == 0:
        lo, hi = s[t // 2 - 1], s[t // 2]
        return np.where(data <= lo[None], hi[None], lo[None])
    c = (t - 1) // 2
    below, mid, above = s[c - 1], s[c], s[c + 1]
    return np.where(data <= below[None], 0.5 * (mid + above)[None],
                    np.where(data >= above[None], 0.5 * (below + mid)[None],
                             0.5 * (below + above)[None]))


def _translate_all(frames, shifts):
    out = np.empty_like(frames)
    for t in range(frames.shape[0]):
        dx, dy = shifts[t]
        out[t] = translate_image(frames[t], -dx, -dy) if (dx or dy) else frames[t]
    return out


def correct_jitter(stack: ImageStack, reference: ImageStack | None = None,
                   max_passes: int = 5) -> tuple[ImageStack, np.ndarray]:
    """Undo per-frame translations against the temporal median frame.

    The median of a jittered stack is itself smeared and sits at the sample
    median of the shifts, so the estimate is iterated: each pass translates
    fresh from the original frames by the accumulated shifts and re-estimates
    against the sharper median, until the residuals vanish. The default
    reference is the leave-one-out temporal median of the stack itself
    (leave-one-out because a frame's own noise otherwise correlates as a
    spurious zero-shift peak); pass ``reference`` (e.g. a denoised copy of
    the same acquisition) to estimate against that stack's median instead.

    Shifts are reported relative to frame 0 (the convention phantom ground
    truth uses), and each frame is translated by its negated shift with
    reflected fill.
    """
    if stack.frames < 2:
        raise ValueError("jitter correction needs at least 2 frames")
    frames = stack.data
    ref_frames = None
    if reference is not None:
        if reference.data.shape != frames.shape:
            raise ValueError("reference stack must match the input dimensions")
        ref_frames = reference.data
    total = np.zeros((stack.frames, 2), dtype=int)
    for _ in range(max_passes):
        corrected = _translate_all(frames, total)
        if ref_frames is None:
            references = _loo_medians(corrected)
        else:
            med = np.median(_translate_all(ref_frames, total), axis=0)
            references = np.broadcast_to(med, frames.shape)
        resid = np.array([_shift_or_zero(corrected[t], references[t])
                          for t in range(stack.frames)], dtype=int)
        if not resid.any():
            break
        total += resid
    shifts = total - total[0]
    out = ImageStack(width=stack.width, height=stack.height,
                     data=_translate_all(frames, shifts),
                     energies=stack.energies, peak=stack.peak)
    return out, shifts
